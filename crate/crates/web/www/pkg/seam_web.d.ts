/* tslint:disable */
/* eslint-disable */

/**
 * JSON [`Reply`] for one utterance.
 */
export function replyTo(text: string, facing_standin: boolean): string;

/**
 * The bundled meeting, for labelling the page.
 */
export function scenario(): string;

/**
 * JSON [`SpeakerTimeline`] for `id start-end` spans.
 */
export function speakerTimeline(spans: string, seed: number): string;

/**
 * JSON [`Walkthrough`] for `id: text` lines.
 */
export function walkthrough(lines: string, seed: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly replyTo: (a: number, b: number, c: number) => [number, number];
    readonly scenario: () => [number, number];
    readonly speakerTimeline: (a: number, b: number, c: number) => [number, number, number, number];
    readonly walkthrough: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
