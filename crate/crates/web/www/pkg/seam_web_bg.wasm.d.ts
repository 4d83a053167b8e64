/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const replyTo: (a: number, b: number, c: number) => [number, number];
export const scenario: () => [number, number];
export const speakerTimeline: (a: number, b: number, c: number) => [number, number, number, number];
export const walkthrough: (a: number, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
