//! Argument parsing and subcommand dispatch. Machine output goes to stdout
//! as JSON; failures go to stderr as one `{code, message}` line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use seam_core::model::{Meeting, StandInConfig, Tick};
use seam_core::playback::{Contribution, SpliceOptions};
use seam_core::recorder::{load, MANIFEST_FILE};
use seam_core::session::Session;
use seam_core::sim::{self, RunOptions, Script, TraceAssertion};
use seam_core::store::EntityStore;

use crate::config::{FileConfig, Overrides, Settings};
use crate::error::{CliError, ErrorKind};
use crate::live::{self, Command as LiveCommand, StopPolicy};
use crate::service::{
    self, abridge_chain, contribution_from_media, decode_voice, resolve_recording, splice_into_store, view_range, viewpoint_arg,
    CommentInput,
};

#[derive(Debug, Parser)]
#[command(name = "seam", version, about = "Record, replay, splice and abridge asynchronous meetings")]
pub struct Cli {
    /// Directory holding entities and recordings.
    #[arg(long, env = "SEAM_DATA_ROOT", global = true)]
    pub data_root: Option<PathBuf>,
    /// TOML config file, read below flags and environment.
    #[arg(long, env = "SEAM_CONFIG", global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "SEAM_LLM_URL", global = true)]
    pub llm_url: Option<String>,
    #[arg(long, env = "SEAM_TTS_URL", global = true)]
    pub tts_url: Option<String>,
    #[arg(long, env = "SEAM_API_KEY", global = true, hide_env_values = true)]
    pub api_key: Option<String>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Manage meetings.
    #[command(subcommand)]
    Meeting(MeetingCmd),
    /// Manage stand-in configurations.
    #[command(subcommand)]
    Standin(StandinCmd),
    /// Host a live session.
    #[command(subcommand)]
    Session(SessionCmd),
    /// Run scripted participants against a session.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Inspect recordings.
    #[command(subcommand)]
    Playback(PlaybackCmd),
    /// Splice comments into a recording, producing the next iteration.
    Splice(SpliceArgs),
    /// Abridge an iteration chain for one viewer.
    Abridge(AbridgeArgs),
    /// Serve the HTTP API.
    #[command(subcommand)]
    Api(ApiCmd),
}

#[derive(Debug, Subcommand)]
pub enum MeetingCmd {
    Create {
        #[arg(long)]
        file: PathBuf,
    },
    Show {
        id: String,
    },
    List,
}

#[derive(Debug, Subcommand)]
pub enum StandinCmd {
    /// Validate and store a stand-in config.
    Config {
        #[arg(long)]
        meeting: String,
        #[arg(long)]
        file: PathBuf,
    },
    Show {
        #[arg(long)]
        meeting: String,
        #[arg(long)]
        absentee: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum SessionCmd {
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub meeting: String,
    #[arg(long)]
    pub iter: u32,
    #[arg(long, env = "SEAM_PORT")]
    pub port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Close after this many ticks.
    #[arg(long)]
    pub ticks: Option<u64>,
    /// Close once every participant who joined has left.
    #[arg(long)]
    pub close_when_empty: bool,
    /// Stand-in position as `id=x,y,z`; may repeat.
    #[arg(long = "standin-pos", value_parser = parse_position)]
    pub standin_pos: Vec<(String, [f32; 3])>,
}

#[derive(Debug, Subcommand)]
pub enum SimCmd {
    Run {
        script: PathBuf,
        /// Meeting to use when the script does not embed one.
        #[arg(long)]
        meeting: Option<String>,
        /// Expected agent trace; a divergence exits with status 2.
        #[arg(long)]
        assert: Option<PathBuf>,
        /// Write the full agent trace here.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum PlaybackCmd {
    Info {
        #[arg(long)]
        rec: Option<String>,
    },
    /// Export views for ticks `[from, to)` as JSON.
    Export {
        #[arg(long)]
        rec: Option<String>,
        /// Participant id, or `none` for the third-person view.
        #[arg(long)]
        viewpoint: Option<String>,
        #[arg(long, default_value_t = 0)]
        from: Tick,
        #[arg(long)]
        to: Tick,
        /// Include decoded PCM for each tick.
        #[arg(long)]
        samples: bool,
    },
}

#[derive(Debug, Args)]
pub struct SpliceArgs {
    #[arg(long)]
    pub rec: String,
    /// JSON file with one comment or an array of comments.
    #[arg(long)]
    pub comments: PathBuf,
    /// Recorded avatars face the commenter and nod instead of freezing.
    #[arg(long)]
    pub listening: bool,
}

#[derive(Debug, Args)]
pub struct AbridgeArgs {
    /// Head recording of the chain.
    #[arg(long)]
    pub chain: String,
    #[arg(long)]
    pub viewer: String,
}

#[derive(Debug, Subcommand)]
pub enum ApiCmd {
    Serve {
        #[arg(long, env = "SEAM_PORT")]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
    },
}

fn parse_position(s: &str) -> Result<(String, [f32; 3]), String> {
    let (id, xyz) = s.split_once('=').ok_or("expected id=x,y,z")?;
    let v: Vec<f32> = xyz.split(',').map(|p| p.trim().parse::<f32>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    let [x, y, z] = v[..] else { return Err("expected three coordinates".into()) };
    if !(x.is_finite() && y.is_finite() && z.is_finite()) {
        return Err("coordinates must be finite".into());
    }
    Ok((id.to_string(), [x, y, z]))
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand { 1 } else { 0 };
            }
            let message = e.render().to_string();
            let first = message.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::usage(first).to_json());
            return ErrorKind::Usage.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.kind.exit_code()
        }
    }
}

fn settings(cli: &Cli) -> Result<Settings, CliError> {
    let file = cli.config.as_deref().map(FileConfig::load).transpose()?;
    let overrides = Overrides {
        data_root: cli.data_root.clone(),
        port: None,
        llm_url: cli.llm_url.clone(),
        tts_url: cli.tts_url.clone(),
        api_key: cli.api_key.clone(),
    };
    Ok(Settings::resolve(overrides, file))
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value).expect("output serializes");
    writeln!(out).and_then(|_| out.flush()).map_err(|e| CliError::io(format!("stdout: {e}")))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| CliError::io(format!("runtime: {e}")))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut settings = settings(&cli)?;
    let store = EntityStore::open(&settings.data_root);
    match cli.command {
        Cmd::Meeting(MeetingCmd::Create { file }) => {
            let meeting: Meeting = read_json(&file)?;
            store.store_meeting(&meeting)?;
            print_json(&json!({ "meeting_id": meeting.meeting_id }))
        }
        Cmd::Meeting(MeetingCmd::Show { id }) => print_json(&store.load_meeting(&id)?),
        Cmd::Meeting(MeetingCmd::List) => print_json(&store.list_meetings()?),
        Cmd::Standin(StandinCmd::Config { meeting, file }) => {
            let config: StandInConfig = read_json(&file)?;
            store.store_standin(&meeting, &config)?;
            print_json(&json!({ "meeting_id": meeting, "absentee_id": config.absentee_id }))
        }
        Cmd::Standin(StandinCmd::Show { meeting, absentee }) => print_json(&store.load_standin(&meeting, &absentee)?),
        Cmd::Session(SessionCmd::Serve(args)) => {
            if let Some(p) = args.port {
                settings.port = p;
            }
            serve_session(&store, &settings, args)
        }
        Cmd::Sim(SimCmd::Run { script, meeting, assert, trace_out }) => run_sim(&store, &script, meeting, assert, trace_out),
        Cmd::Playback(PlaybackCmd::Info { rec }) => {
            let dir = pick_recording(&store, rec.as_deref())?;
            let rec = load(&dir)?;
            print_json(&json!({
                "id": service::recording_id(&store, &dir),
                "recording_dir": dir,
                "manifest_path": dir.join(MANIFEST_FILE),
                "manifest": rec.manifest,
            }))
        }
        Cmd::Playback(PlaybackCmd::Export { rec, viewpoint, from, to, samples }) => {
            let dir = pick_recording(&store, rec.as_deref())?;
            let rec = load(&dir)?;
            print_json(&view_range(&rec, viewpoint_arg(viewpoint.as_deref()), from, to, samples)?)
        }
        Cmd::Splice(args) => {
            let dir = resolve_recording(&store, &args.rec)?;
            let rec = load(&dir)?;
            let rates = seam_core::agent::AudioRates { tick_rate: rec.manifest.tick_rate, sample_rate: rec.manifest.audio_sample_rate };
            let contributions = read_comments(&args.comments, &settings, rates)?;
            print_json(&splice_into_store(&store, &dir, &contributions, SpliceOptions { listening: args.listening })?)
        }
        Cmd::Abridge(args) => {
            let dir = resolve_recording(&store, &args.chain)?;
            let out = abridge_chain(&store, &settings, &dir, &args.viewer)?;
            print_json(&out)
        }
        Cmd::Api(ApiCmd::Serve { port, bind }) => {
            if let Some(p) = port {
                settings.port = p;
            }
            let rt = runtime()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((bind.as_str(), settings.port))
                    .await
                    .map_err(|e| CliError::io(format!("bind {bind}:{}: {e}", settings.port)))?;
                let addr = listener.local_addr().map_err(|e| CliError::io(e.to_string()))?;
                print_json(&json!({ "listening": addr.to_string() }))?;
                log::info!("api listening on http://{addr}/v1");
                let app = crate::api::router(crate::api::AppState::new(settings));
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await
                    .map_err(|e| CliError::io(format!("serve: {e}")))
            })
        }
    }
}

/// With no reference, the data root must hold exactly one recording.
fn pick_recording(store: &EntityStore, rec: Option<&str>) -> Result<PathBuf, CliError> {
    if let Some(r) = rec {
        return resolve_recording(store, r);
    }
    let all = store.list_recordings()?;
    match all.as_slice() {
        [one] => Ok(one.dir.clone()),
        [] => Err(CliError::not_found("no recordings under the data root")),
        _ => Err(CliError::usage(format!("{} recordings found; pass --rec", all.len()))),
    }
}

/// Reads comments given as captured contributions or as media specs. WAV
/// paths are relative to the comments file.
fn read_comments(path: &Path, settings: &Settings, rates: seam_core::agent::AudioRates) -> Result<Vec<Contribution>, CliError> {
    let value: serde_json::Value = read_json(path)?;
    let items = match value {
        serde_json::Value::Array(items) => items,
        other => vec![other],
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let tts = settings.tts();
    let mut out = Vec::new();
    for (i, item) in items.into_iter().enumerate() {
        let input: CommentInput =
            serde_json::from_value(item).map_err(|e| CliError::invalid(format!("{} comment {i}: {e}", path.display())))?;
        out.push(match input {
            CommentInput::Captured(c) => c,
            CommentInput::Media(spec) => {
                let samples = match &spec.wav {
                    Some(w) => {
                        let p = base.join(w);
                        let bytes = std::fs::read(&p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
                        Some(decode_voice(&bytes, rates)?)
                    }
                    None => None,
                };
                contribution_from_media(
                    spec.id.clone().unwrap_or_else(|| format!("{}-{i}", spec.author_id)),
                    &spec.author_id,
                    spec.anchor_tick,
                    i as u64,
                    samples.as_deref(),
                    spec.text.as_deref(),
                    spec.position,
                    spec.yaw,
                    tts.as_ref(),
                    rates,
                )?
            }
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct SimOutput {
    manifest_path: PathBuf,
    recording_dir: PathBuf,
    recording_id: Option<String>,
    ticks: Tick,
    attendees: Vec<String>,
    drop_counters: seam_core::session::DropCounters,
    deliveries: BTreeMap<String, sim::Deliveries>,
    sent: BTreeMap<String, u64>,
    degradations: Vec<String>,
    trace_entries: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    assertion: Option<sim::TraceReport>,
}

fn run_sim(
    store: &EntityStore,
    script_path: &Path,
    meeting_id: Option<String>,
    assert: Option<PathBuf>,
    trace_out: Option<PathBuf>,
) -> Result<(), CliError> {
    let script = Script::from_file(script_path)?;
    let (meeting, standins) = match (&script.meeting, meeting_id) {
        (Some(m), _) => {
            store.store_meeting(m)?;
            let standins = script.standins.clone().unwrap_or_default();
            for s in &standins {
                store.store_standin(&m.meeting_id, s)?;
            }
            (m.clone(), standins)
        }
        (None, Some(id)) => {
            let m = store.load_meeting(&id)?;
            let standins = service::standins_for_iteration(store, &m, script.iteration)?;
            (m, standins)
        }
        (None, None) => return Err(CliError::usage("script embeds no meeting; pass --meeting")),
    };
    let result = sim::run(&script, &meeting, &standins, &store.recordings_dir(), RunOptions::default())?;
    if let Some(p) = &trace_out {
        let text = serde_json::to_string_pretty(&result.agent_trace).expect("trace serializes");
        std::fs::write(p, text).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
    }
    let report = match &assert {
        Some(p) => {
            let expected: TraceAssertion = read_json(p)?;
            Some(sim::assert_trace(&result.agent_trace, &expected))
        }
        None => None,
    };
    let failed = report.as_ref().is_some_and(|r| !r.passed);
    print_json(&SimOutput {
        manifest_path: result.recording_dir.join(MANIFEST_FILE),
        recording_id: service::recording_id(store, &result.recording_dir),
        recording_dir: result.recording_dir,
        ticks: result.ticks,
        attendees: result.manifest.attendees,
        drop_counters: result.drop_counters,
        deliveries: result.deliveries,
        sent: result.sent,
        degradations: result.degradations,
        trace_entries: result.agent_trace.len(),
        assertion: report,
    })?;
    if failed {
        return Err(CliError::new(ErrorKind::Invalid, "trace_divergence", "agent trace diverged from the expected trace"));
    }
    Ok(())
}

fn serve_session(store: &EntityStore, settings: &Settings, args: ServeArgs) -> Result<(), CliError> {
    let meeting = store.load_meeting(&args.meeting)?;
    let standins = service::standins_for_iteration(store, &meeting, args.iter)?;
    let mut options = settings.session_options();
    options.standin_positions = args.standin_pos.into_iter().collect();
    let session = Session::create(meeting, args.iter, standins, args.seed, &store.recordings_dir(), options)?;
    let policy = StopPolicy { max_ticks: args.ticks, close_when_empty: args.close_when_empty };
    let rt = runtime()?;
    let finished = rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((args.bind.as_str(), settings.port))
            .await
            .map_err(|e| CliError::io(format!("bind {}:{}: {e}", args.bind, settings.port)))?;
        let addr = listener.local_addr().map_err(|e| CliError::io(e.to_string()))?;
        let (handle, done) = live::spawn(session, policy);
        print_json(&json!({ "listening": addr.to_string() }))?;
        log::info!("session listening on {addr}");
        let stopper = handle.clone();
        tokio::spawn(async move {
            if tokio::signal::ctrl_c().await.is_ok() {
                stopper.send(LiveCommand::Stop);
            }
        });
        Ok::<_, CliError>(live::serve_tcp(listener, handle, done).await?)
    })?;
    print_json(&json!({
        "manifest_path": finished.recording_dir.join(MANIFEST_FILE),
        "recording_dir": finished.recording_dir,
        "recording_id": service::recording_id(store, &finished.recording_dir),
        "ticks": finished.ticks,
        "attendees": finished.manifest.attendees,
    }))
}
