//! Command-line driver: configuration, run directories, manifests and replay.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid configuration, 3 runtime
//! failure (the message names the failing stage).

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use meaflow::baselines::BaselineMethod;
use meaflow::par;
use serde::{Deserialize, Serialize};

mod commands;
pub mod config;
pub mod manifest;

pub use config::RunConfig;
pub use manifest::{FileDigest, Manifest, MANIFEST_FILE};

pub const ENV_THREADS: &str = "MEAFLOW_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage {stage}: {message}")]
    Runtime {
        stage: &'static str,
        message: String,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Runtime { .. } => 3,
        }
    }
}

pub(crate) trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: Display> Stage<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime {
            stage,
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "meaflow",
    version,
    about = "MEA spike-signal classification pipeline"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML configuration; flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Write outputs here instead of a fresh `runs/<timestamp>-<hash>/`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for the data-parallel stages.
    #[arg(long, global = true, env = ENV_THREADS)]
    pub threads: Option<usize>,
    /// Serial reductions and zeroed wall-clock fields.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Seed for generation and evaluation (sets every seed in the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Command {
    /// Generate labeled feature tables, one CSV per dpi.
    Synth(SynthArgs),
    /// High-pass filter a recording.
    Filter(RecordingArgs),
    /// Filter a recording and detect threshold crossings.
    Detect(DetectArgs),
    /// Fit scaling, importance and PCA on a table and apply them.
    Preprocess(TableArgs),
    /// Train one model on the first fold's training split.
    Train(MethodArgs),
    /// Cross-validate one method.
    Eval(MethodArgs),
    /// Cross-validate several methods on shared folds.
    Compare(CompareArgs),
    /// Cross-validate every dpi and summarize.
    Pipeline(PipelineArgs),
    /// Re-execute a run from its manifest and compare every output.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Rows per class.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Class separation.
    #[arg(long)]
    pub separation: Option<f64>,
    /// Days to generate (repeatable); defaults to `eval.dpis`.
    #[arg(long = "dpi")]
    pub dpis: Vec<u8>,
    /// Also write one raw recording per class.
    #[arg(long)]
    pub recordings: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RecordingArgs {
    /// Recording CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DetectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub recording: RecordingArgs,
    /// The input is already filtered.
    #[arg(long)]
    pub prefiltered: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TableArgs {
    /// Feature table CSV; a synthetic table is generated when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Day the table belongs to.
    #[arg(long, default_value_t = 0)]
    pub dpi: u8,
    /// Rows per class for a generated table.
    #[arg(long)]
    pub rows: Option<usize>,
}

fn parse_method(s: &str) -> Result<BaselineMethod, String> {
    s.parse().map_err(|e: meaflow::Error| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct MethodArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub table: TableArgs,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<BaselineMethod>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CompareArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub table: TableArgs,
    /// Methods to compare (comma-separated or repeated).
    #[arg(long = "methods", value_delimiter = ',', value_parser = parse_method)]
    pub methods: Vec<BaselineMethod>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PipelineArgs {
    /// Directory with one `*_dpi<d>.csv` table per day; synthetic when absent.
    #[arg(long)]
    pub input_dir: Option<PathBuf>,
    /// Days to run (repeatable); defaults to `eval.dpis`.
    #[arg(long = "dpi")]
    pub dpis: Vec<u8>,
    /// Rows per class for generated tables.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Also run every method in `eval.methods` and write the comparison grid.
    #[arg(long)]
    pub compare: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// A manifest file or the run directory holding it.
    pub manifest: PathBuf,
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p)
        .unwrap_or_else(|_| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()))
}

impl GlobalArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if self.deterministic {
            cfg.deterministic = true;
        }
        if let Some(seed) = self.seed {
            cfg.synth.seed = seed;
            cfg.recording.seed = seed;
            cfg.eval.seed = seed;
        }
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Filter(_) => "filter",
            Command::Detect(_) => "detect",
            Command::Preprocess(_) => "preprocess",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Compare(_) => "compare",
            Command::Pipeline(_) => "pipeline",
            Command::Replay(_) => "replay",
        }
    }

    /// Folds the flags into the configuration and makes input paths absolute.
    fn apply(&mut self, cfg: &mut RunConfig) {
        let table_args = |t: &mut TableArgs, cfg: &mut RunConfig| {
            if let Some(p) = t.input.take() {
                cfg.io.input = Some(p);
            }
            if let Some(r) = t.rows {
                cfg.synth.rows_per_class = r;
            }
        };
        match self {
            Command::Synth(a) => {
                if let Some(r) = a.rows {
                    cfg.synth.rows_per_class = r;
                }
                if let Some(s) = a.separation {
                    cfg.synth.separation = s;
                }
                if !a.dpis.is_empty() {
                    cfg.eval.dpis = a.dpis.clone();
                }
            }
            Command::Filter(a) | Command::Detect(DetectArgs { recording: a, .. }) => {
                if let Some(p) = a.input.take() {
                    cfg.io.input = Some(p);
                }
            }
            Command::Preprocess(t) => table_args(t, cfg),
            Command::Train(m) | Command::Eval(m) => {
                table_args(&mut m.table, cfg);
                if let Some(method) = m.method {
                    cfg.eval.method = method;
                }
            }
            Command::Compare(c) => {
                table_args(&mut c.table, cfg);
                if !c.methods.is_empty() {
                    cfg.eval.methods = c.methods.clone();
                }
            }
            Command::Pipeline(p) => {
                if let Some(d) = p.input_dir.take() {
                    cfg.io.input_dir = Some(d);
                }
                if !p.dpis.is_empty() {
                    cfg.eval.dpis = p.dpis.clone();
                }
                if let Some(r) = p.rows {
                    cfg.synth.rows_per_class = r;
                }
            }
            Command::Replay(_) => {}
        }
        cfg.io.input = cfg.io.input.as_deref().map(absolute);
        cfg.io.input_dir = cfg.io.input_dir.as_deref().map(absolute);
    }
}

/// Parses `args` (program name first), runs, prints the run directory on
/// success and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command line and returns the run directory.
pub fn execute(cli: Cli) -> Result<PathBuf, CliError> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        par::init_threads(n);
    }
    let mut command = cli.command;
    if let Command::Replay(args) = &command {
        return replay(&args.manifest, cli.global.out_dir.as_deref());
    }
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path).map_err(CliError::Config)?,
        None => RunConfig::default(),
    };
    cli.global.apply(&mut cfg);
    command.apply(&mut cfg);
    cfg.validate().map_err(CliError::Config)?;
    let dir = prepare_run_dir(&cfg, cli.global.out_dir.as_deref())?;
    let manifest = run_recorded(&command, &cfg, &dir)?;
    eprintln!(
        "{}: {} output files",
        command.name(),
        manifest.outputs.len()
    );
    Ok(dir)
}

fn prepare_run_dir(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<PathBuf, CliError> {
    if let Some(dir) = out_dir {
        if dir.exists() && fs::read_dir(dir).stage("setup")?.next().is_some() {
            return Err(CliError::Runtime {
                stage: "setup",
                message: format!("output directory {} is not empty", dir.display()),
            });
        }
        fs::create_dir_all(dir).stage("setup")?;
        return Ok(dir.to_path_buf());
    }
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-{}", cfg.hash());
    fs::create_dir_all(&cfg.io.runs_dir).stage("setup")?;
    for attempt in 0.. {
        let name = if attempt == 0 {
            base.clone()
        } else {
            format!("{base}-{attempt}")
        };
        let dir = cfg.io.runs_dir.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).stage("setup"),
        }
    }
    unreachable!()
}

/// Executes `command` into `dir` and writes the manifest.
fn run_recorded(command: &Command, cfg: &RunConfig, dir: &Path) -> Result<Manifest, CliError> {
    par::set_mode(if cfg.deterministic {
        par::Exec::Serial
    } else {
        par::Exec::Parallel
    });
    let inputs = commands::execute(command, cfg, dir)?;
    let inputs = inputs
        .iter()
        .map(|p| FileDigest::of(p, p.clone()))
        .collect::<Result<Vec<_>, _>>()
        .stage("manifest")?;
    let manifest = Manifest {
        format: manifest::MANIFEST_FORMAT,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.clone(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seed: cfg.eval.seed,
        deterministic: cfg.deterministic,
        threads: par::threads(),
        parallel_build: par::compiled_parallel(),
        created_utc: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        inputs,
        outputs: manifest::digest_outputs(dir).stage("manifest")?,
    };
    manifest.write(dir).stage("manifest")?;
    Ok(manifest)
}

/// Re-runs a recorded command in determinism mode and checks that every
/// recorded output comes out byte-identical.
pub fn replay(path: &Path, out_dir: Option<&Path>) -> Result<PathBuf, CliError> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let original = Manifest::load(&file).map_err(CliError::Config)?;
    let mut cfg = original.config.clone();
    cfg.deterministic = true;
    cfg.validate().map_err(CliError::Config)?;
    for input in &original.inputs {
        let now = FileDigest::of(&input.path, input.path.clone()).stage("replay")?;
        if now.sha256 != input.sha256 {
            return Err(CliError::Runtime {
                stage: "replay",
                message: format!(
                    "input {} changed since the original run",
                    input.path.display()
                ),
            });
        }
    }
    let dir = prepare_run_dir(&cfg, out_dir)?;
    let again = run_recorded(&original.command, &cfg, &dir)?;
    let mut problems = Vec::new();
    for want in &original.outputs {
        match again.outputs.iter().find(|o| o.path == want.path) {
            Some(got) if got.sha256 == want.sha256 => {}
            Some(_) => problems.push(format!("{} differs", want.path.display())),
            None => problems.push(format!("{} missing", want.path.display())),
        }
    }
    for got in &again.outputs {
        if !original.outputs.iter().any(|o| o.path == got.path) {
            problems.push(format!("{} is new", got.path.display()));
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Runtime {
            stage: "replay",
            message: problems.join("; "),
        });
    }
    eprintln!("replay: {} outputs byte-identical", again.outputs.len());
    Ok(dir)
}
