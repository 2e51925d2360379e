//! `gpucrsim`: checkpoint, restore, migrate and benchmark simulated GPU
//! processes from the command line.
//!
//! Results go to stdout as JSON (or CSV files for sweeps); progress and
//! errors go to stderr. Exit codes: 0 success, 1 usage or I/O error,
//! 2 corrupt image, 3 oracle mismatch.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpucr::cr::{CkptMode, RestoreMode};

#[derive(Debug, Parser)]
#[command(name = "gpucrsim", version, about = "Deterministic GPU process simulator with concurrent checkpoint/restore")]
struct Cli {
    /// Simulator config (JSON or key = value lines).
    #[arg(long, global = true, env = "GPUCRSIM_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run a trace and checkpoint it before the call with seq AT.
    Ckpt(CkptArgs),
    /// Restore an image, optionally continuing a trace after its cursor.
    Restore(RestoreArgs),
    /// Live-migrate a process to a peer and finish the trace there.
    Migrate(MigrateArgs),
    /// Run a scenario file, optionally swept over one parameter.
    Bench(BenchArgs),
    /// Summarize an image.
    Inspect(InspectArgs),
    /// Generate a synthetic trace from a named workload profile.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
pub struct CkptArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub at: u64,
    /// cow, dirty or stw.
    #[arg(long, default_value = "dirty")]
    pub mode: CkptMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// ondemand or full.
    #[arg(long, default_value = "ondemand")]
    pub mode: RestoreMode,
    /// Pre-created contexts; defaults to the config's pool_size.
    #[arg(long)]
    pub pool: Option<usize>,
    /// The trace the image was taken from; the restored process runs it to the end.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MigrateArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub at: u64,
    /// Network bandwidth in bytes per second.
    #[arg(long)]
    pub net_bw: u64,
    #[arg(long, default_value = "dirty")]
    pub mode: CkptMode,
    #[arg(long, default_value = "ondemand")]
    pub restore_mode: RestoreMode,
    /// Also write the transferred image here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Scenario JSON file.
    #[arg(long)]
    pub scenario: PathBuf,
    /// key=a,b,c
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long)]
    pub csv: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Desk profile name, e.g. gpt2-infer, or a profile JSON file.
    #[arg(long)]
    pub profile: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = commands::load_config(cli.config.as_deref()).and_then(|cfg| match cli.cmd {
        Cmd::Ckpt(a) => commands::ckpt(cfg, a),
        Cmd::Restore(a) => commands::restore(cfg, a),
        Cmd::Migrate(a) => commands::migrate(cfg, a),
        Cmd::Bench(a) => commands::bench(cfg, a),
        Cmd::Inspect(a) => commands::inspect(a),
        Cmd::Gen(a) => commands::gen(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gpucrsim: {e}");
            ExitCode::from(e.code())
        }
    }
}
