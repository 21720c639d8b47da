use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use recon_core::config::RunConfig;
use recon_core::io::write_atomic;
use recon_core::pipeline::{self, EvalKind};
use recon_core::Result;

/// Fragment-based reconstruction of RGB-D sequences with keypoint features.
#[derive(Parser, Debug)]
#[command(name = "recon", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (`key = value` lines); missing keys keep defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (run, synth) or file (eval, config).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Track, optimise and fuse a sequence directory.
    Run { sequence: PathBuf },
    /// Score predictions against the ground truth of a sequence directory.
    Eval {
        /// depth, ate or matching
        kind: EvalKind,
        /// Sequence directory (depth), run directory, or trajectory/matches file.
        pred: PathBuf,
        /// Sequence directory holding `gt/`.
        gt: PathBuf,
    },
    /// Generate a synthetic tube sequence.
    Synth {
        /// default, noisy, occlusion, loop or short
        #[arg(default_value = "default")]
        scenario: String,
    },
    /// Print the effective configuration with every key documented.
    Config,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = cli.common.out.as_deref();
    match cli.command {
        Command::Run { sequence } => {
            let out = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("run"));
            let report = pipeline::cmd_run(&sequence, &out, &cfg)?;
            print!("{}", report.to_kv());
            println!("out={}", out.display());
        }
        Command::Eval { kind, pred, gt } => {
            let text = pipeline::cmd_eval(kind, &pred, &gt)?;
            emit(&text, out)?;
        }
        Command::Synth { scenario } => {
            let out = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&scenario));
            let seq = pipeline::cmd_synth(&scenario, cfg.seed, &out)?;
            println!("frames={}\nseed={}\nout={}", seq.frames.len(), cfg.seed, out.display());
        }
        Command::Config => emit(&cfg.to_text(), out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("usage: {first}");
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
