use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fxchart::config::RunConfig;
use fxchart::pipeline::{run_pipeline, Stage};
use fxchart::{Error, Result};

/// Simulate FX price charts, label them with trading rules and train a CNN on them.
#[derive(Debug, Parser)]
#[command(name = "fxchart", version)]
struct Args {
    /// JSON run configuration with a `preset` field.
    #[arg(long)]
    config: PathBuf,

    /// simulate, dataset, train, eval or all.
    #[arg(long, default_value = "all")]
    stage: String,

    /// Output directory; overrides `out` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads (results do not depend on this).
    #[arg(long)]
    threads: Option<usize>,

    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(args: Args) -> Result<()> {
    let stage: Stage = args.stage.parse()?;
    let mut cfg = RunConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out = Some(out);
    }
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config(vec!["out: no output directory (use --out or set `out`)".into()]))?;
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(Error::Config(vec!["--threads must be >= 1".into()]));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(vec![format!("--threads: {e}")]))?;
    }
    run_pipeline(&cfg, stage, &out)?;
    eprintln!("{} finished for preset {}; artifacts in {}", stage, cfg.preset, out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
