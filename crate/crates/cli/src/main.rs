use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use wmra_cli::{run_experiment, Config, ConfigError, Experiment, Overrides};
use wmra_core::WmraError;

/// Simulate welfare-maximizing regulation allocation for an EV fleet.
#[derive(Debug, Parser)]
#[command(name = "wmra", version)]
struct Args {
    /// TOML configuration; defaults reproduce the reference setup.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "fig2", value_name = "NAME")]
    experiment: Experiment,
    /// Output directory for CSV files.
    #[arg(long, default_value = "out", value_name = "DIR")]
    out: PathBuf,
    /// First seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Horizon in slots, for every experiment.
    #[arg(long, value_name = "T")]
    slots: Option<u64>,
    /// V as a multiple of V_max (fig2, fig3, custom).
    #[arg(long, value_name = "F")]
    v_mult: Option<f64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0, value_name = "N")]
    threads: usize,
    /// Write every slot instead of every `run.stride` slots.
    #[arg(long)]
    full_resolution: bool,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.chain().any(|c| matches!(c.downcast_ref::<WmraError>(), Some(WmraError::Invariant { .. })))
            {
                EXIT_INVARIANT
            } else if e.chain().any(|c| c.is::<ConfigError>()) {
                EXIT_CONFIG
            } else {
                1
            };
            ExitCode::from(code)
        }
    }
}

fn run(args: &Args) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    Overrides {
        seed: args.seed,
        slots: args.slots,
        v_mult: args.v_mult,
        full_resolution: args.full_resolution,
    }
    .apply(&mut cfg);
    cfg.validate()?;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.threads).build()?;
    let report = pool.install(|| run_experiment(args.experiment, &cfg, &args.out))?;
    for note in &report.notes {
        eprintln!("{note}");
    }
    for f in &report.files {
        println!("{}", f.display());
    }
    Ok(())
}
