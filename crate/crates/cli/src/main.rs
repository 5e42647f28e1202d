use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use flexcmh::trainer::Mode;
use flexcmh_cli::commands::{self, SweepParam};
use flexcmh_cli::{exit_code, ExperimentConfig, NumericFailure};

#[derive(Parser)]
#[command(name = "flexcmh", version, about = "Cross-modal hashing with flexible pairing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Experiment config (JSON).
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    /// Code lengths, comma separated; training uses the first.
    #[arg(long, value_delimiter = ',')]
    bits: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(mode) = self.mode {
            cfg.set_mode(mode);
        }
        if let Some(bits) = &self.bits {
            cfg.set_bits(bits.clone());
        }
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted correspondence.
    Synth(Overrides),
    /// Train a model and write it with its objective trace.
    Train(Overrides),
    /// Evaluate a trained model on the held-out split.
    Eval {
        #[command(flatten)]
        opts: Overrides,
        /// Append to an existing results file.
        #[arg(long)]
        append: bool,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// First of the 20 seeds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0, hide = true)]
        perturb: f64,
    },
    /// Train and evaluate once per parameter value.
    Sweep {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(o) => {
            let path = commands::synth(&o.load()?)?;
            println!("wrote {}", path.display());
        }
        Command::Train(o) => {
            let cfg = o.load()?;
            let model = commands::train(&cfg)?;
            let last = model.trace.last().context("empty trace")?;
            println!(
                "trained {} iterations, objective {:.6e}, wrote {}",
                last.iter,
                last.objective.total,
                cfg.output.display()
            );
        }
        Command::Eval { opts, append } => {
            let rows = commands::eval(&opts.load()?, append)?;
            print!("{}", commands::results_csv(&rows, true));
        }
        Command::Gradcheck { seed, perturb } => match commands::gradcheck(seed, perturb) {
            Ok(lines) => lines.iter().for_each(|l| println!("{l}")),
            Err(e) => {
                if let Some(f) = e.downcast_ref::<NumericFailure>() {
                    f.lines.iter().for_each(|l| println!("{l}"));
                }
                return Err(e);
            }
        },
        Command::Sweep { opts, param, values } => {
            print!("{}", commands::sweep(&opts.load()?, param, &values)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
