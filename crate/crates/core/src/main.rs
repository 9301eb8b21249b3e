use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use residual_insert::curriculum::Experiment;
use residual_insert::harness::{self, Config, EvalPoint};
use residual_insert::residual::ResidualMode;
use residual_insert::Result;

#[derive(Parser)]
#[command(name = "residual-insert", version, about = "Residual learning on a planar peg-in-hole testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one residual variant over several seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<ResidualMode>,
        #[arg(long)]
        experiment: Option<Experiment>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        episodes: Option<u64>,
        #[arg(long)]
        no_curriculum: bool,
        #[arg(long)]
        buffer_steps: Option<u64>,
        #[arg(long)]
        strict: bool,
        /// Run the learning-from-scratch baseline instead of a residual.
        #[arg(long)]
        scratch: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure how much of a scripted residual survives the buffer steps.
    DiagnoseBuffer {
        #[arg(long, value_delimiter = ',', default_value = "0,10,50,100")]
        b: Vec<u64>,
        #[arg(long, default_value_t = 0.016)]
        offset: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/diagnostic")]
        out: PathBuf,
    },
    /// Aggregate eval success across seeds for every run below a directory.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        /// Training episodes counted in the final-success column.
        #[arg(long, default_value_t = 100)]
        window: u64,
    },
}

fn load(path: Option<&PathBuf>) -> Result<Config> {
    path.map_or_else(|| Ok(Config::default()), |p| Config::load(p))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            mode,
            experiment,
            seeds,
            episodes,
            no_curriculum,
            buffer_steps,
            strict,
            scratch,
            out,
        } => {
            let mut c = load(Some(&config))?;
            let e = &mut c.experiment;
            if let Some(m) = mode {
                e.mode = m;
            }
            if let Some(x) = experiment {
                e.experiment = x;
            }
            if let Some(s) = seeds {
                e.seeds = s;
            }
            if let Some(n) = episodes {
                e.total_episodes = n;
            }
            if no_curriculum {
                e.curriculum_enabled = false;
            }
            if let Some(o) = out {
                e.output_dir = o;
            }
            if let Some(b) = buffer_steps {
                c.controller.buffer_steps = b;
            }
            if strict {
                c.controller.strict_condition = true;
            }
            let record = if scratch || c.experiment.scratch {
                harness::run_scratch_baseline(&c)?
            } else {
                harness::run_experiment(&c)?
            };
            let points = EvalPoint::from_rows(&record.episodes);
            for f in harness::final_success(&points, 100)? {
                println!(
                    "{} {}: final eval success {:.3} +/- {:.3} over {} seeds",
                    f.variant, f.experiment, f.mean_success, f.std_success, f.seeds
                );
            }
            println!("wrote {}", c.experiment.output_dir.display());
        }
        Command::DiagnoseBuffer { b, offset, config, out } => {
            let c = load(config.as_ref())?;
            let rows = harness::buffer_steps_diagnostic(&c, &b, &harness::DIAGNOSTIC_MODES, offset)?;
            std::fs::create_dir_all(&out).map_err(|e| residual_insert::Error::io(&out, e))?;
            harness::write_csv(&out.join("buffer_diagnostic.csv"), "buffer-diagnostic", &rows)?;
            println!("mode                 b     strict  displacement_mm  error_rate");
            for mode in harness::DIAGNOSTIC_MODES {
                for &bv in &b {
                    for strict in [false, true] {
                        if let Some((d, err)) = harness::cell_stats(&rows, mode, bv, strict) {
                            println!("{:<20} {:<5} {:<7} {:>15.3} {:>11.2}", mode.as_str(), bv, strict, d * 1e3, err);
                        }
                    }
                }
            }
            println!("wrote {}", out.join("buffer_diagnostic.csv").display());
        }
        Command::Summarize { input, window } => {
            let (summary, finals) = harness::summarize_dir(&input, window)?;
            for f in &finals {
                println!(
                    "{} {}: final eval success {:.3} +/- {:.3} over {} seeds",
                    f.variant, f.experiment, f.mean_success, f.std_success, f.seeds
                );
            }
            println!("{} summary rows written to {}", summary.len(), input.join("summary.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
