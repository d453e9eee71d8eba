use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tubecert::bench::{bench_complexity, write_bench_csv};
use tubecert::run::env_spec;
use tubecert::{collect_initial, run_training, ConfigError, RunConfig, RunError, EXIT_CONFIG, EXIT_RUNTIME};
use tubecert_core::certifier::{certify, Constraints};
use tubecert_core::dynamics::Ensemble;
use tubecert_core::envs::{backup_policy, EnvKind, EnvSpec};
use tubecert_core::Vector;

#[derive(Parser)]
#[command(name = "tubecert", version, about = "Tube-certified safe exploration with learned ensemble dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect initial transitions with the environment's backup controller.
    Collect {
        #[arg(long)]
        env: EnvKind,
        #[arg(long, default_value_t = 8000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the certified training loop.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Execute the learner's actions without certification.
        #[arg(long)]
        no_certify: bool,
    },
    /// Time cold-start certification over horizons, widths and ensemble sizes.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "3,5,7,9")]
        horizons: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        widths: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        ensembles: Vec<usize>,
        #[arg(long, default_value_t = 30)]
        trials: usize,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
    /// Print an environment's dimensions, constraints and parameters.
    Describe {
        #[arg(long)]
        env: EnvKind,
    },
    /// Certify a single state-action pair with a saved ensemble.
    CertifyOnce {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        env: EnvKind,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        state: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        action: Vec<f64>,
        #[arg(long)]
        horizon: Option<usize>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig, ConfigError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::for_env(EnvKind::Pendulum)),
    }
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Collect { env, steps, seed, out } => {
            let spec = EnvSpec::new(env);
            let mut backup = backup_policy(&spec, seed);
            let data = collect_initial(&spec, backup.as_mut(), steps, seed)?;
            data.write_jsonl(&out)?;
            println!("collected {} transitions into {}", data.len(), out.display());
        }
        Command::Train { config, out_dir, no_certify } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            if no_certify {
                cfg.certify = false;
            }
            let m = run_training(&cfg)?;
            println!(
                "finished {} epochs: {} violations, final return {:.3}, outputs in {}",
                m.epochs.len(),
                m.total_violations(),
                m.final_return().unwrap_or(f64::NAN),
                cfg.out_dir.display()
            );
        }
        Command::Bench {
            config,
            horizons,
            widths,
            ensembles,
            trials,
            out,
        } => {
            let cfg = load_config(config.as_ref())?;
            let rows = bench_complexity(&cfg, &horizons, &widths, &ensembles, trials)?;
            write_bench_csv(&rows, &out)?;
            for r in &rows {
                println!("{:<9} {:>4}  median {:>10.3} ms  mean {:>10.3} ms", r.sweep, r.value, r.median_ms, r.mean_ms);
            }
        }
        Command::Describe { env } => println!("{}", EnvSpec::new(env).describe()),
        Command::CertifyOnce {
            model,
            env,
            state,
            action,
            horizon,
        } => {
            let mut cfg = RunConfig::for_env(env);
            if let Some(n) = horizon {
                cfg.horizon = n;
            }
            cfg.validate()?;
            let spec = env_spec(&cfg);
            let ensemble = Ensemble::load(&model)?;
            let cons = Constraints {
                state: &spec.state_polytope,
                action: &spec.action_polytope,
                terminal: &spec.state_polytope,
            };
            let r = certify(
                ensemble.members(),
                &Vector::from_vec(state),
                &Vector::from_vec(action),
                &cons,
                &cfg.certifier(spec.n_x, spec.n_u),
                None,
            )?;
            let out = serde_json::json!({
                "feasible": r.feasible,
                "action": r.action.as_slice(),
                "iterations": r.diagnostics.iterations,
                "max_violation": r.diagnostics.max_violation,
                "objective": r.diagnostics.objective,
                "message": r.diagnostics.message,
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("json value serialises"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(EXIT_CONFIG as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME as u8)
        }
    }
}
