use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qdp::sim::Vec3;
use qdp_cli::commands::{render_trajectory, run_eval, run_rollout, write_report, EvalMode, EvalRequest, Split};
use qdp_cli::config::RunConfig;
use qdp_cli::train::{load_checkpoint, run_training, TrainOptions};
use qdp_cli::verify::{run_checks, VerifyOptions};
use qdp_cli::CliError;

#[derive(Parser)]
#[command(name = "qdp", version, about = "Train, evaluate and inspect QDP cloth-unfolding agents")]
struct Cli {
    /// TOML run configuration (may `include` other files).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (train) or episode seed (rollout).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; the QDP_OUT environment variable takes precedence.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Config override such as `train.lr=0.001`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect experience and train; writes metrics.csv, resolved.toml and checkpoints/.
    Train {
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        total_env_steps: Option<usize>,
        /// Stop after this many rounds of episodes, as if killed.
        #[arg(long, hide = true)]
        halt_after_rounds: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint (or the random baseline) over held-out seeds.
    Eval {
        /// Checkpoint file or run directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        n_seeds: Option<usize>,
        #[arg(long, default_value = "qdp")]
        mode: EvalMode,
        /// Fixed θ value; defaults to the median θ proposed by the network.
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Run one episode and dump a PNG per step.
    Rollout {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        png_dir: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Run the fast numerical verification battery.
    Verify {
        #[arg(long, hide = true)]
        inject_grad_bug: bool,
    },
    /// Write the end-effector path of the configured primitive.
    RenderTraj {
        #[arg(long)]
        theta: f64,
        #[arg(long, value_parser = parse_vec3, default_value = "0,0,0")]
        from: Vec3,
        #[arg(long, value_parser = parse_vec3, default_value = "0.2,0,0")]
        to: Vec3,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{s}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, z] => Ok(Vec3::new(x, y, z)),
        [x, y] => Ok(Vec3::new(x, y, 0.0)),
        _ => Err(format!("`{s}`: expected x,y or x,y,z")),
    }
}

impl Cli {
    fn flag_overrides(&self, include_seed: bool) -> Vec<String> {
        let mut o = self.overrides.clone();
        if include_seed {
            if let Some(s) = self.seed {
                o.push(format!("seed={s}"));
            }
        }
        if let Some(w) = self.workers {
            o.push(format!("workers={w}"));
        }
        if let Some(d) = self.out_dir() {
            o.push(format!("out_dir={:?}", d.display().to_string()));
        }
        o
    }

    fn out_dir(&self) -> Option<PathBuf> {
        std::env::var_os("QDP_OUT")
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .or_else(|| self.out_dir.clone())
    }

    fn config(&self, include_seed: bool) -> Result<RunConfig, CliError> {
        RunConfig::load(self.config.as_deref(), &self.flag_overrides(include_seed))
    }

    /// Config and network from a checkpoint, with command-line overrides on top.
    fn from_checkpoint(&self, path: &PathBuf) -> Result<(RunConfig, qdp::net::QdpNetwork<f32>), CliError> {
        let ck = load_checkpoint(path)?;
        let config = ck.config.with_overrides(&self.flag_overrides(false))?;
        if config.net != ck.config.net {
            return Err(CliError::Checkpoint("network settings cannot be overridden for a checkpoint".into()));
        }
        Ok((config, ck.net))
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train {
            resume,
            total_env_steps,
            halt_after_rounds,
            quiet,
        } => {
            let mut config = cli.config(true)?;
            if let Some(n) = total_env_steps {
                config = config.with_overrides(&[format!("train.total_env_steps={n}")])?;
            }
            let run_dir = PathBuf::from(&config.out_dir);
            let outcome = run_training(
                config,
                &run_dir,
                &TrainOptions {
                    resume: *resume,
                    halt_after_rounds: *halt_after_rounds,
                    quiet: *quiet,
                },
            )?;
            println!(
                "trained {} env steps ({} updates); checkpoint {}",
                outcome.env_steps,
                outcome.train_steps,
                outcome.final_checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            n_seeds,
            mode,
            theta,
            split,
        } => {
            let (config, net) = match checkpoint {
                Some(p) => {
                    let (c, n) = cli.from_checkpoint(p)?;
                    (c, Some(n))
                }
                None => (cli.config(true)?, None),
            };
            let req = EvalRequest {
                mode: *mode,
                n_seeds: n_seeds.unwrap_or(config.eval.seeds),
                theta: *theta,
                split: *split,
            };
            let summary = run_eval(&config, net.as_ref(), &req)?;
            let stem = format!("eval_{}_{}", summary.policy.replace('=', "_"), if *split == Split::Large { "large" } else { "train" });
            let (json, csv) = write_report(&summary, &PathBuf::from(&config.out_dir), &stem)?;
            println!("{}", summary.to_json());
            eprintln!("wrote {} and {}", json.display(), csv.display());
        }
        Command::Rollout {
            checkpoint,
            png_dir,
            split,
        } => {
            let (config, net) = match checkpoint {
                Some(p) => {
                    let (c, n) = cli.from_checkpoint(p)?;
                    (c, Some(n))
                }
                None => (cli.config(false)?, None),
            };
            let seed = cli.seed.unwrap_or(config.eval.seed_base);
            let dir = png_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from(&config.out_dir).join(format!("rollout_{seed}")));
            let frames = run_rollout(&config, net.as_ref(), seed, *split, &dir)?;
            for f in &frames {
                println!("{}", f.display());
            }
            print!("{}", std::fs::read_to_string(dir.join("actions.csv"))?);
        }
        Command::Verify { inject_grad_bug } => {
            let checks = run_checks(VerifyOptions {
                inject_grad_bug: *inject_grad_bug,
            });
            let mut failed = vec![];
            for c in &checks {
                println!("{} {:<20} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                if !c.passed {
                    failed.push(c.name);
                }
            }
            if !failed.is_empty() {
                return Err(CliError::Verify(failed.join(", ")));
            }
        }
        Command::RenderTraj {
            theta,
            from,
            to,
            dt,
            output,
        } => {
            let config = cli.config(false)?;
            let out = output
                .clone()
                .unwrap_or_else(|| PathBuf::from(&config.out_dir).join("trajectory.txt"));
            let n = render_trajectory(&config.env.primitive, *theta, *from, *to, *dt, &out)?;
            println!("wrote {n} waypoints to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
