use std::fs;
use std::io::{self, BufReader};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use curriculum_grpo::evalproto::{serve, serve_tcp, MockEvaluator};
use curriculum_grpo::harness::{self, AblateOptions, ExperimentConfig, RunOptions, RunStatus};
use curriculum_grpo::synthenv::{self, EnvConfig, Objective};
use curriculum_grpo::tokenspace::Scenario;
use curriculum_grpo::Executor;

/// Exit status for runs that finished with some failures or unreadable records.
const PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(
    name = "cgrpo",
    version,
    about = "SFT + GRPO prompt rewriting with a dynamic reward curriculum"
)]
struct Cli {
    /// Worker threads (1 = sequential; default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the desk-scale default experiment config.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// SFT followed by GRPO for one seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// All four reward modes over a set of seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Number of seeds, 0..n; defaults to the seeds listed in the config.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Curves, ablation table and summary from a directory of runs.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Moving-average window for the reward curves.
        #[arg(long, default_value_t = 10)]
        window: usize,
    },
    /// Exhaustive optimum of an objective for one scenario.
    Oracle {
        /// Environment config; the desk default when omitted.
        #[arg(long)]
        env_config: Option<PathBuf>,
        /// sa, pc, joint or composite:<w_sa>.
        #[arg(long, default_value = "joint")]
        objective: String,
        #[arg(long, default_value_t = 0)]
        class: u32,
        /// Comma-separated intent tokens; all intents when omitted.
        #[arg(long, value_delimiter = ',')]
        intents: Option<Vec<u32>>,
        /// Also write every multiset with its scores to this CSV.
        #[arg(long)]
        enumerate: Option<PathBuf>,
    },
    /// Mock evaluator speaking the scoring protocol.
    MockEval {
        #[arg(long, value_enum, default_value_t = Transport::Stdio)]
        transport: Transport,
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long)]
        env_config: Option<PathBuf>,
        /// Overrides the noise level of the environment config.
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    Stdio,
    Tcp,
}

fn executor(threads: Option<usize>) -> Executor {
    match threads {
        Some(n) => Executor::threads(n),
        None => Executor::available(),
    }
}

fn load_env(path: Option<&PathBuf>) -> Result<EnvConfig> {
    match path {
        Some(p) => {
            let s = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(EnvConfig::from_json(&s)?)
        }
        None => Ok(EnvConfig::desk_default(0)),
    }
}

fn run(cli: Cli) -> Result<u8> {
    let exec = executor(cli.threads);
    match cli.command {
        Cmd::InitConfig { out } => {
            fs::write(&out, ExperimentConfig::desk_default().to_json())?;
            info!("wrote {}", out.display());
            Ok(0)
        }
        Cmd::Train { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let opts = RunOptions {
                exec,
                out_dir: Some(out.clone()),
                ..RunOptions::default()
            };
            let rec = harness::run(&cfg, seed, &opts)?;
            match &rec.status {
                RunStatus::Completed => {
                    if let Some(m) = rec.final_metrics {
                        println!(
                            "seed {seed}: SA {:.1}% PC {:.1}% joint {:.1}% -> {}",
                            m.sa_pct,
                            m.pc_pct,
                            m.joint_pct,
                            out.display()
                        );
                    }
                    Ok(0)
                }
                RunStatus::Failed { reason } => bail!("run failed: {reason}"),
            }
        }
        Cmd::Ablate { config, seeds, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seeds: Vec<u64> = match seeds {
                Some(n) => (0..n).collect(),
                None => cfg.seeds.clone(),
            };
            let opts = AblateOptions {
                exec,
                out_dir: Some(out),
                ..AblateOptions::default()
            };
            let rep = harness::ablate(&cfg, &seeds, &opts)?;
            print!("{}", harness::render_markdown(&rep.rows));
            Ok(if rep.runs.iter().all(|r| r.completed()) {
                0
            } else {
                PARTIAL
            })
        }
        Cmd::Report { runs, out, window } => {
            let rep = harness::report(&runs, &out, window)?;
            print!("{}", harness::render_markdown(&rep.rows));
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
            Ok(if rep.complete() { 0 } else { PARTIAL })
        }
        Cmd::Oracle {
            env_config,
            objective,
            class,
            intents,
            enumerate,
        } => {
            let env = load_env(env_config.as_ref())?;
            let objective = Objective::parse(&objective)?;
            let intents = intents.unwrap_or_else(|| env.vocab.intent_tokens().take(env.k).collect());
            let scenario = Scenario::new(&env.vocab, class, intents)?;
            let best = synthenv::brute_force_best(&env, &scenario, objective, &exec)?;
            println!(
                "{{\"multiset\":{:?},\"sa\":{},\"pc\":{},\"value\":{}}}",
                best.multiset.tokens(),
                best.score.sa,
                best.score.pc,
                best.value
            );
            if let Some(path) = enumerate {
                let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                synthenv::write_enumeration_csv(&env, &scenario, io::BufWriter::new(f))?;
            }
            Ok(0)
        }
        Cmd::MockEval {
            transport,
            port,
            env_config,
            noise_sigma,
        } => {
            let mut env = load_env(env_config.as_ref())?;
            if let Some(s) = noise_sigma {
                env.noise_sigma = s;
                env.validate()?;
            }
            let ev = MockEvaluator::new(env);
            match transport {
                Transport::Stdio => {
                    let n = serve(&ev, BufReader::new(io::stdin().lock()), io::stdout().lock())?;
                    info!("answered {n} requests");
                }
                Transport::Tcp => serve_tcp(ev, TcpListener::bind(("127.0.0.1", port))?)?,
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
