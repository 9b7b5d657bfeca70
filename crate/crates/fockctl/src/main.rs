use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fockctl::baseline::{run_greedy, run_strong, target_label, write_greedy_summary, write_strong_summary};
use fockctl::config::RunConfig;
use fockctl::error::{CliError, Result};
use fockctl::eval::{eval, Emit, EvalRequest};
use fockctl::map::{policy_map, write_map_csv};
use fockctl::output::{ensure_dir, load_checkpoint, output_root, run_dir, sibling_config, write_with};
use fockctl::sweep::{sweep, write_sweep_csv, SweepSpec};
use fockctl::train::train;
use fock_core::baselines::write_baseline_csv;
use fock_core::TargetComponent;

#[derive(Parser, Debug)]
#[command(name = "fockctl", version, about = "Train, evaluate and analyse measurement-feedback agents for Fock state preparation")]
struct Cli {
    /// Worker threads for rollouts, evaluation and sweep cells (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output root directory.
    #[arg(long, env = "FOCKCTL_OUT")]
    out: Option<PathBuf>,

    /// Config override `dotted.path=value` (repeatable).
    #[arg(long = "override", value_name = "PATH=VALUE")]
    overrides: Vec<String>,

    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Strategy {
    Strong,
    Greedy,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a PPO agent; writes config, logs and checkpoints into a run directory.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint and emit plot data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of trajectories (default: ppo.eval_trajectories).
        #[arg(long)]
        n_traj: Option<usize>,
        /// Use the policy mean instead of sampling.
        #[arg(long)]
        deterministic: bool,
        /// Comma-separated subset of traj,hist,wigner,avg.
        #[arg(long, default_value = "all")]
        emit: Emit,
    },
    /// Train and evaluate fresh agents over a parameter grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Sweep specification (JSON).
        #[arg(long)]
        spec: PathBuf,
    },
    /// Deterministic policy outputs over the (x, y) state family.
    Map {
        #[command(flatten)]
        common: Common,
        /// Checkpoint(s); outputs are averaged over all given.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Points per axis over [-1, 1].
        #[arg(long, default_value_t = 41)]
        grid: usize,
    },
    /// Run a reference strategy.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        strategy: Strategy,
        /// Fock target(s); strong defaults to baseline.strong_targets, greedy to env.target.
        #[arg(long, value_delimiter = ',')]
        target: Vec<usize>,
        /// Runs per target (default from the baseline section).
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Parse and validate a configuration, then print its fingerprint.
    ValidateConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut ov = overrides.to_vec();
    if let Some(s) = seed {
        ov.push(format!("seed={s}"));
    }
    match path {
        Some(p) => RunConfig::load(p, &ov),
        None => RunConfig::from_json("{}", &ov),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(w) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build_global()
            .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))?;
    }
    match cli.command {
        Command::Train { common } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides, common.seed)?;
            let dir = run_dir(&output_root(common.out.as_deref(), &cfg), &cfg);
            let out = train(&cfg, &dir)?;
            println!("{}", out.dir.display());
        }
        Command::Eval {
            common,
            checkpoint,
            n_traj,
            deterministic,
            emit,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let cfg_path = common.config.clone().unwrap_or_else(|| sibling_config(&checkpoint));
            let cfg = load_config(Some(&cfg_path), &common.overrides, None)?;
            let out = common.out.clone().unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
            let req = EvalRequest {
                n_traj: n_traj.unwrap_or(cfg.ppo.eval_trajectories),
                deterministic,
                seed: common.seed,
                emit,
            };
            let (_, s) = eval(&ckpt, &cfg, &req, &out)?;
            println!("mean_final_fidelity {} std {} -> {}", s.mean_final_fidelity, s.std_final_fidelity, out.display());
        }
        Command::Sweep { common, spec } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides, common.seed)?;
            let text = std::fs::read_to_string(&spec).map_err(|e| CliError::Config(format!("cannot read {}: {e}", spec.display())))?;
            let spec = SweepSpec::from_json(&text)?;
            let dir = output_root(common.out.as_deref(), &cfg).join(format!("{}-sweep", cfg.run_id));
            let rows = sweep(&cfg, &spec, &dir)?;
            let path = dir.join("sweep.csv");
            write_with(&path, |w| write_sweep_csv(w, &rows))?;
            println!("{}", path.display());
        }
        Command::Map { common, checkpoint, grid } => {
            let cfg_path = common.config.clone().unwrap_or_else(|| sibling_config(&checkpoint[0]));
            let cfg = load_config(Some(&cfg_path), &common.overrides, None)?;
            let env = cfg.env_config()?;
            let policies = checkpoint
                .iter()
                .map(|p| load_checkpoint(p)?.policy().map_err(|e| CliError::Config(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            let points = policy_map(&policies, &env, grid)?;
            let out = common.out.clone().unwrap_or_else(|| checkpoint[0].parent().unwrap_or(Path::new(".")).to_path_buf());
            ensure_dir(&out)?;
            let path = out.join("policy_map.csv");
            write_with(&path, |w| write_map_csv(w, &points, env.action_dim() - 2))?;
            println!("{}", path.display());
        }
        Command::Baseline {
            common,
            strategy,
            target,
            runs,
        } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides, common.seed)?;
            let dir = output_root(common.out.as_deref(), &cfg).join(format!("{}-baseline", cfg.run_id));
            ensure_dir(&dir)?;
            match strategy {
                Strategy::Strong => {
                    let targets = if target.is_empty() { cfg.baseline.strong_targets.clone() } else { target };
                    if let Some(&l) = targets.iter().find(|&&l| l >= cfg.baseline.strong_cutoff) {
                        return Err(CliError::Config(format!("--target: {l} not below baseline.strong_cutoff")));
                    }
                    let (rows, sums) = run_strong(&cfg, &targets, runs.unwrap_or(cfg.baseline.strong_runs), cfg.seed)?;
                    write_with(&dir.join("strong_runs.csv"), |w| write_baseline_csv(w, &rows))?;
                    write_with(&dir.join("strong_summary.csv"), |w| write_strong_summary(w, &sums))?;
                    for s in &sums {
                        println!("target {} cumulative success {:.4} (oracle {:.4})", s.target, s.mc_cumulative(), s.oracle_cumulative());
                    }
                }
                Strategy::Greedy => {
                    let mut cfg = cfg;
                    if let [n] = target[..] {
                        cfg.env.target = vec![TargetComponent { n, re: 1.0, im: 0.0 }];
                        cfg.validate()?;
                    } else if target.len() > 1 {
                        return Err(CliError::Config("--target: greedy takes a single target".into()));
                    }
                    let env = cfg.env_config()?;
                    let label = target_label(&cfg.env.target);
                    let (rows, s) = run_greedy(&env, cfg.baseline.greedy_grid, runs.unwrap_or(cfg.baseline.greedy_runs), cfg.seed, &label)?;
                    write_with(&dir.join("greedy_runs.csv"), |w| write_baseline_csv(w, &rows))?;
                    write_with(&dir.join("greedy_summary.csv"), |w| write_greedy_summary(w, &s))?;
                    println!("target {label} mean final fidelity {:.4} +- {:.4}", s.mean_final_fidelity, s.std_final_fidelity);
                }
            }
        }
        Command::ValidateConfig { common } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides, common.seed)?;
            println!("ok {}", cfg.fingerprint());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
