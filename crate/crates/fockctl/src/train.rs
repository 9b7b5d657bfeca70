//! `train`: PPO training with on-disk config, logs and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use fock_rl::ppo::{EVAL_LOG_HEADER, TRAINING_LOG_HEADER};
use fock_rl::{Checkpoint, EvalPoint, Trainer};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::output::{create, ensure_dir, save_checkpoint, write_string};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";
pub const EVAL_LOG_FILE: &str = "eval_log.csv";

pub struct TrainOutput {
    pub dir: PathBuf,
    pub trainer: Trainer,
    pub evals: Vec<EvalPoint>,
}

/// Trains into `dir`: `config.json`, `training_log.csv`, `eval_log.csv`,
/// `checkpoint.json` and, with `checkpoint_interval > 0`,
/// `checkpoint_u<update>.json`. On a runtime failure the current networks
/// are checkpointed before the error is returned.
pub fn train(cfg: &RunConfig, dir: &Path) -> Result<TrainOutput> {
    cfg.validate()?;
    let env_cfg = cfg.env_config()?;
    ensure_dir(dir)?;
    write_string(&dir.join(CONFIG_FILE), &cfg.canonical_json())?;
    let hash = cfg.fingerprint();
    let mut trainer = Trainer::new(env_cfg, cfg.ppo.clone(), cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;

    let log_path = dir.join(TRAINING_LOG_FILE);
    let eval_path = dir.join(EVAL_LOG_FILE);
    let mut log = create(&log_path)?;
    let mut eval_log = create(&eval_path)?;
    writeln!(log, "{TRAINING_LOG_HEADER}").and_then(|_| log.flush()).map_err(CliError::io(&log_path))?;
    writeln!(eval_log, "{EVAL_LOG_HEADER}").and_then(|_| eval_log.flush()).map_err(CliError::io(&eval_path))?;

    let mut io_err: Option<CliError> = None;
    let mut eval_err: Option<CliError> = None;
    let interval = cfg.checkpoint_interval;
    let result = trainer.train(
        |tr, s| {
            if io_err.is_some() {
                return;
            }
            if let Err(e) = writeln!(log, "{}", s.csv_row()).and_then(|_| log.flush()) {
                io_err = Some(CliError::io(&log_path)(e));
                return;
            }
            log::info!(
                "update {} steps {} return {:.4} fidelity {:.4} kl {:.2e}",
                s.update,
                s.env_steps,
                s.mean_return_norm,
                s.mean_final_fidelity,
                s.approx_kl
            );
            if interval > 0 && s.update % interval == 0 {
                let path = dir.join(format!("checkpoint_u{:06}.json", s.update));
                if let Err(e) = save_checkpoint(&path, &Checkpoint::from_trainer(tr, &hash)) {
                    io_err = Some(e);
                }
            }
        },
        |p| {
            log::info!("eval at update {}: {:.4} +- {:.4}", p.update, p.mean_final_fidelity, p.std_final_fidelity);
            if let Err(e) = writeln!(eval_log, "{}", p.csv_row()).and_then(|_| eval_log.flush()) {
                eval_err.get_or_insert(CliError::io(&eval_path)(e));
            }
        },
    );
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &Checkpoint::from_trainer(&trainer, &hash))?;
    if let Some(e) = io_err.or(eval_err) {
        return Err(e);
    }
    let evals = result.map_err(|e| CliError::Runtime(format!("training aborted after {} updates: {e}", trainer.updates_done)))?;
    Ok(TrainOutput {
        dir: dir.to_path_buf(),
        trainer,
        evals,
    })
}
