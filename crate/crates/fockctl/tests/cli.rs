use std::f64::consts::FRAC_2_PI;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fock_core::env::trajectory_header;

const SMALL: &str = r#"{
  "run_id": "small",
  "env": {"n": 4, "n_max": 20, "beta_max": 20, "theta": 8, "target": [{"n": 1}]},
  "channels": {"m": 4, "gamma_meas": 20},
  "ppo": {"n_steps": 16, "n_envs": 2, "hidden": [8], "total_updates": 2, "eval_interval": 1, "eval_trajectories": 3},
  "baseline": {"greedy_grid": 3, "greedy_runs": 2, "strong_cutoff": 20, "strong_runs": 50}
}"#;

fn fockctl(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fockctl"))
        .args(args)
        .env("FOCKCTL_OUT", out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).to_string()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn train(cfg: &Path, out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = fockctl(&args, out);
    assert!(o.status.success(), "{}", stderr(&o));
    PathBuf::from(stdout(&o))
}

#[test]
fn validate_config_reports_field_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let good = write_config(tmp.path(), SMALL);
    let o = fockctl(&["validate-config", "--config", good.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("ok "));

    let o = fockctl(&["validate-config", "--config", good.to_str().unwrap(), "--override", "env.theta=-1"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("env.theta"), "{}", stderr(&o));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"ppo": {"lr": "fast"}}"#).unwrap();
    let o = fockctl(&["validate-config", "--config", bad.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ppo.lr"), "{}", stderr(&o));

    let o = fockctl(&["validate-config", "--config", tmp.path().join("missing.json").to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_update_training_writes_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let dir = train(&cfg, tmp.path(), &["--seed", "7", "--override", "ppo.total_updates=0"]);
    assert_eq!(dir, tmp.path().join("small-seed7"));
    let log = read(&dir.join("training_log.csv"));
    assert_eq!(log.lines().count(), 1);
    assert!(log.starts_with("update,env_steps,mean_return_norm,mean_final_fidelity,"));
    let ckpt: serde_json::Value = serde_json::from_str(&read(&dir.join("checkpoint.json"))).unwrap();
    for key in ["arch", "policy", "value", "sigma", "adam_policy", "adam_value", "config_hash", "seed"] {
        assert!(ckpt.get(key).is_some(), "{key}");
    }
    assert_eq!(ckpt["seed"], 7);

    // the stored config reproduces the fingerprint recorded in the checkpoint
    let o = fockctl(&["validate-config", "--config", dir.join("config.json").to_str().unwrap()], tmp.path());
    assert_eq!(stdout(&o), format!("ok {}", ckpt["config_hash"].as_str().unwrap()));
}

#[test]
fn training_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let a = train(&cfg, &tmp.path().join("a"), &["--seed", "3"]);
    let b = train(&cfg, &tmp.path().join("b"), &["--seed", "3"]);
    for f in ["training_log.csv", "eval_log.csv", "checkpoint.json", "config.json"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    assert_eq!(read(&a.join("training_log.csv")).lines().count(), 3);
    assert_eq!(read(&a.join("eval_log.csv")).lines().count(), 3);
    let c = train(&cfg, &tmp.path().join("c"), &["--seed", "4"]);
    assert_ne!(read(&a.join("checkpoint.json")), read(&c.join("checkpoint.json")));
}

#[test]
fn periodic_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let dir = train(&cfg, tmp.path(), &["--override", "checkpoint_interval=1"]);
    assert!(dir.join("checkpoint_u000001.json").exists());
    assert!(dir.join("checkpoint_u000002.json").exists());
    assert_eq!(read(&dir.join("checkpoint_u000002.json")), read(&dir.join("checkpoint.json")));
}

#[test]
fn runtime_abort_keeps_partial_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = fockctl(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--override",
            "integrator.scheme=euler-maruyama",
            "--override",
            "integrator.n_sub=1",
            "--override",
            "channels.gamma_meas=5000",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("instability"), "{}", stderr(&o));
    let dir = tmp.path().join("small-seed0");
    for f in ["config.json", "checkpoint.json", "training_log.csv"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn eval_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let dir = train(&cfg, tmp.path(), &["--override", "ppo.total_updates=0"]);
    let ckpt = dir.join("checkpoint.json");

    let o = fockctl(&["eval", "--checkpoint", tmp.path().join("nope.json").to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));

    let out = tmp.path().join("ev");
    let o = fockctl(
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--n-traj", "1", "--deterministic", "--out", out.to_str().unwrap()],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!stderr(&o).contains("warning"));
    let traj = read(&out.join("traj_0000.csv"));
    let lines: Vec<&str> = traj.lines().collect();
    assert_eq!(lines[0], trajectory_header(4, 4));
    assert_eq!(lines.len(), 1 + 21);
    assert!(!out.join("traj_0001.csv").exists());
    assert_eq!(read(&out.join("final_fidelities.csv")).lines().count(), 2);
    assert_eq!(read(&out.join("mean_populations.csv")).lines().count(), 22);
    let hist = read(&out.join("fidelity_histogram.csv"));
    let total: usize = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 1);
    for name in ["wigner_t0.csv", "wigner_t1-3.csv", "wigner_t2-3.csv", "wigner_t1.csv"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let w0 = read(&out.join("wigner_t0.csv"));
    let origin = w0.lines().find(|l| l.starts_with("0,0,")).expect("grid contains the origin");
    let w: f64 = origin.split(',').nth(2).unwrap().parse().unwrap();
    assert!((w - FRAC_2_PI).abs() < 1e-12, "{w}");
    let summary: serde_json::Value = serde_json::from_str(&read(&out.join("summary.json"))).unwrap();
    assert_eq!(summary["fingerprint_match"], true);

    // deterministic evaluation is reproducible
    let out2 = tmp.path().join("ev2");
    fockctl(
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--n-traj", "1", "--deterministic", "--out", out2.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(traj, read(&out2.join("traj_0000.csv")));

    // a changed config is flagged but still evaluated
    let out3 = tmp.path().join("ev3");
    let o = fockctl(
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--n-traj",
            "2",
            "--emit",
            "hist",
            "--override",
            "channels.gamma_meas=30",
            "--out",
            out3.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(o.status.success());
    assert!(stderr(&o).contains("warning"));
    assert!(!out3.join("traj_0000.csv").exists());
    assert_eq!(read(&out3.join("final_fidelities.csv")).lines().count(), 3);
}

#[test]
fn policy_map_is_pure_and_flags_invalid_points() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let a = train(&cfg, &tmp.path().join("a"), &["--seed", "1", "--override", "ppo.total_updates=0"]);
    let b = train(&cfg, &tmp.path().join("b"), &["--seed", "2", "--override", "ppo.total_updates=0"]);
    let run = |out: &str, ckpts: &[&Path]| {
        let mut args = vec!["map", "--grid", "5", "--out", out];
        for c in ckpts {
            args.push("--checkpoint");
            args.push(c.to_str().unwrap());
        }
        let o = fockctl(&args, tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
        read(&PathBuf::from(stdout(&o)))
    };
    let ca = a.join("checkpoint.json");
    let cb = b.join("checkpoint.json");
    let m1 = run(tmp.path().join("m1").to_str().unwrap(), &[&ca]);
    let m2 = run(tmp.path().join("m2").to_str().unwrap(), &[&ca]);
    assert_eq!(m1, m2);
    let lines: Vec<&str> = m1.lines().collect();
    assert_eq!(lines[0], "x,y,valid,re_beta,im_beta,abs_beta");
    assert_eq!(lines.len(), 26);
    assert!(lines.contains(&"-1,-1,0,,,"));
    assert!(lines.iter().any(|l| l.starts_with("0,1,1,")));

    let avg = run(tmp.path().join("m3").to_str().unwrap(), &[&ca, &cb]);
    let mb = run(tmp.path().join("m4").to_str().unwrap(), &[&cb]);
    let field = |text: &str, row: usize, col: usize| -> f64 { text.lines().nth(row).unwrap().split(',').nth(col).unwrap().parse().unwrap() };
    let row = 13; // (x, y) = (0, 0)
    let expect = 0.5 * (field(&m1, row, 3) + field(&mb, row, 3));
    assert!((field(&avg, row, 3) - expect).abs() < 1e-12);
}

#[test]
fn strong_baseline_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = fockctl(&["baseline", "--config", cfg.to_str().unwrap(), "--strategy", "strong", "--target", "0,2"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("small-baseline");
    let runs = read(&dir.join("strong_runs.csv"));
    assert_eq!(runs.lines().count(), 1 + 2 * 50);
    assert!(runs.lines().nth(1).unwrap().starts_with("0,strong,0,1,0,"));
    let summary = read(&dir.join("strong_summary.csv"));
    assert_eq!(summary.lines().nth(1).unwrap(), "0,0,1,1,1,1");

    let o = fockctl(&["baseline", "--config", cfg.to_str().unwrap(), "--strategy", "strong", "--target", "25"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn greedy_baseline_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = fockctl(&["baseline", "--config", cfg.to_str().unwrap(), "--strategy", "greedy", "--target", "2"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("small-baseline");
    let runs = read(&dir.join("greedy_runs.csv"));
    assert_eq!(runs.lines().count(), 3);
    assert!(runs.lines().nth(1).unwrap().starts_with("2,greedy,0,"));
    let summary = read(&dir.join("greedy_summary.csv"));
    assert!(summary.starts_with("target,runs,mean_final_fidelity,std_final_fidelity,success_rate\n2,2,"));
}

#[test]
fn sweep_cell_matches_standalone_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let spec = tmp.path().join("spec.json");
    std::fs::write(&spec, r#"{"axes": [{"path": "channels.gamma_meas", "values": [20]}], "seeds": [5], "greedy": true}"#).unwrap();
    let o = fockctl(&["sweep", "--config", cfg.to_str().unwrap(), "--spec", spec.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = read(&PathBuf::from(stdout(&o)));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "axis1,axis2,seed,mean_final_fidelity,std_final_fidelity,strategy");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("20,,5,") && lines[1].ends_with(",rl"));
    assert!(lines[2].ends_with(",greedy"));

    let dir = train(&cfg, &tmp.path().join("alone"), &["--seed", "5"]);
    let out = tmp.path().join("alone-eval");
    let o = fockctl(
        &["eval", "--checkpoint", dir.join("checkpoint.json").to_str().unwrap(), "--deterministic", "--emit", "hist", "--out", out.to_str().unwrap()],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&read(&out.join("summary.json"))).unwrap();
    let mean = summary["mean_final_fidelity"].as_f64().unwrap();
    let cell: f64 = lines[1].split(',').nth(3).unwrap().parse().unwrap();
    assert_eq!(cell, mean);
}
