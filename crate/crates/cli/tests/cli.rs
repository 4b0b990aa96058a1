use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gatn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatn")).args(args).output().unwrap()
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

const CONFIG: &str = "\
env.target = intent-world(4,8)
env.sources = intent-world(4,8), negated(intent-world(4,8))
agent.variant = gatn
train.episodes = 6
vae.pretrain_steps = 5
sources.max_episodes = 50
eval.episodes = 10
";

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn pretrain_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    let missing = gatn(&["train", "--config", &cfg, "--seed", "7", "--out", out_s]);
    assert_eq!(missing.status.code(), Some(2), "{}", text(&missing));
    assert!(text(&missing).contains("pretrain-sources"));

    let pre = gatn(&["pretrain-sources", "--config", &cfg]);
    assert!(pre.status.success(), "{}", text(&pre));
    assert!(dir.path().join("sources/source-1.ckpt").exists());

    let first = gatn(&["train", "--config", &cfg, "--seed", "7", "--out", out_s]);
    assert!(first.status.success(), "{}", text(&first));
    let csv = fs::read(out.join("metrics-seed7.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&csv).lines().count(), 7);

    let again = gatn(&["train", "--config", &cfg, "--seed", "7", "--out", out_s]);
    assert!(again.status.success());
    assert_eq!(fs::read(out.join("metrics-seed7.csv")).unwrap(), csv);

    let ckpt = out.join("checkpoint-seed7.ckpt");
    let ck = ckpt.to_str().unwrap();
    let eval = gatn(&["eval", "--checkpoint", ck, "--env", "intent-world(4,8)", "--perturb", "noise=0.1", "--heldout"]);
    assert!(eval.status.success(), "{}", text(&eval));
    assert!(text(&eval).contains("generalization gap"));

    let wrong = gatn(&["eval", "--checkpoint", ck, "--env", "line-world(10)"]);
    assert_eq!(wrong.status.code(), Some(2), "{}", text(&wrong));
    let empty = gatn(&["eval", "--checkpoint", ck, "--env", "intent-world(4,8)", "--episodes", "0"]);
    assert_eq!(empty.status.code(), Some(2));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "env.target = line-world(10)\nagent.variant = dqn-scratch\nsched.M = 0\n");
    let out = gatn(&["train", "--config", &cfg, "--seed", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("M must be ≥ 1"));

    let cfg = write_config(dir.path(), "env.target = line-world(10)\nagent.variant = dqn-scratch\nbogus = 1\n");
    let out = gatn(&["train", "--config", &cfg, "--seed", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("line 3"));

    assert_eq!(gatn(&["bench", "--experiment", "nope"]).status.code(), Some(2));
    assert_eq!(gatn(&["train"]).status.code(), Some(2));
}

#[test]
fn io_errors_exit_4() {
    let out = gatn(&["train", "--config", "/nonexistent/run.cfg", "--seed", "0", "--out", "/tmp"]);
    assert_eq!(out.status.code(), Some(4));
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let cfg = write_config(dir.path(), "env.target = line-world(10)\nagent.variant = dqn-scratch\ntrain.episodes = 2\n");
    let out = gatn(&["train", "--config", &cfg, "--seed", "0", "--out", blocker.join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", text(&out));
}

#[test]
fn numerical_abort_exits_3_and_keeps_partial_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "env.target = line-world(10)\nagent.variant = dqn-scratch\ntrain.episodes = 50\nlr.base = 1e300\n",
    );
    let out_dir = dir.path().join("out");
    let out = gatn(&["train", "--config", &cfg, "--seed", "1", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out));
    let csv = fs::read_to_string(out_dir.join("metrics-seed1.csv")).unwrap();
    assert!(csv.starts_with("seed,episode,return"));
    assert!(!out_dir.join("checkpoint-seed1.ckpt").exists());
}

#[test]
fn grad_check_reports_every_loss() {
    let out = gatn(&["grad-check", "--probes", "10"]);
    assert!(out.status.success(), "{}", text(&out));
    let t = text(&out);
    for name in ["vae", "robust (latent)", "robust (state)", "td", "scheduler log-prob"] {
        assert!(t.contains(name), "{t}");
    }
    assert_eq!(gatn(&["grad-check", "--probes", "0"]).status.code(), Some(2));
}

#[test]
fn bench_effic_prints_the_ratio() {
    let out = gatn(&["bench", "--experiment", "effic", "--seeds", "1"]);
    assert!(out.status.success(), "{}", text(&out));
    let t = text(&out);
    assert!(t.contains("0.500000"), "{t}");
    assert!(t.contains("EFFIC: PASS"), "{t}");
}
