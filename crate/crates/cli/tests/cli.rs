use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lares(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lares")).args(args).env_remove("LARES_RUN_DIR").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lares(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// 40 users walking a 30-item ring with per-user strides.
fn raw_log(path: &Path) {
    let mut text = String::new();
    for u in 0..40 {
        let mut item = (u * 7) % 30;
        for t in 0..(6 + u % 5) {
            writeln!(text, "user{u}\titem{item}\t{}", 1000 + t * 10).unwrap();
            item = (item + 1 + u % 3) % 30;
        }
    }
    fs::write(path, text).unwrap();
}

const TINY: &str = "arch.embed_dim = 8\narch.ffn_dim = 16\narch.max_len = 8\narch.k_bar = 2\n\
spt.batch_size = 64\nspt.max_epochs = 2\nrpt.batch_size = 32\nrpt.max_epochs = 2\nkcore = 3\n";

fn setup(dir: &Path) -> (String, String) {
    raw_log(&dir.join("raw.tsv"));
    fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    let data = dir.join("data").display().to_string();
    let cfg = dir.join("tiny.cfg").display().to_string();
    ok(&["preprocess", "--input", &dir.join("raw.tsv").display().to_string(), "--out", &data, "--config", &cfg]);
    (data, cfg)
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (data, cfg) = setup(dir);
    assert!(Path::new(&data).join("sequences.txt").is_file());
    assert!(Path::new(&data).join("meta.json").is_file());

    let spt = dir.join("spt").display().to_string();
    ok(&["train-spt", "--data", &data, "--config", &cfg, "--out", &spt, "--seed", "3"]);
    for f in ["checkpoint.bin", "checkpoint.json", "curves.csv", "metrics.json", "config.cfg", "report.json", "curves.svg"] {
        assert!(Path::new(&spt).join(f).is_file(), "missing {f}");
    }
    let curves = fs::read_to_string(Path::new(&spt).join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 3);
    assert!(fs::read_to_string(Path::new(&spt).join("config.cfg")).unwrap().contains("seed = 3\n"));

    let ckpt = Path::new(&spt).join("checkpoint.bin").display().to_string();
    let eval = ok(&["evaluate", "--data", &data, "--checkpoint", &ckpt, "--split", "test"]);
    let v: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert_eq!(v["split"], "test");
    assert!(v["metrics"]["NDCG@10"].as_f64().unwrap() >= 0.0);
    let depth = ok(&["evaluate", "--data", &data, "--checkpoint", &ckpt, "--split", "valid", "--depths", "1,2,3", "--out", &spt]);
    assert!(depth.starts_with("depth,Recall@5"));
    assert!(Path::new(&spt).join("depth.svg").is_file());

    let recs = ok(&["infer", "--data", &data, "--checkpoint", &ckpt, "--user", "user3", "--top", "5"]);
    assert_eq!(recs.lines().count(), 5);
    assert!(recs.lines().all(|l| l.split('\t').nth(1).unwrap().starts_with("item")));

    let rpt = dir.join("rpt").display().to_string();
    let msg = ok(&["train-rpt", "--data", &data, "--config", &cfg, "--checkpoint", &ckpt, "--out", &rpt, "--beta", "0.5"]);
    assert!(msg.contains("kept"));
    let meta = fs::read_to_string(Path::new(&rpt).join("checkpoint.json")).unwrap();
    assert!(meta.contains("\"stage\": \"rpt\"") && meta.contains("\"reference\""));
    let diag = fs::read_to_string(Path::new(&rpt).join("rl_diagnostics.csv")).unwrap();
    assert!(diag.starts_with("iteration,epoch,mean_reward,"));

    let bench = dir.join("bench").display().to_string();
    let table = ok(&["bench", "--data", &data, "--config", &cfg, "--depths", "1,2", "--batch", "16", "--repeats", "2", "--out", &bench]);
    assert!(table.contains("fit: secs"));
    assert!(Path::new(&bench).join("latency.csv").is_file());
}

#[test]
fn training_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (data, cfg) = setup(dir);
    let a = dir.join("a").display().to_string();
    let b = dir.join("b").display().to_string();
    ok(&["train-spt", "--data", &data, "--config", &cfg, "--out", &a]);
    ok(&["train-spt", "--data", &data, "--config", &cfg, "--out", &b]);
    let read = |d: &str| fs::read(Path::new(d).join("curves.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    let c = dir.join("c").display().to_string();
    ok(&["train-spt", "--data", &data, "--config", &cfg, "--out", &c, "--seed", "9"]);
    assert_ne!(read(&a), read(&c));
}

#[test]
fn sweep_writes_cells_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (data, cfg) = setup(dir);
    let out = dir.join("sweep").display().to_string();
    let text = ok(&[
        "sweep", "--data", &data, "--config", &cfg, "--out", &out, "--grid", "spt.alpha=0.1,0.3", "--set", "spt.max_epochs=1",
    ]);
    assert_eq!(text.lines().count(), 2);
    assert!(Path::new(&out).join("alpha=0.1/checkpoint.bin").is_file());
    let summary = fs::read_to_string(Path::new(&out).join("sweep.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn run_dir_env_is_default_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (data, cfg) = setup(dir);
    let out = Command::new(env!("CARGO_BIN_EXE_lares"))
        .args(["train-spt", "--data", &data, "--config", &cfg, "--set", "spt.max_epochs=1"])
        .env("LARES_RUN_DIR", dir.join("runs"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("runs/spt/checkpoint.bin").is_file());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(lares(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(lares(&["train-spt", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(lares(&[]).status.code(), Some(2));
    assert_eq!(lares(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = lares(&["train-spt", "--data", &dir.join("nope").display().to_string(), "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(err.starts_with("error: "));

    let bad_key = lares(&["train-spt", "--set", "arch.nope=1"]);
    assert_eq!(bad_key.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("arch.nope"));

    let empty = lares(&["report", "--run", &dir.display().to_string()]);
    assert_eq!(empty.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&empty.stderr).contains("curves.csv"));
}
