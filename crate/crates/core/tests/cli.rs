//! End-to-end runs of the `revffn` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn revffn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_revffn")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// The default config shrunk so a full run takes well under a second.
fn small_config(dir: &Path, out: &str) -> std::path::PathBuf {
    let mut v = default_config();
    v["model"]["d_model"] = json!(16);
    v["model"]["n_heads"] = json!(2);
    v["model"]["d_ff"] = json!(16);
    v["model"]["n_layers"] = json!(2);
    v["model"]["vocab_size"] = json!(16);
    v["training"]["stage1"]["steps"] = json!(6);
    v["training"]["stage2"]["steps"] = json!(6);
    v["training"]["batch_size"] = json!(4);
    v["training"]["eval_every"] = json!(4);
    v["training"]["eval_batch_size"] = json!(8);
    v["training"]["checkpoint_every"] = json!(4);
    v["corpus"] = json!({"kind": "copy", "seq_len": 8, "n_train": 32, "n_eval": 8, "seed": 1});
    v["output_dir"] = json!(dir.join(out));
    let path = dir.join(format!("{out}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn default_config() -> Value {
    serde_json::to_value(revffn::config::RunConfig::default()).unwrap()
}

#[test]
fn mem_report_shows_one_over_depth() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mem");
    let o = revffn(&["mem-report", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    let row8 = text.lines().find(|l| l.trim_start().starts_with("8 ")).unwrap();
    assert!(row8.contains("0.125000") && row8.ends_with("ok"), "{row8}");
    assert!(out.join("mem_report.txt").exists());
    let j: Value = serde_json::from_str(&std::fs::read_to_string(out.join("mem_report.json")).unwrap()).unwrap();
    assert_eq!(j["pass"], json!(true));
}

#[test]
fn invert_check_strict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("inv");
    let o = revffn(&["invert-check", "--coupling", "strict", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let j: Value = serde_json::from_str(&std::fs::read_to_string(out.join("invert_check.json")).unwrap()).unwrap();
    assert!(j["strict_max_error"].as_f64().unwrap() <= 1e-10);
    assert!(stdout(&o).contains("non-increasing on every instance: true"));
}

#[test]
fn grad_check_at_zero_init_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let o = revffn(&["grad-check", "--coupling", "paper", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("max rel 0.000e0"), "{}", stdout(&o));
}

#[test]
fn invalid_config_exits_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = default_config();
    v["model"]["n_heads"] = json!(5);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let o = revffn(&["mem-report", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_heads"));

    std::fs::write(&path, "{\"model\": 1}").unwrap();
    assert_eq!(revffn(&["eval", "--config", path.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(revffn(&["train", "--precision", "half"]).status.code(), Some(2));
}

#[test]
fn eval_on_missing_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.bin");
    let o = revffn(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn train_is_reproducible_and_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    let logs: Vec<String> = ["a", "b"]
        .iter()
        .map(|name| {
            let cfg = small_config(dir.path(), name);
            let o = revffn(&["train", "--config", cfg.to_str().unwrap()]);
            assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
            std::fs::read_to_string(dir.path().join(name).join("train_log.jsonl")).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
    assert_eq!(
        std::fs::read(dir.path().join("a/final.bin")).unwrap(),
        std::fs::read(dir.path().join("b/final.bin")).unwrap()
    );

    // Resume from step 4 (inside stage 1) and from step 8 (inside stage 2).
    for at in [4usize, 8] {
        let name = format!("r{at}");
        let cfg = small_config(dir.path(), &name);
        let ck = dir.path().join(format!("a/ckpt-{at:06}.bin"));
        let o = revffn(&["train", "--config", cfg.to_str().unwrap(), "--resume", ck.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let resumed = std::fs::read_to_string(dir.path().join(&name).join("train_log.jsonl")).unwrap();
        let tail: Vec<&str> = logs[0]
            .lines()
            .filter(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap() as usize >= at)
            .collect();
        assert_eq!(resumed.lines().collect::<Vec<_>>(), tail, "resume at {at}");
        assert_eq!(
            std::fs::read(dir.path().join("a/final.bin")).unwrap(),
            std::fs::read(dir.path().join(&name).join("final.bin")).unwrap()
        );
    }

    let o = revffn(&[
        "eval",
        "--config",
        small_config(dir.path(), "a").to_str().unwrap(),
        "--checkpoint",
        dir.path().join("a/final.bin").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("perplexity"));
}
