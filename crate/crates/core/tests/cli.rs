use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("signrl-cli-{name}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn signrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_signrl")).args(args).output().unwrap()
}

fn score(dir: &Path, cands: &str, refs: &str, extra: &[&str]) -> Output {
    let (c, r) = (dir.join("cand.txt"), dir.join("ref.txt"));
    std::fs::write(&c, cands).unwrap();
    std::fs::write(&r, refs).unwrap();
    let mut args = vec!["score", "--candidates", c.to_str().unwrap(), "--references", r.to_str().unwrap()];
    args.extend_from_slice(extra);
    signrl(&args)
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn two(v: &Value) -> String {
    format!("{:.2}", v.as_f64().unwrap())
}

#[test]
fn file_against_itself_is_perfect() {
    let dir = scratch("self");
    let text = "liebe zuschauer guten abend\nes regnet heute im norden\n";
    let v = json(&score(&dir, text, text, &[]));
    for k in ["bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l"] {
        assert_eq!(two(&v["corpus"][k]), "100.00", "{k}");
    }
    for line in v["lines"].as_array().unwrap() {
        assert_eq!((two(&line["bleu4"]), two(&line["rouge_l"])), ("100.00".into(), "100.00".into()));
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn exact_match_rows_in_both_modes() {
    let dir = scratch("cjk");
    let v = json(&score(&dir, "世界上没有后悔药\n", "世界上没有后悔药\n", &["--mode", "cjk-char"]));
    assert_eq!((two(&v["lines"][0]["bleu4"]), two(&v["lines"][0]["rouge_l"])), ("100.00".into(), "100.00".into()));
    assert_eq!(v["corpus"]["candidate_length"], 8);
    let v = json(&score(&dir, "liebe zuschauer guten abend\n", "liebe zuschauer guten abend\n", &[]));
    assert_eq!((two(&v["lines"][0]["bleu4"]), two(&v["lines"][0]["rouge_l"])), ("100.00".into(), "100.00".into()));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn hand_computed_pair_through_files() {
    let dir = scratch("pair");
    let out_file = dir.join("report.json");
    let v = json(&score(&dir, "a b c d\na c d\n", "a b c d e\na b c d\n", &["--out", out_file.to_str().unwrap()]));
    assert_eq!(two(&v["lines"][0]["bleu4"]), "77.88");
    assert_eq!(two(&v["lines"][1]["rouge_l"]), "85.71");
    let saved: Value = serde_json::from_slice(&std::fs::read(&out_file).unwrap()).unwrap();
    assert_eq!(saved, v);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn line_count_mismatch_is_one_json_error_line() {
    let dir = scratch("mismatch");
    let out = score(&dir, "a b\nc d\ne f\n", "a b\n", &[]);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1);
    let v: Value = serde_json::from_str(&err).unwrap();
    assert_eq!(v["error"], "format");
    let msg = v["message"].as_str().unwrap();
    assert!(msg.contains('3') && msg.contains('1'), "{msg}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn usage_and_gating_errors_are_machine_readable() {
    let out = signrl(&["frobnicate"]);
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"], "usage");

    let dir = scratch("gating");
    let data = dir.join("data");
    let conf = dir.join("tiny.conf");
    std::fs::write(&conf, "corpus.train = 12\ncorpus.dev = 4\ncorpus.test = 4\npretrain.epochs = 1\n").unwrap();
    let c = conf.to_str().unwrap();
    let gen = json(&signrl(&["--config", c, "--out", data.to_str().unwrap(), "gen"]));
    assert_eq!(gen["train"], 12);
    let run = dir.join("run");
    let pre = json(&signrl(&["--config", c, "--out", run.to_str().unwrap(), "pretrain", "--data", data.to_str().unwrap()]));
    let ck = pre["checkpoint"].as_str().unwrap().to_string();
    assert!(run.join("pretrain.log.jsonl").exists());
    // a pretrain checkpoint can feed neither rft nor eval
    for args in [
        vec!["rft", "--data", data.to_str().unwrap(), "--init", ck.as_str()],
        vec!["eval", "--data", data.to_str().unwrap(), "--ckpt", ck.as_str()],
    ] {
        let mut full = vec!["--config", c, "--out", run.to_str().unwrap()];
        full.extend(args);
        let out = signrl(&full);
        assert!(!out.status.success());
        let v: Value = serde_json::from_slice(&out.stderr).unwrap();
        assert_eq!(v["error"], "stage");
    }
    let out = signrl(&["--out", run.to_str().unwrap(), "sft", "--data", data.to_str().unwrap(), "--init", "/nonexistent.rvck"]);
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(!out.status.success() && v["error"].is_string());
    std::fs::remove_dir_all(&dir).ok();
}
