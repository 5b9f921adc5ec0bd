mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::Fixture;
use jchat_core::package::tree_hash;

const JCHAT: &str = env!("CARGO_BIN_EXE_jchat");

fn jchat(args: &[&str]) -> Output {
    Command::new(JCHAT)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup(dir: &Path) -> (Fixture, String) {
    let fx = Fixture::build(dir);
    let cfg = fx.write_config("c.toml", &dir.join("work"), &dir.join("out"), "mock = true");
    (fx, cfg.display().to_string())
}

#[test]
fn run_then_report_and_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let (_fx, cfg) = setup(tmp.path());
    let o = jchat(&["--config", &cfg, "--jobs", "2", "run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("collect: ran 1 skipped 0 failed 1"), "{out}");
    assert!(out.contains("cleanse: ran 3 skipped 0 failed 1"), "{out}");

    let o = jchat(&["--config", &cfg, "report", "--json"]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["rows"][0]["overall"]["percent"], "95.0%");

    let o = jchat(&["--config", &cfg, "validate"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("0 violation(s)"));

    let o = jchat(&["--config", &cfg, "stats"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("stats: ran 0 skipped 1"));
    assert!(stdout(&o).contains("podcast"));

    let stem = tmp.path().join("f");
    let o = jchat(&["--config", &cfg, "features", "--out", stem.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::metadata(stem.with_extension("f32")).unwrap().len(), 50 * 16 * 4);
}

#[test]
fn validate_flags_a_broken_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (_fx, cfg) = setup(tmp.path());
    assert_eq!(code(&jchat(&["--config", &cfg, "collect"])), 0);
    let dir = tmp.path().join("work/manifest/collect");
    let shard = dir.join("shard-00000.jsonl");
    let text = fs::read_to_string(&shard).unwrap();
    let broken = text.replacen("\"duration_s\":40.0", "\"duration_s\":-1.0", 1);
    assert_ne!(broken, text);
    fs::write(&shard, broken).unwrap();
    let o = jchat(&["validate", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("duration_s must be >= 0"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let (fx, cfg) = setup(tmp.path());
    // missing --config
    assert_eq!(code(&jchat(&["run"])), 2);
    // invalid values
    let bad = fx.dir.join("bad.toml");
    fs::write(&bad, fx.config(&tmp.path().join("w"), &tmp.path().join("o"), "mock = true").replace("keywords = 7\n", "")).unwrap();
    let o = jchat(&["--config", bad.to_str().unwrap(), "run"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("keywords"));
    // unknown subcommand
    assert_eq!(code(&jchat(&["--config", &cfg, "transcribe"])), 2);
    // report without a ledger
    assert_eq!(code(&jchat(&["--config", &cfg, "report"])), 1);
    // stage out of order
    let o = jchat(&["--config", &cfg, "segment"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot run"));
}

#[test]
fn crash_and_resume_from_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let (fx, cfg) = setup(tmp.path());
    let clean = fx.write_config("clean.toml", &tmp.path().join("w2"), &tmp.path().join("o2"), "mock = true");
    assert_eq!(code(&jchat(&["--config", clean.to_str().unwrap(), "run"])), 0);

    let o = jchat(&["--config", &cfg, "--jobs", "1", "--interrupt-after", "segment:2", "run"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("interrupted at segment"));
    let o = jchat(&["--config", &cfg, "run"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("segment: ran 2 skipped 1"), "{}", stdout(&o));
    assert_eq!(
        tree_hash(&tmp.path().join("out")).unwrap(),
        tree_hash(&tmp.path().join("o2")).unwrap()
    );
}

#[test]
fn seed_override_changes_the_split() {
    let tmp = tempfile::tempdir().unwrap();
    let (_fx, cfg) = setup(tmp.path());
    assert_eq!(code(&jchat(&["--config", &cfg, "run"])), 0);
    let before = fs::read_to_string(tmp.path().join("out/test/manifest.jsonl")).unwrap();
    assert_eq!(code(&jchat(&["--config", &cfg, "--seed-override", "99", "run"])), 0);
    let after = fs::read_to_string(tmp.path().join("out/test/manifest.jsonl")).unwrap();
    assert_ne!(before, after);
}
