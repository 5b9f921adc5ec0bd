mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use common::{subprocess_workers, Fixture};
use jchat_core::manifest::{read_shard, validate_manifest, CorpusManifest, Shard};
use jchat_core::package::tree_hash;
use jchat_core::pipeline::{Interrupt, Pipeline, PipelineConfig, RunOptions};
use jchat_core::{Error, Stage, StageStatus};

fn pipeline(cfg_path: &Path, opts: RunOptions) -> Pipeline {
    Pipeline::new(PipelineConfig::load(cfg_path).unwrap(), opts).unwrap()
}

fn opts(jobs: usize) -> RunOptions {
    RunOptions { jobs, interrupt: None }
}

fn span_key(uri: &str, s: f64, e: f64) -> (String, i64, i64) {
    (uri.to_string(), (s * 1e6).round() as i64, (e * 1e6).round() as i64)
}

#[test]
fn mock_run_matches_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::build(tmp.path());
    let cfg = fx.write_config("c.toml", &tmp.path().join("work"), &tmp.path().join("out"), "mock = true");
    let p = pipeline(&cfg, opts(4));
    let outcomes = p.run_all().unwrap();
    assert_eq!(outcomes.len(), 7);
    assert_eq!(p.num_shards().unwrap(), 3);

    let mut segment_retained = BTreeSet::new();
    let mut released = BTreeSet::new();
    let mut uris = std::collections::HashMap::new();
    for path in CorpusManifest::from_dir(&p.layout().manifest_dir(Stage::Cleanse)).unwrap().shards {
        let shard = Shard::from_records(read_shard(&path).unwrap());
        for d in &shard.documents {
            uris.insert(d.doc_id.clone(), d.uri.clone());
        }
        for d in shard.dialogues {
            let key = span_key(&uris[&d.doc_id], d.start_s, d.end_s);
            if d.rejection.is_none() {
                segment_retained.insert(key.clone());
            }
            if d.status(Stage::Cleanse) == StageStatus::Done {
                released.insert(key);
            }
        }
    }
    let truth = fx.ground_truth();
    let want: BTreeSet<_> = truth.iter().map(|t| span_key(&t.uri, t.start_s, t.end_s)).collect();
    let want_released: BTreeSet<_> = truth
        .iter()
        .filter(|t| t.released)
        .map(|t| span_key(&t.uri, t.start_s, t.end_s))
        .collect();
    assert_eq!(segment_retained, want);
    assert_eq!(released, want_released);

    for stage in [Stage::Collect, Stage::Lid, Stage::Diarize, Stage::Segment, Stage::Cleanse] {
        let report = validate_manifest(&CorpusManifest::from_dir(&p.layout().manifest_dir(stage)).unwrap()).unwrap();
        assert!(report.is_valid(), "{stage}: {:?}", report.violations);
    }

    let out = tmp.path().join("out");
    let lines: usize = ["train", "valid", "test"]
        .iter()
        .map(|s| fs::read_to_string(out.join(s).join("manifest.jsonl")).unwrap().lines().count())
        .sum();
    assert_eq!(lines, want_released.len());
    assert_eq!(fs::read_to_string(out.join("valid/manifest.jsonl")).unwrap().lines().count(), 2);
    assert!(p.layout().stats_path().is_file());
}

#[test]
fn second_run_skips_everything() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::build(tmp.path());
    let cfg = fx.write_config("c.toml", &tmp.path().join("work"), &tmp.path().join("out"), "mock = true");
    pipeline(&cfg, opts(2)).run_all().unwrap();
    let before = tree_hash(&tmp.path().join("out")).unwrap();
    let again = pipeline(&cfg, opts(2)).run_all().unwrap();
    assert!(again.iter().all(|o| o.ran == 0), "{again:?}");
    assert_eq!(tree_hash(&tmp.path().join("out")).unwrap(), before);
}

#[test]
fn stage_order_is_enforced() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::build(tmp.path());
    let cfg = fx.write_config("c.toml", &tmp.path().join("work"), &tmp.path().join("out"), "mock = true");
    let p = pipeline(&cfg, opts(1));
    assert!(matches!(p.run_stage(Stage::Lid), Err(Error::StageOrder { .. })));
    p.run_stage(Stage::Collect).unwrap();
    assert!(matches!(p.run_stage(Stage::Segment), Err(Error::StageOrder { .. })));
    assert!(matches!(p.run_stage(Stage::Package), Err(Error::StageOrder { .. })));
}

#[test]
fn tampered_output_is_redone() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::build(tmp.path());
    let cfg = fx.write_config("c.toml", &tmp.path().join("work"), &tmp.path().join("out"), "mock = true");
    let p = pipeline(&cfg, opts(2));
    p.run_through(Stage::Lid).unwrap();
    let shard = p.layout().shard_path(Stage::Lid, 1);
    let good = fs::read(&shard).unwrap();
    fs::write(&shard, b"").unwrap();
    let o = p.run_stage(Stage::Lid).unwrap();
    assert_eq!((o.ran, o.skipped), (1, 2));
    assert_eq!(fs::read(&shard).unwrap(), good);
}

#[test]
fn interrupted_shard_is_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::build(tmp.path());
    let cfg = fx.write_config("c.toml", &tmp.path().join("work"), &tmp.path().join("out"), "mock = true");
    let crash = RunOptions {
        jobs: 1,
        interrupt: Some(Interrupt {
            stage: Stage::Diarize,
            after_units: 2,
        }),
    };
    let err = pipeline(&cfg, crash).run_all().unwrap_err();
    assert!(matches!(err, Error::Interrupted { stage: Stage::Diarize, shards: 2 }));
    let resumed = pipeline(&cfg, opts(1));
    let o = resumed.run_stage(Stage::Diarize).unwrap();
    assert_eq!((o.ran, o.skipped), (2, 1));
}

#[test]
fn subprocess_workers_give_the_same_release() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::build(tmp.path());
    let a = fx.write_config("a.toml", &tmp.path().join("wa"), &tmp.path().join("oa"), "mock = true");
    let workers = subprocess_workers(env!("CARGO_BIN_EXE_jchat-mock-worker"), 2);
    let b = fx.write_config("b.toml", &tmp.path().join("wb"), &tmp.path().join("ob"), &workers);
    pipeline(&a, opts(3)).run_all().unwrap();
    pipeline(&b, opts(3)).run_all().unwrap();
    assert_eq!(
        tree_hash(&tmp.path().join("oa")).unwrap(),
        tree_hash(&tmp.path().join("ob")).unwrap()
    );
    assert!(tmp.path().join("wb/logs/lid.log").is_file());
}

#[test]
fn features_are_sampled_from_cleansed_dialogues() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::build(tmp.path());
    let cfg = fx.write_config("c.toml", &tmp.path().join("work"), &tmp.path().join("out"), "mock = true");
    let p = pipeline(&cfg, opts(2));
    p.run_through(Stage::Cleanse).unwrap();
    let stem = tmp.path().join("feat");
    let m = p.features(&stem).unwrap();
    assert_eq!((m.rows, m.dim), (50, 16));
    let (header, back) = jchat_core::analytics::read_feature_matrix(&stem).unwrap();
    assert_eq!(header.spec.seed, 13);
    assert_eq!(back, m);
}
