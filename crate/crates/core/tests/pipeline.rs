mod common;

use std::fs;

use common::synth::toy_pipeline;
use transference::pipeline::{run_pipeline, PipelineConfig, StageStatus, LOCK};
use transference::Error;

const STAGES: [&str; 12] = [
    "clean",
    "truecase",
    "lm",
    "score",
    "split",
    "bpe",
    "train",
    "finetune",
    "average",
    "translate",
    "postprocess",
    "evaluate",
];

fn statuses(out: &transference::pipeline::PipelineOutcome) -> Vec<(&str, StageStatus)> {
    out.stages
        .iter()
        .map(|s| (s.stage.as_str(), s.status))
        .collect()
}

#[test]
fn smoke_run_then_resume_then_tamper() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_pipeline(dir.path(), 200, 30);
    let first = run_pipeline(&cfg).unwrap();
    assert_eq!(statuses(&first), STAGES.map(|s| (s, StageStatus::Ran)));
    for r in [&first.report.generic, &first.report.finetuned] {
        assert_eq!(r.sentences, 30);
        assert!((0.0..=100.0).contains(&r.bleu) && r.ter >= 0.0);
    }
    for s in STAGES {
        assert!(cfg.workdir.join(s).join("manifest.json").is_file(), "{s}");
    }
    assert!(!cfg.workdir.join(LOCK).exists());

    let second = run_pipeline(&cfg).unwrap();
    assert_eq!(statuses(&second), STAGES.map(|s| (s, StageStatus::Skipped)));
    assert_eq!(second.report, first.report);

    // Editing an intermediate artifact reruns its producer and everything
    // downstream; stages above it stay cached.
    let lm = cfg.workdir.join("lm/in.src.json");
    let mut text = fs::read_to_string(&lm).unwrap();
    text.push('\n');
    fs::write(&lm, text).unwrap();
    let third = run_pipeline(&cfg).unwrap();
    let ran: Vec<&str> = third
        .stages
        .iter()
        .filter(|s| s.status == StageStatus::Ran)
        .map(|s| s.stage.as_str())
        .collect();
    assert_eq!(
        ran,
        [
            "lm",
            "score",
            "split",
            "bpe",
            "train",
            "finetune",
            "average",
            "translate",
            "postprocess",
            "evaluate"
        ]
    );
    // The regenerated LM is byte-identical, so the results are too.
    assert_eq!(third.report, first.report);

    // A changed raw input reruns everything.
    let src = &cfg.data.train_source;
    let mut text = fs::read_to_string(src).unwrap();
    text = text.replacen('.', "!", 1);
    fs::write(src, text).unwrap();
    let fourth = run_pipeline(&cfg).unwrap();
    assert_eq!(statuses(&fourth), STAGES.map(|s| (s, StageStatus::Ran)));
}

#[test]
fn changed_parameter_reruns_downstream_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_pipeline(dir.path(), 120, 20);
    cfg.train.epochs = 1;
    run_pipeline(&cfg).unwrap();
    cfg.search.beam = 1;
    let out = run_pipeline(&cfg).unwrap();
    let ran: Vec<&str> = out
        .stages
        .iter()
        .filter(|s| s.status == StageStatus::Ran)
        .map(|s| s.stage.as_str())
        .collect();
    assert_eq!(ran, ["translate", "postprocess", "evaluate"]);
}

#[test]
fn oversized_validation_split_fails_at_split() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_pipeline(dir.path(), 50, 10);
    cfg.select.n_val = 500;
    match run_pipeline(&cfg) {
        Err(Error::Stage { stage, cause }) => {
            assert_eq!(stage, "split");
            assert!(matches!(*cause, Error::Config(_)), "{cause}");
        }
        other => panic!("expected a split failure, got {other:?}"),
    }
    // Work done before the failure is kept, and the lock is released.
    assert!(cfg.workdir.join("score/manifest.json").is_file());
    assert!(!cfg.workdir.join(LOCK).exists());
}

#[test]
fn concurrent_run_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_pipeline(dir.path(), 50, 10);
    fs::create_dir_all(&cfg.workdir).unwrap();
    fs::write(cfg.workdir.join(LOCK), "").unwrap();
    assert!(matches!(run_pipeline(&cfg), Err(Error::Config(m)) if m.contains("locked")));
}

#[test]
fn config_toml_roundtrip_and_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_pipeline(dir.path(), 20, 5);
    let mut rel = cfg.clone();
    rel.workdir = "work".into();
    rel.data.train_source = "data/train.src".into();
    let text = rel.to_toml().unwrap();
    assert_eq!(PipelineConfig::from_toml(&text).unwrap(), rel);
    let path = dir.path().join("run.toml");
    fs::write(&path, &text).unwrap();
    let loaded = PipelineConfig::load(&path).unwrap();
    assert_eq!(loaded.data.train_source, dir.path().join("data/train.src"));
    assert_eq!(loaded.workdir, dir.path().join("work"));
    loaded.validate().unwrap();

    let partial = PipelineConfig::from_toml("[data]\ntrain_source = \"a\"\n");
    assert!(matches!(partial, Err(Error::Config(_))));
    let mistyped = PipelineConfig::from_toml("seed = \"x\"\n");
    assert!(matches!(mistyped, Err(Error::Config(_))));
    // Without a data section the config parses but cannot drive a run.
    let bare = PipelineConfig::from_toml("[search]\nbeam = 3\n").unwrap();
    assert_eq!(bare.search.beam, 3);
    assert!(matches!(bare.validate(), Err(Error::Config(_))));
}
