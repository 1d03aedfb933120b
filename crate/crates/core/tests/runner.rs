use std::fs;
use std::path::Path;

use peftlab::augment::AugmentMethod;
use peftlab::datapipe::{save_manifest, synth_corpus, SplitName};
use peftlab::model::{ModelConfig, ModelMode, PeftMethod};
use peftlab::runner::{
    evaluate, load_dataset, prepare_examples, run_matrix, train, train_prepared, validate_config,
    ExperimentConfig, MatrixSpec, SizePreset,
};
use peftlab::Error;

fn small_config(dir: &Path, mode: ModelMode) -> ExperimentConfig {
    synth_corpus(dir, 3, 12, 3).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.model = ModelConfig::toy(mode);
    cfg.model.d_model = 32;
    cfg.model.ffn_dim = 64;
    cfg.model.subsample = 3;
    cfg.model.vocab_size = 0;
    cfg.data.train = Some(dir.join("manifest.jsonl"));
    cfg.eval.splits = vec![SplitName::Train];
    cfg.train.steps = 3;
    cfg
}

fn config_field(e: Error) -> String {
    match e {
        Error::Config { field, .. } => field,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn validation_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let base = small_config(dir.path(), ModelMode::Ctc);
    validate_config(&base).unwrap();

    let mut c = base.clone();
    c.pif.weight = 0.1;
    assert_eq!(config_field(validate_config(&c).unwrap_err()), "pif.weight");
    c.augment.method = AugmentMethod::Pp;
    validate_config(&c).unwrap();

    let mut c = base.clone();
    c.peft.method = PeftMethod::Prompt;
    c.peft.prompts_enc = 300;
    assert_eq!(config_field(validate_config(&c).unwrap_err()), "peft.prompts_enc");

    let mut c = base.clone();
    c.data.train = Some(dir.path().join("missing.jsonl"));
    assert_eq!(config_field(validate_config(&c).unwrap_err()), "data.train");

    let mut c = base.clone();
    c.frontend.n_mels = 20;
    assert_eq!(config_field(validate_config(&c).unwrap_err()), "frontend.n_mels");

    let mut c = base.clone();
    c.eval.splits = vec![SplitName::Dev];
    assert_eq!(config_field(validate_config(&c).unwrap_err()), "eval.splits");

    let mut c = base;
    c.augment.spec_augment.max_time_fraction = 0.9;
    assert_eq!(
        config_field(validate_config(&c).unwrap_err()),
        "augment.spec_augment.max_time_fraction"
    );
}

#[test]
fn config_files_resolve_paths_and_reject_typos() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), ModelMode::Ctc);
    let text = serde_json::json!({
        "model": { "mode": "ctc", "d_model": 32, "ffn_dim": 64, "vocab_size": 0 },
        "data": { "train": "manifest.jsonl" },
        "train": { "steps": 3 },
        "eval": { "splits": ["train"] }
    });
    let path = dir.path().join("exp.json");
    fs::write(&path, text.to_string()).unwrap();
    let loaded = ExperimentConfig::load(&path).unwrap();
    assert_eq!(loaded.data.train, cfg.data.train);
    assert_eq!(loaded.train.batch_size, 4);
    assert_eq!(loaded.train.learning_rate, 3e-4);
    validate_config(&loaded).unwrap();

    for typo in [r#"{"train": {"stpes": 3}}"#, r#"{"model": {"d_modle": 3}}"#, r#"{"augment": {"spec_augment": {"masks": 1}}}"#] {
        fs::write(&path, typo).unwrap();
        assert!(matches!(ExperimentConfig::load(&path), Err(Error::Config { .. })), "{typo}");
    }
}

#[test]
fn hash_tracks_content() {
    let a = ExperimentConfig::default();
    let mut b = a.clone();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
    b.train.seed = 1;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn run_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), ModelMode::EncDec);
    let run = dir.path().join("run");
    let out = train(&cfg, Some(&run)).unwrap();
    for f in ["config.json", "vocab.json", "final.ckpt", "best.ckpt", "train_log.jsonl", "record.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    assert_eq!(out.record.losses.len(), 3);
    assert_eq!(out.record.config_hash, cfg.hash());
    assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 3);

    let manifest = dir.path().join("manifest.jsonl");
    let ev = evaluate(&run, "final", &manifest, "train").unwrap();
    let (a, b) = (&ev.table.rows[0], &out.record.results.rows[0]);
    assert_eq!((a.errors, a.ref_words, a.utterances), (b.errors, b.ref_words, b.utterances));
    assert_eq!(ev.utterances.len(), 12);

    let empty = dir.path().join("empty.jsonl");
    save_manifest(&empty, &[]).unwrap();
    assert!(evaluate(&run, "final", &empty, "x").is_err());
}

#[test]
fn checkpoint_from_another_method_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), ModelMode::Ctc);
    cfg.peft.method = PeftMethod::Lora;
    let run = dir.path().join("run");
    train(&cfg, Some(&run)).unwrap();

    let mut other = cfg.clone();
    other.peft.method = PeftMethod::Adapter;
    other.save(&run.join("config.json")).unwrap();
    let err = evaluate(&run, "final", &dir.path().join("manifest.jsonl"), "train").unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err}");
}

#[test]
fn non_finite_inputs_stop_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), ModelMode::Ctc);
    let data = load_dataset(&cfg).unwrap();
    let mut prepared = prepare_examples(data.split(SplitName::Train), &cfg, &data.vocab).unwrap();
    for p in &mut prepared {
        p.original.values_mut()[0] = f64::NAN;
    }
    let err = train_prepared(&cfg, &data, &prepared, None).err().unwrap();
    assert!(matches!(err.root(), Error::Diverged(_)), "{err}");
}

#[test]
fn matrix_reports_failed_cells_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), ModelMode::Ctc);
    cfg.peft.prompts_enc = 1000;
    let spec = MatrixSpec {
        sizes: vec![SizePreset::Tiny],
        peft: vec![PeftMethod::Full, PeftMethod::Prompt],
        augment: vec![AugmentMethod::None],
    };
    let out = run_matrix(&cfg, &spec, None).unwrap();
    assert_eq!(out.table.len(), 2);
    assert!(out.records["tiny/full/none"].is_ok());
    assert!(out.records["tiny/prompt/none"].is_err());
    let failed = out.table.rows.iter().find(|r| r.system == "tiny/prompt/none").unwrap();
    assert!(failed.failure.as_deref().unwrap().contains("peft.prompts_enc"));
    assert!(out.table.to_text().contains("failed"));
}
