use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{fnv1a, spec_augment, wave_copies, AugmentMethod, Provenance};
use crate::autodiff::{AdamConfig, OptimizerState, ParamStore};
use crate::datapipe::{
    build_char_vocab, filter_entries, load_manifest, normalize_text, split_by_speaker, ManifestEntry, SplitName,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::evalkit::{aggregate_report, transcribe, wer, ResultsTable, RowLabels, WerReport};
use crate::losses::{total_objective, TrainExample, View};
use crate::model::{apply_peft, build_model, count_trainable_params, Model};
use crate::runner::{validate_config, ExperimentConfig};
use crate::signal::{load_wav, FeatureMatrix, FrontendConfig, Waveform};

/// A loaded utterance with its clean features.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub entry: ManifestEntry,
    pub wave: Waveform,
    pub features: FeatureMatrix,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub splits: BTreeMap<SplitName, Vec<Utterance>>,
    /// Entries dropped by the filter.
    pub removed: usize,
}

impl Dataset {
    pub fn split(&self, s: SplitName) -> &[Utterance] {
        self.splits.get(&s).map_or(&[], Vec::as_slice)
    }
}

fn load_utterances(entries: &[ManifestEntry], base: &Path, fe: &FrontendConfig) -> Result<Vec<Utterance>> {
    entries
        .par_iter()
        .map(|e| {
            let run = || -> Result<Utterance> {
                let wave = load_wav(&e.audio_path(base))?;
                let features = fe.extract(&wave)?;
                Ok(Utterance {
                    entry: e.clone(),
                    wave,
                    features,
                })
            };
            run().map_err(|err| err.in_utterance(&e.id))
        })
        .collect()
}

fn base_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads, filters and splits the configured manifests, extracts clean
/// features and builds the character vocabulary from the training split.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let mut removed = 0;
    let mut keep = |entries: Vec<ManifestEntry>| {
        if d.apply_filter {
            let out = filter_entries(&entries, &d.filter);
            removed += out.removed.len();
            out.kept
        } else {
            entries
        }
    };
    let mut sources: Vec<(SplitName, Vec<ManifestEntry>, PathBuf)> = Vec::new();
    if let Some(m) = &d.manifest {
        let entries = keep(load_manifest(m)?);
        let splits = split_by_speaker(&entries, &d.split)?;
        for s in SplitName::ALL {
            sources.push((s, splits.get(s).to_vec(), base_dir(m)));
        }
    } else {
        let train = d.train.as_ref().ok_or_else(|| Error::config("data.train", "missing"))?;
        sources.push((SplitName::Train, keep(load_manifest(train)?), base_dir(train)));
        for (s, p) in [(SplitName::Dev, &d.dev), (SplitName::Test, &d.test)] {
            if let Some(p) = p {
                sources.push((s, load_manifest(p)?, base_dir(p)));
            }
        }
    }
    let mut splits = BTreeMap::new();
    for (s, entries, base) in sources {
        splits.insert(s, load_utterances(&entries, &base, &cfg.frontend)?);
    }
    let train = splits.get(&SplitName::Train).map_or(&[][..], Vec::as_slice);
    if train.is_empty() {
        return Err(Error::Split("the training split is empty".into()));
    }
    let texts: Vec<String> = train.iter().map(|u| normalize_text(&u.entry.text)).collect();
    let vocab = build_char_vocab(texts.iter().map(String::as_str));
    Ok(Dataset { vocab, splits, removed })
}

/// A training utterance with its encoded target and waveform-perturbed
/// copies. Waveform perturbation is drawn once, here; SpecAugment masks
/// are redrawn at every step.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub id: String,
    pub target: Vec<usize>,
    pub original: FeatureMatrix,
    pub copies: Vec<FeatureMatrix>,
    pub provenance: Vec<Provenance>,
}

pub fn prepare_examples(
    utts: &[Utterance],
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
) -> Result<Vec<PreparedExample>> {
    let policy = &cfg.augment;
    let n_copies = if policy.method == AugmentMethod::None { 0 } else { policy.copies };
    utts.par_iter()
        .map(|u| {
            let run = || -> Result<PreparedExample> {
                let target = vocab.encode(&normalize_text(&u.entry.text), &u.entry.id)?;
                let mut rng = policy.rng_for(&u.entry.id);
                let mut copies = Vec::with_capacity(n_copies);
                let mut provenance = Vec::with_capacity(n_copies);
                for (w, p) in wave_copies(&u.wave, policy.method, n_copies, &mut rng)? {
                    copies.push(cfg.frontend.extract(&w)?);
                    provenance.push(p);
                }
                Ok(PreparedExample {
                    id: u.entry.id.clone(),
                    target,
                    original: u.features.clone(),
                    copies,
                    provenance,
                })
            };
            run().map_err(|e| e.in_utterance(&u.entry.id))
        })
        .collect()
}

fn step_rng(seed: u64, step: usize, id: &str) -> ChaCha8Rng {
    let mix = (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(id) ^ mix)
}

fn to_example(p: &PreparedExample, cfg: &ExperimentConfig, step: usize) -> TrainExample {
    let sa = cfg.augment.method.uses_spec_augment();
    let mut rng = step_rng(cfg.augment.seed, step, &p.id);
    let copies = p
        .copies
        .iter()
        .map(|c| {
            let f = if sa {
                spec_augment(c, &cfg.augment.spec_augment, &mut rng)
            } else {
                c.clone()
            };
            View::new(f)
        })
        .collect();
    TrainExample {
        id: p.id.clone(),
        original: View::new(p.original.clone()),
        copies,
        target: p.target.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub task_loss: f64,
    pub pif_loss: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_wer: Option<f64>,
}

/// Summary of a finished run, written as `record.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub losses: Vec<StepLog>,
    pub best_step: Option<usize>,
    pub best_dev_wer: Option<f64>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub wall_time_s: f64,
    pub results: ResultsTable,
}

impl RunRecord {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().map(|l| l.total)
    }
}

pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: Model,
    pub vocab: Vocabulary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub report: WerReport,
}

/// Greedy transcripts and WER for each utterance, in input order.
pub fn decode_utterances(
    model: &Model,
    vocab: &Vocabulary,
    utts: &[(String, String, FeatureMatrix)],
    max_decode_len: usize,
) -> Result<Vec<UtteranceResult>> {
    utts.par_iter()
        .map(|(id, text, feat)| {
            let run = || -> Result<UtteranceResult> {
                let reference = normalize_text(text);
                let hypothesis = transcribe(model, feat, vocab, max_decode_len)?;
                let report = wer(&reference, &hypothesis)?;
                Ok(UtteranceResult {
                    id: id.clone(),
                    reference,
                    hypothesis,
                    report,
                })
            };
            run().map_err(|e| e.in_utterance(id))
        })
        .collect()
}

fn score_split(
    model: &Model,
    vocab: &Vocabulary,
    utts: &[Utterance],
    max_decode_len: usize,
) -> Result<Vec<UtteranceResult>> {
    let items: Vec<_> = utts
        .iter()
        .map(|u| (u.entry.id.clone(), u.entry.text.clone(), u.features.clone()))
        .collect();
    decode_utterances(model, vocab, &items, max_decode_len)
}

fn pooled_wer(results: &[UtteranceResult]) -> f64 {
    let errors: usize = results.iter().map(|r| r.report.errors()).sum();
    let words: usize = results.iter().map(|r| r.report.ref_words).sum();
    errors as f64 / words.max(1) as f64
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Builds the model for `cfg` with the vocabulary size resolved.
fn model_for(cfg: &ExperimentConfig, vocab: &Vocabulary) -> Result<Model> {
    let mut mcfg = cfg.model.clone();
    if mcfg.vocab_size == 0 {
        mcfg.vocab_size = vocab.len();
    } else if mcfg.vocab_size < vocab.len() {
        return Err(Error::config(
            "model.vocab_size",
            format!("{} is smaller than the {}-symbol training vocabulary", mcfg.vocab_size, vocab.len()),
        ));
    }
    apply_peft(build_model(&mcfg, cfg.train.seed)?, &cfg.peft)
}

/// Validates `cfg`, loads its data and trains. With `out_dir` the run
/// directory receives config.json, vocab.json, train_log.jsonl,
/// final.ckpt, best.ckpt and record.json.
pub fn train(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    validate_config(cfg)?;
    let data = load_dataset(cfg)?;
    let prepared = prepare_examples(data.split(SplitName::Train), cfg, &data.vocab)?;
    train_prepared(cfg, &data, &prepared, out_dir)
}

/// The training loop over already prepared examples.
pub fn train_prepared(
    cfg: &ExperimentConfig,
    data: &Dataset,
    prepared: &[PreparedExample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let t = &cfg.train;
    if prepared.is_empty() {
        return Err(Error::Split("no training examples".into()));
    }
    let vocab = data.vocab.clone();
    let mut model = model_for(cfg, &vocab)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        cfg.save(&dir.join("config.json"))?;
        vocab.save(&dir.join("vocab.json"))?;
    }
    let adam = AdamConfig {
        lr: t.learning_rate,
        weight_decay: t.weight_decay,
        ..AdamConfig::default()
    };
    let mut opt = OptimizerState::new(adam, model.store());
    let dev = data.split(SplitName::Dev);

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut losses = Vec::with_capacity(t.steps);
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for step in 1..=t.steps {
        let mut batch_idx = Vec::with_capacity(t.batch_size);
        while batch_idx.len() < t.batch_size.min(prepared.len()) {
            if cursor == order.len() {
                order = (0..prepared.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(t.seed ^ fnv1a("epoch") ^ epoch));
                epoch += 1;
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<TrainExample> = batch_idx.iter().map(|&i| to_example(&prepared[i], cfg, step)).collect();
        let (parts, grads) = total_objective(&model, &batch, &cfg.pif)?;
        if !parts.total.is_finite() {
            return Err(Error::Diverged(format!("loss is {} at step {step}", parts.total)));
        }
        optimizer_step_checked(&mut model, &grads, &mut opt, step)?;
        let mut log = StepLog {
            step,
            task_loss: parts.task_loss,
            pif_loss: parts.pif_loss,
            total: parts.total,
            dev_wer: None,
        };
        let eval_now = !dev.is_empty() && ((t.eval_interval > 0 && step % t.eval_interval == 0) || step == t.steps);
        if eval_now {
            let w = pooled_wer(&score_split(&model, &vocab, dev, t.max_decode_len)?);
            log.dev_wer = Some(w);
            if best.as_ref().is_none_or(|(_, bw, _)| w < *bw) {
                best = Some((step, w, model.store().clone()));
            }
        }
        losses.push(log);
        if let Some(dir) = out_dir {
            if t.checkpoint_interval > 0 && step % t.checkpoint_interval == 0 {
                model.save_checkpoint(&dir.join("latest.ckpt"))?;
            }
        }
    }

    let mut results = ResultsTable::default();
    let trainable = count_trainable_params(&model);
    let final_loss = losses.last().map(|l: &StepLog| l.total);
    for &s in &cfg.eval.splits {
        let utts = data.split(s);
        if utts.is_empty() {
            return Err(Error::Split(format!("the {s} split is empty")));
        }
        let res = score_split(&model, &vocab, utts, t.max_decode_len)?;
        let reports: Vec<WerReport> = res.into_iter().map(|r| r.report).collect();
        let labels = RowLabels {
            system: cfg.system_label(),
            split: s.to_string(),
            trainable_params: trainable,
            wall_time_s: start.elapsed().as_secs_f64(),
            final_loss,
        };
        results.merge(aggregate_report(&reports, &labels)?);
    }

    let record = RunRecord {
        name: cfg.system_label(),
        config_hash: cfg.hash(),
        seed: t.seed,
        steps: t.steps,
        best_step: best.as_ref().map(|b| b.0),
        best_dev_wer: best.as_ref().map(|b| b.1),
        losses,
        trainable_params: trainable,
        total_params: model.store().total_numel(),
        wall_time_s: start.elapsed().as_secs_f64(),
        results,
    };
    if let Some(dir) = out_dir {
        model.save_checkpoint(&dir.join("final.ckpt"))?;
        let best_path = dir.join("best.ckpt");
        match &best {
            Some((_, _, store)) => {
                let mut snapshot = model_for(cfg, &vocab)?;
                *snapshot.store_mut() = store.clone();
                snapshot.save_checkpoint(&best_path)?;
            }
            None => model.save_checkpoint(&best_path)?,
        }
        write_jsonl(&dir.join("train_log.jsonl"), &record.losses)?;
        fs::write(dir.join("record.json"), serde_json::to_string_pretty(&record)?)?;
    }
    Ok(TrainOutcome { record, model, vocab })
}

fn optimizer_step_checked(
    model: &mut Model,
    grads: &crate::autodiff::GradMap,
    opt: &mut OptimizerState,
    step: usize,
) -> Result<()> {
    crate::autodiff::optimizer_step(model.store_mut(), grads, opt).map_err(|e| match e {
        Error::Diverged(m) => Error::Diverged(format!("{m} at step {step}")),
        e => e,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub table: ResultsTable,
    pub utterances: Vec<UtteranceResult>,
}

/// Scores `entries` (audio resolved against `base`) with an in-memory model.
pub fn evaluate_model(
    model: &Model,
    vocab: &Vocabulary,
    frontend: &FrontendConfig,
    entries: &[ManifestEntry],
    base: &Path,
    labels: &RowLabels,
    max_decode_len: usize,
) -> Result<EvalOutcome> {
    if entries.is_empty() {
        return Err(Error::Argument("the evaluation manifest is empty".into()));
    }
    let utts = load_utterances(entries, base, frontend)?;
    let items: Vec<_> = utts
        .into_iter()
        .map(|u| (u.entry.id, u.entry.text, u.features))
        .collect();
    let utterances = decode_utterances(model, vocab, &items, max_decode_len)?;
    let reports: Vec<WerReport> = utterances.iter().map(|r| r.report.clone()).collect();
    Ok(EvalOutcome {
        table: aggregate_report(&reports, labels)?,
        utterances,
    })
}

/// Rebuilds the model of a run directory from its config and seed, loads
/// `checkpoint` (a path, or `final`/`best`/`latest` inside the run) and
/// scores `manifest`.
pub fn evaluate(run_dir: &Path, checkpoint: &str, manifest: &Path, split_label: &str) -> Result<EvalOutcome> {
    let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(run_dir.join("config.json"))?)?;
    let vocab = Vocabulary::load(&run_dir.join("vocab.json"))?;
    let ckpt = match checkpoint {
        "final" | "best" | "latest" => run_dir.join(format!("{checkpoint}.ckpt")),
        p => PathBuf::from(p),
    };
    let mut model = model_for(&cfg, &vocab)?;
    let expected = if model.peft().is_some_and(|p| p.method != crate::model::PeftMethod::Full) {
        model.store().iter().filter(|(_, p)| p.trainable).count()
    } else {
        model.store().len()
    };
    let loaded = model.load_checkpoint(&ckpt)?;
    if loaded != expected {
        return Err(Error::Integrity(format!(
            "{} holds {loaded} tensors, the configured model expects {expected}",
            ckpt.display()
        )));
    }
    let entries = load_manifest(manifest)?;
    let labels = RowLabels {
        system: cfg.system_label(),
        split: split_label.to_string(),
        trainable_params: count_trainable_params(&model),
        wall_time_s: 0.0,
        final_loss: None,
    };
    evaluate_model(
        &model,
        &vocab,
        &cfg.frontend,
        &entries,
        &base_dir(manifest),
        &labels,
        cfg.train.max_decode_len,
    )
}
