//! Experiment configuration, training, evaluation and the experiment matrix.

mod matrix;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentMethod, AugmentPolicy};
use crate::datapipe::{FilterPolicy, SplitName, SplitPolicy};
use crate::error::{Error, Result};
use crate::losses::PifConfig;
use crate::model::{ModelConfig, PeftConfig};
use crate::signal::FrontendConfig;

pub use matrix::{run_matrix, MatrixCell, MatrixOutcome, MatrixSpec, SizePreset};
pub use train::{
    decode_utterances, evaluate, evaluate_model, load_dataset, prepare_examples, train, train_prepared,
    Dataset, EvalOutcome, PreparedExample, RunRecord, StepLog, TrainOutcome, UtteranceResult, Utterance,
};

/// Where the data comes from. Either `manifest` (split by speaker here) or
/// explicit `train`/`dev`/`test` manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Drop entries that violate `filter` before use.
    pub apply_filter: bool,
    pub filter: FilterPolicy,
    pub split: SplitPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            train: None,
            dev: None,
            test: None,
            apply_filter: true,
            filter: FilterPolicy::default(),
            split: SplitPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Dev WER is measured every this many steps (0: only at the end).
    pub eval_interval: usize,
    /// `latest.ckpt` is refreshed every this many steps (0: never).
    pub checkpoint_interval: usize,
    /// Token budget for autoregressive decoding.
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 4,
            learning_rate: 3e-4,
            weight_decay: 0.0,
            seed: 0,
            eval_interval: 100,
            checkpoint_interval: 100,
            max_decode_len: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Splits scored with the final model.
    pub splits: Vec<SplitName>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            splits: vec![SplitName::Dev, SplitName::Test],
        }
    }
}

/// Everything that defines one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelConfig,
    pub peft: PeftConfig,
    pub frontend: FrontendConfig,
    pub augment: AugmentPolicy,
    pub pif: PifConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Parses a JSON config. Relative data paths are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::config("<root>", e.to_string()))?;
        if let Some(base) = path.parent() {
            cfg.data.resolve_against(base);
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn system_label(&self) -> String {
        if self.name.is_empty() {
            format!("{}+{}", self.peft.method, self.augment.method)
        } else {
            self.name.clone()
        }
    }
}

impl DataConfig {
    pub fn resolve_against(&mut self, base: &Path) {
        for p in [&mut self.manifest, &mut self.train, &mut self.dev, &mut self.test]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn has_split(&self, s: SplitName) -> bool {
        self.manifest.is_some()
            || match s {
                SplitName::Train => self.train.is_some(),
                SplitName::Dev => self.dev.is_some(),
                SplitName::Test => self.test.is_some(),
            }
    }
}

/// Checks every field and cross-field rule; errors name the offending field.
pub fn validate_config(cfg: &ExperimentConfig) -> Result<()> {
    cfg.model.validate()?;
    cfg.peft.validate()?;
    cfg.augment.spec_augment.validate()?;
    cfg.pif.validate()?;
    cfg.data.filter.validate()?;
    cfg.data.split.validate()?;

    let fe = &cfg.frontend;
    if fe.n_mels != cfg.model.n_mels {
        return Err(Error::config(
            "frontend.n_mels",
            format!("{} does not match model.n_mels {}", fe.n_mels, cfg.model.n_mels),
        ));
    }
    if fe.frame_len == 0 || fe.hop == 0 {
        return Err(Error::config("frontend.hop", "frame length and hop must be positive"));
    }

    if cfg.peft.enc_prompt_len() >= cfg.model.max_len {
        return Err(Error::config(
            "peft.prompts_enc",
            format!(
                "{} prompts leave no encoder positions within max_len {}",
                cfg.peft.enc_prompt_len(),
                cfg.model.max_len
            ),
        ));
    }
    if cfg.model.mode == crate::model::ModelMode::EncDec && cfg.peft.dec_prompt_len() + 2 > cfg.model.max_len {
        return Err(Error::config(
            "peft.prompts_dec",
            format!(
                "{} prompts leave no decoder positions within max_len {}",
                cfg.peft.dec_prompt_len(),
                cfg.model.max_len
            ),
        ));
    }

    if cfg.pif.weight > 0.0 {
        if cfg.augment.method == AugmentMethod::None {
            return Err(Error::config(
                "pif.weight",
                "PIF needs perturbed copies; augment.method is `none`",
            ));
        }
        if cfg.augment.copies == 0 {
            return Err(Error::config("augment.copies", "PIF needs at least one copy per utterance"));
        }
    }

    let t = &cfg.train;
    if t.steps == 0 {
        return Err(Error::config("train.steps", "must be positive"));
    }
    if t.batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be positive"));
    }
    if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
        return Err(Error::config("train.learning_rate", "must be finite and positive"));
    }
    if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
        return Err(Error::config("train.weight_decay", "must be finite and ≥ 0"));
    }
    if t.max_decode_len == 0 {
        return Err(Error::config("train.max_decode_len", "must be positive"));
    }

    let d = &cfg.data;
    match (&d.manifest, &d.train) {
        (Some(_), Some(_)) => {
            return Err(Error::config("data.manifest", "give either `manifest` or `train`, not both"));
        }
        (None, None) => return Err(Error::config("data.train", "no training data configured")),
        _ => {}
    }
    if d.manifest.is_some() && (d.dev.is_some() || d.test.is_some()) {
        return Err(Error::config("data.dev", "explicit dev/test manifests need `train`, not `manifest`"));
    }
    for (field, p) in [("data.manifest", &d.manifest), ("data.train", &d.train), ("data.dev", &d.dev), ("data.test", &d.test)] {
        if let Some(p) = p {
            if !p.is_file() {
                return Err(Error::config(field, format!("{} does not exist", p.display())));
            }
        }
    }
    for s in &cfg.eval.splits {
        if !d.has_split(*s) {
            return Err(Error::config("eval.splits", format!("no data configured for the {s} split")));
        }
    }
    Ok(())
}
