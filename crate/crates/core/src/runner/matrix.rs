use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{fnv1a, AugmentMethod};
use crate::datapipe::SplitName;
use crate::error::{Error, Result};
use crate::evalkit::{ResultRow, ResultsTable};
use crate::model::{ModelMode, PeftMethod};
use crate::runner::train::{load_dataset, prepare_examples, train_prepared, PreparedExample, RunRecord};
use crate::runner::{validate_config, ExperimentConfig};

/// Model sizes for matrix sweeps: width and layers per stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizePreset {
    Tiny,
    Small,
    Base,
}

impl SizePreset {
    pub const ALL: [SizePreset; 3] = [SizePreset::Tiny, SizePreset::Small, SizePreset::Base];

    pub fn dims(self) -> (usize, usize) {
        match self {
            SizePreset::Tiny => (32, 1),
            SizePreset::Small => (64, 2),
            SizePreset::Base => (96, 3),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SizePreset::Tiny => "tiny",
            SizePreset::Small => "small",
            SizePreset::Base => "base",
        }
    }

    /// Applies the width and depth to `cfg`, keeping its mode and 4 heads.
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        let (d, layers) = self.dims();
        let m = &mut cfg.model;
        m.d_model = d;
        m.n_heads = 4;
        m.ffn_dim = 2 * d;
        m.enc_layers = layers;
        m.dec_layers = if m.mode == ModelMode::EncDec { layers } else { 0 };
    }
}

impl fmt::Display for SizePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SizePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SizePreset::ALL
            .into_iter()
            .find(|p| p.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::config("matrix.sizes", format!("unknown size `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixSpec {
    pub sizes: Vec<SizePreset>,
    pub peft: Vec<PeftMethod>,
    pub augment: Vec<AugmentMethod>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixCell {
    pub label: String,
    pub size: SizePreset,
    pub peft: PeftMethod,
    pub augment: AugmentMethod,
}

impl MatrixSpec {
    pub fn cells(&self) -> Vec<MatrixCell> {
        let mut out = Vec::new();
        for &size in &self.sizes {
            for &peft in &self.peft {
                for &augment in &self.augment {
                    out.push(MatrixCell {
                        label: format!("{size}/{peft}/{augment}"),
                        size,
                        peft,
                        augment,
                    });
                }
            }
        }
        out
    }
}

pub struct MatrixOutcome {
    pub table: ResultsTable,
    /// Per cell label: the run record, or the error that stopped it.
    pub records: BTreeMap<String, std::result::Result<RunRecord, String>>,
}

/// Trains every cell of `spec` on top of `base`. Cells run in parallel,
/// each seeded with `base.train.seed ⊕ hash(label)`; a failing cell is
/// reported in the table and does not stop the others.
pub fn run_matrix(base: &ExperimentConfig, spec: &MatrixSpec, out_dir: Option<&Path>) -> Result<MatrixOutcome> {
    let cells = spec.cells();
    if cells.is_empty() {
        return Err(Error::config("matrix", "the matrix has no cells"));
    }
    validate_config(base)?;
    let data = load_dataset(base)?;

    // Waveform augmentation does not depend on the model, so copies are
    // shared between cells with the same method.
    let mut methods: Vec<AugmentMethod> = spec.augment.clone();
    methods.dedup();
    let prepared: BTreeMap<&'static str, Vec<PreparedExample>> = methods
        .iter()
        .map(|&m| {
            let mut cfg = base.clone();
            cfg.augment.method = m;
            prepare_examples(data.split(SplitName::Train), &cfg, &data.vocab).map(|p| (m.as_str(), p))
        })
        .collect::<Result<_>>()?;

    let runs: Vec<(MatrixCell, ExperimentConfig, Result<RunRecord>)> = cells
        .into_par_iter()
        .map(|cell| {
            let mut cfg = base.clone();
            cell.size.apply(&mut cfg);
            cfg.peft.method = cell.peft;
            cfg.augment.method = cell.augment;
            cfg.name = cell.label.clone();
            cfg.train.seed = base.train.seed ^ fnv1a(&cell.label);
            let dir = out_dir.map(|d| d.join(cell.label.replace('/', "_")));
            let res = validate_config(&cfg).and_then(|()| {
                train_prepared(&cfg, &data, &prepared[cell.augment.as_str()], dir.as_deref()).map(|o| o.record)
            });
            (cell, cfg, res)
        })
        .collect();

    let mut table = ResultsTable::default();
    let mut records = BTreeMap::new();
    for (cell, cfg, res) in runs {
        match res {
            Ok(rec) => {
                table.merge(rec.results.clone());
                records.insert(cell.label, Ok(rec));
            }
            Err(e) => {
                for s in &cfg.eval.splits {
                    table.insert(ResultRow {
                        system: cell.label.clone(),
                        split: s.to_string(),
                        wer: 0.0,
                        errors: 0,
                        ref_words: 0,
                        utterances: 0,
                        trainable_params: 0,
                        wall_time_s: 0.0,
                        final_loss: None,
                        failure: Some(e.to_string()),
                    });
                }
                records.insert(cell.label, Err(e.to_string()));
            }
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.tsv"), table.to_tsv())?;
    }
    Ok(MatrixOutcome { table, records })
}
