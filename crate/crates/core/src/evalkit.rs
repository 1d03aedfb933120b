//! Greedy decoding, word error rate and result tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::datapipe::{normalize_text, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, ModelMode, BLANK, BOS, EOS};
use crate::signal::FeatureMatrix;

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-frame argmax ids with repeats merged and blanks removed.
pub fn ctc_collapse(frame_ids: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in frame_ids {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

pub fn greedy_ctc_decode(log_probs: &Tensor, vocab: &Vocabulary) -> String {
    let ids: Vec<usize> = (0..log_probs.rows()).map(|t| argmax(log_probs.row(t))).collect();
    vocab.decode(&ctc_collapse(&ids))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArDecode {
    pub text: String,
    pub tokens: Vec<usize>,
    /// Stopped at `max_len` before emitting EOS.
    pub truncated: bool,
}

/// Argmax decoding from BOS until EOS or `max_len` tokens.
pub fn greedy_ar_decode(model: &Model, feat: &FeatureMatrix, vocab: &Vocabulary, max_len: usize) -> Result<ArDecode> {
    if model.config().mode != ModelMode::EncDec {
        return Err(Error::Mode("autoregressive decoding needs enc_dec mode".into()));
    }
    let mut g = Graph::new();
    let b = model.store().bind(&mut g);
    let valid = vec![true; feat.n_frames()];
    let enc = model.encode(&mut g, &b, feat, &valid)?;
    let budget = model.config().max_len.saturating_sub(1 + model.dec_prompts());
    let max_len = max_len.min(budget);
    let mut tokens = vec![BOS];
    let truncated = loop {
        if tokens.len() - 1 == max_len {
            break true;
        }
        let logits = model.decode_teacher_forced(&mut g, &b, &enc, &tokens)?;
        let next = argmax(g.value(logits).row(tokens.len() - 1));
        if next == EOS {
            break false;
        }
        tokens.push(next);
    };
    let out: Vec<usize> = tokens[1..].to_vec();
    Ok(ArDecode {
        text: vocab.decode(&out),
        tokens: out,
        truncated,
    })
}

/// Mode-appropriate greedy transcript of one utterance.
pub fn transcribe(model: &Model, feat: &FeatureMatrix, vocab: &Vocabulary, max_len: usize) -> Result<String> {
    match model.config().mode {
        ModelMode::Ctc => {
            let lp = model.forward_tensor(feat, &[])?;
            Ok(greedy_ctc_decode(&lp, vocab))
        }
        ModelMode::EncDec => Ok(greedy_ar_decode(model, feat, vocab, max_len)?.text),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Match,
    Sub,
    Del,
    Ins,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    pub wer: f64,
    /// Edit script turning the reference into the hypothesis.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alignment: Vec<EditOp>,
}

impl WerReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Word-level Levenshtein alignment with unit costs. On ties the backtrace
/// prefers a substitution (or match) over a deletion/insertion pair.
pub fn wer(reference: &str, hypothesis: &str) -> Result<WerReport> {
    let r_norm = normalize_text(reference);
    let h_norm = normalize_text(hypothesis);
    let r: Vec<&str> = r_norm.split(' ').filter(|w| !w.is_empty()).collect();
    let h: Vec<&str> = h_norm.split(' ').filter(|w| !w.is_empty()).collect();
    if r.is_empty() {
        return Err(Error::Argument("reference is empty after normalization".into()));
    }
    let (n, m) = (r.len(), h.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = diag.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut ops = Vec::with_capacity(n.max(m));
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            ops.push(if r[i - 1] == h[j - 1] { EditOp::Match } else { EditOp::Sub });
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push(EditOp::Del);
            i -= 1;
        } else {
            ops.push(EditOp::Ins);
            j -= 1;
        }
    }
    ops.reverse();
    let count = |op| ops.iter().filter(|&&o| o == op).count();
    let (s, del, ins) = (count(EditOp::Sub), count(EditOp::Del), count(EditOp::Ins));
    Ok(WerReport {
        substitutions: s,
        deletions: del,
        insertions: ins,
        ref_words: n,
        wer: (s + del + ins) as f64 / n as f64,
        alignment: ops,
    })
}

/// Applies an edit script to `reference`, taking inserted and substituted
/// words from `hypothesis` in order.
pub fn replay_alignment(reference: &[&str], hypothesis: &[&str], ops: &[EditOp]) -> Option<Vec<String>> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    for op in ops {
        match op {
            EditOp::Match => {
                if reference.get(i)? != hypothesis.get(j)? {
                    return None;
                }
                out.push(reference[i].to_string());
                i += 1;
                j += 1;
            }
            EditOp::Sub => {
                reference.get(i)?;
                out.push(hypothesis.get(j)?.to_string());
                i += 1;
                j += 1;
            }
            EditOp::Del => {
                reference.get(i)?;
                i += 1;
            }
            EditOp::Ins => {
                out.push(hypothesis.get(j)?.to_string());
                j += 1;
            }
        }
    }
    (i == reference.len() && j == hypothesis.len()).then_some(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub system: String,
    pub split: String,
    pub wer: f64,
    pub errors: usize,
    pub ref_words: usize,
    pub utterances: usize,
    pub trainable_params: usize,
    pub wall_time_s: f64,
    pub final_loss: Option<f64>,
    /// Set when the run behind this row failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Labels and run metadata for one aggregated row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowLabels {
    pub system: String,
    pub split: String,
    pub trainable_params: usize,
    pub wall_time_s: f64,
    pub final_loss: Option<f64>,
}

/// One row per (system, split), kept sorted by those labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    /// Adds or replaces the row for `(row.system, row.split)`.
    pub fn insert(&mut self, row: ResultRow) {
        let key = (row.system.clone(), row.split.clone());
        match self.rows.binary_search_by(|r| (r.system.clone(), r.split.clone()).cmp(&key)) {
            Ok(i) => self.rows[i] = row,
            Err(i) => self.rows.insert(i, row),
        }
    }

    pub fn merge(&mut self, other: ResultsTable) {
        for r in other.rows {
            self.insert(r);
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    const HEADER: [&'static str; 8] = ["system", "split", "wer", "errors", "ref_words", "params", "final_loss", "wall_s"];

    fn cells(r: &ResultRow) -> [String; 8] {
        let (wer, loss) = match &r.failure {
            Some(_) => ("failed".to_string(), "-".to_string()),
            None => (
                format!("{:.4}", r.wer),
                r.final_loss.map_or("-".to_string(), |l| format!("{l:.4}")),
            ),
        };
        [
            r.system.clone(),
            r.split.clone(),
            wer,
            r.errors.to_string(),
            r.ref_words.to_string(),
            r.trainable_params.to_string(),
            loss,
            format!("{:.1}", r.wall_time_s),
        ]
    }

    pub fn to_tsv(&self) -> String {
        let mut s = Self::HEADER.join("\t");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&Self::cells(r).join("\t"));
            s.push('\n');
        }
        s
    }

    /// Column-aligned plain text.
    pub fn to_text(&self) -> String {
        let body: Vec<[String; 8]> = self.rows.iter().map(Self::cells).collect();
        let mut widths = Self::HEADER.map(str::len);
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut s = String::new();
        let line = |s: &mut String, cells: Vec<&str>| {
            let parts: Vec<String> = cells
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(s, "{}", parts.join("  ").trim_end());
        };
        line(&mut s, Self::HEADER.to_vec());
        let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
        let _ = writeln!(s, "{}", "-".repeat(total));
        for row in &body {
            line(&mut s, row.iter().map(String::as_str).collect());
        }
        s
    }
}

/// Pools per-utterance counts into a corpus-level row:
/// WER = total errors / total reference words.
pub fn aggregate_report(reports: &[WerReport], labels: &RowLabels) -> Result<ResultsTable> {
    if reports.is_empty() {
        return Err(Error::Argument("no utterance reports to aggregate".into()));
    }
    let errors: usize = reports.iter().map(WerReport::errors).sum();
    let ref_words: usize = reports.iter().map(|r| r.ref_words).sum();
    let mut table = ResultsTable::default();
    table.insert(ResultRow {
        system: labels.system.clone(),
        split: labels.split.clone(),
        wer: errors as f64 / ref_words as f64,
        errors,
        ref_words,
        utterances: reports.len(),
        trainable_params: labels.trainable_params,
        wall_time_s: labels.wall_time_s,
        final_loss: labels.final_loss,
        failure: None,
    });
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::build_char_vocab;
    use crate::model::{build_model, random_features, ModelConfig, RESERVED_TOKENS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot(ids: &[usize], v: usize) -> Tensor {
        let mut data = vec![-30.0; ids.len() * v];
        for (t, &k) in ids.iter().enumerate() {
            data[t * v + k] = 0.0;
        }
        Tensor::new([ids.len(), v], data).unwrap()
    }

    #[test]
    fn collapse_rule() {
        let vocab = build_char_vocab(["a"]);
        let a = RESERVED_TOKENS;
        assert_eq!(greedy_ctc_decode(&one_hot(&[a, a, BLANK, a], vocab.len()), &vocab), "aa");
        assert_eq!(greedy_ctc_decode(&one_hot(&[BLANK; 4], vocab.len()), &vocab), "");
    }

    #[test]
    fn collapse_agrees_with_reference_implementation() {
        let vocab = build_char_vocab(["abc"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let t = rng.random_range(1..12);
            let lp = Tensor::new([t, vocab.len()], (0..t * vocab.len()).map(|_| rng.random::<f64>()).collect()).unwrap();
            let mut text = String::new();
            let mut last = usize::MAX;
            for r in 0..t {
                let row = lp.row(r);
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                if best != last && best >= RESERVED_TOKENS {
                    text.push(vocab.symbol(best).unwrap());
                }
                last = best;
            }
            assert_eq!(greedy_ctc_decode(&lp, &vocab), text);
        }
    }

    #[test]
    fn expanded_targets_round_trip() {
        let vocab = build_char_vocab(["the cat sat"]);
        let ids = vocab.encode("the cat sat", "u").unwrap();
        let mut frames = vec![BLANK];
        for &k in &ids {
            frames.extend([k, k, BLANK]);
        }
        assert_eq!(greedy_ctc_decode(&one_hot(&frames, vocab.len()), &vocab), "the cat sat");
    }

    #[test]
    fn wer_examples() {
        let r = wer("the cat sat down", "the cat sat down").unwrap();
        assert_eq!(r.wer, 0.0);
        let r = wer("the cat sat down", "the cat sat up").unwrap();
        assert_eq!((r.substitutions, r.deletions, r.insertions), (1, 0, 0));
        assert_eq!(r.wer, 0.25);
        let r = wer("a b c d e", "").unwrap();
        assert_eq!((r.deletions, r.wer), (5, 1.0));
        let r = wer("a", "b c d").unwrap();
        assert_eq!(r.errors(), 3);
        assert_eq!(r.wer, 3.0);
        assert!(matches!(wer("   ", "a"), Err(Error::Argument(_))));
        assert_eq!(wer("The  Cat", "the cat").unwrap().wer, 0.0);
    }

    #[test]
    fn tie_break_prefers_substitution() {
        let r = wer("a b", "a c").unwrap();
        assert_eq!(r.alignment, vec![EditOp::Match, EditOp::Sub]);
    }

    #[test]
    fn aggregate_pools_counts() {
        let a = WerReport {
            substitutions: 1,
            deletions: 0,
            insertions: 0,
            ref_words: 4,
            wer: 0.25,
            alignment: vec![],
        };
        let b = WerReport {
            substitutions: 0,
            deletions: 0,
            insertions: 0,
            ref_words: 6,
            wer: 0.0,
            alignment: vec![],
        };
        let labels = RowLabels {
            system: "s".into(),
            split: "dev".into(),
            ..RowLabels::default()
        };
        let t = aggregate_report(&[a.clone(), b.clone()], &labels).unwrap();
        assert!((t.rows[0].wer - 0.1).abs() < 1e-15);
        assert_eq!(t, aggregate_report(&[b, a.clone()], &labels).unwrap());
        assert_eq!(aggregate_report(&[a], &labels).unwrap().rows[0].wer, 0.25);
        assert!(aggregate_report(&[], &labels).is_err());
    }

    #[test]
    fn table_rendering() {
        let mut t = ResultsTable::default();
        for (sys, split) in [("lora", "test"), ("full", "dev"), ("lora", "dev")] {
            t.insert(ResultRow {
                system: sys.into(),
                split: split.into(),
                wer: 0.125,
                errors: 1,
                ref_words: 8,
                utterances: 2,
                trainable_params: 12288,
                wall_time_s: 1.5,
                final_loss: Some(0.5),
                failure: None,
            });
        }
        let labels: Vec<(&str, &str)> = t.rows.iter().map(|r| (r.system.as_str(), r.split.as_str())).collect();
        assert_eq!(labels, vec![("full", "dev"), ("lora", "dev"), ("lora", "test")]);
        let tsv = t.to_tsv();
        assert_eq!(tsv.lines().count(), 4);
        assert!(tsv.lines().nth(1).unwrap().starts_with("full\tdev\t0.1250\t1\t8\t12288\t0.5000"));
        let text = t.to_text();
        let widths: Vec<usize> = text.lines().skip(2).map(str::len).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn ar_decode_stops_at_eos_and_is_deterministic() {
        let vocab = build_char_vocab(["ab"]);
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 16,
            n_mels: 4,
            vocab_size: vocab.len(),
            enc_layers: 1,
            dec_layers: 1,
            ..ModelConfig::toy(ModelMode::EncDec)
        };
        let mut m = build_model(&cfg, 4).unwrap();
        let feat = random_features(8, 4, 2);
        let a = greedy_ar_decode(&m, &feat, &vocab, 5).unwrap();
        assert_eq!(a, greedy_ar_decode(&m, &feat, &vocab, 5).unwrap());
        assert!(a.tokens.len() <= 5);

        // rig the output bias so EOS always wins
        let id = m.store().id("dec.out.b").unwrap();
        m.store_mut().get_mut(id).value.data_mut()[EOS] = 1e6;
        let rigged = greedy_ar_decode(&m, &feat, &vocab, 5).unwrap();
        assert_eq!(rigged.text, "");
        assert!(!rigged.truncated);

        m.store_mut().get_mut(id).value.data_mut()[EOS] = -1e6;
        m.store_mut().get_mut(id).value.data_mut()[RESERVED_TOKENS] = 1e6;
        let long = greedy_ar_decode(&m, &feat, &vocab, 3).unwrap();
        assert_eq!(long.text, "aaa");
        assert!(long.truncated);
    }
}
