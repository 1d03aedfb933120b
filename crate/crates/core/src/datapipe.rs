//! Manifests, quality filtering, speaker-disjoint splits, character
//! vocabularies, batching and a synthetic spoken-digit corpus.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::Provenance;
use crate::error::{Error, Result};
use crate::model::RESERVED_TOKENS;
use crate::signal::{save_wav, FeatureMatrix, Waveform, CANONICAL_RATE};

/// Lowercase and collapse whitespace runs to single spaces.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Where an augmented entry came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub source_id: String,
    #[serde(flatten)]
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub audio: PathBuf,
    pub text: String,
    pub speaker: String,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefilter_wer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<AugmentationRecord>,
}

impl ManifestEntry {
    /// Audio path, resolved against `base` when relative.
    pub fn audio_path(&self, base: &Path) -> PathBuf {
        if self.audio.is_absolute() {
            self.audio.clone()
        } else {
            base.join(&self.audio)
        }
    }

    pub fn word_count(&self) -> usize {
        normalize_text(&self.text).split(' ').filter(|w| !w.is_empty()).count()
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(format!("duration_s {} must be positive", self.duration_s));
        }
        if normalize_text(&self.text).is_empty() {
            return Err("text is empty after normalization".into());
        }
        if let Some(w) = self.prefilter_wer {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(format!("prefilter_wer {w} must be a non-negative fraction"));
            }
        }
        Ok(())
    }
}

/// Reads a JSON-lines manifest. Blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        entry.check().map_err(parse_err)?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Integrity(format!(
                "{}:{}: duplicate utterance id `{}`",
                path.display(),
                i + 1,
                entry.id
            )));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterPolicy {
    pub max_wer: f64,
    pub min_words: usize,
    pub max_duration_s: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            max_wer: 0.5,
            min_words: 3,
            max_duration_s: 30.0,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_wer > 0.0) {
            return Err(Error::config("data.filter.max_wer", "must be positive"));
        }
        if self.min_words == 0 {
            return Err(Error::config("data.filter.min_words", "must be positive"));
        }
        if !(self.max_duration_s > 0.0) {
            return Err(Error::config("data.filter.max_duration_s", "must be positive"));
        }
        Ok(())
    }

    /// Every rule `e` violates; empty when it is kept.
    pub fn violations(&self, e: &ManifestEntry) -> Vec<FilterReason> {
        let mut out = Vec::new();
        if e.prefilter_wer.is_some_and(|w| w > self.max_wer) {
            out.push(FilterReason::Wer);
        }
        if e.word_count() < self.min_words {
            out.push(FilterReason::MinWords);
        }
        if e.duration_s > self.max_duration_s {
            out.push(FilterReason::MaxDuration);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    Wer,
    MinWords,
    MaxDuration,
}

impl fmt::Display for FilterReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterReason::Wer => "wer",
            FilterReason::MinWords => "min_words",
            FilterReason::MaxDuration => "max_duration",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovedEntry {
    pub entry: ManifestEntry,
    pub reasons: Vec<FilterReason>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<ManifestEntry>,
    pub removed: Vec<RemovedEntry>,
}

/// Drops entries above the recognizer-WER threshold, with too few words, or
/// too long. Entries without a WER are exempt from that rule.
pub fn filter_entries(entries: &[ManifestEntry], policy: &FilterPolicy) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for e in entries {
        let reasons = policy.violations(e);
        if reasons.is_empty() {
            out.kept.push(e.clone());
        } else {
            out.removed.push(RemovedEntry {
                entry: e.clone(),
                reasons,
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Dev, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitPolicy {
    /// Target utterance fractions for train, dev and test.
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy {
            fractions: [0.70, 0.15, 0.15],
            seed: 0,
        }
    }
}

impl SplitPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::config("data.split.fractions", "fractions must be non-negative"));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("data.split.fractions", format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerAssignment {
    pub speaker: String,
    pub split: SplitName,
    pub utterances: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<ManifestEntry>,
    pub dev: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    /// In assignment order.
    pub assignment: Vec<SpeakerAssignment>,
}

impl Splits {
    pub fn get(&self, s: SplitName) -> &[ManifestEntry] {
        match s {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }

    /// Tab-separated `speaker, split, utterances`, one row per speaker.
    pub fn audit_tsv(&self) -> String {
        let mut s = String::from("speaker\tsplit\tutterances\n");
        for a in &self.assignment {
            s.push_str(&format!("{}\t{}\t{}\n", a.speaker, a.split, a.utterances));
        }
        s
    }
}

/// Speaker-disjoint split. Speakers are shuffled by seed, then each goes to
/// the split furthest below its utterance-count target. Once only as many
/// speakers remain as there are empty splits, they fill those.
pub fn split_by_speaker(entries: &[ManifestEntry], policy: &SplitPolicy) -> Result<Splits> {
    policy.validate()?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in entries {
        *counts.entry(e.speaker.as_str()).or_default() += 1;
    }
    if counts.len() < 3 {
        return Err(Error::Split(format!(
            "need at least 3 speakers for a speaker-disjoint split, found {}",
            counts.len()
        )));
    }
    let mut speakers: Vec<&str> = counts.keys().copied().collect();
    speakers.shuffle(&mut ChaCha8Rng::seed_from_u64(policy.seed));

    let total = entries.len() as f64;
    let mut filled = [0usize; 3];
    let mut n_speakers = [0usize; 3];
    let mut of_speaker: BTreeMap<&str, SplitName> = BTreeMap::new();
    let mut assignment = Vec::with_capacity(speakers.len());
    for (i, spk) in speakers.iter().enumerate() {
        let remaining = speakers.len() - i;
        let empty: Vec<usize> = (0..3).filter(|&k| n_speakers[k] == 0 && policy.fractions[k] > 0.0).collect();
        let candidates: Vec<usize> = if !empty.is_empty() && remaining <= empty.len() {
            empty
        } else {
            (0..3).collect()
        };
        let deficit = |k: usize| policy.fractions[k] * total - filled[k] as f64;
        let k = candidates
            .into_iter()
            .max_by(|&a, &b| deficit(a).total_cmp(&deficit(b)).then(b.cmp(&a)))
            .expect("three candidates");
        filled[k] += counts[spk];
        n_speakers[k] += 1;
        of_speaker.insert(spk, SplitName::ALL[k]);
        assignment.push(SpeakerAssignment {
            speaker: spk.to_string(),
            split: SplitName::ALL[k],
            utterances: counts[spk],
        });
    }
    let mut out = Splits {
        assignment,
        ..Splits::default()
    };
    for e in entries {
        match of_speaker[e.speaker.as_str()] {
            SplitName::Train => out.train.push(e.clone()),
            SplitName::Dev => out.dev.push(e.clone()),
            SplitName::Test => out.test.push(e.clone()),
        }
    }
    Ok(out)
}

/// Character inventory. Ids `0..4` are blank, bos, eos and unknown;
/// characters follow in sorted order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

impl Vocabulary {
    pub fn from_symbols(mut symbols: Vec<char>) -> Self {
        symbols.sort_unstable();
        symbols.dedup();
        Vocabulary { symbols }
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Size including the reserved ids.
    pub fn len(&self) -> usize {
        RESERVED_TOKENS + self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.symbols.binary_search(&c).ok().map(|i| i + RESERVED_TOKENS)
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        id.checked_sub(RESERVED_TOKENS).and_then(|i| self.symbols.get(i).copied())
    }

    /// Ids of the normalized text.
    pub fn encode(&self, text: &str, utterance: &str) -> Result<Vec<usize>> {
        normalize_text(text)
            .chars()
            .map(|ch| {
                self.id(ch).ok_or_else(|| Error::Vocabulary {
                    ch,
                    utterance: utterance.to_string(),
                })
            })
            .collect()
    }

    /// Characters for `ids`; reserved ids are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.symbol(i)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Vocabulary = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok(Vocabulary::from_symbols(v.symbols))
    }
}

/// Every character of the normalized transcripts.
pub fn build_char_vocab<'a>(transcripts: impl IntoIterator<Item = &'a str>) -> Vocabulary {
    let set: BTreeSet<char> = transcripts.into_iter().flat_map(|t| normalize_text(t).chars().collect::<Vec<_>>()).collect();
    Vocabulary::from_symbols(set.into_iter().collect())
}

/// Utterances padded to a common length with validity masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub features: Vec<FeatureMatrix>,
    pub masks: Vec<Vec<bool>>,
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Groups `entries` into batches. Features are computed in parallel but
/// assembled in manifest order; `seed` shuffles the order before chunking.
pub fn make_batches<F>(
    entries: &[ManifestEntry],
    batch_size: usize,
    vocab: &Vocabulary,
    seed: Option<u64>,
    features: F,
) -> Result<Vec<Batch>>
where
    F: Fn(&ManifestEntry) -> Result<FeatureMatrix> + Sync,
{
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    let targets: Vec<Vec<usize>> = entries
        .iter()
        .map(|e| vocab.encode(&e.text, &e.id))
        .collect::<Result<_>>()?;
    let feats: Vec<FeatureMatrix> = entries
        .par_iter()
        .map(|e| features(e).map_err(|err| err.in_utterance(&e.id)))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..entries.len()).collect();
    if let Some(s) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            let max = idx.iter().map(|&i| feats[i].n_frames()).max().unwrap_or(0);
            Batch {
                ids: idx.iter().map(|&i| entries[i].id.clone()).collect(),
                features: idx.iter().map(|&i| feats[i].padded(max, 0.0)).collect(),
                masks: idx
                    .iter()
                    .map(|&i| (0..max).map(|t| t < feats[i].n_frames()).collect())
                    .collect(),
                targets: idx.iter().map(|&i| targets[i].clone()).collect(),
            }
        })
        .collect())
}

pub const DIGIT_WORDS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];
const F1: [f64; 4] = [300.0, 500.0, 800.0, 1200.0];
const F2: [f64; 3] = [1800.0, 2600.0, 3600.0];
pub const SYNTH_WORD_S: f64 = 0.4;
pub const SYNTH_GAP_S: f64 = 0.1;
pub const SYNTH_EDGE_S: f64 = 0.15;

/// The tone pair that stands for digit `d` at a neutral speaker.
pub fn digit_signature(d: usize) -> (f64, f64) {
    (F1[d % 4], F2[d / 4])
}

/// Renders a digit string: each word is its tone pair scaled by
/// `speaker_factor`, separated by short gaps and padded by silence, over a
/// faint noise floor.
pub fn synth_waveform<R: Rng + ?Sized>(digits: &[usize], speaker_factor: f64, rng: &mut R) -> Waveform {
    let rate = f64::from(CANONICAL_RATE);
    let n = |s: f64| (s * rate).round() as usize;
    let total = 2 * n(SYNTH_EDGE_S) + digits.len() * n(SYNTH_WORD_S) + digits.len().saturating_sub(1) * n(SYNTH_GAP_S);
    let noise = Normal::new(0.0, 0.003).expect("valid normal");
    let mut s: Vec<f64> = (0..total).map(|_| noise.sample(rng)).collect();
    let ramp = n(0.01);
    let mut start = n(SYNTH_EDGE_S);
    for &d in digits {
        let (f1, f2) = digit_signature(d);
        let (f1, f2) = (f1 * speaker_factor, f2 * speaker_factor);
        let len = n(SYNTH_WORD_S);
        for i in 0..len {
            let t = i as f64 / rate;
            let env = (i.min(len - 1 - i) as f64 / ramp as f64).min(1.0);
            let v = 0.3 * (2.0 * std::f64::consts::PI * f1 * t).sin() + 0.2 * (2.0 * std::f64::consts::PI * f2 * t).sin();
            s[start + i] += env * v;
        }
        start += len + n(SYNTH_GAP_S);
    }
    Waveform::new(s, CANONICAL_RATE).expect("finite samples")
}

/// Per-speaker frequency factors in `[0.94, 1.06]`.
pub fn speaker_factors(seed: u64, n_speakers: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bea_4e55);
    (0..n_speakers).map(|_| rng.random_range(0.94..=1.06)).collect()
}

/// Writes `n_utts` digit-string utterances (3 to 5 digits) as WAV files
/// under `out_dir/wav` plus `out_dir/manifest.jsonl`. Speakers take turns.
pub fn synth_corpus(out_dir: &Path, seed: u64, n_utts: usize, n_speakers: usize) -> Result<Vec<ManifestEntry>> {
    if n_speakers == 0 || n_utts < n_speakers {
        return Err(Error::Argument(format!(
            "need n_utts ≥ n_speakers ≥ 1, got {n_utts} utterances and {n_speakers} speakers"
        )));
    }
    fs::create_dir_all(out_dir.join("wav"))?;
    let factors = speaker_factors(seed, n_speakers);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n_utts);
    for u in 0..n_utts {
        let spk = u % n_speakers;
        let n_digits = rng.random_range(3..=5);
        let digits: Vec<usize> = (0..n_digits).map(|_| rng.random_range(0..10)).collect();
        let wave = synth_waveform(&digits, factors[spk], &mut rng);
        let id = format!("utt{u:04}");
        let rel = PathBuf::from("wav").join(format!("{id}.wav"));
        save_wav(&wave, &out_dir.join(&rel))?;
        entries.push(ManifestEntry {
            id,
            audio: rel,
            text: digits.iter().map(|&d| DIGIT_WORDS[d]).collect::<Vec<_>>().join(" "),
            speaker: format!("spk{spk:02}"),
            duration_s: wave.duration_s(),
            prefilter_wer: None,
            augmentation: None,
        });
    }
    save_manifest(&out_dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}
