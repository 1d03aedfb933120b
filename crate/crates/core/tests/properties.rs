use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use peftlab::augment::{spec_augment, speed_perturb, SpecAugmentConfig, SpeedPerturbConfig};
use peftlab::autodiff::{Graph, Tensor};
use peftlab::datapipe::{
    build_char_vocab, filter_entries, normalize_text, split_by_speaker, FilterPolicy, ManifestEntry, SplitPolicy,
};
use peftlab::evalkit::{replay_alignment, wer};
use peftlab::losses::{ctc_min_frames, ctc_nll_and_grad, pif_loss};
use peftlab::model::EncoderStates;
use peftlab::signal::{FeatureMatrix, Waveform};

fn words() -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "dog", "cat"]), 0..8)
}

fn entry(i: usize, speaker: usize, words: usize, dur: f64, wer: Option<f64>) -> ManifestEntry {
    ManifestEntry {
        id: format!("u{i}"),
        audio: format!("{i}.wav").into(),
        text: vec!["w"; words].join(" "),
        speaker: format!("s{speaker}"),
        duration_s: dur,
        prefilter_wer: wer,
        augmentation: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spec_augment_changes_at_most_the_mask_budget(
        t in 1usize..120, m in 1usize..24, seed: u64,
        nf in 0usize..3, fw in 0usize..6, nt in 0usize..3, frac in 0.01f64..0.5,
    ) {
        let feat = FeatureMatrix::new((0..t * m).map(|i| 1.0 + i as f64).collect(), t, m, 0.01).unwrap();
        let cfg = SpecAugmentConfig {
            n_freq_masks: nf,
            max_freq_width: fw,
            n_time_masks: nt,
            max_time_fraction: frac,
            mask_value: Some(0.0),
        };
        let out = spec_augment(&feat, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let changed = out.values().iter().zip(feat.values()).filter(|(a, b)| a != b).count();
        let max_t = (frac * t as f64).floor() as usize;
        prop_assert!(changed <= nf * fw.min(m) * t + nt * max_t * m);
        prop_assert_eq!(out.n_frames(), t);
    }

    #[test]
    fn speed_round_trip_keeps_length(len in 400usize..6000, rate in 0.6f64..1.6) {
        let w = Waveform::new((0..len).map(|i| (i as f64 * 0.05).sin()).collect(), 16000).unwrap();
        let there = speed_perturb(&w, SpeedPerturbConfig::new(rate).unwrap()).unwrap();
        prop_assert!(there.len().abs_diff((len as f64 / rate).round() as usize) <= 1);
        let back = speed_perturb(&there, SpeedPerturbConfig::new(1.0 / rate).unwrap()).unwrap();
        prop_assert!(back.len().abs_diff(len) <= 2);
    }

    #[test]
    fn wer_alignment_replays_to_the_hypothesis(r in words(), h in words()) {
        prop_assume!(!r.is_empty());
        let rep = wer(&r.join(" "), &h.join(" ")).unwrap();
        let replay = replay_alignment(&r, &h, &rep.alignment).unwrap();
        prop_assert_eq!(replay, h.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        prop_assert!(rep.errors() <= r.len().max(h.len()));
        prop_assert!(rep.errors() >= r.len().abs_diff(h.len()));
        prop_assert_eq!(rep.substitutions + rep.deletions, r.len() - count_matches(&rep.alignment));
    }

    #[test]
    fn filter_partitions_its_input(
        specs in prop::collection::vec((1usize..6, 0.5f64..40.0, prop::option::of(0.0f64..1.0)), 0..60)
    ) {
        let entries: Vec<ManifestEntry> =
            specs.iter().enumerate().map(|(i, &(w, d, e))| entry(i, i % 4, w, d, e)).collect();
        let policy = FilterPolicy::default();
        let out = filter_entries(&entries, &policy);
        prop_assert_eq!(out.kept.len() + out.removed.len(), entries.len());
        for e in &out.kept {
            prop_assert!(policy.violations(e).is_empty());
        }
        for r in &out.removed {
            prop_assert!(!r.reasons.is_empty());
            prop_assert_eq!(&r.reasons, &policy.violations(&r.entry));
        }
        let ids: HashSet<_> = out.kept.iter().chain(out.removed.iter().map(|r| &r.entry)).map(|e| &e.id).collect();
        prop_assert_eq!(ids.len(), entries.len());
    }

    #[test]
    fn split_is_a_speaker_disjoint_partition(
        counts in prop::collection::vec(1usize..12, 3..30), seed: u64,
    ) {
        let mut entries = Vec::new();
        for (s, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                entries.push(entry(entries.len(), s, 4, 1.0, None));
            }
        }
        let splits = split_by_speaker(&entries, &SplitPolicy { seed, ..SplitPolicy::default() }).unwrap();
        prop_assert_eq!(splits.train.len() + splits.dev.len() + splits.test.len(), entries.len());
        prop_assert!(!splits.train.is_empty() && !splits.dev.is_empty() && !splits.test.is_empty());
        let spk = |v: &[ManifestEntry]| v.iter().map(|e| e.speaker.clone()).collect::<HashSet<_>>();
        let (a, b, c) = (spk(&splits.train), spk(&splits.dev), spk(&splits.test));
        prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
    }

    #[test]
    fn vocabulary_round_trips(texts in prop::collection::vec("[a-z' ]{1,20}", 1..6)) {
        let vocab = build_char_vocab(texts.iter().map(String::as_str));
        for t in &texts {
            let ids = vocab.encode(t, "x").unwrap();
            prop_assert_eq!(vocab.decode(&ids), normalize_text(t));
        }
    }

    #[test]
    fn pif_is_non_negative_and_symmetric(
        ta in 1usize..8, tb in 1usize..8, seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn([ta, 6], 1.0, &mut rng);
        let b = Tensor::randn([tb, 6], 1.0, &mut rng);
        let mut g = Graph::new();
        let ea = EncoderStates { states: g.input(a.clone(), false), valid: vec![true; ta] };
        let eb = EncoderStates { states: g.input(b, false), valid: vec![true; tb] };
        let ab = pif_loss(&mut g, &ea, &eb).unwrap();
        let ba = pif_loss(&mut g, &eb, &ea).unwrap();
        let aa = pif_loss(&mut g, &ea, &ea).unwrap();
        prop_assert!(g.value(ab).item() >= 0.0);
        prop_assert_eq!(g.value(ab).item(), g.value(ba).item());
        prop_assert_eq!(g.value(aa).item(), 0.0);
    }

    #[test]
    fn ctc_gradient_rows_sum_to_minus_one(
        t in 1usize..12, target in prop::collection::vec(1usize..4, 0..5), seed: u64,
    ) {
        prop_assume!(t >= ctc_min_frames(&target));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::randn([t, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.input(raw, false);
        let lp = g.log_softmax(x, 1).unwrap();
        let (nll, grad) = ctc_nll_and_grad(g.value(lp), &target, 0).unwrap();
        prop_assert!(nll >= -1e-12);
        for row in 0..t {
            let s: f64 = grad.row(row).iter().sum();
            prop_assert!((s + 1.0).abs() < 1e-9, "row {} sums to {}", row, s);
        }
    }
}

fn count_matches(ops: &[peftlab::evalkit::EditOp]) -> usize {
    ops.iter().filter(|o| **o == peftlab::evalkit::EditOp::Match).count()
}
