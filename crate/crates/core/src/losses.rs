//! CTC, sequence cross-entropy, the perturbation-invariance (PIF) penalty
//! and the batch training objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{grad_check_params, ParamCheckReport};
use crate::autodiff::{Bound, GradMap, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{EncoderStates, Model, ModelMode, BLANK, BOS, EOS};
use crate::signal::FeatureMatrix;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Shortest input that can emit `target`: one frame per label plus a blank
/// between each pair of repeats.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// `log_probs` (`[T, V]`), and its gradient with respect to `log_probs`.
pub fn ctc_nll_and_grad(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<(f64, Tensor)> {
    let (t_len, v) = log_probs.dims2()?;
    if let Some(&bad) = target.iter().find(|&&k| k == blank || k >= v) {
        return Err(Error::Argument(format!(
            "target label {bad} is the blank or outside the {v}-symbol vocabulary"
        )));
    }
    if blank >= v {
        return Err(Error::Argument(format!("blank {blank} outside the {v}-symbol vocabulary")));
    }
    if log_probs.data().iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::Diverged("non-finite log-probabilities".into()));
    }
    let min_frames = ctc_min_frames(target);
    if t_len < min_frames || t_len == 0 {
        return Err(Error::InfeasibleAlignment {
            target_len: target.len(),
            min_frames: min_frames.max(1),
            frames: t_len,
        });
    }
    let lp = |t: usize, k: usize| log_probs.data()[t * v + k];
    // extended labels: blanks interleaved
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&k| [k, blank]))
        .collect();
    let s_len = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, blank);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + lp(t, ext[s]);
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::InfeasibleAlignment {
            target_len: target.len(),
            min_frames,
            frames: t_len,
        });
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = lp(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = b + lp(t, ext[s]);
        }
    }

    let mut grad = vec![0.0; t_len * v];
    let mut occ = vec![ninf; v];
    for t in 0..t_len {
        occ.iter_mut().for_each(|o| *o = ninf);
        for s in 0..s_len {
            let k = ext[s];
            occ[k] = log_add(occ[k], alpha[t * s_len + s] + beta[t * s_len + s] - lp(t, k));
        }
        for k in 0..v {
            if occ[k] > ninf {
                grad[t * v + k] = -(occ[k] - log_p).exp();
            }
        }
    }
    Ok((-log_p, Tensor::new([t_len, v], grad)?))
}

/// CTC negative log-likelihood recorded on the graph.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, target: &[usize], blank: usize) -> Result<Var> {
    let (nll, grad) = ctc_nll_and_grad(g.value(log_probs), target, blank)?;
    Ok(g.scalar_with_grad(log_probs, nll, grad))
}

/// Mean negative log-probability of `target[i]` under row `i` of `logits`.
pub fn seq_ce_loss(g: &mut Graph, logits: Var, target: &[usize]) -> Result<Var> {
    let rows = g.value(logits).rows();
    if rows != target.len() {
        return Err(Error::Shape(format!(
            "{rows} logit rows for a target of {} tokens",
            target.len()
        )));
    }
    let lp = g.log_softmax(logits, 1)?;
    let picked = g.select(lp, target)?;
    let m = g.mean_all(picked);
    Ok(g.scale(m, -1.0))
}

/// Time-mean over valid positions, as a `[1, d]` row.
fn pooled(g: &mut Graph, enc: &EncoderStates) -> Result<Var> {
    let n = enc.valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::Argument("no valid positions to pool".into()));
    }
    let w = enc.valid.iter().map(|&v| if v { 1.0 / n as f64 } else { 0.0 }).collect();
    let w = g.constant(Tensor::new([1, enc.len()], w)?);
    g.matmul(w, enc.states)
}

/// Mean-squared difference between the time-pooled encoder outputs of two
/// utterances. Sequence lengths may differ.
pub fn pif_loss(g: &mut Graph, a: &EncoderStates, b: &EncoderStates) -> Result<Var> {
    let (da, db) = (g.value(a.states).cols(), g.value(b.states).cols());
    if da != db {
        return Err(Error::Shape(format!("encoder widths {da} and {db} differ")));
    }
    let pa = pooled(g, a)?;
    let pb = pooled(g, b)?;
    let d = g.sub(pa, pb)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PifDistance {
    MsePooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PifConfig {
    /// λ; 0 disables the term.
    pub weight: f64,
    pub distance: PifDistance,
}

impl Default for PifConfig {
    fn default() -> Self {
        PifConfig {
            weight: 0.0,
            distance: PifDistance::MsePooled,
        }
    }
}

impl PifConfig {
    /// The usual regularization strength, λ = 0.1.
    pub fn enabled() -> Self {
        PifConfig {
            weight: 0.1,
            ..PifConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.weight.is_finite() || self.weight < 0.0 {
            return Err(Error::config("pif.weight", format!("{} must be finite and ≥ 0", self.weight)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub pif_loss: f64,
    pub total: f64,
}

/// Features of one view of an utterance with its frame-validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub features: FeatureMatrix,
    pub valid: Vec<bool>,
}

impl View {
    pub fn new(features: FeatureMatrix) -> Self {
        let valid = vec![true; features.n_frames()];
        View { features, valid }
    }
}

/// One utterance in a training batch: the original view, its perturbed
/// copies and the encoded target (no reserved symbols).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub id: String,
    pub original: View,
    pub copies: Vec<View>,
    pub target: Vec<usize>,
}

/// Task loss of one view. CTC is divided by the target length so long and
/// short utterances weigh alike; cross-entropy is already a mean.
pub fn task_loss(g: &mut Graph, b: &Bound, model: &Model, enc: &EncoderStates, target: &[usize]) -> Result<Var> {
    match model.config().mode {
        ModelMode::Ctc => {
            let lp = model.ctc_log_probs(g, b, enc)?;
            let l = ctc_loss(g, lp, target, BLANK)?;
            Ok(g.scale(l, 1.0 / target.len().max(1) as f64))
        }
        ModelMode::EncDec => {
            let mut input = Vec::with_capacity(target.len() + 1);
            input.push(BOS);
            input.extend_from_slice(target);
            let mut next = target.to_vec();
            next.push(EOS);
            let logits = model.decode_teacher_forced(g, b, enc, &input)?;
            seq_ce_loss(g, logits, &next)
        }
    }
}

/// Objective of one example on `g`: the mean task loss over the original and
/// every copy, and the mean PIF distance over (original, copy) pairs. The
/// returned variable is `task + λ·pif`; with λ = 0 the PIF term is measured
/// but not attached.
pub fn example_objective(
    g: &mut Graph,
    b: &Bound,
    model: &Model,
    ex: &TrainExample,
    pif: &PifConfig,
) -> Result<(Var, LossBreakdown)> {
    if pif.weight > 0.0 && ex.copies.is_empty() {
        return Err(Error::config(
            "pif.weight",
            "PIF needs perturbed copies paired with each original",
        ));
    }
    let views: Vec<&View> = std::iter::once(&ex.original).chain(&ex.copies).collect();
    let mut encs = Vec::with_capacity(views.len());
    let mut task = None;
    for v in &views {
        let enc = model.encode(g, b, &v.features, &v.valid)?;
        let l = task_loss(g, b, model, &enc, &ex.target)?;
        task = Some(match task {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
        encs.push(enc);
    }
    let task = g.scale(task.expect("at least the original view"), 1.0 / views.len() as f64);
    let task_value = g.value(task).item();

    let mut pif_var = None;
    for enc in &encs[1..] {
        let p = pif_loss(g, &encs[0], enc)?;
        pif_var = Some(match pif_var {
            None => p,
            Some(acc) => g.add(acc, p)?,
        });
    }
    let pif_var = pif_var.map(|p| g.scale(p, 1.0 / (encs.len() - 1) as f64));
    let pif_value = pif_var.map_or(0.0, |p| g.value(p).item());

    let total = match pif_var {
        Some(p) if pif.weight > 0.0 => {
            let w = g.scale(p, pif.weight);
            g.add(task, w)?
        }
        _ => task,
    };
    let breakdown = LossBreakdown {
        task_loss: task_value,
        pif_loss: pif_value,
        total: g.value(total).item(),
    };
    Ok((total, breakdown))
}

/// Batch-mean objective and summed parameter gradients. Examples run in
/// parallel; gradients are combined in batch order so the result does not
/// depend on scheduling.
pub fn total_objective(model: &Model, batch: &[TrainExample], pif: &PifConfig) -> Result<(LossBreakdown, GradMap)> {
    pif.validate()?;
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let n_params = model.store().len();
    let per_item: Vec<Result<(LossBreakdown, GradMap)>> = batch
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new();
            let b = model.store().bind(&mut g);
            let (loss, parts) = example_objective(&mut g, &b, model, ex, pif).map_err(|e| e.in_utterance(&ex.id))?;
            let grads = g.backward(loss)?;
            Ok((parts, GradMap::from_gradients(n_params, grads)))
        })
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut sum = LossBreakdown::default();
    let mut grads = GradMap::new(n_params);
    for item in per_item {
        let (parts, gm) = item?;
        sum.task_loss += parts.task_loss * scale;
        sum.pif_loss += parts.pif_loss * scale;
        sum.total += parts.total * scale;
        grads.merge(gm);
    }
    grads.scale(scale);
    Ok((sum, grads))
}

/// Batch-mean objective without gradients.
pub fn evaluate_objective(model: &Model, batch: &[TrainExample], pif: &PifConfig) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let parts: Vec<LossBreakdown> = batch
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new();
            let b = model.store().bind(&mut g);
            example_objective(&mut g, &b, model, ex, pif)
                .map(|(_, parts)| parts)
                .map_err(|e| e.in_utterance(&ex.id))
        })
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    Ok(parts.iter().fold(LossBreakdown::default(), |acc, p| LossBreakdown {
        task_loss: acc.task_loss + p.task_loss / n,
        pif_loss: acc.pif_loss + p.pif_loss / n,
        total: acc.total + p.total / n,
    }))
}

/// Finite-difference check of the full per-example objective against
/// every trainable parameter of `model`.
pub fn check_objective_gradients(
    model: &Model,
    ex: &TrainExample,
    pif: &PifConfig,
    eps: f64,
    per_param: Option<usize>,
    seed: u64,
) -> Result<ParamCheckReport> {
    grad_check_params(
        model.store(),
        |g, b| example_objective(g, b, model, ex, pif).map(|(loss, _)| loss),
        eps,
        per_param,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, random_features, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_log_probs(t: usize, v: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut data = Vec::with_capacity(t * v);
        for _ in 0..t {
            let row: Vec<f64> = (0..v).map(|_| rng.random_range(-2.0..2.0)).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            data.extend(row.into_iter().map(|x| x - z));
        }
        Tensor::new([t, v], data).unwrap()
    }

    fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = None;
        for &k in path {
            if Some(k) != prev && k != blank {
                out.push(k);
            }
            prev = Some(k);
        }
        out
    }

    /// Sum over all `v^t` paths.
    fn brute_force(lp: &Tensor, target: &[usize]) -> f64 {
        let (t, v) = lp.dims2().unwrap();
        let mut total = 0.0;
        for code in 0..v.pow(t as u32) {
            let path: Vec<usize> = (0..t).map(|i| code / v.pow(i as u32) % v).collect();
            if collapse(&path, 0) == target {
                total += path.iter().enumerate().map(|(i, &k)| lp.get(i, k)).sum::<f64>().exp();
            }
        }
        -total.ln()
    }

    #[test]
    fn single_frame_uniform() {
        let lp = Tensor::new([1, 2], vec![0.5f64.ln(); 2]).unwrap();
        let (nll, _) = ctc_nll_and_grad(&lp, &[1], 0).unwrap();
        assert!((nll - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_path_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in 1..=4 {
            for v in 2..=3 {
                let labels: Vec<usize> = (1..v).collect();
                let mut targets = vec![vec![]];
                for &a in &labels {
                    targets.push(vec![a]);
                    for &b in &labels {
                        targets.push(vec![a, b]);
                    }
                }
                for target in targets {
                    let lp = random_log_probs(t, v, &mut rng);
                    match ctc_nll_and_grad(&lp, &target, 0) {
                        Ok((nll, _)) => assert!((nll - brute_force(&lp, &target)).abs() < 1e-10),
                        Err(Error::InfeasibleAlignment { .. }) => assert!(t < ctc_min_frames(&target)),
                        Err(e) => panic!("{e}"),
                    }
                }
            }
        }
    }

    #[test]
    fn repeated_label_needs_a_separator() {
        let lp = Tensor::new([2, 2], vec![0.5f64.ln(); 4]).unwrap();
        assert!(matches!(
            ctc_nll_and_grad(&lp, &[1, 1], 0),
            Err(Error::InfeasibleAlignment { min_frames: 3, frames: 2, .. })
        ));
        assert!(matches!(ctc_nll_and_grad(&lp, &[0], 0), Err(Error::Argument(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (t, v, target) in [(5, 4, vec![1, 2, 2]), (6, 3, vec![1, 2]), (3, 3, vec![])] {
            let lp = random_log_probs(t, v, &mut rng);
            let (_, grad) = ctc_nll_and_grad(&lp, &target, 0).unwrap();
            let eps = 1e-5;
            for i in 0..t * v {
                let mut up = lp.clone();
                up.data_mut()[i] += eps;
                let mut down = lp.clone();
                down.data_mut()[i] -= eps;
                let fd = (ctc_nll_and_grad(&up, &target, 0).unwrap().0 - ctc_nll_and_grad(&down, &target, 0).unwrap().0)
                    / (2.0 * eps);
                let ad = grad.data()[i];
                assert!((ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8) < 1e-5, "{i}: {ad} vs {fd}");
            }
        }
    }

    #[test]
    fn gradient_through_log_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits = Tensor::randn([6, 4], 1.0, &mut rng);
        let err = crate::autodiff::gradcheck::grad_check(
            |g, x| {
                let lp = g.log_softmax(x, 1)?;
                ctc_loss(g, lp, &[1, 3, 3], 0)
            },
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn occupancy_sums_to_one_per_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lp = random_log_probs(7, 5, &mut rng);
        let (_, grad) = ctc_nll_and_grad(&lp, &[1, 4, 2], 0).unwrap();
        for t in 0..7 {
            assert!((grad.row(t).iter().sum::<f64>() + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 7]));
        let l = seq_ce_loss(&mut g, x, &[3]).unwrap();
        assert!((g.value(l).item() - 7f64.ln()).abs() < 1e-12);

        let mut sat = vec![0.0; 4];
        sat[2] = 100.0;
        let x = g.constant(Tensor::new([1, 4], sat).unwrap());
        let l = seq_ce_loss(&mut g, x, &[2]).unwrap();
        assert!(g.value(l).item() < 1e-10);

        // rows [1,2,3,4], [0,0,0,0], [2,0,0,-1]; targets 3, 1, 0
        let x = g.constant(
            Tensor::new([3, 4], vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, -1.0]).unwrap(),
        );
        let l = seq_ce_loss(&mut g, x, &[3, 1, 0]).unwrap();
        let r0 = -(4.0 - (1f64.exp() + 2f64.exp() + 3f64.exp() + 4f64.exp()).ln());
        let r1 = 4f64.ln();
        let r2 = -(2.0 - (2f64.exp() + 2.0 + (-1f64).exp()).ln());
        assert!((g.value(l).item() - (r0 + r1 + r2) / 3.0).abs() < 1e-12);

        assert!(matches!(seq_ce_loss(&mut g, x, &[1]), Err(Error::Shape(_))));
    }

    fn states(g: &mut Graph, rows: &[&[f64]]) -> EncoderStates {
        let t = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        EncoderStates {
            valid: vec![true; rows.len()],
            states: g.constant(t),
        }
    }

    #[test]
    fn pif_hand_cases() {
        let mut g = Graph::new();
        let a = states(&mut g, &[&[1.0, 0.0], &[1.0, 0.0]]);
        let b = states(&mut g, &[&[0.0, 1.0]]);
        let l = pif_loss(&mut g, &a, &b).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let l2 = pif_loss(&mut g, &b, &a).unwrap();
        assert_eq!(g.value(l2).item(), 1.0);
        let z = pif_loss(&mut g, &a, &a).unwrap();
        assert_eq!(g.value(z).item(), 0.0);
        let c = states(&mut g, &[&[1.0, 0.0, 0.0]]);
        assert!(matches!(pif_loss(&mut g, &a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn pif_pools_only_valid_rows() {
        let mut g = Graph::new();
        let a = states(&mut g, &[&[1.0, 0.0]]);
        let mut b = states(&mut g, &[&[1.0, 0.0], &[50.0, -9.0]]);
        b.valid[1] = false;
        let l = pif_loss(&mut g, &a, &b).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    fn toy_example(model: &Model, seed: u64, copies: usize) -> TrainExample {
        let n_mels = model.config().n_mels;
        TrainExample {
            id: format!("u{seed}"),
            original: View::new(random_features(12, n_mels, seed)),
            copies: (0..copies)
                .map(|i| View::new(random_features(10 + i, n_mels, seed + 100 + i as u64)))
                .collect(),
            target: vec![4, 5, 4],
        }
    }

    fn small_model(mode: ModelMode) -> Model {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 16,
            n_mels: 4,
            vocab_size: 7,
            enc_layers: 1,
            dec_layers: usize::from(mode == ModelMode::EncDec),
            ..ModelConfig::toy(mode)
        };
        build_model(&cfg, 2).unwrap()
    }

    #[test]
    fn lambda_zero_total_is_task() {
        for mode in [ModelMode::Ctc, ModelMode::EncDec] {
            let m = small_model(mode);
            let batch = vec![toy_example(&m, 1, 2), toy_example(&m, 2, 2)];
            let (parts, _) = total_objective(&m, &batch, &PifConfig::default()).unwrap();
            assert_eq!(parts.total, parts.task_loss);
            assert!(parts.pif_loss > 0.0);
        }
    }

    #[test]
    fn lambda_adds_exactly_weighted_pif() {
        let m = small_model(ModelMode::Ctc);
        let batch = vec![toy_example(&m, 1, 2), toy_example(&m, 2, 1)];
        let (off, _) = total_objective(&m, &batch, &PifConfig::default()).unwrap();
        let (on, _) = total_objective(&m, &batch, &PifConfig::enabled()).unwrap();
        assert_eq!(on.task_loss, off.task_loss);
        assert_eq!(on.pif_loss, off.pif_loss);
        assert!((on.total - (off.total + 0.1 * off.pif_loss)).abs() < 1e-12);
    }

    #[test]
    fn identity_copy_has_zero_pif() {
        let m = small_model(ModelMode::EncDec);
        let mut ex = toy_example(&m, 3, 0);
        ex.copies.push(ex.original.clone());
        let (parts, _) = total_objective(&m, &[ex], &PifConfig::enabled()).unwrap();
        assert_eq!(parts.pif_loss, 0.0);
        assert_eq!(parts.total, parts.task_loss);
    }

    #[test]
    fn pif_without_pairs_is_a_config_error() {
        let m = small_model(ModelMode::Ctc);
        let err = total_objective(&m, &[toy_example(&m, 1, 0)], &PifConfig::enabled()).unwrap_err();
        assert!(matches!(err.root(), Error::Config { .. }));
    }

    #[test]
    fn infeasible_example_names_the_utterance() {
        let m = small_model(ModelMode::Ctc);
        let mut ex = toy_example(&m, 1, 0);
        ex.target = vec![4; 20];
        let err = total_objective(&m, &[ex], &PifConfig::default()).unwrap_err();
        assert!(err.to_string().contains("u1"), "{err}");
        assert!(matches!(err.root(), Error::InfeasibleAlignment { .. }));
    }

    #[test]
    fn batch_gradients_are_order_stable() {
        let m = small_model(ModelMode::Ctc);
        let batch: Vec<TrainExample> = (0..4).map(|i| toy_example(&m, i, 1)).collect();
        let a = total_objective(&m, &batch, &PifConfig::enabled()).unwrap();
        let b = total_objective(&m, &batch, &PifConfig::enabled()).unwrap();
        assert_eq!(a, b);
    }
}
