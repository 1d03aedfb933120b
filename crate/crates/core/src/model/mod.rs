//! Pre-norm transformer ASR model (encoder + CTC head, or encoder-decoder)
//! with LoRA, adapter, prompt and prefix injection.

mod config;
mod layout;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::checkpoint::{load_params, save_params};
use crate::autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::signal::FeatureMatrix;

pub use config::{LoraTarget, ModelConfig, ModelMode, PeftConfig, PeftMethod};
pub use layout::{base_layout, base_trainable, count_params, peft_layout, Init, ParamCount, ParamGroup, ParamSpec};

pub const BLANK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Ids below this are reserved; characters start here.
pub const RESERVED_TOKENS: usize = 4;

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    peft: Option<PeftConfig>,
    store: ParamStore,
    seed: u64,
    n_base: usize,
}

/// Encoder output on a graph: one row per (subsampled) input position.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    pub states: Var,
    pub valid: Vec<bool>,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

fn init_tensor(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor {
    match spec.init {
        Init::Zeros => Tensor::zeros(spec.shape.clone()),
        Init::Ones => Tensor::full(spec.shape.clone(), 1.0),
        Init::Normal(std) => Tensor::randn(spec.shape.clone(), std, rng),
        Init::Scaled(fan_in) => Tensor::randn(spec.shape.clone(), 1.0 / (fan_in as f64).sqrt(), rng),
    }
}

/// Builds a freshly initialized model; identical seeds give identical
/// parameters.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    if cfg.vocab_size == 0 {
        return Err(Error::config("model.vocab_size", "must be set before building"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in base_layout(cfg) {
        let t = init_tensor(&spec, &mut rng);
        store.insert(spec.name, t, true)?;
    }
    let n_base = store.len();
    Ok(Model {
        config: cfg.clone(),
        peft: None,
        store,
        seed,
        n_base,
    })
}

/// Injects the PEFT method and freezes the base accordingly. A model takes
/// at most one application.
pub fn apply_peft(mut model: Model, peft: &PeftConfig) -> Result<Model> {
    if model.peft.is_some() {
        return Err(Error::State("PEFT has already been applied to this model".into()));
    }
    peft.validate()?;
    let base = base_layout(&model.config);
    for (i, spec) in base.iter().enumerate() {
        let p = model.store.get_mut(crate::autodiff::ParamId(i));
        p.trainable = base_trainable(spec.group, peft.method);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed ^ 0x5eed_0f_9ef7);
    for spec in peft_layout(&model.config, peft) {
        let t = init_tensor(&spec, &mut rng);
        model.store.insert(spec.name, t, true)?;
    }
    model.peft = Some(peft.clone());
    Ok(model)
}

pub fn count_trainable_params(model: &Model) -> usize {
    model.store.trainable_numel()
}

/// `[len, d]` sinusoidal position table.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let k = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / 10000f64.powf(k / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new([len, d], data).expect("consistent shape")
}

/// Additive attention mask: `allowed(row, col)` keeps a score, everything
/// else is pushed to a large negative value.
fn mask_tensor(rows: usize, cols: usize, allowed: impl Fn(usize, usize) -> bool) -> Option<Tensor> {
    let mut any = false;
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            if !allowed(r, c) {
                data[r * cols + c] = MASKED;
                any = true;
            }
        }
    }
    any.then(|| Tensor::new([rows, cols], data).expect("consistent shape"))
}

/// Zeroes padded frames and stacks `s` consecutive frames per row.
fn stack_frames(feat: &FeatureMatrix, valid: &[bool], s: usize) -> (Tensor, Vec<bool>) {
    let (t, m) = (feat.n_frames(), feat.n_mels());
    let rows = t.div_ceil(s);
    let mut data = vec![0.0; rows * s * m];
    let mut row_valid = vec![false; rows];
    for f in 0..t {
        if valid[f] {
            let (r, k) = (f / s, f % s);
            data[r * s * m + k * m..r * s * m + (k + 1) * m].copy_from_slice(feat.row(f));
            row_valid[r] = true;
        }
    }
    (Tensor::new([rows, s * m], data).expect("consistent shape"), row_valid)
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn peft(&self) -> Option<&PeftConfig> {
        self.peft.as_ref()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Number of parameters created by [`build_model`]; PEFT parameters
    /// follow them.
    pub fn n_base_params(&self) -> usize {
        self.n_base
    }

    /// Names and values of every frozen parameter.
    pub fn frozen_snapshot(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Writes the trainable subset (PEFT runs) or everything (no PEFT).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let trainable_only = self.peft.as_ref().is_some_and(|p| p.method != PeftMethod::Full);
        save_params(&self.store, path, trainable_only)
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<usize> {
        load_params(&mut self.store, path)
    }

    fn enc_prompts(&self) -> usize {
        self.peft.as_ref().map_or(0, PeftConfig::enc_prompt_len)
    }

    pub(crate) fn dec_prompts(&self) -> usize {
        match (&self.peft, self.config.mode) {
            (Some(p), ModelMode::EncDec) => p.dec_prompt_len(),
            _ => 0,
        }
    }

    /// Encoder positions available to an utterance of `frames` feature
    /// frames, and the positions it would need.
    pub fn encoder_positions(&self, frames: usize) -> (usize, usize) {
        (
            self.config.max_len,
            frames.div_ceil(self.config.subsample) + self.enc_prompts(),
        )
    }

    fn p(&self, b: &Bound, name: &str) -> Var {
        let id = self
            .store
            .id(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from the layout"));
        b.var(id)
    }

    fn has(&self, name: &str) -> bool {
        self.store.id(name).is_some()
    }

    fn linear(&self, g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.p(b, &format!("{name}.w")))?;
        let mut y = g.add_bias(y, self.p(b, &format!("{name}.b")))?;
        let a_name = format!("{name}.lora_a");
        if self.has(&a_name) {
            let xa = g.matmul(x, self.p(b, &a_name))?;
            let delta = g.matmul(xa, self.p(b, &format!("{name}.lora_b")))?;
            y = g.add(y, delta)?;
        }
        Ok(y)
    }

    fn norm(&self, g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
        g.layer_norm(x, self.p(b, &format!("{name}.g")), self.p(b, &format!("{name}.b")), LN_EPS)
    }

    fn attention(&self, g: &mut Graph, b: &Bound, name: &str, xq: Var, xkv: Var, mask: Option<&Tensor>) -> Result<Var> {
        let q = self.linear(g, b, &format!("{name}.q"), xq)?;
        let k = self.linear(g, b, &format!("{name}.k"), xkv)?;
        let v = self.linear(g, b, &format!("{name}.v"), xkv)?;
        let mask = mask.map(|m| g.constant(m.clone()));
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = g.slice(q, 1, h * dh, (h + 1) * dh)?;
            let kh = g.slice(k, 1, h * dh, (h + 1) * dh)?;
            let vh = g.slice(v, 1, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let a = g.softmax(s, 1)?;
            heads.push(g.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
        self.linear(g, b, &format!("{name}.o"), cat)
    }

    fn ffn(&self, g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let h = self.linear(g, b, &format!("{name}.fc1"), x)?;
        let h = g.gelu(h);
        self.linear(g, b, &format!("{name}.fc2"), h)
    }

    fn adapter(&self, g: &mut Graph, b: &Bound, block: &str, x: Var) -> Result<Var> {
        let down = format!("{block}.adapter.down");
        if !self.has(&format!("{down}.w")) {
            return Ok(x);
        }
        let h = self.linear(g, b, &down, x)?;
        let h = g.gelu(h);
        let up = self.linear(g, b, &format!("{block}.adapter.up"), h)?;
        g.add(x, up)
    }

    /// Prepends the layer's prefix rows, if any; returns the count.
    fn with_prefix(&self, g: &mut Graph, b: &Bound, block: &str, x: Var) -> Result<(Var, usize)> {
        let name = format!("{block}.prefix");
        if !self.has(&name) {
            return Ok((x, 0));
        }
        let pv = self.p(b, &name);
        let n = g.value(pv).rows();
        Ok((g.concat(&[pv, x], 0)?, n))
    }

    fn strip(&self, g: &mut Graph, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Ok(x);
        }
        let rows = g.value(x).rows();
        g.slice(x, 0, n, rows)
    }

    /// Runs the encoder on one utterance. `valid[t]` marks real frames;
    /// padded frames are zeroed and never attended to.
    pub fn encode(&self, g: &mut Graph, b: &Bound, feat: &FeatureMatrix, valid: &[bool]) -> Result<EncoderStates> {
        let cfg = &self.config;
        if feat.n_mels() != cfg.n_mels {
            return Err(Error::Shape(format!(
                "features have {} mel bins, model expects {}",
                feat.n_mels(),
                cfg.n_mels
            )));
        }
        if valid.len() != feat.n_frames() {
            return Err(Error::Shape(format!(
                "mask of {} entries for {} frames",
                valid.len(),
                feat.n_frames()
            )));
        }
        if feat.n_frames() == 0 {
            return Err(Error::Argument("cannot encode zero frames".into()));
        }
        let (max, need) = self.encoder_positions(feat.n_frames());
        if need > max {
            return Err(Error::Length { len: need, max });
        }
        let (stacked, row_valid) = stack_frames(feat, valid, cfg.subsample);
        let x = g.constant(stacked);
        let mut h = self.linear(g, b, "enc.in_proj", x)?;
        let n_prompt = self.enc_prompts();
        if n_prompt > 0 {
            h = g.concat(&[self.p(b, "enc.prompt"), h], 0)?;
        }
        let len = n_prompt + row_valid.len();
        let pos = g.constant(sinusoidal_positions(len, cfg.d_model));
        h = g.add(h, pos)?;
        let key_valid: Vec<bool> = std::iter::repeat_n(true, n_prompt).chain(row_valid.iter().copied()).collect();

        for i in 0..cfg.enc_layers {
            let block = format!("enc.{i}");
            let (x, n_pre) = self.with_prefix(g, b, &block, h)?;
            let rows = n_pre + len;
            let mask = mask_tensor(rows, rows, |_, c| c < n_pre || key_valid[c - n_pre]);
            let a = self.norm(g, b, &format!("{block}.ln1"), x)?;
            let a = self.attention(g, b, &format!("{block}.attn"), a, a, mask.as_ref())?;
            let x = g.add(x, a)?;
            let f = self.norm(g, b, &format!("{block}.ln2"), x)?;
            let f = self.ffn(g, b, &format!("{block}.ffn"), f)?;
            let x = g.add(x, f)?;
            let x = self.adapter(g, b, &block, x)?;
            h = self.strip(g, x, n_pre)?;
        }
        if cfg.enc_layers > 0 {
            h = self.norm(g, b, "enc.ln_f", h)?;
        }
        let states = self.strip(g, h, n_prompt)?;
        Ok(EncoderStates {
            states,
            valid: row_valid,
        })
    }

    /// `[positions, vocab]` log-probabilities from the CTC head.
    pub fn ctc_log_probs(&self, g: &mut Graph, b: &Bound, enc: &EncoderStates) -> Result<Var> {
        if self.config.mode != ModelMode::Ctc {
            return Err(Error::Mode("the CTC head exists only in ctc mode".into()));
        }
        let logits = self.linear(g, b, "ctc_head", enc.states)?;
        g.log_softmax(logits, 1)
    }

    /// Teacher-forced decoder logits, one row per input token. The first
    /// token is normally BOS.
    pub fn decode_teacher_forced(&self, g: &mut Graph, b: &Bound, enc: &EncoderStates, tokens: &[usize]) -> Result<Var> {
        let cfg = &self.config;
        if cfg.mode != ModelMode::EncDec {
            return Err(Error::Mode("teacher-forced decoding needs enc_dec mode".into()));
        }
        if tokens.is_empty() {
            return Err(Error::Argument("decoder input needs at least the BOS token".into()));
        }
        let n_prompt = self.dec_prompts();
        let len = n_prompt + tokens.len();
        if len > cfg.max_len {
            return Err(Error::Length {
                len,
                max: cfg.max_len,
            });
        }
        let mut h = g.embedding(self.p(b, "dec.embed"), tokens)?;
        if n_prompt > 0 {
            h = g.concat(&[self.p(b, "dec.prompt"), h], 0)?;
        }
        let pos = g.constant(sinusoidal_positions(len, cfg.d_model));
        h = g.add(h, pos)?;
        let mem_rows = enc.len();
        let cross_mask = mask_tensor(len, mem_rows, |_, c| enc.valid[c]);

        for i in 0..cfg.dec_layers {
            let block = format!("dec.{i}");
            let (x, n_pre) = self.with_prefix(g, b, &block, h)?;
            let rows = n_pre + len;
            let fixed = n_pre + n_prompt;
            let self_mask = mask_tensor(rows, rows, |r, c| c < fixed || c <= r);
            let a = self.norm(g, b, &format!("{block}.ln1"), x)?;
            let a = self.attention(g, b, &format!("{block}.self"), a, a, self_mask.as_ref())?;
            let x = g.add(x, a)?;
            let c = self.norm(g, b, &format!("{block}.ln2"), x)?;
            let cm = if n_pre > 0 {
                mask_tensor(rows, mem_rows, |_, c| enc.valid[c])
            } else {
                cross_mask.clone()
            };
            let c = self.attention(g, b, &format!("{block}.cross"), c, enc.states, cm.as_ref())?;
            let x = g.add(x, c)?;
            let f = self.norm(g, b, &format!("{block}.ln3"), x)?;
            let f = self.ffn(g, b, &format!("{block}.ffn"), f)?;
            let x = g.add(x, f)?;
            let x = self.adapter(g, b, &block, x)?;
            h = self.strip(g, x, n_pre)?;
        }
        h = self.norm(g, b, "dec.ln_f", h)?;
        let h = self.strip(g, h, n_prompt)?;
        self.linear(g, b, "dec.out", h)
    }

    /// Encoder output as a plain tensor (no gradients kept).
    pub fn encode_tensor(&self, feat: &FeatureMatrix, valid: &[bool]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let enc = self.encode(&mut g, &b, feat, valid)?;
        Ok(g.value(enc.states).clone())
    }

    /// Mode-appropriate output for one utterance: CTC log-probabilities, or
    /// decoder logits for `tokens`.
    pub fn forward_tensor(&self, feat: &FeatureMatrix, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let valid = vec![true; feat.n_frames()];
        let enc = self.encode(&mut g, &b, feat, &valid)?;
        let out = match self.config.mode {
            ModelMode::Ctc => self.ctc_log_probs(&mut g, &b, &enc)?,
            ModelMode::EncDec => self.decode_teacher_forced(&mut g, &b, &enc, tokens)?,
        };
        Ok(g.value(out).clone())
    }
}

/// Random standard-normal features, handy for probing shapes.
pub fn random_features(frames: usize, n_mels: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let values = (0..frames * n_mels).map(|_| normal.sample(&mut rng)).collect();
    FeatureMatrix::new(values, frames, n_mels, 0.01).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: ModelMode) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 24,
            n_mels: 4,
            vocab_size: 9,
            max_len: 64,
            enc_layers: 2,
            dec_layers: if mode == ModelMode::EncDec { 2 } else { 0 },
            ..ModelConfig::toy(mode)
        }
    }

    #[test]
    fn ctc_mode_rejects_decoder_layers() {
        let cfg = ModelConfig {
            dec_layers: 1,
            ..ModelConfig::toy(ModelMode::Ctc)
        };
        assert!(matches!(build_model(&cfg, 1), Err(Error::Config { .. })));
        let cfg = ModelConfig {
            n_heads: 5,
            ..ModelConfig::toy(ModelMode::Ctc)
        };
        assert!(matches!(build_model(&cfg, 1), Err(Error::Config { .. })));
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::toy(ModelMode::EncDec);
        assert_eq!(build_model(&cfg, 9).unwrap(), build_model(&cfg, 9).unwrap());
        assert_ne!(build_model(&cfg, 9).unwrap().store, build_model(&cfg, 10).unwrap().store);
    }

    #[test]
    fn toy_ctc_output_shape() {
        let m = build_model(&ModelConfig::toy(ModelMode::Ctc), 0).unwrap();
        let out = m.forward_tensor(&random_features(50, 16, 1), &[]).unwrap();
        assert_eq!(out.shape(), &[50, 30]);
        for r in 0..50 {
            let z: f64 = out.row(r).iter().map(|v| v.exp()).sum();
            assert!((z - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_layer_encoder_is_projection_plus_positions() {
        let cfg = ModelConfig {
            enc_layers: 0,
            ..small(ModelMode::Ctc)
        };
        let m = build_model(&cfg, 3).unwrap();
        let feat = random_features(7, 4, 2);
        let out = m.encode_tensor(&feat, &[true; 7]).unwrap();
        let w = &m.store.by_name("enc.in_proj.w").unwrap().value;
        let bias = &m.store.by_name("enc.in_proj.b").unwrap().value;
        let pos = sinusoidal_positions(7, 16);
        for t in 0..7 {
            for j in 0..16 {
                let proj: f64 = (0..4).map(|k| feat.get(t, k) * w.get(k, j)).sum::<f64>() + bias.data()[j];
                assert!((out.get(t, j) - proj - pos.get(t, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padded_tail_does_not_leak() {
        for method in [PeftMethod::Full, PeftMethod::Prompt, PeftMethod::Prefix] {
            let cfg = ModelConfig {
                subsample: 2,
                ..small(ModelMode::Ctc)
            };
            let m = apply_peft(build_model(&cfg, 4).unwrap(), &PeftConfig::toy(method)).unwrap();
            let a = random_features(12, 4, 5);
            let mut values = a.values().to_vec();
            // frames 9.. are padding; scramble them
            for v in values[9 * 4..].iter_mut() {
                *v = -*v * 3.0 + 1.0;
            }
            let b = FeatureMatrix::new(values, 12, 4, 0.01).unwrap();
            let mut valid = vec![true; 12];
            valid[9..].iter_mut().for_each(|v| *v = false);
            let ea = m.encode_tensor(&a, &valid).unwrap();
            let eb = m.encode_tensor(&b, &valid).unwrap();
            // 12 frames stacked by 2 → 6 rows; rows 0..=4 contain real frames
            for r in 0..5 {
                for c in 0..16 {
                    assert!((ea.get(r, c) - eb.get(r, c)).abs() < 1e-9, "{method}");
                }
            }
        }
    }

    #[test]
    fn decoder_is_causal() {
        for method in [PeftMethod::Full, PeftMethod::Prompt, PeftMethod::Prefix, PeftMethod::Lora] {
            let m = apply_peft(build_model(&small(ModelMode::EncDec), 6).unwrap(), &PeftConfig::toy(method)).unwrap();
            let feat = random_features(10, 4, 7);
            let a = m.forward_tensor(&feat, &[BOS, 4, 5, 6, 7]).unwrap();
            let b = m.forward_tensor(&feat, &[BOS, 4, 5, 8, 7]).unwrap();
            for t in 0..3 {
                for v in 0..9 {
                    assert!((a.get(t, v) - b.get(t, v)).abs() < 1e-12, "{method}");
                }
            }
            assert!(a.row(3).iter().zip(b.row(3)).any(|(x, y)| x != y));
        }
    }

    #[test]
    fn bos_only_gives_one_row() {
        let m = build_model(&small(ModelMode::EncDec), 1).unwrap();
        let feat = random_features(6, 4, 1);
        let out = m.forward_tensor(&feat, &[BOS]).unwrap();
        assert_eq!(out.shape(), &[1, 9]);
        assert_eq!(out, m.forward_tensor(&feat, &[BOS]).unwrap());
    }

    #[test]
    fn mode_errors() {
        let m = build_model(&small(ModelMode::Ctc), 1).unwrap();
        let mut g = Graph::new();
        let b = m.store.bind(&mut g);
        let enc = m.encode(&mut g, &b, &random_features(5, 4, 1), &[true; 5]).unwrap();
        assert!(matches!(m.decode_teacher_forced(&mut g, &b, &enc, &[BOS]), Err(Error::Mode(_))));
        let m = build_model(&small(ModelMode::EncDec), 1).unwrap();
        let mut g = Graph::new();
        let b = m.store.bind(&mut g);
        let enc = m.encode(&mut g, &b, &random_features(5, 4, 1), &[true; 5]).unwrap();
        assert!(matches!(m.ctc_log_probs(&mut g, &b, &enc), Err(Error::Mode(_))));
    }

    #[test]
    fn over_length_input_is_rejected() {
        let m = build_model(&small(ModelMode::Ctc), 1).unwrap();
        let f = random_features(65, 4, 1);
        assert!(matches!(m.encode_tensor(&f, &[true; 65]), Err(Error::Length { len: 65, max: 64 })));
        let m = apply_peft(m, &PeftConfig::toy(PeftMethod::Prompt)).unwrap();
        let f = random_features(60, 4, 1);
        assert!(matches!(m.encode_tensor(&f, &[true; 60]), Err(Error::Length { len: 68, .. })));
    }

    #[test]
    fn lora_and_adapter_start_as_identity() {
        for mode in [ModelMode::Ctc, ModelMode::EncDec] {
            let base = build_model(&small(mode), 11).unwrap();
            let feat = random_features(9, 4, 3);
            let tokens = [BOS, 5, 6];
            let want = base.forward_tensor(&feat, &tokens).unwrap();
            for method in [PeftMethod::Lora, PeftMethod::Adapter] {
                let m = apply_peft(base.clone(), &PeftConfig::toy(method)).unwrap();
                let got = m.forward_tensor(&feat, &tokens).unwrap();
                assert!(got.max_abs_diff(&want) < 1e-9, "{mode} {method}");
            }
        }
    }

    #[test]
    fn peft_twice_is_a_state_error() {
        let m = apply_peft(build_model(&small(ModelMode::Ctc), 1).unwrap(), &PeftConfig::toy(PeftMethod::Lora)).unwrap();
        assert!(matches!(apply_peft(m, &PeftConfig::toy(PeftMethod::Adapter)), Err(Error::State(_))));
    }

    #[test]
    fn toy_closed_form_counts() {
        let cfg = ModelConfig::toy(ModelMode::EncDec);
        let base = build_model(&cfg, 0).unwrap();
        let total = base.store.total_numel();
        let full = apply_peft(base.clone(), &PeftConfig::toy(PeftMethod::Full)).unwrap();
        assert_eq!(count_trainable_params(&full), total);
        let lora = apply_peft(base.clone(), &PeftConfig::toy(PeftMethod::Lora)).unwrap();
        assert_eq!(count_trainable_params(&lora), 6 * 2 * (2 * 8 * 64));
        assert_eq!(count_trainable_params(&lora), 12_288);
        let adapter = apply_peft(base.clone(), &PeftConfig::toy(PeftMethod::Adapter)).unwrap();
        assert_eq!(count_trainable_params(&adapter), 4 * (64 * 32 + 32 + 32 * 64 + 64));
        assert_eq!(count_trainable_params(&adapter), 16_768);
        for method in PeftMethod::ALL {
            let m = apply_peft(base.clone(), &PeftConfig::toy(method)).unwrap();
            assert_eq!(
                count_params(&cfg, &PeftConfig::toy(method)),
                ParamCount {
                    total: m.store.total_numel(),
                    trainable: count_trainable_params(&m),
                },
                "{method}"
            );
        }
    }

    #[test]
    fn encoder_and_decoder_only_split_the_base() {
        let cfg = ModelConfig::toy(ModelMode::EncDec);
        let enc = count_params(&cfg, &PeftConfig::toy(PeftMethod::EncoderOnly)).trainable;
        let dec = count_params(&cfg, &PeftConfig::toy(PeftMethod::DecoderOnly)).trainable;
        let full = count_params(&cfg, &PeftConfig::toy(PeftMethod::Full)).trainable;
        assert_eq!(enc + dec, full);
        assert!(enc > 0 && dec > 0);
    }

    #[test]
    fn paper_scale_counts() {
        let cfg = ModelConfig::paper_scale();
        let count = |m| count_params(&cfg, &PeftConfig::paper_scale(m)).trainable;
        assert_eq!(count(PeftMethod::Prompt), 92_160);
        assert_eq!(count(PeftMethod::Prefix), 552_960);
        assert_eq!(count(PeftMethod::Lora), 884_736);
        assert_eq!(count(PeftMethod::Adapter), 1_198_848);
        assert!(count(PeftMethod::Adapter) < count(PeftMethod::Full));
        assert!(count(PeftMethod::Full) > 200_000_000);
    }

    #[test]
    fn peft_checkpoint_holds_only_trainable_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lora.ckpt");
        let mut m = apply_peft(build_model(&small(ModelMode::Ctc), 2).unwrap(), &PeftConfig::toy(PeftMethod::Lora)).unwrap();
        let id = m.store.id("enc.0.attn.q.lora_b").unwrap();
        m.store.get_mut(id).value.data_mut()[0] = 0.5;
        m.save_checkpoint(&path).unwrap();
        let mut fresh = apply_peft(build_model(&small(ModelMode::Ctc), 2).unwrap(), &PeftConfig::toy(PeftMethod::Lora)).unwrap();
        let n = fresh.load_checkpoint(&path).unwrap();
        assert_eq!(n, 8);
        assert_eq!(fresh, m);
    }
}
