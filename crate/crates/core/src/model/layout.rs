//! Shape-only description of every parameter, so counts can be computed at
//! sizes too large to allocate.

use crate::model::{ModelConfig, ModelMode, PeftConfig, PeftMethod};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    /// Decoder stack, or the CTC head in ctc mode.
    Decoder,
    Peft,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `1 / sqrt(fan_in)`.
    Scaled(usize),
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct Builder {
    specs: Vec<ParamSpec>,
    group: ParamGroup,
}

impl Builder {
    fn push(&mut self, name: String, shape: &[usize], init: Init) {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            group: self.group,
            init,
        });
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.push(format!("{name}.w"), &[fan_in, fan_out], Init::Scaled(fan_in));
        self.push(format!("{name}.b"), &[fan_out], Init::Zeros);
    }

    fn norm(&mut self, name: &str, d: usize) {
        self.push(format!("{name}.g"), &[d], Init::Ones);
        self.push(format!("{name}.b"), &[d], Init::Zeros);
    }

    fn attention(&mut self, name: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), d, d);
        }
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) {
        self.linear(&format!("{name}.fc1"), d, f);
        self.linear(&format!("{name}.fc2"), f, d);
    }
}

/// Attention modules that LoRA attaches to.
pub(crate) fn attention_modules(cfg: &ModelConfig) -> Vec<String> {
    let mut out: Vec<String> = (0..cfg.enc_layers).map(|i| format!("enc.{i}.attn")).collect();
    for i in 0..cfg.dec_layers {
        out.push(format!("dec.{i}.self"));
        out.push(format!("dec.{i}.cross"));
    }
    out
}

pub fn base_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut b = Builder {
        specs: Vec::new(),
        group: ParamGroup::Encoder,
    };
    b.linear("enc.in_proj", cfg.n_mels * cfg.subsample, d);
    for i in 0..cfg.enc_layers {
        b.norm(&format!("enc.{i}.ln1"), d);
        b.attention(&format!("enc.{i}.attn"), d);
        b.norm(&format!("enc.{i}.ln2"), d);
        b.ffn(&format!("enc.{i}.ffn"), d, cfg.ffn_dim);
    }
    if cfg.enc_layers > 0 {
        b.norm("enc.ln_f", d);
    }
    b.group = ParamGroup::Decoder;
    match cfg.mode {
        ModelMode::Ctc => b.linear("ctc_head", d, cfg.vocab_size),
        ModelMode::EncDec => {
            b.push("dec.embed".into(), &[cfg.vocab_size, d], Init::Normal(1.0));
            for i in 0..cfg.dec_layers {
                b.norm(&format!("dec.{i}.ln1"), d);
                b.attention(&format!("dec.{i}.self"), d);
                b.norm(&format!("dec.{i}.ln2"), d);
                b.attention(&format!("dec.{i}.cross"), d);
                b.norm(&format!("dec.{i}.ln3"), d);
                b.ffn(&format!("dec.{i}.ffn"), d, cfg.ffn_dim);
            }
            b.norm("dec.ln_f", d);
            b.linear("dec.out", d, cfg.vocab_size);
        }
    }
    b.specs
}

/// Parameters that `peft` adds on top of the base model.
pub fn peft_layout(cfg: &ModelConfig, peft: &PeftConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut b = Builder {
        specs: Vec::new(),
        group: ParamGroup::Peft,
    };
    let has_dec = cfg.mode == ModelMode::EncDec;
    match peft.method {
        PeftMethod::Lora => {
            let r = peft.lora_rank;
            for module in attention_modules(cfg) {
                for t in &peft.lora_targets {
                    let p = match t {
                        crate::model::LoraTarget::Query => "q",
                        crate::model::LoraTarget::Value => "v",
                    };
                    b.push(format!("{module}.{p}.lora_a"), &[d, r], Init::Scaled(d));
                    b.push(format!("{module}.{p}.lora_b"), &[r, d], Init::Zeros);
                }
            }
        }
        PeftMethod::Adapter => {
            let k = peft.adapter_bottleneck;
            let blocks = (0..cfg.enc_layers)
                .map(|i| format!("enc.{i}"))
                .chain((0..cfg.dec_layers).map(|i| format!("dec.{i}")));
            for block in blocks {
                b.push(format!("{block}.adapter.down.w"), &[d, k], Init::Scaled(d));
                b.push(format!("{block}.adapter.down.b"), &[k], Init::Zeros);
                b.push(format!("{block}.adapter.up.w"), &[k, d], Init::Zeros);
                b.push(format!("{block}.adapter.up.b"), &[d], Init::Zeros);
            }
        }
        PeftMethod::Prompt => {
            if peft.prompts_enc > 0 {
                b.push("enc.prompt".into(), &[peft.prompts_enc, d], Init::Normal(1.0));
            }
            if has_dec && peft.prompts_dec > 0 {
                b.push("dec.prompt".into(), &[peft.prompts_dec, d], Init::Normal(1.0));
            }
        }
        PeftMethod::Prefix => {
            if peft.prefix_enc > 0 {
                for i in 0..cfg.enc_layers {
                    b.push(format!("enc.{i}.prefix"), &[peft.prefix_enc, d], Init::Normal(1.0));
                }
            }
            if has_dec && peft.prefix_dec > 0 {
                for i in 0..cfg.dec_layers {
                    b.push(format!("dec.{i}.prefix"), &[peft.prefix_dec, d], Init::Normal(1.0));
                }
            }
        }
        PeftMethod::Full | PeftMethod::EncoderOnly | PeftMethod::DecoderOnly => {}
    }
    b.specs
}

/// Whether a base parameter stays trainable under `method`.
pub fn base_trainable(group: ParamGroup, method: PeftMethod) -> bool {
    match method {
        PeftMethod::Full => true,
        PeftMethod::EncoderOnly => group == ParamGroup::Encoder,
        PeftMethod::DecoderOnly => group == ParamGroup::Decoder,
        _ => false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
}

/// Total and trainable element counts without building the model.
pub fn count_params(cfg: &ModelConfig, peft: &PeftConfig) -> ParamCount {
    let base = base_layout(cfg);
    let extra = peft_layout(cfg, peft);
    let base_total: usize = base.iter().map(ParamSpec::numel).sum();
    let extra_total: usize = extra.iter().map(ParamSpec::numel).sum();
    let base_train: usize = base
        .iter()
        .filter(|s| base_trainable(s.group, peft.method))
        .map(ParamSpec::numel)
        .sum();
    ParamCount {
        total: base_total + extra_total,
        trainable: base_train + extra_total,
    }
}
