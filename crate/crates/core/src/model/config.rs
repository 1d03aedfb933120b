use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// Encoder with a linear CTC head.
    Ctc,
    /// Encoder plus autoregressive decoder trained with cross-entropy.
    EncDec,
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelMode::Ctc => "ctc",
            ModelMode::EncDec => "enc_dec",
        })
    }
}

impl FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ctc" => Ok(ModelMode::Ctc),
            "enc_dec" | "encdec" | "enc-dec" => Ok(ModelMode::EncDec),
            _ => Err(Error::config("model.mode", format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub n_mels: usize,
    /// 0 means "derive from the training vocabulary".
    pub vocab_size: usize,
    /// Position budget per sequence, prompts included.
    pub max_len: usize,
    /// Consecutive feature frames stacked into one encoder position.
    pub subsample: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy(ModelMode::Ctc)
    }
}

impl ModelConfig {
    /// d=64, 4 heads, 2 encoder layers (and 2 decoder layers in enc_dec
    /// mode), ffn 128, 16 mels.
    pub fn toy(mode: ModelMode) -> Self {
        ModelConfig {
            mode,
            d_model: 64,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: if mode == ModelMode::EncDec { 2 } else { 0 },
            ffn_dim: 128,
            n_mels: 16,
            vocab_size: 30,
            max_len: 256,
            subsample: 1,
        }
    }

    /// Whisper-small shaped: d=768, 12 heads, 12+12 layers.
    pub fn paper_scale() -> Self {
        ModelConfig {
            mode: ModelMode::EncDec,
            d_model: 768,
            n_heads: 12,
            enc_layers: 12,
            dec_layers: 12,
            ffn_dim: 3072,
            n_mels: 80,
            vocab_size: 51865,
            max_len: 1500,
            subsample: 1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.d_model", self.d_model),
            ("model.n_heads", self.n_heads),
            ("model.ffn_dim", self.ffn_dim),
            ("model.n_mels", self.n_mels),
            ("model.max_len", self.max_len),
            ("model.subsample", self.subsample),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "model.n_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        match self.mode {
            ModelMode::Ctc if self.dec_layers != 0 => {
                return Err(Error::config("model.dec_layers", "must be 0 in ctc mode"));
            }
            ModelMode::EncDec if self.dec_layers == 0 => {
                return Err(Error::config("model.dec_layers", "enc_dec mode needs at least one decoder layer"));
            }
            _ => {}
        }
        if self.vocab_size != 0 && self.vocab_size <= crate::model::RESERVED_TOKENS {
            return Err(Error::config(
                "model.vocab_size",
                format!("{} leaves no room beyond the reserved symbols", self.vocab_size),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftMethod {
    Full,
    EncoderOnly,
    DecoderOnly,
    Lora,
    Adapter,
    Prompt,
    Prefix,
}

impl PeftMethod {
    pub const ALL: [PeftMethod; 7] = [
        PeftMethod::Full,
        PeftMethod::EncoderOnly,
        PeftMethod::DecoderOnly,
        PeftMethod::Lora,
        PeftMethod::Adapter,
        PeftMethod::Prompt,
        PeftMethod::Prefix,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PeftMethod::Full => "full",
            PeftMethod::EncoderOnly => "encoder_only",
            PeftMethod::DecoderOnly => "decoder_only",
            PeftMethod::Lora => "lora",
            PeftMethod::Adapter => "adapter",
            PeftMethod::Prompt => "prompt",
            PeftMethod::Prefix => "prefix",
        }
    }
}

impl fmt::Display for PeftMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PeftMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        PeftMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == key)
            .ok_or_else(|| Error::config("peft.method", format!("unknown PEFT method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeftConfig {
    pub method: PeftMethod,
    pub lora_rank: usize,
    pub lora_targets: Vec<LoraTarget>,
    pub adapter_bottleneck: usize,
    pub prompts_enc: usize,
    pub prompts_dec: usize,
    pub prefix_enc: usize,
    pub prefix_dec: usize,
}

impl Default for PeftConfig {
    fn default() -> Self {
        PeftConfig::toy(PeftMethod::Full)
    }
}

impl PeftConfig {
    /// Desk-scale sizes: 8/4 prompts, 4/2 prefixes.
    pub fn toy(method: PeftMethod) -> Self {
        PeftConfig {
            method,
            lora_rank: 8,
            lora_targets: vec![LoraTarget::Query, LoraTarget::Value],
            adapter_bottleneck: 32,
            prompts_enc: 8,
            prompts_dec: 4,
            prefix_enc: 4,
            prefix_dec: 2,
        }
    }

    /// 100/20 prompts and 50/10 prefixes.
    pub fn paper_scale(method: PeftMethod) -> Self {
        PeftConfig {
            prompts_enc: 100,
            prompts_dec: 20,
            prefix_enc: 50,
            prefix_dec: 10,
            ..PeftConfig::toy(method)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            PeftMethod::Lora => {
                if self.lora_rank == 0 {
                    return Err(Error::config("peft.lora_rank", "must be positive"));
                }
                if self.lora_targets.is_empty() {
                    return Err(Error::config("peft.lora_targets", "needs at least one target"));
                }
            }
            PeftMethod::Adapter if self.adapter_bottleneck == 0 => {
                return Err(Error::config("peft.adapter_bottleneck", "must be positive"));
            }
            PeftMethod::Prompt if self.prompts_enc + self.prompts_dec == 0 => {
                return Err(Error::config("peft.prompts_enc", "prompt tuning needs at least one prompt"));
            }
            PeftMethod::Prefix if self.prefix_enc + self.prefix_dec == 0 => {
                return Err(Error::config("peft.prefix_enc", "prefix tuning needs at least one prefix"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Prompt positions this method adds to the encoder sequence.
    pub fn enc_prompt_len(&self) -> usize {
        if self.method == PeftMethod::Prompt {
            self.prompts_enc
        } else {
            0
        }
    }

    pub fn dec_prompt_len(&self) -> usize {
        if self.method == PeftMethod::Prompt {
            self.prompts_dec
        } else {
            0
        }
    }
}
