//! The encoder-decoder recognition model: architecture configuration,
//! parameter construction, and the forward graph.

mod net;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::hex_string;
use crate::error::NumericsError;
use crate::params::{uniform_init, ParamSet};
use crate::tensor::Tensor;

pub use net::{
    cnn_extract, dataset_loss, decoder_forward, embed_char, encode, greedy_decode,
    multi_head_attention, sample_loss, sequence_nll, transformer_decoder_block,
    transformer_encoder_block,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("unknown symbol id {0}")]
    UnknownSymbol(usize),
    #[error("bad input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Encoder wiring: `Sheng` runs K Transformer encoder blocks over the
/// CNN sequence; `Wang` feeds the CNN sequence to the decoder directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Sheng,
    Wang,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Sheng => "sheng",
            Variant::Wang => "wang",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "sheng" => Ok(Variant::Sheng),
            "wang" => Ok(Variant::Wang),
            other => Err(ModelError::BadConfig(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CnnPresetKind {
    VggLite,
    ResnetLite,
}

impl CnnPresetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CnnPresetKind::VggLite => "vgg-lite",
            CnnPresetKind::ResnetLite => "resnet-lite",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "vgg-lite" => Ok(CnnPresetKind::VggLite),
            "resnet-lite" => Ok(CnnPresetKind::ResnetLite),
            other => Err(ModelError::BadConfig(format!("unknown cnn preset `{other}`"))),
        }
    }
}

/// Architecture descriptor. `d_ffn` defaults to `d_model`, matching the
/// reference setting where both widths are equal.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub heads: usize,
    pub cnn_preset: CnnPresetKind,
    pub vocab_size: usize,
    pub max_len: usize,
    pub image_hw: (usize, usize),
}

impl ModelConfig {
    pub fn new(variant: Variant, vocab_size: usize) -> Self {
        Self {
            variant,
            encoder_blocks: 1,
            decoder_blocks: 1,
            d_model: 128,
            d_ffn: 128,
            heads: 4,
            cnn_preset: CnnPresetKind::VggLite,
            vocab_size,
            max_len: 32,
            image_hw: (32, 96),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} must be divisible by 4 for the CNN channel ladder",
                self.d_model
            )));
        }
        if self.variant == Variant::Sheng && self.encoder_blocks < 1 {
            return Err(ModelError::BadConfig(
                "sheng variant needs at least one encoder block".into(),
            ));
        }
        if self.vocab_size < 4 {
            return Err(ModelError::BadConfig(format!(
                "vocab_size {} leaves no room for symbols plus specials",
                self.vocab_size
            )));
        }
        if self.max_len < 2 {
            return Err(ModelError::BadConfig("max_len below 2".into()));
        }
        if self.d_ffn == 0 || self.decoder_blocks == 0 {
            return Err(ModelError::BadConfig("zero-sized decoder".into()));
        }
        let (h, w) = self.image_hw;
        if h % 8 != 0 || w % 8 != 0 || h < 8 || w < 8 {
            return Err(ModelError::BadConfig(format!(
                "image {h}x{w} must be a multiple of 8 in both dimensions"
            )));
        }
        Ok(())
    }

    /// Width of the encoder output sequence (J).
    pub fn seq_width(&self) -> usize {
        self.image_hw.1 / 8
    }

    /// Fixed-order key=value serialization, also the digest input.
    pub fn canonical_text(&self) -> String {
        format!(
            "variant={}\nencoder_blocks={}\ndecoder_blocks={}\nd_model={}\nd_ffn={}\nheads={}\ncnn_preset={}\nvocab_size={}\nmax_len={}\nimage_h={}\nimage_w={}\n",
            self.variant.as_str(),
            self.encoder_blocks,
            self.decoder_blocks,
            self.d_model,
            self.d_ffn,
            self.heads,
            self.cnn_preset.as_str(),
            self.vocab_size,
            self.max_len,
            self.image_hw.0,
            self.image_hw.1,
        )
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_text().as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn sos_id(&self) -> usize {
        self.vocab_size - 3
    }

    pub fn eos_id(&self) -> usize {
        self.vocab_size - 2
    }

    pub fn pad_id(&self) -> usize {
        self.vocab_size - 1
    }
}

/// One step of the CNN feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CnnLayer {
    /// 3x3 conv, stride 1, pad 1, bias, relu; `residual` adds the layer
    /// input before the relu (requires in_ch == out_ch).
    Conv {
        in_ch: usize,
        out_ch: usize,
        residual: bool,
    },
    Pool {
        kh: usize,
        kw: usize,
    },
}

/// Layer list for a preset: three stages of two convs at channel widths
/// d/4, d/2, d with a 2x2 pool inside each stage, then a final pool that
/// collapses the remaining height so height x channels = d_model.
pub fn cnn_layers(config: &ModelConfig) -> Vec<CnnLayer> {
    let d = config.d_model;
    let (c1, c2, c3) = (d / 4, d / 2, d);
    let residual = config.cnn_preset == CnnPresetKind::ResnetLite;
    let h_final = config.image_hw.0 / 8;
    vec![
        CnnLayer::Conv { in_ch: 1, out_ch: c1, residual: false },
        CnnLayer::Pool { kh: 2, kw: 2 },
        CnnLayer::Conv { in_ch: c1, out_ch: c1, residual },
        CnnLayer::Conv { in_ch: c1, out_ch: c2, residual: false },
        CnnLayer::Pool { kh: 2, kw: 2 },
        CnnLayer::Conv { in_ch: c2, out_ch: c2, residual },
        CnnLayer::Conv { in_ch: c2, out_ch: c3, residual: false },
        CnnLayer::Pool { kh: 2, kw: 2 },
        CnnLayer::Conv { in_ch: c3, out_ch: c3, residual },
        CnnLayer::Pool { kh: h_final, kw: 1 },
    ]
}

fn insert_attention(
    params: &mut ParamSet,
    prefix: &str,
    d: usize,
    seed: u64,
) -> Result<(), NumericsError> {
    for w in ["wq", "wk", "wv", "wo"] {
        let name = format!("{prefix}.{w}");
        params.insert(&name, uniform_init(&[d, d], d, seed, &name))?;
    }
    for b in ["bq", "bk", "bv", "bo"] {
        params.insert(&format!("{prefix}.{b}"), Tensor::zeros(&[d]))?;
    }
    Ok(())
}

fn insert_ffn(
    params: &mut ParamSet,
    prefix: &str,
    d: usize,
    d_ffn: usize,
    seed: u64,
) -> Result<(), NumericsError> {
    let w1 = format!("{prefix}.w1");
    params.insert(&w1, uniform_init(&[d, d_ffn], d, seed, &w1))?;
    params.insert(&format!("{prefix}.b1"), Tensor::zeros(&[d_ffn]))?;
    let w2 = format!("{prefix}.w2");
    params.insert(&w2, uniform_init(&[d_ffn, d], d_ffn, seed, &w2))?;
    params.insert(&format!("{prefix}.b2"), Tensor::zeros(&[d]))?;
    Ok(())
}

fn insert_layer_norm(params: &mut ParamSet, prefix: &str, d: usize) -> Result<(), NumericsError> {
    params.insert(&format!("{prefix}.gain"), Tensor::full(&[d], 1.0))?;
    params.insert(&format!("{prefix}.bias"), Tensor::zeros(&[d]))?;
    Ok(())
}

/// Fresh parameters for a config. Initialization is a pure function of
/// (config, seed): each tensor draws from an RNG keyed by its own name.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet, ModelError> {
    config.validate()?;
    let mut params = ParamSet::new();
    let d = config.d_model;

    let mut conv_idx = 0usize;
    for layer in cnn_layers(config) {
        if let CnnLayer::Conv { in_ch, out_ch, .. } = layer {
            let w = format!("enc.cnn.{conv_idx}.w");
            params.insert(&w, uniform_init(&[out_ch, in_ch, 3, 3], in_ch * 9, seed, &w))?;
            params.insert(&format!("enc.cnn.{conv_idx}.b"), Tensor::zeros(&[out_ch]))?;
            conv_idx += 1;
        }
    }

    if config.variant == Variant::Sheng {
        for k in 0..config.encoder_blocks {
            let p = format!("enc.tblock.{k}");
            insert_attention(&mut params, &format!("{p}.attn"), d, seed)?;
            insert_layer_norm(&mut params, &format!("{p}.ln1"), d)?;
            insert_ffn(&mut params, &format!("{p}.ffn"), d, config.d_ffn, seed)?;
            insert_layer_norm(&mut params, &format!("{p}.ln2"), d)?;
        }
    }

    let v = config.vocab_size;
    params.insert("dec.embed", uniform_init(&[v, d], v, seed, "dec.embed"))?;
    for l in 0..config.decoder_blocks {
        let p = format!("dec.block.{l}");
        insert_attention(&mut params, &format!("{p}.self_attn"), d, seed)?;
        insert_layer_norm(&mut params, &format!("{p}.ln1"), d)?;
        insert_attention(&mut params, &format!("{p}.cross_attn"), d, seed)?;
        insert_layer_norm(&mut params, &format!("{p}.ln2"), d)?;
        insert_ffn(&mut params, &format!("{p}.ffn"), d, config.d_ffn, seed)?;
        insert_layer_norm(&mut params, &format!("{p}.ln3"), d)?;
    }
    params.insert("dec.proj.w", uniform_init(&[d, v], d, seed, "dec.proj.w"))?;
    params.insert("dec.proj.b", Tensor::zeros(&[v]))?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(Variant::Wang, 43);
        assert!(cfg.validate().is_ok());
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
        cfg.heads = 4;
        cfg.image_hw = (30, 96);
        assert!(cfg.validate().is_err());
        cfg.image_hw = (32, 96);
        cfg.variant = Variant::Sheng;
        cfg.encoder_blocks = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn wang_has_no_encoder_blocks_sheng_has_k() {
        let wang = init_params(&ModelConfig::new(Variant::Wang, 43), 1).unwrap();
        assert!(!wang.names().any(|n| n.starts_with("enc.tblock.")));

        let sheng = init_params(&ModelConfig::new(Variant::Sheng, 43), 1).unwrap();
        assert!(sheng.names().any(|n| n.starts_with("enc.tblock.0.")));
        assert!(!sheng.names().any(|n| n.starts_with("enc.tblock.1.")));
    }

    #[test]
    fn init_is_seed_and_name_stable() {
        let cfg = ModelConfig::new(Variant::Wang, 43);
        let a = init_params(&cfg, 9).unwrap();
        let b = init_params(&cfg, 9).unwrap();
        for (name, t) in a.iter() {
            assert!(t.bit_eq(b.get(name).unwrap()), "mismatch at {name}");
        }
        let c = init_params(&cfg, 10).unwrap();
        assert!(!a.get("dec.embed").unwrap().bit_eq(c.get("dec.embed").unwrap()));
    }

    #[test]
    fn digest_tracks_config_changes() {
        let a = ModelConfig::new(Variant::Wang, 43);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.d_model = 64;
        assert_ne!(a.digest(), b.digest());
    }
}
