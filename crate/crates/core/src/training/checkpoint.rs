//! Binary checkpoint files.
//!
//! Layout: magic `XSTR`, format version u32 LE, a length-prefixed UTF-8
//! metadata block of key=value lines, then the tensor table — per
//! tensor: name length u32 LE, UTF-8 name, rank u32 LE, dims u64 LE
//! each, raw IEEE-754 f32 LE payload. Tensors appear in name order. The
//! checkpoint digest is SHA-256 over the tensor table bytes.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::TrainError;
use crate::corpus::hex_string;
use crate::model::{CnnPresetKind, ModelConfig, Variant};
use crate::params::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"XSTR";
const VERSION: u32 = 1;

/// Which training phase produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    MultilingualPretrain,
    RpPretrain,
    Finetune,
    Baseline,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::MultilingualPretrain => "multilingual-pretrain",
            Phase::RpPretrain => "rp-pretrain",
            Phase::Finetune => "finetune",
            Phase::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self, TrainError> {
        match s {
            "multilingual-pretrain" => Ok(Phase::MultilingualPretrain),
            "rp-pretrain" => Ok(Phase::RpPretrain),
            "finetune" => Ok(Phase::Finetune),
            "baseline" => Ok(Phase::Baseline),
            other => Err(TrainError::CheckpointFormat(format!(
                "unknown phase `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub phase: Phase,
    /// Digests of the checkpoints this one was initialized from.
    pub parents: Vec<String>,
    pub config: ModelConfig,
    pub charset_digest: String,
    pub seed: u64,
    /// Best-validation epoch the parameters were taken from (1-based).
    pub epoch: usize,
    pub val_accuracy: f32,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub meta: CheckpointMeta,
}

fn tensor_table_bytes(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

impl Checkpoint {
    /// SHA-256 over the tensor table.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(tensor_table_bytes(&self.params));
        hex_string(&hasher.finalize())
    }

    fn meta_block(&self) -> String {
        let m = &self.meta;
        let mut s = String::new();
        s.push_str(&format!("phase={}\n", m.phase.as_str()));
        s.push_str(&format!("parents={}\n", m.parents.join(",")));
        s.push_str(&format!("config_digest={}\n", m.config.digest()));
        s.push_str(&format!("charset_digest={}\n", m.charset_digest));
        s.push_str(&format!("seed={}\n", m.seed));
        s.push_str(&format!("epoch={}\n", m.epoch));
        s.push_str(&format!("val_accuracy={}\n", m.val_accuracy));
        for line in m.config.canonical_text().lines() {
            s.push_str(&format!("config.{line}\n"));
        }
        s
    }

    /// Atomic write: temp file in the target directory, then rename.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        let meta = self.meta_block().into_bytes();
        bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&meta);
        bytes.extend_from_slice(&tensor_table_bytes(&self.params));

        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path)?;
        let fail = |msg: &str| TrainError::CheckpointFormat(format!("{}: {msg}", path.display()));
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + meta_len {
            return Err(fail("metadata truncated"));
        }
        let meta_text = std::str::from_utf8(&bytes[12..12 + meta_len])
            .map_err(|_| fail("metadata not UTF-8"))?;
        let meta = parse_meta(meta_text).map_err(|m| fail(&m))?;

        let mut pos = 12 + meta_len;
        let mut params = ParamSet::new();
        while pos < bytes.len() {
            let take_u32 = |pos: &mut usize| -> Result<u32, TrainError> {
                if *pos + 4 > bytes.len() {
                    return Err(fail("tensor table truncated"));
                }
                let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
                *pos += 4;
                Ok(v)
            };
            let name_len = take_u32(&mut pos)? as usize;
            if pos + name_len > bytes.len() {
                return Err(fail("tensor name truncated"));
            }
            let name = std::str::from_utf8(&bytes[pos..pos + name_len])
                .map_err(|_| fail("tensor name not UTF-8"))?
                .to_string();
            pos += name_len;
            let rank = take_u32(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                if pos + 8 > bytes.len() {
                    return Err(fail("dims truncated"));
                }
                shape.push(u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize);
                pos += 8;
            }
            let numel: usize = shape.iter().product();
            if pos + numel * 4 > bytes.len() {
                return Err(fail("payload truncated"));
            }
            let data: Vec<f32> = bytes[pos..pos + numel * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += numel * 4;
            let tensor = Tensor::new(shape, data).map_err(|e| fail(&e.to_string()))?;
            params.insert(&name, tensor).map_err(|e| fail(&e.to_string()))?;
        }
        Ok(Checkpoint { params, meta })
    }
}

fn parse_meta(text: &str) -> Result<CheckpointMeta, String> {
    let mut map = std::collections::HashMap::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("bad line `{line}`"))?;
        map.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| map.get(k).cloned().ok_or_else(|| format!("missing `{k}`"));
    let config = ModelConfig {
        variant: Variant::parse(&get("config.variant")?).map_err(|e| e.to_string())?,
        encoder_blocks: get("config.encoder_blocks")?.parse().map_err(|_| "encoder_blocks")?,
        decoder_blocks: get("config.decoder_blocks")?.parse().map_err(|_| "decoder_blocks")?,
        d_model: get("config.d_model")?.parse().map_err(|_| "d_model")?,
        d_ffn: get("config.d_ffn")?.parse().map_err(|_| "d_ffn")?,
        heads: get("config.heads")?.parse().map_err(|_| "heads")?,
        cnn_preset: CnnPresetKind::parse(&get("config.cnn_preset")?).map_err(|e| e.to_string())?,
        vocab_size: get("config.vocab_size")?.parse().map_err(|_| "vocab_size")?,
        max_len: get("config.max_len")?.parse().map_err(|_| "max_len")?,
        image_hw: (
            get("config.image_h")?.parse().map_err(|_| "image_h")?,
            get("config.image_w")?.parse().map_err(|_| "image_w")?,
        ),
    };
    let parents: Vec<String> = {
        let raw = get("parents")?;
        if raw.is_empty() {
            Vec::new()
        } else {
            raw.split(',').map(String::from).collect()
        }
    };
    Ok(CheckpointMeta {
        phase: Phase::parse(&get("phase")?).map_err(|e| e.to_string())?,
        parents,
        config,
        charset_digest: get("charset_digest")?,
        seed: get("seed")?.parse().map_err(|_| "seed")?,
        epoch: get("epoch")?.parse().map_err(|_| "epoch")?,
        val_accuracy: get("val_accuracy")?.parse().map_err(|_| "val_accuracy")?,
    })
}
