//! Line-oriented configuration files: `section.key = value`, `#`
//! comments, UTF-8. Unknown keys are errors so typos fail fast.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::corpus::{Charset, CorpusSpec, DistortionSpec};
use crate::model::{CnnPresetKind, ModelConfig, ModelError, Variant};
use crate::training::{EarlyStopConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("missing config key `{0}`")]
    MissingKey(String),
    #[error("bad value for `{key}`: {detail}")]
    BadValue { key: String, detail: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    BadLine { line: usize, text: String },
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Parsed key/value pairs with consumption tracking; call [`finish`]
/// after extraction to reject keys nothing claimed.
///
/// [`finish`]: Reader::finish
pub struct Reader {
    values: BTreeMap<String, String>,
    consumed: std::collections::BTreeSet<String>,
}

impl Reader {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::BadLine {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let key = k.trim().to_string();
            let value = v.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::BadLine {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(ConfigError::DuplicateKey(key));
            }
        }
        Ok(Self {
            values,
            consumed: Default::default(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.consumed.insert(key.to_string());
        self.values.get(key).cloned()
    }

    pub fn opt_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| ConfigError::BadValue {
                key: key.to_string(),
                detail: e.to_string(),
            }),
        }
    }

    pub fn parsed_or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.opt_parsed(key)?.unwrap_or(default))
    }

    pub fn require<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.opt_parsed(key)?
            .ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    pub fn string_or(&mut self, key: &str, default: &str) -> String {
        self.take(key).unwrap_or_else(|| default.to_string())
    }

    /// Reject any key no extractor consumed.
    pub fn finish(self) -> Result<(), ConfigError> {
        for key in self.values.keys() {
            if !self.consumed.contains(key) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        Ok(())
    }
}

/// Corpus-generation spec file (`gen-data --spec`): charset.*,
/// corpus.*, distortion.* sections.
pub struct DataSpec {
    pub spec: CorpusSpec,
}

impl DataSpec {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut r = Reader::from_file(path)?;
        Self::extract(&mut r).and_then(|s| {
            r.finish()?;
            Ok(s)
        })
    }

    fn extract(r: &mut Reader) -> Result<Self, ConfigError> {
        let kind = r.string_or("charset.kind", "generated");
        let charset = match kind.as_str() {
            "latin" => Charset::latin_like(),
            "generated" => {
                let language_id = r.string_or("charset.language_id", "rp");
                let n: usize = r.parsed_or("charset.n_symbols", 40)?;
                let seed: u64 = r.parsed_or("charset.seed", 7)?;
                Charset::generated(&language_id, n, seed)
            }
            other => {
                return Err(ConfigError::BadValue {
                    key: "charset.kind".into(),
                    detail: format!("expected latin|generated, got `{other}`"),
                })
            }
        };
        let mut spec = CorpusSpec::new(charset, r.require("corpus.n_samples")?, r.parsed_or("corpus.seed", 42)?);
        spec.image_hw = (
            r.parsed_or("corpus.image_h", 32)?,
            r.parsed_or("corpus.image_w", 96)?,
        );
        spec.len_range = (
            r.parsed_or("corpus.len_min", 1)?,
            r.parsed_or("corpus.len_max", 10)?,
        );
        spec.split_ratio = r.parsed_or("corpus.split_ratio", 0.9)?;
        spec.distortion = distortion_from(r)?;
        Ok(Self { spec })
    }
}

fn distortion_from(r: &mut Reader) -> Result<DistortionSpec, ConfigError> {
    let defaults = DistortionSpec::default();
    Ok(DistortionSpec {
        rotate_deg_max: r.parsed_or("distortion.rotate_deg_max", defaults.rotate_deg_max)?,
        curve_amp_px: r.parsed_or("distortion.curve_amp_px", defaults.curve_amp_px)?,
        blur_sigma_max: r.parsed_or("distortion.blur_sigma_max", defaults.blur_sigma_max)?,
        noise_std: r.parsed_or("distortion.noise_std", defaults.noise_std)?,
        enabled: r.parsed_or("distortion.enabled", defaults.enabled)?,
    })
}

/// Study configuration shared by `train`, `pipeline`, and `ablate`:
/// both corpora, the model, per-phase training settings, and seeds.
#[derive(Clone, Debug)]
pub struct StudyConfig {
    pub corpus_seed: u64,
    pub image_hw: (usize, usize),
    pub len_range: (usize, usize),
    pub distortion: DistortionSpec,
    pub rp_symbols: usize,
    pub rp_glyph_seed: u64,
    pub rp_n: usize,
    pub rp_split: f64,
    pub rr_n: usize,
    pub rr_split: f64,
    /// vocab_size is set for the resource-poor charset; union phases
    /// override it.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: TrainConfig,
    pub seeds: Vec<u64>,
}

impl StudyConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut r = Reader::from_file(path)?;
        let cfg = Self::extract(&mut r)?;
        r.finish()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut r = Reader::parse(text)?;
        let cfg = Self::extract(&mut r)?;
        r.finish()?;
        Ok(cfg)
    }

    fn extract(r: &mut Reader) -> Result<Self, ConfigError> {
        let rp_symbols: usize = r.parsed_or("corpus.rp_symbols", 40)?;

        let variant = Variant::parse(&r.string_or("model.variant", "wang"))?;
        let cnn_preset = CnnPresetKind::parse(&r.string_or("model.cnn_preset", "vgg-lite"))?;
        let image_hw = (
            r.parsed_or("corpus.image_h", 32)?,
            r.parsed_or("corpus.image_w", 96)?,
        );
        let mut model = ModelConfig::new(variant, rp_symbols + 3);
        model.cnn_preset = cnn_preset;
        model.encoder_blocks = r.parsed_or("model.encoder_blocks", 1)?;
        model.decoder_blocks = r.parsed_or("model.decoder_blocks", 1)?;
        model.d_model = r.parsed_or("model.d_model", 128)?;
        model.d_ffn = r.parsed_or("model.d_ffn", model.d_model)?;
        model.heads = r.parsed_or("model.heads", 4)?;
        model.max_len = r.parsed_or("model.max_len", 32)?;
        model.image_hw = image_hw;
        model.validate()?;

        let mut train = TrainConfig::new(r.parsed_or("train.max_epochs", 15)?, 0);
        train.lr = r.parsed_or("train.lr", 0.01)?;
        train.batch_size = r.parsed_or("train.batch_size", 16)?;
        train.shuffle = r.parsed_or("train.shuffle", true)?;
        train.early_stop = EarlyStopConfig {
            val_fraction: r.parsed_or("train.val_fraction", 0.1)?,
            patience: r.parsed_or("train.patience", 5)?,
        };

        let mut pretrain = train;
        pretrain.max_epochs = r.parsed_or("pretrain.max_epochs", train.max_epochs)?;
        pretrain.batch_size = r.parsed_or("pretrain.batch_size", train.batch_size)?;
        pretrain.early_stop.patience = r.parsed_or("pretrain.patience", train.early_stop.patience)?;

        let n_seeds: usize = r.parsed_or("pipeline.seeds", 3)?;
        let base_seed: u64 = r.parsed_or("pipeline.base_seed", 1000)?;
        let seeds = (0..n_seeds as u64).map(|i| base_seed + i).collect();

        Ok(Self {
            corpus_seed: r.parsed_or("corpus.seed", 42)?,
            image_hw,
            len_range: (
                r.parsed_or("corpus.len_min", 1)?,
                r.parsed_or("corpus.len_max", 10)?,
            ),
            distortion: distortion_from(r)?,
            rp_symbols,
            rp_glyph_seed: r.parsed_or("corpus.rp_glyph_seed", 7)?,
            rp_n: r.parsed_or("corpus.rp_n", 2400)?,
            rp_split: r.parsed_or("corpus.rp_split", 0.9)?,
            rr_n: r.parsed_or("corpus.rr_n", 22222)?,
            rr_split: r.parsed_or("corpus.rr_split", 0.9)?,
            model,
            train,
            pretrain,
            seeds,
        })
    }

    pub fn rp_spec(&self) -> CorpusSpec {
        let charset = Charset::generated("rp", self.rp_symbols, self.rp_glyph_seed);
        let mut spec = CorpusSpec::new(charset, self.rp_n, self.corpus_seed);
        spec.image_hw = self.image_hw;
        spec.len_range = self.len_range;
        spec.split_ratio = self.rp_split;
        spec.distortion = self.distortion;
        spec
    }

    pub fn rr_spec(&self) -> CorpusSpec {
        let mut spec = CorpusSpec::new(
            Charset::latin_like(),
            self.rr_n,
            // distinct stream from the rp corpus
            crate::seeds::derive_seed(self.corpus_seed, 0x7272, 0),
        );
        spec.image_hw = self.image_hw;
        spec.len_range = self.len_range;
        spec.split_ratio = self.rr_split;
        spec.distortion = self.distortion;
        spec
    }
}
