//! Synthetic two-script text-image corpora and ingestion of external
//! cropped-image datasets.

mod generate;
pub mod glyphs;
mod io;
mod render;

use std::path::PathBuf;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::Tensor;
pub use generate::{generate_corpus, make_multilingual, union_charset};
pub use glyphs::{generated_glyphs, latin_like_glyphs, latin_like_symbols, Glyph, GLYPH_SIDE};
pub use io::{
    load_external_corpus, read_corpus_dir, read_pgm, write_corpus_dir, write_pgm, IngestReport,
};
pub use render::render_string;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("text is empty")]
    EmptyText,
    #[error("symbol id {0} is special or out of range")]
    UnknownSymbol(usize),
    #[error("bad corpus spec: {0}")]
    BadSpec(String),
    #[error("vocabulary clash: {0}")]
    VocabClash(String),
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("charset `{0}` has no glyphs and cannot render")]
    NotRenderable(String),
    #[error("malformed data: {0}")]
    DataFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A writing system: ordered symbol ids, their glyph bitmaps, and the
/// three special tokens (SOS, EOS, PAD) occupying the last vocabulary
/// slots after the symbols.
///
/// Charsets loaded from a corpus directory carry no glyphs; they can
/// drive training and evaluation but not rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct Charset {
    pub language_id: String,
    pub symbols: Vec<String>,
    pub glyphs: Vec<Glyph>,
}

impl Charset {
    pub fn new(
        language_id: &str,
        symbols: Vec<String>,
        glyphs: Vec<Glyph>,
    ) -> Result<Self, CorpusError> {
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.starts_with('#') || s.contains(char::is_whitespace) {
                return Err(CorpusError::DataFormat(format!(
                    "symbol id {i:?} invalid: `{s}`"
                )));
            }
            if symbols[i + 1..].contains(s) {
                return Err(CorpusError::VocabClash(format!("duplicate symbol id `{s}`")));
            }
        }
        if !glyphs.is_empty() {
            if glyphs.len() != symbols.len() {
                return Err(CorpusError::DataFormat(format!(
                    "{} glyphs for {} symbols",
                    glyphs.len(),
                    symbols.len()
                )));
            }
            for (i, g) in glyphs.iter().enumerate() {
                if g.popcount() < 4 {
                    return Err(CorpusError::DataFormat(format!("glyph {i} below 4 set cells")));
                }
                if glyphs[i + 1..].contains(g) {
                    return Err(CorpusError::DataFormat(format!("glyph {i} duplicated")));
                }
            }
        }
        Ok(Self {
            language_id: language_id.to_string(),
            symbols,
            glyphs,
        })
    }

    /// The fixed 36-glyph Latin-like charset (resource-rich stand-in).
    pub fn latin_like() -> Self {
        Self::new("latin", latin_like_symbols(), latin_like_glyphs())
            .expect("builtin charset is valid")
    }

    /// A procedurally generated charset of `n` glyphs (resource-poor
    /// stand-in). Symbol ids are `{language_id}00`, `{language_id}01`, ...
    pub fn generated(language_id: &str, n: usize, seed: u64) -> Self {
        let symbols = (0..n).map(|i| format!("{language_id}{i:02}")).collect();
        Self::new(language_id, symbols, generated_glyphs(n, seed))
            .expect("generated glyphs satisfy invariants by construction")
    }

    pub fn n_symbols(&self) -> usize {
        self.symbols.len()
    }

    /// Symbols plus the three specials.
    pub fn vocab_size(&self) -> usize {
        self.symbols.len() + 3
    }

    pub fn sos_id(&self) -> usize {
        self.symbols.len()
    }

    pub fn eos_id(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn pad_id(&self) -> usize {
        self.symbols.len() + 2
    }

    /// Indices of SOS, EOS, PAD.
    pub fn specials(&self) -> [usize; 3] {
        [self.sos_id(), self.eos_id(), self.pad_id()]
    }

    pub fn is_renderable(&self) -> bool {
        !self.glyphs.is_empty()
    }

    /// Canonical one-symbol-per-line serialization ending with the three
    /// special markers; also the byte stream the digest is taken over.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for s in &self.symbols {
            out.push_str(s);
            out.push('\n');
        }
        out.push_str("#SOS\n#EOS\n#PAD\n");
        out
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_text().as_bytes());
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// One labeled text image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Grayscale image, shape (1, H, W), values in [0, 1].
    pub image: Tensor,
    /// Non-special symbol ids, length within the corpus len_range.
    pub label: Vec<usize>,
    pub language_id: String,
}

/// Distortions applied at render time, all drawn per sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistortionSpec {
    pub rotate_deg_max: f32,
    pub curve_amp_px: f32,
    pub blur_sigma_max: f32,
    pub noise_std: f32,
    pub enabled: bool,
}

impl Default for DistortionSpec {
    fn default() -> Self {
        Self {
            rotate_deg_max: 15.0,
            curve_amp_px: 3.0,
            blur_sigma_max: 1.0,
            noise_std: 0.05,
            enabled: true,
        }
    }
}

impl DistortionSpec {
    pub fn none() -> Self {
        Self {
            rotate_deg_max: 0.0,
            curve_amp_px: 0.0,
            blur_sigma_max: 0.0,
            noise_std: 0.0,
            enabled: false,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.rotate_deg_max < 0.0
            || self.curve_amp_px < 0.0
            || self.blur_sigma_max < 0.0
            || self.noise_std < 0.0
        {
            return Err(CorpusError::BadSpec(
                "distortion magnitudes must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Everything needed to generate one corpus deterministically.
#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub charset: Charset,
    pub n_samples: usize,
    pub image_hw: (usize, usize),
    pub len_range: (usize, usize),
    pub distortion: DistortionSpec,
    pub split_ratio: f64,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn new(charset: Charset, n_samples: usize, seed: u64) -> Self {
        Self {
            charset,
            n_samples,
            image_hw: (32, 96),
            len_range: (1, 10),
            distortion: DistortionSpec::default(),
            split_ratio: 0.9,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.n_samples < 10 {
            return Err(CorpusError::BadSpec(format!(
                "n_samples {} below minimum 10",
                self.n_samples
            )));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(CorpusError::BadSpec(format!(
                "split_ratio {} outside (0, 1)",
                self.split_ratio
            )));
        }
        if self.len_range.0 < 1 || self.len_range.0 > self.len_range.1 {
            return Err(CorpusError::BadSpec(format!(
                "len_range {:?} invalid",
                self.len_range
            )));
        }
        if self.image_hw.0 < GLYPH_SIDE || self.image_hw.1 < GLYPH_SIDE {
            return Err(CorpusError::BadSpec(format!(
                "image {:?} smaller than a glyph",
                self.image_hw
            )));
        }
        self.distortion.validate()?;
        if !self.charset.is_renderable() {
            return Err(CorpusError::NotRenderable(self.charset.language_id.clone()));
        }
        Ok(())
    }
}
