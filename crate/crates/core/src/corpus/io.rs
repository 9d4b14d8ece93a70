//! On-disk corpus layout and external dataset ingestion.
//!
//! A corpus directory holds `images/{index}.pgm` (binary PGM, maxval
//! 255), `labels.tsv` (index TAB space-separated symbol ids TAB
//! language id) and `charset.txt` (one symbol id per line, then the
//! three special markers). All writers emit byte-identical files for
//! identical inputs on every platform.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Charset, CorpusError, Sample};
use crate::tensor::Tensor;

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<(), CorpusError> {
    let (h, w) = image_hw(image)?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor, CorpusError> {
    let bytes = fs::read(path).map_err(|_| CorpusError::MissingFile(path.to_path_buf()))?;
    parse_pgm(&bytes).map_err(|e| CorpusError::DataFormat(format!("{}: {e}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> Result<Tensor, String> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
    }
    if fields[0] != "P5" {
        return Err(format!("expected P5 magic, got {}", fields[0]));
    }
    let w: usize = fields[1].parse().map_err(|_| "bad width")?;
    let h: usize = fields[2].parse().map_err(|_| "bad height")?;
    let maxval: usize = fields[3].parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + h * w {
        return Err("pixel data truncated".into());
    }
    let data = bytes[pos..pos + h * w]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Tensor::new(vec![1, h, w], data).map_err(|e| e.to_string())
}

fn image_hw(image: &Tensor) -> Result<(usize, usize), CorpusError> {
    if image.rank() != 3 || image.shape()[0] != 1 {
        return Err(CorpusError::DataFormat(format!(
            "expected (1, H, W) image, got {:?}",
            image.shape()
        )));
    }
    Ok((image.shape()[1], image.shape()[2]))
}

/// Write samples plus their charset into the standard directory layout.
pub fn write_corpus_dir(
    dir: &Path,
    samples: &[Sample],
    charset: &Charset,
) -> Result<(), CorpusError> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut labels = String::new();
    for (i, sample) in samples.iter().enumerate() {
        write_pgm(&images.join(format!("{i}.pgm")), &sample.image)?;
        let ids: Vec<String> = sample.label.iter().map(|id| id.to_string()).collect();
        labels.push_str(&format!(
            "{i}\t{}\t{}\n",
            ids.join(" "),
            sample.language_id
        ));
    }
    let mut f = fs::File::create(dir.join("labels.tsv"))?;
    f.write_all(labels.as_bytes())?;
    fs::write(dir.join("charset.txt"), charset.canonical_text())?;
    Ok(())
}

/// Read a directory written by [`write_corpus_dir`]. The returned
/// charset has no glyphs (it cannot render, only train/evaluate).
pub fn read_corpus_dir(dir: &Path) -> Result<(Vec<Sample>, Charset), CorpusError> {
    let charset_path = dir.join("charset.txt");
    let text = fs::read_to_string(&charset_path)
        .map_err(|_| CorpusError::MissingFile(charset_path.clone()))?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() < 3 || lines[lines.len() - 3..] != ["#SOS", "#EOS", "#PAD"] {
        return Err(CorpusError::DataFormat(format!(
            "{}: missing special markers",
            charset_path.display()
        )));
    }
    let symbols: Vec<String> = lines[..lines.len() - 3].iter().map(|s| s.to_string()).collect();

    let labels_path = dir.join("labels.tsv");
    let labels_text = fs::read_to_string(&labels_path)
        .map_err(|_| CorpusError::MissingFile(labels_path.clone()))?;
    let mut samples = Vec::new();
    let mut language_id = String::new();
    for (lineno, line) in labels_text.lines().enumerate() {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(CorpusError::DataFormat(format!(
                "labels.tsv line {}: expected 3 tab fields",
                lineno + 1
            )));
        }
        let index: usize = parts[0]
            .parse()
            .map_err(|_| CorpusError::DataFormat(format!("labels.tsv line {}", lineno + 1)))?;
        let label: Vec<usize> = parts[1]
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| CorpusError::DataFormat(format!("bad id `{s}`")))
            })
            .collect::<Result<_, _>>()?;
        for &id in &label {
            if id >= symbols.len() {
                return Err(CorpusError::UnknownSymbol(id));
            }
        }
        let image = read_pgm(&dir.join("images").join(format!("{index}.pgm")))?;
        if language_id.is_empty() {
            language_id = parts[2].to_string();
        }
        samples.push(Sample {
            image,
            label,
            language_id: parts[2].to_string(),
        });
    }
    let charset = Charset::new(
        if language_id.is_empty() { "unknown" } else { &language_id },
        symbols,
        Vec::new(),
    )?;
    Ok((samples, charset))
}

/// Outcome of external ingestion: accepted samples plus counters for
/// skipped inputs.
#[derive(Debug)]
pub struct IngestReport {
    pub samples: Vec<Sample>,
    /// Labels containing out-of-charset characters.
    pub excluded_labels: usize,
    /// Images that were missing or failed to decode.
    pub undecodable: usize,
}

/// Ingest an external cropped-image dataset.
///
/// `labels_file` maps image filename to a UTF-8 label, one
/// `name<TAB>label` pair per line; every character of the label must be
/// a symbol id of `charset` or the sample is excluded. Images resize to
/// `target_hw` preserving aspect ratio, anchored top-left and padded
/// with background.
pub fn load_external_corpus(
    images_dir: &Path,
    labels_file: &Path,
    charset: &Charset,
    target_hw: (usize, usize),
) -> Result<IngestReport, CorpusError> {
    if !images_dir.is_dir() {
        return Err(CorpusError::MissingFile(images_dir.to_path_buf()));
    }
    let text = fs::read_to_string(labels_file)
        .map_err(|_| CorpusError::MissingFile(labels_file.to_path_buf()))?;
    let mut report = IngestReport {
        samples: Vec::new(),
        excluded_labels: 0,
        undecodable: 0,
    };
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (name, label_text) = match line.split_once('\t') {
            Some(pair) => pair,
            None => {
                return Err(CorpusError::DataFormat(format!(
                    "labels line without TAB: `{line}`"
                )))
            }
        };
        let label = match map_label(label_text, charset) {
            Some(ids) => ids,
            None => {
                report.excluded_labels += 1;
                continue;
            }
        };
        let path = images_dir.join(name);
        let image = match decode_grayscale(&path) {
            Ok(img) => img,
            Err(_) => {
                report.undecodable += 1;
                continue;
            }
        };
        report.samples.push(Sample {
            image: resize_pad(&image, target_hw),
            label,
            language_id: charset.language_id.clone(),
        });
    }
    Ok(report)
}

fn map_label(text: &str, charset: &Charset) -> Option<Vec<usize>> {
    if text.is_empty() {
        return None;
    }
    text.chars()
        .map(|c| {
            let s = c.to_string();
            charset.symbols.iter().position(|sym| *sym == s)
        })
        .collect()
}

fn decode_grayscale(path: &Path) -> Result<Tensor, CorpusError> {
    if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
        return read_pgm(path);
    }
    let img = image::open(path)
        .map_err(|e| CorpusError::DataFormat(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Tensor::new(vec![1, h, w], data)
        .map_err(|e| CorpusError::DataFormat(e.to_string()))
}

/// Scale to fit inside `target`, preserving aspect ratio, then pad the
/// right/bottom with background (0.0).
pub fn resize_pad(image: &Tensor, target: (usize, usize)) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (th, tw) = target;
    let scale = (th as f64 / h as f64).min(tw as f64 / w as f64);
    let oh = ((h as f64 * scale).round() as usize).clamp(1, th);
    let ow = ((w as f64 * scale).round() as usize).clamp(1, tw);
    let mut out = Tensor::zeros(&[1, th, tw]);
    let sd = image.data();
    for y in 0..oh {
        for x in 0..ow {
            // map output pixel center back into the source
            let sy = ((y as f64 + 0.5) * h as f64 / oh as f64 - 0.5).max(0.0);
            let sx = ((x as f64 + 0.5) * w as f64 / ow as f64 - 0.5).max(0.0);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = (sy - y0 as f64) as f32;
            let fx = (sx - x0 as f64) as f32;
            let v = sd[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                + sd[y0 * w + x1] * (1.0 - fy) * fx
                + sd[y1 * w + x0] * fy * (1.0 - fx)
                + sd[y1 * w + x1] * fy * fx;
            out.data_mut()[y * tw + x] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec, DistortionSpec};

    fn tiny_corpus() -> (Vec<Sample>, Charset) {
        let mut spec = CorpusSpec::new(Charset::generated("rp", 6, 1), 12, 5);
        spec.image_hw = (16, 48);
        spec.len_range = (1, 3);
        spec.distortion = DistortionSpec::none();
        let (train, _) = generate_corpus(&spec).unwrap();
        (train, spec.charset)
    }

    #[test]
    fn pgm_round_trip_preserves_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (samples, _) = tiny_corpus();
        let path = dir.path().join("x.pgm");
        write_pgm(&path, &samples[0].image).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), samples[0].image.shape());
        for (a, b) in back.data().iter().zip(samples[0].image.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn corpus_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (samples, charset) = tiny_corpus();
        write_corpus_dir(dir.path(), &samples, &charset).unwrap();
        let (back, cs) = read_corpus_dir(dir.path()).unwrap();
        assert_eq!(back.len(), samples.len());
        assert_eq!(cs.symbols, charset.symbols);
        assert_eq!(cs.vocab_size(), charset.vocab_size());
        for (a, b) in back.iter().zip(&samples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.language_id, b.language_id);
        }
        // canonical charset bytes are stable
        let text = std::fs::read_to_string(dir.path().join("charset.txt")).unwrap();
        assert!(text.ends_with("#SOS\n#EOS\n#PAD\n"));
    }

    #[test]
    fn external_ingest_excludes_bad_labels_and_counts_undecodable() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        std::fs::create_dir_all(&images).unwrap();
        let charset = Charset::latin_like();

        let img = Tensor::full(&[1, 10, 20], 0.8);
        write_pgm(&images.join("a.pgm"), &img).unwrap();
        write_pgm(&images.join("b.pgm"), &img).unwrap();
        std::fs::write(images.join("c.pgm"), b"not a pgm").unwrap();

        let labels = dir.path().join("labels.tsv");
        std::fs::write(&labels, "a.pgm\tAB\nb.pgm\tA?\nc.pgm\tZ\n").unwrap();

        let report = load_external_corpus(&images, &labels, &charset, (32, 96)).unwrap();
        assert_eq!(report.samples.len(), 1);
        assert_eq!(report.excluded_labels, 1);
        assert_eq!(report.undecodable, 1);
        assert_eq!(report.samples[0].label, vec![0, 1]);
        assert_eq!(report.samples[0].image.shape(), &[1, 32, 96]);
    }

    #[test]
    fn empty_labels_file_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        std::fs::create_dir_all(&images).unwrap();
        let labels = dir.path().join("labels.tsv");
        std::fs::write(&labels, "").unwrap();
        let report =
            load_external_corpus(&images, &labels, &Charset::latin_like(), (32, 96)).unwrap();
        assert!(report.samples.is_empty());
    }

    #[test]
    fn resize_pads_right_with_background() {
        // 48x48 checkerboard into (32, 96): scaled to 32x32, right-padded
        let mut src = Tensor::zeros(&[1, 48, 48]);
        let mut ink = 0usize;
        for y in 0..48 {
            for x in 0..48 {
                if (y / 4 + x / 4) % 2 == 0 {
                    src.data_mut()[y * 48 + x] = 1.0;
                    ink += 1;
                }
            }
        }
        let out = resize_pad(&src, (32, 96));
        assert_eq!(out.shape(), &[1, 32, 96]);
        // padded region is pure background
        for y in 0..32 {
            for x in 32..96 {
                assert_eq!(out.data()[y * 96 + x], 0.0);
            }
        }
        // pixel-count oracle: mean intensity of the content region matches
        // the source ink fraction (checkerboard is scale-invariant)
        let src_fraction = ink as f32 / (48.0 * 48.0);
        let mut content_sum = 0.0f32;
        for y in 0..32 {
            for x in 0..32 {
                content_sum += out.data()[y * 96 + x];
            }
        }
        let content_mean = content_sum / (32.0 * 32.0);
        assert!(
            (content_mean - src_fraction).abs() < 0.05,
            "mean {content_mean} vs fraction {src_fraction}"
        );
    }

    #[test]
    fn missing_inputs_are_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let charset = Charset::latin_like();
        let err = load_external_corpus(
            &dir.path().join("nope"),
            &dir.path().join("labels.tsv"),
            &charset,
            (32, 96),
        );
        assert!(matches!(err, Err(CorpusError::MissingFile(_))));
    }
}
