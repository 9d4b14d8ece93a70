//! Corpus generation and the multilingual union.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::{render_string, Charset, CorpusError, CorpusSpec, Sample};
use crate::seeds::derive_seed;

/// Generate a full corpus and split it train/test.
///
/// Sample `i` is a pure function of (spec, i): labels come from one
/// counter-derived stream, render distortions from another, so repeated
/// calls yield byte-identical corpora and train/test never share a
/// sample seed. Split sizes are round(n * ratio) / remainder.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<(Vec<Sample>, Vec<Sample>), CorpusError> {
    spec.validate()?;
    let n = spec.n_samples;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut label_rng = ChaCha12Rng::seed_from_u64(derive_seed(spec.seed, i as u64, 0));
        let len = label_rng.gen_range(spec.len_range.0..=spec.len_range.1);
        let label: Vec<usize> = (0..len)
            .map(|_| label_rng.gen_range(0..spec.charset.n_symbols()))
            .collect();
        let image = render_string(
            &label,
            &spec.charset,
            spec,
            derive_seed(spec.seed, i as u64, 1),
        )?;
        samples.push(Sample {
            image,
            label,
            language_id: spec.charset.language_id.clone(),
        });
    }
    let n_train = (n as f64 * spec.split_ratio).round() as usize;
    let test = samples.split_off(n_train);
    Ok((samples, test))
}

/// Union vocabulary: resource-poor symbols first, then resource-rich,
/// with one shared set of specials at the end.
pub fn union_charset(rp: &Charset, rr: &Charset) -> Result<Charset, CorpusError> {
    let mut symbols = rp.symbols.clone();
    for s in &rr.symbols {
        if symbols.contains(s) {
            return Err(CorpusError::VocabClash(format!(
                "symbol `{s}` present in both `{}` and `{}`",
                rp.language_id, rr.language_id
            )));
        }
        symbols.push(s.clone());
    }
    let glyphs = if rp.glyphs.len() == rp.symbols.len() && rr.glyphs.len() == rr.symbols.len() {
        let mut g = rp.glyphs.clone();
        g.extend(rr.glyphs.iter().copied());
        g
    } else {
        Vec::new()
    };
    let language_id = format!("{}+{}", rp.language_id, rr.language_id);
    // Bypass Charset::new glyph-distinctness validation: the union is a
    // model vocabulary, never rendered from, and two independent scripts
    // may collide on a bitmap without harming training.
    Ok(Charset {
        language_id,
        symbols,
        glyphs,
    })
}

/// Concatenate the two corpora into one multilingual training set over
/// the union vocabulary. Resource-poor labels keep their ids (their
/// symbols come first in the union); resource-rich labels shift up by
/// the resource-poor symbol count. No sample is dropped or duplicated
/// and each carries equal weight.
pub fn make_multilingual(
    rp: &[Sample],
    rr: &[Sample],
    rp_charset: &Charset,
    rr_charset: &Charset,
) -> Result<(Vec<Sample>, Charset), CorpusError> {
    let union = union_charset(rp_charset, rr_charset)?;
    let offset = rp_charset.n_symbols();
    let mut out = Vec::with_capacity(rp.len() + rr.len());
    for s in rp {
        for &id in &s.label {
            if id >= rp_charset.n_symbols() {
                return Err(CorpusError::UnknownSymbol(id));
            }
        }
        out.push(s.clone());
    }
    for s in rr {
        for &id in &s.label {
            if id >= rr_charset.n_symbols() {
                return Err(CorpusError::UnknownSymbol(id));
            }
        }
        let mut s2 = s.clone();
        for id in &mut s2.label {
            *id += offset;
        }
        out.push(s2);
    }
    Ok((out, union))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DistortionSpec;

    fn small_spec(n: usize, seed: u64) -> CorpusSpec {
        let mut spec = CorpusSpec::new(Charset::generated("rp", 8, 3), n, seed);
        spec.image_hw = (16, 48);
        spec.len_range = (1, 4);
        spec.distortion = DistortionSpec::none();
        spec
    }

    #[test]
    fn split_counts_match_ratio() {
        let spec = small_spec(100, 5);
        let (train, test) = generate_corpus(&spec).unwrap();
        assert_eq!(train.len(), 90);
        assert_eq!(test.len(), 10);
    }

    #[test]
    fn repeated_generation_is_identical() {
        let spec = small_spec(20, 11);
        let (tr1, te1) = generate_corpus(&spec).unwrap();
        let (tr2, te2) = generate_corpus(&spec).unwrap();
        assert_eq!(tr1.len(), tr2.len());
        for (a, b) in tr1.iter().zip(&tr2).chain(te1.iter().zip(&te2)) {
            assert_eq!(a.label, b.label);
            assert!(a.image.bit_eq(&b.image));
        }
    }

    #[test]
    fn too_small_corpus_rejected() {
        let spec = small_spec(5, 1);
        assert!(matches!(
            generate_corpus(&spec),
            Err(CorpusError::BadSpec(_))
        ));
    }

    #[test]
    fn labels_are_valid_non_specials() {
        let spec = small_spec(30, 2);
        let (train, test) = generate_corpus(&spec).unwrap();
        for s in train.iter().chain(&test) {
            assert!(!s.label.is_empty() && s.label.len() <= 4);
            assert!(s.label.iter().all(|&id| id < spec.charset.n_symbols()));
        }
    }

    #[test]
    fn multilingual_concatenation() {
        let rp_spec = small_spec(12, 3);
        let (rp, _) = generate_corpus(&rp_spec).unwrap();
        let mut rr_spec = small_spec(20, 4);
        rr_spec.charset = Charset::latin_like();
        let (rr, _) = generate_corpus(&rr_spec).unwrap();

        let (all, union) =
            make_multilingual(&rp, &rr, &rp_spec.charset, &rr_spec.charset).unwrap();
        assert_eq!(all.len(), rp.len() + rr.len());
        assert_eq!(union.n_symbols(), 8 + 36);
        assert_eq!(union.vocab_size(), 47);

        // multiset of (language_id, original label) pairs is preserved:
        // brute-force comparison after undoing the rr offset
        let mut expect: Vec<(String, Vec<usize>)> = rp
            .iter()
            .chain(&rr)
            .map(|s| (s.language_id.clone(), s.label.clone()))
            .collect();
        let mut got: Vec<(String, Vec<usize>)> = all
            .iter()
            .map(|s| {
                let undo: Vec<usize> = if s.language_id == "latin" {
                    s.label.iter().map(|&id| id - 8).collect()
                } else {
                    s.label.clone()
                };
                (s.language_id.clone(), undo)
            })
            .collect();
        expect.sort();
        got.sort();
        assert_eq!(expect, got);
    }

    #[test]
    fn multilingual_empty_rp_is_identity_with_order() {
        let mut rr_spec = small_spec(15, 9);
        rr_spec.charset = Charset::latin_like();
        let (rr, _) = generate_corpus(&rr_spec).unwrap();
        let rp_cs = Charset::new("rp", vec![], vec![]).unwrap();
        let (all, union) = make_multilingual(&[], &rr, &rp_cs, &rr_spec.charset).unwrap();
        assert_eq!(all.len(), rr.len());
        assert_eq!(union.n_symbols(), 36);
        for (a, b) in all.iter().zip(&rr) {
            assert_eq!(a.label, b.label); // offset is zero
            assert!(a.image.bit_eq(&b.image));
        }
    }

    #[test]
    fn vocab_clash_detected() {
        let a = Charset::new("x", vec!["A".into(), "B".into()], vec![]).unwrap();
        let b = Charset::new("y", vec!["B".into(), "C".into()], vec![]).unwrap();
        assert!(matches!(
            union_charset(&a, &b),
            Err(CorpusError::VocabClash(_))
        ));
    }
}
