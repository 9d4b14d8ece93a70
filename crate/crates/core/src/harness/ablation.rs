//! Accuracy versus resource-rich data size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::cache::TrainCache;
use super::pipeline::{procedure_checkpoint, StudyData};
use super::{evaluate, HarnessError};
use crate::corpus::{Charset, Sample};
use crate::model::{ModelConfig, Variant};
use crate::seeds::derive_seed;
use crate::training::{Procedure, TrainConfig};

/// One variant's accuracies at a sweep point.
#[derive(Clone, Debug)]
pub struct VariantResult {
    pub variant: Variant,
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
}

/// One sweep point: the resource-rich subset size and per-variant
/// accuracies averaged over seeds.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub rr_size: usize,
    pub results: Vec<VariantResult>,
}

/// Deterministic subsample of `size` resource-rich samples: a seeded
/// permutation keyed only by the size, truncated, restored to corpus
/// order. Calling twice yields identical subsets.
pub fn subsample(rr_full: &[Sample], size: usize) -> Vec<Sample> {
    let mut indices: Vec<usize> = (0..rr_full.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(0xab1a7e, size as u64, 0));
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    indices.truncate(size);
    indices.sort_unstable();
    indices.into_iter().map(|i| rr_full[i].clone()).collect()
}

/// Sweep the grafted-fine-tuning procedure over resource-rich subset
/// sizes (size 0 falls back to the baseline procedure), averaging over
/// seeds, for each requested model variant.
#[allow(clippy::too_many_arguments)]
pub fn ablation_sweep(
    rr_sizes: &[usize],
    rp_train: &[Sample],
    rp_test: &[Sample],
    rr_full: &[Sample],
    rp_charset: &Charset,
    rr_charset: &Charset,
    train_cfg: &TrainConfig,
    pretrain_cfg: &TrainConfig,
    base_model: &ModelConfig,
    variants: &[Variant],
    seeds: &[u64],
    cache: &mut TrainCache,
) -> Result<Vec<AblationRow>, HarnessError> {
    if rr_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::BadSize(
            "sizes must be strictly ascending".into(),
        ));
    }
    if let Some(&too_big) = rr_sizes.iter().find(|&&s| s > rr_full.len()) {
        return Err(HarnessError::BadSize(format!(
            "{too_big} exceeds the {} available resource-rich samples",
            rr_full.len()
        )));
    }
    if variants.is_empty() || seeds.is_empty() {
        return Err(HarnessError::BadSize(
            "need at least one variant and one seed".into(),
        ));
    }

    let data = StudyData {
        rp_train: rp_train.to_vec(),
        rp_test: rp_test.to_vec(),
        rr_train: Vec::new(),
        rp_charset: rp_charset.clone(),
        rr_charset: rr_charset.clone(),
    };

    let mut rows = Vec::new();
    for &size in rr_sizes {
        let rr_sub = subsample(rr_full, size);
        let mut results = Vec::new();
        for &variant in variants {
            let mut model = base_model.clone();
            model.variant = variant;
            let proc = if size == 0 {
                Procedure::Baseline
            } else {
                Procedure::MeRpld
            };
            let mut per_seed = Vec::new();
            for &seed in seeds {
                let ckpt = procedure_checkpoint(
                    proc,
                    &data,
                    &rr_sub,
                    train_cfg,
                    pretrain_cfg,
                    &model,
                    seed,
                    cache,
                )?;
                let report = evaluate(&ckpt, rp_test, proc.as_str())?;
                per_seed.push((seed, report.accuracy));
            }
            let mean = per_seed.iter().map(|(_, a)| a).sum::<f64>() / per_seed.len() as f64;
            results.push(VariantResult {
                variant,
                per_seed,
                mean,
            });
        }
        rows.push(AblationRow { rr_size: size, results });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec, DistortionSpec};

    #[test]
    fn subsample_is_deterministic_and_sized() {
        let mut spec = CorpusSpec::new(Charset::latin_like(), 20, 3);
        spec.image_hw = (16, 48);
        spec.len_range = (1, 3);
        spec.distortion = DistortionSpec::none();
        let (train, _) = generate_corpus(&spec).unwrap();
        let a = subsample(&train, 7);
        let b = subsample(&train, 7);
        assert_eq!(a.len(), 7);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert!(x.image.bit_eq(&y.image));
        }
        let c = subsample(&train, 8);
        assert_eq!(c.len(), 8);
    }

    #[test]
    fn bad_sizes_rejected() {
        let rows = ablation_sweep(
            &[5, 5],
            &[],
            &[],
            &[],
            &Charset::latin_like(),
            &Charset::latin_like(),
            &TrainConfig::new(1, 0),
            &TrainConfig::new(1, 0),
            &ModelConfig::new(Variant::Wang, 39),
            &[Variant::Wang],
            &[1],
            &mut TrainCache::new(),
        );
        assert!(matches!(rows, Err(HarnessError::BadSize(_))));
    }
}
