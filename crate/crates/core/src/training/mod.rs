//! The transfer-training recipe: a seeded teacher-forced training loop
//! with early stopping, checkpoint persistence, parameter grafting, and
//! the four training procedures built from them.

mod checkpoint;
mod procedures;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointMeta, Phase};
pub use procedures::{
    finetune_from, graft, pretrain_decoder, pretrain_encoder, run_procedure, Procedure,
};

use crate::autograd::Tape;
use crate::corpus::{CorpusError, Sample};
use crate::error::NumericsError;
use crate::model::{greedy_decode, init_params, sample_loss, ModelConfig, ModelError};
use crate::params::ParamSet;
use crate::seeds::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss diverged to a non-finite value at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("incompatible shapes: {0}")]
    IncompatibleShapes(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("bad train config: {0}")]
    BadTrainConfig(String),
    #[error("bad checkpoint: {0}")]
    CheckpointFormat(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopConfig {
    /// Fraction of the training set carved off for validation.
    pub val_fraction: f64,
    /// Epochs without a strict val-accuracy improvement before stopping.
    pub patience: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            patience: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop: EarlyStopConfig,
    pub seed: u64,
    pub shuffle: bool,
}

impl TrainConfig {
    pub fn new(max_epochs: usize, seed: u64) -> Self {
        Self {
            lr: 0.01,
            batch_size: 16,
            max_epochs,
            early_stop: EarlyStopConfig::default(),
            seed,
            shuffle: true,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.early_stop.val_fraction > 0.0 && self.early_stop.val_fraction < 0.5) {
            return Err(TrainError::BadTrainConfig(format!(
                "val_fraction {} outside (0, 0.5)",
                self.early_stop.val_fraction
            )));
        }
        if self.early_stop.patience < 1 {
            return Err(TrainError::BadTrainConfig("patience below 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::BadTrainConfig(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::BadTrainConfig(format!("lr {}", self.lr)));
        }
        Ok(())
    }
}

/// Per-run diagnostics; epochs are 1-based.
#[derive(Clone, Debug, Default)]
pub struct TrainStats {
    pub epoch_losses: Vec<f32>,
    pub val_accuracies: Vec<f32>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub clamp_events: u64,
}

/// Provenance fields the caller stamps onto the resulting checkpoint.
#[derive(Clone, Debug)]
pub struct RunMeta {
    pub phase: Phase,
    pub parents: Vec<String>,
    pub charset_digest: String,
}

fn seeded_shuffle<T>(items: &mut [T], rng: &mut ChaCha12Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Split off the validation set, stratified by language so multilingual
/// phases hold out samples from every script.
fn val_split(train: &[Sample], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut languages: Vec<&str> = Vec::new();
    for s in train {
        if !languages.contains(&s.language_id.as_str()) {
            languages.push(&s.language_id);
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0x5eed, 0));
    let mut val = Vec::new();
    let mut keep = Vec::new();
    for lang in languages {
        let mut group: Vec<usize> = (0..train.len())
            .filter(|&i| train[i].language_id == lang)
            .collect();
        seeded_shuffle(&mut group, &mut rng);
        let mut n_val = (group.len() as f64 * fraction).round() as usize;
        n_val = n_val.min(group.len().saturating_sub(1));
        val.extend(group[..n_val].iter().copied());
        keep.extend(group[n_val..].iter().copied());
    }
    keep.sort_unstable();
    val.sort_unstable();
    (keep, val)
}

fn exact_match(
    params: &ParamSet,
    config: &ModelConfig,
    samples: &[Sample],
    idx: &[usize],
) -> Result<f32, TrainError> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for &i in idx {
        let hyp = greedy_decode(&samples[i].image, params, config)?;
        if hyp == samples[i].label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f32 / idx.len() as f32)
}

/// One training phase: carve off the validation split, run seeded
/// shuffled minibatch SGD on the teacher-forced loss (mean over the
/// batch of per-sequence summed NLL), track the best validation
/// exact-match, and return those parameters.
///
/// Deterministic: the same (data, configs, init, seed) produce a
/// byte-identical checkpoint.
pub fn train_phase(
    train: &[Sample],
    config: &TrainConfig,
    model_config: &ModelConfig,
    init: ParamSet,
    meta: RunMeta,
) -> Result<(Checkpoint, TrainStats), TrainError> {
    config.validate()?;
    model_config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    // Init must structurally match the architecture.
    let expected = init_params(model_config, 0)?;
    if expected.len() != init.len() {
        return Err(TrainError::IncompatibleShapes(format!(
            "init has {} tensors, config implies {}",
            init.len(),
            expected.len()
        )));
    }
    for (name, t) in expected.iter() {
        match init.get(name) {
            Some(got) if got.shape() == t.shape() => {}
            Some(got) => {
                return Err(TrainError::IncompatibleShapes(format!(
                    "`{name}`: {:?} vs expected {:?}",
                    got.shape(),
                    t.shape()
                )))
            }
            None => return Err(TrainError::IncompatibleShapes(format!("missing `{name}`"))),
        }
    }

    let (train_idx, val_idx) = val_split(train, config.early_stop.val_fraction, config.seed);
    // Degenerate split on tiny corpora: validate on the training portion.
    let val_idx = if val_idx.is_empty() { train_idx.clone() } else { val_idx };

    let mut params = init;
    let mut stats = TrainStats {
        train_size: train_idx.len(),
        val_size: val_idx.len(),
        ..TrainStats::default()
    };

    let mut best_acc = f32::NEG_INFINITY;
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut stale = 0usize;

    for epoch in 1..=config.max_epochs {
        let mut order = train_idx.clone();
        if config.shuffle {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, 1, epoch as u64));
            seeded_shuffle(&mut order, &mut rng);
        }
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let mut tape = Tape::new();
                let loss = sample_loss(&mut tape, &train[i], &params, model_config)?;
                batch_loss += tape.value(loss).item() as f64;
                let grads = tape.backward(loss)?;
                for (name, g) in tape.param_grads(&grads) {
                    params.accumulate_grad(name, g)?;
                }
                stats.clamp_events += tape.clamp_events;
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::DivergedLoss { epoch });
            }
            params.scale_grads(1.0 / batch.len() as f32);
            params
                .sgd_step(config.lr)
                .map_err(|_| TrainError::DivergedLoss { epoch })?;
            epoch_loss += batch_loss;
        }
        stats
            .epoch_losses
            .push((epoch_loss / train_idx.len() as f64) as f32);

        let acc = exact_match(&params, model_config, train, &val_idx)?;
        stats.val_accuracies.push(acc);
        stats.stopped_epoch = epoch;
        if acc > best_acc {
            best_acc = acc;
            best_params = params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            if acc == best_acc {
                // Ties move the snapshot forward; training keeps refining
                // the fit without the metric resolving it.
                best_params = params.clone();
                best_epoch = epoch;
            }
            stale += 1;
            if stale >= config.early_stop.patience {
                break;
            }
        }
    }
    stats.best_epoch = best_epoch;

    let ckpt = Checkpoint {
        params: best_params,
        meta: CheckpointMeta {
            phase: meta.phase,
            parents: meta.parents,
            config: model_config.clone(),
            charset_digest: meta.charset_digest,
            seed: config.seed,
            epoch: best_epoch,
            val_accuracy: best_acc,
        },
    };
    Ok((ckpt, stats))
}
