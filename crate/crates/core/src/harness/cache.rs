//! Memoization of training jobs.
//!
//! Every job (pre-training, baseline, fine-tune) is a pure function of
//! its data digest, configs, and seed, so the pipeline and the ablation
//! sweep can share checkpoints instead of retraining. Keys hash all
//! inputs; a hit returns the identical checkpoint a fresh run would
//! produce.

use std::collections::HashMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::corpus::{hex_string, Sample};
use crate::training::{Checkpoint, TrainConfig, TrainError};

/// Content digest of a sample list (images, labels, language tags).
pub fn samples_digest(samples: &[Sample]) -> String {
    let mut hasher = Sha256::new();
    hasher.update((samples.len() as u64).to_le_bytes());
    for s in samples {
        hasher.update((s.label.len() as u64).to_le_bytes());
        for &id in &s.label {
            hasher.update((id as u64).to_le_bytes());
        }
        hasher.update(s.language_id.as_bytes());
        for &d in s.image.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in s.image.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex_string(&hasher.finalize())
}

pub(crate) fn train_config_digest(tc: &TrainConfig) -> String {
    format!(
        "lr={};bs={};ep={};vf={};pat={};seed={};shuf={}",
        tc.lr,
        tc.batch_size,
        tc.max_epochs,
        tc.early_stop.val_fraction,
        tc.early_stop.patience,
        tc.seed,
        tc.shuffle
    )
}

#[derive(Default)]
pub struct TrainCache {
    map: HashMap<String, Arc<Checkpoint>>,
}

impl TrainCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get_or_compute<F>(&mut self, key: String, f: F) -> Result<Arc<Checkpoint>, TrainError>
    where
        F: FnOnce() -> Result<Checkpoint, TrainError>,
    {
        if let Some(hit) = self.map.get(&key) {
            return Ok(Arc::clone(hit));
        }
        let ckpt = Arc::new(f()?);
        self.map.insert(key, Arc::clone(&ckpt));
        Ok(ckpt)
    }
}
