//! Evaluation and study orchestration: exact-match scoring, the
//! procedure-comparison pipeline, and the data-size ablation sweep.

mod ablation;
mod cache;
mod pipeline;
pub mod report;

use std::time::Instant;

use thiserror::Error;

pub use ablation::{ablation_sweep, AblationRow, VariantResult};
pub use cache::{samples_digest, TrainCache};
pub use pipeline::{run_pipeline, run_pipeline_with_cache, PipelineOutcome, ProcedureRow};

use crate::config::ConfigError;
use crate::corpus::{CorpusError, Sample};
use crate::model::{greedy_decode, ModelError};
use crate::training::{Checkpoint, TrainError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("prediction and reference lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty evaluation set")]
    EmptySet,
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("bad ablation size: {0}")]
    BadSize(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Percent of predictions exactly equal to their reference (same ids,
/// same length).
pub fn exact_match_accuracy(
    preds: &[Vec<usize>],
    refs: &[Vec<usize>],
) -> Result<f64, HarnessError> {
    if preds.len() != refs.len() {
        return Err(HarnessError::LengthMismatch(preds.len(), refs.len()));
    }
    if preds.is_empty() {
        return Err(HarnessError::EmptySet);
    }
    let hits = preds.iter().zip(refs).filter(|(p, r)| p == r).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// Evaluation result for one checkpoint on one test set.
///
/// `runtime_seconds` is wall-clock and excluded from serialized report
/// records, which must be byte-stable across identical runs.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub procedure: String,
    pub accuracy: f64,
    pub n_test: usize,
    /// (label length, total, correct), ascending by length.
    pub per_length: Vec<(usize, usize, usize)>,
    /// Up to 20 (reference, hypothesis) pairs as space-joined ids.
    pub error_exemplars: Vec<(String, String)>,
    pub runtime_seconds: f64,
    pub seed: u64,
}

impl EvalReport {
    /// Deterministic serialization (no volatile fields).
    pub fn canonical_lines(&self) -> String {
        let mut s = format!(
            "record=eval proc={} seed={} accuracy={:.4} n_test={}\n",
            self.procedure, self.seed, self.accuracy, self.n_test
        );
        for (len, total, correct) in &self.per_length {
            s.push_str(&format!(
                "record=eval-length proc={} seed={} len={} total={} correct={}\n",
                self.procedure, self.seed, len, total, correct
            ));
        }
        for (r, h) in &self.error_exemplars {
            s.push_str(&format!(
                "record=eval-error proc={} seed={} ref={} hyp={}\n",
                self.procedure,
                self.seed,
                r.replace(' ', "_"),
                h.replace(' ', "_")
            ));
        }
        s
    }
}

/// Greedy-decode every test image under the checkpoint and score by
/// exact match. Deterministic apart from `runtime_seconds`.
pub fn evaluate(
    ckpt: &Checkpoint,
    test: &[Sample],
    procedure: &str,
) -> Result<EvalReport, HarnessError> {
    if test.is_empty() {
        return Err(HarnessError::EmptySet);
    }
    let non_special = ckpt.meta.config.vocab_size - 3;
    for s in test {
        if let Some(&bad) = s.label.iter().find(|&&id| id >= non_special) {
            return Err(HarnessError::VocabMismatch(format!(
                "test label id {bad} outside checkpoint vocabulary ({non_special} symbols)"
            )));
        }
    }
    let start = Instant::now();
    let mut preds = Vec::with_capacity(test.len());
    for s in test {
        preds.push(greedy_decode(&s.image, &ckpt.params, &ckpt.meta.config)?);
    }
    let refs: Vec<Vec<usize>> = test.iter().map(|s| s.label.clone()).collect();
    let accuracy = exact_match_accuracy(&preds, &refs)?;

    let mut lengths: Vec<usize> = refs.iter().map(|r| r.len()).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let per_length = lengths
        .into_iter()
        .map(|len| {
            let total = refs.iter().filter(|r| r.len() == len).count();
            let correct = preds
                .iter()
                .zip(&refs)
                .filter(|(p, r)| r.len() == len && p == r)
                .count();
            (len, total, correct)
        })
        .collect();
    let error_exemplars = preds
        .iter()
        .zip(&refs)
        .filter(|(p, r)| p != r)
        .take(20)
        .map(|(p, r)| (join_ids(r), join_ids(p)))
        .collect();

    Ok(EvalReport {
        procedure: procedure.to_string(),
        accuracy,
        n_test: test.len(),
        per_length,
        error_exemplars,
        runtime_seconds: start.elapsed().as_secs_f64(),
        seed: ckpt.meta.seed,
    })
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter()
        .map(|id| id.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_basics() {
        let a = vec![vec![1, 2], vec![3]];
        assert_eq!(exact_match_accuracy(&a, &a).unwrap(), 100.0);
        let b = vec![vec![1, 2], vec![4]];
        assert_eq!(exact_match_accuracy(&a, &b).unwrap(), 50.0);
        // shorter hypothesis is a miss
        let c = vec![vec![1], vec![3]];
        assert_eq!(exact_match_accuracy(&c, &a).unwrap(), 50.0);
    }

    #[test]
    fn exact_match_errors() {
        let a = vec![vec![1]];
        assert!(matches!(
            exact_match_accuracy(&a, &[]),
            Err(HarnessError::LengthMismatch(1, 0))
        ));
        assert!(matches!(
            exact_match_accuracy(&[], &[]),
            Err(HarnessError::EmptySet)
        ));
    }
}
