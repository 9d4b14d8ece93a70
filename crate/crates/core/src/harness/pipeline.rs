//! The four-procedure comparison pipeline.

use std::path::Path;
use std::time::Instant;

use super::cache::{samples_digest, train_config_digest, TrainCache};
use super::report;
use super::{evaluate, EvalReport, HarnessError};
use crate::config::StudyConfig;
use crate::corpus::{generate_corpus, union_charset, Charset, Sample};
use crate::model::{init_params, ModelConfig};
use crate::training::{
    finetune_from, graft, pretrain_decoder, pretrain_encoder, Checkpoint, Procedure, TrainConfig,
};

/// Mean and per-seed accuracy for one procedure.
#[derive(Clone, Debug)]
pub struct ProcedureRow {
    pub procedure: Procedure,
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub rows: Vec<ProcedureRow>,
    pub reports: Vec<EvalReport>,
    pub runtime_seconds: f64,
}

pub(crate) struct StudyData {
    pub rp_train: Vec<Sample>,
    pub rp_test: Vec<Sample>,
    pub rr_train: Vec<Sample>,
    pub rp_charset: Charset,
    pub rr_charset: Charset,
}

pub(crate) fn generate_study_data(cfg: &StudyConfig) -> Result<StudyData, HarnessError> {
    let rp_spec = cfg.rp_spec();
    let (rp_train, rp_test) = generate_corpus(&rp_spec)?;
    let rr_spec = cfg.rr_spec();
    let (rr_train, _rr_test) = generate_corpus(&rr_spec)?;
    Ok(StudyData {
        rp_train,
        rp_test,
        rr_train,
        rp_charset: rp_spec.charset,
        rr_charset: rr_spec.charset,
    })
}

fn with_seed(tc: &TrainConfig, seed: u64) -> TrainConfig {
    let mut tc = *tc;
    tc.seed = seed;
    tc
}

fn with_vocab(mc: &ModelConfig, vocab: usize) -> ModelConfig {
    let mut mc = mc.clone();
    mc.vocab_size = vocab;
    mc
}

/// Train (or fetch) every checkpoint one seed of one procedure needs,
/// ending with the procedure's final model.
#[allow(clippy::too_many_arguments)]
pub(crate) fn procedure_checkpoint(
    proc: Procedure,
    data: &StudyData,
    rr_train: &[Sample],
    train_cfg: &TrainConfig,
    pretrain_cfg: &TrainConfig,
    base_model: &ModelConfig,
    seed: u64,
    cache: &mut TrainCache,
) -> Result<std::sync::Arc<Checkpoint>, HarnessError> {
    let tc = with_seed(train_cfg, seed);
    let ptc = with_seed(pretrain_cfg, seed);
    let target = with_vocab(base_model, data.rp_charset.vocab_size());
    let rp_digest = samples_digest(&data.rp_train);
    let rr_digest = samples_digest(rr_train);
    let model_digest = base_model.digest();

    let me_key = format!(
        "me|{rp_digest}|{rr_digest}|{model_digest}|{}",
        train_config_digest(&ptc)
    );
    let rpld_key = format!(
        "rpld|{rp_digest}|{model_digest}|{}",
        train_config_digest(&ptc)
    );

    let ckpt = match proc {
        Procedure::Baseline => {
            let key = format!(
                "baseline|{rp_digest}|{model_digest}|{}",
                train_config_digest(&tc)
            );
            let rp_train = &data.rp_train;
            let rp_charset = &data.rp_charset;
            cache.get_or_compute(key, || {
                crate::training::run_procedure(
                    Procedure::Baseline,
                    rp_train,
                    &[],
                    rp_charset,
                    &data.rr_charset,
                    &tc,
                    &ptc,
                    base_model,
                )
            })?
        }
        Procedure::Me => {
            let me = cache.get_or_compute(me_key, || {
                pretrain_encoder(
                    &data.rp_train,
                    rr_train,
                    &data.rp_charset,
                    &data.rr_charset,
                    &ptc,
                    base_model,
                )
                .map(|(ckpt, _)| ckpt)
            })?;
            let key = format!(
                "ft-me|{}|{rp_digest}|{model_digest}|{}",
                me.digest(),
                train_config_digest(&tc)
            );
            cache.get_or_compute(key, || {
                let mut init = init_params(&target, tc.seed)?;
                init.copy_namespace_from(&me.params, "enc.")?;
                finetune_from(
                    init,
                    vec![me.digest()],
                    &data.rp_train,
                    data.rp_charset.digest(),
                    &tc,
                    &target,
                )
            })?
        }
        Procedure::MeMd => {
            let me = cache.get_or_compute(me_key, || {
                pretrain_encoder(
                    &data.rp_train,
                    rr_train,
                    &data.rp_charset,
                    &data.rr_charset,
                    &ptc,
                    base_model,
                )
                .map(|(ckpt, _)| ckpt)
            })?;
            let union = union_charset(&data.rp_charset, &data.rr_charset)?;
            let union_cfg = with_vocab(base_model, union.vocab_size());
            let key = format!(
                "ft-memd|{}|{rp_digest}|{model_digest}|{}",
                me.digest(),
                train_config_digest(&tc)
            );
            cache.get_or_compute(key, || {
                finetune_from(
                    me.params.clone(),
                    vec![me.digest()],
                    &data.rp_train,
                    union.digest(),
                    &tc,
                    &union_cfg,
                )
            })?
        }
        Procedure::MeRpld => {
            let me = cache.get_or_compute(me_key, || {
                pretrain_encoder(
                    &data.rp_train,
                    rr_train,
                    &data.rp_charset,
                    &data.rr_charset,
                    &ptc,
                    base_model,
                )
                .map(|(ckpt, _)| ckpt)
            })?;
            let rpld = cache.get_or_compute(rpld_key, || {
                pretrain_decoder(&data.rp_train, &data.rp_charset, &ptc, base_model)
            })?;
            let key = format!(
                "ft-merpld|{}|{}|{rp_digest}|{model_digest}|{}",
                me.digest(),
                rpld.digest(),
                train_config_digest(&tc)
            );
            cache.get_or_compute(key, || {
                let init = graft(&me, &rpld, &target)?;
                finetune_from(
                    init,
                    vec![me.digest(), rpld.digest()],
                    &data.rp_train,
                    data.rp_charset.digest(),
                    &tc,
                    &target,
                )
            })?
        }
    };
    Ok(ckpt)
}

/// Run all four procedures across the configured seeds, evaluate on the
/// resource-poor test set, and (optionally) write checkpoints and the
/// comparison report under `out_dir`.
pub fn run_pipeline(
    cfg: &StudyConfig,
    out_dir: Option<&Path>,
) -> Result<PipelineOutcome, HarnessError> {
    let mut cache = TrainCache::new();
    run_pipeline_with_cache(cfg, out_dir, &mut cache)
}

/// [`run_pipeline`] against a caller-supplied cache so related studies
/// can share pre-training work.
pub fn run_pipeline_with_cache(
    cfg: &StudyConfig,
    out_dir: Option<&Path>,
    cache: &mut TrainCache,
) -> Result<PipelineOutcome, HarnessError> {
    let start = Instant::now();
    let data = generate_study_data(cfg)?;

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for proc in Procedure::all() {
        let mut per_seed = Vec::new();
        for &seed in &cfg.seeds {
            let ckpt = procedure_checkpoint(
                proc,
                &data,
                &data.rr_train,
                &cfg.train,
                &cfg.pretrain,
                &cfg.model,
                seed,
                cache,
            )?;
            let report = evaluate(&ckpt, &data.rp_test, proc.as_str())?;
            per_seed.push((seed, report.accuracy));
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(dir)?;
                ckpt.save(&dir.join(format!("{}-seed{}.xstr", proc.as_str(), seed)))
                    .map_err(HarnessError::Train)?;
            }
            reports.push(report);
        }
        let mean = per_seed.iter().map(|(_, a)| a).sum::<f64>() / per_seed.len() as f64;
        rows.push(ProcedureRow {
            procedure: proc,
            per_seed,
            mean,
        });
    }

    let outcome = PipelineOutcome {
        rows,
        reports,
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("table.txt"), report::procedure_table(&outcome.rows))?;
        std::fs::write(dir.join("records.kv"), report::pipeline_records(&outcome))?;
    }
    Ok(outcome)
}
