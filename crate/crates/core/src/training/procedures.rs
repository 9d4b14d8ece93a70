//! The four training procedures: baseline, encoder pre-training,
//! decoder pre-training, and grafted fine-tuning.

use super::{train_phase, Checkpoint, Phase, RunMeta, TrainConfig, TrainError};
use crate::corpus::{make_multilingual, Charset, Sample};
use crate::model::{init_params, ModelConfig};
use crate::params::ParamSet;

/// Table-style training procedure identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Procedure {
    Baseline,
    Me,
    MeMd,
    MeRpld,
}

impl Procedure {
    pub fn as_str(&self) -> &'static str {
        match self {
            Procedure::Baseline => "baseline",
            Procedure::Me => "me",
            Procedure::MeMd => "me-md",
            Procedure::MeRpld => "me-rpld",
        }
    }

    pub fn parse(s: &str) -> Result<Self, TrainError> {
        match s {
            "baseline" => Ok(Procedure::Baseline),
            "me" => Ok(Procedure::Me),
            "me-md" | "me_md" => Ok(Procedure::MeMd),
            "me-rpld" | "me_rpld" => Ok(Procedure::MeRpld),
            other => Err(TrainError::BadTrainConfig(format!(
                "unknown procedure `{other}`"
            ))),
        }
    }

    pub fn all() -> [Procedure; 4] {
        [Procedure::Baseline, Procedure::Me, Procedure::MeMd, Procedure::MeRpld]
    }
}

fn with_vocab(base: &ModelConfig, vocab_size: usize) -> ModelConfig {
    let mut cfg = base.clone();
    cfg.vocab_size = vocab_size;
    cfg
}

/// Encoder pre-training: one model over the combined resource-poor +
/// resource-rich corpus with the union vocabulary. The returned
/// checkpoint holds both the multilingual encoder and the multilingual
/// decoder, plus the union charset for downstream vocab handling.
pub fn pretrain_encoder(
    rp: &[Sample],
    rr: &[Sample],
    rp_charset: &Charset,
    rr_charset: &Charset,
    train_config: &TrainConfig,
    base_model: &ModelConfig,
) -> Result<(Checkpoint, Charset), TrainError> {
    let (multi, union) = make_multilingual(rp, rr, rp_charset, rr_charset)?;
    let config = with_vocab(base_model, union.vocab_size());
    let init = init_params(&config, train_config.seed)?;
    let (ckpt, _) = train_phase(
        &multi,
        train_config,
        &config,
        init,
        RunMeta {
            phase: Phase::MultilingualPretrain,
            parents: Vec::new(),
            charset_digest: union.digest(),
        },
    )?;
    Ok((ckpt, union))
}

/// Decoder pre-training: the resource-poor-only model from fresh init.
/// Identical in objective to a baseline run; only the phase tag differs.
pub fn pretrain_decoder(
    rp: &[Sample],
    rp_charset: &Charset,
    train_config: &TrainConfig,
    base_model: &ModelConfig,
) -> Result<Checkpoint, TrainError> {
    let config = with_vocab(base_model, rp_charset.vocab_size());
    let init = init_params(&config, train_config.seed)?;
    let (ckpt, _) = train_phase(
        rp,
        train_config,
        &config,
        init,
        RunMeta {
            phase: Phase::RpPretrain,
            parents: Vec::new(),
            charset_digest: rp_charset.digest(),
        },
    )?;
    Ok(ckpt)
}

/// Combine the encoder of `me` with the decoder of `rpld` as the init
/// for fine-tuning. `enc.*` entries are copied bit-exactly from `me`,
/// `dec.*` entries bit-exactly from `rpld`; nothing else is taken.
pub fn graft(
    me: &Checkpoint,
    rpld: &Checkpoint,
    target_config: &ModelConfig,
) -> Result<ParamSet, TrainError> {
    if rpld.meta.config.vocab_size != target_config.vocab_size {
        return Err(TrainError::VocabMismatch(format!(
            "decoder checkpoint vocab {} vs target {}",
            rpld.meta.config.vocab_size, target_config.vocab_size
        )));
    }
    let skeleton = init_params(target_config, 0)?;
    let mut out = ParamSet::new();
    for (name, expected) in skeleton.iter() {
        let source = if name.starts_with("enc.") {
            &me.params
        } else {
            &rpld.params
        };
        let tensor = source.get(name).ok_or_else(|| {
            TrainError::IncompatibleShapes(format!("`{name}` missing from donor checkpoint"))
        })?;
        if tensor.shape() != expected.shape() {
            return Err(TrainError::IncompatibleShapes(format!(
                "`{name}`: donor {:?} vs target {:?}",
                tensor.shape(),
                expected.shape()
            )));
        }
        out.insert(name, tensor.clone())?;
    }
    Ok(out)
}

/// Fine-tune from an explicit init (the grafted or pre-trained
/// parameters) on the resource-poor corpus.
pub fn finetune_from(
    init: ParamSet,
    parents: Vec<String>,
    rp: &[Sample],
    charset_digest: String,
    train_config: &TrainConfig,
    config: &ModelConfig,
) -> Result<Checkpoint, TrainError> {
    let (ckpt, _) = train_phase(
        rp,
        train_config,
        config,
        init,
        RunMeta {
            phase: Phase::Finetune,
            parents,
            charset_digest,
        },
    )?;
    Ok(ckpt)
}

/// Run one full training procedure end to end and return the final
/// checkpoint (for pre-training procedures, the fine-tuned model).
pub fn run_procedure(
    proc: Procedure,
    rp: &[Sample],
    rr: &[Sample],
    rp_charset: &Charset,
    rr_charset: &Charset,
    train_config: &TrainConfig,
    pretrain_config: &TrainConfig,
    base_model: &ModelConfig,
) -> Result<Checkpoint, TrainError> {
    let target = with_vocab(base_model, rp_charset.vocab_size());
    match proc {
        Procedure::Baseline => {
            let init = init_params(&target, train_config.seed)?;
            let (ckpt, _) = train_phase(
                rp,
                train_config,
                &target,
                init,
                RunMeta {
                    phase: Phase::Baseline,
                    parents: Vec::new(),
                    charset_digest: rp_charset.digest(),
                },
            )?;
            Ok(ckpt)
        }
        Procedure::Me => {
            let (me, _) =
                pretrain_encoder(rp, rr, rp_charset, rr_charset, pretrain_config, base_model)?;
            // Fresh decoder, pre-trained encoder.
            let mut init = init_params(&target, train_config.seed)?;
            init.copy_namespace_from(&me.params, "enc.")?;
            finetune_from(
                init,
                vec![me.digest()],
                rp,
                rp_charset.digest(),
                train_config,
                &target,
            )
        }
        Procedure::MeMd => {
            let (me, union) =
                pretrain_encoder(rp, rr, rp_charset, rr_charset, pretrain_config, base_model)?;
            // Fine-tuning keeps the union vocabulary; resource-poor ids
            // are unchanged under it (rp symbols come first).
            let union_config = with_vocab(base_model, union.vocab_size());
            finetune_from(
                me.params.clone(),
                vec![me.digest()],
                rp,
                union.digest(),
                train_config,
                &union_config,
            )
        }
        Procedure::MeRpld => {
            let (me, _) =
                pretrain_encoder(rp, rr, rp_charset, rr_charset, pretrain_config, base_model)?;
            let rpld = pretrain_decoder(rp, rp_charset, pretrain_config, base_model)?;
            let init = graft(&me, &rpld, &target)?;
            finetune_from(
                init,
                vec![me.digest(), rpld.digest()],
                rp,
                rp_charset.digest(),
                train_config,
                &target,
            )
        }
    }
}
