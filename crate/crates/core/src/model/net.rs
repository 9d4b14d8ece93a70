//! Forward graph composition for the recognition model.

use super::{cnn_layers, CnnLayer, ModelConfig, ModelError, Variant};
use crate::autograd::{NodeId, Tape};
use crate::corpus::Sample;
use crate::params::ParamSet;
use crate::tensor::Tensor;

fn linear(
    tape: &mut Tape,
    x: NodeId,
    params: &ParamSet,
    w_name: &str,
    b_name: &str,
) -> Result<NodeId, ModelError> {
    let w = tape.param(params, w_name)?;
    let y = tape.matmul(x, w)?;
    let b = tape.param(params, b_name)?;
    Ok(tape.add_row_vec(y, b)?)
}

/// Run the configured CNN preset over a (1, H, W) image, producing the
/// (d_model, 1, W/8) feature map.
pub fn cnn_extract(
    tape: &mut Tape,
    image: NodeId,
    params: &ParamSet,
    config: &ModelConfig,
) -> Result<NodeId, ModelError> {
    let shape = tape.value(image).shape().to_vec();
    if shape != [1, config.image_hw.0, config.image_hw.1] {
        return Err(ModelError::BadInput(format!(
            "image shape {:?} does not match config {:?}",
            shape, config.image_hw
        )));
    }
    let mut x = image;
    let mut conv_idx = 0usize;
    for layer in cnn_layers(config) {
        match layer {
            CnnLayer::Conv { residual, .. } => {
                let skip = x;
                let w = tape.param(params, &format!("enc.cnn.{conv_idx}.w"))?;
                let y = tape.conv2d(x, w, 1, 1, false)?;
                let b = tape.param(params, &format!("enc.cnn.{conv_idx}.b"))?;
                let y = tape.add_channel_bias(y, b)?;
                let y = if residual { tape.add(y, skip)? } else { y };
                x = tape.relu(y)?;
                conv_idx += 1;
            }
            CnnLayer::Pool { kh, kw } => {
                x = tape.max_pool2d(x, (kh, kw), (kh, kw))?;
            }
        }
    }
    let out_shape = tape.value(x).shape();
    debug_assert_eq!(out_shape, &[config.d_model, 1, config.seq_width()]);
    Ok(x)
}

/// Scaled dot-product multi-head attention with learned projections.
/// `prefix` locates the projection parameters (`{prefix}.wq` etc.).
pub fn multi_head_attention(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    params: &ParamSet,
    prefix: &str,
    heads: usize,
    causal_mask: bool,
) -> Result<NodeId, ModelError> {
    let d = tape.value(q).shape()[1];
    if d % heads != 0 {
        return Err(ModelError::BadConfig(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let qp = linear(tape, q, params, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let kp = linear(tape, k, params, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
    let vp = linear(tape, v, params, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(qp, h * dh, dh)?;
        let kh = tape.slice_cols(kp, h * dh, dh)?;
        let vh = tape.slice_cols(vp, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scalar_mul(scores, scale)?;
        let scores = if causal_mask {
            tape.causal_mask(scores)?
        } else {
            scores
        };
        let weights = tape.softmax(scores)?;
        contexts.push(tape.matmul(weights, vh)?);
    }
    let ctx = tape.concat_cols(&contexts)?;
    linear(tape, ctx, params, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
}

fn feed_forward(
    tape: &mut Tape,
    x: NodeId,
    params: &ParamSet,
    prefix: &str,
) -> Result<NodeId, ModelError> {
    let h = linear(tape, x, params, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
    let h = tape.relu(h)?;
    linear(tape, h, params, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
}

fn layer_norm(
    tape: &mut Tape,
    x: NodeId,
    params: &ParamSet,
    prefix: &str,
) -> Result<NodeId, ModelError> {
    let gain = tape.param(params, &format!("{prefix}.gain"))?;
    let bias = tape.param(params, &format!("{prefix}.bias"))?;
    Ok(tape.layer_norm(x, gain, bias, 1e-5)?)
}

/// Post-norm encoder block: self-attention then feed-forward, each with
/// a residual connection and layer norm.
pub fn transformer_encoder_block(
    tape: &mut Tape,
    s: NodeId,
    params: &ParamSet,
    prefix: &str,
    heads: usize,
) -> Result<NodeId, ModelError> {
    let attn = multi_head_attention(tape, s, s, s, params, &format!("{prefix}.attn"), heads, false)?;
    let sum = tape.add(s, attn)?;
    let x1 = layer_norm(tape, sum, params, &format!("{prefix}.ln1"))?;
    let ffn = feed_forward(tape, x1, params, &format!("{prefix}.ffn"))?;
    let sum2 = tape.add(x1, ffn)?;
    layer_norm(tape, sum2, params, &format!("{prefix}.ln2"))
}

/// Post-norm decoder block: causal self-attention, source-target
/// attention over the encoder sequence, then feed-forward.
pub fn transformer_decoder_block(
    tape: &mut Tape,
    u_prefix: NodeId,
    v: NodeId,
    params: &ParamSet,
    prefix: &str,
    heads: usize,
) -> Result<NodeId, ModelError> {
    let self_attn = multi_head_attention(
        tape,
        u_prefix,
        u_prefix,
        u_prefix,
        params,
        &format!("{prefix}.self_attn"),
        heads,
        true,
    )?;
    let sum = tape.add(u_prefix, self_attn)?;
    let x1 = layer_norm(tape, sum, params, &format!("{prefix}.ln1"))?;
    let cross = multi_head_attention(
        tape,
        x1,
        v,
        v,
        params,
        &format!("{prefix}.cross_attn"),
        heads,
        false,
    )?;
    let sum2 = tape.add(x1, cross)?;
    let x2 = layer_norm(tape, sum2, params, &format!("{prefix}.ln2"))?;
    let ffn = feed_forward(tape, x2, params, &format!("{prefix}.ffn"))?;
    let sum3 = tape.add(x2, ffn)?;
    layer_norm(tape, sum3, params, &format!("{prefix}.ln3"))
}

/// Encode an image into the (J, d) sequence the decoder attends over.
/// The wang variant returns the reshaped CNN features unchanged; the
/// sheng variant adds positions and runs K encoder blocks.
pub fn encode(
    tape: &mut Tape,
    image: NodeId,
    params: &ParamSet,
    config: &ModelConfig,
) -> Result<NodeId, ModelError> {
    let p = cnn_extract(tape, image, params, config)?;
    let q = tape.permute_to_seq(p)?;
    match config.variant {
        Variant::Wang => Ok(q),
        Variant::Sheng => {
            let mut s = tape.add_pos_enc(q)?;
            for k in 0..config.encoder_blocks {
                s = transformer_encoder_block(tape, s, params, &format!("enc.tblock.{k}"), config.heads)?;
            }
            Ok(s)
        }
    }
}

/// Embedding of a single symbol: row `c` of the embedding matrix,
/// shaped (1, d).
pub fn embed_char(
    tape: &mut Tape,
    c: usize,
    params: &ParamSet,
    config: &ModelConfig,
) -> Result<NodeId, ModelError> {
    if c >= config.vocab_size {
        return Err(ModelError::UnknownSymbol(c));
    }
    let table = tape.param(params, "dec.embed")?;
    Ok(tape.embed_rows(table, &[c])?)
}

/// Teacher-forced decoder pass: embeds the SOS-prefixed input, adds
/// positions, runs L decoder blocks, projects and normalizes. Row t of
/// the output is the distribution over symbol t+1.
pub fn decoder_forward(
    tape: &mut Tape,
    labels_in: &[usize],
    v: NodeId,
    params: &ParamSet,
    config: &ModelConfig,
) -> Result<NodeId, ModelError> {
    if labels_in.is_empty() || labels_in[0] != config.sos_id() {
        return Err(ModelError::BadInput(
            "decoder input must begin with SOS".into(),
        ));
    }
    if labels_in.len() > config.max_len {
        return Err(ModelError::BadInput(format!(
            "decoder input length {} exceeds max_len {}",
            labels_in.len(),
            config.max_len
        )));
    }
    if let Some(&bad) = labels_in.iter().find(|&&id| id >= config.vocab_size) {
        return Err(ModelError::UnknownSymbol(bad));
    }
    let table = tape.param(params, "dec.embed")?;
    let embedded = tape.embed_rows(table, labels_in)?;
    let mut x = tape.add_pos_enc(embedded)?;
    for l in 0..config.decoder_blocks {
        x = transformer_decoder_block(tape, x, v, params, &format!("dec.block.{l}"), config.heads)?;
    }
    let logits = linear(tape, x, params, "dec.proj.w", "dec.proj.b")?;
    Ok(tape.softmax(logits)?)
}

/// Summed negative log-likelihood over unmasked steps of a per-step
/// probability matrix. `pad_mask[t] = true` excludes step t.
pub fn sequence_nll(
    tape: &mut Tape,
    probs: NodeId,
    labels_out: &[usize],
    pad_mask: &[bool],
) -> Result<NodeId, ModelError> {
    Ok(tape.nll_from_probs(probs, labels_out, pad_mask)?)
}

/// Teacher-forced loss of one sample: encode, decode the SOS-prefixed
/// label, and take the NLL of the EOS-terminated target.
pub fn sample_loss(
    tape: &mut Tape,
    sample: &Sample,
    params: &ParamSet,
    config: &ModelConfig,
) -> Result<NodeId, ModelError> {
    if let Some(&bad) = sample.label.iter().find(|&&id| id >= config.vocab_size - 3) {
        return Err(ModelError::UnknownSymbol(bad));
    }
    let image = tape.leaf(sample.image.clone())?;
    let v = encode(tape, image, params, config)?;
    let mut input = Vec::with_capacity(sample.label.len() + 1);
    input.push(config.sos_id());
    input.extend_from_slice(&sample.label);
    let mut target = sample.label.clone();
    target.push(config.eos_id());
    let probs = decoder_forward(tape, &input, v, params, config)?;
    let mask = vec![false; target.len()];
    sequence_nll(tape, probs, &target, &mask)
}

/// Mean over samples of the per-sample summed NLL, forward only.
pub fn dataset_loss(
    params: &ParamSet,
    config: &ModelConfig,
    samples: &[Sample],
) -> Result<f32, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::BadInput("empty dataset".into()));
    }
    let mut total = 0.0f64;
    for sample in samples {
        let mut tape = Tape::new();
        let loss = sample_loss(&mut tape, sample, params, config)?;
        total += tape.value(loss).item() as f64;
    }
    Ok((total / samples.len() as f64) as f32)
}

/// Greedy autoregressive decoding: start from SOS, append the argmax
/// symbol each step (ties to the lowest id), stop at any special token
/// or when `max_len` symbols have been produced. The returned sequence
/// contains no specials.
pub fn greedy_decode(
    image: &Tensor,
    params: &ParamSet,
    config: &ModelConfig,
) -> Result<Vec<usize>, ModelError> {
    let v_value = {
        let mut tape = Tape::new();
        let img = tape.leaf(image.clone())?;
        let v = encode(&mut tape, img, params, config)?;
        tape.value(v).clone()
    };
    let mut out: Vec<usize> = Vec::new();
    while out.len() < config.max_len {
        let mut tape = Tape::new();
        let v = tape.leaf(v_value.clone())?;
        let mut prefix = Vec::with_capacity(out.len() + 1);
        prefix.push(config.sos_id());
        prefix.extend_from_slice(&out);
        let probs = decoder_forward(&mut tape, &prefix, v, params, config)?;
        let pv = tape.value(probs);
        let vocab = config.vocab_size;
        let row = &pv.data()[(prefix.len() - 1) * vocab..prefix.len() * vocab];
        let mut best = 0usize;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        if best >= config.vocab_size - 3 {
            break;
        }
        out.push(best);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn toy_config() -> ModelConfig {
        let mut cfg = ModelConfig::new(Variant::Wang, 8 + 3);
        cfg.d_model = 8;
        cfg.d_ffn = 8;
        cfg.heads = 2;
        cfg.image_hw = (8, 16);
        cfg.max_len = 8;
        cfg
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let cfg = toy_config();
        let params = init_params(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let img = tape.leaf(Tensor::zeros(&[1, 8, 16])).unwrap();
        let p = cnn_extract(&mut tape, img, &params, &cfg).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resnet_preset_also_collapses_height() {
        let mut cfg = toy_config();
        cfg.cnn_preset = crate::model::CnnPresetKind::ResnetLite;
        let params = init_params(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let img = tape.leaf(Tensor::full(&[1, 8, 16], 0.5)).unwrap();
        let p = cnn_extract(&mut tape, img, &params, &cfg).unwrap();
        assert_eq!(tape.value(p).shape(), &[8, 1, 2]);
    }

    #[test]
    fn wang_encode_is_reshaped_cnn_exactly() {
        let cfg = toy_config();
        let params = init_params(&cfg, 5).unwrap();
        let image = Tensor::full(&[1, 8, 16], 0.3);

        let mut t1 = Tape::new();
        let img = t1.leaf(image.clone()).unwrap();
        let v = encode(&mut t1, img, &params, &cfg).unwrap();

        let mut t2 = Tape::new();
        let img2 = t2.leaf(image).unwrap();
        let p = cnn_extract(&mut t2, img2, &params, &cfg).unwrap();
        let q = t2.permute_to_seq(p).unwrap();

        assert!(t1.value(v).bit_eq(t2.value(q)));
    }

    #[test]
    fn encode_is_deterministic() {
        let mut cfg = toy_config();
        cfg.variant = Variant::Sheng;
        let params = init_params(&cfg, 5).unwrap();
        let image = Tensor::full(&[1, 8, 16], 0.7);
        let run = |img: &Tensor| {
            let mut tape = Tape::new();
            let node = tape.leaf(img.clone()).unwrap();
            let v = encode(&mut tape, node, &params, &cfg).unwrap();
            tape.value(v).clone()
        };
        assert!(run(&image).bit_eq(&run(&image)));
    }

    #[test]
    fn embed_char_is_table_row() {
        let cfg = toy_config();
        let params = init_params(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let e = embed_char(&mut tape, 4, &params, &cfg).unwrap();
        let table = params.get("dec.embed").unwrap();
        let d = cfg.d_model;
        assert_eq!(tape.value(e).data(), &table.data()[4 * d..5 * d]);
        // distinct ids embed to distinct vectors under random init
        let mut tape2 = Tape::new();
        let e2 = embed_char(&mut tape2, 5, &params, &cfg).unwrap();
        assert!(!tape.value(e).bit_eq(tape2.value(e2)));
        assert!(matches!(
            embed_char(&mut tape2, 99, &params, &cfg),
            Err(ModelError::UnknownSymbol(99))
        ));
    }

    #[test]
    fn decoder_rows_are_distributions() {
        let cfg = toy_config();
        let params = init_params(&cfg, 2).unwrap();
        let mut tape = Tape::new();
        let img = tape.leaf(Tensor::full(&[1, 8, 16], 0.2)).unwrap();
        let v = encode(&mut tape, img, &params, &cfg).unwrap();
        let probs = decoder_forward(&mut tape, &[cfg.sos_id(), 0, 1], v, &params, &cfg).unwrap();
        let pv = tape.value(probs);
        assert_eq!(pv.shape(), &[3, cfg.vocab_size]);
        for row in pv.data().chunks(cfg.vocab_size) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_projection_gives_uniform_rows() {
        let cfg = toy_config();
        let mut params = init_params(&cfg, 2).unwrap();
        let w_shape = params.get("dec.proj.w").unwrap().shape().to_vec();
        *params.get_mut("dec.proj.w").unwrap() = Tensor::zeros(&w_shape);
        let mut tape = Tape::new();
        let img = tape.leaf(Tensor::full(&[1, 8, 16], 0.2)).unwrap();
        let v = encode(&mut tape, img, &params, &cfg).unwrap();
        let probs = decoder_forward(&mut tape, &[cfg.sos_id()], v, &params, &cfg).unwrap();
        let uniform = 1.0 / cfg.vocab_size as f32;
        for &p in tape.value(probs).data() {
            assert!((p - uniform).abs() < 1e-6);
        }
    }

    #[test]
    fn decoder_requires_sos() {
        let cfg = toy_config();
        let params = init_params(&cfg, 2).unwrap();
        let mut tape = Tape::new();
        let img = tape.leaf(Tensor::zeros(&[1, 8, 16])).unwrap();
        let v = encode(&mut tape, img, &params, &cfg).unwrap();
        assert!(matches!(
            decoder_forward(&mut tape, &[0, 1], v, &params, &cfg),
            Err(ModelError::BadInput(_))
        ));
    }

    #[test]
    fn rigged_projection_decodes_empty() {
        let cfg = toy_config();
        let mut params = init_params(&cfg, 2).unwrap();
        let mut bias = Tensor::zeros(&[cfg.vocab_size]);
        bias.data_mut()[cfg.eos_id()] = 50.0;
        *params.get_mut("dec.proj.b").unwrap() = bias;
        let out = greedy_decode(&Tensor::full(&[1, 8, 16], 0.4), &params, &cfg).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn decode_respects_length_cap() {
        let cfg = toy_config();
        let mut params = init_params(&cfg, 2).unwrap();
        // rig the projection so symbol 0 always wins: decode must stop at max_len
        let mut bias = Tensor::zeros(&[cfg.vocab_size]);
        bias.data_mut()[0] = 50.0;
        *params.get_mut("dec.proj.b").unwrap() = bias;
        let out = greedy_decode(&Tensor::full(&[1, 8, 16], 0.4), &params, &cfg).unwrap();
        assert_eq!(out.len(), cfg.max_len);
        assert!(out.iter().all(|&id| id == 0));
    }
}
