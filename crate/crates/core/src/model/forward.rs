use crate::attention::{mha_forward, MhaTrace};
use crate::error::{Error, Result};
use crate::mask::{build_mask, MaskMatrix};
use crate::ops::{gelu, layer_norm_forward, LayerNormTrace};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::params::{DecoderLayer, EncoderLayer, FeedForward, LayerNormParams, ModelParams};
use super::tokens::{TokenSequence, BOS, PAD};

/// Interleaved sine/cosine position encoding with wavelength base 10000.
/// Row `i` encodes 1-indexed position `i + 1`; column pair `(2m, 2m+1)` holds
/// `sin(i / 10000^(2m/d)), cos(i / 10000^(2m/d))`.
pub fn sinusoidal_positions<S: Scalar>(len: usize, d_model: usize) -> Result<Tensor<S>> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "position encoding needs an even width, got {d_model}"
        )));
    }
    if len == 0 {
        return Err(Error::Input(
            "position encoding needs at least one position".into(),
        ));
    }
    let mut out = Tensor::zeros(&[len, d_model]);
    for pos in 0..len {
        let row = out.row_mut(pos);
        for m in 0..d_model / 2 {
            let freq = 10000f64.powf(-((2 * m) as f64) / d_model as f64);
            let angle = pos as f64 * freq;
            row[2 * m] = S::lit(angle.sin());
            row[2 * m + 1] = S::lit(angle.cos());
        }
    }
    Ok(out)
}

/// `sqrt(d_model) * E[id] + PE[position]` for every token.
pub fn embed_tokens<S: Scalar>(
    ids: &[usize],
    params: &ModelParams<S>,
    config: &ModelConfig,
) -> Result<Tensor<S>> {
    if ids.is_empty() {
        return Err(Error::Input("cannot embed an empty sequence".into()));
    }
    if ids.len() > config.max_positions {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_positions {}",
            ids.len(),
            config.max_positions
        )));
    }
    if let Some(&t) = ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {t} outside vocabulary of size {}",
            config.vocab_size
        )));
    }
    let scale = S::from_usize(config.d_model).unwrap().sqrt();
    let mut x: Tensor<S> = sinusoidal_positions(ids.len(), config.d_model)?;
    for (i, &id) in ids.iter().enumerate() {
        for (o, &e) in x.row_mut(i).iter_mut().zip(params.embedding.row(id)) {
            *o += scale * e;
        }
    }
    Ok(x)
}

#[derive(Clone, Debug)]
pub(crate) struct FeedForwardTrace<S> {
    pub input: Tensor<S>,
    pub pre_activation: Tensor<S>,
    pub activation: Tensor<S>,
}

pub(crate) fn feed_forward<S: Scalar>(
    ff: &FeedForward<S>,
    x: &Tensor<S>,
) -> Result<(Tensor<S>, FeedForwardTrace<S>)> {
    let pre = x.matmul(&ff.w_in)?.add_row_vector(&ff.b_in)?;
    let act = pre.map(gelu);
    let out = act.matmul(&ff.w_out)?.add_row_vector(&ff.b_out)?;
    Ok((
        out,
        FeedForwardTrace {
            input: x.clone(),
            pre_activation: pre,
            activation: act,
        },
    ))
}

/// Inverted dropout on a sublayer output. Returns the scaled keep-mask when
/// dropout is active.
fn dropout<S: Scalar>(
    x: Tensor<S>,
    rate: f64,
    rng: &mut Option<&mut SeededRng>,
) -> (Tensor<S>, Option<Tensor<S>>) {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = S::lit(1.0 / (1.0 - rate));
            let mut mask = Tensor::zeros(x.shape());
            for m in mask.data_mut() {
                *m = if rng.next_f64() < rate {
                    S::zero()
                } else {
                    keep
                };
            }
            let y = x.hadamard(&mask).expect("same shape");
            (y, Some(mask))
        }
        _ => (x, None),
    }
}

fn residual_norm<S: Scalar>(
    x: &Tensor<S>,
    sub: &Tensor<S>,
    norm: &LayerNormParams<S>,
    eps: f64,
) -> Result<(Tensor<S>, LayerNormTrace<S>)> {
    layer_norm_forward(&x.add(sub)?, &norm.gain, &norm.bias, S::lit(eps))
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderLayerTrace<S> {
    pub attn: MhaTrace<S>,
    pub drop_attn: Option<Tensor<S>>,
    pub norm_attn: LayerNormTrace<S>,
    pub ff: FeedForwardTrace<S>,
    pub drop_ff: Option<Tensor<S>>,
    pub norm_ff: LayerNormTrace<S>,
}

/// Forward intermediates of the encoder stack.
#[derive(Clone, Debug)]
pub struct EncoderTrace<S> {
    pub(crate) ids: Vec<usize>,
    pub(crate) layers: Vec<EncoderLayerTrace<S>>,
}

fn encoder_layer<S: Scalar>(
    layer: &EncoderLayer<S>,
    x: &Tensor<S>,
    config: &ModelConfig,
    rng: &mut Option<&mut SeededRng>,
) -> Result<(Tensor<S>, EncoderLayerTrace<S>)> {
    let (a, attn) = mha_forward(x, x, &layer.self_attn, None)?;
    let (a, drop_attn) = dropout(a, config.dropout_rate, rng);
    let (h, norm_attn) = residual_norm(x, &a, &layer.norm_attn, config.layer_norm_eps)?;
    let (f, ff) = feed_forward(&layer.ff, &h)?;
    let (f, drop_ff) = dropout(f, config.dropout_rate, rng);
    let (out, norm_ff) = residual_norm(&h, &f, &layer.norm_ff, config.layer_norm_eps)?;
    Ok((
        out,
        EncoderLayerTrace {
            attn,
            drop_attn,
            norm_attn,
            ff,
            drop_ff,
            norm_ff,
        },
    ))
}

/// Source encodings, `S×d_model`.
pub fn encode<S: Scalar>(
    source: &TokenSequence,
    params: &ModelParams<S>,
    config: &ModelConfig,
) -> Result<Tensor<S>> {
    encode_traced(source.ids(), params, config, None).map(|(m, _)| m)
}

/// Encoder forward keeping intermediates. Passing an RNG enables dropout
/// at `config.dropout_rate`.
pub fn encode_traced<S: Scalar>(
    ids: &[usize],
    params: &ModelParams<S>,
    config: &ModelConfig,
    mut rng: Option<&mut SeededRng>,
) -> Result<(Tensor<S>, EncoderTrace<S>)> {
    let mut x = embed_tokens(ids, params, config)?;
    let mut layers = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let (y, trace) = encoder_layer(layer, &x, config, &mut rng)?;
        layers.push(trace);
        x = y;
    }
    Ok((
        x,
        EncoderTrace {
            ids: ids.to_vec(),
            layers,
        },
    ))
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderLayerTrace<S> {
    pub self_attn: MhaTrace<S>,
    pub drop_self: Option<Tensor<S>>,
    pub norm_self: LayerNormTrace<S>,
    pub cross_attn: MhaTrace<S>,
    pub drop_cross: Option<Tensor<S>>,
    pub norm_cross: LayerNormTrace<S>,
    pub ff: FeedForwardTrace<S>,
    pub drop_ff: Option<Tensor<S>>,
    pub norm_ff: LayerNormTrace<S>,
}

/// Forward intermediates of the decoder stack and output projection.
#[derive(Clone, Debug)]
pub struct DecoderTrace<S> {
    pub(crate) ids: Vec<usize>,
    pub(crate) layers: Vec<DecoderLayerTrace<S>>,
    pub(crate) hidden: Tensor<S>,
}

fn decoder_layer<S: Scalar>(
    layer: &DecoderLayer<S>,
    x: &Tensor<S>,
    memory: &Tensor<S>,
    mask: &MaskMatrix,
    config: &ModelConfig,
    rng: &mut Option<&mut SeededRng>,
) -> Result<(Tensor<S>, DecoderLayerTrace<S>)> {
    let (a, self_attn) = mha_forward(x, x, &layer.self_attn, Some(mask))?;
    let (a, drop_self) = dropout(a, config.dropout_rate, rng);
    let (h1, norm_self) = residual_norm(x, &a, &layer.norm_self, config.layer_norm_eps)?;
    let (c, cross_attn) = mha_forward(&h1, memory, &layer.cross_attn, None)?;
    let (c, drop_cross) = dropout(c, config.dropout_rate, rng);
    let (h2, norm_cross) = residual_norm(&h1, &c, &layer.norm_cross, config.layer_norm_eps)?;
    let (f, ff) = feed_forward(&layer.ff, &h2)?;
    let (f, drop_ff) = dropout(f, config.dropout_rate, rng);
    let (out, norm_ff) = residual_norm(&h2, &f, &layer.norm_ff, config.layer_norm_eps)?;
    Ok((
        out,
        DecoderLayerTrace {
            self_attn,
            drop_self,
            norm_self,
            cross_attn,
            drop_cross,
            norm_cross,
            ff,
            drop_ff,
            norm_ff,
        },
    ))
}

fn decode_layers<S: Scalar>(
    mut x: Tensor<S>,
    memory: &Tensor<S>,
    params: &ModelParams<S>,
    config: &ModelConfig,
    mut rng: Option<&mut SeededRng>,
) -> Result<(Tensor<S>, Vec<DecoderLayerTrace<S>>)> {
    config.validate()?;
    if memory.cols() != config.d_model {
        return Err(Error::dim(
            "decoder memory",
            memory.shape(),
            &[memory.rows(), config.d_model],
        ));
    }
    let mask = build_mask(config.mask, x.rows())?;
    let mut layers = Vec::with_capacity(params.decoder.len());
    for layer in &params.decoder {
        let (y, trace) = decoder_layer(layer, &x, memory, &mask, config, &mut rng)?;
        layers.push(trace);
        x = y;
    }
    Ok((x, layers))
}

/// Vocabulary logits for every prefix position, `T×V`. Row `k` scores the
/// token at position `k + 1`.
pub fn decode_full<S: Scalar>(
    prefix: &TokenSequence,
    memory: &Tensor<S>,
    params: &ModelParams<S>,
    config: &ModelConfig,
) -> Result<Tensor<S>> {
    decode_traced(prefix.ids(), memory, params, config, None).map(|(l, _)| l)
}

/// Decoder forward from already-embedded inputs (`T×d_model`), bypassing
/// the token lookup. Used to probe the receptive field.
pub fn decode_embedded<S: Scalar>(
    inputs: &Tensor<S>,
    memory: &Tensor<S>,
    params: &ModelParams<S>,
    config: &ModelConfig,
) -> Result<Tensor<S>> {
    if inputs.cols() != config.d_model {
        return Err(Error::dim(
            "decode_embedded",
            inputs.shape(),
            &[inputs.rows(), config.d_model],
        ));
    }
    let (hidden, _) = decode_layers(inputs.clone(), memory, params, config, None)?;
    hidden.matmul(&params.output)
}

pub fn decode_traced<S: Scalar>(
    ids: &[usize],
    memory: &Tensor<S>,
    params: &ModelParams<S>,
    config: &ModelConfig,
    rng: Option<&mut SeededRng>,
) -> Result<(Tensor<S>, DecoderTrace<S>)> {
    let x = embed_tokens(ids, params, config)?;
    let (hidden, layers) = decode_layers(x, memory, params, config, rng)?;
    let logits = hidden.matmul(&params.output)?;
    Ok((
        logits,
        DecoderTrace {
            ids: ids.to_vec(),
            layers,
            hidden,
        },
    ))
}

/// Decoder input and prediction targets under teacher forcing: input is
/// `target[..T-1]`, labels are `target[1..]`, and PAD labels are skipped.
pub(crate) fn teacher_forcing(target: &TokenSequence) -> Result<(&[usize], &[usize])> {
    let ids = target.ids();
    if ids.first() != Some(&BOS) {
        return Err(Error::Input("target must start with BOS".into()));
    }
    if ids.len() < 2 || ids[1..].iter().all(|&t| t == PAD) {
        return Err(Error::Input(
            "target has no tokens to predict after BOS".into(),
        ));
    }
    Ok((&ids[..ids.len() - 1], &ids[1..]))
}

/// Negative log-likelihood of `label` under `logits`, computed with a
/// max-shifted log-sum-exp.
pub(crate) fn token_nll<S: Scalar>(logits: &[S], label: usize) -> S {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<S>().ln() + max;
    lse - logits[label]
}

/// Mean token cross-entropy of `target[2..]` (1-indexed; BOS is never a
/// prediction target) under teacher forcing, with the full logit matrix.
pub fn model_forward_loss<S: Scalar>(
    source: &TokenSequence,
    target: &TokenSequence,
    params: &ModelParams<S>,
    config: &ModelConfig,
) -> Result<(S, Tensor<S>)> {
    let (total, count, logits) = nll_with_logits(source, target, params, config)?;
    Ok((total / S::from_usize(count).unwrap(), logits))
}

/// Summed token NLL under teacher forcing and the number of scored tokens.
pub fn sequence_nll<S: Scalar>(
    source: &TokenSequence,
    target: &TokenSequence,
    params: &ModelParams<S>,
    config: &ModelConfig,
) -> Result<(S, usize)> {
    nll_with_logits(source, target, params, config).map(|(t, c, _)| (t, c))
}

fn nll_with_logits<S: Scalar>(
    source: &TokenSequence,
    target: &TokenSequence,
    params: &ModelParams<S>,
    config: &ModelConfig,
) -> Result<(S, usize, Tensor<S>)> {
    let (input, labels) = teacher_forcing(target)?;
    let memory = encode(source, params, config)?;
    let (logits, _) = decode_traced(input, &memory, params, config, None)?;
    let mut total = S::zero();
    let mut count = 0usize;
    for (k, &label) in labels.iter().enumerate() {
        if label == PAD {
            continue;
        }
        total += token_nll(logits.row(k), label);
        count += 1;
    }
    Ok((total, count, logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskSpec;
    use crate::model::tokens::EOS;

    #[test]
    fn first_position_alternates_zero_one() {
        let pe: Tensor<f64> = sinusoidal_positions(4, 6).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn closed_form_spot_value() {
        let pe: Tensor<f64> = sinusoidal_positions(5, 8).unwrap();
        assert_eq!(pe.get(3, 0), 3f64.sin());
        assert_eq!(pe.get(3, 1), 3f64.cos());
        let f = 10000f64.powf(-2.0 / 8.0);
        assert!((pe.get(3, 2) - (3.0 * f).sin()).abs() < 1e-15);
    }

    #[test]
    fn odd_width_rejected() {
        assert!(matches!(
            sinusoidal_positions::<f64>(3, 5),
            Err(Error::Config(_))
        ));
    }

    fn tiny() -> (ModelConfig, ModelParams<f64>) {
        let cfg = ModelConfig::tiny(MaskSpec::ngram(3).unwrap());
        let p = ModelParams::init_random(&cfg, &mut SeededRng::new(17)).unwrap();
        (cfg, p)
    }

    #[test]
    fn encode_shape_and_position_sensitivity() {
        let (cfg, p) = tiny();
        let a = encode(&TokenSequence::source(vec![4, 5, 6]).unwrap(), &p, &cfg).unwrap();
        assert_eq!(a.shape(), &[3, 8]);
        let b = encode(&TokenSequence::source(vec![5, 4, 6]).unwrap(), &p, &cfg).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn out_of_vocab_is_input_error() {
        let (cfg, p) = tiny();
        let src = TokenSequence::source(vec![4, 11]).unwrap();
        assert!(matches!(encode(&src, &p, &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn prefix_longer_than_max_positions_rejected() {
        let (mut cfg, p) = tiny();
        cfg.max_positions = 4;
        let memory = encode(&TokenSequence::source(vec![4]).unwrap(), &p, &cfg).unwrap();
        let prefix = TokenSequence::prefix(vec![BOS, 3, 4, 5, 6]).unwrap();
        assert!(matches!(
            decode_full(&prefix, &memory, &p, &cfg),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn zero_output_projection_gives_ln_v() {
        let cfg = ModelConfig::tiny(MaskSpec::Causal);
        let p = ModelParams::<f64>::init(&cfg, &mut SeededRng::new(3)).unwrap();
        let src = TokenSequence::source(vec![3, 4, 5]).unwrap();
        let tgt = TokenSequence::target(vec![BOS, 3, 4, EOS, PAD]).unwrap();
        let (loss, _) = model_forward_loss(&src, &tgt, &p, &cfg).unwrap();
        assert_eq!(loss, (cfg.vocab_size as f64).ln());
    }

    #[test]
    fn bos_only_target_rejected() {
        let (cfg, p) = tiny();
        let src = TokenSequence::source(vec![3]).unwrap();
        let tgt = TokenSequence::prefix(vec![BOS]).unwrap();
        assert!(matches!(
            model_forward_loss(&src, &tgt, &p, &cfg),
            Err(Error::Input(_))
        ));
    }
}
