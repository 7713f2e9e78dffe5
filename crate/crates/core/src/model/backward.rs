use crate::attention::mha_backward;
use crate::error::Result;
use crate::ops::{gelu_derivative, layer_norm_backward, softmax_in_place, LayerNormTrace};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::forward::{
    decode_traced, encode_traced, teacher_forcing, token_nll, DecoderTrace, EncoderTrace,
    FeedForwardTrace,
};
use super::params::{FeedForward, LayerNormParams, ModelParams};
use super::tokens::{TokenSequence, PAD};

/// Summed token NLL of one example and its gradient.
#[derive(Clone, Debug)]
pub struct ExampleGradients<S> {
    pub nll_sum: S,
    pub tokens: usize,
    /// Gradient of `nll_sum` (not the mean).
    pub grads: ModelParams<S>,
}

/// Gradient of the mean token loss of [`model_forward_loss`](super::model_forward_loss).
pub fn model_backward<S: Scalar>(
    source: &TokenSequence,
    target: &TokenSequence,
    params: &ModelParams<S>,
    config: &ModelConfig,
) -> Result<ModelParams<S>> {
    let mut g = example_gradients(source, target, params, config, None)?;
    g.grads
        .scale_in_place(S::one() / S::from_usize(g.tokens).unwrap());
    Ok(g.grads)
}

/// Forward and backward for one `(source, target)` pair. An RNG enables
/// dropout.
pub fn example_gradients<S: Scalar>(
    source: &TokenSequence,
    target: &TokenSequence,
    params: &ModelParams<S>,
    config: &ModelConfig,
    mut rng: Option<&mut SeededRng>,
) -> Result<ExampleGradients<S>> {
    let (input, labels) = teacher_forcing(target)?;
    let (memory, enc) = encode_traced(source.ids(), params, config, rng.as_deref_mut())?;
    let (logits, dec) = decode_traced(input, &memory, params, config, rng)?;

    let mut nll_sum = S::zero();
    let mut tokens = 0;
    let mut d_logits = Tensor::zeros(logits.shape());
    for (k, &label) in labels.iter().enumerate() {
        if label == PAD {
            continue;
        }
        nll_sum += token_nll(logits.row(k), label);
        tokens += 1;
        let row = d_logits.row_mut(k);
        row.copy_from_slice(logits.row(k));
        softmax_in_place(row);
        row[label] -= S::one();
    }

    let mut grads = params.zeros_like();
    grads.output = dec.hidden.t_matmul(&d_logits)?;
    let d_hidden = d_logits.matmul_t(&params.output)?;
    let d_memory = decoder_backward(params, config, &dec, d_hidden, &mut grads)?;
    encoder_backward(params, config, &enc, d_memory, &mut grads)?;
    Ok(ExampleGradients {
        nll_sum,
        tokens,
        grads,
    })
}

fn apply_dropout_grad<S: Scalar>(d: &Tensor<S>, mask: &Option<Tensor<S>>) -> Result<Tensor<S>> {
    match mask {
        Some(m) => d.hadamard(m),
        None => Ok(d.clone()),
    }
}

fn norm_backward<S: Scalar>(
    trace: &LayerNormTrace<S>,
    norm: &LayerNormParams<S>,
    grad: &mut LayerNormParams<S>,
    d_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (d_x, d_gain, d_bias) = layer_norm_backward(trace, &norm.gain, d_out);
    grad.gain.add_assign(&d_gain)?;
    grad.bias.add_assign(&d_bias)?;
    Ok(d_x)
}

fn feed_forward_backward<S: Scalar>(
    ff: &FeedForward<S>,
    trace: &FeedForwardTrace<S>,
    grad: &mut FeedForward<S>,
    d_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    grad.w_out.add_assign(&trace.activation.t_matmul(d_out)?)?;
    grad.b_out.add_assign(&d_out.sum_rows())?;
    let d_act = d_out.matmul_t(&ff.w_out)?;
    let mut d_pre = d_act;
    for (d, &z) in d_pre.data_mut().iter_mut().zip(trace.pre_activation.data()) {
        *d *= gelu_derivative(z);
    }
    grad.w_in.add_assign(&trace.input.t_matmul(&d_pre)?)?;
    grad.b_in.add_assign(&d_pre.sum_rows())?;
    d_pre.matmul_t(&ff.w_in)
}

fn accumulate_mha<S: Scalar>(
    grad: &mut crate::attention::MhaWeights<S>,
    g: &crate::attention::MhaWeights<S>,
) -> Result<()> {
    for (a, b) in grad.tensors_mut().into_iter().zip(g.tensors()) {
        a.add_assign(b)?;
    }
    Ok(())
}

fn embedding_backward<S: Scalar>(
    ids: &[usize],
    d_x: &Tensor<S>,
    config: &ModelConfig,
    grads: &mut ModelParams<S>,
) {
    let scale = S::from_usize(config.d_model).unwrap().sqrt();
    for (i, &id) in ids.iter().enumerate() {
        let src = d_x.row(i);
        for (g, &d) in grads.embedding.row_mut(id).iter_mut().zip(src) {
            *g += scale * d;
        }
    }
}

/// Returns the gradient with respect to the encoder memory.
fn decoder_backward<S: Scalar>(
    params: &ModelParams<S>,
    config: &ModelConfig,
    trace: &DecoderTrace<S>,
    mut d_x: Tensor<S>,
    grads: &mut ModelParams<S>,
) -> Result<Tensor<S>> {
    let mem_shape = trace.layers[0].cross_attn.x_kv.shape().to_vec();
    let mut d_memory = Tensor::zeros(&mem_shape);
    for (i, (layer, lt)) in params.decoder.iter().zip(&trace.layers).enumerate().rev() {
        let g = &mut grads.decoder[i];

        let d_h2_sum = norm_backward(&lt.norm_ff, &layer.norm_ff, &mut g.norm_ff, &d_x)?;
        let d_f = apply_dropout_grad(&d_h2_sum, &lt.drop_ff)?;
        let mut d_h2 = feed_forward_backward(&layer.ff, &lt.ff, &mut g.ff, &d_f)?;
        d_h2.add_assign(&d_h2_sum)?;

        let d_h1_sum = norm_backward(&lt.norm_cross, &layer.norm_cross, &mut g.norm_cross, &d_h2)?;
        let d_c = apply_dropout_grad(&d_h1_sum, &lt.drop_cross)?;
        let cross = mha_backward(&layer.cross_attn, &lt.cross_attn, &d_c)?;
        accumulate_mha(&mut g.cross_attn, &cross.weights)?;
        d_memory.add_assign(&cross.d_x_kv)?;
        let mut d_h1 = cross.d_x_q;
        d_h1.add_assign(&d_h1_sum)?;

        let d_in_sum = norm_backward(&lt.norm_self, &layer.norm_self, &mut g.norm_self, &d_h1)?;
        let d_a = apply_dropout_grad(&d_in_sum, &lt.drop_self)?;
        let own = mha_backward(&layer.self_attn, &lt.self_attn, &d_a)?;
        accumulate_mha(&mut g.self_attn, &own.weights)?;
        let mut d_in = own.d_x_q;
        d_in.add_assign(&own.d_x_kv)?;
        d_in.add_assign(&d_in_sum)?;
        d_x = d_in;
    }
    embedding_backward(&trace.ids, &d_x, config, grads);
    Ok(d_memory)
}

fn encoder_backward<S: Scalar>(
    params: &ModelParams<S>,
    config: &ModelConfig,
    trace: &EncoderTrace<S>,
    mut d_x: Tensor<S>,
    grads: &mut ModelParams<S>,
) -> Result<()> {
    for (i, (layer, lt)) in params.encoder.iter().zip(&trace.layers).enumerate().rev() {
        let g = &mut grads.encoder[i];

        let d_h_sum = norm_backward(&lt.norm_ff, &layer.norm_ff, &mut g.norm_ff, &d_x)?;
        let d_f = apply_dropout_grad(&d_h_sum, &lt.drop_ff)?;
        let mut d_h = feed_forward_backward(&layer.ff, &lt.ff, &mut g.ff, &d_f)?;
        d_h.add_assign(&d_h_sum)?;

        let d_in_sum = norm_backward(&lt.norm_attn, &layer.norm_attn, &mut g.norm_attn, &d_h)?;
        let d_a = apply_dropout_grad(&d_in_sum, &lt.drop_attn)?;
        let own = mha_backward(&layer.self_attn, &lt.attn, &d_a)?;
        accumulate_mha(&mut g.self_attn, &own.weights)?;
        let mut d_in = own.d_x_q;
        d_in.add_assign(&own.d_x_kv)?;
        d_in.add_assign(&d_in_sum)?;
        d_x = d_in;
    }
    embedding_backward(&trace.ids, &d_x, config, grads);
    Ok(())
}
