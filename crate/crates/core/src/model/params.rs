use crate::attention::MhaWeights;
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<S> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LayerNormParams<S> {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: Tensor::filled(&[d], S::one()),
            bias: Tensor::zeros(&[d]),
        }
    }
}

/// `GELU(x W_in + b_in) W_out + b_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<S> {
    pub w_in: Tensor<S>,
    pub b_in: Tensor<S>,
    pub w_out: Tensor<S>,
    pub b_out: Tensor<S>,
}

impl<S: Scalar> FeedForward<S> {
    pub fn init(rng: &mut SeededRng, d_model: usize, d_ff: usize) -> Self {
        Self {
            w_in: Tensor::xavier(rng, d_model, d_ff),
            b_in: Tensor::zeros(&[d_ff]),
            w_out: Tensor::xavier(rng, d_ff, d_model),
            b_out: Tensor::zeros(&[d_model]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<S> {
    pub self_attn: MhaWeights<S>,
    pub norm_attn: LayerNormParams<S>,
    pub ff: FeedForward<S>,
    pub norm_ff: LayerNormParams<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<S> {
    pub self_attn: MhaWeights<S>,
    pub norm_self: LayerNormParams<S>,
    pub cross_attn: MhaWeights<S>,
    pub norm_cross: LayerNormParams<S>,
    pub ff: FeedForward<S>,
    pub norm_ff: LayerNormParams<S>,
}

/// All trainable weights. Gradient records reuse this type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    /// Shared by source and target tokens, `V×d_model`.
    pub embedding: Tensor<S>,
    pub encoder: Vec<EncoderLayer<S>>,
    pub decoder: Vec<DecoderLayer<S>>,
    /// `d_model×V`, not tied to the embedding.
    pub output: Tensor<S>,
}

impl<S: Scalar> ModelParams<S> {
    /// Xavier weights, unit layer-norm gains, zero biases and a zero output
    /// projection, so an untrained model predicts uniformly.
    pub fn init(config: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.d_model, config.num_heads);
        let embedding = Tensor::xavier(rng, config.vocab_size, d);
        let encoder = (0..config.num_layers)
            .map(|_| EncoderLayer {
                self_attn: MhaWeights::init(rng, d, h),
                norm_attn: LayerNormParams::identity(d),
                ff: FeedForward::init(rng, d, config.d_ff),
                norm_ff: LayerNormParams::identity(d),
            })
            .collect();
        let decoder = (0..config.num_layers)
            .map(|_| DecoderLayer {
                self_attn: MhaWeights::init(rng, d, h),
                norm_self: LayerNormParams::identity(d),
                cross_attn: MhaWeights::init(rng, d, h),
                norm_cross: LayerNormParams::identity(d),
                ff: FeedForward::init(rng, d, config.d_ff),
                norm_ff: LayerNormParams::identity(d),
            })
            .collect();
        Ok(Self {
            embedding,
            encoder,
            decoder,
            output: Tensor::zeros(&[d, config.vocab_size]),
        })
    }

    /// Like [`init`](Self::init) but every tensor, including gains, biases
    /// and the output projection, gets random values. Used where a generic
    /// operating point matters (gradient checks, equivalence tests).
    pub fn init_random(config: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let mut p = Self::init(config, rng)?;
        p.output = Tensor::xavier(rng, config.d_model, config.vocab_size);
        for t in p.tensors_mut() {
            if t.rank() == 1 {
                let base = if t.data().iter().all(|&x| x == S::one()) {
                    1.0
                } else {
                    0.0
                };
                for x in t.data_mut() {
                    *x = S::lit(base + rng.uniform(-0.2, 0.2));
                }
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(S::zero());
        }
        z
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::init(config, &mut SeededRng::new(0))?;
        if self.encoder.len() != config.num_layers || self.decoder.len() != config.num_layers {
            return Err(Error::Config(format!(
                "parameter record has {}/{} layers, config wants {}",
                self.encoder.len(),
                self.decoder.len(),
                config.num_layers
            )));
        }
        for ((name, t), e) in self
            .names()
            .iter()
            .zip(self.tensors())
            .zip(expected.tensors())
        {
            if t.shape() != e.shape() {
                return Err(Error::Config(format!(
                    "tensor {name} has shape {:?}, config wants {:?}",
                    t.shape(),
                    e.shape()
                )));
            }
        }
        for l in self.encoder.iter().map(|l| &l.self_attn).chain(
            self.decoder
                .iter()
                .flat_map(|l| [&l.self_attn, &l.cross_attn]),
        ) {
            if l.num_heads != config.num_heads {
                return Err(Error::Config(format!(
                    "parameter record has {} heads, config wants {}",
                    l.num_heads, config.num_heads
                )));
            }
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, factor: S) {
        for t in self.tensors_mut() {
            t.scale_in_place(factor);
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        let mha = |w: &MhaWeights<S>| MhaWeights {
            num_heads: w.num_heads,
            w_query: w.w_query.cast(),
            w_key: w.w_key.cast(),
            w_value: w.w_value.cast(),
            w_out: w.w_out.cast(),
        };
        let ln = |n: &LayerNormParams<S>| LayerNormParams {
            gain: n.gain.cast(),
            bias: n.bias.cast(),
        };
        let ff = |f: &FeedForward<S>| FeedForward {
            w_in: f.w_in.cast(),
            b_in: f.b_in.cast(),
            w_out: f.w_out.cast(),
            b_out: f.b_out.cast(),
        };
        ModelParams {
            embedding: self.embedding.cast(),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayer {
                    self_attn: mha(&l.self_attn),
                    norm_attn: ln(&l.norm_attn),
                    ff: ff(&l.ff),
                    norm_ff: ln(&l.norm_ff),
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLayer {
                    self_attn: mha(&l.self_attn),
                    norm_self: ln(&l.norm_self),
                    cross_attn: mha(&l.cross_attn),
                    norm_cross: ln(&l.norm_cross),
                    ff: ff(&l.ff),
                    norm_ff: ln(&l.norm_ff),
                })
                .collect(),
            output: self.output.cast(),
        }
    }
}

fn push_mha<'a, S>(out: &mut Vec<&'a Tensor<S>>, w: &'a MhaWeights<S>) {
    out.extend([&w.w_query, &w.w_key, &w.w_value, &w.w_out]);
}

fn push_ff<'a, S>(out: &mut Vec<&'a Tensor<S>>, f: &'a FeedForward<S>) {
    out.extend([&f.w_in, &f.b_in, &f.w_out, &f.b_out]);
}

fn push_ln<'a, S>(out: &mut Vec<&'a Tensor<S>>, n: &'a LayerNormParams<S>) {
    out.extend([&n.gain, &n.bias]);
}

const MHA_NAMES: [&str; 4] = ["w_query", "w_key", "w_value", "w_out"];
const FF_NAMES: [&str; 4] = ["w_in", "b_in", "w_out", "b_out"];
const LN_NAMES: [&str; 2] = ["gain", "bias"];

fn prefixed(out: &mut Vec<String>, prefix: &str, names: &[&str]) {
    out.extend(names.iter().map(|n| format!("{prefix}.{n}")));
}

impl<S: Scalar> Parameters<S> for ModelParams<S> {
    fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![&self.embedding];
        for l in &self.encoder {
            push_mha(&mut out, &l.self_attn);
            push_ln(&mut out, &l.norm_attn);
            push_ff(&mut out, &l.ff);
            push_ln(&mut out, &l.norm_ff);
        }
        for l in &self.decoder {
            push_mha(&mut out, &l.self_attn);
            push_ln(&mut out, &l.norm_self);
            push_mha(&mut out, &l.cross_attn);
            push_ln(&mut out, &l.norm_cross);
            push_ff(&mut out, &l.ff);
            push_ln(&mut out, &l.norm_ff);
        }
        out.push(&self.output);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.encoder {
            out.extend(l.self_attn.tensors_mut());
            out.extend([&mut l.norm_attn.gain, &mut l.norm_attn.bias]);
            out.extend([
                &mut l.ff.w_in,
                &mut l.ff.b_in,
                &mut l.ff.w_out,
                &mut l.ff.b_out,
            ]);
            out.extend([&mut l.norm_ff.gain, &mut l.norm_ff.bias]);
        }
        for l in &mut self.decoder {
            out.extend(l.self_attn.tensors_mut());
            out.extend([&mut l.norm_self.gain, &mut l.norm_self.bias]);
            out.extend(l.cross_attn.tensors_mut());
            out.extend([&mut l.norm_cross.gain, &mut l.norm_cross.bias]);
            out.extend([
                &mut l.ff.w_in,
                &mut l.ff.b_in,
                &mut l.ff.w_out,
                &mut l.ff.b_out,
            ]);
            out.extend([&mut l.norm_ff.gain, &mut l.norm_ff.bias]);
        }
        out.push(&mut self.output);
        out
    }

    fn names(&self) -> Vec<String> {
        let mut out = vec!["embedding".to_string()];
        for i in 0..self.encoder.len() {
            prefixed(&mut out, &format!("encoder.{i}.self_attn"), &MHA_NAMES);
            prefixed(&mut out, &format!("encoder.{i}.norm_attn"), &LN_NAMES);
            prefixed(&mut out, &format!("encoder.{i}.ff"), &FF_NAMES);
            prefixed(&mut out, &format!("encoder.{i}.norm_ff"), &LN_NAMES);
        }
        for i in 0..self.decoder.len() {
            prefixed(&mut out, &format!("decoder.{i}.self_attn"), &MHA_NAMES);
            prefixed(&mut out, &format!("decoder.{i}.norm_self"), &LN_NAMES);
            prefixed(&mut out, &format!("decoder.{i}.cross_attn"), &MHA_NAMES);
            prefixed(&mut out, &format!("decoder.{i}.norm_cross"), &LN_NAMES);
            prefixed(&mut out, &format!("decoder.{i}.ff"), &FF_NAMES);
            prefixed(&mut out, &format!("decoder.{i}.norm_ff"), &LN_NAMES);
        }
        out.push("output".to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskSpec;

    #[test]
    fn enumeration_orders_agree() {
        let cfg = ModelConfig::tiny(MaskSpec::Causal);
        let mut p = ModelParams::<f64>::init(&cfg, &mut SeededRng::new(1)).unwrap();
        let names = p.names();
        let shapes: Vec<Vec<usize>> = p.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let shapes_mut: Vec<Vec<usize>> =
            p.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(names.len(), shapes.len());
        assert_eq!(shapes, shapes_mut);
        assert_eq!(names.len(), 1 + 2 * 12 + 2 * 18 + 1);
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn output_projection_starts_at_zero() {
        let cfg = ModelConfig::tiny(MaskSpec::Causal);
        let p = ModelParams::<f64>::init(&cfg, &mut SeededRng::new(1)).unwrap();
        assert!(p.output.data().iter().all(|&x| x == 0.0));
        p.check_shapes(&cfg).unwrap();
        let mut other = cfg.clone();
        other.vocab_size = 12;
        assert!(p.check_shapes(&other).is_err());
    }
}
