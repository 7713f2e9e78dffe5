//! Scaled dot-product and multi-head attention, forward and backward.

use crate::error::{Error, Result};
use crate::mask::MaskMatrix;
use crate::ops::softmax_in_place;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Logit assigned to masked key positions before the softmax. After max
/// subtraction its exponential underflows to exactly zero.
pub const MASK_SENTINEL: f64 = -1.0e30;

/// Output of an attention call together with its weight matrix.
#[derive(Clone, Debug)]
pub struct AttentionForward<S> {
    pub output: Tensor<S>,
    pub weights: Tensor<S>,
}

/// `softmax(Q Kᵀ / sqrt(d_k) + mask) V`.
pub fn scaled_dot_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: Option<&MaskMatrix>,
) -> Result<Tensor<S>> {
    attention_with_weights(q, k, v, mask).map(|f| f.output)
}

pub fn attention_with_weights<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: Option<&MaskMatrix>,
) -> Result<AttentionForward<S>> {
    if q.cols() != k.cols() {
        return Err(Error::dim("attention q/k", q.shape(), k.shape()));
    }
    if k.rows() != v.rows() {
        return Err(Error::dim("attention k/v", k.shape(), v.shape()));
    }
    let (tq, tk) = (q.rows(), k.rows());
    if let Some(m) = mask {
        if m.size() != tq || m.size() != tk {
            return Err(Error::dim(
                "attention mask",
                &[m.size(), m.size()],
                &[tq, tk],
            ));
        }
    }
    let scale = S::one() / S::from_usize(q.cols()).unwrap().sqrt();
    let mut logits = q.matmul_t(k)?;
    logits.scale_in_place(scale);
    if let Some(m) = mask {
        let sentinel = S::lit(MASK_SENTINEL);
        for i in 0..tq {
            let row = m.row(i);
            if !row.iter().any(|&a| a) {
                return Err(Error::Contract(format!(
                    "query row {} has no visible key",
                    i + 1
                )));
            }
            for (x, &a) in logits.row_mut(i).iter_mut().zip(row) {
                if !a {
                    *x = sentinel;
                }
            }
        }
    }
    for i in 0..tq {
        softmax_in_place(logits.row_mut(i));
    }
    let output = logits.matmul(v)?;
    Ok(AttentionForward {
        output,
        weights: logits,
    })
}

/// Gradients with respect to the three attention inputs.
#[derive(Clone, Debug)]
pub struct AttentionGrads<S> {
    pub d_query: Tensor<S>,
    pub d_key: Tensor<S>,
    pub d_value: Tensor<S>,
}

/// Backward pass given the weights produced by the forward call.
///
/// Masked positions have weight exactly zero, so they receive exactly zero
/// gradient through the softmax.
pub fn attention_backward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    weights: &Tensor<S>,
    d_out: &Tensor<S>,
) -> Result<AttentionGrads<S>> {
    if d_out.rows() != q.rows() || d_out.cols() != v.cols() {
        return Err(Error::dim(
            "attention_backward",
            d_out.shape(),
            &[q.rows(), v.cols()],
        ));
    }
    if weights.rows() != q.rows() || weights.cols() != k.rows() {
        return Err(Error::dim(
            "attention_backward weights",
            weights.shape(),
            &[q.rows(), k.rows()],
        ));
    }
    let scale = S::one() / S::from_usize(q.cols()).unwrap().sqrt();
    let d_value = weights.t_matmul(d_out)?;
    let mut d_logits = d_out.matmul_t(v)?;
    for i in 0..q.rows() {
        let p = weights.row(i);
        let dp = d_logits.row_mut(i);
        let inner: S = p.iter().zip(dp.iter()).map(|(&a, &b)| a * b).sum();
        for (g, &w) in dp.iter_mut().zip(p) {
            *g = w * (*g - inner) * scale;
        }
    }
    Ok(AttentionGrads {
        d_query: d_logits.matmul(k)?,
        d_key: d_logits.t_matmul(q)?,
        d_value,
    })
}

/// Convenience form that recomputes the forward weights.
pub fn scaled_dot_attention_backward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: Option<&MaskMatrix>,
    d_out: &Tensor<S>,
) -> Result<AttentionGrads<S>> {
    let fwd = attention_with_weights(q, k, v, mask)?;
    attention_backward(q, k, v, &fwd.weights, d_out)
}

/// Projection weights of one multi-head attention block.
///
/// Each projection is a `d_model×d_model` matrix; head `h` owns columns
/// `h*d_k .. (h+1)*d_k` of the query, key and value projections and the
/// matching rows of the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaWeights<S> {
    pub num_heads: usize,
    pub w_query: Tensor<S>,
    pub w_key: Tensor<S>,
    pub w_value: Tensor<S>,
    pub w_out: Tensor<S>,
}

impl<S: Scalar> MhaWeights<S> {
    pub fn new(
        num_heads: usize,
        w_query: Tensor<S>,
        w_key: Tensor<S>,
        w_value: Tensor<S>,
        w_out: Tensor<S>,
    ) -> Result<Self> {
        let w = Self {
            num_heads,
            w_query,
            w_key,
            w_value,
            w_out,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn init(rng: &mut SeededRng, d_model: usize, num_heads: usize) -> Self {
        Self {
            num_heads,
            w_query: Tensor::xavier(rng, d_model, d_model),
            w_key: Tensor::xavier(rng, d_model, d_model),
            w_value: Tensor::xavier(rng, d_model, d_model),
            w_out: Tensor::xavier(rng, d_model, d_model),
        }
    }

    pub fn zeros(d_model: usize, num_heads: usize) -> Self {
        let z = Tensor::zeros(&[d_model, d_model]);
        Self {
            num_heads,
            w_query: z.clone(),
            w_key: z.clone(),
            w_value: z.clone(),
            w_out: z,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        if self.num_heads == 0 || !d.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide model width {d}",
                self.num_heads
            )));
        }
        for t in [&self.w_query, &self.w_key, &self.w_value, &self.w_out] {
            if t.shape() != [d, d] {
                return Err(Error::dim("mha weights", t.shape(), &[d, d]));
            }
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.w_query.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.num_heads
    }

    pub fn tensors(&self) -> [&Tensor<S>; 4] {
        [&self.w_query, &self.w_key, &self.w_value, &self.w_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<S>; 4] {
        [
            &mut self.w_query,
            &mut self.w_key,
            &mut self.w_value,
            &mut self.w_out,
        ]
    }
}

/// Everything the backward pass needs from a multi-head forward call.
#[derive(Clone, Debug)]
pub struct MhaTrace<S> {
    pub x_q: Tensor<S>,
    pub x_kv: Tensor<S>,
    pub query: Tensor<S>,
    pub key: Tensor<S>,
    pub value: Tensor<S>,
    pub head_weights: Vec<Tensor<S>>,
    pub context: Tensor<S>,
}

pub fn multi_head_attention<S: Scalar>(
    x_q: &Tensor<S>,
    x_kv: &Tensor<S>,
    w: &MhaWeights<S>,
    mask: Option<&MaskMatrix>,
) -> Result<Tensor<S>> {
    mha_forward(x_q, x_kv, w, mask).map(|(y, _)| y)
}

pub fn mha_forward<S: Scalar>(
    x_q: &Tensor<S>,
    x_kv: &Tensor<S>,
    w: &MhaWeights<S>,
    mask: Option<&MaskMatrix>,
) -> Result<(Tensor<S>, MhaTrace<S>)> {
    let d = w.d_model();
    if x_q.cols() != d || x_kv.cols() != d {
        return Err(Error::dim(
            "multi_head_attention",
            &[x_q.cols(), x_kv.cols()],
            &[d, d],
        ));
    }
    let query = x_q.matmul(&w.w_query)?;
    let key = x_kv.matmul(&w.w_key)?;
    let value = x_kv.matmul(&w.w_value)?;
    let dk = w.head_dim();
    let mut context = Tensor::zeros(&[x_q.rows(), d]);
    let mut head_weights = Vec::with_capacity(w.num_heads);
    for h in 0..w.num_heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let fwd = attention_with_weights(
            &query.slice_cols(lo, hi),
            &key.slice_cols(lo, hi),
            &value.slice_cols(lo, hi),
            mask,
        )?;
        context.set_cols(lo, &fwd.output);
        head_weights.push(fwd.weights);
    }
    let out = context.matmul(&w.w_out)?;
    Ok((
        out,
        MhaTrace {
            x_q: x_q.clone(),
            x_kv: x_kv.clone(),
            query,
            key,
            value,
            head_weights,
            context,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct MhaGrads<S> {
    pub d_x_q: Tensor<S>,
    pub d_x_kv: Tensor<S>,
    pub weights: MhaWeights<S>,
}

pub fn mha_backward<S: Scalar>(
    w: &MhaWeights<S>,
    trace: &MhaTrace<S>,
    d_out: &Tensor<S>,
) -> Result<MhaGrads<S>> {
    let d = w.d_model();
    if d_out.cols() != d || d_out.rows() != trace.x_q.rows() {
        return Err(Error::dim("mha_backward", d_out.shape(), trace.x_q.shape()));
    }
    let d_w_out = trace.context.t_matmul(d_out)?;
    let d_context = d_out.matmul_t(&w.w_out)?;
    let dk = w.head_dim();
    let mut d_query = Tensor::zeros(trace.query.shape());
    let mut d_key = Tensor::zeros(trace.key.shape());
    let mut d_value = Tensor::zeros(trace.value.shape());
    for h in 0..w.num_heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let g = attention_backward(
            &trace.query.slice_cols(lo, hi),
            &trace.key.slice_cols(lo, hi),
            &trace.value.slice_cols(lo, hi),
            &trace.head_weights[h],
            &d_context.slice_cols(lo, hi),
        )?;
        d_query.set_cols(lo, &g.d_query);
        d_key.set_cols(lo, &g.d_key);
        d_value.set_cols(lo, &g.d_value);
    }
    let d_x_q = d_query.matmul_t(&w.w_query)?;
    let mut d_x_kv = d_key.matmul_t(&w.w_key)?;
    d_x_kv.add_assign(&d_value.matmul_t(&w.w_value)?)?;
    Ok(MhaGrads {
        d_x_q,
        d_x_kv,
        weights: MhaWeights {
            num_heads: w.num_heads,
            w_query: trace.x_q.t_matmul(&d_query)?,
            w_key: trace.x_kv.t_matmul(&d_key)?,
            w_value: trace.x_kv.t_matmul(&d_value)?,
            w_out: d_w_out,
        },
    })
}
