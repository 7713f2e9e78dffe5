//! Row-wise kernels: softmax, layer normalization, GELU.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Softmax over each row, stabilized by subtracting the row maximum.
pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut out = x.clone();
    let n = x.cols();
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = S::one() / total;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Intermediate values kept by [`layer_norm_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormTrace<S> {
    pub normalized: Tensor<S>,
    pub inv_std: Vec<S>,
}

/// Per-row normalization to zero mean and unit variance (1/n), then
/// elementwise `gain` and `bias`.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    bias: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    layer_norm_forward(x, gain, bias, eps).map(|(y, _)| y)
}

pub fn layer_norm_forward<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    bias: &Tensor<S>,
    eps: S,
) -> Result<(Tensor<S>, LayerNormTrace<S>)> {
    let n = x.cols();
    if gain.len() != n || bias.len() != n {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    let nf = S::from_usize(n).unwrap();
    let mut normalized = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for (xr, (nr, yr)) in x.data().chunks(n).zip(
        normalized
            .data_mut()
            .chunks_mut(n)
            .zip(out.data_mut().chunks_mut(n)),
    ) {
        let mean = xr.iter().copied().sum::<S>() / nf;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
        let r = S::one() / (var + eps).sqrt();
        inv_std.push(r);
        for j in 0..n {
            nr[j] = (xr[j] - mean) * r;
            yr[j] = nr[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((
        out,
        LayerNormTrace {
            normalized,
            inv_std,
        },
    ))
}

/// Gradients of a layer normalization: `(d_x, d_gain, d_bias)`.
pub fn layer_norm_backward<S: Scalar>(
    trace: &LayerNormTrace<S>,
    gain: &Tensor<S>,
    d_out: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let n = d_out.cols();
    let nf = S::from_usize(n).unwrap();
    let mut d_x = d_out.clone();
    let mut d_gain = vec![S::zero(); n];
    let mut d_bias = vec![S::zero(); n];
    let mut d_hat = vec![S::zero(); n];
    for (i, (dy, dx)) in d_out
        .data()
        .chunks(n)
        .zip(d_x.data_mut().chunks_mut(n))
        .enumerate()
    {
        let xh = trace.normalized.row(i);
        let mut mean_d = S::zero();
        let mut mean_dx = S::zero();
        for j in 0..n {
            d_gain[j] += dy[j] * xh[j];
            d_bias[j] += dy[j];
            d_hat[j] = dy[j] * gain.data()[j];
            mean_d += d_hat[j];
            mean_dx += d_hat[j] * xh[j];
        }
        mean_d /= nf;
        mean_dx /= nf;
        let r = trace.inv_std[i];
        for j in 0..n {
            dx[j] = r * (d_hat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    (d_x, Tensor::vector(d_gain), Tensor::vector(d_bias))
}

const GELU_CUBIC: f64 = 0.044715;

/// GELU, tanh approximation.
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + S::lit(GELU_CUBIC) * x * x * x)).tanh())
}

pub fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = S::lit(0.5);
    let k = S::lit(GELU_CUBIC);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    type T = Tensor<f64>;

    #[test]
    fn uniform_logits() {
        let x = T::from_f64_rows(&[&[0.0; 4]]).unwrap();
        assert_eq!(softmax_rows(&x).data(), &[0.25; 4]);
    }

    #[test]
    fn large_constant_shift_does_not_overflow() {
        let x = T::from_f64_rows(&[&[1000.0, 1000.0]]).unwrap();
        assert_eq!(softmax_rows(&x).data(), &[0.5, 0.5]);
    }

    #[test]
    fn ln3_logit_gives_quarter_and_three_quarters() {
        // e^0 / (e^0 + e^ln3) = 1/4 exactly in real arithmetic
        let x = T::from_f64_rows(&[&[0.0, 3.0f64.ln()]]).unwrap();
        let y = softmax_rows(&x);
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = SeededRng::new(2);
        let x = T::random_uniform(&mut rng, &[6, 9], 30.0);
        let y = softmax_rows(&x);
        for i in 0..6 {
            let s: f64 = y.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(y.row(i).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn constant_row_normalizes_to_bias() {
        let x = T::from_f64_rows(&[&[3.0; 5]]).unwrap();
        let g = T::filled(&[5], 1.0);
        let b = T::zeros(&[5]);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_row_is_fixed_point() {
        let x = T::from_f64_rows(&[&[-1.0, 1.0]]).unwrap();
        let y = layer_norm(&x, &T::filled(&[2], 1.0), &T::zeros(&[2]), 1e-14).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = SeededRng::new(8);
        let x = T::random_uniform(&mut rng, &[3, 7], 4.0);
        let g = T::random_uniform(&mut rng, &[7], 2.0);
        let b = T::random_uniform(&mut rng, &[7], 2.0);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for i in 0..3 {
            let r = x.row(i);
            let mean = r.iter().sum::<f64>() / 7.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            #[allow(clippy::needless_range_loop)]
            for j in 0..7 {
                let want = (r[j] - mean) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j];
                assert!((y.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(21);
        let x = T::random_uniform(&mut rng, &[2, 5], 2.0);
        let g = T::random_uniform(&mut rng, &[5], 2.0);
        let b = T::random_uniform(&mut rng, &[5], 1.0);
        let w = T::random_uniform(&mut rng, &[2, 5], 1.0);
        let loss = |x: &T| {
            layer_norm(x, &g, &b, 1e-5)
                .unwrap()
                .hadamard(&w)
                .unwrap()
                .sum()
        };
        let (_, trace) = layer_norm_forward(&x, &g, &b, 1e-5).unwrap();
        let (dx, _, _) = layer_norm_backward(&trace, &g, &w);
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!(
                (num - dx.data()[idx]).abs() < 1e-7,
                "{num} vs {}",
                dx.data()[idx]
            );
        }
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_derivative(x)).abs() < 1e-8);
        }
    }
}
