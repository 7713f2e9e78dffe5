use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one parameter record, in `Parameters` order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
    steps: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<P: Parameters<S>>(params: &P, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<S>> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moments(&self) -> &[Tensor<S>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<S>] {
        &self.second
    }

    /// One bias-corrected Adam update of `params` along `grads`.
    pub fn step<P: Parameters<S>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.tensors();
        let mut p = params.tensors_mut();
        if p.len() != self.first.len() || g.len() != p.len() {
            return Err(Error::dim(
                "adam tensor count",
                &[p.len(), g.len()],
                &[self.first.len(); 2],
            ));
        }
        for ((pi, gi), mi) in p.iter().zip(&g).zip(&self.first) {
            if pi.shape() != gi.shape() || pi.shape() != mi.shape() {
                return Err(Error::dim("adam", gi.shape(), pi.shape()));
            }
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let correct1 = S::lit(1.0 - c.beta1.powi(t));
        let correct2 = S::lit(1.0 - c.beta2.powi(t));
        let (lr, eps) = (S::lit(c.lr), S::lit(c.eps));
        for (((pi, gi), mi), vi) in p
            .iter_mut()
            .zip(&g)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let iter = pi
                .data_mut()
                .iter_mut()
                .zip(gi.data())
                .zip(mi.data_mut())
                .zip(vi.data_mut());
            for (((theta, &grad), m), v) in iter {
                *m = b1 * *m + (S::one() - b1) * grad;
                *v = b2 * *v + (S::one() - b2) * grad * grad;
                let m_hat = *m / correct1;
                let v_hat = *v / correct2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<S: Scalar, P: Parameters<S>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<S>,
) -> Result<()> {
    state.step(params, grads)
}
