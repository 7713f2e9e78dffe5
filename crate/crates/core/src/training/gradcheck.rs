use crate::error::{Error, Result};
use crate::model::{example_gradients, sequence_nll, ModelConfig, ModelParams};
use crate::params::Parameters;
use crate::rng::SeededRng;

use super::tasks::Example;

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub samples: usize,
    pub max_relative_error: f64,
    /// Name and flat index of the worst sampled scalar.
    pub worst_parameter: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_relative_error < threshold
    }
}

/// Scalars to probe: one per tensor first, the rest drawn uniformly without
/// replacement from all scalars.
pub fn sample_coordinates(
    sizes: &[usize],
    sample_size: usize,
    rng: &mut SeededRng,
) -> Vec<(usize, usize)> {
    let total: usize = sizes.iter().sum();
    let want = sample_size.min(total);
    let mut picked = std::collections::BTreeSet::new();
    let mut order: Vec<usize> = (0..sizes.len()).filter(|&t| sizes[t] > 0).collect();
    rng.shuffle(&mut order);
    for t in order {
        if picked.len() == want {
            break;
        }
        picked.insert((t, rng.below(sizes[t])));
    }
    while picked.len() < want {
        let mut flat = rng.below(total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        picked.insert((t, flat));
    }
    picked.into_iter().collect()
}

/// Central-difference check of `analytic` (the gradient of `loss` at
/// `params`) on `sample_size` sampled scalars.
pub fn grad_check_with<P, F>(
    params: &P,
    analytic: &P,
    mut loss: F,
    h: f64,
    sample_size: usize,
    rng: &mut SeededRng,
) -> Result<GradCheckReport>
where
    P: Parameters<f64> + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Input(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    if sample_size == 0 {
        return Err(Error::Input("sample size must be at least 1".into()));
    }
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let names = params.names();
    let grads = analytic.tensors();
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        samples: 0,
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (t, i) in sample_coordinates(&sizes, sample_size, rng) {
        let original = params.tensors()[t].data()[i];
        probe.tensors_mut()[t].data_mut()[i] = original + h;
        let plus = loss(&probe)?;
        probe.tensors_mut()[t].data_mut()[i] = original - h;
        let minus = loss(&probe)?;
        probe.tensors_mut()[t].data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let a = grads[t].data()[i];
        let err = relative_error(a, numeric);
        report.samples += 1;
        if err > report.max_relative_error || report.worst_parameter.is_empty() {
            report.max_relative_error = err;
            report.worst_parameter = names[t].clone();
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Mean token loss over `batch` and its analytic gradient.
pub fn batch_loss_and_gradient(
    batch: &[Example],
    params: &ModelParams<f64>,
    config: &ModelConfig,
) -> Result<(f64, ModelParams<f64>)> {
    let mut grads = params.zeros_like();
    let mut nll = 0.0;
    let mut tokens = 0;
    for ex in batch {
        let g = example_gradients(&ex.source, &ex.target, params, config, None)?;
        grads.add_assign(&g.grads)?;
        nll += g.nll_sum;
        tokens += g.tokens;
    }
    if tokens == 0 {
        return Err(Error::Input("batch has no predicted tokens".into()));
    }
    grads.scale_in_place(1.0 / tokens as f64);
    Ok((nll / tokens as f64, grads))
}

/// Mean token loss over `batch` (forward only).
pub fn batch_loss(
    batch: &[Example],
    params: &ModelParams<f64>,
    config: &ModelConfig,
) -> Result<f64> {
    let mut nll = 0.0;
    let mut tokens = 0;
    for ex in batch {
        let (sum, n) = sequence_nll(&ex.source, &ex.target, params, config)?;
        nll += sum;
        tokens += n;
    }
    Ok(nll / tokens as f64)
}

/// Deliberate gradient corruption for exercising the checker.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FaultInjection {
    #[default]
    None,
    /// Double the gradient of the output projection.
    DoubleOutputGradient,
}

/// Check the model gradient on `batch` at dropout-free settings.
pub fn grad_check(
    params: &ModelParams<f64>,
    batch: &[Example],
    config: &ModelConfig,
    h: f64,
    sample_size: usize,
    rng: &mut SeededRng,
    fault: FaultInjection,
) -> Result<GradCheckReport> {
    let mut config = config.clone();
    config.dropout_rate = 0.0;
    let (_, mut grads) = batch_loss_and_gradient(batch, params, &config)?;
    if fault == FaultInjection::DoubleOutputGradient {
        grads.output.scale_in_place(2.0);
    }
    grad_check_with(
        params,
        &grads,
        |p| batch_loss(batch, p, &config),
        h,
        sample_size,
        rng,
    )
}
