use crate::error::{Error, Result};
use crate::model::{example_gradients, ModelConfig, ModelParams};
use crate::rng::SeededRng;
use crate::scalar::Scalar;

use super::evaluate::{evaluate, EvalReport};
use super::optim::{AdamConfig, AdamState};
use super::tasks::{gen_task, Example, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Held-out examples used for checkpoint selection.
    pub dev_size: usize,
    /// Evaluate on the dev set every this many updates (and after the last).
    pub eval_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            dev_size: 200,
            eval_every: 250,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.dev_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "steps, batch_size, dev_size and eval_every must all be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Training loss of one update, measured before the update is applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    /// Parameters at the best dev evaluation.
    pub params: ModelParams<S>,
    pub history: Vec<StepRecord>,
    /// `(updates applied, report)` for every dev evaluation.
    pub evaluations: Vec<(usize, EvalReport)>,
    pub best_step: usize,
    pub best: EvalReport,
    pub dev: Vec<Example>,
}

/// Check that `task` fits the model's vocabulary and position budget.
pub fn check_compatible(config: &ModelConfig, task: &TaskSpec) -> Result<()> {
    config.validate()?;
    task.validate()?;
    if config.vocab_size != task.vocab_size {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match task vocab_size {}",
            config.vocab_size, task.vocab_size
        )));
    }
    if task.max_decoder_len() > config.max_positions {
        return Err(Error::Config(format!(
            "task max_len {} needs max_positions >= {}, got {}",
            task.max_len,
            task.max_decoder_len(),
            config.max_positions
        )));
    }
    Ok(())
}

/// Adam on freshly drawn batches, keeping the parameters with the best dev
/// token accuracy (ties go to the lower dev log-perplexity).
///
/// Seeded streams: parameter init, training batches, the dev set and
/// dropout each get their own fork of `options.seed`.
pub fn train<S: Scalar>(
    config: &ModelConfig,
    task: &TaskSpec,
    options: &TrainOptions,
) -> Result<TrainOutcome<S>> {
    check_compatible(config, task)?;
    options.validate()?;
    let mut root = SeededRng::new(options.seed);
    let mut init_rng = root.fork();
    let mut data_rng = root.fork();
    let mut dev_rng = root.fork();
    let mut dropout_rng = root.fork();

    let mut params = ModelParams::<S>::init(config, &mut init_rng)?;
    let dev = gen_task(task, &mut dev_rng, options.dev_size)?;
    let adam = AdamConfig {
        lr: options.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&params, adam);
    let use_dropout = config.dropout_rate > 0.0;

    let mut history = Vec::with_capacity(options.steps);
    let mut evaluations = Vec::new();
    let mut best: Option<(usize, EvalReport, ModelParams<S>)> = None;
    for step in 0..options.steps {
        let batch = gen_task(task, &mut data_rng, options.batch_size)?;
        let mut grads = params.zeros_like();
        let mut nll = S::zero();
        let mut tokens = 0usize;
        for ex in &batch {
            let rng = use_dropout.then_some(&mut dropout_rng);
            let g = example_gradients(&ex.source, &ex.target, &params, config, rng)?;
            grads.add_assign(&g.grads)?;
            nll += g.nll_sum;
            tokens += g.tokens;
        }
        let loss = nll.to_f64_lossy() / tokens as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        history.push(StepRecord { step, loss, tokens });
        grads.scale_in_place(S::one() / S::from_usize(tokens).unwrap());
        state.step(&mut params, &grads)?;

        let done = step + 1;
        if done % options.eval_every == 0 || done == options.steps {
            let report = evaluate(&params, config, &dev)?;
            evaluations.push((done, report));
            let better = match &best {
                None => true,
                Some((_, b, _)) => {
                    report.token_accuracy > b.token_accuracy
                        || (report.token_accuracy == b.token_accuracy
                            && report.log_perplexity < b.log_perplexity)
                }
            };
            if better {
                best = Some((done, report, params.clone()));
            }
        }
    }
    let (best_step, best, params) = best.expect("at least one evaluation");
    Ok(TrainOutcome {
        params,
        history,
        evaluations,
        best_step,
        best,
        dev,
    })
}
