use std::path::Path;

use serde::Serialize;

use ngram_core::incremental::greedy_decode;
use ngram_core::model::{
    load_checkpoint, write_checkpoint, Checkpoint, ModelParams, TokenSequence,
};
use ngram_core::training::{
    check_compatible, evaluate, gen_task, grad_check, train, EvalReport, FaultInjection,
    GradCheckReport, TaskKind, TaskSpec,
};
use ngram_core::SeededRng;

use crate::config::{RunConfig, Settings};
use crate::error::CliError;
use crate::output::Staged;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const DEV_FILE: &str = "dev_evals.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub examples: usize,
    pub tokens: usize,
    pub token_accuracy: f64,
    pub sequence_exact_match: f64,
    pub log_perplexity: f64,
}

impl From<EvalReport> for EvalRecord {
    fn from(r: EvalReport) -> Self {
        Self {
            examples: r.examples,
            tokens: r.tokens,
            token_accuracy: r.token_accuracy,
            sequence_exact_match: r.sequence_exact_match,
            log_perplexity: r.log_perplexity,
        }
    }
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
    tokens: usize,
}

#[derive(Serialize)]
struct DevRow {
    step: usize,
    token_accuracy: f64,
    sequence_exact_match: f64,
    log_perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub best_step: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub best_dev: EvalRecord,
}

/// Train, then write the best checkpoint, the per-step loss curve, the dev
/// evaluations and a summary under `out`.
pub fn cmd_train(
    cfg: &RunConfig,
    settings: &Settings,
    out: &Path,
) -> Result<TrainSummary, CliError> {
    check_compatible(&settings.model, &settings.task)?;
    let outcome = train::<f64>(&settings.model, &settings.task, &settings.train)?;
    let summary = TrainSummary {
        steps: outcome.history.len(),
        best_step: outcome.best_step,
        first_loss: outcome.history[0].loss,
        final_loss: outcome.history.last().unwrap().loss,
        best_dev: outcome.best.into(),
    };

    let mut metadata: std::collections::BTreeMap<String, String> = crate::config::KEYS
        .iter()
        .filter(|k| k.key.starts_with("task.") || k.key.starts_with("train.") || k.key == "seed")
        .map(|k| {
            (
                k.key.to_string(),
                cfg.get(k.key).unwrap_or_default().to_string(),
            )
        })
        .collect();
    metadata.insert("best_step".into(), outcome.best_step.to_string());
    let ckpt = Checkpoint {
        config: settings.model.clone(),
        params: outcome.params,
        metadata,
    };
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &ckpt)?;

    let loss: Vec<LossRow> = outcome
        .history
        .iter()
        .map(|r| LossRow {
            step: r.step,
            loss: r.loss,
            tokens: r.tokens,
        })
        .collect();
    let dev: Vec<DevRow> = outcome
        .evaluations
        .iter()
        .map(|(step, r)| DevRow {
            step: *step,
            token_accuracy: r.token_accuracy,
            sequence_exact_match: r.sequence_exact_match,
            log_perplexity: r.log_perplexity,
        })
        .collect();

    let mut staged = Staged::new();
    staged.bytes(&out.join(CHECKPOINT_FILE), &bytes)?;
    staged.csv(&out.join(LOSS_FILE), &loss)?;
    staged.csv(&out.join(DEV_FILE), &dev)?;
    staged.json(&out.join(TRAIN_SUMMARY_FILE), &summary)?;
    staged.commit()?;
    Ok(summary)
}

fn load(path: &Path) -> Result<Checkpoint<f64>, CliError> {
    load_checkpoint(path)
        .map_err(|e| CliError::Invalid(format!("cannot load checkpoint `{}`: {e}", path.display())))
}

fn check_vocab(ckpt: &Checkpoint<f64>, task: &TaskSpec) -> Result<(), CliError> {
    if ckpt.config.vocab_size != task.vocab_size {
        return Err(CliError::Invalid(format!(
            "checkpoint vocab_size {} does not match task vocab_size {}",
            ckpt.config.vocab_size, task.vocab_size
        )));
    }
    check_compatible(&ckpt.config, task)?;
    Ok(())
}

/// Evaluate a checkpoint on `eval.size` fresh examples of the configured
/// task and write the report to `out/eval.json`.
pub fn cmd_eval(
    settings: &Settings,
    checkpoint: &Path,
    out: &Path,
) -> Result<EvalRecord, CliError> {
    let ckpt = load(checkpoint)?;
    check_vocab(&ckpt, &settings.task)?;
    let data = gen_task(
        &settings.task,
        &mut SeededRng::new(settings.eval.seed),
        settings.eval.size,
    )?;
    let record: EvalRecord = evaluate(&ckpt.params, &ckpt.config, &data)?.into();
    let mut staged = Staged::new();
    staged.json(&out.join(EVAL_FILE), &record)?;
    staged.commit()?;
    Ok(record)
}

pub fn format_eval_table(r: &EvalRecord) -> String {
    format!(
        "metric                 value\n\
         examples               {}\n\
         tokens                 {}\n\
         token_accuracy         {:.4}\n\
         sequence_exact_match   {:.4}\n\
         log_perplexity         {:.4}\n",
        r.examples, r.tokens, r.token_accuracy, r.sequence_exact_match, r.log_perplexity
    )
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeOutput {
    pub output: Vec<usize>,
    /// Reference target for tasks whose target is a function of the source.
    pub expected: Option<Vec<usize>>,
}

pub fn parse_tokens(text: &str) -> Result<Vec<usize>, CliError> {
    let tokens: Result<Vec<usize>, _> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect();
    match tokens {
        Ok(t) if !t.is_empty() => Ok(t),
        _ => Err(CliError::Invalid(format!(
            "cannot parse source tokens `{text}`"
        ))),
    }
}

fn expected_target(task: &TaskSpec, source: &[usize]) -> Option<Vec<usize>> {
    if task.drop_source {
        return None;
    }
    let content: Vec<usize> = match task.kind {
        TaskKind::Copy => source.to_vec(),
        TaskKind::Reverse => source.iter().rev().copied().collect(),
        TaskKind::MappedTranslation => {
            let m = task.mapping();
            source
                .iter()
                .map(|&t| m.get(t).copied().unwrap_or(t))
                .collect()
        }
        TaskKind::LmOnly => return None,
    };
    Some(TokenSequence::wrap_target(&content).ids().to_vec())
}

/// Greedy-decode `source` with a checkpoint.
pub fn cmd_decode(
    settings: &Settings,
    checkpoint: &Path,
    source: &[usize],
) -> Result<DecodeOutput, CliError> {
    let ckpt = load(checkpoint)?;
    let src = TokenSequence::source(source.to_vec())?;
    src.check_vocab(ckpt.config.vocab_size)?;
    let out = greedy_decode(&src, &ckpt.params, &ckpt.config, settings.decode_max_len)?;
    Ok(DecodeOutput {
        output: out.ids().to_vec(),
        expected: expected_target(&settings.task, source),
    })
}

/// Finite-difference check of the model gradient at a random point.
///
/// Parameters come from `init_random` so that every gradient is generically
/// nonzero; the batch is drawn from the configured task kind at the checked
/// model's vocabulary with 1 to 6 content tokens.
pub fn cmd_grad_check(settings: &Settings) -> Result<GradCheckReport, CliError> {
    let g = &settings.grad_check;
    if !(g.h > 0.0 && g.h.is_finite()) {
        return Err(CliError::Invalid(format!(
            "grad_check.h must be positive, got {}",
            g.h
        )));
    }
    let mut root = SeededRng::new(settings.seed);
    let params = ModelParams::<f64>::init_random(&g.model, &mut root.fork())?;
    let task = TaskSpec {
        vocab_size: g.model.vocab_size,
        min_len: 1,
        max_len: 6.min(g.model.max_positions - 1).max(1),
        ..settings.task
    };
    let batch = gen_task(&task, &mut root.fork(), g.batch_size)?;
    let fault = if g.inject_fault {
        FaultInjection::DoubleOutputGradient
    } else {
        FaultInjection::None
    };
    let report = grad_check(
        &params,
        &batch,
        &g.model,
        g.h,
        g.samples,
        &mut root.fork(),
        fault,
    )?;
    if !report.passes(g.threshold) {
        return Err(CliError::GradCheckFailed {
            parameter: report.worst_parameter.clone(),
            index: report.worst_index,
            error: report.max_relative_error,
            threshold: g.threshold,
        });
    }
    Ok(report)
}
