use crate::error::{Error, Result};
use crate::incremental::greedy_decode;
use crate::model::{sequence_nll, ModelConfig, ModelParams};
use crate::scalar::Scalar;

use super::tasks::Example;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub examples: usize,
    /// Predicted target tokens (EOS included, BOS excluded).
    pub tokens: usize,
    /// Fraction of target positions where the greedy output agrees.
    pub token_accuracy: f64,
    /// Fraction of examples decoded exactly.
    pub sequence_exact_match: f64,
    /// Teacher-forced mean NLL per predicted token, in nats.
    pub log_perplexity: f64,
}

/// Greedy-decode accuracy and teacher-forced log-perplexity over `data`.
///
/// Each example is decoded for at most as many tokens as its target; a
/// position the decoder never reached counts as wrong.
pub fn evaluate<S: Scalar>(
    params: &ModelParams<S>,
    config: &ModelConfig,
    data: &[Example],
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Input("evaluation data is empty".into()));
    }
    let mut nll = 0.0;
    let mut scored = 0usize;
    let mut positions = 0usize;
    let mut correct = 0usize;
    let mut exact = 0usize;
    for ex in data {
        let (sum, n) = sequence_nll(&ex.source, &ex.target, params, config)?;
        nll += sum.to_f64_lossy();
        scored += n;

        let gold = ex.target.ids();
        let out = greedy_decode(&ex.source, params, config, gold.len())?;
        let (hits, total, same) = score_decode(gold, out.ids());
        correct += hits;
        positions += total;
        exact += usize::from(same);
    }
    Ok(EvalReport {
        examples: data.len(),
        tokens: positions,
        token_accuracy: correct as f64 / positions as f64,
        sequence_exact_match: exact as f64 / data.len() as f64,
        log_perplexity: nll / scored as f64,
    })
}

/// Agreement of a decoded sequence with the gold target: matching positions
/// after BOS, positions scored, and whether the sequences are identical.
pub fn score_decode(gold: &[usize], decoded: &[usize]) -> (usize, usize, bool) {
    let hits = (1..gold.len())
        .filter(|&i| decoded.get(i) == Some(&gold[i]))
        .count();
    (hits, gold.len().saturating_sub(1), gold == decoded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskSpec;
    use crate::model::{TokenSequence, BOS, EOS};
    use crate::rng::SeededRng;
    use crate::training::tasks::{gen_task, TaskKind, TaskSpec};

    #[test]
    fn uniform_model_has_log_vocab_perplexity() {
        let config = ModelConfig::tiny(MaskSpec::ngram(3).unwrap());
        let params = ModelParams::<f64>::init(&config, &mut SeededRng::new(1)).unwrap();
        let data = gen_task(
            &TaskSpec::new(TaskKind::Copy, 11, 1, 5),
            &mut SeededRng::new(2),
            12,
        )
        .unwrap();
        let r = evaluate(&params, &config, &data).unwrap();
        assert!((r.log_perplexity - 11f64.ln()).abs() < 1e-12);
        assert_eq!(r.examples, 12);
        assert!((0.0..=1.0).contains(&r.token_accuracy));
    }

    #[test]
    fn eos_model_scores_only_eos_positions() {
        let config = ModelConfig::tiny(MaskSpec::Causal);
        let mut params = ModelParams::<f64>::init(&config, &mut SeededRng::new(1)).unwrap();
        let last = params.decoder.last_mut().unwrap();
        last.norm_ff.gain.fill(0.0);
        last.norm_ff.bias.fill(1.0);
        for r in 0..config.d_model {
            params.output.set(r, EOS, 1.0);
        }
        let data = vec![
            Example {
                source: TokenSequence::source(vec![4]).unwrap(),
                target: TokenSequence::target(vec![BOS, EOS]).unwrap(),
            },
            Example::from_content(&[4, 5], &[4, 5]).unwrap(),
        ];
        let r = evaluate(&params, &config, &data).unwrap();
        assert_eq!(r.tokens, 4);
        assert_eq!(r.sequence_exact_match, 0.5);
        assert_eq!(r.token_accuracy, 0.25);
    }

    #[test]
    fn oracle_decoder_scores_perfectly() {
        let data = gen_task(
            &TaskSpec::new(TaskKind::Copy, 20, 1, 9),
            &mut SeededRng::new(3),
            40,
        )
        .unwrap();
        for ex in &data {
            let gold = ex.target.ids();
            assert_eq!(
                score_decode(gold, gold),
                (gold.len() - 1, gold.len() - 1, true)
            );
        }
        assert_eq!(
            score_decode(&[BOS, 5, 6, EOS], &[BOS, 5, EOS]),
            (1, 3, false)
        );
        assert_eq!(
            score_decode(&[BOS, 5, EOS], &[BOS, 5, EOS, 7]),
            (2, 2, false)
        );
    }

    #[test]
    fn empty_data_rejected() {
        let config = ModelConfig::tiny(MaskSpec::Causal);
        let params = ModelParams::<f64>::init(&config, &mut SeededRng::new(1)).unwrap();
        assert!(evaluate(&params, &config, &[]).is_err());
    }
}
