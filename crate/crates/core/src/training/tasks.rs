//! Synthetic sequence-to-sequence tasks.
//!
//! Content tokens are the ids `3..vocab_size`. Sequences have between
//! `min_len` and `max_len` content tokens; targets are wrapped in BOS/EOS.
//!
//! `lm_only` samples targets from a fixed order-2 process and pairs them
//! with the one-token source `[PAD]`: with history `(a, b)` the next token
//! is `a` with probability 1/2 and otherwise drawn from a sparse bigram row
//! `B[b]`. The first content token is uniform, the second comes from
//! `B[first]`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{TokenSequence, BOS, FIRST_CONTENT_TOKEN, PAD};
use crate::rng::SeededRng;

/// Successors per bigram row in the `lm_only` process.
const BIGRAM_FANOUT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    MappedTranslation,
    LmOnly,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::MappedTranslation => "mapped_translation",
            TaskKind::LmOnly => "lm_only",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "mapped_translation" => Ok(TaskKind::MappedTranslation),
            "lm_only" => Ok(TaskKind::LmOnly),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (expected copy, reverse, mapped_translation or lm_only)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Seeds the translation bijection and the `lm_only` process.
    pub mapping_seed: u64,
    /// Replace every source by `[PAD]`, keeping the targets. Turns any task
    /// into its source-free language-modelling counterpart.
    pub drop_source: bool,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, vocab_size: usize, min_len: usize, max_len: usize) -> Self {
        Self {
            kind,
            vocab_size,
            min_len,
            max_len,
            mapping_seed: 0,
            drop_source: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < FIRST_CONTENT_TOKEN + 2 {
            return Err(Error::Config(format!(
                "task vocabulary must hold at least 2 content tokens, got size {}",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "task lengths need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    pub fn content_tokens(&self) -> usize {
        self.vocab_size - FIRST_CONTENT_TOKEN
    }

    /// Longest decoder input: BOS plus `max_len` content tokens.
    pub fn max_decoder_len(&self) -> usize {
        self.max_len + 1
    }

    /// Translation table indexed by token id; special tokens map to
    /// themselves and content tokens are permuted.
    pub fn mapping(&self) -> Vec<usize> {
        let mut content: Vec<usize> = (FIRST_CONTENT_TOKEN..self.vocab_size).collect();
        SeededRng::new(self.mapping_seed).shuffle(&mut content);
        (0..FIRST_CONTENT_TOKEN).chain(content).collect()
    }

    /// The `lm_only` process.
    pub fn language_model(&self) -> LanguageModel {
        LanguageModel::new(self.vocab_size, self.mapping_seed)
    }
}

/// Order-2 generative process over content tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    vocab_size: usize,
    /// `bigram[b][c]`: probability of content id `c` given previous `b`.
    bigram: Vec<Vec<f64>>,
}

impl LanguageModel {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed ^ 0x6c6d_5f6f_6e6c_7921);
        let mut bigram = vec![vec![0.0; vocab_size]; vocab_size];
        let content: Vec<usize> = (FIRST_CONTENT_TOKEN..vocab_size).collect();
        for row in bigram.iter_mut().skip(FIRST_CONTENT_TOKEN) {
            let mut succ = content.clone();
            rng.shuffle(&mut succ);
            let succ = &succ[..BIGRAM_FANOUT.min(succ.len())];
            let weights: Vec<f64> = succ.iter().map(|_| rng.uniform(0.5, 1.5)).collect();
            let total: f64 = weights.iter().sum();
            for (&c, w) in succ.iter().zip(weights) {
                row[c] = w / total;
            }
        }
        Self { vocab_size, bigram }
    }

    /// Distribution of the next token given the two previous tokens
    /// (`a` may be BOS).
    pub fn transition(&self, a: usize, b: usize) -> Vec<f64> {
        let mut p = self.bigram[b].clone();
        if a >= FIRST_CONTENT_TOKEN {
            for x in p.iter_mut() {
                *x *= 0.5;
            }
            p[a] += 0.5;
        }
        p
    }

    pub fn sample(&self, len: usize, rng: &mut SeededRng) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(len);
        for i in 0..len {
            let next = match i {
                0 => FIRST_CONTENT_TOKEN + rng.below(self.vocab_size - FIRST_CONTENT_TOKEN),
                1 => rng.categorical(&self.transition(BOS, out[0])),
                _ => rng.categorical(&self.transition(out[i - 2], out[i - 1])),
            };
            out.push(next);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub source: TokenSequence,
    pub target: TokenSequence,
}

impl Example {
    /// Wrap content-token lists into source and BOS/EOS target sequences.
    pub fn from_content(source: &[usize], target: &[usize]) -> Result<Self> {
        Ok(Self {
            source: TokenSequence::source(source.to_vec())?,
            target: TokenSequence::wrap_target(target),
        })
    }
}

/// Draw `count` examples of `spec`.
pub fn gen_task(spec: &TaskSpec, rng: &mut SeededRng, count: usize) -> Result<Vec<Example>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Input("example count must be at least 1".into()));
    }
    let content = spec.content_tokens();
    let mapping = spec.mapping();
    let lm = (spec.kind == TaskKind::LmOnly).then(|| spec.language_model());
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.range_inclusive(spec.min_len, spec.max_len);
        let (source, target) = match &lm {
            Some(lm) => (vec![PAD], lm.sample(len, rng)),
            None => {
                let src: Vec<usize> = (0..len)
                    .map(|_| FIRST_CONTENT_TOKEN + rng.below(content))
                    .collect();
                let tgt = match spec.kind {
                    TaskKind::Copy => src.clone(),
                    TaskKind::Reverse => src.iter().rev().copied().collect(),
                    _ => src.iter().map(|&t| mapping[t]).collect(),
                };
                (src, tgt)
            }
        };
        let source = if spec.drop_source { vec![PAD] } else { source };
        out.push(Example::from_content(&source, &target)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EOS;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec::new(kind, 20, 2, 8)
    }

    #[test]
    fn copy_wraps_source() {
        let ex = Example::from_content(&[5, 7, 9], &[5, 7, 9]).unwrap();
        assert_eq!(ex.target.ids(), &[BOS, 5, 7, 9, EOS]);
        for ex in gen_task(&spec(TaskKind::Copy), &mut SeededRng::new(1), 20).unwrap() {
            assert_eq!(ex.target.content(), ex.source.ids());
        }
    }

    #[test]
    fn reverse_and_mapping() {
        for ex in gen_task(&spec(TaskKind::Reverse), &mut SeededRng::new(2), 20).unwrap() {
            let mut s = ex.source.ids().to_vec();
            s.reverse();
            assert_eq!(ex.target.content(), s.as_slice());
        }
        let sp = spec(TaskKind::MappedTranslation);
        let m = sp.mapping();
        assert_eq!(m, sp.mapping());
        assert_eq!(&m[..3], &[0, 1, 2]);
        let mut sorted = m.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_ne!(
            m,
            TaskSpec {
                mapping_seed: 1,
                ..sp
            }
            .mapping()
        );
        for ex in gen_task(&sp, &mut SeededRng::new(3), 20).unwrap() {
            let mapped: Vec<usize> = ex.source.ids().iter().map(|&t| m[t]).collect();
            assert_eq!(ex.target.content(), mapped.as_slice());
        }
    }

    #[test]
    fn lengths_and_drop_source() {
        let sp = TaskSpec {
            drop_source: true,
            ..spec(TaskKind::Copy)
        };
        for ex in gen_task(&sp, &mut SeededRng::new(4), 50).unwrap() {
            assert_eq!(ex.source.ids(), &[PAD]);
            assert!((2..=8).contains(&ex.target.content().len()));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in [TaskKind::Copy, TaskKind::LmOnly] {
            let a = gen_task(&spec(kind), &mut SeededRng::new(5), 30).unwrap();
            let b = gen_task(&spec(kind), &mut SeededRng::new(5), 30).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn transitions_are_distributions() {
        let lm = spec(TaskKind::LmOnly).language_model();
        for a in [BOS, 3, 7, 19] {
            for b in 3..20 {
                let p = lm.transition(a, b);
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(p[..3].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn lm_only_source_is_pad() {
        for ex in gen_task(&spec(TaskKind::LmOnly), &mut SeededRng::new(6), 10).unwrap() {
            assert_eq!(ex.source.ids(), &[PAD]);
        }
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(TaskSpec::new(TaskKind::Copy, 4, 1, 3).validate().is_err());
        assert!(TaskSpec::new(TaskKind::Copy, 10, 0, 3).validate().is_err());
        assert!(TaskSpec::new(TaskKind::Copy, 10, 4, 3).validate().is_err());
        assert!("copyy".parse::<TaskKind>().is_err());
        assert_eq!("lm_only".parse::<TaskKind>().unwrap(), TaskKind::LmOnly);
    }
}
