//! Run configuration: flat `key = value` text with `#` comments.
//!
//! Every key has a default (see [`KEYS`]); a file only lists what it
//! changes. Unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ngram_core::model::ModelConfig;
use ngram_core::training::{TaskKind, TaskSpec, TrainOptions};
use ngram_core::MaskSpec;

use crate::error::CliError;

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(key: &'static str, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec { key, default, doc }
}

pub const KEYS: &[KeySpec] = &[
    key(
        "seed",
        "0",
        "seed for parameter init, batches, dev set and dropout",
    ),
    key("model.num_layers", "2", "encoder and decoder layers"),
    key(
        "model.num_heads",
        "2",
        "attention heads; must divide d_model",
    ),
    key("model.d_model", "32", "model width; must be even"),
    key("model.d_ff", "64", "feed-forward hidden width"),
    key(
        "model.vocab_size",
        "64",
        "vocabulary size including PAD, BOS and EOS",
    ),
    key(
        "model.mask",
        "causal",
        "decoder self-attention mask: causal or ngram:N",
    ),
    key(
        "model.dropout_rate",
        "0.0",
        "dropout on sublayer outputs during training",
    ),
    key("model.layer_norm_eps", "1e-5", "layer norm epsilon"),
    key(
        "model.max_positions",
        "32",
        "longest sequence the model accepts",
    ),
    key(
        "task.kind",
        "mapped_translation",
        "copy, reverse, mapped_translation or lm_only",
    ),
    key(
        "task.vocab_size",
        "64",
        "task vocabulary; must equal model.vocab_size",
    ),
    key("task.min_len", "2", "fewest content tokens per sequence"),
    key(
        "task.max_len",
        "14",
        "most content tokens per sequence; targets add BOS and EOS",
    ),
    key(
        "task.mapping_seed",
        "0",
        "seed of the translation bijection and the lm_only process",
    ),
    key("task.drop_source", "false", "replace every source by [PAD]"),
    key("train.steps", "3000", "Adam updates"),
    key("train.batch_size", "32", "examples per update"),
    key("train.lr", "0.001", "Adam learning rate"),
    key(
        "train.dev_size",
        "200",
        "held-out examples for checkpoint selection",
    ),
    key("train.eval_every", "250", "updates between dev evaluations"),
    key("eval.size", "200", "examples drawn for the eval command"),
    key("eval.seed", "1", "seed of the eval command's data"),
    key(
        "decode.max_len",
        "0",
        "longest decoded output; 0 means task.max_len + 2",
    ),
    key(
        "grad_check.model",
        "tiny",
        "tiny (L2 H2 d8 ff16 V11) or run (the model.* keys)",
    ),
    key("grad_check.h", "1e-5", "central-difference step"),
    key("grad_check.samples", "200", "parameters probed"),
    key(
        "grad_check.batch_size",
        "4",
        "examples in the checked batch",
    ),
    key(
        "grad_check.threshold",
        "1e-5",
        "largest accepted relative error",
    ),
    key(
        "grad_check.inject_fault",
        "false",
        "double the output-projection gradient (self-test)",
    ),
    key(
        "bench.lengths",
        "16,512",
        "decode lengths T, comma separated",
    ),
    key("bench.orders", "8", "n-gram orders N, comma separated"),
    key(
        "bench.repetitions",
        "20",
        "timed repetitions per (T, N, path); at least 10",
    ),
    key("bench.source_len", "16", "source tokens fed to the encoder"),
];

/// Raw configuration values, one per key in [`KEYS`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|k| (k.key, k.default.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the file at `path`, if any.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Invalid(format!("cannot read config `{}`: {e}", path.display()))
            })?;
            cfg.apply_text(&text)
                .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Invalid(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    n + 1
                ))
            })?;
            let k = k.trim();
            if seen.contains(&k) {
                return Err(CliError::Invalid(format!(
                    "line {}: key `{k}` given twice",
                    n + 1
                )));
            }
            seen.push(k);
            self.set(k, v.trim())
                .map_err(|e| CliError::Invalid(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let spec = KEYS
            .iter()
            .find(|k| k.key == key)
            .ok_or_else(|| CliError::Invalid(format!("unknown config key `{key}`")))?;
        self.values.insert(spec.key, value.to_string());
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Invalid(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// A complete config file listing every key with its doc comment.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "# {} (default {})", k.doc, k.default);
            let _ = writeln!(out, "{} = {}", k.key, self.values[k.key]);
        }
        out
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = &self.values[key];
        raw.parse()
            .map_err(|_| CliError::Invalid(format!("bad value `{raw}` for `{key}`")))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>, CliError> {
        let raw = &self.values[key];
        let items: Result<Vec<usize>, _> = raw.split(',').map(|s| s.trim().parse()).collect();
        match items {
            Ok(v) if !v.is_empty() => Ok(v),
            _ => Err(CliError::Invalid(format!("bad list `{raw}` for `{key}`"))),
        }
    }

    /// Typed and validated settings.
    pub fn resolve(&self) -> Result<Settings, CliError> {
        let mask: MaskSpec = self.values["model.mask"].parse()?;
        let model = ModelConfig {
            num_layers: self.parsed("model.num_layers")?,
            num_heads: self.parsed("model.num_heads")?,
            d_model: self.parsed("model.d_model")?,
            d_ff: self.parsed("model.d_ff")?,
            vocab_size: self.parsed("model.vocab_size")?,
            mask,
            dropout_rate: self.parsed("model.dropout_rate")?,
            layer_norm_eps: self.parsed("model.layer_norm_eps")?,
            max_positions: self.parsed("model.max_positions")?,
        };
        model.validate()?;
        let task = TaskSpec {
            kind: self.values["task.kind"].parse::<TaskKind>()?,
            vocab_size: self.parsed("task.vocab_size")?,
            min_len: self.parsed("task.min_len")?,
            max_len: self.parsed("task.max_len")?,
            mapping_seed: self.parsed("task.mapping_seed")?,
            drop_source: self.parsed("task.drop_source")?,
        };
        task.validate()?;
        let train = TrainOptions {
            steps: self.parsed("train.steps")?,
            batch_size: self.parsed("train.batch_size")?,
            lr: self.parsed("train.lr")?,
            seed: self.parsed("seed")?,
            dev_size: self.parsed("train.dev_size")?,
            eval_every: self.parsed("train.eval_every")?,
        };
        train.validate()?;
        let eval = EvalSettings {
            size: self.parsed("eval.size")?,
            seed: self.parsed("eval.seed")?,
        };
        if eval.size == 0 {
            return Err(CliError::Invalid("eval.size must be at least 1".into()));
        }
        let decode_max_len = match self.parsed::<usize>("decode.max_len")? {
            0 => task.max_len + 2,
            n => n,
        };
        let grad_model = match self.values["grad_check.model"].as_str() {
            "tiny" => ModelConfig::tiny(model.mask),
            "run" => model.clone(),
            other => {
                return Err(CliError::Invalid(format!(
                    "grad_check.model must be tiny or run, got `{other}`"
                )))
            }
        };
        let grad_check = GradCheckSettings {
            model: grad_model,
            h: self.parsed("grad_check.h")?,
            samples: self.parsed("grad_check.samples")?,
            batch_size: self.parsed("grad_check.batch_size")?,
            threshold: self.parsed("grad_check.threshold")?,
            inject_fault: self.parsed("grad_check.inject_fault")?,
        };
        if grad_check.samples == 0 || grad_check.batch_size == 0 {
            return Err(CliError::Invalid(
                "grad_check.samples and grad_check.batch_size must be at least 1".into(),
            ));
        }
        let bench = BenchSettings {
            lengths: self.list("bench.lengths")?,
            orders: self.list("bench.orders")?,
            repetitions: self.parsed("bench.repetitions")?,
            source_len: self.parsed("bench.source_len")?,
        };
        bench.validate()?;
        Ok(Settings {
            seed: train.seed,
            model,
            task,
            train,
            eval,
            decode_max_len,
            grad_check,
            bench,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainOptions,
    pub eval: EvalSettings,
    pub decode_max_len: usize,
    pub grad_check: GradCheckSettings,
    pub bench: BenchSettings,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSettings {
    pub size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSettings {
    pub model: ModelConfig,
    pub h: f64,
    pub samples: usize,
    pub batch_size: usize,
    pub threshold: f64,
    pub inject_fault: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchSettings {
    pub lengths: Vec<usize>,
    pub orders: Vec<usize>,
    pub repetitions: usize,
    pub source_len: usize,
}

impl BenchSettings {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.repetitions < 10 {
            return Err(CliError::Invalid(format!(
                "bench.repetitions must be at least 10, got {}",
                self.repetitions
            )));
        }
        if self.lengths.contains(&0) || self.source_len == 0 {
            return Err(CliError::Invalid("bench lengths must be positive".into()));
        }
        if let Some(&n) = self.orders.iter().find(|&&n| n < 2) {
            return Err(CliError::Invalid(format!("bench order {n} is below 2")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let s = RunConfig::default().resolve().unwrap();
        assert_eq!(
            s.model,
            ModelConfig {
                max_positions: 32,
                ..ModelConfig::default()
            }
        );
        assert_eq!(s.task.kind, TaskKind::MappedTranslation);
        assert_eq!(s.train.steps, 3000);
        assert_eq!(s.decode_max_len, 16);
        assert_eq!(s.grad_check.model.d_model, 8);
        assert_eq!(s.bench.lengths, vec![16, 512]);
    }

    #[test]
    fn rendered_file_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("model.mask", "ngram:4").unwrap();
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg =
            RunConfig::parse("# header\n\nmodel.mask = ngram:3  # trailing\n  seed=7\n").unwrap();
        let s = cfg.resolve().unwrap();
        assert_eq!(s.model.mask, MaskSpec::ngram(3).unwrap());
        assert_eq!(s.seed, 7);
    }

    #[test]
    fn unknown_duplicate_and_malformed_rejected() {
        assert!(RunConfig::parse("model.layers = 2").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed").is_err());
        let bad = RunConfig::parse("train.steps = many").unwrap();
        assert!(bad.resolve().is_err());
        assert!(RunConfig::parse("bench.repetitions = 9")
            .unwrap()
            .resolve()
            .is_err());
        assert!(RunConfig::parse("model.mask = ngram:1")
            .unwrap()
            .resolve()
            .is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        cfg.set_pair("task.kind=copy").unwrap();
        assert!(cfg.set_pair("task.kind").is_err());
        assert!(cfg.set_pair("nope=1").is_err());
        assert_eq!(cfg.resolve().unwrap().task.kind, TaskKind::Copy);
    }

    #[test]
    fn every_key_documented() {
        for k in KEYS {
            assert!(!k.doc.is_empty() && !k.default.is_empty(), "{}", k.key);
        }
        let mut names: Vec<_> = KEYS.iter().map(|k| k.key).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), KEYS.len());
    }
}
