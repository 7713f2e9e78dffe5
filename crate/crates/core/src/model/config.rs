use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mask::MaskSpec;

/// Architecture hyperparameters. `num_layers` applies to both stacks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Decoder self-attention mask; must be causal or n-gram.
    pub mask: MaskSpec,
    pub dropout_rate: f64,
    pub layer_norm_eps: f64,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    /// The desk-scale configuration used by the training experiments.
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            d_model: 32,
            d_ff: 64,
            vocab_size: 64,
            mask: MaskSpec::Causal,
            dropout_rate: 0.0,
            layer_norm_eps: 1e-5,
            max_positions: 64,
        }
    }
}

const KEYS: [&str; 9] = [
    "num_layers",
    "num_heads",
    "d_model",
    "d_ff",
    "vocab_size",
    "mask",
    "dropout_rate",
    "layer_norm_eps",
    "max_positions",
];

impl ModelConfig {
    /// `L=2, H=2, d_model=8, d_ff=16, V=11`: small enough for exhaustive
    /// finite-difference checks.
    pub fn tiny(mask: MaskSpec) -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 11,
            mask,
            max_positions: 64,
            ..Self::default()
        }
    }

    pub fn with_mask(mut self, mask: MaskSpec) -> Self {
        self.mask = mask;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return fail(format!(
                "{} heads do not divide d_model {}",
                self.num_heads, self.d_model
            ));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return fail(format!(
                "d_model must be even and positive, got {}",
                self.d_model
            ));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if self.vocab_size < 4 {
            return fail(format!(
                "vocab_size {} leaves no room beyond PAD/BOS/EOS",
                self.vocab_size
            ));
        }
        self.mask.validate()?;
        if !self.mask.is_causal_like() {
            return fail("decoder self-attention mask must be causal or ngram:N".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return fail(format!(
                "layer_norm_eps must be positive, got {}",
                self.layer_norm_eps
            ));
        }
        if self.max_positions == 0 {
            return fail("max_positions must be positive".into());
        }
        Ok(())
    }

    /// Key-value rendering in a fixed key order. Floats use the shortest
    /// representation that round-trips.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let values = [
            self.num_layers.to_string(),
            self.num_heads.to_string(),
            self.d_model.to_string(),
            self.d_ff.to_string(),
            self.vocab_size.to_string(),
            self.mask.to_string(),
            format!("{:?}", self.dropout_rate),
            format!("{:?}", self.layer_norm_eps),
            self.max_positions.to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
            kv.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
        }
        fn num<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let v = get(kv, key)?;
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        let cfg = Self {
            num_layers: num(kv, "num_layers")?,
            num_heads: num(kv, "num_heads")?,
            d_model: num(kv, "d_model")?,
            d_ff: num(kv, "d_ff")?,
            vocab_size: num(kv, "vocab_size")?,
            mask: get(kv, "mask")?.parse()?,
            dropout_rate: num(kv, "dropout_rate")?,
            layer_norm_eps: num(kv, "layer_norm_eps")?,
            max_positions: num(kv, "max_positions")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn keys() -> &'static [&'static str] {
        &KEYS
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig::tiny(MaskSpec::ngram(3).unwrap());
        let kv: BTreeMap<_, _> = cfg.to_kv().into_iter().collect();
        assert_eq!(ModelConfig::from_kv(&kv).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_shapes() {
        let cfg = ModelConfig {
            num_heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig::default().with_mask(MaskSpec::Full);
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            d_model: 7,
            num_heads: 1,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
