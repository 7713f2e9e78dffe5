//! Attention visibility: full, causal and n-gram banded masks.
//!
//! Positions in this module's public vocabulary are 1-indexed (`t_1 ..
//! t_T`); the accessor methods take 0-indexed query/key indices and say so.
//! Under `ngram(N)` query position `k` sees keys `max(1, k-N+2) ..= k`:
//! itself plus the `N-2` preceding positions, `N-1` keys in total.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskSpec {
    /// Every query sees every key.
    Full,
    /// Query `k` sees keys `1..=k`.
    Causal,
    /// Query `k` sees at most `order - 1` keys ending at itself.
    Ngram { order: usize },
}

impl MaskSpec {
    pub fn ngram(order: usize) -> Result<Self> {
        let spec = MaskSpec::Ngram { order };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MaskSpec::Ngram { order } if order < 2 => Err(Error::InvalidOrder(order)),
            _ => Ok(()),
        }
    }

    /// Maximum number of keys a query may attend, if bounded.
    pub fn window(&self) -> Option<usize> {
        match *self {
            MaskSpec::Ngram { order } => Some(order - 1),
            _ => None,
        }
    }

    pub fn is_causal_like(&self) -> bool {
        !matches!(self, MaskSpec::Full)
    }

    /// 0-indexed inclusive key range visible from 0-indexed `query` in a
    /// sequence of `len` keys.
    pub fn key_range(&self, query: usize, len: usize) -> (usize, usize) {
        match *self {
            MaskSpec::Full => (0, len - 1),
            MaskSpec::Causal => (0, query),
            MaskSpec::Ngram { order } => ((query + 2).saturating_sub(order), query),
        }
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSpec::Full => write!(f, "full"),
            MaskSpec::Causal => write!(f, "causal"),
            MaskSpec::Ngram { order } => write!(f, "ngram:{order}"),
        }
    }
}

impl FromStr for MaskSpec {
    type Err = Error;

    /// Accepts `full`, `causal`, `ngram:N` and `N-gram`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || {
            Error::Config(format!(
                "unknown mask `{s}` (expected full, causal or ngram:N)"
            ))
        };
        match s {
            "full" => Ok(MaskSpec::Full),
            "causal" => Ok(MaskSpec::Causal),
            _ => {
                let n = s
                    .strip_prefix("ngram:")
                    .or_else(|| s.strip_suffix("-gram"))
                    .ok_or_else(bad)?;
                let order = n.parse::<usize>().map_err(|_| bad())?;
                MaskSpec::ngram(order)
            }
        }
    }
}

/// Realized `T×T` visibility grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    size: usize,
    allowed: Vec<bool>,
}

pub fn build_mask(spec: MaskSpec, size: usize) -> Result<MaskMatrix> {
    spec.validate()?;
    if size == 0 {
        return Err(Error::Input("mask size must be at least 1".into()));
    }
    let mut allowed = vec![false; size * size];
    for q in 0..size {
        let (lo, hi) = spec.key_range(q, size);
        for j in lo..=hi {
            allowed[q * size + j] = true;
        }
    }
    Ok(MaskMatrix { size, allowed })
}

impl MaskMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    /// Whether 0-indexed `query` may attend 0-indexed `key`.
    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.size..(query + 1) * self.size]
    }

    pub fn row_count(&self, query: usize) -> usize {
        self.row(query).iter().filter(|&&a| a).count()
    }

    /// 1-indexed key positions visible from 1-indexed query position `k`.
    pub fn visible_positions(&self, k: usize) -> Vec<usize> {
        self.row(k - 1)
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(j, _)| j + 1)
            .collect()
    }

    /// One line per query, `x` for visible and `.` for masked keys.
    pub fn render(&self) -> String {
        let mut s = String::with_capacity(self.size * (self.size + 1));
        for q in 0..self.size {
            for &a in self.row(q) {
                s.push(if a { 'x' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for MaskMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}
