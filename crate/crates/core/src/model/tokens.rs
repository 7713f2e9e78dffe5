use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Smallest id that is not a special token.
pub const FIRST_CONTENT_TOKEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Source,
    /// Complete target: `BOS .. EOS`, optionally followed by `PAD`s.
    Target,
    /// Decoder input prefix: starts with `BOS`, no end marker required.
    TargetPrefix,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    role: Role,
}

impl TokenSequence {
    pub fn source(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Input("source sequence is empty".into()));
        }
        Ok(Self {
            ids,
            role: Role::Source,
        })
    }

    pub fn target(ids: Vec<usize>) -> Result<Self> {
        if ids.first() != Some(&BOS) {
            return Err(Error::Input(format!(
                "target must start with BOS, got {ids:?}"
            )));
        }
        let last = ids.iter().rposition(|&t| t != PAD).unwrap_or(0);
        if last == 0 || ids[last] != EOS {
            return Err(Error::Input(format!(
                "target must end with EOS, got {ids:?}"
            )));
        }
        Ok(Self {
            ids,
            role: Role::Target,
        })
    }

    pub fn prefix(ids: Vec<usize>) -> Result<Self> {
        if ids.first() != Some(&BOS) {
            return Err(Error::Input(format!(
                "target prefix must start with BOS, got {ids:?}"
            )));
        }
        Ok(Self {
            ids,
            role: Role::TargetPrefix,
        })
    }

    /// `BOS, content.., EOS`.
    pub fn wrap_target(content: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(content);
        ids.push(EOS);
        Self {
            ids,
            role: Role::Target,
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Tokens strictly between `BOS` and `EOS`.
    pub fn content(&self) -> &[usize] {
        let start = usize::from(self.ids.first() == Some(&BOS));
        let end = self
            .ids
            .iter()
            .position(|&t| t == EOS)
            .unwrap_or(self.ids.len());
        &self.ids[start..end.max(start)]
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&t| t >= vocab_size) {
            Some(t) => Err(Error::Input(format!(
                "token id {t} outside vocabulary of size {vocab_size}"
            ))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_shape_checks() {
        assert!(TokenSequence::target(vec![BOS, 5, EOS]).is_ok());
        assert!(TokenSequence::target(vec![BOS, 5, EOS, PAD, PAD]).is_ok());
        assert!(TokenSequence::target(vec![5, EOS]).is_err());
        assert!(TokenSequence::target(vec![BOS, 5]).is_err());
        assert!(TokenSequence::target(vec![BOS]).is_err());
        assert!(TokenSequence::source(vec![]).is_err());
    }

    #[test]
    fn content_strips_markers() {
        assert_eq!(TokenSequence::wrap_target(&[5, 7, 9]).content(), &[5, 7, 9]);
        assert_eq!(TokenSequence::prefix(vec![BOS, 4]).unwrap().content(), &[4]);
    }
}
