//! Alphabets and token sequences.

use serde::{Deserialize, Serialize};

use crate::error::{DfmError, Result};

/// Integer code of a token. Data tokens occupy `0..S`; MASK, when enabled, is `S`.
pub type Token = u32;

/// Data alphabet of size `S`, optionally extended by one absorbing MASK symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Alphabet {
    size: usize,
    mask_enabled: bool,
}

impl Alphabet {
    pub fn new(size: usize, mask_enabled: bool) -> Result<Self> {
        if size < 2 {
            return Err(DfmError::InvalidAlphabet(format!("S must be >= 2, got {size}")));
        }
        if size >= Token::MAX as usize {
            return Err(DfmError::InvalidAlphabet(format!("S={size} does not fit a token code")));
        }
        Ok(Self { size, mask_enabled })
    }

    /// Number of data states `S`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask_enabled(&self) -> bool {
        self.mask_enabled
    }

    pub fn mask(&self) -> Option<Token> {
        self.mask_enabled.then_some(self.size as Token)
    }

    /// Number of CTMC states per dimension: `S`, or `S + 1` with MASK.
    pub fn num_states(&self) -> usize {
        self.size + usize::from(self.mask_enabled)
    }

    pub fn is_mask(&self, tok: Token) -> bool {
        self.mask_enabled && tok as usize == self.size
    }

    pub fn is_data(&self, tok: Token) -> bool {
        (tok as usize) < self.size
    }

    /// Checks that `tok` is a legal CTMC state code.
    pub fn check(&self, tok: Token) -> Result<()> {
        let t = tok as usize;
        if t < self.size || (self.mask_enabled && t == self.size) {
            Ok(())
        } else if t == self.size {
            Err(DfmError::InvalidAlphabet(format!("MASK code {tok} used but MASK is disabled")))
        } else {
            Err(DfmError::InvalidAlphabet(format!("token {tok} outside alphabet of size {}", self.size)))
        }
    }

    pub fn check_data(&self, tok: Token) -> Result<()> {
        if self.is_data(tok) {
            Ok(())
        } else {
            Err(DfmError::InvalidAlphabet(format!("token {tok} is not a data token (S={})", self.size)))
        }
    }

    pub fn check_sequence(&self, tokens: &[Token]) -> Result<()> {
        if tokens.is_empty() {
            return Err(DfmError::Shape("token sequence must have D >= 1".into()));
        }
        tokens.iter().try_for_each(|&t| self.check(t))
    }
}

/// A D-dimensional categorical state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<Token>);

impl TokenSequence {
    pub fn new(tokens: Vec<Token>, alphabet: &Alphabet) -> Result<Self> {
        alphabet.check_sequence(&tokens)?;
        Ok(Self(tokens))
    }

    pub fn filled(len: usize, tok: Token) -> Self {
        Self(vec![tok; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Token] {
        &self.0
    }

    pub fn count_mask(&self, alphabet: &Alphabet) -> usize {
        self.0.iter().filter(|&&t| alphabet.is_mask(t)).count()
    }

    pub fn hamming(&self, other: &TokenSequence) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

impl std::ops::Deref for TokenSequence {
    type Target = [Token];
    fn deref(&self) -> &[Token] {
        &self.0
    }
}

impl From<Vec<Token>> for TokenSequence {
    fn from(v: Vec<Token>) -> Self {
        Self(v)
    }
}

/// Mixed-radix index of a sequence in `base^D`; `None` when it overflows `u64`.
pub fn state_index(tokens: &[Token], base: usize) -> Option<u64> {
    let mut idx: u64 = 0;
    for &t in tokens.iter().rev() {
        idx = idx.checked_mul(base as u64)?.checked_add(t as u64)?;
    }
    Some(idx)
}

/// Inverse of [`state_index`].
pub fn state_from_index(mut idx: u64, base: usize, len: usize) -> Vec<Token> {
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push((idx % base as u64) as Token);
        idx /= base as u64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_code_is_s() {
        let a = Alphabet::new(4, true).unwrap();
        assert_eq!(a.mask(), Some(4));
        assert_eq!(a.num_states(), 5);
        assert!(a.check(4).is_ok());
        assert!(a.check(5).is_err());
        let b = Alphabet::new(4, false).unwrap();
        assert!(matches!(b.check(4), Err(DfmError::InvalidAlphabet(_))));
    }

    #[test]
    fn rejects_tiny_alphabet() {
        assert!(Alphabet::new(1, true).is_err());
    }

    #[test]
    fn index_roundtrip() {
        let s = vec![3, 0, 4, 1];
        let i = state_index(&s, 5).unwrap();
        assert_eq!(state_from_index(i, 5, 4), s);
    }
}
