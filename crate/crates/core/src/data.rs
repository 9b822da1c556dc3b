//! Data distributions over token sequences.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DfmError, Result};
use crate::tokens::{Token, TokenSequence};

/// An explicit finite distribution: the canonical form for exact oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDistribution {
    size: usize,
    dims: usize,
    entries: Vec<(Vec<Token>, f64)>,
    cdf: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EntryJson {
    tokens: Vec<Token>,
    p: f64,
}

#[derive(Serialize, Deserialize)]
struct TabularJson {
    #[serde(rename = "S")]
    s: usize,
    #[serde(rename = "D")]
    d: usize,
    entries: Vec<EntryJson>,
}

impl TabularDistribution {
    pub fn new(size: usize, dims: usize, entries: Vec<(Vec<Token>, f64)>) -> Result<Self> {
        if size < 2 || dims == 0 {
            return Err(DfmError::InvalidDistribution(format!("need S >= 2 and D >= 1, got S={size} D={dims}")));
        }
        if entries.is_empty() {
            return Err(DfmError::InvalidDistribution("empty support".into()));
        }
        let mut seen = HashSet::new();
        for (toks, p) in &entries {
            if toks.len() != dims {
                return Err(DfmError::InvalidDistribution(format!("entry of length {} in D={dims} table", toks.len())));
            }
            if let Some(&bad) = toks.iter().find(|&&t| t as usize >= size) {
                return Err(DfmError::InvalidDistribution(format!("token {bad} outside data alphabet 0..{size}")));
            }
            if !(p.is_finite() && *p >= 0.0) {
                return Err(DfmError::InvalidDistribution(format!("bad probability {p}")));
            }
            if !seen.insert(toks.clone()) {
                return Err(DfmError::InvalidDistribution(format!("duplicate entry {toks:?}")));
            }
        }
        let total: f64 = entries.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(DfmError::InvalidDistribution(format!("probabilities sum to {total}")));
        }
        let mut acc = 0.0;
        let cdf = entries
            .iter()
            .map(|(_, p)| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { size, dims, entries, cdf })
    }

    /// Normalizes non-negative weights before validating.
    pub fn from_weights(size: usize, dims: usize, weighted: Vec<(Vec<Token>, f64)>) -> Result<Self> {
        let total: f64 = weighted.iter().map(|(_, w)| w).sum();
        if !(total > 0.0) {
            return Err(DfmError::InvalidDistribution("weights sum to zero".into()));
        }
        let entries = weighted.into_iter().filter(|(_, w)| *w > 0.0).map(|(t, w)| (t, w / total)).collect();
        Self::new(size, dims, entries)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn entries(&self) -> &[(Vec<Token>, f64)] {
        &self.entries
    }

    pub fn prob(&self, tokens: &[Token]) -> f64 {
        self.entries.iter().find(|(t, _)| t.as_slice() == tokens).map_or(0.0, |(_, p)| *p)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenSequence {
        let u = rng.random::<f64>() * self.cdf.last().copied().unwrap_or(1.0);
        let i = self.cdf.partition_point(|&c| c <= u).min(self.entries.len() - 1);
        TokenSequence(self.entries[i].0.clone())
    }

    /// Per-dimension marginals `p(x^d = k)`, shape `D × S`.
    pub fn dim_marginals(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.size]; self.dims];
        for (toks, p) in &self.entries {
            for (d, &k) in toks.iter().enumerate() {
                out[d][k as usize] += p;
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let js = TabularJson {
            s: self.size,
            d: self.dims,
            entries: self.entries.iter().map(|(t, p)| EntryJson { tokens: t.clone(), p: *p }).collect(),
        };
        Ok(serde_json::to_string_pretty(&js)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let js: TabularJson = serde_json::from_str(text)?;
        Self::new(js.s, js.d, js.entries.into_iter().map(|e| (e.tokens, e.p)).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let text = self.to_json().expect("serializing plain data cannot fail");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Either an explicit table or an opaque bag of samples.
///
/// Only the tabular form supports exact oracles (posterior, marginals).
#[derive(Debug, Clone)]
pub enum DataDistribution {
    Tabular(TabularDistribution),
    Samples { size: usize, samples: Vec<TokenSequence> },
}

impl DataDistribution {
    pub fn size(&self) -> usize {
        match self {
            Self::Tabular(t) => t.size(),
            Self::Samples { size, .. } => *size,
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            Self::Tabular(t) => t.dims(),
            Self::Samples { samples, .. } => samples.first().map_or(0, |s| s.len()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenSequence {
        match self {
            Self::Tabular(t) => t.sample(rng),
            Self::Samples { samples, .. } => samples[rng.random_range(0..samples.len())].clone(),
        }
    }

    pub fn as_tabular(&self) -> Result<&TabularDistribution> {
        match self {
            Self::Tabular(t) => Ok(t),
            Self::Samples { .. } => Err(DfmError::NotAvailable(
                "exact oracles need a tabular distribution".into(),
            )),
        }
    }
}

/// Synthetic families used by the experiment driver and the test suites.
pub mod families {
    use super::*;
    use crate::tokens::state_from_index;

    pub fn point_mass(size: usize, point: Vec<Token>) -> Result<TabularDistribution> {
        let d = point.len();
        TabularDistribution::new(size, d, vec![(point, 1.0)])
    }

    pub fn iid_uniform(size: usize, dims: usize) -> Result<TabularDistribution> {
        let n = checked_states(size, dims)?;
        let p = 1.0 / n as f64;
        TabularDistribution::new(size, dims, (0..n).map(|i| (state_from_index(i, size, dims), p)).collect())
    }

    /// Uniform over sequences whose token sum is even.
    pub fn parity(size: usize, dims: usize) -> Result<TabularDistribution> {
        let n = checked_states(size, dims)?;
        let weighted = (0..n)
            .map(|i| state_from_index(i, size, dims))
            .filter(|s| s.iter().map(|&t| t as u64).sum::<u64>() % 2 == 0)
            .map(|s| (s, 1.0))
            .collect();
        TabularDistribution::from_weights(size, dims, weighted)
    }

    /// Stationary-start Markov chain with a given initial law and transition matrix.
    pub fn markov_chain(initial: &[f64], transition: &[Vec<f64>], dims: usize) -> Result<TabularDistribution> {
        let size = initial.len();
        if transition.len() != size || transition.iter().any(|r| r.len() != size) {
            return Err(DfmError::Shape("transition matrix must be S×S".into()));
        }
        let n = checked_states(size, dims)?;
        let weighted = (0..n)
            .map(|i| {
                let s = state_from_index(i, size, dims);
                let mut w = initial[s[0] as usize];
                for pair in s.windows(2) {
                    w *= transition[pair[0] as usize][pair[1] as usize];
                }
                (s, w)
            })
            .collect();
        TabularDistribution::from_weights(size, dims, weighted)
    }

    /// Markov chain with random (Dirichlet-like) rows drawn from `rng`.
    pub fn random_markov_chain<R: Rng + ?Sized>(size: usize, dims: usize, rng: &mut R) -> Result<TabularDistribution> {
        let mut row = || {
            let v: Vec<f64> = (0..size).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
            let z: f64 = v.iter().sum();
            v.into_iter().map(|x| x / z).collect::<Vec<_>>()
        };
        let initial = row();
        let transition: Vec<Vec<f64>> = (0..size).map(|_| row()).collect();
        markov_chain(&initial, &transition, dims)
    }

    /// The S=4, D=3 structured toy: a sticky Markov chain with a skewed start.
    pub fn structured_toy() -> TabularDistribution {
        let initial = [0.4, 0.3, 0.2, 0.1];
        let transition = vec![
            vec![0.70, 0.10, 0.10, 0.10],
            vec![0.05, 0.60, 0.30, 0.05],
            vec![0.10, 0.10, 0.20, 0.60],
            vec![0.50, 0.05, 0.05, 0.40],
        ];
        markov_chain(&initial, &transition, 3).expect("valid toy chain")
    }

    /// The S=2, D=2 correlated toy.
    pub fn correlated_pair() -> TabularDistribution {
        TabularDistribution::new(
            2,
            2,
            vec![(vec![0, 0], 0.45), (vec![1, 1], 0.35), (vec![0, 1], 0.15), (vec![1, 0], 0.05)],
        )
        .expect("valid toy")
    }

    fn checked_states(size: usize, dims: usize) -> Result<u64> {
        let n = (size as u128).checked_pow(dims as u32).unwrap_or(u128::MAX);
        if n > crate::schedule::MAX_ENUMERATED_STATES {
            return Err(DfmError::Capacity { states: n, limit: crate::schedule::MAX_ENUMERATED_STATES });
        }
        Ok(n as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::families::*;
    use super::*;
    use crate::rng::root_rng;

    #[test]
    fn rejects_bad_tables() {
        assert!(TabularDistribution::new(2, 1, vec![(vec![0], 0.5)]).is_err());
        assert!(TabularDistribution::new(2, 1, vec![(vec![2], 1.0)]).is_err());
        assert!(TabularDistribution::new(2, 2, vec![(vec![0], 1.0)]).is_err());
        assert!(TabularDistribution::new(2, 1, vec![(vec![0], 0.5), (vec![0], 0.5)]).is_err());
    }

    #[test]
    fn json_roundtrip_preserves_hash() {
        let t = structured_toy();
        let back = TabularDistribution::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(t, back);
        assert_eq!(t.content_hash(), back.content_hash());
    }

    #[test]
    fn parity_s2_d4_has_eight_equal_entries() {
        let p = parity(2, 4).unwrap();
        assert_eq!(p.entries().len(), 8);
        for (toks, w) in p.entries() {
            assert_eq!(toks.iter().sum::<u32>() % 2, 0);
            assert!((w - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn point_mass_has_one_entry() {
        let p = point_mass(4, vec![1, 2, 3]).unwrap();
        assert_eq!(p.entries().len(), 1);
        assert_eq!(p.entries()[0].1, 1.0);
    }

    #[test]
    fn sampling_follows_table() {
        let t = correlated_pair();
        let mut rng = root_rng(9);
        let n = 40_000;
        let hits = (0..n).filter(|_| t.sample(&mut rng).0 == vec![0, 0]).count();
        assert!((hits as f64 / n as f64 - 0.45).abs() < 0.01);
    }

    #[test]
    fn structured_toy_is_normalized() {
        let t = structured_toy();
        assert_eq!(t.size(), 4);
        assert_eq!(t.dims(), 3);
        let total: f64 = t.entries().iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
