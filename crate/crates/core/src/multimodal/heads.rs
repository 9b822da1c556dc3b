use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{JointDataset, JointDenoiser, JointPrediction, JointState};
use crate::denoise::DenoiserOutput;
use crate::error::{DfmError, Result};
use crate::schedule::sample_categorical;
use crate::tokens::{Alphabet, Token};

/// Mixture whose component `k` emits `x1 ~ N(means[k], sigmas[k]² I)` together
/// with the fixed token sequence `tokens[k]`. `sigmas[k] = 0` gives a point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
    pub tokens: Vec<Vec<Token>>,
    #[serde(rename = "S")]
    pub size: usize,
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        sigmas: Vec<f64>,
        tokens: Vec<Vec<Token>>,
        size: usize,
    ) -> Result<Self> {
        let m = Self { weights, means, sigmas, tokens, size };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.sigmas.len() != k || self.tokens.len() != k {
            return Err(DfmError::Shape("mixture fields must have one entry per component".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(DfmError::InvalidDistribution("mixture weights must be a distribution".into()));
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(DfmError::InvalidDistribution("component scales must be finite and >= 0".into()));
        }
        let dc = self.means[0].len();
        let da = self.tokens[0].len();
        let alphabet = Alphabet::new(self.size, false)?;
        for (mu, a) in self.means.iter().zip(&self.tokens) {
            if mu.len() != dc || a.len() != da || mu.iter().any(|v| !v.is_finite()) {
                return Err(DfmError::Shape("components disagree on dimensions".into()));
            }
            alphabet.check_sequence(a)?;
        }
        Ok(())
    }

    /// Labeled mixture on the real line: component `k` has label token `k`.
    pub fn labeled_1d(weights: Vec<f64>, means: Vec<f64>, sigma: f64) -> Result<Self> {
        let k = weights.len();
        Self::new(
            weights,
            means.into_iter().map(|m| vec![m]).collect(),
            vec![sigma; k],
            (0..k as Token).map(|i| vec![i]).collect(),
            k.max(2),
        )
    }

    /// Equal-weight point masses at the rows of a dataset.
    pub fn empirical(ds: &JointDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(DfmError::InvalidDistribution("empty dataset".into()));
        }
        let n = ds.len();
        Self::new(vec![1.0 / n as f64; n], ds.coords.clone(), vec![0.0; n], ds.tokens.clone(), ds.size)
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn coord_dims(&self) -> usize {
        self.means[0].len()
    }

    pub fn token_dims(&self) -> usize {
        self.tokens[0].len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<Token>) {
        let k = sample_categorical(&self.weights, rng);
        let coords = self.means[k]
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.sigmas[k] * z
            })
            .collect();
        (coords, self.tokens[k].clone())
    }

    pub fn dataset<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> JointDataset {
        let (coords, tokens) = (0..n).map(|_| self.sample(rng)).unzip();
        JointDataset { coords, tokens, size: self.size }
    }
}

/// Posterior-mean coordinates and posterior token marginals of a mixture.
#[derive(Debug, Clone)]
pub struct ExactGmmHeads {
    mix: GaussianMixture,
}

impl ExactGmmHeads {
    pub fn new(mix: GaussianMixture) -> Self {
        Self { mix }
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mix
    }

    /// Posterior weights of the components given the noisy state.
    pub fn responsibilities(&self, state: &JointState) -> Result<Vec<f64>> {
        let mix = &self.mix;
        let (t, tt) = (state.t, state.t_tilde);
        let mask = mix.size as Token;
        let mut logs = Vec::with_capacity(mix.components());
        let mut exact_hits = Vec::new();
        for k in 0..mix.components() {
            let mut lw = mix.weights[k].ln();
            for (&a, &ak) in state.tokens.iter().zip(&mix.tokens[k]) {
                lw += if a == mask {
                    (1.0 - tt).ln()
                } else if a == ak {
                    tt.ln()
                } else {
                    f64::NEG_INFINITY
                };
            }
            let var = t * t * mix.sigmas[k].powi(2) + (1.0 - t).powi(2);
            if var == 0.0 {
                let hit = state.coords.iter().zip(&mix.means[k]).all(|(x, m)| (x - m).abs() < 1e-9);
                if hit && lw > f64::NEG_INFINITY {
                    exact_hits.push((k, lw));
                }
                logs.push(f64::NEG_INFINITY);
                continue;
            }
            for (x, m) in state.coords.iter().zip(&mix.means[k]) {
                lw += -0.5 * (x - t * m).powi(2) / var - 0.5 * var.ln();
            }
            logs.push(lw);
        }
        if !exact_hits.is_empty() {
            // Coordinates sit exactly on point components; they dominate any density.
            logs.iter_mut().for_each(|l| *l = f64::NEG_INFINITY);
            for (k, lw) in exact_hits {
                logs[k] = lw;
            }
        }
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(DfmError::UnreachableState { t });
        }
        let mut w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= z);
        Ok(w)
    }
}

impl JointDenoiser for ExactGmmHeads {
    fn size(&self) -> usize {
        self.mix.size
    }

    fn coord_dims(&self) -> usize {
        self.mix.coord_dims()
    }

    fn token_dims(&self) -> usize {
        self.mix.token_dims()
    }

    fn predict(&self, state: &JointState) -> Result<JointPrediction> {
        let mix = &self.mix;
        if state.coords.len() != mix.coord_dims() || state.tokens.len() != mix.token_dims() {
            return Err(DfmError::Shape("state does not match the mixture".into()));
        }
        let resp = self.responsibilities(state)?;
        let t = state.t;
        let mut x1_hat = vec![0.0; mix.coord_dims()];
        for (k, &r) in resp.iter().enumerate() {
            if r == 0.0 {
                continue;
            }
            let s2 = mix.sigmas[k].powi(2);
            let var = t * t * s2 + (1.0 - t).powi(2);
            for ((out, x), m) in x1_hat.iter_mut().zip(&state.coords).zip(&mix.means[k]) {
                let mean = if var == 0.0 { *x } else { m + t * s2 / var * (x - t * m) };
                *out += r * mean;
            }
        }
        let s = mix.size;
        let mask = s as Token;
        let mut probs = vec![0.0; mix.token_dims() * s];
        for (d, &a) in state.tokens.iter().enumerate() {
            if a != mask {
                probs[d * s + a as usize] = 1.0;
                continue;
            }
            for (k, &r) in resp.iter().enumerate() {
                probs[d * s + mix.tokens[k][d] as usize] += r;
            }
        }
        Ok(JointPrediction { x1_hat, tokens: DenoiserOutput::from_flat(probs, s)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_identify_component() {
        let mix = GaussianMixture::labeled_1d(vec![0.3, 0.7], vec![-2.0, 3.0], 0.5).unwrap();
        let heads = ExactGmmHeads::new(mix);
        let state = JointState { coords: vec![0.4], tokens: vec![1], t: 0.5, t_tilde: 1.0 };
        let r = heads.responsibilities(&state).unwrap();
        assert_eq!(r, vec![0.0, 1.0]);
        let pred = heads.predict(&state).unwrap();
        // N(3, 0.25) prior, observation 0.5·x1 + 0.5·noise: posterior mean by hand.
        let var = 0.25 * 0.25 + 0.25;
        let expected = 3.0 + 0.5 * 0.25 / var * (0.4 - 1.5);
        assert!((pred.x1_hat[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn masked_tokens_follow_coordinates() {
        let mix = GaussianMixture::labeled_1d(vec![0.5, 0.5], vec![-2.0, 2.0], 0.0).unwrap();
        let heads = ExactGmmHeads::new(mix);
        let state = JointState { coords: vec![2.0], tokens: vec![2], t: 1.0, t_tilde: 0.3 };
        let pred = heads.predict(&state).unwrap();
        assert_eq!(pred.tokens.row(0), &[0.0, 1.0]);
        assert_eq!(pred.x1_hat, vec![2.0]);
    }

    #[test]
    fn impossible_state_is_unreachable() {
        let mix = GaussianMixture::labeled_1d(vec![0.5, 0.5], vec![-2.0, 2.0], 0.0).unwrap();
        let heads = ExactGmmHeads::new(mix);
        let state = JointState { coords: vec![0.0], tokens: vec![0], t: 1.0, t_tilde: 1.0 };
        assert!(heads.predict(&state).is_err());
    }
}
