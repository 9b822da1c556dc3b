//! Approximations of `p_{1|t}(x1 | xt)` factorized over dimensions.

mod exact;
pub(crate) mod mlp;
mod tabular;
pub(crate) mod train;

pub use exact::{exact_posterior, ExactPosterior};
pub use mlp::{random_examples, Example, LayerParams, MlpCheckpoint, MlpDenoiser, MlpShape, TIME_FEATURES};
pub use tabular::{FnDenoiser, TabularDenoiser};
pub use train::{ce_loss, ce_loss_estimate, train, CeEstimate, LossWeight, Optimizer, TrainConfig, TrainOutcome};

use crate::error::{DfmError, Result};
use crate::tokens::Token;

/// Tolerance on row normalization.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Per-dimension distributions over data tokens, `D × S`.
///
/// There is no MASK column, so MASK can never be predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    size: usize,
    probs: Vec<f64>,
}

impl DenoiserOutput {
    pub fn new(rows: Vec<Vec<f64>>, size: usize) -> Result<Self> {
        let mut probs = Vec::with_capacity(rows.len() * size);
        for (d, row) in rows.iter().enumerate() {
            check_row(row, size).map_err(|e| DfmError::InvalidDenoiser(format!("dimension {d}: {e}")))?;
            probs.extend_from_slice(row);
        }
        Ok(Self { size, probs })
    }

    /// Flat row-major table; rows are validated.
    pub fn from_flat(probs: Vec<f64>, size: usize) -> Result<Self> {
        if size == 0 || probs.len() % size != 0 {
            return Err(DfmError::InvalidDenoiser(format!("{} entries do not split into rows of {size}", probs.len())));
        }
        for (d, row) in probs.chunks(size).enumerate() {
            check_row(row, size).map_err(|e| DfmError::InvalidDenoiser(format!("dimension {d}: {e}")))?;
        }
        Ok(Self { size, probs })
    }

    pub(crate) fn from_flat_unchecked(probs: Vec<f64>, size: usize) -> Self {
        Self { size, probs }
    }

    pub fn uniform(dims: usize, size: usize) -> Self {
        Self { size, probs: vec![1.0 / size as f64; dims * size] }
    }

    pub fn point_mass(tokens: &[Token], size: usize) -> Self {
        let mut probs = vec![0.0; tokens.len() * size];
        for (d, &k) in tokens.iter().enumerate() {
            probs[d * size + k as usize] = 1.0;
        }
        Self { size, probs }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dims(&self) -> usize {
        self.probs.len() / self.size
    }

    pub fn row(&self, d: usize) -> &[f64] {
        &self.probs[d * self.size..(d + 1) * self.size]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.size)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    /// `max_k p(x1^d = k)` per dimension.
    pub fn purity(&self) -> Vec<f64> {
        self.rows().map(|r| r.iter().copied().fold(0.0, f64::max)).collect()
    }

    /// Argmax per dimension, lowest token on ties.
    pub fn argmax(&self) -> Vec<Token> {
        self.rows()
            .map(|r| {
                let mut best = 0;
                for (k, &p) in r.iter().enumerate() {
                    if p > r[best] {
                        best = k;
                    }
                }
                best as Token
            })
            .collect()
    }

    /// Mean over dimensions of the total-variation distance between rows.
    pub fn mean_tv(&self, other: &DenoiserOutput) -> f64 {
        let tv: f64 = self
            .rows()
            .zip(other.rows())
            .map(|(a, b)| 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
            .sum();
        tv / self.dims().max(1) as f64
    }
}

fn check_row(row: &[f64], size: usize) -> std::result::Result<(), String> {
    if row.len() != size {
        return Err(format!("row has {} entries, expected {size}", row.len()));
    }
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err("negative or non-finite probability".into());
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_SUM_TOL {
        return Err(format!("row sums to {total}"));
    }
    Ok(())
}

/// A model of `p_{1|t}` over `S` data tokens.
pub trait Denoiser: Send + Sync {
    /// Number of data tokens `S`.
    fn size(&self) -> usize;

    fn predict(&self, t: f64, xt: &[Token]) -> Result<DenoiserOutput>;

    /// Unnormalized log-probabilities; defaults to `ln p`.
    fn logits(&self, t: f64, xt: &[Token]) -> Result<Vec<Vec<f64>>> {
        Ok(self.predict(t, xt)?.rows().map(|r| r.iter().map(|p| p.ln()).collect()).collect())
    }
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn size(&self) -> usize {
        (**self).size()
    }
    fn predict(&self, t: f64, xt: &[Token]) -> Result<DenoiserOutput> {
        (**self).predict(t, xt)
    }
    fn logits(&self, t: f64, xt: &[Token]) -> Result<Vec<Vec<f64>>> {
        (**self).logits(t, xt)
    }
}

impl<T: Denoiser + ?Sized> Denoiser for Box<T> {
    fn size(&self) -> usize {
        (**self).size()
    }
    fn predict(&self, t: f64, xt: &[Token]) -> Result<DenoiserOutput> {
        (**self).predict(t, xt)
    }
    fn logits(&self, t: f64, xt: &[Token]) -> Result<Vec<Vec<f64>>> {
        (**self).logits(t, xt)
    }
}

impl<T: Denoiser + ?Sized> Denoiser for std::sync::Arc<T> {
    fn size(&self) -> usize {
        (**self).size()
    }
    fn predict(&self, t: f64, xt: &[Token]) -> Result<DenoiserOutput> {
        (**self).predict(t, xt)
    }
    fn logits(&self, t: f64, xt: &[Token]) -> Result<Vec<Vec<f64>>> {
        (**self).logits(t, xt)
    }
}

/// Rowwise `softmax(logits / temperature)`.
pub fn apply_temperature(logits: &[Vec<f64>], temperature: f64) -> Result<DenoiserOutput> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(DfmError::Domain(format!("temperature must be > 0, got {temperature}")));
    }
    let size = logits.first().map_or(0, Vec::len);
    let mut probs = Vec::with_capacity(logits.len() * size);
    for row in logits {
        if row.len() != size {
            return Err(DfmError::InvalidDenoiser("ragged logit table".into()));
        }
        softmax_into(row, temperature, &mut probs);
    }
    Ok(DenoiserOutput { size, probs })
}

pub(crate) fn softmax_into(row: &[f64], temperature: f64, out: &mut Vec<f64>) {
    let scaled = row.iter().map(|&l| l / temperature);
    let max = scaled.clone().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    if max == f64::INFINITY {
        // Infinite logits: split mass over the infinite entries.
        let n = row.iter().filter(|l| **l == f64::INFINITY).count() as f64;
        out.extend(row.iter().map(|&l| if l == f64::INFINITY { 1.0 / n } else { 0.0 }));
        return;
    }
    out.extend(scaled.map(|l| (l - max).exp()));
    let total: f64 = out[start..].iter().sum();
    out[start..].iter_mut().for_each(|p| *p /= total);
}

/// Wraps a denoiser and rescales its logits by `1 / temperature`.
#[derive(Debug, Clone)]
pub struct Tempered<D> {
    inner: D,
    temperature: f64,
}

impl<D: Denoiser> Tempered<D> {
    pub fn new(inner: D, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(DfmError::Domain(format!("temperature must be > 0, got {temperature}")));
        }
        Ok(Self { inner, temperature })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn inner(&self) -> &D {
        &self.inner
    }
}

impl<D: Denoiser> Denoiser for Tempered<D> {
    fn size(&self) -> usize {
        self.inner.size()
    }

    fn predict(&self, t: f64, xt: &[Token]) -> Result<DenoiserOutput> {
        if self.temperature == 1.0 {
            return self.inner.predict(t, xt);
        }
        apply_temperature(&self.inner.logits(t, xt)?, self.temperature)
    }

    fn logits(&self, t: f64, xt: &[Token]) -> Result<Vec<Vec<f64>>> {
        let l = self.inner.logits(t, xt)?;
        Ok(l.into_iter().map(|r| r.into_iter().map(|v| v / self.temperature).collect()).collect())
    }
}
