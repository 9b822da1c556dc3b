use std::collections::HashMap;

use super::{Denoiser, DenoiserOutput};
use crate::error::{DfmError, Result};
use crate::tokens::{state_index, Token};

/// Denoiser backed by a closure.
pub struct FnDenoiser<F> {
    size: usize,
    f: F,
}

impl<F> FnDenoiser<F>
where
    F: Fn(f64, &[Token]) -> Result<DenoiserOutput> + Send + Sync,
{
    pub fn new(size: usize, f: F) -> Self {
        Self { size, f }
    }
}

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(f64, &[Token]) -> Result<DenoiserOutput> + Send + Sync,
{
    fn size(&self) -> usize {
        self.size
    }

    fn predict(&self, t: f64, xt: &[Token]) -> Result<DenoiserOutput> {
        (self.f)(t, xt)
    }
}

/// Lookup table keyed by (time bin, state). Unseen keys predict uniform rows.
#[derive(Debug, Clone)]
pub struct TabularDenoiser {
    size: usize,
    dims: usize,
    base: usize,
    bins: usize,
    table: HashMap<(usize, u64), Vec<f64>>,
}

impl TabularDenoiser {
    /// `base` is the number of states per dimension (`S`, or `S + 1` with MASK).
    pub fn new(size: usize, dims: usize, base: usize, bins: usize) -> Result<Self> {
        if bins == 0 || base < size || size < 2 {
            return Err(DfmError::Shape(format!("bad table shape S={size} base={base} bins={bins}")));
        }
        if state_index(&vec![0; dims], base).is_none() {
            return Err(DfmError::Capacity { states: (base as u128).saturating_pow(dims as u32), limit: u64::MAX as u128 });
        }
        Ok(Self { size, dims, base, bins, table: HashMap::new() })
    }

    pub fn bin_of(&self, t: f64) -> usize {
        ((t * self.bins as f64).floor().max(0.0) as usize).min(self.bins - 1)
    }

    fn key(&self, t: f64, xt: &[Token]) -> Result<(usize, u64)> {
        if xt.len() != self.dims {
            return Err(DfmError::Shape(format!("state has {} dimensions, table has {}", xt.len(), self.dims)));
        }
        let idx = state_index(xt, self.base)
            .ok_or_else(|| DfmError::Shape("token outside the table's alphabet".into()))?;
        Ok((self.bin_of(t), idx))
    }

    pub fn insert(&mut self, t: f64, xt: &[Token], out: &DenoiserOutput) -> Result<()> {
        if out.size() != self.size || out.dims() != self.dims {
            return Err(DfmError::Shape("output shape does not match table".into()));
        }
        let key = self.key(t, xt)?;
        self.table.insert(key, out.rows().flatten().copied().collect());
        Ok(())
    }

    /// Empirical frequencies of `x1` per (bin, `xt`) with additive smoothing.
    pub fn fit(
        size: usize,
        base: usize,
        bins: usize,
        smoothing: f64,
        triples: &[(f64, Vec<Token>, Vec<Token>)],
    ) -> Result<Self> {
        let dims = triples.first().map_or(0, |(_, xt, _)| xt.len());
        let mut model = Self::new(size, dims, base, bins)?;
        let mut counts: HashMap<(usize, u64), Vec<f64>> = HashMap::new();
        for (t, xt, x1) in triples {
            if x1.len() != dims || x1.iter().any(|&k| k as usize >= size) {
                return Err(DfmError::Shape("clean sample does not match table".into()));
            }
            let key = model.key(*t, xt)?;
            let c = counts.entry(key).or_insert_with(|| vec![smoothing; dims * size]);
            for (d, &k) in x1.iter().enumerate() {
                c[d * size + k as usize] += 1.0;
            }
        }
        for (key, mut c) in counts {
            for row in c.chunks_mut(size) {
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= total);
            }
            model.table.insert(key, c);
        }
        Ok(model)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Denoiser for TabularDenoiser {
    fn size(&self) -> usize {
        self.size
    }

    fn predict(&self, t: f64, xt: &[Token]) -> Result<DenoiserOutput> {
        let key = self.key(t, xt)?;
        Ok(match self.table.get(&key) {
            Some(p) => DenoiserOutput::from_flat_unchecked(p.clone(), self.size),
            None => DenoiserOutput::uniform(self.dims, self.size),
        })
    }
}
