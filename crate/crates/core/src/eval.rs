//! Distances, likelihood bounds and consistency checks against exact oracles.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TabularDistribution;
use crate::denoise::train::mean_stderr;
use crate::denoise::Denoiser;
use crate::error::{DfmError, Result};
use crate::rates::{conditional_rate_row, r_star_row, uniform_db_row_general, RatePlan, RateRow};
use crate::sampler::{euler_step_distribution, Trajectory};
use crate::schedule::{ConditionalFlow, DEFAULT_EPS};
use crate::tokens::Token;

/// Relative frequencies of distinct sequences.
pub fn empirical_distribution(samples: &[Vec<Token>]) -> BTreeMap<Vec<Token>, f64> {
    let mut out: BTreeMap<Vec<Token>, f64> = BTreeMap::new();
    let w = 1.0 / samples.len().max(1) as f64;
    for s in samples {
        *out.entry(s.clone()).or_default() += w;
    }
    out
}

/// `½ Σ |p − q|` over the union of supports.
pub fn tv_maps(p: &BTreeMap<Vec<Token>, f64>, q: &BTreeMap<Vec<Token>, f64>) -> f64 {
    let mut total = 0.0;
    for (x, a) in p {
        total += (a - q.get(x).copied().unwrap_or(0.0)).abs();
    }
    for (x, b) in q {
        if !p.contains_key(x) {
            total += b;
        }
    }
    (0.5 * total).min(1.0)
}

fn table_map(dist: &TabularDistribution) -> BTreeMap<Vec<Token>, f64> {
    dist.entries().iter().cloned().collect()
}

fn check_space(samples: &[Vec<Token>], size: usize, dims: usize) -> Result<()> {
    for s in samples {
        if s.len() != dims || s.iter().any(|&k| k as usize >= size) {
            return Err(DfmError::Incompatible(format!(
                "sample {s:?} is outside the reference space (S={size}, D={dims})"
            )));
        }
    }
    Ok(())
}

/// TV distance between the empirical distribution of `samples` and a table.
pub fn tv_distance(samples: &[Vec<Token>], reference: &TabularDistribution) -> Result<f64> {
    if samples.is_empty() {
        return Err(DfmError::Shape("no samples".into()));
    }
    check_space(samples, reference.size(), reference.dims())?;
    Ok(tv_maps(&empirical_distribution(samples), &table_map(reference)))
}

pub fn tv_tables(a: &TabularDistribution, b: &TabularDistribution) -> Result<f64> {
    if a.size() != b.size() || a.dims() != b.dims() {
        return Err(DfmError::Incompatible("tables live on different spaces".into()));
    }
    Ok(tv_maps(&table_map(a), &table_map(b)))
}

pub fn tv_empirical(a: &[Vec<Token>], b: &[Vec<Token>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(DfmError::Shape("no samples".into()));
    }
    let dims = a[0].len();
    if a.iter().chain(b).any(|s| s.len() != dims) {
        return Err(DfmError::Incompatible("samples have different lengths".into()));
    }
    Ok(tv_maps(&empirical_distribution(a), &empirical_distribution(b)))
}

/// Where the clean sequences of a likelihood estimate come from.
pub enum ElboSource<'a> {
    Table(&'a TabularDistribution),
    TestSet(&'a [Vec<Token>]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    /// Upper bound on the negative log-likelihood, in bits per token.
    pub bits_per_token: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Monte-Carlo masking likelihood bound
/// `E[Σ_d δ{xt^d, M} · (1/(1−t)) · (−ln p(x1^d | xt))] / (D ln 2)`
/// with `t ~ U[eps, 1 − eps]`.
pub fn masking_elbo<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    flow: &ConditionalFlow,
    source: ElboSource<'_>,
    mc_samples: usize,
    eps: f64,
    rng: &mut R,
) -> Result<ElboEstimate> {
    if !flow.is_masking() {
        return Err(DfmError::Incompatible("the likelihood bound is defined for masking flows".into()));
    }
    if mc_samples == 0 {
        return Err(DfmError::Shape("need at least one Monte-Carlo sample".into()));
    }
    if !(0.0..0.5).contains(&eps) {
        return Err(DfmError::Domain(format!("eps must lie in [0, 0.5), got {eps}")));
    }
    let mask = flow.alphabet().mask().expect("masking flow has MASK");
    let dims = match &source {
        ElboSource::Table(d) => d.dims(),
        ElboSource::TestSet(s) => s.first().map(Vec::len).ok_or_else(|| DfmError::Shape("empty test set".into()))?,
    };
    let mut values = Vec::with_capacity(mc_samples);
    for _ in 0..mc_samples {
        let x1 = match &source {
            ElboSource::Table(d) => d.sample(rng).0,
            ElboSource::TestSet(s) => s[rng.random_range(0..s.len())].clone(),
        };
        if x1.len() != dims {
            return Err(DfmError::Shape("test sequences differ in length".into()));
        }
        x1.iter().try_for_each(|&k| flow.alphabet().check_data(k))?;
        let t = rng.random_range(eps..=1.0 - eps);
        let xt = flow.corrupt_unchecked(t, &x1, rng);
        let mut v = 0.0;
        if xt.contains(&mask) {
            let out = denoiser.predict(t, &xt)?;
            for (d, (&a, &b)) in xt.iter().zip(&x1).enumerate() {
                if a == mask {
                    v -= out.row(d)[b as usize].ln();
                }
            }
            v /= 1.0 - t;
        }
        values.push(v / (dims as f64 * std::f64::consts::LN_2));
    }
    let (mean, stderr) = mean_stderr(&values);
    Ok(ElboEstimate { bits_per_token: mean, stderr, n: mc_samples })
}

/// Entropy in bits of the pooled token frequencies; zero-frequency tokens are skipped.
pub fn sample_entropy(samples: &[Vec<Token>]) -> Result<f64> {
    let mut counts: BTreeMap<Token, usize> = BTreeMap::new();
    let mut total = 0usize;
    for s in samples {
        for &k in s {
            *counts.entry(k).or_default() += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(DfmError::Shape("no tokens".into()));
    }
    let n = total as f64;
    Ok(counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpStats {
    /// Mean total jumps per trajectory.
    pub mean: f64,
    /// Unbiased sample variance of the totals.
    pub variance: f64,
    pub stderr: f64,
    pub n: usize,
    pub per_dim_mean: Vec<f64>,
    /// `per_dim_histogram[d][k]`: trajectories with exactly `k` jumps in dimension `d`.
    pub per_dim_histogram: Vec<Vec<usize>>,
}

pub fn jump_stats(trajectories: &[Trajectory]) -> Result<JumpStats> {
    jump_stats_from_counts(&trajectories.iter().map(|t| t.jump_count_per_dim.clone()).collect::<Vec<_>>())
}

/// Same as [`jump_stats`] from per-dimension jump counts.
pub fn jump_stats_from_counts(counts: &[Vec<usize>]) -> Result<JumpStats> {
    if counts.is_empty() {
        return Err(DfmError::Shape("no trajectories".into()));
    }
    let dims = counts[0].len();
    if counts.iter().any(|c| c.len() != dims) {
        return Err(DfmError::Shape("trajectories differ in dimension".into()));
    }
    let totals: Vec<f64> = counts.iter().map(|c| c.iter().sum::<usize>() as f64).collect();
    let (mean, stderr) = mean_stderr(&totals);
    let n = totals.len() as f64;
    let variance = if totals.len() > 1 { totals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let mut per_dim_mean = vec![0.0; dims];
    let mut per_dim_histogram = vec![Vec::new(); dims];
    for c in counts {
        for (d, &k) in c.iter().enumerate() {
            per_dim_mean[d] += k as f64 / n;
            let h: &mut Vec<usize> = &mut per_dim_histogram[d];
            if h.len() <= k {
                h.resize(k + 1, 0);
            }
            h[k] += 1;
        }
    }
    Ok(JumpStats { mean, variance, stderr, n: counts.len(), per_dim_mean, per_dim_histogram })
}

/// `E[d_H(x0, x1)]` for `x0` uniform and independent of `x1`.
pub fn expected_hamming_uniform_prior(size: usize, dims: usize) -> f64 {
    dims as f64 * (1.0 - 1.0 / size as f64)
}

/// Reverse kernel of the discrete-time absorbing-state model at step `t_index`
/// of `T` with `β_k = 1/(T − k + 1)`. Rows are indexed by the current state
/// (`S` is MASK), columns by the previous one.
pub fn absorbing_reverse_kernel(total: usize, t_index: usize, probs: &[f64]) -> Result<Vec<Vec<f64>>> {
    if t_index == 0 || t_index > total {
        return Err(DfmError::Domain(format!("step {t_index} outside 1..={total}")));
    }
    let s = probs.len();
    let beta = |k: usize| 1.0 / (total - k + 1) as f64;
    let keep = |t: usize| (1..=t).map(|k| 1.0 - beta(k)).product::<f64>();
    let (prev, now) = (keep(t_index - 1), keep(t_index));
    let mut kernel = vec![vec![0.0; s + 1]; s + 1];
    for (i, row) in kernel.iter_mut().enumerate().take(s) {
        row[i] = 1.0;
    }
    kernel[s][s] = (1.0 - prev) / (1.0 - now);
    for j in 0..s {
        kernel[s][j] = beta(t_index) * prev / (1.0 - now) * probs[j];
    }
    Ok(kernel)
}

/// Max-abs difference between the discrete-time absorbing reverse kernel and
/// the masking Euler kernel at `t = 1 − t_index/T`, `dt = 1/T`, `η = 0`.
pub fn d3pm_equivalence_check(total: usize, t_index: usize, probs: &[f64]) -> Result<f64> {
    let reference = absorbing_reverse_kernel(total, t_index, probs)?;
    let s = probs.len();
    let plan = RatePlan::minimal(ConditionalFlow::masking(s)?);
    let dt = 1.0 / total as f64;
    let t = 1.0 - t_index as f64 / total as f64;
    let mut worst: f64 = 0.0;
    for (from, ref_row) in reference.iter().enumerate() {
        let row = euler_step_distribution(&plan, t, dt, from as Token, probs)?;
        for (a, b) in row.iter().zip(ref_row) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// `max |∂t p_{t|1} − R_tᵀ p_{t|1}|` over the grid for the plan's conditional rates.
pub fn kolmogorov_residual(plan: &RatePlan, x1: Token, t_grid: &[f64]) -> Result<f64> {
    kolmogorov_residual_with(plan.flow(), x1, t_grid, |t, i| conditional_rate_row(plan, t, i, x1))
}

/// As [`kolmogorov_residual`] with rows supplied by `row_fn(t, from)`.
pub fn kolmogorov_residual_with<F>(flow: &ConditionalFlow, x1: Token, t_grid: &[f64], row_fn: F) -> Result<f64>
where
    F: Fn(f64, Token) -> Result<RateRow>,
{
    let mut worst: f64 = 0.0;
    for &t in t_grid {
        let p = flow.probs_row(t, x1)?;
        let dp = flow.dt_row(t, x1)?;
        let flux = transpose_apply(&p, |i| row_fn(t, i))?;
        for (a, b) in dp.iter().zip(&flux) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn transpose_apply<F>(p: &[f64], row_fn: F) -> Result<Vec<f64>>
where
    F: Fn(Token) -> Result<RateRow>,
{
    let mut out = vec![0.0; p.len()];
    for (i, &pi) in p.iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        let row = row_fn(i as Token)?;
        for (o, r) in out.iter_mut().zip(row.as_slice()) {
            *o += pi * r;
        }
    }
    Ok(out)
}

/// Integrates `∂t p = R_tᵀ p` with classical RK4 from `p_{t0|1}` and returns the
/// largest pointwise deviation from `p_{t|1}` at the integration nodes.
pub fn kolmogorov_rk4_deviation(plan: &RatePlan, x1: Token, t0: f64, t1: f64, h: f64) -> Result<f64> {
    if !(h > 0.0 && t0 < t1) {
        return Err(DfmError::Domain("need h > 0 and t0 < t1".into()));
    }
    let flow = plan.flow();
    let field = |t: f64, p: &[f64]| transpose_apply(p, |i| conditional_rate_row(plan, t, i, x1));
    let mut p = flow.probs_row(t0, x1)?;
    let steps = ((t1 - t0) / h).round() as usize;
    let mut worst: f64 = 0.0;
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let k1 = field(t, &p)?;
        let y2: Vec<f64> = p.iter().zip(&k1).map(|(a, b)| a + 0.5 * h * b).collect();
        let k2 = field(t + 0.5 * h, &y2)?;
        let y3: Vec<f64> = p.iter().zip(&k2).map(|(a, b)| a + 0.5 * h * b).collect();
        let k3 = field(t + 0.5 * h, &y3)?;
        let y4: Vec<f64> = p.iter().zip(&k3).map(|(a, b)| a + h * b).collect();
        let k4 = field(t + h, &y4)?;
        for i in 0..p.len() {
            p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let exact = flow.probs_row(t0 + (k + 1) as f64 * h, x1)?;
        for (a, b) in p.iter().zip(&exact) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Max-abs difference between the reversed uniform corruption rate
/// `β·p(j)/p(i)` with `β = 1/(S t)` and `R* + R^DB` with `b = c = β`.
pub fn uniform_diffusion_equivalence(size: usize, t: f64, x1: Token) -> Result<f64> {
    let flow = ConditionalFlow::uniform(size)?;
    let p = flow.probs_row(t, x1)?;
    let beta = 1.0 / (size as f64 * t);
    let mut worst: f64 = 0.0;
    for i in 0..size as Token {
        let ours = r_star_row(&flow, t, i, x1)?.add_scaled(&uniform_db_row_general(&flow, t, i, x1, beta, beta)?, 1.0);
        for j in 0..size as Token {
            if j == i {
                continue;
            }
            let diff = beta * p[j as usize] / p[i as usize];
            worst = worst.max((ours.rate(j) - diff).abs());
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    #[serde(default)]
    pub stderr: Option<f64>,
    pub n: usize,
}

/// Named metrics with the seed and config hash that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub seed: u64,
    pub config_hash: String,
    pub sample_count: usize,
    pub metrics: BTreeMap<String, Metric>,
}

impl EvalReport {
    pub fn new(seed: u64, config_hash: impl Into<String>, sample_count: usize) -> Self {
        Self { seed, config_hash: config_hash.into(), sample_count, metrics: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64, stderr: Option<f64>, n: usize) -> Result<()> {
        let name = name.into();
        if !value.is_finite() || stderr.is_some_and(|s| !s.is_finite()) {
            return Err(DfmError::Domain(format!("metric {name} is not finite")));
        }
        self.metrics.insert(name, Metric { value, stderr, n });
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per metric: `name,value,stderr,n`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["name", "value", "stderr", "n"]).map_err(csv_err)?;
        for (name, m) in &self.metrics {
            let stderr = m.stderr.map(|s| s.to_string()).unwrap_or_default();
            out.write_record([name.as_str(), &m.value.to_string(), &stderr, &m.n.to_string()]).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, json: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(json, self.to_json()?)?;
        self.write_csv(std::fs::File::create(csv_path)?)
    }
}

fn csv_err(e: csv::Error) -> DfmError {
    DfmError::Io(std::io::Error::other(e))
}

/// Default times for residual checks: 91 points on `[0.05, 0.95]`.
pub fn default_residual_grid() -> Vec<f64> {
    (0..=90).map(|k| 0.05 + 0.01 * k as f64).collect()
}

/// `eps` used when none is configured.
pub const ELBO_EPS: f64 = DEFAULT_EPS;
