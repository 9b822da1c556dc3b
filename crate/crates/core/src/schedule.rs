//! Per-dimension conditional probability flows `p_{t|1}(x_t | x_1)`.
//!
//! A flow interpolates from a noise prior at `t = 0` to a point mass on the
//! clean token at `t = 1`. Dimensions are corrupted independently, so every
//! quantity here is defined for a single dimension and multiplied across `D`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::data::TabularDistribution;
use crate::error::{DfmError, Result};
use crate::tokens::{state_index, Alphabet, Token, TokenSequence};

/// Default clamp for rate and simulation times: evaluations live in `[EPS, 1 - EPS]`.
pub const DEFAULT_EPS: f64 = 1e-3;

/// Step used by the central finite difference when a schedule has no analytic derivative.
pub const FD_STEP: f64 = 1e-6;

/// Largest state table `marginal_pt` will enumerate.
pub const MAX_ENUMERATED_STATES: u128 = 10_000_000;

/// `(t, x1) -> probability vector over the CTMC states of one dimension`.
pub type ScheduleFn = Arc<dyn Fn(f64, Token) -> Vec<f64> + Send + Sync>;

/// A user supplied schedule with an optional analytic time derivative.
#[derive(Clone)]
pub struct GeneralSchedule {
    probs: ScheduleFn,
    derivative: Option<ScheduleFn>,
}

impl GeneralSchedule {
    pub fn new(probs: ScheduleFn, derivative: Option<ScheduleFn>) -> Self {
        Self { probs, derivative }
    }

    pub fn has_analytic_derivative(&self) -> bool {
        self.derivative.is_some()
    }
}

impl fmt::Debug for GeneralSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralSchedule")
            .field("analytic_derivative", &self.derivative.is_some())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum FlowKind {
    /// `t·δ{x1,xt} + (1−t)·δ{M,xt}`
    Masking,
    /// `t·δ{x1,xt} + (1−t)/S`
    Uniform,
    General(GeneralSchedule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowTag {
    Masking,
    Uniform,
    General,
}

#[derive(Debug, Clone)]
pub struct ConditionalFlow {
    alphabet: Alphabet,
    kind: FlowKind,
}

fn check_time(t: f64) -> Result<()> {
    if t.is_finite() && (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(DfmError::Domain(format!("time {t} outside [0, 1]")))
    }
}

impl ConditionalFlow {
    pub fn masking(size: usize) -> Result<Self> {
        Ok(Self { alphabet: Alphabet::new(size, true)?, kind: FlowKind::Masking })
    }

    pub fn uniform(size: usize) -> Result<Self> {
        Ok(Self { alphabet: Alphabet::new(size, false)?, kind: FlowKind::Uniform })
    }

    /// Builds a flow of the given closed-form kind over an explicit alphabet.
    pub fn with_alphabet(alphabet: Alphabet, tag: FlowTag) -> Result<Self> {
        match tag {
            FlowTag::Masking if !alphabet.mask_enabled() => Err(DfmError::InvalidAlphabet(
                "masking flow requires a MASK-enabled alphabet".into(),
            )),
            FlowTag::Masking => Ok(Self { alphabet, kind: FlowKind::Masking }),
            FlowTag::Uniform => Ok(Self { alphabet, kind: FlowKind::Uniform }),
            FlowTag::General => Err(DfmError::InvalidSchedule(
                "general flows are built with ConditionalFlow::general".into(),
            )),
        }
    }

    /// Validates and wraps a general schedule.
    ///
    /// Checked on a grid of times: non-negativity and normalization (1e-12),
    /// no MASK mass without a MASK symbol, an `x1`-independent `t = 0`
    /// marginal (1e-9), convergence on `x1` near `t = 1`, and the dead-state
    /// condition `p = 0 ⇒ ∂t p = 0`.
    pub fn general(alphabet: Alphabet, schedule: GeneralSchedule) -> Result<Self> {
        let flow = Self { alphabet, kind: FlowKind::General(schedule) };
        flow.validate_general()?;
        Ok(flow)
    }

    fn validate_general(&self) -> Result<()> {
        let n = self.alphabet.num_states();
        let s = self.alphabet.size();
        let FlowKind::General(sched) = &self.kind else { return Ok(()) };
        let grid: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
        for x1 in 0..s as Token {
            for &t in &grid {
                let p = (sched.probs)(t, x1);
                if !self.alphabet.mask_enabled() && p.len() == s + 1 && p[s] != 0.0 {
                    return Err(DfmError::InvalidSchedule(format!(
                        "schedule puts mass {} on MASK at t={t} but the alphabet has no MASK",
                        p[s]
                    )));
                }
                if p.len() != n {
                    return Err(DfmError::InvalidSchedule(format!(
                        "schedule returned {} entries, expected {n}",
                        p.len()
                    )));
                }
                if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                    return Err(DfmError::InvalidSchedule(format!("negative or non-finite mass at t={t}")));
                }
                let total: f64 = p.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(DfmError::InvalidSchedule(format!("mass {total} != 1 at t={t}, x1={x1}")));
                }
                if t > 0.0 && t < 1.0 {
                    let dp = self.dt_row_unchecked(t, x1);
                    for (j, (&pj, &dj)) in p.iter().zip(&dp).enumerate() {
                        if pj == 0.0 && dj.abs() > 1e-9 {
                            return Err(DfmError::InvalidSchedule(format!(
                                "dead state {j} has nonzero derivative {dj} at t={t}"
                            )));
                        }
                    }
                }
            }
            let near_one = (sched.probs)(1.0 - DEFAULT_EPS, x1);
            if near_one[x1 as usize] < 1.0 - DEFAULT_EPS * s as f64 {
                return Err(DfmError::InvalidSchedule(format!(
                    "schedule does not converge on x1={x1} near t=1"
                )));
            }
        }
        let reference = (sched.probs)(0.0, 0);
        for x1 in 1..s as Token {
            let other = (sched.probs)(0.0, x1);
            if reference.iter().zip(&other).any(|(a, b)| (a - b).abs() > 1e-9) {
                return Err(DfmError::InvalidSchedule(
                    "t=0 marginal depends on x1; no shared noise prior".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn kind(&self) -> &FlowKind {
        &self.kind
    }

    pub fn tag(&self) -> FlowTag {
        match self.kind {
            FlowKind::Masking => FlowTag::Masking,
            FlowKind::Uniform => FlowTag::Uniform,
            FlowKind::General(_) => FlowTag::General,
        }
    }

    pub fn is_masking(&self) -> bool {
        matches!(self.kind, FlowKind::Masking)
    }

    fn check_pair(&self, x1: Token, xt: Token) -> Result<()> {
        self.alphabet.check_data(x1)?;
        self.alphabet.check(xt)
    }

    /// `p_{t|1}(xt | x1)`.
    pub fn cond_prob(&self, t: f64, x1: Token, xt: Token) -> Result<f64> {
        check_time(t)?;
        self.check_pair(x1, xt)?;
        Ok(self.prob_unchecked(t, x1, xt))
    }

    /// `∂t p_{t|1}(xt | x1)`.
    pub fn cond_prob_dt(&self, t: f64, x1: Token, xt: Token) -> Result<f64> {
        check_time(t)?;
        self.check_pair(x1, xt)?;
        Ok(self.dt_row_unchecked(t, x1)[xt as usize])
    }

    /// Full probability vector over the CTMC states of one dimension.
    pub fn probs_row(&self, t: f64, x1: Token) -> Result<Vec<f64>> {
        check_time(t)?;
        self.alphabet.check_data(x1)?;
        Ok(self.probs_row_unchecked(t, x1))
    }

    /// Full time-derivative vector over the CTMC states of one dimension.
    pub fn dt_row(&self, t: f64, x1: Token) -> Result<Vec<f64>> {
        check_time(t)?;
        self.alphabet.check_data(x1)?;
        Ok(self.dt_row_unchecked(t, x1))
    }

    #[inline]
    pub(crate) fn prob_unchecked(&self, t: f64, x1: Token, xt: Token) -> f64 {
        match &self.kind {
            FlowKind::Masking => {
                if xt == x1 {
                    t
                } else if self.alphabet.is_mask(xt) {
                    1.0 - t
                } else {
                    0.0
                }
            }
            FlowKind::Uniform => {
                if self.alphabet.is_mask(xt) {
                    0.0
                } else {
                    let base = (1.0 - t) / self.alphabet.size() as f64;
                    if xt == x1 {
                        t + base
                    } else {
                        base
                    }
                }
            }
            FlowKind::General(s) => (s.probs)(t, x1)[xt as usize],
        }
    }

    pub(crate) fn probs_row_unchecked(&self, t: f64, x1: Token) -> Vec<f64> {
        match &self.kind {
            FlowKind::General(s) => (s.probs)(t, x1),
            _ => (0..self.alphabet.num_states() as Token)
                .map(|j| self.prob_unchecked(t, x1, j))
                .collect(),
        }
    }

    pub(crate) fn dt_row_unchecked(&self, t: f64, x1: Token) -> Vec<f64> {
        let n = self.alphabet.num_states();
        match &self.kind {
            FlowKind::Masking => (0..n as Token)
                .map(|j| {
                    if j == x1 {
                        1.0
                    } else if self.alphabet.is_mask(j) {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
            FlowKind::Uniform => {
                let inv = 1.0 / self.alphabet.size() as f64;
                (0..n as Token)
                    .map(|j| {
                        if self.alphabet.is_mask(j) {
                            0.0
                        } else if j == x1 {
                            1.0 - inv
                        } else {
                            -inv
                        }
                    })
                    .collect()
            }
            FlowKind::General(s) => match &s.derivative {
                Some(d) => d(t, x1),
                None => {
                    let lo = (t - FD_STEP).max(0.0);
                    let hi = (t + FD_STEP).min(1.0);
                    let a = (s.probs)(lo, x1);
                    let b = (s.probs)(hi, x1);
                    a.iter().zip(&b).map(|(pa, pb)| (pb - pa) / (hi - lo)).collect()
                }
            },
        }
    }

    /// Distribution of the noise prior over one dimension.
    pub fn prior_row(&self) -> Vec<f64> {
        match &self.kind {
            FlowKind::General(s) => (s.probs)(0.0, 0),
            _ => self.probs_row_unchecked(0.0, 0),
        }
    }

    /// Draws `xt ~ p_{t|1}(· | x1)` independently per dimension.
    pub fn sample_corrupted<R: Rng + ?Sized>(&self, t: f64, x1: &[Token], rng: &mut R) -> Result<TokenSequence> {
        check_time(t)?;
        x1.iter().try_for_each(|&x| self.alphabet.check_data(x))?;
        Ok(TokenSequence(self.corrupt_unchecked(t, x1, rng)))
    }

    pub(crate) fn corrupt_unchecked<R: Rng + ?Sized>(&self, t: f64, x1: &[Token], rng: &mut R) -> Vec<Token> {
        let s = self.alphabet.size();
        match &self.kind {
            FlowKind::Masking => {
                let m = self.alphabet.mask().expect("masking flow has MASK");
                x1.iter().map(|&x| if rng.random::<f64>() < t { x } else { m }).collect()
            }
            FlowKind::Uniform => x1
                .iter()
                .map(|&x| {
                    if rng.random::<f64>() < t {
                        x
                    } else {
                        rng.random_range(0..s as Token)
                    }
                })
                .collect(),
            FlowKind::General(sched) => x1
                .iter()
                .map(|&x| sample_categorical(&(sched.probs)(t, x), rng) as Token)
                .collect(),
        }
    }

    /// Draws a sequence of length `d` from the noise prior.
    pub fn sample_prior<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> Result<TokenSequence> {
        if d == 0 {
            return Err(DfmError::Shape("D must be >= 1".into()));
        }
        let s = self.alphabet.size();
        let toks = match &self.kind {
            FlowKind::Masking => vec![self.alphabet.mask().expect("masking flow has MASK"); d],
            FlowKind::Uniform => (0..d).map(|_| rng.random_range(0..s as Token)).collect(),
            FlowKind::General(_) => {
                let prior = self.prior_row();
                (0..d).map(|_| sample_categorical(&prior, rng) as Token).collect()
            }
        };
        Ok(TokenSequence(toks))
    }

    /// Product likelihood `Π_d p_{t|1}(xt^d | x1^d)`.
    pub fn seq_likelihood(&self, t: f64, x1: &[Token], xt: &[Token]) -> f64 {
        x1.iter().zip(xt).map(|(&a, &b)| self.prob_unchecked(t, a, b)).product()
    }
}

/// Inverse-CDF draw from unnormalized non-negative weights.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return i;
            }
            u -= w;
            last = i;
        }
    }
    last
}

/// The unconditional marginal `p_t` enumerated over every state in `n^D`.
#[derive(Debug, Clone)]
pub struct MarginalTable {
    pub base: usize,
    pub dims: usize,
    pub probs: Vec<f64>,
}

impl MarginalTable {
    pub fn get(&self, tokens: &[Token]) -> f64 {
        state_index(tokens, self.base).map_or(0.0, |i| self.probs.get(i as usize).copied().unwrap_or(0.0))
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// `p_t(xt) = Σ_{x1} p_data(x1) Π_d p_{t|1}(xt^d | x1^d)` over all `(S(+1))^D` states.
pub fn marginal_pt(dist: &TabularDistribution, flow: &ConditionalFlow, t: f64) -> Result<MarginalTable> {
    check_time(t)?;
    let base = flow.alphabet().num_states();
    let dims = dist.dims();
    let states = (base as u128).checked_pow(dims as u32).unwrap_or(u128::MAX);
    if states > MAX_ENUMERATED_STATES {
        return Err(DfmError::Capacity { states, limit: MAX_ENUMERATED_STATES });
    }
    let mut probs = vec![0.0; states as usize];
    let mut partial = vec![0.0; states as usize];
    for (x1, w) in dist.entries() {
        // Build the product table dimension by dimension.
        partial.truncate(1);
        partial[0] = *w;
        let mut len = 1usize;
        for d in 0..dims {
            let row = flow.probs_row_unchecked(t, x1[d]);
            let mut next = vec![0.0; len * base];
            for (j, &pj) in row.iter().enumerate() {
                if pj == 0.0 {
                    continue;
                }
                for (i, &v) in partial[..len].iter().enumerate() {
                    next[i + j * len] = v * pj;
                }
            }
            len *= base;
            partial = next;
        }
        for (acc, v) in probs.iter_mut().zip(&partial) {
            *acc += v;
        }
    }
    Ok(MarginalTable { base, dims, probs })
}
