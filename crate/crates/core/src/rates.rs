//! Conditional rate matrices that generate `p_{t|1}`.
//!
//! Rows are dense over the `S(+1)` states of one dimension. Off-diagonal
//! entries are jump rates per unit time; the diagonal is minus their sum.

use crate::error::{DfmError, Result};
use crate::schedule::{ConditionalFlow, FlowKind, DEFAULT_EPS};
use crate::tokens::Token;

/// Masses at or below this count as zero when forming `Z_t` and supports.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbKind {
    None,
    Canonical,
}

/// `R^η = R* + η·R^DB` for a given flow.
#[derive(Debug, Clone)]
pub struct RatePlan {
    flow: ConditionalFlow,
    eta: f64,
    db: DbKind,
    eps: f64,
}

impl RatePlan {
    pub fn new(flow: ConditionalFlow, eta: f64, db: DbKind) -> Result<Self> {
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(DfmError::Domain(format!("eta must be >= 0, got {eta}")));
        }
        if eta > 0.0 && db == DbKind::None {
            return Err(DfmError::NotAvailable("eta > 0 needs a detailed-balance rate".into()));
        }
        Ok(Self { flow, eta, db, eps: DEFAULT_EPS })
    }

    /// `R*` only.
    pub fn minimal(flow: ConditionalFlow) -> Self {
        Self { flow, eta: 0.0, db: DbKind::None, eps: DEFAULT_EPS }
    }

    /// `R* + η·R^DB` with the canonical detailed-balance solution.
    pub fn with_eta(flow: ConditionalFlow, eta: f64) -> Result<Self> {
        Self::new(flow, eta, DbKind::Canonical)
    }

    pub fn with_time_eps(mut self, eps: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&eps) {
            return Err(DfmError::Domain(format!("time eps must lie in [0, 0.5), got {eps}")));
        }
        self.eps = eps;
        Ok(self)
    }

    pub fn flow(&self) -> &ConditionalFlow {
        &self.flow
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn db_kind(&self) -> DbKind {
        self.db
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Same plan with a different stochasticity level.
    pub fn at_eta(&self, eta: f64) -> Result<Self> {
        let db = if eta > 0.0 { DbKind::Canonical } else { self.db };
        let plan = Self::new(self.flow.clone(), eta, db)?;
        Ok(Self { eps: self.eps, ..plan })
    }
}

/// One row `R_t(from, ·)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    from: Token,
    rates: Vec<f64>,
}

impl RateRow {
    /// Builds a row from off-diagonal rates; the entry at `from` is overwritten
    /// with minus the off-diagonal sum.
    pub fn from_off_diagonal(from: Token, mut rates: Vec<f64>) -> Self {
        rates[from as usize] = 0.0;
        let total: f64 = rates.iter().sum();
        rates[from as usize] = -total;
        Self { from, rates }
    }

    pub fn zero(from: Token, len: usize) -> Self {
        Self { from, rates: vec![0.0; len] }
    }

    pub fn from_token(&self) -> Token {
        self.from
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    /// Rate to `j`; for `j == from` this is the (non-positive) diagonal.
    pub fn rate(&self, j: Token) -> f64 {
        self.rates[j as usize]
    }

    pub fn diagonal(&self) -> f64 {
        self.rates[self.from as usize]
    }

    /// Total rate of leaving `from`.
    pub fn exit_rate(&self) -> f64 {
        -self.diagonal()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rates
    }

    pub fn off_diagonal(&self) -> impl Iterator<Item = (Token, f64)> + '_ {
        self.rates.iter().enumerate().filter(move |(j, _)| *j as Token != self.from).map(|(j, &r)| (j as Token, r))
    }

    /// `self + scale·other` on the off-diagonals, diagonal recomputed.
    pub fn add_scaled(&self, other: &RateRow, scale: f64) -> RateRow {
        let rates = self.rates.iter().zip(&other.rates).map(|(a, b)| a + scale * b).collect();
        RateRow::from_off_diagonal(self.from, rates)
    }

    pub fn min_off_diagonal(&self) -> f64 {
        self.off_diagonal().map(|(_, r)| r).fold(f64::INFINITY, f64::min)
    }
}

/// Clamps `t` into `[eps, 1 − eps]`, rejecting values outside `[0, 1]`.
pub fn clamp_time(t: f64, eps: f64) -> Result<f64> {
    if !(t.is_finite() && (0.0..=1.0).contains(&t)) {
        return Err(DfmError::Domain(format!("time {t} outside [0, 1]")));
    }
    let c = t.clamp(eps, 1.0 - eps);
    if c <= 0.0 || c >= 1.0 {
        return Err(DfmError::Domain(format!("time {c} is not inside (0, 1) after clamping")));
    }
    Ok(c)
}

fn check_tokens(flow: &ConditionalFlow, xt: Token, x1: Token) -> Result<()> {
    flow.alphabet().check(xt)?;
    flow.alphabet().check_data(x1)
}

/// `R*_t(xt, · | x1)`, using closed forms for masking and uniform flows.
pub fn r_star_row(flow: &ConditionalFlow, t: f64, xt: Token, x1: Token) -> Result<RateRow> {
    let t = clamp_time(t, DEFAULT_EPS)?;
    check_tokens(flow, xt, x1)?;
    Ok(r_star_unchecked(flow, t, xt, x1))
}

pub(crate) fn r_star_unchecked(flow: &ConditionalFlow, t: f64, xt: Token, x1: Token) -> RateRow {
    let n = flow.alphabet().num_states();
    match flow.kind() {
        FlowKind::Masking => {
            let mut rates = vec![0.0; n];
            if flow.alphabet().is_mask(xt) {
                rates[x1 as usize] = 1.0 / (1.0 - t);
            }
            RateRow::from_off_diagonal(xt, rates)
        }
        FlowKind::Uniform => {
            let mut rates = vec![0.0; n];
            if xt != x1 && !flow.alphabet().is_mask(xt) {
                rates[x1 as usize] = 1.0 / (1.0 - t);
            }
            RateRow::from_off_diagonal(xt, rates)
        }
        FlowKind::General(_) => r_star_generic_unchecked(flow, t, xt, x1),
    }
}

/// The general `R*` formula
/// `ReLU(∂t p(j) − ∂t p(xt)) / (Z_t · p(xt))`, zero where either mass is zero,
/// evaluated for any flow kind.
pub fn r_star_row_generic(flow: &ConditionalFlow, t: f64, xt: Token, x1: Token) -> Result<RateRow> {
    let t = clamp_time(t, DEFAULT_EPS)?;
    check_tokens(flow, xt, x1)?;
    Ok(r_star_generic_unchecked(flow, t, xt, x1))
}

fn r_star_generic_unchecked(flow: &ConditionalFlow, t: f64, xt: Token, x1: Token) -> RateRow {
    let p = flow.probs_row_unchecked(t, x1);
    let dp = flow.dt_row_unchecked(t, x1);
    let n = p.len();
    let mut rates = vec![0.0; n];
    let p_xt = p[xt as usize];
    if p_xt > SUPPORT_THRESHOLD {
        let z = p.iter().filter(|&&v| v > SUPPORT_THRESHOLD).count() as f64;
        for j in 0..n {
            if j != xt as usize && p[j] > SUPPORT_THRESHOLD {
                rates[j] = (dp[j] - dp[xt as usize]).max(0.0) / (z * p_xt);
            }
        }
    }
    RateRow::from_off_diagonal(xt, rates)
}

/// Unit-η detailed-balance row `R^DB_t(xt, · | x1)`.
pub fn r_db_row(flow: &ConditionalFlow, t: f64, xt: Token, x1: Token, db: DbKind) -> Result<RateRow> {
    if db == DbKind::None {
        return Err(DfmError::NotAvailable("no detailed-balance rate selected".into()));
    }
    let t = clamp_time(t, DEFAULT_EPS)?;
    check_tokens(flow, xt, x1)?;
    Ok(r_db_unchecked(flow, t, xt, x1))
}

pub(crate) fn r_db_unchecked(flow: &ConditionalFlow, t: f64, xt: Token, x1: Token) -> RateRow {
    let alphabet = flow.alphabet();
    let n = alphabet.num_states();
    let mut rates = vec![0.0; n];
    match flow.kind() {
        FlowKind::Masking => {
            let m = alphabet.mask().expect("masking flow has MASK");
            if xt == x1 {
                rates[m as usize] = 1.0;
            } else if xt == m {
                rates[x1 as usize] = t / (1.0 - t);
            }
        }
        FlowKind::Uniform => {
            if !alphabet.is_mask(xt) {
                let s = alphabet.size();
                if xt == x1 {
                    rates[..s].iter_mut().for_each(|r| *r = 1.0);
                } else {
                    rates[x1 as usize] = (s as f64 * t + 1.0 - t) / (1.0 - t);
                }
            }
        }
        FlowKind::General(_) => {
            // Upper triangle 1, lower triangle p(j)/p(i), zero off the support.
            let p = flow.probs_row_unchecked(t, x1);
            let i = xt as usize;
            if p[i] > SUPPORT_THRESHOLD {
                for j in 0..n {
                    if j == i || p[j] <= SUPPORT_THRESHOLD {
                        continue;
                    }
                    rates[j] = if i < j { 1.0 } else { p[j] / p[i] };
                }
            }
        }
    }
    RateRow::from_off_diagonal(xt, rates)
}

/// Uniform-flow detailed-balance row with the three-parameter form
/// `a·δ{i,x1} + b·δ{j,x1} + c·(1−δ{i,x1})(1−δ{j,x1})`, `a` fixed by balance.
pub fn uniform_db_row_general(
    flow: &ConditionalFlow,
    t: f64,
    xt: Token,
    x1: Token,
    b: f64,
    c: f64,
) -> Result<RateRow> {
    if !matches!(flow.kind(), FlowKind::Uniform) {
        return Err(DfmError::NotAvailable("three-parameter balance row is defined for uniform flows".into()));
    }
    let t = clamp_time(t, DEFAULT_EPS)?;
    check_tokens(flow, xt, x1)?;
    let s = flow.alphabet().size();
    let noise = (1.0 - t) / s as f64;
    let a = noise * b / (t + noise);
    let mut rates = vec![0.0; flow.alphabet().num_states()];
    if !flow.alphabet().is_mask(xt) {
        for (j, r) in rates[..s].iter_mut().enumerate() {
            let j = j as Token;
            *r = if xt == x1 {
                a
            } else if j == x1 {
                b
            } else {
                c
            };
        }
    }
    Ok(RateRow::from_off_diagonal(xt, rates))
}

/// `R*_t + η·R^DB_t` for the plan.
pub fn conditional_rate_row(plan: &RatePlan, t: f64, xt: Token, x1: Token) -> Result<RateRow> {
    let t = clamp_time(t, plan.eps)?;
    check_tokens(&plan.flow, xt, x1)?;
    Ok(conditional_unchecked(plan, t, xt, x1))
}

pub(crate) fn conditional_unchecked(plan: &RatePlan, t: f64, xt: Token, x1: Token) -> RateRow {
    let star = r_star_unchecked(&plan.flow, t, xt, x1);
    if plan.eta == 0.0 {
        star
    } else {
        star.add_scaled(&r_db_unchecked(&plan.flow, t, xt, x1), plan.eta)
    }
}

/// `E_{x1 ~ probs}[R^η_t(xt, · | x1)]` for a single dimension.
///
/// `probs` is the denoiser row over data tokens (length `S`). For masking
/// flows an unmasked `xt` is taken as already clean, so its row is the
/// remask rate `η` towards MASK.
pub fn expected_rate_row(plan: &RatePlan, t: f64, xt: Token, probs: &[f64]) -> Result<RateRow> {
    let t = clamp_time(t, plan.eps)?;
    plan.flow.alphabet().check(xt)?;
    check_denoiser_row(probs, plan.flow.alphabet().size())?;
    Ok(expected_unchecked(plan, t, xt, probs))
}

pub(crate) fn check_denoiser_row(probs: &[f64], size: usize) -> Result<()> {
    if probs.len() != size {
        return Err(DfmError::InvalidDenoiser(format!(
            "row has {} entries, expected S={size} (no MASK column)",
            probs.len()
        )));
    }
    if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(DfmError::InvalidDenoiser("negative or non-finite probability".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DfmError::InvalidDenoiser(format!("row sums to {total}")));
    }
    Ok(())
}

pub(crate) fn expected_unchecked(plan: &RatePlan, t: f64, xt: Token, probs: &[f64]) -> RateRow {
    let alphabet = plan.flow.alphabet();
    let n = alphabet.num_states();
    let eta = plan.eta;
    let mut rates = vec![0.0; n];
    match plan.flow.kind() {
        FlowKind::Masking => {
            if alphabet.is_mask(xt) {
                let scale = (1.0 + eta * t) / (1.0 - t);
                for (r, &p) in rates.iter_mut().zip(probs) {
                    *r = scale * p;
                }
            } else {
                rates[alphabet.size()] = eta;
            }
        }
        FlowKind::Uniform => {
            if !alphabet.is_mask(xt) {
                let s = alphabet.size() as f64;
                let scale = (1.0 + eta + eta * (s - 1.0) * t) / (1.0 - t);
                let stay = eta * probs[xt as usize];
                for (r, &p) in rates.iter_mut().zip(probs) {
                    *r = scale * p + stay;
                }
            }
        }
        FlowKind::General(_) => {
            for (k, &p) in probs.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let row = conditional_unchecked(plan, t, xt, k as Token);
                for (r, &v) in rates.iter_mut().zip(row.as_slice()) {
                    *r += p * v;
                }
            }
        }
    }
    RateRow::from_off_diagonal(xt, rates)
}

/// Expectation of the conditional row taken literally, term by term, for any flow.
pub fn expected_rate_row_by_enumeration(plan: &RatePlan, t: f64, xt: Token, probs: &[f64]) -> Result<RateRow> {
    let t = clamp_time(t, plan.eps)?;
    check_denoiser_row(probs, plan.flow.alphabet().size())?;
    let mut rates = vec![0.0; plan.flow.alphabet().num_states()];
    for (k, &p) in probs.iter().enumerate() {
        let row = conditional_unchecked(plan, t, xt, k as Token);
        for (r, &v) in rates.iter_mut().zip(row.as_slice()) {
            *r += p * v;
        }
    }
    Ok(RateRow::from_off_diagonal(xt, rates))
}

/// `max_{i,j} |p(i)·R(i,j) − p(j)·R(j,i)|` under `p_{t|1}(· | x1)`.
pub fn db_residual<F>(flow: &ConditionalFlow, t: f64, x1: Token, row_fn: F) -> Result<f64>
where
    F: Fn(Token) -> Result<RateRow>,
{
    if !(t > 0.0 && t < 1.0) {
        return Err(DfmError::Domain(format!("time {t} outside (0, 1)")));
    }
    let p = flow.probs_row(t, x1)?;
    let rows: Vec<RateRow> = (0..p.len() as Token).map(&row_fn).collect::<Result<_>>()?;
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        for j in (i + 1)..p.len() {
            let flux = p[i] * rows[i].rate(j as Token) - p[j] * rows[j].rate(i as Token);
            worst = worst.max(flux.abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{GeneralSchedule, ScheduleFn};
    use crate::tokens::Alphabet;
    use std::sync::Arc;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn masking_r_star_unmasks_at_one_over_one_minus_t() {
        let f = ConditionalFlow::masking(3).unwrap();
        let row = r_star_row(&f, 0.75, 3, 1).unwrap();
        assert!(close(row.rate(1), 4.0));
        assert_eq!(row.rate(0), 0.0);
        assert_eq!(row.rate(2), 0.0);
        assert!(close(row.diagonal(), -4.0));
        let settled = r_star_row(&f, 0.75, 1, 1).unwrap();
        assert!(settled.as_slice().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn uniform_r_star_matches_generic_formula() {
        let f = ConditionalFlow::uniform(3).unwrap();
        let row = r_star_row(&f, 0.5, 0, 2).unwrap();
        assert!(close(row.rate(2), 2.0));
        assert_eq!(row.rate(1), 0.0);
        for xt in 0..3 {
            for x1 in 0..3 {
                let a = r_star_row(&f, 0.37, xt, x1).unwrap();
                let b = r_star_row_generic(&f, 0.37, xt, x1).unwrap();
                for j in 0..3 {
                    assert!(close(a.rate(j), b.rate(j)));
                }
            }
        }
    }

    #[test]
    fn masking_r_star_matches_generic_formula() {
        let f = ConditionalFlow::masking(4).unwrap();
        for xt in 0..5 {
            for x1 in 0..4 {
                let a = r_star_row(&f, 0.61, xt, x1).unwrap();
                let b = r_star_row_generic(&f, 0.61, xt, x1).unwrap();
                assert_eq!(a.as_slice().len(), b.as_slice().len());
                for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
                    assert!(close(*u, *v), "{u} vs {v}");
                }
            }
        }
    }

    #[test]
    fn masking_db_row_values() {
        let f = ConditionalFlow::masking(3).unwrap();
        let down = r_db_row(&f, 0.5, 2, 2, DbKind::Canonical).unwrap();
        assert!(close(down.rate(3), 1.0));
        let up = r_db_row(&f, 0.5, 3, 2, DbKind::Canonical).unwrap();
        assert!(close(up.rate(2), 1.0));
        assert!(matches!(r_db_row(&f, 0.5, 3, 2, DbKind::None), Err(DfmError::NotAvailable(_))));
    }

    #[test]
    fn uniform_db_row_values() {
        let f = ConditionalFlow::uniform(3).unwrap();
        let towards = r_db_row(&f, 0.5, 0, 1, DbKind::Canonical).unwrap();
        assert!(close(towards.rate(1), 4.0));
        assert_eq!(towards.rate(2), 0.0);
        let away = r_db_row(&f, 0.5, 1, 1, DbKind::Canonical).unwrap();
        assert!(close(away.rate(0), 1.0));
        assert!(close(away.rate(2), 1.0));
    }

    #[test]
    fn combined_masking_rows() {
        let f = ConditionalFlow::masking(3).unwrap();
        let plan = RatePlan::with_eta(f.clone(), 2.0).unwrap();
        assert!(close(conditional_rate_row(&plan, 0.5, 3, 1).unwrap().rate(1), 4.0));
        assert!(close(conditional_rate_row(&plan, 0.5, 1, 1).unwrap().rate(3), 2.0));
        let zero = RatePlan::minimal(f.clone());
        assert_eq!(
            conditional_rate_row(&zero, 0.3, 3, 0).unwrap(),
            r_star_row(&f, 0.3, 3, 0).unwrap()
        );
    }

    #[test]
    fn eta_requires_db() {
        let f = ConditionalFlow::masking(3).unwrap();
        assert!(RatePlan::new(f.clone(), 1.0, DbKind::None).is_err());
        assert!(RatePlan::new(f, -1.0, DbKind::Canonical).is_err());
    }

    #[test]
    fn time_domain_errors() {
        let f = ConditionalFlow::masking(3).unwrap();
        assert!(matches!(r_star_row(&f, 1.2, 3, 0), Err(DfmError::Domain(_))));
        // Endpoints are clamped rather than rejected.
        assert!(r_star_row(&f, 1.0, 3, 0).is_ok());
    }

    #[test]
    fn expected_row_uniform_two_state_example() {
        let plan = RatePlan::minimal(ConditionalFlow::uniform(2).unwrap());
        let row = expected_rate_row(&plan, 0.5, 1, &[0.9, 0.1]).unwrap();
        assert!(close(row.rate(0), 1.8));
    }

    #[test]
    fn expected_row_masking_unmasked_is_zero_at_eta_zero() {
        let plan = RatePlan::minimal(ConditionalFlow::masking(3).unwrap());
        let row = expected_rate_row(&plan, 0.5, 1, &[0.2, 0.5, 0.3]).unwrap();
        assert!(row.as_slice().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn expected_row_rejects_mask_column() {
        let plan = RatePlan::minimal(ConditionalFlow::masking(3).unwrap());
        assert!(matches!(
            expected_rate_row(&plan, 0.5, 3, &[0.2, 0.5, 0.2, 0.1]),
            Err(DfmError::InvalidDenoiser(_))
        ));
    }

    #[test]
    fn closed_forms_equal_enumerated_expectation() {
        let probs = [0.1, 0.25, 0.4, 0.25];
        for flow in [ConditionalFlow::masking(4).unwrap(), ConditionalFlow::uniform(4).unwrap()] {
            for &eta in &[0.0, 1.5, 7.0] {
                let plan = RatePlan::with_eta(flow.clone(), eta).unwrap();
                for xt in 0..flow.alphabet().num_states() as Token {
                    // Masking closed form treats unmasked tokens as clean.
                    let p: Vec<f64> = if flow.is_masking() && !flow.alphabet().is_mask(xt) {
                        (0..4).map(|k| f64::from(k == xt)).collect()
                    } else {
                        probs.to_vec()
                    };
                    let a = expected_rate_row(&plan, 0.42, xt, &p).unwrap();
                    let b = expected_rate_row_by_enumeration(&plan, 0.42, xt, &p).unwrap();
                    for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
                        assert!((u - v).abs() < 1e-12, "eta={eta} xt={xt}: {u} vs {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn db_residual_cases() {
        let f = ConditionalFlow::masking(3).unwrap();
        let r = db_residual(&f, 0.4, 1, |i| r_db_row(&f, 0.4, i, 1, DbKind::Canonical)).unwrap();
        assert!(r < 1e-10);
        // R* carries all mass one way: p(M)·R*(M,x1) = (1−t)/(1−t) = 1.
        let star = db_residual(&f, 0.4, 1, |i| r_star_row(&f, 0.4, i, 1)).unwrap();
        assert!((star - 1.0).abs() < 1e-12);
        let zero = db_residual(&f, 0.4, 1, |i| Ok(RateRow::zero(i, 4))).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn general_canonical_db_is_balanced() {
        let probs: ScheduleFn = Arc::new(|t, x1| {
            let k = t * t;
            (0..4).map(|j| k * f64::from(j == x1) + (1.0 - k) * [0.1, 0.2, 0.3, 0.4][j as usize]).collect()
        });
        let f = ConditionalFlow::general(Alphabet::new(4, false).unwrap(), GeneralSchedule::new(probs, None)).unwrap();
        let r = db_residual(&f, 0.3, 2, |i| r_db_row(&f, 0.3, i, 2, DbKind::Canonical)).unwrap();
        assert!(r < 1e-10);
        let row = r_db_row(&f, 0.3, 0, 2, DbKind::Canonical).unwrap();
        assert_eq!(row.rate(1), 1.0);
        let p = f.probs_row(0.3, 2).unwrap();
        let low = r_db_row(&f, 0.3, 3, 2, DbKind::Canonical).unwrap();
        assert!(close(low.rate(0), p[0] / p[3]));
    }

    #[test]
    fn rows_have_zero_sum() {
        let f = ConditionalFlow::uniform(5).unwrap();
        let plan = RatePlan::with_eta(f, 3.0).unwrap();
        let row = conditional_rate_row(&plan, 0.8, 2, 4).unwrap();
        let total: f64 = row.as_slice().iter().sum();
        assert!(total.abs() < 1e-9);
    }
}
