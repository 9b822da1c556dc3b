//! CTMC simulation of generative trajectories.
//!
//! Every scheme advances all dimensions independently over one step of size
//! `dt`, so several dimensions may change at the same recorded time.

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoise::{Denoiser, DenoiserOutput, Tempered};
use crate::error::{DfmError, Result};
use crate::rates::{conditional_unchecked, expected_unchecked, RatePlan};
use crate::rng::{substream, ChaCha8Rng};
use crate::schedule::{sample_categorical, FlowKind, DEFAULT_EPS};
use crate::tokens::{state_index, Token, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    FactorizedEuler,
    SampleThenPlug,
    MaskingFast,
    MaskingPurity,
}

impl Scheme {
    pub fn needs_masking(self) -> bool {
        matches!(self, Scheme::MaskingFast | Scheme::MaskingPurity)
    }
}

/// How MASK tokens left at the end of the time grid are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FinalFill {
    #[default]
    Argmax,
    Sample,
    /// Leave them; generation then fails if any remain.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub dt: f64,
    /// Replaces the stochasticity level of the rate plan.
    pub eta: f64,
    pub scheme: Scheme,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub final_fill: FinalFill,
    #[serde(default)]
    pub seed: u64,
    /// The grid runs from `eps` to `1 − eps`.
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Times at which to keep a copy of the state (the first grid time at or after each).
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    /// Keep individual jumps; counts are always kept.
    #[serde(default = "yes")]
    pub record_jumps: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            eta: 0.0,
            scheme: Scheme::FactorizedEuler,
            temperature: 1.0,
            final_fill: FinalFill::Argmax,
            seed: 0,
            eps: DEFAULT_EPS,
            snapshot_times: Vec::new(),
            record_jumps: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt < 1.0) {
            return Err(DfmError::Domain(format!("dt must lie in (0, 1), got {}", self.dt)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(DfmError::Domain(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DfmError::Domain(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(0.0..0.5).contains(&self.eps) {
            return Err(DfmError::Domain(format!("eps must lie in [0, 0.5), got {}", self.eps)));
        }
        Ok(())
    }

    /// Grid times `eps, eps + dt, …, 1 − eps`; the last step may be shorter.
    pub fn time_grid(&self) -> Vec<f64> {
        let span = 1.0 - 2.0 * self.eps;
        let n = ((span / self.dt) - 1e-9).ceil().max(1.0) as usize;
        let mut grid: Vec<f64> = (0..n).map(|k| self.eps + k as f64 * self.dt).collect();
        grid.push(1.0 - self.eps);
        grid
    }
}

/// One change of one dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub t: f64,
    pub dim: usize,
    pub from: Token,
    pub to: Token,
}

/// Initial state plus the ordered jumps that follow it.
///
/// Jumps made in the same step share a time, so times are non-decreasing and
/// each consecutive pair of states differs in exactly one dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub initial: Vec<Token>,
    pub jumps: Vec<Jump>,
    pub jump_count_per_dim: Vec<usize>,
    /// `(grid time, state)` pairs for the configured snapshot times.
    pub snapshots: Vec<(f64, Vec<Token>)>,
}

impl Trajectory {
    fn new(initial: Vec<Token>) -> Self {
        let dims = initial.len();
        Self { initial, jumps: Vec::new(), jump_count_per_dim: vec![0; dims], snapshots: Vec::new() }
    }

    pub fn total_jumps(&self) -> usize {
        self.jump_count_per_dim.iter().sum()
    }

    pub fn times(&self) -> Vec<f64> {
        self.jumps.iter().map(|j| j.t).collect()
    }

    /// The initial state and the state after every recorded jump.
    pub fn states(&self) -> Vec<TokenSequence> {
        let mut cur = self.initial.clone();
        let mut out = vec![TokenSequence(cur.clone())];
        for j in &self.jumps {
            cur[j.dim] = j.to;
            out.push(TokenSequence(cur.clone()));
        }
        out
    }

    /// One JSON object per jump and line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for j in &self.jumps {
            serde_json::to_writer(&mut w, j)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// A finished sample and the path that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: TokenSequence,
    pub trajectory: Trajectory,
}

/// Collects jumps made during a step.
pub(crate) trait JumpSink {
    fn jump(&mut self, dim: usize, from: Token, to: Token);
}

pub(crate) struct NoSink;

impl JumpSink for NoSink {
    fn jump(&mut self, _: usize, _: Token, _: Token) {}
}

struct Recorder<'a> {
    traj: &'a mut Trajectory,
    t: f64,
    keep: bool,
}

impl JumpSink for Recorder<'_> {
    fn jump(&mut self, dim: usize, from: Token, to: Token) {
        self.traj.jump_count_per_dim[dim] += 1;
        if self.keep {
            self.traj.jumps.push(Jump { t: self.t, dim, from, to });
        }
    }
}

/// Applies one step of `scheme` in place, given the denoiser output at `(t, xt)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn advance<R: Rng + ?Sized, S: JumpSink>(
    scheme: Scheme,
    plan: &RatePlan,
    t: f64,
    dt: f64,
    is_final: bool,
    xt: &mut [Token],
    probs: &DenoiserOutput,
    rng: &mut R,
    sink: &mut S,
    buf: &mut Vec<f64>,
) {
    // The last step carries no detailed-balance churn.
    let eta = if is_final { 0.0 } else { plan.eta() };
    match scheme {
        Scheme::FactorizedEuler => {
            for d in 0..xt.len() {
                let from = xt[d];
                euler_weights(plan, eta, t, dt, from, probs.row(d), buf);
                if let Some(to) = draw_from_weights(from, buf, rng) {
                    xt[d] = to;
                    sink.jump(d, from, to);
                }
            }
        }
        Scheme::SampleThenPlug => {
            let flow = plan.flow();
            let scaled = scaled_plan(plan, eta);
            for d in 0..xt.len() {
                let from = xt[d];
                let x1 = if flow.is_masking() && !flow.alphabet().is_mask(from) {
                    from
                } else {
                    sample_categorical(probs.row(d), rng) as Token
                };
                let row = conditional_unchecked(&scaled, t, from, x1);
                buf.clear();
                buf.extend(row.as_slice().iter().map(|&r| (r * dt).min(1.0)));
                finish_weights(from, buf);
                if let Some(to) = draw_from_weights(from, buf, rng) {
                    xt[d] = to;
                    sink.jump(d, from, to);
                }
            }
        }
        Scheme::MaskingFast => {
            let mask = plan.flow().alphabet().mask().expect("checked masking flow");
            let unmask = (dt * (1.0 + eta * t) / (1.0 - t)).min(1.0);
            let remask = (dt * eta).min(1.0);
            for d in 0..xt.len() {
                let from = xt[d];
                if from == mask {
                    if rng.random::<f64>() < unmask {
                        let to = sample_categorical(probs.row(d), rng) as Token;
                        xt[d] = to;
                        sink.jump(d, from, to);
                    }
                } else if remask > 0.0 && rng.random::<f64>() < remask {
                    xt[d] = mask;
                    sink.jump(d, from, mask);
                }
            }
        }
        Scheme::MaskingPurity => {
            let mask = plan.flow().alphabet().mask().expect("checked masking flow");
            let unmask = (dt * (1.0 + eta * t) / (1.0 - t)).min(1.0);
            let remask = (dt * eta).min(1.0);
            let before: Vec<bool> = xt.iter().map(|&k| k == mask).collect();
            let mut masked: Vec<usize> = (0..xt.len()).filter(|&d| before[d]).collect();
            if !masked.is_empty() {
                let n = Binomial::new(masked.len() as u64, unmask).expect("probability in [0, 1]").sample(rng) as usize;
                let purity = probs.purity();
                masked.sort_by(|&a, &b| purity[b].total_cmp(&purity[a]).then(a.cmp(&b)));
                for &d in &masked[..n] {
                    let to = sample_categorical(probs.row(d), rng) as Token;
                    xt[d] = to;
                    sink.jump(d, mask, to);
                }
            }
            if remask > 0.0 {
                for d in 0..xt.len() {
                    if !before[d] && rng.random::<f64>() < remask {
                        let from = xt[d];
                        xt[d] = mask;
                        sink.jump(d, from, mask);
                    }
                }
            }
        }
    }
}

fn scaled_plan(plan: &RatePlan, eta: f64) -> RatePlan {
    if eta == plan.eta() {
        plan.clone()
    } else {
        plan.at_eta(eta).expect("eta was validated")
    }
}

/// Step weights `min(1, R(xt, j)·dt)` off the diagonal, `max(0, 1 − Σ)` on it.
fn euler_weights(plan: &RatePlan, eta: f64, t: f64, dt: f64, from: Token, probs: &[f64], buf: &mut Vec<f64>) {
    let alphabet = plan.flow().alphabet();
    buf.clear();
    buf.resize(alphabet.num_states(), 0.0);
    match plan.flow().kind() {
        FlowKind::Masking => {
            if alphabet.is_mask(from) {
                let scale = (1.0 + eta * t) / (1.0 - t) * dt;
                for (w, &p) in buf.iter_mut().zip(probs) {
                    *w = (scale * p).min(1.0);
                }
            } else {
                buf[alphabet.size()] = (eta * dt).min(1.0);
            }
        }
        FlowKind::Uniform => {
            if !alphabet.is_mask(from) {
                let s = alphabet.size() as f64;
                let scale = (1.0 + eta + eta * (s - 1.0) * t) / (1.0 - t);
                let stay = eta * probs[from as usize];
                for (w, &p) in buf.iter_mut().zip(probs) {
                    *w = ((scale * p + stay) * dt).min(1.0);
                }
            }
        }
        FlowKind::General(_) => {
            let row = expected_unchecked(&scaled_plan(plan, eta), t, from, probs);
            buf.extend_from_slice(row.as_slice());
            buf.truncate(alphabet.num_states());
            for w in buf.iter_mut() {
                *w = (*w * dt).min(1.0);
            }
        }
    }
    finish_weights(from, buf);
}

fn finish_weights(from: Token, buf: &mut [f64]) {
    buf[from as usize] = 0.0;
    let off: f64 = buf.iter().sum();
    buf[from as usize] = (1.0 - off).max(0.0);
}

/// Draws the next token; `None` when it stays put. Skips the draw if nothing can move.
fn draw_from_weights<R: Rng + ?Sized>(from: Token, weights: &[f64], rng: &mut R) -> Option<Token> {
    let moving = weights.iter().enumerate().any(|(j, &w)| j != from as usize && w > 0.0);
    if !moving {
        return None;
    }
    let to = sample_categorical(weights, rng) as Token;
    (to != from).then_some(to)
}

/// Probabilities of the next token in one dimension under a factorized Euler step.
pub fn euler_step_distribution(plan: &RatePlan, t: f64, dt: f64, from: Token, probs: &[f64]) -> Result<Vec<f64>> {
    check_step(t, dt)?;
    plan.flow().alphabet().check(from)?;
    crate::rates::check_denoiser_row(probs, plan.flow().alphabet().size())?;
    let is_final = t + dt >= 1.0;
    let mut buf = Vec::new();
    euler_weights(plan, if is_final { 0.0 } else { plan.eta() }, t, dt, from, probs, &mut buf);
    let total: f64 = buf.iter().sum();
    Ok(buf.into_iter().map(|w| w / total).collect())
}

fn check_step(t: f64, dt: f64) -> Result<()> {
    if !(t.is_finite() && (0.0..1.0).contains(&t)) {
        return Err(DfmError::Domain(format!("time {t} outside [0, 1)")));
    }
    if !(dt > 0.0 && t + dt <= 1.0 + 1e-12) {
        return Err(DfmError::Domain(format!("step {dt} from {t} leaves [0, 1]")));
    }
    Ok(())
}

fn predict_checked<D: Denoiser + ?Sized>(denoiser: &D, plan: &RatePlan, t: f64, xt: &[Token]) -> Result<DenoiserOutput> {
    let out = denoiser.predict(t, xt)?;
    if out.size() != plan.flow().alphabet().size() || out.dims() != xt.len() {
        return Err(DfmError::InvalidDenoiser(format!(
            "denoiser returned {}×{} for a {}-dimensional state over S={}",
            out.dims(),
            out.size(),
            xt.len(),
            plan.flow().alphabet().size()
        )));
    }
    Ok(out)
}

fn single_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    scheme: Scheme,
    plan: &RatePlan,
    denoiser: &D,
    t: f64,
    xt: &TokenSequence,
    dt: f64,
    rng: &mut R,
) -> Result<TokenSequence> {
    check_step(t, dt)?;
    if scheme.needs_masking() && !plan.flow().is_masking() {
        return Err(DfmError::Incompatible(format!("{scheme:?} needs a masking flow")));
    }
    plan.flow().alphabet().check_sequence(xt)?;
    let probs = predict_checked(denoiser, plan, t, xt)?;
    let mut next = xt.0.clone();
    let is_final = t + dt >= 1.0;
    advance(scheme, plan, t, dt, is_final, &mut next, &probs, rng, &mut NoSink, &mut Vec::new());
    Ok(TokenSequence(next))
}

/// Factorized Euler step with the expected rate under the denoiser.
pub fn euler_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    plan: &RatePlan,
    denoiser: &D,
    t: f64,
    xt: &TokenSequence,
    dt: f64,
    rng: &mut R,
) -> Result<TokenSequence> {
    single_step(Scheme::FactorizedEuler, plan, denoiser, t, xt, dt, rng)
}

/// Draws `x1` per dimension, then steps with the conditional rate at that `x1`.
pub fn sample_then_plug_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    plan: &RatePlan,
    denoiser: &D,
    t: f64,
    xt: &TokenSequence,
    dt: f64,
    rng: &mut R,
) -> Result<TokenSequence> {
    single_step(Scheme::SampleThenPlug, plan, denoiser, t, xt, dt, rng)
}

/// Unmask with probability `dt(1+ηt)/(1−t)`, remask with `dt·η` (never on the last step).
pub fn masking_fast_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    plan: &RatePlan,
    denoiser: &D,
    t: f64,
    xt: &TokenSequence,
    dt: f64,
    rng: &mut R,
) -> Result<TokenSequence> {
    single_step(Scheme::MaskingFast, plan, denoiser, t, xt, dt, rng)
}

/// Unmask a binomial number of the most confident masked dimensions.
pub fn purity_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    plan: &RatePlan,
    denoiser: &D,
    t: f64,
    xt: &TokenSequence,
    dt: f64,
    rng: &mut R,
) -> Result<TokenSequence> {
    single_step(Scheme::MaskingPurity, plan, denoiser, t, xt, dt, rng)
}

/// Per-trajectory state while a batch advances in lockstep.
struct Walker {
    xt: Vec<Token>,
    rng: ChaCha8Rng,
    traj: Trajectory,
    next_snapshot: usize,
}

struct Engine<'a, D: ?Sized> {
    plan: RatePlan,
    denoiser: &'a D,
    dims: usize,
    cfg: &'a SamplerConfig,
    grid: Vec<f64>,
    snapshots: Vec<f64>,
}

impl<'a, D: Denoiser + ?Sized> Engine<'a, D> {
    fn new(plan: &RatePlan, denoiser: &'a D, dims: usize, cfg: &'a SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        if dims == 0 {
            return Err(DfmError::Shape("cannot generate zero-length sequences".into()));
        }
        if cfg.scheme.needs_masking() && !plan.flow().is_masking() {
            return Err(DfmError::Incompatible(format!("{:?} needs a masking flow", cfg.scheme)));
        }
        if denoiser.size() != plan.flow().alphabet().size() {
            return Err(DfmError::Incompatible("denoiser and flow disagree on S".into()));
        }
        let mut snapshots = cfg.snapshot_times.clone();
        if snapshots.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(DfmError::Domain("snapshot times must lie in [0, 1]".into()));
        }
        snapshots.sort_by(f64::total_cmp);
        Ok(Self { plan: plan.at_eta(cfg.eta)?, denoiser, dims, cfg, grid: cfg.time_grid(), snapshots })
    }

    fn start(&self, rng: ChaCha8Rng) -> Result<Walker> {
        let mut rng = rng;
        let x0 = self.plan.flow().sample_prior(self.dims, &mut rng)?.0;
        let mut w = Walker { xt: x0.clone(), rng, traj: Trajectory::new(x0), next_snapshot: 0 };
        self.take_snapshots(&mut w, self.grid[0]);
        Ok(w)
    }

    fn take_snapshots(&self, w: &mut Walker, now: f64) {
        while w.next_snapshot < self.snapshots.len() && now >= self.snapshots[w.next_snapshot] - 1e-9 {
            w.traj.snapshots.push((now, w.xt.clone()));
            w.next_snapshot += 1;
        }
    }

    fn step(&self, k: usize, w: &mut Walker, probs: &DenoiserOutput, buf: &mut Vec<f64>) {
        let t = self.grid[k];
        let dt = self.grid[k + 1] - t;
        let is_final = k + 2 == self.grid.len();
        let mut sink = Recorder { traj: &mut w.traj, t: self.grid[k + 1], keep: self.cfg.record_jumps };
        advance(self.cfg.scheme, &self.plan, t, dt, is_final, &mut w.xt, probs, &mut w.rng, &mut sink, buf);
        self.take_snapshots(w, self.grid[k + 1]);
    }

    fn finish(&self, mut w: Walker) -> Result<Sample> {
        let alphabet = self.plan.flow().alphabet();
        if let Some(mask) = alphabet.mask() {
            if w.xt.contains(&mask) {
                let t_end = *self.grid.last().expect("grid is non-empty");
                let fill = match self.cfg.final_fill {
                    FinalFill::Disabled => return Err(DfmError::IncompleteSample),
                    FinalFill::Argmax => predict_checked(self.denoiser, &self.plan, t_end, &w.xt)?.argmax(),
                    FinalFill::Sample => {
                        let p = predict_checked(self.denoiser, &self.plan, t_end, &w.xt)?;
                        p.rows().map(|r| sample_categorical(r, &mut w.rng) as Token).collect()
                    }
                };
                let mut sink = Recorder { traj: &mut w.traj, t: 1.0, keep: self.cfg.record_jumps };
                for d in 0..w.xt.len() {
                    if w.xt[d] == mask {
                        sink.jump(d, mask, fill[d]);
                        w.xt[d] = fill[d];
                    }
                }
            }
        }
        Ok(Sample { tokens: TokenSequence(w.xt), trajectory: w.traj })
    }

    /// Runs walkers in lockstep, sharing denoiser calls between identical states.
    fn run(&self, mut walkers: Vec<Walker>) -> Result<Vec<Sample>> {
        let base = self.plan.flow().alphabet().num_states();
        let cacheable = state_index(&vec![0; self.dims], base).is_some() && walkers.len() > 1;
        let mut cache: HashMap<u64, DenoiserOutput> = HashMap::new();
        let mut buf = Vec::new();
        for k in 0..self.grid.len() - 1 {
            let t = self.grid[k];
            cache.clear();
            for w in walkers.iter_mut() {
                if cacheable {
                    let key = state_index(&w.xt, base).expect("index fits");
                    if !cache.contains_key(&key) {
                        cache.insert(key, predict_checked(self.denoiser, &self.plan, t, &w.xt)?);
                    }
                    self.step(k, w, &cache[&key], &mut buf);
                } else {
                    let probs = predict_checked(self.denoiser, &self.plan, t, &w.xt)?;
                    self.step(k, w, &probs, &mut buf);
                }
            }
        }
        walkers.into_iter().map(|w| self.finish(w)).collect()
    }
}

/// Walkers processed together; results do not depend on this.
const CHUNK: usize = 2048;

fn with_temperature<D: Denoiser + ?Sized, T>(
    denoiser: &D,
    temperature: f64,
    f: impl FnOnce(&dyn Denoiser) -> Result<T>,
) -> Result<T> {
    struct Ref<'a, D: ?Sized>(&'a D);
    impl<D: Denoiser + ?Sized> Denoiser for Ref<'_, D> {
        fn size(&self) -> usize {
            self.0.size()
        }
        fn predict(&self, t: f64, xt: &[Token]) -> Result<DenoiserOutput> {
            self.0.predict(t, xt)
        }
        fn logits(&self, t: f64, xt: &[Token]) -> Result<Vec<Vec<f64>>> {
            self.0.logits(t, xt)
        }
    }
    if temperature == 1.0 {
        f(&Ref(denoiser))
    } else {
        f(&Tempered::new(Ref(denoiser), temperature)?)
    }
}

/// Simulates one trajectory from the prior at `eps` to `1 − eps`, then fills
/// any remaining MASK tokens.
pub fn generate<D: Denoiser + ?Sized>(
    plan: &RatePlan,
    denoiser: &D,
    dims: usize,
    cfg: &SamplerConfig,
    rng: ChaCha8Rng,
) -> Result<Sample> {
    with_temperature(denoiser, cfg.temperature, |den| {
        let engine = Engine::new(plan, den, dims, cfg)?;
        let walker = engine.start(rng)?;
        Ok(engine.run(vec![walker])?.pop().expect("one walker"))
    })
}

/// `n` independent trajectories; trajectory `i` uses random substream `i` of `cfg.seed`.
///
/// Identical to calling [`generate`] with `substream(cfg.seed, i)` for each `i`.
/// The denoiser must be a deterministic function of `(t, xt)`.
pub fn generate_batch<D: Denoiser + ?Sized>(
    plan: &RatePlan,
    denoiser: &D,
    dims: usize,
    cfg: &SamplerConfig,
    n: usize,
) -> Result<Vec<Sample>> {
    with_temperature(denoiser, cfg.temperature, |den| {
        let engine = Engine::new(plan, den, dims, cfg)?;
        let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();
        let parts: Vec<Vec<Sample>> = chunks
            .into_par_iter()
            .map(|(lo, hi)| {
                let walkers = (lo..hi).map(|i| engine.start(substream(cfg.seed, i as u64))).collect::<Result<Vec<_>>>()?;
                engine.run(walkers)
            })
            .collect::<Result<_>>()?;
        Ok(parts.into_iter().flatten().collect())
    })
}
