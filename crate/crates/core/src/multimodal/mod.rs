//! Joint generation of continuous coordinates and discrete tokens under
//! independent clocks: `t` for coordinates, `t̃` for tokens.
//!
//! Coordinates follow `xt = t·x1 + (1−t)·x0` with `x0 ~ N(0, I)`; tokens
//! follow the masking flow.

mod heads;
mod mlp;

pub use heads::{ExactGmmHeads, GaussianMixture};
pub use mlp::{draw_joint_example, joint_train, JointExample, JointMlp, JointMlpShape, JointTrainConfig, JointTrainOutcome};

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoise::DenoiserOutput;
use crate::error::{DfmError, Result};
use crate::rates::{expected_rate_row, RatePlan, RateRow};
use crate::rng::{substream, ChaCha8Rng};
use crate::sampler::{advance, FinalFill, NoSink, SamplerConfig, Scheme};
use crate::schedule::{sample_categorical, ConditionalFlow};
use crate::tokens::{Alphabet, Token};

/// Noisy coordinates and tokens with their two times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub coords: Vec<f64>,
    pub tokens: Vec<Token>,
    pub t: f64,
    pub t_tilde: f64,
}

/// Predicted clean coordinates and token distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPrediction {
    pub x1_hat: Vec<f64>,
    pub tokens: DenoiserOutput,
}

/// Model of the clean joint state given a noisy one.
pub trait JointDenoiser: Send + Sync {
    /// Data tokens `S`.
    fn size(&self) -> usize;
    fn coord_dims(&self) -> usize;
    fn token_dims(&self) -> usize;
    fn predict(&self, state: &JointState) -> Result<JointPrediction>;
}

impl<T: JointDenoiser + ?Sized> JointDenoiser for &T {
    fn size(&self) -> usize {
        (**self).size()
    }
    fn coord_dims(&self) -> usize {
        (**self).coord_dims()
    }
    fn token_dims(&self) -> usize {
        (**self).token_dims()
    }
    fn predict(&self, state: &JointState) -> Result<JointPrediction> {
        (**self).predict(state)
    }
}

/// Paired coordinate and token samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDataset {
    pub coords: Vec<Vec<f64>>,
    pub tokens: Vec<Vec<Token>>,
    #[serde(rename = "S")]
    pub size: usize,
}

/// Per-coordinate shift and scale removed at ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

impl JointDataset {
    pub fn new(coords: Vec<Vec<f64>>, tokens: Vec<Vec<Token>>, size: usize) -> Result<Self> {
        let ds = Self { coords, tokens, size };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.tokens.len() {
            return Err(DfmError::Shape(format!(
                "{} coordinate rows but {} token rows",
                self.coords.len(),
                self.tokens.len()
            )));
        }
        let alphabet = Alphabet::new(self.size, false)?;
        let dc = self.coords.first().map_or(0, Vec::len);
        let da = self.tokens.first().map_or(0, Vec::len);
        for (c, a) in self.coords.iter().zip(&self.tokens) {
            if c.len() != dc || a.len() != da {
                return Err(DfmError::Shape("ragged joint dataset".into()));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(DfmError::Shape("non-finite coordinate".into()));
            }
            alphabet.check_sequence(a)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coord_dims(&self) -> usize {
        self.coords.first().map_or(0, Vec::len)
    }

    pub fn token_dims(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    /// Zero-mean, unit-variance coordinates; constant coordinates keep scale 1.
    pub fn standardized(&self) -> (Self, Standardization) {
        let dc = self.coord_dims();
        let n = self.len().max(1) as f64;
        let mut mean = vec![0.0; dc];
        for c in &self.coords {
            for (m, v) in mean.iter_mut().zip(c) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; dc];
        for c in &self.coords {
            for ((s, v), m) in std.iter_mut().zip(c).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        let stats = Standardization { mean, std };
        let coords = self.coords.iter().map(|c| stats.apply(c)).collect();
        (Self { coords, tokens: self.tokens.clone(), size: self.size }, stats)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Self = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

fn check_unit(name: &str, t: f64) -> Result<()> {
    if !(t.is_finite() && (0.0..=1.0).contains(&t)) {
        return Err(DfmError::Domain(format!("{name} = {t} outside [0, 1]")));
    }
    Ok(())
}

/// Corrupts coordinates to time `t` and tokens to time `t_tilde`.
pub fn joint_corrupt<R: Rng + ?Sized>(
    flow: &ConditionalFlow,
    x1: &[f64],
    a1: &[Token],
    t: f64,
    t_tilde: f64,
    rng: &mut R,
) -> Result<JointState> {
    check_unit("t", t)?;
    check_unit("t_tilde", t_tilde)?;
    if !flow.is_masking() {
        return Err(DfmError::Incompatible("tokens use the masking flow".into()));
    }
    let coords = x1
        .iter()
        .map(|&v| {
            let x0: f64 = StandardNormal.sample(rng);
            t * v + (1.0 - t) * x0
        })
        .collect();
    let tokens = flow.sample_corrupted(t_tilde, a1, rng)?.0;
    Ok(JointState { coords, tokens, t, t_tilde })
}

/// `(x̂1 − xt) / (1 − t)` per coordinate.
pub fn coord_velocity(x1_hat: &[f64], xt: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t < 1.0) {
        return Err(DfmError::Mode(format!("coordinates are fixed at t = {t}")));
    }
    Ok(x1_hat.iter().zip(xt).map(|(a, b)| (a - b) / (1.0 - t)).collect())
}

/// Coordinate velocity and per-dimension token rate rows at `state`.
pub fn joint_velocity_and_rate<D: JointDenoiser + ?Sized>(
    denoiser: &D,
    plan: &RatePlan,
    state: &JointState,
) -> Result<(Vec<f64>, Vec<RateRow>)> {
    if !plan.flow().is_masking() {
        return Err(DfmError::Incompatible("tokens use the masking flow".into()));
    }
    if !(state.t_tilde < 1.0) {
        return Err(DfmError::Mode(format!("tokens are fixed at t_tilde = {}", state.t_tilde)));
    }
    let pred = denoiser.predict(state)?;
    let velocity = coord_velocity(&pred.x1_hat, &state.coords, state.t)?;
    let rows = state
        .tokens
        .iter()
        .enumerate()
        .map(|(d, &tok)| expected_rate_row(plan, state.t_tilde, tok, pred.tokens.row(d)))
        .collect::<Result<_>>()?;
    Ok((velocity, rows))
}

/// Which modalities are generated and which are held at their clean values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationMode {
    CoGenerate,
    FixCoordsGenerateTokens { coords: Vec<f64> },
    FixTokensGenerateCoords { tokens: Vec<Token> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub coords: Vec<f64>,
    pub tokens: Vec<Token>,
}

/// Generates one joint sample. Both moving clocks share the sampler's grid;
/// coordinates finish with one step to `t = 1`, tokens with the final fill.
pub fn joint_generate<D: JointDenoiser + ?Sized>(
    denoiser: &D,
    mode: &GenerationMode,
    cfg: &SamplerConfig,
    mut rng: ChaCha8Rng,
) -> Result<JointSample> {
    cfg.validate()?;
    let size = denoiser.size();
    let dc = denoiser.coord_dims();
    let da = denoiser.token_dims();
    let flow = ConditionalFlow::masking(size)?;
    let plan = RatePlan::with_eta(flow.clone(), cfg.eta)?;
    let mask = flow.alphabet().mask().expect("masking flow has MASK");

    let (move_coords, move_tokens) = match mode {
        GenerationMode::CoGenerate => (true, true),
        GenerationMode::FixCoordsGenerateTokens { coords } => {
            if coords.len() != dc || coords.iter().any(|v| !v.is_finite()) {
                return Err(DfmError::Mode(format!("need {dc} finite conditioning coordinates")));
            }
            (false, true)
        }
        GenerationMode::FixTokensGenerateCoords { tokens } => {
            if tokens.len() != da {
                return Err(DfmError::Mode(format!("need {da} conditioning tokens")));
            }
            Alphabet::new(size, false)?.check_sequence(tokens)?;
            (true, false)
        }
    };
    if cfg.scheme == Scheme::MaskingPurity && !move_tokens {
        return Err(DfmError::Mode("purity sampling needs generated tokens".into()));
    }

    let grid = cfg.time_grid();
    let mut state = JointState {
        coords: match mode {
            GenerationMode::FixCoordsGenerateTokens { coords } => coords.clone(),
            _ => (0..dc).map(|_| StandardNormal.sample(&mut rng)).collect(),
        },
        tokens: match mode {
            GenerationMode::FixTokensGenerateCoords { tokens } => tokens.clone(),
            _ => vec![mask; da],
        },
        t: if move_coords { grid[0] } else { 1.0 },
        t_tilde: if move_tokens { grid[0] } else { 1.0 },
    };

    let mut buf = Vec::new();
    for k in 0..grid.len() - 1 {
        let dt = grid[k + 1] - grid[k];
        let pred = checked_predict(denoiser, &state)?;
        if move_coords {
            let v = coord_velocity(&pred.x1_hat, &state.coords, state.t)?;
            for (x, vi) in state.coords.iter_mut().zip(&v) {
                *x += vi * dt;
            }
        }
        if move_tokens {
            let is_final = k + 2 == grid.len();
            let t_tilde = state.t_tilde;
            advance(cfg.scheme, &plan, t_tilde, dt, is_final, &mut state.tokens, &pred.tokens, &mut rng, &mut NoSink, &mut buf);
        }
        if move_coords {
            state.t = grid[k + 1];
        }
        if move_tokens {
            state.t_tilde = grid[k + 1];
        }
    }

    if move_coords || state.tokens.contains(&mask) {
        let pred = checked_predict(denoiser, &state)?;
        if move_coords {
            // A full step to t = 1 lands on the prediction.
            state.coords = pred.x1_hat.clone();
        }
        if state.tokens.contains(&mask) {
            let fill: Vec<Token> = match cfg.final_fill {
                FinalFill::Disabled => return Err(DfmError::IncompleteSample),
                FinalFill::Argmax => pred.tokens.argmax(),
                FinalFill::Sample => pred.tokens.rows().map(|r| sample_categorical(r, &mut rng) as Token).collect(),
            };
            for (tok, f) in state.tokens.iter_mut().zip(fill) {
                if *tok == mask {
                    *tok = f;
                }
            }
        }
    }
    Ok(JointSample { coords: state.coords, tokens: state.tokens })
}

fn checked_predict<D: JointDenoiser + ?Sized>(denoiser: &D, state: &JointState) -> Result<JointPrediction> {
    let pred = denoiser.predict(state)?;
    if pred.x1_hat.len() != state.coords.len()
        || pred.tokens.dims() != state.tokens.len()
        || pred.tokens.size() != denoiser.size()
    {
        return Err(DfmError::InvalidDenoiser("joint prediction has the wrong shape".into()));
    }
    if pred.x1_hat.iter().any(|v| !v.is_finite()) {
        return Err(DfmError::InvalidDenoiser("non-finite coordinate prediction".into()));
    }
    Ok(pred)
}

/// `n` joint samples; sample `i` uses substream `i` of `cfg.seed`.
pub fn joint_generate_batch<D: JointDenoiser + ?Sized>(
    denoiser: &D,
    mode: &GenerationMode,
    cfg: &SamplerConfig,
    n: usize,
) -> Result<Vec<JointSample>> {
    (0..n)
        .into_par_iter()
        .map(|i| joint_generate(denoiser, mode, cfg, substream(cfg.seed, i as u64)))
        .collect()
}

/// Euler integration of the conditional velocity `(x1 − x)/(1 − t)` from
/// `x0` at `t = 0`; returns the positions at each requested time.
pub fn simulate_conditional_coord(x1: f64, x0: f64, dt: f64, times: &[f64]) -> Result<Vec<f64>> {
    if !(dt > 0.0 && dt < 1.0) {
        return Err(DfmError::Domain(format!("dt must lie in (0, 1), got {dt}")));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut out = vec![0.0; times.len()];
    let (mut t, mut x) = (0.0f64, x0);
    for i in order {
        let target = times[i];
        check_unit("time", target)?;
        if target >= 1.0 {
            return Err(DfmError::Domain("the conditional velocity is undefined at t = 1".into()));
        }
        while t < target - 1e-12 {
            let h = dt.min(target - t);
            x += h * (x1 - x) / (1.0 - t);
            t += h;
        }
        out[i] = x;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::root_rng;

    #[test]
    fn corrupt_boundaries() {
        let flow = ConditionalFlow::masking(3).unwrap();
        let mut rng = root_rng(0);
        let s = joint_corrupt(&flow, &[1.5, -2.0], &[0, 2], 1.0, 1.0, &mut rng).unwrap();
        assert_eq!(s.coords, vec![1.5, -2.0]);
        assert_eq!(s.tokens, vec![0, 2]);
        let s = joint_corrupt(&flow, &[1.5], &[0, 2], 0.3, 0.0, &mut rng).unwrap();
        assert_eq!(s.tokens, vec![3, 3]);
        assert!(joint_corrupt(&flow, &[1.5], &[0], 1.3, 0.0, &mut rng).is_err());
    }

    #[test]
    fn velocity_examples() {
        let v = coord_velocity(&[1.0], &[0.2], 0.6).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-12);
        assert_eq!(coord_velocity(&[0.7], &[0.7], 0.3).unwrap(), vec![0.0]);
        assert!(matches!(coord_velocity(&[0.7], &[0.7], 1.0), Err(DfmError::Mode(_))));
    }

    #[test]
    fn conditional_path_is_affine() {
        let xs = simulate_conditional_coord(2.0, -1.0, 1e-3, &[0.75, 0.25, 0.5]).unwrap();
        for (x, t) in xs.iter().zip([0.75, 0.25, 0.5]) {
            let expected = t * 2.0 + (1.0 - t) * -1.0;
            assert!((x - expected).abs() < 1e-9, "{x} vs {expected}");
        }
    }

    #[test]
    fn standardization_round_trip() {
        let ds = JointDataset::new(vec![vec![1.0, 5.0], vec![3.0, 5.0]], vec![vec![0], vec![1]], 2).unwrap();
        let (z, stats) = ds.standardized();
        assert_eq!(z.coords[0], vec![-1.0, 0.0]);
        assert_eq!(stats.invert(&z.coords[1]), vec![3.0, 5.0]);
        let back = JointDataset::from_json(&ds.to_json().unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn dataset_shape_errors() {
        assert!(JointDataset::new(vec![vec![1.0]], vec![], 2).is_err());
        assert!(JointDataset::new(vec![vec![1.0]], vec![vec![2]], 2).is_err());
    }
}
