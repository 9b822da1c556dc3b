use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{joint_corrupt, JointDataset, JointDenoiser, JointPrediction, JointState};
use crate::denoise::mlp::{dense, dense_backward, tanh_backward, time_features};
use crate::denoise::{softmax_into, DenoiserOutput, TIME_FEATURES};
use crate::error::{DfmError, Result};
use crate::rng::root_rng;
use crate::schedule::{ConditionalFlow, DEFAULT_EPS};
use crate::tokens::Token;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointMlpShape {
    /// Data tokens `S`.
    pub size: usize,
    pub coord_dims: usize,
    pub token_dims: usize,
    pub hidden: usize,
}

impl JointMlpShape {
    pub fn input_dim(&self) -> usize {
        self.coord_dims + self.token_dims * (self.size + 1) + 2 * TIME_FEATURES
    }

    pub fn output_dim(&self) -> usize {
        self.coord_dims + self.token_dims * self.size
    }

    fn layers(&self) -> [(usize, usize); 4] {
        let h = self.hidden;
        [(h, self.input_dim()), (h, h), (h, h), (self.output_dim(), h)]
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(r, c)| r * c + r).sum()
    }
}

/// Shared tanh trunk over coordinates, one-hot tokens and both clocks, with a
/// linear coordinate head and a token logit head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointMlp {
    shape: JointMlpShape,
    params: Vec<f64>,
}

/// One training example: a corrupted state and its clean source.
#[derive(Debug, Clone, PartialEq)]
pub struct JointExample {
    pub state: JointState,
    pub x1: Vec<f64>,
    pub a1: Vec<Token>,
}

struct Pass {
    input: Vec<f64>,
    h: [Vec<f64>; 3],
    out: Vec<f64>,
}

impl JointMlp {
    pub fn new(shape: JointMlpShape, seed: u64) -> Result<Self> {
        if shape.size < 2 || shape.hidden == 0 || shape.coord_dims + shape.token_dims == 0 {
            return Err(DfmError::Shape(format!("invalid joint network shape {shape:?}")));
        }
        let mut rng = root_rng(seed);
        let mut params = Vec::with_capacity(shape.num_params());
        for (i, (rows, cols)) in shape.layers().into_iter().enumerate() {
            let scale = if i == 3 { 0.1 } else { 1.0 } / (cols as f64).sqrt();
            let normal = Normal::new(0.0, scale).expect("finite scale");
            params.extend((0..rows * cols).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, rows));
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> &JointMlpShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offsets(&self) -> [(usize, usize, usize, usize); 4] {
        let mut out = [(0, 0, 0, 0); 4];
        let mut at = 0;
        for (i, (r, c)) in self.shape.layers().into_iter().enumerate() {
            out[i] = (at, at + r * c, r, c);
            at += r * c + r;
        }
        out
    }

    fn check(&self, state: &JointState) -> Result<()> {
        if state.coords.len() != self.shape.coord_dims || state.tokens.len() != self.shape.token_dims {
            return Err(DfmError::Shape("state does not match the network".into()));
        }
        if state.tokens.iter().any(|&k| k as usize > self.shape.size) {
            return Err(DfmError::InvalidAlphabet("token outside the network's alphabet".into()));
        }
        Ok(())
    }

    fn forward(&self, state: &JointState) -> Pass {
        let s = &self.shape;
        let mut input = Vec::with_capacity(s.input_dim());
        input.extend_from_slice(&state.coords);
        let base = s.size + 1;
        let start = input.len();
        input.resize(start + s.token_dims * base, 0.0);
        for (d, &k) in state.tokens.iter().enumerate() {
            input[start + d * base + k as usize] = 1.0;
        }
        input.extend(time_features(state.t));
        input.extend(time_features(state.t_tilde));
        let [l0, l1, l2, l3] = self.offsets();
        let h0 = dense(&self.params, l0, &input, true);
        let h1 = dense(&self.params, l1, &h0, true);
        let h2 = dense(&self.params, l2, &h1, true);
        let out = dense(&self.params, l3, &h2, false);
        Pass { input, h: [h0, h1, h2], out }
    }

    fn token_probs(&self, state: &JointState, out: &[f64]) -> Vec<f64> {
        let s = self.shape.size;
        let dc = self.shape.coord_dims;
        let mut probs = Vec::with_capacity(self.shape.token_dims * s);
        for (d, &k) in state.tokens.iter().enumerate() {
            if (k as usize) < s {
                // Unmasked tokens are already clean.
                probs.extend((0..s).map(|j| f64::from(j == k as usize)));
            } else {
                softmax_into(&out[dc + d * s..dc + (d + 1) * s], 1.0, &mut probs);
            }
        }
        probs
    }

    /// Mean joint loss over the batch and its gradient.
    pub fn loss_and_grad(&self, batch: &[JointExample]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate(batch, Some(&mut grad))?;
        Ok((loss, grad))
    }

    pub fn loss(&self, batch: &[JointExample]) -> Result<f64> {
        self.accumulate(batch, None)
    }

    fn accumulate(&self, batch: &[JointExample], mut grad: Option<&mut Vec<f64>>) -> Result<f64> {
        if batch.is_empty() {
            return Err(DfmError::Shape("empty batch".into()));
        }
        let s = self.shape.size;
        let dc = self.shape.coord_dims;
        let da = self.shape.token_dims;
        let n = batch.len() as f64;
        let [l0, l1, l2, l3] = self.offsets();
        let mut total = 0.0;
        for ex in batch {
            self.check(&ex.state)?;
            if ex.x1.len() != dc || ex.a1.len() != da {
                return Err(DfmError::Shape("clean sample does not match the network".into()));
            }
            let pass = self.forward(&ex.state);
            let mut dout = vec![0.0; pass.out.len()];
            // No coordinate term at t = 1: the input already is the answer.
            if ex.state.t < 1.0 && dc > 0 {
                let w = 1.0 / ((1.0 - ex.state.t) * dc as f64 * n);
                for c in 0..dc {
                    let diff = pass.out[c] - ex.x1[c];
                    total += w * diff * diff;
                    dout[c] = 2.0 * w * diff;
                }
            }
            if da > 0 {
                let probs = self.token_probs(&ex.state, &pass.out);
                let w = 1.0 / (da as f64 * n);
                for d in 0..da {
                    let target = ex.a1[d] as usize;
                    let p = probs[d * s + target];
                    if (ex.state.tokens[d] as usize) < s {
                        if ex.state.tokens[d] as usize != target {
                            total += f64::INFINITY;
                        }
                        continue;
                    }
                    total -= w * p.ln();
                    for k in 0..s {
                        dout[dc + d * s + k] = w * (probs[d * s + k] - f64::from(k == target));
                    }
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                let p = &self.params;
                let dh2 = dense_backward(p, g, l3, &pass.h[2], &dout);
                let dz2 = tanh_backward(&pass.h[2], dh2);
                let dh1 = dense_backward(p, g, l2, &pass.h[1], &dz2);
                let dz1 = tanh_backward(&pass.h[1], dh1);
                let dh0 = dense_backward(p, g, l1, &pass.h[0], &dz1);
                let dz0 = tanh_backward(&pass.h[0], dh0);
                dense_backward(p, g, l0, &pass.input, &dz0);
            }
        }
        Ok(total)
    }
}

impl JointDenoiser for JointMlp {
    fn size(&self) -> usize {
        self.shape.size
    }

    fn coord_dims(&self) -> usize {
        self.shape.coord_dims
    }

    fn token_dims(&self) -> usize {
        self.shape.token_dims
    }

    fn predict(&self, state: &JointState) -> Result<JointPrediction> {
        self.check(state)?;
        let pass = self.forward(state);
        let x1_hat = pass.out[..self.shape.coord_dims].to_vec();
        let probs = self.token_probs(state, &pass.out);
        Ok(JointPrediction { x1_hat, tokens: DenoiserOutput::from_flat(probs, self.shape.size)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Momentum coefficient; 0 is plain SGD.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.02, batch_size: 64, steps: 1000, seed: 0, momentum: 0.9, eps: DEFAULT_EPS, grad_clip: Some(10.0) }
    }
}

#[derive(Debug, Clone)]
pub struct JointTrainOutcome {
    pub model: JointMlp,
    pub losses: Vec<f64>,
}

/// Draws a training example: 10% `t = 1`, 10% `t̃ = 1`, otherwise both uniform.
pub fn draw_joint_example<R: Rng + ?Sized>(
    flow: &ConditionalFlow,
    x1: &[f64],
    a1: &[Token],
    eps: f64,
    rng: &mut R,
) -> Result<JointExample> {
    let u: f64 = rng.random();
    let mut time = || rng.random_range(eps..=1.0 - eps);
    let (t, t_tilde) = if u < 0.1 {
        (1.0, time())
    } else if u < 0.2 {
        (time(), 1.0)
    } else {
        let t = time();
        (t, time())
    };
    let state = joint_corrupt(flow, x1, a1, t, t_tilde, rng)?;
    Ok(JointExample { state, x1: x1.to_vec(), a1: a1.to_vec() })
}

/// Minibatch training on coordinates from `ds` (expected standardized).
pub fn joint_train(mut model: JointMlp, ds: &JointDataset, cfg: &JointTrainConfig) -> Result<JointTrainOutcome> {
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.momentum) || !(0.0..0.5).contains(&cfg.eps) {
        return Err(DfmError::Domain(format!("invalid training config {cfg:?}")));
    }
    if ds.is_empty() && cfg.steps > 0 {
        return Err(DfmError::InvalidDistribution("empty dataset".into()));
    }
    if ds.size != model.shape.size || ds.coord_dims() != model.shape.coord_dims || ds.token_dims() != model.shape.token_dims {
        return Err(DfmError::Incompatible("dataset does not match the network".into()));
    }
    let flow = ConditionalFlow::masking(ds.size)?;
    let mut rng = root_rng(cfg.seed);
    let mut velocity = vec![0.0; model.params.len()];
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.random_range(0..ds.len());
                draw_joint_example(&flow, &ds.coords[i], &ds.tokens[i], cfg.eps, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, mut grad) = model.loss_and_grad(&batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(DfmError::TrainingDiverged { step });
        }
        losses.push(loss);
        if let Some(clip) = cfg.grad_clip {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                grad.iter_mut().for_each(|g| *g *= clip / norm);
            }
        }
        for ((p, g), v) in model.params.iter_mut().zip(&grad).zip(velocity.iter_mut()) {
            *v = cfg.momentum * *v + g;
            *p -= cfg.learning_rate * *v;
        }
    }
    Ok(JointTrainOutcome { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multimodal::GaussianMixture;

    fn batch(seed: u64) -> (JointMlp, Vec<JointExample>) {
        let shape = JointMlpShape { size: 3, coord_dims: 2, token_dims: 2, hidden: 5 };
        let mut m = JointMlp::new(shape, seed).unwrap();
        m.params_mut().iter_mut().for_each(|v| *v *= 2.0);
        let mix = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![1.0, -1.0], vec![-0.5, 0.5]],
            vec![0.3, 0.2],
            vec![vec![0, 2], vec![1, 1]],
            3,
        )
        .unwrap();
        let flow = ConditionalFlow::masking(3).unwrap();
        let mut rng = root_rng(seed);
        let ex = (0..10)
            .map(|_| {
                let (x, a) = mix.sample(&mut rng);
                draw_joint_example(&flow, &x, &a, 0.01, &mut rng).unwrap()
            })
            .collect();
        (m, ex)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (mut m, ex) = batch(7);
        let (_, grad) = m.loss_and_grad(&ex).unwrap();
        let h = 1e-5;
        for i in (0..m.params.len()).step_by(5) {
            let orig = m.params[i];
            m.params[i] = orig + h;
            let up = m.loss(&ex).unwrap();
            m.params[i] = orig - h;
            let down = m.loss(&ex).unwrap();
            m.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn fixed_coordinates_skip_the_coordinate_term() {
        let (m, mut ex) = batch(3);
        for e in &mut ex {
            e.state.t = 1.0;
            e.state.coords = e.x1.clone();
            e.state.t_tilde = 1.0;
            e.state.tokens = e.a1.clone();
        }
        assert_eq!(m.loss(&ex).unwrap(), 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let mix = GaussianMixture::labeled_1d(vec![0.5, 0.5], vec![-1.0, 1.0], 0.2).unwrap();
        let ds = mix.dataset(200, &mut root_rng(0));
        let shape = JointMlpShape { size: 2, coord_dims: 1, token_dims: 1, hidden: 8 };
        let cfg = JointTrainConfig { steps: 20, ..JointTrainConfig::default() };
        let a = joint_train(JointMlp::new(shape.clone(), 1).unwrap(), &ds, &cfg).unwrap();
        let b = joint_train(JointMlp::new(shape, 1).unwrap(), &ds, &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
    }
}
