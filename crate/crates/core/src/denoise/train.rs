use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::Example;
use super::{Denoiser, MlpDenoiser};
use crate::data::DataDistribution;
use crate::error::{DfmError, Result};
use crate::rng::root_rng;
use crate::schedule::{ConditionalFlow, DEFAULT_EPS};
use crate::tokens::Token;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f64 },
}

/// Per-example weight of the cross-entropy term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossWeight {
    #[default]
    Unweighted,
    /// `1 / (1 − t)`
    InverseOneMinusT,
}

impl LossWeight {
    pub fn at(self, t: f64) -> f64 {
        match self {
            LossWeight::Unweighted => 1.0,
            LossWeight::InverseOneMinusT => 1.0 / (1.0 - t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    #[serde(default)]
    pub weight: LossWeight,
    /// Times are drawn from `U[eps, 1 − eps]`.
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Rescale gradients whose norm exceeds this.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 64,
            steps: 1000,
            seed: 0,
            optimizer: Optimizer::Momentum { beta: 0.9 },
            weight: LossWeight::Unweighted,
            eps: DEFAULT_EPS,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && (0.0..0.5).contains(&self.eps)
            && match self.optimizer {
                Optimizer::Sgd => true,
                Optimizer::Momentum { beta } => (0.0..1.0).contains(&beta),
            }
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(DfmError::Domain(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpDenoiser,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
}

/// Draws `(t, xt, x1)` examples with `t ~ U[eps, 1 − eps]`.
pub(crate) fn draw_examples<R: Rng + ?Sized>(
    flow: &ConditionalFlow,
    x1s: &[Vec<Token>],
    eps: f64,
    weight: LossWeight,
    rng: &mut R,
) -> Vec<Example> {
    x1s.iter()
        .map(|x1| {
            let t = rng.random_range(eps..=1.0 - eps);
            let xt = flow.corrupt_unchecked(t, x1, rng);
            Example { t, xt, x1: x1.clone(), weight: weight.at(t) }
        })
        .collect()
}

/// Monte-Carlo cross-entropy with its standard error over samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeEstimate {
    /// Mean over samples and dimensions of `−ln p(x1^d | xt)`.
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Mean cross-entropy of any denoiser on fresh `(t, xt)` draws for each `x1`.
pub fn ce_loss<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    flow: &ConditionalFlow,
    x1s: &[Vec<Token>],
    rng: &mut R,
) -> Result<f64> {
    Ok(ce_loss_estimate(denoiser, flow, x1s, DEFAULT_EPS, rng)?.mean)
}

pub fn ce_loss_estimate<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    flow: &ConditionalFlow,
    x1s: &[Vec<Token>],
    eps: f64,
    rng: &mut R,
) -> Result<CeEstimate> {
    if x1s.is_empty() {
        return Err(DfmError::Shape("empty batch".into()));
    }
    for x1 in x1s {
        flow.alphabet().check_sequence(x1)?;
        x1.iter().try_for_each(|&k| flow.alphabet().check_data(k))?;
    }
    let examples = draw_examples(flow, x1s, eps, LossWeight::Unweighted, rng);
    let mut per = Vec::with_capacity(examples.len());
    for ex in &examples {
        let out = denoiser.predict(ex.t, &ex.xt)?;
        let nll: f64 = ex.x1.iter().enumerate().map(|(d, &k)| -out.row(d)[k as usize].ln()).sum();
        per.push(nll / ex.x1.len() as f64);
    }
    let (mean, stderr) = mean_stderr(&per);
    Ok(CeEstimate { mean, stderr, n: per.len() })
}

pub(crate) fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl MlpDenoiser {
    /// Cross-entropy on fresh corruptions of `x1s` and its gradient.
    pub fn ce_loss_and_grad<R: Rng + ?Sized>(
        &self,
        flow: &ConditionalFlow,
        x1s: &[Vec<Token>],
        weight: LossWeight,
        eps: f64,
        rng: &mut R,
    ) -> Result<(f64, Vec<f64>)> {
        self.loss_and_grad(&draw_examples(flow, x1s, eps, weight, rng))
    }
}

/// Minibatch training on the cross-entropy objective. Deterministic in `cfg.seed`.
pub fn train(
    mut model: MlpDenoiser,
    dist: &DataDistribution,
    flow: &ConditionalFlow,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dist.size() != flow.alphabet().size() || dist.size() != model.shape().size {
        return Err(DfmError::Incompatible("data, flow and network disagree on S".into()));
    }
    if dist.dims() != model.shape().dims {
        return Err(DfmError::Incompatible("data and network disagree on D".into()));
    }
    if model.shape().base != flow.alphabet().num_states() {
        return Err(DfmError::Incompatible("network input alphabet does not match the flow".into()));
    }
    let mut rng = root_rng(cfg.seed);
    let mut velocity = vec![0.0; model.num_params()];
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let x1s: Vec<Vec<Token>> = (0..cfg.batch_size).map(|_| dist.sample(&mut rng).0).collect();
        let (loss, mut grad) = model.ce_loss_and_grad(flow, &x1s, cfg.weight, cfg.eps, &mut rng)?;
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
        let lr = cfg.learning_rate;
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in model.params_mut().iter_mut().zip(&grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Momentum { beta } => {
                for ((p, g), v) in model.params_mut().iter_mut().zip(&grad).zip(velocity.iter_mut()) {
                    *v = beta * *v + g;
                    *p -= lr * *v;
                }
            }
        }
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(DfmError::TrainingDiverged { step });
        }
    }
    Ok(TrainOutcome { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::families;

    fn setup() -> (MlpDenoiser, DataDistribution, ConditionalFlow) {
        let flow = ConditionalFlow::uniform(2).unwrap();
        let model = MlpDenoiser::for_flow(&flow, 2, 8, 3).unwrap();
        (model, DataDistribution::Tabular(families::correlated_pair()), flow)
    }

    #[test]
    fn zero_steps_leaves_parameters() {
        let (model, dist, flow) = setup();
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        let out = train(model.clone(), &dist, &flow, &cfg).unwrap();
        assert_eq!(out.model, model);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn same_seed_same_trace() {
        let (model, dist, flow) = setup();
        let cfg = TrainConfig { steps: 30, ..TrainConfig::default() };
        let a = train(model.clone(), &dist, &flow, &cfg).unwrap();
        let b = train(model, &dist, &flow, &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let (model, dist, flow) = setup();
        let cfg = TrainConfig { steps: 500, learning_rate: 1e200, optimizer: Optimizer::Sgd, ..TrainConfig::default() };
        assert!(matches!(train(model, &dist, &flow, &cfg), Err(DfmError::TrainingDiverged { .. })));
    }

    #[test]
    fn point_mass_exact_posterior_has_zero_loss() {
        let dist = families::point_mass(3, vec![2, 0]).unwrap();
        let flow = ConditionalFlow::masking(3).unwrap();
        let exact = super::super::ExactPosterior::new(dist, flow.clone()).unwrap();
        let mut rng = root_rng(1);
        let loss = ce_loss(&exact, &flow, &vec![vec![2, 0]; 50], &mut rng).unwrap();
        assert_eq!(loss, 0.0);
    }
}
