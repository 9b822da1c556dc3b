use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{softmax_into, Denoiser, DenoiserOutput};
use crate::error::{DfmError, Result};
use crate::rng::root_rng;
use crate::schedule::ConditionalFlow;
use crate::tokens::Token;

/// Number of sinusoidal time features fed to the network.
pub const TIME_FEATURES: usize = 8;
const TIME_FREQS: [f64; TIME_FEATURES / 2] = [0.5, 1.0, 2.0, 4.0];

/// Layer sizes and token layout of an [`MlpDenoiser`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    /// Data tokens `S`.
    pub size: usize,
    /// States per input dimension (`S + 1` when MASK is present).
    pub base: usize,
    pub dims: usize,
    pub hidden: usize,
    /// Emit a point mass on unmasked input tokens (masking flows).
    pub carry_unmasked: bool,
}

impl MlpShape {
    pub fn for_flow(flow: &ConditionalFlow, dims: usize, hidden: usize) -> Self {
        Self {
            size: flow.alphabet().size(),
            base: flow.alphabet().num_states(),
            dims,
            hidden,
            carry_unmasked: flow.is_masking(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims * self.base + TIME_FEATURES
    }

    pub fn output_dim(&self) -> usize {
        self.dims * self.size
    }

    /// `(rows, cols)` of each weight matrix, input layer first.
    pub fn layers(&self) -> [(usize, usize); 4] {
        let h = self.hidden;
        [(h, self.input_dim()), (h, h), (h, h), (self.output_dim(), h)]
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(r, c)| r * c + r).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.size < 2 || self.base < self.size || self.base > self.size + 1 || self.dims == 0 || self.hidden == 0 {
            return Err(DfmError::Shape(format!("invalid network shape {self:?}")));
        }
        if self.carry_unmasked && self.base != self.size + 1 {
            return Err(DfmError::Shape("carrying unmasked tokens needs a MASK state".into()));
        }
        Ok(())
    }

    fn mask(&self) -> Option<Token> {
        (self.base > self.size).then_some(self.size as Token)
    }
}

pub(crate) fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let mut f = [0.0; TIME_FEATURES];
    for (k, w) in TIME_FREQS.iter().enumerate() {
        f[2 * k] = (PI * w * t).sin();
        f[2 * k + 1] = (PI * w * t).cos();
    }
    f
}

/// One supervised example for the cross-entropy objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub t: f64,
    pub xt: Vec<Token>,
    pub x1: Vec<Token>,
    pub weight: f64,
}

/// Three tanh layers over one-hot tokens and time features, then a `D × S` logit head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    shape: MlpShape,
    params: Vec<f64>,
    temperature: f64,
}

struct Activations {
    h: [Vec<f64>; 3],
    logits: Vec<f64>,
}

impl MlpDenoiser {
    pub fn new(shape: MlpShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = root_rng(seed);
        let mut params = Vec::with_capacity(shape.num_params());
        for (i, (rows, cols)) in shape.layers().into_iter().enumerate() {
            let fan_in = if i == 0 { (shape.dims + TIME_FEATURES) as f64 } else { cols as f64 };
            let scale = if i == 3 { 0.1 } else { 1.0 } / fan_in.sqrt();
            let normal = Normal::new(0.0, scale).expect("finite scale");
            params.extend((0..rows * cols).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, rows));
        }
        Ok(Self { shape, params, temperature: 1.0 })
    }

    pub fn for_flow(flow: &ConditionalFlow, dims: usize, hidden: usize, seed: u64) -> Result<Self> {
        Self::new(MlpShape::for_flow(flow, dims, hidden), seed)
    }

    pub fn shape(&self) -> &MlpShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f64) -> Result<()> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(DfmError::Domain(format!("temperature must be > 0, got {temperature}")));
        }
        self.temperature = temperature;
        Ok(())
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

    fn check_input(&self, xt: &[Token]) -> Result<()> {
        if xt.len() != self.shape.dims {
            return Err(DfmError::Shape(format!("state has {} dimensions, network expects {}", xt.len(), self.shape.dims)));
        }
        if let Some(&bad) = xt.iter().find(|&&k| k as usize >= self.shape.base) {
            return Err(DfmError::InvalidAlphabet(format!("token {bad} outside the network's input alphabet")));
        }
        Ok(())
    }

    fn is_carried(&self, tok: Token) -> bool {
        self.shape.carry_unmasked && Some(tok) != self.shape.mask()
    }

    fn forward(&self, t: f64, xt: &[Token]) -> Activations {
        let p = &self.params;
        let [l0, l1, l2, l3] = self.offsets();
        let base = self.shape.base;
        let tf = time_features(t);
        let in_dim = l0.3;
        let time_col = self.shape.dims * base;

        // The input is one-hot, so the first layer sums selected columns.
        let mut h0 = p[l0.1..l0.1 + l0.2].to_vec();
        for (r, out) in h0.iter_mut().enumerate() {
            let w = &p[l0.0 + r * in_dim..l0.0 + (r + 1) * in_dim];
            let mut z = *out;
            for (d, &k) in xt.iter().enumerate() {
                z += w[d * base + k as usize];
            }
            for (j, f) in tf.iter().enumerate() {
                z += w[time_col + j] * f;
            }
            *out = z.tanh();
        }
        let h1 = dense(p, l1, &h0, true);
        let h2 = dense(p, l2, &h1, true);
        let logits = dense(p, l3, &h2, false);
        Activations { h: [h0, h1, h2], logits }
    }

    /// Raw logits; carried dimensions get `0` on the observed token and `−∞` elsewhere.
    fn raw_logits(&self, t: f64, xt: &[Token]) -> Vec<Vec<f64>> {
        let a = self.forward(t, xt);
        let s = self.shape.size;
        xt.iter()
            .enumerate()
            .map(|(d, &k)| {
                if self.is_carried(k) {
                    (0..s).map(|j| if j == k as usize { 0.0 } else { f64::NEG_INFINITY }).collect()
                } else {
                    a.logits[d * s..(d + 1) * s].to_vec()
                }
            })
            .collect()
    }

    /// Mean weighted cross-entropy over examples and dimensions, and its gradient.
    pub fn loss_and_grad(&self, batch: &[Example]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate(batch, Some(&mut grad))?;
        Ok((loss, grad))
    }

    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        self.accumulate(batch, None)
    }

    fn accumulate(&self, batch: &[Example], mut grad: Option<&mut Vec<f64>>) -> Result<f64> {
        if batch.is_empty() {
            return Err(DfmError::Shape("empty batch".into()));
        }
        let s = self.shape.size;
        let dims = self.shape.dims;
        let norm = 1.0 / (batch.len() * dims) as f64;
        let p = &self.params;
        let [l0, l1, l2, l3] = self.offsets();
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(s);
        for ex in batch {
            self.check_input(&ex.xt)?;
            if ex.x1.len() != dims || ex.x1.iter().any(|&k| k as usize >= s) {
                return Err(DfmError::Shape("clean sample does not match the network".into()));
            }
            let a = self.forward(ex.t, &ex.xt);
            let mut dlogits = vec![0.0; dims * s];
            let mut any = false;
            for d in 0..dims {
                if self.is_carried(ex.xt[d]) {
                    // Prediction is fixed; a mismatch means the example is impossible.
                    if ex.xt[d] != ex.x1[d] {
                        total += f64::INFINITY;
                    }
                    continue;
                }
                probs.clear();
                softmax_into(&a.logits[d * s..(d + 1) * s], 1.0, &mut probs);
                let target = ex.x1[d] as usize;
                total += -ex.weight * probs[target].ln() * norm;
                for k in 0..s {
                    dlogits[d * s + k] = ex.weight * norm * (probs[k] - f64::from(k == target));
                }
                any = true;
            }
            if let (Some(g), true) = (grad.as_deref_mut(), any) {
                let dh2 = dense_backward(p, g, l3, &a.h[2], &dlogits);
                let dz2 = tanh_backward(&a.h[2], dh2);
                let dh1 = dense_backward(p, g, l2, &a.h[1], &dz2);
                let dz1 = tanh_backward(&a.h[1], dh1);
                let dh0 = dense_backward(p, g, l1, &a.h[0], &dz1);
                let dz0 = tanh_backward(&a.h[0], dh0);
                let in_dim = l0.3;
                let base = self.shape.base;
                let time_col = dims * base;
                let tf = time_features(ex.t);
                for (r, &dz) in dz0.iter().enumerate() {
                    let row = l0.0 + r * in_dim;
                    for (d, &k) in ex.xt.iter().enumerate() {
                        g[row + d * base + k as usize] += dz;
                    }
                    for (j, f) in tf.iter().enumerate() {
                        g[row + time_col + j] += dz * f;
                    }
                    g[l0.1 + r] += dz;
                }
            }
        }
        Ok(total)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> MlpCheckpoint {
        let layers = self
            .offsets()
            .iter()
            .map(|&(w, b, rows, cols)| LayerParams {
                rows,
                cols,
                weights: self.params[w..w + rows * cols].to_vec(),
                bias: self.params[b..b + rows].to_vec(),
            })
            .collect();
        MlpCheckpoint {
            shape: self.shape.clone(),
            temperature: self.temperature,
            layers,
            config_hash: config_hash.to_string(),
        }
    }

    pub fn from_checkpoint(ck: &MlpCheckpoint) -> Result<Self> {
        ck.shape.validate()?;
        let expected = ck.shape.layers();
        if ck.layers.len() != expected.len() {
            return Err(DfmError::Shape(format!("checkpoint has {} layers, expected 4", ck.layers.len())));
        }
        let mut params = Vec::with_capacity(ck.shape.num_params());
        for (layer, (rows, cols)) in ck.layers.iter().zip(expected) {
            if layer.rows != rows || layer.cols != cols || layer.weights.len() != rows * cols || layer.bias.len() != rows {
                return Err(DfmError::Shape("checkpoint layer does not match its declared shape".into()));
            }
            params.extend_from_slice(&layer.weights);
            params.extend_from_slice(&layer.bias);
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(DfmError::Shape("checkpoint holds non-finite parameters".into()));
        }
        let mut m = Self { shape: ck.shape.clone(), params, temperature: 1.0 };
        m.set_temperature(ck.temperature)?;
        Ok(m)
    }
}

pub(crate) fn dense(p: &[f64], (w, b, rows, cols): (usize, usize, usize, usize), x: &[f64], act: bool) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            let row = &p[w + r * cols..w + (r + 1) * cols];
            let z = p[b + r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            if act {
                z.tanh()
            } else {
                z
            }
        })
        .collect()
}

/// Accumulates weight and bias gradients; returns the gradient w.r.t. the input.
pub(crate) fn dense_backward(
    p: &[f64],
    g: &mut [f64],
    (w, b, rows, cols): (usize, usize, usize, usize),
    x: &[f64],
    dz: &[f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; cols];
    for r in 0..rows {
        let d = dz[r];
        if d == 0.0 {
            continue;
        }
        g[b + r] += d;
        let gw = &mut g[w + r * cols..w + (r + 1) * cols];
        for (gi, xi) in gw.iter_mut().zip(x) {
            *gi += d * xi;
        }
        let pw = &p[w + r * cols..w + (r + 1) * cols];
        for (dxi, wi) in dx.iter_mut().zip(pw) {
            *dxi += d * wi;
        }
    }
    dx
}

pub(crate) fn tanh_backward(h: &[f64], mut dh: Vec<f64>) -> Vec<f64> {
    for (d, y) in dh.iter_mut().zip(h) {
        *d *= 1.0 - y * y;
    }
    dh
}

impl Denoiser for MlpDenoiser {
    fn size(&self) -> usize {
        self.shape.size
    }

    fn predict(&self, t: f64, xt: &[Token]) -> Result<DenoiserOutput> {
        self.check_input(xt)?;
        let logits = self.raw_logits(t, xt);
        let mut probs = Vec::with_capacity(logits.len() * self.shape.size);
        for row in &logits {
            softmax_into(row, self.temperature, &mut probs);
        }
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(DfmError::InvalidDenoiser("network produced non-finite probabilities".into()));
        }
        Ok(DenoiserOutput::from_flat_unchecked(probs, self.shape.size))
    }

    fn logits(&self, t: f64, xt: &[Token]) -> Result<Vec<Vec<f64>>> {
        self.check_input(xt)?;
        let inv = 1.0 / self.temperature;
        Ok(self
            .raw_logits(t, xt)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v * inv).collect())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Serialized network: shapes, row-major arrays and the hash of the producing config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub shape: MlpShape,
    pub temperature: f64,
    pub layers: Vec<LayerParams>,
    pub config_hash: String,
}

impl MlpCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}


/// Random examples over the network's alphabet, for gradient checks.
pub fn random_examples<R: Rng + ?Sized>(shape: &MlpShape, n: usize, rng: &mut R) -> Vec<Example> {
    (0..n)
        .map(|_| Example {
            t: rng.random_range(0.0..1.0),
            xt: (0..shape.dims).map(|_| rng.random_range(0..shape.base as Token)).collect(),
            x1: (0..shape.dims).map(|_| rng.random_range(0..shape.size as Token)).collect(),
            weight: rng.random_range(0.5..2.0),
        })
        .collect()
}
