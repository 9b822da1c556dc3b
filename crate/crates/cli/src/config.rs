//! Experiment configuration: one TOML or JSON file, flag overrides on top.

use std::path::{Path, PathBuf};

use dfm::data::{families, TabularDistribution};
use dfm::denoise::TrainConfig;
use dfm::multimodal::{GaussianMixture, JointDataset, Standardization};
use dfm::rng::root_rng;
use dfm::sampler::SamplerConfig;
use dfm::schedule::ConditionalFlow;
use dfm::Token;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowName {
    Masking,
    Uniform,
}

/// Where the data comes from: a named synthetic family or a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    PointMass {
        point: Vec<Token>,
    },
    IidUniform,
    /// Without parameters a random chain is drawn from the seed.
    MarkovChain {
        #[serde(default)]
        initial: Option<Vec<f64>>,
        #[serde(default)]
        transition: Option<Vec<Vec<f64>>>,
    },
    /// Sequences with even token sum.
    Parity,
    StructuredToy,
    CorrelatedPair,
    GaussianMixtureLabeled {
        weights: Vec<f64>,
        means: Vec<f64>,
        sigma: f64,
        #[serde(default = "default_points")]
        n: usize,
    },
    File {
        path: PathBuf,
    },
}

fn default_points() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    #[default]
    Exact,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSpec {
    pub kind: DenoiserKind,
    pub hidden: usize,
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self { kind: DenoiserKind::Exact, hidden: 32, checkpoint: None, train: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Tv,
    Entropy,
    Jumps,
    Elbo,
    Ce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub metrics: Vec<MetricName>,
    /// Trajectories per sampling run.
    pub n_samples: usize,
    /// Monte-Carlo draws for likelihood and cross-entropy estimates.
    pub mc_samples: usize,
    pub sweep_etas: Vec<f64>,
    pub sweep_temperatures: Vec<f64>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            metrics: vec![MetricName::Tv, MetricName::Entropy, MetricName::Jumps],
            n_samples: 1000,
            mc_samples: 10_000,
            sweep_etas: vec![0.0, 15.0],
            sweep_temperatures: vec![0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// The only seed; sampler and trainer seeds are overwritten with it.
    #[serde(default)]
    pub seed: u64,
    pub flow: FlowName,
    /// Data tokens `S`.
    pub size: usize,
    /// Sequence length `D`.
    pub dims: usize,
    pub data: DataSpec,
    #[serde(default)]
    pub denoiser: DenoiserSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
        };
        Ok(cfg)
    }

    /// Propagates the seed and checks the referenced files and basic ranges.
    pub fn finish(mut self) -> Result<Self, CliError> {
        self.sampler.seed = self.seed;
        self.denoiser.train.seed = self.seed;
        if self.size < 2 || self.dims == 0 {
            return Err(CliError::Usage(format!("need size >= 2 and dims >= 1, got S={} D={}", self.size, self.dims)));
        }
        if let DataSpec::File { path } = &self.data {
            if !path.exists() {
                return Err(CliError::Usage(format!("data file {} does not exist", path.display())));
            }
        }
        if let Some(ck) = &self.denoiser.checkpoint {
            if !ck.exists() {
                return Err(CliError::Usage(format!("checkpoint {} does not exist", ck.display())));
            }
        }
        self.sampler.validate()?;
        Ok(self)
    }

    /// SHA-256 of the canonical JSON form (keys sorted, no whitespace).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn flow(&self) -> Result<ConditionalFlow, CliError> {
        Ok(match self.flow {
            FlowName::Masking => ConditionalFlow::masking(self.size)?,
            FlowName::Uniform => ConditionalFlow::uniform(self.size)?,
        })
    }

    pub fn data(&self) -> Result<Data, CliError> {
        resolve_data(&self.data, self.size, self.dims, self.seed)
    }
}

/// Resolved data: a table for token experiments, a mixture for joint ones.
pub enum Data {
    Tabular(TabularDistribution),
    Joint {
        mixture: GaussianMixture,
        dataset: JointDataset,
        /// Set for file data, whose mixture lives in standardized coordinates.
        standardization: Option<Standardization>,
    },
}

impl Data {
    pub fn tabular(&self) -> Option<&TabularDistribution> {
        match self {
            Data::Tabular(t) => Some(t),
            Data::Joint { .. } => None,
        }
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        Ok(match self {
            Data::Tabular(t) => t.to_json()?,
            Data::Joint { dataset, .. } => dataset.to_json()?,
        })
    }
}

pub fn resolve_data(spec: &DataSpec, size: usize, dims: usize, seed: u64) -> Result<Data, CliError> {
    let mut rng = root_rng(seed);
    let joint = |(mixture, dataset, standardization): (GaussianMixture, JointDataset, Option<Standardization>)| {
        if mixture.size != size || mixture.token_dims() != dims {
            return Err(CliError::Incompatible(format!(
                "joint data has S={} and {} token dims, config says S={size} D={dims}",
                mixture.size,
                mixture.token_dims()
            )));
        }
        Ok(Data::Joint { mixture, dataset, standardization })
    };
    let table = match spec {
        DataSpec::PointMass { point } => families::point_mass(size, point.clone())?,
        DataSpec::IidUniform => families::iid_uniform(size, dims)?,
        DataSpec::MarkovChain { initial: Some(init), transition: Some(tr) } => families::markov_chain(init, tr, dims)?,
        DataSpec::MarkovChain { initial: None, transition: None } => families::random_markov_chain(size, dims, &mut rng)?,
        DataSpec::MarkovChain { .. } => {
            return Err(CliError::Usage("markov_chain needs both initial and transition, or neither".into()))
        }
        DataSpec::Parity => families::parity(size, dims)?,
        DataSpec::StructuredToy => families::structured_toy(),
        DataSpec::CorrelatedPair => families::correlated_pair(),
        DataSpec::GaussianMixtureLabeled { weights, means, sigma, n } => {
            let mixture = GaussianMixture::labeled_1d(weights.clone(), means.clone(), *sigma)?;
            let dataset = mixture.dataset(*n, &mut rng);
            return joint((mixture, dataset, None));
        }
        DataSpec::File { path } => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            if let Ok(t) = TabularDistribution::from_json(&text) {
                t
            } else {
                let dataset = JointDataset::from_json(&text)
                    .map_err(|e| CliError::Usage(format!("{} is neither a tabular nor a joint dataset: {e}", path.display())))?;
                let (standard, st) = dataset.standardized();
                return joint((GaussianMixture::empirical(&standard)?, dataset, Some(st)));
            }
        }
    };
    if table.size() != size || table.dims() != dims {
        return Err(CliError::Incompatible(format!(
            "data has S={} D={}, config says S={size} D={dims}",
            table.size(),
            table.dims()
        )));
    }
    Ok(Data::Tabular(table))
}
