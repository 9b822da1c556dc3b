use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use dfm::data::{DataDistribution, TabularDistribution};
use dfm::denoise::{
    ce_loss_estimate, train as fit, Denoiser, ExactPosterior, LossWeight, MlpCheckpoint, MlpDenoiser,
};
use dfm::eval::{
    jump_stats_from_counts, masking_elbo, sample_entropy, tv_distance, ElboSource, EvalReport, ELBO_EPS,
};
use dfm::multimodal::{joint_generate_batch, ExactGmmHeads, GenerationMode};
use dfm::rates::RatePlan;
use dfm::rng::substream;
use dfm::sampler::{generate_batch, SamplerConfig};
use dfm::schedule::ConditionalFlow;
use dfm::Token;
use serde::{Deserialize, Serialize};

use crate::config::{resolve_data, Data, DataSpec, DenoiserKind, ExperimentConfig, FlowName, MetricName};
use crate::{
    CliError, Common, EvalArgs, Family, MakeDataArgs, ModeArg, SampleArgs, SamplerOverrides, SweepArgs, TrainArgs,
};

type Result<T> = std::result::Result<T, CliError>;

/// Random stream for Monte-Carlo metrics; trajectory `i` uses stream `i`.
const EVAL_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Serialize, Deserialize)]
struct JumpRecord {
    traj: usize,
    t: f64,
    dim: usize,
    from: Token,
    to: Token,
}

#[derive(Debug, Serialize, Deserialize)]
struct JointRecord {
    coords: Vec<f64>,
    tokens: Vec<Token>,
}

fn load(common: &Common, edit: impl FnOnce(&mut ExperimentConfig)) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    edit(&mut cfg);
    cfg.finish()
}

fn apply_sampler(cfg: &mut ExperimentConfig, o: &SamplerOverrides) {
    let s = &mut cfg.sampler;
    if let Some(v) = o.eta {
        s.eta = v;
    }
    if let Some(v) = o.dt {
        s.dt = v;
    }
    if let Some(v) = o.temperature {
        s.temperature = v;
    }
    if let Some(v) = o.scheme {
        s.scheme = v.into();
    }
    if let Some(v) = o.final_fill {
        s.final_fill = v.into();
    }
    if let Some(ck) = &o.checkpoint {
        cfg.denoiser.kind = DenoiserKind::Mlp;
        cfg.denoiser.checkpoint = Some(ck.clone());
    }
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg.out_dir.join(name))
}

fn need_table<'a>(data: &'a Data, what: &str) -> Result<&'a TabularDistribution> {
    data.tabular().ok_or_else(|| CliError::Incompatible(format!("{what} needs a tabular data distribution")))
}

fn denoiser(cfg: &ExperimentConfig, flow: &ConditionalFlow, table: &TabularDistribution) -> Result<Box<dyn Denoiser>> {
    if cfg.denoiser.kind == DenoiserKind::Exact && cfg.denoiser.checkpoint.is_none() {
        return Ok(Box::new(ExactPosterior::new(table.clone(), flow.clone())?));
    }
    let path = cfg.denoiser.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("checkpoint.json"));
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "no checkpoint at {}; run `dfm train` first or pass --checkpoint",
            path.display()
        )));
    }
    let model = MlpDenoiser::from_checkpoint(&MlpCheckpoint::load(&path)?)?;
    let shape = model.shape();
    if shape.size != cfg.size
        || shape.dims != cfg.dims
        || shape.base != flow.alphabet().num_states()
        || shape.carry_unmasked != flow.is_masking()
    {
        return Err(CliError::Incompatible(format!("checkpoint {} was trained for a different setup", path.display())));
    }
    Ok(Box::new(model))
}

fn parse_matrix(text: &str) -> Result<Vec<Vec<f64>>> {
    text.split(';')
        .map(|row| {
            row.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| CliError::Usage(format!("bad matrix entry {v:?}: {e}"))))
                .collect()
        })
        .collect()
}

pub fn make_data(a: &MakeDataArgs) -> Result<()> {
    let (mut size, mut dims) = (a.size, a.dims);
    let spec = match a.family {
        Family::PointMass => {
            if a.point.is_empty() {
                return Err(CliError::Usage("point_mass needs --point".into()));
            }
            dims = a.point.len();
            DataSpec::PointMass { point: a.point.clone() }
        }
        Family::IidUniform => DataSpec::IidUniform,
        Family::MarkovChain => match (&a.initial[..], &a.transition) {
            ([], None) => DataSpec::MarkovChain { initial: None, transition: None },
            ([_, ..], Some(tr)) => {
                size = a.initial.len();
                DataSpec::MarkovChain { initial: Some(a.initial.clone()), transition: Some(parse_matrix(tr)?) }
            }
            _ => return Err(CliError::Usage("markov_chain needs both --initial and --transition, or neither".into())),
        },
        Family::Parity => DataSpec::Parity,
        Family::StructuredToy => {
            (size, dims) = (4, 3);
            DataSpec::StructuredToy
        }
        Family::CorrelatedPair => {
            (size, dims) = (2, 2);
            DataSpec::CorrelatedPair
        }
        Family::GaussianMixtureLabeled => {
            if a.weights.is_empty() || a.weights.len() != a.means.len() {
                return Err(CliError::Usage("gaussian_mixture_labeled needs --weights and --means of equal length".into()));
            }
            (size, dims) = (a.weights.len().max(2), 1);
            DataSpec::GaussianMixtureLabeled { weights: a.weights.clone(), means: a.means.clone(), sigma: a.sigma, n: a.n }
        }
    };
    let data = resolve_data(&spec, size, dims, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, data.to_json()?)?;
    match &data {
        Data::Tabular(t) => println!(
            "wrote {} entries (S={}, D={}) to {}; content hash {}",
            t.entries().len(),
            t.size(),
            t.dims(),
            a.out.display(),
            t.content_hash()
        ),
        Data::Joint { dataset, .. } => println!("wrote {} joint points to {}", dataset.len(), a.out.display()),
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = load(&a.common, |c| {
        let t = &mut c.denoiser.train;
        if let Some(v) = a.steps {
            t.steps = v;
        }
        if let Some(v) = a.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = a.batch_size {
            t.batch_size = v;
        }
        if let Some(w) = a.weighted {
            t.weight = if w { LossWeight::InverseOneMinusT } else { LossWeight::Unweighted };
        }
    })?;
    let hash = cfg.hash();
    let flow = cfg.flow()?;
    let data = cfg.data()?;
    let table = need_table(&data, "training")?;
    let model = MlpDenoiser::for_flow(&flow, cfg.dims, cfg.denoiser.hidden, cfg.seed)?;
    let outcome = fit(model, &DataDistribution::Tabular(table.clone()), &flow, &cfg.denoiser.train)?;

    outcome.model.to_checkpoint(&hash).save(&out_path(&cfg, "checkpoint.json")?)?;
    let mut w = csv::Writer::from_path(out_path(&cfg, "losses.csv")?)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in outcome.losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;

    let mut report = EvalReport::new(cfg.seed, hash.clone(), outcome.losses.len());
    if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
        let k = outcome.losses.len().min(100);
        let tail = outcome.losses[outcome.losses.len() - k..].iter().sum::<f64>() / k as f64;
        report.insert("initial_loss", *first, None, 1)?;
        report.insert("final_loss", *last, None, 1)?;
        report.insert("final_loss_mean_100", tail, None, k)?;
    }
    std::fs::write(out_path(&cfg, "train_report.json")?, report.to_json()?)?;
    println!(
        "trained {} steps; checkpoint in {}; config hash {hash}",
        outcome.losses.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn joint_mode(mode: ModeArg, condition: &[f64], data: &Data) -> Result<GenerationMode> {
    let Data::Joint { standardization, .. } = data else { unreachable!() };
    Ok(match mode {
        ModeArg::CoGenerate => GenerationMode::CoGenerate,
        ModeArg::FixCoords => {
            let coords = standardization.as_ref().map_or_else(|| condition.to_vec(), |s| s.apply(condition));
            GenerationMode::FixCoordsGenerateTokens { coords }
        }
        ModeArg::FixTokens => {
            let tokens = condition
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as Token)
                    } else {
                        Err(CliError::Usage(format!("token condition {v} is not a token")))
                    }
                })
                .collect::<Result<_>>()?;
            GenerationMode::FixTokensGenerateCoords { tokens }
        }
    })
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    let cfg = load(&a.common, |c| {
        apply_sampler(c, &a.sampler);
        if let Some(n) = a.n {
            c.eval.n_samples = n;
        }
    })?;
    let hash = cfg.hash();
    let flow = cfg.flow()?;
    let data = cfg.data()?;
    let n = cfg.eval.n_samples;
    match &data {
        Data::Tabular(table) => {
            if a.mode != ModeArg::CoGenerate {
                return Err(CliError::Usage("--mode applies to joint data only".into()));
            }
            let den = denoiser(&cfg, &flow, table)?;
            let samples = generate_batch(&RatePlan::minimal(flow), &den, cfg.dims, &cfg.sampler, n)?;
            let tokens: Vec<&Vec<Token>> = samples.iter().map(|s| &s.tokens.0).collect();
            std::fs::write(out_path(&cfg, "samples.json")?, serde_json::to_string(&tokens)?)?;
            let mut w = BufWriter::new(File::create(out_path(&cfg, "trajectories.jsonl")?)?);
            for (traj, s) in samples.iter().enumerate() {
                for j in &s.trajectory.jumps {
                    let rec = JumpRecord { traj, t: j.t, dim: j.dim, from: j.from, to: j.to };
                    serde_json::to_writer(&mut w, &rec)?;
                    w.write_all(b"\n")?;
                }
            }
            w.flush()?;
        }
        Data::Joint { mixture, standardization, .. } => {
            if cfg.flow != FlowName::Masking {
                return Err(CliError::Incompatible("joint generation uses the masking flow for tokens".into()));
            }
            let mode = joint_mode(a.mode, &a.condition, &data)?;
            let heads = ExactGmmHeads::new(mixture.clone());
            let samples = joint_generate_batch(&heads, &mode, &cfg.sampler, n)?;
            let records: Vec<JointRecord> = samples
                .into_iter()
                .map(|s| JointRecord {
                    coords: standardization.as_ref().map_or(s.coords.clone(), |st| st.invert(&s.coords)),
                    tokens: s.tokens,
                })
                .collect();
            std::fs::write(out_path(&cfg, "samples.json")?, serde_json::to_string(&records)?)?;
        }
    }
    println!("wrote {n} samples to {}; seed {}; config hash {hash}", cfg.out_dir.display(), cfg.seed);
    Ok(())
}

fn read_samples(path: &Path) -> Result<Vec<Vec<Token>>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if let Ok(tokens) = serde_json::from_str::<Vec<Vec<Token>>>(&text) {
        return Ok(tokens);
    }
    let joint: Vec<JointRecord> = serde_json::from_str(&text)?;
    Ok(joint.into_iter().map(|r| r.tokens).collect())
}

fn read_jump_counts(path: &Path, n: usize, dims: usize) -> Result<Vec<Vec<usize>>> {
    let mut counts = vec![vec![0usize; dims]; n];
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JumpRecord = serde_json::from_str(&line)?;
        if rec.traj >= n || rec.dim >= dims {
            return Err(CliError::Incompatible(format!("jump record {line} does not match the samples")));
        }
        counts[rec.traj][rec.dim] += 1;
    }
    Ok(counts)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = load(&a.common, |c| {
        if let Some(p) = &a.dataset {
            c.data = DataSpec::File { path: p.clone() };
        }
        if let Some(ck) = &a.checkpoint {
            c.denoiser.kind = DenoiserKind::Mlp;
            c.denoiser.checkpoint = Some(ck.clone());
        }
    })?;
    let hash = cfg.hash();
    let flow = cfg.flow()?;
    let data = cfg.data()?;
    let samples_path = a.samples.clone().unwrap_or_else(|| cfg.out_dir.join("samples.json"));
    let samples = read_samples(&samples_path)?;
    let n = samples.len();
    let mut rng = substream(cfg.seed, EVAL_STREAM);
    let mut report = EvalReport::new(cfg.seed, hash.clone(), n);
    for metric in &cfg.eval.metrics {
        match metric {
            MetricName::Tv => {
                let table = need_table(&data, "tv")?;
                report.insert("tv", tv_distance(&samples, table)?, None, n)?;
            }
            MetricName::Entropy => report.insert("entropy_bits", sample_entropy(&samples)?, None, n)?,
            MetricName::Jumps => {
                let path = a.trajectories.clone().unwrap_or_else(|| cfg.out_dir.join("trajectories.jsonl"));
                if !path.exists() {
                    return Err(CliError::Incompatible(format!("jump statistics need {}", path.display())));
                }
                let stats = jump_stats_from_counts(&read_jump_counts(&path, n, cfg.dims)?)?;
                report.insert("mean_jumps", stats.mean, Some(stats.stderr), stats.n)?;
                report.insert("jumps_variance", stats.variance, None, stats.n)?;
            }
            MetricName::Elbo => {
                let table = need_table(&data, "elbo")?;
                let den = denoiser(&cfg, &flow, table)?;
                let e = masking_elbo(&den, &flow, ElboSource::Table(table), cfg.eval.mc_samples, ELBO_EPS, &mut rng)?;
                report.insert("elbo_bits_per_token", e.bits_per_token, Some(e.stderr), e.n)?;
            }
            MetricName::Ce => {
                let table = need_table(&data, "ce")?;
                let den = denoiser(&cfg, &flow, table)?;
                let x1s: Vec<Vec<Token>> = (0..cfg.eval.mc_samples).map(|_| table.sample(&mut rng).0).collect();
                let ce = ce_loss_estimate(&den, &flow, &x1s, ELBO_EPS, &mut rng)?;
                report.insert("ce_nats", ce.mean, Some(ce.stderr), ce.n)?;
            }
        }
    }
    report.save(&out_path(&cfg, "report.json")?, &out_path(&cfg, "report.csv")?)?;
    for (name, m) in &report.metrics {
        match m.stderr {
            Some(se) => println!("{name}\t{:.6} ± {se:.6}\t(n={})", m.value, m.n),
            None => println!("{name}\t{:.6}\t(n={})", m.value, m.n),
        }
    }
    println!("seed {}; config hash {hash}", cfg.seed);
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    eta: f64,
    temperature: f64,
    tv: f64,
    entropy_bits: f64,
    mean_jumps: f64,
    jumps_stderr: f64,
    n: usize,
}

#[derive(Debug, Serialize)]
struct SweepReport<'a> {
    seed: u64,
    config_hash: &'a str,
    rows: &'a [SweepRow],
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let cfg = load(&a.common, |c| {
        apply_sampler(c, &a.sampler);
        if let Some(v) = &a.etas {
            c.eval.sweep_etas = v.clone();
        }
        if let Some(v) = &a.temperatures {
            c.eval.sweep_temperatures = v.clone();
        }
        if let Some(n) = a.n {
            c.eval.n_samples = n;
        }
    })?;
    let hash = cfg.hash();
    let flow = cfg.flow()?;
    let data = cfg.data()?;
    let table = need_table(&data, "sweep")?;
    let den = denoiser(&cfg, &flow, table)?;
    let plan = RatePlan::minimal(flow);
    let n = cfg.eval.n_samples;
    if n == 0 {
        return Err(CliError::Usage("a sweep needs at least one sample per cell".into()));
    }
    let mut rows = Vec::new();
    for &eta in &cfg.eval.sweep_etas {
        for &temperature in &cfg.eval.sweep_temperatures {
            let sc = SamplerConfig { eta, temperature, record_jumps: false, ..cfg.sampler.clone() };
            sc.validate()?;
            let samples = generate_batch(&plan, &den, cfg.dims, &sc, n)?;
            let tokens: Vec<Vec<Token>> = samples.iter().map(|s| s.tokens.0.clone()).collect();
            let counts: Vec<Vec<usize>> = samples.iter().map(|s| s.trajectory.jump_count_per_dim.clone()).collect();
            let stats = jump_stats_from_counts(&counts)?;
            rows.push(SweepRow {
                eta,
                temperature,
                tv: tv_distance(&tokens, table)?,
                entropy_bits: sample_entropy(&tokens)?,
                mean_jumps: stats.mean,
                jumps_stderr: stats.stderr,
                n,
            });
        }
    }
    let mut w = csv::Writer::from_path(out_path(&cfg, "sweep.csv")?)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let report = SweepReport { seed: cfg.seed, config_hash: &hash, rows: &rows };
    std::fs::write(out_path(&cfg, "sweep.json")?, serde_json::to_string_pretty(&report)?)?;
    println!("eta\ttemp\ttv\tentropy\tjumps");
    for r in &rows {
        println!("{}\t{}\t{:.4}\t{:.4}\t{:.2}", r.eta, r.temperature, r.tv, r.entropy_bits, r.mean_jumps);
    }
    println!("seed {}; config hash {hash}", cfg.seed);
    Ok(())
}
