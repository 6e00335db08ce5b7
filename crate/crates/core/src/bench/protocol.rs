//! Evaluation protocol: data preparation, per-family training, open-loop
//! scoring and inference timing.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::{nssm_downsample_factor, BenchConfig, Family, Trial, TrialParams};
use crate::data::{downsample, load_csv, split_thirds, DatasetSplit, NormStats, Trajectory};
use crate::error::{Error, Result};
use crate::node::{self, NodeCheckpoint, NodeConfig, NodeModel, NodeTrainConfig};
use crate::nssm::{self, LossConfig, NssmCheckpoint, NssmConfig, NssmModel, NssmTrainConfig};
use crate::subspace::{self, estimate_x0, lssm_simulate, Lssm, LssmJson, SimMode, SubspaceConfig};
use crate::systems;

/// A system's series split into thirds, raw and normalized with training
/// statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemData {
    pub name: String,
    pub raw: DatasetSplit,
    pub stats: NormStats,
    pub norm: DatasetSplit,
}

impl SystemData {
    pub fn from_trajectory(name: &str, tr: &Trajectory) -> Result<Self> {
        let raw = split_thirds(tr)?;
        let stats = NormStats::fit(&raw.train);
        let norm = DatasetSplit { train: stats.apply(&raw.train)?, dev: stats.apply(&raw.dev)?, test: stats.apply(&raw.test)? };
        Ok(Self { name: name.to_string(), raw, stats, norm })
    }

    /// Loads the configured CSV file or runs the emulator.
    pub fn prepare(name: &str, cfg: &BenchConfig) -> Result<Self> {
        let spec = systems::builtin(name)?;
        let tr = match cfg.data_files.get(name) {
            Some(path) => load_csv(path, spec.n_u, spec.n_y)?,
            None => {
                let n = cfg.n_samples.unwrap_or(spec.n_samples);
                systems::generate(&spec, n, spec.delta, &spec.input_policy, cfg.data_seed)?
            }
        };
        Self::from_trajectory(name, &tr)
    }

    /// The full series, thirds concatenated.
    pub fn full(&self) -> Result<Trajectory> {
        let parts = [&self.raw.train, &self.raw.dev, &self.raw.test];
        let times: Vec<f64> = parts.iter().flat_map(|p| p.times().iter().copied()).collect();
        let n: usize = parts.iter().map(|p| p.len()).sum();
        let (n_u, n_y) = (self.raw.train.n_u(), self.raw.train.n_y());
        let mut u = DMatrix::zeros(n, n_u);
        let mut y = DMatrix::zeros(n, n_y);
        let mut row = 0;
        for p in parts {
            u.rows_mut(row, p.len()).copy_from(p.inputs());
            y.rows_mut(row, p.len()).copy_from(p.outputs());
            row += p.len();
        }
        Trajectory::with_times(times, self.raw.train.delta(), u, y)
    }
}

/// `mean((y_hat - y)^2)` over every entry.
pub fn open_loop_mse(y_hat: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if y_hat.shape() != y.shape() || y.is_empty() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", y_hat.shape(), y.shape())));
    }
    Ok((y_hat - y).norm_squared() / y.len() as f64)
}

/// Open-loop predictor of a segment given the series that precedes it.
pub trait Forecaster {
    /// Returns `(prediction, truth)` for `target`, both in raw units. Models
    /// trained on subsampled data predict and score the subsampled rows.
    fn forecast(&self, history: &Trajectory, target: &Trajectory) -> Result<(DMatrix<f64>, DMatrix<f64>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum FamilyModel {
    Node(NodeModel),
    Nssm(NssmModel),
    Lssm { model: Lssm, x0_window: usize },
}

/// A trained model with the preprocessing it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub stats: NormStats,
    pub downsample: usize,
    pub model: FamilyModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelCheckpoint {
    Node(NodeCheckpoint),
    Nssm(NssmCheckpoint),
    Lssm { lssm: LssmJson, x0_window: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedCheckpoint {
    pub stats: NormStats,
    pub downsample: usize,
    pub model: ModelCheckpoint,
}

fn lssm_forecast(model: &Lssm, x0_window: usize, history: &Trajectory, target: &Trajectory) -> Result<DMatrix<f64>> {
    let w = x0_window.min(history.len());
    let hist = history.slice(history.len() - w, history.len())?;
    let (x0, _) = estimate_x0(model, hist.outputs(), hist.inputs())?;
    let mut u = DMatrix::zeros(w + target.len(), model.n_u());
    u.rows_mut(0, w).copy_from(hist.inputs());
    u.rows_mut(w, target.len()).copy_from(target.inputs());
    let y = lssm_simulate(model, &x0, &u, SimMode::OpenLoop, None)?;
    Ok(y.rows(w, target.len()).into_owned())
}

impl TrainedModel {
    pub fn family(&self) -> Family {
        match self.model {
            FamilyModel::Node(_) => Family::Node,
            FamilyModel::Nssm(_) => Family::Nssm,
            FamilyModel::Lssm { .. } => Family::Lssm,
        }
    }

    fn resample(&self, tr: &Trajectory) -> Result<Trajectory> {
        if self.downsample > 1 {
            downsample(tr, self.downsample)
        } else {
            Ok(tr.clone())
        }
    }

    /// Forecast in normalized units.
    pub fn forecast_normalized(&self, history: &Trajectory, target: &Trajectory) -> Result<DMatrix<f64>> {
        match &self.model {
            FamilyModel::Node(m) => m.forecast_trajectory(target),
            FamilyModel::Nssm(m) => nssm::segment_forecast(m, history, target),
            FamilyModel::Lssm { model, x0_window } => lssm_forecast(model, *x0_window, history, target),
        }
    }

    pub fn to_checkpoint(&self) -> TrainedCheckpoint {
        let model = match &self.model {
            FamilyModel::Node(m) => ModelCheckpoint::Node(m.to_checkpoint()),
            FamilyModel::Nssm(m) => ModelCheckpoint::Nssm(m.to_checkpoint()),
            FamilyModel::Lssm { model, x0_window } => ModelCheckpoint::Lssm { lssm: model.to_json(), x0_window: *x0_window },
        };
        TrainedCheckpoint { stats: self.stats.clone(), downsample: self.downsample, model }
    }

    pub fn from_checkpoint(c: &TrainedCheckpoint) -> Result<Self> {
        let model = match &c.model {
            ModelCheckpoint::Node(m) => FamilyModel::Node(NodeModel::from_checkpoint(m)?),
            ModelCheckpoint::Nssm(m) => FamilyModel::Nssm(NssmModel::from_checkpoint(m)?),
            ModelCheckpoint::Lssm { lssm, x0_window } => FamilyModel::Lssm { model: Lssm::from_json(lssm)?, x0_window: *x0_window },
        };
        if c.downsample == 0 {
            return Err(Error::Checkpoint("downsample factor must be positive".into()));
        }
        Ok(Self { stats: c.stats.clone(), downsample: c.downsample, model })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

impl Forecaster for TrainedModel {
    fn forecast(&self, history: &Trajectory, target: &Trajectory) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let history = self.stats.apply(&self.resample(history)?)?;
        let target_raw = self.resample(target)?;
        let target = self.stats.apply(&target_raw)?;
        let pred = self.forecast_normalized(&history, &target)?;
        if !pred.iter().all(|v| v.is_finite()) {
            return Err(Error::RolloutDiverged { step: target.len() });
        }
        Ok((self.stats.denormalize_outputs(&pred), target_raw.outputs().clone()))
    }
}

/// Raw-unit open-loop MSE, `+inf` when the forecast fails or overflows.
pub fn forecast_mse<F: Forecaster + ?Sized>(model: &F, history: &Trajectory, target: &Trajectory) -> f64 {
    match model.forecast(history, target).and_then(|(p, t)| open_loop_mse(&p, &t)) {
        Ok(m) if m.is_finite() => m,
        _ => f64::INFINITY,
    }
}

/// Serializes non-finite MSE values as the string `"inf"`.
mod mse_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid MSE `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub key: String,
    pub system: String,
    pub params: TrialParams,
    pub seed: u64,
    #[serde(with = "mse_serde")]
    pub train_mse: f64,
    #[serde(with = "mse_serde")]
    pub dev_mse: f64,
    #[serde(with = "mse_serde")]
    pub test_mse: f64,
    pub train_seconds: f64,
    pub diverged: bool,
    pub error: Option<String>,
}

impl TrialResult {
    pub fn family(&self) -> Family {
        self.params.family()
    }
}

/// Trains the model of one trial without scoring it.
pub fn train_trial_model(data: &SystemData, trial: &Trial, cfg: &BenchConfig) -> Result<TrainedModel> {
    let (n_u, n_y) = (data.norm.train.n_u(), data.norm.train.n_y());
    match &trial.params {
        &TrialParams::Node { latent_multiplier, field_hidden, encoder_hidden } => {
            let t = &cfg.node;
            let model_cfg = NodeConfig { latent_multiplier, field_hidden, encoder_hidden, solver: t.solver.clone(), ..NodeConfig::default() };
            let model = NodeModel::new(n_y, n_u, model_cfg, trial.seed)?;
            let train_cfg = NodeTrainConfig {
                lr: t.lr,
                epochs: t.epochs,
                n_p: 1,
                n_steps: t.n_steps,
                batch_size: t.batch_size,
                eval_every: t.eval_every,
                dev_horizon: t.dev_horizon,
                gradient: t.gradient,
                seed: trial.seed,
            };
            let (model, _) = node::train_node(&model, &data.norm, &train_cfg)?;
            Ok(TrainedModel { stats: data.stats.clone(), downsample: 1, model: FamilyModel::Node(model) })
        }
        &TrialParams::Nssm { linear_map, block, q_dx, n_steps, state_multiplier } => {
            let t = &cfg.nssm;
            let factor = nssm_downsample_factor(&data.name);
            let split = if factor > 1 {
                DatasetSplit { train: downsample(&data.norm.train, factor)?, dev: downsample(&data.norm.dev, factor)?, test: downsample(&data.norm.test, factor)? }
            } else {
                data.norm.clone()
            };
            let model_cfg = NssmConfig { state_multiplier, n_p: n_steps, block, linear_map, ..NssmConfig::default() };
            let model = NssmModel::new(n_y, n_u, model_cfg, trial.seed)?;
            let loss = LossConfig {
                q_dx,
                svd_weight: t.svd_weight,
                output_bounds: t.output_bounds.then(|| nssm::default_output_bounds(&split.train)),
            };
            let train_cfg = NssmTrainConfig {
                lr: t.lr,
                weight_decay: t.weight_decay,
                epochs: t.epochs,
                n_steps,
                batch_size: t.batch_size,
                eval_every: t.eval_every,
                dev_horizon: t.dev_horizon,
                loss,
                seed: trial.seed,
            };
            let (model, _) = nssm::train_nssm(&model, &split, &train_cfg)?;
            Ok(TrainedModel { stats: data.stats.clone(), downsample: factor, model: FamilyModel::Nssm(model) })
        }
        &TrialParams::Lssm { method, n_x, horizon } => {
            let id = subspace::identify(&data.norm.train, &SubspaceConfig::new(method, n_x, horizon))?;
            let x0_window = cfg.lssm.x0_window.max(id.model.n_x());
            Ok(TrainedModel { stats: data.stats.clone(), downsample: 1, model: FamilyModel::Lssm { model: id.model, x0_window } })
        }
    }
}

/// Open-loop MSE on the training third: NODE from its first row, the other
/// families after a leading window used for initialization.
fn train_score(model: &TrainedModel, data: &SystemData) -> f64 {
    let train = &data.raw.train;
    let lead = match &model.model {
        FamilyModel::Node(_) => return forecast_mse(model, train, train),
        FamilyModel::Nssm(m) => m.n_p() * model.downsample,
        FamilyModel::Lssm { x0_window, .. } => *x0_window,
    };
    if lead + 2 > train.len() {
        return f64::INFINITY;
    }
    match (train.slice(0, lead), train.slice(lead, train.len())) {
        (Ok(h), Ok(t)) => forecast_mse(model, &h, &t),
        _ => f64::INFINITY,
    }
}

/// Raw-unit open-loop MSE on the train, dev and test thirds. Dev is
/// forecast with the train third as history, test with the dev third.
pub fn evaluate_model(model: &TrainedModel, data: &SystemData) -> (f64, f64, f64) {
    (train_score(model, data), forecast_mse(model, &data.raw.train, &data.raw.dev), forecast_mse(model, &data.raw.dev, &data.raw.test))
}

/// Trains one grid point and scores it on every third. Failures become
/// infinite scores with the reason attached.
pub fn run_trial(data: &SystemData, trial: &Trial, cfg: &BenchConfig) -> (TrialResult, Option<TrainedModel>) {
    let start = Instant::now();
    let trained = train_trial_model(data, trial, cfg);
    let train_seconds = start.elapsed().as_secs_f64().max(1e-9);
    let mut result = TrialResult {
        key: trial.key(),
        system: trial.system.clone(),
        params: trial.params.clone(),
        seed: trial.seed,
        train_mse: f64::INFINITY,
        dev_mse: f64::INFINITY,
        test_mse: f64::INFINITY,
        train_seconds,
        diverged: true,
        error: None,
    };
    match trained {
        Ok(model) => {
            (result.train_mse, result.dev_mse, result.test_mse) = evaluate_model(&model, data);
            result.diverged = !(result.dev_mse.is_finite() && result.test_mse.is_finite());
            (result, Some(model))
        }
        Err(e) => {
            result.error = Some(e.to_string());
            (result, None)
        }
    }
}

/// Dev-best trial among `results`; ties go to the smaller key.
pub fn select_best<'a>(results: impl IntoIterator<Item = &'a TrialResult>) -> Option<&'a TrialResult> {
    results
        .into_iter()
        .filter(|r| r.dev_mse.is_finite())
        .min_by(|a, b| a.dev_mse.total_cmp(&b.dev_mse).then_with(|| a.key.cmp(&b.key)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub mean: f64,
    /// Population standard deviation; `None` with fewer than two finite trials.
    pub std: Option<f64>,
    pub finite: usize,
    pub diverged: usize,
}

/// Mean and population std of the finite test MSEs.
pub fn sensitivity<'a>(results: impl IntoIterator<Item = &'a TrialResult>) -> Sensitivity {
    let mut vals = Vec::new();
    let mut diverged = 0;
    for r in results {
        if r.test_mse.is_finite() {
            vals.push(r.test_mse);
        } else {
            diverged += 1;
        }
    }
    let n = vals.len();
    if n == 0 {
        return Sensitivity { mean: f64::NAN, std: None, finite: 0, diverged };
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    let std = (n >= 2).then(|| (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt());
    Sensitivity { mean, std, finite: n, diverged }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTiming {
    pub seconds_per_sample: f64,
    /// Per-repeat seconds per sample, warm-up excluded.
    pub samples: Vec<f64>,
    /// The clock resolution exceeded 1% of a measured interval.
    pub unreliable: bool,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Smallest observable step of the monotonic clock.
fn clock_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..20 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Median over `repeats` timed forecasts of `test` (after one warm-up run)
/// divided by the number of forecast rows. Runs on the calling thread.
pub fn measure_inference<F: Forecaster + ?Sized>(model: &F, history: &Trajectory, test: &Trajectory, repeats: usize) -> Result<InferenceTiming> {
    if repeats < 3 {
        return Err(Error::Parameter("timing needs at least 3 repeats".into()));
    }
    let (warm, _) = model.forecast(history, test)?;
    let rows = warm.nrows().max(1) as f64;
    let resolution = clock_resolution().as_secs_f64();
    let mut samples = Vec::with_capacity(repeats);
    let mut unreliable = false;
    for _ in 0..repeats {
        let t = Instant::now();
        let out = model.forecast(history, test)?;
        let dt = t.elapsed().as_secs_f64();
        std::hint::black_box(out);
        unreliable |= resolution > 0.01 * dt;
        samples.push(dt / rows);
    }
    Ok(InferenceTiming { seconds_per_sample: median(&samples), samples, unreliable })
}
