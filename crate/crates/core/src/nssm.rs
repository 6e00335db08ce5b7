//! Block neural state-space model:
//! `x0 = f_o(y_{-Np+1..0})`, `x+ = f_x(x) + f_u(u)`, `y = f_y x`.
//!
//! `f_x` and `f_u` are either single linear maps or one-hidden-layer MLPs.
//! Their weight matrices may be stored in soft-SVD form `U diag(s) V` with
//! singular values confined to `[sigma_min, sigma_max]` and an
//! orthogonality penalty on the factors.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Trajectory};
use crate::error::{Error, Result};
use crate::neural::{Activation, DenseNet, NetCheckpoint, OptState};

pub const CHECKPOINT_VERSION: u32 = 1;
const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearMapKind {
    Plain,
    SoftSvd,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Factored matrix `U diag(sigma) V` with bounded singular values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftSvdFactors {
    pub u: DMatrix<f64>,
    /// Unconstrained parameters mapped through a scaled sigmoid.
    pub sigma_params: DVector<f64>,
    pub v: DMatrix<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl SoftSvdFactors {
    pub fn new(u: DMatrix<f64>, sigma_params: DVector<f64>, v: DMatrix<f64>, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        let r = sigma_params.len();
        if u.ncols() != r || v.nrows() != r {
            return Err(Error::Shape("soft-SVD factors must share the inner dimension".into()));
        }
        if !(sigma_min >= 0.0 && sigma_max > sigma_min) {
            return Err(Error::Parameter("need 0 <= sigma_min < sigma_max".into()));
        }
        Ok(Self { u, sigma_params, v, sigma_min, sigma_max })
    }

    /// Random orthonormal factors with singular values in the upper part of the range.
    pub fn random<R: Rng>(rows: usize, cols: usize, sigma_min: f64, sigma_max: f64, rng: &mut R) -> Self {
        let r = rows.min(cols);
        let orth = |n: usize, k: usize, rng: &mut R| {
            let g = DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0));
            g.qr().q().columns(0, k).into_owned()
        };
        let u = orth(rows, r, rng);
        let v = orth(cols, r, rng).transpose();
        let sigma_params = DVector::from_fn(r, |_, _| rng.gen_range(1.0..4.0));
        Self { u, sigma_params, v, sigma_min, sigma_max }
    }

    pub fn rank(&self) -> usize {
        self.sigma_params.len()
    }

    pub fn sigma(&self) -> DVector<f64> {
        self.sigma_params.map(|s| self.sigma_min + (self.sigma_max - self.sigma_min) * sigmoid(s))
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.sigma()) * &self.v
    }

    /// `||U^T U - I||_F^2 + ||V V^T - I||_F^2`.
    pub fn penalty(&self) -> f64 {
        let r = self.rank();
        let eye = DMatrix::<f64>::identity(r, r);
        (self.u.transpose() * &self.u - &eye).norm_squared() + (&self.v * self.v.transpose() - eye).norm_squared()
    }

    fn n_params(&self) -> usize {
        self.u.len() + self.rank() + self.v.len()
    }

    fn params(&self, out: &mut Vec<f64>) {
        out.extend(self.u.transpose().iter());
        out.extend(self.sigma_params.iter());
        out.extend(self.v.transpose().iter());
    }

    fn set_params(&mut self, p: &[f64]) {
        let (nu, r) = (self.u.len(), self.rank());
        self.u = DMatrix::from_row_slice(self.u.nrows(), self.u.ncols(), &p[..nu]);
        self.sigma_params.copy_from_slice(&p[nu..nu + r]);
        self.v = DMatrix::from_row_slice(self.v.nrows(), self.v.ncols(), &p[nu + r..]);
    }

    /// Pulls a gradient on the reconstructed matrix back to the factors and
    /// adds `weight` times the penalty gradient.
    fn factor_grads(&self, dw: &DMatrix<f64>, weight: f64, out: &mut Vec<f64>) {
        let sigma = self.sigma();
        let ds = DMatrix::from_diagonal(&sigma);
        let r = self.rank();
        let eye = DMatrix::<f64>::identity(r, r);
        let du = dw * self.v.transpose() * &ds + &self.u * (self.u.transpose() * &self.u - &eye) * (4.0 * weight);
        let dv = &ds * self.u.transpose() * dw + (&self.v * self.v.transpose() - eye) * &self.v * (4.0 * weight);
        let inner = self.u.transpose() * dw * self.v.transpose();
        let span = self.sigma_max - self.sigma_min;
        out.extend(du.transpose().iter());
        for i in 0..r {
            let sg = sigmoid(self.sigma_params[i]);
            out.push(inner[(i, i)] * span * sg * (1.0 - sg));
        }
        out.extend(dv.transpose().iter());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearMap {
    Plain(DMatrix<f64>),
    SoftSvd(SoftSvdFactors),
}

impl LinearMap {
    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            LinearMap::Plain(w) => w.clone(),
            LinearMap::SoftSvd(f) => f.matrix(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            LinearMap::Plain(w) => w.shape(),
            LinearMap::SoftSvd(f) => (f.u.nrows(), f.v.ncols()),
        }
    }

    pub fn penalty(&self) -> f64 {
        match self {
            LinearMap::Plain(_) => 0.0,
            LinearMap::SoftSvd(f) => f.penalty(),
        }
    }

    fn n_params(&self) -> usize {
        match self {
            LinearMap::Plain(w) => w.len(),
            LinearMap::SoftSvd(f) => f.n_params(),
        }
    }

    fn params(&self, out: &mut Vec<f64>) {
        match self {
            LinearMap::Plain(w) => out.extend(w.transpose().iter()),
            LinearMap::SoftSvd(f) => f.params(out),
        }
    }

    fn set_params(&mut self, p: &[f64]) {
        match self {
            LinearMap::Plain(w) => *w = DMatrix::from_row_slice(w.nrows(), w.ncols(), p),
            LinearMap::SoftSvd(f) => f.set_params(p),
        }
    }

    fn grads(&self, dw: &DMatrix<f64>, penalty_weight: f64, out: &mut Vec<f64>) {
        match self {
            LinearMap::Plain(_) => out.extend(dw.transpose().iter()),
            LinearMap::SoftSvd(f) => f.factor_grads(dw, penalty_weight, out),
        }
    }

    fn new_random<R: Rng>(rows: usize, cols: usize, kind: LinearMapKind, sigma: (f64, f64), rng: &mut R) -> Self {
        match kind {
            LinearMapKind::Plain => {
                let lim = (6.0 / (rows + cols) as f64).sqrt();
                LinearMap::Plain(DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-lim..lim)))
            }
            LinearMapKind::SoftSvd => LinearMap::SoftSvd(SoftSvdFactors::random(rows, cols, sigma.0, sigma.1, rng)),
        }
    }
}

/// `f_x` or `f_u`: one linear map without bias, or `W2 tanh(W1 v + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub maps: Vec<LinearMap>,
    pub biases: Vec<DVector<f64>>,
    pub activation: Activation,
}

struct BlockTape {
    input: DMatrix<f64>,
    hidden: Option<DMatrix<f64>>,
    pre: Option<DMatrix<f64>>,
}

struct BlockGrad {
    dw: Vec<DMatrix<f64>>,
    db: Vec<DVector<f64>>,
}

fn add_bias(mut z: DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    for mut col in z.column_iter_mut() {
        col += b;
    }
    z
}

fn act_deriv(act: Activation, z: f64, a: f64) -> f64 {
    match act {
        Activation::Tanh => 1.0 - a * a,
        Activation::Relu => f64::from(u8::from(z > 0.0)),
        Activation::Identity => 1.0,
    }
}

fn act_apply(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Tanh => z.tanh(),
        Activation::Relu => z.max(0.0),
        Activation::Identity => z,
    }
}

impl Block {
    pub fn linear(map: LinearMap) -> Self {
        Self { maps: vec![map], biases: vec![], activation: Activation::Identity }
    }

    pub fn mlp(first: LinearMap, b1: DVector<f64>, second: LinearMap, b2: DVector<f64>, activation: Activation) -> Result<Self> {
        if first.shape().0 != b1.len() || second.shape().1 != b1.len() || second.shape().0 != b2.len() {
            return Err(Error::Shape("MLP block layers do not chain".into()));
        }
        Ok(Self { maps: vec![first, second], biases: vec![b1, b2], activation })
    }

    fn new_random<R: Rng>(n_in: usize, n_out: usize, kind: BlockKind, map: LinearMapKind, act: Activation, sigma: (f64, f64), rng: &mut R) -> Self {
        match kind {
            BlockKind::Linear => Self::linear(LinearMap::new_random(n_out, n_in, map, sigma, rng)),
            BlockKind::Mlp => Self {
                maps: vec![LinearMap::new_random(n_out, n_in, map, sigma, rng), LinearMap::new_random(n_out, n_out, map, sigma, rng)],
                biases: vec![DVector::zeros(n_out), DVector::zeros(n_out)],
                activation: act,
            },
        }
    }

    pub fn kind(&self) -> BlockKind {
        if self.maps.len() == 1 {
            BlockKind::Linear
        } else {
            BlockKind::Mlp
        }
    }

    pub fn input_dim(&self) -> usize {
        self.maps[0].shape().1
    }

    pub fn output_dim(&self) -> usize {
        self.maps.last().unwrap().shape().0
    }

    pub fn penalty(&self) -> f64 {
        self.maps.iter().map(LinearMap::penalty).sum()
    }

    fn n_params(&self) -> usize {
        self.maps.iter().map(LinearMap::n_params).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn params(&self, out: &mut Vec<f64>) {
        for (i, m) in self.maps.iter().enumerate() {
            m.params(out);
            if let Some(b) = self.biases.get(i) {
                out.extend(b.iter());
            }
        }
    }

    fn set_params(&mut self, p: &[f64]) {
        let mut i = 0;
        for k in 0..self.maps.len() {
            let n = self.maps[k].n_params();
            self.maps[k].set_params(&p[i..i + n]);
            i += n;
            if let Some(b) = self.biases.get_mut(k) {
                let len = b.len();
                b.copy_from_slice(&p[i..i + len]);
                i += len;
            }
        }
    }

    fn weights(&self) -> Vec<DMatrix<f64>> {
        self.maps.iter().map(LinearMap::matrix).collect()
    }

    fn forward(&self, w: &[DMatrix<f64>], v: &DMatrix<f64>, keep: bool) -> (DMatrix<f64>, Option<BlockTape>) {
        if self.maps.len() == 1 {
            let y = &w[0] * v;
            let tape = keep.then(|| BlockTape { input: v.clone(), hidden: None, pre: None });
            return (y, tape);
        }
        let z = add_bias(&w[0] * v, &self.biases[0]);
        let act = self.activation;
        let h = z.map(|s| act_apply(act, s));
        let y = add_bias(&w[1] * &h, &self.biases[1]);
        let tape = keep.then(|| BlockTape { input: v.clone(), hidden: Some(h), pre: Some(z) });
        (y, tape)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    fn backward(&self, w: &[DMatrix<f64>], tape: &BlockTape, ybar: &DMatrix<f64>, g: &mut BlockGrad) -> DMatrix<f64> {
        if self.maps.len() == 1 {
            g.dw[0] += ybar * tape.input.transpose();
            return w[0].transpose() * ybar;
        }
        let (h, z) = (tape.hidden.as_ref().unwrap(), tape.pre.as_ref().unwrap());
        g.dw[1] += ybar * h.transpose();
        g.db[1] += ybar.column_sum();
        let mut zbar = w[1].transpose() * ybar;
        let act = self.activation;
        zbar.zip_zip_apply(z, h, |gz, zz, hh| *gz *= act_deriv(act, zz, hh));
        g.dw[0] += &zbar * tape.input.transpose();
        g.db[0] += zbar.column_sum();
        w[0].transpose() * zbar
    }

    fn zero_grad(&self) -> BlockGrad {
        BlockGrad {
            dw: self.maps.iter().map(|m| DMatrix::zeros(m.shape().0, m.shape().1)).collect(),
            db: self.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    fn flat_grads(&self, g: &BlockGrad, penalty_weight: f64, out: &mut Vec<f64>) {
        for (k, m) in self.maps.iter().enumerate() {
            m.grads(&g.dw[k], penalty_weight, out);
            if let Some(b) = g.db.get(k) {
                out.extend(b.iter());
            }
        }
    }

    /// Single-vector evaluation.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.input_dim() {
            return Err(Error::Shape(format!("block expects {} inputs, got {}", self.input_dim(), v.len())));
        }
        let (y, _) = self.forward(&self.weights(), &DMatrix::from_column_slice(v.len(), 1, v), false);
        Ok(y.as_slice().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NssmConfig {
    /// Latent size is `state_multiplier * n_y`.
    pub state_multiplier: usize,
    /// History rows consumed by the encoder.
    pub n_p: usize,
    pub block: BlockKind,
    pub linear_map: LinearMapKind,
    pub activation: Activation,
    /// Encoder hidden width; defaults to the latent size.
    pub encoder_hidden: Option<usize>,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for NssmConfig {
    fn default() -> Self {
        Self {
            state_multiplier: 10,
            n_p: 1,
            block: BlockKind::Linear,
            linear_map: LinearMapKind::Plain,
            activation: Activation::Tanh,
            encoder_hidden: None,
            sigma_min: 0.1,
            sigma_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NssmModel {
    n_y: usize,
    n_u: usize,
    n_x: usize,
    config: NssmConfig,
    f_o: DenseNet,
    f_x: Block,
    f_u: Option<Block>,
    f_y: DMatrix<f64>,
}

/// Windows of `n_p` history rows followed by `n_steps` predicted rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NssmBatch {
    /// Flattened history, oldest row first: `(n_p * n_y) x B`.
    pub past: DMatrix<f64>,
    /// Input driving step `k` (from row `k - 1` to row `k`), `n_u x B`.
    pub inputs: Vec<DMatrix<f64>>,
    pub targets: Vec<DMatrix<f64>>,
}

impl NssmBatch {
    /// Windows whose first predicted row is each index in `starts`.
    pub fn from_trajectory(tr: &Trajectory, starts: &[usize], n_p: usize, n_steps: usize) -> Result<Self> {
        if n_p == 0 || n_steps == 0 || starts.is_empty() {
            return Err(Error::Parameter("n_p, n_steps and the batch must be non-empty".into()));
        }
        if starts.iter().any(|&s| s < n_p) {
            return Err(Error::Parameter("every window needs n_p history rows".into()));
        }
        let need = starts.iter().max().unwrap() + n_steps;
        if need > tr.len() {
            return Err(Error::TooShort { needed: need, have: tr.len() });
        }
        let (u, y) = (tr.inputs(), tr.outputs());
        let (b, n_y) = (starts.len(), tr.n_y());
        let past = DMatrix::from_fn(n_p * n_y, b, |r, j| y[(starts[j] - n_p + r / n_y, r % n_y)]);
        let gather = |m: &DMatrix<f64>, off: isize| DMatrix::from_fn(m.ncols(), b, |i, j| m[((starts[j] as isize + off) as usize, i)]);
        Ok(Self {
            past,
            inputs: (0..n_steps).map(|k| gather(u, k as isize - 1)).collect(),
            targets: (0..n_steps).map(|k| gather(y, k as isize)).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.past.ncols()
    }

    pub fn n_steps(&self) -> usize {
        self.targets.len()
    }
}

/// Loss terms and their weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub q_dx: f64,
    /// Weight of the soft-SVD orthogonality penalty.
    pub svd_weight: f64,
    /// Per-channel `(min, max)` output bounds.
    pub output_bounds: Option<(Vec<f64>, Vec<f64>)>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { q_dx: 0.0, svd_weight: 1.0, output_bounds: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub reference: f64,
    pub smoothing: f64,
    pub svd_penalty: f64,
    pub bound_penalty: f64,
}

struct Rollout {
    states: Vec<DMatrix<f64>>,
    fx_tapes: Vec<BlockTape>,
    fu_tapes: Vec<BlockTape>,
}

impl NssmModel {
    pub fn new(n_y: usize, n_u: usize, config: NssmConfig, seed: u64) -> Result<Self> {
        if n_y == 0 || config.state_multiplier == 0 || config.n_p == 0 {
            return Err(Error::Parameter("n_y, state multiplier and n_p must be positive".into()));
        }
        if !(config.sigma_min >= 0.0 && config.sigma_max > config.sigma_min) {
            return Err(Error::Parameter("need 0 <= sigma_min < sigma_max".into()));
        }
        let n_x = config.state_multiplier * n_y;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = config.encoder_hidden.unwrap_or(n_x);
        let f_o = DenseNet::new(&[config.n_p * n_y, hidden, n_x], config.activation, &mut rng)?;
        let sigma = (config.sigma_min, config.sigma_max);
        let f_x = Block::new_random(n_x, n_x, config.block, config.linear_map, config.activation, sigma, &mut rng);
        let f_u = (n_u > 0).then(|| Block::new_random(n_u, n_x, config.block, config.linear_map, config.activation, sigma, &mut rng));
        let lim = (6.0 / (n_x + n_y) as f64).sqrt();
        let f_y = DMatrix::from_fn(n_y, n_x, |_, _| rng.gen_range(-lim..lim));
        Ok(Self { n_y, n_u, n_x, config, f_o, f_x, f_u, f_y })
    }

    /// Assembles a model from explicit blocks.
    pub fn from_parts(config: NssmConfig, f_o: DenseNet, f_x: Block, f_u: Option<Block>, f_y: DMatrix<f64>) -> Result<Self> {
        let (n_y, n_x) = f_y.shape();
        let n_u = f_u.as_ref().map_or(0, Block::input_dim);
        if f_o.input_dim() != config.n_p * n_y || f_o.output_dim() != n_x {
            return Err(Error::Shape(format!("encoder must map {} -> {n_x}", config.n_p * n_y)));
        }
        if f_x.input_dim() != n_x || f_x.output_dim() != n_x || f_u.as_ref().is_some_and(|b| b.output_dim() != n_x) {
            return Err(Error::Shape("state and input blocks must map into the latent space".into()));
        }
        if f_u.as_ref().is_some_and(|b| b.kind() != f_x.kind()) {
            return Err(Error::Shape("state and input blocks must share their kind".into()));
        }
        Ok(Self { n_y, n_u, n_x, config, f_o, f_x, f_u, f_y })
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_p(&self) -> usize {
        self.config.n_p
    }

    pub fn config(&self) -> &NssmConfig {
        &self.config
    }

    pub fn state_block(&self) -> &Block {
        &self.f_x
    }

    pub fn input_block(&self) -> Option<&Block> {
        self.f_u.as_ref()
    }

    pub fn decoder(&self) -> &DMatrix<f64> {
        &self.f_y
    }

    pub fn n_params(&self) -> usize {
        self.f_o.n_params() + self.f_x.n_params() + self.f_u.as_ref().map_or(0, Block::n_params) + self.f_y.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.f_o.params();
        self.f_x.params(&mut p);
        if let Some(b) = &self.f_u {
            b.params(&mut p);
        }
        p.extend(self.f_y.transpose().iter());
        p
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.n_params(), flat.len())));
        }
        let mut i = self.f_o.n_params();
        self.f_o.set_params(&flat[..i])?;
        let n = self.f_x.n_params();
        self.f_x.set_params(&flat[i..i + n]);
        i += n;
        if let Some(b) = &mut self.f_u {
            let n = b.n_params();
            b.set_params(&flat[i..i + n]);
            i += n;
        }
        self.f_y = DMatrix::from_row_slice(self.n_y, self.n_x, &flat[i..]);
        Ok(())
    }

    /// Sum of the orthogonality penalties of every soft-SVD map.
    pub fn svd_penalty(&self) -> f64 {
        self.f_x.penalty() + self.f_u.as_ref().map_or(0.0, Block::penalty)
    }

    /// `x0 = f_o(flatten(past))` for an `n_p x n_y` history.
    pub fn encode_history(&self, past: &DMatrix<f64>) -> Result<Vec<f64>> {
        if past.shape() != (self.config.n_p, self.n_y) {
            return Err(Error::Shape(format!("history must be {}x{}", self.config.n_p, self.n_y)));
        }
        let flat: Vec<f64> = past.transpose().iter().copied().collect();
        self.f_o.predict(&flat)
    }

    /// `x+ = f_x(x) + f_u(u)`.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_x || u.len() != self.n_u {
            return Err(Error::Shape(format!("step expects |x|={} and |u|={}", self.n_x, self.n_u)));
        }
        let mut out = self.f_x.apply(x)?;
        if let Some(b) = &self.f_u {
            for (o, v) in out.iter_mut().zip(b.apply(u)?) {
                *o += v;
            }
        }
        Ok(out)
    }

    pub fn decode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_x {
            return Err(Error::Shape(format!("decoder expects {} states", self.n_x)));
        }
        Ok((&self.f_y * DVector::from_column_slice(x)).as_slice().to_vec())
    }

    fn run(&self, x0: DMatrix<f64>, inputs: &[DMatrix<f64>], keep: bool, wx: &[DMatrix<f64>], wu: &[DMatrix<f64>]) -> Result<Rollout> {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        let mut fx_tapes = Vec::new();
        let mut fu_tapes = Vec::new();
        states.push(x0);
        for (k, u) in inputs.iter().enumerate() {
            let (mut next, tx) = self.f_x.forward(wx, states.last().unwrap(), keep);
            if let Some(b) = &self.f_u {
                let (du, tu) = b.forward(wu, u, keep);
                next += du;
                fu_tapes.extend(tu);
            }
            fx_tapes.extend(tx);
            if !next.iter().all(|v| v.is_finite()) || next.amax() > DIVERGENCE_NORM {
                return Err(Error::RolloutDiverged { step: k + 1 });
            }
            states.push(next);
        }
        Ok(Rollout { states, fx_tapes, fu_tapes })
    }

    fn block_weights(&self) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        (self.f_x.weights(), self.f_u.as_ref().map_or_else(Vec::new, Block::weights))
    }

    /// Open-loop rollout: row `k` predicts the output after applying input
    /// row `k`, starting from the state encoded from `past`.
    pub fn rollout(&self, past: &DMatrix<f64>, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if inputs.ncols() != self.n_u {
            return Err(Error::Shape(format!("inputs must have {} columns", self.n_u)));
        }
        let x0 = self.encode_history(past)?;
        let (wx, wu) = self.block_weights();
        let u: Vec<DMatrix<f64>> = (0..inputs.nrows()).map(|k| DMatrix::from_iterator(self.n_u, 1, inputs.row(k).iter().copied())).collect();
        let r = self.run(DMatrix::from_column_slice(self.n_x, 1, &x0), &u, false, &wx, &wu)?;
        let mut y = DMatrix::zeros(inputs.nrows(), self.n_y);
        for k in 0..inputs.nrows() {
            let yk = &self.f_y * &r.states[k + 1];
            y.row_mut(k).copy_from(&yk.transpose());
        }
        Ok(y)
    }

    /// Predicts rows `start..tr.len()` of `tr` from the `n_p` rows before
    /// `start`, without consulting later measurements.
    pub fn forecast_from(&self, tr: &Trajectory, start: usize) -> Result<DMatrix<f64>> {
        let n_p = self.config.n_p;
        if start < n_p || start >= tr.len() {
            return Err(Error::Parameter(format!("forecast start {start} needs {n_p} history rows inside a series of {}", tr.len())));
        }
        let past = tr.outputs().rows(start - n_p, n_p).into_owned();
        let inputs = tr.inputs().rows(start - 1, tr.len() - start).into_owned();
        self.rollout(&past, &inputs)
    }

    fn check_batch(&self, batch: &NssmBatch) -> Result<()> {
        let b = batch.batch_size();
        if batch.past.nrows() != self.config.n_p * self.n_y
            || batch.inputs.len() != batch.targets.len()
            || batch.inputs.iter().any(|u| u.shape() != (self.n_u, b))
            || batch.targets.iter().any(|y| y.shape() != (self.n_y, b))
        {
            return Err(Error::Shape("batch layout does not match the model".into()));
        }
        Ok(())
    }

    /// N-step training loss without gradients.
    pub fn nstep_loss(&self, batch: &NssmBatch, cfg: &LossConfig) -> Result<LossTerms> {
        Ok(self.loss_impl(batch, cfg, false)?.0)
    }

    /// N-step training loss and its gradient, ordered as [`NssmModel::params`].
    pub fn nstep_loss_and_grad(&self, batch: &NssmBatch, cfg: &LossConfig) -> Result<(LossTerms, Vec<f64>)> {
        let (terms, g) = self.loss_impl(batch, cfg, true)?;
        Ok((terms, g.unwrap()))
    }

    fn loss_impl(&self, batch: &NssmBatch, cfg: &LossConfig, grad: bool) -> Result<(LossTerms, Option<Vec<f64>>)> {
        self.check_batch(batch)?;
        if let Some((lo, hi)) = &cfg.output_bounds {
            if lo.len() != self.n_y || hi.len() != self.n_y {
                return Err(Error::Shape("output bounds need one value per channel".into()));
            }
        }
        let (b, s) = (batch.batch_size(), batch.n_steps());
        let (wx, wu) = self.block_weights();
        let (x0, enc_tape) = self.f_o.forward_batch(&batch.past)?;
        let roll = self.run(x0, &batch.inputs, grad, &wx, &wu)?;
        let cnt_y = (s * b * self.n_y) as f64;
        let cnt_x = (s * b * self.n_x) as f64;

        let mut terms = LossTerms::default();
        let mut xbar: Vec<DMatrix<f64>> = vec![DMatrix::zeros(self.n_x, b); s + 1];
        let mut fy_grad = DMatrix::zeros(self.n_y, self.n_x);
        for k in 0..s {
            let x = &roll.states[k + 1];
            let y_hat = &self.f_y * x;
            let r = &y_hat - &batch.targets[k];
            terms.reference += r.norm_squared() / cnt_y;
            let mut ybar = r * (2.0 / cnt_y);
            if let Some((lo, hi)) = &cfg.output_bounds {
                for j in 0..b {
                    for i in 0..self.n_y {
                        let v = y_hat[(i, j)];
                        let over = (v - hi[i]).max(0.0);
                        let under = (lo[i] - v).max(0.0);
                        terms.bound_penalty += (over * over + under * under) / cnt_y;
                        ybar[(i, j)] += 2.0 * (over - under) / cnt_y;
                    }
                }
            }
            if grad {
                fy_grad += &ybar * x.transpose();
                xbar[k + 1] += self.f_y.transpose() * &ybar;
            }
            if cfg.q_dx != 0.0 {
                let d = &roll.states[k + 1] - &roll.states[k];
                terms.smoothing += cfg.q_dx * d.norm_squared() / cnt_x;
                if grad {
                    let g = d * (2.0 * cfg.q_dx / cnt_x);
                    xbar[k + 1] += &g;
                    xbar[k] -= g;
                }
            }
        }
        if self.config.linear_map == LinearMapKind::SoftSvd {
            terms.svd_penalty = cfg.svd_weight * self.svd_penalty();
        }
        terms.total = terms.reference + terms.smoothing + terms.svd_penalty + terms.bound_penalty;
        if !terms.total.is_finite() {
            return Err(Error::RolloutDiverged { step: s });
        }
        if !grad {
            return Ok((terms, None));
        }

        let mut gx = self.f_x.zero_grad();
        let mut gu = self.f_u.as_ref().map(Block::zero_grad);
        for k in (0..s).rev() {
            let up = xbar[k + 1].clone();
            let back = self.f_x.backward(&wx, &roll.fx_tapes[k], &up, &mut gx);
            xbar[k] += back;
            if let (Some(bl), Some(g)) = (&self.f_u, gu.as_mut()) {
                bl.backward(&wu, &roll.fu_tapes[k], &up, g);
            }
        }
        let (enc_grads, _) = self.f_o.backward(&enc_tape, &xbar[0])?;
        let mut flat = enc_grads.to_flat();
        let w = if self.config.linear_map == LinearMapKind::SoftSvd { cfg.svd_weight } else { 0.0 };
        self.f_x.flat_grads(&gx, w, &mut flat);
        if let (Some(bl), Some(g)) = (&self.f_u, &gu) {
            bl.flat_grads(g, w, &mut flat);
        }
        flat.extend(fy_grad.transpose().iter());
        Ok((terms, Some(flat)))
    }

    pub fn to_checkpoint(&self) -> NssmCheckpoint {
        NssmCheckpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            f_o: self.f_o.to_checkpoint(),
            f_x: self.f_x.clone(),
            f_u: self.f_u.clone(),
            f_y: self.f_y.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    pub fn from_checkpoint(c: &NssmCheckpoint) -> Result<Self> {
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", c.version)));
        }
        let rows = c.f_y.len();
        let cols = c.f_y.first().map_or(0, Vec::len);
        if rows == 0 || c.f_y.iter().any(|r| r.len() != cols) {
            return Err(Error::Checkpoint("decoder rows are ragged".into()));
        }
        let f_y = DMatrix::from_fn(rows, cols, |i, j| c.f_y[i][j]);
        Self::from_parts(c.config.clone(), DenseNet::from_checkpoint(&c.f_o)?, c.f_x.clone(), c.f_u.clone(), f_y)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NssmCheckpoint {
    pub version: u32,
    pub config: NssmConfig,
    pub f_o: NetCheckpoint,
    pub f_x: Block,
    pub f_u: Option<Block>,
    pub f_y: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NssmTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub n_steps: usize,
    /// Windows per optimizer step; `None` uses every training window.
    pub batch_size: Option<usize>,
    pub eval_every: usize,
    pub dev_horizon: Option<usize>,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for NssmTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            weight_decay: 0.01,
            epochs: 5000,
            n_steps: 1,
            batch_size: None,
            eval_every: 1,
            dev_horizon: None,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl NssmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.n_steps == 0 || self.eval_every == 0 || self.batch_size == Some(0) {
            return Err(Error::Parameter("epochs, n_steps, eval_every and batch_size must be positive".into()));
        }
        if !(self.loss.q_dx >= 0.0) {
            return Err(Error::Parameter("Q_dx must be non-negative".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        Ok(())
    }
}

pub use crate::node::{EpochRecord, TrainHistory};

/// Bounds from the training range widened by 10% of its span.
pub fn default_output_bounds(train: &Trajectory) -> (Vec<f64>, Vec<f64>) {
    let y = train.outputs();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for c in 0..y.ncols() {
        let col = y.column(c);
        let (mn, mx) = (col.min(), col.max());
        let pad = 0.1 * (mx - mn);
        lo.push(mn - pad);
        hi.push(mx + pad);
    }
    (lo, hi)
}

/// Open-loop MSE over `segment`, using the last rows of `history` to
/// initialize; infinite when the rollout diverges.
pub fn segment_mse(model: &NssmModel, history: &Trajectory, segment: &Trajectory) -> f64 {
    match segment_forecast(model, history, segment) {
        Ok(y) => {
            let m = (y - segment.outputs()).norm_squared() / (segment.len() * segment.n_y()) as f64;
            if m.is_finite() {
                m
            } else {
                f64::INFINITY
            }
        }
        Err(_) => f64::INFINITY,
    }
}

/// Open-loop forecast of every row of `segment` from the end of `history`.
pub fn segment_forecast(model: &NssmModel, history: &Trajectory, segment: &Trajectory) -> Result<DMatrix<f64>> {
    let n_p = model.n_p();
    if history.len() < n_p {
        return Err(Error::TooShort { needed: n_p, have: history.len() });
    }
    let past = history.outputs().rows(history.len() - n_p, n_p).into_owned();
    let mut inputs = DMatrix::zeros(segment.len(), model.n_u());
    if model.n_u() > 0 {
        inputs.row_mut(0).copy_from(&history.inputs().row(history.len() - 1));
        if segment.len() > 1 {
            inputs.rows_mut(1, segment.len() - 1).copy_from(&segment.inputs().rows(0, segment.len() - 1));
        }
    }
    model.rollout(&past, &inputs)
}

/// AdamW on N-step windows from the training third; returns the dev-best
/// model.
pub fn train_nssm(model: &NssmModel, split: &DatasetSplit, cfg: &NssmTrainConfig) -> Result<(NssmModel, TrainHistory)> {
    cfg.validate()?;
    let train = &split.train;
    if train.n_y() != model.n_y || train.n_u() != model.n_u {
        return Err(Error::Shape("data dimensions do not match the model".into()));
    }
    let n_p = model.n_p();
    let first = n_p;
    let last = train.len().checked_sub(cfg.n_steps).filter(|&l| l >= first).ok_or(Error::TooShort { needed: n_p + cfg.n_steps, have: train.len() })?;
    let starts: Vec<usize> = (first..=last).collect();
    let dev = match cfg.dev_horizon {
        Some(h) if h < split.dev.len() => split.dev.slice(0, h.max(1))?,
        _ => split.dev.clone(),
    };
    let full_batch = match cfg.batch_size {
        Some(b) if b < starts.len() => None,
        _ => Some(NssmBatch::from_trajectory(train, &starts, n_p, cfg.n_steps)?),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model.clone();
    let mut params = model.params();
    let mut opt = OptState::adamw(cfg.lr, cfg.weight_decay, params.len());
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let sampled;
        let batch = match &full_batch {
            Some(b) => b,
            None => {
                let mut idx: Vec<usize> = sample(&mut rng, starts.len(), cfg.batch_size.unwrap()).into_iter().map(|i| starts[i]).collect();
                idx.sort_unstable();
                sampled = NssmBatch::from_trajectory(train, &idx, n_p, cfg.n_steps)?;
                &sampled
            }
        };
        let (terms, grads) = match model.nstep_loss_and_grad(batch, &cfg.loss) {
            Ok(v) => v,
            Err(Error::RolloutDiverged { .. }) => return Err(Error::NonFiniteLoss { epoch }),
            Err(e) => return Err(e),
        };
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        opt.step(&mut params, &grads)?;
        model.set_params(&params)?;
        let dev_mse = if epoch == 1 || epoch == cfg.epochs || epoch % cfg.eval_every == 0 {
            let m = segment_mse(&model, train, &dev);
            if m < best.2 {
                best = (model.clone(), epoch, m);
            }
            Some(m)
        } else {
            None
        };
        records.push(EpochRecord { epoch, train_loss: terms.total, dev_mse });
    }
    let (best_model, best_epoch, best_dev_mse) = best;
    let model = if best_epoch == 0 { model } else { best_model };
    Ok((model, TrainHistory { records, best_epoch, best_dev_mse }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_thirds, NormStats};
    use crate::node::{NodeConfig, NodeModel};
    use crate::odeint::SolverConfig;
    use crate::subspace::{lssm_simulate, Lssm, SimMode};
    use crate::systems;

    fn model(block: BlockKind, map: LinearMapKind, n_u: usize, n_p: usize, seed: u64) -> NssmModel {
        let cfg = NssmConfig { state_multiplier: 2, n_p, block, linear_map: map, ..NssmConfig::default() };
        NssmModel::new(2, n_u, cfg, seed).unwrap()
    }

    fn random_batch(m: &NssmModel, b: usize, s: usize, rng: &mut ChaCha8Rng) -> NssmBatch {
        let mut g = |r, c| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        NssmBatch { past: g(m.n_p() * m.n_y(), b), inputs: (0..s).map(|_| g(m.n_u(), b)).collect(), targets: (0..s).map(|_| g(m.n_y(), b)).collect() }
    }

    fn linear_model(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> NssmModel {
        let (n, m, l) = (a.nrows(), b.ncols(), c.nrows());
        let cfg = NssmConfig { state_multiplier: n / l, n_p: 1, ..NssmConfig::default() };
        let enc = DenseNet::from_layers(vec![DMatrix::identity(n, l), DMatrix::identity(n, n)], vec![DVector::zeros(n), DVector::zeros(n)], Activation::Identity).unwrap();
        let f_u = (m > 0).then(|| Block::linear(LinearMap::Plain(b)));
        NssmModel::from_parts(cfg, enc, Block::linear(LinearMap::Plain(a)), f_u, c).unwrap()
    }

    #[test]
    fn encode_examples() {
        let m = model(BlockKind::Mlp, LinearMapKind::Plain, 1, 3, 0);
        let past = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -0.3, 0.5, 0.7, -0.1]);
        let x0 = m.encode_history(&past).unwrap();
        assert_eq!(x0.len(), 4);
        let mut swapped = past.clone();
        swapped.swap_rows(0, 2);
        assert_ne!(m.encode_history(&swapped).unwrap(), x0);
        assert!(m.encode_history(&past.rows(0, 2).into_owned()).is_err());

        let cfg = NssmConfig { state_multiplier: 10, ..NssmConfig::default() };
        let big = NssmModel::new(2, 0, cfg, 0).unwrap();
        assert_eq!(big.encode_history(&DMatrix::zeros(1, 2)).unwrap().len(), 20);
        let mut z = big.clone();
        z.set_params(&vec![0.0; z.n_params()]).unwrap();
        assert_eq!(z.encode_history(&DMatrix::from_element(1, 2, 0.4)).unwrap(), vec![0.0; 20]);
    }

    #[test]
    fn step_and_decode_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-0.5..0.5));
        let b = DMatrix::from_fn(4, 2, |_, _| rng.gen_range(-0.5..0.5));
        let c = DMatrix::from_fn(2, 4, |_, _| rng.gen_range(-0.5..0.5));
        let m = linear_model(a.clone(), b.clone(), c.clone());
        let x = [0.1, 0.2, -0.3, 0.4];
        let u = [0.5, -0.6];
        let want = &a * DVector::from_column_slice(&x) + &b * DVector::from_column_slice(&u);
        assert_eq!(m.step(&x, &u).unwrap(), want.as_slice().to_vec());
        let y = m.decode(&x).unwrap();
        let oracle: Vec<f64> = (0..2).map(|i| (0..4).map(|j| c[(i, j)] * x[j]).sum()).collect();
        for (p, q) in y.iter().zip(oracle) {
            assert!((p - q).abs() < 1e-12);
        }
        let y2 = m.decode(&x.map(|v| 2.0 * v)).unwrap();
        assert!(y2.iter().zip(&y).all(|(p, q)| (p - 2.0 * q).abs() < 1e-15));

        // Additivity: step(x, u) - step(x, 0) does not depend on x.
        let mlp = model(BlockKind::Mlp, LinearMapKind::SoftSvd, 1, 1, 4);
        for _ in 0..100 {
            let x1: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x2: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let u = [rng.gen_range(-1.0..1.0)];
            let d1: Vec<f64> = mlp.step(&x1, &u).unwrap().iter().zip(mlp.step(&x1, &[0.0]).unwrap()).map(|(p, q)| p - q).collect();
            let d2: Vec<f64> = mlp.step(&x2, &u).unwrap().iter().zip(mlp.step(&x2, &[0.0]).unwrap()).map(|(p, q)| p - q).collect();
            assert!(d1.iter().zip(&d2).all(|(p, q)| (p - q).abs() < 1e-12));
        }
    }

    #[test]
    fn rollout_examples() {
        let m = linear_model(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), DMatrix::identity(2, 2));
        let y = m.rollout(&DMatrix::from_row_slice(1, 2, &[0.3, -0.2]), &DMatrix::zeros(15, 1)).unwrap();
        for k in 0..15 {
            assert_eq!(y.row(k).iter().copied().collect::<Vec<_>>(), vec![0.3, -0.2]);
        }
        let m = linear_model(DMatrix::identity(2, 2) * 0.5, DMatrix::zeros(2, 0), DMatrix::identity(2, 2));
        let y = m.rollout(&DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), &DMatrix::zeros(10, 0)).unwrap();
        for k in 0..10 {
            let scale = 0.5f64.powi(k as i32 + 1);
            assert_eq!(y[(k, 0)], scale);
            assert_eq!(y[(k, 1)], 2.0 * scale);
        }
        let m = linear_model(DMatrix::identity(2, 2) * 3.0, DMatrix::zeros(2, 0), DMatrix::identity(2, 2));
        assert!(matches!(m.rollout(&DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), &DMatrix::zeros(40, 0)), Err(Error::RolloutDiverged { .. })));
    }

    #[test]
    fn linear_rollout_matches_lssm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-0.45..0.45));
            let b = DMatrix::from_fn(4, 1, |_, _| rng.gen_range(-1.0..1.0));
            let c = DMatrix::from_fn(2, 4, |_, _| rng.gen_range(-1.0..1.0));
            let m = linear_model(a.clone(), b.clone(), c.clone());
            let past = DMatrix::from_row_slice(1, 2, &[0.4, -0.9]);
            let x0 = m.encode_history(&past).unwrap();
            let u = DMatrix::from_fn(60, 1, |_, _| rng.gen_range(-1.0..1.0));
            let ours = m.rollout(&past, &u).unwrap();
            let lssm = Lssm::new(a, b, c, DMatrix::zeros(4, 2)).unwrap();
            let mut u_ext = DMatrix::zeros(61, 1);
            u_ext.rows_mut(0, 60).copy_from(&u);
            let theirs = lssm_simulate(&lssm, &x0, &u_ext, SimMode::OpenLoop, None).unwrap();
            assert!((ours - theirs.rows(1, 60)).amax() < 1e-10);
        }
    }

    #[test]
    fn euler_consistency_with_node() {
        // dx/dt = A x + B u as a NODE; f_x = I + h A, f_u = h B as an NSSM.
        let a = DMatrix::from_row_slice(2, 2, &[-0.3, 1.0, -1.0, -0.2]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let id = |n| DMatrix::<f64>::identity(n, n);
        let cfg = NodeConfig { activation: Activation::Identity, field_hidden: 3, encoder_hidden: 2, solver: SolverConfig::dopri5(1e-12, 1e-14), ..NodeConfig::default() };
        let enc = DenseNet::from_layers(vec![DMatrix::identity(2, 3), id(2)], vec![DVector::zeros(2), DVector::zeros(2)], Activation::Identity).unwrap();
        // Hidden layer copies [x; u] out of the [x; x0; u] input.
        let mut w1 = DMatrix::zeros(3, 5);
        w1[(0, 0)] = 1.0;
        w1[(1, 1)] = 1.0;
        w1[(2, 4)] = 1.0;
        let mut w2 = DMatrix::zeros(2, 3);
        w2.columns_mut(0, 2).copy_from(&a);
        w2.columns_mut(2, 1).copy_from(&b);
        let field = DenseNet::from_layers(vec![w1, w2], vec![DVector::zeros(3), DVector::zeros(2)], Activation::Identity).unwrap();
        let node = NodeModel::from_parts(2, 1, cfg, enc, field, id(2)).unwrap();
        let y0 = [1.0, -0.5];
        let one_step_gap = |h: f64| {
            let nssm = linear_model(id(2) + &a * h, &b * h, id(2));
            let u = DMatrix::from_element(2, 1, 0.7);
            let exact = node.forecast(&y0, &u, h).unwrap();
            let euler = nssm.rollout(&DMatrix::from_row_slice(1, 2, &y0), &u.rows(0, 1).into_owned()).unwrap();
            (exact.row(1) - euler.row(0)).amax()
        };
        let gaps: Vec<f64> = [0.1, 0.05, 0.025, 0.0125].iter().map(|&h| one_step_gap(h)).collect();
        for w in gaps.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
        }
    }

    #[test]
    fn soft_svd_examples() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let f = SoftSvdFactors::new(eye.clone(), DVector::zeros(2), eye.clone(), 0.1, 1.0).unwrap();
        assert_eq!(f.penalty(), 0.0);
        let sig = f.sigma();
        assert!(sig.iter().all(|&s| (s - 0.55).abs() < 1e-15));
        // U with a duplicated unit column: U^T U - I = [[0,1],[1,0]].
        let dup = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let f = SoftSvdFactors::new(dup, DVector::zeros(2), eye, 0.1, 1.0).unwrap();
        assert_eq!(f.penalty(), 2.0);
        assert!(f.penalty() >= 1.0);
        let extreme = SoftSvdFactors::new(DMatrix::identity(3, 2), DVector::from_vec(vec![-800.0, 800.0]), DMatrix::identity(2, 2), 0.1, 1.0).unwrap();
        let s = extreme.sigma();
        assert!(s[0] >= 0.1 && s[1] <= 1.0);
    }

    #[test]
    fn soft_svd_penalty_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let u = DMatrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
            let v = DMatrix::from_fn(3, 5, |_, _| rng.gen_range(-1.0..1.0));
            let s = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
            let f = SoftSvdFactors::new(u.clone(), s.clone(), v.clone(), 0.1, 1.0).unwrap();
            let perm = [2usize, 0, 1];
            let up = DMatrix::from_fn(4, 3, |r, c| u[(r, perm[c])]);
            let vp = DMatrix::from_fn(3, 5, |r, c| v[(perm[r], c)]);
            let sp = DVector::from_fn(3, |i, _| s[perm[i]]);
            let g = SoftSvdFactors::new(up, sp, vp, 0.1, 1.0).unwrap();
            assert!((f.penalty() - g.penalty()).abs() < 1e-12);
            assert!((f.matrix() - g.matrix()).amax() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = model(BlockKind::Mlp, LinearMapKind::Plain, 1, 2, 6);
        let mut batch = random_batch(&m, 3, 5, &mut rng);
        // Targets generated by the model itself.
        for j in 0..3 {
            let past = DMatrix::from_fn(2, 2, |r, c| batch.past[(r * 2 + c, j)]);
            let u = DMatrix::from_fn(5, 1, |k, _| batch.inputs[k][(0, j)]);
            let y = m.rollout(&past, &u).unwrap();
            for k in 0..5 {
                batch.targets[k].column_mut(j).copy_from(&y.row(k).transpose());
            }
        }
        let terms = m.nstep_loss(&batch, &LossConfig::default()).unwrap();
        assert!(terms.total < 1e-28, "{}", terms.total);

        let hold = linear_model(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), DMatrix::identity(2, 2));
        let b2 = NssmBatch { past: batch.past.rows(0, 2).into_owned(), ..batch.clone() };
        let smooth = hold.nstep_loss(&b2, &LossConfig { q_dx: 0.1, ..LossConfig::default() }).unwrap();
        assert_eq!(smooth.smoothing, 0.0);

        let m = model(BlockKind::Mlp, LinearMapKind::SoftSvd, 1, 2, 7);
        let b = random_batch(&m, 4, 5, &mut rng);
        let l = |q| m.nstep_loss(&b, &LossConfig { q_dx: q, ..LossConfig::default() }).unwrap().total;
        let (l0, l1, l2) = (l(0.0), l(0.1), l(0.2));
        assert!((l2 - l0 - 2.0 * (l1 - l0)).abs() < 1e-12 * l0.abs().max(1.0));
    }

    fn fd_check(m: &NssmModel, batch: &NssmBatch, cfg: &LossConfig) -> f64 {
        let (_, g) = m.nstep_loss_and_grad(batch, cfg).unwrap();
        let base = m.params();
        let mut probe = m.clone();
        let fd: Vec<f64> = (0..base.len())
            .map(|i| {
                let mut p = base.clone();
                p[i] += 1e-6;
                probe.set_params(&p).unwrap();
                let up = probe.nstep_loss(batch, cfg).unwrap().total;
                p[i] -= 2e-6;
                probe.set_params(&p).unwrap();
                let down = probe.nstep_loss(batch, cfg).unwrap().total;
                (up - down) / 2e-6
            })
            .collect();
        let scale = fd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        g.iter().zip(&fd).map(|(a, b)| (a - b).abs() / b.abs().max(1e-3 * scale)).fold(0.0, f64::max)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bounds = Some((vec![-0.2, -0.3], vec![0.2, 0.1]));
        for (i, (block, map)) in [(BlockKind::Linear, LinearMapKind::Plain), (BlockKind::Mlp, LinearMapKind::Plain), (BlockKind::Linear, LinearMapKind::SoftSvd), (BlockKind::Mlp, LinearMapKind::SoftSvd)]
            .into_iter()
            .enumerate()
        {
            for n_u in [0, 2] {
                let m = model(block, map, n_u, 2, i as u64);
                let batch = random_batch(&m, 3, 4, &mut rng);
                let cfg = LossConfig { q_dx: 0.15, svd_weight: 0.7, output_bounds: bounds.clone() };
                let err = fd_check(&m, &batch, &cfg);
                assert!(err < 1e-4, "{block:?} {map:?} n_u={n_u}: {err}");
            }
        }
    }

    #[test]
    fn penalty_training_orthogonalizes_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = DMatrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        let v = DMatrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let mut f = SoftSvdFactors::new(u, DVector::zeros(3), v, 0.1, 1.0).unwrap();
        let mut p = Vec::new();
        f.params(&mut p);
        let mut opt = OptState::adam(0.01, p.len());
        for _ in 0..5000 {
            let mut g = Vec::new();
            f.factor_grads(&DMatrix::zeros(5, 4), 1.0, &mut g);
            opt.step(&mut p, &g).unwrap();
            f.set_params(&p);
            if f.penalty() < 1e-10 {
                break;
            }
        }
        assert!(f.penalty() < 1e-10, "{}", f.penalty());
        let eye = DMatrix::<f64>::identity(3, 3);
        assert!((f.u.transpose() * &f.u - eye).norm() < 1e-3);
        // Singular values of the reconstruction equal sigma once orthogonal.
        let mut sv: Vec<f64> = f.matrix().svd(false, false).singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let mut sig: Vec<f64> = f.sigma().iter().copied().collect();
        sig.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in sv.iter().zip(&sig) {
            assert!((a - b).abs() < 1e-3);
            assert!(*a >= 0.1 - 1e-3 && *a <= 1.0 + 1e-3);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(BlockKind::Mlp, LinearMapKind::SoftSvd, 1, 3, 10);
        let text = serde_json::to_string(&m.to_checkpoint()).unwrap();
        assert_eq!(NssmModel::from_checkpoint(&serde_json::from_str(&text).unwrap()).unwrap(), m);
    }

    fn oscillator_split() -> DatasetSplit {
        let sys = systems::builtin("linear_oscillator").unwrap();
        let tr = systems::generate_default(&sys, 0).unwrap();
        let split = split_thirds(&tr).unwrap();
        let stats = NormStats::fit(&split.train);
        DatasetSplit { train: stats.apply(&split.train).unwrap(), dev: stats.apply(&split.dev).unwrap(), test: stats.apply(&split.test).unwrap() }
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let split = oscillator_split();
        let cfg = NssmConfig { state_multiplier: 1, n_p: 20, block: BlockKind::Linear, linear_map: LinearMapKind::SoftSvd, ..NssmConfig::default() };
        let m = NssmModel::new(3, 0, cfg, 0).unwrap();
        let tc = NssmTrainConfig { lr: 0.01, epochs: 1500, n_steps: 20, eval_every: 50, ..NssmTrainConfig::default() };
        let (a, ha) = train_nssm(&m, &split, &tc).unwrap();
        let first = ha.first_dev_mse().unwrap();
        assert!(ha.best_dev_mse * 10.0 <= first, "first {first}, best {}", ha.best_dev_mse);
        let short = NssmTrainConfig { epochs: 20, ..tc };
        let (b1, h1) = train_nssm(&m, &split, &short).unwrap();
        let (b2, h2) = train_nssm(&m, &split, &short).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(b1, b2);
        assert_ne!(a, b1);
    }
}
