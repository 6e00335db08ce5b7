//! Data-controlled neural ODE with an MLP encoder and a linear decoder.
//!
//! The latent state obeys `dx/dt = f([x; x(t0); u])`, with `u` held constant
//! between samples. Gradients come from the continuous adjoint system or,
//! for cross-checking, from reverse-mode differentiation of fixed-step RK4.
//!
//! Batches are stored as `n x B` matrices whose columns are samples, so a
//! flattened batch state is the column-major data of that matrix.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Trajectory};
use crate::error::{Error, Result};
use crate::neural::{Activation, DenseNet, Gradients, NetCheckpoint, OptState, Tape};
use crate::odeint::{integrate_segments, Method, SolverConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NodeConfig {
    /// Latent size is `latent_multiplier * n_y`.
    pub latent_multiplier: usize,
    pub field_hidden: usize,
    pub encoder_hidden: usize,
    pub activation: Activation,
    /// Feed `u(t)` to the vector field (otherwise only to the encoder).
    pub input_in_field: bool,
    /// Feed absolute time to the vector field.
    pub time_input: bool,
    pub solver: SolverConfig,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            latent_multiplier: 1,
            field_hidden: 32,
            encoder_hidden: 32,
            activation: Activation::Tanh,
            input_in_field: true,
            time_input: false,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeModel {
    n_y: usize,
    n_u: usize,
    n_x: usize,
    config: NodeConfig,
    g_x: DenseNet,
    field: DenseNet,
    g_y: DMatrix<f64>,
}

/// Gradients with respect to every model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeGrads {
    pub g_x: Gradients,
    pub field: Gradients,
    pub g_y: DMatrix<f64>,
}

impl NodeGrads {
    /// Same order as [`NodeModel::params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.g_x.to_flat();
        out.extend(self.field.to_flat());
        out.extend(self.g_y.transpose().iter());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    Adjoint,
    BackpropThroughSolver,
}

/// A batch of equally sampled windows. Node `k` of every window sits at
/// relative time `times[k]`; `inputs[k]` (`n_u x B`) is held on
/// `[times[k], times[k+1])` and `targets[k]` (`n_y x B`) is observed there.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeBatch {
    pub y0: DMatrix<f64>,
    pub inputs: Vec<DMatrix<f64>>,
    pub targets: Vec<DMatrix<f64>>,
    pub times: Vec<f64>,
    /// Absolute start time of each window, used only with `time_input`.
    pub t_start: Vec<f64>,
}

impl NodeBatch {
    /// Windows of `n_steps + 1` consecutive rows starting at each index in
    /// `starts`.
    pub fn from_trajectory(tr: &Trajectory, starts: &[usize], n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Parameter("n_steps must be at least 1".into()));
        }
        if starts.is_empty() {
            return Err(Error::Parameter("batch needs at least one window".into()));
        }
        let need = starts.iter().max().unwrap() + n_steps + 1;
        if need > tr.len() {
            return Err(Error::TooShort { needed: need, have: tr.len() });
        }
        let b = starts.len();
        let (u, y) = (tr.inputs(), tr.outputs());
        let gather = |m: &DMatrix<f64>, k: usize| DMatrix::from_fn(m.ncols(), b, |i, j| m[(starts[j] + k, i)]);
        Ok(Self {
            y0: gather(y, 0),
            inputs: (0..=n_steps).map(|k| gather(u, k)).collect(),
            targets: (0..=n_steps).map(|k| gather(y, k)).collect(),
            times: (0..=n_steps).map(|k| k as f64 * tr.delta()).collect(),
            t_start: starts.iter().map(|&s| tr.time(s)).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.y0.ncols()
    }

    pub fn n_nodes(&self) -> usize {
        self.times.len()
    }
}

/// Forward solution of a batch: latent states at every node.
#[derive(Debug, Clone)]
pub struct NodeForward {
    pub x0: DMatrix<f64>,
    pub states: Vec<DMatrix<f64>>,
}

impl NodeForward {
    pub fn outputs(&self, model: &NodeModel) -> Vec<DMatrix<f64>> {
        self.states.iter().map(|x| &model.g_y * x).collect()
    }
}

fn split_rows(m: &DMatrix<f64>, start: usize, n: usize) -> DMatrix<f64> {
    m.rows(start, n).into_owned()
}

impl NodeModel {
    pub fn new(n_y: usize, n_u: usize, config: NodeConfig, seed: u64) -> Result<Self> {
        if n_y == 0 {
            return Err(Error::Parameter("n_y must be positive".into()));
        }
        if config.latent_multiplier == 0 || config.field_hidden == 0 || config.encoder_hidden == 0 {
            return Err(Error::Parameter("latent multiplier and hidden sizes must be positive".into()));
        }
        config.solver.validate()?;
        let n_x = config.latent_multiplier * n_y;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g_x = DenseNet::new(&[n_y + n_u, config.encoder_hidden, n_x], config.activation, &mut rng)?;
        let d_in = Self::field_input_dim(n_x, n_u, &config);
        let field = DenseNet::new(&[d_in, config.field_hidden, n_x], config.activation, &mut rng)?;
        let dec = DenseNet::new(&[n_x, n_y], Activation::Identity, &mut rng)?;
        let g_y = dec.weights()[0].clone();
        Ok(Self { n_y, n_u, n_x, config, g_x, field, g_y })
    }

    /// Assembles a model from explicit components.
    pub fn from_parts(n_y: usize, n_u: usize, config: NodeConfig, g_x: DenseNet, field: DenseNet, g_y: DMatrix<f64>) -> Result<Self> {
        let n_x = config.latent_multiplier * n_y;
        if g_x.input_dim() != n_y + n_u || g_x.output_dim() != n_x {
            return Err(Error::Shape(format!("encoder must map {} -> {n_x}", n_y + n_u)));
        }
        let d_in = Self::field_input_dim(n_x, n_u, &config);
        if field.input_dim() != d_in || field.output_dim() != n_x || field.n_layers() != 2 {
            return Err(Error::Shape(format!("field must be a one-hidden-layer net {d_in} -> {n_x}")));
        }
        if g_y.shape() != (n_y, n_x) {
            return Err(Error::Shape(format!("decoder must be {n_y}x{n_x}")));
        }
        Ok(Self { n_y, n_u, n_x, config, g_x, field, g_y })
    }

    fn field_input_dim(n_x: usize, n_u: usize, c: &NodeConfig) -> usize {
        2 * n_x + if c.input_in_field { n_u } else { 0 } + usize::from(c.time_input)
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

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn solver(&self) -> &SolverConfig {
        &self.config.solver
    }

    pub fn set_solver(&mut self, solver: SolverConfig) {
        self.config.solver = solver;
    }

    pub fn encoder(&self) -> &DenseNet {
        &self.g_x
    }

    pub fn field(&self) -> &DenseNet {
        &self.field
    }

    pub fn decoder(&self) -> &DMatrix<f64> {
        &self.g_y
    }

    pub fn decoder_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.g_y
    }

    pub fn n_params(&self) -> usize {
        self.g_x.n_params() + self.field.n_params() + self.g_y.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.g_x.params();
        p.extend(self.field.params());
        p.extend(self.g_y.transpose().iter());
        p
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.n_params(), flat.len())));
        }
        let (a, rest) = flat.split_at(self.g_x.n_params());
        let (b, c) = rest.split_at(self.field.n_params());
        self.g_x.set_params(a)?;
        self.field.set_params(b)?;
        self.g_y = DMatrix::from_row_slice(self.n_y, self.n_x, c);
        Ok(())
    }

    /// `x0 = g_x([y0; u0])`. Autonomous models take an empty `u0`.
    pub fn encode(&self, y0: &[f64], u0: &[f64]) -> Result<Vec<f64>> {
        if y0.len() != self.n_y || u0.len() != self.n_u {
            return Err(Error::Shape(format!("encoder expects |y0|={} and |u0|={}", self.n_y, self.n_u)));
        }
        let input: Vec<f64> = y0.iter().chain(u0).copied().collect();
        self.g_x.predict(&input)
    }

    /// Vector field at a single point.
    pub fn field_eval(&self, x: &[f64], x0: &[f64], u: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.n_x || x0.len() != self.n_x || u.len() != self.n_u {
            return Err(Error::Shape(format!("field expects |x|=|x0|={} and |u|={}", self.n_x, self.n_u)));
        }
        let inp = self.field_input(x, &DMatrix::from_column_slice(self.n_x, 1, x0), &DMatrix::from_column_slice(self.n_u, 1, u), t, &[0.0]);
        Ok(self.field.predict_batch(&inp)?.as_slice().to_vec())
    }

    /// Builds the `d_in x B` field input from a flattened batch state.
    fn field_input(&self, x: &[f64], x0: &DMatrix<f64>, u: &DMatrix<f64>, t: f64, t_start: &[f64]) -> DMatrix<f64> {
        let (n, b) = (self.n_x, x0.ncols());
        let d_in = self.field.input_dim();
        let use_u = self.config.input_in_field;
        let mut inp = DMatrix::zeros(d_in, b);
        for j in 0..b {
            let mut col = inp.column_mut(j);
            for i in 0..n {
                col[i] = x[j * n + i];
                col[n + i] = x0[(i, j)];
            }
            let mut r = 2 * n;
            if use_u {
                for i in 0..self.n_u {
                    col[r + i] = u[(i, j)];
                }
                r += self.n_u;
            }
            if self.config.time_input {
                col[r] = t_start[j] + t;
            }
        }
        inp
    }

    fn check_batch(&self, batch: &NodeBatch) -> Result<()> {
        let b = batch.batch_size();
        let n = batch.n_nodes();
        if batch.y0.nrows() != self.n_y || batch.inputs.len() != n || batch.targets.len() != n || batch.t_start.len() != b {
            return Err(Error::Shape("batch layout does not match the model".into()));
        }
        if batch.inputs.iter().any(|u| u.shape() != (self.n_u, b)) || batch.targets.iter().any(|y| y.shape() != (self.n_y, b)) {
            return Err(Error::Shape("batch inputs/targets have the wrong shape".into()));
        }
        if n < 1 {
            return Err(Error::Shape("batch needs at least one node".into()));
        }
        Ok(())
    }

    /// Encodes and integrates a batch with the model's solver.
    pub fn forward(&self, batch: &NodeBatch) -> Result<NodeForward> {
        self.check_batch(batch)?;
        let mut enc_in = DMatrix::zeros(self.n_y + self.n_u, batch.batch_size());
        enc_in.rows_mut(0, self.n_y).copy_from(&batch.y0);
        enc_in.rows_mut(self.n_y, self.n_u).copy_from(&batch.inputs[0]);
        let x0 = self.g_x.predict_batch(&enc_in)?;
        let states = self.integrate_batch(&x0, batch)?;
        Ok(NodeForward { x0, states })
    }

    fn integrate_batch(&self, x0: &DMatrix<f64>, batch: &NodeBatch) -> Result<Vec<DMatrix<f64>>> {
        let (n, b) = (self.n_x, batch.batch_size());
        if batch.n_nodes() == 1 {
            return Ok(vec![x0.clone()]);
        }
        let f = |seg: usize, x: &[f64], t: f64, out: &mut [f64]| {
            let inp = self.field_input(x, x0, &batch.inputs[seg], t, &batch.t_start);
            match self.field.predict_batch(&inp) {
                Ok(d) => out.copy_from_slice(d.as_slice()),
                Err(_) => out.fill(f64::NAN),
            }
        };
        let mut states = Vec::with_capacity(batch.n_nodes());
        integrate_segments(&f, x0.as_slice(), &batch.times, &self.config.solver, |_, x| {
            states.push(DMatrix::from_column_slice(n, b, x));
            Ok(())
        })?;
        Ok(states)
    }

    /// Open-loop forecast from a single initial observation. Row `k` of the
    /// result is the prediction at `t0 + k * delta`; later measurements are
    /// never consulted.
    pub fn forecast(&self, y0: &[f64], inputs: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>> {
        if !(delta > 0.0) {
            return Err(Error::Parameter("delta must be positive".into()));
        }
        if inputs.ncols() != self.n_u || inputs.nrows() == 0 {
            return Err(Error::Shape(format!("inputs must be N x {} with N >= 1", self.n_u)));
        }
        if y0.len() != self.n_y {
            return Err(Error::Shape(format!("y0 must have {} entries", self.n_y)));
        }
        let n = inputs.nrows();
        let batch = NodeBatch {
            y0: DMatrix::from_column_slice(self.n_y, 1, y0),
            inputs: (0..n).map(|k| DMatrix::from_iterator(self.n_u, 1, inputs.row(k).iter().copied())).collect(),
            targets: vec![DMatrix::zeros(self.n_y, 1); n],
            times: (0..n).map(|k| k as f64 * delta).collect(),
            t_start: vec![0.0],
        };
        let fwd = self.forward(&batch)?;
        let mut y = DMatrix::zeros(n, self.n_y);
        for (k, x) in fwd.states.iter().enumerate() {
            let yk = &self.g_y * x;
            y.row_mut(k).copy_from(&yk.transpose());
        }
        Ok(y)
    }

    /// Forecast of a whole trajectory from its first row.
    pub fn forecast_trajectory(&self, tr: &Trajectory) -> Result<DMatrix<f64>> {
        let y0 = tr.output_row(0);
        self.forecast(&y0, tr.inputs(), tr.delta())
    }

    /// Gradients of a loss defined on the predicted outputs. `loss` maps the
    /// outputs at every node to `(L, dL/dy_k)`.
    pub fn gradients<L>(&self, batch: &NodeBatch, method: GradientMethod, loss: L) -> Result<(f64, NodeGrads)>
    where
        L: Fn(&[DMatrix<f64>]) -> (f64, Vec<DMatrix<f64>>),
    {
        self.check_batch(batch)?;
        let mut enc_in = DMatrix::zeros(self.n_y + self.n_u, batch.batch_size());
        enc_in.rows_mut(0, self.n_y).copy_from(&batch.y0);
        enc_in.rows_mut(self.n_y, self.n_u).copy_from(&batch.inputs[0]);
        let (x0, enc_tape) = self.g_x.forward_batch(&enc_in)?;
        let (states, rk4_tapes) = match method {
            GradientMethod::Adjoint => (self.integrate_batch(&x0, batch)?, None),
            GradientMethod::BackpropThroughSolver => {
                let (s, t) = self.rk4_taped(&x0, batch)?;
                (s, Some(t))
            }
        };
        let outputs: Vec<DMatrix<f64>> = states.iter().map(|x| &self.g_y * x).collect();
        let (value, dl_dy) = loss(&outputs);
        if !value.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        let mut g_y = DMatrix::zeros(self.n_y, self.n_x);
        let mut dl_dx = Vec::with_capacity(states.len());
        for (x, d) in states.iter().zip(&dl_dy) {
            g_y += d * x.transpose();
            dl_dx.push(self.g_y.transpose() * d);
        }
        let (field, dx0) = match rk4_tapes {
            None => self.adjoint_pass(&x0, &states, batch, &dl_dx)?,
            Some(t) => self.rk4_reverse(&t, batch, &dl_dx)?,
        };
        let (g_x, _) = self.g_x.backward(&enc_tape, &dx0)?;
        let grads = NodeGrads { g_x, field, g_y };
        if grads.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        Ok((value, grads))
    }

    /// Mean squared output error over all nodes of the batch, including the
    /// reconstruction at the first node, with its gradients.
    pub fn mse_gradients(&self, batch: &NodeBatch, method: GradientMethod) -> Result<(f64, NodeGrads)> {
        let count = (batch.n_nodes() * batch.batch_size() * self.n_y) as f64;
        self.gradients(batch, method, |out| {
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(out.len());
            for (y_hat, y) in out.iter().zip(&batch.targets) {
                let r = y_hat - y;
                loss += r.norm_squared();
                grads.push(r * (2.0 / count));
            }
            (loss / count, grads)
        })
    }

    pub fn mse(&self, batch: &NodeBatch) -> Result<f64> {
        let fwd = self.forward(batch)?;
        let count = (batch.n_nodes() * batch.batch_size() * self.n_y) as f64;
        Ok(fwd.outputs(self).iter().zip(&batch.targets).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / count)
    }

    /// Integrates the adjoint system backward in time. Returns the field
    /// gradient and `dL/dx(t0)` including the data-control path through
    /// the field input.
    fn adjoint_pass(&self, x0: &DMatrix<f64>, states: &[DMatrix<f64>], batch: &NodeBatch, dl_dx: &[DMatrix<f64>]) -> Result<(Gradients, DMatrix<f64>)> {
        let (n, b) = (self.n_x, batch.batch_size());
        let nb = n * b;
        let p = self.field.n_params();
        let last = batch.n_nodes() - 1;
        if last == 0 {
            return Ok((Gradients::zeros_like(&self.field), dl_dx[0].clone()));
        }
        // Reversed time s = -t; segment j of the reversed grid is forward
        // segment last-1-j. Augmented state [x, a, dL/dx0 partial, dL/dtheta].
        let s_grid: Vec<f64> = batch.times.iter().rev().map(|t| -t).collect();
        let f = |j: usize, z: &[f64], s: f64, out: &mut [f64]| {
            let seg = last - 1 - j;
            let (x, a) = (&z[..nb], &z[nb..2 * nb]);
            let inp = self.field_input(x, x0, &batch.inputs[seg], -s, &batch.t_start);
            let Ok((fx, tape)) = self.field.forward_batch(&inp) else {
                out.fill(f64::NAN);
                return;
            };
            let Ok((gp, gin)) = self.field.backward(&tape, &DMatrix::from_column_slice(n, b, a)) else {
                out.fill(f64::NAN);
                return;
            };
            for (o, v) in out[..nb].iter_mut().zip(fx.as_slice()) {
                *o = -v;
            }
            for j in 0..b {
                for i in 0..n {
                    out[nb + j * n + i] = gin[(i, j)];
                    out[2 * nb + j * n + i] = gin[(n + i, j)];
                }
            }
            out[3 * nb..].copy_from_slice(&gp.to_flat());
        };
        let mut z0 = vec![0.0; 3 * nb + p];
        z0[..nb].copy_from_slice(states[last].as_slice());
        let mut z_end = Vec::new();
        integrate_segments(&f, &z0, &s_grid, &self.config.solver, |j, z| {
            let k = last - j;
            // Restore the stored forward state to stop backward drift.
            z[..nb].copy_from_slice(states[k].as_slice());
            for (a, d) in z[nb..2 * nb].iter_mut().zip(dl_dx[k].as_slice()) {
                *a += d;
            }
            if k == 0 {
                z_end = z.to_vec();
            }
            Ok(())
        })?;
        let mut field = Gradients::zeros_like(&self.field);
        let mut tmp = self.field.clone();
        tmp.set_params(&z_end[3 * nb..])?;
        field.weights = tmp.weights().to_vec();
        field.biases = tmp.biases().to_vec();
        let dx0 = DMatrix::from_column_slice(n, b, &z_end[nb..2 * nb]) + DMatrix::from_column_slice(n, b, &z_end[2 * nb..3 * nb]);
        Ok((field, dx0))
    }

    fn rk4_step_size(&self, batch: &NodeBatch) -> f64 {
        self.config.solver.h_init.unwrap_or(batch.times[1] - batch.times[0])
    }

    /// Fixed-step RK4 forward pass that keeps every stage tape.
    fn rk4_taped(&self, x0: &DMatrix<f64>, batch: &NodeBatch) -> Result<(Vec<DMatrix<f64>>, Rk4Record)> {
        let mut states = vec![x0.clone()];
        let mut steps = Vec::new();
        if batch.n_nodes() == 1 {
            return Ok((states, Rk4Record { steps }));
        }
        let h_nom = self.rk4_step_size(batch);
        let mut x = x0.clone();
        for seg in 0..batch.n_nodes() - 1 {
            let (ta, tb) = (batch.times[seg], batch.times[seg + 1]);
            let n_sub = (((tb - ta) / h_nom) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
            let h = (tb - ta) / n_sub as f64;
            for s in 0..n_sub {
                let t = ta + s as f64 * h;
                let mut tapes = Vec::with_capacity(4);
                let mut ks: Vec<DMatrix<f64>> = Vec::with_capacity(4);
                for (c, dt) in [(0.0, 0.0), (0.5, 0.5), (0.5, 0.5), (1.0, 1.0)] {
                    let xs = if ks.is_empty() { x.clone() } else { &x + ks.last().unwrap() * (c * h) };
                    let inp = self.field_input(xs.as_slice(), x0, &batch.inputs[seg], t + dt * h, &batch.t_start);
                    let (k, tape) = self.field.forward_batch(&inp)?;
                    ks.push(k);
                    tapes.push(tape);
                }
                x = &x + (&ks[0] + &ks[1] * 2.0 + &ks[2] * 2.0 + &ks[3]) * (h / 6.0);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence { t: t + h, reason: "non-finite state".into() });
                }
                steps.push(Rk4Taped { seg, h, tapes });
            }
            states.push(x.clone());
        }
        Ok((states, Rk4Record { steps }))
    }

    fn rk4_reverse(&self, rec: &Rk4Record, batch: &NodeBatch, dl_dx: &[DMatrix<f64>]) -> Result<(Gradients, DMatrix<f64>)> {
        let n = self.n_x;
        let mut grads = Gradients::zeros_like(&self.field);
        let last = batch.n_nodes() - 1;
        let mut xbar = dl_dx[last].clone();
        let mut x0bar = DMatrix::zeros(n, batch.batch_size());
        let mut step_idx = rec.steps.len();
        for seg in (0..last).rev() {
            while step_idx > 0 && rec.steps[step_idx - 1].seg == seg {
                step_idx -= 1;
                let st = &rec.steps[step_idx];
                let h = st.h;
                let mut kbar = [&xbar * (h / 6.0), &xbar * (h / 3.0), &xbar * (h / 3.0), &xbar * (h / 6.0)];
                let coeff = [0.5, 0.5, 1.0];
                for stage in (0..4).rev() {
                    let (g, gin) = self.field.backward(&st.tapes[stage], &kbar[stage])?;
                    grads.add_assign(&g);
                    let stage_xbar = split_rows(&gin, 0, n);
                    x0bar += split_rows(&gin, n, n);
                    xbar += &stage_xbar;
                    if stage > 0 {
                        kbar[stage - 1] += &stage_xbar * (coeff[stage - 1] * h);
                    }
                }
            }
            xbar += &dl_dx[seg];
        }
        Ok((grads, xbar + x0bar))
    }

    pub fn to_checkpoint(&self) -> NodeCheckpoint {
        NodeCheckpoint {
            version: CHECKPOINT_VERSION,
            n_y: self.n_y,
            n_u: self.n_u,
            n_x: self.n_x,
            config: self.config.clone(),
            g_x: self.g_x.to_checkpoint(),
            field: self.field.to_checkpoint(),
            g_y: self.g_y.transpose().iter().copied().collect(),
        }
    }

    pub fn from_checkpoint(c: &NodeCheckpoint) -> Result<Self> {
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", c.version)));
        }
        if c.g_y.len() != c.n_y * c.n_x {
            return Err(Error::Checkpoint("decoder has the wrong number of values".into()));
        }
        let g_y = DMatrix::from_row_slice(c.n_y, c.n_x, &c.g_y);
        Self::from_parts(c.n_y, c.n_u, c.config.clone(), DenseNet::from_checkpoint(&c.g_x)?, DenseNet::from_checkpoint(&c.field)?, g_y)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

struct Rk4Taped {
    seg: usize,
    h: f64,
    tapes: Vec<Tape>,
}

struct Rk4Record {
    steps: Vec<Rk4Taped>,
}

/// Versioned model file: network parameters plus dimensions and settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCheckpoint {
    pub version: u32,
    pub n_y: usize,
    pub n_u: usize,
    pub n_x: usize,
    pub config: NodeConfig,
    pub g_x: NetCheckpoint,
    pub field: NetCheckpoint,
    pub g_y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NodeTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub n_p: usize,
    pub n_steps: usize,
    /// Windows per optimizer step; `None` uses every training window.
    pub batch_size: Option<usize>,
    /// Dev forecast every this many epochs (and at the first and last).
    pub eval_every: usize,
    /// Cap on dev rows forecast during training; `None` uses the whole third.
    pub dev_horizon: Option<usize>,
    pub gradient: GradientMethod,
    pub seed: u64,
}

impl Default for NodeTrainConfig {
    fn default() -> Self {
        Self { lr: 0.01, epochs: 100, n_p: 1, n_steps: 1, batch_size: None, eval_every: 1, dev_horizon: None, gradient: GradientMethod::Adjoint, seed: 0 }
    }
}

impl NodeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if self.n_p != 1 {
            return Err(Error::Parameter("the encoder uses a single past observation (n_p = 1)".into()));
        }
        if self.n_steps == 0 || self.eval_every == 0 || self.batch_size == Some(0) {
            return Err(Error::Parameter("n_steps, eval_every and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Dev open-loop MSE on normalized data; `None` when not evaluated.
    pub dev_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_mse: f64,
}

impl TrainHistory {
    pub fn first_dev_mse(&self) -> Option<f64> {
        self.records.iter().find_map(|r| r.dev_mse)
    }
}

/// Open-loop MSE of a forecast, infinite if the forecast fails.
fn dev_score(model: &NodeModel, dev: &Trajectory) -> f64 {
    match model.forecast_trajectory(dev) {
        Ok(y) => {
            let m = (y - dev.outputs()).norm_squared() / (dev.len() * dev.n_y()) as f64;
            if m.is_finite() {
                m
            } else {
                f64::INFINITY
            }
        }
        Err(_) => f64::INFINITY,
    }
}

/// Adam on one-step windows from the training third. Returns the model with
/// the best dev open-loop MSE seen during training.
pub fn train_node(model: &NodeModel, split: &DatasetSplit, cfg: &NodeTrainConfig) -> Result<(NodeModel, TrainHistory)> {
    cfg.validate()?;
    let train = &split.train;
    if train.n_y() != model.n_y || train.n_u() != model.n_u {
        return Err(Error::Shape("data dimensions do not match the model".into()));
    }
    if train.len() < cfg.n_steps + 1 {
        return Err(Error::TooShort { needed: cfg.n_steps + 1, have: train.len() });
    }
    let dev = match cfg.dev_horizon {
        Some(h) if h < split.dev.len() => split.dev.slice(0, h.max(2))?,
        _ => split.dev.clone(),
    };
    let n_windows = train.len() - cfg.n_steps;
    let all: Vec<usize> = (0..n_windows).collect();
    let full_batch = match cfg.batch_size {
        Some(b) if b < n_windows => None,
        _ => Some(NodeBatch::from_trajectory(train, &all, cfg.n_steps)?),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model.clone();
    let mut params = model.params();
    let mut opt = OptState::adam(cfg.lr, params.len());
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let sampled;
        let batch = match &full_batch {
            Some(b) => b,
            None => {
                let mut idx = sample(&mut rng, n_windows, cfg.batch_size.unwrap()).into_vec();
                idx.sort_unstable();
                sampled = NodeBatch::from_trajectory(train, &idx, cfg.n_steps)?;
                &sampled
            }
        };
        let (loss, grads) = match model.mse_gradients(batch, cfg.gradient) {
            Ok(v) => v,
            Err(Error::NonFiniteGradient | Error::Divergence { .. } | Error::NonConvergence { .. }) => {
                return Err(Error::NonFiniteLoss { epoch })
            }
            Err(e) => return Err(e),
        };
        opt.step(&mut params, &grads.to_flat())?;
        model.set_params(&params)?;
        let dev_mse = if epoch == 1 || epoch == cfg.epochs || epoch % cfg.eval_every == 0 {
            let m = dev_score(&model, &dev);
            if m < best.2 {
                best = (model.clone(), epoch, m);
            }
            Some(m)
        } else {
            None
        };
        records.push(EpochRecord { epoch, train_loss: loss, dev_mse });
    }
    let (best_model, best_epoch, best_dev_mse) = best;
    let model = if best_epoch == 0 { model } else { best_model };
    Ok((model, TrainHistory { records, best_epoch, best_dev_mse }))
}

/// Fixed-step configuration used for the backprop-through-solver path.
pub fn rk4_solver(h: f64) -> SolverConfig {
    SolverConfig::fixed(Method::Rk4, h)
}
