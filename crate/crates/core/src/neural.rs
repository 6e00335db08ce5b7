//! Dense feed-forward networks with exact reverse-mode gradients, and the
//! Adam / AdamW optimizers.
//!
//! Networks operate on batches stored as matrices whose columns are
//! samples. Single-vector helpers wrap the batched code.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Multilayer perceptron. Hidden layers use `activation`; the output layer
/// is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layer_sizes: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    activation: Activation,
}

/// Per-layer values recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `acts[0]` is the input batch; `acts[k]` the output of layer `k`.
    acts: Vec<DMatrix<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<DMatrix<f64>>,
}

impl Tape {
    pub fn output(&self) -> &DMatrix<f64> {
        self.acts.last().expect("tape always holds the input")
    }

    pub fn batch_size(&self) -> usize {
        self.acts[0].ncols()
    }
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    /// Flattened in the same order as [`DenseNet::params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.transpose().iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)) && self.biases.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, limit: f64, rng: &mut R) -> DMatrix<f64> {
    // Row-major fill keeps the draw order independent of nalgebra's storage.
    let vals: Vec<f64> = (0..rows * cols).map(|_| if limit > 0.0 { rng.gen_range(-limit..limit) } else { 0.0 }).collect();
    DMatrix::from_row_slice(rows, cols, &vals)
}

impl DenseNet {
    /// Random initialization: Xavier-uniform for tanh and identity nets,
    /// He-uniform for relu nets, zero biases.
    pub fn new<R: Rng>(layer_sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Shape("a network needs at least input and output sizes".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = match activation {
                Activation::Relu => (6.0 / fan_in.max(1) as f64).sqrt(),
                _ => (6.0 / (fan_in + fan_out).max(1) as f64).sqrt(),
            };
            weights.push(uniform_matrix(fan_out, fan_in, limit, rng));
            biases.push(DVector::zeros(fan_out));
        }
        Ok(Self { layer_sizes: layer_sizes.to_vec(), weights, biases, activation })
    }

    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Shape("a network needs at least input and output sizes".into()));
        }
        let weights = layer_sizes.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect();
        let biases = layer_sizes[1..].iter().map(|&n| DVector::zeros(n)).collect();
        Ok(Self { layer_sizes: layer_sizes.to_vec(), weights, biases, activation })
    }

    /// Builds from explicit layers; `weights[k]` is `d_{k+1} x d_k`.
    pub fn from_layers(weights: Vec<DMatrix<f64>>, biases: Vec<DVector<f64>>, activation: Activation) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Shape("weights and biases must be non-empty and equal in number".into()));
        }
        let mut sizes = vec![weights[0].ncols()];
        for (k, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != *sizes.last().unwrap() || b.len() != w.nrows() {
                return Err(Error::Shape(format!("layer {k} is inconsistent with its neighbours")));
            }
            sizes.push(w.nrows());
        }
        Ok(Self { layer_sizes: sizes, weights, biases, activation })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.biases
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().zip(&self.biases).map(|(w, b)| w.len() + b.len()).sum()
    }

    /// Parameters flattened layer by layer: weights row-major, then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.transpose().iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.n_params(), flat.len())));
        }
        let mut i = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (r, c) = w.shape();
            *w = DMatrix::from_row_slice(r, c, &flat[i..i + r * c]);
            i += r * c;
            b.copy_from_slice(&flat[i..i + r]);
            i += r;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite())) && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, rows: usize) -> Result<()> {
        if rows != self.input_dim() {
            return Err(Error::Shape(format!("network expects input of size {}, got {rows}", self.input_dim())));
        }
        Ok(())
    }

    fn affine(&self, k: usize, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weights[k] * a;
        let b = &self.biases[k];
        for mut col in z.column_iter_mut() {
            col += b;
        }
        z
    }

    /// Batched forward pass without recording a tape.
    pub fn predict_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x.nrows())?;
        let last = self.n_layers() - 1;
        let mut a = x.clone();
        for k in 0..self.n_layers() {
            let mut z = self.affine(k, &a);
            if k < last {
                let act = self.activation;
                z.apply(|v| *v = act.apply(*v));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let y = self.predict_batch(&DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok(y.as_slice().to_vec())
    }

    /// Batched forward pass recording what [`DenseNet::backward`] needs.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Tape)> {
        self.check_input(x.nrows())?;
        let last = self.n_layers() - 1;
        let mut acts = Vec::with_capacity(self.n_layers() + 1);
        let mut pre = Vec::with_capacity(self.n_layers());
        acts.push(x.clone());
        for k in 0..self.n_layers() {
            let z = self.affine(k, &acts[k]);
            let a = if k < last {
                let act = self.activation;
                z.map(|v| act.apply(v))
            } else {
                z.clone()
            };
            pre.push(z);
            acts.push(a);
        }
        let y = acts.last().unwrap().clone();
        Ok((y, Tape { acts, pre }))
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let (y, tape) = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok((y.as_slice().to_vec(), tape))
    }

    /// Reverse pass. `upstream` is `dL/dy` for every sample of the taped
    /// batch; parameter gradients are summed over the batch.
    pub fn backward(&self, tape: &Tape, upstream: &DMatrix<f64>) -> Result<(Gradients, DMatrix<f64>)> {
        if tape.acts.len() != self.n_layers() + 1
            || tape.acts.iter().zip(&self.layer_sizes).any(|(a, &d)| a.nrows() != d)
        {
            return Err(Error::Shape("tape does not match this network".into()));
        }
        if upstream.nrows() != self.output_dim() || upstream.ncols() != tape.batch_size() {
            return Err(Error::Shape(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                upstream.nrows(),
                upstream.ncols(),
                self.output_dim(),
                tape.batch_size()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = upstream.clone();
        for k in (0..self.n_layers()).rev() {
            grads.weights[k] = &delta * tape.acts[k].transpose();
            grads.biases[k] = delta.column_sum();
            let mut back = self.weights[k].transpose() * &delta;
            if k > 0 {
                let act = self.activation;
                let (z, a) = (&tape.pre[k - 1], &tape.acts[k]);
                back.zip_zip_apply(z, a, |g, z, a| *g *= act.derivative(z, a));
            }
            delta = back;
        }
        Ok((grads, delta))
    }

    /// Vector-Jacobian product `v^T dy/dx` at `x`.
    pub fn vjp_input(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let (_, tape) = self.forward(x)?;
        let (_, gx) = self.backward(&tape, &DMatrix::from_column_slice(v.len(), 1, v))?;
        Ok(gx.as_slice().to_vec())
    }

    /// Jacobian-vector product `dy/dx v` at `x` (forward mode).
    pub fn jvp_input(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        if v.len() != x.len() {
            return Err(Error::Shape("tangent must match the input size".into()));
        }
        let last = self.n_layers() - 1;
        let mut a = DVector::from_column_slice(x);
        let mut t = DVector::from_column_slice(v);
        for k in 0..self.n_layers() {
            let z = &self.weights[k] * &a + &self.biases[k];
            let mut tz = &self.weights[k] * &t;
            if k < last {
                let act = self.activation;
                let out = z.map(|v| act.apply(v));
                for i in 0..tz.len() {
                    tz[i] *= act.derivative(z[i], out[i]);
                }
                a = out;
            } else {
                a = z;
            }
            t = tz;
        }
        Ok(t.as_slice().to_vec())
    }

    /// Full input Jacobian, `output_dim x input_dim`.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.input_dim();
        let mut jac = DMatrix::zeros(self.output_dim(), n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = self.jvp_input(x, &e)?;
            jac.column_mut(j).copy_from_slice(&col);
        }
        Ok(jac)
    }

    pub fn to_checkpoint(&self) -> NetCheckpoint {
        NetCheckpoint {
            layer_sizes: self.layer_sizes.clone(),
            activation: self.activation,
            weights: self.weights.iter().map(|w| w.transpose().iter().copied().collect()).collect(),
            biases: self.biases.iter().map(|b| b.iter().copied().collect()).collect(),
        }
    }

    pub fn from_checkpoint(c: &NetCheckpoint) -> Result<Self> {
        let sizes = &c.layer_sizes;
        if sizes.len() < 2 || c.weights.len() != sizes.len() - 1 || c.biases.len() != sizes.len() - 1 {
            return Err(Error::Checkpoint("layer count mismatch".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (k, w) in sizes.windows(2).enumerate() {
            if c.weights[k].len() != w[0] * w[1] || c.biases[k].len() != w[1] {
                return Err(Error::Checkpoint(format!("layer {k} has the wrong number of values")));
            }
            weights.push(DMatrix::from_row_slice(w[1], w[0], &c.weights[k]));
            biases.push(DVector::from_column_slice(&c.biases[k]));
        }
        Self::from_layers(weights, biases, c.activation)
    }
}

/// Serialized network: layer sizes and row-major weight matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

/// Adam / AdamW state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptState {
    pub fn adam(lr: f64, n_params: usize) -> Self {
        Self::new(OptimizerKind::Adam, lr, 0.0, n_params)
    }

    pub fn adamw(lr: f64, weight_decay: f64, n_params: usize) -> Self {
        Self::new(OptimizerKind::AdamW, lr, weight_decay, n_params)
    }

    fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, n: usize) -> Self {
        Self { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update in place. AdamW first applies decoupled
    /// weight decay `p *= 1 - lr * wd`. Non-finite gradients reject the
    /// step and leave both parameters and state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = match self.kind {
            OptimizerKind::AdamW => 1.0 - self.lr * self.weight_decay,
            OptimizerKind::Adam => 1.0,
        };
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = params[i] * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_param_grads(net: &DenseNet, x: &DMatrix<f64>, w: &DMatrix<f64>, h: f64) -> Vec<f64> {
        // Loss L = sum(w .* y): its gradient w.r.t. y is w.
        let loss = |n: &DenseNet| n.predict_batch(x).unwrap().component_mul(w).sum();
        let base = net.params();
        let mut probe = net.clone();
        (0..base.len())
            .map(|i| {
                let mut p = base.clone();
                p[i] += h;
                probe.set_params(&p).unwrap();
                let up = loss(&probe);
                p[i] -= 2.0 * h;
                probe.set_params(&p).unwrap();
                let down = loss(&probe);
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1e-3 * scale)).fold(0.0, f64::max)
    }

    #[test]
    fn forward_examples() {
        let z = DenseNet::zeros(&[3, 5, 2], Activation::Tanh).unwrap();
        assert_eq!(z.predict(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);

        let id = DenseNet::from_layers(vec![DMatrix::identity(3, 3)], vec![DVector::zeros(3)], Activation::Tanh).unwrap();
        assert_eq!(id.predict(&[1.0, -2.0, 3.0]).unwrap(), vec![1.0, -2.0, 3.0]);

        let ones = DenseNet::from_layers(
            vec![DMatrix::from_element(2, 1, 1.0), DMatrix::from_element(1, 2, 1.0)],
            vec![DVector::zeros(2), DVector::zeros(1)],
            Activation::Tanh,
        )
        .unwrap();
        assert_eq!(ones.predict(&[0.0]).unwrap(), vec![0.0]);
        // 2 tanh(1) = 1.5231883119115295
        assert!((ones.predict(&[1.0]).unwrap()[0] - 1.5231883119115295).abs() < 1e-12);
        assert!(matches!(ones.predict(&[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNet::new(&[3, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let (_, tape) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (g, gx) = net.backward(&tape, &DMatrix::zeros(2, 1)).unwrap();
        assert!(g.is_zero() && gx.iter().all(|&v| v == 0.0));

        let id = DenseNet::from_layers(vec![DMatrix::identity(2, 2)], vec![DVector::zeros(2)], Activation::Tanh).unwrap();
        let x = [0.5, -1.5];
        let up = [2.0, 3.0];
        let (_, tape) = id.forward(&x).unwrap();
        let (g, gx) = id.backward(&tape, &DMatrix::from_column_slice(2, 1, &up)).unwrap();
        assert_eq!(gx.as_slice(), &up);
        let expected = DMatrix::from_column_slice(2, 1, &up) * DMatrix::from_row_slice(1, 2, &x);
        assert_eq!(g.weights[0], expected);
        assert_eq!(g.biases[0].as_slice(), &up);

        let (_, tape) = id.forward(&x).unwrap();
        assert!(matches!(id.backward(&tape, &DMatrix::zeros(3, 1)), Err(Error::Shape(_))));
        assert!(matches!(net.backward(&tape, &DMatrix::zeros(2, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sizes = [rng.gen_range(1..6), rng.gen_range(2..8), rng.gen_range(2..8), rng.gen_range(1..5)];
            let net = DenseNet::new(&sizes, Activation::Tanh, &mut rng).unwrap();
            let x = DMatrix::from_fn(sizes[0], 3, |_, _| rng.gen_range(-1.0..1.0));
            let w = DMatrix::from_fn(sizes[3], 3, |_, _| rng.gen_range(-1.0..1.0));
            let (_, tape) = net.forward_batch(&x).unwrap();
            let (g, _) = net.backward(&tape, &w).unwrap();
            let fd = fd_param_grads(&net, &x, &w, 1e-5);
            let err = max_rel_err(&g.to_flat(), &fd);
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn gradient_checks_on_larger_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for act in [Activation::Tanh, Activation::Relu] {
            let net = DenseNet::new(&[8, 64, 64, 8], act, &mut rng).unwrap();
            let x = DMatrix::from_fn(8, 2, |_, _| rng.gen_range(-1.0..1.0));
            let w = DMatrix::from_fn(8, 2, |_, _| rng.gen_range(-1.0..1.0));
            let (_, tape) = net.forward_batch(&x).unwrap();
            // Skip relu checks that straddle a kink.
            if act == Activation::Relu && tape.pre.iter().any(|z| z.iter().any(|v| v.abs() < 1e-4)) {
                continue;
            }
            let (g, _) = net.backward(&tape, &w).unwrap();
            let fd = fd_param_grads(&net, &x, &w, 1e-6);
            let tol = if act == Activation::Tanh { 1e-5 } else { 1e-4 };
            let err = max_rel_err(&g.to_flat(), &fd);
            assert!(err < tol, "{act:?}: {err}");
        }
    }

    #[test]
    fn vjp_and_jvp_match_jacobian() {
        let id = DenseNet::from_layers(vec![DMatrix::identity(3, 3)], vec![DVector::zeros(3)], Activation::Tanh).unwrap();
        assert_eq!(id.vjp_input(&[1.0, 2.0, 3.0], &[0.5, 0.25, 2.0]).unwrap(), vec![0.5, 0.25, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = DenseNet::new(&[4, 16, 16, 3], Activation::Tanh, &mut rng).unwrap();
        let x = [0.3, -0.7, 0.1, 0.9];
        assert_eq!(net.vjp_input(&x, &[0.0; 3]).unwrap(), vec![0.0; 4]);
        // Jacobian assembled column by column from n backward passes.
        let mut jac = DMatrix::zeros(3, 4);
        for i in 0..3 {
            let mut e = [0.0; 3];
            e[i] = 1.0;
            let row = net.vjp_input(&x, &e).unwrap();
            jac.row_mut(i).copy_from_slice(&row);
        }
        let v = [1.0, -2.0, 0.5];
        let vjp = net.vjp_input(&x, &v).unwrap();
        let oracle = jac.transpose() * DVector::from_column_slice(&v);
        for (a, b) in vjp.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        let t = [0.2, 0.1, -0.3, 0.4];
        let jvp = net.jvp_input(&x, &t).unwrap();
        let oracle = &jac * DVector::from_column_slice(&t);
        for (a, b) in jvp.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((net.jacobian(&x).unwrap() - jac).amax() < 1e-10);
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = DenseNet::new(&[3, 7, 2], Activation::Relu, &mut rng).unwrap();
        let mut other = DenseNet::zeros(&[3, 7, 2], Activation::Relu).unwrap();
        other.set_params(&net.params()).unwrap();
        assert_eq!(other, net);
        let restored = DenseNet::from_checkpoint(&serde_json::from_str(&serde_json::to_string(&net.to_checkpoint()).unwrap()).unwrap()).unwrap();
        assert_eq!(restored, net);
    }

    #[test]
    fn optimizer_examples() {
        let mut p = vec![1.0, -2.0];
        let mut opt = OptState::adam(0.1, 2);
        opt.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![1.0];
        let mut opt = OptState::adamw(0.01, 0.01, 1);
        opt.step(&mut p, &[0.0]).unwrap();
        assert!((p[0] - 0.9999).abs() < 1e-15);

        assert!(matches!(opt.step(&mut p, &[f64::NAN]), Err(Error::NonFiniteGradient)));
        assert_eq!(opt.steps_taken(), 1);
    }

    /// Textbook scalar Adam, written independently of [`OptState`].
    fn reference_adam(p0: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for t in 1..=steps {
            let g = p;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        p
    }

    #[test]
    fn adam_on_scalar_quadratic() {
        let mut p = vec![1.0];
        let mut opt = OptState::adam(0.1, 1);
        for _ in 0..200 {
            let g = vec![p[0]];
            opt.step(&mut p, &g).unwrap();
        }
        let oracle = reference_adam(1.0, 0.1, 200);
        assert!((p[0] - oracle).abs() < 1e-14);
        assert!(p[0].abs() < 1e-3, "p = {}", p[0]);
    }

    #[test]
    fn adam_descends_on_quadratics() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let a = &m * m.transpose() + DMatrix::identity(n, n) * 0.5;
            let loss = |p: &[f64]| {
                let v = DVector::from_column_slice(p);
                0.5 * (v.transpose() * &a * &v)[(0, 0)]
            };
            let mut p: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut opt = OptState::adam(0.01, n);
            let mut prev = f64::INFINITY;
            for step in 0..300 {
                let g = (&a * DVector::from_column_slice(&p)).as_slice().to_vec();
                opt.step(&mut p, &g).unwrap();
                let l = loss(&p);
                if step >= 10 {
                    assert!(l <= prev + 1e-12, "seed {seed} step {step}: {l} > {prev}");
                }
                prev = l;
            }
        }
    }
}
