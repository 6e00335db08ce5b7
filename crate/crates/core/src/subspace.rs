//! Linear state-space identification by subspace methods (N4SID, MOESP,
//! CVA) and simulation of the identified predictor model
//! `x+ = A x + B u + K (y - C x)`, `y = C x`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Trajectory;
use crate::error::{Error, Result};

/// Relative singular-value threshold for numerical rank decisions.
const RANK_RTOL: f64 = 1e-9;
/// Ratio `sigma_n / sigma_1` below which the model is flagged ill-conditioned.
const ILL_RATIO: f64 = 1e-12;
/// A leading singular value within this factor of the median one means
/// there is no dominant subspace.
const FLAT_RATIO: f64 = 10.0;
/// Samples used to fit `B` and `x0`.
const B_FIT_WINDOW: usize = 500;
const DARE_TOL: f64 = 1e-10;
const DARE_MAX_ITER: usize = 10_000;
const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubspaceMethod {
    N4sid,
    Moesp,
    Cva,
}

impl SubspaceMethod {
    pub const ALL: [SubspaceMethod; 3] = [SubspaceMethod::N4sid, SubspaceMethod::Moesp, SubspaceMethod::Cva];

    pub fn name(self) -> &'static str {
        match self {
            SubspaceMethod::N4sid => "n4sid",
            SubspaceMethod::Moesp => "moesp",
            SubspaceMethod::Cva => "cva",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubspaceConfig {
    pub method: SubspaceMethod,
    pub n_x: usize,
    /// Block rows of the future (and past) Hankel matrices.
    pub horizon: usize,
}

impl SubspaceConfig {
    pub fn new(method: SubspaceMethod, n_x: usize, horizon: usize) -> Self {
        Self { method, n_x, horizon }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SubspaceWarning {
    IllConditioned { ratio: f64, reason: String },
    RankReduced { requested: usize, used: usize },
    KalmanFailed(String),
    MinimumNormX0,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lssm {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub k: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identified {
    pub model: Lssm,
    /// Weighted singular values of the projection, descending.
    pub singular_values: Vec<f64>,
    pub warnings: Vec<SubspaceWarning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    OpenLoop,
    Innovation,
}

impl Lssm {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, k: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n || k.nrows() != n || k.ncols() != c.nrows() {
            return Err(Error::Shape("inconsistent state-space dimensions".into()));
        }
        Ok(Self { a, b, c, k })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn spectral_radius(&self) -> f64 {
        if self.n_x() == 0 {
            return 0.0;
        }
        self.a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> LssmJson {
        let rows = |m: &DMatrix<f64>| m.row_iter().map(|r| r.iter().copied().collect()).collect();
        LssmJson { n_x: self.n_x(), n_u: self.n_u(), n_y: self.n_y(), a: rows(&self.a), b: rows(&self.b), c: rows(&self.c), k: rows(&self.k) }
    }

    pub fn from_json(j: &LssmJson) -> Result<Self> {
        let mat = |rows: &Vec<Vec<f64>>, r: usize, c: usize, name: &str| -> Result<DMatrix<f64>> {
            if rows.len() != r || rows.iter().any(|row| row.len() != c) {
                return Err(Error::Checkpoint(format!("matrix {name} must be {r}x{c}")));
            }
            Ok(DMatrix::from_fn(r, c, |i, k| rows[i][k]))
        };
        Self::new(
            mat(&j.a, j.n_x, j.n_x, "a")?,
            mat(&j.b, j.n_x, j.n_u, "b")?,
            mat(&j.c, j.n_y, j.n_x, "c")?,
            mat(&j.k, j.n_x, j.n_y, "k")?,
        )
    }
}

/// Row-major matrix serialization of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LssmJson {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
}

/// Block Hankel matrix: column `j` stacks rows `j..j+rows` of `series`.
pub fn block_hankel(series: &DMatrix<f64>, rows: usize) -> Result<DMatrix<f64>> {
    let (n, d) = series.shape();
    if rows == 0 || rows > n {
        return Err(Error::Parameter(format!("cannot build {rows} block rows from {n} samples")));
    }
    let cols = n - rows + 1;
    Ok(DMatrix::from_fn(rows * d, cols, |r, j| series[(j + r / d, r % d)]))
}

fn pinv(m: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    if m.is_empty() {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = (rtol * smax).max(f64::MIN_POSITIVE);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            out += vt.row(i).transpose() * u.column(i).transpose() / s;
        }
    }
    out
}

/// Least-squares solution of `X M = Y` for `X` (minimum norm).
fn right_solve(y: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    y * pinv(m, 1e-12)
}

/// Sorted SVD returning `(U, sigma, V^T)` with descending singular values.
fn sorted_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = m.clone().svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s: Vec<f64> = idx.iter().map(|&i| svd.singular_values[i]).collect();
    let u = DMatrix::from_fn(u.nrows(), idx.len(), |r, c| u[(r, idx[c])]);
    let vt = DMatrix::from_fn(idx.len(), vt.ncols(), |r, c| vt[(idx[r], c)]);
    (u, s, vt)
}

/// Symmetric PSD matrix power `S^(p)` with eigenvalues floored at
/// `rtol * lambda_max`.
fn sym_power(s: &DMatrix<f64>, p: f64, rtol: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(s.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    let floor = (rtol * lmax).max(f64::MIN_POSITIVE);
    let d = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| l.max(floor).powf(p)));
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Identifies `A, B, C, K` from one input/output record. `D` is zero.
pub fn identify(data: &Trajectory, cfg: &SubspaceConfig) -> Result<Identified> {
    let (m, l) = (data.n_u(), data.n_y());
    let f = cfg.horizon;
    let p = f;
    if f == 0 || cfg.n_x == 0 {
        return Err(Error::Parameter("horizon and n_x must be positive".into()));
    }
    let n_samples = data.len();
    if n_samples < 2 * (f + p) {
        return Err(Error::TooShort { needed: 2 * (f + p), have: n_samples });
    }
    let mut warnings = Vec::new();

    let j = n_samples - f - p + 1;
    let uh = block_hankel(data.inputs(), f + p)?;
    let yh = block_hankel(data.outputs(), f + p)?;
    let up = uh.rows(0, m * p).columns(0, j).into_owned();
    let uf = uh.rows(m * p, m * f).columns(0, j).into_owned();
    let yp = yh.rows(0, l * p).columns(0, j).into_owned();
    let yf = yh.rows(l * p, l * f).columns(0, j).into_owned();

    // H = [Uf; Wp; Yf] = L Q via QR of H^T; projections are computed in the
    // k-dimensional row space of Q.
    let (ru, rw, ry) = (m * f, (m + l) * p, l * f);
    let mut h = DMatrix::zeros(ru + rw + ry, j);
    h.rows_mut(0, ru).copy_from(&uf);
    h.rows_mut(ru, m * p).copy_from(&up);
    h.rows_mut(ru + m * p, l * p).copy_from(&yp);
    h.rows_mut(ru + rw, ry).copy_from(&yf);
    let scale = h.amax().max(f64::MIN_POSITIVE);
    let qr = (h.transpose() / scale).qr();
    let q = qr.q();
    let lmat = qr.r().transpose() * scale;
    let k = lmat.ncols();
    let lu = lmat.rows(0, ru).into_owned();
    let lw = lmat.rows(ru, rw).into_owned();
    let ly = lmat.rows(ru + rw, ry).into_owned();

    let perp = DMatrix::identity(k, k) - lu.transpose() * pinv(&(&lu * lu.transpose()), 1e-12) * &lu;
    let lw_perp = &lw * &perp;
    let ly_perp = &ly * &perp;
    let lw_perp_pinv = pinv(&lw_perp, RANK_RTOL);
    // Oblique projection of Yf along Uf onto Wp.
    let oblique = &ly_perp * &lw_perp_pinv * &lw;

    let (weighted, w1_inv) = match cfg.method {
        SubspaceMethod::N4sid => (oblique.clone(), None),
        SubspaceMethod::Moesp => (&ly_perp * &lw_perp_pinv * &lw_perp, None),
        SubspaceMethod::Cva => {
            let cov = &ly_perp * ly.transpose();
            let cov = (&cov + cov.transpose()) * 0.5;
            let w1 = sym_power(&cov, -0.5, 1e-12);
            let w1i = sym_power(&cov, 0.5, 1e-12);
            (&w1 * &ly_perp * &lw_perp_pinv * &lw_perp, Some(w1i))
        }
    };
    let (u_svd, sv, _) = sorted_svd(&weighted);
    let s1 = sv.first().copied().unwrap_or(0.0);

    let numerical_rank = sv.iter().filter(|&&s| s > RANK_RTOL * s1).count();
    let mut n = cfg.n_x.min(numerical_rank).min(l * f);
    if n == 0 {
        return Err(Error::Parameter("projection has zero rank: the record carries no dynamics".into()));
    }
    if n < cfg.n_x {
        warnings.push(SubspaceWarning::RankReduced { requested: cfg.n_x, used: n });
    }
    let ratio = sv[n - 1] / s1;
    if ratio < ILL_RATIO {
        warnings.push(SubspaceWarning::IllConditioned { ratio, reason: "weak trailing singular value".into() });
    }
    let median = sv[sv.len() / 2];
    if sv.len() > 2 && s1 < FLAT_RATIO * median {
        warnings.push(SubspaceWarning::IllConditioned { ratio: median / s1, reason: "flat singular spectrum, no dominant subspace".into() });
    }

    let sqrt_s = DMatrix::from_diagonal(&DVector::from_iterator(n, sv[..n].iter().map(|s| s.sqrt())));
    let mut gamma = u_svd.columns(0, n).into_owned() * sqrt_s;
    if let Some(w1i) = &w1_inv {
        gamma = w1i * gamma;
    }

    // State sequence at block row p; columns are consecutive times.
    let gamma_pinv = pinv(&gamma, 1e-12);
    let states = &gamma_pinv * &oblique * q.columns(0, k).transpose();

    let c = gamma.rows(0, l).into_owned();
    let a = if f >= 2 && (f - 1) * l >= n {
        let up_rows = gamma.rows(0, l * (f - 1)).into_owned();
        let down_rows = gamma.rows(l, l * (f - 1)).into_owned();
        pinv(&up_rows, 1e-12) * down_rows
    } else {
        // Shift invariance is underdetermined: regress the state sequence.
        let x_now = states.columns(0, j - 1).into_owned();
        let x_next = states.columns(1, j - 1).into_owned();
        let u_now = data.inputs().rows(p, j - 1).transpose();
        let mut reg = DMatrix::zeros(n + m, j - 1);
        reg.rows_mut(0, n).copy_from(&x_now);
        reg.rows_mut(n, m).copy_from(&u_now);
        right_solve(&x_next, &reg).columns(0, n).into_owned()
    };

    let (b, _) = fit_b_x0(&a, &c, data.outputs(), data.inputs())?;

    // Residual covariances along the estimated state sequence.
    let k_gain = if j >= 3 {
        let x_now = states.columns(0, j - 1).into_owned();
        let x_next = states.columns(1, j - 1).into_owned();
        let u_now = data.inputs().rows(p, j - 1).transpose();
        let y_now = data.outputs().rows(p, j - 1).transpose();
        let w = &x_next - &a * &x_now - &b * &u_now;
        let v = &y_now - &c * &x_now;
        let cnt = (j - 1) as f64;
        let qn = &w * w.transpose() / cnt;
        let rn = &v * v.transpose() / cnt;
        let sn = &w * v.transpose() / cnt;
        match kalman_gain(&a, &c, &qn, &rn, &sn) {
            Ok(kg) => kg,
            Err(e) => {
                warnings.push(SubspaceWarning::KalmanFailed(e.to_string()));
                DMatrix::zeros(n, l)
            }
        }
    } else {
        DMatrix::zeros(n, l)
    };
    n = a.nrows();
    debug_assert_eq!(n, c.ncols());
    Ok(Identified { model: Lssm::new(a, b, c, k_gain)?, singular_values: sv, warnings })
}

/// Longest fitting window with bounded growth of `A^k`.
fn fit_window(a: &DMatrix<f64>, n_samples: usize) -> usize {
    let rho = if a.nrows() == 0 { 0.0 } else { a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max) };
    let mut w = n_samples.min(B_FIT_WINDOW);
    if rho > 1.0 {
        w = w.min(((1e6f64).ln() / rho.ln()).floor().max(1.0) as usize);
    }
    w.max(1)
}

/// Joint least squares for `B` and `x0` over the leading samples.
fn fit_b_x0(a: &DMatrix<f64>, c: &DMatrix<f64>, y: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (n, l, m) = (a.nrows(), c.nrows(), u.ncols());
    let w = fit_window(a, y.nrows()).max(n.div_ceil(l.max(1)) + 1).min(y.nrows());
    let cols = n + n * m;
    let mut reg = DMatrix::zeros(w * l, cols);
    let mut rhs = DVector::zeros(w * l);
    // Free response C A^k and forced sensitivity S_k = dx_k / dvec(B).
    let mut ak = DMatrix::identity(n, n);
    let mut sens = DMatrix::zeros(n, n * m);
    for t in 0..w {
        let ca = c * &ak;
        let cs = c * &sens;
        for r in 0..l {
            for i in 0..n {
                reg[(t * l + r, i)] = ca[(r, i)];
            }
            for i in 0..n * m {
                reg[(t * l + r, n + i)] = cs[(r, i)];
            }
            rhs[t * l + r] = y[(t, r)];
        }
        // vec(B) column-major: column j of B occupies entries j*n..(j+1)*n.
        let mut next = a * &sens;
        for jj in 0..m {
            let uv = u[(t, jj)];
            for i in 0..n {
                next[(i, jj * n + i)] += uv;
            }
        }
        sens = next;
        ak = a * ak;
    }
    let theta = pinv(&reg, 1e-12) * rhs;
    let x0 = theta.rows(0, n).into_owned();
    let b = DMatrix::from_column_slice(n, m, theta.rows(n, n * m).as_slice());
    Ok((b, x0))
}

/// Steady-state predictor gain from process/measurement covariances by
/// fixed-point iteration of the discrete Riccati equation.
pub fn kalman_gain(a: &DMatrix<f64>, c: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = c.nrows();
    let tr = r.trace() / l.max(1) as f64;
    let r_reg = r + DMatrix::identity(l, l) * (1e-9 * tr).max(1e-300);
    let mut p = q.clone();
    for _ in 0..DARE_MAX_ITER {
        let apc = a * &p * c.transpose() + s;
        let inn = c * &p * c.transpose() + &r_reg;
        let inv = inn.clone().try_inverse().ok_or_else(|| Error::Parameter("singular innovation covariance".into()))?;
        let mut next = a * &p * a.transpose() + q - &apc * &inv * apc.transpose();
        next = (&next + next.transpose()) * 0.5;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("Riccati iteration diverged".into()));
        }
        let diff = (&next - &p).amax();
        p = next;
        if diff <= DARE_TOL * p.amax().max(1.0) {
            let apc = a * &p * c.transpose() + s;
            let inn = c * &p * c.transpose() + &r_reg;
            return Ok(apc * inn.try_inverse().unwrap());
        }
    }
    Err(Error::Parameter("Riccati iteration did not converge".into()))
}

/// Simulates the model. `OpenLoop` ignores `K`; `Innovation` corrects with
/// the measured outputs `y_meas`.
pub fn lssm_simulate(model: &Lssm, x0: &[f64], inputs: &DMatrix<f64>, mode: SimMode, y_meas: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
    let (n, l) = (model.n_x(), model.n_y());
    if x0.len() != n || inputs.ncols() != model.n_u() {
        return Err(Error::Shape(format!("expected |x0|={n} and {} input channels", model.n_u())));
    }
    let steps = inputs.nrows();
    let y_meas = match (mode, y_meas) {
        (SimMode::Innovation, None) => return Err(Error::Parameter("innovation mode needs measured outputs".into())),
        (SimMode::Innovation, Some(y)) if y.shape() != (steps, l) => return Err(Error::Shape("measured outputs must be N x n_y".into())),
        (SimMode::Innovation, y) => y,
        (SimMode::OpenLoop, _) => None,
    };
    let mut x = DVector::from_column_slice(x0);
    let mut out = DMatrix::zeros(steps, l);
    for t in 0..steps {
        let y = &model.c * &x;
        out.row_mut(t).copy_from(&y.transpose());
        let mut next = &model.a * &x + &model.b * inputs.row(t).transpose();
        if let Some(ym) = y_meas {
            next += &model.k * (ym.row(t).transpose() - y);
        }
        if !(next.norm() <= DIVERGENCE_NORM) {
            return Err(Error::RolloutDiverged { step: t + 1 });
        }
        x = next;
    }
    Ok(out)
}

/// Least-squares initial state from a leading window of outputs and inputs.
pub fn estimate_x0(model: &Lssm, y: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<(Vec<f64>, Option<SubspaceWarning>)> {
    let (n, l) = (model.n_x(), model.n_y());
    if y.nrows() < n {
        return Err(Error::TooShort { needed: n, have: y.nrows() });
    }
    if y.ncols() != l || u.shape() != (y.nrows(), model.n_u()) {
        return Err(Error::Shape("window outputs/inputs do not match the model".into()));
    }
    let w = y.nrows();
    let forced = lssm_simulate(model, &vec![0.0; n], u, SimMode::OpenLoop, None)?;
    let mut gamma = DMatrix::zeros(w * l, n);
    let mut rhs = DVector::zeros(w * l);
    let mut ca = model.c.clone();
    for t in 0..w {
        gamma.rows_mut(t * l, l).copy_from(&ca);
        for r in 0..l {
            rhs[t * l + r] = y[(t, r)] - forced[(t, r)];
        }
        ca = &ca * &model.a;
        if ca.amax() > DIVERGENCE_NORM {
            return Err(Error::RolloutDiverged { step: t + 1 });
        }
    }
    let svd = gamma.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
    let warn = (rank < n).then_some(SubspaceWarning::MinimumNormX0);
    let x0 = pinv(&gamma, 1e-10) * rhs;
    Ok((x0.as_slice().to_vec(), warn))
}

/// Impulse-response coefficients `C A^k B`, `k = 0..count`.
pub fn markov_parameters(model: &Lssm, count: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut ak_b = model.b.clone();
    for _ in 0..count {
        out.push(&model.c * &ak_b);
        ak_b = &model.a * ak_b;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_stable(n: usize, m: usize, l: usize, rng: &mut ChaCha8Rng) -> Lssm {
        let raw = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let rho = raw.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        let target = rng.gen_range(0.3..0.95);
        let a = raw * (target / rho.max(1e-12));
        let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
        let c = DMatrix::from_fn(l, n, |_, _| rng.gen_range(-1.0..1.0));
        Lssm::new(a, b, c, DMatrix::zeros(n, l)).unwrap()
    }

    fn excite(sys: &Lssm, n_samples: usize, rng: &mut ChaCha8Rng) -> Trajectory {
        let u = DMatrix::from_fn(n_samples, sys.n_u(), |_, _| StandardNormal.sample(rng));
        let x0: Vec<f64> = (0..sys.n_x()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = lssm_simulate(sys, &x0, &u, SimMode::OpenLoop, None).unwrap();
        Trajectory::new(0.0, 1.0, u, y).unwrap()
    }

    fn markov_gap(a: &Lssm, b: &Lssm) -> f64 {
        markov_parameters(a, 20).iter().zip(markov_parameters(b, 20)).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
    }

    #[test]
    fn hankel_examples() {
        let s = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(block_hankel(&s, 2).unwrap(), DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0]));
        assert_eq!(block_hankel(&s, 1).unwrap(), s.transpose());
        assert!(block_hankel(&s, 5).is_err());
    }

    proptest! {
        #[test]
        fn hankel_columns_match_slices(n in 1usize..30, d in 1usize..4, r_frac in 0.0f64..1.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
            let r = 1 + ((n - 1) as f64 * r_frac) as usize;
            let h = block_hankel(&s, r).unwrap();
            prop_assert_eq!(h.shape(), (r * d, n - r + 1));
            for j in 0..h.ncols() {
                let direct: Vec<f64> = (j..j + r).flat_map(|t| s.row(t).iter().copied().collect::<Vec<_>>()).collect();
                prop_assert_eq!(h.column(j).iter().copied().collect::<Vec<_>>(), direct);
            }
        }
    }

    #[test]
    fn simulate_examples() {
        let id = Lssm::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), DMatrix::identity(2, 2), DMatrix::zeros(2, 2)).unwrap();
        let y = lssm_simulate(&id, &[0.3, -0.4], &DMatrix::zeros(10, 1), SimMode::OpenLoop, None).unwrap();
        for t in 0..10 {
            assert_eq!(y.row(t).iter().copied().collect::<Vec<_>>(), vec![0.3, -0.4]);
        }
        let half = Lssm::new(DMatrix::from_element(1, 1, 0.5), DMatrix::zeros(1, 0), DMatrix::from_element(1, 1, 2.0), DMatrix::zeros(1, 1)).unwrap();
        let y = lssm_simulate(&half, &[1.0], &DMatrix::zeros(8, 0), SimMode::OpenLoop, None).unwrap();
        for t in 0..8 {
            assert_eq!(y[(t, 0)], 2.0 * 0.5f64.powi(t as i32));
        }
        assert!(lssm_simulate(&half, &[1.0], &DMatrix::zeros(8, 0), SimMode::Innovation, None).is_err());
        let grow = Lssm::new(DMatrix::from_element(1, 1, 10.0), DMatrix::zeros(1, 0), DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(1, 1)).unwrap();
        assert!(matches!(lssm_simulate(&grow, &[1.0], &DMatrix::zeros(20, 0), SimMode::OpenLoop, None), Err(Error::RolloutDiverged { step: 13 })));
    }

    #[test]
    fn recovers_first_order_pole() {
        let sys = Lssm::new(DMatrix::from_element(1, 1, 0.9), DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(1, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = excite(&sys, 400, &mut rng);
        for method in SubspaceMethod::ALL {
            let id = identify(&data, &SubspaceConfig::new(method, 1, 5)).unwrap();
            let eig = id.model.a[(0, 0)];
            assert!((eig - 0.9).abs() < 1e-6, "{method:?}: {eig}");
        }
    }

    #[test]
    fn recovers_oscillator_poles() {
        let (rho, omega) = (0.98f64, 0.3f64);
        let a = DMatrix::from_row_slice(2, 2, &[rho * omega.cos(), -rho * omega.sin(), rho * omega.sin(), rho * omega.cos()]);
        let sys = Lssm::new(a, DMatrix::from_row_slice(2, 1, &[1.0, 0.0]), DMatrix::from_row_slice(1, 2, &[1.0, 0.5]), DMatrix::zeros(2, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = excite(&sys, 600, &mut rng);
        for method in SubspaceMethod::ALL {
            let id = identify(&data, &SubspaceConfig::new(method, 2, 6)).unwrap();
            let mut eig: Vec<_> = id.model.a.complex_eigenvalues().iter().copied().collect();
            eig.sort_by(|x, y| x.im.total_cmp(&y.im));
            let want = [nalgebra::Complex::from_polar(rho, -omega), nalgebra::Complex::from_polar(rho, omega)];
            for (g, w) in eig.iter().zip(want) {
                assert!((g - w).norm() < 1e-5, "{method:?}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn exact_markov_recovery_and_method_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..12 {
            let n = 1 + trial % 4;
            let (m, l) = (1 + trial % 2, 1 + (trial / 2) % 2);
            let sys = random_stable(n, m, l, &mut rng);
            let data = excite(&sys, 800, &mut rng);
            let models: Vec<Lssm> = SubspaceMethod::ALL
                .iter()
                .map(|&method| identify(&data, &SubspaceConfig::new(method, n + 2, 6)).unwrap().model)
                .collect();
            for (method, model) in SubspaceMethod::ALL.iter().zip(&models) {
                let gap = markov_gap(model, &sys);
                assert!(gap < 1e-6, "trial {trial} {method:?}: {gap}");
            }
            assert!(markov_gap(&models[0], &models[1]) < 1e-6);
            assert!(markov_gap(&models[0], &models[2]) < 1e-6);
            assert!(markov_gap(&models[1], &models[2]) < 1e-6);
        }
    }

    #[test]
    fn rank_reduction_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sys = random_stable(2, 1, 1, &mut rng);
        let data = excite(&sys, 500, &mut rng);
        let id = identify(&data, &SubspaceConfig::new(SubspaceMethod::N4sid, 6, 8)).unwrap();
        assert_eq!(id.model.n_x(), 2);
        assert!(id.warnings.contains(&SubspaceWarning::RankReduced { requested: 6, used: 2 }));
        // Structural cap: f * l block rows bound the order.
        let id = identify(&data, &SubspaceConfig::new(SubspaceMethod::N4sid, 6, 1)).unwrap();
        assert_eq!(id.model.n_x(), 1);
    }

    #[test]
    fn identify_is_deterministic_and_checks_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sys = random_stable(3, 2, 2, &mut rng);
        let data = excite(&sys, 300, &mut rng);
        let cfg = SubspaceConfig::new(SubspaceMethod::Cva, 3, 5);
        assert_eq!(identify(&data, &cfg).unwrap(), identify(&data, &cfg).unwrap());
        assert!(matches!(identify(&data.slice(0, 15).unwrap(), &cfg), Err(Error::TooShort { .. })));
    }

    #[test]
    fn white_noise_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = DMatrix::from_fn(2000, 1, |_, _| StandardNormal.sample(&mut rng));
        let data = Trajectory::autonomous(0.0, 1.0, y).unwrap();
        let id = identify(&data, &SubspaceConfig::new(SubspaceMethod::N4sid, 4, 10)).unwrap();
        assert!(id.warnings.iter().any(|w| matches!(w, SubspaceWarning::IllConditioned { .. })), "{:?}", id.singular_values);
    }

    #[test]
    fn autonomous_oscillation_is_identified() {
        let (rho, omega) = (0.995f64, 0.2f64);
        let a = DMatrix::from_row_slice(2, 2, &[rho * omega.cos(), -rho * omega.sin(), rho * omega.sin(), rho * omega.cos()]);
        let sys = Lssm::new(a, DMatrix::zeros(2, 0), DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), DMatrix::zeros(2, 1)).unwrap();
        let y = lssm_simulate(&sys, &[1.0, 0.0], &DMatrix::zeros(400, 0), SimMode::OpenLoop, None).unwrap();
        let data = Trajectory::autonomous(0.0, 1.0, y.clone()).unwrap();
        for method in SubspaceMethod::ALL {
            let id = identify(&data, &SubspaceConfig::new(method, 2, 5)).unwrap();
            let (x0, _) = estimate_x0(&id.model, &y.rows(0, 20).into_owned(), &DMatrix::zeros(20, 0)).unwrap();
            let sim = lssm_simulate(&id.model, &x0, &DMatrix::zeros(400, 0), SimMode::OpenLoop, None).unwrap();
            assert!((sim - &y).amax() < 1e-6, "{method:?}");
        }
    }

    #[test]
    fn x0_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sys = random_stable(3, 1, 2, &mut rng);
        let u = DMatrix::from_fn(30, 1, |_, _| rng.gen_range(-1.0..1.0));
        let x0 = [0.4, -1.2, 0.7];
        let y = lssm_simulate(&sys, &x0, &u, SimMode::OpenLoop, None).unwrap();
        let (est, warn) = estimate_x0(&sys, &y, &u).unwrap();
        assert!(warn.is_none());
        for (a, b) in est.iter().zip(x0) {
            assert!((a - b).abs() < 1e-8);
        }
        let (zero, _) = estimate_x0(&sys, &DMatrix::zeros(10, 2), &DMatrix::zeros(10, 1)).unwrap();
        assert_eq!(zero, vec![0.0; 3]);
        assert!(matches!(estimate_x0(&sys, &DMatrix::zeros(2, 2), &DMatrix::zeros(2, 1)), Err(Error::TooShort { .. })));
    }

    #[test]
    fn innovation_mode_beats_open_loop_with_exact_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut wins = 0;
        for _ in 0..20 {
            let mut sys = random_stable(2, 1, 1, &mut rng);
            let q = DMatrix::identity(2, 2) * 0.05;
            let r = DMatrix::identity(1, 1) * 0.01;
            sys.k = kalman_gain(&sys.a, &sys.c, &q, &r, &DMatrix::zeros(2, 1)).unwrap();
            let steps = 500;
            let u = DMatrix::from_fn(steps, 1, |_, _| rng.gen_range(-1.0..1.0));
            let mut x = DVector::zeros(2);
            let mut y = DMatrix::zeros(steps, 1);
            for t in 0..steps {
                let v: f64 = StandardNormal.sample(&mut rng);
                y[(t, 0)] = (&sys.c * &x)[0] + 0.1 * v;
                let w = DVector::from_fn(2, |_, _| 0.05f64.sqrt() * Distribution::<f64>::sample(&StandardNormal, &mut rng));
                x = &sys.a * &x + &sys.b * u.row(t).transpose() + w;
            }
            let open = lssm_simulate(&sys, &[0.0, 0.0], &u, SimMode::OpenLoop, None).unwrap();
            let inn = lssm_simulate(&sys, &[0.0, 0.0], &u, SimMode::Innovation, Some(&y)).unwrap();
            if (inn - &y).norm_squared() < (open - &y).norm_squared() {
                wins += 1;
            }
        }
        assert_eq!(wins, 20);
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sys = random_stable(3, 2, 2, &mut rng);
        let text = serde_json::to_string(&sys.to_json()).unwrap();
        assert_eq!(Lssm::from_json(&serde_json::from_str(&text).unwrap()).unwrap(), sys);
    }
}
