//! Explicit ODE integrators: forward Euler, classical RK4 and the adaptive
//! Dormand-Prince 5(4) pair with step landing on the output grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Right-hand side `dx/dt = f(x, t)`.
///
/// Implementations must write exactly `x.len()` derivatives into `dxdt`.
pub trait VectorField {
    fn eval(&self, x: &[f64], t: f64, dxdt: &mut [f64]);
}

impl<F> VectorField for F
where
    F: Fn(&[f64], f64, &mut [f64]),
{
    fn eval(&self, x: &[f64], t: f64, dxdt: &mut [f64]) {
        self(x, t, dxdt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

/// Integrator settings. Unset step bounds are derived from the integration
/// span: `h_init = span / 100`, `h_min = 1e-10 * span`, `h_max = span`.
/// Fixed-step methods use `h_init` as their step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    pub h_init: Option<f64>,
    pub h_min: Option<f64>,
    pub h_max: Option<f64>,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { method: Method::Dopri5, rtol: 1e-6, atol: 1e-8, h_init: None, h_min: None, h_max: None, max_steps: 100_000 }
    }
}

impl SolverConfig {
    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol, ..Self::default() }
    }

    pub fn fixed(method: Method, h: f64) -> Self {
        Self { method, h_init: Some(h), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Parameter("rtol and atol must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Parameter("max_steps must be at least 1".into()));
        }
        for (name, v) in [("h_init", self.h_init), ("h_min", self.h_min), ("h_max", self.h_max)] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(Error::Parameter(format!("{name} must be positive")));
                }
            }
        }
        let (lo, init, hi) = (self.h_min.unwrap_or(0.0), self.h_init, self.h_max.unwrap_or(f64::INFINITY));
        if lo > hi || init.is_some_and(|h| h < lo || h > hi) {
            return Err(Error::Parameter("step bounds must satisfy h_min <= h_init <= h_max".into()));
        }
        Ok(())
    }

    fn steps_for(&self, span: f64) -> (f64, f64, f64) {
        let h_max = self.h_max.unwrap_or(span);
        let h_min = self.h_min.unwrap_or(1e-10 * span);
        let h_init = self.h_init.unwrap_or(span / 100.0).clamp(h_min, h_max);
        (h_init, h_min, h_max)
    }
}

/// Counters from one [`integrate`] call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolverStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evals: usize,
}

/// Output of [`integrate`]: `states[k]` is the solution at `t_grid[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub states: Vec<Vec<f64>>,
    pub stats: SolverStats,
}

fn eval_checked<F: VectorField + ?Sized>(f: &F, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
    f.eval(x, t, out);
    if out.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { t, reason: "non-finite derivative".into() })
    }
}

fn axpy_into(out: &mut [f64], x: &[f64], terms: &[(f64, &[f64])]) {
    for i in 0..out.len() {
        let mut v = x[i];
        for (c, k) in terms {
            v += c * k[i];
        }
        out[i] = v;
    }
}

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("step must be positive, got {h}")))
    }
}

/// One forward Euler step `x + h f(x, t)`.
pub fn step_euler<F: VectorField + ?Sized>(f: &F, x: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
    check_step(h)?;
    let mut k = vec![0.0; x.len()];
    eval_checked(f, x, t, &mut k)?;
    Ok(x.iter().zip(&k).map(|(xi, ki)| xi + h * ki).collect())
}

/// One classical fourth-order Runge-Kutta step.
pub fn step_rk4<F: VectorField + ?Sized>(f: &F, x: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
    check_step(h)?;
    let n = x.len();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    eval_checked(f, x, t, &mut k1)?;
    axpy_into(&mut tmp, x, &[(0.5 * h, &k1)]);
    eval_checked(f, &tmp, t + 0.5 * h, &mut k2)?;
    axpy_into(&mut tmp, x, &[(0.5 * h, &k2)]);
    eval_checked(f, &tmp, t + 0.5 * h, &mut k3)?;
    axpy_into(&mut tmp, x, &[(h, &k3)]);
    eval_checked(f, &tmp, t + h, &mut k4)?;
    let mut out = vec![0.0; n];
    axpy_into(&mut out, x, &[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)]);
    Ok(out)
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Difference between the 5th- and embedded 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;

/// Result of a single Dormand-Prince step.
#[derive(Debug, Clone, PartialEq)]
pub struct Dopri5Step {
    /// Fifth-order solution at `t + h`.
    pub state: Vec<f64>,
    /// Weighted RMS of the embedded error estimate; the step is acceptable when `<= 1`.
    pub err: f64,
    /// Proposed next step `h * clamp(0.9 err^(-1/5), 0.2, 5)`.
    pub h_next: f64,
}

struct Dopri5Work {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    x5: Vec<f64>,
}

impl Dopri5Work {
    fn new(n: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![0.0; n]), tmp: vec![0.0; n], x5: vec![0.0; n] }
    }
}

fn step_size_factor(err: f64) -> f64 {
    if err == 0.0 {
        FAC_MAX
    } else {
        (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, FAC_MAX)
    }
}

/// Advances `work.x5` from `x` by `h`. `work.k[0]` must already hold `f(x, t)`;
/// on return `work.k[6]` holds `f(x5, t + h)` (first-same-as-last).
fn dopri5_core<F: VectorField + ?Sized>(
    f: &F,
    x: &[f64],
    t: f64,
    h: f64,
    rtol: f64,
    atol: f64,
    w: &mut Dopri5Work,
) -> Result<f64> {
    let Dopri5Work { k, tmp, x5 } = w;
    let [k1, k2, k3, k4, k5, k6, k7] = k;
    axpy_into(tmp, x, &[(h * A21, k1)]);
    eval_checked(f, tmp, t + C2 * h, k2)?;
    axpy_into(tmp, x, &[(h * A31, k1), (h * A32, k2)]);
    eval_checked(f, tmp, t + C3 * h, k3)?;
    axpy_into(tmp, x, &[(h * A41, k1), (h * A42, k2), (h * A43, k3)]);
    eval_checked(f, tmp, t + C4 * h, k4)?;
    axpy_into(tmp, x, &[(h * A51, k1), (h * A52, k2), (h * A53, k3), (h * A54, k4)]);
    eval_checked(f, tmp, t + C5 * h, k5)?;
    axpy_into(tmp, x, &[(h * A61, k1), (h * A62, k2), (h * A63, k3), (h * A64, k4), (h * A65, k5)]);
    eval_checked(f, tmp, t + h, k6)?;
    axpy_into(x5, x, &[(h * B1, k1), (h * B3, k3), (h * B4, k4), (h * B5, k5), (h * B6, k6)]);
    eval_checked(f, x5, t + h, k7)?;
    let n = x.len().max(1);
    let mut sum = 0.0;
    for i in 0..x.len() {
        let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        let scale = atol + rtol * x[i].abs().max(x5[i].abs());
        sum += (e / scale).powi(2);
    }
    let err = (sum / n as f64).sqrt();
    if !err.is_finite() {
        return Err(Error::Divergence { t: t + h, reason: "non-finite error estimate".into() });
    }
    Ok(err)
}

/// One Dormand-Prince 5(4) step from `(x, t)` with step `h`.
pub fn step_dopri5<F: VectorField + ?Sized>(
    f: &F,
    x: &[f64],
    t: f64,
    h: f64,
    rtol: f64,
    atol: f64,
) -> Result<Dopri5Step> {
    check_step(h)?;
    let mut w = Dopri5Work::new(x.len());
    eval_checked(f, x, t, &mut w.k[0])?;
    let err = dopri5_core(f, x, t, h, rtol, atol, &mut w)?;
    Ok(Dopri5Step { state: w.x5, err, h_next: h * step_size_factor(err) })
}

/// Integrates `dx/dt = f(x, t)` from `x0` at `t_grid[0]`, returning the state
/// at every grid time. Adaptive steps are truncated to land exactly on each
/// grid point.
pub fn integrate<F: VectorField + ?Sized>(f: &F, x0: &[f64], t_grid: &[f64], cfg: &SolverConfig) -> Result<Solution> {
    cfg.validate()?;
    if t_grid.len() < 2 {
        return Err(Error::Parameter("time grid needs at least two points".into()));
    }
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Parameter("time grid must be strictly increasing".into()));
    }
    let span = t_grid[t_grid.len() - 1] - t_grid[0];
    match cfg.method {
        Method::Euler | Method::Rk4 => integrate_fixed(f, x0, t_grid, cfg, span),
        Method::Dopri5 => integrate_dopri5(f, x0, t_grid, cfg, span),
    }
}

fn integrate_fixed<F: VectorField + ?Sized>(
    f: &F,
    x0: &[f64],
    t_grid: &[f64],
    cfg: &SolverConfig,
    span: f64,
) -> Result<Solution> {
    let (h, _, _) = cfg.steps_for(span);
    let mut stats = SolverStats::default();
    let mut states = Vec::with_capacity(t_grid.len());
    states.push(x0.to_vec());
    let mut x = x0.to_vec();
    for w in t_grid.windows(2) {
        let interval = w[1] - w[0];
        let n_sub = ((interval / h) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let hs = interval / n_sub as f64;
        for s in 0..n_sub {
            if stats.accepted >= cfg.max_steps {
                return Err(Error::NonConvergence {
                    t_reached: w[0] + s as f64 * hs,
                    reason: format!("max_steps={} exceeded", cfg.max_steps),
                });
            }
            let t = w[0] + s as f64 * hs;
            x = match cfg.method {
                Method::Euler => {
                    stats.evals += 1;
                    step_euler(f, &x, t, hs)?
                }
                _ => {
                    stats.evals += 4;
                    step_rk4(f, &x, t, hs)?
                }
            };
            stats.accepted += 1;
        }
        states.push(x.clone());
    }
    Ok(Solution { states, stats })
}

fn integrate_dopri5<F: VectorField + ?Sized>(
    f: &F,
    x0: &[f64],
    t_grid: &[f64],
    cfg: &SolverConfig,
    span: f64,
) -> Result<Solution> {
    let (mut h, h_min, h_max) = cfg.steps_for(span);
    let n = x0.len();
    let mut w = Dopri5Work::new(n);
    let mut stats = SolverStats::default();
    let mut states = Vec::with_capacity(t_grid.len());
    states.push(x0.to_vec());
    let mut x = x0.to_vec();
    let mut t = t_grid[0];
    eval_checked(f, &x, t, &mut w.k[0])?;
    stats.evals += 1;
    for &t_next in &t_grid[1..] {
        // Relative slack so floating-point residue never produces a sliver step.
        let land_tol = 1e-12 * t_next.abs().max(span);
        while t_next - t > land_tol {
            if stats.accepted + stats.rejected >= cfg.max_steps {
                return Err(Error::NonConvergence { t_reached: t, reason: format!("max_steps={} exceeded", cfg.max_steps) });
            }
            let remaining = t_next - t;
            let landing = h >= remaining;
            let h_try = if landing { remaining } else { h };
            let err = dopri5_core(f, &x, t, h_try, cfg.rtol, cfg.atol, &mut w)?;
            stats.evals += 6;
            let h_prop = (h_try * step_size_factor(err)).min(h_max);
            if err <= 1.0 {
                t = if landing { t_next } else { t + h_try };
                std::mem::swap(&mut x, &mut w.x5);
                w.k.swap(0, 6);
                stats.accepted += 1;
                // A truncated landing step says nothing about the step the
                // error allows; keep the larger proposal.
                h = if landing { h.max(h_prop) } else { h_prop };
            } else {
                stats.rejected += 1;
                h = h_prop;
                if h < h_min {
                    return Err(Error::NonConvergence { t_reached: t, reason: format!("step size fell below h_min={h_min:e}") });
                }
            }
        }
        t = t_next;
        states.push(x.clone());
    }
    Ok(Solution { states, stats })
}

/// Right-hand side that may change at every grid point: `f(seg, x, t, dxdt)`
/// is used on `[t_grid[seg], t_grid[seg + 1]]`.
pub trait SegmentField {
    fn eval(&self, seg: usize, x: &[f64], t: f64, dxdt: &mut [f64]);
}

impl<F> SegmentField for F
where
    F: Fn(usize, &[f64], f64, &mut [f64]),
{
    fn eval(&self, seg: usize, x: &[f64], t: f64, dxdt: &mut [f64]) {
        self(seg, x, t, dxdt)
    }
}

struct Seg<'a, F: ?Sized> {
    f: &'a F,
    seg: usize,
}

impl<F: SegmentField + ?Sized> VectorField for Seg<'_, F> {
    fn eval(&self, x: &[f64], t: f64, dxdt: &mut [f64]) {
        self.f.eval(self.seg, x, t, dxdt)
    }
}

/// Integrates a piecewise-defined system across `t_grid`, calling
/// `at_node(k, x)` at every grid point (including the first) before the
/// next segment starts. The callback may modify the state, which makes this
/// suitable for sampled-input systems and for adjoint jumps. Adaptive step
/// sizes carry over between segments; by default the first step equals the
/// first interval and fixed-step methods take one step per interval.
pub fn integrate_segments<F, G>(f: &F, x0: &[f64], t_grid: &[f64], cfg: &SolverConfig, mut at_node: G) -> Result<SolverStats>
where
    F: SegmentField + ?Sized,
    G: FnMut(usize, &mut [f64]) -> Result<()>,
{
    cfg.validate()?;
    if t_grid.len() < 2 {
        return Err(Error::Parameter("time grid needs at least two points".into()));
    }
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Parameter("time grid must be strictly increasing".into()));
    }
    let span = t_grid[t_grid.len() - 1] - t_grid[0];
    let h_max = cfg.h_max.unwrap_or(span);
    let h_min = cfg.h_min.unwrap_or(1e-10 * span);
    let mut h = cfg.h_init.unwrap_or(t_grid[1] - t_grid[0]).clamp(h_min, h_max);
    let mut stats = SolverStats::default();
    let mut x = x0.to_vec();
    let mut w = Dopri5Work::new(x.len());
    at_node(0, &mut x)?;
    for (seg, win) in t_grid.windows(2).enumerate() {
        let field = Seg { f, seg };
        let (t0, t_next) = (win[0], win[1]);
        match cfg.method {
            Method::Euler | Method::Rk4 => {
                let interval = t_next - t0;
                let n_sub = ((interval / h) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
                let hs = interval / n_sub as f64;
                for s in 0..n_sub {
                    if stats.accepted >= cfg.max_steps {
                        return Err(Error::NonConvergence { t_reached: t0 + s as f64 * hs, reason: format!("max_steps={} exceeded", cfg.max_steps) });
                    }
                    let t = t0 + s as f64 * hs;
                    x = if cfg.method == Method::Euler {
                        stats.evals += 1;
                        step_euler(&field, &x, t, hs)?
                    } else {
                        stats.evals += 4;
                        step_rk4(&field, &x, t, hs)?
                    };
                    stats.accepted += 1;
                }
            }
            Method::Dopri5 => {
                let mut t = t0;
                eval_checked(&field, &x, t, &mut w.k[0])?;
                stats.evals += 1;
                let land_tol = 1e-12 * t_next.abs().max(span);
                while t_next - t > land_tol {
                    if stats.accepted + stats.rejected >= cfg.max_steps {
                        return Err(Error::NonConvergence { t_reached: t, reason: format!("max_steps={} exceeded", cfg.max_steps) });
                    }
                    let remaining = t_next - t;
                    let landing = h >= remaining;
                    let h_try = if landing { remaining } else { h };
                    let err = dopri5_core(&field, &x, t, h_try, cfg.rtol, cfg.atol, &mut w)?;
                    stats.evals += 6;
                    let h_prop = (h_try * step_size_factor(err)).min(h_max);
                    if err <= 1.0 {
                        t = if landing { t_next } else { t + h_try };
                        std::mem::swap(&mut x, &mut w.x5);
                        w.k.swap(0, 6);
                        stats.accepted += 1;
                        h = if landing { h.max(h_prop) } else { h_prop };
                    } else {
                        stats.rejected += 1;
                        h = h_prop;
                        if h < h_min {
                            return Err(Error::NonConvergence { t_reached: t, reason: format!("step size fell below h_min={h_min:e}") });
                        }
                    }
                }
            }
        }
        at_node(seg + 1, &mut x)?;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = -x[0];
    }

    fn zero(_x: &[f64], _t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    #[test]
    fn euler_examples() {
        assert_eq!(step_euler(&zero, &[1.5, -2.0], 0.0, 0.3).unwrap(), vec![1.5, -2.0]);
        assert!((step_euler(&decay, &[1.0], 0.0, 0.1).unwrap()[0] - 0.9).abs() < 1e-15);
        let sol = integrate(&decay, &[1.0], &[0.0, 1.0], &SolverConfig::fixed(Method::Euler, 1e-4)).unwrap();
        assert!((sol.states[1][0] - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn rk4_examples() {
        assert_eq!(step_rk4(&zero, &[3.0], 0.0, 0.1).unwrap(), vec![3.0]);
        let mut x = vec![1.0];
        for i in 0..10 {
            x = step_rk4(&decay, &x, i as f64 * 0.1, 0.1).unwrap();
        }
        // RK4 applied to dx/dt = -x multiplies by the degree-4 Taylor
        // polynomial of e^(-h) each step, so the exact discrete answer is R^10.
        let r: f64 = 1.0 - 0.1 + 0.01 / 2.0 - 0.001 / 6.0 + 0.0001 / 24.0;
        assert!((x[0] - r.powi(10)).abs() < 1e-15);
        assert!((x[0] - (-1.0f64).exp()).abs() < 3.4e-7);

        let err = |h: f64| {
            let sol = integrate(&decay, &[1.0], &[0.0, 1.0], &SolverConfig::fixed(Method::Rk4, h)).unwrap();
            (sol.states[1][0] - (-1.0f64).exp()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn dopri5_zero_field() {
        let s = step_dopri5(&zero, &[1.0, 2.0], 0.0, 0.1, 1e-6, 1e-8).unwrap();
        assert_eq!(s.state, vec![1.0, 2.0]);
        assert_eq!(s.err, 0.0);
        assert!((s.h_next - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dopri5_decay_and_rotation() {
        let cfg = SolverConfig::dopri5(1e-8, 1e-8);
        let sol = integrate(&decay, &[1.0], &[0.0, 1.0], &cfg).unwrap();
        assert!((sol.states[1][0] - (-1.0f64).exp()).abs() < 1e-7);

        let rot = |x: &[f64], _t: f64, out: &mut [f64]| {
            out[0] = x[1];
            out[1] = -x[0];
        };
        let sol = integrate(&rot, &[1.0, 0.0], &[0.0, std::f64::consts::PI], &cfg).unwrap();
        assert!((sol.states[1][0] + 1.0).abs() < 1e-6 && sol.states[1][1].abs() < 1e-6);
    }

    #[test]
    fn integrate_grid_output() {
        let sol = integrate(&zero, &[4.0], &[0.0, 2.0], &SolverConfig::default()).unwrap();
        assert_eq!(sol.states, vec![vec![4.0], vec![4.0]]);

        let cfg = SolverConfig::default();
        let sol = integrate(&decay, &[1.0], &[0.0, 0.5, 1.0], &cfg).unwrap();
        for (k, t) in [0.0f64, 0.5, 1.0].iter().enumerate() {
            assert!((sol.states[k][0] - (-t).exp()).abs() < 10.0 * cfg.rtol);
        }
    }

    #[test]
    fn moderately_stiff_problem_finishes() {
        let f = |x: &[f64], _t: f64, out: &mut [f64]| out[0] = -50.0 * x[0];
        let cfg = SolverConfig { max_steps: 100_000, ..SolverConfig::dopri5(1e-6, 1e-8) };
        let sol = integrate(&f, &[1.0], &[0.0, 10.0], &cfg).unwrap();
        assert!(sol.stats.accepted + sol.stats.rejected < 100_000);
        assert!(sol.states[1][0].abs() < 1e-6);
    }

    #[test]
    fn max_steps_reports_reached_time() {
        let cfg = SolverConfig { max_steps: 5, h_init: Some(1e-3), ..SolverConfig::default() };
        match integrate(&decay, &[1.0], &[0.0, 100.0], &cfg) {
            Err(Error::NonConvergence { t_reached, .. }) => assert!(t_reached > 0.0 && t_reached < 100.0),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn divergence_is_reported() {
        let f = |x: &[f64], _t: f64, out: &mut [f64]| out[0] = x[0] * x[0];
        // Finite-time blow-up at t = 1.
        let err = integrate(&f, &[1.0], &[0.0, 2.0], &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. } | Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = SolverConfig { rtol: 0.0, ..SolverConfig::default() };
        assert!(integrate(&decay, &[1.0], &[0.0, 1.0], &bad).is_err());
        let bad = SolverConfig { h_min: Some(1.0), h_max: Some(0.5), ..SolverConfig::default() };
        assert!(integrate(&decay, &[1.0], &[0.0, 1.0], &bad).is_err());
        assert!(integrate(&decay, &[1.0], &[1.0, 0.5], &SolverConfig::default()).is_err());
        assert!(step_euler(&decay, &[1.0], 0.0, 0.0).is_err());
    }

    fn slope(method: Method) -> f64 {
        let hs: Vec<f64> = (3..=8).map(|p| 2f64.powi(-p)).collect();
        let pts: Vec<(f64, f64)> = hs
            .iter()
            .map(|&h| {
                let sol = integrate(&decay, &[1.0], &[0.0, 1.0], &SolverConfig::fixed(method, h)).unwrap();
                (h.ln(), (sol.states[1][0] - (-1.0f64).exp()).abs().ln())
            })
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    }

    #[test]
    fn convergence_orders() {
        assert!((slope(Method::Euler) - 1.0).abs() < 0.3);
        assert!((slope(Method::Rk4) - 4.0).abs() < 0.3);
    }

    #[test]
    fn time_reversal_returns_to_start() {
        let cfg = SolverConfig::dopri5(1e-8, 1e-10);
        let pend = |x: &[f64], _t: f64, out: &mut [f64]| {
            out[0] = x[1];
            out[1] = -x[0].sin();
        };
        let fwd = integrate(&pend, &[1.0, 0.2], &[0.0, 3.0], &cfg).unwrap();
        let back_field = |x: &[f64], t: f64, out: &mut [f64]| {
            pend(x, -t, out);
            out.iter_mut().for_each(|v| *v = -*v);
        };
        let back = integrate(&back_field, &fwd.states[1], &[-3.0, 0.0], &cfg).unwrap();
        for (a, b) in back.states[1].iter().zip([1.0, 0.2]) {
            assert!((a - b).abs() < 100.0 * cfg.rtol);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SolverConfig::default();
        let grid: Vec<f64> = (0..20).map(|k| k as f64 * 0.3).collect();
        let a = integrate(&decay, &[1.0], &grid, &cfg).unwrap();
        let b = integrate(&decay, &[1.0], &grid, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn segments_apply_zero_order_hold() {
        // dx/dt = -x + u_k on [k, k+1]: exact update x' = u + (x - u) e^-1.
        let u = [1.0, -2.0, 0.5, 3.0];
        let grid = [0.0, 1.0, 2.0, 3.0, 4.0];
        let f = |seg: usize, x: &[f64], _t: f64, out: &mut [f64]| out[0] = -x[0] + u[seg];
        let mut got = Vec::new();
        integrate_segments(&f, &[0.5], &grid, &SolverConfig::dopri5(1e-10, 1e-12), |_, x| {
            got.push(x[0]);
            Ok(())
        })
        .unwrap();
        let mut x = 0.5;
        let mut want = vec![x];
        for uk in u {
            x = uk + (x - uk) * (-1.0f64).exp();
            want.push(x);
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn segments_match_plain_integration_and_allow_jumps() {
        let grid: Vec<f64> = (0..15).map(|k| k as f64 * 0.2).collect();
        let pend = |x: &[f64], _t: f64, out: &mut [f64]| {
            out[0] = x[1];
            out[1] = -x[0].sin();
        };
        let seg = |_: usize, x: &[f64], t: f64, out: &mut [f64]| pend(x, t, out);
        for cfg in [SolverConfig::dopri5(1e-9, 1e-11), SolverConfig::fixed(Method::Rk4, 0.01)] {
            let plain = integrate(&pend, &[1.0, 0.0], &grid, &cfg).unwrap();
            let mut got = Vec::new();
            integrate_segments(&seg, &[1.0, 0.0], &grid, &cfg, |_, x| {
                got.push(x.to_vec());
                Ok(())
            })
            .unwrap();
            for (a, b) in got.iter().zip(&plain.states) {
                assert!((a[0] - b[0]).abs() < 1e-7 && (a[1] - b[1]).abs() < 1e-7);
            }
        }
        // A unit jump at every node of dx/dt = 0 counts the nodes.
        let zero = |_: usize, _x: &[f64], _t: f64, out: &mut [f64]| out[0] = 0.0;
        let mut last = 0.0;
        integrate_segments(&zero, &[0.0], &grid, &SolverConfig::default(), |_, x| {
            x[0] += 1.0;
            last = x[0];
            Ok(())
        })
        .unwrap();
        assert_eq!(last, grid.len() as f64);
    }
}
