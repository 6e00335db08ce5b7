//! Ground-truth emulators: continuous-time nonlinear systems
//! `dx/dt = f(x, u)`, `y = g(x)` sampled on a uniform grid under a
//! piecewise-constant excitation.
//!
//! Every constant is listed in the system's parameter table (printed by
//! `sysid-bench describe`). Where the benchmark literature points at an
//! external emulator or dataset, a textbook model of the same physical
//! system with the stated inputs and outputs is used instead.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::odeint;

/// Names accepted by [`builtin`], in benchmark order.
pub const BUILTIN_SYSTEMS: [&str; 7] =
    ["cstr", "double_pendulum", "vehicle", "tank", "two_tank", "pendulum", "linear_oscillator"];

/// Steady state of the CSTR at coolant temperature 300 K:
/// `(C_A [mol/m^3], T [K])`.
pub const CSTR_STEADY_STATE: [f64; 2] = [0.877252946080963, 324.4754434315993];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Param {
    pub name: &'static str,
    pub value: f64,
    pub unit: &'static str,
    pub description: &'static str,
}

const fn p(name: &'static str, value: f64, unit: &'static str, description: &'static str) -> Param {
    Param { name, value, unit, description }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    None,
    PrbsSteps,
}

/// Excitation rule: independent uniform random levels per channel, each held
/// for `hold_steps` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputPolicy {
    pub kind: PolicyKind,
    pub hold_steps: usize,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    /// Default excitation seed; [`generate`] takes its own.
    pub seed: u64,
}

impl InputPolicy {
    pub fn none() -> Self {
        Self { kind: PolicyKind::None, hold_steps: 1, low: vec![], high: vec![], seed: 0 }
    }

    pub fn steps(hold_steps: usize, low: Vec<f64>, high: Vec<f64>) -> Self {
        Self { kind: PolicyKind::PrbsSteps, hold_steps, low, high, seed: 0 }
    }

    pub fn validate(&self, n_u: usize) -> Result<()> {
        if self.hold_steps == 0 {
            return Err(Error::Parameter("hold_steps must be at least 1".into()));
        }
        match self.kind {
            PolicyKind::None if n_u > 0 => Err(Error::Parameter("non-autonomous system needs an excitation".into())),
            PolicyKind::PrbsSteps if self.low.len() != n_u || self.high.len() != n_u => {
                Err(Error::Parameter(format!("excitation bounds must have {n_u} channels")))
            }
            PolicyKind::PrbsSteps if self.low.iter().zip(&self.high).any(|(l, h)| l > h) => {
                Err(Error::Parameter("excitation low bound exceeds high bound".into()))
            }
            _ => Ok(()),
        }
    }

    /// The `n x n_u` input sequence for seed `seed`.
    pub fn signal(&self, n: usize, n_u: usize, seed: u64) -> DMatrix<f64> {
        let mut u = DMatrix::zeros(n, n_u);
        if self.kind == PolicyKind::None || n_u == 0 {
            return u;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut level = vec![0.0; n_u];
        for k in 0..n {
            if k % self.hold_steps == 0 {
                for (c, l) in level.iter_mut().enumerate() {
                    *l = if self.high[c] > self.low[c] { rng.gen_range(self.low[c]..=self.high[c]) } else { self.low[c] };
                }
            }
            for c in 0..n_u {
                u[(k, c)] = level[c];
            }
        }
        u
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Cstr,
    DoublePendulum,
    Vehicle,
    Tank,
    TwoTank,
    Pendulum,
    LinearOscillator,
}

/// A fully parameterized emulator.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub name: &'static str,
    pub description: &'static str,
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub state_names: Vec<&'static str>,
    pub input_names: Vec<&'static str>,
    pub output_names: Vec<&'static str>,
    pub params: Vec<Param>,
    pub x0: Vec<f64>,
    /// Default sampling time (s).
    pub delta: f64,
    /// Default dataset length.
    pub n_samples: usize,
    pub input_policy: InputPolicy,
    /// RK4 sub-steps per sampling interval during generation.
    pub substeps: usize,
    kind: Kind,
}

impl SystemSpec {
    pub fn is_autonomous(&self) -> bool {
        self.n_u == 0
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.value)
    }

    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Parameter(format!("{} has no parameter `{name}`", self.name)))?;
        slot.value = value;
        Ok(())
    }

    fn values(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.value).collect()
    }

    /// Human-readable parameter table.
    pub fn describe(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "{}: {}", self.name, self.description);
        let _ = writeln!(s, "  states:  {}", self.state_names.join(", "));
        let inputs = if self.input_names.is_empty() { "(autonomous)".to_string() } else { self.input_names.join(", ") };
        let _ = writeln!(s, "  inputs:  {inputs}");
        let _ = writeln!(s, "  outputs: {}", self.output_names.join(", "));
        let _ = writeln!(s, "  sampling time {} s, default length {}, {} RK4 sub-steps per sample", self.delta, self.n_samples, self.substeps);
        let _ = writeln!(s, "  initial state {:?}", self.x0);
        if self.input_policy.kind == PolicyKind::PrbsSteps {
            let _ = writeln!(
                s,
                "  excitation: uniform random levels in {:?}..{:?}, held {} samples",
                self.input_policy.low, self.input_policy.high, self.input_policy.hold_steps
            );
        }
        let _ = writeln!(s, "  parameters:");
        for p in &self.params {
            let _ = writeln!(s, "    {:<8} = {:<12} {:<10} {}", p.name, p.value, p.unit, p.description);
        }
        s
    }
}

fn names(v: &[&'static str]) -> Vec<&'static str> {
    v.to_vec()
}

/// Looks up an emulator by name.
pub fn builtin(name: &str) -> Result<SystemSpec> {
    let spec = match name {
        "cstr" => SystemSpec {
            name: "cstr",
            description: "exothermic first-order A -> B reaction in a jacketed CSTR; limit-cycle oscillations for coolant temperatures near 305 K",
            n_x: 2,
            n_u: 1,
            n_y: 2,
            state_names: names(&["C_A", "T"]),
            input_names: names(&["T_c"]),
            output_names: names(&["C_A", "T"]),
            params: vec![
                p("V", 100.0, "m^3", "reactor volume"),
                p("q", 100.0, "m^3/min", "feed flow rate"),
                p("Caf", 1.0, "mol/m^3", "feed concentration"),
                p("Tf", 350.0, "K", "feed temperature"),
                p("rho", 1000.0, "kg/m^3", "density"),
                p("Cp", 0.239, "J/(kg K)", "heat capacity"),
                p("mdelH", 5e4, "J/mol", "heat of reaction (negated)"),
                p("EoverR", 8750.0, "K", "activation energy over gas constant"),
                p("k0", 7.2e10, "1/min", "pre-exponential factor"),
                p("UA", 5e4, "J/(min K)", "jacket heat transfer"),
            ],
            x0: CSTR_STEADY_STATE.to_vec(),
            delta: 0.1,
            n_samples: 12000,
            input_policy: InputPolicy::steps(150, vec![305.0], vec![307.5]),
            // Relaxation spikes need fine sub-steps for resolution independence.
            substeps: 200,
            kind: Kind::Cstr,
        },
        "double_pendulum" => SystemSpec {
            name: "double_pendulum",
            description: "frictionless planar double pendulum with unit masses and unit rod lengths",
            n_x: 4,
            n_u: 0,
            n_y: 4,
            state_names: names(&["theta1", "theta2", "omega1", "omega2"]),
            input_names: vec![],
            output_names: names(&["theta1", "theta2", "omega1", "omega2"]),
            params: vec![
                p("m1", 1.0, "kg", "upper bob mass"),
                p("m2", 1.0, "kg", "lower bob mass"),
                p("l1", 1.0, "m", "upper rod length"),
                p("l2", 1.0, "m", "lower rod length"),
                p("g", 9.81, "m/s^2", "gravity"),
            ],
            x0: vec![1.6, 1.9, 0.0, 0.0],
            delta: 0.01,
            n_samples: 2000,
            input_policy: InputPolicy::none(),
            substeps: 10,
            kind: Kind::DoublePendulum,
        },
        "vehicle" => SystemSpec {
            name: "vehicle",
            description: "planar three-degree-of-freedom vehicle body driven by per-wheel longitudinal slip and front steering, Pacejka-type tyre forces",
            n_x: 3,
            n_u: 5,
            n_y: 3,
            state_names: names(&["v_x", "v_y", "r"]),
            input_names: names(&["s_fl", "s_fr", "s_rl", "s_rr", "delta"]),
            output_names: names(&["r", "v_x", "v_y"]),
            params: vec![
                p("m", 1500.0, "kg", "vehicle mass"),
                p("Iz", 2500.0, "kg m^2", "yaw inertia"),
                p("a", 1.2, "m", "CG to front axle"),
                p("b", 1.4, "m", "CG to rear axle"),
                p("tw", 1.6, "m", "track width"),
                p("mu", 0.9, "-", "road friction coefficient"),
                p("Bx", 10.0, "-", "longitudinal stiffness factor"),
                p("Cx", 1.65, "-", "longitudinal shape factor"),
                p("By", 8.0, "-", "lateral stiffness factor"),
                p("Cy", 1.3, "-", "lateral shape factor"),
                p("cd", 0.4, "kg/m", "aerodynamic drag coefficient"),
                p("crr", 0.015, "-", "rolling resistance coefficient"),
                p("g", 9.81, "m/s^2", "gravity"),
            ],
            x0: vec![20.0, 0.0, 0.0],
            delta: 0.02,
            n_samples: 2501,
            input_policy: InputPolicy::steps(
                50,
                vec![-0.005, -0.005, -0.005, -0.005, -0.03],
                vec![0.02, 0.02, 0.02, 0.02, 0.03],
            ),
            substeps: 10,
            kind: Kind::Vehicle,
        },
        "tank" => SystemSpec {
            name: "tank",
            description: "two cascaded gravity-drained tanks fed by a voltage-driven pump; only the lower level is measured",
            n_x: 2,
            n_u: 1,
            n_y: 1,
            state_names: names(&["h1", "h2"]),
            input_names: names(&["V_p"]),
            output_names: names(&["h2"]),
            params: vec![
                p("A1", 15.52, "cm^2", "upper tank cross-section"),
                p("A2", 15.52, "cm^2", "lower tank cross-section"),
                p("a1", 0.178, "cm^2", "upper outlet area"),
                p("a2", 0.178, "cm^2", "lower outlet area"),
                p("kp", 3.3, "cm^3/(s V)", "pump gain"),
                p("g", 981.0, "cm/s^2", "gravity"),
            ],
            x0: vec![5.0, 5.0],
            delta: 0.1,
            n_samples: 3000,
            input_policy: InputPolicy::steps(150, vec![3.0], vec![9.0]),
            substeps: 10,
            kind: Kind::Tank,
        },
        "two_tank" => SystemSpec {
            name: "two_tank",
            description: "two tanks filled by one pump; a valve splits the pump flow and the upper tank drains into the lower",
            n_x: 2,
            n_u: 2,
            n_y: 2,
            state_names: names(&["h1", "h2"]),
            input_names: names(&["pump", "valve"]),
            output_names: names(&["h1", "h2"]),
            params: vec![
                p("c1", 0.08, "m/s", "pump inflow coefficient"),
                p("c2", 0.04, "m^0.5/s", "outflow coefficient"),
            ],
            x0: vec![0.25, 0.5],
            delta: 1.0,
            n_samples: 12000,
            input_policy: InputPolicy::steps(150, vec![0.1, 0.1], vec![0.6, 0.9]),
            substeps: 10,
            kind: Kind::TwoTank,
        },
        "pendulum" => SystemSpec {
            name: "pendulum",
            description: "ideal frictionless pendulum released at large amplitude",
            n_x: 2,
            n_u: 0,
            n_y: 3,
            state_names: names(&["theta", "omega"]),
            input_names: vec![],
            output_names: names(&["theta", "omega", "alpha"]),
            params: vec![p("g", 9.81, "m/s^2", "gravity"), p("l", 1.0, "m", "rod length")],
            x0: vec![2.5, 0.0],
            delta: 0.05,
            n_samples: 493,
            input_policy: InputPolicy::none(),
            substeps: 20,
            kind: Kind::Pendulum,
        },
        "linear_oscillator" => SystemSpec {
            name: "linear_oscillator",
            description: "lightly damped mass-spring oscillator",
            n_x: 2,
            n_u: 0,
            n_y: 3,
            state_names: names(&["x", "v"]),
            input_names: vec![],
            output_names: names(&["x", "v", "a"]),
            params: vec![
                p("k", 1.0, "N/m", "spring stiffness"),
                p("m", 1.0, "kg", "mass"),
                p("c", 0.02, "N s/m", "viscous damping"),
            ],
            x0: vec![1.0, 0.0],
            delta: 0.1,
            n_samples: 870,
            input_policy: InputPolicy::none(),
            substeps: 10,
            kind: Kind::LinearOscillator,
        },
        other => return Err(Error::UnknownSystem(other.to_string())),
    };
    Ok(spec)
}

fn check_dims(spec: &SystemSpec, x: &[f64], u: &[f64]) -> Result<()> {
    if x.len() != spec.n_x || u.len() != spec.n_u {
        return Err(Error::Shape(format!(
            "{} expects |x|={}, |u|={}, got {} and {}",
            spec.name,
            spec.n_x,
            spec.n_u,
            x.len(),
            u.len()
        )));
    }
    Ok(())
}

// Parameter vectors are read positionally in the order of the tables above.
fn rhs_raw(kind: Kind, pv: &[f64], x: &[f64], u: &[f64], dx: &mut [f64]) {
    match kind {
        Kind::Cstr => {
            let [v, q, caf, tf, rho, cp, mdelh, e_over_r, k0, ua] = pv[..] else { unreachable!() };
            let (ca, t) = (x[0], x[1]);
            let rate = k0 * (-e_over_r / t).exp() * ca;
            dx[0] = q / v * (caf - ca) - rate;
            dx[1] = q / v * (tf - t) + mdelh / (rho * cp) * rate + ua / (v * rho * cp) * (u[0] - t);
        }
        Kind::DoublePendulum => {
            let [m1, m2, l1, l2, g] = pv[..] else { unreachable!() };
            let (th1, th2, w1, w2) = (x[0], x[1], x[2], x[3]);
            let d = th2 - th1;
            let (sd, cd) = d.sin_cos();
            let den1 = (m1 + m2) * l1 - m2 * l1 * cd * cd;
            let den2 = (l2 / l1) * den1;
            dx[0] = w1;
            dx[1] = w2;
            dx[2] = (m2 * l1 * w1 * w1 * sd * cd + m2 * g * th2.sin() * cd + m2 * l2 * w2 * w2 * sd
                - (m1 + m2) * g * th1.sin())
                / den1;
            dx[3] = (-m2 * l2 * w2 * w2 * sd * cd + (m1 + m2) * (g * th1.sin() * cd - l1 * w1 * w1 * sd - g * th2.sin()))
                / den2;
        }
        Kind::Vehicle => {
            let [m, iz, a, b, tw, mu, bx, cx, by, cy, cdrag, crr, g] = pv[..] else { unreachable!() };
            let (vx, vy, r) = (x[0], x[1], x[2]);
            let steer = u[4];
            let vxs = vx.max(1.0);
            let fz_f = m * g * b / (2.0 * (a + b));
            let fz_r = m * g * a / (2.0 * (a + b));
            let fz = [fz_f, fz_f, fz_r, fz_r];
            let fx: Vec<f64> = (0..4).map(|i| mu * fz[i] * (cx * (bx * u[i]).atan()).sin()).collect();
            let alpha_f = steer - ((vy + a * r) / vxs).atan();
            let alpha_r = -((vy - b * r) / vxs).atan();
            let fy_f = mu * fz_f * (cy * (by * alpha_f).atan()).sin();
            let fy_r = mu * fz_r * (cy * (by * alpha_r).atan()).sin();
            let (ss, cs) = steer.sin_cos();
            let front_x = (fx[0] + fx[1]) * cs - 2.0 * fy_f * ss;
            let front_y = (fx[0] + fx[1]) * ss + 2.0 * fy_f * cs;
            let resist = cdrag * vx * vx.abs() + crr * m * g * vx.signum();
            let force_x = front_x + fx[2] + fx[3] - resist;
            let force_y = front_y + 2.0 * fy_r;
            let yaw = a * front_y - b * 2.0 * fy_r + 0.5 * tw * ((fx[1] - fx[0]) * cs + fx[3] - fx[2]);
            dx[0] = force_x / m + vy * r;
            dx[1] = force_y / m - vx * r;
            dx[2] = yaw / iz;
        }
        Kind::Tank => {
            let [a1_area, a2_area, a1, a2, kp, g] = pv[..] else { unreachable!() };
            let q1 = a1 * (2.0 * g * x[0].max(0.0)).sqrt();
            let q2 = a2 * (2.0 * g * x[1].max(0.0)).sqrt();
            dx[0] = (kp * u[0] - q1) / a1_area;
            dx[1] = (q1 - q2) / a2_area;
        }
        Kind::TwoTank => {
            let [c1, c2] = pv[..] else { unreachable!() };
            let (pump, valve) = (u[0], u[1]);
            let q1 = c2 * x[0].max(0.0).sqrt();
            let q2 = c2 * x[1].max(0.0).sqrt();
            dx[0] = c1 * (1.0 - valve) * pump - q1;
            dx[1] = c1 * valve * pump + q1 - q2;
        }
        Kind::Pendulum => {
            let [g, l] = pv[..] else { unreachable!() };
            dx[0] = x[1];
            dx[1] = -(g / l) * x[0].sin();
        }
        Kind::LinearOscillator => {
            let [k, m, c] = pv[..] else { unreachable!() };
            dx[0] = x[1];
            dx[1] = -(k * x[0] + c * x[1]) / m;
        }
    }
}

fn observe_raw(kind: Kind, pv: &[f64], x: &[f64], y: &mut [f64]) {
    match kind {
        Kind::Cstr | Kind::DoublePendulum | Kind::TwoTank => y.copy_from_slice(x),
        Kind::Vehicle => {
            y[0] = x[2];
            y[1] = x[0];
            y[2] = x[1];
        }
        Kind::Tank => y[0] = x[1],
        Kind::Pendulum => {
            let [g, l] = pv[..] else { unreachable!() };
            y[0] = x[0];
            y[1] = x[1];
            y[2] = -(g / l) * x[0].sin();
        }
        Kind::LinearOscillator => {
            let [k, m, c] = pv[..] else { unreachable!() };
            y[0] = x[0];
            y[1] = x[1];
            y[2] = -(k * x[0] + c * x[1]) / m;
        }
    }
}

/// Keeps states inside the physical domain (tank levels are non-negative).
fn project(kind: Kind, x: &mut [f64]) {
    if matches!(kind, Kind::Tank | Kind::TwoTank) {
        x.iter_mut().for_each(|h| *h = h.max(0.0));
    }
}

/// `dx/dt` of the true system at state `x` under input `u`.
/// The emulated systems are time-invariant; `t` is accepted for the contract.
pub fn rhs_eval(spec: &SystemSpec, x: &[f64], u: &[f64], _t: f64) -> Result<Vec<f64>> {
    check_dims(spec, x, u)?;
    let mut dx = vec![0.0; spec.n_x];
    rhs_raw(spec.kind, &spec.values(), x, u, &mut dx);
    if dx.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { t: _t, reason: format!("{} derivative is not finite", spec.name) });
    }
    Ok(dx)
}

/// Measurement map `y = g(x)`.
pub fn observe(spec: &SystemSpec, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != spec.n_x {
        return Err(Error::Shape(format!("{} expects |x|={}, got {}", spec.name, spec.n_x, x.len())));
    }
    let mut y = vec![0.0; spec.n_y];
    observe_raw(spec.kind, &spec.values(), x, &mut y);
    Ok(y)
}

/// Simulates `n_samples` samples at sampling time `delta` from the system's
/// initial state, with inputs drawn from `policy` under `seed` and held
/// constant between samples. Each interval is integrated with
/// `spec.substeps` RK4 steps.
pub fn generate(spec: &SystemSpec, n_samples: usize, delta: f64, policy: &InputPolicy, seed: u64) -> Result<Trajectory> {
    generate_with_substeps(spec, n_samples, delta, policy, seed, spec.substeps)
}

/// [`generate`] with an explicit sub-step count (at least 1).
pub fn generate_with_substeps(
    spec: &SystemSpec,
    n_samples: usize,
    delta: f64,
    policy: &InputPolicy,
    seed: u64,
    substeps: usize,
) -> Result<Trajectory> {
    if n_samples < 2 {
        return Err(Error::TooShort { needed: 2, have: n_samples });
    }
    if !(delta > 0.0) || substeps == 0 {
        return Err(Error::Parameter("delta must be positive and substeps at least 1".into()));
    }
    policy.validate(spec.n_u)?;
    let u = policy.signal(n_samples, spec.n_u, seed);
    let pv = spec.values();
    let kind = spec.kind;
    let mut x = spec.x0.clone();
    let mut y = DMatrix::zeros(n_samples, spec.n_y);
    let mut y_row = vec![0.0; spec.n_y];
    let h = delta / substeps as f64;
    for k in 0..n_samples {
        observe_raw(kind, &pv, &x, &mut y_row);
        if y_row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Generation {
                step: k,
                source: Box::new(Error::Divergence { t: k as f64 * delta, reason: "non-finite output".into() }),
            });
        }
        for (c, v) in y_row.iter().enumerate() {
            y[(k, c)] = *v;
        }
        if k + 1 == n_samples {
            break;
        }
        let u_k: Vec<f64> = u.row(k).iter().copied().collect();
        let field = |x: &[f64], _t: f64, dx: &mut [f64]| rhs_raw(kind, &pv, x, &u_k, dx);
        for s in 0..substeps {
            let t = k as f64 * delta + s as f64 * h;
            x = odeint::step_rk4(&field, &x, t, h).map_err(|e| Error::Generation { step: k, source: Box::new(e) })?;
            project(kind, &mut x);
        }
    }
    Trajectory::new(0.0, delta, u, y)
}

/// [`generate`] with the system's default length, sampling time and excitation.
pub fn generate_default(spec: &SystemSpec, seed: u64) -> Result<Trajectory> {
    generate(spec, spec.n_samples, spec.delta, &spec.input_policy, seed)
}

/// Mechanical energy per unit mass scale, for the conservative systems.
pub fn energy(spec: &SystemSpec, x: &[f64]) -> Option<f64> {
    let v = spec.values();
    match spec.kind {
        Kind::Pendulum => {
            let [g, l] = v[..] else { unreachable!() };
            Some(0.5 * l * l * x[1] * x[1] - g * l * x[0].cos())
        }
        Kind::DoublePendulum => {
            let [m1, m2, l1, l2, g] = v[..] else { unreachable!() };
            let (th1, th2, w1, w2) = (x[0], x[1], x[2], x[3]);
            let kinetic = 0.5 * (m1 + m2) * l1 * l1 * w1 * w1
                + 0.5 * m2 * l2 * l2 * w2 * w2
                + m2 * l1 * l2 * w1 * w2 * (th1 - th2).cos();
            let potential = -(m1 + m2) * g * l1 * th1.cos() - m2 * g * l2 * th2.cos();
            Some(kinetic + potential)
        }
        _ => None,
    }
}
