//! Fixed-step and adaptive integration of a damped oscillator, with the
//! empirical convergence order of each fixed-step method.
//!
//! cargo run --release --example ode_solvers

use sysid_bench::odeint::{integrate, Method, SolverConfig};

fn oscillator(x: &[f64], _t: f64, dx: &mut [f64]) {
    dx[0] = x[1];
    dx[1] = -x[0] - 0.1 * x[1];
}

/// Closed form for x(0) = (1, 0).
fn exact(t: f64) -> f64 {
    let w = (1.0f64 - 0.0025).sqrt();
    (-0.05 * t).exp() * ((w * t).cos() + 0.05 / w * (w * t).sin())
}

fn main() -> anyhow::Result<()> {
    let t_end = 10.0;
    for method in [Method::Euler, Method::Rk4] {
        let mut prev: Option<f64> = None;
        print!("{method:?}:");
        for k in 4..=9 {
            let h = 2f64.powi(-k);
            let sol = integrate(&oscillator, &[1.0, 0.0], &[0.0, t_end], &SolverConfig::fixed(method, h))?;
            let err = (sol.states[1][0] - exact(t_end)).abs();
            match prev {
                Some(p) => print!("  h=2^-{k} err {err:.2e} order {:.2}", (p / err).log2()),
                None => print!("  h=2^-{k} err {err:.2e}"),
            }
            prev = Some(err);
        }
        println!();
    }
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
    for rtol in [1e-4, 1e-6, 1e-8, 1e-10] {
        let sol = integrate(&oscillator, &[1.0, 0.0], &grid, &SolverConfig::dopri5(rtol, rtol * 1e-2))?;
        let worst = grid.iter().zip(&sol.states).map(|(&t, x)| (x[0] - exact(t)).abs()).fold(0.0, f64::max);
        println!("dopri5 rtol {rtol:.0e}: max error {worst:.2e}, {} accepted / {} rejected steps", sol.stats.accepted, sol.stats.rejected);
    }
    Ok(())
}
