//! Fits a tanh network to a 2-D function with Adam, checking the
//! reverse-mode gradient against central differences first.
//!
//! cargo run --release --example dense_network

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sysid_bench::neural::{Activation, DenseNet, OptState};

fn loss(net: &DenseNet, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    (net.predict_batch(x).unwrap() - y).norm_squared() / y.ncols() as f64
}

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 256;
    let x: DMatrix<f64> = DMatrix::from_fn(2, n, |_, _| rng.gen_range(-2.0..2.0));
    let y = DMatrix::from_fn(1, n, |_, j| (x[(0, j)] * 1.5).sin() * x[(1, j)].cos());
    let mut net = DenseNet::new(&[2, 32, 32, 1], Activation::Tanh, &mut rng)?;

    let grad = |net: &DenseNet| -> anyhow::Result<Vec<f64>> {
        let (out, tape) = net.forward_batch(&x)?;
        let upstream = (out - &y) * (2.0 / n as f64);
        Ok(net.backward(&tape, &upstream)?.0.to_flat())
    };
    let g = grad(&net)?;
    let p = net.params();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for i in (0..p.len()).step_by(37) {
        let mut q = p.clone();
        q[i] += 1e-6;
        probe.set_params(&q)?;
        let up = loss(&probe, &x, &y);
        q[i] -= 2e-6;
        probe.set_params(&q)?;
        let fd = (up - loss(&probe, &x, &y)) / 2e-6;
        worst = worst.max((fd - g[i]).abs());
    }
    println!("{} parameters, max |backprop - central difference| {worst:.2e}", p.len());

    let mut params = net.params();
    let mut opt = OptState::adam(0.01, params.len());
    for step in 0..=2000 {
        let g = grad(&net)?;
        if step % 400 == 0 {
            println!("step {step:>5}  mse {:.4e}", loss(&net, &x, &y));
        }
        opt.step(&mut params, &g)?;
        net.set_params(&params)?;
    }
    Ok(())
}
