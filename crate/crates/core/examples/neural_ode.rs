//! Trains a data-controlled neural ODE on the two-tank system with one-step
//! windows and forecasts the test third open loop from its first sample.
//!
//! cargo run --release --example neural_ode -- [EPOCHS]

use sysid_bench::bench::{open_loop_mse, SystemData};
use sysid_bench::node::{train_node, NodeConfig, NodeModel, NodeTrainConfig};
use sysid_bench::systems;

fn main() -> anyhow::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(Ok(2000), |s| s.parse())?;
    let spec = systems::builtin("two_tank")?;
    let tr = systems::generate(&spec, 3000, spec.delta, &spec.input_policy, 0)?;
    let data = SystemData::from_trajectory("two_tank", &tr)?;

    let cfg = NodeConfig { latent_multiplier: 1, field_hidden: 128, encoder_hidden: 64, ..NodeConfig::default() };
    let model = NodeModel::new(spec.n_y, spec.n_u, cfg, 0)?;
    println!("latent size {}, {} parameters", model.n_x(), model.n_params());
    let train_cfg = NodeTrainConfig { epochs, batch_size: Some(64), eval_every: 25, ..NodeTrainConfig::default() };
    let (model, history) = train_node(&model, &data.norm, &train_cfg)?;
    for r in history.records.iter().filter(|r| r.epoch % 250 == 0) {
        println!("epoch {:>5}  one-step loss {:.3e}  dev open-loop MSE {:.3e}", r.epoch, r.train_loss, r.dev_mse.unwrap_or(f64::NAN));
    }
    println!("kept epoch {} (dev MSE {:.3e})", history.best_epoch, history.best_dev_mse);

    let pred = model.forecast_trajectory(&data.norm.test)?;
    let pred_raw = data.stats.denormalize_outputs(&pred);
    let mse = open_loop_mse(&pred_raw, data.raw.test.outputs())?;
    println!("test open-loop MSE {mse:.4e} over {} samples", pred.nrows());
    for k in (0..pred.nrows()).step_by(pred.nrows() / 5) {
        println!("  t={:>7.1}  true {:.3?}  forecast {:.3?}", data.raw.test.time(k), data.raw.test.output_row(k), pred_raw.row(k).iter().collect::<Vec<_>>());
    }
    Ok(())
}
