//! Trains neural state-space models with plain and soft-SVD linear maps on
//! the tank system, downsampled by 10, and compares their test forecasts.
//!
//! cargo run --release --example neural_state_space -- [EPOCHS]

use sysid_bench::bench::SystemData;
use sysid_bench::data::{downsample, DatasetSplit};
use sysid_bench::nssm::{self, BlockKind, LinearMapKind, LossConfig, NssmConfig, NssmModel, NssmTrainConfig};
use sysid_bench::systems;

fn main() -> anyhow::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(Ok(1500), |s| s.parse())?;
    let spec = systems::builtin("tank")?;
    let data = SystemData::from_trajectory("tank", &systems::generate_default(&spec, 0)?)?;
    let ds = |t| downsample(t, 10);
    let split = DatasetSplit { train: ds(&data.norm.train)?, dev: ds(&data.norm.dev)?, test: ds(&data.norm.test)? };
    let n_steps = 20;

    for (map, block) in [(LinearMapKind::Plain, BlockKind::Linear), (LinearMapKind::SoftSvd, BlockKind::Linear), (LinearMapKind::SoftSvd, BlockKind::Mlp)] {
        let cfg = NssmConfig { state_multiplier: 10, n_p: n_steps, block, linear_map: map, ..NssmConfig::default() };
        let model = NssmModel::new(spec.n_y, spec.n_u, cfg, 0)?;
        let train_cfg = NssmTrainConfig {
            epochs,
            n_steps,
            batch_size: Some(128),
            eval_every: 50,
            loss: LossConfig { q_dx: 0.1, ..LossConfig::default() },
            ..NssmTrainConfig::default()
        };
        let start = std::time::Instant::now();
        let (model, history) = nssm::train_nssm(&model, &split, &train_cfg)?;
        let test = nssm::segment_mse(&model, &split.dev, &split.test);
        println!(
            "{map:?}/{block:?}: {} params, best epoch {}, dev {:.3e}, test {test:.3e} (normalized), svd penalty {:.1e}, {:.1}s",
            model.n_params(),
            history.best_epoch,
            history.best_dev_mse,
            model.svd_penalty(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
