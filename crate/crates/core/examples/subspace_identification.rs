//! Identifies linear state-space models of the tank system with N4SID,
//! MOESP and CVA over a few orders, and scores each by open-loop simulation
//! from an initial state estimated on the preceding data.
//!
//! cargo run --release --example subspace_identification

use sysid_bench::bench::SystemData;
use sysid_bench::subspace::{estimate_x0, identify, lssm_simulate, SimMode, SubspaceConfig, SubspaceMethod};
use sysid_bench::systems;

fn main() -> anyhow::Result<()> {
    let spec = systems::builtin("tank")?;
    let data = SystemData::from_trajectory("tank", &systems::generate_default(&spec, 0)?)?;
    let (train, dev) = (&data.norm.train, &data.norm.dev);
    let window = 100;
    let lead = train.slice(train.len() - window, train.len())?;

    for method in SubspaceMethod::ALL {
        for n_x in [2, 4, 8] {
            let id = identify(train, &SubspaceConfig::new(method, n_x, 10))?;
            let sv: Vec<String> = id.singular_values.iter().take(5).map(|s| format!("{s:.2e}")).collect();
            let (x0, _) = estimate_x0(&id.model, lead.outputs(), lead.inputs())?;
            let mut u = lead.inputs().clone().resize_vertically(window + dev.len(), 0.0);
            u.rows_mut(window, dev.len()).copy_from(dev.inputs());
            let score = match lssm_simulate(&id.model, &x0, &u, SimMode::OpenLoop, None) {
                Ok(y) => format!("{:.3e}", (y.rows(window, dev.len()) - dev.outputs()).norm_squared() / dev.len() as f64),
                Err(e) => format!("failed ({e})"),
            };
            println!("{:<6} n_x {n_x}: spectral radius {:.4}, dev MSE {score}, leading singular values [{}]", method.name(), id.model.spectral_radius(), sv.join(", "));
        }
    }
    Ok(())
}
