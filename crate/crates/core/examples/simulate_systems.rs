//! Simulates every built-in system, splits the series into thirds and
//! writes one CSV per system.
//!
//! cargo run --release --example simulate_systems -- [OUT_DIR]

use sysid_bench::data::{normalize, split_thirds, write_csv};
use sysid_bench::systems::{self, BUILTIN_SYSTEMS};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "simulated".into());
    std::fs::create_dir_all(&out)?;
    for name in BUILTIN_SYSTEMS {
        let spec = systems::builtin(name)?;
        let tr = systems::generate_default(&spec, 0)?;
        let split = split_thirds(&tr)?;
        let (_, stats) = normalize(&split.train)?;
        let (a, b, c) = split.lengths();
        println!("{name:<18} {:>6} samples  thirds {a}/{b}/{c}  output std {:.3?}", tr.len(), stats.output_std);
        write_csv(format!("{out}/{name}.csv"), &tr)?;
    }
    println!("wrote CSV files to {out}/");
    Ok(())
}
