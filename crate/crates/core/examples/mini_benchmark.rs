//! Runs a small grid sweep over all three model families on two systems and
//! prints the report. Results go to `mini-results/` unless a directory is
//! given; an existing directory is resumed.
//!
//! cargo run --release --example mini_benchmark -- [OUT_DIR]

use sysid_bench::bench::{run_benchmark, BenchConfig, Profile, RunOptions};

const CONFIG: &str = r#"
systems = ["two_tank", "pendulum"]
n_samples = 900
[grid.node]
latent_multiplier = [1, 5]
field_hidden = [32]
encoder_hidden = [32]
[grid.nssm]
linear_map = ["plain", "soft_svd"]
block = ["linear", "mlp"]
q_dx = [0.1]
n_steps = [10]
state_multiplier = [10]
[grid.lssm]
method = ["n4sid", "moesp", "cva"]
n_x = [4, 8]
horizon = [10]
[node]
epochs = 300
eval_every = 25
[nssm]
epochs = 400
eval_every = 25
"#;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "mini-results".into());
    let mut cfg = BenchConfig::from_toml(CONFIG, Profile::Desk)?;
    cfg.output_dir = out.clone().into();
    let resume = cfg.output_dir.join("trials.jsonl").exists();
    let outcome = run_benchmark(&cfg, &RunOptions { resume, verbose: true, ..RunOptions::default() })?;
    println!("{} trials run, {} reused", outcome.executed.len(), outcome.skipped);
    println!("{}", std::fs::read_to_string(format!("{out}/report/summary.md"))?);
    println!("{}", std::fs::read_to_string(format!("{out}/report/timing.md"))?);
    Ok(())
}
