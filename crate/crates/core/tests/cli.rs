use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_sysid-bench")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("tank.csv");
    bin(&["generate", "--system", "tank", "--n", "900", "--seed", "2", "--out", path(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("t,u1,y1\n"));
    assert_eq!(text.lines().count(), 901);

    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, "[nssm]\nepochs = 30\n[train]\nseed = 4\ngrid_index = 1\n").unwrap();
    for family in ["nssm", "lssm", "node"] {
        let ckpt = dir.path().join(format!("{family}.json"));
        let config = if family == "node" { "node_cfg.toml" } else { "train.toml" };
        if family == "node" {
            std::fs::write(dir.path().join(config), "[node]\nepochs = 5\n").unwrap();
        }
        let trained = stdout(&bin(&["train", "--family", family, "--data", path(&csv), "--config", path(&dir.path().join(config)), "--out", path(&ckpt)]));
        let evaluated = stdout(&bin(&["evaluate", "--ckpt", path(&ckpt), "--data", path(&csv)]));
        assert!(evaluated.starts_with(&format!("family {family}\n")), "{evaluated}");
        // Same split and anchoring in both commands.
        let test_line = evaluated.lines().find(|l| l.starts_with("test_mse")).unwrap();
        let value = test_line.split_whitespace().nth(1).unwrap();
        assert!(trained.contains(&format!("test {value}")), "{trained} vs {evaluated}");
    }
}

#[test]
fn benchmark_resume_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("results");
    let cfg = dir.path().join("bench.toml");
    std::fs::write(
        &cfg,
        r#"
systems = ["pendulum"]
families = ["lssm", "nssm"]
n_samples = 150
[grid.nssm]
linear_map = ["plain"]
block = ["linear"]
q_dx = [0.0]
n_steps = [2]
state_multiplier = [2]
[grid.lssm]
method = ["n4sid", "moesp"]
n_x = [2]
horizon = [3]
[nssm]
epochs = 10
"#,
    )
    .unwrap();
    let common = ["benchmark", "--config", path(&cfg), "--out", path(&results), "--quiet"];
    bin(&[&common[..], &["--max-trials", "1"]].concat());
    let again = Command::new(env!("CARGO_BIN_EXE_sysid-bench")).args(common).output().unwrap();
    assert!(!again.status.success(), "an existing log needs --resume");
    let done = bin(&[&common[..], &["--resume"]].concat());
    assert!(String::from_utf8_lossy(&done.stderr).contains("2 trials run, 1 skipped"));
    assert!(stdout(&done).contains("| pendulum | lssm |"));
    for f in ["summary.md", "timing.md", "long.csv", "trials.csv", "report.json"] {
        assert!(results.join("report").join(f).exists(), "{f}");
    }

    let rebuilt = dir.path().join("rebuilt");
    bin(&["report", "--results", path(&results), "--out", path(&rebuilt)]);
    assert_eq!(
        std::fs::read_to_string(rebuilt.join("summary.md")).unwrap(),
        std::fs::read_to_string(results.join("report/summary.md")).unwrap()
    );
}

#[test]
fn describe_lists_systems_and_grids() {
    let text = stdout(&bin(&["describe"]));
    for name in ["cstr", "double_pendulum", "vehicle", "tank", "two_tank", "pendulum", "linear_oscillator"] {
        assert!(text.contains(name), "{name}");
    }
    assert!(text.contains("node 48, nssm 180, lssm 75"));
    let one = stdout(&bin(&["describe", "--system", "cstr"]));
    assert!(one.contains("parameters:"));
}
