//! Aggregation of persisted trial records into summary tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Family;
use super::protocol::{select_best, sensitivity, Forecaster, SystemData, TrainedModel, TrialResult};
use super::run::{model_path, read_jsonl, DATA_DIR, TIMING_FILE, TRIALS_FILE};
use crate::data::{format_value, load_csv, write_csv, Trajectory};
use crate::error::{Error, Result};
use crate::systems;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub key: String,
    pub seconds_per_sample: f64,
    pub samples: Vec<f64>,
    pub unreliable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub family: Family,
    pub trials: usize,
    pub finite: usize,
    pub diverged: usize,
    pub best_key: Option<String>,
    pub best_dev_mse: Option<f64>,
    pub best_test_mse: Option<f64>,
    pub mean_test_mse: Option<f64>,
    pub std_test_mse: Option<f64>,
    /// Median over trials of the seconds per forecast sample.
    pub median_inference: Option<f64>,
    pub timing_unreliable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub system: String,
    pub families: Vec<FamilySummary>,
}

impl SystemSummary {
    pub fn family(&self, f: Family) -> Option<&FamilySummary> {
        self.families.iter().find(|s| s.family == f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub system: String,
    pub metric: String,
    pub numerator: Family,
    pub denominator: Family,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seeds: Vec<u64>,
    pub systems: Vec<SystemSummary>,
    pub ratios: Vec<RatioRow>,
}

impl BenchmarkReport {
    pub fn system(&self, name: &str) -> Option<&SystemSummary> {
        self.systems.iter().find(|s| s.system == name)
    }

    pub fn ratio(&self, system: &str, metric: &str, numerator: Family, denominator: Family) -> Option<f64> {
        self.ratios
            .iter()
            .find(|r| r.system == system && r.metric == metric && r.numerator == numerator && r.denominator == denominator)
            .map(|r| r.value)
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn summarize(family: Family, trials: &[&TrialResult], timings: &BTreeMap<&str, &TimingRecord>) -> FamilySummary {
    let sens = sensitivity(trials.iter().copied());
    let best = select_best(trials.iter().copied());
    let times: Vec<&TimingRecord> = trials.iter().filter_map(|t| timings.get(t.key.as_str()).copied()).collect();
    FamilySummary {
        family,
        trials: trials.len(),
        finite: sens.finite,
        diverged: sens.diverged,
        best_key: best.map(|b| b.key.clone()),
        best_dev_mse: best.map(|b| b.dev_mse),
        best_test_mse: best.map(|b| b.test_mse).filter(|v| v.is_finite()),
        mean_test_mse: (sens.finite > 0).then_some(sens.mean),
        std_test_mse: sens.std,
        median_inference: median(times.iter().map(|t| t.seconds_per_sample).collect()),
        timing_unreliable: times.iter().any(|t| t.unreliable),
    }
}

/// Pure fold over the trial and timing records.
pub fn build_report(trials: &[TrialResult], timings: &[TimingRecord]) -> BenchmarkReport {
    let timing: BTreeMap<&str, &TimingRecord> = timings.iter().map(|t| (t.key.as_str(), t)).collect();
    let mut groups: BTreeMap<&str, BTreeMap<Family, Vec<&TrialResult>>> = BTreeMap::new();
    let mut seeds = BTreeSet::new();
    for t in trials {
        groups.entry(t.system.as_str()).or_default().entry(t.family()).or_default().push(t);
        seeds.insert(t.seed);
    }
    let mut systems = Vec::new();
    let mut ratios = Vec::new();
    for (system, fams) in groups {
        let families: Vec<FamilySummary> = fams.iter().map(|(f, ts)| summarize(*f, ts, &timing)).collect();
        let summary = SystemSummary { system: system.to_string(), families };
        let metrics: [(&str, fn(&FamilySummary) -> Option<f64>); 3] =
            [("best_test_mse", |s| s.best_test_mse), ("test_mse_std", |s| s.std_test_mse), ("inference", |s| s.median_inference)];
        for (metric, get) in metrics {
            for den in [Family::Nssm, Family::Lssm] {
                let (Some(a), Some(b)) = (summary.family(Family::Node).and_then(get), summary.family(den).and_then(get)) else {
                    continue;
                };
                let value = a / b;
                if value.is_finite() {
                    ratios.push(RatioRow { system: system.to_string(), metric: metric.to_string(), numerator: Family::Node, denominator: den, value });
                }
            }
        }
        systems.push(summary);
    }
    BenchmarkReport { seeds: seeds.into_iter().collect(), systems, ratios }
}

fn num(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.6e}"),
        Some(_) => "inf".into(),
        None => "-".into(),
    }
}

/// Accuracy summary. Contains no wall-clock quantities, so a fixed-seed
/// sweep renders identically on every run.
pub fn render_summary(report: &BenchmarkReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Benchmark summary\n");
    let _ = writeln!(s, "Seeds: {:?} (one trial per grid point and seed). Open-loop MSE in raw output units.\n", report.seeds);
    let _ = writeln!(s, "| system | family | trials | diverged | best dev MSE | best test MSE | mean test MSE | std test MSE | best trial |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|");
    for sys in &report.systems {
        for f in &sys.families {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                sys.system,
                f.family,
                f.trials,
                f.diverged,
                num(f.best_dev_mse),
                num(f.best_test_mse),
                num(f.mean_test_mse),
                num(f.std_test_mse),
                f.best_key.as_deref().unwrap_or("-")
            );
        }
    }
    let rows: Vec<&RatioRow> = report.ratios.iter().filter(|r| r.metric != "inference").collect();
    if !rows.is_empty() {
        let _ = writeln!(s, "\n| system | metric | ratio | value |");
        let _ = writeln!(s, "|---|---|---|---|");
        for r in rows {
            let _ = writeln!(s, "| {} | {} | {}/{} | {:.6e} |", r.system, r.metric, r.numerator, r.denominator, r.value);
        }
    }
    s
}

/// Inference-time table with NODE/NSSM and NODE/LSSM ratios.
pub fn render_timing(report: &BenchmarkReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Inference time\n");
    let _ = writeln!(s, "Median seconds per forecast sample over each family's trials.\n");
    let _ = writeln!(s, "| system | family | s/sample | unreliable |");
    let _ = writeln!(s, "|---|---|---|---|");
    for sys in &report.systems {
        for f in &sys.families {
            let _ = writeln!(s, "| {} | {} | {} | {} |", sys.system, f.family, num(f.median_inference), f.timing_unreliable);
        }
    }
    let _ = writeln!(s, "\n| system | ratio | value |");
    let _ = writeln!(s, "|---|---|---|");
    for r in report.ratios.iter().filter(|r| r.metric == "inference") {
        let _ = writeln!(s, "| {} | {}/{} | {:.3} |", r.system, r.numerator, r.denominator, r.value);
    }
    s
}

/// Plot-ready rows `system,family,metric,value`.
pub fn long_table(report: &BenchmarkReport) -> String {
    let mut s = String::from("system,family,metric,value\n");
    for sys in &report.systems {
        for f in &sys.families {
            for (metric, v) in [
                ("best_test_mse", f.best_test_mse),
                ("best_dev_mse", f.best_dev_mse),
                ("mean_test_mse", f.mean_test_mse),
                ("std_test_mse", f.std_test_mse),
                ("median_inference_s", f.median_inference),
            ] {
                if let Some(v) = v.filter(|v| v.is_finite()) {
                    let _ = writeln!(s, "{},{},{},{}", sys.system, f.family, metric, format_value(v));
                }
            }
        }
    }
    for r in &report.ratios {
        let _ = writeln!(s, "{},{}/{},{}_ratio,{}", r.system, r.numerator, r.denominator, r.metric, format_value(r.value));
    }
    s
}

fn mse_cell(v: f64) -> String {
    if v.is_finite() {
        format_value(v)
    } else {
        "inf".into()
    }
}

/// One row per trial, sorted by key.
pub fn trials_csv(trials: &[TrialResult]) -> String {
    let mut sorted: Vec<&TrialResult> = trials.iter().collect();
    sorted.sort_by(|a, b| a.key.cmp(&b.key));
    let mut s = String::from("key,system,family,params,seed,train_mse,dev_mse,test_mse,train_seconds,diverged,error\n");
    for t in sorted {
        let err = t.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            t.key,
            t.system,
            t.family(),
            t.params.label(),
            t.seed,
            mse_cell(t.train_mse),
            mse_cell(t.dev_mse),
            mse_cell(t.test_mse),
            format_value(t.train_seconds),
            t.diverged,
            err
        );
    }
    s
}

/// Reads the trial and timing logs of a results directory.
pub fn read_results(dir: &Path) -> Result<(Vec<TrialResult>, Vec<TimingRecord>)> {
    let trials: Vec<TrialResult> = read_jsonl(&dir.join(TRIALS_FILE))?;
    let timings = if dir.join(TIMING_FILE).exists() { read_jsonl(&dir.join(TIMING_FILE))? } else { Vec::new() };
    Ok((trials, timings))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the report files for the results in `results_dir` into `out_dir`
/// and returns the aggregated report.
pub fn emit_report(results_dir: &Path, out_dir: &Path) -> Result<BenchmarkReport> {
    let (trials, timings) = read_results(results_dir)?;
    if trials.is_empty() {
        return Err(Error::Config(format!("no trial records in {}", results_dir.display())));
    }
    let report = build_report(&trials, &timings);
    let traj_dir = out_dir.join("trajectories");
    std::fs::create_dir_all(&traj_dir).map_err(|e| Error::io(&traj_dir, e))?;
    write(&out_dir.join("summary.md"), &render_summary(&report))?;
    write(&out_dir.join("timing.md"), &render_timing(&report))?;
    write(&out_dir.join("long.csv"), &long_table(&report))?;
    write(&out_dir.join("trials.csv"), &trials_csv(&trials))?;
    write(&out_dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    for sys in &report.systems {
        let data_path = results_dir.join(DATA_DIR).join(format!("{}.csv", sys.system));
        if !data_path.exists() {
            continue;
        }
        let spec = systems::builtin(&sys.system)?;
        let data = SystemData::from_trajectory(&sys.system, &load_csv(&data_path, spec.n_u, spec.n_y)?)?;
        for f in &sys.families {
            let Some(key) = &f.best_key else { continue };
            let path = model_path(results_dir, key);
            if !path.exists() {
                continue;
            }
            let model = TrainedModel::load(&path)?;
            let Ok((pred, truth)) = model.forecast(&data.raw.dev, &data.raw.test) else { continue };
            let test = if model.downsample > 1 { crate::data::downsample(&data.raw.test, model.downsample)? } else { data.raw.test.clone() };
            let stem = format!("{}_{}", sys.system, f.family);
            write_csv(traj_dir.join(format!("{stem}_pred.csv")), &test.with_outputs(pred)?)?;
            write_csv(traj_dir.join(format!("{stem}_true.csv")), &Trajectory::with_times(test.times().to_vec(), test.delta(), test.inputs().clone(), truth)?)?;
        }
    }
    Ok(report)
}
