//! Sweep execution with an append-only trial log.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Mutex};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::config::{BenchConfig, Trial};
use super::protocol::{measure_inference, run_trial, SystemData, TrainedModel, TrialResult};
use super::report::{emit_report, BenchmarkReport, TimingRecord};
use crate::data::write_csv;
use crate::error::{Error, Result};

pub const TRIALS_FILE: &str = "trials.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const MODELS_DIR: &str = "models";
pub const DATA_DIR: &str = "data";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_DIR: &str = "report";

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub jobs: usize,
    /// Continue an existing log, skipping recorded trials.
    pub resume: bool,
    /// Stop after this many newly executed trials.
    pub max_trials: Option<usize>,
    /// Skip the timing pass.
    pub skip_timing: bool,
    pub verbose: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1, resume: false, max_trials: None, skip_timing: false, verbose: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    /// Keys of the trials run by this call, in completion order.
    pub executed: Vec<String>,
    pub skipped: usize,
    /// `None` when `max_trials` stopped the sweep early.
    pub report: Option<BenchmarkReport>,
}

pub fn model_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(MODELS_DIR).join(format!("{}.json", key.replace('/', "__")))
}

/// Reads a JSON-lines file. A malformed final line (an interrupted write)
/// is dropped; malformed lines elsewhere are errors.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => break,
            Err(e) => return Err(Error::Schema(format!("{} line {}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

fn rewrite_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_line<T: Serialize>(path: &Path, item: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(item)?;
    line.push('\n');
    f.write_all(line.as_bytes()).and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Runs every trial of `cfg` not yet in the log, then the timing pass and
/// the report. Trial failures are recorded, not raised.
pub fn run_benchmark(cfg: &BenchConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    let trials_path = dir.join(TRIALS_FILE);
    let mut done: Vec<TrialResult> = Vec::new();
    if trials_path.exists() {
        if !opts.resume {
            return Err(Error::Config(format!("{} already exists; resume or choose another output directory", trials_path.display())));
        }
        done = read_jsonl(&trials_path)?;
        rewrite_jsonl(&trials_path, &done)?;
    }
    mkdir(&dir.join(MODELS_DIR))?;
    mkdir(&dir.join(DATA_DIR))?;
    let config_text = cfg.to_toml()?;
    std::fs::write(dir.join(CONFIG_FILE), config_text).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;

    let mut datasets = BTreeMap::new();
    for name in &cfg.systems {
        let data = SystemData::prepare(name, cfg)?;
        write_csv(dir.join(DATA_DIR).join(format!("{name}.csv")), &data.full()?)?;
        datasets.insert(name.clone(), data);
    }

    let all = cfg.trials();
    let finished: BTreeSet<&str> = done.iter().map(|r| r.key.as_str()).collect();
    let mut pending: Vec<Trial> = all.iter().filter(|t| !finished.contains(t.key().as_str())).cloned().collect();
    let skipped = all.len() - pending.len();
    let truncated = opts.max_trials.is_some_and(|m| m < pending.len());
    if let Some(m) = opts.max_trials {
        pending.truncate(m);
    }
    if opts.verbose {
        for f in &cfg.families {
            eprintln!("{f}: {} grid points x {} seeds per system", cfg.grid.count(*f), cfg.seeds.len());
        }
        eprintln!("{} trials total, {} already recorded, {} to run", all.len(), skipped, pending.len());
    }

    let total = pending.len();
    let queue = Mutex::new(pending.into_iter());
    let (tx, rx) = mpsc::channel::<(TrialResult, Option<TrainedModel>)>();
    let mut executed = Vec::with_capacity(total);
    let mut write_err = None;
    std::thread::scope(|s| {
        for _ in 0..opts.jobs.max(1) {
            let tx = tx.clone();
            let (queue, datasets) = (&queue, &datasets);
            s.spawn(move || loop {
                let next = queue.lock().unwrap_or_else(|p| p.into_inner()).next();
                let Some(trial) = next else { break };
                let out = run_trial(&datasets[&trial.system], &trial, cfg);
                if tx.send(out).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (result, model) in rx {
            if write_err.is_some() {
                continue;
            }
            let saved = model.map_or(Ok(()), |m| m.save(&model_path(dir, &result.key))).and_then(|_| append_line(&trials_path, &result));
            match saved {
                Ok(()) => {
                    if opts.verbose {
                        eprintln!(
                            "[{}/{total}] {} dev {:.4e} test {:.4e} ({:.1}s){}",
                            executed.len() + 1,
                            result.key,
                            result.dev_mse,
                            result.test_mse,
                            result.train_seconds,
                            result.error.as_deref().map(|e| format!(" error: {e}")).unwrap_or_default()
                        );
                    }
                    executed.push(result.key);
                }
                Err(e) => write_err = Some(e),
            }
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    if truncated {
        return Ok(RunOutcome { executed, skipped, report: None });
    }
    if !opts.skip_timing {
        timing_pass(cfg, &datasets, opts.verbose)?;
    }
    let report = emit_report(dir, &dir.join(REPORT_DIR))?;
    Ok(RunOutcome { executed, skipped, report: Some(report) })
}

/// Times every recorded model that has no timing record, one at a time.
fn timing_pass(cfg: &BenchConfig, datasets: &BTreeMap<String, SystemData>, verbose: bool) -> Result<()> {
    let dir = &cfg.output_dir;
    let timing_path = dir.join(TIMING_FILE);
    let mut timed: BTreeSet<String> = BTreeSet::new();
    if timing_path.exists() {
        let recs: Vec<TimingRecord> = read_jsonl(&timing_path)?;
        rewrite_jsonl(&timing_path, &recs)?;
        timed.extend(recs.into_iter().map(|r| r.key));
    }
    let trials: Vec<TrialResult> = read_jsonl(&dir.join(TRIALS_FILE))?;
    for t in trials {
        let path = model_path(dir, &t.key);
        if timed.contains(&t.key) || !path.exists() {
            continue;
        }
        let Some(data) = datasets.get(&t.system) else { continue };
        let model = TrainedModel::load(&path)?;
        let Ok(timing) = measure_inference(&model, &data.raw.dev, &data.raw.test, cfg.timing_repeats) else { continue };
        if verbose {
            eprintln!("timing {} {:.3e} s/sample", t.key, timing.seconds_per_sample);
        }
        append_line(&timing_path, &TimingRecord { key: t.key.clone(), seconds_per_sample: timing.seconds_per_sample, samples: timing.samples, unreliable: timing.unreliable })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_drops_only_a_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(&p, "1\n2\n{\"a\":").unwrap();
        assert_eq!(read_jsonl::<i32>(&p).unwrap(), vec![1, 2]);
        std::fs::write(&p, "1\noops\n2\n").unwrap();
        assert!(read_jsonl::<i32>(&p).is_err());
        rewrite_jsonl(&p, &[4, 5]).unwrap();
        append_line(&p, &6).unwrap();
        assert_eq!(read_jsonl::<i32>(&p).unwrap(), vec![4, 5, 6]);
    }

    #[test]
    fn model_paths_are_flat() {
        let p = model_path(Path::new("/r"), "tank/lssm/n4sid_x2_f5/seed0");
        assert_eq!(p, Path::new("/r/models/tank__lssm__n4sid_x2_f5__seed0.json"));
    }
}
