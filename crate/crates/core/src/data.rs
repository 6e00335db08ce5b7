//! Uniformly sampled input/output trajectories and the dataset plumbing
//! around them: CSV interchange, splitting, decimation, normalization and
//! sliding windows.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when validating a uniform time grid.
pub const GRID_RTOL: f64 = 1e-9;

/// Smallest standard deviation a channel is normalized by.
pub const STD_FLOOR: f64 = 1e-12;

/// One batch of measurements: inputs `u` and outputs `y` sampled on a
/// uniform grid `t0 + k * delta`.
///
/// Rows are samples. Autonomous systems carry an `N x 0` input matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    delta: f64,
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(t0: f64, delta: f64, inputs: DMatrix<f64>, outputs: DMatrix<f64>) -> Result<Self> {
        let times = (0..outputs.nrows()).map(|k| t0 + k as f64 * delta).collect();
        Self::with_times(times, delta, inputs, outputs)
    }

    /// Builds from explicit time stamps, which must lie on the uniform grid
    /// `times[0] + k * delta` within [`GRID_RTOL`].
    pub fn with_times(times: Vec<f64>, delta: f64, inputs: DMatrix<f64>, outputs: DMatrix<f64>) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Parameter(format!("sampling time must be positive, got {delta}")));
        }
        if inputs.nrows() != outputs.nrows() || times.len() != outputs.nrows() {
            return Err(Error::Shape(format!(
                "{} time stamps, {} input rows, {} output rows",
                times.len(),
                inputs.nrows(),
                outputs.nrows()
            )));
        }
        if outputs.nrows() < 2 {
            return Err(Error::TooShort { needed: 2, have: outputs.nrows() });
        }
        if let Some(k) = times.iter().position(|t| !t.is_finite()) {
            return Err(Error::Data { row: k, reason: "non-finite time stamp".into() });
        }
        let t0 = times[0];
        for (k, &t) in times.iter().enumerate() {
            let expected = t0 + k as f64 * delta;
            let scale = t.abs().max(expected.abs()).max(delta);
            if (t - expected).abs() > GRID_RTOL * scale {
                return Err(Error::Grid { row: k, expected, found: t });
            }
        }
        for (name, m) in [("input", &inputs), ("output", &outputs)] {
            for r in 0..m.nrows() {
                if let Some(c) = (0..m.ncols()).find(|&c| !m[(r, c)].is_finite()) {
                    return Err(Error::Data { row: r, reason: format!("non-finite {name} in column {c}") });
                }
            }
        }
        Ok(Self { times, delta, inputs, outputs })
    }

    /// Builds an autonomous trajectory (no inputs).
    pub fn autonomous(t0: f64, delta: f64, outputs: DMatrix<f64>) -> Result<Self> {
        let inputs = DMatrix::zeros(outputs.nrows(), 0);
        Self::new(t0, delta, inputs, outputs)
    }

    pub fn len(&self) -> usize {
        self.outputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_u(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.outputs.ncols()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn t0(&self) -> f64 {
        self.times[0]
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    pub fn input_row(&self, k: usize) -> Vec<f64> {
        self.inputs.row(k).iter().copied().collect()
    }

    pub fn output_row(&self, k: usize) -> Vec<f64> {
        self.outputs.row(k).iter().copied().collect()
    }

    /// Rows `[start, end)` as a new trajectory with its time origin shifted.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Parameter(format!("invalid row range {start}..{end} for length {}", self.len())));
        }
        let n = end - start;
        Self::with_times(
            self.times[start..end].to_vec(),
            self.delta,
            self.inputs.rows(start, n).into_owned(),
            self.outputs.rows(start, n).into_owned(),
        )
    }

    /// Returns a copy with `outputs` replaced (same grid, same inputs).
    pub fn with_outputs(&self, outputs: DMatrix<f64>) -> Result<Self> {
        Self::with_times(self.times.clone(), self.delta, self.inputs.clone(), outputs)
    }
}

/// Contiguous train / dev / test thirds of one source trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Trajectory,
    pub dev: Trajectory,
    pub test: Trajectory,
}

impl DatasetSplit {
    pub fn lengths(&self) -> (usize, usize, usize) {
        (self.train.len(), self.dev.len(), self.test.len())
    }

    /// Row offsets of (dev, test) in the source trajectory.
    pub fn offsets(&self) -> (usize, usize) {
        (self.train.len(), self.train.len() + self.dev.len())
    }
}

/// Splits into equal contiguous thirds. The `N mod 3` leftover rows go one
/// each to train, then dev.
pub fn split_thirds(tr: &Trajectory) -> Result<DatasetSplit> {
    let n = tr.len();
    if n < 6 {
        return Err(Error::TooShort { needed: 6, have: n });
    }
    let base = n / 3;
    let rem = n % 3;
    let n_train = base + usize::from(rem >= 1);
    let n_dev = base + usize::from(rem >= 2);
    Ok(DatasetSplit {
        train: tr.slice(0, n_train)?,
        dev: tr.slice(n_train, n_train + n_dev)?,
        test: tr.slice(n_train + n_dev, n)?,
    })
}

/// Strided decimation: keeps rows `0, factor, 2*factor, ...`.
pub fn downsample(tr: &Trajectory, factor: usize) -> Result<Trajectory> {
    if factor == 0 {
        return Err(Error::Parameter("downsampling factor must be at least 1".into()));
    }
    if factor == 1 {
        return Ok(tr.clone());
    }
    let keep: Vec<usize> = (0..tr.len()).step_by(factor).collect();
    if keep.len() < 2 {
        return Err(Error::TooShort { needed: factor + 1, have: tr.len() });
    }
    let inputs = tr.inputs.select_rows(keep.iter());
    let outputs = tr.outputs.select_rows(keep.iter());
    let times = keep.iter().map(|&k| tr.times[k]).collect();
    Trajectory::with_times(times, tr.delta * factor as f64, inputs, outputs)
}

/// Per-channel affine normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
    /// Channels whose raw std fell below [`STD_FLOOR`]: inputs first, then outputs.
    pub constant_channels: Vec<bool>,
}

fn column_stats(m: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let n = m.nrows() as f64;
    let mut means = Vec::with_capacity(m.ncols());
    let mut stds = Vec::with_capacity(m.ncols());
    let mut flags = Vec::with_capacity(m.ncols());
    for col in m.column_iter() {
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        flags.push(std < STD_FLOOR);
        means.push(mean);
        stds.push(std.max(STD_FLOOR));
    }
    (means, stds, flags)
}

fn affine_columns(m: &DMatrix<f64>, f: impl Fn(usize, f64) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| f(c, m[(r, c)]))
}

impl NormStats {
    /// Population mean and std per channel of `tr`.
    pub fn fit(tr: &Trajectory) -> Self {
        let (input_mean, input_std, mut constant_channels) = column_stats(&tr.inputs);
        let (output_mean, output_std, out_flags) = column_stats(&tr.outputs);
        constant_channels.extend(out_flags);
        Self { input_mean, input_std, output_mean, output_std, constant_channels }
    }

    pub fn has_constant_channel(&self) -> bool {
        self.constant_channels.iter().any(|&c| c)
    }

    pub fn apply(&self, tr: &Trajectory) -> Result<Trajectory> {
        self.check_dims(tr)?;
        Trajectory::with_times(tr.times.clone(), tr.delta, self.normalize_inputs(&tr.inputs), self.normalize_outputs(&tr.outputs))
    }

    pub fn invert(&self, tr: &Trajectory) -> Result<Trajectory> {
        self.check_dims(tr)?;
        let inputs = affine_columns(&tr.inputs, |c, v| v * self.input_std[c] + self.input_mean[c]);
        Trajectory::with_times(tr.times.clone(), tr.delta, inputs, self.denormalize_outputs(&tr.outputs))
    }

    pub fn normalize_inputs(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        affine_columns(m, |c, v| (v - self.input_mean[c]) / self.input_std[c])
    }

    pub fn normalize_outputs(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        affine_columns(m, |c, v| (v - self.output_mean[c]) / self.output_std[c])
    }

    pub fn denormalize_outputs(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        affine_columns(m, |c, v| v * self.output_std[c] + self.output_mean[c])
    }

    fn check_dims(&self, tr: &Trajectory) -> Result<()> {
        if tr.n_u() != self.input_mean.len() || tr.n_y() != self.output_mean.len() {
            return Err(Error::Shape(format!(
                "stats are for n_u={}, n_y={} but trajectory has n_u={}, n_y={}",
                self.input_mean.len(),
                self.output_mean.len(),
                tr.n_u(),
                tr.n_y()
            )));
        }
        Ok(())
    }
}

/// Normalizes `tr` by its own statistics.
pub fn normalize(tr: &Trajectory) -> Result<(Trajectory, NormStats)> {
    let stats = NormStats::fit(tr);
    Ok((stats.apply(tr)?, stats))
}

pub fn denormalize(tr: &Trajectory, stats: &NormStats) -> Result<Trajectory> {
    stats.invert(tr)
}

/// A training window cut from one trajectory at split point `start`:
/// history rows `[start - n_p, start)` and future rows `[start, start + n_steps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start: usize,
    pub past_outputs: DMatrix<f64>,
    pub past_inputs: DMatrix<f64>,
    pub future_inputs: DMatrix<f64>,
    pub future_outputs: DMatrix<f64>,
}

impl Window {
    pub fn n_p(&self) -> usize {
        self.past_outputs.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.future_outputs.nrows()
    }

    /// Inputs held over each predicted transition: the input at the last
    /// history row drives the first step, so these are rows
    /// `[start - 1, start + n_steps - 1)` of the source.
    pub fn driving_inputs(&self) -> DMatrix<f64> {
        let n_u = self.future_inputs.ncols();
        let n = self.n_steps();
        let last_past = self.past_inputs.nrows() - 1;
        DMatrix::from_fn(n, n_u, |r, c| {
            if r == 0 {
                self.past_inputs[(last_past, c)]
            } else {
                self.future_inputs[(r - 1, c)]
            }
        })
    }
}

/// Number of windows [`windows`] produces.
pub fn window_count(n: usize, n_p: usize, n_steps: usize, stride: usize) -> usize {
    if n_p + n_steps > n || stride == 0 {
        0
    } else {
        (n - n_p - n_steps) / stride + 1
    }
}

pub fn windows(tr: &Trajectory, n_p: usize, n_steps: usize, stride: usize) -> Result<Vec<Window>> {
    if n_p == 0 || n_steps == 0 || stride == 0 {
        return Err(Error::Parameter("n_p, n_steps and stride must all be at least 1".into()));
    }
    let n = tr.len();
    if n_p + n_steps > n {
        return Err(Error::TooShort { needed: n_p + n_steps, have: n });
    }
    let count = window_count(n, n_p, n_steps, stride);
    Ok((0..count)
        .map(|i| {
            let k = n_p + i * stride;
            Window {
                start: k,
                past_outputs: tr.outputs.rows(k - n_p, n_p).into_owned(),
                past_inputs: tr.inputs.rows(k - n_p, n_p).into_owned(),
                future_inputs: tr.inputs.rows(k, n_steps).into_owned(),
                future_outputs: tr.outputs.rows(k, n_steps).into_owned(),
            }
        })
        .collect())
}

/// Formats `v` rounded to 12 significant digits, in the shortest text that
/// reads back to the rounded value.
pub fn format_value(v: f64) -> String {
    let rounded: f64 = format!("{v:.11e}").parse().unwrap_or(v);
    let rounded = if rounded == 0.0 { 0.0 } else { rounded };
    format!("{rounded}")
}

fn csv_header(n_u: usize, n_y: usize) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n_u).map(|i| format!("u{i}")));
    cols.extend((1..=n_y).map(|i| format!("y{i}")));
    cols.join(",")
}

/// Serializes in the interchange format `t,u1..u{n_u},y1..y{n_y}`.
pub fn to_csv_string(tr: &Trajectory) -> String {
    let mut out = csv_header(tr.n_u(), tr.n_y());
    out.push('\n');
    for k in 0..tr.len() {
        out.push_str(&format_value(tr.time(k)));
        for v in tr.inputs.row(k).iter().chain(tr.outputs.row(k).iter()) {
            out.push(',');
            out.push_str(&format_value(*v));
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(path: impl AsRef<Path>, tr: &Trajectory) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv_string(tr)).map_err(|e| Error::io(path, e))
}

pub fn load_csv(path: impl AsRef<Path>, n_u: usize, n_y: usize) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, n_u, n_y)
}

/// Input and output counts from an interchange header.
pub fn csv_dims(text: &str) -> Result<(usize, usize)> {
    let header = text.lines().find(|l| !l.trim().is_empty()).ok_or_else(|| Error::Schema("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let n_u = cols.iter().filter(|c| c.starts_with('u')).count();
    let n_y = cols.iter().filter(|c| c.starts_with('y')).count();
    if cols.first() != Some(&"t") || n_u + n_y + 1 != cols.len() {
        return Err(Error::Schema(format!("unrecognized header `{}`", header.trim())));
    }
    Ok((n_u, n_y))
}

/// Parses a file whose dimensions are read from its header.
pub fn load_csv_auto(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (n_u, n_y) = csv_dims(&text)?;
    parse_csv(&text, n_u, n_y)
}

/// Parses the interchange format. Row indices in errors count data rows
/// from zero (the header is not counted).
pub fn parse_csv(text: &str, n_u: usize, n_y: usize) -> Result<Trajectory> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Schema("empty file".into()))?;
    let expected = csv_header(n_u, n_y);
    let found: Vec<&str> = header.split(',').map(str::trim).collect();
    if found.join(",") != expected {
        return Err(Error::Schema(format!("expected header `{expected}`, found `{}`", header.trim())));
    }
    let width = 1 + n_u + n_y;
    let mut times = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(Error::Schema(format!("row {row} has {} fields, expected {width}", fields.len())));
        }
        for (c, f) in fields.iter().enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::Data { row, reason: format!("cannot parse `{}` in column {c}", f.trim()) })?;
            if !v.is_finite() {
                return Err(Error::Data { row, reason: format!("non-finite value in column {c}") });
            }
            if c == 0 {
                times.push(v);
            } else {
                values.push(v);
            }
        }
    }
    let n = times.len();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, have: n });
    }
    let t0 = times[0];
    // The span gives a better-conditioned step than a single difference
    // once times carry only 12 significant digits.
    let delta = (times[n - 1] - t0) / (n - 1) as f64;
    if !(delta > 0.0) {
        return Err(Error::Grid { row: 1, expected: t0, found: times[1] });
    }
    let inputs = DMatrix::from_fn(n, n_u, |r, c| values[r * (n_u + n_y) + c]);
    let outputs = DMatrix::from_fn(n, n_y, |r, c| values[r * (n_u + n_y) + n_u + c]);
    Trajectory::with_times(times, delta, inputs, outputs)
}

/// Renders a matrix as CSV rows (no header), used by report dumps.
pub fn matrix_rows_csv(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format_value(*v)).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(n: usize, n_u: usize, n_y: usize) -> Trajectory {
        let u = DMatrix::from_fn(n, n_u, |r, c| (r * 10 + c) as f64);
        let y = DMatrix::from_fn(n, n_y, |r, c| -((r * 10 + c) as f64));
        Trajectory::new(0.0, 0.5, u, y).unwrap()
    }

    fn random_traj(rng: &mut ChaCha8Rng, n: usize, n_u: usize, n_y: usize) -> Trajectory {
        let u = DMatrix::from_fn(n, n_u, |_, _| rng.gen_range(-50.0..50.0));
        let y = DMatrix::from_fn(n, n_y, |_, _| rng.gen_range(-1e3..1e3));
        let delta = rng.gen_range(1e-3..2.0);
        Trajectory::new(rng.gen_range(-10.0..10.0), delta, u, y).unwrap()
    }

    #[test]
    fn load_small_file() {
        let tr = parse_csv("t,u1,y1\n0,1,2\n0.1,3,4\n0.2,5,6\n", 1, 1).unwrap();
        assert_eq!(tr.len(), 3);
        assert!((tr.delta() - 0.1).abs() < 1e-15);
        assert_eq!(tr.outputs()[(2, 0)], 6.0);
        assert_eq!(tr.inputs()[(1, 0)], 3.0);
    }

    #[test]
    fn load_rejects_irregular_grid() {
        let err = parse_csv("t,y1\n0,1\n0.1,2\n0.25,3\n", 0, 1).unwrap_err();
        assert!(matches!(err, Error::Grid { .. }), "{err}");
    }

    #[test]
    fn load_rejects_bad_header_and_values() {
        assert!(matches!(parse_csv("t,y1,u1\n0,1,1\n1,2,2\n", 1, 1), Err(Error::Schema(_))));
        assert!(matches!(parse_csv("t,y1\n0,1\n1,NaN\n", 0, 1), Err(Error::Data { row: 1, .. })));
        assert!(matches!(parse_csv("t,y1\n0,1\n1,abc\n", 0, 1), Err(Error::Data { row: 1, .. })));
        assert!(matches!(parse_csv("t,y1\n0,1\n", 0, 1), Err(Error::TooShort { .. })));
    }

    #[test]
    fn header_dimensions() {
        assert_eq!(csv_dims("t,u1,u2,y1\n0,1,2,3\n").unwrap(), (2, 1));
        assert_eq!(csv_dims("t,y1,y2\n").unwrap(), (0, 2));
        assert!(csv_dims("time,y1\n").is_err());
        assert!(csv_dims("t,y1,z\n").is_err());
    }

    #[test]
    fn csv_round_trip_on_random_trajectories() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..100 {
            let n = rng.gen_range(2..60);
            let tr = random_traj(&mut rng, n, i % 3, 1 + i % 4);
            let first = to_csv_string(&tr);
            let back = parse_csv(&first, tr.n_u(), tr.n_y()).unwrap();
            assert_eq!(back.len(), tr.len());
            assert_eq!(to_csv_string(&back), first);
        }
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_thirds(&ramp(12, 1, 1)).unwrap().lengths(), (4, 4, 4));
        assert_eq!(split_thirds(&ramp(14, 1, 1)).unwrap().lengths(), (5, 5, 4));
        assert_eq!(split_thirds(&ramp(13, 1, 1)).unwrap().lengths(), (5, 4, 4));
        assert_eq!(split_thirds(&ramp(12000, 1, 1)).unwrap().lengths(), (4000, 4000, 4000));
        assert!(matches!(split_thirds(&ramp(5, 1, 1)), Err(Error::TooShort { .. })));
    }

    #[test]
    fn split_exhaustive_concatenation() {
        for n in 6..=200 {
            let tr = ramp(n, 1, 2);
            let s = split_thirds(&tr).unwrap();
            let (a, b, c) = s.lengths();
            assert!(a.abs_diff(b) <= 1 && b.abs_diff(c) <= 1);
            assert_eq!(a + b + c, n);
            let mut rows = Vec::new();
            for part in [&s.train, &s.dev, &s.test] {
                for k in 0..part.len() {
                    rows.push((part.time(k), part.output_row(k), part.input_row(k)));
                }
            }
            for (k, (t, y, u)) in rows.into_iter().enumerate() {
                assert!((t - tr.time(k)).abs() < 1e-12);
                assert_eq!(y, tr.output_row(k));
                assert_eq!(u, tr.input_row(k));
            }
        }
    }

    #[test]
    fn downsample_examples() {
        let tr = ramp(3000, 1, 1);
        assert_eq!(downsample(&tr, 1).unwrap(), tr);
        let d = downsample(&tr, 10).unwrap();
        assert_eq!(d.len(), 300);
        assert!((d.delta() - 10.0 * tr.delta()).abs() < 1e-15);
        assert_eq!(d.output_row(3), tr.output_row(30));
        // ceil(2501 / 8) counted by hand: rows 0, 8, ..., 2496 -> 313 rows.
        assert_eq!(downsample(&ramp(2501, 5, 3), 8).unwrap().len(), 313);
        assert!(matches!(downsample(&tr, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn downsample_composition() {
        for n in 10..120 {
            let tr = ramp(n, 1, 1);
            for (a, b) in [(2, 3), (3, 2), (2, 2), (4, 3)] {
                let twice = downsample(&downsample(&tr, a).unwrap(), b);
                let once = downsample(&tr, a * b);
                match (twice, once) {
                    (Ok(t), Ok(o)) => {
                        assert_eq!(o.len(), n.div_ceil(a * b));
                        if n % (a * b) == 1 {
                            assert_eq!(t.times(), o.times());
                        }
                        assert_eq!(t.len(), n.div_ceil(a).div_ceil(b));
                    }
                    (Err(_), _) | (_, Err(_)) => {}
                }
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let y = DMatrix::from_element(10, 1, 5.0);
        let tr = Trajectory::autonomous(0.0, 1.0, y).unwrap();
        let (n, stats) = normalize(&tr).unwrap();
        assert!(n.outputs().iter().all(|&v| v == 0.0));
        assert!(stats.has_constant_channel());

        let y = DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]);
        let tr = Trajectory::autonomous(0.0, 1.0, y).unwrap();
        let (n, stats) = normalize(&tr).unwrap();
        assert_eq!(n.outputs().as_slice(), &[-1.0, 1.0]);
        assert!(!stats.has_constant_channel());
    }

    #[test]
    fn normalize_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tr = random_traj(&mut rng, 1000, 2, 3);
        let (n, stats) = normalize(&tr).unwrap();
        for col in n.outputs().column_iter().chain(n.inputs().column_iter()) {
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-10);
        }
        let back = denormalize(&n, &stats).unwrap();
        let err = (back.outputs() - tr.outputs()).amax().max((back.inputs() - tr.inputs()).amax());
        assert!(err < 1e-10, "round trip error {err}");
    }

    #[test]
    fn window_examples() {
        assert_eq!(windows(&ramp(10, 1, 1), 1, 1, 1).unwrap().len(), 9);
        let tr = ramp(4, 1, 1);
        let w = windows(&tr, 1, 2, 1).unwrap();
        assert_eq!(w[0].past_outputs.row(0)[0], tr.outputs()[(0, 0)]);
        assert_eq!(w[0].future_outputs.column(0).as_slice(), &[tr.outputs()[(1, 0)], tr.outputs()[(2, 0)]]);
        assert_eq!(w[0].driving_inputs().column(0).as_slice(), &[tr.inputs()[(0, 0)], tr.inputs()[(1, 0)]]);
        assert!(matches!(windows(&tr, 3, 2, 1), Err(Error::TooShort { .. })));
    }

    #[test]
    fn window_count_matches_enumeration() {
        // Brute force: every start k with k - n_p >= 0 and k + n_steps <= n on the stride lattice.
        let brute = |n: usize, n_p: usize, n_steps: usize, stride: usize| {
            (n_p..=n).step_by(stride).filter(|&k| k + n_steps <= n).count()
        };
        assert_eq!(brute(100, 5, 5, 1), 91);
        assert_eq!(windows(&ramp(100, 1, 1), 5, 5, 1).unwrap().len(), 91);
        for n in 2..40 {
            for n_p in 1..5 {
                for n_steps in 1..5 {
                    for stride in 1..4 {
                        if n_p + n_steps > n {
                            continue;
                        }
                        let ws = windows(&ramp(n, 1, 1), n_p, n_steps, stride).unwrap();
                        assert_eq!(ws.len(), brute(n, n_p, n_steps, stride));
                        for w in &ws {
                            assert!(w.start >= n_p && w.start + n_steps <= n);
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn windows_slice_source_rows(n in 4usize..60, n_p in 1usize..4, n_steps in 1usize..4, stride in 1usize..4) {
            prop_assume!(n_p + n_steps <= n);
            let tr = ramp(n, 2, 1);
            for w in windows(&tr, n_p, n_steps, stride).unwrap() {
                for i in 0..n_p {
                    prop_assert_eq!(w.past_outputs[(i, 0)], tr.outputs()[(w.start - n_p + i, 0)]);
                }
                for i in 0..n_steps {
                    prop_assert_eq!(w.future_outputs[(i, 0)], tr.outputs()[(w.start + i, 0)]);
                    prop_assert_eq!(w.future_inputs[(i, 1)], tr.inputs()[(w.start + i, 1)]);
                }
            }
        }
    }
}
