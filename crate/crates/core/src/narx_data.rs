//! Input/output series, the cascaded-tanks data generator and NARX regressor construction.
//!
//! Index convention: the regressor for time `t` is
//! `z(t) = [u(t), u(t-1), .., u(t-n_a), y(t-1), .., y(t-n_b)]` and its target is `y(t+1)`.
//! The first usable `t` is `max(n_a, n_b)` and the last is `len - 2`, so a series of
//! length `len` yields `len - 1 - max(n_a, n_b)` rows.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw scalar input/output time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalPair {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    /// Sample period in seconds.
    pub dt: f64,
    pub name: String,
}

impl SignalPair {
    pub fn new(u: Vec<f64>, y: Vec<f64>, dt: f64, name: impl Into<String>) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::Data(format!(
                "input has {} samples but output has {}",
                u.len(),
                y.len()
            )));
        }
        if u.is_empty() {
            return Err(Error::Data("signal is empty".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Data(format!(
                "sample period must be positive, got {dt}"
            )));
        }
        if let Some(i) = u.iter().chain(y.iter()).position(|v| !v.is_finite()) {
            let (ch, k) = if i < u.len() {
                ("u", i)
            } else {
                ("y", i - u.len())
            };
            return Err(Error::Data(format!(
                "non-finite value in {ch} at sample {k}"
            )));
        }
        Ok(Self {
            u,
            y,
            dt,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// Reads a `u,y` CSV file.
///
/// A header line is optional. When present, columns named `u` and `y` are used
/// (and `t`, if present, fixes the sample period); otherwise the first two columns
/// are taken as `u` and `y`. Blank lines are rejected except at the end of the file.
pub fn load_benchmark_csv(path: impl AsRef<Path>) -> Result<SignalPair> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let lines: Vec<&str> = text.lines().collect();
    let last_content = lines
        .iter()
        .rposition(|l| !l.trim().is_empty())
        .ok_or_else(|| parse_err(1, "file contains no data".into()))?;

    let mut cols = (0usize, 1usize, None::<usize>);
    let mut u = Vec::new();
    let mut y = Vec::new();
    let mut t = Vec::new();
    let mut width = None;

    for (i, raw) in lines[..=last_content].iter().enumerate() {
        let lineno = i + 1;
        let line = raw.trim().trim_start_matches('\u{feff}');
        if line.is_empty() {
            return Err(parse_err(lineno, "blank line".into()));
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() < 2 {
            return Err(parse_err(
                lineno,
                format!("expected at least 2 columns, found {}", cells.len()),
            ));
        }
        if i == 0 && cells.iter().any(|c| c.parse::<f64>().is_err()) {
            cols = header_columns(&cells);
            width = Some(cells.len());
            continue;
        }
        match width {
            Some(w) if w != cells.len() => {
                return Err(parse_err(
                    lineno,
                    format!("expected {w} columns, found {}", cells.len()),
                ))
            }
            None => width = Some(cells.len()),
            _ => {}
        }
        let cell = |c: usize| -> Result<f64> {
            let v: f64 = cells[c].parse().map_err(|_| {
                parse_err(
                    lineno,
                    format!("column {}: not a number: {:?}", c + 1, cells[c]),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    lineno,
                    format!("column {}: non-finite value", c + 1),
                ));
            }
            Ok(v)
        };
        u.push(cell(cols.0)?);
        y.push(cell(cols.1)?);
        if let Some(tc) = cols.2 {
            t.push(cell(tc)?);
        }
    }

    if u.is_empty() {
        return Err(parse_err(1, "file contains a header but no data".into()));
    }
    let dt = match t.as_slice() {
        [t0, t1, ..] if t1 > t0 => t1 - t0,
        _ => 1.0,
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SignalPair::new(u, y, dt, name)
}

fn header_columns(cells: &[&str]) -> (usize, usize, Option<usize>) {
    let find = |name: &str| cells.iter().position(|c| c.eq_ignore_ascii_case(name));
    match (find("u"), find("y")) {
        (Some(u), Some(y)) => (u, y, find("t")),
        _ => (0, 1, None),
    }
}

/// Writes `t,u,y,x1,x2` rows for a simulated tank run.
pub fn write_tank_csv(path: impl AsRef<Path>, run: &TankRun) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("t,u,y,x1,x2\n");
    let s = &run.signal;
    for k in 0..s.len() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            k as f64 * s.dt,
            s.u[k],
            s.y[k],
            run.x1[k],
            run.x2[k]
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Constants, noise levels and initial state of the two-tank model
/// `x1' = -k1 sqrt(x1) + k4 u + w1`, `x2' = k2 sqrt(x1) - k3 sqrt(x2) + w2`, `y = x2 + e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TankParams {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub noise_std_w1: f64,
    pub noise_std_w2: f64,
    pub noise_std_e: f64,
    pub x1_0: f64,
    pub x2_0: f64,
    /// Levels are clamped to `[0, cap]` when set; overflow of the real rig saturates.
    pub overflow_cap: Option<f64>,
}

impl Default for TankParams {
    /// Roughly benchmark-scaled: levels of a few volts for pump inputs in `[2, 8]` V,
    /// time constants of tens of seconds at a 4 s sample period.
    fn default() -> Self {
        Self {
            k1: 0.1,
            k2: 0.1,
            k3: 0.1,
            k4: 0.05,
            noise_std_w1: 0.0,
            noise_std_w2: 0.0,
            noise_std_e: 0.0,
            x1_0: 4.0,
            x2_0: 4.0,
            overflow_cap: Some(10.0),
        }
    }
}

impl TankParams {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("k1", self.k1),
            ("k2", self.k2),
            ("k3", self.k3),
            ("k4", self.k4),
            ("noise_std_w1", self.noise_std_w1),
            ("noise_std_w2", self.noise_std_w2),
            ("noise_std_e", self.noise_std_e),
            ("x1_0", self.x1_0),
            ("x2_0", self.x2_0),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if let Some(cap) = self.overflow_cap {
            if !(cap > 0.0 && cap.is_finite()) {
                return Err(Error::Config(format!(
                    "overflow_cap must be positive, got {cap}"
                )));
            }
        }
        Ok(())
    }

    fn clamp(&self, x: f64) -> f64 {
        let x = x.max(0.0);
        match self.overflow_cap {
            Some(cap) => x.min(cap),
            None => x,
        }
    }
}

/// A simulated run: the observed signal plus the hidden tank levels.
#[derive(Debug, Clone, PartialEq)]
pub struct TankRun {
    pub signal: SignalPair,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
}

/// Forward-Euler integration of the tank model with step `dt`, one sample per step.
///
/// Sample `k` reports the state before the `k`-th update, so `x1[0] == x1_0`.
pub fn simulate_tank(params: &TankParams, u: &[f64], dt: f64, seed: u64) -> Result<TankRun> {
    params.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("input contains non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1 = normal(params.noise_std_w1)?;
    let w2 = normal(params.noise_std_w2)?;
    let e = normal(params.noise_std_e)?;

    let n = u.len();
    let (mut x1, mut x2) = (params.clamp(params.x1_0), params.clamp(params.x2_0));
    let mut xs1 = Vec::with_capacity(n);
    let mut xs2 = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for &uk in u {
        let (n1, n2, ne) = (w1.sample(&mut rng), w2.sample(&mut rng), e.sample(&mut rng));
        xs1.push(x1);
        xs2.push(x2);
        y.push(x2 + ne);
        let r1 = x1.sqrt();
        let r2 = x2.sqrt();
        let dx1 = -params.k1 * r1 + params.k4 * uk + n1;
        let dx2 = params.k2 * r1 - params.k3 * r2 + n2;
        x1 = params.clamp(x1 + dt * dx1);
        x2 = params.clamp(x2 + dt * dx2);
    }
    Ok(TankRun {
        signal: SignalPair::new(u.to_vec(), y, dt, "tank")?,
        x1: xs1,
        x2: xs2,
    })
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::Config(format!("noise std {std}: {e}")))
}

/// Piecewise-constant excitation: a new uniform level in `[lo, hi]` every `hold` samples.
pub fn random_step_input(n: usize, hold: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hold = hold.max(1);
    let mut out = Vec::with_capacity(n);
    let mut level = 0.0;
    for k in 0..n {
        if k % hold == 0 {
            level = rng.random_range(lo..=hi);
        }
        out.push(level);
    }
    out
}

/// Lagged regressors and one-step-ahead targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorDataset {
    /// `N x (n_a + n_b + 1)`; columns `[u(t) .. u(t-n_a), y(t-1) .. y(t-n_b)]`.
    pub rows: Array2<f64>,
    /// `y(t+1)` for each row.
    pub targets: Array1<f64>,
    /// Index of each target in the source series.
    pub target_index: Vec<usize>,
    pub n_a: usize,
    pub n_b: usize,
    pub norm: Option<NormStats>,
}

impl RegressorDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn width(&self) -> usize {
        self.n_a + self.n_b + 1
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            rows: self.rows.select(Axis(0), indices),
            targets: self.targets.select(Axis(0), indices),
            target_index: indices.iter().map(|&i| self.target_index[i]).collect(),
            n_a: self.n_a,
            n_b: self.n_b,
            norm: self.norm.clone(),
        }
    }
}

/// Index of the first predicted sample (and number of leading outputs a free run must be seeded with).
pub fn first_target_index(n_a: usize, n_b: usize) -> usize {
    n_a.max(n_b) + 1
}

/// Fills one regressor row for time `t`.
pub(crate) fn fill_row(row: &mut [f64], u: &[f64], y: &[f64], t: usize, n_a: usize, n_b: usize) {
    for k in 0..=n_a {
        row[k] = u[t - k];
    }
    for k in 1..=n_b {
        row[n_a + k] = y[t - k];
    }
}

pub fn build_regressors(signal: &SignalPair, n_a: usize, n_b: usize) -> Result<RegressorDataset> {
    let first = first_target_index(n_a, n_b);
    let len = signal.len();
    if len <= first {
        return Err(Error::Data(format!(
            "series of length {len} is too short for lags n_a={n_a}, n_b={n_b} (need at least {})",
            first + 1
        )));
    }
    let n = len - first;
    let width = n_a + n_b + 1;
    let mut rows = Array2::zeros((n, width));
    let mut targets = Array1::zeros(n);
    let mut target_index = Vec::with_capacity(n);
    for (r, t) in (first - 1..len - 1).enumerate() {
        let mut row = rows.row_mut(r);
        fill_row(
            row.as_slice_mut().expect("standard layout"),
            &signal.u,
            &signal.y,
            t,
            n_a,
            n_b,
        );
        targets[r] = signal.y[t + 1];
        target_index.push(t + 1);
    }
    Ok(RegressorDataset {
        rows,
        targets,
        target_index,
        n_a,
        n_b,
        norm: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetMode {
    /// Leading rows, temporal order kept.
    Prefix,
    /// Seeded sample without replacement, returned in temporal order.
    Random,
}

/// Number of rows kept for a ratio: `ceil(ratio * n)`, robust to representation error
/// in ratios like `0.05`.
pub fn ratio_count(ratio: f64, n: usize) -> usize {
    let exact = ratio * n as f64;
    let rounded = exact.round();
    let count = if (exact - rounded).abs() < 1e-9 * n.max(1) as f64 {
        rounded
    } else {
        exact.ceil()
    };
    (count as usize).clamp(1, n)
}

pub fn subset_ratio(
    ds: &RegressorDataset,
    ratio: f64,
    mode: SubsetMode,
    seed: u64,
) -> Result<RegressorDataset> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!(
            "ratio must lie in (0, 1], got {ratio}"
        )));
    }
    if ds.is_empty() {
        return Err(Error::Data("cannot subset an empty dataset".into()));
    }
    let count = ratio_count(ratio, ds.len());
    let indices: Vec<usize> = match mode {
        SubsetMode::Prefix => (0..count).collect(),
        SubsetMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = index::sample(&mut rng, ds.len(), count).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    Ok(ds.select(&indices))
}

/// Z-score statistics; every `u` lag shares the `u` statistics and every `y` lag
/// (and the target) shares the `y` statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean_u: f64,
    pub std_u: f64,
    pub mean_y: f64,
    pub std_y: f64,
}

impl NormStats {
    /// Statistics that leave values untouched.
    pub fn identity() -> Self {
        Self {
            mean_u: 0.0,
            std_u: 1.0,
            mean_y: 0.0,
            std_y: 1.0,
        }
    }

    /// Population statistics of the `u`-lag columns, and of the `y`-lag columns together with the targets.
    pub fn fit(ds: &RegressorDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Data("cannot normalize an empty dataset".into()));
        }
        let u_part = ds.rows.slice(ndarray::s![.., ..=ds.n_a]);
        let y_part = ds.rows.slice(ndarray::s![.., ds.n_a + 1..]);
        let (mean_u, std_u) = mean_std(u_part.iter().copied());
        let (mean_y, std_y) = mean_std(y_part.iter().chain(ds.targets.iter()).copied());
        for (name, s) in [("u", std_u), ("y", std_y)] {
            if !(s > 0.0) {
                return Err(Error::Data(format!(
                    "channel {name} has zero variance; cannot normalize"
                )));
            }
        }
        Ok(Self {
            mean_u,
            std_u,
            mean_y,
            std_y,
        })
    }

    pub fn norm_u(&self, v: f64) -> f64 {
        (v - self.mean_u) / self.std_u
    }

    pub fn norm_y(&self, v: f64) -> f64 {
        (v - self.mean_y) / self.std_y
    }

    pub fn denorm_y(&self, v: f64) -> f64 {
        v * self.std_y + self.mean_y
    }

    /// Applies these statistics to a raw dataset.
    pub fn apply(&self, ds: &RegressorDataset) -> RegressorDataset {
        let mut out = ds.clone();
        for mut row in out.rows.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = if c <= ds.n_a {
                    self.norm_u(*v)
                } else {
                    self.norm_y(*v)
                };
            }
        }
        out.targets.mapv_inplace(|v| self.norm_y(v));
        out.norm = Some(self.clone());
        out
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Z-scores a raw dataset with statistics fitted to it.
pub fn normalize(ds: &RegressorDataset) -> Result<(RegressorDataset, NormStats)> {
    let stats = NormStats::fit(ds)?;
    Ok((stats.apply(ds), stats))
}

/// Maps normalized outputs back to raw units.
pub fn denormalize(values: &[f64], stats: &NormStats) -> Vec<f64> {
    values.iter().map(|&v| stats.denorm_y(v)).collect()
}
