//! Scoring: one-step prediction, free-run simulation, ratio and lambda sweeps.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::narx_data::{
    build_regressors, fill_row, first_target_index, subset_ratio, SignalPair, SubsetMode,
};
use crate::seeds;
use crate::trainer::{self, TrainConfig, TrainedModel};

/// Root mean square error.
pub fn rmse(yhat: &[f64], y: &[f64]) -> Result<f64> {
    if yhat.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            yhat.len(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::Data("RMSE of an empty series".into()));
    }
    let sse: f64 = yhat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Prediction,
    Simulation,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prediction" | "predict" => Ok(Self::Prediction),
            "simulation" | "simulate" => Ok(Self::Simulation),
            other => Err(Error::Config(format!("unknown evaluation mode {other:?}"))),
        }
    }
}

/// Statistics over restarts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepeatStats {
    /// Smallest finite RMSE; `inf` if every run diverged.
    pub best: f64,
    /// Mean with diverged runs replaced by the cap.
    pub mean: f64,
    /// Sample standard deviation, same convention as `mean`.
    pub std: f64,
    /// Mean with diverged runs counted as `inf`.
    pub mean_uncapped: f64,
    /// Mean over finite runs only.
    pub mean_finite: f64,
    pub cap: f64,
    pub n_runs: usize,
    pub n_diverged: usize,
}

impl RepeatStats {
    /// `None` when `rmses` is empty.
    pub fn from_rmses(rmses: &[f64], cap: f64) -> Option<Self> {
        if rmses.is_empty() {
            return None;
        }
        let finite: Vec<f64> = rmses.iter().copied().filter(|r| r.is_finite()).collect();
        let capped: Vec<f64> = rmses
            .iter()
            .map(|&r| if r.is_finite() { r } else { cap })
            .collect();
        let (mean, std) = mean_std(&capped);
        let n_diverged = rmses.len() - finite.len();
        Some(Self {
            best: finite.iter().copied().fold(f64::INFINITY, f64::min),
            mean,
            std,
            mean_uncapped: if n_diverged > 0 { f64::INFINITY } else { mean },
            mean_finite: if finite.is_empty() {
                f64::NAN
            } else {
                mean_std(&finite).0
            },
            cap,
            n_runs: rmses.len(),
            n_diverged,
        })
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// RMSE in raw units; `inf` for a diverged free run.
    pub rmse: f64,
    pub predictions: Vec<f64>,
    pub truth: Vec<f64>,
    /// Sample index of each prediction in the source series.
    pub target_index: Vec<usize>,
    pub mode: EvalMode,
    /// Source index of the first non-finite free-run output.
    pub diverged_at: Option<usize>,
    pub repeats: Option<RepeatStats>,
}

impl EvalReport {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// Recomputes the RMSE from the stored series.
    pub fn check(&self) -> Result<()> {
        let again = if self.diverged() {
            f64::INFINITY
        } else {
            rmse(&self.predictions, &self.truth)?
        };
        if again == self.rmse || (again - self.rmse).abs() <= 1e-12 * (1.0 + again.abs()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "stored RMSE {} disagrees with recomputed {again}",
                self.rmse
            )))
        }
    }

    /// `t,y_true,y_hat`, one row per prediction.
    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("t,y_true,y_hat\n");
        for ((t, y), yh) in self
            .target_index
            .iter()
            .zip(&self.truth)
            .zip(&self.predictions)
        {
            let _ = writeln!(out, "{t},{y},{yh}");
        }
        out
    }
}

/// Feeds the true lagged signal to the model at every step.
pub fn predict_one_step(model: &TrainedModel, signal: &SignalPair) -> Result<EvalReport> {
    let raw = build_regressors(signal, model.n_a(), model.n_b())?;
    let ds = model.norm.apply(&raw);
    let pred = model.net.predict(ds.rows.view())?;
    let predictions: Vec<f64> = pred.iter().map(|&v| model.norm.denorm_y(v)).collect();
    let truth = raw.targets.to_vec();
    Ok(EvalReport {
        rmse: rmse(&predictions, &truth)?,
        predictions,
        truth,
        target_index: raw.target_index,
        mode: EvalMode::Prediction,
        diverged_at: None,
        repeats: None,
    })
}

/// Free run: output lags come from the model's own past predictions, only `u` from data.
///
/// `y_seed` must hold the first `max(n_a, n_b) + 1` outputs; the first predicted sample is the
/// one right after them. Returns the raw-unit trajectory and the index of the first
/// non-finite output, if any; the trajectory stops before it.
pub fn free_run(
    model: &TrainedModel,
    u: &[f64],
    y_seed: &[f64],
) -> Result<(Vec<f64>, Option<usize>)> {
    let (n_a, n_b) = (model.n_a(), model.n_b());
    let first = first_target_index(n_a, n_b);
    if y_seed.len() != first {
        return Err(Error::Data(format!(
            "free run with lags n_a={n_a}, n_b={n_b} needs {first} seed outputs, got {}",
            y_seed.len()
        )));
    }
    if u.len() <= first {
        return Err(Error::Data(format!(
            "input of length {} is too short for {first} seed outputs",
            u.len()
        )));
    }
    let norm = &model.norm;
    let un: Vec<f64> = u.iter().map(|&v| norm.norm_u(v)).collect();
    let mut yn: Vec<f64> = y_seed.iter().map(|&v| norm.norm_y(v)).collect();
    yn.reserve(u.len() - first);
    let mut row = vec![0.0; n_a + n_b + 1];
    let mut out = Vec::with_capacity(u.len() - first);
    for t in first - 1..u.len() - 1 {
        fill_row(&mut row, &un, &yn, t, n_a, n_b);
        let z = ndarray::ArrayView2::from_shape((1, row.len()), &row)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let next = model.net.predict(z)?[0];
        if !next.is_finite() {
            log::warn!("free run diverged at sample {}", t + 1);
            return Ok((out, Some(t + 1)));
        }
        yn.push(next);
        out.push(norm.denorm_y(next));
    }
    Ok((out, None))
}

/// Free run over `signal`, seeded with its leading true outputs and scored on the rest.
pub fn simulate_free_run(model: &TrainedModel, signal: &SignalPair) -> Result<EvalReport> {
    let first = first_target_index(model.n_a(), model.n_b());
    if signal.len() <= first {
        return Err(Error::Data(format!(
            "series of length {} is too short for {first} seed outputs",
            signal.len()
        )));
    }
    let (predictions, diverged_at) = free_run(model, &signal.u, &signal.y[..first])?;
    let truth = signal.y[first..first + predictions.len()].to_vec();
    let target_index: Vec<usize> = (first..first + predictions.len()).collect();
    let rmse = match diverged_at {
        Some(_) => f64::INFINITY,
        None => rmse(&predictions, &truth)?,
    };
    Ok(EvalReport {
        rmse,
        predictions,
        truth,
        target_index,
        mode: EvalMode::Simulation,
        diverged_at,
        repeats: None,
    })
}

pub fn evaluate(model: &TrainedModel, signal: &SignalPair, mode: EvalMode) -> Result<EvalReport> {
    match mode {
        EvalMode::Prediction => predict_one_step(model, signal),
        EvalMode::Simulation => simulate_free_run(model, signal),
    }
}

/// What a sweep trains on and how it scores.
#[derive(Debug, Clone)]
pub struct SweepSpec<'a> {
    pub cfg: &'a TrainConfig,
    pub train: &'a SignalPair,
    pub test: &'a SignalPair,
    pub mode: EvalMode,
    pub subset: SubsetMode,
    /// Worker threads; 1 runs cells in order on the calling thread.
    pub jobs: usize,
}

impl SweepSpec<'_> {
    /// Score assigned to diverged runs in capped statistics: the peak-to-peak range of the
    /// test output, which bounds the error of any prediction kept inside that range.
    pub fn divergence_cap(&self) -> f64 {
        let (lo, hi) = self
            .test
            .y
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        hi - lo
    }
}

/// One trained-and-scored sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub ratio: f64,
    pub repeat: usize,
    /// `inf` for a diverged free run, `NaN` for a failed cell.
    pub rmse: f64,
    pub sparsity: f64,
    pub seed: u64,
    pub error: Option<String>,
}

impl SweepCell {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Trains on `ratio` of the training rows and scores on the full test signal.
pub fn run_cell(spec: &SweepSpec<'_>, ratio: f64, repeat: usize, base_seed: u64) -> SweepCell {
    let seed = seeds::cell_seed(base_seed, ratio, repeat);
    let result = (|| -> Result<(f64, f64)> {
        let cfg = TrainConfig {
            seed,
            ..spec.cfg.clone()
        };
        let raw = build_regressors(spec.train, cfg.n_a, cfg.n_b)?;
        let subset = subset_ratio(&raw, ratio, spec.subset, seeds::substream(seed, "subset"))?;
        let model = trainer::fit_raw(&cfg, &subset, None)?;
        let report = evaluate(&model, spec.test, spec.mode)?;
        Ok((report.rmse, trainer::sparsity(&model.net)))
    })();
    match result {
        Ok((rmse, sparsity)) => SweepCell {
            ratio,
            repeat,
            rmse,
            sparsity,
            seed,
            error: None,
        },
        Err(e) => {
            log::warn!("sweep cell ratio={ratio} repeat={repeat} failed: {e}");
            SweepCell {
                ratio,
                repeat,
                rmse: f64::NAN,
                sparsity: f64::NAN,
                seed,
                error: Some(e.to_string()),
            }
        }
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs every `(ratio, repeat)` cell not already in `done`.
///
/// `on_cell` sees each new cell as it finishes (in completion order). The returned table
/// holds `done` plus the new cells, ordered by ratio position then repeat.
pub fn ratio_sweep(
    spec: &SweepSpec<'_>,
    ratios: &[f64],
    repeats: usize,
    base_seed: u64,
    done: &[SweepCell],
    on_cell: &(dyn Fn(&SweepCell) + Sync),
) -> Result<Vec<SweepCell>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    if ratios.is_empty() {
        return Err(Error::Config("no ratios given".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::Config(format!("ratio must lie in (0, 1], got {r}")));
    }
    let key = |r: f64, k: usize| (r.to_bits(), k);
    let finished: HashSet<(u64, usize)> = done.iter().map(|c| key(c.ratio, c.repeat)).collect();
    let todo: Vec<(f64, usize)> = ratios
        .iter()
        .flat_map(|&r| (0..repeats).map(move |k| (r, k)))
        .filter(|&(r, k)| !finished.contains(&key(r, k)))
        .collect();
    if todo.len() < ratios.len() * repeats {
        log::info!(
            "resuming sweep: {} of {} cells already done",
            ratios.len() * repeats - todo.len(),
            ratios.len() * repeats
        );
    }
    let run = |&(r, k): &(f64, usize)| {
        let cell = run_cell(spec, r, k, base_seed);
        on_cell(&cell);
        cell
    };
    let fresh: Vec<SweepCell> = if spec.jobs <= 1 {
        todo.iter().map(run).collect()
    } else {
        pool(spec.jobs)?.install(|| todo.par_iter().map(run).collect())
    };
    let mut cells: Vec<SweepCell> = done
        .iter()
        .filter(|c| ratios.iter().any(|r| r.to_bits() == c.ratio.to_bits()) && c.repeat < repeats)
        .cloned()
        .chain(fresh)
        .collect();
    let pos = |r: f64| ratios.iter().position(|x| x.to_bits() == r.to_bits());
    cells.sort_by_key(|c| (pos(c.ratio), c.repeat));
    Ok(cells)
}

/// Per-ratio statistics over the non-failed cells, in first-appearance order.
pub fn summarize(cells: &[SweepCell], cap: f64) -> Vec<(f64, RepeatStats)> {
    let mut ratios: Vec<f64> = Vec::new();
    for c in cells {
        if !ratios.iter().any(|r| r.to_bits() == c.ratio.to_bits()) {
            ratios.push(c.ratio);
        }
    }
    ratios
        .into_iter()
        .filter_map(|r| {
            let rmses: Vec<f64> = cells
                .iter()
                .filter(|c| c.ratio.to_bits() == r.to_bits() && !c.failed())
                .map(|c| c.rmse)
                .collect();
            RepeatStats::from_rmses(&rmses, cap).map(|s| (r, s))
        })
        .collect()
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("ratio,repeat,rmse,sparsity,seed\n");
    for c in cells {
        let _ = writeln!(out, "{}", sweep_line(c));
    }
    out
}

/// One `sweep.csv` row without the trailing newline.
pub fn sweep_line(c: &SweepCell) -> String {
    format!(
        "{},{},{},{},{}",
        c.ratio, c.repeat, c.rmse, c.sparsity, c.seed
    )
}

/// Parses `sweep.csv`. Failed cells (`NaN` rmse) are dropped so a resume retries them.
pub fn parse_sweep_csv(text: &str, path: &Path) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, got {}", f.len())));
        }
        let num = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|_| parse_err(format!("{what}: not a number: {s:?}")))
        };
        let cell = SweepCell {
            ratio: num(f[0], "ratio")?,
            repeat: f[1]
                .parse()
                .map_err(|_| parse_err(format!("repeat: not an integer: {:?}", f[1])))?,
            rmse: num(f[2], "rmse")?,
            sparsity: num(f[3], "sparsity")?,
            seed: f[4]
                .parse()
                .map_err(|_| parse_err(format!("seed: not an integer: {:?}", f[4])))?,
            error: None,
        };
        if !cell.rmse.is_nan() {
            cells.push(cell);
        }
    }
    Ok(cells)
}

/// `ratio,best,mean,std`.
pub fn summary_csv(summary: &[(f64, RepeatStats)]) -> String {
    let mut out = String::from("ratio,best,mean,std\n");
    for (r, s) in summary {
        let _ = writeln!(out, "{r},{},{},{}", s.best, s.mean, s.std);
    }
    out
}

/// Summary plus divergence bookkeeping.
pub fn summary_detail_csv(summary: &[(f64, RepeatStats)]) -> String {
    let mut out =
        String::from("ratio,best,mean,std,mean_uncapped,mean_finite,cap,n_runs,n_diverged\n");
    for (r, s) in summary {
        let _ = writeln!(
            out,
            "{r},{},{},{},{},{},{},{},{}",
            s.best, s.mean, s.std, s.mean_uncapped, s.mean_finite, s.cap, s.n_runs, s.n_diverged
        );
    }
    out
}

/// `n` values spaced evenly in log10 between `lo` and `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && n >= 1) {
        return Err(Error::Config(format!(
            "log grid needs 0 < lo <= hi and n >= 1 (got {lo}, {hi}, {n})"
        )));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.log10(), hi.log10());
    Ok((0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub rmse: f64,
    pub sparsity: f64,
    pub seed: u64,
    pub error: Option<String>,
}

/// Trains once per shared `lambda` on the full training signal.
pub fn lambda_sweep(
    spec: &SweepSpec<'_>,
    lambdas: &[f64],
    base_seed: u64,
) -> Result<Vec<LambdaRow>> {
    if lambdas.is_empty() {
        return Err(Error::Config("no lambda values given".into()));
    }
    let run = |&lambda: &f64| {
        let cfg = TrainConfig {
            lambda: vec![lambda],
            ..spec.cfg.clone()
        };
        let sub = SweepSpec {
            cfg: &cfg,
            ..spec.clone()
        };
        let cell = run_cell(
            &sub,
            1.0,
            0,
            seeds::substream(base_seed, &format!("lambda{lambda:e}")),
        );
        LambdaRow {
            lambda,
            rmse: cell.rmse,
            sparsity: cell.sparsity,
            seed: cell.seed,
            error: cell.error,
        }
    };
    Ok(if spec.jobs <= 1 {
        lambdas.iter().map(run).collect()
    } else {
        pool(spec.jobs)?.install(|| lambdas.par_iter().map(run).collect())
    })
}

pub fn lambda_csv(rows: &[LambdaRow]) -> String {
    let mut out = String::from("lambda,rmse,sparsity,seed\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.lambda, r.rmse, r.sparsity, r.seed);
    }
    out
}
