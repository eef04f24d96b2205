//! Hyper-parameter bookkeeping for the sparsity-inducing Gaussian prior `W_ij ~ N(0, upsilon_ij)`.
//!
//! Per layer and per outer iteration:
//!
//! ```text
//! C        = (Upsilon^-1 + H)^-1
//! alpha_ij = -C_ij / upsilon_ij^2 + 1 / upsilon_ij
//! upsilon  = ||W_group||_2 / omega_group        (omega from the previous iteration)
//! omega    = sqrt(sum_group |alpha|)
//! ```
//!
//! With a diagonal curvature `hdiag` the first two lines collapse to
//! `alpha = hdiag / (1 + upsilon * hdiag)`.
//!
//! All functions here are pure per-layer transformations. Pruned entries (mask `false`)
//! are skipped and hold zeros in every hyper-parameter matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp_core::{CurvatureBundle, LayerCurvature, Network};

/// Groups below this `omega` are left unregularized for the iteration.
pub const OMEGA_FLOOR: f64 = 1e-12;
/// Default lower bound on active prior variances.
pub const UPSILON_FLOOR: f64 = 1e-10;

/// How weights are tied together into groups sharing one `omega` and one `upsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Granularity {
    /// Contiguous `rows x cols` blocks; `1 x 1` is entrywise.
    Shape { rows: usize, cols: usize },
    /// One group per row of `W^l` (all outgoing weights of an input unit).
    #[default]
    Row,
    /// One group per column of `W^l` (all incoming weights of a unit).
    Column,
}

impl Granularity {
    pub fn entrywise() -> Self {
        Granularity::Shape { rows: 1, cols: 1 }
    }

    /// Group id of entry `(i, j)` in a matrix with `ncols` columns.
    pub fn group_of(self, i: usize, j: usize, ncols: usize) -> usize {
        match self {
            Granularity::Row => i,
            Granularity::Column => j,
            Granularity::Shape { rows, cols } => {
                let blocks_per_row = ncols.div_ceil(cols);
                (i / rows) * blocks_per_row + j / cols
            }
        }
    }

    fn group_count(self, nrows: usize, ncols: usize) -> usize {
        match self {
            Granularity::Row => nrows,
            Granularity::Column => ncols,
            Granularity::Shape { rows, cols } => nrows.div_ceil(rows) * ncols.div_ceil(cols),
        }
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Granularity::Row => write!(f, "row"),
            Granularity::Column => write!(f, "column"),
            Granularity::Shape { rows: 1, cols: 1 } => write!(f, "shape"),
            Granularity::Shape { rows, cols } => write!(f, "shape:{rows}x{cols}"),
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    /// `row`, `column`, `shape` (entrywise) or `shape:RxC`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "row" => return Ok(Granularity::Row),
            "column" | "col" => return Ok(Granularity::Column),
            "shape" => return Ok(Granularity::entrywise()),
            _ => {}
        }
        let bad = || Error::Config(format!("unknown granularity {s:?}"));
        let dims = s.strip_prefix("shape:").ok_or_else(bad)?;
        let (r, c) = dims.split_once('x').ok_or_else(bad)?;
        let rows: usize = r.parse().map_err(|_| bad())?;
        let cols: usize = c.parse().map_err(|_| bad())?;
        if rows == 0 || cols == 0 {
            return Err(bad());
        }
        Ok(Granularity::Shape { rows, cols })
    }
}

/// Per-group sums of `value(i, j)` over active entries.
fn group_sums(
    mask: &Array2<bool>,
    gran: Granularity,
    value: impl Fn(usize, usize) -> f64,
) -> Vec<f64> {
    let (nr, nc) = mask.dim();
    let mut sums = vec![0.0; gran.group_count(nr, nc)];
    for ((i, j), &m) in mask.indexed_iter() {
        if m {
            sums[gran.group_of(i, j, nc)] += value(i, j);
        }
    }
    sums
}

/// Hyper-parameters of one weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHyper {
    pub upsilon: Array2<f64>,
    pub alpha: Array2<f64>,
    pub omega: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperState {
    pub layers: Vec<LayerHyper>,
    pub granularity: Granularity,
    pub floor_upsilon: f64,
}

impl HyperState {
    /// `upsilon = omega = 1` on active entries, `alpha = 0`.
    pub fn init(net: &Network, granularity: Granularity) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|layer| {
                let ones = layer.mask.mapv(|m| if m { 1.0 } else { 0.0 });
                LayerHyper {
                    upsilon: ones.clone(),
                    alpha: Array2::zeros(layer.w.raw_dim()),
                    omega: ones,
                }
            })
            .collect();
        Self {
            layers,
            granularity,
            floor_upsilon: UPSILON_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CMode {
    /// Invert the full `Upsilon^-1 + (M ⊗ H)` of the active entries. Small layers only.
    ExactSmall,
    Diag,
}

fn check_upsilon(upsilon: &Array2<f64>, mask: &Array2<bool>, floor: f64) -> Result<()> {
    for ((i, j), &m) in mask.indexed_iter() {
        let v = upsilon[[i, j]];
        if m && !(v >= floor) {
            return Err(Error::Numeric(format!(
                "upsilon[{i},{j}] = {v:e} is below the floor {floor:e}"
            )));
        }
    }
    Ok(())
}

/// `C_ij = 1 / (1/upsilon_ij + hdiag_ij)` on active entries.
pub fn compute_c_diag(
    upsilon: &Array2<f64>,
    hdiag: &Array2<f64>,
    mask: &Array2<bool>,
    floor: f64,
) -> Result<Array2<f64>> {
    check_upsilon(upsilon, mask, floor)?;
    let mut c = Array2::zeros(upsilon.raw_dim());
    for ((i, j), &m) in mask.indexed_iter() {
        if m {
            c[[i, j]] = 1.0 / (1.0 / upsilon[[i, j]] + hdiag[[i, j]]);
        }
    }
    Ok(c)
}

/// Diagonal of `(Upsilon^-1 + H_full)^-1` restricted to active entries, where `H_full`
/// is indexed by the row-major flattening of the weight matrix.
pub fn compute_c_exact(
    upsilon: &Array2<f64>,
    full_hessian: &Array2<f64>,
    mask: &Array2<bool>,
    floor: f64,
) -> Result<Array2<f64>> {
    check_upsilon(upsilon, mask, floor)?;
    let ncols = upsilon.ncols();
    let active: Vec<(usize, usize)> = mask
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|(ij, _)| ij)
        .collect();
    let k = active.len();
    let mut c = Array2::zeros(upsilon.raw_dim());
    if k == 0 {
        return Ok(c);
    }
    let flat = |(i, j): (usize, usize)| i * ncols + j;
    let mut a = DMatrix::<f64>::zeros(k, k);
    for (r, &er) in active.iter().enumerate() {
        for (s, &es) in active.iter().enumerate() {
            a[(r, s)] = full_hessian[[flat(er), flat(es)]];
        }
        a[(r, r)] += 1.0 / upsilon[er];
    }
    let eig = SymmetricEigen::new(a);
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (min_idx, min_abs) = eig.eigenvalues.iter().map(|v| v.abs()).enumerate().fold(
        (0, f64::INFINITY),
        |best, (i, v)| if v < best.1 { (i, v) } else { best },
    );
    if !(min_abs > 1e-13 * max_abs) {
        return Err(Error::Numeric(format!(
            "Upsilon^-1 + H is singular (smallest eigenvalue {:e})",
            eig.eigenvalues[min_idx]
        )));
    }
    for (r, &e) in active.iter().enumerate() {
        c[e] = (0..k)
            .map(|m| eig.eigenvectors[(r, m)].powi(2) / eig.eigenvalues[m])
            .sum();
    }
    Ok(c)
}

/// Dispatches to [`compute_c_diag`] or [`compute_c_exact`] for one layer.
pub fn compute_c(
    hyper: &LayerHyper,
    curv: &LayerCurvature,
    mask: &Array2<bool>,
    floor: f64,
    mode: CMode,
) -> Result<Array2<f64>> {
    match mode {
        CMode::Diag => {
            let hdiag = curv
                .hdiag
                .as_ref()
                .ok_or_else(|| Error::Config("curvature bundle carries no diagonal".into()))?;
            compute_c_diag(&hyper.upsilon, hdiag, mask, floor)
        }
        CMode::ExactSmall => {
            let full = curv
                .full_hessian
                .as_ref()
                .ok_or_else(|| Error::Config("curvature bundle carries no full Hessian".into()))?;
            compute_c_exact(&hyper.upsilon, full, mask, floor)
        }
    }
}

/// `alpha_ij = -C_ij / upsilon_ij^2 + 1/upsilon_ij`. Negative values (only reachable with
/// indefinite exact curvature) are clamped to 0; the count of clamped entries is returned.
pub fn update_alpha(
    c: &Array2<f64>,
    upsilon: &Array2<f64>,
    mask: &Array2<bool>,
) -> (Array2<f64>, usize) {
    let mut clamped = 0;
    let mut alpha = Array2::zeros(c.raw_dim());
    for ((i, j), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let v = upsilon[[i, j]];
        let a = -c[[i, j]] / (v * v) + 1.0 / v;
        alpha[[i, j]] = if a < 0.0 {
            clamped += 1;
            0.0
        } else {
            a
        };
    }
    if clamped > 0 {
        log::debug!("{clamped} negative alpha entries clamped to 0");
    }
    (alpha, clamped)
}

/// The diagonal-curvature closed form `hdiag / (1 + upsilon * hdiag)`.
pub fn alpha_closed_form(
    hdiag: &Array2<f64>,
    upsilon: &Array2<f64>,
    mask: &Array2<bool>,
) -> Array2<f64> {
    let mut alpha = Array2::zeros(hdiag.raw_dim());
    for ((i, j), &m) in mask.indexed_iter() {
        if m {
            let h = hdiag[[i, j]];
            alpha[[i, j]] = h / (1.0 + upsilon[[i, j]] * h);
        }
    }
    alpha
}

/// `omega_o = sqrt(sum_group |alpha|)`, broadcast over the active entries of each group.
pub fn update_omega(alpha: &Array2<f64>, mask: &Array2<bool>, gran: Granularity) -> Array2<f64> {
    let ncols = alpha.ncols();
    let sums = group_sums(mask, gran, |i, j| alpha[[i, j]].abs());
    let mut omega = Array2::zeros(alpha.raw_dim());
    for ((i, j), &m) in mask.indexed_iter() {
        if m {
            omega[[i, j]] = sums[gran.group_of(i, j, ncols)].sqrt();
        }
    }
    omega
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpsilonUpdate {
    pub upsilon: Array2<f64>,
    /// Groups whose `omega` was below [`OMEGA_FLOOR`]; their `upsilon` kept its previous value.
    pub frozen_groups: usize,
}

/// `upsilon_o = ||W_group||_2 / omega_o` (for entrywise groups, `|W_ij| / omega_ij`).
///
/// `omega` is the previous iteration's. A group whose `omega` is below [`OMEGA_FLOOR`]
/// keeps `prev_upsilon` instead of blowing up.
pub fn update_upsilon(
    w: &Array2<f64>,
    omega: &Array2<f64>,
    prev_upsilon: &Array2<f64>,
    mask: &Array2<bool>,
    gran: Granularity,
) -> UpsilonUpdate {
    let ncols = w.ncols();
    let norms: Vec<f64> = group_sums(mask, gran, |i, j| w[[i, j]] * w[[i, j]])
        .into_iter()
        .map(f64::sqrt)
        .collect();
    let mut group_omega = vec![f64::NAN; norms.len()];
    for ((i, j), &m) in mask.indexed_iter() {
        if m {
            group_omega[gran.group_of(i, j, ncols)] = omega[[i, j]];
        }
    }
    let frozen_groups = group_omega.iter().filter(|&&o| o < OMEGA_FLOOR).count();
    let mut upsilon = Array2::zeros(w.raw_dim());
    for ((i, j), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let g = gran.group_of(i, j, ncols);
        upsilon[[i, j]] = if group_omega[g] < OMEGA_FLOOR {
            prev_upsilon[[i, j]]
        } else {
            norms[g] / group_omega[g]
        };
    }
    UpsilonUpdate {
        upsilon,
        frozen_groups,
    }
}

/// `R = sum |omega_ij * W_ij|` and its subgradient `omega ∘ sign(W)` with `sign(0) = 0`.
///
/// The group structure enters only through `omega`, which is constant within a group,
/// so the value is the same for any granularity that produced `omega`.
pub fn regularizer(w: &Array2<f64>, omega: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if w.raw_dim() != omega.raw_dim() {
        return Err(Error::Shape(format!(
            "weights {:?} vs omega {:?}",
            w.dim(),
            omega.dim()
        )));
    }
    let value = w.iter().zip(omega.iter()).map(|(w, o)| (o * w).abs()).sum();
    let mut sub = Array2::zeros(w.raw_dim());
    ndarray::Zip::from(&mut sub)
        .and(w)
        .and(omega)
        .for_each(|s, &w, &o| {
            *s = if w > 0.0 {
                o
            } else if w < 0.0 {
                -o
            } else {
                0.0
            };
        });
    Ok((value, sub))
}

/// Diagonal posterior moments `Sigma = (hdiag + 1/upsilon)^-1` and `mu = Sigma ∘ (G + hdiag ∘ W*)`.
pub fn posterior_moments(
    grad: &Array2<f64>,
    hdiag: &Array2<f64>,
    upsilon: &Array2<f64>,
    w_star: &Array2<f64>,
    mask: &Array2<bool>,
    floor: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let sigma = compute_c_diag(upsilon, hdiag, mask, floor)?;
    let mut mu = Array2::zeros(sigma.raw_dim());
    for ((i, j), &m) in mask.indexed_iter() {
        if m {
            mu[[i, j]] = sigma[[i, j]] * (grad[[i, j]] + hdiag[[i, j]] * w_star[[i, j]]);
        }
    }
    Ok((mu, sigma))
}

/// Terms of the approximate `-2 log` evidence for one layer (diagonal surrogate).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// `W^T H W + 2 W^T (G - H W*)`.
    pub data_term: f64,
    /// `W^T Upsilon^-1 W`.
    pub reg_term: f64,
    pub logdet_upsilon: f64,
    /// `log |H + Upsilon^-1|`.
    pub logdet_h_plus_inv: f64,
    /// Sum of the four terms above.
    pub total: f64,
    /// `N log(2 pi sigma2) - 2 log b(W*, sigma2)`; constant at fixed `sigma2`, not in `total`.
    pub constant_term: f64,
}

impl CostReport {
    pub fn add(&mut self, other: &CostReport) {
        self.data_term += other.data_term;
        self.reg_term += other.reg_term;
        self.logdet_upsilon += other.logdet_upsilon;
        self.logdet_h_plus_inv += other.logdet_h_plus_inv;
        self.total += other.total;
        self.constant_term += other.constant_term;
    }
}

/// Inputs to [`marginal_cost`] for one layer.
pub struct CostInputs<'a> {
    pub w: &'a Array2<f64>,
    /// Expansion point of the Laplace approximation.
    pub w_star: &'a Array2<f64>,
    pub grad: &'a Array2<f64>,
    pub hdiag: &'a Array2<f64>,
    pub upsilon: &'a Array2<f64>,
    pub mask: &'a Array2<bool>,
    /// `E(W*, sigma2)`, used only in the constant term.
    pub loss: f64,
    pub n_samples: usize,
    pub sigma2: f64,
}

pub fn marginal_cost(inp: &CostInputs<'_>) -> Result<CostReport> {
    let mut r = CostReport::default();
    let (mut wt_h_wstar, mut wstar_g) = (0.0, 0.0);
    for ((i, j), &m) in inp.mask.indexed_iter() {
        if !m {
            continue;
        }
        let (w, ws, g, h, v) = (
            inp.w[[i, j]],
            inp.w_star[[i, j]],
            inp.grad[[i, j]],
            inp.hdiag[[i, j]],
            inp.upsilon[[i, j]],
        );
        if !(v > 0.0) {
            return Err(Error::Numeric(format!(
                "log|Upsilon|: nonpositive diagonal {v:e} at [{i},{j}]"
            )));
        }
        let s = h + 1.0 / v;
        if !(s > 0.0) {
            return Err(Error::Numeric(format!(
                "log|H + Upsilon^-1|: nonpositive diagonal {s:e} at [{i},{j}]"
            )));
        }
        r.data_term += h * w * w + 2.0 * w * (g - h * ws);
        r.reg_term += w * w / v;
        r.logdet_upsilon += v.ln();
        r.logdet_h_plus_inv += s.ln();
        wt_h_wstar += 0.5 * h * ws * ws;
        wstar_g += ws * g;
    }
    r.total = r.data_term + r.reg_term + r.logdet_upsilon + r.logdet_h_plus_inv;
    let log_b = -(wt_h_wstar - wstar_g + inp.loss);
    r.constant_term =
        inp.n_samples as f64 * (2.0 * std::f64::consts::PI * inp.sigma2).ln() - 2.0 * log_b;
    Ok(r)
}

/// Per-layer costs for a whole network at `W = W*`.
pub fn network_cost(
    net: &Network,
    hyper: &HyperState,
    curv: &CurvatureBundle,
    n_samples: usize,
    sigma2: f64,
) -> Result<Vec<CostReport>> {
    net.layers
        .iter()
        .zip(&hyper.layers)
        .zip(&curv.layers)
        .map(|((layer, hl), lc)| {
            let hdiag = lc
                .hdiag
                .as_ref()
                .ok_or_else(|| Error::Config("curvature bundle carries no diagonal".into()))?;
            marginal_cost(&CostInputs {
                w: &layer.w,
                w_star: &layer.w,
                grad: &lc.grad_w,
                hdiag,
                upsilon: &hl.upsilon,
                mask: &layer.mask,
                loss: curv.loss,
                n_samples,
                sigma2,
            })
        })
        .collect()
}
