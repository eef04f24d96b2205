//! Sparse Bayesian identification of nonlinear dynamical systems.
//!
//! A NARX model `y(t+1) = f(u(t..t-n_a), y(t-1..t-n_b))` is fitted with a multilayer perceptron
//! whose weights carry a hierarchical sparsity prior. Training alternates a reweighted group-l1
//! fit with closed-form hyper-parameter updates and prunes weights whose prior variance or
//! magnitude collapses.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod mlp_core;
pub mod narx_data;
pub mod seeds;
pub mod sparse_bayes;
pub mod trainer;

use std::io::Write;
use std::path::Path;

pub use error::{Error, Result};

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
