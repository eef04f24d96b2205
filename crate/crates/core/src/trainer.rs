//! Outer loop: reweighted-l1 network fit, hyper-parameter refresh, dynamic pruning.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp_core::{self, Activation, CurvatureMode, Network};
use crate::narx_data::{NormStats, RegressorDataset};
use crate::seeds;
use crate::sparse_bayes::{self, CostReport, Granularity, HyperState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// One shared value, or one per layer.
    pub lambda: Vec<f64>,
    pub kappa_upsilon: f64,
    pub kappa_w: f64,
    pub t_max: usize,
    pub inner_steps: usize,
    pub step_size: f64,
    /// `None` = full batch.
    pub batch_size: Option<usize>,
    pub sigma2: f64,
    pub granularity: Granularity,
    pub seed: u64,
    pub activation: Activation,
    /// Hidden layer widths.
    pub layer_widths: Vec<usize>,
    /// First outer iteration (1-based) at which pruning runs.
    pub prune_start_iter: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub normalize: bool,
    /// Stop when validation RMSE has not improved for this many iterations.
    pub patience: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::prediction()
    }
}

impl TrainConfig {
    /// Two hidden layers of 100 units, lags 5/5.
    pub fn prediction() -> Self {
        Self {
            lambda: vec![0.005],
            kappa_upsilon: 1e-4,
            kappa_w: 1e-3,
            t_max: 50,
            inner_steps: 200,
            step_size: 0.03,
            batch_size: Some(32),
            sigma2: 1.0,
            granularity: Granularity::Row,
            seed: 0,
            activation: Activation::Tanh,
            layer_widths: vec![100, 100],
            prune_start_iter: 3,
            n_a: 5,
            n_b: 5,
            normalize: true,
            patience: None,
            checkpoint_every: None,
        }
    }

    /// Three hidden layers of 10 units, lags 19/19.
    pub fn simulation() -> Self {
        Self {
            layer_widths: vec![10, 10, 10],
            n_a: 19,
            n_b: 19,
            ..Self::prediction()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "prediction" => Ok(Self::prediction()),
            "simulation" => Ok(Self::simulation()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    /// Same network and schedule with the penalty and pruning switched off.
    pub fn unregularized(&self) -> Self {
        Self {
            lambda: vec![0.0],
            kappa_upsilon: f64::MIN_POSITIVE,
            kappa_w: f64::MIN_POSITIVE,
            ..self.clone()
        }
    }

    pub fn lambda_for(&self, layer: usize) -> f64 {
        if self.lambda.len() == 1 {
            self.lambda[0]
        } else {
            self.lambda[layer]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let layers = self.layer_widths.len() + 1;
        if self.lambda.is_empty() || (self.lambda.len() != 1 && self.lambda.len() != layers) {
            return bad(format!(
                "lambda needs 1 or {layers} values, got {}",
                self.lambda.len()
            ));
        }
        if self.lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad(format!("lambda must be finite and >= 0: {:?}", self.lambda));
        }
        for (name, v) in [
            ("kappa_upsilon", self.kappa_upsilon),
            ("kappa_w", self.kappa_w),
            ("step_size", self.step_size),
            ("sigma2", self.sigma2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be positive".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive".into());
        }
        if self.layer_widths.contains(&0) {
            return bad(format!(
                "layer widths must be positive: {:?}",
                self.layer_widths
            ));
        }
        if self.t_max > 0 && self.prune_start_iter > self.t_max {
            return bad(format!(
                "prune_start_iter {} exceeds t_max {}",
                self.prune_start_iter, self.t_max
            ));
        }
        Ok(())
    }

    /// Parses a flat `key = value` document (TOML syntax, no tables).
    ///
    /// Without `base` every key must be present; with `base` the file overrides it.
    pub fn from_kv_str(text: &str, base: Option<&TrainConfig>) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message())))?;
        for (k, v) in &table {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            if v.is_table() {
                return Err(Error::Config(format!(
                    "config key {k:?}: nested tables are not allowed"
                )));
            }
        }
        let mut cfg = match base {
            Some(b) => b.clone(),
            None => {
                if let Some(missing) = KEYS.iter().find(|k| !table.contains_key(**k)) {
                    return Err(Error::Config(format!("missing config key {missing:?}")));
                }
                Self::prediction()
            }
        };
        for (k, v) in &table {
            cfg.set_kv(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides together; a repeated key keeps its last value. Values are
    /// TOML literals, and anything that does not parse as one is taken as a bare string
    /// (`granularity=row`).
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut doc = String::new();
        for (i, (k, v)) in pairs.iter().enumerate() {
            if pairs[i + 1..].iter().any(|(later, _)| later == k) {
                continue;
            }
            let literal = format!("x = {v}").parse::<toml::Table>().is_ok();
            if literal {
                doc.push_str(&format!("{k} = {v}\n"));
            } else {
                doc.push_str(&format!("{k} = {}\n", toml::Value::String(v.clone())));
            }
        }
        Self::from_kv_str(&doc, Some(self))
    }

    fn set_kv(&mut self, key: &str, v: &toml::Value) -> Result<()> {
        let err =
            |what: &str| Error::Config(format!("config key {key:?}: expected {what}, got {v}"));
        let float = |v: &toml::Value| -> Result<f64> {
            v.as_float()
                .or_else(|| v.as_integer().map(|i| i as f64))
                .ok_or_else(|| err("a number"))
        };
        let uint = |v: &toml::Value| -> Result<usize> {
            v.as_integer()
                .filter(|i| *i >= 0)
                .map(|i| i as usize)
                .ok_or_else(|| err("a nonnegative integer"))
        };
        let text = |v: &toml::Value| -> Result<String> {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| err("a string"))
        };
        match key {
            "lambda" => {
                self.lambda = match v.as_array() {
                    Some(items) => items.iter().map(float).collect::<Result<_>>()?,
                    None => vec![float(v)?],
                }
            }
            "kappa_upsilon" => self.kappa_upsilon = float(v)?,
            "kappa_w" => self.kappa_w = float(v)?,
            "t_max" => self.t_max = uint(v)?,
            "inner_steps" => self.inner_steps = uint(v)?,
            "step_size" => self.step_size = float(v)?,
            "batch_size" => {
                self.batch_size = match v.as_str() {
                    Some("full") => None,
                    Some(_) => return Err(err("\"full\" or an integer")),
                    None => Some(uint(v)?),
                }
            }
            "sigma2" => self.sigma2 = float(v)?,
            "granularity" => self.granularity = text(v)?.parse()?,
            "seed" => {
                self.seed = v
                    .as_integer()
                    .map(|i| i as u64)
                    .ok_or_else(|| err("an integer"))?
            }
            "activation" => self.activation = text(v)?.parse()?,
            "layer_widths" => {
                self.layer_widths = v
                    .as_array()
                    .ok_or_else(|| err("an array of integers"))?
                    .iter()
                    .map(uint)
                    .collect::<Result<_>>()?
            }
            "prune_start_iter" => self.prune_start_iter = uint(v)?,
            "n_a" => self.n_a = uint(v)?,
            "n_b" => self.n_b = uint(v)?,
            "normalize" => self.normalize = v.as_bool().ok_or_else(|| err("a boolean"))?,
            "patience" => self.patience = Some(uint(v)?).filter(|&p| p > 0),
            "checkpoint_every" => self.checkpoint_every = Some(uint(v)?).filter(|&p| p > 0),
            _ => unreachable!("keys are checked against KEYS"),
        }
        Ok(())
    }

    /// Inverse of [`TrainConfig::from_kv_str`].
    pub fn to_kv_string(&self) -> String {
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let widths = self
            .layer_widths
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(", ");
        let act = match self.activation {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        };
        let batch = match self.batch_size {
            Some(b) => b.to_string(),
            None => "\"full\"".into(),
        };
        format!(
            "lambda = [{}]\nkappa_upsilon = {:?}\nkappa_w = {:?}\nt_max = {}\ninner_steps = {}\n\
             step_size = {:?}\nbatch_size = {}\nsigma2 = {:?}\ngranularity = \"{}\"\nseed = {}\n\
             activation = \"{}\"\nlayer_widths = [{}]\nprune_start_iter = {}\nn_a = {}\nn_b = {}\n\
             normalize = {}\npatience = {}\ncheckpoint_every = {}\n",
            list(&self.lambda),
            self.kappa_upsilon,
            self.kappa_w,
            self.t_max,
            self.inner_steps,
            self.step_size,
            batch,
            self.sigma2,
            self.granularity,
            self.seed as i64,
            act,
            widths,
            self.prune_start_iter,
            self.n_a,
            self.n_b,
            self.normalize,
            self.patience.unwrap_or(0),
            self.checkpoint_every.unwrap_or(0),
        )
    }
}

/// Keys accepted in a config document.
pub const KEYS: &[&str] = &[
    "lambda",
    "kappa_upsilon",
    "kappa_w",
    "t_max",
    "inner_steps",
    "step_size",
    "batch_size",
    "sigma2",
    "granularity",
    "seed",
    "activation",
    "layer_widths",
    "prune_start_iter",
    "n_a",
    "n_b",
    "normalize",
    "patience",
    "checkpoint_every",
];

/// Diagnostics of one outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// One-step RMSE on the training set, raw units.
    pub train_rmse: f64,
    pub val_rmse: Option<f64>,
    pub cost: CostReport,
    pub layer_costs: Vec<CostReport>,
    pub layer_active: Vec<usize>,
    pub active_weights: usize,
    pub sparsity: f64,
    pub neuron_sparsity: f64,
    pub pruned: usize,
    pub frozen_groups: usize,
    pub clamped_alpha: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub net: Network,
    pub hyper: HyperState,
    pub history: Vec<IterationRecord>,
    pub norm: NormStats,
    pub config: TrainConfig,
}

impl TrainedModel {
    pub fn n_a(&self) -> usize {
        self.config.n_a
    }

    pub fn n_b(&self) -> usize {
        self.config.n_b
    }
}

/// Shuffled mini-batches, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct MiniBatcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl MiniBatcher {
    pub fn new(n: usize, batch_size: Option<usize>) -> Self {
        let batch = batch_size.unwrap_or(n).min(n).max(1);
        Self {
            order: (0..n).collect(),
            pos: n,
            batch,
        }
    }

    pub fn is_full(&self) -> bool {
        self.batch == self.order.len()
    }

    pub fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.is_full() {
            return self.order.clone();
        }
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// `sign(w) * max(|w| - threshold, 0)`.
pub fn soft_threshold(w: f64, threshold: f64) -> f64 {
    if w > threshold {
        w - threshold
    } else if w < -threshold {
        w + threshold
    } else {
        0.0
    }
}

/// `inner_steps` proximal gradient steps on `E + sum_l lambda_l ||omega^l ∘ W^l||_1`.
///
/// Each step takes a gradient step on the mini-batch loss for weights and biases, then
/// soft-thresholds every weight by `step_size * lambda_l * omega_ij`. Biases are not penalized.
pub fn inner_optimize(
    net: &Network,
    hyper: &HyperState,
    ds: &RegressorDataset,
    cfg: &TrainConfig,
    batcher: &mut MiniBatcher,
    rng: &mut ChaCha8Rng,
) -> Result<Network> {
    if ds.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut net = net.clone();
    let eta = cfg.step_size;
    for step in 0..cfg.inner_steps {
        let grads = if batcher.is_full() {
            let trace = mlp_core::forward(&net, ds.rows.view())?;
            mlp_core::backward(&net, &trace, &ds.targets, cfg.sigma2)?
        } else {
            let idx = batcher.next_batch(rng);
            let z = ds.rows.select(Axis(0), &idx);
            let y = ds.targets.select(Axis(0), &idx);
            let trace = mlp_core::forward(&net, z.view())?;
            mlp_core::backward(&net, &trace, &y, cfg.sigma2)?
        };
        if !grads.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at inner step {step}; step_size {eta} is likely too large"
            )));
        }
        for (l, (layer, g)) in net.layers.iter_mut().zip(&grads.layers).enumerate() {
            let shrink = eta * cfg.lambda_for(l);
            let omega = &hyper.layers[l].omega;
            ndarray::Zip::from(&mut layer.w)
                .and(&g.grad_w)
                .and(omega)
                .and(&layer.mask)
                .for_each(|w, &gw, &o, &m| {
                    *w = if m {
                        soft_threshold(*w - eta * gw, shrink * o)
                    } else {
                        0.0
                    };
                });
            layer.b.scaled_add(-eta, &g.grad_b);
        }
    }
    Ok(net)
}

/// Removes every active entry with `upsilon < kappa_upsilon` or `|W| < kappa_w`.
///
/// Pruned entries have weight and all hyper-parameters zeroed and never come back.
pub fn prune(
    net: &Network,
    hyper: &HyperState,
    kappa_upsilon: f64,
    kappa_w: f64,
) -> Result<(Network, HyperState, usize)> {
    if !(kappa_upsilon > 0.0 && kappa_w > 0.0) {
        return Err(Error::Config("pruning thresholds must be positive".into()));
    }
    let mut net = net.clone();
    let mut hyper = hyper.clone();
    let mut removed = 0;
    for (l, (layer, hl)) in net
        .layers
        .iter_mut()
        .zip(hyper.layers.iter_mut())
        .enumerate()
    {
        let (nr, nc) = layer.w.dim();
        for i in 0..nr {
            for j in 0..nc {
                if layer.mask[[i, j]]
                    && (hl.upsilon[[i, j]] < kappa_upsilon || layer.w[[i, j]].abs() < kappa_w)
                {
                    layer.prune_entry(i, j);
                    hl.upsilon[[i, j]] = 0.0;
                    hl.alpha[[i, j]] = 0.0;
                    hl.omega[[i, j]] = 0.0;
                    removed += 1;
                }
            }
        }
        if layer.active_count() == 0 {
            return Err(Error::LayerDisconnected { layer: l });
        }
    }
    Ok((net, hyper, removed))
}

/// Fraction of the original weights that are still active.
pub fn sparsity(net: &Network) -> f64 {
    net.active_weights() as f64 / net.total_weights() as f64
}

/// Fraction of input and hidden units that still have an active outgoing weight.
pub fn neuron_sparsity(net: &Network) -> f64 {
    let (mut alive, mut total) = (0usize, 0usize);
    for layer in &net.layers {
        total += layer.fan_in();
        alive += layer
            .mask
            .rows()
            .into_iter()
            .filter(|row| row.iter().any(|&m| m))
            .count();
    }
    alive as f64 / total as f64
}

fn dataset_rmse(net: &Network, ds: &RegressorDataset, norm: &NormStats) -> Result<f64> {
    let pred = net.predict(ds.rows.view())?;
    let raw = |v: &Array1<f64>| v.iter().map(|&x| norm.denorm_y(x)).collect::<Vec<_>>();
    crate::eval::rmse(&raw(&pred), &raw(&ds.targets))
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// 128-bit word position as `[high, low]`; the tagged JSON document cannot hold a `u128`.
    pub word_pos: [u64; 2],
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: {
                let p = rng.get_word_pos();
                [(p >> 64) as u64, p as u64]
            },
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos[0] as u128) << 64) | self.word_pos[1] as u128);
        rng
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: TrainedModel,
    pub iteration: usize,
    pub rng: RngState,
    pub batch_order: Vec<usize>,
    pub batch_pos: usize,
    pub best_val: Option<f64>,
    pub stale: usize,
    pub stopped: bool,
}

/// On-disk document holding either a finished model or a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
#[allow(clippy::large_enum_variant)]
pub enum ModelFile {
    Model(TrainedModel),
    Checkpoint(Box<Checkpoint>),
}

impl ModelFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        crate::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// The model, whether finished or mid-training.
    pub fn into_model(self) -> TrainedModel {
        match self {
            ModelFile::Model(m) => m,
            ModelFile::Checkpoint(c) => c.model,
        }
    }
}

/// Stateful driver of the outer loop.
pub struct Trainer<'a> {
    train: &'a RegressorDataset,
    val: Option<&'a RegressorDataset>,
    model: TrainedModel,
    iteration: usize,
    rng: ChaCha8Rng,
    batcher: MiniBatcher,
    best_val: Option<f64>,
    stale: usize,
    stopped: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: &TrainConfig,
        train: &'a RegressorDataset,
        val: Option<&'a RegressorDataset>,
    ) -> Result<Self> {
        cfg.validate()?;
        check_dataset(cfg, train)?;
        if let Some(v) = val {
            check_dataset(cfg, v)?;
        }
        let net = Network::new(
            train.width(),
            &cfg.layer_widths,
            cfg.activation,
            seeds::substream(cfg.seed, "init"),
        )?;
        let hyper = HyperState::init(&net, cfg.granularity);
        Ok(Self {
            train,
            val,
            model: TrainedModel {
                net,
                hyper,
                history: Vec::new(),
                norm: train.norm.clone().unwrap_or_else(NormStats::identity),
                config: cfg.clone(),
            },
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(seeds::substream(cfg.seed, "batch")),
            batcher: MiniBatcher::new(train.len(), cfg.batch_size),
            best_val: None,
            stale: 0,
            stopped: false,
        })
    }

    pub fn resume(
        ck: Checkpoint,
        train: &'a RegressorDataset,
        val: Option<&'a RegressorDataset>,
    ) -> Result<Self> {
        check_dataset(&ck.model.config, train)?;
        if ck.batch_order.len() != train.len() {
            return Err(Error::Data(format!(
                "checkpoint was taken on {} training rows, got {}",
                ck.batch_order.len(),
                train.len()
            )));
        }
        let mut batcher = MiniBatcher::new(train.len(), ck.model.config.batch_size);
        batcher.order = ck.batch_order;
        batcher.pos = ck.batch_pos;
        Ok(Self {
            train,
            val,
            rng: ck.rng.restore(),
            batcher,
            iteration: ck.iteration,
            best_val: ck.best_val,
            stale: ck.stale,
            stopped: ck.stopped,
            model: ck.model,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn model(&self) -> &TrainedModel {
        &self.model
    }

    pub fn is_done(&self) -> bool {
        self.stopped || self.iteration >= self.model.config.t_max
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            iteration: self.iteration,
            rng: RngState::capture(&self.rng),
            batch_order: self.batcher.order.clone(),
            batch_pos: self.batcher.pos,
            best_val: self.best_val,
            stale: self.stale,
            stopped: self.stopped,
        }
    }

    /// One outer iteration.
    pub fn step(&mut self) -> Result<&IterationRecord> {
        let cfg = self.model.config.clone();
        let t = self.iteration + 1;

        // 1. reweighted-l1 fit with the current omega
        let net = inner_optimize(
            &self.model.net,
            &self.model.hyper,
            self.train,
            &cfg,
            &mut self.batcher,
            &mut self.rng,
        )?;

        // 2. hyper-parameters from diagonal Gauss-Newton curvature on the full training set
        let trace = mlp_core::forward(&net, self.train.rows.view())?;
        let curv = mlp_core::curvature(
            &net,
            &trace,
            &self.train.targets,
            cfg.sigma2,
            CurvatureMode::GaussNewtonDiag,
        )?;
        let old = &self.model.hyper;
        let floor = old.floor_upsilon;
        let gran = old.granularity;
        let (mut frozen_groups, mut clamped_alpha) = (0, 0);
        let mut layers = Vec::with_capacity(net.layers.len());
        for ((layer, hl), lc) in net.layers.iter().zip(&old.layers).zip(&curv.layers) {
            let hdiag = lc.hdiag.as_ref().expect("diagonal curvature requested");
            // alpha(t) from upsilon(t) and C at the new weights
            let c = sparse_bayes::compute_c_diag(&hl.upsilon, hdiag, &layer.mask, floor)?;
            let (alpha, clamped) = sparse_bayes::update_alpha(&c, &hl.upsilon, &layer.mask);
            // upsilon(t+1) = |W(t+1)| / omega(t)
            let upd =
                sparse_bayes::update_upsilon(&layer.w, &hl.omega, &hl.upsilon, &layer.mask, gran);
            // omega(t+1) from alpha(t)
            let omega = sparse_bayes::update_omega(&alpha, &layer.mask, gran);
            let upsilon = clamp_to_floor(upd.upsilon, &layer.mask, floor);
            frozen_groups += upd.frozen_groups;
            clamped_alpha += clamped;
            layers.push(sparse_bayes::LayerHyper {
                upsilon,
                alpha,
                omega,
            });
        }
        let mut hyper = HyperState {
            layers,
            granularity: gran,
            floor_upsilon: floor,
        };
        let mut net = net;

        // 3. dynamic pruning
        let mut pruned = 0;
        if t >= cfg.prune_start_iter {
            let (n, h, removed) = prune(&net, &hyper, cfg.kappa_upsilon, cfg.kappa_w)?;
            net = n;
            hyper = h;
            pruned = removed;
        }

        let layer_costs =
            sparse_bayes::network_cost(&net, &hyper, &curv, self.train.len(), cfg.sigma2)?;
        let mut cost = CostReport::default();
        for c in &layer_costs {
            cost.add(c);
        }
        let train_rmse = dataset_rmse(&net, self.train, &self.model.norm)?;
        if !train_rmse.is_finite() {
            return Err(Error::Numeric(format!(
                "training RMSE diverged at outer iteration {t}"
            )));
        }
        let val_rmse = match self.val {
            Some(v) => Some(dataset_rmse(&net, v, &self.model.norm)?),
            None => None,
        };
        log::info!(
            "iter {t}: train rmse {train_rmse:.6}, cost {:.4}, active {}/{}",
            cost.total,
            net.active_weights(),
            net.total_weights()
        );

        let record = IterationRecord {
            iter: t,
            train_rmse,
            val_rmse,
            cost,
            layer_costs,
            layer_active: net.layers.iter().map(|l| l.active_count()).collect(),
            active_weights: net.active_weights(),
            sparsity: sparsity(&net),
            neuron_sparsity: neuron_sparsity(&net),
            pruned,
            frozen_groups,
            clamped_alpha,
        };
        self.model.net = net;
        self.model.hyper = hyper;
        self.model.history.push(record);
        self.iteration = t;

        if let (Some(patience), Some(v)) = (cfg.patience, val_rmse) {
            if self.best_val.is_none_or(|b| v < b) {
                self.best_val = Some(v);
                self.stale = 0;
            } else {
                self.stale += 1;
                if self.stale >= patience {
                    log::info!(
                        "early stop at iteration {t}: no validation improvement in {patience}"
                    );
                    self.stopped = true;
                }
            }
        }
        Ok(self.model.history.last().expect("just pushed"))
    }

    /// Runs to completion, calling `on_iter` after every iteration.
    pub fn run(
        mut self,
        mut on_iter: impl FnMut(&Trainer<'_>) -> Result<()>,
    ) -> Result<TrainedModel> {
        while !self.is_done() {
            self.step()?;
            on_iter(&self)?;
        }
        Ok(self.model)
    }
}

fn check_dataset(cfg: &TrainConfig, ds: &RegressorDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    if ds.n_a != cfg.n_a || ds.n_b != cfg.n_b {
        return Err(Error::Config(format!(
            "dataset lags ({}, {}) differ from configured ({}, {})",
            ds.n_a, ds.n_b, cfg.n_a, cfg.n_b
        )));
    }
    Ok(())
}

fn clamp_to_floor(mut upsilon: Array2<f64>, mask: &Array2<bool>, floor: f64) -> Array2<f64> {
    upsilon.zip_mut_with(mask, |v, &m| {
        if m && *v < floor {
            *v = floor;
        }
    });
    upsilon
}

/// Normalizes raw training rows according to `cfg.normalize`; validation rows reuse the
/// training statistics.
pub fn prepare(
    cfg: &TrainConfig,
    train_raw: &RegressorDataset,
    val_raw: Option<&RegressorDataset>,
) -> Result<(RegressorDataset, Option<RegressorDataset>)> {
    let stats = if cfg.normalize {
        NormStats::fit(train_raw)?
    } else {
        NormStats::identity()
    };
    Ok((stats.apply(train_raw), val_raw.map(|v| stats.apply(v))))
}

/// [`prepare`] followed by [`outer_train`].
pub fn fit_raw(
    cfg: &TrainConfig,
    train_raw: &RegressorDataset,
    val_raw: Option<&RegressorDataset>,
) -> Result<TrainedModel> {
    let (train, val) = prepare(cfg, train_raw, val_raw)?;
    outer_train(cfg, &train, val.as_ref())
}

/// Runs the full outer loop.
pub fn outer_train(
    cfg: &TrainConfig,
    train: &RegressorDataset,
    val: Option<&RegressorDataset>,
) -> Result<TrainedModel> {
    Trainer::new(cfg, train, val)?.run(|_| Ok(()))
}

/// Per-iteration, per-layer cost log.
pub fn cost_log_csv(history: &[IterationRecord]) -> String {
    let mut out = String::from(
        "iter,layer,cost_total,data_term,reg_term,logdet_upsilon,logdet_Hinv,active_weights\n",
    );
    for rec in history {
        for (l, (c, active)) in rec.layer_costs.iter().zip(&rec.layer_active).enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                rec.iter,
                l,
                c.total,
                c.data_term,
                c.reg_term,
                c.logdet_upsilon,
                c.logdet_h_plus_inv,
                active
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp_core::LayerParams;
    use ndarray::array;

    fn scalar_dataset() -> RegressorDataset {
        RegressorDataset {
            rows: array![[1.0]],
            targets: array![1.0],
            target_index: vec![1],
            n_a: 0,
            n_b: 0,
            norm: None,
        }
    }

    fn scalar_cfg(lambda: f64) -> TrainConfig {
        TrainConfig {
            lambda: vec![lambda],
            inner_steps: 1,
            step_size: 1.0,
            batch_size: None,
            sigma2: 1.0,
            layer_widths: vec![],
            n_a: 0,
            n_b: 0,
            ..TrainConfig::prediction()
        }
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(1.0, 0.4), 0.6);
        assert_eq!(soft_threshold(-1.0, 0.4), -0.6);
        assert_eq!(soft_threshold(0.3, 0.4), 0.0);
        assert_eq!(soft_threshold(-0.4, 0.4), 0.0);
    }

    #[test]
    fn hand_proximal_step() {
        // loss (w - 1)^2 / 2 at w = 0: gradient step to 1, shrink by lambda * omega = 0.4
        let net = Network::from_layers(
            vec![LayerParams::dense(array![[0.0]], array![0.0])],
            Activation::Tanh,
        )
        .unwrap();
        let hyper = HyperState::init(&net, Granularity::entrywise());
        let ds = scalar_dataset();
        let cfg = scalar_cfg(0.4);
        let mut b = MiniBatcher::new(1, None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = inner_optimize(&net, &hyper, &ds, &cfg, &mut b, &mut rng).unwrap();
        assert!((out.layers[0].w[[0, 0]] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn large_omega_drives_weight_to_exact_zero() {
        let net = Network::from_layers(
            vec![LayerParams::dense(array![[0.8]], array![0.0])],
            Activation::Tanh,
        )
        .unwrap();
        let mut hyper = HyperState::init(&net, Granularity::entrywise());
        hyper.layers[0].omega.fill(50.0);
        let cfg = TrainConfig {
            inner_steps: 10,
            step_size: 0.1,
            ..scalar_cfg(1.0)
        };
        let mut b = MiniBatcher::new(1, None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = inner_optimize(&net, &hyper, &scalar_dataset(), &cfg, &mut b, &mut rng).unwrap();
        assert_eq!(out.layers[0].w[[0, 0]], 0.0);
    }

    #[test]
    fn diverging_step_is_reported() {
        let net = Network::new(1, &[4], Activation::Relu, 1).unwrap();
        let hyper = HyperState::init(&net, Granularity::Row);
        let ds = RegressorDataset {
            rows: array![[100.0], [-50.0], [3.0]],
            targets: array![1e3, -1e3, 5.0],
            target_index: vec![1, 2, 3],
            n_a: 0,
            n_b: 0,
            norm: None,
        };
        let cfg = TrainConfig {
            inner_steps: 500,
            step_size: 10.0,
            layer_widths: vec![4],
            ..scalar_cfg(0.0)
        };
        let mut b = MiniBatcher::new(3, None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = inner_optimize(&net, &hyper, &ds, &cfg, &mut b, &mut rng).unwrap_err();
        assert!(err.to_string().contains("inner step"), "{err}");
    }

    #[test]
    fn prune_rule_application() {
        let net = Network::from_layers(
            vec![
                LayerParams::dense(array![[0.5, 1e-9, 2.0]], array![0.0, 0.0, 0.0]),
                LayerParams::dense(array![[1.0], [1.0], [1.0]], array![0.0]),
            ],
            Activation::Tanh,
        )
        .unwrap();
        let mut hyper = HyperState::init(&net, Granularity::entrywise());
        hyper.layers[0].upsilon = array![[1e-12, 1.0, 1.0]];
        let (pruned, h, removed) = prune(&net, &hyper, 1e-8, 1e-6).unwrap();
        assert_eq!(removed, 2);
        assert_eq!(pruned.layers[0].mask, array![[false, false, true]]);
        assert_eq!(h.layers[0].upsilon, array![[0.0, 0.0, 1.0]]);
        assert_eq!(pruned.layers[0].w, array![[0.0, 0.0, 2.0]]);
    }

    #[test]
    fn epsilon_thresholds_prune_only_exact_zeros() {
        let net = Network::from_layers(
            vec![
                LayerParams::dense(array![[0.0, 1e-300, -3.0]], array![0.0, 0.0, 0.0]),
                LayerParams::dense(array![[1.0], [1.0], [1.0]], array![0.0]),
            ],
            Activation::Tanh,
        )
        .unwrap();
        let mut hyper = HyperState::init(&net, Granularity::entrywise());
        hyper.layers[0].upsilon = array![[0.0, 1e-300, 3.0]];
        let (pruned, _, removed) = prune(&net, &hyper, f64::EPSILON, f64::EPSILON).unwrap();
        assert_eq!(removed, 1 + 1);
        assert!(pruned.layers[0].mask[[0, 2]]);
        let (_, _, removed) = prune(&net, &hyper, f64::MIN_POSITIVE, f64::MIN_POSITIVE).unwrap();
        assert_eq!(removed, 1);
    }

    #[test]
    fn pruned_forward_equals_dense_with_zeros() {
        let net = Network::new(3, &[4, 2], Activation::Tanh, 4).unwrap();
        let mut hyper = HyperState::init(&net, Granularity::entrywise());
        hyper.layers[0].upsilon[[1, 2]] = 1e-9;
        hyper.layers[1].upsilon[[3, 0]] = 1e-9;
        let (pruned, _, removed) = prune(&net, &hyper, 1e-6, 1e-12).unwrap();
        assert_eq!(removed, 2);
        let mut dense = net.clone();
        dense.layers[0].w[[1, 2]] = 0.0;
        dense.layers[1].w[[3, 0]] = 0.0;
        let z = array![[0.2, -0.7, 1.1], [0.0, 0.5, -0.5]];
        assert_eq!(
            pruned.predict(z.view()).unwrap(),
            dense.predict(z.view()).unwrap()
        );
    }

    #[test]
    fn disconnecting_a_layer_fails_loudly() {
        let net = Network::new(2, &[2], Activation::Tanh, 0).unwrap();
        let mut hyper = HyperState::init(&net, Granularity::Row);
        hyper.layers[1].upsilon.fill(1e-20);
        assert!(matches!(
            prune(&net, &hyper, 1e-10, 1e-12),
            Err(Error::LayerDisconnected { layer: 1 })
        ));
    }

    #[test]
    fn sparsity_counts() {
        let net = Network::new(3, &[4], Activation::Tanh, 0).unwrap();
        assert_eq!(sparsity(&net), 1.0);
        let mut one = Network::from_layers(
            vec![
                LayerParams::dense(array![[1.0, 2.0], [3.0, 4.0]], array![0.0, 0.0]),
                LayerParams::dense(array![[1.0], [1.0]], array![0.0]),
            ],
            Activation::Tanh,
        )
        .unwrap();
        one.layers[0].prune_entry(0, 0);
        one.layers[0].prune_entry(0, 1);
        one.layers[0].prune_entry(1, 0);
        assert_eq!(one.layers[0].active_count() as f64 / 4.0, 0.25);
        assert_eq!(neuron_sparsity(&one), 3.0 / 4.0);
    }

    #[test]
    fn config_round_trips_through_kv() {
        let mut cfg = TrainConfig::simulation();
        cfg.lambda = vec![0.1, 0.2, 0.3, 0.4];
        cfg.batch_size = None;
        cfg.granularity = Granularity::Shape { rows: 2, cols: 3 };
        cfg.patience = Some(4);
        let text = cfg.to_kv_string();
        assert_eq!(TrainConfig::from_kv_str(&text, None).unwrap(), cfg);
    }

    #[test]
    fn missing_key_is_named() {
        let text = TrainConfig::prediction().to_kv_string();
        let without: String = text
            .lines()
            .filter(|l| !l.starts_with("sigma2"))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = TrainConfig::from_kv_str(&without, None).unwrap_err();
        assert!(err.to_string().contains("sigma2"), "{err}");
        // with a base, partial documents are fine
        let cfg =
            TrainConfig::from_kv_str("sigma2 = 0.5\n", Some(&TrainConfig::prediction())).unwrap();
        assert_eq!(cfg.sigma2, 0.5);
        assert!(TrainConfig::from_kv_str("bogus = 1\n", Some(&TrainConfig::prediction())).is_err());
    }

    #[test]
    fn presets_mirror_experiments() {
        let p = TrainConfig::preset("prediction").unwrap();
        assert_eq!(
            (p.layer_widths.clone(), p.n_a, p.n_b),
            (vec![100, 100], 5, 5)
        );
        let s = TrainConfig::preset("simulation").unwrap();
        assert_eq!(
            (s.layer_widths.clone(), s.n_a, s.n_b),
            (vec![10, 10, 10], 19, 19)
        );
        assert!(TrainConfig::preset("nope").is_err());
    }

    #[test]
    fn minibatcher_covers_epoch_without_repeats() {
        let mut b = MiniBatcher::new(10, Some(5));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen: Vec<usize> = b.next_batch(&mut rng);
        seen.extend(b.next_batch(&mut rng));
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn rng_state_round_trip() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let _: u64 = rng.random();
        let state = RngState::capture(&rng);
        let mut restored = state.restore();
        assert_eq!(rng.random::<u64>(), restored.random::<u64>());
    }
}
