//! Acceptance gate. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 1-6 are binding and fail the test. Criteria 7-9 need the real benchmark
//! (`train.csv` and `test.csv` with `u` and `y` columns in `$SPARSID_BENCH_DIR`); without it
//! they print NOT RUN. `SPARSID_BENCH_REPEATS` (default 20) sets the restarts per setting.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsid_core::eval::{self, EvalMode, SweepSpec};
use sparsid_core::mlp_core::{self, Activation, CurvatureMode, LayerParams, Network};
use sparsid_core::narx_data::*;
use sparsid_core::sparse_bayes::{self, Granularity, HyperState, UPSILON_FLOOR};
use sparsid_core::trainer::{self, TrainConfig};

const GRAD_TOL: f64 = 1e-5;
const HESS_TOL: f64 = 1e-4;
const IDENTITY_TOL: f64 = 1e-12;
const E2E_RMSE_FRACTION: f64 = 0.10;
const E2E_MAX_SPARSITY: f64 = 0.50;
const JOBS_TOL: f64 = 1e-12;
const BENCH_PRED_RMSE: f64 = 0.07;
const BENCH_SIM_RMSE: f64 = 0.50;
const BENCH_UNREG_BAND: (f64, f64) = (0.6, 3.0);
const BENCH_SPARSITY: f64 = 0.15;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: Option<bool>,
    detail: String,
}

fn report(o: &Outcome) {
    let tag = match o.pass {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "NOT RUN",
    };
    println!("[{tag}] {}. {}: {}", o.id, o.name, o.detail);
}

const ACTS: [Activation; 3] = [Activation::Sigmoid, Activation::Tanh, Activation::Relu];

fn random_net(
    rng: &mut ChaCha8Rng,
    act: Activation,
    max_width: usize,
    max_depth: usize,
) -> Network {
    let input = rng.random_range(1..=max_width);
    let depth = rng.random_range(1..=max_depth);
    let hidden: Vec<usize> = (0..depth - 1)
        .map(|_| rng.random_range(1..=max_width))
        .collect();
    let mut net = Network::new(input, &hidden, act, rng.random()).unwrap();
    for l in &mut net.layers {
        l.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    net
}

/// Keeps ReLU finite differences away from kinks.
fn off_kinks(net: &Network, z: &Array2<f64>) -> bool {
    let trace = mlp_core::forward(net, z.view()).unwrap();
    net.activation != Activation::Relu
        || trace
            .pre
            .iter()
            .take(net.layers.len() - 1)
            .all(|h| h.iter().all(|v| v.abs() > 1e-3))
}

fn sample_batch(rng: &mut ChaCha8Rng, net: &Network, n: usize) -> (Array2<f64>, Array1<f64>) {
    loop {
        let z =
            Array2::from_shape_simple_fn((n, net.input_width()), || rng.random_range(-1.5..1.5));
        let y = Array1::from_shape_simple_fn(n, || rng.random_range(-1.0..1.0));
        if off_kinks(net, &z) {
            return (z, y);
        }
    }
}

/// `max|a - b| / max|b|`.
fn normwise_rel(a: &[f64], b: &[f64]) -> f64 {
    let err = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    err / scale
}

fn criterion_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let act = ACTS[k % 3];
        let net = random_net(&mut rng, act, 8, 3);
        let (z, y) = sample_batch(&mut rng, &net, 5);
        let sigma2 = rng.random_range(0.2..2.0);
        let trace = mlp_core::forward(&net, z.view()).unwrap();
        let g = mlp_core::backward(&net, &trace, &y, sigma2).unwrap();
        let (mut ana, mut fd) = (Vec::new(), Vec::new());
        for l in 0..net.layers.len() {
            let (nr, nc) = net.layers[l].w.dim();
            for i in 0..nr {
                for j in 0..nc {
                    let mut p = net.clone();
                    p.layers[l].w[[i, j]] += h;
                    let mut m = net.clone();
                    m.layers[l].w[[i, j]] -= h;
                    let d = (mlp_core::loss(&p, z.view(), &y, sigma2).unwrap()
                        - mlp_core::loss(&m, z.view(), &y, sigma2).unwrap())
                        / (2.0 * h);
                    ana.push(g.layers[l].grad_w[[i, j]]);
                    fd.push(d);
                }
            }
            for j in 0..net.layers[l].b.len() {
                let mut p = net.clone();
                p.layers[l].b[j] += h;
                let mut m = net.clone();
                m.layers[l].b[j] -= h;
                let d = (mlp_core::loss(&p, z.view(), &y, sigma2).unwrap()
                    - mlp_core::loss(&m, z.view(), &y, sigma2).unwrap())
                    / (2.0 * h);
                ana.push(g.layers[l].grad_b[j]);
                fd.push(d);
            }
        }
        worst = worst.max(normwise_rel(&ana, &fd));
    }
    Outcome {
        id: 1,
        name: "gradient vs central differences (100 nets)",
        pass: Some(worst < GRAD_TOL),
        detail: format!("max relative error {worst:.2e} (tol {GRAD_TOL:.0e})"),
    }
}

fn criterion_hessian() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut nets = 0;
    let mut min_gn = f64::INFINITY;
    while nets < 60 {
        let act = ACTS[nets % 3];
        let net = random_net(&mut rng, act, 5, 3);
        let params: usize = net.layers.iter().map(|l| l.w.len() + l.b.len()).sum();
        if params > 60 {
            continue;
        }
        nets += 1;
        // the Kronecker-factored layer Hessian is exact for a single sample
        let (z, y) = sample_batch(&mut rng, &net, 1);
        let sigma2 = rng.random_range(0.2..2.0);
        let trace = mlp_core::forward(&net, z.view()).unwrap();
        let curv =
            mlp_core::curvature(&net, &trace, &y, sigma2, CurvatureMode::ExactSmall).unwrap();
        for l in 0..net.layers.len() {
            let full = curv.layers[l].full_hessian.as_ref().unwrap();
            let (nr, nc) = net.layers[l].w.dim();
            let grad_at = |n: &Network| {
                let t = mlp_core::forward(n, z.view()).unwrap();
                mlp_core::backward(n, &t, &y, sigma2).unwrap().layers[l]
                    .grad_w
                    .clone()
            };
            let (mut ana, mut fd) = (Vec::new(), Vec::new());
            for i in 0..nr {
                for j in 0..nc {
                    let mut p = net.clone();
                    p.layers[l].w[[i, j]] += h;
                    let mut m = net.clone();
                    m.layers[l].w[[i, j]] -= h;
                    let col = (grad_at(&p) - grad_at(&m)) / (2.0 * h);
                    for (k, v) in col.iter().enumerate() {
                        ana.push(full[[k, i * nc + j]]);
                        fd.push(*v);
                    }
                }
            }
            worst = worst.max(normwise_rel(&ana, &fd));
        }
        // Gauss-Newton diagonal on a multi-sample batch
        let (zb, yb) = sample_batch(&mut rng, &net, 7);
        let tb = mlp_core::forward(&net, zb.view()).unwrap();
        let gn =
            mlp_core::curvature(&net, &tb, &yb, sigma2, CurvatureMode::GaussNewtonDiag).unwrap();
        for l in 0..net.layers.len() {
            min_gn = min_gn.min(
                gn.hdiag(l)
                    .unwrap()
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min),
            );
        }
    }
    Outcome {
        id: 2,
        name: "exact curvature vs differenced gradients; Gauss-Newton diagonal >= 0",
        pass: Some(worst < HESS_TOL && min_gn >= 0.0),
        detail: format!(
            "max relative error {worst:.2e} (tol {HESS_TOL:.0e}), min GN hdiag {min_gn:.2e}"
        ),
    }
}

fn criterion_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // two-step alpha vs closed form
    let mut worst_alpha: f64 = 0.0;
    for _ in 0..200 {
        let (nr, nc) = (rng.random_range(1..6), rng.random_range(1..6));
        let v = Array2::from_shape_simple_fn((nr, nc), || 10f64.powf(rng.random_range(-6.0..3.0)));
        let hd = Array2::from_shape_simple_fn((nr, nc), || rng.random_range(0.0..1e3));
        let mask = Array2::from_elem((nr, nc), true);
        let c = sparse_bayes::compute_c_diag(&v, &hd, &mask, UPSILON_FLOOR).unwrap();
        let (a, _) = sparse_bayes::update_alpha(&c, &v, &mask);
        let closed = sparse_bayes::alpha_closed_form(&hd, &v, &mask);
        // the two-step form subtracts two terms of size 1/upsilon, so that is the error scale
        for ((x, y), vv) in a.iter().zip(closed.iter()).zip(v.iter()) {
            worst_alpha = worst_alpha.max((x - y).abs() / (1.0 + y.abs()).max(1.0 / vv));
        }
    }
    // AM-GM tightness
    let mut worst_amgm: f64 = 0.0;
    for _ in 0..1000 {
        let w: f64 = rng.random_range(-10.0..10.0);
        let alpha: f64 = rng.random_range(1e-4..10.0);
        let v = w.abs() / alpha.sqrt();
        if v == 0.0 {
            continue;
        }
        let lhs = w * w / v + alpha * v;
        let rhs = 2.0 * (alpha.sqrt() * w).abs();
        worst_amgm = worst_amgm.max((lhs - rhs).abs() / rhs.max(1.0));
    }
    // group constancy of omega and upsilon
    let mut violations = 0;
    for k in 0..200 {
        let gran = match k % 3 {
            0 => Granularity::Row,
            1 => Granularity::Column,
            _ => Granularity::Shape {
                rows: rng.random_range(1..4),
                cols: rng.random_range(1..4),
            },
        };
        let (nr, nc) = (rng.random_range(1..7), rng.random_range(1..7));
        let mask = Array2::from_shape_simple_fn((nr, nc), || rng.random_bool(0.8));
        let w = Array2::from_shape_fn((nr, nc), |(i, j)| {
            if mask[[i, j]] {
                rng.random_range(-2.0..2.0)
            } else {
                0.0
            }
        });
        let alpha = Array2::from_shape_simple_fn((nr, nc), || rng.random_range(0.0..3.0));
        let prev = sparse_bayes::update_omega(
            &Array2::from_shape_simple_fn((nr, nc), || rng.random_range(0.5..2.0)),
            &mask,
            gran,
        );
        let omega = sparse_bayes::update_omega(&alpha, &mask, gran);
        let ups =
            sparse_bayes::update_upsilon(&w, &prev, &Array2::ones((nr, nc)), &mask, gran).upsilon;
        for ((i, j), &a) in mask.indexed_iter() {
            for ((p, q), &b) in mask.indexed_iter() {
                if a && b
                    && gran.group_of(i, j, nc) == gran.group_of(p, q, nc)
                    && (omega[[i, j]] != omega[[p, q]] || ups[[i, j]] != ups[[p, q]])
                {
                    violations += 1;
                }
            }
        }
    }
    Outcome {
        id: 3,
        name: "hyper-parameter update identities",
        pass: Some(worst_alpha <= IDENTITY_TOL && worst_amgm <= IDENTITY_TOL && violations == 0),
        detail: format!(
            "alpha two-step vs closed form {worst_alpha:.1e}, AM-GM gap {worst_amgm:.1e} (tol {IDENTITY_TOL:.0e}), group constancy violations {violations}"
        ),
    }
}

fn tank(input_seed: u64, n: usize) -> SignalPair {
    let u = random_step_input(n, 25, 2.0, 8.0, input_seed);
    simulate_tank(&TankParams::default(), &u, 4.0, 0)
        .unwrap()
        .signal
}

fn criterion_prox_pruning() -> Outcome {
    let mut problems = Vec::new();
    // soft threshold produces exact zeros
    let net = Network::from_layers(
        vec![LayerParams::dense(
            ndarray::array![[0.8], [-0.3]],
            ndarray::array![0.0],
        )],
        Activation::Tanh,
    )
    .unwrap();
    let mut hyper = HyperState::init(&net, Granularity::entrywise());
    hyper.layers[0].omega.fill(100.0);
    let ds = RegressorDataset {
        rows: ndarray::array![[1.0, 0.5], [0.2, -1.0]],
        targets: ndarray::array![0.3, -0.1],
        target_index: vec![1, 2],
        n_a: 0,
        n_b: 1,
        norm: None,
    };
    let cfg = TrainConfig {
        lambda: vec![1.0],
        inner_steps: 5,
        step_size: 0.1,
        batch_size: None,
        layer_widths: vec![],
        n_a: 0,
        n_b: 1,
        ..TrainConfig::prediction()
    };
    let mut b = trainer::MiniBatcher::new(2, None);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = trainer::inner_optimize(&net, &hyper, &ds, &cfg, &mut b, &mut rng).unwrap();
    if out.layers[0].w.iter().any(|&w| w != 0.0) {
        problems.push(format!("weights not exactly zero: {:?}", out.layers[0].w));
    }
    // mask monotone over a real run, pruned forward equals dense-with-zeros forward
    let cfg = TrainConfig {
        layer_widths: vec![8, 8],
        lambda: vec![0.02],
        t_max: 15,
        inner_steps: 60,
        ..TrainConfig::prediction()
    };
    let raw = build_regressors(&tank(7, 300), cfg.n_a, cfg.n_b).unwrap();
    let (ds, _) = trainer::prepare(&cfg, &raw, None).unwrap();
    let mut tr = trainer::Trainer::new(&cfg, &ds, None).unwrap();
    let mut prev: Vec<Array2<bool>> = tr
        .model()
        .net
        .layers
        .iter()
        .map(|l| l.mask.clone())
        .collect();
    let mut regrown = 0;
    while !tr.is_done() {
        tr.step().unwrap();
        for (l, layer) in tr.model().net.layers.iter().enumerate() {
            regrown += layer
                .mask
                .iter()
                .zip(prev[l].iter())
                .filter(|(now, before)| **now && !**before)
                .count();
        }
        prev = tr
            .model()
            .net
            .layers
            .iter()
            .map(|l| l.mask.clone())
            .collect();
    }
    if regrown > 0 {
        problems.push(format!("{regrown} pruned weights re-activated"));
    }
    let pruned = &tr.model().net;
    let mut dense = pruned.clone();
    for l in &mut dense.layers {
        l.mask.fill(true);
    }
    if pruned.predict(ds.rows.view()).unwrap() != dense.predict(ds.rows.view()).unwrap() {
        problems.push("pruned forward differs from dense-with-zeros forward".into());
    }
    let active = pruned.active_weights();
    Outcome {
        id: 4,
        name: "proximal zeros and pruning semantics",
        pass: Some(problems.is_empty()),
        detail: if problems.is_empty() {
            format!(
                "exact zeros, monotone masks, identical forward ({active}/{} active)",
                pruned.total_weights()
            )
        } else {
            problems.join("; ")
        },
    }
}

fn criterion_end_to_end() -> Outcome {
    let train = tank(1, 1000);
    let test = tank(2, 1000);
    let cfg = TrainConfig {
        layer_widths: vec![20, 20],
        ..TrainConfig::prediction()
    };
    let raw = build_regressors(&train, cfg.n_a, cfg.n_b).unwrap();
    let t0 = Instant::now();
    let reg = trainer::fit_raw(&cfg, &raw, None).unwrap();
    let unreg = trainer::fit_raw(&cfg.unregularized(), &raw, None).unwrap();
    let rep = eval::predict_one_step(&reg, &test).unwrap();
    let std = Array1::from(rep.truth.clone()).std(0.0);
    let frac = rep.rmse / std;
    let (sp, sp_un) = (trainer::sparsity(&reg.net), trainer::sparsity(&unreg.net));
    Outcome {
        id: 5,
        name: "noiseless tank, widths [20,20], 50 outer iterations",
        pass: Some(frac < E2E_RMSE_FRACTION && sp < E2E_MAX_SPARSITY && sp_un == 1.0 && reg.history.len() <= 50),
        detail: format!(
            "test RMSE {:.4} = {:.1}% of output std (< {:.0}%), sparsity {:.1}% (< {:.0}%), unregularized {:.1}%, {:.1}s",
            rep.rmse,
            100.0 * frac,
            100.0 * E2E_RMSE_FRACTION,
            100.0 * sp,
            100.0 * E2E_MAX_SPARSITY,
            100.0 * sp_un,
            t0.elapsed().as_secs_f64()
        ),
    }
}

fn criterion_determinism() -> Outcome {
    let train = tank(3, 300);
    let test = tank(4, 300);
    let cfg = TrainConfig {
        layer_widths: vec![6, 6],
        t_max: 5,
        inner_steps: 50,
        ..TrainConfig::prediction()
    };
    let ratios = [0.5, 1.0];
    let run = |jobs: usize| {
        let spec = SweepSpec {
            cfg: &cfg,
            train: &train,
            test: &test,
            mode: EvalMode::Prediction,
            subset: SubsetMode::Random,
            jobs,
        };
        let cells = eval::ratio_sweep(&spec, &ratios, 3, 42, &[], &|_| {}).unwrap();
        eval::summarize(&cells, spec.divergence_cap())
    };
    let a = run(1);
    let b = run(1);
    let c = run(4);
    let same = eval::summary_csv(&a) == eval::summary_csv(&b);
    let close = a.len() == c.len()
        && a.iter().zip(&c).all(|((r1, s1), (r2, s2))| {
            r1 == r2
                && (s1.best - s2.best).abs() <= JOBS_TOL
                && (s1.mean - s2.mean).abs() <= JOBS_TOL
                && (s1.std - s2.std).abs() <= JOBS_TOL
        });
    Outcome {
        id: 6,
        name: "sweep determinism",
        pass: Some(same && close),
        detail: format!(
            "repeat at --jobs 1 identical: {same}; --jobs 4 within {JOBS_TOL:.0e}: {close}"
        ),
    }
}

struct Bench {
    train: SignalPair,
    test: SignalPair,
    repeats: usize,
}

fn bench() -> Option<Bench> {
    let dir = PathBuf::from(std::env::var_os("SPARSID_BENCH_DIR")?);
    let repeats = std::env::var("SPARSID_BENCH_REPEATS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(20);
    Some(Bench {
        train: load_benchmark_csv(dir.join("train.csv")).ok()?,
        test: load_benchmark_csv(dir.join("test.csv")).ok()?,
        repeats,
    })
}

fn lambda_grid() -> Vec<f64> {
    eval::log_grid(1e-3, 3e-2, 4).unwrap()
}

/// Best RMSE and its lambda over a lambda grid with `repeats` restarts each.
fn best_over_lambdas(b: &Bench, base: &TrainConfig, mode: EvalMode, ratio: f64) -> (f64, f64, f64) {
    let mut best = (f64::INFINITY, f64::NAN, f64::NAN);
    for lambda in lambda_grid() {
        let cfg = TrainConfig {
            lambda: vec![lambda],
            ..base.clone()
        };
        let spec = SweepSpec {
            cfg: &cfg,
            train: &b.train,
            test: &b.test,
            mode,
            subset: SubsetMode::Random,
            jobs: rayon::current_num_threads(),
        };
        let cells = eval::ratio_sweep(&spec, &[ratio], b.repeats, 0, &[], &|_| {}).unwrap();
        for c in cells.iter().filter(|c| !c.failed()) {
            if c.rmse < best.0 {
                best = (c.rmse, lambda, c.sparsity);
            }
        }
    }
    best
}

fn not_run(id: u32, name: &'static str) -> Outcome {
    Outcome {
        id,
        name,
        pass: None,
        detail: "set SPARSID_BENCH_DIR to a directory with train.csv and test.csv".into(),
    }
}

fn benchmark_criteria() -> Vec<Outcome> {
    let Some(b) = bench() else {
        return vec![
            not_run(7, "benchmark one-step prediction"),
            not_run(8, "benchmark free-run simulation"),
            not_run(9, "benchmark sparsity at 80% data"),
        ];
    };
    let (p_rmse, p_lambda, _) =
        best_over_lambdas(&b, &TrainConfig::prediction(), EvalMode::Prediction, 1.0);
    let (s_rmse, s_lambda, _) =
        best_over_lambdas(&b, &TrainConfig::simulation(), EvalMode::Simulation, 1.0);
    let unreg_cfg = TrainConfig::simulation().unregularized();
    let spec = SweepSpec {
        cfg: &unreg_cfg,
        train: &b.train,
        test: &b.test,
        mode: EvalMode::Simulation,
        subset: SubsetMode::Random,
        jobs: rayon::current_num_threads(),
    };
    let cells = eval::ratio_sweep(&spec, &[1.0], b.repeats, 0, &[], &|_| {}).unwrap();
    let unreg = eval::summarize(&cells, spec.divergence_cap());
    let unreg_best = unreg.first().map_or(f64::INFINITY, |(_, s)| s.best);
    let pcfg = TrainConfig {
        lambda: vec![p_lambda],
        ..TrainConfig::prediction()
    };
    let spec = SweepSpec {
        cfg: &pcfg,
        train: &b.train,
        test: &b.test,
        mode: EvalMode::Prediction,
        subset: SubsetMode::Random,
        jobs: rayon::current_num_threads(),
    };
    let cells = eval::ratio_sweep(&spec, &[0.8], b.repeats, 0, &[], &|_| {}).unwrap();
    let best80 = cells
        .iter()
        .filter(|c| !c.failed())
        .min_by(|a, b| a.rmse.total_cmp(&b.rmse));
    let sp80 = best80.map_or(f64::NAN, |c| c.sparsity);
    vec![
        Outcome {
            id: 7,
            name: "benchmark one-step prediction",
            pass: Some(p_rmse <= BENCH_PRED_RMSE),
            detail: format!("best RMSE {p_rmse:.4} at lambda {p_lambda:.1e} (target <= {BENCH_PRED_RMSE}), {} restarts", b.repeats),
        },
        Outcome {
            id: 8,
            name: "benchmark free-run simulation",
            pass: Some(s_rmse <= BENCH_SIM_RMSE && unreg_best >= BENCH_UNREG_BAND.0 && unreg_best <= BENCH_UNREG_BAND.1),
            detail: format!(
                "best RMSE {s_rmse:.4} at lambda {s_lambda:.1e} (target <= {BENCH_SIM_RMSE}); unregularized best {unreg_best:.4} (band {:?})",
                BENCH_UNREG_BAND
            ),
        },
        Outcome {
            id: 9,
            name: "benchmark sparsity at 80% data",
            pass: Some(sp80 < BENCH_SPARSITY),
            detail: format!("active fraction {:.2}% of best run (target < {:.0}%)", 100.0 * sp80, 100.0 * BENCH_SPARSITY),
        },
    ]
}

#[test]
fn acceptance() {
    let t0 = Instant::now();
    let binding = [
        criterion_gradient(),
        criterion_hessian(),
        criterion_identities(),
        criterion_prox_pruning(),
        criterion_end_to_end(),
        criterion_determinism(),
    ];
    println!("binding suite ({:.1}s):", t0.elapsed().as_secs_f64());
    binding.iter().for_each(report);
    println!("benchmark reproduction (non-blocking):");
    benchmark_criteria().iter().for_each(report);
    let failed: Vec<u32> = binding
        .iter()
        .filter(|o| o.pass != Some(true))
        .map(|o| o.id)
        .collect();
    assert!(failed.is_empty(), "binding criteria failed: {failed:?}");
}
