//! `sparsid` command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod manifest;

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use sparsid_core::eval::{self, EvalMode, EvalReport, SweepSpec};
use sparsid_core::narx_data::{
    build_regressors, load_benchmark_csv, random_step_input, simulate_tank, subset_ratio,
    write_tank_csv, SignalPair, SubsetMode, TankParams,
};
use sparsid_core::seeds;
use sparsid_core::trainer::{self, Checkpoint, ModelFile, TrainConfig, Trainer};
use sparsid_core::{write_atomic, Error, Result};

use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "sparsid",
    version,
    about = "Sparse Bayesian NARX identification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the cascaded two-tank system and write `t,u,y,x1,x2`.
    SimulateData(SimulateDataArgs),
    /// Train a sparse NARX network.
    Train(TrainArgs),
    /// One-step-ahead prediction on a test series.
    Predict(EvalArgs),
    /// Free-run simulation on a test series.
    Simulate(EvalArgs),
    /// Data-ratio sweep with restarts, or a lambda sweep with `--lambdas`.
    Sweep(SweepArgs),
    /// Replay a run from its manifest into a new location and compare outputs.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct SimulateDataArgs {
    #[arg(long, default_value_t = 0.1)]
    pub k1: f64,
    #[arg(long, default_value_t = 0.1)]
    pub k2: f64,
    #[arg(long, default_value_t = 0.1)]
    pub k3: f64,
    #[arg(long, default_value_t = 0.05)]
    pub k4: f64,
    /// Integration and sample period in seconds.
    #[arg(long, default_value_t = 4.0)]
    pub dt: f64,
    #[arg(long, default_value_t = 1024)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise_w1: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise_w2: f64,
    /// Measurement noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    pub noise_e: f64,
    #[arg(long, default_value_t = 4.0)]
    pub x1_0: f64,
    #[arg(long, default_value_t = 4.0)]
    pub x2_0: f64,
    /// Overflow level of both tanks.
    #[arg(long, default_value_t = 10.0)]
    pub cap: f64,
    #[arg(long)]
    pub no_cap: bool,
    /// Samples per input level of the random step excitation.
    #[arg(long, default_value_t = 25)]
    pub hold: usize,
    #[arg(long, default_value_t = 2.0)]
    pub u_min: f64,
    #[arg(long, default_value_t = 8.0)]
    pub u_max: f64,
    /// Seed of the random step input.
    #[arg(long, default_value_t = 0)]
    pub input_seed: u64,
    /// Read the input from the `u` column of a CSV instead of generating it.
    #[arg(long)]
    pub input_csv: Option<PathBuf>,
    /// Seed of the process and measurement noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` file; without `--preset` every key is required.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `prediction` or `simulation`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Override one config key, e.g. `--set lambda=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub train_csv: PathBuf,
    #[arg(long)]
    pub val_csv: Option<PathBuf>,
    /// Fraction of training rows to use.
    #[arg(long, default_value_t = 1.0)]
    pub ratio: f64,
    /// `random` or `prefix`.
    #[arg(long, default_value = "random")]
    pub subset: String,
    /// Continue from a checkpoint; its configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model or checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test_csv: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub train_csv: PathBuf,
    #[arg(long)]
    pub test_csv: PathBuf,
    /// `prediction` or `simulation`.
    #[arg(long, default_value = "prediction")]
    pub mode: String,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.05,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"
    )]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Sweep these shared lambda values on the full training data instead of ratios.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value = "random")]
    pub subset: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where the replayed outputs go.
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Process exit status for an error: 2 bad arguments, 3 data, 4 numeric.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::Data(_)
        | Error::Shape(_)
        | Error::Serde(_) => 3,
        Error::Numeric(_) | Error::LayerDisconnected { .. } => 4,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPARSID_LOG", "warn"))
        .try_init();
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let argv: Vec<String> = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match dispatch(cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command, argv: &[String]) -> Result<()> {
    match cmd {
        Command::SimulateData(a) => cmd_simulate_data(&a, argv),
        Command::Train(a) => cmd_train(&a, argv),
        Command::Predict(a) => cmd_eval(&a, EvalMode::Prediction, argv),
        Command::Simulate(a) => cmd_eval(&a, EvalMode::Simulation, argv),
        Command::Sweep(a) => cmd_sweep(&a, argv),
        Command::Rerun(a) => cmd_rerun(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn manifest_path_for(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn cmd_simulate_data(a: &SimulateDataArgs, argv: &[String]) -> Result<()> {
    let mut manifest = RunManifest::start("simulate-data", argv);
    manifest.seed = Some(a.seed);
    let params = TankParams {
        k1: a.k1,
        k2: a.k2,
        k3: a.k3,
        k4: a.k4,
        noise_std_w1: a.noise_w1,
        noise_std_w2: a.noise_w2,
        noise_std_e: a.noise_e,
        x1_0: a.x1_0,
        x2_0: a.x2_0,
        overflow_cap: (!a.no_cap).then_some(a.cap),
    };
    let u = match &a.input_csv {
        Some(path) => {
            manifest.input(path)?;
            load_benchmark_csv(path)?.u
        }
        None => {
            if a.steps == 0 || a.hold == 0 {
                return Err(Error::Config("--steps and --hold must be positive".into()));
            }
            if !(a.u_min <= a.u_max) {
                return Err(Error::Config(format!(
                    "--u-min {} exceeds --u-max {}",
                    a.u_min, a.u_max
                )));
            }
            random_step_input(a.steps, a.hold, a.u_min, a.u_max, a.input_seed)
        }
    };
    let run = simulate_tank(&params, &u, a.dt, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_tank_csv(&a.out, &run)?;
    manifest.output(&a.out)?;
    manifest.finish(&manifest_path_for(&a.out))?;
    println!("wrote {} samples to {}", run.signal.len(), a.out.display());
    Ok(())
}

/// Preset, then config file, then `--set`, then `--seed`.
fn resolve_config(a: &ConfigArgs, manifest: &mut RunManifest) -> Result<TrainConfig> {
    let base = match &a.preset {
        Some(p) => Some(TrainConfig::preset(p)?),
        None => None,
    };
    let mut cfg = match (&a.config, base) {
        (Some(path), base) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            manifest.input(path)?;
            TrainConfig::from_kv_str(&text, base.as_ref())
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        (None, Some(base)) => base,
        (None, None) => return Err(Error::Config("need --config or --preset".into())),
    };
    let mut pairs = Vec::with_capacity(a.set.len());
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if !pairs.is_empty() {
        cfg = cfg.with_overrides(&pairs)?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    manifest.seed = Some(cfg.seed);
    manifest.config = Some(serde_json::to_value(&cfg)?);
    Ok(cfg)
}

fn load_signal(path: &Path, manifest: &mut RunManifest) -> Result<SignalPair> {
    let s = load_benchmark_csv(path)?;
    manifest.input(path)?;
    Ok(s)
}

fn parse_subset(s: &str) -> Result<SubsetMode> {
    match s {
        "random" => Ok(SubsetMode::Random),
        "prefix" => Ok(SubsetMode::Prefix),
        other => Err(Error::Config(format!("unknown subset mode {other:?}"))),
    }
}

fn cmd_train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let mut manifest = RunManifest::start("train", argv);
    let resume: Option<Checkpoint> = match &a.resume {
        Some(path) => {
            manifest.input(path)?;
            match ModelFile::load(path)? {
                ModelFile::Checkpoint(ck) => Some(*ck),
                ModelFile::Model(_) => {
                    return Err(Error::Config(format!(
                        "{} is a finished model, not a checkpoint",
                        path.display()
                    )))
                }
            }
        }
        None => None,
    };
    let cfg = match &resume {
        Some(ck) => {
            manifest.seed = Some(ck.model.config.seed);
            manifest.config = Some(serde_json::to_value(&ck.model.config)?);
            ck.model.config.clone()
        }
        None => resolve_config(&a.cfg, &mut manifest)?,
    };
    let train_sig = load_signal(&a.train_csv, &mut manifest)?;
    let val_sig = match &a.val_csv {
        Some(p) => Some(load_signal(p, &mut manifest)?),
        None => None,
    };
    let raw = build_regressors(&train_sig, cfg.n_a, cfg.n_b)?;
    let raw = subset_ratio(
        &raw,
        a.ratio,
        parse_subset(&a.subset)?,
        seeds::substream(cfg.seed, "subset"),
    )?;
    let val_raw = match &val_sig {
        Some(s) => Some(build_regressors(s, cfg.n_a, cfg.n_b)?),
        None => None,
    };
    let (train_ds, val_ds) = trainer::prepare(&cfg, &raw, val_raw.as_ref())?;
    create_dir(&a.out_dir)?;
    let ck_path = a.out_dir.join("checkpoint.json");
    let trainer = match resume {
        Some(ck) => Trainer::resume(ck, &train_ds, val_ds.as_ref())?,
        None => Trainer::new(&cfg, &train_ds, val_ds.as_ref())?,
    };
    let every = cfg.checkpoint_every;
    let model = trainer.run(|t| {
        if let Some(k) = every {
            if t.iteration() % k == 0 {
                ModelFile::Checkpoint(Box::new(t.checkpoint())).save(&ck_path)?;
                log::info!("checkpoint at iteration {}", t.iteration());
            }
        }
        Ok(())
    })?;

    let model_path = a.out_dir.join("model.json");
    ModelFile::Model(model.clone()).save(&model_path)?;
    let log_path = a.out_dir.join("cost_log.csv");
    write_file(&log_path, &trainer::cost_log_csv(&model.history))?;
    let cfg_path = a.out_dir.join("config.toml");
    write_file(&cfg_path, &cfg.to_kv_string())?;
    for p in [&model_path, &log_path, &cfg_path] {
        manifest.output(p)?;
    }
    if ck_path.exists() {
        manifest.output(&ck_path)?;
    }
    manifest.finish(&a.out_dir.join("manifest.json"))?;
    let rmse = model
        .history
        .last()
        .map_or("n/a".to_string(), |h| format!("{:.6}", h.train_rmse));
    println!(
        "trained {} iterations: train rmse {rmse}, active weights {}/{} ({:.2}%)",
        model.history.len(),
        model.net.active_weights(),
        model.net.total_weights(),
        100.0 * trainer::sparsity(&model.net)
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct ReportSummary<'a> {
    mode: EvalMode,
    rmse: f64,
    n: usize,
    diverged_at: Option<usize>,
    seed_outputs: usize,
    sparsity: f64,
    model: &'a Path,
}

fn cmd_eval(a: &EvalArgs, mode: EvalMode, argv: &[String]) -> Result<()> {
    let name = match mode {
        EvalMode::Prediction => "predict",
        EvalMode::Simulation => "simulate",
    };
    let mut manifest = RunManifest::start(name, argv);
    manifest.input(&a.model)?;
    let model = ModelFile::load(&a.model)?.into_model();
    manifest.seed = Some(model.config.seed);
    manifest.config = Some(serde_json::to_value(&model.config)?);
    let test = load_signal(&a.test_csv, &mut manifest)?;
    let report: EvalReport = eval::evaluate(&model, &test, mode)?;
    create_dir(&a.out_dir)?;
    let pred_path = a.out_dir.join("predictions.csv");
    write_file(&pred_path, &report.predictions_csv())?;
    let summary = ReportSummary {
        mode,
        rmse: report.rmse,
        n: report.predictions.len(),
        diverged_at: report.diverged_at,
        seed_outputs: sparsid_core::narx_data::first_target_index(model.n_a(), model.n_b()),
        sparsity: trainer::sparsity(&model.net),
        model: &a.model,
    };
    let rep_path = a.out_dir.join("report.json");
    write_file(&rep_path, &serde_json::to_string_pretty(&summary)?)?;
    manifest.output(&pred_path)?;
    manifest.output(&rep_path)?;
    manifest.finish(&a.out_dir.join("manifest.json"))?;
    match report.diverged_at {
        Some(t) => println!("{name}: diverged at sample {t}, rmse inf"),
        None => println!("{name}: rmse {}", report.rmse),
    }
    Ok(())
}

/// Identity of a sweep; resuming into a directory made by a different sweep is refused.
#[derive(serde::Serialize, serde::Deserialize, PartialEq)]
struct SweepKey {
    config: TrainConfig,
    mode: EvalMode,
    subset: SubsetMode,
    seed: u64,
    train_sha256: String,
    test_sha256: String,
}

fn cmd_sweep(a: &SweepArgs, argv: &[String]) -> Result<()> {
    let mut manifest = RunManifest::start("sweep", argv);
    let cfg = resolve_config(&a.cfg, &mut manifest)?;
    if a.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let mode: EvalMode = a.mode.parse()?;
    let subset = parse_subset(&a.subset)?;
    let train = load_signal(&a.train_csv, &mut manifest)?;
    let test = load_signal(&a.test_csv, &mut manifest)?;
    create_dir(&a.out_dir)?;
    let spec = SweepSpec {
        cfg: &cfg,
        train: &train,
        test: &test,
        mode,
        subset,
        jobs: a.jobs,
    };

    if let Some(lambdas) = &a.lambdas {
        let rows = eval::lambda_sweep(&spec, lambdas, cfg.seed)?;
        let path = a.out_dir.join("lambda_sweep.csv");
        write_file(&path, &eval::lambda_csv(&rows))?;
        manifest.output(&path)?;
        manifest.finish(&a.out_dir.join("manifest.json"))?;
        for r in &rows {
            match &r.error {
                Some(e) => println!("lambda {:e}: failed: {e}", r.lambda),
                None => println!(
                    "lambda {:e}: rmse {} sparsity {:.2}%",
                    r.lambda,
                    r.rmse,
                    100.0 * r.sparsity
                ),
            }
        }
        return Ok(());
    }

    let key = SweepKey {
        config: cfg.clone(),
        mode,
        subset,
        seed: cfg.seed,
        train_sha256: manifest
            .inputs
            .iter()
            .rev()
            .nth(1)
            .map(|d| d.sha256.clone())
            .unwrap_or_default(),
        test_sha256: manifest
            .inputs
            .last()
            .map(|d| d.sha256.clone())
            .unwrap_or_default(),
    };
    let key_path = a.out_dir.join("sweep_key.json");
    let sweep_path = a.out_dir.join("sweep.csv");
    let mut done = Vec::new();
    if key_path.exists() && sweep_path.exists() {
        let old: SweepKey =
            serde_json::from_str(&std::fs::read_to_string(&key_path).map_err(|e| Error::Io {
                path: key_path.clone(),
                source: e,
            })?)?;
        if old != key {
            return Err(Error::Config(format!(
                "{} holds a sweep with different settings; use another --out-dir",
                a.out_dir.display()
            )));
        }
        let text = std::fs::read_to_string(&sweep_path).map_err(|e| Error::Io {
            path: sweep_path.clone(),
            source: e,
        })?;
        done = eval::parse_sweep_csv(&text, &sweep_path)?;
    } else {
        write_file(&key_path, &serde_json::to_string_pretty(&key)?)?;
        write_file(&sweep_path, "ratio,repeat,rmse,sparsity,seed\n")?;
    }
    let file = OpenOptions::new()
        .append(true)
        .open(&sweep_path)
        .map_err(|e| Error::Io {
            path: sweep_path.clone(),
            source: e,
        })?;
    let sink = Mutex::new(file);
    let on_cell = |c: &eval::SweepCell| {
        let mut f = sink.lock().expect("sweep writer poisoned");
        if let Err(e) = writeln!(f, "{}", eval::sweep_line(c)).and_then(|_| f.flush()) {
            log::error!("could not record sweep cell: {e}");
        }
        match &c.error {
            Some(e) => log::warn!("ratio {} repeat {} failed: {e}", c.ratio, c.repeat),
            None => log::info!("ratio {} repeat {}: rmse {}", c.ratio, c.repeat, c.rmse),
        }
    };
    let cells = eval::ratio_sweep(&spec, &a.ratios, a.repeats, cfg.seed, &done, &on_cell)?;
    drop(sink);

    write_file(&sweep_path, &eval::sweep_csv(&cells))?;
    let summary = eval::summarize(&cells, spec.divergence_cap());
    let sum_path = a.out_dir.join("summary.csv");
    write_file(&sum_path, &eval::summary_csv(&summary))?;
    let detail_path = a.out_dir.join("summary_detail.csv");
    write_file(&detail_path, &eval::summary_detail_csv(&summary))?;
    for p in [&sweep_path, &sum_path, &detail_path] {
        manifest.output(p)?;
    }
    manifest.finish(&a.out_dir.join("manifest.json"))?;
    let failed = cells.iter().filter(|c| c.failed()).count();
    for (r, s) in &summary {
        println!(
            "ratio {r}: best {} mean {} std {} ({} of {} diverged)",
            s.best, s.mean, s.std, s.n_diverged, s.n_runs
        );
    }
    if failed > 0 {
        eprintln!("{failed} sweep cells failed; rerun the same command to retry them");
    }
    Ok(())
}

/// Replaces the output location in a recorded argument list.
fn redirect(argv: &[String], command: &str, out_dir: &Path) -> Result<Vec<String>> {
    let flag = if command == "simulate-data" {
        "--out"
    } else {
        "--out-dir"
    };
    let target = |old: &str| -> String {
        if command == "simulate-data" {
            let name = Path::new(old)
                .file_name()
                .map(PathBuf::from)
                .unwrap_or_else(|| "data.csv".into());
            out_dir.join(name).to_string_lossy().into_owned()
        } else {
            out_dir.to_string_lossy().into_owned()
        }
    };
    let mut out = Vec::with_capacity(argv.len());
    let mut replaced = false;
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == flag {
            let old = it
                .next()
                .ok_or_else(|| Error::Data(format!("manifest argv ends after {flag}")))?;
            out.push(a.clone());
            out.push(target(old));
            replaced = true;
        } else if let Some(old) = a.strip_prefix(&format!("{flag}=")) {
            out.push(format!("{flag}={}", target(old)));
            replaced = true;
        } else {
            out.push(a.clone());
        }
    }
    if !replaced {
        return Err(Error::Data(format!("manifest argv has no {flag}")));
    }
    Ok(out)
}

fn cmd_rerun(a: &RerunArgs) -> Result<()> {
    let old = RunManifest::load(&a.manifest)?;
    let changed = old.changed_inputs();
    if !changed.is_empty() {
        return Err(Error::Data(format!(
            "inputs changed since the recorded run: {}",
            changed
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    if old.command == "rerun" {
        return Err(Error::Config("cannot replay a rerun manifest".into()));
    }
    create_dir(&a.out_dir)?;
    let argv = redirect(&old.argv, &old.command, &a.out_dir)?;
    let cli =
        Cli::try_parse_from(std::iter::once("sparsid".to_string()).chain(argv.iter().cloned()))
            .map_err(|e| Error::Data(format!("manifest argv no longer parses: {e}")))?;
    dispatch(cli.command, &argv)?;

    let mut mismatched = Vec::new();
    for d in &old.outputs {
        let name = d.path.file_name().map(PathBuf::from).unwrap_or_default();
        let new_path = a.out_dir.join(&name);
        let now = manifest::sha256_file(&new_path)?;
        if now == d.sha256 {
            println!("match     {}", name.display());
        } else {
            println!("MISMATCH  {}", name.display());
            mismatched.push(name.display().to_string());
        }
    }
    if mismatched.is_empty() {
        println!("rerun reproduced all {} outputs", old.outputs.len());
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "rerun outputs differ from the manifest: {}",
            mismatched.join(", ")
        )))
    }
}
