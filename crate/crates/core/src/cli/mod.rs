//! Command-line front end. `run` parses arguments, executes one subcommand
//! and returns the process exit code.

mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ReportFormat, RunConfig};
use crate::data::{build_split, load_interactions, write_instances, Instance, SplitDataset, Vocab};
use crate::eval::{bench, overfit_report};
use crate::metawrapper::{train, Method, TrainConfig, TrainError, Trainer};
use crate::model::{load_checkpoint, save_checkpoint, Batch, Checkpoint, ModelDims, Variant};
use crate::oracle::{self, StubProblem, FD_EPS};

pub use output::{method_label, RunDir, SummaryRow};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const NUMERICAL: i32 = 2;
    pub const TOLERANCE: i32 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("tolerance check failed: {0}")]
    Tolerance(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Numerical(_) => exit::NUMERICAL,
            CliError::Tolerance(_) => exit::TOLERANCE,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "meta-wrapper", version, about = "Meta-learned interest selection for CTR prediction")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization and task sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; each run writes to <out>/<run-id>/.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Override a config value, e.g. --set train.mu=0.4 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic noisy-label dataset.
    Synth,
    /// Split an interaction log into an instance file.
    Prepare {
        /// Interaction log (TSV: user, item, category, timestamp, behavior).
        input: PathBuf,
    },
    /// Train one method, or a grid of mu/beta/N values.
    Train(TrainArgs),
    /// Score a checkpoint on the configured dataset.
    Eval {
        checkpoint: PathBuf,
    },
    /// Train M1-M4 over several seeds and compare.
    Ablate,
    /// Compare autodiff gradients with finite differences and closed forms.
    Gradcheck {
        /// Perturb the autodiff gradient to exercise the failure path.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Time training and inference steps of M1 against M4.
    Bench,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long = "n-inner")]
    pub n_inner: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Sweep every combination in the [grid] section.
    #[arg(long)]
    pub grid: bool,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("unknown method {s:?}; expected one of {}", names.join(", "))
    })
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

/// File, then `--set`, then the dedicated flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut sets = cli.set.clone();
    if let Some(seed) = cli.seed {
        sets.push(format!("train.seed={seed}"));
        sets.push(format!("dataset.seed={seed}"));
    }
    if let Some(out) = &cli.out {
        sets.push(format!("output.dir={}", toml::Value::String(out.display().to_string())));
    }
    if let Command::Train(t) = &cli.command {
        if let Some(m) = t.method {
            sets.push(format!("train.method=\"{}\"", m.name()));
        }
        for (key, v) in [("mu", t.mu), ("beta", t.beta)] {
            if let Some(v) = v {
                sets.push(format!("train.{key}={v:?}"));
            }
        }
        if let Some(n) = t.n_inner {
            sets.push(format!("train.n_inner={n}"));
        }
        if let Some(e) = t.epochs {
            sets.push(format!("train.epochs={e}"));
        }
    }
    Ok(RunConfig::load(cli.config.as_deref(), &sets)?)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    log::info!("effective config:\n{}", cfg.to_toml());
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, cli.force),
        Command::Prepare { input } => cmd_prepare(&cfg, input, cli.force),
        Command::Train(t) => cmd_train(&cfg, t.grid, cli.force),
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint, cli.force),
        Command::Ablate => cmd_ablate(&cfg, cli.force),
        Command::Gradcheck { corrupt } => cmd_gradcheck(&cfg, *corrupt, cli.force),
        Command::Bench => cmd_bench(&cfg, cli.force),
    }
}

fn run_dir(cfg: &RunConfig, default_id: String, force: bool) -> Result<RunDir, CliError> {
    let id = cfg.output.run_id.clone().unwrap_or(default_id);
    let dir = RunDir::create(&cfg.output.dir, &id, force)?;
    dir.write("config.echo", cfg.to_toml().as_bytes())?;
    Ok(dir)
}

#[derive(Serialize)]
struct Manifest<'a> {
    generator: &'a str,
    seed: u64,
    n_users: usize,
    n_items: usize,
    n_categories: usize,
    train: usize,
    valid: usize,
    test: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

fn write_dataset(dir: &RunDir, data: &SplitDataset, manifest: &Manifest<'_>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_instances(&mut buf, data).map_err(usage)?;
    dir.write("instances.tsv", &buf)?;
    dir.write("manifest.json", serde_json::to_string_pretty(manifest).expect("manifest").as_bytes())?;
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    if cfg.dataset.path.is_some() {
        return Err(usage("synth needs a synthetic dataset section, not a path"));
    }
    let eff = cfg.effective();
    let syn = eff.dataset.synthetic.as_ref().expect("effective config has a source");
    let data = cfg.load_dataset()?;
    let dir = run_dir(cfg, format!("synth-s{}", cfg.dataset.seed), force)?;
    // identity vocabulary: synthetic ids are already dense
    let ids = |n: usize| (0..n).map(|i| (i as u64, i)).collect();
    let vocab = Vocab { users: ids(data.n_users), items: ids(data.n_items), categories: ids(data.n_categories) };
    dir.write("vocab.json", serde_json::to_string(&vocab).expect("vocab").as_bytes())?;
    let manifest = Manifest {
        generator: "synthetic",
        seed: cfg.dataset.seed,
        n_users: data.n_users,
        n_items: data.n_items,
        n_categories: data.n_categories,
        train: data.train.len(),
        valid: data.valid.len(),
        test: data.test.len(),
        source: None,
    };
    write_dataset(&dir, &data, &manifest)?;
    let clicked = data.train.iter().chain(&data.test).filter(|i| i.label == 1).count();
    println!(
        "wrote {} instances ({} clicked, {} groups) to {}",
        data.len(),
        clicked,
        syn.n_groups,
        dir.path().display()
    );
    Ok(())
}

fn cmd_prepare(cfg: &RunConfig, input: &PathBuf, force: bool) -> Result<(), CliError> {
    let log = load_interactions(input).map_err(usage)?;
    if log.duplicates > 0 {
        log::warn!("{}: dropped {} duplicate rows", input.display(), log.duplicates);
    }
    let data = build_split(&log, cfg.model.max_seq_len, cfg.dataset.seed);
    if data.is_empty() {
        log::warn!("no user has three or more clicks; the dataset is empty");
    }
    let dir = run_dir(cfg, format!("prepare-s{}", cfg.dataset.seed), force)?;
    dir.write("vocab.json", serde_json::to_string(&log.vocab).expect("vocab").as_bytes())?;
    let manifest = Manifest {
        generator: "split",
        seed: cfg.dataset.seed,
        n_users: data.n_users,
        n_items: data.n_items,
        n_categories: data.n_categories,
        train: data.train.len(),
        valid: data.valid.len(),
        test: data.test.len(),
        source: Some(input.display().to_string()),
    };
    write_dataset(&dir, &data, &manifest)?;
    println!(
        "{} records -> {} train / {} valid / {} test instances in {}",
        log.records.len(),
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        dir.path().display()
    );
    Ok(())
}

/// Rows describing the final state of a training run.
fn final_rows(label: &str, seed: u64, out: &crate::metawrapper::TrainOutput) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    if let Some(m) = out.metrics.last() {
        let mut push = |split: &str, metric: &str, value: Option<f64>| {
            if let Some(value) = value {
                rows.push(SummaryRow::new(label, seed, split, metric, value));
            }
        };
        push("train", "loss", Some(m.train_loss));
        push("oob", "loss", Some(m.oob_loss));
        push("test", "loss", Some(m.test_loss));
        push("test", "gap", Some(m.test_loss - m.train_loss));
        push("test", "auc", m.test_auc);
        push("valid", "auc", m.valid_auc);
    }
    rows
}

/// Train once, streaming metrics into `dir/metrics.jsonl` and leaving a
/// checkpoint beside them.
fn train_into(
    dir: &RunDir,
    data: &SplitDataset,
    dims: ModelDims,
    tc: &TrainConfig,
) -> Result<crate::metawrapper::TrainOutput, CliError> {
    let mut lines = Vec::new();
    let out = train(data, dims, tc, |m| {
        lines.extend_from_slice(serde_json::to_string(m).expect("metrics").as_bytes());
        lines.push(b'\n');
    })?;
    dir.write("metrics.jsonl", &lines)?;
    save_checkpoint(dir.path().join("checkpoint.bin"), &Checkpoint { seed: tc.seed, params: out.params.clone() })
        .map_err(usage)?;
    Ok(out)
}

fn cmd_train(cfg: &RunConfig, grid: bool, force: bool) -> Result<(), CliError> {
    let data = cfg.load_dataset()?;
    let dims = cfg.dims(&data);
    let seed = cfg.train.seed;
    let points = if grid { cfg.grid_points()? } else { vec![cfg.train_config()] };
    let dir = if grid {
        run_dir(cfg, format!("grid-{}-s{seed}", cfg.train.method.name()), force)?
    } else {
        run_dir(cfg, format!("{}-s{seed}", cfg.train.method.name()), force)?
    };
    let mut rows = Vec::new();
    for tc in &points {
        let label = method_label(tc);
        let sub = if grid { dir.subdir(&output::slug(&label))? } else { dir.clone() };
        let out = train_into(&sub, &data, dims, tc)?;
        let last = out.metrics.last();
        println!(
            "{label} seed={seed}: test auc {} test loss {}",
            last.and_then(|m| m.test_auc).map_or("n/a".into(), |v| format!("{v:.4}")),
            last.map_or("n/a".into(), |m| format!("{:.4}", m.test_loss)),
        );
        rows.extend(final_rows(&label, seed, &out));
    }
    output::write_summary(&dir, cfg, &rows)?;
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &PathBuf, force: bool) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint).map_err(usage)?;
    let data = cfg.load_dataset()?;
    let dims = ckpt.params.dims;
    if dims.n_items < data.n_items || dims.n_categories < data.n_categories {
        return Err(usage(format!(
            "checkpoint covers {} items / {} categories, dataset needs {} / {}",
            dims.n_items, dims.n_categories, data.n_items, data.n_categories
        )));
    }
    let tc = cfg.train_config();
    let trainer = Trainer::from_params(ckpt.params, tc.clone())?;
    let label = method_label(&tc);
    let mut rows = Vec::new();
    for (split, set) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        if set.is_empty() {
            continue;
        }
        let (loss, auc) = trainer.evaluate(set)?;
        println!("{split}: loss {loss:.4} auc {}", auc.map_or("n/a".into(), |a| format!("{a:.4}")));
        rows.push(SummaryRow::new(&label, ckpt.seed, split, "loss", loss));
        if let Some(a) = auc {
            rows.push(SummaryRow::new(&label, ckpt.seed, split, "auc", a));
        }
    }
    if !data.train.is_empty() && !data.test.is_empty() {
        let r = overfit_report(&trainer.params, tc.variant(), &data.train, &data.test).map_err(usage)?;
        println!("train-test gap {:.4}", r.gap);
        rows.push(SummaryRow::new(&label, ckpt.seed, "test", "gap", r.gap));
    }
    let dir = run_dir(cfg, format!("eval-{}-s{}", tc.method.name(), ckpt.seed), force)?;
    output::write_summary(&dir, cfg, &rows)?;
    Ok(())
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn cmd_ablate(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let seeds = cfg.ablate.seeds.clone();
    if seeds.is_empty() {
        return Err(usage("ablate.seeds is empty"));
    }
    if seeds.len() == 1 {
        log::warn!("a single seed gives no estimate of seed-to-seed variance");
        eprintln!("warning: one seed only; differences between variants may be noise");
    }
    let methods = cfg.ablate.methods();
    let dir = run_dir(cfg, format!("ablate-s{}", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join("-")), force)?;
    let mut rows = Vec::new();
    let mut aucs: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
    for &seed in &seeds {
        let mut seeded = cfg.clone();
        seeded.dataset.seed = seed;
        seeded.train.seed = seed;
        let data = seeded.load_dataset()?;
        let dims = seeded.dims(&data);
        for (mi, &method) in methods.iter().enumerate() {
            let tc = TrainConfig { method, ..seeded.train_config() };
            let label = method_label(&tc);
            let sub = dir.subdir(&format!("{}-s{seed}", method.name()))?;
            let out = train_into(&sub, &data, dims, &tc)?;
            let auc = out.metrics.last().and_then(|m| m.test_auc).unwrap_or(f64::NAN);
            println!("{} seed {seed}: test auc {auc:.4}", method.short());
            aucs[mi].push(auc);
            rows.extend(final_rows(&label, seed, &out));
        }
    }
    println!("{:<6} {:>10} {:>10}", "method", "mean auc", "std");
    for (m, a) in methods.iter().zip(&aucs) {
        let (mean, std) = mean_std(a);
        println!("{:<6} {mean:>10.4} {std:>10.4}", m.short());
        rows.push(SummaryRow::new(&method_label(&TrainConfig { method: *m, ..cfg.train_config() }), "mean", "test", "auc", mean));
    }
    let mean_of = |m: Method| methods.iter().position(|&x| x == m).map(|i| mean_std(&aucs[i]).0);
    if let (Some(m4), Some(m2), Some(m3)) =
        (mean_of(Method::MetaWrapper), mean_of(Method::OuterTerm), mean_of(Method::Gdmax))
    {
        println!("ordering M4 >= M2 >= M3: {}", if m4 >= m2 && m2 >= m3 { "holds" } else { "violated" });
    }
    output::write_summary(&dir, cfg, &rows)?;
    Ok(())
}

/// Two-instance batches with two behaviors each over a six-item vocabulary.
pub fn gradcheck_batches(dims: &ModelDims) -> Result<(Batch, Batch), CliError> {
    use crate::data::ItemRef;
    let r = |item: usize| ItemRef { item, category: item % dims.n_categories };
    let inst = |t: usize, h: [usize; 2], label| Instance { user_id: 0, target: r(t), history: h.map(r).to_vec(), label };
    let inner = [inst(0, [1, 2], 1), inst(3, [4, 5], 0)];
    let outer = [inst(2, [0, 3], 0), inst(5, [1, 4], 1)];
    let b = |x: &[Instance]| Batch::new(x, dims).map_err(usage);
    Ok((b(&inner)?, b(&outer)?))
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckLine {
    pub case: String,
    pub block: String,
    pub error: f64,
    pub tolerance: f64,
}

/// Model blocks against finite differences for N = 1..3, then stub
/// problems against their closed forms.
pub fn gradcheck_report(cfg: &RunConfig, corrupt: bool) -> Result<Vec<GradcheckLine>, CliError> {
    let dims = ModelDims { n_items: 6, n_categories: 2, k: 2, hidden: cfg.model.hidden };
    let params = oracle::gradcheck_params(dims, cfg.train.seed);
    let (inner, outer) = gradcheck_batches(&dims)?;
    let n_theta = params.theta.len();
    let mut lines = Vec::new();
    for n in 1..=3 {
        let jc = crate::metawrapper::JointConfig { mu: 0.6, beta: 0.5, n_inner: n };
        let mut check = oracle::model_gradcheck(&params, &inner, &outer, Variant::Selector(cfg.model.pooling), &jc, FD_EPS)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        if corrupt {
            check.analytic[1] = check.analytic[1].map(|v| v * 1.01 + 1e-6);
        }
        for (i, e) in check.block_errors().into_iter().enumerate() {
            let block = if i < n_theta { format!("theta[{i}]") } else { format!("phi[{}]", i - n_theta) };
            lines.push(GradcheckLine { case: format!("model n={n}"), block, error: e, tolerance: 1e-4 });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    for s in 0..4 {
        let stub = StubProblem::random(4, 3, s % 2 == 0, &mut rng);
        for n in 0..=3 {
            let (mu, beta) = (0.7, 0.15);
            let mut g = crate::autodiff::Graph::new();
            let t = g.input(oracle::to_tensor(&stub.theta0));
            let p = g.input(oracle::to_tensor(&stub.phi));
            let (io, oo) = (stub.inner_objective(), stub.outer_objective());
            let task = crate::metawrapper::Task { inner: &io, outer: &oo };
            let (_, gr) = crate::metawrapper::meta_gradient(&mut g, &[t], &[p], task, &crate::metawrapper::JointConfig { mu, beta, n_inner: n })
                .map_err(|e| CliError::Numerical(e.to_string()))?;
            let got = gr.tensors(&g);
            let (dt, dp) = stub.joint_gradient(mu, beta, n);
            for (block, a, b) in [("theta", &got[0], dt), ("phi", &got[1], dp)] {
                let e = oracle::rel_error(a, &oracle::to_tensor(&b));
                lines.push(GradcheckLine { case: format!("stub{s} n={n}"), block: block.into(), error: e, tolerance: 1e-8 });
            }
        }
    }
    Ok(lines)
}

fn cmd_gradcheck(cfg: &RunConfig, corrupt: bool, force: bool) -> Result<(), CliError> {
    let lines = gradcheck_report(cfg, corrupt)?;
    println!("{:<14} {:<10} {:>12} {:>10}  result", "case", "block", "rel error", "tolerance");
    let mut failures = 0;
    for l in &lines {
        let ok = l.error < l.tolerance;
        failures += usize::from(!ok);
        println!("{:<14} {:<10} {:>12.3e} {:>10.0e}  {}", l.case, l.block, l.error, l.tolerance, if ok { "ok" } else { "FAIL" });
    }
    let dir = run_dir(cfg, format!("gradcheck-s{}", cfg.train.seed), force)?;
    let rows: Vec<SummaryRow> = lines
        .iter()
        .map(|l| SummaryRow::new("gradcheck", cfg.train.seed, &l.case, &format!("rel_error.{}", l.block), l.error))
        .collect();
    output::write_summary(&dir, cfg, &rows)?;
    if failures > 0 {
        return Err(CliError::Tolerance(format!("{failures} of {} blocks exceed tolerance", lines.len())));
    }
    println!("all {} blocks within tolerance", lines.len());
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let data = cfg.load_dataset()?;
    let dims = cfg.dims(&data);
    let report = bench(&data, dims, &cfg.train_config(), cfg.bench.warmup, cfg.bench.steps)?;
    println!("{:<12} {:>10} {:>10} {:>10}", "phase", "mean ms", "p50 ms", "p95 ms");
    for (name, s) in [
        ("train M1", &report.train_m1),
        ("train M4", &report.train_m4),
        ("infer M1", &report.infer_m1),
        ("infer M4", &report.infer_m4),
    ] {
        println!("{name:<12} {:>10.3} {:>10.3} {:>10.3}", s.mean_ms, s.p50_ms, s.p95_ms);
    }
    println!("train ratio M4/M1 {:.3}", report.train_ratio);
    println!("infer ratio M4/M1 {:.3}", report.infer_ratio);
    let dir = run_dir(cfg, format!("bench-s{}", cfg.train.seed), force)?;
    if cfg.output.formats.contains(&ReportFormat::Json) {
        dir.write("bench.json", serde_json::to_string_pretty(&report).expect("report").as_bytes())?;
    }
    let rows = vec![
        SummaryRow::new("bench", cfg.train.seed, "train", "ratio", report.train_ratio),
        SummaryRow::new("bench", cfg.train.seed, "infer", "ratio", report.infer_ratio),
    ];
    output::write_summary(&dir, cfg, &rows)?;
    Ok(())
}
