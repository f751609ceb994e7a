//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance` runs every criterion; trailing
//! numbers (`-- 1 4 7`) select a subset. The process exits non-zero on a
//! failed criterion only when `ACCEPTANCE_STRICT=1` is set, so the full
//! report is always printed.

use std::collections::{BTreeMap, HashMap};
use std::process::Command;
use std::time::Instant;

use meta_wrapper::autodiff::{Graph, NodeId, Tensor};
use meta_wrapper::cli::{gradcheck_batches, gradcheck_report, mean_std};
use meta_wrapper::config::RunConfig;
use meta_wrapper::data::{make_tasks, SplitDataset};
use meta_wrapper::eval::{auc, bench, impr};
use meta_wrapper::metawrapper::{
    ablation_terms, train, BatchObjective, EpochMetrics, JointConfig, LrSpec, Method, Task, TrainConfig, Trainer,
};
use meta_wrapper::model::{ModelDims, Variant};
use meta_wrapper::oracle::{self, brute_auc, RandomProgram, StubProblem, FD_HVP_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("    {}", msg.as_ref());
}

/// Default run configuration with data and training driven by one seed.
fn seeded(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.seed = seed;
    cfg.train.seed = seed;
    cfg
}

/// Synthetic datasets by seed, generated once.
#[derive(Default)]
struct Data {
    sets: BTreeMap<u64, SplitDataset>,
}

impl Data {
    fn get(&mut self, seed: u64) -> &SplitDataset {
        self.sets.entry(seed).or_insert_with(|| seeded(seed).load_dataset().expect("synthetic data"))
    }

    /// Train `method` with the default configuration for `seed`, after
    /// `adjust`. Returns the metrics and the wall-clock seconds.
    fn run(&mut self, seed: u64, method: Method, adjust: impl FnOnce(&mut TrainConfig)) -> (Vec<EpochMetrics>, f64) {
        let cfg = seeded(seed);
        let mut tc = TrainConfig { method, ..cfg.train_config() };
        adjust(&mut tc);
        let data = self.get(seed);
        let start = Instant::now();
        let out = train(data, cfg.dims(data), &tc, |_| {}).expect("training run");
        let secs = start.elapsed().as_secs_f64();
        let last = out.metrics.last().unwrap();
        progress(format!(
            "{} seed {seed}: train {:.4} test {:.4} auc {:.4} ({secs:.0} s)",
            method.short(),
            last.train_loss,
            last.test_loss,
            last.test_auc.unwrap_or(f64::NAN)
        ));
        (out.metrics, secs)
    }
}

fn c1_hypergradient() -> Outcome {
    let start = Instant::now();
    let lines = gradcheck_report(&RunConfig::default(), false).expect("gradcheck");
    let secs = start.elapsed().as_secs_f64();
    let worst = |prefix: &str| {
        lines.iter().filter(|l| l.case.starts_with(prefix)).map(|l| l.error).fold(0.0, f64::max)
    };
    let (model, stub) = (worst("model"), worst("stub"));
    let failed = lines.iter().filter(|l| !(l.error < l.tolerance)).count();
    outcome(
        failed == 0 && secs < 10.0,
        format!("{} blocks, model max rel err {model:.2e} (< 1e-4), stub max {stub:.2e} (< 1e-8), {secs:.1} s (< 10 s)", lines.len()),
    )
}

fn c2_hvp() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = RandomProgram::random(&mut rng);
        let v: Vec<Tensor> = p
            .inputs
            .iter()
            .map(|t| Tensor::new(t.shape().to_vec(), (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let (a, n) = p.hvp_check(&v, FD_HVP_EPS).expect("hvp check");
        worst = worst.max(oracle::max_rel_error(&a, &n));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-5 && secs < 10.0, format!("100 graphs, max rel err {worst:.2e} (< 1e-5), {secs:.1} s (< 10 s)"))
}

fn c3_auc() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for set in 0..1000 {
        let n = rng.gen_range(2..=50);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let ties = set % 2 == 0;
        let scores: Vec<f64> =
            (0..n).map(|_| if ties { f64::from(rng.gen_range(0..5u8)) / 4.0 } else { rng.gen::<f64>() }).collect();
        worst = worst.max((auc(&scores, &labels).unwrap() - brute_auc(&scores, &labels).unwrap()).abs());
    }
    let a = impr(0.8201, 0.7524).unwrap();
    let b = impr(0.9010, 0.8298).unwrap();
    let anchors = format!("{a:.2}") == "26.82" && format!("{b:.2}") == "21.59";
    outcome(
        worst < 1e-12 && anchors,
        format!("1000 sets, max |rank - brute| {worst:.1e} (< 1e-12); impr anchors {a:.2}% and {b:.2}% (26.82%, 21.59%)"),
    )
}

fn c4_taylor() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut stub_worst = 0.0f64;
    for _ in 0..5 {
        let stub = StubProblem::random(4, 3, false, &mut rng);
        for n in 1..=3 {
            let mut g = Graph::new();
            let t = g.input(oracle::to_tensor(&stub.theta0));
            let p = g.input(oracle::to_tensor(&stub.phi));
            let (io, oo) = (stub.inner_objective(), stub.outer_objective());
            let cfg = JointConfig { mu: 1.0, beta: 0.1, n_inner: n };
            let terms = ablation_terms(&mut g, &[t], &[p], Task { inner: &io, outer: &oo }, &cfg).unwrap();
            stub_worst = stub_worst.max(terms.residual().abs());
        }
    }

    let cfg = RunConfig::default();
    let dims = ModelDims { n_items: 6, n_categories: 2, k: 2, hidden: cfg.model.hidden };
    let params = oracle::gradcheck_params(dims, 4);
    let (inner, outer) = gradcheck_batches(&dims).unwrap();
    let variant = Variant::Selector(cfg.model.pooling);
    let betas = [0.1, 0.05, 0.025];
    let residuals: Vec<f64> = betas
        .iter()
        .map(|&beta| {
            let mut g = Graph::new();
            let theta: Vec<NodeId> = params.theta.iter().map(|t| g.input(t.clone())).collect();
            let phi: Vec<NodeId> = params.phi.iter().map(|t| g.input(t.clone())).collect();
            let (io, oo) = (BatchObjective { batch: &inner, variant }, BatchObjective { batch: &outer, variant });
            let cfg = JointConfig { mu: 1.0, beta, n_inner: 1 };
            ablation_terms(&mut g, &theta, &phi, Task { inner: &io, outer: &oo }, &cfg).unwrap().residual().abs()
        })
        .collect();
    // least-squares slope of log residual against log beta
    let xs: Vec<f64> = betas.iter().map(|b| b.ln()).collect();
    let ys: Vec<f64> = residuals.iter().map(|r| r.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        stub_worst <= 1e-12 && (slope - 2.0).abs() <= 0.3 && secs < 60.0,
        format!(
            "stub residual {stub_worst:.1e} (<= 1e-12); model residuals {:.2e} {:.2e} {:.2e}, slope {slope:.3} (2 +/- 0.3), {secs:.1} s",
            residuals[0], residuals[1], residuals[2]
        ),
    )
}

fn c5_overfitting(data: &mut Data) -> Outcome {
    let seeds = 0..5u64;
    let (mut test, mut gap, mut per_seed) = (HashMap::<Method, Vec<f64>>::new(), HashMap::<Method, Vec<f64>>::new(), 0.0f64);
    for seed in seeds {
        let mut secs = 0.0;
        for method in [Method::Base, Method::AttentionOnly, Method::MetaWrapper] {
            let (m, s) = data.run(seed, method, |tc| tc.epochs = 30);
            let last = m.last().unwrap();
            test.entry(method).or_default().push(last.test_loss);
            gap.entry(method).or_default().push(last.test_loss - last.train_loss);
            secs += s;
        }
        per_seed = per_seed.max(secs);
    }
    let margin = |v: &HashMap<Method, Vec<f64>>| {
        let (mw, sw) = mean_std(&v[&Method::MetaWrapper]);
        let (fs, sf) = mean_std(&v[&Method::AttentionOnly]);
        let pooled = ((sw * sw + sf * sf) / 2.0).sqrt();
        (mw, fs, pooled, fs - mw > pooled)
    };
    let (mw_t, fs_t, sd_t, ok_t) = margin(&test);
    let (mw_g, fs_g, sd_g, ok_g) = margin(&gap);
    let base_t = mean_std(&test[&Method::Base]).0;
    outcome(
        ok_t && ok_g && mw_t <= base_t && per_seed < 900.0,
        format!(
            "test loss MW {mw_t:.4} FS {fs_t:.4} (sd {sd_t:.4}) Base {base_t:.4}; gap MW {mw_g:.4} FS {fs_g:.4} (sd {sd_g:.4}); slowest seed {per_seed:.0} s (< 900 s)"
        ),
    )
}

fn c6_ablation(data: &mut Data) -> Outcome {
    let start = Instant::now();
    let mut aucs = HashMap::<Method, Vec<f64>>::new();
    for seed in 0..3u64 {
        for method in [Method::OuterTerm, Method::Gdmax, Method::MetaWrapper] {
            let (m, _) = data.run(seed, method, |_| {});
            aucs.entry(method).or_default().push(m.last().unwrap().test_auc.unwrap_or(f64::NAN));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mean = |m: Method| mean_std(&aucs[&m]).0;
    let (m2, m3, m4) = (mean(Method::OuterTerm), mean(Method::Gdmax), mean(Method::MetaWrapper));
    outcome(
        m4 > m2 && m2 > m3 && secs < 1800.0,
        format!(
            "mean test auc M4 {m4:.4} M2 {m2:.4} M3 {m3:.4} (M4 > M2 > M3; M4-M2 {:+.1e}, M2-M3 {:+.1e}), {secs:.0} s (< 1800 s)",
            m4 - m2,
            m2 - m3
        ),
    )
}

fn c7_degeneration(data: &mut Data) -> Outcome {
    let cfg = seeded(0);
    let data = data.get(0);
    let base = cfg.train_config();
    let mut fs = Trainer::new(cfg.dims(data), TrainConfig { method: Method::AttentionOnly, ..base.clone() }).unwrap();
    let mut mw = Trainer::new(cfg.dims(data), TrainConfig { method: Method::MetaWrapper, mu: 0.0, ..base.clone() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut steps = 0;
    let mut first_diff = None;
    for epoch in 0..2 {
        for task in make_tasks(data.train.len(), base.in_ratio, base.batch_size, &mut rng).unwrap() {
            let a = fs.train_step(&data.train, &task, epoch).unwrap();
            let b = mw.train_step(&data.train, &task, epoch).unwrap();
            steps += 1;
            if first_diff.is_none() && (fs.params != mw.params || a.total.to_bits() != b.total.to_bits()) {
                first_diff = Some(steps);
            }
        }
    }
    match first_diff {
        None => outcome(true, format!("{steps} steps over 2 epochs, parameters bit-identical after every step")),
        Some(s) => outcome(false, format!("trajectories diverge at step {s}")),
    }
}

fn c8_efficiency(data: &mut Data) -> Outcome {
    let cfg = seeded(0);
    let data = data.get(0);
    let r = bench(data, cfg.dims(data), &cfg.train_config(), 10, 100).unwrap();
    outcome(
        r.train_ratio <= 3.0 && (0.9..=1.1).contains(&r.infer_ratio),
        format!(
            "train step M1 {:.2} ms M4 {:.2} ms, ratio {:.3} (<= 3); inference ratio {:.3} ([0.9, 1.1]); 100 steps after 10 warmup",
            r.train_m1.mean_ms, r.train_m4.mean_ms, r.train_ratio, r.infer_ratio
        ),
    )
}

fn c9_monotonicity(data: &mut Data) -> Outcome {
    let (m, _) = data.run(0, Method::MetaWrapper, |tc| {
        tc.lr = LrSpec::Constant { gamma: 1e-3 };
        tc.epochs = 30;
    });
    let j: Vec<f64> = m.iter().map(|e| e.joint_loss).collect();
    let smooth: Vec<f64> = j.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    let transitions = smooth.len() - 1;
    let down = smooth.windows(2).filter(|w| w[1] <= w[0]).count();
    let frac = down as f64 / transitions as f64;
    outcome(
        frac >= 0.95,
        format!(
            "{down}/{transitions} smoothed transitions non-increasing ({:.1}%, >= 95%); joint loss {:.5} -> {:.5}",
            100.0 * frac,
            j[0],
            j[j.len() - 1]
        ),
    )
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |id: &str| -> Vec<String> {
        let status = Command::new(env!("CARGO_BIN_EXE_meta-wrapper"))
            .arg("--out")
            .arg(dir.path())
            .args(["--seed", "10", "--set", &format!("output.run_id={id:?}"), "train", "--epochs", "2"])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        std::fs::read_to_string(dir.path().join(id).join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("step_ms_mean");
                v.to_string()
            })
            .collect()
    };
    let (a, b) = (run("first"), run("second"));
    outcome(a == b && !a.is_empty(), format!("two meta_wrapper runs, {} metric lines, identical without timing: {}", a.len(), a == b))
}

const TITLES: [&str; 10] = [
    "hypergradient vs finite differences and closed forms",
    "Hessian-vector products vs differences of gradients",
    "AUC rank formula vs pair counting, relative improvement anchors",
    "first-order expansion residual",
    "synthetic overfitting study",
    "ablation ordering",
    "mu = 0 reproduces attention-only",
    "step-time ratios",
    "smoothed joint loss non-increasing at constant step size",
    "metrics.jsonl reproducible",
];

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut data = Data::default();
    let mut failed = Vec::new();
    for n in (1..=10).filter(|&n| wanted(n)) {
        eprintln!("criterion {n}: {}", TITLES[n - 1]);
        let start = Instant::now();
        let o = match n {
            1 => c1_hypergradient(),
            2 => c2_hvp(),
            3 => c3_auc(),
            4 => c4_taylor(),
            5 => c5_overfitting(&mut data),
            6 => c6_ablation(&mut data),
            7 => c7_degeneration(&mut data),
            8 => c8_efficiency(&mut data),
            9 => c9_monotonicity(&mut data),
            _ => c10_determinism(),
        };
        println!(
            "criterion {n:>2} {} {}: {} [{:.0} s]",
            if o.pass { "PASS" } else { "FAIL" },
            TITLES[n - 1],
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
