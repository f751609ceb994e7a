use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_tasks, Instance, SplitDataset, TaskBatch};
use crate::metawrapper::{Method, TrainConfig, TrainError, Trainer};
use crate::model::ModelDims;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub n: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl TimingStats {
    pub fn from_samples(ms: &[f64]) -> Self {
        let mut s = ms.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| s[((s.len() - 1) as f64 * p).round() as usize];
        Self { n: s.len(), mean_ms: s.iter().sum::<f64>() / s.len() as f64, p50_ms: q(0.5), p95_ms: q(0.95) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub train_m1: TimingStats,
    pub train_m4: TimingStats,
    pub infer_m1: TimingStats,
    pub infer_m4: TimingStats,
    /// Mean M4 train step over mean M1 train step.
    pub train_ratio: f64,
    pub infer_ratio: f64,
}

/// Per-step wall clock of attention-only training against the full wrapper
/// on identical task batches. The two methods run back to back on each task,
/// swapping order every step; the first `warmup` steps are discarded.
pub fn bench(
    data: &SplitDataset,
    dims: ModelDims,
    cfg: &TrainConfig,
    warmup: usize,
    steps: usize,
) -> Result<BenchReport, TrainError> {
    let mut m1 = Trainer::new(dims, TrainConfig { method: Method::AttentionOnly, ..cfg.clone() })?;
    let mut m4 = Trainer::new(dims, TrainConfig { method: Method::MetaWrapper, ..cfg.clone() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tasks: Vec<TaskBatch> = Vec::new();
    while tasks.len() < warmup + steps {
        tasks.extend(make_tasks(data.train.len(), cfg.in_ratio, cfg.batch_size, &mut rng)?);
    }

    fn time(f: impl FnOnce() -> Result<(), TrainError>) -> Result<f64, TrainError> {
        let start = Instant::now();
        f()?;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    }
    let (mut t1, mut t4, mut i1, mut i4) = (vec![], vec![], vec![], vec![]);
    for (k, task) in tasks.iter().take(warmup + steps).enumerate() {
        let probe: Vec<Instance> = task.d_in.iter().map(|&i| data.train[i].clone()).collect();
        let (a, b, p1, p4);
        if k % 2 == 0 {
            a = time(|| m1.train_step(&data.train, task, 0).map(drop))?;
            b = time(|| m4.train_step(&data.train, task, 0).map(drop))?;
            p1 = time(|| m1.predict(&probe).map(drop))?;
            p4 = time(|| m4.predict(&probe).map(drop))?;
        } else {
            b = time(|| m4.train_step(&data.train, task, 0).map(drop))?;
            a = time(|| m1.train_step(&data.train, task, 0).map(drop))?;
            p4 = time(|| m4.predict(&probe).map(drop))?;
            p1 = time(|| m1.predict(&probe).map(drop))?;
        }
        if k >= warmup {
            t1.push(a);
            t4.push(b);
            i1.push(p1);
            i4.push(p4);
        }
    }
    let report = |t1: &[f64], t4: &[f64], i1: &[f64], i4: &[f64]| {
        let (train_m1, train_m4) = (TimingStats::from_samples(t1), TimingStats::from_samples(t4));
        let (infer_m1, infer_m4) = (TimingStats::from_samples(i1), TimingStats::from_samples(i4));
        BenchReport {
            train_ratio: train_m4.mean_ms / train_m1.mean_ms,
            infer_ratio: infer_m4.mean_ms / infer_m1.mean_ms,
            train_m1,
            train_m4,
            infer_m1,
            infer_m4,
        }
    };
    Ok(report(&t1, &t4, &i1, &i4))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats() {
        let s = TimingStats::from_samples(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(s.n, 5);
        assert_eq!(s.mean_ms, 3.0);
        assert_eq!(s.p50_ms, 3.0);
        assert_eq!(s.p95_ms, 5.0);
    }
}
