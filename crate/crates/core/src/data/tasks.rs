use rand::seq::SliceRandom;
use rand::Rng;

use super::DataError;

/// One meta-learning task: indices into the training set for the inner and
/// the outer mini-batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskBatch {
    pub d_in: Vec<usize>,
    pub d_out: Vec<usize>,
}

/// Sizes of the in-bag and out-of-bag partitions of `n` instances.
pub fn partition_sizes(n: usize, in_ratio: f64) -> Result<(usize, usize), DataError> {
    if !(in_ratio > 0.0 && in_ratio < 1.0) {
        return Err(DataError::Config(format!("in_ratio must lie in (0, 1), got {in_ratio}")));
    }
    if n < 2 {
        return Err(DataError::Config(format!("need at least 2 training instances, got {n}")));
    }
    let n_in = ((n as f64 * in_ratio).round() as usize).clamp(1, n - 1);
    Ok((n_in, n - n_in))
}

/// One epoch of tasks. The training indices are reshuffled and split into
/// disjoint in-bag and out-of-bag partitions; the in-bag part is cut into
/// batches of `batch_size` (the last one may be short) and the out-of-bag
/// part is spread evenly over the same number of steps, reusing instances
/// cyclically when it has fewer than one per step.
pub fn make_tasks(
    n_train: usize,
    in_ratio: f64,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TaskBatch>, DataError> {
    if batch_size == 0 {
        return Err(DataError::Config("batch_size must be positive".into()));
    }
    let (n_in, n_out) = partition_sizes(n_train, in_ratio)?;
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(rng);
    let (inner, outer) = order.split_at(n_in);

    let steps = n_in.div_ceil(batch_size);
    let tasks = (0..steps)
        .map(|s| {
            let d_in = inner[s * batch_size..((s + 1) * batch_size).min(n_in)].to_vec();
            let d_out = if n_out >= steps {
                outer[s * n_out / steps..(s + 1) * n_out / steps].to_vec()
            } else {
                vec![outer[s % n_out]]
            };
            TaskBatch { d_in, d_out }
        })
        .collect();
    Ok(tasks)
}
