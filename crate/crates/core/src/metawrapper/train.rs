use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{method_loss, lr_schedule, JointConfig, LrSpec, Method, Objective, Task, WrapperError};
use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::data::{make_tasks, DataError, Instance, SplitDataset, TaskBatch};
use crate::eval::auc;
use crate::model::{batch_loss, predict_batch, Batch, ModelDims, ModelError, ParamSet, Pooling, RowMap, Variant, EMBEDDING, EMBEDDING_INIT};

/// Losses above this abort a run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub mu: f64,
    pub beta: f64,
    pub n_inner: usize,
    pub lr: LrSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub in_ratio: f64,
    /// Taken from the model section of a run config.
    #[serde(skip)]
    pub pooling: Pooling,
    /// Taken from the model section of a run config.
    #[serde(skip)]
    pub embedding_init: f64,
    pub seed: u64,
    /// L2 coefficient added to every gradient.
    pub weight_decay: f64,
    /// Instances per forward pass during evaluation.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::MetaWrapper,
            mu: 0.2,
            beta: 0.01,
            n_inner: 1,
            lr: LrSpec::default(),
            batch_size: 32,
            epochs: 30,
            in_ratio: 0.8,
            pooling: Pooling::WeightedSum,
            embedding_init: EMBEDDING_INIT,
            seed: 0,
            weight_decay: 0.0,
            eval_chunk: 512,
        }
    }
}

impl TrainConfig {
    pub fn joint(&self) -> JointConfig {
        JointConfig { mu: self.mu, beta: self.beta, n_inner: self.n_inner }
    }

    pub fn variant(&self) -> Variant {
        if self.method.uses_selector() {
            Variant::Selector(self.pooling)
        } else {
            Variant::Base
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..=1.0).contains(&self.mu) {
            return bad(format!("mu must lie in [0, 1], got {}", self.mu));
        }
        if !(self.beta > 0.0) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if self.batch_size == 0 || self.eval_chunk == 0 {
            return bad("batch_size and eval_chunk must be positive".into());
        }
        if !(self.in_ratio > 0.0 && self.in_ratio < 1.0) {
            return bad(format!("in_ratio must lie in (0, 1), got {}", self.in_ratio));
        }
        if !(self.embedding_init > 0.0 && self.embedding_init.is_finite()) {
            return bad(format!("embedding_init must be positive, got {}", self.embedding_init));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        let rates = match self.lr {
            LrSpec::Constant { gamma } => vec![gamma],
            LrSpec::Exponential { gamma0, rho } => vec![gamma0, rho],
            LrSpec::InvSqrt { gamma0 } => vec![gamma0],
        };
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return bad(format!("learning-rate parameters must be positive: {:?}", self.lr));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Wrapper(#[from] WrapperError),
    #[error("diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Wrapper(e.into())
    }
}

impl TrainError {
    /// Whether the failure is numerical rather than a usage problem.
    pub fn is_numerical(&self) -> bool {
        match self {
            TrainError::Diverged { .. } => true,
            TrainError::Wrapper(_) => true,
            TrainError::Model(ModelError::Autodiff(_)) => true,
            _ => false,
        }
    }
}

/// One epoch of a run. Losses are mean cross-entropies except
/// `joint_loss`, the mean training objective over the epoch's steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub joint_loss: f64,
    pub train_loss: f64,
    pub oob_loss: f64,
    pub test_loss: f64,
    pub valid_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub step_ms_mean: f64,
}

impl EpochMetrics {
    /// JSON object without the wall-clock field.
    pub fn without_timing(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("metrics serialize");
        v.as_object_mut().unwrap().remove("step_ms_mean");
        v
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ParamSet,
    pub metrics: Vec<EpochMetrics>,
}

/// Mean cross-entropy of a batch under the given parameters.
pub struct BatchObjective<'a> {
    pub batch: &'a Batch,
    pub variant: Variant,
}

impl Objective for BatchObjective<'_> {
    fn loss(&self, g: &mut Graph, theta: &[NodeId], phi: &[NodeId]) -> Result<NodeId, AutodiffError> {
        batch_loss(g, theta, phi, self.batch, self.variant)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub inner: f64,
    pub outer: Option<f64>,
}

/// Parameters plus the step counter that drives the schedule.
pub struct Trainer {
    pub params: ParamSet,
    pub cfg: TrainConfig,
    /// Steps taken so far.
    pub step: usize,
}

impl Trainer {
    pub fn new(dims: ModelDims, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Self { params: ParamSet::init_with(dims, cfg.seed, cfg.embedding_init), cfg, step: 0 })
    }

    /// Resume from existing parameters, with the step counter at zero.
    pub fn from_params(params: ParamSet, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Self { params, cfg, step: 0 })
    }

    /// One joint update of `(theta, phi)` on a task.
    pub fn train_step(&mut self, train: &[Instance], task: &TaskBatch, epoch: usize) -> Result<StepLoss, TrainError> {
        let cfg = &self.cfg;
        let dims = self.params.dims;
        let variant = cfg.variant();
        let b_in = Batch::new(task.d_in.iter().map(|&i| &train[i]), &dims)?;
        let b_out = if cfg.method.uses_outer() && cfg.mu != 0.0 {
            Some(Batch::new(task.d_out.iter().map(|&i| &train[i]), &dims)?)
        } else {
            None
        };
        let map = match &b_out {
            Some(b) => RowMap::covering(&[&b_in, b]),
            None => RowMap::covering(&[&b_in]),
        };
        let b_in = b_in.remap(&map);
        let b_out = b_out.map(|b| b.remap(&map));

        let mut g = Graph::new();
        let mut theta = vec![g.input(map.gather(&self.params.theta[EMBEDDING]))];
        theta.extend(self.params.theta[EMBEDDING + 1..].iter().map(|t| g.input(t.clone())));
        let phi: Vec<NodeId> = if cfg.method.uses_selector() {
            self.params.phi.iter().map(|t| g.input(t.clone())).collect()
        } else {
            Vec::new()
        };
        let inner = BatchObjective { batch: &b_in, variant };
        let outer = BatchObjective { batch: b_out.as_ref().unwrap_or(&b_in), variant };
        let loss = method_loss(&mut g, cfg.method, &theta, &phi, Task { inner: &inner, outer: &outer }, &cfg.joint())?;

        let step = self.step + 1;
        let total = g.scalar(loss.total);
        if !total.is_finite() || total > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged { epoch, step, loss: total });
        }
        let wrt: Vec<NodeId> = theta.iter().chain(&phi).copied().collect();
        let grads = g.gradient(loss.total, &wrt, false)?;

        let gamma = lr_schedule(step, epoch, &cfg.lr);
        let wd = cfg.weight_decay;
        let mut grad_iter = grads.entries().iter().map(|e| g.value(e.grad));
        let local_table = g.value(theta[EMBEDDING]);
        let update = |param: &Tensor, grad: &Tensor| -> Tensor {
            let mut d = grad.clone();
            if wd != 0.0 {
                d.axpy(wd, param);
            }
            d
        };
        let emb_step = update(local_table, grad_iter.next().unwrap());
        map.scatter_axpy(&mut self.params.theta[EMBEDDING], -gamma, &emb_step);
        let rest: Vec<&mut Tensor> =
            self.params.theta[EMBEDDING + 1..].iter_mut().chain(self.params.phi.iter_mut().take(phi.len())).collect();
        for (param, grad) in rest.into_iter().zip(grad_iter) {
            let d = update(&*param, grad);
            param.axpy(-gamma, &d);
        }
        if !self.params.is_finite() {
            return Err(TrainError::Diverged { epoch, step, loss: f64::NAN });
        }
        self.step = step;
        Ok(StepLoss { total, inner: g.scalar(loss.inner), outer: loss.outer.map(|o| g.scalar(o)) })
    }

    pub fn predict(&self, instances: &[Instance]) -> Result<Vec<f64>, TrainError> {
        Ok(predict_batch(&self.params, instances, self.cfg.variant(), self.cfg.eval_chunk)?)
    }

    /// Mean cross-entropy and AUC (when both classes are present).
    pub fn evaluate(&self, instances: &[Instance]) -> Result<(f64, Option<f64>), TrainError> {
        if instances.is_empty() {
            return Ok((f64::NAN, None));
        }
        let p = self.predict(instances)?;
        let labels: Vec<u8> = instances.iter().map(|i| i.label).collect();
        let loss = p.iter().zip(&labels).map(|(&p, &y)| crate::model::cross_entropy(f64::from(y), p)).sum::<f64>()
            / p.len() as f64;
        Ok((loss, auc(&p, &labels).ok()))
    }
}

/// Mini-batch training of `(theta, phi)` on the joint objective. Each epoch
/// redraws the in-bag/out-of-bag partition of the training set; `on_epoch`
/// sees every epoch's metrics as they are produced.
pub fn train(
    data: &SplitDataset,
    dims: ModelDims,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutput, TrainError> {
    let mut trainer = Trainer::new(dims, cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let tasks = make_tasks(data.train.len(), cfg.in_ratio, cfg.batch_size, &mut rng)?;
        let mut joint = 0.0;
        let mut elapsed = 0.0;
        for task in &tasks {
            let start = Instant::now();
            let loss = trainer.train_step(&data.train, task, epoch)?;
            elapsed += start.elapsed().as_secs_f64() * 1e3;
            joint += loss.total;
            log::debug!("epoch {epoch} step {} loss {:.6}", trainer.step, loss.total);
        }
        // the out-of-bag rows are a subset of the training rows
        let p_train = trainer.predict(&data.train)?;
        let ce = |i: usize| crate::model::cross_entropy(f64::from(data.train[i].label), p_train[i]);
        let train_loss = (0..data.train.len()).map(ce).sum::<f64>() / data.train.len() as f64;
        let n_oob: usize = tasks.iter().map(|t| t.d_out.len()).sum();
        let oob_loss = tasks.iter().flat_map(|t| t.d_out.iter().map(|&i| ce(i))).sum::<f64>() / n_oob as f64;
        let (test_loss, test_auc) = trainer.evaluate(&data.test)?;
        let (_, valid_auc) = trainer.evaluate(&data.valid)?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            joint_loss: joint / tasks.len() as f64,
            train_loss,
            oob_loss,
            test_loss,
            valid_auc,
            test_auc,
            step_ms_mean: elapsed / tasks.len() as f64,
        };
        log::info!(
            "{} epoch {}: joint {:.4} train {:.4} test {:.4} auc {:?}",
            cfg.method.name(),
            m.epoch,
            m.joint_loss,
            m.train_loss,
            m.test_loss,
            m.test_auc
        );
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutput { params: trainer.params, metrics })
}
