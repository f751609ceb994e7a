//! The differentiable wrapping operator and the bilevel training objective.
//!
//! `inner_update` unrolls `N` gradient steps of the inner loss on `theta`
//! while keeping every step differentiable. The outer loss evaluated at the
//! unrolled parameters then carries gradient back to both `theta` and `phi`,
//! which is what `meta_gradient` returns. Hessian-vector products appear
//! implicitly as the reverse pass walks back through the recorded inner
//! gradients.

mod schedule;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, GradMap, Graph, NodeId};

pub use schedule::{lr_schedule, LrSpec};
pub use train::{
    train, BatchObjective, EpochMetrics, StepLoss, TrainConfig, TrainError, TrainOutput, Trainer, DIVERGENCE_LIMIT,
};

#[derive(Debug, Error)]
pub enum WrapperError {
    #[error("inner step {step}: {source}")]
    Unroll { step: usize, source: AutodiffError },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// A scalar loss of `(theta, phi)` that can be rebuilt at any parameter
/// nodes.
pub trait Objective {
    fn loss(&self, graph: &mut Graph, theta: &[NodeId], phi: &[NodeId]) -> Result<NodeId, AutodiffError>;
}

/// Inner and outer objectives of one task.
#[derive(Clone, Copy)]
pub struct Task<'a> {
    pub inner: &'a dyn Objective,
    pub outer: &'a dyn Objective,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub mu: f64,
    pub beta: f64,
    pub n_inner: usize,
}

/// Parameter states `theta^(0..=N)` of an unrolled inner loop.
#[derive(Clone, Debug)]
pub struct InnerTrace {
    pub theta_nodes: Vec<Vec<NodeId>>,
    pub beta: f64,
    /// Inner loss at each of `theta^(0..N)`.
    pub losses: Vec<NodeId>,
}

impl InnerTrace {
    pub fn last(&self) -> &[NodeId] {
        self.theta_nodes.last().expect("trace holds theta^(0)")
    }
}

fn unroll(
    g: &mut Graph,
    inner: &dyn Objective,
    theta: &[NodeId],
    phi: &[NodeId],
    beta: f64,
    n: usize,
    create_graph: bool,
    first_loss: Option<NodeId>,
) -> Result<InnerTrace, WrapperError> {
    let mut states = vec![theta.to_vec()];
    let mut losses = Vec::with_capacity(n);
    for step in 0..n {
        let at = |e: AutodiffError| WrapperError::Unroll { step, source: e };
        let current = states.last().unwrap().clone();
        let loss = match (step, first_loss) {
            (0, Some(l)) => l,
            _ => inner.loss(g, &current, phi).map_err(at)?,
        };
        let grads = g.gradient(loss, &current, create_graph).map_err(at)?;
        let mut next = Vec::with_capacity(current.len());
        for (&t, gr) in current.iter().zip(grads.grads()) {
            let s = g.scale(gr, beta).map_err(at)?;
            next.push(g.sub(t, s).map_err(at)?);
        }
        losses.push(loss);
        states.push(next);
    }
    Ok(InnerTrace { theta_nodes: states, beta, losses })
}

/// `theta^(j) = theta^(j-1) - beta * grad L_in(theta^(j-1), phi)` for
/// `j = 1..=n`, with `phi` fixed. Every state stays differentiable with
/// respect to `theta` and `phi`; the caller's nodes are untouched.
pub fn inner_update(
    g: &mut Graph,
    inner: &dyn Objective,
    theta: &[NodeId],
    phi: &[NodeId],
    beta: f64,
    n: usize,
) -> Result<InnerTrace, WrapperError> {
    unroll(g, inner, theta, phi, beta, n, true, None)
}

/// Loss nodes of one training step.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: NodeId,
    pub inner: NodeId,
    /// Outer loss as it enters `total`; absent when it does not.
    pub outer: Option<NodeId>,
}

/// `L_in(theta, phi) + mu * L_out(theta^(N)(theta, phi), phi)`. With
/// `mu == 0` this is exactly `L_in`.
pub fn joint_loss(
    g: &mut Graph,
    theta: &[NodeId],
    phi: &[NodeId],
    task: Task<'_>,
    cfg: &JointConfig,
) -> Result<JointLoss, WrapperError> {
    let l_in = task.inner.loss(g, theta, phi)?;
    if cfg.mu == 0.0 {
        return Ok(JointLoss { total: l_in, inner: l_in, outer: None });
    }
    let trace = unroll(g, task.inner, theta, phi, cfg.beta, cfg.n_inner, true, Some(l_in))?;
    let l_out = task.outer.loss(g, trace.last(), phi)?;
    let weighted = g.scale(l_out, cfg.mu)?;
    let total = g.add(l_in, weighted)?;
    Ok(JointLoss { total, inner: l_in, outer: Some(l_out) })
}

/// Gradient of `joint_loss` with respect to `theta` followed by `phi`.
pub fn meta_gradient(
    g: &mut Graph,
    theta: &[NodeId],
    phi: &[NodeId],
    task: Task<'_>,
    cfg: &JointConfig,
) -> Result<(JointLoss, GradMap), WrapperError> {
    let loss = joint_loss(g, theta, phi, task, cfg)?;
    let wrt: Vec<NodeId> = theta.iter().chain(phi).copied().collect();
    let grads = g.gradient(loss.total, &wrt, false)?;
    Ok((loss, grads))
}

/// Decomposition of the outer loss at the unrolled parameters into its value
/// before the unroll and the gradient-alignment term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationTerms {
    /// `L_out(theta^(0), phi)`
    pub first_term: f64,
    /// `-beta * sum_k <grad L_in(theta^(k)), grad L_out(theta^(k))>`
    pub delta_term: f64,
    /// `L_out(theta^(N), phi)`
    pub outer_at_n: f64,
}

impl AblationTerms {
    /// What the first-order expansion leaves unexplained.
    pub fn residual(&self) -> f64 {
        self.outer_at_n - self.first_term - self.delta_term
    }
}

pub fn ablation_terms(
    g: &mut Graph,
    theta: &[NodeId],
    phi: &[NodeId],
    task: Task<'_>,
    cfg: &JointConfig,
) -> Result<AblationTerms, WrapperError> {
    let prev = g.set_tracking(true);
    let result = (|| {
        let trace = unroll(g, task.inner, theta, phi, cfg.beta, cfg.n_inner, false, None)?;
        let mut delta = 0.0;
        let mut first_term = None;
        for (k, state) in trace.theta_nodes.iter().take(cfg.n_inner.max(1)).enumerate() {
            let l_out = task.outer.loss(g, state, phi)?;
            if k == 0 {
                first_term = Some(g.scalar(l_out));
            }
            if k < cfg.n_inner {
                let gi = g.gradient(trace.losses[k], state, false)?.tensors(g);
                let go = g.gradient(l_out, state, false)?.tensors(g);
                delta -= cfg.beta * gi.iter().zip(&go).map(|(a, b)| a.dot(b)).sum::<f64>();
            }
        }
        let l_n = task.outer.loss(g, trace.last(), phi)?;
        Ok(AblationTerms { first_term: first_term.unwrap(), delta_term: delta, outer_at_n: g.scalar(l_n) })
    })();
    g.set_tracking(prev);
    result
}

/// Training variants, from plain sum pooling up to the full wrapper.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Sum pooling, no selector, inner loss only.
    Base,
    /// Selector trained on the inner loss only (M1).
    AttentionOnly,
    /// Adds `mu * L_out(theta, phi)` with `theta` held constant, so the
    /// outer term only trains the selector (M2).
    OuterTerm,
    /// Adds `mu * L_out(theta_bar, phi)` where `theta_bar` is the unrolled
    /// iterate treated as a constant (M3).
    Gdmax,
    /// The exact joint objective, differentiated through the unroll (M4).
    MetaWrapper,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Base, Method::AttentionOnly, Method::OuterTerm, Method::Gdmax, Method::MetaWrapper];

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::AttentionOnly => "attention_only",
            Method::OuterTerm => "outer_term",
            Method::Gdmax => "gdmax",
            Method::MetaWrapper => "meta_wrapper",
        }
    }

    /// Ablation label.
    pub fn short(self) -> &'static str {
        match self {
            Method::Base => "Base",
            Method::AttentionOnly => "M1",
            Method::OuterTerm => "M2",
            Method::Gdmax => "M3",
            Method::MetaWrapper => "M4",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        let s = s.to_ascii_lowercase();
        Method::ALL.into_iter().find(|m| m.name() == s || m.short().to_ascii_lowercase() == s)
    }

    pub fn uses_selector(self) -> bool {
        self != Method::Base
    }

    pub fn uses_outer(self) -> bool {
        matches!(self, Method::OuterTerm | Method::Gdmax | Method::MetaWrapper)
    }
}

/// The training loss of `method` for one task.
pub fn method_loss(
    g: &mut Graph,
    method: Method,
    theta: &[NodeId],
    phi: &[NodeId],
    task: Task<'_>,
    cfg: &JointConfig,
) -> Result<JointLoss, WrapperError> {
    match method {
        Method::MetaWrapper => joint_loss(g, theta, phi, task, cfg),
        Method::Base | Method::AttentionOnly => {
            let l_in = task.inner.loss(g, theta, phi)?;
            Ok(JointLoss { total: l_in, inner: l_in, outer: None })
        }
        Method::OuterTerm | Method::Gdmax => {
            let l_in = task.inner.loss(g, theta, phi)?;
            if cfg.mu == 0.0 {
                return Ok(JointLoss { total: l_in, inner: l_in, outer: None });
            }
            let fixed = if method == Method::OuterTerm {
                theta.to_vec()
            } else {
                unroll(g, task.inner, theta, phi, cfg.beta, cfg.n_inner, false, Some(l_in))?.last().to_vec()
            };
            let fixed = fixed.into_iter().map(|t| g.detach(t)).collect::<Result<Vec<_>, _>>()?;
            let l_out = task.outer.loss(g, &fixed, phi)?;
            let weighted = g.scale(l_out, cfg.mu)?;
            let total = g.add(l_in, weighted)?;
            Ok(JointLoss { total, inner: l_in, outer: Some(l_out) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    /// `1/2 |theta|^2`, ignoring `phi`.
    struct HalfNorm;

    impl Objective for HalfNorm {
        fn loss(&self, g: &mut Graph, theta: &[NodeId], _phi: &[NodeId]) -> Result<NodeId, AutodiffError> {
            let q = g.inner(theta[0], theta[0])?;
            g.scale(q, 0.5)
        }
    }

    /// `1/2 |theta - phi|^2`
    struct Pull;

    impl Objective for Pull {
        fn loss(&self, g: &mut Graph, theta: &[NodeId], phi: &[NodeId]) -> Result<NodeId, AutodiffError> {
            let d = g.sub(theta[0], phi[0])?;
            let q = g.inner(d, d)?;
            g.scale(q, 0.5)
        }
    }

    fn setup(theta: Vec<f64>, phi: Vec<f64>) -> (Graph, NodeId, NodeId) {
        let mut g = Graph::new();
        let t = g.input(Tensor::column(theta));
        let p = g.input(Tensor::column(phi));
        (g, t, p)
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn inner_update_examples() {
        let (mut g, t, p) = setup(vec![1.0, 2.0], vec![0.0, 0.0]);
        let tr = inner_update(&mut g, &HalfNorm, &[t], &[p], 0.1, 1).unwrap();
        assert!(close(g.value(tr.last()[0]).data(), &[0.9, 1.8]));
        let tr = inner_update(&mut g, &HalfNorm, &[t], &[p], 0.1, 2).unwrap();
        assert!(close(g.value(tr.last()[0]).data(), &[0.81, 1.62]));
        let tr = inner_update(&mut g, &HalfNorm, &[t], &[p], 0.1, 0).unwrap();
        assert_eq!(tr.last(), &[t]);
        assert_eq!(g.value(t).data(), &[1.0, 2.0]);
    }

    #[test]
    fn joint_loss_examples() {
        let (mut g, t, p) = setup(vec![1.0, 2.0], vec![0.5, -1.0]);
        let task = Task { inner: &HalfNorm, outer: &Pull };
        let l0 = joint_loss(&mut g, &[t], &[p], task, &JointConfig { mu: 0.0, beta: 0.1, n_inner: 1 }).unwrap();
        assert_eq!(l0.total, l0.inner);
        assert_eq!(g.scalar(l0.total), 2.5);

        let l = joint_loss(&mut g, &[t], &[p], task, &JointConfig { mu: 1.0, beta: 0.1, n_inner: 0 }).unwrap();
        // 2.5 + 1/2 (0.25 + 9)
        assert!((g.scalar(l.total) - (2.5 + 4.625)).abs() < 1e-12);

        // N=1: theta^1 = (0.9, 1.8); L_out = 1/2 (0.16 + 7.84) = 4.0
        let l = joint_loss(&mut g, &[t], &[p], task, &JointConfig { mu: 0.5, beta: 0.1, n_inner: 1 }).unwrap();
        assert!((g.scalar(l.total) - (2.5 + 0.5 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn meta_gradient_without_unroll_is_direct() {
        let (mut g, t, p) = setup(vec![1.0, 2.0], vec![0.5, -1.0]);
        let task = Task { inner: &HalfNorm, outer: &Pull };
        let cfg = JointConfig { mu: 0.7, beta: 0.1, n_inner: 0 };
        let (_, gr) = meta_gradient(&mut g, &[t], &[p], task, &cfg).unwrap();
        let dphi = g.value(gr.get(p).unwrap()).data().to_vec();
        // -mu (theta - phi)
        assert!(close(&dphi, &[-0.7 * 0.5, -0.7 * 3.0]));
    }

    #[test]
    fn ablation_self_alignment() {
        // identical inner and outer objectives, N=1: delta = -beta |grad|^2
        let (mut g, t, p) = setup(vec![1.0, 2.0], vec![0.0, 0.0]);
        let task = Task { inner: &HalfNorm, outer: &HalfNorm };
        let a = ablation_terms(&mut g, &[t], &[p], task, &JointConfig { mu: 1.0, beta: 0.1, n_inner: 1 }).unwrap();
        assert!((a.delta_term + 0.1 * 5.0).abs() < 1e-12);
        assert!(a.delta_term <= 0.0);
        assert_eq!(a.first_term, 2.5);
    }

    #[test]
    fn ablation_orthogonal_gradients() {
        /// Half the square of one coordinate.
        struct Coord(usize);
        impl Objective for Coord {
            fn loss(&self, g: &mut Graph, theta: &[NodeId], _: &[NodeId]) -> Result<NodeId, AutodiffError> {
                let c = g.slice_cols(theta[0], self.0, 1)?;
                let q = g.inner(c, c)?;
                g.scale(q, 0.5)
            }
        }
        let mut g = Graph::new();
        let t = g.input(Tensor::matrix(1, 2, vec![1.0, 3.0]));
        let task = Task { inner: &Coord(0), outer: &Coord(1) };
        let a = ablation_terms(&mut g, &[t], &[], task, &JointConfig { mu: 1.0, beta: 0.3, n_inner: 1 }).unwrap();
        assert_eq!(a.delta_term, 0.0);
        assert_eq!(a.residual(), 0.0);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
            assert_eq!(Method::parse(m.short()), Some(m));
        }
        assert_eq!(Method::parse("nope"), None);
    }

    #[test]
    fn outer_term_trains_selector_only() {
        // with theta held constant, the outer term adds nothing to d/dtheta
        let (mut g, t, p) = setup(vec![1.0, 2.0], vec![0.5, -1.0]);
        let task = Task { inner: &HalfNorm, outer: &Pull };
        let cfg = JointConfig { mu: 0.5, beta: 0.1, n_inner: 1 };
        for m in [Method::OuterTerm, Method::Gdmax] {
            let l = method_loss(&mut g, m, &[t], &[p], task, &cfg).unwrap();
            let gr = g.gradient(l.total, &[t, p], false).unwrap();
            assert!(close(g.value(gr.get(t).unwrap()).data(), &[1.0, 2.0]));
            assert!(gr.entries()[1].reachable);
        }
    }
}
