//! Independent reference computations: finite differences, pairwise AUC and
//! closed-form quadratic bilevel problems.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::eval::EvalError;
use crate::metawrapper::{meta_gradient, BatchObjective, JointConfig, Objective, Task};
use crate::model::{Batch, ModelDims, ParamSet, Variant};

mod program;
pub use program::RandomProgram;

/// Default step for first-order differences.
pub const FD_EPS: f64 = 1e-5;
/// Default step for differences of gradients.
pub const FD_HVP_EPS: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("function value is not finite at block {block}, index {index}")]
    NonFinite { block: usize, index: usize },
    #[error("step size must be positive")]
    BadStep,
    #[error("graph evaluation failed: {0}")]
    Graph(String),
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every
/// coordinate of every block.
pub fn fd_gradient(
    mut f: impl FnMut(&[Tensor]) -> f64,
    params: &[Tensor],
    eps: f64,
) -> Result<Vec<Tensor>, OracleError> {
    if !(eps > 0.0) {
        return Err(OracleError::BadStep);
    }
    let mut x = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for block in 0..params.len() {
        let mut g = Tensor::zeros(params[block].shape());
        for index in 0..params[block].len() {
            let orig = x[block].data()[index];
            x[block].data_mut()[index] = orig + eps;
            let up = f(&x);
            x[block].data_mut()[index] = orig - eps;
            let down = f(&x);
            x[block].data_mut()[index] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(OracleError::NonFinite { block, index });
            }
            g.data_mut()[index] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// `(grad(x + eps v) - grad(x - eps v)) / 2 eps`.
pub fn fd_hvp(
    mut grad: impl FnMut(&[Tensor]) -> Vec<Tensor>,
    params: &[Tensor],
    vector: &[Tensor],
    eps: f64,
) -> Result<Vec<Tensor>, OracleError> {
    if !(eps > 0.0) {
        return Err(OracleError::BadStep);
    }
    let shift = |s: f64| -> Vec<Tensor> {
        params
            .iter()
            .zip(vector)
            .map(|(p, v)| {
                let mut q = p.clone();
                q.axpy(s, v);
                q
            })
            .collect()
    };
    let up = grad(&shift(eps));
    let down = grad(&shift(-eps));
    let mut out = Vec::with_capacity(up.len());
    for (block, (u, d)) in up.iter().zip(&down).enumerate() {
        if let Some(index) = u.data().iter().chain(d.data()).position(|v| !v.is_finite()) {
            return Err(OracleError::NonFinite { block, index: index % u.len().max(1) });
        }
        out.push(u.zip_map(d, |a, b| (a - b) / (2.0 * eps)));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm, taken over a whole
/// block; zero when both are zero.
pub fn rel_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).norm_sq().sqrt();
    let scale = a.norm_sq().sqrt().max(b.norm_sq().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Largest per-block relative error.
pub fn max_rel_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_error(x, y)).fold(0.0, f64::max)
}

/// Fraction of (positive, negative) pairs ordered correctly, ties worth one
/// half.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length(scores.len(), labels.len()));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y != 1).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::Undefined("labels are all one class"));
    }
    let mut credit = 0.0;
    for p in &pos {
        for n in &neg {
            if p > n {
                credit += 1.0;
            } else if p == n {
                credit += 0.5;
            }
        }
    }
    Ok(credit / (pos.len() * neg.len()) as f64)
}

/// Quadratic bilevel problem with closed-form unrolled iterates.
///
/// Inner: `1/2 (theta - a)^T A (theta - a)` with `a = C phi + d`.
/// Outer: `1/2 (theta - t)^T B (theta - t) + w^T theta + lambda/2 |phi|^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct StubProblem {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub b: DMatrix<f64>,
    pub t: DVector<f64>,
    pub w: DVector<f64>,
    pub lambda: f64,
    pub theta0: DVector<f64>,
    pub phi: DVector<f64>,
}

impl StubProblem {
    /// Random instance with `dim(theta) = n`, `dim(phi) = m`. `A` has
    /// eigenvalues in `[0.5, 2.5]`. With `outer_quadratic == false` the
    /// outer loss is affine in `theta` (`B = 0`).
    pub fn random(n: usize, m: usize, outer_quadratic: bool, rng: &mut impl Rng) -> Self {
        let mut mat = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        let q = mat(n, n).qr().q();
        let eig = DVector::from_fn(n, |i, _| 0.5 + 2.0 * (i as f64 + 0.5) / n as f64);
        let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
        let c = mat(n, m);
        let b = if outer_quadratic {
            let r = mat(n, n);
            &r * r.transpose() * 0.5
        } else {
            DMatrix::zeros(n, n)
        };
        let mut vec = |k: usize| -> DVector<f64> { mat(k, 1).column(0).into() };
        Self { a, c, d: vec(n), b, t: vec(n), w: vec(n), lambda: 0.3, theta0: vec(n), phi: vec(m) }
    }

    pub fn n(&self) -> usize {
        self.theta0.len()
    }

    pub fn target(&self, phi: &DVector<f64>) -> DVector<f64> {
        &self.c * phi + &self.d
    }

    pub fn inner_loss(&self, theta: &DVector<f64>, phi: &DVector<f64>) -> f64 {
        let r = theta - self.target(phi);
        0.5 * r.dot(&(&self.a * &r))
    }

    pub fn outer_loss(&self, theta: &DVector<f64>, phi: &DVector<f64>) -> f64 {
        let r = theta - &self.t;
        0.5 * r.dot(&(&self.b * &r)) + self.w.dot(theta) + 0.5 * self.lambda * phi.norm_squared()
    }

    /// `(I - beta A)^n`
    pub fn contraction(&self, beta: f64, n: usize) -> DMatrix<f64> {
        let step = DMatrix::identity(self.n(), self.n()) - &self.a * beta;
        (0..n).fold(DMatrix::identity(self.n(), self.n()), |acc, _| acc * &step)
    }

    /// `theta^(n) = (I - beta A)^n (theta0 - a) + a`
    pub fn iterate(&self, theta0: &DVector<f64>, phi: &DVector<f64>, beta: f64, n: usize) -> DVector<f64> {
        let a = self.target(phi);
        self.contraction(beta, n) * (theta0 - &a) + a
    }

    fn outer_grad_theta(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.b * (theta - &self.t) + &self.w
    }

    /// `d/dphi L_out(theta^(n)(phi), phi)` at the stored point, `theta0`
    /// held fixed.
    pub fn hypergradient(&self, beta: f64, n: usize) -> DVector<f64> {
        let p = self.contraction(beta, n);
        let theta_n = self.iterate(&self.theta0, &self.phi, beta, n);
        let jac = (DMatrix::identity(self.n(), self.n()) - p) * &self.c;
        jac.transpose() * self.outer_grad_theta(&theta_n) + &self.phi * self.lambda
    }

    /// The `n -> infinity` limit, where the inner problem is solved exactly.
    pub fn implicit_hypergradient(&self) -> DVector<f64> {
        let star = self.target(&self.phi);
        self.c.transpose() * self.outer_grad_theta(&star) + &self.phi * self.lambda
    }

    pub fn joint_loss(&self, mu: f64, beta: f64, n: usize) -> f64 {
        let theta_n = self.iterate(&self.theta0, &self.phi, beta, n);
        self.inner_loss(&self.theta0, &self.phi) + mu * self.outer_loss(&theta_n, &self.phi)
    }

    /// Gradient of `joint_loss` with respect to `(theta0, phi)`.
    pub fn joint_gradient(&self, mu: f64, beta: f64, n: usize) -> (DVector<f64>, DVector<f64>) {
        let p = self.contraction(beta, n);
        let r = &self.theta0 - self.target(&self.phi);
        let inner_theta = &self.a * &r;
        let inner_phi = -(self.c.transpose() * &inner_theta);
        let go = self.outer_grad_theta(&self.iterate(&self.theta0, &self.phi, beta, n));
        let d_theta = inner_theta + &p * &go * mu;
        let d_phi = inner_phi + self.hypergradient(beta, n) * mu;
        (d_theta, d_phi)
    }

    /// `-beta * sum_k <grad L_in(theta^(k)), grad L_out(theta^(k))>`.
    pub fn delta(&self, beta: f64, n: usize) -> f64 {
        let a = self.target(&self.phi);
        (0..n)
            .map(|k| {
                let theta_k = self.iterate(&self.theta0, &self.phi, beta, k);
                let gi = &self.a * (&theta_k - &a);
                -beta * gi.dot(&self.outer_grad_theta(&theta_k))
            })
            .sum()
    }

    /// Graph version of the inner loss.
    pub fn inner_objective(&self) -> StubObjective<'_> {
        StubObjective { stub: self, outer: false }
    }

    /// Graph version of the outer loss.
    pub fn outer_objective(&self) -> StubObjective<'_> {
        StubObjective { stub: self, outer: true }
    }
}

pub fn to_tensor(v: &DVector<f64>) -> Tensor {
    Tensor::column(v.iter().copied().collect())
}

pub fn to_dvector(t: &Tensor) -> DVector<f64> {
    DVector::from_column_slice(t.data())
}

fn matrix_tensor(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    Tensor::matrix(r, c, (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect())
}

/// A stub loss built on the autodiff graph. `theta` and `phi` are single
/// column vectors.
pub struct StubObjective<'a> {
    stub: &'a StubProblem,
    outer: bool,
}

impl Objective for StubObjective<'_> {
    fn loss(&self, g: &mut Graph, theta: &[NodeId], phi: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let s = self.stub;
        let quad = |g: &mut Graph, m: &DMatrix<f64>, r: NodeId| -> Result<NodeId, AutodiffError> {
            let mn = g.input(matrix_tensor(m));
            let mr = g.matmul(mn, r)?;
            let q = g.inner(r, mr)?;
            g.scale(q, 0.5)
        };
        if !self.outer {
            let c = g.input(matrix_tensor(&s.c));
            let cp = g.matmul(c, phi[0])?;
            let d = g.input(to_tensor(&s.d));
            let target = g.add(cp, d)?;
            let r = g.sub(theta[0], target)?;
            quad(g, &s.a, r)
        } else {
            let t = g.input(to_tensor(&s.t));
            let r = g.sub(theta[0], t)?;
            let qb = quad(g, &s.b, r)?;
            let w = g.input(to_tensor(&s.w));
            let lin = g.inner(w, theta[0])?;
            let pp = g.inner(phi[0], phi[0])?;
            let reg = g.scale(pp, 0.5 * s.lambda)?;
            let sum = g.add(qb, lin)?;
            g.add(sum, reg)
        }
    }
}

/// Autodiff and central-difference gradients of a model's joint loss, one
/// entry per parameter block (theta blocks, then phi blocks).
#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl ModelGradCheck {
    pub fn block_errors(&self) -> Vec<f64> {
        self.analytic.iter().zip(&self.numeric).map(|(a, n)| rel_error(a, n)).collect()
    }

    pub fn max_error(&self) -> f64 {
        self.block_errors().into_iter().fold(0.0, f64::max)
    }
}

/// Seeded parameters for gradient checks, with embeddings in `U(-1, 1)`
/// whatever the training default. With small embeddings the selector's
/// first-layer gradients sit near `1e-9`, below what central differences
/// resolve.
pub fn gradcheck_params(dims: ModelDims, seed: u64) -> ParamSet {
    ParamSet::init_with(dims, seed, 1.0)
}

/// `L_in(theta, phi) + mu * L_out(theta^(N), phi)` by plain gradient
/// descent on values: each inner step differentiates a fresh graph once and
/// nothing is differentiated through the unroll. `x` holds the theta blocks
/// followed by the phi blocks.
pub fn joint_loss_value(x: &[Tensor], n_theta: usize, task: Task<'_>, cfg: &JointConfig) -> Result<f64, AutodiffError> {
    let (theta0, phi) = x.split_at(n_theta);
    let mut theta = theta0.to_vec();
    let mut l_in = None;
    for _ in 0..cfg.n_inner.max(1) {
        let mut g = Graph::new();
        let t: Vec<NodeId> = theta.iter().map(|v| g.input(v.clone())).collect();
        let p: Vec<NodeId> = phi.iter().map(|v| g.input(v.clone())).collect();
        let loss = task.inner.loss(&mut g, &t, &p)?;
        l_in.get_or_insert(g.scalar(loss));
        if cfg.mu == 0.0 || cfg.n_inner == 0 {
            break;
        }
        let grads = g.gradient(loss, &t, false)?.tensors(&g);
        for (v, d) in theta.iter_mut().zip(&grads) {
            v.axpy(-cfg.beta, d);
        }
    }
    let l_in = l_in.expect("at least one inner evaluation");
    if cfg.mu == 0.0 {
        return Ok(l_in);
    }
    let mut g = Graph::new();
    g.set_tracking(false);
    let t: Vec<NodeId> = theta.iter().map(|v| g.input(v.clone())).collect();
    let p: Vec<NodeId> = phi.iter().map(|v| g.input(v.clone())).collect();
    let l_out = task.outer.loss(&mut g, &t, &p)?;
    Ok(l_in + cfg.mu * g.scalar(l_out))
}

/// Check `meta_gradient` against finite differences of `joint_loss` on full
/// parameter tables. The batches must index the unmapped embedding table.
pub fn model_gradcheck(
    params: &ParamSet,
    inner: &Batch,
    outer: &Batch,
    variant: Variant,
    cfg: &JointConfig,
    eps: f64,
) -> Result<ModelGradCheck, OracleError> {
    let n_theta = params.theta.len();
    let inner_obj = BatchObjective { batch: inner, variant };
    let outer_obj = BatchObjective { batch: outer, variant };
    let build = |g: &mut Graph, x: &[Tensor]| -> (Vec<NodeId>, Vec<NodeId>) {
        let nodes: Vec<NodeId> = x.iter().map(|t| g.input(t.clone())).collect();
        (nodes[..n_theta].to_vec(), nodes[n_theta..].to_vec())
    };
    let all: Vec<Tensor> = params.theta.iter().chain(&params.phi).cloned().collect();

    let mut g = Graph::new();
    let (theta, phi) = build(&mut g, &all);
    let (_, grads) = meta_gradient(&mut g, &theta, &phi, Task { inner: &inner_obj, outer: &outer_obj }, cfg)
        .map_err(|e| OracleError::Graph(e.to_string()))?;
    let analytic = grads.tensors(&g);

    let numeric = fd_gradient(
        |x| joint_loss_value(x, n_theta, Task { inner: &inner_obj, outer: &outer_obj }, cfg).unwrap_or(f64::NAN),
        &all,
        eps,
    )?;
    Ok(ModelGradCheck { analytic, numeric })
}
