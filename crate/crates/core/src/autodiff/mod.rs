//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Gradients are built as graph nodes, so a gradient can be differentiated
//! again. That is what makes unrolled inner loops and Hessian-vector products
//! work without ever forming a Hessian.

mod graph;
mod tensor;

use thiserror::Error;

pub use graph::{GradEntry, GradMap, Graph, Node, NodeId, Op};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("gradient target must hold a single element, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("row index {index} out of range for {rows} rows in {op}")]
    IndexOutOfRange { op: &'static str, index: usize, rows: usize },
    #[error("node {0} is not an input and cannot be rebound")]
    NotAnInput(usize),
}

/// Mixed second derivative applied to a vector: `d/dphi <grad_theta f, v>`.
///
/// With `phi == theta` this is the ordinary Hessian-vector product. Cost is a
/// small constant multiple of one gradient pass.
pub fn hvp(
    graph: &mut Graph,
    scalar: NodeId,
    theta: &[NodeId],
    phi: &[NodeId],
    vector: &[Tensor],
) -> Result<GradMap, AutodiffError> {
    assert_eq!(theta.len(), vector.len(), "one vector block per theta handle");
    let grads = graph.gradient(scalar, theta, true)?;
    let mut acc: Option<NodeId> = None;
    for (g, v) in grads.grads().into_iter().zip(vector) {
        if !graph.value(g).same_shape(v) {
            return Err(AutodiffError::ShapeMismatch {
                op: "hvp",
                lhs: graph.value(g).shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let vn = graph.input(v.clone());
        let term = graph.inner(g, vn)?;
        acc = Some(match acc {
            None => term,
            Some(a) => graph.add(a, term)?,
        });
    }
    match acc {
        Some(s) => graph.gradient(s, phi, false),
        None => {
            let zero = graph.input(Tensor::scalar(0.0));
            graph.gradient(zero, phi, false)
        }
    }
}
