//! Random differentiable programs for checking second-order autodiff.

use std::rc::Rc;

use rand::Rng;

use super::{fd_hvp, OracleError};
use crate::autodiff::{hvp, AutodiffError, Graph, NodeId, Tensor};

#[derive(Clone, Debug)]
enum Step {
    Sigmoid(usize),
    Affine(usize, f64, f64),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `a / (1 + sigmoid(b))`
    Div(usize, usize),
    /// `log(sigmoid(a))`
    LogSigmoid(usize),
    /// `a W + b`
    Dense(usize),
    /// `a` scaled per row by a segment softmax of its first column
    SegmentSoftmax(usize, Rc<[usize]>),
    GatherScatter(usize, Rc<[usize]>, Rc<[usize]>),
    /// `[a, b]` then the middle `cols` columns
    ConcatSlice(usize, usize, usize),
    /// Broadcast of the row sums, times `b`
    RowSums(usize, usize),
    /// Broadcast of the column means, times `b`
    ColMeans(usize, usize),
}

/// A random expression over two `[r, c]` inputs, a `[c, c]` weight and a
/// `[1, c]` bias, reduced to a scalar. It can be rebuilt on any graph, so
/// autodiff results can be compared against differences of re-evaluations.
#[derive(Clone, Debug)]
pub struct RandomProgram {
    pub inputs: Vec<Tensor>,
    steps: Vec<Step>,
    rows: usize,
    cols: usize,
}

impl RandomProgram {
    pub fn random(rng: &mut impl Rng) -> Self {
        let rows = rng.gen_range(2..=4);
        let cols = rng.gen_range(1..=3);
        let mut uniform = |shape: &[usize], scale: f64| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
        };
        let inputs = vec![
            uniform(&[rows, cols], 1.0),
            uniform(&[rows, cols], 1.0),
            uniform(&[cols, cols], 1.0 / (cols as f64).sqrt()),
            uniform(&[1, cols], 0.5),
        ];
        let n_steps = rng.gen_range(3..=8);
        let mut steps = Vec::with_capacity(n_steps);
        for k in 0..n_steps {
            // slots 0 and 1 are the inputs; step k writes slot k + 2
            let live = k + 2;
            let a = rng.gen_range(0..live);
            let b = rng.gen_range(0..live);
            let index = |rng: &mut dyn rand::RngCore, n: usize, hi: usize| -> Rc<[usize]> {
                (0..n).map(|_| rng.gen_range(0..hi)).collect()
            };
            steps.push(match rng.gen_range(0..13) {
                0 => Step::Sigmoid(a),
                1 => Step::Affine(a, rng.gen_range(-1.5..1.5), rng.gen_range(-0.5..0.5)),
                2 => Step::Add(a, b),
                3 => Step::Sub(a, b),
                4 => Step::Mul(a, b),
                5 => Step::Div(a, b),
                6 => Step::LogSigmoid(a),
                7 => Step::Dense(a),
                8 => {
                    let n_seg = rng.gen_range(1..=rows);
                    let mut seg: Vec<usize> = (0..rows).map(|i| i % n_seg).collect();
                    seg.sort_unstable();
                    Step::SegmentSoftmax(a, seg.into())
                }
                9 => {
                    let mid = rng.gen_range(1..=rows + 1);
                    Step::GatherScatter(a, index(rng, mid, rows), index(rng, mid, rows))
                }
                10 => Step::ConcatSlice(a, b, rng.gen_range(0..=cols)),
                11 => Step::RowSums(a, b),
                _ => Step::ColMeans(a, b),
            });
        }
        Self { inputs, steps, rows, cols }
    }

    /// The scalar output given one node per entry of `inputs`.
    pub fn build(&self, g: &mut Graph, x: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let (w, bias) = (x[2], x[3]);
        let mut slots = vec![x[0], x[1]];
        for step in &self.steps {
            let s = &slots;
            let next = match *step {
                Step::Sigmoid(a) => g.sigmoid(s[a])?,
                Step::Affine(a, scale, shift) => g.affine(s[a], scale, shift)?,
                Step::Add(a, b) => g.add(s[a], s[b])?,
                Step::Sub(a, b) => g.sub(s[a], s[b])?,
                Step::Mul(a, b) => g.mul(s[a], s[b])?,
                Step::Div(a, b) => {
                    let d = g.sigmoid(s[b])?;
                    let d = g.affine(d, 1.0, 1.0)?;
                    g.div(s[a], d)?
                }
                Step::LogSigmoid(a) => {
                    let p = g.sigmoid(s[a])?;
                    g.log(p)?
                }
                Step::Dense(a) => {
                    let z = g.matmul(s[a], w)?;
                    g.add_row(z, bias)?
                }
                Step::SegmentSoftmax(a, ref seg) => {
                    let first = g.slice_cols(s[a], 0, 1)?;
                    let n_seg = seg.iter().max().map_or(0, |m| m + 1);
                    let p = g.softmax_segments(first, seg.clone(), n_seg)?;
                    let p = g.broadcast_cols(p, self.cols)?;
                    g.mul(s[a], p)?
                }
                Step::GatherScatter(a, ref from, ref to) => {
                    let picked = g.gather(s[a], from.clone())?;
                    g.scatter_add(picked, to.clone(), self.rows)?
                }
                Step::ConcatSlice(a, b, start) => {
                    let both = g.concat_cols(&[s[a], s[b]])?;
                    g.slice_cols(both, start, self.cols)?
                }
                Step::RowSums(a, b) => {
                    let r = g.sum_cols(s[a])?;
                    let r = g.broadcast_cols(r, self.cols)?;
                    g.mul(r, s[b])?
                }
                Step::ColMeans(a, b) => {
                    let c = g.sum_rows(s[a])?;
                    let c = g.scale(c, 1.0 / self.rows as f64)?;
                    let c = g.broadcast_rows(c, self.rows)?;
                    g.mul(c, s[b])?
                }
            };
            slots.push(next);
        }
        let last = *slots.last().unwrap();
        let sq = g.inner(last, last)?;
        let sq = g.scale(sq, 0.5)?;
        let sig = g.sigmoid(slots[slots.len() - 2])?;
        let mix = g.inner(sig, last)?;
        g.add(sq, mix)
    }

    /// Autodiff and central-difference Hessian-vector products at the
    /// program's inputs.
    pub fn hvp_check(&self, vector: &[Tensor], eps: f64) -> Result<(Vec<Tensor>, Vec<Tensor>), OracleError> {
        let graph_err = |e: AutodiffError| OracleError::Graph(e.to_string());
        let mut g = Graph::new();
        let x: Vec<NodeId> = self.inputs.iter().map(|t| g.input(t.clone())).collect();
        let f = self.build(&mut g, &x).map_err(graph_err)?;
        let analytic = hvp(&mut g, f, &x, &x, vector).map_err(graph_err)?.tensors(&g);
        let numeric = fd_hvp(
            |p| {
                let mut g = Graph::new();
                let x: Vec<NodeId> = p.iter().map(|t| g.input(t.clone())).collect();
                let grads = self.build(&mut g, &x).and_then(|f| g.gradient(f, &x, false));
                match grads {
                    Ok(gr) => gr.tensors(&g),
                    Err(_) => p.iter().map(|t| t.map(|_| f64::NAN)).collect(),
                }
            },
            &self.inputs,
            vector,
            eps,
        )?;
        Ok((analytic, numeric))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::max_rel_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn programs_are_reproducible_and_checkable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = RandomProgram::random(&mut rng);
            let v: Vec<Tensor> = p.inputs.iter().map(|t| t.map(|x| (3.0 * x).cos())).collect();
            let (a, n) = p.hvp_check(&v, 1e-4).unwrap();
            assert!(max_rel_error(&a, &n) < 1e-5, "{p:?}");
            let mut g = Graph::new();
            let x: Vec<NodeId> = p.inputs.iter().map(|t| g.input(t.clone())).collect();
            let f1 = p.build(&mut g, &x).unwrap();
            let f2 = p.build(&mut g, &x).unwrap();
            assert_eq!(g.scalar(f1), g.scalar(f2));
        }
    }
}
