use std::rc::Rc;

use super::{Batch, ModelError, ParamSet, Pooling, RowMap, Variant, EMBEDDING};
use crate::autodiff::{AutodiffError, Graph, NodeId};
use crate::data::Instance;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Predictions are kept in `[P_CLAMP, 1 - P_CLAMP]`.
pub const P_CLAMP: f64 = 1e-7;

/// `sigmoid(x W + b)` for each `(W, b)` pair in turn.
fn dense_stack(g: &mut Graph, mut x: NodeId, layers: &[NodeId]) -> Result<NodeId> {
    for wb in layers.chunks(2) {
        let z = g.matmul(x, wb[0])?;
        let z = g.add_row(z, wb[1])?;
        x = g.sigmoid(z)?;
    }
    Ok(x)
}

/// Item embedding plus category embedding, one row per index.
fn embed(g: &mut Graph, table: NodeId, items: &Rc<[usize]>, cats: &Rc<[usize]>) -> Result<NodeId> {
    let a = g.gather(table, items.clone())?;
    let b = g.gather(table, cats.clone())?;
    g.add(a, b)
}

/// Selector score of each behavior: the dense stack over
/// `[e_h, e_v, e_h - e_v, e_h * e_v]`. `e_h` and `e_v` are `[S, K]`, with
/// `e_v` repeated per behavior. Returns `[S, 1]`.
pub fn relevance_scores(g: &mut Graph, e_h: NodeId, e_v: NodeId, phi: &[NodeId]) -> Result<NodeId> {
    let diff = g.sub(e_h, e_v)?;
    let prod = g.mul(e_h, e_v)?;
    let x = g.concat_cols(&[e_h, e_v, diff, prod])?;
    dense_stack(g, x, phi)
}

/// User representation per instance from `[S, K]` behavior embeddings and
/// `[S, 1]` scores. Returns `[n, K]`.
pub fn pool(g: &mut Graph, e_h: NodeId, scores: NodeId, seg: &Rc<[usize]>, n: usize, mode: Pooling) -> Result<NodeId> {
    let w = match mode {
        Pooling::WeightedSum => scores,
        Pooling::Softmax => g.softmax_segments(scores, seg.clone(), n)?,
    };
    let k = g.value(e_h).dims().1;
    let wk = g.broadcast_cols(w, k)?;
    let weighted = g.mul(e_h, wk)?;
    g.scatter_add(weighted, seg.clone(), n)
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[n, 1]`, clamped.
    pub p_hat: NodeId,
    /// `[S, 1]`; absent for the base variant.
    pub scores: Option<NodeId>,
    /// `[n, K]`
    pub r_hat: NodeId,
}

/// Build the prediction graph for `batch`. `theta[EMBEDDING]` must be the
/// table that the batch rows index into.
pub fn forward(g: &mut Graph, theta: &[NodeId], phi: &[NodeId], batch: &Batch, variant: Variant) -> Result<Forward> {
    let table = theta[EMBEDDING];
    let n = batch.len();
    let e_v = embed(g, table, &batch.target_item, &batch.target_cat)?;
    let e_h = embed(g, table, &batch.hist_item, &batch.hist_cat)?;
    let (r_hat, scores) = match variant {
        Variant::Base => (g.scatter_add(e_h, batch.seg.clone(), n)?, None),
        Variant::Selector(mode) => {
            let e_vh = g.gather(e_v, batch.seg.clone())?;
            let s = relevance_scores(g, e_h, e_vh, phi)?;
            (pool(g, e_h, s, &batch.seg, n, mode)?, Some(s))
        }
    };
    let z = g.concat_cols(&[r_hat, e_v])?;
    let p = dense_stack(g, z, &theta[EMBEDDING + 1..])?;
    let p_hat = g.clamp(p, P_CLAMP, 1.0 - P_CLAMP)?;
    Ok(Forward { p_hat, scores, r_hat })
}

/// Mean cross-entropy of `batch` as a `[1]` node.
pub fn batch_loss(g: &mut Graph, theta: &[NodeId], phi: &[NodeId], batch: &Batch, variant: Variant) -> Result<NodeId> {
    let p = forward(g, theta, phi, batch, variant)?.p_hat;
    let y = g.input(batch.labels.clone());
    let not_y = g.input(batch.labels.map(|v| 1.0 - v));
    let log_p = g.log(p)?;
    let q = g.affine(p, -1.0, 1.0)?;
    let log_q = g.log(q)?;
    let a = g.mul(y, log_p)?;
    let b = g.mul(not_y, log_q)?;
    let ll = g.add(a, b)?;
    let m = g.mean(ll)?;
    g.neg(m)
}

/// `-y ln p - (1 - y) ln(1 - p)` with `p` clamped.
pub fn cross_entropy(y: f64, p_hat: f64) -> f64 {
    let p = p_hat.clamp(P_CLAMP, 1.0 - P_CLAMP);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub p_hat: f64,
    /// One score per behavior; all ones for the base variant.
    pub scores: Vec<f64>,
    pub r_hat: Vec<f64>,
}

fn leaves(g: &mut Graph, params: &ParamSet, map: &RowMap) -> (Vec<NodeId>, Vec<NodeId>) {
    let mut theta = vec![g.input(map.gather(&params.theta[EMBEDDING]))];
    theta.extend(params.theta[EMBEDDING + 1..].iter().map(|t| g.input(t.clone())));
    let phi = params.phi.iter().map(|t| g.input(t.clone())).collect();
    (theta, phi)
}

fn predict_one(instance: &Instance, params: &ParamSet, variant: Variant) -> std::result::Result<Prediction, ModelError> {
    let batch = Batch::new([instance], &params.dims)?;
    let map = RowMap::covering(&[&batch]);
    let batch = batch.remap(&map);
    let mut g = Graph::new();
    g.set_tracking(false);
    let (theta, phi) = leaves(&mut g, params, &map);
    let f = forward(&mut g, &theta, &phi, &batch, variant)?;
    Ok(Prediction {
        p_hat: g.scalar(f.p_hat),
        scores: match f.scores {
            Some(s) => g.value(s).data().to_vec(),
            None => vec![1.0; batch.n_behaviors()],
        },
        r_hat: g.value(f.r_hat).data().to_vec(),
    })
}

pub fn predict(instance: &Instance, params: &ParamSet, pooling: Pooling) -> std::result::Result<Prediction, ModelError> {
    predict_one(instance, params, Variant::Selector(pooling))
}

/// Prediction with the user represented by the plain sum of history
/// embeddings.
pub fn predict_base(instance: &Instance, params: &ParamSet) -> std::result::Result<f64, ModelError> {
    Ok(predict_one(instance, params, Variant::Base)?.p_hat)
}

/// Click probabilities for many instances, evaluated `chunk` at a time.
pub fn predict_batch(
    params: &ParamSet,
    instances: &[Instance],
    variant: Variant,
    chunk: usize,
) -> std::result::Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(instances.len());
    for part in instances.chunks(chunk.max(1)) {
        let batch = Batch::new(part, &params.dims)?;
        let map = RowMap::covering(&[&batch]);
        let batch = batch.remap(&map);
        let mut g = Graph::new();
        g.set_tracking(false);
        let (theta, phi) = leaves(&mut g, params, &map);
        let f = forward(&mut g, &theta, &phi, &batch, variant)?;
        out.extend_from_slice(g.value(f.p_hat).data());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::data::ItemRef;
    use crate::model::ModelDims;

    fn inst(target: usize, hist: &[usize], label: u8) -> Instance {
        Instance {
            user_id: 0,
            target: ItemRef { item: target, category: 0 },
            history: hist.iter().map(|&h| ItemRef { item: h, category: 0 }).collect(),
            label,
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn random_params(k: usize, seed: u64) -> ParamSet {
        ParamSet::init(ModelDims::new(12, 2, k), seed)
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(1.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((cross_entropy(0.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((cross_entropy(1.0, 0.9) - 0.105_360_515_657_826_3).abs() < 1e-12);
        assert!(cross_entropy(1.0, 0.0).is_finite());
    }

    #[test]
    fn score_length_matches_history() {
        let p = random_params(4, 0);
        for t in [1usize, 5, 100] {
            let hist: Vec<usize> = (0..t).map(|i| i % 12).collect();
            let pred = predict(&inst(3, &hist, 1), &p, Pooling::WeightedSum).unwrap();
            assert_eq!(pred.scores.len(), t);
            assert_eq!(pred.r_hat.len(), 4);
            assert!(pred.p_hat > 0.0 && pred.p_hat < 1.0);
        }
    }

    #[test]
    fn zero_selector_gives_equal_scores() {
        let mut p = random_params(4, 1);
        for t in &mut p.phi {
            *t = Tensor::zeros(t.shape());
        }
        let pred = predict(&inst(3, &[1, 2, 5, 7], 1), &p, Pooling::WeightedSum).unwrap();
        // sigmoid(0 * ...) chains to sigmoid(0) = 0.5 at the output
        assert!(pred.scores.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let mut p = random_params(4, 2);
        let n = p.theta.len();
        p.theta[n - 2] = Tensor::zeros(p.theta[n - 2].shape());
        p.theta[n - 1] = Tensor::zeros(&[1, 1]);
        for i in [inst(1, &[2, 3], 1), inst(4, &[5], 0)] {
            assert_eq!(predict(&i, &p, Pooling::WeightedSum).unwrap().p_hat, 0.5);
            assert_eq!(predict_base(&i, &p).unwrap(), 0.5);
        }
    }

    #[test]
    fn out_of_vocabulary() {
        let p = random_params(4, 0);
        assert!(matches!(
            predict(&inst(99, &[1], 1), &p, Pooling::WeightedSum),
            Err(ModelError::OutOfVocabulary { kind: "item", id: 99, .. })
        ));
    }

    #[test]
    fn base_is_order_invariant() {
        let p = random_params(6, 3);
        let a = predict_base(&inst(1, &[2, 3, 4], 1), &p).unwrap();
        let b = predict_base(&inst(1, &[4, 2, 3], 1), &p).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn pool_examples() {
        let mut g = Graph::new();
        // rows are behaviors: r_u = [[1,3],[2,4]] has columns (1,2) and (3,4)
        let e_h = g.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let seg: Rc<[usize]> = vec![0, 0].into();
        let ones = g.input(Tensor::column(vec![1.0, 1.0]));
        let r = pool(&mut g, e_h, ones, &seg, 1, Pooling::WeightedSum).unwrap();
        assert_eq!(g.value(r).data(), &[4.0, 6.0]);

        let onehot = g.input(Tensor::column(vec![1.0, 0.0]));
        let r = pool(&mut g, e_h, onehot, &seg, 1, Pooling::WeightedSum).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 2.0]);

        let equal = g.input(Tensor::column(vec![0.3, 0.3]));
        let r = pool(&mut g, e_h, equal, &seg, 1, Pooling::Softmax).unwrap();
        assert_eq!(g.value(r).data(), &[2.0, 3.0]);
    }

    #[test]
    fn pooling_scale_behavior() {
        let mut g = Graph::new();
        let e_h = g.input(Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.25]));
        let seg: Rc<[usize]> = vec![0, 0, 0].into();
        let s = vec![0.2, 0.7, 0.4];
        let c = 2.5;
        let s1 = g.input(Tensor::column(s.clone()));
        let sc = g.input(Tensor::column(s.iter().map(|v| v * c).collect()));
        let a = pool(&mut g, e_h, s1, &seg, 1, Pooling::WeightedSum).unwrap();
        let b = pool(&mut g, e_h, sc, &seg, 1, Pooling::WeightedSum).unwrap();
        for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((x * c - y).abs() < 1e-12);
        }
        // softmax of scaled logits, computed by hand
        let b = pool(&mut g, e_h, sc, &seg, 1, Pooling::Softmax).unwrap();
        let w: Vec<f64> = s.iter().map(|v| (v * c).exp()).collect();
        let z: f64 = w.iter().sum();
        let rows = [[1.0, -2.0], [0.5, 3.0], [-1.0, 0.25]];
        for col in 0..2 {
            let want: f64 = (0..3).map(|i| w[i] / z * rows[i][col]).sum();
            assert!((g.value(b).data()[col] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn base_equals_weighted_sum_with_unit_scores() {
        // drive every selector score to exactly 1 via huge output bias
        let mut p = random_params(4, 5);
        p.phi[4] = Tensor::zeros(p.phi[4].shape());
        p.phi[5] = Tensor::matrix(1, 1, vec![800.0]);
        for i in [inst(1, &[2, 3, 9], 1), inst(7, &[5], 0)] {
            let sel = predict(&i, &p, Pooling::WeightedSum).unwrap();
            assert!(sel.scores.iter().all(|&s| s == 1.0));
            assert_eq!(sel.p_hat, predict_base(&i, &p).unwrap());
        }
    }

    #[test]
    fn singleton_history_matches_base() {
        let p = random_params(4, 6);
        let i = inst(2, &[8], 1);
        let sel = predict(&i, &p, Pooling::Softmax).unwrap();
        // softmax over one behavior is exactly 1
        assert_eq!(sel.p_hat, predict_base(&i, &p).unwrap());
    }

    #[test]
    fn hand_computed_k2() {
        // K=2, hidden (1, 1), one behavior; every weight set by hand.
        let dims = ModelDims { n_items: 2, n_categories: 1, k: 2, hidden: [1, 1] };
        let emb = Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, -0.1, 0.05, 0.0]);
        let p = ParamSet {
            dims,
            theta: vec![
                emb,
                Tensor::matrix(4, 1, vec![1.0, -1.0, 0.5, 2.0]),
                Tensor::matrix(1, 1, vec![0.1]),
                Tensor::matrix(1, 1, vec![2.0]),
                Tensor::matrix(1, 1, vec![-1.0]),
                Tensor::matrix(1, 1, vec![3.0]),
                Tensor::matrix(1, 1, vec![-1.5]),
            ],
            phi: vec![
                Tensor::matrix(8, 1, vec![1.0, 2.0, 0.0, -1.0, 0.5, 0.5, 3.0, 4.0]),
                Tensor::matrix(1, 1, vec![0.0]),
                Tensor::matrix(1, 1, vec![1.0]),
                Tensor::matrix(1, 1, vec![0.0]),
                Tensor::matrix(1, 1, vec![2.0]),
                Tensor::matrix(1, 1, vec![-1.0]),
            ],
        };
        let i = Instance {
            user_id: 0,
            target: ItemRef { item: 1, category: 0 },
            history: vec![ItemRef { item: 0, category: 0 }],
            label: 1,
        };
        // e_h = (0.1,0.2)+(0.05,0) = (0.15,0.2); e_v = (0.3,-0.1)+(0.05,0) = (0.35,-0.1)
        let (eh, ev) = ([0.15, 0.2], [0.35, -0.1]);
        let x = [eh[0], eh[1], ev[0], ev[1], eh[0] - ev[0], eh[1] - ev[1], eh[0] * ev[0], eh[1] * ev[1]];
        let w = [1.0, 2.0, 0.0, -1.0, 0.5, 0.5, 3.0, 4.0];
        let a1 = sigmoid(x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>());
        let a2 = sigmoid(a1);
        let s = sigmoid(2.0 * a2 - 1.0);
        let r = [s * eh[0], s * eh[1]];
        let h1 = sigmoid(r[0] - r[1] + 0.5 * ev[0] + 2.0 * ev[1] + 0.1);
        let h2 = sigmoid(2.0 * h1 - 1.0);
        let want = sigmoid(3.0 * h2 - 1.5);

        let pred = predict(&i, &p, Pooling::WeightedSum).unwrap();
        assert!((pred.scores[0] - s).abs() < 1e-14);
        assert!((pred.p_hat - want).abs() < 1e-14);
    }

    #[test]
    fn batch_loss_matches_cross_entropy() {
        let p = random_params(4, 7);
        let a = inst(1, &[2, 3], 1);
        let b = inst(4, &[5, 6, 7], 0);
        let loss = |insts: &[&Instance]| -> f64 {
            let batch = Batch::new(insts.iter().copied(), &p.dims).unwrap();
            let map = RowMap::covering(&[&batch]);
            let batch = batch.remap(&map);
            let mut g = Graph::new();
            let (theta, phi) = leaves(&mut g, &p, &map);
            let l = batch_loss(&mut g, &theta, &phi, &batch, Variant::Selector(Pooling::WeightedSum)).unwrap();
            g.scalar(l)
        };
        let pa = predict(&a, &p, Pooling::WeightedSum).unwrap().p_hat;
        let pb = predict(&b, &p, Pooling::WeightedSum).unwrap().p_hat;
        assert!((loss(&[&a]) - cross_entropy(1.0, pa)).abs() < 1e-14);
        assert!((loss(&[&a, &a]) - loss(&[&a])).abs() < 1e-14);
        let want = 0.5 * (cross_entropy(1.0, pa) + cross_entropy(0.0, pb));
        assert!((loss(&[&a, &b]) - want).abs() < 1e-14);
    }

    #[test]
    fn predict_batch_matches_single() {
        let p = random_params(4, 8);
        let insts = vec![inst(1, &[2, 3], 1), inst(4, &[5, 6, 7], 0), inst(9, &[0], 1)];
        let v = Variant::Selector(Pooling::Softmax);
        let many = predict_batch(&p, &insts, v, 2).unwrap();
        for (i, m) in insts.iter().zip(many) {
            assert!((predict(i, &p, Pooling::Softmax).unwrap().p_hat - m).abs() < 1e-14);
        }
    }
}
