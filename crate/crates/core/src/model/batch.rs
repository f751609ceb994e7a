use std::collections::HashMap;
use std::rc::Rc;

use super::{ModelDims, ModelError};
use crate::autodiff::Tensor;
use crate::data::Instance;

/// Instances flattened into embedding-row indices.
///
/// Histories are stacked into one list of behaviors; `seg[j]` names the
/// instance that behavior `j` belongs to. Category rows are offset by the
/// number of items.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub target_item: Rc<[usize]>,
    pub target_cat: Rc<[usize]>,
    pub hist_item: Rc<[usize]>,
    pub hist_cat: Rc<[usize]>,
    pub seg: Rc<[usize]>,
    /// `[n, 1]` column of 0/1 labels.
    pub labels: Tensor,
}

impl Batch {
    pub fn new<'a>(instances: impl IntoIterator<Item = &'a Instance>, dims: &ModelDims) -> Result<Self, ModelError> {
        let check = |kind: &'static str, id: usize, size: usize| {
            if id < size {
                Ok(id)
            } else {
                Err(ModelError::OutOfVocabulary { kind, id, size })
            }
        };
        let (mut ti, mut tc, mut hi, mut hc, mut seg, mut y) = (vec![], vec![], vec![], vec![], vec![], vec![]);
        for (n, inst) in instances.into_iter().enumerate() {
            if inst.history.is_empty() {
                return Err(ModelError::EmptyHistory(n));
            }
            ti.push(check("item", inst.target.item, dims.n_items)?);
            tc.push(dims.n_items + check("category", inst.target.category, dims.n_categories)?);
            for h in &inst.history {
                hi.push(check("item", h.item, dims.n_items)?);
                hc.push(dims.n_items + check("category", h.category, dims.n_categories)?);
                seg.push(n);
            }
            y.push(f64::from(inst.label));
        }
        if ti.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        Ok(Self {
            target_item: ti.into(),
            target_cat: tc.into(),
            hist_item: hi.into(),
            hist_cat: hc.into(),
            seg: seg.into(),
            labels: Tensor::column(y),
        })
    }

    pub fn len(&self) -> usize {
        self.target_item.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_item.is_empty()
    }

    pub fn n_behaviors(&self) -> usize {
        self.seg.len()
    }

    fn row_lists(&self) -> [&Rc<[usize]>; 4] {
        [&self.target_item, &self.target_cat, &self.hist_item, &self.hist_cat]
    }

    /// Same batch with rows renumbered into a local table.
    pub fn remap(&self, map: &RowMap) -> Batch {
        let r = |v: &Rc<[usize]>| -> Rc<[usize]> { v.iter().map(|&g| map.local(g)).collect() };
        Batch {
            target_item: r(&self.target_item),
            target_cat: r(&self.target_cat),
            hist_item: r(&self.hist_item),
            hist_cat: r(&self.hist_cat),
            seg: self.seg.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// The embedding rows touched by a set of batches, in ascending order.
#[derive(Clone, Debug, Default)]
pub struct RowMap {
    rows: Vec<usize>,
    local: HashMap<usize, usize>,
}

impl RowMap {
    pub fn covering(batches: &[&Batch]) -> Self {
        let mut rows: Vec<usize> =
            batches.iter().flat_map(|b| b.row_lists().into_iter().flat_map(|v| v.iter().copied())).collect();
        rows.sort_unstable();
        rows.dedup();
        let local = rows.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        Self { rows, local }
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn local(&self, global: usize) -> usize {
        self.local[&global]
    }

    /// The covered rows of a full `[rows, K]` table.
    pub fn gather(&self, table: &Tensor) -> Tensor {
        table.select_rows(&self.rows)
    }

    /// `table[rows] += alpha * local`.
    pub fn scatter_axpy(&self, table: &mut Tensor, alpha: f64, local: &Tensor) {
        for (i, &g) in self.rows.iter().enumerate() {
            for (t, l) in table.row_mut(g).iter_mut().zip(local.row(i)) {
                *t += alpha * l;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ItemRef;

    fn inst(target: usize, hist: &[usize], label: u8) -> Instance {
        Instance {
            user_id: 0,
            target: ItemRef { item: target, category: target % 2 },
            history: hist.iter().map(|&h| ItemRef { item: h, category: h % 2 }).collect(),
            label,
        }
    }

    #[test]
    fn flattening() {
        let dims = ModelDims::new(10, 2, 4);
        let a = inst(3, &[1, 2], 1);
        let b = inst(4, &[5], 0);
        let batch = Batch::new([&a, &b], &dims).unwrap();
        assert_eq!(&*batch.target_item, &[3, 4]);
        assert_eq!(&*batch.target_cat, &[11, 10]);
        assert_eq!(&*batch.hist_item, &[1, 2, 5]);
        assert_eq!(&*batch.seg, &[0, 0, 1]);
        assert_eq!(batch.labels.data(), &[1.0, 0.0]);
    }

    #[test]
    fn errors() {
        let dims = ModelDims::new(10, 2, 4);
        assert!(matches!(Batch::new([&inst(12, &[1], 1)], &dims), Err(ModelError::OutOfVocabulary { .. })));
        assert!(matches!(Batch::new([&inst(1, &[], 1)], &dims), Err(ModelError::EmptyHistory(0))));
        assert!(matches!(Batch::new(std::iter::empty(), &dims), Err(ModelError::EmptyBatch)));
    }

    #[test]
    fn row_map_round_trip() {
        let dims = ModelDims::new(10, 2, 2);
        let a = Batch::new([&inst(3, &[1, 2], 1)], &dims).unwrap();
        let b = Batch::new([&inst(7, &[3], 0)], &dims).unwrap();
        let map = RowMap::covering(&[&a, &b]);
        assert_eq!(map.rows(), &[1, 2, 3, 7, 10, 11]);
        let local = b.remap(&map);
        assert_eq!(&*local.target_item, &[3]);
        assert_eq!(&*local.hist_item, &[2]);

        let table = Tensor::matrix(12, 2, (0..24).map(f64::from).collect());
        let sub = map.gather(&table);
        assert_eq!(sub.row(3), &[14.0, 15.0]);
        let mut t2 = table.clone();
        map.scatter_axpy(&mut t2, -1.0, &sub);
        assert_eq!(t2.row(7), &[0.0, 0.0]);
        assert_eq!(t2.row(0), &[0.0, 1.0]);
        assert_eq!(t2.row(4), &[8.0, 9.0]);
    }
}
