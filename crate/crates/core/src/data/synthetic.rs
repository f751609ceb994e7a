use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Instance, ItemRef, SplitDataset};

/// Noisy-label benchmark: users and items share `n_groups` interest groups,
/// each user gets `pos_per_user` items from its own group and
/// `neg_per_user` from the others, and labels are then flipped at random.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_groups: usize,
    pub pos_per_user: usize,
    pub neg_per_user: usize,
    /// Probability that an interested item is labeled clicked.
    pub p_pos_keep: f64,
    /// Probability that a non-interested item is labeled clicked.
    pub p_neg_flip: f64,
    /// Share of each user's instances that go to training.
    pub train_fraction: f64,
    /// Behaviors per history, the same for every instance.
    pub history_len: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 100,
            n_items: 10_000,
            n_groups: 10,
            pos_per_user: 50,
            neg_per_user: 50,
            p_pos_keep: 0.5,
            p_neg_flip: 0.2,
            train_fraction: 0.9,
            history_len: 16,
        }
    }
}

pub fn user_group(user: usize, n_groups: usize) -> usize {
    user % n_groups
}

pub fn item_group(item: usize, n_groups: usize) -> usize {
    item % n_groups
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Config(m));
        if self.n_groups == 0 || self.n_users == 0 {
            return err("n_users and n_groups must be positive".into());
        }
        let smallest = self.n_items / self.n_groups;
        if smallest < self.pos_per_user {
            return err(format!(
                "item group of {smallest} items cannot supply {} interested items",
                self.pos_per_user
            ));
        }
        if self.n_items - self.n_items.div_ceil(self.n_groups) < self.neg_per_user {
            return err(format!("too few out-of-group items for {} non-interested items", self.neg_per_user));
        }
        for (name, p) in [("p_pos_keep", self.p_pos_keep), ("p_neg_flip", self.p_neg_flip)] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return err(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        if self.history_len == 0 {
            return err("history_len must be positive".into());
        }
        Ok(())
    }
}

/// Generate the benchmark. Item categories are the item groups.
///
/// Each user's instances are shuffled and split `train_fraction` to train,
/// the rest to test; the validation split stays empty. Each history holds
/// `history_len` of the user's clicked training items other than the target,
/// drawn at random per instance (with repeats only when the user has too few
/// clicks). The fixed length keeps a user's click count out of the input.
pub fn generate_synthetic(cfg: &SyntheticConfig, rng: &mut impl Rng) -> Result<SplitDataset, DataError> {
    cfg.validate()?;
    let g = cfg.n_groups;
    let item_ref = |item: usize| ItemRef { item, category: item_group(item, g) };
    let mut out = SplitDataset {
        n_users: cfg.n_users,
        n_items: cfg.n_items,
        n_categories: g,
        ..Default::default()
    };

    for user in 0..cfg.n_users {
        let group = user_group(user, g);
        let in_group: Vec<usize> = (0..cfg.n_items).filter(|&j| item_group(j, g) == group).collect();
        let off_group: Vec<usize> = (0..cfg.n_items).filter(|&j| item_group(j, g) != group).collect();

        let mut rows: Vec<(usize, u8)> = Vec::with_capacity(cfg.pos_per_user + cfg.neg_per_user);
        for k in index::sample(rng, in_group.len(), cfg.pos_per_user) {
            rows.push((in_group[k], u8::from(rng.gen_bool(cfg.p_pos_keep))));
        }
        for k in index::sample(rng, off_group.len(), cfg.neg_per_user) {
            rows.push((off_group[k], u8::from(rng.gen_bool(cfg.p_neg_flip))));
        }
        rows.shuffle(rng);

        let n_train = ((rows.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, rows.len() - 1);
        let (train, test) = rows.split_at(n_train);
        let mut clicked: Vec<usize> = train.iter().filter(|r| r.1 == 1).map(|r| r.0).collect();
        if clicked.len() < 2 {
            // degenerate user: fall back to all training items
            clicked = train.iter().map(|r| r.0).collect();
        }

        let mut history_for = |target: usize| -> Vec<ItemRef> {
            let kept: Vec<usize> = clicked.iter().copied().filter(|&j| j != target).collect();
            let mut picked: Vec<ItemRef> =
                index::sample(rng, kept.len(), cfg.history_len.min(kept.len())).iter().map(|k| item_ref(kept[k])).collect();
            while picked.len() < cfg.history_len {
                picked.push(item_ref(kept[rng.gen_range(0..kept.len())]));
            }
            picked
        };
        for (bucket, part) in [(&mut out.train, train), (&mut out.test, test)] {
            for &(item, label) in part {
                bucket.push(Instance { user_id: user, target: item_ref(item), history: history_for(item), label });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn all(d: &SplitDataset) -> impl Iterator<Item = &Instance> {
        d.train.iter().chain(&d.valid).chain(&d.test)
    }

    fn interested(i: &Instance) -> bool {
        item_group(i.target.item, 10) == user_group(i.user_id, 10)
    }

    #[test]
    fn user_group_example() {
        assert_eq!(user_group(17, 10), 7);
    }

    #[test]
    fn default_sizes() {
        let d = generate_synthetic(&SyntheticConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d.len(), 10_000);
        assert_eq!(all(&d).filter(|i| interested(i)).count(), 5_000);
        assert_eq!(d.train.len(), 9_000);
        assert_eq!(d.test.len(), 1_000);
        assert!(d.valid.is_empty());
    }

    #[test]
    fn observed_clicks_on_interested_items() {
        // Binomial(5000, 0.5): mean 2500, sd ~35.4
        let sd = (5000.0f64 * 0.25).sqrt();
        for seed in 0..5 {
            let d = generate_synthetic(&SyntheticConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let clicks = all(&d).filter(|i| interested(i) && i.label == 1).count() as f64;
            assert!((clicks - 2500.0).abs() <= 3.0 * sd, "seed {seed}: {clicks}");
        }
    }

    #[test]
    fn group_invariants_and_histories() {
        let d = generate_synthetic(&SyntheticConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut per_user = vec![Vec::new(); 100];
        for inst in all(&d) {
            per_user[inst.user_id].push(inst);
            assert_eq!(inst.target.category, item_group(inst.target.item, 10));
            assert!(!inst.history.is_empty());
            assert!(inst.history.iter().all(|h| h.item != inst.target.item));
        }
        for insts in per_user {
            assert_eq!(insts.len(), 100);
            let items: std::collections::HashSet<usize> = insts.iter().map(|i| i.target.item).collect();
            assert_eq!(items.len(), 100);
            assert_eq!(insts.iter().filter(|i| interested(i)).count(), 50);
            assert!(insts.iter().all(|i| i.history.len() == 16));
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SyntheticConfig { n_users: 10, ..Default::default() };
        let a = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn group_too_small_is_config_error() {
        let cfg = SyntheticConfig { n_items: 100, ..Default::default() };
        let err = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, DataError::Config(_)));
    }
}
