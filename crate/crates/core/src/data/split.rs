use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::load::item_categories;
use super::{Behavior, Instance, Interactions, ItemRef, SplitDataset};

/// Per user: the last click becomes the test positive, the second-to-last
/// the validation positive, and every earlier click after the first a
/// training positive. Each positive is paired with a negative that swaps the
/// target for an item the user never clicked.
///
/// Users with fewer than three clicks are dropped. Histories hold only
/// clicks strictly earlier than the target and never the target item itself;
/// they keep the most recent `max_seq_len` entries.
pub fn build_split(data: &Interactions, max_seq_len: usize, seed: u64) -> SplitDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let categories = item_categories(data);
    let n_items = data.n_items();
    let mut out = SplitDataset {
        n_users: data.n_users(),
        n_items,
        n_categories: data.n_categories(),
        ..Default::default()
    };
    let mut dropped_users = 0usize;
    let mut skipped = 0usize;

    let records = &data.records;
    let mut start = 0;
    while start < records.len() {
        let user = records[start].user_id;
        let end = start + records[start..].iter().take_while(|r| r.user_id == user).count();
        let clicks: Vec<_> = records[start..end].iter().filter(|r| r.behavior == Behavior::Click).collect();
        start = end;

        if clicks.len() < 3 {
            dropped_users += 1;
            continue;
        }
        let clicked: HashSet<usize> = clicks.iter().map(|r| r.item_id).collect();
        if clicked.len() >= n_items {
            dropped_users += 1;
            continue;
        }

        let n = clicks.len();
        let mut emit = |pos: usize, bucket: &mut Vec<Instance>, rng: &mut ChaCha8Rng| {
            let target = clicks[pos];
            let history: Vec<ItemRef> = clicks[..pos]
                .iter()
                .filter(|r| r.timestamp < target.timestamp && r.item_id != target.item_id)
                .map(|r| ItemRef { item: r.item_id, category: r.category_id })
                .collect();
            if history.is_empty() {
                skipped += 1;
                return;
            }
            let history = history[history.len().saturating_sub(max_seq_len)..].to_vec();
            let negative = loop {
                let j = rng.gen_range(0..n_items);
                if !clicked.contains(&j) {
                    break j;
                }
            };
            bucket.push(Instance {
                user_id: user,
                target: ItemRef { item: target.item_id, category: target.category_id },
                history: history.clone(),
                label: 1,
            });
            bucket.push(Instance {
                user_id: user,
                target: ItemRef { item: negative, category: categories[negative] },
                history,
                label: 0,
            });
        };
        for pos in 1..n - 2 {
            emit(pos, &mut out.train, &mut rng);
        }
        emit(n - 2, &mut out.valid, &mut rng);
        emit(n - 1, &mut out.test, &mut rng);
    }

    if dropped_users > 0 {
        log::info!("dropped {dropped_users} users with fewer than 3 clicks or no unclicked items");
    }
    if skipped > 0 {
        log::info!("skipped {skipped} positives with no strictly earlier history");
    }
    if out.is_empty() {
        log::warn!("split produced no instances");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_interactions;

    fn log_with(rows: &[(u64, u64, u64, i64)]) -> Interactions {
        let mut s = String::new();
        for (u, i, c, t) in rows {
            s.push_str(&format!("{u}\t{i}\t{c}\t{t}\tclick\n"));
        }
        // extra items so negatives exist
        for i in 0..20 {
            s.push_str(&format!("999\t{}\t9\t0\tother\n", 1000 + i));
        }
        parse_interactions(s.as_bytes()).unwrap()
    }

    fn items(data: &Interactions, raw: &[u64]) -> Vec<usize> {
        raw.iter().map(|r| data.vocab.items[r]).collect()
    }

    #[test]
    fn five_behaviors_split_by_recency() {
        // a..e = items 1..5 at times 10..50
        let data = log_with(&[(1, 1, 0, 10), (1, 2, 0, 20), (1, 3, 0, 30), (1, 4, 0, 40), (1, 5, 0, 50)]);
        let split = build_split(&data, 100, 3);
        let pos = |v: &[Instance]| -> Vec<(usize, Vec<usize>)> {
            v.iter()
                .filter(|i| i.label == 1)
                .map(|i| (i.target.item, i.history.iter().map(|h| h.item).collect()))
                .collect()
        };
        let id = |raw: u64| data.vocab.items[&raw];
        assert_eq!(pos(&split.test), vec![(id(5), items(&data, &[1, 2, 3, 4]))]);
        assert_eq!(pos(&split.valid), vec![(id(4), items(&data, &[1, 2, 3]))]);
        assert_eq!(
            pos(&split.train),
            vec![(id(2), items(&data, &[1])), (id(3), items(&data, &[1, 2]))]
        );
        // one negative per positive
        for set in [&split.train, &split.valid, &split.test] {
            let p = set.iter().filter(|i| i.label == 1).count();
            assert_eq!(set.len(), 2 * p);
        }
    }

    #[test]
    fn short_users_are_dropped() {
        let data = log_with(&[(1, 1, 0, 10), (1, 2, 0, 20)]);
        let split = build_split(&data, 100, 0);
        assert!(split.is_empty());
    }

    #[test]
    fn history_is_truncated_to_most_recent() {
        let rows: Vec<_> = (0..8).map(|i| (1u64, i as u64 + 1, 0u64, i as i64)).collect();
        let data = log_with(&rows);
        let split = build_split(&data, 3, 0);
        let test_pos = split.test.iter().find(|i| i.label == 1).unwrap();
        assert_eq!(test_pos.history.iter().map(|h| h.item).collect::<Vec<_>>(), items(&data, &[5, 6, 7]));
    }

    #[test]
    fn negatives_avoid_clicked_items() {
        // three users over a small catalog, many samples
        let mut rows = Vec::new();
        for u in 0..3u64 {
            for t in 0..40i64 {
                rows.push((u, (u * 7 + t as u64) % 25, 0, t));
            }
        }
        let data = log_with(&rows);
        let mut checked = 0;
        for seed in 0..100 {
            let split = build_split(&data, 100, seed);
            for inst in split.train.iter().chain(&split.valid).chain(&split.test) {
                if inst.label == 0 {
                    let clicked: HashSet<usize> = data
                        .records
                        .iter()
                        .filter(|r| r.user_id == inst.user_id && r.behavior == Behavior::Click)
                        .map(|r| r.item_id)
                        .collect();
                    assert!(!clicked.contains(&inst.target.item));
                    checked += 1;
                }
            }
        }
        assert!(checked >= 10_000, "only {checked} negatives checked");
    }

    #[test]
    fn history_precedes_target_in_time() {
        // timestamp ties: items 2 and 3 share t=20
        let data = log_with(&[(1, 1, 0, 10), (1, 2, 0, 20), (1, 3, 0, 20), (1, 4, 0, 30), (1, 5, 0, 40)]);
        let split = build_split(&data, 100, 1);
        let lookup_time = |item: usize| data.records.iter().find(|r| r.item_id == item && r.user_id == 0).unwrap().timestamp;
        for inst in split.train.iter().chain(&split.valid).chain(&split.test).filter(|i| i.label == 1) {
            let t = lookup_time(inst.target.item);
            assert!(inst.history.iter().all(|h| lookup_time(h.item) < t));
            assert!(inst.history.iter().all(|h| h.item != inst.target.item));
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let data = log_with(&[(1, 1, 0, 10), (1, 2, 0, 20), (1, 3, 0, 30), (1, 4, 0, 40)]);
        assert_eq!(build_split(&data, 10, 5), build_split(&data, 10, 5));
    }
}
