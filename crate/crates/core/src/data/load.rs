use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Behavior, DataError, InteractionRecord};

/// Original id -> dense id, per id space.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub users: BTreeMap<u64, usize>,
    pub items: BTreeMap<u64, usize>,
    pub categories: BTreeMap<u64, usize>,
}

impl Vocab {
    fn intern(map: &mut BTreeMap<u64, usize>, raw: u64) -> usize {
        let next = map.len();
        *map.entry(raw).or_insert(next)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Interactions {
    /// Sorted by `(user, timestamp, item)`.
    pub records: Vec<InteractionRecord>,
    pub vocab: Vocab,
    /// Rows dropped because `(user, item, timestamp)` repeated.
    pub duplicates: usize,
}

impl Interactions {
    pub fn n_users(&self) -> usize {
        self.vocab.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.vocab.items.len()
    }

    pub fn n_categories(&self) -> usize {
        self.vocab.categories.len()
    }
}

pub fn load_interactions(path: impl AsRef<Path>) -> Result<Interactions, DataError> {
    let file = std::fs::File::open(path)?;
    parse_interactions(std::io::BufReader::new(file))
}

/// Parse `user_id<TAB>item_id<TAB>category_id<TAB>timestamp<TAB>behavior`
/// rows. A leading header row is skipped. Ids are re-indexed densely in
/// order of first appearance.
pub fn parse_interactions(reader: impl BufRead) -> Result<Interactions, DataError> {
    let mut vocab = Vocab::default();
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut duplicates = 0;
    let mut first_row = true;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if std::mem::take(&mut first_row) && fields[0].eq_ignore_ascii_case("user_id") {
            continue;
        }
        if fields.len() != 5 {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("expected 5 tab-separated columns, found {}", fields.len()),
            });
        }
        let id = |col: usize, name: &str| -> Result<u64, DataError> {
            fields[col].parse::<u64>().map_err(|_| DataError::Parse {
                line: line_no,
                message: format!("{name} is not a non-negative integer: {:?}", fields[col]),
            })
        };
        let user = id(0, "user_id")?;
        let item = id(1, "item_id")?;
        let category = id(2, "category_id")?;
        let timestamp = fields[3].parse::<i64>().map_err(|_| DataError::Parse {
            line: line_no,
            message: format!("timestamp is not an integer: {:?}", fields[3]),
        })?;
        let behavior = if fields[4].eq_ignore_ascii_case("click") { Behavior::Click } else { Behavior::Other };

        if !seen.insert((user, item, timestamp)) {
            duplicates += 1;
            continue;
        }
        let record = InteractionRecord {
            user_id: Vocab::intern(&mut vocab.users, user),
            item_id: Vocab::intern(&mut vocab.items, item),
            category_id: Vocab::intern(&mut vocab.categories, category),
            timestamp,
            behavior,
        };
        records.push((item, record));
    }
    if duplicates > 0 {
        log::warn!("dropped {duplicates} duplicate (user, item, timestamp) rows");
    }
    // ties in time resolve by the original item id
    records.sort_by_key(|(raw_item, r)| (r.user_id, r.timestamp, *raw_item));
    let records = records.into_iter().map(|(_, r)| r).collect();
    Ok(Interactions { records, vocab, duplicates })
}

/// Category of every item, taken from the first record that mentions it.
pub(super) fn item_categories(interactions: &Interactions) -> Vec<usize> {
    let mut cats: HashMap<usize, usize> = HashMap::new();
    for r in &interactions.records {
        cats.entry(r.item_id).or_insert(r.category_id);
    }
    (0..interactions.n_items()).map(|i| cats.get(&i).copied().unwrap_or(0)).collect()
}
