//! Interaction logs, temporal splits, negative sampling, in/out-of-bag task
//! streams and the noisy synthetic benchmark.

mod instances;
mod load;
mod split;
mod synthetic;
mod tasks;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use instances::{read_instances, write_instances};
pub use load::{load_interactions, parse_interactions, Interactions, Vocab};
pub use split::build_split;
pub use synthetic::{generate_synthetic, item_group, user_group, SyntheticConfig};
pub use tasks::{make_tasks, partition_sizes, TaskBatch};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Click,
    Other,
}

/// One row of an interaction log, with ids already densely re-indexed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user_id: usize,
    pub item_id: usize,
    pub category_id: usize,
    pub timestamp: i64,
    pub behavior: Behavior,
}

/// An `(item, category)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItemRef {
    pub item: usize,
    pub category: usize,
}

/// A labeled example: user, target item and the behavior history that
/// precedes it, oldest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub user_id: usize,
    pub target: ItemRef,
    pub history: Vec<ItemRef>,
    pub label: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<Instance>,
    pub valid: Vec<Instance>,
    pub test: Vec<Instance>,
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
}

impl SplitDataset {
    pub fn split(&self, name: Split) -> &[Instance] {
        match name {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}
