//! Run configuration: one TOML document with `dataset`, `model`, `train`,
//! `grid`, `ablate`, `bench` and `output` tables. Every key is optional;
//! `--set section.key=value` overrides are applied on top of the file.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    build_split, generate_synthetic, load_interactions, read_instances, DataError, SplitDataset, SyntheticConfig,
};
use crate::metawrapper::{Method, TrainConfig};
use crate::model::{ModelDims, Pooling, EMBEDDING_INIT};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("bad override {0:?}: expected section.key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// Raw `user, item, category, timestamp, behavior` log, split on load.
    #[default]
    Interactions,
    /// Pre-split instance file as written by `synth` and `prepare`.
    Instances,
}

/// Exactly one of `path` and `synthetic`; with neither, the default
/// synthetic benchmark is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub format: DatasetFormat,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    /// Seed for synthetic generation and negative sampling.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width.
    pub k: usize,
    pub hidden: [usize; 2],
    pub max_seq_len: usize,
    pub pooling: Pooling,
    /// Embedding entries start uniform in `+-embedding_init`.
    pub embedding_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 32,
            hidden: [80, 40],
            max_seq_len: 100,
            pooling: Pooling::WeightedSum,
            embedding_init: EMBEDDING_INIT,
        }
    }
}

/// Values swept by `train --grid`; every combination is one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub mu: Vec<f64>,
    pub beta: Vec<f64>,
    pub n_inner: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { mu: vec![0.2, 0.4, 0.6, 0.8], beta: vec![0.01], n_inner: vec![1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Empty means M1 through M4.
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { methods: Vec::new(), seeds: vec![0, 1, 2] }
    }
}

impl AblateConfig {
    pub fn methods(&self) -> Vec<Method> {
        if self.methods.is_empty() {
            vec![Method::AttentionOnly, Method::OuterTerm, Method::Gdmax, Method::MetaWrapper]
        } else {
            self.methods.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup: usize,
    pub steps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { warmup: 10, steps: 100 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Defaults to a name derived from the command, method and seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub formats: Vec<ReportFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs"), run_id: None, formats: vec![ReportFormat::Csv, ReportFormat::Json] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grid: GridConfig,
    pub ablate: AblateConfig,
    pub bench: BenchConfig,
    pub output: OutputConfig,
}

/// Set `path = value` inside a TOML table, creating intermediate tables.
/// The value is parsed as TOML and falls back to a bare string.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::Override(spec.to_string());
    let (path, raw) = spec.split_once('=').ok_or_else(bad)?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(bad());
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").ok_or_else(bad)?,
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = keys.split_last().ok_or_else(bad)?;
    let mut table = root;
    for key in parents {
        let entry = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(bad)?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file, then each override in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.into(), source })?;
                text.parse::<toml::Table>()?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The effective configuration as TOML; `from_toml` reads it back.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.effective()).expect("config serializes")
    }

    /// A copy with implicit defaults written out.
    pub fn effective(&self) -> RunConfig {
        let mut c = self.clone();
        if c.dataset.path.is_none() && c.dataset.synthetic.is_none() {
            c.dataset.synthetic = Some(SyntheticConfig::default());
        }
        if c.ablate.methods.is_empty() {
            c.ablate.methods = c.ablate.methods();
        }
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.dataset.path.is_some() && self.dataset.synthetic.is_some() {
            return bad("dataset: set either path or synthetic, not both");
        }
        if let Some(s) = &self.dataset.synthetic {
            s.validate()?;
            if s.history_len > self.model.max_seq_len {
                return bad("dataset.synthetic.history_len must not exceed model.max_seq_len");
            }
        }
        if self.model.k == 0 || self.model.hidden.contains(&0) || self.model.max_seq_len == 0 {
            return bad("model: k, hidden widths and max_seq_len must be positive");
        }
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.bench.steps == 0 {
            return bad("bench.steps must be positive");
        }
        Ok(())
    }

    /// `train` with the model's pooling mode and embedding scale filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { pooling: self.model.pooling, embedding_init: self.model.embedding_init, ..self.train.clone() }
    }

    /// Every grid point, varying only `mu`, `beta` and `n_inner`.
    pub fn grid_points(&self) -> Result<Vec<TrainConfig>, ConfigError> {
        let g = &self.grid;
        if g.mu.is_empty() || g.beta.is_empty() || g.n_inner.is_empty() {
            return Err(ConfigError::Invalid("grid lists must be non-empty for a sweep".into()));
        }
        let base = self.train_config();
        let mut out = Vec::new();
        for &mu in &g.mu {
            for &beta in &g.beta {
                for &n_inner in &g.n_inner {
                    let c = TrainConfig { mu, beta, n_inner, ..base.clone() };
                    c.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                    out.push(c);
                }
            }
        }
        Ok(out)
    }

    pub fn dims(&self, data: &SplitDataset) -> ModelDims {
        ModelDims { n_items: data.n_items, n_categories: data.n_categories, k: self.model.k, hidden: self.model.hidden }
    }

    pub fn load_dataset(&self) -> Result<SplitDataset, ConfigError> {
        let d = &self.dataset;
        match (&d.path, &self.effective().dataset.synthetic) {
            (Some(path), _) => match d.format {
                DatasetFormat::Interactions => {
                    let log = load_interactions(path)?;
                    if log.duplicates > 0 {
                        log::warn!("{}: dropped {} duplicate rows", path.display(), log.duplicates);
                    }
                    let split = build_split(&log, self.model.max_seq_len, d.seed);
                    if split.is_empty() {
                        log::warn!("{}: no user has enough clicks; dataset is empty", path.display());
                    }
                    Ok(split)
                }
                DatasetFormat::Instances => {
                    let f = std::fs::File::open(path).map_err(|source| ConfigError::Read { path: path.clone(), source })?;
                    Ok(read_instances(std::io::BufReader::new(f))?)
                }
            },
            (None, Some(s)) => Ok(generate_synthetic(s, &mut ChaCha8Rng::seed_from_u64(d.seed))?),
            (None, None) => unreachable!("effective config always names a source"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg.effective());
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn overrides_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\nmu = 0.4\nepochs = 3\n[train.lr]\nkind = \"constant\"\ngamma = 0.5\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &["train.mu=0.6".into(), "train.method=\"gdmax\"".into()]).unwrap();
        assert_eq!(cfg.train.mu, 0.6);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.method, Method::Gdmax);
        assert_eq!(cfg.train.lr, crate::metawrapper::LrSpec::Constant { gamma: 0.5 });
        // bare words are strings
        let cfg = RunConfig::load(None, &["train.method=base".into()]).unwrap();
        assert_eq!(cfg.train.method, Method::Base);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::from_toml("[train]\nnot_a_key = 1\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::load(None, &["nokey".into()]), Err(ConfigError::Override(_))));
        let both = "[dataset]\npath = \"x.tsv\"\n[dataset.synthetic]\nn_users = 10\n";
        assert!(matches!(RunConfig::from_toml(both), Err(ConfigError::Invalid(_))));
        assert!(RunConfig::from_toml("[train]\nmu = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[dataset.synthetic]\nn_groups = 0\n").is_err());
    }

    #[test]
    fn grid_is_cartesian() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.grid_points().unwrap().len(), 4);
        cfg.grid.beta = vec![0.001, 0.01];
        cfg.grid.n_inner = vec![1, 2, 3];
        let pts = cfg.grid_points().unwrap();
        assert_eq!(pts.len(), 24);
        assert!(pts.iter().all(|p| p.epochs == cfg.train.epochs));
        cfg.grid.mu.clear();
        assert!(cfg.grid_points().is_err());
    }

    #[test]
    fn ablation_defaults_to_four_variants() {
        let a = AblateConfig::default();
        assert_eq!(a.methods().len(), 4);
        assert!(!a.methods().contains(&Method::Base));
    }
}
