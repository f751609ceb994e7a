use std::fmt::Display;
use std::path::{Path, PathBuf};

use super::CliError;
use crate::config::{ReportFormat, RunConfig};
use crate::metawrapper::TrainConfig;

/// `<out>/<run-id>/`, created fresh.
#[derive(Clone, Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Fails when the directory exists and `force` is off; with `force` the
    /// old contents are removed first.
    pub fn create(root: &Path, id: &str, force: bool) -> Result<Self, CliError> {
        if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
            return Err(CliError::Usage(format!("invalid run id {id:?}")));
        }
        let path = root.join(id);
        if path.exists() {
            if !force {
                return Err(CliError::Usage(format!("{} already exists; pass --force to replace it", path.display())));
            }
            std::fs::remove_dir_all(&path)?;
        }
        std::fs::create_dir_all(&path)?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn subdir(&self, name: &str) -> Result<RunDir, CliError> {
        let path = self.path.join(name);
        std::fs::create_dir_all(&path)?;
        Ok(RunDir { path })
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        std::fs::write(self.path.join(name), bytes)?;
        Ok(())
    }
}

/// `meta_wrapper{mu=0.2;beta=0.01;n=1}` for methods with an outer term,
/// the bare method name otherwise.
pub fn method_label(tc: &TrainConfig) -> String {
    if tc.method.uses_outer() {
        format!("{}{{mu={};beta={};n={}}}", tc.method.name(), tc.mu, tc.beta, tc.n_inner)
    } else {
        tc.method.name().to_string()
    }
}

/// A label reduced to characters that are safe in a path.
pub(super) fn slug(label: &str) -> String {
    label
        .chars()
        .filter_map(|c| match c {
            '{' | '}' => None,
            ';' => Some('-'),
            '=' => Some('_'),
            c => Some(c),
        })
        .collect()
}

/// One line of `summary.csv`.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub seed: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl SummaryRow {
    pub fn new(method: &str, seed: impl Display, split: &str, metric: &str, value: f64) -> Self {
        Self { method: method.into(), seed: seed.to_string(), split: split.into(), metric: metric.into(), value }
    }
}

pub(super) fn write_summary(dir: &RunDir, cfg: &RunConfig, rows: &[SummaryRow]) -> Result<(), CliError> {
    if cfg.output.formats.contains(&ReportFormat::Csv) {
        let mut text = String::from("method,seed,split,metric,value\n");
        for r in rows {
            debug_assert!(![&r.method, &r.seed, &r.split, &r.metric].iter().any(|f| f.contains(',')));
            text.push_str(&format!("{},{},{},{},{}\n", r.method, r.seed, r.split, r.metric, r.value));
        }
        dir.write("summary.csv", text.as_bytes())?;
    }
    if cfg.output.formats.contains(&ReportFormat::Json) {
        dir.write("summary.json", serde_json::to_string_pretty(rows).expect("rows").as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metawrapper::Method;

    #[test]
    fn labels() {
        let tc = TrainConfig { mu: 0.2, beta: 0.01, n_inner: 1, ..Default::default() };
        assert_eq!(method_label(&tc), "meta_wrapper{mu=0.2;beta=0.01;n=1}");
        assert_eq!(slug(&method_label(&tc)), "meta_wrappermu_0.2-beta_0.01-n_1");
        assert_eq!(method_label(&TrainConfig { method: Method::AttentionOnly, ..tc }), "attention_only");
    }

    #[test]
    fn run_dir_needs_force() {
        let root = tempfile::tempdir().unwrap();
        let d = RunDir::create(root.path(), "a", false).unwrap();
        d.write("x", b"1").unwrap();
        assert!(matches!(RunDir::create(root.path(), "a", false), Err(CliError::Usage(_))));
        let d = RunDir::create(root.path(), "a", true).unwrap();
        assert!(!d.path().join("x").exists());
        assert!(RunDir::create(root.path(), "../up", true).is_err());
    }
}
