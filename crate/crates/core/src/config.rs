//! Experiment configuration: JSON with a strict schema. Unknown keys are
//! errors, relative dataset paths resolve against the config file's
//! directory, and environment variables are never consulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SplitSpec;
use crate::layers::{Arithmetic, LayerKind, TaskHead};
use crate::pruning::PruneConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Node,
    Link,
    Graph,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Node => "node",
            TaskKind::Link => "link",
            TaskKind::Graph => "graph",
        }
    }

    pub fn head(&self) -> TaskHead {
        match self {
            TaskKind::Node => TaskHead::NodeClassify,
            TaskKind::Link => TaskHead::LinkDecode,
            TaskKind::Graph => TaskHead::GraphClassify,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Dataset name used in result rows; defaults to a file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Graph-classification manifest (mutually exclusive with the file
    /// triple).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: LayerKind,
    pub arithmetic: Arithmetic,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
}

fn default_hidden() -> usize {
    128
}

fn default_heads() -> usize {
    1
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            weight_decay: 5e-4,
            dropout: 0.6,
            max_epochs: 1000,
            patience: 200,
        }
    }
}

impl TrainSettings {
    pub fn to_train_config(self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
            max_epochs: self.max_epochs,
            patience: self.patience,
            adam: Default::default(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SplitConfig {
    pub fn to_spec(self) -> Result<SplitSpec> {
        SplitSpec::new(self.train, self.val, self.test, self.seed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub task: TaskKind,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSettings,
    pub split: SplitConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneConfig>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub out_dir: PathBuf,
    #[serde(default = "default_batch")]
    pub graph_batch_size: usize,
}

fn default_workers() -> usize {
    1
}

fn default_batch() -> usize {
    crate::train::DEFAULT_GRAPH_BATCH
}

impl ExperimentConfig {
    /// Resolve relative paths against the config file's directory.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&path);
                }
            }
        };
        fix(&mut self.dataset.edges);
        fix(&mut self.dataset.features);
        fix(&mut self.dataset.labels);
        fix(&mut self.dataset.manifest);
        if self.out_dir.is_relative() {
            self.out_dir = base.join(&self.out_dir);
        }
    }

    pub fn dataset_name(&self) -> String {
        if let Some(name) = &self.dataset.name {
            return name.clone();
        }
        let source = self
            .dataset
            .manifest
            .as_ref()
            .or(self.dataset.edges.as_ref());
        source
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string())
    }

    pub fn validate(&self) -> Result<()> {
        match self.task {
            TaskKind::Node | TaskKind::Link => {
                for (field, path) in [
                    ("dataset.edges", &self.dataset.edges),
                    ("dataset.features", &self.dataset.features),
                    ("dataset.labels", &self.dataset.labels),
                ] {
                    let Some(path) = path else {
                        return Err(Error::Config(format!(
                            "{field} is required for {} tasks",
                            self.task.as_str()
                        )));
                    };
                    if !path.exists() {
                        return Err(Error::Config(format!(
                            "{field} does not exist: {}",
                            path.display()
                        )));
                    }
                }
                if self.dataset.manifest.is_some() {
                    return Err(Error::Config(
                        "dataset.manifest is for graph tasks only".into(),
                    ));
                }
            }
            TaskKind::Graph => {
                let Some(manifest) = &self.dataset.manifest else {
                    return Err(Error::Config(
                        "dataset.manifest is required for graph tasks".into(),
                    ));
                };
                if !manifest.exists() {
                    return Err(Error::Config(format!(
                        "dataset.manifest does not exist: {}",
                        manifest.display()
                    )));
                }
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.model.hidden == 0 {
            return Err(Error::Config("model.hidden must be positive".into()));
        }
        if self.model.heads == 0 {
            return Err(Error::Config("model.heads must be at least 1".into()));
        }
        if self.model.arithmetic == Arithmetic::Quaternion {
            let per_head = self.model.hidden.checked_div(self.model.heads).unwrap_or(0);
            if self.model.hidden % 4 != 0
                || (self.model.kind == LayerKind::Gat
                    && (self.model.hidden % self.model.heads != 0 || per_head % 4 != 0))
            {
                return Err(Error::Config(format!(
                    "quaternion arithmetic needs hidden width divisible by 4 (per head), got {} with {} heads",
                    self.model.hidden, self.model.heads
                )));
            }
        }
        self.split
            .to_spec()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.train
            .to_train_config(0)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(prune) = &self.prune {
            prune.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.graph_batch_size == 0 {
            return Err(Error::Config("graph_batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Parse and validate a config file. Schema violations (including
/// unknown fields, which the error names) come back as config errors.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{e}")))?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.resolve_paths(base);
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize_citation, write_node_dataset, CitationSpec};
    use std::fs;
    use tempfile::TempDir;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("config.json");
        fs::write(&path, body).unwrap();
        path
    }

    fn dataset_in(dir: &Path) -> (String, String, String) {
        let g = synthesize_citation(&CitationSpec::small(1)).unwrap();
        let (e, f, l) = write_node_dataset(&g, dir, "toy").unwrap();
        (
            e.file_name().unwrap().to_string_lossy().into_owned(),
            f.file_name().unwrap().to_string_lossy().into_owned(),
            l.file_name().unwrap().to_string_lossy().into_owned(),
        )
    }

    #[test]
    fn minimal_config_parses_and_resolves_relative_paths() {
        let dir = TempDir::new().unwrap();
        let (e, f, l) = dataset_in(dir.path());
        let body = format!(
            r#"{{
  "dataset": {{"edges": "{e}", "features": "{f}", "labels": "{l}"}},
  "task": "node",
  "model": {{"kind": "gcn", "arithmetic": "real", "hidden": 16}},
  "split": {{"train": 0.8, "val": 0.1, "test": 0.1, "seed": 0}},
  "seeds": [1, 2],
  "out_dir": "out"
}}"#
        );
        let path = write_config(dir.path(), &body);
        let cfg = load_config(&path).unwrap();
        assert!(cfg.dataset.edges.as_ref().unwrap().is_absolute());
        assert_eq!(cfg.dataset_name(), "toy_edges");
        assert_eq!(cfg.train.max_epochs, 1000);
        assert_eq!(cfg.workers, 1);
    }

    #[test]
    fn unknown_field_is_rejected_by_name() {
        let dir = TempDir::new().unwrap();
        let (e, f, l) = dataset_in(dir.path());
        let body = format!(
            r#"{{
  "dataset": {{"edges": "{e}", "features": "{f}", "labels": "{l}"}},
  "task": "node",
  "model": {{"kind": "gcn", "arithmetic": "real"}},
  "split": {{"train": 0.8, "val": 0.1, "test": 0.1}},
  "seeds": [1],
  "out_dir": "out",
  "learning_rte": 0.01
}}"#
        );
        let path = write_config(dir.path(), &body);
        let err = load_config(&path).unwrap_err().to_string();
        assert!(err.contains("learning_rte"), "{err}");
    }

    #[test]
    fn missing_dataset_path_is_a_config_error() {
        let dir = TempDir::new().unwrap();
        let body = r#"{
  "dataset": {"edges": "missing.tsv", "features": "missing.csv", "labels": "missing.txt"},
  "task": "node",
  "model": {"kind": "gcn", "arithmetic": "real"},
  "split": {"train": 0.8, "val": 0.1, "test": 0.1},
  "seeds": [1],
  "out_dir": "out"
}"#;
        let path = write_config(dir.path(), body);
        let err = load_config(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn quaternion_width_divisibility_is_enforced() {
        let dir = TempDir::new().unwrap();
        let (e, f, l) = dataset_in(dir.path());
        let body = format!(
            r#"{{
  "dataset": {{"edges": "{e}", "features": "{f}", "labels": "{l}"}},
  "task": "node",
  "model": {{"kind": "gcn", "arithmetic": "quaternion", "hidden": 30}},
  "split": {{"train": 0.8, "val": 0.1, "test": 0.1}},
  "seeds": [1],
  "out_dir": "out"
}}"#
        );
        let path = write_config(dir.path(), &body);
        let err = load_config(&path).unwrap_err().to_string();
        assert!(err.contains("divisible by 4"), "{err}");
    }
}
