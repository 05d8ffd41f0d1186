//! Run configuration: a JSON file, patched by command-line overrides
//! before it is deserialized and validated.

use std::path::{Path, PathBuf};

use docgat::embedding::{EmbeddingProvider, PrecomputedProvider, StubProvider};
use docgat::error::{Error, Result};
use docgat::heads::{Task, DEFAULT_BACKGROUND};
use docgat::io::synthetic::SyntheticSpec;
use docgat::model::ModelConfig;
use docgat::optim::OptimizerConfig;
use docgat::pretrain::MsmConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProviderConfig {
    /// Hash-seeded features; needs no external files.
    Stub {
        #[serde(default)]
        seed: u64,
    },
    /// Per-document feature containers in `dir`.
    Precomputed { dir: PathBuf },
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Stub { seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub msm: MsmConfig,
    pub steps: usize,
    /// Documents per optimizer step, cycled in corpus order.
    pub batch_size: usize,
    /// JSON-lines corpus. Exactly one of `corpus` and `synthetic` is set.
    pub corpus: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    pub provider: ProviderConfig,
    pub task: Task,
    /// Checkpoint to start from (pretrain, finetune) or to read (eval,
    /// inspect-graph).
    pub checkpoint: Option<PathBuf>,
    /// Entity label excluded from micro F1.
    pub background_label: Option<String>,
    pub doc_id: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            msm: MsmConfig::default(),
            steps: 300,
            batch_size: 8,
            corpus: None,
            synthetic: None,
            provider: ProviderConfig::default(),
            task: Task::Entity,
            checkpoint: None,
            background_label: Some(DEFAULT_BACKGROUND.to_owned()),
            doc_id: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.msm.policy.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        match (&self.corpus, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::Config("set only one of `corpus` and `synthetic`".into())),
            (None, None) => Err(Error::Config("no corpus: set `corpus` or `synthetic`".into())),
            _ => Ok(()),
        }
    }

    pub fn provider(&self) -> Box<dyn EmbeddingProvider> {
        let (t, v) = (self.model.text_dim, self.model.visual_dim);
        match &self.provider {
            ProviderConfig::Stub { seed } => Box::new(StubProvider {
                text_dim: t,
                visual_dim: v,
                seed: *seed,
            }),
            ProviderConfig::Precomputed { dir } => Box::new(PrecomputedProvider::new(dir.clone(), t, v)),
        }
    }
}

/// Parses `raw` as a scalar JSON value where possible and falls back to a
/// plain string, so `--set model.encoder.top_k=8` and `--set task=entity`
/// both work.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

/// Sets the dotted `path` inside `root`, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad key path `{path}`")));
    }
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(Error::Config(format!("`{}` is not an object", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            map.insert((*part).to_owned(), value);
            return Ok(());
        }
        cur = map.entry((*part).to_owned()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one part")
}

/// Applies `key.path=value` assignments in order.
pub fn apply_assignments(root: &mut Value, assignments: &[String]) -> Result<()> {
    for a in assignments {
        let (k, v) = a
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{a}` is not key=value")))?;
        set_path(root, k.trim(), override_value(v.trim()))?;
    }
    Ok(())
}

pub fn read_config_value(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Default::default()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(Error::Config(format!("{}: top level must be an object", path.display())));
    }
    Ok(v)
}

pub fn resolve(value: Value) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_follow_key_paths() {
        let mut v = json!({"model": {"encoder": {"top_k": 4}}, "synthetic": {"docs": 2, "regions_per_doc": 3, "classes": 2, "seed": 1}});
        apply_assignments(&mut v, &["model.encoder.top_k=9".into(), "task=docclass".into(), "seed=5".into()]).unwrap();
        let cfg = resolve(v).unwrap();
        assert_eq!(cfg.model.encoder.top_k, 9);
        assert_eq!(cfg.task, Task::DocClass);
        assert_eq!(cfg.seed, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let v = json!({"synthetic": {"docs": 1, "regions_per_doc": 1, "classes": 1, "seed": 0}, "learning_rate": 1.0});
        assert!(matches!(resolve(v), Err(Error::Config(_))));
        let v = json!({"synthetic": {"docs": 1, "regions_per_doc": 1, "classes": 1, "seed": 0}, "model": {"encoder": {"topk": 3}}});
        assert!(matches!(resolve(v), Err(Error::Config(_))));
    }

    #[test]
    fn exactly_one_corpus_source() {
        assert!(resolve(json!({})).is_err());
        let both = json!({"corpus": "a.jsonl", "synthetic": {"docs": 1, "regions_per_doc": 1, "classes": 1, "seed": 0}});
        assert!(resolve(both).is_err());
    }

    #[test]
    fn provider_variants() {
        let v = json!({"corpus": "a", "provider": {"kind": "precomputed", "dir": "feat"}});
        assert_eq!(resolve(v).unwrap().provider, ProviderConfig::Precomputed { dir: "feat".into() });
        let v = json!({"corpus": "a", "provider": {"kind": "stub", "seed": 3, "extra": 1}});
        assert!(resolve(v).is_err());
    }
}
