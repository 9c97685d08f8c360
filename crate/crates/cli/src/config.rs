//! Run configuration: a TOML file plus `key=value` overrides.
//!
//! ```toml
//! [model]
//! preset = "desk-tiny"      # or: spec = "net.toml"
//! attach_dynamic = false    # fine-tune zero-initialized dynamic embeddings
//!
//! [train]
//! step = 1
//! iterations = 300
//! learning_rate = 2e-3
//! weight_decay = 1e-5
//! dataset = "synthetic:5000"
//!
//! init = "step1.bctx"       # step 2 and dynamic fine-tuning start here
//! ```

use std::path::{Path, PathBuf};

use bitctx_core::network::preset;
use bitctx_core::train::TrainConfig;
use bitctx_core::{Error, NetworkSpec, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_preset")]
    pub preset: String,
    /// Spec file; wins over `preset` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
    #[serde(default)]
    pub attach_dynamic: bool,
}

fn default_preset() -> String {
    "desk-tiny".into()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: default_preset(),
            spec: None,
            attach_dynamic: false,
        }
    }
}

impl ModelConfig {
    pub fn resolve(&self) -> Result<NetworkSpec> {
        match &self.spec {
            Some(p) => read_spec(p),
            None => preset(&self.preset),
        }
    }
}

fn default_train() -> TrainConfig {
    TrainConfig::step1(300)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: default_train(),
            init: None,
        }
    }
}

pub fn read_spec(path: &Path) -> Result<NetworkSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    NetworkSpec::from_toml(&text)
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `a.b.c=value` to a table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item.split_once('=').ok_or_else(|| Error::Config {
        path: item.into(),
        message: "override must look like key=value".into(),
    })?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config {
            path: key.into(),
            message: "empty key segment".into(),
        });
    }
    let mut cur = table;
    for (i, p) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config {
            path: parts[..=i].join("."),
            message: "not a table".into(),
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Fills missing keys from the defaults of the requested step.
fn with_defaults(user: toml::Table) -> Result<toml::Table> {
    let step2 = user
        .get("train")
        .and_then(|t| t.get("step"))
        .and_then(|v| v.as_integer())
        == Some(2);
    let defaults = RunConfig {
        train: if step2 { TrainConfig::step2(300) } else { default_train() },
        ..RunConfig::default()
    };
    let mut base = toml::Table::try_from(&defaults).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    merge(&mut base, user);
    Ok(base)
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Reads the optional config file, applies overrides and validates the
/// schema. Unknown keys are rejected with their path.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.into(),
                source: e,
            })?;
            text.parse::<toml::Table>().map_err(|e| Error::Config {
                path: p.display().to_string(),
                message: e.message().to_string(),
            })?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let table = with_defaults(table)?;
    let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config {
        path: e.path().to_string(),
        message: e.inner().message().to_string(),
    })?;
    cfg.train.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_take_precedence() {
        let cfg = load(None, &["train.iterations=7".into(), "train.dataset=synthetic:40".into()]).unwrap();
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.train.dataset, "synthetic:40");
        assert_eq!(cfg.model.preset, "desk-tiny");
        let cfg = load(None, &["train.step=2".into()]).unwrap();
        assert_eq!(cfg.train, TrainConfig::step2(300));
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let err = load(None, &["train.iteratons=7".into()]).unwrap_err();
        match err {
            Error::Config { path, .. } => assert!(path.starts_with("train"), "{path}"),
            e => panic!("{e}"),
        }
        assert!(load(None, &["nonsense".into()]).is_err());
    }

    #[test]
    fn type_errors_report_their_path() {
        let err = load(None, &["train.batch_size=\"big\"".into()]).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "train.batch_size"), "{err}");
    }
}
