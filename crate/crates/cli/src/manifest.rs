//! Run manifests written next to every artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bitctx_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Everything needed to reproduce an artifact. No timestamps, so reruns
/// produce byte-identical files.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Generator behind every random draw.
    pub rng: String,
    pub config_sha256: String,
    pub artifact: String,
    pub artifact_sha256: String,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.toml");
    artifact.with_file_name(name)
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: &str) -> Self {
        Self {
            tool: "bitctx".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            rng: "ChaCha8".into(),
            config_sha256: sha256_hex(config.as_bytes()),
            ..Default::default()
        }
    }

    pub fn detail(mut self, key: &str, value: impl ToString) -> Self {
        self.details.insert(key.into(), value.to_string());
        self
    }

    /// Writes `bytes` to `artifact` and the manifest beside it.
    pub fn write_with(mut self, artifact: &Path, bytes: &[u8]) -> Result<()> {
        std::fs::write(artifact, bytes).map_err(|e| Error::Io {
            path: artifact.into(),
            source: e,
        })?;
        self.artifact = artifact
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.artifact_sha256 = sha256_hex(bytes);
        let text = toml::to_string(&self).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let path = manifest_path(artifact);
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
    }
}
