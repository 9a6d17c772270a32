//! Machine-readable record of one command run.
//!
//! Outputs are listed by workspace-relative path with their SHA-256. The
//! summary hash covers the command, the effective configuration, the output
//! hashes and the metrics, and nothing time-dependent, so a rerun with the
//! same inputs and seeds reproduces it exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::workspace::{ensure_dir, Workspace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub outputs: BTreeMap<String, String>,
    pub metrics: serde_json::Value,
    pub summary_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn collect_files(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_dir() {
        for entry in fs::read_dir(p).with_context(|| format!("reading {}", p.display()))? {
            collect_files(&entry?.path(), out)?;
        }
    } else if p.is_file() {
        out.push(p.to_path_buf());
    }
    Ok(())
}

pub struct SummaryBuilder<'a> {
    ws: &'a Workspace,
    command: String,
    config: serde_json::Value,
    config_hash: String,
    outputs: BTreeMap<String, String>,
    metrics: serde_json::Map<String, serde_json::Value>,
}

impl<'a> SummaryBuilder<'a> {
    pub fn new(ws: &'a Workspace, command: &str, cfg: &RunConfig) -> Result<Self> {
        let config = serde_json::to_value(cfg)?;
        let config_hash = sha256_hex(cfg.to_toml()?.as_bytes());
        Ok(Self {
            ws,
            command: command.to_string(),
            config,
            config_hash,
            outputs: BTreeMap::new(),
            metrics: serde_json::Map::new(),
        })
    }

    /// Hash a file, or every file under a directory.
    pub fn output(&mut self, path: &Path) -> Result<&mut Self> {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        for f in files {
            let rel = self.ws.relative(&f).to_string_lossy().replace('\\', "/");
            self.outputs.insert(rel, hash_file(&f)?);
        }
        Ok(self)
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) -> Result<&mut Self> {
        self.metrics
            .insert(key.to_string(), serde_json::to_value(value)?);
        Ok(self)
    }

    /// Seal the summary and write `summaries/{command}.json`.
    pub fn finish(self) -> Result<Summary> {
        let metrics = serde_json::Value::Object(self.metrics);
        let body = serde_json::json!({
            "command": self.command,
            "config_hash": self.config_hash,
            "outputs": self.outputs,
            "metrics": metrics,
        });
        let summary = Summary {
            summary_hash: sha256_hex(serde_json::to_string(&body)?.as_bytes()),
            command: self.command,
            config: self.config,
            config_hash: self.config_hash,
            outputs: self.outputs,
            metrics,
        };
        let dir = self.ws.summaries_dir();
        ensure_dir(&dir)?;
        let path = dir.join(format!("{}.json", summary.command));
        fs::write(&path, serde_json::to_string_pretty(&summary)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_write_order() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        fs::write(dir.path().join("a.txt"), "a").unwrap();
        fs::write(dir.path().join("b.txt"), "b").unwrap();
        let cfg = RunConfig::default();

        let mut s1 = SummaryBuilder::new(&ws, "t", &cfg).unwrap();
        s1.output(&dir.path().join("a.txt")).unwrap();
        s1.output(&dir.path().join("b.txt")).unwrap();
        let h1 = s1.finish().unwrap().summary_hash;

        let mut s2 = SummaryBuilder::new(&ws, "t", &cfg).unwrap();
        s2.output(&dir.path().join("b.txt")).unwrap();
        s2.output(&dir.path().join("a.txt")).unwrap();
        assert_eq!(s2.finish().unwrap().summary_hash, h1);

        fs::write(dir.path().join("a.txt"), "changed").unwrap();
        let mut s3 = SummaryBuilder::new(&ws, "t", &cfg).unwrap();
        s3.output(&dir.path().join("a.txt")).unwrap();
        s3.output(&dir.path().join("b.txt")).unwrap();
        assert_ne!(s3.finish().unwrap().summary_hash, h1);
    }
}
