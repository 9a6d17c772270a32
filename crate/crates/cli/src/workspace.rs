//! Directory layout of a pipeline workspace.
//!
//! ```text
//! krill.toml
//! table.csv, boards/, masks/          inputs (or `krill synth` output)
//! manifest/                           `ingest`
//! models/                             `train-seg`, `train-est`
//! detections/                         `detect`
//! curated/{view}/{WxH}/               `curate`
//! reports/                            `evaluate`, `train-est`, `ladder`
//! annotations/                        annotation service
//! summaries/{command}.json            one per command run
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::config::{RunConfig, CONFIG_FILE};

pub const WORKSPACE_ENV: &str = "KRILL_WORKSPACE";

#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)
            .with_context(|| format!("creating workspace {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    /// `krill.toml` if present, defaults otherwise.
    pub fn config(&self) -> Result<RunConfig> {
        let p = self.config_path();
        if p.exists() {
            RunConfig::load(&p)
        } else {
            Ok(RunConfig::default())
        }
    }

    pub fn boards_dir(&self) -> PathBuf {
        self.root.join("boards")
    }

    pub fn masks_dir(&self) -> PathBuf {
        self.root.join("masks")
    }

    pub fn table_path(&self) -> PathBuf {
        self.root.join("table.csv")
    }

    pub fn manifest_dir(&self) -> PathBuf {
        self.root.join("manifest")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest_dir().join("manifest.csv")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn segmenter_path(&self) -> PathBuf {
        self.models_dir().join("segmenter.json")
    }

    pub fn split_path(&self) -> PathBuf {
        self.models_dir().join("split.json")
    }

    pub fn detections_dir(&self) -> PathBuf {
        self.root.join("detections")
    }

    pub fn curated_dir(&self) -> PathBuf {
        self.root.join("curated")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn annotations_dir(&self) -> PathBuf {
        self.root.join("annotations")
    }

    pub fn summaries_dir(&self) -> PathBuf {
        self.root.join("summaries")
    }

    pub fn relative<'a>(&self, p: &'a Path) -> &'a Path {
        p.strip_prefix(&self.root).unwrap_or(p)
    }
}

pub fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

/// Board image files in a directory, sorted.
pub fn list_images(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let ext = Path::new(&name)
            .extension()
            .map(|e| e.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if entry.file_type()?.is_file() && matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            out.push(name);
        }
    }
    out.sort();
    Ok(out)
}
