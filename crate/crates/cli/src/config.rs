//! `krill.toml`: every module's settings in one declarative file.
//!
//! All sections are optional; missing keys take the defaults below.
//!
//! ```toml
//! seed = 7
//! threads = 1
//!
//! [taxonomy]
//! included = ["J", "FS1", "MS1", "MS2", "MS3", "MA1", "MA2"]
//! excluded = ["M1", "A2", "U"]
//! min_class_count = 101
//!
//! [synth]            # krill_core::synth::SynthConfig
//! [segmentation]     # krill_core::segmentation::SegTrainConfig
//! [detection]
//! score_threshold = 0.5
//! [bootstrap]
//! tolerance = 30.0
//! [curation]
//! resolutions = ["340x100"]
//! [estimation]       # krill_core::estimation::LadderConfig
//! [service]
//! bind = "127.0.0.1:8080"
//! ```

use std::path::Path;

use anyhow::{Context, Result};
use krill_core::curation::{CropSpec, Resolution, DEFAULT_LADDER};
use krill_core::estimation::LadderConfig;
use krill_core::segmentation::SegTrainConfig;
use krill_core::synth::{SynthConfig, DEFAULT_BG};
use krill_core::Taxonomy;
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "krill.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Seed for splits and training. Synthetic generation has its own.
    pub seed: u64,
    /// Worker threads available to a job. Training is single-threaded.
    pub threads: usize,
    pub taxonomy: Taxonomy,
    pub synth: SynthConfig,
    pub segmentation: SegTrainConfig,
    pub detection: DetectionConfig,
    pub bootstrap: BootstrapConfig,
    pub curation: CurationConfig,
    pub estimation: LadderConfig,
    pub service: ServiceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            threads: 1,
            taxonomy: Taxonomy::default(),
            synth: SynthConfig::default(),
            segmentation: SegTrainConfig::default(),
            detection: DetectionConfig::default(),
            bootstrap: BootstrapConfig::default(),
            curation: CurationConfig::default(),
            estimation: LadderConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub score_threshold: f32,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub background: [u8; 3],
    /// Euclidean RGB distance from the background that counts as specimen.
    pub tolerance: f32,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            background: DEFAULT_BG,
            tolerance: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub crop: CropSpec,
    pub resolutions: Vec<Resolution>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            crop: CropSpec::default(),
            resolutions: DEFAULT_LADDER.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    /// Bearer token required on every request when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    /// Downscale factor for board previews.
    pub preview_scale: f32,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            token: None,
            preview_scale: 0.25,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use krill_core::segmentation::SplitPolicy;

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.segmentation.split = SplitPolicy::LeaveOneCruiseOut("JR280".into());
        cfg.service.token = Some("t".into());
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 3\n[segmentation]\nepochs = 4\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.segmentation.epochs, 4);
        assert_eq!(
            cfg.segmentation.learning_rate,
            SegTrainConfig::default().learning_rate
        );
        assert_eq!(cfg.taxonomy, Taxonomy::default());
    }
}
