//! Declarative run configuration (TOML) and its content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::grasp::ProposalConfig;
use crate::policy::PolicyConfig;
use crate::sac::{AlphaConfig, GuidedConfig, SacConfig};
use crate::sim::{DetectionConfig, Layout, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub objects: usize,
    pub episodes: usize,
    pub attempt_limit: usize,
    pub layout: Layout,
}

impl StageConfig {
    pub fn stage_one(objects: usize, episodes: usize) -> Self {
        Self {
            stage: Stage::I,
            objects,
            episodes,
            attempt_limit: Stage::I.default_attempt_limit(),
            layout: Layout::Scattered,
        }
    }

    pub fn stage_two(objects: usize, episodes: usize) -> Self {
        Self {
            stage: Stage::II,
            objects,
            episodes,
            attempt_limit: Stage::II.default_attempt_limit(),
            layout: Layout::Clutter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stages: Vec<StageConfig>,
    /// Write a checkpoint every this many episodes; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// The last episodes of the run act greedily instead of sampling.
    pub greedy_final_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: vec![StageConfig::stage_one(8, 500), StageConfig::stage_two(15, 1500)],
            checkpoint_every: 100,
            greedy_final_episodes: 50,
        }
    }
}

impl TrainConfig {
    pub fn total_episodes(&self) -> usize {
        self.stages.iter().map(|s| s.episodes).sum()
    }

    /// Stage entry governing global episode `e`.
    pub fn stage_at(&self, e: usize) -> Option<&StageConfig> {
        let mut start = 0;
        for s in &self.stages {
            if e < start + s.episodes {
                return Some(s);
            }
            start += s.episodes;
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub policy: PolicyConfig,
    pub sac: SacConfig,
    pub alpha: AlphaConfig,
    pub guided: GuidedConfig,
    pub train: TrainConfig,
    pub detection: DetectionConfig,
    pub proposals: ProposalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            policy: PolicyConfig::default(),
            sac: SacConfig::default(),
            alpha: AlphaConfig::default(),
            guided: GuidedConfig::default(),
            train: TrainConfig::default(),
            detection: DetectionConfig::default(),
            proposals: ProposalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let at = || format!("config {}", path.display());
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(at()))?;
        Self::from_toml(&text).map_err(|e| e.context(at()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if self.encoder.width != self.policy.width() {
            return Err(Error::Config(format!(
                "encoder width {} differs from policy width {}",
                self.encoder.width,
                self.policy.width()
            )));
        }
        if self.sac.batch_size == 0 || self.sac.updates_per_step == 0 {
            return Err(Error::Config("batch_size and updates_per_step must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sac.tau) || !(0.0..=1.0).contains(&self.sac.gamma) {
            return Err(Error::Config("tau and gamma must lie in [0, 1]".into()));
        }
        if self.alpha.init <= 0.0 {
            return Err(Error::Config("alpha.init must be positive".into()));
        }
        if self.encoder.sigma_align < 0.0 {
            return Err(Error::Config("sigma_align must be non-negative".into()));
        }
        for s in &self.train.stages {
            if s.objects == 0 || s.attempt_limit == 0 {
                return Err(Error::Config("stages need objects and an attempt limit".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
