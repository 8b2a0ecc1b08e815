//! Versioned JSON checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::policy::FusionPolicy;
use crate::rng::rng_from;
use crate::sac::Learner;
use crate::{Params, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Episodes completed. Every random stream of the trainer is derived from
    /// `(seed, episode)`, so this is also the generator state.
    pub episode: usize,
    pub params: BTreeMap<String, Tensor>,
    pub learner: Learner,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, episode: usize, params: &Params, learner: &Learner) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: config.hash(),
            seed: config.seed,
            config: config.clone(),
            episode,
            params: params.to_named(),
            learner: learner.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        let ck: Self = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", ck.version)));
        }
        if ck.config.hash() != ck.config_hash {
            return Err(Error::Config("checkpoint config hash does not match its config".into()));
        }
        Ok(ck)
    }

    /// Rebuilds the policy and loads the stored parameter values.
    pub fn restore_policy(&self) -> Result<(FusionPolicy, Params)> {
        let mut params = Params::new();
        let policy = FusionPolicy::new(self.config.policy, &mut params, &mut rng_from(0))?;
        params.load_named(&self.params)?;
        if params.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                params.len()
            )));
        }
        Ok((policy, params))
    }
}
