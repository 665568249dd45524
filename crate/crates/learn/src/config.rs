//! Run configuration: one JSON document per experiment.

use std::path::Path;

use parkour_core::terrain::CourseSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::DistillConfig;
use crate::env::{EnvConfig, Variant};
use crate::error::{LearnError, Result};
use crate::policy::NetConfig;
use crate::ppo::PpoConfig;

/// Environment variable that overrides [`RunConfig::seed`].
pub const SEED_ENV: &str = "PKF_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub robots: usize,
    pub duration: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { robots: 256, duration: 30.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub course: CourseSpec,
    /// Phase-1 iterations.
    pub iterations: usize,
    /// Spawn robots by curriculum level instead of always at the start.
    pub curriculum: bool,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub nets: NetConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::Ours,
            course: CourseSpec::default(),
            iterations: 200,
            curriculum: true,
            env: EnvConfig::default(),
            ppo: PpoConfig::default(),
            nets: NetConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| LearnError::Config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, validates and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LearnError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s.trim().parse().map_err(|_| LearnError::Config(format!("{SEED_ENV}='{s}' is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.course.levels == 0 || self.course.kinds.is_empty() {
            return Err(LearnError::Config("course needs at least one level and one terrain kind".into()));
        }
        if self.eval.robots == 0 || !(self.eval.duration > 0.0) {
            return Err(LearnError::Config("eval needs robots and a positive duration".into()));
        }
        self.env.validate()?;
        self.ppo.validate()?;
        self.distill.validate()
    }

    /// Keys sorted, no whitespace.
    pub fn canonical_json(&self) -> String {
        // serde_json's Value map is ordered by key
        let v = serde_json::to_value(self).expect("config serialises");
        serde_json::to_string(&v).expect("value serialises")
    }

    /// Hex SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Terrain label used in metric tables.
    pub fn terrain_label(&self) -> String {
        self.course.kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join("+")
    }
}
