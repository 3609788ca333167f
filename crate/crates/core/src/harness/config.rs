//! Experiment configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::world::WorldConfig;
use crate::error::{LabError, Result};
use crate::mcts::MctsConfig;
use crate::prm::PrmConfig;
use crate::rft::RftConfig;
use crate::rl::RlConfig;
use crate::sft::SftConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_hops: Vec<usize>,
    /// Training questions at each depth of `train_hops`.
    pub train_counts: Vec<usize>,
    /// Reference demonstrations for warmup at each depth of `train_hops`,
    /// taken from the training questions; the rest carry only gold answers.
    pub sft_counts: Vec<usize>,
    pub eval_count: usize,
    pub eval_hops: Vec<usize>,
    /// Training questions searched to build preference pairs.
    pub search_queries: usize,
    /// Training questions sampled for refinement.
    pub rft_queries: usize,
    /// Hop depths of the reinforcement-learning training questions.
    pub rl_hops: Vec<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_hops: vec![1, 2, 3],
            train_counts: vec![60, 60, 200],
            sft_counts: vec![30, 30, 30],
            eval_count: 100,
            eval_hops: vec![3],
            search_queries: 180,
            rft_queries: 120,
            rl_hops: vec![3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub masking: bool,
    pub max_steps: usize,
    pub k_docs: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            masking: true,
            max_steps: 10,
            k_docs: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RlInit {
    #[default]
    Rft,
    Sft,
}

/// Which stages run; a disabled stage is loaded from the output directory
/// when a later stage needs it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagesConfig {
    pub sft: bool,
    pub search: bool,
    pub prm: bool,
    pub rft: bool,
    pub rl: bool,
    pub rl_init: RlInit,
}

impl Default for StagesConfig {
    fn default() -> Self {
        Self {
            sft: true,
            search: true,
            prm: true,
            rft: true,
            rl: true,
            rl_init: RlInit::Rft,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: usize,
    pub betas: Vec<f64>,
    pub k_grid: Vec<usize>,
    /// Mean outcome reward used to compare convergence speed.
    pub reward_threshold: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            betas: vec![0.0, 0.3, 0.9],
            k_grid: vec![1, 3, 5],
            reward_threshold: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub split: SplitConfig,
    pub policy: PolicyConfig,
    pub sft: SftConfig,
    pub mcts: MctsConfig,
    pub prm: PrmConfig,
    pub rft: RftConfig,
    pub rl: RlConfig,
    pub stages: StagesConfig,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.sft.validate()?;
        self.mcts.validate()?;
        self.rl.validate()?;
        let max = self.world.max_hops;
        let hops_ok = |name: &str, hs: &[usize]| -> Result<()> {
            if hs.is_empty() || hs.iter().any(|&h| h == 0 || h > max) {
                return Err(LabError::Config(format!(
                    "split.{name} must be a nonempty list of depths in [1, {max}]"
                )));
            }
            Ok(())
        };
        hops_ok("train_hops", &self.split.train_hops)?;
        hops_ok("eval_hops", &self.split.eval_hops)?;
        let n = self.split.train_hops.len();
        if self.split.train_counts.len() != n || self.split.sft_counts.len() != n {
            return Err(LabError::Config(
                "split.train_counts and split.sft_counts need one entry per split.train_hops depth".into(),
            ));
        }
        if self
            .split
            .sft_counts
            .iter()
            .zip(&self.split.train_counts)
            .any(|(s, t)| s > t)
        {
            return Err(LabError::Config(
                "split.sft_counts may not exceed split.train_counts".into(),
            ));
        }
        hops_ok("rl_hops", &self.split.rl_hops)?;
        if self.policy.k_docs == 0 || self.policy.max_steps == 0 {
            return Err(LabError::Config(
                "policy.k_docs and policy.max_steps must be >= 1".into(),
            ));
        }
        if self.rft.n == 0 {
            return Err(LabError::Config("rft.n must be >= 1".into()));
        }
        if self.ablation.seeds == 0 {
            return Err(LabError::Config("ablation.seeds must be >= 1".into()));
        }
        Ok(())
    }
}
