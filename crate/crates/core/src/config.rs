//! Training configuration shared by the trainers, protocols and CLI.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How the two training stages are sequenced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    /// Aggregator first, then generator/projection against frozen targets.
    TwoStage,
    /// Both objectives advanced per step; targets are still detached.
    Joint,
}

/// First-order optimizer selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Downstream task the second stage trains for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Retrieval,
}

/// Where the aggregator's query token comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Per-set mean of the reference embeddings (non-parametric).
    Mean,
    /// One global learnable query vector.
    Global,
}

/// Hyperparameters for the full pipeline. `seed` is mandatory; everything
/// else has a documented default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight on the distillation term of the combined objective.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Softmax temperature for cosine logits.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Scale applied to the clipped cosine reward.
    #[serde(default = "default_reward_scale")]
    pub reward_scale: f64,
    /// Attention head count in the aggregator.
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Hidden width of the generator; `None` means the embedding dim.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default = "default_stage_mode")]
    pub stage_mode: StageMode,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// Base learning rate (cosine-annealed after a one-epoch warmup).
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// SGD momentum coefficient (ignored by Adam).
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_stage1_epochs")]
    pub stage1_epochs: usize,
    #[serde(default = "default_stage2_epochs")]
    pub stage2_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Master seed; sub-seeds for init, shuffling and sampling derive from it.
    pub seed: u64,
    #[serde(default = "default_task")]
    pub task: TaskKind,
    #[serde(default = "default_query_mode")]
    pub query_mode: QueryMode,
}

fn default_lambda() -> f64 {
    5.0
}
fn default_tau() -> f64 {
    0.01
}
fn default_reward_scale() -> f64 {
    2.5
}
fn default_heads() -> usize {
    4
}
fn default_stage_mode() -> StageMode {
    StageMode::TwoStage
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}
fn default_lr() -> f64 {
    2e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_stage1_epochs() -> usize {
    50
}
fn default_stage2_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    32
}
fn default_task() -> TaskKind {
    TaskKind::Classification
}
fn default_query_mode() -> QueryMode {
    QueryMode::Mean
}

impl TrainConfig {
    /// Defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        TrainConfig {
            lambda: default_lambda(),
            tau: default_tau(),
            reward_scale: default_reward_scale(),
            heads: default_heads(),
            hidden: None,
            stage_mode: default_stage_mode(),
            optimizer: default_optimizer(),
            lr: default_lr(),
            momentum: default_momentum(),
            stage1_epochs: default_stage1_epochs(),
            stage2_epochs: default_stage2_epochs(),
            batch_size: default_batch_size(),
            seed,
            task: default_task(),
            query_mode: default_query_mode(),
        }
    }

    /// Checks numeric ranges; returns a config error naming the first bad field.
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !self.reward_scale.is_finite() || self.reward_scale <= 0.0 {
            return Err(Error::Config(format!(
                "reward_scale must be > 0, got {}",
                self.reward_scale
            )));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be >= 1".into()));
        }
        if let Some(h) = self.hidden {
            if h == 0 {
                return Err(Error::Config("hidden must be >= 1 when set".into()));
            }
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 digest of the canonical JSON encoding; identifies a run
    /// configuration inside reports.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let out = hasher.finalize();
        let mut hex = String::with_capacity(out.len() * 2);
        for b in out {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_contract() {
        let c = TrainConfig::with_seed(7);
        assert_eq!(c.lambda, 5.0);
        assert_eq!(c.tau, 0.01);
        assert_eq!(c.reward_scale, 2.5);
        assert_eq!(c.heads, 4);
        assert_eq!(c.hidden, None);
        assert_eq!(c.stage_mode, StageMode::TwoStage);
        assert_eq!(c.optimizer, OptimizerKind::Sgd);
        assert_eq!(c.lr, 2e-3);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.stage1_epochs, 50);
        assert_eq!(c.stage2_epochs, 100);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.seed, 7);
        assert_eq!(c.task, TaskKind::Classification);
        assert_eq!(c.query_mode, QueryMode::Mean);
        c.validate().unwrap();
    }

    #[test]
    fn seed_is_mandatory_in_json() {
        let err = serde_json::from_str::<TrainConfig>("{}").unwrap_err();
        assert!(err.to_string().contains("seed"));
        let ok: TrainConfig = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(ok.seed, 3);
        assert_eq!(ok.lambda, 5.0);
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        let mut c = TrainConfig::with_seed(0);
        c.tau = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::with_seed(0);
        c.lambda = f64::NAN;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::with_seed(0);
        c.momentum = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::with_seed(0);
        c.batch_size = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = TrainConfig::with_seed(0);
        let b = TrainConfig::with_seed(0);
        assert_eq!(a.digest(), b.digest());
        let mut c = TrainConfig::with_seed(0);
        c.lambda = 3.0;
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
