use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyConfig;
use crate::critic::CriticConfig;
use crate::diffnet::AdamConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::intention::IntentionConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Deterministic tanh policy instead of the consistency policy.
    pub no_cp: bool,
    /// No intention learner: mask 0 and zero intention everywhere.
    pub no_ig: bool,
    /// No self-reference distillation.
    pub no_sr: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub updates_per_step: f64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub gamma: f64,
    pub replay_capacity: usize,
    pub reference_capacity: usize,
    /// Constant weight of the self-reference loss.
    pub reference_weight: f64,
    pub seed: u64,
    /// Seeds the training-mask stream separately when set.
    pub mask_seed: Option<u64>,
    pub precision: Precision,
    pub ablation: Ablation,
    pub checkpoints: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            total_steps: 100_000,
            warmup_steps: 1_000,
            batch_size: 256,
            updates_per_step: 1.0,
            eval_interval: 1_000,
            eval_episodes: 20,
            gamma: 0.99,
            replay_capacity: 1_000_000,
            reference_capacity: 100_000,
            reference_weight: 1.0,
            seed: 0,
            mask_seed: None,
            precision: Precision::F64,
            ablation: Ablation::default(),
            checkpoints: true,
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    pub policy: ConsistencyConfig,
    pub critic: CriticConfig,
    pub intention: IntentionConfig,
    pub adam: AdamConfig,
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn unit_interval(key: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(config_err(key, format!("must lie in [0, 1], got {v}")))
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(key, format!("must be positive and finite, got {v}")))
    }
}

impl TrainConfig {
    /// Range checks; errors name the offending dotted key.
    pub fn validate(&self) -> Result<()> {
        let t = &self.trainer;
        if !(0.0..1.0).contains(&t.gamma) {
            return Err(config_err("trainer.gamma", format!("must lie in [0, 1), got {}", t.gamma)));
        }
        if t.total_steps == 0 {
            return Err(config_err("trainer.total_steps", "must be at least 1"));
        }
        if t.batch_size == 0 {
            return Err(config_err("trainer.batch_size", "must be at least 1"));
        }
        if !(t.updates_per_step >= 0.0 && t.updates_per_step.is_finite()) {
            return Err(config_err("trainer.updates_per_step", format!("must be finite and non-negative, got {}", t.updates_per_step)));
        }
        if t.eval_interval == 0 {
            return Err(config_err("trainer.eval_interval", "must be at least 1"));
        }
        if t.eval_episodes == 0 {
            return Err(config_err("trainer.eval_episodes", "must be at least 1"));
        }
        if t.replay_capacity == 0 {
            return Err(config_err("trainer.replay_capacity", "must be at least 1"));
        }
        if t.reference_capacity == 0 {
            return Err(config_err("trainer.reference_capacity", "must be at least 1"));
        }
        if !(t.reference_weight >= 0.0 && t.reference_weight.is_finite()) {
            return Err(config_err("trainer.reference_weight", format!("must be finite and non-negative, got {}", t.reference_weight)));
        }
        let p = &self.policy;
        positive("policy.epsilon", p.epsilon)?;
        positive("policy.t_max", p.t_max)?;
        if p.epsilon >= p.t_max {
            return Err(config_err("policy.epsilon", "must be below policy.t_max"));
        }
        positive("policy.rho", p.rho)?;
        positive("policy.sigma_data", p.sigma_data)?;
        if p.levels < 2 {
            return Err(config_err("policy.levels", format!("must be at least 2, got {}", p.levels)));
        }
        unit_interval("policy.target_rate", p.target_rate)?;
        if p.hidden.iter().any(|&h| h == 0) {
            return Err(config_err("policy.hidden", "widths must be positive"));
        }
        unit_interval("critic.target_rate", self.critic.target_rate)?;
        if self.critic.hidden.iter().any(|&h| h == 0) {
            return Err(config_err("critic.hidden", "widths must be positive"));
        }
        if self.intention.hidden.iter().any(|&h| h == 0) {
            return Err(config_err("intention.hidden", "widths must be positive"));
        }
        self.intention.validate()?;
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            return Err(config_err("adam.lr", format!("must be finite and non-negative, got {}", a.lr)));
        }
        for (key, v) in [("adam.beta1", a.beta1), ("adam.beta2", a.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(config_err(key, format!("must lie in [0, 1), got {v}")));
            }
        }
        positive("adam.eps", a.eps)?;
        crate::env::EnvSpec::from_config(&self.env)?;
        Ok(())
    }
}
