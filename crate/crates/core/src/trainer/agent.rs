use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::consistency::{ActionValue, ConsistencyPolicy, DeterministicPolicy, PolicyBatch, StepReport};
use crate::diffnet::{AdamConfig, Network};
use crate::error::Result;
use crate::scalar::Scalar;

/// One agent's actor: the consistency policy, or the deterministic tanh
/// policy used by the `no_cp` ablation.
#[derive(Clone, Debug)]
pub enum AgentPolicy<T: Scalar> {
    Consistency(ConsistencyPolicy<T>),
    Deterministic(DeterministicPolicy<T>),
}

impl<T: Scalar> AgentPolicy<T> {
    pub fn net(&self) -> &Network<T> {
        match self {
            Self::Consistency(p) => p.net(),
            Self::Deterministic(p) => p.net(),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Self::Consistency(p) => p.action_dim(),
            Self::Deterministic(p) => p.action_dim(),
        }
    }

    pub fn as_consistency(&self) -> Option<&ConsistencyPolicy<T>> {
        match self {
            Self::Consistency(p) => Some(p),
            Self::Deterministic(_) => None,
        }
    }

    pub fn as_consistency_mut(&mut self) -> Option<&mut ConsistencyPolicy<T>> {
        match self {
            Self::Consistency(p) => Some(p),
            Self::Deterministic(_) => None,
        }
    }

    /// Number of `F` evaluations so far; always 0 for the deterministic actor.
    pub fn f_evaluations(&self) -> u64 {
        self.as_consistency().map_or(0, ConsistencyPolicy::f_evaluations)
    }

    /// Batched actions. The consistency policy draws its initial noise from `rng`;
    /// the deterministic policy leaves `rng` untouched.
    pub fn act_batch<R: Rng + ?Sized>(
        &self,
        obs: ArrayView2<T>,
        intention: ArrayView2<T>,
        mask: ArrayView1<T>,
        rng: &mut R,
    ) -> Result<Array2<T>> {
        match self {
            Self::Consistency(p) => {
                let noise = p.draw_initial_noise(obs.nrows(), rng);
                Ok(p.sample_from_noise(obs, intention, mask, noise.view(), false)?.action)
            }
            Self::Deterministic(p) => p.act_batch(obs, intention, mask),
        }
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &[T], intention: &[T], mask: T, rng: &mut R) -> Result<Vec<T>> {
        match self {
            Self::Consistency(p) => p.sample_action(obs, intention, mask, rng),
            Self::Deterministic(p) => p.act(obs, intention, mask),
        }
    }

    pub fn policy_update<R: Rng + ?Sized>(
        &mut self,
        critic: &dyn ActionValue<T>,
        batch: &PolicyBatch<T>,
        adam: &AdamConfig,
        rng: &mut R,
    ) -> Result<StepReport<T>> {
        match self {
            Self::Consistency(p) => p.policy_update(critic, batch, adam, rng),
            Self::Deterministic(p) => p.policy_update(critic, batch, adam),
        }
    }
}
