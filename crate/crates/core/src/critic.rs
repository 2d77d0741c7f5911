//! Centralized clipped double-Q critics with EMA target copies.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::ActionValue;
use crate::diffnet::{Activation, AdamConfig, Gradients, MlpSpec, Network, OutputActivation};
use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub hidden: Vec<usize>,
    pub target_rate: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            target_rate: 0.005,
        }
    }
}

/// Transitions for one critic step. `next_action` must come from the
/// current policy on `next_joint_obs`.
#[derive(Clone, Debug)]
pub struct CriticBatch<T> {
    pub joint_obs: Array2<T>,
    pub action: Array2<T>,
    pub reward: Array1<T>,
    pub done: Array1<T>,
    pub next_joint_obs: Array2<T>,
    pub next_action: Array2<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticReport<T> {
    pub loss1: T,
    pub loss2: T,
    /// Samples whose target was non-finite.
    pub dropped: usize,
    pub applied: bool,
}

/// `Q(joint_obs, own_action)` pair for one agent.
#[derive(Debug)]
pub struct CriticPair<T> {
    pub q1: Network<T>,
    pub q2: Network<T>,
    pub q1_target: Network<T>,
    pub q2_target: Network<T>,
    pub gamma: T,
    joint_obs_dim: usize,
    action_dim: usize,
}

impl<T: Scalar> Clone for CriticPair<T> {
    fn clone(&self) -> Self {
        Self {
            q1: self.q1.clone(),
            q2: self.q2.clone(),
            q1_target: self.q1_target.clone(),
            q2_target: self.q2_target.clone(),
            gamma: self.gamma,
            joint_obs_dim: self.joint_obs_dim,
            action_dim: self.action_dim,
        }
    }
}

impl<T: Scalar> CriticPair<T> {
    pub fn network_spec(joint_obs_dim: usize, action_dim: usize, hidden: &[usize]) -> Result<MlpSpec> {
        MlpSpec::with_hidden(joint_obs_dim + action_dim, hidden, 1, Activation::Mish, OutputActivation::Identity)
    }

    pub fn new<R: Rng + ?Sized>(cfg: &CriticConfig, joint_obs_dim: usize, action_dim: usize, gamma: T, rng: &mut R) -> Result<Self> {
        let spec = Self::network_spec(joint_obs_dim, action_dim, &cfg.hidden)?;
        let q1 = Network::new(spec.clone(), rng)?;
        let q2 = Network::new(spec, rng)?;
        Self::from_networks(q1, q2, gamma, joint_obs_dim)
    }

    /// Targets start as copies of the online networks.
    pub fn from_networks(q1: Network<T>, q2: Network<T>, gamma: T, joint_obs_dim: usize) -> Result<Self> {
        let (t1, t2) = (fresh_target(&q1), fresh_target(&q2));
        Self::from_parts(q1, q2, t1, t2, gamma, joint_obs_dim)
    }

    /// The network input is `joint_obs_dim` observation features followed by the action.
    pub fn from_parts(
        q1: Network<T>,
        q2: Network<T>,
        q1_target: Network<T>,
        q2_target: Network<T>,
        gamma: T,
        joint_obs_dim: usize,
    ) -> Result<Self> {
        if !(gamma >= T::zero() && gamma < T::one()) {
            return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1), got {gamma}")));
        }
        for n in [&q2, &q1_target, &q2_target] {
            if n.spec().layer_widths != q1.spec().layer_widths {
                return Err(Error::InvalidArgument("critic networks differ in shape".into()));
            }
        }
        check_dim("critic output", 1, q1.spec().output_dim())?;
        let input = q1.spec().input_dim();
        if joint_obs_dim >= input {
            return Err(Error::InvalidArgument(format!(
                "critic input width {input} leaves no room for an action after {joint_obs_dim} observation features"
            )));
        }
        Ok(Self {
            q1,
            q2,
            q1_target,
            q2_target,
            gamma,
            joint_obs_dim,
            action_dim: input - joint_obs_dim,
        })
    }

    pub fn joint_obs_dim(&self) -> usize {
        self.joint_obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn input(&self, joint_obs: ArrayView2<T>, action: ArrayView2<T>) -> Result<Array2<T>> {
        check_dim("critic joint observation", self.joint_obs_dim, joint_obs.ncols())?;
        check_dim("critic action", self.action_dim, action.ncols())?;
        check_dim("critic batch rows", joint_obs.nrows(), action.nrows())?;
        concatenate(Axis(1), &[joint_obs, action]).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    /// Batched `Q_net(joint_obs, action)`.
    pub fn q_values(net: &Network<T>, joint_obs: ArrayView2<T>, action: ArrayView2<T>) -> Result<Array1<T>> {
        let x = concatenate(Axis(1), &[joint_obs, action]).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(net.predict_batch(x.view())?.column(0).to_owned())
    }

    /// Single-sample `Q_net(joint_obs, action)`.
    pub fn q_value(net: &Network<T>, joint_obs: &[T], action: &[T]) -> Result<T> {
        let mut x = Vec::with_capacity(joint_obs.len() + action.len());
        x.extend_from_slice(joint_obs);
        x.extend_from_slice(action);
        Ok(net.predict(&x)?[0])
    }

    /// `min(Q1, Q2)` of the online networks.
    pub fn min_q(&self, joint_obs: ArrayView2<T>, action: ArrayView2<T>) -> Result<Array1<T>> {
        let x = self.input(joint_obs, action)?;
        let a = self.q1.predict_batch(x.view())?;
        let b = self.q2.predict_batch(x.view())?;
        Ok(Array1::from_iter(a.column(0).iter().zip(b.column(0)).map(|(&a, &b)| a.min(b))))
    }

    /// `r + (1 - done) * gamma * min(Q1', Q2')` per sample.
    pub fn td_targets(
        &self,
        reward: ArrayView1<T>,
        done: ArrayView1<T>,
        next_joint_obs: ArrayView2<T>,
        next_action: ArrayView2<T>,
    ) -> Result<Array1<T>> {
        check_dim("td reward rows", next_joint_obs.nrows(), reward.len())?;
        check_dim("td done rows", next_joint_obs.nrows(), done.len())?;
        let x = self.input(next_joint_obs, next_action)?;
        let a = self.q1_target.predict_batch(x.view())?;
        let b = self.q2_target.predict_batch(x.view())?;
        Ok(Array1::from_iter((0..reward.len()).map(|i| {
            let m = a[[i, 0]].min(b[[i, 0]]);
            reward[i] + (T::one() - done[i]) * self.gamma * m
        })))
    }

    pub fn td_target(&self, reward: T, done: bool, next_joint_obs: &[T], next_action: &[T]) -> Result<T> {
        let d = if done { T::one() } else { T::zero() };
        let t = self.td_targets(
            ArrayView1::from(std::slice::from_ref(&reward)),
            ArrayView1::from(std::slice::from_ref(&d)),
            ArrayView2::from_shape((1, next_joint_obs.len()), next_joint_obs).map_err(|e| Error::InvalidArgument(e.to_string()))?,
            ArrayView2::from_shape((1, next_action.len()), next_action).map_err(|e| Error::InvalidArgument(e.to_string()))?,
        )?;
        Ok(t[0])
    }

    /// Mean squared TD error of one online network against fixed targets,
    /// with its parameter gradient.
    pub fn regression_loss_and_grads(net: &Network<T>, x: ArrayView2<T>, targets: ArrayView1<T>) -> Result<(T, Gradients<T>)> {
        let (q, cache) = net.forward_batch(x)?;
        let n = T::lit(targets.len() as f64);
        let mut loss = T::zero();
        let mut grad = Array2::zeros((targets.len(), 1));
        for i in 0..targets.len() {
            let err = targets[i] - q[[i, 0]];
            loss = loss + err * err;
            grad[[i, 0]] = -T::lit(2.0) * err / n;
        }
        let (grads, _) = net.backward_batch(&cache, grad.view())?;
        Ok((loss / n, grads))
    }

    /// One Adam step on both critics toward a shared, detached target.
    pub fn critic_update(&mut self, batch: &CriticBatch<T>, adam: &AdamConfig) -> Result<CriticReport<T>> {
        let targets = self.td_targets(batch.reward.view(), batch.done.view(), batch.next_joint_obs.view(), batch.next_action.view())?;
        let keep: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].is_finite()).collect();
        let dropped = targets.len() - keep.len();
        if keep.is_empty() {
            return Ok(CriticReport {
                loss1: T::nan(),
                loss2: T::nan(),
                dropped,
                applied: false,
            });
        }
        let x = self.input(batch.joint_obs.view(), batch.action.view())?;
        let (x, targets) = if dropped == 0 {
            (x, targets)
        } else {
            (x.select(Axis(0), &keep), targets.select(Axis(0), &keep))
        };
        let (loss1, g1) = Self::regression_loss_and_grads(&self.q1, x.view(), targets.view())?;
        let (loss2, g2) = Self::regression_loss_and_grads(&self.q2, x.view(), targets.view())?;
        let a1 = self.q1.adam_step(&g1, adam)?;
        let a2 = self.q2.adam_step(&g2, adam)?;
        Ok(CriticReport {
            loss1,
            loss2,
            dropped,
            applied: a1 && a2,
        })
    }

    /// EMA-blends both targets toward the online networks.
    pub fn target_sync(&mut self, rate: f64) -> Result<()> {
        self.q1_target.blend_from(&self.q1, rate)?;
        self.q2_target.blend_from(&self.q2, rate)
    }
}

/// Copy of `net` with fresh Adam state; target copies never take optimizer steps.
fn fresh_target<T: Scalar>(net: &Network<T>) -> Network<T> {
    Network::from_parts(net.spec().clone(), net.weights().to_vec(), net.biases().to_vec())
}

/// Values and action gradients from `Q1`, which drives policy improvement.
impl<T: Scalar> ActionValue<T> for CriticPair<T> {
    fn value_and_action_grad(&self, joint_obs: ArrayView2<T>, actions: ArrayView2<T>) -> Result<(Array1<T>, Array2<T>)> {
        let x = self.input(joint_obs, actions)?;
        let (q, cache) = self.q1.forward_batch(x.view())?;
        let ones = Array2::from_elem((x.nrows(), 1), T::one());
        let dx = self.q1.backward_input_batch(&cache, ones.view())?;
        let split = joint_obs.ncols();
        Ok((q.column(0).to_owned(), dx.slice(s![.., split..]).to_owned()))
    }
}
