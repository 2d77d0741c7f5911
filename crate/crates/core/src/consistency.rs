//! One-step consistency policies over a Karras-discretized noise horizon.
//!
//! The policy output is
//!
//! ```text
//! f(o, u, psi, tau) = clamp(c_skip(tau) * u + c_out(tau) * F(o, c_in(tau) * u, psi * mask, mask, ln tau))
//! ```
//!
//! with `c_skip(eps) = 1` and `c_out(eps) = 0`, so `f` is the (clamped)
//! identity at the smallest noise level. Sampling draws `u ~ N(0, T^2 I)` and
//! evaluates `f` once at `tau = T`.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Activation, AdamConfig, ForwardCache, Gradients, MlpSpec, Network, OutputActivation};
use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

/// Karras boundaries
/// `k_i = (eps^(1/rho) + (i-1)/(M-1) * (T^(1/rho) - eps^(1/rho)))^rho`, `i = 1..=M`.
///
/// The endpoints are substituted exactly.
pub fn karras_boundaries<T: Scalar>(epsilon: T, t_max: T, rho: T, levels: usize) -> Result<Vec<T>> {
    if levels < 2 {
        return Err(Error::InvalidArgument(format!(
            "noise schedule needs at least 2 levels, got {levels}"
        )));
    }
    if !(epsilon > T::zero() && epsilon < t_max && t_max.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise schedule needs 0 < epsilon < t_max, got epsilon={epsilon}, t_max={t_max}"
        )));
    }
    if !(rho > T::zero()) {
        return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
    }
    let inv_rho = T::one() / rho;
    let lo = epsilon.powf(inv_rho);
    let hi = t_max.powf(inv_rho);
    let span = T::lit((levels - 1) as f64);
    let mut out: Vec<T> = (0..levels)
        .map(|i| (lo + T::lit(i as f64) / span * (hi - lo)).powf(rho))
        .collect();
    out[0] = epsilon;
    out[levels - 1] = t_max;
    Ok(out)
}

/// Discretized noise horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<T> {
    pub epsilon: T,
    pub t_max: T,
    pub rho: T,
    boundaries: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn new(epsilon: T, t_max: T, rho: T, levels: usize) -> Result<Self> {
        Ok(Self {
            epsilon,
            t_max,
            rho,
            boundaries: karras_boundaries(epsilon, t_max, rho, levels)?,
        })
    }

    /// A schedule with explicitly given (non-decreasing) levels.
    pub fn from_boundaries(boundaries: Vec<T>) -> Result<Self> {
        if boundaries.len() < 2 || boundaries.windows(2).any(|w| w[1] < w[0]) || boundaries[0] <= T::zero() {
            return Err(Error::InvalidArgument(
                "explicit schedule must be positive, non-decreasing, with at least 2 levels".into(),
            ));
        }
        Ok(Self {
            epsilon: boundaries[0],
            t_max: *boundaries.last().expect("len >= 2"),
            rho: T::one(),
            boundaries,
        })
    }

    pub fn levels(&self) -> usize {
        self.boundaries.len()
    }

    pub fn boundaries(&self) -> &[T] {
        &self.boundaries
    }

    /// Level `n` using 1-based indexing, `tau_1 = epsilon`.
    pub fn tau(&self, n: usize) -> T {
        self.boundaries[n - 1]
    }

    pub fn contains(&self, tau: T) -> bool {
        tau >= self.epsilon && tau <= self.t_max
    }
}

/// `c_skip(tau) = sd^2 / ((tau - eps)^2 + sd^2)`,
/// `c_out(tau) = sd (tau - eps) / sqrt(sd^2 + tau^2)`.
pub fn coefficients<T: Scalar>(tau: T, epsilon: T, sigma_data: T) -> (T, T) {
    let sd2 = sigma_data * sigma_data;
    let d = tau - epsilon;
    let c_skip = sd2 / (d * d + sd2);
    let c_out = sigma_data * d / (sd2 + tau * tau).sqrt();
    (c_skip, c_out)
}

/// Input scaling applied to the noisy action before it reaches `F`.
pub fn input_scale<T: Scalar>(tau: T, sigma_data: T) -> T {
    T::one() / (sigma_data * sigma_data + tau * tau).sqrt()
}

/// Which copy of `F` to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetCopy {
    Online,
    Target,
}

/// Critic interface used by policy improvement: values and action gradients
/// of `Q(joint_obs, action)` for a batch.
pub trait ActionValue<T> {
    fn value_and_action_grad(
        &self,
        joint_obs: ArrayView2<T>,
        actions: ArrayView2<T>,
    ) -> Result<(Array1<T>, Array2<T>)>;
}

/// Minibatch for a policy-improvement step.
#[derive(Clone, Debug)]
pub struct PolicyBatch<T> {
    pub joint_obs: Array2<T>,
    pub own_obs: Array2<T>,
    pub intention: Array2<T>,
    pub mask: Array1<T>,
}

impl<T: Scalar> PolicyBatch<T> {
    pub fn len(&self) -> usize {
        self.own_obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of one gradient step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport<T> {
    pub loss: T,
    /// `false` when the step was skipped (non-finite loss or gradients).
    pub applied: bool,
}

/// Forward evaluation of `f` with everything needed to backpropagate into
/// the online network.
#[derive(Debug)]
pub struct ApplyOutput<T> {
    pub action: Array2<T>,
    pre_clamp: Array2<T>,
    c_out: Array1<T>,
    cache: Option<ForwardCache<T>>,
}

/// Hyperparameters of a consistency policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    pub hidden: Vec<usize>,
    pub epsilon: f64,
    pub t_max: f64,
    pub rho: f64,
    pub levels: usize,
    pub sigma_data: f64,
    /// EMA rate of the target copy used by the self-reference loss.
    pub target_rate: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            epsilon: 0.002,
            t_max: 80.0,
            rho: 7.0,
            levels: 40,
            sigma_data: 0.5,
            target_rate: 0.005,
        }
    }
}

/// Per-agent consistency policy with its EMA target copy.
#[derive(Debug)]
pub struct ConsistencyPolicy<T> {
    net: Network<T>,
    target_net: Network<T>,
    schedule: NoiseSchedule<T>,
    sigma_data: T,
    obs_dim: usize,
    action_dim: usize,
    intention_dim: usize,
    action_low: Vec<T>,
    action_high: Vec<T>,
    f_evaluations: AtomicU64,
}

impl<T: Scalar> Clone for ConsistencyPolicy<T> {
    fn clone(&self) -> Self {
        Self {
            net: self.net.clone(),
            target_net: self.target_net.clone(),
            schedule: self.schedule.clone(),
            sigma_data: self.sigma_data,
            obs_dim: self.obs_dim,
            action_dim: self.action_dim,
            intention_dim: self.intention_dim,
            action_low: self.action_low.clone(),
            action_high: self.action_high.clone(),
            f_evaluations: AtomicU64::new(self.f_evaluations()),
        }
    }
}

impl<T: Scalar> ConsistencyPolicy<T> {
    pub fn network_spec(obs_dim: usize, action_dim: usize, intention_dim: usize, hidden: &[usize]) -> Result<MlpSpec> {
        MlpSpec::with_hidden(
            obs_dim + action_dim + intention_dim + 2,
            hidden,
            action_dim,
            Activation::Mish,
            OutputActivation::Identity,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        cfg: &ConsistencyConfig,
        obs_dim: usize,
        action_dim: usize,
        intention_dim: usize,
        action_low: Vec<T>,
        action_high: Vec<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = Self::network_spec(obs_dim, action_dim, intention_dim, &cfg.hidden)?;
        let net = Network::new(spec, rng)?;
        let schedule = NoiseSchedule::new(T::lit(cfg.epsilon), T::lit(cfg.t_max), T::lit(cfg.rho), cfg.levels)?;
        Self::from_network(net, schedule, T::lit(cfg.sigma_data), obs_dim, action_dim, intention_dim, action_low, action_high)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_network(
        net: Network<T>,
        schedule: NoiseSchedule<T>,
        sigma_data: T,
        obs_dim: usize,
        action_dim: usize,
        intention_dim: usize,
        action_low: Vec<T>,
        action_high: Vec<T>,
    ) -> Result<Self> {
        check_dim("policy network input", obs_dim + action_dim + intention_dim + 2, net.spec().input_dim())?;
        check_dim("policy network output", action_dim, net.spec().output_dim())?;
        check_dim("action_low", action_dim, action_low.len())?;
        check_dim("action_high", action_dim, action_high.len())?;
        if action_low.iter().zip(&action_high).any(|(l, h)| !(l <= h)) {
            return Err(Error::InvalidArgument("action_low must not exceed action_high".into()));
        }
        let target_net = Network::from_parts(net.spec().clone(), net.weights().to_vec(), net.biases().to_vec());
        Ok(Self {
            net,
            target_net,
            schedule,
            sigma_data,
            obs_dim,
            action_dim,
            intention_dim,
            action_low,
            action_high,
            f_evaluations: AtomicU64::new(0),
        })
    }

    pub fn net(&self) -> &Network<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    pub fn target_net(&self) -> &Network<T> {
        &self.target_net
    }

    pub fn target_net_mut(&mut self) -> &mut Network<T> {
        &mut self.target_net
    }

    pub fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    pub fn sigma_data(&self) -> T {
        self.sigma_data
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn intention_dim(&self) -> usize {
        self.intention_dim
    }

    pub fn action_bounds(&self) -> (&[T], &[T]) {
        (&self.action_low, &self.action_high)
    }

    /// Number of `F` evaluations performed so far (one per batch row).
    pub fn f_evaluations(&self) -> u64 {
        self.f_evaluations.load(Ordering::Relaxed)
    }

    pub fn coefficients(&self, tau: T) -> (T, T) {
        coefficients(tau, self.schedule.epsilon, self.sigma_data)
    }

    /// Assembles the `F` input rows `[obs, c_in u, psi * mask, mask, ln tau]`.
    pub fn network_input(
        &self,
        obs: ArrayView2<T>,
        noisy_action: ArrayView2<T>,
        intention: ArrayView2<T>,
        mask: ArrayView1<T>,
        tau: ArrayView1<T>,
    ) -> Result<Array2<T>> {
        let b = obs.nrows();
        check_dim("policy obs", self.obs_dim, obs.ncols())?;
        check_dim("policy noisy action", self.action_dim, noisy_action.ncols())?;
        check_dim("policy intention", self.intention_dim, intention.ncols())?;
        check_dim("policy noisy action rows", b, noisy_action.nrows())?;
        check_dim("policy intention rows", b, intention.nrows())?;
        check_dim("policy mask rows", b, mask.len())?;
        check_dim("policy tau rows", b, tau.len())?;
        for &t in tau {
            if !self.schedule.contains(t) {
                return Err(Error::InvalidArgument(format!(
                    "tau {t} outside the schedule range [{}, {}]",
                    self.schedule.epsilon, self.schedule.t_max
                )));
            }
        }
        for &m in mask {
            if m != T::zero() && m != T::one() {
                return Err(Error::InvalidArgument(format!("mask must be 0 or 1, got {m}")));
            }
        }
        let width = self.net.spec().input_dim();
        let (o, a, k) = (self.obs_dim, self.action_dim, self.intention_dim);
        let mut x = Array2::zeros((b, width));
        for i in 0..b {
            let c_in = input_scale(tau[i], self.sigma_data);
            let mut row = x.row_mut(i);
            for j in 0..o {
                row[j] = obs[[i, j]];
            }
            for j in 0..a {
                row[o + j] = c_in * noisy_action[[i, j]];
            }
            if mask[i] == T::one() {
                for j in 0..k {
                    row[o + a + j] = intention[[i, j]];
                }
            }
            row[o + a + k] = mask[i];
            row[o + a + k + 1] = tau[i].ln();
        }
        Ok(x)
    }

    /// Evaluates `f` on a batch. With `keep_cache` the online forward cache
    /// is retained for [`Self::backprop`].
    pub fn apply_batch(
        &self,
        which: NetCopy,
        obs: ArrayView2<T>,
        noisy_action: ArrayView2<T>,
        intention: ArrayView2<T>,
        mask: ArrayView1<T>,
        tau: ArrayView1<T>,
        keep_cache: bool,
    ) -> Result<ApplyOutput<T>> {
        let x = self.network_input(obs, noisy_action, intention, mask, tau)?;
        let net = match which {
            NetCopy::Online => &self.net,
            NetCopy::Target => &self.target_net,
        };
        let (f, cache) = if keep_cache {
            let (f, c) = net.forward_batch(x.view())?;
            (f, Some(c))
        } else {
            (net.predict_batch(x.view())?, None)
        };
        self.f_evaluations.fetch_add(x.nrows() as u64, Ordering::Relaxed);
        let b = x.nrows();
        let mut pre = Array2::zeros((b, self.action_dim));
        let mut c_outs = Array1::zeros(b);
        for i in 0..b {
            let (c_skip, c_out) = self.coefficients(tau[i]);
            c_outs[i] = c_out;
            for j in 0..self.action_dim {
                pre[[i, j]] = c_skip * noisy_action[[i, j]] + c_out * f[[i, j]];
            }
        }
        let action = self.clamp(&pre);
        Ok(ApplyOutput {
            action,
            pre_clamp: pre,
            c_out: c_outs,
            cache,
        })
    }

    fn clamp(&self, pre: &Array2<T>) -> Array2<T> {
        let mut out = pre.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = v.max(self.action_low[j]).min(self.action_high[j]);
            }
        }
        out
    }

    /// Backpropagates `d loss / d action` through the clamp (straight-through
    /// inside the bounds, zero outside) and `c_out` into the online network.
    pub fn backprop(&self, out: &ApplyOutput<T>, action_grad: ArrayView2<T>) -> Result<Gradients<T>> {
        let cache = out.cache.as_ref().ok_or(Error::StaleCache)?;
        check_dim("policy action gradient rows", out.action.nrows(), action_grad.nrows())?;
        check_dim("policy action gradient", self.action_dim, action_grad.ncols())?;
        let mut df = Array2::zeros(action_grad.raw_dim());
        for i in 0..action_grad.nrows() {
            for j in 0..self.action_dim {
                let p = out.pre_clamp[[i, j]];
                if p >= self.action_low[j] && p <= self.action_high[j] {
                    df[[i, j]] = out.c_out[i] * action_grad[[i, j]];
                }
            }
        }
        let (grads, _) = self.net.backward_batch(cache, df.view())?;
        Ok(grads)
    }

    /// Single-sample consistency function.
    pub fn consistency_apply(&self, obs: &[T], noisy_action: &[T], intention: &[T], mask: T, tau: T) -> Result<Vec<T>> {
        let out = self.apply_batch(
            NetCopy::Online,
            row(obs)?,
            row(noisy_action)?,
            row(intention)?,
            ArrayView1::from(std::slice::from_ref(&mask)),
            ArrayView1::from(std::slice::from_ref(&tau)),
            false,
        )?;
        Ok(out.action.into_raw_vec_and_offset().0)
    }

    /// Draws `u ~ N(0, T^2 I)` for `rows` samples.
    pub fn draw_initial_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Array2<T> {
        let t = self.schedule.t_max;
        Array2::from_shape_simple_fn((rows, self.action_dim), || {
            t * T::lit(rng.sample::<f64, _>(StandardNormal))
        })
    }

    /// One-step action generation: one `F` evaluation at `tau = T`.
    pub fn sample_action<R: Rng + ?Sized>(&self, obs: &[T], intention: &[T], mask: T, rng: &mut R) -> Result<Vec<T>> {
        if !self.net.is_finite() {
            return Err(Error::NonFinite("policy parameters"));
        }
        let noise = self.draw_initial_noise(1, rng);
        self.consistency_apply(obs, noise.row(0).to_slice().expect("contiguous"), intention, mask, self.schedule.t_max)
    }

    /// Batched one-step sampling from the given initial noise.
    pub fn sample_from_noise(
        &self,
        obs: ArrayView2<T>,
        intention: ArrayView2<T>,
        mask: ArrayView1<T>,
        noise: ArrayView2<T>,
        keep_cache: bool,
    ) -> Result<ApplyOutput<T>> {
        let tau = Array1::from_elem(obs.nrows(), self.schedule.t_max);
        self.apply_batch(NetCopy::Online, obs, noise, intention, mask, tau.view(), keep_cache)
    }

    /// Loss `-mean Q(joint_obs, f(o, u, psi, T))` and its parameter gradient
    /// for fixed initial noise.
    pub fn policy_loss_and_grads(
        &self,
        critic: &dyn ActionValue<T>,
        batch: &PolicyBatch<T>,
        noise: ArrayView2<T>,
    ) -> Result<(T, Gradients<T>)> {
        let out = self.sample_from_noise(batch.own_obs.view(), batch.intention.view(), batch.mask.view(), noise, true)?;
        let (q, dq) = critic.value_and_action_grad(batch.joint_obs.view(), out.action.view())?;
        let n = T::lit(batch.len() as f64);
        let loss = -q.sum() / n;
        let grad = dq.mapv(|g| -g / n);
        let grads = self.backprop(&out, grad.view())?;
        Ok((loss, grads))
    }

    /// One policy-improvement step; the critic is read-only.
    pub fn policy_update<R: Rng + ?Sized>(
        &mut self,
        critic: &dyn ActionValue<T>,
        batch: &PolicyBatch<T>,
        adam: &AdamConfig,
        rng: &mut R,
    ) -> Result<StepReport<T>> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty policy batch".into()));
        }
        let noise = self.draw_initial_noise(batch.len(), rng);
        let (loss, grads) = self.policy_loss_and_grads(critic, batch, noise.view())?;
        if !loss.is_finite() {
            return Ok(StepReport { loss, applied: false });
        }
        let applied = self.net.adam_step(&grads, adam)?;
        Ok(StepReport { loss, applied })
    }

    /// Moves the target copy toward the online network.
    pub fn sync_target(&mut self, rate: f64) -> Result<()> {
        self.target_net.blend_from(&self.net, rate)
    }
}

fn row<T>(xs: &[T]) -> Result<ArrayView2<'_, T>> {
    ArrayView2::from_shape((1, xs.len()), xs).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Deterministic `tanh` policy used by the consistency-policy ablation.
#[derive(Debug)]
pub struct DeterministicPolicy<T> {
    net: Network<T>,
    obs_dim: usize,
    action_dim: usize,
    intention_dim: usize,
    action_low: Vec<T>,
    action_high: Vec<T>,
}

impl<T: Scalar> Clone for DeterministicPolicy<T> {
    fn clone(&self) -> Self {
        Self {
            net: self.net.clone(),
            obs_dim: self.obs_dim,
            action_dim: self.action_dim,
            intention_dim: self.intention_dim,
            action_low: self.action_low.clone(),
            action_high: self.action_high.clone(),
        }
    }
}

impl<T: Scalar> DeterministicPolicy<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        hidden: &[usize],
        obs_dim: usize,
        action_dim: usize,
        intention_dim: usize,
        action_low: Vec<T>,
        action_high: Vec<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = MlpSpec::with_hidden(obs_dim + intention_dim + 1, hidden, action_dim, Activation::Mish, OutputActivation::Tanh)?;
        Self::from_network(Network::new(spec, rng)?, obs_dim, action_dim, intention_dim, action_low, action_high)
    }

    pub fn from_network(
        net: Network<T>,
        obs_dim: usize,
        action_dim: usize,
        intention_dim: usize,
        action_low: Vec<T>,
        action_high: Vec<T>,
    ) -> Result<Self> {
        check_dim("deterministic policy input", obs_dim + intention_dim + 1, net.spec().input_dim())?;
        check_dim("deterministic policy output", action_dim, net.spec().output_dim())?;
        check_dim("action_low", action_dim, action_low.len())?;
        check_dim("action_high", action_dim, action_high.len())?;
        Ok(Self {
            net,
            obs_dim,
            action_dim,
            intention_dim,
            action_low,
            action_high,
        })
    }

    pub fn net(&self) -> &Network<T> {
        &self.net
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn intention_dim(&self) -> usize {
        self.intention_dim
    }

    fn input(&self, obs: ArrayView2<T>, intention: ArrayView2<T>, mask: ArrayView1<T>) -> Result<Array2<T>> {
        check_dim("policy obs", self.obs_dim, obs.ncols())?;
        check_dim("policy intention", self.intention_dim, intention.ncols())?;
        let b = obs.nrows();
        let mut x = Array2::zeros((b, self.obs_dim + self.intention_dim + 1));
        for i in 0..b {
            for j in 0..self.obs_dim {
                x[[i, j]] = obs[[i, j]];
            }
            if mask[i] == T::one() {
                for j in 0..self.intention_dim {
                    x[[i, self.obs_dim + j]] = intention[[i, j]];
                }
            }
            x[[i, self.obs_dim + self.intention_dim]] = mask[i];
        }
        Ok(x)
    }

    fn scale(&self, squashed: &mut Array2<T>) {
        let half = T::lit(0.5);
        for mut row in squashed.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let (lo, hi) = (self.action_low[j], self.action_high[j]);
                *v = half * (hi + lo) + half * (hi - lo) * *v;
            }
        }
    }

    pub fn act_batch(&self, obs: ArrayView2<T>, intention: ArrayView2<T>, mask: ArrayView1<T>) -> Result<Array2<T>> {
        let x = self.input(obs, intention, mask)?;
        let mut y = self.net.predict_batch(x.view())?;
        self.scale(&mut y);
        Ok(y)
    }

    pub fn act(&self, obs: &[T], intention: &[T], mask: T) -> Result<Vec<T>> {
        let y = self.act_batch(row(obs)?, row(intention)?, ArrayView1::from(std::slice::from_ref(&mask)))?;
        Ok(y.into_raw_vec_and_offset().0)
    }

    pub fn policy_loss_and_grads(&self, critic: &dyn ActionValue<T>, batch: &PolicyBatch<T>) -> Result<(T, Gradients<T>)> {
        let x = self.input(batch.own_obs.view(), batch.intention.view(), batch.mask.view())?;
        let (mut y, cache) = self.net.forward_batch(x.view())?;
        self.scale(&mut y);
        let (q, dq) = critic.value_and_action_grad(batch.joint_obs.view(), y.view())?;
        let n = T::lit(batch.len() as f64);
        let loss = -q.sum() / n;
        let half = T::lit(0.5);
        let mut grad = dq.mapv(|g| -g / n);
        for mut r in grad.rows_mut() {
            for (j, g) in r.iter_mut().enumerate() {
                *g = *g * half * (self.action_high[j] - self.action_low[j]);
            }
        }
        let (grads, _) = self.net.backward_batch(&cache, grad.view())?;
        Ok((loss, grads))
    }

    pub fn policy_update(&mut self, critic: &dyn ActionValue<T>, batch: &PolicyBatch<T>, adam: &AdamConfig) -> Result<StepReport<T>> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty policy batch".into()));
        }
        let (loss, grads) = self.policy_loss_and_grads(critic, batch)?;
        if !loss.is_finite() {
            return Ok(StepReport { loss, applied: false });
        }
        let applied = self.net.adam_step(&grads, adam)?;
        Ok(StepReport { loss, applied })
    }
}
