//! Replay storage, Monte-Carlo returns, and the self-reference buffer with
//! its consistency-distillation loss.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::consistency::{ConsistencyPolicy, NetCopy};
use crate::critic::CriticPair;
use crate::diffnet::{AdamConfig, Container, Gradients};
use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

/// Fixed-capacity ring that overwrites its oldest element.
#[derive(Clone, Debug)]
pub struct RingBuffer<E> {
    items: Vec<E>,
    capacity: usize,
    cursor: usize,
}

impl<E> RingBuffer<E> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("buffer capacity must be positive".into()));
        }
        Ok(Self {
            items: Vec::new(),
            capacity,
            cursor: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, item: E) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.cursor] = item;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Element `i` in storage order (not insertion order once wrapped).
    pub fn get(&self, i: usize) -> Option<&E> {
        self.items.get(i)
    }

    /// Elements oldest first.
    pub fn iter_chronological(&self) -> impl Iterator<Item = &E> {
        let split = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// Up to `batch` distinct storage indices, uniformly at random.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        let n = batch.min(self.items.len());
        index::sample(rng, self.items.len(), n).into_vec()
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&E> {
        self.sample_indices(batch, rng).into_iter().map(|i| &self.items[i]).collect()
    }
}

/// One agent's slice of a transition. The current observation is the last
/// frame of `history`; the next history is `history` shifted by `next_obs`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentStep<T> {
    pub history: Vec<T>,
    pub next_obs: Vec<T>,
    pub action: Vec<T>,
    pub intention: usize,
    pub mask: u8,
}

impl<T: Scalar> AgentStep<T> {
    pub fn obs(&self) -> &[T] {
        &self.history[self.history.len() - self.next_obs.len()..]
    }

    pub fn next_history(&self) -> Vec<T> {
        let d = self.next_obs.len();
        let mut out = self.history[d..].to_vec();
        out.extend_from_slice(&self.next_obs);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition<T> {
    pub agents: Vec<AgentStep<T>>,
    pub state: Vec<T>,
    pub next_state: Vec<T>,
    pub reward: T,
    pub done: bool,
}

impl<T: Scalar> Transition<T> {
    pub fn joint_obs(&self) -> Vec<T> {
        self.agents.iter().flat_map(|a| a.obs().iter().copied()).collect()
    }

    pub fn next_joint_obs(&self) -> Vec<T> {
        self.agents.iter().flat_map(|a| a.next_obs.iter().copied()).collect()
    }

    pub fn joint_action(&self) -> Vec<T> {
        self.agents.iter().flat_map(|a| a.action.iter().copied()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.reward.is_finite() {
            return Err(Error::NonFinite("transition reward"));
        }
        if let Some(first) = self.agents.first() {
            for a in &self.agents {
                check_dim("transition history", first.history.len(), a.history.len())?;
                check_dim("transition next_obs", first.next_obs.len(), a.next_obs.len())?;
                if a.next_obs.is_empty() || a.history.len() % a.next_obs.len() != 0 {
                    return Err(Error::InvalidArgument("history length must be a multiple of the observation size".into()));
                }
            }
        }
        check_dim("transition next_state", self.state.len(), self.next_state.len())
    }
}

/// Dimensions fixed for every transition in a buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransitionShape {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub history: usize,
    pub action_dim: usize,
    pub state_dim: usize,
}

impl TransitionShape {
    fn agent_width(&self) -> usize {
        self.history * self.obs_dim + self.obs_dim + self.action_dim + 2
    }

    fn width(&self) -> usize {
        self.n_agents * self.agent_width() + 2 * self.state_dim + 2
    }

    pub fn check(&self, t: &Transition<impl Scalar>) -> Result<()> {
        check_dim("transition agents", self.n_agents, t.agents.len())?;
        for a in &t.agents {
            check_dim("transition history", self.history * self.obs_dim, a.history.len())?;
            check_dim("transition next_obs", self.obs_dim, a.next_obs.len())?;
            check_dim("transition action", self.action_dim, a.action.len())?;
        }
        check_dim("transition state", self.state_dim, t.state.len())?;
        t.validate()
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    ring: RingBuffer<Transition<T>>,
    shape: TransitionShape,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize, shape: TransitionShape) -> Result<Self> {
        Ok(Self {
            ring: RingBuffer::new(capacity)?,
            shape,
        })
    }

    pub fn shape(&self) -> TransitionShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.ring.capacity()
    }

    pub fn push(&mut self, t: Transition<T>) -> Result<()> {
        self.shape.check(&t)?;
        self.ring.push(t);
        Ok(())
    }

    pub fn get(&self, i: usize) -> Option<&Transition<T>> {
        self.ring.get(i)
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Transition<T>> {
        self.ring.sample_uniform(batch, rng)
    }

    pub fn iter_chronological(&self) -> impl Iterator<Item = &Transition<T>> {
        self.ring.iter_chronological()
    }

    /// Stores the contents oldest first under `prefix` in `c`.
    pub fn snapshot_into(&self, c: &mut Container, prefix: &str) {
        let s = self.shape;
        let mut flat = Vec::with_capacity(self.len() * s.width());
        for t in self.iter_chronological() {
            for a in &t.agents {
                flat.extend(a.history.iter().chain(&a.next_obs).chain(&a.action).map(|v| v.to_f64_lossless()));
                flat.push(a.intention as f64);
                flat.push(a.mask as f64);
            }
            flat.extend(t.state.iter().chain(&t.next_state).map(|v| v.to_f64_lossless()));
            flat.push(t.reward.to_f64_lossless());
            flat.push(if t.done { 1.0 } else { 0.0 });
        }
        c.put_array(&format!("{prefix}.transitions"), flat);
        if !c.manifest.meta.is_object() {
            c.manifest.meta = json!({});
        }
        c.manifest.meta[format!("{prefix}.shape")] = json!([s.n_agents, s.obs_dim, s.history, s.action_dim, s.state_dim]);
        c.manifest.meta[format!("{prefix}.capacity")] = json!(self.capacity());
    }

    pub fn restore_from(c: &Container, prefix: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("replay snapshot `{prefix}`: {what}"));
        let dims: Vec<usize> = serde_json::from_value(c.manifest.meta[format!("{prefix}.shape")].clone()).map_err(|_| bad("missing shape"))?;
        if dims.len() != 5 {
            return Err(bad("shape must have 5 entries"));
        }
        let shape = TransitionShape {
            n_agents: dims[0],
            obs_dim: dims[1],
            history: dims[2],
            action_dim: dims[3],
            state_dim: dims[4],
        };
        let capacity: usize = serde_json::from_value(c.manifest.meta[format!("{prefix}.capacity")].clone()).map_err(|_| bad("missing capacity"))?;
        let flat = c.array(&format!("{prefix}.transitions"))?;
        let w = shape.width();
        if w == 0 || flat.len() % w != 0 {
            return Err(bad("array length does not match shape"));
        }
        let mut out = Self::new(capacity, shape)?;
        for rec in flat.chunks(w) {
            let mut cur = Cursor { data: rec, at: 0 };
            let agents = (0..shape.n_agents)
                .map(|_| AgentStep {
                    history: cur.take(shape.history * shape.obs_dim),
                    next_obs: cur.take(shape.obs_dim),
                    action: cur.take(shape.action_dim),
                    intention: cur.scalar() as usize,
                    mask: cur.scalar() as u8,
                })
                .collect();
            let state = cur.take(shape.state_dim);
            let next_state = cur.take(shape.state_dim);
            let reward = T::lit(cur.scalar());
            let done = cur.scalar() != 0.0;
            out.push(Transition {
                agents,
                state,
                next_state,
                reward,
                done,
            })?;
        }
        Ok(out)
    }
}

struct Cursor<'a> {
    data: &'a [f64],
    at: usize,
}

impl Cursor<'_> {
    fn take<T: Scalar>(&mut self, n: usize) -> Vec<T> {
        let out = self.data[self.at..self.at + n].iter().map(|&x| T::lit(x)).collect();
        self.at += n;
        out
    }

    fn scalar(&mut self) -> f64 {
        self.at += 1;
        self.data[self.at - 1]
    }
}

/// `R_t = sum_{k >= t} gamma^(k - t) r_k`, computed backwards.
pub fn compute_returns<T: Scalar>(rewards: &[T], gamma: T) -> Vec<T> {
    let mut out = vec![T::zero(); rewards.len()];
    let mut acc = T::zero();
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// A completed episode with its per-step returns.
#[derive(Clone, Debug)]
pub struct EpisodeTrace<T> {
    pub steps: Vec<Transition<T>>,
    pub returns: Vec<T>,
}

impl<T: Scalar> EpisodeTrace<T> {
    pub fn new(steps: Vec<Transition<T>>, gamma: T) -> Self {
        let rewards: Vec<T> = steps.iter().map(|t| t.reward).collect();
        let returns = compute_returns(&rewards, gamma);
        Self { steps, returns }
    }
}

/// One agent's candidate for behaviour distillation.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceEntry<T> {
    pub obs: Vec<T>,
    pub action: Vec<T>,
    pub ret: T,
    pub intention: usize,
    /// Intention code recorded at collection time.
    pub code: Vec<T>,
    pub mask: u8,
}

/// Inputs of one admission test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Admission {
    pub ret: f64,
    pub q: f64,
    pub admitted: bool,
}

/// Admits entries whose return reaches the value of the current policy's action.
#[derive(Clone, Debug)]
pub struct ReferenceBuffer<T> {
    ring: RingBuffer<ReferenceEntry<T>>,
    log: VecDeque<Admission>,
    log_capacity: usize,
    pub admitted: u64,
    pub rejected: u64,
}

impl<T: Scalar> ReferenceBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        Ok(Self {
            ring: RingBuffer::new(capacity)?,
            log: VecDeque::new(),
            log_capacity: 10_000,
            admitted: 0,
            rejected: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.ring.capacity()
    }

    pub fn get(&self, i: usize) -> Option<&ReferenceEntry<T>> {
        self.ring.get(i)
    }

    /// Most recent admission decisions, oldest first.
    pub fn admission_log(&self) -> impl Iterator<Item = &Admission> {
        self.log.iter()
    }

    /// Admits `entry` iff `entry.ret >= q`.
    pub fn offer(&mut self, entry: ReferenceEntry<T>, q: T) -> bool {
        let admitted = entry.ret >= q;
        if self.log.len() == self.log_capacity {
            self.log.pop_front();
        }
        self.log.push_back(Admission {
            ret: entry.ret.to_f64_lossless(),
            q: q.to_f64_lossless(),
            admitted,
        });
        if admitted {
            self.admitted += 1;
            self.ring.push(entry);
        } else {
            self.rejected += 1;
        }
        admitted
    }

    /// Evaluates every step of `episode` for `agent`: draws `u_pi` from the
    /// current policy with the recorded intention and mask, then admits the
    /// stored `(o, u, R)` iff `R >= min(Q1, Q2)(o, u_pi)`.
    ///
    /// `codes[t]` is the intention code agent `agent` used at step `t`.
    pub fn refresh_reference<R: Rng + ?Sized>(
        &mut self,
        episode: &EpisodeTrace<T>,
        agent: usize,
        codes: &[Vec<T>],
        policy: &ConsistencyPolicy<T>,
        critic: &CriticPair<T>,
        rng: &mut R,
    ) -> Result<usize> {
        let n = episode.steps.len();
        if n == 0 {
            return Ok(0);
        }
        check_dim("reference codes", n, codes.len())?;
        let obs_dim = policy.obs_dim();
        let m = policy.intention_dim();
        let mut obs = Array2::zeros((n, obs_dim));
        let mut psi = Array2::zeros((n, m));
        let mut mask = Array1::zeros(n);
        let mut joint = Array2::zeros((n, critic.joint_obs_dim()));
        for (t, step) in episode.steps.iter().enumerate() {
            let a = step.agents.get(agent).ok_or_else(|| Error::InvalidArgument(format!("agent {agent} out of range")))?;
            obs.row_mut(t).assign(&ArrayView1::from(a.obs()));
            check_dim("reference code", m, codes[t].len())?;
            psi.row_mut(t).assign(&ArrayView1::from(&codes[t]));
            mask[t] = T::lit(a.mask as f64);
            joint.row_mut(t).assign(&ArrayView1::from(&step.joint_obs()));
        }
        let noise = policy.draw_initial_noise(n, rng);
        let u_pi = policy.sample_from_noise(obs.view(), psi.view(), mask.view(), noise.view(), false)?;
        let q = critic.min_q(joint.view(), u_pi.action.view())?;
        let mut admitted = 0;
        for (t, step) in episode.steps.iter().enumerate() {
            let a = &step.agents[agent];
            let entry = ReferenceEntry {
                obs: a.obs().to_vec(),
                action: a.action.clone(),
                ret: episode.returns[t],
                intention: a.intention,
                code: codes[t].clone(),
                mask: a.mask,
            };
            admitted += usize::from(self.offer(entry, q[t]));
        }
        Ok(admitted)
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&ReferenceEntry<T>> {
        self.ring.sample_uniform(batch, rng)
    }

    pub fn snapshot_into(&self, c: &mut Container, prefix: &str) {
        let mut flat = Vec::new();
        let (mut od, mut ad, mut md) = (0, 0, 0);
        for e in self.ring.iter_chronological() {
            (od, ad, md) = (e.obs.len(), e.action.len(), e.code.len());
            flat.extend(e.obs.iter().chain(&e.action).chain(&e.code).map(|v| v.to_f64_lossless()));
            flat.extend([e.ret.to_f64_lossless(), e.intention as f64, e.mask as f64]);
        }
        c.put_array(&format!("{prefix}.entries"), flat);
        if !c.manifest.meta.is_object() {
            c.manifest.meta = json!({});
        }
        c.manifest.meta[format!("{prefix}.shape")] = json!([od, ad, md]);
        c.manifest.meta[format!("{prefix}.capacity")] = json!(self.capacity());
    }

    pub fn restore_from(c: &Container, prefix: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("reference snapshot `{prefix}`: {what}"));
        let dims: Vec<usize> = serde_json::from_value(c.manifest.meta[format!("{prefix}.shape")].clone()).map_err(|_| bad("missing shape"))?;
        let capacity: usize = serde_json::from_value(c.manifest.meta[format!("{prefix}.capacity")].clone()).map_err(|_| bad("missing capacity"))?;
        if dims.len() != 3 {
            return Err(bad("shape must have 3 entries"));
        }
        let flat = c.array(&format!("{prefix}.entries"))?;
        let w = dims.iter().sum::<usize>() + 3;
        if flat.len() % w != 0 {
            return Err(bad("array length does not match shape"));
        }
        let mut out = Self::new(capacity)?;
        for rec in flat.chunks(w) {
            let mut cur = Cursor { data: rec, at: 0 };
            let entry = ReferenceEntry {
                obs: cur.take(dims[0]),
                action: cur.take(dims[1]),
                code: cur.take(dims[2]),
                ret: T::lit(cur.scalar()),
                intention: cur.scalar() as usize,
                mask: cur.scalar() as u8,
            };
            out.ring.push(entry);
        }
        Ok(out)
    }
}

/// Inputs for one self-reference step, with the noise levels and shared
/// perturbation fixed.
#[derive(Clone, Debug)]
pub struct ReferenceBatch<T> {
    pub obs: Array2<T>,
    pub action: Array2<T>,
    pub code: Array2<T>,
    pub mask: Array1<T>,
    /// 1-based lower level `n` per sample, in `1..N`.
    pub level: Vec<usize>,
    /// Shared perturbation `z` per sample.
    pub noise: Array2<T>,
}

impl<T: Scalar> ReferenceBatch<T> {
    /// Stacks entries and draws `n ~ U{1..N-1}` and `z ~ N(0, I)` per sample.
    pub fn draw<R: Rng + ?Sized>(entries: &[&ReferenceEntry<T>], levels: usize, rng: &mut R) -> Result<Self> {
        let b = entries.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty reference batch".into()));
        }
        if levels < 2 {
            return Err(Error::InvalidArgument("self-reference needs at least 2 noise levels".into()));
        }
        let od = entries[0].obs.len();
        let ad = entries[0].action.len();
        let md = entries[0].code.len();
        let mut out = Self {
            obs: Array2::zeros((b, od)),
            action: Array2::zeros((b, ad)),
            code: Array2::zeros((b, md)),
            mask: Array1::zeros(b),
            level: Vec::with_capacity(b),
            noise: Array2::zeros((b, ad)),
        };
        for (i, e) in entries.iter().enumerate() {
            check_dim("reference obs", od, e.obs.len())?;
            check_dim("reference action", ad, e.action.len())?;
            check_dim("reference code", md, e.code.len())?;
            out.obs.row_mut(i).assign(&ArrayView1::from(&e.obs));
            out.action.row_mut(i).assign(&ArrayView1::from(&e.action));
            out.code.row_mut(i).assign(&ArrayView1::from(&e.code));
            out.mask[i] = T::lit(e.mask as f64);
            out.level.push(rng.random_range(1..levels));
            for j in 0..ad {
                out.noise[[i, j]] = T::lit(rng.sample::<f64, _>(StandardNormal));
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.level.len()
    }

    pub fn is_empty(&self) -> bool {
        self.level.is_empty()
    }
}

/// `mean lambda * ||f_theta(o, u + tau_{n+1} z, psi, tau_{n+1})
///  - f_target(o, u + tau_n z, psi, tau_n)||^2` and its online gradient.
pub fn reference_loss_and_grads<T: Scalar>(policy: &ConsistencyPolicy<T>, batch: &ReferenceBatch<T>, lambda: T) -> Result<(T, Gradients<T>)> {
    let b = batch.len();
    let schedule = policy.schedule();
    let mut tau_hi = Array1::zeros(b);
    let mut tau_lo = Array1::zeros(b);
    for (i, &n) in batch.level.iter().enumerate() {
        if n == 0 || n >= schedule.levels() {
            return Err(Error::InvalidArgument(format!("reference level {n} outside 1..{}", schedule.levels())));
        }
        tau_lo[i] = schedule.tau(n);
        tau_hi[i] = schedule.tau(n + 1);
    }
    let perturb = |tau: &Array1<T>| -> Array2<T> {
        let mut u = batch.action.clone();
        for (i, mut row) in u.rows_mut().into_iter().enumerate() {
            for (v, &z) in row.iter_mut().zip(batch.noise.row(i)) {
                *v = *v + tau[i] * z;
            }
        }
        u
    };
    let (u_hi, u_lo) = (perturb(&tau_hi), perturb(&tau_lo));
    let online = policy.apply_batch(NetCopy::Online, batch.obs.view(), u_hi.view(), batch.code.view(), batch.mask.view(), tau_hi.view(), true)?;
    let target = policy.apply_batch(NetCopy::Target, batch.obs.view(), u_lo.view(), batch.code.view(), batch.mask.view(), tau_lo.view(), false)?;
    let diff = &online.action - &target.action;
    let bn = T::lit(b as f64);
    let loss = lambda * diff.iter().fold(T::zero(), |acc, &d| acc + d * d) / bn;
    let grad = diff.mapv(|d| T::lit(2.0) * lambda * d / bn);
    let grads = policy.backprop(&online, grad.view())?;
    Ok((loss, grads))
}

/// One Adam step on the reference loss, then an EMA blend of the target.
/// Returns `None` for an empty buffer.
pub fn self_reference_update<T: Scalar, R: Rng + ?Sized>(
    policy: &mut ConsistencyPolicy<T>,
    buffer: &ReferenceBuffer<T>,
    batch_size: usize,
    lambda: T,
    adam: &AdamConfig,
    target_rate: f64,
    rng: &mut R,
) -> Result<Option<T>> {
    if buffer.is_empty() || batch_size == 0 {
        return Ok(None);
    }
    let entries = buffer.sample_uniform(batch_size, rng);
    let batch = ReferenceBatch::draw(&entries, policy.schedule().levels(), rng)?;
    let (loss, grads) = reference_loss_and_grads(policy, &batch, lambda)?;
    if loss.is_finite() {
        policy.net_mut().adam_step(&grads, adam)?;
    }
    policy.sync_target(target_rate)?;
    Ok(Some(loss))
}

/// Stacks rows of equal width into a matrix.
pub fn stack_rows<T: Scalar>(rows: &[&[T]], width: usize) -> Result<Array2<T>> {
    let mut out = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        check_dim("stacked row", width, r.len())?;
        out.row_mut(i).assign(&ArrayView1::from(*r));
    }
    Ok(out)
}

/// View of a single row as a 1-row matrix.
pub fn as_row<T>(xs: &[T]) -> Result<ArrayView2<'_, T>> {
    ArrayView2::from_shape((1, xs.len()), xs).map_err(|e| Error::InvalidArgument(e.to_string()))
}
