//! Off-policy training loop: masked intention-guided rollouts, replay,
//! per-agent actor/critic updates, self-reference distillation and periodic
//! evaluation.

mod agent;
mod config;
mod eval;
mod metrics;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub use agent::AgentPolicy;
pub use config::{Ablation, Precision, TrainConfig, TrainerConfig};
pub use eval::{evaluate, Controller, EvalResult, LearnedController, RandomController, ScriptedReacher};
pub use metrics::{read_curve, write_header, write_row, Counters, MetricsRow, RunMetrics, ABSENT, METRICS_HEADER};

use crate::buffers::{self_reference_update, AgentStep, EpisodeTrace, ReferenceBuffer, ReplayBuffer, Transition, TransitionShape};
use crate::consistency::{ConsistencyPolicy, DeterministicPolicy, PolicyBatch};
use crate::critic::{CriticBatch, CriticPair};
use crate::diffnet::{Container, Network};
use crate::env::{Env, EnvSpec};
use crate::error::{Error, Result};
use crate::intention::{entropy, sample_mask, IntentionBatch, IntentionLearner, MaskPhase, ObservationHistory};
use crate::scalar::Scalar;
use metrics::Mean;

const STREAM_ENV: u64 = 0;
const STREAM_MASK: u64 = 1;
const STREAM_WARMUP: u64 = 2;
const STREAM_SAMPLE: u64 = 3;
const STREAM_INIT: u64 = 4;
const STREAM_CODEBOOK: u64 = 5;
const STREAM_ACT: u64 = 1 << 16;
const STREAM_UPDATE: u64 = 1 << 17;

/// Offset between the training seed and the evaluation seed.
const EVAL_SEED_OFFSET: u64 = 0x5EED_0000_0000;

pub const CHECKPOINT_KIND: &str = "cpig-trainer";

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

#[derive(Clone, Debug)]
struct Streams {
    env: ChaCha8Rng,
    mask: ChaCha8Rng,
    warmup: ChaCha8Rng,
    sample: ChaCha8Rng,
    codebook: ChaCha8Rng,
    act: Vec<ChaCha8Rng>,
    update: Vec<ChaCha8Rng>,
}

impl Streams {
    fn new(cfg: &TrainerConfig, n_agents: usize) -> Self {
        let s = cfg.seed;
        Self {
            env: stream(s, STREAM_ENV),
            mask: stream(cfg.mask_seed.unwrap_or(s), STREAM_MASK),
            warmup: stream(s, STREAM_WARMUP),
            sample: stream(s, STREAM_SAMPLE),
            codebook: stream(s, STREAM_CODEBOOK),
            act: (0..n_agents as u64).map(|a| stream(s, STREAM_ACT + a)).collect(),
            update: (0..n_agents as u64).map(|a| stream(s, STREAM_UPDATE + a)).collect(),
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Interval {
    policy: Mean,
    critic: Mean,
    recon: Mean,
    commit: Mean,
    reference: Mean,
    mask_on: u64,
    mask_total: u64,
}

/// Complete training state for one run.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    cfg: TrainConfig,
    spec: EnvSpec,
    env: Env,
    pub policies: Vec<AgentPolicy<T>>,
    pub critics: Vec<CriticPair<T>>,
    pub learner: IntentionLearner<T>,
    pub references: Vec<ReferenceBuffer<T>>,
    replay: ReplayBuffer<T>,
    codebook_seeded: bool,
    rng: Streams,
    step: u64,
    updates_done: u64,
    histories: Vec<ObservationHistory<T>>,
    episode: Vec<Transition<T>>,
    episode_codes: Vec<Vec<Vec<T>>>,
    episode_start_states: Vec<Vec<f64>>,
    interval: Interval,
    usage_mark: Vec<u64>,
    metrics: RunMetrics,
}

fn to_t<T: Scalar>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&v| T::lit(v)).collect()
}

fn to_f64<T: Scalar>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|v| v.to_f64_lossless()).collect()
}

fn rows_of<T: Scalar, F: Fn(usize) -> Vec<T>>(n: usize, width: usize, f: F) -> Result<Array2<T>> {
    let mut out = Array2::zeros((n, width));
    for i in 0..n {
        let r = f(i);
        crate::error::check_dim("batch row", width, r.len())?;
        out.row_mut(i).assign(&ArrayView1::from(&r));
    }
    Ok(out)
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = EnvSpec::from_config(&cfg.env)?;
        let n = spec.n_agents;
        let m = cfg.intention.dim;
        let mut init = stream(cfg.trainer.seed, STREAM_INIT);
        let learner = IntentionLearner::new(&cfg.intention, n, spec.obs_dim, spec.state_dim, &mut init)?;
        let (low, high) = (vec![-T::one(); spec.action_dim], vec![T::one(); spec.action_dim]);
        let gamma = T::lit(cfg.trainer.gamma);
        let mut policies = Vec::with_capacity(n);
        let mut critics = Vec::with_capacity(n);
        for _ in 0..n {
            let p = if cfg.trainer.ablation.no_cp {
                AgentPolicy::Deterministic(DeterministicPolicy::new(
                    &cfg.policy.hidden,
                    spec.obs_dim,
                    spec.action_dim,
                    m,
                    low.clone(),
                    high.clone(),
                    &mut init,
                )?)
            } else {
                AgentPolicy::Consistency(ConsistencyPolicy::new(
                    &cfg.policy,
                    spec.obs_dim,
                    spec.action_dim,
                    m,
                    low.clone(),
                    high.clone(),
                    &mut init,
                )?)
            };
            policies.push(p);
            critics.push(CriticPair::new(&cfg.critic, spec.joint_obs_dim(), spec.action_dim, gamma, &mut init)?);
        }
        let shape = TransitionShape {
            n_agents: n,
            obs_dim: spec.obs_dim,
            history: cfg.intention.history,
            action_dim: spec.action_dim,
            state_dim: spec.state_dim,
        };
        let replay = ReplayBuffer::new(cfg.trainer.replay_capacity, shape)?;
        let references = (0..n).map(|_| ReferenceBuffer::new(cfg.trainer.reference_capacity)).collect::<Result<_>>()?;
        let metrics = RunMetrics {
            rows: Vec::new(),
            counters: Counters {
                policy_updates: vec![0; n],
                self_reference_updates: vec![0; n],
                ..Counters::default()
            },
        };
        let mut t = Self {
            env: Env::new(&cfg.env)?,
            rng: Streams::new(&cfg.trainer, n),
            histories: (0..n).map(|_| ObservationHistory::new(spec.obs_dim, cfg.intention.history)).collect(),
            usage_mark: vec![0; cfg.intention.codes],
            cfg,
            spec,
            policies,
            critics,
            learner,
            references,
            replay,
            codebook_seeded: false,
            step: 0,
            updates_done: 0,
            episode: Vec::new(),
            episode_codes: Vec::new(),
            episode_start_states: Vec::new(),
            interval: Interval::default(),
            metrics,
        };
        t.start_episode()?;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn env_spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn counters(&self) -> &Counters {
        &self.metrics.counters
    }

    pub fn metrics(&self) -> &RunMetrics {
        &self.metrics
    }

    pub fn replay(&self) -> &ReplayBuffer<T> {
        &self.replay
    }

    /// Global state at the start of every episode so far.
    pub fn episode_start_states(&self) -> &[Vec<f64>] {
        &self.episode_start_states
    }

    /// Total `F` evaluations over all agents, including those made by updates.
    pub fn f_evaluations(&self) -> u64 {
        self.policies.iter().map(AgentPolicy::f_evaluations).sum()
    }

    pub fn eval_seed(&self) -> u64 {
        self.cfg.trainer.seed.wrapping_add(EVAL_SEED_OFFSET)
    }

    fn start_episode(&mut self) -> Result<()> {
        let obs = self.env.reset(&mut self.rng.env);
        self.episode_start_states.push(self.env.global_state());
        for (h, o) in self.histories.iter_mut().zip(&obs) {
            h.reset();
            h.push(&to_t::<T>(o))?;
        }
        Ok(())
    }

    /// One environment step followed by the gradient updates it unlocks.
    pub fn step_once(&mut self) -> Result<()> {
        let n = self.spec.n_agents;
        let m = self.cfg.intention.dim;
        let warm = self.step < self.cfg.trainer.warmup_steps;
        let no_ig = self.cfg.trainer.ablation.no_ig;

        let mut indices = vec![0usize; n];
        let mut codes = Vec::with_capacity(n);
        let mut masks = vec![0u8; n];
        for a in 0..n {
            if no_ig {
                codes.push(vec![T::zero(); m]);
            } else {
                let (_, assignment) = self.learner.infer(&self.histories[a])?;
                indices[a] = assignment.index;
                codes.push(assignment.code);
                masks[a] = sample_mask(MaskPhase::Train, &self.cfg.intention, &mut self.rng.mask);
            }
        }

        let mut actions: Vec<Vec<T>> = Vec::with_capacity(n);
        for a in 0..n {
            if warm {
                actions.push((0..self.spec.action_dim).map(|_| T::lit(self.rng.warmup.random_range(-1.0..=1.0))).collect());
            } else {
                let obs = self.histories[a].latest().to_vec();
                actions.push(self.policies[a].act(&obs, &codes[a], T::lit(masks[a] as f64), &mut self.rng.act[a])?);
            }
        }

        if !warm && !no_ig {
            self.intention_update()?;
        }

        let state = to_t::<T>(&self.env.global_state());
        let joint: Vec<Vec<f64>> = actions.iter().map(|a| to_f64(a)).collect();
        let out = self.env.step(&joint)?;
        let next_state = to_t::<T>(&self.env.global_state());
        let agents = (0..n)
            .map(|a| AgentStep {
                history: self.histories[a].flat(),
                next_obs: to_t(&out.obs[a]),
                action: actions[a].clone(),
                intention: indices[a],
                mask: masks[a],
            })
            .collect();
        let transition = Transition {
            agents,
            state,
            next_state,
            reward: T::lit(out.reward),
            done: out.done,
        };
        self.replay.push(transition.clone())?;
        self.episode.push(transition);
        self.episode_codes.push(codes);
        for (h, o) in self.histories.iter_mut().zip(&out.obs) {
            h.push(&to_t::<T>(o))?;
        }
        self.interval.mask_on += masks.iter().map(|&v| v as u64).sum::<u64>();
        self.interval.mask_total += n as u64;
        self.step += 1;
        self.metrics.counters.env_steps = self.step;

        if !warm {
            let post = self.step - self.cfg.trainer.warmup_steps;
            let target = (post as f64 * self.cfg.trainer.updates_per_step).floor() as u64;
            while self.updates_done < target {
                self.update_round()?;
                self.updates_done += 1;
            }
        }

        if out.done {
            self.finish_episode()?;
        }
        Ok(())
    }

    fn intention_update(&mut self) -> Result<()> {
        let batch = self.replay.sample_uniform(self.cfg.trainer.batch_size, &mut self.rng.sample);
        if batch.is_empty() {
            return Ok(());
        }
        let n = self.spec.n_agents;
        let hw = self.cfg.intention.history * self.spec.obs_dim;
        let histories = (0..n).map(|a| rows_of(batch.len(), hw, |i| batch[i].agents[a].history.clone())).collect::<Result<Vec<_>>>()?;
        let states = rows_of(batch.len(), self.spec.state_dim, |i| batch[i].state.clone())?;
        if !self.codebook_seeded {
            let views: Vec<_> = histories.iter().map(|h| h.view()).collect();
            let stacked = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let z = self.learner.encode_batch(stacked.view())?;
            self.learner.codebook.seed_from(z.view(), &mut self.rng.codebook)?;
            self.codebook_seeded = true;
        }
        let report = self.learner.training_step(&IntentionBatch { histories, states }, &self.cfg.adam)?;
        self.learner.codebook.reseed_dead_codes(&mut self.rng.codebook);
        self.interval.recon.add(report.recon_loss.to_f64_lossless());
        self.interval.commit.add(report.commit_loss.to_f64_lossless());
        self.metrics.counters.intention_updates += 1;
        Ok(())
    }

    fn codes_for(&self, histories: &Array2<T>) -> Result<Array2<T>> {
        let m = self.cfg.intention.dim;
        if self.cfg.trainer.ablation.no_ig {
            return Ok(Array2::zeros((histories.nrows(), m)));
        }
        let (_, idx) = self.learner.quantize_batch(histories.view())?;
        let mut out = Array2::zeros((idx.len(), m));
        for (i, &k) in idx.iter().enumerate() {
            out.row_mut(i).assign(&self.learner.codebook.code(k));
        }
        Ok(out)
    }

    /// One shared minibatch; every agent takes a policy step, an optional
    /// self-reference step, and a critic step.
    fn update_round(&mut self) -> Result<()> {
        let cfg = self.cfg.clone();
        let ab = cfg.trainer.ablation;
        let n = self.spec.n_agents;
        let (od, hd, ad, jd) = (self.spec.obs_dim, cfg.intention.history * self.spec.obs_dim, self.spec.action_dim, self.spec.joint_obs_dim());
        let batch: Vec<Transition<T>> = self
            .replay
            .sample_uniform(cfg.trainer.batch_size, &mut self.rng.sample)
            .into_iter()
            .cloned()
            .collect();
        let b = batch.len();
        if b == 0 {
            return Ok(());
        }
        let joint_obs = rows_of(b, jd, |i| batch[i].joint_obs())?;
        let next_joint_obs = rows_of(b, jd, |i| batch[i].next_joint_obs())?;
        let reward = Array1::from_iter(batch.iter().map(|t| t.reward));
        let done = Array1::from_iter(batch.iter().map(|t| if t.done { T::one() } else { T::zero() }));
        let lambda = T::lit(cfg.trainer.reference_weight);
        for a in 0..n {
            let own = rows_of(b, od, |i| batch[i].agents[a].obs().to_vec())?;
            let next_own = rows_of(b, od, |i| batch[i].agents[a].next_obs.clone())?;
            let hist = rows_of(b, hd, |i| batch[i].agents[a].history.clone())?;
            let next_hist = rows_of(b, hd, |i| batch[i].agents[a].next_history())?;
            let action = rows_of(b, ad, |i| batch[i].agents[a].action.clone())?;
            let psi = self.codes_for(&hist)?;
            let psi_next = self.codes_for(&next_hist)?;
            let (mask, next_mask) = if ab.no_ig {
                (Array1::zeros(b), Array1::zeros(b))
            } else {
                (Array1::from_iter(batch.iter().map(|t| T::lit(t.agents[a].mask as f64))), Array1::ones(b))
            };

            let pb = PolicyBatch {
                joint_obs: joint_obs.clone(),
                own_obs: own,
                intention: psi,
                mask,
            };
            let report = self.policies[a].policy_update(&self.critics[a], &pb, &cfg.adam, &mut self.rng.update[a])?;
            self.interval.policy.add(report.loss.to_f64_lossless());
            self.metrics.counters.policy_updates[a] += 1;

            if !ab.no_sr {
                if let Some(p) = self.policies[a].as_consistency_mut() {
                    let loss = self_reference_update(
                        p,
                        &self.references[a],
                        cfg.trainer.batch_size,
                        lambda,
                        &cfg.adam,
                        cfg.policy.target_rate,
                        &mut self.rng.update[a],
                    )?;
                    if let Some(l) = loss {
                        self.interval.reference.add(l.to_f64_lossless());
                    }
                    self.metrics.counters.self_reference_updates[a] += 1;
                }
            }

            let next_action = self.policies[a].act_batch(next_own.view(), psi_next.view(), next_mask.view(), &mut self.rng.update[a])?;
            let cb = CriticBatch {
                joint_obs: joint_obs.clone(),
                action,
                reward: reward.clone(),
                done: done.clone(),
                next_joint_obs: next_joint_obs.clone(),
                next_action,
            };
            let report = self.critics[a].critic_update(&cb, &cfg.adam)?;
            let half = 0.5 * (report.loss1.to_f64_lossless() + report.loss2.to_f64_lossless());
            self.interval.critic.add(half);
            self.metrics.counters.dropped_targets += report.dropped as u64;
            self.critics[a].target_sync(cfg.critic.target_rate)?;
        }
        self.metrics.counters.critic_updates += 1;
        Ok(())
    }

    fn finish_episode(&mut self) -> Result<()> {
        self.metrics.counters.episodes += 1;
        let steps = std::mem::take(&mut self.episode);
        let codes = std::mem::take(&mut self.episode_codes);
        let ab = self.cfg.trainer.ablation;
        if self.step > self.cfg.trainer.warmup_steps && !ab.no_sr && !ab.no_cp {
            let trace = EpisodeTrace::new(steps, T::lit(self.cfg.trainer.gamma));
            for a in 0..self.spec.n_agents {
                let agent_codes: Vec<Vec<T>> = codes.iter().map(|c| c[a].clone()).collect();
                if let Some(p) = self.policies[a].as_consistency() {
                    self.references[a].refresh_reference(&trace, a, &agent_codes, p, &self.critics[a], &mut self.rng.update[a])?;
                }
            }
            self.metrics.counters.reference_admitted = self.references.iter().map(|r| r.admitted).sum();
            self.metrics.counters.reference_rejected = self.references.iter().map(|r| r.rejected).sum();
        }
        self.start_episode()
    }

    /// Decentralized controller over the current networks.
    pub fn controller(&self) -> LearnedController<'_, T> {
        let learner = (!self.cfg.trainer.ablation.no_ig).then_some(&self.learner);
        LearnedController::new(&self.policies, learner, self.cfg.intention.exec_mask_prob, self.cfg.intention.history)
    }

    pub fn evaluate(&self, episodes: usize, seed: u64) -> Result<EvalResult> {
        evaluate(&mut self.controller(), &self.cfg.env, episodes, seed, false)
    }

    /// Evaluates and appends a metrics row covering the interval since the last row.
    pub fn record_eval_point(&mut self) -> Result<MetricsRow> {
        let res = self.evaluate(self.cfg.trainer.eval_episodes, self.eval_seed())?;
        let counts = self.learner.codebook.usage_counts();
        let usage: Vec<u64> = counts.iter().zip(&self.usage_mark).map(|(c, m)| c - m).collect();
        self.usage_mark = counts.to_vec();
        let looked_up = usage.iter().sum::<u64>() > 0;
        let f_evaluations = self.f_evaluations();
        let iv = &mut self.interval;
        let row = MetricsRow {
            step: self.step,
            return_mean: res.mean,
            return_std: res.std,
            coverage: res.coverage,
            success_rate: res.success_rate,
            loss_policy: iv.policy.take(),
            loss_critic: iv.critic.take(),
            loss_recon: iv.recon.take(),
            loss_commit: iv.commit.take(),
            loss_ref: iv.reference.take(),
            mask_on_frac: (iv.mask_total > 0).then(|| iv.mask_on as f64 / iv.mask_total as f64),
            intention_entropy: looked_up.then(|| entropy(&usage)),
            usage: if looked_up { usage } else { Vec::new() },
            f_evaluations,
        };
        iv.mask_on = 0;
        iv.mask_total = 0;
        self.metrics.rows.push(row.clone());
        Ok(row)
    }

    /// Runs to `total_steps`, evaluating every `eval_interval` steps and at
    /// the end. With `out_dir`, streams `metrics.csv` and writes
    /// `checkpoint.cpig` at every evaluation point and `final.cpig` at the end.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<RunMetrics> {
        let mut csv = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let mut w = BufWriter::new(File::create(dir.join("metrics.csv"))?);
                write_header(&mut w)?;
                w.flush()?;
                Some(w)
            }
            None => None,
        };
        let total = self.cfg.trainer.total_steps;
        let interval = self.cfg.trainer.eval_interval;
        while self.step < total {
            let at = self.step;
            self.step_once().map_err(|e| Error::Training { step: at, source: Box::new(e) })?;
            if self.step % interval == 0 || self.step == total {
                let at = self.step;
                let row = self.record_eval_point().map_err(|e| Error::Training { step: at, source: Box::new(e) })?;
                if let Some(w) = csv.as_mut() {
                    write_row(&mut *w, &row)?;
                    w.flush()?;
                }
                if let (Some(dir), true) = (out_dir, self.cfg.trainer.checkpoints) {
                    self.checkpoint().save(dir.join("checkpoint.cpig"))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(dir.join("final.cpig"))?;
        }
        Ok(self.metrics.clone())
    }

    /// Networks, codebook and configuration. Replay contents are not included.
    pub fn checkpoint(&self) -> Container {
        let mut c = Container::new();
        c.manifest.meta = json!({
            "kind": CHECKPOINT_KIND,
            "config": self.cfg,
            "step": self.step,
            "scalar": T::NAME,
            "codebook_seeded": self.codebook_seeded,
        });
        for (a, p) in self.policies.iter().enumerate() {
            c.put_network(&format!("policy.{a}"), p.net());
            if let Some(cp) = p.as_consistency() {
                c.put_network(&format!("policy.{a}.target"), cp.target_net());
            }
        }
        for (a, q) in self.critics.iter().enumerate() {
            c.put_network(&format!("critic.{a}.q1"), &q.q1);
            c.put_network(&format!("critic.{a}.q2"), &q.q2);
            c.put_network(&format!("critic.{a}.q1_target"), &q.q1_target);
            c.put_network(&format!("critic.{a}.q2_target"), &q.q2_target);
        }
        c.put_network("intention.encoder", &self.learner.encoder);
        c.put_network("intention.decoder", &self.learner.decoder);
        c.put_array("intention.codebook", self.learner.codebook.codes().iter().map(|v| v.to_f64_lossless()).collect());
        c.put_array("intention.usage", self.learner.codebook.usage_counts().iter().map(|&u| u as f64).collect());
        c
    }

    /// Rebuilds a trainer from [`Trainer::checkpoint`] output.
    pub fn from_checkpoint(c: &Container) -> Result<Self> {
        let meta = &c.manifest.meta;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Format("not a trainer checkpoint".into()));
        }
        let cfg: TrainConfig = serde_json::from_value(meta.get("config").cloned().unwrap_or_default())?;
        let mut t = Self::new(cfg)?;
        let load = |name: &str, like: &Network<T>| -> Result<Network<T>> {
            let net = c.network::<T>(name)?;
            if net.spec() != like.spec() {
                return Err(Error::Format(format!("network `{name}` has an unexpected shape")));
            }
            Ok(net)
        };
        for a in 0..t.policies.len() {
            let net = load(&format!("policy.{a}"), t.policies[a].net())?;
            match &mut t.policies[a] {
                AgentPolicy::Consistency(p) => {
                    let target = load(&format!("policy.{a}.target"), p.target_net())?;
                    *p.net_mut() = net;
                    *p.target_net_mut() = target;
                }
                AgentPolicy::Deterministic(p) => {
                    let (od, ad, md) = (p.obs_dim(), p.action_dim(), p.intention_dim());
                    *p = DeterministicPolicy::from_network(net, od, ad, md, vec![-T::one(); ad], vec![T::one(); ad])?;
                }
            }
        }
        for a in 0..t.critics.len() {
            let q = &t.critics[a];
            let q1 = load(&format!("critic.{a}.q1"), &q.q1)?;
            let q2 = load(&format!("critic.{a}.q2"), &q.q2)?;
            let t1 = load(&format!("critic.{a}.q1_target"), &q.q1_target)?;
            let t2 = load(&format!("critic.{a}.q2_target"), &q.q2_target)?;
            t.critics[a] = CriticPair::from_parts(q1, q2, t1, t2, q.gamma, q.joint_obs_dim())?;
        }
        t.learner.encoder = load("intention.encoder", &t.learner.encoder)?;
        t.learner.decoder = load("intention.decoder", &t.learner.decoder)?;
        let (k, m) = (t.learner.codebook.len(), t.learner.codebook.dim());
        let codes = c.array("intention.codebook")?;
        let codes = Array2::from_shape_vec((k, m), codes.iter().map(|&v| T::lit(v)).collect())
            .map_err(|_| Error::Format("codebook has an unexpected shape".into()))?;
        let usage = c.array("intention.usage")?.iter().map(|&u| u as u64).collect();
        t.learner.codebook.restore(codes, usage)?;
        t.codebook_seeded = meta.get("codebook_seeded").and_then(|v| v.as_bool()).unwrap_or(true);
        t.step = meta.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Container::load(path)?)
    }
}

/// Reads the precision recorded in a trainer checkpoint.
pub fn checkpoint_precision(c: &Container) -> Result<Precision> {
    match c.manifest.meta.get("scalar").and_then(|s| s.as_str()) {
        Some("f64") => Ok(Precision::F64),
        Some("f32") => Ok(Precision::F32),
        other => Err(Error::Format(format!("unknown checkpoint scalar {other:?}"))),
    }
}

/// Trains with the configured precision.
pub fn run_training(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<RunMetrics> {
    match cfg.trainer.precision {
        Precision::F64 => Trainer::<f64>::new(cfg.clone())?.run(out_dir),
        Precision::F32 => Trainer::<f32>::new(cfg.clone())?.run(out_dir),
    }
}
