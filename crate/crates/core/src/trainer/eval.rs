use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{scripted_reacher_plan, Env, EnvConfig, EnvState, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::intention::{mask_from_quantile, EmbeddingRecord, IntentionLearner, ObservationHistory};
use crate::scalar::Scalar;

use super::agent::AgentPolicy;

/// Decentralized actor used during evaluation. `act` sees one agent's own
/// observation history and the time index, nothing else.
pub trait Controller {
    fn history_len(&self) -> usize {
        1
    }

    fn episode_start(&mut self, _env: &Env) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, agent: usize, t: usize, history: &ObservationHistory<f64>, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;

    /// Intention index and mask used by the last `act` call for `agent`.
    fn last_guidance(&self, _agent: usize) -> (Option<usize>, u8) {
        (None, 0)
    }
}

/// Uniform random actions in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct RandomController {
    pub action_dim: usize,
}

impl Controller for RandomController {
    fn act(&mut self, _agent: usize, _t: usize, _history: &ObservationHistory<f64>, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok((0..self.action_dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
    }
}

/// Open-loop plan that visits all four reacher targets. The plan is computed
/// from the start state, so this is an oracle rather than a decentralized policy.
#[derive(Clone, Debug, Default)]
pub struct ScriptedReacher {
    plan: Vec<Vec<Vec<f64>>>,
}

impl Controller for ScriptedReacher {
    fn episode_start(&mut self, env: &Env) -> Result<()> {
        match env.state() {
            EnvState::Arm(s) => {
                self.plan = scripted_reacher_plan(s, env.spec().episode_length);
                Ok(())
            }
            EnvState::Particles(_) => Err(Error::InvalidArgument("scripted controller requires reacher4".into())),
        }
    }

    fn act(&mut self, agent: usize, t: usize, _history: &ObservationHistory<f64>, _rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(self.plan.get(t).map_or_else(|| vec![0.0], |step| step[agent].clone()))
    }
}

/// Trained policies with the frozen shared codebook. Lookups do not touch
/// usage statistics.
pub struct LearnedController<'a, T: Scalar> {
    pub policies: &'a [AgentPolicy<T>],
    /// `None` runs every agent unguided (mask 0, zero intention).
    pub learner: Option<&'a IntentionLearner<T>>,
    pub exec_mask_prob: f64,
    pub history: usize,
    guidance: Vec<(Option<usize>, u8)>,
    /// Filled with every embedding computed when `Some`.
    pub embeddings: Option<Vec<EmbeddingRecord<f64>>>,
    calls: u64,
}

impl<'a, T: Scalar> LearnedController<'a, T> {
    pub fn new(policies: &'a [AgentPolicy<T>], learner: Option<&'a IntentionLearner<T>>, exec_mask_prob: f64, history: usize) -> Self {
        Self {
            policies,
            learner,
            exec_mask_prob,
            history,
            guidance: vec![(None, 0); policies.len()],
            embeddings: None,
            calls: 0,
        }
    }

    pub fn recording_embeddings(mut self) -> Self {
        self.embeddings = Some(Vec::new());
        self
    }
}

impl<T: Scalar> Controller for LearnedController<'_, T> {
    fn history_len(&self) -> usize {
        self.history
    }

    fn act(&mut self, agent: usize, _t: usize, history: &ObservationHistory<f64>, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let policy = self.policies.get(agent).ok_or_else(|| Error::InvalidArgument(format!("agent {agent} out of range")))?;
        let obs: Vec<T> = history.latest().iter().map(|&v| T::lit(v)).collect();
        let (psi, mask, index) = match self.learner {
            Some(learner) => {
                let flat: Vec<T> = history.flat().iter().map(|&v| T::lit(v)).collect();
                let z = learner.encode_flat(&flat)?;
                let (k, _) = learner.codebook.nearest(ArrayView1::from(&z))?;
                let mask = if self.exec_mask_prob >= 1.0 {
                    1
                } else {
                    mask_from_quantile(rng.random::<f64>(), self.exec_mask_prob)
                };
                if let Some(rec) = self.embeddings.as_mut() {
                    rec.push(EmbeddingRecord {
                        step: self.calls / self.policies.len() as u64,
                        agent,
                        index: k,
                        embedding: z.iter().map(|v| v.to_f64_lossless()).collect(),
                    });
                }
                (learner.codebook.code(k).to_vec(), mask, Some(k))
            }
            None => (vec![T::zero(); policy_intention_dim(policy)], 0, None),
        };
        self.calls += 1;
        self.guidance[agent] = (index, mask);
        let a = policy.act(&obs, &psi, T::lit(mask as f64), rng)?;
        Ok(a.iter().map(|v| v.to_f64_lossless()).collect())
    }

    fn last_guidance(&self, agent: usize) -> (Option<usize>, u8) {
        self.guidance.get(agent).copied().unwrap_or((None, 0))
    }
}

fn policy_intention_dim<T: Scalar>(p: &AgentPolicy<T>) -> usize {
    match p {
        AgentPolicy::Consistency(c) => c.intention_dim(),
        AgentPolicy::Deterministic(d) => d.intention_dim(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Mean end-of-episode coverage.
    pub coverage: f64,
    /// Fraction of episodes in which the sparse task condition held at some step.
    pub success_rate: f64,
    pub trajectories: Vec<Vec<TrajectoryRecord>>,
}

/// Runs `episodes` seeded episodes. Environment resets draw from one stream
/// of `seed` and each agent acts with its own stream.
pub fn evaluate(controller: &mut dyn Controller, env_cfg: &EnvConfig, episodes: usize, seed: u64, record: bool) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let mut env = Env::new(env_cfg)?;
    let spec = env.spec().clone();
    let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agent_rngs: Vec<ChaCha8Rng> = (0..spec.n_agents)
        .map(|a| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(1 + a as u64);
            r
        })
        .collect();
    let h = controller.history_len().max(1);
    let mut returns = Vec::with_capacity(episodes);
    let mut coverage = 0.0;
    let mut successes = 0usize;
    let mut trajectories = Vec::new();
    for _ in 0..episodes {
        let obs = env.reset(&mut env_rng);
        controller.episode_start(&env)?;
        let mut histories: Vec<ObservationHistory<f64>> = (0..spec.n_agents).map(|_| ObservationHistory::new(spec.obs_dim, h)).collect();
        for (hist, o) in histories.iter_mut().zip(&obs) {
            hist.push(o)?;
        }
        let mut total = 0.0;
        let mut success = false;
        let mut records = Vec::new();
        for t in 0..spec.episode_length {
            let state = record.then(|| env.global_state());
            let mut joint = Vec::with_capacity(spec.n_agents);
            for a in 0..spec.n_agents {
                joint.push(controller.act(a, t, &histories[a], &mut agent_rngs[a])?);
            }
            let out = env.step(&joint)?;
            total += out.reward;
            success |= env.task_complete();
            if let Some(state) = state {
                let (intentions, masks) = (0..spec.n_agents).map(|a| controller.last_guidance(a)).unzip();
                records.push(TrajectoryRecord {
                    t,
                    state,
                    joint_action: joint,
                    reward: out.reward,
                    intentions,
                    masks,
                });
            }
            for (hist, o) in histories.iter_mut().zip(&out.obs) {
                hist.push(o)?;
            }
            if out.done {
                break;
            }
        }
        returns.push(total);
        coverage += env.coverage();
        successes += usize::from(success);
        if record {
            trajectories.push(records);
        }
    }
    let n = episodes as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    Ok(EvalResult {
        returns,
        mean,
        std,
        coverage: coverage / n,
        success_rate: successes as f64 / n,
        trajectories,
    })
}
