//! Cooperative toy environments with dense and sparse rewards.
//!
//! All environments are deterministic given the reset RNG and the action
//! sequence. Observations, states and rewards are `f64`.

mod particles;
mod reacher;

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use particles::{ParticleState, ARENA, COLLISION_DIST, COVER_RADIUS, DRAG, PARTICLE_DT};
pub use reacher::{scripted_reacher_plan, ArmState, ARM_DAMPING, ARM_DT, LINK1, LINK2, TORQUE_GAIN, TOUCH_RADIUS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Navigation,
    Reference,
    Reacher4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    Dense,
    Sparse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub id: EnvId,
    pub reward: RewardMode,
    /// Agent (and landmark) count for navigation; ignored elsewhere.
    pub n_agents: usize,
    /// Overrides the per-environment default episode length.
    pub episode_length: Option<usize>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            id: EnvId::Navigation,
            reward: RewardMode::Sparse,
            n_agents: 2,
            episode_length: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: EnvId,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub episode_length: usize,
    pub reward_mode: RewardMode,
    pub dt: f64,
}

impl EnvSpec {
    pub fn from_config(cfg: &EnvConfig) -> Result<Self> {
        let (n, obs, act, state, len, dt) = match cfg.id {
            EnvId::Navigation => {
                let n = cfg.n_agents;
                if n == 0 {
                    return Err(Error::Config {
                        key: "env.n_agents".into(),
                        message: "must be at least 1".into(),
                    });
                }
                (n, 4 + 2 * n + 2 * (n - 1), 2, 6 * n, 50, PARTICLE_DT)
            }
            EnvId::Reference => (2, 19, 6, 28, 50, PARTICLE_DT),
            EnvId::Reacher4 => (2, 15, 1, 18, 100, ARM_DT),
        };
        let episode_length = cfg.episode_length.unwrap_or(len);
        if episode_length == 0 {
            return Err(Error::Config {
                key: "env.episode_length".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(Self {
            id: cfg.id,
            n_agents: n,
            obs_dim: obs,
            action_dim: act,
            state_dim: state,
            episode_length,
            reward_mode: cfg.reward,
            dt,
        })
    }

    pub fn joint_obs_dim(&self) -> usize {
        self.n_agents * self.obs_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvState {
    Particles(ParticleState),
    Arm(ArmState),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<Vec<f64>>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct Env {
    spec: EnvSpec,
    state: EnvState,
    t: usize,
}

impl Env {
    pub fn new(cfg: &EnvConfig) -> Result<Self> {
        let spec = EnvSpec::from_config(cfg)?;
        let state = match spec.id {
            EnvId::Navigation => EnvState::Particles(ParticleState::empty(spec.n_agents, spec.n_agents, false)),
            EnvId::Reference => EnvState::Particles(ParticleState::empty(2, 3, true)),
            EnvId::Reacher4 => EnvState::Arm(ArmState::default()),
        };
        Ok(Self { spec, state, t: 0 })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn time(&self) -> usize {
        self.t
    }

    /// Places landmarks/targets and agents from `rng`; returns joint observations.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<Vec<f64>> {
        self.t = 0;
        self.state = match self.spec.id {
            EnvId::Navigation => EnvState::Particles(ParticleState::reset_navigation(self.spec.n_agents, rng)),
            EnvId::Reference => EnvState::Particles(ParticleState::reset_reference(rng)),
            EnvId::Reacher4 => EnvState::Arm(ArmState::reset(rng)),
        };
        self.observe_all()
    }

    /// Starts an episode from an explicit state.
    pub fn set_state(&mut self, state: EnvState) -> Result<()> {
        let ok = matches!(
            (&state, self.spec.id),
            (EnvState::Particles(_), EnvId::Navigation | EnvId::Reference) | (EnvState::Arm(_), EnvId::Reacher4)
        );
        if !ok {
            return Err(Error::InvalidArgument("state kind does not match environment".into()));
        }
        self.state = state;
        self.t = 0;
        Ok(())
    }

    pub fn step(&mut self, joint_action: &[Vec<f64>]) -> Result<StepOutcome> {
        if joint_action.len() != self.spec.n_agents {
            return Err(Error::Dimension {
                context: "joint action agents",
                expected: self.spec.n_agents,
                actual: joint_action.len(),
            });
        }
        for a in joint_action {
            if a.len() != self.spec.action_dim {
                return Err(Error::Dimension {
                    context: "agent action",
                    expected: self.spec.action_dim,
                    actual: a.len(),
                });
            }
            if !a.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("action"));
            }
        }
        let clamped: Vec<Vec<f64>> = joint_action.iter().map(|a| a.iter().map(|v| v.clamp(-1.0, 1.0)).collect()).collect();
        let reward = match &mut self.state {
            EnvState::Particles(s) => {
                s.step(&clamped);
                s.reward(self.spec.reward_mode)
            }
            EnvState::Arm(s) => {
                let newly_complete = s.step(&clamped);
                s.reward(self.spec.reward_mode, newly_complete)
            }
        };
        self.t += 1;
        Ok(StepOutcome {
            obs: self.observe_all(),
            reward,
            done: self.t >= self.spec.episode_length,
        })
    }

    pub fn observe(&self, agent: usize) -> Vec<f64> {
        match &self.state {
            EnvState::Particles(s) => s.observe(agent),
            EnvState::Arm(s) => s.observe(agent),
        }
    }

    pub fn observe_all(&self) -> Vec<Vec<f64>> {
        (0..self.spec.n_agents).map(|a| self.observe(a)).collect()
    }

    pub fn global_state(&self) -> Vec<f64> {
        match &self.state {
            EnvState::Particles(s) => s.global_state(),
            EnvState::Arm(s) => s.global_state(),
        }
    }

    pub fn dense_reward(&self) -> f64 {
        match &self.state {
            EnvState::Particles(s) => s.reward(RewardMode::Dense),
            EnvState::Arm(s) => s.reward(RewardMode::Dense, false),
        }
    }

    /// Per-episode coverage in `[0, 1]`: touched targets / 4 for the arm,
    /// covered landmarks (navigation) or agents on their goal (reference)
    /// for the particle worlds, measured now.
    pub fn coverage(&self) -> f64 {
        match &self.state {
            EnvState::Particles(s) => s.coverage(),
            EnvState::Arm(s) => s.touched_count() as f64 / 4.0,
        }
    }

    /// Whether the sparse task condition currently holds (arm: all four touched).
    pub fn task_complete(&self) -> bool {
        match &self.state {
            EnvState::Particles(s) => s.all_on_goal(),
            EnvState::Arm(s) => s.touched_count() == 4,
        }
    }
}

/// One exported step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub t: usize,
    pub state: Vec<f64>,
    pub joint_action: Vec<Vec<f64>>,
    pub reward: f64,
    pub intentions: Vec<Option<usize>>,
    pub masks: Vec<u8>,
}

pub fn write_trajectory_jsonl<W: Write>(mut w: W, records: &[TrajectoryRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(id: EnvId, reward: RewardMode) -> EnvConfig {
        EnvConfig { id, reward, ..EnvConfig::default() }
    }

    #[test]
    fn dimensions_match_spec() {
        for id in [EnvId::Navigation, EnvId::Reference, EnvId::Reacher4] {
            let mut env = Env::new(&cfg(id, RewardMode::Dense)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let obs = env.reset(&mut rng);
            let spec = env.spec().clone();
            assert_eq!(obs.len(), spec.n_agents);
            assert!(obs.iter().all(|o| o.len() == spec.obs_dim), "{id:?}");
            assert_eq!(env.global_state().len(), spec.state_dim, "{id:?}");
            let a = vec![vec![0.3; spec.action_dim]; spec.n_agents];
            let out = env.step(&a).unwrap();
            assert!(out.obs.iter().all(|o| o.len() == spec.obs_dim));
        }
        let three = EnvSpec::from_config(&EnvConfig { n_agents: 3, ..EnvConfig::default() }).unwrap();
        assert_eq!((three.obs_dim, three.state_dim), (14, 18));
    }

    #[test]
    fn same_seed_same_episode() {
        for id in [EnvId::Navigation, EnvId::Reference, EnvId::Reacher4] {
            let run = || {
                let mut env = Env::new(&cfg(id, RewardMode::Sparse)).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let mut act = ChaCha8Rng::seed_from_u64(10);
                let mut log = vec![env.reset(&mut rng).concat()];
                let spec = env.spec().clone();
                for _ in 0..spec.episode_length {
                    let a: Vec<Vec<f64>> = (0..spec.n_agents).map(|_| (0..spec.action_dim).map(|_| act.random_range(-1.0..1.0)).collect()).collect();
                    let out = env.step(&a).unwrap();
                    log.push(out.obs.concat());
                    log.push(vec![out.reward]);
                }
                log.into_iter().flatten().map(f64::to_bits).collect::<Vec<_>>()
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn done_only_at_episode_end_and_bad_actions_rejected() {
        let mut env = Env::new(&EnvConfig { episode_length: Some(3), ..EnvConfig::default() }).unwrap();
        env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        let z = vec![vec![0.0; 2]; 2];
        assert!(!env.step(&z).unwrap().done);
        assert!(!env.step(&z).unwrap().done);
        assert!(env.step(&z).unwrap().done);
        assert!(env.step(&[vec![f64::NAN, 0.0], vec![0.0, 0.0]]).is_err());
        assert!(env.step(&[vec![0.0], vec![0.0, 0.0]]).is_err());
        assert!(Env::new(&EnvConfig { episode_length: Some(0), ..EnvConfig::default() }).is_err());
    }

    #[test]
    fn observation_is_pure() {
        let mut env = Env::new(&cfg(EnvId::Reference, RewardMode::Dense)).unwrap();
        env.reset(&mut ChaCha8Rng::seed_from_u64(4));
        env.step(&[vec![0.5; 6], vec![-0.5; 6]]).unwrap();
        let a: Vec<u64> = env.observe(1).into_iter().map(f64::to_bits).collect();
        let b: Vec<u64> = env.observe(1).into_iter().map(f64::to_bits).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn trajectory_jsonl_has_one_line_per_step() {
        let recs = vec![
            TrajectoryRecord { t: 0, state: vec![0.5], joint_action: vec![vec![1.0]], reward: 0.0, intentions: vec![Some(2)], masks: vec![1] },
            TrajectoryRecord { t: 1, state: vec![0.25], joint_action: vec![vec![-1.0]], reward: 10.0, intentions: vec![None], masks: vec![0] },
        ];
        let mut out = Vec::new();
        write_trajectory_jsonl(&mut out, &recs).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let back: TrajectoryRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(back, recs[1]);
        assert!(lines[0].starts_with("{\"t\":0,\"state\":[0.5]"));
    }

    #[test]
    fn seeded_reset_is_pinned() {
        let mut env = Env::new(&EnvConfig::default()).unwrap();
        env.reset(&mut ChaCha8Rng::seed_from_u64(2024));
        let EnvState::Particles(p) = env.state() else { panic!("particle state") };
        assert_eq!(p.landmarks, vec![[-0.5993655213263707, 0.8684533373777913], [0.33428993295083187, 0.734151125215324]]);
        assert_eq!(p.pos[0], [0.3832308414008314, -0.0061885047747129995]);
        let mut env = Env::new(&cfg(EnvId::Reacher4, RewardMode::Sparse)).unwrap();
        env.reset(&mut ChaCha8Rng::seed_from_u64(2024));
        let EnvState::Arm(a) = env.state() else { panic!("arm state") };
        assert_eq!(a.theta, [-2.0921803540154915, 3.0314740274351193]);
        assert_eq!(a.targets[3], [0.5250318277040975, 0.6303650462188819]);
    }
}
