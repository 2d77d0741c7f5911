//! Point-mass worlds: navigation (cover every landmark) and reference
//! (reach the landmark only your partner can see).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RewardMode;

pub const PARTICLE_DT: f64 = 0.1;
pub const DRAG: f64 = 0.25;
/// Positions are clamped to `[-ARENA, ARENA]^2`.
pub const ARENA: f64 = 1.0;
/// Agent radius 0.05 each; overlapping bodies collide.
pub const COLLISION_DIST: f64 = 0.1;
pub const COVER_RADIUS: f64 = 0.1;
const LANDMARK_SPAN: f64 = 0.9;
const LANDMARK_SEPARATION: f64 = 0.3;
const COLLISION_PENALTY: f64 = 1.0;
const SUCCESS_BONUS: f64 = 10.0;
const COMM_DIM: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
    pub landmarks: Vec<[f64; 2]>,
    /// Reference only: each agent's designated landmark.
    pub goals: Option<Vec<usize>>,
    /// Reference only: each agent's last communication vector.
    pub comm: Vec<[f64; COMM_DIM]>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn sample_landmarks<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = Vec::with_capacity(n);
    while out.len() < n {
        let mut p = [0.0; 2];
        for _ in 0..1000 {
            p = [rng.random_range(-LANDMARK_SPAN..LANDMARK_SPAN), rng.random_range(-LANDMARK_SPAN..LANDMARK_SPAN)];
            if out.iter().all(|&q| dist(p, q) >= LANDMARK_SEPARATION) {
                break;
            }
        }
        out.push(p);
    }
    out
}

impl ParticleState {
    pub fn empty(agents: usize, landmarks: usize, reference: bool) -> Self {
        Self {
            pos: vec![[0.0; 2]; agents],
            vel: vec![[0.0; 2]; agents],
            landmarks: vec![[0.0; 2]; landmarks],
            goals: reference.then(|| vec![0; agents]),
            comm: if reference { vec![[0.0; COMM_DIM]; agents] } else { Vec::new() },
        }
    }

    pub fn reset_navigation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let landmarks = sample_landmarks(n, rng);
        let pos = (0..n).map(|_| [rng.random_range(-ARENA..ARENA), rng.random_range(-ARENA..ARENA)]).collect();
        Self {
            pos,
            vel: vec![[0.0; 2]; n],
            landmarks,
            goals: None,
            comm: Vec::new(),
        }
    }

    pub fn reset_reference<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let landmarks = sample_landmarks(3, rng);
        let pos = (0..2).map(|_| [rng.random_range(-ARENA..ARENA), rng.random_range(-ARENA..ARENA)]).collect();
        let goals = (0..2).map(|_| rng.random_range(0..3)).collect();
        Self {
            pos,
            vel: vec![[0.0; 2]; 2],
            landmarks,
            goals: Some(goals),
            comm: vec![[0.0; COMM_DIM]; 2],
        }
    }

    fn is_reference(&self) -> bool {
        self.goals.is_some()
    }

    /// Semi-implicit Euler: `v' = v + dt (F - drag v)`, `x' = x + dt v'`.
    /// Leaving the arena clamps the coordinate and zeroes that velocity.
    pub fn step(&mut self, actions: &[Vec<f64>]) {
        for (i, a) in actions.iter().enumerate() {
            for d in 0..2 {
                let v = self.vel[i][d] + PARTICLE_DT * (a[d] - DRAG * self.vel[i][d]);
                let mut x = self.pos[i][d] + PARTICLE_DT * v;
                let mut v = v;
                if x.abs() > ARENA {
                    x = x.clamp(-ARENA, ARENA);
                    v = 0.0;
                }
                self.pos[i][d] = x;
                self.vel[i][d] = v;
            }
            if self.is_reference() {
                self.comm[i].copy_from_slice(&a[2..2 + COMM_DIM]);
            }
        }
    }

    pub fn collisions(&self) -> usize {
        let n = self.pos.len();
        let mut c = 0;
        for i in 0..n {
            for j in i + 1..n {
                c += usize::from(dist(self.pos[i], self.pos[j]) < COLLISION_DIST);
            }
        }
        c
    }

    fn goal_distance(&self, agent: usize) -> f64 {
        let goals = self.goals.as_ref().expect("reference state");
        dist(self.pos[agent], self.landmarks[goals[agent]])
    }

    fn landmark_gap(&self, l: usize) -> f64 {
        self.pos.iter().map(|&p| dist(p, self.landmarks[l])).fold(f64::INFINITY, f64::min)
    }

    /// Every landmark covered (navigation) or every agent on its goal (reference).
    pub fn all_on_goal(&self) -> bool {
        if self.is_reference() {
            (0..self.pos.len()).all(|a| self.goal_distance(a) <= COVER_RADIUS)
        } else {
            (0..self.landmarks.len()).all(|l| self.landmark_gap(l) <= COVER_RADIUS)
        }
    }

    pub fn coverage(&self) -> f64 {
        if self.is_reference() {
            let on = (0..self.pos.len()).filter(|&a| self.goal_distance(a) <= COVER_RADIUS).count();
            on as f64 / self.pos.len() as f64
        } else {
            let on = (0..self.landmarks.len()).filter(|&l| self.landmark_gap(l) <= COVER_RADIUS).count();
            on as f64 / self.landmarks.len() as f64
        }
    }

    pub fn reward(&self, mode: RewardMode) -> f64 {
        match (self.is_reference(), mode) {
            (false, RewardMode::Dense) => {
                let gaps: f64 = (0..self.landmarks.len()).map(|l| self.landmark_gap(l)).sum();
                -gaps - COLLISION_PENALTY * self.collisions() as f64
            }
            (false, RewardMode::Sparse) => {
                let bonus = if self.all_on_goal() { SUCCESS_BONUS } else { 0.0 };
                bonus - COLLISION_PENALTY * self.collisions() as f64
            }
            (true, RewardMode::Dense) => -(0..self.pos.len()).map(|a| self.goal_distance(a)).sum::<f64>(),
            (true, RewardMode::Sparse) => {
                if self.all_on_goal() {
                    SUCCESS_BONUS
                } else {
                    0.0
                }
            }
        }
    }

    /// Own position and velocity, landmarks relative to self, other agents
    /// relative to self; reference adds the partner's goal one-hot and the
    /// partner's last communication.
    pub fn observe(&self, agent: usize) -> Vec<f64> {
        let me = self.pos[agent];
        let mut o = vec![me[0], me[1], self.vel[agent][0], self.vel[agent][1]];
        for l in &self.landmarks {
            o.extend([l[0] - me[0], l[1] - me[1]]);
        }
        for (j, p) in self.pos.iter().enumerate() {
            if j != agent {
                o.extend([p[0] - me[0], p[1] - me[1]]);
            }
        }
        if let Some(goals) = &self.goals {
            let other = 1 - agent;
            let mut onehot = vec![0.0; self.landmarks.len()];
            onehot[goals[other]] = 1.0;
            o.extend(onehot);
            o.extend(self.comm[other]);
        }
        o
    }

    pub fn global_state(&self) -> Vec<f64> {
        let mut s = Vec::new();
        for (p, v) in self.pos.iter().zip(&self.vel) {
            s.extend([p[0], p[1], v[0], v[1]]);
        }
        for l in &self.landmarks {
            s.extend(l);
        }
        if let Some(goals) = &self.goals {
            for &g in goals {
                let mut onehot = vec![0.0; self.landmarks.len()];
                onehot[g] = 1.0;
                s.extend(onehot);
            }
            for c in &self.comm {
                s.extend(c);
            }
        }
        s
    }
}
