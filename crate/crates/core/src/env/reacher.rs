//! Planar two-link arm, one joint per agent, four targets to touch.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RewardMode;

pub const ARM_DT: f64 = 0.05;
pub const ARM_DAMPING: f64 = 0.1;
/// Torque per unit action on a unit-inertia joint.
pub const TORQUE_GAIN: f64 = 10.0;
pub const LINK1: f64 = 0.5;
pub const LINK2: f64 = 0.4;
pub const TOUCH_RADIUS: f64 = 0.05;
const COMPLETION_BONUS: f64 = 50.0;
const TARGET_RADIUS: (f64, f64) = (0.3, 0.85);
const TARGET_SEPARATION: f64 = 0.3;
const START_CLEARANCE: f64 = 0.2;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    /// Shoulder angle (absolute) and elbow angle (relative), in `(-pi, pi]`.
    pub theta: [f64; 2],
    pub omega: [f64; 2],
    pub targets: [[f64; 2]; 4],
    pub touched: [bool; 4],
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

pub fn end_effector(theta: [f64; 2]) -> [f64; 2] {
    let a = theta[0];
    let b = theta[0] + theta[1];
    [LINK1 * a.cos() + LINK2 * b.cos(), LINK1 * a.sin() + LINK2 * b.sin()]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl ArmState {
    pub fn reset<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let theta = [wrap_angle(rng.random_range(-PI..PI)), wrap_angle(rng.random_range(-PI..PI))];
        let ee = end_effector(theta);
        let mut targets = [[0.0; 2]; 4];
        let mut placed = 0;
        while placed < 4 {
            let mut p = [0.0; 2];
            for _ in 0..1000 {
                let r = rng.random_range(TARGET_RADIUS.0..TARGET_RADIUS.1);
                let phi = rng.random_range(-PI..PI);
                p = [r * phi.cos(), r * phi.sin()];
                if dist(p, ee) >= START_CLEARANCE && targets[..placed].iter().all(|&q| dist(p, q) >= TARGET_SEPARATION) {
                    break;
                }
            }
            targets[placed] = p;
            placed += 1;
        }
        Self {
            theta,
            omega: [0.0; 2],
            targets,
            touched: [false; 4],
        }
    }

    pub fn end_effector(&self) -> [f64; 2] {
        end_effector(self.theta)
    }

    pub fn touched_count(&self) -> usize {
        self.touched.iter().filter(|&&t| t).count()
    }

    /// `omega' = omega + dt (gain u - damping omega)`, `theta' = wrap(theta + dt omega')`,
    /// then marks targets within reach. Returns whether this step completed the set.
    pub fn step(&mut self, actions: &[Vec<f64>]) -> bool {
        for j in 0..2 {
            let w = self.omega[j] + ARM_DT * (TORQUE_GAIN * actions[j][0] - ARM_DAMPING * self.omega[j]);
            self.omega[j] = w;
            self.theta[j] = wrap_angle(self.theta[j] + ARM_DT * w);
        }
        let before = self.touched_count();
        let ee = self.end_effector();
        for (k, t) in self.targets.iter().enumerate() {
            if dist(ee, *t) <= TOUCH_RADIUS {
                self.touched[k] = true;
            }
        }
        before < 4 && self.touched_count() == 4
    }

    pub fn reward(&self, mode: RewardMode, newly_complete: bool) -> f64 {
        match mode {
            RewardMode::Dense => {
                let ee = self.end_effector();
                -self.targets.iter().map(|&t| dist(ee, t)).fold(f64::INFINITY, f64::min)
            }
            RewardMode::Sparse => {
                if newly_complete {
                    COMPLETION_BONUS
                } else {
                    0.0
                }
            }
        }
    }

    /// Own joint `(sin, cos, omega)`, every target relative to the end
    /// effector, touched bits.
    pub fn observe(&self, agent: usize) -> Vec<f64> {
        let ee = self.end_effector();
        let mut o = vec![self.theta[agent].sin(), self.theta[agent].cos(), self.omega[agent]];
        for t in &self.targets {
            o.extend([t[0] - ee[0], t[1] - ee[1]]);
        }
        o.extend(self.touched.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        o
    }

    pub fn global_state(&self) -> Vec<f64> {
        let mut s = vec![
            self.theta[0].sin(),
            self.theta[0].cos(),
            self.theta[1].sin(),
            self.theta[1].cos(),
            self.omega[0],
            self.omega[1],
        ];
        for t in &self.targets {
            s.extend(t);
        }
        s.extend(self.touched.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        s
    }
}

/// Both inverse-kinematics solutions for a reachable point.
fn inverse_kinematics(p: [f64; 2]) -> Vec<[f64; 2]> {
    let r2 = p[0] * p[0] + p[1] * p[1];
    let c = ((r2 - LINK1 * LINK1 - LINK2 * LINK2) / (2.0 * LINK1 * LINK2)).clamp(-1.0, 1.0);
    let elbow = c.acos();
    [elbow, -elbow]
        .iter()
        .map(|&e| {
            let shoulder = p[1].atan2(p[0]) - (LINK2 * e.sin()).atan2(LINK1 + LINK2 * e.cos());
            [wrap_angle(shoulder), wrap_angle(e)]
        })
        .collect()
}

const KP: f64 = 6.4;
const KD: f64 = 1.6;

fn pd_action(s: &ArmState, goal: [f64; 2]) -> [f64; 2] {
    let mut u = [0.0; 2];
    for j in 0..2 {
        let e = wrap_angle(goal[j] - s.theta[j]);
        u[j] = (KP * e - KD * s.omega[j]).clamp(-1.0, 1.0);
    }
    u
}

fn joint_gap(a: [f64; 2], b: [f64; 2]) -> f64 {
    wrap_angle(a[0] - b[0]).abs() + wrap_angle(a[1] - b[1]).abs()
}

/// Simulates PD control visiting `order`; returns actions and the step
/// count at which all four were touched.
fn simulate_order(start: &ArmState, order: &[usize], steps: usize) -> (Vec<[f64; 2]>, Option<usize>, usize) {
    let mut s = start.clone();
    let mut actions = Vec::with_capacity(steps);
    let mut finished = None;
    let mut goal_idx = 0;
    let mut goal = None;
    for t in 0..steps {
        while goal_idx < order.len() && s.touched[order[goal_idx]] {
            goal_idx += 1;
            goal = None;
        }
        let u = if goal_idx < order.len() {
            let g = *goal.get_or_insert_with(|| {
                let sols = inverse_kinematics(s.targets[order[goal_idx]]);
                sols.into_iter().min_by(|a, b| joint_gap(*a, s.theta).total_cmp(&joint_gap(*b, s.theta))).expect("two solutions")
            });
            pd_action(&s, g)
        } else {
            [(-KD * s.omega[0]).clamp(-1.0, 1.0), (-KD * s.omega[1]).clamp(-1.0, 1.0)]
        };
        s.step(&[vec![u[0]], vec![u[1]]]);
        actions.push(u);
        if finished.is_none() && s.touched_count() == 4 {
            finished = Some(t + 1);
        }
    }
    (actions, finished, s.touched_count())
}

/// Open-loop joint actions that touch all four targets from `start` when
/// possible: PD control in joint space over the best visiting order.
pub fn scripted_reacher_plan(start: &ArmState, steps: usize) -> Vec<Vec<Vec<f64>>> {
    let mut best: Option<(Vec<[f64; 2]>, (usize, usize))> = None;
    for order in permutations4() {
        let (acts, finished, touched) = simulate_order(start, &order, steps);
        // Prefer completion, then speed; otherwise most targets touched.
        let score = match finished {
            Some(t) => (0, t),
            None => (1, 4 - touched),
        };
        if best.as_ref().is_none_or(|(_, s)| score < *s) {
            best = Some((acts, score));
        }
    }
    let (acts, _) = best.expect("24 orders");
    acts.into_iter().map(|u| vec![vec![u[0]], vec![u[1]]]).collect()
}

fn permutations4() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    if (0..4).all(|i| p.contains(&i)) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}
