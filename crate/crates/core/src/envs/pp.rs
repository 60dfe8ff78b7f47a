//! Predator-prey with two static obstacles.
//!
//! Agent 0 is the prey (controlled), agents 1..=3 are predators. A capture
//! happens whenever a predator touches the prey; the set of predators in
//! contact on a step decides the sign of the reward. A lone capturer is a
//! failed hunt (predators -1, prey +1); two or more succeed (predators +1,
//! prey -1). Episodes always last `horizon` steps.
//!
//! Observation layout (25 values per agent). Other agents are listed in
//! index order with the observer removed:
//!
//! | slice          | len | content                                 |
//! |----------------|-----|-----------------------------------------|
//! | `self_vel`     | 2   | own velocity                            |
//! | `self_pos`     | 2   | own position                            |
//! | `obstacle_rel` | 4   | obstacle centres minus own position     |
//! | `obstacle_vis` | 2   | visibility flags                        |
//! | `other_rel`    | 6   | other agents' positions minus own       |
//! | `other_vel`    | 6   | other agents' velocities                |
//! | `other_vis`    | 3   | visibility flags                        |
//!
//! The prey only sees entities whose centre lies within
//! `prey_view_radius`; predators see everything.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    dist2, move_direction, ActionSpace, EnvKind, EnvSpec, Environment, JointAction, ObsLayout,
    Observation, StepResult,
};
use crate::error::{Error, Result};

pub const N_AGENTS: usize = 4;
pub const N_PREDATORS: usize = 3;
pub const N_OBSTACLES: usize = 2;
pub const N_MOVES: usize = 5;
pub const OBS_LEN: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpConfig {
    pub horizon: usize,
    pub dt: f64,
    pub damping: f64,
    pub prey_radius: f64,
    pub prey_accel: f64,
    pub prey_max_speed: f64,
    pub predator_radius: f64,
    pub predator_accel: f64,
    pub predator_max_speed: f64,
    pub obstacle_radius: f64,
    pub prey_view_radius: f64,
}

impl Default for PpConfig {
    fn default() -> Self {
        PpConfig {
            horizon: 50,
            dt: 0.1,
            damping: 0.25,
            prey_radius: 0.05,
            prey_accel: 4.0,
            prey_max_speed: 1.3,
            predator_radius: 0.075,
            predator_accel: 3.0,
            predator_max_speed: 1.0,
            obstacle_radius: 0.2,
            prey_view_radius: 1.0,
        }
    }
}

impl PpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("pp.horizon", "must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("pp.dt", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::config("pp.damping", "must lie in [0, 1)"));
        }
        for (key, v) in [
            ("pp.prey_radius", self.prey_radius),
            ("pp.predator_radius", self.predator_radius),
            ("pp.prey_max_speed", self.prey_max_speed),
            ("pp.predator_max_speed", self.predator_max_speed),
            ("pp.prey_view_radius", self.prey_view_radius),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(0.0..0.5).contains(&self.obstacle_radius) {
            return Err(Error::config("pp.obstacle_radius", "must lie in [0, 0.5)"));
        }
        Ok(())
    }

    /// Centre distance at or below which a predator touches the prey.
    pub fn capture_distance(&self) -> f64 {
        self.prey_radius + self.predator_radius
    }

    fn radius(&self, agent: usize) -> f64 {
        if agent == 0 {
            self.prey_radius
        } else {
            self.predator_radius
        }
    }
}

pub fn layout() -> ObsLayout {
    ObsLayout::new(&[
        ("self_vel", 2),
        ("self_pos", 2),
        ("obstacle_rel", 2 * N_OBSTACLES),
        ("obstacle_vis", N_OBSTACLES),
        ("other_rel", 2 * (N_AGENTS - 1)),
        ("other_vel", 2 * (N_AGENTS - 1)),
        ("other_vis", N_AGENTS - 1),
    ])
}

/// `(predator reward, prey reward)` for a step where `capture_size`
/// predators touch the prey.
pub fn pp_reward(capture_size: usize) -> (f64, f64) {
    match capture_size {
        0 => (0.0, 0.0),
        1 => (-1.0, 1.0),
        _ => (1.0, -1.0),
    }
}

/// Other agents as seen from `observer`, in the order used by observations.
pub fn others(observer: usize) -> impl Iterator<Item = usize> {
    (0..N_AGENTS).filter(move |&j| j != observer)
}

#[derive(Clone, Debug)]
pub struct PredatorPrey {
    cfg: PpConfig,
    spec: EnvSpec,
    pub(crate) pos: [[f64; 2]; N_AGENTS],
    pub(crate) vel: [[f64; 2]; N_AGENTS],
    pub(crate) obstacles: [[f64; 2]; N_OBSTACLES],
    t: usize,
    done: bool,
}

impl PredatorPrey {
    pub fn new(cfg: PpConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = EnvSpec {
            kind: EnvKind::Pp,
            n_agents: N_AGENTS,
            action_spaces: vec![ActionSpace::single(N_MOVES); N_AGENTS],
            obs_layouts: vec![layout(); N_AGENTS],
            horizon: cfg.horizon,
        };
        Ok(PredatorPrey {
            cfg,
            spec,
            pos: [[0.0; 2]; N_AGENTS],
            vel: [[0.0; 2]; N_AGENTS],
            obstacles: [[0.0; 2]; N_OBSTACLES],
            t: 0,
            done: true,
        })
    }

    pub fn config(&self) -> &PpConfig {
        &self.cfg
    }

    pub fn positions(&self) -> &[[f64; 2]; N_AGENTS] {
        &self.pos
    }

    /// Replaces positions and obstacles, zeroes velocities and restarts the
    /// step counter.
    pub fn set_state(&mut self, pos: [[f64; 2]; N_AGENTS], obstacles: [[f64; 2]; N_OBSTACLES]) -> Vec<Observation> {
        self.pos = pos;
        self.vel = [[0.0; 2]; N_AGENTS];
        self.obstacles = obstacles;
        self.t = 0;
        self.done = false;
        self.observations()
    }

    /// Predators currently touching the prey.
    pub fn capture_set(&self) -> Vec<usize> {
        (1..N_AGENTS)
            .filter(|&j| dist2(self.pos[0], self.pos[j]) <= self.cfg.capture_distance())
            .collect()
    }

    fn observe(&self, i: usize) -> Observation {
        let radius = if i == 0 { self.cfg.prey_view_radius } else { f64::INFINITY };
        let me = self.pos[i];
        let seen = |p: [f64; 2]| dist2(me, p) <= radius;
        let mut o = Vec::with_capacity(OBS_LEN);
        o.extend_from_slice(&self.vel[i]);
        o.extend_from_slice(&me);
        let mut vis = [0.0; N_OBSTACLES];
        for (k, ob) in self.obstacles.iter().enumerate() {
            if seen(*ob) {
                o.extend([ob[0] - me[0], ob[1] - me[1]]);
                vis[k] = 1.0;
            } else {
                o.extend([0.0; 2]);
            }
        }
        o.extend_from_slice(&vis);
        let visible: Vec<bool> = others(i).map(|j| seen(self.pos[j])).collect();
        for (j, v) in others(i).zip(&visible) {
            if *v {
                o.extend([self.pos[j][0] - me[0], self.pos[j][1] - me[1]]);
            } else {
                o.extend([0.0; 2]);
            }
        }
        for (j, v) in others(i).zip(&visible) {
            o.extend(if *v { self.vel[j] } else { [0.0; 2] });
        }
        o.extend(visible.iter().map(|v| if *v { 1.0 } else { 0.0 }));
        o
    }

    fn observations(&self) -> Vec<Observation> {
        (0..N_AGENTS).map(|i| self.observe(i)).collect()
    }

    fn resolve_obstacles(&mut self, i: usize) {
        let r = self.cfg.radius(i) + self.cfg.obstacle_radius;
        for ob in self.obstacles {
            let d = [self.pos[i][0] - ob[0], self.pos[i][1] - ob[1]];
            let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if n >= r {
                continue;
            }
            let u = if n > 1e-12 { [d[0] / n, d[1] / n] } else { [1.0, 0.0] };
            self.pos[i] = [ob[0] + u[0] * r, ob[1] + u[1] * r];
            // Drop the velocity component pointing into the obstacle.
            let vn = self.vel[i][0] * u[0] + self.vel[i][1] * u[1];
            if vn < 0.0 {
                self.vel[i][0] -= vn * u[0];
                self.vel[i][1] -= vn * u[1];
            }
        }
    }
}

impl Environment for PredatorPrey {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = self.cfg.clone();
        let lim = 1.0 - c.obstacle_radius - 0.1;
        let mut obstacles = [[0.0; 2]; N_OBSTACLES];
        let mut k = 0;
        while k < N_OBSTACLES {
            let p = [rng.random_range(-lim..=lim), rng.random_range(-lim..=lim)];
            if obstacles[..k].iter().all(|q| dist2(p, *q) > 2.0 * c.obstacle_radius) {
                obstacles[k] = p;
                k += 1;
            }
        }
        let mut pos = [[0.0; 2]; N_AGENTS];
        for (i, p) in pos.iter_mut().enumerate() {
            let r = c.radius(i);
            loop {
                let cand = [rng.random_range(-1.0 + r..=1.0 - r), rng.random_range(-1.0 + r..=1.0 - r)];
                if obstacles.iter().all(|q| dist2(cand, *q) > c.obstacle_radius + r) {
                    *p = cand;
                    break;
                }
            }
        }
        Ok(self.set_state(pos, obstacles))
    }

    fn step(&mut self, actions: &JointAction) -> Result<StepResult> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode; reset first".into()));
        }
        self.spec.validate_actions(actions)?;
        let c = self.cfg.clone();
        for (i, a) in actions.iter().enumerate() {
            let (accel, vmax) = if i == 0 {
                (c.prey_accel, c.prey_max_speed)
            } else {
                (c.predator_accel, c.predator_max_speed)
            };
            let dir = move_direction(a[0]);
            let v = &mut self.vel[i];
            for k in 0..2 {
                v[k] = v[k] * (1.0 - c.damping) + dir[k] * accel * c.dt;
            }
            let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
            if speed > vmax {
                v[0] *= vmax / speed;
                v[1] *= vmax / speed;
            }
            let r = c.radius(i);
            for k in 0..2 {
                self.pos[i][k] += self.vel[i][k] * c.dt;
                if self.pos[i][k].abs() > 1.0 - r {
                    self.pos[i][k] = self.pos[i][k].clamp(-1.0 + r, 1.0 - r);
                    self.vel[i][k] = 0.0;
                }
            }
            self.resolve_obstacles(i);
        }
        let captured = self.capture_set();
        let (pred_r, prey_r) = pp_reward(captured.len());
        let mut rewards = vec![pred_r; N_AGENTS];
        rewards[0] = prey_r;
        self.t += 1;
        self.done = self.t >= c.horizon;
        let mut info = BTreeMap::new();
        info.insert("capture_size".into(), captured.len() as f64);
        Ok(StepResult { observations: self.observations(), rewards, done: self.done, info })
    }

    fn t(&self) -> usize {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> PredatorPrey {
        PredatorPrey::new(PpConfig::default()).unwrap()
    }

    const FAR_OBSTACLES: [[f64; 2]; 2] = [[0.7, 0.7], [-0.7, -0.7]];

    #[test]
    fn reward_sign_table() {
        assert_eq!(pp_reward(0), (0.0, 0.0));
        assert_eq!(pp_reward(1), (-1.0, 1.0));
        assert_eq!(pp_reward(2), (1.0, -1.0));
        assert_eq!(pp_reward(3), (1.0, -1.0));
    }

    #[test]
    fn no_contact_means_zero_rewards() {
        let mut e = env();
        e.set_state([[0.0, 0.0], [0.5, 0.0], [-0.5, 0.0], [0.0, 0.5]], FAR_OBSTACLES);
        let r = e.step(&vec![vec![0]; 4]).unwrap();
        assert_eq!(r.rewards, vec![0.0; 4]);
    }

    #[test]
    fn single_and_double_captures() {
        let mut e = env();
        e.set_state([[0.0, 0.0], [0.1, 0.0], [-0.5, 0.0], [0.0, 0.5]], FAR_OBSTACLES);
        let r = e.step(&vec![vec![0]; 4]).unwrap();
        assert_eq!(r.rewards, vec![1.0, -1.0, -1.0, -1.0]);
        e.set_state([[0.0, 0.0], [0.1, 0.0], [-0.1, 0.0], [0.0, 0.5]], FAR_OBSTACLES);
        let r = e.step(&vec![vec![0]; 4]).unwrap();
        assert_eq!(r.rewards, vec![-1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn prey_reward_is_negated_predator_reward() {
        let mut e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seed in 0..20 {
            e.reset(seed).unwrap();
            loop {
                let a: JointAction = (0..4).map(|_| vec![rng.random_range(0..N_MOVES)]).collect();
                let r = e.step(&a).unwrap();
                for j in 1..4 {
                    assert_eq!(r.rewards[0], -r.rewards[j]);
                }
                for p in e.pos {
                    assert!(p[0].abs() <= 1.0 && p[1].abs() <= 1.0);
                }
                if r.done {
                    assert_eq!(e.t(), 50);
                    break;
                }
            }
        }
    }

    #[test]
    fn prey_view_is_limited_predators_see_all() {
        let mut e = env();
        let obs = e.set_state([[-0.9, 0.0], [-0.5, 0.0], [0.9, 0.0], [0.0, 0.9]], [[-0.9, 0.6], [0.6, -0.6]]);
        let l = layout();
        let (vis, _) = l.range("other_vis").unwrap();
        assert_eq!(&obs[0][vis..vis + 3], &[1.0, 0.0, 0.0]);
        let (rel, _) = l.range("other_rel").unwrap();
        assert_eq!(&obs[0][rel + 2..rel + 6], &[0.0; 4]);
        let (ov, _) = l.range("obstacle_vis").unwrap();
        assert_eq!(&obs[0][ov..ov + 2], &[1.0, 0.0]);
        for o in &obs[1..] {
            assert_eq!(&o[vis..vis + 3], &[1.0; 3]);
            assert_eq!(&o[ov..ov + 2], &[1.0; 2]);
        }
        // Predator 2 sees the prey first in its "other" list.
        assert!((obs[2][rel] - (-1.8)).abs() < 1e-12);
    }

    #[test]
    fn agents_cannot_enter_obstacles() {
        let mut e = env();
        e.set_state([[-0.5, 0.0], [0.5, 0.5], [0.5, -0.5], [-0.5, 0.5]], [[0.0, 0.0], [0.8, -0.8]]);
        for _ in 0..30 {
            e.step(&vec![vec![1], vec![0], vec![0], vec![0]]).unwrap();
            assert!(dist2(e.pos[0], [0.0, 0.0]) >= 0.25 - 1e-12);
        }
    }
}
