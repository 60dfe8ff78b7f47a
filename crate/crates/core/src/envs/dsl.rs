//! Double speaker-listener: two particle agents, three coloured landmarks.
//!
//! Each agent must reach the landmark matching its own colour, which only
//! the *other* agent can see. Both agents emit a 5-way message every step
//! and receive the partner's previous message.
//!
//! Observation layout (18 values, identical for both agents):
//!
//! | slice          | len | content                                   |
//! |----------------|-----|-------------------------------------------|
//! | `self_vel`     | 2   | own velocity                              |
//! | `landmark_rel` | 6   | landmark `c` position minus own, c = 0..3 |
//! | `other_rel`    | 2   | partner position minus own                |
//! | `message`      | 5   | one-hot partner message from `t-1`        |
//! | `other_colour` | 3   | one-hot partner colour                    |

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    dist2, move_direction, ActionSpace, EnvKind, EnvSpec, Environment, JointAction, ObsLayout,
    Observation, StepResult,
};
use crate::error::{Error, Result};

pub const N_COLOURS: usize = 3;
pub const N_MESSAGES: usize = 5;
pub const N_MOVES: usize = 5;
pub const OBS_LEN: usize = 18;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DslConfig {
    pub horizon: usize,
    pub dt: f64,
    pub damping: f64,
    /// Force magnitude of one movement action (unit mass).
    pub force: f64,
    /// Initial positions are drawn from `[-world, world]^2`.
    pub world: f64,
}

impl Default for DslConfig {
    fn default() -> Self {
        DslConfig { horizon: 25, dt: 0.1, damping: 0.25, force: 1.0, world: 1.0 }
    }
}

impl DslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("dsl.horizon", "must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("dsl.dt", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::config("dsl.damping", "must lie in [0, 1)"));
        }
        if !(self.world > 0.0) {
            return Err(Error::config("dsl.world", "must be positive"));
        }
        Ok(())
    }
}

pub fn layout() -> ObsLayout {
    ObsLayout::new(&[
        ("self_vel", 2),
        ("landmark_rel", 2 * N_COLOURS),
        ("other_rel", 2),
        ("message", N_MESSAGES),
        ("other_colour", N_COLOURS),
    ])
}

/// Offset of the partner-colour slice inside a DSL observation.
pub const COLOUR_OFFSET: usize = 15;
pub const MESSAGE_OFFSET: usize = 10;

/// Shared cooperative reward: minus the mean distance of each agent to the
/// landmark of its own colour.
pub fn dsl_reward(positions: &[[f64; 2]; 2], landmarks: &[[f64; 2]; N_COLOURS], colours: [usize; 2]) -> f64 {
    let d0 = dist2(positions[0], landmarks[colours[0]]);
    let d1 = dist2(positions[1], landmarks[colours[1]]);
    -(d0 + d1) / 2.0
}

#[derive(Clone, Debug)]
pub struct SpeakerListener {
    cfg: DslConfig,
    spec: EnvSpec,
    pub(crate) pos: [[f64; 2]; 2],
    pub(crate) vel: [[f64; 2]; 2],
    pub(crate) landmarks: [[f64; 2]; N_COLOURS],
    pub(crate) colours: [usize; 2],
    last_msg: [Option<usize>; 2],
    t: usize,
    done: bool,
}

impl SpeakerListener {
    pub fn new(cfg: DslConfig) -> Result<Self> {
        cfg.validate()?;
        let space = ActionSpace { factors: vec![N_MOVES, N_MESSAGES] };
        let spec = EnvSpec {
            kind: EnvKind::Dsl,
            n_agents: 2,
            action_spaces: vec![space.clone(), space],
            obs_layouts: vec![layout(), layout()],
            horizon: cfg.horizon,
        };
        Ok(SpeakerListener {
            cfg,
            spec,
            pos: [[0.0; 2]; 2],
            vel: [[0.0; 2]; 2],
            landmarks: [[0.0; 2]; N_COLOURS],
            colours: [0; 2],
            last_msg: [None; 2],
            t: 0,
            done: true,
        })
    }

    pub fn colours(&self) -> [usize; 2] {
        self.colours
    }

    fn observe(&self, i: usize) -> Observation {
        let j = 1 - i;
        let mut o = Vec::with_capacity(OBS_LEN);
        o.extend_from_slice(&self.vel[i]);
        for lm in &self.landmarks {
            o.push(lm[0] - self.pos[i][0]);
            o.push(lm[1] - self.pos[i][1]);
        }
        o.push(self.pos[j][0] - self.pos[i][0]);
        o.push(self.pos[j][1] - self.pos[i][1]);
        let mut msg = [0.0; N_MESSAGES];
        if let Some(m) = self.last_msg[j] {
            msg[m] = 1.0;
        }
        o.extend_from_slice(&msg);
        let mut col = [0.0; N_COLOURS];
        col[self.colours[j]] = 1.0;
        o.extend_from_slice(&col);
        o
    }

    fn observations(&self) -> Vec<Observation> {
        (0..2).map(|i| self.observe(i)).collect()
    }

    fn info(&self) -> BTreeMap<String, f64> {
        let mut info = BTreeMap::new();
        info.insert("controlled_colour".into(), self.colours[0] as f64);
        info.insert("modelled_colour".into(), self.colours[1] as f64);
        info
    }
}

impl Environment for SpeakerListener {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = self.cfg.world;
        for p in self.pos.iter_mut().chain(self.landmarks.iter_mut()) {
            *p = [rng.random_range(-w..=w), rng.random_range(-w..=w)];
        }
        self.vel = [[0.0; 2]; 2];
        self.colours = [rng.random_range(0..N_COLOURS), rng.random_range(0..N_COLOURS)];
        self.last_msg = [None; 2];
        self.t = 0;
        self.done = false;
        Ok(self.observations())
    }

    fn step(&mut self, actions: &JointAction) -> Result<StepResult> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode; reset first".into()));
        }
        self.spec.validate_actions(actions)?;
        let c = &self.cfg;
        for (i, a) in actions.iter().enumerate() {
            let dir = move_direction(a[0]);
            for k in 0..2 {
                self.vel[i][k] = self.vel[i][k] * (1.0 - c.damping) + dir[k] * c.force * c.dt;
                self.pos[i][k] += self.vel[i][k] * c.dt;
            }
            self.last_msg[i] = Some(a[1]);
        }
        self.t += 1;
        self.done = self.t >= c.horizon;
        let r = dsl_reward(&self.pos, &self.landmarks, self.colours);
        Ok(StepResult {
            observations: self.observations(),
            rewards: vec![r, r],
            done: self.done,
            info: self.info(),
        })
    }

    fn t(&self) -> usize {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> SpeakerListener {
        SpeakerListener::new(DslConfig::default()).unwrap()
    }

    #[test]
    fn reset_is_deterministic() {
        let (mut a, mut b) = (env(), env());
        assert_eq!(a.reset(42).unwrap(), b.reset(42).unwrap());
        assert_ne!(a.reset(43).unwrap(), b.reset(42).unwrap());
    }

    #[test]
    fn own_colour_only_in_partner_observation() {
        let mut e = env();
        for seed in 0..20 {
            let obs = e.reset(seed).unwrap();
            let [c0, c1] = e.colours();
            let colour_of = |o: &Observation| {
                let s = &o[COLOUR_OFFSET..COLOUR_OFFSET + N_COLOURS];
                assert_eq!(s.iter().sum::<f64>(), 1.0);
                s.iter().position(|v| *v == 1.0).unwrap()
            };
            // Agent 0's observation carries agent 1's colour and vice versa.
            assert_eq!(colour_of(&obs[0]), c1);
            assert_eq!(colour_of(&obs[1]), c0);
        }
    }

    #[test]
    fn message_slice_empty_at_reset_then_carries_partner_message() {
        let mut e = env();
        let obs = e.reset(5).unwrap();
        for o in &obs {
            assert!(o[MESSAGE_OFFSET..MESSAGE_OFFSET + N_MESSAGES].iter().all(|v| *v == 0.0));
        }
        let r = e.step(&vec![vec![0, 3], vec![0, 1]]).unwrap();
        assert_eq!(r.observations[0][MESSAGE_OFFSET + 1], 1.0);
        assert_eq!(r.observations[1][MESSAGE_OFFSET + 3], 1.0);
    }

    #[test]
    fn two_step_kinematics_match_hand_integration() {
        let mut e = env();
        e.reset(1).unwrap();
        let x0 = e.pos[0];
        let y1 = e.pos[1];
        // Agent 0 pushes +x twice; agent 1 pushes -y then idles.
        e.step(&vec![vec![1, 0], vec![4, 0]]).unwrap();
        e.step(&vec![vec![1, 0], vec![0, 0]]).unwrap();
        // v1 = 0.1, x1 = x0 + 0.01; v2 = 0.75 * 0.1 + 0.1 = 0.175, x2 = x1 + 0.0175
        assert!((e.vel[0][0] - 0.175).abs() < 1e-15);
        assert!((e.pos[0][0] - (x0[0] + 0.0275)).abs() < 1e-14);
        assert_eq!(e.pos[0][1], x0[1]);
        // v1 = -0.1, y1' = y - 0.01; v2 = -0.075, y2 = y1' - 0.0075
        assert!((e.vel[1][1] + 0.075).abs() < 1e-15);
        assert!((e.pos[1][1] - (y1[1] - 0.0175)).abs() < 1e-14);
    }

    #[test]
    fn reward_cases() {
        let lm = [[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]];
        assert_eq!(dsl_reward(&[[1.0, 0.0], [0.0, 3.0]], &lm, [1, 2]), 0.0);
        assert_eq!(dsl_reward(&[[1.0, 0.0], [0.0, 0.0]], &lm, [0, 2]), -2.0);
    }

    #[test]
    fn reward_matches_direct_distances() {
        let mut e = env();
        for seed in 0..50 {
            e.reset(seed).unwrap();
            let r = e.step(&vec![vec![2, 1], vec![3, 4]]).unwrap();
            let d = |i: usize| {
                let lm = e.landmarks[e.colours[i]];
                ((e.pos[i][0] - lm[0]).powi(2) + (e.pos[i][1] - lm[1]).powi(2)).sqrt()
            };
            let expect = -(d(0) + d(1)) / 2.0;
            assert!((r.rewards[0] - expect).abs() < 1e-12);
            assert_eq!(r.rewards[0], r.rewards[1]);
            assert!(r.rewards[0] <= 0.0);
        }
    }

    #[test]
    fn horizon_forces_done_and_blocks_further_steps() {
        let mut e = env();
        e.reset(0).unwrap();
        let a = vec![vec![0, 0], vec![0, 0]];
        for t in 1..=25 {
            let r = e.step(&a).unwrap();
            assert_eq!(r.done, t == 25);
        }
        assert!(matches!(e.step(&a), Err(Error::Usage(_))));
    }
}
