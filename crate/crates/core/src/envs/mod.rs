//! Partially observable multi-agent environments behind one stepping
//! interface.
//!
//! Agent 0 is always the controlled agent; agents `1..N` are the modelled
//! agents. Observation layouts are fixed per environment and documented by
//! [`ObsLayout`]: the decoder reconstructs the modelled agents' vectors, so
//! slice positions are part of the contract. Entities outside an agent's
//! view are zero-filled and paired with a visibility flag of 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod dsl;
pub mod lbf;
pub mod pp;

pub use dsl::{DslConfig, SpeakerListener};
pub use lbf::{Foraging, LbfConfig};
pub use pp::{PpConfig, PredatorPrey};

pub type Observation = Vec<f64>;

/// One agent's action: one index per action factor.
pub type AgentAction = Vec<usize>;

/// Actions of every agent, indexed by agent id.
pub type JointAction = Vec<AgentAction>;

/// Discrete action space made of independent categorical factors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub factors: Vec<usize>,
}

impl ActionSpace {
    pub fn single(n: usize) -> Self {
        ActionSpace { factors: vec![n] }
    }

    /// Width of the concatenated one-hot encoding.
    pub fn one_hot_len(&self) -> usize {
        self.factors.iter().sum()
    }

    pub fn contains(&self, a: &[usize]) -> bool {
        a.len() == self.factors.len() && a.iter().zip(&self.factors).all(|(x, n)| x < n)
    }

    /// Concatenated one-hot encoding of `a` written into `out`.
    pub fn write_one_hot(&self, a: &[usize], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut off = 0;
        for (x, n) in a.iter().zip(&self.factors) {
            out[off + x] = 1.0;
            off += n;
        }
    }

    pub fn one_hot(&self, a: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.one_hot_len()];
        self.write_one_hot(a, &mut out);
        out
    }
}

/// Named slices of an observation vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsLayout {
    pub slices: Vec<(String, usize)>,
}

impl ObsLayout {
    pub fn new(slices: &[(&str, usize)]) -> Self {
        ObsLayout { slices: slices.iter().map(|(n, l)| (n.to_string(), *l)).collect() }
    }

    pub fn len(&self) -> usize {
        self.slices.iter().map(|(_, l)| l).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(offset, len)` of the named slice.
    pub fn range(&self, name: &str) -> Option<(usize, usize)> {
        let mut off = 0;
        for (n, l) in &self.slices {
            if n == name {
                return Some((off, *l));
            }
            off += l;
        }
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Dsl,
    Lbf,
    Pp,
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvKind::Dsl => "dsl",
            EnvKind::Lbf => "lbf",
            EnvKind::Pp => "pp",
        })
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dsl" | "speaker-listener" => Ok(EnvKind::Dsl),
            "lbf" | "foraging" => Ok(EnvKind::Lbf),
            "pp" | "predator-prey" => Ok(EnvKind::Pp),
            "" => Err(Error::config("env", "must not be empty")),
            other => Err(Error::config("env", format!("unknown environment `{other}`"))),
        }
    }
}

/// Static description of an environment instance.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub n_agents: usize,
    pub action_spaces: Vec<ActionSpace>,
    pub obs_layouts: Vec<ObsLayout>,
    pub horizon: usize,
}

impl EnvSpec {
    pub fn obs_len(&self, agent: usize) -> usize {
        self.obs_layouts[agent].len()
    }

    pub fn modelled_agents(&self) -> std::ops::Range<usize> {
        1..self.n_agents
    }

    /// Length of the concatenated observations of all modelled agents.
    pub fn modelled_obs_len(&self) -> usize {
        self.modelled_agents().map(|i| self.obs_len(i)).sum()
    }

    /// Action factors of all modelled agents, in agent order.
    pub fn modelled_action_factors(&self) -> Vec<usize> {
        self.modelled_agents().flat_map(|i| self.action_spaces[i].factors.clone()).collect()
    }

    pub fn modelled_action_one_hot_len(&self) -> usize {
        self.modelled_action_factors().iter().sum()
    }

    pub fn validate_actions(&self, actions: &JointAction) -> Result<()> {
        if actions.len() != self.n_agents {
            return Err(Error::dim(
                "env_step",
                format!("{} agent actions for {} agents", actions.len(), self.n_agents),
            ));
        }
        for (i, (a, space)) in actions.iter().zip(&self.action_spaces).enumerate() {
            if !space.contains(a) {
                return Err(Error::Usage(format!(
                    "agent {i}: action {a:?} outside {:?}",
                    space.factors
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observations: Vec<Observation>,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub info: BTreeMap<String, f64>,
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    /// Samples an initial state deterministically from `seed`.
    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>>;

    fn step(&mut self, actions: &JointAction) -> Result<StepResult>;

    /// Steps taken in the current episode.
    fn t(&self) -> usize;
}

/// Environment selection plus per-environment parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EnvConfig {
    Dsl(DslConfig),
    Lbf(LbfConfig),
    Pp(PpConfig),
}

impl EnvConfig {
    pub fn default_for(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Dsl => EnvConfig::Dsl(DslConfig::default()),
            EnvKind::Lbf => EnvConfig::Lbf(LbfConfig::default()),
            EnvKind::Pp => EnvConfig::Pp(PpConfig::default()),
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            EnvConfig::Dsl(_) => EnvKind::Dsl,
            EnvConfig::Lbf(_) => EnvKind::Lbf,
            EnvConfig::Pp(_) => EnvKind::Pp,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            EnvConfig::Dsl(c) => c.horizon,
            EnvConfig::Lbf(c) => c.horizon,
            EnvConfig::Pp(c) => c.horizon,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvConfig::Dsl(c) => Box::new(SpeakerListener::new(c.clone())?),
            EnvConfig::Lbf(c) => Box::new(Foraging::new(c.clone())?),
            EnvConfig::Pp(c) => Box::new(PredatorPrey::new(c.clone())?),
        })
    }

    pub fn spec(&self) -> Result<EnvSpec> {
        Ok(self.build()?.spec().clone())
    }
}

/// Movement encoding shared by the particle environments: no-op, +x, -x, +y, -y.
pub(crate) fn move_direction(action: usize) -> [f64; 2] {
    match action {
        1 => [1.0, 0.0],
        2 => [-1.0, 0.0],
        3 => [0.0, 1.0],
        4 => [0.0, -1.0],
        _ => [0.0, 0.0],
    }
}

pub(crate) fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_of_factored_action() {
        let space = ActionSpace { factors: vec![5, 5] };
        let v = space.one_hot(&[2, 4]);
        assert_eq!(v.len(), 10);
        assert_eq!(v.iter().sum::<f64>(), 2.0);
        assert_eq!(v[2], 1.0);
        assert_eq!(v[9], 1.0);
        assert!(space.contains(&[4, 0]));
        assert!(!space.contains(&[5, 0]));
        assert!(!space.contains(&[1]));
    }

    #[test]
    fn env_kind_parsing() {
        assert_eq!("LBF".parse::<EnvKind>().unwrap(), EnvKind::Lbf);
        let err = "".parse::<EnvKind>().unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "env"));
    }

    #[test]
    fn observation_lengths_are_constant() {
        for kind in [EnvKind::Dsl, EnvKind::Lbf, EnvKind::Pp] {
            let cfg = EnvConfig::default_for(kind);
            let mut env = cfg.build().unwrap();
            let spec = env.spec().clone();
            assert!(spec.n_agents >= 2);
            let mut obs = env.reset(3).unwrap();
            for step in 0..spec.horizon {
                for (i, o) in obs.iter().enumerate() {
                    assert_eq!(o.len(), spec.obs_len(i), "{kind} agent {i} step {step}");
                }
                let actions: JointAction = spec
                    .action_spaces
                    .iter()
                    .enumerate()
                    .map(|(i, s)| s.factors.iter().map(|n| (i + step) % n).collect())
                    .collect();
                let r = env.step(&actions).unwrap();
                obs = r.observations;
                if r.done {
                    break;
                }
            }
        }
    }
}
