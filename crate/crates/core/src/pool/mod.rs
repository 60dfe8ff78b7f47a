//! Fixed modelled-agent policies.
//!
//! A pool holds K policies; one is drawn uniformly at the start of every
//! episode and kept for its whole length. Each policy owns one sub-policy per
//! modelled agent. Sub-policies only look at their own (full-information)
//! observation, so they are immutable and can be shared across threads.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::dsl::N_COLOURS;
use crate::envs::{AgentAction, EnvConfig, EnvKind, Observation};
use crate::error::{Error, Result};
use crate::nn::{softmax_row, Mlp, ParameterStore, Tape, Tensor};

pub mod heuristics;

pub use heuristics::{
    lbf_heuristic_target, pp_heuristic_target, LbfRule, Navigator, PpRule,
};

/// How DSL message codes and navigators are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// Policy k pairs message code k with navigator k mod 10.
    #[default]
    Paired,
    /// Every message code with each of the 10 navigators.
    Cartesian,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(PoolMode::Paired),
            "cartesian" => Ok(PoolMode::Cartesian),
            other => Err(Error::config("pool_mode", format!("expected `paired` or `cartesian`, got `{other}`"))),
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Paired => "paired",
            PoolMode::Cartesian => "cartesian",
        })
    }
}

/// A sub-policy backed by something other than the built-in scripts, such as
/// a network restored from a checkpoint.
pub trait SubPolicyModel: Send + Sync + fmt::Debug {
    fn act(&self, obs: &[f64], rng: &mut dyn RngCore) -> Result<AgentAction>;
    fn describe(&self) -> String;
}

/// Feed-forward stochastic policy: one categorical per action factor.
#[derive(Debug)]
pub struct MlpSubPolicy {
    pub store: ParameterStore,
    pub net: Mlp,
    pub factors: Vec<usize>,
}

impl SubPolicyModel for MlpSubPolicy {
    fn act(&self, obs: &[f64], rng: &mut dyn RngCore) -> Result<AgentAction> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, obs.len(), obs.to_vec())?);
        let y = self.net.forward(&mut tape, &self.store, x)?;
        let logits = tape.value(y).data();
        if logits.len() != self.factors.iter().sum::<usize>() {
            return Err(Error::dim("mlp_sub_policy", "output width does not match action factors"));
        }
        let mut off = 0;
        let mut action = Vec::with_capacity(self.factors.len());
        for &n in &self.factors {
            let p = softmax_row(&logits[off..off + n])?;
            action.push(sample_categorical(&p, rng));
            off += n;
        }
        Ok(action)
    }

    fn describe(&self) -> String {
        format!("mlp policy with {} parameters", self.store.num_scalars())
    }
}

pub(crate) fn sample_categorical(p: &[f64], rng: &mut (impl Rng + ?Sized)) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

#[derive(Clone, Debug)]
pub enum SubPolicy {
    Dsl { message_map: [usize; N_COLOURS], navigator: Navigator },
    Lbf { rule: LbfRule, epsilon: f64, view_radius: Option<usize> },
    Pp { rule: PpRule },
    /// Always the same action; for scripted scenarios.
    Constant(AgentAction),
    External(Arc<dyn SubPolicyModel>),
}

impl SubPolicy {
    fn describe(&self) -> String {
        match self {
            SubPolicy::Dsl { message_map, navigator } => format!(
                "dsl code {message_map:?} deadband {} lead {}",
                navigator.deadband, navigator.lead
            ),
            SubPolicy::Lbf { rule, epsilon, view_radius } => {
                let radius = view_radius.map_or("full".to_string(), |r| r.to_string());
                format!("lbf {rule:?} epsilon {epsilon} view {radius}")
            }
            SubPolicy::Pp { rule } => format!("pp {rule:?}"),
            SubPolicy::Constant(a) => format!("constant {a:?}"),
            SubPolicy::External(m) => m.describe(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FixedPolicy {
    pub id: usize,
    pub kind: String,
    pub description: String,
    pub env: EnvConfig,
    /// One entry per modelled agent, in agent order.
    pub agents: Vec<SubPolicy>,
}

impl FixedPolicy {
    pub fn new(id: usize, kind: impl Into<String>, env: EnvConfig, agents: Vec<SubPolicy>) -> Self {
        let description = agents.iter().map(SubPolicy::describe).collect::<Vec<_>>().join("; ");
        FixedPolicy { id, kind: kind.into(), description, env, agents }
    }

    /// Actions of every modelled agent given their observations.
    pub fn act(&self, modelled_obs: &[Observation], rng: &mut (impl Rng + ?Sized)) -> Result<Vec<AgentAction>> {
        if modelled_obs.len() != self.agents.len() {
            return Err(Error::dim(
                "policy_act",
                format!("{} observations for {} modelled agents", modelled_obs.len(), self.agents.len()),
            ));
        }
        modelled_obs
            .iter()
            .zip(&self.agents)
            .enumerate()
            .map(|(slot, (obs, sub))| self.act_one(slot + 1, sub, obs, rng))
            .collect()
    }

    fn act_one(&self, agent: usize, sub: &SubPolicy, obs: &[f64], rng: &mut (impl Rng + ?Sized)) -> Result<AgentAction> {
        match (sub, &self.env) {
            (SubPolicy::Dsl { message_map, navigator }, EnvConfig::Dsl(_)) => {
                Ok(heuristics::dsl_action(message_map, navigator, obs)?.to_vec())
            }
            (SubPolicy::Lbf { rule, epsilon, view_radius }, EnvConfig::Lbf(cfg)) => {
                // Draw both numbers every step so the stream does not depend on the branch.
                let explore: f64 = rng.random();
                let random_action = rng.random_range(0..crate::envs::lbf::N_ACTIONS);
                let wander = random_action % 4;
                let a = heuristics::lbf_action(cfg, *rule, *view_radius, obs, wander)?;
                Ok(vec![if explore < *epsilon { random_action } else { a }])
            }
            (SubPolicy::Pp { rule }, EnvConfig::Pp(_)) => Ok(vec![heuristics::pp_action(*rule, agent, obs)?]),
            (SubPolicy::Constant(a), _) => Ok(a.clone()),
            (SubPolicy::External(m), _) => {
                let mut adapter = RngAdapter(rng);
                m.act(obs, &mut adapter)
            }
            (sub, env) => Err(Error::Usage(format!("sub-policy {sub:?} cannot act in {}", env.kind()))),
        }
    }
}

struct RngAdapter<'a, R: Rng + ?Sized>(&'a mut R);

impl<R: Rng + ?Sized> RngCore for RngAdapter<'_, R> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

#[derive(Clone, Debug)]
pub struct FixedPolicyPool {
    pub env: EnvConfig,
    pub mode: PoolMode,
    pub seed: u64,
    pub policies: Vec<FixedPolicy>,
}

/// All injective colour-to-message codes, in lexicographic order.
pub fn message_maps() -> Vec<[usize; N_COLOURS]> {
    let n = crate::envs::dsl::N_MESSAGES;
    let mut out = Vec::new();
    for a in 0..n {
        for b in (0..n).filter(|&b| b != a) {
            for c in (0..n).filter(|&c| c != a && c != b) {
                out.push([a, b, c]);
            }
        }
    }
    out
}

/// Foraging variants in canonical order: the four rules greedy, then with
/// 10% random actions, then both again with a 3-cell view.
pub fn lbf_variants() -> Vec<SubPolicy> {
    let mut v = Vec::new();
    for view_radius in [None, Some(3)] {
        for epsilon in [0.0, 0.1] {
            for rule in LbfRule::ALL {
                v.push(SubPolicy::Lbf { rule, epsilon, view_radius });
            }
        }
    }
    v
}

/// Builds the pool of `k` policies for an environment.
///
/// DSL draws `k` distinct message codes; paired mode gives each one a
/// navigator, cartesian mode crosses them with all navigators (`10k`
/// policies). LBF takes the first `k` foraging variants. PP draws `k`
/// distinct predator rule triples.
pub fn build_pool(env: &EnvConfig, mode: PoolMode, k: usize, seed: u64) -> Result<FixedPolicyPool> {
    if k == 0 {
        return Err(Error::config("pool_size", "must be positive"));
    }
    if mode == PoolMode::Cartesian && env.kind() != EnvKind::Dsl {
        return Err(Error::config("pool_mode", "cartesian pools are only defined for dsl"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policies = Vec::new();
    match env.kind() {
        EnvKind::Dsl => {
            let mut maps = message_maps();
            if k > maps.len() {
                return Err(Error::config("pool_size", format!("at most {} message codes exist", maps.len())));
            }
            maps.shuffle(&mut rng);
            maps.truncate(k);
            let navs = Navigator::variants();
            for (i, map) in maps.iter().enumerate() {
                let chosen: Vec<Navigator> = match mode {
                    PoolMode::Paired => vec![navs[i % navs.len()]],
                    PoolMode::Cartesian => navs.clone(),
                };
                for navigator in chosen {
                    let sub = SubPolicy::Dsl { message_map: *map, navigator };
                    policies.push(FixedPolicy::new(policies.len(), "dsl-scripted", env.clone(), vec![sub]));
                }
            }
        }
        EnvKind::Lbf => {
            let variants = lbf_variants();
            if k > variants.len() {
                return Err(Error::config("pool_size", format!("at most {} foraging variants exist", variants.len())));
            }
            for (i, sub) in variants.into_iter().take(k).enumerate() {
                policies.push(FixedPolicy::new(i, "lbf-heuristic", env.clone(), vec![sub]));
            }
        }
        EnvKind::Pp => {
            let mut triples = Vec::new();
            for a in PpRule::ALL {
                for b in PpRule::ALL {
                    for c in PpRule::ALL {
                        triples.push([a, b, c]);
                    }
                }
            }
            if k > triples.len() {
                return Err(Error::config("pool_size", format!("at most {} rule triples exist", triples.len())));
            }
            triples.shuffle(&mut rng);
            for (i, t) in triples.into_iter().take(k).enumerate() {
                let subs = t.iter().map(|&rule| SubPolicy::Pp { rule }).collect();
                policies.push(FixedPolicy::new(i, "pp-heuristic", env.clone(), subs));
            }
        }
    }
    Ok(FixedPolicyPool { env: env.clone(), mode, seed, policies })
}

impl FixedPolicyPool {
    /// A pool from hand-built policies; ids are reassigned to `0..K`.
    pub fn from_policies(env: EnvConfig, mut policies: Vec<FixedPolicy>) -> Result<Self> {
        let n_modelled = env.spec()?.n_agents - 1;
        for (i, p) in policies.iter_mut().enumerate() {
            if p.agents.len() != n_modelled {
                return Err(Error::Usage(format!(
                    "policy {i} has {} sub-policies, the environment has {n_modelled} modelled agents",
                    p.agents.len()
                )));
            }
            p.id = i;
        }
        Ok(FixedPolicyPool { env, mode: PoolMode::Paired, seed: 0, policies })
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    /// Uniform draw.
    pub fn sample(&self, rng: &mut (impl Rng + ?Sized)) -> Result<&FixedPolicy> {
        if self.policies.is_empty() {
            return Err(Error::Usage("cannot sample from an empty policy pool".into()));
        }
        Ok(&self.policies[rng.random_range(0..self.policies.len())])
    }

    pub fn get(&self, id: usize) -> Option<&FixedPolicy> {
        self.policies.get(id)
    }

    pub fn manifest(&self) -> PoolManifest {
        PoolManifest {
            env: self.env.kind().to_string(),
            mode: self.mode,
            seed: self.seed,
            policies: self
                .policies
                .iter()
                .map(|p| PolicyRecord {
                    id: p.id,
                    kind: p.kind.clone(),
                    sub_policies: p.agents.iter().map(SubPolicy::describe).collect(),
                })
                .collect(),
        }
    }

    /// TOML manifest listing every policy.
    pub fn manifest_toml(&self) -> Result<String> {
        toml::to_string(&self.manifest()).map_err(|e| Error::Usage(format!("manifest: {e}")))
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.manifest_toml()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub env: String,
    pub mode: PoolMode,
    pub seed: u64,
    #[serde(rename = "policy")]
    pub policies: Vec<PolicyRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub id: usize,
    pub kind: String,
    pub sub_policies: Vec<String>,
}
