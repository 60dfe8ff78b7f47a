use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::agent::sample_action;
use super::{gae_advantages, Agent};
use crate::envs::{AgentAction, EnvSpec, Environment, Observation};
use crate::error::{Error, Result};
use crate::models::{EncoderState, SequenceBatch};
use crate::nn::Tensor;
use crate::pool::FixedPolicyPool;

/// Summary of one finished training episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStats {
    pub ret: f64,
    pub len: usize,
    pub policy_id: usize,
}

/// One segment of `length` steps from every environment, time-major.
#[derive(Clone, Debug)]
pub struct RolloutBatch {
    /// Inputs and targets of the agent-model objective.
    pub seq: SequenceBatch,
    /// Embeddings fed to the policy during collection.
    pub z: Vec<Tensor>,
    pub rewards: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub log_probs: Vec<Vec<f64>>,
    /// Value of the state after the last step, per environment.
    pub bootstrap: Vec<f64>,
    pub finished: Vec<EpisodeStats>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn n_envs(&self) -> usize {
        self.bootstrap.len()
    }

    pub fn transitions(&self) -> usize {
        self.len() * self.n_envs()
    }

    /// Advantages and returns flattened time-major (`t * E + e`).
    pub fn advantages(&self, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (t_len, e_len) = (self.len(), self.n_envs());
        let mut adv = vec![0.0; t_len * e_len];
        let mut ret = vec![0.0; t_len * e_len];
        for e in 0..e_len {
            let r: Vec<f64> = (0..t_len).map(|t| self.rewards[t][e]).collect();
            let mut v: Vec<f64> = (0..t_len).map(|t| self.values[t][e]).collect();
            v.push(self.bootstrap[e]);
            let d: Vec<bool> = (0..t_len).map(|t| self.seq.dones[t][e]).collect();
            let (a, g) = gae_advantages(&r, &v, &d, gamma, lambda)?;
            for t in 0..t_len {
                adv[t * e_len + e] = a[t];
                ret[t * e_len + e] = g[t];
            }
        }
        Ok((adv, ret))
    }
}

struct EnvSlot {
    env: Box<dyn Environment>,
    rng: ChaCha8Rng,
    obs: Vec<Observation>,
    prev_act: Vec<f64>,
    modelled_prev_act: Vec<f64>,
    policy: usize,
    ret: f64,
    len: usize,
}

struct SlotOutcome {
    reward: f64,
    done: bool,
    next_obs: Observation,
    modelled_act: Vec<usize>,
    policy_id: usize,
    finished: Option<EpisodeStats>,
}

impl EnvSlot {
    fn reset(&mut self, spec: &EnvSpec, pool: &FixedPolicyPool) -> Result<()> {
        let seed = self.rng.random::<u64>();
        self.obs = self.env.reset(seed)?;
        self.policy = pool.sample(&mut self.rng)?.id;
        self.prev_act = vec![0.0; spec.action_spaces[0].one_hot_len()];
        self.modelled_prev_act = vec![0.0; spec.modelled_action_one_hot_len()];
        self.ret = 0.0;
        self.len = 0;
        Ok(())
    }

    fn step(&mut self, action: AgentAction, spec: &EnvSpec, pool: &FixedPolicyPool) -> Result<SlotOutcome> {
        let policy = pool
            .get(self.policy)
            .ok_or_else(|| Error::Usage(format!("policy {} is not in the pool", self.policy)))?;
        let modelled = policy.act(&self.obs[1..], &mut self.rng)?;
        let mut joint = Vec::with_capacity(spec.n_agents);
        joint.push(action.clone());
        joint.extend(modelled.iter().cloned());
        let r = self.env.step(&joint)?;
        self.ret += r.rewards[0];
        self.len += 1;
        let mut out = SlotOutcome {
            reward: r.rewards[0],
            done: r.done,
            next_obs: r.observations[0].clone(),
            modelled_act: modelled.concat(),
            policy_id: self.policy,
            finished: None,
        };
        if r.done {
            out.finished = Some(EpisodeStats { ret: self.ret, len: self.len, policy_id: self.policy });
            self.reset(spec, pool)?;
        } else {
            self.obs = r.observations;
            self.prev_act = spec.action_spaces[0].one_hot(&action);
            self.modelled_prev_act = modelled_one_hot(spec, &modelled);
        }
        Ok(out)
    }
}

pub(crate) fn modelled_one_hot(spec: &EnvSpec, actions: &[AgentAction]) -> Vec<f64> {
    spec.modelled_agents().zip(actions).flat_map(|(i, a)| spec.action_spaces[i].one_hot(a)).collect()
}

pub(crate) fn rows_tensor<'a>(rows: impl Iterator<Item = &'a [f64]>, cols: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        if r.len() != cols {
            return Err(Error::dim("rows_tensor", format!("row of {} values, expected {cols}", r.len())));
        }
        data.extend_from_slice(r);
        n += 1;
    }
    Tensor::matrix(n, cols, data)
}

/// `E` environments with their encoder state, stepped in lock-step.
pub struct Rollout {
    slots: Vec<EnvSlot>,
    spec: EnvSpec,
    pub state: EncoderState,
    pub partner_state: Option<EncoderState>,
    /// Step environments on the rayon pool. Every environment draws only from
    /// its own stream, so results do not depend on this flag.
    pub parallel: bool,
}

impl Rollout {
    /// One random stream per environment; every environment is reset and
    /// assigned a policy immediately.
    pub fn new(envs: Vec<Box<dyn Environment>>, rngs: Vec<ChaCha8Rng>, agent: &Agent, pool: &FixedPolicyPool) -> Result<Self> {
        if envs.is_empty() || envs.len() != rngs.len() {
            return Err(Error::Usage(format!("{} environments with {} random streams", envs.len(), rngs.len())));
        }
        let spec = envs[0].spec().clone();
        let mut slots = Vec::with_capacity(envs.len());
        for (i, (env, rng)) in envs.into_iter().zip(rngs).enumerate() {
            if env.spec() != &spec {
                return Err(Error::Usage(format!("environment {i} differs from environment 0")));
            }
            let mut slot = EnvSlot { env, rng, obs: Vec::new(), prev_act: Vec::new(), modelled_prev_act: Vec::new(), policy: 0, ret: 0.0, len: 0 };
            slot.reset(&spec, pool).map_err(|e| Error::Env { index: i, source: Box::new(e) })?;
            slots.push(slot);
        }
        let n = slots.len();
        Ok(Rollout {
            slots,
            spec,
            state: agent.model.initial_state(n),
            partner_state: agent.model.initial_partner_state(n),
            parallel: false,
        })
    }

    pub fn n_envs(&self) -> usize {
        self.slots.len()
    }

    /// Advances environment `i` by `i * horizon / E` steps of uniformly random
    /// actions so episode ends are spread over updates instead of landing in
    /// the same segment for every environment. With fixed-length episodes and
    /// gradient clipping, lock-step terminals bias the critic badly.
    pub fn stagger(&mut self, pool: &FixedPolicyPool) -> Result<()> {
        let n = self.slots.len();
        let horizon = self.spec.horizon;
        let spec = &self.spec;
        for (i, slot) in self.slots.iter_mut().enumerate() {
            for _ in 0..i * horizon / n {
                let action: AgentAction = spec.action_spaces[0].factors.iter().map(|&k| slot.rng.random_range(0..k)).collect();
                slot.step(action, spec, pool).map_err(|e| Error::Env { index: i, source: Box::new(e) })?;
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn rngs(&self) -> Vec<ChaCha8Rng> {
        self.slots.iter().map(|s| s.rng.clone()).collect()
    }

    /// Fixed-policy id currently acting in each environment.
    pub fn current_policies(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.policy).collect()
    }

    fn inputs(&self) -> Result<[Tensor; 4]> {
        let s = &self.spec;
        let obs = rows_tensor(self.slots.iter().map(|x| x.obs[0].as_slice()), s.obs_len(0))?;
        let prev = rows_tensor(self.slots.iter().map(|x| x.prev_act.as_slice()), s.action_spaces[0].one_hot_len())?;
        let mobs_rows: Vec<Vec<f64>> = self.slots.iter().map(|x| x.obs[1..].concat()).collect();
        let mobs = rows_tensor(mobs_rows.iter().map(Vec::as_slice), s.modelled_obs_len())?;
        let mprev = rows_tensor(self.slots.iter().map(|x| x.modelled_prev_act.as_slice()), s.modelled_action_one_hot_len())?;
        Ok([obs, prev, mobs, mprev])
    }

    /// Steps every environment `length` times under the agent's policy.
    ///
    /// An environment whose episode ends is reset at once, gets a freshly
    /// sampled fixed policy, and its encoder state row is zeroed.
    pub fn collect(&mut self, agent: &Agent, pool: &FixedPolicyPool, length: usize) -> Result<RolloutBatch> {
        let e_len = self.slots.len();
        let model = &agent.model;
        let store = agent.encoder_store();
        let mut seq = SequenceBatch {
            obs: Vec::with_capacity(length),
            prev_act: Vec::with_capacity(length),
            act: Vec::with_capacity(length),
            next_obs: Vec::with_capacity(length),
            modelled_obs: Vec::with_capacity(length),
            modelled_prev_act: Vec::with_capacity(length),
            modelled_act: Vec::with_capacity(length),
            policy_ids: Vec::with_capacity(length),
            dones: Vec::with_capacity(length),
            init: self.state.clone(),
            partner_init: self.partner_state.clone(),
        };
        let mut batch_z = Vec::with_capacity(length);
        let mut rewards = Vec::with_capacity(length);
        let mut values = Vec::with_capacity(length);
        let mut log_probs = Vec::with_capacity(length);
        let mut finished = Vec::new();

        for _ in 0..length {
            let [obs, prev, mobs, mprev] = self.inputs()?;
            let (enc_o, enc_a) = model.select_inputs(&obs, &prev, &mobs, &mprev);
            let (z, mut next_state) = model.encode_step(store, &self.state, enc_o, enc_a)?;
            let mut next_partner = match (&model.partner, &self.partner_state) {
                (Some(p), Some(ps)) => Some(p.infer(store, ps, &mobs, &mprev)?.1),
                _ => None,
            };
            let (probs, v) = agent.evaluate_policy(&obs, &z)?;
            let mut actions = Vec::with_capacity(e_len);
            let mut logp = Vec::with_capacity(e_len);
            for (i, slot) in self.slots.iter_mut().enumerate() {
                let (a, lp) = sample_action(probs.row(i), agent.heads(), &mut slot.rng);
                actions.push(a);
                logp.push(lp);
            }
            let spec = &self.spec;
            let outcomes: Vec<SlotOutcome> = if self.parallel {
                self.slots
                    .par_iter_mut()
                    .zip(actions.par_iter())
                    .enumerate()
                    .map(|(i, (slot, a))| slot.step(a.clone(), spec, pool).map_err(|e| Error::Env { index: i, source: Box::new(e) }))
                    .collect::<Result<_>>()?
            } else {
                self.slots
                    .iter_mut()
                    .zip(&actions)
                    .enumerate()
                    .map(|(i, (slot, a))| slot.step(a.clone(), spec, pool).map_err(|e| Error::Env { index: i, source: Box::new(e) }))
                    .collect::<Result<_>>()?
            };

            let dones: Vec<bool> = outcomes.iter().map(|o| o.done).collect();
            for (i, d) in dones.iter().enumerate() {
                if *d {
                    next_state.reset_row(i);
                    if let Some(ps) = &mut next_partner {
                        ps.reset_row(i);
                    }
                }
            }
            self.state = next_state;
            self.partner_state = next_partner;

            seq.next_obs.push(rows_tensor(outcomes.iter().map(|o| o.next_obs.as_slice()), self.spec.obs_len(0))?);
            seq.obs.push(obs);
            seq.prev_act.push(prev);
            seq.act.push(actions);
            seq.modelled_obs.push(mobs);
            seq.modelled_prev_act.push(mprev);
            seq.modelled_act.push(outcomes.iter().map(|o| o.modelled_act.clone()).collect());
            seq.policy_ids.push(outcomes.iter().map(|o| o.policy_id).collect());
            seq.dones.push(dones);
            batch_z.push(z);
            rewards.push(outcomes.iter().map(|o| o.reward).collect());
            values.push(v);
            log_probs.push(logp);
            finished.extend(outcomes.into_iter().filter_map(|o| o.finished));
        }

        // Throwaway encoder step: the embedding of the next state, for bootstrapping only.
        let [obs, prev, mobs, mprev] = self.inputs()?;
        let (enc_o, enc_a) = model.select_inputs(&obs, &prev, &mobs, &mprev);
        let (z, _) = model.encode_step(store, &self.state, enc_o, enc_a)?;
        let (_, bootstrap) = agent.evaluate_policy(&obs, &z)?;

        Ok(RolloutBatch { seq, z: batch_z, rewards, values, log_probs, bootstrap, finished })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{DslConfig, EnvConfig, EnvKind};
    use crate::models::{ModelVariantConfig, Variant};
    use crate::pool::{build_pool, PoolMode};
    use crate::rl::rng_stream;

    fn setup(variant: Variant, env: EnvConfig, n: usize) -> (Agent, FixedPolicyPool, Rollout) {
        let spec = env.spec().unwrap();
        let pool = build_pool(&env, PoolMode::Paired, 3, 5).unwrap();
        let mut rng = rng_stream(5, 0);
        let agent = Agent::new(&spec, ModelVariantConfig::new(variant), 16, 4, pool.len(), &mut rng).unwrap();
        let envs = (0..n).map(|_| env.build().unwrap()).collect();
        let rngs = (0..n).map(|i| rng_stream(5, 100 + i as u64)).collect();
        let rollout = Rollout::new(envs, rngs, &agent, &pool).unwrap();
        (agent, pool, rollout)
    }

    #[test]
    fn ten_by_ten_transitions() {
        let (agent, pool, mut ro) = setup(Variant::Liam, EnvConfig::default_for(EnvKind::Dsl), 10);
        let b = ro.collect(&agent, &pool, 10).unwrap();
        assert_eq!(b.transitions(), 100);
        assert_eq!(b.seq.len(), 10);
        assert_eq!(b.seq.rows(), 10);
        assert_eq!(b.z[0].shape(), &[10, 16]);
        let (adv, ret) = b.advantages(0.99, 0.95).unwrap();
        assert_eq!(adv.len(), 100);
        assert_eq!(ret.len(), 100);
    }

    #[test]
    fn episode_end_resets_encoder_and_previous_actions() {
        let env = EnvConfig::Dsl(DslConfig { horizon: 3, ..DslConfig::default() });
        let (agent, pool, mut ro) = setup(Variant::Liam, env, 2);
        let b = ro.collect(&agent, &pool, 6).unwrap();
        // The horizon ends episodes at steps 2 and 5.
        for t in 0..6 {
            assert_eq!(b.seq.dones[t], vec![t % 3 == 2; 2]);
        }
        assert_eq!(b.finished.len(), 4);
        // Step 3 starts fresh: zero previous action, and the embedding equals
        // a zero-state encoding of the step-3 inputs.
        assert!(b.seq.prev_act[3].data().iter().all(|v| *v == 0.0));
        assert!(b.seq.prev_act[1].data().iter().any(|v| *v != 0.0));
        let fresh = agent.model.initial_state(2);
        let (z, _) = agent.model.encode_step(agent.encoder_store(), &fresh, &b.seq.obs[3], &b.seq.prev_act[3]).unwrap();
        assert_eq!(z, b.z[3]);
        let (z1, _) = agent.model.encode_step(agent.encoder_store(), &fresh, &b.seq.obs[1], &b.seq.prev_act[1]).unwrap();
        assert_ne!(z1, b.z[1]);
    }

    #[test]
    fn recorded_modelled_actions_replay() {
        let (agent, pool, mut ro) = setup(Variant::Fiam, EnvConfig::default_for(EnvKind::Dsl), 4);
        let b = ro.collect(&agent, &pool, 30).unwrap();
        let mut rng = rng_stream(0, 0);
        for t in 0..30 {
            for e in 0..4 {
                let policy = pool.get(b.seq.policy_ids[t][e]).unwrap();
                let obs = b.seq.modelled_obs[t].row(e).to_vec();
                let replay = policy.act(&[obs], &mut rng).unwrap().concat();
                assert_eq!(replay, b.seq.modelled_act[t][e]);
            }
        }
    }

    #[test]
    fn parallel_stepping_matches_sequential() {
        let env = EnvConfig::default_for(EnvKind::Lbf);
        let (agent, pool, mut a) = setup(Variant::Carl, env.clone(), 3);
        let (_, _, mut b) = setup(Variant::Carl, env, 3);
        b.parallel = true;
        for _ in 0..3 {
            let x = a.collect(&agent, &pool, 7).unwrap();
            let y = b.collect(&agent, &pool, 7).unwrap();
            assert_eq!(x.rewards, y.rewards);
            assert_eq!(x.seq.act, y.seq.act);
            assert_eq!(x.bootstrap, y.bootstrap);
        }
    }
}
