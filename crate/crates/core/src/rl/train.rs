use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{a2c_loss, rng_stream, Agent, EpisodeStats, Rollout, RolloutBatch, TrainingConfig};
use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::models::{ModelVariantConfig, Variant};
use crate::nn::{adam_update, clip_global_norm, AdamConfig, Tape, Var};
use crate::pool::FixedPolicyPool;
use crate::probe::{self, RunOptions};

/// Random-stream ids derived from the run seed.
pub(crate) const STREAM_INIT: u64 = 0;
pub(crate) const STREAM_TRAIN: u64 = 1;
pub(crate) const STREAM_ENV_BASE: u64 = 1 << 16;
pub(crate) const STREAM_EVAL_BASE: u64 = 1 << 32;

/// Counters of a training run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub steps: u64,
    pub updates: u64,
    pub episodes: u64,
    pub evaluations: u64,
    pub next_eval_at: u64,
}

/// Every random stream a trainer owns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerRngState {
    pub main: ChaCha8Rng,
    pub envs: Vec<ChaCha8Rng>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct A2cStats {
    pub loss: f64,
    pub value_loss: f64,
    pub policy_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateStats {
    pub ed_loss: Option<f64>,
    pub ed_grad_norm: Option<f64>,
    pub a2c: A2cStats,
    pub finished: Vec<EpisodeStats>,
}

/// One evaluation checkpoint of the metrics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub episodes: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub stderr_return: f64,
    /// Mean auxiliary loss over the updates since the previous record.
    pub ed_loss: Option<f64>,
    pub action_recon_acc: Option<f64>,
    pub seed: u64,
    pub variant: String,
}

/// Callbacks of [`Trainer::run`].
pub trait TrainHooks {
    fn on_metrics(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }

    /// Receives a summary of the batch that produced a non-finite loss.
    fn on_failure(&mut self, _dump: &serde_json::Value) {}
}

impl TrainHooks for () {}

/// Alternating encoder-decoder and actor-critic updates over `E` parallel
/// environments.
pub struct Trainer {
    pub cfg: TrainingConfig,
    pub seed: u64,
    pub env: EnvConfig,
    pub pool: FixedPolicyPool,
    pub agent: Agent,
    pub progress: Progress,
    rollout: Rollout,
    rng: ChaCha8Rng,
    ed_losses: Vec<f64>,
    failure: Option<serde_json::Value>,
}

impl Trainer {
    pub fn new(env: EnvConfig, pool: FixedPolicyPool, model: ModelVariantConfig, cfg: TrainingConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let spec = env.spec()?;
        let mut init = rng_stream(seed, STREAM_INIT);
        let agent = Agent::new(&spec, model, cfg.hidden, cfg.vae_latent, pool.len(), &mut init)?;
        let rngs = (0..cfg.n_envs).map(|i| rng_stream(seed, STREAM_ENV_BASE + i as u64)).collect();
        let rollout = Self::make_rollout(&env, &agent, &pool, rngs)?;
        let progress = Progress { next_eval_at: cfg.eval_interval, ..Progress::default() };
        Ok(Trainer {
            cfg,
            seed,
            env,
            pool,
            agent,
            progress,
            rollout,
            rng: rng_stream(seed, STREAM_TRAIN),
            ed_losses: Vec::new(),
            failure: None,
        })
    }

    fn make_rollout(env: &EnvConfig, agent: &Agent, pool: &FixedPolicyPool, rngs: Vec<ChaCha8Rng>) -> Result<Rollout> {
        let envs = rngs.iter().map(|_| env.build()).collect::<Result<Vec<_>>>()?;
        let mut rollout = Rollout::new(envs, rngs, agent, pool)?;
        rollout.stagger(pool)?;
        Ok(rollout)
    }

    /// Steps environments on worker threads. Results are identical either
    /// way; deterministic runs leave this off.
    pub fn set_parallel(&mut self, on: bool) {
        self.rollout.parallel = on;
    }

    pub fn rng_state(&self) -> TrainerRngState {
        TrainerRngState { main: self.rng.clone(), envs: self.rollout.rngs() }
    }

    /// Restores random streams and counters, e.g. after loading a
    /// checkpoint. Environments restart their episodes from the restored
    /// streams; in-flight episodes are not part of a checkpoint.
    pub fn restore(&mut self, rng: TrainerRngState, progress: Progress) -> Result<()> {
        if rng.envs.len() != self.cfg.n_envs {
            return Err(Error::Usage(format!(
                "checkpoint has {} environment streams, the run uses {}",
                rng.envs.len(),
                self.cfg.n_envs
            )));
        }
        self.rollout = Self::make_rollout(&self.env, &self.agent, &self.pool, rng.envs)?;
        self.rng = rng.main;
        self.progress = progress;
        Ok(())
    }

    /// One segment of `update_freq` steps from every environment.
    pub fn collect(&mut self) -> Result<RolloutBatch> {
        self.rollout.collect(&self.agent, &self.pool, self.cfg.update_freq)
    }

    /// One gradient step on the agent-model objective. Only `ed_store`
    /// changes.
    pub fn ed_update(&mut self, batch: &RolloutBatch) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let out = self.agent.model.ed_loss(&mut tape, &self.agent.ed_store, &batch.seq, &mut self.rng)?;
        let loss = tape.value(out.loss).item();
        if !loss.is_finite() {
            self.failure = Some(failure_dump("ed", loss, &self.progress, batch));
            return Err(Error::Numeric(format!("non-finite encoder-decoder loss at update {}", self.progress.updates)));
        }
        if out.clamped_logs > 0 || out.clamped_logvars > 0 {
            log::debug!("ed loss clamped {} log-probs, {} log-variances", out.clamped_logs, out.clamped_logvars);
        }
        tape.backward(out.loss, &mut [&mut self.agent.ed_store])?;
        let norm = clip_global_norm(&mut self.agent.ed_store, self.cfg.max_grad_norm);
        adam_update(&mut self.agent.ed_store, &AdamConfig::with_lr(self.cfg.lr_ed))?;
        Ok((loss, norm))
    }

    /// One gradient step on the actor-critic loss. Only `rl_store` changes.
    pub fn a2c_update(&mut self, batch: &RolloutBatch) -> Result<A2cStats> {
        let agent = &self.agent;
        let seq = &batch.seq;
        let mut tape = Tape::new();
        let zs: Vec<Var> = if agent.variant() == Variant::Nam {
            agent.model.embed_sequence(&mut tape, &agent.rl_store, seq)?.iter().map(|s| s.z).collect()
        } else {
            // Recorded embeddings: no path back into the encoder.
            batch.z.iter().map(|z| tape.constant(z.clone())).collect()
        };
        let mut xs = Vec::with_capacity(seq.len());
        for (o, z) in seq.obs.iter().zip(zs) {
            let o = tape.constant(o.clone());
            xs.push(agent.augment(&mut tape, o, z)?);
        }
        let x = tape.concat_rows(&xs)?;
        let (logits, values) = agent.policy.forward(&mut tape, &agent.rl_store, x)?;
        let (mut adv, ret) = batch.advantages(self.cfg.gamma, self.cfg.gae_lambda)?;
        if self.cfg.normalize_advantages && adv.len() > 1 {
            let n = adv.len() as f64;
            let mean = adv.iter().sum::<f64>() / n;
            let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
            adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
        }
        let actions: Vec<Vec<usize>> = seq.act.iter().flatten().cloned().collect();
        let out = a2c_loss(&mut tape, logits, values, agent.heads(), &actions, &adv, &ret, self.cfg.entropy_beta)?;
        let loss = tape.value(out.loss).item();
        if !loss.is_finite() {
            self.failure = Some(failure_dump("a2c", loss, &self.progress, batch));
            return Err(Error::Numeric(format!("non-finite actor-critic loss at update {}", self.progress.updates)));
        }
        tape.backward(out.loss, &mut [&mut self.agent.rl_store])?;
        let grad_norm = clip_global_norm(&mut self.agent.rl_store, self.cfg.max_grad_norm);
        adam_update(&mut self.agent.rl_store, &AdamConfig::with_lr(self.cfg.lr_rl))?;
        Ok(A2cStats { loss, value_loss: out.value_loss, policy_loss: out.policy_loss, entropy: out.entropy, grad_norm })
    }

    /// Collect one segment, then the agent-model step (skipped for `nam`),
    /// then the actor-critic step.
    pub fn update(&mut self) -> Result<UpdateStats> {
        let batch = self.collect()?;
        let (ed_loss, ed_grad_norm) = if self.agent.variant() == Variant::Nam {
            (None, None)
        } else {
            let (l, n) = self.ed_update(&batch)?;
            (Some(l), Some(n))
        };
        let a2c = self.a2c_update(&batch)?;
        self.progress.steps += batch.transitions() as u64;
        self.progress.updates += 1;
        self.progress.episodes += batch.finished.len() as u64;
        if let Some(l) = ed_loss {
            self.ed_losses.push(l);
        }
        Ok(UpdateStats { ed_loss, ed_grad_norm, a2c, finished: batch.finished })
    }

    /// Evaluation with the stream reserved for evaluation number `index`.
    pub fn evaluate(&self, index: u64, episodes: usize) -> Result<MetricsRecord> {
        let opts = RunOptions {
            episodes,
            seed: self.seed,
            stream_base: STREAM_EVAL_BASE + (index << 20),
            ..RunOptions::default()
        };
        let factory = || self.env.build();
        let traces = probe::run_episodes(&self.agent, &factory, &self.pool, &opts)?;
        let stats = probe::return_stats(&traces);
        let action_recon_acc = match probe::action_accuracy_from_traces(&self.agent, &traces) {
            Ok(curve) => curve.overall(),
            Err(Error::Usage(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(MetricsRecord {
            step: self.progress.steps,
            episodes: self.progress.episodes,
            mean_return: stats.mean,
            std_return: stats.std,
            stderr_return: stats.stderr,
            ed_loss: None,
            action_recon_acc,
            seed: self.seed,
            variant: self.agent.variant().to_string(),
        })
    }

    fn evaluate_and_record(&mut self, hooks: &mut dyn TrainHooks) -> Result<()> {
        let mut record = self.evaluate(self.progress.evaluations, self.cfg.eval_episodes)?;
        if !self.ed_losses.is_empty() {
            record.ed_loss = Some(self.ed_losses.iter().sum::<f64>() / self.ed_losses.len() as f64);
        }
        self.ed_losses.clear();
        self.progress.evaluations += 1;
        while self.progress.next_eval_at <= self.progress.episodes {
            self.progress.next_eval_at += self.cfg.eval_interval;
        }
        hooks.on_metrics(&record)
    }

    /// Trains until `total_steps`, evaluating every `eval_interval` training
    /// episodes and once more at the end.
    pub fn run(&mut self, hooks: &mut dyn TrainHooks) -> Result<()> {
        let mut evaluated_at = None;
        while self.progress.steps < self.cfg.total_steps {
            if let Err(e) = self.update() {
                if let Some(dump) = self.failure.take() {
                    hooks.on_failure(&dump);
                }
                return Err(e);
            }
            if self.progress.episodes >= self.progress.next_eval_at {
                self.evaluate_and_record(hooks)?;
                evaluated_at = Some(self.progress.steps);
            }
            if self.cfg.checkpoint_interval > 0 && self.progress.updates.is_multiple_of(self.cfg.checkpoint_interval) {
                hooks.on_checkpoint(self)?;
            }
        }
        if evaluated_at != Some(self.progress.steps) {
            self.evaluate_and_record(hooks)?;
        }
        hooks.on_checkpoint(self)
    }
}

fn failure_dump(stage: &str, loss: f64, progress: &Progress, batch: &RolloutBatch) -> serde_json::Value {
    json!({
        "stage": stage,
        "loss": loss.to_string(),
        "update": progress.updates,
        "step": progress.steps,
        "rewards": batch.rewards,
        "values": batch.values.iter().map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>()).collect::<Vec<_>>(),
        "actions": batch.seq.act,
        "modelled_actions": batch.seq.modelled_act,
        "policy_ids": batch.seq.policy_ids,
        "dones": batch.seq.dones,
        "observations": batch.seq.obs.iter().map(|t| t.data().iter().map(|v| v.to_string()).collect::<Vec<_>>()).collect::<Vec<_>>(),
        "embedding_finite": batch.z.iter().all(|z| z.is_finite()),
    })
}
