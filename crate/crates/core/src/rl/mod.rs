//! Advantage actor-critic over the controlled agent's observation augmented
//! with the agent-model embedding, and the training loop around it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor, Var};

mod agent;
pub(crate) mod rollout;
pub(crate) mod train;

pub use agent::{sample_action, ActorCritic, Agent};
pub use rollout::{EpisodeStats, Rollout, RolloutBatch};
pub use train::{A2cStats, MetricsRecord, Progress, TrainHooks, Trainer, TrainerRngState, UpdateStats};

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub entropy_beta: f64,
    pub lr_rl: f64,
    pub lr_ed: f64,
    /// Parallel environments.
    pub n_envs: usize,
    /// Environment steps per update (and truncation length for BPTT).
    pub update_freq: usize,
    /// Total environment steps summed over all parallel environments.
    pub total_steps: u64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    /// Width of every hidden layer and of the embedding.
    pub hidden: usize,
    /// Latent width of the variational encoder.
    pub vae_latent: usize,
    /// Evaluate after this many training episodes.
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Checkpoint every this many updates; 0 keeps only the final one.
    pub checkpoint_interval: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            entropy_beta: 1e-2,
            lr_rl: 3e-4,
            lr_ed: 7e-4,
            n_envs: 10,
            update_freq: 10,
            total_steps: 500_000,
            max_grad_norm: 0.5,
            normalize_advantages: false,
            hidden: 128,
            vae_latent: 64,
            eval_interval: 100,
            eval_episodes: 30,
            checkpoint_interval: 0,
        }
    }
}

impl TrainingConfig {
    /// Defaults with the per-environment entropy weight and step budget.
    pub fn for_env(kind: EnvKind) -> Self {
        let base = TrainingConfig::default();
        match kind {
            EnvKind::Lbf => TrainingConfig { entropy_beta: 1e-3, ..base },
            EnvKind::Pp => base,
            EnvKind::Dsl => TrainingConfig { total_steps: 1_000_000, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("training.{k}");
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config(key("gamma"), format!("{} is outside (0, 1)", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::config(key("gae_lambda"), format!("{} is outside [0, 1]", self.gae_lambda)));
        }
        if !(self.entropy_beta >= 0.0 && self.entropy_beta.is_finite()) {
            return Err(Error::config(key("entropy_beta"), format!("{} is negative or not finite", self.entropy_beta)));
        }
        for (name, lr) in [("lr_rl", self.lr_rl), ("lr_ed", self.lr_ed)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::config(key(name), format!("{lr} is negative or not finite")));
            }
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::config(key("max_grad_norm"), "must be positive"));
        }
        for (name, v) in [
            ("n_envs", self.n_envs),
            ("update_freq", self.update_freq),
            ("hidden", self.hidden),
            ("vae_latent", self.vae_latent),
        ] {
            if v == 0 {
                return Err(Error::config(key(name), "must be at least 1"));
            }
        }
        if self.eval_interval == 0 {
            return Err(Error::config(key("eval_interval"), "must be at least 1"));
        }
        Ok(())
    }

    /// Environment steps consumed by one update.
    pub fn steps_per_update(&self) -> u64 {
        (self.n_envs * self.update_freq) as u64
    }
}

/// Independent random stream `stream` of the run seeded with `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generalised advantage estimates for one environment's segment.
///
/// `values` has one more entry than `rewards`: the bootstrap value of the
/// state after the last step. `dones[t]` cuts both the bootstrap and the
/// accumulation after step `t`. Returns `(advantages, returns)` with
/// `returns = advantages + values[..T]`.
pub fn gae_advantages(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(Error::dim(
            "gae_advantages",
            format!("{n} rewards, {} values (need {}), {} done flags", values.len(), n + 1, dones.len()),
        ));
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Scalar parts of the actor-critic loss, for logging.
#[derive(Clone, Copy, Debug)]
pub struct A2cLoss {
    pub loss: Var,
    pub value_loss: f64,
    pub policy_loss: f64,
    pub entropy: f64,
}

/// Mean over rows of `0.5 (ret - V)^2 - A log pi(a) - beta H(pi)`.
///
/// `logits` is `n × sum(heads)`, `values` is `n × 1`. For a factored action
/// the log-probability and the entropy are sums over the factors.
/// Advantages and returns enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn a2c_loss(
    tape: &mut Tape,
    logits: Var,
    values: Var,
    heads: &[usize],
    actions: &[Vec<usize>],
    advantages: &[f64],
    returns: &[f64],
    beta: f64,
) -> Result<A2cLoss> {
    let n = tape.rows(logits);
    if n == 0 {
        return Err(Error::Usage("actor-critic loss over an empty batch".into()));
    }
    if tape.rows(values) != n || tape.cols(values) != 1 || actions.len() != n || advantages.len() != n || returns.len() != n {
        return Err(Error::dim("a2c_loss", format!("{n} logit rows against mismatched values, actions or targets")));
    }
    let mut cols = Vec::with_capacity(n);
    for a in actions {
        if a.len() != heads.len() || a.iter().zip(heads).any(|(x, h)| x >= h) {
            return Err(Error::dim("a2c_loss", format!("action {a:?} for heads {heads:?}")));
        }
        let mut off = 0;
        cols.push(
            a.iter()
                .zip(heads)
                .map(|(x, h)| {
                    let c = off + x;
                    off += h;
                    c
                })
                .collect::<Vec<_>>(),
        );
    }
    let logp_all = tape.log_softmax(logits, heads)?;
    let picked = tape.gather_cols(logp_all, &cols)?;
    let logp = tape.sum_cols(picked);
    let probs = tape.exp(logp_all);
    let plogp = tape.mul(probs, logp_all)?;
    let neg_entropy = tape.sum_cols(plogp);

    let ret = tape.constant(Tensor::matrix(n, 1, returns.to_vec())?);
    let adv = tape.constant(Tensor::matrix(n, 1, advantages.to_vec())?);
    let err = tape.sub(values, ret)?;
    let sq = tape.square(err);
    let value_term = tape.scale(sq, 0.5);
    let weighted = tape.mul(adv, logp)?;
    let policy_term = tape.scale(weighted, -1.0);
    let entropy_term = tape.scale(neg_entropy, beta);

    let value_loss = tape.value(value_term).data().iter().sum::<f64>() / n as f64;
    let policy_loss = tape.value(policy_term).data().iter().sum::<f64>() / n as f64;
    let entropy = -tape.value(neg_entropy).data().iter().sum::<f64>() / n as f64;

    let a = tape.add(value_term, policy_term)?;
    let total = tape.add(a, entropy_term)?;
    let loss = tape.mean(total);
    Ok(A2cLoss { loss, value_loss, policy_loss, entropy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax_row;
    use rand::Rng;

    /// Direct sum over the remainder of the episode.
    fn brute_gae(r: &[f64], v: &[f64], d: &[bool], g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        let delta: Vec<f64> = (0..n).map(|t| r[t] + g * v[t + 1] * if d[t] { 0.0 } else { 1.0 } - v[t]).collect();
        (0..n)
            .map(|t| {
                let mut s = 0.0;
                for k in t..n {
                    s += (g * l).powi((k - t) as i32) * delta[k];
                    if d[k] {
                        break;
                    }
                }
                s
            })
            .collect()
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let r = [1.0, -0.5, 2.0];
        let v = [0.3, 0.1, -0.2, 0.7];
        let d = [false, false, false];
        let (a, ret) = gae_advantages(&r, &v, &d, 0.9, 0.0).unwrap();
        for t in 0..3 {
            assert_eq!(a[t], r[t] + 0.9 * v[t + 1] - v[t]);
            assert_eq!(ret[t], a[t] + v[t]);
        }
    }

    #[test]
    fn gae_single_terminal_step() {
        let (a, _) = gae_advantages(&[2.5], &[0.75, 100.0], &[true], 0.99, 0.95).unwrap();
        assert_eq!(a, vec![2.5 - 0.75]);
    }

    #[test]
    fn gae_matches_brute_force() {
        let mut rng = rng_stream(3, 0);
        for _ in 0..50 {
            let n = rng.random_range(1..=50);
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..=n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.1)).collect();
            let (a, _) = gae_advantages(&r, &v, &d, 0.99, 0.95).unwrap();
            for (x, y) in a.iter().zip(brute_gae(&r, &v, &d, 0.99, 0.95)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gae_length_mismatch() {
        let err = gae_advantages(&[1.0], &[0.0], &[false], 0.9, 0.9).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "gae_advantages", .. }));
    }

    fn loss_value(logits: &[Vec<f64>], values: &[f64], heads: &[usize], actions: &[Vec<usize>], adv: &[f64], ret: &[f64], beta: f64) -> f64 {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::from_rows(logits).unwrap());
        let v = tape.constant(Tensor::matrix(values.len(), 1, values.to_vec()).unwrap());
        let out = a2c_loss(&mut tape, l, v, heads, actions, adv, ret, beta).unwrap();
        tape.value(out.loss).item()
    }

    #[test]
    fn zero_advantage_and_beta_leaves_value_term() {
        let got = loss_value(&[vec![0.3, -1.0], vec![2.0, 0.0]], &[1.0, -1.0], &[2], &[vec![0], vec![1]], &[0.0, 0.0], &[0.0, 1.0], 0.0);
        assert!((got - (0.5 * 1.0 + 0.5 * 4.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_policy_entropy_term() {
        let got = loss_value(&[vec![0.0; 5]], &[0.0], &[5], &[vec![3]], &[0.0], &[0.0], 0.1);
        assert!((got + 0.1 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn a2c_loss_matches_direct_formula() {
        let mut rng = rng_stream(11, 0);
        let heads = [5, 5];
        let n = 6;
        let logits: Vec<Vec<f64>> = (0..n).map(|_| (0..10).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let actions: Vec<Vec<usize>> = (0..n).map(|_| vec![rng.random_range(0..5), rng.random_range(0..5)]).collect();
        let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ret: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let beta = 0.01;
        let mut expected = 0.0;
        for i in 0..n {
            let mut logp = 0.0;
            let mut ent = 0.0;
            for (f, slice) in logits[i].chunks(5).enumerate() {
                let p = softmax_row(slice).unwrap();
                logp += p[actions[i][f]].ln();
                ent -= p.iter().map(|q| q * q.ln()).sum::<f64>();
            }
            expected += 0.5 * (ret[i] - values[i]).powi(2) - adv[i] * logp - beta * ent;
        }
        expected /= n as f64;
        let got = loss_value(&logits, &values, &heads, &actions, &adv, &ret, beta);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn config_ranges() {
        let cfg = TrainingConfig { entropy_beta: -0.1, ..TrainingConfig::default() };
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "training.entropy_beta"));
        assert!(TrainingConfig { gamma: 1.0, ..TrainingConfig::default() }.validate().is_err());
        assert_eq!(TrainingConfig::for_env(EnvKind::Lbf).entropy_beta, 1e-3);
        TrainingConfig::default().validate().unwrap();
    }
}
