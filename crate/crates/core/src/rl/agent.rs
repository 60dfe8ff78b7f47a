use rand::Rng;

use crate::envs::{AgentAction, EnvSpec};
use crate::error::{Error, Result};
use crate::models::{AgentModel, ModelDims, ModelVariantConfig, Variant};
use crate::nn::{Activation, Linear, ParameterStore, Tape, Tensor, Var};

/// Actor and critic sharing two ReLU hidden layers.
#[derive(Clone, Debug)]
pub struct ActorCritic {
    pub trunk: [Linear; 2],
    pub pi: Linear,
    pub v: Linear,
    pub heads: Vec<usize>,
}

impl ActorCritic {
    pub fn new(store: &mut ParameterStore, name: &str, in_dim: usize, hidden: usize, heads: Vec<usize>, rng: &mut impl Rng) -> Result<Self> {
        let trunk = [
            Linear::new(store, &format!("{name}.trunk.0"), in_dim, hidden, rng)?,
            Linear::new(store, &format!("{name}.trunk.1"), hidden, hidden, rng)?,
        ];
        let pi = Linear::new(store, &format!("{name}.pi"), hidden, heads.iter().sum(), rng)?;
        let v = Linear::new(store, &format!("{name}.v"), hidden, 1, rng)?;
        Ok(ActorCritic { trunk, pi, v, heads })
    }

    pub fn in_dim(&self) -> usize {
        self.trunk[0].in_dim
    }

    /// `(logits, values)` for a batch of augmented observations.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<(Var, Var)> {
        let h = self.trunk[0].forward(tape, store, x, Activation::Relu)?;
        let h = self.trunk[1].forward(tape, store, h, Activation::Relu)?;
        let logits = self.pi.forward(tape, store, h, Activation::None)?;
        let v = self.v.forward(tape, store, h, Activation::None)?;
        Ok((logits, v))
    }
}

/// Draws one action per factor from concatenated per-factor probabilities.
/// Returns the action and its log-probability.
pub fn sample_action(probs: &[f64], heads: &[usize], rng: &mut (impl Rng + ?Sized)) -> (AgentAction, f64) {
    let mut off = 0;
    let mut action = Vec::with_capacity(heads.len());
    let mut logp = 0.0;
    for &n in heads {
        let p = &probs[off..off + n];
        let a = crate::pool::sample_categorical(p, rng);
        logp += p[a].ln();
        action.push(a);
        off += n;
    }
    (action, logp)
}

/// The learner: agent model plus actor-critic, with one parameter store per
/// optimizer.
///
/// `ed_store` holds the encoder-decoder trained by the auxiliary loss;
/// `rl_store` holds the actor-critic. For `nam` the encoder lives in
/// `rl_store` and is trained by the actor-critic loss instead.
#[derive(Clone, Debug)]
pub struct Agent {
    pub model: AgentModel,
    pub policy: ActorCritic,
    pub ed_store: ParameterStore,
    pub rl_store: ParameterStore,
}

impl Agent {
    pub fn new(spec: &EnvSpec, cfg: ModelVariantConfig, hidden: usize, vae_latent: usize, pool_size: usize, rng: &mut impl Rng) -> Result<Self> {
        let dims = ModelDims::from_spec(spec, hidden, vae_latent, pool_size);
        let mut ed_store = ParameterStore::new();
        let mut rl_store = ParameterStore::new();
        let model = if cfg.variant == Variant::Nam {
            AgentModel::new(cfg, dims.clone(), &mut rl_store, rng)?
        } else {
            AgentModel::new(cfg, dims.clone(), &mut ed_store, rng)?
        };
        let in_dim = dims.obs + model.embedding_dim();
        let policy = ActorCritic::new(&mut rl_store, "policy", in_dim, hidden, dims.act_factors.clone(), rng)?;
        Ok(Agent { model, policy, ed_store, rl_store })
    }

    pub fn variant(&self) -> Variant {
        self.model.variant()
    }

    /// The store that owns the encoder.
    pub fn encoder_store(&self) -> &ParameterStore {
        if self.variant() == Variant::Nam {
            &self.rl_store
        } else {
            &self.ed_store
        }
    }

    pub fn heads(&self) -> &[usize] {
        &self.policy.heads
    }

    /// `[obs, z]` on the tape.
    pub fn augment(&self, tape: &mut Tape, obs: Var, z: Var) -> Result<Var> {
        if tape.cols(obs) + tape.cols(z) != self.policy.in_dim() {
            return Err(Error::dim(
                "augment",
                format!("obs {} + embedding {} != policy input {}", tape.cols(obs), tape.cols(z), self.policy.in_dim()),
            ));
        }
        tape.concat_cols(&[obs, z])
    }

    /// Action probabilities (per-factor softmax, concatenated) and state
    /// values, without gradients.
    pub fn evaluate_policy(&self, obs: &Tensor, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let o = tape.constant(obs.clone());
        let zv = tape.constant(z.clone());
        let x = self.augment(&mut tape, o, zv)?;
        let (logits, v) = self.policy.forward(&mut tape, &self.rl_store, x)?;
        if !tape.value(logits).is_finite() {
            return Err(Error::Numeric("policy produced non-finite logits".into()));
        }
        let probs = tape.softmax(logits, &self.policy.heads)?;
        Ok((tape.value(probs).clone(), tape.value(v).data().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvConfig, EnvKind};
    use crate::rl::rng_stream;

    #[test]
    fn nam_encoder_lives_with_the_policy() {
        let spec = EnvConfig::default_for(EnvKind::Lbf).spec().unwrap();
        let mut rng = rng_stream(0, 0);
        let nam = Agent::new(&spec, ModelVariantConfig::new(Variant::Nam), 8, 4, 3, &mut rng).unwrap();
        assert!(nam.ed_store.is_empty());
        assert!(nam.rl_store.id("encoder.lstm.w").is_some());
        let liam = Agent::new(&spec, ModelVariantConfig::new(Variant::Liam), 8, 4, 3, &mut rng).unwrap();
        assert!(liam.ed_store.id("encoder.lstm.w").is_some());
        assert!(liam.ed_store.id("decoder.0.w").is_some());
        assert!(liam.rl_store.id("encoder.lstm.w").is_none());
        assert_eq!(liam.policy.in_dim(), spec.obs_len(0) + 8);
    }

    #[test]
    fn policy_outputs_are_distributions() {
        let spec = EnvConfig::default_for(EnvKind::Dsl).spec().unwrap();
        let mut rng = rng_stream(1, 0);
        let agent = Agent::new(&spec, ModelVariantConfig::new(Variant::LiamVae), 8, 3, 3, &mut rng).unwrap();
        let obs = Tensor::full(&[4, spec.obs_len(0)], 0.3);
        let z = Tensor::full(&[4, 3], -0.2);
        let (p, v) = agent.evaluate_policy(&obs, &z).unwrap();
        assert_eq!(v.len(), 4);
        for r in 0..4 {
            let row = p.row(r);
            assert!((row[..5].iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((row[5..].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let (a, logp) = sample_action(p.row(0), agent.heads(), &mut rng);
        assert_eq!(a.len(), 2);
        assert!((logp - (p.row(0)[a[0]] * p.row(0)[5 + a[1]]).ln()).abs() < 1e-12);
    }

    #[test]
    fn actor_critic_gradient_matches_finite_differences() {
        use crate::rl::a2c_loss;
        use rand::Rng;
        let mut rng = rng_stream(9, 0);
        let mut store = ParameterStore::new();
        let ac = ActorCritic::new(&mut store, "policy", 6, 5, vec![3, 2], &mut rng).unwrap();
        let rows: Vec<Tensor> = (0..3).map(|_| Tensor::matrix(2, 4, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).collect();
        let zs: Vec<Tensor> = (0..3).map(|_| Tensor::matrix(2, 2, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).collect();
        let actions: Vec<Vec<usize>> = (0..6).map(|_| vec![rng.random_range(0..3), rng.random_range(0..2)]).collect();
        let adv: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ret: Vec<f64> = (0..6).map(|_| rng.random_range(-20.0..2.0)).collect();
        let f = |s: &ParameterStore| {
            let mut tape = Tape::new();
            let xs: Vec<Var> = rows
                .iter()
                .zip(&zs)
                .map(|(o, z)| {
                    let o = tape.constant(o.clone());
                    let z = tape.constant(z.clone());
                    tape.concat_cols(&[o, z]).unwrap()
                })
                .collect();
            let x = tape.concat_rows(&xs).unwrap();
            let (l, v) = ac.forward(&mut tape, s, x).unwrap();
            let out = a2c_loss(&mut tape, l, v, &[3, 2], &actions, &adv, &ret, 0.05).unwrap();
            (tape, out.loss)
        };
        let (tape, loss) = f(&store);
        tape.backward(loss, &mut [&mut store]).unwrap();
        let ids: Vec<_> = store.entries().map(|e| store.id(&e.name).unwrap()).collect();
        for id in ids {
            let g = store.grad(id).clone();
            for k in 0..g.len() {
                let mut p = store.clone();
                p.value_mut(id).data_mut()[k] += 1e-6;
                let (t1, l1) = f(&p);
                let mut m = store.clone();
                m.value_mut(id).data_mut()[k] -= 1e-6;
                let (t2, l2) = f(&m);
                let fd = (t1.value(l1).item() - t2.value(l2).item()) / 2e-6;
                assert!((fd - g.data()[k]).abs() < 1e-5 * (1.0 + fd.abs()), "{k}: {fd} vs {}", g.data()[k]);
            }
        }
    }
}
