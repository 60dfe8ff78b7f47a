//! Recurrent agent models.
//!
//! Every variant runs an LSTM encoder over a trajectory and emits one
//! embedding per step. What the encoder reads and what trains it differs:
//!
//! | variant      | encoder input                         | objective                              |
//! |--------------|---------------------------------------|----------------------------------------|
//! | `liam`       | controlled obs + previous action      | reconstruct modelled obs and actions   |
//! | `fiam`       | modelled obs + previous action        | same as `liam`                         |
//! | `nam`        | controlled obs + previous action      | none (trained by the RL loss)          |
//! | `cbam`       | controlled obs + previous action      | classify the fixed-policy id           |
//! | `carl`       | controlled obs + previous action      | InfoNCE against a modelled-side encoder|
//! | `liam-vae`   | controlled obs + previous action      | ELBO with previous-posterior prior     |
//! | `liam-local` | controlled obs + previous action      | reconstruct own next obs and action    |

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, LstmCell, Mlp, ParameterStore, Tape, Tensor, Var};

pub mod losses;

pub use losses::{
    carl_infonce_loss, cbam_loss, gaussian_kl, gaussian_kl_value, liam_loss, local_recon_loss,
    vae_elbo_loss, LossOut, ReconMask, ReconTargets, LOG_FLOOR, LOGVAR_RANGE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Liam,
    Fiam,
    Nam,
    Cbam,
    Carl,
    LiamVae,
    LiamLocal,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Liam,
        Variant::Fiam,
        Variant::Nam,
        Variant::Cbam,
        Variant::Carl,
        Variant::LiamVae,
        Variant::LiamLocal,
    ];

    /// Variants trained by reconstructing observations and actions.
    pub fn reconstructs(self) -> bool {
        matches!(self, Variant::Liam | Variant::Fiam | Variant::LiamVae | Variant::LiamLocal)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Liam => "liam",
            Variant::Fiam => "fiam",
            Variant::Nam => "nam",
            Variant::Cbam => "cbam",
            Variant::Carl => "carl",
            Variant::LiamVae => "liam-vae",
            Variant::LiamLocal => "liam-local",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == lower)
            .ok_or_else(|| Error::config("variant", format!("unknown variant `{s}`")))
    }
}

/// Variant plus the input/target ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelVariantConfig {
    pub variant: Variant,
    pub encoder_obs: bool,
    pub encoder_act: bool,
    pub recon_obs: bool,
    pub recon_act: bool,
}

impl Default for ModelVariantConfig {
    fn default() -> Self {
        ModelVariantConfig::new(Variant::Liam)
    }
}

impl ModelVariantConfig {
    pub fn new(variant: Variant) -> Self {
        ModelVariantConfig { variant, encoder_obs: true, encoder_act: true, recon_obs: true, recon_act: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.encoder_obs && !self.encoder_act {
            return Err(Error::config("model.encoder_obs", "the encoder needs at least one input"));
        }
        if self.variant.reconstructs() && !self.recon_obs && !self.recon_act {
            return Err(Error::config("model.recon_obs", "reconstruction variants need at least one target"));
        }
        Ok(())
    }

    pub fn has_decoder(&self) -> bool {
        self.variant.reconstructs()
    }

    pub fn mask(&self) -> ReconMask {
        ReconMask { obs: self.recon_obs, act: self.recon_act }
    }
}

/// Sizes derived from an environment plus network widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub obs: usize,
    pub act_factors: Vec<usize>,
    pub modelled_obs: usize,
    pub modelled_factors: Vec<usize>,
    pub hidden: usize,
    pub vae_latent: usize,
    pub pool_size: usize,
}

impl ModelDims {
    pub fn from_spec(spec: &EnvSpec, hidden: usize, vae_latent: usize, pool_size: usize) -> Self {
        ModelDims {
            obs: spec.obs_len(0),
            act_factors: spec.action_spaces[0].factors.clone(),
            modelled_obs: spec.modelled_obs_len(),
            modelled_factors: spec.modelled_action_factors(),
            hidden,
            vae_latent,
            pool_size,
        }
    }

    pub fn act_len(&self) -> usize {
        self.act_factors.iter().sum()
    }

    pub fn modelled_act_len(&self) -> usize {
        self.modelled_factors.iter().sum()
    }
}

/// Batched recurrent state; row `i` belongs to environment `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub h: Tensor,
    pub c: Tensor,
    /// Previous-step posterior (mean, log-variance) for the variational
    /// variant; a standard normal at episode start.
    pub prior: Option<(Tensor, Tensor)>,
    /// Steps taken since the last reset, per row.
    pub t: Vec<usize>,
}

impl EncoderState {
    pub fn zeros(rows: usize, hidden: usize, latent: Option<usize>) -> Self {
        EncoderState {
            h: Tensor::zeros(&[rows, hidden]),
            c: Tensor::zeros(&[rows, hidden]),
            prior: latent.map(|l| (Tensor::zeros(&[rows, l]), Tensor::zeros(&[rows, l]))),
            t: vec![0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.t.len()
    }

    pub fn reset_row(&mut self, row: usize) {
        zero_row(&mut self.h, row);
        zero_row(&mut self.c, row);
        if let Some((m, l)) = &mut self.prior {
            zero_row(m, row);
            zero_row(l, row);
        }
        self.t[row] = 0;
    }
}

fn zero_row(t: &mut Tensor, row: usize) {
    let cols = t.cols();
    t.data_mut()[row * cols..(row + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
}

#[derive(Clone, Debug)]
pub enum EncoderHead {
    /// `ReLU(W h + b)`.
    Embedding(Linear),
    /// Mean and log-variance, `latent` each.
    Gaussian { stats: Linear, latent: usize },
}

/// LSTM over `[obs, previous action]` followed by an output head.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub lstm: LstmCell,
    pub head: EncoderHead,
    pub obs_len: usize,
    pub act_len: usize,
    pub use_obs: bool,
    pub use_act: bool,
}

/// One encoder step on the tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderStep {
    /// The embedding (posterior mean for the Gaussian head).
    pub z: Var,
    pub h: Var,
    pub c: Var,
    /// Clamped posterior (mean, log-variance) for the Gaussian head.
    pub stats: Option<(Var, Var)>,
    pub clamped_logvars: usize,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        obs_len: usize,
        act_len: usize,
        use_obs: bool,
        use_act: bool,
        hidden: usize,
        gaussian_latent: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let in_dim = if use_obs { obs_len } else { 0 } + if use_act { act_len } else { 0 };
        let lstm = LstmCell::new(store, &format!("{name}.lstm"), in_dim, hidden, rng)?;
        let head = match gaussian_latent {
            None => EncoderHead::Embedding(Linear::new(store, &format!("{name}.head"), hidden, hidden, rng)?),
            Some(latent) => EncoderHead::Gaussian {
                stats: Linear::new(store, &format!("{name}.stats"), hidden, 2 * latent, rng)?,
                latent,
            },
        };
        Ok(Encoder { lstm, head, obs_len, act_len, use_obs, use_act })
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden
    }

    pub fn out_dim(&self) -> usize {
        match &self.head {
            EncoderHead::Embedding(l) => l.out_dim,
            EncoderHead::Gaussian { latent, .. } => *latent,
        }
    }

    pub fn latent(&self) -> Option<usize> {
        match &self.head {
            EncoderHead::Gaussian { latent, .. } => Some(*latent),
            EncoderHead::Embedding(_) => None,
        }
    }

    /// One step: `obs` is `n × obs_len`, `act` is `n × act_len`.
    pub fn step(&self, tape: &mut Tape, store: &ParameterStore, obs: Var, act: Var, h: Var, c: Var) -> Result<EncoderStep> {
        if tape.cols(obs) != self.obs_len || tape.cols(act) != self.act_len {
            return Err(Error::dim(
                "encode_step",
                format!(
                    "inputs of width {} and {}, encoder expects {} and {}",
                    tape.cols(obs),
                    tape.cols(act),
                    self.obs_len,
                    self.act_len
                ),
            ));
        }
        let x = match (self.use_obs, self.use_act) {
            (true, true) => tape.concat_cols(&[obs, act])?,
            (true, false) => obs,
            (false, true) => act,
            (false, false) => return Err(Error::config("model.encoder_obs", "the encoder needs at least one input")),
        };
        let (h, c) = self.lstm.step(tape, store, x, h, c)?;
        Ok(match &self.head {
            EncoderHead::Embedding(l) => {
                let z = l.forward(tape, store, h, Activation::Relu)?;
                EncoderStep { z, h, c, stats: None, clamped_logvars: 0 }
            }
            EncoderHead::Gaussian { stats, latent } => {
                let s = stats.forward(tape, store, h, Activation::None)?;
                let mu = tape.slice_cols(s, 0, *latent)?;
                let lv = tape.slice_cols(s, *latent, *latent)?;
                let (lv, n) = losses::clamp_logvar(tape, lv);
                EncoderStep { z: mu, h, c, stats: Some((mu, lv)), clamped_logvars: n }
            }
        })
    }

    /// Runs `len` steps from `init`, zeroing the state of row `i` after step
    /// `t` whenever `dones[t][i]`. Returns every step.
    pub fn unroll(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        init: &EncoderState,
        obs: &[Tensor],
        act: &[Tensor],
        dones: &[Vec<bool>],
    ) -> Result<Vec<EncoderStep>> {
        let mut h = tape.constant(init.h.clone());
        let mut c = tape.constant(init.c.clone());
        let mut out = Vec::with_capacity(obs.len());
        for t in 0..obs.len() {
            let o = tape.constant(obs[t].clone());
            let a = tape.constant(act[t].clone());
            let s = self.step(tape, store, o, a, h, c)?;
            h = s.h;
            c = s.c;
            if dones[t].iter().any(|d| *d) && t + 1 < obs.len() {
                let mask = row_mask(&dones[t], self.hidden());
                h = tape.mul_const(h, &mask)?;
                c = tape.mul_const(c, &mask)?;
            }
            out.push(s);
        }
        Ok(out)
    }

    /// Inference step without gradients. Returns the embedding and the
    /// advanced state.
    pub fn infer(&self, store: &ParameterStore, state: &EncoderState, obs: &Tensor, act: &Tensor) -> Result<(Tensor, EncoderState)> {
        let mut tape = Tape::new();
        let o = tape.constant(obs.clone());
        let a = tape.constant(act.clone());
        let h = tape.constant(state.h.clone());
        let c = tape.constant(state.c.clone());
        let s = self.step(&mut tape, store, o, a, h, c)?;
        let z = tape.value(s.z).clone();
        if !z.is_finite() {
            return Err(Error::Numeric("encoder produced a non-finite embedding".into()));
        }
        let next = EncoderState {
            h: tape.value(s.h).clone(),
            c: tape.value(s.c).clone(),
            prior: s.stats.map(|(m, l)| (tape.value(m).clone(), tape.value(l).clone())),
            t: state.t.iter().map(|t| t + 1).collect(),
        };
        Ok((z, next))
    }
}

/// `rows × width` tensor of ones with zero rows where `reset` is set.
pub(crate) fn row_mask(reset: &[bool], width: usize) -> Tensor {
    let data = reset.iter().flat_map(|&r| std::iter::repeat_n(if r { 0.0 } else { 1.0 }, width)).collect();
    Tensor::matrix(reset.len(), width, data).expect("mask shape")
}

/// Feed-forward decoder with an observation head and one categorical head
/// per action factor.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub net: Mlp,
    pub obs_len: usize,
    pub heads: Vec<usize>,
}

/// Plain decoder outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub obs: Tensor,
    /// Softmax of each head, concatenated; each head's slice sums to 1.
    pub action_probs: Tensor,
}

impl Decoder {
    pub fn new(store: &mut ParameterStore, name: &str, z: usize, hidden: usize, obs_len: usize, heads: Vec<usize>, rng: &mut impl Rng) -> Result<Self> {
        let out = obs_len + heads.iter().sum::<usize>();
        let net = Mlp::new(store, name, &[z, hidden, hidden, out], rng)?;
        Ok(Decoder { net, obs_len, heads })
    }

    /// `(obs prediction, action logits)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, z: Var) -> Result<(Var, Var)> {
        let y = self.net.forward(tape, store, z)?;
        let obs = tape.slice_cols(y, 0, self.obs_len)?;
        let logits = tape.slice_cols(y, self.obs_len, self.heads.iter().sum())?;
        Ok((obs, logits))
    }

    pub fn decode(&self, store: &ParameterStore, z: &Tensor) -> Result<DecoderOutput> {
        if !z.is_finite() {
            return Err(Error::Numeric("decode: non-finite embedding".into()));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let (obs, logits) = self.forward(&mut tape, store, zv)?;
        let probs = tape.softmax(logits, &self.heads)?;
        Ok(DecoderOutput { obs: tape.value(obs).clone(), action_probs: tape.value(probs).clone() })
    }
}

/// Time-major training data for one rollout segment of `E` rows.
///
/// Index `[t]` holds step `t` of every row. `prev_act` is the one-hot of the
/// previous action (zeros at episode start); `dones[t][i]` marks that row
/// `i`'s episode ended with step `t`.
#[derive(Clone, Debug)]
pub struct SequenceBatch {
    pub obs: Vec<Tensor>,
    pub prev_act: Vec<Tensor>,
    pub act: Vec<Vec<Vec<usize>>>,
    pub next_obs: Vec<Tensor>,
    pub modelled_obs: Vec<Tensor>,
    pub modelled_prev_act: Vec<Tensor>,
    pub modelled_act: Vec<Vec<Vec<usize>>>,
    pub policy_ids: Vec<Vec<usize>>,
    pub dones: Vec<Vec<bool>>,
    /// Encoder state at the start of the segment.
    pub init: EncoderState,
    /// Modelled-side encoder state (contrastive variant only).
    pub partner_init: Option<EncoderState>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.init.rows()
    }
}

fn stack_rows(ts: &[Tensor]) -> Result<Tensor> {
    let cols = ts.first().map_or(0, Tensor::cols);
    let mut data = Vec::new();
    let mut rows = 0;
    for t in ts {
        if t.cols() != cols {
            return Err(Error::dim("stack_rows", format!("{} vs {} columns", t.cols(), cols)));
        }
        rows += t.rows();
        data.extend_from_slice(t.data());
    }
    Tensor::matrix(rows, cols, data)
}

/// Encoder plus whatever heads its training objective needs.
#[derive(Clone, Debug)]
pub struct AgentModel {
    pub cfg: ModelVariantConfig,
    pub dims: ModelDims,
    pub encoder: Encoder,
    pub decoder: Option<Decoder>,
    pub classifier: Option<Linear>,
    pub partner: Option<Encoder>,
    pub temperature: f64,
}

impl AgentModel {
    /// Registers parameters in `store`, which is the encoder-decoder store
    /// for every variant except `nam`, whose encoder belongs to the policy.
    pub fn new(cfg: ModelVariantConfig, dims: ModelDims, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let h = dims.hidden;
        let (obs_in, act_in) = match cfg.variant {
            Variant::Fiam => (dims.modelled_obs, dims.modelled_act_len()),
            _ => (dims.obs, dims.act_len()),
        };
        let gaussian = (cfg.variant == Variant::LiamVae).then_some(dims.vae_latent);
        let encoder = Encoder::new(store, "encoder", obs_in, act_in, cfg.encoder_obs, cfg.encoder_act, h, gaussian, rng)?;
        let z = encoder.out_dim();
        let decoder = match cfg.variant {
            Variant::Liam | Variant::Fiam | Variant::LiamVae => {
                Some(Decoder::new(store, "decoder", z, h, dims.modelled_obs, dims.modelled_factors.clone(), rng)?)
            }
            Variant::LiamLocal => Some(Decoder::new(store, "decoder", z, h, dims.obs, dims.act_factors.clone(), rng)?),
            _ => None,
        };
        let classifier = match cfg.variant {
            Variant::Cbam => Some(Linear::new(store, "classifier", z, dims.pool_size.max(1), rng)?),
            _ => None,
        };
        let partner = match cfg.variant {
            Variant::Carl => Some(Encoder::new(
                store,
                "partner",
                dims.modelled_obs,
                dims.modelled_act_len(),
                true,
                true,
                h,
                None,
                rng,
            )?),
            _ => None,
        };
        Ok(AgentModel { cfg, dims, encoder, decoder, classifier, partner, temperature: 0.1 })
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    /// Width of the embedding handed to the policy.
    pub fn embedding_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn initial_state(&self, rows: usize) -> EncoderState {
        EncoderState::zeros(rows, self.encoder.hidden(), self.encoder.latent())
    }

    pub fn initial_partner_state(&self, rows: usize) -> Option<EncoderState> {
        self.partner.as_ref().map(|p| EncoderState::zeros(rows, p.hidden(), None))
    }

    /// Picks the encoder inputs for this variant: the controlled agent's
    /// observation and previous action, or the modelled agents' for `fiam`.
    pub fn select_inputs<'a>(&self, obs: &'a Tensor, prev_act: &'a Tensor, modelled_obs: &'a Tensor, modelled_prev_act: &'a Tensor) -> (&'a Tensor, &'a Tensor) {
        if self.cfg.variant == Variant::Fiam {
            (modelled_obs, modelled_prev_act)
        } else {
            (obs, prev_act)
        }
    }

    /// One inference step of the execution-time encoder.
    pub fn encode_step(&self, store: &ParameterStore, state: &EncoderState, obs: &Tensor, prev_act: &Tensor) -> Result<(Tensor, EncoderState)> {
        self.encoder.infer(store, state, obs, prev_act)
    }

    pub fn decode(&self, store: &ParameterStore, z: &Tensor) -> Result<DecoderOutput> {
        match &self.decoder {
            Some(d) => d.decode(store, z),
            None => Err(Error::Usage(format!("variant {} has no decoder", self.cfg.variant))),
        }
    }

    /// Embeddings of a whole segment on the tape (with gradients).
    pub fn embed_sequence(&self, tape: &mut Tape, store: &ParameterStore, batch: &SequenceBatch) -> Result<Vec<EncoderStep>> {
        let (obs, act) = if self.cfg.variant == Variant::Fiam {
            (&batch.modelled_obs, &batch.modelled_prev_act)
        } else {
            (&batch.obs, &batch.prev_act)
        };
        self.encoder.unroll(tape, store, &batch.init, obs, act, &batch.dones)
    }

    /// The variant's auxiliary objective on one segment.
    pub fn ed_loss(&self, tape: &mut Tape, store: &ParameterStore, batch: &SequenceBatch, rng: &mut impl Rng) -> Result<LossOut> {
        if batch.is_empty() {
            return Err(Error::Usage("empty training segment".into()));
        }
        let steps = self.embed_sequence(tape, store, batch)?;
        let clamped_lv: usize = steps.iter().map(|s| s.clamped_logvars).sum();
        match self.cfg.variant {
            Variant::Nam => Err(Error::Usage("nam has no encoder-decoder objective".into())),
            Variant::Liam | Variant::Fiam => {
                let zs: Vec<Var> = steps.iter().map(|s| s.z).collect();
                let z = tape.concat_rows(&zs)?;
                self.recon_modelled(tape, store, z, batch)
            }
            Variant::LiamLocal => {
                let zs: Vec<Var> = steps.iter().map(|s| s.z).collect();
                let z = tape.concat_rows(&zs)?;
                let dec = self.decoder.as_ref().expect("local variant has a decoder");
                let (obs, logits) = dec.forward(tape, store, z)?;
                let target = stack_rows(&batch.next_obs)?;
                let actions: Vec<Vec<usize>> = batch.act.iter().flatten().cloned().collect();
                let t = ReconTargets { obs: &target, actions: &actions, heads: &dec.heads };
                losses::recon_loss(tape, obs, logits, t, self.cfg.mask())
            }
            Variant::LiamVae => {
                let rows = batch.rows();
                let (mut prior_mu, mut prior_lv) = match &batch.init.prior {
                    Some((m, l)) => (tape.constant(m.clone()), tape.constant(l.clone())),
                    None => return Err(Error::Usage("variational batch without prior state".into())),
                };
                let mut samples = Vec::with_capacity(steps.len());
                let mut kls = Vec::with_capacity(steps.len());
                for (t, s) in steps.iter().enumerate() {
                    let (mu, lv) = s.stats.expect("gaussian head");
                    kls.push(gaussian_kl(tape, mu, lv, prior_mu, prior_lv)?);
                    let latent = tape.cols(mu);
                    let eps: Vec<f64> = (0..rows * latent).map(|_| rng.sample(StandardNormal)).collect();
                    let eps = tape.constant(Tensor::matrix(rows, latent, eps)?);
                    let half = tape.scale(lv, 0.5);
                    let sigma = tape.exp(half);
                    let noise = tape.mul(sigma, eps)?;
                    samples.push(tape.add(mu, noise)?);
                    if batch.dones[t].iter().any(|d| *d) {
                        let mask = row_mask(&batch.dones[t], latent);
                        prior_mu = tape.mul_const(mu, &mask)?;
                        prior_lv = tape.mul_const(lv, &mask)?;
                    } else {
                        prior_mu = mu;
                        prior_lv = lv;
                    }
                }
                let z = tape.concat_rows(&samples)?;
                let recon = self.recon_modelled(tape, store, z, batch)?;
                let mut out = vae_elbo_loss(tape, recon, &kls)?;
                out.clamped_logvars = clamped_lv;
                Ok(out)
            }
            Variant::Cbam => {
                let zs: Vec<Var> = steps.iter().map(|s| s.z).collect();
                let z = tape.concat_rows(&zs)?;
                let cls = self.classifier.as_ref().expect("cbam has a classifier");
                let logits = cls.forward(tape, store, z, Activation::None)?;
                let ids: Vec<usize> = batch.policy_ids.iter().flatten().copied().collect();
                cbam_loss(tape, logits, &ids)
            }
            Variant::Carl => {
                let partner = self.partner.as_ref().expect("carl has a partner encoder");
                let init = batch
                    .partner_init
                    .as_ref()
                    .ok_or_else(|| Error::Usage("contrastive batch without partner state".into()))?;
                let other = partner.unroll(tape, store, init, &batch.modelled_obs, &batch.modelled_prev_act, &batch.dones)?;
                let z1: Vec<Var> = steps.iter().map(|s| s.z).collect();
                let z2: Vec<Var> = other.iter().map(|s| s.z).collect();
                // A ReLU embedding can be exactly zero; nudge so cosine similarity is defined.
                let z1 = z1.into_iter().map(|z| tape.add_scalar(z, 1e-6)).collect::<Vec<_>>();
                let z2 = z2.into_iter().map(|z| tape.add_scalar(z, 1e-6)).collect::<Vec<_>>();
                carl_infonce_loss(tape, &z1, &z2, self.temperature)
            }
        }
    }

    fn recon_modelled(&self, tape: &mut Tape, store: &ParameterStore, z: Var, batch: &SequenceBatch) -> Result<LossOut> {
        let dec = self.decoder.as_ref().expect("reconstruction variant has a decoder");
        let (obs, logits) = dec.forward(tape, store, z)?;
        let target = stack_rows(&batch.modelled_obs)?;
        let actions: Vec<Vec<usize>> = batch.modelled_act.iter().flatten().cloned().collect();
        let t = ReconTargets { obs: &target, actions: &actions, heads: &dec.heads };
        liam_loss(tape, obs, logits, t, self.cfg.mask())
    }
}
