//! Training objectives of the agent models, recorded on a [`Tape`].

use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor, Var};

/// Lower bound applied to log-probabilities before they enter a loss.
pub const LOG_FLOOR: f64 = -30.0;

/// Bounds applied to posterior log-variances.
pub const LOGVAR_RANGE: (f64, f64) = (-10.0, 10.0);

/// Which reconstruction terms contribute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReconMask {
    pub obs: bool,
    pub act: bool,
}

impl ReconMask {
    pub const BOTH: ReconMask = ReconMask { obs: true, act: true };
}

/// A scalar loss plus counters for values that had to be clamped.
#[derive(Clone, Copy, Debug)]
pub struct LossOut {
    pub loss: Var,
    pub clamped_logs: usize,
    pub clamped_logvars: usize,
}

/// Reconstruction targets for one batch of `n` rows.
#[derive(Clone, Copy, Debug)]
pub struct ReconTargets<'a> {
    pub obs: &'a Tensor,
    /// One index per categorical head, per row.
    pub actions: &'a [Vec<usize>],
    /// Widths of the categorical heads.
    pub heads: &'a [usize],
}

/// Mean over rows of `sum_d (pred - target)^2 - sum_heads log p(true action)`.
///
/// `obs_pred` is `n × D`, `logits` is `n × sum(heads)`. Log-probabilities are
/// floored at [`LOG_FLOOR`]; the number of floored entries is reported.
pub fn recon_loss(tape: &mut Tape, obs_pred: Var, logits: Var, targets: ReconTargets<'_>, mask: ReconMask) -> Result<LossOut> {
    let n = tape.rows(obs_pred);
    if n == 0 {
        return Err(Error::Usage("reconstruction loss over an empty batch".into()));
    }
    if tape.rows(logits) != n || targets.obs.rows() != n || targets.actions.len() != n {
        return Err(Error::dim("recon_loss", "prediction and target row counts differ"));
    }
    let mut terms = Vec::new();
    let mut clamped = 0;
    if mask.obs {
        let target = tape.constant(targets.obs.clone());
        let diff = tape.sub(obs_pred, target)?;
        let sq = tape.square(diff);
        terms.push(tape.sum(sq));
    }
    if mask.act {
        let logp = tape.log_softmax(logits, targets.heads)?;
        let mut cols = Vec::with_capacity(n);
        for a in targets.actions {
            if a.len() != targets.heads.len() || a.iter().zip(targets.heads).any(|(x, h)| x >= h) {
                return Err(Error::dim("recon_loss", format!("action {a:?} for heads {:?}", targets.heads)));
            }
            let mut off = 0;
            cols.push(
                a.iter()
                    .zip(targets.heads)
                    .map(|(x, h)| {
                        let c = off + x;
                        off += h;
                        c
                    })
                    .collect(),
            );
        }
        let picked = tape.gather_cols(logp, &cols)?;
        clamped = tape.value(picked).data().iter().filter(|v| **v < LOG_FLOOR).count();
        let floored = tape.clamp(picked, LOG_FLOOR, f64::INFINITY);
        let s = tape.sum(floored);
        terms.push(tape.scale(s, -1.0));
    }
    let total = match terms.as_slice() {
        [] => tape.constant(Tensor::scalar(0.0)),
        [a] => *a,
        [a, b] => tape.add(*a, *b)?,
        _ => unreachable!(),
    };
    Ok(LossOut { loss: tape.scale(total, 1.0 / n as f64), clamped_logs: clamped, clamped_logvars: 0 })
}

/// Encoder-decoder objective: reconstruct the modelled agents' observation
/// and actions from the embedding.
pub fn liam_loss(tape: &mut Tape, obs_pred: Var, logits: Var, targets: ReconTargets<'_>, mask: ReconMask) -> Result<LossOut> {
    recon_loss(tape, obs_pred, logits, targets, mask)
}

/// Local variant: the targets are the controlled agent's own next
/// observation and current action.
pub fn local_recon_loss(tape: &mut Tape, obs_pred: Var, logits: Var, targets: ReconTargets<'_>) -> Result<LossOut> {
    recon_loss(tape, obs_pred, logits, targets, ReconMask::BOTH)
}

/// Mean cross-entropy of the true policy id under `logits` (`n × K`).
pub fn cbam_loss(tape: &mut Tape, logits: Var, ids: &[usize]) -> Result<LossOut> {
    let k = tape.cols(logits);
    if let Some(bad) = ids.iter().find(|&&i| i >= k) {
        return Err(Error::Usage(format!("policy id {bad} outside a classifier of width {k}")));
    }
    if ids.len() != tape.rows(logits) {
        return Err(Error::dim("cbam_loss", format!("{} ids for {} rows", ids.len(), tape.rows(logits))));
    }
    let logp = tape.log_softmax(logits, &[k])?;
    let cols: Vec<Vec<usize>> = ids.iter().map(|&i| vec![i]).collect();
    let picked = tape.gather_cols(logp, &cols)?;
    let clamped = tape.value(picked).data().iter().filter(|v| **v < LOG_FLOOR).count();
    let floored = tape.clamp(picked, LOG_FLOOR, f64::INFINITY);
    let m = tape.mean(floored);
    Ok(LossOut { loss: tape.scale(m, -1.0), clamped_logs: clamped, clamped_logvars: 0 })
}

/// InfoNCE between controlled-side and modelled-side embeddings.
///
/// `z1[t]` and `z2[t]` are `M × Z` (row m = episode m at step t). At every
/// step each controlled embedding must pick out its own episode among the M
/// modelled embeddings, scored by cosine similarity over `temperature`. The
/// cross-entropies are summed over steps and averaged over episodes.
pub fn carl_infonce_loss(tape: &mut Tape, z1: &[Var], z2: &[Var], temperature: f64) -> Result<LossOut> {
    if z1.is_empty() || z1.len() != z2.len() {
        return Err(Error::dim("carl_infonce_loss", format!("{} vs {} steps", z1.len(), z2.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::Usage("InfoNCE temperature must be positive".into()));
    }
    let m = tape.rows(z1[0]);
    let diag: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
    let mut per_step = Vec::with_capacity(z1.len());
    let mut clamped = 0;
    for (&a, &b) in z1.iter().zip(z2) {
        if tape.rows(a) != m || tape.rows(b) != m {
            return Err(Error::dim("carl_infonce_loss", "episode counts differ between steps"));
        }
        let an = tape.row_normalize(a)?;
        let bn = tape.row_normalize(b)?;
        let sim = tape.matmul_t(an, bn)?;
        let logits = tape.scale(sim, 1.0 / temperature);
        let logp = tape.log_softmax(logits, &[m])?;
        let picked = tape.gather_cols(logp, &diag)?;
        clamped += tape.value(picked).data().iter().filter(|v| **v < LOG_FLOOR).count();
        let floored = tape.clamp(picked, LOG_FLOOR, f64::INFINITY);
        per_step.push(tape.sum(floored));
    }
    let all = tape.concat_rows(&per_step)?;
    let total = tape.sum(all);
    Ok(LossOut { loss: tape.scale(total, -1.0 / m as f64), clamped_logs: clamped, clamped_logvars: 0 })
}

/// KL(N(mu_q, exp(lv_q)) || N(mu_p, exp(lv_p))) for diagonal Gaussians,
/// summed over dimensions: an `n × 1` column.
pub fn gaussian_kl(tape: &mut Tape, mu_q: Var, lv_q: Var, mu_p: Var, lv_p: Var) -> Result<Var> {
    // 0.5 * (lv_p - lv_q + (exp(lv_q) + (mu_q - mu_p)^2) * exp(-lv_p) - 1)
    let dlv = tape.sub(lv_p, lv_q)?;
    let var_q = tape.exp(lv_q);
    let dmu = tape.sub(mu_q, mu_p)?;
    let dmu2 = tape.square(dmu);
    let num = tape.add(var_q, dmu2)?;
    let neg_lv_p = tape.scale(lv_p, -1.0);
    let inv_var_p = tape.exp(neg_lv_p);
    let ratio = tape.mul(num, inv_var_p)?;
    let s = tape.add(dlv, ratio)?;
    let s = tape.add_scalar(s, -1.0);
    let per_dim = tape.scale(s, 0.5);
    Ok(tape.sum_cols(per_dim))
}

/// Closed-form KL between two diagonal Gaussians given as plain slices.
pub fn gaussian_kl_value(mu_q: &[f64], lv_q: &[f64], mu_p: &[f64], lv_p: &[f64]) -> f64 {
    mu_q.iter()
        .zip(lv_q)
        .zip(mu_p.iter().zip(lv_p))
        .map(|((mq, lq), (mp, lp))| 0.5 * (lp - lq + (lq.exp() + (mq - mp).powi(2)) / lp.exp() - 1.0))
        .sum()
}

/// Clamps posterior log-variances to [`LOGVAR_RANGE`], reporting how many
/// entries were out of range.
pub fn clamp_logvar(tape: &mut Tape, lv: Var) -> (Var, usize) {
    let (lo, hi) = LOGVAR_RANGE;
    let n = tape.value(lv).data().iter().filter(|v| **v < lo || **v > hi).count();
    (tape.clamp(lv, lo, hi), n)
}

/// Negative evidence lower bound: the reconstruction loss on sampled
/// embeddings plus the per-step KL terms, both averaged over rows.
pub fn vae_elbo_loss(tape: &mut Tape, recon: LossOut, kls: &[Var]) -> Result<LossOut> {
    if kls.is_empty() {
        return Ok(recon);
    }
    let all = tape.concat_rows(kls)?;
    let kl = tape.mean(all);
    let loss = tape.add(recon.loss, kl)?;
    Ok(LossOut { loss, ..recon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn perfect_predictions_give_zero() {
        let mut tape = Tape::new();
        let obs = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.0, 2.0]).unwrap();
        let pred = tape.constant(obs.clone());
        // Huge margin: log p(true) rounds to 0.
        let logits = tape.constant(Tensor::matrix(2, 5, vec![
            800.0, 0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 800.0, 0.0,
        ]).unwrap());
        let acts = vec![vec![0], vec![3]];
        let out = liam_loss(&mut tape, pred, logits, ReconTargets { obs: &obs, actions: &acts, heads: &[5] }, ReconMask::BOTH).unwrap();
        assert_eq!(tape.value(out.loss).item(), 0.0);
    }

    #[test]
    fn uniform_action_head_gives_ln5() {
        let mut tape = Tape::new();
        let obs = Tensor::zeros(&[4, 2]);
        let pred = tape.constant(obs.clone());
        let logits = tape.constant(Tensor::zeros(&[4, 5]));
        let acts = vec![vec![0], vec![1], vec![2], vec![4]];
        let out = liam_loss(&mut tape, pred, logits, ReconTargets { obs: &obs, actions: &acts, heads: &[5] }, ReconMask::BOTH).unwrap();
        assert!((tape.value(out.loss).item() - 5f64.ln()).abs() < 1e-12);
        let out = local_recon_loss(&mut tape, pred, logits, ReconTargets { obs: &obs, actions: &acts, heads: &[5] }).unwrap();
        assert!((tape.value(out.loss).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_formula_and_masks_add_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let heads = [5, 5, 3];
        let n = 7;
        let pred_t = rand_tensor(&mut rng, n, 4);
        let target = rand_tensor(&mut rng, n, 4);
        let logit_t = rand_tensor(&mut rng, n, 13);
        let acts: Vec<Vec<usize>> = (0..n).map(|_| heads.iter().map(|h| rng.random_range(0..*h)).collect()).collect();

        // Oracle: per-row sums, then mean.
        let mut expect = 0.0;
        for r in 0..n {
            for d in 0..4 {
                expect += (pred_t.at(r, d) - target.at(r, d)).powi(2);
            }
            let mut off = 0;
            for (h, a) in heads.iter().zip(&acts[r]) {
                let row = &logit_t.row(r)[off..off + h];
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                expect -= row[*a] - lse;
                off += h;
            }
        }
        expect /= n as f64;

        let mut tape = Tape::new();
        let pred = tape.constant(pred_t);
        let logits = tape.constant(logit_t);
        let t = ReconTargets { obs: &target, actions: &acts, heads: &heads };
        let full = liam_loss(&mut tape, pred, logits, t, ReconMask::BOTH).unwrap();
        let obs_only = liam_loss(&mut tape, pred, logits, t, ReconMask { obs: true, act: false }).unwrap();
        let act_only = liam_loss(&mut tape, pred, logits, t, ReconMask { obs: false, act: true }).unwrap();
        let full = tape.value(full.loss).item();
        assert!((full - expect).abs() < 1e-10);
        let sum = tape.value(obs_only.loss).item() + tape.value(act_only.loss).item();
        assert!((sum - full).abs() < 1e-12);
        assert!(full >= 0.0);
    }

    #[test]
    fn log_floor_is_applied_and_counted() {
        let mut tape = Tape::new();
        let obs = Tensor::zeros(&[1, 1]);
        let pred = tape.constant(obs.clone());
        let logits = tape.constant(Tensor::matrix(1, 2, vec![0.0, 100.0]).unwrap());
        let out = liam_loss(&mut tape, pred, logits, ReconTargets { obs: &obs, actions: &[vec![0]], heads: &[2] }, ReconMask::BOTH).unwrap();
        assert_eq!(out.clamped_logs, 1);
        assert_eq!(tape.value(out.loss).item(), 30.0);
    }

    #[test]
    fn cbam_cases() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[3, 10]));
        let out = cbam_loss(&mut tape, uniform, &[0, 4, 9]).unwrap();
        assert!((tape.value(out.loss).item() - 10f64.ln()).abs() < 1e-9);
        let err = cbam_loss(&mut tape, uniform, &[0, 10, 1]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = rand_tensor(&mut rng, 4, 6);
        let ids = [5, 0, 2, 2];
        let expect = ids
            .iter()
            .enumerate()
            .map(|(r, &k)| l.row(r).iter().map(|v| v.exp()).sum::<f64>().ln() - l.at(r, k))
            .sum::<f64>()
            / 4.0;
        let lv = tape.constant(l);
        let out = cbam_loss(&mut tape, lv, &ids).unwrap();
        assert!((tape.value(out.loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn infonce_identities() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // One episode: the only candidate is the positive.
        let z1: Vec<Var> = (0..4).map(|_| tape.constant(rand_tensor(&mut rng, 1, 8))).collect();
        let z2: Vec<Var> = (0..4).map(|_| tape.constant(rand_tensor(&mut rng, 1, 8))).collect();
        let out = carl_infonce_loss(&mut tape, &z1, &z2, 0.1).unwrap();
        assert_eq!(tape.value(out.loss).item(), 0.0);
        // Identical embeddings everywhere: H ln M.
        let same = Tensor::full(&[3, 8], 0.7);
        let z: Vec<Var> = (0..5).map(|_| tape.constant(same.clone())).collect();
        let out = carl_infonce_loss(&mut tape, &z, &z, 0.1).unwrap();
        assert!((tape.value(out.loss).item() - 5.0 * 3f64.ln()).abs() < 1e-9);
        // Zero-norm row.
        let zero = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(carl_infonce_loss(&mut tape, &[zero], &[zero], 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn infonce_matches_direct_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, h, z, tau) = (3, 4, 5, 0.1);
        let a: Vec<Tensor> = (0..h).map(|_| rand_tensor(&mut rng, m, z)).collect();
        let b: Vec<Tensor> = (0..h).map(|_| rand_tensor(&mut rng, m, z)).collect();
        let cos = |x: &[f64], y: &[f64]| {
            let d: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            d / (x.iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt())
        };
        let mut expect = 0.0;
        for t in 0..h {
            for i in 0..m {
                let s: Vec<f64> = (0..m).map(|j| cos(a[t].row(i), b[t].row(j)) / tau).collect();
                let lse = s.iter().map(|v| v.exp()).sum::<f64>().ln();
                expect += lse - s[i];
            }
        }
        expect /= m as f64;
        let mut tape = Tape::new();
        let z1: Vec<Var> = a.into_iter().map(|t| tape.constant(t)).collect();
        let z2: Vec<Var> = b.into_iter().map(|t| tape.constant(t)).collect();
        let out = carl_infonce_loss(&mut tape, &z1, &z2, tau).unwrap();
        assert!((tape.value(out.loss).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(gaussian_kl_value(&[0.3, -1.0], &[0.2, 1.0], &[0.3, -1.0], &[0.2, 1.0]), 0.0);
        assert!((gaussian_kl_value(&[1.0], &[0.0], &[0.0], &[0.0]) - 0.5).abs() < 1e-15);
        let mut tape = Tape::new();
        let mu_q = tape.constant(Tensor::matrix(2, 2, vec![1.0, 1.0, 0.5, -0.5]).unwrap());
        let lv_q = tape.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 0.3, -0.2]).unwrap());
        let mu_p = tape.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, -0.1, 0.4]).unwrap());
        let lv_p = tape.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 0.1, 0.7]).unwrap());
        let kl = gaussian_kl(&mut tape, mu_q, lv_q, mu_p, lv_p).unwrap();
        let v = tape.value(kl);
        assert!((v.at(0, 0) - 1.0).abs() < 1e-12);
        let expect = gaussian_kl_value(&[0.5, -0.5], &[0.3, -0.2], &[-0.1, 0.4], &[0.1, 0.7]);
        assert!((v.at(1, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn logvar_clamp_counts() {
        let mut tape = Tape::new();
        let lv = tape.constant(Tensor::matrix(1, 4, vec![-12.0, 0.0, 3.0, 11.0]).unwrap());
        let (c, n) = clamp_logvar(&mut tape, lv);
        assert_eq!(n, 2);
        assert_eq!(tape.value(c).data(), &[-10.0, 0.0, 3.0, 10.0]);
    }
}
