use liam_core::envs::{dsl, EnvConfig, EnvKind, Environment, JointAction};
use liam_core::models::{liam_loss, ReconMask, ReconTargets};
use liam_core::nn::{adam_update, clip_global_norm, softmax_row, AdamConfig, ParameterStore, Tape, Tensor};
use liam_core::probe::{pca_2d, AccuracyCurve};
use liam_core::rl::gae_advantages;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn store_with(values: &[f64], grads: &[f64]) -> ParameterStore {
    let mut s = ParameterStore::new();
    let id = s.add("p", Tensor::matrix(1, values.len(), values.to_vec()).unwrap()).unwrap();
    s.entry_mut(id).grad.data_mut().copy_from_slice(grads);
    s
}

fn random_actions(env: &dyn Environment, rng: &mut ChaCha8Rng) -> JointAction {
    env.spec().action_spaces.iter().map(|s| s.factors.iter().map(|&n| rng.random_range(0..n)).collect()).collect()
}

fn kind_strategy() -> impl Strategy<Value = EnvKind> {
    prop_oneof![Just(EnvKind::Dsl), Just(EnvKind::Lbf), Just(EnvKind::Pp)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-700.0..700.0f64, 1..20)) {
        let p = softmax_row(&logits).unwrap();
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn segmented_softmax_rows_sum_to_one(data in prop::collection::vec(-50.0..50.0f64, 14)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 7, data).unwrap());
        let p = tape.softmax(x, &[5, 2]).unwrap();
        for r in 0..2 {
            let row = tape.value(p).row(r).to_vec();
            prop_assert!((row[..5].iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!((row[5..].iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn gradients_accumulate(w in prop::collection::vec(-2.0..2.0f64, 6), x in prop::collection::vec(-2.0..2.0f64, 6)) {
        let mut store = ParameterStore::new();
        let id = store.add("w", Tensor::matrix(3, 2, w).unwrap()).unwrap();
        let input = Tensor::matrix(2, 3, x).unwrap();
        let sweep = |store: &mut ParameterStore| {
            let mut tape = Tape::new();
            let xi = tape.constant(input.clone());
            let wv = tape.param(store, id);
            let y = tape.matmul(xi, wv).unwrap();
            let t = tape.tanh(y);
            let l = tape.sum(t);
            tape.backward(l, &mut [store]).unwrap();
        };
        sweep(&mut store);
        let once = store.grad(id).clone();
        sweep(&mut store);
        for (a, b) in store.grad(id).data().iter().zip(once.data()) {
            prop_assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn adam_with_zero_lr_is_a_no_op(values in prop::collection::vec(-5.0..5.0f64, 1..10), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grads: Vec<f64> = values.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut s = store_with(&values, &grads);
        let before = s.value_bytes();
        adam_update(&mut s, &AdamConfig::with_lr(0.0)).unwrap();
        prop_assert_eq!(s.value_bytes(), before);
    }

    #[test]
    fn clipping_is_idempotent(grads in prop::collection::vec(-100.0..100.0f64, 1..12), max in 0.01..10.0f64) {
        let mut s = store_with(&vec![0.0; grads.len()], &grads);
        clip_global_norm(&mut s, max);
        let once: Vec<f64> = s.entries().flat_map(|e| e.grad.data().to_vec()).collect();
        clip_global_norm(&mut s, max);
        let twice: Vec<f64> = s.entries().flat_map(|e| e.grad.data().to_vec()).collect();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn gae_lambda_one_is_monte_carlo(rewards in prop::collection::vec(-1.0..1.0f64, 1..40), seed in any::<u64>(), gamma in 0.5..1.0f64) {
        let n = rewards.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..=n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut dones = vec![false; n];
        dones[n - 1] = true;
        let (adv, _) = gae_advantages(&rewards, &values, &dones, gamma, 1.0).unwrap();
        let mut g = 0.0;
        for t in (0..n).rev() {
            g = rewards[t] + gamma * g;
            prop_assert!((adv[t] - (g - values[t])).abs() <= 1e-10);
        }
    }

    #[test]
    fn recon_loss_is_nonnegative_and_masks_add_up(
        pred in prop::collection::vec(-3.0..3.0f64, 12),
        target in prop::collection::vec(-3.0..3.0f64, 12),
        logits in prop::collection::vec(-5.0..5.0f64, 24),
        acts in prop::collection::vec((0usize..5, 0usize..3), 3),
    ) {
        let obs = Tensor::matrix(3, 4, target).unwrap();
        let actions: Vec<Vec<usize>> = acts.iter().map(|&(a, b)| vec![a, b]).collect();
        let heads = [5, 3];
        let targets = ReconTargets { obs: &obs, actions: &actions, heads: &heads };
        let logits = Tensor::matrix(3, 8, logits).unwrap();
        let eval = |mask: ReconMask| {
            let mut tape = Tape::new();
            let p = tape.constant(Tensor::matrix(3, 4, pred.clone()).unwrap());
            let l = tape.constant(logits.clone());
            let out = liam_loss(&mut tape, p, l, targets, mask).unwrap();
            tape.value(out.loss).item()
        };
        let both = eval(ReconMask::BOTH);
        let obs_only = eval(ReconMask { obs: true, act: false });
        let act_only = eval(ReconMask { obs: false, act: true });
        prop_assert!(both >= 0.0 && obs_only >= 0.0 && act_only >= 0.0);
        prop_assert!((obs_only + act_only - both).abs() <= 1e-10 * both.max(1.0));
    }

    #[test]
    fn environments_are_reproducible_and_bounded(kind in kind_strategy(), seed in any::<u64>()) {
        let cfg = EnvConfig::default_for(kind);
        let run = || {
            let mut env = cfg.build().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let first = env.reset(seed).unwrap();
            let lens: Vec<usize> = first.iter().map(Vec::len).collect();
            let mut log = vec![first];
            let mut totals = vec![0.0; env.spec().n_agents];
            loop {
                let a = random_actions(env.as_ref(), &mut rng);
                let r = env.step(&a).unwrap();
                for (t, x) in totals.iter_mut().zip(&r.rewards) {
                    *t += x;
                }
                assert_eq!(r.observations.iter().map(Vec::len).collect::<Vec<_>>(), lens);
                match kind {
                    EnvKind::Dsl => {
                        assert!(r.rewards[0] <= 0.0);
                        assert_eq!(r.rewards[0], r.rewards[1]);
                    }
                    EnvKind::Pp => {
                        // Agent 0 is the prey.
                        for pred in &r.rewards[1..] {
                            assert_eq!(r.rewards[0], -pred);
                        }
                    }
                    EnvKind::Lbf => {}
                }
                log.push(r.observations);
                if r.done {
                    break;
                }
            }
            (log, totals, env.t())
        };
        let (a, totals, len) = run();
        let (b, _, _) = run();
        prop_assert_eq!(a, b);
        prop_assert!(len <= cfg.horizon());
        if kind == EnvKind::Lbf {
            prop_assert!(totals.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn dsl_reward_is_never_positive(
        coords in prop::collection::vec(-2.0..2.0f64, 10),
        c0 in 0usize..3,
        c1 in 0usize..3,
    ) {
        let pos = [[coords[0], coords[1]], [coords[2], coords[3]]];
        let lm = [[coords[4], coords[5]], [coords[6], coords[7]], [coords[8], coords[9]]];
        prop_assert!(dsl::dsl_reward(&pos, &lm, [c0, c1]) <= 0.0);
    }

    #[test]
    fn accuracy_curve_stays_in_unit_interval(hits in prop::collection::vec((0usize..25, any::<bool>()), 1..200)) {
        let mut c = AccuracyCurve::default();
        for (t, h) in hits {
            c.record(t, h);
        }
        for p in c.points() {
            prop_assert!((0.0..=1.0).contains(&p.accuracy));
        }
    }

    #[test]
    fn pca_orders_variances(data in prop::collection::vec(-10.0..10.0f64, 40)) {
        let points: Vec<Vec<f64>> = data.chunks(4).map(|c| c.to_vec()).collect();
        let p = pca_2d(&points).unwrap();
        prop_assert!(p.variances[0] + 1e-12 >= p.variances[1]);
        prop_assert!(p.variances[1] >= -1e-12);
    }
}
