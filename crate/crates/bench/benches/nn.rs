use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use liam_core::envs::{EnvConfig, EnvKind};
use liam_core::nn::{LstmCell, ParameterStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random(&mut rng, 250, 256);
    let b = random(&mut rng, 256, 512);
    c.bench_function("matmul 250x256x512 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut store = ParameterStore::new();
            let w = store.add("w", b.clone()).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(a.clone());
            let wv = tape.param(&store, w);
            let y = tape.matmul(x, wv).unwrap();
            let loss = tape.mean(y);
            tape.backward(loss, &mut [&mut store]).unwrap();
        })
    });
}

fn lstm_unroll(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParameterStore::new();
    let cell = LstmCell::new(&mut store, "lstm", 23, 128, &mut rng).unwrap();
    let xs: Vec<Tensor> = (0..10).map(|_| random(&mut rng, 10, 23)).collect();
    c.bench_function("lstm 10 steps batch 10 hidden 128 fwd+bwd", |bench| {
        bench.iter_batched(
            || store.clone(),
            |mut store| {
                let mut tape = Tape::new();
                let mut h = tape.constant(Tensor::zeros(&[10, 128]));
                let mut cs = tape.constant(Tensor::zeros(&[10, 128]));
                for x in &xs {
                    let x = tape.constant(x.clone());
                    (h, cs) = cell.step(&mut tape, &store, x, h, cs).unwrap();
                }
                let loss = tape.mean(h);
                tape.backward(loss, &mut [&mut store]).unwrap();
            },
            BatchSize::SmallInput,
        )
    });
}

fn env_steps(c: &mut Criterion) {
    for kind in [EnvKind::Dsl, EnvKind::Lbf, EnvKind::Pp] {
        let cfg = EnvConfig::default_for(kind);
        let mut env = cfg.build().unwrap();
        let spec = env.spec().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        c.bench_function(&format!("{kind:?} episode"), |bench| {
            bench.iter(|| {
                env.reset(rng.random()).unwrap();
                loop {
                    let actions = spec
                        .action_spaces
                        .iter()
                        .map(|s| s.factors.iter().map(|&n| rng.random_range(0..n)).collect())
                        .collect();
                    if env.step(&actions).unwrap().done {
                        break;
                    }
                }
            })
        });
    }
}

criterion_group!(benches, matmul, lstm_unroll, env_steps);
criterion_main!(benches);
