use criterion::{criterion_group, criterion_main, Criterion};
use liam_core::envs::{EnvConfig, EnvKind};
use liam_core::models::{ModelVariantConfig, Variant};
use liam_core::pool::{build_pool, PoolMode};
use liam_core::rl::{TrainingConfig, Trainer};

fn trainer(kind: EnvKind, variant: Variant) -> Trainer {
    let env = EnvConfig::default_for(kind);
    let size = if kind == EnvKind::Dsl { 3 } else { 10 };
    let pool = build_pool(&env, PoolMode::Paired, size, 0).unwrap();
    let mut t = Trainer::new(env, pool, ModelVariantConfig::new(variant), TrainingConfig::for_env(kind), 0).unwrap();
    t.set_parallel(false);
    t
}

fn updates(c: &mut Criterion) {
    let mut group = c.benchmark_group("update");
    group.sample_size(20);
    for kind in [EnvKind::Dsl, EnvKind::Lbf] {
        for variant in [Variant::Liam, Variant::Nam] {
            let mut t = trainer(kind, variant);
            group.bench_function(format!("{kind:?}/{}", variant.as_str()), |b| b.iter(|| t.update().unwrap()));
        }
    }
    group.finish();
}

criterion_group!(benches, updates);
criterion_main!(benches);
