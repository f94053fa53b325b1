use criterion::{black_box, criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use rsak_bench::Fixture;
use rsak_core::model::model_forward;
use rsak_core::numerics::rng_normal;
use rsak_core::rsadapter::{adapter_forward, merge, merged_forward, AdapterWeights};
use rsak_core::{AdapterVariant, ModelConfig, ModelWeights, Rng};

fn run_batch(w: &ModelWeights, fx: &Fixture) -> f64 {
    fx.batch
        .iter()
        .map(|s| model_forward(w, &s.tokens, &s.image).unwrap().logits.get(0, 0))
        .sum()
}

fn forward(c: &mut Criterion) {
    let fx = Fixture::new(&ModelConfig::toy(), 64, 0).unwrap();
    let mut g = c.benchmark_group("forward_batch64");
    g.sample_size(20);
    g.bench_function("unmerged", |b| b.iter(|| run_batch(black_box(&fx.unmerged), &fx)));
    g.bench_function("merged", |b| b.iter(|| run_batch(black_box(&fx.merged), &fx)));
    g.finish();
}

fn single_adapter(c: &mut Criterion) {
    let mut g = c.benchmark_group("adapter_197_tokens");
    for (d, d_prime) in [(64, 16), (192, 48), (768, 192)] {
        let mut rng = Rng::new(3);
        let w = AdapterWeights::random(d, d_prime, &mut rng, 0.05);
        let m = merge(&w);
        let x = rng_normal(&mut rng, 197, d, 1.0);
        g.bench_with_input(BenchmarkId::new("unmerged", d), &x, |b, x| {
            b.iter(|| adapter_forward(x, &w, AdapterVariant::Rs, false).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("merged", d), &x, |b, x| {
            b.iter(|| merged_forward(x, &m).unwrap())
        });
    }
    g.finish();
}

fn merge_time(c: &mut Criterion) {
    let w = Fixture::new(&ModelConfig::toy(), 1, 0).unwrap().unmerged;
    c.bench_function("merge_toy_model", |b| {
        b.iter_batched(|| w.clone(), |w| w.merged().unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, forward, single_adapter, merge_time);
criterion_main!(benches);
