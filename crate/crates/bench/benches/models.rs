use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use mealkit_bench::{corpus, models};
use mealkit_core::stage1::GenerationState;
use mealkit_core::stage2::{stage2_loss, StageTwoTargets, DEFAULT_LAMBDA};
use mealkit_core::tensor::{AdamConfig, AdamState, Graph, Tensor};

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for n in [16usize, 64, 256] {
        let a = Tensor::matrix(n, n, (0..n * n).map(|i| (i % 7) as f64 * 0.1).collect());
        let b = Tensor::matrix(n, n, (0..n * n).map(|i| (i % 5) as f64 * 0.2).collect());
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| bench.iter(|| black_box(a.matmul(&b).unwrap())));
    }
    group.finish();
}

fn stage1(c: &mut Criterion) {
    let corp = corpus(64);
    let (s1, _) = models(&corp);
    let r = &corp.recipes[0];
    c.bench_function("stage1/next_ingredient", |b| {
        let state = GenerationState::for_model(&s1, Some(r.dish.clone()));
        b.iter(|| black_box(s1.next_ingredient(&state, &r.features).unwrap()))
    });
    c.bench_function("stage1/generate", |b| b.iter(|| black_box(s1.generate(&r.features, Some(&r.dish)).unwrap())));
}

fn stage2(c: &mut Criterion) {
    let corp = corpus(64);
    let (_, s2) = models(&corp);
    let inputs = s2.recipe_inputs(&corp.recipes[0]).unwrap();
    c.bench_function("stage2/estimate", |b| b.iter(|| black_box(s2.estimate(&inputs).unwrap())));
}

fn train_step(c: &mut Criterion) {
    let corp = corpus(64);
    let (mut s1, mut s2) = models(&corp);
    let r = corp.recipes[0].clone();
    let mut adam1 = AdamState::new(&s1.store, AdamConfig::default());
    c.bench_function("train/stage1_step", |b| {
        b.iter(|| {
            let grads = {
                let mut g = Graph::with_params(&s1.store);
                let (l, _, _) = s1.training_loss(&mut g, &r, true).unwrap();
                g.backward(l).unwrap()
            };
            s1.store.zero_grad();
            grads.accumulate_into(&mut s1.store);
            adam1.step(&mut s1.store);
        })
    });
    let targets = StageTwoTargets::from_recipe(&r);
    let inputs = s2.recipe_inputs(&r).unwrap();
    let mut adam2 = AdamState::new(&s2.store, AdamConfig::default());
    c.bench_function("train/stage2_step", |b| {
        b.iter(|| {
            let grads = {
                let mut g = Graph::with_params(&s2.store);
                let v = s2.forward(&mut g, &inputs).unwrap();
                let (l, _) = stage2_loss(&mut g, &v, &targets, &s2.config.scales, &DEFAULT_LAMBDA, &[1.0; 6]).unwrap();
                g.backward(l).unwrap()
            };
            s2.store.zero_grad();
            grads.accumulate_into(&mut s2.store);
            adam2.step(&mut s2.store);
        })
    });
}

criterion_group!(benches, gemm, stage1, stage2, train_step);
criterion_main!(benches);
