use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use organloc::cli::synthetic_samples;
use organloc::exec::Exec;
use organloc::net::{self, Arch};
use organloc::voldata::Spacing3;
use organloc::{metrics, phantom};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn samples(n: usize) -> Vec<organloc::train::Sample> {
    synthetic_samples(
        Exec::default(),
        1,
        0..n,
        phantom::DEFAULT_DIMS,
        Spacing3::isotropic(phantom::DEFAULT_SPACING_MM),
        &Default::default(),
    )
    .unwrap()
}

fn forward_backward(c: &mut Criterion) {
    let data = samples(8);
    let d = data[0].depth.dims();
    let params = net::init_params::<f32>(&Arch::default_for(d.h, d.w), 0).unwrap();
    let depths: Vec<_> = data.iter().map(|s| &s.depth).collect();
    let input = net::batch_input::<f32>(&depths).unwrap();
    let mut g = c.benchmark_group("forward_backward_batch8");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let (logits, trace) = net::forward_with(exec, &params, &input).unwrap();
                net::backward_with(exec, &params, &trace, &logits).unwrap()
            })
        });
    }
    g.finish();
}

fn cohort(c: &mut Criterion) {
    let dims = phantom::DEFAULT_DIMS;
    let spacing = Spacing3::isotropic(phantom::DEFAULT_SPACING_MM);
    let mut g = c.benchmark_group("phantom_and_depth_16_cases");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| synthetic_samples(exec, 3, 0..16, dims, spacing, &Default::default()).unwrap())
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let data = samples(50);
    let ids: Vec<_> = data.iter().map(|s| s.case_id.clone()).collect();
    let gts: Vec<_> = data.iter().map(|s| s.masks.clone()).collect();
    let preds: Vec<_> = gts.iter().rev().cloned().collect();
    let mut g = c.benchmark_group("evaluate_50_cases");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| metrics::evaluate_cases_with(exec, &ids, &preds, &gts).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, forward_backward, cohort, evaluation);
criterion_main!(benches);
