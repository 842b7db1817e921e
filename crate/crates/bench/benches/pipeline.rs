//! Throughput benchmarks for the hot paths: filter updates, detector steps,
//! full alarm runs and the particle sweep.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use cpdhmm::detect::{run_to_alarm, srp_init, srp_step_mut, DetectorConfig, SrpStart};
use cpdhmm::hmm::{sample_changed_path, ChangePoint, ChangeScenario, EmissionSpec, HmmParams};
use cpdhmm::likelihood::init_filter;
use cpdhmm::rng::trial_rng;

fn uniform_chain(d: usize, spread: f64) -> HmmParams {
    let rows = vec![vec![1.0 / d as f64; d]; d];
    let means: Vec<f64> = (0..d).map(|x| spread * x as f64).collect();
    let sds = vec![1.0; d];
    HmmParams::new(rows, EmissionSpec::gaussian(means, sds).unwrap()).unwrap()
}

fn bench_filter_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("filter_step");
    for d in [1usize, 2, 4, 8] {
        let pre = uniform_chain(d, 0.3);
        let post = uniform_chain(d, 0.8);
        let sc = ChangeScenario::new(pre.clone(), post.clone(), ChangePoint::finite(1)).unwrap();
        let path = sample_changed_path(&sc, 4096, 1);
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, _| {
            let mut fp = init_filter(&pre, &post, path.observations[0]).unwrap();
            let mut k = 1usize;
            b.iter(|| {
                let sigma = fp
                    .step(path.observations[k], path.observations[k - 1], &pre, &post)
                    .unwrap();
                k += 1;
                if k == path.observations.len() {
                    k = 1;
                }
                black_box(sigma)
            });
        });
    }
    group.finish();
}

fn bench_srp_step(c: &mut Criterion) {
    let mut rng = trial_rng(3, 0);
    let sc = {
        let pre = uniform_chain(2, 0.3);
        let post = uniform_chain(2, 0.8);
        ChangeScenario::no_change(pre.clone(), post.clone()).unwrap()
    };
    let path = sample_changed_path(&sc, 4096, 2);
    let (pre, post) = (sc.pre().clone(), sc.post().clone());
    let mut fp = init_filter(&pre, &post, path.observations[0]).unwrap();
    let sigmas: Vec<f64> = (1..path.observations.len())
        .map(|k| {
            fp.step(path.observations[k], path.observations[k - 1], &pre, &post)
                .unwrap()
        })
        .collect();
    c.bench_function("srp_step", |b| {
        let mut state = srp_init(1e9f64.ln(), SrpStart::Zero, &mut rng).unwrap();
        let mut k = 0usize;
        b.iter(|| {
            srp_step_mut(&mut state, sigmas[k]);
            k += 1;
            if k == sigmas.len() {
                k = 0;
            }
            black_box(state.log_r())
        });
    });
}

fn bench_run_to_alarm(c: &mut Criterion) {
    let pre = uniform_chain(2, 0.3);
    let post = uniform_chain(2, 1.0);
    let sc = ChangeScenario::new(pre, post, ChangePoint::finite(1)).unwrap();
    let cfg = DetectorConfig::srp(5.0);
    let mut seed = 0u64;
    c.bench_function("run_to_alarm_b5", |b| {
        b.iter(|| {
            seed = seed.wrapping_add(1);
            black_box(run_to_alarm(&sc, &cfg, None, 100_000, seed).unwrap())
        });
    });
}

fn bench_quasi_stationary(c: &mut Criterion) {
    let pre = uniform_chain(2, 0.3);
    let post = uniform_chain(2, 1.0);
    c.bench_function("quasi_stationary_200x50", |b| {
        b.iter(|| {
            black_box(
                cpdhmm::detect::estimate_quasi_stationary(&pre, &post, 3.0, 200, 50, 7).unwrap(),
            )
        });
    });
}

criterion_group!(
    benches,
    bench_filter_step,
    bench_srp_step,
    bench_run_to_alarm,
    bench_quasi_stationary
);
criterion_main!(benches);
