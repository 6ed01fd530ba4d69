//! Data-parallel kernels on the default rayon pool against a single-thread
//! pool. Build with `--no-default-features` to time the plain-loop fallback
//! instead; the group names record which build ran.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nonrival::datamarket::{bind_model, simulate_market, DataMarketSpec, VarianceModel};
use nonrival::equilibria::{sample_simplex, simplex_from_slopes, verify_gne, GneOptions};
use nonrival::stage2::mu;
use nonrival::{par, ContractParams, EffortProfile, Matrix};
use rayon::{ThreadPool, ThreadPoolBuilder};

fn pools() -> Vec<(String, ThreadPool)> {
    let mut out = vec![(
        "1-thread".to_string(),
        ThreadPoolBuilder::new().num_threads(1).build().unwrap(),
    )];
    let default = ThreadPoolBuilder::new().build().unwrap();
    if default.current_num_threads() > 1 {
        out.push((
            format!("{}-threads", default.current_num_threads()),
            default,
        ));
    }
    out
}

fn build() -> &'static str {
    if par::is_parallel() {
        "rayon"
    } else {
        "sequential"
    }
}

fn market() -> (DataMarketSpec, ContractParams, EffortProfile) {
    let spec = DataMarketSpec::new(5, 3)
        .with_zeta(vec![
            vec![0.0, 0.2, 0.1],
            vec![0.1, 0.0, 0.2],
            vec![0.2, 0.1, 0.0],
        ])
        .with_variance(VarianceModel::InversePower { exponent: 1.5 });
    let model = bind_model(&spec).unwrap();
    let a = Matrix::from_fn(3, 5, |j, i| 0.3 + 0.1 * (i + 2 * j) as f64);
    let desc = simplex_from_slopes(&model, &a).unwrap();
    let c = sample_simplex(&desc, 1, 0).unwrap().remove(0);
    let e = EffortProfile(mu(&model, &a).unwrap());
    (spec, ContractParams { c, a }, e)
}

fn bench_simulate(cr: &mut Criterion) {
    let (spec, params, e) = market();
    let mut group = cr.benchmark_group(format!("simulate_market/{}", build()));
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new(name, 100_000), |b| {
            b.iter(|| pool.install(|| simulate_market(&spec, &params, &e, 100_000, 7).unwrap()))
        });
    }
    group.finish();
}

fn bench_verify(cr: &mut Criterion) {
    let (spec, params, _) = market();
    let model = bind_model(&spec).unwrap();
    let opts = GneOptions::default();
    let mut group = cr.benchmark_group(format!("verify_gne/{}", build()));
    group.sample_size(20);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new(name, opts.deviations), |b| {
            b.iter(|| pool.install(|| verify_gne(&model, &params, &opts).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_simulate, bench_verify);
criterion_main!(benches);
