//! Backend comparison. The binary measures whichever backend it was built
//! with; run it twice to compare:
//!
//! ```text
//! cargo bench -p abreu-core --bench parallel_vs_sequential
//! cargo bench -p abreu-core --bench parallel_vs_sequential --no-default-features
//! ```
//!
//! Benchmark ids carry the backend name, so both runs land side by side in
//! the criterion report. The parallel build also times a one-thread pool.

use std::sync::Arc;

use abreu_core::abreu_system::{solve_sbvp, AbreuOptions, AbreuProblem};
use abreu_core::duality::{legendre_transform, residual_resolution};
use abreu_core::geometry::{build_grid, hessian, ConvexDomain, ScalarField};
use abreu_core::manufactured::u_exp;
use abreu_core::par;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn backend() -> &'static str {
    if par::is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

#[cfg(feature = "parallel")]
type Pool = rayon::ThreadPool;
#[cfg(not(feature = "parallel"))]
type Pool = ();

fn run<R: Send>(pool: Option<&Pool>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        #[cfg(feature = "parallel")]
        Some(p) => p.install(f),
        _ => f(),
    }
}

fn workloads(c: &mut Criterion, tag: &str, pool: Option<&Pool>) {
    let domain = ConvexDomain::disk(0.0, 0.0, 1.0);
    let grid = Arc::new(build_grid(&domain, 129).unwrap());
    let u = ScalarField::from_fn(&grid, u_exp);
    c.bench_function(&format!("hessian_129/{tag}"), |b| b.iter(|| run(pool, || hessian(&u, None))));

    let g65 = Arc::new(build_grid(&domain, 65).unwrap());
    let u65 = ScalarField::from_fn(&g65, u_exp);
    let phi = |x: f64, y: f64| u_exp(x, y);
    c.bench_function(&format!("legendre_65/{tag}"), |b| {
        b.iter(|| run(pool, || legendre_transform(&u65, Some(&phi), residual_resolution(&u65)).unwrap()))
    });

    let p = AbreuProblem::new(
        domain,
        2.0,
        0.0,
        Arc::new(|x, y| 0.5 * (x * x + y * y)),
        Arc::new(|_, _| 1.0),
        Arc::new(|_, _, _| 2.0),
    );
    let mut group = c.benchmark_group("solve_quadratic");
    group.sample_size(10);
    group.bench_with_input(BenchmarkId::new(tag, 33), &p, |b, p| {
        b.iter(|| run(pool, || solve_sbvp(p, 33, &AbreuOptions::default()).unwrap()))
    });
    group.finish();
}

fn benches(c: &mut Criterion) {
    workloads(c, backend(), None);
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        workloads(c, "rayon_1_thread", Some(&pool));
    }
}

criterion_group!(group, benches);
criterion_main!(group);
