use std::sync::Arc;

use abreu_core::abreu_system::*;
use abreu_core::geometry::{build_grid, hessian, ConvexDomain, NodeClass, ScalarField};
use abreu_core::linearized_ma::nondivergence_apply;
use abreu_core::manufactured::*;

fn quad_problem(q: f64, delta: f64) -> AbreuProblem {
    AbreuProblem::new(
        ConvexDomain::disk(0.0, 0.0, 1.0),
        q,
        delta,
        Arc::new(|x, y| 0.5 * (x * x + y * y)),
        Arc::new(|_, _| 1.0),
        Arc::new(move |x, y, _| quad_source(x, y, q, delta)),
    )
}

fn mms_problem(q: f64, delta: f64) -> AbreuProblem {
    AbreuProblem::new(
        ConvexDomain::disk(0.0, 0.0, 1.0),
        q,
        delta,
        Arc::new(u_exp),
        Arc::new(w_exp),
        Arc::new(move |x, y, _| source_exp(x, y, q, delta)),
    )
}

#[test]
fn exact_quadratic() {
    let p = quad_problem(2.0, 0.0);
    let s = solve_sbvp(&p, 65, &AbreuOptions::default()).unwrap();
    assert!(s.report.converged);
    let g = s.grid().clone();
    let exact = ScalarField::from_fn(&g, |x, y| 0.5 * (x * x + y * y));
    assert!(s.u.dist_sup(&exact) <= 5e-3);
    assert!(s.w.dist_sup(&ScalarField::constant(&g, 1.0)) <= 5e-3);
    let (r1, r2) = abreu_residual(&exact, &ScalarField::constant(&g, 1.0), &p, &AbreuRhs(&p)).unwrap();
    let away = g.active_nodes().iter().copied().filter(|&k| g.has_wide_neighborhood(k, 2));
    assert!(r1.sup_norm_over(away.clone()) <= 1e-8);
    assert!(r2.sup_norm_over(away) <= 1e-8);
    let a = s.report.apriori.clone().unwrap();
    assert!(a.grad_bound_ok);
    assert_eq!(g.class(a.sup_grad_node), NodeClass::BoundaryAdjacent);
    assert!((a.min_det * s.w.max() - 1.0).abs() < 1e-6);
}

#[test]
fn other_exponents_reproduce_quadratic() {
    for &(q, d) in &[(1.5, 1e-2), (3.0, 0.0)] {
        let s = solve_sbvp(&quad_problem(q, d), 33, &AbreuOptions::default()).unwrap();
        assert!(s.report.converged);
        let exact = ScalarField::from_fn(s.grid(), |x, y| 0.5 * (x * x + y * y));
        assert!(s.u.dist_sup(&exact) <= 5e-3, "q {q}");
        assert!(s.w.dist_sup(&ScalarField::constant(s.grid(), 1.0)) <= 5e-3, "q {q}");
    }
}

#[test]
fn maximum_principle_without_source() {
    let mut p = quad_problem(2.0, 0.0);
    p.f0z = Arc::new(|_, _, _| 0.0);
    for n in [33, 65] {
        let s = solve_sbvp(&p, n, &AbreuOptions::default()).unwrap();
        assert!(s.report.converged);
        let h = s.grid().h();
        let a = s.report.apriori.unwrap();
        assert!(a.min_w_interior >= 1.0 - 10.0 * h * h);
        assert!(a.max_det <= 1.0 / (1.0 - 10.0 * h * h));
    }
}

#[test]
fn manufactured_second_order() {
    let p = mms_problem(2.0, 0.0);
    let mut errs = Vec::new();
    for n in [33, 65] {
        let s = solve_sbvp(&p, n, &AbreuOptions::default()).unwrap();
        assert!(s.report.converged);
        let hist = &s.report.residual_history;
        assert!(hist.windows(2).all(|w| w[1].0.max(w[1].1) <= w[0].0.max(w[0].1)));
        assert!(s.report.final_r1 <= 10.0 * 1e-7 && s.report.final_r2 <= 10.0 * 1e-7);
        errs.push((
            s.u.dist_sup(&ScalarField::from_fn(s.grid(), u_exp)),
            s.w.dist_sup(&ScalarField::from_fn(s.grid(), w_exp)),
        ));
    }
    let (ru, rw) = (errs[0].0 / errs[1].0, errs[0].1 / errs[1].1);
    assert!((3.0..=5.0).contains(&ru) && (3.0..=5.0).contains(&rw), "{ru} {rw}");
}

#[test]
fn residual_algebra() {
    let p = quad_problem(2.0, 0.0);
    let g = Arc::new(build_grid(&p.domain, 33).unwrap());
    let u = ScalarField::from_fn(&g, |x, y| 0.5 * (x * x + y * y));
    let w = ScalarField::constant(&g, 1.1);
    let (_, r2) = abreu_residual(&u, &w, &p, &AbreuRhs(&p)).unwrap();
    let hs = hessian(&u, Some(&*p.phi));
    for &k in g.active_nodes() {
        assert!((r2.at(k) - 0.1 * hs.at(k).det_clamped(1e-10)).abs() < 1e-12);
    }
}

#[test]
fn flux_residual_matches_nondivergence_form() {
    let mut errs = Vec::new();
    for n in [33, 65] {
        let mut p = quad_problem(2.0, 0.0);
        p.phi = Arc::new(u_exp);
        p.psi = Arc::new(|x, y| 2.0 + x.exp() * (2.0 * y).cos());
        let g = Arc::new(build_grid(&p.domain, n).unwrap());
        let u = ScalarField::from_fn(&g, u_exp);
        let w = ScalarField::from_fn(&g, |x, y| (p.psi)(x, y));
        let rhs = AbreuRhs(&p);
        let (r1, _) = abreu_residual(&u, &w, &p, &rhs).unwrap();
        let direct = nondivergence_apply(&u, Some(&*p.phi), &w, Some(&*p.psi)).sub(&rhs.rhs(&u).unwrap());
        let interior = g.active_nodes().iter().copied().filter(|&k| g.has_wide_neighborhood(k, 2));
        errs.push(r1.sub(&direct).sup_norm_over(interior));
    }
    assert!(errs[1] < errs[0] / 3.0, "{errs:?}");
}

#[test]
fn validation_messages() {
    let p = quad_problem(1.5, 0.0);
    let e = solve_sbvp(&p, 17, &AbreuOptions::default()).unwrap_err().to_string();
    assert!(e.contains("delta must be positive for q<2"), "{e}");
    let mut p = quad_problem(2.0, 0.0);
    p.psi = Arc::new(|x, _| x);
    assert!(solve_sbvp(&p, 17, &AbreuOptions::default()).is_err());
    let mut p = quad_problem(2.0, 0.0);
    p.q = 1.0;
    assert!(p.validate().is_err());
}

#[test]
fn repeated_solves_are_bit_identical() {
    let p = mms_problem(1.5, 1e-2);
    let a = solve_sbvp(&p, 33, &AbreuOptions::default()).unwrap();
    let b = solve_sbvp(&p, 33, &AbreuOptions::default()).unwrap();
    let bits = |f: &ScalarField| f.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.u), bits(&b.u));
    assert_eq!(bits(&a.w), bits(&b.w));
    assert_eq!(a.report.to_json(), b.report.to_json());
}

#[test]
fn newton_agrees_with_picard() {
    let p = mms_problem(2.0, 0.0);
    let grid = Arc::new(build_grid(&p.domain, 33).unwrap());
    let pic = solve_sbvp_on(&grid, &p, &AbreuRhs(&p), &AbreuOptions::default()).unwrap();
    let u0 = ScalarField::from_fn(&grid, |x, y| u_exp(x, y) + 0.05 * (x * x + y * y - 1.0));
    let newton = solve_sbvp_newton(&p, &AbreuRhs(&p), &u0, &NewtonOptions::default()).unwrap();
    assert!(newton.report.converged, "{}", newton.report.message);
    assert!(newton.u.dist_sup(&pic.u) < 1e-6);
    assert!(newton.w.dist_sup(&pic.w) < 1e-5);
}
