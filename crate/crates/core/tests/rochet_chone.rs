use std::sync::Arc;

use abreu_core::abreu_system::NewtonOptions;
use abreu_core::geometry::{build_grid, integrate, Region, ScalarField};
use abreu_core::monge_ampere::assert_convex;
use abreu_core::rochet_chone::*;

const EPS: [f64; 4] = [0.3, 0.1, 0.03, 0.01];

fn degenerate() -> RCProblem {
    RCProblem {
        gamma: Gamma::Const(0.0),
        f0: F0::zero(),
        ..RCProblem::classic()
    }
}

fn tracking() -> RCProblem {
    let p = RCProblem::classic();
    RCProblem {
        gamma: Gamma::Const(0.0),
        f0: F0::tracking(p.phi.clone()),
        ..p
    }
}

/// Strictly convex participation function with the classic Lagrangian.
fn bowl() -> RCProblem {
    RCProblem {
        phi: Arc::new(|x, y| 0.5 * ((x - 1.5).powi(2) + (y - 1.5).powi(2))),
        ..RCProblem::classic()
    }
}

fn sweep(p: &RCProblem, n: usize) -> (ConvergenceTable, Vec<RCApproxRun>) {
    let oracle = oracle_minimize(p, n.min(33), 2000).unwrap();
    let (table, runs) = sweep_runs(p, &EPS, n, &NewtonOptions::default(), &oracle).unwrap();
    (table, runs.into_iter().map(|r| r.unwrap()).collect())
}

fn penalty_monotone(t: &ConvergenceTable) -> bool {
    t.rows.windows(2).all(|w| w[1].penalty_l2 <= 1.05 * w[0].penalty_l2)
}

#[test]
fn classic_sweep_trends() {
    let (t, runs) = sweep(&RCProblem::classic(), 33);
    assert!(t.rows.iter().all(|r| r.converged && r.error.is_none()));
    assert!(t.penalty_within(3.0), "{}", t.to_csv());
    assert!(penalty_monotone(&t));
    assert!(t.dist_nonincreasing(0.05), "{}", t.to_csv());
    assert!(t.oracle_objective.abs() < 1e-6, "{}", t.oracle_objective);
    for r in &runs {
        assert!(r.convex);
        assert!(assert_convex(&r.u_eps).0);
        assert!(r.penalty_l2 >= 0.0);
    }
}

#[test]
fn pure_penalty_sweep() {
    let (t, runs) = sweep(&degenerate(), 33);
    assert!(t.rows.iter().all(|r| r.converged));
    assert!(t.penalty_within(3.0), "{}", t.to_csv());
    assert!(penalty_monotone(&t), "{}", t.to_csv());
    // only the log term survives in the energy at the lift
    let p = degenerate();
    let g = runs[0].u_eps.grid().clone();
    let lift = lift_utilde(&p, &g, 0.1);
    let e = jqe_energy(&lift, &p, 0.1);
    assert_eq!(e.cost, 0.0);
    assert_eq!(e.zeroth, 0.0);
    assert!(e.penalty.abs() < 1e-14);
    assert!((e.total - e.log_det).abs() < 1e-14);
}

#[test]
fn tracking_distance_decreases() {
    let (t, _) = sweep(&tracking(), 33);
    assert!(t.rows.iter().all(|r| r.converged));
    assert!(t.oracle_objective.abs() < 1e-12);
    assert!(t.dist_nonincreasing(0.05), "{}", t.to_csv());
    let first = t.rows[0].dist_oracle;
    let last = t.rows.last().unwrap().dist_oracle;
    assert!(last < 0.6 * first, "{}", t.to_csv());
}

#[test]
fn classic_oracle_refinement() {
    let p = RCProblem::classic();
    let a = oracle_minimize(&p, 17, 2000).unwrap();
    let b = oracle_minimize(&p, 25, 2000).unwrap();
    let scale = a.objective.abs().max(b.objective.abs());
    assert!((a.objective - b.objective).abs() <= 0.05 * scale + 1e-12);
}

#[test]
fn bowl_oracle_refines_monotonically() {
    let objs: Vec<f64> = [17, 25, 33]
        .iter()
        .map(|&n| {
            let r = oracle_minimize(&bowl(), n, 2000).unwrap();
            assert!(r.violation <= 1e-8);
            assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
            r.objective
        })
        .collect();
    assert!(objs[0] < objs[1] && objs[1] < objs[2] && objs[2] < 0.0, "{objs:?}");
}

#[test]
fn linear_oracle_stays_below_phi() {
    let p = RCProblem {
        gamma: Gamma::Const(0.0),
        ..bowl()
    };
    let r = oracle_minimize(&p, 25, 2000).unwrap();
    let phi = ScalarField::from_fn(r.u.grid(), |x, y| (p.phi)(x, y));
    assert!(r.objective < oracle_objective(&phi, &p, 0.0));
    for &k in r.u.grid().active_nodes() {
        assert!(r.u.at(k) <= phi.at(k) + 1e-10);
    }
}

#[test]
fn penalty_matches_region_integral() {
    let p = RCProblem::classic();
    let run = solve_rc_approx(&p, 0.1, 33, &NewtonOptions::default()).unwrap();
    let g = run.u_eps.grid().clone();
    let lift = lift_utilde(&p, &g, 0.1);
    let diff = ScalarField::from_values(&g, (0..g.len()).map(|k| (run.u_eps.at(k) - lift.at(k)).powi(2)).collect()).unwrap();
    let direct = integrate(&diff, Region::OmegaMinusOmega0).unwrap();
    assert!((direct - run.penalty_l2).abs() <= 1e-12 * direct.max(1.0));
}

#[test]
fn gates() {
    let grid = build_grid(&RCProblem::classic().domain, 17).unwrap();
    let p = RCProblem {
        q: 3.0,
        gamma: Gamma::Affine(1.0, 0.2, 0.0),
        ..RCProblem::classic()
    };
    let err = p.validate(&grid).unwrap_err().to_string();
    assert!(err.contains("gamma must be constant for q>2"), "{err}");
    let opts = NewtonOptions::default();
    assert!(solve_rc_approx(&RCProblem::classic(), 1.0, 17, &opts).is_err());
    assert!(solve_rc_approx(&RCProblem::classic(), 0.0, 17, &opts).is_err());
    let oracle = oracle_minimize(&RCProblem::classic(), 17, 10).unwrap();
    assert!(sweep_runs(&RCProblem::classic(), &[0.1, 0.3], 17, &opts, &oracle).is_err());
    assert!(oracle_minimize(&RCProblem::classic(), 65, 10).is_err());
}
