//! Damped Newton solver for `det D^2 u = g` with `u = phi` on the boundary.
//!
//! The determinant is regularised by flooring the eigenvalues of the discrete
//! Hessian at `clamp` before taking the product (`det+`). Boundary-adjacent
//! rows use Shortley–Weller stencils with `phi` sampled at the crossings.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::stencil::{hessian_row, BoundaryMode, LinComb};
use crate::geometry::{hessian, Grid2D, ScalarField, Sym2};
use crate::linalg::{sup_norm, BandedLu, CsrBuilder, CsrMatrix};

/// Newton options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MAOptions {
    pub tol: f64,
    pub max_newton: usize,
    /// Initial step fraction; halved on rejection.
    pub damping: f64,
    /// Eigenvalue floor used by `det+`.
    pub clamp: f64,
}

impl Default for MAOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_newton: 100,
            damping: 1.0,
            clamp: 1e-10,
        }
    }
}

impl MAOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tol must be positive".into()));
        }
        if self.max_newton == 0 {
            return Err(Error::InvalidArgument("max_newton must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument("damping must lie in (0, 1]".into()));
        }
        if !(self.clamp >= 0.0) {
            return Err(Error::InvalidArgument("clamp must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MAReport {
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub min_step: f64,
    pub converged: bool,
    pub stalled: bool,
}

impl MAReport {
    pub fn final_residual(&self) -> f64 {
        *self.residual_history.last().unwrap_or(&f64::INFINITY)
    }
}

#[derive(Debug, Clone)]
pub struct MASolution {
    pub u: ScalarField,
    pub report: MAReport,
}

impl MASolution {
    /// `Err(NewtonStall)` unless converged.
    pub fn into_result(self) -> Result<Self> {
        if self.report.converged {
            Ok(self)
        } else {
            Err(Error::NewtonStall {
                iters: self.report.iterations,
                residual: self.report.final_residual(),
            })
        }
    }
}

struct Row {
    h11: LinComb,
    h12: LinComb,
    h22: LinComb,
    b: Sym2,
}

/// Hessian stencils over the unknowns with the Dirichlet contributions folded
/// into constants.
pub struct MASystem {
    grid: Arc<Grid2D>,
    rows: Vec<Row>,
}

fn remap(grid: &Grid2D, lc: &LinComb) -> LinComb {
    LinComb {
        nodes: lc
            .nodes
            .iter()
            .map(|&(k, c)| (grid.unknown_index(k).expect("stencil reads active nodes"), c))
            .collect(),
        boundary: Vec::new(),
    }
}

impl MASystem {
    pub fn new(grid: &Arc<Grid2D>, phi: &(dyn Fn(f64, f64) -> f64 + Sync)) -> Result<Self> {
        let rows = crate::par::map_slice(grid.active_nodes(), |&k| {
            let r = hessian_row(grid, k, BoundaryMode::Dirichlet)
                .ok_or_else(|| Error::InvalidGrid(format!("no Hessian stencil at node {k}")))?;
            Ok(Row {
                b: Sym2::new(
                    r.h11.eval_boundary(phi),
                    r.h12.eval_boundary(phi),
                    r.h22.eval_boundary(phi),
                ),
                h11: remap(grid, &r.h11),
                h12: remap(grid, &r.h12),
                h22: remap(grid, &r.h22),
            })
        });
        Ok(Self {
            grid: grid.clone(),
            rows: rows.into_iter().collect::<Result<Vec<_>>>()?,
        })
    }

    pub fn grid(&self) -> &Arc<Grid2D> {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// Discrete Hessians at every unknown.
    pub fn hessians(&self, x: &[f64]) -> Vec<Sym2> {
        crate::par::map_slice(&self.rows, |r| {
            Sym2::new(
                r.h11.eval(x, None) + r.b.a11,
                r.h12.eval(x, None) + r.b.a12,
                r.h22.eval(x, None) + r.b.a22,
            )
        })
    }

    /// `det+ D^2 u - g` per unknown.
    pub fn residual(&self, x: &[f64], g: &[f64], clamp: f64) -> Vec<f64> {
        self.hessians(x)
            .iter()
            .zip(g)
            .map(|(h, gv)| h.det_clamped(clamp) - gv)
            .collect()
    }

    /// Jacobian `cof(H+) : dH` of the residual.
    pub fn jacobian(&self, x: &[f64], clamp: f64) -> CsrMatrix {
        let hs = self.hessians(x);
        let rows = crate::par::map_range(self.n(), |i| {
            let c = hs[i].clamped(clamp).cofactor();
            let r = &self.rows[i];
            let mut e: Vec<(usize, f64)> = Vec::with_capacity(12);
            for (lc, w) in [(&r.h11, c.a11), (&r.h12, 2.0 * c.a12), (&r.h22, c.a22)] {
                for &(j, v) in &lc.nodes {
                    e.push((j, w * v));
                }
            }
            e
        });
        CsrMatrix::from_rows(rows)
    }

    /// Solve `Delta u = rhs` with the Dirichlet data of this system.
    pub fn poisson(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let mut b = CsrBuilder::new(self.n());
        let mut f = vec![0.0; self.n()];
        for (i, r) in self.rows.iter().enumerate() {
            for lc in [&r.h11, &r.h22] {
                for &(j, v) in &lc.nodes {
                    b.add(i, j, v);
                }
            }
            f[i] = rhs[i] - r.b.a11 - r.b.a22;
        }
        let m = b.build();
        let lu = BandedLu::factor(&m).map_err(|row| self.singular(row))?;
        Ok(lu.solve(&f))
    }

    pub(crate) fn singular(&self, row: usize) -> Error {
        singular_at(&self.grid, row)
    }
}

pub(crate) fn singular_at(grid: &Grid2D, row: usize) -> Error {
    let node = grid.node_of_unknown(row);
    let (x, y) = grid.xy(node);
    Error::SingularMatrix { row, node, x, y }
}

fn check_rhs(g: &ScalarField) -> Result<Vec<f64>> {
    let grid = g.grid();
    let vals = g.to_unknowns();
    for (i, &v) in vals.iter().enumerate() {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::NonPositiveRhs {
                node: grid.node_of_unknown(i),
                value: v,
            });
        }
    }
    Ok(vals)
}

/// One Newton correction: solves `U^{ij} D_ij delta = g - det+ D^2 u` with
/// homogeneous boundary rows. Returns the correction and the current
/// residual sup-norm.
pub fn newton_step(
    u: &ScalarField,
    g: &ScalarField,
    phi: &(dyn Fn(f64, f64) -> f64 + Sync),
    clamp: f64,
) -> Result<(ScalarField, f64)> {
    let sys = MASystem::new(u.grid(), phi)?;
    let gv = check_rhs(g)?;
    let x = u.to_unknowns();
    let (d, r) = step_on(&sys, &x, &gv, clamp)?;
    Ok((ScalarField::from_unknowns(u.grid(), &d), r))
}

fn step_on(sys: &MASystem, x: &[f64], g: &[f64], clamp: f64) -> Result<(Vec<f64>, f64)> {
    let res = sys.residual(x, g, clamp);
    let rn = sup_norm(&res);
    let jac = sys.jacobian(x, clamp);
    let lu = BandedLu::factor(&jac).map_err(|row| sys.singular(row))?;
    let rhs: Vec<f64> = res.iter().map(|v| -v).collect();
    Ok((lu.solve(&rhs), rn))
}

/// Solve `det D^2 u = g`, `u = phi` on the boundary.
///
/// The initial iterate solves `Delta u0 = 2 sqrt(g)`. A stall in the
/// backtracking line search returns the best iterate with
/// `report.stalled = true`.
pub fn solve_ma(
    grid: &Arc<Grid2D>,
    g: &ScalarField,
    phi: &(dyn Fn(f64, f64) -> f64 + Sync),
    opts: &MAOptions,
) -> Result<MASolution> {
    let sys = MASystem::new(grid, phi)?;
    let gv = check_rhs(g)?;
    let rhs0: Vec<f64> = gv.iter().map(|v| 2.0 * v.sqrt()).collect();
    let x0 = sys.poisson(&rhs0)?;
    solve_from(&sys, &gv, x0, opts)
}

/// Newton iteration from a given start.
pub fn solve_ma_from(
    grid: &Arc<Grid2D>,
    g: &ScalarField,
    phi: &(dyn Fn(f64, f64) -> f64 + Sync),
    u0: &ScalarField,
    opts: &MAOptions,
) -> Result<MASolution> {
    let sys = MASystem::new(grid, phi)?;
    let gv = check_rhs(g)?;
    solve_from(&sys, &gv, u0.to_unknowns(), opts)
}

fn solve_from(sys: &MASystem, g: &[f64], mut x: Vec<f64>, opts: &MAOptions) -> Result<MASolution> {
    opts.validate()?;
    let mut rn = sup_norm(&sys.residual(&x, g, opts.clamp));
    let mut report = MAReport {
        iterations: 0,
        residual_history: vec![rn],
        min_step: opts.damping,
        converged: rn <= opts.tol,
        stalled: false,
    };
    while !report.converged && report.iterations < opts.max_newton {
        let (d, _) = step_on(sys, &x, g, opts.clamp)?;
        let mut tau = opts.damping;
        let accepted = loop {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + tau * b).collect();
            let tn = sup_norm(&sys.residual(&trial, g, opts.clamp));
            if tn <= (1.0 - 1e-4 * tau) * rn {
                break Some((trial, tn));
            }
            tau *= 0.5;
            if tau < 1e-6 {
                break None;
            }
        };
        report.iterations += 1;
        report.min_step = report.min_step.min(tau);
        match accepted {
            Some((trial, tn)) => {
                x = trial;
                rn = tn;
                report.residual_history.push(rn);
                log::debug!("newton {}: residual {rn:e} step {tau}", report.iterations);
                report.converged = rn <= opts.tol;
            }
            None => {
                report.stalled = true;
                log::warn!("newton stalled at residual {rn:e}");
                break;
            }
        }
    }
    Ok(MASolution {
        u: ScalarField::from_unknowns(sys.grid(), &x),
        report,
    })
}

/// `(ok, min_eig)` over INTERIOR nodes; `ok` iff `min_eig >= -1e-8`.
pub fn assert_convex(u: &ScalarField) -> (bool, f64) {
    let m = crate::geometry::min_eigenvalue_interior(&hessian(u, None));
    (m >= -1e-8, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid, ConvexDomain};

    fn disk(n: usize) -> Arc<Grid2D> {
        Arc::new(build_grid(&ConvexDomain::disk(0.0, 0.0, 1.0), n).unwrap())
    }

    fn half_r2(x: f64, y: f64) -> f64 {
        0.5 * (x * x + y * y)
    }

    #[test]
    fn quadratic_is_reproduced() {
        let g = disk(33);
        let sol = solve_ma(&g, &ScalarField::constant(&g, 1.0), &half_r2, &MAOptions::default()).unwrap();
        assert!(sol.report.converged && !sol.report.stalled);
        let exact = ScalarField::from_fn(&g, half_r2);
        assert!(sol.u.dist_sup(&exact) < 1e-9, "{}", sol.u.dist_sup(&exact));
    }

    #[test]
    fn exact_iterate_gives_zero_step() {
        let g = disk(17);
        let u = ScalarField::from_fn(&g, half_r2);
        let (d, r) = newton_step(&u, &ScalarField::constant(&g, 1.0), &half_r2, 1e-10).unwrap();
        assert!(r < 1e-12 && d.sup_norm() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let g = disk(9);
        let phi = |x: f64, y: f64| 0.5 * x * x + 0.8 * y * y + 0.2 * x * y + 0.1 * (x + y).exp();
        let sys = MASystem::new(&g, &phi).unwrap();
        let x = ScalarField::from_fn(&g, phi).to_unknowns();
        let gv = vec![1.0; x.len()];
        let jac = sys.jacobian(&x, 1e-10);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let jv = jac.mul_vec(&v);
        let t = 1e-6;
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + t * b).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - t * b).collect();
        let rp = sys.residual(&xp, &gv, 1e-10);
        let rm = sys.residual(&xm, &gv, 1e-10);
        let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * t)).collect();
        let scale = sup_norm(&jv);
        for (a, b) in jv.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn one_step_contracts_bump() {
        let g = disk(33);
        let u = ScalarField::from_fn(&g, |x, y| half_r2(x, y) + 0.01 * (1.0 - x * x - y * y).powi(2));
        let one = ScalarField::constant(&g, 1.0);
        let (d, r0) = newton_step(&u, &one, &half_r2, 1e-10).unwrap();
        let u1 = u.add(&d);
        let (_, r1) = newton_step(&u1, &one, &half_r2, 1e-10).unwrap();
        assert!(r1 * 10.0 <= r0, "{r0} -> {r1}");
    }

    #[test]
    fn nonpositive_rhs_rejected() {
        let g = disk(9);
        let bad = ScalarField::from_fn(&g, |x, _| x);
        assert!(matches!(
            solve_ma(&g, &bad, &half_r2, &MAOptions::default()),
            Err(Error::NonPositiveRhs { .. })
        ));
    }

    #[test]
    fn convexity_gate() {
        let g = disk(33);
        let (ok, m) = assert_convex(&ScalarField::from_fn(&g, half_r2));
        assert!(ok && (m - 1.0).abs() < 1e-10);
        let (ok, m) = assert_convex(&ScalarField::from_fn(&g, |x, y| 0.5 * (x * x - y * y)));
        assert!(!ok && (m + 1.0).abs() < 1e-10);
        let (_, m) = assert_convex(&ScalarField::from_fn(&g, |x, y| x.powi(4) + y.powi(4)));
        let h = g.h();
        assert!(m.abs() <= 2.0 * h * h + 1e-12, "{m}");
    }
}
