//! Convexity-constrained Rochet–Choné problem with `q`-power cost, its
//! penalised Abreu approximation and a projected-gradient oracle.
//!
//! Lagrangian `F(x, z, p) = (|p|^q/q - x.p) gamma(x) + F0(x, z)` on the inner
//! region `Omega0`; outside it the approximation pulls `u` towards the lifted
//! target `phi + eps^{1/12} (e^rho - 1)`.

use std::sync::Arc;

use serde::Serialize;

use crate::abreu_system::{solve_sbvp_newton, AbreuProblem, Fn2, Fn3, NewtonOptions, RhsModel, SolveReport};
use crate::error::{Error, Result};
use crate::geometry::stencil::{hessian_row, BoundaryMode};
use crate::geometry::{build_grid, hessian, integrate, ConvexDomain, Grid2D, Region, ScalarField, Sym2};
use crate::linearized_ma::{cell_flux_divergence, cell_gradients};
use crate::monge_ampere::assert_convex;

/// Participation weight `gamma`.
#[derive(Clone)]
pub enum Gamma {
    Const(f64),
    /// `c0 + c1 x + c2 y`.
    Affine(f64, f64, f64),
    Custom(Fn2),
}

impl std::fmt::Debug for Gamma {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Gamma::Const(c) => write!(f, "Const({c})"),
            Gamma::Affine(a, b, c) => write!(f, "Affine({a}, {b}, {c})"),
            Gamma::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Gamma {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            Gamma::Const(c) => *c,
            Gamma::Affine(a, b, c) => a + b * x + c * y,
            Gamma::Custom(g) => g(x, y),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Gamma::Const(_) => true,
            Gamma::Affine(_, b, c) => *b == 0.0 && *c == 0.0,
            Gamma::Custom(_) => false,
        }
    }
}

/// Zeroth-order term `F0(x, y, z)` with its `z`-derivative.
#[derive(Clone)]
pub struct F0 {
    pub f: Fn3,
    pub fz: Fn3,
    pub label: String,
}

impl std::fmt::Debug for F0 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "F0({})", self.label)
    }
}

impl F0 {
    pub fn zero() -> Self {
        Self {
            f: Arc::new(|_, _, _| 0.0),
            fz: Arc::new(|_, _, _| 0.0),
            label: "zero".into(),
        }
    }

    /// `z gamma(x)`: the classic model.
    pub fn linear(gamma: Gamma) -> Self {
        let g1 = gamma.clone();
        Self {
            f: Arc::new(move |x, y, z| z * gamma.eval(x, y)),
            fz: Arc::new(move |x, y, _| g1.eval(x, y)),
            label: "linear".into(),
        }
    }

    /// `c z^2`.
    pub fn quadratic(c: f64) -> Self {
        Self {
            f: Arc::new(move |_, _, z| c * z * z),
            fz: Arc::new(move |_, _, z| 2.0 * c * z),
            label: format!("quadratic(c={c})"),
        }
    }

    /// `(z - target(x))^2`.
    pub fn tracking(target: Fn2) -> Self {
        let t1 = target.clone();
        Self {
            f: Arc::new(move |x, y, z| (z - target(x, y)).powi(2)),
            fz: Arc::new(move |x, y, z| 2.0 * (z - t1(x, y))),
            label: "tracking".into(),
        }
    }
}

#[derive(Clone)]
pub struct RCProblem {
    /// Outer domain with the inner region attached.
    pub domain: ConvexDomain,
    pub q: f64,
    pub gamma: Gamma,
    pub phi: Fn2,
    pub psi: Fn2,
    pub f0: F0,
}

impl std::fmt::Debug for RCProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RCProblem")
            .field("domain", &self.domain.label())
            .field("q", &self.q)
            .field("gamma", &self.gamma)
            .field("f0", &self.f0)
            .finish()
    }
}

impl RCProblem {
    /// Disk of radius 2 centred at `(1.5, 1.5)` with `Omega0 = [1, 2]^2`,
    /// `gamma = 1`, `q = 2`, `phi = 0`, `psi = 1`, `F0 = z`.
    pub fn classic() -> Self {
        let inner = ConvexDomain::square(1.5, 1.5, 0.5);
        let domain = ConvexDomain::disk(1.5, 1.5, 2.0)
            .with_inner(inner.rho_fn().clone())
            .with_label("classic");
        Self {
            domain,
            q: 2.0,
            gamma: Gamma::Const(1.0),
            phi: Arc::new(|_, _| 0.0),
            psi: Arc::new(|_, _| 1.0),
            f0: F0::linear(Gamma::Const(1.0)),
        }
    }

    /// Parameter gates plus sampled convexity of `phi` and monotonicity of
    /// `F0_z` on `grid`.
    pub fn validate(&self, grid: &Grid2D) -> Result<()> {
        if !(self.q > 1.0) {
            return Err(Error::InvalidArgument(format!("q must exceed 1, got {}", self.q)));
        }
        if self.q > 2.0 && !self.gamma.is_constant() {
            return Err(Error::InvalidArgument("gamma must be constant for q>2".into()));
        }
        if !self.domain.has_inner() {
            return Err(Error::MissingInnerRegion);
        }
        let mut scale: f64 = 1.0;
        let mut worst: f64 = 0.0;
        for k in grid.active_nodes().iter().copied() {
            let (x, y) = grid.xy(k);
            if self.gamma.eval(x, y) < 0.0 {
                return Err(Error::InvalidArgument(format!("gamma negative at ({x}, {y})")));
            }
            for &(z, zt) in &[(-1.0, 0.5), (0.0, 2.0), (1.5, -0.5)] {
                let d = ((self.f0.fz)(x, y, z) - (self.f0.fz)(x, y, zt)) * (z - zt);
                if d < -1e-12 {
                    return Err(Error::InvalidArgument("F0_z is not monotone in z".into()));
                }
            }
        }
        let g = Arc::new(grid.clone());
        let hs = hessian(&ScalarField::from_fn(&g, |x, y| (self.phi)(x, y)), None);
        for k in grid.interior_nodes() {
            let (lo, hi) = hs.at(k).eigenvalues();
            scale = scale.max(hi.abs());
            worst = worst.min(lo);
        }
        if worst < -1e-8 * scale {
            return Err(Error::InvalidArgument(format!(
                "phi is not convex (min Hessian eigenvalue {worst:e})"
            )));
        }
        Ok(())
    }
}

/// `eps^{1/12}`, the lift coefficient for `n = 2`.
pub fn lift_coefficient(eps: f64) -> f64 {
    eps.powf(1.0 / 12.0)
}

/// `phi + eps^{1/12} (e^rho - 1)` at every active node.
pub fn lift_utilde(p: &RCProblem, grid: &Arc<Grid2D>, eps: f64) -> ScalarField {
    let c = lift_coefficient(eps);
    ScalarField::from_fn(grid, |x, y| (p.phi)(x, y) + c * (p.domain.rho(x, y).exp() - 1.0))
}

/// Inner-region membership of every node.
pub fn inner_mask(grid: &Grid2D) -> Vec<bool> {
    (0..grid.len()).map(|k| grid.is_active(k) && grid.is_inner(k)).collect()
}

fn inner_cells(grid: &Grid2D, inner: &[bool]) -> Vec<bool> {
    let nx1 = grid.nx() - 1;
    (0..nx1 * (grid.ny() - 1))
        .map(|c| {
            let (ci, cj) = (c % nx1, c / nx1);
            [(0, 0), (1, 0), (0, 1), (1, 1)]
                .iter()
                .all(|&(a, b)| inner[grid.idx(ci + a, cj + b)])
        })
        .collect()
}

fn cell_centre(grid: &Grid2D, c: usize) -> (f64, f64) {
    let nx1 = grid.nx() - 1;
    let (x, y) = grid.xy(grid.idx(c % nx1, c / nx1));
    (x + 0.5 * grid.h(), y + 0.5 * grid.h())
}

/// `gamma [(|p|^2 + delta)^{(q-2)/2} p - x]` on inner cells.
fn cost_flux(u: &ScalarField, p: &RCProblem, delta: f64, cells: &[bool]) -> Vec<Option<(f64, f64)>> {
    let g = u.grid();
    cell_gradients(u)
        .into_iter()
        .enumerate()
        .map(|(c, pc)| {
            let (p1, p2) = pc?;
            if !cells[c] {
                return None;
            }
            let (x, y) = cell_centre(g, c);
            let s = p1 * p1 + p2 * p2 + delta;
            let a = if p.q == 2.0 { 1.0 } else { s.powf(0.5 * (p.q - 2.0)) };
            let gm = p.gamma.eval(x, y);
            Some((gm * (a * p1 - x), gm * (a * p2 - y)))
        })
        .collect()
}

/// `F0_z - div(gamma [(|Du|^2 + delta)^{(q-2)/2} Du - x])` at inner nodes
/// (cell flux form), `NaN` elsewhere.
fn inner_gradient(u: &ScalarField, p: &RCProblem, delta: f64, inner: &[bool]) -> Vec<f64> {
    let g = u.grid().clone();
    let cells = inner_cells(&g, inner);
    let flux = cost_flux(u, p, delta, &cells);
    crate::par::map_range(g.len(), |k| {
        if !inner[k] {
            return f64::NAN;
        }
        let (x, y) = g.xy(k);
        (p.f0.fz)(x, y, u.at(k)) - cell_flux_divergence(&g, k, &flux)
    })
}

/// Right-hand side `f_eps(u)`: `F0_z - div(gamma [(|Du|^2 + eps)^{(q-2)/2} Du - x])`
/// on the inner region (cell flux form) and `(u - utilde) / eps` outside it.
pub fn rc_rhs(u: &ScalarField, p: &RCProblem, eps: f64) -> Result<ScalarField> {
    let g = u.grid().clone();
    let inner = inner_mask(&g);
    if !inner.iter().any(|&b| b) {
        return Err(Error::MissingInnerRegion);
    }
    let ut = lift_utilde(p, &g, eps);
    let mut out = inner_gradient(u, p, eps, &inner);
    for &k in g.active_nodes() {
        if !inner[k] {
            out[k] = (u.at(k) - ut.at(k)) / eps;
        }
    }
    ScalarField::from_values(&g, out)
}

/// Hessian in `p` of `gamma (|p|^2 + eps)^{q/2} / q`.
pub fn cost_hessian(p: (f64, f64), q: f64, eps: f64, gamma: f64) -> Sym2 {
    let s = p.0 * p.0 + p.1 * p.1 + eps;
    let a = gamma * s.powf(0.5 * (q - 2.0));
    let b = (q - 2.0) / s;
    Sym2::new(a * (1.0 + b * p.0 * p.0), a * b * p.0 * p.1, a * (1.0 + b * p.1 * p.1))
}

/// The four addends of the discrete penalised energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyTerms {
    pub total: f64,
    /// Cost term over inner cells.
    pub cost: f64,
    /// `F0` over inner nodes.
    pub zeroth: f64,
    /// `-eps sum log det+ D^2 u`.
    pub log_det: f64,
    /// Quadratic penalty outside the inner region.
    pub penalty: f64,
    pub floor_activated: bool,
}

const LOGDET_FLOOR: f64 = 1e-14;

fn cost_energy(u: &ScalarField, p: &RCProblem, delta: f64, cells: &[bool]) -> f64 {
    let g = u.grid();
    let h2 = g.h() * g.h();
    cell_gradients(u)
        .into_iter()
        .enumerate()
        .filter_map(|(c, pc)| {
            let (p1, p2) = pc?;
            if !cells[c] {
                return None;
            }
            let (x, y) = cell_centre(g, c);
            let s = p1 * p1 + p2 * p2 + delta;
            Some(h2 * p.gamma.eval(x, y) * (s.powf(0.5 * p.q) / p.q - x * p1 - y * p2))
        })
        .sum()
}

fn zeroth_energy(u: &ScalarField, p: &RCProblem, inner: &[bool]) -> f64 {
    let g = u.grid();
    let h2 = g.h() * g.h();
    g.active_nodes()
        .iter()
        .filter(|&&k| inner[k])
        .map(|&k| {
            let (x, y) = g.xy(k);
            h2 * (p.f0.f)(x, y, u.at(k))
        })
        .sum()
}

/// Discrete `J_{q,eps}` with node quadrature `h^2` (cell quadrature for the
/// cost term) and `delta = eps`.
pub fn jqe_energy(u: &ScalarField, p: &RCProblem, eps: f64) -> EnergyTerms {
    let g = u.grid().clone();
    let h2 = g.h() * g.h();
    let inner = inner_mask(&g);
    let cells = inner_cells(&g, &inner);
    let cost = cost_energy(u, p, eps, &cells);
    let zeroth = zeroth_energy(u, p, &inner);
    let hs = hessian(u, Some(&*p.phi));
    let mut floor = false;
    let mut log_det = 0.0;
    for &k in g.active_nodes() {
        let d = hs.at(k).det_clamped(0.0);
        let d = if d > LOGDET_FLOOR && d.is_finite() {
            d
        } else {
            floor = true;
            LOGDET_FLOOR
        };
        log_det -= eps * h2 * d.ln();
    }
    let ut = lift_utilde(p, &g, eps);
    let penalty: f64 = g
        .active_nodes()
        .iter()
        .filter(|&&k| !inner[k])
        .map(|&k| h2 * (u.at(k) - ut.at(k)).powi(2) / (2.0 * eps))
        .sum();
    EnergyTerms {
        total: cost + zeroth + log_det + penalty,
        cost,
        zeroth,
        log_det,
        penalty,
        floor_activated: floor,
    }
}

/// `h^-2` times the gradient of the log-determinant term of [`jqe_energy`]
/// (the discrete counterpart of `-eps U^{ij} D_ij w` with `w = 1/det`).
/// Requires a positive discrete Hessian determinant at every active node.
pub fn logdet_gradient(u: &ScalarField, p: &RCProblem, eps: f64) -> Result<ScalarField> {
    let g = u.grid().clone();
    let hs = hessian(u, Some(&*p.phi));
    let mut out = vec![0.0; g.len()];
    for &m in g.active_nodes() {
        let hm: Sym2 = hs.at(m);
        let d = hm.det();
        if !(d > 0.0) {
            return Err(Error::NonPositiveDeterminant { node: m, value: d });
        }
        let c = hm.cofactor().scale(1.0 / d);
        let r = hessian_row(&g, m, BoundaryMode::Dirichlet)
            .ok_or_else(|| Error::InvalidGrid(format!("no Hessian stencil at node {m}")))?;
        for (lc, wgt) in [(&r.h11, c.a11), (&r.h12, 2.0 * c.a12), (&r.h22, c.a22)] {
            for &(k, v) in &lc.nodes {
                out[k] -= eps * wgt * v;
            }
        }
    }
    for (k, v) in out.iter_mut().enumerate() {
        if !g.is_active(k) {
            *v = f64::NAN;
        }
    }
    ScalarField::from_values(&g, out)
}

/// [`rc_rhs`] as a pluggable right-hand side.
pub struct RcRhs<'a> {
    pub problem: &'a RCProblem,
    pub eps: f64,
}

impl RhsModel for RcRhs<'_> {
    fn rhs(&self, u: &ScalarField) -> Result<ScalarField> {
        rc_rhs(u, self.problem, self.eps)
    }
}

/// One penalised solve.
#[derive(Debug, Clone, Serialize)]
pub struct RCApproxRun {
    pub eps: f64,
    #[serde(skip)]
    pub u_eps: ScalarField,
    #[serde(skip)]
    pub w_eps: ScalarField,
    /// `int_{Omega \ Omega0} |u - utilde|^2`.
    pub penalty_l2: f64,
    pub energy: EnergyTerms,
    pub convex: bool,
    pub report: SolveReport,
}

/// The Abreu system behind the approximation: `scale_eps = delta = eps`.
pub fn abreu_problem(p: &RCProblem, eps: f64) -> AbreuProblem {
    let fz = p.f0.fz.clone();
    let mut ap = AbreuProblem::new(p.domain.clone(), p.q, eps, p.phi.clone(), p.psi.clone(), fz);
    ap.scale_eps = eps;
    ap
}

/// Solve the penalised system on an `n`-grid.
pub fn solve_rc_approx(p: &RCProblem, eps: f64, n: usize, opts: &NewtonOptions) -> Result<RCApproxRun> {
    let grid = Arc::new(build_grid(&p.domain, n)?);
    solve_rc_approx_on(&grid, p, eps, opts)
}

/// Newton from the lifted target; if that fails, continuation in `eps` from
/// `1/2` by halving, each stage started from the previous solution.
pub fn solve_rc_approx_on(
    grid: &Arc<Grid2D>,
    p: &RCProblem,
    eps: f64,
    opts: &NewtonOptions,
) -> Result<RCApproxRun> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("eps must lie in (0, 1), got {eps}")));
    }
    p.validate(grid)?;
    let stage = |e: f64, u0: &ScalarField| {
        solve_sbvp_newton(&abreu_problem(p, e), &RcRhs { problem: p, eps: e }, u0, opts)
    };
    let direct = stage(eps, &lift_utilde(p, grid, eps));
    let sol = match direct {
        Ok(s) if s.report.converged => s,
        first => {
            log::info!("direct solve at eps {eps} failed; continuing from 1/2");
            let mut e = 0.5f64.max(eps);
            let mut u = lift_utilde(p, grid, e);
            loop {
                let s = stage(e, &u)?;
                if !s.report.converged || e <= eps {
                    break if s.report.converged { s } else { first.unwrap_or(s) };
                }
                u = s.u;
                e = (0.5 * e).max(eps);
            }
        }
    };
    let ut = lift_utilde(p, grid, eps);
    let diff2 = sol.u.sub(&ut).map(|_, v| v * v);
    let penalty_l2 = integrate(&diff2, Region::OmegaMinusOmega0)?;
    Ok(RCApproxRun {
        eps,
        energy: jqe_energy(&sol.u, p, eps),
        convex: assert_convex(&sol.u).0,
        penalty_l2,
        u_eps: sol.u,
        w_eps: sol.w,
        report: sol.report,
    })
}

/// Half-space `u_a + u_b - 2 u_c >= 0` on node values.
#[derive(Debug, Clone, Copy)]
struct SecondDifference {
    a: usize,
    b: usize,
    c: usize,
}

const CONE_DIRS: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (1, -1)];

/// Axis and diagonal second differences at every active node whose two
/// neighbours along the direction are active and which touch a free node.
fn cone_constraints(grid: &Grid2D, free: &[bool]) -> Vec<SecondDifference> {
    let mut out = Vec::new();
    for &c in grid.active_nodes() {
        let (i, j) = grid.ij(c);
        for &(di, dj) in &CONE_DIRS {
            let at = |s: isize| -> Option<usize> {
                let (ii, jj) = (i as isize + s * di, j as isize + s * dj);
                if ii < 0 || jj < 0 || ii as usize >= grid.nx() || jj as usize >= grid.ny() {
                    return None;
                }
                let k = grid.idx(ii as usize, jj as usize);
                grid.is_active(k).then_some(k)
            };
            if let (Some(a), Some(b)) = (at(-1), at(1)) {
                if free[a] || free[b] || free[c] {
                    out.push(SecondDifference { a, b, c });
                }
            }
        }
    }
    out
}

fn cone_value(v: &[f64], s: &SecondDifference) -> f64 {
    v[s.a] + v[s.b] - 2.0 * v[s.c]
}

fn cone_violation(v: &[f64], cons: &[SecondDifference]) -> f64 {
    cons.iter().fold(0.0, |m, s| m.max(-cone_value(v, s)))
}

/// Cyclic Dykstra sweeps onto the intersection of the half-spaces, moving
/// only free nodes.
fn dykstra(v: &mut [f64], cons: &[SecondDifference], free: &[bool], sweeps: usize) {
    let mut lambda = vec![0.0; cons.len()];
    let coef = |s: &SecondDifference| {
        [(s.a, 1.0), (s.b, 1.0), (s.c, -2.0)].map(|(k, c)| (k, if free[k] { c } else { 0.0 }))
    };
    for _ in 0..sweeps {
        for (s, l) in cons.iter().zip(lambda.iter_mut()) {
            let nrm = coef(s);
            let n2: f64 = nrm.iter().map(|e| e.1 * e.1).sum();
            if n2 == 0.0 {
                continue;
            }
            let val = cone_value(v, s) + *l * n2;
            let new_l = if val < 0.0 { val / n2 } else { 0.0 };
            for &(k, c) in &nrm {
                v[k] += (*l - new_l) * c;
            }
            *l = new_l;
        }
    }
}

/// Plain cyclic projections until the violation is at most `tol`.
fn pocs(v: &mut [f64], cons: &[SecondDifference], free: &[bool], tol: f64, max_sweeps: usize) -> f64 {
    for _ in 0..max_sweeps {
        if cone_violation(v, cons) <= tol {
            break;
        }
        for s in cons {
            let val = cone_value(v, s);
            if val >= 0.0 {
                continue;
            }
            let nrm = [(s.a, 1.0), (s.b, 1.0), (s.c, -2.0)];
            let n2: f64 = nrm.iter().filter(|e| free[e.0]).map(|e| e.1 * e.1).sum();
            if n2 == 0.0 {
                continue;
            }
            for &(k, c) in nrm.iter().filter(|e| free[e.0]) {
                v[k] -= val / n2 * c;
            }
        }
    }
    cone_violation(v, cons)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleOptions {
    pub iters: usize,
    /// Dykstra sweeps per projection.
    pub sweeps: usize,
    /// Regularisation inside the cost; `None` picks 0 for `q >= 2` and
    /// `1e-8` otherwise.
    pub delta: Option<f64>,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            iters: 2000,
            sweeps: 50,
            delta: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub u: ScalarField,
    pub objective: f64,
    /// Objective after each accepted step, starting from `phi`.
    pub history: Vec<f64>,
    pub violation: f64,
    pub iterations: usize,
}

/// Projected-gradient minimiser of the inner-region functional over grid
/// functions equal to `phi` off the inner region and discretely convex
/// along axes and diagonals.
pub fn oracle_minimize(p: &RCProblem, n_coarse: usize, iters: usize) -> Result<OracleResult> {
    if n_coarse > 33 {
        return Err(Error::InvalidArgument(format!(
            "oracle grids are limited to n <= 33, got {n_coarse}"
        )));
    }
    let grid = Arc::new(build_grid(&p.domain, n_coarse)?);
    oracle_minimize_on(
        &grid,
        p,
        &OracleOptions {
            iters,
            ..OracleOptions::default()
        },
    )
}

pub fn oracle_minimize_on(grid: &Arc<Grid2D>, p: &RCProblem, opts: &OracleOptions) -> Result<OracleResult> {
    if !p.domain.has_inner() {
        return Err(Error::MissingInnerRegion);
    }
    let delta = opts.delta.unwrap_or(if p.q >= 2.0 { 0.0 } else { 1e-8 });
    let free = inner_mask(grid);
    let cells = inner_cells(grid, &free);
    let cons = cone_constraints(grid, &free);
    let h2 = grid.h() * grid.h();
    let objective = |u: &ScalarField| cost_energy(u, p, delta, &cells) + zeroth_energy(u, p, &free);
    let mut u = ScalarField::from_fn(grid, |x, y| (p.phi)(x, y));
    let scale = 1.0 + u.sup_norm();
    let v0 = cone_violation(u.values(), &cons);
    if v0 > 1e-10 * scale {
        return Err(Error::InfeasibleStart(format!(
            "phi violates discrete convexity by {v0:e}"
        )));
    }
    p.validate(grid)?;
    let mut f = objective(&u);
    let mut history = vec![f];
    let mut best = (f, u.clone());
    let mut t = 1.0;
    let mut iters = 0;
    let feas_tol = 1e-6 * scale;
    while iters < opts.iters {
        let g: Vec<f64> = inner_gradient(&u, p, delta, &free)
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { h2 * v })
            .collect();
        let accepted = loop {
            let mut v: Vec<f64> = u.values().iter().zip(&g).map(|(a, b)| a - t * b).collect();
            dykstra(&mut v, &cons, &free, opts.sweeps);
            let trial = ScalarField::from_values(grid, v)?;
            let ft = objective(&trial);
            let (mut gd, mut d2) = (0.0, 0.0);
            for &k in grid.active_nodes() {
                let d = trial.at(k) - u.at(k);
                gd += g[k] * d;
                d2 += d * d;
            }
            let feasible = cone_violation(trial.values(), &cons) <= feas_tol;
            if feasible && ft < f && ft <= f + gd + d2 / (2.0 * t) {
                break Some((trial, ft, d2.sqrt()));
            }
            t *= 0.5;
            if t < 1e-14 {
                break None;
            }
        };
        let Some((trial, ft, step)) = accepted else {
            break;
        };
        iters += 1;
        u = trial;
        f = ft;
        history.push(f);
        if f < best.0 {
            best = (f, u.clone());
        }
        if step <= 1e-12 * scale {
            break;
        }
        t *= 2.0;
    }
    let mut v = best.1.values().to_vec();
    let violation = pocs(&mut v, &cons, &free, 1e-8, 100_000);
    let u = ScalarField::from_values(grid, v)?;
    let objective = objective(&u);
    log::info!("oracle: {iters} steps, objective {objective:e}, violation {violation:e}");
    Ok(OracleResult {
        u,
        objective,
        history,
        violation,
        iterations: iters,
    })
}

/// Objective used by the oracle at `u`.
pub fn oracle_objective(u: &ScalarField, p: &RCProblem, delta: f64) -> f64 {
    let free = inner_mask(u.grid());
    let cells = inner_cells(u.grid(), &free);
    cost_energy(u, p, delta, &cells) + zeroth_energy(u, p, &free)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub eps: f64,
    pub dist_oracle: f64,
    pub penalty_l2: f64,
    pub energy: f64,
    pub outer_iters: usize,
    pub converged: bool,
    /// Set when the solve failed; the numeric fields are then `NaN`.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub n: usize,
    pub oracle_objective: f64,
    pub rows: Vec<SweepRow>,
}

impl ConvergenceTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("eps,dist_oracle,penalty_l2,energy,outer_iters,converged\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:e},{:e},{:e},{:e},{},{}\n",
                r.eps, r.dist_oracle, r.penalty_l2, r.energy, r.outer_iters, r.converged
            ));
        }
        s
    }

    /// `C = penalty_l2 / eps` of the first row.
    pub fn penalty_constant(&self) -> Option<f64> {
        self.rows.first().map(|r| r.penalty_l2 / r.eps)
    }

    /// Every row has `penalty_l2 <= factor * C * eps`.
    pub fn penalty_within(&self, factor: f64) -> bool {
        let Some(c) = self.penalty_constant() else {
            return false;
        };
        self.rows.iter().all(|r| r.penalty_l2 <= factor * c * r.eps)
    }

    /// `dist_oracle` never rises by more than `slack` (relative).
    pub fn dist_nonincreasing(&self, slack: f64) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].dist_oracle <= (1.0 + slack) * w[0].dist_oracle)
    }
}

/// Nodes whose 5x5 block lies in the inner region.
pub fn compact_inner_nodes(grid: &Grid2D) -> Vec<usize> {
    let inner = inner_mask(grid);
    grid.active_nodes()
        .iter()
        .copied()
        .filter(|&k| {
            let (i, j) = grid.ij(k);
            (-2isize..=2).all(|di| {
                (-2isize..=2).all(|dj| {
                    let (ii, jj) = (i as isize + di, j as isize + dj);
                    ii >= 0
                        && jj >= 0
                        && (ii as usize) < grid.nx()
                        && (jj as usize) < grid.ny()
                        && inner[grid.idx(ii as usize, jj as usize)]
                })
            })
        })
        .collect()
}

/// Sup distance over [`compact_inner_nodes`] of `u`'s grid; `oracle` is
/// interpolated when it lives on a different grid.
pub fn distance_to_oracle(u: &ScalarField, oracle: &ScalarField) -> f64 {
    let g = u.grid();
    let same = Arc::ptr_eq(g, oracle.grid())
        || (g.nx() == oracle.grid().nx() && g.ny() == oracle.grid().ny() && g.bbox() == oracle.grid().bbox());
    compact_inner_nodes(g)
        .into_iter()
        .map(|k| {
            let o = if same {
                oracle.at(k)
            } else {
                let (x, y) = g.xy(k);
                crate::duality::interpolate(oracle, x, y).unwrap_or(f64::NAN)
            };
            (u.at(k) - o).abs()
        })
        .fold(0.0, f64::max)
}

/// Sweep with default Newton options and an oracle on the same grid
/// (`n <= 33`) or on a 33-grid.
pub fn epsilon_sweep(p: &RCProblem, eps_list: &[f64], n: usize) -> Result<ConvergenceTable> {
    let oracle = oracle_minimize(p, n.min(33), OracleOptions::default().iters)?;
    epsilon_sweep_with(p, eps_list, n, &NewtonOptions::default(), &oracle)
}

/// Rows run as independent jobs and come back in `eps_list` order.
pub fn epsilon_sweep_with(
    p: &RCProblem,
    eps_list: &[f64],
    n: usize,
    opts: &NewtonOptions,
    oracle: &OracleResult,
) -> Result<ConvergenceTable> {
    Ok(sweep_runs(p, eps_list, n, opts, oracle)?.0)
}

/// [`epsilon_sweep_with`] that also hands back the individual runs.
pub fn sweep_runs(
    p: &RCProblem,
    eps_list: &[f64],
    n: usize,
    opts: &NewtonOptions,
    oracle: &OracleResult,
) -> Result<(ConvergenceTable, Vec<Result<RCApproxRun>>)> {
    if eps_list.is_empty() || eps_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidArgument("eps_list must be strictly decreasing".into()));
    }
    let grid = Arc::new(build_grid(&p.domain, n)?);
    let runs = crate::par::map_slice(eps_list, |&eps| solve_rc_approx_on(&grid, p, eps, opts));
    let rows = eps_list
        .iter()
        .zip(&runs)
        .map(|(&eps, r)| match r {
            Ok(r) => SweepRow {
                eps,
                dist_oracle: distance_to_oracle(&r.u_eps, &oracle.u),
                penalty_l2: r.penalty_l2,
                energy: r.energy.total,
                outer_iters: r.report.outer_iters,
                converged: r.report.converged,
                error: None,
            },
            Err(e) => SweepRow {
                eps,
                dist_oracle: f64::NAN,
                penalty_l2: f64::NAN,
                energy: f64::NAN,
                outer_iters: 0,
                converged: false,
                error: Some(e.to_string()),
            },
        })
        .collect();
    Ok((
        ConvergenceTable {
            n,
            oracle_objective: oracle.objective,
            rows,
        },
        runs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn classic_grid(n: usize) -> Arc<Grid2D> {
        Arc::new(build_grid(&RCProblem::classic().domain, n).unwrap())
    }

    fn centred_quad() -> Fn2 {
        Arc::new(|x, y| 0.5 * ((x - 1.5f64).powi(2) + (y - 1.5f64).powi(2)))
    }

    #[test]
    fn lift_examples() {
        let p = RCProblem::classic();
        let g = classic_grid(17);
        assert_eq!(lift_coefficient(1.0), 1.0);
        assert!((lift_coefficient(2f64.powi(-12)) - 0.5).abs() < 1e-15);
        let u1 = lift_utilde(&p, &g, 1.0);
        for &k in g.active_nodes() {
            let (x, y) = g.xy(k);
            assert!((u1.at(k) - (p.domain.rho(x, y).exp() - 1.0)).abs() < 1e-15);
        }
        for &(_, _, (x, y)) in g.crossings().iter() {
            let r = p.domain.rho(x, y);
            assert!((0.3f64.powf(1.0 / 12.0) * (r.exp() - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn rhs_penalty_vanishes_on_lift_and_quadratic_gives_one() {
        let p = RCProblem::classic();
        let g = classic_grid(33);
        let eps = 0.1;
        let ut = lift_utilde(&p, &g, eps);
        let r = rc_rhs(&ut, &p, eps).unwrap();
        let inner = inner_mask(&g);
        for &k in g.active_nodes() {
            if !inner[k] {
                assert_eq!(r.at(k), 0.0);
            }
        }
        let u = ScalarField::from_fn(&g, |x, y| 0.5 * (x * x + y * y));
        let r = rc_rhs(&u, &p, 0.0).unwrap();
        for &k in g.active_nodes() {
            if inner[k] {
                assert!((r.at(k) - 1.0).abs() < 1e-10, "{}", r.at(k));
            }
        }
    }

    #[test]
    fn energy_examples() {
        let g = classic_grid(33);
        let mut p = RCProblem::classic();
        p.gamma = Gamma::Const(0.0);
        p.f0 = F0::zero();
        let eps = 0.1;
        let ut = lift_utilde(&p, &g, eps);
        let e = jqe_energy(&ut, &p, eps);
        assert_eq!(e.cost, 0.0);
        assert_eq!(e.zeroth, 0.0);
        assert_eq!(e.penalty, 0.0);
        assert_eq!(e.total, e.log_det);
        assert!(!e.floor_activated);

        let p = RCProblem::classic();
        let u = ScalarField::from_fn(&g, |x, y| 0.5 * (x * x + y * y));
        let e = jqe_energy(&u, &p, 0.0);
        // cell and node quadratures of r^2/2 over the inner square differ at O(h)
        assert!((e.cost + e.zeroth).abs() < 4.0 * g.h(), "{}", e.cost + e.zeroth);
        assert!(e.cost < 0.0 && e.zeroth > 0.0);
    }

    #[test]
    fn gradient_of_energy() {
        let g = classic_grid(17);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(q, eps) in &[(1.5, 0.1), (2.0, 0.01), (3.0, 0.01)] {
            let mut p = RCProblem::classic();
            p.q = q;
            let base = solve_rc_approx_on(&g, &p, eps, &NewtonOptions::default()).unwrap().u_eps;
            let u = base.map(|k, v| {
                let (x, y) = g.xy(k);
                let r = p.domain.rho(x, y);
                v + 0.01 * r * r * (x + 2.0 * y).sin()
            });
            let an = rc_rhs(&u, &p, eps).unwrap().add(&logdet_gradient(&u, &p, eps).unwrap());
            let h2 = g.h() * g.h();
            for _ in 0..3 {
                let vals: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let v = ScalarField::from_values(&g, vals).unwrap();
                let s = 1e-7;
                let e = |t: f64| jqe_energy(&u.add(&v.scale(t)), &p, eps).total;
                let fd = (e(s) - e(-s)) / (2.0 * s);
                let dir: f64 = g.active_nodes().iter().map(|&k| h2 * an.at(k) * v.at(k)).sum();
                assert!((fd - dir).abs() <= 1e-4 * dir.abs().max(1e-3), "q {q} eps {eps}: {fd} {dir}");
            }
        }
    }

    #[test]
    fn cost_hessian_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &q in &[1.2, 1.5, 2.0, 3.0, 4.5] {
            for _ in 0..200 {
                let p = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
                let eps = 10f64.powf(rng.gen_range(-4.0..0.0));
                let gm = rng.gen_range(0.1..2.0);
                let (lo, hi) = cost_hessian(p, q, eps, gm).eigenvalues();
                let a = gm * (p.0 * p.0 + p.1 * p.1 + eps).powf(0.5 * (q - 2.0));
                let tol = 1e-12 * a;
                assert!(lo >= 1f64.min(q - 1.0) * a - tol && hi <= 1f64.max(q - 1.0) * a + tol);
            }
        }
    }

    #[test]
    fn validation_gates() {
        let g = classic_grid(17);
        let mut p = RCProblem::classic();
        p.q = 3.0;
        p.gamma = Gamma::Affine(1.0, 0.1, 0.0);
        let e = p.validate(&g).unwrap_err().to_string();
        assert!(e.contains("gamma must be constant for q>2"), "{e}");
        p.q = 2.0;
        assert!(p.validate(&g).is_ok());
        let mut p = RCProblem::classic();
        p.f0 = F0 {
            f: Arc::new(|_, _, z| -z * z),
            fz: Arc::new(|_, _, z| -2.0 * z),
            label: "concave".into(),
        };
        assert!(p.validate(&g).is_err());
        let mut p = RCProblem::classic();
        p.phi = Arc::new(|x, _| -x * x);
        assert!(p.validate(&g).is_err());
        let mut p = RCProblem::classic();
        p.domain = ConvexDomain::disk(1.5, 1.5, 2.0);
        assert!(matches!(p.validate(&g), Err(Error::MissingInnerRegion)));
    }

    #[test]
    fn oracle_tracking_returns_phi() {
        let mut p = RCProblem::classic();
        p.gamma = Gamma::Const(0.0);
        p.phi = centred_quad();
        p.f0 = F0::tracking(centred_quad());
        let o = oracle_minimize(&p, 17, 100).unwrap();
        let phi = ScalarField::from_fn(o.u.grid(), |x, y| (p.phi)(x, y));
        assert!(o.u.dist_sup(&phi) < 1e-12);
        assert!(o.objective.abs() < 1e-20);
    }

    #[test]
    fn oracle_linear_pushes_below_phi() {
        let mut p = RCProblem::classic();
        p.gamma = Gamma::Const(0.0);
        p.phi = centred_quad();
        p.f0 = F0::linear(Gamma::Const(1.0));
        let o = oracle_minimize(&p, 17, 400).unwrap();
        let g = o.u.grid().clone();
        let phi = ScalarField::from_fn(&g, |x, y| (p.phi)(x, y));
        assert!(o.u.values().iter().zip(phi.values()).all(|(a, b)| a.is_nan() || *a <= b + 1e-12));
        assert!(o.objective < o.history[0]);
        assert!(o.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(o.violation <= 1e-8);
        let free = inner_mask(&g);
        for &k in g.active_nodes() {
            if !free[k] {
                assert_eq!(o.u.at(k), phi.at(k));
            }
        }
    }

    #[test]
    fn oracle_rejects_nonconvex_phi() {
        let mut p = RCProblem::classic();
        p.phi = Arc::new(|x, y| -(x * x + y * y));
        assert!(matches!(oracle_minimize(&p, 17, 10), Err(Error::InfeasibleStart(_))));
        assert!(oracle_minimize(&p, 65, 10).is_err());
    }

    #[test]
    fn classic_oracle_is_zero() {
        let p = RCProblem::classic();
        let a = oracle_minimize(&p, 17, 200).unwrap();
        let b = oracle_minimize(&p, 25, 200).unwrap();
        assert_eq!(a.u.sup_norm(), 0.0);
        assert_eq!(b.objective, a.objective);
    }

    #[test]
    fn classic_solve_is_convex_with_boundary_trace() {
        let p = RCProblem::classic();
        let run = solve_rc_approx(&p, 0.1, 17, &NewtonOptions::default()).unwrap();
        assert!(run.report.converged, "{}", run.report.message);
        assert!(run.convex);
        assert!(run.penalty_l2 >= 0.0);
        assert!(run.report.final_r2 < 1e-12);
        let e = solve_rc_approx(&p, 1.0, 17, &NewtonOptions::default()).unwrap_err();
        assert!(matches!(e, Error::InvalidArgument(_)));
    }

    #[test]
    fn csv_layout() {
        let t = ConvergenceTable {
            n: 9,
            oracle_objective: 0.0,
            rows: vec![SweepRow {
                eps: 0.1,
                dist_oracle: 0.5,
                penalty_l2: 0.01,
                energy: 1.0,
                outer_iters: 4,
                converged: true,
                error: None,
            }],
        };
        let csv = t.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("eps,dist_oracle,penalty_l2,energy,outer_iters,converged"));
        assert_eq!(lines.next(), Some("1e-1,5e-1,1e-2,1e0,4,true"));
        assert!(t.penalty_within(1.0) && t.dist_nonincreasing(0.0));
    }
}
