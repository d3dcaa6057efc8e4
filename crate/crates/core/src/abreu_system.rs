//! Second boundary value problem for the singular Abreu system
//!
//! ```text
//! scale_eps * U^{ij} D_ij w = -div((|Du|^2 + delta)^{(q-2)/2} Du) + F0_z(x, u)
//! w = (det D^2 u)^{-1}
//! u = phi, w = psi on the boundary
//! ```
//!
//! solved by damped Picard iteration over an LMA solve for `w` and a
//! Monge–Ampère solve for `u`.

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{build_grid, gradient, hessian, ConvexDomain, Grid2D, ScalarField};
use crate::linearized_ma::{assemble_lma, f0z_term, qlap_rhs, solve_lma};
use crate::monge_ampere::{solve_ma, solve_ma_from, MAOptions};

pub type Fn2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type Fn3 = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct AbreuProblem {
    pub domain: ConvexDomain,
    pub q: f64,
    pub delta: f64,
    pub phi: Fn2,
    pub psi: Fn2,
    pub f0z: Fn3,
    /// Multiplies the LMA side; 1 for the plain system.
    pub scale_eps: f64,
}

impl std::fmt::Debug for AbreuProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AbreuProblem")
            .field("domain", &self.domain.label())
            .field("q", &self.q)
            .field("delta", &self.delta)
            .field("scale_eps", &self.scale_eps)
            .finish()
    }
}

impl AbreuProblem {
    pub fn new(domain: ConvexDomain, q: f64, delta: f64, phi: Fn2, psi: Fn2, f0z: Fn3) -> Self {
        Self {
            domain,
            q,
            delta,
            phi,
            psi,
            f0z,
            scale_eps: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 1.0) {
            return Err(Error::InvalidArgument(format!("q must exceed 1, got {}", self.q)));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::InvalidArgument("delta must be nonnegative".into()));
        }
        if self.q < 2.0 && self.delta == 0.0 {
            return Err(Error::InvalidArgument("delta must be positive for q<2".into()));
        }
        if !(self.scale_eps > 0.0) {
            return Err(Error::InvalidArgument("scale_eps must be positive".into()));
        }
        Ok(())
    }

    /// Infimum of `psi` over the boundary crossings of `grid`.
    pub fn inf_psi(&self, grid: &Grid2D) -> f64 {
        grid.crossings()
            .iter()
            .map(|&(_, _, (x, y))| (self.psi)(x, y))
            .fold(f64::INFINITY, f64::min)
    }

    fn mean_psi(&self, grid: &Grid2D) -> f64 {
        let c = grid.crossings();
        c.iter().map(|&(_, _, (x, y))| (self.psi)(x, y)).sum::<f64>() / c.len() as f64
    }
}

/// Right-hand side `f(u)` of the LMA equation (before division by
/// `scale_eps`).
pub trait RhsModel: Sync {
    fn rhs(&self, u: &ScalarField) -> Result<ScalarField>;
}

/// `qlap_rhs + f0z_term` for an [`AbreuProblem`].
pub struct AbreuRhs<'a>(pub &'a AbreuProblem);

impl RhsModel for AbreuRhs<'_> {
    fn rhs(&self, u: &ScalarField) -> Result<ScalarField> {
        let p = self.0;
        let ql = qlap_rhs(u, p.q, p.delta, Some(&*p.phi))?;
        Ok(ql.add(&f0z_term(u, &*p.f0z)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AbreuOptions {
    pub tol: f64,
    pub max_outer: usize,
    /// Initial under-relaxation.
    pub tau: f64,
    /// Smallest relaxation reached by halving.
    pub min_tau: f64,
    /// `w` is floored at this fraction of `inf psi`.
    pub w_floor_frac: f64,
    /// Iterations without a new best residual before giving up.
    pub stall_window: usize,
    pub ma: MAOptions,
}

impl Default for AbreuOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_outer: 200,
            tau: 0.5,
            min_tau: 1.0 / 64.0,
            w_floor_frac: 1e-6,
            stall_window: 25,
            ma: MAOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AprioriChecks {
    pub sup_abs_u: f64,
    pub sup_grad_u: f64,
    pub min_det: f64,
    pub max_det: f64,
    pub min_w_interior: f64,
    pub min_w_boundary: f64,
    pub grad_bound_ok: bool,
    /// Node where `sup_grad_u` is attained.
    pub sup_grad_node: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub outer_iters: usize,
    pub residual_history: Vec<(f64, f64)>,
    pub damping_used: f64,
    pub apriori: Option<AprioriChecks>,
    /// Seconds; kept out of the serialised report so reruns compare equal.
    #[serde(skip)]
    pub wallclock: f64,
    pub converged: bool,
    pub floor_activated: bool,
    pub final_r1: f64,
    pub final_r2: f64,
    pub message: String,
}

impl SolveReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn last_residual(&self) -> f64 {
        self.residual_history
            .last()
            .map(|&(a, b)| a.max(b))
            .unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone)]
pub struct AbreuSolution {
    pub u: ScalarField,
    pub w: ScalarField,
    pub report: SolveReport,
}

impl AbreuSolution {
    pub fn grid(&self) -> &Arc<Grid2D> {
        self.u.grid()
    }
}

struct Update {
    u_new: ScalarField,
    w_new: ScalarField,
    floor_hit: bool,
}

struct Picard<'a> {
    grid: Arc<Grid2D>,
    p: &'a AbreuProblem,
    rhs: &'a dyn RhsModel,
    opts: AbreuOptions,
    floor: f64,
}

impl Picard<'_> {
    fn lma_w(&self, u: &ScalarField) -> Result<(ScalarField, bool)> {
        let op = assemble_lma(u, Some(&*self.p.phi))?;
        let f = self.rhs.rhs(u)?.scale(1.0 / self.p.scale_eps);
        let w = solve_lma(&op, &f, &*self.p.psi)?;
        let mut hit = false;
        let floor = self.floor;
        let w = w.map(|_, v| {
            if v < floor {
                floor
            } else {
                v
            }
        });
        for v in w.active_values() {
            if v <= floor {
                hit = true;
            }
        }
        Ok((w, hit))
    }

    fn map(&self, u: &ScalarField) -> Result<Update> {
        let (w_new, floor_hit) = self.lma_w(u)?;
        let g = w_new.map(|_, v| 1.0 / v);
        let ma = solve_ma_from(&self.grid, &g, &*self.p.phi, u, &self.opts.ma)?.into_result()?;
        Ok(Update {
            u_new: ma.u,
            w_new,
            floor_hit,
        })
    }
}

/// Solve the system on an `n`-point grid with the default right-hand side.
pub fn solve_sbvp(p: &AbreuProblem, n: usize, opts: &AbreuOptions) -> Result<AbreuSolution> {
    let grid = Arc::new(build_grid(&p.domain, n)?);
    solve_sbvp_on(&grid, p, &AbreuRhs(p), opts)
}

/// Damped Picard iteration with a pluggable right-hand side.
///
/// A trial relaxation that raises the joint residual is retried with half
/// the step until `min_tau`; after `stall_window` iterations without a new
/// best residual the best iterate is returned with `converged = false`.
pub fn solve_sbvp_on(
    grid: &Arc<Grid2D>,
    p: &AbreuProblem,
    rhs: &dyn RhsModel,
    opts: &AbreuOptions,
) -> Result<AbreuSolution> {
    let start = Instant::now();
    p.validate()?;
    let inf_psi = p.inf_psi(grid);
    if !(inf_psi > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "psi must be positive on the boundary (inf = {inf_psi})"
        )));
    }
    let pic = Picard {
        grid: grid.clone(),
        p,
        rhs,
        opts: *opts,
        floor: opts.w_floor_frac * inf_psi,
    };
    let g0 = ScalarField::constant(grid, 1.0 / p.mean_psi(grid));
    let mut u = solve_ma(grid, &g0, &*p.phi, &opts.ma)?.into_result()?.u;
    let mut upd = pic.map(&u)?;
    let mut w = upd.w_new.clone();
    let mut r = (u.dist_sup(&upd.u_new), 0.0);
    let joint = |r: (f64, f64)| r.0.max(r.1);
    let mut history = vec![r];
    let mut tau = opts.tau;
    let mut best = (joint(r), u.clone(), w.clone(), upd.u_new.clone());
    let mut since_best = 0;
    let mut iters = 0;
    let mut converged = joint(r) <= opts.tol;
    let mut message = String::new();
    while !converged && iters < opts.max_outer {
        let u_c = u.lerp(&upd.u_new, tau);
        let w_c = w.lerp(&upd.w_new, tau);
        let next = pic.map(&u_c);
        let (next, r_c) = match next {
            Ok(nx) => {
                let r_c = (u_c.dist_sup(&nx.u_new), w_c.dist_sup(&nx.w_new));
                (Some(nx), r_c)
            }
            Err(e) => {
                log::debug!("outer trial failed: {e}");
                (None, (f64::INFINITY, f64::INFINITY))
            }
        };
        if joint(r_c) > joint(r) && tau > opts.min_tau {
            tau *= 0.5;
            log::debug!("outer residual rose to {:e}; tau -> {tau}", joint(r_c));
            continue;
        }
        let Some(nx) = next else {
            message = "subproblem failed at minimum relaxation".into();
            break;
        };
        iters += 1;
        u = u_c;
        w = w_c;
        upd = nx;
        r = r_c;
        history.push(r);
        log::debug!("outer {iters}: r_u {:e} r_w {:e} tau {tau}", r.0, r.1);
        if joint(r) < best.0 {
            best = (joint(r), u.clone(), w.clone(), upd.u_new.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        converged = joint(r) <= opts.tol;
        if since_best >= opts.stall_window {
            message = Error::OuterStall {
                iters,
                residual: best.0,
            }
            .to_string();
            break;
        }
    }
    if !converged && message.is_empty() {
        message = format!("max_outer reached (residual {:e})", best.0);
    }
    let u_final = if converged { upd.u_new.clone() } else { best.3.clone() };
    let (w_final, floor_hit) = pic.lma_w(&u_final)?;
    let (r1, r2) = abreu_residual(&u_final, &w_final, p, rhs)?;
    let mut report = SolveReport {
        outer_iters: iters,
        residual_history: history,
        damping_used: tau,
        apriori: None,
        wallclock: 0.0,
        converged,
        floor_activated: floor_hit || (converged && upd.floor_hit),
        final_r1: r1.sup_norm(),
        final_r2: r2.sup_norm(),
        message,
    };
    let mut sol = AbreuSolution {
        u: u_final,
        w: w_final,
        report: report.clone(),
    };
    report.apriori = Some(apriori_check(&sol, p));
    report.wallclock = start.elapsed().as_secs_f64();
    sol.report = report;
    Ok(sol)
}

/// `r1 = scale_eps L_u w - f(u)`, `r2 = w det+ D^2 u - 1`.
pub fn abreu_residual(
    u: &ScalarField,
    w: &ScalarField,
    p: &AbreuProblem,
    rhs: &dyn RhsModel,
) -> Result<(ScalarField, ScalarField)> {
    let op = assemble_lma(u, Some(&*p.phi))?;
    let lw = op.apply(w, Some(&*p.psi));
    let f = rhs.rhs(u)?;
    let r1 = lw.scale(p.scale_eps).sub(&f);
    let hs = hessian(u, Some(&*p.phi));
    let kappa = MAOptions::default().clamp;
    let r2 = w.map(|k, wv| wv * hs.at(k).det_clamped(kappa) - 1.0);
    Ok((r1, r2))
}

/// Lower bound for `dist(x, boundary)` from `|rho| / max |grad rho|`.
fn dist_lower_bound(grid: &Grid2D) -> Vec<f64> {
    let dom = grid.domain();
    let b = dom.bbox();
    let m = 200;
    let e = 1e-6 * b.width().max(b.height());
    let mut lip: f64 = 0.0;
    for a in 0..=m {
        for c in 0..=m {
            let x = b.xmin + b.width() * a as f64 / m as f64;
            let y = b.ymin + b.height() * c as f64 / m as f64;
            let gx = (dom.rho(x + e, y) - dom.rho(x - e, y)) / (2.0 * e);
            let gy = (dom.rho(x, y + e) - dom.rho(x, y - e)) / (2.0 * e);
            lip = lip.max((gx * gx + gy * gy).sqrt());
        }
    }
    let lip = 1.01 * lip;
    (0..grid.len())
        .map(|k| {
            let (x, y) = grid.xy(k);
            dom.rho(x, y).abs() / lip
        })
        .collect()
}

/// A priori quantities of a solution, including the gradient bound
/// `|Du(x)| <= (max phi - u(x)) / dist(x, boundary)` at INTERIOR nodes.
pub fn apriori_check(sol: &AbreuSolution, p: &AbreuProblem) -> AprioriChecks {
    let grid = sol.grid();
    let u = &sol.u;
    let du = gradient(u, Some(&*p.phi));
    let hs = hessian(u, Some(&*p.phi));
    let kappa = MAOptions::default().clamp;
    let max_phi = grid
        .crossings()
        .iter()
        .map(|&(_, _, (x, y))| (p.phi)(x, y))
        .fold(f64::NEG_INFINITY, f64::max);
    let dist = dist_lower_bound(grid);
    let h = grid.h();
    let mut sup_grad = 0.0;
    let mut sup_grad_node = 0;
    let (mut min_det, mut max_det) = (f64::INFINITY, f64::NEG_INFINITY);
    for &k in grid.active_nodes() {
        let (a, b) = du.at(k);
        let gn = (a * a + b * b).sqrt();
        if gn > sup_grad {
            sup_grad = gn;
            sup_grad_node = k;
        }
        let d = hs.at(k).det_clamped(kappa);
        min_det = min_det.min(d);
        max_det = max_det.max(d);
    }
    let mut ok = true;
    for k in grid.interior_nodes() {
        let (a, b) = du.at(k);
        let bound = (max_phi - u.at(k)) / dist[k];
        if (a * a + b * b).sqrt() > bound + 10.0 * h * h {
            ok = false;
        }
    }
    let min_w_interior = grid
        .interior_nodes()
        .map(|k| sol.w.at(k))
        .fold(f64::INFINITY, f64::min);
    let min_w_boundary = grid
        .boundary_adjacent_nodes()
        .map(|k| sol.w.at(k))
        .fold(f64::INFINITY, f64::min);
    AprioriChecks {
        sup_abs_u: u.sup_norm(),
        sup_grad_u: sup_grad,
        min_det,
        max_det,
        min_w_interior,
        min_w_boundary,
        grad_bound_ok: ok,
        sup_grad_node,
    }
}

/// Options for [`solve_sbvp_newton`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NewtonOptions {
    /// Stop when `sup |r1| <= tol * max(1, sup |f(u0)|)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Forward-difference step, relative to `1 + sup |u|`.
    pub fd_step: f64,
    /// Smallest line-search step.
    pub min_step: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 60,
            fd_step: 1e-7,
            min_step: 1.0 / 1024.0,
        }
    }
}

/// `w = 1 / det D^2 u` at every active node; error where `det <= 0`.
pub fn reciprocal_det(u: &ScalarField, phi: &(dyn Fn(f64, f64) -> f64 + Sync)) -> Result<ScalarField> {
    let hs = hessian(u, Some(phi));
    let g = u.grid();
    for &k in g.active_nodes() {
        let d = hs.at(k).det();
        if !(d > 0.0) {
            return Err(Error::NonPositiveDeterminant { node: k, value: d });
        }
    }
    Ok(u.map(|k, _| 1.0 / hs.at(k).det()))
}

/// `scale_eps L_u (1/det D^2 u) - f(u)` over the active unknowns.
pub fn eliminated_residual(u: &ScalarField, p: &AbreuProblem, rhs: &dyn RhsModel) -> Result<Vec<f64>> {
    let w = reciprocal_det(u, &*p.phi)?;
    let op = assemble_lma(u, Some(&*p.phi))?;
    let lw = op.apply(&w, Some(&*p.psi));
    let f = rhs.rhs(u)?;
    let r = lw.scale(p.scale_eps).sub(&f).to_unknowns();
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite residual".into()));
    }
    Ok(r)
}

/// Forward-difference Jacobian of [`eliminated_residual`], one residual
/// evaluation per colour of the 5x5 lattice colouring.
fn colored_jacobian(
    u: &ScalarField,
    r0: &[f64],
    p: &AbreuProblem,
    rhs: &dyn RhsModel,
    step: f64,
) -> Result<crate::linalg::CsrMatrix> {
    let g = u.grid().clone();
    let n = g.n_unknowns();
    let colour = |k: usize| {
        let (i, j) = g.ij(k);
        (i % 5) + 5 * (j % 5)
    };
    let cols: Vec<Vec<(usize, f64)>> = crate::par::map_range(25, |c| -> Result<Vec<(usize, f64)>> {
        let mut up = u.clone();
        let mut any = false;
        for a in 0..n {
            let k = g.node_of_unknown(a);
            if colour(k) == c {
                up.set(k, u.at(k) + step);
                any = true;
            }
        }
        if !any {
            return Ok(Vec::new());
        }
        let r1 = eliminated_residual(&up, p, rhs)?;
        Ok(r1.iter().zip(r0).map(|(a, b)| (a - b) / step).enumerate().collect())
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (a, row) in rows.iter_mut().enumerate() {
        let (i, j) = g.ij(g.node_of_unknown(a));
        for di in -2isize..=2 {
            for dj in -2isize..=2 {
                let (ii, jj) = (i as isize + di, j as isize + dj);
                if ii < 0 || jj < 0 || ii as usize >= g.nx() || jj as usize >= g.ny() {
                    continue;
                }
                let k = g.idx(ii as usize, jj as usize);
                if let Some(b) = g.unknown_index(k) {
                    let v = cols[colour(k)][a].1;
                    if v != 0.0 {
                        row.push((b, v));
                    }
                }
            }
        }
        row.sort_by_key(|e| e.0);
    }
    Ok(crate::linalg::CsrMatrix::from_rows(rows))
}

/// Newton's method on the system with `w = 1/det D^2 u` eliminated, from the
/// strictly convex start `u0`. Steps are halved until the residual 2-norm
/// decreases and the iterate keeps a positive discrete determinant.
pub fn solve_sbvp_newton(
    p: &AbreuProblem,
    rhs: &dyn RhsModel,
    u0: &ScalarField,
    opts: &NewtonOptions,
) -> Result<AbreuSolution> {
    let start = Instant::now();
    p.validate()?;
    let grid = u0.grid().clone();
    let norm2 = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut u = u0.clone();
    let mut r = eliminated_residual(&u, p, rhs)?;
    let scale = rhs.rhs(u0)?.sup_norm().max(1.0);
    let mut history = vec![(crate::linalg::sup_norm(&r), 0.0)];
    let mut converged = crate::linalg::sup_norm(&r) <= opts.tol * scale;
    let mut iters = 0;
    let mut last_step = 1.0;
    let mut message = String::new();
    while !converged && iters < opts.max_iter {
        let step = opts.fd_step * (1.0 + u.sup_norm());
        let jac = colored_jacobian(&u, &r, p, rhs, step)?;
        let lu = crate::linalg::BandedLu::factor(&jac).map_err(|row| crate::monge_ampere::singular_at(&grid, row))?;
        let d = lu.solve(&r);
        let n0 = norm2(&r);
        let mut t = 1.0;
        let accepted = loop {
            let x: Vec<f64> = u.to_unknowns().iter().zip(&d).map(|(a, b)| a - t * b).collect();
            let trial = ScalarField::from_unknowns(&grid, &x);
            if let Ok(rt) = eliminated_residual(&trial, p, rhs) {
                if norm2(&rt) <= (1.0 - 1e-4 * t) * n0 {
                    break Some((trial, rt));
                }
            }
            t *= 0.5;
            if t < opts.min_step {
                break None;
            }
        };
        let Some((un, rn)) = accepted else {
            message = format!("line search failed at iteration {iters}");
            break;
        };
        iters += 1;
        last_step = t;
        u = un;
        r = rn;
        let rs = crate::linalg::sup_norm(&r);
        history.push((rs, 0.0));
        log::debug!("newton {iters}: sup r {rs:e} step {t}");
        converged = rs <= opts.tol * scale;
    }
    if !converged && message.is_empty() {
        message = format!("max_iter reached (residual {:e})", history.last().map_or(f64::NAN, |h| h.0));
    }
    let w = reciprocal_det(&u, &*p.phi)?;
    let (r1, r2) = abreu_residual(&u, &w, p, rhs)?;
    let mut sol = AbreuSolution {
        u,
        w,
        report: SolveReport {
            outer_iters: iters,
            residual_history: history,
            damping_used: last_step,
            apriori: None,
            wallclock: 0.0,
            converged,
            floor_activated: false,
            final_r1: r1.sup_norm(),
            final_r2: r2.sup_norm(),
            message,
        },
    };
    sol.report.apriori = Some(apriori_check(&sol, p));
    sol.report.wallclock = start.elapsed().as_secs_f64();
    Ok(sol)
}
