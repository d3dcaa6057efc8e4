//! Linearised Monge–Ampère operator `L_u w = U^{ij} D_ij w` and the
//! singular right-hand sides built from `u`.
//!
//! At nodes whose 3x3 block is active the operator is assembled in flux form
//! from the staggered cofactor of `u` (whose rows are exactly divergence
//! free, so flux and nondivergence forms coincide on quadratics up to an
//! `O(h^2)` coefficient correction). Remaining rows use the node cofactor with
//! Shortley–Weller stencils and `psi` at the boundary crossings.

use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::geometry::stencil::{gradient_row, hessian_row, BoundaryMode};
use crate::geometry::{
    cofactor, hessian, BoundaryData, Grid2D, ScalarField, StaggeredCofactor, Sym2, SymMatField,
};
use crate::linalg::{BandedLu, CsrBuilder, CsrMatrix};
use crate::monge_ampere::singular_at;

/// Assembled operator over the active unknowns.
pub struct LMAOperator {
    grid: Arc<Grid2D>,
    coef: SymMatField,
    stag: StaggeredCofactor,
    flux_row: Vec<bool>,
    matrix: CsrMatrix,
    boundary: Vec<Vec<((f64, f64), f64)>>,
    lu: OnceLock<std::result::Result<BandedLu, usize>>,
}

impl std::fmt::Debug for LMAOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LMAOperator")
            .field("unknowns", &self.matrix.n())
            .field("nnz", &self.matrix.nnz())
            .finish()
    }
}

/// Assemble `L_u`. `bc` is the boundary data of `u` (used for the node
/// cofactor at boundary-adjacent rows).
pub fn assemble_lma(u: &ScalarField, bc: BoundaryData<'_>) -> Result<LMAOperator> {
    let grid = u.grid().clone();
    let hs = hessian(u, bc);
    let mut scale: f64 = 1.0;
    for &k in grid.active_nodes() {
        let m = hs.at(k);
        if m.is_finite() {
            scale = scale.max(m.eigenvalues().1.abs());
        }
    }
    for k in grid.interior_nodes() {
        let m = hs.at(k);
        let (lo, _) = m.eigenvalues();
        if !m.is_finite() || lo < -1e-8 * scale {
            return Err(Error::NonConvexCoefficient { node: k, min_eig: lo });
        }
    }
    let coef = cofactor(&hs);
    let stag = StaggeredCofactor::new(u);
    let h = grid.h();
    let ih2 = 1.0 / (h * h);
    let rows = crate::par::map_slice(grid.active_nodes(), |&k| {
        let idx = |m: usize| grid.unknown_index(m).expect("active");
        if grid.has_full_neighborhood(k) {
            let (i, j) = grid.ij(k);
            let mut e: Vec<(usize, f64)> = Vec::with_capacity(9);
            let mut push = |ii: usize, jj: usize, c: f64| e.push((idx(grid.idx(ii, jj)), c));
            let (ue, uw) = (stag.u11_at(i, j), stag.u11_at(i - 1, j));
            let (un, us) = (stag.u22_at(i, j), stag.u22_at(i, j - 1));
            push(i + 1, j, ue * ih2);
            push(i - 1, j, uw * ih2);
            push(i, j + 1, un * ih2);
            push(i, j - 1, us * ih2);
            push(i, j, -(ue + uw + un + us) * ih2);
            for (ci, sx) in [(i - 1, -1.0), (i, 1.0)] {
                for (cj, sy) in [(j - 1, -1.0), (j, 1.0)] {
                    let c = stag.u12_at(ci, cj) * 0.25 * ih2;
                    // d1 mu2 (U12 mu1 d2 w)
                    push(ci, cj + 1, sx * c);
                    push(ci, cj, -sx * c);
                    push(ci + 1, cj + 1, sx * c);
                    push(ci + 1, cj, -sx * c);
                    // d2 mu1 (U12 mu2 d1 w)
                    push(ci + 1, cj, sy * c);
                    push(ci, cj, -sy * c);
                    push(ci + 1, cj + 1, sy * c);
                    push(ci, cj + 1, -sy * c);
                }
            }
            Ok::<_, Error>((true, e, Vec::new()))
        } else {
            let r = hessian_row(&grid, k, BoundaryMode::Dirichlet)
                .ok_or_else(|| Error::InvalidGrid(format!("no Hessian stencil at node {k}")))?;
            let c = coef.at(k);
            let mut e = Vec::with_capacity(12);
            let mut b = Vec::new();
            for (lc, w) in [(&r.h11, c.a11), (&r.h12, 2.0 * c.a12), (&r.h22, c.a22)] {
                for &(m, v) in &lc.nodes {
                    e.push((idx(m), w * v));
                }
                for &(p, v) in &lc.boundary {
                    b.push((p, w * v));
                }
            }
            Ok((false, e, b))
        }
    });
    let mut builder = CsrBuilder::new(grid.n_unknowns());
    let mut flux_row = Vec::with_capacity(rows.len());
    let mut boundary = Vec::with_capacity(rows.len());
    for (r, row) in rows.into_iter().enumerate() {
        let (f, e, b) = row?;
        flux_row.push(f);
        builder.set_row(r, e);
        boundary.push(b);
    }
    Ok(LMAOperator {
        grid,
        coef,
        stag,
        flux_row,
        matrix: builder.build(),
        boundary,
        lu: OnceLock::new(),
    })
}

impl LMAOperator {
    pub fn grid(&self) -> &Arc<Grid2D> {
        &self.grid
    }

    /// Node-centred cofactor of the discrete Hessian of `u`.
    pub fn coefficients(&self) -> &SymMatField {
        &self.coef
    }

    pub fn staggered(&self) -> &StaggeredCofactor {
        &self.stag
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    /// Per unknown: whether the row is in flux form.
    pub fn flux_rows(&self) -> &[bool] {
        &self.flux_row
    }

    /// `L_u w` at every active node, with `psi` at the crossings.
    pub fn apply(&self, w: &ScalarField, psi: BoundaryData<'_>) -> ScalarField {
        let x = w.to_unknowns();
        let mut y = self.matrix.mul_vec(&x);
        if let Some(g) = psi {
            for (yi, b) in y.iter_mut().zip(&self.boundary) {
                *yi += b.iter().map(|&((px, py), c)| c * g(px, py)).sum::<f64>();
            }
        }
        ScalarField::from_unknowns(&self.grid, &y)
    }

    fn factor(&self) -> Result<&BandedLu> {
        match self.lu.get_or_init(|| BandedLu::factor(&self.matrix)) {
            Ok(lu) => Ok(lu),
            Err(row) => Err(singular_at(&self.grid, *row)),
        }
    }

    /// Pivots of an unpivoted factorisation (sign pattern check).
    pub fn unpivoted_pivots(&self) -> Result<Vec<f64>> {
        BandedLu::factor_no_pivoting(&self.matrix)
            .map(|lu| lu.pivots())
            .map_err(|row| singular_at(&self.grid, row))
    }
}

/// Solve `L_u w = f` with `w = psi` at the boundary crossings.
pub fn solve_lma(
    op: &LMAOperator,
    f: &ScalarField,
    psi: &(dyn Fn(f64, f64) -> f64 + Sync),
) -> Result<ScalarField> {
    let lu = op.factor()?;
    let fv = f.to_unknowns();
    let rhs: Vec<f64> = fv
        .iter()
        .zip(&op.boundary)
        .map(|(v, b)| v - b.iter().map(|&((px, py), c)| c * psi(px, py)).sum::<f64>())
        .collect();
    let x = lu.solve(&rhs);
    let w = ScalarField::from_unknowns(&op.grid, &x);
    if log::log_enabled!(log::Level::Debug) {
        let r = op.matrix.mul_vec(&x);
        let scale = crate::linalg::sup_norm(&rhs).max(1e-300);
        let rel = r
            .iter()
            .zip(&rhs)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            / scale;
        log::debug!("lma solve relative residual {rel:e}");
    }
    Ok(w)
}

/// Pointwise `U^{ij} D_ij w` with node cofactors and Shortley–Weller Hessians.
pub fn nondivergence_apply(
    u: &ScalarField,
    u_bc: BoundaryData<'_>,
    w: &ScalarField,
    w_bc: BoundaryData<'_>,
) -> ScalarField {
    let cu = cofactor(&hessian(u, u_bc));
    let hw = hessian(w, w_bc);
    ScalarField::from_values(
        u.grid(),
        (0..u.grid().len())
            .map(|k| cu.at(k).contract(&hw.at(k)))
            .collect(),
    )
    .expect("sized by grid")
}

/// Cell-centred gradients `(mu2 d1 u, mu1 d2 u)` for cells `(ci, cj)` whose
/// four corners are active; `None` otherwise. Index `cj * (nx - 1) + ci`.
pub fn cell_gradients(u: &ScalarField) -> Vec<Option<(f64, f64)>> {
    let g = u.grid();
    let (nx, ny, h) = (g.nx(), g.ny(), g.h());
    let v = u.values();
    crate::par::map_range((nx - 1) * (ny - 1), |c| {
        let (ci, cj) = (c % (nx - 1), c / (nx - 1));
        let ks = [g.idx(ci, cj), g.idx(ci + 1, cj), g.idx(ci, cj + 1), g.idx(ci + 1, cj + 1)];
        if ks.iter().all(|&k| g.is_active(k)) {
            let [sw, se, nw, ne] = ks.map(|k| v[k]);
            Some((
                0.5 * ((se - sw) + (ne - nw)) / h,
                0.5 * ((nw - sw) + (ne - se)) / h,
            ))
        } else {
            None
        }
    })
}

/// Discrete divergence at node `k` of a cell flux: `mu2 d1 F1 + mu1 d2 F2`
/// summed over the four surrounding cells. Cells with no flux contribute
/// zero. This is the exact adjoint of [`cell_gradients`].
pub fn cell_flux_divergence(grid: &Grid2D, k: usize, flux: &[Option<(f64, f64)>]) -> f64 {
    let (i, j) = grid.ij(k);
    let (nx, ny) = (grid.nx(), grid.ny());
    let h = grid.h();
    let mut s = 0.0;
    for (ci, sx) in [(i.wrapping_sub(1), -1.0), (i, 1.0)] {
        for (cj, sy) in [(j.wrapping_sub(1), -1.0), (j, 1.0)] {
            if ci >= nx - 1 || cj >= ny - 1 {
                continue;
            }
            if let Some((f1, f2)) = flux[cj * (nx - 1) + ci] {
                s += sx * f1 + sy * f2;
            }
        }
    }
    s / (2.0 * h)
}

fn flux_coefficient(s: f64, q: f64, delta: f64) -> f64 {
    if q == 2.0 {
        1.0
    } else {
        (s + delta).powf(0.5 * (q - 2.0))
    }
}

/// `-div((|Du|^2 + delta)^{(q-2)/2} Du)`: cell-centred flux form at nodes
/// with an active 3x3 block, nondivergence expansion elsewhere.
pub fn qlap_rhs(u: &ScalarField, q: f64, delta: f64, bc: BoundaryData<'_>) -> Result<ScalarField> {
    if !(q > 1.0) {
        return Err(Error::InvalidArgument(format!("q must exceed 1, got {q}")));
    }
    if delta < 0.0 {
        return Err(Error::InvalidArgument("delta must be nonnegative".into()));
    }
    let g = u.grid().clone();
    let singular = q < 2.0 && delta == 0.0;
    let grads = cell_gradients(u);
    let mut flux = Vec::with_capacity(grads.len());
    for (c, p) in grads.iter().enumerate() {
        flux.push(match p {
            Some((p1, p2)) => {
                let s = p1 * p1 + p2 * p2;
                if singular && s.sqrt() < 1e-14 {
                    let nx1 = g.nx() - 1;
                    return Err(Error::SingularFlux {
                        node: g.idx(c % nx1, c / nx1),
                        grad: s.sqrt(),
                    });
                }
                let a = flux_coefficient(s, q, delta);
                Some((a * p1, a * p2))
            }
            None => None,
        });
    }
    let mode = if bc.is_some() { BoundaryMode::Dirichlet } else { BoundaryMode::OneSided };
    let vals = u.values();
    let out = crate::par::map_range(g.len(), |k| -> Result<f64> {
        if !g.is_active(k) {
            return Ok(f64::NAN);
        }
        if g.has_full_neighborhood(k) {
            return Ok(-cell_flux_divergence(&g, k, &flux));
        }
        let (Some((dx, dy)), Some(hr)) = (gradient_row(&g, k, mode), hessian_row(&g, k, mode)) else {
            return Ok(f64::NAN);
        };
        let p = (dx.eval(vals, bc), dy.eval(vals, bc));
        let hm = Sym2::new(hr.h11.eval(vals, bc), hr.h12.eval(vals, bc), hr.h22.eval(vals, bc));
        let s = p.0 * p.0 + p.1 * p.1;
        if singular && s.sqrt() < 1e-14 {
            return Err(Error::SingularFlux { node: k, grad: s.sqrt() });
        }
        let a = flux_coefficient(s, q, delta);
        let b = if q == 2.0 { 0.0 } else { (q - 2.0) * (s + delta).powf(0.5 * (q - 4.0)) };
        Ok(-(a * hm.trace() + b * hm.quad_form(p)))
    });
    ScalarField::from_values(&g, out.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Pointwise `F0_z(x, y, u(x, y))`.
pub fn f0z_term(u: &ScalarField, f0z: &(dyn Fn(f64, f64, f64) -> f64 + Sync)) -> ScalarField {
    let g = u.grid();
    u.map(|k, z| {
        let (x, y) = g.xy(k);
        f0z(x, y, z)
    })
}
