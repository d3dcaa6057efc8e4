//! Discrete calculus on grid fields.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::field::{ScalarField, Sym2, SymMatField, VectorField};
use super::grid::{Dir, Grid2D, NodeClass};
use super::stencil::{gradient_row, hessian_row, BoundaryMode};

/// Boundary data callable.
pub type BoundaryData<'a> = Option<&'a (dyn Fn(f64, f64) -> f64 + Sync)>;

fn mode_for(bc: BoundaryData<'_>) -> BoundaryMode {
    if bc.is_some() {
        BoundaryMode::Dirichlet
    } else {
        BoundaryMode::OneSided
    }
}

/// Centered gradient; Shortley–Weller (with `bc`) or one-sided near the boundary.
pub fn gradient(f: &ScalarField, bc: BoundaryData<'_>) -> VectorField {
    let g = f.grid().clone();
    let mode = mode_for(bc);
    let vals = f.values();
    let values = crate::par::map_range(g.len(), |k| {
        if !g.is_active(k) {
            return (f64::NAN, f64::NAN);
        }
        match gradient_row(&g, k, mode) {
            Some((dx, dy)) => (dx.eval(vals, bc), dy.eval(vals, bc)),
            None => (f64::NAN, f64::NAN),
        }
    });
    VectorField::from_values(&g, values).expect("sized by grid")
}

/// Discrete Hessian: centered second differences and the four-point cross at
/// interior nodes; boundary handling as in [`gradient`].
pub fn hessian(f: &ScalarField, bc: BoundaryData<'_>) -> SymMatField {
    let g = f.grid().clone();
    let mode = mode_for(bc);
    let vals = f.values();
    let values = crate::par::map_range(g.len(), |k| {
        let nan = Sym2::new(f64::NAN, f64::NAN, f64::NAN);
        if !g.is_active(k) {
            return nan;
        }
        match hessian_row(&g, k, mode) {
            Some(r) => Sym2::new(r.h11.eval(vals, bc), r.h12.eval(vals, bc), r.h22.eval(vals, bc)),
            None => nan,
        }
    });
    SymMatField::from_values(&g, values).expect("sized by grid")
}

/// Node-wise 2D cofactor.
pub fn cofactor(hess: &SymMatField) -> SymMatField {
    hess.map(|_, m| m.cofactor())
}

/// Divergence discretisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DivScheme {
    /// Centered node differences (one-sided at boundary-adjacent nodes).
    #[default]
    Centered,
    /// Flux through the four surrounding cells, with cell values averaged
    /// from the cell corners. Only defined where the 3x3 block is active.
    Staggered,
}

pub fn divergence(v: &VectorField, scheme: DivScheme) -> ScalarField {
    let g = v.grid().clone();
    let vals = v.values();
    let h = g.h();
    let values = crate::par::map_range(g.len(), |k| {
        if !g.is_active(k) {
            return f64::NAN;
        }
        match scheme {
            DivScheme::Centered => {
                let comp = |c: usize, plus: Dir| -> f64 {
                    let get = |m: usize| if c == 0 { vals[m].0 } else { vals[m].1 };
                    let minus = plus.opposite();
                    match (g.active_neighbor(k, plus), g.active_neighbor(k, minus)) {
                        (Some(p), Some(m)) => (get(p) - get(m)) / (2.0 * h),
                        (Some(p), None) => match g.active_neighbor(p, plus) {
                            Some(pp) => (-1.5 * get(k) + 2.0 * get(p) - 0.5 * get(pp)) / h,
                            None => (get(p) - get(k)) / h,
                        },
                        (None, Some(m)) => match g.active_neighbor(m, minus) {
                            Some(mm) => (1.5 * get(k) - 2.0 * get(m) + 0.5 * get(mm)) / h,
                            None => (get(k) - get(m)) / h,
                        },
                        (None, None) => f64::NAN,
                    }
                };
                comp(0, Dir::E) + comp(1, Dir::N)
            }
            DivScheme::Staggered => {
                if !g.has_full_neighborhood(k) {
                    return f64::NAN;
                }
                let (i, j) = g.ij(k);
                let cell = |ci: usize, cj: usize| -> (f64, f64) {
                    let c = [
                        vals[g.idx(ci, cj)],
                        vals[g.idx(ci + 1, cj)],
                        vals[g.idx(ci, cj + 1)],
                        vals[g.idx(ci + 1, cj + 1)],
                    ];
                    (
                        0.25 * (c[0].0 + c[1].0 + c[2].0 + c[3].0),
                        0.25 * (c[0].1 + c[1].1 + c[2].1 + c[3].1),
                    )
                };
                let (ne, nw, se, sw) = (cell(i, j), cell(i - 1, j), cell(i, j - 1), cell(i - 1, j - 1));
                (ne.0 + se.0 - nw.0 - sw.0) / (2.0 * h) + (ne.1 + nw.1 - se.1 - sw.1) / (2.0 * h)
            }
        }
    });
    ScalarField::from_values(&g, values).expect("sized by grid")
}

/// Integration region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Omega,
    Omega0,
    OmegaMinusOmega0,
}

/// Cell-weighted midpoint rule; cut cells are weighted by their sampled
/// inside fraction and use the mean of their active corner values.
pub fn integrate(f: &ScalarField, region: Region) -> Result<f64> {
    let g = f.grid();
    if region != Region::Omega && !g.domain().has_inner() {
        return Err(Error::MissingInnerRegion);
    }
    let (nx, ny, h) = (g.nx(), g.ny(), g.h());
    let vals = f.values();
    let rows = crate::par::map_range(ny - 1, |j| {
        let mut s = 0.0;
        for i in 0..nx - 1 {
            let w_omega = g.cell_fraction(i, j);
            let w = match region {
                Region::Omega => w_omega,
                Region::Omega0 => g.cell_fraction_inner(i, j).unwrap_or(0.0),
                Region::OmegaMinusOmega0 => w_omega - g.cell_fraction_inner(i, j).unwrap_or(0.0),
            };
            if w <= 0.0 {
                continue;
            }
            let mut acc = 0.0;
            let mut cnt = 0;
            for (a, b) in [(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)] {
                let k = g.idx(a, b);
                if g.is_active(k) && !vals[k].is_nan() {
                    acc += vals[k];
                    cnt += 1;
                }
            }
            if cnt > 0 {
                s += w * h * h * acc / cnt as f64;
            }
        }
        s
    });
    Ok(rows.iter().sum())
}

/// Cofactor of the discrete Hessian stored on the staggered layout used by
/// the flux-form operators: `u11` on x-half-nodes `(i+1/2, j)`, `u22` on
/// y-half-nodes `(i, j+1/2)`, `u12` on cell centres `(i+1/2, j+1/2)`.
/// `NaN` where a required node is exterior.
#[derive(Debug, Clone)]
pub struct StaggeredCofactor {
    pub grid: Arc<Grid2D>,
    pub u11_x: Vec<f64>,
    pub u22_y: Vec<f64>,
    pub u12_c: Vec<f64>,
}

impl StaggeredCofactor {
    pub fn new(f: &ScalarField) -> Self {
        let g = f.grid().clone();
        let (nx, ny, h) = (g.nx(), g.ny(), g.h());
        let v = f.values();
        let ih2 = 1.0 / (h * h);
        let val = |i: isize, j: isize| -> f64 {
            if i < 0 || j < 0 || i >= nx as isize || j >= ny as isize {
                return f64::NAN;
            }
            let k = j as usize * nx + i as usize;
            if g.is_active(k) {
                v[k]
            } else {
                f64::NAN
            }
        };
        let mut u11_x = vec![f64::NAN; (nx - 1) * ny];
        for j in 0..ny as isize {
            for i in 0..nx as isize - 1 {
                let d2 = |ii: isize| (val(ii, j + 1) - 2.0 * val(ii, j) + val(ii, j - 1)) * ih2;
                u11_x[j as usize * (nx - 1) + i as usize] = 0.5 * (d2(i) + d2(i + 1));
            }
        }
        let mut u22_y = vec![f64::NAN; nx * (ny - 1)];
        for j in 0..ny as isize - 1 {
            for i in 0..nx as isize {
                let d2 = |jj: isize| (val(i + 1, jj) - 2.0 * val(i, jj) + val(i - 1, jj)) * ih2;
                u22_y[j as usize * nx + i as usize] = 0.5 * (d2(j) + d2(j + 1));
            }
        }
        let mut u12_c = vec![f64::NAN; (nx - 1) * (ny - 1)];
        for j in 0..ny as isize - 1 {
            for i in 0..nx as isize - 1 {
                u12_c[j as usize * (nx - 1) + i as usize] =
                    -(val(i + 1, j + 1) - val(i + 1, j) - val(i, j + 1) + val(i, j)) * ih2;
            }
        }
        Self {
            grid: g,
            u11_x,
            u22_y,
            u12_c,
        }
    }

    #[inline]
    pub fn u11_at(&self, i_half: usize, j: usize) -> f64 {
        self.u11_x[j * (self.grid.nx() - 1) + i_half]
    }

    #[inline]
    pub fn u22_at(&self, i: usize, j_half: usize) -> f64 {
        self.u22_y[j_half * self.grid.nx() + i]
    }

    #[inline]
    pub fn u12_at(&self, i_half: usize, j_half: usize) -> f64 {
        self.u12_c[j_half * (self.grid.nx() - 1) + i_half]
    }

    /// Row divergences `(sum_i D_i U^{i1}, sum_i D_i U^{i2})` at nodes whose
    /// 3x3 block is active. The discrete operators commute, so both vanish up
    /// to rounding.
    pub fn row_divergence(&self) -> (ScalarField, ScalarField) {
        let g = &self.grid;
        let h = g.h();
        let mut d1 = ScalarField::nan(g);
        let mut d2 = ScalarField::nan(g);
        for k in 0..g.len() {
            if !g.has_full_neighborhood(k) {
                continue;
            }
            let (i, j) = g.ij(k);
            let u12_yhalf = |jh: usize| 0.5 * (self.u12_at(i - 1, jh) + self.u12_at(i, jh));
            let u12_xhalf = |ih: usize| 0.5 * (self.u12_at(ih, j - 1) + self.u12_at(ih, j));
            let r1 = (self.u11_at(i, j) - self.u11_at(i - 1, j)) / h
                + (u12_yhalf(j) - u12_yhalf(j - 1)) / h;
            let r2 = (u12_xhalf(i) - u12_xhalf(i - 1)) / h
                + (self.u22_at(i, j) - self.u22_at(i, j - 1)) / h;
            d1.set(k, r1);
            d2.set(k, r2);
        }
        (d1, d2)
    }
}

/// Smaller Hessian eigenvalue at INTERIOR nodes.
pub fn min_eigenvalue_interior(hess: &SymMatField) -> f64 {
    let g = hess.grid();
    g.interior_nodes()
        .map(|k| hess.at(k))
        .filter(|m| m.is_finite())
        .map(|m| m.eigenvalues().0)
        .fold(f64::INFINITY, f64::min)
}

/// Nodes of the given class.
pub fn nodes_of(grid: &Grid2D, class: NodeClass) -> Vec<usize> {
    (0..grid.len()).filter(|&k| grid.class(k) == class).collect()
}
