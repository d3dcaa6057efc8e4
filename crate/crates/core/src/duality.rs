//! Discrete Legendre and partial Legendre transforms with residual checks of
//! the dual equations.
//!
//! The conjugate itself is the max-form `u*(y) = max_x (x.y - u(x))` over grid
//! nodes, computed with the separable linear-time algorithm (lower hull per
//! line, two passes). Derivatives of the conjugate are taken from a smoothed
//! version that maximises the local degree-4 interpolant of `u` around the
//! maximising node, which removes the piecewise-linear kinks of the max-form.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{
    gradient, hessian, BBox, BoundaryData, ConvexDomain, Grid2D, ScalarField, ScalarFn, Sym2,
    SymMatField, VectorField,
};
use crate::monge_ampere::assert_convex;

/// Marker for dual nodes without a maximiser.
pub const NO_NODE: usize = usize::MAX;

fn lower_hull(xs: &[f64], fs: &[f64]) -> Vec<usize> {
    let mut hull: Vec<usize> = Vec::with_capacity(xs.len());
    for p in 0..xs.len() {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (xs[b] - xs[a]) * (fs[p] - fs[a]) - (fs[b] - fs[a]) * (xs[p] - xs[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    hull
}

/// `max_i (xs[i] y - fs[i])` for every `y` in `ys`, with the maximising index.
///
/// `xs` must be strictly increasing and `ys` nondecreasing. Ties go to the
/// smallest index.
pub fn conjugate_1d(xs: &[f64], fs: &[f64], ys: &[f64]) -> Vec<(f64, usize)> {
    debug_assert!(xs.windows(2).all(|w| w[0] < w[1]));
    debug_assert!(ys.windows(2).all(|w| w[0] <= w[1]));
    if xs.is_empty() {
        return vec![(f64::NEG_INFINITY, NO_NODE); ys.len()];
    }
    let hull = lower_hull(xs, fs);
    let mut v = 0;
    ys.iter()
        .map(|&y| {
            while v + 1 < hull.len() {
                let (a, b) = (hull[v], hull[v + 1]);
                let slope = (fs[b] - fs[a]) / (xs[b] - xs[a]);
                if slope < y {
                    v += 1;
                } else {
                    break;
                }
            }
            let i = hull[v];
            (xs[i] * y - fs[i], i)
        })
        .collect()
}

/// Conjugate of the active-node values of `vals` on `grid`, evaluated on the
/// tensor lattice `y1 x y2` (both nondecreasing). Returns values and the
/// maximising node, indexed `b * y1.len() + a`.
pub fn conjugate_on_lattice(grid: &Grid2D, vals: &[f64], y1: &[f64], y2: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (nx, ny) = (grid.nx(), grid.ny());
    let rows: Vec<usize> = (0..ny)
        .filter(|&j| (0..nx).any(|i| grid.is_active(grid.idx(i, j))))
        .collect();
    let pass1 = crate::par::map_slice(&rows, |&j| {
        let is: Vec<usize> = (0..nx).filter(|&i| grid.is_active(grid.idx(i, j))).collect();
        let xs: Vec<f64> = is.iter().map(|&i| grid.xy(grid.idx(i, j)).0).collect();
        let fs: Vec<f64> = is.iter().map(|&i| vals[grid.idx(i, j)]).collect();
        conjugate_1d(&xs, &fs, y1)
            .into_iter()
            .map(|(v, t)| (v, is[t]))
            .collect::<Vec<_>>()
    });
    let xs2: Vec<f64> = rows.iter().map(|&j| grid.xy(grid.idx(0, j)).1).collect();
    let cols = crate::par::map_range(y1.len(), |a| {
        let fs: Vec<f64> = pass1.iter().map(|r| -r[a].0).collect();
        conjugate_1d(&xs2, &fs, y2)
            .into_iter()
            .map(|(v, r)| (v, grid.idx(pass1[r][a].1, rows[r])))
            .collect::<Vec<_>>()
    });
    let mut out = vec![f64::NAN; y1.len() * y2.len()];
    let mut arg = vec![NO_NODE; y1.len() * y2.len()];
    for (a, col) in cols.into_iter().enumerate() {
        for (b, (v, k)) in col.into_iter().enumerate() {
            out[b * y1.len() + a] = v;
            arg[b * y1.len() + a] = k;
        }
    }
    (out, arg)
}

/// Direct `O(N M)` scan; reference for [`conjugate_on_lattice`].
pub fn conjugate_brute_force(grid: &Grid2D, vals: &[f64], y: (f64, f64)) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, NO_NODE);
    for &k in grid.active_nodes() {
        let (x1, x2) = grid.xy(k);
        let v = x1 * y.0 + x2 * y.1 - vals[k];
        if v > best.0 {
            best = (v, k);
        }
    }
    best
}

fn lattice(grid: &Grid2D) -> (Vec<f64>, Vec<f64>) {
    let b = grid.bbox();
    let h = grid.h();
    (
        (0..grid.nx()).map(|i| b.xmin + i as f64 * h).collect(),
        (0..grid.ny()).map(|j| b.ymin + j as f64 * h).collect(),
    )
}

/// Counter-clockwise convex hull (Andrew's monotone chain).
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut p: Vec<(f64, f64)> = points.iter().copied().filter(|q| q.0.is_finite() && q.1.is_finite()).collect();
    p.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &q in &p {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], q) <= 0.0 {
            lower.pop();
        }
        lower.push(q);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &q in p.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], q) <= 0.0 {
            upper.pop();
        }
        upper.push(q);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Bilinear interpolation of `f` at `(x, y)`; `None` unless all four cell
/// corners carry finite values.
pub fn interpolate(f: &ScalarField, x: f64, y: f64) -> Option<f64> {
    let g = f.grid();
    let b = g.bbox();
    let h = g.h();
    let (sx, sy) = ((x - b.xmin) / h, (y - b.ymin) / h);
    if !(sx >= 0.0 && sy >= 0.0) {
        return None;
    }
    let (i, j) = ((sx.floor() as usize).min(g.nx() - 2), (sy.floor() as usize).min(g.ny() - 2));
    let (tx, ty) = (sx - i as f64, sy - j as f64);
    if tx > 1.0 + 1e-12 || ty > 1.0 + 1e-12 {
        return None;
    }
    let v = [f.at(g.idx(i, j)), f.at(g.idx(i + 1, j)), f.at(g.idx(i, j + 1)), f.at(g.idx(i + 1, j + 1))];
    if v.iter().any(|a| !a.is_finite()) {
        return None;
    }
    Some((1.0 - ty) * ((1.0 - tx) * v[0] + tx * v[1]) + ty * ((1.0 - tx) * v[2] + tx * v[3]))
}

/// Sup of `|f|` over its finite entries.
pub fn finite_sup(f: &ScalarField) -> f64 {
    f.values().iter().filter(|v| v.is_finite()).fold(0.0, |m, v| m.max(v.abs()))
}

/// Dual resolution used by the residual checks: dual spacing about `1.5 h`
/// over the gradient range.
pub fn residual_resolution(u: &ScalarField) -> usize {
    let g = gradient(u, None);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(a, b) in g.values() {
        if a.is_finite() && b.is_finite() {
            lo = lo.min(a.min(b));
            hi = hi.max(a.max(b));
        }
    }
    let span = (hi - lo).max(1e-12);
    ((span / (1.5 * u.grid().h())).ceil() as usize + 1).max(9)
}

/// Row stride used by the partial-transform residual checks.
pub const RESIDUAL_STRIDE: usize = 2;

/// Sup of `|r|` over dual nodes whose primal point `x` lies in the core
/// `rho(x) <= frac * min rho` of the primal domain. Comparing residuals on a
/// fixed core keeps refinement studies free of the boundary layer, which a
/// finer dual grid would otherwise start to sample.
pub fn core_sup(r: &ScalarField, points: impl Fn(usize) -> (f64, f64), primal: &Grid2D, frac: f64) -> f64 {
    let dom = primal.domain();
    let rho_min = primal
        .active_nodes()
        .iter()
        .map(|&k| {
            let (x, y) = primal.xy(k);
            dom.rho(x, y)
        })
        .fold(f64::INFINITY, f64::min);
    let cut = frac * rho_min;
    (0..r.values().len())
        .filter(|&k| r.at(k).is_finite())
        .filter(|&k| {
            let (x, y) = points(k);
            dom.rho(x, y) <= cut
        })
        .fold(0.0, |m, k| m.max(r.at(k).abs()))
}

/// Discrete Legendre transform of a convex grid function.
#[derive(Debug, Clone)]
pub struct LegendrePair {
    pub primal: ScalarField,
    /// Max-form conjugate on the dual grid.
    pub dual: ScalarField,
    /// Conjugate from the local quartic interpolant; used for derivatives.
    pub smooth: ScalarField,
    pub dual_grid: Arc<Grid2D>,
    /// Maximising primal node per dual node.
    pub argmax: Vec<usize>,
    /// Model maximiser `x(y) = Du*(y)`.
    pub map: VectorField,
    pub primal_gradient: VectorField,
    pub primal_hessian: SymMatField,
}

/// Square dual grid over `bbox` with about `m` nodes along the longer side,
/// masked by the polygon `hull`.
fn dual_grid(bbox: BBox, hull: Vec<(f64, f64)>, m: usize) -> Result<Grid2D> {
    if m < 5 {
        return Err(Error::InvalidGrid(format!("dual resolution {m} < 5")));
    }
    let (w, ht) = (bbox.width(), bbox.height());
    let span = w.max(ht);
    if !(span > 0.0) {
        return Err(Error::InvalidGrid("gradient image is a point".into()));
    }
    let h = span / (m - 1) as f64;
    let nx = ((w / h).round() as usize + 1).max(5);
    let ny = ((ht / h).round() as usize + 1).max(5);
    let cx = 0.5 * (bbox.xmin + bbox.xmax);
    let cy = 0.5 * (bbox.ymin + bbox.ymax);
    let domain = ConvexDomain::convex_polygon(hull)?.with_label("gradient hull");
    Grid2D::with_layout(
        &domain,
        nx,
        ny,
        h,
        cx - 0.5 * (nx - 1) as f64 * h,
        cy - 0.5 * (ny - 1) as f64 * h,
    )
}

/// Degree-4 Lagrange basis on the nodes `0..=4`: values, first and second
/// derivatives at `s`.
fn lagrange5(s: f64) -> [[f64; 5]; 3] {
    let mut out = [[0.0; 5]; 3];
    for a in 0..5 {
        let mut c = [0.0f64; 5];
        c[0] = 1.0;
        let mut deg = 0;
        let mut den = 1.0;
        for b in 0..5 {
            if b == a {
                continue;
            }
            for t in (0..=deg).rev() {
                c[t + 1] += c[t];
                c[t] *= -(b as f64);
            }
            deg += 1;
            den *= a as f64 - b as f64;
        }
        let (mut p, mut d1, mut d2) = (0.0, 0.0, 0.0);
        for t in (0..5).rev() {
            d2 = d2 * s + 2.0 * d1;
            d1 = d1 * s + p;
            p = p * s + c[t];
        }
        out[0][a] = p / den;
        out[1][a] = d1 / den;
        out[2][a] = d2 / den;
    }
    out
}

const OFFSETS: [isize; 5] = [0, -1, 1, -2, 2];

fn block_start(i: usize, o: isize, n: usize) -> Option<usize> {
    let s = i as isize - 2 + o;
    (s >= 0 && s as usize + 4 < n).then_some(s as usize)
}

/// Maximise `x.y - P(x)` for the tensor degree-4 interpolant `P` of `vals`
/// on an active 5x5 block next to node `k`, by Newton from `x0`.
fn refine_2d(g: &Grid2D, vals: &[f64], k: usize, y: (f64, f64), x0: (f64, f64)) -> Option<((f64, f64), f64)> {
    let (i, j) = g.ij(k);
    let h = g.h();
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    for oi in OFFSETS {
        for oj in OFFSETS {
            if let (Some(a), Some(b)) = (block_start(i, oi, g.nx()), block_start(j, oj, g.ny())) {
                blocks.push((a, b));
            }
        }
    }
    blocks.sort_by_key(|&(a, b)| a.abs_diff(i.saturating_sub(2)) + b.abs_diff(j.saturating_sub(2)));
    let (i0, j0) = blocks
        .into_iter()
        .find(|&(a, b)| (0..5).all(|t| (0..5).all(|r| g.is_active(g.idx(a + t, b + r)))))?;
    let (ox, oy) = g.xy(g.idx(i0, j0));
    let v = |a: usize, b: usize| vals[g.idx(i0 + a, j0 + b)];
    let eval = |x: (f64, f64)| {
        let (la, lb) = (lagrange5((x.0 - ox) / h), lagrange5((x.1 - oy) / h));
        let (mut p, mut p1, mut p2, mut p11, mut p12, mut p22) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for a in 0..5 {
            for b in 0..5 {
                let f = v(a, b);
                p += f * la[0][a] * lb[0][b];
                p1 += f * la[1][a] * lb[0][b];
                p2 += f * la[0][a] * lb[1][b];
                p11 += f * la[2][a] * lb[0][b];
                p12 += f * la[1][a] * lb[1][b];
                p22 += f * la[0][a] * lb[2][b];
            }
        }
        (p, (p1 / h, p2 / h), Sym2::new(p11 / (h * h), p12 / (h * h), p22 / (h * h)))
    };
    let mut x = x0;
    for _ in 0..30 {
        let (_, gr, hs) = eval(x);
        if !(hs.a11 > 0.0 && hs.det() > 0.0) {
            return None;
        }
        let d = hs.inverse()?.mul_vec((gr.0 - y.0, gr.1 - y.1));
        x = (x.0 - d.0, x.1 - d.1);
        if (x.0 - ox) / h < -1.0 || (x.0 - ox) / h > 5.0 || (x.1 - oy) / h < -1.0 || (x.1 - oy) / h > 5.0 {
            return None;
        }
        if d.0.abs().max(d.1.abs()) < 1e-13 * h {
            break;
        }
    }
    let (p, _, _) = eval(x);
    Some((x, x.0 * y.0 + x.1 * y.1 - p))
}

/// One-dimensional analogue of [`refine_2d`] along row `j`.
fn refine_1d(g: &Grid2D, vals: &[f64], k: usize, xi: f64, x0: f64) -> Option<(f64, f64)> {
    let (i, j) = g.ij(k);
    let h = g.h();
    let i0 = OFFSETS
        .iter()
        .filter_map(|&o| block_start(i, o, g.nx()))
        .find(|&a| (0..5).all(|t| g.is_active(g.idx(a + t, j))))?;
    let ox = g.xy(g.idx(i0, j)).0;
    let eval = |x: f64| {
        let l = lagrange5((x - ox) / h);
        let (mut p, mut p1, mut p2) = (0.0, 0.0, 0.0);
        for a in 0..5 {
            let f = vals[g.idx(i0 + a, j)];
            p += f * l[0][a];
            p1 += f * l[1][a];
            p2 += f * l[2][a];
        }
        (p, p1 / h, p2 / (h * h))
    };
    let mut x = x0;
    for _ in 0..30 {
        let (_, p1, p2) = eval(x);
        if !(p2 > 0.0) {
            return None;
        }
        let d = (p1 - xi) / p2;
        x -= d;
        if (x - ox) / h < -1.0 || (x - ox) / h > 5.0 {
            return None;
        }
        if d.abs() < 1e-13 * h {
            break;
        }
    }
    Some((x, x * xi - eval(x).0))
}

fn model_correction(dy: (f64, f64), hs: Sym2, cap: f64) -> ((f64, f64), f64) {
    let Some(inv) = hs.inverse().filter(|_| hs.a11 > 0.0 && hs.det() > 0.0) else {
        return ((0.0, 0.0), 0.0);
    };
    let d = inv.mul_vec(dy);
    let len = d.0.hypot(d.1);
    let t = if len > cap { cap / len } else { 1.0 };
    let val = t * (dy.0 * d.0 + dy.1 * d.1) - 0.5 * t * t * hs.quad_form(d);
    ((t * d.0, t * d.1), val)
}

/// Legendre transform of `u` on a dual grid with `m` nodes along the longer
/// side of the gradient bounding box. `bc` is the boundary data of `u`.
pub fn legendre_transform(u: &ScalarField, bc: BoundaryData<'_>, m: usize) -> Result<LegendrePair> {
    let (ok, min_eig) = assert_convex(u);
    if !ok {
        let g = u.grid();
        let hs = hessian(u, None);
        let node = g
            .interior_nodes()
            .min_by(|&a, &b| hs.at(a).eigenvalues().0.total_cmp(&hs.at(b).eigenvalues().0))
            .unwrap_or(0);
        return Err(Error::NonConvexCoefficient { node, min_eig });
    }
    let g = u.grid().clone();
    let grad = gradient(u, bc);
    let hs = hessian(u, bc);
    let pts: Vec<(f64, f64)> = g.active_nodes().iter().map(|&k| grad.at(k)).collect();
    let hull = convex_hull(&pts);
    if hull.len() < 3 {
        return Err(Error::InvalidGrid("degenerate gradient image".into()));
    }
    let bbox = BBox::new(
        hull.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        hull.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
        hull.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        hull.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    let dg = Arc::new(dual_grid(bbox, hull, m)?);
    let (y1, y2) = lattice(&dg);
    let (vals, arg) = conjugate_on_lattice(&g, u.values(), &y1, &y2);
    let cap = 2.0 * g.h();
    let rows = crate::par::map_range(dg.len(), |k| {
        if !dg.is_active(k) {
            return (f64::NAN, f64::NAN, (f64::NAN, f64::NAN), NO_NODE);
        }
        let (y, am) = (dg.xy(k), arg[k]);
        let x = g.xy(am);
        let p = grad.at(am);
        let (d, c) = model_correction((y.0 - p.0, y.1 - p.1), hs.at(am), cap);
        let guess = (x.0 + d.0, x.1 + d.1);
        match refine_2d(&g, u.values(), am, y, guess) {
            Some((xr, v)) => (vals[k], v, xr, am),
            None => (vals[k], vals[k] + c, guess, am),
        }
    });
    let dual = ScalarField::from_values(&dg, rows.iter().map(|r| r.0).collect())?;
    let smooth = ScalarField::from_values(&dg, rows.iter().map(|r| r.1).collect())?;
    let map = VectorField::from_values(&dg, rows.iter().map(|r| r.2).collect())?;
    Ok(LegendrePair {
        primal: u.clone(),
        dual,
        smooth,
        dual_grid: dg,
        argmax: rows.iter().map(|r| r.3).collect(),
        map,
        primal_gradient: grad,
        primal_hessian: hs,
    })
}

impl LegendrePair {
    /// Centered Hessian of the smoothed conjugate at dual nodes whose 3x3
    /// block is active; `NaN` elsewhere.
    pub fn dual_hessian(&self) -> SymMatField {
        let dg = &self.dual_grid;
        let full = hessian(&self.smooth, None);
        full.map(|k, m| {
            if dg.has_full_neighborhood(k) {
                m
            } else {
                Sym2::new(f64::NAN, f64::NAN, f64::NAN)
            }
        })
    }

    fn dual_det(&self) -> ScalarField {
        let hd = self.dual_hessian();
        ScalarField::from_values(&self.dual_grid, hd.values().iter().map(|m| m.det()).collect())
            .expect("sized by grid")
    }

    /// Primal interior nodes whose gradient lands where `f` (on the dual grid)
    /// can be interpolated, paired with the interpolated value.
    fn samples(&self, f: &ScalarField) -> Vec<(usize, f64)> {
        let g = self.primal.grid();
        g.interior_nodes()
            .filter_map(|k| {
                let y = self.primal_gradient.at(k);
                interpolate(f, y.0, y.1).map(|v| (k, v))
            })
            .collect()
    }

    /// [`core_sup`] of a dual field, primal points from the map.
    pub fn core_sup(&self, r: &ScalarField, frac: f64) -> f64 {
        core_sup(r, |k| self.map.at(k), self.primal.grid(), frac)
    }

    /// Sup of `|u(x) + u*(Du(x)) - x.Du(x)|` over interior samples.
    pub fn young_error(&self) -> f64 {
        let g = self.primal.grid();
        self.samples(&self.smooth)
            .into_iter()
            .map(|(k, us)| {
                let (x, y) = (g.xy(k), self.primal_gradient.at(k));
                (self.primal.at(k) + us - x.0 * y.0 - x.1 * y.1).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Sup of `|det D^2 u(x) det D^2 u*(Du(x)) - 1|` and the sample count.
    pub fn reciprocal_det_error(&self) -> (f64, usize) {
        let s = self.samples(&self.dual_det());
        let e = s
            .iter()
            .map(|&(k, dd)| (self.primal_hessian.at(k).det() * dd - 1.0).abs())
            .fold(0.0, f64::max);
        (e, s.len())
    }

    /// Sup of `|w*(Du(x)) - (log det D^2 u(x) - 1)|` with
    /// `w* = -log det D^2 u* - 1`.
    pub fn w_star_error(&self) -> (f64, usize) {
        let ws = self.dual_det().map(|_, d| if d > 0.0 { -d.ln() - 1.0 } else { f64::NAN });
        let s = self.samples(&ws);
        let e = s
            .iter()
            .map(|&(k, v)| (v - (self.primal_hessian.at(k).det().ln() - 1.0)).abs())
            .fold(0.0, f64::max);
        (e, s.len())
    }
}

/// Sup over interior primal nodes of `|(u*)*(x) - u(x)|`, biconjugate taken
/// from the max-form dual.
pub fn involution_error(pair: &LegendrePair) -> f64 {
    let g = pair.primal.grid();
    let (x1, x2) = lattice(g);
    let (bi, _) = conjugate_on_lattice(&pair.dual_grid, pair.dual.values(), &x1, &x2);
    g.interior_nodes()
        .map(|k| (bi[k] - pair.primal.at(k)).abs())
        .fold(0.0, f64::max)
}

/// Residual of
/// `U*^{ij} D_ij ((|y|^2 + delta)^{q/2}/q + log det D^2 u*) = F0_z(Du*, y.Du* - u*) det D^2 u*`
/// at dual nodes whose 5x5 block is active (`NaN` elsewhere).
pub fn lt_dual_residual(
    pair: &LegendrePair,
    q: f64,
    delta: f64,
    f0z: &(dyn Fn(f64, f64, f64) -> f64 + Sync),
) -> Result<ScalarField> {
    let dg = pair.dual_grid.clone();
    let hd = pair.dual_hessian();
    let needed: Vec<bool> = (0..dg.len()).map(|k| dg.has_wide_neighborhood(k, 2)).collect();
    for k in 0..dg.len() {
        let near = needed[k] || (dg.has_full_neighborhood(k) && crate::geometry::Dir::ALL.iter().any(|&d| dg.neighbor(k, d).is_some_and(|n| needed[n])));
        if near {
            let d = hd.at(k).det();
            if !(d > 0.0) {
                return Err(Error::NonPositiveDeterminant { node: k, value: d });
            }
        }
    }
    let logdet = ScalarField::from_values(
        &dg,
        (0..dg.len())
            .map(|k| {
                let d = hd.at(k).det();
                if d > 0.0 {
                    d.ln()
                } else {
                    f64::NAN
                }
            })
            .collect(),
    )?;
    let hl = hessian(&logdet, None);
    let out = crate::par::map_range(dg.len(), |k| {
        if !needed[k] {
            return f64::NAN;
        }
        let m = hd.at(k);
        let (y1, y2) = dg.xy(k);
        let x = pair.map.at(k);
        let z = y1 * x.0 + y2 * x.1 - pair.smooth.at(k);
        let hs = power_hessian((y1, y2), q, delta);
        let hs = Sym2::new(hs.a11 + hl.at(k).a11, hs.a12 + hl.at(k).a12, hs.a22 + hl.at(k).a22);
        m.cofactor().contract(&hs) - f0z(x.0, x.1, z) * m.det()
    });
    ScalarField::from_values(&dg, out)
}

/// Hessian of `(|y|^2 + delta)^{q/2}/q`.
fn power_hessian(y: (f64, f64), q: f64, delta: f64) -> Sym2 {
    let s = y.0 * y.0 + y.1 * y.1 + delta;
    let a = if q == 2.0 { 1.0 } else { s.powf(0.5 * (q - 2.0)) };
    if s == 0.0 {
        return Sym2::new(a, 0.0, a);
    }
    let b = (q - 2.0) / s;
    Sym2::new(a * (1.0 + b * y.0 * y.0), a * b * y.0 * y.1, a * (1.0 + b * y.1 * y.1))
}

/// Partial Legendre transform in `x1` along every `stride`-th grid row.
#[derive(Debug, Clone)]
pub struct PartialLegendrePair {
    pub primal: ScalarField,
    /// Max-form `u*(xi, eta)` on the `(xi, eta)` grid.
    pub dual: ScalarField,
    /// Model-corrected values used for derivatives.
    pub smooth: ScalarField,
    pub dual_grid: Arc<Grid2D>,
    /// Interpolated `x1` per dual node.
    pub map: ScalarField,
    /// Maximising primal node per dual node.
    pub argmax: Vec<usize>,
    pub stride: usize,
    pub primal_gradient: VectorField,
    pub primal_hessian: SymMatField,
}

/// Centered partial derivatives of the transform.
#[derive(Debug, Clone)]
pub struct PartialDerivatives {
    pub xi: ScalarField,
    pub eta: ScalarField,
    pub xixi: ScalarField,
    pub etaeta: ScalarField,
    pub xieta: ScalarField,
}

fn lerp_rows(rows: &[(f64, f64, f64)], eta: f64) -> Option<(f64, f64)> {
    let p = rows.partition_point(|r| r.0 <= eta);
    if p == 0 || p > rows.len() {
        return None;
    }
    if p == rows.len() {
        let r = rows[p - 1];
        return (eta - r.0 <= 1e-12).then_some((r.1, r.2));
    }
    let (a, b) = (rows[p - 1], rows[p]);
    let t = (eta - a.0) / (b.0 - a.0);
    Some((a.1 + t * (b.1 - a.1), a.2 + t * (b.2 - a.2)))
}

/// Partial Legendre transform `u*(xi, eta) = max_x1 (x1 xi - u(x1, eta))` on
/// rows `eta = x2` spaced `stride * h` apart, onto a `xi`-grid of the same
/// spacing spanning `[min u_x1, max u_x1]`.
pub fn partial_legendre(u: &ScalarField, bc: BoundaryData<'_>, stride: usize) -> Result<PartialLegendrePair> {
    let g = u.grid().clone();
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let grad = gradient(u, bc);
    let hs = hessian(u, bc);
    for k in g.interior_nodes() {
        let a = hs.at(k).a11;
        if !(a > 1e-12) {
            return Err(Error::NonConvexCoefficient { node: k, min_eig: a });
        }
    }
    let (nx, ny, h) = (g.nx(), g.ny(), g.h());
    let mid = ny / 2;
    let rows: Vec<usize> = (0..ny)
        .filter(|&j| j.abs_diff(mid) % stride == 0)
        .filter(|&j| (0..nx).filter(|&i| g.is_active(g.idx(i, j))).count() >= 2)
        .collect();
    if rows.len() < 5 {
        return Err(Error::InvalidGrid(format!("only {} rows for the partial transform", rows.len())));
    }
    let mut ranges = Vec::with_capacity(rows.len());
    for &j in &rows {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..nx {
            let k = g.idx(i, j);
            if g.is_active(k) {
                lo = lo.min(grad.at(k).0);
                hi = hi.max(grad.at(k).0);
            }
        }
        ranges.push((g.xy(g.idx(0, j)).1, lo, hi));
    }
    let xlo = ranges.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let xhi = ranges.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    let hd = stride as f64 * h;
    let nxi = (((xhi - xlo) / hd).ceil() as usize + 1).max(5);
    let xi0 = 0.5 * (xlo + xhi) - 0.5 * (nxi - 1) as f64 * hd;
    let eta0 = ranges[0].0;
    let eta1 = ranges[ranges.len() - 1].0;
    let rr = ranges.clone();
    let rho: ScalarFn = Arc::new(move |xi, eta| match lerp_rows(&rr, eta) {
        Some((lo, hi)) => (lo - xi).max(xi - hi).max(eta0 - eta).max(eta - eta1),
        None => (eta0 - eta).max(eta - eta1).max(1e-3),
    });
    let mask = ConvexDomain::new(rho, BBox::new(xlo, xhi, eta0, eta1)).with_label("partial gradient image");
    let dg = Arc::new(Grid2D::with_layout(&mask, nxi, rows.len(), hd, xi0, eta0)?);
    let xis: Vec<f64> = (0..nxi).map(|a| xi0 + a as f64 * hd).collect();
    let cap = 2.0 * h;
    let per_row = crate::par::map_slice(&rows, |&j| {
        let is: Vec<usize> = (0..nx).filter(|&i| g.is_active(g.idx(i, j))).collect();
        let xs: Vec<f64> = is.iter().map(|&i| g.xy(g.idx(i, j)).0).collect();
        let fs: Vec<f64> = is.iter().map(|&i| u.at(g.idx(i, j))).collect();
        conjugate_1d(&xs, &fs, &xis)
            .into_iter()
            .zip(&xis)
            .map(|((v, t), &xi)| {
                let k = g.idx(is[t], j);
                let (p, a) = (grad.at(k).0, hs.at(k).a11);
                let (mut d, mut c) = (0.0, 0.0);
                if a > 0.0 {
                    let full = (xi - p) / a;
                    let tt = if full.abs() > cap { cap / full.abs() } else { 1.0 };
                    d = tt * full;
                    c = tt * (xi - p) * full - 0.5 * tt * tt * a * full * full;
                }
                match refine_1d(&g, u.values(), k, xi, xs[t] + d) {
                    Some((xr, vr)) => (v, vr, xr, k),
                    None => (v, v + c, xs[t] + d, k),
                }
            })
            .collect::<Vec<_>>()
    });
    let mut dual = vec![f64::NAN; dg.len()];
    let mut smooth = vec![f64::NAN; dg.len()];
    let mut map = vec![f64::NAN; dg.len()];
    let mut argmax = vec![NO_NODE; dg.len()];
    for (b, row) in per_row.into_iter().enumerate() {
        for (a, (v, s, x, k)) in row.into_iter().enumerate() {
            let kd = dg.idx(a, b);
            if dg.is_active(kd) {
                dual[kd] = v;
                smooth[kd] = s;
                map[kd] = x;
                argmax[kd] = k;
            }
        }
    }
    Ok(PartialLegendrePair {
        primal: u.clone(),
        dual: ScalarField::from_values(&dg, dual)?,
        smooth: ScalarField::from_values(&dg, smooth)?,
        map: ScalarField::from_values(&dg, map)?,
        dual_grid: dg,
        argmax,
        stride,
        primal_gradient: grad,
        primal_hessian: hs,
    })
}

fn centered(f: &ScalarField, k: usize) -> Option<(f64, f64, f64, f64, f64)> {
    let g = f.grid();
    if !g.has_full_neighborhood(k) {
        return None;
    }
    let (i, j) = g.ij(k);
    let v = |di: isize, dj: isize| f.at(g.idx((i as isize + di) as usize, (j as isize + dj) as usize));
    let h = g.h();
    let c = v(0, 0);
    let out = (
        (v(1, 0) - v(-1, 0)) / (2.0 * h),
        (v(0, 1) - v(0, -1)) / (2.0 * h),
        (v(1, 0) - 2.0 * c + v(-1, 0)) / (h * h),
        (v(0, 1) - 2.0 * c + v(0, -1)) / (h * h),
        (v(1, 1) - v(1, -1) - v(-1, 1) + v(-1, -1)) / (4.0 * h * h),
    );
    [out.0, out.1, out.2, out.3, out.4].iter().all(|x| x.is_finite()).then_some(out)
}

impl PartialLegendrePair {
    /// Centered derivatives of the smoothed transform at dual nodes whose 3x3
    /// block is active.
    pub fn derivatives(&self) -> PartialDerivatives {
        let dg = &self.dual_grid;
        let d: Vec<_> = crate::par::map_range(dg.len(), |k| centered(&self.smooth, k));
        let pick = |f: fn(&(f64, f64, f64, f64, f64)) -> f64| {
            ScalarField::from_values(dg, d.iter().map(|o| o.as_ref().map_or(f64::NAN, f)).collect())
                .expect("sized by grid")
        };
        PartialDerivatives {
            xi: pick(|o| o.0),
            eta: pick(|o| o.1),
            xixi: pick(|o| o.2),
            etaeta: pick(|o| o.3),
            xieta: pick(|o| o.4),
        }
    }

    /// [`core_sup`] of a field on the `(xi, eta)` grid.
    pub fn core_sup(&self, r: &ScalarField, frac: f64) -> f64 {
        core_sup(r, |k| (self.map.at(k), self.dual_grid.xy(k).1), self.primal.grid(), frac)
    }

    /// `w* = -u*_etaeta / u*_xixi`.
    pub fn w_star(&self) -> ScalarField {
        let d = self.derivatives();
        d.etaeta.map(|k, e| -e / d.xixi.at(k))
    }

    /// Sup errors of `u*_xi = x1`, `u*_eta = -u_x2`, `u*_xieta = -u_x1x2/u_x1x1`
    /// and `w* = det D^2 u` at dual nodes with derivatives, primal quantities
    /// interpolated at `(x1, eta)`.
    pub fn identity_errors(&self) -> [f64; 4] {
        let d = self.derivatives();
        let g = self.primal.grid();
        let comp = |f: &dyn Fn(usize) -> f64| {
            ScalarField::from_values(g, (0..g.len()).map(f).collect()).expect("sized by grid")
        };
        let ux2 = comp(&|k| self.primal_gradient.at(k).1);
        let ratio = comp(&|k| {
            let m = self.primal_hessian.at(k);
            -m.a12 / m.a11
        });
        let det = comp(&|k| self.primal_hessian.at(k).det());
        let mut e = [0.0f64; 4];
        for k in 0..self.dual_grid.len() {
            if !d.xixi.at(k).is_finite() {
                continue;
            }
            let (x1, eta) = (self.map.at(k), self.dual_grid.xy(k).1);
            let (Some(a), Some(b), Some(c)) = (
                interpolate(&ux2, x1, eta),
                interpolate(&ratio, x1, eta),
                interpolate(&det, x1, eta),
            ) else {
                continue;
            };
            e[0] = e[0].max((d.xi.at(k) - x1).abs());
            e[1] = e[1].max((d.eta.at(k) + a).abs());
            e[2] = e[2].max((d.xieta.at(k) - b).abs());
            e[3] = e[3].max((-d.etaeta.at(k) / d.xixi.at(k) - c).abs());
        }
        e
    }
}

/// Residual `w* w*_xixi + w*_etaeta - w*_xi^2 - (2/w*) w*_eta^2 - w*^2 f*` at
/// dual nodes whose 5x5 block is active (`NaN` elsewhere).
pub fn plt_dual_residual(
    pair: &PartialLegendrePair,
    q: f64,
    delta: f64,
    f0z: &(dyn Fn(f64, f64, f64) -> f64 + Sync),
) -> Result<ScalarField> {
    let dg = pair.dual_grid.clone();
    let d = pair.derivatives();
    let ws = d.etaeta.map(|k, e| -e / d.xixi.at(k));
    let needed: Vec<bool> = (0..dg.len()).map(|k| dg.has_wide_neighborhood(k, 2)).collect();
    for k in 0..dg.len() {
        if needed[k] && !(ws.at(k) > 0.0) {
            return Err(Error::NonPositiveWeight { node: k, value: ws.at(k) });
        }
    }
    let out = crate::par::map_range(dg.len(), |k| {
        if !needed[k] {
            return f64::NAN;
        }
        let Some((w1, w2, w11, w22, _)) = centered(&ws, k) else {
            return f64::NAN;
        };
        let w = ws.at(k);
        let (xi, eta) = dg.xy(k);
        let (ue, uxx, uee, uxe) = (d.eta.at(k), d.xixi.at(k), d.etaeta.at(k), d.xieta.at(k));
        let a = xi * xi + ue * ue + delta;
        let z = xi * d.xi.at(k) - pair.smooth.at(k);
        let mut f = a.powf(0.5 * q - 1.0) * (1.0 + uxe * uxe - uee * uxx);
        if q != 2.0 {
            f += (q - 2.0)
                * a.powf(0.5 * q - 2.0)
                * ((xi + ue * uxe).powi(2) - ue * ue * uxx * uee);
        }
        f -= f0z(d.xi.at(k), eta, z) * uxx;
        w * w11 + w22 - w1 * w1 - 2.0 / w * w2 * w2 - w * w * f
    });
    ScalarField::from_values(&dg, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_grid;
    use rand::{Rng, SeedableRng};

    fn disk(n: usize) -> Arc<Grid2D> {
        Arc::new(build_grid(&ConvexDomain::disk(0.0, 0.0, 1.0), n).unwrap())
    }

    fn half_r2(x: f64, y: f64) -> f64 {
        0.5 * (x * x + y * y)
    }

    #[test]
    fn lagrange_basis_reproduces_quartics() {
        for &s in &[-0.5, 0.3, 2.0, 3.7] {
            let l = lagrange5(s);
            let f = |t: f64| t.powi(4) - 2.0 * t * t + t;
            let (mut p, mut d1, mut d2) = (0.0, 0.0, 0.0);
            for a in 0..5 {
                p += f(a as f64) * l[0][a];
                d1 += f(a as f64) * l[1][a];
                d2 += f(a as f64) * l[2][a];
            }
            assert!((p - f(s)).abs() < 1e-10);
            assert!((d1 - (4.0 * s.powi(3) - 4.0 * s + 1.0)).abs() < 1e-10);
            assert!((d2 - (12.0 * s * s - 4.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn conjugate_1d_matches_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..40).map(|i| i as f64 * 0.1 - 2.0).collect();
        let fs: Vec<f64> = xs.iter().map(|x| x * x + rng.gen_range(-0.3..0.3)).collect();
        let ys: Vec<f64> = (0..57).map(|i| -5.0 + i as f64 * 0.18).collect();
        for ((v, i), &y) in conjugate_1d(&xs, &fs, &ys).into_iter().zip(&ys) {
            let best = xs.iter().zip(&fs).map(|(x, f)| x * y - f).fold(f64::NEG_INFINITY, f64::max);
            assert!((v - best).abs() < 1e-12);
            assert!((xs[i] * y - fs[i] - best).abs() < 1e-12);
        }
    }

    #[test]
    fn quartic_slice_conjugate() {
        let n = 65;
        let xs: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
        let fs: Vec<f64> = xs.iter().map(|x| x.powi(4) / 4.0).collect();
        let ys: Vec<f64> = (0..21).map(|i| -1.0 + 0.1 * i as f64).collect();
        for ((v, _), &y) in conjugate_1d(&xs, &fs, &ys).into_iter().zip(&ys) {
            assert!((v - 0.75 * y.abs().powf(4.0 / 3.0)).abs() < 5e-2);
        }
    }

    #[test]
    fn ties_go_to_smallest_index() {
        let xs = [-1.0, 0.0, 1.0];
        let fs = [0.0, 0.0, 0.0];
        let r = conjugate_1d(&xs, &fs, &[0.0]);
        assert_eq!(r[0], (0.0, 0));
    }

    #[test]
    fn self_dual_quadratic() {
        let g = disk(33);
        let u = ScalarField::from_fn(&g, half_r2);
        let p = legendre_transform(&u, Some(&half_r2), 33).unwrap();
        let dg = &p.dual_grid;
        let mut worst: f64 = 0.0;
        for &k in dg.active_nodes() {
            let (a, b) = dg.xy(k);
            worst = worst.max((p.dual.at(k) - half_r2(a, b)).abs());
            assert!((p.smooth.at(k) - half_r2(a, b)).abs() < 1e-12);
        }
        assert!(worst <= 2.0 * g.h(), "{worst}");
        assert!(involution_error(&p) <= 4.0 * g.h());
        assert!(p.young_error() <= p.dual_grid.h().powi(2));
        let (e, c) = p.reciprocal_det_error();
        assert!(c > 0 && e < 1e-9);
    }

    #[test]
    fn lattice_conjugate_matches_direct_scan() {
        let g = disk(17);
        let f = |x: f64, y: f64| (x + 2.0 * y).abs() + 0.3 * x - 0.1 * y;
        let u = ScalarField::from_fn(&g, f);
        let y1: Vec<f64> = (0..15).map(|i| -3.0 + 0.4 * i as f64).collect();
        let y2: Vec<f64> = (0..13).map(|i| -2.5 + 0.41 * i as f64).collect();
        let (vals, _) = conjugate_on_lattice(&g, u.values(), &y1, &y2);
        for (b, &yb) in y2.iter().enumerate() {
            for (a, &ya) in y1.iter().enumerate() {
                let (v, _) = conjugate_brute_force(&g, u.values(), (ya, yb));
                assert!((vals[b * y1.len() + a] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn order_reversal() {
        let g = disk(17);
        let u = ScalarField::from_fn(&g, half_r2);
        let v = ScalarField::from_fn(&g, |x, y| half_r2(x, y) + 0.1 + 0.05 * x * x);
        let y: Vec<f64> = (0..11).map(|i| -1.0 + 0.2 * i as f64).collect();
        let (a, _) = conjugate_on_lattice(&g, u.values(), &y, &y);
        let (b, _) = conjugate_on_lattice(&g, v.values(), &y, &y);
        assert!(a.iter().zip(&b).all(|(p, q)| p >= q));
    }

    #[test]
    fn saddle_rejected() {
        let g = disk(17);
        let u = ScalarField::from_fn(&g, |x, y| x * x - y * y);
        assert!(matches!(legendre_transform(&u, None, 17), Err(Error::NonConvexCoefficient { .. })));
    }

    #[test]
    fn quadratic_dual_residuals() {
        let g = disk(33);
        let u = ScalarField::from_fn(&g, half_r2);
        let p = legendre_transform(&u, Some(&half_r2), 25).unwrap();
        let r0 = lt_dual_residual(&p, 2.0, 0.0, &|_, _, _| 2.0).unwrap();
        let r2 = lt_dual_residual(&p, 2.0, 0.0, &|_, _, _| 0.0).unwrap();
        assert!(r0.values().iter().any(|v| v.is_finite()));
        assert!(finite_sup(&r0) < 1e-6);
        assert!(r2.values().iter().filter(|v| v.is_finite()).all(|v| (v - 2.0).abs() < 1e-6));
        let pp = partial_legendre(&u, Some(&half_r2), 2).unwrap();
        let s0 = plt_dual_residual(&pp, 2.0, 0.0, &|_, _, _| 2.0).unwrap();
        let s2 = plt_dual_residual(&pp, 2.0, 0.0, &|_, _, _| 0.0).unwrap();
        assert!(s0.values().iter().any(|v| v.is_finite()));
        assert!(finite_sup(&s0) < 1e-6);
        assert!(s2.values().iter().filter(|v| v.is_finite()).all(|v| (v + 2.0).abs() < 1e-6));
    }

    #[test]
    fn partial_transform_of_quadratic() {
        let g = disk(33);
        let u = ScalarField::from_fn(&g, half_r2);
        let pp = partial_legendre(&u, Some(&half_r2), 1).unwrap();
        for &k in pp.dual_grid.active_nodes() {
            let (xi, eta) = pp.dual_grid.xy(k);
            assert!((pp.smooth.at(k) - 0.5 * (xi * xi - eta * eta)).abs() < 1e-12);
        }
        let e = pp.identity_errors();
        assert!(e.iter().all(|&v| v < 1e-8), "{e:?}");
    }

    #[test]
    fn partial_quartic_weight() {
        let g = disk(65);
        let f = |x: f64, y: f64| 0.5 * x * x + y.powi(4) / 12.0;
        let u = ScalarField::from_fn(&g, f);
        let pp = partial_legendre(&u, Some(&f), 2).unwrap();
        let ws = pp.w_star();
        let mut n = 0;
        for k in 0..ws.values().len() {
            if ws.at(k).is_finite() {
                let eta = pp.dual_grid.xy(k).1;
                assert!((ws.at(k) - eta * eta).abs() < 0.01);
                n += 1;
            }
        }
        assert!(n > 20);
    }

    #[test]
    fn partial_invariance_slice() {
        let g = Arc::new(build_grid(&ConvexDomain::square(0.0, 0.0, 1.0), 33).unwrap());
        let f = |x: f64, _y: f64| (x + 0.3).powi(2) + x.powi(4);
        let u = ScalarField::from_fn(&g, f);
        let pp = partial_legendre(&u, Some(&f), 1).unwrap();
        let d = pp.derivatives();
        for k in 0..d.eta.values().len() {
            if d.eta.at(k).is_finite() {
                assert_eq!(d.eta.at(k), 0.0);
                assert_eq!(d.xieta.at(k), 0.0);
            }
        }
    }
}
