//! Linear finite-difference stencils over active nodes, with boundary
//! crossing terms kept symbolic so any Dirichlet data can be applied later.

use std::f64::consts::SQRT_2;

use super::grid::{Dir, Grid2D};

/// How stencils treat a missing (exterior) neighbour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryMode {
    /// Shortley–Weller: use the boundary value at the `rho = 0` crossing.
    Dirichlet,
    /// Extrapolate with one-sided interior differences.
    OneSided,
}

/// `sum_i c_i u[node_i] + sum_j d_j g(x_j, y_j)` where `g` is boundary data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinComb {
    pub nodes: Vec<(usize, f64)>,
    pub boundary: Vec<((f64, f64), f64)>,
}

impl LinComb {
    fn node(k: usize, c: f64) -> Self {
        Self {
            nodes: vec![(k, c)],
            boundary: Vec::new(),
        }
    }

    fn push_node(&mut self, k: usize, c: f64) {
        if let Some(e) = self.nodes.iter_mut().find(|e| e.0 == k) {
            e.1 += c;
        } else {
            self.nodes.push((k, c));
        }
    }

    fn add_scaled(&mut self, other: &LinComb, s: f64) {
        for &(k, c) in &other.nodes {
            self.push_node(k, s * c);
        }
        for &(p, c) in &other.boundary {
            self.boundary.push((p, s * c));
        }
    }

    fn scaled(mut self, s: f64) -> Self {
        for e in &mut self.nodes {
            e.1 *= s;
        }
        for e in &mut self.boundary {
            e.1 *= s;
        }
        self
    }

    /// Evaluate against node values and optional boundary data.
    #[inline]
    pub fn eval(&self, values: &[f64], bc: Option<&(dyn Fn(f64, f64) -> f64 + Sync)>) -> f64 {
        let mut s = 0.0;
        for &(k, c) in &self.nodes {
            s += c * values[k];
        }
        if let Some(g) = bc {
            for &((x, y), c) in &self.boundary {
                s += c * g(x, y);
            }
        }
        s
    }

    /// Only the boundary contribution.
    pub fn eval_boundary(&self, bc: &(dyn Fn(f64, f64) -> f64 + Sync)) -> f64 {
        self.boundary.iter().map(|&((x, y), c)| c * bc(x, y)).sum()
    }
}

/// Value at a point along direction `d` from `k` at unit distance `t`:
/// either an active node (t = 1) or a boundary crossing.
enum Reach {
    Node(usize),
    Boundary((f64, f64), f64),
}

fn reach(grid: &Grid2D, k: usize, d: Dir) -> Option<Reach> {
    if let Some(m) = grid.active_neighbor(k, d) {
        return Some(Reach::Node(m));
    }
    let p = grid.crossing_point(k, d)?;
    Some(Reach::Boundary(p, grid.theta(k, d)?))
}

fn step(d: Dir, h: f64) -> f64 {
    if d.is_diagonal() {
        h * SQRT_2
    } else {
        h
    }
}

/// Second derivative along the line through `k` in direction `plus`
/// (unit-length direction derivative).
pub fn second_derivative(grid: &Grid2D, k: usize, plus: Dir, mode: BoundaryMode) -> Option<LinComb> {
    let minus = plus.opposite();
    let s = step(plus, grid.h());
    let rp = grid.active_neighbor(k, plus);
    let rm = grid.active_neighbor(k, minus);
    if let (Some(p), Some(m)) = (rp, rm) {
        let mut lc = LinComb::node(p, 1.0 / (s * s));
        lc.push_node(m, 1.0 / (s * s));
        lc.push_node(k, -2.0 / (s * s));
        return Some(lc);
    }
    match mode {
        BoundaryMode::Dirichlet => {
            let a_reach = reach(grid, k, minus)?;
            let b_reach = reach(grid, k, plus)?;
            let a = match a_reach {
                Reach::Node(_) => s,
                Reach::Boundary(_, t) => t * s,
            };
            let b = match b_reach {
                Reach::Node(_) => s,
                Reach::Boundary(_, t) => t * s,
            };
            let cm = 2.0 / (a * (a + b));
            let cp = 2.0 / (b * (a + b));
            let mut lc = LinComb::node(k, -2.0 / (a * b));
            for (r, c) in [(a_reach, cm), (b_reach, cp)] {
                match r {
                    Reach::Node(m) => lc.push_node(m, c),
                    Reach::Boundary(pt, _) => lc.boundary.push((pt, c)),
                }
            }
            Some(lc)
        }
        BoundaryMode::OneSided => {
            // (u0 - 2 u1 + u2) / s^2 on the available side
            let (dir, first) = if let Some(p) = rp { (plus, p) } else { (minus, rm?) };
            let second = grid.active_neighbor(first, dir)?;
            let mut lc = LinComb::node(k, 1.0 / (s * s));
            lc.push_node(first, -2.0 / (s * s));
            lc.push_node(second, 1.0 / (s * s));
            Some(lc)
        }
    }
}

/// First derivative along `plus` (unit-length direction derivative).
pub fn first_derivative(grid: &Grid2D, k: usize, plus: Dir, mode: BoundaryMode) -> Option<LinComb> {
    let minus = plus.opposite();
    let s = step(plus, grid.h());
    let rp = grid.active_neighbor(k, plus);
    let rm = grid.active_neighbor(k, minus);
    if let (Some(p), Some(m)) = (rp, rm) {
        let mut lc = LinComb::node(p, 0.5 / s);
        lc.push_node(m, -0.5 / s);
        return Some(lc);
    }
    match mode {
        BoundaryMode::Dirichlet => {
            let a_reach = reach(grid, k, minus)?;
            let b_reach = reach(grid, k, plus)?;
            let a = match a_reach {
                Reach::Node(_) => s,
                Reach::Boundary(_, t) => t * s,
            };
            let b = match b_reach {
                Reach::Node(_) => s,
                Reach::Boundary(_, t) => t * s,
            };
            // quadratic through (-a, um), (0, u0), (b, up)
            let cm = -b / (a * (a + b));
            let c0 = (b - a) / (a * b);
            let cp = a / (b * (a + b));
            let mut lc = LinComb::node(k, c0);
            for (r, c) in [(a_reach, cm), (b_reach, cp)] {
                match r {
                    Reach::Node(m) => lc.push_node(m, c),
                    Reach::Boundary(pt, _) => lc.boundary.push((pt, c)),
                }
            }
            Some(lc)
        }
        BoundaryMode::OneSided => {
            let (dir, sign, first) = if let Some(p) = rp {
                (plus, 1.0, p)
            } else {
                (minus, -1.0, rm?)
            };
            let second = grid.active_neighbor(first, dir)?;
            let mut lc = LinComb::node(k, -1.5 * sign / s);
            lc.push_node(first, 2.0 * sign / s);
            lc.push_node(second, -0.5 * sign / s);
            Some(lc)
        }
    }
}

/// Linear stencils for the three Hessian components at one node.
#[derive(Debug, Clone)]
pub struct HessianRow {
    pub h11: LinComb,
    pub h12: LinComb,
    pub h22: LinComb,
}

/// Hessian stencil at `k`. The mixed derivative uses the four-point cross when
/// all diagonal neighbours are active, a diagonal pair combined with the axis
/// second derivatives when only one pair is, and diagonal second derivatives
/// otherwise. All variants are exact on quadratics.
pub fn hessian_row(grid: &Grid2D, k: usize, mode: BoundaryMode) -> Option<HessianRow> {
    let h11 = second_derivative(grid, k, Dir::E, mode)?;
    let h22 = second_derivative(grid, k, Dir::N, mode)?;
    let h = grid.h();
    let ne = grid.active_neighbor(k, Dir::NE);
    let sw = grid.active_neighbor(k, Dir::SW);
    let nw = grid.active_neighbor(k, Dir::NW);
    let se = grid.active_neighbor(k, Dir::SE);
    let h12 = match (ne, sw, nw, se) {
        (Some(a), Some(b), Some(c), Some(d)) => {
            let w = 0.25 / (h * h);
            let mut lc = LinComb::node(a, w);
            lc.push_node(b, w);
            lc.push_node(c, -w);
            lc.push_node(d, -w);
            lc
        }
        (Some(a), Some(b), _, _) => {
            // u12 = [(u_ne + u_sw - 2u)/h^2 - u11 - u22] / 2
            let mut lc = LinComb::node(a, 0.5 / (h * h));
            lc.push_node(b, 0.5 / (h * h));
            lc.push_node(k, -1.0 / (h * h));
            lc.add_scaled(&h11, -0.5);
            lc.add_scaled(&h22, -0.5);
            lc
        }
        (_, _, Some(c), Some(d)) => {
            let mut lc = LinComb::node(c, -0.5 / (h * h));
            lc.push_node(d, -0.5 / (h * h));
            lc.push_node(k, 1.0 / (h * h));
            lc.add_scaled(&h11, 0.5);
            lc.add_scaled(&h22, 0.5);
            lc
        }
        _ => {
            let dp = second_derivative(grid, k, Dir::NE, mode)?;
            let dm = second_derivative(grid, k, Dir::NW, mode)?;
            let mut lc = dp.scaled(0.5);
            lc.add_scaled(&dm, -0.5);
            lc
        }
    };
    Some(HessianRow { h11, h12, h22 })
}

/// Gradient stencil `(d/dx, d/dy)` at `k`.
pub fn gradient_row(grid: &Grid2D, k: usize, mode: BoundaryMode) -> Option<(LinComb, LinComb)> {
    Some((
        first_derivative(grid, k, Dir::E, mode)?,
        first_derivative(grid, k, Dir::N, mode)?,
    ))
}

/// Hessian stencils for every active node (`None` where no stencil exists).
#[derive(Debug, Clone)]
pub struct HessianStencil {
    pub rows: Vec<Option<HessianRow>>,
    pub mode: BoundaryMode,
}

impl HessianStencil {
    pub fn new(grid: &Grid2D, mode: BoundaryMode) -> Self {
        let rows = crate::par::map_range(grid.len(), |k| {
            if grid.is_active(k) {
                hessian_row(grid, k, mode)
            } else {
                None
            }
        });
        Self { rows, mode }
    }
}
