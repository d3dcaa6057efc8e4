use crate::error::{Error, Result};

use super::domain::{BBox, ConvexDomain};

/// Classification of a grid node relative to the domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeClass {
    /// `rho < 0` and all four axis neighbours have `rho < 0`.
    Interior,
    /// `rho < 0` with at least one axis neighbour at `rho >= 0`.
    BoundaryAdjacent,
    /// `rho >= 0`.
    Exterior,
}

/// The eight stencil directions. Axis directions first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dir {
    E,
    W,
    N,
    S,
    NE,
    SW,
    NW,
    SE,
}

impl Dir {
    pub const ALL: [Dir; 8] = [
        Dir::E,
        Dir::W,
        Dir::N,
        Dir::S,
        Dir::NE,
        Dir::SW,
        Dir::NW,
        Dir::SE,
    ];
    pub const AXIS: [Dir; 4] = [Dir::E, Dir::W, Dir::N, Dir::S];

    pub fn offset(self) -> (isize, isize) {
        match self {
            Dir::E => (1, 0),
            Dir::W => (-1, 0),
            Dir::N => (0, 1),
            Dir::S => (0, -1),
            Dir::NE => (1, 1),
            Dir::SW => (-1, -1),
            Dir::NW => (-1, 1),
            Dir::SE => (1, -1),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn opposite(self) -> Dir {
        match self {
            Dir::E => Dir::W,
            Dir::W => Dir::E,
            Dir::N => Dir::S,
            Dir::S => Dir::N,
            Dir::NE => Dir::SW,
            Dir::SW => Dir::NE,
            Dir::NW => Dir::SE,
            Dir::SE => Dir::NW,
        }
    }

    pub fn is_diagonal(self) -> bool {
        matches!(self, Dir::NE | Dir::SW | Dir::NW | Dir::SE)
    }
}

const NOT_UNKNOWN: usize = usize::MAX;

/// Uniform Cartesian grid over a domain's bounding box with node
/// classification and boundary crossing offsets.
#[derive(Debug, Clone)]
pub struct Grid2D {
    nx: usize,
    ny: usize,
    h: f64,
    xmin: f64,
    ymin: f64,
    class: Vec<NodeClass>,
    /// Fractional distance to the `rho = 0` crossing for each direction whose
    /// neighbour is exterior (or off-grid). `NaN` where the neighbour is active.
    offsets: Vec<[f64; 8]>,
    inner: Vec<bool>,
    unknown_of_node: Vec<usize>,
    node_of_unknown: Vec<usize>,
    domain: ConvexDomain,
    cell_frac: Vec<f64>,
    cell_frac_inner: Option<Vec<f64>>,
}

/// Build the grid with `n` nodes along x. The y node count follows from the
/// equal-spacing requirement; the y range is extended upward when the box
/// height is not a multiple of the spacing.
pub fn build_grid(domain: &ConvexDomain, n: usize) -> Result<Grid2D> {
    Grid2D::new(domain, n)
}

impl Grid2D {
    pub fn new(domain: &ConvexDomain, n: usize) -> Result<Self> {
        if n < 5 {
            return Err(Error::InvalidGrid(format!("n = {n} < 5")));
        }
        let b = domain.bbox();
        if b.is_degenerate() {
            return Err(Error::InvalidGrid("degenerate bounding box".into()));
        }
        let h = b.width() / (n - 1) as f64;
        let ny = ((b.height() / h) - 1e-9).ceil().max(0.0) as usize + 1;
        if ny < 5 {
            return Err(Error::InvalidGrid(format!("ny = {ny} < 5")));
        }
        Self::from_parts(domain.clone(), n, ny, h, b.xmin, b.ymin)
    }

    /// Grid with explicit origin, spacing and node counts.
    pub fn with_layout(
        domain: &ConvexDomain,
        nx: usize,
        ny: usize,
        h: f64,
        xmin: f64,
        ymin: f64,
    ) -> Result<Self> {
        if nx < 5 || ny < 5 || !(h > 0.0) {
            return Err(Error::InvalidGrid(format!("nx={nx} ny={ny} h={h}")));
        }
        Self::from_parts(domain.clone(), nx, ny, h, xmin, ymin)
    }

    fn from_parts(
        domain: ConvexDomain,
        nx: usize,
        ny: usize,
        h: f64,
        xmin: f64,
        ymin: f64,
    ) -> Result<Self> {
        let total = nx * ny;
        let xy = |i: isize, j: isize| (xmin + i as f64 * h, ymin + j as f64 * h);
        let rho_at: Vec<f64> = (0..total)
            .map(|k| {
                let (x, y) = xy((k % nx) as isize, (k / nx) as isize);
                domain.rho(x, y)
            })
            .collect();
        let inside = |i: isize, j: isize| -> bool {
            if i < 0 || j < 0 || i >= nx as isize || j >= ny as isize {
                let (x, y) = xy(i, j);
                domain.rho(x, y) < 0.0
            } else {
                rho_at[j as usize * nx + i as usize] < 0.0
            }
        };

        let mut class = vec![NodeClass::Exterior; total];
        let mut offsets = vec![[f64::NAN; 8]; total];
        for j in 0..ny as isize {
            for i in 0..nx as isize {
                let k = j as usize * nx + i as usize;
                if !inside(i, j) {
                    continue;
                }
                let all_axis = Dir::AXIS.iter().all(|d| {
                    let (di, dj) = d.offset();
                    inside(i + di, j + dj)
                });
                class[k] = if all_axis {
                    NodeClass::Interior
                } else {
                    NodeClass::BoundaryAdjacent
                };
                for d in Dir::ALL {
                    let (di, dj) = d.offset();
                    if !inside(i + di, j + dj) {
                        let p = xy(i, j);
                        let q = xy(i + di, j + dj);
                        offsets[k][d.index()] = crossing_fraction(&domain, p, q, h);
                    }
                }
            }
        }
        if !class.iter().any(|c| *c == NodeClass::Interior) {
            return Err(Error::EmptyInterior);
        }

        let inner: Vec<bool> = (0..total)
            .map(|k| {
                let (x, y) = xy((k % nx) as isize, (k / nx) as isize);
                class[k] != NodeClass::Exterior && domain.inner_contains(x, y)
            })
            .collect();

        let mut unknown_of_node = vec![NOT_UNKNOWN; total];
        let mut node_of_unknown = Vec::new();
        for k in 0..total {
            if class[k] != NodeClass::Exterior {
                unknown_of_node[k] = node_of_unknown.len();
                node_of_unknown.push(k);
            }
        }

        let cell_frac = cell_fractions(nx, ny, h, xmin, ymin, |x, y| domain.contains(x, y));
        let cell_frac_inner = domain.has_inner().then(|| {
            cell_fractions(nx, ny, h, xmin, ymin, |x, y| {
                domain.contains(x, y) && domain.inner_contains(x, y)
            })
        });

        Ok(Self {
            nx,
            ny,
            h,
            xmin,
            ymin,
            class,
            offsets,
            inner,
            unknown_of_node,
            node_of_unknown,
            domain,
            cell_frac,
            cell_frac_inner,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn domain(&self) -> &ConvexDomain {
        &self.domain
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(
            self.xmin,
            self.xmin + (self.nx - 1) as f64 * self.h,
            self.ymin,
            self.ymin + (self.ny - 1) as f64 * self.h,
        )
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    #[inline]
    pub fn xy(&self, k: usize) -> (f64, f64) {
        let (i, j) = self.ij(k);
        (self.xmin + i as f64 * self.h, self.ymin + j as f64 * self.h)
    }

    #[inline]
    pub fn class(&self, k: usize) -> NodeClass {
        self.class[k]
    }

    #[inline]
    pub fn is_active(&self, k: usize) -> bool {
        self.class[k] != NodeClass::Exterior
    }

    pub fn is_inner(&self, k: usize) -> bool {
        self.inner[k]
    }

    /// Neighbour node index in direction `d`, or `None` when off-grid.
    #[inline]
    pub fn neighbor(&self, k: usize, d: Dir) -> Option<usize> {
        let (i, j) = self.ij(k);
        let (di, dj) = d.offset();
        let (ni, nj) = (i as isize + di, j as isize + dj);
        if ni < 0 || nj < 0 || ni >= self.nx as isize || nj >= self.ny as isize {
            None
        } else {
            Some(nj as usize * self.nx + ni as usize)
        }
    }

    /// Active neighbour in direction `d`.
    #[inline]
    pub fn active_neighbor(&self, k: usize, d: Dir) -> Option<usize> {
        self.neighbor(k, d).filter(|&m| self.is_active(m))
    }

    /// Fractional distance to the boundary crossing in direction `d`, present
    /// only when that neighbour is exterior.
    pub fn theta(&self, k: usize, d: Dir) -> Option<f64> {
        let t = self.offsets[k][d.index()];
        (!t.is_nan()).then_some(t)
    }

    /// Coordinates of the boundary crossing in direction `d`.
    pub fn crossing_point(&self, k: usize, d: Dir) -> Option<(f64, f64)> {
        let t = self.theta(k, d)?;
        let (x, y) = self.xy(k);
        let (di, dj) = d.offset();
        Some((x + t * di as f64 * self.h, y + t * dj as f64 * self.h))
    }

    /// All eight neighbours are active.
    pub fn has_full_neighborhood(&self, k: usize) -> bool {
        self.is_active(k) && Dir::ALL.iter().all(|&d| self.active_neighbor(k, d).is_some())
    }

    /// The 5x5 block around `k` is active (needed by operators that difference
    /// a quantity which is itself a 3x3 stencil).
    pub fn has_wide_neighborhood(&self, k: usize, radius: usize) -> bool {
        let (i, j) = self.ij(k);
        let r = radius as isize;
        for dj in -r..=r {
            for di in -r..=r {
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if ni < 0 || nj < 0 || ni >= self.nx as isize || nj >= self.ny as isize {
                    return false;
                }
                if !self.is_active(nj as usize * self.nx + ni as usize) {
                    return false;
                }
            }
        }
        true
    }

    pub fn n_unknowns(&self) -> usize {
        self.node_of_unknown.len()
    }

    pub fn unknown_index(&self, k: usize) -> Option<usize> {
        let u = self.unknown_of_node[k];
        (u != NOT_UNKNOWN).then_some(u)
    }

    pub fn node_of_unknown(&self, u: usize) -> usize {
        self.node_of_unknown[u]
    }

    pub fn active_nodes(&self) -> &[usize] {
        &self.node_of_unknown
    }

    pub fn interior_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&k| self.class[k] == NodeClass::Interior)
    }

    pub fn boundary_adjacent_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&k| self.class[k] == NodeClass::BoundaryAdjacent)
    }

    /// Inside fraction of the cell whose lower-left corner is node `(i, j)`.
    pub fn cell_fraction(&self, i: usize, j: usize) -> f64 {
        self.cell_frac[j * (self.nx - 1) + i]
    }

    pub fn cell_fraction_inner(&self, i: usize, j: usize) -> Option<f64> {
        self.cell_frac_inner
            .as_ref()
            .map(|v| v[j * (self.nx - 1) + i])
    }

    /// All crossing points with their owning node and direction.
    pub fn crossings(&self) -> Vec<(usize, Dir, (f64, f64))> {
        let mut out = Vec::new();
        for &k in self.active_nodes() {
            for d in Dir::ALL {
                if let Some(p) = self.crossing_point(k, d) {
                    out.push((k, d, p));
                }
            }
        }
        out
    }
}

/// Bisection for the `rho = 0` crossing on the segment from the inside point
/// `p` to the outside point `q`.
fn crossing_fraction(domain: &ConvexDomain, p: (f64, f64), q: (f64, f64), h: f64) -> f64 {
    let at = |t: f64| domain.rho(p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1));
    if at(1.0) == 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let seg = ((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).sqrt();
    let tol = 1e-12 * h / seg.max(f64::MIN_POSITIVE);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if at(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    t.clamp(f64::EPSILON, 1.0)
}

fn cell_fractions(
    nx: usize,
    ny: usize,
    h: f64,
    xmin: f64,
    ymin: f64,
    inside: impl Fn(f64, f64) -> bool,
) -> Vec<f64> {
    const SUB: usize = 4;
    let mut out = vec![0.0; (nx - 1) * (ny - 1)];
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let (x0, y0) = (xmin + i as f64 * h, ymin + j as f64 * h);
            let mut count = 0usize;
            for b in 0..SUB {
                for a in 0..SUB {
                    let x = x0 + (a as f64 + 0.5) * h / SUB as f64;
                    let y = y0 + (b as f64 + 0.5) * h / SUB as f64;
                    if inside(x, y) {
                        count += 1;
                    }
                }
            }
            out[j * (nx - 1) + i] = count as f64 / (SUB * SUB) as f64;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn unit_disk_plain() -> ConvexDomain {
        ConvexDomain::new(
            Arc::new(|x: f64, y: f64| x * x + y * y - 1.0),
            BBox::new(-1.0, 1.0, -1.0, 1.0),
        )
    }

    #[test]
    fn center_node_is_interior() {
        let g = build_grid(&unit_disk_plain(), 5).unwrap();
        let k = g.idx(2, 2);
        assert_eq!(g.xy(k), (0.0, 0.0));
        assert_eq!(g.class(k), NodeClass::Interior);
    }

    #[test]
    fn square_offsets_are_one() {
        let sq = ConvexDomain::new(
            Arc::new(|x: f64, y: f64| x.abs().max(y.abs()) - 1.0),
            BBox::new(-1.0, 1.0, -1.0, 1.0),
        );
        let g = build_grid(&sq, 5).unwrap();
        let mut seen = 0;
        for k in g.boundary_adjacent_nodes() {
            for d in Dir::AXIS {
                if let Some(t) = g.theta(k, d) {
                    assert_eq!(t, 1.0);
                    seen += 1;
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn interior_count_matches_enumeration() {
        let d = unit_disk_plain();
        let g = build_grid(&d, 65).unwrap();
        let h = 2.0 / 64.0;
        let inside = |i: i64, j: i64| {
            let (x, y) = (-1.0 + i as f64 * h, -1.0 + j as f64 * h);
            x * x + y * y - 1.0 < 0.0
        };
        let mut brute = 0;
        for j in 0..65i64 {
            for i in 0..65i64 {
                if inside(i, j)
                    && inside(i + 1, j)
                    && inside(i - 1, j)
                    && inside(i, j + 1)
                    && inside(i, j - 1)
                {
                    brute += 1;
                }
            }
        }
        assert_eq!(g.interior_nodes().count(), brute);
    }

    #[test]
    fn every_boundary_adjacent_node_has_offset() {
        let g = build_grid(&ConvexDomain::disk(0.0, 0.0, 1.0), 33).unwrap();
        for k in g.boundary_adjacent_nodes() {
            let n = Dir::AXIS.iter().filter(|&&d| g.theta(k, d).is_some()).count();
            assert!(n >= 1);
            for d in Dir::AXIS {
                if let Some(t) = g.theta(k, d) {
                    assert!(t > 0.0 && t <= 1.0);
                    let (x, y) = g.crossing_point(k, d).unwrap();
                    assert!(g.domain().rho(x, y).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn spacing_is_uniform() {
        let g = build_grid(&ConvexDomain::disk(0.0, 0.0, 1.0), 17).unwrap();
        let b = g.bbox();
        assert!((b.width() / (g.nx() - 1) as f64 - g.h()).abs() < 1e-15);
        assert!((b.height() / (g.ny() - 1) as f64 - g.h()).abs() < 1e-15);
    }

    #[test]
    fn rejects_small_and_empty() {
        assert!(build_grid(&ConvexDomain::disk(0.0, 0.0, 1.0), 4).is_err());
        let tiny = ConvexDomain::new(
            Arc::new(|x: f64, y: f64| x * x + y * y - 1e-6),
            BBox::new(-1.0, 1.0, -1.0, 1.0),
        );
        assert_eq!(build_grid(&tiny, 5).unwrap_err(), Error::EmptyInterior);
    }
}
