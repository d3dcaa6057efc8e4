use std::sync::Arc;

use crate::error::{Error, Result};

use super::grid::Grid2D;

/// Symmetric 2x2 matrix `[[a11, a12], [a12, a22]]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Sym2 {
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl Sym2 {
    pub const IDENTITY: Sym2 = Sym2 {
        a11: 1.0,
        a12: 0.0,
        a22: 1.0,
    };

    pub fn new(a11: f64, a12: f64, a22: f64) -> Self {
        Self { a11, a12, a22 }
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a12
    }

    pub fn trace(&self) -> f64 {
        self.a11 + self.a22
    }

    /// Cofactor matrix; in 2D this swaps the diagonal and negates `a12`.
    pub fn cofactor(&self) -> Sym2 {
        Sym2::new(self.a22, -self.a12, self.a11)
    }

    /// `trace(self * other)` for symmetric arguments.
    pub fn contract(&self, other: &Sym2) -> f64 {
        self.a11 * other.a11 + 2.0 * self.a12 * other.a12 + self.a22 * other.a22
    }

    pub fn quad_form(&self, v: (f64, f64)) -> f64 {
        self.a11 * v.0 * v.0 + 2.0 * self.a12 * v.0 * v.1 + self.a22 * v.1 * v.1
    }

    pub fn mul_vec(&self, v: (f64, f64)) -> (f64, f64) {
        (
            self.a11 * v.0 + self.a12 * v.1,
            self.a12 * v.0 + self.a22 * v.1,
        )
    }

    pub fn inverse(&self) -> Option<Sym2> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        Some(Sym2::new(self.a22 / d, -self.a12 / d, self.a11 / d))
    }

    /// Eigenvalues `(lambda_min, lambda_max)`.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let m = 0.5 * (self.a11 + self.a22);
        let r = (0.25 * (self.a11 - self.a22).powi(2) + self.a12 * self.a12).sqrt();
        (m - r, m + r)
    }

    /// Eigen-decomposition: eigenvalues ascending with unit eigenvectors.
    pub fn eigen(&self) -> [(f64, (f64, f64)); 2] {
        let (l1, l2) = self.eigenvalues();
        let v1 = if self.a12.abs() > 1e-300 {
            let (x, y) = (self.a12, l1 - self.a11);
            let n = (x * x + y * y).sqrt();
            (x / n, y / n)
        } else if self.a11 <= self.a22 {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
        let v2 = (-v1.1, v1.0);
        [(l1, v1), (l2, v2)]
    }

    /// Matrix with eigenvalues floored at `kappa`.
    pub fn clamped(&self, kappa: f64) -> Sym2 {
        let [(l1, v1), (l2, v2)] = self.eigen();
        if l1 >= kappa {
            return *self;
        }
        let (a, b) = (l1.max(kappa), l2.max(kappa));
        Sym2::new(
            a * v1.0 * v1.0 + b * v2.0 * v2.0,
            a * v1.0 * v1.1 + b * v2.0 * v2.1,
            a * v1.1 * v1.1 + b * v2.1 * v2.1,
        )
    }

    /// Determinant of the clamped matrix.
    pub fn det_clamped(&self, kappa: f64) -> f64 {
        let (l1, l2) = self.eigenvalues();
        if l1 >= kappa {
            self.det()
        } else {
            l1.max(kappa) * l2.max(kappa)
        }
    }

    pub fn scale(&self, s: f64) -> Sym2 {
        Sym2::new(self.a11 * s, self.a12 * s, self.a22 * s)
    }

    pub fn is_finite(&self) -> bool {
        self.a11.is_finite() && self.a12.is_finite() && self.a22.is_finite()
    }
}

macro_rules! node_field {
    ($name:ident, $t:ty, $nan:expr) => {
        #[derive(Debug, Clone)]
        pub struct $name {
            grid: Arc<Grid2D>,
            values: Vec<$t>,
        }

        impl $name {
            /// Field with `NaN` placeholders at every node.
            pub fn nan(grid: &Arc<Grid2D>) -> Self {
                Self {
                    grid: grid.clone(),
                    values: vec![$nan; grid.len()],
                }
            }

            /// Evaluate `f(x, y)` at every active node.
            pub fn from_fn(grid: &Arc<Grid2D>, f: impl Fn(f64, f64) -> $t + Sync + Send) -> Self {
                let g = grid.clone();
                let values = crate::par::map_range(g.len(), |k| {
                    if g.is_active(k) {
                        let (x, y) = g.xy(k);
                        f(x, y)
                    } else {
                        $nan
                    }
                });
                Self { grid: grid.clone(), values }
            }

            /// Wrap raw node values; exterior entries are overwritten with `NaN`.
            pub fn from_values(grid: &Arc<Grid2D>, mut values: Vec<$t>) -> Result<Self> {
                if values.len() != grid.len() {
                    return Err(Error::InvalidArgument(format!(
                        "field has {} values, grid has {} nodes",
                        values.len(),
                        grid.len()
                    )));
                }
                for (k, v) in values.iter_mut().enumerate() {
                    if !grid.is_active(k) {
                        *v = $nan;
                    }
                }
                Ok(Self { grid: grid.clone(), values })
            }

            pub fn grid(&self) -> &Arc<Grid2D> {
                &self.grid
            }

            /// Checked read; exterior reads are errors.
            pub fn get(&self, i: usize, j: usize) -> Result<$t> {
                let k = self.grid.idx(i, j);
                if !self.grid.is_active(k) {
                    return Err(Error::ExteriorRead { i, j });
                }
                Ok(self.values[k])
            }

            #[inline]
            pub fn at(&self, k: usize) -> $t {
                self.values[k]
            }

            #[inline]
            pub fn set(&mut self, k: usize, v: $t) {
                debug_assert!(self.grid.is_active(k));
                self.values[k] = v;
            }

            pub fn values(&self) -> &[$t] {
                &self.values
            }

            pub fn values_mut(&mut self) -> &mut [$t] {
                &mut self.values
            }

            /// Apply `f(node, value)` to every active node.
            pub fn map(&self, f: impl Fn(usize, $t) -> $t + Sync + Send) -> Self {
                let g = &self.grid;
                let vals = &self.values;
                let values = crate::par::map_range(g.len(), |k| {
                    if g.is_active(k) {
                        f(k, vals[k])
                    } else {
                        $nan
                    }
                });
                Self { grid: self.grid.clone(), values }
            }
        }
    };
}

node_field!(ScalarField, f64, f64::NAN);
node_field!(VectorField, (f64, f64), (f64::NAN, f64::NAN));
node_field!(
    SymMatField,
    Sym2,
    Sym2 {
        a11: f64::NAN,
        a12: f64::NAN,
        a22: f64::NAN
    }
);

impl ScalarField {
    pub fn constant(grid: &Arc<Grid2D>, c: f64) -> Self {
        Self::from_fn(grid, move |_, _| c)
    }

    /// Sup norm over active nodes, ignoring `NaN` entries.
    pub fn sup_norm(&self) -> f64 {
        self.active_values().map(f64::abs).fold(0.0, f64::max)
    }

    pub fn sup_norm_over(&self, nodes: impl Iterator<Item = usize>) -> f64 {
        nodes
            .map(|k| self.values[k])
            .filter(|v| !v.is_nan())
            .map(f64::abs)
            .fold(0.0, f64::max)
    }

    pub fn active_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.grid
            .active_nodes()
            .iter()
            .map(move |&k| self.values[k])
            .filter(|v| !v.is_nan())
    }

    pub fn min(&self) -> f64 {
        self.active_values().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.active_values().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `self - other` at active nodes.
    pub fn sub(&self, other: &ScalarField) -> ScalarField {
        self.map(|k, v| v - other.values[k])
    }

    pub fn add(&self, other: &ScalarField) -> ScalarField {
        self.map(|k, v| v + other.values[k])
    }

    pub fn scale(&self, s: f64) -> ScalarField {
        self.map(|_, v| v * s)
    }

    /// `(1 - t) * self + t * other`.
    pub fn lerp(&self, other: &ScalarField, t: f64) -> ScalarField {
        self.map(|k, v| (1.0 - t) * v + t * other.values[k])
    }

    /// Sup of `|self - other|` over active nodes.
    pub fn dist_sup(&self, other: &ScalarField) -> f64 {
        self.sub(other).sup_norm()
    }

    /// Values at the unknowns in solver order.
    pub fn to_unknowns(&self) -> Vec<f64> {
        self.grid.active_nodes().iter().map(|&k| self.values[k]).collect()
    }

    pub fn from_unknowns(grid: &Arc<Grid2D>, x: &[f64]) -> Self {
        let mut f = Self::nan(grid);
        for (u, &k) in grid.active_nodes().iter().enumerate() {
            f.values[k] = x[u];
        }
        f
    }
}
