use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Scalar function of a planar point.
pub type ScalarFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Axis-aligned bounding box `(xmin, xmax, ymin, ymax)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Self {
        Self {
            xmin,
            xmax,
            ymin,
            ymax,
        }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
            || !self.xmin.is_finite()
            || !self.xmax.is_finite()
            || !self.ymin.is_finite()
            || !self.ymax.is_finite()
    }
}

/// A convex planar region `{rho < 0}`, optionally carrying a compactly
/// contained inner region `{inner_rho < 0}`.
#[derive(Clone)]
pub struct ConvexDomain {
    rho: ScalarFn,
    bbox: BBox,
    inner_rho: Option<ScalarFn>,
    label: String,
}

impl fmt::Debug for ConvexDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConvexDomain")
            .field("label", &self.label)
            .field("bbox", &self.bbox)
            .field("has_inner", &self.inner_rho.is_some())
            .finish()
    }
}

impl ConvexDomain {
    pub fn new(rho: ScalarFn, bbox: BBox) -> Self {
        Self {
            rho,
            bbox,
            inner_rho: None,
            label: "custom".to_string(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_inner(mut self, inner_rho: ScalarFn) -> Self {
        self.inner_rho = Some(inner_rho);
        self
    }

    /// Disk of radius `r` centred at `(cx, cy)`. The defining function is
    /// `(|x - c|^2 - r^2) / (2r)`, which has unit gradient on the boundary.
    pub fn disk(cx: f64, cy: f64, r: f64) -> Self {
        let rho: ScalarFn = Arc::new(move |x, y| {
            ((x - cx) * (x - cx) + (y - cy) * (y - cy) - r * r) / (2.0 * r)
        });
        Self::new(rho, BBox::new(cx - r, cx + r, cy - r, cy + r))
            .with_label(format!("disk(r={r},cx={cx},cy={cy})"))
    }

    /// Axis-aligned square with half-width `a` centred at `(cx, cy)`.
    pub fn square(cx: f64, cy: f64, a: f64) -> Self {
        let rho: ScalarFn = Arc::new(move |x, y| (x - cx).abs().max((y - cy).abs()) - a);
        Self::new(rho, BBox::new(cx - a, cx + a, cy - a, cy + a))
            .with_label(format!("square(a={a},cx={cx},cy={cy})"))
    }

    /// Unit superellipse `|x|^p + |y|^p < 1` for `p >= 1`.
    pub fn superellipse(p: f64) -> Self {
        let rho: ScalarFn =
            Arc::new(move |x, y| (x.abs().powf(p) + y.abs().powf(p)).powf(1.0 / p) - 1.0);
        Self::new(rho, BBox::new(-1.0, 1.0, -1.0, 1.0)).with_label(format!("superellipse(p={p})"))
    }

    /// Convex polygon given by counter-clockwise vertices; `rho` is the maximum
    /// signed distance to the edge lines.
    pub fn convex_polygon(vertices: Vec<(f64, f64)>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidArgument(
                "polygon needs at least three vertices".into(),
            ));
        }
        let mut edges = Vec::with_capacity(vertices.len());
        for k in 0..vertices.len() {
            let (x0, y0) = vertices[k];
            let (x1, y1) = vertices[(k + 1) % vertices.len()];
            let (dx, dy) = (x1 - x0, y1 - y0);
            let len = (dx * dx + dy * dy).sqrt();
            if len == 0.0 {
                continue;
            }
            // outward normal of a counter-clockwise polygon
            let (nx, ny) = (dy / len, -dx / len);
            edges.push((nx, ny, nx * x0 + ny * y0));
        }
        let xmin = vertices.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
        let xmax = vertices.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
        let ymin = vertices.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        let ymax = vertices.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
        let rho: ScalarFn = Arc::new(move |x, y| {
            edges
                .iter()
                .map(|&(nx, ny, c)| nx * x + ny * y - c)
                .fold(f64::NEG_INFINITY, f64::max)
        });
        Ok(Self::new(rho, BBox::new(xmin, xmax, ymin, ymax)).with_label("polygon"))
    }

    pub fn rho(&self, x: f64, y: f64) -> f64 {
        (self.rho)(x, y)
    }

    pub fn rho_fn(&self) -> &ScalarFn {
        &self.rho
    }

    pub fn inner_rho(&self, x: f64, y: f64) -> Option<f64> {
        self.inner_rho.as_ref().map(|f| f(x, y))
    }

    pub fn has_inner(&self) -> bool {
        self.inner_rho.is_some()
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.rho(x, y) < 0.0
    }

    pub fn inner_contains(&self, x: f64, y: f64) -> bool {
        self.inner_rho(x, y).is_some_and(|v| v < 0.0)
    }

    /// Sampled convexity check: midpoints of interior sample pairs stay inside.
    pub fn check_convex_sampled(&self, samples_per_axis: usize) -> bool {
        let pts = self.interior_samples(samples_per_axis);
        for (a, p) in pts.iter().enumerate() {
            for q in pts.iter().skip(a + 1).step_by(7) {
                if !self.contains(0.5 * (p.0 + q.0), 0.5 * (p.1 + q.1)) {
                    return false;
                }
            }
        }
        true
    }

    /// Smallest value of `-rho` over sampled points of the inner region, i.e.
    /// the margin by which the inner region sits inside the outer one.
    /// `None` when there is no inner region or it has no sample point.
    pub fn inner_margin_sampled(&self, samples_per_axis: usize) -> Option<f64> {
        self.inner_rho.as_ref()?;
        let b = self.bbox;
        let m = samples_per_axis.max(2);
        let mut margin = f64::INFINITY;
        let mut any = false;
        for j in 0..m {
            for i in 0..m {
                let x = b.xmin + b.width() * i as f64 / (m - 1) as f64;
                let y = b.ymin + b.height() * j as f64 / (m - 1) as f64;
                if self.inner_contains(x, y) {
                    any = true;
                    margin = margin.min(-self.rho(x, y));
                }
            }
        }
        any.then_some(margin)
    }

    fn interior_samples(&self, m: usize) -> Vec<(f64, f64)> {
        let b = self.bbox;
        let m = m.max(2);
        let mut out = Vec::new();
        for j in 0..m {
            for i in 0..m {
                let x = b.xmin + b.width() * i as f64 / (m - 1) as f64;
                let y = b.ymin + b.height() * j as f64 / (m - 1) as f64;
                if self.contains(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_sign_convention() {
        let d = ConvexDomain::disk(0.0, 0.0, 1.0);
        assert!(d.rho(0.0, 0.0) < 0.0);
        assert_eq!(d.rho(1.0, 0.0), 0.0);
        assert!(d.rho(1.5, 0.0) > 0.0);
        assert!(d.check_convex_sampled(21));
    }

    #[test]
    fn inner_region_margin() {
        let sq: ScalarFn = Arc::new(|x: f64, y: f64| (x - 1.5).abs().max((y - 1.5).abs()) - 0.5);
        let d = ConvexDomain::disk(1.5, 1.5, 2.0).with_inner(sq);
        let margin = d.inner_margin_sampled(41).unwrap();
        assert!(margin > 0.5, "margin {margin}");
    }

    #[test]
    fn polygon_is_convex_and_signed() {
        let d = ConvexDomain::convex_polygon(vec![(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]).unwrap();
        assert!(d.contains(0.2, 0.2));
        assert!(!d.contains(0.8, 0.8));
        assert!(d.check_convex_sampled(15));
    }
}
