//! Closed-form radial test solutions.
//!
//! `u = exp(r^2/2)` has `det D^2 u = (1 + r^2) exp(r^2)`, so
//! `w = exp(-r^2) / (1 + r^2)`. For radial `u`, `w` the cofactor contraction
//! reduces to `(u'/r) w'' + u'' (w'/r)`.

/// `exp(r^2/2)`.
pub fn u_exp(x: f64, y: f64) -> f64 {
    (0.5 * (x * x + y * y)).exp()
}

/// `det D^2 u_exp = (1 + r^2) exp(r^2)`.
pub fn det_exp(x: f64, y: f64) -> f64 {
    let r2 = x * x + y * y;
    (1.0 + r2) * r2.exp()
}

/// `1 / det D^2 u_exp`.
pub fn w_exp(x: f64, y: f64) -> f64 {
    1.0 / det_exp(x, y)
}

/// `U^{ij} D_ij w` for `u = u_exp`, `w = w_exp`.
pub fn lma_exp(x: f64, y: f64) -> f64 {
    let r2 = x * x + y * y;
    let w = w_exp(x, y);
    // ln w = -r^2 - ln(1 + r^2);  L = (ln w)' ;  L/r and L' are regular at 0
    let l_over_r = -2.0 - 2.0 / (1.0 + r2);
    let l = l_over_r * r2.sqrt();
    let dl = -2.0 - 2.0 * (1.0 - r2) / ((1.0 + r2) * (1.0 + r2));
    let w1_over_r = w * l_over_r;
    let w2 = w * (l * l + dl);
    let e = (0.5 * r2).exp();
    // u'/r = e, u'' = (1 + r^2) e
    e * w2 + (1.0 + r2) * e * w1_over_r
}

/// `-div((|Du|^2 + delta)^{(q-2)/2} Du)` for `u = u_exp`.
pub fn qlap_exp(x: f64, y: f64, q: f64, delta: f64) -> f64 {
    let r2 = x * x + y * y;
    let e = (0.5 * r2).exp();
    // radial flux v(r) = a(s) u',  s = u'^2,  div = v' + v/r
    let s = r2 * e * e;
    let a = if q == 2.0 {
        1.0
    } else if s + delta == 0.0 {
        0.0
    } else {
        (s + delta).powf(0.5 * (q - 2.0))
    };
    // a'(s) * 2s written to stay finite at s = 0
    let ratio = if s == 0.0 { 0.0 } else { s / (s + delta) };
    let u1_over_r = e;
    let u2 = (1.0 + r2) * e;
    let dv = a * u2 + (q - 2.0) * ratio * a * u2;
    -(dv + a * u1_over_r)
}

/// Source making `(u_exp, w_exp)` solve `L_u w = qlap + F0_z` with
/// `F0_z(x, z) = c(x)`.
pub fn source_exp(x: f64, y: f64, q: f64, delta: f64) -> f64 {
    lma_exp(x, y) - qlap_exp(x, y, q, delta)
}

/// `div((r^2 + delta)^{(q-2)/2} x)`: the `F0_z` making `u = r^2/2`, `w = 1`
/// an exact solution.
pub fn quad_source(x: f64, y: f64, q: f64, delta: f64) -> f64 {
    if q == 2.0 {
        return 2.0;
    }
    let s = x * x + y * y + delta;
    if s == 0.0 {
        return if q > 2.0 { 0.0 } else { f64::INFINITY };
    }
    let a = s.powf(0.5 * (q - 2.0));
    2.0 * a + (q - 2.0) * a * (x * x + y * y) / s
}
