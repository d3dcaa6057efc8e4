//! Named built-in functions and domains.
//!
//! Specs look like `name` or `name:args`. Functions take positional numbers
//! (`const:2`, `linear:1,0.5,0`); domains take `key=value` pairs
//! (`disk:r=2,cx=1.5,cy=1.5`). New built-ins are added to the match arms
//! below.

use std::sync::Arc;

use abreu_core::abreu_system::{Fn2, Fn3};
use abreu_core::geometry::ConvexDomain;
use abreu_core::manufactured::{quad_source, source_exp, u_exp, w_exp};
use abreu_core::rochet_chone::{Gamma, F0};

fn split(spec: &str) -> (&str, &str) {
    match spec.split_once(':') {
        Some((n, a)) => (n.trim(), a.trim()),
        None => (spec.trim(), ""),
    }
}

fn numbers(spec: &str, args: &str, want: usize) -> Result<Vec<f64>, String> {
    let vals = if args.is_empty() {
        Vec::new()
    } else {
        args.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad number `{t}` in `{spec}`")))
            .collect::<Result<Vec<_>, _>>()?
    };
    if vals.len() != want {
        return Err(format!("`{spec}` takes {want} number(s), got {}", vals.len()));
    }
    Ok(vals)
}

/// Two-argument functions for `phi`, `psi`.
///
/// `quad` is `(x^2 + y^2)/2`, `bowl:cx,cy` the same centred at `(cx, cy)`,
/// `exp` and `wexp` the manufactured pair.
pub fn fn2(spec: &str) -> Result<Fn2, String> {
    let (name, args) = split(spec);
    Ok(match name {
        "zero" => {
            numbers(spec, args, 0)?;
            Arc::new(|_, _| 0.0)
        }
        "const" => {
            let c = numbers(spec, args, 1)?[0];
            Arc::new(move |_, _| c)
        }
        "linear" => {
            let v = numbers(spec, args, 3)?;
            Arc::new(move |x, y| v[0] + v[1] * x + v[2] * y)
        }
        "quad" => {
            numbers(spec, args, 0)?;
            Arc::new(|x, y| 0.5 * (x * x + y * y))
        }
        "bowl" => {
            let v = numbers(spec, args, 2)?;
            Arc::new(move |x, y| 0.5 * ((x - v[0]).powi(2) + (y - v[1]).powi(2)))
        }
        "exp" => {
            numbers(spec, args, 0)?;
            Arc::new(u_exp)
        }
        "wexp" => {
            numbers(spec, args, 0)?;
            Arc::new(w_exp)
        }
        _ => return Err(format!("unknown function `{spec}`")),
    })
}

/// Right-hand side terms `F0_z(x, y, z)` of the Abreu system.
///
/// `quadsrc` and `mms` make `quad` and `exp` exact solutions for the
/// configured `q`, `delta`; `quadratic:c` is `2 c z`.
pub fn f0z(spec: &str, q: f64, delta: f64) -> Result<Fn3, String> {
    let (name, args) = split(spec);
    Ok(match name {
        "quadsrc" => {
            numbers(spec, args, 0)?;
            Arc::new(move |x, y, _| quad_source(x, y, q, delta))
        }
        "mms" => {
            numbers(spec, args, 0)?;
            Arc::new(move |x, y, _| source_exp(x, y, q, delta))
        }
        "quadratic" => {
            let c = numbers(spec, args, 1)?[0];
            Arc::new(move |_, _, z| 2.0 * c * z)
        }
        _ => {
            let f = fn2(spec)?;
            Arc::new(move |x, y, _| f(x, y))
        }
    })
}

pub fn gamma(spec: &str) -> Result<Gamma, String> {
    let (name, args) = split(spec);
    match name {
        "const" => Ok(Gamma::Const(numbers(spec, args, 1)?[0])),
        "zero" => {
            numbers(spec, args, 0)?;
            Ok(Gamma::Const(0.0))
        }
        "linear" => {
            let v = numbers(spec, args, 3)?;
            Ok(Gamma::Affine(v[0], v[1], v[2]))
        }
        _ => Err(format!("unknown gamma `{spec}`")),
    }
}

/// Zeroth-order terms: `linear` is `z gamma(x)`, `tracking` is
/// `(z - phi)^2`.
pub fn f0(spec: &str, gamma: &Gamma, phi: &Fn2) -> Result<F0, String> {
    let (name, args) = split(spec);
    match name {
        "zero" => {
            numbers(spec, args, 0)?;
            Ok(F0::zero())
        }
        "linear" => {
            numbers(spec, args, 0)?;
            Ok(F0::linear(gamma.clone()))
        }
        "quadratic" => Ok(F0::quadratic(numbers(spec, args, 1)?[0])),
        "tracking" => {
            numbers(spec, args, 0)?;
            Ok(F0::tracking(phi.clone()))
        }
        _ => Err(format!("unknown F0 `{spec}`")),
    }
}

fn keyed(spec: &str, args: &str, allowed: &[(&str, f64)]) -> Result<Vec<f64>, String> {
    let mut vals: Vec<f64> = allowed.iter().map(|&(_, d)| d).collect();
    for part in args.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("expected key=value in `{spec}`, got `{part}`"))?;
        let slot = allowed
            .iter()
            .position(|&(name, _)| name == k.trim())
            .ok_or_else(|| format!("unknown key `{}` in `{spec}`", k.trim()))?;
        vals[slot] = v
            .trim()
            .parse()
            .map_err(|_| format!("bad number `{v}` in `{spec}`"))?;
    }
    Ok(vals)
}

fn shape(spec: &str) -> Result<ConvexDomain, String> {
    let (name, args) = split(spec);
    match name {
        "disk" => {
            let v = keyed(spec, args, &[("r", 1.0), ("cx", 0.0), ("cy", 0.0)])?;
            if !(v[0] > 0.0) {
                return Err("disk radius must be positive".into());
            }
            Ok(ConvexDomain::disk(v[1], v[2], v[0]))
        }
        "square" => {
            let v = keyed(spec, args, &[("a", 1.0), ("cx", 0.0), ("cy", 0.0)])?;
            if !(v[0] > 0.0) {
                return Err("square half-width must be positive".into());
            }
            Ok(ConvexDomain::square(v[1], v[2], v[0]))
        }
        "superellipse" => {
            let v = keyed(spec, args, &[("p", 4.0)])?;
            if !(v[0] >= 1.0) {
                return Err("superellipse exponent must be at least 1".into());
            }
            Ok(ConvexDomain::superellipse(v[0]))
        }
        _ => Err(format!("unknown domain `{spec}`")),
    }
}

/// Outer domain with an optional inner region. `classic` is the disk of
/// radius 2 at `(1.5, 1.5)` with the inner square `[1, 2]^2`.
pub fn domain(spec: &str, inner: Option<&str>) -> Result<ConvexDomain, String> {
    let (outer, default_inner) = if split(spec).0 == "classic" {
        (shape("disk:r=2,cx=1.5,cy=1.5")?, Some("square:a=0.5,cx=1.5,cy=1.5"))
    } else {
        (shape(spec)?, None)
    };
    let label = outer.label().to_string();
    match inner.or(default_inner) {
        None => Ok(outer),
        Some(s) => {
            let i = shape(s)?;
            Ok(outer.with_inner(i.rho_fn().clone()).with_label(format!("{label}+inner {}", i.label())))
        }
    }
}

/// Exact `(u, w)` known for a `phi` spec: `quad` gives `(r^2/2, 1)`, `exp`
/// the manufactured pair.
pub fn exact(phi: &str) -> Option<(Fn2, Fn2)> {
    match phi.trim() {
        "quad" => Some((Arc::new(|x, y| 0.5 * (x * x + y * y)), Arc::new(|_, _| 1.0))),
        "exp" => Some((Arc::new(u_exp), Arc::new(w_exp))),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn functions() {
        assert_eq!(fn2("const:2").unwrap()(0.3, 0.1), 2.0);
        assert_eq!(fn2("linear:1,2,3").unwrap()(1.0, 1.0), 6.0);
        assert_eq!(fn2("quad").unwrap()(1.0, 1.0), 1.0);
        assert!(fn2("const").is_err());
        assert!(fn2("cubic").is_err());
        assert_eq!(f0z("quadsrc", 2.0, 0.0).unwrap()(0.2, 0.3, 7.0), 2.0);
        assert_eq!(f0z("quadratic:1.5", 2.0, 0.0).unwrap()(0.0, 0.0, 2.0), 6.0);
        assert_eq!(f0z("const:2", 2.0, 0.0).unwrap()(0.0, 0.0, 9.0), 2.0);
        assert!(gamma("linear:1,0.2,0").is_ok_and(|g| !g.is_constant()));
        assert!(gamma("const:1").is_ok_and(|g| g.is_constant()));
    }

    #[test]
    fn domains() {
        let d = domain("disk:r=2,cx=1", None).unwrap();
        assert!(d.contains(2.5, 0.0) && !d.contains(-1.5, 0.0));
        assert!(domain("disk:radius=2", None).is_err());
        assert!(domain("disk:r=-1", None).is_err());
        let c = domain("classic", None).unwrap();
        assert!(c.has_inner() && c.inner_contains(1.5, 1.5) && !c.inner_contains(0.5, 1.5));
        assert!(domain("square:a=2", Some("disk:r=0.5")).unwrap().has_inner());
        assert!(domain("hexagon", None).is_err());
    }
}
