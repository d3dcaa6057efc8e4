//! Text field files (`.fld`).
//!
//! ```text
//! nx ny xmin xmax ymin ymax
//! [dualgrid <name>]            (optional header extension for dual fields)
//! field <name> <scalar|vector|symmat>
//! <ny*nx value lines, row-major with y outer; exterior nodes are `nan`>
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! write-then-read is bit-exact.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::field::{ScalarField, Sym2, SymMatField, VectorField};
use super::grid::Grid2D;

/// Kind tag of a field file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Scalar,
    Vector,
    SymMat,
}

impl FieldKind {
    fn tag(self) -> &'static str {
        match self {
            FieldKind::Scalar => "scalar",
            FieldKind::Vector => "vector",
            FieldKind::SymMat => "symmat",
        }
    }
}

/// Parsed contents of a field file.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub nx: usize,
    pub ny: usize,
    pub bbox: (f64, f64, f64, f64),
    pub name: String,
    pub kind: FieldKind,
    pub dualgrid: Option<String>,
    /// Row-major values, one tuple per node (length 1, 2 or 3).
    pub values: Vec<Vec<f64>>,
}

fn fmt_f(v: f64, out: &mut String) {
    if v.is_nan() {
        out.push_str("nan");
    } else {
        let _ = write!(out, "{v:?}");
    }
}

fn header(grid: &Grid2D, name: &str, kind: FieldKind, dual: Option<&str>) -> String {
    let b = grid.bbox();
    let mut s = String::new();
    let _ = write!(s, "{} {} ", grid.nx(), grid.ny());
    for (n, v) in [b.xmin, b.xmax, b.ymin, b.ymax].into_iter().enumerate() {
        fmt_f(v, &mut s);
        s.push(if n < 3 { ' ' } else { '\n' });
    }
    if let Some(d) = dual {
        let _ = writeln!(s, "dualgrid {d}");
    }
    let _ = writeln!(s, "field {name} {}", kind.tag());
    s
}

fn render(grid: &Grid2D, name: &str, kind: FieldKind, dual: Option<&str>, row: impl Fn(usize) -> Vec<f64>) -> String {
    let mut s = header(grid, name, kind, dual);
    for k in 0..grid.len() {
        let vals = row(k);
        for (n, v) in vals.iter().enumerate() {
            if n > 0 {
                s.push(' ');
            }
            if grid.is_active(k) {
                fmt_f(*v, &mut s);
            } else {
                s.push_str("nan");
            }
        }
        s.push('\n');
    }
    s
}

pub fn scalar_to_string(f: &ScalarField, name: &str, dual: Option<&str>) -> String {
    render(f.grid(), name, FieldKind::Scalar, dual, |k| vec![f.at(k)])
}

pub fn vector_to_string(f: &VectorField, name: &str) -> String {
    render(f.grid(), name, FieldKind::Vector, None, |k| {
        let (a, b) = f.at(k);
        vec![a, b]
    })
}

pub fn symmat_to_string(f: &SymMatField, name: &str) -> String {
    render(f.grid(), name, FieldKind::SymMat, None, |k| {
        let m = f.at(k);
        vec![m.a11, m.a12, m.a22]
    })
}

pub fn write_scalar(path: &Path, f: &ScalarField, name: &str) -> Result<()> {
    std::fs::write(path, scalar_to_string(f, name, None))?;
    Ok(())
}

pub fn write_scalar_dual(path: &Path, f: &ScalarField, name: &str, dual: &str) -> Result<()> {
    std::fs::write(path, scalar_to_string(f, name, Some(dual)))?;
    Ok(())
}

fn parse_f(tok: &str) -> Result<f64> {
    if tok == "nan" {
        return Ok(f64::NAN);
    }
    tok.parse::<f64>()
        .map_err(|e| Error::FieldFormat(format!("bad number `{tok}`: {e}")))
}

pub fn parse(text: &str) -> Result<FieldFile> {
    let mut lines = text.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::FieldFormat("empty file".into()))?;
    let toks: Vec<&str> = first.split_whitespace().collect();
    if toks.len() != 6 {
        return Err(Error::FieldFormat(format!("bad header `{first}`")));
    }
    let nx: usize = toks[0]
        .parse()
        .map_err(|_| Error::FieldFormat("bad nx".into()))?;
    let ny: usize = toks[1]
        .parse()
        .map_err(|_| Error::FieldFormat("bad ny".into()))?;
    let bbox = (
        parse_f(toks[2])?,
        parse_f(toks[3])?,
        parse_f(toks[4])?,
        parse_f(toks[5])?,
    );
    let mut second = lines
        .next()
        .ok_or_else(|| Error::FieldFormat("missing field line".into()))?;
    let mut dualgrid = None;
    if let Some(rest) = second.strip_prefix("dualgrid ") {
        dualgrid = Some(rest.trim().to_string());
        second = lines
            .next()
            .ok_or_else(|| Error::FieldFormat("missing field line".into()))?;
    }
    let ft: Vec<&str> = second.split_whitespace().collect();
    if ft.len() != 3 || ft[0] != "field" {
        return Err(Error::FieldFormat(format!("bad field line `{second}`")));
    }
    let kind = match ft[2] {
        "scalar" => FieldKind::Scalar,
        "vector" => FieldKind::Vector,
        "symmat" => FieldKind::SymMat,
        other => return Err(Error::FieldFormat(format!("unknown kind `{other}`"))),
    };
    let width = match kind {
        FieldKind::Scalar => 1,
        FieldKind::Vector => 2,
        FieldKind::SymMat => 3,
    };
    let mut values = Vec::with_capacity(nx * ny);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(parse_f)
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != width {
            return Err(Error::FieldFormat(format!("bad value line `{line}`")));
        }
        values.push(row);
    }
    if values.len() != nx * ny {
        return Err(Error::FieldFormat(format!(
            "expected {} value lines, found {}",
            nx * ny,
            values.len()
        )));
    }
    Ok(FieldFile {
        nx,
        ny,
        bbox,
        name: ft[1].to_string(),
        kind,
        dualgrid,
        values,
    })
}

pub fn read(path: &Path) -> Result<FieldFile> {
    parse(&std::fs::read_to_string(path)?)
}

impl FieldFile {
    fn check_grid(&self, grid: &Grid2D) -> Result<()> {
        if self.nx != grid.nx() || self.ny != grid.ny() {
            return Err(Error::FieldFormat(format!(
                "file is {}x{}, grid is {}x{}",
                self.nx,
                self.ny,
                grid.nx(),
                grid.ny()
            )));
        }
        Ok(())
    }

    pub fn to_scalar(&self, grid: &Arc<Grid2D>) -> Result<ScalarField> {
        self.check_grid(grid)?;
        if self.kind != FieldKind::Scalar {
            return Err(Error::FieldFormat("not a scalar field".into()));
        }
        ScalarField::from_values(grid, self.values.iter().map(|r| r[0]).collect())
    }

    pub fn to_vector(&self, grid: &Arc<Grid2D>) -> Result<VectorField> {
        self.check_grid(grid)?;
        if self.kind != FieldKind::Vector {
            return Err(Error::FieldFormat("not a vector field".into()));
        }
        VectorField::from_values(grid, self.values.iter().map(|r| (r[0], r[1])).collect())
    }

    pub fn to_symmat(&self, grid: &Arc<Grid2D>) -> Result<SymMatField> {
        self.check_grid(grid)?;
        if self.kind != FieldKind::SymMat {
            return Err(Error::FieldFormat("not a symmat field".into()));
        }
        SymMatField::from_values(
            grid,
            self.values
                .iter()
                .map(|r| Sym2::new(r[0], r[1], r[2]))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid, ConvexDomain};
    use proptest::prelude::*;

    fn grid() -> Arc<Grid2D> {
        Arc::new(build_grid(&ConvexDomain::disk(0.0, 0.0, 1.0), 9).unwrap())
    }

    #[test]
    fn header_layout() {
        let g = grid();
        let f = ScalarField::constant(&g, 0.5);
        let s = scalar_to_string(&f, "u", None);
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), "9 9 -1.0 1.0 -1.0 1.0");
        assert_eq!(lines.next().unwrap(), "field u scalar");
        assert_eq!(lines.next().unwrap(), "nan");
        assert_eq!(s.lines().count(), 2 + 81);
    }

    #[test]
    fn dual_header_extension() {
        let g = grid();
        let f = ScalarField::constant(&g, 1.0);
        let parsed = parse(&scalar_to_string(&f, "ustar", Some("legendre"))).unwrap();
        assert_eq!(parsed.dualgrid.as_deref(), Some("legendre"));
        assert_eq!(parsed.name, "ustar");
    }

    #[test]
    fn symmat_and_vector_roundtrip() {
        let g = grid();
        let m = SymMatField::from_fn(&g, |x, y| Sym2::new(x, x * y, 1.0 / 3.0 + y));
        let back = parse(&symmat_to_string(&m, "H")).unwrap().to_symmat(&g).unwrap();
        for &k in g.active_nodes() {
            assert_eq!(back.at(k), m.at(k));
        }
        let v = VectorField::from_fn(&g, |x, y| (x.exp(), -y / 7.0));
        let back = parse(&vector_to_string(&v, "Du")).unwrap().to_vector(&g).unwrap();
        for &k in g.active_nodes() {
            assert_eq!(back.at(k), v.at(k));
        }
    }

    proptest! {
        #[test]
        fn scalar_roundtrip_is_bit_exact(seed in any::<u64>(), scale in -1e12f64..1e12) {
            let g = grid();
            let f = ScalarField::from_fn(&g, |x, y| {
                let t = (x * 12.9898 + y * 78.233 + seed as f64 * 1e-9).sin() * 43758.5453;
                (t - t.floor()) * scale
            });
            let back = parse(&scalar_to_string(&f, "u", None)).unwrap().to_scalar(&g).unwrap();
            for &k in g.active_nodes() {
                prop_assert_eq!(back.at(k).to_bits(), f.at(k).to_bits());
            }
        }
    }
}
