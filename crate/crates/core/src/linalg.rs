//! Sparse assembly and a banded LU direct solver.
//!
//! Unknowns are numbered row-major over active grid nodes, so the 9-point
//! stencils used everywhere give a bandwidth of roughly one grid row.

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// Row-by-row builder; duplicate entries within a row are summed.
#[derive(Debug, Clone)]
pub struct CsrBuilder {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl CsrBuilder {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            rows: vec![Vec::new(); n],
        }
    }

    pub fn add(&mut self, row: usize, col: usize, v: f64) {
        self.rows[row].push((col, v));
    }

    pub fn set_row(&mut self, row: usize, entries: Vec<(usize, f64)>) {
        self.rows[row] = entries;
    }

    pub fn build(self) -> CsrMatrix {
        let mut row_ptr = Vec::with_capacity(self.n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut r in self.rows {
            r.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for (c, v) in r {
                if last == Some(c) {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(cols.len());
        }
        CsrMatrix {
            n: self.n,
            row_ptr,
            cols,
            vals,
        }
    }
}

impl CsrMatrix {
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut b = CsrBuilder::new(rows.len());
        for (i, r) in rows.into_iter().enumerate() {
            b.set_row(i, r);
        }
        b.build()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(p) => self.vals[r.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        crate::par::map_range(self.n, |i| self.row(i).map(|(j, v)| v * x[j]).sum())
    }

    /// `(lower, upper)` bandwidths.
    pub fn bandwidths(&self) -> (usize, usize) {
        let mut kl = 0;
        let mut ku = 0;
        for i in 0..self.n {
            for (j, _) in self.row(i) {
                if j < i {
                    kl = kl.max(i - j);
                } else {
                    ku = ku.max(j - i);
                }
            }
        }
        (kl, ku)
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|a_ij - a_ji|` over the index set `keep` (all rows if `None`).
    pub fn asymmetry(&self, keep: Option<&[bool]>) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            if keep.is_some_and(|k| !k[i]) {
                continue;
            }
            for (j, v) in self.row(i) {
                if keep.is_some_and(|k| !k[j]) {
                    continue;
                }
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// LU factorisation with partial pivoting in band storage.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    a: Vec<f64>,
    piv: Vec<usize>,
}

impl BandedLu {
    #[inline]
    fn at(&self, i: usize, j: usize) -> usize {
        i * self.width + (j + self.kl - i)
    }

    /// Factor `m`. On a zero pivot returns the offending row.
    pub fn factor(m: &CsrMatrix) -> std::result::Result<Self, usize> {
        Self::factor_with(m, true)
    }

    /// Factor without row exchanges (used to read the pivot sign pattern).
    pub fn factor_no_pivoting(m: &CsrMatrix) -> std::result::Result<Self, usize> {
        Self::factor_with(m, false)
    }

    fn factor_with(m: &CsrMatrix, pivoting: bool) -> std::result::Result<Self, usize> {
        let n = m.n();
        let (kl, ku) = m.bandwidths();
        let width = 2 * kl + ku + 1;
        let mut lu = BandedLu {
            n,
            kl,
            ku,
            width,
            a: vec![0.0; n * width],
            piv: (0..n).collect(),
        };
        for i in 0..n {
            for (j, v) in m.row(i) {
                let p = lu.at(i, j);
                lu.a[p] = v;
            }
        }
        let tiny = 1e-14 * m.max_abs().max(f64::MIN_POSITIVE);
        let reach = kl + ku;
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut p = k;
            if pivoting {
                let mut best = lu.a[lu.at(k, k)].abs();
                for i in k + 1..=last_row {
                    let v = lu.a[lu.at(i, k)].abs();
                    if v > best {
                        best = v;
                        p = i;
                    }
                }
            }
            let pv = lu.a[lu.at(p, k)];
            if !(pv.abs() > tiny) {
                return Err(k);
            }
            lu.piv[k] = p;
            let last_col = (k + reach).min(n - 1);
            if p != k {
                for j in k..=last_col {
                    let (x, y) = (lu.at(k, j), lu.at(p, j));
                    lu.a.swap(x, y);
                }
            }
            let d = lu.a[lu.at(k, k)];
            for i in k + 1..=last_row {
                let ik = lu.at(i, k);
                let l = lu.a[ik] / d;
                if l == 0.0 {
                    continue;
                }
                lu.a[ik] = l;
                let (ri, rk) = (lu.at(i, k + 1), lu.at(k, k + 1));
                let len = last_col - k;
                for t in 0..len {
                    lu.a[ri + t] -= l * lu.a[rk + t];
                }
            }
        }
        Ok(lu)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Diagonal of `U`.
    pub fn pivots(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.a[self.at(k, k)]).collect()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                x.swap(k, p);
            }
            let xk = x[k];
            if xk != 0.0 {
                for i in k + 1..=(k + self.kl).min(n.saturating_sub(1)) {
                    x[i] -= self.a[self.at(i, k)] * xk;
                }
            }
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..=(i + self.kl + self.ku).min(n - 1) {
                s -= self.a[self.at(i, j)] * x[j];
            }
            x[i] = s / self.a[self.at(i, i)];
        }
        x
    }
}

/// Sup norm of a slice.
pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn dense_mul(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
    }

    #[test]
    fn solves_random_banded_system_with_pivoting() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 60;
        let (kl, ku) = (4usize, 6usize);
        let mut dense = vec![vec![0.0; n]; n];
        let mut rows = vec![Vec::new(); n];
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                let v: f64 = rng.gen_range(-1.0..1.0);
                dense[i][j] = v;
                rows[i].push((j, v));
            }
        }
        let m = CsrMatrix::from_rows(rows);
        assert_eq!(m.bandwidths(), (kl, ku));
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = dense_mul(&dense, &x);
        let lu = BandedLu::factor(&m).unwrap();
        let got = lu.solve(&b);
        for (g, e) in got.iter().zip(&x) {
            assert!((g - e).abs() < 1e-9, "{g} vs {e}");
        }
    }

    #[test]
    fn zero_pivot_is_reported() {
        let m = CsrMatrix::from_rows(vec![
            vec![(0, 1.0), (1, 2.0)],
            vec![(0, 2.0), (1, 4.0)],
            vec![(2, 1.0)],
        ]);
        assert_eq!(BandedLu::factor(&m).unwrap_err(), 1);
    }

    #[test]
    fn builder_sums_duplicates() {
        let mut b = CsrBuilder::new(2);
        b.add(0, 1, 1.0);
        b.add(0, 1, 2.0);
        b.add(1, 0, 5.0);
        let m = b.build();
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.asymmetry(None), 2.0);
    }

    #[test]
    fn spd_tridiagonal_has_positive_pivots() {
        let n = 20;
        let rows = (0..n)
            .map(|i| {
                let mut r = vec![(i, 2.0)];
                if i > 0 {
                    r.push((i - 1, -1.0));
                }
                if i + 1 < n {
                    r.push((i + 1, -1.0));
                }
                r
            })
            .collect();
        let lu = BandedLu::factor_no_pivoting(&CsrMatrix::from_rows(rows)).unwrap();
        assert!(lu.pivots().iter().all(|&p| p > 0.0));
    }
}
