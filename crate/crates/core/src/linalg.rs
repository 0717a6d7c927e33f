//! Minimal sparse linear algebra: triplet assembly, CSR storage, a banded
//! LU direct solver and a Jacobi-preconditioned BiCGSTAB.
//!
//! The systems assembled on structured MAC grids have small bandwidth under
//! a spatially interleaved unknown ordering, so a band factorization with
//! partial pivoting covers the "direct" solver path at desk scale; BiCGSTAB
//! covers the iterative path.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinError {
    #[error("matrix is singular at elimination step {step}")]
    Singular { step: usize },
    #[error("iterative solver breakdown at iteration {iter} (residual {residual:.3e})")]
    Breakdown { iter: usize, residual: f64 },
    #[error("iterative solver did not reach tolerance {tol:.3e} in {iters} iterations (residual {residual:.3e})")]
    NoConvergence { iters: usize, tol: f64, residual: f64 },
}

/// Compressed sparse row matrix built from (row, col, value) triplets.
#[derive(Debug, Clone)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Csr {
    /// Build from triplets; duplicate entries are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut cols = Vec::with_capacity(t.len());
        let mut vals: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &t {
            debug_assert!(r < nrows && c < ncols);
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] = cols.len();
                last = Some((r, c));
            }
        }
        // make row_ptr cumulative over empty rows too
        for r in 1..=nrows {
            if row_ptr[r] < row_ptr[r - 1] {
                row_ptr[r] = row_ptr[r - 1];
            }
        }
        Csr { nrows, ncols, row_ptr, cols, vals }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[r] = acc;
        }
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.nrows];
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.cols[k] == r {
                    d[r] += self.vals[k];
                }
            }
        }
        d
    }

    /// Row entries as (col, value) pairs.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (self.cols[k], self.vals[k]))
    }

    /// Coordinate-format text: one `row col value` line per stored entry.
    pub fn to_coo_text(&self) -> String {
        let mut s = String::new();
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                s.push_str(&format!("{} {} {:.16e}\n", r, c, v));
            }
        }
        s
    }
}

/// LU factorization of a band matrix with partial pivoting. Storage is
/// column-major banded (one `ldab`-slab per column with `kl` extra
/// superdiagonals for pivot fill), so the elimination updates run down
/// contiguous column segments.
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    /// Column j occupies `ab[j*ldab ..][..ldab]`; entry (i, j) sits at
    /// offset `kl + ku + i - j` within the slab.
    ab: Vec<f64>,
    ldab: usize,
    ipiv: Vec<usize>,
}

impl BandLu {
    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        j * self.ldab + (self.kl + self.ku + i - j)
    }

    /// Factor a CSR matrix. Bandwidths are measured from the stored pattern.
    pub fn factor(a: &Csr) -> Result<Self, LinError> {
        assert_eq!(a.nrows, a.ncols);
        let n = a.nrows;
        let mut kl = 0usize;
        let mut ku = 0usize;
        for r in 0..n {
            for (c, _) in a.row(r) {
                if r > c {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        let ldab = 2 * kl + ku + 1;
        let mut lu = BandLu { n, kl, ku, ab: vec![0.0; ldab * n], ldab, ipiv: vec![0; n] };
        for r in 0..n {
            for (c, v) in a.row(r) {
                let k = lu.idx(r, c);
                lu.ab[k] += v;
            }
        }
        lu.factor_in_place()?;
        Ok(lu)
    }

    fn factor_in_place(&mut self) -> Result<(), LinError> {
        let n = self.n;
        let (kl, ku, ldab) = (self.kl, self.ku, self.ldab);
        let diag = kl + ku;
        for j in 0..n {
            let col = j * ldab;
            // pivot search in column j, rows j..=j+kl (contiguous)
            let depth = kl.min(n - 1 - j);
            let mut p = 0usize;
            let mut best = self.ab[col + diag].abs();
            for k in 1..=depth {
                let v = self.ab[col + diag + k].abs();
                if v > best {
                    best = v;
                    p = k;
                }
            }
            if best == 0.0 {
                return Err(LinError::Singular { step: j });
            }
            self.ipiv[j] = j + p;
            let jmax = (j + ku + kl).min(n - 1);
            if p != 0 {
                for c in j..=jmax {
                    let a = self.idx(j, c);
                    let b = a + p;
                    self.ab.swap(a, b);
                }
            }
            // scale the subdiagonal of column j into multipliers
            let piv = self.ab[col + diag];
            for k in 1..=depth {
                self.ab[col + diag + k] /= piv;
            }
            // rank-1 update, column by column (contiguous segments)
            for c in (j + 1)..=jmax {
                let mjc = self.ab[self.idx(j, c)];
                if mjc == 0.0 {
                    continue;
                }
                let dst = self.idx(j + 1, c);
                let src = col + diag + 1;
                for k in 0..depth {
                    self.ab[dst + k] -= mjc * self.ab[src + k];
                }
            }
        }
        Ok(())
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let diag = kl + ku;
        let mut x = b.to_vec();
        // forward substitution with row interchanges
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                x.swap(j, p);
            }
            let xj = x[j];
            if xj != 0.0 {
                let depth = kl.min(n - 1 - j);
                let base = j * self.ldab + diag;
                for k in 1..=depth {
                    x[j + k] -= self.ab[base + k] * xj;
                }
            }
        }
        // back substitution
        for j in (0..n).rev() {
            x[j] /= self.ab[j * self.ldab + diag];
            let xj = x[j];
            if xj != 0.0 {
                let imin = j.saturating_sub(ku + kl);
                for i in imin..j {
                    x[i] -= self.ab[self.idx(i, j)] * xj;
                }
            }
        }
        x
    }
}

/// Jacobi-preconditioned BiCGSTAB; tolerance is relative to `‖b‖₂`.
pub fn bicgstab(a: &Csr, b: &[f64], tol: f64, max_iters: usize) -> Result<Vec<f64>, LinError> {
    let n = b.len();
    let dinv: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let norm_b = norm2(b);
    if norm_b == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let stop = tol * norm_b;
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let r0 = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut residual = norm_b;
    for iter in 0..max_iters {
        let rho_new = dot(&r0, &r);
        if rho_new.abs() < f64::MIN_POSITIVE * 1e4 {
            return Err(LinError::Breakdown { iter, residual });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let ph: Vec<f64> = p.iter().zip(&dinv).map(|(a, d)| a * d).collect();
        v = a.matvec(&ph);
        alpha = rho / dot(&r0, &v);
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        if norm2(&s) <= stop {
            for i in 0..n {
                x[i] += alpha * ph[i];
            }
            return Ok(x);
        }
        let sh: Vec<f64> = s.iter().zip(&dinv).map(|(a, d)| a * d).collect();
        let t = a.matvec(&sh);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            return Err(LinError::Breakdown { iter, residual });
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * ph[i] + omega * sh[i];
            r[i] = s[i] - omega * t[i];
        }
        residual = norm2(&r);
        if residual <= stop {
            return Ok(x);
        }
    }
    Err(LinError::NoConvergence { iters: max_iters, tol, residual: residual / norm_b })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, &x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_band_system(n: usize, half_band: usize, seed: u64) -> (Csr, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trip = Vec::new();
        for i in 0..n {
            let lo = i.saturating_sub(half_band);
            let hi = (i + half_band).min(n - 1);
            let mut offdiag = 0.0;
            for j in lo..=hi {
                if j != i {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    offdiag += v.abs();
                    trip.push((i, j, v));
                }
            }
            // diagonally dominant so the no-reordering band LU is well posed
            trip.push((i, i, offdiag + 1.0 + rng.gen_range(0.0..1.0)));
        }
        let a = Csr::from_triplets(n, n, trip);
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (a, b)
    }

    #[test]
    fn band_lu_solves_to_machine_precision() {
        for seed in 0..3 {
            let (a, b) = random_band_system(200, 7, seed);
            let lu = BandLu::factor(&a).unwrap();
            let x = lu.solve(&b);
            let r: Vec<f64> = a.matvec(&x).iter().zip(&b).map(|(ax, bi)| ax - bi).collect();
            assert!(norm2(&r) <= 1e-12 * norm2(&b), "residual {}", norm2(&r));
        }
    }

    #[test]
    fn band_lu_pivots_on_zero_diagonal() {
        // [[0, 1], [1, 0]] needs the row interchange
        let a = Csr::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 0, 1.0)]);
        let lu = BandLu::factor(&a).unwrap();
        let x = lu.solve(&[2.0, 3.0]);
        assert!((x[0] - 3.0).abs() < 1e-14 && (x[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn band_lu_reports_singular() {
        let a = Csr::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        assert!(matches!(BandLu::factor(&a), Err(LinError::Singular { .. })));
    }

    #[test]
    fn bicgstab_matches_direct() {
        let (a, b) = random_band_system(150, 5, 9);
        let xd = BandLu::factor(&a).unwrap().solve(&b);
        let xi = bicgstab(&a, &b, 1e-13, 10_000).unwrap();
        let diff: Vec<f64> = xd.iter().zip(&xi).map(|(p, q)| p - q).collect();
        assert!(norm2(&diff) <= 1e-9 * norm2(&xd));
    }

    #[test]
    fn csr_sums_duplicate_triplets() {
        let a = Csr::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 0, 2.0), (1, 1, 1.0)]);
        assert_eq!(a.matvec(&[1.0, 1.0]), vec![3.0, 1.0]);
    }

    #[test]
    fn coo_text_round_trips_entries() {
        let a = Csr::from_triplets(2, 3, vec![(0, 2, 1.5), (1, 0, -2.0)]);
        let text = a.to_coo_text();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("0 2 1.5"));
        assert!(lines.next().unwrap().starts_with("1 0 -2"));
    }
}
