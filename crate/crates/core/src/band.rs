//! Symmetric positive definite band matrices and their Cholesky factors.
//!
//! The shooting normal equations couple only neighbouring segments, so once
//! the unknowns are ordered segment by segment the matrix is banded and a
//! band factorisation costs `O(n b^2)` instead of `O(n^3)`.

// band sweeps index the factor and the right-hand side by the same offset
#![allow(clippy::needless_range_loop)]

/// Lower triangle of a symmetric band matrix with half-bandwidth `bw`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    // row i holds entries (i, i - bw ..= i); slots left of column 0 stay zero
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw, "({i}, {j}) outside the band");
        i * (self.bw + 1) + self.bw - (i - j)
    }

    /// Entry `(i, j)` of the symmetric matrix; zero outside the band.
    #[cfg(test)]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    /// Adds `v` to entries `(i, j)` and `(j, i)`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.n {
            let s = self.slot(i, i);
            self.data[s] += v;
        }
    }

    /// `L L^T` factorisation; `None` unless the matrix is numerically
    /// positive definite.
    pub fn cholesky(mut self) -> Option<BandCholesky> {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            let row_j = j * w + bw - j;
            let mut d = self.data[row_j + j];
            for k in lo..j {
                d -= self.data[row_j + k].powi(2);
            }
            if !(d > 0.0 && d.is_finite()) {
                return None;
            }
            let d = d.sqrt();
            self.data[row_j + j] = d;
            for i in j + 1..(j + w).min(n) {
                let row_i = i * w + bw - i;
                let mut s = self.data[row_i + j];
                for k in i.saturating_sub(bw)..j {
                    s -= self.data[row_i + k] * self.data[row_j + k];
                }
                self.data[row_i + j] = s / d;
            }
        }
        Some(BandCholesky { l: self })
    }
}

/// Lower band factor of an SPD band matrix.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    l: BandMatrix,
}

impl BandCholesky {
    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let BandMatrix { n, bw, ref data } = self.l;
        assert_eq!(b.len(), n);
        let w = bw + 1;
        let at = |i: usize, j: usize| data[i * w + bw - i + j];
        for i in 0..n {
            let mut s = b[i];
            for k in i.saturating_sub(bw)..i {
                s -= at(i, k) * b[k];
            }
            b[i] = s / at(i, i);
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..(i + w).min(n) {
                s -= at(k, i) * b[k];
            }
            b[i] = s / at(i, i);
        }
    }
}

/// LU factorisation with partial pivoting of a general band matrix with
/// `kl` sub- and `ku` superdiagonals.
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    // column-major, entry (i, j) at row kl + ku + i - j of column j; the
    // first kl rows receive the fill from row interchanges
    ab: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandLu {
    fn ld(&self) -> usize {
        2 * self.kl + self.ku + 1
    }

    fn at(&self, i: usize, j: usize) -> usize {
        (self.kl + self.ku + i - j) + j * self.ld()
    }

    /// Factors the matrix with the given entries; entries outside the band
    /// are a caller bug. Returns `None` if a pivot vanishes.
    pub fn factor(n: usize, kl: usize, ku: usize, entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Option<Self> {
        let mut lu = Self { n, kl, ku, ab: vec![0.0; (2 * kl + ku + 1) * n], pivots: vec![0; n] };
        for (i, j, v) in entries {
            assert!(i <= j + kl && j <= i + ku, "({i}, {j}) outside the band");
            let s = lu.at(i, j);
            lu.ab[s] += v;
        }
        let upper = kl + ku;
        let mut ju = 0;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut p = 0;
            let mut best = 0.0;
            for r in 0..=km {
                let v = lu.ab[lu.at(j + r, j)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if !(best > 0.0 && best.is_finite()) {
                return None;
            }
            lu.pivots[j] = j + p;
            ju = ju.max((j + ku + p).min(n - 1));
            if p != 0 {
                for c in j..=ju {
                    let (x, y) = (lu.at(j, c), lu.at(j + p, c));
                    lu.ab.swap(x, y);
                }
            }
            let d = lu.ab[lu.at(j, j)];
            for r in 1..=km {
                let s = lu.at(j + r, j);
                lu.ab[s] /= d;
            }
            for c in j + 1..=ju.min(j + upper) {
                let u = lu.ab[lu.at(j, c)];
                if u == 0.0 {
                    continue;
                }
                for r in 1..=km {
                    let l = lu.ab[lu.at(j + r, j)];
                    let s = lu.at(j + r, c);
                    lu.ab[s] -= l * u;
                }
            }
        }
        Some(lu)
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        for j in 0..n {
            b.swap(j, self.pivots[j]);
            let bj = b[j];
            for r in 1..=self.kl.min(n - 1 - j) {
                b[j + r] -= self.ab[self.at(j + r, j)] * bj;
            }
        }
        let upper = self.kl + self.ku;
        for i in (0..n).rev() {
            let mut s = b[i];
            for c in i + 1..(i + upper + 1).min(n) {
                s -= self.ab[self.at(i, c)] * b[c];
            }
            b[i] = s / self.ab[self.at(i, i)];
        }
    }
}
