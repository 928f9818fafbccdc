//! Small fixed-size dense matrices and the symmetric eigensolver used by the
//! covariance code.
//!
//! Matrices here are at most 6x6, so everything lives on the stack and is
//! `Copy`.

use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use crate::scalar::Real;

/// Square `N`x`N` matrix stored row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat<T, const N: usize>(pub [[T; N]; N]);

impl<T: Real, const N: usize> Default for Mat<T, N> {
    fn default() -> Self {
        Self::zeros()
    }
}

impl<T: Real, const N: usize> Mat<T, N> {
    pub fn zeros() -> Self {
        Mat([[T::zero(); N]; N])
    }

    pub fn identity() -> Self {
        Self::from_diagonal(&[T::one(); N])
    }

    pub fn from_diagonal(d: &[T; N]) -> Self {
        let mut m = Self::zeros();
        for (i, &x) in d.iter().enumerate() {
            m.0[i][i] = x;
        }
        m
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros();
        for i in 0..N {
            for j in 0..N {
                m.0[i][j] = f(i, j);
            }
        }
        m
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(|i, j| self.0[j][i])
    }

    pub fn scale(&self, s: T) -> Self {
        Self::from_fn(|i, j| self.0[i][j] * s)
    }

    pub fn diagonal(&self) -> [T; N] {
        let mut d = [T::zero(); N];
        for (i, di) in d.iter_mut().enumerate() {
            *di = self.0[i][i];
        }
        d
    }

    pub fn trace(&self) -> T {
        self.diagonal().into_iter().sum()
    }

    /// `(A + A^T) / 2`
    pub fn symmetrized(&self) -> Self {
        let half = T::lit(0.5);
        Self::from_fn(|i, j| (self.0[i][j] + self.0[j][i]) * half)
    }

    /// `max |A - A^T|`
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..N {
            for j in (i + 1)..N {
                worst = worst.max((self.0[i][j] - self.0[j][i]).abs());
            }
        }
        worst
    }

    pub fn max_abs(&self) -> T {
        self.0
            .iter()
            .flat_map(|r| r.iter())
            .fold(T::zero(), |acc, x| acc.max(x.abs()))
    }

    pub fn frobenius_norm(&self) -> T {
        self.0
            .iter()
            .flat_map(|r| r.iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flat_map(|r| r.iter()).all(|x| x.is_finite())
    }

    pub fn mul_vec(&self, v: &[T; N]) -> [T; N] {
        let mut out = [T::zero(); N];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..N).map(|k| self.0[i][k] * v[k]).sum();
        }
        out
    }

    /// `x^T A y`
    pub fn bilinear(&self, x: &[T; N], y: &[T; N]) -> T {
        let ay = self.mul_vec(y);
        x.iter().zip(ay.iter()).map(|(&a, &b)| a * b).sum()
    }

    /// `x^T A x`
    pub fn quad_form(&self, x: &[T; N]) -> T {
        self.bilinear(x, x)
    }

    /// Principal submatrix of size `M` starting at row/column `offset`.
    pub fn block<const M: usize>(&self, offset: usize) -> Mat<T, M> {
        assert!(offset + M <= N, "block out of range");
        Mat::from_fn(|i, j| self.0[offset + i][offset + j])
    }

    /// `A X A^T`
    pub fn congruence(&self, x: &Self) -> Self {
        *self * *x * self.transpose()
    }

    /// Row-major flattening into `out`, which must have length `N*N`.
    pub fn write_flat(&self, out: &mut [T]) {
        for i in 0..N {
            out[i * N..(i + 1) * N].copy_from_slice(&self.0[i]);
        }
    }

    pub fn from_flat(data: &[T]) -> Self {
        assert_eq!(data.len(), N * N);
        Self::from_fn(|i, j| data[i * N + j])
    }

    /// Eigen-decomposition of the symmetric part of `self` by cyclic Jacobi
    /// rotations. Eigenvalues come back in ascending order, eigenvectors as the
    /// matching columns of the returned matrix.
    pub fn sym_eigen(&self) -> ([T; N], Mat<T, N>) {
        let mut a = self.symmetrized();
        let mut q = Self::identity();
        let scale = a.frobenius_norm();
        if scale == T::zero() {
            return ([T::zero(); N], q);
        }
        let eps = T::epsilon() * scale * T::lit(0.01);

        for _sweep in 0..100 {
            let mut off = T::zero();
            for i in 0..N {
                for j in (i + 1)..N {
                    off += a.0[i][j] * a.0[i][j];
                }
            }
            if off.sqrt() <= eps {
                break;
            }
            for p in 0..N {
                for r in (p + 1)..N {
                    let apr = a.0[p][r];
                    if apr == T::zero() {
                        continue;
                    }
                    let theta = (a.0[r][r] - a.0[p][p]) / (T::lit(2.0) * apr);
                    let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                    let t = sign / (theta.abs() + (theta * theta + T::one()).sqrt());
                    let c = T::one() / (t * t + T::one()).sqrt();
                    let s = t * c;

                    for k in 0..N {
                        let akp = a.0[k][p];
                        let akr = a.0[k][r];
                        a.0[k][p] = c * akp - s * akr;
                        a.0[k][r] = s * akp + c * akr;
                    }
                    for k in 0..N {
                        let apk = a.0[p][k];
                        let ark = a.0[r][k];
                        a.0[p][k] = c * apk - s * ark;
                        a.0[r][k] = s * apk + c * ark;
                    }
                    for k in 0..N {
                        let qkp = q.0[k][p];
                        let qkr = q.0[k][r];
                        q.0[k][p] = c * qkp - s * qkr;
                        q.0[k][r] = s * qkp + c * qkr;
                    }
                }
            }
        }

        let mut order: [usize; N] = std::array::from_fn(|i| i);
        let diag = a.diagonal();
        order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).unwrap_or(std::cmp::Ordering::Equal));
        let vals = std::array::from_fn(|k| diag[order[k]]);
        let vecs = Mat::from_fn(|i, k| q.0[i][order[k]]);
        (vals, vecs)
    }

    pub fn sym_eigenvalues(&self) -> [T; N] {
        self.sym_eigen().0
    }

    /// Applies `f` to the eigenvalues of the symmetric part.
    pub fn sym_map(&self, f: impl Fn(T) -> T) -> Self {
        let (vals, vecs) = self.sym_eigen();
        let fv = vals.map(f);
        Mat::from_fn(|i, j| (0..N).map(|k| vecs.0[i][k] * fv[k] * vecs.0[j][k]).sum())
    }
}

impl<T, const N: usize> Index<(usize, usize)> for Mat<T, N> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.0[i][j]
    }
}

impl<T, const N: usize> IndexMut<(usize, usize)> for Mat<T, N> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.0[i][j]
    }
}

impl<T: Real, const N: usize> Add for Mat<T, N> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::from_fn(|i, j| self.0[i][j] + rhs.0[i][j])
    }
}

impl<T: Real, const N: usize> Sub for Mat<T, N> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::from_fn(|i, j| self.0[i][j] - rhs.0[i][j])
    }
}

impl<T: Real, const N: usize> Neg for Mat<T, N> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-T::one())
    }
}

impl<T: Real, const N: usize> Mul for Mat<T, N> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut out = Self::zeros();
        for i in 0..N {
            for k in 0..N {
                let aik = self.0[i][k];
                if aik == T::zero() {
                    continue;
                }
                for j in 0..N {
                    out.0[i][j] += aik * rhs.0[k][j];
                }
            }
        }
        out
    }
}

/// Symplectic form `Omega = (+) [[0, 1], [-1, 0]]` over `N / 2` modes in
/// `(q1, p1, q2, p2, ...)` ordering.
pub fn symplectic_form<T: Real, const N: usize>() -> Mat<T, N> {
    let mut w = Mat::zeros();
    for k in 0..N / 2 {
        w.0[2 * k][2 * k + 1] = T::one();
        w.0[2 * k + 1][2 * k] = -T::one();
    }
    w
}

/// Symplectic eigenvalues of a positive-definite covariance matrix, ascending,
/// one per mode.
///
/// Computed as the square roots of the eigenvalues of `-(S Omega S)^2`, where
/// `S = V^{1/2}`; that matrix is symmetric and carries each `nu_k^2` twice.
pub fn symplectic_eigenvalues<T: Real, const N: usize, const M: usize>(v: &Mat<T, N>) -> [T; M] {
    assert_eq!(2 * M, N, "mode count must be half the matrix size");
    let root = v.sym_map(|x| x.max(T::zero()).sqrt());
    let k = root * symplectic_form::<T, N>() * root;
    let sq = -(k * k);
    let vals = sq.sym_eigenvalues();
    std::array::from_fn(|m| {
        // eigenvalues come in equal pairs; average each pair
        let a = vals[2 * m].max(T::zero());
        let b = vals[2 * m + 1].max(T::zero());
        ((a + b) * T::lit(0.5)).sqrt()
    })
}

impl<T: Real, const N: usize> Mat<T, N> {
    /// Determinant by Gaussian elimination with partial pivoting.
    pub fn determinant(&self) -> T {
        let mut a = self.0;
        let mut det = T::one();
        for col in 0..N {
            let pivot = (col..N)
                .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap_or(std::cmp::Ordering::Equal))
                .unwrap_or(col);
            if a[pivot][col] == T::zero() {
                return T::zero();
            }
            if pivot != col {
                a.swap(pivot, col);
                det = -det;
            }
            det *= a[col][col];
            let pivot_row = a[col];
            for row in a.iter_mut().skip(col + 1) {
                let f = row[col] / pivot_row[col];
                for (x, &p) in row.iter_mut().zip(&pivot_row).skip(col) {
                    *x -= f * p;
                }
            }
        }
        det
    }
}

/// Symplectic eigenvalues of a two-mode covariance matrix, ascending, from
/// the invariants `Delta = det A + det B + 2 det C` and `det V`. The smaller
/// one is taken as `det V / nu_+^2`, which keeps relative accuracy when the
/// two are far apart.
pub fn two_mode_symplectic_eigenvalues<T: Real>(v: &Mat<T, 4>) -> [T; 2] {
    let det2 = |i: usize, j: usize| v[(i, j)] * v[(i + 1, j + 1)] - v[(i, j + 1)] * v[(i + 1, j)];
    let delta = det2(0, 0) + det2(2, 2) + T::lit(2.0) * det2(0, 2);
    let det = v.determinant();
    let disc = (delta * delta - T::lit(4.0) * det).max(T::zero()).sqrt();
    let plus_sq = (delta + disc) * T::lit(0.5);
    let minus_sq = if plus_sq > T::zero() { det / plus_sq } else { T::zero() };
    [minus_sq.max(T::zero()).sqrt(), plus_sq.max(T::zero()).sqrt()]
}
