//! Reference computations built on nalgebra, independent of the crate's own
//! linear algebra.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use qsync_core::linalg::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn to_na<const N: usize>(m: &Mat<f64, N>) -> DMatrix<f64> {
    DMatrix::from_fn(N, N, |i, j| m[(i, j)])
}

pub fn from_na<const N: usize>(m: &DMatrix<f64>) -> Mat<f64, N> {
    Mat::from_fn(|i, j| m[(i, j)])
}

/// Solves `A V + V A^T + D = 0` through `(I (x) A + A (x) I) vec V = -vec D`.
pub fn lyapunov_kronecker<const N: usize>(a: &Mat<f64, N>, d: &Mat<f64, N>) -> Mat<f64, N> {
    let a = DMatrix::from_fn(N, N, |i, j| a[(i, j)]);
    let id = DMatrix::<f64>::identity(N, N);
    let k = id.kronecker(&a) + a.kronecker(&id);
    // column-major vec
    let rhs = DVector::from_fn(N * N, |idx, _| -d[(idx % N, idx / N)]);
    let x = k.lu().solve(&rhs).expect("stable drift gives a nonsingular Kronecker sum");
    Mat::from_fn(|i, j| x[i + j * N])
}

/// Symplectic eigenvalues as the moduli of the eigenvalues of `Omega V`,
/// ascending with duplicates removed.
pub fn symplectic_eigenvalues_oracle<const N: usize>(v: &Mat<f64, N>) -> Vec<f64> {
    let omega = DMatrix::from_fn(N, N, |i, j| {
        if j == i + 1 && i % 2 == 0 {
            1.0
        } else if i == j + 1 && j % 2 == 0 {
            -1.0
        } else {
            0.0
        }
    });
    let v = DMatrix::from_fn(N, N, |i, j| v[(i, j)]);
    let mut mods: Vec<f64> = (omega * v).complex_eigenvalues().iter().map(|z| z.norm()).collect();
    mods.sort_by(|a, b| a.partial_cmp(b).unwrap());
    mods.chunks(2).map(|p| 0.5 * (p[0] + p[1])).collect()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue<const N: usize>(m: &Mat<f64, N>) -> f64 {
    to_na(m).symmetric_eigenvalues().min()
}

/// Random drift with every eigenvalue of its symmetric part `<= -margin`, so
/// `|exp(A t)| <= exp(-margin t)`.
pub fn random_stable_drift<const N: usize>(rng: &mut ChaCha8Rng, margin: f64) -> Mat<f64, N> {
    let r = DMatrix::from_fn(N, N, |_, _| rng.random_range(-1.0..1.0));
    let sym = (&r + r.transpose()) * 0.5;
    let top = sym.symmetric_eigenvalues().max();
    from_na(&(r - DMatrix::identity(N, N) * (top + margin)))
}

/// Random positive semidefinite matrix `B B^T`.
pub fn random_psd<const N: usize>(rng: &mut ChaCha8Rng) -> Mat<f64, N> {
    let b = DMatrix::from_fn(N, N, |_, _| rng.random_range(-1.0..1.0));
    from_na(&(&b * b.transpose()))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_frobenius<const N: usize>(a: &Mat<f64, N>, b: &Mat<f64, N>) -> f64 {
    (*a - *b).frobenius_norm() / b.frobenius_norm()
}
