//! Moment-level description of the three-mode system: physical parameters,
//! mean quadratures, covariance matrices and phase frames.
//!
//! Conventions: `hbar = 1`, quadratures `q = (b + b^dag)/sqrt(2)`,
//! `p = (b - b^dag)/(i sqrt(2))`, so the vacuum variance is 1/2. All rates and
//! frequencies are in units of the first mechanical frequency.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;
use crate::scalar::Real;

/// Relative tolerance on `max|V - V^T|`.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Absolute tolerance on the smallest eigenvalue of a covariance matrix.
pub const PSD_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum StateError {
    #[error("expected a {expected}x{expected} matrix, got {rows} rows with lengths {cols:?}")]
    Dimension {
        expected: usize,
        rows: usize,
        cols: Vec<usize>,
    },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: String, reason: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("cannot parse value `{value}` for `{name}`")]
    Parse { name: String, value: String },
}

/// Physical rates and frequencies of the two-membrane optomechanical cavity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemParams<T> {
    pub omega1: T,
    pub omega2: T,
    pub gamma1: T,
    pub gamma2: T,
    pub g1: T,
    pub g2: T,
    pub kappa: T,
    /// Laser detuning `omega_L - omega_c`.
    pub delta: T,
    /// Drive amplitude.
    pub eta: T,
}

impl<T: Real> SystemParams<T> {
    /// Names accepted by [`SystemParams::set`], in declaration order.
    pub const FIELDS: [&'static str; 9] = [
        "omega1", "omega2", "gamma1", "gamma2", "g1", "g2", "kappa", "delta", "eta",
    ];

    pub fn validate(&self) -> Result<(), StateError> {
        let bad = |name: &str, reason: &str| {
            Err(StateError::InvalidParam {
                name: name.to_owned(),
                reason: reason.to_owned(),
            })
        };
        for name in Self::FIELDS {
            if !self.get(name).expect("known field").is_finite() {
                return bad(name, "must be finite");
            }
        }
        if self.omega1 <= T::zero() {
            return bad("omega1", "must be > 0");
        }
        if self.omega2 <= T::zero() {
            return bad("omega2", "must be > 0");
        }
        if self.kappa <= T::zero() {
            return bad("kappa", "must be > 0");
        }
        if self.gamma1 < T::zero() {
            return bad("gamma1", "must be >= 0");
        }
        if self.gamma2 < T::zero() {
            return bad("gamma2", "must be >= 0");
        }
        if self.eta < T::zero() {
            return bad("eta", "must be >= 0");
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<T> {
        Some(match name {
            "omega1" => self.omega1,
            "omega2" => self.omega2,
            "gamma1" => self.gamma1,
            "gamma2" => self.gamma2,
            "g1" => self.g1,
            "g2" => self.g2,
            "kappa" => self.kappa,
            "delta" => self.delta,
            "eta" => self.eta,
            _ => return None,
        })
    }

    pub fn set(&mut self, name: &str, value: T) -> Result<(), StateError> {
        let slot = match name {
            "omega1" => &mut self.omega1,
            "omega2" => &mut self.omega2,
            "gamma1" => &mut self.gamma1,
            "gamma2" => &mut self.gamma2,
            "g1" => &mut self.g1,
            "g2" => &mut self.g2,
            "kappa" => &mut self.kappa,
            "delta" => &mut self.delta,
            "eta" => &mut self.eta,
            _ => return Err(StateError::UnknownParam(name.to_owned())),
        };
        *slot = value;
        Ok(())
    }

    /// Applies `key = value` pairs whose keys name parameter fields. Keys that
    /// are not parameter names are returned untouched.
    pub fn apply_pairs<'a>(
        &mut self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Vec<(&'a str, &'a str)>, StateError> {
        let mut rest = Vec::new();
        for (k, v) in pairs {
            if Self::FIELDS.contains(&k) {
                let x: f64 = v.trim().parse().map_err(|_| StateError::Parse {
                    name: k.to_owned(),
                    value: v.to_owned(),
                })?;
                self.set(k, T::lit(x))?;
            } else {
                rest.push((k, v));
            }
        }
        Ok(rest)
    }

    /// Parses a flat `key = value` file. Every key must be a parameter name;
    /// missing keys keep their value from `base`.
    pub fn from_kv_str(text: &str, base: Self) -> Result<Self, StateError> {
        let pairs = parse_kv(text);
        let mut p = base;
        let rest = p.apply_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        if let Some((k, _)) = rest.first() {
            return Err(StateError::UnknownParam((*k).to_owned()));
        }
        p.validate()?;
        Ok(p)
    }
}

impl<T: Real> fmt::Display for SystemParams<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for name in Self::FIELDS {
            writeln!(f, "{name} = {}", self.get(name).expect("known field"))?;
        }
        Ok(())
    }
}

/// Splits a flat key-value text into ordered `(key, value)` pairs.
///
/// Blank lines and lines starting with `#` are skipped; `key = value` and
/// `key: value` are both accepted. Trailing `# ...` comments are stripped.
pub fn parse_kv(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|line| {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                return None;
            }
            let (k, v) = line.split_once('=').or_else(|| line.split_once(':'))?;
            Some((k.trim().to_owned(), v.trim().to_owned()))
        })
        .collect()
}

/// First moments of `(q1, p1, q2, p2, X, Y)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanState<T> {
    pub q1: T,
    pub p1: T,
    pub q2: T,
    pub p2: T,
    /// `sqrt(2) Re<a>`
    pub x: T,
    /// `sqrt(2) Im<a>`
    pub y: T,
}

impl<T: Real> MeanState<T> {
    pub fn zero() -> Self {
        Self::from_array([T::zero(); 6])
    }

    pub fn from_array(a: [T; 6]) -> Self {
        MeanState {
            q1: a[0],
            p1: a[1],
            q2: a[2],
            p2: a[3],
            x: a[4],
            y: a[5],
        }
    }

    pub fn to_array(&self) -> [T; 6] {
        [self.q1, self.p1, self.q2, self.p2, self.x, self.y]
    }

    /// Builds the mean state from complex amplitudes `<b1>`, `<b2>`, `<a>`
    /// given as `(re, im)` pairs.
    pub fn from_amplitudes(b1: (T, T), b2: (T, T), a: (T, T)) -> Self {
        let s = T::SQRT_2();
        MeanState {
            q1: s * b1.0,
            p1: s * b1.1,
            q2: s * b2.0,
            p2: s * b2.1,
            x: s * a.0,
            y: s * a.1,
        }
    }

    /// `|<a>|^2`
    pub fn cavity_occupation(&self) -> T {
        (self.x * self.x + self.y * self.y) * T::lit(0.5)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// Symmetrized second moments of `N` quadrature fluctuations.
///
/// The full system uses `N = 6` in ordering `(dq1, dp1, dq2, dp2, dX, dY)`;
/// the mechanical block is `N = 4`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovMatrix<T, const N: usize = 6>(pub Mat<T, N>);

/// Outcome of [`validate_cm`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CmValidity<T> {
    /// `max|V - V^T|`
    pub symmetry_defect: T,
    /// Smallest eigenvalue of `(V + V^T) / 2`.
    pub min_eigenvalue: T,
    pub is_symmetric: bool,
    pub is_physical: bool,
}

impl<T: Real, const N: usize> CovMatrix<T, N> {
    /// Vacuum: every quadrature variance 1/2.
    pub fn vacuum() -> Self {
        CovMatrix(Mat::from_diagonal(&[T::lit(0.5); N]))
    }

    pub fn from_diagonal(d: [T; N]) -> Self {
        CovMatrix(Mat::from_diagonal(&d))
    }

    pub fn zeros() -> Self {
        CovMatrix(Mat::zeros())
    }

    /// Builds a covariance matrix from nested rows, checking the shape.
    pub fn try_from_rows(rows: &[Vec<T>]) -> Result<Self, StateError> {
        if rows.len() != N || rows.iter().any(|r| r.len() != N) {
            return Err(StateError::Dimension {
                expected: N,
                rows: rows.len(),
                cols: rows.iter().map(Vec::len).collect(),
            });
        }
        Ok(CovMatrix(Mat::from_fn(|i, j| rows[i][j])))
    }

    pub fn matrix(&self) -> &Mat<T, N> {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.0 .0[i][j]
    }

    pub fn symmetrized(&self) -> Self {
        CovMatrix(self.0.symmetrized())
    }

    pub fn validate(&self) -> CmValidity<T> {
        validate_cm(self)
    }
}

impl<T: Real> CovMatrix<T, 6> {
    /// Mechanical `(dq1, dp1, dq2, dp2)` block.
    pub fn mech(&self) -> CovMatrix<T, 4> {
        mech_submatrix(self)
    }
}

/// Symmetry defect, smallest eigenvalue and physicality flag of a covariance
/// matrix.
pub fn validate_cm<T: Real, const N: usize>(v: &CovMatrix<T, N>) -> CmValidity<T> {
    let symmetry_defect = v.0.asymmetry();
    let scale = v.0.max_abs().max(T::one());
    let is_symmetric = symmetry_defect <= T::lit(SYMMETRY_TOL) * scale;
    let finite = v.0.is_finite();
    let min_eigenvalue = if finite {
        v.0.sym_eigenvalues()[0]
    } else {
        T::nan()
    };
    let diag_ok = v.0.diagonal().iter().all(|&d| d >= -T::lit(PSD_TOL));
    let is_physical =
        finite && is_symmetric && diag_ok && min_eigenvalue >= -T::lit(PSD_TOL);
    CmValidity {
        symmetry_defect,
        min_eigenvalue,
        is_symmetric,
        is_physical,
    }
}

/// Checks the shape of raw nested rows and validates them as a 6x6 matrix.
pub fn validate_rows<T: Real>(rows: &[Vec<T>]) -> Result<CmValidity<T>, StateError> {
    CovMatrix::<T, 6>::try_from_rows(rows).map(|v| validate_cm(&v))
}

/// Mechanical 4x4 principal block of the full covariance matrix.
pub fn mech_submatrix<T: Real>(v: &CovMatrix<T, 6>) -> CovMatrix<T, 4> {
    CovMatrix(v.0.block::<4>(0))
}

/// Mean phases `<phi_j>` and excitations `n_j = |<b_j>|^2` of the two
/// mechanical modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PhaseFrame<T> {
    pub phi1: T,
    pub phi2: T,
    pub n1: T,
    pub n2: T,
}

impl<T: Real> PhaseFrame<T> {
    pub fn new(phi1: T, phi2: T, n1: T, n2: T) -> Self {
        PhaseFrame { phi1, phi2, n1, n2 }
    }

    /// True when either mode has zero amplitude, leaving its phase undefined.
    pub fn is_degenerate(&self) -> bool {
        !(self.n1 > T::zero() && self.n2 > T::zero())
    }

    pub fn min_excitation(&self) -> T {
        self.n1.min(self.n2)
    }

    /// Same frame with both excitations multiplied by `lambda`.
    pub fn scaled(&self, lambda: T) -> Self {
        PhaseFrame {
            n1: self.n1 * lambda,
            n2: self.n2 * lambda,
            ..*self
        }
    }
}

/// Writes parameter values as a deterministic `BTreeMap` (used for config
/// echo in summaries).
pub fn params_map<T: Real>(p: &SystemParams<T>) -> BTreeMap<&'static str, f64> {
    SystemParams::<T>::FIELDS
        .iter()
        .map(|&k| (k, p.get(k).expect("known field").to_f64_lossy()))
        .collect()
}
