//! Phase-difference fluctuations and the two locally measurable bounds on
//! them, plus classical phase-lock detection on mean trajectories.
//!
//! The phase fluctuation of mode `j` is the rotated momentum quadrature
//! `dphi_j = (-sin<phi_j> dq_j + cos<phi_j> dp_j) / sqrt(2 n_j)`, so every
//! quantity here is a quadratic form of the mechanical covariance block.
//!
//! * necessary bound: `max(L_q1, L_p1, L_q2, L_p2)` with
//!   `L_qj = cos^2<phi_j> / (8 n_j Var q_j)` and
//!   `L_pj = sin^2<phi_j> / (8 n_j Var p_j)`;
//! * sufficient bound: `(sqrt(Var phi_1) + sqrt(Var phi_2))^2`.
//!
//! For any physical covariance matrix the phase-difference variance lies
//! between the two.

use serde::Serialize;
use thiserror::Error;

use crate::hl_dynamics::Trajectory;
use crate::quadrature_state::{CovMatrix, MeanState, PhaseFrame};
use crate::scalar::{wrap_angle, Real};

/// Default excitation below which a mode's phase is treated as undefined.
pub const DEFAULT_N_MIN: f64 = 1e-2;
/// Relative slack of the sandwich check.
pub const SANDWICH_REL_TOL: f64 = 1e-9;
/// Absolute slack of the sandwich check.
pub const SANDWICH_ABS_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CriteriaError {
    #[error("phase of mode {mode} is undefined (zero amplitude)")]
    UndefinedPhase { mode: usize },
    #[error("zero variance of {quadrature} makes the necessary bound singular")]
    SingularBound { quadrature: Quadrature },
    #[error("no ungated samples in the trailing window of length {window}")]
    InsufficientData { window: f64 },
}

/// One of the four local mechanical quadratures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Quadrature {
    Q1,
    P1,
    Q2,
    P2,
}

impl Quadrature {
    pub const ALL: [Quadrature; 4] = [Quadrature::Q1, Quadrature::P1, Quadrature::Q2, Quadrature::P2];

    /// Row of this quadrature in the mechanical covariance block.
    pub fn index(self) -> usize {
        match self {
            Quadrature::Q1 => 0,
            Quadrature::P1 => 1,
            Quadrature::Q2 => 2,
            Quadrature::P2 => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Quadrature::Q1 => "q1",
            Quadrature::P1 => "p1",
            Quadrature::Q2 => "q2",
            Quadrature::P2 => "p2",
        }
    }
}

impl std::fmt::Display for Quadrature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Mean phases from the four-quadrant arctangent of `(<q_j>, <p_j>)` and
/// excitations `n_j = (<q_j>^2 + <p_j>^2) / 2`. A zero-amplitude mode gets
/// phase 0 and leaves the frame degenerate.
pub fn phase_frame<T: Real>(m: &MeanState<T>) -> PhaseFrame<T> {
    let half = T::lit(0.5);
    let angle = |q: T, p: T| {
        if q == T::zero() && p == T::zero() {
            T::zero()
        } else {
            wrap_angle(p.atan2(q))
        }
    };
    PhaseFrame {
        phi1: angle(m.q1, m.p1),
        phi2: angle(m.q2, m.p2),
        n1: (m.q1 * m.q1 + m.p1 * m.p1) * half,
        n2: (m.q2 * m.q2 + m.p2 * m.p2) * half,
    }
}

/// Linear forms `dphi_j = c_j . (dq1, dp1, dq2, dp2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseCoefficients<T> {
    pub c1: [T; 4],
    pub c2: [T; 4],
}

impl<T: Real> PhaseCoefficients<T> {
    /// Coefficients of `dphi_1 - dphi_2`.
    pub fn difference(&self) -> [T; 4] {
        std::array::from_fn(|i| self.c1[i] - self.c2[i])
    }
}

pub fn phase_coefficients<T: Real>(frame: &PhaseFrame<T>) -> Result<PhaseCoefficients<T>, CriteriaError> {
    if !(frame.n1 > T::zero()) {
        return Err(CriteriaError::UndefinedPhase { mode: 1 });
    }
    if !(frame.n2 > T::zero()) {
        return Err(CriteriaError::UndefinedPhase { mode: 2 });
    }
    let two = T::lit(2.0);
    let z = T::zero();
    let s1 = (two * frame.n1).sqrt();
    let s2 = (two * frame.n2).sqrt();
    Ok(PhaseCoefficients {
        c1: [-frame.phi1.sin() / s1, frame.phi1.cos() / s1, z, z],
        c2: [z, z, -frame.phi2.sin() / s2, frame.phi2.cos() / s2],
    })
}

/// `Var(phi_1 - phi_2)` in rad^2.
pub fn phase_diff_variance<T: Real>(v: &CovMatrix<T, 4>, frame: &PhaseFrame<T>) -> Result<T, CriteriaError> {
    let c = phase_coefficients(frame)?;
    Ok(v.0.symmetrized().quad_form(&c.difference()))
}

/// Per-mode phase variances `(Var phi_1, Var phi_2)`.
pub fn phase_variances<T: Real>(v: &CovMatrix<T, 4>, frame: &PhaseFrame<T>) -> Result<(T, T), CriteriaError> {
    let c = phase_coefficients(frame)?;
    let vs = v.0.symmetrized();
    Ok((vs.quad_form(&c.c1), vs.quad_form(&c.c2)))
}

/// Value of the local necessary bound and the quadrature attaining it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NecessaryBound<T> {
    pub value: T,
    pub argmax: Quadrature,
    /// `L_q1, L_p1, L_q2, L_p2`
    pub terms: [T; 4],
}

/// Largest of the four single-quadrature lower bounds on `Var(phi_1 - phi_2)`.
///
/// Uses `|<[p_j, q_j]>|^2 = 1`.
pub fn necessary_bound<T: Real>(
    v: &CovMatrix<T, 4>,
    frame: &PhaseFrame<T>,
) -> Result<NecessaryBound<T>, CriteriaError> {
    if !(frame.n1 > T::zero()) {
        return Err(CriteriaError::UndefinedPhase { mode: 1 });
    }
    if !(frame.n2 > T::zero()) {
        return Err(CriteriaError::UndefinedPhase { mode: 2 });
    }
    let eight = T::lit(8.0);
    let mut terms = [T::zero(); 4];
    for quad in Quadrature::ALL {
        let var = v.get(quad.index(), quad.index());
        if !(var > T::zero()) {
            return Err(CriteriaError::SingularBound { quadrature: quad });
        }
        let (phi, n) = match quad {
            Quadrature::Q1 | Quadrature::P1 => (frame.phi1, frame.n1),
            Quadrature::Q2 | Quadrature::P2 => (frame.phi2, frame.n2),
        };
        let trig = match quad {
            Quadrature::Q1 | Quadrature::Q2 => phi.cos(),
            Quadrature::P1 | Quadrature::P2 => phi.sin(),
        };
        terms[quad.index()] = trig * trig / (eight * n * var);
    }
    let mut argmax = Quadrature::Q1;
    for quad in Quadrature::ALL {
        if terms[quad.index()] > terms[argmax.index()] {
            argmax = quad;
        }
    }
    Ok(NecessaryBound {
        value: terms[argmax.index()],
        argmax,
        terms,
    })
}

/// `(sqrt(Var phi_1) + sqrt(Var phi_2))^2`, an upper bound on
/// `Var(phi_1 - phi_2)` built from single-mode moments.
pub fn sufficient_bound<T: Real>(v: &CovMatrix<T, 4>, frame: &PhaseFrame<T>) -> Result<T, CriteriaError> {
    let (v1, v2) = phase_variances(v, frame)?;
    let s = v1.max(T::zero()).sqrt() + v2.max(T::zero()).sqrt();
    Ok(s * s)
}

/// `lower <= value <= upper` up to the sandwich slack.
pub fn within_bounds<T: Real>(lower: T, value: T, upper: T) -> bool {
    let slack = |x: T| T::lit(SANDWICH_REL_TOL) * x.abs() + T::lit(SANDWICH_ABS_TOL);
    lower <= value + slack(value) && value <= upper + slack(upper)
}

/// Verdict of the two local criteria at precision `epsilon`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Sufficient bound `<= epsilon`.
    Synchronized,
    /// Necessary bound `> epsilon`.
    NotSynchronized,
    /// Necessary bound `<= epsilon <` sufficient bound.
    Indeterminate,
    /// Some excitation below the gate; no verdict.
    Gated,
}

impl Verdict {
    pub fn from_bounds<T: Real>(l_nec: T, u_suf: T, epsilon: T) -> Self {
        if u_suf <= epsilon {
            Verdict::Synchronized
        } else if l_nec > epsilon {
            Verdict::NotSynchronized
        } else {
            Verdict::Indeterminate
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Verdict::Synchronized => "synchronized",
            Verdict::NotSynchronized => "not_synchronized",
            Verdict::Indeterminate => "indeterminate",
            Verdict::Gated => "gated",
        }
    }
}

/// All criteria evaluated at one time point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SyncReport<T> {
    pub t: T,
    pub var_minus: T,
    pub l_nec: T,
    pub l_nec_argmax: Option<Quadrature>,
    pub u_suf: T,
    /// Mean-phase difference; unwrapped along a trajectory by
    /// [`reports_along`], wrapped into (-pi, pi] otherwise.
    pub phi_minus_classical: T,
    pub frame: PhaseFrame<T>,
    pub gated: bool,
    pub verdict: Verdict,
}

impl<T: Real> SyncReport<T> {
    /// Whether the bound ordering holds (vacuously true for gated rows).
    pub fn sandwich_holds(&self) -> bool {
        self.gated || within_bounds(self.l_nec, self.var_minus, self.u_suf)
    }
}

/// Evaluates the criteria on a mechanical covariance block and phase frame.
pub fn report_mech<T: Real>(
    v: &CovMatrix<T, 4>,
    frame: &PhaseFrame<T>,
    t: T,
    epsilon: T,
    n_min: T,
) -> Result<SyncReport<T>, CriteriaError> {
    let gated = frame.min_excitation() < n_min || frame.is_degenerate();
    let phi_minus = wrap_angle(frame.phi1 - frame.phi2);
    if frame.is_degenerate() {
        return Ok(SyncReport {
            t,
            var_minus: T::nan(),
            l_nec: T::nan(),
            l_nec_argmax: None,
            u_suf: T::nan(),
            phi_minus_classical: phi_minus,
            frame: *frame,
            gated,
            verdict: Verdict::Gated,
        });
    }
    let var_minus = phase_diff_variance(v, frame)?;
    let nec = necessary_bound(v, frame)?;
    let u_suf = sufficient_bound(v, frame)?;
    let verdict = if gated {
        Verdict::Gated
    } else {
        Verdict::from_bounds(nec.value, u_suf, epsilon)
    };
    Ok(SyncReport {
        t,
        var_minus,
        l_nec: nec.value,
        l_nec_argmax: Some(nec.argmax),
        u_suf,
        phi_minus_classical: phi_minus,
        frame: *frame,
        gated,
        verdict,
    })
}

/// Evaluates the criteria for the full covariance matrix and mean state.
pub fn report<T: Real>(
    v: &CovMatrix<T, 6>,
    m: &MeanState<T>,
    t: T,
    epsilon: T,
    n_min: T,
) -> Result<SyncReport<T>, CriteriaError> {
    report_mech(&v.mech(), &phase_frame(m), t, epsilon, n_min)
}

/// Continues a sequence of wrapped angles by choosing, for each sample, the
/// multiple of 2pi closest to the previous unwrapped value.
pub fn unwrap_phases<T: Real>(wrapped: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(wrapped.len());
    let mut prev: Option<T> = None;
    for &w in wrapped {
        let u = match prev {
            None => w,
            Some(p) => p + wrap_angle(w - p),
        };
        out.push(u);
        prev = Some(u);
    }
    out
}

/// Criteria along a whole trajectory, with the mean-phase difference unwrapped
/// across ungated samples.
pub fn reports_along<T: Real>(
    traj: &Trajectory<T>,
    epsilon: T,
    n_min: T,
) -> Result<Vec<SyncReport<T>>, CriteriaError> {
    let mut rows = traj
        .samples
        .iter()
        .map(|s| report(&s.cov, &s.mean, s.t, epsilon, n_min))
        .collect::<Result<Vec<_>, _>>()?;
    unwrap_rows(&mut rows);
    Ok(rows)
}

/// Replaces `phi_minus_classical` of non-degenerate rows by its unwrapped
/// continuation; degenerate rows get NaN.
pub fn unwrap_rows<T: Real>(rows: &mut [SyncReport<T>]) {
    let mut prev: Option<T> = None;
    for r in rows.iter_mut() {
        if r.frame.is_degenerate() {
            r.phi_minus_classical = T::nan();
            continue;
        }
        let w = r.phi_minus_classical;
        let u = match prev {
            None => w,
            Some(p) => {
                let jump = wrap_angle(w - p);
                if jump.abs() > T::FRAC_PI_2() {
                    log::warn!(
                        "phase difference jumps by {jump} rad at t = {}; sampling may be too coarse to unwrap",
                        r.t
                    );
                }
                p + jump
            }
        };
        r.phi_minus_classical = u;
        prev = Some(u);
    }
}

/// Outcome of classical phase-lock detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LockVerdict<T> {
    pub locked: bool,
    /// Least-squares slope of the unwrapped phase difference (rad per unit time).
    pub slope: T,
    /// Mean phase difference over the window, in (-pi, pi].
    pub locked_value: T,
    pub samples_used: usize,
}

/// Lock detection on an explicit `(t, wrapped phase difference, gated)` series.
pub fn lock_from_series<T: Real>(
    series: &[(T, T, bool)],
    window: T,
    slope_tol: T,
) -> Result<LockVerdict<T>, CriteriaError> {
    let t_last = match series.last() {
        Some(s) => s.0,
        None => return Err(CriteriaError::InsufficientData { window: window.to_f64_lossy() }),
    };
    let (times, wrapped): (Vec<T>, Vec<T>) = series
        .iter()
        .filter(|(t, _, gated)| !*gated && *t >= t_last - window)
        .map(|&(t, w, _)| (t, w))
        .unzip();
    if times.len() < 2 {
        return Err(CriteriaError::InsufficientData { window: window.to_f64_lossy() });
    }
    let unwrapped = unwrap_phases(&wrapped);
    let n = T::from_usize(times.len()).unwrap();
    let t_mean = times.iter().copied().sum::<T>() / n;
    let y_mean = unwrapped.iter().copied().sum::<T>() / n;
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    for (&t, &y) in times.iter().zip(unwrapped.iter()) {
        sxy += (t - t_mean) * (y - y_mean);
        sxx += (t - t_mean) * (t - t_mean);
    }
    let slope = if sxx > T::zero() { sxy / sxx } else { T::zero() };
    Ok(LockVerdict {
        locked: slope.abs() <= slope_tol,
        slope,
        locked_value: wrap_angle(y_mean),
        samples_used: times.len(),
    })
}

/// Fits the slope of the unwrapped mean-phase difference over the trailing
/// `window` of the trajectory; samples with `min(n1, n2) < n_min` are skipped.
pub fn classical_lock<T: Real>(
    traj: &Trajectory<T>,
    window: T,
    slope_tol: T,
    n_min: T,
) -> Result<LockVerdict<T>, CriteriaError> {
    let series: Vec<(T, T, bool)> = traj
        .samples
        .iter()
        .map(|s| {
            let f = phase_frame(&s.mean);
            let gated = f.is_degenerate() || f.min_excitation() < n_min;
            (s.t, wrap_angle(f.phi1 - f.phi2), gated)
        })
        .collect();
    lock_from_series(&series, window, slope_tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, SQRT_2};

    fn vac4() -> CovMatrix<f64, 4> {
        CovMatrix::vacuum()
    }

    #[test]
    fn frame_quadrants() {
        let f = phase_frame(&MeanState { q1: SQRT_2, ..MeanState::zero() });
        assert_eq!(f.phi1, 0.0);
        assert!((f.n1 - 1.0).abs() < 1e-15);
        let f = phase_frame(&MeanState { p1: SQRT_2, ..MeanState::zero() });
        assert!((f.phi1 - FRAC_PI_2).abs() < 1e-15);
        assert!((f.n1 - 1.0).abs() < 1e-15);
        let f = phase_frame(&MeanState { q1: -1.0, p1: -1.0, ..MeanState::zero() });
        assert!((f.phi1 + 3.0 * FRAC_PI_4).abs() < 1e-15);
        assert!((f.n1 - 1.0).abs() < 1e-15);
        let f = phase_frame(&MeanState { q1: -1.0, p1: -0.0, q2: 1.0, ..MeanState::zero() });
        assert_eq!(f.phi1, PI);
    }

    #[test]
    fn degenerate_frame() {
        let f = phase_frame(&MeanState { q1: 1.0, ..MeanState::zero() });
        assert_eq!(f.phi2, 0.0);
        assert_eq!(f.n2, 0.0);
        assert!(f.is_degenerate());
        assert_eq!(phase_coefficients(&f), Err(CriteriaError::UndefinedPhase { mode: 2 }));
        assert!(phase_diff_variance(&vac4(), &f).is_err());
        assert!(sufficient_bound(&vac4(), &f).is_err());
    }

    #[test]
    fn coefficients() {
        let c = phase_coefficients(&PhaseFrame::new(0.0, 0.0, 0.5, 0.5)).unwrap();
        assert_eq!(c.c1, [-0.0, 1.0, 0.0, 0.0]);
        let c = phase_coefficients(&PhaseFrame::new(FRAC_PI_2, 0.0, 0.5, 0.5)).unwrap();
        assert!((c.c1[0] + 1.0).abs() < 1e-15 && c.c1[1].abs() < 1e-15);
        let c = phase_coefficients(&PhaseFrame::new(FRAC_PI_4, 0.0, 1.0, 1.0)).unwrap();
        assert!((c.c1[0] + 0.5).abs() < 1e-15);
        assert!((c.c1[1] - 0.5).abs() < 1e-15);
        assert_eq!(&c.c1[2..], &[0.0, 0.0]);
    }

    #[test]
    fn vacuum_variance_and_bounds() {
        let f = PhaseFrame::new(0.0, 0.0, 1.0, 1.0);
        assert!((phase_diff_variance(&vac4(), &f).unwrap() - 0.5).abs() < 1e-15);
        let nec = necessary_bound(&vac4(), &f).unwrap();
        assert!((nec.value - 0.25).abs() < 1e-15);
        assert_eq!(nec.argmax, Quadrature::Q1);
        assert!((sufficient_bound(&vac4(), &f).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn correlated_momenta_cancel() {
        let mut v = vac4();
        v.0[(1, 3)] = 0.5;
        v.0[(3, 1)] = 0.5;
        let f = PhaseFrame::new(0.0, 0.0, 1.0, 1.0);
        assert!(phase_diff_variance(&v, &f).unwrap().abs() < 1e-15);
    }

    #[test]
    fn necessary_bound_edge_cases() {
        let f = PhaseFrame::new(FRAC_PI_2, 0.0, 1.0, 1.0);
        let nec = necessary_bound(&vac4(), &f).unwrap();
        assert_eq!(nec.terms[0], FRAC_PI_2.cos().powi(2) / 4.0);
        assert!(nec.terms[0] < 1e-32);
        // growing Var q1 sends L_q1 to zero
        let f = PhaseFrame::new(0.0, 0.0, 1.0, 1.0);
        let mut prev = f64::INFINITY;
        for big in [1.0, 1e3, 1e6, 1e9] {
            let v = CovMatrix::from_diagonal([big, 0.5, 0.5, 0.5]);
            let l = necessary_bound(&v, &f).unwrap().terms[0];
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-9);
        let v = CovMatrix::from_diagonal([0.0, 0.5, 0.5, 0.5]);
        assert_eq!(
            necessary_bound(&v, &f),
            Err(CriteriaError::SingularBound { quadrature: Quadrature::Q1 })
        );
    }

    #[test]
    fn necessary_terms_never_vanish_together() {
        for k in 0..32 {
            let phi = -PI + k as f64 * 0.2;
            let f = PhaseFrame::new(phi, -phi, 2.0, 3.0);
            let t = necessary_bound(&vac4(), &f).unwrap().terms;
            assert!(t[0] > 0.0 || t[1] > 0.0);
            assert!(t[2] > 0.0 || t[3] > 0.0);
        }
    }

    #[test]
    fn equal_mode_variances() {
        // both phase variances equal v -> bound 4v
        let f = PhaseFrame::new(0.3, -1.1, 2.0, 2.0);
        let v = CovMatrix::from_diagonal([0.8_f64, 0.8, 0.8, 0.8]);
        let (a, b) = phase_variances(&v, &f).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!((sufficient_bound(&v, &f).unwrap() - 4.0 * a).abs() < 1e-15);
    }

    #[test]
    fn verdict_rules() {
        assert_eq!(Verdict::from_bounds(0.3, 0.9, 0.1), Verdict::NotSynchronized);
        assert_eq!(Verdict::from_bounds(1e-7, 8e-6, 1e-3), Verdict::Synchronized);
        assert_eq!(Verdict::from_bounds(0.05, 0.2, 0.1), Verdict::Indeterminate);
    }

    #[test]
    fn report_gating() {
        let m = MeanState { q1: 0.1_f64, q2: 2.0, ..MeanState::zero() };
        let r = report(&CovMatrix::vacuum(), &m, 0.0, 0.1, 1e-2).unwrap();
        assert!(r.gated);
        assert_eq!(r.verdict, Verdict::Gated);
        assert!(r.var_minus.is_finite());
        let r = report(&CovMatrix::vacuum(), &MeanState::<f64>::zero(), 0.0, 0.1, 1e-2).unwrap();
        assert!(r.gated && r.var_minus.is_nan());
        let m = MeanState { q1: 3.0, q2: 2.0, ..MeanState::zero() };
        let r = report(&CovMatrix::vacuum(), &m, 0.0, 10.0, 1e-2).unwrap();
        assert!(!r.gated);
        assert_eq!(r.verdict, Verdict::Synchronized);
        assert!(r.sandwich_holds());
    }

    #[test]
    fn unwrapping() {
        let w = [3.0, -3.0, -2.9, 3.1];
        let u = unwrap_phases(&w);
        assert!((u[1] - (2.0 * PI - 3.0)).abs() < 1e-12);
        assert!((u[3] - 3.1).abs() < 1e-12);
    }

    #[test]
    fn lock_on_linear_drift() {
        let series: Vec<(f64, f64, bool)> = (0..2000)
            .map(|k| {
                let t = k as f64;
                (t, wrap_angle(1.0 + 0.001 * t), false)
            })
            .collect();
        let v = lock_from_series(&series, 1000.0, 1e-4).unwrap();
        assert!(!v.locked);
        assert!((v.slope - 0.001).abs() < 1e-9);
        let flat: Vec<_> = (0..100).map(|k| (k as f64, PI, false)).collect();
        let v = lock_from_series(&flat, 50.0, 1e-4).unwrap();
        assert!(v.locked);
        assert!((v.locked_value - PI).abs() < 1e-12);
        let gated: Vec<_> = (0..100).map(|k| (k as f64, 0.0, true)).collect();
        assert!(matches!(lock_from_series(&gated, 50.0, 1e-4), Err(CriteriaError::InsufficientData { .. })));
    }
}
