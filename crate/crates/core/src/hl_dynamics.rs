//! Linearized Heisenberg-Langevin dynamics: mean-field equations, drift and
//! diffusion matrices, and the joint integration of the means together with
//! the covariance Lyapunov equation `dV/dt = A V + V A^T + D`.

use thiserror::Error;

use crate::linalg::Mat;
use crate::ode::{dopri5_step, rk4_step, step_factor, Tolerance};
use crate::quadrature_state::{validate_cm, CovMatrix, MeanState, StateError, SystemParams};
use crate::scalar::Real;

const STATE_LEN: usize = 6 + 36;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("step at t = {t} rejected: error ratio {error_ratio} > 1 (retry with dt = {suggested_dt})")]
    StepRejected {
        t: f64,
        error_ratio: f64,
        suggested_dt: f64,
    },
    #[error("covariance lost physicality at t = {t}: min eigenvalue {min_eigenvalue}, asymmetry {symmetry_defect}")]
    Unphysical {
        t: f64,
        min_eigenvalue: f64,
        symmetry_defect: f64,
    },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("step size underflow at t = {t} (dt = {dt})")]
    StepUnderflow { t: f64, dt: f64 },
    #[error("step budget of {max_steps} exhausted at t = {t}")]
    TooManySteps { t: f64, max_steps: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Params(#[from] StateError),
}

/// Linear generator of the fluctuation dynamics, ordered like [`CovMatrix`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftMatrix<T>(pub Mat<T, 6>);

/// Time derivative of the six mean quadratures.
///
/// The cavity amplitude obeys `d<a>/dt = [i(Delta + sqrt2 sum g_j <q_j>) - kappa] <a> + eta`,
/// i.e. the mechanical displacement shifts the detuning. Fluctuation feedback
/// onto the means is dropped.
pub fn mean_field_rhs<T: Real>(params: &SystemParams<T>, m: &MeanState<T>) -> MeanState<T> {
    let s2 = T::SQRT_2();
    let shift = params.delta + s2 * (params.g1 * m.q1 + params.g2 * m.q2);
    let occupation = m.cavity_occupation();
    MeanState {
        q1: params.omega1 * m.p1,
        p1: -params.omega1 * m.q1 + s2 * params.g1 * occupation - params.gamma1 * m.p1,
        q2: params.omega2 * m.p2,
        p2: -params.omega2 * m.q2 + s2 * params.g2 * occupation - params.gamma2 * m.p2,
        x: -params.kappa * m.x - shift * m.y + s2 * params.eta,
        y: shift * m.x - params.kappa * m.y,
    }
}

/// Drift matrix around the mean state `m`.
///
/// `A_j = 2 g_j Re<a> = sqrt2 g_j x`, `B_j = 2 g_j Im<a> = sqrt2 g_j y`,
/// `M = -Delta - sqrt2 sum g_j <q_j>`. Position rows carry only the
/// `omega_j` coupling to their own momentum.
pub fn drift_matrix<T: Real>(params: &SystemParams<T>, m: &MeanState<T>) -> DriftMatrix<T> {
    let s2 = T::SQRT_2();
    let a1 = s2 * params.g1 * m.x;
    let b1 = s2 * params.g1 * m.y;
    let a2 = s2 * params.g2 * m.x;
    let b2 = s2 * params.g2 * m.y;
    let mm = -params.delta - s2 * (params.g1 * m.q1 + params.g2 * m.q2);
    let z = T::zero();
    let (w1, w2, k) = (params.omega1, params.omega2, params.kappa);
    DriftMatrix(Mat([
        [z, w1, z, z, z, z],
        [-w1, -params.gamma1, z, z, a1, b1],
        [z, z, z, w2, z, z],
        [z, z, -w2, -params.gamma2, a2, b2],
        [-b1, z, -b2, z, -k, mm],
        [a1, z, a2, z, -mm, -k],
    ]))
}

/// `D = diag(0, gamma1, 0, gamma2, kappa, kappa)`
pub fn diffusion<T: Real>(params: &SystemParams<T>) -> Mat<T, 6> {
    let z = T::zero();
    Mat::from_diagonal(&[z, params.gamma1, z, params.gamma2, params.kappa, params.kappa])
}

/// `A V + V A^T + D` with the diffusion matrix of `params`.
pub fn lyapunov_rhs<T: Real>(
    a: &DriftMatrix<T>,
    v: &CovMatrix<T, 6>,
    params: &SystemParams<T>,
) -> Mat<T, 6> {
    lyapunov_rhs_with(&a.0, &v.0, &diffusion(params))
}

/// `A V + V A^T + D` for explicit matrices.
pub fn lyapunov_rhs_with<T: Real, const N: usize>(
    a: &Mat<T, N>,
    v: &Mat<T, N>,
    d: &Mat<T, N>,
) -> Mat<T, N> {
    *a * *v + *v * a.transpose() + *d
}

fn pack<T: Real>(m: &MeanState<T>, v: &CovMatrix<T, 6>, out: &mut [T]) {
    out[..6].copy_from_slice(&m.to_array());
    v.0.write_flat(&mut out[6..]);
}

fn unpack<T: Real>(y: &[T]) -> (MeanState<T>, CovMatrix<T, 6>) {
    let m = MeanState::from_array(std::array::from_fn(|i| y[i]));
    (m, CovMatrix(Mat::from_flat(&y[6..STATE_LEN])))
}

fn joint_rhs<T: Real>(params: &SystemParams<T>) -> impl Fn(T, &[T], &mut [T]) + '_ {
    move |_t, y, dy| {
        let (m, v) = unpack(y);
        let dm = mean_field_rhs(params, &m);
        let a = drift_matrix(params, &m);
        let dv = lyapunov_rhs(&a, &v, params);
        pack(&dm, &CovMatrix(dv), dy);
    }
}

fn finish_step<T: Real>(
    y: &[T],
    t_new: T,
) -> Result<(MeanState<T>, CovMatrix<T, 6>), DynamicsError> {
    if y.iter().any(|x| !x.is_finite()) {
        return Err(DynamicsError::NonFinite { t: t_new.to_f64_lossy() });
    }
    let (m, v) = unpack(y);
    let v = v.symmetrized();
    let check = validate_cm(&v);
    if !check.is_physical {
        return Err(DynamicsError::Unphysical {
            t: t_new.to_f64_lossy(),
            min_eigenvalue: check.min_eigenvalue.to_f64_lossy(),
            symmetry_defect: check.symmetry_defect.to_f64_lossy(),
        });
    }
    Ok((m, v))
}

/// An accepted adaptive step.
#[derive(Clone, Copy, Debug)]
pub struct Step<T> {
    pub mean: MeanState<T>,
    pub cov: CovMatrix<T, 6>,
    /// RMS error ratio of the step (`<= 1`).
    pub error_ratio: T,
    /// Proposed size for the next step.
    pub next_dt: T,
}

/// Advances means and covariance together by one Dormand-Prince 5(4) step of
/// size `dt`. The drift matrix is rebuilt from the stage mean at every stage,
/// and `V` is re-symmetrized afterwards.
///
/// Returns [`DynamicsError::StepRejected`] when the local error estimate
/// exceeds `tol`, and [`DynamicsError::Unphysical`] when the new covariance
/// fails [`validate_cm`].
pub fn step<T: Real>(
    params: &SystemParams<T>,
    m: &MeanState<T>,
    v: &CovMatrix<T, 6>,
    t: T,
    dt: T,
    tol: &Tolerance<T>,
) -> Result<Step<T>, DynamicsError> {
    if !(dt > T::zero()) {
        return Err(DynamicsError::InvalidInput(format!("dt must be > 0, got {dt}")));
    }
    let mut y = [T::zero(); STATE_LEN];
    pack(m, v, &mut y);
    let mut out = [T::zero(); STATE_LEN];
    let err = dopri5_step(&joint_rhs(params), t, &y, dt, tol, &mut out);
    let factor = step_factor(err);
    if !err.is_finite() || err > T::one() {
        return Err(DynamicsError::StepRejected {
            t: t.to_f64_lossy(),
            error_ratio: err.to_f64_lossy(),
            suggested_dt: (dt * factor.min(T::lit(0.9))).to_f64_lossy(),
        });
    }
    let (mean, cov) = finish_step(&out, t + dt)?;
    Ok(Step {
        mean,
        cov,
        error_ratio: err,
        next_dt: dt * factor,
    })
}

/// Advances means and covariance by one classic fourth-order Runge-Kutta step
/// of fixed size `dt`.
pub fn step_fixed<T: Real>(
    params: &SystemParams<T>,
    m: &MeanState<T>,
    v: &CovMatrix<T, 6>,
    t: T,
    dt: T,
) -> Result<(MeanState<T>, CovMatrix<T, 6>), DynamicsError> {
    if !(dt > T::zero()) {
        return Err(DynamicsError::InvalidInput(format!("dt must be > 0, got {dt}")));
    }
    let mut y = [T::zero(); STATE_LEN];
    pack(m, v, &mut y);
    let mut out = [T::zero(); STATE_LEN];
    rk4_step(&joint_rhs(params), t, &y, dt, &mut out);
    finish_step(&out, t + dt)
}

/// Integration controls for [`simulate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Integration<T> {
    pub tol: Tolerance<T>,
    /// Upper bound on a single step; also the first trial step.
    pub max_dt: T,
    pub min_dt: T,
    pub max_steps: usize,
}

impl<T: Real> Default for Integration<T> {
    fn default() -> Self {
        Integration {
            tol: Tolerance::default(),
            max_dt: T::lit(0.1),
            min_dt: T::lit(1e-12),
            max_steps: 50_000_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample<T> {
    pub t: T,
    pub mean: MeanState<T>,
    pub cov: CovMatrix<T, 6>,
}

/// Samples of the joint state at multiples of the sample spacing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory<T> {
    pub samples: Vec<Sample<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn last(&self) -> Option<&Sample<T>> {
        self.samples.last()
    }

    pub fn times(&self) -> impl Iterator<Item = T> + '_ {
        self.samples.iter().map(|s| s.t)
    }
}

/// Integrates from `t = 0` to `t_end`, recording a sample at every multiple of
/// `sample_dt` (including `t = 0`). Adaptive Dormand-Prince stepping lands
/// exactly on each sample time.
pub fn simulate<T: Real>(
    params: &SystemParams<T>,
    m0: &MeanState<T>,
    v0: &CovMatrix<T, 6>,
    t_end: T,
    sample_dt: T,
    opts: &Integration<T>,
) -> Result<Trajectory<T>, DynamicsError> {
    params.validate()?;
    if !(t_end >= T::zero()) || !t_end.is_finite() {
        return Err(DynamicsError::InvalidInput(format!("t_end must be >= 0, got {t_end}")));
    }
    if !(sample_dt > T::zero()) {
        return Err(DynamicsError::InvalidInput(format!(
            "sample_dt must be > 0, got {sample_dt}"
        )));
    }
    if !m0.is_finite() {
        return Err(DynamicsError::NonFinite { t: 0.0 });
    }
    let v0 = v0.symmetrized();
    let check = validate_cm(&v0);
    if !check.is_physical {
        return Err(DynamicsError::Unphysical {
            t: 0.0,
            min_eigenvalue: check.min_eigenvalue.to_f64_lossy(),
            symmetry_defect: check.symmetry_defect.to_f64_lossy(),
        });
    }

    let n_samples = (t_end / sample_dt + T::lit(1e-9)).floor().to_usize().unwrap_or(0);
    let mut traj = Trajectory {
        samples: Vec::with_capacity(n_samples + 1),
    };
    traj.samples.push(Sample { t: T::zero(), mean: *m0, cov: v0 });

    let mut m = *m0;
    let mut v = v0;
    let mut t = T::zero();
    let mut dt = opts.max_dt;
    let mut steps = 0usize;

    for k in 1..=n_samples {
        let target = sample_dt * T::from_usize(k).unwrap();
        while t < target {
            let remaining = target - t;
            let last = dt >= remaining;
            let h = if last { remaining } else { dt };
            steps += 1;
            if steps > opts.max_steps {
                return Err(DynamicsError::TooManySteps {
                    t: t.to_f64_lossy(),
                    max_steps: opts.max_steps,
                });
            }
            match step(params, &m, &v, t, h, &opts.tol) {
                Ok(s) => {
                    m = s.mean;
                    v = s.cov;
                    t = if last { target } else { t + h };
                    // do not let a truncated final step shrink the controller
                    if !last || s.next_dt < dt {
                        dt = s.next_dt.min(opts.max_dt);
                    }
                }
                Err(DynamicsError::StepRejected { suggested_dt, .. }) => {
                    dt = T::lit(suggested_dt).min(h * T::lit(0.9));
                    if dt < opts.min_dt {
                        return Err(DynamicsError::StepUnderflow {
                            t: t.to_f64_lossy(),
                            dt: dt.to_f64_lossy(),
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        }
        traj.samples.push(Sample { t: target, mean: m, cov: v });
    }
    Ok(traj)
}

/// Fixed-step RK4 integration to `t_end` with `n_steps` equal steps; returns
/// the final state. Used for convergence-order measurements.
pub fn integrate_fixed<T: Real>(
    params: &SystemParams<T>,
    m0: &MeanState<T>,
    v0: &CovMatrix<T, 6>,
    t_end: T,
    n_steps: usize,
) -> Result<(MeanState<T>, CovMatrix<T, 6>), DynamicsError> {
    let dt = t_end / T::from_usize(n_steps.max(1)).unwrap();
    let mut m = *m0;
    let mut v = *v0;
    for i in 0..n_steps {
        let t = dt * T::from_usize(i).unwrap();
        (m, v) = step_fixed(params, &m, &v, t, dt)?;
    }
    Ok((m, v))
}

/// Integrates the Lyapunov equation for a constant drift `a` and diffusion `d`
/// from `v0` to `t_end` with adaptive Dormand-Prince steps.
pub fn evolve_frozen<T: Real, const N: usize>(
    a: &Mat<T, N>,
    d: &Mat<T, N>,
    v0: &Mat<T, N>,
    t_end: T,
    tol: &Tolerance<T>,
) -> Result<Mat<T, N>, DynamicsError> {
    let f = |_t: T, y: &[T], dy: &mut [T]| {
        let v = Mat::<T, N>::from_flat(y);
        lyapunov_rhs_with(a, &v, d).write_flat(dy);
    };
    let mut y = vec![T::zero(); N * N];
    v0.write_flat(&mut y);
    let mut out = vec![T::zero(); N * N];
    let mut t = T::zero();
    let mut dt = T::lit(1e-2);
    let mut steps = 0usize;
    while t < t_end {
        let h = dt.min(t_end - t);
        let err = dopri5_step(&f, t, &y, h, tol, &mut out);
        steps += 1;
        if steps > 10_000_000 {
            return Err(DynamicsError::TooManySteps { t: t.to_f64_lossy(), max_steps: steps });
        }
        if !err.is_finite() {
            return Err(DynamicsError::NonFinite { t: t.to_f64_lossy() });
        }
        if err <= T::one() {
            t = if h == t_end - t { t_end } else { t + h };
            let sym = Mat::<T, N>::from_flat(&out).symmetrized();
            sym.write_flat(&mut y);
        }
        dt = h * step_factor(err);
        if dt < T::lit(1e-14) {
            return Err(DynamicsError::StepUnderflow { t: t.to_f64_lossy(), dt: dt.to_f64_lossy() });
        }
    }
    Ok(Mat::from_flat(&y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SystemParams<f64> {
        SystemParams {
            omega1: 1.0,
            omega2: 0.999,
            gamma1: 0.0,
            gamma2: 0.0,
            g1: 0.0,
            g2: 0.0,
            kappa: 0.0,
            delta: 0.0,
            eta: 0.0,
        }
    }

    fn fig3() -> SystemParams<f64> {
        let g = 1e-5 / 2f64.sqrt();
        SystemParams {
            omega1: 1.0,
            omega2: 0.999,
            gamma1: 5e-6,
            gamma2: 5e-6,
            g1: g,
            g2: g,
            kappa: 0.05,
            delta: 1.0,
            eta: 3600.0,
        }
    }

    #[test]
    fn zero_state_without_drive_is_fixed() {
        let mut p = fig3();
        p.eta = 0.0;
        let d = mean_field_rhs(&p, &MeanState::zero());
        assert_eq!(d.to_array(), [0.0; 6]);
    }

    #[test]
    fn free_oscillator_rotates() {
        let mut m = MeanState::zero();
        m.q1 = 1.0;
        let d = mean_field_rhs(&quiet(), &m);
        assert_eq!((d.q1, d.p1), (0.0, -1.0));
    }

    #[test]
    fn drive_at_rest_fig3() {
        // by hand: d<a>/dt = eta at <a> = 0, so dx/dt = sqrt2 eta, dy/dt = 0
        let d = mean_field_rhs(&fig3(), &MeanState::zero());
        assert_eq!(d.q1, 0.0);
        assert_eq!(d.p1, 0.0);
        assert_eq!(d.q2, 0.0);
        assert_eq!(d.p2, 0.0);
        let amp = (d.x * d.x + d.y * d.y).sqrt() / 2f64.sqrt();
        assert!((amp - 3600.0).abs() < 1e-9);
    }

    #[test]
    fn drift_without_cavity_field() {
        let p = SystemParams { gamma1: 0.1, gamma2: 0.2, kappa: 0.3, delta: 0.7, ..fig3() };
        let a = drift_matrix(&p, &MeanState::zero()).0;
        let expect = Mat([
            [0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            [-1.0, -0.1, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.999, 0.0, 0.0],
            [0.0, 0.0, -0.999, -0.2, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, -0.3, -0.7],
            [0.0, 0.0, 0.0, 0.0, 0.7, -0.3],
        ]);
        assert_eq!(a, expect);
    }

    #[test]
    fn drift_coupling_entry() {
        let p = SystemParams { g1: 7.0711e-6, ..fig3() };
        let m = MeanState { x: 2f64.sqrt() * 10.0, ..MeanState::zero() };
        let a = drift_matrix(&p, &m).0;
        // A1 = 2 g1 Re<a> = 2 * 7.0711e-6 * 10
        assert!((a[(1, 4)] - 1.41422e-4).abs() < 1e-9);
        assert_eq!(a[(5, 0)], a[(1, 4)]);
        assert_eq!(a[(1, 5)], 0.0);
    }

    #[test]
    fn detuning_entry_in_decoupled_limit() {
        let p = SystemParams { g1: 0.0, g2: 0.0, delta: 1.0, ..fig3() };
        let m = MeanState { q1: 3.0, q2: -2.0, ..MeanState::zero() };
        let a = drift_matrix(&p, &m).0;
        assert_eq!(a[(4, 5)], -1.0);
        assert_eq!(a[(5, 4)], 1.0);
    }

    #[test]
    fn drift_is_the_jacobian_of_the_mean_field() {
        let p = SystemParams { g1: 0.03, g2: 0.05, ..fig3() };
        let m = MeanState::from_array([1.0, -0.5, 0.3, 2.0, 40.0, -12.0]);
        let a = drift_matrix(&p, &m).0;
        let h = 1e-6;
        for j in 0..6 {
            let mut up = m.to_array();
            let mut dn = m.to_array();
            up[j] += h;
            dn[j] -= h;
            let fu = mean_field_rhs(&p, &MeanState::from_array(up)).to_array();
            let fd = mean_field_rhs(&p, &MeanState::from_array(dn)).to_array();
            for i in 0..6 {
                let fd_ij = (fu[i] - fd[i]) / (2.0 * h);
                assert!((fd_ij - a[(i, j)]).abs() < 1e-6, "entry ({i},{j}): {fd_ij} vs {}", a[(i, j)]);
            }
        }
    }

    #[test]
    fn lyapunov_rhs_without_drift_is_diffusion() {
        let p = fig3();
        let v = CovMatrix::<f64, 6>::from_diagonal([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let dv = lyapunov_rhs(&DriftMatrix(Mat::zeros()), &v, &p);
        assert_eq!(dv, diffusion(&p));
    }

    #[test]
    fn lyapunov_rhs_preserves_symmetry() {
        let p = fig3();
        let m = MeanState::from_array([1.0, -0.5, 0.3, 2.0, 40.0, -12.0]);
        let a = drift_matrix(&p, &m);
        let b = Mat::<f64, 6>::from_fn(|i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let v = CovMatrix(b * b.transpose());
        let dv = lyapunov_rhs(&a, &v, &p);
        assert!(dv.asymmetry() < 1e-12);
    }

    #[test]
    fn zero_duration_simulation() {
        let traj = simulate(
            &fig3(),
            &MeanState::zero(),
            &CovMatrix::vacuum(),
            0.0,
            0.5,
            &Integration::default(),
        )
        .unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.samples[0].t, 0.0);
        assert_eq!(traj.samples[0].cov, CovMatrix::vacuum());
    }

    #[test]
    fn undriven_zero_mean_stays_zero() {
        let p = SystemParams { eta: 0.0, kappa: 0.5, gamma1: 0.1, gamma2: 0.1, ..fig3() };
        let traj = simulate(&p, &MeanState::zero(), &CovMatrix::vacuum(), 20.0, 1.0, &Integration::default())
            .unwrap();
        for s in &traj.samples {
            assert_eq!(s.mean, MeanState::zero());
            assert!(s.cov.validate().is_physical);
        }
        // vacuum is the steady state of the decoupled dissipative modes
        let last = traj.last().unwrap();
        assert!((last.cov.0 - CovMatrix::<f64, 6>::vacuum().0).max_abs() < 1e-6);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let p = fig3();
        let m = MeanState::zero();
        let v = CovMatrix::vacuum();
        assert!(matches!(step(&p, &m, &v, 0.0, 0.0, &Tolerance::default()), Err(DynamicsError::InvalidInput(_))));
        assert!(simulate(&p, &m, &v, 1.0, 0.0, &Integration::default()).is_err());
        let mut bad = CovMatrix::<f64, 6>::vacuum();
        bad.0[(0, 0)] = -1.0;
        assert!(matches!(
            simulate(&p, &m, &bad, 1.0, 0.1, &Integration::default()),
            Err(DynamicsError::Unphysical { .. })
        ));
    }

    #[test]
    fn oversized_step_is_rejected() {
        let err = step(&fig3(), &MeanState::zero(), &CovMatrix::vacuum(), 0.0, 5.0, &Tolerance::default());
        match err {
            Err(DynamicsError::StepRejected { suggested_dt, .. }) => assert!(suggested_dt < 5.0),
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn runs_in_single_precision() {
        let p = SystemParams::<f32> {
            omega1: 1.0,
            omega2: 1.0,
            gamma1: 0.0,
            gamma2: 0.0,
            g1: 0.0,
            g2: 0.0,
            kappa: 1.0,
            delta: 0.0,
            eta: 0.0,
        };
        let m0 = MeanState { q1: 1.0, ..MeanState::zero() };
        let opts = Integration {
            tol: Tolerance { atol: 1e-6, rtol: 1e-5 },
            ..Integration::default()
        };
        let traj = simulate(&p, &m0, &CovMatrix::vacuum(), std::f32::consts::PI, std::f32::consts::PI, &opts).unwrap();
        let last = traj.last().unwrap();
        assert!((last.mean.q1 + 1.0).abs() < 1e-3);
    }
}
