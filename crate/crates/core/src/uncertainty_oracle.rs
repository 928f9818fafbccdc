//! Randomized checks of the uncertainty inequalities behind the two local
//! bounds, on covariance matrices that are physical by construction.
//!
//! Random states are `V = S diag(nu_k, nu_k) S^T` with `S` a product of random
//! passive (phase rotations, beam splitters) and active (single-mode
//! squeezing) symplectic layers and `nu_k >= 1/2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::linalg::{symplectic_form, Mat};
use crate::quadrature_state::{CovMatrix, PhaseFrame};
use crate::scalar::Real;
use crate::sync_criteria::{
    phase_coefficients, phase_diff_variance, CriteriaError, Quadrature,
};

/// Margin below which a check counts as violated.
pub const VIOLATION_TOL: f64 = -1e-12;

/// Parameters of the random covariance generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RandomCmSpec<T> {
    pub seed: u64,
    /// 2 (mechanical modes only) or 3 (with the cavity mode).
    pub mode_count: usize,
    /// Largest single-mode squeezing parameter per layer.
    pub squeeze_max: T,
    /// Number of random passive + active symplectic layers.
    pub correlation_mixing: usize,
    /// Symplectic eigenvalues are drawn uniformly from `[1/2, nu_max]`.
    pub nu_max: T,
}

impl<T: Real> Default for RandomCmSpec<T> {
    fn default() -> Self {
        RandomCmSpec {
            seed: 0,
            mode_count: 2,
            squeeze_max: T::lit(2.0),
            correlation_mixing: 3,
            nu_max: T::lit(3.0),
        }
    }
}

impl<T: Real> RandomCmSpec<T> {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.mode_count == 2 || self.mode_count == 3) {
            return Err(format!("mode_count must be 2 or 3, got {}", self.mode_count));
        }
        if !(self.squeeze_max >= T::zero()) {
            return Err("squeeze_max must be >= 0".into());
        }
        if self.correlation_mixing < 1 {
            return Err("correlation_mixing must be >= 1".into());
        }
        if !(self.nu_max >= T::lit(0.5)) {
            return Err("nu_max must be >= 1/2".into());
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        RandomCmSpec { seed, ..self }
    }
}

fn uniform<T: Real>(rng: &mut impl Rng, lo: T, hi: T) -> T {
    lo + (hi - lo) * T::lit(rng.random::<f64>())
}

fn local_rotation<T: Real, const N: usize>(mode: usize, theta: T) -> Mat<T, N> {
    let mut r = Mat::identity();
    let (c, s) = (theta.cos(), theta.sin());
    let (q, p) = (2 * mode, 2 * mode + 1);
    r[(q, q)] = c;
    r[(q, p)] = s;
    r[(p, q)] = -s;
    r[(p, p)] = c;
    r
}

fn beam_splitter<T: Real, const N: usize>(i: usize, j: usize, tau: T) -> Mat<T, N> {
    let mut b = Mat::identity();
    let (c, s) = (tau.cos(), tau.sin());
    for k in 0..2 {
        let (a, b2) = (2 * i + k, 2 * j + k);
        b[(a, a)] = c;
        b[(a, b2)] = s;
        b[(b2, a)] = -s;
        b[(b2, b2)] = c;
    }
    b
}

fn squeezer<T: Real, const N: usize>(mode: usize, r: T) -> Mat<T, N> {
    let mut s = Mat::identity();
    s[(2 * mode, 2 * mode)] = (-r).exp();
    s[(2 * mode + 1, 2 * mode + 1)] = r.exp();
    s
}

fn passive_layer<T: Real, const N: usize>(rng: &mut impl Rng) -> Mat<T, N> {
    let modes = N / 2;
    let mut s = Mat::identity();
    for m in 0..modes {
        s = local_rotation::<T, N>(m, uniform(rng, -T::PI(), T::PI())) * s;
    }
    for i in 0..modes {
        for j in (i + 1)..modes {
            s = beam_splitter::<T, N>(i, j, uniform(rng, T::zero(), T::PI())) * s;
            s = local_rotation::<T, N>(j, uniform(rng, -T::PI(), T::PI())) * s;
        }
    }
    s
}

/// Random symplectic matrix with `layers` passive-active-passive blocks.
pub fn random_symplectic<T: Real, const N: usize>(
    rng: &mut impl Rng,
    squeeze_max: T,
    layers: usize,
) -> Mat<T, N> {
    let mut s = Mat::identity();
    for _ in 0..layers {
        s = passive_layer::<T, N>(rng) * s;
        for m in 0..N / 2 {
            let r = uniform(rng, -squeeze_max, squeeze_max);
            s = squeezer::<T, N>(m, r) * s;
        }
        s = passive_layer::<T, N>(rng) * s;
    }
    s
}

fn random_cm_with<T: Real, const N: usize>(rng: &mut impl Rng, spec: &RandomCmSpec<T>) -> CovMatrix<T, N> {
    let s = random_symplectic::<T, N>(rng, spec.squeeze_max, spec.correlation_mixing);
    let mut d = [T::zero(); N];
    for m in 0..N / 2 {
        let nu = uniform(rng, T::lit(0.5), spec.nu_max);
        d[2 * m] = nu;
        d[2 * m + 1] = nu;
    }
    CovMatrix(s.congruence(&Mat::from_diagonal(&d)).symmetrized())
}

/// Random physical covariance matrix over `N / 2` modes, deterministic in
/// `spec.seed`.
pub fn random_physical_cm<T: Real, const N: usize>(spec: &RandomCmSpec<T>) -> CovMatrix<T, N> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    random_cm_with(&mut rng, spec)
}

/// Mechanical 4x4 block of a random state with `spec.mode_count` modes.
pub fn random_mech_cm<T: Real>(rng: &mut impl Rng, spec: &RandomCmSpec<T>) -> CovMatrix<T, 4> {
    if spec.mode_count == 3 {
        random_cm_with::<T, 6>(rng, spec).mech()
    } else {
        random_cm_with::<T, 4>(rng, spec)
    }
}

/// Phases uniform on (-pi, pi], excitations log-uniform on `[1e-1, 1e6]`.
pub fn random_frame<T: Real>(rng: &mut impl Rng) -> PhaseFrame<T> {
    let mut phase = || -uniform(rng, -T::PI(), T::PI());
    let (phi1, phi2) = (phase(), phase());
    let mut exc = || T::lit(10f64.powf(rng.random_range(-1.0..=6.0)));
    let (n1, n2) = (exc(), exc());
    PhaseFrame { phi1, phi2, n1, n2 }
}

/// Pieces of the single-observable inequalities for observable `obs`:
/// `var_o`, the symmetrized covariance `cov(o, dphi_-)` and the commutator
/// modulus `|<[o, dphi_-]>|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObservableMoments<T> {
    pub var_minus: T,
    pub var_o: T,
    pub cov: T,
    pub commutator: T,
}

/// Moments of `o` and `dphi_- = dphi_1 - dphi_2` from the covariance matrix.
/// Commutators are constants because `dphi_-` is linear in the quadratures:
/// `[u_k, u_l] = i Omega_kl`.
pub fn observable_moments<T: Real>(
    v: &CovMatrix<T, 4>,
    frame: &PhaseFrame<T>,
    obs: Quadrature,
) -> Result<ObservableMoments<T>, CriteriaError> {
    let d = phase_coefficients(frame)?.difference();
    let vs = v.0.symmetrized();
    let o = obs.index();
    let var_o = vs[(o, o)];
    if !(var_o > T::zero()) {
        return Err(CriteriaError::SingularBound { quadrature: obs });
    }
    let omega = symplectic_form::<T, 4>();
    Ok(ObservableMoments {
        var_minus: vs.quad_form(&d),
        var_o,
        cov: vs.mul_vec(&d)[o],
        commutator: omega.mul_vec(&d)[o].abs(),
    })
}

/// `Var(phi_-) - |<[o, phi_-]>|^2 / (4 Var o)`; nonnegative by the
/// uncertainty relation.
pub fn check_a4<T: Real>(v: &CovMatrix<T, 4>, frame: &PhaseFrame<T>, obs: Quadrature) -> Result<T, CriteriaError> {
    let m = observable_moments(v, frame, obs)?;
    Ok(m.var_minus - m.commutator * m.commutator / (T::lit(4.0) * m.var_o))
}

/// `(dphi_1 + dphi_2)^2 - Var(phi_-)`, evaluated as
/// `2 (sqrt(Var phi_1 Var phi_2) + cov(phi_1, phi_2))` to avoid cancellation.
pub fn check_a5<T: Real>(v: &CovMatrix<T, 4>, frame: &PhaseFrame<T>) -> Result<T, CriteriaError> {
    let c = phase_coefficients(frame)?;
    let vs = v.0.symmetrized();
    let v1 = vs.quad_form(&c.c1).max(T::zero());
    let v2 = vs.quad_form(&c.c2).max(T::zero());
    let cross = vs.bilinear(&c.c1, &c.c2);
    Ok(T::lit(2.0) * ((v1 * v2).sqrt() + cross))
}

/// `<M M^dag> = Var(phi_-) - |<do dphi_->|^2 / Var o` where the unsymmetrized
/// moment satisfies `|<do dphi_->|^2 = cov^2 + |<[o, phi_-]>|^2 / 4`.
pub fn check_mm_dagger<T: Real>(
    v: &CovMatrix<T, 4>,
    frame: &PhaseFrame<T>,
    obs: Quadrature,
) -> Result<T, CriteriaError> {
    let m = observable_moments(v, frame, obs)?;
    let moment_sq = m.cov * m.cov + m.commutator * m.commutator / T::lit(4.0);
    Ok(m.var_minus - moment_sq / m.var_o)
}

/// Smallest margin seen for one check and the trial that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WorstCase {
    pub margin: f64,
    /// Margin divided by `Var(phi_-)`.
    pub relative: f64,
    pub trial: u64,
    pub seed: u64,
}

impl WorstCase {
    fn none() -> Self {
        WorstCase {
            margin: f64::INFINITY,
            relative: f64::INFINITY,
            trial: 0,
            seed: 0,
        }
    }

    fn merge(self, other: Self) -> Self {
        match self.margin.partial_cmp(&other.margin) {
            Some(std::cmp::Ordering::Less) => self,
            Some(std::cmp::Ordering::Greater) => other,
            _ if self.trial <= other.trial => self,
            _ => other,
        }
    }
}

/// Aggregate of a fuzz run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FuzzSummary {
    pub trials: u64,
    pub base_seed: u64,
    pub a2_violations: u64,
    pub a4_violations: u64,
    pub a5_violations: u64,
    /// Draws where the A2 bound term fell below the A4 commutator term.
    pub ordering_violations: u64,
    pub worst_a2: WorstCase,
    pub worst_a4: WorstCase,
    pub worst_a5: WorstCase,
    /// Seeds of the draws with the smallest relative A5 margins.
    pub near_boundary_seeds: Vec<u64>,
}

impl FuzzSummary {
    pub fn total_violations(&self) -> u64 {
        self.a2_violations + self.a4_violations + self.a5_violations + self.ordering_violations
    }
}

#[derive(Clone, Debug)]
struct Partial {
    a2_violations: u64,
    a4_violations: u64,
    a5_violations: u64,
    ordering_violations: u64,
    worst_a2: WorstCase,
    worst_a4: WorstCase,
    worst_a5: WorstCase,
    near: Vec<(f64, u64)>,
}

const NEAR_KEEP: usize = 5;

impl Partial {
    fn empty() -> Self {
        Partial {
            a2_violations: 0,
            a4_violations: 0,
            a5_violations: 0,
            ordering_violations: 0,
            worst_a2: WorstCase::none(),
            worst_a4: WorstCase::none(),
            worst_a5: WorstCase::none(),
            near: Vec::new(),
        }
    }

    fn merge(mut self, other: Self) -> Self {
        self.a2_violations += other.a2_violations;
        self.a4_violations += other.a4_violations;
        self.a5_violations += other.a5_violations;
        self.ordering_violations += other.ordering_violations;
        self.worst_a2 = self.worst_a2.merge(other.worst_a2);
        self.worst_a4 = self.worst_a4.merge(other.worst_a4);
        self.worst_a5 = self.worst_a5.merge(other.worst_a5);
        self.near.extend(other.near);
        self.near
            .sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
        self.near.truncate(NEAR_KEEP);
        self
    }
}

/// Seed for trial `k` of a run seeded with `base`.
pub fn trial_seed(base: u64, k: u64) -> u64 {
    // splitmix64
    let mut z = base.wrapping_add(k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn run_trial<T: Real>(spec: &RandomCmSpec<T>, k: u64) -> Partial {
    let seed = trial_seed(spec.seed, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = random_mech_cm(&mut rng, spec);
    let frame = random_frame::<T>(&mut rng);
    let mut p = Partial::empty();
    let tol = VIOLATION_TOL;
    let var = phase_diff_variance(&v, &frame).map(|x| x.to_f64_lossy()).unwrap_or(f64::NAN);
    let case = |margin: f64| WorstCase {
        margin,
        relative: margin / var,
        trial: k,
        seed,
    };

    for obs in Quadrature::ALL {
        let a4 = check_a4(&v, &frame, obs).map(|x| x.to_f64_lossy()).unwrap_or(f64::NAN);
        let a2 = check_mm_dagger(&v, &frame, obs).map(|x| x.to_f64_lossy()).unwrap_or(f64::NAN);
        if !(a4 >= tol) {
            p.a4_violations += 1;
        }
        if !(a2 >= tol) {
            p.a2_violations += 1;
        }
        // A2 bound term >= A4 bound term  <=>  a2 margin <= a4 margin
        if !(a2 <= a4 + 1e-12 * var.abs().max(1.0)) {
            p.ordering_violations += 1;
        }
        p.worst_a4 = p.worst_a4.merge(case(a4));
        p.worst_a2 = p.worst_a2.merge(case(a2));
    }
    let a5 = check_a5(&v, &frame).map(|x| x.to_f64_lossy()).unwrap_or(f64::NAN);
    if !(a5 >= tol) {
        p.a5_violations += 1;
    }
    p.worst_a5 = p.worst_a5.merge(case(a5));
    p.near.push((a5 / var, seed));
    p
}

/// Runs all checks over `trials` independent draws. Trials run in parallel;
/// the summary depends only on `spec` and `trials`.
pub fn fuzz_suite<T: Real>(spec: &RandomCmSpec<T>, trials: u64) -> Result<FuzzSummary, String> {
    spec.validate()?;
    if trials == 0 {
        return Err("trials must be >= 1".into());
    }
    let total = (0..trials)
        .into_par_iter()
        .map(|k| run_trial(spec, k))
        .reduce(Partial::empty, Partial::merge);
    Ok(FuzzSummary {
        trials,
        base_seed: spec.seed,
        a2_violations: total.a2_violations,
        a4_violations: total.a4_violations,
        a5_violations: total.a5_violations,
        ordering_violations: total.ordering_violations,
        worst_a2: total.worst_a2,
        worst_a4: total.worst_a4,
        worst_a5: total.worst_a5,
        near_boundary_seeds: total.near.into_iter().map(|(_, s)| s).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symplectic_eigenvalues;
    use crate::sync_criteria::sufficient_bound;

    fn vacuum_frame() -> PhaseFrame<f64> {
        PhaseFrame::new(0.0, 0.0, 1.0, 1.0)
    }

    #[test]
    fn random_symplectic_preserves_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Mat<f64, 6> = random_symplectic(&mut rng, 1.0, 3);
        let w = symplectic_form::<f64, 6>();
        let err = (s * w * s.transpose() - w).max_abs();
        assert!(err < 1e-9 * s.max_abs().powi(2), "{err}");
    }

    #[test]
    fn unsqueezed_pure_draw_is_rotated_vacuum() {
        let spec = RandomCmSpec { squeeze_max: 0.0, nu_max: 0.5, ..RandomCmSpec::default() };
        let v: CovMatrix<f64, 4> = random_physical_cm(&spec);
        assert!((v.0 - CovMatrix::<f64, 4>::vacuum().0).max_abs() < 1e-12);
        let nu: [f64; 2] = symplectic_eigenvalues(&v.0);
        assert!((nu[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn draws_are_deterministic_and_distinct() {
        let spec = RandomCmSpec::<f64>::default();
        let a: CovMatrix<f64, 4> = random_physical_cm(&spec.with_seed(1));
        let b: CovMatrix<f64, 4> = random_physical_cm(&spec.with_seed(1));
        let c: CovMatrix<f64, 4> = random_physical_cm(&spec.with_seed(2));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn a4_closed_forms() {
        let v = CovMatrix::vacuum();
        let m = check_a4(&v, &vacuum_frame(), Quadrature::Q1).unwrap();
        assert!((m - 0.25).abs() < 1e-15);
        let var = phase_diff_variance(&v, &vacuum_frame()).unwrap();
        let m = check_a4(&v, &vacuum_frame(), Quadrature::P1).unwrap();
        assert_eq!(m, var);
        assert!(check_a4(&CovMatrix::from_diagonal([0.0, 0.5, 0.5, 0.5]), &vacuum_frame(), Quadrature::Q1).is_err());
    }

    #[test]
    fn a5_uncorrelated_modes() {
        let v = CovMatrix::from_diagonal([0.7_f64, 0.4, 1.3, 0.9]);
        let f = PhaseFrame::new(0.4, -2.0, 1.5, 0.3);
        let c = phase_coefficients(&f).unwrap();
        let s1 = v.0.quad_form(&c.c1).sqrt();
        let s2 = v.0.quad_form(&c.c2).sqrt();
        let m = check_a5(&v, &f).unwrap();
        assert!((m - 2.0 * s1 * s2).abs() < 1e-14);
        let direct = sufficient_bound(&v, &f).unwrap() - phase_diff_variance(&v, &f).unwrap();
        assert!((m - direct).abs() < 1e-13);
    }

    #[test]
    fn a5_margin_extremes() {
        // dphi_j = dp_j / sqrt2; anticorrelated phases saturate the bound
        let mut v = CovMatrix::<f64, 4>::vacuum();
        v.0[(1, 3)] = -0.5;
        v.0[(3, 1)] = -0.5;
        assert!(check_a5(&v, &vacuum_frame()).unwrap().abs() < 1e-15);
        // perfectly correlated: the variance vanishes and the margin is the bound
        v.0[(1, 3)] = 0.5;
        v.0[(3, 1)] = 0.5;
        let u = sufficient_bound(&v, &vacuum_frame()).unwrap();
        assert!(phase_diff_variance(&v, &vacuum_frame()).unwrap().abs() < 1e-15);
        assert!((check_a5(&v, &vacuum_frame()).unwrap() - u).abs() < 1e-15);
    }

    #[test]
    fn mm_dagger_limits() {
        // mode 2 frozen out by a huge excitation: dphi_- lives in mode 1 only
        let f = PhaseFrame::new(0.3, 0.0, 1.0, 1e30);
        let v = CovMatrix::<f64, 4>::vacuum();
        let var = phase_diff_variance(&v, &f).unwrap();
        // q2 is then uncorrelated with and commutes with dphi_-
        let x = check_mm_dagger(&v, &f, Quadrature::Q2).unwrap();
        assert!((x - var).abs() < 1e-14);
        // minimum-uncertainty state: Robertson-Schroedinger saturates for q1
        let x = check_mm_dagger(&v, &f, Quadrature::Q1).unwrap();
        assert!(x.abs() < 1e-14, "{x}");
        let sq = Mat::<f64, 4>::from_diagonal(&[(-1.2f64).exp(), 1.2f64.exp(), 1.0, 1.0]);
        let v = CovMatrix(sq.congruence(&v.0));
        let x = check_mm_dagger(&v, &f, Quadrature::P1).unwrap();
        assert!(x.abs() < 1e-12, "{x}");
    }

    #[test]
    fn small_fuzz_is_clean_and_reproducible() {
        let spec = RandomCmSpec::<f64> { seed: 11, ..RandomCmSpec::default() };
        let a = fuzz_suite(&spec, 2000).unwrap();
        assert_eq!(a.total_violations(), 0, "{a:?}");
        let b = fuzz_suite(&spec, 2000).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.near_boundary_seeds.len(), NEAR_KEEP);
        let three = fuzz_suite(&RandomCmSpec { mode_count: 3, ..spec }, 500).unwrap();
        assert_eq!(three.total_violations(), 0);
    }

    #[test]
    fn single_vacuum_trial() {
        let spec = RandomCmSpec::<f64> { squeeze_max: 0.0, nu_max: 0.5, ..RandomCmSpec::default() };
        let s = fuzz_suite(&spec, 1).unwrap();
        assert_eq!(s.total_violations(), 0);
        assert!(fuzz_suite(&spec, 0).is_err());
        assert!(fuzz_suite(&RandomCmSpec { mode_count: 4, ..spec }, 1).is_err());
    }
}
