//! Single-leaking-mode picture: rotating the two mechanical modes so that only
//! one collective mode couples to the cavity, and the analytics of coherent
//! mixtures carried through that rotation.

use num_complex::Complex;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{two_mode_symplectic_eigenvalues, Mat};
use crate::quadrature_state::{validate_cm, CovMatrix, MeanState, PhaseFrame, SystemParams, PSD_TOL};
use crate::scalar::Real;
use crate::sync_criteria::{phase_frame, phase_variances, sufficient_bound, CriteriaError, Verdict};

/// Tolerance on the total weight of a mixture.
pub const WEIGHT_TOL: f64 = 1e-12;
/// Default threshold for reading "much less than" as a ratio.
pub const DEFAULT_MUCH_LESS: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PictureError {
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("mixture mean of mode {mode} vanishes; its phase is undefined")]
    DegenerateFrame { mode: u8 },
    #[error("covariance matrix is not physical (min symplectic eigenvalue {min_symplectic:e})")]
    Unphysical { min_symplectic: f64 },
    #[error(transparent)]
    Criteria(#[from] CriteriaError),
}

/// One product coherent state `|alpha1> |alpha2>` with its probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Branch<T> {
    pub weight: T,
    pub alpha1: Complex<T>,
    pub alpha2: Complex<T>,
}

/// Classical mixture of product coherent states of the two mechanical modes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoherentMixture<T> {
    pub branches: Vec<Branch<T>>,
}

impl<T: Real> CoherentMixture<T> {
    pub fn new(branches: Vec<Branch<T>>) -> Result<Self, PictureError> {
        let m = CoherentMixture { branches };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), PictureError> {
        if self.branches.is_empty() {
            return Err(PictureError::InvalidMixture("no branches".into()));
        }
        let mut total = T::zero();
        for (k, b) in self.branches.iter().enumerate() {
            if !(b.weight >= T::zero()) {
                return Err(PictureError::InvalidMixture(format!("branch {k} has weight {}", b.weight)));
            }
            let finite = [b.alpha1.re, b.alpha1.im, b.alpha2.re, b.alpha2.im]
                .iter()
                .all(|x| x.is_finite());
            if !finite {
                return Err(PictureError::InvalidMixture(format!("branch {k} has a non-finite amplitude")));
            }
            total += b.weight;
        }
        if (total - T::one()).abs() > T::lit(WEIGHT_TOL) {
            return Err(PictureError::InvalidMixture(format!("weights sum to {total}")));
        }
        Ok(())
    }

    /// Branch structure of `sin(theta) |alpha, alpha*> + cos(theta) |0, 0>`:
    /// weight `sin^2 theta` on the displaced branch, `cos^2 theta` on vacuum.
    pub fn entangled_coherent(theta: T, alpha: Complex<T>) -> Self {
        let s = theta.sin();
        let c = theta.cos();
        let zero = Complex::new(T::zero(), T::zero());
        CoherentMixture {
            branches: vec![
                Branch { weight: s * s, alpha1: alpha, alpha2: alpha.conj() },
                Branch { weight: c * c, alpha1: zero, alpha2: zero },
            ],
        }
    }

    fn map(&self, f: impl Fn(&Branch<T>) -> Branch<T>) -> Self {
        CoherentMixture {
            branches: self.branches.iter().map(f).collect(),
        }
    }
}

/// Rotation angle `r = arctan(g1 / g2)`; `g2_zero` marks the `g2 = 0` limit
/// where `r = pi/2` is taken by continuity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RotationAngle<T> {
    pub r: T,
    pub g2_zero: bool,
}

pub fn rotation_angle<T: Real>(g1: T, g2: T) -> RotationAngle<T> {
    if g2 == T::zero() {
        RotationAngle { r: T::FRAC_PI_2(), g2_zero: true }
    } else {
        RotationAngle { r: (g1 / g2).atan(), g2_zero: false }
    }
}

/// Frequencies and cavity coupling in the rotated frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PictureParams<T> {
    pub r: T,
    pub omega1_t: T,
    pub omega2_t: T,
    pub g2_t: T,
}

pub fn transformed_params<T: Real>(params: &SystemParams<T>, r: T) -> PictureParams<T> {
    let (s, c) = r.sin_cos();
    PictureParams {
        r,
        omega1_t: params.omega1 * c * c + params.omega2 * s * s,
        omega2_t: params.omega1 * s * s + params.omega2 * c * c,
        g2_t: params.g1 * s + params.g2 * c,
    }
}

/// Left/right ratios of the three conditions under which the rotated frame
/// decouples mode 1 from the cavity. `None` marks a vanishing denominator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ValidityMargins<T> {
    /// `|w1 - w2| |g1 g2| / (g1^2 + g2^2)^{3/2}`
    pub detuning_vs_coupling: Option<T>,
    /// `|(w1 - w2) sin r cos r| / kappa`
    pub detuning_vs_kappa: Option<T>,
    /// `(g1^2 + g2^2) / (w1^2 + w2^2)`
    pub coupling_vs_frequency: Option<T>,
    pub threshold: T,
}

impl<T: Real> ValidityMargins<T> {
    pub fn ratios(&self) -> [Option<T>; 3] {
        [self.detuning_vs_coupling, self.detuning_vs_kappa, self.coupling_vs_frequency]
    }

    /// Per-condition verdict; `None` where the ratio is undefined.
    pub fn satisfied(&self) -> [Option<bool>; 3] {
        self.ratios().map(|r| r.map(|x| x <= self.threshold))
    }

    pub fn all_satisfied(&self) -> bool {
        self.satisfied().iter().all(|s| *s == Some(true))
    }
}

pub fn validity_margins<T: Real>(params: &SystemParams<T>, r: T, threshold: T) -> ValidityMargins<T> {
    let dw = (params.omega1 - params.omega2).abs();
    let g_sq = params.g1 * params.g1 + params.g2 * params.g2;
    let g_prod = (params.g1 * params.g2).abs();
    let ratio = |num: T, den: T| if den > T::zero() { Some(num / den) } else { None };
    let first = if g_prod > T::zero() {
        ratio(dw * g_prod, g_sq.powf(T::lit(1.5)))
    } else {
        None
    };
    ValidityMargins {
        detuning_vs_coupling: first,
        detuning_vs_kappa: ratio(dw * (r.sin() * r.cos()).abs(), params.kappa),
        coupling_vs_frequency: ratio(
            g_sq,
            params.omega1 * params.omega1 + params.omega2 * params.omega2,
        ),
        threshold,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ToSingleLeaking,
    ToSchrodinger,
}

/// Applies the mode rotation to every branch:
/// `b1' = cos r b1 - sin r b2`, `b2' = sin r b1 + cos r b2`, or its inverse.
pub fn beam_splitter<T: Real>(mix: &CoherentMixture<T>, r: T, direction: Direction) -> CoherentMixture<T> {
    let (s, c) = r.sin_cos();
    let s = match direction {
        Direction::ToSingleLeaking => s,
        Direction::ToSchrodinger => -s,
    };
    mix.map(|b| Branch {
        weight: b.weight,
        alpha1: b.alpha1 * c - b.alpha2 * s,
        alpha2: b.alpha1 * s + b.alpha2 * c,
    })
}

/// Asymptotic state of the cavity-coupled mode: every branch's mode 2 in
/// vacuum.
pub fn decay_mode2<T: Real>(mix: &CoherentMixture<T>) -> CoherentMixture<T> {
    mix.map(|b| Branch {
        alpha2: Complex::new(T::zero(), T::zero()),
        ..*b
    })
}

/// Free rotation of mode 1, `alpha1 -> alpha1 exp(i omega t)`.
pub fn evolve_free<T: Real>(mix: &CoherentMixture<T>, omega_t: T, t: T) -> CoherentMixture<T> {
    let phase = Complex::from_polar(T::one(), omega_t * t);
    mix.map(|b| Branch {
        alpha1: b.alpha1 * phase,
        ..*b
    })
}

/// `(<b1>, <b2>)` of the mixture.
pub fn mixture_means<T: Real>(mix: &CoherentMixture<T>) -> (Complex<T>, Complex<T>) {
    let zero = Complex::new(T::zero(), T::zero());
    mix.branches.iter().fold((zero, zero), |(a, b), br| {
        (a + br.alpha1 * br.weight, b + br.alpha2 * br.weight)
    })
}

fn quadratures<T: Real>(b: &Branch<T>) -> [T; 4] {
    let s = T::SQRT_2();
    [s * b.alpha1.re, s * b.alpha1.im, s * b.alpha2.re, s * b.alpha2.im]
}

/// Quadrature means `(q1, p1, q2, p2)` of the mixture, cavity at rest.
pub fn mixture_mean_state<T: Real>(mix: &CoherentMixture<T>) -> MeanState<T> {
    let (b1, b2) = mixture_means(mix);
    MeanState::from_amplitudes((b1.re, b1.im), (b2.re, b2.im), (T::zero(), T::zero()))
}

/// Mechanical covariance matrix of the mixture: vacuum noise from each
/// coherent branch plus the spread of the branch means.
pub fn mixture_second_moments<T: Real>(mix: &CoherentMixture<T>) -> CovMatrix<T, 4> {
    let mut mean = [T::zero(); 4];
    for b in &mix.branches {
        let m = quadratures(b);
        for i in 0..4 {
            mean[i] += b.weight * m[i];
        }
    }
    let mut v = Mat::<T, 4>::identity().scale(T::lit(0.5));
    // spread around the mean rather than raw second moments, for accuracy
    for b in &mix.branches {
        let m = quadratures(b);
        let d: [T; 4] = std::array::from_fn(|i| m[i] - mean[i]);
        for i in 0..4 {
            for j in 0..4 {
                v[(i, j)] += b.weight * d[i] * d[j];
            }
        }
    }
    CovMatrix(v)
}

pub fn mixture_frame<T: Real>(mix: &CoherentMixture<T>) -> Result<PhaseFrame<T>, PictureError> {
    let frame = phase_frame(&mixture_mean_state(mix));
    if !(frame.n1 > T::zero()) {
        return Err(PictureError::DegenerateFrame { mode: 1 });
    }
    if !(frame.n2 > T::zero()) {
        return Err(PictureError::DegenerateFrame { mode: 2 });
    }
    Ok(frame)
}

/// `(dphi_1 + dphi_2)^2` evaluated on the mixture's means and moments.
pub fn sufficient_bound_on_mixture<T: Real>(mix: &CoherentMixture<T>) -> Result<T, PictureError> {
    let frame = mixture_frame(mix)?;
    Ok(sufficient_bound(&mixture_second_moments(mix), &frame)?)
}

/// A mixture of product states is separable by construction; this returns
/// whether the branch data describe such a mixture.
pub fn separability_witness<T: Real>(mix: &CoherentMixture<T>) -> bool {
    mix.validate().is_ok()
}

/// Logarithmic negativity `max(0, -ln(2 nu~_-))` of a two-mode Gaussian
/// covariance matrix, with `nu~_-` the smaller symplectic eigenvalue after
/// flipping the sign of `p2`.
pub fn gaussian_log_negativity<T: Real>(v: &CovMatrix<T, 4>) -> Result<T, PictureError> {
    let vs = v.0.symmetrized();
    let nu = two_mode_symplectic_eigenvalues(&vs);
    if !validate_cm(v).is_physical || !(uncertainty_margin(&vs) >= -T::lit(PSD_TOL)) || !(nu[0] * nu[0] + nu[1] * nu[1] >= T::lit(0.5 - PSD_TOL)) {
        return Err(PictureError::Unphysical {
            min_symplectic: nu[0].to_f64_lossy(),
        });
    }
    let flip = Mat::from_diagonal(&[T::one(), T::one(), T::one(), -T::one()]);
    let nt_min = two_mode_symplectic_eigenvalues(&flip.congruence(&vs))[0];
    Ok((-(T::lit(2.0) * nt_min).ln()).max(T::zero()))
}

/// `(nu_+^2 - 1/4)(nu_-^2 - 1/4) = det V - Delta / 4 + 1/16`, normalized by
/// the magnitude of its terms. Together with `Delta >= 1/2` its sign decides
/// the uncertainty principle without taking square roots of a possibly
/// vanishing discriminant.
fn uncertainty_margin<T: Real>(v: &Mat<T, 4>) -> T {
    let det2 = |i: usize, j: usize| v[(i, j)] * v[(i + 1, j + 1)] - v[(i, j + 1)] * v[(i + 1, j)];
    let delta = det2(0, 0) + det2(2, 2) + T::lit(2.0) * det2(0, 2);
    let det = v.determinant();
    let sixteenth = T::lit(1.0 / 16.0);
    let quarter = T::lit(0.25);
    (det - quarter * delta + sixteenth) / (det.abs() + quarter * delta.abs() + sixteenth)
}

/// Inputs of the rotated-frame pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PipelineInput<T> {
    pub theta: T,
    pub alpha: Complex<T>,
    pub g1: T,
    pub g2: T,
    pub omega1: T,
    pub omega2: T,
    pub kappa: T,
    pub t: T,
    pub epsilon: T,
}

impl<T: Real> PipelineInput<T> {
    /// Values used in the text: equal couplings, `theta = pi/4` and
    /// `alpha = 500 sqrt2 (1 + i)`.
    pub fn standard() -> Self {
        let a = T::lit(500.0) * T::SQRT_2();
        let g = T::lit(0.02) / T::SQRT_2();
        PipelineInput {
            theta: T::FRAC_PI_4(),
            alpha: Complex::new(a, a),
            g1: g,
            g2: g,
            omega1: T::one(),
            omega2: T::lit(0.999),
            kappa: T::one(),
            t: T::zero(),
            epsilon: T::lit(1e-3),
        }
    }

    pub fn system_params(&self) -> SystemParams<T> {
        SystemParams {
            omega1: self.omega1,
            omega2: self.omega2,
            gamma1: T::zero(),
            gamma2: T::zero(),
            g1: self.g1,
            g2: self.g2,
            kappa: self.kappa,
            delta: T::zero(),
            eta: T::zero(),
        }
    }
}

/// Every intermediate of the pipeline plus the quantities read off the final
/// mixture.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineResult<T> {
    pub input: PipelineInput<T>,
    pub rotation: RotationAngle<T>,
    pub picture: PictureParams<T>,
    pub validity: ValidityMargins<T>,
    pub initial: CoherentMixture<T>,
    pub single_leaking: CoherentMixture<T>,
    pub decayed: CoherentMixture<T>,
    pub evolved: CoherentMixture<T>,
    pub final_mixture: CoherentMixture<T>,
    pub mean_b1: Complex<T>,
    pub mean_b2: Complex<T>,
    pub relative_phase: T,
    pub frame: PhaseFrame<T>,
    pub phase_variances: (T, T),
    pub u_suf: T,
    pub separable: bool,
    pub log_negativity: T,
    pub synchronized: bool,
    pub verdict: Verdict,
}

/// Entangled-coherent branches, rotated into the single-leaking frame, mode 2
/// decayed, mode 1 freely evolved for `t`, and rotated back.
pub fn run_pipeline<T: Real>(input: &PipelineInput<T>) -> Result<PipelineResult<T>, PictureError> {
    let params = input.system_params();
    let rotation = rotation_angle(input.g1, input.g2);
    let r = rotation.r;
    let picture = transformed_params(&params, r);
    let validity = validity_margins(&params, r, T::lit(DEFAULT_MUCH_LESS));

    let initial = CoherentMixture::entangled_coherent(input.theta, input.alpha);
    initial.validate()?;
    let single_leaking = beam_splitter(&initial, r, Direction::ToSingleLeaking);
    let decayed = decay_mode2(&single_leaking);
    let evolved = evolve_free(&decayed, picture.omega1_t, input.t);
    let final_mixture = beam_splitter(&evolved, r, Direction::ToSchrodinger);

    let (mean_b1, mean_b2) = mixture_means(&final_mixture);
    let frame = mixture_frame(&final_mixture)?;
    let moments = mixture_second_moments(&final_mixture);
    let phase_variances = phase_variances(&moments, &frame)?;
    let u_suf = sufficient_bound(&moments, &frame)?;
    let synchronized = u_suf <= input.epsilon;
    Ok(PipelineResult {
        input: *input,
        rotation,
        picture,
        validity,
        relative_phase: crate::scalar::wrap_angle(mean_b1.arg() - mean_b2.arg()),
        mean_b1,
        mean_b2,
        frame,
        phase_variances,
        u_suf,
        separable: separability_witness(&final_mixture),
        log_negativity: gaussian_log_negativity(&moments)?,
        synchronized,
        verdict: if synchronized { Verdict::Synchronized } else { Verdict::Indeterminate },
        initial,
        single_leaking,
        decayed,
        evolved,
        final_mixture,
    })
}
