//! Explicit Runge-Kutta steppers over flat state vectors.

use crate::scalar::Real;

/// Classic fourth-order Runge-Kutta step. Writes `y(t + h)` into `out`.
pub fn rk4_step<T, F>(f: &F, t: T, y: &[T], h: T, out: &mut [T])
where
    T: Real,
    F: Fn(T, &[T], &mut [T]),
{
    let n = y.len();
    let half = T::lit(0.5);
    let mut k1 = vec![T::zero(); n];
    let mut k2 = vec![T::zero(); n];
    let mut k3 = vec![T::zero(); n];
    let mut k4 = vec![T::zero(); n];
    let mut tmp = vec![T::zero(); n];

    f(t, y, &mut k1);
    for i in 0..n {
        tmp[i] = y[i] + half * h * k1[i];
    }
    f(t + half * h, &tmp, &mut k2);
    for i in 0..n {
        tmp[i] = y[i] + half * h * k2[i];
    }
    f(t + half * h, &tmp, &mut k3);
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    f(t + h, &tmp, &mut k4);
    let sixth = h / T::lit(6.0);
    for i in 0..n {
        out[i] = y[i] + sixth * (k1[i] + T::lit(2.0) * (k2[i] + k3[i]) + k4[i]);
    }
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// Fifth-order weights equal the last row of A; E = b5 - b4.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Mixed absolute/relative error tolerance for adaptive stepping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance<T> {
    pub atol: T,
    pub rtol: T,
}

impl<T: Real> Default for Tolerance<T> {
    fn default() -> Self {
        Tolerance {
            atol: T::lit(1e-10),
            rtol: T::lit(1e-8),
        }
    }
}

/// One Dormand-Prince 5(4) step. Writes the fifth-order solution into `out`
/// and returns the RMS error ratio; values `<= 1` mean the step meets `tol`.
pub fn dopri5_step<T, F>(f: &F, t: T, y: &[T], h: T, tol: &Tolerance<T>, out: &mut [T]) -> T
where
    T: Real,
    F: Fn(T, &[T], &mut [T]),
{
    let n = y.len();
    let mut k: Vec<Vec<T>> = vec![vec![T::zero(); n]; 7];
    let mut tmp = vec![T::zero(); n];

    f(t, y, &mut k[0]);
    for s in 1..7 {
        for i in 0..n {
            let mut acc = T::zero();
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = A[s][j];
                if a != 0.0 {
                    acc += T::lit(a) * kj[i];
                }
            }
            tmp[i] = y[i] + h * acc;
        }
        f(t + T::lit(C[s]) * h, &tmp, &mut k[s]);
    }
    // stage 7 was evaluated at the fifth-order solution, which is `tmp`
    out.copy_from_slice(&tmp);

    let mut sum = T::zero();
    for i in 0..n {
        let mut err = T::zero();
        for (s, ks) in k.iter().enumerate() {
            if E[s] != 0.0 {
                err += T::lit(E[s]) * ks[i];
            }
        }
        err *= h;
        let sc = tol.atol + tol.rtol * y[i].abs().max(out[i].abs());
        let r = err / sc;
        sum += r * r;
    }
    (sum / T::from_usize(n.max(1)).unwrap()).sqrt()
}

/// Step-size controller factor for an error ratio from [`dopri5_step`].
pub fn step_factor<T: Real>(err: T) -> T {
    let safety = T::lit(0.9);
    if err == T::zero() {
        return T::lit(5.0);
    }
    (safety * err.powf(T::lit(-0.2))).max(T::lit(0.2)).min(T::lit(5.0))
}
