//! Time integration: explicit and implicit Euler steps, a fixed-step
//! Adams–Moulton propagator, adaptive Dormand–Prince RK45, and the window
//! quadrature rules used by the discretized losses.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Tensor};
use crate::loss::Trajectory;

/// Newton residual tolerance (infinity norm).
pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 50;

/// Relative spacing mismatch tolerated by schemes that require a uniform grid.
pub const UNIFORM_RTOL: f64 = 1e-6;

pub const DEFAULT_RTOL: f64 = 1e-3;
pub const DEFAULT_ATOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    ForwardEuler,
    BackwardEuler,
    #[serde(rename = "adams-moulton")]
    AdamsMoulton2,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 3] = [SchemeKind::ForwardEuler, SchemeKind::BackwardEuler, SchemeKind::AdamsMoulton2];

    /// Number of right-hand-side evaluation points.
    pub fn m(self) -> usize {
        self.offsets().len()
    }

    /// Window size: observations spanned beyond the first.
    pub fn p(self) -> usize {
        match self {
            SchemeKind::ForwardEuler | SchemeKind::BackwardEuler => 1,
            SchemeKind::AdamsMoulton2 => 2,
        }
    }

    /// Window-relative indices where the right-hand side is evaluated.
    pub fn offsets(self) -> &'static [usize] {
        match self {
            SchemeKind::ForwardEuler => &[0],
            SchemeKind::BackwardEuler => &[1],
            SchemeKind::AdamsMoulton2 => &[0, 1, 2],
        }
    }

    /// Window-relative index of the state the increment is added to.
    pub fn base_offset(self) -> usize {
        match self {
            SchemeKind::ForwardEuler | SchemeKind::BackwardEuler => 0,
            SchemeKind::AdamsMoulton2 => 1,
        }
    }

    /// Quadrature weights, aligned with [`SchemeKind::offsets`], for a window
    /// whose `p + 1` sample times are `times`.
    pub fn weights(self, times: &[f64]) -> Result<Vec<f64>> {
        if times.len() != self.p() + 1 {
            return Err(Error::Scheme(format!(
                "{self} expects {} time points, got {}",
                self.p() + 1,
                times.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Scheme("window times must be strictly increasing".into()));
        }
        Ok(match self {
            SchemeKind::ForwardEuler | SchemeKind::BackwardEuler => vec![times[1] - times[0]],
            SchemeKind::AdamsMoulton2 => {
                let h0 = times[1] - times[0];
                let h1 = times[2] - times[1];
                if (h1 - h0).abs() > UNIFORM_RTOL * h0.max(h1) {
                    return Err(Error::Scheme(format!(
                        "adams-moulton-2 needs uniform spacing, got steps {h0} and {h1}"
                    )));
                }
                let h = h1;
                vec![-h / 12.0, h * 2.0 / 3.0, h * 5.0 / 12.0]
            }
        })
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemeKind::ForwardEuler => "forward-euler",
            SchemeKind::BackwardEuler => "backward-euler",
            SchemeKind::AdamsMoulton2 => "adams-moulton",
        })
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward-euler" | "fe" => Ok(SchemeKind::ForwardEuler),
            "backward-euler" | "be" => Ok(SchemeKind::BackwardEuler),
            "adams-moulton" | "adams-moulton-2" | "am" => Ok(SchemeKind::AdamsMoulton2),
            other => Err(Error::Scheme(format!("unknown scheme {other:?}"))),
        }
    }
}

/// Window increment `G` such that `û(t_last) = u(t_base) + G`, using known
/// states at every point of the window.
pub fn quadrature<F>(scheme: SchemeKind, t_points: &[f64], u_points: &[Vec<f64>], mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    if u_points.len() != t_points.len() {
        return Err(Error::Scheme(format!(
            "{} time points but {} states",
            t_points.len(),
            u_points.len()
        )));
    }
    let weights = scheme.weights(t_points)?;
    let dim = u_points[0].len();
    let mut g = vec![0.0; dim];
    for (&o, w) in scheme.offsets().iter().zip(weights) {
        let fv = f(t_points[o], &u_points[o]);
        for (gi, fi) in g.iter_mut().zip(fv) {
            *gi += w * fi;
        }
    }
    Ok(g)
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidInput(format!("step size must be positive, got {h}")));
    }
    Ok(())
}

/// `u + h f(t, u)`.
pub fn step_forward_euler<F>(f: F, t: f64, u: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    check_step(h)?;
    Ok(u.iter().zip(f(t, u)).map(|(ui, fi)| ui + h * fi).collect())
}

/// Newton solve of `v = c + w f(t, v)` starting from `v0`.
fn newton_implicit<F, J>(f: &F, jac: &J, t: f64, c: &[f64], w: f64, v0: Vec<f64>) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
    J: Fn(f64, &[f64]) -> Tensor,
{
    let n = c.len();
    let residual = |v: &[f64]| -> Vec<f64> {
        let fv = f(t, v);
        (0..n).map(|i| v[i] - c[i] - w * fv[i]).collect()
    };
    let norm = |r: &[f64]| r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut v = v0;
    let mut r = residual(&v);
    let mut rn = norm(&r);
    for _ in 0..NEWTON_MAX_ITER {
        if rn <= NEWTON_TOL {
            return Ok(v);
        }
        if !rn.is_finite() {
            break;
        }
        let jf = jac(t, &v);
        let mut a = Tensor::identity(n);
        a.axpy(-w, &jf)?;
        let delta = linalg::solve(&a, &Tensor::column(&r))?;
        for (vi, di) in v.iter_mut().zip(delta.data()) {
            *vi -= di;
        }
        r = residual(&v);
        rn = norm(&r);
    }
    if rn <= NEWTON_TOL {
        return Ok(v);
    }
    Err(Error::Convergence {
        iterations: NEWTON_MAX_ITER,
        residual: rn,
    })
}

/// Solves `v = u + h f(t + h, v)` by Newton iteration from `u + h f(t, u)`.
pub fn step_backward_euler<F, J>(f: F, jac: J, t: f64, u: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
    J: Fn(f64, &[f64]) -> Tensor,
{
    let guess = step_forward_euler(&f, t, u, h)?;
    newton_implicit(&f, &jac, t + h, u, h, guess)
}

/// Fixed-step Adams–Moulton (two steps) from exact starting values `u0` at
/// `t0` and `u1` at `t0 + h`. Returns states at `t0, t0 + h, …, t0 + steps h`.
pub fn propagate_adams_moulton2<F, J>(f: F, jac: J, t0: f64, u0: &[f64], u1: &[f64], h: f64, steps: usize) -> Result<Vec<Vec<f64>>>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
    J: Fn(f64, &[f64]) -> Tensor,
{
    check_step(h)?;
    let mut out = vec![u0.to_vec(), u1.to_vec()];
    let mut f_prev = f(t0, u0);
    let mut f_curr = f(t0 + h, u1);
    for k in 2..=steps {
        let t_new = t0 + k as f64 * h;
        let u_curr = &out[k - 1];
        let c: Vec<f64> = (0..u_curr.len())
            .map(|i| u_curr[i] + h * (2.0 / 3.0 * f_curr[i] - f_prev[i] / 12.0))
            .collect();
        let guess: Vec<f64> = (0..u_curr.len()).map(|i| u_curr[i] + h * f_curr[i]).collect();
        let u_new = newton_implicit(&f, &jac, t_new, &c, h * 5.0 / 12.0, guess)?;
        f_prev = std::mem::replace(&mut f_curr, f(t_new, &u_new));
        out.push(u_new);
    }
    out.truncate(steps + 1);
    Ok(out)
}

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order solution weights (same as the last stage row).
const DP_B: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
/// Difference between the fifth- and fourth-order weights.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Adaptive Dormand–Prince 5(4) integration returning the state at each of
/// `sample_times`. Steps are shortened to land exactly on every sample time.
///
/// A step is accepted when `|err_i| <= atol + rtol * max(|u_i|, |u_new_i|)`
/// for every component.
pub fn integrate_rk45<F>(f: F, u0: &[f64], t0: f64, t_end: f64, rtol: f64, atol: f64, sample_times: &[f64]) -> Result<Trajectory>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    if !(t_end >= t0) {
        return Err(Error::InvalidInput(format!("t_end {t_end} precedes t0 {t0}")));
    }
    if !(rtol > 0.0 && atol >= 0.0) {
        return Err(Error::InvalidInput(format!("invalid tolerances rtol={rtol}, atol={atol}")));
    }
    if sample_times.windows(2).any(|w| w[1] < w[0]) || sample_times.iter().any(|&s| s < t0 || s > t_end) {
        return Err(Error::InvalidInput("sample times must be sorted and lie within [t0, t_end]".into()));
    }
    if u0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite initial state".into()));
    }
    let n = u0.len();
    let span = t_end - t0;
    let min_step = 1e-14 * span;
    let mut h = span / 100.0;
    let mut t = t0;
    let mut u = u0.to_vec();
    let mut k = vec![vec![0.0; n]; 7];
    k[0] = f(t, &u);
    let mut states = Vec::with_capacity(sample_times.len());
    let mut stage = vec![0.0; n];
    let mut u_new = vec![0.0; n];

    for &target in sample_times {
        while t < target {
            let remaining = target - t;
            let clipped = h >= remaining;
            let step = if clipped { remaining } else { h };
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = u[i];
                    for (j, kj) in k.iter().enumerate().take(s) {
                        acc += step * DP_A[s][j] * kj[i];
                    }
                    stage[i] = acc;
                }
                k[s] = f(t + DP_C[s] * step, &stage);
            }
            // The seventh stage is evaluated at the fifth-order solution.
            u_new.copy_from_slice(&stage);
            debug_assert!(DP_B.iter().zip(DP_A[6].iter()).all(|(b, a)| b == a));
            let mut err = 0.0f64;
            for i in 0..n {
                let e: f64 = (0..7).map(|s| DP_E[s] * k[s][i]).sum::<f64>() * step;
                let scale = atol + rtol * u[i].abs().max(u_new[i].abs());
                let ratio = (e / scale).abs();
                err = if ratio.is_nan() || !u_new[i].is_finite() { f64::INFINITY } else { err.max(ratio) };
            }
            if err <= 1.0 {
                let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                t = if clipped { target } else { t + step };
                std::mem::swap(&mut u, &mut u_new);
                k.swap(0, 6);
                h = if clipped { h.max(step * factor) } else { step * factor };
            } else {
                let factor = if err.is_finite() { (0.9 * err.powf(-0.2)).clamp(0.2, 1.0) } else { 0.2 };
                h = step * factor;
                if h < min_step {
                    return Err(Error::Stiffness { t, h });
                }
            }
        }
        states.push(u.clone());
    }
    Trajectory::new(sample_times.to_vec(), states)
}

/// Uniform sample times `t0, t0 + 1/rate, …` up to and including `t_end`.
pub fn uniform_times(t0: f64, t_end: f64, rate: f64) -> Result<Vec<f64>> {
    if !(rate > 0.0) || !(t_end >= t0) {
        return Err(Error::InvalidInput(format!("need rate > 0 and t_end >= t0, got rate={rate}, [{t0}, {t_end}]")));
    }
    let count = ((t_end - t0) * rate + 1e-9).floor() as usize;
    Ok((0..=count).map(|i| t0 + i as f64 / rate).collect())
}

/// Exact forward-Euler rollout over the given times.
pub fn rollout_forward_euler<F>(f: F, times: &[f64], u0: &[f64]) -> Result<Trajectory>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    let mut states = vec![u0.to_vec()];
    for w in times.windows(2) {
        let next = step_forward_euler(&f, w[0], states.last().expect("non-empty"), w[1] - w[0])?;
        states.push(next);
    }
    Trajectory::new(times.to_vec(), states)
}

/// Backward-Euler rollout over the given times.
pub fn rollout_backward_euler<F, J>(f: F, jac: J, times: &[f64], u0: &[f64]) -> Result<Trajectory>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
    J: Fn(f64, &[f64]) -> Tensor,
{
    let mut states = vec![u0.to_vec()];
    for w in times.windows(2) {
        let next = step_backward_euler(&f, &jac, w[0], states.last().expect("non-empty"), w[1] - w[0])?;
        states.push(next);
    }
    Trajectory::new(times.to_vec(), states)
}
