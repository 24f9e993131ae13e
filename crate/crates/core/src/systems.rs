//! Reference systems: the Lorenz-96 (Lorenz–Emanuel) right-hand side, the
//! cubic regression target, initial-condition sampling and reduction of
//! higher-order ODEs to first order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::models::Model;

/// Name of the PRNG and sampler behind every seeded draw, recorded in output
/// metadata.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng (rand_chacha 0.9, seed_from_u64) + rand_distr 0.5 Normal (ziggurat)";

/// Standard deviation of the initial-condition distribution.
pub const INITIAL_STD: f64 = 3.0;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lorenz96Params {
    pub n: usize,
    pub f: f64,
}

impl Lorenz96Params {
    pub fn new(n: usize, f: f64) -> Result<Self> {
        if n < 4 {
            return Err(Error::InvalidInput(format!("Lorenz-96 needs n >= 4, got {n}")));
        }
        Ok(Self { n, f })
    }
}

impl Default for Lorenz96Params {
    fn default() -> Self {
        Self { n: 8, f: 5.0 }
    }
}

/// `du_i/dt = (u_{i+1} - u_{i-2}) u_{i-1} - u_i + F` with periodic indices.
pub fn lorenz96_rhs(p: &Lorenz96Params, u: &[f64]) -> Result<Vec<f64>> {
    let n = p.n;
    if u.len() != n {
        return Err(Error::Dimension {
            op: "lorenz96_rhs",
            left: (n, 1),
            right: (u.len(), 1),
        });
    }
    Ok((0..n)
        .map(|i| {
            let ip1 = (i + 1) % n;
            let im1 = (i + n - 1) % n;
            let im2 = (i + n - 2) % n;
            (u[ip1] - u[im2]) * u[im1] - u[i] + p.f
        })
        .collect())
}

/// Analytic Jacobian of [`lorenz96_rhs`].
pub fn lorenz96_jacobian(p: &Lorenz96Params, u: &[f64]) -> Tensor {
    let n = p.n;
    let mut j = Tensor::zeros(n, n);
    for i in 0..n {
        let ip1 = (i + 1) % n;
        let im1 = (i + n - 1) % n;
        let im2 = (i + n - 2) % n;
        j.set(i, ip1, j.get(i, ip1) + u[im1]);
        j.set(i, im2, j.get(i, im2) - u[im1]);
        j.set(i, im1, j.get(i, im1) + u[ip1] - u[im2]);
        j.set(i, i, j.get(i, i) - 1.0);
    }
    j
}

/// Permutation matrix with `(P u)_i = u_{(i + shift) mod n}`.
fn shift_matrix(n: usize, shift: isize) -> Tensor {
    let mut p = Tensor::zeros(n, n);
    for i in 0..n {
        let j = (i as isize + shift).rem_euclid(n as isize) as usize;
        p.set(i, j, 1.0);
    }
    p
}

/// Batched Lorenz-96 right-hand side on the columns of `u`, with the forcing
/// as a `1 x 1` node.
pub fn record_lorenz96(tape: &mut Tape, n: usize, forcing: NodeId, u: NodeId) -> Result<NodeId> {
    let cols = tape.value(u).cols();
    if tape.value(u).rows() != n {
        return Err(Error::Dimension {
            op: "lorenz96 record",
            left: (n, cols),
            right: tape.value(u).shape(),
        });
    }
    let p1 = tape.constant(shift_matrix(n, 1));
    let m1 = tape.constant(shift_matrix(n, -1));
    let m2 = tape.constant(shift_matrix(n, -2));
    let up1 = tape.matmul(p1, u)?;
    let um1 = tape.matmul(m1, u)?;
    let um2 = tape.matmul(m2, u)?;
    let diff = tape.sub(up1, um2)?;
    let adv = tape.hadamard(diff, um1)?;
    let damped = tape.sub(adv, u)?;
    let ones = tape.constant(Tensor::ones(n, 1));
    let fcol = tape.matmul(ones, forcing)?;
    tape.add_column_bias(damped, fcol)
}

/// The true Lorenz-96 right-hand side as a [`Model`] whose single parameter
/// is the forcing `F`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lorenz96Model {
    pub params: Lorenz96Params,
}

impl Lorenz96Model {
    pub fn new(params: Lorenz96Params) -> Self {
        Self { params }
    }
}

impl Model for Lorenz96Model {
    fn input_dim(&self) -> usize {
        self.params.n
    }

    fn output_dim(&self) -> usize {
        self.params.n
    }

    fn param_shapes(&self) -> Vec<(usize, usize)> {
        vec![(1, 1)]
    }

    fn params(&self) -> Vec<f64> {
        vec![self.params.f]
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        match flat {
            [f] => {
                self.params.f = *f;
                Ok(())
            }
            _ => Err(Error::InvalidInput(format!("expected 1 parameter, got {}", flat.len()))),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.params.n {
            return Err(Error::Dimension {
                op: "lorenz96 forward",
                left: (self.params.n, x.cols()),
                right: x.shape(),
            });
        }
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for c in 0..x.cols() {
            let col = lorenz96_rhs(&self.params, &x.column_vec(c))?;
            for (r, v) in col.into_iter().enumerate() {
                out.set(r, c, v);
            }
        }
        Ok(out)
    }

    fn record(&self, tape: &mut Tape, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        record_lorenz96(tape, self.params.n, params[0], x)
    }
}

/// `N` independent draws from `Normal(0, 3)`.
pub fn sample_initial_conditions(p: &Lorenz96Params, seed: u64) -> Vec<f64> {
    sample_normal(p.n, &mut seeded_rng(seed))
}

pub fn sample_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, INITIAL_STD).expect("valid std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// `f(x) = (x - 1)(x + 1)(x + 0.5)`.
pub fn cubic_target(x: f64) -> f64 {
    (x - 1.0) * (x + 1.0) * (x + 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Evenly spaced points including both endpoints.
    Grid,
    /// Independent uniform draws from the seeded generator.
    Random { seed: u64 },
}

/// Inputs on `[lo, hi]` and their cubic targets.
pub fn cubic_training_set(n: usize, lo: f64, hi: f64, sampling: Sampling) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 || !(lo < hi) {
        return Err(Error::InvalidInput(format!("need n >= 1 and lo < hi, got n={n}, [{lo}, {hi}]")));
    }
    let xs: Vec<f64> = match sampling {
        Sampling::Grid if n == 1 => vec![0.5 * (lo + hi)],
        Sampling::Grid => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
        Sampling::Random { seed } => {
            let mut rng = seeded_rng(seed);
            (0..n).map(|_| rng.random_range(lo..=hi)).collect()
        }
    };
    let ys = xs.iter().map(|&x| cubic_target(x)).collect();
    Ok((xs, ys))
}

/// Converts `u^{(m)} = g(t, u, u', …, u^{(m-1)})` into a first-order system
/// over the stacked state `(u, v_1, …, v_{m-1})`, each block of length `d`.
///
/// `g` receives the full stacked state and returns the `d` components of the
/// highest derivative.
pub fn reduce_order<G>(m: usize, d: usize, g: G) -> Result<impl Fn(f64, &[f64]) -> Vec<f64>>
where
    G: Fn(f64, &[f64]) -> Vec<f64>,
{
    if m < 2 || d == 0 {
        return Err(Error::InvalidInput(format!("reduce_order needs m >= 2 and d >= 1, got m={m}, d={d}")));
    }
    Ok(move |t: f64, state: &[f64]| {
        let mut out = Vec::with_capacity(m * d);
        out.extend_from_slice(&state[d..m * d]);
        out.extend(g(t, state));
        out
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l96() -> Lorenz96Params {
        Lorenz96Params::new(8, 5.0).unwrap()
    }

    #[test]
    fn equilibrium_at_forcing() {
        let p = l96();
        assert!(lorenz96_rhs(&p, &[5.0; 8]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_state_gives_forcing() {
        assert_eq!(lorenz96_rhs(&l96(), &[0.0; 8]).unwrap(), vec![5.0; 8]);
    }

    #[test]
    fn matches_signed_modular_indexing() {
        let p = l96();
        let u = sample_initial_conditions(&p, 11);
        let idx = |i: i64| u[i.rem_euclid(8) as usize];
        let got = lorenz96_rhs(&p, &u).unwrap();
        for i in 0..8i64 {
            let expect = (idx(i + 1) - idx(i - 2)) * idx(i - 1) - idx(i) + 5.0;
            assert_eq!(got[i as usize], expect);
        }
    }

    #[test]
    fn small_n_rejected() {
        assert!(Lorenz96Params::new(3, 1.0).is_err());
        assert!(lorenz96_rhs(&l96(), &[0.0; 7]).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = l96();
        let u = sample_initial_conditions(&p, 3);
        let j = lorenz96_jacobian(&p, &u);
        let h = 1e-6;
        for c in 0..8 {
            let mut a = u.clone();
            let mut b = u.clone();
            a[c] += h;
            b[c] -= h;
            let fa = lorenz96_rhs(&p, &a).unwrap();
            let fb = lorenz96_rhs(&p, &b).unwrap();
            for r in 0..8 {
                let fd = (fa[r] - fb[r]) / (2.0 * h);
                assert!((fd - j.get(r, c)).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn initial_conditions_deterministic_and_seed_dependent() {
        let p = l96();
        assert_eq!(sample_initial_conditions(&p, 7), sample_initial_conditions(&p, 7));
        assert_ne!(sample_initial_conditions(&p, 7), sample_initial_conditions(&p, 8));
    }

    #[test]
    fn initial_condition_moments() {
        let draws = sample_normal(100_000, &mut seeded_rng(2024));
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.05, "mean {mean}");
        assert!((var.sqrt() - 3.0).abs() <= 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn cubic_values() {
        assert_eq!(cubic_target(1.0), 0.0);
        assert_eq!(cubic_target(-0.5), 0.0);
        assert_eq!(cubic_target(2.0), 7.5);
    }

    #[test]
    fn cubic_grid_spans_interval() {
        let (xs, ys) = cubic_training_set(25, -2.0, 2.0, Sampling::Grid).unwrap();
        assert_eq!(xs.len(), 25);
        assert_eq!(xs[0], -2.0);
        assert_eq!(xs[24], 2.0);
        assert_eq!(ys[12], cubic_target(0.0));
        let (r, _) = cubic_training_set(25, -2.0, 2.0, Sampling::Random { seed: 1 }).unwrap();
        assert!(r.iter().all(|x| (-2.0..=2.0).contains(x)));
    }

    #[test]
    fn reduce_order_stacks_state() {
        let f = reduce_order(2, 3, |_, s| s[..3].iter().map(|v| -v).collect()).unwrap();
        let out = f(0.0, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(out, vec![4.0, 5.0, 6.0, -1.0, -2.0, -3.0]);
        assert!(reduce_order(1, 1, |_, _| vec![]).is_err());
    }

    #[test]
    fn reduced_free_particle_moves_linearly_under_euler() {
        let f = reduce_order(2, 1, |_, _| vec![0.0]).unwrap();
        let mut s = vec![0.0, 1.0];
        let h = 0.125;
        for k in 1..=16 {
            let d = f(0.0, &s);
            s = vec![s[0] + h * d[0], s[1] + h * d[1]];
            assert_eq!(s[0], k as f64 * h);
        }
    }

    #[test]
    fn taped_rhs_matches_plain_bitwise() {
        let p = l96();
        let model = Lorenz96Model::new(p);
        let mut rng = seeded_rng(99);
        for _ in 0..100 {
            let u = sample_normal(8, &mut rng);
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, &model.params()).unwrap();
            let x = tape.constant(Tensor::column(&u));
            let y = model.record(&mut tape, &params, x).unwrap();
            let plain = lorenz96_rhs(&p, &u).unwrap();
            let a: Vec<u64> = tape.value(y).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = plain.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rotation_equivariance(u in prop::collection::vec(-10.0f64..10.0, 8), shift in 0usize..8) {
                let p = l96();
                let rot = |v: &[f64]| -> Vec<f64> { (0..8).map(|i| v[(i + shift) % 8]).collect() };
                let lhs = lorenz96_rhs(&p, &rot(&u)).unwrap();
                let rhs = rot(&lorenz96_rhs(&p, &u).unwrap());
                prop_assert_eq!(lhs, rhs);
            }
        }
    }
}
