//! Function representations: the parametric polynomial kernel, a sigmoid
//! perceptron, a direct quadratic-feature expansion, and nonparametric
//! polynomial kernel ridge regression.
//!
//! The trainable models share the [`Model`] trait. Inputs are batched as
//! columns: a `D x B` matrix maps to an `E x B` matrix. Plain `forward` and
//! the taped `record` perform the same floating-point operations in the same
//! order, so they agree bitwise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg::{self, Tensor};
use crate::systems::{Lorenz96Model, Lorenz96Params};

/// A parametrized differentiable map with a flat parameter view.
pub trait Model {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Shapes of the parameter tensors, in flat order.
    fn param_shapes(&self) -> Vec<(usize, usize)>;

    fn num_params(&self) -> usize {
        self.param_shapes().iter().map(|(r, c)| r * c).sum()
    }

    /// Parameters flattened in the documented order (each tensor row-major).
    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, flat: &[f64]) -> Result<()>;

    /// Evaluates the model on the columns of `x`.
    fn forward(&self, x: &Tensor) -> Result<Tensor>;

    /// Records the model on `tape`, reading weights from `params` (as
    /// returned by [`Model::bind`]) and inputs from node `x`.
    fn record(&self, tape: &mut Tape, params: &[NodeId], x: NodeId) -> Result<NodeId>;

    /// Registers a flat parameter vector as parameter nodes.
    fn bind(&self, tape: &mut Tape, flat: &[f64]) -> Result<Vec<NodeId>> {
        let tensors = split_flat(flat, &self.param_shapes())?;
        Ok(tensors.into_iter().map(|t| tape.parameter(t)).collect())
    }

    /// Evaluates a single input vector.
    fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Tensor::column(x))?.into_data())
    }
}

/// Splits a flat vector into row-major tensors of the given shapes.
pub fn split_flat(flat: &[f64], shapes: &[(usize, usize)]) -> Result<Vec<Tensor>> {
    let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
    if flat.len() != total {
        return Err(Error::InvalidInput(format!(
            "expected {total} parameters, got {}",
            flat.len()
        )));
    }
    let mut offset = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let t = Tensor::new(r, c, flat[offset..offset + r * c].to_vec());
            offset += r * c;
            t
        })
        .collect()
}

/// Concatenates the adjoints of bound parameter nodes into a flat gradient.
pub fn flat_gradient(tape: &Tape, grads: &Gradients, params: &[NodeId]) -> Vec<f64> {
    let mut out = Vec::new();
    for &p in params {
        let shape = tape.value(p).shape();
        out.extend_from_slice(grads.get_or_zeros(p, shape).data());
    }
    out
}

fn check_input(x: &Tensor, d: usize) -> Result<()> {
    if x.rows() != d {
        return Err(Error::Dimension {
            op: "model input",
            left: (d, x.cols()),
            right: x.shape(),
        });
    }
    Ok(())
}

fn add_bias(z: &Tensor, bias: &Tensor) -> Result<Tensor> {
    z.add(&bias.matmul(&Tensor::ones(1, z.cols()))?)
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, (1.0 / fan_in.max(1) as f64).sqrt()).expect("valid std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}

fn assign(targets: &mut [&mut Tensor], flat: &[f64]) -> Result<()> {
    let shapes: Vec<_> = targets.iter().map(|t| t.shape()).collect();
    for (t, v) in targets.iter_mut().zip(split_flat(flat, &shapes)?) {
        **t = v;
    }
    Ok(())
}

/// `f(x) = W2 [(W1 x + B1)^{∘n}] + B2`.
///
/// Flat parameter order: `W1 (M x D)`, `B1 (M)`, `W2 (E x M)`, `B2 (E)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParametricPolyKernel {
    pub order: u32,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ParametricPolyKernel {
    pub fn zeros(d_in: usize, m: usize, d_out: usize, order: u32) -> Result<Self> {
        if order < 2 {
            return Err(Error::InvalidInput(format!("kernel order must be >= 2, got {order}")));
        }
        Ok(Self {
            order,
            w1: Tensor::zeros(m, d_in),
            b1: Tensor::zeros(m, 1),
            w2: Tensor::zeros(d_out, m),
            b2: Tensor::zeros(d_out, 1),
        })
    }

    /// Weights drawn from `Normal(0, 1/fan_in)`, biases zero.
    pub fn random<R: Rng + ?Sized>(d_in: usize, m: usize, d_out: usize, order: u32, rng: &mut R) -> Result<Self> {
        let mut k = Self::zeros(d_in, m, d_out, order)?;
        k.w1 = gaussian_matrix(m, d_in, d_in, rng);
        k.w2 = gaussian_matrix(d_out, m, m, rng);
        Ok(k)
    }

    pub fn intermediate_dim(&self) -> usize {
        self.w1.rows()
    }
}

impl Model for ParametricPolyKernel {
    fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    fn param_shapes(&self) -> Vec<(usize, usize)> {
        vec![self.w1.shape(), self.b1.shape(), self.w2.shape(), self.b2.shape()]
    }

    fn params(&self) -> Vec<f64> {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        assign(&mut [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2], flat)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.input_dim())?;
        let z = add_bias(&self.w1.matmul(x)?, &self.b1)?;
        let h = z.hadamard_power(self.order)?;
        add_bias(&self.w2.matmul(&h)?, &self.b2)
    }

    fn record(&self, tape: &mut Tape, p: &[NodeId], x: NodeId) -> Result<NodeId> {
        check_input(tape.value(x), self.input_dim())?;
        let z = tape.matmul(p[0], x)?;
        let z = tape.add_column_bias(z, p[1])?;
        let h = tape.power(z, self.order)?;
        let y = tape.matmul(p[2], h)?;
        tape.add_column_bias(y, p[3])
    }
}

/// Sigmoid perceptron: affine layers with `σ` between them, affine output.
///
/// Flat parameter order: `W1, B1, W2, B2, …` layer by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Mlp {
    /// Layer widths, e.g. `[D, 100, 100, 100, E]`.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidInput("an MLP needs at least two widths".into()));
        }
        let weights = widths.windows(2).map(|w| Tensor::zeros(w[1], w[0])).collect();
        let biases = widths[1..].iter().map(|&w| Tensor::zeros(w, 1)).collect();
        Ok(Self { weights, biases })
    }

    pub fn random<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(widths)?;
        for (w, pair) in m.weights.iter_mut().zip(widths.windows(2)) {
            *w = gaussian_matrix(pair[1], pair[0], pair[0], rng);
        }
        Ok(m)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.weights[0].cols()];
        w.extend(self.weights.iter().map(Tensor::rows));
        w
    }
}

impl Model for Mlp {
    fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    fn output_dim(&self) -> usize {
        self.weights.last().map_or(0, Tensor::rows)
    }

    fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.shape(), b.shape()])
            .collect()
    }

    fn params(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.data().iter().chain(b.data()).copied())
            .collect()
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let tensors = split_flat(flat, &self.param_shapes())?;
        for (i, t) in tensors.into_iter().enumerate() {
            if i % 2 == 0 {
                self.weights[i / 2] = t;
            } else {
                self.biases[i / 2] = t;
            }
        }
        Ok(())
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.input_dim())?;
        let last = self.weights.len() - 1;
        let mut a = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = add_bias(&w.matmul(&a)?, b)?;
            a = if l == last { z } else { z.map(crate::autodiff::sigmoid) };
        }
        Ok(a)
    }

    fn record(&self, tape: &mut Tape, p: &[NodeId], x: NodeId) -> Result<NodeId> {
        check_input(tape.value(x), self.input_dim())?;
        let last = self.weights.len() - 1;
        let mut a = x;
        for l in 0..self.weights.len() {
            let z = tape.matmul(p[2 * l], a)?;
            let z = tape.add_column_bias(z, p[2 * l + 1])?;
            a = if l == last { z } else { tape.sigmoid(z)? };
        }
        Ok(a)
    }
}

/// Every second-order monomial of the state plus linear and constant terms:
/// `f_i(u) = Σ_{k} Σ_{j<=k} α^i_{kj} u_k u_j + Σ_k β^i_k u_k + γ_i`.
///
/// Monomials are ordered `(k, j)` with `k` ascending and `j = 0..=k`. Flat
/// parameter order: the quadratic block `α (N x N(N+1)/2)` row by row (one
/// row per output), then `β (N x N)`, then `γ (N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyFeatureModel {
    pub quadratic: Tensor,
    pub linear: Tensor,
    pub constant: Tensor,
    left: Tensor,
    right: Tensor,
}

impl PolyFeatureModel {
    pub fn zeros(n: usize) -> Self {
        let pairs = Self::monomials(n);
        let q = pairs.len();
        let mut left = Tensor::zeros(q, n);
        let mut right = Tensor::zeros(q, n);
        for (r, &(k, j)) in pairs.iter().enumerate() {
            left.set(r, k, 1.0);
            right.set(r, j, 1.0);
        }
        Self {
            quadratic: Tensor::zeros(n, q),
            linear: Tensor::zeros(n, n),
            constant: Tensor::zeros(n, 1),
            left,
            right,
        }
    }

    /// Feature weights from `Normal(0, 1/fan_in)` over all features, constants zero.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(n);
        let fan_in = m.quadratic.cols() + n + 1;
        m.quadratic = gaussian_matrix(n, m.quadratic.cols(), fan_in, rng);
        m.linear = gaussian_matrix(n, n, fan_in, rng);
        m
    }

    /// `(k, j)` index pairs with `j <= k`, in feature order.
    pub fn monomials(n: usize) -> Vec<(usize, usize)> {
        (0..n).flat_map(|k| (0..=k).map(move |j| (k, j))).collect()
    }

    pub fn n_vars(&self) -> usize {
        self.linear.rows()
    }

    /// Number of coefficients for one output: `N(N+1)/2 + N + 1`.
    pub fn params_per_output(&self) -> usize {
        self.quadratic.cols() + self.n_vars() + 1
    }

    /// Sets `α^i_{kj}` (0-based indices, `j <= k`).
    pub fn set_quadratic(&mut self, i: usize, k: usize, j: usize, value: f64) {
        let (k, j) = if j > k { (j, k) } else { (k, j) };
        let col = k * (k + 1) / 2 + j;
        self.quadratic.set(i, col, value);
    }
}

impl Model for PolyFeatureModel {
    fn input_dim(&self) -> usize {
        self.n_vars()
    }

    fn output_dim(&self) -> usize {
        self.n_vars()
    }

    fn param_shapes(&self) -> Vec<(usize, usize)> {
        vec![self.quadratic.shape(), self.linear.shape(), self.constant.shape()]
    }

    fn params(&self) -> Vec<f64> {
        [&self.quadratic, &self.linear, &self.constant]
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        assign(&mut [&mut self.quadratic, &mut self.linear, &mut self.constant], flat)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.n_vars())?;
        let features = self.left.matmul(x)?.hadamard(&self.right.matmul(x)?)?;
        let y = self.quadratic.matmul(&features)?.add(&self.linear.matmul(x)?)?;
        add_bias(&y, &self.constant)
    }

    fn record(&self, tape: &mut Tape, p: &[NodeId], x: NodeId) -> Result<NodeId> {
        check_input(tape.value(x), self.n_vars())?;
        let left = tape.constant(self.left.clone());
        let right = tape.constant(self.right.clone());
        let l = tape.matmul(left, x)?;
        let r = tape.matmul(right, x)?;
        let features = tape.hadamard(l, r)?;
        let q = tape.matmul(p[0], features)?;
        let lin = tape.matmul(p[1], x)?;
        let y = tape.add(q, lin)?;
        tape.add_column_bias(y, p[2])
    }
}

/// Polynomial kernel `K(x, y) = (b <x, y> + c)^d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyKernel {
    pub b: f64,
    pub c: f64,
    pub d: u32,
}

impl PolyKernel {
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        (self.b * dot + self.c).powi(self.d as i32)
    }
}

/// Nonparametric kernel ridge regression, `f(x) = Σ_i α_i K(x, x_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelRidge {
    pub kernel: PolyKernel,
    pub lambda: f64,
    pub support: Vec<Vec<f64>>,
    /// `N x E`, one row per support point.
    pub alpha: Tensor,
}

impl KernelRidge {
    /// Solves `α = (K + λI)^{-1} Y` with `K_ji = K(x_j, x_i)`.
    ///
    /// `b = None` uses `1 / D`.
    pub fn fit(xs: &[Vec<f64>], ys: &[Vec<f64>], b: Option<f64>, c: f64, d: u32, lambda: f64) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::InvalidInput(format!(
                "ridge fit needs matching non-empty data, got {} inputs and {} targets",
                xs.len(),
                ys.len()
            )));
        }
        let dim = xs[0].len();
        let e = ys[0].len();
        if xs.iter().any(|x| x.len() != dim) || ys.iter().any(|y| y.len() != e) {
            return Err(Error::InvalidInput("inconsistent sample dimensions".into()));
        }
        let kernel = PolyKernel {
            b: b.unwrap_or(1.0 / dim.max(1) as f64),
            c,
            d,
        };
        let n = xs.len();
        let mut k = Tensor::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                k.set(j, i, kernel.eval(&xs[j], &xs[i]));
            }
        }
        let y = Tensor::from_rows(ys)?;
        let alpha = linalg::solve_regularized(&k, lambda, &y)?;
        Ok(Self {
            kernel,
            lambda,
            support: xs.to_vec(),
            alpha,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let dim = self.support[0].len();
        if x.len() != dim {
            return Err(Error::Dimension {
                op: "ridge_predict",
                left: (dim, 1),
                right: (x.len(), 1),
            });
        }
        let e = self.alpha.cols();
        let mut out = vec![0.0; e];
        for (i, s) in self.support.iter().enumerate() {
            let kv = self.kernel.eval(x, s);
            for (o, a) in out.iter_mut().enumerate() {
                *a += self.alpha.get(i, o) * kv;
            }
        }
        Ok(out)
    }
}

/// Any serializable trainable model.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Kernel(ParametricPolyKernel),
    Mlp(Mlp),
    PolyFeature(PolyFeatureModel),
    Lorenz96(Lorenz96Model),
}

/// On-disk form: `{kind, dims, order, params}`.
///
/// `dims` is `[D, M, E]` for `kernel`, the layer widths for `mlp`, `[N]` for
/// `polyfeature` and `lorenz96` (whose single parameter is the forcing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub kind: String,
    pub dims: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub order: Option<u32>,
    pub params: Vec<f64>,
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Kernel(_) => "kernel",
            AnyModel::Mlp(_) => "mlp",
            AnyModel::PolyFeature(_) => "polyfeature",
            AnyModel::Lorenz96(_) => "lorenz96",
        }
    }

    fn inner(&self) -> &dyn Model {
        match self {
            AnyModel::Kernel(m) => m,
            AnyModel::Mlp(m) => m,
            AnyModel::PolyFeature(m) => m,
            AnyModel::Lorenz96(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Model {
        match self {
            AnyModel::Kernel(m) => m,
            AnyModel::Mlp(m) => m,
            AnyModel::PolyFeature(m) => m,
            AnyModel::Lorenz96(m) => m,
        }
    }

    pub fn to_document(&self) -> ModelDocument {
        let (dims, order) = match self {
            AnyModel::Kernel(k) => (vec![k.input_dim(), k.intermediate_dim(), k.output_dim()], Some(k.order)),
            AnyModel::Mlp(m) => (m.widths(), None),
            AnyModel::PolyFeature(p) => (vec![p.n_vars()], None),
            AnyModel::Lorenz96(l) => (vec![l.params.n], None),
        };
        ModelDocument {
            kind: self.kind().to_string(),
            dims,
            order,
            params: self.params(),
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        let dims = |n: usize| -> Result<&[usize]> {
            if doc.dims.len() != n {
                return Err(Error::InvalidInput(format!(
                    "model kind {} expects {n} dims, got {}",
                    doc.kind,
                    doc.dims.len()
                )));
            }
            Ok(&doc.dims)
        };
        let mut model = match doc.kind.as_str() {
            "kernel" => {
                let d = dims(3)?;
                let order = doc
                    .order
                    .ok_or_else(|| Error::InvalidInput("kernel model needs an order".into()))?;
                AnyModel::Kernel(ParametricPolyKernel::zeros(d[0], d[1], d[2], order)?)
            }
            "mlp" => AnyModel::Mlp(Mlp::zeros(&doc.dims)?),
            "polyfeature" => AnyModel::PolyFeature(PolyFeatureModel::zeros(dims(1)?[0])),
            "lorenz96" => AnyModel::Lorenz96(Lorenz96Model::new(Lorenz96Params::new(dims(1)?[0], 0.0)?)),
            other => return Err(Error::InvalidInput(format!("unknown model kind {other:?}"))),
        };
        model.set_params(&doc.params)?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(s)?)
    }
}

impl Model for AnyModel {
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }

    fn output_dim(&self) -> usize {
        self.inner().output_dim()
    }

    fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.inner().param_shapes()
    }

    fn params(&self) -> Vec<f64> {
        self.inner().params()
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        self.inner_mut().set_params(flat)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.inner().forward(x)
    }

    fn record(&self, tape: &mut Tape, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        self.inner().record(tape, params, x)
    }
}
