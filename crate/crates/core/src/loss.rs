//! Trajectory data, discretized trajectory-matching losses, the static
//! regression loss and evaluation metrics.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::integrators::SchemeKind;
use crate::linalg::Tensor;
use crate::models::{flat_gradient, Model};

/// Time-stamped state samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() != states.len() {
            return Err(Error::InvalidInput(format!(
                "{} times but {} states",
                times.len(),
                states.len()
            )));
        }
        if times.is_empty() {
            return Err(Error::InvalidInput("empty trajectory".into()));
        }
        let dim = states[0].len();
        if states.iter().any(|s| s.len() != dim) {
            return Err(Error::InvalidInput("states have inconsistent dimensions".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("times must be strictly increasing".into()));
        }
        Ok(Self { times, states })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub scheme: SchemeKind,
    /// Windows per gradient step; `None` uses every window.
    pub batch: Option<usize>,
    /// Append `t` as an extra model input for non-autonomous models.
    pub time_input: bool,
}

impl LossSpec {
    pub fn new(scheme: SchemeKind) -> Self {
        Self {
            scheme,
            batch: None,
            time_input: false,
        }
    }
}

/// A window identified by trajectory index and the index of its first sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WindowRef {
    pub traj: usize,
    pub start: usize,
}

/// Every window of every trajectory, in order.
pub fn all_windows(trajs: &[Trajectory], scheme: SchemeKind) -> Vec<WindowRef> {
    let p = scheme.p();
    trajs
        .iter()
        .enumerate()
        .flat_map(|(traj, tr)| (0..tr.len().saturating_sub(p)).map(move |start| WindowRef { traj, start }))
        .collect()
}

/// Constant data of a window set: the model inputs at each distinct
/// evaluation sample, column selections and weights per evaluation offset,
/// and the base and target states.
#[derive(Clone, Debug)]
pub struct PreparedWindows {
    pub inputs: Tensor,
    /// `(trajectory, sample)` of each input column.
    pub samples: Vec<(usize, usize)>,
    pub selections: Vec<Vec<usize>>,
    pub weights: Vec<Tensor>,
    pub base: Tensor,
    pub target: Tensor,
}

impl PreparedWindows {
    pub fn new(trajs: &[Trajectory], spec: &LossSpec, windows: &[WindowRef]) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::InvalidInput("no windows to evaluate".into()));
        }
        let scheme = spec.scheme;
        let p = scheme.p();
        let dim = trajs
            .first()
            .map(Trajectory::dim)
            .ok_or_else(|| Error::InvalidInput("no trajectories".into()))?;
        if trajs.iter().any(|t| t.dim() != dim) {
            return Err(Error::InvalidInput("trajectories have different dimensions".into()));
        }
        let offsets = scheme.offsets();
        let mut columns: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for w in windows {
            let tr = trajs
                .get(w.traj)
                .ok_or_else(|| Error::InvalidInput(format!("trajectory {} does not exist", w.traj)))?;
            if w.start + p >= tr.len() {
                return Err(Error::InvalidInput(format!(
                    "window starting at {} exceeds trajectory of length {}",
                    w.start,
                    tr.len()
                )));
            }
            for &o in offsets {
                columns.insert((w.traj, w.start + o), 0);
            }
        }
        for (i, v) in columns.values_mut().enumerate() {
            *v = i;
        }
        let samples: Vec<(usize, usize)> = columns.keys().copied().collect();
        let in_rows = dim + usize::from(spec.time_input);
        let mut inputs = Tensor::zeros(in_rows, samples.len());
        for (c, &(ti, si)) in samples.iter().enumerate() {
            for (r, v) in trajs[ti].states[si].iter().enumerate() {
                inputs.set(r, c, *v);
            }
            if spec.time_input {
                inputs.set(dim, c, trajs[ti].times[si]);
            }
        }

        let nw = windows.len();
        let mut selections = vec![Vec::with_capacity(nw); offsets.len()];
        let mut weights = vec![Tensor::zeros(dim, nw); offsets.len()];
        let mut base = Tensor::zeros(dim, nw);
        let mut target = Tensor::zeros(dim, nw);
        for (c, w) in windows.iter().enumerate() {
            let tr = &trajs[w.traj];
            let ws = scheme.weights(&tr.times[w.start..=w.start + p])?;
            for (k, &o) in offsets.iter().enumerate() {
                selections[k].push(columns[&(w.traj, w.start + o)]);
                for r in 0..dim {
                    weights[k].set(r, c, ws[k]);
                }
            }
            for r in 0..dim {
                base.set(r, c, tr.states[w.start + scheme.base_offset()][r]);
                target.set(r, c, tr.states[w.start + p][r]);
            }
        }
        Ok(Self {
            inputs,
            samples,
            selections,
            weights,
            base,
            target,
        })
    }

    pub fn window_count(&self) -> usize {
        self.base.cols()
    }
}

/// A recorded loss and the samples at which the model was evaluated.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub loss: NodeId,
    pub evaluated: Vec<(usize, usize)>,
}

/// Records `(1/W) Σ_w |u(t_last) - (u(t_base) + G_w)|²` on `tape`, with every
/// state inside `G` taken from the data.
pub fn record_prepared_loss<M: Model + ?Sized>(tape: &mut Tape, model: &M, params: &[NodeId], prep: &PreparedWindows) -> Result<NodeId> {
    let x = tape.constant(prep.inputs.clone());
    let f = model.record(tape, params, x)?;
    let mut g: Option<NodeId> = None;
    for (sel, w) in prep.selections.iter().zip(&prep.weights) {
        let cols = tape.select_columns(f, sel.clone())?;
        let wn = tape.constant(w.clone());
        let term = tape.hadamard(wn, cols)?;
        g = Some(match g {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let g = g.expect("every scheme evaluates at least one point");
    let base = tape.constant(prep.base.clone());
    let target = tape.constant(prep.target.clone());
    let predicted = tape.add(base, g)?;
    let resid = tape.sub(target, predicted)?;
    let ss = tape.sum_of_squares(resid)?;
    tape.scale(ss, 1.0 / prep.window_count() as f64)
}

/// Discretized trajectory-matching loss over the given windows.
pub fn record_ode_loss<M: Model + ?Sized>(
    tape: &mut Tape,
    model: &M,
    params: &[NodeId],
    trajs: &[Trajectory],
    spec: &LossSpec,
    windows: &[WindowRef],
) -> Result<LossGraph> {
    let prep = PreparedWindows::new(trajs, spec, windows)?;
    let loss = record_prepared_loss(tape, model, params, &prep)?;
    Ok(LossGraph {
        loss,
        evaluated: prep.samples,
    })
}

/// Plain value of the discretized loss at the model's current parameters.
pub fn ode_loss<M: Model + ?Sized>(model: &M, trajs: &[Trajectory], spec: &LossSpec, windows: &[WindowRef]) -> Result<f64> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, &model.params())?;
    let graph = record_ode_loss(&mut tape, model, &params, trajs, spec, windows)?;
    Ok(tape.value(graph.loss).get(0, 0))
}

/// `(1/N) Σ_i |y_i - f(x_i)|²` with inputs and targets as columns.
pub fn record_regression_loss<M: Model + ?Sized>(tape: &mut Tape, model: &M, params: &[NodeId], xs: &Tensor, ys: &Tensor) -> Result<NodeId> {
    if xs.cols() != ys.cols() || xs.cols() == 0 {
        return Err(Error::InvalidInput(format!(
            "regression needs matching non-empty sample sets, got {} and {}",
            xs.cols(),
            ys.cols()
        )));
    }
    let x = tape.constant(xs.clone());
    let y = tape.constant(ys.clone());
    let f = model.record(tape, params, x)?;
    let resid = tape.sub(y, f)?;
    let ss = tape.sum_of_squares(resid)?;
    tape.scale(ss, 1.0 / xs.cols() as f64)
}

pub fn regression_loss<M: Model + ?Sized>(model: &M, xs: &Tensor, ys: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, &model.params())?;
    let loss = record_regression_loss(&mut tape, model, &params, xs, ys)?;
    Ok(tape.value(loss).get(0, 0))
}

/// `ε_0 = 0`, `ε_k = ε_{k-1} + |u_k - û_k|`.
pub fn accumulated_error(truth: &Trajectory, pred: &Trajectory) -> Result<Vec<f64>> {
    if truth.len() != pred.len() || truth.dim() != pred.dim() {
        return Err(Error::InvalidInput(format!(
            "trajectory shapes differ: {}x{} vs {}x{}",
            truth.len(),
            truth.dim(),
            pred.len(),
            pred.dim()
        )));
    }
    if truth.times.iter().zip(&pred.times).any(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + a.abs())) {
        return Err(Error::InvalidInput("trajectories are sampled at different times".into()));
    }
    let mut out = Vec::with_capacity(truth.len());
    let mut eps = 0.0;
    out.push(eps);
    for (u, v) in truth.states.iter().zip(&pred.states).skip(1) {
        eps += u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        out.push(eps);
    }
    Ok(out)
}

/// Mean over samples of `|du/dt - f(u)|²`.
pub fn derivative_residual<M: Model + ?Sized>(model: &M, states: &[Vec<f64>], derivatives: &[Vec<f64>]) -> Result<f64> {
    if states.is_empty() || states.len() != derivatives.len() {
        return Err(Error::InvalidInput("need matching non-empty states and derivatives".into()));
    }
    let x = Tensor::from_rows(states)?.transpose();
    let f = model.forward(&x)?;
    let d = Tensor::from_rows(derivatives)?.transpose();
    Ok(d.sub(&f)?.sum_of_squares() / states.len() as f64)
}

/// A differentiable training objective over a flat parameter vector.
pub trait Objective {
    fn num_params(&self) -> usize;

    /// Loss and gradient over all data.
    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, params: &[f64]) -> Result<f64> {
        Ok(self.value_and_grad(params)?.0)
    }

    /// Loss and gradient for one optimizer step; may subsample.
    fn step_value_and_grad(&self, params: &[f64], _rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
        self.value_and_grad(params)
    }
}

fn taped_value_and_grad<M, B>(model: &M, params: &[f64], build: B) -> Result<(f64, Vec<f64>)>
where
    M: Model + ?Sized,
    B: FnOnce(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let nodes = model.bind(&mut tape, params)?;
    let loss = build(&mut tape, &nodes)?;
    let value = tape.value(loss).get(0, 0);
    let grads = tape.backward(loss)?;
    Ok((value, flat_gradient(&tape, &grads, &nodes)))
}

/// Mean squared regression error over a fixed sample set.
pub struct RegressionObjective<'a, M: Model + ?Sized> {
    pub model: &'a M,
    pub xs: Tensor,
    pub ys: Tensor,
}

impl<M: Model + ?Sized> Objective for RegressionObjective<'_, M> {
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        taped_value_and_grad(self.model, params, |tape, nodes| {
            record_regression_loss(tape, self.model, nodes, &self.xs, &self.ys)
        })
    }
}

/// Discretized trajectory-matching loss over one or more trajectories,
/// averaged uniformly over windows.
pub struct OdeObjective<'a, M: Model + ?Sized> {
    pub model: &'a M,
    pub trajs: &'a [Trajectory],
    pub spec: LossSpec,
    windows: Vec<WindowRef>,
    full: PreparedWindows,
}

impl<'a, M: Model + ?Sized> OdeObjective<'a, M> {
    pub fn new(model: &'a M, trajs: &'a [Trajectory], spec: LossSpec) -> Result<Self> {
        let windows = all_windows(trajs, spec.scheme);
        let full = PreparedWindows::new(trajs, &spec, &windows)?;
        let needed = trajs[0].dim() + usize::from(spec.time_input);
        if model.input_dim() != needed || model.output_dim() != trajs[0].dim() {
            return Err(Error::Dimension {
                op: "ode objective",
                left: (model.output_dim(), model.input_dim()),
                right: (trajs[0].dim(), needed),
            });
        }
        if spec.batch == Some(0) {
            return Err(Error::InvalidInput("batch size must be at least 1".into()));
        }
        Ok(Self {
            model,
            trajs,
            spec,
            windows,
            full,
        })
    }

    pub fn windows(&self) -> &[WindowRef] {
        &self.windows
    }
}

impl<M: Model + ?Sized> Objective for OdeObjective<'_, M> {
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        taped_value_and_grad(self.model, params, |tape, nodes| record_prepared_loss(tape, self.model, nodes, &self.full))
    }

    fn step_value_and_grad(&self, params: &[f64], rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
        match self.spec.batch {
            Some(b) if b < self.windows.len() => {
                let mut idx = sample(rng, self.windows.len(), b).into_vec();
                idx.sort_unstable();
                let chosen: Vec<WindowRef> = idx.into_iter().map(|i| self.windows[i]).collect();
                let prep = PreparedWindows::new(self.trajs, &self.spec, &chosen)?;
                taped_value_and_grad(self.model, params, |tape, nodes| record_prepared_loss(tape, self.model, nodes, &prep))
            }
            _ => self.value_and_grad(params),
        }
    }
}
