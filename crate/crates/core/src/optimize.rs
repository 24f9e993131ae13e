//! Gradient descent (plain and Adam) and phased training schedules.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Objective;
use crate::systems::seeded_rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Loss histories longer than this are decimated in reports.
pub const MAX_HISTORY: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub iterations: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Phase>", into = "Vec<Phase>")]
pub struct Schedule {
    phases: Vec<Phase>,
}

impl Schedule {
    pub fn new(phases: Vec<Phase>) -> Result<Self> {
        if phases.is_empty() {
            return Err(Error::InvalidInput("a schedule needs at least one phase".into()));
        }
        for p in &phases {
            if p.iterations == 0 {
                return Err(Error::InvalidInput("phase iteration counts must be >= 1".into()));
            }
            if !(p.learning_rate > 0.0) || !p.learning_rate.is_finite() {
                return Err(Error::InvalidInput(format!("learning rate must be positive, got {}", p.learning_rate)));
            }
        }
        Ok(Self { phases })
    }

    pub fn from_pairs(pairs: &[(usize, f64)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(iterations, learning_rate)| Phase { iterations, learning_rate })
                .collect(),
        )
    }

    /// `(1000, 0.1), (2000, 0.01), (200, 0.001)`.
    pub fn lorenz() -> Self {
        Self::from_pairs(&[(1000, 0.1), (2000, 0.01), (200, 0.001)]).expect("valid schedule")
    }

    /// `(1000, 0.01), (1000, 0.001)`.
    pub fn regression() -> Self {
        Self::from_pairs(&[(1000, 0.01), (1000, 0.001)]).expect("valid schedule")
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn total_iterations(&self) -> usize {
        self.phases.iter().map(|p| p.iterations).sum()
    }
}

impl TryFrom<Vec<Phase>> for Schedule {
    type Error = Error;

    fn try_from(phases: Vec<Phase>) -> Result<Self> {
        Self::new(phases)
    }
}

impl From<Schedule> for Vec<Phase> {
    fn from(s: Schedule) -> Self {
        s.phases
    }
}

/// Parses `iters@rate,iters@rate,…`.
impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let phases = s
            .split(',')
            .map(|part| {
                let (it, lr) = part
                    .trim()
                    .split_once('@')
                    .ok_or_else(|| Error::InvalidInput(format!("phase {part:?} is not iters@rate")))?;
                let iterations = it
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad iteration count {it:?}")))?;
                let learning_rate = lr
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad learning rate {lr:?}")))?;
                Ok(Phase { iterations, learning_rate })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(phases)
    }
}

fn check_shapes(params: &[f64], grads: &[f64], eta: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension {
            op: "optimizer step",
            left: (params.len(), 1),
            right: (grads.len(), 1),
        });
    }
    if !(eta > 0.0) {
        return Err(Error::InvalidInput(format!("learning rate must be positive, got {eta}")));
    }
    Ok(())
}

/// `θ - η g`.
pub fn sgd_step(params: &[f64], grads: &[f64], eta: f64) -> Result<Vec<f64>> {
    check_shapes(params, grads, eta)?;
    Ok(params.iter().zip(grads).map(|(p, g)| p - eta * g).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], eta: f64) -> Result<()> {
    check_shapes(params, grads, eta)?;
    if state.m.len() != params.len() {
        return Err(Error::Dimension {
            op: "adam state",
            left: (state.m.len(), 1),
            right: (params.len(), 1),
        });
    }
    state.t += 1;
    let c1 = 1.0 - state.beta1.powi(state.t as i32);
    let c2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= eta * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidInput(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
    pub phases: Vec<Phase>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub iterations: usize,
    pub wall_ms: u64,
}

/// Keeps at most [`MAX_HISTORY`] evenly strided entries, always including the last.
pub fn decimate(history: &[f64]) -> Vec<f64> {
    if history.len() <= MAX_HISTORY {
        return history.to_vec();
    }
    let stride = history.len().div_ceil(MAX_HISTORY - 1);
    let mut out: Vec<f64> = history.iter().step_by(stride).copied().collect();
    if !(history.len() - 1).is_multiple_of(stride) {
        out.push(*history.last().expect("non-empty"));
    }
    out
}

/// Runs the phases in order, stopping early once the loss is at or below
/// `early_stop`. Returns the final parameters and a report whose final loss
/// is re-evaluated on them over the full objective.
pub fn run_schedule<O: Objective + ?Sized>(
    objective: &O,
    init: Vec<f64>,
    schedule: &Schedule,
    optimizer: OptimizerKind,
    seed: u64,
    early_stop: Option<f64>,
) -> Result<(Vec<f64>, TrainingReport)> {
    if init.len() != objective.num_params() {
        return Err(Error::Dimension {
            op: "run_schedule",
            left: (objective.num_params(), 1),
            right: (init.len(), 1),
        });
    }
    let start = Instant::now();
    let mut rng = seeded_rng(seed);
    let mut params = init;
    let mut adam = AdamState::new(params.len());
    let mut history = Vec::with_capacity(schedule.total_iterations());
    let mut iterations = 0;
    let report = |history: &[f64], iterations: usize, final_loss: f64| TrainingReport {
        final_loss,
        loss_history: decimate(history),
        phases: schedule.phases().to_vec(),
        optimizer,
        seed,
        iterations,
        wall_ms: start.elapsed().as_millis() as u64,
    };

    'phases: for phase in schedule.phases() {
        for _ in 0..phase.iterations {
            let (loss, grad) = objective.step_value_and_grad(&params, &mut rng)?;
            history.push(loss);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    iteration: iterations,
                    report: Box::new(report(&history, iterations, loss)),
                });
            }
            if early_stop.is_some_and(|eps| loss <= eps) {
                break 'phases;
            }
            match optimizer {
                OptimizerKind::Sgd => params = sgd_step(&params, &grad, phase.learning_rate)?,
                OptimizerKind::Adam => adam_step(&mut adam, &mut params, &grad, phase.learning_rate)?,
            }
            iterations += 1;
        }
    }
    let final_loss = objective.value(&params)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            iteration: iterations,
            report: Box::new(report(&history, iterations, final_loss)),
        });
    }
    let r = report(&history, iterations, final_loss);
    Ok((params, r))
}
