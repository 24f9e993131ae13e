//! The pipeline commands. Each has a resolved settings type, a pure-ish core
//! returning in-memory results, and a `cmd_*` wrapper that writes artifacts.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use odekernel::integrators::{integrate_rk45, uniform_times, SchemeKind, DEFAULT_ATOL, DEFAULT_RTOL};
use odekernel::loss::{accumulated_error, regression_loss, LossSpec, OdeObjective, RegressionObjective};
use odekernel::models::{AnyModel, KernelRidge, Mlp, Model, ParametricPolyKernel, PolyFeatureModel};
use odekernel::optimize::{run_schedule, OptimizerKind, Schedule, TrainingReport};
use odekernel::systems::{
    cubic_target, cubic_training_set, lorenz96_rhs, sample_initial_conditions, sample_normal, seeded_rng, Lorenz96Params, Sampling,
};
use odekernel::{Error, Tensor, Trajectory};
use serde::Serialize;

use crate::args::{required, resolve_seed, EvaluateArgs, GenerateArgs, RegressDemoArgs, SimulateArgs, TrainArgs};
use crate::io;
use crate::CliError;

fn parse<T: std::str::FromStr<Err = Error>>(value: &str) -> Result<T, CliError> {
    value.parse().map_err(|e: Error| CliError::Usage(e.to_string()))
}

fn positive(name: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Usage(format!("--{name} must be positive, got {v}")))
    }
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

/// Runs `count` independent jobs on up to `jobs` threads, returning results
/// in index order.
fn run_parallel<T: Send>(count: usize, jobs: usize, work: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, count.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let out = work(i);
                slots.lock().expect("no poisoned workers")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|o| o.expect("every job ran"))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct GenerateSettings {
    pub system: String,
    pub n: usize,
    pub forcing: f64,
    pub t_end: f64,
    pub rate: f64,
    pub rtol: f64,
    pub atol: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl GenerateSettings {
    pub fn resolve(a: GenerateArgs, top_seed: Option<u64>) -> Result<Self, CliError> {
        let s = Self {
            system: a.system.unwrap_or_else(|| "lorenz96".into()),
            n: a.n.unwrap_or(8),
            forcing: a.forcing.unwrap_or(5.0),
            t_end: a.t_end.unwrap_or(20.0),
            rate: positive("rate", a.rate.unwrap_or(1000.0))?,
            rtol: positive("rtol", a.rtol.unwrap_or(DEFAULT_RTOL))?,
            atol: a.atol.unwrap_or(DEFAULT_ATOL),
            seed: resolve_seed(a.seed, top_seed)?,
            out: required(a.out, "out")?,
        };
        if s.system != "lorenz96" {
            return Err(CliError::Usage(format!("unknown system {:?}; expected lorenz96", s.system)));
        }
        if !(s.t_end >= 0.0) {
            return Err(CliError::Usage(format!("--t-end must be >= 0, got {}", s.t_end)));
        }
        Ok(s)
    }
}

/// Lorenz-96 trajectory from a seeded `Normal(0, 3)` initial condition.
pub fn generate_trajectory(s: &GenerateSettings) -> Result<Trajectory, CliError> {
    let p = Lorenz96Params::new(s.n, s.forcing)?;
    let u0 = sample_initial_conditions(&p, s.seed);
    let times = uniform_times(0.0, s.t_end, s.rate)?;
    let t_end = times.last().copied().unwrap_or(0.0).max(s.t_end);
    let f = |_: f64, u: &[f64]| lorenz96_rhs(&p, u).expect("state dimension is fixed");
    Ok(integrate_rk45(f, &u0, 0.0, t_end, s.rtol, s.atol, &times)?)
}

pub fn cmd_generate(s: &GenerateSettings) -> Result<(), CliError> {
    let start = Instant::now();
    let traj = generate_trajectory(s)?;
    io::write_trajectory(&s.out, &traj)?;
    io::write_meta(&s.out, "generate", s.seed, s, elapsed_ms(start))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Kernel,
    Mlp,
    PolyFeature,
}

impl std::str::FromStr for ModelKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "kernel" => Ok(ModelKind::Kernel),
            "mlp" => Ok(ModelKind::Mlp),
            "polyfeature" => Ok(ModelKind::PolyFeature),
            other => Err(CliError::Usage(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSettings {
    pub data: Vec<PathBuf>,
    pub model: ModelKind,
    pub order: u32,
    pub m: Vec<usize>,
    pub hidden: usize,
    pub scheme: SchemeKind,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub batch: Option<usize>,
    pub early_stop: Option<f64>,
    pub time_input: bool,
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
    pub report: Option<PathBuf>,
}

impl TrainSettings {
    pub fn resolve(a: TrainArgs, top_seed: Option<u64>) -> Result<Self, CliError> {
        let data = required(a.data, "data")?;
        if data.is_empty() {
            return Err(CliError::Usage("--data needs at least one file".into()));
        }
        let m = a.m.unwrap_or_else(|| vec![100]);
        if m.is_empty() || m.contains(&0) {
            return Err(CliError::Usage("--m values must be >= 1".into()));
        }
        Ok(Self {
            data,
            model: a.model.as_deref().unwrap_or("kernel").parse()?,
            order: a.order.unwrap_or(2),
            m,
            hidden: a.hidden.unwrap_or(100),
            scheme: parse(a.scheme.as_deref().unwrap_or("adams-moulton"))?,
            schedule: match a.schedule {
                Some(s) => parse(&s)?,
                None => Schedule::lorenz(),
            },
            optimizer: parse(a.optimizer.as_deref().unwrap_or("adam"))?,
            batch: a.batch,
            early_stop: a.early_stop,
            time_input: a.time_input.unwrap_or(false),
            seed: resolve_seed(a.seed, top_seed)?,
            jobs: a.jobs.unwrap_or(1).max(1),
            out: required(a.out, "out")?,
            report: a.report,
        })
    }

    /// Intermediate dimensions of the runs; only kernels sweep over `m`.
    pub fn runs(&self) -> Vec<Option<usize>> {
        match self.model {
            ModelKind::Kernel => self.m.iter().copied().map(Some).collect(),
            _ => vec![None],
        }
    }
}

/// Trained model plus the training record written next to it.
#[derive(Clone, Debug, Serialize)]
pub struct TrainOutput {
    pub model: ModelKind,
    pub m: Option<usize>,
    pub scheme: SchemeKind,
    pub windows: usize,
    #[serde(flatten)]
    pub report: TrainingReport,
}

/// A trained model, or the error with any partial report.
pub type RunResult = Result<(AnyModel, TrainOutput), (CliError, Option<Box<TrainOutput>>)>;

#[derive(Debug)]
pub struct TrainRun {
    pub index: usize,
    pub seed: u64,
    pub model_path: PathBuf,
    pub report_path: PathBuf,
    pub result: RunResult,
}

fn init_model(s: &TrainSettings, d_in: usize, d_out: usize, m: Option<usize>, seed: u64) -> Result<AnyModel, CliError> {
    let mut rng = seeded_rng(seed);
    Ok(match s.model {
        ModelKind::Kernel => AnyModel::Kernel(ParametricPolyKernel::random(d_in, m.unwrap_or(100), d_out, s.order, &mut rng)?),
        ModelKind::Mlp => AnyModel::Mlp(Mlp::random(&[d_in, s.hidden, s.hidden, s.hidden, d_out], &mut rng)?),
        ModelKind::PolyFeature => {
            if d_in != d_out {
                return Err(CliError::Usage("polyfeature models do not take a time input".into()));
            }
            AnyModel::PolyFeature(PolyFeatureModel::random(d_out, &mut rng))
        }
    })
}

/// Trains every run of the settings on the given trajectories.
pub fn train_models(s: &TrainSettings, trajs: &[Trajectory]) -> Vec<TrainRun> {
    let runs = s.runs();
    let sweep = runs.len() > 1;
    let spec = LossSpec {
        scheme: s.scheme,
        batch: s.batch,
        time_input: s.time_input,
    };
    run_parallel(runs.len(), s.jobs, |index| {
        let m = runs[index];
        let seed = s.seed.wrapping_add(index as u64);
        let suffix = m.filter(|_| sweep).map(|m| format!("-M{m}")).unwrap_or_default();
        let model_path = io::with_suffix(&s.out, &suffix);
        let report_path = match &s.report {
            Some(r) => io::with_suffix(r, &suffix),
            None => io::with_suffix(&model_path, ".report"),
        };
        let result = train_one(s, trajs, spec, m, seed);
        TrainRun {
            index,
            seed,
            model_path,
            report_path,
            result,
        }
    })
}

fn train_one(
    s: &TrainSettings,
    trajs: &[Trajectory],
    spec: LossSpec,
    m: Option<usize>,
    seed: u64,
) -> RunResult {
    let dim = trajs[0].dim();
    let mut model = init_model(s, dim + usize::from(s.time_input), dim, m, seed).map_err(|e| (e, None))?;
    let objective = OdeObjective::new(&model, trajs, spec).map_err(|e| (e.into(), None))?;
    let windows = objective.windows().len();
    let wrap = |report| TrainOutput {
        model: s.model,
        m,
        scheme: s.scheme,
        windows,
        report,
    };
    match run_schedule(&objective, model.params(), &s.schedule, s.optimizer, seed, s.early_stop) {
        Ok((params, report)) => {
            drop(objective);
            model.set_params(&params).map_err(|e| (e.into(), None))?;
            Ok((model, wrap(report)))
        }
        Err(Error::Divergence { iteration, report }) => Err((
            CliError::Numeric(format!("training diverged at iteration {iteration}")),
            Some(Box::new(wrap(*report))),
        )),
        Err(e) => Err((e.into(), None)),
    }
}

pub fn load_trajectories(paths: &[PathBuf]) -> Result<Vec<Trajectory>, CliError> {
    let trajs = paths.iter().map(|p| io::read_trajectory(p)).collect::<Result<Vec<_>, _>>()?;
    if trajs.iter().any(|t| t.dim() != trajs[0].dim()) {
        return Err(CliError::Usage("data files have different state dimensions".into()));
    }
    Ok(trajs)
}

pub fn cmd_train(s: &TrainSettings) -> Result<(), CliError> {
    let start = Instant::now();
    let trajs = load_trajectories(&s.data)?;
    let mut first_error = None;
    for run in train_models(s, &trajs) {
        match run.result {
            Ok((model, output)) => {
                io::write_text(&run.model_path, &(model.to_json()? + "\n"))?;
                io::write_json(&run.report_path, &output)?;
                io::write_meta(&run.model_path, "train", run.seed, s, elapsed_ms(start))?;
            }
            Err((err, partial)) => {
                if let Some(output) = partial {
                    io::write_json(&run.report_path, &output)?;
                }
                eprintln!("run {}: {err}", run.index);
                first_error.get_or_insert(err);
            }
        }
    }
    first_error.map_or(Ok(()), Err)
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulateSettings {
    pub model: PathBuf,
    pub init_csv: Option<PathBuf>,
    pub init_row: usize,
    pub seed: u64,
    pub t_end: f64,
    pub rate: f64,
    pub rtol: f64,
    pub atol: f64,
    pub out: PathBuf,
}

impl SimulateSettings {
    pub fn resolve(a: SimulateArgs, top_seed: Option<u64>) -> Result<Self, CliError> {
        let s = Self {
            model: required(a.model, "model")?,
            init_csv: a.init_csv,
            init_row: a.init_row.unwrap_or(0),
            seed: resolve_seed(a.seed, top_seed)?,
            t_end: a.t_end.unwrap_or(20.0),
            rate: positive("rate", a.rate.unwrap_or(1000.0))?,
            rtol: positive("rtol", a.rtol.unwrap_or(DEFAULT_RTOL))?,
            atol: a.atol.unwrap_or(DEFAULT_ATOL),
            out: required(a.out, "out")?,
        };
        if !(s.t_end >= 0.0) {
            return Err(CliError::Usage(format!("--t-end must be >= 0, got {}", s.t_end)));
        }
        Ok(s)
    }
}

/// RK45 rollout of a model. Models with one more input than output take `t`
/// as their last input.
pub fn simulate_model(model: &AnyModel, u0: &[f64], t0: f64, s: &SimulateSettings) -> Result<Trajectory, CliError> {
    let (d, e) = (model.input_dim(), model.output_dim());
    let time_input = d == e + 1;
    if !(d == e || time_input) || u0.len() != e {
        return Err(CliError::Usage(format!(
            "model maps {d} inputs to {e} outputs but the initial state has {} components",
            u0.len()
        )));
    }
    let f = |t: f64, u: &[f64]| {
        let mut x = u.to_vec();
        if time_input {
            x.push(t);
        }
        model.forward(&Tensor::column(&x)).expect("dimensions checked").into_data()
    };
    let times: Vec<f64> = uniform_times(0.0, s.t_end, s.rate)?.into_iter().map(|t| t0 + t).collect();
    let t_end = *times.last().expect("at least one sample");
    Ok(integrate_rk45(f, u0, t0, t_end.max(t0 + s.t_end), s.rtol, s.atol, &times)?)
}

pub fn cmd_simulate(s: &SimulateSettings) -> Result<(), CliError> {
    let start = Instant::now();
    let model = AnyModel::from_json(&io::read_text(&s.model)?).map_err(|e| CliError::Io(format!("{}: {e}", s.model.display())))?;
    let (u0, t0) = match &s.init_csv {
        Some(path) => {
            let traj = io::read_trajectory(path)?;
            let row = traj
                .states
                .get(s.init_row)
                .ok_or_else(|| CliError::Usage(format!("--init-row {} exceeds {} rows", s.init_row, traj.len())))?;
            (row.clone(), traj.times[s.init_row])
        }
        None => (sample_normal(model.output_dim(), &mut seeded_rng(s.seed)), 0.0),
    };
    let traj = simulate_model(&model, &u0, t0, s)?;
    io::write_trajectory(&s.out, &traj)?;
    io::write_meta(&s.out, "simulate", s.seed, s, elapsed_ms(start))
}

#[derive(Clone, Debug, Serialize)]
pub struct EvaluateSettings {
    pub truth: PathBuf,
    pub pred: PathBuf,
    pub out: PathBuf,
}

impl EvaluateSettings {
    pub fn resolve(a: EvaluateArgs) -> Result<Self, CliError> {
        Ok(Self {
            truth: required(a.truth, "truth")?,
            pred: required(a.pred, "pred")?,
            out: required(a.out, "out")?,
        })
    }
}

pub fn cmd_evaluate(s: &EvaluateSettings) -> Result<(), CliError> {
    let start = Instant::now();
    let truth = io::read_trajectory(&s.truth)?;
    let pred = io::read_trajectory(&s.pred)?;
    let eps = accumulated_error(&truth, &pred).map_err(|e| CliError::Usage(e.to_string()))?;
    let rows = truth.times.iter().zip(eps).map(|(t, e)| vec![*t, e]);
    io::write_table(&s.out, &["t".into(), "eps".into()], rows)?;
    io::write_meta(&s.out, "evaluate", 0, s, elapsed_ms(start))
}

#[derive(Clone, Debug, Serialize)]
pub struct RegressDemoSettings {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub m: usize,
    pub points: usize,
    pub sampling: String,
    pub hidden: usize,
    pub schedule: Schedule,
    pub ridge_lambda: f64,
    pub ridge_c: f64,
    pub ridge_degree: u32,
    pub jobs: usize,
}

impl RegressDemoSettings {
    pub fn resolve(a: RegressDemoArgs, top_seed: Option<u64>) -> Result<Self, CliError> {
        let s = Self {
            out_dir: required(a.out_dir, "out-dir")?,
            seed: resolve_seed(a.seed, top_seed)?,
            m: a.m.unwrap_or(20),
            points: a.points.unwrap_or(25),
            sampling: a.sampling.unwrap_or_else(|| "grid".into()),
            hidden: a.hidden.unwrap_or(100),
            schedule: match a.schedule {
                Some(s) => parse(&s)?,
                None => Schedule::regression(),
            },
            ridge_lambda: a.ridge_lambda.unwrap_or(0.1),
            ridge_c: a.ridge_c.unwrap_or(10.0),
            ridge_degree: a.ridge_degree.unwrap_or(3),
            jobs: a.jobs.unwrap_or(1).max(1),
        };
        s.sampling_mode()?;
        Ok(s)
    }

    pub fn sampling_mode(&self) -> Result<Sampling, CliError> {
        match self.sampling.as_str() {
            "grid" => Ok(Sampling::Grid),
            "random" => Ok(Sampling::Random { seed: self.seed }),
            other => Err(CliError::Usage(format!("unknown sampling {other:?}; expected grid or random"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TableRow {
    pub model: String,
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct RegressDemoResult {
    pub rows: Vec<TableRow>,
    pub trained: Vec<(String, AnyModel, TrainingReport)>,
    pub ridge: KernelRidge,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

/// Trains the perceptron and the kernels of order 2, 3 and 4 on the cubic
/// target and fits the nonparametric ridge estimator.
pub fn regress_demo(s: &RegressDemoSettings) -> Result<RegressDemoResult, CliError> {
    let (xs, ys) = cubic_training_set(s.points, -2.0, 2.0, s.sampling_mode()?)?;
    let x = Tensor::new(1, xs.len(), xs.clone())?;
    let y = Tensor::new(1, ys.len(), ys.clone())?;

    let mut rng = seeded_rng(s.seed);
    let mut inits = vec![("mlp".to_string(), AnyModel::Mlp(Mlp::random(&[1, s.hidden, s.hidden, s.hidden, 1], &mut rng)?))];
    for order in 2..=4 {
        let k = ParametricPolyKernel::random(1, s.m, 1, order, &mut rng)?;
        inits.push((format!("kernel-n{order}"), AnyModel::Kernel(k)));
    }

    let results = run_parallel(inits.len(), s.jobs, |i| {
        let (name, model) = &inits[i];
        let objective = RegressionObjective {
            model,
            xs: x.clone(),
            ys: y.clone(),
        };
        run_schedule(&objective, model.params(), &s.schedule, OptimizerKind::Adam, s.seed.wrapping_add(i as u64), None)
            .map(|(params, report)| {
                let mut trained = model.clone();
                trained.set_params(&params).expect("same shapes");
                (name.clone(), trained, report)
            })
            .map_err(|e| match e {
                Error::Divergence { iteration, .. } => CliError::Numeric(format!("{name} diverged at iteration {iteration}")),
                other => other.into(),
            })
    });
    let trained = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let support: Vec<Vec<f64>> = xs.iter().map(|v| vec![*v]).collect();
    let targets: Vec<Vec<f64>> = ys.iter().map(|v| vec![*v]).collect();
    let ridge = KernelRidge::fit(&support, &targets, None, s.ridge_c, s.ridge_degree, s.ridge_lambda)?;
    let ridge_loss = support
        .iter()
        .zip(&ys)
        .map(|(x, y)| ridge.predict(x).map(|p| (p[0] - y).powi(2)))
        .sum::<Result<f64, _>>()?
        / ys.len() as f64;

    let mut rows: Vec<TableRow> = trained
        .iter()
        .map(|(name, model, _)| {
            Ok(TableRow {
                model: name.clone(),
                final_loss: regression_loss(model, &x, &y)?,
            })
        })
        .collect::<Result<_, Error>>()?;
    rows.push(TableRow {
        model: "ridge".into(),
        final_loss: ridge_loss,
    });
    Ok(RegressDemoResult {
        rows,
        trained,
        ridge,
        xs,
        ys,
    })
}

pub const CURVE_MIN: f64 = -5.0;
pub const CURVE_MAX: f64 = 5.0;
pub const CURVE_POINTS: usize = 201;

pub fn cmd_regress_demo(s: &RegressDemoSettings) -> Result<(), CliError> {
    let start = Instant::now();
    let r = regress_demo(s)?;
    let dir = &s.out_dir;

    let mut table = String::from("model,final_loss\n");
    for row in &r.rows {
        table += &format!("{},{}\n", row.model, io::fmt_f64(row.final_loss));
    }
    io::write_text(&dir.join("table.csv"), &table)?;

    io::write_table(
        &dir.join("training.csv"),
        &["x".into(), "y".into()],
        r.xs.iter().zip(&r.ys).map(|(x, y)| vec![*x, *y]),
    )?;

    let mut header = vec!["x".to_string(), "truth".to_string()];
    header.extend(r.trained.iter().map(|(n, _, _)| n.clone()));
    header.push("ridge".into());
    let mut curves = Vec::with_capacity(CURVE_POINTS);
    for i in 0..CURVE_POINTS {
        let x = CURVE_MIN + (CURVE_MAX - CURVE_MIN) * i as f64 / (CURVE_POINTS - 1) as f64;
        let mut row = vec![x, cubic_target(x)];
        for (_, model, _) in &r.trained {
            row.push(model.forward_vec(&[x])?[0]);
        }
        row.push(r.ridge.predict(&[x])?[0]);
        curves.push(row);
    }
    io::write_table(&dir.join("curves.csv"), &header, curves)?;

    for (name, model, report) in &r.trained {
        io::write_text(&dir.join(format!("{name}.json")), &(model.to_json()? + "\n"))?;
        io::write_json(&dir.join(format!("{name}.report.json")), report)?;
    }
    io::write_meta(&dir.join("table.csv"), "regress-demo", s.seed, s, elapsed_ms(start))
}
