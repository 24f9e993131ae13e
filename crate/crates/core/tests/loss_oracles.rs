mod common;

use common::{fd_gradient, rel_error, rng, FD_RTOL};
use odekernel::integrators::{
    integrate_rk45, rollout_backward_euler, rollout_forward_euler, uniform_times, SchemeKind, DEFAULT_ATOL, DEFAULT_RTOL,
};
use odekernel::loss::{
    accumulated_error, all_windows, derivative_residual, ode_loss, LossSpec, Objective, OdeObjective, RegressionObjective,
};
use odekernel::models::{Mlp, Model, ParametricPolyKernel, PolyFeatureModel};
use odekernel::systems::{
    lorenz96_jacobian, lorenz96_rhs, sample_initial_conditions, Lorenz96Model, Lorenz96Params,
};
use odekernel::{Tensor, Trajectory};

fn lorenz_data(n: usize, seed: u64, t_end: f64, rate: f64) -> Trajectory {
    let p = Lorenz96Params::new(n, 5.0).unwrap();
    let u0 = sample_initial_conditions(&p, seed);
    let times = uniform_times(0.0, t_end, rate).unwrap();
    integrate_rk45(|_, u| lorenz96_rhs(&p, u).unwrap(), &u0, 0.0, t_end, DEFAULT_RTOL, DEFAULT_ATOL, &times).unwrap()
}

fn check_objective<O: Objective>(obj: &O, params: &[f64], label: &str) {
    let (_, ad) = obj.value_and_grad(params).unwrap();
    let fd = fd_gradient(|p| obj.value(p).unwrap(), params, 1e-6);
    let err = rel_error(&ad, &fd);
    assert!(err <= FD_RTOL, "{label}: rel error {err:e}");
}

#[test]
fn ode_loss_gradients_match_finite_differences_for_every_scheme() {
    let trajs = vec![lorenz_data(4, 1, 0.5, 40.0), lorenz_data(4, 2, 0.5, 40.0)];
    let mut g = rng(11);
    let kernel = ParametricPolyKernel::random(4, 6, 4, 2, &mut g).unwrap();
    let cubic = ParametricPolyKernel::random(4, 5, 4, 3, &mut g).unwrap();
    let mlp = Mlp::random(&[4, 5, 5, 5, 4], &mut g).unwrap();
    let poly = PolyFeatureModel::random(4, &mut g);
    let models: [(&str, &dyn Model); 4] = [("kernel-n2", &kernel), ("kernel-n3", &cubic), ("mlp", &mlp), ("polyfeature", &poly)];
    for scheme in SchemeKind::ALL {
        for (name, model) in models {
            let obj = OdeObjective::new(model, &trajs, LossSpec::new(scheme)).unwrap();
            check_objective(&obj, &model.params(), &format!("{name}/{scheme}"));
        }
    }
}

#[test]
fn regression_gradients_match_finite_differences() {
    let mut g = rng(12);
    let xs = Tensor::new(1, 9, (0..9).map(|i| -2.0 + 0.5 * i as f64).collect()).unwrap();
    let ys = xs.map(|x| x * x * x - x);
    let kernel = ParametricPolyKernel::random(1, 7, 1, 3, &mut g).unwrap();
    let mlp = Mlp::random(&[1, 6, 6, 6, 1], &mut g).unwrap();
    for (name, model) in [("kernel", &kernel as &dyn Model), ("mlp", &mlp)] {
        let obj = RegressionObjective { model, xs: xs.clone(), ys: ys.clone() };
        check_objective(&obj, &model.params(), name);
    }
}

#[test]
fn loss_value_matches_the_plain_evaluation() {
    let trajs = vec![lorenz_data(4, 3, 0.5, 40.0)];
    let kernel = ParametricPolyKernel::random(4, 6, 4, 2, &mut rng(13)).unwrap();
    for scheme in SchemeKind::ALL {
        let spec = LossSpec::new(scheme);
        let obj = OdeObjective::new(&kernel, &trajs, spec).unwrap();
        let direct = ode_loss(&kernel, &trajs, &spec, &all_windows(&trajs, scheme)).unwrap();
        assert_eq!(obj.value(&kernel.params()).unwrap(), direct);
    }
}

#[test]
fn true_rhs_on_dense_lorenz_data_has_tiny_adams_moulton_loss() {
    let trajs = vec![lorenz_data(8, 0, 2.0, 1000.0)];
    let truth = Lorenz96Model::new(Lorenz96Params::default());
    let spec = LossSpec::new(SchemeKind::AdamsMoulton2);
    let j = ode_loss(&truth, &trajs, &spec, &all_windows(&trajs, SchemeKind::AdamsMoulton2)).unwrap();
    assert!(j <= 1e-10, "J_A = {j:e}");
}

fn quadratic_rhs(u: &[f64]) -> Vec<f64> {
    vec![u[1], -u[0] - 0.5 * u[0] * u[1] + 0.2 * u[0] * u[0]]
}

fn quadratic_jac(u: &[f64]) -> Tensor {
    Tensor::new(2, 2, vec![0.0, 1.0, -1.0 - 0.5 * u[1] + 0.4 * u[0], -0.5 * u[0]]).unwrap()
}

fn quadratic_model() -> PolyFeatureModel {
    let mut m = PolyFeatureModel::zeros(2);
    m.linear = Tensor::new(2, 2, vec![0.0, 1.0, -1.0, 0.0]).unwrap();
    m.set_quadratic(1, 1, 0, -0.5);
    m.set_quadratic(1, 0, 0, 0.2);
    m
}

#[test]
fn scheme_consistent_data_gives_zero_loss() {
    let times = uniform_times(0.0, 3.0, 20.0).unwrap();
    let model = quadratic_model();
    let fe = vec![rollout_forward_euler(|_, u| quadratic_rhs(u), &times, &[0.4, -0.3]).unwrap()];
    let spec = LossSpec::new(SchemeKind::ForwardEuler);
    let j = ode_loss(&model, &fe, &spec, &all_windows(&fe, SchemeKind::ForwardEuler)).unwrap();
    assert!(j <= 1e-28, "J_F = {j:e}");

    let be = vec![rollout_backward_euler(|_, u| quadratic_rhs(u), |_, u| quadratic_jac(u), &times, &[0.4, -0.3]).unwrap()];
    let spec = LossSpec::new(SchemeKind::BackwardEuler);
    let j = ode_loss(&model, &be, &spec, &all_windows(&be, SchemeKind::BackwardEuler)).unwrap();
    assert!(j <= 1e-20, "J_B = {j:e}");
}

#[test]
fn zero_loss_model_reproduces_exact_derivatives() {
    let times = uniform_times(0.0, 3.0, 20.0).unwrap();
    let model = quadratic_model();
    let data = vec![rollout_forward_euler(|_, u| quadratic_rhs(u), &times, &[0.4, -0.3]).unwrap()];
    let spec = LossSpec::new(SchemeKind::ForwardEuler);
    assert!(ode_loss(&model, &data, &spec, &all_windows(&data, SchemeKind::ForwardEuler)).unwrap() <= 1e-28);
    let derivs: Vec<Vec<f64>> = data[0].states.iter().map(|u| quadratic_rhs(u)).collect();
    assert!(derivative_residual(&model, &data[0].states, &derivs).unwrap() <= 1e-28);
}

#[test]
fn zero_model_residual_is_mean_squared_rhs() {
    let traj = lorenz_data(8, 4, 1.0, 20.0);
    let p = Lorenz96Params::default();
    let derivs: Vec<Vec<f64>> = traj.states.iter().map(|u| lorenz96_rhs(&p, u).unwrap()).collect();
    let zero = PolyFeatureModel::zeros(8);
    let got = derivative_residual(&zero, &traj.states, &derivs).unwrap();
    let want = derivs.iter().map(|d| d.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / derivs.len() as f64;
    assert!((got - want).abs() <= 1e-12 * want);
    let truth = Lorenz96Model::new(p);
    assert_eq!(derivative_residual(&truth, &traj.states, &derivs).unwrap(), 0.0);
}

#[test]
fn accumulated_error_matches_direct_recomputation() {
    let a = lorenz_data(8, 5, 1.0, 50.0);
    let b = lorenz_data(8, 6, 1.0, 50.0);
    let eps = accumulated_error(&a, &b).unwrap();
    let mut running = 0.0;
    for k in 0..a.len() {
        if k > 0 {
            let mut sq = 0.0;
            for i in 0..8 {
                sq += (a.states[k][i] - b.states[k][i]).powi(2);
            }
            running += sq.sqrt();
        }
        assert!((eps[k] - running).abs() <= 1e-12 * (1.0 + running));
    }
    assert!(accumulated_error(&a, &a).unwrap().iter().all(|&e| e == 0.0));
}

#[test]
fn lorenz_jacobian_matches_its_finite_differences() {
    let p = Lorenz96Params::default();
    let u = sample_initial_conditions(&p, 9);
    let jac = lorenz96_jacobian(&p, &u);
    for row in 0..8 {
        let fd = fd_gradient(|v| lorenz96_rhs(&p, v).unwrap()[row], &u, 1e-6);
        let exact: Vec<f64> = (0..8).map(|c| jac.get(row, c)).collect();
        assert!(rel_error(&exact, &fd) <= FD_RTOL);
    }
}
