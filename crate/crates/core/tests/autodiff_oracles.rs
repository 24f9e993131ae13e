mod common;

use common::{fd_gradient, rel_error, rng, uniform, FD_RTOL};
use odekernel::autodiff::{jacobian, NodeId, OpKind, Tape};
use odekernel::models::{Model, ParametricPolyKernel};
use odekernel::systems::{lorenz96_rhs, record_lorenz96, sample_initial_conditions, Lorenz96Params};
use odekernel::Tensor;

const SHAPE: (usize, usize) = (3, 4);

/// Applies `kind` to parameter nodes built from `xs` (plus fixed constants
/// where needed) and reduces with a fixed random linear functional.
fn op_loss(kind: &OpKind, xs: &[f64], weights: &Tensor, other: &Tensor) -> (Tape, NodeId, NodeId) {
    let (r, c) = SHAPE;
    let mut tape = Tape::new();
    let a = tape.parameter(Tensor::new(r, c, xs.to_vec()).unwrap());
    let out = match kind {
        OpKind::Add | OpKind::Sub | OpKind::Hadamard => {
            let b = tape.constant(other.clone());
            tape.record(kind.clone(), &[a, b]).unwrap()
        }
        OpKind::Matmul => {
            let b = tape.constant(other.transpose());
            tape.record(OpKind::Matmul, &[a, b]).unwrap()
        }
        _ => tape.record(kind.clone(), &[a]).unwrap(),
    };
    let shape = tape.value(out).shape();
    let w = tape.constant(Tensor::new(shape.0, shape.1, weights.data()[..shape.0 * shape.1].to_vec()).unwrap());
    let prod = tape.hadamard(w, out).unwrap();
    let mean = tape.mean(prod).unwrap();
    let loss = tape.scale(mean, (shape.0 * shape.1) as f64).unwrap();
    (tape, a, loss)
}

#[test]
fn every_op_kind_matches_finite_differences() {
    let kinds = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Matmul,
        OpKind::Hadamard,
        OpKind::Scale(-1.7),
        OpKind::Sigmoid,
        OpKind::Power(2),
        OpKind::Power(3),
        OpKind::Power(4),
        OpKind::SumOfSquares,
        OpKind::Mean,
        OpKind::SelectColumns(vec![3, 0, 0, 2]),
    ];
    let (r, c) = SHAPE;
    let mut g = rng(17);
    for kind in &kinds {
        for trial in 0..20 {
            let xs = uniform(&mut g, r * c, -2.0, 2.0);
            let weights = Tensor::new(r, c, uniform(&mut g, r * c, -1.0, 1.0)).unwrap();
            let other = Tensor::new(r, c, uniform(&mut g, r * c, -1.0, 1.0)).unwrap();
            let (tape, a, loss) = op_loss(kind, &xs, &weights, &other);
            let grads = tape.backward(loss).unwrap();
            let ad = grads.get_or_zeros(a, SHAPE).into_data();
            let fd = fd_gradient(
                |x| {
                    let (t, _, l) = op_loss(kind, x, &weights, &other);
                    t.value(l).get(0, 0)
                },
                &xs,
                1e-6,
            );
            let err = rel_error(&ad, &fd);
            assert!(err <= FD_RTOL, "{} trial {trial}: rel error {err:e}", kind.name());
        }
    }
}

fn three_layer(params: &[f64], x: &Tensor) -> (Tape, Vec<NodeId>, NodeId) {
    let shapes = [(5, 3), (5, 1), (4, 5), (4, 1), (2, 4), (2, 1)];
    let mut tape = Tape::new();
    let mut nodes = Vec::new();
    let mut off = 0;
    for (r, c) in shapes {
        nodes.push(tape.parameter(Tensor::new(r, c, params[off..off + r * c].to_vec()).unwrap()));
        off += r * c;
    }
    let xn = tape.constant(x.clone());
    let z1 = tape.matmul(nodes[0], xn).unwrap();
    let z1 = tape.add_column_bias(z1, nodes[1]).unwrap();
    let a1 = tape.sigmoid(z1).unwrap();
    let z2 = tape.matmul(nodes[2], a1).unwrap();
    let z2 = tape.add_column_bias(z2, nodes[3]).unwrap();
    let a2 = tape.power(z2, 3).unwrap();
    let z3 = tape.matmul(nodes[4], a2).unwrap();
    let z3 = tape.add_column_bias(z3, nodes[5]).unwrap();
    let loss = tape.sum_of_squares(z3).unwrap();
    (tape, nodes, loss)
}

fn flat_grad(tape: &Tape, nodes: &[NodeId], loss: NodeId) -> Vec<f64> {
    let g = tape.backward(loss).unwrap();
    nodes.iter().flat_map(|&n| g.get_or_zeros(n, tape.value(n).shape()).into_data()).collect()
}

#[test]
fn random_three_layer_graph_matches_finite_differences() {
    let mut g = rng(5);
    let n = 15 + 5 + 20 + 4 + 8 + 2;
    let x = Tensor::new(3, 6, uniform(&mut g, 18, -1.0, 1.0)).unwrap();
    for _ in 0..5 {
        let p = uniform(&mut g, n, -0.8, 0.8);
        let (tape, nodes, loss) = three_layer(&p, &x);
        let ad = flat_grad(&tape, &nodes, loss);
        let fd = fd_gradient(
            |q| {
                let (t, _, l) = three_layer(q, &x);
                t.value(l).get(0, 0)
            },
            &p,
            1e-6,
        );
        assert!(rel_error(&ad, &fd) <= FD_RTOL);
    }
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let mut g = rng(6);
    let p = uniform(&mut g, 54, -0.8, 0.8);
    let x1 = Tensor::new(3, 4, uniform(&mut g, 12, -1.0, 1.0)).unwrap();
    let x2 = Tensor::new(3, 4, uniform(&mut g, 12, -1.0, 1.0)).unwrap();
    let (t1, n1, l1) = three_layer(&p, &x1);
    let (t2, n2, l2) = three_layer(&p, &x2);
    let g1 = flat_grad(&t1, &n1, l1);
    let g2 = flat_grad(&t2, &n2, l2);

    // both losses on a single tape sharing the parameters
    let (mut tape, nodes, la) = three_layer(&p, &x1);
    let xn = tape.constant(x2.clone());
    let z1 = tape.matmul(nodes[0], xn).unwrap();
    let z1 = tape.add_column_bias(z1, nodes[1]).unwrap();
    let a1 = tape.sigmoid(z1).unwrap();
    let z2 = tape.matmul(nodes[2], a1).unwrap();
    let z2 = tape.add_column_bias(z2, nodes[3]).unwrap();
    let a2 = tape.power(z2, 3).unwrap();
    let z3 = tape.matmul(nodes[4], a2).unwrap();
    let z3 = tape.add_column_bias(z3, nodes[5]).unwrap();
    let lb = tape.sum_of_squares(z3).unwrap();
    let total = tape.add(la, lb).unwrap();
    let joint = flat_grad(&tape, &nodes, total);
    for i in 0..joint.len() {
        assert!((joint[i] - (g1[i] + g2[i])).abs() <= 1e-12 * (1.0 + joint[i].abs()));
    }
}

#[test]
fn taping_twice_is_bitwise_identical() {
    let mut g = rng(7);
    let p = uniform(&mut g, 54, -0.8, 0.8);
    let x = Tensor::new(3, 4, uniform(&mut g, 12, -1.0, 1.0)).unwrap();
    let (t1, n1, l1) = three_layer(&p, &x);
    let (t2, n2, l2) = three_layer(&p, &x);
    assert_eq!(t1.value(l1).get(0, 0).to_bits(), t2.value(l2).get(0, 0).to_bits());
    let a: Vec<u64> = flat_grad(&t1, &n1, l1).iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = flat_grad(&t2, &n2, l2).iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
}

#[test]
fn every_node_reachable_from_the_loss_gets_a_shaped_adjoint() {
    let p = uniform(&mut rng(8), 54, -0.8, 0.8);
    let x = Tensor::new(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let (tape, nodes, loss) = three_layer(&p, &x);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(loss).unwrap(), &Tensor::scalar(1.0));
    for id in tape.node_ids() {
        if let Some(g) = grads.get(id) {
            assert_eq!(g.shape(), tape.value(id).shape());
        }
    }
    for n in nodes {
        assert!(grads.get(n).is_some());
    }
}

#[test]
fn lorenz_jacobian_matches_finite_differences() {
    let p = Lorenz96Params::default();
    for seed in 0..5 {
        let u = sample_initial_conditions(&p, seed);
        let jac = jacobian(
            |tape, x| {
                let f = tape.constant(Tensor::scalar(p.f));
                record_lorenz96(tape, p.n, f, x)
            },
            &Tensor::column(&u),
        )
        .unwrap();
        for row in 0..8 {
            let fd = fd_gradient(|v| lorenz96_rhs(&p, v).unwrap()[row], &u, 1e-6);
            let ad: Vec<f64> = (0..8).map(|c| jac.get(row, c)).collect();
            assert!(rel_error(&ad, &fd) <= FD_RTOL);
        }
    }
}

#[test]
fn kernel_jacobian_matches_finite_differences() {
    let k = ParametricPolyKernel::random(4, 6, 3, 3, &mut rng(9)).unwrap();
    let x = vec![0.3, -0.7, 1.1, 0.2];
    let jac = jacobian(
        |tape, xn| {
            let p = k.bind(tape, &k.params())?;
            k.record(tape, &p, xn)
        },
        &Tensor::column(&x),
    )
    .unwrap();
    assert_eq!(jac.shape(), (3, 4));
    for row in 0..3 {
        let fd = fd_gradient(|v| k.forward_vec(v).unwrap()[row], &x, 1e-6);
        let ad: Vec<f64> = (0..4).map(|c| jac.get(row, c)).collect();
        assert!(rel_error(&ad, &fd) <= FD_RTOL);
    }
}

#[test]
fn jacobian_rejects_non_finite_output() {
    let err = jacobian(|tape, x| tape.power(x, 2), &Tensor::column(&[1e200]));
    assert!(matches!(err, Err(odekernel::Error::Numeric(_))));
}
