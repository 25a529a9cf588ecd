//! Finite-difference certification of the tape and of both training and
//! test-time objectives.
#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use evprop::adapt::test_loss;
use evprop::autodiff::{Tape, Tensor, Var};
use evprop::training::total_loss;
use proptest::prelude::*;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;
/// Relative error floor: gradients below this are compared absolutely.
const FLOOR: f64 = 1e-6;

/// Checks d(loss)/d(input i) of a tape-built scalar function against central differences.
fn check_op(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        (tape.value(out).item().unwrap(), tape, vars, out)
    };
    let (_, mut tape, vars, out) = eval(inputs);
    tape.backward(out).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().to_vec();
        for j in 0..inputs[i].numel() {
            let mut probe = inputs.to_vec();
            let w = probe[i].data()[j];
            probe[i].data_mut()[j] = w + H;
            let plus = eval(&probe).0;
            probe[i].data_mut()[j] = w - H;
            let minus = eval(&probe).0;
            let numeric = (plus - minus) / (2.0 * H);
            let e = rel_err(analytic[j], numeric, FLOOR);
            assert!(
                e < TOL,
                "input {i} entry {j}: analytic {} numeric {numeric} (rel {e:e})",
                analytic[j]
            );
        }
    }
}

fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::param(shape, data).unwrap()
}

#[test]
fn matmul_and_row_bias() {
    let a = param(vec![2, 3], vec![0.3, -1.2, 0.5, 0.8, 0.1, -0.4]);
    let b = param(vec![3, 2], vec![1.1, -0.7, 0.2, 0.9, -0.5, 0.4]);
    let bias = param(vec![1, 2], vec![0.05, -0.3]);
    check_op(&[a, b, bias], |t, v| {
        let m = t.matmul(v[0], v[1]).unwrap();
        let m = t.add_row(m, v[2]).unwrap();
        let sq = t.mul(m, m).unwrap();
        t.sum(sq).unwrap()
    });
}

#[test]
fn elementwise_nonlinearities() {
    let a = param(vec![2, 2], vec![0.3, -1.2, 0.7, 1.9]);
    check_op(std::slice::from_ref(&a), |t, v| {
        let y = t.tanh(v[0]).unwrap();
        let s = t.sigmoid(y).unwrap();
        let e = t.exp(s).unwrap();
        let l = t.log(e).unwrap();
        let r = t.relu(v[0]).unwrap();
        let both = t.sub(l, r).unwrap();
        let sc = t.scale(both, 1.7).unwrap();
        t.mean(sc).unwrap()
    });
}

#[test]
fn softmax_and_cross_entropy() {
    let logits = param(
        vec![3, 4],
        vec![0.2, -0.1, 1.3, 0.0, -0.8, 0.4, 0.4, 2.0, 1.0, 1.0, -1.0, 0.3],
    );
    check_op(std::slice::from_ref(&logits), |t, v| {
        t.softmax_cross_entropy(v[0], &[2, 3, 0]).unwrap()
    });
    let w = Tensor::new(vec![3, 4], (0..12).map(|i| f64::from(i) * 0.1 - 0.5).collect()).unwrap();
    check_op(&[logits], move |t, v| {
        let p = t.softmax_rows(v[0]).unwrap();
        let c = t.constant(w.clone());
        let m = t.mul(p, c).unwrap();
        t.sum(m).unwrap()
    });
}

#[test]
fn binary_cross_entropy_and_distance() {
    let z = param(vec![1, 3], vec![0.4, -1.1, 2.2]);
    check_op(std::slice::from_ref(&z), |t, v| {
        let p = t.sigmoid(v[0]).unwrap();
        t.binary_cross_entropy(p, &[1.0, 0.0, 0.0]).unwrap()
    });
    check_op(&[z], |t, v| {
        let r = t.reshape(v[0], vec![3, 1]).unwrap();
        t.squared_distance(r, &[0.1, 0.2, -0.3]).unwrap()
    });
}

/// Every parameter gradient of the training objective on the toy network.
#[test]
fn training_objective_matches_finite_differences() {
    for seed in 0..3u64 {
        let mut net = toy_net(seed);
        let batch = toy_batch(6, 100 + seed);
        let lambda = 0.7;
        let graph = {
            let mut g = total_loss(&net, &batch, lambda).unwrap();
            g.tape.backward(g.total).unwrap();
            g
        };
        let names: Vec<String> = net.params().iter().map(|p| p.name.to_string()).collect();
        for (k, name) in names.iter().enumerate() {
            let analytic = graph.tape.grad(graph.recorded.bindings[k]).unwrap().to_vec();
            for j in 0..analytic.len() {
                let w = net.param(name).unwrap().data()[j];
                let mut at = |v: f64| {
                    net.param_mut(name).unwrap().data_mut()[j] = v;
                    let g = total_loss(&net, &batch, lambda).unwrap();
                    g.value(g.total)
                };
                let numeric = (at(w + H) - at(w - H)) / (2.0 * H);
                net.param_mut(name).unwrap().data_mut()[j] = w;
                let e = rel_err(analytic[j], numeric, FLOOR);
                assert!(e < TOL, "seed {seed} {name}[{j}]: {} vs {numeric}", analytic[j]);
            }
        }
    }
}

/// Every parameter gradient of the test-time objective, with the network
/// moved off its snapshot so the penalty contributes.
#[test]
fn test_time_objective_matches_finite_differences() {
    for (seed, alpha) in [(0u64, 0.0), (1, 1.0), (2, 25.0)] {
        let mut net = toy_net(seed);
        let snap = snapshot(&net);
        jitter(&mut net, 0.05, seed + 50);
        let x = [0.6, -0.9];
        let e = toy_evidence(seed);
        let mut g = test_loss(&net, &x, &e, &snap, alpha).unwrap();
        g.tape.backward(g.total).unwrap();
        let names: Vec<String> = net.params().iter().map(|p| p.name.to_string()).collect();
        for (k, name) in names.iter().enumerate() {
            // The primary head does not enter the objective at all.
            let analytic = g
                .tape
                .grad(g.recorded.bindings[k])
                .map_or_else(|| vec![0.0; net.param(name).unwrap().numel()], <[f64]>::to_vec);
            for j in 0..analytic.len() {
                let w = net.param(name).unwrap().data()[j];
                let mut at = |v: f64| {
                    net.param_mut(name).unwrap().data_mut()[j] = v;
                    test_loss(&net, &x, &e, &snap, alpha).unwrap().total_value()
                };
                let numeric = (at(w + H) - at(w - H)) / (2.0 * H);
                net.param_mut(name).unwrap().data_mut()[j] = w;
                let err = rel_err(analytic[j], numeric, FLOOR);
                assert!(err < TOL, "alpha {alpha} {name}[{j}]: {} vs {numeric}", analytic[j]);
                if name.starts_with("primary") {
                    assert_eq!(analytic[j], 0.0);
                }
            }
        }
    }
}

/// Gradient of `a*f + b*g` equals `a*grad f + b*grad g`.
fn linear_combination_grads(x: &[f64], a: f64, b: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let input = Tensor::param(vec![2, 2], x.to_vec()).unwrap();
    let run = |ca: f64, cb: f64| {
        let mut t = Tape::new();
        let v = t.leaf(input.clone());
        let f = t.tanh(v).unwrap();
        let f = t.sum(f).unwrap();
        let sq = t.mul(v, v).unwrap();
        let g = t.mean(sq).unwrap();
        let f = t.scale(f, ca).unwrap();
        let g = t.scale(g, cb).unwrap();
        let out = t.add(f, g).unwrap();
        t.backward(out).unwrap();
        t.grad(v).unwrap().to_vec()
    };
    (run(a, b), run(a, 0.0), run(0.0, b))
}

proptest! {
    #[test]
    fn backward_is_linear(x in prop::collection::vec(-2.0f64..2.0, 4), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (both, fa, gb) = linear_combination_grads(&x, a, b);
        for i in 0..4 {
            prop_assert!((both[i] - (fa[i] + gb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_gradients_hold_at_random_points(seed in 0u64..1000) {
        let net = toy_net(seed);
        let batch = toy_batch(4, seed ^ 0xabc);
        let mut g = total_loss(&net, &batch, 1.0).unwrap();
        g.tape.backward(g.total).unwrap();
        // Spot-check the first trunk weight.
        let analytic = g.tape.grad(g.recorded.bindings[0]).unwrap()[0];
        let mut probe = net.clone();
        let w = probe.param("trunk.0.weight").unwrap().data()[0];
        let mut at = |v: f64| {
            probe.param_mut("trunk.0.weight").unwrap().data_mut()[0] = v;
            let g = total_loss(&probe, &batch, 1.0).unwrap();
            g.value(g.total)
        };
        let numeric = (at(w + H) - at(w - H)) / (2.0 * H);
        prop_assert!(rel_err(analytic, numeric, FLOOR) < TOL);
    }
}
