//! Invariants of test-time adaptation.

mod common;

use common::*;
use evprop::adapt::{adapt, predict_with_evidence, test_loss, weight_deviation, AdaptConfig, Evidence, TestOptimizer};
use evprop::autodiff::Tensor;
use evprop::baselines::{evaluate_variants, EvalInstance, EvalSettings, Models, TagSet, Variant};
use evprop::model::ParamGroup;
use evprop::synthbench::MetricKind;
use proptest::prelude::*;

fn primary_params(net: &evprop::model::MtlNetwork) -> Vec<Vec<f64>> {
    net.params()
        .iter()
        .filter(|p| p.group == ParamGroup::Primary)
        .map(|p| p.tensor.data().to_vec())
        .collect()
}

fn instances(n: usize, seed: u64) -> Vec<EvalInstance> {
    toy_batch(n, seed)
        .into_iter()
        .enumerate()
        .map(|(id, ex)| EvalInstance {
            id,
            x: ex.x,
            y: ex.y,
            evidence: Evidence::single(0, ex.aux[0].clone()).unwrap(),
            tags: TagSet::all(2).unwrap(),
        })
        .collect()
}

fn settings(lr: f64, workers: usize) -> EvalSettings {
    EvalSettings {
        early_stop: AdaptConfig::early_stop(3, lr),
        two_norm: AdaptConfig::two_norm(4, lr, 1.0),
        kind: MetricKind::Cellwise,
        confidence_threshold: 0.0,
        workers,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn primary_head_never_moves(
        seed in 0u64..10_000,
        t in 0usize..6,
        lr in 1e-4f64..0.5,
        alpha in prop_oneof![Just(0.0), 0.0f64..100.0],
        adam in any::<bool>(),
    ) {
        let mut net = toy_net(seed);
        let snap = snapshot(&net);
        let before = primary_params(&net);
        let cfg = AdaptConfig {
            optimizer: if adam { TestOptimizer::Adam } else { TestOptimizer::Sgd },
            ..AdaptConfig::two_norm(t, lr, alpha)
        };
        let trace = adapt(&mut net, &[0.3, -0.8], &toy_evidence(seed), &snap, &cfg).unwrap();
        prop_assert_eq!(trace.evidence_loss.len(), t + 1);
        prop_assert_eq!(primary_params(&net), before);
    }

    /// One plain gradient step with a tiny rate does not raise the evidence loss.
    #[test]
    fn first_step_descends(seed in 0u64..10_000, x0 in -2.0f64..2.0, x1 in -2.0f64..2.0) {
        let mut net = toy_net(seed);
        let snap = snapshot(&net);
        let trace = adapt(&mut net, &[x0, x1], &toy_evidence(seed + 1), &snap, &AdaptConfig::early_stop(1, 1e-5)).unwrap();
        prop_assert!(trace.evidence_loss[1] <= trace.evidence_loss[0] + 1e-12);
    }
}

/// Final distance from the trained weights shrinks as the penalty grows.
#[test]
fn deviation_non_increasing_in_alpha() {
    for seed in 0..20u64 {
        let net0 = toy_net(seed);
        let snap = snapshot(&net0);
        let e = toy_evidence(seed + 7);
        let mut last = f64::INFINITY;
        for alpha in [0.0, 0.1, 1.0, 10.0, 1e3] {
            let mut net = net0.clone();
            adapt(
                &mut net,
                &[1.0, -0.5],
                &e,
                &snap,
                &AdaptConfig::two_norm(10, 0.2, alpha),
            )
            .unwrap();
            let d = weight_deviation(&net, &snap);
            assert!(d <= last + 1e-12, "seed {seed} alpha {alpha}: {d} > {last}");
            last = d;
        }
    }
}

/// An enormous penalty keeps the weights closer than no penalty at all, and
/// stays finite thanks to the proximal update.
#[test]
fn huge_penalty_dominates() {
    let net0 = toy_net(3);
    let snap = snapshot(&net0);
    let e = toy_evidence(4);
    let run = |alpha| {
        let mut net = net0.clone();
        adapt(&mut net, &[0.2, 0.9], &e, &snap, &AdaptConfig::two_norm(2, 7e-4, alpha)).unwrap();
        weight_deviation(&net, &snap)
    };
    let (free, pinned) = (run(0.0), run(1e9));
    assert!(pinned.is_finite());
    assert!(pinned < free, "{pinned} !< {free}");
}

#[test]
fn zero_iterations_reproduce_the_mtl_prediction() {
    let mut net = toy_net(8);
    let snap = snapshot(&net);
    let x = [0.4, 0.1];
    let base = net
        .forward(&Tensor::new(vec![1, 2], x.to_vec()).unwrap())
        .unwrap()
        .primary;
    let (probs, trace) =
        predict_with_evidence(&mut net, &x, &toy_evidence(2), &snap, &AdaptConfig::early_stop(0, 0.1)).unwrap();
    assert_eq!(probs, base);
    assert_eq!(trace.evidence_loss.len(), 1);
    assert!(snap.diff(&net).is_empty());
}

/// Early stopping ignores the penalty, so it must match a two-norm run with alpha = 0.
#[test]
fn early_stop_is_unpenalised() {
    let net0 = toy_net(12);
    let snap = snapshot(&net0);
    let e = toy_evidence(1);
    let mut a = net0.clone();
    let mut b = net0.clone();
    adapt(&mut a, &[0.5, 0.5], &e, &snap, &AdaptConfig::early_stop(4, 0.1)).unwrap();
    adapt(&mut b, &[0.5, 0.5], &e, &snap, &AdaptConfig::two_norm(4, 0.1, 0.0)).unwrap();
    assert!(a
        .params()
        .iter()
        .zip(b.params())
        .all(|(p, q)| p.tensor.data() == q.tensor.data()));
    // And the test objective itself reduces to the evidence term.
    let g = test_loss(&a, &[0.5, 0.5], &e, &snap, 0.0).unwrap();
    assert_eq!(g.total_value(), g.evidence_value());
}

/// Predictions do not depend on instance order or on the worker count.
#[test]
fn predictions_are_isolated_per_instance() {
    let net = toy_net(30);
    let snap = snapshot(&net);
    let models = Models {
        mtl: &net,
        snapshot: &snap,
        primary_only: None,
    };
    let forward = instances(60, 31);
    let mut reversed = forward.clone();
    reversed.reverse();
    let variants = [Variant::BpEs, Variant::BpL2, Variant::Mtl];
    let a = evaluate_variants(models, &forward, &variants, &settings(0.3, 1)).unwrap();
    let b = evaluate_variants(models, &reversed, &variants, &settings(0.3, 1)).unwrap();
    let c = evaluate_variants(models, &forward, &variants, &settings(0.3, 4)).unwrap();
    for ((ra, rb), rc) in a.iter().zip(&b).zip(&c) {
        assert_eq!(ra, rc);
        for inst in &ra.instances {
            let other = rb.instances.iter().find(|r| r.id == inst.id).unwrap();
            assert_eq!(inst, other);
        }
    }
}
