//! Helpers shared by the integration tests.
#![allow(dead_code)]

use evprop::adapt::Evidence;
use evprop::model::{MtlNetwork, PrimaryOutput, Provenance, Topology, WeightSnapshot};
use evprop::training::Example;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 2 inputs, one tanh layer of 4, a 2-class primary head and a 2-wide aux head.
pub fn toy_topology() -> Topology {
    Topology::with_trunk(2, &[4], PrimaryOutput::Classes { n_classes: 2 }, &[2])
}

pub fn toy_net(seed: u64) -> MtlNetwork {
    MtlNetwork::new(toy_topology(), seed).unwrap()
}

pub fn toy_batch(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Example {
            x: vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
            y: vec![rng.random_range(0..2)],
            aux: vec![vec![
                f64::from(rng.random_range(0..2u8)),
                f64::from(rng.random_range(0..2u8)),
            ]],
        })
        .collect()
}

pub fn toy_evidence(seed: u64) -> Evidence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Evidence::single(
        0,
        vec![f64::from(rng.random_range(0..2u8)), f64::from(rng.random_range(0..2u8))],
    )
    .unwrap()
}

pub fn snapshot(net: &MtlNetwork) -> WeightSnapshot {
    net.snapshot(Provenance::default())
}

/// Moves every parameter by a small random amount so the network sits away
/// from its snapshot.
pub fn jitter(net: &mut MtlNetwork, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in net.params_mut() {
        for w in t.data_mut() {
            *w += rng.random_range(-scale..scale);
        }
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Per-class IoU computed from explicit sets of `(instance, cell)` positions;
/// `None` where the class appears in neither prediction nor truth.
pub fn set_iou(preds: &[Vec<usize>], targets: &[Vec<usize>], n_classes: usize) -> Vec<Option<f64>> {
    use std::collections::BTreeSet;
    let positions = |labels: &[Vec<usize>], c: usize| -> BTreeSet<(usize, usize)> {
        labels
            .iter()
            .enumerate()
            .flat_map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .filter(move |(_, l)| **l == c)
                    .map(move |(j, _)| (i, j))
            })
            .collect()
    };
    (0..n_classes)
        .map(|c| {
            let p = positions(preds, c);
            let t = positions(targets, c);
            let union = p.union(&t).count();
            (union > 0).then(|| p.intersection(&t).count() as f64 / union as f64)
        })
        .collect()
}

/// Random label maps with a bias towards agreement, so IoUs are spread out.
pub fn random_label_case(seed: u64) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = rng.random_range(2..8);
    let n = rng.random_range(1..12);
    let cells = rng.random_range(1..30);
    let mut preds = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        // Some classes are left out entirely to exercise the exclusion rule.
        let used = rng.random_range(1..=n_classes);
        let t: Vec<usize> = (0..cells).map(|_| rng.random_range(0..used)).collect();
        let p: Vec<usize> = t
            .iter()
            .map(|&l| {
                if rng.random_bool(0.6) {
                    l
                } else {
                    rng.random_range(0..used)
                }
            })
            .collect();
        preds.push(p);
        targets.push(t);
    }
    (preds, targets, n_classes)
}
