//! Per-instance test-time weight re-adjustment.
//!
//! Given evidence `e` for one or more auxiliary heads, the trunk and the
//! evidenced heads are moved so that the auxiliary outputs agree with `e`;
//! the primary head never changes. The re-adjusted trunk then yields a new
//! primary prediction.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{MtlNetwork, ParamGroup, Recorded, WeightSnapshot};

/// Observed targets for a subset of the auxiliary heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    targets: Vec<(usize, Vec<f64>)>,
}

impl Evidence {
    pub fn new(mut targets: Vec<(usize, Vec<f64>)>) -> Result<Self> {
        targets.sort_by_key(|(h, _)| *h);
        if targets.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Evidence("duplicate head index".into()));
        }
        for (h, t) in &targets {
            if let Some(bad) = t.iter().find(|v| **v != 0.0 && **v != 1.0) {
                return Err(Error::Evidence(format!("head {h}: target {bad} is not binary")));
            }
        }
        Ok(Self { targets })
    }

    /// Evidence for a single head.
    pub fn single(head: usize, target: Vec<f64>) -> Result<Self> {
        Self::new(vec![(head, target)])
    }

    pub fn targets(&self) -> &[(usize, Vec<f64>)] {
        &self.targets
    }

    pub fn heads(&self) -> impl Iterator<Item = usize> + '_ {
        self.targets.iter().map(|(h, _)| *h)
    }

    pub fn target(&self, head: usize) -> Option<&[f64]> {
        self.targets.iter().find(|(h, _)| *h == head).map(|(_, t)| t.as_slice())
    }

    pub fn validate(&self, net: &MtlNetwork) -> Result<()> {
        for (h, t) in &self.targets {
            match net.topology().aux_width(*h) {
                None => {
                    return Err(Error::Evidence(format!(
                        "head {h} does not exist (network has {})",
                        net.n_aux()
                    )))
                }
                Some(w) if w != t.len() => {
                    return Err(Error::Evidence(format!(
                        "head {h} emits {w} values, evidence has {}",
                        t.len()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Parameter groups that adaptation may move: the trunk and every evidenced head.
    pub fn adapted_groups(&self) -> Vec<ParamGroup> {
        std::iter::once(ParamGroup::Trunk)
            .chain(self.heads().map(ParamGroup::Aux))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    /// Stop after the iteration budget; no penalty.
    EarlyStop,
    /// Penalise `alpha * ||W - W*||^2` over the adapted parameters.
    TwoNorm { alpha: f64 },
}

impl Regularizer {
    pub fn alpha(&self) -> f64 {
        match *self {
            Regularizer::EarlyStop => 0.0,
            Regularizer::TwoNorm { alpha } => alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestOptimizer {
    Sgd,
    /// Adaptive moments with the usual (0.9, 0.999, 1e-8) constants; state
    /// is created afresh for every instance.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub iterations: usize,
    pub lr: f64,
    pub regularizer: Regularizer,
    pub optimizer: TestOptimizer,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            lr: 7e-4,
            regularizer: Regularizer::EarlyStop,
            optimizer: TestOptimizer::Sgd,
        }
    }
}

impl AdaptConfig {
    pub fn early_stop(iterations: usize, lr: f64) -> Self {
        Self {
            iterations,
            lr,
            ..Self::default()
        }
    }

    pub fn two_norm(iterations: usize, lr: f64, alpha: f64) -> Self {
        Self {
            iterations,
            lr,
            regularizer: Regularizer::TwoNorm { alpha },
            optimizer: TestOptimizer::Sgd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("test-time lr must be positive, got {}", self.lr)));
        }
        let alpha = self.regularizer.alpha();
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        Ok(())
    }
}

/// Evidence loss and distance from the snapshot before adaptation and after
/// every iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdaptationTrace {
    pub evidence_loss: Vec<f64>,
    pub weight_deviation: Vec<f64>,
}

impl AdaptationTrace {
    pub fn final_deviation(&self) -> f64 {
        self.weight_deviation.last().copied().unwrap_or(0.0)
    }
}

/// Recorded test-time objective.
#[derive(Debug)]
pub struct TestLossGraph {
    pub tape: Tape,
    pub recorded: Recorded,
    /// Sum over evidenced heads of the mean binary cross-entropy.
    pub evidence: Var,
    pub total: Var,
}

impl TestLossGraph {
    pub fn evidence_value(&self) -> f64 {
        self.tape.value(self.evidence).data()[0]
    }

    pub fn total_value(&self) -> f64 {
        self.tape.value(self.total).data()[0]
    }
}

fn single_row(net: &MtlNetwork, x: &[f64]) -> Result<Tensor> {
    let d = net.topology().input_dim;
    if x.len() != d {
        return Err(Error::Width {
            expected: d,
            got: x.len(),
        });
    }
    Ok(Tensor::new(vec![1, d], x.to_vec())?)
}

/// Evidence loss plus `alpha` times the squared distance of the trunk and
/// evidenced heads from `snap`. The primary head takes no part.
pub fn test_loss(
    net: &MtlNetwork,
    x: &[f64],
    e: &Evidence,
    snap: &WeightSnapshot,
    alpha: f64,
) -> Result<TestLossGraph> {
    e.validate(net)?;
    net.check_snapshot(snap)?;
    let xt = single_row(net, x)?;
    let mut tape = Tape::new();
    let recorded = net.record(&mut tape, &xt)?;

    let mut evidence: Option<Var> = None;
    for (h, target) in e.targets() {
        let l = tape.binary_cross_entropy(recorded.aux_probs[*h], target)?;
        evidence = Some(match evidence {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let evidence = match evidence {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };

    let mut total = evidence;
    if alpha != 0.0 {
        let groups = e.adapted_groups();
        let mut penalty: Option<Var> = None;
        for ((p, var), entry) in net.params().iter().zip(&recorded.bindings).zip(snap.entries()) {
            if !groups.contains(&p.group) {
                continue;
            }
            let d = tape.squared_distance(*var, &entry.data)?;
            penalty = Some(match penalty {
                None => d,
                Some(acc) => tape.add(acc, d)?,
            });
        }
        if let Some(pen) = penalty {
            let scaled = tape.scale(pen, alpha)?;
            total = tape.add(evidence, scaled)?;
        }
    }
    Ok(TestLossGraph {
        tape,
        recorded,
        evidence,
        total,
    })
}

/// Frobenius distance from `snap` over the trunk and every auxiliary head.
pub fn weight_deviation(net: &MtlNetwork, snap: &WeightSnapshot) -> f64 {
    net.params()
        .iter()
        .zip(snap.entries())
        .filter(|(p, _)| p.group != ParamGroup::Primary)
        .flat_map(|(p, e)| p.tensor.data().iter().zip(&e.data))
        .map(|(w, s)| (w - s) * (w - s))
        .sum::<f64>()
        .sqrt()
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Runs `cfg.iterations` updates of the trunk and evidenced heads.
///
/// With SGD the evidence gradient step is followed by the exact proximal
/// map of the two-norm penalty,
/// `W <- (W - lr * grad + 2 lr alpha W*) / (1 + 2 lr alpha)`,
/// which minimises the same objective but stays stable for any `alpha`.
/// With Adam the penalty gradient `2 alpha (W - W*)` enters the moments.
pub fn adapt(
    net: &mut MtlNetwork,
    x: &[f64],
    e: &Evidence,
    snap: &WeightSnapshot,
    cfg: &AdaptConfig,
) -> Result<AdaptationTrace> {
    cfg.validate()?;
    e.validate(net)?;
    net.check_snapshot(snap)?;
    let alpha = cfg.regularizer.alpha();
    let groups = e.adapted_groups();
    let mask: Vec<bool> = net.params().iter().map(|p| groups.contains(&p.group)).collect();
    let mut trace = AdaptationTrace::default();
    let mut adam = AdamState {
        m: Vec::new(),
        v: Vec::new(),
        t: 0,
    };
    // SGD handles the penalty in closed form, so its graph carries evidence only.
    let graph_alpha = match cfg.optimizer {
        TestOptimizer::Sgd => 0.0,
        TestOptimizer::Adam => alpha,
    };

    for iteration in 0..=cfg.iterations {
        let mut graph = test_loss(net, x, e, snap, graph_alpha)?;
        let loss = graph.evidence_value();
        let deviation = weight_deviation(net, snap);
        trace.evidence_loss.push(loss);
        trace.weight_deviation.push(deviation);
        if !loss.is_finite() || !deviation.is_finite() || !graph.total_value().is_finite() {
            return Err(Error::Adaptation {
                iteration,
                reason: format!("non-finite evidence loss {loss} or deviation {deviation}"),
                trace: Box::new(trace),
            });
        }
        if iteration == cfg.iterations {
            break;
        }
        graph.tape.backward(graph.total)?;

        let bindings = &graph.recorded.bindings;
        let mut slot = 0;
        for (((_, tensor), var), (&adapt_it, anchor)) in net
            .params_mut()
            .into_iter()
            .zip(bindings)
            .zip(mask.iter().zip(snap.entries()))
        {
            if !adapt_it {
                continue;
            }
            let zeros;
            let grad = match graph.tape.grad(*var) {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; tensor.numel()];
                    &zeros
                }
            };
            match cfg.optimizer {
                TestOptimizer::Sgd => {
                    let shrink = 1.0 + 2.0 * cfg.lr * alpha;
                    for ((w, g), s) in tensor.data_mut().iter_mut().zip(grad).zip(&anchor.data) {
                        *w = (*w - cfg.lr * g + 2.0 * cfg.lr * alpha * s) / shrink;
                    }
                }
                TestOptimizer::Adam => {
                    if adam.m.len() <= slot {
                        adam.m.push(vec![0.0; grad.len()]);
                        adam.v.push(vec![0.0; grad.len()]);
                    }
                    let t = adam.t + 1;
                    let c1 = 1.0 - BETA1.powi(t);
                    let c2 = 1.0 - BETA2.powi(t);
                    let (m, v) = (&mut adam.m[slot], &mut adam.v[slot]);
                    for (i, w) in tensor.data_mut().iter_mut().enumerate() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                        *w -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
            slot += 1;
        }
        adam.t += 1;
        net.zero_grad();
    }
    Ok(trace)
}

/// Restores `snap`, adapts to `e`, and returns the primary probabilities of
/// the adapted network. The network is left at `snap` on return, error or not.
pub fn predict_with_evidence(
    net: &mut MtlNetwork,
    x: &[f64],
    e: &Evidence,
    snap: &WeightSnapshot,
    cfg: &AdaptConfig,
) -> Result<(Tensor, AdaptationTrace)> {
    net.restore(snap)?;
    let outcome = adapt(net, x, e, snap, cfg).and_then(|trace| {
        let out = net.forward(&single_row(net, x)?)?;
        Ok((out.primary, trace))
    });
    net.restore(snap)?;
    outcome
}

/// Writes `instance_id,iteration,evidence_loss,weight_deviation`.
pub fn write_trace_csv<W: Write>(mut w: W, traces: &[(usize, AdaptationTrace)]) -> Result<()> {
    writeln!(w, "instance_id,iteration,evidence_loss,weight_deviation")?;
    for (id, trace) in traces {
        for (i, (l, d)) in trace.evidence_loss.iter().zip(&trace.weight_deviation).enumerate() {
            writeln!(w, "{id},{i},{l},{d}")?;
        }
    }
    Ok(())
}
