//! Joint training of the primary and auxiliary tasks by plain SGD.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{MtlNetwork, Provenance, Recorded, WeightSnapshot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the summed auxiliary losses.
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Leading epochs (counted within `epochs`) trained on the primary loss alone.
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lr: 0.1,
            epochs: 60,
            batch_size: 32,
            seed: 0,
            shuffle: true,
            pretrain_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be a finite value >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One training or test item: input, primary target(s), one binary target
/// vector per auxiliary head.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    /// One class index, or one per cell for per-cell outputs.
    pub y: Vec<usize>,
    pub aux: Vec<Vec<f64>>,
}

/// Checks an example against the network's input and head shapes.
pub fn check_example(net: &MtlNetwork, ex: &Example) -> Result<()> {
    let top = net.topology();
    if ex.x.len() != top.input_dim {
        return Err(Error::Width {
            expected: top.input_dim,
            got: ex.x.len(),
        });
    }
    let out = top.primary_output;
    if ex.y.len() != out.cells() {
        return Err(Error::Contract(format!(
            "primary target has {} entries, network predicts {}",
            ex.y.len(),
            out.cells()
        )));
    }
    if let Some(&bad) = ex.y.iter().find(|&&c| c >= out.n_classes()) {
        return Err(Error::Contract(format!(
            "class {bad} out of range for {} classes",
            out.n_classes()
        )));
    }
    if ex.aux.len() != net.n_aux() {
        return Err(Error::Contract(format!(
            "example has {} auxiliary targets, network has {} heads",
            ex.aux.len(),
            net.n_aux()
        )));
    }
    for (h, a) in ex.aux.iter().enumerate() {
        let width = top.aux_width(h).unwrap_or(0);
        if a.len() != width {
            return Err(Error::Contract(format!(
                "auxiliary target {h} has width {}, head emits {width}",
                a.len()
            )));
        }
    }
    Ok(())
}

/// Stacks the inputs of `batch` into an `n x d` matrix.
pub fn stack_inputs<'a>(batch: impl IntoIterator<Item = &'a Example>) -> Result<Tensor> {
    let mut rows = 0;
    let mut data = Vec::new();
    for ex in batch {
        data.extend_from_slice(&ex.x);
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let d = data.len() / rows;
    Ok(Tensor::new(vec![rows, d], data)?)
}

/// Recorded total loss together with its components.
#[derive(Debug)]
pub struct LossGraph {
    pub tape: Tape,
    pub recorded: Recorded,
    pub total: Var,
    pub primary: Var,
    pub aux: Vec<Var>,
}

impl LossGraph {
    pub fn value(&self, v: Var) -> f64 {
        self.tape.value(v).data()[0]
    }
}

/// `L_P + lambda * sum_h L_A,h`, each term a per-batch mean.
pub fn total_loss(net: &MtlNetwork, batch: &[Example], lambda: f64) -> Result<LossGraph> {
    let refs: Vec<&Example> = batch.iter().collect();
    loss_graph(net, &refs, lambda)
}

fn loss_graph(net: &MtlNetwork, batch: &[&Example], lambda: f64) -> Result<LossGraph> {
    if batch.is_empty() {
        return Err(Error::Contract("total loss needs a nonempty batch".into()));
    }
    for ex in batch {
        check_example(net, ex)?;
    }
    let x = stack_inputs(batch.iter().copied())?;
    let mut tape = Tape::new();
    let recorded = net.record(&mut tape, &x)?;

    let y: Vec<usize> = batch.iter().flat_map(|ex| ex.y.iter().copied()).collect();
    let primary = tape.softmax_cross_entropy(recorded.primary_logits, &y)?;
    ensure_finite(&tape, primary, "primary loss")?;

    let mut aux = Vec::with_capacity(net.n_aux());
    for (h, probs) in recorded.aux_probs.iter().enumerate() {
        let targets: Vec<f64> = batch.iter().flat_map(|ex| ex.aux[h].iter().copied()).collect();
        let loss = tape.binary_cross_entropy(*probs, &targets)?;
        ensure_finite(&tape, loss, &format!("auxiliary loss {h}"))?;
        aux.push(loss);
    }

    let mut total = primary;
    if let Some((first, rest)) = aux.split_first() {
        let mut sum = *first;
        for a in rest {
            sum = tape.add(sum, *a)?;
        }
        let weighted = tape.scale(sum, lambda)?;
        total = tape.add(primary, weighted)?;
    }
    ensure_finite(&tape, total, "total loss")?;
    Ok(LossGraph {
        tape,
        recorded,
        total,
        primary,
        aux,
    })
}

fn ensure_finite(tape: &Tape, v: Var, term: &str) -> Result<()> {
    if tape.value(v).data().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { term: term.to_string() })
    }
}

/// `w <- w - lr * grad` for every tensor. Gradients are left in place.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::Contract(format!("parameter {i} has no gradient")));
        }
    }
    for p in params.iter_mut() {
        let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_default();
        for (w, g) in p.data_mut().iter_mut().zip(&grad) {
            *w -= lr * g;
        }
    }
    Ok(())
}

/// Mean losses over one epoch, weighted by batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub primary: f64,
    pub aux: Vec<f64>,
}

/// Runs `epochs * ceil(m / batch_size)` SGD steps and returns the trained
/// weights' snapshot plus per-epoch history.
///
/// During the first `pretrain_epochs` epochs the auxiliary terms are
/// dropped from the objective; the history still reports
/// `primary + lambda * sum(aux)` with the configured `lambda`.
pub fn train(net: &mut MtlNetwork, data: &[Example], cfg: &TrainConfig) -> Result<(WeightSnapshot, Vec<EpochRecord>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    for ex in data {
        check_example(net, ex)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let lambda = if epoch < cfg.pretrain_epochs { 0.0 } else { cfg.lambda };
        let mut sums = (0.0, vec![0.0; net.n_aux()]);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let mut graph = loss_graph(net, &batch, lambda).map_err(|e| match e {
                Error::NonFinite { term } => Error::Diverged {
                    epoch,
                    step,
                    term,
                    value: f64::NAN,
                },
                other => other,
            })?;
            let w = batch.len() as f64;
            sums.0 += w * graph.value(graph.primary);
            for (s, a) in sums.1.iter_mut().zip(&graph.aux) {
                *s += w * graph.value(*a);
            }

            graph.tape.backward(graph.total)?;
            net.zero_grad();
            net.accumulate_grads(&graph.tape, &graph.recorded.bindings)?;
            let mut params: Vec<&mut Tensor> = net.params_mut().into_iter().map(|(_, t)| t).collect();
            sgd_step(&mut params, cfg.lr)?;
        }
        let m = data.len() as f64;
        let primary = sums.0 / m;
        let aux: Vec<f64> = sums.1.iter().map(|s| s / m).collect();
        let total = primary + cfg.lambda * aux.iter().sum::<f64>();
        if !total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: order.len().div_ceil(cfg.batch_size),
                term: "epoch loss".into(),
                value: total,
            });
        }
        history.push(EpochRecord {
            epoch,
            total,
            primary,
            aux,
        });
    }
    net.zero_grad();
    let snap = net.snapshot(Provenance {
        run_id: format!("seed-{}", cfg.seed),
        epoch: cfg.epochs,
    });
    Ok((snap, history))
}

/// Writes `epoch,total_loss,primary_loss,aux_loss_0,...`.
pub fn write_history_csv<W: Write>(mut w: W, history: &[EpochRecord], n_aux: usize) -> Result<()> {
    let mut header = String::from("epoch,total_loss,primary_loss");
    for h in 0..n_aux {
        header.push_str(&format!(",aux_loss_{h}"));
    }
    writeln!(w, "{header}")?;
    for r in history {
        let aux: String = r.aux.iter().map(|a| format!(",{a}")).collect();
        writeln!(w, "{},{},{}{}", r.epoch, r.total, r.primary, aux)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PrimaryOutput, Topology};

    fn toy_net(seed: u64) -> MtlNetwork {
        MtlNetwork::new(
            Topology::with_trunk(2, &[4], PrimaryOutput::Classes { n_classes: 2 }, &[2]),
            seed,
        )
        .unwrap()
    }

    fn toy_data() -> Vec<Example> {
        (0..12)
            .map(|i| {
                let a = i as f64 / 6.0 - 1.0;
                let b = ((i * 7) % 5) as f64 / 5.0 - 0.4;
                let y = usize::from(a + b > 0.0);
                Example {
                    x: vec![a, b],
                    y: vec![y],
                    aux: vec![vec![f64::from(u8::from(a > 0.0)), f64::from(u8::from(b > 0.0))]],
                }
            })
            .collect()
    }

    #[test]
    fn sgd_step_hand_case() {
        let mut w = Tensor::param(vec![1], vec![1.0]).unwrap();
        w.accumulate_grad(&[2.0]).unwrap();
        sgd_step(&mut [&mut w], 0.1).unwrap();
        assert!((w.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(w.grad().unwrap(), &[2.0]);
        sgd_step(&mut [&mut w], 0.0).unwrap();
        assert!((w.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_requires_grad() {
        let mut w = Tensor::param(vec![1], vec![1.0]).unwrap();
        assert!(matches!(sgd_step(&mut [&mut w], 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(w) = (w - 3)^2, gradient 2(w - 3); error shrinks by (1 - 2 lr) per step
        let mut w = Tensor::param(vec![1], vec![0.0]).unwrap();
        for _ in 0..100 {
            let mut tape = Tape::new();
            let v = tape.leaf(w.clone());
            let loss = tape.squared_distance(v, &[3.0]).unwrap();
            tape.backward(loss).unwrap();
            w.zero_grad();
            w.accumulate_grad(tape.grad(v).unwrap()).unwrap();
            sgd_step(&mut [&mut w], 0.1).unwrap();
        }
        let expected = 3.0 * (1.0 - 0.8f64.powi(100));
        assert!((w.data()[0] - 3.0).abs() < 1e-6);
        assert!((w.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_is_primary_loss() {
        let net = toy_net(1);
        let g = total_loss(&net, &toy_data(), 0.0).unwrap();
        assert_eq!(g.value(g.total), g.value(g.primary));
    }

    #[test]
    fn additivity_on_constructed_targets() {
        // zero network: uniform primary probs, every aux prob 1/2
        let top = Topology::with_trunk(1, &[2], PrimaryOutput::Classes { n_classes: 2 }, &[1]);
        let net = MtlNetwork::zeros(top).unwrap();
        let batch = vec![Example {
            x: vec![0.0],
            y: vec![0],
            aux: vec![vec![1.0]],
        }];
        let g = total_loss(&net, &batch, 1.0).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((g.value(g.primary) - ln2).abs() < 1e-15);
        assert!((g.value(g.total) - (g.value(g.primary) + g.value(g.aux[0]))).abs() < 1e-15);
        assert!((g.value(g.total) - 2.0 * ln2).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_and_bad_shapes_are_rejected() {
        let net = toy_net(1);
        assert!(total_loss(&net, &[], 1.0).is_err());
        let bad = vec![Example {
            x: vec![0.0; 3],
            y: vec![0],
            aux: vec![vec![0.0, 0.0]],
        }];
        assert!(matches!(total_loss(&net, &bad, 1.0), Err(Error::Width { .. })));
    }

    #[test]
    fn zero_epochs_leave_initial_weights() {
        let mut net = toy_net(4);
        let init = net.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (snap, hist) = train(&mut net, &toy_data(), &cfg).unwrap();
        assert!(hist.is_empty());
        assert!(snap.diff(&init).is_empty());
        assert_eq!(net, init);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 4,
            lr: 0.5,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut a = toy_net(2);
        let mut b = toy_net(2);
        let (sa, ha) = train(&mut a, &toy_data(), &cfg).unwrap();
        let (sb, hb) = train(&mut b, &toy_data(), &cfg).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(ha, hb);
        assert_eq!(ha.len(), 40);
        assert!(ha.iter().all(|r| r.total.is_finite()));
        assert!(ha.last().unwrap().total < ha[0].total);
    }

    #[test]
    fn divergence_reports_epoch_and_step() {
        let mut data = toy_data();
        data[5].x[0] = f64::NAN;
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            shuffle: false,
            ..TrainConfig::default()
        };
        let mut net = toy_net(2);
        let err = train(&mut net, &data, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 0, step: 1, .. }), "{err}");
    }

    #[test]
    fn history_csv_layout() {
        let hist = vec![EpochRecord {
            epoch: 0,
            total: 1.5,
            primary: 1.0,
            aux: vec![0.25, 0.25],
        }];
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &hist, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "epoch,total_loss,primary_loss,aux_loss_0,aux_loss_1\n0,1.5,1,0.25,0.25\n"
        );
    }
}
