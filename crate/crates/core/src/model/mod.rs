//! Hard-parameter-sharing multi-task network.
//!
//! A shared trunk maps the input to the hidden representation `z`; one
//! primary head turns `z` into class distributions and each auxiliary head
//! turns the same `z` into independent multi-label probabilities.

mod snapshot;

pub use snapshot::{read_snapshot, write_snapshot, Provenance, SnapshotEntry, WeightSnapshot};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(width: usize, activation: Activation) -> Self {
        Self { width, activation }
    }

    pub fn linear(width: usize) -> Self {
        Self::new(width, Activation::Identity)
    }
}

/// What the primary head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimaryOutput {
    /// One class distribution per example.
    Classes { n_classes: usize },
    /// One class distribution per cell, `cells` cells per example.
    PerCell { cells: usize, n_classes: usize },
}

impl PrimaryOutput {
    pub fn n_classes(&self) -> usize {
        match *self {
            PrimaryOutput::Classes { n_classes } | PrimaryOutput::PerCell { n_classes, .. } => n_classes,
        }
    }

    pub fn cells(&self) -> usize {
        match *self {
            PrimaryOutput::Classes { .. } => 1,
            PrimaryOutput::PerCell { cells, .. } => cells,
        }
    }

    pub fn width(&self) -> usize {
        self.cells() * self.n_classes()
    }
}

/// Layer sizes of the trunk and every head. Head layer lists end in the
/// logit layer; softmax / sigmoid are applied on top of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub input_dim: usize,
    pub trunk: Vec<LayerSpec>,
    pub primary: Vec<LayerSpec>,
    pub primary_output: PrimaryOutput,
    pub aux: Vec<Vec<LayerSpec>>,
}

impl Topology {
    /// `input -> 32 -> 16` tanh trunk, linear heads.
    pub fn toy(input_dim: usize, primary_output: PrimaryOutput, aux_widths: &[usize]) -> Self {
        Self::with_trunk(input_dim, &[32, 16], primary_output, aux_widths)
    }

    /// Tanh trunk of the given widths with single-layer linear heads.
    pub fn with_trunk(input_dim: usize, trunk: &[usize], primary_output: PrimaryOutput, aux_widths: &[usize]) -> Self {
        Self {
            input_dim,
            trunk: trunk.iter().map(|&w| LayerSpec::new(w, Activation::Tanh)).collect(),
            primary: vec![LayerSpec::linear(primary_output.width())],
            primary_output,
            aux: aux_widths.iter().map(|&w| vec![LayerSpec::linear(w)]).collect(),
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.trunk.last().map_or(self.input_dim, |l| l.width)
    }

    pub fn aux_width(&self, head: usize) -> Option<usize> {
        self.aux.get(head).and_then(|h| h.last()).map(|l| l.width)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Topology(msg));
        if self.input_dim == 0 {
            return bad("input width must be positive".into());
        }
        if self.trunk.is_empty() {
            return bad("trunk needs at least one layer".into());
        }
        let all = self.trunk.iter().chain(&self.primary).chain(self.aux.iter().flatten());
        if all.clone().any(|l| l.width == 0) {
            return bad("layer widths must be positive".into());
        }
        match self.primary.last() {
            None => return bad("primary head needs at least one layer".into()),
            Some(l) if l.width != self.primary_output.width() => {
                return bad(format!(
                    "primary head emits {} values but the output kind needs {}",
                    l.width,
                    self.primary_output.width()
                ))
            }
            Some(l) if l.activation != Activation::Identity => {
                return bad("primary head must end in a linear logit layer".into())
            }
            _ => {}
        }
        for (h, head) in self.aux.iter().enumerate() {
            match head.last() {
                None => return bad(format!("auxiliary head {h} has no layers")),
                Some(l) if l.activation != Activation::Identity => {
                    return bad(format!("auxiliary head {h} must end in a linear logit layer"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Human-readable one-line summary, used in file headers.
    pub fn describe(&self) -> String {
        let widths = |ls: &[LayerSpec]| ls.iter().map(|l| l.width.to_string()).collect::<Vec<_>>().join("-");
        let aux: Vec<String> = self.aux.iter().map(|h| widths(h)).collect();
        format!(
            "in={} trunk={} primary={} ({:?}) aux=[{}]",
            self.input_dim,
            widths(&self.trunk),
            widths(&self.primary),
            self.primary_output,
            aux.join(",")
        )
    }
}

/// Which of the three weight sets a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Trunk,
    Primary,
    Aux(usize),
}

/// Fully connected layer `act(x W + b)`; `W` is `in x out`, `b` is `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Dense {
    fn init(fan_in: usize, spec: LayerSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<_>>();
        let weight = Tensor::param(vec![fan_in, spec.width], draw(fan_in * spec.width))?;
        let bias = Tensor::param(vec![1, spec.width], draw(spec.width))?;
        Ok(Self {
            weight,
            bias,
            activation: spec.activation,
        })
    }

    fn zeros(fan_in: usize, spec: LayerSpec) -> Result<Self> {
        Ok(Self {
            weight: Tensor::zeros(vec![fan_in, spec.width])?.with_requires_grad(true),
            bias: Tensor::zeros(vec![1, spec.width])?.with_requires_grad(true),
            activation: spec.activation,
        })
    }

    fn record(&self, tape: &mut Tape, input: Var, bindings: &mut Vec<Var>) -> Result<Var> {
        let w = tape.leaf(self.weight.clone());
        let b = tape.leaf(self.bias.clone());
        bindings.push(w);
        bindings.push(b);
        let xw = tape.matmul(input, w)?;
        let pre = tape.add_row(xw, b)?;
        Ok(match self.activation {
            Activation::Identity => pre,
            Activation::Tanh => tape.tanh(pre)?,
            Activation::Relu => tape.relu(pre)?,
            Activation::Sigmoid => tape.sigmoid(pre)?,
        })
    }
}

/// Borrowed view of one named parameter.
#[derive(Debug, Clone, Copy)]
pub struct ParamRef<'a> {
    pub name: &'a str,
    pub group: ParamGroup,
    pub tensor: &'a Tensor,
}

/// Variables produced by recording a forward pass on a tape.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub z: Var,
    /// Primary logits, one row per class distribution (`n * cells` rows).
    pub primary_logits: Var,
    pub aux_logits: Vec<Var>,
    pub aux_probs: Vec<Var>,
    /// Leaf variables in [`MtlNetwork::params`] order.
    pub bindings: Vec<Var>,
}

/// Plain-value forward outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub z: Tensor,
    /// Row-stochastic primary probabilities, `n * cells` rows of `n_classes`.
    pub primary: Tensor,
    /// Sigmoid probabilities per auxiliary head, `n x k_h`.
    pub aux: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlNetwork {
    topology: Topology,
    trunk: Vec<Dense>,
    primary: Vec<Dense>,
    aux: Vec<Vec<Dense>>,
    names: Vec<(String, ParamGroup)>,
}

impl MtlNetwork {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialisation from `seed`.
    pub fn new(topology: Topology, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(topology, |fan_in, spec| Dense::init(fan_in, spec, &mut rng))
    }

    /// Every weight and bias zero.
    pub fn zeros(topology: Topology) -> Result<Self> {
        Self::build(topology, Dense::zeros)
    }

    fn build(topology: Topology, mut make: impl FnMut(usize, LayerSpec) -> Result<Dense>) -> Result<Self> {
        topology.validate()?;
        let mut stack = |fan_in: usize, specs: &[LayerSpec]| -> Result<Vec<Dense>> {
            let mut layers = Vec::with_capacity(specs.len());
            let mut width = fan_in;
            for spec in specs {
                layers.push(make(width, *spec)?);
                width = spec.width;
            }
            Ok(layers)
        };
        let hidden = topology.hidden_width();
        let trunk = stack(topology.input_dim, &topology.trunk)?;
        let primary = stack(hidden, &topology.primary)?;
        let aux = topology
            .aux
            .iter()
            .map(|h| stack(hidden, h))
            .collect::<Result<Vec<_>>>()?;

        let mut names = Vec::new();
        let mut name_group = |prefix: &str, group: ParamGroup, n: usize| {
            for i in 0..n {
                names.push((format!("{prefix}.{i}.weight"), group));
                names.push((format!("{prefix}.{i}.bias"), group));
            }
        };
        name_group("trunk", ParamGroup::Trunk, trunk.len());
        name_group("primary", ParamGroup::Primary, primary.len());
        for (h, head) in aux.iter().enumerate() {
            name_group(&format!("aux{h}"), ParamGroup::Aux(h), head.len());
        }
        Ok(Self {
            topology,
            trunk,
            primary,
            aux,
            names,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn n_aux(&self) -> usize {
        self.aux.len()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain(&self.primary).chain(self.aux.iter().flatten())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk
            .iter_mut()
            .chain(self.primary.iter_mut())
            .chain(self.aux.iter_mut().flatten())
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers().flat_map(|l| [&l.weight, &l.bias])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// All parameters in a fixed order: trunk, primary head, auxiliary heads.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        self.names
            .iter()
            .zip(self.tensors())
            .map(|((name, group), tensor)| ParamRef {
                name,
                group: *group,
                tensor,
            })
            .collect()
    }

    /// Mutable parameters, same order as [`MtlNetwork::params`].
    pub fn params_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        let groups: Vec<ParamGroup> = self.names.iter().map(|(_, g)| *g).collect();
        groups.into_iter().zip(self.tensors_mut()).collect()
    }

    /// Mutable parameters belonging to any of `groups`.
    pub fn group_params_mut(&mut self, groups: &[ParamGroup]) -> Vec<&mut Tensor> {
        self.params_mut()
            .into_iter()
            .filter(|(g, _)| groups.contains(g))
            .map(|(_, t)| t)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params().into_iter().find(|p| p.name == name).map(|p| p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let idx = self.names.iter().position(|(n, _)| n == name)?;
        self.tensors_mut().nth(idx)
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().for_each(Tensor::zero_grad);
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.dims2()?;
        if d != self.topology.input_dim || x.shape().len() != 2 {
            return Err(Error::Width {
                expected: self.topology.input_dim,
                got: d,
            });
        }
        Ok(())
    }

    /// Records the forward pass for a batch `x` (`n x input_dim`) on `tape`.
    pub fn record(&self, tape: &mut Tape, x: &Tensor) -> Result<Recorded> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let mut bindings = Vec::with_capacity(self.names.len());
        let mut h = tape.constant(x.clone());
        for layer in &self.trunk {
            h = layer.record(tape, h, &mut bindings)?;
        }
        let z = h;

        let mut p = z;
        for layer in &self.primary {
            p = layer.record(tape, p, &mut bindings)?;
        }
        let out = self.topology.primary_output;
        let primary_logits = match out {
            PrimaryOutput::Classes { .. } => p,
            PrimaryOutput::PerCell { cells, n_classes } => tape.reshape(p, vec![n * cells, n_classes])?,
        };

        let mut aux_logits = Vec::with_capacity(self.aux.len());
        let mut aux_probs = Vec::with_capacity(self.aux.len());
        for head in &self.aux {
            let mut a = z;
            for layer in head {
                a = layer.record(tape, a, &mut bindings)?;
            }
            aux_logits.push(a);
            aux_probs.push(tape.sigmoid(a)?);
        }
        Ok(Recorded {
            z,
            primary_logits,
            aux_logits,
            aux_probs,
            bindings,
        })
    }

    /// Forward pass without keeping the tape.
    pub fn forward(&self, x: &Tensor) -> Result<Outputs> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, x)?;
        let probs = tape.softmax_rows(rec.primary_logits)?;
        Ok(Outputs {
            z: detach(tape.value(rec.z)),
            primary: detach(tape.value(probs)),
            aux: rec.aux_probs.iter().map(|v| detach(tape.value(*v))).collect(),
        })
    }

    /// Adds the gradients held on `tape` for `bindings` into the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape, bindings: &[Var]) -> Result<()> {
        if bindings.len() != self.names.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter bindings, got {}",
                self.names.len(),
                bindings.len()
            )));
        }
        for (tensor, var) in self.tensors_mut().zip(bindings) {
            match tape.grad(*var) {
                Some(g) => tensor.accumulate_grad(g)?,
                None => tensor.accumulate_grad(&vec![0.0; tensor.numel()])?,
            }
        }
        Ok(())
    }

    /// Deep copy of every parameter.
    pub fn snapshot(&self, provenance: Provenance) -> WeightSnapshot {
        let entries = self
            .params()
            .into_iter()
            .map(|p| SnapshotEntry {
                name: p.name.to_string(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
            })
            .collect();
        WeightSnapshot::new(entries, provenance)
    }

    /// Copies the snapshot back into the network and zeroes every gradient.
    pub fn restore(&mut self, snap: &WeightSnapshot) -> Result<()> {
        self.check_snapshot(snap)?;
        for (tensor, entry) in self.tensors_mut().zip(snap.entries()) {
            tensor.data_mut().copy_from_slice(&entry.data);
            tensor.zero_grad();
        }
        Ok(())
    }

    /// Fails unless `snap` holds exactly this network's parameter names and shapes.
    pub fn check_snapshot(&self, snap: &WeightSnapshot) -> Result<()> {
        let entries = snap.entries();
        if entries.len() != self.names.len() {
            return Err(Error::Integrity(format!(
                "snapshot has {} parameters, network has {}",
                entries.len(),
                self.names.len()
            )));
        }
        for (p, e) in self.params().iter().zip(entries) {
            if p.name != e.name {
                return Err(Error::Integrity(format!(
                    "parameter name mismatch: {} vs {}",
                    p.name, e.name
                )));
            }
            if p.tensor.shape() != e.shape.as_slice() {
                return Err(Error::Integrity(format!(
                    "{}: shape {:?} vs snapshot {:?}",
                    p.name,
                    p.tensor.shape(),
                    e.shape
                )));
            }
        }
        Ok(())
    }
}

fn detach(t: &Tensor) -> Tensor {
    t.clone().with_requires_grad(false)
}
