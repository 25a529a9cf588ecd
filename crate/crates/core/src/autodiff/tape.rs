use super::kernel::{gemm, Transpose};
use super::{AutodiffError, Tensor};

/// Lower clamp for probabilities fed to logarithms; the upper clamp is `1 - PROB_EPS`.
pub const PROB_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
    Log,
    Exp,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BinaryCrossEntropy {
        probs: Var,
        targets: Vec<f64>,
    },
    SquaredDistance {
        input: Var,
        anchor: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Wengert list of recorded operations.
///
/// Every operation appends exactly one node whose inputs were recorded before
/// it, so the node order is a topological order and [`Tape::backward`] simply
/// walks it in reverse.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether a
    /// gradient is accumulated for it.
    ///
    /// Any gradient the tensor already carries is dropped; gradients on a
    /// tape only ever come from its own backward passes.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.clear_grad();
        self.push(tensor, Op::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Scalar value of `v`.
    pub fn item(&self, v: Var) -> Result<f64, AutodiffError> {
        self.value(v).item()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<(), AutodiffError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownVar(v.0))
        }
    }

    fn needs_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].value.requires_grad())
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let requires_grad = self.needs_grad(inputs);
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        Ok(self.push(value, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if k != k2 || av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), Transpose::No, bv.data(), Transpose::No, &mut out);
        self.record(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, args: &[Var]) -> Result<Var, AutodiffError> {
        let arity = match op {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(AutodiffError::Arity {
                op: format!("{op:?}"),
                expected: arity,
                got: args.len(),
            });
        }
        match op {
            ElementwiseOp::Add => self.add(args[0], args[1]),
            ElementwiseOp::Sub => self.sub(args[0], args[1]),
            ElementwiseOp::Mul => self.mul(args[0], args[1]),
            ElementwiseOp::Relu => self.relu(args[0]),
            ElementwiseOp::Sigmoid => self.sigmoid(args[0]),
            ElementwiseOp::Tanh => self.tanh(args[0]),
            ElementwiseOp::Log => self.log(args[0]),
            ElementwiseOp::Exp => self.exp(args[0]),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = av.shape().to_vec();
        self.record(shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a row vector (`[n]` or `[1, n]`) to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        self.check(a)?;
        self.check(row)?;
        let (av, rv) = (self.value(a), self.value(row));
        let (m, n) = av.dims2()?;
        let (rm, rn) = rv.dims2()?;
        if rm != 1 || rn != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                left: av.shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        let bias = rv.data();
        let mut data = av.data().to_vec();
        for r in 0..m {
            for (x, b) in data[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *x += b;
            }
        }
        let shape = av.shape().to_vec();
        self.record(shape, data, Op::AddRow(a, row), &[a, row])
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let av = self.value(a);
        let data = av.data().iter().map(|x| f(*x)).collect();
        let shape = av.shape().to_vec();
        self.record(shape, data, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check(a)?;
        if let Some(bad) = self.value(a).data().iter().find(|x| x.is_nan() || **x <= 0.0) {
            return Err(AutodiffError::Domain { op: "log", value: *bad });
        }
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AutodiffError> {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let s = self.value(a).data().iter().sum();
        self.record(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        self.record(vec![1], vec![s], Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let data = self.value(a).data().to_vec();
        self.record(shape, data, Op::Reshape(a), &[a])
    }

    /// Row-wise softmax of an `m x n` matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let av = self.value(a);
        let (m, n) = av.dims2()?;
        let mut data = av.data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut data[r * n..(r + 1) * n]);
        }
        let shape = av.shape().to_vec();
        self.record(shape, data, Op::SoftmaxRows(a), &[a])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        self.check(logits)?;
        let lv = self.value(logits);
        let (m, c) = lv.dims2()?;
        if targets.len() != m {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(AutodiffError::IndexOutOfRange { index: t, bound: c });
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv.data()[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        let loss = total / m as f64;
        self.record(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean of `-[t ln p + (1 - t) ln(1 - p)]` with `p` clamped to
    /// `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[f64]) -> Result<Var, AutodiffError> {
        self.check(probs)?;
        let pv = self.value(probs);
        if targets.len() != pv.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "binary_cross_entropy",
                left: pv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(AutodiffError::Domain {
                op: "binary_cross_entropy target",
                value: *bad,
            });
        }
        let n = targets.len() as f64;
        let total: f64 = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(p, t)| {
                let p = clamp_prob(*p);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        self.record(
            vec![1],
            vec![total / n],
            Op::BinaryCrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
            &[probs],
        )
    }

    /// `sum((a - anchor)^2)` against a constant anchor.
    pub fn squared_distance(&mut self, a: Var, anchor: &[f64]) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let av = self.value(a);
        if anchor.len() != av.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "squared_distance",
                left: av.shape().to_vec(),
                right: vec![anchor.len()],
            });
        }
        let s = av.data().iter().zip(anchor).map(|(x, y)| (x - y) * (x - y)).sum();
        self.record(
            vec![1],
            vec![s],
            Op::SquaredDistance {
                input: a,
                anchor: anchor.to_vec(),
            },
            &[a],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Adjoints are recomputed from scratch on every call and then added into
    /// the gradient accumulator of each node that requires a gradient, so
    /// repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        self.check(loss)?;
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(AutodiffError::NotScalar(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if node.value.requires_grad() {
                self.propagate(node, &g, &mut adj)?;
            }
            adj[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(adj) {
            if let Some(g) = g {
                node.value.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<(), AutodiffError> {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                if av.requires_grad() {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, Transpose::No, bv.data(), Transpose::Yes, &mut da);
                    add_into(adj, *a, &da);
                }
                if bv.requires_grad() {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), Transpose::Yes, g, Transpose::No, &mut db);
                    add_into(adj, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.pass(adj, *a, g.to_vec());
                self.pass(adj, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.pass(adj, *a, g.to_vec());
                self.pass(adj, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.pass(adj, *a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                self.pass(adj, *b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::AddRow(a, row) => {
                self.pass(adj, *a, g.to_vec());
                if self.value(*row).requires_grad() {
                    let n = self.value(*row).numel();
                    let mut db = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        for (d, x) in db.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    add_into(adj, *row, &db);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.pass(
                    adj,
                    *a,
                    g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                );
            }
            Op::Sigmoid(a) => {
                self.pass(adj, *a, g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            Op::Tanh(a) => {
                self.pass(adj, *a, g.iter().zip(out).map(|(g, t)| g * (1.0 - t * t)).collect());
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.pass(adj, *a, g.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::Exp(a) => {
                self.pass(adj, *a, g.iter().zip(out).map(|(g, e)| g * e).collect());
            }
            Op::Scale(a, s) => {
                self.pass(adj, *a, g.iter().map(|g| g * s).collect());
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.pass(adj, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.pass(adj, *a, vec![g[0] / n as f64; n]);
            }
            Op::Reshape(a) => {
                self.pass(adj, *a, g.to_vec());
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = node.value.dims2()?;
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let s = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = s.iter().zip(gr).map(|(s, g)| s * g).sum();
                    for j in 0..n {
                        d[r * n + j] = s[j] * (gr[j] - dot);
                    }
                }
                self.pass(adj, *a, d);
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let m = targets.len();
                let c = probs.len() / m;
                let scale = g[0] / m as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= scale;
                }
                self.pass(adj, *logits, d);
            }
            Op::BinaryCrossEntropy { probs, targets } => {
                let p = self.value(*probs).data();
                let scale = g[0] / targets.len() as f64;
                let d = p
                    .iter()
                    .zip(targets)
                    .map(|(p, t)| {
                        if *p < PROB_EPS || *p > 1.0 - PROB_EPS {
                            0.0
                        } else {
                            scale * (p - t) / (p * (1.0 - p))
                        }
                    })
                    .collect();
                self.pass(adj, *probs, d);
            }
            Op::SquaredDistance { input, anchor } => {
                let x = self.value(*input).data();
                self.pass(
                    adj,
                    *input,
                    x.iter().zip(anchor).map(|(x, y)| 2.0 * g[0] * (x - y)).collect(),
                );
            }
        }
        Ok(())
    }

    fn pass(&self, adj: &mut [Option<Vec<f64>>], target: Var, delta: Vec<f64>) {
        if !self.value(target).requires_grad() {
            return;
        }
        match &mut adj[target.0] {
            Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }
}

fn add_into(adj: &mut [Option<Vec<f64>>], target: Var, delta: &[f64]) {
    match &mut adj[target.0] {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Max-subtracted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
