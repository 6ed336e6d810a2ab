//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is built op by op; every op only refers to nodes created
//! before it, so node order is a topological order and the graph is acyclic
//! by construction. Values are computed lazily by [`Graph::eval`] and can be
//! recomputed after [`Graph::set_value`] changes a leaf, which is what the
//! finite-difference checker relies on.
//!
//! Stochastic ops (Gaussian noise, reparameterized sampling, dropout) carry
//! their own seed and regenerate the same draw on every evaluation.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `n×m` plus a `1×m` row broadcast over rows.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    ScaleRows(NodeId, Vec<f64>),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    LeakyRelu(NodeId, f64),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    ConcatRows(Vec<NodeId>),
    SelectRows(NodeId, Vec<usize>),
    Pick(NodeId, Vec<usize>),
    GaussianNoise {
        input: NodeId,
        sigma: f64,
        seed: u64,
    },
    Reparam {
        mean: NodeId,
        var: NodeId,
        seed: u64,
    },
    Dropout {
        input: NodeId,
        rate: f64,
        seed: u64,
    },
    StopGradient(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ScaleRows(..) => "scale_rows",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::ConcatRows(_) => "concat_rows",
            Op::SelectRows(..) => "select_rows",
            Op::Pick(..) => "pick",
            Op::GaussianNoise { .. } => "gaussian_noise",
            Op::Reparam { .. } => "reparam",
            Op::Dropout { .. } => "dropout",
            Op::StopGradient(_) => "stop_gradient",
        }
    }
}

/// Gradients of a scalar root with respect to every leaf of the graph.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<Tensor> {
        self.grads.remove(&leaf)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Option<Tensor>>,
    /// Nodes `[0, valid)` hold up-to-date values.
    valid: usize,
    /// Keep cached stop-gradient values when upstream leaves change.
    frozen_targets: bool,
}

fn standard_normals(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = rng_from(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn dropout_mask(seed: u64, n: usize, rate: f64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    let keep = 1.0 - rate;
    (0..n)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn row_softmax(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let cols = t.cols();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn row_log_softmax(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let cols = t.cols();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.ops.push(op);
        self.values.push(None);
        NodeId(self.ops.len() - 1)
    }

    /// A leaf holding `value`. Parameters, inputs and constants are all leaves.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf);
        self.values[id.0] = Some(value);
        if self.valid == id.0 {
            self.valid += 1;
        }
        id
    }

    pub fn set_value(&mut self, leaf: NodeId, value: Tensor) -> Result<()> {
        if !matches!(self.ops.get(leaf.0), Some(Op::Leaf)) {
            return Err(Error::usage("set_value on a non-leaf node"));
        }
        let old = self.values[leaf.0].as_ref().expect("leaf value");
        old.check_same(&value, "set_value")?;
        self.values[leaf.0] = Some(value);
        self.valid = self.valid.min(leaf.0 + 1);
        Ok(())
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.ops.get(id.0), Some(Op::Leaf))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(a, bias))
    }
    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale(a, s))
    }
    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        self.push(Op::AddScalar(a, s))
    }
    /// Multiplies row `i` by `weights[i]`.
    pub fn scale_rows(&mut self, a: NodeId, weights: Vec<f64>) -> NodeId {
        self.push(Op::ScaleRows(a, weights))
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sqrt(a))
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softplus(a))
    }
    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.push(Op::LeakyRelu(a, slope))
    }
    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }
    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }
    /// `n×m → n×1`.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSum(a))
    }
    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatRows(parts))
    }
    pub fn select_rows(&mut self, a: NodeId, rows: Vec<usize>) -> NodeId {
        self.push(Op::SelectRows(a, rows))
    }
    /// `out[i] = a[i, cols[i]]`, an `n×1` column.
    pub fn pick(&mut self, a: NodeId, cols: Vec<usize>) -> NodeId {
        self.push(Op::Pick(a, cols))
    }
    /// `a + sigma·ε`, ε standard normal drawn from `seed`.
    pub fn gaussian_noise(&mut self, input: NodeId, sigma: f64, seed: u64) -> NodeId {
        self.push(Op::GaussianNoise { input, sigma, seed })
    }
    /// `mean + sqrt(var)·ε`; the reparameterized Gaussian sample.
    pub fn reparam(&mut self, mean: NodeId, var: NodeId, seed: u64) -> NodeId {
        self.push(Op::Reparam { mean, var, seed })
    }
    /// Inverted binary dropout: kept entries are divided by `1 - rate`.
    pub fn dropout(&mut self, input: NodeId, rate: f64, seed: u64) -> NodeId {
        self.push(Op::Dropout { input, rate, seed })
    }
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        self.push(Op::StopGradient(a))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0]
            .as_ref()
            .expect("input evaluated before use")
    }

    /// Evaluates `root` and everything it may depend on.
    pub fn eval(&mut self, root: NodeId) -> Result<&Tensor> {
        if root.0 >= self.ops.len() {
            return Err(Error::usage("eval on a node from another graph"));
        }
        while self.valid <= root.0 {
            let i = self.valid;
            let keep = self.frozen_targets
                && matches!(self.ops[i], Op::StopGradient(_))
                && self.values[i].is_some();
            if matches!(self.ops[i], Op::Leaf) {
                if !self.val(NodeId(i)).is_finite() {
                    return Err(Error::NonFinite {
                        node: i,
                        op: "leaf",
                    });
                }
            } else if !keep {
                let v = self.compute(i)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        node: i,
                        op: self.ops[i].name(),
                    });
                }
                self.values[i] = Some(v);
            }
            self.valid += 1;
        }
        Ok(self.val(root))
    }

    /// While on, evaluated stop-gradient nodes keep their values when a leaf
    /// changes, so the graph computes the loss with its targets held fixed.
    pub fn freeze_stop_gradients(&mut self, on: bool) {
        self.frozen_targets = on;
    }

    pub fn eval_scalar(&mut self, root: NodeId) -> Result<f64> {
        self.eval(root)?.item()
    }

    /// Value of an already evaluated node.
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        if id.0 >= self.valid {
            return Err(Error::usage(format!(
                "node {} has not been evaluated",
                id.0
            )));
        }
        Ok(self.val(id))
    }

    fn compute(&self, i: usize) -> Result<Tensor> {
        let op = &self.ops[i];
        Ok(match op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                a.matmul(b)?
            }
            Op::Add(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                a.zip_map(b, |x, y| x + y)
                    .map_err(|_| mismatch("add", a, b))?
            }
            Op::Sub(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                a.zip_map(b, |x, y| x - y)
                    .map_err(|_| mismatch("sub", a, b))?
            }
            Op::Mul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                a.zip_map(b, |x, y| x * y)
                    .map_err(|_| mismatch("mul", a, b))?
            }
            Op::AddBias(a, bias) => {
                let (a, bias) = (self.val(*a), self.val(*bias));
                if bias.rows() != 1 || bias.cols() != a.cols() {
                    return Err(mismatch("add_bias", a, bias));
                }
                let mut out = a.clone();
                let cols = a.cols();
                for row in out.data_mut().chunks_mut(cols) {
                    for (o, b) in row.iter_mut().zip(bias.data()) {
                        *o += b;
                    }
                }
                out
            }
            Op::Scale(a, s) => self.val(*a).scale(*s),
            Op::AddScalar(a, s) => self.val(*a).map(|v| v + s),
            Op::ScaleRows(a, w) => {
                let a = self.val(*a);
                if w.len() != a.rows() {
                    return Err(Error::ShapeMismatch {
                        op: "scale_rows",
                        left: a.shape().to_vec(),
                        right: vec![w.len()],
                    });
                }
                let mut out = a.clone();
                for (r, &wr) in w.iter().enumerate() {
                    out.row_mut(r).iter_mut().for_each(|v| *v *= wr);
                }
                out
            }
            Op::Exp(a) => self.val(*a).map(f64::exp),
            Op::Log(a) => self.val(*a).map(f64::ln),
            Op::Sqrt(a) => self.val(*a).map(f64::sqrt),
            Op::Square(a) => self.val(*a).map(|v| v * v),
            Op::Sigmoid(a) => self.val(*a).map(sigmoid),
            Op::Softplus(a) => self.val(*a).map(softplus),
            Op::LeakyRelu(a, s) => self.val(*a).map(|v| if v > 0.0 { v } else { s * v }),
            Op::Softmax(a) => row_softmax(self.val(*a)),
            Op::LogSoftmax(a) => row_log_softmax(self.val(*a)),
            Op::Sum(a) => Tensor::scalar(self.val(*a).sum()),
            Op::Mean(a) => {
                let a = self.val(*a);
                if a.is_empty() {
                    return Err(Error::usage("mean of an empty tensor"));
                }
                Tensor::scalar(a.sum() / a.len() as f64)
            }
            Op::RowSum(a) => {
                let a = self.val(*a);
                let sums = (0..a.rows()).map(|r| a.row(r).iter().sum()).collect();
                Tensor::matrix(a.rows(), 1, sums)?
            }
            Op::ConcatRows(parts) => {
                let first = self.val(parts[0]);
                let cols = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let t = self.val(*p);
                    if t.cols() != cols {
                        return Err(mismatch("concat_rows", first, t));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, cols, data)?
            }
            Op::SelectRows(a, rows) => {
                let a = self.val(*a);
                if let Some(&bad) = rows.iter().find(|&&r| r >= a.rows()) {
                    return Err(Error::ShapeMismatch {
                        op: "select_rows",
                        left: a.shape().to_vec(),
                        right: vec![bad],
                    });
                }
                a.select_rows(rows)
            }
            Op::Pick(a, cols) => {
                let a = self.val(*a);
                if cols.len() != a.rows() || cols.iter().any(|&c| c >= a.cols()) {
                    return Err(Error::ShapeMismatch {
                        op: "pick",
                        left: a.shape().to_vec(),
                        right: vec![cols.len()],
                    });
                }
                let data = cols.iter().enumerate().map(|(r, &c)| a.get(r, c)).collect();
                Tensor::matrix(a.rows(), 1, data)?
            }
            Op::GaussianNoise { input, sigma, seed } => {
                let a = self.val(*input);
                let eps = standard_normals(*seed, a.len());
                let mut out = a.clone();
                for (o, e) in out.data_mut().iter_mut().zip(eps) {
                    *o += sigma * e;
                }
                out
            }
            Op::Reparam { mean, var, seed } => {
                let (m, v) = (self.val(*mean), self.val(*var));
                m.check_same(v, "reparam")?;
                if let Some(bad) = v.data().iter().find(|&&x| x < 0.0) {
                    return Err(Error::Numeric(format!(
                        "negative variance {bad} in reparam"
                    )));
                }
                let eps = standard_normals(*seed, m.len());
                let mut out = m.clone();
                for ((o, var), e) in out.data_mut().iter_mut().zip(v.data()).zip(eps) {
                    *o += var.sqrt() * e;
                }
                out
            }
            Op::Dropout { input, rate, seed } => {
                let a = self.val(*input);
                let mask = dropout_mask(*seed, a.len(), *rate);
                let mut out = a.clone();
                for (o, m) in out.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                out
            }
            Op::StopGradient(a) => self.val(*a).clone(),
        })
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if root.0 >= self.valid {
            return Err(Error::usage("backward called before eval"));
        }
        let v = self.val(root);
        if v.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar root, got shape {:?}",
                v.shape()
            )));
        }
        self.backward_with(root, Tensor::full(v.rows(), v.cols(), 1.0))
    }

    /// Backpropagates an explicit output adjoint (vector-Jacobian product).
    pub fn backward_with(&self, root: NodeId, seed: Tensor) -> Result<Gradients> {
        if root.0 >= self.valid {
            return Err(Error::usage("backward called before eval"));
        }
        self.val(root).check_same(&seed, "backward seed")?;
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if matches!(self.ops[i], Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }

        let mut grads = HashMap::new();
        for (i, op) in self.ops.iter().enumerate() {
            if matches!(op, Op::Leaf) {
                let g = adj
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros_like(self.val(NodeId(i))));
                grads.insert(NodeId(i), g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        fn acc(adj: &mut [Option<Tensor>], id: NodeId, contrib: Tensor) {
            match &mut adj[id.0] {
                Some(existing) => existing.add_assign_scaled(&contrib, 1.0),
                slot @ None => *slot = Some(contrib),
            }
        }
        let out = self.val(NodeId(i));
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                let mut ga = Tensor::zeros(n, k);
                matmul_nt_into(g.data(), bv.data(), ga.data_mut(), n, k, m);
                let mut gb = Tensor::zeros(k, m);
                matmul_tn_into(av.data(), g.data(), gb.data_mut(), n, k, m);
                acc(adj, *a, ga);
                acc(adj, *b, gb);
            }
            Op::Add(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(adj, *a, g.zip_map(bv, |x, y| x * y).expect("shape"));
                acc(adj, *b, g.zip_map(av, |x, y| x * y).expect("shape"));
            }
            Op::AddBias(a, bias) => {
                let cols = g.cols();
                let mut gb = vec![0.0; cols];
                for r in 0..g.rows() {
                    for (s, v) in gb.iter_mut().zip(g.row(r)) {
                        *s += v;
                    }
                }
                acc(adj, *a, g.clone());
                acc(adj, *bias, Tensor::row_vector(&gb));
            }
            Op::Scale(a, s) => acc(adj, *a, g.scale(*s)),
            Op::AddScalar(a, _) => acc(adj, *a, g.clone()),
            Op::ScaleRows(a, w) => {
                let mut ga = g.clone();
                for (r, &wr) in w.iter().enumerate() {
                    ga.row_mut(r).iter_mut().for_each(|v| *v *= wr);
                }
                acc(adj, *a, ga);
            }
            Op::Exp(a) => acc(adj, *a, g.zip_map(out, |x, y| x * y).expect("shape")),
            Op::Log(a) => {
                let av = self.val(*a);
                acc(adj, *a, g.zip_map(av, |x, y| x / y).expect("shape"));
            }
            Op::Sqrt(a) => acc(
                adj,
                *a,
                g.zip_map(out, |x, y| if y > 0.0 { x / (2.0 * y) } else { 0.0 })
                    .expect("shape"),
            ),
            Op::Square(a) => {
                let av = self.val(*a);
                acc(adj, *a, g.zip_map(av, |x, y| 2.0 * x * y).expect("shape"));
            }
            Op::Sigmoid(a) => {
                acc(
                    adj,
                    *a,
                    g.zip_map(out, |x, s| x * s * (1.0 - s)).expect("shape"),
                );
            }
            Op::Softplus(a) => {
                let av = self.val(*a);
                acc(
                    adj,
                    *a,
                    g.zip_map(av, |x, y| x * sigmoid(y)).expect("shape"),
                );
            }
            Op::LeakyRelu(a, s) => {
                let av = self.val(*a);
                acc(
                    adj,
                    *a,
                    g.zip_map(av, |x, y| if y > 0.0 { x } else { s * x })
                        .expect("shape"),
                );
            }
            Op::Softmax(a) => {
                let mut ga = g.clone();
                for r in 0..g.rows() {
                    let p = out.row(r);
                    let dot: f64 = g.row(r).iter().zip(p).map(|(x, y)| x * y).sum();
                    for ((o, &gr), &pr) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(p) {
                        *o = pr * (gr - dot);
                    }
                }
                acc(adj, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = g.clone();
                for r in 0..g.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for (o, &lp) in ga.row_mut(r).iter_mut().zip(out.row(r)) {
                        *o -= lp.exp() * total;
                    }
                }
                acc(adj, *a, ga);
            }
            Op::Sum(a) => {
                let av = self.val(*a);
                acc(adj, *a, Tensor::full(av.rows(), av.cols(), g.data()[0]));
            }
            Op::Mean(a) => {
                let av = self.val(*a);
                let v = g.data()[0] / av.len() as f64;
                acc(adj, *a, Tensor::full(av.rows(), av.cols(), v));
            }
            Op::RowSum(a) => {
                let av = self.val(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let gr = g.data()[r];
                    ga.row_mut(r).iter_mut().for_each(|v| *v = gr);
                }
                acc(adj, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.val(*p).rows();
                    let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    acc(adj, *p, Tensor::matrix(rows, cols, slice).expect("shape"));
                    offset += rows;
                }
            }
            Op::SelectRows(a, rows) => {
                let av = self.val(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for (k, &r) in rows.iter().enumerate() {
                    for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(adj, *a, ga);
            }
            Op::Pick(a, cols) => {
                let av = self.val(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for (r, &c) in cols.iter().enumerate() {
                    ga.set(r, c, g.data()[r]);
                }
                acc(adj, *a, ga);
            }
            Op::GaussianNoise { input, .. } => acc(adj, *input, g.clone()),
            Op::Reparam { mean, var, seed } => {
                let vv = self.val(*var);
                let eps = standard_normals(*seed, vv.len());
                let mut gv = g.clone();
                for ((o, &v), e) in gv.data_mut().iter_mut().zip(vv.data()).zip(eps) {
                    *o = if v > 0.0 {
                        *o * e / (2.0 * v.sqrt())
                    } else {
                        0.0
                    };
                }
                acc(adj, *mean, g.clone());
                acc(adj, *var, gv);
            }
            Op::Dropout { input, rate, seed } => {
                let mask = dropout_mask(*seed, g.len(), *rate);
                let mut ga = g.clone();
                for (o, m) in ga.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                acc(adj, *input, ga);
            }
            Op::StopGradient(_) => {}
        }
    }
}

/// Largest relative disagreement between the analytic gradient of the scalar
/// `root` with respect to `leaf` and central finite differences with step
/// `epsilon`. Each component contributes
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// Stop-gradient targets are held at their current values while perturbing.
pub fn grad_check(graph: &mut Graph, root: NodeId, leaf: NodeId, epsilon: f64) -> Result<f64> {
    if !graph.is_leaf(leaf) {
        return Err(Error::usage("grad_check target must be a leaf"));
    }
    let out = graph.eval(root)?;
    if out.len() != 1 {
        return Err(Error::usage(format!(
            "grad_check needs a scalar output, got shape {:?}",
            out.shape()
        )));
    }
    let analytic = graph
        .backward(root)?
        .take(leaf)
        .expect("every leaf has a gradient");
    let base = graph.value(leaf)?.clone();
    let was_frozen = graph.frozen_targets;
    graph.freeze_stop_gradients(true);
    let mut worst: f64 = 0.0;
    for k in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[k] += epsilon;
        graph.set_value(leaf, plus)?;
        let fp = graph.eval_scalar(root)?;
        let mut minus = base.clone();
        minus.data_mut()[k] -= epsilon;
        graph.set_value(leaf, minus)?;
        let fm = graph.eval_scalar(root)?;
        let numeric = (fp - fm) / (2.0 * epsilon);
        let a = analytic.data()[k];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    graph.set_value(leaf, base)?;
    graph.eval(root)?;
    graph.freeze_stop_gradients(was_frozen);
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row_vector(&[0.0, 0.0]));
        let p = g.softmax(x);
        assert_eq!(g.eval(p).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn stop_gradient_forward_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(random(3, 2, 1));
        let s = g.stop_gradient(x);
        let expected = g.eval(x).unwrap().clone();
        assert_eq!(g.eval(s).unwrap(), &expected);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(2, 3, 2);
        let b = random(3, 1, 3);
        let mut naive = [0.0; 2];
        for (i, out) in naive.iter_mut().enumerate() {
            for k in 0..3 {
                *out += a.get(i, k) * b.get(k, 0);
            }
        }
        let mut g = Graph::new();
        let (an, bn) = (g.leaf(a), g.leaf(b));
        let c = g.matmul(an, bn);
        let got = g.eval(c).unwrap();
        assert_eq!(got.shape(), &[2, 1]);
        for i in 0..2 {
            assert!((got.get(i, 0) - naive[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row_vector(&[1.0, 2.0]));
        let sq = g.square(x);
        let s = g.sum(sq);
        g.eval(s).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn stop_gradient_blocks_adjoint() {
        let mut g = Graph::new();
        let x = g.leaf(random(2, 2, 4));
        let e = g.exp(x);
        let s = g.stop_gradient(e);
        let sq = g.square(s);
        let total = g.sum(sq);
        g.eval(total).unwrap();
        let grads = g.backward(total).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_before_eval_is_a_usage_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0));
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(2, 3));
        let b = g.leaf(Tensor::zeros(3, 2));
        let c = g.add(a, b);
        match g.eval(c) {
            Err(Error::ShapeMismatch { op, left, right }) => {
                assert_eq!(op, "add");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_values_report_the_node() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row_vector(&[-1.0]));
        let l = g.log(x);
        match g.eval(l) {
            Err(Error::NonFinite { node, op }) => {
                assert_eq!(node, l.index());
                assert_eq!(op, "log");
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn grad_check_quadratic_form() {
        let mut g = Graph::new();
        let x = g.leaf(random(1, 5, 5));
        let sq = g.square(x);
        let f = g.sum(sq);
        assert!(grad_check(&mut g, f, x, 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn grad_check_constant_function_is_exact() {
        let mut g = Graph::new();
        let x = g.leaf(random(1, 3, 6));
        let c = g.leaf(Tensor::scalar(4.2));
        let zero = g.scale(x, 0.0);
        let s = g.sum(zero);
        let f = g.add(s, c);
        assert_eq!(grad_check(&mut g, f, x, 1e-6).unwrap(), 0.0);
    }

    #[test]
    fn grad_check_softmax_cross_entropy() {
        let mut g = Graph::new();
        let logits = g.leaf(random(4, 3, 7));
        let lp = g.log_softmax(logits);
        let picked = g.pick(lp, vec![0, 2, 1, 1]);
        let m = g.mean(picked);
        let loss = g.scale(m, -1.0);
        assert!(grad_check(&mut g, loss, logits, 1e-6).unwrap() < 1e-4);
    }

    #[test]
    fn grad_check_rejects_non_scalar_output() {
        let mut g = Graph::new();
        let x = g.leaf(random(2, 2, 8));
        let y = g.exp(x);
        assert!(matches!(
            grad_check(&mut g, y, x, 1e-6),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let build = || {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::zeros(3, 3));
            let n = g.gaussian_noise(x, 1.0, 42);
            let d = g.dropout(n, 0.3, 43);
            let s = g.square(d);
            let total = g.sum(s);
            let v = g.eval_scalar(total).unwrap();
            let grad = g.backward(total).unwrap().take(x).unwrap();
            (
                v.to_bits(),
                grad.into_data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(build(), build());
    }
}
