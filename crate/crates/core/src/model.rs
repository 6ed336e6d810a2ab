//! Small MLP classifiers with pluggable stochastic layers.
//!
//! Gaussian noise is injected at the input and binary dropout after each
//! hidden activation. In variational weight mode every layer also carries a
//! per-weight log-variance and, when sampled, uses the local
//! reparameterization in [`crate::vd`].

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, tag};
use crate::tensor::Tensor;
use crate::vd;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Deterministic,
    Variational,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Layer widths from input to class count.
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
    /// Standard deviation of the Gaussian input noise.
    pub input_noise: f64,
    /// Binary dropout rate after each hidden layer.
    pub dropout: f64,
    pub weight_mode: WeightMode,
    /// Initial value of every log σ² entry in variational mode.
    pub log_var_init: f64,
}

impl ModelSpec {
    /// `[input, 64, 64, classes]`, leaky-ReLU 0.1.
    pub fn desk(input: usize, classes: usize) -> Self {
        ModelSpec {
            widths: vec![input, 64, 64, classes],
            leaky_slope: 0.1,
            input_noise: 0.15,
            dropout: 0.0,
            weight_mode: WeightMode::Deterministic,
            log_var_init: -10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::config("model needs at least two positive widths"));
        }
        if self.classes() < 2 {
            return Err(Error::config(
                "final width (class count) must be at least 2",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout rate {} not in [0, 1)",
                self.dropout
            )));
        }
        if self.input_noise < 0.0 || !self.input_noise.is_finite() {
            return Err(Error::config(
                "input noise must be a non-negative finite value",
            ));
        }
        if !self.log_var_init.is_finite() {
            return Err(Error::config("log_var_init must be finite"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn is_variational(&self) -> bool {
        self.weight_mode == WeightMode::Variational
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// `in × out`, so a layer computes `x · W + b`.
    pub weight: Tensor,
    /// `1 × out`.
    pub bias: Tensor,
    /// log σ² with the shape of `weight`; present only in variational mode.
    pub log_var: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

impl ParamSet {
    /// He-normal weights, zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_from(derive_seed(seed, &[tag::INIT]));
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let data = (0..fan_in * fan_out)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                LayerParams {
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("shape"),
                    bias: Tensor::zeros(1, fan_out),
                    log_var: spec
                        .is_variational()
                        .then(|| Tensor::full(fan_in, fan_out, spec.log_var_init)),
                }
            })
            .collect();
        Ok(ParamSet { layers })
    }

    /// All-zero parameters (log σ² still at `log_var_init`).
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .widths
            .windows(2)
            .map(|w| LayerParams {
                weight: Tensor::zeros(w[0], w[1]),
                bias: Tensor::zeros(1, w[1]),
                log_var: spec
                    .is_variational()
                    .then(|| Tensor::full(w[0], w[1], spec.log_var_init)),
            })
            .collect();
        Ok(ParamSet { layers })
    }

    /// Checks that shapes agree with `spec`.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let dims: Vec<(usize, usize)> = spec.widths.windows(2).map(|w| (w[0], w[1])).collect();
        if dims.len() != self.layers.len() {
            return Err(Error::ShapeMismatch {
                op: "param_set",
                left: spec.widths.clone(),
                right: vec![self.layers.len()],
            });
        }
        for (layer, &(i, o)) in self.layers.iter().zip(&dims) {
            if layer.weight.shape() != [i, o] || layer.bias.shape() != [1, o] {
                return Err(Error::ShapeMismatch {
                    op: "param_set",
                    left: vec![i, o],
                    right: layer.weight.shape().to_vec(),
                });
            }
            match (&layer.log_var, spec.is_variational()) {
                (Some(lv), true) if lv.shape() == [i, o] => {
                    if !lv.is_finite() {
                        return Err(Error::Numeric("non-finite log σ²".into()));
                    }
                }
                (None, false) => {}
                _ => {
                    return Err(Error::usage(
                        "log σ² presence does not match the weight mode",
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [Some(&l.weight), Some(&l.bias), l.log_var.as_ref()])
            .flatten()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> ParamNodes {
        ParamNodes {
            layers: self
                .layers
                .iter()
                .map(|l| LayerNodes {
                    weight: g.leaf(l.weight.clone()),
                    bias: g.leaf(l.bias.clone()),
                    log_var: l.log_var.as_ref().map(|lv| g.leaf(lv.clone())),
                })
                .collect(),
        }
    }

    /// Collects the gradients of the bound leaves into a parameter-shaped set.
    pub fn gradients(nodes: &ParamNodes, grads: &mut Gradients) -> ParamSet {
        let mut take = |id: NodeId| grads.take(id).expect("leaf gradient");
        ParamSet {
            layers: nodes
                .layers
                .iter()
                .map(|n| LayerParams {
                    weight: take(n.weight),
                    bias: take(n.bias),
                    log_var: n.log_var.map(&mut take),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNodes {
    pub weight: NodeId,
    pub bias: NodeId,
    pub log_var: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub layers: Vec<LayerNodes>,
}

/// Which stochastic layers are active for one pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Perturbation {
    /// Seed for input noise and dropout; `None` disables both.
    pub noise_seed: Option<u64>,
    /// Seed for the weight sample; `None` uses the mean weights θ.
    pub weight_seed: Option<u64>,
}

impl Perturbation {
    pub const NONE: Perturbation = Perturbation {
        noise_seed: None,
        weight_seed: None,
    };

    pub fn noise(seed: u64) -> Self {
        Perturbation {
            noise_seed: Some(seed),
            weight_seed: None,
        }
    }

    pub fn with_weights(mut self, seed: u64) -> Self {
        self.weight_seed = Some(seed);
        self
    }
}

/// Node handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub logits: NodeId,
    pub probs: NodeId,
    pub log_probs: NodeId,
}

/// Builds the network on `x` inside `g`.
pub fn build_forward(
    g: &mut Graph,
    spec: &ModelSpec,
    params: &ParamNodes,
    x: NodeId,
    pert: Perturbation,
) -> ForwardNodes {
    let mut h = x;
    if let Some(seed) = pert.noise_seed {
        if spec.input_noise > 0.0 {
            h = g.gaussian_noise(h, spec.input_noise, derive_seed(seed, &[tag::NOISE]));
        }
    }
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        let z = match (pert.weight_seed, layer.log_var) {
            (Some(ws), Some(lv)) => vd::local_reparam_node(
                g,
                h,
                layer.weight,
                lv,
                derive_seed(ws, &[tag::WEIGHTS, l as u64]),
            ),
            _ => g.matmul(h, layer.weight),
        };
        let z = g.add_bias(z, layer.bias);
        if l == last {
            h = z;
        } else {
            h = g.leaky_relu(z, spec.leaky_slope);
            if let Some(seed) = pert.noise_seed {
                if spec.dropout > 0.0 {
                    h = g.dropout(
                        h,
                        spec.dropout,
                        derive_seed(seed, &[tag::DROPOUT, l as u64]),
                    );
                }
            }
        }
    }
    let probs = g.softmax(h);
    let log_probs = g.log_softmax(h);
    ForwardNodes {
        logits: h,
        probs,
        log_probs,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveOutput {
    pub probs: Tensor,
    pub log_probs: Tensor,
}

impl PredictiveOutput {
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.probs.rows())
            .map(|r| {
                let row = self.probs.row(r);
                (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .unwrap_or(0)
            })
            .collect()
    }
}

fn check_input(spec: &ModelSpec, x: &Tensor) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != spec.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: x.shape().to_vec(),
            right: vec![spec.input_dim()],
        });
    }
    Ok(())
}

/// One pass over the rows of `x`. With `noise_on` the configured input noise
/// and dropout are applied and, in variational mode, weights are sampled;
/// otherwise the output is a pure function of the mean parameters.
pub fn forward(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    noise_on: bool,
    seed: u64,
) -> Result<PredictiveOutput> {
    check_input(spec, x)?;
    let pert = if noise_on {
        Perturbation::noise(seed).with_weights(derive_seed(seed, &[tag::WEIGHTS]))
    } else {
        Perturbation::NONE
    };
    forward_with(spec, params, x, pert)
}

pub fn forward_with(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    pert: Perturbation,
) -> Result<PredictiveOutput> {
    check_input(spec, x)?;
    let mut g = Graph::new();
    let nodes = params.bind(&mut g);
    let xn = g.leaf(x.clone());
    let out = build_forward(&mut g, spec, &nodes, xn, pert);
    g.eval(out.log_probs)?;
    let log_probs = g.value(out.log_probs)?.clone();
    let probs = g.eval(out.probs)?.clone();
    Ok(PredictiveOutput { probs, log_probs })
}

/// Frobenius norm of ∂p(y|x)/∂x for a single example (`1 × d`).
pub fn sensitivity(spec: &ModelSpec, params: &ParamSet, x: &Tensor) -> Result<f64> {
    if x.rows() != 1 {
        return Err(Error::usage("sensitivity expects a single example"));
    }
    Ok(sensitivities(spec, params, x)?[0])
}

/// Per-row Jacobian Frobenius norms with noise off and mean weights.
///
/// Rows do not interact in an evaluation pass, so one backward pass per
/// class with a column-indicator adjoint yields every row's Jacobian row.
pub fn sensitivities(spec: &ModelSpec, params: &ParamSet, x: &Tensor) -> Result<Vec<f64>> {
    check_input(spec, x)?;
    let mut g = Graph::new();
    let nodes = params.bind(&mut g);
    let xn = g.leaf(x.clone());
    let out = build_forward(&mut g, spec, &nodes, xn, Perturbation::NONE);
    g.eval(out.probs)?;
    let (n, k) = (x.rows(), spec.classes());
    let mut sq = vec![0.0; n];
    for class in 0..k {
        let mut seed = Tensor::zeros(n, k);
        for r in 0..n {
            seed.set(r, class, 1.0);
        }
        let mut grads = g.backward_with(out.probs, seed)?;
        let j = grads.take(xn).expect("input gradient");
        for (r, acc) in sq.iter_mut().enumerate() {
            *acc += j.row(r).iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok(sq.into_iter().map(f64::sqrt).collect())
}

/// Sidecar metadata stored next to a binary checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub seed: u64,
    pub step: usize,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes `path` (binary) and `path.json` (metadata).
///
/// Binary layout, all little-endian: `u64` layer count, `u64` variational
/// flag, then `(u64 in, u64 out)` per layer, then per layer the `f64`
/// weights (row-major), biases and, if variational, log σ².
pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: &CheckpointMeta) -> Result<()> {
    params.check(&meta.spec)?;
    let variational = meta.spec.is_variational();
    let mut buf = Vec::new();
    buf.extend_from_slice(&(params.layers.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(variational as u64).to_le_bytes());
    for l in &params.layers {
        buf.extend_from_slice(&(l.weight.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(l.weight.cols() as u64).to_le_bytes());
    }
    for t in params.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |detail: &str| Error::Format {
        what: "checkpoint",
        detail: detail.to_string(),
    };
    let mut words = bytes
        .chunks_exact(8)
        .map(|c| <[u8; 8]>::try_from(c).expect("8 bytes"));
    if bytes.len() % 8 != 0 {
        return Err(bad("length is not a multiple of 8"));
    }
    let mut next_u64 = || {
        words
            .next()
            .map(u64::from_le_bytes)
            .ok_or_else(|| bad("truncated header"))
    };
    let layers = next_u64()? as usize;
    let variational = next_u64()? != 0;
    let mut dims = Vec::with_capacity(layers);
    for _ in 0..layers {
        dims.push((next_u64()? as usize, next_u64()? as usize));
    }
    let header_words = 2 + 2 * layers;
    let mut values = bytes[header_words * 8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = |rows: usize, cols: usize| -> Result<Tensor> {
        let data: Vec<f64> = values.by_ref().take(rows * cols).collect();
        if data.len() != rows * cols {
            return Err(bad("truncated parameters"));
        }
        Tensor::matrix(rows, cols, data)
    };
    let mut out = Vec::with_capacity(layers);
    for &(i, o) in &dims {
        let weight = take(i, o)?;
        let bias = take(1, o)?;
        let log_var = if variational { Some(take(i, o)?) } else { None };
        out.push(LayerParams {
            weight,
            bias,
            log_var,
        });
    }
    if values.next().is_some() {
        return Err(bad("trailing data"));
    }
    if variational != meta.spec.is_variational() {
        return Err(bad("weight mode disagrees with metadata"));
    }
    let params = ParamSet { layers: out };
    params.check(&meta.spec)?;
    Ok((params, meta))
}
