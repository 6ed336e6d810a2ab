//! Variational dropout: local reparameterization, the KL term against the
//! log-uniform prior, and sparsity accounting.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{LayerParams, ModelSpec, ParamNodes, ParamSet};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

// Sigmoid/softplus fit of the negative KL for the log-uniform prior.
const K1: f64 = 0.63576;
const K2: f64 = 1.87320;
const K3: f64 = 1.48695;

/// Keeps `log θ²` finite when a mean weight is exactly zero.
const THETA_SQ_FLOOR: f64 = 1e-16;

/// Default pruning threshold on log α; `α/(1+α) ≥ 0.95` ⇔ `log α ≥ ln 19 ≈ 2.94`.
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalLayerParams {
    pub theta: Tensor,
    pub log_var: Tensor,
}

impl VariationalLayerParams {
    pub fn new(theta: Tensor, log_var: Tensor) -> Result<Self> {
        theta.check_same(&log_var, "variational layer")?;
        Ok(VariationalLayerParams { theta, log_var })
    }

    pub fn from_layer(layer: &LayerParams) -> Result<Self> {
        let lv = layer
            .log_var
            .as_ref()
            .ok_or_else(|| Error::usage("layer has no log σ² (deterministic mode)"))?;
        Self::new(layer.weight.clone(), lv.clone())
    }

    /// `log α = log σ² − log θ²`.
    pub fn log_alpha(&self) -> Tensor {
        self.log_var
            .zip_map(&self.theta, |lv, t| lv - (t * t + THETA_SQ_FLOOR).ln())
            .expect("shapes checked at construction")
    }

    /// Pre-activation moments `(ν, ω²)` for inputs `x` (`n × M`).
    pub fn moments(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let nu = x.matmul(&self.theta)?;
        let omega2 = x.map(|v| v * v).matmul(&self.log_var.map(f64::exp))?;
        Ok((nu, omega2))
    }
}

/// `z = ν + ω·ε` with `ν = x·θ`, `ω² = x²·σ²`.
pub fn local_reparam_node(
    g: &mut Graph,
    x: NodeId,
    theta: NodeId,
    log_var: NodeId,
    seed: u64,
) -> NodeId {
    let nu = g.matmul(x, theta);
    let x2 = g.square(x);
    let var = g.exp(log_var);
    let omega2 = g.matmul(x2, var);
    g.reparam(nu, omega2, seed)
}

/// One local-reparameterization sample of the pre-activations.
pub fn local_reparam_forward(
    layer: &VariationalLayerParams,
    x: &Tensor,
    seed: u64,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.leaf(x.clone());
    let t = g.leaf(layer.theta.clone());
    let lv = g.leaf(layer.log_var.clone());
    let z = local_reparam_node(&mut g, xn, t, lv, seed);
    Ok(g.eval(z)?.clone())
}

/// Per-weight KL(q‖p) for the log-uniform prior as a function of log α,
/// with the additive constant fixed so that it vanishes as α → ∞.
pub fn kl_per_weight(log_alpha: f64) -> f64 {
    let s = K2 + K3 * log_alpha;
    let sig = if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    };
    let softplus = (-log_alpha).max(0.0) + (-log_alpha.abs()).exp().ln_1p();
    K1 - K1 * sig + 0.5 * softplus
}

/// Differentiable summed KL of one layer.
pub fn kl_node(g: &mut Graph, theta: NodeId, log_var: NodeId) -> NodeId {
    let t2 = g.square(theta);
    let t2 = g.add_scalar(t2, THETA_SQ_FLOOR);
    let log_t2 = g.log(t2);
    let log_alpha = g.sub(log_var, log_t2);
    let arg = g.scale(log_alpha, K3);
    let arg = g.add_scalar(arg, K2);
    let sig = g.sigmoid(arg);
    let neg = g.scale(log_alpha, -1.0);
    let sp = g.softplus(neg);
    let a = g.scale(sig, -K1);
    let b = g.scale(sp, 0.5);
    let per = g.add(a, b);
    let per = g.add_scalar(per, K1);
    g.sum(per)
}

/// Sum of [`kl_node`] over every variational layer of a bound parameter set.
pub fn kl_total_node(g: &mut Graph, nodes: &ParamNodes) -> Result<NodeId> {
    let mut parts = Vec::new();
    for layer in &nodes.layers {
        let lv = layer
            .log_var
            .ok_or_else(|| Error::usage("KL requested for a deterministic model"))?;
        parts.push(kl_node(g, layer.weight, lv));
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlTerm {
    pub value: f64,
    pub per_layer: Vec<f64>,
}

pub fn kl_layer(layer: &VariationalLayerParams) -> f64 {
    layer
        .log_alpha()
        .data()
        .iter()
        .map(|&la| kl_per_weight(la))
        .sum()
}

pub fn kl_log_uniform(params: &ParamSet) -> Result<KlTerm> {
    let per_layer = params
        .layers
        .iter()
        .map(|l| VariationalLayerParams::from_layer(l).map(|v| kl_layer(&v)))
        .collect::<Result<Vec<_>>>()?;
    Ok(KlTerm {
        value: per_layer.iter().sum(),
        per_layer,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub fraction_pruned: f64,
    /// Per layer, row-major; `true` marks a pruned weight.
    pub masks: Vec<Vec<bool>>,
}

impl SparsityReport {
    /// Copy of `params` with pruned weights set to zero.
    pub fn apply(&self, params: &ParamSet) -> ParamSet {
        let mut out = params.clone();
        for (layer, mask) in out.layers.iter_mut().zip(&self.masks) {
            for (w, &m) in layer.weight.data_mut().iter_mut().zip(mask) {
                if m {
                    *w = 0.0;
                }
            }
        }
        out
    }
}

/// Marks weights whose log α is at or above `threshold`.
pub fn sparsity_report(
    spec: &ModelSpec,
    params: &ParamSet,
    threshold: f64,
) -> Result<SparsityReport> {
    if !spec.is_variational() {
        return Err(Error::usage("sparsity report needs a variational model"));
    }
    let mut masks = Vec::with_capacity(params.layers.len());
    let (mut pruned, mut total) = (0usize, 0usize);
    for layer in &params.layers {
        let la = VariationalLayerParams::from_layer(layer)?.log_alpha();
        let mask: Vec<bool> = la.data().iter().map(|&v| v >= threshold).collect();
        pruned += mask.iter().filter(|&&m| m).count();
        total += mask.len();
        masks.push(mask);
    }
    Ok(SparsityReport {
        fraction_pruned: pruned as f64 / total.max(1) as f64,
        masks,
    })
}

/// Monte-Carlo estimate of `E_{w∼q}[loss(w)]` from `n_samples` independent
/// stochastic graphs, with the matching averaged gradient.
///
/// `build` receives a fresh graph, the bound parameters and a per-sample
/// seed, and returns the scalar loss node.
pub fn expected_loss_mc<F>(
    params: &ParamSet,
    n_samples: usize,
    seed: u64,
    mut build: F,
) -> Result<(f64, ParamSet)>
where
    F: FnMut(&mut Graph, &ParamNodes, u64) -> Result<NodeId>,
{
    if n_samples == 0 {
        return Err(Error::usage("expected_loss_mc needs at least one sample"));
    }
    let mut total = 0.0;
    let mut grad_sum: Option<ParamSet> = None;
    for i in 0..n_samples {
        let mut g = Graph::new();
        let nodes = params.bind(&mut g);
        let loss = build(&mut g, &nodes, derive_seed(seed, &[i as u64]))?;
        total += g.eval_scalar(loss)?;
        let mut grads = g.backward(loss)?;
        let gp = ParamSet::gradients(&nodes, &mut grads);
        grad_sum = Some(match grad_sum {
            None => gp,
            Some(mut acc) => {
                for (a, b) in acc.layers.iter_mut().zip(&gp.layers) {
                    a.weight.add_assign_scaled(&b.weight, 1.0);
                    a.bias.add_assign_scaled(&b.bias, 1.0);
                    if let (Some(x), Some(y)) = (a.log_var.as_mut(), b.log_var.as_ref()) {
                        x.add_assign_scaled(y, 1.0);
                    }
                }
                acc
            }
        });
    }
    let inv = 1.0 / n_samples as f64;
    let mut grads = grad_sum.expect("n_samples >= 1");
    for l in &mut grads.layers {
        l.weight = l.weight.scale(inv);
        l.bias = l.bias.scale(inv);
        l.log_var = l.log_var.as_ref().map(|t| t.scale(inv));
    }
    Ok((total * inv, grads))
}
