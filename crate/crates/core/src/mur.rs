//! Maximum-uncertainty virtual points.
//!
//! For each real point `x₀` we look for the input within distance `r` whose
//! predictive distribution has the highest entropy, then penalize the
//! squared difference between the predictions there and at `x₀`. Four ways
//! to pick the point are provided: the closed-form step along the entropy
//! gradient, projected gradient ascent, gradient ascent on a Lagrangian
//! relaxation, and a uniformly random point on the sphere (the RR baseline).
//!
//! Solvers always use the mean network with noise off.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{build_forward, ForwardNodes, ModelSpec, ParamSet, Perturbation};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

/// Below this entropy-gradient norm the closed-form direction is undefined.
pub const DEGENERATE_GRAD_NORM: f64 = 1e-12;

/// Probabilities are clamped here before taking logs.
const PROB_FLOOR: f64 = 1e-12;

/// Lagrangian ascent starts this fraction of `r` away from `x₀`.
const LAGA_START_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Direct,
    Pga,
    #[serde(alias = "lagrangian_ga")]
    Laga,
    Random,
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Solver::Direct),
            "pga" => Ok(Solver::Pga),
            "laga" | "lagrangian-ga" | "lagrangian_ga" => Ok(Solver::Laga),
            "random" | "rr" => Ok(Solver::Random),
            other => Err(Error::config(format!("unknown MUR solver `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MurConfig {
    pub radius: f64,
    pub solver: Solver,
    /// Step size of the iterative solvers.
    pub lr: f64,
    /// Step count of the iterative solvers.
    pub steps: usize,
}

impl MurConfig {
    pub fn direct(radius: f64) -> Self {
        MurConfig {
            radius,
            solver: Solver::Direct,
            lr: 0.1,
            steps: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::config(format!(
                "MUR radius must be > 0, got {}",
                self.radius
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "MUR learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if self.steps == 0 {
            return Err(Error::config("MUR steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub point: Vec<f64>,
    pub entropy: f64,
    /// `‖x_t − x₀‖₂`
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualPointResult {
    /// `1 × d`.
    pub point: Tensor,
    pub trace: Vec<TraceStep>,
    pub g0_norm: f64,
}

/// Shannon entropy (nats) of one probability row.
pub fn predictive_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .map(|&p| {
            let p = p.max(PROB_FLOOR);
            p * p.ln()
        })
        .sum::<f64>()
}

/// Per-row entropy `−Σ_k p_k log p_k` as an `n × 1` node.
pub fn entropy_node(g: &mut Graph, fwd: &ForwardNodes) -> NodeId {
    let plogp = g.mul(fwd.probs, fwd.log_probs);
    let s = g.row_sum(plogp);
    g.scale(s, -1.0)
}

/// Entropies of the mean network at each row of `x` and their input gradients.
pub fn entropy_and_gradient(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
) -> Result<(Vec<f64>, Tensor)> {
    let mut g = Graph::new();
    let nodes = params.bind(&mut g);
    let xn = g.leaf(x.clone());
    let fwd = build_forward(&mut g, spec, &nodes, xn, Perturbation::NONE);
    let h = entropy_node(&mut g, &fwd);
    let total = g.sum(h);
    g.eval(total)?;
    let entropies = g.value(h)?.data().to_vec();
    let grad = g.backward(total)?.take(xn).expect("input gradient");
    Ok((entropies, grad))
}

/// `g₀ = ∂H(p(y|x))/∂x` at every row of `x0`.
pub fn entropy_gradient(spec: &ModelSpec, params: &ParamSet, x0: &Tensor) -> Result<Tensor> {
    Ok(entropy_and_gradient(spec, params, x0)?.1)
}

pub fn entropies(spec: &ModelSpec, params: &ParamSet, x: &Tensor) -> Result<Vec<f64>> {
    let out = crate::model::forward(spec, params, x, false, 0)?;
    Ok((0..out.probs.rows())
        .map(|r| predictive_entropy(out.probs.row(r)))
        .collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `x₀ + r·g₀/‖g₀‖₂`, the maximizer of the linearized entropy over the ball.
pub fn virtual_point_direct(x0: &[f64], g0: &[f64], radius: f64) -> Result<VirtualPointResult> {
    let gn = norm(g0);
    if gn < DEGENERATE_GRAD_NORM {
        return Err(Error::DegenerateGradient { norm: gn });
    }
    let point: Vec<f64> = x0
        .iter()
        .zip(g0)
        .map(|(x, g)| x + radius * g / gn)
        .collect();
    Ok(VirtualPointResult {
        trace: vec![TraceStep {
            point: point.clone(),
            entropy: f64::NAN,
            distance: distance(&point, x0),
        }],
        point: Tensor::row_vector(&point),
        g0_norm: gn,
    })
}

/// `x₀ + r·u/‖u‖₂` with `u` standard normal.
pub fn random_point_on_sphere(x0: &[f64], radius: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    loop {
        let u: Vec<f64> = (0..x0.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let n = norm(&u);
        if n > 1e-300 {
            return x0
                .iter()
                .zip(&u)
                .map(|(x, ui)| x + radius * ui / n)
                .collect();
        }
    }
}

/// Euclidean projection of `x` onto the ball of radius `r` around `x0`.
pub fn project_to_ball(x: &mut [f64], x0: &[f64], radius: f64) {
    let d = distance(x, x0);
    if d > radius {
        for (xi, &ci) in x.iter_mut().zip(x0) {
            *xi = ci + radius * (*xi - ci) / d;
        }
    }
}

/// Virtual points for every row of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchVirtualPoints {
    pub points: Tensor,
    pub g0_norms: Vec<f64>,
    /// Rows where a degenerate gradient forced the random fallback.
    pub fallbacks: usize,
    /// Per-row iterate traces; empty unless requested.
    pub traces: Vec<Vec<TraceStep>>,
}

impl BatchVirtualPoints {
    pub fn mean_g0_norm(&self) -> f64 {
        self.g0_norms.iter().sum::<f64>() / self.g0_norms.len().max(1) as f64
    }
}

fn check_finite(x: &Tensor, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteIterate { step })
    }
}

/// Solves for every row of `x0` with the configured solver.
pub fn solve_batch(
    spec: &ModelSpec,
    params: &ParamSet,
    x0: &Tensor,
    cfg: &MurConfig,
    seed: u64,
    record_trace: bool,
) -> Result<BatchVirtualPoints> {
    cfg.validate()?;
    let n = x0.rows();
    let r = cfg.radius;
    let (h0, g0) = entropy_and_gradient(spec, params, x0)?;
    let g0_norms: Vec<f64> = (0..n).map(|i| norm(g0.row(i))).collect();
    let mut traces: Vec<Vec<TraceStep>> = if record_trace {
        (0..n)
            .map(|i| {
                vec![TraceStep {
                    point: x0.row(i).to_vec(),
                    entropy: h0[i],
                    distance: 0.0,
                }]
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut fallbacks = 0;
    let row_seed = |i: usize| derive_seed(seed, &[i as u64]);

    let mut x = x0.clone();
    match cfg.solver {
        Solver::Direct => {
            for i in 0..n {
                let p = match virtual_point_direct(x0.row(i), g0.row(i), r) {
                    Ok(v) => v.point.into_data(),
                    Err(Error::DegenerateGradient { .. }) => {
                        fallbacks += 1;
                        random_point_on_sphere(x0.row(i), r, row_seed(i))
                    }
                    Err(e) => return Err(e),
                };
                x.row_mut(i).copy_from_slice(&p);
            }
        }
        Solver::Random => {
            for i in 0..n {
                let p = random_point_on_sphere(x0.row(i), r, row_seed(i));
                x.row_mut(i).copy_from_slice(&p);
            }
        }
        Solver::Pga => {
            let mut grad = g0.clone();
            for step in 0..cfg.steps {
                if step > 0 {
                    let (h, gr) = entropy_and_gradient(spec, params, &x)?;
                    grad = gr;
                    if record_trace {
                        for (i, t) in traces.iter_mut().enumerate() {
                            t.last_mut().expect("seeded").entropy = h[i];
                        }
                    }
                }
                x.add_assign_scaled(&grad, cfg.lr);
                for i in 0..n {
                    project_to_ball(x.row_mut(i), x0.row(i), r);
                }
                check_finite(&x, step + 1)?;
                if record_trace {
                    push_trace(&mut traces, &x, x0);
                }
            }
        }
        Solver::Laga => {
            for i in 0..n {
                let start = random_point_on_sphere(x0.row(i), LAGA_START_FRACTION * r, row_seed(i));
                x.row_mut(i).copy_from_slice(&start);
            }
            if record_trace {
                push_trace(&mut traces, &x, x0);
            }
            for step in 0..cfg.steps {
                let (h, grad) = entropy_and_gradient(spec, params, &x)?;
                if record_trace {
                    for (i, t) in traces.iter_mut().enumerate() {
                        t.last_mut().expect("seeded").entropy = h[i];
                    }
                }
                let mut ascent = grad;
                for i in 0..n {
                    let dist = distance(x.row(i), x0.row(i));
                    if dist > 0.0 {
                        let coef = g0_norms[i] / r * (2.0 - r / dist);
                        let (xr, cr) = (x.row(i).to_vec(), x0.row(i));
                        for ((a, xi), ci) in ascent.row_mut(i).iter_mut().zip(&xr).zip(cr) {
                            *a -= coef * (xi - ci);
                        }
                    }
                }
                x.add_assign_scaled(&ascent, cfg.lr);
                check_finite(&x, step + 1)?;
                if record_trace {
                    push_trace(&mut traces, &x, x0);
                }
            }
        }
    }

    if record_trace {
        let h = entropies(spec, params, &x)?;
        for (i, t) in traces.iter_mut().enumerate() {
            match cfg.solver {
                Solver::Direct | Solver::Random => t.push(TraceStep {
                    point: x.row(i).to_vec(),
                    entropy: h[i],
                    distance: distance(x.row(i), x0.row(i)),
                }),
                Solver::Pga | Solver::Laga => t.last_mut().expect("seeded").entropy = h[i],
            }
        }
    }
    Ok(BatchVirtualPoints {
        points: x,
        g0_norms,
        fallbacks,
        traces,
    })
}

fn push_trace(traces: &mut [Vec<TraceStep>], x: &Tensor, x0: &Tensor) {
    for (i, t) in traces.iter_mut().enumerate() {
        t.push(TraceStep {
            point: x.row(i).to_vec(),
            entropy: f64::NAN,
            distance: distance(x.row(i), x0.row(i)),
        });
    }
}

fn single(
    spec: &ModelSpec,
    params: &ParamSet,
    x0: &Tensor,
    cfg: &MurConfig,
    seed: u64,
) -> Result<VirtualPointResult> {
    if x0.rows() != 1 {
        return Err(Error::usage("expected a single example"));
    }
    let mut out = solve_batch(spec, params, x0, cfg, seed, true)?;
    Ok(VirtualPointResult {
        point: out.points,
        trace: out.traces.pop().unwrap_or_default(),
        g0_norm: out.g0_norms[0],
    })
}

/// Projected gradient ascent from `x₀` for `cfg.steps` steps.
pub fn virtual_point_pga(
    spec: &ModelSpec,
    params: &ParamSet,
    x0: &Tensor,
    cfg: &MurConfig,
) -> Result<VirtualPointResult> {
    let cfg = MurConfig {
        solver: Solver::Pga,
        ..cfg.clone()
    };
    single(spec, params, x0, &cfg, 0)
}

/// Gradient ascent on `H(p(y|x)) − λ*(x)(‖x−x₀‖₂ − r)` with
/// `λ*(x) = ‖x−x₀‖₂‖g₀‖₂/r`, started just off `x₀`.
pub fn virtual_point_lagrangian_ga(
    spec: &ModelSpec,
    params: &ParamSet,
    x0: &Tensor,
    cfg: &MurConfig,
    seed: u64,
) -> Result<VirtualPointResult> {
    let cfg = MurConfig {
        solver: Solver::Laga,
        ..cfg.clone()
    };
    single(spec, params, x0, &cfg, seed)
}

/// `λ*(x)` of the Lagrangian relaxation.
pub fn lagrange_multiplier(x: &[f64], x0: &[f64], g0_norm: f64, radius: f64) -> f64 {
    distance(x, x0) * g0_norm / radius
}

/// Gradient of the penalty `λ*(x)(‖x−x₀‖₂ − r)` with respect to `x`.
pub fn lagrange_penalty_gradient(x: &[f64], x0: &[f64], g0_norm: f64, radius: f64) -> Vec<f64> {
    let d = distance(x, x0);
    x.iter()
        .zip(x0)
        .map(|(xi, ci)| g0_norm * (xi - ci) / radius * (2.0 - radius / d))
        .collect()
}

/// Mean over rows and classes of `(student − sg(target))²`.
pub fn mur_loss_node(g: &mut Graph, student_probs: NodeId, target_probs: NodeId) -> NodeId {
    crate::objectives::consistency_node(g, student_probs, target_probs)
}

pub fn mur_loss(student_probs: &Tensor, target_probs: &Tensor) -> Result<f64> {
    crate::objectives::squared_consistency(student_probs, target_probs)
}
