//! Training objectives, ramp schedules and the EMA teacher.

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{build_forward, ModelSpec, ParamNodes, ParamSet, Perturbation};
use crate::mur::{solve_batch, MurConfig};
use crate::rng::{derive_seed, rng_from, tag};
use crate::tensor::Tensor;
use crate::vd;

/// `mean((student − sg(target))²)` over rows and classes.
pub fn consistency_node(g: &mut Graph, student: NodeId, target: NodeId) -> NodeId {
    let t = g.stop_gradient(target);
    let d = g.sub(student, t);
    let sq = g.square(d);
    g.mean(sq)
}

pub fn squared_consistency(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same(b, "consistency")?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.len() as f64)
}

pub fn pi_consistency(branch_a: &Tensor, branch_b: &Tensor) -> Result<f64> {
    squared_consistency(branch_a, branch_b)
}

pub fn mt_consistency(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    squared_consistency(student, teacher)
}

fn labeled_rows(labels: &[i64]) -> (Vec<usize>, Vec<usize>) {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l >= 0)
        .map(|(i, &l)| (i, l as usize))
        .unzip()
}

/// Mean negative log-probability of the true class over rows with a label.
pub fn xent_loss_node(g: &mut Graph, log_probs: NodeId, labels: &[i64]) -> Result<NodeId> {
    let (rows, cols) = labeled_rows(labels);
    if rows.is_empty() {
        return Err(Error::usage(
            "cross-entropy needs at least one labeled example",
        ));
    }
    let sel = g.select_rows(log_probs, rows);
    let picked = g.pick(sel, cols);
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

pub fn xent_loss(probs: &Tensor, labels: &[i64], mask: &[bool]) -> Result<f64> {
    if labels.len() != probs.rows() || mask.len() != probs.rows() {
        return Err(Error::ShapeMismatch {
            op: "xent_loss",
            left: probs.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (r, (&l, &m)) in labels.iter().zip(mask).enumerate() {
        if m {
            let p = probs.get(r, l as usize).max(f64::MIN_POSITIVE);
            total -= p.ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::usage(
            "cross-entropy needs at least one labeled example",
        ));
    }
    Ok(total / n as f64)
}

/// Rows `lam[i]·x_i + (1−lam[i])·x_{perm[i]}`.
pub fn mixup(x: &Tensor, perm: &[usize], lam: &[f64]) -> Tensor {
    let mut out = x.clone();
    for (i, (&j, &l)) in perm.iter().zip(lam).enumerate() {
        for (o, (a, b)) in out.row_mut(i).iter_mut().zip(x.row(i).iter().zip(x.row(j))) {
            *o = l * a + (1.0 - l) * b;
        }
    }
    out
}

/// Random pairing and Beta(α, α) mixing weights for `n` rows.
pub fn mix_pairs(n: usize, alpha: f64, seed: u64) -> Result<(Vec<usize>, Vec<f64>)> {
    let beta =
        Beta::new(alpha, alpha).map_err(|e| Error::config(format!("mixup alpha {alpha}: {e}")))?;
    let mut rng = rng_from(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let lam = (0..n).map(|_| beta.sample(&mut rng)).collect();
    Ok((perm, lam))
}

/// `sg(lam·t + (1−lam)·t[perm])`.
pub fn ict_target_node(
    g: &mut Graph,
    teacher_probs: NodeId,
    perm: &[usize],
    lam: &[f64],
) -> NodeId {
    let a = g.scale_rows(teacher_probs, lam.to_vec());
    let shuffled = g.select_rows(teacher_probs, perm.to_vec());
    let b = g.scale_rows(shuffled, lam.iter().map(|l| 1.0 - l).collect());
    let t = g.add(a, b);
    g.stop_gradient(t)
}

/// Interpolation consistency of `student(mix(x_i, x_j))` against the mixed
/// teacher predictions, noise off.
pub fn ict_consistency(
    spec: &ModelSpec,
    student: &ParamSet,
    teacher: &ParamSet,
    x_i: &Tensor,
    x_j: &Tensor,
    lam: &[f64],
) -> Result<f64> {
    x_i.check_same(x_j, "ict_consistency")?;
    if lam.len() != x_i.rows() {
        return Err(Error::usage("one mixing weight per row required"));
    }
    let n = x_i.rows();
    let mut stacked = x_i.data().to_vec();
    stacked.extend_from_slice(x_j.data());
    let both = Tensor::matrix(2 * n, x_i.cols(), stacked)?;
    let perm: Vec<usize> = (0..n).map(|i| i + n).collect();
    let mixed = mixup(&both, &perm, lam).select_rows(&(0..n).collect::<Vec<_>>());
    let s = crate::model::forward(spec, student, &mixed, false, 0)?.probs;
    let ti = crate::model::forward(spec, teacher, x_i, false, 0)?.probs;
    let tj = crate::model::forward(spec, teacher, x_j, false, 0)?.probs;
    let mut target = ti.clone();
    for r in 0..n {
        for (o, (a, b)) in target
            .row_mut(r)
            .iter_mut()
            .zip(ti.row(r).iter().zip(tj.row(r)))
        {
            *o = lam[r] * a + (1.0 - lam[r]) * b;
        }
    }
    squared_consistency(&s, &target)
}

/// Peak value with a sigmoid-shaped ramp-up and ramp-down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub peak: f64,
    pub rampup: usize,
    pub rampdown: usize,
    pub total: usize,
}

impl ScheduleSpec {
    pub fn new(peak: f64, rampup: usize, rampdown: usize, total: usize) -> Result<Self> {
        let s = ScheduleSpec {
            peak,
            rampup,
            rampdown,
            total,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(peak: f64, total: usize) -> Self {
        ScheduleSpec {
            peak,
            rampup: 0,
            rampdown: 0,
            total,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak >= 0.0) || !self.peak.is_finite() {
            return Err(Error::config(format!(
                "schedule peak must be >= 0, got {}",
                self.peak
            )));
        }
        if self.rampup + self.rampdown > self.total {
            return Err(Error::config(format!(
                "ramp-up {} + ramp-down {} exceeds total {}",
                self.rampup, self.rampdown, self.total
            )));
        }
        Ok(())
    }

    /// Multiplier in `[0, 1]` at step `t`.
    pub fn multiplier(&self, t: usize) -> Result<f64> {
        if t > self.total {
            return Err(Error::usage(format!(
                "step {t} beyond total {}",
                self.total
            )));
        }
        let mut m = if self.rampup == 0 {
            1.0
        } else {
            let x = (t as f64 / self.rampup as f64).min(1.0);
            (-5.0 * (1.0 - x) * (1.0 - x)).exp()
        };
        if self.rampdown > 0 && t + self.rampdown > self.total {
            let x = (self.total - t) as f64 / self.rampdown as f64;
            m *= 1.0 - (-12.5 * x * x).exp();
        }
        Ok(m)
    }
}

pub fn ramp_value(spec: &ScheduleSpec, t: usize) -> Result<f64> {
    Ok(spec.peak * spec.multiplier(t)?)
}

/// EMA copy of the student parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: ParamSet,
    pub momentum: f64,
}

impl TeacherState {
    pub fn new(student: &ParamSet, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        Ok(TeacherState {
            params: student.clone(),
            momentum,
        })
    }
}

fn check_momentum(m: f64) -> Result<()> {
    if (0.0..=1.0).contains(&m) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "EMA momentum must lie in [0, 1], got {m}"
        )))
    }
}

fn blend(t: &mut Tensor, s: &Tensor, a: f64) -> Result<()> {
    t.check_same(s, "ema_update")?;
    for (x, y) in t.data_mut().iter_mut().zip(s.data()) {
        *x = a * *x + (1.0 - a) * y;
    }
    Ok(())
}

/// `θ̄ ← α θ̄ + (1−α) θ`, including log-variances when present.
pub fn ema_update(teacher: &TeacherState, student: &ParamSet) -> Result<TeacherState> {
    check_momentum(teacher.momentum)?;
    if teacher.params.layers.len() != student.layers.len() {
        return Err(Error::usage("teacher and student depth differ"));
    }
    let a = teacher.momentum;
    let mut out = teacher.clone();
    for (t, s) in out.params.layers.iter_mut().zip(&student.layers) {
        blend(&mut t.weight, &s.weight, a)?;
        blend(&mut t.bias, &s.bias, a)?;
        match (t.log_var.as_mut(), s.log_var.as_ref()) {
            (Some(x), Some(y)) => blend(x, y, a)?,
            (None, None) => {}
            _ => return Err(Error::usage("teacher and student weight modes differ")),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pi,
    Mt,
    Ict,
    Mut,
}

impl Method {
    pub fn needs_teacher(self) -> bool {
        matches!(self, Method::Mt | Method::Ict)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Pi => "pi",
            Method::Mt => "mt",
            Method::Ict => "ict",
            Method::Mut => "mut",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pi" | "π" => Ok(Method::Pi),
            "mt" => Ok(Method::Mt),
            "ict" => Ok(Method::Ict),
            "mut" => Ok(Method::Mut),
            other => Err(Error::usage(format!("unknown method `{other}`"))),
        }
    }
}

/// Coefficients active at one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub consistency: f64,
    pub kl: f64,
    pub mur: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub xent: f64,
    pub consistency: f64,
    pub kl: f64,
    pub mur: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossBreakdown {
    pub fn reconstructed_total(&self) -> f64 {
        self.xent
            + self.lambda1 * self.consistency
            + self.lambda2 * self.kl
            + self.lambda3 * self.mur
    }
}

/// Everything one loss evaluation needs.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub spec: &'a ModelSpec,
    pub student: &'a ParamSet,
    pub teacher: Option<&'a ParamSet>,
    pub batch: &'a Batch,
    pub method: Method,
    pub coefficients: Coefficients,
    pub mur: Option<&'a MurConfig>,
    pub vbi: bool,
    /// Multiplier applied to the summed KL before λ₂.
    pub kl_scale: f64,
    pub mixup_alpha: f64,
    pub seed: u64,
}

/// A built and evaluated loss graph.
#[derive(Debug)]
pub struct LossGraph {
    pub graph: Graph,
    pub student: ParamNodes,
    /// Teacher leaves, when a teacher branch was built.
    pub teacher: Option<ParamNodes>,
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    /// Mean ‖g₀‖₂ over the batch when the MUR term was built.
    pub g0_norm: Option<f64>,
}

impl LossGraph {
    /// Gradient of the total with respect to the student parameters.
    pub fn gradients(&self) -> Result<ParamSet> {
        let mut grads = self.graph.backward(self.total)?;
        Ok(ParamSet::gradients(&self.student, &mut grads))
    }
}

fn student_pert(ctx: &LossContext, branch: u64) -> Perturbation {
    let p = Perturbation::noise(derive_seed(ctx.seed, &[branch]));
    if ctx.vbi {
        p.with_weights(derive_seed(ctx.seed, &[branch, tag::WEIGHTS]))
    } else {
        p
    }
}

/// Builds `xent + λ₁·cons + λ₂·kl + λ₃·mur`. Terms whose coefficient is
/// exactly zero are not built, and every stochastic branch draws from its
/// own derived seed, so omitting a term leaves the others bit-identical.
pub fn combined_loss(ctx: &LossContext) -> Result<LossGraph> {
    let c = ctx.coefficients;
    if ctx.vbi && !ctx.spec.is_variational() {
        return Err(Error::config("VBI requires a variational model"));
    }
    if ctx.method.needs_teacher() && c.consistency != 0.0 && ctx.teacher.is_none() {
        return Err(Error::usage(format!(
            "method `{}` needs a teacher",
            ctx.method.name()
        )));
    }
    let x = &ctx.batch.inputs;
    let mut g = Graph::new();
    let nodes = ctx.student.bind(&mut g);
    let xn = g.leaf(x.clone());

    let student = build_forward(
        &mut g,
        ctx.spec,
        &nodes,
        xn,
        student_pert(ctx, tag::BRANCH_STUDENT),
    );
    let xent = xent_loss_node(&mut g, student.log_probs, &ctx.batch.labels)?;
    let mut total = xent;
    let mut parts: [Option<NodeId>; 3] = [None; 3];
    let mut teacher_nodes = None;

    if c.consistency != 0.0 && ctx.method != Method::Mut {
        let cons = match ctx.method {
            Method::Pi => {
                let pert = Perturbation::noise(derive_seed(ctx.seed, &[tag::BRANCH_TARGET]));
                let target = build_forward(&mut g, ctx.spec, &nodes, xn, pert);
                consistency_node(&mut g, student.probs, target.probs)
            }
            Method::Mt => {
                let tnodes = ctx.teacher.expect("checked").bind(&mut g);
                let pert = Perturbation::noise(derive_seed(ctx.seed, &[tag::BRANCH_TEACHER]));
                let target = build_forward(&mut g, ctx.spec, &tnodes, xn, pert);
                teacher_nodes = Some(tnodes);
                consistency_node(&mut g, student.probs, target.probs)
            }
            Method::Ict => {
                let (perm, lam) = mix_pairs(
                    x.rows(),
                    ctx.mixup_alpha,
                    derive_seed(ctx.seed, &[tag::MIX_PAIRS]),
                )?;
                let tnodes = ctx.teacher.expect("checked").bind(&mut g);
                let teacher = build_forward(&mut g, ctx.spec, &tnodes, xn, Perturbation::NONE);
                teacher_nodes = Some(tnodes);
                let target = ict_target_node(&mut g, teacher.probs, &perm, &lam);
                let xm = g.leaf(mixup(x, &perm, &lam));
                let mixed = build_forward(
                    &mut g,
                    ctx.spec,
                    &nodes,
                    xm,
                    student_pert(ctx, tag::BRANCH_MIX),
                );
                consistency_node(&mut g, mixed.probs, target)
            }
            Method::Mut => unreachable!(),
        };
        let w = g.scale(cons, c.consistency);
        total = g.add(total, w);
        parts[0] = Some(cons);
    }

    if c.kl != 0.0 && ctx.vbi {
        let kl = vd::kl_total_node(&mut g, &nodes)?;
        let kl = g.scale(kl, ctx.kl_scale);
        let w = g.scale(kl, c.kl);
        total = g.add(total, w);
        parts[1] = Some(kl);
    }

    let mut g0_norm = None;
    if c.mur != 0.0 {
        let cfg = ctx
            .mur
            .ok_or_else(|| Error::config("a non-zero MUR coefficient needs a MUR config"))?;
        let vp = solve_batch(
            ctx.spec,
            ctx.student,
            x,
            cfg,
            derive_seed(ctx.seed, &[tag::MUR_SOLVER]),
            false,
        )?;
        g0_norm = Some(vp.mean_g0_norm());
        let target = build_forward(&mut g, ctx.spec, &nodes, xn, Perturbation::NONE);
        let xs = g.leaf(vp.points);
        let pert = Perturbation {
            noise_seed: None,
            weight_seed: ctx
                .vbi
                .then(|| derive_seed(ctx.seed, &[tag::MUR_STUDENT, tag::WEIGHTS])),
        };
        let at_star = build_forward(&mut g, ctx.spec, &nodes, xs, pert);
        let mur = consistency_node(&mut g, at_star.probs, target.probs);
        let w = g.scale(mur, c.mur);
        total = g.add(total, w);
        parts[2] = Some(mur);
    }

    let total_value = g.eval_scalar(total)?;
    let mut value = |id: Option<NodeId>| -> Result<f64> {
        match id {
            Some(id) => g.eval_scalar(id),
            None => Ok(0.0),
        }
    };
    let breakdown = LossBreakdown {
        xent: value(Some(xent))?,
        consistency: value(parts[0])?,
        kl: value(parts[1])?,
        mur: value(parts[2])?,
        total: total_value,
        lambda1: c.consistency,
        lambda2: c.kl,
        lambda3: c.mur,
    };
    Ok(LossGraph {
        graph: g,
        student: nodes,
        teacher: teacher_nodes,
        total,
        breakdown,
        g0_norm,
    })
}

/// Cross-entropy plus `λ·MUR` with deterministic weights.
pub fn mut_loss(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Batch,
    mur: &MurConfig,
    lambda: f64,
    seed: u64,
) -> Result<LossGraph> {
    combined_loss(&LossContext {
        spec,
        student: params,
        teacher: None,
        batch,
        method: Method::Mut,
        coefficients: Coefficients {
            consistency: 0.0,
            kl: 0.0,
            mur: lambda,
        },
        mur: Some(mur),
        vbi: false,
        kl_scale: 1.0,
        mixup_alpha: 1.0,
        seed,
    })
}
