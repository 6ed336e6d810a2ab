//! Experiment configs, the training loop, metric streams and summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use web_time::Instant;

use crate::data::{self, BatchSampler, SslDataset};
use crate::error::{Error, Result};
use crate::model::{self, CheckpointMeta, ModelSpec, ParamSet, WeightMode};
use crate::mur::{self, MurConfig, Solver};
use crate::objectives::{
    combined_loss, ema_update, Coefficients, LossBreakdown, LossContext, Method, ScheduleSpec,
    TeacherState,
};
use crate::optim::Nesterov;
use crate::rng::{derive_seed, tag};
use crate::tensor::Tensor;
use crate::vd;

/// Fraction of the median nearest-neighbour distance used as the default radius.
pub const DEFAULT_RADIUS_FACTOR: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    Rings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Training points; the test set has the same size.
    pub n: usize,
    pub noise: f64,
    pub labeled: usize,
    pub zca: bool,
    pub zca_epsilon: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::TwoMoons,
            n: 200,
            noise: 0.1,
            labeled: 6,
            zca: false,
            zca_epsilon: 1e-5,
        }
    }
}

impl DatasetConfig {
    pub fn generate(&self, seed: u64) -> Result<SslDataset> {
        let seed = derive_seed(seed, &[tag::DATA]);
        let raw = match self.kind {
            DatasetKind::TwoMoons => data::make_two_moons(self.n, self.noise, self.labeled, seed)?,
            DatasetKind::Rings => data::make_rings(self.n, self.noise, self.labeled, seed)?,
        };
        if !self.zca {
            return Ok(raw);
        }
        let t = data::fit_zca(&raw.train_inputs(), self.zca_epsilon)?;
        raw.map_inputs(|x| data::apply_zca(&t, x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub input_noise: f64,
    pub dropout: f64,
    pub log_var_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64, 64],
            leaky_slope: 0.1,
            input_noise: 0.15,
            dropout: 0.0,
            log_var_init: -10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MurSettings {
    pub solver: Solver,
    /// Absolute radius; when absent the data-scaled default times `radius_scale`.
    pub radius: Option<f64>,
    pub radius_scale: f64,
    pub lr: f64,
    pub steps: usize,
}

impl Default for MurSettings {
    fn default() -> Self {
        MurSettings {
            solver: Solver::Direct,
            radius: None,
            radius_scale: 1.0,
            lr: 0.1,
            steps: 1,
        }
    }
}

/// A schedule whose total length is the run length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RampConfig {
    pub peak: f64,
    pub rampup: usize,
    pub rampdown: usize,
}

impl Default for RampConfig {
    fn default() -> Self {
        RampConfig {
            peak: 0.0,
            rampup: 400,
            rampdown: 800,
        }
    }
}

impl RampConfig {
    pub fn peak(peak: f64) -> Self {
        RampConfig {
            peak,
            ..Default::default()
        }
    }

    pub fn schedule(&self, total: usize) -> ScheduleSpec {
        ScheduleSpec {
            peak: self.peak,
            rampup: self.rampup,
            rampdown: self.rampdown,
            total,
        }
    }
}

/// How the summed KL enters the loss before λ₂.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlScaling {
    Sum,
    /// Divided by the training-set size.
    PerExample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub method: Method,
    pub vbi: bool,
    pub mur: Option<MurSettings>,
    /// Forces the random-sphere solver.
    pub rr_baseline: bool,
    pub lambda1: RampConfig,
    pub lambda2: RampConfig,
    pub lambda3: RampConfig,
    pub lr: RampConfig,
    pub kl_scaling: KlScaling,
    pub ema_momentum: Option<f64>,
    /// Momentum after ramp-up ends; unset keeps `ema_momentum`.
    pub ema_momentum_late: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mixup_alpha: f64,
    pub steps: usize,
    pub eval_every: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            method: Method::Pi,
            vbi: false,
            mur: None,
            rr_baseline: false,
            lambda1: RampConfig::peak(10.0),
            lambda2: RampConfig::peak(0.05),
            lambda3: RampConfig::peak(0.0),
            lr: RampConfig::peak(0.05),
            kl_scaling: KlScaling::PerExample,
            ema_momentum: Some(0.99),
            ema_momentum_late: None,
            momentum: 0.9,
            weight_decay: 2e-4,
            mixup_alpha: 1.0,
            steps: 4000,
            eval_every: 100,
            batch_labeled: 5,
            batch_unlabeled: 15,
            seeds: vec![0],
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.eval_every == 0 {
            return Err(Error::config("steps and eval_every must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.batch_labeled == 0 {
            return Err(Error::config("batches need at least one labeled example"));
        }
        data::check_counts(self.dataset.n, self.dataset.labeled)?;
        if self.method.needs_teacher() {
            match self.ema_momentum {
                None => {
                    return Err(Error::config(format!(
                        "method `{}` requires ema_momentum",
                        self.method.name()
                    )))
                }
                Some(m) if !(0.0..=1.0).contains(&m) => {
                    return Err(Error::config("ema_momentum must lie in [0, 1]"))
                }
                _ => {}
            }
        }
        if let Some(m) = self.ema_momentum_late {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::config("ema_momentum_late must lie in [0, 1]"));
            }
        }
        if self.method == Method::Mut && self.mur.is_none() {
            return Err(Error::config("method `mut` requires a MUR config"));
        }
        if self.rr_baseline && self.mur.is_none() {
            return Err(Error::config(
                "the RR baseline requires a MUR config with a radius",
            ));
        }
        if self.lambda3.peak != 0.0 && self.mur.is_none() {
            return Err(Error::config("a non-zero lambda3 requires a MUR config"));
        }
        if let Some(m) = &self.mur {
            if let Some(r) = m.radius {
                if !(r > 0.0) {
                    return Err(Error::config(format!("MUR radius must be > 0, got {r}")));
                }
            }
            if !(m.radius_scale > 0.0) {
                return Err(Error::config("radius_scale must be > 0"));
            }
            MurConfig {
                radius: 1.0,
                solver: m.solver,
                lr: m.lr,
                steps: m.steps,
            }
            .validate()?;
        }
        for (name, r) in [
            ("lambda1", &self.lambda1),
            ("lambda2", &self.lambda2),
            ("lambda3", &self.lambda3),
            ("lr", &self.lr),
        ] {
            r.schedule(self.steps).validate().map_err(|e| match e {
                Error::Config(msg) => Error::config(format!("{name}: {msg}")),
                other => other,
            })?;
        }
        if !(self.mixup_alpha > 0.0) {
            return Err(Error::config("mixup_alpha must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::config(
                "momentum must lie in [0, 1) and weight decay be >= 0",
            ));
        }
        Ok(())
    }

    pub fn model_spec(&self, input: usize, classes: usize) -> ModelSpec {
        let mut widths = vec![input];
        widths.extend_from_slice(&self.model.hidden);
        widths.push(classes);
        ModelSpec {
            widths,
            leaky_slope: self.model.leaky_slope,
            input_noise: self.model.input_noise,
            dropout: self.model.dropout,
            weight_mode: if self.vbi {
                WeightMode::Variational
            } else {
                WeightMode::Deterministic
            },
            log_var_init: self.model.log_var_init,
        }
    }

    /// The MUR config for a dataset, or `None` when MUR is off.
    pub fn resolve_mur(&self, data: &SslDataset) -> Option<MurConfig> {
        let m = self.mur.as_ref()?;
        let radius = m
            .radius
            .unwrap_or_else(|| default_radius(data) * m.radius_scale);
        Some(MurConfig {
            radius,
            solver: if self.rr_baseline {
                Solver::Random
            } else {
                m.solver
            },
            lr: m.lr,
            steps: m.steps,
        })
    }
}

/// `DEFAULT_RADIUS_FACTOR` times the median nearest-neighbour distance of the
/// unlabeled set.
pub fn default_radius(data: &SslDataset) -> f64 {
    DEFAULT_RADIUS_FACTOR * data::median_nn_distance(&data.unlabeled.inputs)
}

/// SHA-256 of the canonical (key-sorted, compact) JSON form.
pub fn config_hash_json(text: &str) -> Result<String> {
    let v: serde_json::Value = serde_json::from_str(text)?;
    Ok(hex::encode(Sha256::digest(
        serde_json::to_string(&v)?.as_bytes(),
    )))
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    config_hash_json(&serde_json::to_string(cfg).expect("config serializes")).expect("valid json")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    /// Percent.
    pub test_error: f64,
    pub sensitivity: f64,
    pub fraction_pruned: f64,
    /// Summed KL of the current parameters (0 without VBI).
    pub kl_value: f64,
    pub g0_norm: f64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "step,xent,consistency,kl,mur,total,lambda1,lambda2,lambda3,lr,test_error,sensitivity,fraction_pruned,kl_value,g0_norm";

impl MetricsRecord {
    /// One CSV row in `METRICS_HEADER` order. Wall-clock is excluded so the
    /// stream is reproducible.
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.step,
            l.xent,
            l.consistency,
            l.kl,
            l.mur,
            l.total,
            l.lambda1,
            l.lambda2,
            l.lambda3,
            self.lr,
            self.test_error,
            self.sensitivity,
            self.fraction_pruned,
            self.kl_value,
            self.g0_norm
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub spec: ModelSpec,
    pub params: ParamSet,
    /// The network used for evaluation (teacher for MT/ICT).
    pub eval_params: ParamSet,
    pub data: SslDataset,
    pub mur: Option<MurConfig>,
    pub records: Vec<MetricsRecord>,
}

impl RunResult {
    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("at least one eval")
    }

    pub fn final_record(&self) -> SeedFinal {
        let r = self.last();
        SeedFinal {
            seed: self.seed,
            step: r.step,
            test_error: r.test_error,
            sensitivity: r.sensitivity,
            fraction_pruned: r.fraction_pruned,
            g0_norm: r.g0_norm,
            radius: self.mur.as_ref().map(|m| m.radius),
        }
    }
}

/// Test error, mean sensitivity and mean ‖g₀‖₂ of the eval network.
pub fn evaluate(spec: &ModelSpec, params: &ParamSet, data: &SslDataset) -> Result<(f64, f64, f64)> {
    let x = &data.test.inputs;
    let out = model::forward(spec, params, x, false, 0)?;
    let wrong = out
        .predictions()
        .iter()
        .zip(&data.test.labels)
        .filter(|(p, l)| p != l)
        .count();
    let err = 100.0 * wrong as f64 / data.test.len().max(1) as f64;
    let sens = model::sensitivities(spec, params, x)?;
    let (_, g0) = mur::entropy_and_gradient(spec, params, x)?;
    let n = x.rows().max(1) as f64;
    let g0_mean = (0..x.rows())
        .map(|i| g0.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / n;
    Ok((err, sens.iter().sum::<f64>() / n, g0_mean))
}

/// One full training run for `seed`.
pub fn train_run(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    cfg.validate()?;
    let data = cfg.dataset.generate(seed)?;
    let spec = cfg.model_spec(data.dim(), data.classes);
    let mur_cfg = cfg.resolve_mur(&data);
    let mut params = ParamSet::init(&spec, seed)?;
    let mut teacher = match cfg.method.needs_teacher() {
        true => Some(TeacherState::new(
            &params,
            cfg.ema_momentum.expect("validated"),
        )?),
        false => None,
    };
    let mut opt = Nesterov::new(cfg.momentum, cfg.weight_decay)?;
    let mut sampler = BatchSampler::new(
        cfg.batch_labeled,
        cfg.batch_unlabeled,
        derive_seed(seed, &[tag::SAMPLER]),
    )?;
    let l1 = cfg.lambda1.schedule(cfg.steps);
    let l2 = cfg.lambda2.schedule(cfg.steps);
    let l3 = cfg.lambda3.schedule(cfg.steps);
    let lr_sched = cfg.lr.schedule(cfg.steps);
    let kl_scale = match cfg.kl_scaling {
        KlScaling::Sum => 1.0,
        KlScaling::PerExample => 1.0 / (data.labeled.len() + data.unlabeled.len()) as f64,
    };
    let started = Instant::now();
    let mut records = Vec::new();
    for t in 0..cfg.steps {
        let batch = sampler.next_batch(&data)?;
        let coefficients = Coefficients {
            consistency: l1.peak * l1.multiplier(t)?,
            kl: if cfg.vbi {
                l2.peak * l2.multiplier(t)?
            } else {
                0.0
            },
            mur: if mur_cfg.is_some() {
                l3.peak * l3.multiplier(t)?
            } else {
                0.0
            },
        };
        let lg = combined_loss(&LossContext {
            spec: &spec,
            student: &params,
            teacher: teacher.as_ref().map(|t| &t.params),
            batch: &batch,
            method: cfg.method,
            coefficients,
            mur: mur_cfg.as_ref(),
            vbi: cfg.vbi,
            kl_scale,
            mixup_alpha: cfg.mixup_alpha,
            seed: derive_seed(seed, &[t as u64]),
        })?;
        let grads = lg.gradients()?;
        let lr = lr_sched.peak * lr_sched.multiplier(t)?;
        opt.step(&mut params, &grads, lr)?;
        if let Some(ts) = teacher.as_mut() {
            if let Some(late) = cfg.ema_momentum_late {
                if t >= cfg.lambda1.rampup {
                    ts.momentum = late;
                }
            }
            *ts = ema_update(ts, &params)?;
        }
        let step = t + 1;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let eval_params = teacher.as_ref().map_or(&params, |t| &t.params);
            let (test_error, sensitivity, g0_norm) = evaluate(&spec, eval_params, &data)?;
            let (fraction_pruned, kl_value) = if cfg.vbi {
                (
                    vd::sparsity_report(&spec, &params, vd::DEFAULT_PRUNE_THRESHOLD)?
                        .fraction_pruned,
                    vd::kl_log_uniform(&params)?.value,
                )
            } else {
                (0.0, 0.0)
            };
            records.push(MetricsRecord {
                step,
                loss: lg.breakdown,
                lr,
                test_error,
                sensitivity,
                fraction_pruned,
                kl_value,
                g0_norm,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    let eval_params = teacher.map_or_else(|| params.clone(), |t| t.params);
    Ok(RunResult {
        seed,
        spec,
        params,
        eval_params,
        data,
        mur: mur_cfg,
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat {
                mean: 0.0,
                std: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFinal {
    pub seed: u64,
    pub step: usize,
    pub test_error: f64,
    pub sensitivity: f64,
    pub fraction_pruned: f64,
    pub g0_norm: f64,
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seeds: Vec<SeedFinal>,
    pub test_error: Stat,
    pub sensitivity: Stat,
    pub fraction_pruned: Stat,
    pub g0_norm: Stat,
}

pub fn emit_summary(config_hash: &str, finals: &[SeedFinal]) -> Result<Summary> {
    if finals.is_empty() {
        return Err(Error::usage("a summary needs at least one record"));
    }
    let stat = |f: fn(&SeedFinal) -> f64| Stat::of(&finals.iter().map(f).collect::<Vec<_>>());
    Ok(Summary {
        config_hash: config_hash.to_string(),
        seeds: finals.to_vec(),
        test_error: stat(|s| s.test_error),
        sensitivity: stat(|s| s.sensitivity),
        fraction_pruned: stat(|s| s.fraction_pruned),
        g0_norm: stat(|s| s.g0_norm),
    })
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
    pub summary: Summary,
}

/// Trains every seed (in parallel) and, with an output directory, writes
/// `seed-<n>/{metrics.csv,timing.csv,checkpoint.bin,dataset.csv}` and
/// `summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&s| train_run(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let finals: Vec<SeedFinal> = runs.iter().map(RunResult::final_record).collect();
    let summary = emit_summary(&config_hash(cfg), &finals)?;
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), cfg.to_json())?;
        for run in &runs {
            write_run(&dir.join(format!("seed-{}", run.seed)), run)?;
        }
        write_summary(&dir.join("summary.json"), &summary)?;
    }
    Ok(ExperimentResult { runs, summary })
}

pub fn write_run(dir: &Path, run: &RunResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&run.records))?;
    let mut timing = String::from("step,wall_ms\n");
    for r in &run.records {
        writeln!(timing, "{},{:.3}", r.step, r.wall_ms).expect("string write");
    }
    fs::write(dir.join("timing.csv"), timing)?;
    let meta = CheckpointMeta {
        spec: run.spec.clone(),
        seed: run.seed,
        step: run.last().step,
    };
    model::save_checkpoint(&dir.join("checkpoint.bin"), &run.eval_params, &meta)?;
    data::write_dataset_csv(&dir.join("dataset.csv"), &run.data)?;
    Ok(())
}

/// One grid cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub radius: f64,
    pub method: String,
    pub errors: Vec<f64>,
    pub mean_error: f64,
    pub std_error: f64,
}

impl GridRow {
    fn new(radius: f64, method: &str, runs: &[RunResult]) -> GridRow {
        let errors: Vec<f64> = runs.iter().map(|r| r.last().test_error).collect();
        let s = Stat::of(&errors);
        GridRow {
            radius,
            method: method.to_string(),
            errors,
            mean_error: s.mean,
            std_error: s.std,
        }
    }
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("radius,method,mean_error,std_error\n");
    for r in rows {
        writeln!(
            out,
            "{:?},{},{:?},{:?}",
            r.radius, r.method, r.mean_error, r.std_error
        )
        .expect("string write");
    }
    out
}

/// Whether grid values are absolute radii or multiples of the data default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadiusUnit {
    Absolute,
    Scaled,
}

fn with_radius(cfg: &ExperimentConfig, value: f64, unit: RadiusUnit) -> ExperimentConfig {
    let mut c = cfg.clone();
    let m = c.mur.get_or_insert_with(MurSettings::default);
    match unit {
        RadiusUnit::Absolute => m.radius = Some(value),
        RadiusUnit::Scaled => {
            m.radius = None;
            m.radius_scale = value;
        }
    }
    c.output_dir = None;
    c
}

fn without_mur(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.mur = None;
    c.rr_baseline = false;
    c.lambda3.peak = 0.0;
    if c.method == Method::Mut {
        c.method = Method::Pi;
        c.lambda1.peak = 0.0;
    }
    c.output_dir = None;
    c
}

fn runs_of(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    Ok(run_experiment(cfg)?.runs)
}

/// Trains `cfg` at each radius; rows are labelled with the radius as given.
pub fn sweep_radius(
    cfg: &ExperimentConfig,
    radii: &[f64],
    unit: RadiusUnit,
) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    let method = if cfg.rr_baseline { "rr" } else { "mur" };
    let rows = radii
        .iter()
        .map(|&r| {
            let runs = if r == 0.0 {
                runs_of(&without_mur(cfg))?
            } else {
                runs_of(&with_radius(cfg, r, unit))?
            };
            Ok(GridRow::new(r, method, &runs))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("sweep_radius.csv"), grid_csv(&rows))?;
    }
    Ok(rows)
}

/// MUR (direct solver) against the random-sphere baseline on each radius.
/// A zero radius maps both rows to the run without MUR.
pub fn compare_rr(cfg: &ExperimentConfig, radii: &[f64], unit: RadiusUnit) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &r in radii {
        if r == 0.0 {
            let runs = runs_of(&without_mur(cfg))?;
            rows.push(GridRow::new(r, "mur", &runs));
            rows.push(GridRow::new(r, "rr", &runs));
            continue;
        }
        let mut c = with_radius(cfg, r, unit);
        c.rr_baseline = false;
        c.mur.as_mut().expect("set").solver = Solver::Direct;
        rows.push(GridRow::new(r, "mur", &runs_of(&c)?));
        c.rr_baseline = true;
        rows.push(GridRow::new(r, "rr", &runs_of(&c)?));
    }
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("compare_rr.csv"), grid_csv(&rows))?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityHistogram {
    pub values: Vec<f64>,
    pub bin_width: f64,
    /// `counts[k]` covers `[k·w, (k+1)·w)`.
    pub counts: Vec<usize>,
}

impl SensitivityHistogram {
    pub fn new(values: Vec<f64>, bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0) {
            return Err(Error::usage("bin width must be > 0"));
        }
        let bins = values
            .iter()
            .map(|v| (v / bin_width).floor() as usize + 1)
            .max()
            .unwrap_or(0);
        let mut counts = vec![0; bins];
        for v in &values {
            counts[(v / bin_width).floor() as usize] += 1;
        }
        Ok(SensitivityHistogram {
            values,
            bin_width,
            counts,
        })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    pub fn values_csv(&self) -> String {
        let mut out = String::from("example,sensitivity\n");
        for (i, v) in self.values.iter().enumerate() {
            writeln!(out, "{i},{v:?}").expect("string write");
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            let lo = k as f64 * self.bin_width;
            writeln!(out, "{lo:?},{:?},{c}", lo + self.bin_width).expect("string write");
        }
        out
    }
}

/// Per-example sensitivities of a checkpoint on `x`.
pub fn sensitivity_sweep(
    checkpoint: &Path,
    x: &Tensor,
    bin_width: f64,
) -> Result<SensitivityHistogram> {
    let (params, meta) = model::load_checkpoint(checkpoint)?;
    SensitivityHistogram::new(model::sensitivities(&meta.spec, &params, x)?, bin_width)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualPointRow {
    pub id: usize,
    pub x0: Vec<f64>,
    pub x_star: Vec<f64>,
    pub entropy_x0: f64,
    pub entropy_x_star: f64,
}

pub fn virtual_point_rows(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    cfg: &MurConfig,
    seed: u64,
) -> Result<Vec<VirtualPointRow>> {
    let vp = mur::solve_batch(spec, params, x, cfg, seed, false)?;
    let h0 = mur::entropies(spec, params, x)?;
    let hs = mur::entropies(spec, params, &vp.points)?;
    Ok((0..x.rows())
        .map(|i| VirtualPointRow {
            id: i,
            x0: x.row(i).to_vec(),
            x_star: vp.points.row(i).to_vec(),
            entropy_x0: h0[i],
            entropy_x_star: hs[i],
        })
        .collect())
}

pub fn virtual_points_csv(rows: &[VirtualPointRow]) -> String {
    let d = rows.first().map_or(0, |r| r.x0.len());
    let mut out = String::from("example_id");
    for j in 0..d {
        write!(out, ",x0_{j}").expect("string write");
    }
    for j in 0..d {
        write!(out, ",xstar_{j}").expect("string write");
    }
    out.push_str(",entropy_x0,entropy_xstar\n");
    for r in rows {
        write!(out, "{}", r.id).expect("string write");
        for v in r.x0.iter().chain(&r.x_star) {
            write!(out, ",{v:?}").expect("string write");
        }
        writeln!(out, ",{:?},{:?}", r.entropy_x0, r.entropy_x_star).expect("string write");
    }
    out
}
