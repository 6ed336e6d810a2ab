//! Browser bindings: schedule curves, virtual-point solver traces and a
//! small two-moons trainer. Results cross the boundary as JSON strings.

use murssl::harness::{train_run, ExperimentConfig, MurSettings, RampConfig};
use murssl::model::{forward, ModelSpec, ParamSet};
use murssl::mur::{predictive_entropy, solve_batch, MurConfig, Solver};
use murssl::objectives::{Method, ScheduleSpec};
use murssl::Tensor;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Plot window used by the decision grid.
pub const X_RANGE: (f64, f64) = (-1.6, 2.6);
pub const Y_RANGE: (f64, f64) = (-1.2, 1.7);

pub type DemoResult<T> = std::result::Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// `samples` evenly spaced values of a ramp schedule over `[0, total]`.
pub fn ramp_values(
    peak: f64,
    rampup: usize,
    rampdown: usize,
    total: usize,
    samples: usize,
) -> DemoResult<Vec<f64>> {
    let spec = ScheduleSpec::new(peak, rampup, rampdown, total).map_err(err)?;
    let n = samples.max(2);
    (0..n)
        .map(|i| Ok(peak * spec.multiplier(i * total / (n - 1)).map_err(err)?))
        .collect()
}

/// A trained two-moons classifier and its training data.
pub struct Trained {
    spec: ModelSpec,
    params: ParamSet,
    labeled: Tensor,
    labels: Vec<usize>,
    unlabeled: Tensor,
    test_error: f64,
}

/// Desk config shrunk to `steps`, with schedules scaled to match.
fn demo_config(
    method: &str,
    radius_scale: f64,
    steps: usize,
    seed: u64,
) -> DemoResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig {
        steps,
        eval_every: steps.max(1),
        seeds: vec![seed],
        ..Default::default()
    };
    let shrink = |r: &RampConfig| RampConfig {
        peak: r.peak,
        rampup: r.rampup * steps / 4000,
        rampdown: r.rampdown * steps / 4000,
    };
    cfg.lambda1 = shrink(&cfg.lambda1);
    cfg.lambda2 = shrink(&cfg.lambda2);
    cfg.lambda3 = shrink(&cfg.lambda3);
    cfg.lr = shrink(&cfg.lr);
    let mur = match method {
        "supervised" => {
            cfg.lambda1.peak = 0.0;
            false
        }
        "pi" => false,
        "mt" => {
            cfg.method = Method::Mt;
            false
        }
        "mut" => {
            cfg.method = Method::Mut;
            cfg.lambda1.peak = 0.0;
            true
        }
        "mt+mur" => {
            cfg.method = Method::Mt;
            true
        }
        other => return Err(format!("unknown method `{other}`")),
    };
    if mur {
        cfg.lambda3.peak = 4.0;
        cfg.mur = Some(MurSettings {
            radius_scale,
            ..Default::default()
        });
    }
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

impl Trained {
    pub fn fit(method: &str, radius_scale: f64, steps: usize, seed: u64) -> DemoResult<Trained> {
        let cfg = demo_config(method, radius_scale, steps, seed)?;
        let run = train_run(&cfg, seed).map_err(err)?;
        let test_error = run.last().test_error;
        Ok(Trained {
            spec: run.spec,
            params: run.eval_params,
            labeled: run.data.labeled.inputs,
            labels: run.data.labeled.labels,
            unlabeled: run.data.unlabeled.inputs,
            test_error,
        })
    }

    pub fn test_error(&self) -> f64 {
        self.test_error
    }

    /// Class-1 probabilities on a `res × res` grid, row-major from the top.
    pub fn grid(&self, res: usize) -> DemoResult<Vec<f64>> {
        let res = res.max(2);
        let mut pts = Vec::with_capacity(res * res * 2);
        for i in 0..res {
            let y = Y_RANGE.1 - (Y_RANGE.1 - Y_RANGE.0) * i as f64 / (res - 1) as f64;
            for j in 0..res {
                let x = X_RANGE.0 + (X_RANGE.1 - X_RANGE.0) * j as f64 / (res - 1) as f64;
                pts.extend([x, y]);
            }
        }
        let x = Tensor::matrix(res * res, 2, pts).map_err(err)?;
        let out = forward(&self.spec, &self.params, &x, false, 0).map_err(err)?;
        Ok((0..res * res).map(|r| out.probs.get(r, 1)).collect())
    }

    pub fn points_json(&self) -> String {
        let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
        json!({
            "labeled": rows(&self.labeled),
            "labels": self.labels,
            "unlabeled": rows(&self.unlabeled),
        })
        .to_string()
    }

    /// Iterates of every solver from `(x, y)`, with the entropy at each.
    pub fn trajectories(
        &self,
        x: f64,
        y: f64,
        radius: f64,
        lr: f64,
        steps: usize,
        seed: u64,
    ) -> DemoResult<String> {
        let x0 = Tensor::row_vector(&[x, y]);
        let mut out = serde_json::Map::new();
        for (name, solver) in [
            ("direct", Solver::Direct),
            ("pga", Solver::Pga),
            ("laga", Solver::Laga),
            ("random", Solver::Random),
        ] {
            let cfg = MurConfig {
                radius,
                solver,
                lr,
                steps,
            };
            cfg.validate().map_err(err)?;
            let vp = solve_batch(&self.spec, &self.params, &x0, &cfg, seed, true).map_err(err)?;
            let mut path: Vec<(Vec<f64>, f64)> = vp.traces[0]
                .iter()
                .map(|s| (s.point.clone(), s.entropy))
                .collect();
            let end = vp.points.row(0).to_vec();
            if path.last().map(|(p, _)| p != &end).unwrap_or(true) {
                let h = self.entropy_at(&end)?;
                path.push((end, h));
            }
            let pts: Vec<_> = path
                .iter()
                .map(|(p, h)| json!({"x": p[0], "y": p[1], "h": h}))
                .collect();
            out.insert(name.to_string(), json!(pts));
        }
        out.insert("h0".into(), json!(self.entropy_at(&[x, y])?));
        Ok(serde_json::Value::Object(out).to_string())
    }

    fn entropy_at(&self, p: &[f64]) -> DemoResult<f64> {
        let out =
            forward(&self.spec, &self.params, &Tensor::row_vector(p), false, 0).map_err(err)?;
        Ok(predictive_entropy(out.probs.row(0)))
    }
}

/// Ramp schedule sampled for plotting.
#[wasm_bindgen(js_name = rampCurve)]
pub fn ramp_curve(
    peak: f64,
    rampup: usize,
    rampdown: usize,
    total: usize,
    samples: usize,
) -> Result<Vec<f64>, JsError> {
    ramp_values(peak, rampup, rampdown, total, samples).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub struct Demo {
    inner: Trained,
}

#[wasm_bindgen]
impl Demo {
    /// Methods: `supervised`, `pi`, `mt`, `mut`, `mt+mur`.
    #[wasm_bindgen(constructor)]
    pub fn new(method: &str, radius_scale: f64, steps: usize, seed: u32) -> Result<Demo, JsError> {
        Trained::fit(method, radius_scale, steps, seed as u64)
            .map(|inner| Demo { inner })
            .map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = testError)]
    pub fn test_error(&self) -> f64 {
        self.inner.test_error()
    }

    pub fn grid(&self, res: usize) -> Result<Vec<f64>, JsError> {
        self.inner.grid(res).map_err(|e| JsError::new(&e))
    }

    pub fn points(&self) -> String {
        self.inner.points_json()
    }

    pub fn trajectories(
        &self,
        x: f64,
        y: f64,
        radius: f64,
        lr: f64,
        steps: usize,
    ) -> Result<String, JsError> {
        self.inner
            .trajectories(x, y, radius, lr, steps, 0)
            .map_err(|e| JsError::new(&e))
    }
}
