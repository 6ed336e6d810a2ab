#![allow(dead_code)]

use murssl::model::{LayerParams, ModelSpec, ParamSet};
use murssl::mur::entropies;
use murssl::Tensor;

/// Two-class linear softmax on 2-D inputs with logit gap `3x₁ + 1.6x₂`.
pub fn logistic_model() -> (ModelSpec, ParamSet) {
    let spec = ModelSpec {
        widths: vec![2, 2],
        ..ModelSpec::desk(2, 2)
    };
    let params = ParamSet {
        layers: vec![LayerParams {
            weight: Tensor::matrix(2, 2, vec![1.5, -1.5, 0.8, -0.8]).unwrap(),
            bias: Tensor::row_vector(&[0.0, 0.0]),
            log_var: None,
        }],
    };
    (spec, params)
}

pub const LOGISTIC_X0: [f64; 2] = [0.5, 0.2];
pub const LOGISTIC_RADIUS: f64 = 1.0;

/// Maximum entropy over a 100 × 100 polar grid covering the closed ball.
pub fn grid_max_entropy(spec: &ModelSpec, params: &ParamSet, x0: &[f64], r: f64) -> f64 {
    let mut pts = Vec::with_capacity(20_000);
    for i in 0..100 {
        let rho = r * (i + 1) as f64 / 100.0;
        for j in 0..100 {
            let t = std::f64::consts::TAU * j as f64 / 100.0;
            pts.push(x0[0] + rho * t.cos());
            pts.push(x0[1] + rho * t.sin());
        }
    }
    let x = Tensor::matrix(pts.len() / 2, 2, pts).unwrap();
    entropies(spec, params, &x)
        .unwrap()
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn entropy_at(spec: &ModelSpec, params: &ParamSet, x: &[f64]) -> f64 {
    entropies(spec, params, &Tensor::row_vector(x)).unwrap()[0]
}
