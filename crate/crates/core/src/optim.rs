//! Nesterov momentum SGD.

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Nesterov {
    pub momentum: f64,
    /// L2 penalty on weights and biases; log-variances are exempt.
    pub weight_decay: f64,
    velocity: Option<ParamSet>,
}

impl Nesterov {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(Nesterov {
            momentum,
            weight_decay,
            velocity: None,
        })
    }

    /// `v ← μv + g;  p ← p − lr·(g + μv)`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        if grads.layers.len() != params.layers.len() {
            return Err(Error::usage("gradient and parameter depth differ"));
        }
        let mu = self.momentum;
        let wd = self.weight_decay;
        let velocity = self.velocity.get_or_insert_with(|| zeros_like(params));
        let update = |p: &mut Tensor, g: &Tensor, v: &mut Tensor, decay: f64| -> Result<()> {
            p.check_same(g, "optimizer")?;
            for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let gi = gi + decay * *pi;
                *vi = mu * *vi + gi;
                *pi -= lr * (gi + mu * *vi);
            }
            Ok(())
        };
        for ((p, g), v) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut velocity.layers)
        {
            update(&mut p.weight, &g.weight, &mut v.weight, wd)?;
            update(&mut p.bias, &g.bias, &mut v.bias, wd)?;
            if let (Some(p), Some(g), Some(v)) =
                (p.log_var.as_mut(), g.log_var.as_ref(), v.log_var.as_mut())
            {
                update(p, g, v, 0.0)?;
            }
        }
        Ok(())
    }
}

fn zeros_like(p: &ParamSet) -> ParamSet {
    let mut z = p.clone();
    for l in &mut z.layers {
        l.weight = Tensor::zeros_like(&l.weight);
        l.bias = Tensor::zeros_like(&l.bias);
        l.log_var = l.log_var.as_ref().map(Tensor::zeros_like);
    }
    z
}
