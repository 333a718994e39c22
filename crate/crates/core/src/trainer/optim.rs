use crate::error::{Error, Result};
use crate::params::ParamSet;

fn check(params: &ParamSet, grads: &[Vec<f64>], buffers: &ParamSet) -> Result<()> {
    if grads.len() != params.len() || buffers.len() != params.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} buffers",
            params.len(),
            grads.len(),
            buffers.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params.tensor(i).numel() {
            return Err(Error::shape(format!(
                "gradient of `{}` has {} values, expected {}",
                params.name(i),
                g.len(),
                params.tensor(i).numel()
            )));
        }
    }
    Ok(())
}

/// SGD with classical momentum: `v = mu * v + g`, `p -= lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub velocity: ParamSet,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: params.zeros_like("sgd."),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        check(params, grads, &self.velocity)?;
        for (i, g) in grads.iter().enumerate() {
            let v = self.velocity.tensor_mut(i).data_mut();
            let p = params.tensor_mut(i).data_mut();
            for ((pv, vv), &gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: params.zeros_like("adam.m."),
            v: params.zeros_like("adam.v."),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        check(params, grads, &self.m)?;
        check(params, grads, &self.v)?;
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m.tensor_mut(i).data_mut();
            let v = self.v.tensor_mut(i).data_mut();
            let p = params.tensor_mut(i).data_mut();
            for (((pv, mv), vv), &gv) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
