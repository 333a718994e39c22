use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Gradient entries smaller than this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-5;

fn evaluate<F>(params: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let value = g.value(loss);
    if value.numel() != 1 {
        return Err(Error::shape(format!(
            "gradient check needs a scalar loss, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.item())
}

/// Central finite-difference gradient of the scalar built by `build` with
/// respect to every element of every parameter.
pub fn numeric_gradients<F>(params: &[Tensor], build: F, step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = vec![0.0; params[p].numel()];
        for (i, slot) in grad.iter_mut().enumerate() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let up = evaluate(&work, &build)?;
            work[p].data_mut()[i] = orig - step;
            let down = evaluate(&work, &build)?;
            work[p].data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Analytic gradients of the graph built by `build` over `params`, via one
/// backward pass.
pub fn analytic_gradients<F>(params: &[Tensor], build: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars.iter().map(|&v| g.grad_or_zeros(v)).collect())
}

/// Compares analytic gradients against central finite differences and
/// returns the worst relative error `|a - n| / max(|a|, |n|, 1e-5)`.
pub fn check_gradients<F>(params: &[Tensor], build: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let analytic = analytic_gradients(params, &build)?;
    let numeric = numeric_gradients(params, &build, step)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.iter().zip(n) {
            let denom = x.abs().max(y.abs()).max(REL_FLOOR);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    Ok(worst)
}
