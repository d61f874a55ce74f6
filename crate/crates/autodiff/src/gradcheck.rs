//! Central-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Gradients with a magnitude below this are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Max relative error between reverse-mode and central-difference gradients
/// of the scalar built by `f` with respect to every entry of `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect::<Result<_>>()?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let x = input.data()[k];
            probe[i].data_mut()[k] = x + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[k] = x - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[k] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[i].data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Same check with respect to every scalar of every parameter in `store`.
pub fn grad_check_params<F>(f: F, store: &ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let mut analytic: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
    for (id, grad) in g.param_grads()? {
        analytic[id.index()].add_assign(&grad);
    }

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        for k in 0..store.value(id).len() {
            let x = store.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = x + eps;
            let plus = eval(&probe)?;
            probe.value_mut(id).data_mut()[k] = x - eps;
            let minus = eval(&probe)?;
            probe.value_mut(id).data_mut()[k] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[id.index()].data()[k], numeric));
        }
    }
    Ok(worst)
}
