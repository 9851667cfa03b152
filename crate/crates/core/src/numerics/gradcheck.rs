use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of a scalar function against central
/// differences with step `h`.
///
/// Returns `max |analytic − fd| / max(|analytic|, |fd|, 1e-8)` over every
/// element of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check"));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.tensor(vars[pi]);
        for j in 0..param.numel() {
            let mut plus = param.data().to_vec();
            let mut minus = plus.clone();
            plus[j] += h;
            minus[j] -= h;
            probe[pi] = Tensor::new(param.shape().to_vec(), plus)?;
            let fp = eval(&probe)?;
            probe[pi] = Tensor::new(param.shape().to_vec(), minus)?;
            let fm = eval(&probe)?;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        probe[pi] = param.clone();
    }
    Ok(worst)
}
