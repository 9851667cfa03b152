use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Hyperparameters for decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment buffers and step counter for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        AdamWState {
            config,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }

    /// One AdamW update with a per-parameter learning rate.
    ///
    /// Parameters whose gradient is `None` are excluded entirely: neither the
    /// moments nor the value change, and no weight decay is applied.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&[f64]>], lrs: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || lrs.len() != params.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} params, {} grads, {} lrs, state for {}", params.len(), grads.len(), lrs.len(), self.m.len()),
            ));
        }
        if let Some(lr) = lrs.iter().find(|&&lr| !(lr >= 0.0)) {
            return Err(Error::invalid(format!("learning rate {lr} must be >= 0")));
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, param) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            if g.len() != param.numel() {
                return Err(Error::shape("adamw_step", format!("param {i}: {} grads for {} values", g.len(), param.numel())));
            }
            let lr = lrs[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = param.data().to_vec();
            for j in 0..data.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] = data[j] - lr * m_hat / (v_hat.sqrt() + eps) - lr * weight_decay * data[j];
            }
            *param = Tensor::new(param.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

/// Single-tensor convenience wrapper around [`AdamWState::step`].
pub fn adamw_step(param: &Tensor, grad: &[f64], state: &mut AdamWState, lr: f64) -> Result<Tensor> {
    let mut params = [param.clone()];
    state.step(&mut params, &[Some(grad)], &[lr])?;
    let [p] = params;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(p: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let param = Tensor::from_vec(vec![p]);
        let mut st = AdamWState::new(
            AdamWConfig {
                weight_decay: wd,
                ..AdamWConfig::default()
            },
            std::slice::from_ref(&param),
        );
        adamw_step(&param, &[g], &mut st, lr).unwrap().item()
    }

    #[test]
    fn pure_decoupled_decay() {
        assert!((one(1.0, 0.0, 0.1, 0.05) - 0.995).abs() < 1e-15);
    }

    #[test]
    fn first_step_hand_value() {
        // m̂ = 0.5, v̂ = 0.25 => step direction 0.5/(0.5+1e-8)
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * 0.05;
        let got = one(1.0, 0.5, 0.1, 0.05);
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.895).abs() < 1e-7);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let p = 0.123456789_f64;
        assert_eq!(one(p, 0.0, 0.3, 0.0).to_bits(), p.to_bits());
    }

    #[test]
    fn none_gradient_leaves_param_untouched() {
        let mut params = vec![Tensor::from_vec(vec![1.0, 2.0]), Tensor::from_vec(vec![3.0])];
        let before = params.clone();
        let mut st = AdamWState::new(AdamWConfig::default(), &params);
        st.step(&mut params, &[None, Some(&[1.0])], &[0.1, 0.1]).unwrap();
        assert!(params[0].bit_eq(&before[0]));
        assert!(!params[1].bit_eq(&before[1]));
    }

    #[test]
    fn shape_mismatch_is_error() {
        let p = Tensor::from_vec(vec![1.0, 2.0]);
        let mut st = AdamWState::new(AdamWConfig::default(), std::slice::from_ref(&p));
        assert!(adamw_step(&p, &[1.0], &mut st, 0.1).is_err());
    }
}
