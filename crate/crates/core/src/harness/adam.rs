use crate::error::{shape_err, Error, Result};
use crate::model::ModelParams;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| vec![T::zero(); t.numel()])
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Bias-corrected Adam update of one buffer at 1-based step `t`.
pub fn adam_update<T: Element>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    s: &AdamSettings,
) {
    let b1 = T::from_f64(s.beta1);
    let b2 = T::from_f64(s.beta2);
    let wd = T::from_f64(s.weight_decay);
    let c1 = T::from_f64(1.0 - s.beta1.powi(t as i32));
    let c2 = T::from_f64(1.0 - s.beta2.powi(t as i32));
    let lr = T::from_f64(s.learning_rate);
    let eps = T::from_f64(s.eps);
    let one = T::one();
    for i in 0..theta.len() {
        let g = grad[i] + wd * theta[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One optimizer step; `grads` are in parameter order.
pub fn adam_step<T: Element>(
    params: &mut ModelParams<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    settings: &AdamSettings,
) -> Result<()> {
    if grads.len() != params.len() {
        return shape_err(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        );
    }
    state.step += 1;
    for (i, ((name, p), g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return shape_err(
                "adam_step",
                format!("gradient {:?} for `{name}` {:?}", g.shape(), p.shape()),
            );
        }
        adam_update(
            p.data_mut(),
            g.data(),
            &mut state.m[i],
            &mut state.v[i],
            state.step,
            settings,
        );
    }
    Ok(())
}
