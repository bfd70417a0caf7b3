use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named trainable tensor with its gradient slot and Adam moments.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.len();
        Self {
            name: name.into(),
            value,
            grad: None,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(Error::dim(format!(
                "gradient for {} has shape {:?}, parameter is {:?}",
                self.name,
                g.shape(),
                self.value.shape()
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => {
                self.grad = Some(g.clone());
                Ok(())
            }
        }
    }

    /// Replaces the value, resetting optimizer state when the shape changes.
    pub fn set_value(&mut self, value: Tensor) {
        if value.shape() != self.value.shape() {
            self.first_moment = vec![0.0; value.len()];
            self.second_moment = vec![0.0; value.len()];
            self.step = 0;
        }
        self.value = value;
    }
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter. Fails without touching
/// anything if some parameter has no gradient.
pub fn adam_step(params: &mut [&mut Parameter], cfg: &AdamConfig) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::State(format!("parameter {} has no gradient", p.name)));
    }
    for p in params.iter_mut() {
        let p = &mut **p;
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let grad = p.grad.as_ref().expect("checked above");
        for (((v, &g), m), s) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(&mut p.first_moment)
            .zip(&mut p.second_moment)
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *s = cfg.beta2 * *s + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let s_hat = *s / c2;
            *v -= cfg.lr * m_hat / (s_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
