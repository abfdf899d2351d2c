use super::tensor::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) || !ok(self.beta2) || !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid(format!("bad Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moment buffers mirror the parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &[Matrix], config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Restores saved state; shapes are checked against `params`.
    pub fn from_state(
        params: &[Matrix],
        config: AdamConfig,
        step: u64,
        m: Vec<Matrix>,
        v: Vec<Matrix>,
    ) -> Result<Self> {
        config.validate()?;
        let same = |buf: &[Matrix]| {
            buf.len() == params.len() && buf.iter().zip(params).all(|(a, b)| a.shape() == b.shape())
        };
        if !same(&m) || !same(&v) {
            return Err(Error::invalid("optimizer state does not match parameter shapes"));
        }
        Ok(Self { config, step, m, v })
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Matrix] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Matrix] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid("parameter/gradient count mismatch"));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::invalid("parameter/gradient shape mismatch"));
            }
        }
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::non_finite("learning rate"));
        }
        if !grads.iter().all(Matrix::is_finite) {
            return Err(Error::non_finite("gradients"));
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::non_finite("parameters"));
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let p = params[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, &g) in grads[i].data().iter().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
