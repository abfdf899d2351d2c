use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauConfig {
    pub max_lr: f64,
    pub min_lr: f64,
    pub factor: f64,
    pub patience: u64,
    pub cooldown: u64,
    /// Relative improvement required to reset patience.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            max_lr: 1e-4,
            min_lr: 5e-7,
            factor: 0.5,
            patience: 3000,
            cooldown: 2000,
            threshold: 1e-4,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.max_lr) || !pos(self.min_lr) || self.min_lr > self.max_lr {
            return Err(Error::invalid(format!(
                "need 0 < min_lr <= max_lr, got {} and {}",
                self.min_lr, self.max_lr
            )));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::invalid(format!("factor {} not in (0, 1)", self.factor)));
        }
        if !pos(self.threshold) {
            return Err(Error::invalid("threshold must be positive"));
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning rate for a metric that should decrease.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauLr {
    config: PlateauConfig,
    lr: f64,
    best: f64,
    num_bad: u64,
    cooldown_left: u64,
}

impl PlateauLr {
    pub fn new(config: PlateauConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            lr: config.max_lr,
            best: f64::INFINITY,
            num_bad: 0,
            cooldown_left: 0,
        })
    }

    pub fn from_state(
        config: PlateauConfig,
        lr: f64,
        best: f64,
        num_bad: u64,
        cooldown_left: u64,
    ) -> Result<Self> {
        config.validate()?;
        if !(config.min_lr..=config.max_lr).contains(&lr) {
            return Err(Error::invalid(format!("stored learning rate {lr} out of range")));
        }
        Ok(Self {
            config,
            lr,
            best,
            num_bad,
            cooldown_left,
        })
    }

    pub fn config(&self) -> PlateauConfig {
        self.config
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn num_bad(&self) -> u64 {
        self.num_bad
    }

    pub fn cooldown_left(&self) -> u64 {
        self.cooldown_left
    }

    /// Feeds one metric value and returns the learning rate to use next.
    pub fn step(&mut self, metric: f64) -> Result<f64> {
        if !metric.is_finite() {
            return Err(Error::non_finite("plateau metric"));
        }
        if metric < self.best * (1.0 - self.config.threshold) {
            self.best = metric;
            self.num_bad = 0;
        } else {
            self.num_bad += 1;
        }
        if self.cooldown_left > 0 {
            self.cooldown_left -= 1;
            self.num_bad = 0;
        }
        if self.num_bad >= self.config.patience.max(1) {
            self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
            self.cooldown_left = self.config.cooldown;
            self.num_bad = 0;
        }
        Ok(self.lr)
    }
}
