use super::tensor::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaConfig {
    pub decay: f64,
    pub start_step: u64,
    pub update_interval: u64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            decay: 0.995,
            start_step: 30_000,
            update_interval: 16,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::invalid(format!("EMA decay {} not in [0, 1)", self.decay)));
        }
        if self.update_interval == 0 {
            return Err(Error::invalid("EMA update interval must be positive"));
        }
        Ok(())
    }
}

/// Shadow copy of the model parameters.
///
/// The first eligible update copies the parameters into the shadow; later
/// updates blend. Until then [`EmaState::updates`] is 0 and callers should use
/// the raw parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    config: EmaConfig,
    shadow: Vec<Matrix>,
    updates: u64,
}

impl EmaState {
    pub fn new(params: &[Matrix], config: EmaConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            shadow: params.to_vec(),
            updates: 0,
        })
    }

    pub fn from_state(config: EmaConfig, shadow: Vec<Matrix>, updates: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            shadow,
            updates,
        })
    }

    pub fn config(&self) -> EmaConfig {
        self.config
    }

    pub fn shadow(&self) -> &[Matrix] {
        &self.shadow
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn is_due(&self, step: u64) -> bool {
        step >= self.config.start_step && step.is_multiple_of(self.config.update_interval)
    }

    /// Applies the update for `step` if it is due. Returns whether the shadow changed.
    pub fn update(&mut self, params: &[Matrix], step: u64) -> Result<bool> {
        if params.len() != self.shadow.len()
            || params.iter().zip(&self.shadow).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::invalid("EMA shadow shape mismatch"));
        }
        if !self.is_due(step) {
            return Ok(false);
        }
        if self.updates == 0 {
            self.shadow = params.to_vec();
        } else {
            let d = self.config.decay;
            for (s, p) in self.shadow.iter_mut().zip(params) {
                for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
                    *sv = d * *sv + (1.0 - d) * pv;
                }
            }
        }
        self.updates += 1;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(v: f64) -> Vec<Matrix> {
        vec![Matrix::from_vec(1, 2, vec![v, -v]).unwrap()]
    }

    fn cfg(decay: f64, start_step: u64, update_interval: u64) -> EmaConfig {
        EmaConfig {
            decay,
            start_step,
            update_interval,
        }
    }

    #[test]
    fn defaults() {
        let c = EmaConfig::default();
        assert_eq!(c.decay, 0.995);
        assert_eq!(c.update_interval, 16);
    }

    #[test]
    fn zero_decay_tracks_params() {
        let mut e = EmaState::new(&mat(0.0), cfg(0.0, 0, 1)).unwrap();
        for k in 1..5 {
            e.update(&mat(k as f64), k).unwrap();
            assert_eq!(e.shadow(), &mat(k as f64)[..]);
        }
    }

    #[test]
    fn gap_shrinks_by_decay_per_update() {
        let decay = 0.9;
        let mut e = EmaState::new(&mat(0.0), cfg(decay, 0, 1)).unwrap();
        e.update(&mat(0.0), 0).unwrap();
        let target = mat(1.0);
        let mut gap = 1.0;
        for step in 1..50 {
            e.update(&target, step).unwrap();
            let new_gap = 1.0 - e.shadow()[0].get(0, 0);
            assert!((new_gap / gap - decay).abs() < 1e-9);
            gap = new_gap;
        }
    }

    #[test]
    fn never_updates_before_start_or_off_interval() {
        let mut e = EmaState::new(&mat(0.0), cfg(0.5, 100, 8)).unwrap();
        let mut changed = Vec::new();
        for step in 0..=140u64 {
            if e.update(&mat(step as f64), step).unwrap() {
                changed.push(step);
            }
            if step < 100 {
                assert_eq!(e.updates(), 0);
                assert_eq!(e.shadow(), &mat(0.0)[..]);
            }
        }
        assert_eq!(changed, vec![104, 112, 120, 128, 136]);
        assert_eq!(e.updates(), 5);
    }

    #[test]
    fn shape_mismatch() {
        let mut e = EmaState::new(&mat(0.0), cfg(0.5, 0, 1)).unwrap();
        assert!(e.update(&[Matrix::zeros(2, 2)], 0).is_err());
    }
}
