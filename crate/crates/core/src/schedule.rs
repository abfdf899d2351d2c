//! Brownian bridge schedule.
//!
//! With `m_t = t / T` the bridge marginal at step `t` is
//! `N((1 - m_t) x_0 + m_t y, delta_t I)` where `delta_t = 2 s (m_t - m_t^2)`.
//! Everything the forward process, the posterior and the reverse sampler need
//! is precomputed here once, in double precision, for `t = 0..=T`.
//!
//! Two endpoints are special. At `t = 0` there is no transition into the
//! state. At `t = T` the variance `delta_T` vanishes, so the reverse
//! coefficients (which divide by `delta_t`) are undefined; the schedule marks
//! them degenerate and the sampler handles the first reverse step separately.

use crate::error::{Error, Result};

/// Reverse-step quantities at a non-degenerate step `1 <= t < T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseCoefficients {
    /// Posterior variance `~delta_t = delta_{t|t-1} delta_{t-1} / delta_t`.
    pub posterior_var: f64,
    pub c_x: f64,
    pub c_y: f64,
    pub c_eps: f64,
}

/// All schedule quantities at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEntry {
    pub t: usize,
    pub m: f64,
    pub delta: f64,
    /// `delta_{t|t-1}`; `None` at `t = 0`.
    pub delta_cond: Option<f64>,
    /// `None` at `t = 0` (no transition) and `t = T` (degenerate).
    pub reverse: Option<ReverseCoefficients>,
}

impl StepEntry {
    pub fn is_degenerate(&self) -> bool {
        self.reverse.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSchedule {
    steps: usize,
    scale: f64,
    m: Vec<f64>,
    delta: Vec<f64>,
    // Indexed by t; entry 0 is unused and holds 0.
    delta_cond: Vec<f64>,
    // Indexed by t; entries 0 and T are unused (NaN).
    posterior_var: Vec<f64>,
    c_x: Vec<f64>,
    c_y: Vec<f64>,
    c_eps: Vec<f64>,
}

impl BridgeSchedule {
    pub fn new(steps: usize, scale: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!(
                "number of diffusion steps must be at least 2, got {steps}"
            )));
        }
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::invalid(format!(
                "variance scale must be finite and positive, got {scale}"
            )));
        }

        let total = steps as f64;
        let m: Vec<f64> = (0..=steps).map(|t| t as f64 / total).collect();
        let delta: Vec<f64> = m.iter().map(|&mt| 2.0 * scale * (mt - mt * mt)).collect();

        let mut delta_cond = vec![0.0; steps + 1];
        let mut posterior_var = vec![f64::NAN; steps + 1];
        let mut c_x = vec![f64::NAN; steps + 1];
        let mut c_y = vec![f64::NAN; steps + 1];
        let mut c_eps = vec![f64::NAN; steps + 1];

        for t in 1..=steps {
            let r = (1.0 - m[t]) / (1.0 - m[t - 1]);
            delta_cond[t] = delta[t] - delta[t - 1] * r * r;
            if t == steps {
                break;
            }
            let prev_ratio = delta[t - 1] / delta[t];
            let cond_ratio = delta_cond[t] / delta[t];
            posterior_var[t] = delta_cond[t] * delta[t - 1] / delta[t];
            c_x[t] = prev_ratio * r + cond_ratio * (1.0 - m[t - 1]);
            c_y[t] = m[t - 1] - m[t] * r * prev_ratio;
            c_eps[t] = (1.0 - m[t - 1]) * cond_ratio;
        }

        Ok(Self {
            steps,
            scale,
            m,
            delta,
            delta_cond,
            posterior_var,
            c_x,
            c_y,
            c_eps,
        })
    }

    /// Total number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Variance scale `s`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn m(&self, t: usize) -> f64 {
        self.m[t]
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t]
    }

    /// `(1 - m_t) / (1 - m_{t-1})`, for `t >= 1`.
    pub fn ratio(&self, t: usize) -> f64 {
        (1.0 - self.m[t]) / (1.0 - self.m[t - 1])
    }

    pub fn delta_cond(&self, t: usize) -> Result<f64> {
        self.check_transition(t)?;
        Ok(self.delta_cond[t])
    }

    pub fn reverse(&self, t: usize) -> Result<ReverseCoefficients> {
        self.check_transition(t)?;
        if t == self.steps {
            return Err(Error::Degenerate { t });
        }
        Ok(ReverseCoefficients {
            posterior_var: self.posterior_var[t],
            c_x: self.c_x[t],
            c_y: self.c_y[t],
            c_eps: self.c_eps[t],
        })
    }

    pub fn query(&self, t: usize) -> Result<StepEntry> {
        if t > self.steps {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps,
            });
        }
        let delta_cond = (t >= 1).then(|| self.delta_cond[t]);
        let reverse = if t >= 1 && t < self.steps {
            Some(self.reverse(t)?)
        } else {
            None
        };
        Ok(StepEntry {
            t,
            m: self.m[t],
            delta: self.delta[t],
            delta_cond,
            reverse,
        })
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps {
            Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps,
            })
        } else {
            Ok(())
        }
    }

    fn check_transition(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps,
            })
        } else {
            Ok(())
        }
    }
}

/// Worst violation of each schedule identity, used by tests and `verify`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityReport {
    pub endpoints: f64,
    pub monotone_m: bool,
    pub positive_interior: bool,
    pub symmetry: f64,
    pub peak: Option<f64>,
    pub composition: f64,
    pub posterior_var: f64,
    pub posterior_var_bounds: bool,
    pub affine: f64,
    pub final_transition: f64,
}

impl IdentityReport {
    pub fn worst_error(&self) -> f64 {
        [
            self.endpoints,
            self.symmetry,
            self.peak.unwrap_or(0.0),
            self.composition,
            self.posterior_var,
            self.affine,
            self.final_transition,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.monotone_m
            && self.positive_interior
            && self.posterior_var_bounds
            && self.worst_error() <= tol
    }
}

/// Checks every schedule identity by direct re-evaluation.
pub fn check_identities(s: &BridgeSchedule) -> IdentityReport {
    let n = s.steps;
    let mut rep = IdentityReport {
        monotone_m: true,
        positive_interior: true,
        posterior_var_bounds: true,
        ..Default::default()
    };
    rep.endpoints = [s.m[0].abs(), (s.m[n] - 1.0).abs(), s.delta[0].abs(), s.delta[n].abs()]
        .into_iter()
        .fold(0.0, f64::max);
    for t in 1..=n {
        rep.monotone_m &= s.m[t] > s.m[t - 1];
        if t < n {
            rep.positive_interior &= s.delta[t] > 0.0;
        }
        rep.symmetry = rep.symmetry.max((s.delta[t] - s.delta[n - t]).abs());
        let r = s.ratio(t);
        let recomposed = r * r * s.delta[t - 1] + s.delta_cond[t];
        rep.composition = rep.composition.max((recomposed - s.delta[t]).abs());
        if t < n {
            let expected = if t == 1 {
                0.0
            } else {
                s.delta_cond[t] * s.delta[t - 1] / s.delta[t]
            };
            rep.posterior_var = rep.posterior_var.max((s.posterior_var[t] - expected).abs());
            let pv = s.posterior_var[t];
            rep.posterior_var_bounds &= pv >= 0.0 && pv <= s.delta[t - 1] + 1e-15;
            rep.affine = rep.affine.max((s.c_x[t] + s.c_y[t] - 1.0).abs());
        }
    }
    if n.is_multiple_of(2) {
        let max = s.delta.iter().copied().fold(f64::MIN, f64::max);
        let mid = s.delta[n / 2];
        rep.peak = Some((mid - s.scale / 2.0).abs().max((max - mid).abs()));
    }
    rep.final_transition = s.delta_cond[n].abs();
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-12;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= TOL
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(BridgeSchedule::new(1, 1.0).is_err());
        assert!(BridgeSchedule::new(0, 1.0).is_err());
        assert!(BridgeSchedule::new(10, 0.0).is_err());
        assert!(BridgeSchedule::new(10, -1.0).is_err());
        assert!(BridgeSchedule::new(10, f64::NAN).is_err());
        assert!(BridgeSchedule::new(10, f64::INFINITY).is_err());
    }

    #[test]
    fn midpoint_at_default_scale() {
        let s = BridgeSchedule::new(1000, 1.0).unwrap();
        assert_eq!(s.m(500), 0.5);
        assert_eq!(s.delta(500), 0.5);
        assert_eq!(s.delta(0), 0.0);
        assert_eq!(s.delta(1000), 0.0);
    }

    #[test]
    fn four_step_schedule_by_hand() {
        // m = [0, 1/4, 1/2, 3/4, 1]; delta = 2 m (1 - m).
        let s = BridgeSchedule::new(4, 1.0).unwrap();
        let expected = [0.0, 0.375, 0.5, 0.375, 0.0];
        for (t, d) in expected.iter().enumerate() {
            assert!(close(s.delta(t), *d), "delta[{t}] = {}", s.delta(t));
        }
        // r_2 = (1/2)/(3/4) = 2/3; delta_{2|1} = 1/2 - 3/8 * 4/9 = 1/3.
        assert!(close(s.delta_cond(2).unwrap(), 1.0 / 3.0));
        let rc = s.reverse(2).unwrap();
        assert!(close(rc.posterior_var, 0.25));
        assert!(close(rc.c_x, 1.0));
        assert!(close(rc.c_y, 0.0));
        assert!(close(rc.c_eps, 0.5));
        assert!(close(rc.c_x + rc.c_y, 1.0));
    }

    #[test]
    fn query_endpoints() {
        let s = BridgeSchedule::new(4, 1.0).unwrap();
        let e0 = s.query(0).unwrap();
        assert_eq!((e0.m, e0.delta), (0.0, 0.0));
        assert!(e0.delta_cond.is_none());
        assert!(e0.is_degenerate());

        let e2 = s.query(2).unwrap();
        let rc = e2.reverse.unwrap();
        assert!(close(rc.c_x, 1.0) && close(rc.c_y, 0.0));

        let et = s.query(4).unwrap();
        assert_eq!((et.m, et.delta), (1.0, 0.0));
        assert_eq!(et.delta_cond, Some(0.0));
        assert!(et.is_degenerate());
        assert!(matches!(s.reverse(4), Err(Error::Degenerate { t: 4 })));

        assert!(matches!(
            s.query(5),
            Err(Error::TimestepOutOfRange { t: 5, steps: 4 })
        ));
        assert!(s.delta_cond(0).is_err());
    }

    #[test]
    fn first_step_has_zero_posterior_variance() {
        let s = BridgeSchedule::new(10, 2.0).unwrap();
        let rc = s.reverse(1).unwrap();
        assert_eq!(rc.posterior_var, 0.0);
        assert!(close(rc.c_x, 1.0));
        assert!(close(rc.c_eps, 1.0));
    }

    #[test]
    fn identities_over_grid() {
        for steps in [2, 3, 10, 37, 1000] {
            for scale in [0.5, 1.0, 2.0, 4.0] {
                let s = BridgeSchedule::new(steps, scale).unwrap();
                let rep = check_identities(&s);
                assert!(rep.holds(TOL), "T={steps} s={scale}: {rep:?}");
            }
        }
    }
}
