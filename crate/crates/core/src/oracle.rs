//! Independent reference computations for scalar, jointly Gaussian data.
//!
//! Nothing here calls into `process`: the grid posterior multiplies the two
//! forward densities numerically, the optimal predictor comes from Gaussian
//! conditioning, and the reverse chain is a separate scalar implementation of
//! the sampling recursion written in posterior-coefficient form.

use crate::error::{Error, Result};
use crate::schedule::BridgeSchedule;

/// Joint law of scalar `(x_0, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointGaussianSpec {
    pub mean0: f64,
    pub meany: f64,
    pub var0: f64,
    pub vary: f64,
    pub corr: f64,
}

impl JointGaussianSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.mean0, self.meany, self.var0, self.vary, self.corr]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("joint Gaussian parameters must be finite"));
        }
        if self.var0 <= 0.0 || self.vary <= 0.0 {
            return Err(Error::invalid("joint Gaussian variances must be positive"));
        }
        if !(-1.0..=1.0).contains(&self.corr) {
            return Err(Error::invalid(format!(
                "correlation must lie in [-1, 1], got {}",
                self.corr
            )));
        }
        Ok(())
    }

    pub fn cov(&self) -> f64 {
        self.corr * (self.var0 * self.vary).sqrt()
    }

    /// Moments of `x_t` and its covariance with `x_0`: `(E[x_t], Var(x_t), Cov(x_0, x_t))`.
    pub fn state_moments(&self, s: &BridgeSchedule, t: usize) -> (f64, f64, f64) {
        let m = s.m(t);
        let mean = (1.0 - m) * self.mean0 + m * self.meany;
        let var = (1.0 - m) * (1.0 - m) * self.var0
            + m * m * self.vary
            + 2.0 * m * (1.0 - m) * self.cov()
            + s.delta(t);
        let cov = (1.0 - m) * self.var0 + m * self.cov();
        (mean, var, cov)
    }
}

// Unnormalized; constants cancel when the grid weights are normalized.
fn log_kernel(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * d * d / var
}

/// Posterior mean and variance of `x_{t-1}` given `(x_t, x_0, y)`, from the
/// normalized product `q(x_t | x_{t-1}, y) q(x_{t-1} | x_0, y)` on a uniform grid.
#[allow(clippy::too_many_arguments)]
pub fn grid_bayes_posterior(
    s: &BridgeSchedule,
    t: usize,
    x_t: f64,
    x0: f64,
    y: f64,
    grid_lo: f64,
    grid_hi: f64,
    n_points: usize,
) -> Result<(f64, f64)> {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    let bad_range = !(grid_hi > grid_lo);
    if n_points < 2 || bad_range {
        return Err(Error::invalid("empty grid"));
    }
    if t < 2 || t >= s.steps() {
        return Err(Error::Degenerate { t });
    }
    let (mt, mp) = (s.m(t), s.m(t - 1));
    let r = (1.0 - mt) / (1.0 - mp);
    let dcond = s.delta(t) - s.delta(t - 1) * r * r;
    let dprev = s.delta(t - 1);
    let prior_mean = (1.0 - mp) * x0 + mp * y;
    let shift = (mt - r * mp) * y;

    let h = (grid_hi - grid_lo) / (n_points - 1) as f64;
    let logs: Vec<f64> = (0..n_points)
        .map(|i| {
            let x = grid_lo + h * i as f64;
            log_kernel(x_t, r * x + shift, dcond) + log_kernel(x, prior_mean, dprev)
        })
        .collect();
    let peak = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(Error::invalid("grid carries no probability mass"));
    }
    let (mut mass, mut first) = (0.0, 0.0);
    for (i, l) in logs.iter().enumerate() {
        let w = (l - peak).exp();
        mass += w;
        first += w * (grid_lo + h * i as f64);
    }
    if mass <= 0.0 || !mass.is_finite() {
        return Err(Error::invalid("grid carries no probability mass"));
    }
    let mean = first / mass;
    let mut second = 0.0;
    for (i, l) in logs.iter().enumerate() {
        let d = grid_lo + h * i as f64 - mean;
        second += (l - peak).exp() * d * d;
    }
    Ok((mean, second / mass))
}

/// Grid posterior with automatic placement: a coarse pass over the union of the
/// prior window and the window implied by inverting the transition, then a
/// refined pass centred on the coarse estimate spanning +-12 posterior sds.
pub fn grid_bayes_posterior_auto(
    s: &BridgeSchedule,
    t: usize,
    x_t: f64,
    x0: f64,
    y: f64,
) -> Result<(f64, f64)> {
    if t < 2 || t >= s.steps() {
        return Err(Error::Degenerate { t });
    }
    let (mt, mp) = (s.m(t), s.m(t - 1));
    let r = (1.0 - mt) / (1.0 - mp);
    let dcond = s.delta(t) - s.delta(t - 1) * r * r;
    let prior_mean = (1.0 - mp) * x0 + mp * y;
    let prior_sd = s.delta(t - 1).sqrt();
    let inv_mean = (x_t - (mt - r * mp) * y) / r;
    let inv_sd = dcond.sqrt() / r;
    let lo = (prior_mean - 12.0 * prior_sd).min(inv_mean - 12.0 * inv_sd);
    let hi = (prior_mean + 12.0 * prior_sd).max(inv_mean + 12.0 * inv_sd);
    let (mean, var) = grid_bayes_posterior(s, t, x_t, x0, y, lo, hi, 20_001)?;
    let sd = var.sqrt();
    grid_bayes_posterior(s, t, x_t, x0, y, mean - 12.0 * sd, mean + 12.0 * sd, 20_001)
}

/// Minimum-MSE prediction of `x_t - x_0` from `x_t` alone: `x_t - E[x_0 | x_t]`.
/// Defined for `0 < t <= T` (at `t = T` it regresses `x_0` on `y`).
pub fn optimal_eps(spec: &JointGaussianSpec, s: &BridgeSchedule, t: usize, x_t: f64) -> Result<f64> {
    if t == 0 || t > s.steps() {
        return Err(Error::TimestepOutOfRange { t, steps: s.steps() });
    }
    let (mean_t, var_t, cov) = spec.state_moments(s, t);
    if var_t <= 0.0 {
        return Err(Error::invalid(format!("Var(x_t) vanishes at t = {t}")));
    }
    let cond_mean = spec.mean0 + cov / var_t * (x_t - mean_t);
    Ok(x_t - cond_mean)
}

/// Scalar reverse chain driven by the analytic predictor.
///
/// First move `T -> T-1` samples the bridge marginal around the predicted
/// `x_0`; interior moves use the posterior `A x_t + B x0_hat + C y`; the last
/// move (`t = 1`) is noiseless and returns `x0_hat`. `noise` is called once per
/// stochastic move (`T - 1` times).
pub fn exact_reverse_chain(
    spec: &JointGaussianSpec,
    s: &BridgeSchedule,
    y: f64,
    noise: &mut dyn FnMut() -> f64,
) -> Result<f64> {
    let steps = s.steps();
    let mut x = y;
    for t in (1..=steps).rev() {
        let x0_hat = x - optimal_eps(spec, s, t, x)?;
        if t == 1 {
            x = x0_hat;
            break;
        }
        let (mp, dp) = (s.m(t - 1), s.delta(t - 1));
        if t == steps {
            x = (1.0 - mp) * x0_hat + mp * y + dp.sqrt() * noise();
            continue;
        }
        let (mt, dt) = (s.m(t), s.delta(t));
        let r = (1.0 - mt) / (1.0 - mp);
        let dcond = dt - dp * r * r;
        let a = r * dp / dt;
        let b = (1.0 - mp) * dcond / dt;
        let c = mp - mt * r * dp / dt;
        let var = dcond * dp / dt;
        x = a * x + b * x0_hat + c * y + var.sqrt() * noise();
        if !x.is_finite() {
            return Err(Error::non_finite(format!("oracle chain at t = {t}")));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    const STD: JointGaussianSpec = JointGaussianSpec {
        mean0: 0.0,
        meany: 0.0,
        var0: 1.0,
        vary: 1.0,
        corr: 0.0,
    };

    #[test]
    fn grid_posterior_four_step_example() {
        let s = BridgeSchedule::new(4, 1.0).unwrap();
        let (m, v) = grid_bayes_posterior(&s, 2, 0.6, 0.0, 1.0, -5.0, 5.0, 100_001).unwrap();
        assert!((m - 0.3).abs() < 1e-8, "{m}");
        assert!((v - 0.25).abs() < 1e-8, "{v}");
        let (m2, _) = grid_bayes_posterior_auto(&s, 2, 0.6, 0.0, 1.0).unwrap();
        assert!((m2 - 0.3).abs() < 1e-9);
    }

    #[test]
    fn grid_refinement_converges() {
        let s = BridgeSchedule::new(10, 2.0).unwrap();
        let a = grid_bayes_posterior(&s, 5, 0.4, -1.0, 2.0, -8.0, 8.0, 10_001).unwrap();
        let b = grid_bayes_posterior(&s, 5, 0.4, -1.0, 2.0, -8.0, 8.0, 100_001).unwrap();
        assert!((a.0 - b.0).abs() < 1e-8);
        assert!((a.1 - b.1).abs() < 1e-8);
    }

    #[test]
    fn grid_posterior_mirrors_forward_transition() {
        // The bridge is a reversible Gaussian Markov process: conditioning
        // x_{t-1} on (x_t, x_0) is the forward transition of the time-reversed
        // bridge at step T - t + 1, with x_0 playing the destination. The far
        // endpoint y drops out.
        let s = BridgeSchedule::new(10, 1.0).unwrap();
        let (x0, xt) = (-1.0, 0.5);
        for t in 2..10 {
            let a = grid_bayes_posterior_auto(&s, t, xt, x0, 2.0).unwrap();
            let b = grid_bayes_posterior_auto(&s, t, xt, x0, -7.0).unwrap();
            let mirrored =
                crate::process::forward_transition(&s, &xt.into(), &x0.into(), 10 - t + 1).unwrap();
            assert!((a.0 - b.0).abs() < 1e-8, "t={t}");
            assert!((a.0 - mirrored.mean[0]).abs() < 1e-8, "t={t}: {a:?} {mirrored:?}");
            assert!((a.1 - mirrored.var).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn grid_errors() {
        let s = BridgeSchedule::new(4, 1.0).unwrap();
        assert!(grid_bayes_posterior(&s, 2, 0.0, 0.0, 0.0, 1.0, 1.0, 1000).is_err());
        assert!(grid_bayes_posterior(&s, 2, 0.0, 0.0, 0.0, 0.0, 1.0, 1).is_err());
        assert!(grid_bayes_posterior(&s, 4, 0.0, 0.0, 0.0, -1.0, 1.0, 1000).is_err());
        assert!(grid_bayes_posterior(&s, 2, f64::NAN, 0.0, 0.0, -1.0, 1.0, 1000).is_err());
    }

    #[test]
    fn optimal_eps_hand_value() {
        let s = BridgeSchedule::new(4, 1.0).unwrap();
        // Var = 0.25 + 0.25 + 0.5 = 1, Cov = 0.5, E[x_0|x_t=1] = 0.5.
        let e = optimal_eps(&STD, &s, 2, 1.0).unwrap();
        assert!((e - 0.5).abs() < 1e-12);
        assert!(optimal_eps(&STD, &s, 0, 1.0).is_err());
    }

    #[test]
    fn optimal_eps_vanishes_near_start() {
        let s = BridgeSchedule::new(10_000, 1.0).unwrap();
        let spec = JointGaussianSpec {
            mean0: 0.7,
            ..STD
        };
        let e = optimal_eps(&spec, &s, 1, 0.7).unwrap();
        assert!(e.abs() < 1e-3, "{e}");
    }

    #[test]
    fn optimal_eps_matches_regression() {
        // Least-squares fit of target on (1, x_t) over simulated pairs.
        let spec = JointGaussianSpec {
            mean0: 1.0,
            meany: -1.0,
            var0: 1.0,
            vary: 0.5,
            corr: 0.8,
        };
        let s = BridgeSchedule::new(100, 1.0).unwrap();
        let t = 40;
        let n = 1_000_000;
        let mut r = rng::stream(11, "oracle-regression", 0);
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            let (z1, z2, e) = (rng::normal(&mut r), rng::normal(&mut r), rng::normal(&mut r));
            let x0 = spec.mean0 + spec.var0.sqrt() * z1;
            let y = spec.meany
                + spec.vary.sqrt() * (spec.corr * z1 + (1.0 - spec.corr * spec.corr).sqrt() * z2);
            let xt = (1.0 - s.m(t)) * x0 + s.m(t) * y + s.delta(t).sqrt() * e;
            let target = xt - x0;
            sx += xt;
            sy += target;
            sxx += xt * xt;
            sxy += xt * target;
            pts.push((xt, target));
        }
        let nf = n as f64;
        let slope = (sxy - sx * sy / nf) / (sxx - sx * sx / nf);
        let icpt = (sy - slope * sx) / nf;
        let resid_var = pts
            .iter()
            .map(|(x, q)| (q - icpt - slope * x).powi(2))
            .sum::<f64>()
            / (nf - 2.0);
        let mean_x = sx / nf;
        let sxx_c = sxx - sx * sx / nf;
        for x in [-1.0, 0.0, 0.5, 2.0] {
            let fit = icpt + slope * x;
            let se = (resid_var * (1.0 / nf + (x - mean_x).powi(2) / sxx_c)).sqrt();
            let want = optimal_eps(&spec, &s, t, x).unwrap();
            assert!((fit - want).abs() < 3.0 * se, "x={x}: fit {fit} oracle {want} se {se}");
        }
    }

    #[test]
    fn chain_deterministic_without_noise() {
        let spec = JointGaussianSpec {
            corr: 1.0,
            ..STD
        };
        let s = BridgeSchedule::new(50, 1.0).unwrap();
        let a = exact_reverse_chain(&spec, &s, 0.8, &mut || 0.0).unwrap();
        let b = exact_reverse_chain(&spec, &s, 0.8, &mut || 0.0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        // The predictor never sees y, so the output shrinks toward the prior mean 0.
        assert!(a > 0.0 && a < 0.8, "{a}");
        let c = exact_reverse_chain(&spec, &s, 1.6, &mut || 0.0).unwrap();
        assert!((c - 2.0 * a).abs() < 1e-12, "linear in y: {c} vs {a}");
    }

    #[test]
    fn two_step_chain_is_one_deterministic_move() {
        // T = 2: first move samples x_1, then t = 1 returns x0_hat with no noise.
        let s = BridgeSchedule::new(2, 1.0).unwrap();
        let mut calls = 0;
        let out = exact_reverse_chain(&STD, &s, 0.5, &mut || {
            calls += 1;
            0.25
        })
        .unwrap();
        assert_eq!(calls, 1);
        let x1_hat0 = 0.5 - optimal_eps(&STD, &s, 2, 0.5).unwrap();
        let x1 = 0.5 * x1_hat0 + 0.5 * 0.5 + s.delta(1).sqrt() * 0.25;
        let want = x1 - optimal_eps(&STD, &s, 1, x1).unwrap();
        assert_eq!(out, want);
    }
}
