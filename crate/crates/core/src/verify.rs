//! Self-contained invariant suites behind `bbdm verify`.

use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::error::Result;
use crate::nn::{Activation, Architecture, Matrix, NoisePredictor};
use crate::oracle::grid_bayes_posterior_auto;
use crate::process::{self, forward_sample, loss_target, posterior, GaussianParams, StateVector};
use crate::rng::{self, StreamRng};
use crate::sampler::{sample_batch, SamplerPlan};
use crate::schedule::{check_identities, BridgeSchedule};

/// Signature of the reverse-step mean under test.
pub type ReverseMeanFn =
    fn(&BridgeSchedule, &StateVector, &StateVector, &StateVector, usize) -> Result<GaussianParams>;

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub reverse_mean: ReverseMeanFn,
    /// Randomized cases for the posterior families.
    pub cases: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            reverse_mean: process::reverse_mean,
            cases: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyResult {
    pub name: &'static str,
    pub cases: usize,
    pub tolerance: f64,
    pub worst_error: f64,
    pub passed: bool,
    /// Set when a case could not be evaluated at all.
    pub error: Option<String>,
}

impl FamilyResult {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            cases: 0,
            tolerance,
            worst_error: 0.0,
            passed: false,
            error: None,
        }
    }

    fn observe(&mut self, err: f64) {
        self.cases += 1;
        // NaN counts as the worst possible error.
        self.worst_error = if err.is_nan() { f64::INFINITY } else { self.worst_error.max(err) };
    }

    fn finish(mut self) -> Self {
        self.passed = self.error.is_none() && self.cases > 0 && self.worst_error <= self.tolerance;
        self
    }

    fn fail(mut self, e: impl ToString) -> Self {
        self.error = Some(e.to_string());
        self.passed = false;
        self
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub families: Vec<FamilyResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.families.iter().all(|f| f.passed)
    }

    pub fn family(&self, name: &str) -> Option<&FamilyResult> {
        self.families.iter().find(|f| f.name == name)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<20} {:<6} {:>6} {:>10} {:>12}\n",
            "family", "status", "cases", "tolerance", "worst_error"
        );
        for f in &self.families {
            let _ = write!(
                s,
                "{:<20} {:<6} {:>6} {:>10.0e} {:>12.3e}",
                f.name,
                if f.passed { "PASS" } else { "FAIL" },
                f.cases,
                f.tolerance,
                f.worst_error
            );
            if let Some(e) = &f.error {
                let _ = write!(s, "  ({e})");
            }
            s.push('\n');
        }
        s
    }
}

pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    VerifyReport {
        families: vec![
            schedule_family(),
            posterior_grid_family(opts.seed, opts.cases),
            posterior_sign_family(opts.seed, opts.cases, opts.reverse_mean),
            gradient_family(opts.seed),
            sampler_equivalence_family(opts.seed),
        ],
    }
}

pub const SCHEDULE_STEPS: [usize; 5] = [2, 3, 10, 37, 1000];
pub const SCHEDULE_SCALES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

pub fn schedule_family() -> FamilyResult {
    let mut f = FamilyResult::new("schedule", 1e-12);
    for t in SCHEDULE_STEPS {
        for s in SCHEDULE_SCALES {
            let sched = match BridgeSchedule::new(t, s) {
                Ok(v) => v,
                Err(e) => return f.fail(e),
            };
            let rep = check_identities(&sched);
            let structural = rep.monotone_m && rep.positive_interior && rep.posterior_var_bounds;
            f.observe(if structural { rep.worst_error() } else { f64::INFINITY });
        }
    }
    f.finish()
}

/// A random non-degenerate case: `(schedule, t, x0, y, x_t)` with `x_t`
/// drawn from the forward marginal.
fn random_case(r: &mut StreamRng) -> Result<(BridgeSchedule, usize, f64, f64, f64)> {
    let steps = r.random_range(3..=300);
    let scale = r.random_range(0.25..4.0);
    let s = BridgeSchedule::new(steps, scale)?;
    let t = r.random_range(2..steps);
    let x0 = r.random_range(-3.0..3.0);
    let y = r.random_range(-3.0..3.0);
    let e = rng::normal(r);
    let x_t = forward_sample(&s, &x0.into(), &y.into(), t, &e.into())?[0];
    Ok((s, t, x0, y, x_t))
}

pub fn posterior_grid_family(seed: u64, cases: usize) -> FamilyResult {
    let mut f = FamilyResult::new("posterior-grid", 1e-6);
    let mut r = rng::stream(seed, "verify-posterior-grid", 0);
    for _ in 0..cases.max(100) {
        let res = (|| -> Result<f64> {
            let (s, t, x0, y, x_t) = random_case(&mut r)?;
            let exact = posterior(&s, &x_t.into(), &x0.into(), &y.into(), t)?;
            let (gm, gv) = grid_bayes_posterior_auto(&s, t, x_t, x0, y)?;
            Ok((exact.mean[0] - gm).abs().max((exact.var - gv).abs()))
        })();
        match res {
            Ok(err) => f.observe(err),
            Err(e) => return f.fail(e),
        }
    }
    f.finish()
}

pub fn posterior_sign_family(seed: u64, cases: usize, reverse_mean: ReverseMeanFn) -> FamilyResult {
    let mut f = FamilyResult::new("posterior-sign", 1e-12);
    let mut r = rng::stream(seed, "verify-posterior-sign", 0);
    for _ in 0..cases.max(100) {
        let res = (|| -> Result<f64> {
            let (s, t, x0, y, _) = random_case(&mut r)?;
            let e: StateVector = rng::normal(&mut r).into();
            let (x0, y): (StateVector, StateVector) = (x0.into(), y.into());
            let x_t = forward_sample(&s, &x0, &y, t, &e)?;
            let target = loss_target(&s, &x0, &y, t, &e)?;
            let model = reverse_mean(&s, &x_t, &y, &target, t)?;
            let exact = posterior(&s, &x_t, &x0, &y, t)?;
            let scale = 1.0 + exact.mean[0].abs();
            Ok((model.mean[0] - exact.mean[0]).abs() / scale)
        })();
        match res {
            Ok(err) => f.observe(err),
            Err(e) => return f.fail(e),
        }
    }
    f.finish()
}

/// Finite-difference step and the floor under the relative-error denominator.
pub const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Largest relative error between analytic and central-difference gradients
/// for one network: up to `per_layer` sampled entries of every layer
/// (weights and bias together) and of the input, covering the time embedding.
pub fn gradient_check(
    model: &NoisePredictor,
    input: &Matrix,
    target: &Matrix,
    weights: Option<&[f64]>,
    per_layer: usize,
    r: &mut StreamRng,
) -> Result<(usize, f64)> {
    let (_, grads) = model.loss_and_grad_input(input, target, weights)?;
    let loss_at = |m: &NoisePredictor, x: &Matrix| -> Result<f64> {
        Ok(m.loss_and_grad_input(x, target, weights)?.0)
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let n_layers = model.params().len() / 2;
    for layer in 0..n_layers {
        let (w, b) = (2 * layer, 2 * layer + 1);
        let wl = model.params()[w].len();
        let total = wl + model.params()[b].len();
        for k in sample_indices(r, total, per_layer.min(total)) {
            let (pi, j) = if k < wl { (w, k) } else { (b, k - wl) };
            let mut m = model.clone();
            let orig = m.params()[pi].data()[j];
            m.params_mut()[pi].data_mut()[j] = orig + FD_STEP;
            let up = loss_at(&m, input)?;
            m.params_mut()[pi].data_mut()[j] = orig - FD_STEP;
            let down = loss_at(&m, input)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads.params[pi].data()[j], numeric));
            checked += 1;
        }
    }
    for k in sample_indices(r, input.len(), per_layer.min(input.len())) {
        let mut x = input.clone();
        let orig = x.data()[k];
        x.data_mut()[k] = orig + FD_STEP;
        let up = loss_at(model, &x)?;
        x.data_mut()[k] = orig - FD_STEP;
        let down = loss_at(model, &x)?;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grads.input.data()[k], numeric));
        checked += 1;
    }
    Ok((checked, worst))
}

/// A network with a non-zero output layer, so every gradient is exercised.
pub fn random_network(arch: Architecture, seed: u64) -> Result<NoisePredictor> {
    let mut m = NoisePredictor::new(arch, seed)?;
    let mut r = rng::stream(seed, "verify-output-layer", 0);
    let n = m.params().len();
    for p in &mut m.params_mut()[n - 2..] {
        for v in p.data_mut() {
            *v = r.random_range(-0.5..0.5);
        }
    }
    Ok(m)
}

pub fn gradient_family(seed: u64) -> FamilyResult {
    let mut f = FamilyResult::new("gradient", 1e-4);
    let mut r = rng::stream(seed, "verify-gradient", 0);
    for (i, activation) in [Activation::Silu, Activation::Tanh].into_iter().enumerate() {
        for weighted in [false, true] {
            let res = (|| -> Result<(usize, f64)> {
                let arch = Architecture {
                    data_dim: 2,
                    embed_dim: 8,
                    hidden: vec![24, 24],
                    activation,
                };
                let model = random_network(arch, seed.wrapping_add(i as u64))?;
                let steps = 100;
                let rows = 6;
                let mut x = Matrix::zeros(rows, 2);
                let mut target = Matrix::zeros(rows, 2);
                rng::fill_normal(&mut r, x.data_mut());
                rng::fill_normal(&mut r, target.data_mut());
                let ts: Vec<usize> = (0..rows).map(|_| r.random_range(1..=steps)).collect();
                let input = model.input_matrix(&x, &ts, steps)?;
                let w: Vec<f64> = (0..rows).map(|_| r.random_range(0.1..2.0)).collect();
                gradient_check(&model, &input, &target, weighted.then_some(&w[..]), 50, &mut r)
            })();
            match res {
                Ok((n, worst)) => {
                    f.cases += n;
                    f.worst_error = f.worst_error.max(worst);
                }
                Err(e) => return f.fail(e),
            }
        }
    }
    f.finish()
}

pub fn sampler_equivalence_family(seed: u64) -> FamilyResult {
    let mut f = FamilyResult::new("sampler-equivalence", 0.0);
    let res = (|| -> Result<()> {
        let arch = Architecture {
            data_dim: 2,
            embed_dim: 8,
            hidden: vec![16, 16],
            activation: Activation::Silu,
        };
        let model = random_network(arch, seed)?;
        for (steps, scale) in [(2, 1.0), (7, 0.5), (50, 1.0), (120, 4.0)] {
            let s = BridgeSchedule::new(steps, scale)?;
            let mut ys = Matrix::zeros(4, 2);
            rng::fill_normal(&mut rng::stream(seed, "verify-sampler-y", steps as u64), ys.data_mut());
            let anc = SamplerPlan::ancestral(steps, seed).with_trajectory(true);
            let acc = SamplerPlan::accelerated(steps, steps, 1.0, seed)?.with_trajectory(true);
            let a = sample_batch(&s, &model, &ys, &anc, 0)?;
            let b = sample_batch(&s, &model, &ys, &acc, 0)?;
            let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            let same = bits(&a.x0) == bits(&b.x0) && a.trajectories == b.trajectories;
            let starts_at_y = a.trajectories.iter().flatten().enumerate().all(|(i, tr)| {
                tr.states[0].0 == steps && tr.states[0].1.as_slice() == ys.row(i)
            });
            f.observe(if same && starts_at_y { 0.0 } else { f64::INFINITY });
        }
        Ok(())
    })();
    match res {
        Ok(()) => f.finish(),
        Err(e) => f.fail(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped(
        s: &BridgeSchedule,
        x_t: &StateVector,
        y: &StateVector,
        eps: &StateVector,
        t: usize,
    ) -> Result<GaussianParams> {
        let rc = s.reverse(t)?;
        let mean = x_t
            .iter()
            .zip(y.iter())
            .zip(eps.iter())
            .map(|((a, b), e)| rc.c_x * a + rc.c_y * b + rc.c_eps * e)
            .collect();
        Ok(GaussianParams {
            mean: StateVector::new(mean)?,
            var: rc.posterior_var,
        })
    }

    #[test]
    fn clean_build_passes_every_family() {
        let rep = run_verify(&VerifyOptions {
            cases: 100,
            ..VerifyOptions::default()
        });
        assert!(rep.all_passed(), "{}", rep.table());
        assert!(rep.family("gradient").unwrap().cases >= 4 * 3 * 50);
    }

    #[test]
    fn sign_flip_is_caught() {
        let f = posterior_sign_family(1, 100, flipped);
        assert!(!f.passed);
        assert!(f.worst_error > 1e-3);
    }

    #[test]
    fn table_lists_tolerance_and_worst_error() {
        let rep = VerifyReport {
            families: vec![schedule_family()],
        };
        let t = rep.table();
        assert!(t.starts_with("family"));
        assert!(t.contains("tolerance") && t.contains("worst_error"));
        assert!(t.contains("schedule") && t.contains("PASS") && t.contains("1e-12"));
    }
}
