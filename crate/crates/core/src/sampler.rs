//! Reverse-process sampling: the ancestral chain over every step and the
//! accelerated sampler over a coarse step grid.
//!
//! Both samplers run a whole batch at once. Row `i` of a batch draws its noise
//! from its own stream `(seed, "sampler", first_index + i)`, and the model
//! evaluates rows independently, so a row's result does not depend on the
//! batch it was computed in.

use std::fmt::Write as _;

use crate::error::{check_dim, Error, Result};
use crate::nn::{Matrix, NoisePredictor};
use crate::oracle::{optimal_eps, JointGaussianSpec};
use crate::process::StateVector;
use crate::rng::{self, StreamRng};
use crate::schedule::BridgeSchedule;

/// Anything that predicts `x_t - x_0` from `x_t` at a step.
pub trait EpsModel {
    fn data_dim(&self) -> usize;
    /// Predictions for a batch of states that are all at step `t` of `steps`.
    fn predict(&self, x_t: &Matrix, t: usize, steps: usize) -> Result<Matrix>;
}

impl EpsModel for NoisePredictor {
    fn data_dim(&self) -> usize {
        NoisePredictor::data_dim(self)
    }

    fn predict(&self, x_t: &Matrix, t: usize, steps: usize) -> Result<Matrix> {
        self.forward_batch(x_t, &vec![t; x_t.rows()], steps)
    }
}

/// The minimum-MSE predictor for jointly Gaussian data, applied to every
/// coordinate independently.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub spec: JointGaussianSpec,
    pub schedule: BridgeSchedule,
    pub dim: usize,
}

impl EpsModel for OraclePredictor {
    fn data_dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, x_t: &Matrix, t: usize, steps: usize) -> Result<Matrix> {
        check_dim(self.schedule.steps(), steps)?;
        check_dim(self.dim, x_t.cols())?;
        let mut out = x_t.clone();
        for v in out.data_mut() {
            *v = optimal_eps(&self.spec, &self.schedule, t, *v)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    Ancestral,
    Accelerated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerPlan {
    pub mode: SamplerMode,
    /// Strictly increasing steps ending at `T`.
    pub grid: Vec<usize>,
    pub eta: f64,
    pub seed: u64,
    pub record_trajectory: bool,
}

impl SamplerPlan {
    pub fn ancestral(steps: usize, seed: u64) -> Self {
        Self {
            mode: SamplerMode::Ancestral,
            grid: (1..=steps).collect(),
            eta: 1.0,
            seed,
            record_trajectory: false,
        }
    }

    pub fn accelerated(steps: usize, grid_size: usize, eta: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            mode: SamplerMode::Accelerated,
            grid: make_grid(steps, grid_size)?,
            eta,
            seed,
            record_trajectory: false,
        })
    }

    pub fn with_trajectory(mut self, record: bool) -> Self {
        self.record_trajectory = record;
        self
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta {} not in [0, 1]", self.eta)));
        }
        if self.grid.last() != Some(&steps) {
            return Err(Error::invalid(format!("step grid must end at T = {steps}")));
        }
        if self.grid[0] == 0 || self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("step grid must be strictly increasing within 1..=T"));
        }
        if self.mode == SamplerMode::Ancestral && self.grid.len() != steps {
            return Err(Error::invalid("ancestral sampling needs the full step grid"));
        }
        Ok(())
    }
}

/// `S` evenly spaced steps `round(i T / S)`, `i = 1..=S`.
pub fn make_grid(steps: usize, grid_size: usize) -> Result<Vec<usize>> {
    if grid_size == 0 || grid_size > steps {
        return Err(Error::invalid(format!(
            "sampling steps must be in 1..={steps}, got {grid_size}"
        )));
    }
    let mut grid: Vec<usize> = (1..=grid_size)
        .map(|i| (2 * i * steps + grid_size) / (2 * grid_size))
        .collect();
    grid.dedup();
    Ok(grid)
}

/// States visited by one run, from `(T, y)` down to `(0, x_0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrajectory {
    pub states: Vec<(usize, StateVector)>,
}

impl SampleTrajectory {
    /// CSV with columns `t,dim_0,...`, one row per recorded step.
    pub fn to_csv(&self) -> String {
        let dim = self.states.first().map_or(0, |(_, x)| x.dim());
        let mut out = String::from("t");
        for j in 0..dim {
            let _ = write!(out, ",dim_{j}");
        }
        out.push('\n');
        for (t, x) in &self.states {
            let _ = write!(out, "{t}");
            for v in x.iter() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub x0: Matrix,
    /// One trajectory per row when recording was requested.
    pub trajectories: Option<Vec<SampleTrajectory>>,
}

struct Run<'a> {
    schedule: &'a BridgeSchedule,
    model: &'a dyn EpsModel,
    y: &'a Matrix,
    x: Matrix,
    rngs: Vec<StreamRng>,
    traj: Option<Vec<SampleTrajectory>>,
}

impl Run<'_> {
    fn predict(&self, t: usize) -> Result<Matrix> {
        let eps = self.model.predict(&self.x, t, self.schedule.steps())?;
        check_dim(self.x.cols(), eps.cols())?;
        check_dim(self.x.rows(), eps.rows())?;
        Ok(eps)
    }

    fn noise(&mut self) -> Matrix {
        let mut z = Matrix::zeros(self.x.rows(), self.x.cols());
        for (i, r) in self.rngs.iter_mut().enumerate() {
            rng::fill_normal(r, z.row_mut(i));
        }
        z
    }

    fn record(&mut self, t: usize) -> Result<()> {
        if !self.x.is_finite() {
            return Err(Error::non_finite(format!("sampler state at t = {t}")));
        }
        if let Some(traj) = &mut self.traj {
            for (i, tr) in traj.iter_mut().enumerate() {
                tr.states.push((t, StateVector::from_raw(self.x.row(i).to_vec())));
            }
        }
        Ok(())
    }

    /// One ancestral move `t -> t - 1`.
    fn ancestral_step(&mut self, t: usize) -> Result<()> {
        let s = self.schedule;
        let eps = self.predict(t)?;
        if t == s.steps() {
            // delta_T = 0: sample the bridge marginal around the predicted x_0.
            let (mp, sd) = (s.m(t - 1), s.delta(t - 1).sqrt());
            let z = self.noise();
            let (x, y) = (self.x.data_mut(), self.y.data());
            for (k, xv) in x.iter_mut().enumerate() {
                let x0_hat = *xv - eps.data()[k];
                *xv = (1.0 - mp) * x0_hat + mp * y[k] + sd * z.data()[k];
            }
        } else {
            let rc = s.reverse(t)?;
            let z = (t >= 2).then(|| self.noise());
            let sd = rc.posterior_var.sqrt();
            let (x, y) = (self.x.data_mut(), self.y.data());
            for (k, xv) in x.iter_mut().enumerate() {
                let mean = rc.c_x * *xv + rc.c_y * y[k] - rc.c_eps * eps.data()[k];
                *xv = match &z {
                    Some(z) => mean + sd * z.data()[k],
                    None => mean,
                };
            }
        }
        self.record(t - 1)
    }

    /// One coarse move `cur -> prev` with `sigma^2 = eta * (coarse posterior variance)`.
    fn coarse_step(&mut self, cur: usize, prev: usize, eta: f64) -> Result<()> {
        let s = self.schedule;
        let eps = self.predict(cur)?;
        if prev == 0 {
            let x = self.x.data_mut();
            for (xv, e) in x.iter_mut().zip(eps.data()) {
                *xv -= e;
            }
            return self.record(0);
        }
        let (mc, dc) = (s.m(cur), s.delta(cur));
        let (mp, dp) = (s.m(prev), s.delta(prev));
        let (sigma2, direction) = if cur == s.steps() {
            (eta * dp, 0.0)
        } else {
            let r = (1.0 - mc) / (1.0 - mp);
            let dcond = dc - r * r * dp;
            let sigma2 = eta * dcond * dp / dc;
            assert!(sigma2 <= dp, "noise variance exceeds the marginal variance");
            (sigma2, (dp - sigma2).max(0.0).sqrt() / dc.sqrt())
        };
        let sd = sigma2.sqrt();
        let z = self.noise();
        let (x, y) = (self.x.data_mut(), self.y.data());
        for (k, xv) in x.iter_mut().enumerate() {
            let x0_hat = *xv - eps.data()[k];
            let mut next = (1.0 - mp) * x0_hat + mp * y[k];
            if direction != 0.0 {
                next += direction * (*xv - (1.0 - mc) * x0_hat - mc * y[k]);
            }
            *xv = next + sd * z.data()[k];
        }
        self.record(prev)
    }
}

/// Samples `x_0` for every row of `ys`.
pub fn sample_batch(
    schedule: &BridgeSchedule,
    model: &dyn EpsModel,
    ys: &Matrix,
    plan: &SamplerPlan,
    first_index: u64,
) -> Result<BatchOutput> {
    plan.validate(schedule.steps())?;
    check_dim(model.data_dim(), ys.cols())?;
    if !ys.is_finite() {
        return Err(Error::non_finite("conditioning inputs"));
    }
    let rows = ys.rows();
    let traj = plan.record_trajectory.then(|| {
        (0..rows)
            .map(|i| SampleTrajectory {
                states: vec![(schedule.steps(), StateVector::from_raw(ys.row(i).to_vec()))],
            })
            .collect()
    });
    let mut run = Run {
        schedule,
        model,
        y: ys,
        x: ys.clone(),
        rngs: (0..rows as u64)
            .map(|i| rng::stream(plan.seed, "sampler", first_index + i))
            .collect(),
        traj,
    };
    if rows > 0 {
        match plan.mode {
            SamplerMode::Ancestral => {
                for t in (1..=schedule.steps()).rev() {
                    run.ancestral_step(t)?;
                }
            }
            SamplerMode::Accelerated => {
                for idx in (0..plan.grid.len()).rev() {
                    let cur = plan.grid[idx];
                    let prev = if idx == 0 { 0 } else { plan.grid[idx - 1] };
                    if prev + 1 == cur && plan.eta == 1.0 {
                        // On adjacent steps with full noise the coarse rule is the
                        // ancestral rule; share the code so results match bitwise.
                        run.ancestral_step(cur)?;
                    } else {
                        run.coarse_step(cur, prev, plan.eta)?;
                    }
                }
            }
        }
    }
    Ok(BatchOutput {
        x0: run.x,
        trajectories: run.traj,
    })
}

fn single(
    schedule: &BridgeSchedule,
    model: &dyn EpsModel,
    y: &StateVector,
    plan: &SamplerPlan,
) -> Result<(StateVector, Option<SampleTrajectory>)> {
    let ys = Matrix::from_vec(1, y.dim(), y.to_vec())?;
    let out = sample_batch(schedule, model, &ys, plan, 0)?;
    let x0 = StateVector::from_raw(out.x0.row(0).to_vec());
    Ok((x0, out.trajectories.map(|mut t| t.remove(0))))
}

/// Ancestral sampling over every step, starting from `x_T = y`.
pub fn ancestral_sample(
    schedule: &BridgeSchedule,
    model: &dyn EpsModel,
    y: &StateVector,
    seed: u64,
    record: bool,
) -> Result<(StateVector, Option<SampleTrajectory>)> {
    let plan = SamplerPlan::ancestral(schedule.steps(), seed).with_trajectory(record);
    single(schedule, model, y, &plan)
}

/// Sampling over the plan's step grid.
pub fn accelerated_sample(
    schedule: &BridgeSchedule,
    model: &dyn EpsModel,
    y: &StateVector,
    plan: &SamplerPlan,
) -> Result<(StateVector, Option<SampleTrajectory>)> {
    single(schedule, model, y, plan)
}
