//! Sample-quality metrics: per-input diversity, energy distance and moments.

use std::fmt::Write as _;

use crate::error::{check_dim, Error, Result};

/// Divisor used for the per-dimension standard deviation in [`diversity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SdKind {
    /// Divide by `k`.
    #[default]
    Population,
    /// Divide by `k - 1`.
    Sample,
}

fn shared_dim<S: AsRef<[f64]>>(rows: &[S]) -> Result<usize> {
    let d = rows
        .first()
        .map(|r| r.as_ref().len())
        .ok_or_else(|| Error::invalid("empty sample set"))?;
    for r in rows {
        check_dim(d, r.as_ref().len())?;
    }
    Ok(d)
}

/// Mean over inputs of the dimension-averaged standard deviation across the
/// `k` samples drawn for that input.
pub fn diversity<S: AsRef<[f64]>>(sets: &[Vec<S>], k: usize, kind: SdKind) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::invalid("no sample sets"));
    }
    if k == 0 || (kind == SdKind::Sample && k < 2) {
        return Err(Error::invalid(format!("k = {k} is too small for this divisor")));
    }
    let divisor = match kind {
        SdKind::Population => k as f64,
        SdKind::Sample => (k - 1) as f64,
    };
    let mut total = 0.0;
    for set in sets {
        if set.len() != k {
            return Err(Error::invalid(format!("expected {k} samples per input, got {}", set.len())));
        }
        let d = shared_dim(set)?;
        let mut per_input = 0.0;
        for j in 0..d {
            let mean = set.iter().map(|x| x.as_ref()[j]).sum::<f64>() / k as f64;
            let ss: f64 = set.iter().map(|x| (x.as_ref()[j] - mean).powi(2)).sum();
            per_input += (ss / divisor).sqrt();
        }
        total += per_input / d as f64;
    }
    Ok(total / sets.len() as f64)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_pair_dist<S: AsRef<[f64]>, T: AsRef<[f64]>>(a: &[S], b: &[T]) -> f64 {
    let mut sum = 0.0;
    for x in a {
        let mut row = 0.0;
        for y in b {
            row += dist(x.as_ref(), y.as_ref());
        }
        sum += row;
    }
    sum / (a.len() as f64 * b.len() as f64)
}

/// `2 E|a - b| - E|a - a'| - E|b - b'|` with all-pairs means (diagonal
/// included), so that the distance of a set to itself is exactly zero.
pub fn energy_distance<S: AsRef<[f64]>, T: AsRef<[f64]>>(a: &[S], b: &[T]) -> Result<f64> {
    let d = shared_dim(a)?;
    check_dim(d, shared_dim(b)?)?;
    let ab = mean_pair_dist(a, b);
    let aa = mean_pair_dist(a, a);
    let bb = mean_pair_dist(b, b);
    Ok(2.0 * ab - aa - bb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    /// Unbiased variance; all zeros when only one sample is available.
    pub var: Vec<f64>,
    /// False when `n = 1` and the variance is undefined.
    pub var_defined: bool,
    pub n: usize,
}

pub fn moments<S: AsRef<[f64]>>(samples: &[S]) -> Result<Moments> {
    let d = shared_dim(samples)?;
    let n = samples.len();
    let mut mean = vec![0.0; d];
    for x in samples {
        for (m, v) in mean.iter_mut().zip(x.as_ref()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    if n > 1 {
        for x in samples {
            for ((s, v), m) in var.iter_mut().zip(x.as_ref()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut var {
            *s /= (n - 1) as f64;
        }
    }
    Ok(Moments {
        mean,
        var,
        var_defined: n > 1,
        n,
    })
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("metric,value,n,seed\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.metric, r.value, r.n, r.seed);
    }
    out
}
