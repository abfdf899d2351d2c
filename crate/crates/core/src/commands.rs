//! Subcommand implementations. The binary only parses arguments and maps
//! results to exit codes: 0 success, 1 verification or runtime failure,
//! 2 usage, configuration or input errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{Config, DataSource};
use crate::data::{PairedDataset, FORMAT_TAG};
use crate::error::{check_dim, Error, Result};
use crate::metrics::{diversity, energy_distance, moments, report_csv, ReportRow};
use crate::nn::Matrix;
use crate::sampler::{sample_batch, SamplerMode, SamplerPlan};
use crate::schedule::BridgeSchedule;
use crate::trainer::{run_training, TrainOutcome};
use crate::verify::{run_verify, ReverseMeanFn, VerifyOptions, VerifyReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::Degenerate { .. } => EXIT_FAILURE,
        _ => EXIT_USAGE,
    }
}

/// Reads the optional config file and applies `key=value` overrides in order.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

pub fn load_dataset(cfg: &Config) -> Result<PairedDataset> {
    match cfg.data_source()? {
        DataSource::File(p) => {
            if !p.exists() {
                return Err(Error::config("dataset", format!("file {} does not exist", p.display())));
            }
            PairedDataset::load(&p)
        }
        DataSource::Generate { generator, n, seed } => generator.generate(n, seed),
    }
}

pub fn cmd_verify(cfg: &Config, reverse_mean: ReverseMeanFn) -> VerifyReport {
    run_verify(&VerifyOptions {
        seed: cfg.seed().unwrap_or(0),
        reverse_mean,
        ..VerifyOptions::default()
    })
}

pub fn verify_exit_code(report: &VerifyReport) -> i32 {
    if report.all_passed() {
        EXIT_OK
    } else {
        EXIT_FAILURE
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains and writes outputs to `out_dir`. A generated dataset is saved as
/// `dataset.csv` next to the checkpoint so later commands can refer to it.
pub fn cmd_train(cfg: &Config, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate_train()?;
    let dataset = load_dataset(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if matches!(cfg.data_source()?, DataSource::Generate { .. }) {
        dataset.save(&out_dir.join("dataset.csv"))?;
    }
    run_training(&cfg.train, &dataset, out_dir, resume)
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub samples: PathBuf,
    pub trajectories: Vec<PathBuf>,
    pub rows: usize,
}

/// Draws `samples_per_y` samples for each of the last `n_samples` dataset
/// rows. Sample `k` uses noise stream `k`, so output does not depend on batching.
pub fn cmd_sample(cfg: &Config, checkpoint: &Path, out_dir: &Path) -> Result<SampleOutcome> {
    let seed = cfg.require_seed()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.steps != cfg.train.timesteps {
        return Err(Error::config(
            "timesteps",
            format!("config says {} but the checkpoint was trained with {}", cfg.train.timesteps, ckpt.steps),
        ));
    }
    if ckpt.scale != cfg.train.scale {
        return Err(Error::config(
            "scale",
            format!("config says {} but the checkpoint was trained with {}", cfg.train.scale, ckpt.scale),
        ));
    }
    cfg.validate_sample(ckpt.steps)?;
    let dataset = load_dataset(cfg)?;
    let model = ckpt.sampling_model(cfg.sample.use_ema);
    check_dim(model.data_dim(), dataset.dim())?;
    let sc = &cfg.sample;
    if sc.n_samples > dataset.len() {
        return Err(Error::config(
            "n_samples",
            format!("asks for {} conditioning rows but the dataset has {}", sc.n_samples, dataset.len()),
        ));
    }
    let schedule = BridgeSchedule::new(ckpt.steps, ckpt.scale)?;
    let plan = match sc.mode {
        SamplerMode::Ancestral => SamplerPlan::ancestral(ckpt.steps, seed),
        SamplerMode::Accelerated => SamplerPlan::accelerated(ckpt.steps, sc.sample_steps, sc.eta, seed)?,
    };

    let first_row = dataset.len() - sc.n_samples;
    let d = dataset.dim();
    let mut y_index = Vec::with_capacity(sc.n_samples * sc.samples_per_y);
    let mut ys = Vec::with_capacity(y_index.capacity() * d);
    for row in first_row..dataset.len() {
        for _ in 0..sc.samples_per_y {
            y_index.push(row);
            ys.extend_from_slice(dataset.y.row(row));
        }
    }
    let ys = Matrix::from_vec(y_index.len(), d, ys)?;
    let out = sample_batch(&schedule, &model, &ys, &plan, 0)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut csv = String::new();
    let _ = writeln!(csv, "# seed={seed}");
    let _ = writeln!(csv, "# checkpoint_step={}", ckpt.step);
    let _ = writeln!(csv, "# timesteps={}", ckpt.steps);
    let _ = writeln!(csv, "# scale={}", ckpt.scale);
    let _ = writeln!(csv, "# grid_size={}", plan.grid.len());
    let _ = writeln!(csv, "# eta={}", plan.eta);
    csv.push_str("sample,y_index");
    for j in 0..d {
        let _ = write!(csv, ",x_{j}");
    }
    csv.push('\n');
    for (k, row) in y_index.iter().enumerate() {
        let _ = write!(csv, "{k},{row}");
        for v in out.x0.row(k) {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    let samples = out_dir.join("samples.csv");
    write(&samples, csv)?;

    let mut trajectories = Vec::new();
    let m = sc.trajectories.min(y_index.len());
    if m > 0 {
        let head = Matrix::from_vec(m, d, ys.data()[..m * d].to_vec())?;
        let rec = sample_batch(&schedule, &model, &head, &plan.clone().with_trajectory(true), 0)?;
        for (k, tr) in rec.trajectories.into_iter().flatten().enumerate() {
            let p = out_dir.join(format!("trajectory_{k}.csv"));
            write(&p, tr.to_csv())?;
            trajectories.push(p);
        }
    }
    Ok(SampleOutcome {
        samples,
        trajectories,
        rows: y_index.len(),
    })
}

/// Parsed samples file.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFile {
    pub meta: BTreeMap<String, String>,
    pub y_index: Vec<usize>,
    pub x: Vec<Vec<f64>>,
}

impl SampleFile {
    pub fn seed(&self) -> u64 {
        self.meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0)
    }
}

pub fn read_samples(path: &Path) -> Result<SampleFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut meta = BTreeMap::new();
    let mut lines = text.lines().peekable();
    while let Some(l) = lines.next_if(|l| l.starts_with('#')) {
        if let Some((k, v)) = l.trim_start_matches('#').trim().split_once('=') {
            meta.insert(k.to_string(), v.to_string());
        }
    }
    let header = lines.next().ok_or_else(|| Error::format(path, "missing column header"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "sample" || cols[1] != "y_index" {
        return Err(Error::format(path, "expected header `sample,y_index,x_0,...`"));
    }
    let d = cols.len() - 2;
    let (mut y_index, mut x) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != d + 2 {
            return Err(Error::format(path, format!("row {} has {} fields", i + 1, f.len())));
        }
        let bad = || Error::format(path, format!("row {}: not a number", i + 1));
        y_index.push(f[1].parse().map_err(|_| bad())?);
        x.push(
            f[2..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(SampleFile { meta, y_index, x })
}

fn is_dataset_file(path: &Path) -> Result<bool> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.starts_with(&format!("# format={FORMAT_TAG}")))
}

/// Diversity (when every conditioning row has exactly `k` samples), energy
/// distance to the reference and per-dimension moments, as report CSV.
pub fn cmd_eval(cfg: &Config, samples: &[PathBuf], reference: &Path) -> Result<String> {
    for p in samples.iter().map(PathBuf::as_path).chain([reference]) {
        if !p.exists() {
            return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
        }
    }
    if samples.is_empty() {
        return Err(Error::config("samples", "no sample files given"));
    }
    let reference_is_dataset = is_dataset_file(reference)?;
    let (ref_dataset, ref_samples) = if reference_is_dataset {
        (Some(PairedDataset::load(reference)?), None)
    } else {
        (None, Some(read_samples(reference)?))
    };
    let k = cfg.eval.diversity_k;
    let mut rows = Vec::new();
    for path in samples {
        let sf = read_samples(path)?;
        let seed = sf.seed();
        let n = sf.x.len();
        if n == 0 {
            return Err(Error::config("samples", format!("{} has no rows", path.display())));
        }
        let mut groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for (i, x) in sf.y_index.iter().zip(&sf.x) {
            groups.entry(*i).or_default().push(x.clone());
        }
        let sets: Vec<Vec<Vec<f64>>> = groups.values().cloned().collect();
        if sets.iter().any(|s| s.len() != k) {
            return Err(Error::config(
                "diversity_k",
                format!("{} does not have exactly {k} samples per conditioning input", path.display()),
            ));
        }
        let push = |rows: &mut Vec<ReportRow>, metric: String, value: f64| {
            rows.push(ReportRow { metric, value, n, seed });
        };
        push(&mut rows, "diversity".into(), diversity(&sets, k, cfg.eval.sd)?);

        let reference_rows: Vec<Vec<f64>> = match (&ref_dataset, &ref_samples) {
            (Some(d), _) => {
                let idx: Vec<usize> = groups.keys().copied().collect();
                if idx.iter().any(|&i| i >= d.len()) {
                    return Err(Error::config("reference", "sample y_index exceeds the reference dataset"));
                }
                idx.iter().map(|&i| d.x0.row(i).to_vec()).collect()
            }
            (_, Some(r)) => r.x.clone(),
            _ => unreachable!(),
        };
        if reference_rows.is_empty() {
            return Err(Error::config("reference", "reference has no rows"));
        }
        push(&mut rows, "energy_distance".into(), energy_distance(&sf.x, &reference_rows)?);
        let m = moments(&sf.x)?;
        for (j, v) in m.mean.iter().enumerate() {
            push(&mut rows, format!("mean_{j}"), *v);
        }
        for (j, v) in m.var.iter().enumerate() {
            push(&mut rows, format!("var_{j}"), *v);
        }
        push(&mut rows, "var_defined".into(), if m.var_defined { 1.0 } else { 0.0 });
    }
    Ok(report_csv(&rows))
}

/// Schedule table with empty cells where a quantity is undefined.
pub fn cmd_info(timesteps: usize, scale: f64) -> Result<String> {
    let s = BridgeSchedule::new(timesteps, scale)?;
    let mut out = String::from("t,m,delta,delta_cond,posterior_var,c_x,c_y,c_eps\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for t in 0..=timesteps {
        let e = s.query(t)?;
        let r = e.reverse;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            t,
            e.m,
            e.delta,
            opt(e.delta_cond),
            opt(r.map(|r| r.posterior_var)),
            opt(r.map(|r| r.c_x)),
            opt(r.map(|r| r.c_y)),
            opt(r.map(|r| r.c_eps)),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn info_table_marks_degenerate_entries() {
        let t = cmd_info(4, 1.0).unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[1], "0,0,0,,,,,");
        assert!(lines[5].starts_with("4,1,0,") && lines[5].ends_with(",,,,"));
        assert_eq!(lines[2].split(',').filter(|c| c.is_empty()).count(), 0);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("k", "m")), EXIT_USAGE);
        assert_eq!(exit_code(&Error::non_finite("x")), EXIT_FAILURE);
    }
}
