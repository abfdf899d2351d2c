//! Training loop: minibatch regression of `x_t - x_0` on `(x_t, t)`.
//!
//! Randomness for step `k` comes from the stream `(seed, "train", k)`, so a run
//! resumed from a checkpoint at step `k` continues exactly as an uninterrupted
//! run would.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{LossWeighting, TrainConfig};
use crate::data::PairedDataset;
use crate::error::{check_dim, Error, Result};
use crate::nn::{Adam, EmaState, Matrix, NoisePredictor, PlateauLr, TrainBatch};
use crate::process::{forward_sample, loss_target, StateVector};
use crate::rng::{self, StreamRng};
use crate::schedule::BridgeSchedule;

/// Upper bound on held-out rows used for validation.
pub const VAL_MAX_ROWS: usize = 512;
pub const METRICS_HEADER: &str = "step,loss,lr,val_loss";
pub const INCOMPLETE_MARKER: &str = ".incomplete";

/// Per-example loss weight at step `t`.
///
/// `CEps` uses the coefficient of the predicted noise in the reverse mean. At
/// `t = T` that coefficient is undefined and the weight of `x0_hat` in the
/// first reverse move, `1 - m_{T-1}`, is used instead.
pub fn loss_weight(s: &BridgeSchedule, t: usize, weighting: LossWeighting) -> Result<f64> {
    match weighting {
        LossWeighting::Uniform => Ok(1.0),
        LossWeighting::CEps if t == s.steps() => Ok(1.0 - s.m(t - 1)),
        LossWeighting::CEps => Ok(s.reverse(t)?.c_eps),
    }
}

/// One optimizer step on a batch of pairs: draws `t ~ U{1..T}` and standard
/// normal noise per row from `rng`, forms `x_t` and the target, and applies one
/// Adam update. Returns the batch loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut NoisePredictor,
    adam: &mut Adam,
    schedule: &BridgeSchedule,
    x0: &Matrix,
    y: &Matrix,
    rng: &mut StreamRng,
    lr: f64,
    weighting: LossWeighting,
) -> Result<f64> {
    check_dim(x0.rows(), y.rows())?;
    check_dim(x0.cols(), y.cols())?;
    check_dim(model.data_dim(), x0.cols())?;
    if x0.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let (n, d) = x0.shape();
    let mut x_t = Vec::with_capacity(n * d);
    let mut target = Vec::with_capacity(n * d);
    let mut ts = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_range(1..=schedule.steps());
        let mut eps = vec![0.0; d];
        rng::fill_normal(rng, &mut eps);
        let a = StateVector::from_raw(x0.row(i).to_vec());
        let b = StateVector::from_raw(y.row(i).to_vec());
        let e = StateVector::from_raw(eps);
        x_t.extend(forward_sample(schedule, &a, &b, t, &e)?.into_inner());
        target.extend(loss_target(schedule, &a, &b, t, &e)?.into_inner());
        ts.push(t);
        weights.push(loss_weight(schedule, t, weighting)?);
    }
    let batch = TrainBatch {
        x_t: Matrix::from_vec(n, d, x_t)?,
        t: ts,
        target: Matrix::from_vec(n, d, target)?,
        weights: (weighting != LossWeighting::Uniform).then_some(weights),
    };
    let (loss, grads) = model.grad(&batch, schedule.steps())?;
    adam.step(model.params_mut(), &grads.params, lr)?;
    Ok(loss)
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    /// Learning rate used for this step.
    pub lr: f64,
    pub val_loss: Option<f64>,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let mut s = format!("{},{},{},", self.step, self.loss, self.lr);
        if let Some(v) = self.val_loss {
            let _ = write!(s, "{v}");
        }
        s
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    schedule: BridgeSchedule,
    model: NoisePredictor,
    adam: Adam,
    ema: EmaState,
    plateau: PlateauLr,
    step: u64,
    train_x0: Matrix,
    train_y: Matrix,
    val: Option<TrainBatch>,
}

fn select_rows(m: &Matrix, rows: std::ops::Range<usize>) -> Matrix {
    let cols = m.cols();
    Matrix::from_vec(rows.len(), cols, m.data()[rows.start * cols..rows.end * cols].to_vec())
        .expect("row range within matrix")
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, dataset: &PairedDataset) -> Result<Self> {
        let schedule = BridgeSchedule::new(cfg.timesteps, cfg.scale)?;
        let model = NoisePredictor::new(cfg.architecture(dataset.dim()), cfg.seed)?;
        let adam = Adam::new(model.params(), cfg.adam)?;
        let ema = EmaState::new(model.params(), cfg.ema)?;
        let plateau = PlateauLr::new(cfg.plateau)?;
        Self::assemble(cfg, dataset, schedule, model, adam, ema, plateau, 0)
    }

    /// Continues from saved state. The checkpoint must agree with `cfg` on the
    /// schedule, seed and architecture.
    pub fn from_checkpoint(cfg: &TrainConfig, dataset: &PairedDataset, ckpt: Checkpoint) -> Result<Self> {
        if ckpt.steps != cfg.timesteps {
            return Err(Error::config("timesteps", format!("checkpoint has T = {}", ckpt.steps)));
        }
        if ckpt.scale != cfg.scale {
            return Err(Error::config("scale", format!("checkpoint has s = {}", ckpt.scale)));
        }
        if ckpt.seed != cfg.seed {
            return Err(Error::config("seed", format!("checkpoint has seed {}", ckpt.seed)));
        }
        if *ckpt.model.architecture() != cfg.architecture(dataset.dim()) {
            return Err(Error::config("hidden", "checkpoint architecture differs from the config"));
        }
        let schedule = BridgeSchedule::new(cfg.timesteps, cfg.scale)?;
        Self::assemble(
            cfg, dataset, schedule, ckpt.model, ckpt.adam, ckpt.ema, ckpt.plateau, ckpt.step,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: &TrainConfig,
        dataset: &PairedDataset,
        schedule: BridgeSchedule,
        model: NoisePredictor,
        adam: Adam,
        ema: EmaState,
        plateau: PlateauLr,
        step: u64,
    ) -> Result<Self> {
        let n = dataset.len();
        let n_val = ((n as f64 * cfg.val_fraction).floor() as usize).min(n - 1);
        let n_train = n - n_val;
        let val = (n_val > 0).then(|| {
            let rows = n_train..(n_train + n_val.min(VAL_MAX_ROWS));
            build_validation(
                &schedule,
                &select_rows(&dataset.x0, rows.clone()),
                &select_rows(&dataset.y, rows),
                cfg.seed,
            )
        });
        Ok(Self {
            cfg: cfg.clone(),
            schedule,
            model,
            adam,
            ema,
            plateau,
            step,
            train_x0: select_rows(&dataset.x0, 0..n_train),
            train_y: select_rows(&dataset.y, 0..n_train),
            val: val.transpose()?,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn schedule(&self) -> &BridgeSchedule {
        &self.schedule
    }

    pub fn model(&self) -> &NoisePredictor {
        &self.model
    }

    pub fn lr(&self) -> f64 {
        self.plateau.lr()
    }

    /// Model used for sampling: EMA weights once the shadow has started.
    pub fn sampling_model(&self) -> NoisePredictor {
        self.checkpoint().sampling_model(true)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            steps: self.schedule.steps(),
            scale: self.schedule.scale(),
            seed: self.cfg.seed,
            step: self.step,
            model: self.model.clone(),
            ema: self.ema.clone(),
            adam: self.adam.clone(),
            plateau: self.plateau.clone(),
        }
    }

    /// Mean squared error on the fixed validation set, if there is one.
    pub fn validation_loss(&self) -> Result<Option<f64>> {
        let Some(v) = &self.val else {
            return Ok(None);
        };
        let pred = self.model.forward_batch(&v.x_t, &v.t, self.schedule.steps())?;
        let sum: f64 = pred
            .data()
            .iter()
            .zip(v.target.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        Ok(Some(sum / pred.len() as f64))
    }

    /// Runs one training step, then EMA and (at validation steps) the LR scheduler.
    pub fn train_one(&mut self) -> Result<StepRecord> {
        let mut r = rng::stream(self.cfg.seed, "train", self.step);
        let n = self.train_x0.rows();
        let b = self.cfg.batch_size;
        let d = self.train_x0.cols();
        let (mut bx, mut by) = (Vec::with_capacity(b * d), Vec::with_capacity(b * d));
        for _ in 0..b {
            let i = r.random_range(0..n);
            bx.extend_from_slice(self.train_x0.row(i));
            by.extend_from_slice(self.train_y.row(i));
        }
        let lr = self.plateau.lr();
        let loss = train_step(
            &mut self.model,
            &mut self.adam,
            &self.schedule,
            &Matrix::from_vec(b, d, bx)?,
            &Matrix::from_vec(b, d, by)?,
            &mut r,
            lr,
            self.cfg.loss_weighting,
        )
        .map_err(|e| match e {
            Error::NonFinite { context } => Error::non_finite(format!("{context} at step {}", self.step + 1)),
            other => other,
        })?;
        self.step += 1;
        self.ema.update(self.model.params(), self.step)?;
        let mut val_loss = None;
        if self.step.is_multiple_of(self.cfg.validation_interval) {
            val_loss = self.validation_loss()?;
            self.plateau.step(val_loss.unwrap_or(loss))?;
        }
        Ok(StepRecord {
            step: self.step,
            loss,
            lr,
            val_loss,
        })
    }

    /// Short human-readable state summary written when training aborts.
    pub fn diagnostic(&self, err: &Error) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "error: {err}");
        let _ = writeln!(s, "step: {}", self.step);
        let _ = writeln!(s, "lr: {}", self.plateau.lr());
        let _ = writeln!(s, "ema_updates: {}", self.ema.updates());
        for (i, p) in self.model.params().iter().enumerate() {
            let norm = p.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let bad = p.data().iter().filter(|v| !v.is_finite()).count();
            let _ = writeln!(s, "param[{i}] shape={:?} norm={norm} non_finite={bad}", p.shape());
        }
        s
    }
}

fn build_validation(s: &BridgeSchedule, x0: &Matrix, y: &Matrix, seed: u64) -> Result<TrainBatch> {
    let steps = s.steps();
    let grid: Vec<usize> = (1..=9).map(|k| ((2 * k * steps + 10) / 20).max(1)).collect();
    let mut r = rng::stream(seed, "val-noise", 0);
    let d = x0.cols();
    let (mut xs, mut ts, mut targets) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..x0.rows() {
        let a = StateVector::from_raw(x0.row(i).to_vec());
        let b = StateVector::from_raw(y.row(i).to_vec());
        for &t in &grid {
            let mut eps = vec![0.0; d];
            rng::fill_normal(&mut r, &mut eps);
            let e = StateVector::from_raw(eps);
            xs.extend(forward_sample(s, &a, &b, t, &e)?.into_inner());
            targets.extend(loss_target(s, &a, &b, t, &e)?.into_inner());
            ts.push(t);
        }
    }
    let rows = ts.len();
    Ok(TrainBatch {
        x_t: Matrix::from_vec(rows, d, xs)?,
        t: ts,
        target: Matrix::from_vec(rows, d, targets)?,
        weights: None,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub records: Vec<StepRecord>,
}

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint.bin")
}

pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join("metrics.csv")
}

/// Metrics lines already logged up to and including `step`.
fn kept_metrics(path: &Path, step: u64) -> Result<String> {
    let mut out = format!("{METRICS_HEADER}\n");
    if !path.exists() {
        return Ok(out);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for line in text.lines().skip(1) {
        let s: u64 = line
            .split(',')
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::format(path, format!("bad metrics line `{line}`")))?;
        if s <= step {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains until `cfg.max_steps`, writing `metrics.csv`, `checkpoint.bin` and
/// any periodic `checkpoint_<step>.bin` into `out_dir`. A `.incomplete` marker
/// exists while the run is in progress or after it failed.
pub fn run_training(
    cfg: &TrainConfig,
    dataset: &PairedDataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let marker = out_dir.join(INCOMPLETE_MARKER);
    fs::write(&marker, b"").map_err(|e| Error::io(&marker, e))?;

    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(cfg, dataset, Checkpoint::load(p)?)?,
        None => Trainer::new(cfg, dataset)?,
    };
    let metrics = metrics_path(out_dir);
    let existing = match resume {
        Some(_) => kept_metrics(&metrics, trainer.step())?,
        None => format!("{METRICS_HEADER}\n"),
    };
    fs::write(&metrics, existing).map_err(|e| Error::io(&metrics, e))?;
    let file = fs::OpenOptions::new()
        .append(true)
        .open(&metrics)
        .map_err(|e| Error::io(&metrics, e))?;
    let mut log = std::io::BufWriter::new(file);

    let mut records = Vec::new();
    while trainer.step() < cfg.max_steps {
        let rec = match trainer.train_one() {
            Ok(r) => r,
            Err(e) => {
                let _ = log.flush();
                let diag = out_dir.join("diagnostic.txt");
                let _ = fs::write(&diag, trainer.diagnostic(&e));
                return Err(e);
            }
        };
        writeln!(log, "{}", rec.csv_line()).map_err(|e| Error::io(&metrics, e))?;
        records.push(rec);
        if cfg.checkpoint_interval > 0 && rec.step % cfg.checkpoint_interval == 0 {
            log.flush().map_err(|e| Error::io(&metrics, e))?;
            trainer
                .checkpoint()
                .save(&out_dir.join(format!("checkpoint_{}.bin", rec.step)))?;
        }
    }
    log.flush().map_err(|e| Error::io(&metrics, e))?;
    let ckpt = checkpoint_path(out_dir);
    trainer.checkpoint().save(&ckpt)?;
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        metrics,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::data::gen_joint_gaussian;
    use crate::oracle::JointGaussianSpec;

    fn cfg(extra: &str) -> TrainConfig {
        let text = format!(
            "seed = 3\ntimesteps = 20\nbatch_size = 16\nmax_steps = 30\nhidden = 16,16\nembed_dim = 8\nlr_max = 1e-3\nvalidation_interval = 10\nema_start = 0\nema_interval = 2\n{extra}"
        );
        let c = Config::parse(&text).unwrap();
        c.validate_train().unwrap();
        c.train
    }

    fn data() -> PairedDataset {
        let spec = JointGaussianSpec {
            mean0: 1.0,
            meany: -1.0,
            var0: 1.0,
            vary: 1.0,
            corr: 0.8,
        };
        gen_joint_gaussian(&spec, 1, 200, 5).unwrap()
    }

    #[test]
    fn first_loss_is_mean_squared_target() {
        let c = cfg("");
        let d = data();
        let mut tr = Trainer::new(&c, &d).unwrap();
        // Recreate the first batch and its targets from the same stream.
        let mut r = rng::stream(c.seed, "train", 0);
        let n_train = d.len() - 20;
        let idx: Vec<usize> = (0..c.batch_size).map(|_| r.random_range(0..n_train)).collect();
        let s = BridgeSchedule::new(c.timesteps, c.scale).unwrap();
        let mut sum = 0.0;
        for &i in &idx {
            let t = r.random_range(1..=c.timesteps);
            let e = rng::normal(&mut r);
            let target = s.m(t) * (d.y.get(i, 0) - d.x0.get(i, 0)) + s.delta(t).sqrt() * e;
            sum += target * target;
        }
        let rec = tr.train_one().unwrap();
        assert!((rec.loss - sum / idx.len() as f64).abs() < 1e-12);
        assert_eq!(rec.step, 1);
    }

    #[test]
    fn loss_trace_is_deterministic() {
        let run = || {
            let mut tr = Trainer::new(&cfg(""), &data()).unwrap();
            (0..10).map(|_| tr.train_one().unwrap().loss.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn validation_steps_the_scheduler() {
        let mut tr = Trainer::new(&cfg(""), &data()).unwrap();
        let recs: Vec<_> = (0..30).map(|_| tr.train_one().unwrap()).collect();
        let val_steps: Vec<u64> = recs.iter().filter(|r| r.val_loss.is_some()).map(|r| r.step).collect();
        assert_eq!(val_steps, vec![10, 20, 30]);
    }

    #[test]
    fn weights() {
        let s = BridgeSchedule::new(10, 1.0).unwrap();
        assert_eq!(loss_weight(&s, 5, LossWeighting::Uniform).unwrap(), 1.0);
        assert_eq!(loss_weight(&s, 5, LossWeighting::CEps).unwrap(), s.reverse(5).unwrap().c_eps);
        assert_eq!(loss_weight(&s, 1, LossWeighting::CEps).unwrap(), 1.0);
        assert!((loss_weight(&s, 10, LossWeighting::CEps).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_writes_only_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let c = TrainConfig {
            max_steps: 0,
            ..cfg("")
        };
        let out = run_training(&c, &data(), dir.path(), None).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(fs::read_to_string(&out.metrics).unwrap(), format!("{METRICS_HEADER}\n"));
        let ck = Checkpoint::load(&out.checkpoint).unwrap();
        assert_eq!(ck.step, 0);
        assert_eq!(ck.model, NoisePredictor::new(c.architecture(1), c.seed).unwrap());
        assert!(!dir.path().join(INCOMPLETE_MARKER).exists());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let full = tempfile::tempdir().unwrap();
        let part = tempfile::tempdir().unwrap();
        let c = cfg("checkpoint_interval = 10\n");
        run_training(&c, &data(), full.path(), None).unwrap();
        let short = TrainConfig {
            max_steps: 20,
            ..c.clone()
        };
        run_training(&short, &data(), part.path(), None).unwrap();
        // Resume from the step-10 checkpoint; metrics rows after step 10 are replaced.
        let ck = part.path().join("checkpoint_10.bin");
        run_training(&c, &data(), part.path(), Some(&ck)).unwrap();
        let a = fs::read(metrics_path(full.path())).unwrap();
        let b = fs::read(metrics_path(part.path())).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            fs::read(checkpoint_path(full.path())).unwrap(),
            fs::read(checkpoint_path(part.path())).unwrap()
        );
    }

    #[test]
    fn resume_rejects_mismatched_config() {
        let dir = tempfile::tempdir().unwrap();
        let c = TrainConfig {
            max_steps: 2,
            ..cfg("")
        };
        let out = run_training(&c, &data(), dir.path(), None).unwrap();
        let other = TrainConfig { scale: 2.0, ..c };
        assert!(matches!(
            run_training(&other, &data(), dir.path(), Some(&out.checkpoint)),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn non_finite_loss_aborts_with_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = data();
        d.y.data_mut()[0] = 1e200;
        let c = TrainConfig {
            batch_size: 200,
            val_fraction: 0.0,
            ..cfg("")
        };
        let err = run_training(&c, &d, dir.path(), None).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
        assert!(dir.path().join("diagnostic.txt").exists());
        assert!(dir.path().join(INCOMPLETE_MARKER).exists());
    }
}
