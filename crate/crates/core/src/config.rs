//! Flat `key = value` configuration shared by every subcommand.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors, and a
//! key may appear at most once per file; `--set key=value` overrides are
//! applied afterwards through the same parser.

use std::path::PathBuf;

use crate::data::GeneratorSpec;
use crate::error::{Error, Result};
use crate::metrics::SdKind;
use crate::nn::{Activation, AdamConfig, Architecture, EmaConfig, PlateauConfig};
use crate::oracle::JointGaussianSpec;
use crate::sampler::SamplerMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossWeighting {
    /// Plain mean squared error.
    #[default]
    Uniform,
    /// Rows weighted by the noise coefficient of the reverse step at their `t`.
    CEps,
}

/// Where training pairs come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    File(PathBuf),
    Generate {
        generator: GeneratorSpec,
        n: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub timesteps: usize,
    pub scale: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub adam: AdamConfig,
    pub ema: EmaConfig,
    pub plateau: PlateauConfig,
    /// Periodic checkpoints every this many steps; 0 writes only the final one.
    pub checkpoint_interval: u64,
    /// Steps between validation passes (each one also steps the LR scheduler).
    pub validation_interval: u64,
    /// Fraction of rows (taken from the end) held out for validation.
    pub val_fraction: f64,
    pub loss_weighting: LossWeighting,
}

impl TrainConfig {
    pub fn architecture(&self, data_dim: usize) -> Architecture {
        Architecture {
            data_dim,
            embed_dim: self.embed_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub mode: SamplerMode,
    pub sample_steps: usize,
    pub eta: f64,
    /// Number of conditioning rows taken from the dataset.
    pub n_samples: usize,
    /// Samples drawn per conditioning row.
    pub samples_per_y: usize,
    pub use_ema: bool,
    /// Number of leading samples whose trajectories are exported.
    pub trajectories: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub diversity_k: usize,
    pub sd: SdKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    seed: Option<u64>,
    dataset: Option<PathBuf>,
    generator: Option<String>,
    n_pairs: usize,
    data_seed: Option<u64>,
    gen_spec: JointGaussianSpec,
    gen_dim: usize,
    gen_noise_sd: f64,
    gen_side: usize,
    gen_flip_prob: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                timesteps: 1000,
                scale: 1.0,
                batch_size: 128,
                max_steps: 10_000,
                seed: 0,
                hidden: vec![64, 64],
                embed_dim: 16,
                activation: Activation::Silu,
                adam: AdamConfig::default(),
                ema: EmaConfig::default(),
                plateau: PlateauConfig::default(),
                checkpoint_interval: 0,
                validation_interval: 100,
                val_fraction: 0.1,
                loss_weighting: LossWeighting::Uniform,
            },
            sample: SampleConfig {
                mode: SamplerMode::Accelerated,
                sample_steps: 200,
                eta: 1.0,
                n_samples: 100,
                samples_per_y: 1,
                use_ema: true,
                trajectories: 0,
            },
            eval: EvalConfig {
                diversity_k: 5,
                sd: SdKind::Population,
            },
            seed: None,
            dataset: None,
            generator: None,
            n_pairs: 10_000,
            data_seed: None,
            gen_spec: JointGaussianSpec {
                mean0: 1.0,
                meany: -1.0,
                var0: 1.0,
                vary: 1.0,
                corr: 0.8,
            },
            gen_dim: 1,
            gen_noise_sd: 0.1,
            gen_side: 4,
            gen_flip_prob: 0.05,
        }
    }
}

/// Every accepted key, for error messages and documentation.
pub const KEYS: &[&str] = &[
    "seed",
    "timesteps",
    "scale",
    "batch_size",
    "max_steps",
    "hidden",
    "embed_dim",
    "activation",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "lr_max",
    "lr_min",
    "lr_factor",
    "lr_patience",
    "lr_cooldown",
    "lr_threshold",
    "ema_decay",
    "ema_start",
    "ema_interval",
    "checkpoint_interval",
    "validation_interval",
    "val_fraction",
    "loss_weighting",
    "dataset",
    "generator",
    "n_pairs",
    "data_seed",
    "gen.mean0",
    "gen.meany",
    "gen.var0",
    "gen.vary",
    "gen.corr",
    "gen.dim",
    "gen.noise_sd",
    "gen.side",
    "gen.flip_prob",
    "sampler",
    "sample_steps",
    "eta",
    "n_samples",
    "samples_per_y",
    "use_ema",
    "trajectories",
    "diversity_k",
    "diversity_sd",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", lineno + 1), format!("expected key = value, got `{line}`"))
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::config(k, "given more than once"));
            }
            cfg.set(k, v.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv, "override must look like key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => self.seed = Some(parse_num(key, value)?),
            "timesteps" => t.timesteps = parse_num(key, value)?,
            "scale" => t.scale = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "max_steps" => t.max_steps = parse_num(key, value)?,
            "hidden" => {
                t.hidden = value
                    .split(',')
                    .map(|h| parse_num(key, h.trim()))
                    .collect::<Result<_>>()?
            }
            "embed_dim" => t.embed_dim = parse_num(key, value)?,
            "activation" => {
                t.activation = Activation::from_tag(value)
                    .ok_or_else(|| Error::config(key, format!("unknown activation `{value}`")))?
            }
            "adam_beta1" => t.adam.beta1 = parse_num(key, value)?,
            "adam_beta2" => t.adam.beta2 = parse_num(key, value)?,
            "adam_eps" => t.adam.eps = parse_num(key, value)?,
            "lr_max" => t.plateau.max_lr = parse_num(key, value)?,
            "lr_min" => t.plateau.min_lr = parse_num(key, value)?,
            "lr_factor" => t.plateau.factor = parse_num(key, value)?,
            "lr_patience" => t.plateau.patience = parse_num(key, value)?,
            "lr_cooldown" => t.plateau.cooldown = parse_num(key, value)?,
            "lr_threshold" => t.plateau.threshold = parse_num(key, value)?,
            "ema_decay" => t.ema.decay = parse_num(key, value)?,
            "ema_start" => t.ema.start_step = parse_num(key, value)?,
            "ema_interval" => t.ema.update_interval = parse_num(key, value)?,
            "checkpoint_interval" => t.checkpoint_interval = parse_num(key, value)?,
            "validation_interval" => t.validation_interval = parse_num(key, value)?,
            "val_fraction" => t.val_fraction = parse_num(key, value)?,
            "loss_weighting" => {
                t.loss_weighting = match value {
                    "uniform" => LossWeighting::Uniform,
                    "c_eps" => LossWeighting::CEps,
                    _ => return Err(Error::config(key, format!("expected uniform or c_eps, got `{value}`"))),
                }
            }
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "generator" => self.generator = Some(value.to_string()),
            "n_pairs" => self.n_pairs = parse_num(key, value)?,
            "data_seed" => self.data_seed = Some(parse_num(key, value)?),
            "gen.mean0" => self.gen_spec.mean0 = parse_num(key, value)?,
            "gen.meany" => self.gen_spec.meany = parse_num(key, value)?,
            "gen.var0" => self.gen_spec.var0 = parse_num(key, value)?,
            "gen.vary" => self.gen_spec.vary = parse_num(key, value)?,
            "gen.corr" => self.gen_spec.corr = parse_num(key, value)?,
            "gen.dim" => self.gen_dim = parse_num(key, value)?,
            "gen.noise_sd" => self.gen_noise_sd = parse_num(key, value)?,
            "gen.side" => self.gen_side = parse_num(key, value)?,
            "gen.flip_prob" => self.gen_flip_prob = parse_num(key, value)?,
            "sampler" => {
                self.sample.mode = match value {
                    "ancestral" => SamplerMode::Ancestral,
                    "accelerated" => SamplerMode::Accelerated,
                    _ => return Err(Error::config(key, format!("expected ancestral or accelerated, got `{value}`"))),
                }
            }
            "sample_steps" => self.sample.sample_steps = parse_num(key, value)?,
            "eta" => self.sample.eta = parse_num(key, value)?,
            "n_samples" => self.sample.n_samples = parse_num(key, value)?,
            "samples_per_y" => self.sample.samples_per_y = parse_num(key, value)?,
            "use_ema" => self.sample.use_ema = parse_bool(key, value)?,
            "trajectories" => self.sample.trajectories = parse_num(key, value)?,
            "diversity_k" => self.eval.diversity_k = parse_num(key, value)?,
            "diversity_sd" => {
                self.eval.sd = match value {
                    "population" => SdKind::Population,
                    "sample" => SdKind::Sample,
                    _ => return Err(Error::config(key, format!("expected population or sample, got `{value}`"))),
                }
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        if key == "seed" {
            self.train.seed = self.seed.expect("just set");
        }
        Ok(())
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// The root seed, which every command requires.
    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::config("seed", "a seed is required"))
    }

    /// Checks the training fields.
    pub fn validate_train(&self) -> Result<()> {
        self.require_seed()?;
        let t = &self.train;
        if t.timesteps < 2 {
            return Err(Error::config("timesteps", "must be at least 2"));
        }
        if !(t.scale > 0.0 && t.scale.is_finite()) {
            return Err(Error::config("scale", "must be positive"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if t.hidden.is_empty() || t.hidden.contains(&0) {
            return Err(Error::config("hidden", "need at least one positive layer width"));
        }
        if t.embed_dim < 2 || !t.embed_dim.is_multiple_of(2) {
            return Err(Error::config("embed_dim", "must be even and at least 2"));
        }
        t.adam.validate().map_err(|e| Error::config("adam_*", e.to_string()))?;
        t.ema.validate().map_err(|e| Error::config("ema_*", e.to_string()))?;
        t.plateau.validate().map_err(|e| Error::config("lr_*", e.to_string()))?;
        if t.validation_interval == 0 {
            return Err(Error::config("validation_interval", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return Err(Error::config("val_fraction", "must be in [0, 1)"));
        }
        Ok(())
    }

    /// Checks the sampling fields against a schedule length.
    pub fn validate_sample(&self, timesteps: usize) -> Result<()> {
        self.require_seed()?;
        let s = &self.sample;
        if s.mode == SamplerMode::Accelerated && !(1..=timesteps).contains(&s.sample_steps) {
            return Err(Error::config(
                "sample_steps",
                format!("must be in 1..={timesteps}, got {}", s.sample_steps),
            ));
        }
        if !(0.0..=1.0).contains(&s.eta) {
            return Err(Error::config("eta", "must be in [0, 1]"));
        }
        if s.samples_per_y == 0 {
            return Err(Error::config("samples_per_y", "must be positive"));
        }
        Ok(())
    }

    /// Where the data comes from: an explicit file wins over a generator.
    pub fn data_source(&self) -> Result<DataSource> {
        if let Some(p) = &self.dataset {
            return Ok(DataSource::File(p.clone()));
        }
        let Some(name) = &self.generator else {
            return Err(Error::config("dataset", "no dataset path or generator given"));
        };
        let generator = match name.as_str() {
            "joint-gaussian" => GeneratorSpec::JointGaussian {
                spec: self.gen_spec,
                dim: self.gen_dim,
            },
            "two-moons" => GeneratorSpec::TwoMoons {
                noise_sd: self.gen_noise_sd,
            },
            "binary-patterns" => GeneratorSpec::BinaryPatterns {
                side: self.gen_side,
                flip_prob: self.gen_flip_prob,
            },
            other => return Err(Error::config("generator", format!("unknown generator `{other}`"))),
        };
        if self.n_pairs == 0 {
            return Err(Error::config("n_pairs", "must be positive"));
        }
        Ok(DataSource::Generate {
            generator,
            n: self.n_pairs,
            seed: self.data_seed.unwrap_or(self.require_seed()?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_overrides() {
        let text = "# smoke run\nseed = 7\ntimesteps=100 # short\nhidden = 32, 32, 16\n\nactivation = tanh\ngenerator = two-moons\n";
        let mut c = Config::parse(text).unwrap();
        assert_eq!(c.seed(), Some(7));
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.train.timesteps, 100);
        assert_eq!(c.train.hidden, vec![32, 32, 16]);
        assert_eq!(c.train.activation, Activation::Tanh);
        c.apply_override("scale=2.5").unwrap();
        assert_eq!(c.train.scale, 2.5);
        assert!(matches!(
            c.data_source().unwrap(),
            DataSource::Generate { n: 10_000, seed: 7, .. }
        ));
        c.validate_train().unwrap();
    }

    #[test]
    fn unknown_and_duplicate_keys_fail() {
        let e = Config::parse("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "bogus"));
        assert!(Config::parse("seed = 1\nseed = 2\n").is_err());
        assert!(Config::parse("just words\n").is_err());
        assert!(Config::default().apply_override("noequals").is_err());
        assert!(Config::parse("timesteps = ten\n").is_err());
    }

    #[test]
    fn seed_is_mandatory() {
        let c = Config::parse("timesteps = 10\n").unwrap();
        assert!(matches!(c.validate_train(), Err(Error::Config { key, .. }) if key == "seed"));
    }

    #[test]
    fn defaults() {
        let c = Config::default();
        assert_eq!(c.train.timesteps, 1000);
        assert_eq!(c.sample.sample_steps, 200);
        assert_eq!(c.eval.diversity_k, 5);
        assert!(matches!(c.data_source(), Err(Error::Config { key, .. }) if key == "dataset"));
    }

    #[test]
    fn every_listed_key_is_accepted() {
        let sample_values = |k: &str| match k {
            "hidden" => "8,8",
            "activation" => "silu",
            "loss_weighting" => "c_eps",
            "dataset" => "d.csv",
            "generator" => "two-moons",
            "sampler" => "ancestral",
            "use_ema" => "false",
            "diversity_sd" => "sample",
            "scale" | "eta" | "val_fraction" | "ema_decay" | "lr_factor" | "adam_beta1"
            | "adam_beta2" | "gen.corr" | "gen.flip_prob" => "0.5",
            "adam_eps" | "lr_max" | "lr_min" | "lr_threshold" | "gen.mean0" | "gen.meany"
            | "gen.var0" | "gen.vary" | "gen.noise_sd" => "0.25",
            _ => "4",
        };
        for k in KEYS {
            let mut c = Config::default();
            c.set(k, sample_values(k)).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }
}
