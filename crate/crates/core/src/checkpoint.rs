//! Binary checkpoint format (all integers and floats little-endian).
//!
//! ```text
//! magic        8 bytes  "BBDMCKPT"
//! version      u32
//! steps (T)    u64
//! scale (s)    f64
//! seed         u64
//! step         u64
//! architecture data_dim u64, embed_dim u64, activation str, hidden count u32, hidden u64 each
//! params       matrix list
//! ema          decay f64, start u64, interval u64, updates u64, matrix list
//! adam         beta1 f64, beta2 f64, eps f64, step u64, m matrix list, v matrix list
//! plateau      max_lr, min_lr, factor f64, patience u64, cooldown u64, threshold f64,
//!              lr f64, best f64, num_bad u64, cooldown_left u64
//! crc32        u32 over every preceding byte
//! ```
//!
//! `str` is a u32 byte length then UTF-8; a matrix list is a u32 count, then
//! per matrix u32 rows, u32 cols and `rows * cols` f64 values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{
    Activation, Adam, AdamConfig, Architecture, EmaConfig, EmaState, Matrix, NoisePredictor,
    PlateauConfig, PlateauLr,
};

pub const MAGIC: &[u8; 8] = b"BBDMCKPT";
pub const VERSION: u32 = 1;

/// Full training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub steps: usize,
    pub scale: f64,
    pub seed: u64,
    pub step: u64,
    pub model: NoisePredictor,
    pub ema: EmaState,
    pub adam: Adam,
    pub plateau: PlateauLr,
}

impl Checkpoint {
    /// EMA weights when the shadow has been updated at least once, raw
    /// parameters otherwise.
    pub fn sampling_model(&self, use_ema: bool) -> NoisePredictor {
        let mut m = self.model.clone();
        if use_ema && self.ema.updates() > 0 {
            m.set_params(self.ema.shadow())
                .expect("EMA shadow shapes are checked on load");
        }
        m
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(self.steps as u64);
        w.f64(self.scale);
        w.u64(self.seed);
        w.u64(self.step);

        let arch = self.model.architecture();
        w.u64(arch.data_dim as u64);
        w.u64(arch.embed_dim as u64);
        w.str(arch.activation.tag());
        w.u32(arch.hidden.len() as u32);
        for h in &arch.hidden {
            w.u64(*h as u64);
        }
        w.matrices(self.model.params());

        let e = self.ema.config();
        w.f64(e.decay);
        w.u64(e.start_step);
        w.u64(e.update_interval);
        w.u64(self.ema.updates());
        w.matrices(self.ema.shadow());

        let a = self.adam.config();
        w.f64(a.beta1);
        w.f64(a.beta2);
        w.f64(a.eps);
        w.u64(self.adam.step_count());
        w.matrices(self.adam.first_moment());
        w.matrices(self.adam.second_moment());

        let p = self.plateau.config();
        w.f64(p.max_lr);
        w.f64(p.min_lr);
        w.f64(p.factor);
        w.u64(p.patience);
        w.u64(p.cooldown);
        w.f64(p.threshold);
        w.f64(self.plateau.lr());
        w.f64(self.plateau.best());
        w.u64(self.plateau.num_bad());
        w.u64(self.plateau.cooldown_left());

        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let expected = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if expected != actual {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                expected,
                actual,
            });
        }
        let mut r = Reader {
            buf: &body[8..],
            path,
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let steps = r.usize()?;
        let scale = r.f64()?;
        let seed = r.u64()?;
        let step = r.u64()?;

        let data_dim = r.usize()?;
        let embed_dim = r.usize()?;
        let tag = r.str()?;
        let activation = Activation::from_tag(&tag)
            .ok_or_else(|| Error::format(path, format!("unknown activation `{tag}`")))?;
        let n_hidden = r.u32()? as usize;
        let hidden = (0..n_hidden).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let arch = Architecture {
            data_dim,
            embed_dim,
            hidden,
            activation,
        };
        let bad = |e: Error| Error::format(path, e.to_string());
        let model = NoisePredictor::from_parts(arch, r.matrices()?).map_err(bad)?;

        let ema_cfg = EmaConfig {
            decay: r.f64()?,
            start_step: r.u64()?,
            update_interval: r.u64()?,
        };
        let updates = r.u64()?;
        let shadow = r.matrices()?;
        let same_shapes = |m: &[Matrix]| {
            m.len() == model.params().len()
                && m.iter().zip(model.params()).all(|(a, b)| a.shape() == b.shape())
        };
        if !same_shapes(&shadow) {
            return Err(Error::format(path, "EMA shadow does not match the model"));
        }
        let ema = EmaState::from_state(ema_cfg, shadow, updates).map_err(bad)?;

        let adam_cfg = AdamConfig {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let adam_step = r.u64()?;
        let m = r.matrices()?;
        let v = r.matrices()?;
        let adam = Adam::from_state(model.params(), adam_cfg, adam_step, m, v).map_err(bad)?;

        let plateau_cfg = PlateauConfig {
            max_lr: r.f64()?,
            min_lr: r.f64()?,
            factor: r.f64()?,
            patience: r.u64()?,
            cooldown: r.u64()?,
            threshold: r.f64()?,
        };
        let plateau = PlateauLr::from_state(plateau_cfg, r.f64()?, r.f64()?, r.u64()?, r.u64()?)
            .map_err(bad)?;
        if !r.buf.is_empty() {
            return Err(Error::format(path, "trailing bytes after checkpoint body"));
        }
        Ok(Self {
            steps,
            scale,
            seed,
            step,
            model,
            ema,
            adam,
            plateau,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn matrices(&mut self, ms: &[Matrix]) {
        self.u32(ms.len() as u32);
        for m in ms {
            self.u32(m.rows() as u32);
            self.u32(m.cols() as u32);
            for v in m.data() {
                self.f64(*v);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::format(self.path, "checkpoint is truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format(self.path, "size overflows usize"))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let path = self.path;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(path, "bad UTF-8"))
    }
    fn matrices(&mut self) -> Result<Vec<Matrix>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|n| n.saturating_mul(8) <= self.buf.len())
                .ok_or_else(|| Error::format(self.path, "checkpoint is truncated"))?;
            let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            out.push(Matrix::from_vec(rows, cols, data)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let arch = Architecture {
            data_dim: 2,
            embed_dim: 8,
            hidden: vec![5, 3],
            activation: Activation::Tanh,
        };
        let model = NoisePredictor::new(arch, 3).unwrap();
        let mut ema = EmaState::new(
            model.params(),
            EmaConfig {
                decay: 0.9,
                start_step: 0,
                update_interval: 1,
            },
        )
        .unwrap();
        let mut adam = Adam::new(model.params(), AdamConfig::default()).unwrap();
        let mut params = model.params().to_vec();
        let grads: Vec<Matrix> = params.iter().map(|p| p.map(|_| 0.5)).collect();
        for step in 1..=2 {
            adam.step(&mut params, &grads, 1e-3).unwrap();
            ema.update(&params, step).unwrap();
        }
        let mut plateau = PlateauLr::new(PlateauConfig::default()).unwrap();
        plateau.step(0.7).unwrap();
        plateau.step(0.8).unwrap();
        let mut model = model;
        model.set_params(&params).unwrap();
        Checkpoint {
            steps: 100,
            scale: 1.5,
            seed: 42,
            step: 2,
            model,
            ema,
            adam,
            plateau,
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let p = Path::new("x");
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped, p), Err(Error::Checksum { .. })));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9], p).is_err());
        assert!(matches!(Checkpoint::from_bytes(b"garbage", p), Err(Error::Format { .. })));
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 7;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("x")),
            Err(Error::Version { found: 7, .. })
        ));
    }

    #[test]
    fn sampling_model_prefers_ema() {
        let c = sample();
        assert_eq!(c.sampling_model(true).params(), c.ema.shadow());
        assert_ne!(c.ema.shadow(), c.model.params());
        assert_eq!(c.sampling_model(false).params(), c.model.params());
    }
}
