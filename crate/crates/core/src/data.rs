//! Paired toy datasets and their CSV file format.
//!
//! File layout:
//!
//! ```text
//! # format=bbdm-paired
//! # version=1
//! # generator=two-moons
//! # param.noise_sd=0.1
//! # seed=7
//! # dim=2
//! # n=3
//! # crc32=1234567890
//! x_0,x_1,y_0,y_1
//! 0.1,0.2,-0.2,-0.1
//! ...
//! ```
//!
//! The CRC32 covers every byte after the last `#` line (column header and
//! rows). Values are written with Rust's shortest round-trip formatting, so a
//! load after a save reproduces every bit.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::oracle::JointGaussianSpec;
use crate::rng;

pub const FORMAT_TAG: &str = "bbdm-paired";
pub const FORMAT_VERSION: u32 = 1;

/// `n` positional pairs `(x0_i, y_i)` of a shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub x0: Matrix,
    pub y: Matrix,
    pub generator: String,
    pub params: BTreeMap<String, String>,
    pub seed: u64,
}

/// Metadata block of a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub version: u32,
    pub generator: String,
    pub params: BTreeMap<String, String>,
    pub seed: u64,
    pub dim: usize,
    pub n: usize,
    pub crc32: u32,
}

impl PairedDataset {
    pub fn new(
        x0: Matrix,
        y: Matrix,
        generator: impl Into<String>,
        params: BTreeMap<String, String>,
        seed: u64,
    ) -> Result<Self> {
        if x0.shape() != y.shape() {
            return Err(Error::invalid("x0 and y must have the same shape"));
        }
        if x0.rows() == 0 || x0.cols() == 0 {
            return Err(Error::invalid("dataset needs at least one pair of positive dimension"));
        }
        if !x0.is_finite() || !y.is_finite() {
            return Err(Error::non_finite("dataset values"));
        }
        Ok(Self {
            x0,
            y,
            generator: generator.into(),
            params,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.x0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x0.cols()
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            version: FORMAT_VERSION,
            generator: self.generator.clone(),
            params: self.params.clone(),
            seed: self.seed,
            dim: self.dim(),
            n: self.len(),
            crc32: crc32fast::hash(self.data_section().as_bytes()),
        }
    }

    fn data_section(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        let cols: Vec<String> = (0..d)
            .map(|j| format!("x_{j}"))
            .chain((0..d).map(|j| format!("y_{j}")))
            .collect();
        out.push_str(&cols.join(","));
        out.push('\n');
        for i in 0..self.len() {
            let mut first = true;
            for v in self.x0.row(i).iter().chain(self.y.row(i)) {
                if !first {
                    out.push(',');
                }
                first = false;
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let data = self.data_section();
        let mut out = String::new();
        let _ = writeln!(out, "# format={FORMAT_TAG}");
        let _ = writeln!(out, "# version={FORMAT_VERSION}");
        let _ = writeln!(out, "# generator={}", self.generator);
        for (k, v) in &self.params {
            let _ = writeln!(out, "# param.{k}={v}");
        }
        let _ = writeln!(out, "# seed={}", self.seed);
        let _ = writeln!(out, "# dim={}", self.dim());
        let _ = writeln!(out, "# n={}", self.len());
        let _ = writeln!(out, "# crc32={}", crc32fast::hash(data.as_bytes()));
        out.push_str(&data);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut header_len = 0;
        let mut meta = Vec::new();
        for line in text.split_inclusive('\n') {
            if !line.starts_with('#') {
                break;
            }
            header_len += line.len();
            meta.push(line.trim_end_matches(['\n', '\r']).to_string());
        }
        let header = parse_header_lines(&meta, path)?;
        let data = &text[header_len..];
        let actual = crc32fast::hash(data.as_bytes());
        if actual != header.crc32 {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                expected: header.crc32,
                actual,
            });
        }

        let mut lines = data.lines();
        let d = header.dim;
        let cols = lines
            .next()
            .ok_or_else(|| Error::format(path, "missing column header"))?;
        if cols.split(',').count() != 2 * d {
            return Err(Error::format(path, format!("column header does not have {} columns", 2 * d)));
        }
        let mut x0 = Vec::with_capacity(header.n * d);
        let mut y = Vec::with_capacity(header.n * d);
        let mut rows = 0;
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("data row {}: {e}", lineno + 1)))?;
            if vals.len() != 2 * d {
                return Err(Error::format(
                    path,
                    format!("data row {} has {} fields, expected {}", lineno + 1, vals.len(), 2 * d),
                ));
            }
            x0.extend_from_slice(&vals[..d]);
            y.extend_from_slice(&vals[d..]);
            rows += 1;
        }
        if rows != header.n {
            return Err(Error::format(path, format!("header says n={}, found {rows} rows", header.n)));
        }
        PairedDataset::new(
            Matrix::from_vec(rows, d, x0)?,
            Matrix::from_vec(rows, d, y)?,
            header.generator,
            header.params,
            header.seed,
        )
        .map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Reads only the `#` metadata lines of a dataset file.
pub fn read_header(path: &Path) -> Result<DatasetHeader> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut meta = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.starts_with('#') {
            break;
        }
        meta.push(line);
    }
    parse_header_lines(&meta, path)
}

fn parse_header_lines(lines: &[String], path: &Path) -> Result<DatasetHeader> {
    let mut kv = BTreeMap::new();
    let mut params = BTreeMap::new();
    for line in lines {
        let body = line.trim_start_matches('#').trim();
        let Some((k, v)) = body.split_once('=') else {
            return Err(Error::format(path, format!("bad metadata line `{line}`")));
        };
        match k.strip_prefix("param.") {
            Some(p) => {
                params.insert(p.to_string(), v.to_string());
            }
            None => {
                kv.insert(k.to_string(), v.to_string());
            }
        }
    }
    let get = |k: &str| {
        kv.get(k)
            .ok_or_else(|| Error::format(path, format!("missing metadata `{k}`")))
    };
    fn num<T: std::str::FromStr>(path: &Path, k: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::format(path, format!("metadata `{k}` is not a number: `{v}`")))
    }
    if get("format")? != FORMAT_TAG {
        return Err(Error::format(path, "not a paired dataset file"));
    }
    let version: u32 = num(path, "version", get("version")?)?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(DatasetHeader {
        version,
        generator: get("generator")?.clone(),
        params,
        seed: num(path, "seed", get("seed")?)?,
        dim: num(path, "dim", get("dim")?)?,
        n: num(path, "n", get("n")?)?,
        crc32: num(path, "crc32", get("crc32")?)?,
    })
}

/// Draws each coordinate independently from the scalar joint law.
pub fn gen_joint_gaussian(
    spec: &JointGaussianSpec,
    dim: usize,
    n: usize,
    seed: u64,
) -> Result<PairedDataset> {
    spec.validate()?;
    if n == 0 || dim == 0 {
        return Err(Error::invalid("need n >= 1 and dim >= 1"));
    }
    let mut r = rng::stream(seed, "joint-gaussian", 0);
    let (sd0, sdy) = (spec.var0.sqrt(), spec.vary.sqrt());
    let resid = (1.0 - spec.corr * spec.corr).max(0.0).sqrt();
    let mut x0 = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        let z1 = rng::normal(&mut r);
        let z2 = rng::normal(&mut r);
        x0.push(spec.mean0 + sd0 * z1);
        y.push(spec.meany + sdy * (spec.corr * z1 + resid * z2));
    }
    let params = BTreeMap::from([
        ("mean0".into(), spec.mean0.to_string()),
        ("meany".into(), spec.meany.to_string()),
        ("var0".into(), spec.var0.to_string()),
        ("vary".into(), spec.vary.to_string()),
        ("corr".into(), spec.corr.to_string()),
    ]);
    PairedDataset::new(
        Matrix::from_vec(n, dim, x0)?,
        Matrix::from_vec(n, dim, y)?,
        "joint-gaussian",
        params,
        seed,
    )
}

/// Rotation by 90 degrees followed by a reflection: `(a, b) -> (-b, -a)`.
/// It is its own inverse.
pub fn moons_map(p: [f64; 2]) -> [f64; 2] {
    [-p[1], -p[0]]
}

/// Two interleaved half circles. `x0` is a noisy point, `y` is the mapped
/// clean point with its own noise.
pub fn gen_two_moons_paired(n: usize, noise_sd: f64, seed: u64) -> Result<PairedDataset> {
    if n == 0 {
        return Err(Error::invalid("need n >= 1"));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::invalid(format!("noise_sd must be >= 0, got {noise_sd}")));
    }
    let n_out = n / 2;
    let n_in = n - n_out;
    let angle = |i: usize, k: usize| if k > 1 { PI * i as f64 / (k - 1) as f64 } else { 0.0 };
    let mut pts: Vec<[f64; 2]> = (0..n_out)
        .map(|i| {
            let a = angle(i, n_out);
            [a.cos(), a.sin()]
        })
        .chain((0..n_in).map(|i| {
            let a = angle(i, n_in);
            [1.0 - a.cos(), 1.0 - a.sin() - 0.5]
        }))
        .collect();
    let mut r = rng::stream(seed, "two-moons", 0);
    pts.shuffle(&mut r);
    let mut x0 = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(2 * n);
    for p in pts {
        let q = moons_map(p);
        for v in p {
            x0.push(v + noise_sd * rng::normal(&mut r));
        }
        for v in q {
            y.push(v + noise_sd * rng::normal(&mut r));
        }
    }
    PairedDataset::new(
        Matrix::from_vec(n, 2, x0)?,
        Matrix::from_vec(n, 2, y)?,
        "two-moons",
        BTreeMap::from([("noise_sd".into(), noise_sd.to_string())]),
        seed,
    )
}

/// `side x side` random bit images; `y` is the inverted image with each bit
/// flipped again independently with probability `flip_prob`.
pub fn gen_binary_patterns(n: usize, side: usize, flip_prob: f64, seed: u64) -> Result<PairedDataset> {
    if !(2..=16).contains(&side) {
        return Err(Error::invalid(format!("side must be in 2..=16, got {side}")));
    }
    if n == 0 {
        return Err(Error::invalid("need n >= 1"));
    }
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::invalid(format!("flip_prob must be in [0, 1], got {flip_prob}")));
    }
    let dim = side * side;
    let mut r = rng::stream(seed, "binary-patterns", 0);
    let mut x0 = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        let bit = if r.random_bool(0.5) { 1.0 } else { 0.0 };
        let flip = r.random::<f64>() < flip_prob;
        x0.push(bit);
        y.push(if flip { bit } else { 1.0 - bit });
    }
    PairedDataset::new(
        Matrix::from_vec(n, dim, x0)?,
        Matrix::from_vec(n, dim, y)?,
        "binary-patterns",
        BTreeMap::from([
            ("side".into(), side.to_string()),
            ("flip_prob".into(), flip_prob.to_string()),
        ]),
        seed,
    )
}

/// A dataset generator with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorSpec {
    JointGaussian { spec: JointGaussianSpec, dim: usize },
    TwoMoons { noise_sd: f64 },
    BinaryPatterns { side: usize, flip_prob: f64 },
}

impl GeneratorSpec {
    pub fn generate(&self, n: usize, seed: u64) -> Result<PairedDataset> {
        match self {
            GeneratorSpec::JointGaussian { spec, dim } => gen_joint_gaussian(spec, *dim, n, seed),
            GeneratorSpec::TwoMoons { noise_sd } => gen_two_moons_paired(n, *noise_sd, seed),
            GeneratorSpec::BinaryPatterns { side, flip_prob } => {
                gen_binary_patterns(n, *side, *flip_prob, seed)
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            GeneratorSpec::JointGaussian { dim, .. } => *dim,
            GeneratorSpec::TwoMoons { .. } => 2,
            GeneratorSpec::BinaryPatterns { side, .. } => side * side,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPEC: JointGaussianSpec = JointGaussianSpec {
        mean0: 1.0,
        meany: -1.0,
        var0: 1.0,
        vary: 2.0,
        corr: 0.8,
    };

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        sab / (saa * sbb).sqrt()
    }

    fn bits_equal(a: &PairedDataset, b: &PairedDataset) -> bool {
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        a.generator == b.generator
            && a.params == b.params
            && a.seed == b.seed
            && bits(&a.x0) == bits(&b.x0)
            && bits(&a.y) == bits(&b.y)
    }

    #[test]
    fn gaussian_perfect_correlation_copies() {
        let spec = JointGaussianSpec {
            corr: 1.0,
            vary: 1.0,
            meany: 1.0,
            ..SPEC
        };
        let d = gen_joint_gaussian(&spec, 3, 50, 1).unwrap();
        assert_eq!(d.x0, d.y);
    }

    #[test]
    fn gaussian_correlation() {
        let n = 100_000;
        let d = gen_joint_gaussian(&SPEC, 1, n, 2).unwrap();
        assert!((corr(d.x0.data(), d.y.data()) - 0.8).abs() < 0.016);
        let d = gen_joint_gaussian(&JointGaussianSpec { corr: 0.0, ..SPEC }, 2, 20_000, 3).unwrap();
        for j in 0..2 {
            let a: Vec<f64> = (0..d.len()).map(|i| d.x0.get(i, j)).collect();
            let b: Vec<f64> = (0..d.len()).map(|i| d.y.get(i, j)).collect();
            assert!(corr(&a, &b).abs() < 5.0 / (d.len() as f64).sqrt());
        }
        assert!(gen_joint_gaussian(&JointGaussianSpec { corr: 2.0, ..SPEC }, 1, 5, 0).is_err());
    }

    #[test]
    fn moons_noise_free_is_mapped() {
        let d = gen_two_moons_paired(101, 0.0, 4).unwrap();
        for i in 0..d.len() {
            let p = [d.x0.get(i, 0), d.x0.get(i, 1)];
            assert_eq!(moons_map(p), [d.y.get(i, 0), d.y.get(i, 1)]);
        }
        let p = [0.3, -0.7];
        assert_eq!(moons_map(moons_map(p)), p);
    }

    #[test]
    fn moons_inverse_map_within_noise() {
        let sd = 0.05;
        let d = gen_two_moons_paired(2000, sd, 5).unwrap();
        for i in 0..d.len() {
            let back = moons_map([d.y.get(i, 0), d.y.get(i, 1)]);
            for (j, b) in back.iter().enumerate() {
                // Difference of two N(0, sd^2) draws; 7 sd is never reached in practice.
                assert!((b - d.x0.get(i, j)).abs() < 7.0 * sd * 2f64.sqrt());
            }
        }
    }

    #[test]
    fn binary_patterns() {
        let d = gen_binary_patterns(10, 4, 0.0, 6).unwrap();
        assert_eq!(d.dim(), 16);
        for (a, b) in d.x0.data().iter().zip(d.y.data()) {
            assert!(*a == 0.0 || *a == 1.0);
            assert_eq!(*b, 1.0 - a);
        }
        let (n, side, p) = (4000, 8, 0.1);
        let d = gen_binary_patterns(n, side, p, 7).unwrap();
        let flips = d
            .x0
            .data()
            .iter()
            .zip(d.y.data())
            .filter(|(a, b)| **b != 1.0 - **a)
            .count() as f64;
        let mean_hamming = flips / n as f64;
        let expect = p * (side * side) as f64;
        let se = (expect * (1.0 - p) / n as f64).sqrt();
        assert!((mean_hamming - expect).abs() < 4.0 * se, "{mean_hamming} vs {expect}");
        assert!(gen_binary_patterns(10, 1, 0.0, 0).is_err());
        assert!(gen_binary_patterns(10, 17, 0.0, 0).is_err());
    }

    #[test]
    fn generation_is_pure() {
        let a = gen_two_moons_paired(50, 0.1, 9).unwrap();
        assert!(bits_equal(&a, &gen_two_moons_paired(50, 0.1, 9).unwrap()));
        assert!(!bits_equal(&a, &gen_two_moons_paired(50, 0.1, 10).unwrap()));
    }

    #[test]
    fn round_trip_all_generators() {
        let dir = tempfile::tempdir().unwrap();
        let sets = [
            gen_joint_gaussian(&SPEC, 3, 40, 1).unwrap(),
            gen_two_moons_paired(33, 0.1, 2).unwrap(),
            gen_binary_patterns(7, 3, 0.2, 3).unwrap(),
        ];
        for (i, d) in sets.iter().enumerate() {
            let path = dir.path().join(format!("d{i}.csv"));
            d.save(&path).unwrap();
            let back = PairedDataset::load(&path).unwrap();
            assert!(bits_equal(d, &back));
            let h = read_header(&path).unwrap();
            assert_eq!(h, d.header());
            assert_eq!((h.n, h.dim), (d.len(), d.dim()));
        }
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = gen_two_moons_paired(20, 0.1, 2).unwrap();
        d.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() - 15]).unwrap();
        assert!(matches!(PairedDataset::load(&path), Err(Error::Checksum { .. })));
        // The header alone is still readable.
        assert_eq!(read_header(&path).unwrap().n, 20);
    }

    #[test]
    fn version_and_format_errors() {
        let d = gen_two_moons_paired(3, 0.1, 2).unwrap();
        let p = Path::new("mem.csv");
        let text = d.to_csv().replace("# version=1", "# version=9");
        assert!(matches!(PairedDataset::parse(&text, p), Err(Error::Version { found: 9, .. })));
        let text = d.to_csv().replace("# format=bbdm-paired", "# format=other");
        assert!(matches!(PairedDataset::parse(&text, p), Err(Error::Format { .. })));
        assert!(PairedDataset::parse("x_0,y_0\n1,2\n", p).is_err());
    }

    #[test]
    fn energy_distance_to_mapped_shrinks_with_noise() {
        use crate::metrics::energy_distance;
        let mut last = f64::INFINITY;
        for sd in [0.2, 0.05, 0.01, 0.0] {
            let d = gen_two_moons_paired(400, sd, 8).unwrap();
            let mapped: Vec<Vec<f64>> = (0..d.len())
                .map(|i| moons_map([d.x0.get(i, 0), d.x0.get(i, 1)]).to_vec())
                .collect();
            let ys: Vec<Vec<f64>> = (0..d.len()).map(|i| d.y.row(i).to_vec()).collect();
            let ed = energy_distance(&ys, &mapped).unwrap();
            assert!(ed <= last, "sd={sd}: {ed} > {last}");
            last = ed;
        }
        assert!(last.abs() < 1e-12);
    }
}
