//! Embedding files, classifier files, manifests, splits and the synthetic
//! domain-shift generator.
//!
//! # File formats
//!
//! All integers and floats are little-endian.
//!
//! * `FEMB`: magic `"FEMB"`, version `u32 = 1`, `d: u32`, `K: u32`, `N: u64`,
//!   then `N` records of `label: u32` followed by `d × f32`.
//! * `FCLS`: magic `"FCLS"`, version `u32 = 1`, `K: u32`, `d: u32`, then `K × d`
//!   `f32` in row-major order.
//! * Manifest: UTF-8 JSON `{ "dimension", "classes": [..], "domains": [{ "name", "path" }] }`.
//!   Relative paths resolve against the manifest's directory.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::head::{Example, MIN_FEATURE_NORM};
use crate::linalg::{self, Matrix};
use crate::orthomap::{cayley, BlockSpec};
use crate::rng::{self, SplitMix64};

pub const FEMB_MAGIC: &[u8; 4] = b"FEMB";
pub const FCLS_MAGIC: &[u8; 4] = b"FCLS";
pub const FORMAT_VERSION: u32 = 1;

const FEMB_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;
const FCLS_HEADER_LEN: usize = 4 + 4 + 4 + 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: need {needed} bytes, have {available}")]
    TruncatedFile { needed: usize, available: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingData(usize),
    #[error("record {index}: label {label} out of range for {classes} classes")]
    LabelOutOfRange { index: usize, label: u32, classes: usize },
    #[error("record {index}: feature norm is zero")]
    ZeroNormFeature { index: usize },
    #[error("record {index}: non-finite feature value")]
    NonFiniteValue { index: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("class count mismatch: expected {expected}, found {found}")]
    ClassCountMismatch { expected: usize, found: usize },
    #[error("need at least {needed} examples to split, have {have}")]
    TooFewExamples { needed: usize, have: usize },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid synthetic configuration: {0}")]
    InvalidSynth(String),
    #[error("manifest JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Labelled `d`-dimensional features from one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDataset {
    pub dim: usize,
    pub classes: usize,
    pub domain: String,
    pub examples: Vec<Example>,
}

impl EmbeddingDataset {
    pub fn new(dim: usize, classes: usize, domain: impl Into<String>, examples: Vec<Example>) -> Result<Self> {
        for (index, ex) in examples.iter().enumerate() {
            if ex.feature.len() != dim {
                return Err(DataError::DimensionMismatch {
                    expected: dim,
                    found: ex.feature.len(),
                });
            }
            if ex.label as usize >= classes {
                return Err(DataError::LabelOutOfRange {
                    index,
                    label: ex.label,
                    classes,
                });
            }
            let n = linalg::norm(&ex.feature);
            if n.is_nan() || n <= MIN_FEATURE_NORM {
                return Err(DataError::ZeroNormFeature { index });
            }
        }
        Ok(Self {
            dim,
            classes,
            domain: domain.into(),
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            dim: self.dim,
            classes: self.classes,
            domain: self.domain.clone(),
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn need(&self, n: usize) -> Result<()> {
        if self.buf.len() - self.pos < n {
            return Err(DataError::TruncatedFile {
                needed: self.pos + n,
                available: self.buf.len(),
            });
        }
        Ok(())
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        self.need(N)?;
        let mut out = [0u8; N];
        out.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    fn header(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take()?;
        if &found != expected {
            return Err(DataError::BadMagic {
                expected: *expected,
                found,
            });
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(DataError::UnsupportedVersion(version));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            extra => Err(DataError::TrailingData(extra)),
        }
    }
}

/// Serialises a dataset as FEMB bytes. Features are narrowed to `f32`.
pub fn encode_femb(ds: &EmbeddingDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEMB_HEADER_LEN + ds.len() * (4 + 4 * ds.dim));
    out.extend_from_slice(FEMB_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.dim as u32).to_le_bytes());
    out.extend_from_slice(&(ds.classes as u32).to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for ex in &ds.examples {
        out.extend_from_slice(&ex.label.to_le_bytes());
        for v in &ex.feature {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_femb(bytes: &[u8], domain: &str) -> Result<EmbeddingDataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(FEMB_MAGIC)?;
    let dim = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let count = r.u64()? as usize;
    if dim == 0 {
        return Err(DataError::DimensionMismatch { expected: 1, found: 0 });
    }
    let record = 4 + 4 * dim;
    r.need(count.saturating_mul(record))?;
    let mut examples = Vec::with_capacity(count);
    for index in 0..count {
        let label = r.u32()?;
        if label as usize >= classes {
            return Err(DataError::LabelOutOfRange { index, label, classes });
        }
        let mut feature = Vec::with_capacity(dim);
        for _ in 0..dim {
            let v = r.f32()?;
            if !v.is_finite() {
                return Err(DataError::NonFiniteValue { index });
            }
            feature.push(v as f64);
        }
        if linalg::norm(&feature) <= MIN_FEATURE_NORM {
            return Err(DataError::ZeroNormFeature { index });
        }
        examples.push(Example { feature, label });
    }
    r.finish()?;
    Ok(EmbeddingDataset {
        dim,
        classes,
        domain: domain.to_string(),
        examples,
    })
}

/// Reads an FEMB file; the domain name defaults to the file stem.
pub fn read_femb(path: &Path) -> Result<EmbeddingDataset> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let domain = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_femb(&bytes, &domain)
}

pub fn write_femb(ds: &EmbeddingDataset, path: &Path) -> Result<()> {
    write_bytes(path, &encode_femb(ds))
}

pub fn encode_fcls(classifier: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(FCLS_HEADER_LEN + 4 * classifier.as_slice().len());
    out.extend_from_slice(FCLS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(classifier.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(classifier.cols() as u32).to_le_bytes());
    for v in classifier.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Decodes FCLS bytes into a `K × d` matrix with every row scaled to unit norm.
pub fn decode_fcls(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(FCLS_MAGIC)?;
    let classes = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if classes == 0 || dim == 0 {
        return Err(DataError::DimensionMismatch { expected: 1, found: 0 });
    }
    r.need(classes * dim * 4)?;
    let mut data = Vec::with_capacity(classes * dim);
    for i in 0..classes * dim {
        let v = r.f32()?;
        if !v.is_finite() {
            return Err(DataError::NonFiniteValue { index: i / dim });
        }
        data.push(v as f64);
    }
    r.finish()?;
    let mut m = Matrix::from_vec(classes, dim, data).expect("finite values with matching length");
    for index in 0..classes {
        let row = m.row_mut(index);
        let n = linalg::norm(row);
        if n.is_nan() || n <= MIN_FEATURE_NORM {
            return Err(DataError::ZeroNormFeature { index });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(m)
}

pub fn read_fcls(path: &Path) -> Result<Matrix> {
    decode_fcls(&fs::read(path).map_err(io_err(path))?)
}

pub fn write_fcls(classifier: &Matrix, path: &Path) -> Result<()> {
    write_bytes(path, &encode_fcls(classifier))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    Ok(())
}

/// Train/validation/test partition of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: EmbeddingDataset,
    pub val: EmbeddingDataset,
    pub test: EmbeddingDataset,
}

pub const MIN_SPLIT_EXAMPLES: usize = 5;

/// Seeded shuffle followed by a contiguous `⌊0.6n⌋ / ⌊0.2n⌋ / rest` cut.
pub fn split(ds: &EmbeddingDataset, seed: u64) -> Result<SplitDataset> {
    let n = ds.len();
    if n < MIN_SPLIT_EXAMPLES {
        return Err(DataError::TooFewExamples {
            needed: MIN_SPLIT_EXAMPLES,
            have: n,
        });
    }
    let perm = SplitMix64::new(seed).permutation(n);
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    Ok(SplitDataset {
        train: ds.subset(&perm[..n_train]),
        val: ds.subset(&perm[n_train..n_train + n_val]),
        test: ds.subset(&perm[n_train + n_val..]),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub dimension: usize,
    pub classes: Vec<String>,
    pub domains: Vec<DomainEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(dimension: usize, classes: Vec<String>, domains: Vec<DomainEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            dimension,
            classes,
            domains,
            base_dir: base_dir.into(),
        }
    }

    /// Parses a manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if m.dimension == 0 || m.classes.is_empty() {
            return Err(DataError::Manifest("dimension and class list must be non-empty".into()));
        }
        if m.domains.is_empty() {
            return Err(DataError::Manifest("no domains listed".into()));
        }
        let mut names: Vec<&str> = m.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(DataError::Manifest("domain names must be unique".into()));
        }
        for d in &m.domains {
            let p = m.resolve(&d.path);
            if !p.is_file() {
                return Err(DataError::Manifest(format!("domain '{}': missing file {}", d.name, p.display())));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_bytes(path, text.as_bytes())
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn domain(&self, name: &str) -> Option<&DomainEntry> {
        self.domains.iter().find(|d| d.name == name)
    }

    /// Reads one domain's embeddings and checks them against the manifest.
    pub fn load_domain(&self, entry: &DomainEntry) -> Result<EmbeddingDataset> {
        let mut ds = read_femb(&self.resolve(&entry.path))?;
        if ds.dim != self.dimension {
            return Err(DataError::DimensionMismatch {
                expected: self.dimension,
                found: ds.dim,
            });
        }
        if ds.classes != self.class_count() {
            return Err(DataError::ClassCountMismatch {
                expected: self.class_count(),
                found: ds.classes,
            });
        }
        ds.domain = entry.name.clone();
        Ok(ds)
    }

    pub fn load_all(&self) -> Result<Vec<EmbeddingDataset>> {
        self.domains.iter().map(|d| self.load_domain(d)).collect()
    }

    /// Reads a classifier file and checks its shape against the manifest.
    pub fn load_classifier(&self, path: &Path) -> Result<Matrix> {
        let m = read_fcls(&self.resolve(path))?;
        if m.cols() != self.dimension {
            return Err(DataError::DimensionMismatch {
                expected: self.dimension,
                found: m.cols(),
            });
        }
        if m.rows() != self.class_count() {
            return Err(DataError::ClassCountMismatch {
                expected: self.class_count(),
                found: m.rows(),
            });
        }
        Ok(m)
    }
}

/// Parameters of the rotated-prototype benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dim: usize,
    pub classes: usize,
    pub domains: usize,
    pub per_domain: usize,
    /// Per-coordinate standard deviation of the additive noise.
    pub noise: f64,
    pub seed: u64,
    /// Half-width of the uniform draw for each entry of a domain's skew generator.
    pub rotation_scale: f64,
    /// Also write `classifier.fcls` holding the prototypes.
    pub write_classifier: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            classes: 5,
            domains: 4,
            per_domain: 1000,
            noise: 0.3,
            seed: 0,
            rotation_scale: 0.2,
            write_classifier: true,
        }
    }
}

/// What the generator wrote, plus the ground truth it used.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    pub prototypes: Matrix,
    pub rotations: Vec<Matrix>,
    pub datasets: Vec<EmbeddingDataset>,
}

pub const SYNTH_MANIFEST: &str = "manifest.json";
pub const SYNTH_CLASSIFIER: &str = "classifier.fcls";

fn gaussian(rng: &mut SplitMix64) -> f64 {
    StandardNormal.sample(rng)
}

/// Unit-norm prototypes: a random regular simplex when `K ≤ d`, otherwise
/// independent normalised Gaussian directions.
fn draw_prototypes(rng: &mut SplitMix64, k: usize, d: usize) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        if k <= d {
            for r in &rows {
                let c = linalg::dot(&v, r);
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= c * b);
            }
        }
        let n = linalg::norm(&v);
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    if k <= d && k > 1 {
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / k as f64).collect();
        for r in rows.iter_mut() {
            r.iter_mut().zip(&mean).for_each(|(a, m)| *a -= m);
            let n = linalg::norm(r);
            r.iter_mut().for_each(|a| *a /= n);
        }
    }
    Matrix::from_rows(&rows).expect("finite prototypes")
}

fn draw_rotation(rng: &mut SplitMix64, d: usize, scale: f64) -> Matrix {
    let mut x = Matrix::zeros(d, d);
    for i in 0..d {
        for j in (i + 1)..d {
            let v = rng.uniform(-scale, scale);
            x[(i, j)] = v;
            x[(j, i)] = -v;
        }
    }
    cayley(&x, BlockSpec::full(d)).expect("square generator").q().clone()
}

/// Writes one FEMB per domain, a manifest and optionally the prototype classifier.
///
/// Domain `k` draws a rotation `R_k` and emits `R_k (p_y + ε)` with `ε ~ N(0, σ²I)`.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<Synthetic> {
    if cfg.dim < 2 || cfg.classes < 2 || cfg.per_domain < 50 || cfg.domains == 0 {
        return Err(DataError::InvalidSynth(
            "need dim >= 2, classes >= 2, per_domain >= 50 and at least one domain".into(),
        ));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite() && cfg.rotation_scale >= 0.0 && cfg.rotation_scale.is_finite()) {
        return Err(DataError::InvalidSynth("noise and rotation scale must be finite and non-negative".into()));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut rng = SplitMix64::new(rng::derive_seed(cfg.seed, &[rng::TAG_SYNTH]));
    let prototypes = draw_prototypes(&mut rng, cfg.classes, cfg.dim);

    let mut rotations = Vec::with_capacity(cfg.domains);
    let mut datasets = Vec::with_capacity(cfg.domains);
    let mut entries = Vec::with_capacity(cfg.domains);
    for k in 0..cfg.domains {
        let rot = draw_rotation(&mut rng, cfg.dim, cfg.rotation_scale);
        let name = format!("domain{k}");
        let mut examples = Vec::with_capacity(cfg.per_domain);
        while examples.len() < cfg.per_domain {
            let label = (examples.len() % cfg.classes) as u32;
            let raw: Vec<f64> = prototypes
                .row(label as usize)
                .iter()
                .map(|p| p + cfg.noise * gaussian(&mut rng))
                .collect();
            // Redraw the rare near-zero sample instead of emitting it.
            if linalg::norm(&raw) < 1e-6 {
                continue;
            }
            let feature: Vec<f64> = rot.mul_vec(&raw).expect("square rotation");
            examples.push(Example { feature, label });
        }
        let ds = EmbeddingDataset::new(cfg.dim, cfg.classes, name.clone(), examples)?;
        let file = PathBuf::from(format!("{name}.femb"));
        write_femb(&ds, &out_dir.join(&file))?;
        entries.push(DomainEntry { name, path: file });
        rotations.push(rot);
        datasets.push(ds);
    }
    if cfg.write_classifier {
        write_fcls(&prototypes, &out_dir.join(SYNTH_CLASSIFIER))?;
    }
    let classes = (0..cfg.classes).map(|c| format!("class{c}")).collect();
    let manifest = Manifest::new(cfg.dim, classes, entries, out_dir);
    let manifest_path = out_dir.join(SYNTH_MANIFEST);
    manifest.save(&manifest_path)?;
    Ok(Synthetic {
        manifest_path,
        manifest,
        prototypes,
        rotations,
        datasets,
    })
}
