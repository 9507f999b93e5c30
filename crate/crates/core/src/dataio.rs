//! Dataset ingestion: MNIST IDX files, CSV tables, preprocessing, and
//! synthetic Gaussian data for oracle tests.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::matrix::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Largest label accepted when reading MNIST label files.
pub const MNIST_MAX_LABEL: u8 = 9;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";
pub const MNIST_FILES: [&str; 4] = [
    MNIST_TRAIN_IMAGES,
    MNIST_TRAIN_LABELS,
    MNIST_TEST_IMAGES,
    MNIST_TEST_LABELS,
];

/// Malformed IDX content. Offsets are byte positions in the decompressed stream.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad magic 0x{found:08x} at byte 0 (expected 0x{expected:08x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("dimensions starting at byte {offset} overflow the address space")]
    DimensionOverflow { offset: usize },
    #[error("label {value} at byte {offset} exceeds {max}")]
    LabelOutOfRange { offset: usize, value: u8, max: u8 },
    #[error("{extra} unexpected trailing bytes at byte {offset}")]
    TrailingData { offset: usize, extra: usize },
}

/// An IDX3 image file: `count` images of `rows x cols` unsigned bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// `(rows * cols) x count`; column `k` is image `k` flattened row-major,
    /// raw 0-255 intensities.
    pub pixels: Matrix,
}

fn be_u32(bytes: &[u8], offset: usize) -> std::result::Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| IdxError::Truncated {
            offset: bytes.len(),
            needed: offset + 4 - bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> std::result::Result<(), IdxError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found });
    }
    Ok(())
}

fn check_payload(bytes: &[u8], start: usize, len: usize) -> std::result::Result<(), IdxError> {
    let end = start + len;
    if bytes.len() < end {
        return Err(IdxError::Truncated {
            offset: bytes.len(),
            needed: end - bytes.len(),
        });
    }
    if bytes.len() > end {
        return Err(IdxError::TrailingData {
            offset: end,
            extra: bytes.len() - end,
        });
    }
    Ok(())
}

/// Parses an in-memory IDX3 image file.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<IdxImages, IdxError> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let pixels_per = rows
        .checked_mul(cols)
        .ok_or(IdxError::DimensionOverflow { offset: 8 })?;
    let total = pixels_per
        .checked_mul(count)
        .filter(|t| t.checked_add(16).is_some())
        .ok_or(IdxError::DimensionOverflow { offset: 4 })?;
    check_payload(bytes, 16, total)?;
    let data = &bytes[16..];
    let mut out = vec![0.0; total];
    for (k, image) in data.chunks_exact(pixels_per.max(1)).take(count).enumerate() {
        for (l, &b) in image.iter().enumerate() {
            out[l * count + k] = b as f64;
        }
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: Matrix::new(pixels_per, count, out).expect("length computed above"),
    })
}

/// Parses an in-memory IDX1 label file, rejecting labels above `max_label`.
pub fn parse_idx_labels(bytes: &[u8], max_label: Option<u8>) -> std::result::Result<Vec<usize>, IdxError> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    check_payload(bytes, 8, count)?;
    bytes[8..]
        .iter()
        .enumerate()
        .map(|(i, &b)| match max_label {
            Some(max) if b > max => Err(IdxError::LabelOutOfRange {
                offset: 8 + i,
                value: b,
                max,
            }),
            _ => Ok(b as usize),
        })
        .collect()
}

/// Serializes images back to IDX3 bytes. Pixel values must be integers in 0..=255.
pub fn write_idx_images(images: &IdxImages) -> Result<Vec<u8>> {
    let (l, count) = images.pixels.shape();
    if l != images.rows * images.cols {
        return Err(Error::InvalidArgument(format!(
            "{l} pixel rows do not match {}x{} images",
            images.rows, images.cols
        )));
    }
    let mut out = Vec::with_capacity(16 + l * count);
    for v in [IDX_IMAGES_MAGIC, count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for k in 0..count {
        for p in 0..l {
            out.push(to_byte(images.pixels[(p, k)])?);
        }
    }
    Ok(out)
}

/// Serializes labels to IDX1 bytes.
pub fn write_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(to_byte(l as f64)?);
    }
    Ok(out)
}

fn to_byte(v: f64) -> Result<u8> {
    if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
        Ok(v as u8)
    } else {
        Err(Error::InvalidArgument(format!("{v} is not a byte value")))
    }
}

/// Reads a file, decompressing it when the name ends in `.gz`.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    let gz = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    let res = if gz {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut buf)
    } else {
        BufReader::new(file).read_to_end(&mut buf)
    };
    res.map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn with_path<T>(path: &Path, r: std::result::Result<T, IdxError>) -> Result<T> {
    r.map_err(|source| Error::Idx {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an IDX3 image file as an `L x K` matrix of raw intensities.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Matrix> {
    load_idx_image_set(path).map(|i| i.pixels)
}

/// Loads an IDX3 image file keeping the image dimensions.
pub fn load_idx_image_set(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    with_path(path, parse_idx_images(&read_maybe_gz(path)?))
}

/// Loads an MNIST IDX1 label file (labels 0-9).
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    with_path(path, parse_idx_labels(&read_maybe_gz(path)?, Some(MNIST_MAX_LABEL)))
}

/// Feature matrix with labels, one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(x: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != x.cols() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} samples",
                labels.len(),
                x.cols()
            )));
        }
        if let Some(index) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                index,
                value: labels[index],
                num_classes,
            });
        }
        x.check_finite()?;
        Ok(Dataset { x, labels, num_classes })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.x.rows()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            x: self.x.columns(0..n),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    pub fn map_features(self, f: impl FnOnce(Matrix) -> Matrix) -> Dataset {
        Dataset { x: f(self.x), ..self }
    }
}

/// Locates an MNIST file in `dir`, accepting a `.gz` suffix.
pub fn find_mnist_file(dir: &Path, name: &str) -> Option<PathBuf> {
    [name.to_string(), format!("{name}.gz")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

/// Loads the MNIST training and test sets from `dir` as raw intensities.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let find = |name: &str| {
        find_mnist_file(dir, name).ok_or_else(|| {
            Error::io(
                dir.join(name),
                std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found (plain or .gz)"),
            )
        })
    };
    let train = Dataset::new(
        load_idx_images(find(MNIST_TRAIN_IMAGES)?)?,
        load_idx_labels(find(MNIST_TRAIN_LABELS)?)?,
        10,
    )?;
    let test = Dataset::new(
        load_idx_images(find(MNIST_TEST_IMAGES)?)?,
        load_idx_labels(find(MNIST_TEST_LABELS)?)?,
        10,
    )?;
    Ok((train, test))
}

/// Feature scaling applied before the hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizeMode {
    None,
    /// Divide by 255.
    #[default]
    Scale01,
    /// Per-feature zero mean, unit standard deviation.
    Standardize,
}

impl NormalizeMode {
    pub fn code(self) -> u8 {
        match self {
            NormalizeMode::None => 0,
            NormalizeMode::Scale01 => 1,
            NormalizeMode::Standardize => 2,
        }
    }
}

impl fmt::Display for NormalizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormalizeMode::None => "none",
            NormalizeMode::Scale01 => "scale01",
            NormalizeMode::Standardize => "standardize",
        })
    }
}

impl FromStr for NormalizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "raw" => Ok(NormalizeMode::None),
            "scale01" | "scale" => Ok(NormalizeMode::Scale01),
            "standardize" | "zscore" => Ok(NormalizeMode::Standardize),
            other => Err(Error::InvalidArgument(format!("unknown normalize mode {other:?}"))),
        }
    }
}

/// A fitted preprocessing step that can be replayed on new data.
#[derive(Debug, Clone, PartialEq)]
pub enum Preprocess {
    None,
    Scale01,
    Standardize { mean: Vec<f64>, std: Vec<f64> },
}

impl Preprocess {
    /// Fits the mode's parameters on `x` (only `Standardize` has any).
    pub fn fit(mode: NormalizeMode, x: &Matrix) -> Preprocess {
        match mode {
            NormalizeMode::None => Preprocess::None,
            NormalizeMode::Scale01 => Preprocess::Scale01,
            NormalizeMode::Standardize => {
                let k = x.cols().max(1) as f64;
                let mut mean = Vec::with_capacity(x.rows());
                let mut std = Vec::with_capacity(x.rows());
                for i in 0..x.rows() {
                    let row = x.row(i);
                    let m = row.iter().sum::<f64>() / k;
                    let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / k;
                    mean.push(m);
                    std.push(var.sqrt());
                }
                Preprocess::Standardize { mean, std }
            }
        }
    }

    pub fn mode(&self) -> NormalizeMode {
        match self {
            Preprocess::None => NormalizeMode::None,
            Preprocess::Scale01 => NormalizeMode::Scale01,
            Preprocess::Standardize { .. } => NormalizeMode::Standardize,
        }
    }

    pub fn apply(&self, mut x: Matrix) -> Result<Matrix> {
        match self {
            Preprocess::None => {}
            Preprocess::Scale01 => x.map_in_place(|v| v / 255.0),
            Preprocess::Standardize { mean, std } => {
                if mean.len() != x.rows() {
                    return Err(Error::DimensionMismatch {
                        op: "standardize",
                        lhs: (mean.len(), 1),
                        rhs: x.shape(),
                    });
                }
                for i in 0..x.rows() {
                    let (m, s) = (mean[i], std[i]);
                    let row = x.row_mut(i);
                    if s > 0.0 {
                        row.iter_mut().for_each(|v| *v = (*v - m) / s);
                    } else {
                        row.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
        }
        Ok(x)
    }
}

/// Normalizes `x` using statistics of `x` itself.
pub fn normalize(x: &Matrix, mode: NormalizeMode) -> Matrix {
    Preprocess::fit(mode, x)
        .apply(x.clone())
        .expect("fitted on the same matrix")
}

/// Reads a CSV table with a header row. With `label_last`, the final column
/// holds integer class labels and the class count is `max label + 1`;
/// otherwise every column is a feature and all labels are 0.
pub fn load_csv(path: impl AsRef<Path>, label_last: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let width = reader.headers()?.len();
    let features = if label_last { width.saturating_sub(1) } else { width };
    if features == 0 {
        return Err(Error::format(path, "no feature columns"));
    }
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let mut sample = Vec::with_capacity(features);
        for (j, field) in rec.iter().take(features).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::format(path, format!("line {row}, column {}: {field:?} is not a number", j + 1)))?;
            sample.push(v);
        }
        if label_last {
            let field = &rec[features];
            let l: usize = field
                .parse()
                .map_err(|_| Error::format(path, format!("line {row}: label {field:?} is not a class index")))?;
            labels.push(l);
        } else {
            labels.push(0);
        }
        columns.push(sample);
    }
    let k = columns.len();
    let x = Matrix::from_fn(features, k, |i, j| columns[j][i]);
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(x, labels, num_classes)
}

/// Writes a dataset in the format read by [`load_csv`] with `label_last`.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dataset.num_features()).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for k in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.x.column(k).iter().map(|v| format!("{v:?}")).collect();
        rec.push(dataset.labels[k].to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Draws `k` labelled samples from Gaussians sharing covariance `cov`.
///
/// Each sample picks its class from `priors`, then its features as
/// `mu_class + L z` with `L L^T = cov` and standard normal `z`.
pub fn synth_gaussian(means: &[Vec<f64>], cov: &Matrix, priors: &[f64], k: usize, seed: u64) -> Result<Dataset> {
    let n = means.len();
    if n == 0 || priors.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{n} means with {} priors",
            priors.len()
        )));
    }
    let m = cov.rows();
    if cov.cols() != m || means.iter().any(|mu| mu.len() != m) {
        return Err(Error::InvalidArgument(
            "means and covariance dimensions disagree".into(),
        ));
    }
    if priors.iter().any(|&p| !(p >= 0.0 && p.is_finite())) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidPriors(format!("{priors:?} is not a probability vector")));
    }
    let chol = Cholesky::factor(cov)?;
    let l = chol.lower();
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &p in priors {
        acc += p;
        cumulative.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(m, k);
    let mut labels = Vec::with_capacity(k);
    let mut z = vec![0.0; m];
    for j in 0..k {
        let u: f64 = rng.random::<f64>() * acc;
        let class = cumulative.iter().position(|&c| u < c).unwrap_or(n - 1);
        labels.push(class);
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..m {
            let lz: f64 = l.row(i)[..=i].iter().zip(&z).map(|(a, b)| a * b).sum();
            x[(i, j)] = means[class][i] + lz;
        }
    }
    Dataset::new(x, labels, n)
}
