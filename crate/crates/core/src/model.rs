//! A trained network: preprocessing, random hidden layer and output weights,
//! plus the `ELMW` weight-file format.
//!
//! # Weight file layout (version 1)
//!
//! All integers and floats are little-endian.
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 4 | magic `b"ELMW"` |
//! | 4  | 2 | format version (`u16`, currently 1) |
//! | 6  | 1 | solver kind: 0 = PI, 1 = LDA |
//! | 7  | 1 | activation: 0 = sigmoid, 1 = tanh, 2 = relu |
//! | 8  | 1 | normalization: 0 = none, 1 = scale01, 2 = standardize |
//! | 9  | 3 | reserved, zero |
//! | 12 | 4 | `N`, classes (`u32`) |
//! | 16 | 4 | `M`, hidden units (`u32`) |
//! | 20 | 4 | `L`, inputs (`u32`) |
//! | 24 | 8 | hidden-layer seed (`u64`) |
//! | 32 | 8 | hidden weight lower bound (`f64`) |
//! | 40 | 8 | hidden weight upper bound (`f64`) |
//! | 48 | 8 | jitter used by the solver (`f64`) |
//! | 56 | 8 | checksum of the hidden weight matrix (`u64`) |
//! | 64 | `16 L` | standardize only: `L` feature means then `L` standard deviations |
//! | ... | `8 N C` | output weights, row-major `f64`; `C = M` (PI) or `M + 1` (LDA) |
//!
//! The hidden weights themselves are not stored: they are regenerated from
//! the seed and verified against the checksum on load. A JSON sidecar
//! (`<file>.json`) mirrors the header for inspection.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{NormalizeMode, Preprocess};
use crate::error::{Error, Result};
use crate::hidden::{ActivationKind, HiddenLayer};
use crate::matrix::Matrix;
use crate::solvers::{posteriors, score, OutputWeights, Posteriors, Scores, SolverKind};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"ELMW";
pub const WEIGHTS_VERSION: u16 = 1;
const HEADER_LEN: usize = 64;

/// Preprocessing, hidden layer and output weights of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub preprocess: Preprocess,
    pub layer: HiddenLayer,
    pub weights: OutputWeights,
}

impl Model {
    pub fn new(preprocess: Preprocess, layer: HiddenLayer, weights: OutputWeights) -> Result<Self> {
        if weights.num_units() != layer.num_units() {
            return Err(Error::DimensionMismatch {
                op: "model",
                lhs: layer.weights().shape(),
                rhs: weights.matrix().shape(),
            });
        }
        Ok(Model {
            preprocess,
            layer,
            weights,
        })
    }

    pub fn kind(&self) -> SolverKind {
        self.weights.kind()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.num_classes()
    }

    pub fn num_inputs(&self) -> usize {
        self.layer.num_inputs()
    }

    /// Scores for raw inputs (`L x K`, one sample per column).
    pub fn scores(&self, x: &Matrix) -> Result<Scores> {
        self.scores_prepared(&self.preprocess.apply(x.clone())?)
    }

    /// Scores for inputs that have already been through `self.preprocess`.
    pub fn scores_prepared(&self, x: &Matrix) -> Result<Scores> {
        score(&self.weights, &self.layer.forward(x)?)
    }

    /// Softmax of the scores.
    pub fn posteriors(&self, x: &Matrix) -> Result<Posteriors> {
        Ok(posteriors(&self.scores(x)?))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.scores(x)?.classify())
    }

    /// Header fields as written to the JSON sidecar.
    pub fn header(&self) -> WeightsHeader {
        let (lo, hi) = self.layer.weight_range();
        WeightsHeader {
            magic: String::from_utf8_lossy(&WEIGHTS_MAGIC).into_owned(),
            version: WEIGHTS_VERSION,
            kind: self.kind(),
            num_classes: self.num_classes(),
            num_units: self.layer.num_units(),
            num_inputs: self.num_inputs(),
            fan_out: self.layer.num_units() / self.num_inputs().max(1),
            activation: self.layer.activation(),
            normalize: self.preprocess.mode(),
            seed: self.layer.seed(),
            weight_low: lo,
            weight_high: hi,
            jitter: self.weights.jitter(),
            hidden_checksum: format!("{:016x}", self.layer.weights().checksum()),
        }
    }

    /// Encodes the model as an `ELMW` byte buffer.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (m, l) = self.layer.weights().shape();
        if m % l != 0 {
            return Err(Error::InvalidArgument(format!(
                "{m} hidden units is not a multiple of {l} inputs"
            )));
        }
        let (lo, hi) = self.layer.weight_range();
        let regenerated = HiddenLayer::init(l, m / l, lo, hi, self.layer.activation(), self.layer.seed())?;
        if regenerated.weights() != self.layer.weights() {
            return Err(Error::InvalidArgument(
                "hidden layer was not drawn from its seed and cannot be stored as one".into(),
            ));
        }
        let w = self.weights.matrix();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * (w.rows() * w.cols() + 2 * l));
        out.extend_from_slice(&WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.push(self.kind().code());
        out.push(self.layer.activation().code());
        out.push(self.preprocess.mode().code());
        out.extend_from_slice(&[0; 3]);
        for v in [w.rows(), m, l] {
            out.extend_from_slice(
                &u32::try_from(v)
                    .map_err(|_| Error::InvalidArgument("dimension exceeds u32".into()))?
                    .to_le_bytes(),
            );
        }
        out.extend_from_slice(&self.layer.seed().to_le_bytes());
        for v in [lo, hi, self.weights.jitter()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.layer.weights().checksum().to_le_bytes());
        debug_assert_eq!(out.len(), HEADER_LEN);
        if let Preprocess::Standardize { mean, std } = &self.preprocess {
            for v in mean.iter().chain(std) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in w.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Decodes an `ELMW` buffer. `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!(
                "{} bytes is shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if bytes[0..4] != WEIGHTS_MAGIC {
            return Err(bad(format!("bad magic {:?}", &bytes[0..4])));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());

        let version = u16_at(4);
        if version != WEIGHTS_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let kind = SolverKind::from_code(bytes[6]).ok_or_else(|| bad(format!("unknown solver code {}", bytes[6])))?;
        let activation =
            ActivationKind::from_code(bytes[7]).ok_or_else(|| bad(format!("unknown activation code {}", bytes[7])))?;
        let normalize = match bytes[8] {
            0 => NormalizeMode::None,
            1 => NormalizeMode::Scale01,
            2 => NormalizeMode::Standardize,
            c => return Err(bad(format!("unknown normalization code {c}"))),
        };
        let (n, m, l) = (u32_at(12), u32_at(16), u32_at(20));
        let seed = u64_at(24);
        let (lo, hi, jitter) = (f64_at(32), f64_at(40), f64_at(48));
        let checksum = u64_at(56);
        if l == 0 || m == 0 || m % l != 0 {
            return Err(bad(format!("hidden layer {m}x{l} is not a whole fan-out")));
        }

        let mut offset = HEADER_LEN;
        let mut take_f64s = |count: usize| -> Result<Vec<f64>> {
            let end = count
                .checked_mul(8)
                .and_then(|b| b.checked_add(offset))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| bad(format!("truncated: need {count} more values at byte {offset}")))?;
            let vals = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset = end;
            Ok(vals)
        };
        let preprocess = match normalize {
            NormalizeMode::None => Preprocess::None,
            NormalizeMode::Scale01 => Preprocess::Scale01,
            NormalizeMode::Standardize => {
                let mean = take_f64s(l)?;
                let std = take_f64s(l)?;
                Preprocess::Standardize { mean, std }
            }
        };
        let cols = match kind {
            SolverKind::Pi => m,
            SolverKind::Lda => m + 1,
        };
        let data = take_f64s(n * cols)?;
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes at byte {offset}", bytes.len() - offset)));
        }
        let layer = HiddenLayer::init(l, m / l, lo, hi, activation, seed)?;
        if layer.weights().checksum() != checksum {
            return Err(bad("regenerated hidden weights do not match the stored checksum".into()));
        }
        let weights = OutputWeights::new(kind, Matrix::new(n, cols, data)?)?.with_jitter(jitter);
        Model::new(preprocess, layer, weights)
    }

    /// Writes `path` and the JSON sidecar `<path>.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.header()).expect("header serializes");
        std::fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// `weights.elmw` -> `weights.elmw.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// The JSON mirror of a weight file's header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub magic: String,
    pub version: u16,
    pub kind: SolverKind,
    pub num_classes: usize,
    pub num_units: usize,
    pub num_inputs: usize,
    pub fan_out: usize,
    pub activation: ActivationKind,
    pub normalize: NormalizeMode,
    pub seed: u64,
    pub weight_low: f64,
    pub weight_high: f64,
    pub jitter: f64,
    pub hidden_checksum: String,
}
