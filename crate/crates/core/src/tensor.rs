//! Dense frame matrices and the `NSGT` binary tensor format.
//!
//! Every video, score field and NSG feature is a `T × d` matrix stored
//! row-major with frame 0's `d` entries first. In memory all values are
//! `f64`; on disk they are little-endian `f32`.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! magic    4 bytes  "NSGT"
//! version  u32      1
//! rank     u32
//! dims     rank × u32
//! payload  product(dims) × f32, row-major
//! ```

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const TENSOR_MAGIC: [u8; 4] = *b"NSGT";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected \"NSGT\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported tensor format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: truncated header")]
    TruncatedHeader { path: PathBuf },
    #[error("{path}: truncated payload, expected {expected} bytes but found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: payload length mismatch, dims imply {expected} bytes but file holds {found}")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("invalid dims {0:?}: every dimension must be positive")]
    InvalidDims(Vec<usize>),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("expected a rank-2 tensor, found rank {0}")]
    NotMatrix(usize),
    #[error("video needs at least 2 frames, found {0}")]
    TooFewFrames(usize),
    #[error("insufficient frames: have {available}, need {required}")]
    InsufficientFrames { available: usize, required: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A rank-k tensor with dims and row-major `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(TensorError::InvalidDims(dims));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(TensorError::ShapeMismatch {
                expected: dims,
                found: vec![data.len()],
            });
        }
        check_finite(&data)?;
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite { index }),
        None => Ok(()),
    }
}

/// A finite `rows × cols` matrix. Rows are frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FrameMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::InvalidDims(vec![rows, cols]));
        }
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                expected: vec![rows, cols],
                found: vec![data.len()],
            });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch {
                expected: vec![rows.len(), cols],
                found: vec![rows.len(), bad.len()],
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.rows, self.cols],
            data: self.data.clone(),
        }
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.dims.len() != 2 {
            return Err(TensorError::NotMatrix(t.dims.len()));
        }
        Ok(Self {
            rows: t.dims[0],
            cols: t.dims[1],
            data: t.data,
        })
    }

    fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// A `T × d` frame sequence with `T ≥ 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor(FrameMatrix);

impl VideoTensor {
    pub fn new(frames: FrameMatrix) -> Result<Self> {
        if frames.rows() < 2 {
            return Err(TensorError::TooFewFrames(frames.rows()));
        }
        Ok(Self(frames))
    }

    pub fn from_flat(frame_count: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(FrameMatrix::new(frame_count, dim, data)?)
    }

    pub fn frame_count(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn frames(&self) -> &FrameMatrix {
        &self.0
    }
}

/// Per-frame score estimates, shaped like the video they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField(FrameMatrix);

impl ScoreField {
    pub fn new(scores: FrameMatrix) -> Self {
        Self(scores)
    }

    /// Builds a score field and checks it matches `video`'s shape.
    pub fn for_video(video: &VideoTensor, scores: FrameMatrix) -> Result<Self> {
        let expected = [video.frame_count(), video.dim()];
        let found = [scores.rows(), scores.cols()];
        if expected != found {
            return Err(TensorError::ShapeMismatch {
                expected: expected.to_vec(),
                found: found.to_vec(),
            });
        }
        Ok(Self(scores))
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn matrix(&self) -> &FrameMatrix {
        &self.0
    }
}

/// Writes `tensor` in the `NSGT` layout.
///
/// Values that are non-finite, or that overflow `f32`, are rejected before
/// the file is created.
pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(tensor)?;
    let io_err = |source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    out.write_all(&bytes).map_err(io_err)?;
    out.flush().map_err(io_err)
}

pub fn encode_tensor(tensor: &Tensor) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(tensor.data.len() * 4);
    for (index, &v) in tensor.data.iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(TensorError::NonFinite { index });
        }
        payload.extend_from_slice(&narrow.to_le_bytes());
    }
    let mut bytes = Vec::with_capacity(12 + 4 * tensor.dims.len() + payload.len());
    bytes.extend_from_slice(&TENSOR_MAGIC);
    bytes.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(tensor.dims.len() as u32).to_le_bytes());
    for &d in &tensor.dims {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&payload);
    Ok(bytes)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| TensorError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    decode_tensor(&bytes, path)
}

/// Parses `NSGT` bytes; `origin` only labels diagnostics.
pub fn decode_tensor(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let path = || origin.to_path_buf();
    let word = |at: usize| -> Option<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    if bytes.len() < 4 {
        return Err(TensorError::TruncatedHeader { path: path() });
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != TENSOR_MAGIC {
        return Err(TensorError::BadMagic {
            path: path(),
            found: magic,
        });
    }
    let version = word(4).ok_or_else(|| TensorError::TruncatedHeader { path: path() })?;
    if version != TENSOR_VERSION {
        return Err(TensorError::UnsupportedVersion {
            path: path(),
            version,
        });
    }
    let rank = word(8).ok_or_else(|| TensorError::TruncatedHeader { path: path() })? as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = word(12 + 4 * i).ok_or_else(|| TensorError::TruncatedHeader { path: path() })?;
        dims.push(d as usize);
    }
    if dims.is_empty() || dims.contains(&0) {
        return Err(TensorError::InvalidDims(dims));
    }
    let header = 12 + 4 * rank;
    let expected = dims
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::InvalidDims(dims.clone()))?;
    let found = bytes.len() - header;
    if found < expected {
        return Err(TensorError::TruncatedPayload {
            path: path(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(TensorError::LengthMismatch {
            path: path(),
            expected,
            found,
        });
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect::<Vec<_>>();
    check_finite(&data)?;
    Ok(Tensor { dims, data })
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<FrameMatrix> {
    FrameMatrix::from_tensor(read_tensor(path)?)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &FrameMatrix) -> Result<()> {
    write_tensor(path, &m.to_tensor())
}

/// Frame indices `floor(i · t_raw / target)` for `i in 0..target`.
pub fn uniform_sample_indices(t_raw: usize, target: usize) -> Result<Vec<usize>> {
    if target == 0 {
        return Err(TensorError::InvalidDims(vec![t_raw, target]));
    }
    if t_raw < target {
        return Err(TensorError::InsufficientFrames {
            available: t_raw,
            required: target,
        });
    }
    Ok((0..target).map(|i| i * t_raw / target).collect())
}

/// Keeps `target` frames spread uniformly over the clip, in order.
pub fn uniform_frame_sample(video: &VideoTensor, target: usize) -> Result<VideoTensor> {
    let indices = uniform_sample_indices(video.frame_count(), target)?;
    VideoTensor::new(video.frames().select_rows(&indices))
}
