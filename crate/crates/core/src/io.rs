//! Tensor files, model-tap manifests and report serialization.
//!
//! Tensor file layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `NTSR` |
//! | 4 | format version (`u32`, currently 1) |
//! | 4 | header length `h` (`u32`) |
//! | h | UTF-8 JSON `{"dtype":"f32"|"f64","shape":[..],"order":"row-major"}` |
//! | rest | row-major scalars |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::SpectrumReport;
use crate::error::{Error, Result};
use crate::linalg::{Dtype, Matrix, Real};

pub const MAGIC: &[u8; 4] = b"NTSR";
pub const FORMAT_VERSION: u32 = 1;
pub const ROW_MAJOR: &str = "row-major";
const PREAMBLE: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub order: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn nan_count(&self) -> usize {
        match self {
            TensorData::F32(v) => v.iter().filter(|x| x.is_nan()).count(),
            TensorData::F64(v) => v.iter().filter(|x| x.is_nan()).count(),
        }
    }

    fn to_vec<T: Real>(&self) -> Vec<T> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| T::from_f32(x).unwrap()).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::from_f64(x).unwrap()).collect(),
        }
    }
}

/// A matrix or a batch of equally shaped matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

/// Facts gathered while loading; NaN payloads load but are counted here.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub path: PathBuf,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub nan_count: usize,
    pub sha256: String,
}

fn check_shape(shape: &[usize]) -> std::result::Result<usize, String> {
    if !(2..=3).contains(&shape.len()) {
        return Err(format!("shape {shape:?} must have 2 or 3 dims"));
    }
    if shape.contains(&0) {
        return Err(format!("shape {shape:?} has an empty dim"));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &s| acc.checked_mul(s))
        .ok_or_else(|| format!("shape {shape:?} overflows"))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let len = check_shape(&shape).map_err(Error::Shape)?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_matrix<T: Real>(m: &Matrix<T>) -> Self {
        Self::from_batch(std::slice::from_ref(m))
            .expect("single matrix")
            .squeeze()
    }

    pub fn from_batch<T: Real>(items: &[Matrix<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (r, c) = first.shape();
        if let Some(i) = items.iter().position(|m| m.shape() != (r, c)) {
            return Err(Error::Shape(format!(
                "batch item {i} has shape {:?}, item 0 has {:?}",
                items[i].shape(),
                (r, c)
            )));
        }
        let flat = items.iter().flat_map(|m| m.as_slice().iter().copied());
        let data = match T::DTYPE {
            Dtype::F32 => TensorData::F32(flat.map(|x| x.to_f32().unwrap()).collect()),
            Dtype::F64 => TensorData::F64(flat.map(|x| x.to_f64().unwrap()).collect()),
        };
        Tensor::new(vec![items.len(), r, c], data)
    }

    fn squeeze(mut self) -> Self {
        if self.shape.len() == 3 && self.shape[0] == 1 {
            self.shape.remove(0);
        }
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn is_batch(&self) -> bool {
        self.shape.len() == 3
    }

    /// Number of matrices: the leading dim for batches, else 1.
    pub fn batch_len(&self) -> usize {
        if self.is_batch() {
            self.shape[0]
        } else {
            1
        }
    }

    /// `(rows, cols)` of each matrix.
    pub fn matrix_shape(&self) -> (usize, usize) {
        let k = self.shape.len();
        (self.shape[k - 2], self.shape[k - 1])
    }

    pub fn nan_count(&self) -> usize {
        self.data.nan_count()
    }

    /// Matrices in batch-major order, converted to `T`.
    pub fn matrices<T: Real>(&self) -> Vec<Matrix<T>> {
        let (r, c) = self.matrix_shape();
        let all = self.data.to_vec::<T>();
        all.chunks_exact(r * c)
            .map(|ch| Matrix::from_vec(r, c, ch.to_vec()).expect("consistent chunk"))
            .collect()
    }

    /// The single matrix of a 2-D tensor (or a batch of one).
    pub fn matrix<T: Real>(&self) -> Result<Matrix<T>> {
        if self.batch_len() != 1 {
            return Err(Error::Shape(format!(
                "expected a single matrix, found a batch of {}",
                self.batch_len()
            )));
        }
        Ok(self.matrices().pop().expect("one matrix"))
    }

    pub fn header(&self) -> TensorHeader {
        TensorHeader {
            dtype: self.dtype(),
            shape: self.shape.clone(),
            order: ROW_MAJOR.into(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + self.data.len() * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|&x| x.append_le(&mut out)),
            TensorData::F64(v) => v.iter().for_each(|&x| x.append_le(&mut out)),
        }
        out
    }

    /// Parses a file image; `path` is used only in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptFile {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::NotATensorFile { path: path.to_path_buf() });
        }
        if bytes.len() < PREAMBLE {
            return Err(corrupt(format!("{} bytes is shorter than the preamble", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[PREAMBLE..];
        if hlen > body.len() {
            return Err(corrupt(format!("header length {hlen} exceeds file size")));
        }
        let header: TensorHeader = serde_json::from_slice(&body[..hlen])
            .map_err(|e| corrupt(format!("bad header: {e}")))?;
        if header.order != ROW_MAJOR {
            return Err(corrupt(format!("unsupported order {:?}", header.order)));
        }
        let len = check_shape(&header.shape).map_err(corrupt)?;
        let payload = &body[hlen..];
        let want = len
            .checked_mul(header.dtype.size())
            .ok_or_else(|| corrupt("payload size overflows".into()))?;
        if payload.len() != want {
            return Err(corrupt(format!(
                "payload is {} bytes, shape {:?} of {} needs {want}",
                payload.len(),
                header.shape,
                header.dtype
            )));
        }
        let data = match header.dtype {
            Dtype::F32 => TensorData::F32(payload.chunks_exact(4).map(f32::from_le).collect()),
            Dtype::F64 => TensorData::F64(payload.chunks_exact(8).map(f64::from_le).collect()),
        };
        Tensor::new(header.shape, data)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_checksum(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_matrix<T: Real>(path: &Path, m: &Matrix<T>) -> Result<()> {
    write_tensor(path, &Tensor::from_matrix(m))
}

pub fn write_batch<T: Real>(path: &Path, items: &[Matrix<T>]) -> Result<()> {
    write_tensor(path, &Tensor::from_batch(items)?)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    read_tensor_with_report(path).map(|(t, _)| t)
}

pub fn read_tensor_with_report(path: &Path) -> Result<(Tensor, LoadReport)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let t = Tensor::from_bytes(&bytes, path)?;
    let report = LoadReport {
        path: path.to_path_buf(),
        dtype: t.dtype(),
        shape: t.shape.clone(),
        nan_count: t.nan_count(),
        sha256: sha256_hex(&bytes),
    };
    if report.nan_count > 0 {
        log::warn!("{}: {} NaN values in payload", path.display(), report.nan_count);
    }
    Ok((t, report))
}

/// Tensor role within a model-tap dump.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Q,
    K,
    V,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub role: TensorRole,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

/// Index written next to a dump of per-window queries, keys and values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapManifest {
    pub model: String,
    pub layer: String,
    pub head: usize,
    pub window: usize,
    pub n: usize,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<Dtype>,
    pub files: Vec<ManifestFile>,
}

impl TapManifest {
    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Token grid for pool-2d landmarks.
    pub fn grid(&self) -> (usize, usize) {
        (self.window, self.window)
    }

    pub fn file(&self, role: TensorRole) -> Option<&ManifestFile> {
        self.files.iter().find(|f| f.role == role)
    }

    pub fn resolve(&self, manifest_path: &Path, file: &ManifestFile) -> PathBuf {
        match manifest_path.parent() {
            Some(dir) if file.path.is_relative() => dir.join(&file.path),
            _ => file.path.clone(),
        }
    }

    /// Checks `N = window²` and that every listed file loads with `N` rows,
    /// `d` columns for queries and keys, and the recorded checksum.
    pub fn validate(&self, manifest_path: &Path) -> Result<()> {
        if self.n != self.window * self.window {
            return Err(Error::InvalidInput(format!(
                "manifest says N = {} but window {} gives {}",
                self.n,
                self.window,
                self.window * self.window
            )));
        }
        for role in [TensorRole::Q, TensorRole::K, TensorRole::V] {
            if self.file(role).is_none() {
                return Err(Error::InvalidInput(format!("manifest lists no {role:?} file")));
            }
        }
        for f in &self.files {
            let path = self.resolve(manifest_path, f);
            let (t, rep) = read_tensor_with_report(&path)?;
            let (rows, cols) = t.matrix_shape();
            if rows != self.n {
                return Err(Error::Shape(format!("{}: {rows} rows, manifest N = {}", path.display(), self.n)));
            }
            if f.role != TensorRole::V && cols != self.d {
                return Err(Error::Shape(format!("{}: {cols} cols, manifest d = {}", path.display(), self.d)));
            }
            if let Some(want) = &f.sha256 {
                if !want.eq_ignore_ascii_case(&rep.sha256) {
                    return Err(Error::CorruptFile {
                        path,
                        reason: format!("checksum {} does not match manifest {want}", rep.sha256),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// `index,sigma_gtilde,sigma_ga`, one row per index; missing values are blank.
pub fn write_spectrum_csv<W: Write>(mut out: W, rep: &SpectrumReport) -> std::io::Result<()> {
    writeln!(out, "index,sigma_gtilde,sigma_ga")?;
    let rows = rep.sigma_gtilde.len().max(rep.sigma_ga.len());
    let cell = |v: Option<&f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for i in 0..rows {
        writeln!(
            out,
            "{},{},{}",
            i + 1,
            cell(rep.sigma_gtilde.get(i)),
            cell(rep.sigma_ga.get(i))
        )?;
    }
    Ok(())
}
