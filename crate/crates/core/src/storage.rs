// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-file binary containers for activations, checkpoints and ground truth.
//!
//! Every file shares one framing, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "PROXSAE1"
//! 8       4     version (u32, currently 1)
//! 12      4     dtype (u32, 0 = f32 little-endian)
//! 16      8     n_rows (u64)
//! 24      8     dim (u64)
//! 32      8     metadata length in bytes (u64)
//! 40      m     metadata, UTF-8 JSON object
//! 40+m    4·n_rows·dim  body, row-major f32 little-endian
//! ```
//!
//! Activation stores use the body as an `n_rows × dim` matrix. Checkpoints
//! and ground-truth sidecars use `dim = 1` and list named sections
//! (`{"name", "rows", "cols"}`, in body order) under `"sections"` in the
//! metadata. The metadata key `"kind"` is `"activations"`, `"checkpoint"` or
//! `"ground_truth"`; activation files from external tools may omit it.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngState, Vector};
use crate::model::{SaeParams, SaeVariant};

pub const MAGIC: &[u8; 8] = b"PROXSAE1";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32_LE: u32 = 0;
pub const HEADER_LEN: usize = 40;

/// Decoded container framing.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub n_rows: u64,
    pub dim: u64,
    pub metadata: String,
    pub body: Vec<f32>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.metadata.as_bytes();
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + 4 * self.body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
        out.extend_from_slice(&self.n_rows.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta);
        for v in &self.body {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses and validates a container; `path` is only used in errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |offset: usize, reason: String| Error::Corruption {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason,
        };
        if bytes.len() < MAGIC.len() {
            return Err(corrupt(bytes.len(), "file shorter than magic".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "bad magic (expected PROXSAE1)".into(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(
                bytes.len(),
                format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len()),
            ));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version > FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        if version == 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "version 0 is not valid".into(),
            });
        }
        let dtype = u32_at(12);
        if dtype != DTYPE_F32_LE {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unknown dtype code {dtype}"),
            });
        }
        let n_rows = u64_at(16);
        let dim = u64_at(24);
        let meta_len = u64_at(32);
        if dim == 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "dim must be positive".into(),
            });
        }
        let body_len = n_rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt(16, "n_rows·dim overflows".into()))?;
        let expected = (HEADER_LEN as u64)
            .checked_add(meta_len)
            .and_then(|n| n.checked_add(body_len))
            .ok_or_else(|| corrupt(32, "declared size overflows".into()))?;
        let actual = bytes.len() as u64;
        if actual < expected {
            return Err(corrupt(
                bytes.len(),
                format!("truncated: expected {expected} bytes, file has {actual}"),
            ));
        }
        if actual > expected {
            return Err(corrupt(
                expected as usize,
                format!("{} trailing bytes after body", actual - expected),
            ));
        }
        let meta_end = HEADER_LEN + meta_len as usize;
        let metadata = std::str::from_utf8(&bytes[HEADER_LEN..meta_end])
            .map_err(|e| corrupt(HEADER_LEN + e.valid_up_to(), "metadata is not UTF-8".into()))?
            .to_owned();
        let body = bytes[meta_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            n_rows,
            dim,
            metadata,
            body,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_exclusive(path, &self.to_bytes())
    }

    fn metadata_json(&self, path: &Path) -> Result<serde_json::Map<String, Value>> {
        match serde_json::from_str::<Value>(&self.metadata) {
            Ok(Value::Object(m)) => Ok(m),
            Ok(_) => Err(Error::Format {
                path: path.to_path_buf(),
                reason: "metadata is not a JSON object".into(),
            }),
            Err(e) => Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("metadata is not valid JSON: {e}"),
            }),
        }
    }

    /// Value of the `"kind"` metadata key, defaulting to `"activations"`.
    pub fn kind(&self, path: &Path) -> Result<String> {
        Ok(self
            .metadata_json(path)?
            .get("kind")
            .and_then(Value::as_str)
            .unwrap_or("activations")
            .to_owned())
    }
}

/// Writes `bytes` to `path`, failing if another writer holds the path.
///
/// A sibling `<path>.lock` file is created exclusively for the duration of
/// the write; data goes to a temporary file that is renamed into place.
pub fn write_exclusive(path: &Path, bytes: &[u8]) -> Result<()> {
    let lock = sibling(path, "lock");
    match OpenOptions::new().write(true).create_new(true).open(&lock) {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            return Err(Error::Locked(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(&lock, e)),
    }
    let tmp = sibling(path, "tmp");
    let result = (|| {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    })();
    let _ = fs::remove_file(&lock);
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(ext);
    path.with_file_name(name)
}

/// Metadata of an activation store.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    #[serde(default = "activations_kind")]
    pub kind: String,
    #[serde(default)]
    pub model: String,
    /// Residual-stream layer index, when the store comes from a model.
    #[serde(default)]
    pub layer: Option<i64>,
    #[serde(default)]
    pub source: String,
    /// Any further keys written by other producers, preserved verbatim.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

fn activations_kind() -> String {
    "activations".into()
}

impl StoreMeta {
    pub fn synthetic(source: impl Into<String>) -> Self {
        Self {
            kind: activations_kind(),
            model: "synthetic".into(),
            layer: None,
            source: source.into(),
            extra: BTreeMap::new(),
        }
    }
}

/// Row-major matrix of activations with provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStore {
    n_rows: usize,
    dim: usize,
    data: Vec<f32>,
    pub meta: StoreMeta,
}

impl ActivationStore {
    pub fn new(n_rows: usize, dim: usize, data: Vec<f32>, meta: StoreMeta) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("store dim must be positive"));
        }
        crate::error::check_dim("ActivationStore::new", n_rows * dim, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "store value at row {} is not finite",
                i / dim
            )));
        }
        Ok(Self {
            n_rows,
            dim,
            data,
            meta,
        })
    }

    /// Rounds an `f64` matrix (one sample per row) to `f32` storage.
    pub fn from_matrix(m: &Matrix, meta: StoreMeta) -> Result<Self> {
        Self::new(
            m.rows(),
            m.cols(),
            m.as_slice().iter().map(|&v| v as f32).collect(),
            meta,
        )
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Row `i` widened to `f64`.
    pub fn row_vec(&self, i: usize) -> Vector {
        Vector::from_vec_unchecked(self.row(i).iter().map(|&v| v as f64).collect())
    }

    /// Copies row `i` into `out` as `f64`.
    pub fn row_into(&self, i: usize, out: &mut [f64]) {
        for (o, &v) in out.iter_mut().zip(self.row(i)) {
            *o = v as f64;
        }
    }

    /// All rows as an `f64` matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        Matrix::new(
            self.n_rows,
            self.dim,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Column means accumulated in `f64`.
    pub fn mean(&self) -> Result<Vector> {
        if self.n_rows == 0 {
            return Err(Error::UndefinedMetric("mean of an empty store".into()));
        }
        let mut acc = vec![0.0f64; self.dim];
        for i in 0..self.n_rows {
            for (a, &v) in acc.iter_mut().zip(self.row(i)) {
                *a += v as f64;
            }
        }
        let n = self.n_rows as f64;
        Ok(Vector::from_vec_unchecked(
            acc.into_iter().map(|a| a / n).collect(),
        ))
    }

    /// Store holding the selected rows, same metadata.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            n_rows: rows.len(),
            dim: self.dim,
            data,
            meta: self.meta.clone(),
        }
    }

    pub fn to_container(&self) -> Container {
        Container {
            n_rows: self.n_rows as u64,
            dim: self.dim as u64,
            metadata: serde_json::to_string(&self.meta).expect("metadata serializes"),
            body: self.data.clone(),
        }
    }

    pub fn from_container(c: Container, path: &Path) -> Result<Self> {
        let meta: StoreMeta = serde_json::from_str(&c.metadata).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("activation metadata: {e}"),
        })?;
        if meta.kind != "activations" {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected an activation store, found kind {:?}", meta.kind),
            });
        }
        let n_rows = usize::try_from(c.n_rows).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            reason: "n_rows does not fit in memory".into(),
        })?;
        Self::new(n_rows, c.dim as usize, c.body, meta).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?, path)
    }
}

/// Named slab inside a sectioned container body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

fn pack_sections(sections: &[(&str, usize, usize, &[f64])]) -> (Vec<Section>, Vec<f32>) {
    let mut index = Vec::new();
    let mut body = Vec::new();
    for &(name, rows, cols, data) in sections {
        debug_assert_eq!(rows * cols, data.len());
        index.push(Section {
            name: name.into(),
            rows,
            cols,
        });
        body.extend(data.iter().map(|&v| v as f32));
    }
    (index, body)
}

type SectionMap = BTreeMap<String, (usize, usize, Vec<f64>)>;

fn unpack_sections(index: &[Section], body: &[f32], path: &Path) -> Result<SectionMap> {
    let mut out = BTreeMap::new();
    let mut offset = 0usize;
    for s in index {
        let len = s.rows * s.cols;
        let end = offset + len;
        if end > body.len() {
            return Err(Error::Corruption {
                path: path.to_path_buf(),
                offset: (HEADER_LEN + 4 * offset) as u64,
                reason: format!("section {} runs past the body", s.name),
            });
        }
        out.insert(
            s.name.clone(),
            (
                s.rows,
                s.cols,
                body[offset..end].iter().map(|&v| v as f64).collect(),
            ),
        );
        offset = end;
    }
    if offset != body.len() {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            offset: (HEADER_LEN + 4 * offset) as u64,
            reason: "body longer than its sections".into(),
        });
    }
    Ok(out)
}

fn take_section(
    map: &mut BTreeMap<String, (usize, usize, Vec<f64>)>,
    name: &str,
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<Vec<f64>> {
    let (r, c, data) = map.remove(name).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: format!("missing section {name}"),
    })?;
    if (r, c) != (rows, cols) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("section {name} is {r}x{c}, expected {rows}x{cols}"),
        });
    }
    Ok(data)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    d: usize,
    p: usize,
    variant: SaeVariant,
    step: u64,
    config_hash: String,
    rng: RngState,
    sections: Vec<Section>,
}

/// Trained SAE together with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: SaeParams,
    pub variant: SaeVariant,
    pub step: u64,
    pub config_hash: String,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let p = &self.params;
        let (d, np) = (p.d(), p.p());
        let mut sections: Vec<(&str, usize, usize, &[f64])> = vec![
            ("W", d, np, p.w.as_slice()),
            ("D", d, np, p.dict.as_slice()),
            ("b_e", 1, np, p.b_enc.as_slice()),
            ("b", 1, d, p.b_dec.as_slice()),
        ];
        if let Some(t) = &p.log_thresholds {
            sections.push(("log_theta", 1, np, t.as_slice()));
        }
        let (index, body) = pack_sections(&sections);
        let meta = CheckpointMeta {
            kind: "checkpoint".into(),
            d,
            p: np,
            variant: self.variant,
            step: self.step,
            config_hash: self.config_hash.clone(),
            rng: self.rng,
            sections: index,
        };
        Container {
            n_rows: body.len() as u64,
            dim: 1,
            metadata: serde_json::to_string(&meta).expect("metadata serializes"),
            body,
        }
    }

    pub fn from_container(c: Container, path: &Path) -> Result<Self> {
        let fmt = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let meta: CheckpointMeta = serde_json::from_str(&c.metadata)
            .map_err(|e| fmt(format!("checkpoint metadata: {e}")))?;
        if meta.kind != "checkpoint" {
            return Err(fmt(format!(
                "expected a checkpoint, found kind {:?}",
                meta.kind
            )));
        }
        let (d, p) = (meta.d, meta.p);
        let mut map = unpack_sections(&meta.sections, &c.body, path)?;
        let w = take_section(&mut map, "W", d, p, path)?;
        let dict = take_section(&mut map, "D", d, p, path)?;
        let b_enc = take_section(&mut map, "b_e", 1, p, path)?;
        let b_dec = take_section(&mut map, "b", 1, d, path)?;
        let log_thresholds = if map.contains_key("log_theta") {
            Some(
                Vector::new(take_section(&mut map, "log_theta", 1, p, path)?)
                    .map_err(|e| fmt(e.to_string()))?,
            )
        } else {
            None
        };
        let wrap = |e: Error| fmt(e.to_string());
        let mut params = SaeParams::new(
            Matrix::new(d, p, w).map_err(wrap)?,
            Matrix::new(d, p, dict).map_err(wrap)?,
            Vector::new(b_enc).map_err(wrap)?,
            Vector::new(b_dec).map_err(wrap)?,
        )
        .map_err(wrap)?;
        params.log_thresholds = log_thresholds;
        meta.variant.spec.validate(p).map_err(wrap)?;
        Ok(Self {
            params,
            variant: meta.variant,
            step: meta.step,
            config_hash: meta.config_hash,
            rng: meta.rng,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?, path)
    }
}
