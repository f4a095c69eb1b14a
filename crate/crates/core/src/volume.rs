//! 3D activity volumes, 2.5D slice windows and the on-disk volume format.
//!
//! A volume is stored slice-major: `data[s * rows * cols + r * cols + c]`.
//! The file format is a single line of JSON (terminated by `\n`) followed by
//! the raw little-endian `f32` payload in the same order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Study-level metadata carried with every volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMeta {
    /// Injected activity in Becquerel.
    pub dose_bq: f64,
    /// Fraction of full-scan counts retained, in (0, 1].
    pub count_fraction: f64,
    pub id: String,
    /// Set once the voxels have been divided by `dose_bq`.
    #[serde(default)]
    pub normalized: bool,
}

impl StudyMeta {
    pub fn new(id: impl Into<String>, dose_bq: f64, count_fraction: f64) -> Result<Self> {
        let meta = Self {
            dose_bq,
            count_fraction,
            id: id.into(),
            normalized: false,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dose_bq >= 0.0) || !self.dose_bq.is_finite() {
            return Err(Error::Domain(format!("dose_bq must be >= 0, got {}", self.dose_bq)));
        }
        if !(self.count_fraction > 0.0 && self.count_fraction <= 1.0) {
            return Err(Error::Domain(format!(
                "count_fraction must lie in (0, 1], got {}",
                self.count_fraction
            )));
        }
        Ok(())
    }
}

impl Default for StudyMeta {
    fn default() -> Self {
        Self {
            dose_bq: 0.0,
            count_fraction: 1.0,
            id: String::new(),
            normalized: false,
        }
    }
}

/// A single 2D transverse slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Slice2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A scalar 3D grid with voxel spacing and study metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    data: Vec<f32>,
    pub meta: StudyMeta,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], data: Vec<f32>, meta: StudyMeta) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::arg(format!("volume dims must be >= 1, got {dims:?}")));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::arg(format!(
                "data length {} does not match dims {dims:?} ({expected} voxels)",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite voxel at linear index {i}")));
        }
        meta.validate()?;
        Ok(Self {
            dims,
            voxel_size,
            data,
            meta,
        })
    }

    pub fn zeros(dims: [usize; 3], meta: StudyMeta) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, [1.0; 3], vec![0.0; n], meta)
    }

    /// Assembles a volume from equally-shaped slices.
    pub fn from_slices(slices: Vec<Slice2D>, voxel_size: [f64; 3], meta: StudyMeta) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::arg("no slices"))?;
        let (rows, cols) = (first.rows, first.cols);
        if slices.iter().any(|s| s.rows != rows || s.cols != cols) {
            return Err(Error::arg("slices have inconsistent shapes"));
        }
        let dims = [slices.len(), rows, cols];
        let data = slices.into_iter().flat_map(|s| s.data).collect();
        Self::new(dims, voxel_size, data, meta)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_slices(&self) -> usize {
        self.dims[0]
    }

    pub fn slice_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, s: usize, r: usize, c: usize) -> f32 {
        self.data[(s * self.dims[1] + r) * self.dims[2] + c]
    }

    pub fn slice_data(&self, s: usize) -> &[f32] {
        let n = self.slice_len();
        &self.data[s * n..(s + 1) * n]
    }

    pub fn slice(&self, s: usize) -> Result<Slice2D> {
        if s >= self.dims[0] {
            return Err(Error::Index {
                index: s,
                len: self.dims[0],
            });
        }
        Ok(Slice2D {
            rows: self.dims[1],
            cols: self.dims[2],
            data: self.slice_data(s).to_vec(),
        })
    }

    /// Same geometry and metadata, different voxel values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, self.voxel_size, data, self.meta.clone())
    }

    pub fn total_activity(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

/// `n` neighbouring slices centred on `center_index`, stacked as channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceWindow {
    pub center_index: usize,
    pub width: usize,
    pub rows: usize,
    pub cols: usize,
    /// `width` slices, each `rows * cols`, channel-major.
    pub channels: Vec<f32>,
}

impl SliceWindow {
    pub fn channel(&self, k: usize) -> &[f32] {
        let n = self.rows * self.cols;
        &self.channels[k * n..(k + 1) * n]
    }

    /// Source slice index feeding channel `k` under edge replication.
    pub fn source_index(center: usize, width: usize, k: usize, num_slices: usize) -> usize {
        let offset = center as isize - ((width - 1) / 2) as isize + k as isize;
        offset.clamp(0, num_slices as isize - 1) as usize
    }
}

/// Extracts the `n`-slice window centred at `s`, clamping indices at the
/// volume edges.
pub fn extract_window(v: &Volume3D, s: usize, n: usize) -> Result<SliceWindow> {
    let num_slices = v.num_slices();
    if s >= num_slices {
        return Err(Error::Index {
            index: s,
            len: num_slices,
        });
    }
    if n == 0 || n.is_multiple_of(2) {
        return Err(Error::arg(format!("window width must be odd and >= 1, got {n}")));
    }
    let mut channels = Vec::with_capacity(n * v.slice_len());
    for k in 0..n {
        channels.extend_from_slice(v.slice_data(SliceWindow::source_index(s, n, k, num_slices)));
    }
    Ok(SliceWindow {
        center_index: s,
        width: n,
        rows: v.dims[1],
        cols: v.dims[2],
        channels,
    })
}

/// Divides every voxel by the injected activity.
pub fn normalize_by_dose(v: &Volume3D) -> Result<Volume3D> {
    let dose = v.meta.dose_bq;
    if dose <= 0.0 {
        return Err(Error::Domain(format!("cannot normalize by dose {dose}")));
    }
    let data = v.data.iter().map(|&x| (x as f64 / dose) as f32).collect();
    let mut out = v.with_data(data)?;
    out.meta.normalized = true;
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    version: u32,
    dims: [usize; 3],
    voxel_size_mm: [f64; 3],
    dose_bq: f64,
    count_fraction: f64,
    id: String,
    byte_order: String,
    scalar_bits: u32,
    #[serde(default)]
    normalized: bool,
}

pub fn encode_volume(v: &Volume3D) -> Result<Vec<u8>> {
    let header = VolumeHeader {
        version: FORMAT_VERSION,
        dims: v.dims,
        voxel_size_mm: v.voxel_size,
        dose_bq: v.meta.dose_bq,
        count_fraction: v.meta.count_fraction,
        id: v.meta.id.clone(),
        byte_order: "LE".into(),
        scalar_bits: 32,
        normalized: v.meta.normalized,
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.reserve(v.data.len() * 4);
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    Ok(bytes)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume3D> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header terminator".into()))?;
    // Peek at the version before committing to the full schema.
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("header has no version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: version as u32,
            expected: FORMAT_VERSION,
        });
    }
    let header: VolumeHeader = serde_json::from_value(raw).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.byte_order != "LE" || header.scalar_bits != 32 {
        return Err(Error::Format(format!(
            "unsupported scalar layout {} / {} bits",
            header.byte_order, header.scalar_bits
        )));
    }
    let payload = &bytes[split + 1..];
    let voxels: usize = header.dims.iter().product();
    if payload.len() != voxels * 4 {
        return Err(Error::Format(format!(
            "payload is {} bytes, header dims {:?} require {}",
            payload.len(),
            header.dims,
            voxels * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let meta = StudyMeta {
        dose_bq: header.dose_bq,
        count_fraction: header.count_fraction,
        id: header.id,
        normalized: header.normalized,
    };
    Volume3D::new(header.dims, header.voxel_size_mm, data, meta)
}

pub fn save_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_volume(v)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}
