//! Dense scalar volumes with physical spacing and their header/raw format.

use super::{io_err, VolIoError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// JSON header describing a raw volume blob.
///
/// All triples are in (z, y, x) order. `data_file` is resolved relative to
/// the header's directory. `origin_mm` is the world position of the center
/// of voxel (0, 0, 0) and defaults to the world origin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    #[serde(default)]
    pub origin_mm: [f64; 3],
    pub dtype: String,
    pub data_file: String,
}

/// A dense scalar grid in z-major order: flat index = (z·ny + y)·nx + x.
///
/// Immutable after construction; all invariants (value count, positive
/// spacing, finite values) are checked by [`Volume3D::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],       // (nz, ny, nx)
    spacing_mm: [f64; 3],   // (sz, sy, sx)
    origin_mm: [f64; 3],    // (oz, oy, ox), center of voxel (0,0,0)
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self, VolIoError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolIoError::InvalidVolume(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolIoError::InvalidVolume(format!(
                "spacing must be positive and finite, got {spacing_mm:?}"
            )));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(VolIoError::InvalidVolume(format!(
                "data length {} does not match dims product {}",
                data.len(),
                expected
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolIoError::CorruptData { index });
        }
        Ok(Self {
            dims,
            spacing_mm,
            origin_mm,
            data,
        })
    }

    /// (nz, ny, nx)
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// (sz, sy, sx) in mm
    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    /// (oz, oy, ox): world position of the center of voxel (0, 0, 0)
    pub fn origin_mm(&self) -> [f64; 3] {
        self.origin_mm
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

    #[inline]
    pub fn flat_index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    /// Inverse of [`flat_index`](Self::flat_index): flat → (z, y, x).
    #[inline]
    pub fn coords_of(&self, flat: usize) -> (usize, usize, usize) {
        let nx = self.dims[2];
        let ny = self.dims[1];
        let x = flat % nx;
        let y = (flat / nx) % ny;
        let z = flat / (nx * ny);
        (z, y, x)
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.flat_index(z, y, x)]
    }

    /// World position (x, y, z) of a voxel center.
    pub fn voxel_center_mm(&self, z: usize, y: usize, x: usize) -> [f64; 3] {
        [
            self.origin_mm[2] + x as f64 * self.spacing_mm[2],
            self.origin_mm[1] + y as f64 * self.spacing_mm[1],
            self.origin_mm[0] + z as f64 * self.spacing_mm[0],
        ]
    }

    /// World point (x, y, z) → continuous voxel coordinates (cx, cy, cz).
    pub fn to_voxel_coords(&self, p_mm: [f64; 3]) -> [f64; 3] {
        [
            (p_mm[0] - self.origin_mm[2]) / self.spacing_mm[2],
            (p_mm[1] - self.origin_mm[1]) / self.spacing_mm[1],
            (p_mm[2] - self.origin_mm[0]) / self.spacing_mm[0],
        ]
    }

    /// Load a volume from its JSON header; the raw blob is read from
    /// `data_file` relative to the header's directory.
    pub fn load(header_path: &Path) -> Result<Self, VolIoError> {
        let text = fs::read_to_string(header_path).map_err(|e| io_err(header_path, e))?;
        let header: VolumeHeader =
            serde_json::from_str(&text).map_err(|e| VolIoError::MalformedHeader {
                path: header_path.to_path_buf(),
                reason: e.to_string(),
            })?;
        if header.dtype != "float32" {
            return Err(VolIoError::UnsupportedFormat {
                dtype: header.dtype,
            });
        }
        let raw_path = header_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&header.data_file);
        let bytes = fs::read(&raw_path).map_err(|e| io_err(&raw_path, e))?;
        let count = header.dims[0] * header.dims[1] * header.dims[2];
        let expected = (count * 4) as u64;
        if bytes.len() as u64 != expected {
            return Err(VolIoError::SizeMismatch {
                path: raw_path,
                expected,
                actual: bytes.len() as u64,
            });
        }
        let mut data = Vec::with_capacity(count);
        for chunk in bytes.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        Self::new(header.dims, header.spacing_mm, header.origin_mm, data)
    }

    /// Save as JSON header + raw blob. The blob lands next to the header
    /// with the same stem and a `.raw` extension.
    pub fn save(&self, header_path: &Path) -> Result<(), VolIoError> {
        let raw_path = header_path.with_extension("raw");
        let data_file = raw_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "volume.raw".to_string());
        let header = VolumeHeader {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            origin_mm: self.origin_mm,
            dtype: "float32".to_string(),
            data_file,
        };
        let text = serde_json::to_string_pretty(&header).expect("header serializes");
        if let Some(dir) = header_path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
        }
        fs::write(header_path, text).map_err(|e| io_err(header_path, e))?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&raw_path, bytes).map_err(|e| io_err(&raw_path, e))?;
        Ok(())
    }
}
