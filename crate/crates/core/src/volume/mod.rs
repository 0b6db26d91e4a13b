//! 4D volumes: NIfTI-1 subset IO, synthetic data, and preprocessing.

pub mod nifti;
pub mod preprocess;
pub mod synth;

use crate::error::{Error, Result};

/// A (T, X, Y, Z) scalar field with voxel spacing in mm and repetition time
/// in seconds. Data is t-major, then z, y, x (x fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume4D {
    pub dims: (usize, usize, usize, usize),
    pub spacing_mm: (f64, f64, f64),
    pub tr_seconds: f64,
    pub data: Vec<f32>,
}

impl Volume4D {
    pub fn new(
        dims: (usize, usize, usize, usize),
        spacing_mm: (f64, f64, f64),
        tr_seconds: f64,
        data: Vec<f32>,
    ) -> Result<Self> {
        let (t, x, y, z) = dims;
        if t == 0 || x == 0 || y == 0 || z == 0 {
            return Err(Error::Data(format!("volume dims must be positive: {dims:?}")));
        }
        if data.len() != t * x * y * z {
            return Err(Error::Data(format!(
                "volume data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if spacing_mm.0 <= 0.0 || spacing_mm.1 <= 0.0 || spacing_mm.2 <= 0.0 || tr_seconds <= 0.0 {
            return Err(Error::Data(format!(
                "spacing and TR must be strictly positive: spacing {spacing_mm:?}, tr {tr_seconds}"
            )));
        }
        Ok(Volume4D {
            dims,
            spacing_mm,
            tr_seconds,
            data,
        })
    }

    #[inline]
    pub fn index(&self, t: usize, x: usize, y: usize, z: usize) -> usize {
        let (_, xd, yd, zd) = self.dims;
        ((t * zd + z) * yd + y) * xd + x
    }

    #[inline]
    pub fn at(&self, t: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(t, x, y, z)]
    }

    pub fn frame_len(&self) -> usize {
        self.dims.1 * self.dims.2 * self.dims.3
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let fl = self.frame_len();
        &self.data[t * fl..(t + 1) * fl]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-voxel time series at a spatial location.
    pub fn voxel_series(&self, x: usize, y: usize, z: usize) -> Vec<f32> {
        (0..self.dims.0).map(|t| self.at(t, x, y, z)).collect()
    }
}

/// Integer ROI labels over a 3D grid; 0 is background, 1..=n_rois are ROIs.
#[derive(Clone, Debug)]
pub struct LabelVolume {
    pub dims: (usize, usize, usize),
    pub labels: Vec<u32>,
    pub n_rois: usize,
}

impl LabelVolume {
    pub fn new(dims: (usize, usize, usize), labels: Vec<u32>, n_rois: usize) -> Result<Self> {
        let (x, y, z) = dims;
        if labels.len() != x * y * z {
            return Err(Error::Data(format!(
                "label volume length {} does not match dims {:?}",
                labels.len(),
                dims
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > n_rois) {
            return Err(Error::Data(format!(
                "label {bad} exceeds declared ROI count {n_rois}"
            )));
        }
        let mut seen = vec![false; n_rois + 1];
        for &l in &labels {
            seen[l as usize] = true;
        }
        for r in 1..=n_rois {
            if !seen[r] {
                return Err(Error::Data(format!("ROI {r} has no voxels")));
            }
        }
        Ok(LabelVolume {
            dims,
            labels,
            n_rois,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u32 {
        let (xd, yd, _) = self.dims;
        self.labels[(z * yd + y) * xd + x]
    }
}

/// Pearson correlation matrix with its Fisher-transformed counterpart.
#[derive(Clone, Debug)]
pub struct ConnectivityMatrix {
    pub n: usize,
    /// Row-major R×R Pearson correlations; unit diagonal.
    pub r: Vec<f64>,
    /// z = atanh(r clamped to ±(1−1e-7)); zero diagonal by convention.
    pub z: Vec<f64>,
}

impl ConnectivityMatrix {
    pub fn r_at(&self, i: usize, j: usize) -> f64 {
        self.r[i * self.n + j]
    }
    pub fn z_at(&self, i: usize, j: usize) -> f64 {
        self.z[i * self.n + j]
    }
}
