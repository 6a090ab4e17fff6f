//! Spatial grids (intensity volumes, displacement fields, label masks), landmarks
//! and their on-disk formats.
//!
//! Every grid stores its values channel-major with `x` fastest:
//! `linear = ((c·Z + z)·Y + y)·X + x`. That is exactly the `[C, Z, Y, X]` tensor
//! layout used by the network.

mod io;
mod landmarks;

pub use io::{
    read_checkpoint, read_field, read_mask, read_volume, sidecar_paths, write_checkpoint,
    write_field, write_mask, write_volume, CheckpointEntry, Dtype, Header,
};
pub use landmarks::{read_landmarks, write_landmarks, Landmark, LandmarkSet};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Voxel extents `(X, Y, Z)`.
pub type Dims = [usize; 3];
/// Millimeters per voxel along `(x, y, z)`.
pub type Spacing = [f64; 3];

fn validate_grid(dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Dims(format!("extents must be >= 1, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Invalid(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

fn voxel_count(dims: Dims) -> usize {
    dims.iter().product()
}

/// Single-channel intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        validate_grid(dims, spacing)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::Dims(format!(
                "volume {dims:?} needs {} values, got {}",
                voxel_count(dims),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("volume contains non-finite values".into()));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Result<Self> {
        Volume::new(dims, spacing, vec![0.0; voxel_count(dims)])
    }

    /// Fills from `f(x, y, z)`.
    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let [nx, ny, nz] = dims;
        let mut data = Vec::with_capacity(voxel_count(dims));
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// `[1, Z, Y, X]` tensor view of the intensities.
    pub fn to_tensor(&self) -> Tensor {
        let [nx, ny, nz] = self.dims;
        Tensor::new(&[1, nz, ny, nx], self.data.iter().map(|&v| v as Real).collect())
            .expect("validated volume")
    }

    /// Builds a volume from a `[1, Z, Y, X]` (or `[Z, Y, X]`) tensor.
    pub fn from_tensor(t: &Tensor, spacing: Spacing) -> Result<Self> {
        let dims = match *t.shape() {
            [1, z, y, x] | [z, y, x] => [x, y, z],
            _ => return Err(Error::Dims(format!("expected a single-channel grid, got {:?}", t.shape()))),
        };
        Volume::new(dims, spacing, t.data().iter().map(|&v| v as f32).collect())
    }

    /// Min-max rescaling to `[0, 1]`; a constant volume maps to zeros.
    pub fn normalized(&self) -> Volume {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data.iter().map(|&v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data,
        }
    }
}

/// Dense displacement field `u(p)` in voxel units; channel 0/1/2 = x/y/z component.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl DisplacementField {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        validate_grid(dims, spacing)?;
        if data.len() != 3 * voxel_count(dims) {
            return Err(Error::Dims(format!(
                "field {dims:?} needs {} values (3 channels), got {}",
                3 * voxel_count(dims),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("field contains non-finite values".into()));
        }
        Ok(DisplacementField { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Result<Self> {
        DisplacementField::new(dims, spacing, vec![0.0; 3 * voxel_count(dims)])
    }

    /// Fills from `f(x, y, z) -> (u_x, u_y, u_z)`.
    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> [f32; 3]) -> Result<Self> {
        let [nx, ny, nz] = dims;
        let n = voxel_count(dims);
        let mut data = vec![0.0; 3 * n];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = (z * ny + y) * nx + x;
                    let u = f(x, y, z);
                    for c in 0..3 {
                        data[c * n + p] = u[c];
                    }
                }
            }
        }
        DisplacementField::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Component `c` (0 = x, 1 = y, 2 = z) at voxel `(x, y, z)`.
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        let [nx, ny, nz] = self.dims;
        self.data[((c * nz + z) * ny + y) * nx + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        let [nx, ny, nz] = self.dims;
        Tensor::new(&[3, nz, ny, nx], self.data.iter().map(|&v| v as Real).collect())
            .expect("validated field")
    }

    pub fn from_tensor(t: &Tensor, spacing: Spacing) -> Result<Self> {
        let dims = match *t.shape() {
            [3, z, y, x] => [x, y, z],
            _ => return Err(Error::Dims(format!("expected [3, Z, Y, X], got {:?}", t.shape()))),
        };
        DisplacementField::new(dims, spacing, t.data().iter().map(|&v| v as f32).collect())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Integer organ labels; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    dims: Dims,
    spacing: Spacing,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        validate_grid(dims, spacing)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::Dims(format!(
                "mask {dims:?} needs {} labels, got {}",
                voxel_count(dims),
                data.len()
            )));
        }
        Ok(LabelMask { dims, spacing, data })
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> u8) -> Result<Self> {
        let [nx, ny, nz] = dims;
        let mut data = Vec::with_capacity(voxel_count(dims));
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        LabelMask::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[(z * self.dims[1] + y) * self.dims[0] + x]
    }

    /// Sorted distinct nonzero labels.
    pub fn foreground_labels(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        self.data.iter().for_each(|&l| seen[l as usize] = true);
        (1..=255u8).filter(|&l| seen[l as usize]).collect()
    }

    /// `[K, Z, Y, X]` indicator tensor, one channel per requested label.
    pub fn one_hot(&self, labels: &[u8]) -> Tensor {
        let [nx, ny, nz] = self.dims;
        let n = voxel_count(self.dims);
        let mut data = vec![0.0; labels.len() * n];
        for (k, &label) in labels.iter().enumerate() {
            for (dst, &l) in data[k * n..(k + 1) * n].iter_mut().zip(&self.data) {
                if l == label {
                    *dst = 1.0;
                }
            }
        }
        Tensor::new(&[labels.len().max(1), nz, ny, nx], if labels.is_empty() { vec![0.0; n] } else { data })
            .expect("one-hot shape")
    }
}

pub fn voxel_to_mm(p: [f64; 3], spacing: Spacing) -> [f64; 3] {
    [p[0] * spacing[0], p[1] * spacing[1], p[2] * spacing[2]]
}

pub fn mm_to_voxel(p: [f64; 3], spacing: Spacing) -> [f64; 3] {
    [p[0] / spacing[0], p[1] / spacing[1], p[2] / spacing[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voxel_mm_conversions() {
        assert_eq!(voxel_to_mm([0.0; 3], [1.0, 2.0, 0.5]), [0.0; 3]);
        assert_eq!(voxel_to_mm([2.0, 3.0, 4.0], [1.0, 2.0, 0.5]), [2.0, 6.0, 2.0]);
        let s = [0.7, 1.3, 2.9];
        let p = [12.25, 3.5, 40.125];
        let back = voxel_to_mm(mm_to_voxel(p, s), s);
        for i in 0..3 {
            assert!((back[i] - p[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Volume::zeros([0, 2, 2], [1.0; 3]).is_err());
        assert!(Volume::zeros([2, 2, 2], [1.0, -1.0, 1.0]).is_err());
        assert!(Volume::new([1, 1, 1], [1.0; 3], vec![f32::NAN]).is_err());
        assert!(DisplacementField::new([2, 2, 2], [1.0; 3], vec![0.0; 8]).is_err());
    }

    #[test]
    fn tensor_layout_is_x_fastest() {
        let v = Volume::from_fn([3, 2, 2], [1.0; 3], |x, y, z| (x + 10 * y + 100 * z) as f32).unwrap();
        let t = v.to_tensor();
        assert_eq!(t.shape(), &[1, 2, 2, 3]);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[3], 10.0);
        assert_eq!(t.data()[6], 100.0);
        assert_eq!(Volume::from_tensor(&t, [1.0; 3]).unwrap(), v);
    }

    #[test]
    fn one_hot_channels() {
        let m = LabelMask::new([2, 1, 1], [1.0; 3], vec![0, 2]).unwrap();
        assert_eq!(m.foreground_labels(), vec![2]);
        let t = m.one_hot(&[2]);
        assert_eq!(t.data(), &[0.0, 1.0]);
    }
}
