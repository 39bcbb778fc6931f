//! Single-modality 3D volumes.

use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// One 3D image: grid extents, voxel spacing in millimetres, and intensities
/// in `[-1, 1]`, stored x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        let numel = extents[0] * extents[1] * extents[2];
        if extents.iter().any(|&e| e == 0) {
            return Err(arg_err!("volume extents {extents:?} must be positive"));
        }
        if data.len() != numel {
            return Err(shape_err!(
                "extents {extents:?} imply {numel} voxels, got {}",
                data.len()
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!("volume payload")));
        }
        Ok(Self {
            extents,
            spacing,
            data,
        })
    }

    pub fn zeros(extents: [usize; 3], spacing: [f32; 3]) -> Self {
        Self {
            extents,
            spacing,
            data: alloc::vec![0.0; extents[0] * extents[1] * extents[2]],
        }
    }

    /// Extents as (x, y, z) counts.
    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.extents[0] * (y + self.extents[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Tensor view shaped `[1, 1, dz, dy, dx]` (x fastest).
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(
            &[1, 1, self.extents[2], self.extents[1], self.extents[0]],
            self.data.clone(),
        )
        .expect("volume numel")
    }

    /// Volume from a `[1, 1, dz, dy, dx]` tensor, clamped to `[-1, 1]`.
    pub fn from_tensor(t: &Tensor<f32>, spacing: [f32; 3]) -> Result<Self> {
        let s = t.shape();
        if s.len() != 5 || s[0] != 1 || s[1] != 1 {
            return Err(shape_err!("expected [1,1,dz,dy,dx], got {s:?}"));
        }
        let clamped = t.clamp(-1.0, 1.0);
        Self::new([s[4], s[3], s[2]], spacing, clamped.data().to_vec())
    }

    /// Copies the sub-box starting at `origin` with the given extents.
    pub fn crop(&self, origin: [usize; 3], extents: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if origin[a] + extents[a] > self.extents[a] {
                return Err(arg_err!(
                    "crop {origin:?}+{extents:?} exceeds volume {:?}",
                    self.extents
                ));
            }
        }
        let mut data = Vec::with_capacity(extents[0] * extents[1] * extents[2]);
        for z in 0..extents[2] {
            for y in 0..extents[1] {
                let start = self.index(origin[0], origin[1] + y, origin[2] + z);
                data.extend_from_slice(&self.data[start..start + extents[0]]);
            }
        }
        Self::new(extents, self.spacing, data)
    }
}

/// Affine intensity map taking `[lo, hi]` to `[-1, 1]`, clamped.
pub fn normalize_volume(raw: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(hi > lo) {
        return Err(arg_err!("normalization bounds lo {lo} >= hi {hi}"));
    }
    let scale = 2.0 / (hi - lo);
    let data = raw
        .data()
        .iter()
        .map(|&v| ((v - lo) * scale - 1.0).clamp(-1.0, 1.0))
        .collect();
    Volume::new(raw.extents(), raw.spacing(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let v = Volume::new([3, 1, 1], [1.0; 3], vec![10.0, 20.0, 15.0]).unwrap();
        // raw values outside [-1,1] are allowed pre-normalization only via new()
        // with finite data; normalize maps endpoints exactly
        let n = normalize_volume(&v, 10.0, 20.0).unwrap();
        assert_eq!(n.data(), &[-1.0, 1.0, 0.0]);
    }

    #[test]
    fn normalize_identity_on_already_normalized() {
        let v = Volume::new([2, 2, 1], [1.0; 3], vec![-1.0, -0.25, 0.5, 1.0]).unwrap();
        let n = normalize_volume(&v, -1.0, 1.0).unwrap();
        assert_eq!(n.data(), v.data());
    }

    #[test]
    fn normalize_rejects_bad_range() {
        let v = Volume::zeros([2, 2, 2], [1.0; 3]);
        assert!(normalize_volume(&v, 1.0, 1.0).is_err());
        assert!(normalize_volume(&v, 2.0, 1.0).is_err());
    }

    #[test]
    fn tensor_roundtrip_preserves_layout() {
        let v = Volume::new([2, 3, 2], [1.0, 1.0, 6.0], (0..12).map(|i| i as f32 * 0.05).collect())
            .unwrap();
        let t = v.to_tensor();
        assert_eq!(t.shape(), &[1, 1, 2, 3, 2]);
        let back = Volume::from_tensor(&t, v.spacing()).unwrap();
        assert_eq!(back, v);
        // x is fastest: consecutive data entries step x
        assert_eq!(v.at(0, 0, 0), v.data()[0]);
        assert_eq!(v.at(1, 0, 0), v.data()[1]);
        assert_eq!(v.at(0, 1, 0), v.data()[2]);
    }

    #[test]
    fn crop_extracts_expected_box() {
        let v = Volume::new([4, 4, 2], [1.0; 3], (0..32).map(|i| i as f32 / 100.0).collect())
            .unwrap();
        let c = v.crop([1, 2, 0], [2, 2, 2]).unwrap();
        assert_eq!(c.extents(), [2, 2, 2]);
        assert_eq!(c.at(0, 0, 0), v.at(1, 2, 0));
        assert_eq!(c.at(1, 1, 1), v.at(2, 3, 1));
        assert!(v.crop([3, 0, 0], [2, 1, 1]).is_err());
    }
}
