//! Box masks and voxelwise mixing of images and label maps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::volume::{voxel_count, PatchSpec, Shape3};

/// Binary field that is 1 inside a single axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct CutMixMask {
    shape: Shape3,
    bbox: PatchSpec,
    data: Vec<bool>,
}

impl CutMixMask {
    /// Mask selecting `bbox` (clipped to the volume).
    pub fn from_box(shape: Shape3, bbox: PatchSpec) -> Self {
        let mut data = vec![false; voxel_count(shape)];
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data[(z * shape[1] + y) * shape[2] + x] = bbox.contains([z as i64, y as i64, x as i64]);
                }
            }
        }
        Self { shape, bbox, data }
    }

    /// The all-ones mask, under which mixing returns its first argument.
    pub fn ones(shape: Shape3) -> Self {
        Self::from_box(shape, PatchSpec { origin: [0; 3], size: shape })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            bbox: PatchSpec { origin: [0; 3], size: [1; 3] },
            data: vec![false; voxel_count(shape)],
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn bbox(&self) -> &PatchSpec {
        &self.bbox
    }

    pub fn values(&self) -> &[bool] {
        &self.data
    }

    pub fn fraction(&self) -> f64 {
        self.data.iter().filter(|&&m| m).count() as f64 / self.data.len() as f64
    }
}

/// Draws a target fraction `r ~ U[r_min, r_max]`, sizes the box as
/// `round(dim · r^(1/3))` per axis (clamped to `[1, dim]`) and places it
/// uniformly inside the volume.
pub fn make_cutmix_mask<R: Rng + ?Sized>(shape: Shape3, ratio_range: (f64, f64), rng: &mut R) -> Result<CutMixMask> {
    let (lo, hi) = ratio_range;
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cutmix ratio range ({lo}, {hi}) must satisfy 0 < r_min <= r_max < 1"
        )));
    }
    let n = voxel_count(shape);
    if n < 2 || ((hi * n as f64).floor() as usize) < ((lo * n as f64).ceil() as usize) {
        return Err(Error::DegenerateShape(format!(
            "no box in a {shape:?} volume covers a fraction in [{lo}, {hi}]"
        )));
    }
    let r = rng.random_range(lo..=hi);
    let side = r.cbrt();
    let size: Shape3 = std::array::from_fn(|a| ((shape[a] as f64 * side).round() as usize).clamp(1, shape[a]));
    let origin: [i64; 3] = std::array::from_fn(|a| rng.random_range(0..=(shape[a] - size[a])) as i64);
    Ok(CutMixMask::from_box(shape, PatchSpec { origin, size }))
}

/// Voxelwise selection: mask 1 takes `a`, mask 0 takes `b`. Fields may carry
/// several channels ahead of the spatial axes.
pub fn mix<T: Copy>(a: &[T], b: &[T], m: &CutMixMask) -> Result<Vec<T>> {
    let v = m.data.len();
    if a.len() != b.len() || !a.len().is_multiple_of(v) || a.is_empty() {
        return Err(Error::Shape(format!(
            "cannot mix fields of {} and {} values with a {}-voxel mask",
            a.len(),
            b.len(),
            v
        )));
    }
    Ok(a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (&x, &y))| if m.data[i % v] { x } else { y })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fraction_bounds_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sum = 0.0;
        for _ in 0..1000 {
            let m = make_cutmix_mask([32; 3], (0.25, 0.75), &mut rng).unwrap();
            let f = m.fraction();
            assert!((0.20..=0.80).contains(&f), "{f}");
            sum += f;
        }
        assert!((sum / 1000.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn box_is_inside_and_matches_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let m = make_cutmix_mask([7, 9, 11], (0.1, 0.9), &mut rng).unwrap();
            let b = m.bbox();
            for a in 0..3 {
                assert!(b.origin[a] >= 0 && b.origin[a] as usize + b.size[a] <= m.shape()[a]);
            }
            let ones = m.values().iter().filter(|&&v| v).count();
            assert_eq!(ones, b.voxel_count());
        }
    }

    #[test]
    fn invalid_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for r in [(0.0, 0.5), (0.6, 0.5), (0.2, 1.0)] {
            assert!(matches!(make_cutmix_mask([8; 3], r, &mut rng), Err(Error::InvalidArgument(_))));
        }
        assert!(matches!(
            make_cutmix_mask([1, 1, 1], (0.25, 0.75), &mut rng),
            Err(Error::DegenerateShape(_))
        ));
        assert!(matches!(
            make_cutmix_mask([1, 1, 2], (0.6, 0.7), &mut rng),
            Err(Error::DegenerateShape(_))
        ));
    }

    #[test]
    fn mix_identities() {
        let a: Vec<f32> = (0..64).map(|i| i as f32).collect();
        let b: Vec<f32> = (0..64).map(|i| -(i as f32)).collect();
        assert_eq!(mix(&a, &b, &CutMixMask::ones([4; 3])).unwrap(), a);
        assert_eq!(mix(&a, &b, &CutMixMask::zeros([4; 3])).unwrap(), b);
        assert!(mix(&a, &b[..63], &CutMixMask::ones([4; 3])).is_err());
    }
}
