//! Volumetric data model and nnU-Net-style preprocessing.
//!
//! Voxels are stored in C order with depth outermost: the linear index of
//! `(z, y, x)` in a volume of shape `(D, W, H)` is `(z * W + y) * H + x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Shape3 = [usize; 3];
pub type Spacing3 = [f64; 3];

#[inline]
pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[inline]
pub(crate) fn linear_index(shape: Shape3, z: usize, y: usize, x: usize) -> usize {
    (z * shape[1] + y) * shape[2] + x
}

fn check_geometry(shape: Shape3, spacing: Spacing3) -> Result<()> {
    if shape.iter().any(|&s| s == 0) {
        return Err(Error::Shape(format!("shape entries must be >= 1, got {shape:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "spacing entries must be positive, got {spacing:?}"
        )));
    }
    Ok(())
}

/// A 3D scalar image with physical voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: Shape3,
    spacing: Spacing3,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape3, spacing: Spacing3, voxels: Vec<f32>) -> Result<Self> {
        check_geometry(shape, spacing)?;
        if voxels.len() != voxel_count(shape) {
            return Err(Error::Shape(format!(
                "voxel count {} does not match shape {shape:?}",
                voxels.len()
            )));
        }
        Ok(Self {
            shape,
            spacing,
            voxels,
        })
    }

    pub fn filled(shape: Shape3, spacing: Spacing3, value: f32) -> Result<Self> {
        Self::new(shape, spacing, vec![value; voxel_count(shape)])
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> Spacing3 {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[linear_index(self.shape, z, y, x)]
    }
}

/// Integer class field; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    shape: Shape3,
    spacing: Spacing3,
    num_classes: u8,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(shape: Shape3, spacing: Spacing3, num_classes: u8, labels: Vec<u8>) -> Result<Self> {
        check_geometry(shape, spacing)?;
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        if labels.len() != voxel_count(shape) {
            return Err(Error::Shape(format!(
                "label count {} does not match shape {shape:?}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "class id {bad} outside [0, {}]",
                num_classes - 1
            )));
        }
        Ok(Self {
            shape,
            spacing,
            num_classes,
            labels,
        })
    }

    pub fn background(shape: Shape3, spacing: Spacing3, num_classes: u8) -> Result<Self> {
        Self::new(shape, spacing, num_classes, vec![0; voxel_count(shape)])
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> Spacing3 {
        self.spacing
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[linear_index(self.shape, z, y, x)]
    }

    /// Voxel count per class id.
    pub fn histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes as usize];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Reinterprets the labels as an intensity volume (used for nearest resampling).
    pub(crate) fn as_volume(&self) -> Volume {
        Volume {
            shape: self.shape,
            spacing: self.spacing,
            voxels: self.labels.iter().map(|&l| l as f32).collect(),
        }
    }
}

/// A box in voxel coordinates. `origin` may be negative or extend past the
/// volume; out-of-bounds voxels are padded on extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchSpec {
    pub origin: [i64; 3],
    pub size: Shape3,
}

impl PatchSpec {
    pub fn new(origin: [i64; 3], size: Shape3) -> Result<Self> {
        if size.iter().any(|&s| s == 0) {
            return Err(Error::Shape(format!("patch size entries must be >= 1, got {size:?}")));
        }
        Ok(Self { origin, size })
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] < self.origin[a] + self.size[a] as i64)
    }

    pub fn voxel_count(&self) -> usize {
        voxel_count(self.size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Linear,
    Nearest,
}

/// Output grid size when moving from `spacing` to `target`.
pub fn resampled_shape(shape: Shape3, spacing: Spacing3, target: Spacing3) -> Shape3 {
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = ((shape[a] as f64 * spacing[a] / target[a]).round() as usize).max(1);
    }
    out
}

/// Per-axis sample positions in source voxel coordinates, half-voxel centered.
fn source_coords(n_in: usize, n_out: usize) -> Vec<f64> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64))
        .collect()
}

fn resample_grid(
    src: &[f32],
    shape: Shape3,
    out_shape: Shape3,
    mode: ResampleMode,
) -> Vec<f32> {
    let cz = source_coords(shape[0], out_shape[0]);
    let cy = source_coords(shape[1], out_shape[1]);
    let cx = source_coords(shape[2], out_shape[2]);
    let mut out = Vec::with_capacity(voxel_count(out_shape));
    match mode {
        ResampleMode::Nearest => {
            let near = |c: &[f64]| -> Vec<usize> { c.iter().map(|v| v.round() as usize).collect() };
            let (nz, ny, nx) = (near(&cz), near(&cy), near(&cx));
            for &z in &nz {
                for &y in &ny {
                    let row = linear_index(shape, z, y, 0);
                    out.extend(nx.iter().map(|&x| src[row + x]));
                }
            }
        }
        ResampleMode::Linear => {
            // (lower index, upper index, fraction) per output coordinate
            let taps = |c: &[f64], n: usize| -> Vec<(usize, usize, f32)> {
                c.iter()
                    .map(|&v| {
                        let lo = v.floor() as usize;
                        let hi = (lo + 1).min(n - 1);
                        (lo, hi, (v - lo as f64) as f32)
                    })
                    .collect()
            };
            let (tz, ty, tx) = (taps(&cz, shape[0]), taps(&cy, shape[1]), taps(&cx, shape[2]));
            let lerp = |a: f32, b: f32, t: f32| a + t * (b - a);
            for &(z0, z1, fz) in &tz {
                for &(y0, y1, fy) in &ty {
                    let r00 = linear_index(shape, z0, y0, 0);
                    let r01 = linear_index(shape, z0, y1, 0);
                    let r10 = linear_index(shape, z1, y0, 0);
                    let r11 = linear_index(shape, z1, y1, 0);
                    for &(x0, x1, fx) in &tx {
                        let c00 = lerp(src[r00 + x0], src[r00 + x1], fx);
                        let c01 = lerp(src[r01 + x0], src[r01 + x1], fx);
                        let c10 = lerp(src[r10 + x0], src[r10 + x1], fx);
                        let c11 = lerp(src[r11 + x0], src[r11 + x1], fx);
                        let c0 = lerp(c00, c01, fy);
                        let c1 = lerp(c10, c11, fy);
                        out.push(lerp(c0, c1, fz));
                    }
                }
            }
        }
    }
    out
}

fn check_target(target: Spacing3) -> Result<()> {
    if target.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target spacing entries must be positive, got {target:?}"
        )));
    }
    Ok(())
}

/// Resamples an image onto the grid implied by `target` spacing.
pub fn resample(vol: &Volume, target: Spacing3, mode: ResampleMode) -> Result<Volume> {
    check_target(target)?;
    let out_shape = resampled_shape(vol.shape, vol.spacing, target);
    if out_shape == vol.shape {
        // Identical grids map every output coordinate onto a source voxel.
        return Volume::new(out_shape, target, vol.voxels.clone());
    }
    let voxels = resample_grid(&vol.voxels, vol.shape, out_shape, mode);
    Volume::new(out_shape, target, voxels)
}

/// Resamples a label field with nearest-neighbour lookup.
pub fn resample_labels(labels: &LabelVolume, target: Spacing3) -> Result<LabelVolume> {
    check_target(target)?;
    let out_shape = resampled_shape(labels.shape, labels.spacing, target);
    resample_labels_to_shape(labels, out_shape, target)
}

/// Nearest-neighbour resampling onto an explicit grid (used to return
/// predictions to a native grid whose shape is known).
pub fn resample_labels_to_shape(
    labels: &LabelVolume,
    out_shape: Shape3,
    out_spacing: Spacing3,
) -> Result<LabelVolume> {
    check_target(out_spacing)?;
    if out_shape == labels.shape {
        return LabelVolume::new(out_shape, out_spacing, labels.num_classes, labels.labels.clone());
    }
    let as_f = labels.as_volume();
    let out = resample_grid(&as_f.voxels, labels.shape, out_shape, ResampleMode::Nearest);
    LabelVolume::new(
        out_shape,
        out_spacing,
        labels.num_classes,
        out.into_iter().map(|v| v as u8).collect(),
    )
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f32], pct: f64) -> f32 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = pct / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let t = rank - lo as f64;
    (sorted[lo] as f64 + t * (sorted[hi] as f64 - sorted[lo] as f64)) as f32
}

/// Clips to the given percentiles of the input, then z-scores over the
/// clipped volume. Constant volumes map to zeros.
pub fn normalize_intensity(vol: &Volume, clip_lo_pct: f64, clip_hi_pct: f64) -> Result<Volume> {
    if !(0.0 <= clip_lo_pct && clip_lo_pct < clip_hi_pct && clip_hi_pct <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= clip_lo ({clip_lo_pct}) < clip_hi ({clip_hi_pct}) <= 100"
        )));
    }
    let mut sorted = vol.voxels.clone();
    sorted.sort_by(f32::total_cmp);
    let lo = percentile(&sorted, clip_lo_pct);
    let hi = percentile(&sorted, clip_hi_pct);
    let clipped: Vec<f32> = vol.voxels.iter().map(|v| v.clamp(lo, hi)).collect();
    let n = clipped.len() as f64;
    let mean = clipped.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = clipped.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let voxels = if var <= 0.0 {
        vec![0.0; clipped.len()]
    } else {
        let std = var.sqrt();
        clipped.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
    };
    Volume::new(vol.shape, vol.spacing, voxels)
}

/// Clip bounds and z-score parameters fixed for a whole dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityStats {
    pub clip_lo: f32,
    pub clip_hi: f32,
    pub mean: f64,
    pub std: f64,
}

impl IntensityStats {
    /// Percentiles over the pooled voxels of `vols`, then mean and standard
    /// deviation of the pooled, clipped voxels.
    pub fn from_volumes<'a>(vols: impl IntoIterator<Item = &'a Volume>, clip_lo_pct: f64, clip_hi_pct: f64) -> Result<Self> {
        if !(0.0 <= clip_lo_pct && clip_lo_pct < clip_hi_pct && clip_hi_pct <= 100.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= clip_lo ({clip_lo_pct}) < clip_hi ({clip_hi_pct}) <= 100"
            )));
        }
        let mut pooled: Vec<f32> = vols.into_iter().flat_map(|v| v.voxels.iter().copied()).collect();
        if pooled.is_empty() {
            return Err(Error::InvalidArgument("intensity statistics need at least one voxel".into()));
        }
        pooled.sort_by(f32::total_cmp);
        let clip_lo = percentile(&pooled, clip_lo_pct);
        let clip_hi = percentile(&pooled, clip_hi_pct);
        let n = pooled.len() as f64;
        let mean = pooled.iter().map(|&v| v.clamp(clip_lo, clip_hi) as f64).sum::<f64>() / n;
        let var = pooled.iter().map(|&v| (v.clamp(clip_lo, clip_hi) as f64 - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { clip_lo, clip_hi, mean, std: var.sqrt() })
    }

    /// Clips and z-scores with the stored parameters; zero spread maps to zeros.
    pub fn apply(&self, vol: &Volume) -> Result<Volume> {
        let voxels = if self.std > 0.0 {
            vol.voxels
                .iter()
                .map(|&v| ((v.clamp(self.clip_lo, self.clip_hi) as f64 - self.mean) / self.std) as f32)
                .collect()
        } else {
            vec![0.0; vol.voxels.len()]
        };
        Volume::new(vol.shape, vol.spacing, voxels)
    }
}

/// Copies a box out of `src` (shape `shape`), padding out-of-bounds voxels.
pub(crate) fn extract_box<T: Copy>(src: &[T], shape: Shape3, spec: &PatchSpec, pad: T) -> Vec<T> {
    let size = spec.size;
    let mut out = vec![pad; voxel_count(size)];
    // in-bounds range along each axis, in patch coordinates
    let mut range = [(0usize, 0usize); 3];
    for a in 0..3 {
        let lo = (-spec.origin[a]).clamp(0, size[a] as i64) as usize;
        let hi = (shape[a] as i64 - spec.origin[a]).clamp(0, size[a] as i64) as usize;
        if lo >= hi {
            return out;
        }
        range[a] = (lo, hi);
    }
    let (x0, x1) = range[2];
    for pz in range[0].0..range[0].1 {
        let sz = (pz as i64 + spec.origin[0]) as usize;
        for py in range[1].0..range[1].1 {
            let sy = (py as i64 + spec.origin[1]) as usize;
            let sx0 = (x0 as i64 + spec.origin[2]) as usize;
            let s = linear_index(shape, sz, sy, sx0);
            let d = linear_index(size, pz, py, x0);
            out[d..d + (x1 - x0)].copy_from_slice(&src[s..s + (x1 - x0)]);
        }
    }
    out
}

/// Writes a patch back into `dst`, ignoring out-of-bounds patch voxels.
pub(crate) fn insert_box<T: Copy>(dst: &mut [T], shape: Shape3, spec: &PatchSpec, patch: &[T]) {
    let size = spec.size;
    let mut range = [(0usize, 0usize); 3];
    for a in 0..3 {
        let lo = (-spec.origin[a]).clamp(0, size[a] as i64) as usize;
        let hi = (shape[a] as i64 - spec.origin[a]).clamp(0, size[a] as i64) as usize;
        if lo >= hi {
            return;
        }
        range[a] = (lo, hi);
    }
    let (x0, x1) = range[2];
    for pz in range[0].0..range[0].1 {
        let sz = (pz as i64 + spec.origin[0]) as usize;
        for py in range[1].0..range[1].1 {
            let sy = (py as i64 + spec.origin[1]) as usize;
            let sx0 = (x0 as i64 + spec.origin[2]) as usize;
            let d = linear_index(shape, sz, sy, sx0);
            let s = linear_index(size, pz, py, x0);
            dst[d..d + (x1 - x0)].copy_from_slice(&patch[s..s + (x1 - x0)]);
        }
    }
}

pub fn extract_patch(vol: &Volume, spec: &PatchSpec, pad_value: f32) -> Volume {
    Volume {
        shape: spec.size,
        spacing: vol.spacing,
        voxels: extract_box(&vol.voxels, vol.shape, spec, pad_value),
    }
}

/// Label counterpart of [`extract_patch`]; padding is background.
pub fn extract_label_patch(labels: &LabelVolume, spec: &PatchSpec) -> LabelVolume {
    LabelVolume {
        shape: spec.size,
        spacing: labels.spacing,
        num_classes: labels.num_classes,
        labels: extract_box(&labels.labels, labels.shape, spec, 0u8),
    }
}

/// Writes the in-bounds part of `patch` into `vol` at `spec`.
pub fn insert_patch(vol: &mut Volume, spec: &PatchSpec, patch: &Volume) -> Result<()> {
    if patch.shape != spec.size {
        return Err(Error::Shape(format!(
            "patch shape {:?} does not match spec size {:?}",
            patch.shape, spec.size
        )));
    }
    insert_box(&mut vol.voxels, vol.shape, spec, &patch.voxels);
    Ok(())
}

/// Reverses the voxel order along `axis` of a field with `channels` leading planes.
pub fn flip_axis<T: Copy>(data: &[T], channels: usize, shape: Shape3, axis: usize) -> Vec<T> {
    let v = voxel_count(shape);
    let mut out = Vec::with_capacity(data.len());
    for c in 0..channels {
        let src = &data[c * v..(c + 1) * v];
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                let (sz, sy) = match axis {
                    0 => (shape[0] - 1 - z, y),
                    1 => (z, shape[1] - 1 - y),
                    _ => (z, y),
                };
                let row = &src[linear_index(shape, sz, sy, 0)..][..shape[2]];
                if axis == 2 {
                    out.extend(row.iter().rev());
                } else {
                    out.extend_from_slice(row);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape3, spacing: Spacing3) -> Volume {
        let n = voxel_count(shape);
        Volume::new(shape, spacing, (0..n).map(|i| i as f32 * 0.5 - 3.0).collect()).unwrap()
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Volume::new([0, 2, 2], [1.0; 3], vec![]).is_err());
        assert!(Volume::new([2, 2, 2], [1.0, 0.0, 1.0], vec![0.0; 8]).is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(LabelVolume::new([1, 1, 2], [1.0; 3], 2, vec![0, 2]).is_err());
        assert!(LabelVolume::new([1, 1, 2], [1.0; 3], 1, vec![0, 0]).is_err());
    }

    #[test]
    fn resample_shape_formula() {
        let v = Volume::filled([10, 10, 10], [5.0, 3.0, 3.0], 1.0).unwrap();
        let r = resample(&v, [2.5, 1.5, 1.5], ResampleMode::Linear).unwrap();
        assert_eq!(r.shape(), [20, 20, 20]);
        assert_eq!(r.spacing(), [2.5, 1.5, 1.5]);
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let v = ramp([4, 5, 6], [1.0, 2.0, 0.5]);
        let r = resample(&v, [1.0, 2.0, 0.5], ResampleMode::Linear).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn resample_constant_stays_constant() {
        let v = Volume::filled([7, 5, 3], [1.3, 0.7, 2.0], 4.25).unwrap();
        for target in [[0.5, 0.5, 0.5], [3.0, 1.0, 0.9], [1.0, 2.0, 4.0]] {
            for mode in [ResampleMode::Linear, ResampleMode::Nearest] {
                let r = resample(&v, target, mode).unwrap();
                assert!(r.voxels().iter().all(|&x| x == 4.25));
            }
        }
    }

    #[test]
    fn resample_rejects_nonpositive_target() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 0.0).unwrap();
        assert!(matches!(
            resample(&v, [1.0, 0.0, 1.0], ResampleMode::Linear),
            Err(Error::InvalidArgument(_))
        ));
        assert!(resample(&v, [1.0, -2.0, 1.0], ResampleMode::Nearest).is_err());
    }

    #[test]
    fn resample_is_idempotent_at_fixed_spacing() {
        let v = ramp([6, 7, 8], [1.0, 1.0, 1.0]);
        let once = resample(&v, [0.7, 1.6, 2.2], ResampleMode::Linear).unwrap();
        let twice = resample(&once, [0.7, 1.6, 2.2], ResampleMode::Linear).unwrap();
        assert_eq!(once.shape(), twice.shape());
        for (a, b) in once.voxels().iter().zip(twice.voxels()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn linear_upsampling_of_ramp_is_linear_in_interior() {
        // x-ramp 0..4 upsampled by 2 along x: half-voxel centres give 0.25 steps
        let v = Volume::new([1, 1, 4], [1.0; 3], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = resample(&v, [1.0, 1.0, 0.5], ResampleMode::Linear).unwrap();
        let expected = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        for (a, b) in r.voxels().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{:?}", r.voxels());
        }
    }

    #[test]
    fn nearest_labels_keep_class_set() {
        let labels: Vec<u8> = (0..60).map(|i| [0u8, 2, 3][i % 3]).collect();
        let l = LabelVolume::new([3, 4, 5], [1.0; 3], 5, labels).unwrap();
        let r = resample_labels(&l, [0.6, 1.7, 0.8]).unwrap();
        assert!(r.labels().iter().all(|&c| c == 0 || c == 2 || c == 3));
    }

    #[test]
    fn normalize_constant_is_zero() {
        let v = Volume::filled([3, 3, 3], [1.0; 3], 7.0).unwrap();
        let n = normalize_intensity(&v, 0.5, 99.5).unwrap();
        assert!(n.voxels().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_rejects_bad_percentiles() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 1.0).unwrap();
        assert!(normalize_intensity(&v, 50.0, 50.0).is_err());
        assert!(normalize_intensity(&v, -1.0, 50.0).is_err());
        assert!(normalize_intensity(&v, 1.0, 101.0).is_err());
    }

    #[test]
    fn normalize_clips_extremes() {
        // 10^3 ramp with one outlier at each end
        let n = 1000;
        let voxels: Vec<f32> = (0..n)
            .map(|i| match i {
                0 => -1000.0,
                999 => 1000.0,
                k => (k % 100) as f32 - 50.0,
            })
            .collect();
        let v = Volume::new([10, 10, 10], [1.0; 3], voxels.clone()).unwrap();
        let out = normalize_intensity(&v, 0.5, 99.5).unwrap();

        // oracle: exhaustive sort and explicit interpolation
        let mut sorted = voxels.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = 0.995 * 999.0;
        let (lo, t) = (rank as usize, rank - (rank as usize) as f64);
        let p995 = sorted[lo] as f64 + t * (sorted[lo + 1] as f64 - sorted[lo] as f64);
        let rank = 0.005 * 999.0;
        let (lo, t) = (rank as usize, rank - (rank as usize) as f64);
        let p005 = sorted[lo] as f64 + t * (sorted[lo + 1] as f64 - sorted[lo] as f64);
        let clipped: Vec<f64> = voxels.iter().map(|&x| (x as f64).clamp(p005, p995)).collect();
        let mean = clipped.iter().sum::<f64>() / 1000.0;
        let std = (clipped.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 1000.0).sqrt();

        let max = out.voxels().iter().cloned().fold(f32::MIN, f32::max) as f64;
        assert!((max - (p995 - mean) / std).abs() < 1e-4, "{max}");
        assert!(p995 < 1000.0);
        let m = out.voxels().iter().map(|&x| x as f64).sum::<f64>() / 1000.0;
        let s = (out.voxels().iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / 1000.0).sqrt();
        assert!(m.abs() < 1e-5 && (s - 1.0).abs() < 1e-5);
    }

    #[test]
    fn interior_patch_is_subarray() {
        let v = ramp([5, 6, 7], [1.0; 3]);
        let spec = PatchSpec::new([1, 2, 3], [2, 3, 4]).unwrap();
        let p = extract_patch(&v, &spec, -99.0);
        for z in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(p.get(z, y, x), v.get(z + 1, y + 2, x + 3));
                }
            }
        }
    }

    #[test]
    fn negative_origin_pads() {
        let v = ramp([4, 4, 4], [1.0; 3]);
        let spec = PatchSpec::new([-2, 0, 0], [4, 4, 4]).unwrap();
        let p = extract_patch(&v, &spec, -7.5);
        for z in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(p.get(z, y, x), -7.5);
                }
            }
        }
        assert_eq!(p.get(2, 1, 1), v.get(0, 1, 1));
    }

    #[test]
    fn whole_volume_patch_is_identity() {
        let v = ramp([3, 4, 5], [0.5, 1.0, 2.0]);
        let p = extract_patch(&v, &PatchSpec::new([0, 0, 0], [3, 4, 5]).unwrap(), 0.0);
        assert_eq!(p, v);
    }

    #[test]
    fn fully_outside_patch_is_padding() {
        let v = ramp([3, 3, 3], [1.0; 3]);
        let p = extract_patch(&v, &PatchSpec::new([10, 0, 0], [2, 2, 2]).unwrap(), 1.5);
        assert!(p.voxels().iter().all(|&x| x == 1.5));
    }

    #[test]
    fn flip_twice_is_identity() {
        let data: Vec<u32> = (0..2 * 24).collect();
        for axis in 0..3 {
            let f = flip_axis(&data, 2, [2, 3, 4], axis);
            assert_ne!(f, data);
            assert_eq!(flip_axis(&f, 2, [2, 3, 4], axis), data);
        }
    }
}
