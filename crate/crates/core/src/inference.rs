//! Whole-volume prediction by sliding-window tiling, with Gaussian or uniform
//! blending, optional flip test-time augmentation, and a label-only fusion
//! mode that never holds per-class probabilities for the whole volume.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{ProbField, Segmenter, Tensor};
use crate::volume::{
    extract_patch, flip_axis, normalize_intensity, IntensityStats, resample, resample_labels_to_shape, voxel_count, LabelVolume,
    PatchSpec, ResampleMode, Shape3, Spacing3, Volume,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtaMode {
    None,
    /// Identity plus one pass per single-axis flip.
    Flips3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accumulation {
    FullProb,
    LabelOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Gaussian,
    Uniform,
}

impl FromStr for TtaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TtaMode::None),
            "flips3" => Ok(TtaMode::Flips3),
            _ => Err(Error::Config(format!("unknown tta mode {s:?} (expected none|flips3)"))),
        }
    }
}

impl FromStr for Accumulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_prob" => Ok(Accumulation::FullProb),
            "label_only" => Ok(Accumulation::LabelOnly),
            _ => Err(Error::Config(format!("unknown fusion {s:?} (expected full_prob|label_only)"))),
        }
    }
}

impl FromStr for Weighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Weighting::Gaussian),
            "uniform" => Ok(Weighting::Uniform),
            _ => Err(Error::Config(format!("unknown weighting {s:?} (expected gaussian|uniform)"))),
        }
    }
}

/// How image intensities are standardized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    /// Clip and z-score each volume with its own statistics.
    PerVolume,
    /// Statistics pooled over the labeled training images; resolved to
    /// `Fixed` when the training data is loaded.
    Dataset,
    Fixed(IntensityStats),
}

impl FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "volume" => Ok(Normalization::PerVolume),
            "dataset" => Ok(Normalization::Dataset),
            _ => Err(Error::Config(format!("unknown normalization {s:?} (expected volume|dataset)"))),
        }
    }
}

/// Intensity preprocessing shared by training and inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocess {
    pub target_spacing: Option<Spacing3>,
    pub clip_lo_pct: f64,
    pub clip_hi_pct: f64,
    pub normalization: Normalization,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            target_spacing: None,
            clip_lo_pct: 0.5,
            clip_hi_pct: 99.5,
            normalization: Normalization::PerVolume,
        }
    }
}

impl Preprocess {
    fn resample(&self, vol: &Volume) -> Result<Volume> {
        match self.target_spacing {
            Some(t) => resample(vol, t, ResampleMode::Linear),
            None => Ok(vol.clone()),
        }
    }

    /// Replaces `Dataset` normalization by statistics of `training_images`.
    pub fn resolve<'a>(&self, training_images: impl IntoIterator<Item = &'a Volume>) -> Result<Self> {
        if self.normalization != Normalization::Dataset {
            return Ok(self.clone());
        }
        let resampled = training_images.into_iter().map(|v| self.resample(v)).collect::<Result<Vec<_>>>()?;
        let stats = IntensityStats::from_volumes(&resampled, self.clip_lo_pct, self.clip_hi_pct)?;
        Ok(Self {
            normalization: Normalization::Fixed(stats),
            ..self.clone()
        })
    }

    pub fn image(&self, vol: &Volume) -> Result<Volume> {
        let vol = self.resample(vol)?;
        match &self.normalization {
            Normalization::PerVolume => normalize_intensity(&vol, self.clip_lo_pct, self.clip_hi_pct),
            Normalization::Fixed(stats) => stats.apply(&vol),
            Normalization::Dataset => Err(Error::Config(
                "dataset normalization has no statistics yet; resolve it on the training images".into(),
            )),
        }
    }

    pub fn labels(&self, labels: &LabelVolume) -> Result<LabelVolume> {
        match self.target_spacing {
            Some(t) => crate::volume::resample_labels(labels, t),
            None => Ok(labels.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceConfig {
    pub patch_size: Shape3,
    pub overlap: f64,
    pub gaussian_sigma_scale: f64,
    pub weighting: Weighting,
    pub tta: TtaMode,
    pub accumulation: Accumulation,
    pub preprocess: Preprocess,
    /// Map predictions back onto the input grid when resampling was applied.
    pub resample_back: bool,
    /// Largest working volume (voxels) accepted in full-probability mode.
    pub max_full_prob_voxels: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            patch_size: [16, 16, 16],
            overlap: 0.5,
            gaussian_sigma_scale: 0.125,
            weighting: Weighting::Gaussian,
            tta: TtaMode::None,
            accumulation: Accumulation::FullProb,
            preprocess: Preprocess::default(),
            resample_back: true,
            max_full_prob_voxels: 512 * 512 * 512,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.9).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap must be in [0, 0.9], got {}", self.overlap)));
        }
        if !(self.gaussian_sigma_scale > 0.0) {
            return Err(Error::Config("gaussian_sigma_scale must be > 0".into()));
        }
        if self.patch_size.contains(&0) {
            return Err(Error::Config("patch_size entries must be >= 1".into()));
        }
        Ok(())
    }
}

fn axis_positions(dim: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if patch >= dim {
        return vec![0];
    }
    let step = ((patch as f64 * (1.0 - overlap)).ceil() as usize).max(1);
    let mut out = vec![0];
    let mut pos = 0;
    while pos + patch < dim {
        pos += step;
        if pos + patch >= dim {
            out.push(dim - patch);
            break;
        }
        out.push(pos);
    }
    out
}

/// Tile origins covering `vol_shape`, lexicographically ordered. Axes shorter
/// than the patch get a single position at 0 (the caller pads).
pub fn tile_positions(vol_shape: Shape3, patch_size: Shape3, overlap: f64) -> Vec<PatchSpec> {
    let axes: Vec<Vec<usize>> = (0..3).map(|a| axis_positions(vol_shape[a], patch_size[a], overlap)).collect();
    let mut out = Vec::with_capacity(axes.iter().map(Vec::len).product());
    for &z in &axes[0] {
        for &y in &axes[1] {
            for &x in &axes[2] {
                out.push(PatchSpec {
                    origin: [z as i64, y as i64, x as i64],
                    size: patch_size,
                });
            }
        }
    }
    out
}

/// Separable Gaussian centred in the patch with σ = `sigma_scale`·length per
/// axis, scaled to a maximum of 1 and floored at 1e-6.
pub fn gaussian_weights(patch_size: Shape3, sigma_scale: f64) -> Result<Vec<f32>> {
    if !(sigma_scale > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_scale must be > 0, got {sigma_scale}")));
    }
    let axis = |n: usize| -> Vec<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let s = sigma_scale * n as f64;
        (0..n).map(|i| (-(i as f64 - c).powi(2) / (2.0 * s * s)).exp()).collect()
    };
    let (gz, gy, gx) = (axis(patch_size[0]), axis(patch_size[1]), axis(patch_size[2]));
    let mut w = Vec::with_capacity(voxel_count(patch_size));
    for a in &gz {
        for b in &gy {
            for c in &gx {
                w.push(a * b * c);
            }
        }
    }
    let max = w.iter().cloned().fold(0.0, f64::max);
    Ok(w.into_iter().map(|v| ((v / max) as f32).max(1e-6)).collect())
}

fn patch_weights(cfg: &InferenceConfig) -> Result<Vec<f32>> {
    match cfg.weighting {
        Weighting::Gaussian => gaussian_weights(cfg.patch_size, cfg.gaussian_sigma_scale),
        Weighting::Uniform => Ok(vec![1.0; voxel_count(cfg.patch_size)]),
    }
}

/// Prediction for one patch, averaged over flips when `mode` asks for it.
pub fn tta_predict(seg: &dyn Segmenter, patch: &Tensor, mode: TtaMode) -> Result<ProbField> {
    let mut acc = seg.predict(patch)?;
    if mode == TtaMode::None {
        return Ok(acc);
    }
    for axis in 0..3 {
        let flipped = Tensor::from_data(patch.channels, patch.shape, flip_axis(&patch.data, patch.channels, patch.shape, axis));
        let p = seg.predict(&flipped)?;
        let back = flip_axis(&p.data, p.num_classes, p.shape, axis);
        acc.data.iter_mut().zip(back).for_each(|(a, b)| *a += b);
    }
    let (c, v) = (acc.num_classes, acc.voxels());
    for i in 0..v {
        let s: f32 = (0..c).map(|k| acc.data[k * v + i]).sum();
        for k in 0..c {
            acc.data[k * v + i] /= s;
        }
    }
    Ok(acc)
}

/// Whole-volume accumulation buffers.
#[derive(Debug, Clone)]
pub enum FusionState {
    FullProb {
        num_classes: usize,
        acc: Vec<f32>,
        weight: Vec<f32>,
    },
    /// Each voxel holds the label of the patch with the highest weight there.
    LabelOnly { labels: Vec<u8>, best: Vec<f32> },
}

impl FusionState {
    pub fn new(mode: Accumulation, num_classes: usize, shape: Shape3) -> Self {
        let n = voxel_count(shape);
        match mode {
            Accumulation::FullProb => FusionState::FullProb {
                num_classes,
                acc: vec![0.0; num_classes * n],
                weight: vec![0.0; n],
            },
            Accumulation::LabelOnly => FusionState::LabelOnly {
                labels: vec![0; n],
                best: vec![f32::NEG_INFINITY; n],
            },
        }
    }

    /// Bytes held by whole-volume buffers.
    pub fn aux_bytes(&self) -> usize {
        match self {
            FusionState::FullProb { acc, weight, .. } => (acc.len() + weight.len()) * 4,
            FusionState::LabelOnly { labels, best } => labels.len() + best.len() * 4,
        }
    }

    /// Folds one patch prediction into the buffers. Out-of-volume voxels are skipped.
    pub fn add(&mut self, shape: Shape3, spec: &PatchSpec, prob: &ProbField, weights: &[f32]) {
        let size = spec.size;
        let pv = voxel_count(size);
        let argmax = matches!(self, FusionState::LabelOnly { .. }).then(|| prob.argmax());
        for pz in 0..size[0] {
            let z = pz as i64 + spec.origin[0];
            if z < 0 || z >= shape[0] as i64 {
                continue;
            }
            for py in 0..size[1] {
                let y = py as i64 + spec.origin[1];
                if y < 0 || y >= shape[1] as i64 {
                    continue;
                }
                for px in 0..size[2] {
                    let x = px as i64 + spec.origin[2];
                    if x < 0 || x >= shape[2] as i64 {
                        continue;
                    }
                    let vi = ((z as usize * shape[1]) + y as usize) * shape[2] + x as usize;
                    let pi = (pz * size[1] + py) * size[2] + px;
                    let w = weights[pi];
                    match self {
                        FusionState::FullProb {
                            num_classes,
                            acc,
                            weight,
                        } => {
                            let n = weight.len();
                            for c in 0..*num_classes {
                                acc[c * n + vi] += w * prob.data[c * pv + pi];
                            }
                            weight[vi] += w;
                        }
                        FusionState::LabelOnly { labels, best } => {
                            if w > best[vi] {
                                best[vi] = w;
                                labels[vi] = argmax.as_ref().unwrap()[pi];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Final labels; ties between class sums go to the lowest index.
    pub fn finish(self) -> Vec<u8> {
        match self {
            FusionState::FullProb {
                num_classes,
                acc,
                weight,
            } => {
                let n = weight.len();
                (0..n)
                    .map(|i| {
                        let mut best = 0;
                        for c in 1..num_classes {
                            if acc[c * n + i] > acc[best * n + i] {
                                best = c;
                            }
                        }
                        best as u8
                    })
                    .collect()
            }
            FusionState::LabelOnly { labels, .. } => labels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InferenceStats {
    pub tiles: usize,
    pub forward_passes: usize,
    /// Bytes of whole-volume fusion buffers.
    pub fusion_bytes: usize,
}

/// Segments a whole volume.
pub fn predict_volume(seg: &dyn Segmenter, vol: &Volume, cfg: &InferenceConfig) -> Result<LabelVolume> {
    predict_volume_with_stats(seg, vol, cfg).map(|r| r.0)
}

pub fn predict_volume_with_stats(
    seg: &dyn Segmenter,
    vol: &Volume,
    cfg: &InferenceConfig,
) -> Result<(LabelVolume, InferenceStats)> {
    cfg.validate()?;
    let work = cfg.preprocess.image(vol)?;
    let (pred, stats) = predict_preprocessed(seg, &work, cfg)?;
    let pred = if cfg.resample_back && pred.shape() != vol.shape() {
        resample_labels_to_shape(&pred, vol.shape(), vol.spacing())?
    } else if cfg.resample_back {
        LabelVolume::new(vol.shape(), vol.spacing(), pred.num_classes(), pred.into_labels())?
    } else {
        pred
    };
    Ok((pred, stats))
}

/// Tiles, predicts and fuses an already preprocessed volume; the result lives
/// on the input's grid.
pub fn predict_preprocessed(
    seg: &dyn Segmenter,
    work: &Volume,
    cfg: &InferenceConfig,
) -> Result<(LabelVolume, InferenceStats)> {
    cfg.validate()?;
    let shape = work.shape();
    // axes shorter than the patch are padded at the far end
    let padded: Shape3 = std::array::from_fn(|a| shape[a].max(cfg.patch_size[a]));
    let c = seg.num_classes();
    if cfg.accumulation == Accumulation::FullProb && c * voxel_count(padded) > cfg.max_full_prob_voxels {
        return Err(Error::Capacity(format!(
            "full_prob fusion needs {} class voxels, budget is {}; use label_only",
            c * voxel_count(padded),
            cfg.max_full_prob_voxels
        )));
    }
    let weights = patch_weights(cfg)?;
    let mut fusion = FusionState::new(cfg.accumulation, c, padded);
    let tiles = tile_positions(padded, cfg.patch_size, cfg.overlap);
    let passes = if cfg.tta == TtaMode::Flips3 { 4 } else { 1 };
    for spec in &tiles {
        let patch = extract_patch(work, spec, 0.0);
        let t = Tensor::from_data(1, spec.size, patch.into_voxels());
        let prob = tta_predict(seg, &t, cfg.tta)?;
        fusion.add(padded, spec, &prob, &weights);
    }
    let stats = InferenceStats {
        tiles: tiles.len(),
        forward_passes: tiles.len() * passes,
        fusion_bytes: fusion.aux_bytes(),
    };
    let full = fusion.finish();
    let labels: Vec<u8> = if padded == shape {
        full
    } else {
        let mut out = Vec::with_capacity(voxel_count(shape));
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                let start = (z * padded[1] + y) * padded[2];
                out.extend_from_slice(&full[start..start + shape[2]]);
            }
        }
        out
    };
    Ok((LabelVolume::new(shape, work.spacing(), c as u8, labels)?, stats))
}
