//! Synthetic ellipsoid phantoms and on-disk datasets built from them.
//!
//! Each case paints one randomly rotated ellipsoid per foreground class (later
//! classes overwrite earlier ones) and adds Gaussian noise around per-class
//! intensity means. A case is fully determined by the config seed and the
//! case seed.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{atomic_write, load_labels, load_volume, save_labels, save_volume};
use crate::volume::{voxel_count, LabelVolume, Shape3, Spacing3, Volume};

/// Semi-axis length range as a fraction of each dimension.
pub const AXIS_FRACTION: (f64, f64) = (0.08, 0.30);
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;

pub const LABELED_SEED_BASE: u64 = 0;
pub const UNLABELED_SEED_BASE: u64 = 10_000;
pub const TEST_SEED_BASE: u64 = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub seed: u64,
    pub shape: Shape3,
    pub spacing: Spacing3,
    pub num_classes: u8,
    pub noise_sigma: f64,
    pub min_voxels_per_class: usize,
    /// Background first, then one mean per foreground class.
    pub intensity_means: Vec<f32>,
}

impl PhantomConfig {
    /// Evenly spaced means `0, 1, …, C−1`.
    pub fn new(seed: u64, shape: Shape3, num_classes: u8, noise_sigma: f64) -> Self {
        Self {
            seed,
            shape,
            spacing: [1.0; 3],
            num_classes,
            noise_sigma,
            min_voxels_per_class: 1,
            intensity_means: (0..num_classes).map(f32::from).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("phantom: {m}")));
        if self.shape.contains(&0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("shape {:?} and spacing {:?} must be positive", self.shape, self.spacing));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.min_voxels_per_class == 0 {
            return bad("min_voxels_per_class must be >= 1".into());
        }
        if self.intensity_means.len() != self.num_classes as usize {
            return bad(format!(
                "{} intensity means for {} classes",
                self.intensity_means.len(),
                self.num_classes
            ));
        }
        for (i, a) in self.intensity_means.iter().enumerate() {
            if self.intensity_means[..i].contains(a) {
                return bad(format!("intensity mean {a} repeated"));
            }
        }
        if self.min_voxels_per_class * (self.num_classes as usize - 1) >= voxel_count(self.shape) {
            return bad("min_voxels_per_class too large for the volume".into());
        }
        Ok(())
    }
}

/// Random rotation from a uniformly distributed unit quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    q.iter_mut().for_each(|v| *v /= n);
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn paint_ellipsoid(labels: &mut [u8], shape: Shape3, class: u8, rng: &mut ChaCha8Rng) {
    let axes: [f64; 3] =
        std::array::from_fn(|a| rng.random_range(AXIS_FRACTION.0..=AXIS_FRACTION.1) * shape[a] as f64);
    let center: [f64; 3] = std::array::from_fn(|a| rng.random_range(0.0..shape[a] as f64));
    let rot = random_rotation(rng);
    let reach = axes.iter().cloned().fold(0.0, f64::max);
    let range = |a: usize| {
        let lo = (center[a] - reach).floor().max(0.0) as usize;
        let hi = ((center[a] + reach).ceil() as usize + 1).min(shape[a]);
        lo..hi
    };
    for z in range(0) {
        for y in range(1) {
            for x in range(2) {
                let d = [z as f64 + 0.5 - center[0], y as f64 + 0.5 - center[1], x as f64 + 0.5 - center[2]];
                let mut r = 0.0;
                for (row, axis) in rot.iter().zip(&axes) {
                    let u = (row[0] * d[0] + row[1] * d[1] + row[2] * d[2]) / axis;
                    r += u * u;
                }
                if r <= 1.0 {
                    labels[(z * shape[1] + y) * shape[2] + x] = class;
                }
            }
        }
    }
}

/// One phantom image and its label field.
pub fn generate_case(cfg: &PhantomConfig, case_seed: u64) -> Result<(Volume, LabelVolume)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(case_seed);
    let n = voxel_count(cfg.shape);
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let mut labels = vec![0u8; n];
        for class in 1..cfg.num_classes {
            paint_ellipsoid(&mut labels, cfg.shape, class, &mut rng);
        }
        let mut counts = vec![0usize; cfg.num_classes as usize];
        labels.iter().for_each(|&l| counts[l as usize] += 1);
        if counts[0] == 0 || counts[1..].iter().any(|&c| c < cfg.min_voxels_per_class) {
            continue;
        }
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let voxels = labels
            .iter()
            .map(|&l| {
                let mean = cfg.intensity_means[l as usize];
                if cfg.noise_sigma > 0.0 {
                    mean + noise.sample(&mut rng) as f32
                } else {
                    mean
                }
            })
            .collect();
        return Ok((
            Volume::new(cfg.shape, cfg.spacing, voxels)?,
            LabelVolume::new(cfg.shape, cfg.spacing, cfg.num_classes, labels)?,
        ));
    }
    Err(Error::Generation(format!(
        "could not place {} classes with >= {} voxels each in {MAX_PLACEMENT_ATTEMPTS} attempts",
        cfg.num_classes - 1,
        cfg.min_voxels_per_class
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCase {
    pub id: String,
    pub image: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledCase {
    pub id: String,
    pub image: String,
    /// Withheld label, for evaluation only.
    pub hidden_label: String,
}

/// Dataset index. Paths are relative to the manifest's directory and name
/// volume files without their `.raw`/`.json` suffix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub num_classes: u8,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub phantom: PhantomConfig,
    pub labeled: Vec<LabeledCase>,
    pub unlabeled: Vec<UnlabeledCase>,
    pub test: Vec<LabeledCase>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_labeled(&self, case: &LabeledCase) -> Result<(Volume, LabelVolume)> {
        Ok((load_volume(&self.resolve(&case.image))?, load_labels(&self.resolve(&case.label))?))
    }

    pub fn load_image(&self, rel: &str) -> Result<Volume> {
        load_volume(&self.resolve(rel))
    }
}

fn write_case(out_dir: &Path, image_rel: &str, label_rel: &str, case: &(Volume, LabelVolume)) -> Result<()> {
    save_volume(&case.0, &out_dir.join(image_rel))?;
    save_labels(&case.1, &out_dir.join(label_rel))
}

/// Writes `n_labeled` labeled cases, `n_unlabeled` unlabeled cases (labels
/// under `hidden/`) and `n_test` held-out test cases, plus `manifest.json`.
pub fn generate_dataset(
    cfg: &PhantomConfig,
    n_labeled: usize,
    n_unlabeled: usize,
    n_test: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_labeled == 0 {
        return Err(Error::Config("n_labeled must be >= 1".into()));
    }
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let labeled: Vec<LabeledCase> = (0..n_labeled)
        .map(|i| {
            let id = format!("case_{i:04}");
            LabeledCase {
                image: format!("images/{id}"),
                label: format!("labels/{id}"),
                id,
            }
        })
        .collect();
    let unlabeled: Vec<UnlabeledCase> = (0..n_unlabeled)
        .map(|i| {
            let id = format!("unl_{i:04}");
            UnlabeledCase {
                image: format!("unlabeled/{id}"),
                hidden_label: format!("hidden/{id}"),
                id,
            }
        })
        .collect();
    let test: Vec<LabeledCase> = (0..n_test)
        .map(|i| {
            let id = format!("test_{i:04}");
            LabeledCase {
                image: format!("test/images/{id}"),
                label: format!("test/labels/{id}"),
                id,
            }
        })
        .collect();
    // each case depends only on its own seed, so generation order is free
    let jobs: Vec<(&str, &str, u64)> = labeled
        .iter()
        .enumerate()
        .map(|(i, c)| (c.image.as_str(), c.label.as_str(), LABELED_SEED_BASE + i as u64))
        .chain(unlabeled.iter().enumerate().map(|(i, c)| {
            (c.image.as_str(), c.hidden_label.as_str(), UNLABELED_SEED_BASE + i as u64)
        }))
        .chain(test.iter().enumerate().map(|(i, c)| (c.image.as_str(), c.label.as_str(), TEST_SEED_BASE + i as u64)))
        .collect();
    jobs.par_iter()
        .try_for_each(|&(img, lab, seed)| write_case(out_dir, img, lab, &generate_case(cfg, seed)?))?;
    let manifest = DatasetManifest {
        seed: cfg.seed,
        num_classes: cfg.num_classes,
        n_labeled,
        n_unlabeled,
        n_test,
        phantom: cfg.clone(),
        labeled,
        unlabeled,
        test,
        root: out_dir.to_path_buf(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    atomic_write(&out_dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}
