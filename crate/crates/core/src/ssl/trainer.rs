//! The epoch loop: sampling, loss accumulation, updates, logging and checkpoints.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sampler::{random_patch, sample_patch_balanced, ClassIndex, RoundRobin};
use super::{apply_update, consistency_step, make_cutmix_mask, supervised_step, DualGrads, DualState, TrainConfig, TrainMode};
use crate::error::{Error, Result};
use crate::inference::{predict_preprocessed, InferenceConfig, Preprocess};
use crate::io::atomic_write;
use crate::metrics::CaseResult;
use crate::nn::checkpoint::save_checkpoint;
use crate::nn::Tensor;
use crate::phantom::DatasetManifest;
use crate::volume::{extract_label_patch, extract_patch, LabelVolume, Volume};

pub const LOG_HEADER: &str = "epoch,lr,sup_a,sup_b,cons_a,cons_b,val_dsc";

const LABELED_STREAM: u64 = 1;
const UNLABELED_STREAM: u64 = 2;
const MASK_STREAM: u64 = 3;

/// Preprocessed training material held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub num_classes: u8,
    pub labeled: Vec<(Volume, LabelVolume)>,
    pub unlabeled: Vec<Volume>,
    /// Held-out `(id, image, labels)` used for validation.
    pub test: Vec<(String, Volume, LabelVolume)>,
    /// Preprocessing applied to every split, with dataset statistics resolved.
    pub preprocess: Preprocess,
}

impl TrainData {
    /// Loads every split of a manifest and applies the configured preprocessing.
    pub fn from_manifest(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Self> {
        let raw = manifest
            .labeled
            .iter()
            .map(|c| manifest.load_labeled(c))
            .collect::<Result<Vec<_>>>()?;
        let pre = &cfg.preprocess.resolve(raw.iter().map(|(img, _)| img))?;
        let labeled = raw
            .iter()
            .map(|(img, lab)| Ok((pre.image(img)?, pre.labels(lab)?)))
            .collect::<Result<Vec<_>>>()?;
        let unlabeled = manifest
            .unlabeled
            .iter()
            .map(|c| pre.image(&manifest.load_image(&c.image)?))
            .collect::<Result<Vec<_>>>()?;
        let test = if cfg.val_every > 0 {
            manifest
                .test
                .iter()
                .map(|c| {
                    let (img, lab) = manifest.load_labeled(c)?;
                    Ok((c.id.clone(), pre.image(&img)?, pre.labels(&lab)?))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            num_classes: manifest.num_classes,
            labeled,
            unlabeled,
            test,
            preprocess: pre.clone(),
        })
    }
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub sup_a: f64,
    pub sup_b: f64,
    pub cons_a: f64,
    pub cons_b: f64,
    pub val_dsc: Option<f64>,
}

impl EpochLog {
    fn csv_row(&self) -> String {
        let val = self.val_dsc.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{val}",
            self.epoch, self.lr, self.sup_a, self.sup_b, self.cons_a, self.cons_b
        )
    }

    fn is_finite(&self) -> bool {
        [self.sup_a, self.sup_b, self.cons_a, self.cons_b].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub dual: DualState,
    pub log: Vec<EpochLog>,
}

fn to_tensor(v: Volume) -> Tensor {
    Tensor::from_data(1, v.shape(), v.into_voxels())
}

fn write_checkpoint(dual: &DualState, dir: &Path, epoch: usize) -> Result<()> {
    let base = dir.join("ckpt").join(format!("epoch_{epoch}"));
    save_checkpoint(&dual.net_a, &base.join("net_a"))?;
    save_checkpoint(&dual.net_b, &base.join("net_b"))
}

fn validate(dual: &DualState, data: &TrainData, cfg: &TrainConfig) -> Result<f64> {
    let icfg = InferenceConfig {
        patch_size: cfg.patch_size,
        overlap: cfg.val_overlap,
        ..Default::default()
    };
    let net = dual.deployed(cfg.deploy);
    let mut sum = 0.0;
    for (id, img, gt) in &data.test {
        let (pred, _) = predict_preprocessed(net, img, &icfg)?;
        sum += CaseResult::evaluate(id, &pred, gt, None)?.mean_dsc();
    }
    Ok(sum / data.test.len() as f64)
}

/// Class indices of net A's predictions on every unlabeled volume, used only
/// to steer unlabeled cropping.
fn crop_indices(dual: &DualState, data: &TrainData, cfg: &TrainConfig) -> Result<Vec<ClassIndex>> {
    let icfg = InferenceConfig {
        patch_size: cfg.patch_size,
        overlap: 0.0,
        ..Default::default()
    };
    data.unlabeled
        .iter()
        .map(|v| Ok(ClassIndex::new(&predict_preprocessed(&dual.net_a, v, &icfg)?.0)))
        .collect()
}

fn pick_pair(m: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    if m < 2 {
        return (0, 0);
    }
    let i = rng.random_range(0..m);
    let j = (i + rng.random_range(1..m)) % m;
    (i, j)
}

/// Runs the full schedule. With `out_dir` set, the CSV log is rewritten
/// after every epoch and checkpoints land in `out_dir/ckpt/epoch_<n>/`.
pub fn train(data: &TrainData, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::Config("training needs at least one labeled case".into()));
    }
    if cfg.network.num_classes != data.num_classes as usize {
        return Err(Error::Config(format!(
            "network predicts {} classes, dataset has {}",
            cfg.network.num_classes, data.num_classes
        )));
    }
    let ssl = cfg.mode == TrainMode::Ssl && !data.unlabeled.is_empty() && cfg.consistency_weight > 0.0;

    let mut dual = DualState::from_config(cfg)?;
    let mut grads = DualGrads::zeros_like(&dual);
    let stream = |s| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(s);
        r
    };
    let (mut rng_l, mut rng_u, mut rng_m) = (stream(LABELED_STREAM), stream(UNLABELED_STREAM), stream(MASK_STREAM));
    let labeled_index: Vec<ClassIndex> = data.labeled.iter().map(|(_, l)| ClassIndex::new(l)).collect();
    let mut rr_labeled = RoundRobin::new(data.num_classes);
    let mut rr_unlabeled = RoundRobin::new(data.num_classes);
    let mut unlabeled_index: Option<Vec<ClassIndex>> = None;

    let batch_w = 1.0 / cfg.batch_size as f64;
    let mut log = Vec::with_capacity(cfg.total_epochs);
    let mut csv = format!("{LOG_HEADER}\n");

    for epoch in 0..cfg.total_epochs {
        let lr = cfg.lr(epoch);
        if ssl && epoch >= cfg.pseudo_warmup_epochs && (epoch - cfg.pseudo_warmup_epochs).is_multiple_of(cfg.pseudo_refresh_epochs) {
            unlabeled_index = Some(crop_indices(&dual, data, cfg)?);
        }
        let mut sums = [0.0f64; 4];
        for it in 0..cfg.iterations_per_epoch {
            let lambda = cfg.consistency_weight_at(epoch * cfg.iterations_per_epoch + it);
            grads.zero();
            for _ in 0..cfg.batch_size {
                let case = rng_l.random_range(0..data.labeled.len());
                let spec = if rng_l.random_bool(cfg.foreground_fraction) {
                    let class = rr_labeled.next_class();
                    sample_patch_balanced(&labeled_index[case], class, cfg.patch_size, &mut rng_l)
                } else {
                    random_patch(labeled_index[case].shape(), cfg.patch_size, &mut rng_l)
                };
                let (img, lab) = &data.labeled[case];
                let x = to_tensor(extract_patch(img, &spec, 0.0));
                let y = extract_label_patch(lab, &spec).into_labels();
                let (a, b) = supervised_step(&dual, &mut grads, &x, &y, &cfg.loss, batch_w)?;
                sums[0] += a * batch_w;
                sums[1] += b * batch_w;
            }
            if ssl && lambda > 0.0 {
                for _ in 0..cfg.batch_size {
                    let (i, j) = pick_pair(data.unlabeled.len(), &mut rng_u);
                    let mut crop = |k: usize| match &unlabeled_index {
                        Some(idx) if rng_u.random_bool(cfg.foreground_fraction) => {
                            let class = rr_unlabeled.next_class();
                            sample_patch_balanced(&idx[k], class, cfg.patch_size, &mut rng_u)
                        }
                        _ => random_patch(data.unlabeled[k].shape(), cfg.patch_size, &mut rng_u),
                    };
                    let (si, sj) = (crop(i), crop(j));
                    let xi = to_tensor(extract_patch(&data.unlabeled[i], &si, 0.0));
                    let xj = to_tensor(extract_patch(&data.unlabeled[j], &sj, 0.0));
                    let mask = make_cutmix_mask(cfg.patch_size, cfg.cutmix_range, &mut rng_m)?;
                    let (a, b) = consistency_step(
                        &dual,
                        &mut grads,
                        &xi,
                        &xj,
                        &mask,
                        &cfg.loss,
                        lambda * batch_w,
                        cfg.literal_eq3,
                    )?;
                    sums[2] += a * batch_w;
                    sums[3] += b * batch_w;
                }
            }
            apply_update(&mut dual.net_a, &mut dual.opt_a, &mut grads.a, lr, cfg.grad_clip)?;
            apply_update(&mut dual.net_b, &mut dual.opt_b, &mut grads.b, lr, cfg.grad_clip)?;
        }
        dual.epoch = epoch + 1;
        let n = cfg.iterations_per_epoch as f64;
        let val_dsc = if cfg.val_every > 0 && !data.test.is_empty() && (epoch + 1) % cfg.val_every == 0 {
            Some(validate(&dual, data, cfg)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            sup_a: sums[0] / n,
            sup_b: sums[1] / n,
            cons_a: sums[2] / n,
            cons_b: sums[3] / n,
            val_dsc,
        };
        if !entry.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss in epoch {}", epoch + 1)));
        }
        csv.push_str(&entry.csv_row());
        csv.push('\n');
        log.push(entry);
        if let Some(dir) = out_dir {
            atomic_write(&dir.join("train_log.csv"), csv.as_bytes())?;
            let last = epoch + 1 == cfg.total_epochs;
            if last || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
                write_checkpoint(&dual, dir, epoch + 1)?;
            }
        }
    }
    Ok(TrainOutcome { dual, log })
}
