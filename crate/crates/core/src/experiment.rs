//! Phantom experiments: the supervised vs semi-supervised ablation and the
//! loss comparison, each reported as a small CSV table.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::inference::{predict_preprocessed, InferenceConfig, Normalization, Preprocess};
use crate::losses::{LossConfig, LossKind};
use crate::metrics::CaseResult;
use crate::phantom::{generate_case, PhantomConfig, LABELED_SEED_BASE, TEST_SEED_BASE, UNLABELED_SEED_BASE};
use crate::ssl::{train, TrainConfig, TrainData, TrainMode};
use crate::volume::LabelVolume;

/// Dataset and training settings shared by every run of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSetup {
    pub phantom: PhantomConfig,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub train: TrainConfig,
    /// Tile overlap used when scoring the test cases.
    pub eval_overlap: f64,
    /// Scoring tile; `None` reuses the training patch.
    pub eval_patch: Option<[usize; 3]>,
}

impl ExperimentSetup {
    /// 64³ phantoms with four classes, 4 labeled, 40 unlabeled and 10 test
    /// cases; the toy network trained for 60 epochs of 50 iterations on 16³
    /// patches and scored with 32³ tiles.
    pub fn desk_scale() -> Self {
        let mut phantom = PhantomConfig::new(7, [64, 64, 64], 4, 0.5);
        phantom.min_voxels_per_class = 200;
        let train = TrainConfig {
            patch_size: [16, 16, 16],
            total_epochs: 60,
            iterations_per_epoch: 50,
            base_lr: 0.005,
            momentum: 0.95,
            lr_halving_period: 20,
            loss: LossConfig {
                kind: LossKind::DiceCe,
                ..LossConfig::default()
            },
            consistency_warmup_epochs: 10,
            pseudo_warmup_epochs: 10,
            pseudo_refresh_epochs: 10,
            checkpoint_every: 0,
            preprocess: Preprocess {
                normalization: Normalization::Dataset,
                ..Preprocess::default()
            },
            ..TrainConfig::default()
        };
        Self {
            phantom,
            n_labeled: 1,
            n_unlabeled: 40,
            n_test: 10,
            train,
            eval_overlap: 0.5,
            eval_patch: Some([32, 32, 32]),
        }
    }

    /// Generates all splits in memory and preprocesses them.
    pub fn data(&self) -> Result<TrainData> {
        let case = |seed| generate_case(&self.phantom, seed);
        let raw = (0..self.n_labeled as u64)
            .map(|i| case(LABELED_SEED_BASE + i))
            .collect::<Result<Vec<_>>>()?;
        let pre = &self.train.preprocess.resolve(raw.iter().map(|(img, _)| img))?;
        let labeled = raw
            .iter()
            .map(|(img, lab)| Ok((pre.image(img)?, pre.labels(lab)?)))
            .collect::<Result<Vec<_>>>()?;
        let unlabeled = (0..self.n_unlabeled as u64)
            .map(|i| pre.image(&case(UNLABELED_SEED_BASE + i)?.0))
            .collect::<Result<Vec<_>>>()?;
        let test = (0..self.n_test as u64)
            .map(|i| {
                let (img, lab) = case(TEST_SEED_BASE + i)?;
                Ok((format!("test_{i:04}"), pre.image(&img)?, pre.labels(&lab)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainData {
            num_classes: self.phantom.num_classes,
            labeled,
            unlabeled,
            test,
            preprocess: pre.clone(),
        })
    }

    /// Training config for one run: seeds derived from `seed`, mode and loss applied.
    pub fn run_config(&self, seed: u64, mode: TrainMode, loss: LossKind) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.network.num_classes = self.phantom.num_classes as usize;
        cfg.seed = seed;
        cfg.init_seed_a = seed;
        cfg.init_seed_b = seed ^ 0x9E37_79B9_7F4A_7C15;
        cfg.mode = mode;
        cfg.loss.kind = loss;
        if mode == TrainMode::Supervised {
            cfg.consistency_weight = 0.0;
        }
        cfg
    }
}

/// Test-set scores of one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub mode: TrainMode,
    pub loss: LossKind,
    /// Per foreground class, averaged over test cases.
    pub class_dsc: Vec<f64>,
    /// Mean over test cases of each case's foreground mean DSC.
    pub mean_dsc: f64,
    pub seconds: f64,
}

/// Scores `labels` predictions on the test split.
fn score(setup: &ExperimentSetup, data: &TrainData, predict: impl Fn(&crate::volume::Volume) -> Result<LabelVolume>) -> Result<(Vec<f64>, f64)> {
    if data.test.is_empty() {
        return Err(Error::Config("experiment needs at least one test case".into()));
    }
    let fg = setup.phantom.num_classes as usize - 1;
    let mut class_sum = vec![0.0; fg];
    let mut mean_sum = 0.0;
    for (id, img, gt) in &data.test {
        let r = CaseResult::evaluate(id, &predict(img)?, gt, None)?;
        class_sum.iter_mut().zip(&r.dsc).for_each(|(s, d)| *s += d);
        mean_sum += r.mean_dsc();
    }
    let n = data.test.len() as f64;
    Ok((class_sum.iter().map(|s| s / n).collect(), mean_sum / n))
}

/// Trains one model on prepared data and scores it on the test split.
pub fn run_once(setup: &ExperimentSetup, data: &TrainData, seed: u64, mode: TrainMode, loss: LossKind) -> Result<RunResult> {
    let cfg = setup.run_config(seed, mode, loss);
    let start = Instant::now();
    let outcome = train(data, &cfg, None)?;
    let net = outcome.dual.deployed(cfg.deploy);
    let icfg = InferenceConfig {
        patch_size: setup.eval_patch.unwrap_or(cfg.patch_size),
        overlap: setup.eval_overlap,
        ..Default::default()
    };
    let (class_dsc, mean_dsc) = score(setup, data, |img| Ok(predict_preprocessed(net, img, &icfg)?.0))?;
    Ok(RunResult {
        seed,
        mode,
        loss,
        class_dsc,
        mean_dsc,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Supervised => "supervised",
        TrainMode::Ssl => "ssl",
    }
}

fn loss_name(loss: LossKind) -> &'static str {
    match loss {
        LossKind::Rs => "rs",
        LossKind::DiceCe => "dice_ce",
    }
}

fn csv_header(num_fg: usize, first: &str) -> String {
    let mut s = format!("{first},seed,mean_dsc");
    for k in 1..=num_fg {
        write!(s, ",class_{k}").unwrap();
    }
    s.push_str(",seconds\n");
    s
}

fn csv_row(s: &mut String, key: &str, r: &RunResult) {
    write!(s, "{key},{},{:.6}", r.seed, r.mean_dsc).unwrap();
    for d in &r.class_dsc {
        write!(s, ",{d:.6}").unwrap();
    }
    writeln!(s, ",{:.1}", r.seconds).unwrap();
}

/// Paired supervised and semi-supervised runs over several seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub supervised: Vec<RunResult>,
    pub ssl: Vec<RunResult>,
}

impl AblationReport {
    pub fn gains(&self) -> Vec<f64> {
        self.ssl.iter().zip(&self.supervised).map(|(s, b)| s.mean_dsc - b.mean_dsc).collect()
    }

    /// The seed whose SSL gain is the median one, as `(supervised, ssl)`.
    pub fn median_pair(&self) -> Option<(&RunResult, &RunResult)> {
        let gains = self.gains();
        if gains.is_empty() {
            return None;
        }
        let mut order: Vec<usize> = (0..gains.len()).collect();
        order.sort_by(|&a, &b| gains[a].total_cmp(&gains[b]));
        let k = order[(order.len() - 1) / 2];
        Some((&self.supervised[k], &self.ssl[k]))
    }

    /// One row per run, then a `median` row per method.
    pub fn to_csv(&self) -> String {
        let num_fg = self.ssl.first().or(self.supervised.first()).map_or(0, |r| r.class_dsc.len());
        let mut s = csv_header(num_fg, "method");
        for (name, runs) in [("supervised", &self.supervised), ("ssl", &self.ssl)] {
            for r in runs.iter() {
                csv_row(&mut s, name, r);
            }
        }
        for (name, runs) in [("supervised", &self.supervised), ("ssl", &self.ssl)] {
            if runs.is_empty() {
                continue;
            }
            write!(s, "{name},median,{:.6}", median(runs.iter().map(|r| r.mean_dsc).collect())).unwrap();
            for k in 0..num_fg {
                write!(s, ",{:.6}", median(runs.iter().map(|r| r.class_dsc[k]).collect())).unwrap();
            }
            writeln!(s, ",{:.1}", runs.iter().map(|r| r.seconds).sum::<f64>()).unwrap();
        }
        s
    }
}

/// Supervised (λ = 0) and semi-supervised runs for every seed on one dataset.
pub fn run_ablation(setup: &ExperimentSetup, seeds: &[u64], mut progress: impl FnMut(&RunResult)) -> Result<AblationReport> {
    let data = setup.data()?;
    let loss = setup.train.loss.kind;
    let mut report = AblationReport {
        supervised: Vec::new(),
        ssl: Vec::new(),
    };
    for &seed in seeds {
        let sup = run_once(setup, &data, seed, TrainMode::Supervised, loss)?;
        progress(&sup);
        report.supervised.push(sup);
        let ssl = run_once(setup, &data, seed, TrainMode::Ssl, loss)?;
        progress(&ssl);
        report.ssl.push(ssl);
    }
    Ok(report)
}

/// Trains the configured mode once per loss and returns the runs with a CSV
/// holding one row per loss.
pub fn run_loss_comparison(setup: &ExperimentSetup, seed: u64, losses: &[LossKind]) -> Result<(Vec<RunResult>, String)> {
    let data = setup.data()?;
    let runs = losses
        .iter()
        .map(|&l| run_once(setup, &data, seed, setup.train.mode, l))
        .collect::<Result<Vec<_>>>()?;
    let num_fg = setup.phantom.num_classes as usize - 1;
    let mut csv = csv_header(num_fg, "loss");
    for r in &runs {
        csv_row(&mut csv, loss_name(r.loss), r);
    }
    Ok((runs, csv))
}

impl std::fmt::Display for RunResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} seed {}: mean DSC {:.4} {:?} ({:.0}s)",
            mode_name(self.mode),
            loss_name(self.loss),
            self.seed,
            self.mean_dsc,
            self.class_dsc.iter().map(|d| (d * 1e4).round() / 1e4).collect::<Vec<_>>(),
            self.seconds
        )
    }
}
