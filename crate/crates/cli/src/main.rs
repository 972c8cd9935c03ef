mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ssl_seg_core::experiment::{run_ablation, run_loss_comparison};
use ssl_seg_core::inference::{predict_volume, Normalization};
use ssl_seg_core::io::{atomic_write, save_labels};
use ssl_seg_core::losses::{gradient_check_suite, LossKind};
use ssl_seg_core::metrics::evaluate_dataset;
use ssl_seg_core::nn::checkpoint::{load_checkpoint, save_checkpoint};
use ssl_seg_core::nn::spec::conv_layer_counts;
use ssl_seg_core::nn::ConvMode;
use ssl_seg_core::phantom::{generate_dataset, DatasetManifest};
use ssl_seg_core::volume::IntensityStats;
use ssl_seg_core::ssl::{train, TrainData};
use ssl_seg_core::{count_parameters, Error, Result};

use config::RunConfig;

const CONFIG_ECHO: &str = "run_config.txt";
const GRAD_TOLERANCE: f64 = 1e-4;
const STATS_FILE: &str = "intensity.json";

#[derive(Parser)]
#[command(name = "ssl-seg", version, about = "Semi-supervised 3D segmentation on synthetic phantoms")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides any key, e.g. `--set batch_size=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Supervised,
    Ssl,
}

#[derive(Clone, Copy, ValueEnum)]
enum Loss {
    DiceCe,
    Rs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Separable,
    Regular,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tta {
    None,
    Flips3,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fusion {
    FullProb,
    LabelOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Labeled,
    Unlabeled,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dual networks; writes a log, checkpoints and `model/`.
    Train {
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long, value_enum)]
        loss: Option<Loss>,
        #[arg(long, value_enum)]
        arch: Option<Arch>,
    },
    /// Segment every case of one manifest split.
    Infer {
        /// Checkpoint directory, e.g. `<train out>/model`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, value_enum)]
        tta: Option<Tta>,
        #[arg(long, value_enum)]
        fusion: Option<Fusion>,
    },
    /// Score predictions against ground truth; writes `evaluation.csv`.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Surface tolerance in mm; NSD columns are added when set.
        #[arg(long)]
        nsd_tolerance: Option<f64>,
    },
    /// Compare analytic loss gradients with finite differences.
    GradCheck {
        /// Random fields per loss.
        #[arg(long, default_value_t = 20)]
        fields: usize,
    },
    /// Print parameter counts of the configured network.
    CountParams {
        /// Also list every convolution layer.
        #[arg(long)]
        layers: bool,
    },
    /// Phantom experiments on in-memory data.
    Experiment {
        #[command(subcommand)]
        which: Experiment,
    },
}

#[derive(Subcommand)]
enum Experiment {
    /// Supervised vs SSL runs per seed, writes `ablation.csv`.
    Ablation {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// One run per loss, writes `loss_comparison.csv`.
    Losses {
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.merge_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    for pair in &cli.sets {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

fn set_enum<T: ValueEnum>(cfg: &mut RunConfig, key: &str, value: Option<T>) -> Result<()> {
    match value.and_then(|v| v.to_possible_value()) {
        Some(v) => cfg.set(key, v.get_name()),
        None => Ok(()),
    }
}

/// Intensity statistics of the training set, stored beside the weights.
fn load_stats(model: &Path) -> Result<IntensityStats> {
    let path = model.join(STATS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        Error::Config(format!(
            "normalization = dataset needs {} ({e}); set normalization = volume for models trained without it",
            path.display()
        ))
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        field: STATS_FILE.into(),
        reason: e.to_string(),
    })
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    atomic_write(&dir.join(CONFIG_ECHO), cfg.to_text().as_bytes())
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = resolve(&cli)?;
    match cli.command {
        Command::GenData { out } => {
            let phantom = cfg.phantom()?;
            let m = generate_dataset(&phantom, cfg.get("n_labeled")?, cfg.get("n_unlabeled")?, cfg.get("n_test")?, &out)?;
            echo_config(&cfg, &out)?;
            println!(
                "wrote {} labeled, {} unlabeled, {} test cases to {}",
                m.labeled.len(),
                m.unlabeled.len(),
                m.test.len(),
                out.display()
            );
        }
        Command::Train { data, out, mode, loss, arch } => {
            set_enum(&mut cfg, "mode", mode)?;
            set_enum(&mut cfg, "loss", loss)?;
            set_enum(&mut cfg, "arch", arch)?;
            let tcfg = cfg.train()?;
            let manifest = DatasetManifest::load(&data)?;
            let td = TrainData::from_manifest(&manifest, &tcfg)?;
            echo_config(&cfg, &out)?;
            let outcome = train(&td, &tcfg, Some(&out))?;
            let model = out.join("model");
            save_checkpoint(outcome.dual.deployed(tcfg.deploy), &model)?;
            if let Normalization::Fixed(stats) = td.preprocess.normalization {
                let text = serde_json::to_string_pretty(&stats).expect("stats serialize");
                atomic_write(&model.join(STATS_FILE), text.as_bytes())?;
            }
            if let Some(last) = outcome.log.last() {
                println!(
                    "epoch {}: sup {:.4}/{:.4} cons {:.4}/{:.4}",
                    last.epoch, last.sup_a, last.sup_b, last.cons_a, last.cons_b
                );
            }
        }
        Command::Infer { model, data, out, split, tta, fusion } => {
            set_enum(&mut cfg, "tta", tta)?;
            set_enum(&mut cfg, "fusion", fusion)?;
            let mut icfg = cfg.inference()?;
            if icfg.preprocess.normalization == Normalization::Dataset {
                icfg.preprocess.normalization = Normalization::Fixed(load_stats(&model)?);
            }
            let net = load_checkpoint(&model)?;
            let manifest = DatasetManifest::load(&data)?;
            let cases: Vec<(&str, &str)> = match split {
                Split::Labeled => manifest.labeled.iter().map(|c| (c.id.as_str(), c.image.as_str())).collect(),
                Split::Unlabeled => manifest.unlabeled.iter().map(|c| (c.id.as_str(), c.image.as_str())).collect(),
                Split::Test => manifest.test.iter().map(|c| (c.id.as_str(), c.image.as_str())).collect(),
            };
            echo_config(&cfg, &out)?;
            for (id, image) in &cases {
                let pred = predict_volume(&net, &manifest.load_image(image)?, &icfg)?;
                save_labels(&pred, &out.join(id))?;
            }
            println!("segmented {} cases into {}", cases.len(), out.display());
        }
        Command::Evaluate { pred, gt, out, nsd_tolerance } => {
            if let Some(t) = nsd_tolerance {
                cfg.set("nsd_tolerance", &t.to_string())?;
            }
            let names = cfg.class_names()?;
            let report = evaluate_dataset(&pred, &gt, names.as_deref(), cfg.nsd_tolerance()?)?;
            for (id, side) in &report.missing {
                eprintln!("warning: {id} has no {side}");
            }
            atomic_write(&out.join("evaluation.csv"), report.to_csv().as_bytes())?;
            echo_config(&cfg, &out)?;
            println!("mean DSC {:.4} over {} cases", report.mean_dsc(), report.cases.len());
        }
        Command::GradCheck { fields } => {
            let mut ok = true;
            for (name, err) in gradient_check_suite(cfg.seed()?, fields)? {
                let pass = err < GRAD_TOLERANCE;
                ok &= pass;
                println!("{name:<14} max rel error {err:.3e} {}", if pass { "ok" } else { "FAIL" });
            }
            return Ok(ok);
        }
        Command::CountParams { layers } => {
            let spec = cfg.network()?;
            let mut regular = spec.clone();
            regular.conv_mode = ConvMode::Regular;
            let mut separable = spec.clone();
            separable.conv_mode = ConvMode::Separable;
            if layers {
                for (name, cin, cout, n) in conv_layer_counts(&spec)? {
                    println!("{name:<28} {cin:>4} -> {cout:<4} {n:>10}");
                }
            }
            println!("total {}", count_parameters(&spec)?);
            println!("separable {} regular {}", count_parameters(&separable)?, count_parameters(&regular)?);
        }
        Command::Experiment { which } => {
            let setup = cfg.experiment()?;
            match which {
                Experiment::Ablation { out, seeds } => {
                    let report = run_ablation(&setup, &seeds, |r| println!("{r}"))?;
                    atomic_write(&out.join("ablation.csv"), report.to_csv().as_bytes())?;
                    echo_config(&cfg, &out)?;
                }
                Experiment::Losses { out } => {
                    let (runs, csv) = run_loss_comparison(&setup, cfg.seed()?, &[LossKind::DiceCe, LossKind::Rs])?;
                    runs.iter().for_each(|r| println!("{r}"));
                    atomic_write(&out.join("loss_comparison.csv"), csv.as_bytes())?;
                    echo_config(&cfg, &out)?;
                }
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    ssl_seg_core::configure_threads();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
