//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use ssl_seg_core::experiment::ExperimentSetup;
use ssl_seg_core::inference::{Accumulation, InferenceConfig, Normalization, Preprocess, TtaMode, Weighting};
use ssl_seg_core::losses::{ClassSet, LossConfig, LossKind, NrdMode, Reduction};
use ssl_seg_core::nn::ConvMode;
use ssl_seg_core::phantom::PhantomConfig;
use ssl_seg_core::ssl::{Deploy, TrainConfig, TrainMode};
use ssl_seg_core::{Error, NetworkSpec, Result};

/// Every accepted key with its default, in echo order.
const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    // phantom data
    ("shape", "64,64,64"),
    ("spacing", "1,1,1"),
    ("num_classes", "4"),
    ("noise_sigma", "0.5"),
    ("min_voxels_per_class", "200"),
    ("intensity_means", "auto"),
    ("n_labeled", "1"),
    ("n_unlabeled", "40"),
    ("n_test", "10"),
    // network
    ("arch", "separable"),
    ("num_stages", "4"),
    ("base_channels", "16"),
    ("channel_multiplier", "2"),
    ("max_channels", "128"),
    ("kernel_size", "3"),
    ("strides", "auto"),
    ("use_residual", "true"),
    ("deep_supervision", "false"),
    ("init_seed_a", "auto"),
    ("init_seed_b", "auto"),
    // training
    ("mode", "ssl"),
    ("patch_size", "16,16,16"),
    ("batch_size", "1"),
    ("foreground_fraction", "0.333333"),
    ("total_epochs", "60"),
    ("iterations_per_epoch", "50"),
    ("base_lr", "0.005"),
    ("momentum", "0.95"),
    ("nesterov", "true"),
    ("lr_halving_period", "20"),
    ("grad_clip", "12"),
    ("consistency_weight", "1"),
    ("consistency_warmup_epochs", "10"),
    ("consistency_ramp", "0.1"),
    ("cutmix_min", "0.25"),
    ("cutmix_max", "0.75"),
    ("pseudo_warmup_epochs", "10"),
    ("pseudo_refresh_epochs", "10"),
    ("literal_eq3", "false"),
    ("deploy", "a"),
    ("val_every", "0"),
    ("val_overlap", "0"),
    ("checkpoint_every", "10"),
    // loss
    ("loss", "dice_ce"),
    ("gamma", "1.5"),
    ("epsilon", "1e-5"),
    ("reduction", "mean"),
    ("class_set", "foreground_only"),
    ("nrd_mode", "per_class"),
    // preprocessing and inference
    ("normalization", "dataset"),
    ("target_spacing", "none"),
    ("clip_lo_pct", "0.5"),
    ("clip_hi_pct", "99.5"),
    ("infer_patch_size", "32,32,32"),
    ("overlap", "0.5"),
    ("gaussian_sigma_scale", "0.125"),
    ("weighting", "gaussian"),
    ("tta", "none"),
    ("fusion", "full_prob"),
    ("resample_back", "true"),
    ("max_full_prob_voxels", "134217728"),
    // evaluation
    ("nsd_tolerance", "none"),
    ("class_names", "auto"),
];

/// Resolved configuration: defaults overridden by a file, then by flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        }
    }
}

fn unknown_key(key: &str) -> Error {
    let best = KEYS
        .iter()
        .map(|&(k, _)| (strsim::jaro_winkler(key, k), k))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .filter(|(score, _)| *score > 0.8);
    match best {
        Some((_, k)) => Error::Config(format!("unknown config key `{key}` (did you mean `{k}`?)")),
        None => Error::Config(format!("unknown config key `{key}`")),
    }
}

fn bad_value(key: &str, value: &str, expected: &str) -> Error {
    Error::Config(format!("config key `{key}`: cannot parse {value:?} as {expected}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some(&(k, _)) = KEYS.iter().find(|(k, _)| *k == key) else {
            return Err(unknown_key(key));
        };
        self.values.insert(k, value.trim().to_string());
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)));
            };
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text)
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    /// Every key in registry order; feeding this back reproduces the run.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|&(k, _)| format!("{k} = {}\n", self.values[k])).collect()
    }

    fn raw(&self, key: &str) -> &str {
        &self.values[key]
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| bad_value(key, v, std::any::type_name::<T>().rsplit("::").next().unwrap_or("value")))
    }

    /// Values that are either `none` or parse as `T`.
    fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.raw(key) == "none" {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    fn get_enum<T: FromStr<Err = Error>>(&self, key: &str) -> Result<T> {
        self.raw(key)
            .parse()
            .map_err(|e: Error| Error::Config(format!("config key `{key}`: {}", e.to_string().trim_start_matches("configuration error: "))))
    }

    fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.raw(key);
        v.split(',')
            .map(|p| p.trim().parse().map_err(|_| bad_value(key, v, "a comma-separated list")))
            .collect()
    }

    fn get_triple<T: FromStr + Copy>(&self, key: &str) -> Result<[T; 3]> {
        let v = self.get_list::<T>(key)?;
        <[T; 3]>::try_from(v).map_err(|_| bad_value(key, self.raw(key), "three comma-separated values"))
    }

    fn get_bool(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(bad_value(key, v, "true|false")),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn phantom(&self) -> Result<PhantomConfig> {
        let num_classes: u8 = self.get("num_classes")?;
        let mut p = PhantomConfig::new(self.seed()?, self.get_triple("shape")?, num_classes, self.get("noise_sigma")?);
        p.spacing = self.get_triple("spacing")?;
        p.min_voxels_per_class = self.get("min_voxels_per_class")?;
        if self.raw("intensity_means") != "auto" {
            p.intensity_means = self.get_list("intensity_means")?;
        }
        p.validate().map_err(|e| Error::Config(format!("phantom keys: {e}")))?;
        Ok(p)
    }

    pub fn network(&self) -> Result<NetworkSpec> {
        let num_stages: usize = self.get("num_stages")?;
        let strides = if self.raw("strides") == "auto" {
            (0..num_stages).map(|s| if s == 0 { [1; 3] } else { [2; 3] }).collect()
        } else {
            // stages separated by `;`, axes by `,`
            self.raw("strides")
                .split(';')
                .map(|st| {
                    let axes: Vec<usize> = st
                        .split(',')
                        .map(|a| a.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad_value("strides", self.raw("strides"), "`1,1,1;2,2,2;...`"))?;
                    <[usize; 3]>::try_from(axes).map_err(|_| bad_value("strides", self.raw("strides"), "three axes per stage"))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let spec = NetworkSpec {
            in_channels: 1,
            num_classes: self.get::<u8>("num_classes")? as usize,
            num_stages,
            base_channels: self.get("base_channels")?,
            channel_multiplier: self.get("channel_multiplier")?,
            max_channels: self.get("max_channels")?,
            kernel_size: self.get("kernel_size")?,
            strides,
            conv_mode: self.get_enum::<ConvMode>("arch")?,
            use_residual: self.get_bool("use_residual")?,
            deep_supervision: self.get_bool("deep_supervision")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn loss(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            kind: self.get_enum::<LossKind>("loss")?,
            gamma: self.get("gamma")?,
            epsilon: self.get("epsilon")?,
            reduction: self.get_enum::<Reduction>("reduction")?,
            class_set: self.get_enum::<ClassSet>("class_set")?,
            nrd_mode: self.get_enum::<NrdMode>("nrd_mode")?,
        })
    }

    pub fn preprocess(&self) -> Result<Preprocess> {
        Ok(Preprocess {
            target_spacing: if self.raw("target_spacing") == "none" {
                None
            } else {
                Some(self.get_triple("target_spacing")?)
            },
            clip_lo_pct: self.get("clip_lo_pct")?,
            clip_hi_pct: self.get("clip_hi_pct")?,
            normalization: self.get_enum::<Normalization>("normalization")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let seed = self.seed()?;
        let init = |key: &str, default: u64| -> Result<u64> {
            if self.raw(key) == "auto" {
                Ok(default)
            } else {
                self.get(key)
            }
        };
        let cfg = TrainConfig {
            network: self.network()?,
            mode: match self.raw("mode") {
                "ssl" => TrainMode::Ssl,
                "supervised" => TrainMode::Supervised,
                v => return Err(bad_value("mode", v, "ssl|supervised")),
            },
            patch_size: self.get_triple("patch_size")?,
            batch_size: self.get("batch_size")?,
            foreground_fraction: self.get("foreground_fraction")?,
            total_epochs: self.get("total_epochs")?,
            iterations_per_epoch: self.get("iterations_per_epoch")?,
            base_lr: self.get("base_lr")?,
            momentum: self.get("momentum")?,
            nesterov: self.get_bool("nesterov")?,
            lr_halving_period: self.get("lr_halving_period")?,
            grad_clip: self.get_opt("grad_clip")?.filter(|&c: &f64| c > 0.0),
            loss: self.loss()?,
            consistency_weight: self.get("consistency_weight")?,
            consistency_warmup_epochs: self.get("consistency_warmup_epochs")?,
            consistency_ramp: self.get("consistency_ramp")?,
            cutmix_range: (self.get("cutmix_min")?, self.get("cutmix_max")?),
            pseudo_warmup_epochs: self.get("pseudo_warmup_epochs")?,
            pseudo_refresh_epochs: self.get("pseudo_refresh_epochs")?,
            literal_eq3: self.get_bool("literal_eq3")?,
            seed,
            init_seed_a: init("init_seed_a", seed)?,
            init_seed_b: init("init_seed_b", seed ^ 0x9E37_79B9_7F4A_7C15)?,
            deploy: match self.raw("deploy") {
                "a" => Deploy::A,
                "b" => Deploy::B,
                v => return Err(bad_value("deploy", v, "a|b")),
            },
            preprocess: self.preprocess()?,
            val_every: self.get("val_every")?,
            val_overlap: self.get("val_overlap")?,
            checkpoint_every: self.get("checkpoint_every")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sliding-window tile; `auto` reuses the training patch.
    fn infer_patch(&self) -> Result<[usize; 3]> {
        if self.raw("infer_patch_size") == "auto" {
            self.get_triple("patch_size")
        } else {
            self.get_triple("infer_patch_size")
        }
    }

    pub fn inference(&self) -> Result<InferenceConfig> {
        let cfg = InferenceConfig {
            patch_size: self.infer_patch()?,
            overlap: self.get("overlap")?,
            gaussian_sigma_scale: self.get("gaussian_sigma_scale")?,
            weighting: self.get_enum::<Weighting>("weighting")?,
            tta: self.get_enum::<TtaMode>("tta")?,
            accumulation: self.get_enum::<Accumulation>("fusion")?,
            preprocess: self.preprocess()?,
            resample_back: self.get_bool("resample_back")?,
            max_full_prob_voxels: self.get("max_full_prob_voxels")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn nsd_tolerance(&self) -> Result<Option<f64>> {
        self.get_opt("nsd_tolerance")
    }

    pub fn class_names(&self) -> Result<Option<Vec<String>>> {
        Ok(match self.raw("class_names") {
            "auto" => None,
            v => Some(v.split(',').map(|s| s.trim().to_string()).collect()),
        })
    }

    /// The phantom experiment described by these keys.
    pub fn experiment(&self) -> Result<ExperimentSetup> {
        Ok(ExperimentSetup {
            phantom: self.phantom()?,
            n_labeled: self.get("n_labeled")?,
            n_unlabeled: self.get("n_unlabeled")?,
            n_test: self.get("n_test")?,
            train: self.train()?,
            eval_overlap: self.get("overlap")?,
            eval_patch: Some(self.infer_patch()?),
        })
    }
}
