//! Declarative description of the light UNet and its layer plan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Shape3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    /// Depthwise k³ convolution followed by a 1×1×1 channel mixer.
    Separable,
    Regular,
}

impl std::str::FromStr for ConvMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(ConvMode::Separable),
            "regular" => Ok(ConvMode::Regular),
            _ => Err(Error::Config(format!(
                "unknown conv mode {s:?} (expected separable|regular)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    pub num_stages: usize,
    pub base_channels: usize,
    pub channel_multiplier: usize,
    pub max_channels: usize,
    pub kernel_size: usize,
    /// Per-stage, per-axis downsampling stride. Stage 0 is the full-resolution stage.
    pub strides: Vec<[usize; 3]>,
    pub conv_mode: ConvMode,
    pub use_residual: bool,
    pub deep_supervision: bool,
}

pub const LEAKY_SLOPE: f32 = 0.01;
pub const NORM_EPS: f32 = 1e-5;

impl NetworkSpec {
    /// 4 stages, 16 base channels doubling up to 128, isotropic stride 2.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            in_channels: 1,
            num_classes,
            num_stages: 4,
            base_channels: 16,
            channel_multiplier: 2,
            max_channels: 128,
            kernel_size: 3,
            strides: vec![[1, 1, 1], [2, 2, 2], [2, 2, 2], [2, 2, 2]],
            conv_mode: ConvMode::Separable,
            use_residual: true,
            deep_supervision: false,
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        let mut c = self.base_channels;
        for _ in 0..stage {
            c = (c * self.channel_multiplier).min(self.max_channels);
        }
        c.min(self.max_channels)
    }

    /// Product of strides along each axis; patch dims must be multiples of it.
    pub fn total_stride(&self) -> Shape3 {
        let mut t = [1; 3];
        for s in &self.strides {
            for a in 0..3 {
                t[a] *= s[a];
            }
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        let mut failures = Vec::new();
        if self.in_channels == 0 {
            failures.push("in_channels must be >= 1".to_string());
        }
        if self.num_classes < 2 {
            failures.push("num_classes must be >= 2".to_string());
        }
        if self.num_stages < 2 {
            failures.push("num_stages must be >= 2".to_string());
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            failures.push("need 1 <= base_channels <= max_channels".to_string());
        }
        if self.channel_multiplier == 0 {
            failures.push("channel_multiplier must be >= 1".to_string());
        }
        if self.kernel_size.is_multiple_of(2) {
            failures.push(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.strides.len() != self.num_stages {
            failures.push(format!(
                "strides lists {} stages but num_stages is {}",
                self.strides.len(),
                self.num_stages
            ));
        } else {
            if self.strides[0] != [1, 1, 1] {
                failures.push("stage 0 stride must be 1 on every axis".to_string());
            }
            if self.strides.iter().flatten().any(|&s| s == 0 || s > 2) {
                failures.push("strides must be 1 or 2".to_string());
            }
        }
        if failures.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid network spec: {}", failures.join("; "))))
        }
    }

    /// Checks that a patch can pass through every downsampling stage.
    pub fn check_patch(&self, patch: Shape3) -> Result<()> {
        let t = self.total_stride();
        for a in 0..3 {
            if patch[a] == 0 || !patch[a].is_multiple_of(t[a]) {
                return Err(Error::Shape(format!(
                    "patch dim {} on axis {a} is not divisible by total stride {}",
                    patch[a], t[a]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Regular,
    Separable,
}

/// One parameterised layer of the plan.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerDesc {
    Conv {
        name: String,
        kind: ConvKind,
        cin: usize,
        cout: usize,
        k: usize,
        stride: [usize; 3],
        bias: bool,
    },
    Norm {
        name: String,
        channels: usize,
    },
    /// Non-overlapping transposed convolution with kernel equal to stride.
    Upsample {
        name: String,
        cin: usize,
        cout: usize,
        stride: [usize; 3],
    },
}

impl LayerDesc {
    pub fn name(&self) -> &str {
        match self {
            LayerDesc::Conv { name, .. } | LayerDesc::Norm { name, .. } | LayerDesc::Upsample { name, .. } => name,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerDesc::Conv {
                kind: ConvKind::Regular,
                cin,
                cout,
                k,
                bias,
                ..
            } => regular_conv_params(cin, cout, k, bias),
            LayerDesc::Conv {
                kind: ConvKind::Separable,
                cin,
                cout,
                k,
                bias,
                ..
            } => separable_conv_params(cin, cout, k, bias),
            LayerDesc::Norm { channels, .. } => 2 * channels,
            LayerDesc::Upsample { cin, cout, stride, .. } => {
                cin * cout * stride.iter().product::<usize>() + cout
            }
        }
    }

    /// Named parameter tensors and their shapes, in storage order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            LayerDesc::Conv {
                name,
                kind,
                cin,
                cout,
                k,
                bias,
                ..
            } => {
                let (cin, cout, k) = (*cin, *cout, *k);
                let mut t = Vec::new();
                match kind {
                    ConvKind::Regular => {
                        t.push((format!("{name}.weight"), vec![cout, cin, k, k, k]));
                        if *bias {
                            t.push((format!("{name}.bias"), vec![cout]));
                        }
                    }
                    ConvKind::Separable => {
                        t.push((format!("{name}.dw_weight"), vec![cin, 1, k, k, k]));
                        if *bias {
                            t.push((format!("{name}.dw_bias"), vec![cin]));
                        }
                        t.push((format!("{name}.pw_weight"), vec![cout, cin, 1, 1, 1]));
                        if *bias {
                            t.push((format!("{name}.pw_bias"), vec![cout]));
                        }
                    }
                }
                t
            }
            LayerDesc::Norm { name, channels } => vec![
                (format!("{name}.scale"), vec![*channels]),
                (format!("{name}.shift"), vec![*channels]),
            ],
            LayerDesc::Upsample { name, cin, cout, stride } => vec![
                (format!("{name}.weight"), vec![*cin, *cout, stride[0], stride[1], stride[2]]),
                (format!("{name}.bias"), vec![*cout]),
            ],
        }
    }
}

/// Regular k³ convolution: `k³·C_in·C_out` weights plus `C_out` biases.
pub fn regular_conv_params(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
    k.pow(3) * cin * cout + if bias { cout } else { 0 }
}

/// Depthwise `k³·C_in` (+`C_in` biases) then pointwise `C_in·C_out` (+`C_out` biases).
pub fn separable_conv_params(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
    k.pow(3) * cin + cin * cout + if bias { cin + cout } else { 0 }
}

/// Residual block of two conv→norm→lrelu units.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    pub conv1: LayerDesc,
    pub norm1: LayerDesc,
    pub conv2: LayerDesc,
    pub norm2: LayerDesc,
    /// 1×1×1 projection on the skip path; `None` when the skip is identity or absent.
    pub proj: Option<LayerDesc>,
    pub residual: bool,
}

impl BlockPlan {
    fn layers(&self) -> impl Iterator<Item = &LayerDesc> {
        [&self.conv1, &self.norm1, &self.conv2, &self.norm2]
            .into_iter()
            .chain(self.proj.iter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPlan {
    pub encoder: Vec<BlockPlan>,
    /// `upsample[s]` lifts decoder level s+1 to level s.
    pub upsample: Vec<LayerDesc>,
    /// `decoder[s]` fuses upsampled features with encoder level s.
    pub decoder: Vec<BlockPlan>,
    pub head: LayerDesc,
    /// Auxiliary heads on decoder levels 1..num_stages-1 (deep supervision).
    pub aux_heads: Vec<LayerDesc>,
}

fn conv(name: String, kind: ConvKind, cin: usize, cout: usize, k: usize, stride: [usize; 3], bias: bool) -> LayerDesc {
    LayerDesc::Conv {
        name,
        kind,
        cin,
        cout,
        k,
        stride,
        bias,
    }
}

fn block(spec: &NetworkSpec, name: &str, cin: usize, cout: usize, stride: [usize; 3], stem: bool) -> BlockPlan {
    let kind = match spec.conv_mode {
        ConvMode::Separable if !stem => ConvKind::Separable,
        _ => ConvKind::Regular,
    };
    let k = spec.kernel_size;
    // Convolutions feeding a normalization carry no bias: the norm shift subsumes it.
    let proj = (spec.use_residual && (cin != cout || stride != [1, 1, 1]))
        .then(|| conv(format!("{name}.proj"), ConvKind::Regular, cin, cout, 1, stride, true));
    BlockPlan {
        conv1: conv(format!("{name}.conv1"), kind, cin, cout, k, stride, false),
        norm1: LayerDesc::Norm {
            name: format!("{name}.norm1"),
            channels: cout,
        },
        conv2: conv(
            format!("{name}.conv2"),
            match spec.conv_mode {
                ConvMode::Separable => ConvKind::Separable,
                ConvMode::Regular => ConvKind::Regular,
            },
            cout,
            cout,
            k,
            [1, 1, 1],
            false,
        ),
        norm2: LayerDesc::Norm {
            name: format!("{name}.norm2"),
            channels: cout,
        },
        proj,
        residual: spec.use_residual,
    }
}

impl NetworkPlan {
    pub fn from_spec(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let s_count = spec.num_stages;
        let mut encoder = Vec::with_capacity(s_count);
        let mut cin = spec.in_channels;
        for s in 0..s_count {
            let cout = spec.stage_channels(s);
            encoder.push(block(spec, &format!("enc{s}"), cin, cout, spec.strides[s], s == 0));
            cin = cout;
        }
        let mut upsample = Vec::with_capacity(s_count - 1);
        let mut decoder = Vec::with_capacity(s_count - 1);
        for s in 0..s_count - 1 {
            let (hi, lo) = (spec.stage_channels(s + 1), spec.stage_channels(s));
            upsample.push(LayerDesc::Upsample {
                name: format!("up{s}"),
                cin: hi,
                cout: lo,
                stride: spec.strides[s + 1],
            });
            decoder.push(block(spec, &format!("dec{s}"), 2 * lo, lo, [1, 1, 1], false));
        }
        let head = conv(
            "head".into(),
            ConvKind::Regular,
            spec.stage_channels(0),
            spec.num_classes,
            1,
            [1, 1, 1],
            true,
        );
        let aux_heads = if spec.deep_supervision {
            (1..s_count - 1)
                .map(|s| {
                    conv(
                        format!("aux{s}"),
                        ConvKind::Regular,
                        spec.stage_channels(s),
                        spec.num_classes,
                        1,
                        [1, 1, 1],
                        true,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            encoder,
            upsample,
            decoder,
            head,
            aux_heads,
        })
    }

    /// Every layer, in parameter storage order.
    pub fn layers(&self) -> Vec<&LayerDesc> {
        let mut out: Vec<&LayerDesc> = Vec::new();
        for b in &self.encoder {
            out.extend(b.layers());
        }
        for (u, d) in self.upsample.iter().zip(&self.decoder) {
            out.push(u);
            out.extend(d.layers());
        }
        out.push(&self.head);
        out.extend(self.aux_heads.iter());
        out
    }
}

/// Exact trainable parameter count of the network described by `spec`.
pub fn count_parameters(spec: &NetworkSpec) -> Result<usize> {
    Ok(NetworkPlan::from_spec(spec)?
        .layers()
        .iter()
        .map(|l| l.param_count())
        .sum())
}

/// Convolution layers of a spec with their parameter counts.
pub fn conv_layer_counts(spec: &NetworkSpec) -> Result<Vec<(String, usize, usize, usize)>> {
    Ok(NetworkPlan::from_spec(spec)?
        .layers()
        .into_iter()
        .filter_map(|l| match l {
            LayerDesc::Conv { name, cin, cout, .. } => Some((name.clone(), *cin, *cout, l.param_count())),
            _ => None,
        })
        .collect())
}
