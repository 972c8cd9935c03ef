//! Dual-network consistency training.
//!
//! Two identically shaped networks with different initializations each learn
//! from labeled patches and, on CutMix blends of two unlabeled patches, from
//! the other network's blended pseudo-labels.

pub mod cutmix;
pub mod sampler;
mod trainer;

use crate::error::{Error, Result};
use crate::inference::Preprocess;
use crate::losses::{loss_and_grad, LossConfig, LossInput};
use crate::nn::optim::Sgd;
use crate::nn::{build_network, Gradients, NetworkSpec, NetworkState, ProbField, Tensor};
use crate::volume::{voxel_count, Shape3};

pub use cutmix::{make_cutmix_mask, mix, CutMixMask};
pub use sampler::{random_patch, sample_patch_balanced, ClassIndex, RoundRobin};
pub use trainer::{train, EpochLog, TrainData, TrainOutcome, LOG_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Supervised,
    Ssl,
}

/// Which network of the pair is used for validation and deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Deploy {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkSpec,
    pub mode: TrainMode,
    pub patch_size: Shape3,
    /// Samples per stream (labeled patches and unlabeled pairs) per iteration.
    pub batch_size: usize,
    /// Share of patches cropped around a round-robin foreground class; the
    /// rest are uniform crops.
    pub foreground_fraction: f64,
    pub total_epochs: usize,
    pub iterations_per_epoch: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub lr_halving_period: usize,
    /// Global gradient-norm clip per network; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub loss: LossConfig,
    /// λ, the weight of the consistency term.
    pub consistency_weight: f64,
    /// Epochs of labeled-only training before the consistency term starts.
    pub consistency_warmup_epochs: usize,
    /// Fraction of all iterations over which λ then ramps linearly from 0.
    pub consistency_ramp: f64,
    pub cutmix_range: (f64, f64),
    /// Epochs before net A starts producing cropping pseudo-labels.
    pub pseudo_warmup_epochs: usize,
    pub pseudo_refresh_epochs: usize,
    /// Use A's prediction for both pseudo-label sets, as one reading of the
    /// pseudo-label formula would have it.
    pub literal_eq3: bool,
    pub seed: u64,
    pub init_seed_a: u64,
    pub init_seed_b: u64,
    pub deploy: Deploy,
    pub preprocess: Preprocess,
    /// Validate on the test split every this many epochs (0 disables).
    pub val_every: usize,
    pub val_overlap: f64,
    /// Checkpoint every this many epochs (0 keeps only the final one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkSpec::toy(4),
            mode: TrainMode::Ssl,
            patch_size: [56, 160, 160],
            batch_size: 1,
            foreground_fraction: 1.0 / 3.0,
            total_epochs: 1000,
            iterations_per_epoch: 250,
            base_lr: 0.01,
            momentum: 0.99,
            nesterov: true,
            lr_halving_period: 200,
            grad_clip: Some(12.0),
            loss: LossConfig::default(),
            consistency_weight: 1.0,
            consistency_warmup_epochs: 0,
            consistency_ramp: 0.1,
            cutmix_range: (0.25, 0.75),
            pseudo_warmup_epochs: 50,
            pseudo_refresh_epochs: 50,
            literal_eq3: false,
            seed: 0,
            init_seed_a: 1,
            init_seed_b: 2,
            deploy: Deploy::A,
            preprocess: Preprocess::default(),
            val_every: 0,
            val_overlap: 0.0,
            checkpoint_every: 50,
        }
    }
}

/// `base_lr · 0.5^⌊epoch / period⌋`.
pub fn lr_schedule(epoch: usize, base_lr: f64, halving_period: usize) -> f64 {
    base_lr * 0.5f64.powi((epoch / halving_period.max(1)) as i32)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch_size == 0 || self.total_epochs == 0 || self.iterations_per_epoch == 0 {
            bad.push("batch_size, total_epochs and iterations_per_epoch must be >= 1".to_string());
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            bad.push("need base_lr > 0 and 0 <= momentum < 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.foreground_fraction) {
            bad.push("foreground_fraction must be in [0, 1]".to_string());
        }
        if self.lr_halving_period == 0 {
            bad.push("lr_halving_period must be >= 1".to_string());
        }
        if !(self.consistency_weight >= 0.0) || !(0.0..=1.0).contains(&self.consistency_ramp) {
            bad.push("need consistency_weight >= 0 and consistency_ramp in [0, 1]".to_string());
        }
        let (lo, hi) = self.cutmix_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            bad.push(format!("cutmix range ({lo}, {hi}) must satisfy 0 < min <= max < 1"));
        }
        if self.pseudo_refresh_epochs == 0 {
            bad.push("pseudo_refresh_epochs must be >= 1".to_string());
        }
        if self.init_seed_a == self.init_seed_b {
            bad.push("init seeds of the two networks must differ".to_string());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                bad.push("grad_clip must be > 0".to_string());
            }
        }
        if !(0.0..=0.9).contains(&self.val_overlap) {
            bad.push("val_overlap must be in [0, 0.9]".to_string());
        }
        if let Err(e) = self.network.validate() {
            bad.push(e.to_string());
        } else if let Err(e) = self.network.check_patch(self.patch_size) {
            bad.push(e.to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.base_lr, self.lr_halving_period)
    }

    /// λ at a global iteration index: zero during the warm-up epochs, then
    /// a linear ramp up to `consistency_weight`.
    pub fn consistency_weight_at(&self, iteration: usize) -> f64 {
        let start = self.consistency_warmup_epochs * self.iterations_per_epoch;
        if iteration < start {
            return 0.0;
        }
        let ramp = self.consistency_ramp * (self.total_epochs * self.iterations_per_epoch) as f64;
        if ramp < 1.0 {
            self.consistency_weight
        } else {
            self.consistency_weight * ((iteration - start) as f64 / ramp).min(1.0)
        }
    }
}

/// The two networks and their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub net_a: NetworkState,
    pub net_b: NetworkState,
    pub opt_a: Sgd,
    pub opt_b: Sgd,
    pub epoch: usize,
}

impl DualState {
    pub fn new(spec: &NetworkSpec, init_seed_a: u64, init_seed_b: u64, momentum: f64, nesterov: bool) -> Result<Self> {
        if init_seed_a == init_seed_b {
            return Err(Error::Config("init seeds of the two networks must differ".into()));
        }
        let net_a = build_network(spec, init_seed_a)?;
        let net_b = build_network(spec, init_seed_b)?;
        Ok(Self {
            opt_a: Sgd::new(&net_a, momentum as f32, nesterov),
            opt_b: Sgd::new(&net_b, momentum as f32, nesterov),
            net_a,
            net_b,
            epoch: 0,
        })
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        Self::new(&cfg.network, cfg.init_seed_a, cfg.init_seed_b, cfg.momentum, cfg.nesterov)
    }

    pub fn deployed(&self, which: Deploy) -> &NetworkState {
        match which {
            Deploy::A => &self.net_a,
            Deploy::B => &self.net_b,
        }
    }
}

/// Gradient buffers for both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct DualGrads {
    pub a: Gradients,
    pub b: Gradients,
}

impl DualGrads {
    pub fn zeros_like(dual: &DualState) -> Self {
        Self {
            a: Gradients::zeros_like(&dual.net_a),
            b: Gradients::zeros_like(&dual.net_b),
        }
    }

    pub fn zero(&mut self) {
        self.a.zero();
        self.b.zero();
    }
}

/// Per-voxel argmax of the network's prediction (lowest class wins ties).
/// The result is plain data, so nothing downstream can differentiate through it.
pub fn pseudo_label(net: &NetworkState, x: &Tensor) -> Result<Vec<u8>> {
    Ok(net.forward(std::slice::from_ref(x))?.remove(0).argmax())
}

/// Nearest-neighbour downsampling of a target map to an auxiliary output grid.
fn downsample_target(target: &[u8], shape: Shape3, out: Shape3) -> Vec<u8> {
    let f: [usize; 3] = std::array::from_fn(|a| shape[a] / out[a]);
    let mut v = Vec::with_capacity(voxel_count(out));
    for z in 0..out[0] {
        for y in 0..out[1] {
            for x in 0..out[2] {
                v.push(target[(z * f[0] * shape[1] + y * f[1]) * shape[2] + x * f[2]]);
            }
        }
    }
    v
}

fn output_loss(logits: &Tensor, target: &[u8], loss: &LossConfig, weight: f64) -> Result<(f64, Tensor)> {
    let prob = ProbField::from_logits(logits);
    let mu = prob.to_f64();
    let input = LossInput::new(&mu, target, loss)?;
    let (value, grad) = loss_and_grad(&input)?;
    let dprob: Vec<f32> = grad.iter().map(|&g| (g * weight) as f32).collect();
    Ok((value.total, prob.softmax_backward(&dprob)))
}

/// Loss of `net` on `(x, target)`; adds `weight · ∂loss/∂θ` to `grads` and
/// returns the unweighted loss. With deep supervision the auxiliary outputs
/// join with weights halving per level (normalized to sum 1).
pub fn network_loss_step(
    net: &NetworkState,
    x: &Tensor,
    target: &[u8],
    loss: &LossConfig,
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    if target.len() != x.voxels() {
        return Err(Error::Shape(format!(
            "target has {} voxels, patch has {}",
            target.len(),
            x.voxels()
        )));
    }
    let (out, trace) = net.forward_train(x)?;
    let levels = 1 + out.aux_logits.len();
    let norm: f64 = (0..levels).map(|k| 0.5f64.powi(k as i32)).sum();
    let (main, d_logits) = output_loss(&out.logits, target, loss, weight / norm)?;
    let mut total = main / norm;
    let mut d_aux = Vec::with_capacity(out.aux_logits.len());
    for (k, aux) in out.aux_logits.iter().enumerate() {
        let w = 0.5f64.powi(k as i32 + 1) / norm;
        let t = downsample_target(target, x.shape, aux.shape);
        let (v, d) = output_loss(aux, &t, loss, weight * w)?;
        total += w * v;
        d_aux.push(d);
    }
    if !total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {total}")));
    }
    net.backward(trace, d_logits, d_aux, grads);
    Ok(total)
}

/// Both networks learn from the same labeled patch; returns `(loss_a, loss_b)`.
pub fn supervised_step(
    dual: &DualState,
    grads: &mut DualGrads,
    x: &Tensor,
    labels: &[u8],
    loss: &LossConfig,
    weight: f64,
) -> Result<(f64, f64)> {
    Ok((
        network_loss_step(&dual.net_a, x, labels, loss, weight, &mut grads.a)?,
        network_loss_step(&dual.net_b, x, labels, loss, weight, &mut grads.b)?,
    ))
}

/// Blended input and the blended pseudo-labels of each network.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossTargets {
    pub x_mix: Tensor,
    /// Blended pseudo-labels from network A (the target for B).
    pub y_a: Vec<u8>,
    /// Blended pseudo-labels from network B (the target for A).
    pub y_b: Vec<u8>,
}

/// Pseudo-labels of both networks on `x_ui` and `x_uj`, blended with one shared mask.
pub fn cross_targets(
    dual: &DualState,
    x_ui: &Tensor,
    x_uj: &Tensor,
    mask: &CutMixMask,
    literal_eq3: bool,
) -> Result<CrossTargets> {
    if x_ui.shape != mask.shape() || x_uj.shape != mask.shape() {
        return Err(Error::Shape(format!(
            "patches {:?}/{:?} do not match mask {:?}",
            x_ui.shape,
            x_uj.shape,
            mask.shape()
        )));
    }
    let ya_i = pseudo_label(&dual.net_a, x_ui)?;
    let ya_j = pseudo_label(&dual.net_a, x_uj)?;
    let (yb_i, yb_j) = if literal_eq3 {
        (ya_i.clone(), ya_j.clone())
    } else {
        (pseudo_label(&dual.net_b, x_ui)?, pseudo_label(&dual.net_b, x_uj)?)
    };
    Ok(CrossTargets {
        x_mix: Tensor::from_data(x_ui.channels, x_ui.shape, mix(&x_ui.data, &x_uj.data, mask)?),
        y_a: mix(&ya_i, &ya_j, mask)?,
        y_b: mix(&yb_i, &yb_j, mask)?,
    })
}

/// Cross supervision on precomputed targets: A's prediction on the blend is
/// scored against B's blended pseudo-labels and vice versa.
pub fn consistency_step_with_targets(
    dual: &DualState,
    grads: &mut DualGrads,
    targets: &CrossTargets,
    loss: &LossConfig,
    weight: f64,
) -> Result<(f64, f64)> {
    Ok((
        network_loss_step(&dual.net_a, &targets.x_mix, &targets.y_b, loss, weight, &mut grads.a)?,
        network_loss_step(&dual.net_b, &targets.x_mix, &targets.y_a, loss, weight, &mut grads.b)?,
    ))
}

/// One consistency step on the pair `(x_ui, x_uj)`; returns `(cons_a, cons_b)`.
#[allow(clippy::too_many_arguments)]
pub fn consistency_step(
    dual: &DualState,
    grads: &mut DualGrads,
    x_ui: &Tensor,
    x_uj: &Tensor,
    mask: &CutMixMask,
    loss: &LossConfig,
    weight: f64,
    literal_eq3: bool,
) -> Result<(f64, f64)> {
    let targets = cross_targets(dual, x_ui, x_uj, mask, literal_eq3)?;
    consistency_step_with_targets(dual, grads, &targets, loss, weight)
}

/// Clips `grads` to `max_norm` (if given), checks finiteness and applies one SGD step.
pub fn apply_update(net: &mut NetworkState, opt: &mut Sgd, grads: &mut Gradients, lr: f64, max_norm: Option<f64>) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    if let Some(max) = max_norm {
        let n = grads.global_norm();
        if n > max {
            grads.scale((max / n) as f32);
        }
    }
    opt.step(net, grads, lr as f32);
    Ok(())
}
