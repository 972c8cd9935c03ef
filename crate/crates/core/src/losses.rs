//! Segmentation losses on softmax outputs: the robust loss (noise-robust Dice
//! plus Taylor cross entropy), the Dice + CE baseline, and a central
//! finite-difference gradient checker.
//!
//! Every loss takes probabilities `μ` laid out as `[C, voxels]` and an integer
//! target map whose one-hot expansion is `υ`. Gradients are returned with
//! respect to `μ` directly.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::ProbField;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Noise-robust Dice + Taylor cross entropy.
    Rs,
    DiceCe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over voxels for the CE family, mean over classes for the Dice family.
    Mean,
    /// Plain sums.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassSet {
    ForegroundOnly,
    AllClasses,
}

/// How the noise-robust Dice ratio aggregates classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NrdMode {
    /// One ratio per class, then reduced over classes.
    PerClass,
    /// A single ratio whose sums run over all voxels and classes jointly.
    Global,
}

macro_rules! parse_enum {
    ($ty:ty, $what:literal, { $($s:literal => $v:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", $what, " {:?} (expected {})"),
                        s,
                        [$($s),+].join("|")
                    ))),
                }
            }
        }
    };
}

parse_enum!(LossKind, "loss", { "rs" => LossKind::Rs, "dice_ce" => LossKind::DiceCe });
parse_enum!(Reduction, "reduction", { "mean" => Reduction::Mean, "sum" => Reduction::Sum });
parse_enum!(ClassSet, "class set", { "foreground_only" => ClassSet::ForegroundOnly, "all_classes" => ClassSet::AllClasses });
parse_enum!(NrdMode, "nrd mode", { "per_class" => NrdMode::PerClass, "global" => NrdMode::Global });

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma: f64,
    pub epsilon: f64,
    pub reduction: Reduction,
    pub class_set: ClassSet,
    pub nrd_mode: NrdMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Rs,
            gamma: 1.5,
            epsilon: 1e-5,
            reduction: Reduction::Mean,
            class_set: ClassSet::ForegroundOnly,
            nrd_mode: NrdMode::PerClass,
        }
    }
}

/// A named breakdown of a loss; `total` is the sum of the components.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub components: Vec<(&'static str, f64)>,
}

impl LossValue {
    fn from_parts(components: Vec<(&'static str, f64)>) -> Self {
        Self {
            total: components.iter().map(|c| c.1).sum(),
            components,
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|c| c.0 == name).map(|c| c.1)
    }
}

/// Softmax output `μ` paired with the integer target whose one-hot is `υ`.
#[derive(Debug, Clone, Copy)]
pub struct LossInput<'a> {
    pub mu: &'a ProbField<f64>,
    pub target: &'a [u8],
    pub config: &'a LossConfig,
}

impl<'a> LossInput<'a> {
    pub fn new(mu: &'a ProbField<f64>, target: &'a [u8], config: &'a LossConfig) -> Result<Self> {
        if !(config.gamma > 0.0) || !(config.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma ({}) and epsilon ({}) must be positive",
                config.gamma, config.epsilon
            )));
        }
        if mu.data.len() != mu.num_classes * target.len() {
            return Err(Error::Shape(format!(
                "probability field holds {} values for {} classes but target has {} voxels",
                mu.data.len(),
                mu.num_classes,
                target.len()
            )));
        }
        if let Some(&bad) = target.iter().find(|&&t| t as usize >= mu.num_classes) {
            return Err(Error::InvalidArgument(format!("target class {bad} >= {}", mu.num_classes)));
        }
        Ok(Self { mu, target, config })
    }

    fn voxels(&self) -> usize {
        self.target.len()
    }

    fn classes(&self) -> std::ops::Range<usize> {
        match self.config.class_set {
            ClassSet::ForegroundOnly => 1..self.mu.num_classes,
            ClassSet::AllClasses => 0..self.mu.num_classes,
        }
    }

    fn class_weight(&self) -> f64 {
        match self.config.reduction {
            Reduction::Mean => 1.0 / self.classes().len().max(1) as f64,
            Reduction::Sum => 1.0,
        }
    }

    fn voxel_weight(&self) -> f64 {
        match self.config.reduction {
            Reduction::Mean => 1.0 / self.voxels() as f64,
            Reduction::Sum => 1.0,
        }
    }

    fn mu_c(&self, c: usize) -> &[f64] {
        let v = self.voxels();
        &self.mu.data[c * v..(c + 1) * v]
    }

    fn true_prob(&self, n: usize) -> f64 {
        self.mu.data[self.target[n] as usize * self.voxels() + n]
    }
}

#[inline]
fn onehot(target: u8, c: usize) -> f64 {
    if target as usize == c {
        1.0
    } else {
        0.0
    }
}

/// `(Σ|μ−υ|^γ, Σμ² + Συ²)` for class `c`.
fn nrd_sums(input: &LossInput, c: usize) -> (f64, f64) {
    let gamma = input.config.gamma;
    let (mut num, mut den) = (0.0, 0.0);
    for (&m, &t) in input.mu_c(c).iter().zip(input.target) {
        let u = onehot(t, c);
        num += (m - u).abs().powf(gamma);
        den += m * m + u * u;
    }
    (num, den)
}

/// Noise-robust Dice loss: `Σ|μ−υ|^γ / (Σμ² + Συ² + ε)`.
pub fn nrd_loss(input: &LossInput) -> Result<f64> {
    let eps = input.config.epsilon;
    Ok(match input.config.nrd_mode {
        NrdMode::PerClass => {
            input.classes().map(|c| {
                let (num, den) = nrd_sums(input, c);
                num / (den + eps)
            }).sum::<f64>()
                * input.class_weight()
        }
        NrdMode::Global => {
            let (num, den) = input
                .classes()
                .map(|c| nrd_sums(input, c))
                .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            num / (den + eps)
        }
    })
}

fn nrd_grad(input: &LossInput, grad: &mut [f64], scale: f64) {
    let (gamma, eps) = (input.config.gamma, input.config.epsilon);
    let v = input.voxels();
    let per_class = |c: usize| {
        let (num, den) = nrd_sums(input, c);
        (num, den + eps)
    };
    let ratios: Vec<(usize, f64, f64)> = match input.config.nrd_mode {
        NrdMode::PerClass => {
            let w = input.class_weight();
            input.classes().map(|c| {
                let (n, d) = per_class(c);
                (c, n / d, d / w)
            }).collect()
        }
        NrdMode::Global => {
            let (num, den) = input
                .classes()
                .map(|c| nrd_sums(input, c))
                .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            let d = den + eps;
            input.classes().map(|c| (c, num / d, d)).collect()
        }
    };
    // with ratio r = N/D scaled by w: ∂/∂μ = (γ|d|^{γ-1}sgn(d) − r·2μ) / (D/w)
    for (c, ratio, den_over_w) in ratios {
        let g = &mut grad[c * v..(c + 1) * v];
        for ((gv, &m), &t) in g.iter_mut().zip(input.mu_c(c)).zip(input.target) {
            let d = m - onehot(t, c);
            let dnum = if d == 0.0 {
                0.0
            } else {
                gamma * d.abs().powf(gamma - 1.0) * d.signum()
            };
            *gv += scale * (dnum - ratio * 2.0 * m) / den_over_w;
        }
    }
}

/// Taylor cross entropy: `(1 − μ_true) + (1 − μ_true)²/2` reduced over voxels.
pub fn tce_loss(input: &LossInput) -> Result<f64> {
    let s: f64 = (0..input.voxels())
        .map(|n| {
            let q = 1.0 - input.true_prob(n);
            q + q * q / 2.0
        })
        .sum();
    Ok(s * input.voxel_weight())
}

fn tce_grad(input: &LossInput, grad: &mut [f64], scale: f64) {
    let v = input.voxels();
    let w = input.voxel_weight() * scale;
    for n in 0..v {
        let x = input.true_prob(n);
        grad[input.target[n] as usize * v + n] += -(2.0 - x) * w;
    }
}

pub const CE_CLAMP: f64 = 1e-7;

fn ce_value(input: &LossInput) -> f64 {
    let s: f64 = (0..input.voxels())
        .map(|n| -input.true_prob(n).clamp(CE_CLAMP, 1.0).ln())
        .sum();
    s * input.voxel_weight()
}

fn ce_grad(input: &LossInput, grad: &mut [f64], scale: f64) {
    let v = input.voxels();
    let w = input.voxel_weight() * scale;
    for n in 0..v {
        let x = input.true_prob(n);
        if x > CE_CLAMP && x <= 1.0 {
            grad[input.target[n] as usize * v + n] += -w / x;
        }
    }
}

/// `(Σμυ, Σμ² + Συ²)` for class `c`.
fn dice_sums(input: &LossInput, c: usize) -> (f64, f64) {
    let (mut inter, mut den) = (0.0, 0.0);
    for (&m, &t) in input.mu_c(c).iter().zip(input.target) {
        let u = onehot(t, c);
        inter += m * u;
        den += m * m + u * u;
    }
    (inter, den)
}

/// Soft Dice loss `1 − 2Σμυ/(Σμ² + Συ² + ε)` reduced over classes.
fn dice_value(input: &LossInput) -> f64 {
    let eps = input.config.epsilon;
    input
        .classes()
        .map(|c| {
            let (i, d) = dice_sums(input, c);
            1.0 - 2.0 * i / (d + eps)
        })
        .sum::<f64>()
        * input.class_weight()
}

fn dice_grad(input: &LossInput, grad: &mut [f64], scale: f64) {
    let eps = input.config.epsilon;
    let v = input.voxels();
    let w = input.class_weight() * scale;
    for c in input.classes() {
        let (i, d) = dice_sums(input, c);
        let d = d + eps;
        let g = &mut grad[c * v..(c + 1) * v];
        for ((gv, &m), &t) in g.iter_mut().zip(input.mu_c(c)).zip(input.target) {
            let u = onehot(t, c);
            *gv += w * (-2.0 * u / d + 4.0 * i * m / (d * d));
        }
    }
}

/// Soft Dice plus mean cross entropy (probabilities clamped to `[1e-7, 1]` in the log).
pub fn dice_ce_loss(input: &LossInput) -> Result<LossValue> {
    Ok(LossValue::from_parts(vec![("dice", dice_value(input)), ("ce", ce_value(input))]))
}

/// Robust segmentation loss: noise-robust Dice plus Taylor cross entropy.
pub fn rs_loss(input: &LossInput) -> Result<LossValue> {
    Ok(LossValue::from_parts(vec![("nrd", nrd_loss(input)?), ("tce", tce_loss(input)?)]))
}

/// The loss selected by the configuration.
pub fn loss_value(input: &LossInput) -> Result<LossValue> {
    match input.config.kind {
        LossKind::Rs => rs_loss(input),
        LossKind::DiceCe => dice_ce_loss(input),
    }
}

/// Identifies a single loss (or loss combination) for gradient checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossId {
    Nrd,
    Tce,
    DiceCe,
    Rs,
}

impl LossId {
    pub const ALL: [LossId; 4] = [LossId::Nrd, LossId::Tce, LossId::DiceCe, LossId::Rs];

    pub fn name(self) -> &'static str {
        match self {
            LossId::Nrd => "nrd",
            LossId::Tce => "tce",
            LossId::DiceCe => "dice_ce",
            LossId::Rs => "rs",
        }
    }
}

impl From<LossKind> for LossId {
    fn from(k: LossKind) -> Self {
        match k {
            LossKind::Rs => LossId::Rs,
            LossKind::DiceCe => LossId::DiceCe,
        }
    }
}

pub fn value_of(id: LossId, input: &LossInput) -> Result<f64> {
    Ok(match id {
        LossId::Nrd => nrd_loss(input)?,
        LossId::Tce => tce_loss(input)?,
        LossId::DiceCe => dice_ce_loss(input)?.total,
        LossId::Rs => rs_loss(input)?.total,
    })
}

/// Analytic `∂loss/∂μ`, laid out like `μ`.
pub fn gradient_of(id: LossId, input: &LossInput) -> Vec<f64> {
    let mut g = vec![0.0; input.mu.data.len()];
    match id {
        LossId::Nrd => nrd_grad(input, &mut g, 1.0),
        LossId::Tce => tce_grad(input, &mut g, 1.0),
        LossId::DiceCe => {
            dice_grad(input, &mut g, 1.0);
            ce_grad(input, &mut g, 1.0);
        }
        LossId::Rs => {
            nrd_grad(input, &mut g, 1.0);
            tce_grad(input, &mut g, 1.0);
        }
    }
    g
}

/// The configured loss and its gradient with respect to `μ`.
pub fn loss_and_grad(input: &LossInput) -> Result<(LossValue, Vec<f64>)> {
    let value = loss_value(input)?;
    Ok((value, gradient_of(input.config.kind.into(), input)))
}

/// Maximum relative error between the analytic gradient and central finite
/// differences `(L(μ+h) − L(μ−h)) / 2h`, perturbing each entry of `μ` alone.
pub fn gradient_check(
    id: LossId,
    mu: &ProbField<f64>,
    target: &[u8],
    config: &LossConfig,
    step: f64,
) -> Result<f64> {
    let input = LossInput::new(mu, target, config)?;
    let analytic = gradient_of(id, &input);
    let mut probe = mu.clone();
    let mut worst = 0.0f64;
    for i in 0..mu.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let plus = value_of(id, &LossInput::new(&probe, target, config)?)?;
        probe.data[i] = orig - step;
        let minus = value_of(id, &LossInput::new(&probe, target, config)?)?;
        probe.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let scale = analytic[i].abs().max(numeric.abs());
        if scale > 0.0 {
            worst = worst.max((analytic[i] - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

/// Random probabilities of shape `[c, shape]`, each class drawn from
/// `[0.05, 0.95]` and renormalized per voxel, with uniform random targets.
pub fn random_field<R: rand::Rng>(rng: &mut R, c: usize, shape: [usize; 3]) -> (ProbField<f64>, Vec<u8>) {
    let v = shape.iter().product::<usize>();
    let mut data = vec![0.0; c * v];
    for n in 0..v {
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..0.95)).collect();
        let s: f64 = raw.iter().sum();
        for k in 0..c {
            data[k * v + n] = raw[k] / s;
        }
    }
    let target = (0..v).map(|_| rng.random_range(0..c as u8)).collect();
    (ProbField { num_classes: c, shape, data }, target)
}

/// Worst relative gradient error per loss variant over `fields` random
/// 3-class 4³ fields, with finite-difference step `1e-5`.
pub fn gradient_check_suite(seed: u64, fields: usize) -> Result<Vec<(String, f64)>> {
    use rand::SeedableRng;
    let variants = [
        ("dice_ce", LossId::DiceCe, 1.5),
        ("nrd_gamma_1.5", LossId::Nrd, 1.5),
        ("nrd_gamma_2", LossId::Nrd, 2.0),
        ("tce", LossId::Tce, 1.5),
        ("rs", LossId::Rs, 1.5),
    ];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cases: Vec<_> = (0..fields).map(|_| random_field(&mut rng, 3, [4, 4, 4])).collect();
    variants
        .iter()
        .map(|&(name, id, gamma)| {
            let cfg = LossConfig { gamma, ..Default::default() };
            let mut worst = 0.0f64;
            for (mu, target) in &cases {
                worst = worst.max(gradient_check(id, mu, target, &cfg, 1e-5)?);
            }
            Ok((name.to_string(), worst))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(c: usize, probs: Vec<f64>) -> ProbField<f64> {
        let v = probs.len() / c;
        ProbField {
            num_classes: c,
            shape: [1, 1, v],
            data: probs,
        }
    }

    fn random_case(rng: &mut ChaCha8Rng, c: usize, v: usize) -> (ProbField<f64>, Vec<u8>) {
        let mut data = vec![0.0; c * v];
        for n in 0..v {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..0.95)).collect();
            let s: f64 = raw.iter().sum();
            for k in 0..c {
                data[k * v + n] = raw[k] / s;
            }
        }
        let target = (0..v).map(|_| rng.random_range(0..c as u8)).collect();
        (ProbField { num_classes: c, shape: [4, 4, v / 16], data }, target)
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let mu = field(3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let target = [0u8, 1, 2];
        for gamma in [1.0, 1.5, 2.0, 3.0] {
            for eps in [1e-5, 1.0] {
                let cfg = LossConfig { gamma, epsilon: eps, ..Default::default() };
                let inp = LossInput::new(&mu, &target, &cfg).unwrap();
                assert_eq!(nrd_loss(&inp).unwrap(), 0.0);
                assert_eq!(tce_loss(&inp).unwrap(), 0.0);
                assert_eq!(rs_loss(&inp).unwrap().total, 0.0);
            }
        }
        let cfg = LossConfig::default();
        let v = dice_ce_loss(&LossInput::new(&mu, &target, &cfg).unwrap()).unwrap();
        assert!(v.component("dice").unwrap() <= 1e-5);
        assert!(v.component("ce").unwrap() <= 1e-6);
    }

    #[test]
    fn single_voxel_substitutions() {
        let mu = field(2, vec![0.2, 0.8]);
        let target = [1u8];
        let cfg = LossConfig { gamma: 1.5, epsilon: 1e-5, ..Default::default() };
        let inp = LossInput::new(&mu, &target, &cfg).unwrap();
        let expected_nrd = 0.2f64.powf(1.5) / (0.64 + 1.0 + 1e-5);
        assert!((nrd_loss(&inp).unwrap() - expected_nrd).abs() < 1e-12);
        assert!((expected_nrd - 0.054538).abs() < 1e-6);
        let rs = rs_loss(&inp).unwrap();
        assert!((rs.component("tce").unwrap() - 0.22).abs() < 1e-12);
        assert!((rs.total - 0.274538).abs() < 1e-6);

        let half = field(2, vec![0.5, 0.5]);
        let inp = LossInput::new(&half, &target, &cfg).unwrap();
        assert!((tce_loss(&inp).unwrap() - 0.625).abs() < 1e-12);
        let dc = dice_ce_loss(&inp).unwrap();
        assert!((dc.component("ce").unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((dc.component("dice").unwrap() - (1.0 - 1.0 / (1.25 + 1e-5))).abs() < 1e-12);
        assert!((dc.component("dice").unwrap() - 0.2).abs() < 1e-4);
    }

    #[test]
    fn tce_close_to_ce_near_one() {
        let mu = field(2, vec![0.1, 0.9]);
        let cfg = LossConfig::default();
        let inp = LossInput::new(&mu, &[1], &cfg).unwrap();
        let tce = tce_loss(&inp).unwrap();
        assert!((tce - 0.105).abs() < 1e-12);
        let gap = -(0.9f64.ln()) - tce;
        assert!(gap >= 0.0 && gap <= 0.1f64.powi(3) / (3.0 * 0.9));
    }

    #[test]
    fn ce_is_ln2_for_uniform_two_class() {
        let v = 10;
        let mu = field(2, vec![0.5; 2 * v]);
        let mut target = vec![0u8; v];
        target[3] = 1;
        let cfg = LossConfig::default();
        let dc = dice_ce_loss(&LossInput::new(&mu, &target, &cfg).unwrap()).unwrap();
        assert!((dc.component("ce").unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn invalid_parameters_rejected() {
        let mu = field(2, vec![0.5, 0.5]);
        for (gamma, epsilon) in [(0.0, 1e-5), (-1.0, 1e-5), (1.5, 0.0)] {
            let cfg = LossConfig { gamma, epsilon, ..Default::default() };
            assert!(matches!(LossInput::new(&mu, &[0], &cfg), Err(Error::InvalidArgument(_))));
        }
        let cfg = LossConfig::default();
        assert!(LossInput::new(&mu, &[2], &cfg).is_err());
        assert!(LossInput::new(&mu, &[0, 1], &cfg).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let (mu, target) = random_case(&mut rng, 3, 64);
            for (gamma, mode, reduction, set) in [
                (1.5, NrdMode::PerClass, Reduction::Mean, ClassSet::ForegroundOnly),
                (2.0, NrdMode::Global, Reduction::Sum, ClassSet::AllClasses),
                (1.2, NrdMode::PerClass, Reduction::Sum, ClassSet::AllClasses),
            ] {
                let cfg = LossConfig { gamma, nrd_mode: mode, reduction, class_set: set, ..Default::default() };
                for id in LossId::ALL {
                    let err = gradient_check(id, &mu, &target, &cfg, 1e-5).unwrap();
                    assert!(err < 1e-4, "{id:?} {mode:?} {reduction:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn losses_are_non_negative_and_total_is_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (mu, target) = random_case(&mut rng, 4, 32);
            let cfg = LossConfig::default();
            let inp = LossInput::new(&mu, &target, &cfg).unwrap();
            let rs = rs_loss(&inp).unwrap();
            let dc = dice_ce_loss(&inp).unwrap();
            for v in [nrd_loss(&inp).unwrap(), tce_loss(&inp).unwrap(), rs.total, dc.total] {
                assert!(v >= 0.0);
            }
            assert!((rs.total - (nrd_loss(&inp).unwrap() + tce_loss(&inp).unwrap())).abs() < 1e-12);
        }
    }

    #[test]
    fn tce_strictly_decreasing_in_true_probability() {
        let cfg = LossConfig::default();
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let x = i as f64 / 100.0;
            let mu = field(2, vec![1.0 - x, x]);
            let v = tce_loss(&LossInput::new(&mu, &[1], &cfg).unwrap()).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn parse_config_values() {
        assert_eq!("rs".parse::<LossKind>().unwrap(), LossKind::Rs);
        assert_eq!("global".parse::<NrdMode>().unwrap(), NrdMode::Global);
        let err = "dice".parse::<LossKind>().unwrap_err().to_string();
        assert!(err.contains("rs|dice_ce"), "{err}");
    }
}
