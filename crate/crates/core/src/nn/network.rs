//! Parameter storage, initialization, and the forward/backward passes of the
//! light UNet.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::kernels::{self, DenseCache, NormCache};
use super::spec::{count_parameters, BlockPlan, ConvKind, LayerDesc, NetworkPlan, NetworkSpec, LEAKY_SLOPE, NORM_EPS};
use super::tensor::Tensor;
use super::ProbField;
use crate::error::{Error, Result};

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A network description together with its trainable parameters.
#[derive(Debug, Clone)]
pub struct NetworkState {
    spec: NetworkSpec,
    init_seed: u64,
    plan: NetworkPlan,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl PartialEq for NetworkState {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

fn fan_in(name: &str, shape: &[usize]) -> usize {
    if name.ends_with("dw_weight") {
        shape[2..].iter().product()
    } else if name.starts_with("up") {
        // transposed conv: every output voxel mixes `cin` inputs through one tap
        shape[0]
    } else {
        shape[1..].iter().product()
    }
}

/// Builds a network with He-normal convolution weights (leaky-ReLU gain),
/// zero biases, unit norm scales and zero norm shifts.
pub fn build_network(spec: &NetworkSpec, init_seed: u64) -> Result<NetworkState> {
    let plan = NetworkPlan::from_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut params = Vec::new();
    for layer in plan.layers() {
        for (name, shape) in layer.tensors() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".scale") {
                vec![1.0; n]
            } else if name.ends_with("bias") || name.ends_with(".shift") {
                vec![0.0; n]
            } else {
                let gain = 2.0 / (1.0 + (LEAKY_SLOPE as f64).powi(2));
                let std = (gain / fan_in(&name, &shape) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            };
            params.push(Param { name, shape, data });
        }
    }
    NetworkState::from_parts(spec.clone(), init_seed, params)
}

impl NetworkState {
    /// Assembles a state from stored tensors, checking names, shapes and the
    /// closed-form parameter count.
    pub fn from_parts(spec: NetworkSpec, init_seed: u64, params: Vec<Param>) -> Result<Self> {
        let plan = NetworkPlan::from_spec(&spec)?;
        let expected: Vec<(String, Vec<usize>)> = plan.layers().iter().flat_map(|l| l.tensors()).collect();
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "network expects {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || *shape != p.shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Config(format!(
                    "parameter {} with shape {:?} does not match expected {name} {shape:?}",
                    p.name, p.shape
                )));
            }
        }
        let total: usize = params.iter().map(|p| p.data.len()).sum();
        let closed_form = count_parameters(&spec)?;
        if total != closed_form {
            return Err(Error::Config(format!(
                "parameter count {total} differs from closed-form count {closed_form}"
            )));
        }
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Self {
            spec,
            init_seed,
            plan,
            params,
            index,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    fn w(&self, name: &str) -> &[f32] {
        &self.params[self.index[name]].data
    }

    fn opt_w(&self, name: &str) -> Option<&[f32]> {
        self.index.get(name).map(|&i| self.params[i].data.as_slice())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, network expects {}",
                x.channels, self.spec.in_channels
            )));
        }
        self.spec.check_patch(x.shape)
    }

    /// Evaluation-mode forward over a batch of patches.
    pub fn forward(&self, batch: &[Tensor]) -> Result<Vec<ProbField>> {
        batch
            .iter()
            .map(|x| {
                self.check_input(x)?;
                let out = self.run(x, false).0;
                Ok(ProbField::from_logits(&out.logits))
            })
            .collect()
    }

    /// Training forward: logits (main and auxiliary) plus the trace needed by [`Self::backward`].
    pub fn forward_train(&self, x: &Tensor) -> Result<(NetOutput, Trace)> {
        self.check_input(x)?;
        let (out, trace) = self.run(x, true);
        Ok((out, trace.expect("recorded trace")))
    }

    fn run(&self, x: &Tensor, record: bool) -> (NetOutput, Option<Trace>) {
        let plan = &self.plan;
        let s_count = plan.encoder.len();
        let mut enc_out: Vec<Tensor> = Vec::with_capacity(s_count);
        let mut enc_tr = Vec::with_capacity(s_count);
        let mut cur = x.clone();
        for b in &plan.encoder {
            let (y, t) = self.block_forward(b, cur, record);
            enc_tr.push(t);
            enc_out.push(y);
            cur = enc_out.last().unwrap().clone();
        }
        let mut dec_tr: Vec<Option<BlockTrace>> = (0..s_count - 1).map(|_| None).collect();
        let mut up_in: Vec<Option<Tensor>> = (0..s_count - 1).map(|_| None).collect();
        let mut aux_logits = Vec::new();
        let mut aux_tr: Vec<Option<DenseCache>> = Vec::new();
        let mut d = enc_out.pop().unwrap();
        for s in (0..s_count - 1).rev() {
            let LayerDesc::Upsample { name, cout, stride, .. } = &plan.upsample[s] else {
                unreachable!("upsample layer")
            };
            let u = kernels::upsample_forward(&d, self.w(&format!("{name}.weight")), self.w(&format!("{name}.bias")), *cout, *stride);
            if record {
                up_in[s] = Some(d);
            }
            let skip = enc_out.pop().unwrap();
            let cat = Tensor::concat(&u, &skip);
            let (y, t) = self.block_forward(&plan.decoder[s], cat, record);
            dec_tr[s] = t;
            d = y;
            if s >= 1 {
                if let Some(aux) = plan.aux_heads.get(s - 1) {
                    let (l, c) = self.conv_forward(aux, &d, record);
                    aux_logits.push(l);
                    aux_tr.push(c.map(|c| match c {
                        ConvTrace::Dense(d) => d,
                        ConvTrace::Separable { .. } => unreachable!("aux heads are dense"),
                    }));
                }
            }
        }
        let (logits, head_tr) = self.conv_forward(&plan.head, &d, record);
        // aux heads were visited from deep to shallow; store shallow first
        aux_logits.reverse();
        aux_tr.reverse();
        let out = NetOutput { logits, aux_logits };
        let trace = record.then(|| Trace {
            enc: enc_tr.into_iter().map(|t| t.unwrap()).collect(),
            dec: dec_tr.into_iter().map(|t| t.unwrap()).collect(),
            up_in: up_in.into_iter().map(|t| t.unwrap()).collect(),
            head: match head_tr.unwrap() {
                ConvTrace::Dense(d) => d,
                ConvTrace::Separable { .. } => unreachable!("head is dense"),
            },
            aux: aux_tr.into_iter().map(|t| t.unwrap()).collect(),
        });
        (out, trace)
    }

    fn conv_forward(&self, layer: &LayerDesc, x: &Tensor, record: bool) -> (Tensor, Option<ConvTrace>) {
        let LayerDesc::Conv {
            name,
            kind,
            cout,
            k,
            stride,
            ..
        } = layer
        else {
            unreachable!("conv layer")
        };
        match kind {
            ConvKind::Regular => {
                let (y, c) = kernels::dense_forward(
                    x,
                    self.w(&format!("{name}.weight")),
                    self.opt_w(&format!("{name}.bias")),
                    *cout,
                    *k,
                    *stride,
                );
                (y, record.then_some(ConvTrace::Dense(c)))
            }
            ConvKind::Separable => {
                let mut dw = kernels::depthwise_forward(x, self.w(&format!("{name}.dw_weight")), *k, *stride);
                if let Some(b) = self.opt_w(&format!("{name}.dw_bias")) {
                    let v = dw.voxels();
                    for (c, &bv) in b.iter().enumerate() {
                        dw.data[c * v..(c + 1) * v].iter_mut().for_each(|a| *a += bv);
                    }
                }
                let (y, c) = kernels::dense_forward(
                    &dw,
                    self.w(&format!("{name}.pw_weight")),
                    self.opt_w(&format!("{name}.pw_bias")),
                    *cout,
                    1,
                    [1, 1, 1],
                );
                (
                    y,
                    record.then(|| ConvTrace::Separable {
                        input: x.clone(),
                        pointwise: c,
                    }),
                )
            }
        }
    }

    fn norm_forward(&self, layer: &LayerDesc, x: &Tensor) -> (Tensor, NormCache) {
        let name = layer.name();
        kernels::norm_act_forward(x, self.w(&format!("{name}.scale")), self.w(&format!("{name}.shift")), NORM_EPS)
    }

    fn block_forward(&self, b: &BlockPlan, x: Tensor, record: bool) -> (Tensor, Option<BlockTrace>) {
        let (a1, c1) = self.conv_forward(&b.conv1, &x, record);
        let (h1, n1) = self.norm_forward(&b.norm1, &a1);
        let (a2, c2) = self.conv_forward(&b.conv2, &h1, record);
        let (mut h2, n2) = self.norm_forward(&b.norm2, &a2);
        let mut proj_tr = None;
        if b.residual {
            match &b.proj {
                Some(p) => {
                    let (s, t) = self.conv_forward(p, &x, record);
                    h2.add_assign(&s);
                    proj_tr = t;
                }
                None => h2.add_assign(&x),
            }
        }
        let trace = record.then(|| BlockTrace {
            conv1: c1.unwrap(),
            norm1: n1,
            conv2: c2.unwrap(),
            norm2: n2,
            proj: proj_tr,
        });
        (h2, trace)
    }

    /// Back-propagates logit gradients, accumulating into `grads`.
    /// `d_aux` aligns with [`NetOutput::aux_logits`].
    pub fn backward(&self, trace: Trace, d_logits: Tensor, d_aux: Vec<Tensor>, grads: &mut Gradients) {
        let plan = &self.plan;
        let s_count = plan.encoder.len();
        let Trace {
            enc,
            dec,
            up_in,
            head,
            aux,
        } = trace;
        let mut g_dec = self.conv_backward(&plan.head, ConvTrace::Dense(head), d_logits, grads);
        let mut aux_it = aux.into_iter().zip(d_aux).zip(plan.aux_heads.iter());
        let mut enc_skip_grads: Vec<Tensor> = Vec::with_capacity(s_count - 1);
        let mut dec_iter = dec.into_iter();
        let mut up_iter = up_in.into_iter();
        for s in 0..s_count - 1 {
            if s >= 1 {
                if let Some(((cache, d), layer)) = aux_it.next() {
                    let g = self.conv_backward(layer, ConvTrace::Dense(cache), d, grads);
                    g_dec.add_assign(&g);
                }
            }
            let g_cat = self.block_backward(&plan.decoder[s], dec_iter.next().unwrap(), g_dec, grads);
            let lo = plan.decoder[s].norm2_channels();
            let (g_up, g_skip) = g_cat.split(lo);
            enc_skip_grads.push(g_skip);
            let LayerDesc::Upsample { name, stride, .. } = &plan.upsample[s] else {
                unreachable!("upsample layer")
            };
            let x = up_iter.next().unwrap();
            let (wi, bi) = (self.index[&format!("{name}.weight")], self.index[&format!("{name}.bias")]);
            let (dw, db) = grads.pair_mut(wi, bi);
            g_dec = kernels::upsample_backward(&x, &self.params[wi].data, *stride, &g_up, dw, db);
        }
        let mut g = g_dec;
        let mut enc_traces: Vec<BlockTrace> = enc;
        for s in (0..s_count).rev() {
            if s < s_count - 1 {
                g.add_assign(&enc_skip_grads[s]);
            }
            let t = enc_traces.pop().unwrap();
            let gx = self.block_backward(&plan.encoder[s], t, g, grads);
            g = gx;
        }
    }

    fn conv_backward(&self, layer: &LayerDesc, trace: ConvTrace, dy: Tensor, grads: &mut Gradients) -> Tensor {
        let LayerDesc::Conv { name, k, stride, .. } = layer else {
            unreachable!("conv layer")
        };
        match trace {
            ConvTrace::Dense(cache) => {
                let wi = self.index[&format!("{name}.weight")];
                let bi = self.index.get(&format!("{name}.bias")).copied();
                let (dw, db) = grads.weight_bias_mut(wi, bi);
                kernels::dense_backward(&cache, &self.params[wi].data, *k, *stride, &dy, dw, db)
            }
            ConvTrace::Separable { input, pointwise } => {
                let pwi = self.index[&format!("{name}.pw_weight")];
                let pbi = self.index.get(&format!("{name}.pw_bias")).copied();
                let (dw, db) = grads.weight_bias_mut(pwi, pbi);
                let g_dw = kernels::dense_backward(&pointwise, &self.params[pwi].data, 1, [1, 1, 1], &dy, dw, db);
                if let Some(&dbi) = self.index.get(&format!("{name}.dw_bias")) {
                    let v = g_dw.voxels();
                    for (c, d) in grads.tensors[dbi].iter_mut().enumerate() {
                        *d += g_dw.data[c * v..(c + 1) * v].iter().sum::<f32>();
                    }
                }
                let dwi = self.index[&format!("{name}.dw_weight")];
                kernels::depthwise_backward(&input, &self.params[dwi].data, *k, *stride, &g_dw, &mut grads.tensors[dwi])
            }
        }
    }

    fn norm_backward(&self, layer: &LayerDesc, cache: &NormCache, dy: &Tensor, grads: &mut Gradients) -> Tensor {
        let name = layer.name();
        let (si, hi) = (self.index[&format!("{name}.scale")], self.index[&format!("{name}.shift")]);
        let (ds, dh) = grads.pair_mut(si, hi);
        kernels::norm_act_backward(cache, &self.params[si].data, &self.params[hi].data, dy, ds, dh)
    }

    fn block_backward(&self, b: &BlockPlan, t: BlockTrace, dy: Tensor, grads: &mut Gradients) -> Tensor {
        let skip_grad = if b.residual {
            match (&b.proj, t.proj) {
                (Some(p), Some(pt)) => Some(self.conv_backward(p, pt, dy.clone(), grads)),
                _ => Some(dy.clone()),
            }
        } else {
            None
        };
        let g = self.norm_backward(&b.norm2, &t.norm2, &dy, grads);
        let g = self.conv_backward(&b.conv2, t.conv2, g, grads);
        let g = self.norm_backward(&b.norm1, &t.norm1, &g, grads);
        let mut g = self.conv_backward(&b.conv1, t.conv1, g, grads);
        if let Some(s) = skip_grad {
            g.add_assign(&s);
        }
        g
    }
}

impl BlockPlan {
    fn norm2_channels(&self) -> usize {
        match self.norm2 {
            LayerDesc::Norm { channels, .. } => channels,
            _ => unreachable!("norm layer"),
        }
    }
}

/// Raw network outputs of a training forward.
#[derive(Debug, Clone)]
pub struct NetOutput {
    pub logits: Tensor,
    /// Deep-supervision logits, shallow (higher resolution) first.
    pub aux_logits: Vec<Tensor>,
}

enum ConvTrace {
    Dense(DenseCache),
    Separable { input: Tensor, pointwise: DenseCache },
}

struct BlockTrace {
    conv1: ConvTrace,
    norm1: NormCache,
    conv2: ConvTrace,
    norm2: NormCache,
    proj: Option<ConvTrace>,
}

/// Activations retained by a training forward.
pub struct Trace {
    enc: Vec<BlockTrace>,
    dec: Vec<BlockTrace>,
    up_in: Vec<Tensor>,
    head: DenseCache,
    aux: Vec<DenseCache>,
}

/// Parameter gradients, aligned with [`NetworkState::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn zeros_like(state: &NetworkState) -> Self {
        Self {
            tensors: state.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(0.0));
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f32) {
        self.tensors.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    /// `self += factor · other`.
    pub fn add_scaled(&mut self, other: &Gradients, factor: f32) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += factor * y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|g| g.is_finite())
    }

    fn pair_mut(&mut self, a: usize, b: usize) -> (&mut [f32], &mut [f32]) {
        assert!(a < b, "parameter order");
        let (lo, hi) = self.tensors.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    }

    fn weight_bias_mut(&mut self, w: usize, b: Option<usize>) -> (&mut [f32], Option<&mut [f32]>) {
        match b {
            Some(b) => {
                let (w, b) = self.pair_mut(w, b);
                (w, Some(b))
            }
            None => (&mut self.tensors[w], None),
        }
    }
}
