//! The micro-CNN: an ordered layer list with explicit forward and backward
//! passes, per-layer trainability, and Adam state.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::layer::{self, LayerKind, LayerSpec};
use super::tensor::Tensor;
use crate::data::Label;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m_w: Vec<T>,
    pub v_w: Vec<T>,
    pub m_b: Vec<T>,
    pub v_b: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    fn zeros(wl: usize, bl: usize) -> Self {
        Self {
            m_w: vec![T::zero(); wl],
            v_w: vec![T::zero(); wl],
            m_b: vec![T::zero(); bl],
            v_b: vec![T::zero(); bl],
            t: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub adam: AdamState<T>,
}

#[derive(Debug, Clone)]
pub struct MicroNet<T> {
    architecture_id: String,
    input_shape: [usize; 3],
    layers: Vec<Layer<T>>,
    /// Layers before this index form the backbone; the rest are the head.
    head_start: usize,
    /// Index of the layer whose output is the Grad-CAM activation stack.
    cam_layer: usize,
    id: u64,
    generation: u64,
}

impl<T: PartialEq> PartialEq for MicroNet<T> {
    /// Structural equality: architecture, parameters and optimizer state.
    fn eq(&self, other: &Self) -> bool {
        self.architecture_id == other.architecture_id
            && self.input_shape == other.input_shape
            && self.layers == other.layers
            && self.head_start == other.head_start
    }
}

/// Activations retained from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    net_id: u64,
    generation: u64,
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Tensor<T>>,
    masks: Vec<Option<Vec<T>>>,
    argmax: Vec<Option<Vec<usize>>>,
    cam_layer: usize,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn probabilities(&self) -> &[T] {
        self.acts.last().expect("nonempty cache").data()
    }

    /// Pre-sigmoid scores, one per batch item.
    pub fn logits(&self) -> &[T] {
        self.acts[self.acts.len() - 2].data()
    }

    /// Final convolutional activation stack `[N, C, H, W]`.
    pub fn cam_activations(&self) -> &Tensor<T> {
        &self.acts[self.cam_layer + 1]
    }

    pub fn activation(&self, layer_output: usize) -> &Tensor<T> {
        &self.acts[layer_output + 1]
    }
}

/// Weight and bias gradients of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct GradientSet<T> {
    /// Per layer; `Some` exactly for trainable parameter layers.
    pub params: Vec<Option<ParamGrad<T>>>,
    /// Gradient with respect to the Grad-CAM activation stack.
    pub cam_activation_grad: Tensor<T>,
    pub input_grad: Tensor<T>,
}

impl<T: Scalar> MicroNet<T> {
    /// Builds a network with He-style initialization drawn from `rng`.
    pub fn new<R: Rng>(
        architecture_id: impl Into<String>,
        input_shape: [usize; 3],
        specs: Vec<LayerSpec>,
        head_start: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let architecture_id = architecture_id.into();
        let cam_layer = validate_specs(&input_shape, &specs, head_start)?;
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let (wl, bl) = spec.kind.param_lens();
            let fan_in = match spec.kind {
                LayerKind::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
                LayerKind::Dense { inputs, .. } => inputs,
                _ => 1,
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let weight = (0..wl).map(|_| T::lit(normal.sample(rng))).collect();
            layers.push(Layer {
                spec,
                weight,
                bias: vec![T::zero(); bl],
                adam: AdamState::zeros(wl, bl),
            });
        }
        Ok(Self {
            architecture_id,
            input_shape,
            layers,
            head_start,
            cam_layer,
            id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        })
    }

    pub fn architecture_id(&self) -> &str {
        &self.architecture_id
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn head_start(&self) -> usize {
        self.head_start
    }

    pub fn cam_layer(&self) -> usize {
        self.cam_layer
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Overwrites layer `i`'s parameters. Invalidates outstanding caches.
    pub fn set_params(&mut self, i: usize, weight: Vec<T>, bias: Vec<T>) -> Result<()> {
        let layer = self
            .layers
            .get_mut(i)
            .ok_or_else(|| Error::invalid(format!("no layer {i}")))?;
        if weight.len() != layer.weight.len() || bias.len() != layer.bias.len() {
            return Err(Error::shape(format!("layer {i}"), "parameter length mismatch"));
        }
        layer.weight = weight;
        layer.bias = bias;
        self.generation += 1;
        Ok(())
    }

    pub fn set_trainable(&mut self, i: usize, trainable: bool) {
        self.layers[i].spec.trainable = trainable;
    }

    /// Marks the backbone frozen and the head trainable.
    pub fn freeze_backbone(&mut self) {
        let hs = self.head_start;
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.spec.trainable = i >= hs;
        }
    }

    /// Unfreezes the last `count` parameterized backbone layers.
    pub fn unfreeze_top(&mut self, count: usize) {
        let hs = self.head_start;
        for l in self.layers[..hs].iter_mut().rev().filter(|l| l.spec.kind.has_params()).take(count) {
            l.spec.trainable = true;
        }
    }

    /// Flat copy of all parameters of layers in `range`, weight then bias.
    pub fn flat_params(&self, range: std::ops::Range<usize>) -> Vec<T> {
        self.layers[range]
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    /// Order-sensitive FNV-1a checksum of the bit patterns of the parameters in `range`.
    pub fn checksum(&self, range: std::ops::Range<usize>) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in self.flat_params(range) {
            for b in v.as_f64().to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let [c, h, w] = self.input_shape;
        match *batch.shape() {
            [_, bc, bh, bw] if (bc, bh, bw) == (c, h, w) => Ok(()),
            _ => Err(Error::shape(
                format!("layer 0 ({})", self.layers[0].spec.kind.name()),
                format!("expects input [N, {c}, {h}, {w}], got {:?}", batch.shape()),
            )),
        }
    }

    /// Runs the network. Dropout masks are drawn from `rng` only when
    /// `training` is true.
    pub fn forward<R: Rng>(&self, batch: &Tensor<T>, training: bool, rng: &mut R) -> Result<ForwardCache<T>> {
        self.check_input(batch)?;
        self.forward_from(0, batch.clone(), training, rng)
    }

    /// Inference-mode forward pass; needs no randomness.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<ForwardCache<T>> {
        self.check_input(batch)?;
        self.forward_from(0, batch.clone(), false, &mut NoRng)
    }

    /// Runs layers `start..` on `input`, treating it as the output of layer
    /// `start - 1`. The returned cache holds placeholders for earlier layers.
    pub fn forward_from<R: Rng>(
        &self,
        start: usize,
        input: Tensor<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardCache<T>> {
        let n_layers = self.layers.len();
        let mut acts = Vec::with_capacity(n_layers + 1);
        for _ in 0..start {
            acts.push(Tensor::zeros(vec![0]));
        }
        acts.push(input);
        let mut masks = vec![None; n_layers];
        let mut argmax = vec![None; n_layers];
        for (i, l) in self.layers.iter().enumerate().skip(start) {
            let x = acts.last().expect("activation");
            let y = match l.spec.kind {
                LayerKind::Conv2d { out_ch, kernel, .. } => layer::conv_forward(x, &l.weight, &l.bias, out_ch, kernel),
                LayerKind::Relu => Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v.max(T::zero())).collect())?,
                LayerKind::MaxPool2 => {
                    let (y, arg) = layer::maxpool_forward(x);
                    argmax[i] = Some(arg);
                    y
                }
                LayerKind::Dense { units, .. } => layer::dense_forward(x, &l.weight, &l.bias, units),
                LayerKind::Dropout { rate } => {
                    if training && rate > 0.0 {
                        let keep = T::one() / T::lit(1.0 - rate);
                        let mask: Vec<T> = (0..x.len())
                            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                            .collect();
                        let y = Tensor::new(
                            x.shape().to_vec(),
                            x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
                        )?;
                        masks[i] = Some(mask);
                        y
                    } else {
                        x.clone()
                    }
                }
                LayerKind::SigmoidHead => {
                    Tensor::new(vec![x.batch(), 1], x.data().iter().map(|&v| v.sigmoid()).collect())?
                }
            };
            acts.push(y);
        }
        Ok(ForwardCache {
            net_id: self.id,
            generation: self.generation,
            acts,
            masks,
            argmax,
            cam_layer: self.cam_layer,
        })
    }

    /// Mean binary cross-entropy of the cached probabilities, computed from
    /// the logits.
    pub fn loss(&self, cache: &ForwardCache<T>, labels: &[Label]) -> Result<T> {
        let z = cache.logits();
        if z.len() != labels.len() {
            return Err(Error::shape("loss", format!("{} outputs vs {} labels", z.len(), labels.len())));
        }
        let total: T = z
            .iter()
            .zip(labels)
            .map(|(&z, &y)| {
                let sp = if z > T::zero() { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                sp - y.target::<T>() * z
            })
            .sum();
        Ok(total / T::from_count(z.len()))
    }

    /// Gradients of [`loss`](Self::loss).
    pub fn backward(&self, cache: &ForwardCache<T>, labels: &[Label]) -> Result<GradientSet<T>> {
        let p = cache.probabilities();
        if p.len() != labels.len() {
            return Err(Error::shape("backward", format!("{} outputs vs {} labels", p.len(), labels.len())));
        }
        let n = T::from_count(p.len());
        let dlogit: Vec<T> = p.iter().zip(labels).map(|(&p, &y)| (p - y.target::<T>()) / n).collect();
        self.backward_from_logits(cache, &dlogit)
    }

    /// Backpropagates an arbitrary upstream gradient on the logits.
    pub fn backward_from_logits(&self, cache: &ForwardCache<T>, dlogit: &[T]) -> Result<GradientSet<T>> {
        if cache.net_id != self.id || cache.generation != self.generation {
            return Err(Error::invalid("stale forward cache: parameters changed since the forward pass"));
        }
        let n_layers = self.layers.len();
        let batch = cache.acts[0].batch();
        if dlogit.len() != batch {
            return Err(Error::shape("backward", format!("{} logit gradients for batch {batch}", dlogit.len())));
        }
        if cache.acts.iter().take(1).any(|a| a.shape() == [0]) {
            return Err(Error::invalid("backward needs a full forward pass"));
        }
        let mut grad = Tensor::new(vec![batch, 1], dlogit.to_vec())?;
        let mut params = vec![None; n_layers];
        let mut cam_grad = None;
        // the sigmoid head is last; its gradient is folded into `dlogit`
        for i in (0..n_layers - 1).rev() {
            if i == self.cam_layer {
                cam_grad = Some(grad.clone());
            }
            let l = &self.layers[i];
            let x = &cache.acts[i];
            let want = l.spec.trainable && l.spec.kind.has_params();
            grad = match l.spec.kind {
                LayerKind::Conv2d { kernel, .. } => {
                    let (dx, pg) = layer::conv_backward(x, &l.weight, &grad, kernel, want);
                    params[i] = pg.map(|(weight, bias)| ParamGrad { weight, bias });
                    dx
                }
                LayerKind::Dense { .. } => {
                    let (dx, pg) = layer::dense_backward(x, &l.weight, &grad, want);
                    params[i] = pg.map(|(weight, bias)| ParamGrad { weight, bias });
                    dx
                }
                LayerKind::Relu => Tensor::new(
                    x.shape().to_vec(),
                    x.data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                )?,
                LayerKind::MaxPool2 => {
                    let arg = cache.argmax[i].as_ref().expect("pool argmax cached");
                    layer::maxpool_backward(x.shape(), arg, &grad)
                }
                LayerKind::Dropout { .. } => match &cache.masks[i] {
                    Some(mask) => Tensor::new(
                        x.shape().to_vec(),
                        grad.data().iter().zip(mask).map(|(&g, &m)| g * m).collect(),
                    )?,
                    None => Tensor::new(x.shape().to_vec(), grad.into_data())?,
                },
                LayerKind::SigmoidHead => unreachable!("sigmoid head must be last"),
            };
        }
        Ok(GradientSet {
            params,
            cam_activation_grad: cam_grad.expect("cam layer precedes the head"),
            input_grad: grad,
        })
    }

    /// One Adam update of every trainable layer. Frozen layers are untouched.
    pub fn adam_step(&mut self, grads: &GradientSet<T>, lr: T) -> Result<()> {
        if grads.params.len() != self.layers.len() {
            return Err(Error::shape("adam_step", "gradient set does not match the layer list"));
        }
        for (i, (l, g)) in self.layers.iter().zip(&grads.params).enumerate() {
            let trainable = l.spec.trainable && l.spec.kind.has_params();
            match (trainable, g) {
                (true, None) => {
                    return Err(Error::invalid(format!("missing gradient for trainable layer {i}")));
                }
                (false, Some(_)) => {
                    return Err(Error::invalid(format!("gradient supplied for frozen layer {i}")));
                }
                (true, Some(g)) => {
                    if g.weight.len() != l.weight.len() || g.bias.len() != l.bias.len() {
                        return Err(Error::shape(format!("layer {i}"), "gradient length mismatch"));
                    }
                    let bad = |name: &str, v: &[T]| {
                        v.iter().position(|x| !x.is_finite()).map(|j| {
                            Error::numeric(format!("non-finite gradient at layers[{i}].{name}[{j}] ({})", l.spec.kind.name()))
                        })
                    };
                    if let Some(e) = bad("weight", &g.weight).or_else(|| bad("bias", &g.bias)) {
                        return Err(e);
                    }
                }
                (false, None) => {}
            }
        }
        let (b1, b2, eps) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2), T::lit(ADAM_EPS));
        let mut changed = false;
        for (l, g) in self.layers.iter_mut().zip(&grads.params) {
            let Some(g) = g else { continue };
            let a = &mut l.adam;
            a.t += 1;
            let t = i32::try_from(a.t).unwrap_or(i32::MAX);
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let update = |p: &mut [T], m: &mut [T], v: &mut [T], g: &[T]| {
                for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                }
            };
            update(&mut l.weight, &mut a.m_w, &mut a.v_w, &g.weight);
            update(&mut l.bias, &mut a.m_b, &mut a.v_b, &g.bias);
            changed = true;
        }
        if changed {
            self.generation += 1;
        }
        Ok(())
    }
}

/// Checks structural invariants and returns the Grad-CAM layer index: the
/// last conv layer, or the ReLU directly after it.
fn validate_specs(input: &[usize; 3], specs: &[LayerSpec], head_start: usize) -> Result<usize> {
    if specs.is_empty() {
        return Err(Error::invalid("network has no layers"));
    }
    if head_start > specs.len() {
        return Err(Error::invalid("head start beyond the layer list"));
    }
    let heads = specs.iter().filter(|s| s.kind == LayerKind::SigmoidHead).count();
    if heads != 1 || specs.last().map(|s| s.kind) != Some(LayerKind::SigmoidHead) {
        return Err(Error::invalid("network needs exactly one sigmoid_head, as its last layer"));
    }
    let last_conv = specs
        .iter()
        .rposition(|s| matches!(s.kind, LayerKind::Conv2d { .. }))
        .ok_or_else(|| Error::invalid("network needs at least one conv2d layer"))?;
    let mut shape = input.to_vec();
    for (i, s) in specs.iter().enumerate() {
        shape = s
            .kind
            .output_shape(&shape)
            .map_err(|e| Error::shape(format!("layer {i}"), e.to_string()))?;
    }
    let cam = if specs.get(last_conv + 1).map(|s| s.kind) == Some(LayerKind::Relu) {
        last_conv + 1
    } else {
        last_conv
    };
    Ok(cam)
}

/// RNG stand-in for inference, where dropout draws nothing.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("inference draws no randomness")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("inference draws no randomness")
    }

    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("inference draws no randomness")
    }
}
