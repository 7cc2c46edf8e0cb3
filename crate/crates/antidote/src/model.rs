//! Model specs, the dimension chain-check, built-in architectures, and the
//! executable model with forward/backward passes.
//!
//! A dynamic-prune layer recomputes its mask per batch element from the
//! attention of the current input (post-ReLU), zeroes the masked channels
//! and spatial columns, and treats the mask as a constant in backward.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::attention::{keep_count, make_mask, MaskCriterion, PruneMask};
use crate::error::{Error, Result};
use crate::layers::{
    global_avg_pool_bwd, global_avg_pool_fwd, maxpool2x2_bwd, maxpool2x2_fwd, relu_bwd, relu_fwd,
    sgd_step, Conv2dLayer, DenseLayer,
};
use crate::rng::Rng;
use crate::tensor::Tensor4;

// ---------------------------------------------------------------------------
// Spec
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    DynPrune,
    MaxPool2x2,
    GlobalAvgPool,
    Dense { out_features: usize },
    /// Terminal loss marker; must be the last entry when present.
    SoftmaxXent,
}

/// Accounting-only convolution (ResNet downsample shortcuts): counted in
/// FLOPs reports, never part of the executable chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraConv {
    pub name: String,
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub h_out: usize,
    pub w_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    /// (c, h, w) of one input sample.
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Half-open layer-index ranges grouping conv/prune layers into blocks.
    pub blocks: Vec<(usize, usize)>,
    pub extra_dense_convs: Vec<ExtraConv>,
}

/// Result of the dimension chain-check.
#[derive(Debug, Clone)]
pub struct SpecLayout {
    /// (c, h, w) of the input to each layer.
    pub layer_inputs: Vec<(usize, usize, usize)>,
    /// Display name per layer ("conv01", "fc1", "relu", ...).
    pub layer_names: Vec<String>,
    /// block index per layer for DynPrune layers, usize::MAX elsewhere.
    pub dynprune_block: Vec<usize>,
    pub conv_count: usize,
}

/// Spatial column pruning is disabled on maps of 4x4 and smaller; pruning
/// such maps is unrecoverable in training, so accounting mirrors the rule.
pub fn spatial_prune_allowed(h: usize, w: usize) -> bool {
    h * w > 16
}

/// Keep fraction after top-k quantization: k / count.
pub fn effective_channel_keep(p_keep: f64, c: usize) -> Result<f64> {
    Ok(keep_count(p_keep, c)? as f64 / c as f64)
}

pub fn effective_spatial_keep(p_keep: f64, h: usize, w: usize) -> Result<f64> {
    if !spatial_prune_allowed(h, w) {
        // validate the ratio anyway, then ignore it
        keep_count(p_keep, h * w)?;
        return Ok(1.0);
    }
    Ok(keep_count(p_keep, h * w)? as f64 / (h * w) as f64)
}

impl ModelSpec {
    /// Chain-check every layer's dimensions and block assignment.
    pub fn validate(&self) -> Result<SpecLayout> {
        let mut dims = self.input;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut layer_names = Vec::with_capacity(self.layers.len());
        let mut dynprune_block = vec![usize::MAX; self.layers.len()];
        let mut conv_count = 0usize;
        let mut dense_count = 0usize;

        for (i, (a, b)) in self.blocks.iter().enumerate() {
            if a >= b || *b > self.layers.len() {
                return Err(Error::SpecInvalid {
                    layer: *a,
                    reason: format!("block {i} range ({a}, {b}) is malformed"),
                });
            }
            if i > 0 && self.blocks[i - 1].1 > *a {
                return Err(Error::SpecInvalid {
                    layer: *a,
                    reason: format!("block {i} overlaps block {}", i - 1),
                });
            }
        }

        for (i, layer) in self.layers.iter().enumerate() {
            layer_inputs.push(dims);
            let (c, h, w) = dims;
            match layer {
                LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(Error::SpecInvalid {
                            layer: i,
                            reason: "conv parameters must be >= 1".into(),
                        });
                    }
                    let hp = h + 2 * padding;
                    let wp = w + 2 * padding;
                    if hp < *kernel || wp < *kernel {
                        return Err(Error::SpecInvalid {
                            layer: i,
                            reason: format!("input {h}x{w} too small for kernel {kernel}"),
                        });
                    }
                    conv_count += 1;
                    layer_names.push(format!("conv{conv_count:02}"));
                    dims = (
                        *out_channels,
                        (hp - kernel) / stride + 1,
                        (wp - kernel) / stride + 1,
                    );
                }
                LayerSpec::Relu => layer_names.push("relu".into()),
                LayerSpec::DynPrune => {
                    let block = self
                        .blocks
                        .iter()
                        .position(|&(a, b)| i >= a && i < b)
                        .ok_or_else(|| Error::SpecInvalid {
                            layer: i,
                            reason: "dynprune layer outside every block range".into(),
                        })?;
                    dynprune_block[i] = block;
                    layer_names.push(format!("dynprune(b{block})"));
                }
                LayerSpec::MaxPool2x2 => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::SpecInvalid {
                            layer: i,
                            reason: format!("maxpool needs even dims, got {h}x{w}"),
                        });
                    }
                    layer_names.push("maxpool".into());
                    dims = (c, h / 2, w / 2);
                }
                LayerSpec::GlobalAvgPool => {
                    layer_names.push("gap".into());
                    dims = (c, 1, 1);
                }
                LayerSpec::Dense { out_features } => {
                    if *out_features == 0 {
                        return Err(Error::SpecInvalid {
                            layer: i,
                            reason: "dense out_features must be >= 1".into(),
                        });
                    }
                    dense_count += 1;
                    layer_names.push(format!("fc{dense_count}"));
                    dims = (*out_features, 1, 1);
                }
                LayerSpec::SoftmaxXent => {
                    if i + 1 != self.layers.len() {
                        return Err(Error::SpecInvalid {
                            layer: i,
                            reason: "softmax-xent must be the final layer".into(),
                        });
                    }
                    layer_names.push("softmax-xent".into());
                }
            }
        }

        if dims != (self.classes, 1, 1) {
            return Err(Error::SpecInvalid {
                layer: self.layers.len().saturating_sub(1),
                reason: format!("final dims {dims:?} != ({}, 1, 1)", self.classes),
            });
        }
        Ok(SpecLayout { layer_inputs, layer_names, dynprune_block, conv_count })
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }
}

// ---------------------------------------------------------------------------
// Built-in specs
// ---------------------------------------------------------------------------

fn vgg_block(
    layers: &mut Vec<LayerSpec>,
    blocks: &mut Vec<(usize, usize)>,
    convs: usize,
    width: usize,
) {
    let start = layers.len();
    for _ in 0..convs {
        layers.push(LayerSpec::Conv { out_channels: width, kernel: 3, stride: 1, padding: 1 });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::DynPrune);
    }
    layers.push(LayerSpec::MaxPool2x2);
    blocks.push((start, layers.len()));
}

/// 6-conv VGG-style toy: two blocks of widths 16/32 on 1x28x28 inputs.
pub fn toy_vgg_spec() -> ModelSpec {
    toy_vgg_spec_with_input(1, 28, 28)
}

/// The toy architecture over other input dims (e.g. 3x32x32 image files).
pub fn toy_vgg_spec_with_input(c: usize, h: usize, w: usize) -> ModelSpec {
    let mut layers = Vec::new();
    let mut blocks = Vec::new();
    vgg_block(&mut layers, &mut blocks, 3, 16);
    vgg_block(&mut layers, &mut blocks, 3, 32);
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Dense { out_features: 10 });
    layers.push(LayerSpec::SoftmaxXent);
    ModelSpec {
        name: "toy-vgg".into(),
        input: (c, h, w),
        classes: 10,
        layers,
        blocks,
        extra_dense_convs: Vec::new(),
    }
}

/// VGG16 for 32x32 inputs: 13 convs in 5 blocks of 2-2-3-3-3 layers with
/// 64-128-256-512-512 filters, one classifier layer.
pub fn vgg16_cifar_spec() -> ModelSpec {
    let mut layers = Vec::new();
    let mut blocks = Vec::new();
    for (convs, width) in [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)] {
        vgg_block(&mut layers, &mut blocks, convs, width);
    }
    layers.push(LayerSpec::Dense { out_features: 10 });
    layers.push(LayerSpec::SoftmaxXent);
    ModelSpec {
        name: "vgg16-cifar".into(),
        input: (3, 32, 32),
        classes: 10,
        layers,
        blocks,
        extra_dense_convs: Vec::new(),
    }
}

/// VGG16 for 224x224 inputs with the 4096-4096 classifier head (100 classes).
pub fn vgg16_imagenet_spec() -> ModelSpec {
    let mut layers = Vec::new();
    let mut blocks = Vec::new();
    for (convs, width) in [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)] {
        vgg_block(&mut layers, &mut blocks, convs, width);
    }
    layers.push(LayerSpec::Dense { out_features: 4096 });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Dense { out_features: 4096 });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Dense { out_features: 100 });
    layers.push(LayerSpec::SoftmaxXent);
    ModelSpec {
        name: "vgg16-imagenet".into(),
        input: (3, 224, 224),
        classes: 100,
        layers,
        blocks,
        extra_dense_convs: Vec::new(),
    }
}

/// ResNet56 as a FLOPs-accounting spec: 3 groups of 9 residual blocks
/// (18 convs per group) with widths 16/32/64, stride-2 group transitions,
/// pruning only after the odd conv of each block so even-layer outputs keep
/// their size for the skip connection. Shortcut convs are accounting-only.
pub fn resnet56_cifar_spec() -> ModelSpec {
    let mut layers = Vec::new();
    let mut blocks = Vec::new();
    layers.push(LayerSpec::Conv { out_channels: 16, kernel: 3, stride: 1, padding: 1 });
    layers.push(LayerSpec::Relu);
    for (g, width) in [16usize, 32, 64].iter().enumerate() {
        let start = layers.len();
        for b in 0..9 {
            let stride = if g > 0 && b == 0 { 2 } else { 1 };
            layers.push(LayerSpec::Conv { out_channels: *width, kernel: 3, stride, padding: 1 });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::DynPrune);
            layers.push(LayerSpec::Conv { out_channels: *width, kernel: 3, stride: 1, padding: 1 });
            layers.push(LayerSpec::Relu);
        }
        blocks.push((start, layers.len()));
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Dense { out_features: 10 });
    layers.push(LayerSpec::SoftmaxXent);
    ModelSpec {
        name: "resnet56-cifar".into(),
        input: (3, 32, 32),
        classes: 10,
        layers,
        blocks,
        extra_dense_convs: vec![
            ExtraConv { name: "shortcut1".into(), c_out: 32, c_in: 16, kernel: 1, h_out: 16, w_out: 16 },
            ExtraConv { name: "shortcut2".into(), c_out: 64, c_in: 32, kernel: 1, h_out: 8, w_out: 8 },
        ],
    }
}

pub fn builtin_spec(name: &str) -> Option<ModelSpec> {
    match name {
        "toy-vgg" => Some(toy_vgg_spec()),
        "vgg16-cifar" => Some(vgg16_cifar_spec()),
        "vgg16-imagenet" => Some(vgg16_imagenet_spec()),
        "resnet56-cifar" => Some(resnet56_cifar_spec()),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Runtime prune settings
// ---------------------------------------------------------------------------

/// Per-block keep ratios bound to a forward pass. Constructed from
/// user-facing PRUNE ratios r via p = 1 - r.
#[derive(Debug, Clone)]
pub struct PruneSettings {
    pub channel_keep: Vec<f64>,
    pub spatial_keep: Vec<f64>,
    pub criterion: MaskCriterion,
    pub enabled: bool,
    /// Global index of the first batch element; keys Random substreams so a
    /// sample's random mask does not depend on how the batch was sliced.
    pub sample_base: u64,
}

impl PruneSettings {
    pub fn disabled(blocks: usize) -> Self {
        Self {
            channel_keep: vec![1.0; blocks],
            spatial_keep: vec![1.0; blocks],
            criterion: MaskCriterion::Attention,
            enabled: false,
            sample_base: 0,
        }
    }

    pub fn from_prune_ratios(
        blocks: usize,
        channel_prune: &[f64],
        spatial_prune: &[f64],
        criterion: MaskCriterion,
    ) -> Result<Self> {
        if channel_prune.len() != blocks || spatial_prune.len() != blocks {
            return Err(Error::BlockMismatch {
                expected: blocks,
                got: channel_prune.len().max(spatial_prune.len()),
            });
        }
        for &r in channel_prune.iter().chain(spatial_prune) {
            if !(0.0..1.0).contains(&r) || !r.is_finite() {
                return Err(Error::InvalidRatio { value: 1.0 - r });
            }
        }
        Ok(Self {
            channel_keep: channel_prune.iter().map(|r| 1.0 - r).collect(),
            spatial_keep: spatial_prune.iter().map(|r| 1.0 - r).collect(),
            criterion,
            enabled: true,
            sample_base: 0,
        })
    }

    pub fn with_sample_base(mut self, base: u64) -> Self {
        self.sample_base = base;
        self
    }

    fn is_identity_for(&self, block: usize, map: (usize, usize, usize)) -> bool {
        let (_, h, w) = map;
        let spatial_active = spatial_prune_allowed(h, w) && self.spatial_keep[block] < 1.0;
        !self.enabled || (self.channel_keep[block] >= 1.0 && !spatial_active)
    }
}

fn derive_seed(seed: u64, layer: u64, sample: u64) -> u64 {
    let mut r = Rng::substream(seed ^ layer.rotate_left(17), sample);
    r.next_u64()
}

// ---------------------------------------------------------------------------
// Executable model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Layer {
    Conv(Conv2dLayer),
    Relu,
    DynPrune { block: usize },
    MaxPool2x2,
    GlobalAvgPool,
    Dense(DenseLayer),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub layout: SpecLayout,
    layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Cache activations and masks for a following backward pass.
    Train,
    /// Plain inference.
    Eval,
    /// Inference through mask-skipping convolutions with MAC counters.
    Measure,
}

/// Mask state a dynprune layer caches for backward.
#[derive(Debug, Clone)]
pub enum MaskCache {
    /// Layer was a no-op (disabled or keep ratios of 1).
    Identity,
    PerSample(Vec<PruneMask>),
}

/// Per-conv-layer MAC record from a Measure-mode forward.
#[derive(Debug, Clone)]
pub struct LayerMacs {
    pub layer: usize,
    pub name: String,
    /// Counter recorded inside the masked conv loops.
    pub measured: u64,
    /// dense * (kept_channels / c_in) * (kept_columns / (h*w)), summed per
    /// sample from the masks actually applied. Exact integer arithmetic.
    pub analytic: u64,
    pub dense: u64,
}

#[derive(Debug, Default)]
pub struct ForwardTrace {
    /// Input to each layer, cached in Train mode only.
    pub layer_inputs: Vec<Tensor4>,
    pub masks: Vec<Option<MaskCache>>,
    pub argmax: Vec<Option<Vec<u8>>>,
    pub measured: Vec<LayerMacs>,
}

#[derive(Debug, Clone)]
pub enum LayerGrads {
    Conv { weights: Tensor4, bias: Vec<f32> },
    Dense { weights: Vec<f32>, bias: Vec<f32> },
    None,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub per_layer: Vec<LayerGrads>,
    /// Gradient w.r.t. the network input.
    pub input: Tensor4,
}

/// Exact gradient of the masked elementwise multiply: zero at masked
/// positions, pass-through elsewhere. Errors when no mask was cached.
pub fn dynprune_backward(
    grad_out: &Tensor4,
    cache: Option<&MaskCache>,
    layer: usize,
) -> Result<Tensor4> {
    match cache {
        None => Err(Error::MissingMask { layer }),
        Some(MaskCache::Identity) => Ok(grad_out.clone()),
        Some(MaskCache::PerSample(masks)) => apply_masks_per_sample(grad_out, masks),
    }
}

fn apply_masks_per_sample(x: &Tensor4, masks: &[PruneMask]) -> Result<Tensor4> {
    let (n, ..) = x.dims();
    if masks.len() != n {
        return Err(Error::InvalidShape {
            context: "apply_masks_per_sample",
            details: format!("{} masks for batch of {n}", masks.len()),
        });
    }
    let mut out = x.clone();
    for (s, mask) in masks.iter().enumerate() {
        let (_, c, h, w) = x.dims();
        if mask.channels() != c || mask.spatial_dims() != (h, w) {
            return Err(Error::InvalidShape {
                context: "apply_masks_per_sample",
                details: "mask dims do not match map".into(),
            });
        }
        let hw = h * w;
        let sample = out.sample_mut(s);
        for (ch, &keep_c) in mask.channel_bits().iter().enumerate() {
            let plane = &mut sample[ch * hw..(ch + 1) * hw];
            if !keep_c {
                plane.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            for (v, &keep_s) in plane.iter_mut().zip(mask.spatial_bits()) {
                if !keep_s {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// OR-pool a mask across 2x2 max pooling: a pooled column survives when any
/// of its four source columns survived; channels pass through unchanged.
fn pool_mask(mask: &PruneMask) -> Result<PruneMask> {
    let (h, w) = mask.spatial_dims();
    let (ho, wo) = (h / 2, w / 2);
    let mut bits = vec![false; ho * wo];
    for py in 0..ho {
        for px in 0..wo {
            let mut any = false;
            for dy in 0..2 {
                for dx in 0..2 {
                    any |= mask.spatial_bits()[(py * 2 + dy) * w + px * 2 + dx];
                }
            }
            bits[py * wo + px] = any;
        }
    }
    PruneMask::from_bits(
        mask.channel_bits().to_vec(),
        bits,
        ho,
        wo,
        mask.channel_keep_ratio,
        mask.spatial_keep_ratio,
    )
}

fn single_sample(x: &Tensor4, s: usize) -> Result<Tensor4> {
    let (_, c, h, w) = x.dims();
    Tensor4::from_vec((1, c, h, w), x.sample(s).to_vec())
}

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let layout = spec.validate()?;
    let mut rng = Rng::new(seed);
    let mut layers = Vec::new();
    for (i, l) in spec.layers.iter().enumerate() {
        let (c_in, ..) = layout.layer_inputs[i];
        match l {
            LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                layers.push(Layer::Conv(Conv2dLayer::kaiming(
                    *out_channels,
                    c_in,
                    *kernel,
                    *stride,
                    *padding,
                    &mut rng,
                )?));
            }
            LayerSpec::Relu => layers.push(Layer::Relu),
            LayerSpec::DynPrune => {
                layers.push(Layer::DynPrune { block: layout.dynprune_block[i] })
            }
            LayerSpec::MaxPool2x2 => layers.push(Layer::MaxPool2x2),
            LayerSpec::GlobalAvgPool => layers.push(Layer::GlobalAvgPool),
            LayerSpec::Dense { out_features } => {
                let (c, h, w) = layout.layer_inputs[i];
                layers.push(Layer::Dense(DenseLayer::kaiming(c * h * w, *out_features, &mut rng)));
            }
            LayerSpec::SoftmaxXent => {} // loss handled outside the chain
        }
    }
    Ok(Model { spec: spec.clone(), layout, layers })
}

impl Model {
    pub fn block_count(&self) -> usize {
        self.spec.block_count()
    }

    pub fn conv_count(&self) -> usize {
        self.layout.conv_count
    }

    /// Logits for a batch. The trace carries whatever the mode requires.
    pub fn forward(
        &self,
        x: &Tensor4,
        prune: &PruneSettings,
        mode: ExecMode,
    ) -> Result<(Tensor4, ForwardTrace)> {
        if prune.channel_keep.len() != self.block_count() {
            return Err(Error::BlockMismatch {
                expected: self.block_count(),
                got: prune.channel_keep.len(),
            });
        }
        let (n, c, h, w) = x.dims();
        let expect = self.spec.input;
        if (c, h, w) != expect {
            return Err(Error::InvalidShape {
                context: "Model::forward",
                details: format!("input dims ({c},{h},{w}) != spec {expect:?}"),
            });
        }

        let mut trace = ForwardTrace {
            layer_inputs: Vec::new(),
            masks: vec![None; self.layers.len()],
            argmax: vec![None; self.layers.len()],
            measured: Vec::new(),
        };
        // Masks currently describing `cur` (set by dynprune, carried through
        // relu/pool, consumed by the next conv).
        let mut live_masks: Option<Vec<PruneMask>> = None;
        let mut cur = x.clone();

        for (i, layer) in self.layers.iter().enumerate() {
            if mode == ExecMode::Train {
                trace.layer_inputs.push(cur.clone());
            }
            let next = match layer {
                Layer::Conv(conv) => {
                    let out = if mode == ExecMode::Measure {
                        let (_, ci, hi, wi) = cur.dims();
                        let (ho, wo) = conv.output_dims(hi, wi)?;
                        let (kh, kw) = conv.kernel();
                        let dense_per_sample =
                            (conv.out_channels() * ci * kh * kw * ho * wo) as u64;
                        let mut measured = 0u64;
                        let mut analytic = 0u64;
                        let mut out = Tensor4::zeros((n, conv.out_channels(), ho, wo))?;
                        for s in 0..n {
                            let xs = single_sample(&cur, s)?;
                            let (ys, macs) = match &live_masks {
                                Some(masks) => {
                                    let m = &masks[s];
                                    analytic += (conv.out_channels() * kh * kw) as u64
                                        * m.k_channel as u64
                                        * m.k_spatial as u64;
                                    conv.forward_masked(&xs, m)?
                                }
                                None => {
                                    analytic += dense_per_sample;
                                    let y = conv.forward(&xs)?;
                                    (y, dense_per_sample)
                                }
                            };
                            measured += macs;
                            out.sample_mut(s).copy_from_slice(ys.data());
                        }
                        trace.measured.push(LayerMacs {
                            layer: i,
                            name: self.layout.layer_names[i].clone(),
                            measured,
                            analytic,
                            dense: dense_per_sample * n as u64,
                        });
                        out
                    } else {
                        conv.forward(&cur)?
                    };
                    live_masks = None;
                    out
                }
                Layer::Relu => relu_fwd(&cur),
                Layer::DynPrune { block } => {
                    let (_, ci, hi, wi) = cur.dims();
                    if prune.is_identity_for(*block, (ci, hi, wi)) {
                        trace.masks[i] = Some(MaskCache::Identity);
                        live_masks = None;
                        cur.clone()
                    } else {
                        let p_ch = prune.channel_keep[*block];
                        let p_sp = if spatial_prune_allowed(hi, wi) {
                            prune.spatial_keep[*block]
                        } else {
                            1.0
                        };
                        let mut masks = Vec::with_capacity(n);
                        for s in 0..n {
                            let criterion = match prune.criterion {
                                MaskCriterion::Random(seed) => MaskCriterion::Random(
                                    derive_seed(seed, i as u64, prune.sample_base + s as u64),
                                ),
                                other => other,
                            };
                            masks.push(make_mask(&cur, s, p_ch, p_sp, criterion)?);
                        }
                        let out = apply_masks_per_sample(&cur, &masks)?;
                        trace.masks[i] = Some(MaskCache::PerSample(masks.clone()));
                        live_masks = Some(masks);
                        out
                    }
                }
                Layer::MaxPool2x2 => {
                    let (out, argmax) = maxpool2x2_fwd(&cur)?;
                    trace.argmax[i] = Some(argmax);
                    if let Some(masks) = &live_masks {
                        let pooled: Result<Vec<PruneMask>> =
                            masks.iter().map(pool_mask).collect();
                        live_masks = Some(pooled?);
                    }
                    out
                }
                Layer::GlobalAvgPool => {
                    live_masks = None;
                    global_avg_pool_fwd(&cur)?
                }
                Layer::Dense(dense) => {
                    live_masks = None;
                    dense.forward(&cur)?
                }
            };
            cur = next;
        }
        Ok((cur, trace))
    }

    /// Backpropagate dL/dlogits through the chain; requires a Train trace.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &Tensor4) -> Result<Gradients> {
        if trace.layer_inputs.len() != self.layers.len() {
            return Err(Error::MissingMask { layer: 0 });
        }
        let mut per_layer = vec![LayerGrads::None; self.layers.len()];
        let mut g = grad_logits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.layer_inputs[i];
            g = match layer {
                Layer::Conv(conv) => {
                    let grads = conv.backward(input, &g)?;
                    per_layer[i] = LayerGrads::Conv { weights: grads.weights, bias: grads.bias };
                    grads.input
                }
                Layer::Relu => relu_bwd(input, &g)?,
                Layer::DynPrune { .. } => dynprune_backward(&g, trace.masks[i].as_ref(), i)?,
                Layer::MaxPool2x2 => {
                    let argmax = trace.argmax[i]
                        .as_ref()
                        .ok_or(Error::MissingMask { layer: i })?;
                    maxpool2x2_bwd(input.dims(), argmax, &g)?
                }
                Layer::GlobalAvgPool => global_avg_pool_bwd(input.dims(), &g)?,
                Layer::Dense(dense) => {
                    let grads = dense.backward(input, &g)?;
                    per_layer[i] = LayerGrads::Dense { weights: grads.weights, bias: grads.bias };
                    grads.input
                }
            };
        }
        Ok(Gradients { per_layer, input: g })
    }

    /// SGD update from a gradient set.
    pub fn apply_grads(&mut self, grads: &Gradients, lr: f32) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.per_layer) {
            match (layer, g) {
                (Layer::Conv(conv), LayerGrads::Conv { weights, bias }) => {
                    sgd_step(conv.weights.data_mut(), weights.data(), lr);
                    sgd_step(&mut conv.bias, bias, lr);
                }
                (Layer::Dense(dense), LayerGrads::Dense { weights, bias }) => {
                    sgd_step(&mut dense.weights, weights, lr);
                    sgd_step(&mut dense.bias, bias, lr);
                }
                _ => {}
            }
        }
    }

    /// Flat copy of every parameter, for bit-exact comparisons.
    pub fn weights_snapshot(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(conv) => {
                    out.extend_from_slice(conv.weights.data());
                    out.extend_from_slice(&conv.bias);
                }
                Layer::Dense(dense) => {
                    out.extend_from_slice(&dense.weights);
                    out.extend_from_slice(&dense.bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Parameter tensors in layer order with manifest names.
    fn param_records(&self) -> Vec<(String, Tensor4)> {
        let mut records = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let name = &self.layout.layer_names[i];
            match layer {
                Layer::Conv(conv) => {
                    records.push((format!("{name}.weight"), conv.weights.clone()));
                    let b = Tensor4::from_vec((1, 1, 1, conv.bias.len()), conv.bias.clone())
                        .expect("bias tensor");
                    records.push((format!("{name}.bias"), b));
                }
                Layer::Dense(dense) => {
                    let w = Tensor4::from_vec(
                        (1, 1, dense.out_features, dense.in_features),
                        dense.weights.clone(),
                    )
                    .expect("dense weight tensor");
                    records.push((format!("{name}.weight"), w));
                    let b = Tensor4::from_vec((1, 1, 1, dense.bias.len()), dense.bias.clone())
                        .expect("bias tensor");
                    records.push((format!("{name}.bias"), b));
                }
                _ => {}
            }
        }
        records
    }

    /// Checkpoint: `<stem>.ckpt` holds dims-prefixed raw records in layer
    /// order, `<stem>.manifest` lists one record name per line.
    pub fn save_checkpoint(&self, stem: &Path) -> Result<()> {
        let records = self.param_records();
        let mut blob = Vec::new();
        let mut manifest = String::new();
        for (name, tensor) in &records {
            tensor.write_to(&mut blob).map_err(|e| Error::io("checkpoint", e))?;
            manifest.push_str(name);
            manifest.push('\n');
        }
        crate::fsio::atomic_write(&stem.with_extension("ckpt"), &blob)?;
        crate::fsio::atomic_write(&stem.with_extension("manifest"), manifest.as_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(spec: &ModelSpec, stem: &Path) -> Result<Model> {
        let ckpt_path = stem.with_extension("ckpt");
        if !ckpt_path.exists() {
            return Err(Error::MissingArtifact { path: ckpt_path.display().to_string() });
        }
        let mut model = build_model(spec, 0)?;
        let mut file =
            fs::File::open(&ckpt_path).map_err(|e| Error::io("open checkpoint", e))?;
        let mut blob = Vec::new();
        file.read_to_end(&mut blob).map_err(|e| Error::io("read checkpoint", e))?;
        let mut cursor = blob.as_slice();
        for layer in model.layers.iter_mut() {
            match layer {
                Layer::Conv(conv) => {
                    let w = Tensor4::read_from(&mut cursor)?;
                    if w.dims() != conv.weights.dims() {
                        return Err(Error::DataFormat {
                            reason: format!(
                                "checkpoint weight dims {:?} != {:?}",
                                w.dims(),
                                conv.weights.dims()
                            ),
                        });
                    }
                    conv.weights = w;
                    let b = Tensor4::read_from(&mut cursor)?;
                    if b.len() != conv.bias.len() {
                        return Err(Error::DataFormat {
                            reason: "checkpoint bias length mismatch".into(),
                        });
                    }
                    conv.bias.copy_from_slice(b.data());
                }
                Layer::Dense(dense) => {
                    let w = Tensor4::read_from(&mut cursor)?;
                    if w.len() != dense.weights.len() {
                        return Err(Error::DataFormat {
                            reason: "checkpoint dense weight mismatch".into(),
                        });
                    }
                    dense.weights.copy_from_slice(w.data());
                    let b = Tensor4::read_from(&mut cursor)?;
                    if b.len() != dense.bias.len() {
                        return Err(Error::DataFormat {
                            reason: "checkpoint dense bias mismatch".into(),
                        });
                    }
                    dense.bias.copy_from_slice(b.data());
                }
                _ => {}
            }
        }
        if !cursor.is_empty() {
            return Err(Error::DataFormat {
                reason: format!("{} trailing bytes in checkpoint", cursor.len()),
            });
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_specs_validate() {
        for name in ["toy-vgg", "vgg16-cifar", "vgg16-imagenet", "resnet56-cifar"] {
            let spec = builtin_spec(name).unwrap();
            let layout = spec.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(layout.conv_count > 0);
        }
        assert!(builtin_spec("nope").is_none());
    }

    #[test]
    fn vgg16_cifar_reports_13_convs() {
        let spec = vgg16_cifar_spec();
        let layout = spec.validate().unwrap();
        assert_eq!(layout.conv_count, 13);
        assert_eq!(spec.block_count(), 5);
    }

    #[test]
    fn resnet56_has_55_chain_convs_in_3_groups() {
        let spec = resnet56_cifar_spec();
        let layout = spec.validate().unwrap();
        // stem + 3 groups x 18
        assert_eq!(layout.conv_count, 55);
        assert_eq!(spec.block_count(), 3);
        assert_eq!(spec.extra_dense_convs.len(), 2);
    }

    #[test]
    fn invalid_spec_reports_layer_index() {
        let mut spec = toy_vgg_spec();
        // out-of-block dynprune
        spec.blocks.clear();
        let err = spec.validate().unwrap_err();
        match err {
            Error::SpecInvalid { layer, .. } => assert_eq!(layer, 2),
            other => panic!("unexpected {other:?}"),
        }

        let spec = ModelSpec {
            name: "bad".into(),
            input: (1, 5, 5),
            classes: 10,
            layers: vec![LayerSpec::MaxPool2x2, LayerSpec::Dense { out_features: 10 }],
            blocks: vec![],
            extra_dense_convs: vec![],
        };
        assert!(matches!(spec.validate(), Err(Error::SpecInvalid { layer: 0, .. })));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_logits() {
        let spec = ModelSpec {
            name: "tiny".into(),
            input: (1, 4, 4),
            classes: 3,
            layers: vec![
                LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { out_features: 3 },
            ],
            blocks: vec![],
            extra_dense_convs: vec![],
        };
        let model = build_model(&spec, 1).unwrap();
        let x = Tensor4::zeros((2, 1, 4, 4)).unwrap();
        let settings = PruneSettings::disabled(0);
        let (logits, _) = model.forward(&x, &settings, ExecMode::Eval).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_deterministic() {
        let model = build_model(&toy_vgg_spec(), 7).unwrap();
        let mut rng = Rng::new(3);
        let data: Vec<f32> = (0..2 * 784).map(|_| rng.next_normal()).collect();
        let x = Tensor4::from_vec((2, 1, 28, 28), data).unwrap();
        let settings = PruneSettings::from_prune_ratios(
            2,
            &[0.5, 0.5],
            &[0.25, 0.25],
            MaskCriterion::Attention,
        )
        .unwrap();
        let (a, _) = model.forward(&x, &settings, ExecMode::Eval).unwrap();
        let (b, _) = model.forward(&x, &settings, ExecMode::Eval).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn dynprune_keeps_exact_channel_count() {
        // 4-channel map with distinct channel means, p_keep = 0.5 -> 2 survive
        let spec = ModelSpec {
            name: "p".into(),
            input: (4, 6, 6),
            classes: 2,
            layers: vec![
                LayerSpec::DynPrune,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { out_features: 2 },
            ],
            blocks: vec![(0, 1)],
            extra_dense_convs: vec![],
        };
        let model = build_model(&spec, 5).unwrap();
        let mut data = Vec::new();
        for ch in 0..4 {
            data.extend(std::iter::repeat_n(ch as f32 + 1.0, 36));
        }
        let x = Tensor4::from_vec((1, 4, 6, 6), data).unwrap();
        let settings =
            PruneSettings::from_prune_ratios(1, &[0.5], &[0.0], MaskCriterion::Attention)
                .unwrap();
        let (_, trace) = model.forward(&x, &settings, ExecMode::Train).unwrap();
        match trace.masks[0].as_ref().unwrap() {
            MaskCache::PerSample(masks) => {
                assert_eq!(masks[0].k_channel, 2);
                assert_eq!(masks[0].channel_bits(), &[false, false, true, true]);
            }
            MaskCache::Identity => panic!("expected masks"),
        }
    }

    #[test]
    fn dynprune_identity_cases() {
        let model = build_model(&toy_vgg_spec(), 7).unwrap();
        let mut rng = Rng::new(13);
        let data: Vec<f32> = (0..784).map(|_| rng.next_normal()).collect();
        let x = Tensor4::from_vec((1, 1, 28, 28), data).unwrap();

        let disabled = PruneSettings::disabled(2);
        let (a, _) = model.forward(&x, &disabled, ExecMode::Eval).unwrap();

        let zero_ratios = PruneSettings::from_prune_ratios(
            2,
            &[0.0, 0.0],
            &[0.0, 0.0],
            MaskCriterion::Attention,
        )
        .unwrap();
        let (b, _) = model.forward(&x, &zero_ratios, ExecMode::Eval).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn dynprune_backward_error_without_mask() {
        let g = Tensor4::filled((1, 2, 2, 2), 1.0).unwrap();
        assert!(matches!(
            dynprune_backward(&g, None, 4),
            Err(Error::MissingMask { layer: 4 })
        ));
    }

    #[test]
    fn dynprune_backward_masks_gradient() {
        let g = Tensor4::filled((1, 2, 2, 2), 3.0).unwrap();
        let mask = PruneMask::from_bits(
            vec![true, false],
            vec![true; 4],
            2,
            2,
            0.5,
            1.0,
        )
        .unwrap();
        let cache = MaskCache::PerSample(vec![mask]);
        let out = dynprune_backward(&g, Some(&cache), 0).unwrap();
        assert_eq!(out.plane(0, 0), &[3.0; 4]);
        assert_eq!(out.plane(0, 1), &[0.0; 4]);

        let id = MaskCache::Identity;
        let out = dynprune_backward(&g, Some(&id), 0).unwrap();
        assert_eq!(out.data(), g.data());
    }

    #[test]
    fn block_mismatch_rejected() {
        let model = build_model(&toy_vgg_spec(), 7).unwrap();
        let x = Tensor4::zeros((1, 1, 28, 28)).unwrap();
        let settings =
            PruneSettings::from_prune_ratios(3, &[0.0; 3], &[0.0; 3], MaskCriterion::Attention)
                .unwrap();
        assert!(matches!(
            model.forward(&x, &settings, ExecMode::Eval),
            Err(Error::BlockMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("antidote-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let spec = toy_vgg_spec();
        let model = build_model(&spec, 21).unwrap();
        let stem = dir.join("model");
        model.save_checkpoint(&stem).unwrap();
        let loaded = Model::load_checkpoint(&spec, &stem).unwrap();
        assert_eq!(model.weights_snapshot(), loaded.weights_snapshot());
        let manifest = fs::read_to_string(stem.with_extension("manifest")).unwrap();
        assert!(manifest.lines().next().unwrap().ends_with("conv01.weight"));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_checkpoint_is_missing_artifact() {
        let spec = toy_vgg_spec();
        let err = Model::load_checkpoint(&spec, Path::new("/nonexistent/model")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { .. }));
    }
}
