//! A small UNet-style encoder-decoder with a hand-written backward pass.
//!
//! Each level applies two same-padded 3×3 convolutions with SiLU, the encoder
//! downsamples by 2×2 average pooling and the decoder upsamples by nearest
//! neighbour and concatenates the matching skip. Two 1×1 heads read the last
//! decoder features: head A gives `m + 1` softmax probabilities (background
//! and the single classes), head B gives `m - 1` sigmoid probabilities for
//! the combined channels.
//!
//! Everything is `f64`; forward and backward are pure functions of the
//! parameters and the input, so batch items can be processed concurrently.

mod checkpoint;
pub mod ops;

use std::sync::atomic::{AtomicU64, Ordering};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Image, Planes};
use crate::rng::rng_for;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointHeader, Section, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Parameter count of the reference configuration
/// (64×64 input, width 8, depth 3, three classes).
pub const REFERENCE_PARAM_COUNT: usize = 122_014;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Side length of the square input.
    pub input_size: usize,
    /// Channels at the first level; each level doubles it.
    pub base_width: usize,
    /// Number of downsamplings.
    pub depth: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_size: 64,
            base_width: 8,
            depth: 3,
            num_classes: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SegnetError {
    #[error("input size {size} is not divisible by 2^{depth}")]
    Indivisible { size: usize, depth: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("expected a {expected}x{expected} image, got {height}x{width}")]
    ShapeMismatch {
        expected: usize,
        height: usize,
        width: usize,
    },
    #[error("gradient has {got} values, expected {expected}")]
    GradientShape { expected: usize, got: usize },
    #[error("forward cache is stale: parameters changed since the forward pass")]
    StaleCache,
    #[error("parameter vector has {got} values, layout needs {expected}")]
    ParamCount { expected: usize, got: usize },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), SegnetError> {
        if !(2..=4).contains(&self.depth) {
            return Err(SegnetError::InvalidSpec(format!(
                "depth must be in 2..=4, got {}",
                self.depth
            )));
        }
        if self.base_width == 0 {
            return Err(SegnetError::InvalidSpec("base width must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(SegnetError::InvalidSpec("need at least one class".into()));
        }
        let unit = 1usize << self.depth;
        if self.input_size == 0 || !self.input_size.is_multiple_of(unit) {
            return Err(SegnetError::Indivisible {
                size: self.input_size,
                depth: self.depth,
            });
        }
        Ok(())
    }

    pub fn softmax_channels(&self) -> usize {
        self.num_classes + 1
    }

    pub fn sigmoid_channels(&self) -> usize {
        self.num_classes - 1
    }

    /// Channels of the prediction handed to the losses, `2m - 1`.
    pub fn prediction_channels(&self) -> usize {
        2 * self.num_classes - 1
    }

    pub fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Parameter layout in forward order.
    pub fn layout(&self) -> Vec<LayerInfo> {
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, kernel: usize, cin: usize, cout: usize| {
            let info = LayerInfo {
                name,
                kernel,
                cin,
                cout,
                offset,
            };
            offset += info.len();
            layers.push(info);
        };
        let mut cin = 1;
        for level in 0..=self.depth {
            let c = self.width_at(level);
            push(format!("enc{level}.conv1"), 3, cin, c);
            push(format!("enc{level}.conv2"), 3, c, c);
            cin = c;
        }
        for level in (0..self.depth).rev() {
            let c = self.width_at(level);
            push(format!("dec{level}.conv1"), 3, self.width_at(level + 1) + c, c);
            push(format!("dec{level}.conv2"), 3, c, c);
        }
        push("head_softmax".into(), 1, self.base_width, self.softmax_channels());
        push("head_sigmoid".into(), 1, self.base_width, self.sigmoid_channels());
        layers
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(LayerInfo::len).sum()
    }
}

/// One convolution in the flat parameter vector: `cout × cin × k × k`
/// weights followed by `cout` biases.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub offset: usize,
}

impl LayerInfo {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn weights<'a>(&self, data: &'a [f64]) -> &'a [f64] {
        &data[self.offset..self.offset + self.weight_len()]
    }

    fn bias<'a>(&self, data: &'a [f64]) -> &'a [f64] {
        &data[self.offset + self.weight_len()..self.offset + self.len()]
    }

    fn split_mut<'a>(&self, data: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64]) {
        data[self.offset..self.offset + self.len()].split_at_mut(self.weight_len())
    }
}

static NEXT_IDENTITY: AtomicU64 = AtomicU64::new(1);

fn fresh_identity() -> u64 {
    NEXT_IDENTITY.fetch_add(1, Ordering::Relaxed)
}

/// Flat parameters plus their layout.
///
/// Every instance carries an identity and a generation counter; a forward
/// cache remembers both so that [`backward`] can refuse a cache produced
/// before the parameters were modified.
#[derive(Debug)]
pub struct ModelParams {
    spec: ModelSpec,
    layout: Vec<LayerInfo>,
    data: Vec<f64>,
    identity: u64,
    generation: u64,
}

impl Clone for ModelParams {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec,
            layout: self.layout.clone(),
            data: self.data.clone(),
            identity: fresh_identity(),
            generation: 0,
        }
    }
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.data == other.data
    }
}

impl ModelParams {
    pub fn from_vec(spec: ModelSpec, data: Vec<f64>) -> Result<Self, SegnetError> {
        spec.validate()?;
        let layout = spec.layout();
        let expected: usize = layout.iter().map(LayerInfo::len).sum();
        if data.len() != expected {
            return Err(SegnetError::ParamCount {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            spec,
            layout,
            data,
            identity: fresh_identity(),
            generation: 0,
        })
    }

    pub fn zeros(spec: ModelSpec) -> Result<Self, SegnetError> {
        Self::from_vec(spec, vec![0.0; spec.param_count()])
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &[LayerInfo] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Splits the flat vector into per-layer `(weights, bias)` copies.
    pub fn unflatten(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.layout
            .iter()
            .map(|l| (l.weights(&self.data).to_vec(), l.bias(&self.data).to_vec()))
            .collect()
    }

    /// Inverse of [`ModelParams::unflatten`].
    pub fn flatten(spec: ModelSpec, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self, SegnetError> {
        let data: Vec<f64> = layers.iter().flat_map(|(w, b)| w.iter().chain(b).copied()).collect();
        Self::from_vec(spec, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn stamp(&self) -> (u64, u64) {
        (self.identity, self.generation)
    }
}

/// Fan-in scaled Gaussian initialisation (`std = sqrt(2 / fan_in)`, zero
/// biases), deterministic in `spec.seed`.
pub fn init(spec: &ModelSpec) -> Result<ModelParams, SegnetError> {
    spec.validate()?;
    let mut params = ModelParams::zeros(*spec)?;
    let layout = params.layout.clone();
    for (index, layer) in layout.iter().enumerate() {
        let fan_in = (layer.cin * layer.kernel * layer.kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let mut rng = rng_for(spec.seed, &[0x5e6, index as u64]);
        let (w, _) = layer.split_mut(&mut params.data);
        for v in w.iter_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(params)
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    stamp: (u64, u64),
    size: usize,
    /// Input buffer of every 3×3 convolution, in layout order.
    conv_inputs: Vec<Vec<f64>>,
    /// Pre-activation output of every 3×3 convolution.
    conv_pre: Vec<Vec<f64>>,
    /// Final decoder features read by both heads.
    features: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Background followed by the `m` single classes; sums to 1 per pixel.
    pub softmax: Planes,
    /// The `m - 1` combined channels.
    pub sigmoid: Planes,
    pub cache: ForwardCache,
}

impl ForwardOutput {
    /// The `(2m - 1)`-channel prediction: single classes then combined
    /// channels.
    pub fn prediction(&self) -> Planes {
        let (_, single) = self.softmax.split_at(1);
        single.concat(&self.sigmoid)
    }

    /// Per-pixel argmax over the softmax head (0 = background).
    pub fn argmax(&self) -> crate::grid::LabelMap {
        let (h, w) = (self.softmax.height(), self.softmax.width());
        let n = h * w;
        let c = self.softmax.channels();
        let data = self.softmax.data();
        crate::grid::Grid::from_fn(h, w, |r, col| {
            let p = r * w + col;
            let mut best = 0;
            for k in 1..c {
                if data[k * n + p] > data[best * n + p] {
                    best = k;
                }
            }
            best as u8
        })
    }
}

/// Gradient of a scalar with respect to both heads' probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrad {
    pub pixels: usize,
    pub softmax: Vec<f64>,
    pub sigmoid: Vec<f64>,
}

impl OutputGrad {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let n = spec.input_size * spec.input_size;
        Self {
            pixels: n,
            softmax: vec![0.0; spec.softmax_channels() * n],
            sigmoid: vec![0.0; spec.sigmoid_channels() * n],
        }
    }

    /// Adds a gradient taken with respect to the `(2m - 1)`-channel
    /// prediction (single classes, then combined channels).
    pub fn add_prediction_grad(&mut self, grad: &[f64]) {
        let n = self.pixels;
        let (single, combined) = grad.split_at(self.softmax.len() - n);
        for (o, g) in self.softmax[n..].iter_mut().zip(single) {
            *o += g;
        }
        for (o, g) in self.sigmoid.iter_mut().zip(combined) {
            *o += g;
        }
    }

    /// Adds a gradient taken with respect to the softmax probabilities.
    pub fn add_softmax_grad(&mut self, grad: &[f64]) {
        for (o, g) in self.softmax.iter_mut().zip(grad) {
            *o += g;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.softmax.iter().chain(&self.sigmoid).all(|&g| g == 0.0)
    }
}

/// Runs the network on one image.
pub fn forward(params: &ModelParams, image: &Image) -> Result<ForwardOutput, SegnetError> {
    let spec = params.spec;
    let size = spec.input_size;
    if image.height() != size || image.width() != size {
        return Err(SegnetError::ShapeMismatch {
            expected: size,
            height: image.height(),
            width: image.width(),
        });
    }
    let data = &params.data;
    let layout = &params.layout;
    let mut conv_inputs = Vec::with_capacity(layout.len());
    let mut conv_pre = Vec::with_capacity(layout.len());
    let mut next = 0;

    let mut conv = |input: Vec<f64>, s: usize, conv_inputs: &mut Vec<Vec<f64>>, conv_pre: &mut Vec<Vec<f64>>| {
        let layer = &layout[next];
        next += 1;
        let mut pre = vec![0.0; layer.cout * s * s];
        ops::conv3x3(
            &input,
            layer.cin,
            s,
            s,
            layer.weights(data),
            layer.bias(data),
            layer.cout,
            &mut pre,
        );
        let post: Vec<f64> = pre.iter().map(|&v| ops::silu(v)).collect();
        conv_inputs.push(input);
        conv_pre.push(pre);
        post
    };

    let mut skips = Vec::with_capacity(spec.depth);
    let mut x = image.data().to_vec();
    let mut s = size;
    for level in 0..=spec.depth {
        if level > 0 {
            let prev: &Vec<f64> = skips.last().expect("skip from previous level");
            x = ops::avg_pool2(prev, spec.width_at(level - 1), s, s);
            s /= 2;
        }
        let a = conv(x, s, &mut conv_inputs, &mut conv_pre);
        let b = conv(a, s, &mut conv_inputs, &mut conv_pre);
        if level < spec.depth {
            skips.push(b);
            x = Vec::new();
        } else {
            x = b;
        }
    }
    for level in (0..spec.depth).rev() {
        let up = ops::upsample2(&x, spec.width_at(level + 1), s, s);
        s *= 2;
        let mut cat = up;
        cat.extend_from_slice(&skips[level]);
        let a = conv(cat, s, &mut conv_inputs, &mut conv_pre);
        x = conv(a, s, &mut conv_inputs, &mut conv_pre);
    }

    let n = size * size;
    let head_a = &layout[layout.len() - 2];
    let head_b = &layout[layout.len() - 1];
    let mut logits_a = vec![0.0; head_a.cout * n];
    ops::conv1x1(
        &x,
        head_a.cin,
        n,
        head_a.weights(data),
        head_a.bias(data),
        head_a.cout,
        &mut logits_a,
    );
    let mut logits_b = vec![0.0; head_b.cout * n];
    ops::conv1x1(
        &x,
        head_b.cin,
        n,
        head_b.weights(data),
        head_b.bias(data),
        head_b.cout,
        &mut logits_b,
    );

    let c = head_a.cout;
    let mut soft = vec![0.0; c * n];
    for p in 0..n {
        let max = (0..c).map(|k| logits_a[k * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..c {
            let e = (logits_a[k * n + p] - max).exp();
            soft[k * n + p] = e;
            z += e;
        }
        for k in 0..c {
            soft[k * n + p] /= z;
        }
    }
    let sig: Vec<f64> = logits_b.iter().map(|&v| ops::sigmoid(v)).collect();

    Ok(ForwardOutput {
        softmax: Planes::from_vec(c, size, size, soft).expect("softmax shape"),
        sigmoid: Planes::from_vec(head_b.cout, size, size, sig).expect("sigmoid shape"),
        cache: ForwardCache {
            stamp: params.stamp(),
            size,
            conv_inputs,
            conv_pre,
            features: x,
        },
    })
}

/// Reverse-mode gradient of `<grad, outputs>` with respect to the
/// parameters, accumulated into `grad_params`.
pub fn backward_into(
    params: &ModelParams,
    output: &ForwardOutput,
    grad: &OutputGrad,
    grad_params: &mut [f64],
) -> Result<(), SegnetError> {
    let cache = &output.cache;
    if cache.stamp != params.stamp() || cache.size != params.spec.input_size {
        return Err(SegnetError::StaleCache);
    }
    if grad_params.len() != params.len() {
        return Err(SegnetError::GradientShape {
            expected: params.len(),
            got: grad_params.len(),
        });
    }
    let spec = params.spec;
    let n = spec.input_size * spec.input_size;
    if grad.softmax.len() != spec.softmax_channels() * n || grad.sigmoid.len() != spec.sigmoid_channels() * n {
        return Err(SegnetError::GradientShape {
            expected: spec.softmax_channels() * n + spec.sigmoid_channels() * n,
            got: grad.softmax.len() + grad.sigmoid.len(),
        });
    }
    let data = &params.data;
    let layout = &params.layout;

    // Heads: softmax and sigmoid Jacobians, then the 1×1 convolutions.
    let c = spec.softmax_channels();
    let soft = output.softmax.data();
    let mut g_logits_a = vec![0.0; c * n];
    for p in 0..n {
        let dot: f64 = (0..c).map(|k| soft[k * n + p] * grad.softmax[k * n + p]).sum();
        for k in 0..c {
            g_logits_a[k * n + p] = soft[k * n + p] * (grad.softmax[k * n + p] - dot);
        }
    }
    let g_logits_b: Vec<f64> = output
        .sigmoid
        .data()
        .iter()
        .zip(&grad.sigmoid)
        .map(|(s, g)| g * s * (1.0 - s))
        .collect();
    let mut g_x = vec![0.0; spec.base_width * n];
    for (layer, g) in [
        (&layout[layout.len() - 2], &g_logits_a),
        (&layout[layout.len() - 1], &g_logits_b),
    ] {
        let (gw, gb) = layer.split_mut(grad_params);
        ops::conv1x1_backward(
            &cache.features,
            layer.cin,
            n,
            layer.weights(data),
            layer.cout,
            g,
            gw,
            gb,
            &mut g_x,
        );
    }

    // Backward through one conv + SiLU; returns the input gradient.
    let conv_back = |index: usize, g_post: &[f64], s: usize, grad_params: &mut [f64], need_input: bool| -> Vec<f64> {
        let layer = &layout[index];
        let pre = &cache.conv_pre[index];
        let g_pre: Vec<f64> = g_post.iter().zip(pre).map(|(g, &z)| g * ops::silu_grad(z)).collect();
        let mut g_in = if need_input {
            vec![0.0; layer.cin * s * s]
        } else {
            Vec::new()
        };
        let (gw, gb) = layer.split_mut(grad_params);
        ops::conv3x3_backward(
            &cache.conv_inputs[index],
            layer.cin,
            s,
            s,
            layer.weights(data),
            layer.cout,
            &g_pre,
            gw,
            gb,
            if need_input { Some(&mut g_in) } else { None },
        );
        g_in
    };

    let enc_layers = 2 * (spec.depth + 1);
    let mut skip_grads: Vec<Vec<f64>> = (0..spec.depth)
        .map(|l| vec![0.0; spec.width_at(l) * (n >> (2 * l))])
        .collect();
    let mut s = spec.input_size;
    for (step, level) in (0..spec.depth).enumerate() {
        let index = layout.len() - 3 - 2 * step;
        let g_a = conv_back(index, &g_x, s, grad_params, true);
        let g_cat = conv_back(index - 1, &g_a, s, grad_params, true);
        let up_channels = spec.width_at(level + 1);
        let (g_up, g_skip) = g_cat.split_at(up_channels * s * s);
        for (o, g) in skip_grads[level].iter_mut().zip(g_skip) {
            *o += g;
        }
        s /= 2;
        g_x = ops::upsample2_backward(g_up, up_channels, s, s);
    }
    debug_assert_eq!(layout.len() - 3 - 2 * spec.depth, enc_layers - 1);

    for level in (0..=spec.depth).rev() {
        if level < spec.depth {
            for (o, g) in g_x.iter_mut().zip(&skip_grads[level]) {
                *o += g;
            }
        }
        let g_a = conv_back(2 * level + 1, &g_x, s, grad_params, true);
        let g_in = conv_back(2 * level, &g_a, s, grad_params, level > 0);
        if level > 0 {
            let mut g_prev = vec![0.0; spec.width_at(level - 1) * 4 * s * s];
            ops::avg_pool2_backward(&g_in, spec.width_at(level - 1), 2 * s, 2 * s, &mut g_prev);
            g_x = g_prev;
            s *= 2;
        }
    }
    Ok(())
}

/// Allocating form of [`backward_into`].
pub fn backward(params: &ModelParams, output: &ForwardOutput, grad: &OutputGrad) -> Result<Vec<f64>, SegnetError> {
    let mut g = vec![0.0; params.len()];
    backward_into(params, output, grad, &mut g)?;
    Ok(g)
}

/// Hard labels (argmax over the softmax head) for an image of any size.
///
/// Images whose size differs from the model input are resized bilinearly
/// on the way in and the label map is resized back with nearest neighbour.
pub fn predict_labels(params: &ModelParams, image: &Image) -> Result<crate::grid::LabelMap, SegnetError> {
    let size = params.spec.input_size;
    if image.shape() == (size, size) {
        return Ok(forward(params, image)?.argmax());
    }
    let resized = crate::mixing::resize_bilinear(image, size, size);
    let labels = forward(params, &resized)?.argmax();
    Ok(crate::mixing::resize_nearest(&labels, image.height(), image.width()))
}
