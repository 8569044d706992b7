//! A small convolutional feature extractor with activation taps and
//! filter-level masking.
//!
//! Tensors are stored channel-major (`C×H×W`, row-major within a channel).
//! Convolution is cross-correlation with zero padding. Weights are `f32`;
//! anything that sums over many images (means, sensitivities) accumulates in
//! `f64` on the caller's side.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::{self, tag};

pub const WEIGHTS_MAGIC: &[u8; 5] = b"FNET1";

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub out_filters: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out][in][ky][kx]`
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv {
    fn filter_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.pad;
        let pw = w + 2 * self.pad;
        if ph < self.kernel || pw < self.kernel {
            return None;
        }
        Some(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub out_dim: usize,
    pub in_dim: usize,
    /// `[out][in]`
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerDef {
    Conv(Conv),
    Relu,
    MaxPool { window: usize, stride: usize },
    Flatten,
    Dense(Dense),
    L2Norm,
}

impl LayerDef {
    fn kind_code(&self) -> u8 {
        match self {
            LayerDef::Conv(_) => 0,
            LayerDef::Relu => 1,
            LayerDef::MaxPool { .. } => 2,
            LayerDef::Flatten => 3,
            LayerDef::Dense(_) => 4,
            LayerDef::L2Norm => 5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerDef::Conv(_) => "conv",
            LayerDef::Relu => "relu",
            LayerDef::MaxPool { .. } => "maxpool",
            LayerDef::Flatten => "flatten",
            LayerDef::Dense(_) => "dense",
            LayerDef::L2Norm => "l2norm",
        }
    }
}

/// Activation shape `(channels, height, width)`. Flattened vectors are
/// `(len, 1, 1)`.
pub type Shape = (usize, usize, usize);

/// An immutable feed-forward network with tapped layers.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkModel {
    layers: Vec<LayerDef>,
    taps: Vec<usize>,
    /// `(width, height, channels)` of the expected input image.
    input: (usize, usize, usize),
    shapes: Vec<Shape>,
}

impl NetworkModel {
    /// Validate the architecture and precompute every layer's output shape.
    pub fn new(layers: Vec<LayerDef>, taps: Vec<usize>, input: (usize, usize, usize)) -> Result<Self> {
        let shapes = infer_shapes(&layers, input)?;
        if taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("tap points must be strictly increasing".into()));
        }
        if let Some(&t) = taps.iter().find(|&&t| t >= layers.len()) {
            return Err(Error::Parameter(format!(
                "tap point {t} out of range for {} layers",
                layers.len()
            )));
        }
        Ok(NetworkModel {
            layers,
            taps,
            input,
            shapes,
        })
    }

    pub fn layers(&self) -> &[LayerDef] {
        &self.layers
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn input_spec(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn n_taps(&self) -> usize {
        self.taps.len()
    }

    /// Output shape of every layer.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// λ_i: flattened length of every tapped activation.
    pub fn tap_lengths(&self) -> Vec<usize> {
        self.taps
            .iter()
            .map(|&t| {
                let (c, h, w) = self.shapes[t];
                c * h * w
            })
            .collect()
    }

    /// Model-layer indices of every convolution, in order.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerDef::Conv(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn conv(&self, layer: usize) -> Option<&Conv> {
        match self.layers.get(layer) {
            Some(LayerDef::Conv(c)) => Some(c),
            _ => None,
        }
    }

    /// Index of the layer whose output is the post-activation response of
    /// conv layer `layer`: the following ReLU when there is one.
    fn response_layer(&self, layer: usize) -> usize {
        match self.layers.get(layer + 1) {
            Some(LayerDef::Relu) => layer + 1,
            _ => layer,
        }
    }

    /// Copy of the model with the masked filters' weights and biases set to
    /// zero.
    pub fn with_zeroed_filters(&self, mask: &FilterMask) -> Result<NetworkModel> {
        mask.validate(self)?;
        let mut out = self.clone();
        for &(l, f) in &mask.disabled {
            if let LayerDef::Conv(c) = &mut out.layers[l] {
                let n = c.filter_len();
                c.weights[f * n..(f + 1) * n].fill(0.0);
                c.bias[f] = 0.0;
            }
        }
        Ok(out)
    }
}

fn infer_shapes(layers: &[LayerDef], input: (usize, usize, usize)) -> Result<Vec<Shape>> {
    let (w, h, c) = input;
    if w == 0 || h == 0 || c == 0 {
        return Err(Error::Parameter("input dimensions must be positive".into()));
    }
    let mut shape: Shape = (c, h, w);
    let mut shapes = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let bad = |msg: String| Error::Weights { layer: i, msg };
        shape = match layer {
            LayerDef::Conv(conv) => {
                if conv.stride == 0 || conv.kernel == 0 || conv.out_filters == 0 {
                    return Err(bad("conv stride, kernel and filter count must be positive".into()));
                }
                if conv.in_channels != shape.0 {
                    return Err(bad(format!(
                        "conv expects {} input channels, previous layer yields {}",
                        conv.in_channels, shape.0
                    )));
                }
                if conv.weights.len() != conv.out_filters * conv.filter_len()
                    || conv.bias.len() != conv.out_filters
                {
                    return Err(bad("conv weight or bias size does not match its dimensions".into()));
                }
                let (oh, ow) = conv
                    .output_hw(shape.1, shape.2)
                    .ok_or_else(|| bad("conv kernel larger than padded input".into()))?;
                (conv.out_filters, oh, ow)
            }
            LayerDef::Relu | LayerDef::L2Norm => shape,
            LayerDef::MaxPool { window, stride } => {
                if *window == 0 || *stride == 0 || shape.1 < *window || shape.2 < *window {
                    return Err(bad("invalid max-pool window".into()));
                }
                (shape.0, (shape.1 - window) / stride + 1, (shape.2 - window) / stride + 1)
            }
            LayerDef::Flatten => (shape.0 * shape.1 * shape.2, 1, 1),
            LayerDef::Dense(d) => {
                let len = shape.0 * shape.1 * shape.2;
                if d.in_dim != len {
                    return Err(bad(format!("dense expects {} inputs, got {len}", d.in_dim)));
                }
                if d.weights.len() != d.in_dim * d.out_dim || d.bias.len() != d.out_dim {
                    return Err(bad("dense weight or bias size does not match its dimensions".into()));
                }
                (d.out_dim, 1, 1)
            }
        };
        shapes.push(shape);
    }
    Ok(shapes)
}

/// The network used throughout the toolkit: four 3×3 conv blocks and a
/// 64-dimensional L2-normalized embedding, for 64×64 grayscale input.
///
/// Taps are the four post-ReLU maps and the dense output.
pub fn default_network(seed: u64) -> NetworkModel {
    let mut rng = seed::rng(seed::derive(seed, &[tag::NETWORK]));
    let mut he = |fan_in: usize, n: usize| -> Vec<f32> {
        let dist = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive scale");
        (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
    };
    let mut conv = |inc: usize, outc: usize| {
        LayerDef::Conv(Conv {
            out_filters: outc,
            in_channels: inc,
            kernel: 3,
            stride: 1,
            pad: 1,
            weights: he(inc * 9, outc * inc * 9),
            bias: vec![0.0; outc],
        })
    };
    let c1 = conv(1, 8);
    let c2 = conv(8, 16);
    let c3 = conv(16, 32);
    let c4 = conv(32, 32);
    let pool = || LayerDef::MaxPool { window: 2, stride: 2 };
    let dense = LayerDef::Dense(Dense {
        out_dim: 64,
        in_dim: 8 * 8 * 32,
        weights: he(8 * 8 * 32, 64 * 8 * 8 * 32),
        bias: vec![0.0; 64],
    });
    let layers = vec![
        c1,
        LayerDef::Relu,
        pool(),
        c2,
        LayerDef::Relu,
        pool(),
        c3,
        LayerDef::Relu,
        pool(),
        c4,
        LayerDef::Relu,
        LayerDef::Flatten,
        dense,
        LayerDef::L2Norm,
    ];
    NetworkModel::new(layers, vec![1, 4, 7, 10, 12], (64, 64, 1)).expect("default architecture is consistent")
}

// ---------------------------------------------------------------------------
// masks

/// Set of disabled `(model layer index, filter index)` pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FilterMask {
    pub disabled: BTreeSet<(usize, usize)>,
}

impl FilterMask {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.disabled.is_empty()
    }

    pub fn len(&self) -> usize {
        self.disabled.len()
    }

    pub fn contains(&self, layer: usize, filter: usize) -> bool {
        self.disabled.contains(&(layer, filter))
    }

    /// Every filter of every conv layer.
    pub fn all(model: &NetworkModel) -> Self {
        let disabled = model
            .conv_layers()
            .into_iter()
            .flat_map(|l| (0..model.conv(l).unwrap().out_filters).map(move |f| (l, f)))
            .collect();
        FilterMask { disabled }
    }

    pub fn validate(&self, model: &NetworkModel) -> Result<()> {
        for &(l, f) in &self.disabled {
            match model.conv(l) {
                Some(c) if f < c.out_filters => {}
                _ => {
                    return Err(Error::Shape(format!(
                        "mask entry ({l}, {f}) does not reference a conv filter"
                    )))
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// forward pass

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl Tensor {
    /// One channel's `H×W` plane.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.shape.1 * self.shape.2;
        &self.data[c * plane..(c + 1) * plane]
    }
}

/// φ_i(I) for every tapped layer, in tap order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivations {
    pub layers: Vec<Vec<f32>>,
}

impl LayerActivations {
    pub fn lengths(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub embedding: Vec<f32>,
    pub acts: LayerActivations,
}

/// Image samples scaled to [0, 1], channel-major.
pub fn image_to_tensor(img: &Image) -> Tensor {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut data = vec![0.0f32; w * h * c];
    for (i, px) in img.data().chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * w * h + i] = v as f32 / 255.0;
        }
    }
    Tensor {
        shape: (c, h, w),
        data,
    }
}

fn check_input(model: &NetworkModel, img: &Image) -> Result<()> {
    let (w, h, c) = model.input;
    if img.width() != w || img.height() != h || img.channels() != c {
        return Err(Error::Shape(format!(
            "network expects {w}x{h}x{c} input, got {}x{}x{}",
            img.width(),
            img.height(),
            img.channels()
        )));
    }
    Ok(())
}

fn conv_forward(conv: &Conv, input: &Tensor, out_shape: Shape, layer: usize, mask: Option<&FilterMask>) -> Tensor {
    let (ic, ih, iw) = input.shape;
    let (oc, oh, ow) = out_shape;
    let k = conv.kernel;
    let pad = conv.pad as isize;
    let stride = conv.stride;
    let mut out = vec![0.0f32; oc * oh * ow];
    let flen = conv.filter_len();
    // accumulate in f64 so the only rounding is the final store
    let mut dst = vec![0.0f64; oh * ow];

    for f in 0..oc {
        if mask.is_some_and(|m| m.contains(layer, f)) {
            continue;
        }
        dst.fill(conv.bias[f] as f64);
        let wf = &conv.weights[f * flen..(f + 1) * flen];
        for c in 0..ic {
            let src = input.channel(c);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wf[(c * k + ky) * k + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    // range of output columns whose input column is in bounds
                    let kxo = kx as isize - pad;
                    let ox_lo = if kxo >= 0 { 0 } else { ((-kxo) as usize).div_ceil(stride) };
                    let ox_hi = {
                        // largest ox with ox*stride + kxo <= iw - 1
                        let lim = iw as isize - 1 - kxo;
                        if lim < 0 {
                            continue;
                        }
                        ((lim as usize) / stride + 1).min(ow)
                    };
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let row = &src[iy as usize * iw..(iy as usize + 1) * iw];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let start = (ox_lo as isize + kxo) as usize;
                            let n = ox_hi - ox_lo;
                            for (d, s) in drow[ox_lo..ox_hi].iter_mut().zip(&row[start..start + n]) {
                                *d += wv * *s as f64;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * stride) as isize + kxo;
                                drow[ox] += wv * row[ix as usize] as f64;
                            }
                        }
                    }
                }
            }
        }
        for (o, d) in out[f * oh * ow..(f + 1) * oh * ow].iter_mut().zip(&dst) {
            *o = *d as f32;
        }
    }
    Tensor {
        shape: out_shape,
        data: out,
    }
}

fn maxpool_forward(input: &Tensor, window: usize, stride: usize, out_shape: Shape) -> Tensor {
    let (c, _, iw) = input.shape;
    let (_, oh, ow) = out_shape;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let src = input.channel(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..window {
                    let row = (oy * stride + dy) * iw;
                    for dx in 0..window {
                        m = m.max(src[row + ox * stride + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor {
        shape: out_shape,
        data: out,
    }
}

fn dense_forward(d: &Dense, input: &Tensor) -> Tensor {
    let x = &input.data;
    let data = (0..d.out_dim)
        .map(|o| {
            let row = &d.weights[o * d.in_dim..(o + 1) * d.in_dim];
            row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>() + d.bias[o]
        })
        .collect();
    Tensor {
        shape: (d.out_dim, 1, 1),
        data,
    }
}

fn l2_normalize(mut t: Tensor) -> Tensor {
    let norm = t.data.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut t.data {
            *v = (*v as f64 / norm) as f32;
        }
    }
    t
}

/// Full trace of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub embedding: Vec<f32>,
    pub acts: LayerActivations,
    /// Post-activation response of each conv layer, in conv order.
    pub conv_responses: Vec<Tensor>,
}

fn run(model: &NetworkModel, img: &Image, mask: Option<&FilterMask>, keep_responses: bool) -> Result<Trace> {
    check_input(model, img)?;
    if let Some(m) = mask {
        m.validate(model)?;
    }
    let response_at: Vec<usize> = if keep_responses {
        model.conv_layers().into_iter().map(|l| model.response_layer(l)).collect()
    } else {
        Vec::new()
    };
    let mut x = image_to_tensor(img);
    let mut taps = Vec::with_capacity(model.taps.len());
    let mut responses = Vec::with_capacity(response_at.len());
    let mut next_tap = 0;
    for (i, layer) in model.layers.iter().enumerate() {
        let shape = model.shapes[i];
        x = match layer {
            LayerDef::Conv(c) => conv_forward(c, &x, shape, i, mask),
            LayerDef::Relu => {
                for v in &mut x.data {
                    *v = v.max(0.0);
                }
                x
            }
            LayerDef::MaxPool { window, stride } => maxpool_forward(&x, *window, *stride, shape),
            LayerDef::Flatten => Tensor { shape, data: x.data },
            LayerDef::Dense(d) => dense_forward(d, &x),
            LayerDef::L2Norm => l2_normalize(x),
        };
        if next_tap < model.taps.len() && model.taps[next_tap] == i {
            taps.push(x.data.clone());
            next_tap += 1;
        }
        if response_at.contains(&i) {
            responses.push(x.clone());
        }
    }
    Ok(Trace {
        embedding: x.data,
        acts: LayerActivations { layers: taps },
        conv_responses: responses,
    })
}

/// Run the network on `img`. Masked filters produce all-zero channels.
pub fn forward(model: &NetworkModel, img: &Image, mask: Option<&FilterMask>) -> Result<ForwardOutput> {
    let t = run(model, img, mask, false)?;
    Ok(ForwardOutput {
        embedding: t.embedding,
        acts: t.acts,
    })
}

/// Forward pass that also keeps every conv layer's post-activation response.
pub fn forward_trace(model: &NetworkModel, img: &Image, mask: Option<&FilterMask>) -> Result<Trace> {
    run(model, img, mask, true)
}

/// Only the final embedding.
pub fn embed(model: &NetworkModel, img: &Image, mask: Option<&FilterMask>) -> Result<Vec<f32>> {
    Ok(forward(model, img, mask)?.embedding)
}

/// `a·b / (‖a‖‖b‖)`, or 0 when either vector is zero.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// weight file

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize to the `FNET1` container.
///
/// Layout: magic, u32 layer count, then per layer a u8 kind code followed by
/// its u32 dimensions and f32 weights then biases (all little-endian). A
/// trailer holds the u32 tap count, the tap indices and the u32 input
/// width, height and channels.
pub fn encode_weights(model: &NetworkModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    put_u32(&mut buf, model.layers.len());
    for layer in &model.layers {
        buf.push(layer.kind_code());
        match layer {
            LayerDef::Conv(c) => {
                for d in [c.out_filters, c.in_channels, c.kernel, c.stride, c.pad] {
                    put_u32(&mut buf, d);
                }
                put_f32s(&mut buf, &c.weights);
                put_f32s(&mut buf, &c.bias);
            }
            LayerDef::MaxPool { window, stride } => {
                put_u32(&mut buf, *window);
                put_u32(&mut buf, *stride);
            }
            LayerDef::Dense(d) => {
                put_u32(&mut buf, d.out_dim);
                put_u32(&mut buf, d.in_dim);
                put_f32s(&mut buf, &d.weights);
                put_f32s(&mut buf, &d.bias);
            }
            LayerDef::Relu | LayerDef::Flatten | LayerDef::L2Norm => {}
        }
    }
    put_u32(&mut buf, model.taps.len());
    for &t in &model.taps {
        put_u32(&mut buf, t);
    }
    let (w, h, c) = model.input;
    for d in [w, h, c] {
        put_u32(&mut buf, d);
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    layer: usize,
}

impl Reader<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Weights {
            layer: self.layer,
            msg: format!("{} (byte {})", msg.into(), self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| self.err("tensor size overflow"))?;
        let b = self.take(bytes)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<NetworkModel> {
    if bytes.len() < WEIGHTS_MAGIC.len() || &bytes[..5] != WEIGHTS_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"FNET1\""));
    }
    let mut r = Reader {
        bytes,
        pos: 5,
        layer: 0,
    };
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for i in 0..n_layers {
        r.layer = i;
        let layer = match r.u8()? {
            0 => {
                let out_filters = r.u32()?;
                let in_channels = r.u32()?;
                let kernel = r.u32()?;
                let stride = r.u32()?;
                let pad = r.u32()?;
                let n = out_filters
                    .checked_mul(in_channels)
                    .and_then(|v| v.checked_mul(kernel))
                    .and_then(|v| v.checked_mul(kernel))
                    .ok_or_else(|| r.err("conv dimensions overflow"))?;
                let weights = r.f32s(n)?;
                let bias = r.f32s(out_filters)?;
                LayerDef::Conv(Conv {
                    out_filters,
                    in_channels,
                    kernel,
                    stride,
                    pad,
                    weights,
                    bias,
                })
            }
            1 => LayerDef::Relu,
            2 => LayerDef::MaxPool {
                window: r.u32()?,
                stride: r.u32()?,
            },
            3 => LayerDef::Flatten,
            4 => {
                let out_dim = r.u32()?;
                let in_dim = r.u32()?;
                let n = out_dim
                    .checked_mul(in_dim)
                    .ok_or_else(|| r.err("dense dimensions overflow"))?;
                let weights = r.f32s(n)?;
                let bias = r.f32s(out_dim)?;
                LayerDef::Dense(Dense {
                    out_dim,
                    in_dim,
                    weights,
                    bias,
                })
            }
            5 => LayerDef::L2Norm,
            k => return Err(r.err(format!("unknown layer kind {k}"))),
        };
        layers.push(layer);
    }
    r.layer = n_layers;
    let n_taps = r.u32()?;
    let taps = (0..n_taps).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let input = (r.u32()?, r.u32()?, r.u32()?);
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after model"));
    }
    NetworkModel::new(layers, taps, input)
}

pub fn save_weights(model: &NetworkModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(model)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}
