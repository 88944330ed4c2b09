//! Tiny fully-convolutional segmentation network with a projection head.
//!
//! ```text
//! x[3,H,W] -conv1 3x3-> relu -conv2 3x3/2-> relu -conv3 3x3-> relu -up2x-> conv_out 1x1 -> logits[K,H,W]
//!                                                           \-> avg pool -> linear -> l2 norm -> embedding[D]
//! ```
//!
//! Forward and backward passes are written out by hand; every gradient is
//! checked against central finite differences in the test suite.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::numerics::{
    conv2d, conv2d_backward, l2_normalize, l2_normalize_backward, linear, linear_backward, pixel_cross_entropy, relu,
    relu_backward, upsample_nearest_2x, upsample_nearest_2x_backward, ConvGeometry, RngState, Tensor,
};

pub const CONV1_FILTERS: usize = 16;
pub const FEATURE_CHANNELS: usize = 32;

const SAME: ConvGeometry = ConvGeometry::new(1, 1);
const DOWN: ConvGeometry = ConvGeometry::new(2, 1);
const POINTWISE: ConvGeometry = ConvGeometry::new(1, 0);

/// Full parameter set. The same struct doubles as a gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNetParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub conv3_w: Tensor,
    pub conv3_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

pub const PARAM_NAMES: [&str; 10] = [
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b", "out_w", "out_b", "head_w", "head_b",
];

impl SegNetParams {
    /// All-zero parameters for `classes` outputs and `embed_dim` embedding size.
    pub fn zeros(classes: usize, embed_dim: usize) -> Self {
        Self {
            conv1_w: Tensor::zeros(&[CONV1_FILTERS, 3, 3, 3]),
            conv1_b: Tensor::zeros(&[CONV1_FILTERS]),
            conv2_w: Tensor::zeros(&[FEATURE_CHANNELS, CONV1_FILTERS, 3, 3]),
            conv2_b: Tensor::zeros(&[FEATURE_CHANNELS]),
            conv3_w: Tensor::zeros(&[FEATURE_CHANNELS, FEATURE_CHANNELS, 3, 3]),
            conv3_b: Tensor::zeros(&[FEATURE_CHANNELS]),
            out_w: Tensor::zeros(&[classes, FEATURE_CHANNELS, 1, 1]),
            out_b: Tensor::zeros(&[classes]),
            head_w: Tensor::zeros(&[embed_dim, FEATURE_CHANNELS]),
            head_b: Tensor::zeros(&[embed_dim]),
        }
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init(rng: &mut RngState, classes: usize, embed_dim: usize) -> Self {
        let mut p = Self::zeros(classes, embed_dim);
        for w in [
            &mut p.conv1_w,
            &mut p.conv2_w,
            &mut p.conv3_w,
            &mut p.out_w,
            &mut p.head_w,
        ] {
            let fan_in: usize = w.shape()[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            w.data_mut().iter_mut().for_each(|v| *v = std * rng.normal());
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.classes(), self.embed_dim())
    }

    pub fn classes(&self) -> usize {
        self.out_b.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.head_b.len()
    }

    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.conv3_w,
            &self.conv3_b,
            &self.out_w,
            &self.out_b,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.conv3_w,
            &mut self.conv3_b,
            &mut self.out_w,
            &mut self.out_b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn ensure_same_layout(&self, other: &Self) -> Result<()> {
        for (a, b) in self.tensors().iter().zip(other.tensors()) {
            a.ensure_same_shape(b)?;
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn accumulate(&mut self, other: &Self, scale: f64) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(scale, b)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_checkpoint(&mut bytes, epoch)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut bytes.as_slice())
    }

    /// Checkpoint layout: one line of JSON header, then every tensor as
    /// little-endian `f64` in [`PARAM_NAMES`] order.
    pub fn write_checkpoint<W: Write>(&self, out: &mut W, epoch: usize) -> Result<()> {
        let header = CheckpointHeader {
            shapes: PARAM_NAMES
                .iter()
                .zip(self.tensors())
                .map(|(name, t)| NamedShape {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            classes: self.classes(),
            embed_dim: self.embed_dim(),
            epoch,
        };
        let mut buf = serde_json::to_vec(&header)?;
        buf.push(b'\n');
        for t in self.tensors() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
    }

    pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<(Self, CheckpointHeader)> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io("<checkpoint>", e))?;
        let newline = bytes.iter().position(|&b| b == b'\n').ok_or(Error::Format {
            offset: bytes.len(),
            message: "checkpoint header is not newline-terminated".into(),
        })?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])?;
        let mut params = Self::zeros(header.classes, header.embed_dim);
        let mut offset = newline + 1;
        for ((name, t), declared) in PARAM_NAMES.iter().zip(params.tensors_mut()).zip(&header.shapes) {
            if declared.name != *name || declared.shape != t.shape() {
                return Err(Error::Format {
                    offset,
                    message: format!(
                        "expected tensor {name} {:?}, header declares {} {:?}",
                        t.shape(),
                        declared.name,
                        declared.shape
                    ),
                });
            }
            for v in t.data_mut() {
                let chunk = bytes.get(offset..offset + 8).ok_or(Error::Format {
                    offset,
                    message: "truncated checkpoint payload".into(),
                })?;
                *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
                offset += 8;
            }
        }
        if header.shapes.len() != PARAM_NAMES.len() || offset != bytes.len() {
            return Err(Error::Format {
                offset,
                message: "checkpoint payload length does not match header".into(),
            });
        }
        Ok((params, header))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedShape {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub shapes: Vec<NamedShape>,
    #[serde(rename = "K")]
    pub classes: usize,
    #[serde(rename = "D")]
    pub embed_dim: usize,
    pub epoch: usize,
}

/// Activations kept by the encoder for the backward pass (post-ReLU).
#[derive(Clone, Debug)]
pub struct EncoderCache {
    input: Tensor,
    a1: Tensor,
    a2: Tensor,
    a3: Tensor,
}

impl EncoderCache {
    pub fn features(&self) -> &Tensor {
        &self.a3
    }
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    encoder: EncoderCache,
    upsampled: Tensor,
}

fn check_input(x: &Tensor) -> Result<()> {
    let (c, h, w) = x.chw()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
    }
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "input extent {h}x{w} must be even and at least 2"
        )));
    }
    Ok(())
}

/// conv1 -> relu -> conv2 (stride 2) -> relu -> conv3 -> relu.
pub fn encode(params: &SegNetParams, x: &Tensor) -> Result<EncoderCache> {
    check_input(x)?;
    let a1 = relu(&conv2d(x, &params.conv1_w, &params.conv1_b, SAME)?);
    let a2 = relu(&conv2d(&a1, &params.conv2_w, &params.conv2_b, DOWN)?);
    let a3 = relu(&conv2d(&a2, &params.conv3_w, &params.conv3_b, SAME)?);
    Ok(EncoderCache {
        input: x.clone(),
        a1,
        a2,
        a3,
    })
}

/// Smallest `|pre-activation|` over every ReLU unit of the encoder.
///
/// Finite-difference checks are only meaningful when no unit sits closer to
/// the ReLU kink than the perturbation can move it.
pub fn relu_margin(params: &SegNetParams, x: &Tensor) -> Result<f64> {
    check_input(x)?;
    let z1 = conv2d(x, &params.conv1_w, &params.conv1_b, SAME)?;
    let z2 = conv2d(&relu(&z1), &params.conv2_w, &params.conv2_b, DOWN)?;
    let z3 = conv2d(&relu(&z2), &params.conv3_w, &params.conv3_b, SAME)?;
    Ok([&z1, &z2, &z3]
        .iter()
        .flat_map(|z| z.data().iter())
        .map(|v| v.abs())
        .fold(f64::INFINITY, f64::min))
}

/// Accumulates encoder parameter gradients given `d loss / d a3`.
pub fn encode_backward(
    params: &SegNetParams,
    cache: &EncoderCache,
    grad_a3: &Tensor,
    grads: &mut SegNetParams,
) -> Result<()> {
    let g3 = relu_backward(&cache.a3, grad_a3)?;
    let c3 = conv2d_backward(&cache.a2, &params.conv3_w, &params.conv3_b, SAME, &g3, true)?;
    grads.conv3_w.axpy(1.0, &c3.weight)?;
    grads.conv3_b.axpy(1.0, &c3.bias)?;
    let g2 = relu_backward(&cache.a2, &c3.input.expect("input gradient requested"))?;
    let c2 = conv2d_backward(&cache.a1, &params.conv2_w, &params.conv2_b, DOWN, &g2, true)?;
    grads.conv2_w.axpy(1.0, &c2.weight)?;
    grads.conv2_b.axpy(1.0, &c2.bias)?;
    let g1 = relu_backward(&cache.a1, &c2.input.expect("input gradient requested"))?;
    let c1 = conv2d_backward(&cache.input, &params.conv1_w, &params.conv1_b, SAME, &g1, false)?;
    grads.conv1_w.axpy(1.0, &c1.weight)?;
    grads.conv1_b.axpy(1.0, &c1.bias)?;
    Ok(())
}

/// Segmentation logits `[K,H,W]` for `x: [3,H,W]`.
pub fn forward(params: &SegNetParams, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
    let encoder = encode(params, x)?;
    let upsampled = upsample_nearest_2x(&encoder.a3)?;
    let logits = conv2d(&upsampled, &params.out_w, &params.out_b, POINTWISE)?;
    Ok((logits, ForwardCache { encoder, upsampled }))
}

pub fn predict(params: &SegNetParams, x: &Tensor) -> Result<Tensor> {
    forward(params, x).map(|(logits, _)| logits)
}

/// Accumulates the gradient of a loss into `grads` given `d loss / d logits`.
pub fn backward(
    params: &SegNetParams,
    cache: &ForwardCache,
    grad_logits: &Tensor,
    grads: &mut SegNetParams,
) -> Result<()> {
    let head = conv2d_backward(
        &cache.upsampled,
        &params.out_w,
        &params.out_b,
        POINTWISE,
        grad_logits,
        true,
    )?;
    grads.out_w.axpy(1.0, &head.weight)?;
    grads.out_b.axpy(1.0, &head.bias)?;
    let g_a3 = upsample_nearest_2x_backward(&head.input.expect("input gradient requested"))?;
    encode_backward(params, &cache.encoder, &g_a3, grads)
}

/// Pixel cross-entropy of `forward(x)` against `labels` (ignore excluded).
/// Adds `weight` times its parameter gradient to `grads` and returns the
/// unweighted loss.
pub fn segmentation_loss(
    params: &SegNetParams,
    x: &Tensor,
    labels: &[u8],
    weight: f64,
    grads: &mut SegNetParams,
) -> Result<f64> {
    let (logits, cache) = forward(params, x)?;
    let (loss, mut g_logits) = pixel_cross_entropy(&logits, labels, IGNORE_LABEL)?;
    if weight != 0.0 {
        if weight != 1.0 {
            g_logits = g_logits.scale(weight);
        }
        backward(params, &cache, &g_logits, grads)?;
    }
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct EmbedCache {
    encoder: EncoderCache,
    pooled: Tensor,
    projected: Tensor,
}

/// Unit-norm embedding of a `[3,p,p]` patch: encoder, global average pool,
/// linear head, L2 normalization.
pub fn encode_project(params: &SegNetParams, patch: &Tensor) -> Result<(Tensor, EmbedCache)> {
    let encoder = encode(params, patch)?;
    let (c, h, w) = encoder.a3.chw()?;
    let plane = (h * w) as f64;
    let pooled = Tensor::from_vec(
        (0..c)
            .map(|ch| encoder.a3.channel(ch).iter().sum::<f64>() / plane)
            .collect(),
    );
    let projected = linear(&pooled, &params.head_w, &params.head_b)?;
    let embedding = l2_normalize(&projected)?;
    Ok((
        embedding,
        EmbedCache {
            encoder,
            pooled,
            projected,
        },
    ))
}

pub fn encode_project_backward(
    params: &SegNetParams,
    cache: &EmbedCache,
    grad_embedding: &Tensor,
    grads: &mut SegNetParams,
) -> Result<()> {
    let g_proj = l2_normalize_backward(&cache.projected, grad_embedding)?;
    let (g_pooled, g_w, g_b) = linear_backward(&cache.pooled, &params.head_w, &g_proj)?;
    grads.head_w.axpy(1.0, &g_w)?;
    grads.head_b.axpy(1.0, &g_b)?;
    let (c, h, w) = cache.encoder.a3.chw()?;
    let plane = h * w;
    let mut g_a3 = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let g = g_pooled.data()[ch] / plane as f64;
        g_a3.channel_mut(ch).iter_mut().for_each(|v| *v = g);
    }
    encode_backward(params, &cache.encoder, &g_a3, grads)
}
