//! Integer convolution: a direct reference and the PE-array pass schedule.
//!
//! Arithmetic: 8-bit operands, exact products summed in a wide register,
//! per-channel bias added, then one saturation to the accumulator width.
//! The saturated sum is scaled by `multiplier / 2^shift` with rounding half
//! away from zero, clamped by the activation (`[0, relu6_max]` for layers
//! with batch norm + ReLU6, the signed 8-bit range otherwise) and finally
//! max-pooled when the layer carries a pool attribute.

use rand::Rng;

use super::tensor::Tensor;
use super::ArchConfig;
use crate::error::{Error, Result};
use crate::netir::{LayerKind, LayerNode, TensorShape};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerWeights {
    /// Dense: `[cout][cin][ky][kx]`; depthwise: `[c][ky][kx]`.
    pub weights: Vec<i8>,
    pub bias: Vec<i32>,
    pub multiplier: Vec<i32>,
    pub shift: Vec<u8>,
}

impl LayerWeights {
    pub fn expected_len(layer: &LayerNode) -> usize {
        let k2 = (layer.kernel * layer.kernel) as usize;
        match layer.kind {
            LayerKind::DepthwiseConv => k2 * layer.out_channels as usize,
            _ => k2 * layer.in_channels as usize * layer.out_channels as usize,
        }
    }

    /// Given weights with unit scale and zero bias.
    pub fn identity_scale(layer: &LayerNode, weights: Vec<i8>) -> Self {
        let n = layer.out_channels as usize;
        Self {
            weights,
            bias: vec![0; n],
            multiplier: vec![1; n],
            shift: vec![0; n],
        }
    }

    /// Random weights, biases and a scale that keeps typical outputs in range.
    pub fn random<R: Rng>(layer: &LayerNode, rng: &mut R) -> Self {
        let n = layer.out_channels as usize;
        let fan_in = LayerWeights::expected_len(layer) / n.max(1);
        // sum of fan_in products of uniform bytes has std ~5461 * sqrt(fan_in);
        // scale that (times the mean multiplier) to roughly +-48
        let shift = (3641.0 * (fan_in.max(1) as f64).sqrt()).log2().round() as u8;
        Self {
            weights: (0..Self::expected_len(layer)).map(|_| rng.random::<i8>()).collect(),
            bias: (0..n).map(|_| rng.random_range(-2048..2048)).collect(),
            multiplier: (0..n).map(|_| rng.random_range(1..=64)).collect(),
            shift: vec![shift; n],
        }
    }

    fn check(&self, layer: &LayerNode) -> Result<()> {
        let n = layer.out_channels as usize;
        if self.weights.len() != Self::expected_len(layer)
            || self.bias.len() != n
            || self.multiplier.len() != n
            || self.shift.len() != n
        {
            return Err(Error::ShapeMismatch(format!(
                "layer {}: weight arrays do not match {} {}x{} {}->{}",
                layer.id, layer.kind, layer.kernel, layer.kernel, layer.in_channels, layer.out_channels
            )));
        }
        Ok(())
    }
}

/// How rows above/below the stored map are synthesised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    Zero,
    Replicate,
}

/// A map (or a tile of one) with the policy for rows beyond its top and
/// bottom. Columns outside the map always read as zero.
#[derive(Debug, Clone, Copy)]
pub struct HaloInput<'a> {
    pub map: &'a Tensor,
    pub top: Edge,
    pub bottom: Edge,
}

impl<'a> HaloInput<'a> {
    pub fn zero(map: &'a Tensor) -> Self {
        Self {
            map,
            top: Edge::Zero,
            bottom: Edge::Zero,
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: i64, x: i64) -> i8 {
        let (w, h) = (self.map.width() as i64, self.map.height() as i64);
        if x < 0 || x >= w || h == 0 {
            return 0;
        }
        let y = if y < 0 {
            match self.top {
                Edge::Zero => return 0,
                Edge::Replicate => 0,
            }
        } else if y >= h {
            match self.bottom {
                Edge::Zero => return 0,
                Edge::Replicate => h - 1,
            }
        } else {
            y
        };
        self.map.get(c, y as usize, x as usize)
    }
}

fn check_input(layer: &LayerNode, input: &Tensor) -> Result<()> {
    if !matches!(
        layer.kind,
        LayerKind::Conv | LayerKind::DepthwiseConv | LayerKind::PointwiseConv | LayerKind::OutputHead
    ) {
        return Err(Error::InvalidArgument(format!("layer {} is not a convolution", layer.id)));
    }
    if input.shape.channels != layer.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "layer {} expects {} input channels, got {}",
            layer.id, layer.in_channels, input.shape.channels
        )));
    }
    Ok(())
}

fn conv_dims(layer: &LayerNode, input: &Tensor) -> (usize, usize) {
    let s = layer.stride as usize;
    (input.width() / s, input.height() / s)
}

/// Rounding right shift, ties away from zero.
pub fn round_shift(v: i64, shift: u8) -> i64 {
    if shift == 0 {
        return v;
    }
    let half = 1i64 << (shift - 1);
    if v >= 0 {
        (v + half) >> shift
    } else {
        -((-v + half) >> shift)
    }
}

/// Saturates to a signed `bits`-wide register.
pub fn saturate(v: i64, bits: u32) -> i64 {
    let max = (1i64 << (bits - 1)) - 1;
    v.clamp(-max - 1, max)
}

/// Accumulator output to 8-bit activation.
pub fn finish(acc: i64, co: usize, layer: &LayerNode, w: &LayerWeights, arch: &ArchConfig) -> i8 {
    let acc = saturate(acc + w.bias[co] as i64, arch.accum_bits);
    let v = round_shift(acc * w.multiplier[co] as i64, w.shift[co]);
    let (lo, hi) = if layer.has_bn_relu {
        (0, arch.relu6_max as i64)
    } else {
        (i8::MIN as i64, i8::MAX as i64)
    };
    v.clamp(lo, hi) as i8
}

/// Max over non-overlapping `p x p` windows (floor dims).
pub fn max_pool(input: &Tensor, p: u32) -> Tensor {
    if p <= 1 {
        return input.clone();
    }
    let p = p as usize;
    let (ow, oh) = (input.width() / p, input.height() / p);
    let mut out = Tensor::zeros(TensorShape::new(ow as u32, oh as u32, input.shape.channels));
    for c in 0..input.channels() {
        for y in 0..oh {
            for x in 0..ow {
                let mut m = i8::MIN;
                for dy in 0..p {
                    for dx in 0..p {
                        m = m.max(input.get(c, y * p + dy, x * p + dx));
                    }
                }
                out.set(c, y, x, m);
            }
        }
    }
    out
}

fn weight_index(layer: &LayerNode, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
    let k = layer.kernel as usize;
    match layer.kind {
        LayerKind::DepthwiseConv => (co * k + ky) * k + kx,
        _ => ((co * layer.in_channels as usize + ci) * k + ky) * k + kx,
    }
}

/// Direct-definition convolution on a zero-padded map.
pub fn reference_conv(layer: &LayerNode, input: &Tensor, w: &LayerWeights, arch: &ArchConfig) -> Result<Tensor> {
    reference_conv_halo(layer, &HaloInput::zero(input), w, arch)
}

pub fn reference_conv_halo(
    layer: &LayerNode,
    input: &HaloInput,
    w: &LayerWeights,
    arch: &ArchConfig,
) -> Result<Tensor> {
    check_input(layer, input.map)?;
    w.check(layer)?;
    let (ow, oh) = conv_dims(layer, input.map);
    let k = layer.kernel as usize;
    let pad = (k as i64 - 1) / 2;
    let s = layer.stride as i64;
    let cout = layer.out_channels as usize;
    let mut out = Tensor::zeros(TensorShape::new(ow as u32, oh as u32, cout as u32));
    for co in 0..cout {
        let inputs: Vec<usize> = if layer.kind == LayerKind::DepthwiseConv {
            vec![co]
        } else {
            (0..layer.in_channels as usize).collect()
        };
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0i64;
                for &ci in &inputs {
                    for ky in 0..k {
                        for kx in 0..k {
                            let x = input.get(ci, oy as i64 * s + ky as i64 - pad, ox as i64 * s + kx as i64 - pad);
                            acc += x as i64 * w.weights[weight_index(layer, co, ci, ky, kx)] as i64;
                        }
                    }
                }
                out.set(co, oy, ox, finish(acc, co, layer, w, arch));
            }
        }
    }
    Ok(max_pool(&out, layer.pool.unwrap_or(1)))
}

/// Result of running a layer through the PE-array schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataflowRun {
    pub output: Tensor,
    /// PE-array passes; one pass per cycle with all blocks in lock step.
    pub passes: u64,
}

/// Convolution as the PE array computes it. Each of the `pe_blocks` blocks
/// owns one output channel of the current channel group. Per pass a block
/// takes `block_rows` output positions of one row (inputs broadcast along
/// the block) and `block_cols` kernel-column taps of one kernel row (weights
/// broadcast down the block); the tap products of a position are summed and
/// added to that position's accumulator. Input channels and kernel rows are
/// walked pass after pass. Lanes past the row end and taps past the kernel
/// width contribute zero.
pub fn dataflow_conv(
    layer: &LayerNode,
    input: &HaloInput,
    w: &LayerWeights,
    arch: &ArchConfig,
) -> Result<DataflowRun> {
    check_input(layer, input.map)?;
    w.check(layer)?;
    let (ow, oh) = conv_dims(layer, input.map);
    let k = layer.kernel as usize;
    let pad = (k as i64 - 1) / 2;
    let s = layer.stride as i64;
    let cout = layer.out_channels as usize;
    let rows = arch.block_rows as usize;
    let cols = arch.block_cols as usize;
    let blocks = arch.pe_blocks as usize;
    let depthwise = layer.kind == LayerKind::DepthwiseConv;
    let cin_passes = if depthwise { 1 } else { layer.in_channels as usize };

    let mut out = Tensor::zeros(TensorShape::new(ow as u32, oh as u32, cout as u32));
    let mut passes = 0u64;
    let mut acc = vec![vec![0i64; rows]; blocks];

    for oy in 0..oh {
        for x0 in (0..ow).step_by(rows) {
            for c0 in (0..cout).step_by(blocks) {
                acc.iter_mut().for_each(|a| a.fill(0));
                for cstep in 0..cin_passes {
                    for ky in 0..k {
                        for kx0 in (0..k).step_by(cols) {
                            passes += 1;
                            for (b, acc_b) in acc.iter_mut().enumerate() {
                                let co = c0 + b;
                                if co >= cout {
                                    continue;
                                }
                                let ci = if depthwise { co } else { cstep };
                                let taps: Vec<i64> = (0..cols)
                                    .map(|t| {
                                        let kx = kx0 + t;
                                        if kx < k {
                                            w.weights[weight_index(layer, co, ci, ky, kx)] as i64
                                        } else {
                                            0
                                        }
                                    })
                                    .collect();
                                let iy = oy as i64 * s + ky as i64 - pad;
                                for (lane, a) in acc_b.iter_mut().enumerate() {
                                    let ox = x0 + lane;
                                    if ox >= ow {
                                        continue;
                                    }
                                    let base = ox as i64 * s + kx0 as i64 - pad;
                                    let mut diag = 0i64;
                                    for (t, &wt) in taps.iter().enumerate() {
                                        diag += wt * input.get(ci, iy, base + t as i64) as i64;
                                    }
                                    *a += diag;
                                }
                            }
                        }
                    }
                }
                for (b, acc_b) in acc.iter().enumerate() {
                    let co = c0 + b;
                    if co >= cout {
                        break;
                    }
                    for (lane, &a) in acc_b.iter().enumerate() {
                        let ox = x0 + lane;
                        if ox < ow {
                            out.set(co, oy, ox, finish(a, co, layer, w, arch));
                        }
                    }
                }
            }
        }
    }
    Ok(DataflowRun {
        output: max_pool(&out, layer.pool.unwrap_or(1)),
        passes,
    })
}
