//! Functional and cycle-level model of the accelerator core.
//!
//! The MAC array is `pe_blocks` blocks of `block_rows x block_cols`
//! multipliers. Blocks work in lock step, one output channel each; a block
//! covers `block_rows` output positions of a row and `block_cols` kernel
//! columns per cycle. Pipeline fill/drain and memory stalls are ignored.

mod conv;
mod network;
mod tensor;

pub use conv::{
    dataflow_conv, finish, max_pool, reference_conv, reference_conv_halo, round_shift, saturate, DataflowRun, Edge,
    HaloInput, LayerWeights,
};
pub use network::{
    eval_layer, reference_network, seam_taint, simulate_network, NetworkWeights, SimOptions, SimResult,
};
pub use tensor::Tensor;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netir::{LayerKind, LayerNode, NetGraph};
use crate::tiling::TilePlan;

/// Layers below this utilization are flagged.
pub const LOW_UTILIZATION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub pe_blocks: u32,
    pub block_rows: u32,
    pub block_cols: u32,
    pub clock_hz: f64,
    pub weight_buffer_bytes: u64,
    /// Size of one half of the ping-pong feature buffer.
    pub feature_half_bytes: u64,
    pub banks: u32,
    pub act_bits: u32,
    pub weight_bits: u32,
    pub accum_bits: u32,
    /// Upper clamp of ReLU6 in the activation format (6.0 in Q3.4).
    pub relu6_max: i32,
    /// Count one bias value per output channel in weight sizes.
    pub count_bias: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            pe_blocks: 8,
            block_rows: 32,
            block_cols: 3,
            clock_hz: 3.0e8,
            weight_buffer_bytes: 96 * 1024,
            feature_half_bytes: 192 * 1024,
            banks: 8,
            act_bits: 8,
            weight_bits: 8,
            accum_bits: 24,
            relu6_max: 96,
            count_bias: false,
        }
    }
}

impl ArchConfig {
    pub fn total_macs(&self) -> u64 {
        self.pe_blocks as u64 * self.block_rows as u64 * self.block_cols as u64
    }

    /// Two operations per MAC per cycle, in GOPS.
    pub fn peak_gops(&self) -> f64 {
        2.0 * self.total_macs() as f64 * self.clock_hz / 1e9
    }

    pub fn bytes_per_activation(&self) -> u64 {
        self.act_bits.div_ceil(8) as u64
    }

    pub fn bytes_per_weight(&self) -> u64 {
        self.weight_bits.div_ceil(8) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pe_blocks", self.pe_blocks as u64),
            ("block_rows", self.block_rows as u64),
            ("block_cols", self.block_cols as u64),
            ("weight_buffer_bytes", self.weight_buffer_bytes),
            ("feature_half_bytes", self.feature_half_bytes),
            ("banks", self.banks as u64),
            ("act_bits", self.act_bits as u64),
            ("weight_bits", self.weight_bits as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if self.clock_hz.is_nan() || self.clock_hz <= 0.0 {
            return Err(Error::Validation("clock_hz must be positive".into()));
        }
        if !(2..=63).contains(&self.accum_bits) {
            return Err(Error::Validation("accum_bits must be in 2..=63".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// MACs and array cycles of `layer` producing `conv_rows` output rows
/// (before any pool attribute) of width `conv_width`.
pub fn layer_work(layer: &LayerNode, conv_rows: u64, conv_width: u64, arch: &ArchConfig) -> (u64, u64) {
    if !layer.kind.is_weighted() {
        return (0, 0);
    }
    let k = layer.kernel as u64;
    let cout = layer.out_channels as u64;
    let cin_eff = if layer.kind == LayerKind::DepthwiseConv {
        1
    } else {
        layer.in_channels as u64
    };
    let macs = conv_rows * conv_width * cout * cin_eff * k * k;
    let cycles = conv_rows
        * conv_width.div_ceil(arch.block_rows as u64)
        * cout.div_ceil(arch.pe_blocks as u64)
        * cin_eff
        * k
        * k.div_ceil(arch.block_cols as u64);
    (macs, cycles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPerf {
    pub layer: usize,
    pub kind: LayerKind,
    pub macs: u64,
    pub cycles: u64,
    pub utilization: f64,
    pub low_utilization: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub layers: Vec<LayerPerf>,
    pub total_macs: u64,
    pub total_cycles: u64,
    pub utilization: f64,
    pub achieved_gops: f64,
    pub peak_gops: f64,
    pub fps: f64,
}

fn utilization(macs: u64, cycles: u64, arch: &ArchConfig) -> f64 {
    if cycles == 0 {
        0.0
    } else {
        macs as f64 / (cycles as f64 * arch.total_macs() as f64)
    }
}

/// Cycle estimate of a frame. Layers covered by `tile_plans` are counted
/// tile by tile; the rest (and fallback groups) over the whole map.
pub fn estimate_cycles(graph: &NetGraph, tile_plans: &[TilePlan], arch: &ArchConfig) -> PerfReport {
    let mut work = vec![(0u64, 0u64); graph.len()];
    let mut covered = vec![false; graph.len()];
    for tp in tile_plans.iter().filter(|t| !t.fallback) {
        for rows in tp.tile_rows() {
            let mut r = (rows.end - rows.start) as u64;
            for &id in &tp.layer_ids {
                let l = graph.layer(id);
                let conv_rows = r / l.stride as u64;
                let (w, _) = l.conv_out_dims();
                let (m, c) = layer_work(l, conv_rows, w as u64, arch);
                work[id].0 += m;
                work[id].1 += c;
                covered[id] = true;
                r /= l.downsample_factor() as u64;
            }
        }
    }
    for l in &graph.layers {
        if !covered[l.id] {
            let (w, h) = l.conv_out_dims();
            work[l.id] = layer_work(l, h as u64, w as u64, arch);
        }
    }
    let layers: Vec<LayerPerf> = graph
        .layers
        .iter()
        .map(|l| {
            let (macs, cycles) = work[l.id];
            let u = utilization(macs, cycles, arch);
            LayerPerf {
                layer: l.id,
                kind: l.kind,
                macs,
                cycles,
                utilization: u,
                low_utilization: cycles > 0 && u < LOW_UTILIZATION,
            }
        })
        .collect();
    let total_macs: u64 = layers.iter().map(|l| l.macs).sum();
    let total_cycles: u64 = layers.iter().map(|l| l.cycles).sum();
    let seconds = total_cycles as f64 / arch.clock_hz;
    PerfReport {
        total_macs,
        total_cycles,
        utilization: utilization(total_macs, total_cycles, arch),
        achieved_gops: if total_cycles == 0 {
            0.0
        } else {
            2.0 * total_macs as f64 / seconds / 1e9
        },
        peak_gops: arch.peak_gops(),
        fps: if total_cycles == 0 { 0.0 } else { 1.0 / seconds },
        layers,
    }
}
