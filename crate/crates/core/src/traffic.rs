//! External-memory traffic, bandwidth and DRAM energy.
//!
//! Layer-by-layer execution reads every layer's inputs and weights from
//! DRAM and writes every output back. Fused execution moves only each
//! group's input and output maps, plus skip maps that cross group borders;
//! weights are loaded once per frame when the group fits the weight
//! buffer. All sizes are bytes per frame; bandwidths are bytes per second.

use serde::{Deserialize, Serialize};

use crate::fusion::{partition_with, FusionGroup, FusionPlan};
use crate::netir::{layer_bias_bytes, layer_feature_bytes, layer_weight_bytes, LayerNode, NetGraph};
use crate::sim::ArchConfig;
use crate::tiling::{solve_plan, BoundaryPolicy, TilePlan};

pub const MB: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTraffic {
    pub layer: usize,
    pub weights: u64,
    pub feature_in: u64,
    pub feature_out: u64,
}

impl LayerTraffic {
    pub fn total(&self) -> u64 {
        self.weights + self.feature_in + self.feature_out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    /// Intermediate maps stay on chip, weights loaded once.
    Fused,
    /// Maps stay on chip but weights are reloaded for every tile.
    PerTileReload,
    LayerByLayer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupTraffic {
    pub group: usize,
    pub layer_ids: Vec<usize>,
    pub mode: GroupMode,
    pub weights: u64,
    pub feature_in: u64,
    pub feature_out: u64,
}

impl GroupTraffic {
    pub fn total(&self) -> u64 {
        self.weights + self.feature_in + self.feature_out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub layers: Vec<LayerTraffic>,
    pub groups: Vec<GroupTraffic>,
    pub weight_bytes: u64,
    pub feature_bytes: u64,
    pub total_bytes: u64,
    pub fps: f64,
    pub weight_bandwidth: f64,
    pub feature_bandwidth: f64,
    pub total_bandwidth: f64,
}

impl TrafficReport {
    fn from_parts(layers: Vec<LayerTraffic>, groups: Vec<GroupTraffic>, fps: f64) -> Self {
        let weight_bytes: u64 = layers.iter().map(|l| l.weights).sum();
        let feature_bytes: u64 = layers.iter().map(|l| l.feature_in + l.feature_out).sum();
        debug_assert_eq!(
            groups.iter().map(GroupTraffic::total).sum::<u64>(),
            weight_bytes + feature_bytes
        );
        let total_bytes = weight_bytes + feature_bytes;
        Self {
            layers,
            groups,
            weight_bytes,
            feature_bytes,
            total_bytes,
            fps,
            weight_bandwidth: weight_bytes as f64 * fps,
            feature_bandwidth: feature_bytes as f64 * fps,
            total_bandwidth: total_bytes as f64 * fps,
        }
    }
}

fn weight_bytes(layer: &LayerNode, arch: &ArchConfig) -> u64 {
    let bpw = arch.bytes_per_weight();
    let bias = if arch.count_bias {
        layer_bias_bytes(layer, bpw)
    } else {
        0
    };
    layer_weight_bytes(layer, bpw) + bias
}

fn own_traffic(graph: &NetGraph, id: usize, arch: &ArchConfig) -> LayerTraffic {
    let (feature_in, feature_out) = layer_feature_bytes(graph, id, arch.bytes_per_activation());
    LayerTraffic {
        layer: id,
        weights: weight_bytes(graph.layer(id), arch),
        feature_in,
        feature_out,
    }
}

fn group_total(layers: &[LayerTraffic]) -> (u64, u64, u64) {
    layers.iter().fold((0, 0, 0), |(w, i, o), l| {
        (w + l.weights, i + l.feature_in, o + l.feature_out)
    })
}

pub fn layer_by_layer_traffic(graph: &NetGraph, arch: &ArchConfig, fps: f64) -> TrafficReport {
    let layers: Vec<LayerTraffic> = (0..graph.len()).map(|i| own_traffic(graph, i, arch)).collect();
    let groups = layers
        .iter()
        .map(|l| GroupTraffic {
            group: l.layer,
            layer_ids: vec![l.layer],
            mode: GroupMode::LayerByLayer,
            weights: l.weights,
            feature_in: l.feature_in,
            feature_out: l.feature_out,
        })
        .collect();
    TrafficReport::from_parts(layers, groups, fps)
}

/// Per-layer DRAM bytes of a group run fused, weights loaded `reloads` times.
fn fused_layers(
    graph: &NetGraph,
    plan: &FusionPlan,
    gi: usize,
    group: &FusionGroup,
    reloads: u64,
    arch: &ArchConfig,
) -> Vec<LayerTraffic> {
    let bpa = arch.bytes_per_activation();
    let first = group.first();
    let last = group.last();
    group
        .layer_ids
        .iter()
        .map(|&id| {
            let l = graph.layer(id);
            let mut feature_in = 0;
            if id == first {
                feature_in += graph.input_of(id).bytes(bpa);
            }
            if let (true, Some(src)) = (l.kind.takes_second_operand(), l.residual_from) {
                if src + 1 < first {
                    feature_in += graph.layer(src).out_shape().bytes(bpa);
                }
            }
            // written out when it ends the group or feeds a later group's add
            let read_later = graph.layers[last + 1..].iter().any(|c| {
                c.kind.takes_second_operand()
                    && c.residual_from == Some(id)
                    && plan.group_of(c.id) != Some(gi)
                    && c.residual_from.unwrap() + 1 < plan.groups[plan.group_of(c.id).unwrap()].first()
            });
            let feature_out = if id == last || read_later {
                l.out_shape().bytes(bpa)
            } else {
                0
            };
            LayerTraffic {
                layer: id,
                weights: weight_bytes(l, arch) * reloads,
                feature_in,
                feature_out,
            }
        })
        .collect()
}

/// Traffic of `graph` executed with `plan` and its tile plans.
pub fn fused_traffic(
    graph: &NetGraph,
    plan: &FusionPlan,
    tile_plans: &[TilePlan],
    arch: &ArchConfig,
    fps: f64,
) -> TrafficReport {
    let mut layers = Vec::with_capacity(graph.len());
    let mut groups = Vec::with_capacity(plan.groups.len());
    for (gi, (group, tp)) in plan.groups.iter().zip(tile_plans).enumerate() {
        let lbl: Vec<LayerTraffic> = group.layer_ids.iter().map(|&id| own_traffic(graph, id, arch)).collect();
        let w: u64 = lbl.iter().map(|l| l.weights).sum();
        let options = if tp.fallback {
            vec![]
        } else if w <= arch.weight_buffer_bytes {
            vec![(GroupMode::Fused, fused_layers(graph, plan, gi, group, 1, arch))]
        } else {
            let tiles = tp.tile_count as u64;
            vec![(GroupMode::PerTileReload, fused_layers(graph, plan, gi, group, tiles, arch))]
        };
        let lbl_total: u64 = lbl.iter().map(LayerTraffic::total).sum();
        let (mode, chosen) = options
            .into_iter()
            .find(|(_, ls)| ls.iter().map(LayerTraffic::total).sum::<u64>() <= lbl_total)
            .unwrap_or((GroupMode::LayerByLayer, lbl));
        let (weights, feature_in, feature_out) = group_total(&chosen);
        groups.push(GroupTraffic {
            group: gi,
            layer_ids: group.layer_ids.clone(),
            mode,
            weights,
            feature_in,
            feature_out,
        });
        layers.extend(chosen);
    }
    TrafficReport::from_parts(layers, groups, fps)
}

/// DRAM energy in mJ per second for a bandwidth in bytes per second.
pub fn dram_energy(bytes_per_s: f64, pj_per_bit: f64) -> f64 {
    bytes_per_s * 8.0 * pj_per_bit * 1e-9
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub bandwidth_bytes_per_s: f64,
    pub pj_per_bit: f64,
    pub mj_per_s: f64,
}

impl EnergyReport {
    pub fn new(bandwidth_bytes_per_s: f64, pj_per_bit: f64) -> Self {
        Self {
            bandwidth_bytes_per_s,
            pj_per_bit,
            mj_per_s: dram_energy(bandwidth_bytes_per_s, pj_per_bit),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSavings {
    pub layer: usize,
    pub baseline: u64,
    pub fused: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    /// Only filled when both reports cover the same layers.
    pub layers: Vec<LayerSavings>,
    pub total: f64,
    pub feature: f64,
    pub weight: f64,
}

fn fraction(base: u64, new: u64) -> f64 {
    if base == 0 {
        0.0
    } else {
        1.0 - new as f64 / base as f64
    }
}

pub fn savings_report(baseline: &TrafficReport, fused: &TrafficReport) -> SavingsReport {
    let same = baseline.layers.len() == fused.layers.len()
        && baseline.layers.iter().zip(&fused.layers).all(|(a, b)| a.layer == b.layer);
    let layers = if same {
        baseline
            .layers
            .iter()
            .zip(&fused.layers)
            .map(|(a, b)| LayerSavings {
                layer: a.layer,
                baseline: a.total(),
                fused: b.total(),
                fraction: fraction(a.total(), b.total()),
            })
            .collect()
    } else {
        Vec::new()
    };
    SavingsReport {
        layers,
        total: fraction(baseline.total_bytes, fused.total_bytes),
        feature: fraction(baseline.feature_bytes, fused.feature_bytes),
        weight: fraction(baseline.weight_bytes, fused.weight_bytes),
    }
}

/// Greedy plan and tile plans for execution with the arch's buffers
/// (no overshoot: every non-degenerate group fits the weight buffer).
pub fn execution_plan(graph: &NetGraph, arch: &ArchConfig, policy: BoundaryPolicy) -> (FusionPlan, Vec<TilePlan>) {
    let plan = partition_with(graph, arch.weight_buffer_bytes, 0.0, arch.bytes_per_weight());
    let tiles = solve_plan(&plan, graph, arch.feature_half_bytes, arch.bytes_per_activation(), policy);
    (plan, tiles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub weight_buffer: u64,
    pub groups: usize,
    /// Bandwidth of the greedy plan made for this size.
    pub raw_bandwidth: f64,
    /// Best bandwidth over the plans of this and all smaller sizes.
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// Smallest size from which the curve no longer drops.
    pub saturation: Option<u64>,
}

/// Bandwidth against weight-buffer size. A larger buffer can always run the
/// plan chosen for a smaller one, so each point is the best of the greedy
/// plans made so far, evaluated with the current buffer.
pub fn buffer_sweep(graph: &NetGraph, sizes: &[u64], arch: &ArchConfig, fps: f64) -> SweepReport {
    let mut plans: Vec<(FusionPlan, Vec<TilePlan>)> = Vec::new();
    let mut points = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let a = ArchConfig {
            weight_buffer_bytes: size,
            ..arch.clone()
        };
        let (plan, tiles) = execution_plan(graph, &a, BoundaryPolicy::Zero);
        let raw = fused_traffic(graph, &plan, &tiles, &a, fps).total_bandwidth;
        let groups = plan.groups.len();
        plans.push((plan, tiles));
        let best = plans
            .iter()
            .map(|(p, t)| fused_traffic(graph, p, t, &a, fps).total_bandwidth)
            .fold(f64::INFINITY, f64::min);
        points.push(SweepPoint {
            weight_buffer: size,
            groups,
            raw_bandwidth: raw,
            bandwidth: best,
        });
    }
    let saturation = points.last().map(|last| {
        let flat_from = points
            .iter()
            .rposition(|p| p.bandwidth > last.bandwidth * (1.0 + 1e-12))
            .map_or(0, |i| i + 1);
        points[flat_from].weight_buffer
    });
    SweepReport { points, saturation }
}
