//! Non-overlapped tiling of fusion groups over a ping-pong feature buffer.
//!
//! A tile spans the full width of the group's input map and a band of rows.
//! Each layer of the group reads its tile from one buffer half and writes
//! the result to the other, so both maps of a layer must fit a half at the
//! same time. Skip maps consumed later in the group stay resident in the
//! half they were written to. Tile heights are multiples of the group's
//! total downsampling factor so every layer sees whole rows.

mod writemask;

pub use writemask::{
    address_trace, roundtrip_check, writemask_map, writemask_unmap, BankAddress, BankedBuffer, TraceEntry,
    BANKS, LANES,
};

use serde::{Deserialize, Serialize};

use crate::fusion::{FusionGroup, FusionPlan};
use crate::netir::{LayerKind, NetGraph, TensorShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryPolicy {
    /// Zero rows outside the tile.
    #[default]
    Zero,
    /// Copy the tile's edge row outward.
    Replicate,
}

impl std::str::FromStr for BoundaryPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" | "zero_pad" => Ok(BoundaryPolicy::Zero),
            "replicate" => Ok(BoundaryPolicy::Replicate),
            _ => Err(format!("unknown boundary policy {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOccupancy {
    pub layer: usize,
    /// Bytes in the half read by this layer, resident skip maps included.
    pub input_half_bytes: u64,
    /// Bytes in the half written by this layer, resident skip maps included.
    pub output_half_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub group_index: usize,
    pub layer_ids: Vec<usize>,
    /// Group input map.
    pub frame: TensorShape,
    pub tile_width: u32,
    pub tile_height: u32,
    pub tile_count: u32,
    /// Tile heights are multiples of this, except a final remainder tile.
    pub align: u32,
    pub feature_half_bytes: u64,
    pub per_layer_occupancy: Vec<LayerOccupancy>,
    pub peak_half_bytes: u64,
    pub boundary_policy: BoundaryPolicy,
    /// No tile height fits; the group runs layer by layer through DRAM.
    pub fallback: bool,
}

impl TilePlan {
    /// Row ranges of the group input covered by each tile.
    pub fn tile_rows(&self) -> Vec<std::ops::Range<u32>> {
        (0..self.tile_count)
            .map(|t| {
                let start = t * self.tile_height;
                start..(start + self.tile_height).min(self.frame.height)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Half {
    Left,
    Right,
}

impl Half {
    pub fn other(self) -> Self {
        match self {
            Half::Left => Half::Right,
            Half::Right => Half::Left,
        }
    }
}

/// Per-axis downsampling of the whole group.
pub fn group_align(group: &[usize], graph: &NetGraph) -> u32 {
    group.iter().map(|&id| graph.layer(id).downsample_factor()).product()
}

fn map_bytes(shape: TensorShape, rows: u32, bpa: u64) -> u64 {
    rows as u64 * shape.width as u64 * shape.channels as u64 * bpa
}

/// Buffer occupancy of each layer step for a tile of `rows` group-input rows.
pub fn occupancy(group: &[usize], graph: &NetGraph, rows: u32, bpa: u64) -> Vec<LayerOccupancy> {
    let Some(&first) = group.first() else {
        return Vec::new();
    };
    let last = *group.last().unwrap();
    // rows of each layer's output within the tile
    let mut out_rows = Vec::with_capacity(group.len());
    let mut r = rows;
    for &id in group {
        r /= graph.layer(id).downsample_factor();
        out_rows.push(r);
    }
    let in_rows = |i: usize| if i == 0 { rows } else { out_rows[i - 1] };
    let out_half = |i: usize| if i.is_multiple_of(2) { Half::Right } else { Half::Left };

    // skip maps kept for a later add: (producer position, None for the group
    // input; add position; bytes). Sources before the group are streamed in.
    let mut residents: Vec<(Option<usize>, usize, u64)> = Vec::new();
    let mut streamed: Vec<(usize, u64)> = Vec::new();
    for (i, &id) in group.iter().enumerate() {
        let l = graph.layer(id);
        let (LayerKind::ResidualAdd | LayerKind::Concat, Some(src)) = (l.kind, l.residual_from) else {
            continue;
        };
        let rows_here = in_rows(i);
        let shape = graph.layer(src).out_shape();
        let bytes = map_bytes(shape, rows_here, bpa);
        if src >= first && src <= last {
            let p = src - first;
            if p + 1 != i {
                residents.push((Some(p), i, bytes));
            }
        } else if src + 1 == first {
            if i != 0 {
                residents.push((None, i, bytes));
            }
        } else {
            streamed.push((i, bytes));
        }
    }

    group
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let l = graph.layer(id);
            let mut inp = map_bytes(l.in_shape(), in_rows(i), bpa);
            let mut outp = map_bytes(l.out_shape(), out_rows[i], bpa);
            let in_half = out_half(i).other();
            for &(producer, add, bytes) in &residents {
                let half = producer.map_or(Half::Left, out_half);
                let live = match producer {
                    Some(p) => i > p && i <= add,
                    None => i <= add,
                };
                // the map read at step written+1 (or 0 for the input) is the skip map itself
                let is_current_input = match producer {
                    Some(p) => i == p + 1,
                    None => i == 0,
                };
                if !live || is_current_input {
                    continue;
                }
                if half == in_half {
                    inp += bytes;
                } else {
                    outp += bytes;
                }
            }
            for &(add, bytes) in &streamed {
                if add == i {
                    inp += bytes;
                }
            }
            LayerOccupancy {
                layer: id,
                input_half_bytes: inp,
                output_half_bytes: outp,
            }
        })
        .collect()
}

fn fits(group: &[usize], graph: &NetGraph, rows: u32, half: u64, bpa: u64) -> bool {
    occupancy(group, graph, rows, bpa)
        .iter()
        .all(|o| o.input_half_bytes <= half && o.output_half_bytes <= half)
}

/// Largest feasible tile height (a multiple of the group's downsampling
/// factor, or the whole frame) for `group`.
pub fn solve_tile(
    group_index: usize,
    group: &FusionGroup,
    graph: &NetGraph,
    feature_half_bytes: u64,
    bpa: u64,
    policy: BoundaryPolicy,
) -> TilePlan {
    let ids = &group.layer_ids;
    let frame = graph.input_of(group.first());
    let align = group_align(ids, graph);
    let h = frame.height;
    let ok = |rows: u32| fits(ids, graph, rows, feature_half_bytes, bpa);

    let (tile_height, fallback) = if ok(h) {
        (h, false)
    } else if h <= align || !ok(align) {
        (h, true)
    } else {
        // largest k with ok(k * align); ok(align) holds, ok(h) does not
        let (mut lo, mut hi) = (1u32, h.div_ceil(align));
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if mid * align < h && ok(mid * align) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo * align, false)
    };
    let per_layer_occupancy = occupancy(ids, graph, tile_height, bpa);
    let peak_half_bytes = per_layer_occupancy
        .iter()
        .map(|o| o.input_half_bytes.max(o.output_half_bytes))
        .max()
        .unwrap_or(0);
    TilePlan {
        group_index,
        layer_ids: ids.clone(),
        frame,
        tile_width: frame.width,
        tile_height,
        tile_count: h.div_ceil(tile_height),
        align,
        feature_half_bytes,
        per_layer_occupancy,
        peak_half_bytes,
        boundary_policy: policy,
        fallback,
    }
}

/// Tile plans for every group of `plan`.
pub fn solve_plan(plan: &FusionPlan, graph: &NetGraph, feature_half_bytes: u64, bpa: u64, policy: BoundaryPolicy) -> Vec<TilePlan> {
    plan.groups
        .iter()
        .enumerate()
        .map(|(i, g)| solve_tile(i, g, graph, feature_half_bytes, bpa, policy))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub tile: u32,
    pub layer: usize,
    pub input_half: Half,
    pub output_half: Half,
    /// The group input tile is fetched from DRAM before this step.
    pub external_load: bool,
    /// The group output tile is written to DRAM after this step.
    pub external_store: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PingPongSchedule {
    pub group_index: usize,
    pub steps: Vec<ScheduleStep>,
}

impl PingPongSchedule {
    pub fn external_loads(&self) -> usize {
        self.steps.iter().filter(|s| s.external_load).count()
    }

    pub fn external_stores(&self) -> usize {
        self.steps.iter().filter(|s| s.external_store).count()
    }
}

/// Per tile, the group's layers run in order with the halves swapping roles
/// each layer. Every tile starts reading from the left half.
pub fn make_schedule(tile_plan: &TilePlan) -> PingPongSchedule {
    let mut steps = Vec::new();
    let n = tile_plan.layer_ids.len();
    for t in 0..tile_plan.tile_count {
        let mut input = Half::Left;
        for (i, &layer) in tile_plan.layer_ids.iter().enumerate() {
            steps.push(ScheduleStep {
                tile: t,
                layer,
                input_half: input,
                output_half: input.other(),
                external_load: i == 0,
                external_store: i + 1 == n,
            });
            input = input.other();
        }
    }
    PingPongSchedule {
        group_index: tile_plan.group_index,
        steps,
    }
}

/// Pads a tile with `(k - 1) / 2` rows above and below.
pub fn extend_boundary<T: Copy + Default>(rows: &[Vec<T>], policy: BoundaryPolicy, kernel: u32) -> Vec<Vec<T>> {
    let halo = (kernel.saturating_sub(1) / 2) as usize;
    if halo == 0 || rows.is_empty() {
        return rows.to_vec();
    }
    let width = rows[0].len();
    let edge = |r: &Vec<T>| match policy {
        BoundaryPolicy::Zero => vec![T::default(); width],
        BoundaryPolicy::Replicate => r.clone(),
    };
    let top = edge(&rows[0]);
    let bottom = edge(rows.last().unwrap());
    let mut out = Vec::with_capacity(rows.len() + 2 * halo);
    out.extend(std::iter::repeat_n(top, halo));
    out.extend_from_slice(rows);
    out.extend(std::iter::repeat_n(bottom, halo));
    out
}
