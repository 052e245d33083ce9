//! Whole-network replay: fusion groups tile by tile, with a whole-frame
//! reference for comparison.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::conv::{dataflow_conv, max_pool, reference_conv_halo, Edge, HaloInput, LayerWeights};
use super::tensor::Tensor;
use super::{estimate_cycles, ArchConfig, PerfReport};
use crate::error::{Error, Result};
use crate::fusion::FusionPlan;
use crate::netir::{LayerKind, LayerNode, NetGraph, TensorShape};
use crate::tiling::{BoundaryPolicy, TilePlan};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkWeights {
    pub layers: Vec<Option<LayerWeights>>,
}

impl NetworkWeights {
    pub fn random(graph: &NetGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = graph
            .layers
            .iter()
            .map(|l| l.kind.is_weighted().then(|| LayerWeights::random(l, &mut rng)))
            .collect();
        Self { layers }
    }

    fn get(&self, layer: &LayerNode) -> Result<&LayerWeights> {
        self.layers
            .get(layer.id)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::InvalidArgument(format!("no weights for layer {}", layer.id)))
    }
}

/// Elementwise residual add of `main` and `skip`: the first
/// `min(main, skip)` channels are summed with 8-bit saturation, surplus
/// main channels pass through and surplus skip channels are dropped.
fn residual_add(main: &Tensor, skip: &Tensor) -> Result<Tensor> {
    if (main.shape.width, main.shape.height) != (skip.shape.width, skip.shape.height) {
        return Err(Error::ShapeMismatch(format!("add of {} and {}", main.shape, skip.shape)));
    }
    let mut out = main.clone();
    let plane = main.width() * main.height();
    let n = main.channels().min(skip.channels()) * plane;
    for (o, &s) in out.data[..n].iter_mut().zip(&skip.data[..n]) {
        *o = o.saturating_add(s);
    }
    Ok(out)
}

fn concat(main: &Tensor, other: &Tensor) -> Result<Tensor> {
    if (main.shape.width, main.shape.height) != (other.shape.width, other.shape.height) {
        return Err(Error::ShapeMismatch(format!("concat of {} and {}", main.shape, other.shape)));
    }
    let shape = TensorShape::new(
        main.shape.width,
        main.shape.height,
        main.shape.channels + other.shape.channels,
    );
    let mut data = main.data.clone();
    data.extend_from_slice(&other.data);
    Tensor::from_vec(shape, data)
}

/// Runs one layer. Returns the output and the PE-array passes used (0 for
/// reference or non-MAC layers).
pub fn eval_layer(
    layer: &LayerNode,
    main: &HaloInput,
    skip: Option<&Tensor>,
    weights: &NetworkWeights,
    arch: &ArchConfig,
    use_dataflow: bool,
) -> Result<(Tensor, u64)> {
    match layer.kind {
        LayerKind::Conv | LayerKind::DepthwiseConv | LayerKind::PointwiseConv | LayerKind::OutputHead => {
            let w = weights.get(layer)?;
            if use_dataflow {
                let run = dataflow_conv(layer, main, w, arch)?;
                Ok((run.output, run.passes))
            } else {
                Ok((reference_conv_halo(layer, main, w, arch)?, 0))
            }
        }
        LayerKind::MaxPool => Ok((max_pool(main.map, layer.stride), 0)),
        LayerKind::ResidualAdd => {
            let s = skip.ok_or_else(|| Error::InvalidArgument(format!("layer {} needs a skip map", layer.id)))?;
            Ok((residual_add(main.map, s)?, 0))
        }
        LayerKind::Concat => {
            let s = skip.ok_or_else(|| Error::InvalidArgument(format!("layer {} needs a second map", layer.id)))?;
            Ok((concat(main.map, s)?, 0))
        }
    }
}

/// Output of every layer, computed over the whole frame with zero padding.
pub fn reference_network(
    graph: &NetGraph,
    weights: &NetworkWeights,
    input: &Tensor,
    arch: &ArchConfig,
) -> Result<Vec<Tensor>> {
    check_input(graph, input)?;
    let mut outs: Vec<Tensor> = Vec::with_capacity(graph.len());
    for l in &graph.layers {
        let main = if l.id == 0 { input } else { &outs[l.id - 1] };
        let skip = l.residual_from.filter(|_| l.kind.takes_second_operand()).map(|s| &outs[s]);
        let (y, _) = eval_layer(l, &HaloInput::zero(main), skip, weights, arch, false)?;
        outs.push(y);
    }
    Ok(outs)
}

fn check_input(graph: &NetGraph, input: &Tensor) -> Result<()> {
    if input.shape != graph.input {
        return Err(Error::ShapeMismatch(format!(
            "input tensor {} vs model input {}",
            input.shape, graph.input
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimOptions {
    /// Run tiles of a group on the rayon pool.
    pub parallel: bool,
    /// Use the PE-array schedule instead of the direct convolution.
    pub dataflow: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub perf: PerfReport,
    /// Final output when weights and an input were supplied.
    pub output: Option<Tensor>,
    /// PE-array passes counted during a dataflow replay.
    pub measured_passes: Option<u64>,
}

fn edge(policy: BoundaryPolicy) -> Edge {
    match policy {
        BoundaryPolicy::Zero => Edge::Zero,
        BoundaryPolicy::Replicate => Edge::Replicate,
    }
}

/// Layers whose full output map must exist outside their own group.
fn needs_full_map(graph: &NetGraph, plan: &FusionPlan) -> Vec<bool> {
    let mut need = vec![false; graph.len()];
    for g in &plan.groups {
        need[g.last()] = true;
    }
    for l in &graph.layers {
        if let (true, Some(src)) = (l.kind.takes_second_operand(), l.residual_from) {
            if plan.group_of(src) != plan.group_of(l.id) {
                need[src] = true;
            }
        }
    }
    need
}

/// Rows written by one tile as (layer, first row, data), plus its cycles.
type TileOutput = (Vec<(usize, u32, Tensor)>, u64);

/// Replays the network group by group. Without `data` only the cycle
/// estimate is produced.
pub fn simulate_network(
    graph: &NetGraph,
    plan: &FusionPlan,
    tile_plans: &[TilePlan],
    arch: &ArchConfig,
    data: Option<(&NetworkWeights, &Tensor)>,
    opts: SimOptions,
) -> Result<SimResult> {
    if tile_plans.len() != plan.groups.len() {
        return Err(Error::InvalidArgument(format!(
            "{} tile plans for {} groups",
            tile_plans.len(),
            plan.groups.len()
        )));
    }
    let perf = estimate_cycles(graph, tile_plans, arch);
    let Some((weights, input)) = data else {
        return Ok(SimResult {
            perf,
            output: None,
            measured_passes: None,
        });
    };
    check_input(graph, input)?;
    let need = needs_full_map(graph, plan);
    let mut full: HashMap<usize, Tensor> = HashMap::new();
    let mut passes = 0u64;

    for (group, tp) in plan.groups.iter().zip(tile_plans) {
        let ids = &group.layer_ids;
        let first = group.first();
        let group_input = if first == 0 { input } else { &full[&(first - 1)] };
        let tiles: Vec<std::ops::Range<u32>> = if tp.fallback {
            std::iter::once(0..tp.frame.height).collect()
        } else {
            tp.tile_rows()
        };
        let n_tiles = tiles.len();
        let run_tile = |t: usize| -> Result<TileOutput> {
            let rows = &tiles[t];
            let top = if t == 0 { Edge::Zero } else { edge(tp.boundary_policy) };
            let mut local: Vec<Tensor> = Vec::with_capacity(ids.len());
            let mut keep = Vec::new();
            let mut tile_passes = 0u64;
            let tile_in = group_input.rows(rows.start as usize, rows.end as usize);
            let mut f = 1u32; // downsampling before the current layer
            for (i, &id) in ids.iter().enumerate() {
                let l = graph.layer(id);
                let main = if i == 0 { &tile_in } else { &local[i - 1] };
                let r0 = rows.start / f;
                let skip_owned;
                let skip = match l.residual_from.filter(|_| l.kind.takes_second_operand()) {
                    None => None,
                    Some(src) if src >= first => Some(&local[src - first]),
                    Some(src) if src + 1 == first => Some(&tile_in),
                    Some(src) => {
                        skip_owned = full[&src].rows(r0 as usize, r0 as usize + main.height());
                        Some(&skip_owned)
                    }
                };
                // later tiles can vanish after downsampling, making this the frame edge
                let bottom = if r0 as usize + main.height() >= l.in_shape().height as usize {
                    Edge::Zero
                } else {
                    edge(tp.boundary_policy)
                };
                let halo = HaloInput { map: main, top, bottom };
                let (y, p) = eval_layer(l, &halo, skip, weights, arch, opts.dataflow)?;
                tile_passes += p;
                f *= l.downsample_factor();
                if need[id] {
                    keep.push((id, rows.start / f, y.clone()));
                }
                local.push(y);
            }
            Ok((keep, tile_passes))
        };
        let results: Vec<Result<TileOutput>> = if opts.parallel {
            (0..n_tiles).into_par_iter().map(run_tile).collect()
        } else {
            (0..n_tiles).map(run_tile).collect()
        };
        for r in results {
            let (keep, p) = r?;
            passes += p;
            for (id, row, part) in keep {
                full.entry(id)
                    .or_insert_with(|| Tensor::zeros(graph.layer(id).out_shape()))
                    .put_rows(row as usize, &part);
            }
        }
    }
    let last = graph.len().checked_sub(1);
    Ok(SimResult {
        perf,
        output: Some(match last {
            Some(l) => full.remove(&l).expect("final group output"),
            None => input.clone(),
        }),
        measured_passes: opts.dataflow.then_some(passes),
    })
}

/// Per layer, rows of the output map that tiled execution may compute
/// differently from the whole-frame reference: rows whose receptive field
/// crosses a tile seam, directly or through an earlier tainted row.
pub fn seam_taint(graph: &NetGraph, plan: &FusionPlan, tile_plans: &[TilePlan]) -> Vec<Vec<bool>> {
    let mut taint: Vec<Vec<bool>> = Vec::with_capacity(graph.len());
    let input_taint = vec![false; graph.input.height as usize];
    for (group, tp) in plan.groups.iter().zip(tile_plans) {
        let tiles: Vec<std::ops::Range<u32>> = if tp.fallback {
            std::iter::once(0..tp.frame.height).collect()
        } else {
            tp.tile_rows()
        };
        let mut f = 1u32;
        for &id in &group.layer_ids {
            let l = graph.layer(id);
            let main: &[bool] = if id == 0 { &input_taint } else { &taint[id - 1] };
            let in_h = main.len() as i64;
            // tile index of each input row at this layer's scale
            let mut tile_of = vec![0usize; main.len()];
            for (t, r) in tiles.iter().enumerate() {
                let (a, b) = ((r.start / f) as usize, ((r.end / f) as usize).min(main.len()));
                tile_of[a.min(main.len())..b].iter_mut().for_each(|x| *x = t);
            }
            let mut tail_rows_start = tiles.last().map_or(0, |r| (r.end / f) as usize);
            tail_rows_start = tail_rows_start.min(main.len());
            let out: Vec<bool> = match l.kind {
                k if k.is_weighted() => {
                    let k = l.kernel as i64;
                    let pad = (k - 1) / 2;
                    let s = l.stride as i64;
                    let conv_h = (in_h / s) as usize;
                    let conv: Vec<bool> = (0..conv_h)
                        .map(|oy| {
                            let c = oy as i64 * s;
                            let t = tile_of[c as usize];
                            (c - pad..=c + pad).filter(|&y| y >= 0 && y < in_h).any(|y| {
                                let y = y as usize;
                                main[y] || (y < tail_rows_start && tile_of[y] != t)
                            })
                        })
                        .collect();
                    pool_rows(&conv, l.pool.unwrap_or(1))
                }
                LayerKind::MaxPool => pool_rows(main, l.stride),
                _ => {
                    let skip = l.residual_from.map(|s| &taint[s]);
                    (0..main.len())
                        .map(|y| main[y] || skip.is_some_and(|s| s.get(y).copied().unwrap_or(false)))
                        .collect()
                }
            };
            f *= l.downsample_factor();
            taint.push(out);
        }
    }
    taint
}

fn pool_rows(rows: &[bool], p: u32) -> Vec<bool> {
    let p = p.max(1) as usize;
    (0..rows.len() / p).map(|y| rows[y * p..y * p + p].iter().any(|&b| b)).collect()
}
