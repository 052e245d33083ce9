//! Channel pruning until every fusion group's weights fit the buffer.
//!
//! Scores come from a [`GammaTable`]. Removing output channel `c` of a
//! convolution also removes channel `c` of every depthwise, pooling or add
//! node it flows through, and input channel `c` of the next convolution.
//! Residual adds whose operands end up with different widths follow the
//! rule of [`fix_residual_mismatch`].

mod gamma;
mod rcnet;

pub use gamma::{GammaDistribution, GammaTable};
pub use rcnet::{rcnet_iterate, GammaSource, IterationReport, RcnetConfig, RcnetOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionPlan;
use crate::netir::{infer_shapes, layer_weight_bytes, LayerKind, NetGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CouplingRole {
    /// Channel of a depthwise, pooling or add node on the main path.
    PassThrough,
    /// Input channel of the next convolution or head.
    ConsumerInput,
    /// Skip operand of an add; the add keeps its width.
    SkipOperand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoupledRemoval {
    pub layer: usize,
    /// Original index of the removed producer channel.
    pub channel: u32,
    pub role: CouplingRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    /// (producer layer, original channel index), in removal order.
    pub removed: Vec<(usize, u32)>,
    pub coupled: Vec<CoupledRemoval>,
    pub group_sizes_before: Vec<u64>,
    pub group_sizes: Vec<u64>,
    /// Groups still over budget with every candidate layer at one channel.
    pub infeasible_groups: Vec<usize>,
    /// Per layer, original indices of the surviving output channels.
    pub kept_channels: Vec<Vec<u32>>,
}

impl PruneDecision {
    pub fn ensure_feasible(&self, budget: u64) -> Result<()> {
        match self.infeasible_groups.first() {
            Some(&g) => Err(Error::Infeasible {
                group: g,
                budget,
                min_bytes: self.group_sizes[g],
            }),
            None => Ok(()),
        }
    }
}

/// Adds and concats that read layer `x` through `residual_from`.
fn skip_consumers(graph: &NetGraph) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); graph.len()];
    for l in &graph.layers {
        if let (true, Some(s)) = (l.kind.takes_second_operand(), l.residual_from) {
            if s + 1 != l.id {
                out[s].push(l.id);
            }
        }
    }
    out
}

fn passes_to_concat(graph: &NetGraph, skips: &[Vec<usize>], x: usize) -> bool {
    let mut stack = vec![x];
    while let Some(x) = stack.pop() {
        for &c in skips[x].iter().chain(std::iter::once(&(x + 1))) {
            let Some(l) = graph.layers.get(c) else { continue };
            let main = c == x + 1;
            match l.kind {
                LayerKind::Concat => return true,
                LayerKind::DepthwiseConv | LayerKind::MaxPool => stack.push(c),
                LayerKind::ResidualAdd if main => stack.push(c),
                _ => {}
            }
        }
    }
    false
}

/// Whether pruning output channels of `layer` is allowed.
pub fn is_prunable(graph: &NetGraph, layer: usize) -> bool {
    let l = graph.layer(layer);
    l.is_bn_bearing() && l.kind.owns_channels() && !passes_to_concat(graph, &skip_consumers(graph), layer)
}

struct Pruner<'a> {
    graph: NetGraph,
    skips: Vec<Vec<usize>>,
    kept: Vec<Vec<u32>>,
    coupled: &'a mut Vec<CoupledRemoval>,
}

impl Pruner<'_> {
    fn remove(&mut self, producer: usize, pos: usize) {
        let orig = self.kept[producer].remove(pos);
        self.graph.layers[producer].out_channels -= 1;
        let mut stack = vec![producer];
        while let Some(x) = stack.pop() {
            let next = (x + 1 < self.graph.len()).then_some(x + 1);
            let consumers: Vec<usize> = next.into_iter().chain(self.skips[x].iter().copied()).collect();
            for c in consumers {
                let main = c == x + 1;
                let l = &mut self.graph.layers[c];
                let role = match l.kind {
                    LayerKind::Conv | LayerKind::PointwiseConv | LayerKind::OutputHead => {
                        l.in_channels -= 1;
                        CouplingRole::ConsumerInput
                    }
                    LayerKind::DepthwiseConv | LayerKind::MaxPool => {
                        l.in_channels -= 1;
                        l.out_channels -= 1;
                        self.kept[c].remove(pos);
                        stack.push(c);
                        CouplingRole::PassThrough
                    }
                    LayerKind::ResidualAdd if main => {
                        l.in_channels -= 1;
                        l.out_channels -= 1;
                        self.kept[c].remove(pos);
                        stack.push(c);
                        CouplingRole::PassThrough
                    }
                    LayerKind::ResidualAdd => CouplingRole::SkipOperand,
                    LayerKind::Concat => unreachable!("concat-bound channels are not candidates"),
                };
                self.coupled.push(CoupledRemoval {
                    layer: c,
                    channel: orig,
                    role,
                });
            }
        }
    }

    fn group_size(&self, ids: &[usize], bpw: u64) -> u64 {
        ids.iter().map(|&i| layer_weight_bytes(&self.graph.layers[i], bpw)).sum()
    }
}

/// Removes lowest-score channels group by group until each group's weight
/// bytes are at most `budget`, stopping at the first state that fits.
pub fn prune_to_budget(
    graph: &NetGraph,
    plan: &FusionPlan,
    gammas: &GammaTable,
    budget: u64,
) -> Result<(NetGraph, PruneDecision)> {
    let graph = if graph.shapes_inferred() {
        graph.clone()
    } else {
        infer_shapes(graph)?
    };
    let bpw = plan.bytes_per_weight;
    let mut coupled = Vec::new();
    let mut p = Pruner {
        skips: skip_consumers(&graph),
        kept: graph.layers.iter().map(|l| (0..l.out_channels).collect()).collect(),
        graph,
        coupled: &mut coupled,
    };
    let group_sizes_before: Vec<u64> = plan.groups.iter().map(|g| p.group_size(&g.layer_ids, bpw)).collect();
    let mut removed = Vec::new();
    let mut infeasible_groups = Vec::new();

    for (gi, group) in plan.groups.iter().enumerate() {
        let mut size = p.group_size(&group.layer_ids, bpw);
        if size <= budget {
            continue;
        }
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for &id in &group.layer_ids {
            let l = p.graph.layer(id);
            if !(l.is_bn_bearing() && l.kind.owns_channels()) || passes_to_concat(&p.graph, &p.skips, id) {
                continue;
            }
            for &ch in &p.kept[id] {
                let score = gammas.get(id, ch as usize).ok_or(Error::MissingGamma {
                    layer: id,
                    channel: ch as usize,
                })?;
                cands.push((score, id, ch));
            }
        }
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for (_, id, ch) in cands {
            if size <= budget {
                break;
            }
            if p.graph.layers[id].out_channels <= 1 {
                continue;
            }
            let pos = p.kept[id].iter().position(|&c| c == ch).expect("candidate still present");
            p.remove(id, pos);
            removed.push((id, ch));
            size = p.group_size(&group.layer_ids, bpw);
        }
        if size > budget {
            infeasible_groups.push(gi);
        }
    }

    let group_sizes = plan.groups.iter().map(|g| p.group_size(&g.layer_ids, bpw)).collect();
    let kept_channels = std::mem::take(&mut p.kept);
    let out = infer_shapes(&p.graph)?;
    drop(p);
    Ok((
        out,
        PruneDecision {
            removed,
            coupled,
            group_sizes_before,
            group_sizes,
            infeasible_groups,
            kept_channels,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualFix {
    pub add_layer: usize,
    /// Channels arriving from the block's convolution path.
    pub main_channels: u32,
    /// Channels arriving on the skip edge.
    pub skip_channels: u32,
    pub summed: u32,
    /// Skip channels dropped because the main path is narrower.
    pub discarded: u32,
    /// Main-path channels output without a skip partner.
    pub passed_through: u32,
}

/// Resolves a width mismatch at residual add `add_layer`: the first
/// `min(main, skip)` channels are summed, surplus skip channels are dropped,
/// surplus main channels pass through. The add outputs the main width.
pub fn fix_residual_mismatch(graph: &NetGraph, add_layer: usize) -> Result<(NetGraph, ResidualFix)> {
    let g = if graph.shapes_inferred() {
        graph.clone()
    } else {
        infer_shapes(graph)?
    };
    let add = g
        .layers
        .get(add_layer)
        .filter(|l| l.kind == LayerKind::ResidualAdd)
        .ok_or_else(|| Error::InvalidArgument(format!("layer {add_layer} is not a residual add")))?;
    let src = add.residual_from.expect("validated add has a source");
    let main = add.in_channels;
    let skip = g.layers[src].out_channels;
    let fix = ResidualFix {
        add_layer,
        main_channels: main,
        skip_channels: skip,
        summed: main.min(skip),
        discarded: skip.saturating_sub(main),
        passed_through: main.saturating_sub(skip),
    };
    let g = infer_shapes(&g)?;
    debug_assert_eq!(g.layers[add_layer].out_channels, main);
    Ok((g, fix))
}

/// Applies [`fix_residual_mismatch`] to every add in order.
pub fn fix_all_residuals(graph: &NetGraph) -> Result<(NetGraph, Vec<ResidualFix>)> {
    let mut g = graph.clone();
    let mut fixes = Vec::new();
    let adds: Vec<usize> = g
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::ResidualAdd)
        .map(|l| l.id)
        .collect();
    for id in adds {
        let (ng, fix) = fix_residual_mismatch(&g, id)?;
        g = ng;
        fixes.push(fix);
    }
    Ok((g, fixes))
}

/// Scores of the batch-norm layer feeding `layer`, looking through pooling
/// and add nodes. `None` when the input is the image or an un-normalised map.
fn input_gammas(graph: &NetGraph, gammas: &GammaTable, layer: usize) -> Result<Option<Vec<f64>>> {
    let mut x = layer;
    loop {
        if x == 0 {
            return Ok(None);
        }
        let p = graph.layer(x - 1);
        if p.is_bn_bearing() {
            return layer_gammas(gammas, p.id, p.out_channels).map(Some);
        }
        match p.kind {
            LayerKind::MaxPool | LayerKind::ResidualAdd => x = p.id,
            LayerKind::Concat => {
                let src = p.residual_from.expect("concat has a source");
                let a = input_gammas(graph, gammas, p.id)?;
                let b = input_gammas(graph, gammas, src + 1)?;
                return Ok(match (a, b) {
                    (Some(mut a), Some(b)) => {
                        a.extend(b);
                        Some(a)
                    }
                    _ => None,
                });
            }
            _ => return Ok(None),
        }
    }
}

fn layer_gammas(gammas: &GammaTable, layer: usize, n: u32) -> Result<Vec<f64>> {
    (0..n as usize)
        .map(|c| gammas.get(layer, c).ok_or(Error::MissingGamma { layer, channel: c }))
        .collect()
}

/// Sparsity term of one batch-norm layer:
/// `S * sum|g_prev| * sum B_out + S * sum A_in * sum|g|`, where `S` is the
/// weight count per connection and `A`, `B` mark channels whose score is
/// non-zero. Depthwise layers only connect channel `i` to channel `i`.
pub fn layer_regularization(graph: &NetGraph, gammas: &GammaTable, layer: usize) -> Result<f64> {
    let l = graph.layer(layer);
    if !l.is_bn_bearing() {
        return Ok(0.0);
    }
    let s = (l.kernel as f64).powi(2);
    let g = layer_gammas(gammas, layer, l.out_channels)?;
    let prev = input_gammas(graph, gammas, layer)?;
    let cin = l.in_channels as usize;
    let alive_in = |i: usize| prev.as_ref().and_then(|p| p.get(i)).is_none_or(|&v| v != 0.0) as u8 as f64;
    let prev_abs = |i: usize| prev.as_ref().and_then(|p| p.get(i)).map_or(0.0, |v| v.abs());
    let alive_out = |j: usize| (g[j] != 0.0) as u8 as f64;

    if l.kind == LayerKind::DepthwiseConv {
        let t: f64 = (0..cin)
            .map(|i| s * prev_abs(i) * alive_out(i) + s * alive_in(i) * g[i].abs())
            .sum();
        return Ok(t);
    }
    let sum_prev: f64 = (0..cin).map(prev_abs).sum();
    let sum_a: f64 = (0..cin).map(alive_in).sum();
    let sum_b: f64 = (0..g.len()).map(alive_out).sum();
    let sum_g: f64 = g.iter().map(|v| v.abs()).sum();
    Ok(s * sum_prev * sum_b + s * sum_a * sum_g)
}

/// Sum of [`layer_regularization`] over the network.
pub fn regularization_term(graph: &NetGraph, gammas: &GammaTable) -> Result<f64> {
    (0..graph.len()).map(|i| layer_regularization(graph, gammas, i)).sum()
}

fn is_scalable(kind: LayerKind) -> bool {
    matches!(kind, LayerKind::Conv | LayerKind::PointwiseConv)
}

/// Multiplies every conv/pointwise width by `factor`, rounding half up, at least 1.
pub fn scale_channels(graph: &NetGraph, factor: f64) -> Result<NetGraph> {
    let mut g = graph.clone();
    for l in g.layers.iter_mut().filter(|l| is_scalable(l.kind)) {
        l.out_channels = ((l.out_channels as f64 * factor + 0.5).floor() as u32).max(1);
    }
    infer_shapes(&g)
}

/// Largest uniform width factor whose parameter count stays at or below `target`.
pub fn rescale_factor(graph: &NetGraph, target_params: u64) -> Result<f64> {
    let current = graph.param_count();
    if target_params < current {
        return Err(Error::InvalidArgument(format!(
            "rescale target {target_params} is below the current {current} parameters"
        )));
    }
    let params = |f: f64| scale_channels(graph, f).map(|g| g.param_count());
    let (mut lo, mut hi) = (1.0f64, 2.0f64);
    while params(hi)? <= target_params {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Ok(lo);
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if params(mid)? <= target_params {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

pub fn uniform_rescale(graph: &NetGraph, target_params: u64) -> Result<NetGraph> {
    let f = rescale_factor(graph, target_params)?;
    scale_channels(graph, f)
}
