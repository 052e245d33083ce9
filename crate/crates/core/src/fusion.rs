//! Greedy fusion-group partitioning under a weight-buffer budget.
//!
//! The scan walks the network from input to output in atomic units (a single
//! layer, or a whole residual block) and closes the current group when the
//! next unit would push the weight total past `(1 + m) * B` or the group
//! past two downsampling nodes. Downsampling by layer 0 is not counted.

use std::ops::{Range, RangeInclusive};

use serde::{Deserialize, Serialize};

use crate::netir::{layer_weight_bytes, LayerKind, NetGraph};

/// Most downsampling nodes a group may hold (layer 0 exempt).
pub const MAX_DOWNSAMPLES: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionGroup {
    pub layer_ids: Vec<usize>,
    pub weight_bytes: u64,
    /// Raw count of downsampling nodes, layer 0 included.
    pub downsample_count: u32,
    pub contains_first_layer: bool,
    /// A single atomic unit that alone exceeds `(1 + m) * B`.
    pub degenerate: bool,
}

impl FusionGroup {
    fn new() -> Self {
        Self {
            layer_ids: Vec::new(),
            weight_bytes: 0,
            downsample_count: 0,
            contains_first_layer: false,
            degenerate: false,
        }
    }

    fn build(graph: &NetGraph, ids: Vec<usize>, bytes_per_weight: u64) -> Self {
        let mut g = Self::new();
        for id in ids {
            g.add_layer(graph, id, bytes_per_weight);
        }
        g
    }

    fn add_layer(&mut self, graph: &NetGraph, id: usize, bytes_per_weight: u64) {
        let l = graph.layer(id);
        self.weight_bytes += layer_weight_bytes(l, bytes_per_weight);
        self.downsample_count += l.is_downsampling() as u32;
        self.contains_first_layer |= id == 0;
        self.layer_ids.push(id);
    }

    /// Downsampling count with layer 0's own downsampling ignored.
    pub fn effective_downsample_count(&self, graph: &NetGraph) -> u32 {
        let first_ds = self.contains_first_layer && graph.layer(0).is_downsampling();
        self.downsample_count - first_ds as u32
    }

    pub fn first(&self) -> usize {
        self.layer_ids[0]
    }

    pub fn last(&self) -> usize {
        *self.layer_ids.last().expect("non-empty group")
    }

    pub fn contains(&self, id: usize) -> bool {
        !self.layer_ids.is_empty() && (self.first()..=self.last()).contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub groups: Vec<FusionGroup>,
    pub budget_bytes: u64,
    pub overshoot: f64,
    pub bytes_per_weight: u64,
    pub warnings: Vec<String>,
}

impl FusionPlan {
    /// Plan from explicit layer groupings (no budget logic applied).
    pub fn from_groups(
        graph: &NetGraph,
        groups: Vec<Vec<usize>>,
        budget_bytes: u64,
        overshoot: f64,
    ) -> Self {
        let cap = cap_bytes(budget_bytes, overshoot);
        let groups = groups
            .into_iter()
            .map(|ids| {
                let mut g = FusionGroup::build(graph, ids, 1);
                g.degenerate = g.weight_bytes > cap;
                g
            })
            .collect();
        Self {
            groups,
            budget_bytes,
            overshoot,
            bytes_per_weight: 1,
            warnings: Vec::new(),
        }
    }

    /// Index of the group holding `layer`.
    pub fn group_of(&self, layer: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.layer_ids.contains(&layer))
    }

    /// True iff concatenating the groups reproduces `0..n` in order.
    pub fn is_ordered_cover(&self, n: usize) -> bool {
        let flat: Vec<usize> = self.groups.iter().flat_map(|g| g.layer_ids.iter().copied()).collect();
        self.groups.iter().all(|g| !g.layer_ids.is_empty()) && flat == (0..n).collect::<Vec<_>>()
    }

    pub fn cap_bytes(&self) -> u64 {
        cap_bytes(self.budget_bytes, self.overshoot)
    }
}

fn cap_bytes(budget: u64, overshoot: f64) -> u64 {
    ((1.0 + overshoot) * budget as f64).floor() as u64
}

/// Layer span of every residual block: from the layer after the skip source
/// through the add. Overlapping spans are merged.
pub fn residual_spans(graph: &NetGraph) -> Vec<RangeInclusive<usize>> {
    let mut spans: Vec<(usize, usize)> = graph
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::ResidualAdd)
        .filter_map(|l| l.residual_from.map(|s| (s + 1, l.id)))
        .collect();
    spans.sort_unstable();
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (s, e) in spans {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    merged.into_iter().map(|(s, e)| s..=e).collect()
}

/// Atomic units for the greedy scan, in order.
pub fn atomic_units(graph: &NetGraph) -> Vec<RangeInclusive<usize>> {
    let spans = residual_spans(graph);
    let mut units = Vec::new();
    let mut next_span = spans.iter().peekable();
    let mut i = 0;
    while i < graph.len() {
        match next_span.peek() {
            Some(span) if *span.start() == i => {
                units.push((*span).clone());
                i = span.end() + 1;
                next_span.next();
            }
            _ => {
                units.push(i..=i);
                i += 1;
            }
        }
    }
    units
}

pub fn partition(graph: &NetGraph, budget_bytes: u64, overshoot: f64) -> FusionPlan {
    partition_with(graph, budget_bytes, overshoot, 1)
}

pub fn partition_with(
    graph: &NetGraph,
    budget_bytes: u64,
    overshoot: f64,
    bytes_per_weight: u64,
) -> FusionPlan {
    let cap = cap_bytes(budget_bytes, overshoot);
    let units = atomic_units(graph);
    let mut warnings = Vec::new();
    let costs: Vec<(u64, u32)> = units
        .iter()
        .map(|u| {
            let g = FusionGroup::build(graph, u.clone().collect(), bytes_per_weight);
            let ds = g.effective_downsample_count(graph);
            if ds > MAX_DOWNSAMPLES {
                warnings.push(format!(
                    "residual block {}..={} holds {ds} downsampling nodes; kept whole",
                    u.start(),
                    u.end()
                ));
            }
            (g.weight_bytes, ds)
        })
        .collect();

    let mut groups = Vec::new();
    for (range, degenerate) in greedy(&costs, cap) {
        let ids: Vec<usize> = units[range].iter().flat_map(|u| u.clone()).collect();
        let mut g = FusionGroup::build(graph, ids, bytes_per_weight);
        if degenerate {
            g.degenerate = true;
            warnings.push(format!(
                "layers {}..={} need {} weight bytes alone, over the {cap} byte cap",
                g.first(),
                g.last(),
                g.weight_bytes
            ));
        }
        groups.push(g);
    }
    FusionPlan {
        groups,
        budget_bytes,
        overshoot,
        bytes_per_weight,
        warnings,
    }
}

/// Greedy scan over `(weight, downsample count)` units. Returns unit ranges
/// per group and whether the group is a lone over-cap unit.
fn greedy(units: &[(u64, u32)], cap: u64) -> Vec<(Range<usize>, bool)> {
    let mut out = Vec::new();
    let mut start = 0;
    let (mut weight, mut ds) = (0u64, 0u32);
    for (i, &(w, d)) in units.iter().enumerate() {
        if i > start && (weight + w > cap || ds + d > MAX_DOWNSAMPLES) {
            out.push((start..i, false));
            start = i;
            (weight, ds) = (0, 0);
        }
        weight += w;
        ds += d;
        if w > cap {
            out.push((start..i + 1, true));
            start = i + 1;
            (weight, ds) = (0, 0);
        }
    }
    if start < units.len() {
        out.push((start..units.len(), false));
    }
    out
}

pub fn group_weight_size(group: &FusionGroup, graph: &NetGraph, bytes_per_weight: u64) -> u64 {
    group
        .layer_ids
        .iter()
        .map(|&id| layer_weight_bytes(graph.layer(id), bytes_per_weight))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineViolation {
    /// 1: first layer fused; 2: at most two downsamplings; 3: residual block whole.
    pub guideline: u8,
    pub group: usize,
    pub layers: Vec<usize>,
    pub message: String,
}

pub fn check_guidelines(plan: &FusionPlan, graph: &NetGraph) -> Vec<GuidelineViolation> {
    let mut out = Vec::new();
    for (gi, g) in plan.groups.iter().enumerate() {
        if g.contains_first_layer && g.layer_ids.len() == 1 && graph.len() > 1 {
            out.push(GuidelineViolation {
                guideline: 1,
                group: gi,
                layers: vec![0],
                message: "first layer is alone in its group".into(),
            });
        }
        let ds = g.effective_downsample_count(graph);
        if ds > MAX_DOWNSAMPLES {
            let layers = g
                .layer_ids
                .iter()
                .copied()
                .filter(|&id| graph.layer(id).is_downsampling() && id != 0)
                .collect();
            out.push(GuidelineViolation {
                guideline: 2,
                group: gi,
                layers,
                message: format!("{ds} downsampling nodes in one group"),
            });
        }
    }
    for l in &graph.layers {
        let (LayerKind::ResidualAdd, Some(src)) = (l.kind, l.residual_from) else {
            continue;
        };
        let span: Vec<usize> = (src + 1..=l.id).collect();
        let first = plan.group_of(src + 1);
        if span.iter().any(|&id| plan.group_of(id) != first) {
            out.push(GuidelineViolation {
                guideline: 3,
                group: first.unwrap_or(0),
                layers: span,
                message: format!("residual block {}..={} is split across groups", src + 1, l.id),
            });
        }
    }
    out
}
