#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;
use rcfuse::fusion::{check_guidelines, partition};
use rcfuse::netir::{infer_shapes, layer_weight_bytes, load_model};
use rcfuse::prune::{is_prunable, prune_to_budget, GammaDistribution, GammaTable};
use rcfuse::sim::{
    dataflow_conv, reference_conv, reference_network, seam_taint, simulate_network, ArchConfig, HaloInput,
    LayerWeights, NetworkWeights, SimOptions, Tensor,
};
use rcfuse::tiling::{solve_plan, BoundaryPolicy};
use rcfuse::traffic::{buffer_sweep, execution_plan, fused_traffic, layer_by_layer_traffic};
use rcfuse::{LayerNode, NetGraph, TensorShape};

pub fn model_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models").join(name)
}

pub fn shipped(name: &str) -> NetGraph {
    load_model(model_path(name)).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct GenOpts {
    pub max_layers: usize,
    pub max_channels: u32,
    pub max_width: u32,
    pub max_height: u32,
    pub concat: bool,
}

impl Default for GenOpts {
    fn default() -> Self {
        Self {
            max_layers: 14,
            max_channels: 48,
            max_width: 24,
            max_height: 40,
            concat: true,
        }
    }
}

/// Random sequential graph with residual blocks, downsampling and an
/// occasional concat. Shapes are inferred.
pub fn random_graph<R: Rng>(rng: &mut R, o: GenOpts) -> NetGraph {
    let (mut w, mut h) = (rng.random_range(4..=o.max_width), rng.random_range(8..=o.max_height));
    let mut c = rng.random_range(1..=8u32);
    let mut g = NetGraph::new("random", TensorShape::new(w, h, c));
    // layers whose output has the current spatial size
    let mut same_res: Vec<usize> = Vec::new();
    let target = rng.random_range(1..=o.max_layers);
    let ch = |rng: &mut R| rng.random_range(1..=o.max_channels);
    while g.len() < target {
        let can_down = w >= 4 && h >= 4;
        match rng.random_range(0..10) {
            0..=2 => {
                let k = [1, 3][rng.random_range(0..2)];
                let stride = if can_down && rng.random_bool(0.2) { 2 } else { 1 };
                c = ch(rng);
                let mut node = LayerNode::conv(k, stride, c);
                if stride == 1 && can_down && rng.random_bool(0.15) {
                    node = node.with_pool(2);
                }
                let ds = node.downsample_factor();
                g.push(node);
                if ds > 1 {
                    w /= ds;
                    h /= ds;
                    same_res.clear();
                }
            }
            3 => {
                c = ch(rng);
                g.push(LayerNode::pointwise(c));
            }
            4 => {
                g.push(LayerNode::depthwise(3, 1));
            }
            5 if can_down => {
                g.push(LayerNode::maxpool(2));
                w /= 2;
                h /= 2;
                same_res.clear();
            }
            6..=8 if !g.layers.is_empty() => {
                let src = g.len() - 1;
                g.push(LayerNode::depthwise(3, 1));
                g.push(LayerNode::pointwise(c));
                g.push(LayerNode::add(src));
            }
            9 if o.concat && !same_res.is_empty() => {
                let src = same_res[rng.random_range(0..same_res.len())];
                g.push(LayerNode::concat(src));
            }
            _ => continue,
        }
        same_res.push(g.len() - 1);
        // concat widths are only known after inference
        c = infer_shapes(&g).unwrap().output_shape().channels;
    }
    if rng.random_bool(0.3) {
        g.push(LayerNode::head(1, ch(rng)));
    }
    infer_shapes(&g).unwrap()
}

pub fn group_bytes(graph: &NetGraph, ids: &[usize]) -> u64 {
    ids.iter().map(|&i| layer_weight_bytes(graph.layer(i), 1)).sum()
}

/// Rebuilds `original` with the given output channels removed from their
/// producers; consumers follow through shape inference.
pub fn apply_removals(original: &NetGraph, removed: &[(usize, u32)]) -> NetGraph {
    let mut g = original.clone();
    for &(layer, _) in removed {
        g.layers[layer].out_channels -= 1;
    }
    infer_shapes(&g).unwrap()
}

/// Budget as a fraction of the graph's total weight bytes.
pub fn budget_for(g: &NetGraph, fraction: f64) -> u64 {
    ((g.weight_bytes(1) as f64 * fraction) as u64).max(16)
}

/// Checks the planner, pruner and traffic invariants on one graph.
pub fn check_planner_invariants(g: &NetGraph, budget: u64, overshoot: f64, seed: u64) -> Result<(), String> {
    let n = g.len();
    let plan = partition(g, budget, overshoot);
    let flat: Vec<usize> = plan.groups.iter().flat_map(|gr| gr.layer_ids.clone()).collect();
    if flat != (0..n).collect::<Vec<_>>() || !plan.is_ordered_cover(n) {
        return Err(format!("not an ordered cover: {:?}", plan.groups));
    }
    if plan.groups.iter().any(|gr| gr.layer_ids.windows(2).any(|w| w[1] != w[0] + 1)) {
        return Err("group is not contiguous".into());
    }
    if let Some(v) = check_guidelines(&plan, g).iter().find(|v| v.guideline == 3) {
        return Err(format!("residual block split: {}", v.message));
    }
    for gr in &plan.groups {
        if !gr.degenerate && gr.weight_bytes > plan.cap_bytes() {
            return Err(format!("group {:?} over cap", gr.layer_ids));
        }
    }

    let gammas = GammaTable::synthetic(g, seed, GammaDistribution::Uniform);
    let (pg, d) = prune_to_budget(g, &plan, &gammas, budget).map_err(|e| e.to_string())?;
    let oracle = apply_removals(g, &d.removed);
    for (a, b) in pg.layers.iter().zip(&oracle.layers) {
        if (a.in_channels, a.out_channels) != (b.in_channels, b.out_channels) {
            return Err(format!("layer {} channels differ from the oracle", a.id));
        }
    }
    for (gi, gr) in plan.groups.iter().enumerate() {
        let ids = &gr.layer_ids;
        let size = group_bytes(&pg, ids);
        let cands: Vec<usize> = ids.iter().copied().filter(|&i| is_prunable(g, i)).collect();
        if d.infeasible_groups.contains(&gi) {
            if cands.iter().any(|&i| pg.layer(i).out_channels > 1) {
                return Err(format!("group {gi} flagged infeasible with channels left"));
            }
            continue;
        }
        if size > budget {
            return Err(format!("group {gi}: {size} > {budget}"));
        }
        let Some(last) = d.removed.iter().rposition(|(l, _)| gr.contains(*l)) else {
            continue;
        };
        let before_last = group_bytes(&apply_removals(g, &d.removed[..last]), ids);
        if before_last <= budget {
            return Err(format!("group {gi}: pruning went past the first fitting state"));
        }
        let removed: Vec<(usize, u32)> = d.removed.iter().copied().filter(|(l, _)| gr.contains(*l)).collect();
        let max_removed = removed
            .iter()
            .map(|&(l, c)| gammas.get(l, c as usize).unwrap())
            .fold(f64::MIN, f64::max);
        for &l in cands.iter().filter(|&&l| pg.layer(l).out_channels > 1) {
            for &c in &d.kept_channels[l] {
                let gamma = gammas.get(l, c as usize).unwrap();
                if gamma < max_removed {
                    return Err(format!("kept ({l},{c}) scores {gamma} below a removed channel"));
                }
            }
        }
    }

    let arch = ArchConfig {
        weight_buffer_bytes: budget,
        feature_half_bytes: 4096,
        ..ArchConfig::default()
    };
    let base = layer_by_layer_traffic(g, &arch, 30.0);
    let (p0, t0) = execution_plan(g, &arch, BoundaryPolicy::Zero);
    let tm = solve_plan(&plan, g, arch.feature_half_bytes, 1, BoundaryPolicy::Zero);
    for (p, t) in [(&p0, &t0), (&plan, &tm)] {
        let f = fused_traffic(g, p, t, &arch, 30.0);
        if f.total_bytes > base.total_bytes {
            return Err(format!("fused {} > layer-by-layer {}", f.total_bytes, base.total_bytes));
        }
    }
    let sizes = [budget / 4 + 1, budget / 2 + 1, budget, 2 * budget, 4 * budget];
    let sweep = buffer_sweep(g, &sizes, &arch, 30.0);
    if sweep.points.windows(2).any(|w| w[1].bandwidth > w[0].bandwidth) {
        return Err("sweep not monotone".into());
    }
    Ok(())
}

/// One random single-layer case: dataflow schedule against direct loops.
pub fn check_dataflow_case(seed: u64) -> Result<(), String> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cin = rng.random_range(1..=64);
    let (w, h) = (rng.random_range(1..=32), rng.random_range(1..=32));
    let k = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..=2);
    let mut node = match rng.random_range(0..3) {
        0 => LayerNode::conv(k, stride, rng.random_range(1..=64)),
        1 => LayerNode::depthwise(k, stride),
        _ => {
            let mut n = LayerNode::pointwise(rng.random_range(1..=64));
            n.stride = stride;
            n
        }
    };
    node = node.with_bn_relu(rng.random_bool(0.7));
    let mut g = NetGraph::new("one", TensorShape::new(w, h, cin));
    g.push(node);
    let g = match infer_shapes(&g) {
        Ok(g) => g,
        // stride 2 on a single-row map has no output
        Err(_) => return Ok(()),
    };
    let layer = &g.layers[0];
    let lw = LayerWeights::random(layer, &mut rng);
    let x = Tensor::random(g.input, &mut rng);
    let arch = ArchConfig::default();
    let want = reference_conv(layer, &x, &lw, &arch).map_err(|e| e.to_string())?;
    let got = dataflow_conv(layer, &HaloInput::zero(&x), &lw, &arch).map_err(|e| e.to_string())?;
    if got.output != want {
        return Err(format!("seed {seed}: dataflow differs from reference for {layer:?}"));
    }
    Ok(())
}

pub fn small_net_opts() -> GenOpts {
    GenOpts {
        max_layers: 8,
        max_channels: 12,
        max_width: 12,
        max_height: 40,
        concat: true,
    }
}

/// Tiled replay of a random small net against the whole-frame reference,
/// outside the rows a seam can influence. Returns the number of tiled groups.
pub fn check_tiled_case(seed: u64, policy: BoundaryPolicy) -> Result<usize, String> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let g = random_graph(&mut rng, small_net_opts());
    let plan = partition(&g, 1 << 40, 0.0);
    let whole = solve_plan(&plan, &g, u64::MAX / 4, 1, policy);
    let peak = whole.iter().map(|t| t.peak_half_bytes).max().unwrap_or(1);
    let half = (peak * rng.random_range(2..=5) / 10).max(1);
    let tiles = solve_plan(&plan, &g, half, 1, policy);
    let weights = NetworkWeights::random(&g, seed ^ 0x5eed);
    let x = Tensor::random(g.input, &mut rng);
    let arch = ArchConfig::default();
    let opts = SimOptions {
        parallel: seed.is_multiple_of(2),
        dataflow: false,
    };
    let r = simulate_network(&g, &plan, &tiles, &arch, Some((&weights, &x)), opts).map_err(|e| e.to_string())?;
    let out = r.output.ok_or("no output")?;
    let reference = reference_network(&g, &weights, &x, &arch).map_err(|e| e.to_string())?;
    let want = reference.last().unwrap();
    let taint = seam_taint(&g, &plan, &tiles);
    let mask = taint.last().unwrap();
    if out.shape != want.shape {
        return Err(format!("seed {seed}: output shape {} vs {}", out.shape, want.shape));
    }
    for y in (0..out.height()).filter(|&y| !mask[y]) {
        for c in 0..out.channels() {
            for xx in 0..out.width() {
                if out.get(c, y, xx) != want.get(c, y, xx) {
                    return Err(format!("seed {seed}: row {y} channel {c} differs"));
                }
            }
        }
    }
    Ok(tiles.iter().filter(|t| !t.fallback && t.tile_count > 1).count())
}
