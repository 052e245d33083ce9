//! Conversion of plain convolutions into depthwise + pointwise blocks.
//!
//! A k×k convolution becomes a k×k depthwise layer (stride inherited) followed
//! by a 1×1 pointwise layer that produces the declared output channels. When
//! the block keeps both channel count and spatial size, a residual add from
//! the block input closes it. There is no expansion pointwise layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netir::{infer_shapes, LayerKind, LayerNode, NetGraph};

/// One template step emitted for a matched layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockStep {
    Depthwise,
    Pointwise,
    /// Only emitted when input and output shapes agree.
    OptionalResidualAdd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionRule {
    pub match_kind: LayerKind,
    pub emit: Vec<BlockStep>,
}

impl Default for ConversionRule {
    fn default() -> Self {
        Self {
            match_kind: LayerKind::Conv,
            emit: vec![
                BlockStep::Depthwise,
                BlockStep::Pointwise,
                BlockStep::OptionalResidualAdd,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvertOptions {
    /// Keep layer 0 as a dense convolution.
    pub pin_first: bool,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self { pin_first: true }
    }
}

pub fn to_lightweight(graph: &NetGraph) -> Result<NetGraph> {
    to_lightweight_with(graph, &ConvertOptions::default())
}

pub fn to_lightweight_with(graph: &NetGraph, opts: &ConvertOptions) -> Result<NetGraph> {
    let graph = if graph.shapes_inferred() {
        graph.clone()
    } else {
        infer_shapes(graph)?
    };
    let mut out = NetGraph::new(graph.name.clone(), graph.input);
    // old layer id -> new id of the node producing the same tensor
    let mut remap: Vec<usize> = Vec::with_capacity(graph.len());

    for (i, l) in graph.layers.iter().enumerate() {
        let pinned = i == 0 && opts.pin_first;
        if l.kind != LayerKind::Conv || pinned {
            let mut node = l.clone();
            node.residual_from = l.residual_from.map(|s| remap[s]);
            let id = out.push(node);
            remap.push(id);
            continue;
        }
        if l.kernel % 2 == 0 {
            return Err(Error::Conversion {
                layer: i,
                reason: format!("kernel {} has no centred depthwise equivalent", l.kernel),
            });
        }
        if l.kernel == 1 {
            let mut pw = LayerNode::pointwise(l.out_channels).with_bn_relu(l.has_bn_relu);
            pw.stride = l.stride;
            pw.pool = l.pool;
            remap.push(out.push(pw));
            continue;
        }
        let block_in = (i > 0).then(|| remap[i - 1]);
        out.push(LayerNode::depthwise(l.kernel, l.stride));
        let mut pw = LayerNode::pointwise(l.out_channels).with_bn_relu(l.has_bn_relu);
        pw.pool = l.pool;
        let mut last = out.push(pw);
        let keeps_shape = l.in_channels == l.out_channels && l.stride == 1 && l.pool.unwrap_or(1) <= 1;
        if let (true, Some(src)) = (keeps_shape, block_in) {
            last = out.push(LayerNode::add(src));
        }
        remap.push(last);
    }
    infer_shapes(&out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStats {
    pub params: u64,
    pub macs: u64,
    /// Two operations per MAC.
    pub ops: u64,
    /// Layer-by-layer feature I/O bytes per frame at 1 byte per activation.
    pub feature_io_bytes: u64,
}

impl ModelStats {
    pub fn of(graph: &NetGraph) -> Self {
        let macs = graph.macs();
        Self {
            params: graph.param_count(),
            macs,
            ops: 2 * macs,
            feature_io_bytes: graph.feature_io_bytes(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub before: ModelStats,
    pub after: ModelStats,
    pub params_delta: i64,
    pub macs_delta: i64,
    pub ops_delta: i64,
    pub feature_io_delta: i64,
}

pub fn conversion_report(before: &NetGraph, after: &NetGraph) -> ConversionReport {
    let b = ModelStats::of(before);
    let a = ModelStats::of(after);
    let d = |x: u64, y: u64| y as i64 - x as i64;
    ConversionReport {
        before: b,
        after: a,
        params_delta: d(b.params, a.params),
        macs_delta: d(b.macs, a.macs),
        ops_delta: d(b.ops, a.ops),
        feature_io_delta: d(b.feature_io_bytes, a.feature_io_bytes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netir::TensorShape;

    fn net(input: TensorShape, layers: Vec<LayerNode>) -> NetGraph {
        let mut g = NetGraph::new("t", input);
        for l in layers {
            g.push(l);
        }
        infer_shapes(&g).unwrap()
    }

    #[test]
    fn same_width_conv_becomes_residual_block() {
        let g = net(
            TensorShape::new(64, 64, 3),
            vec![LayerNode::conv(3, 1, 64), LayerNode::conv(3, 1, 64)],
        );
        let c = to_lightweight(&g).unwrap();
        let kinds: Vec<_> = c.layers.iter().map(|l| l.kind).collect();
        assert_eq!(
            kinds,
            [
                LayerKind::Conv,
                LayerKind::DepthwiseConv,
                LayerKind::PointwiseConv,
                LayerKind::ResidualAdd
            ]
        );
        assert_eq!(c.layers[3].residual_from, Some(0));
        let block: u64 = c.layers[1..].iter().map(|l| crate::netir::layer_weight_bytes(l, 1)).sum();
        assert_eq!(block, 4_672);
        assert_eq!(crate::netir::layer_weight_bytes(&g.layers[1], 1), 36_864);
        assert_eq!(c.output_shape(), g.output_shape());
    }

    #[test]
    fn strided_or_pooled_conv_has_no_add() {
        let g = net(
            TensorShape::new(32, 32, 8),
            vec![
                LayerNode::conv(3, 1, 8),
                LayerNode::conv(3, 2, 8),
                LayerNode::conv(3, 1, 8).with_pool(2),
            ],
        );
        let c = to_lightweight(&g).unwrap();
        assert!(c.layers.iter().all(|l| l.kind != LayerKind::ResidualAdd));
        assert_eq!(c.layers[1].stride, 2);
        assert_eq!(c.layers[4].pool, Some(2));
        assert_eq!(c.output_shape(), g.output_shape());
    }

    #[test]
    fn residual_ids_are_remapped() {
        let g = net(
            TensorShape::new(16, 16, 8),
            vec![
                LayerNode::conv(3, 1, 16),
                LayerNode::conv(3, 1, 32),
                LayerNode::conv(1, 1, 16),
                LayerNode::add(0),
            ],
        );
        let c = to_lightweight(&g).unwrap();
        let add = c.layers.last().unwrap();
        assert_eq!(add.residual_from, Some(0));
        assert_eq!(c.len(), 5);
    }

    #[test]
    fn conversion_is_idempotent() {
        let g = net(
            TensorShape::new(16, 16, 3),
            vec![
                LayerNode::conv(3, 1, 16).with_pool(2),
                LayerNode::conv(3, 1, 16),
                LayerNode::conv(1, 1, 32),
                LayerNode::head(1, 5),
            ],
        );
        let once = to_lightweight(&g).unwrap();
        assert_eq!(to_lightweight(&once).unwrap(), once);
        let r = conversion_report(&once, &once);
        assert_eq!((r.params_delta, r.macs_delta, r.feature_io_delta), (0, 0, 0));
    }

    #[test]
    fn report_mac_delta_on_single_block() {
        let g = net(
            TensorShape::new(64, 64, 64),
            vec![LayerNode::pointwise(64), LayerNode::conv(3, 1, 64)],
        );
        let c = to_lightweight(&g).unwrap();
        let r = conversion_report(&g, &c);
        let pixels = 64 * 64;
        assert_eq!(r.before.macs - 4096 * pixels, 36_864 * pixels);
        assert_eq!(r.after.macs - 4096 * pixels, 4_672 * pixels);
        assert_eq!(r.before.ops, 2 * r.before.macs);
    }

    #[test]
    fn unpinned_first_layer_is_converted() {
        let g = net(TensorShape::new(8, 8, 3), vec![LayerNode::conv(3, 1, 3)]);
        let c = to_lightweight_with(&g, &ConvertOptions { pin_first: false }).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.layers[0].kind, LayerKind::DepthwiseConv);
    }
}
