//! Layer-graph IR: shapes, weight sizes and feature-map sizes.
//!
//! Graphs are sequential: every layer consumes the output of the layer before
//! it (the network input for layer 0). `ResidualAdd` and `Concat` nodes take a
//! second operand through `residual_from`, which always names an earlier
//! layer. Spatial downsampling uses floor semantics: a stride-`s` layer maps
//! `H` rows to `H / s` rows, with output row `y` centred on input row `y * s`.

mod io;

pub use io::{load_model, save_model, LayerSpec, ModelFile, ShapeSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
}

impl TensorShape {
    pub fn new(width: u32, height: u32, channels: u32) -> Self {
        Self {
            width,
            height,
            channels,
        }
    }

    pub fn pixels(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn elems(&self) -> u64 {
        self.pixels() * self.channels as u64
    }

    pub fn bytes(&self, bytes_per_activation: u64) -> u64 {
        self.elems() * bytes_per_activation
    }

    fn has_zero_dim(&self) -> bool {
        self.width == 0 || self.height == 0 || self.channels == 0
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "conv")]
    Conv,
    #[serde(rename = "depthwise")]
    DepthwiseConv,
    #[serde(rename = "pointwise")]
    PointwiseConv,
    #[serde(rename = "maxpool")]
    MaxPool,
    #[serde(rename = "add")]
    ResidualAdd,
    #[serde(rename = "concat")]
    Concat,
    #[serde(rename = "head")]
    OutputHead,
}

impl LayerKind {
    /// Kinds that run on the MAC array and carry weights.
    pub fn is_weighted(self) -> bool {
        matches!(
            self,
            LayerKind::Conv | LayerKind::DepthwiseConv | LayerKind::PointwiseConv | LayerKind::OutputHead
        )
    }

    /// Kinds whose output channel count is chosen freely (the rest inherit it).
    pub fn owns_channels(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::PointwiseConv | LayerKind::OutputHead)
    }

    pub fn takes_second_operand(self) -> bool {
        matches!(self, LayerKind::ResidualAdd | LayerKind::Concat)
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LayerKind::Conv => "conv",
            LayerKind::DepthwiseConv => "depthwise",
            LayerKind::PointwiseConv => "pointwise",
            LayerKind::MaxPool => "maxpool",
            LayerKind::ResidualAdd => "add",
            LayerKind::Concat => "concat",
            LayerKind::OutputHead => "head",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: usize,
    pub kind: LayerKind,
    pub kernel: u32,
    pub stride: u32,
    /// Filled by [`infer_shapes`].
    pub in_channels: u32,
    /// Declared for conv/pointwise/head, derived for the other kinds.
    pub out_channels: u32,
    pub has_bn_relu: bool,
    pub residual_from: Option<usize>,
    /// 2-D max pooling (window = stride = factor) applied after activation.
    pub pool: Option<u32>,
    pub input_shape: Option<TensorShape>,
    pub output_shape: Option<TensorShape>,
}

impl LayerNode {
    fn base(kind: LayerKind, kernel: u32, stride: u32, out_channels: u32) -> Self {
        Self {
            id: 0,
            kind,
            kernel,
            stride,
            in_channels: 0,
            out_channels,
            has_bn_relu: matches!(
                kind,
                LayerKind::Conv | LayerKind::DepthwiseConv | LayerKind::PointwiseConv
            ),
            residual_from: None,
            pool: None,
            input_shape: None,
            output_shape: None,
        }
    }

    pub fn conv(kernel: u32, stride: u32, out_channels: u32) -> Self {
        Self::base(LayerKind::Conv, kernel, stride, out_channels)
    }

    pub fn depthwise(kernel: u32, stride: u32) -> Self {
        Self::base(LayerKind::DepthwiseConv, kernel, stride, 0)
    }

    pub fn pointwise(out_channels: u32) -> Self {
        Self::base(LayerKind::PointwiseConv, 1, 1, out_channels)
    }

    pub fn maxpool(factor: u32) -> Self {
        Self::base(LayerKind::MaxPool, factor, factor, 0)
    }

    pub fn add(residual_from: usize) -> Self {
        let mut l = Self::base(LayerKind::ResidualAdd, 1, 1, 0);
        l.residual_from = Some(residual_from);
        l
    }

    pub fn concat(other: usize) -> Self {
        let mut l = Self::base(LayerKind::Concat, 1, 1, 0);
        l.residual_from = Some(other);
        l
    }

    pub fn head(kernel: u32, out_channels: u32) -> Self {
        Self::base(LayerKind::OutputHead, kernel, 1, out_channels)
    }

    pub fn with_pool(mut self, factor: u32) -> Self {
        self.pool = Some(factor);
        self
    }

    pub fn with_bn_relu(mut self, on: bool) -> Self {
        self.has_bn_relu = on;
        self
    }

    /// Stride > 1, a pooling attribute, or a pooling node.
    pub fn is_downsampling(&self) -> bool {
        self.stride > 1 || self.pool.is_some_and(|p| p > 1) || self.kind == LayerKind::MaxPool
    }

    /// Per-axis reduction factor from input to output map.
    pub fn downsample_factor(&self) -> u32 {
        self.stride.max(1) * self.pool.unwrap_or(1).max(1)
    }

    /// Layers with a batch-norm scale per output channel.
    pub fn is_bn_bearing(&self) -> bool {
        self.has_bn_relu
            && matches!(
                self.kind,
                LayerKind::Conv | LayerKind::DepthwiseConv | LayerKind::PointwiseConv
            )
    }

    pub fn in_shape(&self) -> TensorShape {
        self.input_shape.expect("shapes not inferred")
    }

    pub fn out_shape(&self) -> TensorShape {
        self.output_shape.expect("shapes not inferred")
    }

    /// Output dims of the convolution itself, before any pooling attribute.
    pub fn conv_out_dims(&self) -> (u32, u32) {
        let s = self.in_shape();
        let st = self.stride.max(1);
        (s.width / st, s.height / st)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetGraph {
    pub name: String,
    pub input: TensorShape,
    pub layers: Vec<LayerNode>,
}

impl NetGraph {
    pub fn new(name: impl Into<String>, input: TensorShape) -> Self {
        Self {
            name: name.into(),
            input,
            layers: Vec::new(),
        }
    }

    /// Appends a layer, assigning it the next ordinal id. Returns the id.
    pub fn push(&mut self, mut layer: LayerNode) -> usize {
        let id = self.layers.len();
        layer.id = id;
        self.layers.push(layer);
        id
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, id: usize) -> &LayerNode {
        &self.layers[id]
    }

    pub fn shapes_inferred(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.input_shape.is_some() && l.output_shape.is_some())
    }

    /// Shape entering layer `id` on its main path.
    pub fn input_of(&self, id: usize) -> TensorShape {
        if id == 0 {
            self.input
        } else {
            self.layers[id - 1].out_shape()
        }
    }

    pub fn output_shape(&self) -> TensorShape {
        self.layers.last().map_or(self.input, |l| l.out_shape())
    }

    pub fn weight_bytes(&self, bytes_per_weight: u64) -> u64 {
        self.layers
            .iter()
            .map(|l| layer_weight_bytes(l, bytes_per_weight))
            .sum()
    }

    pub fn param_count(&self) -> u64 {
        self.weight_bytes(1)
    }

    pub fn macs(&self) -> u64 {
        self.layers.iter().map(layer_macs).sum()
    }

    /// Layer-by-layer feature I/O: every layer reads its inputs and writes its output.
    pub fn feature_io_bytes(&self, bytes_per_activation: u64) -> u64 {
        (0..self.len())
            .map(|i| {
                let (a, b) = layer_feature_bytes(self, i, bytes_per_activation);
                a + b
            })
            .sum()
    }
}

/// Annotates every layer with input/output shapes and channel counts.
pub fn infer_shapes(graph: &NetGraph) -> Result<NetGraph> {
    let mut out = graph.clone();
    if out.input.has_zero_dim() {
        return Err(Error::Shape {
            layer: 0,
            reason: format!("input shape {} has a zero dimension", out.input),
        });
    }
    let mut cur = out.input;
    for i in 0..out.layers.len() {
        let second = match out.layers[i].residual_from {
            Some(src) if out.layers[i].kind.takes_second_operand() => {
                if src >= i {
                    return Err(Error::Validation(format!(
                        "layer {i}: residual_from {src} does not reference an earlier layer"
                    )));
                }
                Some((src, out.layers[src].out_shape()))
            }
            _ => None,
        };
        let layer = &mut out.layers[i];
        let shape = next_shape(layer, cur, second)?;
        layer.in_channels = cur.channels;
        layer.out_channels = shape.channels;
        layer.input_shape = Some(cur);
        layer.output_shape = Some(shape);
        cur = shape;
    }
    Ok(out)
}

fn next_shape(
    layer: &LayerNode,
    input: TensorShape,
    second: Option<(usize, TensorShape)>,
) -> Result<TensorShape> {
    let id = layer.id;
    let shape_err = |reason: String| Error::Shape { layer: id, reason };
    if layer.stride == 0 || layer.kernel == 0 {
        return Err(shape_err("kernel and stride must be >= 1".into()));
    }
    let shape = match layer.kind {
        LayerKind::Conv | LayerKind::PointwiseConv | LayerKind::OutputHead | LayerKind::DepthwiseConv => {
            let channels = if layer.kind == LayerKind::DepthwiseConv {
                input.channels
            } else {
                layer.out_channels
            };
            let pool = layer.pool.unwrap_or(1).max(1);
            TensorShape::new(
                input.width / layer.stride / pool,
                input.height / layer.stride / pool,
                channels,
            )
        }
        LayerKind::MaxPool => TensorShape::new(
            input.width / layer.stride,
            input.height / layer.stride,
            input.channels,
        ),
        LayerKind::ResidualAdd | LayerKind::Concat => {
            let (src, s) = second.ok_or_else(|| {
                shape_err(format!("{} node needs residual_from", layer.kind))
            })?;
            if s.width != input.width || s.height != input.height {
                return Err(Error::DanglingResidual {
                    layer: id,
                    source_layer: src,
                    reason: format!("source map {s} vs main path {input}"),
                });
            }
            let channels = if layer.kind == LayerKind::Concat {
                input.channels + s.channels
            } else {
                // Channel mismatches are resolved at the add (see prune::fix_residual_mismatch).
                input.channels
            };
            TensorShape::new(input.width, input.height, channels)
        }
    };
    if shape.has_zero_dim() {
        return Err(shape_err(format!("{input} -> {shape} reaches a zero dimension")));
    }
    Ok(shape)
}

/// Weight bytes of one layer (batch-norm folded in, bias excluded).
pub fn layer_weight_bytes(layer: &LayerNode, bytes_per_weight: u64) -> u64 {
    let k = layer.kernel as u64;
    let cin = layer.in_channels as u64;
    let cout = layer.out_channels as u64;
    let n = match layer.kind {
        LayerKind::Conv | LayerKind::OutputHead => k * k * cin * cout,
        LayerKind::DepthwiseConv => k * k * cin,
        LayerKind::PointwiseConv => cin * cout,
        _ => 0,
    };
    n * bytes_per_weight
}

/// Per-channel bias bytes of a batch-norm layer (one value per output channel).
pub fn layer_bias_bytes(layer: &LayerNode, bytes_per_weight: u64) -> u64 {
    if layer.kind.is_weighted() {
        layer.out_channels as u64 * bytes_per_weight
    } else {
        0
    }
}

/// (input bytes, output bytes) of a layer. Add/concat inputs include the
/// second operand's map.
pub fn layer_feature_bytes(graph: &NetGraph, id: usize, bytes_per_activation: u64) -> (u64, u64) {
    let layer = &graph.layers[id];
    let mut input = layer.in_shape().bytes(bytes_per_activation);
    if layer.kind.takes_second_operand() {
        if let Some(src) = layer.residual_from {
            input += graph.layers[src].out_shape().bytes(bytes_per_activation);
        }
    }
    (input, layer.out_shape().bytes(bytes_per_activation))
}

/// Multiply-accumulates of one layer over the whole map.
pub fn layer_macs(layer: &LayerNode) -> u64 {
    if !layer.kind.is_weighted() {
        return 0;
    }
    let (w, h) = layer.conv_out_dims();
    let px = w as u64 * h as u64;
    let k2 = (layer.kernel as u64).pow(2);
    let cin = layer.in_channels as u64;
    let cout = layer.out_channels as u64;
    match layer.kind {
        LayerKind::DepthwiseConv => px * cout * k2,
        _ => px * cout * cin * k2,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub layer: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layer {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Checks the type invariants. Returns an empty list iff the graph is well formed.
pub fn validate(graph: &NetGraph) -> Vec<Violation> {
    let mut v = Vec::new();
    let mut push = |layer: Option<usize>, message: String| v.push(Violation { layer, message });

    if graph.input.has_zero_dim() {
        push(None, format!("input shape {} has a zero dimension", graph.input));
    }
    let mut channels = graph.input.channels;
    let mut out_channels: Vec<u32> = Vec::with_capacity(graph.len());
    for (i, l) in graph.layers.iter().enumerate() {
        if l.id != i {
            push(Some(i), format!("id {} does not match position {i}", l.id));
        }
        if l.kernel == 0 || l.stride == 0 {
            push(Some(i), "kernel and stride must be >= 1".into());
        }
        match l.kind {
            LayerKind::DepthwiseConv => {
                if l.out_channels != 0 && l.out_channels != channels {
                    push(
                        Some(i),
                        format!(
                            "depthwise layer has in_channels {channels} != out_channels {}",
                            l.out_channels
                        ),
                    );
                }
            }
            LayerKind::PointwiseConv if l.kernel != 1 => {
                push(Some(i), format!("pointwise layer has kernel {}", l.kernel));
            }
            LayerKind::MaxPool if l.kernel != l.stride => {
                push(Some(i), "maxpool window must equal its stride".into());
            }
            _ => {}
        }
        if l.kind.is_weighted() && l.kernel % 2 == 0 {
            push(Some(i), format!("kernel {} is not odd", l.kernel));
        }
        if l.kind.owns_channels() && l.out_channels == 0 {
            push(Some(i), "out_channels must be >= 1".into());
        }
        if l.pool == Some(0) {
            push(Some(i), "pool factor must be >= 1".into());
        }
        if l.pool.is_some() && !l.kind.is_weighted() {
            push(Some(i), format!("pool attribute on a {} node", l.kind));
        }
        match (l.kind.takes_second_operand(), l.residual_from) {
            (true, None) => push(Some(i), format!("{} node without residual_from", l.kind)),
            (false, Some(_)) => push(Some(i), format!("residual_from on a {} node", l.kind)),
            (true, Some(src)) if src >= i => push(
                Some(i),
                format!("residual_from {src} does not reference an earlier layer"),
            ),
            _ => {}
        }
        channels = match l.kind {
            k if k.owns_channels() => l.out_channels,
            LayerKind::Concat => match l.residual_from {
                Some(src) if src < i => channels + out_channels[src],
                _ => channels,
            },
            _ => channels,
        };
        out_channels.push(channels);
    }
    if v.is_empty() {
        if let Err(e) = infer_shapes(graph) {
            v.push(Violation {
                layer: None,
                message: e.to_string(),
            });
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(input: TensorShape, layers: Vec<LayerNode>) -> NetGraph {
        let mut g = NetGraph::new("t", input);
        for l in layers {
            g.push(l);
        }
        infer_shapes(&g).unwrap()
    }

    #[test]
    fn stride_two_halves_with_floor() {
        let g = chain(TensorShape::new(1280, 720, 3), vec![LayerNode::conv(3, 2, 16)]);
        assert_eq!(g.output_shape(), TensorShape::new(640, 360, 16));
        let g = chain(TensorShape::new(45, 23, 8), vec![LayerNode::maxpool(2)]);
        assert_eq!(g.output_shape(), TensorShape::new(22, 11, 8));
    }

    #[test]
    fn empty_graph_echoes_input() {
        let g = chain(TensorShape::new(7, 5, 3), vec![]);
        assert_eq!(g.output_shape(), TensorShape::new(7, 5, 3));
    }

    #[test]
    fn zero_dimension_is_a_shape_error() {
        let mut g = NetGraph::new("t", TensorShape::new(2, 2, 3));
        g.push(LayerNode::maxpool(2));
        g.push(LayerNode::maxpool(2));
        assert!(matches!(infer_shapes(&g), Err(Error::Shape { layer: 1, .. })));
    }

    #[test]
    fn residual_spatial_mismatch_is_dangling() {
        let mut g = NetGraph::new("t", TensorShape::new(8, 8, 4));
        g.push(LayerNode::pointwise(4));
        g.push(LayerNode::maxpool(2));
        g.push(LayerNode::add(0));
        assert!(matches!(
            infer_shapes(&g),
            Err(Error::DanglingResidual { layer: 2, source_layer: 0, .. })
        ));
    }

    #[test]
    fn weight_bytes_per_kind() {
        let g = chain(
            TensorShape::new(8, 8, 3),
            vec![
                LayerNode::conv(3, 1, 32),
                LayerNode::depthwise(3, 1),
                LayerNode::pointwise(64),
                LayerNode::maxpool(2),
            ],
        );
        assert_eq!(layer_weight_bytes(&g.layers[0], 1), 864);
        assert_eq!(layer_weight_bytes(&g.layers[1], 1), 288);
        assert_eq!(layer_weight_bytes(&g.layers[2], 1), 32 * 64);
        assert_eq!(layer_weight_bytes(&g.layers[3], 1), 0);
        assert_eq!(layer_weight_bytes(&g.layers[0], 2), 1728);
        assert_eq!(layer_bias_bytes(&g.layers[2], 1), 64);
    }

    #[test]
    fn feature_bytes_include_residual_source() {
        let g = chain(TensorShape::new(640, 360, 32), vec![LayerNode::pointwise(32)]);
        assert_eq!(layer_feature_bytes(&g, 0, 1), (7_372_800, 7_372_800));

        // two 100 KB maps into an add
        let g = chain(
            TensorShape::new(100, 100, 10),
            vec![LayerNode::pointwise(10), LayerNode::pointwise(10), LayerNode::add(0)],
        );
        assert_eq!(layer_feature_bytes(&g, 2, 1), (200_000, 100_000));
    }

    #[test]
    fn validate_flags_bad_depthwise_and_forward_residual() {
        let mut g = NetGraph::new("t", TensorShape::new(8, 8, 4));
        let mut dw = LayerNode::depthwise(3, 1);
        dw.out_channels = 8;
        g.push(dw);
        let v = validate(&g);
        assert_eq!(v.len(), 1, "{v:?}");

        let mut g = NetGraph::new("t", TensorShape::new(8, 8, 4));
        g.push(LayerNode::pointwise(4));
        g.push(LayerNode::add(1));
        let v = validate(&g);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].layer, Some(1));
    }

    #[test]
    fn macs_count_pre_pool_map() {
        let g = chain(TensorShape::new(64, 64, 32), vec![LayerNode::conv(3, 1, 24).with_pool(2)]);
        assert_eq!(layer_macs(&g.layers[0]), 28_311_552);
    }

    #[test]
    fn infer_is_idempotent() {
        let g = chain(
            TensorShape::new(32, 16, 3),
            vec![
                LayerNode::conv(3, 1, 8).with_pool(2),
                LayerNode::depthwise(3, 1),
                LayerNode::pointwise(8),
                LayerNode::add(0),
                LayerNode::head(1, 5),
            ],
        );
        assert_eq!(infer_shapes(&g).unwrap(), g);
    }
}
