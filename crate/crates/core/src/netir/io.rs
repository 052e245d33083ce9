//! JSON model files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{infer_shapes, validate, LayerKind, LayerNode, NetGraph, TensorShape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub w: u32,
    pub h: u32,
    pub c: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub id: usize,
    pub kind: LayerKind,
    #[serde(default = "one")]
    pub k: u32,
    #[serde(default = "one")]
    pub stride: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_from: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn_relu: Option<bool>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub name: String,
    pub input: ShapeSpec,
    pub layers: Vec<LayerSpec>,
}

impl ModelFile {
    pub fn from_graph(graph: &NetGraph) -> Self {
        let layers = graph
            .layers
            .iter()
            .map(|l| {
                let default_bn = matches!(
                    l.kind,
                    LayerKind::Conv | LayerKind::DepthwiseConv | LayerKind::PointwiseConv
                );
                LayerSpec {
                    id: l.id,
                    kind: l.kind,
                    k: l.kernel,
                    stride: l.stride,
                    out_channels: l.kind.owns_channels().then_some(l.out_channels),
                    residual_from: l.residual_from,
                    pool: l.pool,
                    bn_relu: (l.has_bn_relu != default_bn).then_some(l.has_bn_relu),
                }
            })
            .collect();
        Self {
            name: graph.name.clone(),
            input: ShapeSpec {
                w: graph.input.width,
                h: graph.input.height,
                c: graph.input.channels,
            },
            layers,
        }
    }

    /// Builds, validates and shape-annotates the graph.
    pub fn into_graph(self) -> Result<NetGraph> {
        let mut g = NetGraph::new(
            self.name,
            TensorShape::new(self.input.w, self.input.h, self.input.c),
        );
        for s in self.layers {
            let mut node = match s.kind {
                LayerKind::Conv => LayerNode::conv(s.k, s.stride, 0),
                LayerKind::DepthwiseConv => LayerNode::depthwise(s.k, s.stride),
                LayerKind::PointwiseConv => LayerNode::pointwise(0),
                LayerKind::MaxPool => LayerNode::maxpool(s.stride),
                LayerKind::ResidualAdd => LayerNode::add(0),
                LayerKind::Concat => LayerNode::concat(0),
                LayerKind::OutputHead => LayerNode::head(s.k, 0),
            };
            node.kernel = s.k;
            node.stride = s.stride;
            node.out_channels = s.out_channels.unwrap_or(0);
            node.residual_from = s.residual_from;
            node.pool = s.pool;
            if let Some(b) = s.bn_relu {
                node.has_bn_relu = b;
            }
            node.id = s.id;
            g.layers.push(node);
        }
        let violations = validate(&g);
        if !violations.is_empty() {
            let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(Error::Validation(msgs.join("; ")));
        }
        infer_shapes(&g)
    }
}

impl NetGraph {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.into_graph()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelFile::from_graph(self)).expect("model serializes")
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetGraph> {
    let text = std::fs::read_to_string(path)?;
    NetGraph::from_json(&text)
}

pub fn save_model(graph: &NetGraph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, graph.to_json() + "\n")?;
    Ok(())
}
