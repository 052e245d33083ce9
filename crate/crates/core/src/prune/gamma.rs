//! Per-channel batch-norm scale magnitudes used as pruning scores.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netir::NetGraph;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GammaTable {
    scores: BTreeMap<usize, Vec<f64>>,
}

/// Distribution for synthetic scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub enum GammaDistribution {
    /// Uniform on [0, 1).
    #[default]
    Uniform,
    /// |N(0, sigma)|.
    HalfNormal { sigma: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Row {
    layer_id: usize,
    channel: usize,
    gamma: f64,
}

impl GammaTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, scores: Vec<f64>) {
        self.scores.insert(layer, scores);
    }

    pub fn layer(&self, layer: usize) -> Option<&[f64]> {
        self.scores.get(&layer).map(Vec::as_slice)
    }

    pub fn get(&self, layer: usize, channel: usize) -> Option<f64> {
        self.scores.get(&layer).and_then(|v| v.get(channel).copied())
    }

    pub fn layers(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.scores.iter().map(|(&l, v)| (l, v.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Seeded scores for every batch-norm layer of `graph`, drawn in layer order.
    pub fn synthetic(graph: &NetGraph, seed: u64, dist: GammaDistribution) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = match dist {
            GammaDistribution::HalfNormal { sigma } => Normal::new(0.0, sigma).ok(),
            GammaDistribution::Uniform => None,
        };
        let mut t = Self::new();
        for l in graph.layers.iter().filter(|l| l.is_bn_bearing()) {
            let v = (0..l.out_channels)
                .map(|_| match &normal {
                    Some(n) => f64::abs(n.sample(&mut rng)),
                    None => rng.random::<f64>(),
                })
                .collect();
            t.insert(l.id, v);
        }
        t
    }

    /// Errors with the first batch-norm channel lacking a score.
    pub fn check_complete(&self, graph: &NetGraph) -> Result<()> {
        for l in graph.layers.iter().filter(|l| l.is_bn_bearing()) {
            let have = self.scores.get(&l.id).map_or(0, Vec::len);
            if have < l.out_channels as usize {
                return Err(Error::MissingGamma {
                    layer: l.id,
                    channel: have,
                });
            }
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut cells: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
        for row in rdr.deserialize() {
            let row: Row = row?;
            if !row.gamma.is_finite() || row.gamma < 0.0 {
                return Err(Error::Parse(format!(
                    "layer {} channel {}: gamma {} is not a finite non-negative number",
                    row.layer_id, row.channel, row.gamma
                )));
            }
            if cells.entry(row.layer_id).or_default().insert(row.channel, row.gamma).is_some() {
                return Err(Error::Parse(format!(
                    "layer {} channel {} listed twice",
                    row.layer_id, row.channel
                )));
            }
        }
        let mut t = Self::new();
        for (layer, chans) in cells {
            let n = chans.len();
            if let Some((&last, _)) = chans.last_key_value() {
                if last + 1 != n {
                    let missing = (0..n).find(|c| !chans.contains_key(c)).unwrap_or(n);
                    return Err(Error::MissingGamma {
                        layer,
                        channel: missing,
                    });
                }
            }
            t.insert(layer, chans.into_values().collect());
        }
        Ok(t)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (&layer_id, v) in &self.scores {
            for (channel, &gamma) in v.iter().enumerate() {
                w.serialize(Row {
                    layer_id,
                    channel,
                    gamma,
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Keeps, per layer, the scores at the listed original channel indices.
    pub fn select(&self, kept: &[Vec<u32>]) -> Self {
        let mut t = Self::new();
        for (&layer, v) in &self.scores {
            let new = match kept.get(layer) {
                Some(idx) => idx.iter().filter_map(|&c| v.get(c as usize).copied()).collect(),
                None => v.clone(),
            };
            t.insert(layer, new);
        }
        t
    }

    /// Stretches each layer's scores to the graph's channel counts: new
    /// channel `j` of `n'` takes old channel `floor(j * n / n')`.
    pub fn stretch_to(&self, graph: &NetGraph) -> Self {
        let mut t = Self::new();
        for l in graph.layers.iter().filter(|l| l.is_bn_bearing()) {
            let Some(old) = self.scores.get(&l.id).filter(|v| !v.is_empty()) else {
                continue;
            };
            let n = old.len();
            let m = l.out_channels as usize;
            t.insert(l.id, (0..m).map(|j| old[j * n / m]).collect());
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netir::{infer_shapes, LayerNode, TensorShape};

    fn net() -> NetGraph {
        let mut g = NetGraph::new("t", TensorShape::new(8, 8, 3));
        g.push(LayerNode::conv(3, 1, 4));
        g.push(LayerNode::maxpool(2));
        g.push(LayerNode::depthwise(3, 1));
        g.push(LayerNode::head(1, 2));
        infer_shapes(&g).unwrap()
    }

    #[test]
    fn synthetic_is_seeded_and_complete() {
        let g = net();
        let a = GammaTable::synthetic(&g, 7, GammaDistribution::Uniform);
        let b = GammaTable::synthetic(&g, 7, GammaDistribution::Uniform);
        assert_eq!(a, b);
        a.check_complete(&g).unwrap();
        assert_eq!(a.layers().map(|(l, _)| l).collect::<Vec<_>>(), [0, 2]);
        let h = GammaTable::synthetic(&g, 7, GammaDistribution::HalfNormal { sigma: 0.5 });
        assert!(h.layers().all(|(_, v)| v.iter().all(|&x| x >= 0.0)));
        assert_ne!(a, GammaTable::synthetic(&g, 8, GammaDistribution::Uniform));
    }

    #[test]
    fn csv_roundtrip_and_gaps() {
        let g = net();
        let a = GammaTable::synthetic(&g, 1, GammaDistribution::Uniform);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        assert_eq!(GammaTable::read_csv(buf.as_slice()).unwrap(), a);

        let gap = "layer_id,channel,gamma\n0,0,0.5\n0,2,0.1\n";
        assert!(matches!(
            GammaTable::read_csv(gap.as_bytes()),
            Err(Error::MissingGamma { layer: 0, channel: 1 })
        ));
        let neg = "layer_id,channel,gamma\n0,0,-1\n";
        assert!(matches!(GammaTable::read_csv(neg.as_bytes()), Err(Error::Parse(_))));
    }

    #[test]
    fn incomplete_table_is_reported() {
        let g = net();
        let mut t = GammaTable::new();
        t.insert(0, vec![1.0; 4]);
        assert!(matches!(
            t.check_complete(&g),
            Err(Error::MissingGamma { layer: 2, channel: 0 })
        ));
    }

    #[test]
    fn select_and_stretch() {
        let mut t = GammaTable::new();
        t.insert(0, vec![0.1, 0.2, 0.3, 0.4]);
        let s = t.select(&[vec![3, 1]]);
        assert_eq!(s.layer(0).unwrap(), [0.4, 0.2]);

        let mut g = NetGraph::new("t", TensorShape::new(4, 4, 3));
        g.push(LayerNode::pointwise(8));
        let g = infer_shapes(&g).unwrap();
        let st = t.stretch_to(&g);
        assert_eq!(st.layer(0).unwrap(), [0.1, 0.1, 0.2, 0.2, 0.3, 0.3, 0.4, 0.4]);
    }
}
