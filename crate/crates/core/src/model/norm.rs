use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::graph::{Level, RegionId, EDGE_FEATURES, NODE_FEATURES};

/// Per-column affine standardization. Columns with `scaled == false` pass
/// through unchanged (used for one-hot indicators).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    /// Fits column statistics over `rows` (row-major, `cols` wide); only the
    /// first `scaled` columns are standardized. Near-constant columns get unit std.
    pub fn fit(rows: &[f64], cols: usize, scaled: usize) -> Self {
        let n = rows.len() / cols.max(1);
        let mut mean = vec![0.0; cols];
        let mut std = vec![1.0; cols];
        if n > 0 {
            for c in 0..scaled {
                let m = (0..n).map(|r| rows[r * cols + c]).sum::<f64>() / n as f64;
                let v = (0..n).map(|r| (rows[r * cols + c] - m).powi(2)).sum::<f64>() / n as f64;
                mean[c] = m;
                std[c] = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, rows: &mut [f64]) {
        let cols = self.mean.len();
        for row in rows.chunks_mut(cols) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
    }

    pub fn scalar(&self, x: f64) -> f64 {
        (x - self.mean[0]) / self.std[0]
    }

    pub fn invert_scalar(&self, z: f64) -> f64 {
        z * self.std[0] + self.mean[0]
    }
}

/// Input and label statistics fitted on the training regions and stored with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub node: ZScore,
    /// Coordinates and length are standardized; the class one-hot is kept.
    pub edge: ZScore,
    /// Over `ln(1 + flow)` of community-level OD links.
    pub community_od: ZScore,
    /// Over `ln(1 + flow)` of region-level OD links.
    pub region_od: ZScore,
    /// Over `ln(1 + emission)`.
    pub label: ZScore,
}

impl Normalization {
    /// Statistics over the road graphs, flows and labels of `train`. Region
    /// flows count when either endpoint is a training region.
    pub fn fit(ds: &Dataset, train: &[RegionId]) -> Self {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for r in train {
            if let Some(g) = ds.roads.get(r) {
                nodes.extend(g.node_features());
                edges.extend(g.arc_features());
            }
        }
        let log_flows = |level_flows: Vec<f64>| level_flows.into_iter().map(f64::ln_1p).collect::<Vec<_>>();
        let community = log_flows(
            ds.community_flows
                .iter()
                .filter(|f| f.level == Level::Community && f.flow > 0.0)
                .filter(|f| ds.hierarchy.region_of_community(f.origin).is_some_and(|r| train.contains(&r)))
                .map(|f| f.flow)
                .collect(),
        );
        let region = log_flows(
            ds.region_flows
                .iter()
                .filter(|f| f.flow > 0.0 && (train.contains(&f.origin) || train.contains(&f.dest)))
                .map(|f| f.flow)
                .collect(),
        );
        let labels: Vec<f64> = train.iter().filter_map(|r| ds.labels.get(r)).map(|y| y.ln_1p()).collect();
        Self {
            node: ZScore::fit(&nodes, NODE_FEATURES, NODE_FEATURES),
            edge: ZScore::fit(&edges, EDGE_FEATURES, 3),
            community_od: ZScore::fit(&community, 1, 1),
            region_od: ZScore::fit(&region, 1, 1),
            label: ZScore::fit(&labels, 1, 1),
        }
    }

    pub fn label_to_model(&self, y: f64) -> f64 {
        self.label.scalar(y.ln_1p())
    }

    pub fn label_from_model(&self, z: f64) -> f64 {
        self.label.invert_scalar(z).exp_m1()
    }
}
