//! The hierarchical model: road-level EGAT stack, community-level and
//! region-level heterogeneous stacks, scale fusion and the regression head.

mod checkpoint;
mod norm;
mod prepare;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Init, ParamStore, Tensor, TensorError};
use crate::egat::{stack_egat, stack_hetero, EdgeTypes, EgatParams, FusionParams, HeteroLayerParams, HeteroRecord, LayerInput};
use crate::graph::{build_hetero_graph, pool_internal_edges, pool_nodes, GraphError, Level, Pooling, RegionId, SpatialSource};
use crate::graph::{EDGE_FEATURES, NODE_FEATURES};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use norm::{Normalization, ZScore};
pub use prepare::{LocalGraph, Prepared, RegionInput};

/// Negative slope of the head's hidden activation.
const HEAD_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("unknown region {0}")]
    UnknownRegion(RegionId),
    #[error("region {0} is missing from the cache")]
    NotCached(RegionId),
    #[error("region {0} has no intersections")]
    EmptyRegion(RegionId),
    #[error("unknown ablation `{0}` (expected none, no_spatial_link, no_od_link, no_community_level or no_region_level)")]
    UnknownAblation(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("the training split is empty")]
    EmptyTrainSplit,
    #[error("no regions to evaluate")]
    EmptySplit,
    #[error("region {0} has no label")]
    Unlabeled(RegionId),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Structural variants used for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    NoSpatialLink,
    NoOdLink,
    NoCommunityLevel,
    NoRegionLevel,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::None, Ablation::NoSpatialLink, Ablation::NoOdLink, Ablation::NoCommunityLevel, Ablation::NoRegionLevel];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoSpatialLink => "no_spatial_link",
            Ablation::NoOdLink => "no_od_link",
            Ablation::NoCommunityLevel => "no_community_level",
            Ablation::NoRegionLevel => "no_region_level",
        }
    }

    pub fn edge_types(self) -> EdgeTypes {
        match self {
            Ablation::NoSpatialLink => EdgeTypes::OdOnly,
            Ablation::NoOdLink => EdgeTypes::SpatialOnly,
            _ => EdgeTypes::Both,
        }
    }

    pub fn community_level(self) -> bool {
        self != Ablation::NoCommunityLevel
    }

    pub fn region_level(self) -> bool {
        self != Ablation::NoRegionLevel
    }
}

impl FromStr for Ablation {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| ModelError::UnknownAblation(s.to_string()))
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of every hidden representation.
    pub hidden: usize,
    /// Heterogeneous layers at the community and region levels.
    pub layers: usize,
    /// EGAT layers on the road network.
    pub road_layers: usize,
    pub pooling: Pooling,
    pub ablation: Ablation,
    /// OD links are created only above this flow.
    pub min_flow: f64,
    /// Seeds parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: 64, layers: 3, road_layers: 3, pooling: Pooling::Mean, ablation: Ablation::None, min_flow: 0.0, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden < 2 || self.layers == 0 || self.road_layers == 0 {
            return Err(ModelError::Config("hidden must be at least 2 and layer counts at least 1".into()));
        }
        if !(self.min_flow >= 0.0) {
            return Err(ModelError::Config("min_flow must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear map of a one-column feature to `d` columns.
#[derive(Debug, Clone)]
pub(crate) struct Embedding {
    w: Tensor,
    b: Tensor,
}

impl Embedding {
    fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.add(format!("{prefix}.W"), 1, d, Init::XavierUniform, rng),
            b: store.add(format!("{prefix}.b"), 1, d, Init::Zeros, rng),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() == 0 {
            return Ok(Tensor::zeros(0, self.w.cols()));
        }
        Ok(x.matmul(&self.w)?.add_row_bias(&self.b)?)
    }
}

#[derive(Debug, Clone)]
struct Head {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Model parameters, configuration and the input statistics they were trained under.
#[derive(Debug, Clone)]
pub struct HenceModel {
    pub config: ModelConfig,
    pub norm: Normalization,
    store: ParamStore,
    road: Vec<EgatParams>,
    community_od: Option<Embedding>,
    community: Vec<HeteroLayerParams>,
    pub(crate) region_od: Option<Embedding>,
    pub(crate) region: Vec<HeteroLayerParams>,
    fusion: Option<FusionParams>,
    head: Head,
}

/// Intra-region representation and the attention that produced it.
#[derive(Debug, Clone)]
pub struct IntraOutput {
    pub rep: Tensor,
    /// One record per community-level layer; empty without the community level.
    pub records: Vec<HeteroRecord>,
}

impl HenceModel {
    pub fn new(config: ModelConfig, norm: Normalization) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.hidden;
        let ablation = config.ablation;
        let types = ablation.edge_types();

        // the last road layer's edge output feeds community features only
        let road = (0..config.road_layers)
            .map(|l| {
                let (d_in, d_e) = if l == 0 { (NODE_FEATURES, EDGE_FEATURES) } else { (d, d) };
                let edges_out = l + 1 < config.road_layers || ablation.community_level();
                EgatParams::new(&mut store, &format!("road.layer{l}"), d_in, d_e, d, edges_out.then_some(d), d, &mut rng)
            })
            .collect();

        let hetero = |store: &mut ParamStore, rng: &mut ChaCha8Rng, level: &str, d_in0: usize, d_spatial0: usize| {
            (0..config.layers)
                .map(|l| {
                    let (d_in, d_sp) = if l == 0 { (d_in0, d_spatial0) } else { (d, d) };
                    let edges_out = l + 1 < config.layers;
                    HeteroLayerParams::new(store, &format!("{level}.layer{l}"), types, d_in, d_sp, d, d, edges_out, rng)
                })
                .collect::<Vec<_>>()
        };

        let (community_od, community) = if ablation.community_level() {
            let od = types.od().then(|| Embedding::new(&mut store, "community.od_embed", d, &mut rng));
            (od, hetero(&mut store, &mut rng, "community", 2 * d, d))
        } else {
            (None, Vec::new())
        };
        let (region_od, region, fusion) = if ablation.region_level() {
            let od = types.od().then(|| Embedding::new(&mut store, "region.od_embed", d, &mut rng));
            let layers = hetero(&mut store, &mut rng, "region", d, EDGE_FEATURES);
            (od, layers, Some(FusionParams::new(&mut store, "fusion", d, &mut rng)))
        } else {
            (None, Vec::new(), None)
        };
        let h = (d / 2).max(1);
        let head = Head {
            w1: store.add("head.W1", d, h, Init::XavierUniform, &mut rng),
            b1: store.add("head.b1", 1, h, Init::Zeros, &mut rng),
            w2: store.add("head.W2", h, 1, Init::XavierUniform, &mut rng),
            b2: store.add("head.b2", 1, 1, Init::Zeros, &mut rng),
        };
        Ok(Self { config, norm, store, road, community_od, community, region_od, region, fusion, head })
    }

    /// Rebuilds the parameters for another structural variant. Meant to be
    /// called before training: every parameter is re-initialized from the seed.
    pub fn set_ablation(&mut self, variant: Ablation) -> Result<()> {
        let config = ModelConfig { ablation: variant, ..self.config.clone() };
        *self = HenceModel::new(config, self.norm.clone())?;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn has_region_level(&self) -> bool {
        self.fusion.is_some()
    }

    /// Road-level encoding of one region followed, when enabled, by the
    /// community-level stack; pooled to a single `1 x d` row.
    pub fn intra(&self, prep: &Prepared, region: RegionId) -> Result<IntraOutput> {
        let input = prep.input(region)?;
        if input.nodes.rows() == 0 {
            return Err(ModelError::EmptyRegion(region));
        }
        let phi = self.config.pooling;
        let (v, e) = stack_egat(&input.nodes, &input.arc_feats, &input.arcs, &self.road)?;
        if !self.config.ablation.community_level() {
            let one = vec![0; v.rows()];
            return Ok(IntraOutput { rep: pool_nodes(phi, &v, &one, 1)?, records: Vec::new() });
        }
        let e = e.expect("road stack keeps edge outputs when communities are modelled");
        let c = input.communities.len();
        let node_feats = crate::autodiff::concat_columns(&[
            pool_nodes(phi, &v, &input.groups, c)?,
            pool_internal_edges(phi, &e, &input.arcs, &input.groups, c)?,
        ])?;
        let source = SpatialSource::RoadNetwork { edge_reps: &e, arcs: &input.arcs, groups: &input.groups, phi };
        let g = build_hetero_graph(Level::Community, node_feats, &input.communities, source, &input.flows, self.config.min_flow)?;
        let types = self.config.ablation.edge_types();
        let od_feats = match &self.community_od {
            Some(embed) => {
                let mut z: Vec<f64> = g.od.feats.to_vec().into_iter().map(f64::ln_1p).collect();
                self.norm.community_od.apply(&mut z);
                embed.apply(&Tensor::from_vec(z.len(), 1, z)?)?
            }
            None => Tensor::zeros(0, self.config.hidden),
        };
        let layer_input = LayerInput {
            nodes: g.node_feats,
            spatial_arcs: if types.spatial() { g.spatial.arcs } else { Vec::new() },
            spatial_feats: if types.spatial() { g.spatial.feats } else { Tensor::zeros(0, self.config.hidden) },
            od_arcs: if types.od() { g.od.arcs } else { Vec::new() },
            od_feats,
        };
        let out = stack_hetero(&layer_input, &self.community)?;
        let all = vec![0; out.nodes.rows()];
        Ok(IntraOutput { rep: pool_nodes(phi, &out.nodes, &all, 1)?, records: out.records })
    }

    /// Region-level stack over one target's neighbourhood; `nodes` holds the
    /// rows of `local.members` in order. Returns the target's output row.
    pub(crate) fn region_stack(&self, local: &LocalGraph, nodes: Tensor) -> Result<(Tensor, Vec<HeteroRecord>)> {
        let od_feats = match &self.region_od {
            Some(embed) => embed.apply(&local.od_feats)?,
            None => Tensor::zeros(0, self.config.hidden),
        };
        let input = LayerInput {
            nodes,
            spatial_arcs: local.spatial_arcs.clone(),
            spatial_feats: local.spatial_feats.clone(),
            od_arcs: local.od_arcs.clone(),
            od_feats,
        };
        let out = stack_hetero(&input, &self.region)?;
        Ok((out.nodes.slice_rows(0, 1)?, out.records))
    }

    /// Attention fusion of the two scales; `None` when the region level is off.
    pub(crate) fn fuse(&self, intra: &Tensor, inter: &Tensor) -> Result<(Tensor, [f64; 2])> {
        let f = self.fusion.as_ref().ok_or_else(|| ModelError::Config("model has no region level".into()))?;
        let (v, beta) = crate::egat::attention_fusion(&[intra.clone(), inter.clone()], f)?;
        Ok((v, [beta[0], beta[1]]))
    }

    /// `d → d/2 → 1` with a LeakyReLU hidden layer.
    pub fn head(&self, v: &Tensor) -> Result<Tensor> {
        let h = v.matmul(&self.head.w1)?.add_row_bias(&self.head.b1)?.leaky_relu(HEAD_SLOPE);
        Ok(h.matmul(&self.head.w2)?.add_row_bias(&self.head.b2)?)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthParams};

    pub(crate) fn fixture(ablation: Ablation, hidden: usize) -> (crate::data::Dataset, HenceModel, Prepared) {
        let ds = generate_synthetic(&SynthParams { n_regions: 4, grid_side: 4, communities: 2, seed: 11, ..SynthParams::default() })
            .unwrap();
        let norm = Normalization::fit(&ds, &ds.regions());
        let model = HenceModel::new(ModelConfig { hidden, ablation, ..ModelConfig::default() }, norm).unwrap();
        let prep = model.prepare(&ds).unwrap();
        (ds, model, prep)
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert!(matches!("no_roads".parse::<Ablation>(), Err(ModelError::UnknownAblation(_))));
    }

    #[test]
    fn default_model_size_and_names() {
        let (_, model, _) = fixture(Ablation::None, 64);
        let names: Vec<&str> = model.params().params().iter().map(|p| p.name.as_str()).collect();
        assert!(names.contains(&"community.layer0.rn.W"));
        assert!(names.contains(&"region.layer2.od.a"));
        assert!(!names.contains(&"region.layer2.od.A"));
        assert!(names.contains(&"road.layer2.A"));
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        let count = model.params().scalar_count();
        assert!((300_000..600_000).contains(&count), "{count}");
    }

    #[test]
    fn ablations_drop_their_parameters() {
        let names = |a| {
            let (_, m, _) = fixture(a, 8);
            m.params().params().iter().map(|p| p.name.clone()).collect::<Vec<_>>()
        };
        assert!(names(Ablation::NoOdLink).iter().all(|n| !n.contains(".od")));
        assert!(names(Ablation::NoSpatialLink).iter().all(|n| !n.contains(".rn.") && !n.contains("layer0.fusion")));
        let no_comm = names(Ablation::NoCommunityLevel);
        assert!(no_comm.iter().all(|n| !n.starts_with("community") && n != "road.layer2.A"));
        assert!(names(Ablation::NoRegionLevel).iter().all(|n| !n.starts_with("region") && !n.starts_with("fusion")));
    }

    #[test]
    fn intra_shape_and_gradient_reach_road_level() {
        let (ds, model, prep) = fixture(Ablation::None, 64);
        let r = ds.regions()[0];
        let out = model.intra(&prep, r).unwrap();
        assert_eq!(out.rep.shape(), (1, 64));
        assert_eq!(out.records.len(), 3);
        model.params().zero_grad();
        out.rep.tanh().sum().backward().unwrap();
        let g = model.params().get("road.layer0.W").unwrap().tensor.grad().unwrap();
        assert!(g.iter().any(|x| *x != 0.0));
    }

    #[test]
    fn single_community_rep_is_its_hetero_output() {
        let ds = generate_synthetic(&SynthParams { n_regions: 2, grid_side: 3, communities: 1, seed: 2, ..SynthParams::default() })
            .unwrap();
        let norm = Normalization::fit(&ds, &ds.regions());
        let model = HenceModel::new(ModelConfig { hidden: 8, ..ModelConfig::default() }, norm).unwrap();
        let prep = model.prepare(&ds).unwrap();
        let out = model.intra(&prep, 0).unwrap();
        assert_eq!(out.records[0].beta.len(), 2);
        assert_eq!(out.rep.shape(), (1, 8));
    }
}
