use std::collections::{BTreeMap, HashMap, VecDeque};

use super::{HenceModel, ModelError, Result};
use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::graph::{build_hetero_graph, CommunityId, Level, ODFlow, RegionId, SpatialSource, EDGE_FEATURES, NODE_FEATURES};

/// Normalized tensors of one region's road network and community structure.
#[derive(Debug, Clone)]
pub struct RegionInput {
    pub region: RegionId,
    pub nodes: Tensor,
    pub arc_feats: Tensor,
    pub arcs: Vec<(usize, usize)>,
    /// Community position (into `communities`) of every intersection.
    pub groups: Vec<usize>,
    pub communities: Vec<CommunityId>,
    /// Raw community-level flows inside the region.
    pub flows: Vec<ODFlow>,
}

/// The part of the region graph that can influence one target within the
/// configured number of layers. `members[0]` is the target; arcs use
/// positions into `members`.
#[derive(Debug, Clone)]
pub struct LocalGraph {
    pub members: Vec<usize>,
    pub spatial_arcs: Vec<(usize, usize)>,
    pub spatial_feats: Tensor,
    pub od_arcs: Vec<(usize, usize)>,
    /// Standardized `ln(1 + flow)`, one column.
    pub od_feats: Tensor,
}

/// Everything derived once from a dataset for a given model.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub regions: Vec<RegionId>,
    index: HashMap<RegionId, usize>,
    inputs: Vec<RegionInput>,
    locals: Vec<LocalGraph>,
    /// Normalized labels of the labeled regions.
    pub labels: BTreeMap<RegionId, f64>,
}

impl Prepared {
    pub fn position(&self, region: RegionId) -> Result<usize> {
        self.index.get(&region).copied().ok_or(ModelError::UnknownRegion(region))
    }

    pub fn input(&self, region: RegionId) -> Result<&RegionInput> {
        Ok(&self.inputs[self.position(region)?])
    }

    pub fn local(&self, region: RegionId) -> Result<&LocalGraph> {
        let i = self.position(region)?;
        self.locals.get(i).ok_or(ModelError::Config("prepared without a region level".into()))
    }

    pub fn label(&self, region: RegionId) -> Option<f64> {
        self.labels.get(&region).copied()
    }
}

/// Region-level arcs with per-arc features before localisation.
struct RegionGraph {
    spatial_arcs: Vec<(usize, usize)>,
    spatial_feats: Vec<Vec<f64>>,
    od_arcs: Vec<(usize, usize)>,
    od_feats: Vec<f64>,
}

impl HenceModel {
    /// Normalizes a dataset's inputs with this model's statistics and
    /// precomputes the graph structure the forward pass needs.
    pub fn prepare(&self, ds: &Dataset) -> Result<Prepared> {
        let regions = ds.regions();
        let index: HashMap<RegionId, usize> = regions.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        let mut inputs = Vec::with_capacity(regions.len());
        for &r in &regions {
            let g = &ds.roads[&r];
            if g.node_count() == 0 {
                return Err(ModelError::EmptyRegion(r));
            }
            let mut nodes = g.node_features();
            self.norm.node.apply(&mut nodes);
            let mut arc_feats = g.arc_features();
            self.norm.edge.apply(&mut arc_feats);
            let communities = ds.hierarchy.communities(r).to_vec();
            let position: HashMap<CommunityId, usize> = communities.iter().enumerate().map(|(i, &c)| (c, i)).collect();
            let groups = g
                .intersections()
                .iter()
                .map(|n| ds.hierarchy.community_of(n.id).and_then(|c| position.get(&c).copied()).ok_or(ModelError::UnknownRegion(r)))
                .collect::<Result<Vec<_>>>()?;
            inputs.push(RegionInput {
                region: r,
                nodes: Tensor::from_vec(g.node_count(), NODE_FEATURES, nodes)?,
                arc_feats: Tensor::from_vec(g.arcs().len(), EDGE_FEATURES, arc_feats)?,
                arcs: g.arcs().to_vec(),
                groups,
                communities,
                flows: ds.community_flows_of(r),
            });
        }

        let locals = if self.config.ablation.region_level() {
            let graph = self.region_graph(ds, &regions)?;
            (0..regions.len()).map(|t| localise(&graph, regions.len(), t, self.config.layers)).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let labels = ds.labels.iter().map(|(&r, &y)| (r, self.norm.label_to_model(y))).collect();
        Ok(Prepared { regions, index, inputs, locals, labels })
    }

    fn region_graph(&self, ds: &Dataset, regions: &[RegionId]) -> Result<RegionGraph> {
        // link feature: mean of the normalized connector segments joining the pair
        let mut sums: HashMap<(RegionId, RegionId), (Vec<f64>, usize)> = HashMap::new();
        for c in &ds.connectors {
            let mut f = c.segment.features().to_vec();
            self.norm.edge.apply(&mut f);
            let key = (c.region_a.min(c.region_b), c.region_a.max(c.region_b));
            let entry = sums.entry(key).or_insert_with(|| (vec![0.0; EDGE_FEATURES], 0));
            entry.0.iter_mut().zip(&f).for_each(|(s, x)| *s += x);
            entry.1 += 1;
        }
        let mut pair_feats = Vec::with_capacity(ds.adjacency.len() * EDGE_FEATURES);
        for &(a, b) in &ds.adjacency {
            match sums.get(&(a.min(b), a.max(b))) {
                Some((s, n)) => pair_feats.extend(s.iter().map(|x| x / *n as f64)),
                None => pair_feats.extend([0.0; EDGE_FEATURES]),
            }
        }
        let pair_feats = Tensor::from_vec(ds.adjacency.len(), EDGE_FEATURES, pair_feats)?;
        let source = SpatialSource::Adjacency { pairs: &ds.adjacency, feats: Some(&pair_feats), width: EDGE_FEATURES };
        let g = build_hetero_graph(Level::Region, Tensor::zeros(regions.len(), 1), regions, source, &ds.region_flows, self.config.min_flow)?;
        let types = self.config.ablation.edge_types();
        let (spatial_arcs, spatial_feats) = if types.spatial() {
            let feats = (0..g.spatial.len()).map(|k| g.spatial.feats.row(k)).collect();
            (g.spatial.arcs, feats)
        } else {
            (Vec::new(), Vec::new())
        };
        let (od_arcs, od_feats) = if types.od() {
            let feats = g.od.feats.to_vec().into_iter().map(|f| self.norm.region_od.scalar(f.ln_1p())).collect();
            (g.od.arcs, feats)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(RegionGraph { spatial_arcs, spatial_feats, od_arcs, od_feats })
    }
}

/// Nodes with a directed path of at most `hops` arcs into `target`, and the
/// arcs among them. Every node closer than `hops` keeps all of its incoming
/// arcs, so the target's output after `hops` layers is unchanged.
fn localise(g: &RegionGraph, n: usize, target: usize, hops: usize) -> Result<LocalGraph> {
    let mut incoming = vec![Vec::new(); n];
    for &(s, d) in g.spatial_arcs.iter().chain(&g.od_arcs) {
        incoming[d].push(s);
    }
    let mut depth = vec![usize::MAX; n];
    depth[target] = 0;
    let mut queue = VecDeque::from([target]);
    while let Some(u) = queue.pop_front() {
        if depth[u] == hops {
            continue;
        }
        for &s in &incoming[u] {
            if depth[s] == usize::MAX {
                depth[s] = depth[u] + 1;
                queue.push_back(s);
            }
        }
    }
    let mut members = vec![target];
    members.extend((0..n).filter(|&i| i != target && depth[i] != usize::MAX));
    let mut local = vec![usize::MAX; n];
    for (p, &m) in members.iter().enumerate() {
        local[m] = p;
    }
    let keep = |&(s, d): &(usize, usize)| local[s] != usize::MAX && local[d] != usize::MAX;

    let mut spatial_arcs = Vec::new();
    let mut spatial_rows = Vec::new();
    for (arc, feats) in g.spatial_arcs.iter().zip(&g.spatial_feats).filter(|(a, _)| keep(a)) {
        spatial_arcs.push((local[arc.0], local[arc.1]));
        spatial_rows.extend_from_slice(feats);
    }
    let mut od_arcs = Vec::new();
    let mut od_rows = Vec::new();
    for (arc, &f) in g.od_arcs.iter().zip(&g.od_feats).filter(|(a, _)| keep(a)) {
        od_arcs.push((local[arc.0], local[arc.1]));
        od_rows.push(f);
    }
    Ok(LocalGraph {
        members,
        spatial_feats: Tensor::from_vec(spatial_arcs.len(), EDGE_FEATURES, spatial_rows)?,
        spatial_arcs,
        od_feats: Tensor::from_vec(od_arcs.len(), 1, od_rows)?,
        od_arcs,
    })
}
