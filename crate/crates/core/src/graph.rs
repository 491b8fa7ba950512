//! Road graphs, the intersection → community → region hierarchy, pooling
//! between levels, and construction of the typed (spatial / OD) area graphs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{segment_max, segment_sum_shared, Tensor, TensorError};

pub type NodeId = u64;
pub type CommunityId = u64;
pub type RegionId = u64;

/// Width of the raw intersection feature: relative lon, relative lat, degree.
pub const NODE_FEATURES: usize = 3;
/// Width of the raw segment feature: relative lon, relative lat, length, one-hot class.
pub const EDGE_FEATURES: usize = 3 + RoadClass::COUNT;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid road graph for region {region}: {}", problems.join("; "))]
    InvalidRoadGraph { region: RegionId, problems: Vec<String> },
    #[error("invalid hierarchy: {}", .0.join("; "))]
    InvalidHierarchy(Vec<String>),
    #[error("unknown pooling function `{0}` (expected mean, sum or max)")]
    UnknownPooling(String),
    #[error("no arc crosses groups {0} and {1}")]
    NoCrossingArc(usize, usize),
    #[error("OD record references unknown area {0}")]
    UnknownArea(u64),
    #[error("OD record from area {0} to itself")]
    SelfFlow(u64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RoadClass {
    Motorway,
    Primary,
    Secondary,
    Residential,
    Other,
}

impl RoadClass {
    pub const COUNT: usize = 5;
    pub const ALL: [RoadClass; RoadClass::COUNT] = [
        RoadClass::Motorway,
        RoadClass::Primary,
        RoadClass::Secondary,
        RoadClass::Residential,
        RoadClass::Other,
    ];

    /// Parses a class label; anything outside the vocabulary is `Other`.
    pub fn parse(label: &str) -> Self {
        match label.trim().to_ascii_lowercase().as_str() {
            "motorway" => RoadClass::Motorway,
            "primary" => RoadClass::Primary,
            "secondary" => RoadClass::Secondary,
            "residential" => RoadClass::Residential,
            _ => RoadClass::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoadClass::Motorway => "motorway",
            RoadClass::Primary => "primary",
            RoadClass::Secondary => "secondary",
            RoadClass::Residential => "residential",
            RoadClass::Other => "other",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RoadClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: NodeId,
    pub rel_lon: f64,
    pub rel_lat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub u: NodeId,
    pub v: NodeId,
    pub rel_lon: f64,
    pub rel_lat: f64,
    pub length_km: f64,
    pub road_class: RoadClass,
}

impl Segment {
    pub fn features(&self) -> [f64; EDGE_FEATURES] {
        let mut f = [0.0; EDGE_FEATURES];
        f[0] = self.rel_lon;
        f[1] = self.rel_lat;
        f[2] = self.length_km;
        f[3 + self.road_class.index()] = 1.0;
        f
    }
}

/// Validated road network of one region. Each undirected segment `k` is
/// realized as arc `2k` (u → v) and arc `2k + 1` (v → u).
#[derive(Debug, Clone, PartialEq)]
pub struct RoadGraph {
    pub region: RegionId,
    intersections: Vec<Intersection>,
    segments: Vec<Segment>,
    index: HashMap<NodeId, usize>,
    degree: Vec<usize>,
    arcs: Vec<(usize, usize)>,
}

fn unit_interval(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

/// Validates intersections and segments into a [`RoadGraph`], reporting every
/// problem found rather than only the first.
pub fn build_road_graph(region: RegionId, intersections: Vec<Intersection>, segments: Vec<Segment>) -> Result<RoadGraph> {
    let mut problems = Vec::new();
    let mut index = HashMap::with_capacity(intersections.len());
    for (i, n) in intersections.iter().enumerate() {
        if index.insert(n.id, i).is_some() {
            problems.push(format!("duplicate node id {}", n.id));
        }
        if !unit_interval(n.rel_lon) || !unit_interval(n.rel_lat) {
            problems.push(format!("node {} has relative coordinates outside [0, 1]", n.id));
        }
    }
    let mut degree = vec![0; intersections.len()];
    let mut arcs = Vec::with_capacity(2 * segments.len());
    for (k, s) in segments.iter().enumerate() {
        let u = index.get(&s.u).copied();
        let v = index.get(&s.v).copied();
        for (end, idx) in [(s.u, u), (s.v, v)] {
            if idx.is_none() {
                problems.push(format!("segment {k} references missing node {end}"));
            }
        }
        if s.u == s.v {
            problems.push(format!("segment {k} is a self-loop on node {}", s.u));
        }
        if !(s.length_km > 0.0) || !s.length_km.is_finite() {
            problems.push(format!("segment {k} has non-positive length {}", s.length_km));
        }
        if !unit_interval(s.rel_lon) || !unit_interval(s.rel_lat) {
            problems.push(format!("segment {k} has relative coordinates outside [0, 1]"));
        }
        if let (Some(u), Some(v)) = (u, v) {
            if u != v {
                degree[u] += 1;
                degree[v] += 1;
            }
            arcs.push((u, v));
            arcs.push((v, u));
        }
    }
    if !problems.is_empty() {
        return Err(GraphError::InvalidRoadGraph { region, problems });
    }
    Ok(RoadGraph { region, intersections, segments, index, degree, arcs })
}

impl RoadGraph {
    pub fn intersections(&self) -> &[Intersection] {
        &self.intersections
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn node_count(&self) -> usize {
        self.intersections.len()
    }

    pub fn degree(&self) -> &[usize] {
        &self.degree
    }

    /// Directed arcs `(src, dst)` over node positions.
    pub fn arcs(&self) -> &[(usize, usize)] {
        &self.arcs
    }

    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Row-major `N x 3` raw node features.
    pub fn node_features(&self) -> Vec<f64> {
        self.intersections
            .iter()
            .zip(&self.degree)
            .flat_map(|(n, &d)| [n.rel_lon, n.rel_lat, d as f64])
            .collect()
    }

    /// Row-major `2S x 8` raw arc features; both arcs of a segment share its features.
    pub fn arc_features(&self) -> Vec<f64> {
        self.segments
            .iter()
            .flat_map(|s| {
                let f = s.features();
                f.into_iter().chain(f)
            })
            .collect()
    }

    /// True if every intersection is reachable from the first one.
    pub fn is_connected(&self) -> bool {
        let n = self.node_count();
        if n == 0 {
            return true;
        }
        let mut adj = vec![Vec::new(); n];
        for &(s, d) in &self.arcs {
            adj[s].push(d);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Affiliation maps from intersections to communities to regions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Hierarchy {
    node_to_community: HashMap<NodeId, CommunityId>,
    community_to_region: HashMap<CommunityId, RegionId>,
    communities_by_region: BTreeMap<RegionId, Vec<CommunityId>>,
}

impl Hierarchy {
    pub fn new(node_to_community: HashMap<NodeId, CommunityId>, community_to_region: HashMap<CommunityId, RegionId>) -> Result<Self> {
        let mut problems = Vec::new();
        let mut populated = HashSet::new();
        let mut dangling: Vec<_> = node_to_community
            .iter()
            .filter(|(_, c)| !community_to_region.contains_key(c))
            .map(|(n, c)| (*n, *c))
            .collect();
        dangling.sort_unstable();
        for (n, c) in dangling {
            problems.push(format!("node {n} belongs to community {c} which has no region"));
        }
        populated.extend(node_to_community.values().copied());
        let mut empty: Vec<_> = community_to_region.keys().filter(|c| !populated.contains(*c)).copied().collect();
        empty.sort_unstable();
        for c in empty {
            problems.push(format!("community {c} has no intersections"));
        }
        if !problems.is_empty() {
            return Err(GraphError::InvalidHierarchy(problems));
        }
        let mut communities_by_region: BTreeMap<RegionId, Vec<CommunityId>> = BTreeMap::new();
        for (&c, &r) in &community_to_region {
            communities_by_region.entry(r).or_default().push(c);
        }
        communities_by_region.values_mut().for_each(|v| v.sort_unstable());
        Ok(Self { node_to_community, community_to_region, communities_by_region })
    }

    pub fn community_of(&self, node: NodeId) -> Option<CommunityId> {
        self.node_to_community.get(&node).copied()
    }

    pub fn region_of_community(&self, community: CommunityId) -> Option<RegionId> {
        self.community_to_region.get(&community).copied()
    }

    pub fn region_of_node(&self, node: NodeId) -> Option<RegionId> {
        self.community_of(node).and_then(|c| self.region_of_community(c))
    }

    /// Regions in ascending id order.
    pub fn regions(&self) -> impl Iterator<Item = RegionId> + '_ {
        self.communities_by_region.keys().copied()
    }

    /// Communities of a region in ascending id order.
    pub fn communities(&self, region: RegionId) -> &[CommunityId] {
        self.communities_by_region.get(&region).map_or(&[], Vec::as_slice)
    }

    pub fn community_count(&self) -> usize {
        self.community_to_region.len()
    }

    pub fn node_to_community(&self) -> &HashMap<NodeId, CommunityId> {
        &self.node_to_community
    }

    pub fn community_to_region(&self) -> &HashMap<CommunityId, RegionId> {
        &self.community_to_region
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Community,
    Region,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Community => "community",
            Level::Region => "region",
        })
    }
}

impl FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "community" => Ok(Level::Community),
            "region" => Ok(Level::Region),
            other => Err(format!("unknown level `{other}`")),
        }
    }
}

/// Trips per period from one area to another at a given level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ODFlow {
    pub level: Level,
    pub origin: u64,
    pub dest: u64,
    pub flow: f64,
}

/// Group-wise reduction used between levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Sum,
    Max,
}

impl FromStr for Pooling {
    type Err = GraphError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(Pooling::Mean),
            "sum" => Ok(Pooling::Sum),
            "max" => Ok(Pooling::Max),
            other => Err(GraphError::UnknownPooling(other.to_string())),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Sum => "sum",
            Pooling::Max => "max",
        })
    }
}

fn reduce(phi: Pooling, reps: &Tensor, groups: Arc<[usize]>, n_groups: usize) -> Result<(Tensor, Vec<usize>)> {
    let mut counts = vec![0usize; n_groups];
    for &g in groups.iter() {
        if g < n_groups {
            counts[g] += 1;
        }
    }
    let pooled = match phi {
        Pooling::Sum => segment_sum_shared(reps, groups, n_groups)?,
        Pooling::Max => segment_max(reps, &groups, n_groups)?,
        Pooling::Mean => {
            let sums = segment_sum_shared(reps, groups, n_groups)?;
            let inv: Vec<f64> = counts.iter().map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 }).collect();
            sums.scale_rows(&Tensor::from_vec(n_groups, 1, inv)?)?
        }
    };
    Ok((pooled, counts))
}

/// Reduces the rows of `reps` that share a group id. Groups with no rows
/// yield a zero row (and a warning).
pub fn pool_nodes(phi: Pooling, reps: &Tensor, groups: &[usize], n_groups: usize) -> Result<Tensor> {
    let (pooled, counts) = reduce(phi, reps, Arc::from(groups), n_groups)?;
    for (g, _) in counts.iter().enumerate().filter(|(_, &c)| c == 0) {
        log::warn!("pooling group {g} has no members; using a zero row");
    }
    Ok(pooled)
}

/// Reduces the arcs whose endpoints both lie in the same group. Groups
/// without internal arcs yield a zero row.
pub fn pool_internal_edges(
    phi: Pooling,
    edge_reps: &Tensor,
    arcs: &[(usize, usize)],
    groups: &[usize],
    n_groups: usize,
) -> Result<Tensor> {
    let (picked, owner): (Vec<usize>, Vec<usize>) = arcs
        .iter()
        .enumerate()
        .filter(|(_, (s, d))| groups[*s] == groups[*d])
        .map(|(k, (s, _))| (k, groups[*s]))
        .unzip();
    if picked.is_empty() {
        return Ok(Tensor::zeros(n_groups, edge_reps.cols()));
    }
    let rows = edge_reps.gather_rows(&picked)?;
    Ok(reduce(phi, &rows, Arc::from(owner), n_groups)?.0)
}

/// Every unordered group pair `(a, b)` with `a < b` joined by at least one
/// arc, in ascending order, with the reduction over the arcs crossing it in
/// either direction.
pub fn pool_all_cross_edges(
    phi: Pooling,
    edge_reps: &Tensor,
    arcs: &[(usize, usize)],
    groups: &[usize],
) -> Result<(Vec<(usize, usize)>, Tensor)> {
    let mut by_pair: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (k, &(s, d)) in arcs.iter().enumerate() {
        let (a, b) = (groups[s], groups[d]);
        if a != b {
            by_pair.entry((a.min(b), a.max(b))).or_default().push(k);
        }
    }
    if by_pair.is_empty() {
        return Ok((Vec::new(), Tensor::zeros(0, edge_reps.cols())));
    }
    let mut picked = Vec::new();
    let mut owner = Vec::new();
    for (p, ks) in by_pair.values().enumerate() {
        picked.extend_from_slice(ks);
        owner.extend(std::iter::repeat_n(p, ks.len()));
    }
    let pairs: Vec<_> = by_pair.into_keys().collect();
    let rows = edge_reps.gather_rows(&picked)?;
    let pooled = reduce(phi, &rows, Arc::from(owner), pairs.len())?.0;
    Ok((pairs, pooled))
}

/// Reduction over the arcs running between groups `pair.0` and `pair.1` in
/// either direction.
pub fn pool_cross_edges(
    phi: Pooling,
    edge_reps: &Tensor,
    arcs: &[(usize, usize)],
    groups: &[usize],
    pair: (usize, usize),
) -> Result<Tensor> {
    let (a, b) = pair;
    let picked: Vec<usize> = arcs
        .iter()
        .enumerate()
        .filter(|(_, (s, d))| (groups[*s], groups[*d]) == (a, b) || (groups[*s], groups[*d]) == (b, a))
        .map(|(k, _)| k)
        .collect();
    if picked.is_empty() || a == b {
        return Err(GraphError::NoCrossingArc(a, b));
    }
    let rows = edge_reps.gather_rows(&picked)?;
    let n = picked.len();
    Ok(reduce(phi, &rows, Arc::from(vec![0; n]), 1)?.0)
}

/// Arcs of one edge type with their feature rows.
#[derive(Debug, Clone)]
pub struct EdgeSet {
    pub arcs: Vec<(usize, usize)>,
    pub feats: Tensor,
}

impl EdgeSet {
    pub fn empty(width: usize) -> Self {
        Self { arcs: Vec::new(), feats: Tensor::zeros(0, width) }
    }

    pub fn len(&self) -> usize {
        self.arcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arcs.is_empty()
    }
}

/// One level's area graph with spatial links and OD links. OD link features
/// hold the raw flow (one column) until the model embeds them.
#[derive(Debug, Clone)]
pub struct HeteroGraph {
    pub level: Level,
    pub node_feats: Tensor,
    pub spatial: EdgeSet,
    pub od: EdgeSet,
}

impl HeteroGraph {
    pub fn node_count(&self) -> usize {
        self.node_feats.rows()
    }

    /// Checks endpoint range, spatial symmetry and arc uniqueness per type.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.node_count();
        for (name, set) in [("spatial", &self.spatial), ("od", &self.od)] {
            if set.feats.rows() != set.arcs.len() {
                return Err(format!("{name}: {} arcs but {} feature rows", set.arcs.len(), set.feats.rows()));
            }
            let mut seen = HashSet::new();
            for &(s, d) in &set.arcs {
                if s >= n || d >= n {
                    return Err(format!("{name}: arc ({s}, {d}) outside {n} nodes"));
                }
                if !seen.insert((s, d)) {
                    return Err(format!("{name}: duplicate arc ({s}, {d})"));
                }
            }
        }
        let spatial: HashSet<_> = self.spatial.arcs.iter().copied().collect();
        if let Some(&(s, d)) = self.spatial.arcs.iter().find(|(s, d)| !spatial.contains(&(*d, *s))) {
            return Err(format!("spatial arc ({s}, {d}) has no reverse"));
        }
        Ok(())
    }
}

/// Where spatial links of a hetero graph come from.
pub enum SpatialSource<'a> {
    /// Community level: links between communities joined by at least one
    /// road segment, featured by pooling the crossing arcs' representations.
    RoadNetwork {
        edge_reps: &'a Tensor,
        arcs: &'a [(usize, usize)],
        /// Area position of every road node.
        groups: &'a [usize],
        phi: Pooling,
    },
    /// Region level: declared adjacency records. `feats` holds one row per
    /// pair when available; otherwise links carry zero vectors of `width`.
    Adjacency {
        pairs: &'a [(u64, u64)],
        feats: Option<&'a Tensor>,
        width: usize,
    },
}

/// Assembles a [`HeteroGraph`] over `areas` (whose order fixes node
/// positions). Spatial links are symmetric; one directed OD link is created
/// per origin/destination pair whose total flow exceeds `min_flow`.
pub fn build_hetero_graph(
    level: Level,
    node_feats: Tensor,
    areas: &[u64],
    spatial: SpatialSource<'_>,
    od_flows: &[ODFlow],
    min_flow: f64,
) -> Result<HeteroGraph> {
    let position: HashMap<u64, usize> = areas.iter().enumerate().map(|(i, &a)| (a, i)).collect();
    let spatial = match spatial {
        SpatialSource::RoadNetwork { edge_reps, arcs, groups, phi } => {
            let (pairs, pooled) = pool_all_cross_edges(phi, edge_reps, arcs, groups)?;
            symmetric_links(&pairs, Some(&pooled), edge_reps.cols())?
        }
        SpatialSource::Adjacency { pairs, feats, width } => {
            let mut local = Vec::with_capacity(pairs.len());
            for &(a, b) in pairs {
                let pa = *position.get(&a).ok_or(GraphError::UnknownArea(a))?;
                let pb = *position.get(&b).ok_or(GraphError::UnknownArea(b))?;
                local.push((pa.min(pb), pa.max(pb)));
            }
            let width = feats.map_or(width, Tensor::cols);
            symmetric_links(&local, feats, width)?
        }
    };

    let mut totals: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for rec in od_flows {
        let o = *position.get(&rec.origin).ok_or(GraphError::UnknownArea(rec.origin))?;
        let d = *position.get(&rec.dest).ok_or(GraphError::UnknownArea(rec.dest))?;
        if o == d {
            return Err(GraphError::SelfFlow(rec.origin));
        }
        *totals.entry((o, d)).or_default() += rec.flow;
    }
    totals.retain(|_, f| *f > min_flow);
    let flows: Vec<f64> = totals.values().copied().collect();
    let od = EdgeSet {
        arcs: totals.into_keys().collect(),
        feats: Tensor::from_vec(flows.len(), 1, flows)?,
    };
    Ok(HeteroGraph { level, node_feats, spatial, od })
}

/// Both directions for every unordered pair; duplicate pairs collapse to
/// their first occurrence.
fn symmetric_links(pairs: &[(usize, usize)], feats: Option<&Tensor>, width: usize) -> Result<EdgeSet> {
    let mut seen = HashSet::new();
    let mut arcs = Vec::with_capacity(2 * pairs.len());
    let mut rows = Vec::with_capacity(2 * pairs.len());
    for (k, &(a, b)) in pairs.iter().enumerate() {
        if a == b || !seen.insert((a, b)) {
            continue;
        }
        arcs.push((a, b));
        arcs.push((b, a));
        rows.push(k);
        rows.push(k);
    }
    let feats = match feats {
        Some(t) => t.gather_rows(&rows)?,
        None => Tensor::zeros(arcs.len(), width),
    };
    Ok(EdgeSet { arcs, feats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn node(id: u64) -> Intersection {
        Intersection { id, rel_lon: 0.5, rel_lat: 0.5 }
    }

    fn seg(u: u64, v: u64) -> Segment {
        Segment { u, v, rel_lon: 0.5, rel_lat: 0.5, length_km: 1.0, road_class: RoadClass::Primary }
    }

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Brute-force group-by: per group, the list of member rows.
    fn group_rows(data: &[f64], cols: usize, groups: &[usize], n_groups: usize) -> Vec<Vec<Vec<f64>>> {
        let mut out = vec![Vec::new(); n_groups];
        for (r, &g) in groups.iter().enumerate() {
            out[g].push(data[r * cols..(r + 1) * cols].to_vec());
        }
        out
    }

    fn naive_reduce(phi: Pooling, rows: &[Vec<f64>], cols: usize) -> Vec<f64> {
        if rows.is_empty() {
            return vec![0.0; cols];
        }
        (0..cols)
            .map(|c| {
                let col = rows.iter().map(|r| r[c]);
                match phi {
                    Pooling::Sum => col.sum(),
                    Pooling::Mean => col.sum::<f64>() / rows.len() as f64,
                    Pooling::Max => col.fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect()
    }

    #[test]
    fn two_node_graph() {
        let g = build_road_graph(1, vec![node(10), node(11)], vec![seg(10, 11)]).unwrap();
        assert_eq!(g.degree(), &[1, 1]);
        assert_eq!(g.arcs(), &[(0, 1), (1, 0)]);
        assert_eq!(g.node_features(), vec![0.5, 0.5, 1.0, 0.5, 0.5, 1.0]);
        let f = g.arc_features();
        assert_eq!(f.len(), 2 * EDGE_FEATURES);
        assert_eq!(&f[..EDGE_FEATURES], &[0.5, 0.5, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn triangle_degrees() {
        let g = build_road_graph(1, vec![node(1), node(2), node(3)], vec![seg(1, 2), seg(2, 3), seg(3, 1)]).unwrap();
        assert_eq!(g.degree(), &[2, 2, 2]);
        assert!(g.is_connected());
    }

    #[test]
    fn validation_lists_all_offenders() {
        let mut bad = seg(1, 99);
        bad.length_km = 0.0;
        let err = build_road_graph(4, vec![node(1), node(1), node(2)], vec![bad, seg(2, 2)]).unwrap_err();
        let GraphError::InvalidRoadGraph { region, problems } = &err else { panic!("{err}") };
        assert_eq!(*region, 4);
        assert!(problems.iter().any(|p| p.contains("duplicate node id 1")));
        assert!(problems.iter().any(|p| p.contains("missing node 99")));
        assert!(problems.iter().any(|p| p.contains("non-positive length")));
        assert!(problems.iter().any(|p| p.contains("self-loop")));
        assert!(err.to_string().contains("99"));
    }

    #[test]
    fn road_class_vocabulary() {
        assert_eq!(RoadClass::parse("Motorway"), RoadClass::Motorway);
        assert_eq!(RoadClass::parse("tertiary"), RoadClass::Other);
        for c in RoadClass::ALL {
            assert_eq!(RoadClass::parse(c.as_str()), c);
        }
    }

    #[test]
    fn hierarchy_rejects_empty_and_dangling() {
        let n2c = HashMap::from([(1, 10), (2, 11)]);
        let c2r = HashMap::from([(10, 100), (12, 100)]);
        let err = Hierarchy::new(n2c, c2r).unwrap_err();
        let GraphError::InvalidHierarchy(problems) = err else { panic!() };
        assert!(problems.iter().any(|p| p.contains("community 11")));
        assert!(problems.iter().any(|p| p.contains("community 12 has no intersections")));
    }

    #[test]
    fn hierarchy_lookups() {
        let h = Hierarchy::new(HashMap::from([(1, 10), (2, 11), (3, 12)]), HashMap::from([(10, 7), (11, 7), (12, 8)])).unwrap();
        assert_eq!(h.regions().collect::<Vec<_>>(), vec![7, 8]);
        assert_eq!(h.communities(7), &[10, 11]);
        assert_eq!(h.region_of_node(3), Some(8));
    }

    #[test]
    fn pooling_by_name() {
        assert_eq!("MEAN".parse::<Pooling>().unwrap(), Pooling::Mean);
        assert_eq!("median".parse::<Pooling>().unwrap_err(), GraphError::UnknownPooling("median".into()));
    }

    #[test]
    fn pool_nodes_cases() {
        let reps = Tensor::from_rows(&[vec![1.0], vec![3.0]]);
        assert_eq!(pool_nodes(Pooling::Mean, &reps, &[0, 0], 1).unwrap().to_vec(), vec![2.0]);
        assert_eq!(pool_nodes(Pooling::Sum, &reps, &[0, 1], 2).unwrap().to_vec(), vec![1.0, 3.0]);
        assert_eq!(pool_nodes(Pooling::Mean, &reps, &[0, 0], 2).unwrap().to_vec(), vec![2.0, 0.0]);
    }

    #[test]
    fn pooling_matches_group_by_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for phi in [Pooling::Mean, Pooling::Sum, Pooling::Max] {
            for _ in 0..20 {
                let n = rng.random_range(1..30);
                let n_groups = rng.random_range(1..6);
                let cols = rng.random_range(1..5);
                let groups: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_groups)).collect();
                let reps = random_tensor(&mut rng, n, cols);
                let got = pool_nodes(phi, &reps, &groups, n_groups).unwrap().to_vec();
                let grouped = group_rows(&reps.to_vec(), cols, &groups, n_groups);
                let want: Vec<f64> = grouped.iter().flat_map(|rows| naive_reduce(phi, rows, cols)).collect();
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12, "{phi}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn internal_edge_pooling_cases() {
        let reps = Tensor::from_rows(&[vec![5.0], vec![7.0]]);
        // arc 0 inside group 0; arc 1 crosses
        let out = pool_internal_edges(Pooling::Mean, &reps, &[(0, 1), (1, 2)], &[0, 0, 1], 2).unwrap();
        assert_eq!(out.to_vec(), vec![5.0, 0.0]);
        let out = pool_internal_edges(Pooling::Mean, &reps, &[(0, 1), (1, 0)], &[0, 1], 2).unwrap();
        assert_eq!(out.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn internal_edge_pooling_matches_filter_then_reduce() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for phi in [Pooling::Mean, Pooling::Sum, Pooling::Max] {
            for _ in 0..20 {
                let n = rng.random_range(2..15);
                let n_groups = rng.random_range(1..4);
                let groups: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_groups)).collect();
                let m = rng.random_range(1..30);
                let arcs: Vec<(usize, usize)> = (0..m).map(|_| (rng.random_range(0..n), rng.random_range(0..n))).collect();
                let reps = random_tensor(&mut rng, m, 3);
                let got = pool_internal_edges(phi, &reps, &arcs, &groups, n_groups).unwrap().to_vec();
                let data = reps.to_vec();
                for g in 0..n_groups {
                    let rows: Vec<Vec<f64>> = arcs
                        .iter()
                        .enumerate()
                        .filter(|(_, (s, d))| groups[*s] == g && groups[*d] == g)
                        .map(|(k, _)| data[k * 3..k * 3 + 3].to_vec())
                        .collect();
                    let want = naive_reduce(phi, &rows, 3);
                    for c in 0..3 {
                        assert!((got[g * 3 + c] - want[c]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn cross_edge_pooling_cases() {
        let reps = Tensor::from_rows(&[vec![2.0, 4.0], vec![6.0, 0.0], vec![9.0, 9.0]]);
        let groups = [0, 0, 1, 1];
        let one = pool_cross_edges(Pooling::Mean, &reps, &[(1, 2), (0, 1), (2, 3)], &groups, (0, 1)).unwrap();
        assert_eq!(one.to_vec(), vec![2.0, 4.0]);
        let two = pool_cross_edges(Pooling::Mean, &reps, &[(1, 2), (3, 0), (0, 1)], &groups, (0, 1)).unwrap();
        assert_eq!(two.to_vec(), vec![4.0, 2.0]);
        assert_eq!(
            pool_cross_edges(Pooling::Mean, &reps, &[(0, 1), (2, 3), (2, 3)], &groups, (0, 1)).unwrap_err(),
            GraphError::NoCrossingArc(0, 1)
        );
    }

    #[test]
    fn cross_edge_pooling_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for phi in [Pooling::Mean, Pooling::Sum, Pooling::Max] {
            for _ in 0..20 {
                let n = rng.random_range(2..12);
                let groups: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
                let m = rng.random_range(1..25);
                let arcs: Vec<(usize, usize)> = (0..m).map(|_| (rng.random_range(0..n), rng.random_range(0..n))).collect();
                let reps = random_tensor(&mut rng, m, 2);
                let data = reps.to_vec();
                let rows: Vec<Vec<f64>> = arcs
                    .iter()
                    .enumerate()
                    .filter(|(_, (s, d))| groups[*s] != groups[*d])
                    .map(|(k, _)| data[k * 2..k * 2 + 2].to_vec())
                    .collect();
                let got = pool_cross_edges(phi, &reps, &arcs, &groups, (0, 1));
                if rows.is_empty() {
                    assert!(got.is_err());
                    continue;
                }
                let got = got.unwrap().to_vec();
                let want = naive_reduce(phi, &rows, 2);
                assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
                let (pairs, all) = pool_all_cross_edges(phi, &reps, &arcs, &groups).unwrap();
                assert_eq!(pairs, vec![(0, 1)]);
                assert_eq!(all.to_vec(), got);
            }
        }
    }

    fn community_fixture() -> (Tensor, Vec<(usize, usize)>, Vec<usize>) {
        // two communities {0,1} and {2}, joined by the segment 1-2
        let reps = Tensor::from_rows(&[vec![1.0], vec![1.0], vec![3.0], vec![3.0]]);
        (reps, vec![(0, 1), (1, 0), (1, 2), (2, 1)], vec![0, 0, 1])
    }

    #[test]
    fn hetero_graph_from_road_network() {
        let (reps, arcs, groups) = community_fixture();
        let od = [ODFlow { level: Level::Community, origin: 20, dest: 21, flow: 5.0 }];
        let g = build_hetero_graph(
            Level::Community,
            Tensor::zeros(2, 4),
            &[20, 21],
            SpatialSource::RoadNetwork { edge_reps: &reps, arcs: &arcs, groups: &groups, phi: Pooling::Mean },
            &od,
            0.0,
        )
        .unwrap();
        assert_eq!(g.spatial.arcs, vec![(0, 1), (1, 0)]);
        assert_eq!(g.spatial.feats.to_vec(), vec![3.0, 3.0]);
        assert_eq!(g.od.arcs, vec![(0, 1)]);
        assert_eq!(g.od.feats.to_vec(), vec![5.0]);
        g.validate().unwrap();
    }

    #[test]
    fn zero_flow_creates_no_arc() {
        let (reps, arcs, groups) = community_fixture();
        let od = [ODFlow { level: Level::Community, origin: 21, dest: 20, flow: 0.0 }];
        let g = build_hetero_graph(
            Level::Community,
            Tensor::zeros(2, 1),
            &[20, 21],
            SpatialSource::RoadNetwork { edge_reps: &reps, arcs: &arcs, groups: &groups, phi: Pooling::Mean },
            &od,
            0.0,
        )
        .unwrap();
        assert!(g.od.is_empty());
    }

    #[test]
    fn unlinked_pair_has_no_arcs() {
        let reps = Tensor::from_rows(&[vec![1.0], vec![1.0]]);
        let g = build_hetero_graph(
            Level::Community,
            Tensor::zeros(2, 1),
            &[20, 21],
            SpatialSource::RoadNetwork { edge_reps: &reps, arcs: &[(0, 1), (1, 0)], groups: &[0, 0, 1], phi: Pooling::Mean },
            &[],
            0.0,
        )
        .unwrap();
        assert!(g.spatial.is_empty() && g.od.is_empty());
    }

    #[test]
    fn od_with_unknown_area_fails() {
        let od = [ODFlow { level: Level::Region, origin: 1, dest: 9, flow: 1.0 }];
        let err = build_hetero_graph(
            Level::Region,
            Tensor::zeros(2, 1),
            &[1, 2],
            SpatialSource::Adjacency { pairs: &[(1, 2)], feats: None, width: 3 },
            &od,
            0.0,
        )
        .unwrap_err();
        assert_eq!(err, GraphError::UnknownArea(9));
    }

    #[test]
    fn adjacency_links_default_to_zero_features() {
        let g = build_hetero_graph(
            Level::Region,
            Tensor::zeros(3, 1),
            &[5, 6, 7],
            SpatialSource::Adjacency { pairs: &[(7, 5), (6, 5), (5, 7)], feats: None, width: 3 },
            &[],
            0.0,
        )
        .unwrap();
        assert_eq!(g.spatial.arcs, vec![(0, 2), (2, 0), (0, 1), (1, 0)]);
        assert_eq!(g.spatial.feats.shape(), (4, 3));
        assert!(g.spatial.feats.to_vec().iter().all(|&x| x == 0.0));
        g.validate().unwrap();
    }

    proptest! {
        #[test]
        fn pooling_is_permutation_invariant(
            rows in proptest::collection::vec((0usize..4, proptest::collection::vec(-10.0f64..10.0, 3)), 1..25),
            seed in any::<u64>(),
        ) {
            let n = rows.len();
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let groups: Vec<usize> = rows.iter().map(|r| r.0).collect();
            let data: Vec<f64> = rows.iter().flat_map(|r| r.1.clone()).collect();
            let shuffled_groups: Vec<usize> = order.iter().map(|&i| groups[i]).collect();
            let shuffled: Vec<f64> = order.iter().flat_map(|&i| rows[i].1.clone()).collect();
            for phi in [Pooling::Mean, Pooling::Sum, Pooling::Max] {
                let a = pool_nodes(phi, &Tensor::from_vec(n, 3, data.clone()).unwrap(), &groups, 4).unwrap().to_vec();
                let b = pool_nodes(phi, &Tensor::from_vec(n, 3, shuffled.clone()).unwrap(), &shuffled_groups, 4).unwrap().to_vec();
                for (x, y) in a.iter().zip(&b) {
                    if phi == Pooling::Max {
                        prop_assert_eq!(x, y);
                    } else {
                        prop_assert!((x - y).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
