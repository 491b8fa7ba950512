//! Dataset loading, validation, splitting and synthetic generation.
//!
//! A dataset directory holds five CSV files, all with mandatory headers and
//! `#` comment lines:
//!
//! | file | columns |
//! |------|---------|
//! | `nodes.csv` | `region_id,community_id,node_id,rel_lon,rel_lat` |
//! | `edges.csv` | `node_u,node_v,rel_lon,rel_lat,length_km,road_class` |
//! | `od.csv` | `level,origin_id,dest_id,flow` (`level` is `community` or `region`) |
//! | `labels.csv` | `region_id,emission_tco2` |
//! | `region_adjacency.csv` | `region_a,region_b` |
//!
//! A segment whose endpoints lie in different regions is a connector: it is
//! kept out of both road graphs and describes the link between the two regions.

mod oracle;
mod split;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::graph::{
    build_road_graph, CommunityId, GraphError, Hierarchy, Intersection, Level, NodeId, ODFlow, RegionId, RoadClass,
    RoadGraph, Segment,
};

pub use oracle::{oracle_emission, ClassProfile};
pub use split::{split_dataset, Split};
pub use synth::{generate_synthetic, SynthParams};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing input file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {message}")]
    Malformed { file: &'static str, line: u64, message: String },
    #[error("dataset failed validation:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("synthetic generation failed: {0}")]
    Synth(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// A road segment joining two regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Connector {
    pub region_a: RegionId,
    pub region_b: RegionId,
    pub segment: Segment,
}

/// Everything the model consumes, with raw (unnormalized) values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub roads: BTreeMap<RegionId, RoadGraph>,
    pub connectors: Vec<Connector>,
    pub hierarchy: Hierarchy,
    pub community_flows: Vec<ODFlow>,
    pub region_flows: Vec<ODFlow>,
    pub adjacency: Vec<(RegionId, RegionId)>,
    /// Annual emission in tonnes, strictly positive.
    pub labels: BTreeMap<RegionId, f64>,
}

impl Dataset {
    /// All regions in ascending id order.
    pub fn regions(&self) -> Vec<RegionId> {
        self.roads.keys().copied().collect()
    }

    pub fn labeled_regions(&self) -> Vec<RegionId> {
        self.labels.keys().copied().collect()
    }

    /// Community-level flows whose endpoints lie in `region`.
    pub fn community_flows_of(&self, region: RegionId) -> Vec<ODFlow> {
        self.community_flows
            .iter()
            .filter(|f| self.hierarchy.region_of_community(f.origin) == Some(region))
            .copied()
            .collect()
    }

    /// Re-checks every cross-reference; an empty list means the dataset is consistent.
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let regions: BTreeSet<RegionId> = self.roads.keys().copied().collect();
        for (&r, g) in &self.roads {
            if g.region != r {
                problems.push(format!("road graph keyed {r} claims region {}", g.region));
            }
            if g.node_count() == 0 {
                problems.push(format!("region {r} has no intersections"));
            }
            for n in g.intersections() {
                if self.hierarchy.region_of_node(n.id) != Some(r) {
                    problems.push(format!("node {} of region {r} is not affiliated with it", n.id));
                }
            }
        }
        for r in self.hierarchy.regions() {
            if !regions.contains(&r) {
                problems.push(format!("hierarchy region {r} has no road graph"));
            }
        }
        for (&r, &y) in &self.labels {
            if !regions.contains(&r) {
                problems.push(format!("label for region {r} which has no road graph"));
            }
            if !(y > 0.0 && y.is_finite()) {
                problems.push(format!("label for region {r} is not positive: {y}"));
            }
        }
        for f in &self.community_flows {
            let (o, d) = (self.hierarchy.region_of_community(f.origin), self.hierarchy.region_of_community(f.dest));
            if o.is_none() || d.is_none() || o != d || f.origin == f.dest || !(f.flow >= 0.0) {
                problems.push(format!("invalid community flow {} -> {} ({})", f.origin, f.dest, f.flow));
            }
        }
        for f in &self.region_flows {
            if !regions.contains(&f.origin) || !regions.contains(&f.dest) || f.origin == f.dest || !(f.flow >= 0.0) {
                problems.push(format!("invalid region flow {} -> {} ({})", f.origin, f.dest, f.flow));
            }
        }
        let adjacent: HashSet<(RegionId, RegionId)> =
            self.adjacency.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
        for &(a, b) in &self.adjacency {
            if a == b || !regions.contains(&a) || !regions.contains(&b) {
                problems.push(format!("invalid adjacency {a} - {b}"));
            }
        }
        for c in &self.connectors {
            if !adjacent.contains(&(c.region_a.min(c.region_b), c.region_a.max(c.region_b))) {
                problems.push(format!("connector between non-adjacent regions {} and {}", c.region_a, c.region_b));
            }
        }
        problems
    }
}

const NODES: &str = "nodes.csv";
const EDGES: &str = "edges.csv";
const OD: &str = "od.csv";
const LABELS: &str = "labels.csv";
const ADJACENCY: &str = "region_adjacency.csv";

#[derive(Deserialize)]
struct NodeRow {
    region_id: RegionId,
    community_id: CommunityId,
    node_id: NodeId,
    rel_lon: f64,
    rel_lat: f64,
}

#[derive(Deserialize)]
struct EdgeRow {
    node_u: NodeId,
    node_v: NodeId,
    rel_lon: f64,
    rel_lat: f64,
    length_km: f64,
    road_class: String,
}

#[derive(Deserialize)]
struct OdRow {
    level: String,
    origin_id: u64,
    dest_id: u64,
    flow: f64,
}

#[derive(Deserialize)]
struct LabelRow {
    region_id: RegionId,
    emission_tco2: f64,
}

#[derive(Deserialize)]
struct AdjacencyRow {
    region_a: RegionId,
    region_b: RegionId,
}

/// Reads `dir/file`, checking the header, and returns rows with their line numbers.
fn read_rows<T: for<'de> Deserialize<'de>>(dir: &Path, file: &'static str, header: &[&str]) -> Result<Vec<(u64, T)>> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(DataError::MissingFile(path));
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(&path)?;
    let found = reader.headers()?.clone();
    if found.iter().ne(header.iter().copied()) {
        let line = found.position().map_or(1, |p| p.line());
        return Err(DataError::Malformed {
            file,
            line,
            message: format!("expected header `{}`, found `{}`", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Malformed {
            file,
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row = record
            .deserialize(Some(&found))
            .map_err(|e| DataError::Malformed { file, line, message: e.to_string() })?;
        rows.push((line, row));
    }
    Ok(rows)
}

/// Loads and cross-validates a dataset directory. Every referential problem
/// is collected before failing.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let nodes: Vec<(u64, NodeRow)> = read_rows(dir, NODES, &["region_id", "community_id", "node_id", "rel_lon", "rel_lat"])?;
    let edges: Vec<(u64, EdgeRow)> =
        read_rows(dir, EDGES, &["node_u", "node_v", "rel_lon", "rel_lat", "length_km", "road_class"])?;
    let od: Vec<(u64, OdRow)> = read_rows(dir, OD, &["level", "origin_id", "dest_id", "flow"])?;
    let labels: Vec<(u64, LabelRow)> = read_rows(dir, LABELS, &["region_id", "emission_tco2"])?;
    let adjacency: Vec<(u64, AdjacencyRow)> = read_rows(dir, ADJACENCY, &["region_a", "region_b"])?;

    let mut problems = Vec::new();
    let mut node_to_community = HashMap::new();
    let mut community_to_region: HashMap<CommunityId, RegionId> = HashMap::new();
    let mut intersections: BTreeMap<RegionId, Vec<Intersection>> = BTreeMap::new();
    for (line, n) in &nodes {
        if node_to_community.insert(n.node_id, n.community_id).is_some() {
            problems.push(format!("{NODES} line {line}: duplicate node id {}", n.node_id));
            continue;
        }
        match community_to_region.get(&n.community_id) {
            Some(&r) if r != n.region_id => problems.push(format!(
                "{NODES} line {line}: community {} already belongs to region {r}, not {}",
                n.community_id, n.region_id
            )),
            _ => {
                community_to_region.insert(n.community_id, n.region_id);
            }
        }
        intersections
            .entry(n.region_id)
            .or_default()
            .push(Intersection { id: n.node_id, rel_lon: n.rel_lon, rel_lat: n.rel_lat });
    }
    let node_region: HashMap<NodeId, RegionId> = nodes.iter().map(|(_, n)| (n.node_id, n.region_id)).collect();
    let region_set: BTreeSet<RegionId> = intersections.keys().copied().collect();

    let mut adjacent = HashSet::new();
    let mut adjacency_pairs = Vec::with_capacity(adjacency.len());
    for (line, a) in &adjacency {
        for r in [a.region_a, a.region_b] {
            if !region_set.contains(&r) {
                problems.push(format!("{ADJACENCY} line {line}: unknown region {r}"));
            }
        }
        if a.region_a == a.region_b {
            problems.push(format!("{ADJACENCY} line {line}: region {} adjacent to itself", a.region_a));
        }
        adjacent.insert((a.region_a.min(a.region_b), a.region_a.max(a.region_b)));
        adjacency_pairs.push((a.region_a, a.region_b));
    }

    let mut segments: BTreeMap<RegionId, Vec<Segment>> = BTreeMap::new();
    let mut connectors = Vec::new();
    for (line, e) in &edges {
        let segment = Segment {
            u: e.node_u,
            v: e.node_v,
            rel_lon: e.rel_lon,
            rel_lat: e.rel_lat,
            length_km: e.length_km,
            road_class: RoadClass::parse(&e.road_class),
        };
        match (node_region.get(&e.node_u), node_region.get(&e.node_v)) {
            (Some(&a), Some(&b)) if a == b => segments.entry(a).or_default().push(segment),
            (Some(&a), Some(&b)) => {
                if !adjacent.contains(&(a.min(b), a.max(b))) {
                    problems.push(format!("{EDGES} line {line}: segment joins non-adjacent regions {a} and {b}"));
                }
                if !(segment.length_km > 0.0) {
                    problems.push(format!("{EDGES} line {line}: non-positive length {}", segment.length_km));
                }
                connectors.push(Connector { region_a: a, region_b: b, segment });
            }
            (u, v) => {
                for (id, found) in [(e.node_u, u), (e.node_v, v)] {
                    if found.is_none() {
                        problems.push(format!("{EDGES} line {line}: unknown node {id}"));
                    }
                }
            }
        }
    }

    let mut roads = BTreeMap::new();
    for (region, nodes) in intersections {
        match build_road_graph(region, nodes, segments.remove(&region).unwrap_or_default()) {
            Ok(g) => {
                roads.insert(region, g);
            }
            Err(GraphError::InvalidRoadGraph { region, problems: p }) => {
                problems.extend(p.into_iter().map(|m| format!("region {region}: {m}")))
            }
            Err(other) => problems.push(other.to_string()),
        }
    }

    let mut community_flows = Vec::new();
    let mut region_flows = Vec::new();
    for (line, r) in &od {
        if !(r.flow >= 0.0 && r.flow.is_finite()) {
            problems.push(format!("{OD} line {line}: flow must be a non-negative number, got {}", r.flow));
        }
        if r.origin_id == r.dest_id {
            problems.push(format!("{OD} line {line}: origin and destination are both {}", r.origin_id));
        }
        let level = match r.level.parse::<Level>() {
            Ok(l) => l,
            Err(_) => {
                problems.push(format!("{OD} line {line}: unknown level `{}`", r.level));
                continue;
            }
        };
        let flow = ODFlow { level, origin: r.origin_id, dest: r.dest_id, flow: r.flow };
        match level {
            Level::Community => {
                let regions: Vec<_> = [r.origin_id, r.dest_id]
                    .iter()
                    .map(|c| {
                        let found = community_to_region.get(c).copied();
                        if found.is_none() {
                            problems.push(format!("{OD} line {line}: unknown community {c}"));
                        }
                        found
                    })
                    .collect();
                if let [Some(a), Some(b)] = regions[..] {
                    if a != b {
                        problems.push(format!("{OD} line {line}: community flow crosses regions {a} and {b}"));
                    }
                }
                community_flows.push(flow);
            }
            Level::Region => {
                for id in [r.origin_id, r.dest_id] {
                    if !region_set.contains(&id) {
                        problems.push(format!("{OD} line {line}: unknown region {id}"));
                    }
                }
                region_flows.push(flow);
            }
        }
    }

    let mut label_map = BTreeMap::new();
    for (line, l) in &labels {
        if !region_set.contains(&l.region_id) {
            problems.push(format!("{LABELS} line {line}: region {} has no road graph", l.region_id));
        }
        if !(l.emission_tco2 > 0.0 && l.emission_tco2.is_finite()) {
            problems.push(format!("{LABELS} line {line}: emission must be positive, got {}", l.emission_tco2));
        }
        if label_map.insert(l.region_id, l.emission_tco2).is_some() {
            problems.push(format!("{LABELS} line {line}: duplicate label for region {}", l.region_id));
        }
    }

    if !problems.is_empty() {
        return Err(DataError::Invalid(problems));
    }
    let hierarchy = Hierarchy::new(node_to_community, community_to_region)?;
    let ds = Dataset {
        roads,
        connectors,
        hierarchy,
        community_flows,
        region_flows,
        adjacency: adjacency_pairs,
        labels: label_map,
    };
    let remaining = ds.problems();
    if !remaining.is_empty() {
        return Err(DataError::Invalid(remaining));
    }
    Ok(ds)
}

fn create(dir: &Path, file: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(file))?))
}

/// Writes the five CSV files. Floats use the shortest representation that
/// reads back to the same value, so a written dataset reloads equal.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;

    let mut w = create(dir, NODES)?;
    writeln!(w, "region_id,community_id,node_id,rel_lon,rel_lat")?;
    for (r, g) in &ds.roads {
        for n in g.intersections() {
            let c = ds.hierarchy.community_of(n.id).expect("validated dataset");
            writeln!(w, "{r},{c},{},{},{}", n.id, n.rel_lon, n.rel_lat)?;
        }
    }
    w.flush()?;

    let mut w = create(dir, EDGES)?;
    writeln!(w, "node_u,node_v,rel_lon,rel_lat,length_km,road_class")?;
    let segments = ds.roads.values().flat_map(|g| g.segments()).chain(ds.connectors.iter().map(|c| &c.segment));
    for s in segments {
        writeln!(w, "{},{},{},{},{},{}", s.u, s.v, s.rel_lon, s.rel_lat, s.length_km, s.road_class)?;
    }
    w.flush()?;

    let mut w = create(dir, OD)?;
    writeln!(w, "level,origin_id,dest_id,flow")?;
    for f in ds.community_flows.iter().chain(&ds.region_flows) {
        writeln!(w, "{},{},{},{}", f.level, f.origin, f.dest, f.flow)?;
    }
    w.flush()?;

    let mut w = create(dir, LABELS)?;
    writeln!(w, "region_id,emission_tco2")?;
    for (r, y) in &ds.labels {
        writeln!(w, "{r},{y}")?;
    }
    w.flush()?;

    let mut w = create(dir, ADJACENCY)?;
    writeln!(w, "region_a,region_b")?;
    for (a, b) in &ds.adjacency {
        writeln!(w, "{a},{b}")?;
    }
    w.flush()?;
    Ok(())
}
