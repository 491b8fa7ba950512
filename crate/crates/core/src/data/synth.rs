//! Desk-scale synthetic world: regions on a grid, each with a perturbed grid
//! road network, gravity-model commuting flows and routed emission labels.

use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::oracle::{oracle_emission, representative, ClassProfile};
use super::{Connector, DataError, Dataset, Result};
use crate::graph::{build_road_graph, Hierarchy, Intersection, Level, ODFlow, RegionId, RoadClass, RoadGraph, Segment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_regions: usize,
    /// Intersections per side of each region's grid.
    pub grid_side: usize,
    pub communities: usize,
    pub gravity_exponent: f64,
    /// Destinations kept per region for inter-region commuting.
    pub inter_region_destinations: usize,
    pub profile: ClassProfile,
    /// Standard deviation of the multiplicative lognormal label noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_regions: 8,
            grid_side: 6,
            communities: 4,
            gravity_exponent: 2.0,
            inter_region_destinations: 3,
            profile: ClassProfile::default(),
            noise_std: 0.1,
            seed: 0,
        }
    }
}

const MAX_ATTEMPTS: usize = 10;
/// Annual commuting trips per resident.
const TRIP_RATE: f64 = 500.0;
/// Distance between neighbouring region centres.
const REGION_PITCH_KM: f64 = 12.0;

impl SynthParams {
    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_regions == 0 || self.grid_side < 2 || self.communities == 0 || self.inter_region_destinations == 0 {
            problems.push("region count, community count and destinations must be at least 1, grid side at least 2".to_string());
        }
        if self.grid_side * self.grid_side >= 10_000 || self.communities >= 100 {
            problems.push("grid side must stay below 100 and communities below 100".to_string());
        }
        let (bx, by) = blocks(self.communities);
        if bx > self.grid_side || by > self.grid_side {
            problems.push(format!("{} communities do not fit a {}x{} grid", self.communities, self.grid_side, self.grid_side));
        }
        if !(self.noise_std >= 0.0) || !(self.gravity_exponent >= 0.0) {
            problems.push("noise_std and gravity_exponent must be non-negative".to_string());
        }
        if self.n_regions == 1 && self.communities == 1 {
            problems.push("a single region with a single community has no trips".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DataError::Synth(problems.join("; ")))
        }
    }
}

/// Block layout `(columns, rows)` closest to square with `columns * rows = k`.
fn blocks(k: usize) -> (usize, usize) {
    let mut rows = (k as f64).sqrt().floor() as usize;
    while rows > 1 && k % rows != 0 {
        rows -= 1;
    }
    (k / rows.max(1), rows.max(1))
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

struct RegionPlan {
    id: RegionId,
    cell: (usize, usize),
    urbanization: f64,
    span_km: f64,
    graph: RoadGraph,
    community_of: Vec<usize>,
    community_pop: Vec<f64>,
}

impl RegionPlan {
    fn node_id(&self, x: usize, y: usize, side: usize) -> u64 {
        self.id * 10_000 + (y * side + x) as u64
    }

    fn community_id(&self, c: usize) -> u64 {
        self.id * 100 + c as u64
    }

    fn population(&self) -> f64 {
        self.community_pop.iter().sum()
    }
}

fn connected(n: usize, edges: &[(usize, usize)], alive: &[bool]) -> bool {
    let mut adj = vec![Vec::new(); n];
    for (&(u, v), _) in edges.iter().zip(alive).filter(|(_, a)| **a) {
        adj[u].push(v);
        adj[v].push(u);
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

/// Number of (source, target) shortest paths by length that use each edge,
/// one path per pair.
fn edge_usage(n: usize, edges: &[(usize, usize)], lengths: &[f64]) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for (k, &(u, v)) in edges.iter().enumerate() {
        adj[u].push((v, k));
        adj[v].push((u, k));
    }
    let mut usage = vec![0; edges.len()];
    for s in 0..n {
        let mut dist = vec![f64::INFINITY; n];
        let mut via = vec![usize::MAX; n];
        let mut order = Vec::with_capacity(n);
        let mut done = vec![false; n];
        dist[s] = 0.0;
        let mut heap = BinaryHeap::from([(std::cmp::Reverse(0u64), s)]);
        while let Some((_, u)) = heap.pop() {
            if done[u] {
                continue;
            }
            done[u] = true;
            order.push(u);
            for &(v, k) in &adj[u] {
                let d = dist[u] + lengths[k];
                if d < dist[v] {
                    dist[v] = d;
                    via[v] = k;
                    // non-negative floats order like their bit patterns
                    heap.push((std::cmp::Reverse(d.to_bits()), v));
                }
            }
        }
        let mut below = vec![1usize; n];
        for &v in order.iter().rev().filter(|&&v| v != s) {
            let k = via[v];
            usage[k] += below[v];
            let parent = if edges[k].0 == v { edges[k].1 } else { edges[k].0 };
            below[parent] += below[v];
        }
    }
    usage
}

fn build_region(p: &SynthParams, id: RegionId, cell: (usize, usize), rng: &mut ChaCha8Rng) -> Result<RegionPlan> {
    let side = p.grid_side;
    let n = side * side;
    let (bx, by) = blocks(p.communities);
    let urbanization: f64 = rng.random_range(0.0..1.0);
    let span_km = lerp(16.0, 4.0, urbanization);
    let community_of: Vec<usize> = (0..n).map(|i| (i / side) * by / side * bx + (i % side) * bx / side).collect();
    let local_urban: Vec<f64> = (0..p.communities)
        .map(|_| (urbanization + 0.15 * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0))
        .collect();

    let spacing = 1.0 / (side - 1) as f64;
    let pos: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let (x, y) = ((i % side) as f64, (i / side) as f64);
            let jx = rng.random_range(-0.15..0.15);
            let jy = rng.random_range(-0.15..0.15);
            (((x + jx) * spacing).clamp(0.0, 1.0), ((y + jy) * spacing).clamp(0.0, 1.0))
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        if i % side + 1 < side {
            edges.push((i, i + 1));
        }
        if i + side < n {
            edges.push((i, i + side));
        }
    }

    let mut alive = None;
    for attempt in 1..=MAX_ATTEMPTS {
        let mut keep = vec![true; edges.len()];
        let mut order: Vec<usize> = (0..edges.len()).collect();
        order.shuffle(rng);
        for k in order {
            let drop_p = lerp(0.4, 0.05, local_urban[community_of[edges[k].0]]);
            if rng.random_bool(drop_p) {
                keep[k] = false;
                if !connected(n, &edges, &keep) {
                    keep[k] = true;
                }
            }
        }
        if connected(n, &edges, &keep) {
            alive = Some(keep);
            break;
        }
        log::debug!("region {id}: attempt {attempt} produced a disconnected network");
    }
    let alive = alive.ok_or_else(|| DataError::Synth(format!("region {id} stayed disconnected after {MAX_ATTEMPTS} attempts")))?;
    let edges: Vec<(usize, usize)> = edges.into_iter().zip(alive).filter(|(_, a)| *a).map(|(e, _)| e).collect();

    let lengths: Vec<f64> = edges
        .iter()
        .map(|&(u, v)| {
            let d = (pos[u].0 - pos[v].0).hypot(pos[u].1 - pos[v].1);
            d * span_km * rng.random_range(1.0..1.25)
        })
        .collect();
    let usage = edge_usage(n, &edges, &lengths);
    let mut ranked: Vec<usize> = (0..edges.len()).collect();
    ranked.sort_by(|&a, &b| usage[b].cmp(&usage[a]).then(a.cmp(&b)));
    let m = edges.len() as f64;
    let mut class = vec![RoadClass::Residential; edges.len()];
    for (rank, &k) in ranked.iter().enumerate() {
        let q = rank as f64 / m;
        class[k] = if q < 0.1 {
            RoadClass::Motorway
        } else if q < 0.3 {
            RoadClass::Primary
        } else if q < 0.6 {
            RoadClass::Secondary
        } else if rng.random_bool(0.1) {
            RoadClass::Other
        } else {
            RoadClass::Residential
        };
    }

    let node_id = |i: usize| id * 10_000 + i as u64;
    let intersections = (0..n).map(|i| Intersection { id: node_id(i), rel_lon: pos[i].0, rel_lat: pos[i].1 }).collect();
    let segments = edges
        .iter()
        .zip(&lengths)
        .zip(&class)
        .map(|((&(u, v), &len), &c)| Segment {
            u: node_id(u),
            v: node_id(v),
            rel_lon: 0.5 * (pos[u].0 + pos[v].0),
            rel_lat: 0.5 * (pos[u].1 + pos[v].1),
            length_km: len,
            road_class: c,
        })
        .collect();
    let graph = build_road_graph(id, intersections, segments)?;

    let mut members = vec![0usize; p.communities];
    community_of.iter().for_each(|&c| members[c] += 1);
    let mean_members = n as f64 / p.communities as f64;
    let community_pop = (0..p.communities)
        .map(|c| {
            let noise: f64 = rng.sample(StandardNormal);
            2000.0 * (2.5 * local_urban[c]).exp() * members[c] as f64 / mean_members * (0.1 * noise).exp()
        })
        .collect();
    Ok(RegionPlan { id, cell, urbanization, span_km, graph, community_of, community_pop })
}

/// Production-constrained gravity split of `total` trips over `(weight, distance_km)` destinations.
fn gravity(total: f64, dests: &[(f64, f64)], gamma: f64) -> Vec<f64> {
    let w: Vec<f64> = dests.iter().map(|&(pop, d)| pop / d.max(0.5).powf(gamma)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| total * x / s).collect()
}

/// Generates a dataset whose labels are [`oracle_emission`] values times
/// `exp(noise_std · z)`, `z` standard normal.
pub fn generate_synthetic(p: &SynthParams) -> Result<Dataset> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let side = p.grid_side;
    let cols = (p.n_regions as f64).sqrt().ceil() as usize;
    let plans = (0..p.n_regions)
        .map(|r| build_region(p, r as RegionId, (r % cols, r / cols), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let by_cell: HashMap<(usize, usize), usize> = plans.iter().enumerate().map(|(i, r)| (r.cell, i)).collect();

    // adjacency and connector segments between grid neighbours
    let mut adjacency = Vec::new();
    let mut connectors = Vec::new();
    let mid = side / 2;
    for (i, a) in plans.iter().enumerate() {
        for (dx, dy) in [(1, 0), (0, 1)] {
            let Some(&j) = by_cell.get(&(a.cell.0 + dx, a.cell.1 + dy)) else { continue };
            let b = &plans[j];
            let (ua, vb) = if dx == 1 { ((side - 1, mid), (0, mid)) } else { ((mid, side - 1), (mid, 0)) };
            let u = a.node_id(ua.0, ua.1, side);
            let v = b.node_id(vb.0, vb.1, side);
            let pa = a.graph.intersections()[a.graph.position(u).unwrap()];
            let step = 0.5 * (a.span_km + b.span_km) / (side - 1) as f64;
            connectors.push(Connector {
                region_a: a.id,
                region_b: b.id,
                segment: Segment {
                    u,
                    v,
                    rel_lon: pa.rel_lon,
                    rel_lat: pa.rel_lat,
                    length_km: step * rng.random_range(1.0..1.25),
                    road_class: RoadClass::Motorway,
                },
            });
            adjacency.push((plans[i].id, b.id));
        }
    }

    let outward = |u: f64| lerp(0.45, 0.15, u);
    let mut community_flows = Vec::new();
    for r in &plans {
        let g = &r.graph;
        let centroid: Vec<(f64, f64)> = (0..p.communities)
            .map(|c| {
                let members: Vec<usize> = (0..g.node_count()).filter(|&i| r.community_of[i] == c).collect();
                let rep = g.intersections()[representative(g, &members)];
                (rep.rel_lon, rep.rel_lat)
            })
            .collect();
        for a in 0..p.communities {
            let dests: Vec<usize> = (0..p.communities).filter(|&b| b != a).collect();
            if dests.is_empty() {
                continue;
            }
            let total = TRIP_RATE * r.community_pop[a] * (1.0 - outward(r.urbanization));
            let weights: Vec<(f64, f64)> = dests
                .iter()
                .map(|&b| {
                    let d = (centroid[a].0 - centroid[b].0).hypot(centroid[a].1 - centroid[b].1) * r.span_km;
                    (r.community_pop[b], d)
                })
                .collect();
            for (&b, f) in dests.iter().zip(gravity(total, &weights, p.gravity_exponent)) {
                community_flows.push(ODFlow { level: Level::Community, origin: r.community_id(a), dest: r.community_id(b), flow: f });
            }
        }
    }

    let mut region_flows = Vec::new();
    for a in &plans {
        let mut dests: Vec<(f64, usize)> = plans
            .iter()
            .enumerate()
            .filter(|(_, b)| b.id != a.id)
            .map(|(j, b)| {
                let d = ((a.cell.0 as f64 - b.cell.0 as f64).hypot(a.cell.1 as f64 - b.cell.1 as f64)) * REGION_PITCH_KM;
                (b.population() / d.powf(p.gravity_exponent), j)
            })
            .collect();
        dests.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        dests.truncate(p.inter_region_destinations);
        dests.sort_by_key(|&(_, j)| j);
        let total = TRIP_RATE * a.population() * outward(a.urbanization);
        let s: f64 = dests.iter().map(|d| d.0).sum();
        for &(w, j) in &dests {
            region_flows.push(ODFlow { level: Level::Region, origin: a.id, dest: plans[j].id, flow: total * w / s });
        }
    }

    let node_to_community = plans
        .iter()
        .flat_map(|r| r.graph.intersections().iter().enumerate().map(move |(i, n)| (n.id, r.community_id(r.community_of[i]))))
        .collect();
    let community_to_region = plans
        .iter()
        .flat_map(|r| (0..p.communities).map(move |c| (r.community_id(c), r.id)))
        .collect();
    let mut ds = Dataset {
        roads: plans.into_iter().map(|r| (r.id, r.graph)).collect(),
        connectors,
        hierarchy: Hierarchy::new(node_to_community, community_to_region)?,
        community_flows,
        region_flows,
        adjacency,
        labels: BTreeMap::new(),
    };
    let oracle = oracle_emission(&ds, &p.profile);
    for (r, e) in oracle {
        if !(e > 0.0) {
            return Err(DataError::Synth(format!("region {r} has zero emission")));
        }
        let z: f64 = rng.sample(StandardNormal);
        let noise = if p.noise_std == 0.0 { 1.0 } else { (p.noise_std * z).exp() };
        ds.labels.insert(r, e * noise);
    }
    let problems = ds.problems();
    if !problems.is_empty() {
        return Err(DataError::Invalid(problems));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, write_dataset};
    use proptest::prelude::*;

    fn small(seed: u64) -> SynthParams {
        SynthParams { n_regions: 4, grid_side: 5, communities: 2, seed, ..SynthParams::default() }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let p = SynthParams { n_regions: 2, seed: 7, ..SynthParams::default() };
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        write_dataset(&generate_synthetic(&p).unwrap(), &a).unwrap();
        write_dataset(&generate_synthetic(&p).unwrap(), &b).unwrap();
        for f in ["nodes.csv", "edges.csv", "od.csv", "labels.csv", "region_adjacency.csv"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn noiseless_labels_equal_oracle() {
        let p = SynthParams { noise_std: 0.0, ..small(3) };
        let ds = generate_synthetic(&p).unwrap();
        assert_eq!(ds.labels, oracle_emission(&ds, &p.profile));
    }

    #[test]
    fn output_reloads_equal() {
        let ds = generate_synthetic(&small(5)).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        write_dataset(&ds, tmp.path()).unwrap();
        assert_eq!(load_dataset(tmp.path()).unwrap(), ds);
    }

    #[test]
    fn structure_matches_parameters() {
        let ds = generate_synthetic(&small(9)).unwrap();
        assert_eq!(ds.regions(), vec![0, 1, 2, 3]);
        // 2x2 region grid
        assert_eq!(ds.adjacency.len(), 4);
        assert_eq!(ds.connectors.len(), 4);
        assert_eq!(ds.region_flows.len(), 4 * 3);
        for r in ds.regions() {
            assert_eq!(ds.hierarchy.communities(r).len(), 2);
            assert_eq!(ds.roads[&r].node_count(), 25);
        }
        let classes: std::collections::BTreeSet<_> =
            ds.roads.values().flat_map(|g| g.segments().iter().map(|s| s.road_class)).collect();
        assert!(classes.contains(&RoadClass::Motorway) && classes.contains(&RoadClass::Residential));
    }

    #[test]
    fn block_layout() {
        assert_eq!(blocks(1), (1, 1));
        assert_eq!(blocks(2), (2, 1));
        assert_eq!(blocks(4), (2, 2));
        assert_eq!(blocks(6), (3, 2));
        assert_eq!(blocks(7), (7, 1));
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(generate_synthetic(&SynthParams { n_regions: 0, ..small(0) }).is_err());
        assert!(generate_synthetic(&SynthParams { grid_side: 1, ..small(0) }).is_err());
        assert!(generate_synthetic(&SynthParams { communities: 9, grid_side: 2, ..small(0) }).is_err());
        assert!(generate_synthetic(&SynthParams { noise_std: -1.0, ..small(0) }).is_err());
    }

    #[test]
    fn usage_counts_on_a_path() {
        // 0 - 1 - 2: the middle node splits pairs; each edge carries 2 * 2 ordered pairs
        assert_eq!(edge_usage(3, &[(0, 1), (1, 2)], &[1.0, 1.0]), vec![4, 4]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn every_road_graph_is_connected(seed in 0u64..10_000, side in 2usize..7, communities in 1usize..5) {
            prop_assume!(blocks(communities).0 <= side && blocks(communities).1 <= side);
            let p = SynthParams { n_regions: 3, grid_side: side, communities, seed, ..SynthParams::default() };
            let ds = generate_synthetic(&p).unwrap();
            for g in ds.roads.values() {
                prop_assert!(g.is_connected());
            }
            prop_assert!(ds.labels.values().all(|&y| y > 0.0));
        }
    }
}
