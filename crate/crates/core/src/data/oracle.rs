use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::graph::{NodeId, ODFlow, RegionId, RoadClass, RoadGraph};

/// Free-flow speed and per-kilometre emission of each road class, indexed by
/// [`RoadClass::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub speed_kmh: [f64; RoadClass::COUNT],
    /// Tonnes of CO₂ per vehicle-kilometre.
    pub emission_t_per_km: [f64; RoadClass::COUNT],
}

impl Default for ClassProfile {
    fn default() -> Self {
        Self {
            speed_kmh: [100.0, 70.0, 50.0, 30.0, 40.0],
            emission_t_per_km: [1.6e-4, 1.8e-4, 2.0e-4, 2.4e-4, 2.2e-4],
        }
    }
}

impl ClassProfile {
    fn worst_factor(&self) -> f64 {
        self.emission_t_per_km.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy)]
struct Arc {
    to: usize,
    time: f64,
    emission: f64,
}

/// All regions' road graphs plus connectors as one routable network.
pub(crate) struct Network {
    adj: Vec<Vec<Arc>>,
    index: HashMap<NodeId, usize>,
    pos: Vec<(f64, f64)>,
    region: Vec<RegionId>,
    scale: HashMap<RegionId, f64>,
}

/// Kilometres per unit of relative coordinate, estimated from the segments.
fn km_scale(g: &RoadGraph) -> f64 {
    let (mut km, mut rel) = (0.0, 0.0);
    for s in g.segments() {
        let (a, b) = (g.intersections()[g.position(s.u).unwrap()], g.intersections()[g.position(s.v).unwrap()]);
        km += s.length_km;
        rel += (a.rel_lon - b.rel_lon).hypot(a.rel_lat - b.rel_lat);
    }
    if rel > 0.0 {
        km / rel
    } else {
        1.0
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    // min-heap on time, ties on node index
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Network {
    pub(crate) fn new(ds: &Dataset, profile: &ClassProfile) -> Self {
        let mut net = Network { adj: Vec::new(), index: HashMap::new(), pos: Vec::new(), region: Vec::new(), scale: HashMap::new() };
        for (&r, g) in &ds.roads {
            for n in g.intersections() {
                net.index.insert(n.id, net.adj.len());
                net.adj.push(Vec::new());
                net.pos.push((n.rel_lon, n.rel_lat));
                net.region.push(r);
            }
            net.scale.insert(r, km_scale(g));
        }
        let segments = ds.roads.values().flat_map(|g| g.segments()).chain(ds.connectors.iter().map(|c| &c.segment));
        for s in segments {
            let c = s.road_class.index();
            let time = s.length_km / profile.speed_kmh[c];
            let emission = s.length_km * profile.emission_t_per_km[c];
            let (u, v) = (net.index[&s.u], net.index[&s.v]);
            net.adj[u].push(Arc { to: v, time, emission });
            net.adj[v].push(Arc { to: u, time, emission });
        }
        net
    }

    /// Emission per unit flow of the fastest path from `source` to each of
    /// `targets`; `None` where unreachable. Stops once every target is settled.
    pub(crate) fn route(&self, source: usize, targets: &[usize]) -> Vec<Option<f64>> {
        let n = self.adj.len();
        let mut time = vec![f64::INFINITY; n];
        let mut emission = vec![0.0; n];
        let mut done = vec![false; n];
        let mut is_target = vec![false; n];
        targets.iter().for_each(|&t| is_target[t] = true);
        is_target[source] = false;
        let mut wanted = is_target.iter().filter(|&&t| t).count();
        if wanted == 0 {
            return targets.iter().map(|_| Some(0.0)).collect();
        }
        time[source] = 0.0;
        let mut heap = BinaryHeap::from([Entry(0.0, source)]);
        while let Some(Entry(t, u)) = heap.pop() {
            if done[u] {
                continue;
            }
            done[u] = true;
            if is_target[u] {
                wanted -= 1;
                if wanted == 0 {
                    break;
                }
            }
            for a in &self.adj[u] {
                let nt = t + a.time;
                if nt < time[a.to] {
                    time[a.to] = nt;
                    emission[a.to] = emission[u] + a.emission;
                    heap.push(Entry(nt, a.to));
                }
            }
        }
        targets.iter().map(|&t| done[t].then_some(emission[t])).collect()
    }

    fn fallback(&self, a: usize, b: usize, worst: f64) -> f64 {
        let (ra, rb) = (self.region[a], self.region[b]);
        let km = if ra == rb {
            let (pa, pb) = (self.pos[a], self.pos[b]);
            (pa.0 - pb.0).hypot(pa.1 - pb.1) * self.scale[&ra]
        } else {
            0.5 * (self.scale[&ra] + self.scale[&rb])
        };
        km * worst
    }
}

/// The intersection closest to the centroid of `nodes` (first wins ties).
pub(crate) fn representative(g: &RoadGraph, nodes: &[usize]) -> usize {
    let pts: Vec<(f64, f64)> = nodes.iter().map(|&i| (g.intersections()[i].rel_lon, g.intersections()[i].rel_lat)).collect();
    let k = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let mut best = (f64::INFINITY, nodes[0]);
    for (&i, p) in nodes.iter().zip(&pts) {
        let d = (p.0 - cx).hypot(p.1 - cy);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Routing-based emission per region.
///
/// Every flow is routed from the origin's representative intersection to the
/// destination's along the fastest path (length over class speed), and
/// contributes `flow × Σ length × class factor`. Community flows count fully
/// towards their region; region flows count half to each endpoint. Pairs with
/// no route fall back to straight-line distance at the worst class factor.
pub fn oracle_emission(ds: &Dataset, profile: &ClassProfile) -> BTreeMap<RegionId, f64> {
    let net = Network::new(ds, profile);
    let worst = profile.worst_factor();
    let mut reps: HashMap<(bool, u64), usize> = HashMap::new();
    for (&r, g) in &ds.roads {
        let all: Vec<usize> = (0..g.node_count()).collect();
        reps.insert((false, r), net.index[&g.intersections()[representative(g, &all)].id]);
        for &c in ds.hierarchy.communities(r) {
            let members: Vec<usize> = (0..g.node_count())
                .filter(|&i| ds.hierarchy.community_of(g.intersections()[i].id) == Some(c))
                .collect();
            reps.insert((true, c), net.index[&g.intersections()[representative(g, &members)].id]);
        }
    }

    let mut totals: BTreeMap<RegionId, f64> = ds.roads.keys().map(|&r| (r, 0.0)).collect();
    let add = |flows: &[ODFlow], community: bool, totals: &mut BTreeMap<RegionId, f64>| {
        let mut by_source: BTreeMap<usize, Vec<&ODFlow>> = BTreeMap::new();
        for f in flows.iter().filter(|f| f.flow > 0.0) {
            by_source.entry(reps[&(community, f.origin)]).or_default().push(f);
        }
        for (source, group) in by_source {
            let targets: Vec<usize> = group.iter().map(|f| reps[&(community, f.dest)]).collect();
            let per_unit = net.route(source, &targets);
            for ((f, &t), e) in group.iter().zip(&targets).zip(per_unit) {
                let e = e.unwrap_or_else(|| {
                    log::warn!("no route from {} to {}; using straight-line distance", f.origin, f.dest);
                    net.fallback(source, t, worst)
                });
                let amount = f.flow * e;
                if community {
                    let r = ds.hierarchy.region_of_community(f.origin).expect("validated flow");
                    *totals.get_mut(&r).unwrap() += amount;
                } else {
                    *totals.get_mut(&f.origin).unwrap() += 0.5 * amount;
                    *totals.get_mut(&f.dest).unwrap() += 0.5 * amount;
                }
            }
        }
    };
    add(&ds.community_flows, true, &mut totals);
    add(&ds.region_flows, false, &mut totals);
    totals
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_road_graph, Hierarchy, Intersection, Level, Segment};
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn node(id: u64, x: f64, y: f64) -> Intersection {
        Intersection { id, rel_lon: x, rel_lat: y }
    }

    fn seg(u: u64, v: u64, km: f64, class: RoadClass) -> Segment {
        Segment { u, v, rel_lon: 0.5, rel_lat: 0.5, length_km: km, road_class: class }
    }

    /// Single region; each node is its own community `100 + id`.
    fn one_region(nodes: Vec<Intersection>, segments: Vec<Segment>, flows: Vec<ODFlow>) -> Dataset {
        let n2c = nodes.iter().map(|n| (n.id, 100 + n.id)).collect();
        let c2r = nodes.iter().map(|n| (100 + n.id, 1)).collect();
        Dataset {
            roads: BTreeMap::from([(1, build_road_graph(1, nodes, segments).unwrap())]),
            connectors: Vec::new(),
            hierarchy: Hierarchy::new(n2c, c2r).unwrap(),
            community_flows: flows,
            region_flows: Vec::new(),
            adjacency: Vec::new(),
            labels: BTreeMap::new(),
        }
    }

    fn flow(o: u64, d: u64, f: f64) -> ODFlow {
        ODFlow { level: Level::Community, origin: 100 + o, dest: 100 + d, flow: f }
    }

    #[test]
    fn one_road_arithmetic() {
        let ds = one_region(
            vec![node(0, 0.0, 0.0), node(1, 1.0, 0.0)],
            vec![seg(0, 1, 2.0, RoadClass::Primary)],
            vec![flow(0, 1, 1.0)],
        );
        let mut profile = ClassProfile::default();
        profile.emission_t_per_km[RoadClass::Primary.index()] = 0.2;
        let e = oracle_emission(&ds, &profile);
        assert!((e[&1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn prefers_faster_route() {
        // direct residential 3 km (6 min) versus 4 km of motorway via node 2 (2.4 min)
        let ds = one_region(
            vec![node(0, 0.0, 0.0), node(1, 1.0, 0.0), node(2, 0.5, 1.0)],
            vec![
                seg(0, 1, 3.0, RoadClass::Residential),
                seg(0, 2, 2.0, RoadClass::Motorway),
                seg(2, 1, 2.0, RoadClass::Motorway),
            ],
            vec![flow(0, 1, 10.0)],
        );
        let p = ClassProfile::default();
        let expected = 10.0 * 4.0 * p.emission_t_per_km[0];
        assert!((oracle_emission(&ds, &p)[&1] - expected).abs() < 1e-15);
    }

    #[test]
    fn unreachable_pair_uses_straight_line() {
        let ds = one_region(
            vec![node(0, 0.0, 0.0), node(1, 1.0, 0.0), node(2, 0.0, 1.0), node(3, 1.0, 1.0)],
            vec![seg(0, 1, 2.0, RoadClass::Primary), seg(2, 3, 2.0, RoadClass::Primary)],
            vec![flow(0, 2, 1.0)],
        );
        let p = ClassProfile::default();
        // scale = 2 km per unit, distance 1 unit
        assert!((oracle_emission(&ds, &p)[&1] - 2.0 * p.worst_factor()).abs() < 1e-15);
    }

    #[test]
    fn region_flows_split_evenly() {
        let mk = |r: u64, base: u64| {
            build_road_graph(r, vec![node(base, 0.5, 0.5)], vec![]).unwrap()
        };
        let ds = Dataset {
            roads: BTreeMap::from([(1, mk(1, 10)), (2, mk(2, 20))]),
            connectors: vec![crate::data::Connector { region_a: 1, region_b: 2, segment: seg(10, 20, 5.0, RoadClass::Motorway) }],
            hierarchy: Hierarchy::new([(10, 1), (20, 2)].into(), [(1, 1), (2, 2)].into()).unwrap(),
            community_flows: Vec::new(),
            region_flows: vec![ODFlow { level: Level::Region, origin: 1, dest: 2, flow: 4.0 }],
            adjacency: vec![(1, 2)],
            labels: BTreeMap::new(),
        };
        let p = ClassProfile::default();
        let e = oracle_emission(&ds, &p);
        let whole = 4.0 * 5.0 * p.emission_t_per_km[0];
        assert_eq!(e[&1], 0.5 * whole);
        assert_eq!(e[&2], 0.5 * whole);
    }

    /// Minimum-time simple path by exhaustive enumeration; returns its emission.
    fn brute_force(adj: &[Vec<Arc>], s: usize, t: usize) -> Option<f64> {
        fn dfs(adj: &[Vec<Arc>], u: usize, t: usize, seen: &mut Vec<bool>, time: f64, em: f64, best: &mut Option<(f64, f64)>) {
            if u == t {
                if best.is_none_or(|(bt, _)| time < bt) {
                    *best = Some((time, em));
                }
                return;
            }
            for a in &adj[u] {
                if !seen[a.to] {
                    seen[a.to] = true;
                    dfs(adj, a.to, t, seen, time + a.time, em + a.emission, best);
                    seen[a.to] = false;
                }
            }
        }
        let mut seen = vec![false; adj.len()];
        seen[s] = true;
        let mut best = None;
        dfs(adj, s, t, &mut seen, 0.0, 0.0, &mut best);
        best.map(|b| b.1)
    }

    fn random_region(rng: &mut ChaCha8Rng, n: usize) -> Dataset {
        let nodes: Vec<_> = (0..n as u64).map(|i| node(i, rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))).collect();
        let mut segments = Vec::new();
        for u in 0..n as u64 {
            for v in u + 1..n as u64 {
                if rng.random_bool(0.4) {
                    let class = RoadClass::ALL[rng.random_range(0..RoadClass::COUNT)];
                    segments.push(seg(u, v, rng.random_range(0.1..3.0), class));
                }
            }
        }
        one_region(nodes, segments, Vec::new())
    }

    #[test]
    fn dijkstra_matches_exhaustive_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = ClassProfile::default();
        for _ in 0..40 {
            let n = rng.random_range(2..=8);
            let ds = random_region(&mut rng, n);
            let net = Network::new(&ds, &p);
            for s in 0..n {
                let all: Vec<usize> = (0..n).collect();
                let fast = net.route(s, &all);
                for t in 0..n {
                    let slow = if s == t { Some(0.0) } else { brute_force(&net.adj, s, t) };
                    match (fast[t], slow) {
                        (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
                        (a, b) => assert_eq!(a, b),
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn linear_and_monotone_in_flows(seed in 0u64..1000, scale in 0.1f64..10.0, extra in 0.1f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ds = random_region(&mut rng, 6);
            ds.community_flows = (0..4).map(|_| {
                let o = rng.random_range(0..6);
                flow(o, (o + rng.random_range(1..6)) % 6, rng.random_range(0.0..20.0))
            }).collect();
            let p = ClassProfile::default();
            let base = oracle_emission(&ds, &p)[&1];

            let mut scaled = ds.clone();
            scaled.community_flows.iter_mut().for_each(|f| f.flow *= scale);
            let s = oracle_emission(&scaled, &p)[&1];
            prop_assert!((s - scale * base).abs() <= 1e-9 * s.abs().max(1.0));

            let mut more = ds.clone();
            more.community_flows.push(flow(0, 5, extra));
            prop_assert!(oracle_emission(&more, &p)[&1] >= base);
        }
    }
}
