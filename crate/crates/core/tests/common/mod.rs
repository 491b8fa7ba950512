#![allow(dead_code)]

use std::collections::HashMap;

use hence::data::{Connector, Dataset};
use hence::graph::{build_road_graph, Hierarchy, Intersection, NodeId, Segment};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Same dataset with every intersection and community renamed by a seeded
/// permutation, intersections and segments reordered, segment endpoints
/// swapped at random and flow rows shuffled. Region ids are kept.
pub fn relabel(ds: &Dataset, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut node_map: HashMap<NodeId, NodeId> = HashMap::new();
    let mut community_map = HashMap::new();
    for &r in ds.roads.keys() {
        let g = &ds.roads[&r];
        let mut ids: Vec<NodeId> = g.intersections().iter().map(|n| n.id).collect();
        let mut targets = ids.clone();
        targets.shuffle(&mut rng);
        for (old, new) in ids.drain(..).zip(targets) {
            node_map.insert(old, new);
        }
        let mut cs = ds.hierarchy.communities(r).to_vec();
        let mut ct = cs.clone();
        ct.shuffle(&mut rng);
        for (old, new) in cs.drain(..).zip(ct) {
            community_map.insert(old, new);
        }
    }

    let mut roads = std::collections::BTreeMap::new();
    for (&r, g) in &ds.roads {
        let mut nodes: Vec<Intersection> = g.intersections().iter().map(|n| Intersection { id: node_map[&n.id], ..*n }).collect();
        nodes.shuffle(&mut rng);
        let mut segments: Vec<Segment> = g
            .segments()
            .iter()
            .map(|s| {
                let (u, v) = (node_map[&s.u], node_map[&s.v]);
                let (u, v) = if rng.random_bool(0.5) { (v, u) } else { (u, v) };
                Segment { u, v, ..*s }
            })
            .collect();
        segments.shuffle(&mut rng);
        roads.insert(r, build_road_graph(r, nodes, segments).expect("relabeled graph stays valid"));
    }
    let n2c = ds.hierarchy.node_to_community().iter().map(|(n, c)| (node_map[n], community_map[c])).collect();
    let c2r = ds.hierarchy.community_to_region().iter().map(|(c, r)| (community_map[c], *r)).collect();
    let mut community_flows: Vec<_> = ds
        .community_flows
        .iter()
        .map(|f| {
            let mut f = f.clone();
            f.origin = community_map[&f.origin];
            f.dest = community_map[&f.dest];
            f
        })
        .collect();
    community_flows.shuffle(&mut rng);
    let connectors = ds
        .connectors
        .iter()
        .map(|c| Connector { segment: Segment { u: node_map[&c.segment.u], v: node_map[&c.segment.v], ..c.segment }, ..*c })
        .collect();
    Dataset {
        roads,
        connectors,
        hierarchy: Hierarchy::new(n2c, c2r).expect("relabeled hierarchy stays valid"),
        community_flows,
        region_flows: ds.region_flows.clone(),
        adjacency: ds.adjacency.clone(),
        labels: ds.labels.clone(),
    }
}
