//! Path-length similarity between road graphs.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{project_onto_segment, Point, VectorInstance};

/// Nodes closer than this (in the graph's units) are merged.
const MERGE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoadGraph {
    pub nodes: Vec<Point>,
    /// Undirected edges as node index pairs.
    pub edges: Vec<(usize, usize)>,
}

impl RoadGraph {
    /// Key points of every open instance become nodes and consecutive key
    /// points become edges. Coordinates are multiplied by `scale`.
    pub fn from_instances<'a>(instances: impl IntoIterator<Item = &'a VectorInstance>, scale: f64) -> RoadGraph {
        let mut g = RoadGraph::default();
        for v in instances.into_iter().filter(|v| !v.kind.is_closed()) {
            let ids: Vec<usize> = v.points.iter().map(|p| g.node(*p * scale)).collect();
            for w in ids.windows(2) {
                g.add_edge(w[0], w[1]);
            }
        }
        g
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&mut self, p: Point) -> usize {
        if let Some(i) = self.nodes.iter().position(|q| q.dist(p) <= MERGE_EPS) {
            return i;
        }
        self.nodes.push(p);
        self.nodes.len() - 1
    }

    fn add_edge(&mut self, a: usize, b: usize) {
        if a != b && !self.edges.iter().any(|&(u, v)| (u, v) == (a, b) || (u, v) == (b, a)) {
            self.edges.push((a, b));
        }
    }

    fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            let w = self.nodes[a].dist(self.nodes[b]);
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        adj
    }

    /// Node at the closest point of the graph to `p` if it lies within
    /// `radius`; edges are split to create it when needed.
    fn snap(&mut self, p: Point, radius: f64) -> Option<usize> {
        let mut best: Option<(f64, Option<(usize, f64)>, usize)> = None;
        for (i, q) in self.nodes.iter().enumerate() {
            let d = q.dist(p);
            if best.is_none_or(|b| d < b.0) {
                best = Some((d, None, i));
            }
        }
        for (k, &(a, b)) in self.edges.iter().enumerate() {
            let (t, d2) = project_onto_segment(p, self.nodes[a], self.nodes[b]);
            let d = d2.sqrt();
            if best.is_none_or(|x| d < x.0) {
                best = Some((d, Some((k, t)), a));
            }
        }
        let (d, on_edge, node) = best?;
        if d > radius {
            return None;
        }
        let Some((k, t)) = on_edge else {
            return Some(node);
        };
        let (a, b) = self.edges[k];
        let q = self.nodes[a].lerp(self.nodes[b], t);
        if let Some(i) = self.nodes.iter().position(|n| n.dist(q) <= MERGE_EPS) {
            return Some(i);
        }
        self.nodes.push(q);
        let id = self.nodes.len() - 1;
        self.edges[k] = (a, id);
        self.edges.push((id, b));
        Some(id)
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

fn shortest_paths(adj: &[Vec<(usize, f64)>], src: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    dist[src] = 0.0;
    let mut heap = BinaryHeap::from([Entry(0.0, src)]);
    while let Some(Entry(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Entry(nd, v));
            }
        }
    }
    dist
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AplsOptions {
    /// Snap radius in the graphs' units.
    pub snap_radius: f64,
    /// All connected node pairs are used when there are at most this many;
    /// otherwise this many are drawn.
    pub max_pairs: usize,
    pub seed: u64,
}

impl Default for AplsOptions {
    fn default() -> Self {
        AplsOptions {
            snap_radius: 10.0,
            max_pairs: 200,
            seed: 0,
        }
    }
}

/// `1 − mean penalty` for paths of `from` reproduced in `to`.
fn one_way(from: &RoadGraph, to: &RoadGraph, opts: &AplsOptions) -> f64 {
    let adj = from.adjacency();
    let mut pairs = Vec::new();
    let mut dist_from = Vec::with_capacity(from.nodes.len());
    for a in 0..from.nodes.len() {
        let d = shortest_paths(&adj, a);
        for b in a + 1..from.nodes.len() {
            if d[b].is_finite() && d[b] > 0.0 {
                pairs.push((a, b));
            }
        }
        dist_from.push(d);
    }
    if pairs.is_empty() {
        return 1.0;
    }
    if pairs.len() > opts.max_pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        pairs.shuffle(&mut rng);
        pairs.truncate(opts.max_pairs);
    }
    let mut target = to.clone();
    let snapped: Vec<Option<usize>> = from.nodes.iter().map(|&p| target.snap(p, opts.snap_radius)).collect();
    let adj_to = target.adjacency();
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; target.nodes.len()];
    let mut penalty = 0.0;
    for &(a, b) in &pairs {
        let l = dist_from[a][b];
        penalty += match (snapped[a], snapped[b]) {
            (Some(sa), Some(sb)) => {
                let d = cache[sa].get_or_insert_with(|| shortest_paths(&adj_to, sa));
                let l2 = d[sb];
                if l2.is_finite() {
                    ((l - l2).abs() / l).min(1.0)
                } else {
                    1.0
                }
            }
            _ => 1.0,
        };
    }
    1.0 - penalty / pairs.len() as f64
}

/// Harmonic mean of the two one-way scores. Two empty graphs score 1; one
/// empty graph scores 0.
pub fn apls(pred: &RoadGraph, gt: &RoadGraph, opts: &AplsOptions) -> f64 {
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let a = one_way(gt, pred, opts);
    let b = one_way(pred, gt, opts);
    if a + b <= 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StructureKind;
    use crate::scene_io::{generate_scenes, GenParams};

    fn line(points: &[(f64, f64)]) -> VectorInstance {
        VectorInstance::new(1, 1, StructureKind::Polyline, points.iter().map(|&p| p.into()).collect())
    }

    #[test]
    fn examples() {
        let gt = RoadGraph::from_instances(&[line(&[(10.0, 10.0), (90.0, 10.0)])], 1.0);
        assert_eq!(apls(&gt, &gt, &AplsOptions::default()), 1.0);
        assert_eq!(apls(&RoadGraph::default(), &gt, &AplsOptions::default()), 0.0);
        assert_eq!(apls(&RoadGraph::default(), &RoadGraph::default(), &AplsOptions::default()), 1.0);
        let split = RoadGraph::from_instances(&[line(&[(10.0, 10.0), (50.0, 10.0), (90.0, 10.0)])], 1.0);
        assert!((apls(&split, &gt, &AplsOptions::default()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn broken_road_is_penalized() {
        let gt = RoadGraph::from_instances(&[line(&[(10.0, 10.0), (50.0, 10.0), (90.0, 10.0)])], 1.0);
        let gap = RoadGraph::from_instances(&[line(&[(10.0, 10.0), (40.0, 10.0)]), line(&[(60.0, 10.0), (90.0, 10.0)])], 1.0);
        let s = apls(&gap, &gt, &AplsOptions::default());
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn generated_graphs_score_one_against_themselves() {
        let scenes = generate_scenes(&GenParams {
            seed: 4,
            n_scenes: 5,
            ..GenParams::default()
        })
        .unwrap();
        for s in &scenes {
            let g = RoadGraph::from_instances(&s.instances, s.raster_size as f64);
            let v = apls(&g, &g, &AplsOptions::default());
            assert!((0.0..=1.0).contains(&v));
            assert!((v - 1.0).abs() < 1e-9, "{v}");
        }
    }
}
