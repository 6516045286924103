//! Skeleton decomposition into nodes and voxel chains, pruning and the
//! vessel graph.

use serde::{Deserialize, Serialize};

use super::thin::is_simple;
use crate::morphology::{label_where, Connectivity};
use crate::volume::{BinaryVolume, Spacing};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    /// One skeleton neighbour.
    Endpoint,
    /// Three or more neighbours; adjacent junction voxels form one node.
    Junction,
    /// Designated voxel on a cycle that has no other node.
    Anchor,
    /// No skeleton neighbours.
    Isolated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub position: [usize; 3],
    pub kind: NodeKind,
    /// Every skeleton voxel represented by this node.
    #[serde(skip)]
    pub voxels: Vec<[usize; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub n1: usize,
    pub n2: usize,
    /// Ordered 26-connected chain, starting and ending on node voxels.
    pub path: Vec<[usize; 3]>,
    pub length_um: f64,
}

impl Edge {
    /// Chain voxels strictly between the two node voxels.
    pub fn interior(&self) -> &[[usize; 3]] {
        let n = self.path.len();
        if n <= 2 {
            &[]
        } else {
            &self.path[1..n - 1]
        }
    }

    pub fn is_loop(&self) -> bool {
        self.n1 == self.n2
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CenterlineGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl CenterlineGraph {
    /// Number of edge ends at each node (a loop counts twice).
    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.nodes.len()];
        for e in &self.edges {
            d[e.n1] += 1;
            d[e.n2] += 1;
        }
        d
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

/// Euclidean length of a voxel chain in physical units.
pub fn path_length(path: &[[usize; 3]], spacing: Spacing) -> f64 {
    path.windows(2)
        .map(|w| {
            (0..3)
                .map(|a| ((w[1][a] as f64 - w[0][a] as f64) * spacing[a]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

struct Neighbours<'a> {
    skel: &'a BinaryVolume,
}

impl Neighbours<'_> {
    fn of(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let [x, y, z] = self.skel.coords(i);
        Connectivity::TwentySix.offsets().iter().filter_map(move |d| {
            self.skel
                .checked_index(x as isize + d[0], y as isize + d[1], z as isize + d[2])
                .filter(|&j| self.skel.voxels()[j])
        })
    }
}

/// Splits the skeleton into nodes and the chains joining them.
pub fn build_graph(skel: &BinaryVolume, spacing: Spacing) -> CenterlineGraph {
    let nb = Neighbours { skel };
    let n = skel.len();
    let degree: Vec<u8> = (0..n)
        .map(|i| if skel.voxels()[i] { nb.of(i).count() as u8 } else { 0 })
        .collect();
    let is_node = |i: usize| skel.voxels()[i] && degree[i] != 2;

    // node id per voxel; junction voxels are merged by 26-adjacency
    const NONE: usize = usize::MAX;
    let mut node_of = vec![NONE; n];
    let mut nodes: Vec<Node> = Vec::new();
    let mut junction_vol = skel.map(|_| false);
    for i in 0..n {
        if skel.voxels()[i] && degree[i] >= 3 {
            junction_vol.voxels_mut()[i] = true;
        }
    }
    let (labels, sizes) = label_where(&junction_vol, Connectivity::TwentySix, |&b| b);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); sizes.len()];
    for i in 0..n {
        if labels[i] != 0 {
            members[labels[i] as usize - 1].push(i);
        }
    }
    let mut cluster_node = vec![NONE; sizes.len()];
    for i in 0..n {
        if !is_node(i) {
            continue;
        }
        let id = if labels[i] != 0 {
            let c = labels[i] as usize - 1;
            if cluster_node[c] == NONE {
                let m = &members[c];
                let coords: Vec<[usize; 3]> = m.iter().map(|&j| skel.coords(j)).collect();
                let centroid: Vec<f64> = (0..3)
                    .map(|a| coords.iter().map(|p| p[a] as f64).sum::<f64>() / coords.len() as f64)
                    .collect();
                let dist = |p: &[usize; 3]| (0..3).map(|a| (p[a] as f64 - centroid[a]).powi(2)).sum::<f64>();
                let rep = *coords
                    .iter()
                    .min_by(|a, b| dist(a).total_cmp(&dist(b)))
                    .expect("cluster is not empty");
                cluster_node[c] = nodes.len();
                nodes.push(Node {
                    id: nodes.len(),
                    position: rep,
                    kind: NodeKind::Junction,
                    voxels: coords,
                });
            }
            cluster_node[c]
        } else {
            let kind = if degree[i] == 1 { NodeKind::Endpoint } else { NodeKind::Isolated };
            nodes.push(Node {
                id: nodes.len(),
                position: skel.coords(i),
                kind,
                voxels: vec![skel.coords(i)],
            });
            nodes.len() - 1
        };
        node_of[i] = id;
    }

    let mut visited = vec![false; n];
    let mut edges = Vec::new();
    let walk = |start: usize, first: usize, visited: &mut [bool], node_of: &[usize]| -> (usize, Vec<usize>) {
        let mut path = vec![start, first];
        let (mut prev, mut cur) = (start, first);
        while node_of[cur] == NONE {
            visited[cur] = true;
            let next = nb.of(cur).find(|&j| j != prev && !(visited[j] && node_of[j] == NONE && j != start));
            match next {
                Some(j) => {
                    path.push(j);
                    prev = cur;
                    cur = j;
                }
                None => break,
            }
            if cur == start {
                break;
            }
        }
        (cur, path)
    };
    for i in 0..n {
        if node_of[i] == NONE {
            continue;
        }
        for j in nb.of(i).collect::<Vec<_>>() {
            if node_of[j] != NONE {
                // direct node-to-node step between distinct nodes, recorded once
                if node_of[j] != node_of[i] && i < j {
                    edges.push((node_of[i], node_of[j], vec![i, j]));
                }
                continue;
            }
            if visited[j] {
                continue;
            }
            let (end, path) = walk(i, j, &mut visited, &node_of);
            edges.push((node_of[i], node_of[end], path));
        }
    }
    // cycles without any node: anchor at the lowest voxel index
    for i in 0..n {
        if !skel.voxels()[i] || node_of[i] != NONE || visited[i] {
            continue;
        }
        let id = nodes.len();
        nodes.push(Node {
            id,
            position: skel.coords(i),
            kind: NodeKind::Anchor,
            voxels: vec![skel.coords(i)],
        });
        node_of[i] = id;
        visited[i] = true;
        let first = nb.of(i).next().expect("cycle voxels have two neighbours");
        let (_, mut path) = walk(i, first, &mut visited, &node_of);
        if *path.last().unwrap() != i {
            path.push(i);
        }
        edges.push((id, id, path));
    }
    let edges = edges
        .into_iter()
        .map(|(a, b, path)| {
            let path: Vec<[usize; 3]> = path.iter().map(|&j| skel.coords(j)).collect();
            Edge {
                n1: a,
                n2: b,
                length_um: path_length(&path, spacing),
                path,
            }
        })
        .collect();
    CenterlineGraph { nodes, edges }
}

/// Dead ends shorter than this many voxels are pruned.
pub const MIN_DEAD_END_VOXELS: usize = 11;

/// One pruning pass; returns the voxels to delete.
fn prune_pass(skel: &BinaryVolume) -> Vec<[usize; 3]> {
    let g = build_graph(skel, [1.0; 3]);
    let kind = |id: usize| g.nodes[id].kind;
    let mut delete: Vec<[usize; 3]> = Vec::new();
    for (k, e) in g.edges.iter().enumerate() {
        let (a, b) = (kind(e.n1), kind(e.n2));
        // (1): short branch hanging off a junction; the junction voxel is
        // left to rule (2)
        if !e.is_loop() && matches!((a, b), (NodeKind::Endpoint, NodeKind::Junction) | (NodeKind::Junction, NodeKind::Endpoint)) {
            // branch voxels up to and including the junction-adjacent one
            let voxels = e.path.len() - 1;
            if voxels < MIN_DEAD_END_VOXELS {
                if a == NodeKind::Endpoint {
                    delete.extend_from_slice(&e.path[..e.path.len() - 1]);
                } else {
                    delete.extend_from_slice(&e.path[1..]);
                }
            }
            continue;
        }
        // (4): one- or two-voxel loops back into the same junction
        if e.is_loop() && a == NodeKind::Junction && e.interior().len() <= 2 {
            delete.extend_from_slice(e.interior());
            continue;
        }
        // (4): short parallel edge between the same pair of nodes; the
        // longer of the pair goes
        if !e.is_loop() && e.interior().len() <= 2 {
            let twin = g.edges.iter().enumerate().find(|(m, f)| {
                *m != k && f.interior().len() <= 2 && ((f.n1, f.n2) == (e.n1, e.n2) || (f.n1, f.n2) == (e.n2, e.n1))
            });
            if let Some((m, f)) = twin {
                let longer = e.length_um > f.length_um || (e.length_um == f.length_um && k > m);
                if longer && !e.interior().is_empty() {
                    delete.extend_from_slice(e.interior());
                }
            }
        }
    }
    // (3): isolated voxels
    for node in &g.nodes {
        if node.kind == NodeKind::Isolated {
            delete.push(node.position);
        }
    }
    delete
}

/// Rule (2): junction voxels with no neighbour outside their junction are
/// leftovers of removed branches or redundant corners. They are deleted one
/// at a time, most remote first, while deletion is topology-preserving.
fn prune_junction_voxels(skel: &mut BinaryVolume) -> bool {
    let g = build_graph(skel, [1.0; 3]);
    let mut changed = false;
    for node in g.nodes.iter().filter(|n| n.kind == NodeKind::Junction && n.voxels.len() > 1) {
        let inside = |p: &[usize; 3]| node.voxels.contains(p);
        let outside_neighbours = |skel: &BinaryVolume, p: &[usize; 3]| {
            Connectivity::TwentySix.offsets().iter().any(|d| {
                let q = [p[0] as isize + d[0], p[1] as isize + d[1], p[2] as isize + d[2]];
                skel.checked_index(q[0], q[1], q[2]).is_some_and(|j| {
                    skel.voxels()[j] && !inside(&[q[0] as usize, q[1] as usize, q[2] as usize])
                })
            })
        };
        let attached: Vec<[usize; 3]> = node.voxels.iter().filter(|p| outside_neighbours(skel, p)).copied().collect();
        let anchors = if attached.is_empty() { vec![node.position] } else { attached };
        let remoteness = |p: &[usize; 3]| -> f64 {
            anchors
                .iter()
                .map(|a| (0..3).map(|k| (p[k] as f64 - a[k] as f64).powi(2)).sum::<f64>().sqrt())
                .sum()
        };
        let mut candidates: Vec<[usize; 3]> = node.voxels.iter().filter(|p| !outside_neighbours(skel, p)).copied().collect();
        candidates.sort_by(|a, b| remoteness(b).total_cmp(&remoteness(a)).then(a.cmp(b)));
        for p in candidates {
            if is_simple(neighbourhood(skel, p)) {
                skel.set(p[0], p[1], p[2], false);
                changed = true;
            }
        }
    }
    changed
}

fn neighbourhood(skel: &BinaryVolume, p: [usize; 3]) -> u32 {
    let mut nb = 0u32;
    for dz in -1..=1isize {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let bit = ((dx + 1) + 3 * (dy + 1) + 9 * (dz + 1)) as u32;
                let set = skel
                    .checked_index(p[0] as isize + dx, p[1] as isize + dy, p[2] as isize + dz)
                    .is_some_and(|j| skel.voxels()[j]);
                nb |= (set as u32) << bit;
            }
        }
    }
    nb
}

/// Applies the pruning rules until nothing changes.
pub fn prune(skel: &BinaryVolume) -> BinaryVolume {
    let mut out = skel.clone();
    loop {
        let delete = prune_pass(&out);
        let mut changed = false;
        for [x, y, z] in delete {
            if *out.get(x, y, z) {
                out.set(x, y, z, false);
                changed = true;
            }
        }
        changed |= prune_junction_voxels(&mut out);
        if !changed {
            return out;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(dims: [usize; 3], pts: &[[usize; 3]]) -> BinaryVolume {
        let mut v = BinaryVolume::filled(dims, [1.0; 3], false).unwrap();
        for p in pts {
            v.set(p[0], p[1], p[2], true);
        }
        v
    }

    fn line(x0: usize, x1: usize, y: usize, z: usize) -> Vec<[usize; 3]> {
        (x0..=x1).map(|x| [x, y, z]).collect()
    }

    #[test]
    fn straight_chain() {
        let v = vol([25, 3, 3], &line(2, 21, 1, 1));
        let g = build_graph(&v, [1.0; 3]);
        assert_eq!(g.nodes.len(), 2);
        assert!(g.nodes.iter().all(|n| n.kind == NodeKind::Endpoint));
        assert_eq!(g.edges.len(), 1);
        assert!((g.edges[0].length_um - 19.0).abs() < 1e-12);
    }

    fn y_shape() -> BinaryVolume {
        let mut pts = line(0, 15, 15, 1);
        for k in 1..=14 {
            pts.push([15 + k, 15 + k, 1]);
            pts.push([15 + k, 15 - k, 1]);
        }
        vol([32, 32, 3], &pts)
    }

    #[test]
    fn y_shape_graph() {
        let g = build_graph(&y_shape(), [1.0; 3]);
        let kinds: Vec<_> = g.nodes.iter().map(|n| n.kind).collect();
        assert_eq!(kinds.iter().filter(|&&k| k == NodeKind::Junction).count(), 1);
        assert_eq!(kinds.iter().filter(|&&k| k == NodeKind::Endpoint).count(), 3);
        assert_eq!(g.edges.len(), 3);
        let incidences: usize = g.degrees().iter().sum();
        assert_eq!(incidences, 2 * g.edges.len());
    }

    #[test]
    fn ring_is_one_anchored_loop() {
        // 10 x 9 rectangle outline with its corners cut: 30 voxels, four
        // diagonal steps
        let mut pts = Vec::new();
        for x in 2..10 {
            pts.push([x, 1, 1]);
            pts.push([x, 9, 1]);
        }
        for y in 2..9 {
            pts.push([1, y, 1]);
            pts.push([10, y, 1]);
        }
        assert_eq!(pts.len(), 30);
        let g = build_graph(&vol([12, 11, 3], &pts), [1.0; 3]);
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.nodes[0].kind, NodeKind::Anchor);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[0].path.len(), 31);
        assert!((g.edges[0].length_um - (26.0 + 4.0 * 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn diagonal_ring_lengths() {
        // diamond ring of diagonal steps: each step is sqrt(2)
        let c = 6isize;
        let mut pts = Vec::new();
        for k in 0..5isize {
            pts.push([(c + k) as usize, (c - 5 + k) as usize, 1]);
            pts.push([(c + 5 - k) as usize, (c + k) as usize, 1]);
            pts.push([(c - k) as usize, (c + 5 - k) as usize, 1]);
            pts.push([(c - 5 + k) as usize, (c - k) as usize, 1]);
        }
        let g = build_graph(&vol([13, 13, 3], &pts), [1.0; 3]);
        assert_eq!(g.edges.len(), 1);
        assert!((g.edges[0].length_um - 20.0 * 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn spur_removed_long_branch_kept() {
        let mut pts = line(1, 40, 10, 1);
        for k in 1..=5 {
            pts.push([20, 10 + k, 1]);
        }
        let pruned = prune(&vol([42, 20, 3], &pts));
        assert_eq!(pruned, vol([42, 20, 3], &line(1, 40, 10, 1)));

        let mut pts = line(1, 40, 10, 1);
        for k in 1..=15 {
            pts.push([20, 10 + k, 1]);
        }
        let p = prune(&vol([42, 30, 3], &pts));
        assert!((1..=15).all(|k| *p.get(20, 10 + k, 1)));
        assert!(*p.get(1, 10, 1) && *p.get(40, 10, 1));
        assert_eq!(crate::morphology::count_components(&p, Connectivity::TwentySix), 1);
    }

    #[test]
    fn ten_voxel_branch_removed_eleven_kept() {
        // the first protruding voxel touches three line voxels and so joins
        // the junction: a protrusion of n leaves an n - 1 voxel branch
        for (len, kept) in [(11, false), (12, true)] {
            let mut pts = line(1, 40, 10, 1);
            for k in 1..=len {
                pts.push([20, 10 + k, 1]);
            }
            let p = prune(&vol([42, 30, 3], &pts));
            assert_eq!(*p.get(20, 10 + len, 1), kept, "spur of {len}");
        }
    }

    #[test]
    fn isolated_voxel_removed() {
        let mut pts = line(1, 20, 3, 3);
        pts.push([10, 10, 10]);
        let p = prune(&vol([22, 12, 12], &pts));
        assert!(!*p.get(10, 10, 10));
        assert_eq!(p.count(), 20);
    }

    #[test]
    fn short_parallel_edge_removed() {
        // two junctions joined by a direct step and a 2-voxel detour
        let mut pts = line(1, 30, 5, 1);
        pts.extend([[15, 5, 1], [16, 5, 1]]);
        pts.extend([[15, 6, 1], [16, 6, 1]]);
        let v = vol([32, 10, 3], &pts);
        let p = prune(&v);
        assert_eq!(p, prune(&p));
        assert!(p.count() <= v.count());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn graph_partitions_skeleton(bits in proptest::collection::vec(proptest::bool::weighted(0.15), 343)) {
            let v = BinaryVolume::new([7, 7, 7], [1.0; 3], bits).unwrap();
            let s = crate::centerline::thin3d(&v);
            let g = build_graph(&s, [1.0; 3]);
            let mut owner = vec![0usize; s.len()];
            for n in &g.nodes {
                for p in &n.voxels {
                    owner[s.index(p[0], p[1], p[2])] += 1;
                }
            }
            for e in &g.edges {
                for p in e.interior() {
                    owner[s.index(p[0], p[1], p[2])] += 1;
                }
                let chord = (0..3).map(|a| (e.path[0][a] as f64 - e.path.last().unwrap()[a] as f64).powi(2)).sum::<f64>().sqrt();
                prop_assert!(e.length_um + 1e-9 >= chord);
            }
            for i in 0..s.len() {
                prop_assert_eq!(owner[i], s.voxels()[i] as usize);
            }
            prop_assert_eq!(g.degrees().iter().sum::<usize>(), 2 * g.edges.len());
        }

        #[test]
        fn prune_reaches_a_fixpoint(bits in proptest::collection::vec(proptest::bool::weighted(0.2), 343)) {
            let v = BinaryVolume::new([7, 7, 7], [1.0; 3], bits).unwrap();
            let s = crate::centerline::thin3d(&v);
            let p = prune(&s);
            prop_assert_eq!(prune(&p), p.clone());
            for i in 0..s.len() {
                prop_assert!(!p.voxels()[i] || s.voxels()[i]);
            }
        }
    }
}
