//! Undirected road network: shortest paths, nearest-node mapping, the text
//! file format, and a synthetic lattice generator.
//!
//! File format, one record per line (`#` starts a comment):
//!
//! ```text
//! N <id> <lat> <lon>
//! E <u> <v>            # length computed from the endpoints
//! E <u> <v> <meters>   # explicit length
//! ```

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geo::{distance_m, BBox, GeoPoint, GridIndex};

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub u: NodeId,
    pub v: NodeId,
    pub length: f64,
}

#[derive(Debug, Clone)]
pub struct RoadNetwork {
    nodes: BTreeMap<NodeId, GeoPoint>,
    edges: Vec<Edge>,
    origin: GeoPoint,
    // dense index -> (neighbor dense index, length)
    adj: Vec<Vec<(usize, f64)>>,
    ids: Vec<NodeId>,
}

impl RoadNetwork {
    /// Builds a network. Edges given with a non-positive or NaN length get
    /// their length from the projected endpoint distance.
    pub fn new(nodes: BTreeMap<NodeId, GeoPoint>, edges: Vec<(NodeId, NodeId, Option<f64>)>) -> Result<Self> {
        for (id, p) in &nodes {
            if !p.is_valid() {
                return Err(Error::invalid(format!("node {id} has invalid coordinates")));
            }
        }
        let origin = centroid(nodes.values());
        let ids: Vec<NodeId> = nodes.keys().copied().collect();
        let points: Vec<GeoPoint> = nodes.values().copied().collect();
        let index = |id: NodeId| ids.binary_search(&id).map_err(|_| Error::UnknownNode(id));

        let mut adj = vec![Vec::new(); ids.len()];
        let mut out = Vec::with_capacity(edges.len());
        for (u, v, len) in edges {
            let (iu, iv) = (index(u)?, index(v)?);
            if iu == iv {
                return Err(Error::invalid(format!("self-loop on node {u}")));
            }
            let length = match len {
                Some(l) => l,
                None => distance_m(points[iu], points[iv], origin),
            };
            if !(length > 0.0 && length.is_finite()) {
                return Err(Error::invalid(format!("edge {u}-{v} has non-positive length {length}")));
            }
            adj[iu].push((iv, length));
            adj[iv].push((iu, length));
            out.push(Edge { u, v, length });
        }
        Ok(RoadNetwork {
            nodes,
            edges: out,
            origin,
            adj,
            ids,
        })
    }

    pub fn nodes(&self) -> &BTreeMap<NodeId, GeoPoint> {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Projection origin used for every metric distance on this network.
    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    pub fn point(&self, id: NodeId) -> Result<GeoPoint> {
        self.nodes.get(&id).copied().ok_or(Error::UnknownNode(id))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    fn index(&self, id: NodeId) -> Result<usize> {
        self.ids.binary_search(&id).map_err(|_| Error::UnknownNode(id))
    }

    pub fn neighbors(&self, id: NodeId) -> Result<impl Iterator<Item = (NodeId, f64)> + '_> {
        let i = self.index(id)?;
        Ok(self.adj[i].iter().map(|&(j, l)| (self.ids[j], l)))
    }

    /// Connected components, each sorted by id, ordered by their smallest id.
    pub fn components(&self) -> Vec<Vec<NodeId>> {
        let mut seen = vec![false; self.ids.len()];
        let mut out = Vec::new();
        for start in 0..self.ids.len() {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut stack = vec![start];
            let mut comp = Vec::new();
            while let Some(i) = stack.pop() {
                comp.push(self.ids[i]);
                for &(j, _) in &self.adj[i] {
                    if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Single-source shortest path lengths (Dijkstra). Unreachable nodes get
    /// `f64::INFINITY`.
    pub fn distances_from(&self, source: NodeId) -> Result<BTreeMap<NodeId, f64>> {
        let dist = self.dijkstra(self.index(source)?);
        Ok(self.ids.iter().copied().zip(dist).collect())
    }

    fn dijkstra(&self, src: usize) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.ids.len()];
        let mut heap = BinaryHeap::new();
        dist[src] = 0.0;
        heap.push(State { cost: 0.0, node: src });
        while let Some(State { cost, node }) = heap.pop() {
            if cost > dist[node] {
                continue;
            }
            for &(next, len) in &self.adj[node] {
                let c = cost + len;
                if c < dist[next] {
                    dist[next] = c;
                    heap.push(State { cost: c, node: next });
                }
            }
        }
        dist
    }

    /// Shortest path length between two nodes, `f64::INFINITY` when they are
    /// in different components.
    pub fn shortest_path_dist(&self, u: NodeId, v: NodeId) -> Result<f64> {
        let (iu, iv) = (self.index(u)?, self.index(v)?);
        if iu == iv {
            return Ok(0.0);
        }
        Ok(self.dijkstra(iu)[iv])
    }

    /// Node closest to `p` in the projected plane; ties go to the smallest id.
    pub fn nearest_node(&self, p: GeoPoint, origin: GeoPoint) -> Result<NodeId> {
        let mut best: Option<(f64, NodeId)> = None;
        for (&id, &q) in &self.nodes {
            let d = distance_m(p, q, origin);
            // ids iterate ascending, so strict < keeps the smallest id on ties
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, id));
            }
        }
        best.map(|(_, id)| id).ok_or(Error::EmptyNetwork)
    }

    /// Nodes whose projected distance to `center` is at most `radius` meters.
    pub fn nodes_within(&self, center: GeoPoint, radius: f64) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|(_, &p)| distance_m(center, p, self.origin) <= radius)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        let mut edges = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            match (f[0], f.len()) {
                ("N", 4) => {
                    let id = f[1].parse().map_err(|_| err("bad node id"))?;
                    let lat = f[2].parse().map_err(|_| err("bad latitude"))?;
                    let lon = f[3].parse().map_err(|_| err("bad longitude"))?;
                    let p = GeoPoint::new(lat, lon).map_err(|e| err(&e.to_string()))?;
                    if nodes.insert(id, p).is_some() {
                        return Err(err("duplicate node id"));
                    }
                }
                ("E", 3 | 4) => {
                    let u = f[1].parse().map_err(|_| err("bad edge endpoint"))?;
                    let v = f[2].parse().map_err(|_| err("bad edge endpoint"))?;
                    let len = match f.get(3) {
                        Some(s) => Some(s.parse::<f64>().map_err(|_| err("bad edge length"))?),
                        None => None,
                    };
                    edges.push((u, v, len));
                }
                _ => return Err(err("expected `N <id> <lat> <lon>` or `E <u> <v> [<meters>]`")),
            }
        }
        RoadNetwork::new(nodes, edges)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (id, p) in &self.nodes {
            let _ = writeln!(s, "N {id} {:.9} {:.9}", p.lat, p.lon);
        }
        for e in &self.edges {
            let _ = writeln!(s, "E {} {} {}", e.u, e.v, e.length);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn centroid<'a>(points: impl Iterator<Item = &'a GeoPoint>) -> GeoPoint {
    let (mut lat, mut lon, mut n) = (0.0, 0.0, 0usize);
    for p in points {
        lat += p.lat;
        lon += p.lon;
        n += 1;
    }
    if n == 0 {
        return GeoPoint { lat: 0.0, lon: 0.0 };
    }
    GeoPoint {
        lat: lat / n as f64,
        lon: lon / n as f64,
    }
}

#[derive(Copy, Clone, PartialEq)]
struct State {
    cost: f64,
    node: usize,
}

impl Eq for State {}

impl Ord for State {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| self.node.cmp(&other.node))
    }
}

impl PartialOrd for State {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Parameters of the synthetic lattice network.
#[derive(Debug, Clone, Copy)]
pub struct LatticeSpec {
    pub grid: GridIndex,
    /// Node offset from its cell center, as a fraction of the cell size.
    pub jitter: f64,
    /// Probability of keeping each non-tree lattice edge.
    pub keep_edge: f64,
    pub seed: u64,
}

/// A connected lattice with one node per grid cell (node id = cell id), placed
/// near the cell center. A random spanning tree keeps it connected; the other
/// 4-neighbor edges survive with probability `keep_edge`.
pub fn lattice(spec: &LatticeSpec) -> Result<RoadNetwork> {
    let g = spec.grid.g;
    if !(0.0..0.5).contains(&spec.jitter) || !(0.0..=1.0).contains(&spec.keep_edge) {
        return Err(Error::invalid("lattice jitter must be in [0, 0.5) and keep_edge in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let b: BBox = spec.grid.bbox;
    let dlat = (b.max_lat - b.min_lat) / g as f64;
    let dlon = (b.max_lon - b.min_lon) / g as f64;
    let mut nodes = BTreeMap::new();
    for cell in 0..g * g {
        let c = spec.grid.cell_center(cell);
        let jl = rng.random_range(-spec.jitter..=spec.jitter) * dlat;
        let jo = rng.random_range(-spec.jitter..=spec.jitter) * dlon;
        nodes.insert(cell as NodeId, GeoPoint::new(c.lat + jl, c.lon + jo)?);
    }

    let mut candidates = Vec::new();
    for r in 0..g {
        for c in 0..g {
            let id = r * g + c;
            if c + 1 < g {
                candidates.push((id, id + 1));
            }
            if r + 1 < g {
                candidates.push((id, id + g));
            }
        }
    }
    candidates.shuffle(&mut rng);

    // Kruskal-style spanning tree over the shuffled edges.
    let mut parent: Vec<usize> = (0..g * g).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut edges = Vec::new();
    for (u, v) in candidates {
        let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
        let keep = if ru != rv {
            parent[ru] = rv;
            true
        } else {
            rng.random_bool(spec.keep_edge)
        };
        if keep {
            edges.push((u as NodeId, v as NodeId, None));
        }
    }
    edges.sort_by_key(|&(u, v, _)| (u, v));
    RoadNetwork::new(nodes, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint { lat, lon }
    }

    fn net(edges: &[(NodeId, NodeId, f64)], n: u32) -> RoadNetwork {
        let nodes = (0..n).map(|i| (i, p(35.0 + i as f64 * 1e-3, 139.0))).collect();
        RoadNetwork::new(nodes, edges.iter().map(|&(u, v, l)| (u, v, Some(l))).collect()).unwrap()
    }

    #[test]
    fn path_graph_distance() {
        // A-B(100)-C(50)
        let n = net(&[(0, 1, 100.0), (1, 2, 50.0)], 3);
        assert_eq!(n.shortest_path_dist(0, 2).unwrap(), 150.0);
        assert_eq!(n.shortest_path_dist(2, 2).unwrap(), 0.0);
    }

    #[test]
    fn detour_is_shorter() {
        // A-B(100), A-C(30), C-B(40)
        let n = net(&[(0, 1, 100.0), (0, 2, 30.0), (2, 1, 40.0)], 3);
        assert_eq!(n.shortest_path_dist(0, 1).unwrap(), 70.0);
        assert_eq!(n.shortest_path_dist(1, 0).unwrap(), 70.0);
    }

    #[test]
    fn disconnected_is_infinite() {
        let n = net(&[(0, 1, 10.0)], 3);
        assert_eq!(n.shortest_path_dist(0, 2).unwrap(), f64::INFINITY);
        assert!(matches!(n.shortest_path_dist(0, 9), Err(Error::UnknownNode(9))));
    }

    #[test]
    fn rejects_bad_edges() {
        let nodes: BTreeMap<_, _> = (0..2).map(|i| (i, p(35.0, 139.0 + i as f64 * 1e-3))).collect();
        assert!(RoadNetwork::new(nodes.clone(), vec![(0, 0, Some(1.0))]).is_err());
        assert!(RoadNetwork::new(nodes.clone(), vec![(0, 1, Some(0.0))]).is_err());
        assert!(RoadNetwork::new(nodes, vec![(0, 5, None)]).is_err());
    }

    #[test]
    fn nearest_node_tie_goes_to_smallest_id() {
        let mut nodes = BTreeMap::new();
        nodes.insert(7, p(35.0, 139.002));
        nodes.insert(3, p(35.0, 138.998));
        let n = RoadNetwork::new(nodes, vec![]).unwrap();
        let o = n.origin();
        assert_eq!(n.nearest_node(p(35.0, 139.0), o).unwrap(), 3);
        assert_eq!(n.nearest_node(p(35.0, 139.002), o).unwrap(), 7);
        let empty = RoadNetwork::new(BTreeMap::new(), vec![]).unwrap();
        assert!(matches!(empty.nearest_node(p(0.0, 0.0), o), Err(Error::EmptyNetwork)));
    }

    #[test]
    fn text_round_trip_and_computed_lengths() {
        let text = "# test\nN 1 35.0 139.0\nN 2 35.001 139.0\nE 1 2\n";
        let n = RoadNetwork::from_text(text, Path::new("t")).unwrap();
        let len = n.edges()[0].length;
        assert!((len - 111.32).abs() < 1e-6, "{len}");
        let again = RoadNetwork::from_text(&n.to_text(), Path::new("t")).unwrap();
        assert_eq!(again.nodes(), n.nodes());
        assert!((again.edges()[0].length - len).abs() < 1e-9);
        let bad = RoadNetwork::from_text("N 1 35.0\n", Path::new("t"));
        assert!(matches!(bad, Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn lattice_is_connected_and_one_node_per_cell() {
        let grid = GridIndex::new(BBox::new(35.0, 35.03, 139.0, 139.03).unwrap(), 6).unwrap();
        let n = lattice(&LatticeSpec {
            grid,
            jitter: 0.2,
            keep_edge: 0.5,
            seed: 4,
        })
        .unwrap();
        assert_eq!(n.len(), 36);
        let d = n.distances_from(0).unwrap();
        assert!(d.values().all(|v| v.is_finite()));
        for (&id, &pt) in n.nodes() {
            assert_eq!(grid.cell_of(pt), id as usize);
        }
    }
}
