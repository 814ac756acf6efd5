//! Location graph construction and the normalized propagation operator
//! `D̃^{-1/2} (A + I) D̃^{-1/2}` used by every GCN layer.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_distance, GeoPoint, GridIndex, EARTH_RADIUS_M};
use crate::numcore::{CsrMatrix, Tensor2};

/// Default proximity threshold for edges, in meters.
pub const DEFAULT_DELTA_M: f64 = 200.0;
/// Nodes farther than this from every segment get no segment id.
pub const SEGMENT_SNAP_M: f64 = 20.0;
/// Distances are floored here before inversion.
pub const MIN_EDGE_DISTANCE_M: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: i64,
    pub points: Vec<GeoPoint>,
}

/// Street polylines, one per road segment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StreetNetwork {
    pub segments: Vec<Segment>,
}

impl StreetNetwork {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.segments {
            if s.points.len() < 2 {
                return Err(Error::invalid(format!("segment {} has fewer than 2 points", s.id)));
            }
            if !seen.insert(s.id) {
                return Err(Error::invalid(format!("duplicate segment id {}", s.id)));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: StreetNetwork = serde_json::from_str(s).map_err(|e| Error::Format {
            what: "street network",
            detail: e.to_string(),
        })?;
        net.validate()?;
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format {
            what: "street network",
            detail: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        StreetNetwork::from_json(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Distance in meters from `p` to the closest point of segment `seg`.
    pub fn distance_to_segment(p: GeoPoint, seg: &Segment) -> f64 {
        // local tangent plane centered on p; fine at street scale
        let coslat = p.lat().to_radians().cos();
        let project = |q: GeoPoint| {
            (
                (q.lon() - p.lon()).to_radians() * EARTH_RADIUS_M * coslat,
                (q.lat() - p.lat()).to_radians() * EARTH_RADIUS_M,
            )
        };
        seg.points
            .windows(2)
            .map(|w| {
                let (ax, ay) = project(w[0]);
                let (bx, by) = project(w[1]);
                let (dx, dy) = (bx - ax, by - ay);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 {
                    (-(ax * dx + ay * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (cx, cy) = (ax + t * dx, ay + t * dy);
                (cx * cx + cy * cy).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Id of the nearest segment within `tolerance_m`, lowest id on ties.
    pub fn snap(&self, p: GeoPoint, tolerance_m: f64) -> Option<i64> {
        let mut best: Option<(f64, i64)> = None;
        for s in &self.segments {
            let d = Self::distance_to_segment(p, s);
            if d > tolerance_m {
                continue;
            }
            match best {
                Some((bd, bid)) if bd < d || (bd == d && bid < s.id) => {}
                _ => best = Some((d, s.id)),
            }
        }
        best.map(|(_, id)| id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Undirected weighted location graph; edges are stored once with `i < j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreetGraph {
    pub n: usize,
    pub edges: Vec<Edge>,
    pub node_segment: Vec<Option<i64>>,
}

impl StreetGraph {
    pub fn validate(&self) -> Result<()> {
        if self.node_segment.len() != self.n {
            return Err(Error::invalid("node_segment length differs from node count"));
        }
        let mut last: Option<(usize, usize)> = None;
        for e in &self.edges {
            if e.i >= e.j || e.j >= self.n {
                return Err(Error::invalid(format!("bad edge ({}, {})", e.i, e.j)));
            }
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(Error::invalid(format!(
                    "edge ({}, {}) has weight {}",
                    e.i, e.j, e.weight
                )));
            }
            if last.is_some_and(|l| l >= (e.i, e.j)) {
                return Err(Error::invalid("edges must be sorted and unique"));
            }
            last = Some((e.i, e.j));
        }
        Ok(())
    }

    /// Weighted degree of each node (self-loop excluded).
    pub fn degrees(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for e in &self.edges {
            d[e.i] += e.weight;
            d[e.j] += e.weight;
        }
        d
    }

    /// Neighbor counts per node.
    pub fn neighbor_counts(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for e in &self.edges {
            d[e.i] += 1;
            d[e.j] += 1;
        }
        d
    }

    pub fn stats(&self) -> GraphStats {
        let counts = self.neighbor_counts();
        let mut histogram = BTreeMap::new();
        for &c in &counts {
            *histogram.entry(c).or_insert(0usize) += 1;
        }
        GraphStats {
            nodes: self.n,
            edges: self.edges.len(),
            isolated: counts.iter().filter(|&&c| c == 0).count(),
            degree_histogram: histogram,
            min_weight: self.edges.iter().map(|e| e.weight).fold(f64::INFINITY, f64::min),
            max_weight: self.edges.iter().map(|e| e.weight).fold(0.0, f64::max),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: StreetGraph = serde_json::from_str(s).map_err(|e| Error::Format {
            what: "street graph",
            detail: e.to_string(),
        })?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format {
            what: "street graph",
            detail: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        StreetGraph::from_json(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Summary printed by the CLI after graph construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub isolated: usize,
    /// neighbor count → number of nodes with that count
    pub degree_histogram: BTreeMap<usize, usize>,
    pub min_weight: f64,
    pub max_weight: f64,
}

/// Connects nodes closer than `delta_m` or snapped to the same segment.
///
/// Every edge weighs `1 / max(distance, 1 m)`.
pub fn build_graph(locations: &[GeoPoint], network: Option<&StreetNetwork>, delta_m: f64) -> Result<StreetGraph> {
    if locations.is_empty() {
        return Err(Error::invalid("graph needs at least one location"));
    }
    if !(delta_m > 0.0 && delta_m.is_finite()) {
        return Err(Error::invalid("delta must be positive"));
    }
    let n = locations.len();
    let node_segment: Vec<Option<i64>> = match network {
        Some(net) => {
            net.validate()?;
            locations.iter().map(|&p| net.snap(p, SEGMENT_SNAP_M)).collect()
        }
        None => vec![None; n],
    };

    let mut pairs = std::collections::BTreeSet::new();
    let mut index = GridIndex::new(delta_m, locations[0].lat());
    for &p in locations {
        index.insert(p);
    }
    for (i, &p) in locations.iter().enumerate() {
        for (j, d) in index.all_within(p, delta_m) {
            if j > i && d < delta_m {
                pairs.insert((i, j));
            }
        }
    }
    let mut by_segment: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, s) in node_segment.iter().enumerate() {
        if let Some(s) = s {
            by_segment.entry(*s).or_default().push(i);
        }
    }
    for members in by_segment.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                pairs.insert((i, j));
            }
        }
    }

    let edges = pairs
        .into_iter()
        .map(|(i, j)| Edge {
            i,
            j,
            weight: 1.0 / haversine_distance(locations[i], locations[j]).max(MIN_EDGE_DISTANCE_M),
        })
        .collect();
    let graph = StreetGraph { n, edges, node_segment };
    graph.validate()?;
    Ok(graph)
}

/// Symmetric nonnegative operator `D̃^{-1/2} Ã D̃^{-1/2}`, stored sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationOperator {
    matrix: Arc<CsrMatrix>,
}

impl PropagationOperator {
    /// `P = I`: what an edgeless graph normalizes to.
    pub fn identity(n: usize) -> Self {
        let triplets: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        PropagationOperator {
            matrix: Arc::new(CsrMatrix::from_triplets(n, n, &triplets).expect("diagonal in range")),
        }
    }

    /// Wraps an explicit matrix after checking it is square, symmetric and nonnegative.
    pub fn from_matrix(matrix: CsrMatrix) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::invalid("propagation operator must be square"));
        }
        for i in 0..matrix.rows() {
            for (j, v) in matrix.row(i) {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::invalid(format!("entry ({i}, {j}) = {v}")));
                }
                if (matrix.get(j, i) - v).abs() > 1e-12 {
                    return Err(Error::invalid("propagation operator must be symmetric"));
                }
            }
        }
        Ok(PropagationOperator {
            matrix: Arc::new(matrix),
        })
    }

    pub fn from_dense(dense: &Tensor2) -> Result<Self> {
        let mut triplets = Vec::new();
        for i in 0..dense.rows() {
            for j in 0..dense.cols() {
                let v = dense.get(i, j);
                if v != 0.0 {
                    triplets.push((i, j, v));
                }
            }
        }
        PropagationOperator::from_matrix(CsrMatrix::from_triplets(dense.rows(), dense.cols(), &triplets)?)
    }

    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Arc<CsrMatrix> {
        &self.matrix
    }

    pub fn to_dense(&self) -> Tensor2 {
        self.matrix.to_dense()
    }
}

/// Symmetric normalization with self-loops.
pub fn normalize(graph: &StreetGraph) -> PropagationOperator {
    let deg: Vec<f64> = graph.degrees().iter().map(|d| d + 1.0).collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut triplets = Vec::with_capacity(graph.n + 2 * graph.edges.len());
    for (i, s) in inv_sqrt.iter().enumerate() {
        triplets.push((i, i, s * s));
    }
    for e in &graph.edges {
        let v = e.weight * inv_sqrt[e.i] * inv_sqrt[e.j];
        triplets.push((e.i, e.j, v));
        triplets.push((e.j, e.i, v));
    }
    PropagationOperator {
        matrix: Arc::new(CsrMatrix::from_triplets(graph.n, graph.n, &triplets).expect("validated graph indices")),
    }
}
