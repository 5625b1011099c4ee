//! Grid road networks and the segment-adjacency graph.
//!
//! A network of size `p` has vertices `{0..=p}²` and one directed segment for
//! each direction of every grid edge. Segments are indexed lexicographically by
//! `(tail.i, tail.j, head.i, head.j)`, so the index layout (and every matrix
//! built on it) is reproducible across runs.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{EtaError, Result};

/// Intersection on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Vertex {
    pub i: u32,
    pub j: u32,
}

impl Vertex {
    pub const fn new(i: u32, j: u32) -> Self {
        Self { i, j }
    }

    /// Grid (L1) distance.
    pub fn l1(self, other: Vertex) -> u32 {
        self.i.abs_diff(other.i) + self.j.abs_diff(other.j)
    }
}

impl fmt::Display for Vertex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.i, self.j)
    }
}

/// Directed road segment between two adjacent intersections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Segment {
    pub tail: Vertex,
    pub head: Vertex,
}

impl Segment {
    pub fn new(tail: Vertex, head: Vertex) -> Result<Self> {
        if tail.l1(head) != 1 {
            return Err(EtaError::InvalidSegment(format!("{tail}->{head}")));
        }
        Ok(Self { tail, head })
    }

    /// Unit step `(di, dj)` from tail to head.
    pub fn direction(&self) -> (i32, i32) {
        (
            self.head.i as i32 - self.tail.i as i32,
            self.head.j as i32 - self.tail.j as i32,
        )
    }

    pub fn reversed(&self) -> Segment {
        Segment { tail: self.head, head: self.tail }
    }

    fn is_reverse_of(&self, other: &Segment) -> bool {
        self.tail == other.head && self.head == other.tail
    }

    fn perpendicular(&self, other: &Segment) -> bool {
        let (a, b) = (self.direction(), other.direction());
        a.0 * b.0 + a.1 * b.1 == 0
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.tail, self.head)
    }
}

/// Directed grid network with a stable segment index.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    p: u32,
    segments: Vec<Segment>,
    index: HashMap<Segment, usize>,
    // segments incident to each vertex (either endpoint), by vertex index
    incident: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct NetworkJson {
    p: u32,
    segments: Vec<[u32; 4]>,
}

impl RoadNetwork {
    /// Builds the `p × p` grid (vertices `{0..=p}²`) with both directions of every edge.
    pub fn build_grid(p: u32) -> Result<Self> {
        if p == 0 {
            return Err(EtaError::EmptyGrid(p));
        }
        let mut segments = Vec::with_capacity(4 * (p as usize) * (p as usize + 1));
        for i in 0..=p {
            for j in 0..=p {
                let tail = Vertex::new(i, j);
                let mut heads = Vec::with_capacity(4);
                if i > 0 {
                    heads.push(Vertex::new(i - 1, j));
                }
                if j > 0 {
                    heads.push(Vertex::new(i, j - 1));
                }
                if j < p {
                    heads.push(Vertex::new(i, j + 1));
                }
                if i < p {
                    heads.push(Vertex::new(i + 1, j));
                }
                // heads are pushed in lexicographic order already
                segments.extend(heads.into_iter().map(|head| Segment { tail, head }));
            }
        }
        Ok(Self::from_sorted(p, segments))
    }

    fn from_sorted(p: u32, segments: Vec<Segment>) -> Self {
        let side = p as usize + 1;
        let mut incident = vec![Vec::new(); side * side];
        let mut index = HashMap::with_capacity(segments.len());
        for (k, s) in segments.iter().enumerate() {
            index.insert(*s, k);
            incident[s.tail.i as usize * side + s.tail.j as usize].push(k);
            incident[s.head.i as usize * side + s.head.j as usize].push(k);
        }
        Self { p, segments, index, incident }
    }

    pub fn p(&self) -> u32 {
        self.p
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn num_vertices(&self) -> usize {
        let side = self.p as usize + 1;
        side * side
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, k: usize) -> Segment {
        self.segments[k]
    }

    pub fn index_of(&self, s: &Segment) -> Option<usize> {
        self.index.get(s).copied()
    }

    /// Index of the segment `tail → head`, if it exists.
    pub fn find(&self, tail: Vertex, head: Vertex) -> Option<usize> {
        self.index.get(&Segment { tail, head }).copied()
    }

    pub fn contains_vertex(&self, v: Vertex) -> bool {
        v.i <= self.p && v.j <= self.p
    }

    pub fn vertices(&self) -> impl Iterator<Item = Vertex> + '_ {
        let p = self.p;
        (0..=p).flat_map(move |i| (0..=p).map(move |j| Vertex::new(i, j)))
    }

    /// Segments having `v` as tail or head.
    pub fn incident(&self, v: Vertex) -> &[usize] {
        let side = self.p as usize + 1;
        &self.incident[v.i as usize * side + v.j as usize]
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = NetworkJson {
            p: self.p,
            segments: self
                .segments
                .iter()
                .map(|s| [s.tail.i, s.tail.j, s.head.i, s.head.j])
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    /// Parses a serialized network. The segment list must be exactly the one
    /// [`RoadNetwork::build_grid`] produces for the stored `p`.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetworkJson = serde_json::from_str(text)?;
        let net = Self::build_grid(doc.p)?;
        if doc.segments.len() != net.num_segments() {
            return Err(EtaError::Dimension { expected: net.num_segments(), got: doc.segments.len() });
        }
        for (k, raw) in doc.segments.iter().enumerate() {
            let s = net.segment(k);
            if *raw != [s.tail.i, s.tail.j, s.head.i, s.head.j] {
                return Err(EtaError::InvalidSegment(format!("index {k}: {raw:?}")));
            }
        }
        Ok(net)
    }
}

/// Which pairs of directed segments count as "directly connected" in the
/// segment graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyRule {
    /// Any shared endpoint, including a segment and its reverse.
    ShareAnyEndpoint,
    /// One segment's head is the other's tail (U-turns included).
    HeadToTailChain,
    /// The underlying undirected edges are distinct and share an endpoint.
    UndirectedEdgeIncidence,
    /// Straight continuation through an intersection, or two perpendicular
    /// segments leaving the same intersection.
    #[default]
    ContinueOrBranch,
    /// Straight continuation, or two perpendicular segments entering the same
    /// intersection.
    ContinueOrMerge,
}

impl AdjacencyRule {
    pub const ALL: [AdjacencyRule; 5] = [
        AdjacencyRule::ShareAnyEndpoint,
        AdjacencyRule::HeadToTailChain,
        AdjacencyRule::UndirectedEdgeIncidence,
        AdjacencyRule::ContinueOrBranch,
        AdjacencyRule::ContinueOrMerge,
    ];

    /// Whether distinct segments `a` and `b` are adjacent under this rule.
    /// Symmetric in its arguments.
    pub fn connects(self, a: &Segment, b: &Segment) -> bool {
        if a == b {
            return false;
        }
        let straight = (a.head == b.tail || b.head == a.tail) && a.direction() == b.direction();
        match self {
            AdjacencyRule::ShareAnyEndpoint => {
                a.tail == b.tail || a.tail == b.head || a.head == b.tail || a.head == b.head
            }
            AdjacencyRule::HeadToTailChain => a.head == b.tail || b.head == a.tail,
            AdjacencyRule::UndirectedEdgeIncidence => {
                !a.is_reverse_of(b)
                    && (a.tail == b.tail || a.tail == b.head || a.head == b.tail || a.head == b.head)
            }
            AdjacencyRule::ContinueOrBranch => straight || (a.tail == b.tail && a.perpendicular(b)),
            AdjacencyRule::ContinueOrMerge => straight || (a.head == b.head && a.perpendicular(b)),
        }
    }
}

impl fmt::Display for AdjacencyRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            AdjacencyRule::ShareAnyEndpoint => "share_any_endpoint",
            AdjacencyRule::HeadToTailChain => "head_to_tail_chain",
            AdjacencyRule::UndirectedEdgeIncidence => "undirected_edge_incidence",
            AdjacencyRule::ContinueOrBranch => "continue_or_branch",
            AdjacencyRule::ContinueOrMerge => "continue_or_merge",
        };
        f.write_str(name)
    }
}

/// Undirected graph with one node per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentGraph {
    neighbors: Vec<Vec<usize>>,
}

impl SegmentGraph {
    /// Builds the segment graph of `net` under `rule`.
    pub fn build(net: &RoadNetwork, rule: AdjacencyRule) -> Self {
        let mut neighbors = vec![Vec::new(); net.num_segments()];
        // adjacent segments always share a vertex, so scanning vertex stars suffices
        for v in net.vertices() {
            let star = net.incident(v);
            for &a in star {
                for &b in star {
                    if a != b && rule.connects(&net.segment(a), &net.segment(b)) {
                        neighbors[a].push(b);
                    }
                }
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Self { neighbors }
    }

    /// Graph on `n` nodes from an undirected edge list. Self-loops are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a != b {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Self { neighbors }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, k: usize) -> &[usize] {
        &self.neighbors[k]
    }

    pub fn degree(&self, k: usize) -> usize {
        self.neighbors[k].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }
}
