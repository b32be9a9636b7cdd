//! The three graph families, their square partitions and hop metrics.
//!
//! Node labels are `0..n`. Squares are addressed by 1-based
//! [`SquareIndex`] `(i, j)` with `i` the column and `j` the row, `(1, 1)`
//! being the bottom-left square. Grid node `(i, j)` carries label
//! `(j - 1) * m + (i - 1)`.
//!
//! Random geometric graphs connect every pair of nodes whose squares are
//! identical or share an edge. That is exactly the connectivity the radius
//! is chosen to guarantee, and routes never need anything else.

use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channel::RandomStream;
use crate::sim;
use crate::{Error, Result};

/// Redraws allowed before giving up on an irregular placement.
pub const DEFAULT_RGG_ATTEMPTS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Cycle,
    Grid2d,
    Rgg,
}

impl Topology {
    pub fn tag(&self) -> &'static str {
        match self {
            Topology::Cycle => "cycle",
            Topology::Grid2d => "grid2d",
            Topology::Rgg => "rgg",
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cycle" => Ok(Topology::Cycle),
            "grid2d" | "grid" => Ok(Topology::Grid2d),
            "rgg" => Ok(Topology::Rgg),
            other => Err(Error::invalid(format!("unknown topology `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SquareIndex {
    pub i: usize,
    pub j: usize,
}

impl SquareIndex {
    pub fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    m: usize,
    topology: Topology,
    adjacency: Vec<Vec<usize>>,
    positions: Option<Vec<(f64, f64)>>,
    square_of: Vec<SquareIndex>,
    // column-major over the partition: index (i - 1) * rows + (j - 1)
    squares: Vec<Vec<usize>>,
    cols: usize,
    rows: usize,
}

impl Graph {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Squares per side. Equals `n` for the cycle.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.adjacency[u]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.adjacency[u].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].binary_search(&v).is_ok()
    }

    /// Undirected edges as `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(u, nbrs)| nbrs.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn positions(&self) -> Option<&[(f64, f64)]> {
        self.positions.as_deref()
    }

    pub fn square_of(&self, u: usize) -> SquareIndex {
        self.square_of[u]
    }

    /// Partition dimensions as `(columns, rows)`.
    pub fn partition_dims(&self) -> (usize, usize) {
        (self.cols, self.rows)
    }

    /// Nodes of square `sq` in construction order. Empty if out of range.
    pub fn nodes_in_square(&self, sq: SquareIndex) -> &[usize] {
        if sq.i == 0 || sq.j == 0 || sq.i > self.cols || sq.j > self.rows {
            return &[];
        }
        &self.squares[(sq.i - 1) * self.rows + (sq.j - 1)]
    }

    /// Position of `u` within its square's node list.
    pub fn label_in_square(&self, u: usize) -> usize {
        self.nodes_in_square(self.square_of[u])
            .iter()
            .position(|&v| v == u)
            .expect("node listed in its own square")
    }

    /// (min, max) square occupancy.
    pub fn occupancy_range(&self) -> (usize, usize) {
        let min = self.squares.iter().map(Vec::len).min().unwrap_or(0);
        let max = self.squares.iter().map(Vec::len).max().unwrap_or(0);
        (min, max)
    }

    /// Every square holds at least one node.
    pub fn is_regular(&self) -> bool {
        self.squares.iter().all(|s| !s.is_empty())
    }

    /// Check the structural invariants shared by all families.
    pub fn validate(&self) -> Result<()> {
        if self.adjacency.len() != self.n || self.square_of.len() != self.n {
            return Err(Error::invalid("node tables disagree with n"));
        }
        for (u, nbrs) in self.adjacency.iter().enumerate() {
            if nbrs.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!(
                    "adjacency of {u} not sorted/unique"
                )));
            }
            for &v in nbrs {
                if v == u {
                    return Err(Error::invalid(format!("self-edge at {u}")));
                }
                if v >= self.n || !self.has_edge(v, u) {
                    return Err(Error::invalid(format!("edge ({u},{v}) not symmetric")));
                }
            }
        }
        let mut seen = vec![false; self.n];
        for (idx, members) in self.squares.iter().enumerate() {
            let sq = SquareIndex::new(idx / self.rows + 1, idx % self.rows + 1);
            for &u in members {
                if u >= self.n || seen[u] {
                    return Err(Error::invalid(format!("node {u} in more than one square")));
                }
                seen[u] = true;
                if self.square_of[u] != sq {
                    return Err(Error::invalid(format!("square_of({u}) inconsistent")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("square partition does not cover every node"));
        }
        Ok(())
    }

    fn assemble(
        topology: Topology,
        m: usize,
        dims: (usize, usize),
        square_of: Vec<SquareIndex>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        positions: Option<Vec<(f64, f64)>>,
    ) -> Result<Self> {
        let n = square_of.len();
        let (cols, rows) = dims;
        let mut adjacency = vec![Vec::new(); n];
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::invalid(format!("edge ({u},{v}) out of range")));
            }
            if u == v {
                return Err(Error::invalid(format!("self-edge at {u}")));
            }
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for nbrs in &mut adjacency {
            nbrs.sort_unstable();
            nbrs.dedup();
        }
        let mut squares = vec![Vec::new(); cols * rows];
        for (u, sq) in square_of.iter().enumerate() {
            if sq.i == 0 || sq.j == 0 || sq.i > cols || sq.j > rows {
                return Err(Error::invalid(format!("square of node {u} out of range")));
            }
            squares[(sq.i - 1) * rows + (sq.j - 1)].push(u);
        }
        let g = Graph {
            n,
            m,
            topology,
            adjacency,
            positions,
            square_of,
            squares,
            cols,
            rows,
        };
        g.validate()?;
        Ok(g)
    }
}

/// Ring on `n >= 3` nodes with a degenerate one-column partition.
pub fn build_cycle(n: usize) -> Result<Graph> {
    if n < 3 {
        return Err(Error::invalid(format!("cycle needs n >= 3, got {n}")));
    }
    let squares = (0..n).map(|k| SquareIndex::new(1, k + 1)).collect();
    let edges = (0..n).map(|k| (k, (k + 1) % n));
    Graph::assemble(Topology::Cycle, n, (1, n), squares, edges, None)
}

/// `m x m` four-nearest-neighbor grid, one node at each square center.
pub fn build_grid(m: usize) -> Result<Graph> {
    if m < 2 {
        return Err(Error::invalid(format!("grid needs m >= 2, got {m}")));
    }
    let n = m * m;
    let label = |i: usize, j: usize| (j - 1) * m + (i - 1);
    let mut squares = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    for u in 0..n {
        let (i, j) = (u % m + 1, u / m + 1);
        squares.push(SquareIndex::new(i, j));
        positions.push(((i as f64 - 0.5) / m as f64, (j as f64 - 0.5) / m as f64));
    }
    let mut edges = Vec::with_capacity(2 * m * (m - 1));
    for j in 1..=m {
        for i in 1..=m {
            if i < m {
                edges.push((label(i, j), label(i + 1, j)));
            }
            if j < m {
                edges.push((label(i, j), label(i, j + 1)));
            }
        }
    }
    Graph::assemble(Topology::Grid2d, m, (m, m), squares, edges, Some(positions))
}

/// Squares per side for an RGG: `floor(sqrt(n / (c ln n)))`.
pub fn rgg_squares_per_side(n: usize, c: f64) -> usize {
    if n < 2 || c.is_nan() || c <= 0.0 {
        return 0;
    }
    let nf = n as f64;
    (nf / (c * nf.ln())).sqrt().floor() as usize
}

pub fn build_rgg(n: usize, c: f64, rng: &mut RandomStream) -> Result<Graph> {
    build_rgg_with_attempts(n, c, DEFAULT_RGG_ATTEMPTS, rng)
}

/// Uniform placement in the unit square, redrawn from the same stream until
/// every square is occupied or `attempts` placements have failed.
pub fn build_rgg_with_attempts(
    n: usize,
    c: f64,
    attempts: usize,
    rng: &mut RandomStream,
) -> Result<Graph> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::invalid(format!("c must be positive, got {c}")));
    }
    let m = rgg_squares_per_side(n, c);
    if m < 2 {
        return Err(Error::invalid(format!(
            "n={n}, c={c} gives {m} squares per side; need at least 2"
        )));
    }
    if attempts == 0 {
        return Err(Error::invalid("attempts must be >= 1"));
    }
    let side = (c * (n as f64).ln() / n as f64).sqrt();
    let cell = |x: f64| ((x / side).floor() as usize).min(m - 1) + 1;
    for _ in 0..attempts {
        let positions: Vec<(f64, f64)> = (0..n).map(|_| (rng.uniform(), rng.uniform())).collect();
        let squares: Vec<SquareIndex> = positions
            .iter()
            .map(|&(x, y)| SquareIndex::new(cell(x), cell(y)))
            .collect();
        let mut occupied = vec![false; m * m];
        for sq in &squares {
            occupied[(sq.i - 1) * m + (sq.j - 1)] = true;
        }
        if occupied.iter().any(|o| !o) {
            continue;
        }
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                let (a, b) = (squares[u], squares[v]);
                if a.i.abs_diff(b.i) + a.j.abs_diff(b.j) <= 1 {
                    edges.push((u, v));
                }
            }
        }
        return Graph::assemble(Topology::Rgg, m, (m, m), squares, edges, Some(positions));
    }
    Err(Error::RegularityFailure { attempts })
}

/// Hop distances from `source`; `usize::MAX` marks unreachable nodes.
pub fn bfs_distances(g: &Graph, source: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; g.n()];
    let mut queue = VecDeque::new();
    dist[source] = 0;
    queue.push_back(source);
    while let Some(u) = queue.pop_front() {
        for &v in g.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

pub fn is_connected(g: &Graph) -> bool {
    g.n() == 0 || bfs_distances(g, 0).iter().all(|&d| d != usize::MAX)
}

/// Exact hop diameter via breadth-first search from every node.
pub fn diameter(g: &Graph) -> Result<usize> {
    if !is_connected(g) {
        return Err(Error::DisconnectedGraph);
    }
    let ecc = sim::map_indexed(g.n(), |u| {
        bfs_distances(g, u).into_iter().max().unwrap_or(0)
    });
    Ok(ecc.into_iter().max().unwrap_or(0))
}

/// `Phi(t)` for `t = 0..=diameter`: the fewest nodes any node reaches within
/// `t` hops, counting itself.
pub fn spread_profile(g: &Graph) -> Result<Vec<usize>> {
    if !is_connected(g) {
        return Err(Error::DisconnectedGraph);
    }
    let per_source = sim::map_indexed(g.n(), |u| {
        let dist = bfs_distances(g, u);
        let ecc = dist.iter().copied().max().unwrap_or(0);
        let mut hist = vec![0usize; ecc + 1];
        for d in dist {
            hist[d] += 1;
        }
        let mut acc = 0;
        hist.iter_mut().for_each(|h| {
            acc += *h;
            *h = acc;
        });
        hist
    });
    let diam = per_source.iter().map(|h| h.len() - 1).max().unwrap_or(0);
    Ok((0..=diam)
        .map(|t| {
            per_source
                .iter()
                .map(|h| h.get(t).copied().unwrap_or(g.n()))
                .min()
                .unwrap_or(0)
        })
        .collect())
}

/// Graph spreading function `min_j |N(j; t)|`, the node itself included.
pub fn spread_function(g: &Graph, t: usize) -> Result<usize> {
    let profile = spread_profile(g)?;
    Ok(profile.get(t).copied().unwrap_or(g.n()))
}

/// Smallest `t` with `Phi(t) >= s`; `None` if `s` exceeds `n`.
pub fn spread_inverse(g: &Graph, s: usize) -> Result<Option<usize>> {
    let profile = spread_profile(g)?;
    Ok(profile.iter().position(|&phi| phi >= s))
}

/// Write the plain-text edge-list archive.
///
/// ```text
/// n m topology_tag
/// u v
/// ...
/// node k x y square_i square_j
/// ```
///
/// Node records are written when the graph has positions.
pub fn write_edge_list<W: Write>(g: &Graph, mut out: W) -> Result<()> {
    writeln!(out, "{} {} {}", g.n(), g.m(), g.topology().tag())?;
    for (u, v) in g.edges() {
        writeln!(out, "{u} {v}")?;
    }
    if let Some(pos) = g.positions() {
        for (k, &(x, y)) in pos.iter().enumerate() {
            let sq = g.square_of(k);
            writeln!(out, "node {k} {x} {y} {} {}", sq.i, sq.j)?;
        }
    }
    Ok(())
}

pub fn read_edge_list<R: BufRead>(input: R) -> Result<Graph> {
    let parse_err = |line: usize, message: String| Error::Parse { line, message };
    let mut lines = input.lines().enumerate();
    let (n, m, topology) = loop {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))?;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(
                idx + 1,
                "header must be `n m topology_tag`".into(),
            ));
        }
        let n: usize = fields[0]
            .parse()
            .map_err(|e| parse_err(idx + 1, format!("n: {e}")))?;
        let m: usize = fields[1]
            .parse()
            .map_err(|e| parse_err(idx + 1, format!("m: {e}")))?;
        let topology: Topology = fields[2]
            .parse()
            .map_err(|e: Error| parse_err(idx + 1, e.to_string()))?;
        break (n, m, topology);
    };

    let mut edges = Vec::new();
    let mut records: Vec<Option<((f64, f64), SquareIndex)>> = vec![None; n];
    let mut any_record = false;
    for (idx, line) in lines {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let lineno = idx + 1;
        match fields.as_slice() {
            [] => {}
            ["node", k, x, y, si, sj] => {
                let k: usize = k.parse().map_err(|e| parse_err(lineno, format!("{e}")))?;
                let x: f64 = x.parse().map_err(|e| parse_err(lineno, format!("{e}")))?;
                let y: f64 = y.parse().map_err(|e| parse_err(lineno, format!("{e}")))?;
                let si: usize = si.parse().map_err(|e| parse_err(lineno, format!("{e}")))?;
                let sj: usize = sj.parse().map_err(|e| parse_err(lineno, format!("{e}")))?;
                if k >= n {
                    return Err(parse_err(lineno, format!("node {k} out of range")));
                }
                records[k] = Some(((x, y), SquareIndex::new(si, sj)));
                any_record = true;
            }
            [u, v] => {
                let u: usize = u.parse().map_err(|e| parse_err(lineno, format!("{e}")))?;
                let v: usize = v.parse().map_err(|e| parse_err(lineno, format!("{e}")))?;
                edges.push((u, v));
            }
            _ => return Err(parse_err(lineno, format!("unrecognized record `{line}`"))),
        }
    }

    let (squares, positions, dims) = if any_record {
        let mut squares = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        for (k, rec) in records.into_iter().enumerate() {
            let (p, sq) = rec.ok_or_else(|| parse_err(0, format!("missing node record {k}")))?;
            positions.push(p);
            squares.push(sq);
        }
        let dims = match topology {
            Topology::Cycle => (1, n),
            _ => (m, m),
        };
        (squares, Some(positions), dims)
    } else {
        match topology {
            Topology::Cycle => (
                (0..n).map(|k| SquareIndex::new(1, k + 1)).collect(),
                None,
                (1, n),
            ),
            Topology::Grid2d => (
                (0..n)
                    .map(|u| SquareIndex::new(u % m + 1, u / m + 1))
                    .collect(),
                None,
                (m, m),
            ),
            Topology::Rgg => {
                return Err(parse_err(0, "rgg archive requires node records".into()));
            }
        }
    };
    Graph::assemble(topology, m, dims, squares, edges, positions)
}
