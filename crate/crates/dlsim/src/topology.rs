//! Communication graphs: construction and validation of the undirected
//! topology and the neighbor sets `nn(v)`. Every node's neighbor set
//! includes the node itself, so the round engine's aggregation is a plain
//! mean over `nn(v)`.

use crate::numkit::{Matrix, StreamRng};
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

const RESTART_BUDGET: usize = 1000;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("graph is disconnected; components: {0}")]
    Disconnected(String),
    #[error("restart budget exhausted after {attempts} attempts: {reason}")]
    RestartBudget { attempts: usize, reason: String },
    #[error("{path}:{line}: {message}")]
    MalformedEdge {
        path: String,
        line: usize,
        message: String,
    },
    #[error("edge ({u}, {v}) out of range for {n} nodes")]
    OutOfRange { u: usize, v: usize, n: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Undirected communication graph over user indices. Adjacency lists are
/// sorted and always contain the node itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    adjacency: Vec<Vec<usize>>,
}

impl Topology {
    /// Build from undirected edges (self-loops implied, duplicates ignored).
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, TopologyError> {
        if n == 0 {
            return Err(TopologyError::InvalidArgument("need at least 1 node".into()));
        }
        let mut sets: Vec<BTreeSet<usize>> = (0..n).map(|v| BTreeSet::from([v])).collect();
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(TopologyError::OutOfRange { u, v, n });
            }
            sets[u].insert(v);
            sets[v].insert(u);
        }
        let topo = Self {
            adjacency: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        };
        topo.check_connected()?;
        Ok(topo)
    }

    pub fn n(&self) -> usize {
        self.adjacency.len()
    }

    /// nn(v), sorted, including v itself.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    /// |nn(v)| including the self term.
    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn contains_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].binary_search(&v).is_ok()
    }

    /// Mean over nodes of |nn(v)| - 1 (the conventional graph degree).
    pub fn average_degree(&self) -> f64 {
        let total: usize = self.adjacency.iter().map(|a| a.len() - 1).sum();
        total as f64 / self.n() as f64
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n()).all(|v| {
            self.adjacency[v]
                .iter()
                .all(|&u| self.adjacency[u].binary_search(&v).is_ok())
        })
    }

    fn components(&self) -> Vec<Vec<usize>> {
        let n = self.n();
        let mut seen = vec![false; n];
        let mut components = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut queue = std::collections::VecDeque::from([start]);
            let mut comp = Vec::new();
            seen[start] = true;
            while let Some(v) = queue.pop_front() {
                comp.push(v);
                for &u in &self.adjacency[v] {
                    if !seen[u] {
                        seen[u] = true;
                        queue.push_back(u);
                    }
                }
            }
            components.push(comp);
        }
        components
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() == 1
    }

    fn check_connected(&self) -> Result<(), TopologyError> {
        let comps = self.components();
        if comps.len() == 1 {
            return Ok(());
        }
        let desc = comps
            .iter()
            .map(|c| format!("{c:?}"))
            .collect::<Vec<_>>()
            .join(" | ");
        Err(TopologyError::Disconnected(desc))
    }
}

/// Path graph u_0 - u_1 - ... - u_{n-1}.
pub fn chain(n: usize) -> Result<Topology, TopologyError> {
    if n < 2 {
        return Err(TopologyError::InvalidArgument(format!(
            "chain needs n >= 2, got {n}"
        )));
    }
    let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
    Topology::from_edges(n, &edges)
}

/// 2-D wraparound grid; every node has exactly four distinct neighbors.
pub fn torus(rows: usize, cols: usize) -> Result<Topology, TopologyError> {
    if rows < 3 || cols < 3 {
        return Err(TopologyError::InvalidArgument(format!(
            "torus needs rows >= 3 and cols >= 3, got {rows}x{cols}"
        )));
    }
    let n = rows * cols;
    let mut edges = Vec::with_capacity(2 * n);
    for r in 0..rows {
        for c in 0..cols {
            let v = r * cols + c;
            edges.push((v, r * cols + (c + 1) % cols));
            edges.push((v, ((r + 1) % rows) * cols + c));
        }
    }
    Topology::from_edges(n, &edges)
}

/// Complete graph: every nn(v) is the whole user set.
pub fn complete(n: usize) -> Result<Topology, TopologyError> {
    if n == 0 {
        return Err(TopologyError::InvalidArgument("complete needs n >= 1".into()));
    }
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            edges.push((u, v));
        }
    }
    Topology::from_edges(n, &edges)
}

/// d-regular simple graph via the pairing model, regenerated until the
/// sample is simple and connected.
pub fn random_regular(rng: &mut StreamRng, n: usize, d: usize) -> Result<Topology, TopologyError> {
    if d < 2 {
        return Err(TopologyError::InvalidArgument(format!("need d >= 2, got {d}")));
    }
    if d >= n {
        return Err(TopologyError::InvalidArgument(format!(
            "need d < n, got d={d}, n={n}"
        )));
    }
    if (n * d) % 2 != 0 {
        return Err(TopologyError::InvalidArgument(format!(
            "n*d must be even, got n={n}, d={d}"
        )));
    }
    for _ in 1..=RESTART_BUDGET {
        let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat(v).take(d)).collect();
        rng.shuffle(&mut stubs);
        let mut seen = BTreeSet::new();
        let mut simple = true;
        let mut edges = Vec::with_capacity(n * d / 2);
        for pair in stubs.chunks(2) {
            let (u, v) = (pair[0], pair[1]);
            if u == v || !seen.insert((u.min(v), u.max(v))) {
                simple = false;
                break;
            }
            edges.push((u, v));
        }
        if !simple {
            continue;
        }
        match Topology::from_edges(n, &edges) {
            Ok(t) => return Ok(t),
            Err(TopologyError::Disconnected(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(TopologyError::RestartBudget {
        attempts: RESTART_BUDGET,
        reason: format!("no simple connected {d}-regular graph on {n} nodes found"),
    })
}

/// Erdos-Renyi random graph with edge probability `ln(n)/n` (natural log),
/// regenerated until connected.
pub fn expander(rng: &mut StreamRng, n: usize) -> Result<Topology, TopologyError> {
    if n < 4 {
        return Err(TopologyError::InvalidArgument(format!(
            "expander needs n >= 4, got {n}"
        )));
    }
    let p = (n as f64).ln() / n as f64;
    for _ in 1..=RESTART_BUDGET {
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.uniform() < p {
                    edges.push((u, v));
                }
            }
        }
        match Topology::from_edges(n, &edges) {
            Ok(t) => return Ok(t),
            Err(TopologyError::Disconnected(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(TopologyError::RestartBudget {
        attempts: RESTART_BUDGET,
        reason: format!("no connected sample at p=ln({n})/{n}"),
    })
}

/// Read a whitespace-separated `u v` edge list, 0-based; `#` lines are
/// comments. Duplicates collapse, edges are symmetrized, self-loops added.
pub fn from_edge_list(path: &Path, n: usize) -> Result<Topology, TopologyError> {
    let text = std::fs::read_to_string(path).map_err(|source| TopologyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_edge_list(&text, &path.display().to_string(), n)
}

pub fn parse_edge_list(text: &str, path: &str, n: usize) -> Result<Topology, TopologyError> {
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<usize, TopologyError> {
            tok.and_then(|t| t.parse().ok())
                .ok_or_else(|| TopologyError::MalformedEdge {
                    path: path.into(),
                    line: line_no,
                    message: format!("expected two 0-based integers, got '{line}'"),
                })
        };
        let u = parse(parts.next())?;
        let v = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(TopologyError::MalformedEdge {
                path: path.into(),
                line: line_no,
                message: format!("trailing tokens in '{line}'"),
            });
        }
        edges.push((u, v));
    }
    Topology::from_edges(n, &edges)
}

/// All-pairs BFS hop counts; self-loops are ignored for distances.
pub fn shortest_path_distances(topology: &Topology) -> Matrix {
    let n = topology.n();
    let mut out = Matrix::zeros(n, n);
    for start in 0..n {
        let mut dist = vec![usize::MAX; n];
        dist[start] = 0;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for &u in topology.neighbors(v) {
                if u != v && dist[u] == usize::MAX {
                    dist[u] = dist[v] + 1;
                    queue.push_back(u);
                }
            }
        }
        for (v, &d) in dist.iter().enumerate() {
            out.set(start, v, d as f64);
        }
    }
    out
}
