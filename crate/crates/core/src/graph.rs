//! Areal adjacency graphs and their text formats.
//!
//! Two input formats are accepted:
//!
//! * neighbor list: first line is the number of areas `n`, followed by one
//!   line per area `<id> <num-neighbors> <neighbor-id...>` with 1-based ids.
//!   Every neighbor relation has to be listed from both ends.
//! * edge list CSV with header `from,to`, one undirected edge per row. The
//!   number of areas is the largest id seen.

use std::collections::{BTreeSet, VecDeque};
use std::io::BufRead;

use crate::error::{Result, VpError};

/// Undirected adjacency between `n_areas` areas (0-based internally).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyGraph {
    neighbors: Vec<Vec<usize>>,
    components: Vec<Vec<usize>>,
    component_of: Vec<usize>,
}

impl AdjacencyGraph {
    /// Builds a graph from 0-based undirected edges. Duplicates are merged.
    pub fn from_edges(n_areas: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_areas == 0 {
            return Err(VpError::Validation("graph must have at least one area".into()));
        }
        let mut sets = vec![BTreeSet::new(); n_areas];
        for &(a, b) in edges {
            if a >= n_areas || b >= n_areas {
                return Err(VpError::Validation(format!(
                    "edge ({}, {}) references an area outside 1..={}",
                    a + 1,
                    b + 1,
                    n_areas
                )));
            }
            if a == b {
                return Err(VpError::Validation(format!("self-loop on area {}", a + 1)));
            }
            sets[a].insert(b);
            sets[b].insert(a);
        }
        let neighbors: Vec<Vec<usize>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(Self::with_components(neighbors))
    }

    fn with_components(neighbors: Vec<Vec<usize>>) -> Self {
        let n = neighbors.len();
        let mut component_of = vec![usize::MAX; n];
        let mut components = Vec::new();
        for start in 0..n {
            if component_of[start] != usize::MAX {
                continue;
            }
            let id = components.len();
            let mut members = vec![start];
            component_of[start] = id;
            let mut queue = VecDeque::from([start]);
            while let Some(k) = queue.pop_front() {
                for &l in &neighbors[k] {
                    if component_of[l] == usize::MAX {
                        component_of[l] = id;
                        members.push(l);
                        queue.push_back(l);
                    }
                }
            }
            members.sort_unstable();
            components.push(members);
        }
        Self {
            neighbors,
            components,
            component_of,
        }
    }

    /// Path graph 1 - 2 - ... - n.
    pub fn path(n: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|k| (k - 1, k)).collect();
        Self::from_edges(n, &edges)
    }

    /// Rook-adjacency lattice with `rows * cols` areas, numbered row-major.
    pub fn lattice(rows: usize, cols: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let k = r * cols + c;
                if c + 1 < cols {
                    edges.push((k, k + 1));
                }
                if r + 1 < rows {
                    edges.push((k, k + cols));
                }
            }
        }
        Self::from_edges(rows * cols, &edges)
    }

    pub fn n_areas(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, area: usize) -> &[usize] {
        &self.neighbors[area]
    }

    /// Number of neighbours `m_k` of every area.
    pub fn neighbor_counts(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    /// Edges as `(a, b)` pairs with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, nb)| nb.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
            .collect()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    pub fn component_of(&self, area: usize) -> usize {
        self.component_of[area]
    }

    /// Components with more than one area; these carry a structured effect.
    pub fn structured_components(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.components.iter().filter(|c| c.len() > 1)
    }

    pub fn n_structured_components(&self) -> usize {
        self.structured_components().count()
    }

    /// Areas that form a component on their own.
    pub fn singletons(&self) -> Vec<usize> {
        self.components
            .iter()
            .filter(|c| c.len() == 1)
            .map(|c| c[0])
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        self.components.len() == 1
    }

    /// Parses either supported format, detected from the first non-empty line.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| VpError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            lines.push((idx + 1, trimmed.to_string()));
        }
        let Some((_, first)) = lines.first() else {
            return Err(VpError::Parse {
                line: 1,
                message: "empty graph file".into(),
            });
        };
        let header: Vec<_> = first.split(',').map(str::trim).collect();
        if header == ["from", "to"] {
            Self::parse_edge_csv(&lines[1..])
        } else {
            Self::parse_neighbor_list(&lines)
        }
    }

    fn parse_neighbor_list(lines: &[(usize, String)]) -> Result<Self> {
        let (first_no, first) = &lines[0];
        let n: usize = first.parse().map_err(|_| VpError::Parse {
            line: *first_no,
            message: format!("expected the number of areas, found '{first}'"),
        })?;
        if n == 0 {
            return Err(VpError::Parse {
                line: *first_no,
                message: "number of areas must be positive".into(),
            });
        }
        let mut listed: Vec<Option<Vec<usize>>> = vec![None; n];
        for (line_no, text) in &lines[1..] {
            let fields: Vec<usize> = text
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>().map_err(|_| VpError::Parse {
                        line: *line_no,
                        message: format!("'{tok}' is not a non-negative integer"),
                    })
                })
                .collect::<Result<_>>()?;
            if fields.len() < 2 {
                return Err(VpError::Parse {
                    line: *line_no,
                    message: "expected '<node-id> <num-neighbors> <neighbor-id...>'".into(),
                });
            }
            let (node, count) = (fields[0], fields[1]);
            let nbrs = &fields[2..];
            if nbrs.len() != count {
                return Err(VpError::Parse {
                    line: *line_no,
                    message: format!("node {node} declares {count} neighbours but lists {}", nbrs.len()),
                });
            }
            for &id in std::iter::once(&node).chain(nbrs) {
                if id == 0 || id > n {
                    return Err(VpError::Validation(format!(
                        "line {line_no}: area id {id} outside 1..={n}"
                    )));
                }
            }
            let slot = &mut listed[node - 1];
            if slot.is_some() {
                return Err(VpError::Validation(format!("line {line_no}: area {node} listed twice")));
            }
            *slot = Some(nbrs.iter().map(|&id| id - 1).collect());
        }
        let mut sets = Vec::with_capacity(n);
        for (k, entry) in listed.into_iter().enumerate() {
            let nbrs = entry.ok_or_else(|| VpError::Validation(format!("area {} has no neighbour line", k + 1)))?;
            let set: BTreeSet<usize> = nbrs.into_iter().collect();
            if set.contains(&k) {
                return Err(VpError::Validation(format!("self-loop on area {}", k + 1)));
            }
            sets.push(set);
        }
        for (a, set) in sets.iter().enumerate() {
            for &b in set {
                if !sets[b].contains(&a) {
                    return Err(VpError::Validation(format!(
                        "asymmetric listing: area {} lists {} but {} does not list {}",
                        a + 1,
                        b + 1,
                        b + 1,
                        a + 1
                    )));
                }
            }
        }
        Ok(Self::with_components(sets.into_iter().map(|s| s.into_iter().collect()).collect()))
    }

    fn parse_edge_csv(lines: &[(usize, String)]) -> Result<Self> {
        let mut edges = Vec::with_capacity(lines.len());
        let mut n = 0;
        for (line_no, text) in lines {
            let parts: Vec<_> = text.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(VpError::Parse {
                    line: *line_no,
                    message: "expected two comma-separated area ids".into(),
                });
            }
            let mut ids = [0usize; 2];
            for (slot, tok) in ids.iter_mut().zip(&parts) {
                *slot = tok.parse().map_err(|_| VpError::Parse {
                    line: *line_no,
                    message: format!("'{tok}' is not a positive integer"),
                })?;
                if *slot == 0 {
                    return Err(VpError::Validation(format!("line {line_no}: area ids are 1-based")));
                }
            }
            n = n.max(ids[0]).max(ids[1]);
            edges.push((ids[0] - 1, ids[1] - 1));
        }
        if n == 0 {
            return Err(VpError::Validation("edge list contains no edges".into()));
        }
        Self::from_edges(n, &edges)
    }

    /// Neighbor-list rendering accepted by [`AdjacencyGraph::parse`].
    pub fn to_neighbor_list(&self) -> String {
        let mut out = format!("{}\n", self.n_areas());
        for (k, nb) in self.neighbors.iter().enumerate() {
            out.push_str(&format!("{} {}", k + 1, nb.len()));
            for &l in nb {
                out.push_str(&format!(" {}", l + 1));
            }
            out.push('\n');
        }
        out
    }
}
