//! Communication topology: agent identifiers, an undirected graph over them,
//! and the distance machinery (BFS, eccentricity, diameter) everything else
//! builds on.
//!
//! A `Topology` is immutable once constructed; membership changes produce a
//! new, re-validated instance.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::num::NonZeroU32;

use serde::{Deserialize, Serialize};

/// Identifier of one agent. Positive, totally ordered; the order breaks every
/// tie in the system (center election, routing, iteration order), which is
/// what makes runs deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(NonZeroU32);

impl AgentId {
    /// Panics on zero; use [`AgentId::try_new`] for untrusted input.
    pub fn new(raw: u32) -> AgentId {
        AgentId::try_new(raw).expect("agent id must be positive")
    }

    pub fn try_new(raw: u32) -> Option<AgentId> {
        NonZeroU32::new(raw).map(AgentId)
    }

    pub fn get(self) -> u32 {
        self.0.get()
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("topology has no agents")]
    Empty,
    #[error("self-loop on agent {0}")]
    SelfLoop(AgentId),
    #[error("edge {a}-{b} references an agent not in the node set")]
    UnknownEndpoint { a: AgentId, b: AgentId },
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("topology is disconnected: {unreachable} of {nodes} agents unreachable from agent {start}")]
    Disconnected {
        start: AgentId,
        unreachable: usize,
        nodes: usize,
    },
}

/// Undirected communication graph. Adjacency is stored symmetrically in
/// ordered sets so that every traversal visits neighbors in ascending id
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    adjacency: BTreeMap<AgentId, BTreeSet<AgentId>>,
}

impl Topology {
    /// Builds and fully validates a topology: known endpoints, no self-loops,
    /// connected. Duplicate edges collapse silently.
    pub fn new(
        nodes: impl IntoIterator<Item = AgentId>,
        edges: &[(AgentId, AgentId)],
    ) -> Result<Topology, GraphError> {
        let t = Topology::unchecked(nodes, edges)?;
        if !t.is_connected()? {
            let start = *t.adjacency.keys().next().expect("non-empty");
            let reached = t.bfs_distances(start)?.len();
            return Err(GraphError::Disconnected {
                start,
                unreachable: t.adjacency.len() - reached,
                nodes: t.adjacency.len(),
            });
        }
        Ok(t)
    }

    /// Builds without the connectivity check. Structural validation (known
    /// endpoints, no self-loops) still applies. Intended for analyzing raw
    /// edge sets; the simulation constructors all go through [`Topology::new`].
    pub fn unchecked(
        nodes: impl IntoIterator<Item = AgentId>,
        edges: &[(AgentId, AgentId)],
    ) -> Result<Topology, GraphError> {
        let mut adjacency: BTreeMap<AgentId, BTreeSet<AgentId>> =
            nodes.into_iter().map(|n| (n, BTreeSet::new())).collect();
        for &(a, b) in edges {
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            if !adjacency.contains_key(&a) || !adjacency.contains_key(&b) {
                return Err(GraphError::UnknownEndpoint { a, b });
            }
            adjacency.get_mut(&a).expect("checked").insert(b);
            adjacency.get_mut(&b).expect("checked").insert(a);
        }
        Ok(Topology { adjacency })
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.adjacency.keys().copied()
    }

    pub fn contains(&self, a: AgentId) -> bool {
        self.adjacency.contains_key(&a)
    }

    /// Undirected edge list, each edge once, lexicographically ordered.
    pub fn edges(&self) -> Vec<(AgentId, AgentId)> {
        let mut out = Vec::new();
        for (&a, nbrs) in &self.adjacency {
            for &b in nbrs {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn neighbors(&self, a: AgentId) -> Result<&BTreeSet<AgentId>, GraphError> {
        self.adjacency.get(&a).ok_or(GraphError::UnknownAgent(a))
    }

    /// Reachability of every agent from the lowest id.
    pub fn is_connected(&self) -> Result<bool, GraphError> {
        let start = *self.adjacency.keys().next().ok_or(GraphError::Empty)?;
        Ok(self.bfs_distances(start)?.len() == self.adjacency.len())
    }

    /// Hop distances from `from`. Unreachable agents are absent from the map.
    /// Neighbors are expanded in ascending id order.
    pub fn bfs_distances(&self, from: AgentId) -> Result<BTreeMap<AgentId, u32>, GraphError> {
        if !self.adjacency.contains_key(&from) {
            return Err(GraphError::UnknownAgent(from));
        }
        let mut dist = BTreeMap::new();
        dist.insert(from, 0u32);
        let mut queue = VecDeque::new();
        queue.push_back(from);
        while let Some(a) = queue.pop_front() {
            let d = dist[&a];
            for &b in &self.adjacency[&a] {
                if !dist.contains_key(&b) {
                    dist.insert(b, d + 1);
                    queue.push_back(b);
                }
            }
        }
        Ok(dist)
    }

    /// Max distance from `a` to any agent. Errors if some agent is unreachable.
    pub fn eccentricity(&self, a: AgentId) -> Result<u32, GraphError> {
        let dist = self.bfs_distances(a)?;
        if dist.len() != self.adjacency.len() {
            return Err(GraphError::Disconnected {
                start: a,
                unreachable: self.adjacency.len() - dist.len(),
                nodes: self.adjacency.len(),
            });
        }
        Ok(dist.values().copied().max().unwrap_or(0))
    }

    /// Max eccentricity over all agents.
    pub fn diameter(&self) -> Result<u32, GraphError> {
        if self.adjacency.is_empty() {
            return Err(GraphError::Empty);
        }
        let mut best = 0;
        for a in self.nodes() {
            best = best.max(self.eccentricity(a)?);
        }
        Ok(best)
    }

    /// Min eccentricity over all agents.
    pub fn radius(&self) -> Result<u32, GraphError> {
        if self.adjacency.is_empty() {
            return Err(GraphError::Empty);
        }
        let mut best = u32::MAX;
        for a in self.nodes() {
            best = best.min(self.eccentricity(a)?);
        }
        Ok(best)
    }

    /// New topology with `id` spliced in, connected through `edges_to`.
    pub fn with_agent_added(
        &self,
        id: AgentId,
        edges_to: &[AgentId],
    ) -> Result<Topology, GraphError> {
        if self.contains(id) {
            // The caller validates id freshness with a better message; this
            // is a backstop that keeps the graph consistent.
            return Err(GraphError::SelfLoop(id));
        }
        let nodes: Vec<AgentId> = self.nodes().chain(std::iter::once(id)).collect();
        let mut edges = self.edges();
        edges.extend(edges_to.iter().map(|&b| (id, b)));
        Topology::new(nodes, &edges)
    }

    /// New topology with `ids` and their incident edges removed. Fails if the
    /// remainder is empty or disconnected.
    pub fn with_agents_removed(&self, ids: &[AgentId]) -> Result<Topology, GraphError> {
        for &id in ids {
            if !self.contains(id) {
                return Err(GraphError::UnknownAgent(id));
            }
        }
        let gone: BTreeSet<AgentId> = ids.iter().copied().collect();
        let nodes: Vec<AgentId> = self.nodes().filter(|n| !gone.contains(n)).collect();
        if nodes.is_empty() {
            return Err(GraphError::Empty);
        }
        let edges: Vec<(AgentId, AgentId)> = self
            .edges()
            .into_iter()
            .filter(|(a, b)| !gone.contains(a) && !gone.contains(b))
            .collect();
        Topology::new(nodes, &edges)
    }
}
