//! Distributed construction of a small-diameter spanning tree: every agent
//! floods distance vectors until it holds a complete routing table, agents
//! then flood their eccentricities, elect the vertex with minimum
//! eccentricity as root, and adopt their next hop toward that root as tree
//! parent. The result is a shortest-path tree whose diameter is within one
//! hop of the best any spanning tree can do.
//!
//! [`ApspAgent`] is the per-agent state machine; [`distributed_apsp`] drives
//! a set of them round-synchronously. The engine drives the same machines
//! through its message channel, so there is exactly one implementation of
//! the protocol.

use std::collections::{BTreeMap, BTreeSet};

use crate::graph::{AgentId, Topology};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MdstError {
    #[error("flood stalled after {rounds} rounds with {incomplete} incomplete agents; topology is disconnected")]
    Disconnected { rounds: u32, incomplete: usize },
    #[error("distance table of agent {0} is incomplete")]
    IncompleteTable(AgentId),
    #[error("parent chain from agent {0} does not reach the root (cycle in overlay)")]
    Cycle(AgentId),
    #[error("overlay edge {a}-{b} is not an edge of the topology")]
    EdgeNotInTopology { a: AgentId, b: AgentId },
    #[error("overlay spans the wrong agent set (expected {expected} agents, got {got})")]
    SpanMismatch { expected: usize, got: usize },
    #[error("root-distance mismatch at agent {agent}: {tree} hops in tree, {graph} in graph")]
    RootDistance { agent: AgentId, tree: u32, graph: u32 },
}

/// One agent's complete routing knowledge: hop distance and first hop for
/// every destination. Distance to self is 0 with next_hop = self.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceTable {
    entries: BTreeMap<AgentId, (u32, AgentId)>,
}

impl DistanceTable {
    pub fn distance(&self, to: AgentId) -> Option<u32> {
        self.entries.get(&to).map(|&(d, _)| d)
    }

    pub fn next_hop(&self, to: AgentId) -> Option<AgentId> {
        self.entries.get(&to).map(|&(_, h)| h)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Max distance in the table: the owner's eccentricity once complete.
    pub fn eccentricity(&self) -> u32 {
        self.entries.values().map(|&(d, _)| d).max().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (AgentId, u32, AgentId)> + '_ {
        self.entries.iter().map(|(&to, &(d, h))| (to, d, h))
    }
}

/// What one agent hands to its neighbors in one round: distance entries and
/// eccentricity values not announced before. Both lists are in ascending
/// subject order.
#[derive(Debug, Clone, PartialEq)]
pub struct FloodAnnouncement {
    pub distances: Vec<(AgentId, u32)>,
    pub eccentricities: Vec<(AgentId, u32)>,
}

impl FloodAnnouncement {
    pub fn is_empty(&self) -> bool {
        self.distances.is_empty() && self.eccentricities.is_empty()
    }
}

/// Per-agent state machine for the two overlapped floods. Knows the total
/// number of live agents (public membership information) but nothing else
/// beyond what arrives from neighbors.
#[derive(Debug, Clone)]
pub struct ApspAgent {
    id: AgentId,
    total_agents: usize,
    table: BTreeMap<AgentId, (u32, AgentId)>,
    dirty_distances: BTreeSet<AgentId>,
    eccentricities: BTreeMap<AgentId, u32>,
    dirty_eccentricities: BTreeSet<AgentId>,
}

impl ApspAgent {
    pub fn new(id: AgentId, total_agents: usize) -> ApspAgent {
        let mut a = ApspAgent {
            id,
            total_agents,
            table: BTreeMap::new(),
            dirty_distances: BTreeSet::new(),
            eccentricities: BTreeMap::new(),
            dirty_eccentricities: BTreeSet::new(),
        };
        a.table.insert(id, (0, id));
        a.dirty_distances.insert(id);
        a.on_table_growth();
        a
    }

    pub fn id(&self) -> AgentId {
        self.id
    }

    /// Drains everything learned since the previous call.
    pub fn drain_announcement(&mut self) -> FloodAnnouncement {
        let distances = std::mem::take(&mut self.dirty_distances)
            .into_iter()
            .map(|to| (to, self.table[&to].0))
            .collect();
        let eccentricities = std::mem::take(&mut self.dirty_eccentricities)
            .into_iter()
            .map(|of| (of, self.eccentricities[&of]))
            .collect();
        FloodAnnouncement {
            distances,
            eccentricities,
        }
    }

    /// Folds a neighbor's announcement in. `from` must be a topology
    /// neighbor; the route via it costs one extra hop. Equal-length routes
    /// keep the lower next hop, so the winner does not depend on delivery
    /// order.
    pub fn receive(&mut self, from: AgentId, announcement: &FloodAnnouncement) {
        for &(to, d) in &announcement.distances {
            let candidate = (d + 1, from);
            let better = match self.table.get(&to) {
                None => true,
                Some(&(cur_d, cur_h)) => {
                    candidate.0 < cur_d || (candidate.0 == cur_d && from < cur_h)
                }
            };
            if better {
                let grew = self.table.insert(to, candidate).is_none();
                self.dirty_distances.insert(to);
                if grew {
                    self.on_table_growth();
                }
            }
        }
        for &(of, ecc) in &announcement.eccentricities {
            if self.eccentricities.insert(of, ecc).is_none() {
                self.dirty_eccentricities.insert(of);
            }
        }
    }

    fn on_table_growth(&mut self) {
        if self.table.len() == self.total_agents {
            let own = self.table.values().map(|&(d, _)| d).max().unwrap_or(0);
            if self.eccentricities.insert(self.id, own).is_none() {
                self.dirty_eccentricities.insert(self.id);
            }
        }
    }

    pub fn table_complete(&self) -> bool {
        self.table.len() == self.total_agents
    }

    pub fn flood_complete(&self) -> bool {
        self.table_complete() && self.eccentricities.len() == self.total_agents
    }

    /// Local election once the flood is done: lowest (eccentricity, id).
    pub fn elect(&self) -> Option<AgentId> {
        if !self.flood_complete() {
            return None;
        }
        self.eccentricities
            .iter()
            .map(|(&a, &e)| (e, a))
            .min()
            .map(|(_, a)| a)
    }

    /// Tree parent choice: own next hop toward `center` (self if center).
    pub fn parent_toward(&self, center: AgentId) -> Option<AgentId> {
        self.table.get(&center).map(|&(_, h)| h)
    }

    pub fn into_table(self) -> DistanceTable {
        DistanceTable {
            entries: self.table,
        }
    }
}

/// Upper bound on flood rounds: one sweep of at most `n` rounds fills the
/// tables, one more spreads the eccentricities. Connected inputs finish far
/// earlier; hitting the cap means some agent is unreachable.
pub(crate) fn round_cap(n: usize) -> u32 {
    2 * n as u32 + 2
}

/// Runs the flood to completion and returns every agent's routing table.
/// Purely a driver around [`ApspAgent`]; one loop iteration is one
/// synchronous message round.
pub fn distributed_apsp(
    topology: &Topology,
) -> Result<BTreeMap<AgentId, DistanceTable>, MdstError> {
    let n = topology.node_count();
    let mut agents: BTreeMap<AgentId, ApspAgent> = topology
        .nodes()
        .map(|a| (a, ApspAgent::new(a, n)))
        .collect();
    let mut rounds = 0u32;
    while !agents.values().all(ApspAgent::flood_complete) {
        if rounds >= round_cap(n) {
            let incomplete = agents.values().filter(|a| !a.flood_complete()).count();
            return Err(MdstError::Disconnected { rounds, incomplete });
        }
        let outbox: BTreeMap<AgentId, FloodAnnouncement> = agents
            .iter_mut()
            .map(|(&id, a)| (id, a.drain_announcement()))
            .collect();
        for (&sender, announcement) in &outbox {
            if announcement.is_empty() {
                continue;
            }
            for &nbr in topology.neighbors(sender).expect("sender in topology") {
                agents
                    .get_mut(&nbr)
                    .expect("neighbor in topology")
                    .receive(sender, announcement);
            }
        }
        rounds += 1;
    }
    Ok(agents
        .into_iter()
        .map(|(id, a)| (id, a.into_table()))
        .collect())
}

/// Picks the root every agent would pick locally: minimum eccentricity, ties
/// to the lowest id. Eccentricities come straight out of each agent's own
/// table.
pub fn elect_center(tables: &BTreeMap<AgentId, DistanceTable>) -> Result<AgentId, MdstError> {
    let n = tables.len();
    let mut best: Option<(u32, AgentId)> = None;
    for (&a, table) in tables {
        if table.len() != n {
            return Err(MdstError::IncompleteTable(a));
        }
        let key = (table.eccentricity(), a);
        if best.map_or(true, |b| key < b) {
            best = Some(key);
        }
    }
    best.map(|(_, a)| a)
        .ok_or(MdstError::SpanMismatch {
            expected: 1,
            got: 0,
        })
}

/// The finished overlay. Immutable; rebuilt from scratch on membership
/// changes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeOverlay {
    pub root: AgentId,
    /// Every agent's parent; the root maps to itself.
    pub parent: BTreeMap<AgentId, AgentId>,
    pub tree_neighbors: BTreeMap<AgentId, BTreeSet<AgentId>>,
    pub tree_diameter: u32,
}

impl TreeOverlay {
    pub fn nodes(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.parent.keys().copied()
    }

    pub fn node_count(&self) -> usize {
        self.parent.len()
    }

    pub fn degree(&self, a: AgentId) -> usize {
        self.tree_neighbors.get(&a).map_or(0, BTreeSet::len)
    }
}

fn bfs_over(
    neighbors: &BTreeMap<AgentId, BTreeSet<AgentId>>,
    start: AgentId,
) -> BTreeMap<AgentId, u32> {
    let mut dist = BTreeMap::new();
    dist.insert(start, 0u32);
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(start);
    while let Some(a) = queue.pop_front() {
        let d = dist[&a];
        for &b in &neighbors[&a] {
            if !dist.contains_key(&b) {
                dist.insert(b, d + 1);
                queue.push_back(b);
            }
        }
    }
    dist
}

/// Validates a parent map against the topology and packages it up. Checks:
/// spanning, edges real, no cycles, and that hop counts from the root match
/// the graph's shortest distances (the overlay must not stretch any
/// root path).
pub fn assemble_overlay(
    topology: &Topology,
    center: AgentId,
    parents: &BTreeMap<AgentId, AgentId>,
) -> Result<TreeOverlay, MdstError> {
    let n = topology.node_count();
    if parents.len() != n || !topology.nodes().all(|a| parents.contains_key(&a)) {
        return Err(MdstError::SpanMismatch {
            expected: n,
            got: parents.len(),
        });
    }
    let mut tree_neighbors: BTreeMap<AgentId, BTreeSet<AgentId>> =
        topology.nodes().map(|a| (a, BTreeSet::new())).collect();
    for (&a, &p) in parents {
        if a == center {
            if p != center {
                return Err(MdstError::Cycle(a));
            }
            continue;
        }
        if !topology.neighbors(a).map_or(false, |ns| ns.contains(&p)) {
            return Err(MdstError::EdgeNotInTopology { a, b: p });
        }
        tree_neighbors.get_mut(&a).expect("spanning").insert(p);
        tree_neighbors.get_mut(&p).expect("spanning").insert(a);
    }
    // Walk every parent chain; a chain longer than n edges can only loop.
    let graph_dist = topology
        .bfs_distances(center)
        .map_err(|_| MdstError::Cycle(center))?;
    for a in topology.nodes() {
        let mut cur = a;
        let mut hops = 0u32;
        while cur != center {
            cur = parents[&cur];
            hops += 1;
            if hops as usize > n {
                return Err(MdstError::Cycle(a));
            }
        }
        let graph = *graph_dist.get(&a).expect("topology connected");
        if hops != graph {
            return Err(MdstError::RootDistance {
                agent: a,
                tree: hops,
                graph,
            });
        }
    }
    // Double BFS gives the exact diameter of a tree.
    let from_root = bfs_over(&tree_neighbors, center);
    let far = from_root
        .iter()
        .map(|(&a, &d)| (d, std::cmp::Reverse(a)))
        .max()
        .map(|(_, std::cmp::Reverse(a))| a)
        .expect("non-empty");
    let tree_diameter = bfs_over(&tree_neighbors, far)
        .values()
        .copied()
        .max()
        .unwrap_or(0);
    Ok(TreeOverlay {
        root: center,
        parent: parents.clone(),
        tree_neighbors,
        tree_diameter,
    })
}

/// Tree assembly from complete routing tables: every non-root agent adopts
/// its next hop toward the center.
pub fn build_tree(
    topology: &Topology,
    tables: &BTreeMap<AgentId, DistanceTable>,
    center: AgentId,
) -> Result<TreeOverlay, MdstError> {
    let mut parents = BTreeMap::new();
    for (&a, table) in tables {
        if table.len() != tables.len() {
            return Err(MdstError::IncompleteTable(a));
        }
        let p = if a == center {
            center
        } else {
            table.next_hop(center).ok_or(MdstError::IncompleteTable(a))?
        };
        parents.insert(a, p);
    }
    assemble_overlay(topology, center, &parents)
}

/// Full pipeline on a given topology: flood, elect, assemble.
pub fn construct(topology: &Topology) -> Result<TreeOverlay, MdstError> {
    let tables = distributed_apsp(topology)?;
    let center = elect_center(&tables)?;
    build_tree(topology, &tables, center)
}
