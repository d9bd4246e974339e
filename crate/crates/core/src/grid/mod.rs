//! Distribution-network graph model and topology queries.
//!
//! A [`NetworkGraph`] is immutable once loaded. Switch positions and failed
//! lines are runtime state and are always passed in explicitly, so a single
//! graph can be shared read-only between environments and worker threads.
//!
//! Nodes are addressed by dense index (`0..n_buses`, buses sorted by id);
//! lines and switches are likewise kept sorted by id.

mod format;

use std::collections::{BTreeSet, HashMap, VecDeque};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::unionfind::UnionFind;

pub use format::{load_network, serialize_network};

pub type BusId = u32;
pub type LineId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{what} references unknown {kind} {id}")]
    DanglingReference {
        what: String,
        kind: &'static str,
        id: u32,
    },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u32 },
    #[error("line {id}: resistance must be positive, got {r_pu}")]
    NonPositiveResistance { id: LineId, r_pu: f64 },
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("unknown line id {0}")]
    UnknownLine(LineId),
    #[error("unknown node index {0}")]
    UnknownNode(usize),
    #[error("expected {expected} switch states, got {got}")]
    SwitchStateCount { expected: usize, got: usize },
}

/// Set of phases carried by a bus, load or line section (bits 0..=2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Phases(u8);

impl Phases {
    pub const ALL: Phases = Phases(0b111);

    pub fn from_list(phases: &[u8]) -> Option<Self> {
        let mut bits = 0u8;
        for &p in phases {
            if !(1..=3).contains(&p) {
                return None;
            }
            bits |= 1 << (p - 1);
        }
        (bits != 0).then_some(Phases(bits))
    }

    /// `phase` is zero-based.
    pub fn contains(self, phase: usize) -> bool {
        phase < 3 && self.0 & (1 << phase) != 0
    }

    pub fn is_subset_of(self, other: Phases) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Zero-based phase indices.
    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..3).filter(move |&p| self.contains(p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: BusId,
    pub name: String,
    pub phases: Phases,
    pub is_substation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub id: LineId,
    pub from_bus: BusId,
    pub to_bus: BusId,
    pub r_pu: f64,
    /// Parsed and preserved, unused by the resistive flow model.
    pub x_pu: f64,
    pub has_switch: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SwitchKind {
    Sectionalizing,
    Tie,
}

impl SwitchKind {
    pub fn default_state(self) -> SwitchState {
        match self {
            SwitchKind::Sectionalizing => SwitchState::Closed,
            SwitchKind::Tie => SwitchState::Open,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SwitchState {
    Open,
    Closed,
}

impl SwitchState {
    pub fn is_closed(self) -> bool {
        self == SwitchState::Closed
    }

    pub fn from_closed(closed: bool) -> Self {
        if closed {
            SwitchState::Closed
        } else {
            SwitchState::Open
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Switch {
    pub line_id: LineId,
    pub kind: SwitchKind,
    pub default_state: SwitchState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Load {
    pub bus_id: BusId,
    /// Demand on each of the load's phases.
    pub p_kw: f64,
    pub phases: Phases,
    pub sheddable: bool,
}

impl Load {
    pub fn total_kw(&self) -> f64 {
        self.p_kw * self.phases.count() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DerMode {
    GridForming,
    GridFeeding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Der {
    pub bus_id: BusId,
    pub rating_kw: f64,
    pub mode: DerMode,
    pub enabled: bool,
}

/// Buses, lines, switches, loads and DERs of one feeder.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    switches: Vec<Switch>,
    loads: Vec<Load>,
    ders: Vec<Der>,
    bus_index: HashMap<BusId, usize>,
    line_index: HashMap<LineId, usize>,
    /// line position -> switch position
    line_switch: Vec<Option<usize>>,
}

impl NetworkGraph {
    /// Builds a graph from its parts and checks every cross-reference.
    pub fn new(
        mut buses: Vec<Bus>,
        mut lines: Vec<Line>,
        mut switches: Vec<Switch>,
        loads: Vec<Load>,
        ders: Vec<Der>,
    ) -> Result<Self, GridError> {
        buses.sort_by_key(|b| b.id);
        lines.sort_by_key(|l| l.id);
        switches.sort_by_key(|s| s.line_id);

        let mut bus_index = HashMap::with_capacity(buses.len());
        for (i, b) in buses.iter().enumerate() {
            if bus_index.insert(b.id, i).is_some() {
                return Err(GridError::DuplicateId {
                    kind: "bus",
                    id: b.id,
                });
            }
        }
        if buses.is_empty() {
            return Err(GridError::Invalid("network has no buses".into()));
        }
        let n_sub = buses.iter().filter(|b| b.is_substation).count();
        if n_sub != 1 {
            return Err(GridError::Invalid(format!(
                "expected exactly one substation bus, found {n_sub}"
            )));
        }

        let mut line_index = HashMap::with_capacity(lines.len());
        for (i, l) in lines.iter().enumerate() {
            if line_index.insert(l.id, i).is_some() {
                return Err(GridError::DuplicateId {
                    kind: "line",
                    id: l.id,
                });
            }
            for end in [l.from_bus, l.to_bus] {
                if !bus_index.contains_key(&end) {
                    return Err(GridError::DanglingReference {
                        what: format!("line {}", l.id),
                        kind: "bus",
                        id: end,
                    });
                }
            }
            if l.from_bus == l.to_bus {
                return Err(GridError::Invalid(format!(
                    "line {} is a self-loop on bus {}",
                    l.id, l.from_bus
                )));
            }
            if !(l.r_pu > 0.0) || !l.r_pu.is_finite() {
                return Err(GridError::NonPositiveResistance {
                    id: l.id,
                    r_pu: l.r_pu,
                });
            }
            if !(l.x_pu >= 0.0) {
                return Err(GridError::Invalid(format!(
                    "line {}: negative reactance",
                    l.id
                )));
            }
        }

        let mut line_switch = vec![None; lines.len()];
        for (si, s) in switches.iter().enumerate() {
            let Some(&li) = line_index.get(&s.line_id) else {
                return Err(GridError::DanglingReference {
                    what: "switch".into(),
                    kind: "line",
                    id: s.line_id,
                });
            };
            if line_switch[li].is_some() {
                return Err(GridError::DuplicateId {
                    kind: "switch on line",
                    id: s.line_id,
                });
            }
            line_switch[li] = Some(si);
        }
        for (li, l) in lines.iter_mut().enumerate() {
            l.has_switch = line_switch[li].is_some();
        }

        for (k, ld) in loads.iter().enumerate() {
            let Some(&bi) = bus_index.get(&ld.bus_id) else {
                return Err(GridError::DanglingReference {
                    what: format!("load #{k}"),
                    kind: "bus",
                    id: ld.bus_id,
                });
            };
            if !(ld.p_kw >= 0.0) || !ld.p_kw.is_finite() {
                return Err(GridError::Invalid(format!("load #{k}: negative demand")));
            }
            if !ld.phases.is_subset_of(buses[bi].phases) {
                return Err(GridError::Invalid(format!(
                    "load #{k}: phases not carried by bus {}",
                    ld.bus_id
                )));
            }
        }
        for (k, d) in ders.iter().enumerate() {
            if !bus_index.contains_key(&d.bus_id) {
                return Err(GridError::DanglingReference {
                    what: format!("der #{k}"),
                    kind: "bus",
                    id: d.bus_id,
                });
            }
            if !(d.rating_kw > 0.0) || !d.rating_kw.is_finite() {
                return Err(GridError::Invalid(format!(
                    "der #{k}: rating must be positive"
                )));
            }
        }

        Ok(Self {
            buses,
            lines,
            switches,
            loads,
            ders,
            bus_index,
            line_index,
            line_switch,
        })
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }
    pub fn lines(&self) -> &[Line] {
        &self.lines
    }
    pub fn switches(&self) -> &[Switch] {
        &self.switches
    }
    pub fn loads(&self) -> &[Load] {
        &self.loads
    }
    pub fn ders(&self) -> &[Der] {
        &self.ders
    }
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }
    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn bus_idx(&self, id: BusId) -> Option<usize> {
        self.bus_index.get(&id).copied()
    }

    pub fn line_idx(&self, id: LineId) -> Option<usize> {
        self.line_index.get(&id).copied()
    }

    /// Node indices of a line's endpoints.
    pub fn line_ends(&self, li: usize) -> (usize, usize) {
        let l = &self.lines[li];
        (self.bus_index[&l.from_bus], self.bus_index[&l.to_bus])
    }

    pub fn switch_of_line(&self, li: usize) -> Option<usize> {
        self.line_switch[li]
    }

    pub fn substation_idx(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.is_substation)
            .expect("validated")
    }

    /// Positions (into [`loads`](Self::loads)) of the sheddable loads, in
    /// action-slot order: by bus id, then file order.
    pub fn sheddable_loads(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.loads.len())
            .filter(|&k| self.loads[k].sheddable)
            .collect();
        idx.sort_by_key(|&k| (self.loads[k].bus_id, k));
        idx
    }

    pub fn default_switch_states(&self) -> Vec<SwitchState> {
        self.switches.iter().map(|s| s.default_state).collect()
    }

    pub fn total_demand_kw(&self) -> f64 {
        self.loads.iter().map(Load::total_kw).sum()
    }

    /// Validates an outage set and converts it to a per-line failure mask.
    pub fn outage_mask(&self, outage: &BTreeSet<LineId>) -> Result<Vec<bool>, GridError> {
        let mut failed = vec![false; self.lines.len()];
        for id in outage {
            let li = self.line_idx(*id).ok_or(GridError::UnknownLine(*id))?;
            failed[li] = true;
        }
        Ok(failed)
    }

    /// Per-line in-service flag: not failed and either unswitched or closed.
    pub fn lines_in_service(
        &self,
        switch_states: &[SwitchState],
        outage: &BTreeSet<LineId>,
    ) -> Result<Vec<bool>, GridError> {
        if switch_states.len() != self.switches.len() {
            return Err(GridError::SwitchStateCount {
                expected: self.switches.len(),
                got: switch_states.len(),
            });
        }
        let failed = self.outage_mask(outage)?;
        Ok((0..self.lines.len())
            .map(|li| {
                !failed[li] && self.line_switch[li].is_none_or(|si| switch_states[si].is_closed())
            })
            .collect())
    }

    /// Adjacency of the physical graph: every line, regardless of switch state.
    pub fn base_adjacency(&self) -> Adjacency {
        Adjacency::from_edges(
            self.n_buses(),
            (0..self.lines.len()).map(|li| self.line_ends(li)),
        )
    }

    /// Stable content hash of the canonical serialization (hex SHA-256).
    pub fn content_hash(&self) -> String {
        let text = serialize_network(self);
        hex_digest(text.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Binary symmetric adjacency with zero diagonal, stored as sorted
/// neighbor lists.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            neighbors: vec![Vec::new(); n],
        }
    }

    /// Parallel edges collapse; self-loops are ignored.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut neighbors = vec![Vec::new(); n];
        for (a, b) in edges {
            if a != b {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
            nb.dedup();
        }
        Self { neighbors }
    }

    /// From a dense 0/1 matrix; only the upper triangle is read.
    pub fn from_dense(m: &[Vec<u8>]) -> Self {
        let n = m.len();
        let edges = (0..n).flat_map(|i| {
            ((i + 1)..n)
                .filter(move |&j| m[i][j] != 0)
                .map(move |j| (i, j))
        });
        Self::from_edges(n, edges)
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Edges as `(i, j)` with `i < j`, lexicographically ordered.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, nb) in self.neighbors.iter().enumerate() {
            out.extend(nb.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        let n = self.n();
        let mut m = vec![vec![0u8; n]; n];
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                m[i][j] = 1;
            }
        }
        m
    }

    /// Stable hash of the edge set, used to key topology-derived caches.
    pub fn signature(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.n() as u64).to_le_bytes());
        for (i, j) in self.edges() {
            h.update((i as u64).to_le_bytes());
            h.update((j as u64).to_le_bytes());
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    /// Hop distances from `src`; `None` for unreachable nodes.
    pub fn bfs_distances(&self, src: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n()];
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].expect("queued nodes have a distance");
            for &v in &self.neighbors[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

/// Effective adjacency under the given switch states and failed lines.
pub fn effective_adjacency(
    g: &NetworkGraph,
    switch_states: &[SwitchState],
    outage: &BTreeSet<LineId>,
) -> Result<Adjacency, GridError> {
    let in_service = g.lines_in_service(switch_states, outage)?;
    Ok(Adjacency::from_edges(
        g.n_buses(),
        in_service
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(li, _)| g.line_ends(li)),
    ))
}

/// Connected components, each sorted, ordered by smallest member.
pub fn islands(adj: &Adjacency) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(adj.n());
    for (i, j) in adj.edges() {
        uf.union(i, j);
    }
    uf.groups()
}

/// A k-hop neighborhood: global node indices plus induced edges in local
/// indices (positions within `nodes`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    pub nodes: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
}

impl Subgraph {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn adjacency(&self) -> Adjacency {
        Adjacency::from_edges(self.nodes.len(), self.edges.iter().copied())
    }
}

pub fn k_hop_subgraph(adj: &Adjacency, center: usize, k: usize) -> Result<Subgraph, GridError> {
    if center >= adj.n() {
        return Err(GridError::UnknownNode(center));
    }
    let mut dist = vec![usize::MAX; adj.n()];
    dist[center] = 0;
    let mut queue = VecDeque::from([center]);
    while let Some(u) = queue.pop_front() {
        if dist[u] == k {
            continue;
        }
        for &v in adj.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let nodes: Vec<usize> = (0..adj.n()).filter(|&v| dist[v] != usize::MAX).collect();
    let mut local = vec![usize::MAX; adj.n()];
    for (p, &v) in nodes.iter().enumerate() {
        local[v] = p;
    }
    let mut edges = Vec::new();
    for (p, &v) in nodes.iter().enumerate() {
        for &w in adj.neighbors(v) {
            if local[w] != usize::MAX && local[w] > p {
                edges.push((p, local[w]));
            }
        }
    }
    Ok(Subgraph { nodes, edges })
}

/// Largest hop distance between connected nodes of the largest component
/// (ties broken toward the component holding the lowest node index).
pub fn graph_diameter(adj: &Adjacency) -> usize {
    let comps = islands(adj);
    let Some(largest) = comps
        .iter()
        .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
    else {
        return 0;
    };
    largest
        .iter()
        .map(|&s| {
            adj.bfs_distances(s)
                .into_iter()
                .flatten()
                .max()
                .unwrap_or(0)
        })
        .max()
        .unwrap_or(0)
}
