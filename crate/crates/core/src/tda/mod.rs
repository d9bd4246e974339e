//! Persistent homology of k-hop neighborhoods and the topological edge
//! reweighting `A_PH[i][j] = 1 / (1 + W2(PD_i, PD_j))`.
//!
//! Every node's neighborhood is filtered by hop distance (Vietoris–Rips on
//! the subgraph's shortest-path metric). The essential H0 bar is closed at
//! the neighborhood's largest hop distance (at least 1), and the per-node
//! distance combines H0 and H1 as `sqrt(W2_0^2 + W2_1^2)`.

pub mod assignment;
mod cache_file;
pub mod persistence;
pub mod wasserstein;

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{self, Adjacency, GridError, LineId, NetworkGraph, Subgraph, SwitchState};

pub use cache_file::{read_weight_cache, write_weight_cache, CACHE_FORMAT_VERSION};
pub use persistence::{
    h0_union_find, reduction_diagrams, vietoris_rips_persistence, DistanceMatrix,
    PersistenceDiagram, PersistencePoint,
};
pub use wasserstein::wasserstein2;

#[derive(Debug, Error)]
pub enum TdaError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("subgraph is disconnected")]
    Disconnected,
    #[error("invalid distance matrix: {0}")]
    InvalidMetric(String),
    #[error("cap {cap} is below the largest distance {max}")]
    CapBelowMaximum { cap: f64, max: f64 },
    #[error("diagram dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("hop radius must be at least 1")]
    ZeroRadius,
    #[error("weight cache: {0}")]
    Cache(String),
}

/// All-pairs hop distances within a subgraph.
pub fn hop_distance_matrix(sub: &Subgraph) -> Result<DistanceMatrix, TdaError> {
    let adj = sub.adjacency();
    let n = sub.n();
    let mut out = vec![vec![0.0; n]; n];
    for (s, row) in out.iter_mut().enumerate() {
        for (t, d) in adj.bfs_distances(s).into_iter().enumerate() {
            row[t] = d.ok_or(TdaError::Disconnected)? as f64;
        }
    }
    Ok(out)
}

/// `(PD0, PD1)` of one node's k-hop neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDiagrams {
    pub h0: PersistenceDiagram,
    pub h1: PersistenceDiagram,
}

pub fn node_diagrams(adj: &Adjacency, node: usize, k: usize) -> Result<NodeDiagrams, TdaError> {
    let sub = grid::k_hop_subgraph(adj, node, k)?;
    let dist = hop_distance_matrix(&sub)?;
    let max = dist.iter().flatten().fold(0.0f64, |m, &d| m.max(d));
    let (h0, h1) = vietoris_rips_persistence(&dist, max.max(1.0))?;
    Ok(NodeDiagrams { h0, h1 })
}

pub fn diagram_distance(a: &NodeDiagrams, b: &NodeDiagrams) -> Result<f64, TdaError> {
    let w0 = wasserstein2(&a.h0, &b.h0)?;
    let w1 = wasserstein2(&a.h1, &b.h1)?;
    Ok((w0 * w0 + w1 * w1).sqrt())
}

/// Distance between the neighborhood diagrams of nodes `i` and `j`.
pub fn node_diagram_distance(
    adj: &Adjacency,
    i: usize,
    j: usize,
    k: usize,
    cache: &PhCache,
) -> Result<f64, TdaError> {
    let sig = adj.signature();
    let a = cache.diagrams(adj, sig, i, k)?;
    let b = cache.diagrams(adj, sig, j, k)?;
    diagram_distance(&a, &b)
}

/// Reweighted adjacency for one topology.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologicalWeights {
    pub matrix: DMatrix<f64>,
    pub k: usize,
    pub topology_signature: u64,
}

/// Memo of node diagrams and finished weight matrices, keyed by topology
/// signature. Safe for concurrent use; inserts are idempotent.
#[derive(Debug, Default)]
pub struct PhCache {
    diagrams: Mutex<HashMap<(u64, usize, usize), Arc<NodeDiagrams>>>,
    weights: Mutex<HashMap<(u64, usize), Arc<TopologicalWeights>>>,
}

impl PhCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn diagrams(
        &self,
        adj: &Adjacency,
        sig: u64,
        node: usize,
        k: usize,
    ) -> Result<Arc<NodeDiagrams>, TdaError> {
        if let Some(d) = self.diagrams.lock().expect("poisoned").get(&(sig, k, node)) {
            return Ok(d.clone());
        }
        let d = Arc::new(node_diagrams(adj, node, k)?);
        Ok(self
            .diagrams
            .lock()
            .expect("poisoned")
            .entry((sig, k, node))
            .or_insert(d)
            .clone())
    }

    pub fn get_weights(&self, sig: u64, k: usize) -> Option<Arc<TopologicalWeights>> {
        self.weights
            .lock()
            .expect("poisoned")
            .get(&(sig, k))
            .cloned()
    }

    pub fn insert_weights(&self, w: TopologicalWeights) -> Arc<TopologicalWeights> {
        self.weights
            .lock()
            .expect("poisoned")
            .entry((w.topology_signature, w.k))
            .or_insert_with(|| Arc::new(w))
            .clone()
    }

    /// All stored weight matrices, ordered by (signature, k).
    pub fn all_weights(&self) -> Vec<Arc<TopologicalWeights>> {
        let map = self.weights.lock().expect("poisoned");
        let mut keys: Vec<_> = map.keys().copied().collect();
        keys.sort_unstable();
        keys.iter().map(|key| map[key].clone()).collect()
    }

    pub fn weight_count(&self) -> usize {
        self.weights.lock().expect("poisoned").len()
    }
}

/// `A_PH` for an explicit adjacency.
pub fn ph_weights_for(
    adj: &Adjacency,
    k: usize,
    cache: &PhCache,
) -> Result<Arc<TopologicalWeights>, TdaError> {
    if k == 0 {
        return Err(TdaError::ZeroRadius);
    }
    let sig = adj.signature();
    if let Some(w) = cache.get_weights(sig, k) {
        return Ok(w);
    }
    let diagrams: Vec<Arc<NodeDiagrams>> = (0..adj.n())
        .into_par_iter()
        .map(|v| cache.diagrams(adj, sig, v, k))
        .collect::<Result<_, _>>()?;
    let n = adj.n();
    let mut matrix = DMatrix::zeros(n, n);
    for (i, j) in adj.edges() {
        let w = 1.0 / (1.0 + diagram_distance(&diagrams[i], &diagrams[j])?);
        matrix[(i, j)] = w;
        matrix[(j, i)] = w;
    }
    Ok(cache.insert_weights(TopologicalWeights {
        matrix,
        k,
        topology_signature: sig,
    }))
}

/// `A_PH` for the effective topology under the given switching and outage.
pub fn ph_edge_weights(
    g: &NetworkGraph,
    switch_states: &[SwitchState],
    outage: &BTreeSet<LineId>,
    k: usize,
    cache: &PhCache,
) -> Result<Arc<TopologicalWeights>, TdaError> {
    let adj = grid::effective_adjacency(g, switch_states, outage)?;
    ph_weights_for(&adj, k, cache)
}

/// The unweighted 0/1 adjacency as a dense matrix.
pub fn binary_weights(adj: &Adjacency) -> DMatrix<f64> {
    let n = adj.n();
    let mut m = DMatrix::zeros(n, n);
    for (i, j) in adj.edges() {
        m[(i, j)] = 1.0;
        m[(j, i)] = 1.0;
    }
    m
}

/// Symmetric normalized Laplacian `I - D^-1/2 A D^-1/2`. Rows of isolated
/// nodes are identity rows.
pub fn laplacian(weights: &DMatrix<f64>) -> DMatrix<f64> {
    let n = weights.nrows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = weights.row(i).sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * weights[(i, j)] * inv_sqrt[j]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::k_hop_subgraph;

    fn cycle(n: usize) -> Adjacency {
        Adjacency::from_edges(n, (0..n).map(|i| (i, (i + 1) % n)))
    }

    fn path(n: usize) -> Adjacency {
        Adjacency::from_edges(n, (0..n - 1).map(|i| (i, i + 1)))
    }

    #[test]
    fn hop_matrix_cases() {
        let one = k_hop_subgraph(&path(1), 0, 2).unwrap();
        assert_eq!(hop_distance_matrix(&one).unwrap(), vec![vec![0.0]]);
        let p = k_hop_subgraph(&path(3), 0, 2).unwrap();
        assert_eq!(hop_distance_matrix(&p).unwrap()[0][2], 2.0);
        let c = k_hop_subgraph(&cycle(4), 0, 2).unwrap();
        let d = hop_distance_matrix(&c).unwrap();
        assert_eq!(d[0][2], 2.0);
        assert_eq!(d[1][3], 2.0);
        let broken = Subgraph {
            nodes: vec![0, 1],
            edges: vec![],
        };
        assert!(matches!(
            hop_distance_matrix(&broken),
            Err(TdaError::Disconnected)
        ));
    }

    #[test]
    fn same_node_distance_zero() {
        let cache = PhCache::new();
        let adj = path(5);
        assert_eq!(node_diagram_distance(&adj, 2, 2, 2, &cache).unwrap(), 0.0);
        // 1 and 3 have mirror-image neighborhoods
        assert_eq!(node_diagram_distance(&adj, 1, 3, 2, &cache).unwrap(), 0.0);
    }

    #[test]
    fn star_center_vs_path_end() {
        // star 0-{1,2,3} joined to a path 3-4-5
        let adj = Adjacency::from_edges(6, [(0, 1), (0, 2), (0, 3), (3, 4), (4, 5)]);
        let cache = PhCache::new();
        let got = node_diagram_distance(&adj, 0, 5, 1, &cache).unwrap();
        // center: K_{1,3} plus leaf distances 2 -> PD0 = {(0,1)x3, (0,2)}, PD1 = {}
        // path end 5-4: PD0 = {(0,1)} with cap 1 -> only one finite bar
        let center = PersistenceDiagram::new(
            0,
            [(0.0, 1.0), (0.0, 1.0), (0.0, 1.0), (0.0, 2.0)]
                .map(|(b, d)| PersistencePoint::new(b, d)),
        );
        let end = PersistenceDiagram::new(
            0,
            [(0.0, 1.0), (0.0, 1.0)].map(|(b, d)| PersistencePoint::new(b, d)),
        );
        let w0 = wasserstein2(&center, &end).unwrap();
        assert!((got - w0).abs() < 1e-12);
        // best: (0,1)<->(0,1), (0,2)<->(0,1), two (0,1) to the diagonal = 1 + 0.5 + 0.5
        assert!((w0 - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn weights_on_cycle_are_uniform() {
        let cache = PhCache::new();
        let w = ph_weights_for(&cycle(7), 2, &cache).unwrap();
        let vals: Vec<f64> = cycle(7)
            .edges()
            .iter()
            .map(|&(i, j)| w.matrix[(i, j)])
            .collect();
        assert!(vals.iter().all(|&v| v == vals[0]));
        assert_eq!(vals[0], 1.0);
        assert_eq!(w.matrix[(0, 3)], 0.0);
    }

    #[test]
    fn weight_formula_at_sqrt2() {
        let w: f64 = 1.0 / (1.0 + 2f64.sqrt());
        assert!((w - 0.41421356237).abs() < 1e-10);
    }

    #[test]
    fn weights_support_matches_adjacency() {
        let adj = Adjacency::from_edges(6, [(0, 1), (0, 2), (0, 3), (3, 4), (4, 5), (1, 2)]);
        let cache = PhCache::new();
        let w = ph_weights_for(&adj, 2, &cache).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let v = w.matrix[(i, j)];
                assert_eq!(v, w.matrix[(j, i)]);
                if adj.has_edge(i, j) {
                    assert!(v > 0.0 && v <= 1.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert!(matches!(
            ph_weights_for(&adj, 0, &cache),
            Err(TdaError::ZeroRadius)
        ));
    }

    #[test]
    fn laplacian_single_edge() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let l = laplacian(&a);
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let eig = l.symmetric_eigenvalues();
        let mut e: Vec<f64> = eig.iter().copied().collect();
        e.sort_by(f64::total_cmp);
        assert!(e[0].abs() < 1e-12 && (e[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn laplacian_isolated_rows_are_identity() {
        let l = laplacian(&DMatrix::zeros(3, 3));
        assert_eq!(l, DMatrix::identity(3, 3));
    }
}
