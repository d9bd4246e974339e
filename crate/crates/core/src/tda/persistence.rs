//! Vietoris–Rips persistence of a finite metric, dimensions 0 and 1.
//!
//! H0 comes from a union-find sweep over edges in filtration order (elder
//! rule, lower node id survives ties). H1 comes from a Z/2 boundary-matrix
//! reduction over the 2-skeleton, where an edge enters at its length and a
//! triangle at its longest edge. The single essential H0 class is closed at
//! `cap`. Points with zero persistence are dropped.

use std::cmp::Ordering;
use std::collections::HashMap;

use super::TdaError;
use crate::unionfind::UnionFind;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PersistencePoint {
    pub birth: f64,
    pub death: f64,
}

impl PersistencePoint {
    pub fn new(birth: f64, death: f64) -> Self {
        debug_assert!(death >= birth);
        Self { birth, death }
    }

    pub fn persistence(&self) -> f64 {
        self.death - self.birth
    }
}

/// Multiset of persistence points in one homology dimension. Points are
/// kept sorted so equal multisets compare equal.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceDiagram {
    pub dim: usize,
    points: Vec<PersistencePoint>,
}

impl PersistenceDiagram {
    /// Drops zero-persistence points and sorts the rest.
    pub fn new(dim: usize, points: impl IntoIterator<Item = PersistencePoint>) -> Self {
        let mut points: Vec<_> = points.into_iter().filter(|p| p.death > p.birth).collect();
        points.sort_by(|a, b| {
            a.birth
                .total_cmp(&b.birth)
                .then(a.death.total_cmp(&b.death))
        });
        Self { dim, points }
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            points: Vec::new(),
        }
    }

    pub fn points(&self) -> &[PersistencePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.birth, p.death)).collect()
    }
}

/// Dense symmetric distance matrix.
pub type DistanceMatrix = Vec<Vec<f64>>;

fn check_metric(dist: &DistanceMatrix, cap: f64) -> Result<(), TdaError> {
    let n = dist.len();
    let mut max = 0.0f64;
    for i in 0..n {
        if dist[i].len() != n {
            return Err(TdaError::InvalidMetric("matrix is not square".into()));
        }
        if dist[i][i] != 0.0 {
            return Err(TdaError::InvalidMetric(format!("nonzero diagonal at {i}")));
        }
        for j in 0..n {
            let d = dist[i][j];
            if !(d >= 0.0) || !d.is_finite() || d != dist[j][i] {
                return Err(TdaError::InvalidMetric(format!("bad entry at ({i},{j})")));
            }
            max = max.max(d);
        }
    }
    if cap < max {
        return Err(TdaError::CapBelowMaximum { cap, max });
    }
    Ok(())
}

fn sorted_edges(dist: &DistanceMatrix) -> Vec<(f64, usize, usize)> {
    let n = dist.len();
    let mut edges: Vec<(f64, usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| (dist[i][j], i, j))
        .collect();
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    edges
}

/// H0 by union-find over the edge sweep.
pub fn h0_union_find(dist: &DistanceMatrix, cap: f64) -> Result<PersistenceDiagram, TdaError> {
    check_metric(dist, cap)?;
    let n = dist.len();
    let mut uf = UnionFind::new(n);
    let mut points = Vec::with_capacity(n);
    for (d, i, j) in sorted_edges(dist) {
        // every vertex is born at 0, so the absorbed class dies at d
        if uf.union(i, j).is_some() {
            points.push(PersistencePoint::new(0.0, d));
        }
    }
    if n > 0 {
        points.push(PersistencePoint::new(0.0, cap));
    }
    Ok(PersistenceDiagram::new(0, points))
}

#[derive(Debug, Clone)]
struct Simplex {
    value: f64,
    vertices: Vec<usize>,
}

impl Simplex {
    fn dim(&self) -> usize {
        self.vertices.len() - 1
    }
}

fn filtration(dist: &DistanceMatrix) -> Vec<Simplex> {
    let n = dist.len();
    let mut simplices = Vec::new();
    for i in 0..n {
        simplices.push(Simplex {
            value: 0.0,
            vertices: vec![i],
        });
    }
    for i in 0..n {
        for j in (i + 1)..n {
            simplices.push(Simplex {
                value: dist[i][j],
                vertices: vec![i, j],
            });
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            for k in (j + 1)..n {
                let v = dist[i][j].max(dist[i][k]).max(dist[j][k]);
                simplices.push(Simplex {
                    value: v,
                    vertices: vec![i, j, k],
                });
            }
        }
    }
    simplices.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then(a.dim().cmp(&b.dim()))
            .then_with(|| a.vertices.cmp(&b.vertices))
    });
    simplices
}

/// Both diagrams from a full boundary-matrix reduction over the
/// 2-skeleton. Serves as the reference for H0 and the source of H1.
pub fn reduction_diagrams(
    dist: &DistanceMatrix,
    cap: f64,
) -> Result<(PersistenceDiagram, PersistenceDiagram), TdaError> {
    check_metric(dist, cap)?;
    let simplices = filtration(dist);
    let index: HashMap<&[usize], usize> = simplices
        .iter()
        .enumerate()
        .map(|(k, s)| (s.vertices.as_slice(), k))
        .collect();

    // columns as sorted face indices (Z/2 coefficients)
    let mut columns: Vec<Vec<usize>> = simplices
        .iter()
        .map(|s| {
            if s.dim() == 0 {
                return Vec::new();
            }
            let mut faces: Vec<usize> = (0..s.vertices.len())
                .map(|skip| {
                    let face: Vec<usize> = s
                        .vertices
                        .iter()
                        .enumerate()
                        .filter(|(p, _)| *p != skip)
                        .map(|(_, &v)| v)
                        .collect();
                    index[face.as_slice()]
                })
                .collect();
            faces.sort_unstable();
            faces
        })
        .collect();

    let mut owner_of_low: HashMap<usize, usize> = HashMap::new();
    let mut paired = vec![false; simplices.len()];
    let mut h0 = Vec::new();
    let mut h1 = Vec::new();
    for j in 0..columns.len() {
        while let Some(&low) = columns[j].last() {
            match owner_of_low.get(&low) {
                Some(&k) => {
                    let other = columns[k].clone();
                    columns[j] = symmetric_difference(&columns[j], &other);
                }
                None => break,
            }
        }
        if let Some(&low) = columns[j].last() {
            owner_of_low.insert(low, j);
            paired[low] = true;
            paired[j] = true;
            let point = PersistencePoint::new(simplices[low].value, simplices[j].value);
            match simplices[low].dim() {
                0 => h0.push(point),
                1 => h1.push(point),
                _ => {}
            }
        }
    }
    for (k, s) in simplices.iter().enumerate() {
        if paired[k] || !columns[k].is_empty() {
            continue;
        }
        match s.dim() {
            0 => h0.push(PersistencePoint::new(s.value, cap)),
            1 => h1.push(PersistencePoint::new(s.value, cap)),
            _ => {}
        }
    }
    Ok((
        PersistenceDiagram::new(0, h0),
        PersistenceDiagram::new(1, h1),
    ))
}

fn symmetric_difference(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// `(PD0, PD1)` of the Vietoris–Rips filtration: H0 by union-find, H1 by
/// reduction.
pub fn vietoris_rips_persistence(
    dist: &DistanceMatrix,
    cap: f64,
) -> Result<(PersistenceDiagram, PersistenceDiagram), TdaError> {
    let h0 = h0_union_find(dist, cap)?;
    let (_, h1) = reduction_diagrams(dist, cap)?;
    Ok((h0, h1))
}
