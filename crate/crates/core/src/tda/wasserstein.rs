//! 2-Wasserstein distance between persistence diagrams.
//!
//! Points may be matched to each other (squared Euclidean cost) or to their
//! projection on the diagonal (squared cost `(d - b)^2 / 2`). The partial
//! matching is solved exactly as an assignment on the `(n1 + n2)` square
//! augmented matrix: real-to-real block, each point's own diagonal slot, and
//! a zero block pairing diagonal slots with each other.

use super::assignment;
use super::persistence::{PersistenceDiagram, PersistencePoint};
use super::TdaError;

pub(crate) fn sq_dist(a: &PersistencePoint, b: &PersistencePoint) -> f64 {
    let db = a.birth - b.birth;
    let dd = a.death - b.death;
    db * db + dd * dd
}

pub(crate) fn sq_diag(p: &PersistencePoint) -> f64 {
    let l = p.death - p.birth;
    l * l / 2.0
}

pub fn wasserstein2(d1: &PersistenceDiagram, d2: &PersistenceDiagram) -> Result<f64, TdaError> {
    if d1.dim != d2.dim {
        return Err(TdaError::DimensionMismatch(d1.dim, d2.dim));
    }
    // fixed operand order makes the summation, and so the result, symmetric
    let (a, b) = match canonical_order(d1, d2) {
        std::cmp::Ordering::Greater => (d2.points(), d1.points()),
        _ => (d1.points(), d2.points()),
    };
    let (n1, n2) = (a.len(), b.len());
    let n = n1 + n2;
    if n == 0 {
        return Ok(0.0);
    }
    let mut cost = vec![vec![0.0; n]; n];
    for i in 0..n1 {
        for j in 0..n2 {
            cost[i][j] = sq_dist(&a[i], &b[j]);
        }
        for k in 0..n1 {
            cost[i][n2 + k] = if k == i {
                sq_diag(&a[i])
            } else {
                f64::INFINITY
            };
        }
    }
    for k in 0..n2 {
        for j in 0..n2 {
            cost[n1 + k][j] = if j == k {
                sq_diag(&b[j])
            } else {
                f64::INFINITY
            };
        }
        // diagonal-to-diagonal block stays zero
    }
    let matching = assignment::solve(&cost);
    let total = assignment::cost_of(&cost, &matching);
    Ok(total.max(0.0).sqrt())
}

fn canonical_order(d1: &PersistenceDiagram, d2: &PersistenceDiagram) -> std::cmp::Ordering {
    let (a, b) = (d1.points(), d2.points());
    a.len().cmp(&b.len()).then_with(|| {
        a.iter()
            .zip(b)
            .map(|(p, q)| {
                p.birth
                    .total_cmp(&q.birth)
                    .then(p.death.total_cmp(&q.death))
            })
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}
