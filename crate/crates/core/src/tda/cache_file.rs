//! Text format for precomputed `A_PH` matrices.
//!
//! ```text
//! ph-weights v1
//! network <hex content hash>
//! nodes <n>
//! weights <signature hex> k=<k> edges=<m>
//! <i> <j> <w>
//! ...
//! ```
//!
//! Edges are listed once with `i < j`; weights use round-trip float
//! formatting so the file reproduces matrices bit for bit.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use super::{TdaError, TopologicalWeights};

pub const CACHE_FORMAT_VERSION: u32 = 1;

pub fn write_weight_cache(
    network_hash: &str,
    n: usize,
    weights: &[impl AsRef<TopologicalWeights>],
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "ph-weights v{CACHE_FORMAT_VERSION}");
    let _ = writeln!(out, "network {network_hash}");
    let _ = writeln!(out, "nodes {n}");
    for w in weights {
        let w = w.as_ref();
        let edges: Vec<(usize, usize, f64)> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .filter(|&(i, j)| w.matrix[(i, j)] != 0.0)
            .map(|(i, j)| (i, j, w.matrix[(i, j)]))
            .collect();
        let _ = writeln!(
            out,
            "weights {:016x} k={} edges={}",
            w.topology_signature,
            w.k,
            edges.len()
        );
        for (i, j, v) in edges {
            let _ = writeln!(out, "{i} {j} {v:?}");
        }
    }
    out
}

fn bad(line: usize, msg: &str) -> TdaError {
    TdaError::Cache(format!("line {line}: {msg}"))
}

/// Returns the network hash and every stored matrix.
pub fn read_weight_cache(text: &str) -> Result<(String, Vec<TopologicalWeights>), TdaError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut next = |what: &str| {
        lines
            .by_ref()
            .find(|(_, l)| !l.is_empty())
            .ok_or_else(|| TdaError::Cache(format!("unexpected end of file, expected {what}")))
    };

    let (ln, header) = next("header")?;
    if header != format!("ph-weights v{CACHE_FORMAT_VERSION}") {
        return Err(bad(ln, &format!("unsupported header `{header}`")));
    }
    let (ln, net) = next("network line")?;
    let hash = net
        .strip_prefix("network ")
        .ok_or_else(|| bad(ln, "expected `network <hash>`"))?
        .to_string();
    let (ln, nodes) = next("nodes line")?;
    let n: usize = nodes
        .strip_prefix("nodes ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(ln, "expected `nodes <n>`"))?;

    let mut out = Vec::new();
    while let Ok((ln, head)) = next("weights block") {
        let parts: Vec<&str> = head.split_whitespace().collect();
        let parsed = (|| {
            if parts.len() != 4 || parts[0] != "weights" {
                return None;
            }
            let sig = u64::from_str_radix(parts[1], 16).ok()?;
            let k: usize = parts[2].strip_prefix("k=")?.parse().ok()?;
            let m: usize = parts[3].strip_prefix("edges=")?.parse().ok()?;
            Some((sig, k, m))
        })();
        let (sig, k, m) = parsed.ok_or_else(|| bad(ln, "malformed weights header"))?;
        let mut matrix = DMatrix::zeros(n, n);
        for _ in 0..m {
            let (ln, row) = next("edge row")?;
            let f: Vec<&str> = row.split_whitespace().collect();
            let entry = (|| {
                if f.len() != 3 {
                    return None;
                }
                Some((
                    f[0].parse::<usize>().ok()?,
                    f[1].parse::<usize>().ok()?,
                    f[2].parse::<f64>().ok()?,
                ))
            })();
            let (i, j, v) = entry.ok_or_else(|| bad(ln, "malformed edge row"))?;
            if i >= n || j >= n || i == j || !(v > 0.0 && v <= 1.0) {
                return Err(bad(ln, "edge out of range"));
            }
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
        out.push(TopologicalWeights {
            matrix,
            k,
            topology_signature: sig,
        });
    }
    Ok((hash, out))
}

impl AsRef<TopologicalWeights> for TopologicalWeights {
    fn as_ref(&self) -> &TopologicalWeights {
        self
    }
}
