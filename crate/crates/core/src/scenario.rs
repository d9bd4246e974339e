//! Outage scenario generation, validation, splitting and file format.
//!
//! A scenario picks a center bus, a hop radius `r`, and a severity `s`;
//! `k = max(1, ceil(s * |E_sub|))` lines are failed uniformly at random
//! among the lines of the `r`-hop neighborhood. Every scenario carries its
//! own seed, so it can be regenerated from `(network, centers, seed)`.
//!
//! File format:
//!
//! ```text
//! #network=<hex content hash>
//! seed,center,r,s,line_ids
//! 8123,17,2,0.1375,4;9;12
//! ```

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Env, EnvConfig, Variant};
use crate::grid::{self, BusId, GridError, LineId, NetworkGraph};
use crate::tda::PhCache;

/// Upper end of the severity draw `s ~ U(0, MAX_SEVERITY)`.
pub const MAX_SEVERITY: f64 = 0.3;

/// Redraws of center and radius before giving up on an empty neighborhood.
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("requested {requested} centers but the network has {nodes} buses")]
    TooManyCenters { requested: usize, nodes: usize },
    #[error("network diameter {0} is below 3")]
    DiameterTooSmall(usize),
    #[error("no center list to draw from")]
    NoCenters,
    #[error("could not find a neighborhood containing lines after {0} draws")]
    NoLines(usize),
    #[error("need {needed} distinct scenarios, only {available} available")]
    Insufficient { needed: usize, available: usize },
    #[error("validation exhausted: {accepted} of {needed} scenarios after {attempts} attempts")]
    Exhausted {
        needed: usize,
        accepted: usize,
        attempts: usize,
    },
    #[error("scenario file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageScenario {
    pub seed: u64,
    pub center: BusId,
    pub radius: usize,
    pub severity: f64,
    pub failed_lines: BTreeSet<LineId>,
}

impl OutageScenario {
    /// A hand-written scenario with the given failures and no generator
    /// provenance.
    pub fn manual(failed_lines: BTreeSet<LineId>) -> Self {
        Self {
            seed: 0,
            center: 0,
            radius: 0,
            severity: 0.0,
            failed_lines,
        }
    }

    pub fn k(&self) -> usize {
        self.failed_lines.len()
    }
}

/// `max(1, ceil(s * n_lines))`.
pub fn failure_count(severity: f64, n_lines: usize) -> usize {
    ((severity * n_lines as f64).ceil() as usize).max(1)
}

fn eccentricities(adj: &grid::Adjacency) -> Vec<Vec<Option<usize>>> {
    (0..adj.n()).map(|v| adj.bfs_distances(v)).collect()
}

/// Farthest-point sampling on hop distance. The first center is the
/// lowest-id bus of maximum eccentricity; each next one maximizes the hop
/// distance to the chosen set, ties to the lowest id.
pub fn select_centers(g: &NetworkGraph, m: usize) -> Result<Vec<BusId>, ScenarioError> {
    let n = g.n_buses();
    if m > n {
        return Err(ScenarioError::TooManyCenters {
            requested: m,
            nodes: n,
        });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let dist = eccentricities(&g.base_adjacency());
    let hop = |a: usize, b: usize| dist[a][b].unwrap_or(usize::MAX);
    let ecc: Vec<usize> = (0..n)
        .map(|v| dist[v].iter().flatten().copied().max().unwrap_or(0))
        .collect();
    let first = (0..n)
        .max_by_key(|&v| (ecc[v], std::cmp::Reverse(v)))
        .expect("n > 0");
    let mut chosen = vec![first];
    let mut nearest: Vec<usize> = (0..n).map(|v| hop(first, v)).collect();
    while chosen.len() < m {
        let next = (0..n)
            .filter(|v| !chosen.contains(v))
            .max_by_key(|&v| (nearest[v], std::cmp::Reverse(v)))
            .expect("m <= n");
        chosen.push(next);
        for v in 0..n {
            nearest[v] = nearest[v].min(hop(next, v));
        }
    }
    Ok(chosen.into_iter().map(|i| g.buses()[i].id).collect())
}

/// Draws scenarios from one seeded generator.
pub struct ScenarioGenerator {
    graph: Arc<NetworkGraph>,
    centers: Vec<usize>,
    max_radius: usize,
    adjacency: grid::Adjacency,
}

impl ScenarioGenerator {
    pub fn new(graph: Arc<NetworkGraph>, centers: &[BusId]) -> Result<Self, ScenarioError> {
        if centers.is_empty() {
            return Err(ScenarioError::NoCenters);
        }
        let adjacency = graph.base_adjacency();
        let diam = grid::graph_diameter(&adjacency);
        if diam < 3 {
            return Err(ScenarioError::DiameterTooSmall(diam));
        }
        let centers = centers
            .iter()
            .map(|&id| graph.bus_idx(id).ok_or(GridError::UnknownNode(id as usize)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            graph,
            centers,
            max_radius: diam / 3,
            adjacency,
        })
    }

    /// Largest radius that can be drawn (`floor(diam / 3)`).
    pub fn max_radius(&self) -> usize {
        self.max_radius
    }

    /// Line positions whose both ends are within `r` hops of `center`.
    pub fn neighborhood_lines(&self, center: usize, r: usize) -> Result<Vec<usize>, ScenarioError> {
        let sub = grid::k_hop_subgraph(&self.adjacency, center, r)?;
        let mut inside = vec![false; self.graph.n_buses()];
        for &v in &sub.nodes {
            inside[v] = true;
        }
        Ok((0..self.graph.n_lines())
            .filter(|&li| {
                let (a, b) = self.graph.line_ends(li);
                inside[a] && inside[b]
            })
            .collect())
    }

    /// Rebuilds the scenario belonging to `seed`.
    pub fn from_seed(&self, seed: u64) -> Result<OutageScenario, ScenarioError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..MAX_REDRAWS {
            let center = *self.centers.choose(&mut rng).expect("non-empty");
            let radius = rng.gen_range(1..=self.max_radius);
            let lines = self.neighborhood_lines(center, radius)?;
            if lines.is_empty() {
                continue;
            }
            let severity = rng.gen_range(0.0..MAX_SEVERITY);
            let k = failure_count(severity, lines.len()).min(lines.len());
            let failed_lines = rand::seq::index::sample(&mut rng, lines.len(), k)
                .into_iter()
                .map(|i| self.graph.lines()[lines[i]].id)
                .collect();
            return Ok(OutageScenario {
                seed,
                center: self.graph.buses()[center].id,
                radius,
                severity,
                failed_lines,
            });
        }
        Err(ScenarioError::NoLines(MAX_REDRAWS))
    }

    /// `n` scenarios, each seeded from the next draw of `rng`.
    pub fn generate(
        &self,
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<OutageScenario>, ScenarioError> {
        (0..n).map(|_| self.from_seed(rng.gen())).collect()
    }
}

/// True iff resetting to the scenario under default switch states gives a
/// converged, finite observation.
pub fn validate(scenario: &OutageScenario, env: &mut Env) -> bool {
    match env.reset(scenario) {
        Ok(obs) => obs.converged && obs.is_finite(),
        Err(_) => false,
    }
}

/// Validates a batch in parallel; results keep input order.
pub fn validate_all(graph: &Arc<NetworkGraph>, scenarios: &[OutageScenario]) -> Vec<bool> {
    let cache = Arc::new(PhCache::new());
    scenarios
        .par_iter()
        .map_init(
            || {
                Env::new(
                    Arc::clone(graph),
                    EnvConfig::default(),
                    Variant::Plain,
                    Arc::clone(&cache),
                )
                .expect("default config is valid")
            },
            |env, s| validate(s, env),
        )
        .collect()
}

/// Drops scenarios whose failed-line set already appeared, keeping the
/// first occurrence.
pub fn dedupe(pool: Vec<OutageScenario>) -> Vec<OutageScenario> {
    let mut seen = HashSet::new();
    pool.into_iter()
        .filter(|s| seen.insert(s.failed_lines.clone()))
        .collect()
}

/// Splits a pool into a training set and test sets of the requested
/// sizes. No failed-line set occurs in more than one output.
pub fn split_disjoint_many(
    pool: Vec<OutageScenario>,
    test_sizes: &[usize],
    rng: &mut impl Rng,
) -> Result<(Vec<OutageScenario>, Vec<Vec<OutageScenario>>), ScenarioError> {
    let mut distinct = dedupe(pool);
    let needed: usize = test_sizes.iter().sum();
    if needed > distinct.len() {
        return Err(ScenarioError::Insufficient {
            needed,
            available: distinct.len(),
        });
    }
    distinct.shuffle(rng);
    let mut rest = distinct.into_iter();
    let tests = test_sizes
        .iter()
        .map(|&n| rest.by_ref().take(n).collect())
        .collect();
    Ok((rest.collect(), tests))
}

pub fn split_disjoint(
    pool: Vec<OutageScenario>,
    n_test: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<OutageScenario>, Vec<OutageScenario>), ScenarioError> {
    let (train, mut tests) = split_disjoint_many(pool, &[n_test], rng)?;
    Ok((train, tests.pop().expect("one test set")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolStats {
    pub generated: usize,
    pub rejected_invalid: usize,
    pub rejected_duplicate: usize,
}

impl PoolStats {
    pub fn rejection_rate(&self) -> f64 {
        if self.generated == 0 {
            0.0
        } else {
            (self.rejected_invalid + self.rejected_duplicate) as f64 / self.generated as f64
        }
    }
}

/// Generates until `needed` distinct valid scenarios exist, or fails after
/// `max_attempts` candidates.
pub fn build_valid_pool(
    generator: &ScenarioGenerator,
    needed: usize,
    max_attempts: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<OutageScenario>, PoolStats), ScenarioError> {
    let mut pool = Vec::with_capacity(needed);
    let mut seen = HashSet::new();
    let mut stats = PoolStats {
        generated: 0,
        rejected_invalid: 0,
        rejected_duplicate: 0,
    };
    while pool.len() < needed && stats.generated < max_attempts {
        let batch = (needed - pool.len())
            .max(16)
            .min(max_attempts - stats.generated);
        let candidates = generator.generate(batch, rng)?;
        let valid = validate_all(&generator.graph, &candidates);
        for (s, ok) in candidates.into_iter().zip(valid) {
            stats.generated += 1;
            if !ok {
                stats.rejected_invalid += 1;
            } else if pool.len() >= needed || !seen.insert(s.failed_lines.clone()) {
                stats.rejected_duplicate += 1;
            } else {
                pool.push(s);
            }
        }
    }
    if pool.len() < needed {
        return Err(ScenarioError::Exhausted {
            needed,
            accepted: pool.len(),
            attempts: stats.generated,
        });
    }
    Ok((pool, stats))
}

pub fn write_scenarios(network_hash: &str, scenarios: &[OutageScenario]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "#network={network_hash}");
    out.push_str("seed,center,r,s,line_ids\n");
    for s in scenarios {
        let ids: Vec<String> = s.failed_lines.iter().map(|id| id.to_string()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{:?},{}",
            s.seed,
            s.center,
            s.radius,
            s.severity,
            ids.join(";")
        );
    }
    out
}

/// Returns the embedded network hash and the records.
pub fn read_scenarios(text: &str) -> Result<(String, Vec<OutageScenario>), ScenarioError> {
    let bad = |line: usize, msg: &str| ScenarioError::Parse {
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (ln, first) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    let hash = first
        .strip_prefix("#network=")
        .ok_or_else(|| bad(ln, "expected `#network=<hash>` header"))?
        .to_string();
    let (ln, header) = lines
        .next()
        .ok_or_else(|| bad(2, "missing column header"))?;
    if header != "seed,center,r,s,line_ids" {
        return Err(bad(ln, "unexpected column header"));
    }
    let mut out = Vec::new();
    for (ln, row) in lines {
        if row.is_empty() {
            continue;
        }
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != 5 {
            return Err(bad(ln, "expected 5 fields"));
        }
        let seed = f[0].parse().map_err(|_| bad(ln, "bad seed"))?;
        let center = f[1].parse().map_err(|_| bad(ln, "bad center"))?;
        let radius = f[2].parse().map_err(|_| bad(ln, "bad radius"))?;
        let severity: f64 = f[3].parse().map_err(|_| bad(ln, "bad severity"))?;
        let failed_lines = if f[4].is_empty() {
            BTreeSet::new()
        } else {
            f[4].split(';')
                .map(|x| x.parse().map_err(|_| bad(ln, "bad line id")))
                .collect::<Result<_, _>>()?
        };
        out.push(OutageScenario {
            seed,
            center,
            radius,
            severity,
            failed_lines,
        });
    }
    Ok((hash, out))
}
