//! Linearized per-island power flow.
//!
//! Each energized island is solved as a resistive network on voltage
//! magnitudes: every in-service line carries `f_ij = (v_i - v_j) / r_ij`
//! and every non-slack node satisfies `sum_j f_ij = p_i`, where `p_i` is the
//! net per-unit injection (loads negative). The slack node is held at
//! `v_slack`. The three phases are independent copies of the same system
//! on the island's topology, each carrying only its own phase's loads.
//!
//! Islands without the substation or an enabled grid-forming DER are
//! de-energized. An island whose connected demand exceeds its DER capacity
//! is overloaded and marks the whole result as not converged.
//!
//! Per-unit convention: power in units of `base_kw`, voltage relative to
//! nominal. Branch flows are reported from `from_bus` to `to_bus`.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::grid::{self, DerMode, GridError, LineId, NetworkGraph, SwitchState};

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("singular conductance matrix in island containing node {0}")]
    Singular(usize),
    #[error("expected {expected} load states, got {got}")]
    LoadStateCount { expected: usize, got: usize },
    #[error("total network demand is zero")]
    ZeroDemand,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub base_kw: f64,
    pub v_slack: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            base_kw: 1000.0,
            v_slack: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IslandReport {
    /// Node indices, sorted.
    pub nodes: Vec<usize>,
    /// Slack node index when energized.
    pub slack: Option<usize>,
    /// `f64::INFINITY` for the substation island.
    pub capacity_kw: f64,
    pub demand_kw: f64,
    pub energized: bool,
    pub overloaded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowResult {
    /// Per node, per phase (pu). Zero for phases a bus does not carry and
    /// for de-energized islands.
    pub voltages: Vec<[f64; 3]>,
    /// Per line, summed over phases (pu).
    pub branch_flows: Vec<f64>,
    /// Per line, per phase (pu).
    pub phase_flows: Vec<[f64; 3]>,
    /// Net injection used by the solve, per node and phase (pu).
    pub injections: Vec<[f64; 3]>,
    pub served: Vec<bool>,
    pub converged: bool,
    pub islands: Vec<IslandReport>,
    /// Copy of the in-service mask the solve used.
    pub in_service: Vec<bool>,
}

impl PowerFlowResult {
    /// Island index of each node.
    pub fn island_of(&self) -> Vec<usize> {
        let n = self.voltages.len();
        let mut out = vec![0; n];
        for (k, isl) in self.islands.iter().enumerate() {
            for &v in &isl.nodes {
                out[v] = k;
            }
        }
        out
    }
}

/// Solves the linear model for one switching/outage/load configuration.
pub fn solve(
    g: &NetworkGraph,
    switch_states: &[SwitchState],
    outage: &BTreeSet<LineId>,
    load_connected: &[bool],
    cfg: &SolverConfig,
) -> Result<PowerFlowResult, PowerFlowError> {
    if load_connected.len() != g.loads().len() {
        return Err(PowerFlowError::LoadStateCount {
            expected: g.loads().len(),
            got: load_connected.len(),
        });
    }
    let n = g.n_buses();
    let in_service = g.lines_in_service(switch_states, outage)?;
    let adj = grid::Adjacency::from_edges(
        n,
        (0..g.n_lines())
            .filter(|&li| in_service[li])
            .map(|li| g.line_ends(li)),
    );
    let comps = grid::islands(&adj);
    let mut island_of = vec![0usize; n];
    for (k, c) in comps.iter().enumerate() {
        for &v in c {
            island_of[v] = k;
        }
    }

    let sub = g.substation_idx();
    let mut voltages = vec![[0.0; 3]; n];
    let mut injections = vec![[0.0; 3]; n];
    let mut potentials = vec![[0.0; 3]; n];
    let mut reports = Vec::with_capacity(comps.len());

    for (k, nodes) in comps.iter().enumerate() {
        let has_sub = island_of[sub] == k;
        let ders: Vec<_> = g
            .ders()
            .iter()
            .filter(|d| d.enabled)
            .map(|d| (g.bus_idx(d.bus_id).expect("validated"), d))
            .filter(|(b, _)| island_of[*b] == k)
            .collect();
        let demand_kw: f64 = g
            .loads()
            .iter()
            .zip(load_connected)
            .filter(|(ld, &on)| on && island_of[g.bus_idx(ld.bus_id).expect("validated")] == k)
            .map(|(ld, _)| ld.total_kw())
            .sum();

        let slack = if has_sub {
            Some(sub)
        } else {
            ders.iter()
                .filter(|(_, d)| d.mode == DerMode::GridForming)
                .max_by(|(ba, a), (bb, b)| {
                    a.rating_kw
                        .total_cmp(&b.rating_kw)
                        .then(g.buses()[*bb].id.cmp(&g.buses()[*ba].id))
                })
                .map(|(b, _)| *b)
        };
        let capacity_kw = if has_sub {
            f64::INFINITY
        } else {
            ders.iter().map(|(_, d)| d.rating_kw).sum()
        };
        let energized = slack.is_some();
        let overloaded = energized && demand_kw > capacity_kw;

        if let Some(slack) = slack {
            // net injections
            for (ld, _) in g.loads().iter().zip(load_connected).filter(|(_, &on)| on) {
                let b = g.bus_idx(ld.bus_id).expect("validated");
                if island_of[b] != k {
                    continue;
                }
                for ph in ld.phases.iter() {
                    injections[b][ph] -= ld.p_kw / cfg.base_kw;
                }
            }
            // Grid-feeding units inject their rating. Grid-forming units only
            // add capacity; the slack balances the island.
            for (b, d) in ders.iter().filter(|(_, d)| d.mode == DerMode::GridFeeding) {
                let phases = g.buses()[*b].phases;
                let share = d.rating_kw / cfg.base_kw / phases.count() as f64;
                for ph in phases.iter() {
                    injections[*b][ph] += share;
                }
            }

            solve_island(
                g,
                nodes,
                slack,
                &in_service,
                &island_of,
                k,
                &injections,
                cfg,
                &mut potentials,
            )?;
            for &v in nodes {
                let phases = g.buses()[v].phases;
                for ph in phases.iter() {
                    voltages[v][ph] = potentials[v][ph];
                }
            }
        } else {
            for &v in nodes {
                injections[v] = [0.0; 3];
            }
        }

        reports.push(IslandReport {
            nodes: nodes.clone(),
            slack,
            capacity_kw,
            demand_kw,
            energized,
            overloaded,
        });
    }

    let mut phase_flows = vec![[0.0; 3]; g.n_lines()];
    let mut branch_flows = vec![0.0; g.n_lines()];
    for li in 0..g.n_lines() {
        if !in_service[li] {
            continue;
        }
        let (a, b) = g.line_ends(li);
        if !reports[island_of[a]].energized {
            continue;
        }
        let r = g.lines()[li].r_pu;
        for ph in 0..3 {
            phase_flows[li][ph] = (potentials[a][ph] - potentials[b][ph]) / r;
        }
        branch_flows[li] = phase_flows[li].iter().sum();
    }

    let served = g
        .loads()
        .iter()
        .zip(load_connected)
        .map(|(ld, &on)| {
            let isl = &reports[island_of[g.bus_idx(ld.bus_id).expect("validated")]];
            on && isl.energized && !isl.overloaded
        })
        .collect();
    let converged = !reports.iter().any(|r| r.overloaded);

    Ok(PowerFlowResult {
        voltages,
        branch_flows,
        phase_flows,
        injections,
        served,
        converged,
        islands: reports,
        in_service,
    })
}

#[allow(clippy::too_many_arguments)]
fn solve_island(
    g: &NetworkGraph,
    nodes: &[usize],
    slack: usize,
    in_service: &[bool],
    island_of: &[usize],
    island: usize,
    injections: &[[f64; 3]],
    cfg: &SolverConfig,
    potentials: &mut [[f64; 3]],
) -> Result<(), PowerFlowError> {
    potentials[slack] = [cfg.v_slack; 3];
    let unknowns: Vec<usize> = nodes.iter().copied().filter(|&v| v != slack).collect();
    if unknowns.is_empty() {
        return Ok(());
    }
    let mut pos = vec![usize::MAX; g.n_buses()];
    for (p, &v) in unknowns.iter().enumerate() {
        pos[v] = p;
    }
    let m = unknowns.len();
    let mut cond = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DMatrix::<f64>::zeros(m, 3);
    for (p, &v) in unknowns.iter().enumerate() {
        for ph in 0..3 {
            rhs[(p, ph)] = injections[v][ph];
        }
    }
    for li in 0..g.n_lines() {
        if !in_service[li] {
            continue;
        }
        let (a, b) = g.line_ends(li);
        if island_of[a] != island {
            continue;
        }
        let w = 1.0 / g.lines()[li].r_pu;
        for (x, y) in [(a, b), (b, a)] {
            if x == slack {
                continue;
            }
            let px = pos[x];
            cond[(px, px)] += w;
            if y == slack {
                for ph in 0..3 {
                    rhs[(px, ph)] += w * cfg.v_slack;
                }
            } else {
                cond[(px, pos[y])] -= w;
            }
        }
    }
    let chol = cond.cholesky().ok_or(PowerFlowError::Singular(slack))?;
    let sol = chol.solve(&rhs);
    for (p, &v) in unknowns.iter().enumerate() {
        for ph in 0..3 {
            potentials[v][ph] = sol[(p, ph)];
        }
    }
    debug_assert!(sol.iter().all(|x| x.is_finite()));
    Ok(())
}

/// Served demand as a fraction of the whole network's demand.
pub fn energy_supplied(result: &PowerFlowResult, g: &NetworkGraph) -> Result<f64, PowerFlowError> {
    let total = g.total_demand_kw();
    if total <= 0.0 {
        return Err(PowerFlowError::ZeroDemand);
    }
    let served: f64 = g
        .loads()
        .iter()
        .zip(&result.served)
        .filter(|(_, &s)| s)
        .map(|(ld, _)| ld.total_kw())
        .sum();
    Ok(served / total)
}
