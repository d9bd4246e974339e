//! Reconfiguration and load-shedding environment.
//!
//! An action is a vector of target states: one slot per switch (closed =
//! `true`), then one slot per sheddable load (connected = `true`). Switches
//! on failed lines are masked and stay open whatever the action says.
//!
//! Reward: `E_supp - V_viol` when the power flow converged with finite
//! observations, otherwise `-1`.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{self, GridError, LineId, NetworkGraph, Phases, SwitchState};
use crate::policy::PolicyInput;
use crate::powerflow::{self, PowerFlowError, PowerFlowResult, SolverConfig};
use crate::scenario::OutageScenario;
use crate::tda::{self, PhCache, TdaError};

/// Reward assigned when the convergence flag is raised.
pub const VIOLATION_REWARD: f64 = -1.0;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("expected an action of length {expected}, got {got}")]
    ActionLength { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("step called before reset")]
    NotReset,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Tda(#[from] TdaError),
}

/// When the topological edge weights are recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhRefresh {
    /// Once per reset, on the post-outage default topology.
    #[default]
    PerEpisode,
    /// After every step, on the current topology.
    PerStep,
}

/// Which adjacency feeds the graph operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Wasserstein-reweighted adjacency.
    #[default]
    Ph,
    /// Binary adjacency.
    Plain,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Ph => "ph",
            Variant::Plain => "plain",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ph" => Ok(Variant::Ph),
            "plain" => Ok(Variant::Plain),
            other => Err(format!("unknown variant `{other}` (expected ph or plain)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub horizon: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub ph_refresh: PhRefresh,
    /// Hop radius of the neighborhoods used for edge weights.
    pub k: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            v_min: 0.95,
            v_max: 1.05,
            ph_refresh: PhRefresh::PerEpisode,
            k: 2,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.horizon == 0 {
            return Err(EnvError::Config("horizon must be at least 1".into()));
        }
        if !(self.v_min < self.v_max) {
            return Err(EnvError::Config("v_min must be below v_max".into()));
        }
        if self.k == 0 {
            return Err(EnvError::Config("hop radius must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `|N| x 3` per-unit voltages, zero on absent or dark phases.
    pub voltages: DMatrix<f64>,
    pub e_supp: f64,
    pub v_viol: f64,
    /// One flow per line (pu, summed over phases).
    pub flows: Vec<f64>,
    /// Current state of every action slot.
    pub config: Vec<bool>,
    /// Per switch: its line failed in this scenario.
    pub outage_mask: Vec<bool>,
    /// Per action slot: `outage_mask` for switch slots, `false` for loads.
    pub action_mask: Vec<bool>,
    pub laplacian: Arc<DMatrix<f64>>,
    pub converged: bool,
}

impl Observation {
    pub fn is_finite(&self) -> bool {
        self.voltages.iter().all(|x| x.is_finite())
            && self.flows.iter().all(|x| x.is_finite())
            && self.e_supp.is_finite()
            && self.v_viol.is_finite()
    }

    pub fn policy_input(&self) -> PolicyInput<'_> {
        PolicyInput {
            voltages: &self.voltages,
            laplacian: &self.laplacian,
            e_supp: self.e_supp,
            v_viol: self.v_viol,
            flows: &self.flows,
            mask: &self.action_mask,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub e_supp: f64,
    pub v_viol: f64,
    pub c_viol: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Everything needed to rebuild an environment mid-episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub scenario: OutageScenario,
    pub switch_closed: Vec<bool>,
    pub load_connected: Vec<bool>,
    pub t: usize,
}

/// `(1 / 3|N|) * Σ_i Σ_{j in φ_i} [max(V - v_max, 0) + max(v_min - V, 0)]`
/// where `φ_i` are the energized phases of node `i`.
pub fn compute_v_viol(voltages: &[[f64; 3]], active: &[Phases], v_min: f64, v_max: f64) -> f64 {
    let n = voltages.len();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (v, phases) in voltages.iter().zip(active) {
        for j in phases.iter() {
            total += (v[j] - v_max).max(0.0) + (v_min - v[j]).max(0.0);
        }
    }
    total / (3 * n) as f64
}

/// `E_supp - V_viol`, or `-1` when `c_viol`.
pub fn reward(e_supp: f64, v_viol: f64, c_viol: bool) -> f64 {
    if c_viol {
        VIOLATION_REWARD
    } else {
        e_supp - v_viol
    }
}

/// Phases of each node that sit in an energized island.
pub fn energized_phases(g: &NetworkGraph, pf: &PowerFlowResult) -> Vec<Phases> {
    let island = pf.island_of();
    g.buses()
        .iter()
        .enumerate()
        .map(|(i, b)| {
            if pf.islands[island[i]].energized {
                b.phases
            } else {
                Phases::default()
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
struct EpisodeState {
    scenario: OutageScenario,
    outage: BTreeSet<LineId>,
    switch_mask: Vec<bool>,
    switch_states: Vec<SwitchState>,
    load_connected: Vec<bool>,
    laplacian: Arc<DMatrix<f64>>,
    t: usize,
}

pub struct Env {
    graph: Arc<NetworkGraph>,
    cfg: EnvConfig,
    variant: Variant,
    cache: Arc<PhCache>,
    solver: SolverConfig,
    sheddable: Vec<usize>,
    state: Option<EpisodeState>,
}

impl Env {
    pub fn new(
        graph: Arc<NetworkGraph>,
        cfg: EnvConfig,
        variant: Variant,
        cache: Arc<PhCache>,
    ) -> Result<Self, EnvError> {
        cfg.validate()?;
        let sheddable = graph.sheddable_loads();
        Ok(Self {
            graph,
            cfg,
            variant,
            cache,
            solver: SolverConfig::default(),
            sheddable,
            state: None,
        })
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn n_switches(&self) -> usize {
        self.graph.switches().len()
    }

    pub fn n_actions(&self) -> usize {
        self.graph.switches().len() + self.sheddable.len()
    }

    pub fn step_count(&self) -> usize {
        self.state.as_ref().map_or(0, |s| s.t)
    }

    fn operator(
        &self,
        switch_states: &[SwitchState],
        outage: &BTreeSet<LineId>,
    ) -> Result<Arc<DMatrix<f64>>, EnvError> {
        let adj = grid::effective_adjacency(&self.graph, switch_states, outage)?;
        let weights = match self.variant {
            Variant::Ph => tda::ph_weights_for(&adj, self.cfg.k, &self.cache)?
                .matrix
                .clone(),
            Variant::Plain => tda::binary_weights(&adj),
        };
        Ok(Arc::new(tda::laplacian(&weights)))
    }

    pub fn reset(&mut self, scenario: &OutageScenario) -> Result<Observation, EnvError> {
        let g = &self.graph;
        let outage = scenario.failed_lines.clone();
        let failed = g.outage_mask(&outage)?;
        let switch_mask: Vec<bool> = g
            .switches()
            .iter()
            .map(|s| failed[g.line_idx(s.line_id).expect("validated")])
            .collect();
        let switch_states: Vec<SwitchState> = g
            .switches()
            .iter()
            .zip(&switch_mask)
            .map(|(s, &m)| {
                if m {
                    SwitchState::Open
                } else {
                    s.default_state
                }
            })
            .collect();
        let laplacian = self.operator(&switch_states, &outage)?;
        self.state = Some(EpisodeState {
            scenario: scenario.clone(),
            outage,
            switch_mask,
            switch_states,
            load_connected: vec![true; g.loads().len()],
            laplacian,
            t: 0,
        });
        Ok(self.observe()?.0)
    }

    /// Applies a target configuration and advances one step.
    pub fn step(&mut self, action: &[bool]) -> Result<Step, EnvError> {
        let n_sw = self.n_switches();
        if action.len() != self.n_actions() {
            return Err(EnvError::ActionLength {
                expected: self.n_actions(),
                got: action.len(),
            });
        }
        let refresh = self.cfg.ph_refresh == PhRefresh::PerStep;
        {
            let st = self.state.as_mut().ok_or(EnvError::NotReset)?;
            for s in 0..n_sw {
                st.switch_states[s] = SwitchState::from_closed(action[s] && !st.switch_mask[s]);
            }
            for (slot, &li) in self.sheddable.iter().enumerate() {
                st.load_connected[li] = action[n_sw + slot];
            }
            st.t += 1;
        }
        if refresh {
            let st = self.state.as_ref().expect("checked");
            let lap = self.operator(&st.switch_states, &st.outage)?;
            self.state.as_mut().expect("checked").laplacian = lap;
        }
        let (observation, pf_converged) = self.observe()?;
        let c_viol = !pf_converged || !observation.is_finite();
        let r = reward(observation.e_supp, observation.v_viol, c_viol);
        let done = self.step_count() >= self.cfg.horizon;
        let info = StepInfo {
            e_supp: observation.e_supp,
            v_viol: observation.v_viol,
            c_viol,
        };
        Ok(Step {
            observation,
            reward: r,
            done,
            info,
        })
    }

    fn observe(&self) -> Result<(Observation, bool), EnvError> {
        let st = self.state.as_ref().ok_or(EnvError::NotReset)?;
        let g = &self.graph;
        let pf = powerflow::solve(
            g,
            &st.switch_states,
            &st.outage,
            &st.load_connected,
            &self.solver,
        )?;
        let e_supp = powerflow::energy_supplied(&pf, g)?;
        let active = energized_phases(g, &pf);
        let v_viol = compute_v_viol(&pf.voltages, &active, self.cfg.v_min, self.cfg.v_max);
        let n = g.n_buses();
        let voltages = DMatrix::from_fn(n, 3, |i, j| pf.voltages[i][j]);
        let mut config: Vec<bool> = st.switch_states.iter().map(|s| s.is_closed()).collect();
        config.extend(self.sheddable.iter().map(|&li| st.load_connected[li]));
        let mut action_mask = st.switch_mask.clone();
        action_mask.resize(self.n_actions(), false);
        Ok((
            Observation {
                voltages,
                e_supp,
                v_viol,
                flows: pf.branch_flows,
                config,
                outage_mask: st.switch_mask.clone(),
                action_mask,
                laplacian: Arc::clone(&st.laplacian),
                converged: pf.converged,
            },
            pf.converged,
        ))
    }

    pub fn snapshot(&self) -> Option<EnvSnapshot> {
        self.state.as_ref().map(|st| EnvSnapshot {
            scenario: st.scenario.clone(),
            switch_closed: st.switch_states.iter().map(|s| s.is_closed()).collect(),
            load_connected: st.load_connected.clone(),
            t: st.t,
        })
    }

    /// Rebuilds the episode recorded in `snap` and returns its observation.
    pub fn restore(&mut self, snap: &EnvSnapshot) -> Result<Observation, EnvError> {
        self.reset(&snap.scenario)?;
        if snap.switch_closed.len() != self.n_switches()
            || snap.load_connected.len() != self.graph.loads().len()
        {
            return Err(EnvError::Config("snapshot does not match network".into()));
        }
        let per_step = self.cfg.ph_refresh == PhRefresh::PerStep && snap.t > 0;
        let st = self.state.as_mut().expect("just reset");
        st.switch_states = snap
            .switch_closed
            .iter()
            .map(|&c| SwitchState::from_closed(c))
            .collect();
        st.load_connected = snap.load_connected.clone();
        st.t = snap.t;
        if per_step {
            let (sw, out) = (st.switch_states.clone(), st.outage.clone());
            let lap = self.operator(&sw, &out)?;
            self.state.as_mut().expect("just reset").laplacian = lap;
        }
        Ok(self.observe()?.0)
    }
}
