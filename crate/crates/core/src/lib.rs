//! Topology-aware graph reinforcement learning for distribution-network
//! outage management.
//!
//! Modules, bottom-up:
//!
//! * [`grid`]: feeder graph, network file format, topology queries
//! * [`powerflow`]: linearized per-island power flow
//! * [`tda`]: persistent homology, diagram distances, edge reweighting
//! * [`autodiff`]: small reverse-mode tape over dense matrices
//! * [`policy`]: capsule graph-convolution policy and value head
//! * [`env`]: reconfiguration and load-shedding environment
//! * [`scenario`]: outage scenario generation and persistence
//! * [`ppo`]: clipped-surrogate PPO trainer
//! * [`checkpoint`]: binary model and trainer checkpoints
//! * [`eval`]: evaluation, win counts and paired t-tests
//! * [`rng`]: named random streams derived from one seed
//! * [`data`]: bundled test networks

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod env;
pub mod eval;
pub mod grid;
pub mod policy;
pub mod powerflow;
pub mod ppo;
pub mod rng;
pub mod scenario;
pub mod tda;
pub mod unionfind;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta};
pub use env::{Env, EnvConfig, EnvError, Observation, PhRefresh, Variant};
pub use eval::{ScenarioMetrics, TTest, WinCounts};
pub use grid::{
    load_network, serialize_network, BusId, GridError, LineId, NetworkGraph, SwitchState,
};
pub use policy::{GcapcnConfig, Policy, PolicyDims, PolicyError};
pub use powerflow::{PowerFlowError, PowerFlowResult, SolverConfig};
pub use ppo::{TrainConfig, TrainError, Trainer};
pub use scenario::{OutageScenario, ScenarioError};
pub use tda::{PhCache, TdaError, TopologicalWeights};
