//! Bundled test networks.

use crate::grid::{load_network, NetworkGraph};

/// 15 buses, 4 switches, 2 grid-forming DERs, 10 loads.
pub const TOY15: &str = include_str!("../data/toy15.net");

/// 125 buses on the IEEE 123-bus layout, 22 switches, 13 DERs.
pub const FEEDER123: &str = include_str!("../data/feeder123.net");

pub fn toy15() -> NetworkGraph {
    load_network(TOY15).expect("bundled network parses")
}

pub fn feeder123() -> NetworkGraph {
    load_network(FEEDER123).expect("bundled network parses")
}
