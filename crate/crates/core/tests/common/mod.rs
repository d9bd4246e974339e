//! Random feeder generator shared by integration tests.

#![allow(dead_code)]

use std::fmt::Write;

use gridrl_core::{load_network, NetworkGraph};
use rand::seq::SliceRandom;
use rand::Rng;

pub struct NetParams {
    pub max_buses: usize,
    /// Probability that a line carries a switch.
    pub switch_p: f64,
    /// Probability that a bus hosts a DER.
    pub der_p: f64,
    /// Extra lines beyond the spanning tree, as a fraction of the bus count.
    pub loop_fraction: f64,
}

impl Default for NetParams {
    fn default() -> Self {
        Self {
            max_buses: 20,
            switch_p: 0.4,
            der_p: 0.25,
            loop_fraction: 0.33,
        }
    }
}

/// Network file text for a random connected feeder rooted at substation
/// bus 1. Degree-one buses may carry a single phase.
pub fn random_network_text(rng: &mut impl Rng, params: &NetParams) -> String {
    let n = rng.gen_range(4..=params.max_buses);
    let mut edges: Vec<(usize, usize)> = (2..=n).map(|i| (rng.gen_range(1..i), i)).collect();
    let extra = (n as f64 * params.loop_fraction) as usize;
    for _ in 0..rng.gen_range(0..=extra) {
        let (a, b) = (rng.gen_range(1..=n), rng.gen_range(1..=n));
        if a != b && !edges.contains(&(a, b)) && !edges.contains(&(b, a)) {
            edges.push((a, b));
        }
    }
    let mut degree = vec![0; n + 1];
    for &(a, b) in &edges {
        degree[a] += 1;
        degree[b] += 1;
    }
    let phases: Vec<&str> = (0..=n)
        .map(|i| {
            if i > 1 && degree[i] == 1 && rng.gen_bool(0.3) {
                *["1", "2", "3"].choose(rng).unwrap()
            } else {
                "123"
            }
        })
        .collect();

    let mut t = String::from("[buses]\n");
    for i in 1..=n {
        writeln!(
            t,
            "id={i},name=b{i},phases={},substation={}",
            phases[i],
            i == 1
        )
        .unwrap();
    }
    t.push_str("[lines]\n");
    for (k, (a, b)) in edges.iter().enumerate() {
        writeln!(
            t,
            "id={},from={a},to={b},r_pu={:.4},x_pu=0.01",
            k + 1,
            rng.gen_range(0.005..0.08)
        )
        .unwrap();
    }
    t.push_str("[switches]\n");
    for k in 0..edges.len() {
        if rng.gen_bool(params.switch_p) {
            let kind = if rng.gen_bool(0.5) {
                "sectionalizing"
            } else {
                "tie"
            };
            writeln!(t, "line={},kind={kind}", k + 1).unwrap();
        }
    }
    t.push_str("[loads]\n");
    for i in 2..=n {
        if rng.gen_bool(0.7) {
            let ph = if phases[i] == "123" {
                *["123", "1", "2", "3", "12"].choose(rng).unwrap()
            } else {
                phases[i]
            };
            writeln!(
                t,
                "bus={i},p_kw={:.1},phases={ph},sheddable={}",
                rng.gen_range(5.0..60.0),
                rng.gen_bool(0.5)
            )
            .unwrap();
        }
    }
    t.push_str("[ders]\n");
    for i in 2..=n {
        if rng.gen_bool(params.der_p) {
            let mode = if rng.gen_bool(0.6) {
                "grid_forming"
            } else {
                "grid_feeding"
            };
            writeln!(
                t,
                "bus={i},kw={:.1},mode={mode}",
                rng.gen_range(10.0..250.0)
            )
            .unwrap();
        }
    }
    t
}

pub fn random_network(rng: &mut impl Rng, params: &NetParams) -> NetworkGraph {
    let t = random_network_text(rng, params);
    load_network(&t).unwrap_or_else(|e| panic!("generated network rejected: {e}\n{t}"))
}
