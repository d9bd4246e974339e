//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.

use std::collections::{BTreeSet, HashSet};
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use gridrl_core::autodiff::{Matrix, Tape};
use gridrl_core::checkpoint::TrainerBlock;
use gridrl_core::eval::{self, Controller};
use gridrl_core::grid::{islands, Adjacency, DerMode, Phases};
use gridrl_core::policy::{self, Activation, PolicyInput};
use gridrl_core::powerflow::{self, SolverConfig};
use gridrl_core::scenario::{self, ScenarioGenerator};
use gridrl_core::tda::{self, PersistenceDiagram, PersistencePoint};
use gridrl_core::{
    data, env, rng, Checkpoint, CheckpointMeta, Env, EnvConfig, GcapcnConfig, NetworkGraph,
    OutageScenario, PhCache, Policy, PolicyDims, SwitchState, TrainConfig, TrainError, Trainer,
    Variant,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

use common::NetParams;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 persistence oracle equivalence", persistence_oracle),
        ("2 wasserstein correctness", wasserstein_correctness),
        ("3 policy gradients", policy_gradients),
        ("4 reward and voltage violation", reward_law),
        ("5 power-flow conservation", power_flow_conservation),
        ("6 scenario statistics", scenario_statistics),
        ("7 masking safety", masking_safety),
        ("8 desk-scale training", desk_scale_training),
        ("9 statistics harness", statistics_harness),
        ("10 determinism and resume", determinism_and_resume),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|e| Err(format!("panicked: {}", panic_message(&e))));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.1}s): {why}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------- 1 ----------

fn hop_metric(adj: &Adjacency) -> (Vec<Vec<f64>>, f64) {
    let n = adj.n();
    let dist: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            adj.bfs_distances(i)
                .into_iter()
                .map(|d| d.expect("connected") as f64)
                .collect()
        })
        .collect();
    let cap = dist.iter().flatten().copied().fold(1.0, f64::max);
    (dist, cap)
}

fn persistence_oracle() -> Outcome {
    let mut graphs = 0usize;
    let mut trees = 0usize;
    for n in 1..=6usize {
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .collect();
        for bits in 0u32..(1 << pairs.len()) {
            let edges: Vec<_> = pairs
                .iter()
                .enumerate()
                .filter(|(b, _)| bits >> b & 1 == 1)
                .map(|(_, &e)| e)
                .collect();
            let adj = Adjacency::from_edges(n, edges.iter().copied());
            if islands(&adj).len() != 1 {
                continue;
            }
            graphs += 1;
            let (dist, cap) = hop_metric(&adj);
            let uf = tda::h0_union_find(&dist, cap).map_err(|e| e.to_string())?;
            let (red0, red1) = tda::reduction_diagrams(&dist, cap).map_err(|e| e.to_string())?;
            ensure!(
                uf == red0,
                "PD0 differs on n={n} edges={edges:?}: {:?} vs {:?}",
                uf.pairs(),
                red0.pairs()
            );
            if edges.len() == n - 1 {
                trees += 1;
                ensure!(red1.is_empty(), "tree {edges:?} has PD1 {:?}", red1.pairs());
            }
        }
    }
    let square = Adjacency::from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0)]);
    let (dist, cap) = hop_metric(&square);
    let (_, pd1) = tda::vietoris_rips_persistence(&dist, cap).map_err(|e| e.to_string())?;
    ensure!(
        pd1.pairs() == vec![(1.0, 2.0)],
        "4-cycle PD1 {:?}",
        pd1.pairs()
    );
    Ok(format!(
        "{graphs} connected graphs on <=6 nodes ({trees} trees), 4-cycle PD1 = {{(1,2)}}"
    ))
}

// ---------- 2 ----------

fn random_diagram(rng: &mut ChaCha8Rng, max_points: usize) -> PersistenceDiagram {
    let n = rng.gen_range(0..=max_points);
    PersistenceDiagram::new(
        1,
        (0..n).map(|_| {
            let b = rng.gen_range(0.0..3.0);
            PersistencePoint::new(b, b + rng.gen_range(0.01..2.0))
        }),
    )
}

/// Enumerates every partial matching: each point of `a` goes to a distinct
/// point of `b` or to the diagonal; leftover `b` points go to the diagonal.
fn brute_w2(a: &[PersistencePoint], b: &[PersistencePoint]) -> f64 {
    fn diag(p: &PersistencePoint) -> f64 {
        (p.death - p.birth).powi(2) / 2.0
    }
    fn go(
        i: usize,
        a: &[PersistencePoint],
        b: &[PersistencePoint],
        used: &mut Vec<bool>,
        acc: f64,
        best: &mut f64,
    ) {
        if i == a.len() {
            let rest: f64 = b
                .iter()
                .zip(used.iter())
                .filter(|(_, &u)| !u)
                .map(|(p, _)| diag(p))
                .sum();
            *best = best.min(acc + rest);
            return;
        }
        go(i + 1, a, b, used, acc + diag(&a[i]), best);
        for j in 0..b.len() {
            if !used[j] {
                used[j] = true;
                let c = (a[i].birth - b[j].birth).powi(2) + (a[i].death - b[j].death).powi(2);
                go(i + 1, a, b, used, acc + c, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, a, b, &mut vec![false; b.len()], 0.0, &mut best);
    best.sqrt()
}

fn wasserstein_correctness() -> Outcome {
    let mut rng = chacha(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (a, b) = (random_diagram(&mut rng, 4), random_diagram(&mut rng, 4));
        let got = tda::wasserstein2(&a, &b).map_err(|e| e.to_string())?;
        let want = brute_w2(a.points(), b.points());
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-9, "W2 {got} vs brute force {want}");
    }
    for _ in 0..200 {
        let d: Vec<_> = (0..3).map(|_| random_diagram(&mut rng, 5)).collect();
        let w = |x: &PersistenceDiagram, y: &PersistenceDiagram| tda::wasserstein2(x, y).unwrap();
        ensure!(w(&d[0], &d[1]) == w(&d[1], &d[0]), "asymmetric");
        ensure!(w(&d[0], &d[0]) == 0.0, "non-zero self distance");
        ensure!(
            w(&d[0], &d[2]) <= w(&d[0], &d[1]) + w(&d[1], &d[2]) + 1e-9,
            "triangle inequality violated"
        );
    }
    Ok(format!(
        "200 pairs vs brute force (max |diff| {worst:.1e}), 200 triples satisfy metric axioms"
    ))
}

// ---------- 3 ----------

fn policy_gradients() -> Outcome {
    let mut rng = chacha(3);
    let adj = Adjacency::from_edges(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (1, 4)]);
    let lap = tda::laplacian(&tda::binary_weights(&adj));
    let config = GcapcnConfig {
        embed_dim: 4,
        hidden: vec![4, 3],
        moments: 2,
        filter_degree: 2,
        activation: Activation::Tanh,
    };
    let dims = PolicyDims {
        nodes: 6,
        lines: 6,
        actions: 5,
    };
    let mut pol = Policy::new(config, dims, &mut rng).map_err(|e| e.to_string())?;
    // non-zero biases so every tensor carries gradient signal
    for m in pol.params.values_mut() {
        if m.nrows() == 1 {
            m.iter_mut().for_each(|x| *x = rng.gen_range(-0.3..0.3));
        }
    }
    let voltages = Matrix::from_fn(6, 3, |_, _| rng.gen_range(0.9..1.1));
    let flows: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let mask = [false, true, false, false, false];
    let action = [true, false, false, true, true];
    let input = PolicyInput {
        voltages: &voltages,
        laplacian: &lap,
        e_supp: 0.7,
        v_viol: 0.02,
        flows: &flows,
        mask: &mask,
    };
    let build = |p: &Policy| -> (Tape, gridrl_core::autodiff::Var) {
        let mut t = Tape::new();
        let vars = p.forward(&mut t, &input).unwrap();
        let lp = policy::log_prob_on_tape(&mut t, &vars, &action);
        let ent = policy::entropy_on_tape(&mut t, &vars);
        let v2 = t.mul(vars.value, vars.value);
        let v2 = t.scale(v2, 0.5);
        let ent = t.scale(ent, 0.1);
        let l = t.add(lp, v2);
        let l = t.add(l, ent);
        (t, l)
    };
    let loss_of = |p: &Policy| {
        let (t, l) = build(p);
        t.scalar(l)
    };
    let analytic = {
        let (t, l) = build(&pol);
        t.backward(l, pol.params.len())
            .map_err(|e| e.to_string())?
            .grads
    };

    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    for idx in 0..pol.params.len() {
        let name = pol.params.name_at(idx).to_string();
        let shape = pol.params.at(idx).shape();
        let mut numeric = Matrix::zeros(shape.0, shape.1);
        for e in 0..shape.0 * shape.1 {
            let orig = pol.params.at(idx)[e];
            pol.params.at_mut(idx)[e] = orig + h;
            let up = loss_of(&pol);
            pol.params.at_mut(idx)[e] = orig - h;
            let down = loss_of(&pol);
            pol.params.at_mut(idx)[e] = orig;
            numeric[e] = (up - down) / (2.0 * h);
        }
        let exact = analytic[idx]
            .clone()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
        let scale = exact.norm().max(numeric.norm());
        ensure!(scale > 1e-9, "{name} has no gradient signal");
        let rel = (&exact - &numeric).norm() / scale;
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
        ensure!(rel < 1e-4, "{name}: relative error {rel:.2e}");
    }
    Ok(format!(
        "{} tensors, worst relative error {:.1e} ({})",
        pol.params.len(),
        worst.0,
        worst.1
    ))
}

// ---------- 4 ----------

fn reward_law() -> Outcome {
    let all = Phases::ALL;
    let v = env::compute_v_viol(
        &[[1.10, 1.0, 1.0], [1.0, 1.0, 1.0]],
        &[all, all],
        0.95,
        1.05,
    );
    ensure!((v - 0.05 / 6.0).abs() < 1e-12, "V_viol {v}");
    let low = env::compute_v_viol(
        &[[0.90, 1.0, 1.0], [1.0, 1.0, 1.0]],
        &[all, all],
        0.95,
        1.05,
    );
    ensure!(
        (low - 0.05 / 6.0).abs() < 1e-12,
        "undervoltage V_viol {low}"
    );
    // dark phases are excluded but still count in the 3|N| normalizer
    let one = Phases::from_list(&[1]).unwrap();
    let part = env::compute_v_viol(&[[1.10, 0.0, 0.0], [1.0; 3]], &[one, all], 0.95, 1.05);
    ensure!(
        (part - 0.05 / 6.0).abs() < 1e-12,
        "partial-phase V_viol {part}"
    );
    ensure!(
        env::compute_v_viol(&[[1.0; 3]; 4], &[all; 4], 0.95, 1.05) == 0.0,
        "in-band V_viol non-zero"
    );
    let r = env::reward(0.8, 0.1, false);
    ensure!((r - 0.7).abs() < 1e-12, "reward {r}");

    let mut rng = chacha(4);
    for _ in 0..1000 {
        let (e, v) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.5));
        ensure!(env::reward(e, v, true) == -1.0, "C_viol reward not -1");
        ensure!(
            env::reward(e, v, false) == e - v,
            "reward != E_supp - V_viol"
        );
    }

    // the same law on live environment steps
    let g = Arc::new(data::toy15());
    let mut e = Env::new(
        Arc::clone(&g),
        EnvConfig::default(),
        Variant::Plain,
        Arc::new(PhCache::new()),
    )
    .unwrap();
    let gen =
        ScenarioGenerator::new(Arc::clone(&g), &scenario::select_centers(&g, 8).unwrap()).unwrap();
    let (mut steps, mut violations) = (0, 0);
    for s in gen.generate(100, &mut rng).unwrap() {
        e.reset(&s).unwrap();
        for _ in 0..4 {
            let a: Vec<bool> = (0..e.n_actions()).map(|_| rng.gen_bool(0.5)).collect();
            let st = e.step(&a).unwrap();
            steps += 1;
            if st.info.c_viol {
                violations += 1;
                ensure!(st.reward == -1.0, "C_viol step reward {}", st.reward);
            } else {
                ensure!(
                    st.reward == st.info.e_supp - st.info.v_viol,
                    "reward mismatch"
                );
            }
        }
    }
    ensure!(violations > 0, "no C_viol step observed");
    Ok(format!(
        "hand examples to 1e-12; {steps} env steps ({violations} with C_viol) obey the reward law"
    ))
}

// ---------- 5 ----------

fn power_flow_conservation() -> Outcome {
    let mut rng = chacha(5);
    let cfg = SolverConfig::default();
    let (mut worst, mut dark_islands, mut overloads) = (0.0f64, 0, 0);
    for case in 0..100 {
        let g = if case % 10 == 0 {
            data::feeder123()
        } else {
            common::random_network(&mut rng, &NetParams::default())
        };
        let states: Vec<SwitchState> = g
            .switches()
            .iter()
            .map(|_| SwitchState::from_closed(rng.gen_bool(0.6)))
            .collect();
        let outage: BTreeSet<u32> = g
            .lines()
            .iter()
            .filter(|_| rng.gen_bool(0.1))
            .map(|l| l.id)
            .collect();
        let connected: Vec<bool> = g.loads().iter().map(|_| rng.gen_bool(0.85)).collect();
        let res =
            powerflow::solve(&g, &states, &outage, &connected, &cfg).map_err(|e| e.to_string())?;

        // independent island bookkeeping
        let in_service: Vec<bool> = (0..g.n_lines())
            .map(|li| {
                let line = &g.lines()[li];
                !outage.contains(&line.id)
                    && g.switch_of_line(li).is_none_or(|s| states[s].is_closed())
            })
            .collect();
        let adj = Adjacency::from_edges(
            g.n_buses(),
            (0..g.n_lines())
                .filter(|&l| in_service[l])
                .map(|l| g.line_ends(l)),
        );
        let comps = islands(&adj);
        let mut any_overload = false;
        for nodes in &comps {
            let inside = |b: u32| nodes.contains(&g.bus_idx(b).unwrap());
            let has_sub = nodes.contains(&g.substation_idx());
            let forming = g
                .ders()
                .iter()
                .any(|d| d.mode == DerMode::GridForming && inside(d.bus_id));
            let energized = has_sub || forming;
            let demand: f64 = g
                .loads()
                .iter()
                .zip(&connected)
                .filter(|(l, &on)| on && inside(l.bus_id))
                .map(|(l, _)| l.total_kw())
                .sum();
            let capacity: f64 = if has_sub {
                f64::INFINITY
            } else {
                g.ders()
                    .iter()
                    .filter(|d| inside(d.bus_id))
                    .map(|d| d.rating_kw)
                    .sum()
            };
            let overloaded = energized && demand > capacity;
            any_overload |= overloaded;
            for (li, load) in g.loads().iter().enumerate() {
                if inside(load.bus_id) {
                    let want = connected[li] && energized && !overloaded;
                    ensure!(
                        res.served[li] == want,
                        "case {case}: load {li} served={} expected {want}",
                        res.served[li]
                    );
                }
            }
            if !energized {
                dark_islands += 1;
                for &v in nodes {
                    ensure!(
                        res.voltages[v] == [0.0; 3],
                        "case {case}: dark bus {v} has voltage"
                    );
                }
                continue;
            }
            // nodal balance: net outflow equals injection at every non-slack node
            let slack = if has_sub {
                g.substation_idx()
            } else {
                res.islands
                    .iter()
                    .find(|r| r.nodes.contains(&nodes[0]))
                    .and_then(|r| r.slack)
                    .unwrap()
            };
            for &v in nodes {
                for ph in 0..3 {
                    let mut outflow = 0.0;
                    for li in (0..g.n_lines()).filter(|&l| in_service[l]) {
                        let (a, b) = g.line_ends(li);
                        if a == v {
                            outflow += res.phase_flows[li][ph];
                        } else if b == v {
                            outflow -= res.phase_flows[li][ph];
                        }
                    }
                    let inj = if v == slack {
                        -nodes
                            .iter()
                            .filter(|&&u| u != slack)
                            .map(|&u| res.injections[u][ph])
                            .sum::<f64>()
                    } else {
                        res.injections[v][ph]
                    };
                    let resid = (outflow - inj).abs();
                    worst = worst.max(resid);
                    ensure!(
                        resid < 1e-9,
                        "case {case}: bus {v} phase {ph} residual {resid:.2e}"
                    );
                }
            }
        }
        if any_overload {
            overloads += 1;
        }
        ensure!(
            res.converged == !any_overload,
            "case {case}: converged={} with overload={any_overload}",
            res.converged
        );
    }
    ensure!(
        overloads > 0 && dark_islands > 0,
        "cases did not exercise overload ({overloads}) and dark ({dark_islands}) islands"
    );
    Ok(format!(
        "100 cases, max residual {worst:.1e} pu, {dark_islands} dark islands serve 0, {overloads} overload cases flagged"
    ))
}

// ---------- 6 ----------

fn scenario_statistics() -> Outcome {
    let g = Arc::new(data::feeder123());
    let centers = scenario::select_centers(&g, 25).map_err(|e| e.to_string())?;
    let gen = ScenarioGenerator::new(Arc::clone(&g), &centers).map_err(|e| e.to_string())?;
    let mut rng = rng::stream(6, "scenarios");
    let all = gen.generate(10_000, &mut rng).map_err(|e| e.to_string())?;
    let mut sum_s = 0.0;
    for s in &all {
        let hood = gen
            .neighborhood_lines(g.bus_idx(s.center).unwrap(), s.radius)
            .unwrap();
        let hood_ids: BTreeSet<u32> = hood.iter().map(|&li| g.lines()[li].id).collect();
        let k = ((s.severity * hood.len() as f64).ceil() as usize).max(1);
        ensure!(
            s.failed_lines.len() == k,
            "k={} expected {k} (s={}, |E_sub|={})",
            s.failed_lines.len(),
            s.severity,
            hood.len()
        );
        ensure!(
            s.failed_lines.is_subset(&hood_ids),
            "failed line outside the neighborhood"
        );
        ensure!(
            (1..=gen.max_radius()).contains(&s.radius),
            "radius {} out of range",
            s.radius
        );
        sum_s += s.severity;
    }
    let mean = sum_s / all.len() as f64;
    ensure!((0.13..=0.17).contains(&mean), "mean severity {mean}");

    let (pool, _) =
        scenario::build_valid_pool(&gen, 800, 20_000, &mut rng).map_err(|e| e.to_string())?;
    let (train, tests) = scenario::split_disjoint_many(pool, &[100, 100, 100], &mut rng)
        .map_err(|e| e.to_string())?;
    let mut seen = HashSet::new();
    for s in train.iter().chain(tests.iter().flatten()) {
        ensure!(
            seen.insert(s.failed_lines.clone()),
            "failed-line set shared between splits"
        );
    }
    ensure!(tests.iter().all(|t| t.len() == 100), "test set sizes");
    Ok(format!(
        "10000 scenarios obey k = max(1, ceil(s|E_sub|)), mean(s) = {mean:.4}, train {} + 3x100 test disjoint",
        train.len()
    ))
}

// ---------- 7 ----------

fn masking_safety() -> Outcome {
    let g = Arc::new(data::feeder123());
    let gen =
        ScenarioGenerator::new(Arc::clone(&g), &scenario::select_centers(&g, 25).unwrap()).unwrap();
    let mut rng = chacha(7);
    let scenarios: Vec<OutageScenario> = gen
        .generate(400, &mut rng)
        .unwrap()
        .into_iter()
        .filter(|s| {
            g.outage_mask(&s.failed_lines)
                .unwrap()
                .iter()
                .enumerate()
                .any(|(li, &f)| f && g.switch_of_line(li).is_some())
        })
        .collect();
    ensure!(!scenarios.is_empty(), "no scenario fails a switched line");
    let mut env = Env::new(
        Arc::clone(&g),
        EnvConfig::default(),
        Variant::Plain,
        Arc::new(PhCache::new()),
    )
    .unwrap();
    let dims = PolicyDims {
        nodes: g.n_buses(),
        lines: g.n_lines(),
        actions: env.n_actions(),
    };
    let config = GcapcnConfig {
        embed_dim: 8,
        hidden: vec![8],
        ..GcapcnConfig::default()
    };
    let mut pol = Policy::new(config, dims, &mut rng).unwrap();
    // bias every slot towards ON so masking is what keeps failed switches open
    pol.params.get_mut("decoder.out.b").unwrap().fill(8.0);

    let n_sw = env.n_switches();
    let (mut sampled, mut greedy, mut masked_slots) = (0, 0, 0);
    for (i, s) in scenarios.iter().cycle().enumerate() {
        if sampled >= 1000 && greedy >= 1000 {
            break;
        }
        let mut obs = env.reset(s).unwrap();
        let greedy_turn = i % 2 == 1;
        for _ in 0..4 {
            let out = pol.evaluate(&obs.policy_input()).unwrap();
            let action = if greedy_turn {
                greedy += 1;
                policy::greedy_action(&out.probs)
            } else {
                sampled += 1;
                policy::sample_action(&out.probs, &obs.action_mask, &mut rng).0
            };
            for (slot, &m) in obs.action_mask.iter().enumerate() {
                if m {
                    masked_slots += 1;
                    ensure!(out.probs[slot] == 0.0, "masked prob {}", out.probs[slot]);
                    ensure!(!action[slot], "masked slot chosen ON");
                }
            }
            // even a forced ON is ignored by the environment
            let forced: Vec<bool> = vec![true; action.len()];
            let next = env
                .step(if greedy_turn { &forced } else { &action })
                .unwrap()
                .observation;
            for sw in 0..n_sw {
                if next.outage_mask[sw] {
                    ensure!(!next.config[sw], "masked switch {sw} closed after step");
                }
            }
            obs = next;
        }
    }
    Ok(format!("{sampled} sampled + {greedy} greedy actions, {masked_slots} masked slot checks, no masked switch closed"))
}

// ---------- 8 ----------

fn toy_pool() -> (Arc<NetworkGraph>, Vec<OutageScenario>, Vec<OutageScenario>) {
    let g = Arc::new(data::toy15());
    let centers = scenario::select_centers(&g, g.n_buses()).unwrap();
    let gen = ScenarioGenerator::new(Arc::clone(&g), &centers).unwrap();
    let mut rng = rng::stream(8, "scenarios");
    let (pool, _) = scenario::build_valid_pool(&gen, 150, 20_000, &mut rng).unwrap();
    let (train, test) = scenario::split_disjoint(pool, 50, &mut rng::stream(8, "split")).unwrap();
    (g, train, test)
}

fn train_toy(
    g: &Arc<NetworkGraph>,
    train: &[OutageScenario],
    variant: Variant,
    steps: u64,
) -> Result<Policy, TrainError> {
    let cfg = TrainConfig {
        total_steps: steps,
        rollout_len: 1024,
        minibatch: 128,
        epochs: 4,
        lr: 1e-3,
        seed: 8,
        ..TrainConfig::default()
    };
    let model = GcapcnConfig {
        embed_dim: 16,
        hidden: vec![16, 16],
        ..GcapcnConfig::default()
    };
    let env = Env::new(
        Arc::clone(g),
        EnvConfig::default(),
        variant,
        Arc::new(PhCache::new()),
    )?;
    let dims = PolicyDims {
        nodes: g.n_buses(),
        lines: g.n_lines(),
        actions: env.n_actions(),
    };
    let policy = Policy::new(model, dims, &mut rng::stream(cfg.seed, "policy-init"))?;
    let mut trainer = Trainer::new(cfg, policy, env, Arc::new(train.to_vec()))?;
    trainer.run(|_| Ok::<(), TrainError>(()))?;
    Ok(trainer.policy)
}

fn mean_reward(
    g: &Arc<NetworkGraph>,
    test: &[OutageScenario],
    controller: Controller,
    variant: Variant,
) -> f64 {
    let cache = Arc::new(PhCache::new());
    let m = eval::evaluate(test, controller, || {
        Env::new(
            Arc::clone(g),
            EnvConfig::default(),
            variant,
            Arc::clone(&cache),
        )
        .unwrap()
    });
    eval::mean_std(&eval::column(&m, "reward")).0
}

fn desk_scale_training() -> Outcome {
    let (g, train, test) = toy_pool();
    let steps = 24_000;
    let ph = train_toy(&g, &train, Variant::Ph, steps).map_err(|e| e.to_string())?;
    let greedy = mean_reward(&g, &test, Controller::Greedy(&ph), Variant::Ph);
    let random = mean_reward(&g, &test, Controller::Random { seed: 8 }, Variant::Ph);
    let gain = (greedy - random) / random.abs();

    let plain = train_toy(&g, &train, Variant::Plain, steps).map_err(|e| e.to_string())?;
    let plain_r = mean_reward(&g, &test, Controller::Greedy(&plain), Variant::Plain);
    println!(
        "info: {steps} steps on the toy feeder, 50 held-out scenarios: ph {greedy:.4}, plain {plain_r:.4} ({:+.1}% ph over plain), random {random:.4}",
        100.0 * (greedy - plain_r) / plain_r.abs()
    );
    ensure!(
        gain >= 0.2,
        "greedy {greedy:.4} vs random {random:.4}: gain {:.1}%",
        100.0 * gain
    );
    Ok(format!(
        "greedy {greedy:.4} vs random {random:.4} (+{:.1}%)",
        100.0 * gain
    ))
}

// ---------- 9 ----------

fn statistics_harness() -> Outcome {
    let t = eval::paired_t_test(&[1.0, 2.0, 3.0], &[0.0; 3]).map_err(|e| e.to_string())?;
    ensure!((t.t - 2.0 * 3f64.sqrt()).abs() < 1e-12, "t = {}", t.t);
    ensure!(t.df == 2, "df = {}", t.df);
    ensure!((t.p - 0.0742).abs() < 1e-3, "p = {}", t.p);
    // closed form for df = 2: p = 1 - |t| / sqrt(t^2 + 2)
    let exact = 1.0 - t.t / (t.t * t.t + 2.0).sqrt();
    ensure!(
        (t.p - exact).abs() < 1e-12,
        "p = {} vs closed form {exact}",
        t.p
    );

    // 83 wins, 12 losses, 5 ties
    let mut rng = chacha(9);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..100 {
        let base = rng.gen_range(-1.0..1.0);
        let delta = match i {
            0..=82 => rng.gen_range(0.01..0.5),
            83..=94 => -rng.gen_range(0.01..0.5),
            _ => 0.0,
        };
        a.push(base + delta);
        b.push(base);
    }
    let mut idx: Vec<usize> = (0..100).collect();
    idx.shuffle(&mut rng);
    let a: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
    let b: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let w = eval::win_rate(&a, &b).map_err(|e| e.to_string())?;
    ensure!((w.wins_a, w.wins_b, w.ties) == (83, 12, 5), "counts {w:?}");
    let r = eval::win_rate(&b, &a).unwrap();
    ensure!(
        (r.wins_a, r.wins_b, r.ties) == (12, 83, 5),
        "swapped counts {r:?}"
    );
    Ok(format!("t = 2*sqrt(3), p = {:.6}; win counts 83/12/5", t.p))
}

// ---------- 10 ----------

fn small_trainer(g: &Arc<NetworkGraph>, pool: &Arc<Vec<OutageScenario>>, total: u64) -> Trainer {
    let cfg = TrainConfig {
        total_steps: total,
        rollout_len: 128,
        minibatch: 32,
        epochs: 2,
        seed: 10,
        ..TrainConfig::default()
    };
    let env = Env::new(
        Arc::clone(g),
        EnvConfig::default(),
        Variant::Ph,
        Arc::new(PhCache::new()),
    )
    .unwrap();
    let dims = PolicyDims {
        nodes: g.n_buses(),
        lines: g.n_lines(),
        actions: env.n_actions(),
    };
    let model = GcapcnConfig {
        embed_dim: 8,
        hidden: vec![8],
        ..GcapcnConfig::default()
    };
    let policy = Policy::new(model, dims, &mut rng::stream(10, "policy-init")).unwrap();
    Trainer::new(cfg, policy, env, Arc::clone(pool)).unwrap()
}

fn checkpoint_bytes(t: &Trainer, g: &NetworkGraph) -> Vec<u8> {
    Checkpoint {
        meta: CheckpointMeta {
            model: t.policy.config.clone(),
            dims: t.policy.dims,
            env: *t.env().config(),
            variant: t.env().variant(),
            network_hash: g.content_hash(),
        },
        params: t.policy.params.clone(),
        trainer: Some(TrainerBlock {
            state: t.state(),
            adam_m: t.adam.m.clone(),
            adam_v: t.adam.v.clone(),
        }),
    }
    .to_bytes()
}

fn determinism_and_resume() -> Outcome {
    let (g, train, test) = toy_pool();
    let pool = Arc::new(train.clone());
    let total = 1280;

    let run_in = |threads: usize| {
        let pool_t = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool_t.install(|| {
            let mut t = small_trainer(&g, &pool, total);
            t.run(|_| Ok::<(), TrainError>(())).unwrap();
            t
        })
    };
    let full = run_in(1);
    let full4 = run_in(4);
    ensure!(
        full.curve() == full4.curve(),
        "curve depends on worker count"
    );
    ensure!(
        checkpoint_bytes(&full, &g) == checkpoint_bytes(&full4, &g),
        "checkpoint depends on worker count"
    );

    // stop after 3 rollouts, round-trip through checkpoint bytes, continue
    let mut first = small_trainer(&g, &pool, 384);
    first.run(|_| Ok::<(), TrainError>(())).unwrap();
    let ck = Checkpoint::from_bytes(&checkpoint_bytes(&first, &g)).map_err(|e| e.to_string())?;
    let block = ck.trainer.clone().unwrap();
    let env = Env::new(
        Arc::clone(&g),
        ck.meta.env,
        ck.meta.variant,
        Arc::new(PhCache::new()),
    )
    .unwrap();
    let mut resumed = Trainer::resume(
        TrainConfig {
            total_steps: total,
            ..block.state.config.clone()
        },
        ck.policy().unwrap(),
        ck.adam().unwrap().unwrap(),
        env,
        Arc::clone(&pool),
        &block.state,
    )
    .map_err(|e| e.to_string())?;
    resumed.run(|_| Ok::<(), TrainError>(())).unwrap();
    ensure!(
        full.curve().len() == resumed.curve().len(),
        "curve lengths differ"
    );
    for (a, b) in full.curve().iter().zip(resumed.curve()) {
        ensure!(
            a.reward.to_bits() == b.reward.to_bits()
                && a.moving_avg.to_bits() == b.moving_avg.to_bits()
                && a.step == b.step,
            "curve row differs at step {}",
            a.step
        );
    }
    ensure!(
        checkpoint_bytes(&full, &g) == checkpoint_bytes(&resumed, &g),
        "final checkpoints differ"
    );

    // serialized outputs are byte-stable
    let hash = g.content_hash();
    ensure!(
        scenario::write_scenarios(&hash, &test) == scenario::write_scenarios(&hash, &toy_pool().2),
        "scenario file not reproducible"
    );
    let metrics = |p: &Policy| {
        let cache = Arc::new(PhCache::new());
        eval::metrics_csv(&eval::evaluate(&test, Controller::Greedy(p), || {
            Env::new(
                Arc::clone(&g),
                EnvConfig::default(),
                Variant::Ph,
                Arc::clone(&cache),
            )
            .unwrap()
        }))
    };
    ensure!(
        metrics(&full.policy) == metrics(&resumed.policy),
        "metrics CSV not reproducible"
    );
    ensure!(
        gridrl_core::ppo::curve_csv(full.curve()) == gridrl_core::ppo::curve_csv(resumed.curve()),
        "curve CSV differs"
    );
    Ok(format!(
        "{} curve rows bit-identical across split runs and 1 vs 4 workers; checkpoint, scenario and metrics bytes stable",
        full.curve().len()
    ))
}
