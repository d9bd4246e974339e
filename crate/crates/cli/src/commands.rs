use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::Args;
use gridrl_core::checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, TrainerBlock};
use gridrl_core::eval::{self, Controller, ScenarioMetrics};
use gridrl_core::ppo::{self, TrainError, Trainer};
use gridrl_core::scenario::{self, ScenarioError, ScenarioGenerator};
use gridrl_core::tda;
use gridrl_core::{
    rng, Env, NetworkGraph, OutageScenario, PhCache, Policy, PolicyDims, PolicyError, Variant,
};

use crate::config::RunConfig;
use crate::{default_out, exit_error};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NON_FINITE: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;
const EXIT_HASH: u8 = 5;

fn read_network(path: &Path) -> Result<Arc<NetworkGraph>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading network {}", path.display()))?;
    let g = gridrl_core::load_network(&text)
        .with_context(|| format!("loading network {}", path.display()))?;
    Ok(Arc::new(g))
}

fn read_scenarios(path: &Path, network_hash: &str) -> Result<Vec<OutageScenario>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading scenarios {}", path.display()))?;
    let (hash, scenarios) =
        scenario::read_scenarios(&text).with_context(|| format!("parsing {}", path.display()))?;
    if hash != network_hash {
        return Err(exit_error(
            EXIT_HASH,
            format!(
                "{} was generated for network {hash}, not {network_hash}",
                path.display()
            ),
        ));
    }
    Ok(scenarios)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Checkpoint::from_bytes(&bytes)
        .map_err(|e| exit_error(EXIT_CHECKPOINT, format!("{}: {e}", path.display())))
}

fn train_error(e: TrainError) -> anyhow::Error {
    match e {
        TrainError::NonFiniteLoss { .. } | TrainError::Policy(PolicyError::NonFinite(_)) => {
            exit_error(EXIT_NON_FINITE, e.to_string())
        }
        TrainError::State(_) => exit_error(EXIT_CHECKPOINT, e.to_string()),
        other => anyhow::Error::new(other),
    }
}

#[derive(Debug, Args)]
pub struct GenScenariosArgs {
    #[arg(long)]
    network: PathBuf,
    /// Training scenarios to write.
    #[arg(long)]
    count: usize,
    /// Size of one disjoint test set; repeat for several sets.
    #[arg(long = "test-count")]
    test_count: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of outage centers.
    #[arg(long, default_value_t = 25)]
    centers: usize,
    /// Candidate budget as a multiple of the scenarios needed.
    #[arg(long, default_value_t = 50)]
    attempt_factor: usize,
}

pub fn gen_scenarios(a: GenScenariosArgs) -> Result<()> {
    let out = default_out(a.out)?;
    let g = read_network(&a.network)?;
    let hash = g.content_hash();
    let centers = scenario::select_centers(&g, a.centers.min(g.n_buses()))?;
    let generator = ScenarioGenerator::new(Arc::clone(&g), &centers)?;
    let needed = a.count + a.test_count.iter().sum::<usize>();
    let mut rng = rng::stream(a.seed, "scenarios");
    let (pool, stats) = match scenario::build_valid_pool(
        &generator,
        needed,
        needed.max(1) * a.attempt_factor,
        &mut rng,
    ) {
        Ok(x) => x,
        Err(e @ ScenarioError::Exhausted { .. }) => {
            return Err(exit_error(EXIT_VALIDATION, e.to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    let (train, tests) =
        scenario::split_disjoint_many(pool, &a.test_count, &mut rng::stream(a.seed, "split"))?;
    let train_path = out.join("train.csv");
    write(&train_path, scenario::write_scenarios(&hash, &train))?;
    println!(
        "candidates {}, rejected invalid {}, rejected duplicate {}, rejection rate {:.4}",
        stats.generated,
        stats.rejected_invalid,
        stats.rejected_duplicate,
        stats.rejection_rate()
    );
    println!("train {} {}", train.len(), train_path.display());
    for (i, t) in tests.iter().enumerate() {
        let p = out.join(format!("test_{}.csv", i + 1));
        write(&p, scenario::write_scenarios(&hash, t))?;
        println!("test_{} {} {}", i + 1, t.len(), p.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PhWeightsArgs {
    #[arg(long)]
    network: PathBuf,
    /// Scenario files whose post-outage topologies are also precomputed.
    #[arg(long)]
    scenarios: Vec<PathBuf>,
    /// Hop radius of the neighborhoods.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Cache file to write.
    #[arg(long)]
    out: PathBuf,
}

pub fn ph_weights(a: PhWeightsArgs) -> Result<()> {
    let g = read_network(&a.network)?;
    let hash = g.content_hash();
    let mut outages = vec![Default::default()];
    for p in &a.scenarios {
        outages.extend(
            read_scenarios(p, &hash)?
                .into_iter()
                .map(|s| s.failed_lines),
        );
    }
    let cache = PhCache::new();
    let defaults = g.default_switch_states();
    for outage in &outages {
        tda::ph_edge_weights(&g, &defaults, outage, a.k, &cache)?;
    }
    let weights = cache.all_weights();
    write(
        &a.out,
        tda::write_weight_cache(&hash, g.n_buses(), &weights),
    )?;
    println!(
        "{} weight matrices from {} topologies -> {}",
        weights.len(),
        outages.len(),
        a.out.display()
    );
    Ok(())
}

fn load_cache(path: Option<&PathBuf>, g: &NetworkGraph) -> Result<Arc<PhCache>> {
    let cache = PhCache::new();
    if let Some(p) = path {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let (hash, weights) = tda::read_weight_cache(&text)?;
        if hash != g.content_hash() {
            return Err(exit_error(
                EXIT_HASH,
                format!("{} belongs to another network", p.display()),
            ));
        }
        for w in weights {
            cache.insert_weights(w);
        }
    }
    Ok(Arc::new(cache))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides the config's variant.
    #[arg(long)]
    variant: Option<Variant>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `train.total_steps`.
    #[arg(long)]
    total_steps: Option<u64>,
}

fn checkpoint_for(trainer: &Trainer, meta: &CheckpointMeta) -> Checkpoint {
    Checkpoint {
        meta: meta.clone(),
        params: trainer.policy.params.clone(),
        trainer: Some(TrainerBlock {
            state: trainer.state(),
            adam_m: trainer.adam.m.clone(),
            adam_v: trainer.adam.v.clone(),
        }),
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(n) = a.total_steps {
        cfg.train.total_steps = n;
    }
    let out = default_out(a.out.or(cfg.out.clone()))?;
    let g = read_network(&cfg.network)?;
    let hash = g.content_hash();
    let pool = Arc::new(read_scenarios(&cfg.train_scenarios, &hash)?);
    let cache = load_cache(cfg.ph_cache.as_ref(), &g)?;
    let env = Env::new(Arc::clone(&g), cfg.env, cfg.variant, cache)?;
    let dims = PolicyDims {
        nodes: g.n_buses(),
        lines: g.n_lines(),
        actions: env.n_actions(),
    };
    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        dims,
        env: cfg.env,
        variant: cfg.variant,
        network_hash: hash.clone(),
    };

    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            if ckpt.meta != meta {
                return Err(exit_error(
                    EXIT_CHECKPOINT,
                    format!(
                        "{} was written for a different network, model, env or variant",
                        path.display()
                    ),
                ));
            }
            let Some(block) = &ckpt.trainer else {
                return Err(exit_error(
                    EXIT_CHECKPOINT,
                    format!("{} has no trainer state", path.display()),
                ));
            };
            let policy = ckpt
                .policy()
                .map_err(|e| exit_error(EXIT_CHECKPOINT, e.to_string()))?;
            let adam = ckpt
                .adam()
                .map_err(|e| exit_error(EXIT_CHECKPOINT, e.to_string()))?
                .expect("trainer block present");
            Trainer::resume(cfg.train.clone(), policy, adam, env, pool, &block.state)
                .map_err(train_error)?
        }
        None => {
            let policy = Policy::new(
                cfg.model.clone(),
                dims,
                &mut rng::stream(cfg.seed, "policy-init"),
            )?;
            Trainer::new(cfg.train.clone(), policy, env, pool).map_err(train_error)?
        }
    };

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    trainer
        .run(|t: &Trainer| -> Result<()> {
            let p = out.join(format!("checkpoint_{:09}.bin", t.step_count()));
            write(&p, checkpoint_for(t, &meta).to_bytes())?;
            eprintln!("checkpoint {}", p.display());
            Ok(())
        })
        .map_err(|e| match e.downcast::<TrainError>() {
            Ok(te) => train_error(te),
            Err(e) => e,
        })?;

    write(
        &out.join("checkpoint.bin"),
        checkpoint_for(&trainer, &meta).to_bytes(),
    )?;
    write(&out.join("curve.csv"), ppo::curve_csv(trainer.curve()))?;
    let last = trainer.curve().last().map_or(f64::NAN, |r| r.moving_avg);
    println!(
        "variant {} steps {} episodes {} updates {} moving_avg {:.6}",
        cfg.variant,
        trainer.step_count(),
        trainer.curve().last().map_or(0, |r| r.episode),
        trainer.updates(),
        last
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scenarios: PathBuf,
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn evaluate_checkpoint(
    path: &Path,
    g: &Arc<NetworkGraph>,
    scenarios: &[OutageScenario],
) -> Result<Vec<ScenarioMetrics>> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.meta.network_hash != g.content_hash() {
        return Err(exit_error(
            EXIT_HASH,
            format!(
                "{} was trained on network {}",
                path.display(),
                ckpt.meta.network_hash
            ),
        ));
    }
    let policy = ckpt
        .policy()
        .map_err(|e: CheckpointError| exit_error(EXIT_CHECKPOINT, e.to_string()))?;
    let cache = Arc::new(PhCache::new());
    let (env_cfg, variant) = (ckpt.meta.env, ckpt.meta.variant);
    let probe = Env::new(Arc::clone(g), env_cfg, variant, Arc::clone(&cache))?;
    if probe.n_actions() != policy.dims.actions {
        return Err(exit_error(
            EXIT_CHECKPOINT,
            "checkpoint action space does not match network",
        ));
    }
    let make =
        || Env::new(Arc::clone(g), env_cfg, variant, Arc::clone(&cache)).expect("validated above");
    Ok(eval::evaluate(scenarios, Controller::Greedy(&policy), make))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let out = default_out(a.out)?;
    let g = read_network(&a.network)?;
    let scenarios = read_scenarios(&a.scenarios, &g.content_hash())?;
    let metrics = evaluate_checkpoint(&a.checkpoint, &g, &scenarios)?;
    let summary = eval::summary_csv(&eval::summarize(&metrics));
    write(&out.join("metrics.csv"), eval::metrics_csv(&metrics))?;
    write(&out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Exactly two checkpoints: A then B.
    #[arg(long, num_args = 1, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    scenarios: PathBuf,
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn compare(a: CompareArgs) -> Result<()> {
    if a.checkpoint.len() != 2 {
        bail!(
            "compare needs exactly two --checkpoint flags, got {}",
            a.checkpoint.len()
        );
    }
    let out = default_out(a.out)?;
    let g = read_network(&a.network)?;
    let scenarios = read_scenarios(&a.scenarios, &g.content_hash())?;
    let ma = evaluate_checkpoint(&a.checkpoint[0], &g, &scenarios)?;
    let mb = evaluate_checkpoint(&a.checkpoint[1], &g, &scenarios)?;
    let cmp = eval::compare(&ma, &mb)?;
    let report = eval::comparison_report(&cmp, "A", "B");
    write(&out.join("metrics_a.csv"), eval::metrics_csv(&ma))?;
    write(&out.join("metrics_b.csv"), eval::metrics_csv(&mb))?;
    write(&out.join("comparison.csv"), eval::comparison_csv(&ma, &mb)?)?;
    write(&out.join("report.txt"), &report)?;
    print!(
        "A = {}\nB = {}\n\n{report}",
        a.checkpoint[0].display(),
        a.checkpoint[1].display()
    );
    Ok(())
}
