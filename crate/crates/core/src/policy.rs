//! Capsule graph-convolution policy with a Bernoulli action head and a
//! value head.
//!
//! Forward pass for one observation:
//!
//! 1. `F0 = V · W_embed` (node voltages, `|N| x 3`, to `|N| x h0`)
//! 2. per layer, capsule `i = σ(Σ_k L^k (F^⊙i) W_ik)` for `i in 1..=p`,
//!    `k in 0..=K`; capsules are concatenated column-wise
//! 3. `F_nodes = F_L · W_node`
//! 4. `F_graph = mean_last_axis(W_g2 · (W_g1 · F_nodes))`
//! 5. `F_context = FF([E_supp, V_viol, b_e...])`
//! 6. `logits = FF(MLP(F_graph + F_context))`, value from a separate MLP
//!
//! Masked slots get the logit [`MASK_LOGIT`], whose sigmoid is exactly 0.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, AutodiffError, Matrix, Tape, Var};

/// Stand-in for `-inf` on masked logits. `sigmoid(MASK_LOGIT) == 0.0`.
pub const MASK_LOGIT: f64 = -1.0e9;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside logs.
pub const PROB_EPS: f64 = 1.0e-7;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite values after {0}")]
    NonFinite(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, t: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => t.tanh(x),
            Activation::Relu => t.relu(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcapcnConfig {
    /// Width of `F0`.
    pub embed_dim: usize,
    /// Capsule width per layer; the length is the number of layers.
    pub hidden: Vec<usize>,
    /// Highest statistical moment `p`.
    pub moments: usize,
    /// Polynomial filter degree `K`.
    pub filter_degree: usize,
    pub activation: Activation,
}

impl Default for GcapcnConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: vec![32, 32],
            moments: 2,
            filter_degree: 2,
            activation: Activation::Tanh,
        }
    }
}

impl GcapcnConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.hidden.is_empty() {
            return Err(PolicyError::Config(
                "at least one capsule layer required".into(),
            ));
        }
        if self.moments == 0 {
            return Err(PolicyError::Config(
                "moment order must be at least 1".into(),
            ));
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(PolicyError::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Width of `F_nodes`, `F_graph` and `F_context`.
    pub fn context_dim(&self) -> usize {
        *self.hidden.last().expect("validated")
    }
}

/// Network-bound sizes the policy is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub nodes: usize,
    pub lines: usize,
    pub actions: usize,
}

/// Ordered name → weight matrix map. Iteration order is insertion order
/// and is part of the checkpoint format.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.entries.values_mut()
    }

    pub fn at(&self, index: usize) -> &Matrix {
        &self.entries[index]
    }

    pub fn at_mut(&mut self, index: usize) -> &mut Matrix {
        &mut self.entries[index]
    }

    pub fn name_at(&self, index: usize) -> &str {
        self.entries.get_index(index).expect("index in range").0
    }

    pub fn total_len(&self) -> usize {
        self.entries.values().map(|m| m.len()).sum()
    }
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..=limit))
}

pub fn capsule_name(layer: usize, moment: usize, degree: usize) -> String {
    format!("capsule.{layer}.w.{moment}.{degree}")
}

/// Inputs for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a> {
    /// `|N| x 3` per-unit voltages.
    pub voltages: &'a Matrix,
    /// `|N| x |N|` graph operator.
    pub laplacian: &'a Matrix,
    pub e_supp: f64,
    pub v_viol: f64,
    /// One flow per line, ordered by line id.
    pub flows: &'a [f64],
    /// One flag per action slot; `true` means masked.
    pub mask: &'a [bool],
}

/// Tape handles produced by [`Policy::forward`].
#[derive(Debug, Clone, Copy)]
pub struct PolicyVars {
    /// `1 x n_actions`, masked slots at [`MASK_LOGIT`].
    pub logits: Var,
    /// `1 x n_actions`.
    pub probs: Var,
    /// `1 x 1`.
    pub value: Var,
    /// `1 x n_actions`, 1 on unmasked slots and 0 on masked ones.
    pub keep: Var,
}

/// Detached forward results.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub config: GcapcnConfig,
    pub dims: PolicyDims,
    pub params: ParamStore,
}

// ---- individual stages, usable on any tape ----

pub fn embed_inputs(t: &mut Tape, voltages: Var, w_embed: Var) -> Var {
    t.matmul(voltages, w_embed)
}

/// One capsule layer. `weights[i][k]` holds `W_{i+1,k}`.
pub fn capsule_layer(
    t: &mut Tape,
    f_prev: Var,
    laplacian: Var,
    weights: &[Vec<Var>],
    activation: Activation,
) -> Var {
    let mut capsules = Vec::with_capacity(weights.len());
    for (i, per_degree) in weights.iter().enumerate() {
        let moment = t.powi(f_prev, i as i32 + 1);
        let mut propagated = moment;
        let mut acc: Option<Var> = None;
        for (k, &w) in per_degree.iter().enumerate() {
            if k > 0 {
                propagated = t.matmul(laplacian, propagated);
            }
            let term = t.matmul(propagated, w);
            acc = Some(match acc {
                Some(a) => t.add(a, term),
                None => term,
            });
        }
        let pre = acc.expect("at least one filter term");
        capsules.push(activation.apply(t, pre));
    }
    if capsules.len() == 1 {
        capsules[0]
    } else {
        t.concat_cols(&capsules)
    }
}

/// `Mean(W_g2 · (W_g1 · F_nodes))` over the last axis, as a `1 x h` row.
pub fn graph_embedding(t: &mut Tape, f_nodes: Var, w_g1: Var, w_g2: Var) -> Var {
    let inner = t.matmul(w_g1, f_nodes);
    let outer = t.matmul(w_g2, inner);
    let col = t.row_mean(outer);
    t.transpose(col)
}

/// Two affine layers with an activation in between.
pub fn feedforward(
    t: &mut Tape,
    x: Var,
    layer1: (Var, Var),
    layer2: (Var, Var),
    activation: Activation,
) -> Var {
    let h = t.matmul(x, layer1.0);
    let h = t.add_row(h, layer1.1);
    let h = activation.apply(t, h);
    let o = t.matmul(h, layer2.0);
    t.add_row(o, layer2.1)
}

/// Concatenates `[E_supp, V_viol, b_e...]` and runs the context network.
pub fn context_encode(
    t: &mut Tape,
    e_supp: f64,
    v_viol: f64,
    flows: &[f64],
    layer1: (Var, Var),
    layer2: (Var, Var),
    activation: Activation,
) -> Var {
    let mut x = Vec::with_capacity(flows.len() + 2);
    x.push(e_supp);
    x.push(v_viol);
    x.extend_from_slice(flows);
    let x = t.constant(Matrix::from_row_slice(1, x.len(), &x));
    feedforward(t, x, layer1, layer2, activation)
}

/// Decoder over `F_graph + F_context`.
pub fn action_logits(
    t: &mut Tape,
    f_graph: Var,
    f_context: Var,
    mlp: (Var, Var),
    out: (Var, Var),
    activation: Activation,
) -> Var {
    let z = t.add(f_graph, f_context);
    feedforward(t, z, mlp, out, activation)
}

pub fn value_estimate(
    t: &mut Tape,
    f_graph: Var,
    f_context: Var,
    layer1: (Var, Var),
    layer2: (Var, Var),
    activation: Activation,
) -> Var {
    let z = t.add(f_graph, f_context);
    feedforward(t, z, layer1, layer2, activation)
}

/// Replaces masked logits by the constant [`MASK_LOGIT`]. Returns
/// `(masked_logits, keep)` where `keep` is the 0/1 unmasked indicator.
pub fn mask_logits(t: &mut Tape, logits: Var, mask: &[bool]) -> (Var, Var) {
    let n = mask.len();
    let keep = Matrix::from_fn(1, n, |_, j| if mask[j] { 0.0 } else { 1.0 });
    let fill = Matrix::from_fn(1, n, |_, j| if mask[j] { MASK_LOGIT } else { 0.0 });
    let keep = t.constant(keep);
    let fill = t.constant(fill);
    let kept = t.mul(logits, keep);
    (t.add(kept, fill), keep)
}

/// Detached masking and sigmoid.
pub fn mask_and_distribution(logits: &[f64], mask: &[bool], value: f64) -> PolicyOutput {
    let logits: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { MASK_LOGIT } else { l })
        .collect();
    let probs = logits.iter().map(|&l| sigmoid(l)).collect();
    PolicyOutput {
        logits,
        probs,
        value,
    }
}

/// Slot ON iff its probability is strictly above 0.5.
pub fn greedy_action(probs: &[f64]) -> Vec<bool> {
    probs.iter().map(|&p| p > 0.5).collect()
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Independent Bernoulli draws. Masked slots are forced OFF and left out
/// of the log-probability.
pub fn sample_action(probs: &[f64], mask: &[bool], rng: &mut impl Rng) -> (Vec<bool>, f64) {
    let mut action = Vec::with_capacity(probs.len());
    let mut logp = 0.0;
    for (&p, &m) in probs.iter().zip(mask) {
        // draw even for masked slots so the stream does not depend on the mask
        let u: f64 = rng.gen();
        if m {
            action.push(false);
            continue;
        }
        let on = u < p;
        let pc = clamp_prob(p);
        logp += if on { pc.ln() } else { (1.0 - pc).ln() };
        action.push(on);
    }
    (action, logp)
}

/// Detached log-probability of an action.
pub fn action_log_prob(probs: &[f64], mask: &[bool], action: &[bool]) -> f64 {
    probs
        .iter()
        .zip(mask)
        .zip(action)
        .filter(|((_, &m), _)| !m)
        .map(|((&p, _), &a)| {
            let pc = clamp_prob(p);
            if a {
                pc.ln()
            } else {
                (1.0 - pc).ln()
            }
        })
        .sum()
}

/// Differentiable `log π(action)` summed over unmasked slots.
pub fn log_prob_on_tape(t: &mut Tape, vars: &PolicyVars, action: &[bool]) -> Var {
    let n = action.len();
    let a = Matrix::from_fn(1, n, |_, j| if action[j] { 1.0 } else { 0.0 });
    let not_a = a.map(|x| 1.0 - x);
    let a = t.constant(a);
    let not_a = t.constant(not_a);
    let pc = t.clamp(vars.probs, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = t.log(pc);
    let one_minus = t.scale(pc, -1.0);
    let one_minus = t.add_scalar(one_minus, 1.0);
    let log_q = t.log(one_minus);
    let on = t.mul(a, log_p);
    let off = t.mul(not_a, log_q);
    let both = t.add(on, off);
    let kept = t.mul(both, vars.keep);
    t.sum(kept)
}

/// Differentiable sum of per-slot binary entropies over unmasked slots.
pub fn entropy_on_tape(t: &mut Tape, vars: &PolicyVars) -> Var {
    let pc = t.clamp(vars.probs, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = t.log(pc);
    let q = t.scale(pc, -1.0);
    let q = t.add_scalar(q, 1.0);
    let log_q = t.log(q);
    let a = t.mul(pc, log_p);
    let b = t.mul(q, log_q);
    let s = t.add(a, b);
    let s = t.mul(s, vars.keep);
    let s = t.sum(s);
    t.scale(s, -1.0)
}

pub fn entropy(probs: &[f64], mask: &[bool]) -> f64 {
    probs
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&p, _)| {
            let p = clamp_prob(p);
            -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
        })
        .sum()
}

impl Policy {
    /// Fresh parameters with uniform Glorot initialization; biases start
    /// at zero.
    pub fn new(
        config: GcapcnConfig,
        dims: PolicyDims,
        rng: &mut impl Rng,
    ) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let p = config.moments;
        let h_last = config.context_dim();
        params.insert("embed.w", glorot(rng, 3, config.embed_dim));
        let mut width_in = config.embed_dim;
        for (l, &h) in config.hidden.iter().enumerate() {
            for i in 1..=p {
                for k in 0..=config.filter_degree {
                    params.insert(capsule_name(l + 1, i, k), glorot(rng, width_in, h));
                }
            }
            width_in = h * p;
        }
        params.insert("node_proj.w", glorot(rng, width_in, h_last));
        params.insert("graph.w_g1", glorot(rng, h_last, dims.nodes));
        params.insert("graph.w_g2", glorot(rng, h_last, h_last));
        let ctx_in = dims.lines + 2;
        params.insert("context.w1", glorot(rng, ctx_in, h_last));
        params.insert("context.b1", Matrix::zeros(1, h_last));
        params.insert("context.w2", glorot(rng, h_last, h_last));
        params.insert("context.b2", Matrix::zeros(1, h_last));
        params.insert("decoder.mlp.w", glorot(rng, h_last, h_last));
        params.insert("decoder.mlp.b", Matrix::zeros(1, h_last));
        params.insert("decoder.out.w", glorot(rng, h_last, dims.actions));
        params.insert("decoder.out.b", Matrix::zeros(1, dims.actions));
        params.insert("value.w1", glorot(rng, h_last, h_last));
        params.insert("value.b1", Matrix::zeros(1, h_last));
        params.insert("value.w2", glorot(rng, h_last, 1));
        params.insert("value.b2", Matrix::zeros(1, 1));
        Ok(Self {
            config,
            dims,
            params,
        })
    }

    /// Rebuilds a policy around an existing store, checking every expected
    /// tensor is present with the right shape.
    pub fn from_params(
        config: GcapcnConfig,
        dims: PolicyDims,
        params: ParamStore,
    ) -> Result<Self, PolicyError> {
        let template = Policy::new(
            config.clone(),
            dims,
            &mut rand::rngs::mock::StepRng::new(0, 0),
        )?;
        if template.params.len() != params.len() {
            return Err(PolicyError::Config(format!(
                "expected {} tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((tn, tm), (n, m)) in template.params.iter().zip(params.iter()) {
            if tn != n || tm.shape() != m.shape() {
                return Err(PolicyError::Shape {
                    what: "checkpoint tensor",
                    expected: format!("{tn} {:?}", tm.shape()),
                    got: format!("{n} {:?}", m.shape()),
                });
            }
        }
        Ok(Self {
            config,
            dims,
            params,
        })
    }

    fn bind(&self, t: &mut Tape, name: &str) -> Var {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        t.param(idx, self.params.at(idx).clone())
    }

    fn check_input(&self, input: &PolicyInput) -> Result<(), PolicyError> {
        let n = self.dims.nodes;
        let shape = |what, expected: (usize, usize), got: (usize, usize)| {
            if expected == got {
                Ok(())
            } else {
                Err(PolicyError::Shape {
                    what,
                    expected: format!("{expected:?}"),
                    got: format!("{got:?}"),
                })
            }
        };
        shape("voltages", (n, 3), input.voltages.shape())?;
        shape("laplacian", (n, n), input.laplacian.shape())?;
        shape("flows", (self.dims.lines, 1), (input.flows.len(), 1))?;
        shape("mask", (self.dims.actions, 1), (input.mask.len(), 1))?;
        if !input.voltages.iter().all(|x| x.is_finite())
            || !input.flows.iter().all(|x| x.is_finite())
            || !input.e_supp.is_finite()
            || !input.v_viol.is_finite()
        {
            return Err(PolicyError::NonFinite("input"));
        }
        Ok(())
    }

    /// Records the full forward pass on `t`.
    pub fn forward(&self, t: &mut Tape, input: &PolicyInput) -> Result<PolicyVars, PolicyError> {
        self.check_input(input)?;
        let act = self.config.activation;
        let v = t.constant(input.voltages.clone());
        let lap = t.constant(input.laplacian.clone());

        let w_embed = self.bind(t, "embed.w");
        let mut f = embed_inputs(t, v, w_embed);
        for l in 1..=self.config.hidden.len() {
            let weights: Vec<Vec<Var>> = (1..=self.config.moments)
                .map(|i| {
                    (0..=self.config.filter_degree)
                        .map(|k| self.bind(t, &capsule_name(l, i, k)))
                        .collect()
                })
                .collect();
            f = capsule_layer(t, f, lap, &weights, act);
            if !t.value(f).iter().all(|x| x.is_finite()) {
                return Err(PolicyError::NonFinite("capsule layer"));
            }
        }
        let w_node = self.bind(t, "node_proj.w");
        let f_nodes = t.matmul(f, w_node);
        let w_g1 = self.bind(t, "graph.w_g1");
        let w_g2 = self.bind(t, "graph.w_g2");
        let f_graph = graph_embedding(t, f_nodes, w_g1, w_g2);

        let c1 = (self.bind(t, "context.w1"), self.bind(t, "context.b1"));
        let c2 = (self.bind(t, "context.w2"), self.bind(t, "context.b2"));
        let f_context = context_encode(t, input.e_supp, input.v_viol, input.flows, c1, c2, act);

        let d1 = (self.bind(t, "decoder.mlp.w"), self.bind(t, "decoder.mlp.b"));
        let d2 = (self.bind(t, "decoder.out.w"), self.bind(t, "decoder.out.b"));
        let raw = action_logits(t, f_graph, f_context, d1, d2, act);
        let (logits, keep) = mask_logits(t, raw, input.mask);
        let probs = t.sigmoid(logits);

        let v1 = (self.bind(t, "value.w1"), self.bind(t, "value.b1"));
        let v2 = (self.bind(t, "value.w2"), self.bind(t, "value.b2"));
        let value = value_estimate(t, f_graph, f_context, v1, v2, act);

        if !t.value(value).iter().all(|x| x.is_finite())
            || !t.value(raw).iter().all(|x| x.is_finite())
        {
            return Err(PolicyError::NonFinite("output heads"));
        }
        Ok(PolicyVars {
            logits,
            probs,
            value,
            keep,
        })
    }

    /// Forward pass without keeping the tape.
    pub fn evaluate(&self, input: &PolicyInput) -> Result<PolicyOutput, PolicyError> {
        let mut t = Tape::new();
        let vars = self.forward(&mut t, input)?;
        Ok(PolicyOutput {
            logits: t.value(vars.logits).iter().copied().collect(),
            probs: t.value(vars.probs).iter().copied().collect(),
            value: t.scalar(vars.value),
        })
    }
}
