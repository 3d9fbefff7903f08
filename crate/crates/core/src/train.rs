//! Constraint-weight estimation and the EM training loop.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::fuzzy::{surrogate_potential, TNorm};
use crate::grounding::{
    potential_value, ConstraintStats, GroundedFormula, GroundedRule, GroundingError, GroundingOptions, Slot, World,
};
use crate::infer::{map_inference, GroundNetwork, InferError, MapConfig};
use crate::kb::{KnowledgeBase, WeightMode};
use crate::net::{
    expected_y, neg_log_p0, select_rows, Activation, AdamConfig, AdamState, Mlp, NetError, SupervisionMode,
};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error("non-finite training loss at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("formula {0} has a trainable weight; {1} mode needs fixed weights")]
    TrainableInFrozenMode(usize, TrainMode),
    #[error("no observed patterns to train on")]
    NoSupervision,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unknown {kind} '{value}'")]
    UnknownName { kind: &'static str, value: String },
}

/// Z = n⁻ + n⁺ e^λ.
pub fn local_partition(n_plus: u64, n_minus: u64, lambda: f64) -> f64 {
    n_minus as f64 + n_plus as f64 * lambda.exp()
}

/// E[φ] = n⁺ e^λ / (n⁻ + n⁺ e^λ), evaluated stably.
pub fn expected_satisfaction(n_plus: u64, n_minus: u64, lambda: f64) -> f64 {
    if n_plus == 0 {
        return 0.0;
    }
    if n_minus == 0 {
        return 1.0;
    }
    let r = (n_plus as f64 / n_minus as f64).ln() + lambda;
    crate::net::sigmoid(r)
}

/// λ = log(avg / (1 − avg)) − log(n⁺ / n⁻), with `avg` clipped to
/// [ε, 1 − ε].
pub fn lambda_closed_form(avg: f64, n_plus: u64, n_minus: u64, eps: f64) -> f64 {
    let a = avg.clamp(eps, 1.0 - eps);
    (a / (1.0 - a)).ln() - (n_plus as f64 / n_minus as f64).ln()
}

/// Expected number of satisfied groundings under the local distributions.
pub fn expected_count(stats: &ConstraintStats, lambda: f64) -> f64 {
    stats
        .classes
        .iter()
        .map(|&(p, m, c)| c as f64 * expected_satisfaction(p, m, lambda))
        .sum()
}

/// ∂/∂λ of the piecewise log-likelihood: Φ − Σ_g E[φ].
pub fn grad_lambda(phi: f64, stats: &ConstraintStats, lambda: f64) -> f64 {
    phi - expected_count(stats, lambda)
}

/// Σ_g log p(φ_g) = λΦ − Σ_g log Z_g.
pub fn piecewise_log_likelihood(phi: f64, stats: &ConstraintStats, lambda: f64) -> f64 {
    let log_z: f64 = stats
        .classes
        .iter()
        .map(|&(p, m, c)| {
            // log(n⁻ + n⁺ e^λ) without overflow
            let a = (m as f64).ln();
            let b = (p as f64).ln() + lambda;
            let hi = a.max(b);
            c as f64 * (hi + ((a - hi).exp() + (b - hi).exp()).ln())
        })
        .sum();
    lambda * phi - log_z
}

/// Maximiser of the piecewise likelihood for an observed potential value.
/// Closed form when all groundings share one truth table, bisection
/// otherwise; the satisfaction rate is clipped to [ε, 1 − ε] either way.
pub fn fit_lambda_pl(phi: f64, stats: &ConstraintStats, eps: f64) -> f64 {
    let n = stats.n_groundings as f64;
    if stats.n_groundings == 0 || stats.classes.is_empty() {
        return 0.0;
    }
    if stats.is_uniform() {
        return lambda_closed_form(phi / n, stats.n_plus, stats.n_minus, eps);
    }
    let target = (phi / n).clamp(eps, 1.0 - eps) * n;
    let (mut lo, mut hi) = (-1.0, 1.0);
    while expected_count(stats, lo) > target {
        lo *= 2.0;
    }
    while expected_count(stats, hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_count(stats, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn slot_values(g: &GroundedFormula, world: &World) -> Result<Vec<bool>, GroundingError> {
    g.slots
        .iter()
        .map(|s| match *s {
            Slot::Atom(a) => world.get(a).ok_or(GroundingError::Unobserved(a)),
            Slot::Fixed(b) => Ok(b),
        })
        .collect()
}

/// One pseudo-likelihood factor: p(y_i | rest of the clique) under
/// exp(λφ).
pub fn pseudo_likelihood_prob(
    rule: &GroundedRule,
    grounding: &GroundedFormula,
    world: &World,
    slot: usize,
    lambda: f64,
) -> Result<f64, GroundingError> {
    let expr = &rule.shape(grounding).expr;
    let mut vals = slot_values(grounding, world)?;
    let phi = expr.eval(&vals) as u8 as f64;
    vals[slot] = false;
    let phi0 = expr.eval(&vals) as u8 as f64;
    vals[slot] = true;
    let phi1 = expr.eval(&vals) as u8 as f64;
    Ok((lambda * phi).exp() / ((lambda * phi0).exp() + (lambda * phi1).exp()))
}

/// Informative (grounding, atom) pairs for the pseudo-likelihood: pairs
/// where flipping the atom changes φ. Returns (satisfied, total).
pub fn ppl_counts(rule: &GroundedRule, world: &World) -> Result<(u64, u64), GroundingError> {
    let (mut sat, mut total) = (0, 0);
    for g in &rule.groundings {
        let expr = &rule.shape(g).expr;
        let mut vals = slot_values(g, world)?;
        let phi = expr.eval(&vals);
        for i in 0..vals.len() {
            if !matches!(g.slots[i], Slot::Atom(_)) {
                continue;
            }
            let keep = vals[i];
            vals[i] = !keep;
            let flipped = expr.eval(&vals);
            vals[i] = keep;
            if flipped != phi {
                total += 1;
                if phi {
                    sat += 1;
                }
            }
        }
    }
    Ok((sat, total))
}

/// Σ_g Σ_i log p(y_i | rest).
pub fn ppl_log_likelihood(rule: &GroundedRule, world: &World, lambda: f64) -> Result<f64, GroundingError> {
    let (sat, total) = ppl_counts(rule, world)?;
    // informative pairs contribute λφ − log(1 + e^λ); the rest log(1/2)·0
    let uninformative = rule
        .groundings
        .iter()
        .map(|g| g.slots.iter().filter(|s| matches!(s, Slot::Atom(_))).count() as u64)
        .sum::<u64>()
        - total;
    Ok(lambda * sat as f64 - total as f64 * crate::net::softplus(lambda) - uninformative as f64 * 2f64.ln())
}

/// Maximiser of the pseudo-likelihood: the log-odds of the satisfied
/// fraction of informative pairs, clipped.
pub fn fit_lambda_ppl(sat: u64, total: u64, eps: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let a = (sat as f64 / total as f64).clamp(eps, 1.0 - eps);
    (a / (1.0 - a)).ln()
}

macro_rules! named_enum {
    ($name:ident, $kind:literal, { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = TrainError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(TrainError::UnknownName { kind: $kind, value: s.to_string() }),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Network only; rules are ignored.
    Baseline,
    #[default]
    RnmEm,
    Sbr,
    Ltn,
}

named_enum!(TrainMode, "mode", { Baseline => "baseline", RnmEm => "rnm_em", Sbr => "sbr", Ltn => "ltn" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    Pl,
    Ppl,
    /// Piecewise where truth tables are small enough, pseudo otherwise.
    #[default]
    Auto,
}

named_enum!(Likelihood, "likelihood", { Pl => "pl", Ppl => "ppl", Auto => "auto" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub likelihood: Likelihood,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub lambda_tol: f64,
    /// E-steps without validation improvement before stopping.
    pub patience: usize,
    /// Supervised epochs per M-step.
    pub epochs_per_step: usize,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub full_batch_limit: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub tnorm: TNorm,
    pub map: MapConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::RnmEm,
            likelihood: Likelihood::Auto,
            epsilon: 1e-4,
            max_iterations: 100,
            lambda_tol: 1e-3,
            patience: 3,
            epochs_per_step: 5,
            optimizer: AdamConfig::default(),
            batch_size: 128,
            full_batch_limit: 5000,
            hidden: vec![100],
            activation: Activation::Sigmoid,
            tnorm: TNorm::Product,
            map: MapConfig::default(),
            seed: 0,
        }
    }
}

/// SplitMix64 step, for independent deterministic sub-streams.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A dataset together with its ground network.
#[derive(Debug, Clone)]
pub struct GroundedWorld {
    pub data: Dataset,
    pub net: GroundNetwork,
}

impl GroundedWorld {
    pub fn new(kb: &KnowledgeBase, data: Dataset, options: &GroundingOptions) -> Result<Self, TrainError> {
        let net = GroundNetwork::build(kb, &data.ids, &data.evidence, &data.class_names, data.mode, options)?;
        Ok(GroundedWorld { data, net })
    }

    /// Evidence plus observed labels.
    pub fn pinned(&self) -> World {
        self.net.observed_world(&self.data.labels, &self.data.observed)
    }
}

/// Patterns of a world on which accuracy is measured.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub world: &'a GroundedWorld,
    pub patterns: &'a [usize],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub lambdas: Vec<f64>,
    pub avg_satisfaction: Vec<f64>,
    pub loss: f64,
    pub train_accuracy: f64,
    pub valid_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub mode: TrainMode,
    pub mlp: Mlp,
    pub adam: AdamState,
    pub lambdas: Vec<f64>,
    pub avg_satisfaction: Vec<f64>,
    pub log: Vec<LogRow>,
    /// Training loss after every epoch.
    pub loss_trace: Vec<f64>,
    /// Iteration whose parameters were kept.
    pub best_iteration: usize,
}

/// Accuracy of predicted 0/1 labels: per pattern for one-label tasks, per
/// atom for multi-label tasks.
pub fn accuracy(pred: &Array2<f64>, truth: &Array2<f64>, patterns: &[usize], mode: SupervisionMode) -> f64 {
    if patterns.is_empty() {
        return 0.0;
    }
    match mode {
        SupervisionMode::OneLabel => {
            let hits = patterns.iter().filter(|&&p| pred.row(p) == truth.row(p)).count();
            hits as f64 / patterns.len() as f64
        }
        SupervisionMode::MultiLabel => {
            let mut hits = 0;
            for &p in patterns {
                hits += pred.row(p).iter().zip(truth.row(p)).filter(|(a, b)| a == b).count();
            }
            hits as f64 / (patterns.len() * pred.ncols()) as f64
        }
    }
}

/// 0/1 labels from scores alone.
pub fn decode_scores(f: &Array2<f64>, mode: SupervisionMode) -> Array2<f64> {
    let mut out = Array2::zeros(f.dim());
    for (p, row) in f.rows().into_iter().enumerate() {
        match mode {
            SupervisionMode::OneLabel => {
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                out[[p, best]] = 1.0;
            }
            SupervisionMode::MultiLabel => {
                for (k, &v) in row.iter().enumerate() {
                    out[[p, k]] = if v >= 0.0 { 1.0 } else { 0.0 };
                }
            }
        }
    }
    out
}

/// Constraint weights used at inference: learned for RNM, divided by the
/// number of groundings for SBR (whose regulariser averages groundings).
pub fn inference_lambdas(mode: TrainMode, lambdas: &[f64], net: &GroundNetwork) -> Option<Vec<f64>> {
    match mode {
        TrainMode::Baseline | TrainMode::Ltn => None,
        TrainMode::RnmEm => Some(lambdas.to_vec()),
        TrainMode::Sbr => Some(
            lambdas
                .iter()
                .zip(&net.rules)
                .map(|(&l, r)| {
                    if r.groundings.is_empty() {
                        0.0
                    } else {
                        l / r.groundings.len() as f64
                    }
                })
                .collect(),
        ),
    }
}

/// Predicted labels for every pattern of a world. Observed patterns keep
/// their labels when MAP inference is used.
pub fn predict(
    mode: TrainMode,
    mlp: &Mlp,
    lambdas: &[f64],
    world: &GroundedWorld,
    config: &TrainConfig,
    map_seed: u64,
) -> Result<Array2<f64>, TrainError> {
    let f = mlp.forward(world.data.features.view())?;
    match inference_lambdas(mode, lambdas, &world.net) {
        None => Ok(decode_scores(&f, world.data.mode)),
        Some(l) => {
            let map = MapConfig {
                seed: map_seed,
                ..config.map
            };
            let r = map_inference(&world.net, &f, &l, &world.pinned(), config.tnorm, &map)?;
            Ok(world.net.labels_of(&r.world))
        }
    }
}

/// −log p₀ over the observed rows and its gradient (descent direction).
pub fn supervised_loss_grad(
    mlp: &Mlp,
    x: &Array2<f64>,
    y: &Array2<f64>,
    mode: SupervisionMode,
) -> Result<(f64, Vec<f64>), TrainError> {
    let cache = mlp.forward_cache(x.view())?;
    let f = cache.scores();
    let loss = neg_log_p0(f, y, mode);
    let d = expected_y(f, mode) - y;
    Ok((loss, mlp.backward(&cache, &d)?))
}

/// Relaxed world from network outputs: squashed scores on learnable
/// atoms, evidence at its truth value.
fn squashed_world(net: &GroundNetwork, probs: &Array2<f64>) -> Vec<f64> {
    let pinned = net.table.empty_world();
    let mut y: Vec<f64> = pinned
        .values
        .iter()
        .map(|v| if *v == Some(true) { 1.0 } else { 0.0 })
        .collect();
    for (p, atoms) in net.class_atoms.iter().enumerate() {
        for (k, &a) in atoms.iter().enumerate() {
            y[a] = probs[[p, k]];
        }
    }
    y
}

/// Loss and gradient of the frozen-weight objective:
/// −log p₀(observed) − Σ_c λ_c · mean_g Φˢ_c(squashed outputs).
pub fn regularised_loss_grad(
    mlp: &Mlp,
    world: &GroundedWorld,
    lambdas: &[f64],
    t: TNorm,
) -> Result<(f64, Vec<f64>), TrainError> {
    let data = &world.data;
    let cache = mlp.forward_cache(data.features.view())?;
    let f = cache.scores();
    let probs = expected_y(f, data.mode);
    let mut d = Array2::zeros(f.dim());
    let mut loss = 0.0;
    let observed = data.observed_indices();
    if !observed.is_empty() {
        let fs = select_rows(f, &observed);
        let ys = select_rows(&data.labels, &observed);
        loss += neg_log_p0(&fs, &ys, data.mode);
        for (k, &p) in observed.iter().enumerate() {
            for c in 0..data.n_classes() {
                d[[p, c]] = probs[[p, c]] - ys[[k, c]];
            }
        }
    }
    let y = squashed_world(&world.net, &probs);
    let mut gy = vec![0.0; y.len()];
    for ((rule, sur), &l) in world.net.rules.iter().zip(&world.net.surrogates).zip(lambdas) {
        if l == 0.0 || rule.groundings.is_empty() {
            continue;
        }
        let w = l / rule.groundings.len() as f64;
        loss -= w * surrogate_potential(rule, sur, &y, t, Some((&mut gy, -w)));
    }
    // chain ∂loss/∂y through the output squashing
    for (p, atoms) in world.net.class_atoms.iter().enumerate() {
        match data.mode {
            SupervisionMode::OneLabel => {
                let mean: f64 = atoms.iter().enumerate().map(|(k, &a)| probs[[p, k]] * gy[a]).sum();
                for (k, &a) in atoms.iter().enumerate() {
                    d[[p, k]] += probs[[p, k]] * (gy[a] - mean);
                }
            }
            SupervisionMode::MultiLabel => {
                for (k, &a) in atoms.iter().enumerate() {
                    d[[p, k]] += gy[a] * probs[[p, k]] * (1.0 - probs[[p, k]]);
                }
            }
        }
    }
    Ok((loss, mlp.backward(&cache, &d)?))
}

struct Trainer<'a> {
    world: &'a GroundedWorld,
    config: &'a TrainConfig,
    observed: Vec<usize>,
    x_obs: Array2<f64>,
    y_obs: Array2<f64>,
    rng: ChaCha8Rng,
}

impl Trainer<'_> {
    fn supervised_epoch(&mut self, mlp: &mut Mlp, adam: &mut AdamState) -> Result<f64, TrainError> {
        let n = self.observed.len();
        if n <= self.config.full_batch_limit {
            let (loss, grad) = supervised_loss_grad(mlp, &self.x_obs, &self.y_obs, self.world.data.mode)?;
            adam.step_mlp(mlp, &grad)?;
            return Ok(loss);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size.max(1)) {
            let xb = select_rows(&self.x_obs, chunk);
            let yb = select_rows(&self.y_obs, chunk);
            let (loss, grad) = supervised_loss_grad(mlp, &xb, &yb, self.world.data.mode)?;
            adam.step_mlp(mlp, &grad)?;
            total += loss;
        }
        Ok(total)
    }

    fn train_accuracy(&self, mlp: &Mlp) -> Result<f64, TrainError> {
        let f = mlp.forward(self.x_obs.view())?;
        let pred = decode_scores(&f, self.world.data.mode);
        let rows: Vec<usize> = (0..self.observed.len()).collect();
        Ok(accuracy(&pred, &self.y_obs, &rows, self.world.data.mode))
    }
}

fn use_ppl(likelihood: Likelihood, stats: &ConstraintStats) -> bool {
    match likelihood {
        Likelihood::Pl => false,
        Likelihood::Ppl => true,
        Likelihood::Auto => !stats.fully_tabulated(),
    }
}

/// Re-estimates every trainable λ on a complete world. Returns the
/// satisfaction rate per rule.
pub fn update_lambdas(
    kb: &KnowledgeBase,
    net: &GroundNetwork,
    world: &World,
    lambdas: &mut [f64],
    likelihood: Likelihood,
    eps: f64,
) -> Result<Vec<f64>, TrainError> {
    let mut avg = Vec::with_capacity(net.rules.len());
    for (c, rule) in net.rules.iter().enumerate() {
        let phi = potential_value(rule, world)?;
        let n = rule.groundings.len();
        avg.push(if n == 0 { 1.0 } else { phi / n as f64 });
        if kb.formulas[c].weight != WeightMode::Trainable {
            continue;
        }
        let stats = ConstraintStats::from_rule(rule);
        lambdas[c] = if use_ppl(likelihood, &stats) {
            let (sat, total) = ppl_counts(rule, world)?;
            fit_lambda_ppl(sat, total, eps)
        } else {
            fit_lambda_pl(phi, &stats, eps)
        };
    }
    Ok(avg)
}

/// Trains a model on `world` (observed patterns supervise the network);
/// `valid` drives model selection and stopping.
pub fn train(
    kb: &KnowledgeBase,
    world: &GroundedWorld,
    valid: Option<EvalSet<'_>>,
    config: &TrainConfig,
) -> Result<TrainedModel, TrainError> {
    let data = &world.data;
    let frozen = matches!(config.mode, TrainMode::Sbr | TrainMode::Ltn);
    if frozen {
        if let Some(f) = kb.formulas.iter().find(|f| f.weight == WeightMode::Trainable) {
            return Err(TrainError::TrainableInFrozenMode(f.id, config.mode));
        }
    }
    let observed = data.observed_indices();
    if observed.is_empty() {
        return Err(TrainError::NoSupervision);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dims = vec![data.feature_dim()];
    dims.extend_from_slice(&config.hidden);
    dims.push(data.n_classes());
    let mut mlp = Mlp::new(&dims, config.activation, &mut rng)?;
    let mut adam = AdamState::new(mlp.n_params(), config.optimizer);
    let mut lambdas: Vec<f64> = kb
        .formulas
        .iter()
        .map(|f| match f.weight {
            WeightMode::Fixed(w) if config.mode != TrainMode::Baseline => w,
            _ => 0.0,
        })
        .collect();
    let mut trainer = Trainer {
        world,
        config,
        x_obs: select_rows(&data.features, &observed),
        y_obs: select_rows(&data.labels, &observed),
        observed,
        rng,
    };
    let learns_lambda =
        config.mode == TrainMode::RnmEm && kb.formulas.iter().any(|f| f.weight == WeightMode::Trainable);
    let regularised = frozen && lambdas.iter().any(|&l| l != 0.0);
    let pinned = world.pinned();

    let mut log = Vec::new();
    let mut loss_trace = Vec::new();
    let mut avg_sat = vec![f64::NAN; kb.formulas.len()];
    // score, network, optimiser, λ, satisfaction, iteration
    type Snapshot = (f64, Mlp, AdamState, Vec<f64>, Vec<f64>, usize);
    let mut best: Option<Snapshot> = None;
    let mut stale = 0;
    for it in 1..=config.max_iterations.max(1) {
        let previous = lambdas.clone();
        if learns_lambda {
            // E-step: complete the unobserved labels
            let completed = if pinned.is_complete() {
                pinned.clone()
            } else {
                let f = mlp.forward(data.features.view())?;
                let map = MapConfig {
                    seed: derive_seed(config.seed, 2 * it as u64),
                    ..config.map
                };
                map_inference(&world.net, &f, &lambdas, &pinned, config.tnorm, &map)?.world
            };
            // M-step for λ
            avg_sat = update_lambdas(
                kb,
                &world.net,
                &completed,
                &mut lambdas,
                config.likelihood,
                config.epsilon,
            )?;
        }
        // M-step for w
        let mut loss = 0.0;
        for _ in 0..config.epochs_per_step {
            loss = if regularised {
                let (l, g) = regularised_loss_grad(&mlp, world, &lambdas, config.tnorm)?;
                adam.step_mlp(&mut mlp, &g)?;
                l
            } else {
                trainer.supervised_epoch(&mut mlp, &mut adam)?
            };
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss(it));
            }
            loss_trace.push(loss);
        }
        let train_acc = trainer.train_accuracy(&mlp)?;
        let valid_acc = match valid {
            Some(v) => {
                let pred = predict(
                    config.mode,
                    &mlp,
                    &lambdas,
                    v.world,
                    config,
                    derive_seed(config.seed, 2 * it as u64 + 1),
                )?;
                Some(accuracy(&pred, &v.world.data.labels, v.patterns, v.world.data.mode))
            }
            None => None,
        };
        log.push(LogRow {
            iteration: it,
            lambdas: lambdas.clone(),
            avg_satisfaction: avg_sat.clone(),
            loss,
            train_accuracy: train_acc,
            valid_accuracy: valid_acc,
        });
        // without a validation set, progress is measured on the loss
        let score = valid_acc.unwrap_or(-loss);
        let improved = best.as_ref().is_none_or(|b| score > b.0);
        if improved {
            best = Some((score, mlp.clone(), adam.clone(), lambdas.clone(), avg_sat.clone(), it));
            stale = 0;
        } else {
            stale += 1;
        }
        let dl = lambdas
            .iter()
            .zip(&previous)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if dl < config.lambda_tol && stale >= config.patience {
            break;
        }
    }
    let (_, mlp, adam, lambdas, avg_satisfaction, best_iteration) = best.expect("at least one iteration");
    Ok(TrainedModel {
        mode: config.mode,
        mlp,
        adam,
        lambdas,
        avg_satisfaction,
        log,
        loss_trace,
        best_iteration,
    })
}

/// Serialised model state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub mode: TrainMode,
    pub tnorm: TNorm,
    pub class_names: Vec<String>,
    /// Pretty-printed formulas the weights belong to.
    pub formulas: Vec<String>,
    pub lambdas: Vec<f64>,
    pub mlp: Mlp,
    pub adam: AdamState,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(model: &TrainedModel, kb: &KnowledgeBase, class_names: &[String], config: &TrainConfig) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            mode: model.mode,
            tnorm: config.tnorm,
            class_names: class_names.to_vec(),
            formulas: kb.formulas.iter().map(|f| f.to_string()).collect(),
            lambdas: model.lambdas.clone(),
            mlp: model.mlp.clone(),
            adam: model.adam.clone(),
            seed: config.seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        if ck.mlp.layers.len() + 1 != ck.mlp.dims.len()
            || ck.mlp.activations.len() + 2 != ck.mlp.dims.len()
            || ck
                .mlp
                .layers
                .iter()
                .zip(ck.mlp.dims.windows(2))
                .any(|(l, d)| l.weights.dim() != (d[0], d[1]) || l.bias.len() != d[1])
        {
            return Err(TrainError::Checkpoint("layer shapes disagree with dimensions".into()));
        }
        if ck.adam.m.len() != ck.mlp.n_params() || ck.adam.v.len() != ck.mlp.n_params() {
            return Err(TrainError::Checkpoint(
                "optimizer state does not match the network".into(),
            ));
        }
        if ck.lambdas.len() != ck.formulas.len() {
            return Err(TrainError::Checkpoint("one weight per formula expected".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_json()).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks that the checkpoint fits a knowledge base and class list.
    pub fn check_compatible(&self, kb: &KnowledgeBase, class_names: &[String]) -> Result<(), TrainError> {
        if self.class_names != class_names {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint classes {:?} differ from {:?}",
                self.class_names, class_names
            )));
        }
        if self.mlp.output_dim() != class_names.len() {
            return Err(TrainError::Checkpoint(
                "network outputs do not match the classes".into(),
            ));
        }
        if self.formulas.len() != kb.formulas.len() {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint has {} formulas, knowledge base {}",
                self.formulas.len(),
                kb.formulas.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn partition_values() {
        assert_eq!(local_partition(3, 1, 0.0), 4.0);
        assert_abs_diff_eq!(local_partition(3, 1, 3f64.ln()), 10.0, epsilon = 1e-12);
        assert_eq!(local_partition(7, 1, 0.0), 8.0);
    }

    #[test]
    fn expected_satisfaction_values() {
        assert_abs_diff_eq!(expected_satisfaction(3, 1, 0.0), 0.75, epsilon = 1e-15);
        assert!(expected_satisfaction(3, 1, -50.0) < 1e-20);
        let l = (0.9f64 / 0.1).ln() - 3f64.ln();
        assert_abs_diff_eq!(expected_satisfaction(3, 1, l), 0.9, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_values() {
        assert_abs_diff_eq!(lambda_closed_form(0.75, 3, 1, 1e-4), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lambda_closed_form(0.9, 3, 1, 1e-4), 3f64.ln(), epsilon = 1e-12);
        let top = lambda_closed_form(1.0, 3, 1, 1e-4);
        assert_abs_diff_eq!(top, (0.9999f64 / 0.0001).ln() - 3f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!((0.9999f64 / 0.0001).ln(), 9.2102, epsilon = 1e-4);
    }

    #[test]
    fn gradient_example() {
        let stats = ConstraintStats::uniform(0, 3, 1, 4);
        assert_abs_diff_eq!(grad_lambda(4.0, &stats, 0.0), 1.0, epsilon = 1e-15);
        let l = fit_lambda_pl(3.6, &stats, 1e-4);
        assert!(grad_lambda(3.6, &stats, l).abs() < 1e-10);
    }

    #[test]
    fn heterogeneous_classes_use_bisection() {
        let mut stats = ConstraintStats::uniform(0, 3, 1, 10);
        stats.classes = vec![(3, 1, 6), (1, 3, 4)];
        let l = fit_lambda_pl(7.0, &stats, 1e-4);
        assert!(grad_lambda(7.0, &stats, l).abs() < 1e-9);
    }

    #[test]
    fn ppl_is_log_odds_of_informative_pairs() {
        assert_abs_diff_eq!(fit_lambda_ppl(9, 10, 1e-4), 9f64.ln(), epsilon = 1e-12);
        assert_eq!(fit_lambda_ppl(0, 0, 1e-4), 0.0);
    }

    #[test]
    fn seeds_differ_per_stream() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }

    #[test]
    fn names_round_trip() {
        for m in [TrainMode::Baseline, TrainMode::RnmEm, TrainMode::Sbr, TrainMode::Ltn] {
            assert_eq!(m.to_string().parse::<TrainMode>().unwrap(), m);
        }
        assert!("em".parse::<TrainMode>().is_err());
        assert_eq!("ppl".parse::<Likelihood>().unwrap(), Likelihood::Ppl);
    }

    #[test]
    fn accuracy_modes() {
        let t = ndarray::array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let p = ndarray::array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        assert_abs_diff_eq!(accuracy(&p, &t, &[0, 1, 2], SupervisionMode::OneLabel), 2.0 / 3.0);
        assert_abs_diff_eq!(accuracy(&p, &t, &[1], SupervisionMode::MultiLabel), 0.0);
        assert_abs_diff_eq!(accuracy(&p, &t, &[0, 1], SupervisionMode::MultiLabel), 0.5);
    }
}
