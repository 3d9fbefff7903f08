//! MAP inference over the relaxed world.

use std::collections::HashMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fuzzy::{surrogate_potential, Surrogate, TNorm};
use crate::grounding::{
    build_atom_table, ground_all, EvidenceAtom, GroundAtomTable, GroundedRule, GroundingError, GroundingOptions, World,
};
use crate::kb::KnowledgeBase;
use crate::net::{prob_one_label, sigmoid, AdamConfig, AdamState, SupervisionMode};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferError {
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error("network heads {heads:?} do not match dataset classes {classes:?}")]
    HeadMismatch { heads: Vec<String>, classes: Vec<String> },
    #[error("scores have shape {got:?}, expected {expected:?}")]
    ScoreShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("{got} constraint weights for {expected} formulas")]
    LambdaCount { expected: usize, got: usize },
    #[error("pattern {0} is partially observed in a one-label task")]
    PartialGroup(usize),
    #[error("non-finite MAP objective")]
    NonFinite,
    #[error("MAP produced an assignment excluded by the one-label constraint")]
    Excluded,
}

/// Grounded knowledge base over one world, with learnable atoms arranged
/// by pattern and class.
#[derive(Debug, Clone)]
pub struct GroundNetwork {
    pub table: GroundAtomTable,
    pub rules: Vec<GroundedRule>,
    pub surrogates: Vec<Surrogate>,
    pub mode: SupervisionMode,
    pub class_names: Vec<String>,
    /// `class_atoms[p][k]`: atom for pattern `p`, class `k`.
    pub class_atoms: Vec<Vec<usize>>,
    /// Groundings touching each learnable atom, as (rule, grounding).
    incidence: Vec<Vec<(u32, u32)>>,
}

impl GroundNetwork {
    pub fn build(
        kb: &KnowledgeBase,
        patterns: &[String],
        evidence: &[EvidenceAtom],
        class_names: &[String],
        mode: SupervisionMode,
        options: &GroundingOptions,
    ) -> Result<Self, InferError> {
        let table = build_atom_table(kb, patterns, evidence)?;
        let head_of: HashMap<&str, usize> = table
            .head_names
            .iter()
            .enumerate()
            .map(|(i, h)| (h.as_str(), i))
            .collect();
        let mismatch = || InferError::HeadMismatch {
            heads: table.head_names.clone(),
            classes: class_names.to_vec(),
        };
        if head_of.len() != class_names.len() {
            return Err(mismatch());
        }
        let mut class_head = Vec::with_capacity(class_names.len());
        for c in class_names {
            class_head.push(*head_of.get(c.as_str()).ok_or_else(mismatch)?);
        }
        let class_atoms = table
            .pattern_atoms
            .iter()
            .map(|row| class_head.iter().map(|&h| row[h]).collect())
            .collect();
        let rules = ground_all(kb, &table, options)?;
        let surrogates = rules.iter().map(Surrogate::new).collect();
        let mut incidence = vec![Vec::new(); table.n_learnable];
        for (r, rule) in rules.iter().enumerate() {
            for (g, gr) in rule.groundings.iter().enumerate() {
                for s in &gr.slots {
                    if let crate::grounding::Slot::Atom(a) = *s {
                        let entry = (r as u32, g as u32);
                        if incidence[a].last() != Some(&entry) {
                            incidence[a].push(entry);
                        }
                    }
                }
            }
        }
        Ok(GroundNetwork {
            table,
            rules,
            surrogates,
            mode,
            class_names: class_names.to_vec(),
            class_atoms,
            incidence,
        })
    }

    pub fn n_patterns(&self) -> usize {
        self.class_atoms.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_atoms(&self) -> usize {
        self.table.len()
    }

    /// World with evidence and the labels of observed patterns filled in.
    pub fn observed_world(&self, labels: &Array2<f64>, observed: &[bool]) -> World {
        let mut w = self.table.empty_world();
        for (p, atoms) in self.class_atoms.iter().enumerate() {
            if observed[p] {
                for (k, &a) in atoms.iter().enumerate() {
                    w.values[a] = Some(labels[[p, k]] > 0.5);
                }
            }
        }
        w
    }

    /// Completes a partial world with the given labels for every pattern.
    pub fn complete_world(&self, labels: &Array2<f64>) -> World {
        self.observed_world(labels, &vec![true; self.n_patterns()])
    }

    /// Per-pattern class indicators read back from a world.
    pub fn labels_of(&self, world: &World) -> Array2<f64> {
        Array2::from_shape_fn((self.n_patterns(), self.n_classes()), |(p, k)| {
            if world.get(self.class_atoms[p][k]) == Some(true) {
                1.0
            } else {
                0.0
            }
        })
    }

    fn check(&self, f: &Array2<f64>, lambdas: &[f64]) -> Result<(), InferError> {
        let expected = (self.n_patterns(), self.n_classes());
        if f.dim() != expected {
            return Err(InferError::ScoreShape { expected, got: f.dim() });
        }
        if lambdas.len() != self.rules.len() {
            return Err(InferError::LambdaCount {
                expected: self.rules.len(),
                got: lambdas.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub steps: usize,
    pub lr: f64,
    /// Random restarts in addition to the start initialised from f.
    pub restarts: usize,
    pub seed: u64,
    /// Block and linked-pair local search on each decoded candidate.
    pub polish: bool,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            steps: 200,
            lr: 0.1,
            restarts: 6,
            seed: 0,
            polish: true,
        }
    }
}

/// Σ_x f·y + Σ_c λ_c Φˢ_c over a relaxed world.
pub fn map_objective(
    net: &GroundNetwork,
    f: &Array2<f64>,
    lambdas: &[f64],
    relaxed: &[f64],
    t: TNorm,
) -> Result<f64, InferError> {
    net.check(f, lambdas)?;
    let mut total = 0.0;
    for (p, atoms) in net.class_atoms.iter().enumerate() {
        for (k, &a) in atoms.iter().enumerate() {
            total += f[[p, k]] * relaxed[a];
        }
    }
    for ((rule, sur), &l) in net.rules.iter().zip(&net.surrogates).zip(lambdas) {
        if l != 0.0 {
            total += l * surrogate_potential(rule, sur, relaxed, t, None);
        }
    }
    Ok(total)
}

/// ∂objective/∂y over every atom, zero on `pinned` atoms.
pub fn map_gradient(
    net: &GroundNetwork,
    f: &Array2<f64>,
    lambdas: &[f64],
    relaxed: &[f64],
    pinned: &World,
    t: TNorm,
) -> Result<Vec<f64>, InferError> {
    net.check(f, lambdas)?;
    let (_, mut grad) = value_and_gradient(net, f, lambdas, relaxed, t);
    for (g, v) in grad.iter_mut().zip(&pinned.values) {
        if v.is_some() {
            *g = 0.0;
        }
    }
    Ok(grad)
}

fn value_and_gradient(
    net: &GroundNetwork,
    f: &Array2<f64>,
    lambdas: &[f64],
    relaxed: &[f64],
    t: TNorm,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; relaxed.len()];
    let mut total = 0.0;
    for (p, atoms) in net.class_atoms.iter().enumerate() {
        for (k, &a) in atoms.iter().enumerate() {
            total += f[[p, k]] * relaxed[a];
            grad[a] += f[[p, k]];
        }
    }
    for ((rule, sur), &l) in net.rules.iter().zip(&net.surrogates).zip(lambdas) {
        if l != 0.0 {
            total += l * surrogate_potential(rule, sur, relaxed, t, Some((&mut grad, l)));
        }
    }
    (total, grad)
}

/// Σ_x φ₀ + Σ_c λ_c Φ_c on a complete world; `None` when a one-label
/// pattern has more than one positive class.
pub fn discrete_objective(
    net: &GroundNetwork,
    f: &Array2<f64>,
    lambdas: &[f64],
    world: &World,
) -> Result<Option<f64>, InferError> {
    net.check(f, lambdas)?;
    let mut total = 0.0;
    for (p, atoms) in net.class_atoms.iter().enumerate() {
        let mut positives = 0;
        for (k, &a) in atoms.iter().enumerate() {
            let v = world.get(a).ok_or(GroundingError::Unobserved(a))?;
            if v {
                positives += 1;
                total += f[[p, k]];
            }
        }
        if net.mode == SupervisionMode::OneLabel && positives >= 2 {
            return Ok(None);
        }
    }
    for (rule, &l) in net.rules.iter().zip(lambdas) {
        if l != 0.0 {
            total += l * crate::grounding::potential_value(rule, world)?;
        }
    }
    Ok(Some(total))
}

/// Largest multi-label block enumerated jointly by the polish step.
const MAX_BLOCK_ATOMS: usize = 8;
/// Largest joint option count of a block pair in the polish step.
const MAX_PAIR_OPTIONS: usize = 256;

/// Free atoms of one pattern moved together by the polish step, as
/// (class, atom) pairs.
struct Block {
    pattern: usize,
    atoms: Vec<(usize, usize)>,
    one_hot: bool,
}

impl Block {
    fn n_options(&self) -> usize {
        if self.one_hot {
            self.atoms.len()
        } else {
            1 << self.atoms.len()
        }
    }
}

/// Free variables of the relaxation.
#[derive(Debug, Clone)]
enum Group {
    /// Softmax over the classes of a one-label pattern.
    Simplex { pattern: usize },
    /// Sigmoid of one independent atom.
    Single { pattern: usize, class: usize },
}

fn free_groups(net: &GroundNetwork, pinned: &World) -> Result<Vec<Group>, InferError> {
    let mut groups = Vec::new();
    for (p, atoms) in net.class_atoms.iter().enumerate() {
        let n_free = atoms.iter().filter(|&&a| pinned.get(a).is_none()).count();
        match net.mode {
            SupervisionMode::OneLabel => {
                if n_free == atoms.len() {
                    groups.push(Group::Simplex { pattern: p });
                } else if n_free > 0 {
                    return Err(InferError::PartialGroup(p));
                }
            }
            SupervisionMode::MultiLabel => {
                for (k, &a) in atoms.iter().enumerate() {
                    if pinned.get(a).is_none() {
                        groups.push(Group::Single { pattern: p, class: k });
                    }
                }
            }
        }
    }
    Ok(groups)
}

/// Result of MAP inference.
#[derive(Debug, Clone)]
pub struct MapResult {
    pub world: World,
    pub objective: f64,
    /// Relaxed values of the best continuous run.
    pub relaxed: Vec<f64>,
    /// Relaxed objective per ascent step of the start initialised from f.
    pub trace: Vec<f64>,
}

struct Ascent<'a> {
    net: &'a GroundNetwork,
    f: &'a Array2<f64>,
    lambdas: &'a [f64],
    groups: &'a [Group],
    base: Vec<f64>,
    t: TNorm,
}

impl Ascent<'_> {
    /// Offsets of each group's logits in the parameter vector.
    fn layout(&self) -> (Vec<usize>, usize) {
        let mut offsets = Vec::with_capacity(self.groups.len());
        let mut n = 0;
        for g in self.groups {
            offsets.push(n);
            n += match g {
                Group::Simplex { .. } => self.net.n_classes(),
                Group::Single { .. } => 1,
            };
        }
        (offsets, n)
    }

    fn relax(&self, z: &[f64], offsets: &[usize]) -> Vec<f64> {
        let mut y = self.base.clone();
        for (g, &o) in self.groups.iter().zip(offsets) {
            match *g {
                Group::Simplex { pattern } => {
                    let k = self.net.n_classes();
                    let p = prob_one_label(&z[o..o + k]);
                    for (c, v) in p.into_iter().enumerate() {
                        y[self.net.class_atoms[pattern][c]] = v;
                    }
                }
                Group::Single { pattern, class } => {
                    y[self.net.class_atoms[pattern][class]] = sigmoid(z[o]);
                }
            }
        }
        y
    }

    /// Chains the gradient over y through the parametrisation.
    fn logit_gradient(&self, y: &[f64], gy: &[f64], offsets: &[usize], out: &mut [f64]) {
        for (g, &o) in self.groups.iter().zip(offsets) {
            match *g {
                Group::Simplex { pattern } => {
                    let atoms = &self.net.class_atoms[pattern];
                    let mean: f64 = atoms.iter().map(|&a| y[a] * gy[a]).sum();
                    for (c, &a) in atoms.iter().enumerate() {
                        out[o + c] = y[a] * (gy[a] - mean);
                    }
                }
                Group::Single { pattern, class } => {
                    let a = self.net.class_atoms[pattern][class];
                    out[o] = gy[a] * y[a] * (1.0 - y[a]);
                }
            }
        }
    }

    fn decode(&self, y: &[f64]) -> World {
        let mut w = World {
            values: self.base.iter().map(|&v| Some(v > 0.5)).collect(),
        };
        for g in self.groups {
            match *g {
                Group::Simplex { pattern } => {
                    let atoms = &self.net.class_atoms[pattern];
                    let mut best = 0;
                    for c in 1..atoms.len() {
                        if y[atoms[c]] > y[atoms[best]] {
                            best = c;
                        }
                    }
                    for (c, &a) in atoms.iter().enumerate() {
                        w.values[a] = Some(c == best);
                    }
                }
                Group::Single { pattern, class } => {
                    let a = self.net.class_atoms[pattern][class];
                    w.values[a] = Some(y[a] >= 0.5);
                }
            }
        }
        w
    }

    fn objective(&self, w: &World) -> Result<f64, InferError> {
        discrete_objective(self.net, self.f, self.lambdas, w)?.ok_or(InferError::Excluded)
    }

    /// Runs Adam ascent from logits `z`; returns the final relaxed values
    /// and the relaxed objective per step.
    fn run(&self, mut z: Vec<f64>, offsets: &[usize], config: &MapConfig) -> Result<(Vec<f64>, Vec<f64>), InferError> {
        let mut adam = AdamState::new(
            z.len(),
            AdamConfig {
                lr: config.lr,
                ..Default::default()
            },
        );
        let mut trace = Vec::with_capacity(config.steps);
        let mut dz = vec![0.0; z.len()];
        for _ in 0..config.steps {
            let y = self.relax(&z, offsets);
            let (value, gy) = value_and_gradient(self.net, self.f, self.lambdas, &y, self.t);
            if !value.is_finite() {
                return Err(InferError::NonFinite);
            }
            trace.push(value);
            self.logit_gradient(&y, &gy, offsets, &mut dz);
            for d in &mut dz {
                *d = -*d;
            }
            adam.step(&mut z, &dz).map_err(|_| InferError::NonFinite)?;
        }
        Ok((self.relax(&z, offsets), trace))
    }

    /// Free atoms grouped by pattern. Multi-label patterns are split into
    /// blocks of at most `MAX_BLOCK_ATOMS` atoms.
    fn blocks(&self) -> Vec<Block> {
        let mut out: Vec<Block> = Vec::new();
        for g in self.groups {
            match *g {
                Group::Simplex { pattern } => out.push(Block {
                    pattern,
                    atoms: self.net.class_atoms[pattern].iter().copied().enumerate().collect(),
                    one_hot: true,
                }),
                Group::Single { pattern, class } => {
                    let a = (class, self.net.class_atoms[pattern][class]);
                    match out.last_mut() {
                        Some(b) if !b.one_hot && b.pattern == pattern && b.atoms.len() < MAX_BLOCK_ATOMS => {
                            b.atoms.push(a)
                        }
                        _ => out.push(Block {
                            pattern,
                            atoms: vec![a],
                            one_hot: false,
                        }),
                    }
                }
            }
        }
        out
    }

    /// Sets the blocks in `ids` to their best joint value given the rest
    /// of the world; returns whether the objective improved.
    fn improve(&self, blocks: &[Block], ids: &[usize], world: &mut World, objective: &mut f64) -> bool {
        let mut touched: Vec<(u32, u32)> = Vec::new();
        for &b in ids {
            for &(_, a) in &blocks[b].atoms {
                touched.extend_from_slice(&self.net.incidence[a]);
            }
        }
        touched.sort_unstable();
        touched.dedup();
        let score = |w: &World| -> f64 {
            let mut s = 0.0;
            for &(r, gi) in &touched {
                let rule = &self.net.rules[r as usize];
                let l = self.lambdas[r as usize];
                if l != 0.0 && rule.satisfied(&rule.groundings[gi as usize], w).unwrap_or(false) {
                    s += l;
                }
            }
            for &b in ids {
                for &(k, a) in &blocks[b].atoms {
                    if w.get(a) == Some(true) {
                        s += self.f[[blocks[b].pattern, k]];
                    }
                }
            }
            s
        };
        let set = |world: &mut World, mut option: usize| {
            for &b in ids {
                let block = &blocks[b];
                let n = block.n_options();
                let o = option % n;
                option /= n;
                for (k, &(_, a)) in block.atoms.iter().enumerate() {
                    world.values[a] = Some(if block.one_hot { k == o } else { o >> k & 1 == 1 });
                }
            }
        };
        let current: Vec<Option<bool>> = ids
            .iter()
            .flat_map(|&b| blocks[b].atoms.iter().map(|&(_, a)| world.get(a)))
            .collect();
        let base = score(world);
        let n_options: usize = ids.iter().map(|&b| blocks[b].n_options()).product();
        let mut best = (None, base);
        for option in 0..n_options {
            set(world, option);
            let v = score(world);
            if v > best.1 + 1e-12 {
                best = (Some(option), v);
            }
        }
        match best {
            (Some(option), v) => {
                set(world, option);
                *objective += v - base;
                true
            }
            (None, _) => {
                let atoms = ids.iter().flat_map(|&b| blocks[b].atoms.iter().map(|&(_, a)| a));
                for (a, v) in atoms.zip(current) {
                    world.values[a] = v;
                }
                false
            }
        }
    }

    /// Pairs of blocks that share a grounding and are small enough to
    /// enumerate jointly.
    fn linked_pairs(&self, blocks: &[Block]) -> Vec<[usize; 2]> {
        let mut block_of = HashMap::new();
        for (b, block) in blocks.iter().enumerate() {
            for &(_, a) in &block.atoms {
                block_of.insert(a, b);
            }
        }
        let mut pairs = Vec::new();
        for (b, block) in blocks.iter().enumerate() {
            for &(_, a) in &block.atoms {
                for &(r, g) in &self.net.incidence[a] {
                    for s in &self.net.rules[r as usize].groundings[g as usize].slots {
                        if let crate::grounding::Slot::Atom(o) = *s {
                            if let Some(&c) = block_of.get(&o) {
                                if c > b && block.n_options() * blocks[c].n_options() <= MAX_PAIR_OPTIONS {
                                    pairs.push([b, c]);
                                }
                            }
                        }
                    }
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }

    /// Local search from a decoded world: single-block moves until none
    /// helps, then moves of linked block pairs, repeated until neither
    /// helps.
    fn polish(&self, world: &mut World, objective: &mut f64) {
        let blocks = self.blocks();
        let pairs = self.linked_pairs(&blocks);
        for _round in 0..100 {
            for _sweep in 0..100 {
                let mut changed = false;
                for b in 0..blocks.len() {
                    changed |= self.improve(&blocks, &[b], world, objective);
                }
                if !changed {
                    break;
                }
            }
            let mut changed = false;
            for pair in &pairs {
                changed |= self.improve(&blocks, pair, world, objective);
            }
            if !changed {
                break;
            }
        }
    }
}

/// Most probable completion of the atoms left unobserved in `pinned`.
/// Candidates are the decoded starting point initialised from f and the
/// decoded end of every ascent run, each optionally polished.
pub fn map_inference(
    net: &GroundNetwork,
    f: &Array2<f64>,
    lambdas: &[f64],
    pinned: &World,
    t: TNorm,
    config: &MapConfig,
) -> Result<MapResult, InferError> {
    net.check(f, lambdas)?;
    let groups = free_groups(net, pinned)?;
    let base: Vec<f64> = pinned
        .values
        .iter()
        .map(|v| if *v == Some(true) { 1.0 } else { 0.0 })
        .collect();
    let ascent = Ascent {
        net,
        f,
        lambdas,
        groups: &groups,
        base,
        t,
    };
    let (offsets, n_params) = ascent.layout();

    let mut z0 = vec![0.0; n_params];
    for (g, &o) in groups.iter().zip(&offsets) {
        match *g {
            Group::Simplex { pattern } => {
                for c in 0..net.n_classes() {
                    z0[o + c] = f[[pattern, c]];
                }
            }
            Group::Single { pattern, class } => z0[o] = f[[pattern, class]],
        }
    }
    let y0 = ascent.relax(&z0, &offsets);
    let mut best_world = ascent.decode(&y0);
    let mut best_obj = ascent.objective(&best_world)?;
    let has_rules = lambdas.iter().any(|&l| l != 0.0);
    if has_rules && config.polish {
        ascent.polish(&mut best_world, &mut best_obj);
    }
    let mut best_relaxed = y0;
    let mut trace = Vec::new();

    if has_rules && n_params > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut starts = vec![z0];
        for _ in 0..config.restarts {
            starts.push((0..n_params).map(|_| StandardNormal.sample(&mut rng)).collect());
        }
        for (i, z) in starts.into_iter().enumerate() {
            let (y, tr) = ascent.run(z, &offsets, config)?;
            if i == 0 {
                trace = tr;
            }
            let mut w = ascent.decode(&y);
            let mut obj = ascent.objective(&w)?;
            if config.polish {
                ascent.polish(&mut w, &mut obj);
            }
            if obj > best_obj {
                best_obj = obj;
                best_world = w;
                best_relaxed = y;
            }
        }
    }
    if !best_obj.is_finite() {
        return Err(InferError::NonFinite);
    }
    Ok(MapResult {
        world: best_world,
        objective: best_obj,
        relaxed: best_relaxed,
        trace,
    })
}
