//! Ground-atom layout and formula grounding.
//!
//! Every grounding of a formula becomes one clique over learnable ground
//! atoms. Evidence atoms and builtins are folded into the clique's
//! expression; with pruning enabled, groundings whose folded expression is
//! constant are not materialised and only counted.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::kb::{Atom, Builtin, Expr, Formula, KnowledgeBase, PredicateKind, Quantifier, Term};

pub const DEFAULT_GROUNDING_CAP: usize = 10_000_000;

/// Truth tables are only enumerated for residual cliques up to this size.
pub const MAX_TABLE_ATOMS: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GroundingError {
    #[error("learnable predicate '{0}' must take the pattern domain as its first argument")]
    NoPatternArgument(String),
    #[error("learnable predicates disagree on the pattern domain ('{0}' vs '{1}')")]
    PatternDomainConflict(String, String),
    #[error("domain '{0}' has no constants")]
    MissingConstants(String),
    #[error("evidence refers to unknown predicate '{0}'")]
    UnknownPredicate(String),
    #[error("evidence for '{0}' must target an evidence predicate")]
    NotEvidence(String),
    #[error("evidence atom {pred}({args}) has the wrong number of arguments")]
    EvidenceArity { pred: String, args: String },
    #[error("constant '{constant}' in evidence atom {pred}(..) is not in domain '{domain}'")]
    UnknownConstant {
        pred: String,
        constant: String,
        domain: String,
    },
    #[error("formula {formula} would enumerate {count} groundings, above the cap of {cap}")]
    CapExceeded { formula: usize, count: u128, cap: usize },
    #[error("unobserved atom {0} in a potential evaluation")]
    Unobserved(usize),
    #[error("no learnable predicate in the knowledge base")]
    NoLearnable,
}

/// A known truth value for an evidence predicate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvidenceAtom {
    pub predicate: String,
    pub args: Vec<String>,
    pub value: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundAtom {
    /// Index into `KnowledgeBase::predicates`.
    pub predicate: usize,
    /// Constant indices into the argument domains.
    pub args: Vec<u32>,
}

/// Bijection between ground atoms and positions in the world vector.
///
/// Learnable atoms occupy `0..n_learnable` in predicate order, then
/// lexicographic constant order. Evidence atoms follow; evidence atoms not
/// listed by the dataset are false and have no index.
#[derive(Debug, Clone)]
pub struct GroundAtomTable {
    pub predicate_names: Vec<String>,
    pub predicate_kinds: Vec<PredicateKind>,
    pub predicate_domains: Vec<Vec<usize>>,
    pub domain_names: Vec<String>,
    pub domain_constants: Vec<Vec<String>>,
    pub atoms: Vec<GroundAtom>,
    pub n_learnable: usize,
    /// Truth values of evidence atoms, indexed by `atom - n_learnable`.
    pub evidence_values: Vec<bool>,
    /// Network output names, one per head.
    pub head_names: Vec<String>,
    /// `pattern_atoms[p][h]`: atom index of head `h` for pattern `p`.
    pub pattern_atoms: Vec<Vec<usize>>,
    /// Inverse of `pattern_atoms` over learnable atoms.
    pub atom_head: Vec<(usize, usize)>,
    pub pattern_domain: usize,
    index: HashMap<(usize, Vec<u32>), usize>,
    constant_index: Vec<HashMap<String, u32>>,
    /// True evidence atoms per predicate (for guard enumeration).
    true_evidence: Vec<Vec<usize>>,
}

impl GroundAtomTable {
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn n_patterns(&self) -> usize {
        self.pattern_atoms.len()
    }

    pub fn n_heads(&self) -> usize {
        self.head_names.len()
    }

    pub fn is_learnable(&self, atom: usize) -> bool {
        atom < self.n_learnable
    }

    pub fn lookup(&self, predicate: &str, args: &[&str]) -> Option<usize> {
        let p = self.predicate_names.iter().position(|n| n == predicate)?;
        let doms = &self.predicate_domains[p];
        if doms.len() != args.len() {
            return None;
        }
        let key: Option<Vec<u32>> = args
            .iter()
            .zip(doms)
            .map(|(a, &d)| self.constant_index[d].get(*a).copied())
            .collect();
        self.index.get(&(p, key?)).copied()
    }

    pub fn atom_name(&self, atom: usize) -> String {
        let a = &self.atoms[atom];
        let args: Vec<&str> = a
            .args
            .iter()
            .zip(&self.predicate_domains[a.predicate])
            .map(|(&c, &d)| self.domain_constants[d][c as usize].as_str())
            .collect();
        format!("{}({})", self.predicate_names[a.predicate], args.join(","))
    }

    /// Value of an evidence atom given by predicate and constant indices;
    /// unlisted atoms are false.
    fn evidence_value(&self, predicate: usize, args: &[u32]) -> bool {
        self.index
            .get(&(predicate, args.to_vec()))
            .map(|&i| self.evidence_values[i - self.n_learnable])
            .unwrap_or(false)
    }

    /// World with evidence filled in and every learnable atom unobserved.
    pub fn empty_world(&self) -> World {
        let mut values = vec![None; self.len()];
        for (k, &v) in self.evidence_values.iter().enumerate() {
            values[self.n_learnable + k] = Some(v);
        }
        World { values }
    }
}

/// Builds the atom table for a world whose pattern domain is populated by
/// `patterns` and whose evidence predicates are given by `evidence`.
pub fn build_atom_table(
    kb: &KnowledgeBase,
    patterns: &[String],
    evidence: &[EvidenceAtom],
) -> Result<GroundAtomTable, GroundingError> {
    let domain_names: Vec<String> = kb.domains.iter().map(|d| d.name.clone()).collect();
    let dom_idx = |name: &str| domain_names.iter().position(|d| d == name);

    let mut pattern_domain: Option<usize> = None;
    for p in kb.learnable() {
        let first = p
            .arg_domains
            .first()
            .and_then(|d| dom_idx(d))
            .ok_or_else(|| GroundingError::NoPatternArgument(p.name.clone()))?;
        match pattern_domain {
            Some(d) if d != first => {
                return Err(GroundingError::PatternDomainConflict(
                    domain_names[d].clone(),
                    domain_names[first].clone(),
                ))
            }
            _ => pattern_domain = Some(first),
        }
    }
    let pattern_domain = pattern_domain.ok_or(GroundingError::NoLearnable)?;

    let mut domain_constants = Vec::with_capacity(kb.domains.len());
    for (i, d) in kb.domains.iter().enumerate() {
        if i == pattern_domain {
            domain_constants.push(patterns.to_vec());
        } else if d.external {
            domain_constants.push(Vec::new());
        } else {
            domain_constants.push(d.constants.clone());
        }
    }
    let constant_index: Vec<HashMap<String, u32>> = domain_constants
        .iter()
        .map(|cs| cs.iter().enumerate().map(|(i, c)| (c.clone(), i as u32)).collect())
        .collect();

    let predicate_names: Vec<String> = kb.predicates.iter().map(|p| p.name.clone()).collect();
    let predicate_kinds: Vec<PredicateKind> = kb.predicates.iter().map(|p| p.kind).collect();
    let mut predicate_domains = Vec::new();
    for p in &kb.predicates {
        let doms: Vec<usize> = p
            .arg_domains
            .iter()
            .map(|d| dom_idx(d).expect("validated knowledge base"))
            .collect();
        predicate_domains.push(doms);
    }

    let mut atoms = Vec::new();
    let mut index = HashMap::new();
    let mut head_names = Vec::new();
    let n_patterns = domain_constants[pattern_domain].len();
    let mut pattern_atoms = vec![Vec::new(); n_patterns];
    let mut atom_head = Vec::new();
    for (pi, p) in kb.predicates.iter().enumerate() {
        if p.kind != PredicateKind::Learnable {
            continue;
        }
        let rest = &predicate_domains[pi][1..];
        for d in rest {
            if domain_constants[*d].is_empty() {
                return Err(GroundingError::MissingConstants(domain_names[*d].clone()));
            }
        }
        let tails = cartesian(rest.iter().map(|&d| domain_constants[d].len()).collect());
        let first_head = head_names.len();
        for tail in &tails {
            if tail.is_empty() {
                head_names.push(p.name.clone());
            } else {
                let names: Vec<&str> = tail
                    .iter()
                    .zip(rest)
                    .map(|(&c, &d)| domain_constants[d][c as usize].as_str())
                    .collect();
                if p.arity() == 2 && kb.learnable().count() == 1 {
                    head_names.push(names[0].to_string());
                } else {
                    head_names.push(format!("{}({})", p.name, names.join(",")));
                }
            }
        }
        for (pat, row) in pattern_atoms.iter_mut().enumerate() {
            for (k, tail) in tails.iter().enumerate() {
                let mut args = Vec::with_capacity(tail.len() + 1);
                args.push(pat as u32);
                args.extend_from_slice(tail);
                let id = atoms.len();
                index.insert((pi, args.clone()), id);
                atoms.push(GroundAtom { predicate: pi, args });
                row.push(id);
                atom_head.push((pat, first_head + k));
            }
        }
    }
    // pattern_atoms must be ordered by head for every pattern
    for row in &mut pattern_atoms {
        row.sort_by_key(|&a| atom_head[a].1);
    }
    let n_learnable = atoms.len();

    let mut listed: Vec<(usize, Vec<u32>, bool)> = Vec::with_capacity(evidence.len());
    for e in evidence {
        let pi = predicate_names
            .iter()
            .position(|n| *n == e.predicate)
            .ok_or_else(|| GroundingError::UnknownPredicate(e.predicate.clone()))?;
        if predicate_kinds[pi] != PredicateKind::Evidence {
            return Err(GroundingError::NotEvidence(e.predicate.clone()));
        }
        if predicate_domains[pi].len() != e.args.len() {
            return Err(GroundingError::EvidenceArity {
                pred: e.predicate.clone(),
                args: e.args.join(","),
            });
        }
        let mut args = Vec::with_capacity(e.args.len());
        for (a, &d) in e.args.iter().zip(&predicate_domains[pi]) {
            let c = constant_index[d]
                .get(a)
                .ok_or_else(|| GroundingError::UnknownConstant {
                    pred: e.predicate.clone(),
                    constant: a.clone(),
                    domain: domain_names[d].clone(),
                })?;
            args.push(*c);
        }
        listed.push((pi, args, e.value));
    }
    listed.sort();
    listed.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    let mut evidence_values = Vec::with_capacity(listed.len());
    let mut true_evidence = vec![Vec::new(); predicate_names.len()];
    for (pi, args, value) in listed {
        let id = atoms.len();
        index.insert((pi, args.clone()), id);
        atoms.push(GroundAtom { predicate: pi, args });
        evidence_values.push(value);
        if value {
            true_evidence[pi].push(id);
        }
    }

    Ok(GroundAtomTable {
        predicate_names,
        predicate_kinds,
        predicate_domains,
        domain_names,
        domain_constants,
        atoms,
        n_learnable,
        evidence_values,
        head_names,
        pattern_atoms,
        atom_head,
        pattern_domain,
        index,
        constant_index,
        true_evidence,
    })
}

/// All tuples over the given domain sizes in lexicographic order.
fn cartesian(sizes: Vec<usize>) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    for n in sizes {
        let mut next = Vec::with_capacity(out.len() * n);
        for prefix in &out {
            for c in 0..n as u32 {
                let mut t = prefix.clone();
                t.push(c);
                next.push(t);
            }
        }
        out = next;
    }
    out
}

/// Assignment over the ground atoms: `None` is unobserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct World {
    pub values: Vec<Option<bool>>,
}

impl World {
    pub fn get(&self, atom: usize) -> Option<bool> {
        self.values[atom]
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }
}

// ---------------------------------------------------------------------------
// Compiled clique expressions

/// Boolean expression over the slots of one grounding, with evidence and
/// builtins already folded.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum GroundExpr {
    Const(bool),
    Var(u8),
    Not(Box<GroundExpr>),
    And(Box<GroundExpr>, Box<GroundExpr>),
    Or(Box<GroundExpr>, Box<GroundExpr>),
    Implies(Box<GroundExpr>, Box<GroundExpr>),
}

impl GroundExpr {
    pub fn eval(&self, values: &[bool]) -> bool {
        match self {
            GroundExpr::Const(b) => *b,
            GroundExpr::Var(i) => values[*i as usize],
            GroundExpr::Not(e) => !e.eval(values),
            GroundExpr::And(a, b) => a.eval(values) && b.eval(values),
            GroundExpr::Or(a, b) => a.eval(values) || b.eval(values),
            GroundExpr::Implies(a, b) => !a.eval(values) || b.eval(values),
        }
    }

    /// Same as `eval` with slot values packed into the low bits of `row`.
    pub fn eval_bits(&self, row: u32) -> bool {
        match self {
            GroundExpr::Const(b) => *b,
            GroundExpr::Var(i) => row >> i & 1 == 1,
            GroundExpr::Not(e) => !e.eval_bits(row),
            GroundExpr::And(a, b) => a.eval_bits(row) && b.eval_bits(row),
            GroundExpr::Or(a, b) => a.eval_bits(row) || b.eval_bits(row),
            GroundExpr::Implies(a, b) => !a.eval_bits(row) || b.eval_bits(row),
        }
    }

    fn not(e: GroundExpr) -> GroundExpr {
        match e {
            GroundExpr::Const(b) => GroundExpr::Const(!b),
            e => GroundExpr::Not(Box::new(e)),
        }
    }

    fn and(a: GroundExpr, b: GroundExpr) -> GroundExpr {
        use GroundExpr::Const;
        match (a, b) {
            (Const(false), _) | (_, Const(false)) => Const(false),
            (Const(true), e) | (e, Const(true)) => e,
            (a, b) => GroundExpr::And(Box::new(a), Box::new(b)),
        }
    }

    fn or(a: GroundExpr, b: GroundExpr) -> GroundExpr {
        use GroundExpr::Const;
        match (a, b) {
            (Const(true), _) | (_, Const(true)) => Const(true),
            (Const(false), e) | (e, Const(false)) => e,
            (a, b) => GroundExpr::Or(Box::new(a), Box::new(b)),
        }
    }

    fn implies(a: GroundExpr, b: GroundExpr) -> GroundExpr {
        use GroundExpr::Const;
        match (a, b) {
            (Const(false), _) | (_, Const(true)) => Const(true),
            (Const(true), e) => e,
            (e, Const(false)) => GroundExpr::not(e),
            (a, b) => GroundExpr::Implies(Box::new(a), Box::new(b)),
        }
    }

    /// Builds a ground expression from a formula body where every atom is
    /// mapped to a slot; used for template-level truth tables.
    pub fn from_template(body: &Expr, slot_of: &mut dyn FnMut(&Atom) -> GroundExpr) -> GroundExpr {
        match body {
            Expr::Atom(a) => slot_of(a),
            Expr::Not(e) => GroundExpr::not(Self::from_template(e, slot_of)),
            Expr::And(a, b) => GroundExpr::and(Self::from_template(a, slot_of), Self::from_template(b, slot_of)),
            Expr::Or(a, b) => GroundExpr::or(Self::from_template(a, slot_of), Self::from_template(b, slot_of)),
            Expr::Implies(a, b) => {
                GroundExpr::implies(Self::from_template(a, slot_of), Self::from_template(b, slot_of))
            }
        }
    }
}

/// Satisfying and falsifying row counts of `expr` over `n_slots` variables.
pub fn expr_truth_table(expr: &GroundExpr, n_slots: usize) -> (u64, u64) {
    let rows = 1u64 << n_slots;
    let plus = (0..rows).filter(|&r| expr.eval_bits(r as u32)).count() as u64;
    (plus, rows - plus)
}

/// Truth-table counts (n⁺, n⁻) of a formula body, enumerating every
/// distinct non-builtin atom. `fold` may pin atoms to a constant (e.g. an
/// evidence guard set to true); pinned atoms do not count as variables.
/// Builtin atoms that are not pinned are treated as variables.
pub fn truth_table_counts(formula: &Formula, fold: &dyn Fn(&Atom) -> Option<bool>) -> (u64, u64) {
    let mut keys: Vec<(String, Vec<Term>)> = Vec::new();
    let expr = GroundExpr::from_template(&formula.body, &mut |a: &Atom| {
        if let Some(b) = fold(a) {
            return GroundExpr::Const(b);
        }
        let key = (a.predicate.clone(), a.args.clone());
        let slot = match keys.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                keys.push(key);
                keys.len() - 1
            }
        };
        GroundExpr::Var(slot as u8)
    });
    expr_truth_table(&expr, keys.len())
}

/// One slot of a grounded clique.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    /// Learnable ground atom.
    Atom(usize),
    /// Evidence atom kept as a truth-table variable (only without pruning).
    Fixed(bool),
}

/// Distinct residual expression shared by many groundings.
#[derive(Debug, Clone)]
pub struct Shape {
    pub expr: GroundExpr,
    pub n_slots: usize,
    /// (n⁺, n⁻) of the residual, when small enough to enumerate.
    pub counts: Option<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundedFormula {
    pub formula: usize,
    pub shape: u32,
    pub slots: Vec<Slot>,
}

#[derive(Debug, Clone)]
pub struct GroundingOptions {
    pub prune: bool,
    pub cap: usize,
}

impl Default for GroundingOptions {
    fn default() -> Self {
        GroundingOptions {
            prune: true,
            cap: DEFAULT_GROUNDING_CAP,
        }
    }
}

/// All groundings of one formula.
#[derive(Debug, Clone)]
pub struct GroundedRule {
    pub formula: usize,
    pub shapes: Vec<Shape>,
    pub groundings: Vec<GroundedFormula>,
    /// Groundings not materialised because they are always satisfied.
    pub constant_true: u128,
    /// Groundings not materialised because they are never satisfied.
    pub constant_false: u128,
    /// Number of prefix assignments over all domains.
    pub total: u128,
}

impl GroundedRule {
    pub fn shape(&self, g: &GroundedFormula) -> &Shape {
        &self.shapes[g.shape as usize]
    }

    pub fn n_groundings(&self) -> usize {
        self.groundings.len()
    }

    /// φ of one grounding on a complete assignment.
    pub fn satisfied(&self, g: &GroundedFormula, world: &World) -> Result<bool, GroundingError> {
        let mut vals = [false; 32];
        let mut big = Vec::new();
        let vals: &mut [bool] = if g.slots.len() <= 32 {
            &mut vals[..g.slots.len()]
        } else {
            big.resize(g.slots.len(), false);
            &mut big
        };
        for (v, s) in vals.iter_mut().zip(&g.slots) {
            *v = match *s {
                Slot::Atom(a) => world.get(a).ok_or(GroundingError::Unobserved(a))?,
                Slot::Fixed(b) => b,
            };
        }
        Ok(self.shape(g).expr.eval(vals))
    }
}

/// Φ_c(y): number of satisfied materialised groundings.
pub fn potential_value(rule: &GroundedRule, world: &World) -> Result<f64, GroundingError> {
    let mut total = 0.0;
    for g in &rule.groundings {
        if rule.satisfied(g, world)? {
            total += 1.0;
        }
    }
    Ok(total)
}

/// Per-formula statistics for the piecewise likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintStats {
    pub formula: usize,
    /// n⁺ of the dominant residual shape.
    pub n_plus: u64,
    /// n⁻ of the dominant residual shape.
    pub n_minus: u64,
    pub n_groundings: usize,
    pub lambda: f64,
    /// (n⁺, n⁻, number of groundings) for every distinct residual shape.
    pub classes: Vec<(u64, u64, usize)>,
}

impl ConstraintStats {
    /// Stats with a single residual class, as for a formula whose groundings
    /// all share one truth table.
    pub fn uniform(formula: usize, n_plus: u64, n_minus: u64, n_groundings: usize) -> Self {
        ConstraintStats {
            formula,
            n_plus,
            n_minus,
            n_groundings,
            lambda: 0.0,
            classes: vec![(n_plus, n_minus, n_groundings)],
        }
    }

    pub fn from_rule(rule: &GroundedRule) -> Self {
        let mut per_shape = vec![0usize; rule.shapes.len()];
        for g in &rule.groundings {
            per_shape[g.shape as usize] += 1;
        }
        let mut classes: Vec<(u64, u64, usize)> = Vec::new();
        for (s, &count) in rule.shapes.iter().zip(&per_shape) {
            if count == 0 {
                continue;
            }
            let Some((p, m)) = s.counts else { continue };
            match classes.iter_mut().find(|c| c.0 == p && c.1 == m) {
                Some(c) => c.2 += count,
                None => classes.push((p, m, count)),
            }
        }
        let (n_plus, n_minus) = classes.iter().max_by_key(|c| c.2).map(|c| (c.0, c.1)).unwrap_or((1, 1));
        ConstraintStats {
            formula: rule.formula,
            n_plus,
            n_minus,
            n_groundings: rule.groundings.len(),
            lambda: 0.0,
            classes,
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.classes.len() <= 1
    }

    /// Every grounding has a truth table small enough to enumerate.
    pub fn fully_tabulated(&self) -> bool {
        self.classes.iter().map(|c| c.2).sum::<usize>() == self.n_groundings
    }
}

// ---------------------------------------------------------------------------
// Grounding

/// Identity of a slot while a grounding is being compiled.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum SlotKey {
    Atom(usize),
    Evidence(usize, Vec<u32>),
}

struct Compiler<'a> {
    table: &'a GroundAtomTable,
    pred_idx: &'a HashMap<&'a str, usize>,
    prune: bool,
    keys: Vec<SlotKey>,
    slots: Vec<Slot>,
}

impl Compiler<'_> {
    fn slot(&mut self, key: SlotKey, slot: Slot) -> GroundExpr {
        let i = match self.keys.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                self.keys.push(key);
                self.slots.push(slot);
                self.keys.len() - 1
            }
        };
        GroundExpr::Var(i as u8)
    }

    fn constant_of(&self, term: &Term, binding: &HashMap<&str, u32>, domain: usize) -> u32 {
        match term {
            Term::Var(v) => binding[v.as_str()],
            Term::Const(c) => self.table.constant_index[domain].get(c).copied().unwrap_or(u32::MAX),
        }
    }

    fn atom(&mut self, atom: &Atom, binding: &HashMap<&str, u32>, var_domain: &HashMap<&str, usize>) -> GroundExpr {
        if let Some(b) = atom.builtin() {
            let names: Vec<&str> = atom
                .args
                .iter()
                .map(|t| match t {
                    Term::Var(v) => {
                        let d = var_domain[v.as_str()];
                        self.table.domain_constants[d][binding[v.as_str()] as usize].as_str()
                    }
                    Term::Const(c) => c.as_str(),
                })
                .collect();
            return GroundExpr::Const(b.eval(names[0], names[1]));
        }
        let pi = self.pred_idx[atom.predicate.as_str()];
        let doms = &self.table.predicate_domains[pi];
        let args: Vec<u32> = atom
            .args
            .iter()
            .zip(doms)
            .map(|(t, &d)| self.constant_of(t, binding, d))
            .collect();
        if args.contains(&u32::MAX) {
            // constant absent from the world: the atom is false
            return GroundExpr::Const(false);
        }
        match self.table.predicate_kinds[pi] {
            PredicateKind::Evidence => {
                let v = self.table.evidence_value(pi, &args);
                if self.prune {
                    GroundExpr::Const(v)
                } else {
                    self.slot(SlotKey::Evidence(pi, args), Slot::Fixed(v))
                }
            }
            _ => {
                let id = self.table.index[&(pi, args)];
                self.slot(SlotKey::Atom(id), Slot::Atom(id))
            }
        }
    }

    fn expr(&mut self, e: &Expr, binding: &HashMap<&str, u32>, var_domain: &HashMap<&str, usize>) -> GroundExpr {
        match e {
            Expr::Atom(a) => self.atom(a, binding, var_domain),
            Expr::Not(x) => GroundExpr::not(self.expr(x, binding, var_domain)),
            Expr::And(a, b) => {
                let x = self.expr(a, binding, var_domain);
                let y = self.expr(b, binding, var_domain);
                GroundExpr::and(x, y)
            }
            Expr::Or(a, b) => {
                let x = self.expr(a, binding, var_domain);
                let y = self.expr(b, binding, var_domain);
                GroundExpr::or(x, y)
            }
            Expr::Implies(a, b) => {
                let x = self.expr(a, binding, var_domain);
                let y = self.expr(b, binding, var_domain);
                GroundExpr::implies(x, y)
            }
        }
    }

    /// Expands the inner (non-grounding) quantifiers into a conjunction or
    /// disjunction over their domains.
    fn quantified<'f>(
        &mut self,
        formula: &'f Formula,
        inner: &'f [crate::kb::QuantifiedVar],
        binding: &mut HashMap<&'f str, u32>,
        var_domain: &HashMap<&str, usize>,
    ) -> GroundExpr {
        let Some((q, rest)) = inner.split_first() else {
            return self.expr(&formula.body, binding, var_domain);
        };
        let d = var_domain[q.variable.as_str()];
        let n = self.table.domain_constants[d].len() as u32;
        let mut acc = GroundExpr::Const(q.quantifier == Quantifier::Forall);
        for c in 0..n {
            binding.insert(q.variable.as_str(), c);
            let e = self.quantified(formula, rest, binding, var_domain);
            acc = match q.quantifier {
                Quantifier::Forall => GroundExpr::and(acc, e),
                Quantifier::Exists => GroundExpr::or(acc, e),
            };
        }
        binding.remove(q.variable.as_str());
        acc
    }
}

/// Template check: is the formula true whenever `guard` is false, whatever
/// the other atoms (builtins included) are?
fn is_guard(formula: &Formula, guard: &Atom) -> bool {
    let mut keys: Vec<(String, Vec<Term>)> = Vec::new();
    let gkey = (guard.predicate.clone(), guard.args.clone());
    let expr = GroundExpr::from_template(&formula.body, &mut |a: &Atom| {
        let key = (a.predicate.clone(), a.args.clone());
        if key == gkey {
            return GroundExpr::Const(false);
        }
        let slot = match keys.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                keys.push(key);
                keys.len() - 1
            }
        };
        GroundExpr::Var(slot as u8)
    });
    keys.len() <= MAX_TABLE_ATOMS && expr_truth_table(&expr, keys.len()).1 == 0
}

/// Grounds one formula over the table.
pub fn ground_formula(
    kb: &KnowledgeBase,
    formula: &Formula,
    table: &GroundAtomTable,
    options: &GroundingOptions,
) -> Result<GroundedRule, GroundingError> {
    let pred_idx: HashMap<&str, usize> = table
        .predicate_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let var_domain: HashMap<&str, usize> = formula
        .prefix
        .iter()
        .map(|q| {
            let d = table
                .domain_names
                .iter()
                .position(|n| *n == q.domain)
                .expect("validated knowledge base");
            (q.variable.as_str(), d)
        })
        .collect();
    for q in &formula.prefix {
        let d = var_domain[q.variable.as_str()];
        if table.domain_constants[d].is_empty() && kb.domain(&q.domain).is_some_and(|d| d.external) {
            return Err(GroundingError::MissingConstants(q.domain.clone()));
        }
    }

    // Leading universal variables index the groundings; the rest expand
    // inside each grounding.
    let n_outer = formula
        .prefix
        .iter()
        .take_while(|q| q.quantifier == Quantifier::Forall)
        .count();
    let outer = &formula.prefix[..n_outer];
    let inner = &formula.prefix[n_outer..];
    let sizes: Vec<u128> = outer
        .iter()
        .map(|q| table.domain_constants[var_domain[q.variable.as_str()]].len() as u128)
        .collect();
    let total: u128 = sizes.iter().product();

    // Pick the evidence guard with the fewest true atoms.
    let guard: Option<&Atom> = if options.prune {
        formula
            .body
            .distinct_atoms()
            .into_iter()
            .filter(|a| {
                pred_idx
                    .get(a.predicate.as_str())
                    .is_some_and(|&p| table.predicate_kinds[p] == PredicateKind::Evidence)
                    && a.args.iter().all(|t| match t {
                        Term::Var(v) => outer.iter().any(|q| q.variable == *v),
                        Term::Const(_) => true,
                    })
                    && is_guard(formula, a)
            })
            .min_by_key(|a| table.true_evidence[pred_idx[a.predicate.as_str()]].len())
    } else {
        None
    };

    // Partial bindings to extend over the remaining outer variables.
    let mut seeds: Vec<HashMap<&str, u32>> = Vec::new();
    match guard {
        Some(g) => {
            let pi = pred_idx[g.predicate.as_str()];
            'atoms: for &id in &table.true_evidence[pi] {
                let args = &table.atoms[id].args;
                let mut b: HashMap<&str, u32> = HashMap::new();
                for (t, (&c, &d)) in g.args.iter().zip(args.iter().zip(&table.predicate_domains[pi])) {
                    match t {
                        Term::Const(name) => {
                            if table.constant_index[d].get(name) != Some(&c) {
                                continue 'atoms;
                            }
                        }
                        Term::Var(v) => match b.get(v.as_str()) {
                            Some(&prev) if prev != c => continue 'atoms,
                            _ => {
                                b.insert(v.as_str(), c);
                            }
                        },
                    }
                }
                seeds.push(b);
            }
        }
        None => seeds.push(HashMap::new()),
    }
    let mut enumerated: u128 = 0;
    for s in &seeds {
        let free: u128 = outer
            .iter()
            .zip(&sizes)
            .filter(|(q, _)| !s.contains_key(q.variable.as_str()))
            .map(|(_, &n)| n)
            .product();
        enumerated += free;
    }
    if enumerated > options.cap as u128 {
        return Err(GroundingError::CapExceeded {
            formula: formula.id,
            count: enumerated,
            cap: options.cap,
        });
    }

    let mut rule = GroundedRule {
        formula: formula.id,
        shapes: Vec::new(),
        groundings: Vec::new(),
        constant_true: 0,
        constant_false: 0,
        total,
    };
    if guard.is_some() {
        rule.constant_true = total - enumerated;
    }
    let mut shape_ids: HashMap<GroundExpr, u32> = HashMap::new();
    let mut compiler = Compiler {
        table,
        pred_idx: &pred_idx,
        prune: options.prune,
        keys: Vec::new(),
        slots: Vec::new(),
    };

    for seed in seeds {
        let free: Vec<&crate::kb::QuantifiedVar> = outer
            .iter()
            .filter(|q| !seed.contains_key(q.variable.as_str()))
            .collect();
        let free_sizes: Vec<usize> = free
            .iter()
            .map(|q| table.domain_constants[var_domain[q.variable.as_str()]].len())
            .collect();
        let mut counter = vec![0u32; free.len()];
        if free_sizes.contains(&0) {
            continue;
        }
        let mut binding = seed.clone();
        loop {
            for (q, &c) in free.iter().zip(&counter) {
                binding.insert(q.variable.as_str(), c);
            }
            compiler.keys.clear();
            compiler.slots.clear();
            let expr = compiler.quantified(formula, inner, &mut binding, &var_domain);
            let n_slots = compiler.slots.len();
            let next_id = shape_ids.len() as u32;
            let id = *shape_ids.entry(expr.clone()).or_insert_with(|| {
                let counts = (n_slots <= MAX_TABLE_ATOMS).then(|| expr_truth_table(&expr, n_slots));
                rule.shapes.push(Shape { expr, n_slots, counts });
                next_id
            });
            let shape = &rule.shapes[id as usize];
            let constant = match shape.counts {
                Some((_, 0)) => Some(true),
                Some((0, _)) => Some(false),
                _ => None,
            };
            match constant {
                Some(true) if options.prune => rule.constant_true += 1,
                Some(false) if options.prune => rule.constant_false += 1,
                _ => rule.groundings.push(GroundedFormula {
                    formula: formula.id,
                    shape: id,
                    slots: compiler.slots.clone(),
                }),
            }
            // odometer over the free outer variables
            let mut k = free.len();
            loop {
                if k == 0 {
                    break;
                }
                k -= 1;
                counter[k] += 1;
                if (counter[k] as usize) < free_sizes[k] {
                    break;
                }
                counter[k] = 0;
                if k == 0 {
                    k = usize::MAX;
                    break;
                }
            }
            if k == usize::MAX || free.is_empty() {
                break;
            }
        }
    }
    Ok(rule)
}

/// Grounds every formula of the KB in order.
pub fn ground_all(
    kb: &KnowledgeBase,
    table: &GroundAtomTable,
    options: &GroundingOptions,
) -> Result<Vec<GroundedRule>, GroundingError> {
    kb.formulas
        .iter()
        .map(|f| ground_formula(kb, f, table, options))
        .collect()
}

/// Line-oriented dump of the ground network.
pub fn dump_network(table: &GroundAtomTable, rules: &[GroundedRule]) -> String {
    let mut out = String::new();
    for i in 0..table.len() {
        let _ = writeln!(out, "atom {i} {}", table.atom_name(i));
    }
    for r in rules {
        for g in &r.groundings {
            let _ = write!(out, "clique {}", r.formula);
            for s in &g.slots {
                if let Slot::Atom(a) = s {
                    let _ = write!(out, " {a}");
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Truth value of `builtin` on two constants, exposed for callers that
/// build their own evaluators.
pub fn eval_builtin(builtin: Builtin, a: &str, b: &str) -> bool {
    builtin.eval(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::parse_kb;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn unary_layout() {
        let kb = parse_kb("domain d\npred A(d)\npred B(d)\npred C(d)").unwrap();
        let t = build_atom_table(&kb, &names(2), &[]).unwrap();
        assert_eq!(t.n_learnable, 6);
        assert_eq!(t.len(), 6);
        assert_eq!(t.lookup("A", &["p0"]), Some(0));
        assert_eq!(t.lookup("A", &["p1"]), Some(1));
        assert_eq!(t.lookup("C", &["p1"]), Some(5));
        assert_eq!(t.pattern_atoms[1], vec![1, 3, 5]);
        assert_eq!(t.head_names, vec!["A", "B", "C"]);
    }

    #[test]
    fn binary_learnable_heads_use_class_constants() {
        let kb = parse_kb("domain img\ndomain cls = {0..2}\npred digit(img, cls)").unwrap();
        let t = build_atom_table(&kb, &names(2), &[]).unwrap();
        assert_eq!(t.head_names, vec!["0", "1", "2"]);
        assert_eq!(t.pattern_atoms[1], vec![3, 4, 5]);
        assert_eq!(t.atom_name(4), "digit(p1,1)");
    }

    #[test]
    fn unknown_evidence_constant() {
        let kb = parse_kb("domain d\npred A(d)\npred Cite(d, d) evidence").unwrap();
        let ev = vec![EvidenceAtom {
            predicate: "Cite".into(),
            args: vec!["p0".into(), "pX".into()],
            value: true,
        }];
        let err = build_atom_table(&kb, &names(2), &ev).unwrap_err();
        assert!(matches!(err, GroundingError::UnknownConstant { .. }));
    }

    #[test]
    fn forall_over_five_constants() {
        let kb = parse_kb("domain d\npred A(d)\nrule: forall x: A(x)").unwrap();
        let t = build_atom_table(&kb, &names(5), &[]).unwrap();
        let r = ground_formula(&kb, &kb.formulas[0], &t, &GroundingOptions::default()).unwrap();
        assert_eq!(r.groundings.len(), 5);
        assert!(r.groundings.iter().all(|g| g.slots.len() == 1));
        assert_eq!(r.shape(&r.groundings[0]).counts, Some((1, 1)));
    }

    #[test]
    fn template_truth_tables() {
        let kb = parse_kb(
            "domain d\npred A(d)\npred B(d)\npred Cite(d,d) evidence\n\
             rule: forall x: A(x) implies B(x)\n\
             rule: forall x: A(x) and B(x)\n\
             rule: forall p1 forall p2: A(p1) and Cite(p1,p2) implies A(p2)",
        )
        .unwrap();
        let none = |_: &Atom| None;
        assert_eq!(truth_table_counts(&kb.formulas[0], &none), (3, 1));
        assert_eq!(truth_table_counts(&kb.formulas[1], &none), (1, 3));
        assert_eq!(truth_table_counts(&kb.formulas[2], &none), (7, 1));
        let cite_true = |a: &Atom| (a.predicate == "Cite").then_some(true);
        assert_eq!(truth_table_counts(&kb.formulas[2], &cite_true), (3, 1));
    }

    fn cite_kb() -> KnowledgeBase {
        parse_kb(
            "domain d\npred A(d)\npred B(d)\npred Cite(d,d) evidence\n\
             rule: forall p1 forall p2: A(p1) and Cite(p1,p2) implies A(p2)",
        )
        .unwrap()
    }

    fn cite(a: usize, b: usize) -> EvidenceAtom {
        EvidenceAtom {
            predicate: "Cite".into(),
            args: vec![format!("p{a}"), format!("p{b}")],
            value: true,
        }
    }

    #[test]
    fn guard_pruning_materialises_only_linked_pairs() {
        let kb = cite_kb();
        let ev = vec![cite(0, 1), cite(1, 2), cite(3, 0)];
        let t = build_atom_table(&kb, &names(4), &ev).unwrap();
        let r = ground_formula(&kb, &kb.formulas[0], &t, &GroundingOptions::default()).unwrap();
        assert_eq!(r.groundings.len(), 3);
        assert_eq!(r.total, 16);
        assert_eq!(r.constant_true, 13);
        let stats = ConstraintStats::from_rule(&r);
        assert_eq!((stats.n_plus, stats.n_minus), (3, 1));
        assert!(stats.is_uniform());
    }

    #[test]
    fn self_loops_collapse_to_tautologies() {
        let kb = cite_kb();
        let t = build_atom_table(&kb, &names(2), &[cite(1, 1), cite(0, 1)]).unwrap();
        let r = ground_formula(&kb, &kb.formulas[0], &t, &GroundingOptions::default()).unwrap();
        assert_eq!(r.groundings.len(), 1);
        assert_eq!(r.constant_true, 3);
    }

    #[test]
    fn no_prune_keeps_every_assignment() {
        let kb = cite_kb();
        let t = build_atom_table(&kb, &names(3), &[cite(0, 1)]).unwrap();
        let opts = GroundingOptions {
            prune: false,
            ..Default::default()
        };
        let r = ground_formula(&kb, &kb.formulas[0], &t, &opts).unwrap();
        assert_eq!(r.groundings.len(), 9);
        let stats = ConstraintStats::from_rule(&r);
        // three-variable template on the distinct-atom groundings
        assert!(stats.classes.iter().any(|c| (c.0, c.1) == (7, 1)));
    }

    #[test]
    fn cap_is_enforced() {
        let kb = cite_kb();
        let t = build_atom_table(&kb, &names(10), &[]).unwrap();
        let opts = GroundingOptions { prune: false, cap: 50 };
        let err = ground_formula(&kb, &kb.formulas[0], &t, &opts).unwrap_err();
        assert!(matches!(err, GroundingError::CapExceeded { count: 100, .. }));
    }

    #[test]
    fn successor_builtin_folds_per_grounding() {
        let kb = parse_kb(
            "domain img\ndomain cls = {0..9}\npred digit(img, cls)\npred link(img, img) evidence\n\
             rule: forall x forall y forall i forall j: link(x,y) and digit(x,i) and digit(y,j) implies succ(i,j)",
        )
        .unwrap();
        let ev = vec![
            EvidenceAtom {
                predicate: "link".into(),
                args: vec!["p0".into(), "p1".into()],
                value: true,
            },
            EvidenceAtom {
                predicate: "link".into(),
                args: vec!["p1".into(), "p2".into()],
                value: true,
            },
        ];
        let t = build_atom_table(&kb, &names(3), &ev).unwrap();
        let r = ground_formula(&kb, &kb.formulas[0], &t, &GroundingOptions::default()).unwrap();
        // 100 digit pairs per link; the 9 successor pairs are always satisfied
        assert_eq!(r.groundings.len(), 2 * 91);
        assert_eq!(r.constant_true, r.total - 2 * 91);
        let stats = ConstraintStats::from_rule(&r);
        assert_eq!((stats.n_plus, stats.n_minus), (3, 1));
    }

    #[test]
    fn existential_expands_inside_each_grounding() {
        let kb = parse_kb("domain d\ndomain c = {a, b}\npred R(d, c)\nrule: forall x exists y: R(x, y)").unwrap();
        let t = build_atom_table(&kb, &names(3), &[]).unwrap();
        let r = ground_formula(&kb, &kb.formulas[0], &t, &GroundingOptions::default()).unwrap();
        assert_eq!(r.groundings.len(), 3);
        assert_eq!(r.groundings[0].slots.len(), 2);
        assert_eq!(r.shape(&r.groundings[0]).counts, Some((3, 1)));
    }

    #[test]
    fn potential_counts_satisfied_groundings() {
        let kb = parse_kb("domain d\npred A(d)\nrule: forall x: A(x)").unwrap();
        let t = build_atom_table(&kb, &names(4), &[]).unwrap();
        let r = ground_formula(&kb, &kb.formulas[0], &t, &GroundingOptions::default()).unwrap();
        let mut w = t.empty_world();
        assert_eq!(potential_value(&r, &w), Err(GroundingError::Unobserved(0)));
        for (i, v) in w.values.iter_mut().enumerate() {
            *v = Some(i != 2);
        }
        assert_eq!(potential_value(&r, &w).unwrap(), 3.0);
    }

    #[test]
    fn dump_lists_atoms_and_cliques() {
        let kb = cite_kb();
        let t = build_atom_table(&kb, &names(2), &[cite(0, 1)]).unwrap();
        let rules = ground_all(&kb, &t, &GroundingOptions::default()).unwrap();
        let dump = dump_network(&t, &rules);
        assert!(dump.contains("atom 0 A(p0)"));
        assert!(dump.contains("atom 4 Cite(p0,p1)"));
        assert!(dump.contains("clique 0 0 1"));
    }
}
