//! T-norm fuzzy semantics for grounded formulas.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::{GroundExpr, GroundedRule, Slot};
use crate::kb::Quantifier;

/// Below this antecedent value the product residuum is taken to be 1.
pub const PRODUCT_IMPLIES_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TNorm {
    #[default]
    Product,
    Goedel,
    Lukasiewicz,
}

impl TNorm {
    pub const ALL: [TNorm; 3] = [TNorm::Product, TNorm::Goedel, TNorm::Lukasiewicz];
}

impl fmt::Display for TNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TNorm::Product => "product",
            TNorm::Goedel => "goedel",
            TNorm::Lukasiewicz => "lukasiewicz",
        })
    }
}

impl FromStr for TNorm {
    type Err = FuzzyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "product" => Ok(TNorm::Product),
            "goedel" | "godel" | "gödel" | "minimum" => Ok(TNorm::Goedel),
            "lukasiewicz" | "łukasiewicz" => Ok(TNorm::Lukasiewicz),
            _ => Err(FuzzyError::UnknownTNorm(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connective {
    And,
    Or,
    Not,
    Implies,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    TNorm,
    TConorm,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FuzzyError {
    #[error("unknown t-norm '{0}'")]
    UnknownTNorm(String),
    #[error("cannot aggregate an empty grounding set")]
    EmptyGroundings,
    #[error("binary connective applied to a single argument")]
    MissingArgument,
}

/// Applies one connective. `b` is ignored for `Not`.
pub fn tnorm_apply(t: TNorm, op: Connective, a: f64, b: Option<f64>) -> Result<f64, FuzzyError> {
    if op == Connective::Not {
        return Ok(1.0 - a);
    }
    let b = b.ok_or(FuzzyError::MissingArgument)?;
    Ok(binary(t, op, a, b).0)
}

/// Value and partial derivatives (d/da, d/db) of a binary connective.
/// At min/max kinks the derivative goes to the first argument.
fn binary(t: TNorm, op: Connective, a: f64, b: f64) -> (f64, f64, f64) {
    match (t, op) {
        (TNorm::Product, Connective::And) => (a * b, b, a),
        (TNorm::Product, Connective::Or) => (a + b - a * b, 1.0 - b, 1.0 - a),
        (TNorm::Product, Connective::Implies) => {
            if a < PRODUCT_IMPLIES_FLOOR || a <= b {
                (1.0, 0.0, 0.0)
            } else {
                (b / a, -b / (a * a), 1.0 / a)
            }
        }
        (TNorm::Goedel, Connective::And) => {
            if a <= b {
                (a, 1.0, 0.0)
            } else {
                (b, 0.0, 1.0)
            }
        }
        (TNorm::Goedel, Connective::Or) => {
            if a >= b {
                (a, 1.0, 0.0)
            } else {
                (b, 0.0, 1.0)
            }
        }
        (TNorm::Goedel, Connective::Implies) => {
            if a <= b {
                (1.0, 0.0, 0.0)
            } else {
                (b, 0.0, 1.0)
            }
        }
        (TNorm::Lukasiewicz, Connective::And) => {
            let s = a + b - 1.0;
            if s > 0.0 {
                (s, 1.0, 1.0)
            } else {
                (0.0, 0.0, 0.0)
            }
        }
        (TNorm::Lukasiewicz, Connective::Or) => {
            let s = a + b;
            if s < 1.0 {
                (s, 1.0, 1.0)
            } else {
                (1.0, 0.0, 0.0)
            }
        }
        (TNorm::Lukasiewicz, Connective::Implies) => {
            let s = 1.0 - a + b;
            if s < 1.0 {
                (s, -1.0, 1.0)
            } else {
                (1.0, 0.0, 0.0)
            }
        }
        (_, Connective::Not) => (1.0 - a, -1.0, 0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Node {
    Const(f64),
    Var(usize),
    Not(usize),
    Binary(Connective, usize, usize),
}

/// A ground expression flattened into evaluation order.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyExpr {
    nodes: Vec<Node>,
    n_slots: usize,
}

impl FuzzyExpr {
    pub fn compile(expr: &GroundExpr, n_slots: usize) -> Self {
        let mut nodes = Vec::new();
        Self::push(expr, &mut nodes);
        FuzzyExpr { nodes, n_slots }
    }

    fn push(e: &GroundExpr, nodes: &mut Vec<Node>) -> usize {
        let node = match e {
            GroundExpr::Const(b) => Node::Const(if *b { 1.0 } else { 0.0 }),
            GroundExpr::Var(i) => Node::Var(*i as usize),
            GroundExpr::Not(x) => Node::Not(Self::push(x, nodes)),
            GroundExpr::And(a, b) => {
                let (a, b) = (Self::push(a, nodes), Self::push(b, nodes));
                Node::Binary(Connective::And, a, b)
            }
            GroundExpr::Or(a, b) => {
                let (a, b) = (Self::push(a, nodes), Self::push(b, nodes));
                Node::Binary(Connective::Or, a, b)
            }
            GroundExpr::Implies(a, b) => {
                let (a, b) = (Self::push(a, nodes), Self::push(b, nodes));
                Node::Binary(Connective::Implies, a, b)
            }
        };
        nodes.push(node);
        nodes.len() - 1
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    fn forward(&self, slots: &[f64], t: TNorm, values: &mut Vec<f64>) {
        values.clear();
        for node in &self.nodes {
            let v = match *node {
                Node::Const(c) => c,
                Node::Var(i) => slots[i],
                Node::Not(a) => 1.0 - values[a],
                Node::Binary(op, a, b) => binary(t, op, values[a], values[b]).0,
            };
            values.push(v);
        }
    }

    pub fn eval(&self, slots: &[f64], t: TNorm) -> f64 {
        let mut values = Vec::with_capacity(self.nodes.len());
        self.forward(slots, t, &mut values);
        *values.last().expect("non-empty expression")
    }

    /// Value, with `scale · ∂value/∂slot` added into `grad`.
    pub fn eval_grad_into(&self, slots: &[f64], t: TNorm, scale: f64, grad: &mut [f64], scratch: &mut Scratch) -> f64 {
        let Scratch { values, adjoint } = scratch;
        self.forward(slots, t, values);
        adjoint.clear();
        adjoint.resize(self.nodes.len(), 0.0);
        let root = self.nodes.len() - 1;
        adjoint[root] = scale;
        for k in (0..self.nodes.len()).rev() {
            let up = adjoint[k];
            if up == 0.0 {
                continue;
            }
            match self.nodes[k] {
                Node::Const(_) => {}
                Node::Var(i) => grad[i] += up,
                Node::Not(a) => adjoint[a] -= up,
                Node::Binary(op, a, b) => {
                    let (_, da, db) = binary(t, op, values[a], values[b]);
                    adjoint[a] += up * da;
                    adjoint[b] += up * db;
                }
            }
        }
        values[root]
    }
}

/// Reusable buffers for gradient evaluation.
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    values: Vec<f64>,
    adjoint: Vec<f64>,
}

/// Value and gradient over the expression's slots.
pub fn fuzzy_eval_grad(expr: &FuzzyExpr, slots: &[f64], t: TNorm) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; expr.n_slots];
    let v = expr.eval_grad_into(slots, t, 1.0, &mut grad, &mut Scratch::default());
    (v, grad)
}

/// Compiled fuzzy evaluator for every grounding of one formula.
#[derive(Debug, Clone)]
pub struct Surrogate {
    shapes: Vec<FuzzyExpr>,
}

impl Surrogate {
    pub fn new(rule: &GroundedRule) -> Self {
        Surrogate {
            shapes: rule
                .shapes
                .iter()
                .map(|s| FuzzyExpr::compile(&s.expr, s.n_slots))
                .collect(),
        }
    }
}

fn gather(slots: &[Slot], relaxed: &[f64], buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend(slots.iter().map(|s| match *s {
        Slot::Atom(a) => relaxed[a],
        Slot::Fixed(b) => b as u8 as f64,
    }));
}

/// Φˢ_c: sum of fuzzy grounding values. With `grad`, adds
/// `scale · ∂Φˢ_c/∂y` for every learnable atom.
pub fn surrogate_potential(
    rule: &GroundedRule,
    surrogate: &Surrogate,
    relaxed: &[f64],
    t: TNorm,
    grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let mut buf = Vec::new();
    let mut total = 0.0;
    match grad {
        None => {
            for g in &rule.groundings {
                gather(&g.slots, relaxed, &mut buf);
                total += surrogate.shapes[g.shape as usize].eval(&buf, t);
            }
        }
        Some((grad, scale)) => {
            let mut scratch = Scratch::default();
            let mut local = Vec::new();
            for g in &rule.groundings {
                gather(&g.slots, relaxed, &mut buf);
                local.clear();
                local.resize(g.slots.len(), 0.0);
                let expr = &surrogate.shapes[g.shape as usize];
                total += expr.eval_grad_into(&buf, t, scale, &mut local, &mut scratch);
                for (s, d) in g.slots.iter().zip(&local) {
                    if let Slot::Atom(a) = *s {
                        grad[a] += d;
                    }
                }
            }
        }
    }
    total
}

impl Aggregation {
    /// Iterated connective for a quantifier: t-norm for forall, t-conorm
    /// for exists.
    pub fn for_quantifier(q: Quantifier) -> Self {
        match q {
            Quantifier::Forall => Aggregation::TNorm,
            Quantifier::Exists => Aggregation::TConorm,
        }
    }
}

/// Combines grounding values into a quantifier value. `mode` overrides the
/// quantifier's own connective (e.g. the arithmetic mean for forall).
pub fn aggregate_quantifier(_q: Quantifier, values: &[f64], mode: Aggregation, t: TNorm) -> Result<f64, FuzzyError> {
    if values.is_empty() {
        return Err(FuzzyError::EmptyGroundings);
    }
    let fold = |op: Connective| values[1..].iter().fold(values[0], |acc, &v| binary(t, op, acc, v).0);
    let v = match mode {
        Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Aggregation::TNorm => fold(Connective::And),
        Aggregation::TConorm => fold(Connective::Or),
    };
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn apply(t: TNorm, op: Connective, a: f64, b: f64) -> f64 {
        tnorm_apply(t, op, a, Some(b)).unwrap()
    }

    #[test]
    fn table_entries() {
        assert_eq!(apply(TNorm::Product, Connective::And, 0.5, 0.5), 0.25);
        assert_abs_diff_eq!(apply(TNorm::Lukasiewicz, Connective::And, 0.7, 0.2), 0.0);
        assert_eq!(apply(TNorm::Lukasiewicz, Connective::Or, 0.7, 0.5), 1.0);
        assert_eq!(apply(TNorm::Goedel, Connective::Implies, 0.7, 0.5), 0.5);
        assert_eq!(apply(TNorm::Goedel, Connective::Implies, 0.3, 0.5), 1.0);
        assert_abs_diff_eq!(apply(TNorm::Product, Connective::Implies, 0.8, 0.4), 0.5);
        assert_eq!(apply(TNorm::Product, Connective::Implies, 0.0, 0.0), 1.0);
        assert_abs_diff_eq!(apply(TNorm::Lukasiewicz, Connective::Implies, 0.9, 0.4), 0.5);
        for t in TNorm::ALL {
            assert_eq!(apply(t, Connective::Or, 1.0, 0.0), 1.0);
            assert_eq!(tnorm_apply(t, Connective::Not, 0.25, None).unwrap(), 0.75);
        }
        assert_eq!(
            tnorm_apply(TNorm::Product, Connective::And, 0.1, None),
            Err(FuzzyError::MissingArgument)
        );
    }

    #[test]
    fn product_and_gradient() {
        let e = GroundExpr::And(Box::new(GroundExpr::Var(0)), Box::new(GroundExpr::Var(1)));
        let (v, g) = fuzzy_eval_grad(&FuzzyExpr::compile(&e, 2), &[0.5, 0.4], TNorm::Product);
        assert_abs_diff_eq!(v, 0.2);
        assert_abs_diff_eq!(g[0], 0.4);
        assert_abs_diff_eq!(g[1], 0.5);
    }

    #[test]
    fn goedel_ties_go_to_first_argument() {
        let e = GroundExpr::And(Box::new(GroundExpr::Var(0)), Box::new(GroundExpr::Var(1)));
        let (_, g) = fuzzy_eval_grad(&FuzzyExpr::compile(&e, 2), &[0.3, 0.3], TNorm::Goedel);
        assert_eq!(g, vec![1.0, 0.0]);
        let e = GroundExpr::Or(Box::new(GroundExpr::Var(1)), Box::new(GroundExpr::Var(0)));
        let (_, g) = fuzzy_eval_grad(&FuzzyExpr::compile(&e, 2), &[0.6, 0.6], TNorm::Goedel);
        assert_eq!(g, vec![0.0, 1.0]);
    }

    #[test]
    fn repeated_slot_accumulates() {
        let e = GroundExpr::And(Box::new(GroundExpr::Var(0)), Box::new(GroundExpr::Var(0)));
        let (v, g) = fuzzy_eval_grad(&FuzzyExpr::compile(&e, 1), &[0.3], TNorm::Product);
        assert_abs_diff_eq!(v, 0.09);
        assert_abs_diff_eq!(g[0], 0.6);
    }

    #[test]
    fn aggregation() {
        let q = Quantifier::Forall;
        assert_eq!(
            aggregate_quantifier(q, &[1.0, 1.0, 0.0, 1.0], Aggregation::Mean, TNorm::Product).unwrap(),
            0.75
        );
        assert_eq!(
            aggregate_quantifier(Quantifier::Exists, &[0.2, 0.7], Aggregation::TConorm, TNorm::Goedel).unwrap(),
            0.7
        );
        assert_eq!(
            aggregate_quantifier(q, &[0.5, 0.5], Aggregation::TNorm, TNorm::Product).unwrap(),
            0.25
        );
        assert_eq!(
            aggregate_quantifier(q, &[], Aggregation::Mean, TNorm::Product),
            Err(FuzzyError::EmptyGroundings)
        );
    }

    #[test]
    fn parse_names() {
        for t in TNorm::ALL {
            assert_eq!(t.to_string().parse::<TNorm>().unwrap(), t);
        }
        assert!("max".parse::<TNorm>().is_err());
    }
}
