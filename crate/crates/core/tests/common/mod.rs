#![allow(dead_code)]

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng;
use rnm::grounding::{EvidenceAtom, GroundExpr, GroundingOptions};
use rnm::infer::GroundNetwork;
use rnm::kb::{parse_kb, KnowledgeBase};
use rnm::net::SupervisionMode;

pub const PREDICATES: [&str; 6] = ["A", "B", "C", "D", "E", "F"];

/// Random propositional body over `P(x)` atoms of the given predicates.
pub fn random_body(rng: &mut impl Rng, preds: &[&str], var: &str, depth: usize) -> String {
    if depth == 0 || rng.random_bool(0.25) {
        return format!("{}({var})", preds.choose(rng).unwrap());
    }
    let a = random_body(rng, preds, var, depth - 1);
    match rng.random_range(0..4) {
        0 => format!("not ({a})"),
        1 => format!("({a}) and ({})", random_body(rng, preds, var, depth - 1)),
        2 => format!("({a}) or ({})", random_body(rng, preds, var, depth - 1)),
        _ => format!("({a}) implies ({})", random_body(rng, preds, var, depth - 1)),
    }
}

/// Random body that mentions every predicate in `preds` at least once.
pub fn covering_body(rng: &mut impl Rng, preds: &[&str], var: &str) -> String {
    let mut body = format!("{}({var})", preds[0]);
    for p in &preds[1..] {
        let leaf = if rng.random_bool(0.3) {
            format!("not {p}({var})")
        } else {
            format!("{p}({var})")
        };
        body = match rng.random_range(0..3) {
            0 => format!("({body}) and ({leaf})"),
            1 => format!("({body}) or ({leaf})"),
            _ => format!("({body}) implies ({leaf})"),
        };
    }
    if rng.random_bool(0.3) {
        body = format!("not ({body})");
    }
    body
}

/// KB over an external `item` domain with unary learnable predicates, an
/// optional evidence relation `R(item, item)` and the given rules.
pub fn kb_text(preds: &[&str], relation: bool, rules: &[String]) -> String {
    let mut s = String::from("domain item\n");
    for p in preds {
        s.push_str(&format!("pred {p}(item)\n"));
    }
    if relation {
        s.push_str("pred R(item, item) evidence\n");
    }
    for r in rules {
        s.push_str(&format!("rule: {r}\n"));
    }
    s
}

pub fn items(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("i{i}")).collect()
}

pub fn build(
    text: &str,
    n_patterns: usize,
    evidence: &[EvidenceAtom],
    mode: SupervisionMode,
    options: &GroundingOptions,
) -> (KnowledgeBase, GroundNetwork) {
    let kb = parse_kb(text).unwrap_or_else(|e| panic!("{e}\n{text}"));
    let classes: Vec<String> = kb.learnable().map(|p| p.name.clone()).collect();
    let net = GroundNetwork::build(&kb, &items(n_patterns), evidence, &classes, mode, options)
        .unwrap_or_else(|e| panic!("{e}\n{text}"));
    (kb, net)
}

pub fn relation(pairs: &[(usize, usize)]) -> Vec<EvidenceAtom> {
    pairs
        .iter()
        .map(|&(a, b)| EvidenceAtom {
            predicate: "R".into(),
            args: vec![format!("i{a}"), format!("i{b}")],
            value: true,
        })
        .collect()
}

pub fn random_scores(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * (rng.random::<f64>() * 2.0 - 1.0))
}

/// Ground expression of a formula body with atoms mapped to slots in order
/// of first appearance; returns the expression and the slot count.
pub fn template(kb: &KnowledgeBase, formula: usize) -> (GroundExpr, usize) {
    let body = &kb.formulas[formula].body;
    let atoms = body.distinct_atoms();
    let expr = GroundExpr::from_template(body, &mut |a| {
        let i = atoms
            .iter()
            .position(|b| b.predicate == a.predicate && b.args == a.args)
            .unwrap();
        GroundExpr::Var(i as u8)
    });
    (expr, atoms.len())
}

/// |a − b| / max(|a|, |b|, floor).
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, floor).
pub fn rel_err_vec(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}
