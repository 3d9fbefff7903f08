//! Exhaustive-enumeration oracles for small worlds. Constraint potentials
//! are recomputed from the knowledge base AST over every grounding, with no
//! pruning or shape tables, so they serve as an independent check of the
//! grounding engine, MAP inference and the local partition functions.

use std::collections::HashMap;

use ndarray::Array2;
use thiserror::Error;

use crate::grounding::World;
use crate::infer::GroundNetwork;
use crate::kb::{Atom, Expr, KnowledgeBase, QuantifiedVar, Quantifier, Term};
use crate::net::SupervisionMode;

pub const MAX_MAP_ATOMS: usize = 24;
pub const MAX_PARTITION_ATOMS: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("{got} free atoms exceed the enumeration limit of {limit}")]
    TooManyAtoms { got: usize, limit: usize },
    #[error("pattern {0} mixes observed and unobserved classes")]
    PartialGroup(usize),
    #[error("no admissible assignment")]
    Empty,
}

/// Number of satisfied groundings of formula `c` in a complete world,
/// counting every assignment of the leading universal variables.
pub fn ast_potential(kb: &KnowledgeBase, net: &GroundNetwork, c: usize, world: &World) -> f64 {
    let formula = &kb.formulas[c];
    let outer = formula
        .prefix
        .iter()
        .take_while(|q| q.quantifier == Quantifier::Forall)
        .count();
    let mut env = HashMap::new();
    count(
        net,
        &formula.prefix[..outer],
        &formula.prefix[outer..],
        &formula.body,
        &mut env,
        world,
    ) as f64
}

fn constants<'a>(net: &'a GroundNetwork, q: &QuantifiedVar) -> &'a [String] {
    let t = &net.table;
    let d = t
        .domain_names
        .iter()
        .position(|n| *n == q.domain)
        .expect("domain in table");
    &t.domain_constants[d]
}

fn count(
    net: &GroundNetwork,
    outer: &[QuantifiedVar],
    inner: &[QuantifiedVar],
    body: &Expr,
    env: &mut HashMap<String, String>,
    world: &World,
) -> u64 {
    match outer.split_first() {
        None => truth(net, inner, body, env, world) as u64,
        Some((q, rest)) => {
            let mut n = 0;
            for c in constants(net, q) {
                env.insert(q.variable.clone(), c.clone());
                n += count(net, rest, inner, body, env, world);
            }
            env.remove(&q.variable);
            n
        }
    }
}

fn truth(
    net: &GroundNetwork,
    prefix: &[QuantifiedVar],
    body: &Expr,
    env: &mut HashMap<String, String>,
    world: &World,
) -> bool {
    match prefix.split_first() {
        None => body.eval(&mut |a| atom_value(net, a, env, world)),
        Some((q, rest)) => {
            let mut values = Vec::new();
            for c in constants(net, q) {
                env.insert(q.variable.clone(), c.clone());
                values.push(truth(net, rest, body, env, world));
            }
            env.remove(&q.variable);
            match q.quantifier {
                Quantifier::Forall => values.iter().all(|&v| v),
                Quantifier::Exists => values.iter().any(|&v| v),
            }
        }
    }
}

fn atom_value(net: &GroundNetwork, atom: &Atom, env: &HashMap<String, String>, world: &World) -> bool {
    let args: Vec<&str> = atom
        .args
        .iter()
        .map(|t| match t {
            Term::Var(v) => env[v].as_str(),
            Term::Const(c) => c.as_str(),
        })
        .collect();
    if let Some(b) = atom.builtin() {
        return b.eval(args[0], args[1]);
    }
    match net.table.lookup(&atom.predicate, &args) {
        Some(i) => world.get(i).expect("complete world"),
        None => false,
    }
}

/// Σ_x f·y + Σ_c λ_c Φ_c of a complete world, with potentials from the AST.
pub fn ast_objective(kb: &KnowledgeBase, net: &GroundNetwork, f: &Array2<f64>, lambdas: &[f64], world: &World) -> f64 {
    let mut total = 0.0;
    for (p, atoms) in net.class_atoms.iter().enumerate() {
        for (k, &a) in atoms.iter().enumerate() {
            if world.get(a) == Some(true) {
                total += f[[p, k]];
            }
        }
    }
    for (c, &l) in lambdas.iter().enumerate() {
        if l != 0.0 {
            total += l * ast_potential(kb, net, c, world);
        }
    }
    total
}

/// Free choices: one per one-label pattern (which class is on) or one per
/// unobserved multi-label atom.
enum Choice {
    OneHot(Vec<usize>),
    Bit(usize),
}

fn choices(net: &GroundNetwork, pinned: &World) -> Result<Vec<Choice>, OracleError> {
    let mut out = Vec::new();
    for (p, atoms) in net.class_atoms.iter().enumerate() {
        let free = atoms.iter().filter(|&&a| pinned.get(a).is_none()).count();
        match net.mode {
            SupervisionMode::OneLabel if free == atoms.len() => out.push(Choice::OneHot(atoms.clone())),
            SupervisionMode::OneLabel if free > 0 => return Err(OracleError::PartialGroup(p)),
            SupervisionMode::OneLabel => {}
            SupervisionMode::MultiLabel => out.extend(
                atoms
                    .iter()
                    .filter(|&&a| pinned.get(a).is_none())
                    .map(|&a| Choice::Bit(a)),
            ),
        }
    }
    Ok(out)
}

fn free_atoms(choices: &[Choice]) -> usize {
    choices
        .iter()
        .map(|c| match c {
            Choice::OneHot(a) => a.len(),
            Choice::Bit(_) => 1,
        })
        .sum()
}

/// Calls `visit` on every admissible completion of `pinned`. One-label
/// patterns take exactly one positive class.
fn enumerate(pinned: &World, choices: &[Choice], visit: &mut dyn FnMut(&World)) {
    fn rec(world: &mut World, choices: &[Choice], visit: &mut dyn FnMut(&World)) {
        match choices.split_first() {
            None => visit(world),
            Some((Choice::Bit(a), rest)) => {
                for v in [false, true] {
                    world.values[*a] = Some(v);
                    rec(world, rest, visit);
                }
            }
            Some((Choice::OneHot(atoms), rest)) => {
                for &on in atoms {
                    for &a in atoms {
                        world.values[a] = Some(a == on);
                    }
                    rec(world, rest, visit);
                }
            }
        }
    }
    let mut world = pinned.clone();
    rec(&mut world, choices, visit);
}

/// Exact maximiser of the discrete objective over completions of `pinned`.
pub fn brute_force_map(
    kb: &KnowledgeBase,
    net: &GroundNetwork,
    f: &Array2<f64>,
    lambdas: &[f64],
    pinned: &World,
) -> Result<(World, f64), OracleError> {
    let ch = choices(net, pinned)?;
    let n = free_atoms(&ch);
    if n > MAX_MAP_ATOMS {
        return Err(OracleError::TooManyAtoms {
            got: n,
            limit: MAX_MAP_ATOMS,
        });
    }
    let mut best: Option<(World, f64)> = None;
    enumerate(pinned, &ch, &mut |w| {
        let v = ast_objective(kb, net, f, lambdas, w);
        if best.as_ref().is_none_or(|b| v > b.1) {
            best = Some((w.clone(), v));
        }
    });
    best.ok_or(OracleError::Empty)
}

/// Exact partition function Σ exp(objective) over completions of `pinned`.
pub fn brute_force_partition(
    kb: &KnowledgeBase,
    net: &GroundNetwork,
    f: &Array2<f64>,
    lambdas: &[f64],
    pinned: &World,
) -> Result<f64, OracleError> {
    let ch = choices(net, pinned)?;
    let n = free_atoms(&ch);
    if n > MAX_PARTITION_ATOMS {
        return Err(OracleError::TooManyAtoms {
            got: n,
            limit: MAX_PARTITION_ATOMS,
        });
    }
    let mut z = 0.0;
    enumerate(pinned, &ch, &mut |w| z += ast_objective(kb, net, f, lambdas, w).exp());
    Ok(z)
}
