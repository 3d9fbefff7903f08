//! Knowledge-base language: domains, predicate signatures and weighted
//! first-order formulas.
//!
//! ```text
//! # comment
//! domain paper                       # constants supplied by the dataset
//! domain cls = {0..9}                # integer range shorthand
//! domain color = {red, green}
//! pred AG(paper) learnable
//! pred Cite(paper, paper) evidence
//! rule: forall p1 forall p2: AG(p1) and Cite(p1, p2) implies AG(p2)
//! rule @fixed(0.5): forall x in paper: not AG(x) or AI(x)
//! ```
//!
//! Precedence is `not` > `and` > `or` > `implies`; `implies` is
//! right-associative. `succ(i, j)` (j = i + 1 over integer constants) and
//! `eq(i, j)` are builtin and never declared.

use std::collections::{HashMap, HashSet};
use std::fmt;

use thiserror::Error;

/// Default maximum number of distinct non-builtin atoms per formula.
pub const DEFAULT_CLIQUE_LIMIT: usize = 8;

/// Source position. Compares equal to every other position so that ASTs
/// parsed from differently formatted sources are structurally equal.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl PartialEq for Pos {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDecl {
    pub name: String,
    pub constants: Vec<String>,
    /// Constants are supplied by the dataset rather than listed in the KB.
    pub external: bool,
    pub pos: Pos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredicateKind {
    Learnable,
    Evidence,
    Builtin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredicateSig {
    pub name: String,
    pub arg_domains: Vec<String>,
    pub kind: PredicateKind,
    pub pos: Pos,
}

impl PredicateSig {
    pub fn arity(&self) -> usize {
        self.arg_domains.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Builtin {
    /// `succ(i, j)`: j = i + 1.
    Succ,
    /// `eq(i, j)`: i = j.
    Eq,
}

impl Builtin {
    pub fn from_name(name: &str) -> Option<Builtin> {
        match name {
            "succ" => Some(Builtin::Succ),
            "eq" => Some(Builtin::Eq),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Succ => "succ",
            Builtin::Eq => "eq",
        }
    }

    /// Evaluates the builtin on two constant names. `succ` is false unless
    /// both constants parse as integers.
    pub fn eval(self, a: &str, b: &str) -> bool {
        match self {
            Builtin::Eq => a == b,
            Builtin::Succ => match (a.parse::<i64>(), b.parse::<i64>()) {
                (Ok(i), Ok(j)) => j == i + 1,
                _ => false,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Quantifier {
    Forall,
    Exists,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantifiedVar {
    pub quantifier: Quantifier,
    pub variable: String,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Var(String),
    Const(String),
}

impl Term {
    pub fn name(&self) -> &str {
        match self {
            Term::Var(s) | Term::Const(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub predicate: String,
    pub args: Vec<Term>,
    pub pos: Pos,
}

impl Atom {
    pub fn builtin(&self) -> Option<Builtin> {
        Builtin::from_name(&self.predicate)
    }

    /// Structural key ignoring the position.
    fn key(&self) -> (&str, &[Term]) {
        (&self.predicate, &self.args)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Atom(Atom),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Implies(Box<Expr>, Box<Expr>),
}

impl Expr {
    /// Visits every atom in left-to-right order.
    pub fn atoms(&self) -> Vec<&Atom> {
        let mut out = Vec::new();
        self.collect_atoms(&mut out);
        out
    }

    fn collect_atoms<'a>(&'a self, out: &mut Vec<&'a Atom>) {
        match self {
            Expr::Atom(a) => out.push(a),
            Expr::Not(e) => e.collect_atoms(out),
            Expr::And(a, b) | Expr::Or(a, b) | Expr::Implies(a, b) => {
                a.collect_atoms(out);
                b.collect_atoms(out);
            }
        }
    }

    /// Distinct non-builtin atoms, in order of first appearance.
    pub fn distinct_atoms(&self) -> Vec<&Atom> {
        let mut seen = HashSet::new();
        self.atoms()
            .into_iter()
            .filter(|a| a.builtin().is_none() && seen.insert(a.key()))
            .collect()
    }

    /// Boolean evaluation with a caller-supplied atom valuation.
    pub fn eval(&self, atom_value: &mut dyn FnMut(&Atom) -> bool) -> bool {
        match self {
            Expr::Atom(a) => atom_value(a),
            Expr::Not(e) => !e.eval(atom_value),
            Expr::And(a, b) => {
                let x = a.eval(atom_value);
                let y = b.eval(atom_value);
                x && y
            }
            Expr::Or(a, b) => {
                let x = a.eval(atom_value);
                let y = b.eval(atom_value);
                x || y
            }
            Expr::Implies(a, b) => {
                let x = a.eval(atom_value);
                let y = b.eval(atom_value);
                !x || y
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightMode {
    Trainable,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Formula {
    pub id: usize,
    pub prefix: Vec<QuantifiedVar>,
    pub body: Expr,
    pub weight: WeightMode,
    pub pos: Pos,
}

impl Formula {
    /// Number of distinct non-builtin atoms in the body.
    pub fn n_atoms(&self) -> usize {
        self.body.distinct_atoms().len()
    }

    pub fn variable(&self, name: &str) -> Option<&QuantifiedVar> {
        self.prefix.iter().find(|q| q.variable == name)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnowledgeBase {
    pub domains: Vec<DomainDecl>,
    pub predicates: Vec<PredicateSig>,
    pub formulas: Vec<Formula>,
}

impl KnowledgeBase {
    pub fn domain(&self, name: &str) -> Option<&DomainDecl> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn predicate(&self, name: &str) -> Option<&PredicateSig> {
        self.predicates.iter().find(|p| p.name == name)
    }

    pub fn learnable(&self) -> impl Iterator<Item = &PredicateSig> {
        self.predicates.iter().filter(|p| p.kind == PredicateKind::Learnable)
    }

    /// Copy of the KB with every formula pinned to the given weight.
    pub fn with_fixed_weights(&self, lambda: f64) -> KnowledgeBase {
        let mut kb = self.clone();
        for f in &mut kb.formulas {
            f.weight = WeightMode::Fixed(lambda);
        }
        kb
    }

    /// Copy of the KB without formulas.
    pub fn without_rules(&self) -> KnowledgeBase {
        KnowledgeBase {
            formulas: Vec::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KbErrorKind {
    #[error("unexpected character '{0}'")]
    Lexical(char),
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown predicate '{0}'")]
    UnknownPredicate(String),
    #[error("unknown domain '{0}'")]
    UnknownDomain(String),
    #[error("predicate '{name}' expects {expected} argument(s), got {found}")]
    ArityMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("unbound variable '{0}'")]
    UnboundVariable(String),
    #[error("variable '{0}' bound more than once")]
    DuplicateVariable(String),
    #[error("variable '{0}' is never quantified over and cannot be typed")]
    UntypedVariable(String),
    #[error("variable '{var}' used with domains '{first}' and '{second}'")]
    DomainConflict { var: String, first: String, second: String },
    #[error("constant '{constant}' is not in domain '{domain}'")]
    UnknownConstant { constant: String, domain: String },
    #[error("duplicate constant '{constant}' in domain '{domain}'")]
    DuplicateConstant { constant: String, domain: String },
    #[error("duplicate declaration of '{0}'")]
    DuplicateDeclaration(String),
    #[error("'{0}' is a builtin predicate and cannot be declared")]
    ReservedName(String),
    #[error("formula has {found} atoms, above the clique limit of {limit}")]
    CliqueLimit { found: usize, limit: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{col}: {kind}")]
pub struct KbError {
    pub line: usize,
    pub col: usize,
    pub kind: KbErrorKind,
}

impl KbError {
    fn at(pos: Pos, kind: KbErrorKind) -> Self {
        KbError {
            line: pos.line,
            col: pos.col,
            kind,
        }
    }
}

/// A validation finding; same shape as a parse error.
pub type Diagnostic = KbError;

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    pub clique_limit: usize,
    /// Pseudo-likelihood scales linearly in the clique size, so the limit is
    /// not enforced when it is enabled.
    pub pseudo_likelihood: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            clique_limit: DEFAULT_CLIQUE_LIMIT,
            pseudo_likelihood: false,
        }
    }
}

pub fn parse_kb(text: &str) -> Result<KnowledgeBase, KbError> {
    parse_kb_with(text, &ParseOptions::default())
}

pub fn parse_kb_with(text: &str, options: &ParseOptions) -> Result<KnowledgeBase, KbError> {
    let tokens = lex(text)?;
    let mut parser = Parser {
        tokens,
        at: 0,
        formulas: 0,
    };
    let mut kb = parser.knowledge_base()?;
    resolve_domains(&mut kb)?;
    if let Some(d) = validate_kb(&kb).into_iter().next() {
        return Err(d);
    }
    if !options.pseudo_likelihood {
        for f in &kb.formulas {
            let n = f.n_atoms();
            if n > options.clique_limit {
                return Err(KbError::at(
                    f.pos,
                    KbErrorKind::CliqueLimit {
                        found: n,
                        limit: options.clique_limit,
                    },
                ));
            }
        }
    }
    Ok(kb)
}

/// Checks every KB invariant without mutating it. An empty result means the
/// KB is well formed.
pub fn validate_kb(kb: &KnowledgeBase) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut names = HashSet::new();
    for d in &kb.domains {
        if !names.insert(d.name.as_str()) {
            out.push(KbError::at(d.pos, KbErrorKind::DuplicateDeclaration(d.name.clone())));
        }
        let mut seen = HashSet::new();
        for c in &d.constants {
            if !seen.insert(c.as_str()) {
                out.push(KbError::at(
                    d.pos,
                    KbErrorKind::DuplicateConstant {
                        constant: c.clone(),
                        domain: d.name.clone(),
                    },
                ));
            }
        }
    }
    let mut preds = HashSet::new();
    for p in &kb.predicates {
        if Builtin::from_name(&p.name).is_some() {
            out.push(KbError::at(p.pos, KbErrorKind::ReservedName(p.name.clone())));
        }
        if !preds.insert(p.name.as_str()) {
            out.push(KbError::at(p.pos, KbErrorKind::DuplicateDeclaration(p.name.clone())));
        }
        for d in &p.arg_domains {
            if kb.domain(d).is_none() {
                out.push(KbError::at(p.pos, KbErrorKind::UnknownDomain(d.clone())));
            }
        }
    }
    for f in &kb.formulas {
        validate_formula(kb, f, &mut out);
    }
    out
}

fn validate_formula(kb: &KnowledgeBase, f: &Formula, out: &mut Vec<Diagnostic>) {
    let mut bound = HashMap::new();
    for q in &f.prefix {
        if bound.insert(q.variable.as_str(), q.domain.as_str()).is_some() {
            out.push(KbError::at(f.pos, KbErrorKind::DuplicateVariable(q.variable.clone())));
        }
        if kb.domain(&q.domain).is_none() {
            out.push(KbError::at(f.pos, KbErrorKind::UnknownDomain(q.domain.clone())));
        }
    }
    for atom in f.body.atoms() {
        if atom.builtin().is_some() {
            if atom.args.len() != 2 {
                out.push(KbError::at(
                    atom.pos,
                    KbErrorKind::ArityMismatch {
                        name: atom.predicate.clone(),
                        expected: 2,
                        found: atom.args.len(),
                    },
                ));
            }
            for t in &atom.args {
                if let Term::Var(v) = t {
                    if !bound.contains_key(v.as_str()) {
                        out.push(KbError::at(atom.pos, KbErrorKind::UnboundVariable(v.clone())));
                    }
                }
            }
            continue;
        }
        let Some(sig) = kb.predicate(&atom.predicate) else {
            out.push(KbError::at(
                atom.pos,
                KbErrorKind::UnknownPredicate(atom.predicate.clone()),
            ));
            continue;
        };
        if sig.arity() != atom.args.len() {
            out.push(KbError::at(
                atom.pos,
                KbErrorKind::ArityMismatch {
                    name: atom.predicate.clone(),
                    expected: sig.arity(),
                    found: atom.args.len(),
                },
            ));
            continue;
        }
        for (t, dom) in atom.args.iter().zip(&sig.arg_domains) {
            match t {
                Term::Var(v) => match bound.get(v.as_str()) {
                    None => out.push(KbError::at(atom.pos, KbErrorKind::UnboundVariable(v.clone()))),
                    Some(d) if *d != dom => out.push(KbError::at(
                        atom.pos,
                        KbErrorKind::DomainConflict {
                            var: v.clone(),
                            first: d.to_string(),
                            second: dom.clone(),
                        },
                    )),
                    Some(_) => {}
                },
                Term::Const(c) => {
                    if let Some(d) = kb.domain(dom) {
                        if !d.external && !d.constants.contains(c) {
                            out.push(KbError::at(
                                atom.pos,
                                KbErrorKind::UnknownConstant {
                                    constant: c.clone(),
                                    domain: dom.clone(),
                                },
                            ));
                        }
                    }
                }
            }
        }
    }
}

/// Fills in the domain of prefix variables declared without `in <domain>`
/// from the signatures of the atoms they appear in.
fn resolve_domains(kb: &mut KnowledgeBase) -> Result<(), KbError> {
    let sigs: HashMap<String, Vec<String>> = kb
        .predicates
        .iter()
        .map(|p| (p.name.clone(), p.arg_domains.clone()))
        .collect();
    for f in &mut kb.formulas {
        let names: HashSet<String> = f.prefix.iter().map(|q| q.variable.clone()).collect();
        let mut inferred: HashMap<String, String> = HashMap::new();
        for atom in f.body.atoms() {
            if atom.builtin().is_some() {
                continue;
            }
            let Some(doms) = sigs.get(&atom.predicate) else {
                return Err(KbError::at(
                    atom.pos,
                    KbErrorKind::UnknownPredicate(atom.predicate.clone()),
                ));
            };
            if doms.len() != atom.args.len() {
                return Err(KbError::at(
                    atom.pos,
                    KbErrorKind::ArityMismatch {
                        name: atom.predicate.clone(),
                        expected: doms.len(),
                        found: atom.args.len(),
                    },
                ));
            }
            for (t, d) in atom.args.iter().zip(doms) {
                if let Term::Var(v) = t {
                    if !names.contains(v) {
                        return Err(KbError::at(atom.pos, KbErrorKind::UnboundVariable(v.clone())));
                    }
                    match inferred.get(v) {
                        Some(prev) if prev != d => {
                            return Err(KbError::at(
                                atom.pos,
                                KbErrorKind::DomainConflict {
                                    var: v.clone(),
                                    first: prev.clone(),
                                    second: d.clone(),
                                },
                            ))
                        }
                        Some(_) => {}
                        None => {
                            inferred.insert(v.clone(), d.clone());
                        }
                    }
                }
            }
        }
        for q in &mut f.prefix {
            if q.domain.is_empty() {
                match inferred.get(&q.variable) {
                    Some(d) => q.domain = d.clone(),
                    None => return Err(KbError::at(f.pos, KbErrorKind::UntypedVariable(q.variable.clone()))),
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(String),
    LParen,
    RParen,
    LBrace,
    RBrace,
    Comma,
    Colon,
    Equals,
    At,
    DotDot,
    Newline,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: Pos,
}

fn lex(text: &str) -> Result<Vec<Token>, KbError> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let pos = Pos {
                line: ln + 1,
                col: i + 1,
            };
            if c == '#' {
                break;
            }
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            let single = match c {
                '(' => Some(Tok::LParen),
                ')' => Some(Tok::RParen),
                '{' => Some(Tok::LBrace),
                '}' => Some(Tok::RBrace),
                ',' => Some(Tok::Comma),
                ':' => Some(Tok::Colon),
                '=' => Some(Tok::Equals),
                '@' => Some(Tok::At),
                _ => None,
            };
            if let Some(tok) = single {
                out.push(Token { tok, pos });
                i += 1;
                continue;
            }
            if c == '.' && chars.get(i + 1) == Some(&'.') {
                out.push(Token { tok: Tok::DotDot, pos });
                i += 2;
                continue;
            }
            if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Ident(chars[start..i].iter().collect()),
                    pos,
                });
                continue;
            }
            if c.is_ascii_digit() || c == '-' || c == '+' {
                let start = i;
                i += 1;
                while i < chars.len() {
                    let d = chars[i];
                    let exp_sign = (d == '-' || d == '+') && matches!(chars[i - 1], 'e' | 'E');
                    let dot = d == '.' && chars.get(i + 1) != Some(&'.');
                    if d.is_ascii_alphanumeric() || d == '_' || dot || exp_sign {
                        i += 1;
                    } else {
                        break;
                    }
                }
                let s: String = chars[start..i].iter().collect();
                if s == "-" || s == "+" {
                    return Err(KbError::at(pos, KbErrorKind::Lexical(c)));
                }
                out.push(Token {
                    tok: Tok::Number(s),
                    pos,
                });
                continue;
            }
            return Err(KbError::at(pos, KbErrorKind::Lexical(c)));
        }
        out.push(Token {
            tok: Tok::Newline,
            pos: Pos {
                line: ln + 1,
                col: chars.len() + 1,
            },
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser

const KEYWORDS: &[&str] = &[
    "domain", "pred", "rule", "forall", "exists", "and", "or", "not", "implies", "in",
];

struct Parser {
    tokens: Vec<Token>,
    at: usize,
    formulas: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.at).map(|t| &t.tok)
    }

    fn pos(&self) -> Pos {
        self.tokens
            .get(self.at)
            .or_else(|| self.tokens.last())
            .map(|t| t.pos)
            .unwrap_or_default()
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.at).cloned();
        self.at += 1;
        t
    }

    fn syntax<T>(&self, msg: impl Into<String>) -> Result<T, KbError> {
        Err(KbError::at(self.pos(), KbErrorKind::Syntax(msg.into())))
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<Pos, KbError> {
        if self.peek() == Some(&tok) {
            Ok(self.bump().map(|t| t.pos).unwrap_or_default())
        } else {
            self.syntax(format!("expected {what}"))
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(s)) if s == kw)
    }

    fn ident(&mut self, what: &str) -> Result<(String, Pos), KbError> {
        match self.peek() {
            Some(Tok::Ident(s)) if !KEYWORDS.contains(&s.as_str()) => {
                let s = s.clone();
                let pos = self.bump().map(|t| t.pos).unwrap_or_default();
                Ok((s, pos))
            }
            _ => self.syntax(format!("expected {what}")),
        }
    }

    /// Identifier or integer-like constant.
    fn constant(&mut self) -> Result<String, KbError> {
        match self.peek() {
            Some(Tok::Number(s)) => {
                let s = s.clone();
                self.bump();
                Ok(s)
            }
            _ => self.ident("constant").map(|(s, _)| s),
        }
    }

    fn end_of_statement(&mut self) -> Result<(), KbError> {
        match self.peek() {
            None => Ok(()),
            Some(Tok::Newline) => {
                self.bump();
                Ok(())
            }
            _ => self.syntax("expected end of line"),
        }
    }

    fn knowledge_base(&mut self) -> Result<KnowledgeBase, KbError> {
        let mut kb = KnowledgeBase::default();
        while let Some(tok) = self.peek() {
            match tok {
                Tok::Newline => {
                    self.bump();
                }
                Tok::Ident(s) if s == "domain" => kb.domains.push(self.domain()?),
                Tok::Ident(s) if s == "pred" => kb.predicates.push(self.predicate()?),
                Tok::Ident(s) if s == "rule" => kb.formulas.push(self.rule()?),
                _ => return self.syntax("expected 'domain', 'pred' or 'rule'"),
            }
        }
        Ok(kb)
    }

    fn domain(&mut self) -> Result<DomainDecl, KbError> {
        let pos = self.pos();
        self.bump();
        let (name, _) = self.ident("domain name")?;
        if self.peek() != Some(&Tok::Equals) {
            self.end_of_statement()?;
            return Ok(DomainDecl {
                name,
                constants: Vec::new(),
                external: true,
                pos,
            });
        }
        self.bump();
        self.expect(Tok::LBrace, "'{'")?;
        let mut constants = Vec::new();
        if self.peek() != Some(&Tok::RBrace) {
            loop {
                let first = self.constant()?;
                if self.peek() == Some(&Tok::DotDot) {
                    self.bump();
                    let last = self.constant()?;
                    match (first.parse::<i64>(), last.parse::<i64>()) {
                        (Ok(a), Ok(b)) if a <= b => constants.extend((a..=b).map(|i| i.to_string())),
                        _ => return self.syntax("range bounds must be increasing integers"),
                    }
                } else {
                    constants.push(first);
                }
                if self.peek() == Some(&Tok::Comma) {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RBrace, "'}'")?;
        self.end_of_statement()?;
        Ok(DomainDecl {
            name,
            constants,
            external: false,
            pos,
        })
    }

    fn predicate(&mut self) -> Result<PredicateSig, KbError> {
        let pos = self.pos();
        self.bump();
        let (name, npos) = self.ident("predicate name")?;
        if Builtin::from_name(&name).is_some() {
            return Err(KbError::at(npos, KbErrorKind::ReservedName(name)));
        }
        let mut arg_domains = Vec::new();
        if self.peek() == Some(&Tok::LParen) {
            self.bump();
            if self.peek() != Some(&Tok::RParen) {
                loop {
                    arg_domains.push(self.ident("domain name")?.0);
                    if self.peek() == Some(&Tok::Comma) {
                        self.bump();
                    } else {
                        break;
                    }
                }
            }
            self.expect(Tok::RParen, "')'")?;
        }
        let kind = match self.peek() {
            Some(Tok::Ident(s)) if s == "learnable" => {
                self.bump();
                PredicateKind::Learnable
            }
            Some(Tok::Ident(s)) if s == "evidence" => {
                self.bump();
                PredicateKind::Evidence
            }
            _ => PredicateKind::Learnable,
        };
        self.end_of_statement()?;
        Ok(PredicateSig {
            name,
            arg_domains,
            kind,
            pos,
        })
    }

    fn rule(&mut self) -> Result<Formula, KbError> {
        let pos = self.pos();
        self.bump();
        let mut weight = WeightMode::Trainable;
        if self.peek() == Some(&Tok::At) {
            self.bump();
            if !self.is_keyword("fixed") {
                return self.syntax("expected 'fixed'");
            }
            self.bump();
            self.expect(Tok::LParen, "'('")?;
            let value = match self.bump().map(|t| t.tok) {
                Some(Tok::Number(s)) => s.parse::<f64>().ok(),
                _ => None,
            };
            let Some(value) = value.filter(|v| v.is_finite()) else {
                self.at -= 1;
                return self.syntax("expected a finite weight");
            };
            self.expect(Tok::RParen, "')'")?;
            weight = WeightMode::Fixed(value);
        }
        self.expect(Tok::Colon, "':'")?;
        let mut prefix = Vec::new();
        while self.is_keyword("forall") || self.is_keyword("exists") {
            let quantifier = if self.is_keyword("forall") {
                Quantifier::Forall
            } else {
                Quantifier::Exists
            };
            self.bump();
            let (variable, _) = self.ident("variable")?;
            let mut domain = String::new();
            if self.is_keyword("in") {
                self.bump();
                domain = self.ident("domain name")?.0;
            }
            prefix.push(QuantifiedVar {
                quantifier,
                variable,
                domain,
            });
        }
        if !prefix.is_empty() {
            self.expect(Tok::Colon, "':' after the quantifier prefix")?;
        }
        let vars: HashSet<String> = prefix.iter().map(|q| q.variable.clone()).collect();
        let body = self.implication(&vars)?;
        self.end_of_statement()?;
        let id = self.formulas;
        self.formulas += 1;
        Ok(Formula {
            id,
            prefix,
            body,
            weight,
            pos,
        })
    }

    fn implication(&mut self, vars: &HashSet<String>) -> Result<Expr, KbError> {
        let lhs = self.disjunction(vars)?;
        if self.is_keyword("implies") {
            self.bump();
            let rhs = self.implication(vars)?;
            return Ok(Expr::Implies(Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn disjunction(&mut self, vars: &HashSet<String>) -> Result<Expr, KbError> {
        let mut lhs = self.conjunction(vars)?;
        while self.is_keyword("or") {
            self.bump();
            let rhs = self.conjunction(vars)?;
            lhs = Expr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn conjunction(&mut self, vars: &HashSet<String>) -> Result<Expr, KbError> {
        let mut lhs = self.unary(vars)?;
        while self.is_keyword("and") {
            self.bump();
            let rhs = self.unary(vars)?;
            lhs = Expr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self, vars: &HashSet<String>) -> Result<Expr, KbError> {
        if self.is_keyword("not") {
            self.bump();
            return Ok(Expr::Not(Box::new(self.unary(vars)?)));
        }
        if self.peek() == Some(&Tok::LParen) {
            self.bump();
            let e = self.implication(vars)?;
            self.expect(Tok::RParen, "')'")?;
            return Ok(e);
        }
        let (predicate, pos) = self.ident("atom")?;
        let mut args = Vec::new();
        if self.peek() == Some(&Tok::LParen) {
            self.bump();
            if self.peek() != Some(&Tok::RParen) {
                loop {
                    let name = self.constant()?;
                    args.push(if vars.contains(&name) {
                        Term::Var(name)
                    } else {
                        Term::Const(name)
                    });
                    if self.peek() == Some(&Tok::Comma) {
                        self.bump();
                    } else {
                        break;
                    }
                }
            }
            self.expect(Tok::RParen, "')'")?;
        }
        Ok(Expr::Atom(Atom { predicate, args, pos }))
    }
}

// ---------------------------------------------------------------------------
// Pretty printing (re-parses to a structurally identical AST)

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.predicate)?;
        if !self.args.is_empty() {
            let args: Vec<&str> = self.args.iter().map(Term::name).collect();
            write!(f, "({})", args.join(", "))?;
        }
        Ok(())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Atom(a) => write!(f, "{a}"),
            Expr::Not(e) => match **e {
                Expr::Atom(_) | Expr::Not(_) => write!(f, "not {e}"),
                _ => write!(f, "not ({e})"),
            },
            Expr::And(a, b) => write!(f, "({a} and {b})"),
            Expr::Or(a, b) => write!(f, "({a} or {b})"),
            Expr::Implies(a, b) => write!(f, "({a} implies {b})"),
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rule")?;
        if let WeightMode::Fixed(w) = self.weight {
            write!(f, " @fixed({w:?})")?;
        }
        write!(f, ":")?;
        for q in &self.prefix {
            let kw = match q.quantifier {
                Quantifier::Forall => "forall",
                Quantifier::Exists => "exists",
            };
            write!(f, " {kw} {} in {}", q.variable, q.domain)?;
        }
        if !self.prefix.is_empty() {
            write!(f, ":")?;
        }
        write!(f, " {}", self.body)
    }
}

impl fmt::Display for KnowledgeBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.domains {
            if d.external {
                writeln!(f, "domain {}", d.name)?;
            } else {
                writeln!(f, "domain {} = {{{}}}", d.name, d.constants.join(", "))?;
            }
        }
        for p in &self.predicates {
            let kind = match p.kind {
                PredicateKind::Learnable => "learnable",
                PredicateKind::Evidence => "evidence",
                PredicateKind::Builtin => "builtin",
            };
            if p.arg_domains.is_empty() {
                writeln!(f, "pred {} {kind}", p.name)?;
            } else {
                writeln!(f, "pred {}({}) {kind}", p.name, p.arg_domains.join(", "))?;
            }
        }
        for r in &self.formulas {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CITESEER: &str = "\
domain paper
pred AG(paper) learnable
pred AI(paper) learnable
pred DB(paper) learnable
pred IR(paper) learnable
pred ML(paper) learnable
pred HCI(paper) learnable
pred Cite(paper, paper) evidence
rule: forall p1 forall p2: AG(p1) and Cite(p1,p2) implies AG(p2)
rule: forall p1 forall p2: AI(p1) and Cite(p1,p2) implies AI(p2)
rule: forall p1 forall p2: DB(p1) and Cite(p1,p2) implies DB(p2)
rule: forall p1 forall p2: IR(p1) and Cite(p1,p2) implies IR(p2)
rule: forall p1 forall p2: ML(p1) and Cite(p1,p2) implies ML(p2)
rule: forall p1 forall p2: HCI(p1) and Cite(p1,p2) implies HCI(p2)
";

    #[test]
    fn parses_citation_rule() {
        let kb = parse_kb(CITESEER).unwrap();
        let f = &kb.formulas[0];
        assert_eq!(f.prefix.len(), 2);
        assert_eq!(f.body.atoms().len(), 3);
        assert_eq!(f.prefix[0].domain, "paper");
        // (AG and Cite) implies AG
        match &f.body {
            Expr::Implies(lhs, rhs) => {
                assert!(matches!(**lhs, Expr::And(_, _)));
                assert!(matches!(**rhs, Expr::Atom(_)));
            }
            other => panic!("unexpected shape {other:?}"),
        }
        assert!(validate_kb(&kb).is_empty());
    }

    #[test]
    fn minimal_rule() {
        let kb = parse_kb("domain d = {a, b}\npred A(d)\nrule: forall x: A(x)").unwrap();
        assert_eq!(kb.formulas[0].prefix.len(), 1);
        assert_eq!(kb.formulas[0].n_atoms(), 1);
        assert_eq!(kb.predicates[0].kind, PredicateKind::Learnable);
    }

    #[test]
    fn arity_mismatch_is_reported_with_position() {
        let err = parse_kb("domain d = {a}\npred B(d)\nrule: forall x: B(x, x)").unwrap_err();
        assert!(matches!(
            err.kind,
            KbErrorKind::ArityMismatch {
                expected: 1,
                found: 2,
                ..
            }
        ));
        assert_eq!((err.line, err.col), (3, 17));
    }

    #[test]
    fn lexical_error() {
        let err = parse_kb("domain d = {a}\npred A(d) $").unwrap_err();
        assert_eq!(err.kind, KbErrorKind::Lexical('$'));
        assert_eq!((err.line, err.col), (2, 11));
    }

    #[test]
    fn unknown_names() {
        let err = parse_kb("domain d = {a}\npred A(e)").unwrap_err();
        assert_eq!(err.kind, KbErrorKind::UnknownDomain("e".into()));
        let err = parse_kb("domain d = {a}\npred A(d)\nrule: forall x: Z(x)").unwrap_err();
        assert_eq!(err.kind, KbErrorKind::UnknownPredicate("Z".into()));
    }

    #[test]
    fn unbound_variable_becomes_unknown_constant() {
        // `y` is not quantified, so it is read as a constant and must exist.
        let err = parse_kb("domain d = {a}\npred R(d, d)\nrule: forall x: R(x, y)").unwrap_err();
        assert!(matches!(err.kind, KbErrorKind::UnknownConstant { .. }));
        let err = parse_kb("domain d = {a}\npred A(d)\nrule: forall x forall y: A(x)").unwrap_err();
        assert_eq!(err.kind, KbErrorKind::UntypedVariable("y".into()));
        // builtin arguments may be arbitrary constants
        let kb = parse_kb("domain d = {0..3}\nrule: forall x in d: succ(x, 2)").unwrap();
        let atoms = kb.formulas[0].body.atoms();
        assert_eq!(atoms[0].args[1], Term::Const("2".into()));
    }

    #[test]
    fn validate_reports_each_problem() {
        let mut kb = parse_kb(CITESEER).unwrap();
        kb.formulas[0].body = Expr::Atom(Atom {
            predicate: "Nope".into(),
            args: vec![Term::Var("p1".into())],
            pos: Pos::default(),
        });
        assert_eq!(validate_kb(&kb).len(), 1);

        let mut kb = parse_kb("domain d = {a, b}\npred A(d)").unwrap();
        kb.domains[0].constants.push("a".into());
        let diags = validate_kb(&kb);
        assert_eq!(diags.len(), 1);
        assert!(matches!(diags[0].kind, KbErrorKind::DuplicateConstant { .. }));
    }

    #[test]
    fn precedence_and_associativity() {
        let kb = parse_kb(
            "domain d = {a}\npred A(d)\npred B(d)\npred C(d)\n\
             rule: forall x: not A(x) or B(x) and C(x) implies A(x) implies B(x)",
        )
        .unwrap();
        let shown = kb.formulas[0].body.to_string();
        assert_eq!(shown, "((not A(x) or (B(x) and C(x))) implies (A(x) implies B(x)))");
    }

    #[test]
    fn fixed_weights_and_ranges() {
        let kb = parse_kb(
            "domain img\ndomain cls = {0..9}\npred digit(img, cls) learnable\npred link(img, img) evidence\n\
             rule @fixed(2.5): forall x forall y forall i forall j: link(x,y) and digit(x,i) and digit(y,j) implies succ(i,j)",
        )
        .unwrap();
        assert_eq!(kb.domain("cls").unwrap().constants.len(), 10);
        assert!(kb.domain("img").unwrap().external);
        assert_eq!(kb.formulas[0].weight, WeightMode::Fixed(2.5));
        assert_eq!(kb.formulas[0].n_atoms(), 3);
        assert_eq!(kb.formulas[0].variable("i").unwrap().domain, "cls");
    }

    #[test]
    fn clique_limit() {
        let text = "domain d = {a}\npred A(d)\npred B(d)\npred C(d)\nrule: forall x: A(x) and B(x) and C(x)";
        let opts = ParseOptions {
            clique_limit: 2,
            pseudo_likelihood: false,
        };
        let err = parse_kb_with(text, &opts).unwrap_err();
        assert_eq!(err.kind, KbErrorKind::CliqueLimit { found: 3, limit: 2 });
        let opts = ParseOptions {
            clique_limit: 2,
            pseudo_likelihood: true,
        };
        assert!(parse_kb_with(text, &opts).is_ok());
    }

    #[test]
    fn builtins_cannot_be_declared() {
        let err = parse_kb("domain d = {a}\npred succ(d, d)").unwrap_err();
        assert_eq!(err.kind, KbErrorKind::ReservedName("succ".into()));
    }

    #[test]
    fn builtin_semantics() {
        assert!(Builtin::Succ.eval("3", "4"));
        assert!(!Builtin::Succ.eval("4", "3"));
        assert!(!Builtin::Succ.eval("a", "b"));
        assert!(Builtin::Eq.eval("a", "a"));
    }

    #[test]
    fn round_trip_citation_kb() {
        let kb = parse_kb(CITESEER).unwrap();
        let again = parse_kb(&kb.to_string()).unwrap();
        assert_eq!(kb, again);
    }
}
