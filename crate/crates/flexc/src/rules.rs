//! Rewrite rules: pattern pairs over DFG shapes, the four built-in
//! rulesets, pattern matching and destructive application on concrete DFGs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::dfg::{Dfg, Node, NodeId, OpKind, Payload};

/// One node of a pattern graph.  Children refer to earlier indices in the
/// pattern's node list, so a pattern is acyclic by construction.
#[derive(Debug, Clone, PartialEq)]
pub enum PatternNode {
    Var(String),
    IntLit(i32),
    FloatLit(f64),
    Op(OpKind, Vec<usize>),
}

/// A DFG-shaped graph whose leaves may be variables or literals, plus a
/// nonempty list of designated output nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    pub nodes: Vec<PatternNode>,
    pub outputs: Vec<usize>,
}

impl Pattern {
    pub fn vars(&self) -> HashSet<String> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                PatternNode::Var(v) => Some(v.clone()),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RulesetKind {
    Int,
    Fp,
    Bool,
    Stochastic,
}

impl RulesetKind {
    pub const ALL: &'static [RulesetKind] = &[
        RulesetKind::Int,
        RulesetKind::Fp,
        RulesetKind::Bool,
        RulesetKind::Stochastic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RulesetKind::Int => "int",
            RulesetKind::Fp => "fp",
            RulesetKind::Bool => "bool",
            RulesetKind::Stochastic => "stochastic",
        }
    }

    pub fn from_name(s: &str) -> Option<RulesetKind> {
        RulesetKind::ALL.iter().copied().find(|k| k.name() == s)
    }

    pub fn default_semantics(self) -> SemanticsClass {
        match self {
            RulesetKind::Int => SemanticsClass::Exact,
            RulesetKind::Fp => SemanticsClass::FpRelaxed,
            RulesetKind::Bool => SemanticsClass::BooleanDomain,
            RulesetKind::Stochastic => SemanticsClass::Stochastic,
        }
    }
}

impl fmt::Display for RulesetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How strong an equality a rule promises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemanticsClass {
    /// Bit-exact over the rule's validity domain.
    Exact,
    /// Relative error bounded on finite normal doubles.
    FpRelaxed,
    /// Exact when all logical operands are 0 or 1.
    BooleanDomain,
    /// Approximation by design; exempt from interpreter equivalence.
    Stochastic,
}

/// Sampling domain for a pattern variable, used by the equivalence tester.
/// Matching itself is unconditional; this documents (and tests within) the
/// domain on which the rule is sound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarDomain {
    FullInt,
    NonNegInt,
    /// 0..=31
    ShiftAmount,
    /// 0 or 1
    BoolInt,
    /// finite normal double, magnitude in a moderate range
    FloatNormal,
    /// like FloatNormal but bounded away from zero (reciprocal rules)
    FloatNonTiny,
}

/// An oriented rewrite rule l => r.
#[derive(Debug, Clone, PartialEq)]
pub struct RewriteRule {
    pub name: String,
    pub lhs: Pattern,
    pub rhs: Pattern,
    pub ruleset: RulesetKind,
    pub semantics: SemanticsClass,
    /// Per-variable sampling domain; variables not listed default to the
    /// ruleset's natural domain.
    pub domains: Vec<(String, VarDomain)>,
}

impl RewriteRule {
    pub fn domain_of(&self, var: &str) -> VarDomain {
        self.domains
            .iter()
            .find(|(v, _)| v == var)
            .map(|(_, d)| *d)
            .unwrap_or(match self.semantics {
                SemanticsClass::FpRelaxed => VarDomain::FloatNormal,
                SemanticsClass::BooleanDomain => VarDomain::BoolInt,
                _ => VarDomain::FullInt,
            })
    }
}

/// A match of a rule's left-hand side in a concrete DFG.
#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    /// Matched DFG nodes corresponding positionally to the lhs outputs.
    pub matched_outputs: Vec<NodeId>,
    /// Variable -> matched DFG node.
    pub substitution: BTreeMap<String, NodeId>,
    /// Loop-carried delay of the edge each variable was reached through.
    pub delays: BTreeMap<String, u32>,
    /// Per lhs pattern node, the DFG node it matched.  Used for staleness
    /// checks and replacement.
    binding: Vec<Option<NodeId>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum RuleParseError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("variable `?{0}` on the right-hand side is not bound on the left")]
    UnboundVariable(String),
    #[error("rule has no `=>` or `<=>`")]
    MissingArrow,
    #[error("unknown ruleset `{0}`")]
    UnknownRuleset(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum ApplyError {
    #[error("match is stale: the graph changed since matching")]
    StaleMatch,
    #[error("applying the rule produced an invalid graph")]
    InvalidResult,
}

// ---------------------------------------------------------------------------
// Rule text parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Var(String),
    Int(i64),
    Float(f64),
    Ident(String),
    Sym(&'static str),
}

fn lex(text: &str) -> Result<Vec<Tok>, RuleParseError> {
    let mut toks = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '?' {
            let start = i + 1;
            let mut j = start;
            while j < chars.len() && (chars[j].is_alphanumeric() || chars[j] == '_') {
                j += 1;
            }
            if j == start {
                return Err(RuleParseError::Syntax("`?` without variable name".into()));
            }
            toks.push(Tok::Var(chars[start..j].iter().collect()));
            i = j;
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            let mut j = i;
            while j < chars.len() && chars[j].is_ascii_digit() {
                j += 1;
            }
            if j < chars.len() && chars[j] == '.' {
                j += 1;
                while j < chars.len() && chars[j].is_ascii_digit() {
                    j += 1;
                }
                let s: String = chars[start..j].iter().collect();
                toks.push(Tok::Float(s.parse().map_err(|_| {
                    RuleParseError::Syntax(format!("bad float literal `{s}`"))
                })?));
            } else {
                let s: String = chars[start..j].iter().collect();
                toks.push(Tok::Int(s.parse().map_err(|_| {
                    RuleParseError::Syntax(format!("bad integer literal `{s}`"))
                })?));
            }
            i = j;
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = i;
            let mut j = i;
            while j < chars.len() && (chars[j].is_alphanumeric() || chars[j] == '_') {
                j += 1;
            }
            let word: String = chars[start..j].iter().collect();
            match word.as_str() {
                "and" => toks.push(Tok::Sym("&")),
                "or" => toks.push(Tok::Sym("|")),
                "xor" => toks.push(Tok::Sym("^")),
                "not" => toks.push(Tok::Sym("~")),
                _ => toks.push(Tok::Ident(word)),
            }
            i = j;
            continue;
        }
        let rest: String = chars[i..chars.len().min(i + 3)].iter().collect();
        let sym: &'static str = if rest.starts_with("<=>") {
            "<=>"
        } else if rest.starts_with("=>") {
            "=>"
        } else if rest.starts_with("<<") {
            "<<"
        } else if rest.starts_with(">>") {
            ">>"
        } else if rest.starts_with("<=") {
            "<="
        } else if rest.starts_with(">=") {
            ">="
        } else if rest.starts_with("==") {
            "=="
        } else if rest.starts_with("!=") {
            "!="
        } else {
            match c {
                '+' => "+",
                '-' => "-",
                '*' => "*",
                '/' => "/",
                '&' => "&",
                '|' => "|",
                '^' => "^",
                '~' => "~",
                '<' => "<",
                '>' => ">",
                '(' => "(",
                ')' => ")",
                ',' => ",",
                _ => {
                    return Err(RuleParseError::Syntax(format!(
                        "unexpected character `{c}`"
                    )))
                }
            }
        };
        toks.push(Tok::Sym(sym));
        i += sym.len();
    }
    Ok(toks)
}

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Var(String),
    Int(i32),
    Float(f64),
    Op(OpKind, Vec<Expr>),
}

struct Parser<'a> {
    toks: &'a [Tok],
    pos: usize,
}

fn infix_power(sym: &str) -> Option<(u8, OpKind)> {
    Some(match sym {
        "|" => (10, OpKind::Or),
        "^" => (20, OpKind::Xor),
        "&" => (30, OpKind::And),
        "==" => (40, OpKind::Eq),
        "!=" => (40, OpKind::Ne),
        "<" => (50, OpKind::Lt),
        ">" => (50, OpKind::Gt),
        "<=" => (50, OpKind::Le),
        ">=" => (50, OpKind::Ge),
        "<<" => (60, OpKind::Shl),
        ">>" => (60, OpKind::Shr),
        "+" => (70, OpKind::Add),
        "-" => (70, OpKind::Sub),
        "*" => (80, OpKind::Mul),
        "/" => (80, OpKind::Div),
        _ => return None,
    })
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect_sym(&mut self, sym: &str) -> Result<(), RuleParseError> {
        match self.next() {
            Some(Tok::Sym(s)) if s == sym => Ok(()),
            other => Err(RuleParseError::Syntax(format!(
                "expected `{sym}`, found {other:?}"
            ))),
        }
    }

    fn expr(&mut self, min_power: u8) -> Result<Expr, RuleParseError> {
        let mut lhs = self.primary()?;
        while let Some(Tok::Sym(sym)) = self.peek() {
            let Some((power, op)) = infix_power(sym) else {
                break;
            };
            if power < min_power {
                break;
            }
            self.next();
            let rhs = self.expr(power + 1)?;
            lhs = Expr::Op(op, vec![lhs, rhs]);
        }
        Ok(lhs)
    }

    fn primary(&mut self) -> Result<Expr, RuleParseError> {
        match self.next() {
            Some(Tok::Var(v)) => Ok(Expr::Var(v)),
            Some(Tok::Int(v)) => Ok(Expr::Int(v as i32)),
            Some(Tok::Float(v)) => Ok(Expr::Float(v)),
            Some(Tok::Sym("(")) => {
                let e = self.expr(0)?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Some(Tok::Sym("-")) => {
                let e = self.expr(90)?;
                Ok(match e {
                    Expr::Int(v) => Expr::Int(v.wrapping_neg()),
                    Expr::Float(v) => Expr::Float(-v),
                    e => Expr::Op(OpKind::Neg, vec![e]),
                })
            }
            Some(Tok::Sym("~")) => {
                let e = self.expr(90)?;
                Ok(Expr::Op(OpKind::Not, vec![e]))
            }
            Some(Tok::Ident(name)) => {
                let op = OpKind::from_symbol(&name)
                    .ok_or_else(|| RuleParseError::Syntax(format!("unknown op `{name}`")))?;
                self.expect_sym("(")?;
                let mut args = Vec::new();
                if self.peek() != Some(&Tok::Sym(")")) {
                    loop {
                        args.push(self.expr(0)?);
                        match self.next() {
                            Some(Tok::Sym(",")) => continue,
                            Some(Tok::Sym(")")) => break,
                            other => {
                                return Err(RuleParseError::Syntax(format!(
                                    "expected `,` or `)`, found {other:?}"
                                )))
                            }
                        }
                    }
                } else {
                    self.next();
                }
                if op == OpKind::Fconst {
                    // fconst(1.5) sugar for a float literal
                    match args.as_slice() {
                        [Expr::Float(v)] => return Ok(Expr::Float(*v)),
                        [Expr::Int(v)] => return Ok(Expr::Float(*v as f64)),
                        _ => {
                            return Err(RuleParseError::Syntax(
                                "fconst takes one literal".into(),
                            ))
                        }
                    }
                }
                if args.len() != op.arity() {
                    return Err(RuleParseError::Syntax(format!(
                        "`{name}` takes {} arguments, got {}",
                        op.arity(),
                        args.len()
                    )));
                }
                Ok(Expr::Op(op, args))
            }
            other => Err(RuleParseError::Syntax(format!(
                "unexpected token {other:?}"
            ))),
        }
    }
}

fn expr_to_pattern(expr: &Expr, nodes: &mut Vec<PatternNode>) -> usize {
    let node = match expr {
        Expr::Var(v) => PatternNode::Var(v.clone()),
        Expr::Int(v) => PatternNode::IntLit(*v),
        Expr::Float(v) => PatternNode::FloatLit(*v),
        Expr::Op(op, args) => {
            let children = args.iter().map(|a| expr_to_pattern(a, nodes)).collect();
            PatternNode::Op(*op, children)
        }
    };
    nodes.push(node);
    nodes.len() - 1
}

fn parse_pattern(toks: &[Tok]) -> Result<Pattern, RuleParseError> {
    let mut p = Parser { toks, pos: 0 };
    let expr = p.expr(0)?;
    if p.pos != toks.len() {
        return Err(RuleParseError::Syntax("trailing tokens".into()));
    }
    let mut nodes = Vec::new();
    let root = expr_to_pattern(&expr, &mut nodes);
    Ok(Pattern {
        nodes,
        outputs: vec![root],
    })
}

fn make_rule(
    name: String,
    lhs: Pattern,
    rhs: Pattern,
    ruleset: RulesetKind,
    domains: Vec<(String, VarDomain)>,
) -> Result<RewriteRule, RuleParseError> {
    let lvars = lhs.vars();
    for v in rhs.vars() {
        if !lvars.contains(&v) {
            return Err(RuleParseError::UnboundVariable(v));
        }
    }
    if lhs.outputs.len() != rhs.outputs.len() {
        return Err(RuleParseError::Syntax(
            "lhs and rhs output counts differ".into(),
        ));
    }
    Ok(RewriteRule {
        name,
        lhs,
        rhs,
        ruleset,
        semantics: ruleset.default_semantics(),
        domains,
    })
}

/// Parse one rule line.  `lhs => rhs` yields one oriented rule,
/// `lhs <=> rhs` yields the forward and reverse orientations.
pub fn parse_rule(
    text: &str,
    name: &str,
    ruleset: RulesetKind,
) -> Result<Vec<RewriteRule>, RuleParseError> {
    parse_rule_with_domains(text, name, ruleset, Vec::new())
}

pub fn parse_rule_with_domains(
    text: &str,
    name: &str,
    ruleset: RulesetKind,
    domains: Vec<(String, VarDomain)>,
) -> Result<Vec<RewriteRule>, RuleParseError> {
    let toks = lex(text)?;
    let bidi = toks.iter().position(|t| t == &Tok::Sym("<=>"));
    let arrow = toks.iter().position(|t| t == &Tok::Sym("=>"));
    match (bidi, arrow) {
        (Some(i), _) => {
            let lhs = parse_pattern(&toks[..i])?;
            let rhs = parse_pattern(&toks[i + 1..])?;
            let fwd = make_rule(
                format!("{name}-fwd"),
                lhs.clone(),
                rhs.clone(),
                ruleset,
                domains.clone(),
            )?;
            let rev = make_rule(format!("{name}-rev"), rhs, lhs, ruleset, domains)?;
            Ok(vec![fwd, rev])
        }
        (None, Some(i)) => {
            let lhs = parse_pattern(&toks[..i])?;
            let rhs = parse_pattern(&toks[i + 1..])?;
            Ok(vec![make_rule(name.to_string(), lhs, rhs, ruleset, domains)?])
        }
        (None, None) => Err(RuleParseError::MissingArrow),
    }
}

/// Parse a ruleset file: one rule per line, `[ruleset:NAME]` section
/// headers, `#` comments.
pub fn parse_ruleset_file(text: &str) -> Result<Vec<RewriteRule>, RuleParseError> {
    let mut rules = Vec::new();
    let mut current = RulesetKind::Int;
    let mut counter = 0usize;
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("[ruleset:") {
            let name = rest.strip_suffix(']').ok_or_else(|| {
                RuleParseError::Syntax(format!("malformed section header `{line}`"))
            })?;
            current = RulesetKind::from_name(name)
                .ok_or_else(|| RuleParseError::UnknownRuleset(name.to_string()))?;
            continue;
        }
        counter += 1;
        let name = format!("{}-{counter}", current.name());
        rules.extend(parse_rule(line, &name, current)?);
    }
    Ok(rules)
}

// ---------------------------------------------------------------------------
// Built-in rulesets
// ---------------------------------------------------------------------------

/// Rules present in the source tables but shipped disabled, with the reason.
pub const DISABLED_RULES: &[(&str, &str, &str)] = &[
    (
        "fneg-as-int-add",
        "fneg(?x) => ?x + 2^32",
        "the intended integer bit manipulation is ambiguous as written \
         (a sign-bit flip would be xor with 2^31); disabled rather than guessed",
    ),
    (
        "shl-as-mul-lut",
        "?x << ?y => mul(?x, load(select(?y > 32, 33, ?y)))",
        "presupposes a power-of-two lookup table in memory whose \
         initialization is unspecified; disabled",
    ),
];

fn rule(
    text: &str,
    name: &str,
    ruleset: RulesetKind,
    domains: &[(&str, VarDomain)],
) -> Vec<RewriteRule> {
    let domains = domains
        .iter()
        .map(|(v, d)| (v.to_string(), *d))
        .collect();
    parse_rule_with_domains(text, name, ruleset, domains)
        .unwrap_or_else(|e| panic!("builtin rule `{name}` failed to parse: {e}"))
}

/// The curated built-in ruleset for `name`.
pub fn builtin_ruleset(name: RulesetKind) -> Vec<RewriteRule> {
    let mut rules = Vec::new();
    match name {
        RulesetKind::Int => {
            rules.extend(rule("?x - ?y <=> ?x + (- ?y)", "sub-as-add-neg", name, &[]));
            rules.extend(rule(
                "?x >> ?y <=> ?x / (1 << ?y)",
                "shr-as-div-pow2",
                name,
                &[("x", VarDomain::NonNegInt), ("y", VarDomain::ShiftAmount)],
            ));
            rules.extend(rule(
                "?x & ?y <=> ~((~ ?x) | (~ ?y))",
                "and-demorgan",
                name,
                &[],
            ));
            rules.extend(rule("?x * -1 <=> - ?x", "mul-neg-one", name, &[]));
            rules.extend(rule(
                "- ?x <=> (?x ^ -1) + 1",
                "neg-twos-complement",
                name,
                &[],
            ));
            for k in 1..=3u32 {
                rules.extend(rule(
                    &format!("?x * {} <=> ?x << {k}", 1i32 << k),
                    &format!("mul-pow2-shl-{k}"),
                    name,
                    &[],
                ));
                rules.extend(rule(
                    &format!("?x / {} <=> ?x >> {k}", 1i32 << k),
                    &format!("div-pow2-shr-{k}"),
                    name,
                    &[("x", VarDomain::NonNegInt)],
                ));
            }
            rules.extend(rule("?x * 1 => ?x", "mul-one", name, &[]));
        }
        RulesetKind::Fp => {
            rules.extend(rule(
                "fmul(?x, ?y) <=> fdiv(?x, fdiv(1.0, ?y))",
                "fmul-as-recip-div",
                name,
                &[
                    ("x", VarDomain::FloatNormal),
                    ("y", VarDomain::FloatNonTiny),
                ],
            ));
            rules.extend(rule(
                "fmul(-1.0, ?x) <=> fneg(?x)",
                "fmul-neg-one",
                name,
                &[],
            ));
        }
        RulesetKind::Bool => {
            rules.extend(rule("?x & ?y => ?x * ?y", "bool-and-as-mul", name, &[]));
            rules.extend(rule(
                "?x | ?y => (?x + ?y) > 0",
                "bool-or-as-sum-gt",
                name,
                &[],
            ));
            rules.extend(rule("?x ^ ?y => ?x != ?y", "bool-xor-as-ne", name, &[]));
        }
        RulesetKind::Stochastic => {
            rules.extend(rule("?x * ?y => ?x & ?y", "stoch-mul-as-and", name, &[]));
            rules.extend(rule(
                "?x * ?y => isc_mul(?x, ?y)",
                "stoch-mul-as-isc",
                name,
                &[],
            ));
        }
    }
    rules
}

/// All rules of the requested rulesets, in ruleset order.
pub fn rules_for(kinds: &[RulesetKind]) -> Vec<RewriteRule> {
    let mut out = Vec::new();
    for k in RulesetKind::ALL {
        if kinds.contains(k) {
            out.extend(builtin_ruleset(*k));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

struct MatchState {
    subst: BTreeMap<String, NodeId>,
    delays: BTreeMap<String, u32>,
    binding: Vec<Option<NodeId>>,
}

fn match_node(
    d: &Dfg,
    pat: &Pattern,
    pidx: usize,
    node: NodeId,
    delay: u32,
    st: &mut MatchState,
) -> bool {
    match &pat.nodes[pidx] {
        PatternNode::Var(v) => {
            if let Some(&bound) = st.subst.get(v) {
                if bound != node || st.delays[v] != delay {
                    return false;
                }
            } else {
                st.subst.insert(v.clone(), node);
                st.delays.insert(v.clone(), delay);
            }
            st.binding[pidx] = Some(node);
            true
        }
        PatternNode::IntLit(k) => {
            if delay != 0 {
                return false;
            }
            let n = d.node(node);
            if n.op == OpKind::Const && n.payload == Some(Payload::IntLit(*k)) {
                st.binding[pidx] = Some(node);
                true
            } else {
                false
            }
        }
        PatternNode::FloatLit(k) => {
            if delay != 0 {
                return false;
            }
            let n = d.node(node);
            let matches = n.op == OpKind::Fconst
                && matches!(n.payload, Some(Payload::FloatLit(v)) if v.to_bits() == k.to_bits());
            if matches {
                st.binding[pidx] = Some(node);
            }
            matches
        }
        PatternNode::Op(op, children) => {
            // Structural matching never crosses a loop-carried edge.
            if delay != 0 {
                return false;
            }
            let n = d.node(node);
            if n.op != *op || n.operands.len() != children.len() {
                return false;
            }
            // DAG-shaped patterns must bind consistently.
            if let Some(prev) = st.binding[pidx] {
                return prev == node;
            }
            st.binding[pidx] = Some(node);
            let children = children.clone();
            for (i, &c) in children.iter().enumerate() {
                let operand = n.operands[i];
                let edge_delay = d.distance(node, operand);
                if !match_node(d, pat, c, operand, edge_delay, st) {
                    return false;
                }
            }
            true
        }
    }
}

fn match_outputs(
    d: &Dfg,
    pat: &Pattern,
    out_idx: usize,
    st: MatchState,
    roots: &mut Vec<NodeId>,
    results: &mut Vec<Match>,
) {
    if out_idx == pat.outputs.len() {
        results.push(Match {
            matched_outputs: roots.clone(),
            substitution: st.subst,
            delays: st.delays,
            binding: st.binding,
        });
        return;
    }
    for root in d.node_ids() {
        let mut next = MatchState {
            subst: st.subst.clone(),
            delays: st.delays.clone(),
            binding: st.binding.clone(),
        };
        if match_node(d, pat, pat.outputs[out_idx], root, 0, &mut next) {
            roots.push(root);
            match_outputs(d, pat, out_idx + 1, next, roots, results);
            roots.pop();
        }
    }
}

/// Every structural occurrence of `rule.lhs` in `d`, in deterministic order
/// (ascending root ids).
pub fn find_matches(d: &Dfg, rule: &RewriteRule) -> Vec<Match> {
    let mut results = Vec::new();
    let st = MatchState {
        subst: BTreeMap::new(),
        delays: BTreeMap::new(),
        binding: vec![None; rule.lhs.nodes.len()],
    };
    match_outputs(d, &rule.lhs, 0, st, &mut Vec::new(), &mut results);
    results
}

// ---------------------------------------------------------------------------
// Application
// ---------------------------------------------------------------------------

fn fresh_name(used: &mut HashSet<String>, counter: &mut usize) -> String {
    loop {
        let name = format!("t{}", *counter);
        *counter += 1;
        if used.insert(name.clone()) {
            return name;
        }
    }
}

/// Replace the matched lhs outputs with instantiated rhs outputs, redirect
/// all external uses, garbage-collect dead nodes, and renumber
/// topologically.
pub fn apply_match(d: &Dfg, m: &Match, rule: &RewriteRule) -> Result<Dfg, ApplyError> {
    // Staleness check: the recorded binding must still describe `d`.
    {
        let mut st = MatchState {
            subst: BTreeMap::new(),
            delays: BTreeMap::new(),
            binding: vec![None; rule.lhs.nodes.len()],
        };
        let mut ok = m.matched_outputs.len() == rule.lhs.outputs.len();
        for (i, &root) in m.matched_outputs.iter().enumerate() {
            if root.index() >= d.nodes.len()
                || !ok
                || !match_node(d, &rule.lhs, rule.lhs.outputs[i], root, 0, &mut st)
            {
                ok = false;
                break;
            }
        }
        if !ok || st.subst != m.substitution || st.delays != m.delays {
            return Err(ApplyError::StaleMatch);
        }
    }

    let mut new = d.clone();
    let mut used: HashSet<String> = new.nodes.iter().map(|n| n.name.clone()).collect();
    let mut counter = 0usize;

    // Instantiate the rhs.  Pattern children come before parents, so one
    // forward pass suffices.  Var references reuse the matched nodes.
    let mut inst: Vec<Option<(NodeId, u32)>> = vec![None; rule.rhs.nodes.len()];
    for (i, pnode) in rule.rhs.nodes.iter().enumerate() {
        let entry = match pnode {
            PatternNode::Var(v) => (m.substitution[v], m.delays[v]),
            PatternNode::IntLit(k) => {
                let id = NodeId(new.nodes.len() as u32);
                new.nodes.push(Node {
                    name: fresh_name(&mut used, &mut counter),
                    op: OpKind::Const,
                    operands: Vec::new(),
                    payload: Some(Payload::IntLit(*k)),
                });
                (id, 0)
            }
            PatternNode::FloatLit(k) => {
                let id = NodeId(new.nodes.len() as u32);
                new.nodes.push(Node {
                    name: fresh_name(&mut used, &mut counter),
                    op: OpKind::Fconst,
                    operands: Vec::new(),
                    payload: Some(Payload::FloatLit(*k)),
                });
                (id, 0)
            }
            PatternNode::Op(op, children) => {
                let id = NodeId(new.nodes.len() as u32);
                let mut operands = Vec::with_capacity(children.len());
                let mut dists = Vec::new();
                for &c in children {
                    let (cid, cdelay) = inst[c].expect("children precede parents");
                    operands.push(cid);
                    if cdelay > 0 {
                        dists.push((cid, cdelay));
                    }
                }
                new.nodes.push(Node {
                    name: fresh_name(&mut used, &mut counter),
                    op: *op,
                    operands,
                    payload: None,
                });
                for (cid, cdelay) in dists {
                    new.edge_distances.insert((id, cid), cdelay);
                }
                (id, 0)
            }
        };
        inst[i] = Some(entry);
    }

    // Redirect every use of each matched output to its replacement.
    for (i, &old_root) in m.matched_outputs.iter().enumerate() {
        let (new_root, root_delay) = inst[rule.rhs.outputs[i]].unwrap();
        if new_root == old_root && root_delay == 0 {
            continue;
        }
        let ids: Vec<NodeId> = new.node_ids().collect();
        for id in ids {
            let operands = new.nodes[id.index()].operands.clone();
            for (slot, &operand) in operands.iter().enumerate() {
                if operand == old_root {
                    new.nodes[id.index()].operands[slot] = new_root;
                    let dist = new
                        .edge_distances
                        .remove(&(id, old_root))
                        .unwrap_or(0);
                    let total = dist + root_delay;
                    if total > 0 {
                        new.edge_distances.insert((id, new_root), total);
                    }
                }
            }
        }
        for out in new.outputs.iter_mut() {
            if *out == old_root {
                *out = new_root;
            }
        }
    }

    Ok(compact(&new).ok_or(ApplyError::InvalidResult)?)
}

/// Garbage-collect nodes unreachable from the outputs and renumber in
/// topological order.  Returns None if the result contains a distance-0
/// cycle.
pub fn compact(d: &Dfg) -> Option<Dfg> {
    let n = d.nodes.len();
    // Reachability over all edges (distance edges keep their producers
    // alive too).
    let mut live = vec![false; n];
    let mut stack: Vec<NodeId> = d.outputs.clone();
    while let Some(id) = stack.pop() {
        if live[id.index()] {
            continue;
        }
        live[id.index()] = true;
        for &operand in &d.node(id).operands {
            stack.push(operand);
        }
    }

    // Kahn over distance-0 edges among live nodes, stable by old id.
    let mut indegree = vec![0usize; n];
    for id in d.node_ids() {
        if !live[id.index()] {
            continue;
        }
        for &operand in &d.node(id).operands {
            if d.distance(id, operand) == 0 {
                indegree[id.index()] += 1;
            }
        }
    }
    let mut order: Vec<NodeId> = Vec::new();
    let mut ready: Vec<NodeId> = d
        .node_ids()
        .filter(|id| live[id.index()] && indegree[id.index()] == 0)
        .collect();
    let mut consumers: Vec<Vec<NodeId>> = vec![Vec::new(); n];
    for id in d.node_ids() {
        if !live[id.index()] {
            continue;
        }
        for &operand in &d.node(id).operands {
            if d.distance(id, operand) == 0 {
                consumers[operand.index()].push(id);
            }
        }
    }
    let mut cursor = 0;
    while cursor < ready.len() {
        ready[cursor..].sort();
        let id = ready[cursor];
        cursor += 1;
        order.push(id);
        for &c in &consumers[id.index()] {
            indegree[c.index()] -= 1;
            if indegree[c.index()] == 0 {
                ready.push(c);
            }
        }
    }
    let live_count = live.iter().filter(|&&l| l).count();
    if order.len() != live_count {
        return None; // distance-0 cycle
    }

    let mut remap: HashMap<NodeId, NodeId> = HashMap::new();
    for (new_idx, &old) in order.iter().enumerate() {
        remap.insert(old, NodeId(new_idx as u32));
    }
    let mut out = Dfg::default();
    for &old in &order {
        let node = d.node(old);
        out.nodes.push(Node {
            name: node.name.clone(),
            op: node.op,
            operands: node.operands.iter().map(|o| remap[o]).collect(),
            payload: node.payload.clone(),
        });
    }
    for (&(c, p), &k) in &d.edge_distances {
        if let (Some(&c2), Some(&p2)) = (remap.get(&c), remap.get(&p)) {
            out.edge_distances.insert((c2, p2), k);
        }
    }
    out.outputs = d.outputs.iter().map(|o| remap[o]).collect();
    Some(out)
}

// ---------------------------------------------------------------------------
// Semantics-class equivalence testing
// ---------------------------------------------------------------------------

/// Instantiate a pattern as a concrete DFG whose variables become inputs
/// named after themselves.
pub fn pattern_to_dfg(p: &Pattern) -> Dfg {
    let mut b = crate::dfg::DfgBuilder::new();
    let mut var_ids: BTreeMap<String, NodeId> = BTreeMap::new();
    let mut ids: Vec<NodeId> = Vec::with_capacity(p.nodes.len());
    for node in &p.nodes {
        let id = match node {
            PatternNode::Var(v) => *var_ids
                .entry(v.clone())
                .or_insert_with(|| b.input(v)),
            PatternNode::IntLit(k) => b.int_const(*k),
            PatternNode::FloatLit(k) => b.float_const(*k),
            PatternNode::Op(op, children) => {
                let operands: Vec<NodeId> = children.iter().map(|&c| ids[c]).collect();
                b.op(*op, &operands)
            }
        };
        ids.push(id);
    }
    for &out in &p.outputs {
        b.output(ids[out]);
    }
    b.finish()
}

fn sample_value(domain: VarDomain, rng: &mut impl rand::Rng) -> crate::dfg::Value {
    use crate::dfg::Value;
    match domain {
        VarDomain::FullInt => {
            // Mix small magnitudes in so boundary behavior gets exercised.
            if rng.gen_bool(0.3) {
                Value::Int(rng.gen_range(-4..=4))
            } else {
                Value::Int(rng.gen())
            }
        }
        VarDomain::NonNegInt => Value::Int(rng.gen::<i32>() & i32::MAX),
        VarDomain::ShiftAmount => Value::Int(rng.gen_range(0..=31)),
        VarDomain::BoolInt => Value::Int(rng.gen_range(0..=1)),
        VarDomain::FloatNormal | VarDomain::FloatNonTiny => {
            let exp = rng.gen_range(-8.0..8.0);
            let mantissa = rng.gen_range(1.0..10.0);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Value::Float(sign * mantissa * 10f64.powf(exp))
        }
    }
}

fn values_agree(a: crate::dfg::Value, b: crate::dfg::Value, class: SemanticsClass) -> bool {
    
    match class {
        SemanticsClass::Exact | SemanticsClass::BooleanDomain => {
            a.as_int() == b.as_int() && a.as_int().is_some()
        }
        SemanticsClass::FpRelaxed => match (a.as_float(), b.as_float()) {
            (Some(x), Some(y)) => {
                if !x.is_finite() || !y.is_finite() {
                    // Out of the promised domain; not a counterexample.
                    return true;
                }
                let scale = x.abs().max(y.abs());
                scale == 0.0 || (x - y).abs() / scale <= 1e-6
            }
            _ => false,
        },
        SemanticsClass::Stochastic => true,
    }
}

fn ordered_outputs(
    d: &Dfg,
    results: &HashMap<NodeId, crate::dfg::Value>,
) -> Vec<crate::dfg::Value> {
    d.outputs.iter().map(|o| results[o]).collect()
}

/// Check interpreter equivalence of a rule's two sides over its declared
/// validity domain.  Boolean-domain rules are checked exhaustively over
/// {0,1} assignments; stochastic rules pass vacuously.
pub fn check_rule_equivalence(
    rule: &RewriteRule,
    samples: usize,
    seed: u64,
) -> Result<(), String> {
    use crate::dfg::{interpret, Value};
    use rand::SeedableRng;

    if rule.semantics == SemanticsClass::Stochastic {
        return Ok(());
    }
    let lhs = pattern_to_dfg(&rule.lhs);
    let rhs = pattern_to_dfg(&rule.rhs);
    let mut vars: Vec<String> = rule.lhs.vars().into_iter().collect();
    vars.sort();

    let envs: Vec<HashMap<String, Value>> = if rule.semantics == SemanticsClass::BooleanDomain {
        let mut envs = Vec::new();
        for bits in 0..(1u32 << vars.len()) {
            envs.push(
                vars.iter()
                    .enumerate()
                    .map(|(i, v)| (v.clone(), Value::Int(((bits >> i) & 1) as i32)))
                    .collect(),
            );
        }
        envs
    } else {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..samples)
            .map(|_| {
                vars.iter()
                    .map(|v| (v.clone(), sample_value(rule.domain_of(v), &mut rng)))
                    .collect()
            })
            .collect()
    };

    let mem = HashMap::new();
    for env in &envs {
        let lr = interpret(&lhs, env, &mem)
            .map_err(|e| format!("rule {}: lhs evaluation failed: {e}", rule.name))?;
        let rr = interpret(&rhs, env, &mem)
            .map_err(|e| format!("rule {}: rhs evaluation failed: {e}", rule.name))?;
        let lo = ordered_outputs(&lhs, &lr);
        let ro = ordered_outputs(&rhs, &rr);
        for (a, b) in lo.iter().zip(ro.iter()) {
            if !values_agree(*a, *b, rule.semantics) {
                return Err(format!(
                    "rule {}: {:?} != {:?} under env {:?}",
                    rule.name, a, b, env
                ));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfg::{cost, interpret, parse_dfg, validate, OpSet, Value};
    use std::collections::HashMap as StdHashMap;

    #[test]
    fn parse_mul_neg_one() {
        let rules = parse_rule("?x * -1 => - ?x", "r", RulesetKind::Int).unwrap();
        assert_eq!(rules.len(), 1);
        let r = &rules[0];
        assert_eq!(r.lhs.nodes.len(), 3);
        assert!(matches!(
            r.lhs.nodes[r.lhs.outputs[0]],
            PatternNode::Op(OpKind::Mul, _)
        ));
        assert!(matches!(
            r.rhs.nodes[r.rhs.outputs[0]],
            PatternNode::Op(OpKind::Neg, _)
        ));
    }

    #[test]
    fn parse_bidirectional() {
        let rules = parse_rule("?x - ?y <=> ?x + (- ?y)", "r", RulesetKind::Int).unwrap();
        assert_eq!(rules.len(), 2);
        assert_eq!(rules[0].name, "r-fwd");
        assert_eq!(rules[1].name, "r-rev");
        // The reverse orientation swaps sides.
        assert_eq!(rules[0].lhs, rules[1].rhs);
        assert_eq!(rules[0].rhs, rules[1].lhs);
    }

    #[test]
    fn parse_unbound_variable() {
        let err = parse_rule("?x => ?x + ?z", "r", RulesetKind::Int).unwrap_err();
        assert_eq!(err, RuleParseError::UnboundVariable("z".into()));
    }

    #[test]
    fn builtin_bool_has_xor_as_ne() {
        let rules = builtin_ruleset(RulesetKind::Bool);
        assert!(rules.iter().any(|r| r.name == "bool-xor-as-ne"));
    }

    #[test]
    fn builtin_stochastic_has_mul_as_and() {
        let rules = builtin_ruleset(RulesetKind::Stochastic);
        assert!(rules.iter().any(|r| r.name == "stoch-mul-as-and"));
        assert!(rules
            .iter()
            .all(|r| r.semantics == SemanticsClass::Stochastic));
    }

    #[test]
    fn builtin_int_enables_twos_complement_chain() {
        let names: Vec<String> = builtin_ruleset(RulesetKind::Int)
            .into_iter()
            .map(|r| r.name)
            .collect();
        for needed in ["sub-as-add-neg-fwd", "neg-twos-complement-fwd"] {
            assert!(names.iter().any(|n| n == needed), "missing {needed}");
        }
    }

    fn sub_rule() -> RewriteRule {
        parse_rule("?x - ?y => ?x + (- ?y)", "sub", RulesetKind::Int)
            .unwrap()
            .remove(0)
    }

    #[test]
    fn find_matches_two_subs() {
        let d = parse_dfg(
            "n0 input a\nn1 input b\nn2 input c\nn3 sub n0 n1\nn4 sub n3 n2\nout n4",
        )
        .unwrap();
        let ms = find_matches(&d, &sub_rule());
        assert_eq!(ms.len(), 2);
        assert_eq!(ms[0].matched_outputs, vec![NodeId(3)]);
        assert_eq!(ms[1].matched_outputs, vec![NodeId(4)]);
    }

    #[test]
    fn find_matches_none() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 add n0 n1\nout n2").unwrap();
        assert!(find_matches(&d, &sub_rule()).is_empty());
    }

    #[test]
    fn find_matches_literal() {
        let rule = parse_rule("?x * -1 => - ?x", "r", RulesetKind::Int)
            .unwrap()
            .remove(0);
        let d = parse_dfg("n0 input x\nn1 const -1\nn2 mul n0 n1\nout n2").unwrap();
        let ms = find_matches(&d, &rule);
        assert_eq!(ms.len(), 1);
        assert_eq!(ms[0].substitution["x"], NodeId(0));
        // Literal must be exact: const -2 does not match.
        let d2 = parse_dfg("n0 input x\nn1 const -2\nn2 mul n0 n1\nout n2").unwrap();
        assert!(find_matches(&d2, &rule).is_empty());
    }

    #[test]
    fn nonlinear_pattern_requires_same_node() {
        let rule = parse_rule("?x + ?x => ?x * 2", "r", RulesetKind::Int)
            .unwrap()
            .remove(0);
        let same = parse_dfg("n0 input a\nn1 add n0 n0\nout n1").unwrap();
        assert_eq!(find_matches(&same, &rule).len(), 1);
        let diff = parse_dfg("n0 input a\nn1 input b\nn2 add n0 n1\nout n2").unwrap();
        assert!(find_matches(&diff, &rule).is_empty());
    }

    #[test]
    fn apply_sub_to_add_neg() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 sub n0 n1\nout n2").unwrap();
        let rule = sub_rule();
        let m = find_matches(&d, &rule).remove(0);
        let d2 = apply_match(&d, &m, &rule).unwrap();
        assert!(validate(&d2).is_empty());
        let ops: Vec<OpKind> = d2.nodes.iter().map(|n| n.op).collect();
        assert!(ops.contains(&OpKind::Add));
        assert!(ops.contains(&OpKind::Neg));
        assert!(!ops.contains(&OpKind::Sub));
        assert_eq!(d2.nodes.len(), 4);
    }

    #[test]
    fn apply_identity_rule() {
        let rule = parse_rule("?x + ?y => ?x + ?y", "id", RulesetKind::Int)
            .unwrap()
            .remove(0);
        let d = parse_dfg("n0 input a\nn1 input b\nn2 add n0 n1\nout n2").unwrap();
        let m = find_matches(&d, &rule).remove(0);
        let d2 = apply_match(&d, &m, &rule).unwrap();
        assert_eq!(d.canonical_key(), d2.canonical_key());
    }

    #[test]
    fn apply_preserves_semantics_randomized() {
        let rule = parse_rule("?x * -1 => - ?x", "r", RulesetKind::Int)
            .unwrap()
            .remove(0);
        let d = parse_dfg(
            "n0 input a\nn1 const -1\nn2 mul n0 n1\nn3 input c\nn4 add n2 n3\nout n4",
        )
        .unwrap();
        let m = find_matches(&d, &rule).remove(0);
        let d2 = apply_match(&d, &m, &rule).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let env: StdHashMap<String, Value> = [
                ("a".to_string(), Value::Int(rng.gen())),
                ("c".to_string(), Value::Int(rng.gen())),
            ]
            .into();
            let r1 = interpret(&d, &env, &StdHashMap::new()).unwrap();
            let r2 = interpret(&d2, &env, &StdHashMap::new()).unwrap();
            let v1 = r1.values().next().unwrap();
            let v2 = r2.values().next().unwrap();
            assert_eq!(v1, v2);
        }
    }

    #[test]
    fn apply_stale_match() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 sub n0 n1\nout n2").unwrap();
        let rule = sub_rule();
        let m = find_matches(&d, &rule).remove(0);
        let changed = parse_dfg("n0 input a\nn1 input b\nn2 add n0 n1\nout n2").unwrap();
        assert_eq!(
            apply_match(&changed, &m, &rule).unwrap_err(),
            ApplyError::StaleMatch
        );
    }

    #[test]
    fn apply_keeps_cost_accounting() {
        // (a * -1) + c with mul-neg-one -> (-a) + c
        let rule = parse_rule("?x * -1 => - ?x", "r", RulesetKind::Int)
            .unwrap()
            .remove(0);
        let d = parse_dfg(
            "n0 input a\nn1 const -1\nn2 mul n0 n1\nn3 input c\nn4 add n2 n3\nout n4",
        )
        .unwrap();
        let m = find_matches(&d, &rule).remove(0);
        let d2 = apply_match(&d, &m, &rule).unwrap();
        let ops = OpSet::from_ops(&[OpKind::Neg, OpKind::Add]);
        assert_eq!(cost(&d2, &ops), 2);
    }

    #[test]
    fn matching_does_not_cross_loop_carried_edges() {
        // acc = acc + x, where the add reads itself at distance 1.  A
        // structural pattern over add(add(..), ..) must not match through
        // the back edge, but a variable may bind it.
        let text = "n0 input x\nn1 add n1 n0\ndist n1 n1 1\nout n1";
        let d = parse_dfg(text).unwrap();
        let deep = parse_rule("(?a + ?b) + ?c => ?a + (?b + ?c)", "r", RulesetKind::Int)
            .unwrap()
            .remove(0);
        assert!(find_matches(&d, &deep).is_empty());
        let shallow = parse_rule("?a + ?b => ?b + ?a", "r", RulesetKind::Int)
            .unwrap()
            .remove(0);
        let ms = find_matches(&d, &shallow);
        assert_eq!(ms.len(), 1);
        assert_eq!(ms[0].delays["a"], 1);
        // Applying keeps the loop-carried distance on the rebuilt edge.
        let d2 = apply_match(&d, &ms[0], &shallow).unwrap();
        assert!(validate(&d2).is_empty());
        assert_eq!(d2.edge_distances.len(), 1);
    }

    #[test]
    fn all_builtin_rules_pass_equivalence() {
        for kind in RulesetKind::ALL {
            for r in builtin_ruleset(*kind) {
                check_rule_equivalence(&r, 1000, 0xF1E2).unwrap();
            }
        }
    }

    #[test]
    fn equivalence_catches_a_wrong_rule() {
        let bad = parse_rule("?x - ?y => ?y - ?x", "bad", RulesetKind::Int)
            .unwrap()
            .remove(0);
        assert!(check_rule_equivalence(&bad, 1000, 1).is_err());
    }

    #[test]
    fn ruleset_file_round_trip() {
        let text = "[ruleset:int]\n?x - ?y <=> ?x + (- ?y)\n[ruleset:bool]\n?x ^ ?y => ?x != ?y\n";
        let rules = parse_ruleset_file(text).unwrap();
        assert_eq!(rules.len(), 3);
        assert_eq!(rules[2].ruleset, RulesetKind::Bool);
    }
}
