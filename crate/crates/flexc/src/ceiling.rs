//! Performance-ceiling estimation: enumerate (or sample) a space of small
//! programs, run a heuristic pipeline and an exhaustive reference pipeline
//! over it, and report how often the heuristic keeps up.
//!
//! The reference pipeline is only sound at toy scale, so hard size bounds
//! are enforced.

use std::collections::{HashSet, VecDeque};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::arch::CgraSpec;
use crate::dfg::{cost, Dfg, DfgBuilder, OpKind, OpSet, UNSUPPORTED_PENALTY};
use crate::egraph::{eqsat_rewrite, SaturationLimits};
use crate::greedy::greedy_rewrite;
use crate::hybrid::hybrid_rewrite;
use crate::mapper;
use crate::rules::{apply_match, compact, find_matches, RewriteRule};

/// Hard cap on op-node count in enumerate mode; beyond this the space is
/// astronomically large.
pub const MAX_ENUM_OPS: usize = 6;
/// Hard cap on program size fed to the exhaustive rewriter/mapper.
pub const MAX_ORACLE_OPS: usize = 8;
/// Distinct graphs the breadth-first rewrite search may visit per program.
pub const BFS_VISIT_BUDGET: usize = 20_000;

#[derive(Debug, Error, PartialEq)]
pub enum CeilingError {
    #[error("op-node bound {0} exceeds the enumeration cap {MAX_ENUM_OPS}")]
    BoundTooLarge(usize),
    #[error("program space is empty")]
    EmptySpace,
    #[error("program with {0} op nodes exceeds the oracle cap {MAX_ORACLE_OPS}")]
    ProgramTooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceMode {
    /// Every structurally distinct program up to the size bound.
    Enumerate,
    /// Deterministic random draw from the same grammar.
    Sample { count: usize, seed: u64 },
}

/// A grammar of small single-output programs: op kinds drawn from `ops`,
/// at most `max_ops` operation nodes, over `num_inputs` named inputs.
#[derive(Debug, Clone)]
pub struct ProgramSpace {
    pub ops: Vec<OpKind>,
    pub max_ops: usize,
    pub num_inputs: usize,
    pub mode: SpaceMode,
}

fn input_name(i: usize) -> String {
    // a, b, ..., z, i26, i27, ...
    if i < 26 {
        ((b'a' + i as u8) as char).to_string()
    } else {
        format!("i{i}")
    }
}

fn build_program(num_inputs: usize, ops: &[(OpKind, Vec<usize>)], output: usize) -> Dfg {
    let mut b = DfgBuilder::new();
    let mut ids = Vec::new();
    for i in 0..num_inputs {
        ids.push(b.input(&input_name(i)));
    }
    for (kind, operands) in ops {
        let args: Vec<_> = operands.iter().map(|&i| ids[i]).collect();
        ids.push(b.op(*kind, &args));
    }
    b.output(ids[output]);
    b.finish()
}

/// Are all op nodes reachable from the output (no dead operations)?
fn all_ops_live(num_inputs: usize, ops: &[(OpKind, Vec<usize>)], output: usize) -> bool {
    let mut live = vec![false; num_inputs + ops.len()];
    let mut stack = vec![output];
    while let Some(i) = stack.pop() {
        if live[i] {
            continue;
        }
        live[i] = true;
        if i >= num_inputs {
            stack.extend(ops[i - num_inputs].1.iter().copied());
        }
    }
    live[num_inputs..].iter().all(|&x| x)
}

fn operand_combos(kind: OpKind, avail: usize) -> Vec<Vec<usize>> {
    let ar = kind.arity();
    let mut combos = vec![Vec::new()];
    for _ in 0..ar {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                (0..avail).map(move |i| {
                    let mut c2 = c.clone();
                    c2.push(i);
                    c2
                })
            })
            .collect();
    }
    combos
}

/// Generate the program list for a space.  Enumerate mode is exhaustive and
/// duplicate-free modulo structural identity, in a deterministic order.
pub fn enumerate_programs(space: &ProgramSpace) -> Result<Vec<Dfg>, CeilingError> {
    match space.mode {
        SpaceMode::Enumerate => {
            if space.max_ops > MAX_ENUM_OPS {
                return Err(CeilingError::BoundTooLarge(space.max_ops));
            }
            let mut out = Vec::new();
            let mut seen: HashSet<String> = HashSet::new();
            // Zero-op programs: each input alone.
            for i in 0..space.num_inputs {
                let d = build_program(space.num_inputs, &[], i);
                if seen.insert(d.canonical_key()) {
                    out.push(d);
                }
            }
            // Iterative deepening over op-sequence prefixes; a program is
            // emitted whenever the newest op is the output and nothing is
            // dead.  Structural duplicates (permuted construction orders)
            // collapse through the canonical key.
            let mut stack: Vec<Vec<(OpKind, Vec<usize>)>> = vec![Vec::new()];
            while let Some(prefix) = stack.pop() {
                if prefix.len() == space.max_ops {
                    continue;
                }
                let avail = space.num_inputs + prefix.len();
                for &kind in &space.ops {
                    if kind.is_leaf() {
                        continue;
                    }
                    for combo in operand_combos(kind, avail) {
                        let mut next = prefix.clone();
                        next.push((kind, combo));
                        let output = space.num_inputs + next.len() - 1;
                        if all_ops_live(space.num_inputs, &next, output) {
                            let d = build_program(space.num_inputs, &next, output);
                            if seen.insert(d.canonical_key()) {
                                out.push(d);
                            }
                        }
                        stack.push(next);
                    }
                }
            }
            Ok(out)
        }
        SpaceMode::Sample { count, seed } => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut out = Vec::new();
            let mut seen: HashSet<String> = HashSet::new();
            let mut attempts = 0usize;
            while out.len() < count && attempts < count * 50 {
                attempts += 1;
                let n_ops = rng.gen_range(1..=space.max_ops.max(1));
                let mut ops: Vec<(OpKind, Vec<usize>)> = Vec::new();
                for i in 0..n_ops {
                    let kind = space.ops[rng.gen_range(0..space.ops.len())];
                    let avail = space.num_inputs + i;
                    let operands = (0..kind.arity())
                        .map(|_| rng.gen_range(0..avail))
                        .collect();
                    ops.push((kind, operands));
                }
                let output = space.num_inputs + n_ops - 1;
                if !all_ops_live(space.num_inputs, &ops, output) {
                    continue;
                }
                let d = build_program(space.num_inputs, &ops, output);
                if seen.insert(d.canonical_key()) {
                    out.push(d);
                }
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewriterKind {
    None,
    Greedy,
    Eqsat,
    Hybrid,
    /// Breadth-first search over rewrite sequences, saturation as backstop.
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapperKind {
    Heuristic,
    Optimal,
    Disabled,
}

#[derive(Debug, Clone)]
pub struct CompilerUnderTest {
    pub rewriter: RewriterKind,
    pub mapper: MapperKind,
    pub limits: SaturationLimits,
    /// Depth bound for the breadth-first optimal rewriter.
    pub depth: u32,
}

impl CompilerUnderTest {
    pub fn heuristic(rewriter: RewriterKind) -> Self {
        CompilerUnderTest {
            rewriter,
            mapper: MapperKind::Disabled,
            limits: SaturationLimits::default(),
            depth: 5,
        }
    }

    pub fn optimal() -> Self {
        CompilerUnderTest {
            rewriter: RewriterKind::Optimal,
            mapper: MapperKind::Disabled,
            limits: SaturationLimits::default(),
            depth: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleOutcome {
    /// A supported equivalent was found.
    Found(Dfg),
    /// Exhausted the reachable space (and saturation) without success.
    ProvenNone,
    /// Ran out of budget before either answer.
    BudgetExceeded,
}

/// Exhaustive rewriter: breadth-first search over all rule-application
/// sequences up to `depth`, deduplicating structurally identical graphs.
/// When BFS finds nothing, equality saturation acts as a backstop so that
/// no heuristic can out-search the oracle.
pub fn optimal_rewriter(
    d: &Dfg,
    rules: &[RewriteRule],
    ops: &OpSet,
    depth: u32,
) -> OracleOutcome {
    optimal_rewriter_with_budget(d, rules, ops, depth, BFS_VISIT_BUDGET)
}

/// Like [`optimal_rewriter`] with an explicit cap on distinct graphs the
/// breadth-first phase may visit.
pub fn optimal_rewriter_with_budget(
    d: &Dfg,
    rules: &[RewriteRule],
    ops: &OpSet,
    depth: u32,
    visit_budget: usize,
) -> OracleOutcome {
    if cost(d, ops) < UNSUPPORTED_PENALTY {
        return OracleOutcome::Found(d.clone());
    }
    let mut seen: HashSet<String> = HashSet::new();
    seen.insert(d.canonical_key());
    let mut frontier: VecDeque<(Dfg, u32)> = VecDeque::from([(d.clone(), 0)]);
    let mut budget_hit = false;
    while let Some((g, depth_so_far)) = frontier.pop_front() {
        if depth_so_far == depth {
            continue;
        }
        for rule in rules {
            for m in find_matches(&g, rule) {
                let Ok(applied) = apply_match(&g, &m, rule) else {
                    continue;
                };
                let Some(next) = compact(&applied) else {
                    continue;
                };
                if !seen.insert(next.canonical_key()) {
                    continue;
                }
                if cost(&next, ops) < UNSUPPORTED_PENALTY {
                    return OracleOutcome::Found(next);
                }
                if seen.len() >= visit_budget {
                    budget_hit = true;
                } else {
                    frontier.push_back((next, depth_so_far + 1));
                }
            }
        }
        if budget_hit {
            break;
        }
    }
    // BFS found nothing; let saturation decide between "proven impossible"
    // and "budget ran out".
    match eqsat_rewrite(d, rules, ops, &SaturationLimits::default()) {
        Ok((out, report, _)) => {
            if cost(&out, ops) < UNSUPPORTED_PENALTY {
                OracleOutcome::Found(out)
            } else if report.stop_reason == crate::egraph::StopReason::Saturated && !budget_hit {
                OracleOutcome::ProvenNone
            } else {
                OracleOutcome::BudgetExceeded
            }
        }
        Err(_) => OracleOutcome::BudgetExceeded,
    }
}

/// Run one compiler configuration on one program.  Some(true/false) is a
/// definite success/failure; None means a budget ran out.
pub fn run_pipeline(
    d: &Dfg,
    rules: &[RewriteRule],
    cut: &CompilerUnderTest,
    spec: &CgraSpec,
) -> Result<Option<bool>, CeilingError> {
    let n_ops = d.node_ids().filter(|&i| !d.node(i).op.is_leaf()).count();
    if matches!(cut.rewriter, RewriterKind::Optimal) && n_ops > MAX_ORACLE_OPS {
        return Err(CeilingError::ProgramTooLarge(n_ops));
    }
    let ops = spec.supported_ops();
    let rewritten: Option<Dfg> = match cut.rewriter {
        RewriterKind::None => Some(d.clone()),
        RewriterKind::Greedy => Some(greedy_rewrite(d, rules, &ops).0),
        RewriterKind::Eqsat => match eqsat_rewrite(d, rules, &ops, &cut.limits) {
            Ok((out, _, _)) => Some(out),
            Err(_) => None,
        },
        RewriterKind::Hybrid => match hybrid_rewrite(d, rules, &ops, &cut.limits) {
            Ok((out, _, _)) => Some(out),
            Err(_) => None,
        },
        RewriterKind::Optimal => match optimal_rewriter(d, rules, &ops, cut.depth) {
            OracleOutcome::Found(out) => Some(out),
            OracleOutcome::ProvenNone => return Ok(Some(false)),
            OracleOutcome::BudgetExceeded => return Ok(None),
        },
    };
    let Some(rw) = rewritten else {
        return Ok(Some(false));
    };
    if cost(&rw, &ops) >= UNSUPPORTED_PENALTY {
        return Ok(Some(false));
    }
    match cut.mapper {
        MapperKind::Disabled => Ok(Some(true)),
        MapperKind::Heuristic => {
            match mapper::compile(&rw, spec, Duration::from_secs(10)) {
                Ok(_) => Ok(Some(true)),
                Err(mapper::MapError::BudgetExhausted) => Ok(None),
                Err(_) => Ok(Some(false)),
            }
        }
        MapperKind::Optimal => {
            let rw_ops = rw.node_ids().filter(|&i| !rw.node(i).op.is_leaf()).count();
            if rw_ops > MAX_ORACLE_OPS {
                return Err(CeilingError::ProgramTooLarge(rw_ops));
            }
            let cap = rw_ops.max(1) as u32;
            match mapper::optimal_ii_exhaustive(&rw, spec, cap, 3_000_000) {
                Some(Some(_)) => Ok(Some(true)),
                Some(None) => Ok(Some(false)),
                None => Ok(None),
            }
        }
    }
}

/// Fraction of the space the configuration compiles, counting budget blowups
/// as failures.
pub fn supp_fraction(
    programs: &[Dfg],
    rules: &[RewriteRule],
    cut: &CompilerUnderTest,
    spec: &CgraSpec,
) -> Result<f64, CeilingError> {
    if programs.is_empty() {
        return Err(CeilingError::EmptySpace);
    }
    let mut ok = 0usize;
    for d in programs {
        if run_pipeline(d, rules, cut, spec)? == Some(true) {
            ok += 1;
        }
    }
    Ok(ok as f64 / programs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeilingReport {
    /// Fraction of decided programs where reference success implies
    /// heuristic success.
    pub probability: f64,
    pub included: usize,
    /// Programs skipped because a budget ran out before a definite answer.
    pub excluded: usize,
}

/// Conditional success estimate: over programs with a definite answer from
/// both pipelines, count those where the reference pipeline fails or the
/// heuristic succeeds.
pub fn ceiling_estimate(
    programs: &[Dfg],
    rules: &[RewriteRule],
    heur: &CompilerUnderTest,
    spec: &CgraSpec,
) -> Result<CeilingReport, CeilingError> {
    if programs.is_empty() {
        return Err(CeilingError::EmptySpace);
    }
    let mut reference = CompilerUnderTest::optimal();
    reference.mapper = match heur.mapper {
        MapperKind::Disabled => MapperKind::Disabled,
        _ => MapperKind::Optimal,
    };
    let mut included = 0usize;
    let mut implied = 0usize;
    let mut excluded = 0usize;
    for d in programs {
        let opt = run_pipeline(d, rules, &reference, spec)?;
        let h = run_pipeline(d, rules, heur, spec)?;
        match (opt, h) {
            (Some(o), Some(hh)) => {
                included += 1;
                if !o || hh {
                    implied += 1;
                }
            }
            _ => excluded += 1,
        }
    }
    if included == 0 {
        return Err(CeilingError::EmptySpace);
    }
    Ok(CeilingReport {
        probability: implied as f64 / included as f64,
        included,
        excluded,
    })
}
