//! CGRA mapper: places and modulo-schedules a rewritten DFG onto the PE
//! grid, producing an initiation interval used for performance estimates.
//!
//! Model: unit latency per operation; one op per PE per II window; a value
//! moves one link per cycle and may be held in a PE register.  Constant and
//! input nodes are free (constants are configured into PEs, inputs are
//! streamed), so only operation nodes occupy compute slots.

use std::collections::{BTreeMap, HashSet};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::arch::CgraSpec;
use crate::dfg::{Dfg, NodeId, OpKind};

/// A placed-and-routed schedule, valid for a given initiation interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Mapping {
    pub ii: u32,
    /// Operation node -> (PE id, time slot).  Leaf nodes are not placed.
    pub placement: BTreeMap<NodeId, (usize, u32)>,
    /// (producer, consumer) -> transport hops (PE id, time), starting at
    /// the producer's slot and ending one cycle before consumption.
    pub routes: BTreeMap<(NodeId, NodeId), Vec<(usize, u32)>>,
}

impl Mapping {
    /// Last occupied slot + 1; 0 for an empty mapping.
    pub fn schedule_length(&self) -> u64 {
        self.placement
            .values()
            .map(|&(_, t)| t as u64 + 1)
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("operation {0} has no supporting PE")]
    Unsupported(OpKind),
    #[error("no valid mapping exists at this II (search space exhausted)")]
    Infeasible,
    #[error("search budget exhausted before completion")]
    BudgetExhausted,
}

#[derive(Debug, Error, PartialEq)]
#[error("no mapping found up to II {last_ii}")]
pub struct CompileError {
    pub last_ii: u32,
    /// True when every attempted II was proven infeasible rather than
    /// abandoned on budget.
    pub exhaustive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MapViolation {
    MissingPlacement(NodeId),
    LeafPlaced(NodeId),
    UnsupportedOnPe(NodeId, usize),
    ModuloResource(usize, u32),
    MissingRoute(NodeId, NodeId),
    BadRoute(NodeId, NodeId, String),
    Dependence(NodeId, NodeId),
    BadIi,
}

fn op_nodes(d: &Dfg) -> Vec<NodeId> {
    crate::dfg::topo_order(d)
        .into_iter()
        .filter(|&id| !d.node(id).op.is_leaf())
        .collect()
}

/// Resource-minimum II: the busiest op kind relative to its PE count.
pub fn res_mii(d: &Dfg, spec: &CgraSpec) -> Result<u32, MapError> {
    let mut counts: BTreeMap<OpKind, u32> = BTreeMap::new();
    for id in op_nodes(d) {
        *counts.entry(d.node(id).op).or_insert(0) += 1;
    }
    let mut mii = 1;
    for (op, count) in counts {
        let supporting = spec.pes_supporting(op).len() as u32;
        if supporting == 0 {
            return Err(MapError::Unsupported(op));
        }
        mii = mii.max(count.div_ceil(supporting));
    }
    Ok(mii)
}

/// True when the dependence graph has a cycle whose total latency exceeds
/// ii times its total distance.
fn has_positive_cycle(d: &Dfg, ii: u32) -> bool {
    // Longest-path relaxation over edges producer -> consumer with weight
    // 1 - ii * distance; a positive cycle means ii is too small.
    let n = d.nodes.len();
    let mut edges = Vec::new();
    for c in d.node_ids() {
        for &p in &d.node(c).operands {
            let w = 1i64 - (ii as i64) * (d.distance(c, p) as i64);
            edges.push((p, c, w));
        }
    }
    let mut pot = vec![0i64; n];
    for round in 0..=n {
        let mut changed = false;
        for &(p, c, w) in &edges {
            if pot[p.index()] + w > pot[c.index()] {
                pot[c.index()] = pot[p.index()] + w;
                changed = true;
            }
        }
        if !changed {
            return false;
        }
        if round == n {
            return true;
        }
    }
    false
}

/// Recurrence-minimum II from distance-annotated dependence cycles; 1 when
/// the graph is acyclic.
pub fn rec_mii(d: &Dfg) -> u32 {
    let cap = d.nodes.len().max(1) as u32;
    for ii in 1..=cap {
        if !has_positive_cycle(d, ii) {
            return ii;
        }
    }
    cap
}

/// Deterministic scheduling horizon shared by the heuristic search and the
/// exhaustive reference search.
pub fn horizon(d: &Dfg, spec: &CgraSpec, ii: u32) -> u32 {
    op_nodes(d).len() as u32 + ii + spec.rows + spec.cols
}

/// All-pairs shortest hop counts over the link graph.
fn pe_distances(spec: &CgraSpec) -> Vec<Vec<u32>> {
    let n = spec.pes.len();
    let mut dist = vec![vec![u32::MAX; n]; n];
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(s, t) in &spec.links {
        adj[s].push(t);
    }
    for src in 0..n {
        dist[src][src] = 0;
        let mut queue = std::collections::VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[src][v] == u32::MAX {
                    dist[src][v] = dist[src][u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    dist
}

struct SearchCtx<'a> {
    d: &'a Dfg,
    spec: &'a CgraSpec,
    ii: u32,
    horizon: u32,
    dist: Vec<Vec<u32>>,
    ops: Vec<NodeId>,
    deadline: Instant,
    states: usize,
    state_cap: usize,
    budget_hit: bool,
    dominance: bool,
}

/// Whether earliest-slot dominance pruning is sound: with no loop-carried
/// edges every constraint is monotone in a node's time (later is never
/// required), provided register holds are always available, so per
/// (PE, slot-class) only the earliest feasible time needs exploring.
fn dominance_ok(d: &Dfg, spec: &CgraSpec) -> bool {
    d.edge_distances.is_empty() && spec.pes.iter().all(|p| p.has_register)
}

/// Can a value produced at (pe_p, t_p) reach a consumer at (pe_c, T_c)?
fn reachable(ctx: &SearchCtx, pe_p: usize, t_p: u32, pe_c: usize, t_c_eff: u32) -> bool {
    if t_c_eff < t_p + 1 {
        return false;
    }
    let hops = ctx.dist[pe_p][pe_c];
    if hops == u32::MAX {
        return false;
    }
    let slack = t_c_eff - t_p;
    if hops > slack {
        return false;
    }
    if slack > hops {
        // Needs register holds somewhere along the way.
        ctx.spec.pes[pe_c].has_register || ctx.spec.pes[pe_p].has_register
    } else {
        true
    }
}

fn place(
    ctx: &mut SearchCtx,
    idx: usize,
    placement: &mut BTreeMap<NodeId, (usize, u32)>,
    slots: &mut HashSet<(usize, u32)>,
) -> bool {
    if idx == ctx.ops.len() {
        return true;
    }
    ctx.states += 1;
    if ctx.states > ctx.state_cap || Instant::now() > ctx.deadline {
        ctx.budget_hit = true;
        return false;
    }
    let node_id = ctx.ops[idx];
    let node = ctx.d.node(node_id);
    let candidate_pes = ctx.spec.pes_supporting(node.op);

    // Collect valid candidates, preferring early slots and PEs close to
    // the placed producers.
    let mut candidates: Vec<(u32, u32, usize)> = Vec::new();
    let mut class_seen: HashSet<(usize, u32)> = HashSet::new();
    for t in 0..ctx.horizon {
        for &pe in &candidate_pes {
            if slots.contains(&(pe, t % ctx.ii)) {
                continue;
            }
            if ctx.dominance && class_seen.contains(&(pe, t % ctx.ii)) {
                continue;
            }
            let mut ok = true;
            let mut dist_sum = 0u32;
            // Producer-side constraints.
            for &p in &node.operands {
                if ctx.d.node(p).op.is_leaf() {
                    continue;
                }
                let dd = ctx.d.distance(node_id, p);
                if p == node_id {
                    if dd == 0 {
                        ok = false;
                    }
                    continue;
                }
                let Some(&(pe_p, t_p)) = placement.get(&p) else {
                    continue;
                };
                let t_eff = t + dd * ctx.ii;
                if !reachable(ctx, pe_p, t_p, pe, t_eff) {
                    ok = false;
                    break;
                }
                dist_sum += ctx.dist[pe_p][pe];
            }
            // Consumer-side constraints (already-placed consumers reach
            // this node only through loop-carried edges).
            if ok {
                for (&c, &(pe_c, t_c)) in placement.iter() {
                    let cnode = ctx.d.node(c);
                    for &p in &cnode.operands {
                        if p != node_id {
                            continue;
                        }
                        let dd = ctx.d.distance(c, p);
                        let t_eff = t_c + dd * ctx.ii;
                        if !reachable(ctx, pe, t, pe_c, t_eff) {
                            ok = false;
                            break;
                        }
                    }
                    if !ok {
                        break;
                    }
                }
            }
            if ok {
                candidates.push((t, dist_sum, pe));
                class_seen.insert((pe, t % ctx.ii));
            }
        }
    }
    candidates.sort_unstable();

    for (t, _, pe) in candidates {
        placement.insert(node_id, (pe, t));
        slots.insert((pe, t % ctx.ii));
        if place(ctx, idx + 1, placement, slots) {
            return true;
        }
        placement.remove(&node_id);
        slots.remove(&(pe, t % ctx.ii));
        if ctx.budget_hit {
            return false;
        }
    }
    false
}

/// Shortest PE path src -> dst with deterministic tie-breaking.
fn bfs_path(spec: &CgraSpec, src: usize, dst: usize) -> Option<Vec<usize>> {
    let n = spec.pes.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(s, t) in &spec.links {
        adj[s].push(t);
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
    }
    let mut prev: Vec<Option<usize>> = vec![None; n];
    let mut seen = vec![false; n];
    seen[src] = true;
    let mut queue = std::collections::VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        if u == dst {
            let mut path = vec![dst];
            let mut cur = dst;
            while cur != src {
                cur = prev[cur].unwrap();
                path.push(cur);
            }
            path.reverse();
            return Some(path);
        }
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                prev[v] = Some(u);
                queue.push_back(v);
            }
        }
    }
    None
}

fn build_routes(
    d: &Dfg,
    spec: &CgraSpec,
    ii: u32,
    placement: &BTreeMap<NodeId, (usize, u32)>,
) -> Option<BTreeMap<(NodeId, NodeId), Vec<(usize, u32)>>> {
    let mut routes = BTreeMap::new();
    for c in d.node_ids() {
        for &p in &d.node(c).operands {
            if d.node(p).op.is_leaf() {
                continue;
            }
            let (&(pe_p, t_p), &(pe_c, t_c)) = (placement.get(&p)?, placement.get(&c)?);
            let t_eff = t_c + d.distance(c, p) * ii;
            let total = (t_eff - t_p) as usize; // ≥ 1 by construction
            let path = bfs_path(spec, pe_p, pe_c)?;
            let hops_moving = path.len() - 1;
            let holds = total - hops_moving;
            // Hold at whichever endpoint has a register.
            let mut pes: Vec<usize> = Vec::with_capacity(total + 1);
            if holds > 0 && spec.pes[pe_c].has_register {
                pes.extend(&path);
                pes.extend(std::iter::repeat(pe_c).take(holds));
            } else if holds > 0 && spec.pes[pe_p].has_register {
                pes.extend(std::iter::repeat(pe_p).take(holds));
                pes.extend(&path);
            } else if holds == 0 {
                pes.extend(&path);
            } else {
                return None;
            }
            // Positions pes[0..=total]; the value is consumed at time
            // t_eff, so transport occupies t_p .. t_eff - 1.
            let route: Vec<(usize, u32)> = pes[..total]
                .iter()
                .enumerate()
                .map(|(i, &pe)| (pe, t_p + i as u32))
                .collect();
            routes.insert((p, c), route);
        }
    }
    Some(routes)
}

/// Find a valid mapping at exactly this II, or fail.  `Infeasible` means
/// the search space was fully explored; `BudgetExhausted` means it was not.
pub fn map_at(d: &Dfg, spec: &CgraSpec, ii: u32, budget: Duration) -> Result<Mapping, MapError> {
    assert!(ii >= 1, "II must be positive");
    for id in op_nodes(d) {
        if spec.pes_supporting(d.node(id).op).is_empty() {
            return Err(MapError::Unsupported(d.node(id).op));
        }
    }
    let mut ctx = SearchCtx {
        d,
        spec,
        ii,
        horizon: horizon(d, spec, ii),
        dist: pe_distances(spec),
        ops: op_nodes(d),
        deadline: Instant::now() + budget,
        states: 0,
        state_cap: 2_000_000,
        budget_hit: false,
        dominance: dominance_ok(d, spec),
    };
    let mut placement = BTreeMap::new();
    let mut slots = HashSet::new();
    if place(&mut ctx, 0, &mut placement, &mut slots) {
        let routes = build_routes(d, spec, ii, &placement).ok_or(MapError::Infeasible)?;
        Ok(Mapping {
            ii,
            placement,
            routes,
        })
    } else if ctx.budget_hit {
        Err(MapError::BudgetExhausted)
    } else {
        Err(MapError::Infeasible)
    }
}

/// II-ascending compilation: try II = max(ResMII, RecMII) upward.
pub fn compile(d: &Dfg, spec: &CgraSpec, budget_per_ii: Duration) -> Result<Mapping, MapError> {
    let ops = op_nodes(d);
    if ops.is_empty() {
        return Ok(Mapping {
            ii: 1,
            placement: BTreeMap::new(),
            routes: BTreeMap::new(),
        });
    }
    let mii = res_mii(d, spec)?.max(rec_mii(d));
    let cap = mii.max(ops.len() as u32);
    let mut exhausted = true;
    for ii in mii..=cap {
        match map_at(d, spec, ii, budget_per_ii) {
            Ok(m) => return Ok(m),
            Err(MapError::BudgetExhausted) => exhausted = false,
            Err(MapError::Infeasible) => {}
            Err(e) => return Err(e),
        }
    }
    if exhausted {
        Err(MapError::Infeasible)
    } else {
        Err(MapError::BudgetExhausted)
    }
}

/// Check every mapping invariant from first principles, sharing no state
/// with the search.
pub fn verify_mapping(d: &Dfg, spec: &CgraSpec, m: &Mapping) -> Vec<MapViolation> {
    let mut v = Vec::new();
    if m.ii < 1 {
        v.push(MapViolation::BadIi);
        return v;
    }
    // Placement coverage and legality.
    for id in d.node_ids() {
        let node = d.node(id);
        if node.op.is_leaf() {
            if m.placement.contains_key(&id) {
                v.push(MapViolation::LeafPlaced(id));
            }
            continue;
        }
        match m.placement.get(&id) {
            None => v.push(MapViolation::MissingPlacement(id)),
            Some(&(pe, _)) => {
                if pe >= spec.pes.len() || !spec.pes[pe].ops.contains(&node.op) {
                    v.push(MapViolation::UnsupportedOnPe(id, pe));
                }
            }
        }
    }
    // Modulo-resource: one op per PE per congruence class.
    let mut used: HashSet<(usize, u32)> = HashSet::new();
    for &(pe, t) in m.placement.values() {
        if !used.insert((pe, t % m.ii)) {
            v.push(MapViolation::ModuloResource(pe, t % m.ii));
        }
    }
    // Dependences and routes.
    for c in d.node_ids() {
        for &p in &d.node(c).operands {
            if d.node(p).op.is_leaf() {
                continue;
            }
            let (Some(&(pe_p, t_p)), Some(&(pe_c, t_c))) =
                (m.placement.get(&p), m.placement.get(&c))
            else {
                continue;
            };
            let t_eff = t_c as u64 + d.distance(c, p) as u64 * m.ii as u64;
            if t_eff < t_p as u64 + 1 {
                v.push(MapViolation::Dependence(p, c));
                continue;
            }
            let Some(route) = m.routes.get(&(p, c)) else {
                v.push(MapViolation::MissingRoute(p, c));
                continue;
            };
            let expected_len = (t_eff - t_p as u64) as usize;
            if route.len() != expected_len {
                v.push(MapViolation::BadRoute(p, c, "wrong length".into()));
                continue;
            }
            if route[0] != (pe_p, t_p) {
                v.push(MapViolation::BadRoute(p, c, "must start at producer".into()));
                continue;
            }
            let mut bad = false;
            for w in route.windows(2) {
                let ((a, ta), (b, tb)) = (w[0], w[1]);
                if tb != ta + 1 {
                    v.push(MapViolation::BadRoute(p, c, "non-consecutive times".into()));
                    bad = true;
                    break;
                }
                if a == b {
                    if !spec.pes[a].has_register {
                        v.push(MapViolation::BadRoute(p, c, "hold without register".into()));
                        bad = true;
                        break;
                    }
                } else if !spec.has_link(a, b) {
                    v.push(MapViolation::BadRoute(p, c, "unlinked hop".into()));
                    bad = true;
                    break;
                }
            }
            if bad {
                continue;
            }
            // The last position must deliver to the consumer's PE: either
            // it is already there, or one linked hop away at t_eff - 1.
            let (last_pe, last_t) = *route.last().unwrap();
            if last_t as u64 != t_eff - 1 {
                v.push(MapViolation::BadRoute(p, c, "does not reach consume time".into()));
            } else if last_pe != pe_c && !spec.has_link(last_pe, pe_c) {
                v.push(MapViolation::BadRoute(p, c, "does not reach consumer".into()));
            }
        }
    }
    v
}

/// schedule_length + (iterations - 1) * ii.
pub fn estimate_cycles(m: &Mapping, iterations: u64) -> u64 {
    assert!(iterations >= 1);
    m.schedule_length() + (iterations - 1) * m.ii as u64
}

/// Exhaustive reference search for the optimal II: enumerates every
/// placement at each II from 1 up to `cap` with no heuristic ordering.
/// Returns None when the state budget was exceeded (result unknown);
/// Some(None) when no II up to the cap admits a mapping.
pub fn optimal_ii_exhaustive(
    d: &Dfg,
    spec: &CgraSpec,
    cap: u32,
    max_states: usize,
) -> Option<Option<u32>> {
    let ops = op_nodes(d);
    if ops.is_empty() {
        return Some(Some(1));
    }

    fn search(
        d: &Dfg,
        spec: &CgraSpec,
        dist: &[Vec<u32>],
        ops: &[NodeId],
        ii: u32,
        hor: u32,
        idx: usize,
        placement: &mut BTreeMap<NodeId, (usize, u32)>,
        slots: &mut HashSet<(usize, u32)>,
        states: &mut usize,
        max_states: usize,
        dominance: bool,
    ) -> Option<bool> {
        if idx == ops.len() {
            return Some(true);
        }
        *states += 1;
        if *states > max_states {
            return None;
        }
        let node_id = ops[idx];
        let node = d.node(node_id);
        for pe in 0..spec.pes.len() {
            if !spec.pes[pe].ops.contains(&node.op) {
                continue;
            }
            let mut class_done: HashSet<u32> = HashSet::new();
            't: for t in 0..hor {
                if slots.contains(&(pe, t % ii)) {
                    continue;
                }
                if dominance && class_done.contains(&(t % ii)) {
                    continue;
                }
                for &p in &node.operands {
                    if d.node(p).op.is_leaf() || p == node_id {
                        continue;
                    }
                    if let Some(&(pe_p, t_p)) = placement.get(&p) {
                        let t_eff = t + d.distance(node_id, p) * ii;
                        if t_eff < t_p + 1
                            || dist[pe_p][pe] == u32::MAX
                            || dist[pe_p][pe] > t_eff - t_p
                        {
                            continue 't;
                        }
                        if t_eff - t_p > dist[pe_p][pe]
                            && !spec.pes[pe].has_register
                            && !spec.pes[pe_p].has_register
                        {
                            continue 't;
                        }
                    }
                }
                for (&c, &(pe_c, t_c)) in placement.iter() {
                    for &p in &d.node(c).operands {
                        if p != node_id {
                            continue;
                        }
                        let t_eff = t_c + d.distance(c, p) * ii;
                        if t_eff < t + 1
                            || dist[pe][pe_c] == u32::MAX
                            || dist[pe][pe_c] > t_eff - t
                        {
                            continue 't;
                        }
                    }
                }
                placement.insert(node_id, (pe, t));
                slots.insert((pe, t % ii));
                class_done.insert(t % ii);
                let r = search(
                    d, spec, dist, ops, ii, hor, idx + 1, placement, slots, states, max_states,
                    dominance,
                );
                placement.remove(&node_id);
                slots.remove(&(pe, t % ii));
                match r {
                    Some(true) => return Some(true),
                    Some(false) => {}
                    None => return None,
                }
            }
        }
        Some(false)
    }

    let dist = pe_distances(spec);
    let dominance = dominance_ok(d, spec);
    let mut states = 0usize;
    for ii in 1..=cap {
        let hor = horizon(d, spec, ii);
        let mut placement = BTreeMap::new();
        let mut slots = HashSet::new();
        match search(
            d, spec, &dist, &ops, ii, hor, 0, &mut placement, &mut slots, &mut states, max_states,
            dominance,
        ) {
            Some(true) => return Some(Some(ii)),
            Some(false) => {}
            None => return None,
        }
    }
    Some(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{builtin_arch, parse_arch};
    use crate::dfg::parse_dfg;

    fn toy_arch(ops: &str, rows: u32, cols: u32) -> CgraSpec {
        let mut pes = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                pes.push(format!(
                    r#"{{"row":{r},"col":{c},"ops":[{ops}]}}"#
                ));
            }
        }
        parse_arch(&format!(
            r#"{{"name":"toy","rows":{rows},"cols":{cols},"pes":[{}]}}"#,
            pes.join(",")
        ))
        .unwrap()
    }

    const ALL_TOY_OPS: &str =
        r#""add","sub","mul","xor","and","or","not","neg","shl","shr","lt","select","load","store""#;

    #[test]
    fn res_mii_five_muls_one_pe() {
        let mut text = String::from("n0 input a\n");
        let mut prev = "n0".to_string();
        for i in 1..=5 {
            text.push_str(&format!("n{i} mul n0 {prev}\n"));
            prev = format!("n{i}");
        }
        text.push_str(&format!("out {prev}\n"));
        let d = parse_dfg(&text).unwrap();
        let spec = parse_arch(
            r#"{"name":"x","rows":1,"cols":2,"pes":[
                {"row":0,"col":0,"ops":["mul"]},
                {"row":0,"col":1,"ops":["add"]}
            ]}"#,
        )
        .unwrap();
        assert_eq!(res_mii(&d, &spec).unwrap(), 5);
    }

    #[test]
    fn res_mii_four_adds_four_pes() {
        let d = parse_dfg(
            "n0 input a\nn1 input b\nn2 add n0 n1\nn3 add n0 n1\nn4 add n2 n3\nn5 add n4 n0\nout n5",
        )
        .unwrap();
        let spec = toy_arch(r#""add""#, 2, 2);
        assert_eq!(res_mii(&d, &spec).unwrap(), 1);
    }

    #[test]
    fn rec_mii_cases() {
        let acyclic = parse_dfg("n0 input a\nn1 input b\nn2 add n0 n1\nout n2").unwrap();
        assert_eq!(rec_mii(&acyclic), 1);

        let self_acc =
            parse_dfg("n0 input c\nn1 add n1 n0\ndist n1 n1 1\nout n1").unwrap();
        assert_eq!(rec_mii(&self_acc), 1);

        // 3-op cycle with a single distance-1 back edge: II >= 3.
        let cycle = parse_dfg(
            "n0 input a\nn1 add n3 n0\nn2 xor n1 n0\nn3 add n2 n0\ndist n1 n3 1\nout n3",
        )
        .unwrap();
        assert_eq!(rec_mii(&cycle), 3);
    }

    #[test]
    fn map_chain_on_2x2_at_ii1() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 add n0 n1\nn3 add n2 n0\nout n3")
            .unwrap();
        let spec = toy_arch(r#""add""#, 2, 2);
        let m = map_at(&d, &spec, 1, Duration::from_secs(5)).unwrap();
        assert_eq!(m.ii, 1);
        assert!(verify_mapping(&d, &spec, &m).is_empty());
    }

    #[test]
    fn compile_parallel_kernel_ii1() {
        let d = parse_dfg(
            "n0 input a\nn1 input b\nn2 add n0 n1\nn3 add n0 n0\nn4 add n1 n1\nn5 add n1 n0\nout n2\nout n3\nout n4\nout n5",
        )
        .unwrap();
        let spec = toy_arch(r#""add""#, 2, 2);
        let m = compile(&d, &spec, Duration::from_secs(5)).unwrap();
        assert_eq!(m.ii, 1);
        assert!(verify_mapping(&d, &spec, &m).is_empty());
    }

    #[test]
    fn compile_serial_chain_on_single_pe() {
        let mut text = String::from("n0 input a\n");
        let mut prev = "n0".to_string();
        for i in 1..=6 {
            text.push_str(&format!("n{i} add {prev} n0\n"));
            prev = format!("n{i}");
        }
        text.push_str(&format!("out {prev}\n"));
        let d = parse_dfg(&text).unwrap();
        let spec = toy_arch(r#""add""#, 1, 1);
        let m = compile(&d, &spec, Duration::from_secs(5)).unwrap();
        assert_eq!(m.ii, 6);
        assert!(verify_mapping(&d, &spec, &m).is_empty());
    }

    #[test]
    fn compile_empty_kernel() {
        let d = parse_dfg("n0 input a\nout n0").unwrap();
        let spec = toy_arch(r#""add""#, 1, 1);
        let m = compile(&d, &spec, Duration::from_secs(1)).unwrap();
        assert_eq!(m.ii, 1);
        assert!(m.placement.is_empty());
        assert_eq!(m.schedule_length(), 0);
    }

    #[test]
    fn verifier_rejects_modulo_clash() {
        let d = parse_dfg(
            "n0 input a\nn1 input b\nn2 add n0 n1\nn3 add n1 n0\nout n2\nout n3",
        )
        .unwrap();
        let spec = toy_arch(r#""add""#, 1, 1);
        let mut placement = BTreeMap::new();
        placement.insert(NodeId(2), (0usize, 0u32));
        placement.insert(NodeId(3), (0usize, 2u32));
        let m = Mapping {
            ii: 2,
            placement,
            routes: BTreeMap::new(),
        };
        let v = verify_mapping(&d, &spec, &m);
        assert!(v.iter().any(|x| matches!(x, MapViolation::ModuloResource(0, 0))));
    }

    #[test]
    fn verifier_rejects_unlinked_route() {
        // Two PEs with no links at all.
        let spec = parse_arch(
            r#"{"name":"x","rows":1,"cols":2,"pes":[
                {"row":0,"col":0,"ops":["add"]},
                {"row":0,"col":1,"ops":["add"]}
            ],"links":[]}"#,
        )
        .unwrap();
        let d = parse_dfg("n0 input a\nn1 add n0 n0\nn2 add n1 n0\nout n2").unwrap();
        let mut placement = BTreeMap::new();
        placement.insert(NodeId(1), (0usize, 0u32));
        placement.insert(NodeId(2), (1usize, 1u32));
        let mut routes = BTreeMap::new();
        routes.insert((NodeId(1), NodeId(2)), vec![(0usize, 0u32)]);
        let m = Mapping {
            ii: 2,
            placement,
            routes,
        };
        let v = verify_mapping(&d, &spec, &m);
        assert!(v
            .iter()
            .any(|x| matches!(x, MapViolation::BadRoute(_, _, _))));
    }

    #[test]
    fn estimate_cycles_formula() {
        let mut placement = BTreeMap::new();
        placement.insert(NodeId(0), (0usize, 2u32));
        let m = Mapping {
            ii: 1,
            placement: placement.clone(),
            routes: BTreeMap::new(),
        };
        assert_eq!(m.schedule_length(), 3);
        assert_eq!(estimate_cycles(&m, 100), 102);
        assert_eq!(estimate_cycles(&m, 1), 3);

        placement.insert(NodeId(1), (0usize, 3u32));
        let m2 = Mapping {
            ii: 2,
            placement,
            routes: BTreeMap::new(),
        };
        assert_eq!(m2.schedule_length(), 4);
        assert_eq!(estimate_cycles(&m2, 10), 22);
    }

    #[test]
    fn compile_ii_at_least_mii() {
        let d = parse_dfg(
            "n0 input a\nn1 mul n0 n0\nn2 mul n1 n0\nn3 mul n2 n0\nout n3",
        )
        .unwrap();
        let spec = parse_arch(
            r#"{"name":"x","rows":1,"cols":2,"pes":[
                {"row":0,"col":0,"ops":["mul"]},
                {"row":0,"col":1,"ops":["add"]}
            ]}"#,
        )
        .unwrap();
        let m = compile(&d, &spec, Duration::from_secs(5)).unwrap();
        let mii = res_mii(&d, &spec).unwrap().max(rec_mii(&d));
        assert!(m.ii >= mii);
        assert!(verify_mapping(&d, &spec, &m).is_empty());
    }

    fn random_kernel(rng: &mut impl rand::Rng, max_nodes: usize) -> Dfg {
        use crate::dfg::DfgBuilder;
        let op_pool = [
            OpKind::Add,
            OpKind::Sub,
            OpKind::Mul,
            OpKind::Xor,
            OpKind::Not,
            OpKind::Shl,
        ];
        let mut b = DfgBuilder::new();
        let mut ids = vec![b.input("a"), b.input("b")];
        let n_ops = rng.gen_range(1..=max_nodes);
        for _ in 0..n_ops {
            let op = op_pool[rng.gen_range(0..op_pool.len())];
            let operands: Vec<_> = (0..op.arity())
                .map(|_| ids[rng.gen_range(0..ids.len())])
                .collect();
            ids.push(b.op(op, &operands));
        }
        b.output(*ids.last().unwrap());
        b.finish()
    }

    #[test]
    fn random_instances_verify_and_match_exhaustive() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        let spec = toy_arch(ALL_TOY_OPS, 2, 2);
        let mut compared = 0;
        for _ in 0..60 {
            let d = random_kernel(&mut rng, 8);
            let m = compile(&d, &spec, Duration::from_secs(5)).unwrap();
            assert!(
                verify_mapping(&d, &spec, &m).is_empty(),
                "mapping fails verification"
            );
            if let Some(Some(opt)) = optimal_ii_exhaustive(&d, &spec, m.ii, 3_000_000) {
                assert_eq!(m.ii, opt, "heuristic II differs from optimal");
                compared += 1;
            }
        }
        assert!(compared > 0);
    }

    #[test]
    fn superset_pe_never_hurts() {
        let d = parse_dfg(
            "n0 input a\nn1 mul n0 n0\nn2 mul n1 n0\nn3 add n2 n0\nout n3",
        )
        .unwrap();
        let small = parse_arch(
            r#"{"name":"x","rows":1,"cols":2,"pes":[
                {"row":0,"col":0,"ops":["mul","add"]},
                {"row":0,"col":1,"ops":["add"]}
            ]}"#,
        )
        .unwrap();
        let big = parse_arch(
            r#"{"name":"x","rows":1,"cols":3,"pes":[
                {"row":0,"col":0,"ops":["mul","add"]},
                {"row":0,"col":1,"ops":["add"]},
                {"row":0,"col":2,"ops":["mul","add"]}
            ]}"#,
        )
        .unwrap();
        let m1 = compile(&d, &small, Duration::from_secs(5)).unwrap();
        let m2 = compile(&d, &big, Duration::from_secs(5)).unwrap();
        assert!(m2.ii <= m1.ii);
    }

    #[test]
    fn rewritten_cost_trap_maps_on_cca() {
        use crate::egraph::SaturationLimits;
        use crate::hybrid::hybrid_rewrite;
        use crate::rules::{builtin_ruleset, RulesetKind};
        let d = parse_dfg("n0 input a\nn1 input b\nn2 sub n0 n1\nout n2").unwrap();
        let spec = builtin_arch("cca").unwrap();
        let rules = builtin_ruleset(RulesetKind::Int);
        let (out, _, _) =
            hybrid_rewrite(&d, &rules, &spec.supported_ops(), &SaturationLimits::default())
                .unwrap();
        let m = compile(&out, &spec, Duration::from_secs(10)).unwrap();
        assert!(verify_mapping(&out, &spec, &m).is_empty());
        assert!(m.ii as usize <= out.nodes.len());
    }

    #[test]
    fn loop_carried_kernel_maps() {
        let d = parse_dfg("n0 input x\nn1 add n1 n0\ndist n1 n1 1\nout n1").unwrap();
        let spec = toy_arch(r#""add""#, 2, 2);
        let m = compile(&d, &spec, Duration::from_secs(5)).unwrap();
        assert!(verify_mapping(&d, &spec, &m).is_empty());
        assert_eq!(m.ii, 1);
    }
}
