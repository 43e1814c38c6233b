//! E-graph engine: union-find-backed congruence structure, the explorative
//! saturation loop, and best-program extraction under the CGRA cost
//! function.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::dfg::OpSet;
use crate::dfg::{cost, Dfg, Node, NodeId, OpKind, Payload, UNSUPPORTED_PENALTY};
use crate::rules::{compact, Pattern, PatternNode, RewriteRule};

/// Canonical identifier of an e-class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EClassId(pub u32);

/// Operator carried by an e-node.  Float literals are stored as raw bits so
/// e-nodes are hashable and totally ordered.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EOp {
    Op(OpKind),
    IntLit(i32),
    FloatBits(u64),
    Input(String),
    /// A loop-carried dependence of the given iteration distance.
    /// Structural patterns never match it, so rewriting cannot cross a
    /// loop-carried edge.  Cost 0, and its child is not charged: the
    /// producer of a delayed value is paid for where it is computed.
    Delay(u32),
}

impl EOp {
    fn cost(&self, ops: &OpSet) -> u64 {
        match self {
            EOp::Op(op) => {
                if op.is_leaf() || ops.contains(*op) {
                    1
                } else {
                    UNSUPPORTED_PENALTY
                }
            }
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ENode {
    pub op: EOp,
    pub children: Vec<EClassId>,
}

#[derive(Debug, Clone, Default)]
pub struct EClass {
    pub nodes: Vec<ENode>,
    /// (parent e-node as last canonicalized, parent class) back-references
    /// for congruence maintenance.
    parents: Vec<(ENode, EClassId)>,
}

#[derive(Debug, Default)]
struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn make_set(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            x = self.parent[x as usize];
        }
        x
    }
}

/// The e-graph: a congruence-closed set of equivalent DFGs.
#[derive(Debug, Default)]
pub struct EGraph {
    uf: UnionFind,
    classes: BTreeMap<u32, EClass>,
    hashcons: HashMap<ENode, u32>,
    /// Classes of the original DFG outputs, in output order.
    pub roots: Vec<EClassId>,
    /// Classes whose parents need congruence repair.
    pending: Vec<u32>,
    /// Monotone counter of distinct e-nodes ever added (size-limit basis).
    added_nodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaturationLimits {
    pub iter_limit: usize,
    pub node_limit: usize,
    pub wall_clock_limit: Duration,
}

impl Default for SaturationLimits {
    fn default() -> Self {
        SaturationLimits {
            iter_limit: 10,
            node_limit: 100_000,
            wall_clock_limit: Duration::from_secs(300),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Saturated,
    IterLimit,
    NodeLimit,
    Timeout,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::Saturated => "saturated",
            StopReason::IterLimit => "iter_limit",
            StopReason::NodeLimit => "node_limit",
            StopReason::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SaturationReport {
    pub stop_reason: StopReason,
    pub iterations_run: usize,
    pub final_node_count: usize,
    pub rule_application_counts: BTreeMap<String, u64>,
}

/// Result of extracting the best represented program.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub dfg: Dfg,
    /// Σ per-output minimum tree cost (shared subterms counted per use).
    pub tree_cost: u64,
    /// Cost of the extracted DFG with sharing (what the hardware pays).
    pub dag_cost: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum ExtractError {
    #[error("no finite-cost acyclic term is extractable from class {0:?}")]
    NoFiniteTerm(EClassId),
}

const INF: u64 = u64::MAX / 4;

impl EGraph {
    pub fn find(&self, id: EClassId) -> EClassId {
        EClassId(self.uf.find(id.0))
    }

    fn canonicalize(&self, node: &mut ENode) {
        for c in node.children.iter_mut() {
            *c = self.find(*c);
        }
    }

    /// Add an e-node (hashconsed).  Returns its class and whether it was new.
    pub fn add(&mut self, node: ENode) -> (EClassId, bool) {
        let mut node = node;
        self.canonicalize(&mut node);
        if let Some(&id) = self.hashcons.get(&node) {
            return (self.find(EClassId(id)), false);
        }
        let id = self.uf.make_set();
        self.classes.insert(id, EClass::default());
        self.insert_node(node, id);
        (EClassId(id), true)
    }

    /// Add an e-node directly into an existing class; merges with the
    /// hashcons hit when the node is already represented elsewhere.
    fn add_into(&mut self, node: ENode, class: EClassId) {
        let mut node = node;
        self.canonicalize(&mut node);
        let class = self.find(class);
        if let Some(&hit) = self.hashcons.get(&node) {
            let hit = self.find(EClassId(hit));
            self.merge(hit, class);
            return;
        }
        self.insert_node(node, class.0);
    }

    fn insert_node(&mut self, node: ENode, class: u32) {
        for &c in &node.children {
            self.classes
                .get_mut(&c.0)
                .expect("canonical child class exists")
                .parents
                .push((node.clone(), EClassId(class)));
        }
        self.classes
            .get_mut(&class)
            .expect("target class exists")
            .nodes
            .push(node.clone());
        self.hashcons.insert(node, class);
        self.added_nodes += 1;
    }

    /// Merge two classes.  Returns the canonical id and whether anything
    /// changed.  Congruence repairs are queued; call `rebuild`.
    pub fn merge(&mut self, a: EClassId, b: EClassId) -> (EClassId, bool) {
        let ra = self.uf.find(a.0);
        let rb = self.uf.find(b.0);
        if ra == rb {
            return (EClassId(ra), false);
        }
        let (keep, drop) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.uf.parent[drop as usize] = keep;
        let merged = self.classes.remove(&drop).unwrap_or_default();
        let target = self.classes.entry(keep).or_default();
        target.nodes.extend(merged.nodes);
        target.parents.extend(merged.parents);
        self.pending.push(keep);
        (EClassId(keep), true)
    }

    /// Restore the congruence invariant after merges.
    pub fn rebuild(&mut self) {
        while let Some(raw) = self.pending.pop() {
            let id = self.uf.find(raw);
            let Some(class) = self.classes.get_mut(&id) else {
                continue;
            };
            let parents = std::mem::take(&mut class.parents);

            // Re-canonicalize and dedup this class's own nodes.
            let mut nodes = std::mem::take(&mut class.nodes);
            for n in nodes.iter_mut() {
                self.canonicalize_ref(n);
            }
            let mut seen: HashSet<ENode> = HashSet::new();
            nodes.retain(|n| seen.insert(n.clone()));
            nodes.sort();
            if let Some(class) = self.classes.get_mut(&id) {
                class.nodes = nodes;
            }

            let mut new_parents: Vec<(ENode, EClassId)> = Vec::new();
            let mut seen_parents: HashSet<ENode> = HashSet::new();
            for (mut pnode, pclass) in parents {
                self.hashcons.remove(&pnode);
                self.canonicalize_ref(&mut pnode);
                let mut pclass = EClassId(self.uf.find(pclass.0));
                if let Some(&existing) = self.hashcons.get(&pnode) {
                    let existing = EClassId(self.uf.find(existing));
                    if existing != pclass {
                        let (kept, _) = self.merge(existing, pclass);
                        pclass = kept;
                    }
                } else {
                    self.hashcons.insert(pnode.clone(), pclass.0);
                }
                if seen_parents.insert(pnode.clone()) {
                    new_parents.push((pnode, pclass));
                }
            }
            let id = self.uf.find(id);
            if let Some(class) = self.classes.get_mut(&id) {
                class.parents.extend(new_parents);
            }
        }
        // Canonicalize hashcons keys and values.
        let entries: Vec<(ENode, u32)> = self.hashcons.drain().collect();
        for (mut n, v) in entries {
            self.canonicalize_ref(&mut n);
            self.hashcons.insert(n, self.uf.find(v));
        }
        for r in self.roots.iter_mut() {
            *r = EClassId(self.uf.find(r.0));
        }
    }

    fn canonicalize_ref(&self, node: &mut ENode) {
        for c in node.children.iter_mut() {
            *c = EClassId(self.uf.find(c.0));
        }
    }

    /// Total distinct e-nodes over canonical classes.
    pub fn node_count(&self) -> usize {
        self.class_ids()
            .into_iter()
            .map(|id| self.class_nodes(id).len())
            .sum()
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    /// Canonical class ids in ascending order.
    pub fn class_ids(&self) -> Vec<EClassId> {
        self.classes.keys().map(|&k| EClassId(k)).collect()
    }

    /// Canonicalized, deduplicated, sorted nodes of a class.
    pub fn class_nodes(&self, id: EClassId) -> Vec<ENode> {
        let id = self.find(id);
        let Some(class) = self.classes.get(&id.0) else {
            return Vec::new();
        };
        let mut out: Vec<ENode> = class
            .nodes
            .iter()
            .map(|n| {
                let mut n = n.clone();
                self.canonicalize_ref(&mut n);
                n
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Structured-text dump of classes and e-nodes, for debugging.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for id in self.class_ids() {
            let mark = if self.roots.contains(&id) { " (root)" } else { "" };
            out.push_str(&format!("class c{}{}:\n", id.0, mark));
            for n in self.class_nodes(id) {
                let desc = match &n.op {
                    EOp::Op(op) => {
                        let args: Vec<String> =
                            n.children.iter().map(|c| format!("c{}", c.0)).collect();
                        format!("{}({})", op.symbol(), args.join(", "))
                    }
                    EOp::IntLit(v) => format!("const {v}"),
                    EOp::FloatBits(b) => format!("fconst {}", f64::from_bits(*b)),
                    EOp::Input(name) => format!("input {name}"),
                    EOp::Delay(k) => format!("delay[{k}](c{})", n.children[0].0),
                };
                out.push_str(&format!("  {desc}\n"));
            }
        }
        out
    }
}

/// Build an e-graph representing exactly `d` (hashcons-shared).
///
/// Loop-carried operands (edge distance > 0) are wrapped in a Delay e-node,
/// so the graph of e-classes may be cyclic through delays while staying a
/// faithful encoding of the distance annotations.
pub fn egraph_init(d: &Dfg) -> EGraph {
    let mut g = EGraph::default();
    // Reserve one class per DFG node up front so back edges can reference
    // classes that have not been populated yet.
    let class_of: Vec<EClassId> = d
        .nodes
        .iter()
        .map(|_| {
            let id = g.uf.make_set();
            g.classes.insert(id, EClass::default());
            EClassId(id)
        })
        .collect();
    for id in d.node_ids() {
        let node = d.node(id);
        let eop = match (node.op, &node.payload) {
            (OpKind::Const, Some(Payload::IntLit(v))) => EOp::IntLit(*v),
            (OpKind::Fconst, Some(Payload::FloatLit(v))) => EOp::FloatBits(v.to_bits()),
            (OpKind::Input, Some(Payload::InputName(n))) => EOp::Input(n.clone()),
            (op, _) => EOp::Op(op),
        };
        let mut children = Vec::with_capacity(node.operands.len());
        for &operand in &node.operands {
            let dist = d.distance(id, operand);
            let base = class_of[operand.index()];
            if dist > 0 {
                let (delayed, _) = g.add(ENode {
                    op: EOp::Delay(dist),
                    children: vec![base],
                });
                children.push(delayed);
            } else {
                children.push(base);
            }
        }
        g.add_into(ENode { op: eop, children }, class_of[id.index()]);
    }
    g.rebuild();
    g.roots = d
        .outputs
        .iter()
        .map(|o| g.find(class_of[o.index()]))
        .collect();
    g
}

// ---------------------------------------------------------------------------
// E-matching
// ---------------------------------------------------------------------------

/// One match of a pattern inside an e-graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct EMatch {
    /// Classes matched by the pattern outputs, positionally.
    pub classes: Vec<EClassId>,
    pub substitution: BTreeMap<String, EClassId>,
}

fn ematch_node(
    g: &EGraph,
    p: &Pattern,
    pidx: usize,
    class: EClassId,
    subst: &BTreeMap<String, EClassId>,
    out: &mut Vec<BTreeMap<String, EClassId>>,
) {
    let class = g.find(class);
    match &p.nodes[pidx] {
        PatternNode::Var(v) => {
            if let Some(&bound) = subst.get(v) {
                if bound == class {
                    out.push(subst.clone());
                }
            } else {
                let mut s = subst.clone();
                s.insert(v.clone(), class);
                out.push(s);
            }
        }
        PatternNode::IntLit(k) => {
            if g.class_nodes(class).iter().any(|n| n.op == EOp::IntLit(*k)) {
                out.push(subst.clone());
            }
        }
        PatternNode::FloatLit(k) => {
            if g.class_nodes(class)
                .iter()
                .any(|n| n.op == EOp::FloatBits(k.to_bits()))
            {
                out.push(subst.clone());
            }
        }
        PatternNode::Op(op, children) => {
            for node in g.class_nodes(class) {
                if node.op != EOp::Op(*op) || node.children.len() != children.len() {
                    continue;
                }
                let mut partials = vec![subst.clone()];
                for (i, &cp) in children.iter().enumerate() {
                    let mut next = Vec::new();
                    for s in &partials {
                        ematch_node(g, p, cp, node.children[i], s, &mut next);
                    }
                    partials = next;
                    if partials.is_empty() {
                        break;
                    }
                }
                out.extend(partials);
            }
        }
    }
}

fn ematch_outputs(
    g: &EGraph,
    p: &Pattern,
    out_idx: usize,
    classes: Vec<EClassId>,
    subst: BTreeMap<String, EClassId>,
    results: &mut Vec<EMatch>,
) {
    if out_idx == p.outputs.len() {
        results.push(EMatch {
            classes,
            substitution: subst,
        });
        return;
    }
    for class in g.class_ids() {
        let mut partials = Vec::new();
        ematch_node(g, p, p.outputs[out_idx], class, &subst, &mut partials);
        for s in partials {
            let mut cs = classes.clone();
            cs.push(class);
            ematch_outputs(g, p, out_idx + 1, cs, s, results);
        }
    }
}

/// All matches of a pattern over the represented terms, deterministically
/// ordered (ascending matched classes, then substitution order).
pub fn ematch(g: &EGraph, p: &Pattern) -> Vec<EMatch> {
    let mut results = Vec::new();
    ematch_outputs(g, p, 0, Vec::new(), BTreeMap::new(), &mut results);
    results.sort();
    results.dedup();
    results
}

/// Instantiate a pattern in the e-graph under a substitution.  Returns the
/// classes of the pattern outputs and whether any new e-node was created.
fn instantiate(
    g: &mut EGraph,
    p: &Pattern,
    subst: &BTreeMap<String, EClassId>,
) -> (Vec<EClassId>, bool) {
    let mut ids: Vec<EClassId> = Vec::with_capacity(p.nodes.len());
    let mut any_new = false;
    for node in &p.nodes {
        let id = match node {
            PatternNode::Var(v) => subst[v],
            PatternNode::IntLit(k) => {
                let (id, new) = g.add(ENode {
                    op: EOp::IntLit(*k),
                    children: vec![],
                });
                any_new |= new;
                id
            }
            PatternNode::FloatLit(k) => {
                let (id, new) = g.add(ENode {
                    op: EOp::FloatBits(k.to_bits()),
                    children: vec![],
                });
                any_new |= new;
                id
            }
            PatternNode::Op(op, children) => {
                let cs = children.iter().map(|&c| ids[c]).collect();
                let (id, new) = g.add(ENode {
                    op: EOp::Op(*op),
                    children: cs,
                });
                any_new |= new;
                id
            }
        };
        ids.push(id);
    }
    (p.outputs.iter().map(|&o| ids[o]).collect(), any_new)
}

/// Run the explorative saturation loop: per iteration collect all matches
/// across all rules, then apply them non-destructively.
pub fn run_saturation(
    g: &mut EGraph,
    rules: &[RewriteRule],
    lim: &SaturationLimits,
) -> SaturationReport {
    let start = Instant::now();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut iterations = 0usize;
    let mut stop = None;

    while stop.is_none() {
        if iterations >= lim.iter_limit {
            stop = Some(StopReason::IterLimit);
            break;
        }
        iterations += 1;

        // Collect phase.
        let mut batch: Vec<(usize, EMatch)> = Vec::new();
        for (ri, rule) in rules.iter().enumerate() {
            for m in ematch(g, &rule.lhs) {
                batch.push((ri, m));
            }
            if start.elapsed() > lim.wall_clock_limit {
                stop = Some(StopReason::Timeout);
                break;
            }
        }
        if stop.is_some() {
            break;
        }

        // Apply phase: only adds equalities, never removes terms.
        let mut changed = false;
        for (ri, m) in batch {
            let rule = &rules[ri];
            let (new_classes, created) = instantiate(g, &rule.rhs, &m.substitution);
            let mut united = created;
            for (old, new) in m.classes.iter().zip(new_classes.iter()) {
                let (_, u) = g.merge(*old, *new);
                united |= u;
            }
            if united {
                *counts.entry(rule.name.clone()).or_insert(0) += 1;
                changed = true;
            }
            if start.elapsed() > lim.wall_clock_limit {
                stop = Some(StopReason::Timeout);
                break;
            }
        }
        g.rebuild();

        if stop.is_some() {
            break;
        }
        if !changed {
            stop = Some(StopReason::Saturated);
        } else if g.added_nodes >= lim.node_limit {
            stop = Some(StopReason::NodeLimit);
        } else if start.elapsed() > lim.wall_clock_limit {
            stop = Some(StopReason::Timeout);
        }
    }

    SaturationReport {
        stop_reason: stop.unwrap_or(StopReason::IterLimit),
        iterations_run: iterations,
        final_node_count: g.node_count(),
        rule_application_counts: counts,
    }
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

fn node_tree_cost(g: &EGraph, node: &ENode, ops: &OpSet, costs: &BTreeMap<EClassId, u64>) -> u64 {
    // A Delay reads a register written in an earlier iteration; the
    // producing computation is charged where it runs, not at the read.
    if matches!(node.op, EOp::Delay(k) if k > 0) {
        return 0;
    }
    let mut total = node.op.cost(ops);
    for c in &node.children {
        total = total.saturating_add(*costs.get(&g.find(*c)).unwrap_or(&INF));
    }
    total
}

/// Per-class minimum tree cost via bottom-up fixpoint.  Classes with no
/// finite acyclic derivation keep cost INF.
pub fn class_tree_costs(g: &EGraph, ops: &OpSet) -> BTreeMap<EClassId, u64> {
    let ids = g.class_ids();
    let mut costs: BTreeMap<EClassId, u64> = ids.iter().map(|&i| (i, INF)).collect();
    loop {
        let mut changed = false;
        for &id in &ids {
            for node in g.class_nodes(id) {
                let total = node_tree_cost(g, &node, ops, &costs);
                let entry = costs.get_mut(&id).unwrap();
                if total < *entry {
                    *entry = total;
                    changed = true;
                }
            }
        }
        if !changed {
            return costs;
        }
    }
}

/// Pick one e-node per finite-cost class such that the selection realizes
/// each class's minimum tree cost and is acyclic over distance-0 edges.
/// Settling in dependency order guarantees acyclicity: a node is only
/// chosen once all its (distance-0) children are already settled.
fn settle_selection(
    g: &EGraph,
    ops: &OpSet,
    costs: &BTreeMap<EClassId, u64>,
) -> BTreeMap<EClassId, ENode> {
    let mut chosen: BTreeMap<EClassId, ENode> = BTreeMap::new();
    loop {
        let mut progressed = false;
        for (&id, &target) in costs {
            if target >= INF || chosen.contains_key(&id) {
                continue;
            }
            for node in g.class_nodes(id) {
                let delayed = matches!(node.op, EOp::Delay(k) if k > 0);
                if !delayed
                    && !node
                        .children
                        .iter()
                        .all(|c| chosen.contains_key(&g.find(*c)))
                {
                    continue;
                }
                if node_tree_cost(g, &node, ops, costs) == target {
                    chosen.insert(id, node);
                    progressed = true;
                    break;
                }
            }
        }
        if !progressed {
            return chosen;
        }
    }
}

/// Follow chosen Delay nodes to the class that actually computes a value,
/// accumulating the iteration distance.  None on an all-delay cycle.
fn resolve_delays(
    g: &EGraph,
    chosen: &BTreeMap<EClassId, ENode>,
    start: EClassId,
) -> Option<(EClassId, u32)> {
    let mut class = g.find(start);
    let mut delay = 0u32;
    let mut seen = HashSet::new();
    loop {
        if !seen.insert(class) {
            return None;
        }
        match chosen.get(&class) {
            Some(node) => match node.op {
                EOp::Delay(k) => {
                    delay += k;
                    class = g.find(node.children[0]);
                }
                _ => return Some((class, delay)),
            },
            None => return None,
        }
    }
}

/// Materialize a selection as a concrete DFG rooted at `roots`.  Returns
/// None when the selection is incomplete, has a distance-0 cycle, or a root
/// resolves to a pure delay.
fn realize(g: &EGraph, chosen: &BTreeMap<EClassId, ENode>, roots: &[EClassId]) -> Option<Dfg> {
    // Phase 1: collect the classes that become DFG nodes.
    let mut needed: BTreeSet<EClassId> = BTreeSet::new();
    let mut work: Vec<EClassId> = Vec::new();
    let mut resolved_roots = Vec::new();
    for &r in roots {
        let (base, delay) = resolve_delays(g, chosen, r)?;
        if delay > 0 {
            return None;
        }
        resolved_roots.push(base);
        work.push(base);
    }
    while let Some(class) = work.pop() {
        if !needed.insert(class) {
            continue;
        }
        let node = chosen.get(&class)?;
        for &c in &node.children {
            let (base, _) = resolve_delays(g, chosen, c)?;
            work.push(base);
        }
    }

    // Phase 2: one DFG node per needed class; operands may forward-reference
    // (compact re-toposorts and rejects distance-0 cycles).
    let id_of: BTreeMap<EClassId, NodeId> = needed
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, NodeId(i as u32)))
        .collect();
    let mut d = Dfg::default();
    for &class in &needed {
        let node = &chosen[&class];
        let my_id = id_of[&class];
        let (op, payload) = match &node.op {
            EOp::Op(op) => (*op, None),
            EOp::IntLit(v) => (OpKind::Const, Some(Payload::IntLit(*v))),
            EOp::FloatBits(b) => (OpKind::Fconst, Some(Payload::FloatLit(f64::from_bits(*b)))),
            EOp::Input(name) => (OpKind::Input, Some(Payload::InputName(name.clone()))),
            EOp::Delay(_) => unreachable!("delays are resolved away"),
        };
        let mut operands = Vec::with_capacity(node.children.len());
        for &c in &node.children {
            let (base, delay) = resolve_delays(g, chosen, c)?;
            let cid = id_of[&base];
            operands.push(cid);
            if delay > 0 {
                d.edge_distances.insert((my_id, cid), delay);
            }
        }
        d.nodes.push(Node {
            name: format!("n{}", my_id.0),
            op,
            operands,
            payload,
        });
    }
    d.outputs = resolved_roots.iter().map(|c| id_of[c]).collect();
    compact(&d)
}

/// Extract the minimum-tree-cost program represented in `g`, then confirm
/// or improve its shared (DAG) cost with a bounded exact search when the
/// graph is small enough.
pub fn extract_best(g: &EGraph, ops: &OpSet) -> Result<Extraction, ExtractError> {
    let costs = class_tree_costs(g, ops);
    for &r in &g.roots {
        let r = g.find(r);
        if *costs.get(&r).unwrap_or(&INF) >= INF {
            return Err(ExtractError::NoFiniteTerm(r));
        }
    }
    let chosen = settle_selection(g, ops, &costs);
    let tree_cost: u64 = g
        .roots
        .iter()
        .map(|r| costs[&g.find(*r)])
        .fold(0u64, |a, b| a.saturating_add(b));
    let dfg = realize(g, &chosen, &g.roots)
        .ok_or_else(|| ExtractError::NoFiniteTerm(g.find(g.roots[0])))?;
    let mut best = Extraction {
        dag_cost: cost(&dfg, ops),
        dfg,
        tree_cost,
    };

    if let Some((dfg, dag_cost)) = exhaustive_dag_search(g, ops, &costs, 20_000) {
        if dag_cost < best.dag_cost {
            best.dag_cost = dag_cost;
            best.dfg = dfg;
        }
    }
    Ok(best)
}

/// Exact DAG-cost search: enumerate per-class e-node choices (finite-cost
/// classes only) and keep the cheapest realizable DFG.  None when the
/// combination budget or class cap is exceeded.
fn exhaustive_dag_search(
    g: &EGraph,
    ops: &OpSet,
    costs: &BTreeMap<EClassId, u64>,
    budget: usize,
) -> Option<(Dfg, u64)> {
    let finite = |c: EClassId| *costs.get(&g.find(c)).unwrap_or(&INF) < INF;
    let classes: Vec<EClassId> = g.class_ids().into_iter().filter(|&c| finite(c)).collect();
    if classes.len() > 20 {
        return None;
    }
    let candidates: Vec<Vec<ENode>> = classes
        .iter()
        .map(|&c| {
            g.class_nodes(c)
                .into_iter()
                .filter(|n| {
                    matches!(n.op, EOp::Delay(k) if k > 0)
                        || n.children.iter().all(|&ch| finite(ch))
                })
                .collect()
        })
        .collect();
    let mut combos: usize = 1;
    for c in &candidates {
        combos = combos.saturating_mul(c.len().max(1));
        if combos > budget {
            return None;
        }
    }
    let mut pick = vec![0usize; classes.len()];
    let mut best: Option<(Dfg, u64)> = None;
    loop {
        let chosen: BTreeMap<EClassId, ENode> = classes
            .iter()
            .enumerate()
            .filter(|(i, _)| !candidates[*i].is_empty())
            .map(|(i, &c)| (c, candidates[i][pick[i]].clone()))
            .collect();
        if let Some(dfg) = realize(g, &chosen, &g.roots) {
            let c = cost(&dfg, ops);
            if best.as_ref().map_or(true, |(_, bc)| c < *bc) {
                best = Some((dfg, c));
            }
        }
        // Advance the mixed-radix counter.
        let mut i = 0;
        loop {
            if i == pick.len() {
                return best;
            }
            if candidates[i].len() <= 1 {
                i += 1;
                continue;
            }
            pick[i] += 1;
            if pick[i] < candidates[i].len() {
                break;
            }
            pick[i] = 0;
            i += 1;
        }
    }
}

/// Composition: initialize, saturate, extract.
pub fn eqsat_rewrite(
    d: &Dfg,
    rules: &[RewriteRule],
    ops: &OpSet,
    lim: &SaturationLimits,
) -> Result<(Dfg, SaturationReport, Extraction), ExtractError> {
    let mut g = egraph_init(d);
    let report = run_saturation(&mut g, rules, lim);
    let ex = extract_best(&g, ops)?;
    Ok((ex.dfg.clone(), report, ex))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfg::{interpret, parse_dfg, validate, Value};
    use crate::rules::{builtin_ruleset, parse_rule, RulesetKind};
    use std::collections::HashMap as StdHashMap;

    fn ops(list: &[OpKind]) -> OpSet {
        OpSet::from_ops(list)
    }

    #[test]
    fn init_shares_subterms() {
        // (a+b)+(a+b): classes for a, b, a+b, root.
        let d = parse_dfg("n0 input a\nn1 input b\nn2 add n0 n1\nn3 add n2 n2\nout n3")
            .unwrap();
        let g = egraph_init(&d);
        assert_eq!(g.class_count(), 4);
        // Structurally duplicate adds also share.
        let d2 = parse_dfg(
            "n0 input a\nn1 input b\nn2 add n0 n1\nn3 add n0 n1\nn4 add n2 n3\nout n4",
        )
        .unwrap();
        let g2 = egraph_init(&d2);
        assert_eq!(g2.class_count(), 4);
    }

    #[test]
    fn init_single_node() {
        let d = parse_dfg("n0 const 5\nout n0").unwrap();
        let g = egraph_init(&d);
        assert_eq!(g.class_count(), 1);
    }

    #[test]
    fn init_class_count_at_most_node_count() {
        let d = parse_dfg(
            "n0 input a\nn1 input b\nn2 const -1\nn3 mul n0 n2\nn4 sub n3 n1\nout n4",
        )
        .unwrap();
        let g = egraph_init(&d);
        assert!(g.class_count() <= d.nodes.len());
    }

    #[test]
    fn init_extracts_equivalent() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 mul n0 n1\nn3 add n2 n0\nout n3")
            .unwrap();
        let g = egraph_init(&d);
        let all = ops(&[OpKind::Mul, OpKind::Add]);
        let ex = extract_best(&g, &all).unwrap();
        assert!(validate(&ex.dfg).is_empty());
        let env: StdHashMap<String, Value> =
            [("a".into(), Value::Int(7)), ("b".into(), Value::Int(-3))].into();
        let mem = StdHashMap::new();
        let r1 = interpret(&d, &env, &mem).unwrap();
        let r2 = interpret(&ex.dfg, &env, &mem).unwrap();
        assert_eq!(r1[&d.outputs[0]].as_int(), r2[&ex.dfg.outputs[0]].as_int());
    }

    #[test]
    fn merge_idempotent() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 add n0 n1\nout n2").unwrap();
        let mut g = egraph_init(&d);
        let before = g.node_count();
        let a = g.roots[0];
        let (_, changed) = g.merge(a, a);
        assert!(!changed);
        assert_eq!(g.node_count(), before);
    }

    #[test]
    fn congruence_after_merge() {
        // not(a), not(b): merging a with b must unify the two nots.
        let d = parse_dfg(
            "n0 input a\nn1 input b\nn2 not n0\nn3 not n1\nn4 add n2 n3\nout n4",
        )
        .unwrap();
        let mut g = egraph_init(&d);
        let find_input = |g: &EGraph, name: &str| {
            g.class_ids()
                .into_iter()
                .find(|&c| {
                    g.class_nodes(c)
                        .iter()
                        .any(|n| n.op == EOp::Input(name.to_string()))
                })
                .unwrap()
        };
        let ca = find_input(&g, "a");
        let cb = find_input(&g, "b");
        g.merge(ca, cb);
        g.rebuild();
        let not_classes: Vec<EClassId> = g
            .class_ids()
            .into_iter()
            .filter(|&c| {
                g.class_nodes(c)
                    .iter()
                    .any(|n| n.op == EOp::Op(OpKind::Not))
            })
            .collect();
        assert_eq!(not_classes.len(), 1);
    }

    /// Naive congruence-closure oracle: iterate "same op + equivalent
    /// children => equivalent" to a fixpoint over an explicit partition.
    fn naive_congruence(nodes: &[(EOp, Vec<usize>)], merges: &[(usize, usize)]) -> Vec<usize> {
        let n = nodes.len();
        let mut rep: Vec<usize> = (0..n).collect();
        fn find(rep: &[usize], mut x: usize) -> usize {
            while rep[x] != x {
                x = rep[x];
            }
            x
        }
        fn union(rep: &mut [usize], a: usize, b: usize) {
            let (ra, rb) = (find(rep, a), find(rep, b));
            if ra != rb {
                let (k, d) = if ra < rb { (ra, rb) } else { (rb, ra) };
                rep[d] = k;
            }
        }
        for &(a, b) in merges {
            union(&mut rep, a, b);
        }
        loop {
            let mut changed = false;
            for i in 0..n {
                for j in (i + 1)..n {
                    if find(&rep, i) == find(&rep, j) {
                        continue;
                    }
                    if nodes[i].0 == nodes[j].0
                        && nodes[i].1.len() == nodes[j].1.len()
                        && nodes[i]
                            .1
                            .iter()
                            .zip(nodes[j].1.iter())
                            .all(|(&x, &y)| find(&rep, x) == find(&rep, y))
                    {
                        union(&mut rep, i, j);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        (0..n).map(|i| find(&rep, i)).collect()
    }

    #[test]
    fn rebuild_matches_naive_oracle_on_random_graphs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..30 {
            let n = 50;
            let mut nodes: Vec<(EOp, Vec<usize>)> = Vec::new();
            for i in 0..n {
                if i < 6 {
                    nodes.push((EOp::Input(format!("v{i}")), vec![]));
                } else {
                    let op = match rng.gen_range(0..4) {
                        0 => OpKind::Add,
                        1 => OpKind::Mul,
                        2 => OpKind::Xor,
                        _ => OpKind::Not,
                    };
                    let children: Vec<usize> =
                        (0..op.arity()).map(|_| rng.gen_range(0..i)).collect();
                    nodes.push((EOp::Op(op), children));
                }
            }
            let mut g = EGraph::default();
            let mut class_of: Vec<EClassId> = Vec::new();
            for (op, children) in &nodes {
                let cs = children.iter().map(|&c| class_of[c]).collect();
                let (id, _) = g.add(ENode {
                    op: op.clone(),
                    children: cs,
                });
                class_of.push(id);
            }
            let merges: Vec<(usize, usize)> = (0..5)
                .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n)))
                .collect();
            for &(a, b) in &merges {
                g.merge(class_of[a], class_of[b]);
            }
            g.rebuild();
            let oracle = naive_congruence(&nodes, &merges);
            for i in 0..n {
                for j in 0..n {
                    let same_g = g.find(class_of[i]) == g.find(class_of[j]);
                    let same_o = oracle[i] == oracle[j];
                    assert_eq!(same_g, same_o, "nodes {i} and {j} disagree");
                }
            }
        }
    }

    #[test]
    fn hashcons_no_structural_duplicates_after_rebuild() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut g = EGraph::default();
        let mut classes = Vec::new();
        for i in 0..30 {
            let (id, _) = if i < 4 {
                g.add(ENode {
                    op: EOp::Input(format!("v{i}")),
                    children: vec![],
                })
            } else {
                let a = classes[rng.gen_range(0..classes.len())];
                let b = classes[rng.gen_range(0..classes.len())];
                g.add(ENode {
                    op: EOp::Op(OpKind::Add),
                    children: vec![a, b],
                })
            };
            classes.push(id);
        }
        for _ in 0..6 {
            let a = classes[rng.gen_range(0..classes.len())];
            let b = classes[rng.gen_range(0..classes.len())];
            g.merge(a, b);
        }
        g.rebuild();
        let mut seen = HashSet::new();
        for id in g.class_ids() {
            for n in g.class_nodes(id) {
                assert!(seen.insert(n.clone()), "duplicate canonical e-node {n:?}");
            }
        }
    }

    #[test]
    fn ematch_simple_and_after_rule() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 sub n0 n1\nout n2").unwrap();
        let mut g = egraph_init(&d);
        let pat_sub = parse_rule("?x - ?y => ?x", "t", RulesetKind::Int)
            .unwrap()
            .remove(0)
            .lhs;
        assert_eq!(ematch(&g, &pat_sub).len(), 1);

        let rules = parse_rule("?x - ?y => ?x + (- ?y)", "r", RulesetKind::Int).unwrap();
        let lim = SaturationLimits {
            iter_limit: 2,
            ..Default::default()
        };
        run_saturation(&mut g, &rules, &lim);
        let pat_add = parse_rule("?u + ?v => ?u", "t", RulesetKind::Int)
            .unwrap()
            .remove(0)
            .lhs;
        let ms = ematch(&g, &pat_add);
        assert_eq!(ms.len(), 1);
        assert_eq!(g.find(ms[0].classes[0]), g.find(g.roots[0]));
    }

    #[test]
    fn ematch_nonlinear_needs_equal_classes() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 add n0 n1\nout n2").unwrap();
        let g = egraph_init(&d);
        let pat = parse_rule("?x + ?x => ?x", "t", RulesetKind::Int)
            .unwrap()
            .remove(0)
            .lhs;
        assert!(ematch(&g, &pat).is_empty());
        let d2 = parse_dfg("n0 input a\nn1 add n0 n0\nout n1").unwrap();
        let g2 = egraph_init(&d2);
        assert_eq!(ematch(&g2, &pat).len(), 1);
    }

    #[test]
    fn saturation_empty_rules() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 add n0 n1\nout n2").unwrap();
        let mut g = egraph_init(&d);
        let report = run_saturation(&mut g, &[], &SaturationLimits::default());
        assert_eq!(report.stop_reason, StopReason::Saturated);
        assert_eq!(report.iterations_run, 1);
    }

    #[test]
    fn saturation_commutativity_saturates() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 add n0 n1\nout n2").unwrap();
        let mut g = egraph_init(&d);
        let rules = parse_rule("?x + ?y => ?y + ?x", "comm", RulesetKind::Int).unwrap();
        let report = run_saturation(&mut g, &rules, &SaturationLimits::default());
        assert_eq!(report.stop_reason, StopReason::Saturated);
        let root_nodes = g.class_nodes(g.roots[0]);
        assert_eq!(
            root_nodes
                .iter()
                .filter(|n| n.op == EOp::Op(OpKind::Add))
                .count(),
            2
        );
    }

    #[test]
    fn saturation_node_limit_on_assoc_comm() {
        // 8-term sum with assoc+comm explodes past a 100-node budget.
        let mut text = String::new();
        for i in 0..8 {
            text.push_str(&format!("n{i} input v{i}\n"));
        }
        let mut prev = 0;
        for i in 1..8 {
            let id = 7 + i;
            text.push_str(&format!("n{id} add n{prev} n{i}\n"));
            prev = id;
        }
        text.push_str(&format!("out n{prev}\n"));
        let d = parse_dfg(&text).unwrap();
        let mut g = egraph_init(&d);
        let mut rules = parse_rule("?x + ?y => ?y + ?x", "comm", RulesetKind::Int).unwrap();
        rules.extend(
            parse_rule("(?x + ?y) + ?z => ?x + (?y + ?z)", "assoc", RulesetKind::Int).unwrap(),
        );
        let lim = SaturationLimits {
            node_limit: 100,
            ..Default::default()
        };
        let report = run_saturation(&mut g, &rules, &lim);
        assert_eq!(report.stop_reason, StopReason::NodeLimit);
    }

    #[test]
    fn extract_cost_trap_chain() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 sub n0 n1\nout n2").unwrap();
        let mut g = egraph_init(&d);
        let rules = builtin_ruleset(RulesetKind::Int);
        run_saturation(&mut g, &rules, &SaturationLimits::default());
        let target = ops(&[OpKind::Add, OpKind::Xor, OpKind::Const]);
        let ex = extract_best(&g, &target).unwrap();
        assert_eq!(ex.tree_cost, 3);
        assert!(validate(&ex.dfg).is_empty());
        assert!(crate::dfg::unsupported_nodes(&ex.dfg, &target).is_empty());
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let env: StdHashMap<String, Value> = [
                ("a".to_string(), Value::Int(rng.gen())),
                ("b".to_string(), Value::Int(rng.gen())),
            ]
            .into();
            let mem = StdHashMap::new();
            let r1 = interpret(&d, &env, &mem).unwrap();
            let r2 = interpret(&ex.dfg, &env, &mem).unwrap();
            assert_eq!(r1[&d.outputs[0]].as_int(), r2[&ex.dfg.outputs[0]].as_int());
        }
    }

    #[test]
    fn extract_minimum_size_when_all_supported() {
        let d = parse_dfg("n0 input a\nn1 const -1\nn2 mul n0 n1\nout n2").unwrap();
        let mut g = egraph_init(&d);
        let rules = builtin_ruleset(RulesetKind::Int);
        run_saturation(&mut g, &rules, &SaturationLimits::default());
        let all = OpSet::from_ops(crate::dfg::ALL_OPS);
        let ex = extract_best(&g, &all).unwrap();
        // -a is a single op node.
        assert_eq!(ex.tree_cost, 1);
        assert_eq!(ex.dfg.nodes.iter().filter(|n| !n.op.is_leaf()).count(), 1);
    }

    #[test]
    fn eqsat_beats_greedy_on_cost_trap() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 sub n0 n1\nout n2").unwrap();
        let rules = builtin_ruleset(RulesetKind::Int);
        let target = ops(&[OpKind::Add, OpKind::Xor, OpKind::Const]);
        let (out, _, ex) =
            eqsat_rewrite(&d, &rules, &target, &SaturationLimits::default()).unwrap();
        assert!(cost(&out, &target) < UNSUPPORTED_PENALTY);
        assert_eq!(ex.tree_cost, 3);
    }

    #[test]
    fn eqsat_never_worse_than_input() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 add n0 n1\nout n2").unwrap();
        let rules = builtin_ruleset(RulesetKind::Int);
        let target = ops(&[OpKind::Add]);
        let (out, _, _) =
            eqsat_rewrite(&d, &rules, &target, &SaturationLimits::default()).unwrap();
        assert!(cost(&out, &target) <= cost(&d, &target));
    }

    #[test]
    fn unsupported_div_keeps_penalty_cost() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 div n0 n1\nout n2").unwrap();
        let g = egraph_init(&d);
        let target = ops(&[OpKind::Add]);
        let ex = extract_best(&g, &target).unwrap();
        assert!(ex.tree_cost >= UNSUPPORTED_PENALTY);
    }

    /// Brute-force oracle: minimum tree cost over all terms representable
    /// from a class, enumerated with a depth bound.  Memoized on
    /// (class, depth) so deep bounds stay tractable.
    fn brute_force_min_cost(g: &EGraph, ops: &OpSet, class: EClassId, depth: usize) -> u64 {
        fn go(
            g: &EGraph,
            ops: &OpSet,
            class: EClassId,
            depth: usize,
            memo: &mut StdHashMap<(EClassId, usize), u64>,
        ) -> u64 {
            if depth == 0 {
                return INF;
            }
            let class = g.find(class);
            if let Some(&hit) = memo.get(&(class, depth)) {
                return hit;
            }
            let mut best = INF;
            for node in g.class_nodes(class) {
                let mut total = node.op.cost(ops);
                for &c in &node.children {
                    total = total.saturating_add(go(g, ops, c, depth - 1, memo));
                }
                best = best.min(total);
            }
            memo.insert((class, depth), best);
            best
        }
        go(g, ops, class, depth, &mut StdHashMap::new())
    }

    #[test]
    fn extraction_matches_brute_force_on_random_egraphs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let op_pool = [OpKind::Add, OpKind::Mul, OpKind::Xor, OpKind::Not, OpKind::Sub];
        for _ in 0..40 {
            let mut g = EGraph::default();
            let mut classes: Vec<EClassId> = Vec::new();
            let n = rng.gen_range(8..40);
            for i in 0..n {
                let (id, _) = if i < 3 {
                    g.add(ENode {
                        op: EOp::Input(format!("v{i}")),
                        children: vec![],
                    })
                } else {
                    let op = op_pool[rng.gen_range(0..op_pool.len())];
                    let children: Vec<EClassId> = (0..op.arity())
                        .map(|_| classes[rng.gen_range(0..classes.len())])
                        .collect();
                    g.add(ENode {
                        op: EOp::Op(op),
                        children,
                    })
                };
                classes.push(id);
            }
            for _ in 0..rng.gen_range(0..4) {
                let a = classes[rng.gen_range(0..classes.len())];
                let b = classes[rng.gen_range(0..classes.len())];
                g.merge(a, b);
            }
            g.rebuild();
            let root = g.find(classes[rng.gen_range(0..classes.len())]);
            g.roots = vec![root];
            let supported = ops(&[OpKind::Add, OpKind::Xor, OpKind::Not]);
            let costs = class_tree_costs(&g, &supported);
            let fix = costs[&root];
            let brute = brute_force_min_cost(&g, &supported, root, g.class_count() + 1);
            assert_eq!(fix, brute);
            if fix < INF {
                let ex = extract_best(&g, &supported).unwrap();
                assert_eq!(ex.tree_cost, fix);
                assert!(validate(&ex.dfg).is_empty());
            }
        }
    }

    #[test]
    fn timeout_stops_explosive_workload() {
        let mut text = String::new();
        for i in 0..10 {
            text.push_str(&format!("n{i} input v{i}\n"));
        }
        let mut prev = 0;
        for i in 1..10 {
            let id = 9 + i;
            text.push_str(&format!("n{id} add n{prev} n{i}\n"));
            prev = id;
        }
        text.push_str(&format!("out n{prev}\n"));
        let d = parse_dfg(&text).unwrap();
        let mut g = egraph_init(&d);
        let mut rules = parse_rule("?x + ?y => ?y + ?x", "comm", RulesetKind::Int).unwrap();
        rules.extend(
            parse_rule("(?x + ?y) + ?z => ?x + (?y + ?z)", "assoc", RulesetKind::Int).unwrap(),
        );
        let lim = SaturationLimits {
            iter_limit: 1000,
            node_limit: usize::MAX,
            wall_clock_limit: Duration::from_millis(300),
        };
        let start = Instant::now();
        let report = run_saturation(&mut g, &rules, &lim);
        assert_eq!(report.stop_reason, StopReason::Timeout);
        assert!(start.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn loop_carried_dependence_survives_eqsat() {
        // acc = acc + (x * -1): mul is rewritten away, distance preserved.
        let d = parse_dfg(
            "n0 input x\nn1 const -1\nn2 mul n0 n1\nn3 add n3 n2\ndist n3 n3 1\nout n3",
        )
        .unwrap();
        let rules = builtin_ruleset(RulesetKind::Int);
        let target = ops(&[OpKind::Add, OpKind::Neg]);
        let (out, _, _) =
            eqsat_rewrite(&d, &rules, &target, &SaturationLimits::default()).unwrap();
        assert!(validate(&out).is_empty());
        assert!(cost(&out, &target) < UNSUPPORTED_PENALTY);
        assert!(!out.edge_distances.is_empty());
    }

    #[test]
    fn dump_contains_classes() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 add n0 n1\nout n2").unwrap();
        let g = egraph_init(&d);
        let dump = g.dump();
        assert!(dump.contains("add("));
        assert!(dump.contains("(root)"));
        assert!(dump.contains("input a"));
    }
}
