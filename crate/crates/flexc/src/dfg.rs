//! Dataflow-graph representation, textual format, validation, cost
//! evaluation, and a reference interpreter used as a semantics oracle.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Operation symbols a DFG node can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Shl,
    Shr,
    And,
    Or,
    Xor,
    Not,
    Neg,
    Eq,
    Ne,
    Lt,
    Gt,
    Le,
    Ge,
    Select,
    Load,
    Store,
    Const,
    Input,
    Fadd,
    Fsub,
    Fmul,
    Fdiv,
    Fneg,
    Fconst,
    IscMul,
}

/// Broad classification of an operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpClass {
    Integer,
    Float,
    Memory,
    Control,
}

pub const ALL_OPS: &[OpKind] = &[
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::Shl,
    OpKind::Shr,
    OpKind::And,
    OpKind::Or,
    OpKind::Xor,
    OpKind::Not,
    OpKind::Neg,
    OpKind::Eq,
    OpKind::Ne,
    OpKind::Lt,
    OpKind::Gt,
    OpKind::Le,
    OpKind::Ge,
    OpKind::Select,
    OpKind::Load,
    OpKind::Store,
    OpKind::Const,
    OpKind::Input,
    OpKind::Fadd,
    OpKind::Fsub,
    OpKind::Fmul,
    OpKind::Fdiv,
    OpKind::Fneg,
    OpKind::Fconst,
    OpKind::IscMul,
];

impl OpKind {
    pub fn symbol(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Shl => "shl",
            OpKind::Shr => "shr",
            OpKind::And => "and",
            OpKind::Or => "or",
            OpKind::Xor => "xor",
            OpKind::Not => "not",
            OpKind::Neg => "neg",
            OpKind::Eq => "eq",
            OpKind::Ne => "ne",
            OpKind::Lt => "lt",
            OpKind::Gt => "gt",
            OpKind::Le => "le",
            OpKind::Ge => "ge",
            OpKind::Select => "select",
            OpKind::Load => "load",
            OpKind::Store => "store",
            OpKind::Const => "const",
            OpKind::Input => "input",
            OpKind::Fadd => "fadd",
            OpKind::Fsub => "fsub",
            OpKind::Fmul => "fmul",
            OpKind::Fdiv => "fdiv",
            OpKind::Fneg => "fneg",
            OpKind::Fconst => "fconst",
            OpKind::IscMul => "isc_mul",
        }
    }

    pub fn from_symbol(s: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|op| op.symbol() == s)
    }

    pub fn arity(self) -> usize {
        match self {
            OpKind::Const | OpKind::Input | OpKind::Fconst => 0,
            OpKind::Not | OpKind::Neg | OpKind::Fneg | OpKind::Load => 1,
            OpKind::Select => 3,
            _ => 2,
        }
    }

    pub fn class(self) -> OpClass {
        match self {
            OpKind::Fadd | OpKind::Fsub | OpKind::Fmul | OpKind::Fdiv | OpKind::Fneg
            | OpKind::Fconst => OpClass::Float,
            OpKind::Load | OpKind::Store => OpClass::Memory,
            OpKind::Select => OpClass::Control,
            _ => OpClass::Integer,
        }
    }

    /// Leaf pseudo-ops that carry a payload instead of operands.  These are
    /// always treated as supported by any architecture and cost nothing:
    /// they occupy no PE compute slot.
    pub fn is_leaf(self) -> bool {
        matches!(self, OpKind::Const | OpKind::Input | OpKind::Fconst)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Index of a node within a [`Dfg`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Payload for leaf nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    IntLit(i32),
    FloatLit(f64),
    InputName(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: OpKind,
    pub operands: Vec<NodeId>,
    pub payload: Option<Payload>,
}

/// A loop-kernel dataflow graph: the unit of compilation.
///
/// Operand edges run consumer -> producer.  An edge may carry a nonnegative
/// iteration distance marking a loop-carried dependence; the graph must be
/// acyclic when only distance-0 edges are considered.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dfg {
    pub nodes: Vec<Node>,
    pub outputs: Vec<NodeId>,
    /// (consumer, producer) -> iteration distance.  Absent edges have
    /// distance 0.
    pub edge_distances: BTreeMap<(NodeId, NodeId), u32>,
}

/// Set of operation symbols an architecture supports.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OpSet {
    members: BTreeSet<OpKind>,
}

impl OpSet {
    pub fn new() -> OpSet {
        OpSet::default()
    }

    pub fn from_ops(ops: &[OpKind]) -> OpSet {
        OpSet {
            members: ops.iter().copied().collect(),
        }
    }

    pub fn insert(&mut self, op: OpKind) {
        self.members.insert(op);
    }

    pub fn contains(&self, op: OpKind) -> bool {
        // Leaf pseudo-ops are supported everywhere.
        op.is_leaf() || self.members.contains(&op)
    }

    pub fn union(&self, other: &OpSet) -> OpSet {
        OpSet {
            members: self.members.union(&other.members).copied().collect(),
        }
    }

    pub fn is_superset(&self, other: &OpSet) -> bool {
        self.members.is_superset(&other.members)
    }

    pub fn iter(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.members.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl FromIterator<OpKind> for OpSet {
    fn from_iter<T: IntoIterator<Item = OpKind>>(iter: T) -> OpSet {
        OpSet {
            members: iter.into_iter().collect(),
        }
    }
}

/// A runtime value in the reference interpreter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Int(i32),
    Float(f64),
    Bool(bool),
}

impl Value {
    pub fn as_int(self) -> Option<i32> {
        match self {
            Value::Int(v) => Some(v),
            Value::Bool(b) => Some(b as i32),
            Value::Float(_) => None,
        }
    }

    pub fn as_float(self) -> Option<f64> {
        match self {
            Value::Float(v) => Some(v),
            _ => None,
        }
    }

    pub fn truthy(self) -> bool {
        match self {
            Value::Int(v) => v != 0,
            Value::Float(v) => v != 0.0,
            Value::Bool(b) => b,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DfgParseError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: duplicate node id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: dangling operand reference `{operand}`")]
    DanglingOperand { line: usize, operand: String },
}

/// A single invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// A distance-0 cycle passes through this node.
    Cycle { node: NodeId },
    ArityMismatch { node: NodeId, expected: usize, got: usize },
    DanglingOperand { node: NodeId, operand: NodeId },
    MissingPayload { node: NodeId },
    UnexpectedPayload { node: NodeId },
    NoOutputs,
    OutputMissing { output: NodeId },
    DistanceEdgeMissing { consumer: NodeId, producer: NodeId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Cycle { node } => write!(f, "distance-0 cycle through {node}"),
            Violation::ArityMismatch { node, expected, got } => {
                write!(f, "{node}: expected {expected} operands, got {got}")
            }
            Violation::DanglingOperand { node, operand } => {
                write!(f, "{node}: operand {operand} does not exist")
            }
            Violation::MissingPayload { node } => write!(f, "{node}: leaf node without payload"),
            Violation::UnexpectedPayload { node } => {
                write!(f, "{node}: non-leaf node carries a payload")
            }
            Violation::NoOutputs => write!(f, "graph has no outputs"),
            Violation::OutputMissing { output } => {
                write!(f, "output {output} does not exist")
            }
            Violation::DistanceEdgeMissing { consumer, producer } => {
                write!(f, "distance annotation on non-edge {consumer} -> {producer}")
            }
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("division by zero at {node}")]
    DivisionByZero { node: NodeId },
    #[error("shift amount {amount} out of range at {node}")]
    ShiftOutOfRange { node: NodeId, amount: i32 },
    #[error("unbound input `{name}`")]
    UnboundInput { name: String },
    #[error("type mismatch at {node}")]
    TypeMismatch { node: NodeId },
}

/// Cost of a single unsupported operation.  Any result at or above this
/// value means the graph still contains operations the target cannot run.
pub const UNSUPPORTED_PENALTY: u64 = 1_000_000;

impl Dfg {
    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len() as u32).map(NodeId)
    }

    /// Iteration distance on the operand edge consumer -> producer.
    pub fn distance(&self, consumer: NodeId, producer: NodeId) -> u32 {
        self.edge_distances
            .get(&(consumer, producer))
            .copied()
            .unwrap_or(0)
    }

    /// Non-leaf operation nodes (the ones that occupy PE slots).
    pub fn op_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.node_ids()
            .filter(move |id| !self.node(*id).op.is_leaf())
    }

    pub fn find_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .map(|i| NodeId(i as u32))
    }

    /// A canonical textual key: equal iff the two graphs are structurally
    /// identical (same hashconsed shape and output list), independent of
    /// node names and numbering.
    pub fn canonical_key(&self) -> String {
        let mut memo: HashMap<NodeId, usize> = HashMap::new();
        let mut defs: Vec<String> = Vec::new();
        fn go(
            d: &Dfg,
            id: NodeId,
            memo: &mut HashMap<NodeId, usize>,
            defs: &mut Vec<String>,
        ) -> usize {
            if let Some(&k) = memo.get(&id) {
                return k;
            }
            // Mark in-progress to avoid infinite recursion through
            // loop-carried back edges; those are keyed by distance below.
            let placeholder = usize::MAX;
            memo.insert(id, placeholder);
            let node = d.node(id);
            let mut parts: Vec<String> = vec![node.op.symbol().to_string()];
            if let Some(p) = &node.payload {
                parts.push(match p {
                    Payload::IntLit(v) => format!("i{v}"),
                    Payload::FloatLit(v) => format!("f{:016x}", v.to_bits()),
                    Payload::InputName(s) => format!("in:{s}"),
                });
            }
            for &operand in &node.operands {
                let dist = d.distance(id, operand);
                if memo.get(&operand) == Some(&placeholder) {
                    // Back edge through a loop-carried dependence.
                    parts.push(format!("^@{dist}"));
                } else {
                    let k = go(d, operand, memo, defs);
                    parts.push(format!("{k}@{dist}"));
                }
            }
            let def = parts.join(" ");
            let k = if let Some(pos) = defs.iter().position(|x| x == &def) {
                pos
            } else {
                defs.push(def);
                defs.len() - 1
            };
            memo.insert(id, k);
            k
        }
        let outs: Vec<String> = self
            .outputs
            .iter()
            .map(|&o| go(self, o, &mut memo, &mut defs).to_string())
            .collect();
        format!("{};out {}", defs.join(";"), outs.join(" "))
    }
}

/// Parse the line-oriented DFG format.
///
/// Grammar (UTF-8, one item per line, `#` starts a comment):
/// ```text
/// <id> <op> [<operand-id>...|<literal>|<input-name>]
/// dist <consumer-id> <producer-id> <k>
/// out <id>
/// ```
pub fn parse_dfg(text: &str) -> Result<Dfg, DfgParseError> {
    struct RawNode {
        line: usize,
        name: String,
        op: OpKind,
        args: Vec<String>,
    }
    let mut raw_nodes: Vec<RawNode> = Vec::new();
    let mut raw_dists: Vec<(usize, String, String, u32)> = Vec::new();
    let mut raw_outs: Vec<(usize, String)> = Vec::new();
    let mut names: HashMap<String, usize> = HashMap::new();

    for (lineno, raw_line) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut toks = content.split_whitespace();
        let first = toks.next().unwrap();
        match first {
            "out" => {
                let id = toks.next().ok_or_else(|| DfgParseError::Syntax {
                    line,
                    msg: "expected node id after `out`".into(),
                })?;
                raw_outs.push((line, id.to_string()));
            }
            "dist" => {
                let from = toks.next().map(str::to_string);
                let to = toks.next().map(str::to_string);
                let k = toks.next().map(str::to_string);
                match (from, to, k) {
                    (Some(from), Some(to), Some(k)) => {
                        let k: u32 = k.parse().map_err(|_| DfgParseError::Syntax {
                            line,
                            msg: format!("invalid distance `{k}`"),
                        })?;
                        raw_dists.push((line, from, to, k));
                    }
                    _ => {
                        return Err(DfgParseError::Syntax {
                            line,
                            msg: "expected `dist <from> <to> <k>`".into(),
                        })
                    }
                }
            }
            name => {
                let op_tok = toks.next().ok_or_else(|| DfgParseError::Syntax {
                    line,
                    msg: format!("expected operation after `{name}`"),
                })?;
                let op = OpKind::from_symbol(op_tok).ok_or_else(|| DfgParseError::Syntax {
                    line,
                    msg: format!("unknown operation `{op_tok}`"),
                })?;
                if names.contains_key(name) {
                    return Err(DfgParseError::DuplicateId {
                        line,
                        id: name.to_string(),
                    });
                }
                names.insert(name.to_string(), raw_nodes.len());
                raw_nodes.push(RawNode {
                    line,
                    name: name.to_string(),
                    op,
                    args: toks.map(str::to_string).collect(),
                });
            }
        }
    }

    let mut dfg = Dfg::default();
    for raw in &raw_nodes {
        let payload = match raw.op {
            OpKind::Const => {
                let lit = raw.args.first().ok_or_else(|| DfgParseError::Syntax {
                    line: raw.line,
                    msg: "const needs a literal".into(),
                })?;
                let v: i64 = lit.parse().map_err(|_| DfgParseError::Syntax {
                    line: raw.line,
                    msg: format!("invalid integer literal `{lit}`"),
                })?;
                Some(Payload::IntLit(v as i32))
            }
            OpKind::Fconst => {
                let lit = raw.args.first().ok_or_else(|| DfgParseError::Syntax {
                    line: raw.line,
                    msg: "fconst needs a literal".into(),
                })?;
                let v: f64 = lit.parse().map_err(|_| DfgParseError::Syntax {
                    line: raw.line,
                    msg: format!("invalid float literal `{lit}`"),
                })?;
                Some(Payload::FloatLit(v))
            }
            OpKind::Input => {
                let name = raw.args.first().ok_or_else(|| DfgParseError::Syntax {
                    line: raw.line,
                    msg: "input needs a name".into(),
                })?;
                Some(Payload::InputName(name.clone()))
            }
            _ => None,
        };
        let operands = if raw.op.is_leaf() {
            if raw.args.len() > 1 {
                return Err(DfgParseError::Syntax {
                    line: raw.line,
                    msg: "leaf node takes a single payload argument".into(),
                });
            }
            Vec::new()
        } else {
            let mut ops = Vec::with_capacity(raw.args.len());
            for arg in &raw.args {
                let idx = names.get(arg).ok_or_else(|| DfgParseError::DanglingOperand {
                    line: raw.line,
                    operand: arg.clone(),
                })?;
                ops.push(NodeId(*idx as u32));
            }
            ops
        };
        dfg.nodes.push(Node {
            name: raw.name.clone(),
            op: raw.op,
            operands,
            payload,
        });
    }

    for (line, from, to, k) in raw_dists {
        let f = names.get(&from).ok_or(DfgParseError::DanglingOperand {
            line,
            operand: from.clone(),
        })?;
        let t = names.get(&to).ok_or(DfgParseError::DanglingOperand {
            line,
            operand: to.clone(),
        })?;
        if k > 0 {
            dfg.edge_distances
                .insert((NodeId(*f as u32), NodeId(*t as u32)), k);
        }
    }

    for (line, out) in raw_outs {
        let idx = names.get(&out).ok_or(DfgParseError::DanglingOperand {
            line,
            operand: out.clone(),
        })?;
        dfg.outputs.push(NodeId(*idx as u32));
    }

    Ok(dfg)
}

pub fn serialize_dfg(d: &Dfg) -> String {
    let mut out = String::new();
    for node in &d.nodes {
        out.push_str(&node.name);
        out.push(' ');
        out.push_str(node.op.symbol());
        match &node.payload {
            Some(Payload::IntLit(v)) => out.push_str(&format!(" {v}")),
            Some(Payload::FloatLit(v)) => out.push_str(&format!(" {v:?}")),
            Some(Payload::InputName(n)) => out.push_str(&format!(" {n}")),
            None => {
                for operand in &node.operands {
                    out.push(' ');
                    out.push_str(&d.node(*operand).name);
                }
            }
        }
        out.push('\n');
    }
    for ((c, p), k) in &d.edge_distances {
        out.push_str(&format!(
            "dist {} {} {k}\n",
            d.node(*c).name,
            d.node(*p).name
        ));
    }
    for o in &d.outputs {
        out.push_str(&format!("out {}\n", d.node(*o).name));
    }
    out
}

/// Check every structural invariant; an empty list means the graph is valid.
pub fn validate(d: &Dfg) -> Vec<Violation> {
    let mut violations = Vec::new();
    let n = d.nodes.len();
    for id in d.node_ids() {
        let node = d.node(id);
        for &operand in &node.operands {
            if operand.index() >= n {
                violations.push(Violation::DanglingOperand { node: id, operand });
            }
        }
        if node.op.is_leaf() {
            if node.payload.is_none() {
                violations.push(Violation::MissingPayload { node: id });
            }
        } else if node.payload.is_some() {
            violations.push(Violation::UnexpectedPayload { node: id });
        }
        if node.operands.len() != node.op.arity() && !node.op.is_leaf() {
            violations.push(Violation::ArityMismatch {
                node: id,
                expected: node.op.arity(),
                got: node.operands.len(),
            });
        }
    }
    if d.outputs.is_empty() {
        violations.push(Violation::NoOutputs);
    }
    for &o in &d.outputs {
        if o.index() >= n {
            violations.push(Violation::OutputMissing { output: o });
        }
    }
    for &(c, p) in d.edge_distances.keys() {
        if c.index() >= n || p.index() >= n {
            violations.push(Violation::DistanceEdgeMissing {
                consumer: c,
                producer: p,
            });
        } else if !d.node(c).operands.contains(&p) {
            violations.push(Violation::DistanceEdgeMissing {
                consumer: c,
                producer: p,
            });
        }
    }
    // Distance-0 cycle detection via 3-state DFS.
    if violations.is_empty() {
        let mut state = vec![0u8; n]; // 0 unvisited, 1 on stack, 2 done
        fn dfs(d: &Dfg, id: NodeId, state: &mut Vec<u8>, violations: &mut Vec<Violation>) {
            state[id.index()] = 1;
            for &operand in &d.node(id).operands {
                if d.distance(id, operand) > 0 {
                    continue;
                }
                match state[operand.index()] {
                    0 => dfs(d, operand, state, violations),
                    1 => violations.push(Violation::Cycle { node: operand }),
                    _ => {}
                }
            }
            state[id.index()] = 2;
        }
        for id in d.node_ids() {
            if state[id.index()] == 0 {
                dfs(d, id, &mut state, &mut violations);
            }
        }
    }
    violations
}

/// Nodes whose operation has no hardware support anywhere on the target.
pub fn unsupported_nodes(d: &Dfg, ops: &OpSet) -> BTreeSet<NodeId> {
    d.node_ids()
        .filter(|&id| !ops.contains(d.node(id).op))
        .collect()
}

/// Cost of mapping `d` onto a target supporting `ops`: 1 per supported
/// operation node, a 10^6 penalty per unsupported one, 0 for leaves.
pub fn cost(d: &Dfg, ops: &OpSet) -> u64 {
    d.node_ids()
        .map(|id| {
            let op = d.node(id).op;
            if op.is_leaf() {
                0
            } else if ops.contains(op) {
                1
            } else {
                UNSUPPORTED_PENALTY
            }
        })
        .sum()
}

/// Topological order over distance-0 edges.  Panics if the graph is cyclic;
/// callers validate first.
pub fn topo_order(d: &Dfg) -> Vec<NodeId> {
    let n = d.nodes.len();
    let mut indegree = vec![0usize; n];
    let mut consumers: Vec<Vec<NodeId>> = vec![Vec::new(); n];
    for id in d.node_ids() {
        for &operand in &d.node(id).operands {
            if d.distance(id, operand) == 0 {
                indegree[id.index()] += 1;
                consumers[operand.index()].push(id);
            }
        }
    }
    let mut ready: Vec<NodeId> = d
        .node_ids()
        .filter(|id| indegree[id.index()] == 0)
        .collect();
    let mut order = Vec::with_capacity(n);
    let mut cursor = 0;
    while cursor < ready.len() {
        let id = ready[cursor];
        cursor += 1;
        order.push(id);
        for &c in &consumers[id.index()] {
            indegree[c.index()] -= 1;
            if indegree[c.index()] == 0 {
                ready.push(c);
            }
        }
        // Keep the frontier sorted so the order is deterministic.
        ready[cursor..].sort();
    }
    assert_eq!(order.len(), n, "cycle among distance-0 edges");
    order
}

/// Reference interpreter: deterministic evaluation in topological order.
///
/// Loop-carried operands (distance > 0) read their previous-iteration value
/// from `env` under the key `prev:<producer-node-name>`.
pub fn interpret(
    d: &Dfg,
    env: &HashMap<String, Value>,
    mem: &HashMap<i32, Value>,
) -> Result<HashMap<NodeId, Value>, EvalError> {
    let mut mem = mem.clone();
    let mut values: HashMap<NodeId, Value> = HashMap::new();
    let order = topo_order(d);
    for id in order {
        let node = d.node(id);
        let fetch = |operand: NodeId, values: &HashMap<NodeId, Value>| -> Result<Value, EvalError> {
            if d.distance(id, operand) > 0 {
                let key = format!("prev:{}", d.node(operand).name);
                env.get(&key)
                    .copied()
                    .ok_or(EvalError::UnboundInput { name: key })
            } else {
                Ok(values[&operand])
            }
        };
        let int2 = |values: &HashMap<NodeId, Value>| -> Result<(i32, i32), EvalError> {
            let a = fetch(node.operands[0], values)?
                .as_int()
                .ok_or(EvalError::TypeMismatch { node: id })?;
            let b = fetch(node.operands[1], values)?
                .as_int()
                .ok_or(EvalError::TypeMismatch { node: id })?;
            Ok((a, b))
        };
        let flt2 = |values: &HashMap<NodeId, Value>| -> Result<(f64, f64), EvalError> {
            let a = fetch(node.operands[0], values)?
                .as_float()
                .ok_or(EvalError::TypeMismatch { node: id })?;
            let b = fetch(node.operands[1], values)?
                .as_float()
                .ok_or(EvalError::TypeMismatch { node: id })?;
            Ok((a, b))
        };
        let value = match node.op {
            OpKind::Const => match node.payload {
                Some(Payload::IntLit(v)) => Value::Int(v),
                _ => return Err(EvalError::TypeMismatch { node: id }),
            },
            OpKind::Fconst => match node.payload {
                Some(Payload::FloatLit(v)) => Value::Float(v),
                _ => return Err(EvalError::TypeMismatch { node: id }),
            },
            OpKind::Input => match &node.payload {
                Some(Payload::InputName(name)) => env
                    .get(name)
                    .copied()
                    .ok_or_else(|| EvalError::UnboundInput { name: name.clone() })?,
                _ => return Err(EvalError::TypeMismatch { node: id }),
            },
            OpKind::Add => {
                let (a, b) = int2(&values)?;
                Value::Int(a.wrapping_add(b))
            }
            OpKind::Sub => {
                let (a, b) = int2(&values)?;
                Value::Int(a.wrapping_sub(b))
            }
            OpKind::Mul => {
                let (a, b) = int2(&values)?;
                Value::Int(a.wrapping_mul(b))
            }
            // Modeled as an exact multiply; stochastic hardware only
            // approximates this, so no rule over isc_mul is equivalence
            // tested.
            OpKind::IscMul => {
                let (a, b) = int2(&values)?;
                Value::Int(a.wrapping_mul(b))
            }
            OpKind::Div => {
                let (a, b) = int2(&values)?;
                if b == 0 {
                    return Err(EvalError::DivisionByZero { node: id });
                }
                Value::Int(a.wrapping_div(b))
            }
            OpKind::Shl => {
                let (a, b) = int2(&values)?;
                if !(0..32).contains(&b) {
                    return Err(EvalError::ShiftOutOfRange { node: id, amount: b });
                }
                Value::Int(((a as u32) << b) as i32)
            }
            OpKind::Shr => {
                let (a, b) = int2(&values)?;
                if !(0..32).contains(&b) {
                    return Err(EvalError::ShiftOutOfRange { node: id, amount: b });
                }
                Value::Int(((a as u32) >> b) as i32)
            }
            OpKind::And => {
                let (a, b) = int2(&values)?;
                Value::Int(a & b)
            }
            OpKind::Or => {
                let (a, b) = int2(&values)?;
                Value::Int(a | b)
            }
            OpKind::Xor => {
                let (a, b) = int2(&values)?;
                Value::Int(a ^ b)
            }
            OpKind::Not => {
                let a = fetch(node.operands[0], &values)?
                    .as_int()
                    .ok_or(EvalError::TypeMismatch { node: id })?;
                Value::Int(!a)
            }
            OpKind::Neg => {
                let a = fetch(node.operands[0], &values)?
                    .as_int()
                    .ok_or(EvalError::TypeMismatch { node: id })?;
                Value::Int(a.wrapping_neg())
            }
            OpKind::Eq => {
                let (a, b) = int2(&values)?;
                Value::Int((a == b) as i32)
            }
            OpKind::Ne => {
                let (a, b) = int2(&values)?;
                Value::Int((a != b) as i32)
            }
            OpKind::Lt => {
                let (a, b) = int2(&values)?;
                Value::Int((a < b) as i32)
            }
            OpKind::Gt => {
                let (a, b) = int2(&values)?;
                Value::Int((a > b) as i32)
            }
            OpKind::Le => {
                let (a, b) = int2(&values)?;
                Value::Int((a <= b) as i32)
            }
            OpKind::Ge => {
                let (a, b) = int2(&values)?;
                Value::Int((a >= b) as i32)
            }
            OpKind::Select => {
                let cond = fetch(node.operands[0], &values)?;
                if cond.truthy() {
                    fetch(node.operands[1], &values)?
                } else {
                    fetch(node.operands[2], &values)?
                }
            }
            OpKind::Load => {
                let addr = fetch(node.operands[0], &values)?
                    .as_int()
                    .ok_or(EvalError::TypeMismatch { node: id })?;
                mem.get(&addr).copied().unwrap_or(Value::Int(0))
            }
            OpKind::Store => {
                let addr = fetch(node.operands[0], &values)?
                    .as_int()
                    .ok_or(EvalError::TypeMismatch { node: id })?;
                let v = fetch(node.operands[1], &values)?;
                mem.insert(addr, v);
                v
            }
            OpKind::Fadd => {
                let (a, b) = flt2(&values)?;
                Value::Float(a + b)
            }
            OpKind::Fsub => {
                let (a, b) = flt2(&values)?;
                Value::Float(a - b)
            }
            OpKind::Fmul => {
                let (a, b) = flt2(&values)?;
                Value::Float(a * b)
            }
            OpKind::Fdiv => {
                let (a, b) = flt2(&values)?;
                Value::Float(a / b)
            }
            OpKind::Fneg => {
                let a = fetch(node.operands[0], &values)?
                    .as_float()
                    .ok_or(EvalError::TypeMismatch { node: id })?;
                Value::Float(-a)
            }
        };
        values.insert(id, value);
    }
    Ok(d.outputs.iter().map(|&o| (o, values[&o])).collect())
}

/// Convenience builder for constructing DFGs in code.
#[derive(Debug, Default)]
pub struct DfgBuilder {
    dfg: Dfg,
}

impl DfgBuilder {
    pub fn new() -> DfgBuilder {
        DfgBuilder::default()
    }

    fn push(&mut self, node: Node) -> NodeId {
        let id = NodeId(self.dfg.nodes.len() as u32);
        self.dfg.nodes.push(node);
        id
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        let id = NodeId(self.dfg.nodes.len() as u32);
        self.push(Node {
            name: format!("n{}", id.0),
            op: OpKind::Input,
            operands: Vec::new(),
            payload: Some(Payload::InputName(name.to_string())),
        })
    }

    pub fn int_const(&mut self, v: i32) -> NodeId {
        let id = NodeId(self.dfg.nodes.len() as u32);
        self.push(Node {
            name: format!("n{}", id.0),
            op: OpKind::Const,
            operands: Vec::new(),
            payload: Some(Payload::IntLit(v)),
        })
    }

    pub fn float_const(&mut self, v: f64) -> NodeId {
        let id = NodeId(self.dfg.nodes.len() as u32);
        self.push(Node {
            name: format!("n{}", id.0),
            op: OpKind::Fconst,
            operands: Vec::new(),
            payload: Some(Payload::FloatLit(v)),
        })
    }

    pub fn op(&mut self, op: OpKind, operands: &[NodeId]) -> NodeId {
        let id = NodeId(self.dfg.nodes.len() as u32);
        self.push(Node {
            name: format!("n{}", id.0),
            op,
            operands: operands.to_vec(),
            payload: None,
        })
    }

    pub fn distance(&mut self, consumer: NodeId, producer: NodeId, k: u32) {
        if k > 0 {
            self.dfg.edge_distances.insert((consumer, producer), k);
        }
    }

    pub fn output(&mut self, id: NodeId) {
        self.dfg.outputs.push(id);
    }

    pub fn finish(self) -> Dfg {
        debug_assert!(validate(&self.dfg).is_empty(), "builder produced invalid dfg");
        self.dfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, i32)]) -> HashMap<String, Value> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), Value::Int(*v)))
            .collect()
    }

    #[test]
    fn parse_simple_add() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 add n0 n1\nout n2").unwrap();
        assert_eq!(d.nodes.len(), 3);
        assert_eq!(d.outputs, vec![NodeId(2)]);
        assert_eq!(d.node(NodeId(2)).op, OpKind::Add);
        assert!(validate(&d).is_empty());
    }

    #[test]
    fn parse_single_const() {
        let d = parse_dfg("n0 const 5\nout n0").unwrap();
        assert_eq!(d.nodes.len(), 1);
        assert_eq!(d.node(NodeId(0)).payload, Some(Payload::IntLit(5)));
    }

    #[test]
    fn parse_dangling_reference() {
        let err = parse_dfg("n0 input a\nn2 add n0 n9\nout n2").unwrap_err();
        assert!(matches!(err, DfgParseError::DanglingOperand { .. }));
    }

    #[test]
    fn parse_duplicate_id() {
        let err = parse_dfg("n0 input a\nn0 input b\nout n0").unwrap_err();
        assert!(matches!(err, DfgParseError::DuplicateId { .. }));
    }

    #[test]
    fn parse_serialize_round_trip() {
        let text = "n0 input a\nn1 const 3\nn2 add n0 n1\nn3 mul n2 n2\ndist n3 n2 1\nout n3\n";
        let d = parse_dfg(text).unwrap();
        assert_eq!(serialize_dfg(&d), text);
        let d2 = parse_dfg(&serialize_dfg(&d)).unwrap();
        assert_eq!(d, d2);
    }

    #[test]
    fn validate_acyclic_chain_ok() {
        let d = parse_dfg("n0 input a\nn1 add n0 n0\nn2 add n1 n1\nn3 add n2 n2\nout n3").unwrap();
        assert!(validate(&d).is_empty());
    }

    #[test]
    fn validate_cycle() {
        // n1 and n2 reference each other with distance 0.
        let mut b = DfgBuilder::new();
        let a = b.input("a");
        let n1 = b.op(OpKind::Add, &[a, a]);
        let n2 = b.op(OpKind::Add, &[n1, n1]);
        let mut d = b.dfg;
        d.nodes[n1.index()].operands[1] = n2;
        d.outputs.push(n2);
        assert!(validate(&d).iter().any(|v| matches!(v, Violation::Cycle { .. })));
    }

    #[test]
    fn validate_arity() {
        let mut b = DfgBuilder::new();
        let a = b.input("a");
        let n1 = b.op(OpKind::Add, &[a]);
        let mut d = b.dfg;
        d.outputs.push(n1);
        assert!(validate(&d)
            .iter()
            .any(|v| matches!(v, Violation::ArityMismatch { .. })));
    }

    #[test]
    fn distance_edge_breaks_cycle() {
        // x[i] = x[i-1] + c: the add consumes itself at distance 1.
        let mut b = DfgBuilder::new();
        let c = b.input("c");
        let add = b.op(OpKind::Add, &[c, c]);
        let mut d = b.dfg;
        d.nodes[add.index()].operands[1] = add;
        d.edge_distances.insert((add, add), 1);
        d.outputs.push(add);
        assert!(validate(&d).is_empty());
    }

    #[test]
    fn unsupported_sub() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 sub n0 n1\nout n2").unwrap();
        let ops = OpSet::from_ops(&[OpKind::Add, OpKind::Neg]);
        let u = unsupported_nodes(&d, &ops);
        assert_eq!(u.into_iter().collect::<Vec<_>>(), vec![NodeId(2)]);
        let ops2 = OpSet::from_ops(&[OpKind::Add]);
        let d2 = parse_dfg("n0 input a\nn1 input b\nn2 add n0 n1\nout n2").unwrap();
        assert!(unsupported_nodes(&d2, &ops2).is_empty());
    }

    #[test]
    fn codec_style_mul_sub_both_flagged() {
        let d = parse_dfg(
            "n0 input a\nn1 input b\nn2 const 2\nn3 mul n1 n2\nn4 sub n0 n3\nout n4",
        )
        .unwrap();
        let ops = OpSet::from_ops(&[OpKind::Add, OpKind::Shl]);
        let u = unsupported_nodes(&d, &ops);
        assert_eq!(u.into_iter().collect::<Vec<_>>(), vec![NodeId(3), NodeId(4)]);
    }

    #[test]
    fn cost_examples() {
        let d = parse_dfg("n0 input a\nn1 add n0 n0\nn2 add n1 n1\nn3 add n2 n2\nout n3").unwrap();
        let ops = OpSet::from_ops(&[OpKind::Add]);
        assert_eq!(cost(&d, &ops), 3);

        let d2 =
            parse_dfg("n0 input a\nn1 add n0 n0\nn2 add n1 n1\nn3 sub n2 n2\nout n3").unwrap();
        assert_eq!(cost(&d2, &ops), 1_000_002);

        let d3 = parse_dfg("n0 input a\nout n0").unwrap();
        assert_eq!(cost(&d3, &ops), 0);
    }

    #[test]
    fn cost_threshold_iff_unsupported_empty() {
        let d = parse_dfg("n0 input a\nn1 mul n0 n0\nout n1").unwrap();
        let with = OpSet::from_ops(&[OpKind::Mul]);
        let without = OpSet::from_ops(&[OpKind::Add]);
        assert!(cost(&d, &with) < UNSUPPORTED_PENALTY);
        assert!(unsupported_nodes(&d, &with).is_empty());
        assert!(cost(&d, &without) >= UNSUPPORTED_PENALTY);
        assert!(!unsupported_nodes(&d, &without).is_empty());
    }

    #[test]
    fn interpret_add() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 add n0 n1\nout n2").unwrap();
        let r = interpret(&d, &env(&[("a", 2), ("b", 3)]), &HashMap::new()).unwrap();
        assert_eq!(r[&NodeId(2)], Value::Int(5));
    }

    #[test]
    fn interpret_twos_complement_identity() {
        // -x == (x ^ -1) + 1
        let d = parse_dfg(
            "n0 input x\nn1 const -1\nn2 xor n0 n1\nn3 const 1\nn4 add n2 n3\nout n4",
        )
        .unwrap();
        let r = interpret(&d, &env(&[("x", 7)]), &HashMap::new()).unwrap();
        assert_eq!(r[&NodeId(4)], Value::Int(-7));
    }

    #[test]
    fn interpret_shr_matches_div_shl() {
        let shr = parse_dfg("n0 input x\nn1 input y\nn2 shr n0 n1\nout n2").unwrap();
        let div = parse_dfg(
            "n0 input x\nn1 input y\nn2 const 1\nn3 shl n2 n1\nn4 div n0 n3\nout n4",
        )
        .unwrap();
        for (x, y) in [(13, 1), (1000, 3), (0, 0), (12345, 7), (i32::MAX, 15)] {
            let e = env(&[("x", x), ("y", y)]);
            let a = interpret(&shr, &e, &HashMap::new()).unwrap();
            let b = interpret(&div, &e, &HashMap::new()).unwrap();
            assert_eq!(a[&NodeId(2)], b[&NodeId(4)], "x={x} y={y}");
        }
    }

    #[test]
    fn interpret_errors() {
        let d = parse_dfg("n0 input x\nn1 const 0\nn2 div n0 n1\nout n2").unwrap();
        assert_eq!(
            interpret(&d, &env(&[("x", 1)]), &HashMap::new()),
            Err(EvalError::DivisionByZero { node: NodeId(2) })
        );
        let d = parse_dfg("n0 input x\nn1 const 40\nn2 shl n0 n1\nout n2").unwrap();
        assert_eq!(
            interpret(&d, &env(&[("x", 1)]), &HashMap::new()),
            Err(EvalError::ShiftOutOfRange {
                node: NodeId(2),
                amount: 40
            })
        );
        let d = parse_dfg("n0 input x\nout n0").unwrap();
        assert!(matches!(
            interpret(&d, &HashMap::new(), &HashMap::new()),
            Err(EvalError::UnboundInput { .. })
        ));
    }

    #[test]
    fn interpret_load_store() {
        let d = parse_dfg(
            "n0 input p\nn1 input v\nn2 store n0 n1\nn3 load n0\nout n3",
        )
        .unwrap();
        let r = interpret(&d, &env(&[("p", 4), ("v", 9)]), &HashMap::new()).unwrap();
        assert_eq!(r[&NodeId(3)], Value::Int(9));
    }

    #[test]
    fn canonical_key_ignores_names() {
        let d1 = parse_dfg("n0 input a\nn1 input b\nn2 add n0 n1\nout n2").unwrap();
        let d2 = parse_dfg("x input a\ny input b\nz add x y\nout z").unwrap();
        let d3 = parse_dfg("n0 input b\nn1 input a\nn2 add n0 n1\nout n2").unwrap();
        assert_eq!(d1.canonical_key(), d2.canonical_key());
        assert_ne!(d1.canonical_key(), d3.canonical_key());
    }
}
