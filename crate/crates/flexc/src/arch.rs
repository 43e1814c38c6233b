//! Target CGRA model: PE grid, per-PE supported operation sets, links, and
//! bundled profiles approximating four published accelerator designs.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dfg::{OpKind, OpSet};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessingElement {
    pub row: u32,
    pub col: u32,
    /// Operations this PE can execute.  Empty means route-only.
    pub ops: Vec<OpKind>,
    /// Whether the PE can hold a value for a cycle while routing.
    #[serde(default = "default_true")]
    pub has_register: bool,
}

/// A CGRA: grid of PEs plus directed inter-PE links.  PE ids are indices
/// into `pes`.
#[derive(Debug, Clone, PartialEq)]
pub struct CgraSpec {
    pub name: String,
    pub rows: u32,
    pub cols: u32,
    pub pes: Vec<ProcessingElement>,
    pub links: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchFile {
    name: String,
    rows: u32,
    cols: u32,
    pes: Vec<ProcessingElement>,
    /// Omitted links default to a 4-neighbor mesh.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    links: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("grid must have at least one row and column")]
    EmptyGrid,
    #[error("duplicate PE position ({0}, {1})")]
    DuplicatePosition(u32, u32),
    #[error("PE position ({0}, {1}) outside the {2}x{3} grid")]
    OutOfGrid(u32, u32, u32, u32),
    #[error("link ({0}, {1}) references a missing PE")]
    DanglingLink(usize, usize),
    #[error("unknown builtin architecture `{0}`")]
    UnknownBuiltin(String),
}

impl CgraSpec {
    /// Union of all per-PE supported sets.
    pub fn supported_ops(&self) -> OpSet {
        self.pes
            .iter()
            .flat_map(|pe| pe.ops.iter().copied())
            .collect()
    }

    /// Ids of PEs that can execute `op`, ascending.
    pub fn pes_supporting(&self, op: OpKind) -> Vec<usize> {
        self.pes
            .iter()
            .enumerate()
            .filter(|(_, pe)| pe.ops.contains(&op))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn has_link(&self, src: usize, dst: usize) -> bool {
        self.links.contains(&(src, dst))
    }

    fn validate(&self) -> Result<(), ArchError> {
        if self.rows == 0 || self.cols == 0 || self.pes.is_empty() {
            return Err(ArchError::EmptyGrid);
        }
        let mut seen = HashSet::new();
        for pe in &self.pes {
            if pe.row >= self.rows || pe.col >= self.cols {
                return Err(ArchError::OutOfGrid(pe.row, pe.col, self.rows, self.cols));
            }
            if !seen.insert((pe.row, pe.col)) {
                return Err(ArchError::DuplicatePosition(pe.row, pe.col));
            }
        }
        for &(src, dst) in &self.links {
            if src >= self.pes.len() || dst >= self.pes.len() {
                return Err(ArchError::DanglingLink(src, dst));
            }
        }
        Ok(())
    }
}

/// Bidirectional 4-neighbor mesh links over the placed PEs.
fn mesh_links(pes: &[ProcessingElement]) -> Vec<(usize, usize)> {
    let by_pos: BTreeMap<(u32, u32), usize> = pes
        .iter()
        .enumerate()
        .map(|(i, pe)| ((pe.row, pe.col), i))
        .collect();
    let mut links = Vec::new();
    for (i, pe) in pes.iter().enumerate() {
        let mut neighbors = Vec::new();
        if pe.row > 0 {
            neighbors.push((pe.row - 1, pe.col));
        }
        if pe.col > 0 {
            neighbors.push((pe.row, pe.col - 1));
        }
        neighbors.push((pe.row + 1, pe.col));
        neighbors.push((pe.row, pe.col + 1));
        for pos in neighbors {
            if let Some(&j) = by_pos.get(&pos) {
                links.push((i, j));
            }
        }
    }
    links.sort_unstable();
    links.dedup();
    links
}

pub fn parse_arch(text: &str) -> Result<CgraSpec, ArchError> {
    let file: ArchFile =
        serde_json::from_str(text).map_err(|e| ArchError::Schema(e.to_string()))?;
    let links = file.links.unwrap_or_else(|| mesh_links(&file.pes));
    let spec = CgraSpec {
        name: file.name,
        rows: file.rows,
        cols: file.cols,
        pes: file.pes,
        links,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn serialize_arch(spec: &CgraSpec) -> String {
    let file = ArchFile {
        name: spec.name.clone(),
        rows: spec.rows,
        cols: spec.cols,
        pes: spec.pes.clone(),
        links: Some(spec.links.clone()),
    };
    serde_json::to_string_pretty(&file).expect("arch serialization cannot fail")
}

pub const BUILTIN_ARCH_NAMES: &[&str] = &["cca", "maeri", "revamp", "sc_cgra"];

fn pe(row: u32, col: u32, ops: &[OpKind]) -> ProcessingElement {
    ProcessingElement {
        row,
        col,
        ops: ops.to_vec(),
        has_register: true,
    }
}

/// Bundled accelerator profiles.  The published designs do not specify
/// their PE layouts completely, so each profile is an approximation that
/// preserves the documented op-set shape: which operation families exist at
/// all, and which are missing.  Every profile carries an add and an integer
/// compare so loop induction variables can run on the array.
pub fn builtin_arch(name: &str) -> Result<CgraSpec, ArchError> {
    use OpKind::*;
    let cmp_ops = [Eq, Ne, Lt, Gt, Le, Ge];
    let spec = match name {
        // 3x3 lightweight array: shifts, boolean logic, compares and
        // selects, but no multiplier, subtractor, or divider.  Memory ops
        // live on the first column.
        "cca" => {
            let base: Vec<OpKind> = [Add, Shl, Shr, And, Or, Xor, Not, Select]
                .into_iter()
                .chain(cmp_ops)
                .collect();
            let mut pes = Vec::new();
            for r in 0..3 {
                for c in 0..3 {
                    let mut ops = base.clone();
                    if c == 0 {
                        ops.push(Load);
                        ops.push(Store);
                    }
                    pes.push(pe(r, c, &ops));
                }
            }
            let links = mesh_links(&pes);
            CgraSpec {
                name: "cca".into(),
                rows: 3,
                cols: 3,
                pes,
                links,
            }
        }
        // 4x4 dataflow array for ML-style float kernels: fadd/fmul
        // everywhere, fsub/fneg on half the PEs, integer add and compares
        // for induction variables, but no boolean arithmetic.
        "maeri" => {
            let mut pes = Vec::new();
            for r in 0..4 {
                for c in 0..4 {
                    let mut ops = vec![Fadd, Fmul, Add];
                    ops.extend(cmp_ops);
                    if (r + c) % 2 == 0 {
                        ops.push(Fsub);
                        ops.push(Fneg);
                    }
                    if c == 0 {
                        ops.push(Load);
                        ops.push(Store);
                    }
                    pes.push(pe(r, c, &ops));
                }
            }
            let links = mesh_links(&pes);
            CgraSpec {
                name: "maeri".into(),
                rows: 4,
                cols: 4,
                pes,
                links,
            }
        }
        // 6x6 heterogeneous array: addition, subtraction, multiplication
        // and some logic operations, with shifts and compares; no floating
        // point and no divider.
        "revamp" => {
            let mut pes = Vec::new();
            for r in 0..6 {
                for c in 0..6 {
                    let mut ops = vec![Add, Sub, Neg];
                    ops.extend(cmp_ops);
                    match (r + c) % 3 {
                        0 => ops.extend([Mul, Shl, Shr]),
                        1 => ops.extend([And, Or, Xor, Not, Select]),
                        _ => ops.extend([Shl, Shr, Select]),
                    }
                    if c == 0 {
                        ops.push(Load);
                        ops.push(Store);
                    }
                    pes.push(pe(r, c, &ops));
                }
            }
            let links = mesh_links(&pes);
            CgraSpec {
                name: "revamp".into(),
                rows: 6,
                cols: 6,
                pes,
                links,
            }
        }
        // 4x4 stochastic-computing array: approximate multiply (isc_mul)
        // and boolean logic everywhere, one exact adder for induction
        // variables; no exact multiplier or subtractor.
        "sc_cgra" => {
            let mut pes = Vec::new();
            for r in 0..4 {
                for c in 0..4 {
                    let mut ops = vec![IscMul, And, Or, Xor, Not, Shl, Shr, Select];
                    ops.extend(cmp_ops);
                    if (r, c) == (0, 0) {
                        ops.push(Add);
                    }
                    if c == 0 {
                        ops.push(Load);
                        ops.push(Store);
                    }
                    pes.push(pe(r, c, &ops));
                }
            }
            let links = mesh_links(&pes);
            CgraSpec {
                name: "sc_cgra".into(),
                rows: 4,
                cols: 4,
                pes,
                links,
            }
        }
        other => return Err(ArchError::UnknownBuiltin(other.to_string())),
    };
    debug_assert!(spec.validate().is_ok());
    Ok(spec)
}
