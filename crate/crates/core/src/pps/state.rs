use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::multiset::Multiset;

use super::model::CellType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct CellId(pub u64);

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Cell {
    pub id: CellId,
    pub cell_type: CellType,
    pub contents: Multiset,
}

/// One global state: live cells, the bond graph over them, the environment
/// multiset, and the step counter. Bond edges are stored normalized
/// (`a < b`); every endpoint references a live cell and there are no
/// self-loops.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Configuration {
    pub cells: BTreeMap<CellId, Cell>,
    pub bonds: BTreeSet<(CellId, CellId)>,
    pub environment: Multiset,
    pub step_index: u64,
    /// Monotone fresh-id counter; division daughters draw from it so traces
    /// are reproducible.
    pub next_cell_id: u64,
}

impl Configuration {
    pub fn bonded_neighbours(&self, cell: CellId) -> impl Iterator<Item = CellId> + '_ {
        self.bonds.iter().filter_map(move |&(a, b)| {
            if a == cell {
                Some(b)
            } else if b == cell {
                Some(a)
            } else {
                None
            }
        })
    }

    pub fn total_objects(&self) -> Multiset {
        let mut total = self.environment.clone();
        for cell in self.cells.values() {
            total
                .add_assign(&cell.contents)
                .expect("desk-scale totals cannot overflow");
        }
        total
    }
}

pub fn normalize_edge(a: CellId, b: CellId) -> (CellId, CellId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StepMode {
    /// Add rule instances until no further instance is applicable.
    MaximalParallel,
    /// A seeded non-empty sub-selection of a maximal selection.
    ArbitraryParallel,
}

impl fmt::Display for StepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepMode::MaximalParallel => write!(f, "max"),
            StepMode::ArbitraryParallel => write!(f, "arb"),
        }
    }
}

impl FromStr for StepMode {
    type Err = String;

    fn from_str(s: &str) -> Result<StepMode, String> {
        match s {
            "max" => Ok(StepMode::MaximalParallel),
            "arb" => Ok(StepMode::ArbitraryParallel),
            other => Err(format!("unknown step mode '{other}' (expected max|arb)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BondMode {
    /// Bonds recomputed from scratch each step from the bond-making rules.
    Dynamic,
    /// Bonds carried over step to step: dead endpoints pruned, division
    /// daughters inherit the parent's bonds.
    Static,
}

impl fmt::Display for BondMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BondMode::Dynamic => write!(f, "dynamic"),
            BondMode::Static => write!(f, "static"),
        }
    }
}

impl FromStr for BondMode {
    type Err = String;

    fn from_str(s: &str) -> Result<BondMode, String> {
        match s {
            "dynamic" => Ok(BondMode::Dynamic),
            "static" => Ok(BondMode::Static),
            other => Err(format!("unknown bond mode '{other}' (expected dynamic|static)")),
        }
    }
}

/// A grounded rule occurrence: rule index, subject cell, and for `in`
/// communication the specific bonded neighbour the object is pulled from.
/// The derived order (cell, rule, source) is the canonical selection order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct RuleInstance {
    pub cell: CellId,
    pub rule: usize,
    pub source: Option<CellId>,
}

/// The multiset of rule instances applied in one step (repeats allowed),
/// sorted canonically.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StepSelection {
    pub instances: Vec<RuleInstance>,
}

impl StepSelection {
    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}
