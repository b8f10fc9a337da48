use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::multiset::Multiset;
use crate::symbol::Symbol;

/// A cell type tag drawn from the model's type alphabet.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct CellType(pub Symbol);

impl CellType {
    pub fn new(name: &str) -> CellType {
        CellType(Symbol::new(name))
    }
}

impl fmt::Display for CellType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A bond-making rule: a type-`left` cell containing `left_required` may bond
/// with a type-`right` cell containing `right_required`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BondRule {
    pub left_type: CellType,
    pub left_required: Multiset,
    pub right_required: Multiset,
    pub right_type: CellType,
}

impl fmt::Display for BondRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "bond {} {} -- {} {}",
            self.left_type, self.left_required, self.right_required, self.right_type
        )
    }
}

/// The five rule classes. Communication triggers act as promoters: the
/// trigger must be present in the cell but is not consumed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum PpsRule {
    /// `(a; b, in)_t`: pull one `moved` from a bonded neighbour.
    CommIn {
        trigger: Option<Symbol>,
        moved: Symbol,
        cell_type: CellType,
    },
    /// `(a; b, enter)_t`: pull one `moved` from the environment.
    CommEnter {
        trigger: Option<Symbol>,
        moved: Symbol,
        cell_type: CellType,
    },
    /// `(b, exit)_t`: push one `moved` to the environment.
    CommExit { moved: Symbol, cell_type: CellType },
    /// `(a -> b...)_t`: rewrite one `consumed` into a non-empty multiset.
    Transform {
        consumed: Symbol,
        produced: Multiset,
        cell_type: CellType,
    },
    /// `(a)_t -> (b)_p`: consume `a`, produce `b`, change the cell's type.
    Differentiate {
        consumed: Symbol,
        produced: Symbol,
        from_type: CellType,
        to_type: CellType,
    },
    /// `(a)_t -> (b)_t (c)_t`: replace the cell by two daughters of the same
    /// type; each daughter inherits the residual contents plus its product.
    Divide {
        consumed: Symbol,
        left_product: Symbol,
        right_product: Symbol,
        cell_type: CellType,
    },
    /// `(a)_t -> †`: remove the cell.
    Die { consumed: Symbol, cell_type: CellType },
}

impl PpsRule {
    /// Differentiation, division and death restructure the population: a cell
    /// applying one of these applies nothing else in the same step.
    pub fn is_structural(&self) -> bool {
        matches!(
            self,
            PpsRule::Differentiate { .. } | PpsRule::Divide { .. } | PpsRule::Die { .. }
        )
    }

    /// Type of the cell the rule acts on.
    pub fn subject_type(&self) -> &CellType {
        match self {
            PpsRule::CommIn { cell_type, .. }
            | PpsRule::CommEnter { cell_type, .. }
            | PpsRule::CommExit { cell_type, .. }
            | PpsRule::Transform { cell_type, .. }
            | PpsRule::Divide { cell_type, .. }
            | PpsRule::Die { cell_type, .. } => cell_type,
            PpsRule::Differentiate { from_type, .. } => from_type,
        }
    }

    fn symbols(&self) -> Vec<&Symbol> {
        match self {
            PpsRule::CommIn { trigger, moved, .. } | PpsRule::CommEnter { trigger, moved, .. } => {
                let mut out: Vec<&Symbol> = trigger.iter().collect();
                out.push(moved);
                out
            }
            PpsRule::CommExit { moved, .. } => vec![moved],
            PpsRule::Transform {
                consumed, produced, ..
            } => {
                let mut out = vec![consumed];
                out.extend(produced.symbols());
                out
            }
            PpsRule::Differentiate {
                consumed, produced, ..
            } => vec![consumed, produced],
            PpsRule::Divide {
                consumed,
                left_product,
                right_product,
                ..
            } => vec![consumed, left_product, right_product],
            PpsRule::Die { consumed, .. } => vec![consumed],
        }
    }

    fn types(&self) -> Vec<&CellType> {
        match self {
            PpsRule::Differentiate {
                from_type, to_type, ..
            } => vec![from_type, to_type],
            other => vec![other.subject_type()],
        }
    }
}

fn write_expanded(f: &mut fmt::Formatter<'_>, produced: &Multiset) -> fmt::Result {
    let mut first = true;
    for (sym, n) in produced.iter() {
        for _ in 0..n {
            if !first {
                write!(f, " ")?;
            }
            first = false;
            write!(f, "{sym}")?;
        }
    }
    Ok(())
}

impl fmt::Display for PpsRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PpsRule::CommIn {
                trigger,
                moved,
                cell_type,
            } => match trigger {
                Some(t) => write!(f, "in {cell_type}: {moved} with {t}"),
                None => write!(f, "in {cell_type}: {moved}"),
            },
            PpsRule::CommEnter {
                trigger,
                moved,
                cell_type,
            } => match trigger {
                Some(t) => write!(f, "enter {cell_type}: {moved} with {t}"),
                None => write!(f, "enter {cell_type}: {moved}"),
            },
            PpsRule::CommExit { moved, cell_type } => write!(f, "exit {cell_type}: {moved}"),
            PpsRule::Transform {
                consumed,
                produced,
                cell_type,
            } => {
                write!(f, "transform {cell_type}: {consumed} -> ")?;
                write_expanded(f, produced)
            }
            PpsRule::Differentiate {
                consumed,
                produced,
                from_type,
                to_type,
            } => write!(f, "differentiate {from_type} -> {to_type}: {consumed} -> {produced}"),
            PpsRule::Divide {
                consumed,
                left_product,
                right_product,
                cell_type,
            } => write!(f, "divide {cell_type}: {consumed} -> {left_product} | {right_product}"),
            PpsRule::Die { consumed, cell_type } => write!(f, "die {cell_type}: {consumed}"),
        }
    }
}

/// A complete population system definition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PpsModel {
    pub alphabet: BTreeSet<Symbol>,
    pub cell_types: BTreeSet<CellType>,
    pub bond_rules: Vec<BondRule>,
    /// Initial bond edges over 0-based cell indices; used only at step 0.
    pub initial_graph: BTreeSet<(usize, usize)>,
    pub env_init: Multiset,
    pub initial_cells: Vec<(Multiset, CellType)>,
    pub rules: Vec<PpsRule>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ValidationError {
    #[error("symbol '{symbol}' used in {place} is not in the alphabet")]
    UndeclaredSymbol { symbol: Symbol, place: String },
    #[error("cell type '{cell_type}' used in {place} is not declared")]
    UndeclaredType { cell_type: CellType, place: String },
    #[error("initial graph edge ({a}, {b}) references a missing cell (population size {n})")]
    BadEdge { a: usize, b: usize, n: usize },
    #[error("initial graph edge ({0}, {0}) is a self-loop")]
    SelfLoop(usize),
    #[error("transformation rule {0} produces the empty multiset")]
    EmptyProduct(usize),
}

impl PpsModel {
    pub fn validate(&self) -> Result<(), ValidationError> {
        let check_sym = |symbol: &Symbol, place: String| {
            if self.alphabet.contains(symbol) {
                Ok(())
            } else {
                Err(ValidationError::UndeclaredSymbol {
                    symbol: symbol.clone(),
                    place,
                })
            }
        };
        let check_type = |cell_type: &CellType, place: String| {
            if self.cell_types.contains(cell_type) {
                Ok(())
            } else {
                Err(ValidationError::UndeclaredType {
                    cell_type: cell_type.clone(),
                    place,
                })
            }
        };

        for (i, (contents, cell_type)) in self.initial_cells.iter().enumerate() {
            for sym in contents.symbols() {
                check_sym(sym, format!("cell {}", i + 1))?;
            }
            check_type(cell_type, format!("cell {}", i + 1))?;
        }
        for sym in self.env_init.symbols() {
            check_sym(sym, "environment".to_string())?;
        }
        for (i, rule) in self.bond_rules.iter().enumerate() {
            for sym in rule.left_required.symbols().chain(rule.right_required.symbols()) {
                check_sym(sym, format!("bond rule {}", i + 1))?;
            }
            check_type(&rule.left_type, format!("bond rule {}", i + 1))?;
            check_type(&rule.right_type, format!("bond rule {}", i + 1))?;
        }
        for (i, rule) in self.rules.iter().enumerate() {
            for sym in rule.symbols() {
                check_sym(sym, format!("rule {}", i + 1))?;
            }
            for t in rule.types() {
                check_type(t, format!("rule {}", i + 1))?;
            }
            if let PpsRule::Transform { produced, .. } = rule {
                if produced.is_empty() {
                    return Err(ValidationError::EmptyProduct(i + 1));
                }
            }
        }
        let n = self.initial_cells.len();
        for &(a, b) in &self.initial_graph {
            if a == b {
                return Err(ValidationError::SelfLoop(a));
            }
            if a >= n || b >= n {
                return Err(ValidationError::BadEdge { a, b, n });
            }
        }
        Ok(())
    }
}
