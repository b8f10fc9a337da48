//! Population membrane systems with active cells.
//!
//! A model is a finite alphabet of objects, a set of cell types, bond-making
//! rules, an initial cell population with an initial bond graph, an
//! environment multiset, and rewriting rules of five classes: communication
//! (`in`/`enter`/`exit`), object transformation, cell differentiation, cell
//! division, and cell death. The engine runs discrete steps under maximal or
//! arbitrary parallelism, with all nondeterminism drawn from the seeded run
//! RNG.

mod engine;
mod model;
mod state;

pub use engine::{Engine, EngineError, EngineOptions};
pub use model::{BondRule, CellType, PpsModel, PpsRule, ValidationError};
pub use state::{
    BondMode, Cell, CellId, Configuration, RuleInstance, StepMode, StepSelection,
};
