//! Executable case-study corpus: the tumour-growth population system and the
//! ant-colony models, with their documented expected properties. Pure,
//! deterministic constructors; these double as integration fixtures.

mod ants;
mod tumour;

use thiserror::Error;

pub use ants::{ant_behaviour, build_ants, build_food_exchange, total_colony_food, AntParams};
pub use tumour::{build_tumour, cell_age, TumourParams, MTRANS, STEM, TRANS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("parameter constraint violated: {0}")]
pub struct ParameterError(pub String);
