//! The hybrid dynamic multi-agent runtime.
//!
//! A system couples per-type X-machine behaviour with population-style
//! structure mutation: each step runs one behaviour round (percepts from the
//! grid environment become stream inputs, peer channels follow the
//! communication relation), then evaluates reconfiguration rules
//! (condition => action) that add/remove agents and channels. Both phases
//! are computed against immutable snapshots and committed atomically, so a
//! run is a pure function of (system, steps, seed).

mod engine;
mod system;

pub use engine::{operas_step, perceive, OperasRunner, StepReport};
pub use system::{
    derived_percept_alphabet, percept_tag, AgentId, AgentInstance, AgentTypeDef,
    EnvironmentModel, OperasError, OperasSystem, OperasValidationError, ReconfigAction,
    ReconfigRule, Selector, DIRECTIONS, RESERVED_ACTION_TAGS, TICK,
};
