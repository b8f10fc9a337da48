//! Deterministic stream X-machines and communicating systems of them.
//!
//! An X-machine couples a finite control (states and a next-state partial
//! function) with a typed memory record; each labelled function maps an
//! input item and a memory value to an output item and a new memory value,
//! guarded by a predicate. Determinism is enforced dynamically: two
//! simultaneously applicable functions raise [`XmError::Nondeterminism`]
//! rather than being resolved silently.
//!
//! A communicating system connects machine instances through named
//! single-slot channels. Rounds are atomic: every fire is computed against
//! the pre-round state; a channel read requires a buffer that was full at
//! round start, a write requires one that was empty, so a message written in
//! round k is consumable in round k+1 and never lost.

mod cxm;
mod machine;

pub(crate) use machine::apply_effect;

pub use cxm::{cxm_step, Channel, CxmError, CxmMachine, CxmRunner, CxmSystem, RoundReport};
pub use machine::{
    run_stream, run_stream_trace, xm_step, ChannelRef, GuardedFunction, InputBinding,
    OutputBinding, OutputSpec, StepOutcome, StreamError, Transition, XMachineDef, XmError,
    XmValidationError,
};
