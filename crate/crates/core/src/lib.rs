//! Execution engines for formally modelled dynamic multi-agent systems.
//!
//! Three related formalisms share this crate:
//!
//! * [`pps`]: population membrane systems with active cells: multiset
//!   rewriting under maximal or arbitrary parallelism, cell differentiation,
//!   division, death, and a bond graph maintained by bond-making rules.
//! * [`xm`]: deterministic stream X-machines (finite control plus a typed
//!   memory record) and systems of them communicating over single-slot
//!   blocking channels.
//! * [`operas`]: the hybrid runtime: agents whose behaviour is an X-machine
//!   and whose population/communication structure mutates under
//!   condition/action rules, living on a 2-D grid environment.
//!
//! [`models`] ships the executable case-study corpus (tumour growth,
//! ant colony) and [`trace`] the reproducible run-trace format. Every run is
//! a pure function of (model, steps, mode, seed); see [`rng`] for the
//! generator contract.

pub mod expr;
pub mod models;
pub mod multiset;
pub mod operas;
pub mod pps;
pub mod rng;
pub mod symbol;
pub mod trace;
pub mod xm;

pub use multiset::{Multiset, MultisetError};
pub use symbol::Symbol;
