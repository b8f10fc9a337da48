use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::ser::SerializeSeq;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::expr::{
    conforms, typecheck, EvalError, Expr, ExprCaps, IoItem, Memory, TypeExpr,
};
use crate::multiset::Multiset;
use crate::symbol::Symbol;
use crate::xm::{ChannelRef, InputBinding, OutputBinding, XMachineDef, XmError, XmValidationError};

/// The four percept directions plus the agent's own cell, in canonical order.
pub const DIRECTIONS: [(&str, i64, i64); 5] = [
    ("N", 0, -1),
    ("E", 1, 0),
    ("S", 0, 1),
    ("W", -1, 0),
    ("here", 0, 0),
];

/// The implicit clock percept every agent receives at the end of its percept
/// sequence.
pub const TICK: &str = "tick";

/// Output tags interpreted by the runtime as actions on the environment,
/// applied in agent-id order after the behaviour phase:
/// `take(:sym)` moves one object from the agent's grid cell into the integer
/// memory field of the same name (no-op when absent, so transfers stay
/// atomic), `drop(:sym)` is the inverse, `deposit(:sym)` creates one object
/// at the agent's cell, `move(dx, dy)` is a 4-neighbourhood step (no-op out
/// of bounds), and `walk()` / `walk(:sym)` is a seeded uniform step over the
/// in-bounds directions, the latter leaving one `sym` at the origin cell.
pub const RESERVED_ACTION_TAGS: [&str; 5] = ["take", "drop", "deposit", "move", "walk"];

pub fn percept_tag(base: &Symbol, direction: &str) -> Symbol {
    Symbol::new(&format!("{base}_{direction}"))
}

/// All input tags an agent of a type with the given percept filter can ever
/// receive from perception: the direction-tagged forms plus `tick`.
pub fn derived_percept_alphabet(percepts: &BTreeSet<Symbol>) -> BTreeSet<Symbol> {
    let mut out: BTreeSet<Symbol> = percepts
        .iter()
        .flat_map(|base| DIRECTIONS.iter().map(move |(d, _, _)| percept_tag(base, d)))
        .collect();
    out.insert(Symbol::new(TICK));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct AgentId(pub u64);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AgentInstance {
    pub id: AgentId,
    pub agent_type: Symbol,
    pub state: Symbol,
    pub memory: Memory,
}

/// Picks the target of a reconfiguration action. Every selector resolves to
/// at most one agent by construction except `UniqueOfType`, which errors when
/// several candidates match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Selector {
    /// The acting agent itself.
    This,
    /// Nearest other agent by Manhattan distance, ties broken by lowest id.
    Nearest,
    /// The sole other agent of the given type.
    UniqueOfType(Symbol),
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::This => write!(f, "self"),
            Selector::Nearest => write!(f, "nearest"),
            Selector::UniqueOfType(t) => write!(f, "unique {t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ReconfigAction {
    /// Spawn a fresh agent of a registered type at the creator's position;
    /// the initializer overrides memory fields (evaluated in the creator's
    /// context).
    AddAgent {
        agent_type: Symbol,
        init: Vec<(String, Expr)>,
    },
    RemoveAgent(Selector),
    AddChannel(Selector),
    RemoveChannel(Selector),
}

/// `condition => action`. Conditions may read the agent's memory, its
/// neighbour count, and object counts at its grid cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReconfigRule {
    pub condition: Expr,
    pub action: ReconfigAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AgentTypeDef {
    pub behaviour: XMachineDef,
    /// Base object symbols this type notices in its grid locality.
    pub percepts: BTreeSet<Symbol>,
    pub mutation_rules: Vec<ReconfigRule>,
}

/// A rectangular grid of object multisets plus a global multiset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EnvironmentModel {
    pub width: u32,
    pub height: u32,
    pub grid: Vec<Multiset>,
    pub globals: Multiset,
}

impl EnvironmentModel {
    pub fn empty(width: u32, height: u32) -> EnvironmentModel {
        EnvironmentModel {
            width,
            height,
            grid: vec![Multiset::new(); (width as usize) * (height as usize)],
            globals: Multiset::new(),
        }
    }

    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64
    }

    pub fn at(&self, x: i64, y: i64) -> &Multiset {
        &self.grid[(y as usize) * (self.width as usize) + (x as usize)]
    }

    pub fn at_mut(&mut self, x: i64, y: i64) -> &mut Multiset {
        &mut self.grid[(y as usize) * (self.width as usize) + (x as usize)]
    }

    /// Per-symbol totals over the grid plus globals.
    pub fn totals(&self) -> Multiset {
        let mut total = self.globals.clone();
        for cell in &self.grid {
            total.add_assign(cell).expect("desk-scale totals cannot overflow");
        }
        total
    }
}

fn serialize_buffers<S: Serializer>(
    buffers: &BTreeMap<(AgentId, AgentId), IoItem>,
    serializer: S,
) -> Result<S::Ok, S::Error> {
    let mut seq = serializer.serialize_seq(Some(buffers.len()))?;
    for ((from, to), item) in buffers {
        seq.serialize_element(&(from.0, to.0, item))?;
    }
    seq.end()
}

/// A complete system: type registry, global reconfiguration rules,
/// environment, communication relation, live agents, and the pending
/// single-slot peer buffers induced by the relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OperasSystem {
    pub types: BTreeMap<Symbol, AgentTypeDef>,
    pub reconfig_rules: Vec<ReconfigRule>,
    pub environment: EnvironmentModel,
    pub relation: BTreeSet<(AgentId, AgentId)>,
    pub agents: BTreeMap<AgentId, AgentInstance>,
    /// Full directed buffers (from, to); absent means empty.
    #[serde(serialize_with = "serialize_buffers")]
    pub buffers: BTreeMap<(AgentId, AgentId), IoItem>,
    pub next_agent_id: u64,
}

pub fn normalize_pair(a: AgentId, b: AgentId) -> (AgentId, AgentId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OperasValidationError {
    #[error("agent {0} has unregistered type '{1}'")]
    UnregisteredType(AgentId, Symbol),
    #[error("type '{0}': {1}")]
    Definition(Symbol, XmValidationError),
    #[error("agent {0}: state '{1}' is not declared by its type's behaviour")]
    BadAgentState(AgentId, Symbol),
    #[error("agent {0}: memory field '{1}' missing or not conforming to the schema")]
    BadAgentMemory(AgentId, String),
    #[error("type '{0}': behaviour memory schema must declare a 'pos' field of type (int, int)")]
    MissingPos(Symbol),
    #[error("type '{0}': percept tag '{1}' is not in the behaviour's input alphabet")]
    PerceptAlphabet(Symbol, Symbol),
    #[error("type '{0}': named channel bindings are not available to agents (use peer bindings)")]
    NamedChannelBinding(Symbol),
    #[error("relation pair ({0}, {1}) references a missing agent")]
    DanglingRelation(AgentId, AgentId),
    #[error("relation pair ({0}, {0}) is a self-pair")]
    SelfRelation(AgentId),
    #[error("buffer ({0}, {1}) does not follow a relation pair")]
    StrayBuffer(AgentId, AgentId),
    #[error("{place}: rule {rule}: condition does not typecheck: {source}")]
    BadCondition {
        place: String,
        rule: usize,
        source: crate::expr::TypeError,
    },
    #[error("{place}: rule {rule}: {detail}")]
    BadAction {
        place: String,
        rule: usize,
        detail: String,
    },
    #[error("environment grid length {got} does not match {width}x{height}")]
    GridSize { got: usize, width: u32, height: u32 },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OperasError {
    #[error("agent {agent}: {source}")]
    Behaviour { agent: AgentId, source: XmError },
    #[error("agent {agent}: reconfiguration condition failed: {source}")]
    Condition { agent: AgentId, source: EvalError },
    #[error("agent {agent}: selector '{selector}' matches several targets: {matches:?}")]
    SelectorAmbiguous {
        agent: AgentId,
        selector: String,
        matches: Vec<u64>,
    },
    #[error("agent {agent}: position ({x}, {y}) is outside the grid")]
    OutOfBounds { agent: AgentId, x: i64, y: i64 },
    #[error("agent {agent}: environment action failed: {detail}")]
    Action { agent: AgentId, detail: String },
    #[error(transparent)]
    Validation(#[from] OperasValidationError),
}

impl OperasSystem {
    pub fn type_of(&self, agent: &AgentInstance) -> &AgentTypeDef {
        &self.types[&agent.agent_type]
    }

    /// The system percept alphabet: the union of the per-type derived
    /// percept alphabets.
    pub fn system_percepts(&self) -> BTreeSet<Symbol> {
        self.types
            .values()
            .flat_map(|t| derived_percept_alphabet(&t.percepts))
            .collect()
    }

    pub fn neighbour_count(&self, id: AgentId) -> u64 {
        self.relation
            .iter()
            .filter(|&&(a, b)| a == id || b == id)
            .count() as u64
    }

    pub fn peers(&self, id: AgentId) -> Vec<AgentId> {
        let mut out: Vec<AgentId> = self
            .relation
            .iter()
            .filter_map(|&(a, b)| {
                if a == id {
                    Some(b)
                } else if b == id {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort();
        out
    }

    pub fn validate(&self) -> Result<(), OperasValidationError> {
        let expected = (self.environment.width as usize) * (self.environment.height as usize);
        if self.environment.grid.len() != expected {
            return Err(OperasValidationError::GridSize {
                got: self.environment.grid.len(),
                width: self.environment.width,
                height: self.environment.height,
            });
        }
        for (type_name, tdef) in &self.types {
            tdef.behaviour
                .validate()
                .map_err(|e| OperasValidationError::Definition(type_name.clone(), e))?;
            match tdef.behaviour.memory_schema.get("pos") {
                Some(ty) if *ty == TypeExpr::pos() => {}
                _ => return Err(OperasValidationError::MissingPos(type_name.clone())),
            }
            for tag in derived_percept_alphabet(&tdef.percepts) {
                if !tdef.behaviour.input_alphabet.contains(&tag) {
                    return Err(OperasValidationError::PerceptAlphabet(
                        type_name.clone(),
                        tag,
                    ));
                }
            }
            for f in &tdef.behaviour.functions {
                let named = matches!(
                    &f.input_binding,
                    InputBinding::Channel(ChannelRef::Named(_))
                ) || matches!(
                    &f.output_binding,
                    OutputBinding::Channel(ChannelRef::Named(_))
                );
                if named {
                    return Err(OperasValidationError::NamedChannelBinding(type_name.clone()));
                }
            }
            let place = format!("type '{type_name}'");
            self.validate_rules(&tdef.mutation_rules, &tdef.behaviour.memory_schema, &place)?;
        }
        // Global rules run against every agent, so their conditions must
        // typecheck against every registered type's schema.
        for (type_name, tdef) in &self.types {
            let place = format!("global rules against type '{type_name}'");
            self.validate_rules(&self.reconfig_rules, &tdef.behaviour.memory_schema, &place)?;
        }
        for (id, agent) in &self.agents {
            let tdef = self
                .types
                .get(&agent.agent_type)
                .ok_or_else(|| {
                    OperasValidationError::UnregisteredType(*id, agent.agent_type.clone())
                })?;
            if !tdef.behaviour.states.contains(&agent.state) {
                return Err(OperasValidationError::BadAgentState(*id, agent.state.clone()));
            }
            for (field, ty) in &tdef.behaviour.memory_schema {
                match agent.memory.get(field) {
                    Some(v) if conforms(v, ty) => {}
                    _ => {
                        return Err(OperasValidationError::BadAgentMemory(*id, field.clone()))
                    }
                }
            }
        }
        for &(a, b) in &self.relation {
            if a == b {
                return Err(OperasValidationError::SelfRelation(a));
            }
            if !self.agents.contains_key(&a) || !self.agents.contains_key(&b) {
                return Err(OperasValidationError::DanglingRelation(a, b));
            }
        }
        for &(from, to) in self.buffers.keys() {
            if !self.relation.contains(&normalize_pair(from, to)) {
                return Err(OperasValidationError::StrayBuffer(from, to));
            }
        }
        Ok(())
    }

    fn validate_rules(
        &self,
        rules: &[ReconfigRule],
        schema: &BTreeMap<String, TypeExpr>,
        place: &str,
    ) -> Result<(), OperasValidationError> {
        for (i, rule) in rules.iter().enumerate() {
            match typecheck(&rule.condition, schema, ExprCaps::reconfig()) {
                Ok(TypeExpr::Bool) | Ok(TypeExpr::Unknown) => {}
                Ok(other) => {
                    return Err(OperasValidationError::BadCondition {
                        place: place.to_string(),
                        rule: i + 1,
                        source: crate::expr::TypeError::Mismatch {
                            expected: "bool".to_string(),
                            found: other.to_string(),
                        },
                    })
                }
                Err(source) => {
                    return Err(OperasValidationError::BadCondition {
                        place: place.to_string(),
                        rule: i + 1,
                        source,
                    })
                }
            }
            match &rule.action {
                ReconfigAction::AddAgent { agent_type, init } => {
                    let target = self.types.get(agent_type).ok_or_else(|| {
                        OperasValidationError::BadAction {
                            place: place.to_string(),
                            rule: i + 1,
                            detail: format!("add targets unregistered type '{agent_type}'"),
                        }
                    })?;
                    for (field, e) in init {
                        if !target.behaviour.memory_schema.contains_key(field) {
                            return Err(OperasValidationError::BadAction {
                                place: place.to_string(),
                                rule: i + 1,
                                detail: format!(
                                    "initializer targets unknown field '{field}' of type '{agent_type}'"
                                ),
                            });
                        }
                        typecheck(e, schema, ExprCaps::reconfig()).map_err(|e| {
                            OperasValidationError::BadAction {
                                place: place.to_string(),
                                rule: i + 1,
                                detail: e.to_string(),
                            }
                        })?;
                    }
                }
                ReconfigAction::AddChannel(sel) | ReconfigAction::RemoveChannel(sel) => {
                    if *sel == Selector::This {
                        return Err(OperasValidationError::BadAction {
                            place: place.to_string(),
                            rule: i + 1,
                            detail: "channel actions cannot target self".to_string(),
                        });
                    }
                }
                ReconfigAction::RemoveAgent(_) => {}
            }
        }
        Ok(())
    }
}
