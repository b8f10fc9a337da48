use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::expr::{
    conforms, eval, typecheck, EvalCtx, EvalError, Expr, ExprCaps, IoItem, Memory, TypeExpr,
};
use crate::symbol::Symbol;
use crate::trace::{
    digest_of, ModelKind, Snapshot, StreamSnapshot, Terminal, Trace, TraceHeader, TRACE_VERSION,
};

/// Where a channel-bound function finds its channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ChannelRef {
    /// A named channel of a communicating system.
    Named(Symbol),
    /// The dynamically resolved communication partner (OPERAS agents).
    Peer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum InputBinding {
    Stream,
    Channel(ChannelRef),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum OutputBinding {
    Stream,
    Channel(ChannelRef),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum OutputSpec {
    /// A fixed alphabet tag with an evaluated payload.
    Item { tag: Symbol, args: Vec<Expr> },
    /// Re-emit the input item unchanged (requires the input alphabet to be
    /// contained in the output alphabet).
    Echo,
}

/// A guarded partial function: applicable when its guard holds on the
/// (input, memory) pair; the effect yields the output item and the next
/// memory (updates are simultaneous, all evaluated against the old memory).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GuardedFunction {
    pub name: Symbol,
    pub guard: Expr,
    pub output: OutputSpec,
    pub updates: Vec<(String, Expr)>,
    pub input_binding: InputBinding,
    pub output_binding: OutputBinding,
}

impl GuardedFunction {
    /// Stream-bound on both sides, the common case.
    pub fn new(name: &str, guard: Expr, output: OutputSpec, updates: Vec<(&str, Expr)>) -> Self {
        GuardedFunction {
            name: Symbol::new(name),
            guard,
            output,
            updates: updates
                .into_iter()
                .map(|(f, e)| (f.to_string(), e))
                .collect(),
            input_binding: InputBinding::Stream,
            output_binding: OutputBinding::Stream,
        }
    }

    pub fn from_channel(mut self, chan: ChannelRef) -> Self {
        self.input_binding = InputBinding::Channel(chan);
        self
    }

    pub fn to_channel(mut self, chan: ChannelRef) -> Self {
        self.output_binding = OutputBinding::Channel(chan);
        self
    }
}

/// One arrow of the next-state partial function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Transition {
    pub from: Symbol,
    pub function: Symbol,
    pub to: Symbol,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct XMachineDef {
    pub name: Symbol,
    pub input_alphabet: BTreeSet<Symbol>,
    pub output_alphabet: BTreeSet<Symbol>,
    pub states: BTreeSet<Symbol>,
    pub memory_schema: BTreeMap<String, TypeExpr>,
    pub functions: Vec<GuardedFunction>,
    pub transitions: Vec<Transition>,
    pub initial_state: Symbol,
    pub initial_memory: Memory,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum XmValidationError {
    #[error("machine '{0}': initial state '{1}' is not declared")]
    InitialStateUndeclared(Symbol, Symbol),
    #[error("machine '{0}': transition references undeclared state '{1}'")]
    UnknownState(Symbol, Symbol),
    #[error("machine '{0}': transition references undeclared function '{1}'")]
    UnknownFunction(Symbol, Symbol),
    #[error("machine '{0}': duplicate function name '{1}'")]
    DuplicateFunction(Symbol, Symbol),
    #[error("machine '{0}': duplicate transition from '{1}' on '{2}'")]
    DuplicateTransition(Symbol, Symbol, Symbol),
    #[error("machine '{0}': initial memory field '{1}' does not conform to its schema type")]
    MemoryMismatch(Symbol, String),
    #[error("machine '{0}': initial memory is missing field '{1}'")]
    MissingMemoryField(Symbol, String),
    #[error("machine '{0}': initial memory has undeclared field '{1}'")]
    ExtraMemoryField(Symbol, String),
    #[error("machine '{0}', function '{1}': guard is not boolean ({2})")]
    BadGuard(Symbol, Symbol, String),
    #[error("machine '{0}', function '{1}': {2}")]
    BadEffect(Symbol, Symbol, String),
    #[error("machine '{0}', function '{1}': output tag '{2}' is not in the output alphabet")]
    OutputTagUndeclared(Symbol, Symbol, Symbol),
    #[error("machine '{0}', function '{1}': echo output requires the input alphabet to be contained in the output alphabet")]
    EchoAlphabet(Symbol, Symbol),
}

impl XMachineDef {
    pub fn function(&self, name: &Symbol) -> Option<&GuardedFunction> {
        self.functions.iter().find(|f| &f.name == name)
    }

    pub fn transitions_from<'a>(&'a self, state: &'a Symbol) -> impl Iterator<Item = &'a Transition> {
        self.transitions.iter().filter(move |t| &t.from == state)
    }

    pub fn validate(&self) -> Result<(), XmValidationError> {
        let m = || self.name.clone();
        if !self.states.contains(&self.initial_state) {
            return Err(XmValidationError::InitialStateUndeclared(
                m(),
                self.initial_state.clone(),
            ));
        }
        let mut names = BTreeSet::new();
        for f in &self.functions {
            if !names.insert(f.name.clone()) {
                return Err(XmValidationError::DuplicateFunction(m(), f.name.clone()));
            }
        }
        let mut arrows = BTreeSet::new();
        for t in &self.transitions {
            if !self.states.contains(&t.from) {
                return Err(XmValidationError::UnknownState(m(), t.from.clone()));
            }
            if !self.states.contains(&t.to) {
                return Err(XmValidationError::UnknownState(m(), t.to.clone()));
            }
            if self.function(&t.function).is_none() {
                return Err(XmValidationError::UnknownFunction(m(), t.function.clone()));
            }
            if !arrows.insert((t.from.clone(), t.function.clone())) {
                return Err(XmValidationError::DuplicateTransition(
                    m(),
                    t.from.clone(),
                    t.function.clone(),
                ));
            }
        }
        for (field, ty) in &self.memory_schema {
            match self.initial_memory.get(field) {
                None => {
                    return Err(XmValidationError::MissingMemoryField(m(), field.clone()))
                }
                Some(v) if !conforms(v, ty) => {
                    return Err(XmValidationError::MemoryMismatch(m(), field.clone()))
                }
                _ => {}
            }
        }
        for field in self.initial_memory.keys() {
            if !self.memory_schema.contains_key(field) {
                return Err(XmValidationError::ExtraMemoryField(m(), field.clone()));
            }
        }
        for f in &self.functions {
            match typecheck(&f.guard, &self.memory_schema, ExprCaps::machine()) {
                Ok(TypeExpr::Bool) | Ok(TypeExpr::Unknown) => {}
                Ok(other) => {
                    return Err(XmValidationError::BadGuard(
                        m(),
                        f.name.clone(),
                        format!("has type {other}"),
                    ))
                }
                Err(e) => {
                    return Err(XmValidationError::BadGuard(m(), f.name.clone(), e.to_string()))
                }
            }
            match &f.output {
                OutputSpec::Item { tag, args } => {
                    if !self.output_alphabet.contains(tag) {
                        return Err(XmValidationError::OutputTagUndeclared(
                            m(),
                            f.name.clone(),
                            tag.clone(),
                        ));
                    }
                    for a in args {
                        typecheck(a, &self.memory_schema, ExprCaps::machine()).map_err(|e| {
                            XmValidationError::BadEffect(m(), f.name.clone(), e.to_string())
                        })?;
                    }
                }
                OutputSpec::Echo => {
                    if !self.input_alphabet.is_subset(&self.output_alphabet) {
                        return Err(XmValidationError::EchoAlphabet(m(), f.name.clone()));
                    }
                }
            }
            for (field, e) in &f.updates {
                let field_ty = self.memory_schema.get(field).ok_or_else(|| {
                    XmValidationError::BadEffect(
                        m(),
                        f.name.clone(),
                        format!("update targets unknown field '{field}'"),
                    )
                })?;
                let got = typecheck(e, &self.memory_schema, ExprCaps::machine()).map_err(|e| {
                    XmValidationError::BadEffect(m(), f.name.clone(), e.to_string())
                })?;
                let unifies = matches!(got, TypeExpr::Unknown)
                    || matches!(field_ty, TypeExpr::Unknown)
                    || got == *field_ty;
                if !unifies {
                    return Err(XmValidationError::BadEffect(
                        m(),
                        f.name.clone(),
                        format!("update of '{field}' has type {got}, field is {field_ty}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum XmError {
    #[error("no applicable function in state '{state}' on input {input}")]
    NoApplicableFunction { state: Symbol, input: IoItem },
    #[error("nondeterminism in state '{state}' on input {input}: {functions:?} are simultaneously applicable")]
    Nondeterminism {
        state: Symbol,
        input: IoItem,
        functions: Vec<Symbol>,
    },
    #[error("input tag '{tag}' is not in the input alphabet")]
    InputNotInAlphabet { tag: Symbol },
    #[error("unknown state '{0}'")]
    UnknownState(Symbol),
    #[error("evaluation error in function '{function}': {source}")]
    Eval {
        function: Symbol,
        source: EvalError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub state: Symbol,
    pub memory: Memory,
    pub output: IoItem,
    pub function: Symbol,
}

pub(crate) fn apply_effect(
    f: &GuardedFunction,
    memory: &Memory,
    input: &IoItem,
) -> Result<(IoItem, Memory), XmError> {
    let ctx = EvalCtx::machine(memory, input);
    let output = match &f.output {
        OutputSpec::Item { tag, args } => {
            let mut out_args = Vec::with_capacity(args.len());
            for a in args {
                out_args.push(eval(a, &ctx).map_err(|e| XmError::Eval {
                    function: f.name.clone(),
                    source: e,
                })?);
            }
            IoItem {
                tag: tag.clone(),
                args: out_args,
            }
        }
        OutputSpec::Echo => input.clone(),
    };
    let mut next = memory.clone();
    for (field, e) in &f.updates {
        let v = eval(e, &ctx).map_err(|e| XmError::Eval {
            function: f.name.clone(),
            source: e,
        })?;
        next.insert(field.clone(), v);
    }
    Ok((output, next))
}

/// One transition of a standalone machine: exactly one function with an
/// outgoing arrow from `state` whose guard holds must exist. Channel bindings
/// are ignored here; they only constrain applicability inside a
/// communicating system.
pub fn xm_step(
    def: &XMachineDef,
    state: &Symbol,
    memory: &Memory,
    input: &IoItem,
) -> Result<StepOutcome, XmError> {
    if !def.states.contains(state) {
        return Err(XmError::UnknownState(state.clone()));
    }
    if !def.input_alphabet.contains(&input.tag) {
        return Err(XmError::InputNotInAlphabet {
            tag: input.tag.clone(),
        });
    }
    let ctx = EvalCtx::machine(memory, input);
    let mut applicable: Vec<&Transition> = Vec::new();
    for t in def.transitions_from(state) {
        let f = def.function(&t.function).expect("validated transition");
        let holds = eval(&f.guard, &ctx)
            .map_err(|e| XmError::Eval {
                function: f.name.clone(),
                source: e,
            })?
            .as_bool()
            .map_err(|e| XmError::Eval {
                function: f.name.clone(),
                source: e,
            })?;
        if holds {
            applicable.push(t);
        }
    }
    match applicable.len() {
        0 => Err(XmError::NoApplicableFunction {
            state: state.clone(),
            input: input.clone(),
        }),
        1 => {
            let t = applicable[0];
            let f = def.function(&t.function).expect("validated transition");
            let (output, next_memory) = apply_effect(f, memory, input)?;
            Ok(StepOutcome {
                state: t.to.clone(),
                memory: next_memory,
                output,
                function: f.name.clone(),
            })
        }
        _ => Err(XmError::Nondeterminism {
            state: state.clone(),
            input: input.clone(),
            functions: applicable.iter().map(|t| t.function.clone()).collect(),
        }),
    }
}

/// Error from a stream run, carrying the offending input index and the
/// outputs produced before it.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("stream run failed at input index {index}: {source}")]
pub struct StreamError {
    pub index: usize,
    pub state: Symbol,
    pub outputs: Vec<IoItem>,
    pub source: XmError,
}

/// Fold [`xm_step`] over an input sequence from (q0, m0).
pub fn run_stream(def: &XMachineDef, inputs: &[IoItem]) -> Result<Vec<IoItem>, StreamError> {
    let mut state = def.initial_state.clone();
    let mut memory = def.initial_memory.clone();
    let mut outputs = Vec::with_capacity(inputs.len());
    for (index, input) in inputs.iter().enumerate() {
        match xm_step(def, &state, &memory, input) {
            Ok(outcome) => {
                outputs.push(outcome.output);
                state = outcome.state;
                memory = outcome.memory;
            }
            Err(source) => {
                return Err(StreamError {
                    index,
                    state,
                    outputs,
                    source,
                })
            }
        }
    }
    Ok(outputs)
}

/// Stream run as a full trace (one snapshot per consumed input, plus the
/// initial one).
pub fn run_stream_trace(def: &XMachineDef, inputs: &[IoItem]) -> Result<Trace, StreamError> {
    let mut state = def.initial_state.clone();
    let mut memory = def.initial_memory.clone();
    let mut snapshots = vec![Snapshot::Stream(StreamSnapshot {
        step: 0,
        state: state.clone(),
        memory: memory.clone(),
        input: None,
        output: None,
    })];
    let mut outputs = Vec::new();
    for (index, input) in inputs.iter().enumerate() {
        match xm_step(def, &state, &memory, input) {
            Ok(outcome) => {
                state = outcome.state;
                memory = outcome.memory;
                outputs.push(outcome.output.clone());
                snapshots.push(Snapshot::Stream(StreamSnapshot {
                    step: (index + 1) as u64,
                    state: state.clone(),
                    memory: memory.clone(),
                    input: Some(input.clone()),
                    output: Some(outcome.output),
                }));
            }
            Err(source) => {
                return Err(StreamError {
                    index,
                    state,
                    outputs,
                    source,
                })
            }
        }
    }
    Ok(Trace {
        header: TraceHeader {
            v: TRACE_VERSION,
            kind: ModelKind::Xm,
            model: digest_of(def),
            mode: None,
            seed: None,
            steps: inputs.len() as u64,
            bonds: None,
            death_releases_objects: None,
        },
        snapshots,
        terminal: Terminal::Completed {
            steps: inputs.len() as u64,
        },
    })
}

impl fmt::Display for InputBinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputBinding::Stream => write!(f, "stream"),
            InputBinding::Channel(ChannelRef::Named(c)) => write!(f, "channel {c}"),
            InputBinding::Channel(ChannelRef::Peer) => write!(f, "peer"),
        }
    }
}

impl fmt::Display for OutputBinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutputBinding::Stream => write!(f, "stream"),
            OutputBinding::Channel(ChannelRef::Named(c)) => write!(f, "channel {c}"),
            OutputBinding::Channel(ChannelRef::Peer) => write!(f, "peer"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Value;

    fn syms(names: &[&str]) -> BTreeSet<Symbol> {
        names.iter().map(|n| Symbol::new(n)).collect()
    }

    /// One state, one function copying input to output, memory unchanged.
    pub(crate) fn echo_machine() -> XMachineDef {
        XMachineDef {
            name: Symbol::new("Echo"),
            input_alphabet: syms(&["a", "b", "c"]),
            output_alphabet: syms(&["a", "b", "c"]),
            states: syms(&["q0"]),
            memory_schema: BTreeMap::new(),
            functions: vec![GuardedFunction::new(
                "copy",
                Expr::truth(true),
                OutputSpec::Echo,
                vec![],
            )],
            transitions: vec![Transition {
                from: Symbol::new("q0"),
                function: Symbol::new("copy"),
                to: Symbol::new("q0"),
            }],
            initial_state: Symbol::new("q0"),
            initial_memory: Memory::new(),
        }
    }

    fn items(tags: &[&str]) -> Vec<IoItem> {
        tags.iter().map(|t| IoItem::plain(t)).collect()
    }

    #[test]
    fn echo_machine_is_identity() {
        let def = echo_machine();
        def.validate().unwrap();
        let inputs = items(&["a", "b", "c"]);
        assert_eq!(run_stream(&def, &inputs).unwrap(), inputs);
    }

    #[test]
    fn empty_input_empty_output() {
        let def = echo_machine();
        assert!(run_stream(&def, &[]).unwrap().is_empty());
    }

    #[test]
    fn echo_step_preserves_state_and_memory() {
        let def = echo_machine();
        let out = xm_step(
            &def,
            &Symbol::new("q0"),
            &Memory::new(),
            &IoItem::plain("b"),
        )
        .unwrap();
        assert_eq!(out.state, Symbol::new("q0"));
        assert_eq!(out.output, IoItem::plain("b"));
        assert!(out.memory.is_empty());
    }

    /// Two states; the third input symbol has no guard anywhere.
    fn blocking_machine() -> XMachineDef {
        let mut def = echo_machine();
        def.name = Symbol::new("Blocker");
        def.states = syms(&["q0", "q1"]);
        def.functions = vec![
            GuardedFunction::new(
                "first",
                Expr::input_tag_is("a"),
                OutputSpec::Item {
                    tag: Symbol::new("a"),
                    args: vec![],
                },
                vec![],
            ),
            GuardedFunction::new(
                "second",
                Expr::input_tag_is("b"),
                OutputSpec::Item {
                    tag: Symbol::new("b"),
                    args: vec![],
                },
                vec![],
            ),
        ];
        def.transitions = vec![
            Transition {
                from: Symbol::new("q0"),
                function: Symbol::new("first"),
                to: Symbol::new("q1"),
            },
            Transition {
                from: Symbol::new("q1"),
                function: Symbol::new("second"),
                to: Symbol::new("q1"),
            },
        ];
        def
    }

    #[test]
    fn blocking_reports_index_and_partial_outputs() {
        let def = blocking_machine();
        def.validate().unwrap();
        let err = run_stream(&def, &items(&["a", "b", "c"])).unwrap_err();
        assert_eq!(err.index, 2);
        assert_eq!(err.outputs, items(&["a", "b"]));
        assert!(matches!(err.source, XmError::NoApplicableFunction { .. }));
    }

    #[test]
    fn overlapping_guards_are_a_nondeterminism_error() {
        let mut def = echo_machine();
        def.functions.push(GuardedFunction::new(
            "copy2",
            Expr::truth(true),
            OutputSpec::Echo,
            vec![],
        ));
        def.transitions.push(Transition {
            from: Symbol::new("q0"),
            function: Symbol::new("copy2"),
            to: Symbol::new("q0"),
        });
        def.validate().unwrap();
        let err = xm_step(
            &def,
            &Symbol::new("q0"),
            &Memory::new(),
            &IoItem::plain("a"),
        )
        .unwrap_err();
        match err {
            XmError::Nondeterminism { functions, .. } => assert_eq!(functions.len(), 2),
            other => panic!("expected nondeterminism, got {other}"),
        }
    }

    #[test]
    fn updates_are_simultaneous_against_old_memory() {
        let mut def = echo_machine();
        def.memory_schema = [
            ("x".to_string(), TypeExpr::Int),
            ("y".to_string(), TypeExpr::Int),
        ]
        .into_iter()
        .collect();
        def.initial_memory = [
            ("x".to_string(), Value::Int(1)),
            ("y".to_string(), Value::Int(10)),
        ]
        .into_iter()
        .collect();
        def.functions = vec![GuardedFunction::new(
            "swapish",
            Expr::truth(true),
            OutputSpec::Echo,
            vec![("x", Expr::mem("y")), ("y", Expr::mem("x"))],
        )];
        def.transitions = vec![Transition {
            from: Symbol::new("q0"),
            function: Symbol::new("swapish"),
            to: Symbol::new("q0"),
        }];
        def.validate().unwrap();
        let out = xm_step(
            &def,
            &Symbol::new("q0"),
            &def.initial_memory.clone(),
            &IoItem::plain("a"),
        )
        .unwrap();
        assert_eq!(out.memory["x"], Value::Int(10));
        assert_eq!(out.memory["y"], Value::Int(1));
    }

    #[test]
    fn validation_catches_undeclared_output_tag() {
        let mut def = echo_machine();
        def.functions = vec![GuardedFunction::new(
            "bad",
            Expr::truth(true),
            OutputSpec::Item {
                tag: Symbol::new("ghost"),
                args: vec![],
            },
            vec![],
        )];
        def.transitions = vec![Transition {
            from: Symbol::new("q0"),
            function: Symbol::new("bad"),
            to: Symbol::new("q0"),
        }];
        assert!(matches!(
            def.validate(),
            Err(XmValidationError::OutputTagUndeclared(_, _, _))
        ));
    }
}
