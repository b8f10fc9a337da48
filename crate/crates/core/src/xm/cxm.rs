use serde::Serialize;
use thiserror::Error;

use crate::expr::{conforms, eval, EvalCtx, IoItem, Memory};
use crate::rng::{engine_rng, EngineRng};
use crate::symbol::Symbol;
use crate::trace::{
    digest_of, ChannelRecord, CxmSnapshot, FiredFunction, IdleRecord, MachineRecord, ModelKind,
    Snapshot, Terminal, Trace, TraceHeader, TRACE_VERSION,
};

use super::machine::{
    apply_effect, ChannelRef, InputBinding, OutputBinding, XMachineDef, XmError, XmValidationError,
};

/// A machine instance inside a communicating system: the shared definition
/// plus this instance's control state, memory, and input stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CxmMachine {
    pub name: Symbol,
    pub def: XMachineDef,
    pub state: Symbol,
    pub memory: Memory,
    pub stream: Vec<IoItem>,
    /// Index of the next unconsumed stream item.
    pub cursor: usize,
}

impl CxmMachine {
    pub fn fresh(name: &str, def: XMachineDef, stream: Vec<IoItem>) -> CxmMachine {
        CxmMachine {
            name: Symbol::new(name),
            state: def.initial_state.clone(),
            memory: def.initial_memory.clone(),
            def,
            stream,
            cursor: 0,
        }
    }
}

/// A directed single-slot channel. The buffer holds at most one pending
/// message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Channel {
    pub name: Symbol,
    pub sender: usize,
    pub receiver: usize,
    pub buffer: Option<IoItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CxmSystem {
    pub machines: Vec<CxmMachine>,
    pub channels: Vec<Channel>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CxmError {
    #[error("machine {index} ('{name}'): {source}")]
    Machine {
        index: usize,
        name: Symbol,
        source: XmError,
    },
    #[error("machine '{0}': {1}")]
    Definition(Symbol, XmValidationError),
    #[error("duplicate machine name '{0}'")]
    DuplicateMachine(Symbol),
    #[error("duplicate channel name '{0}'")]
    DuplicateChannel(Symbol),
    #[error("channel '{0}' endpoint {1} does not reference a machine")]
    BadEndpoint(Symbol, usize),
    #[error("channel '{0}' connects a machine to itself")]
    SelfChannel(Symbol),
    #[error("machine '{0}', function '{1}': unknown channel '{2}'")]
    UnknownChannel(Symbol, Symbol, Symbol),
    #[error("machine '{0}': peer channel bindings are only available to agents of an organism system")]
    PeerBinding(Symbol),
    #[error("machine '{machine}': initial state '{state}' is not declared by its definition")]
    BadInstanceState { machine: Symbol, state: Symbol },
    #[error("machine '{machine}': memory field '{field}' does not conform to the schema")]
    BadInstanceMemory { machine: Symbol, field: String },
    #[error("machine '{machine}': stream item {index} has tag '{tag}' outside the input alphabet")]
    BadStreamItem {
        machine: Symbol,
        index: usize,
        tag: Symbol,
    },
}

/// What one synchronous round did.
#[derive(Debug, Clone, Default)]
pub struct RoundReport {
    pub fired: Vec<FiredFunction>,
    pub idle: Vec<IdleRecord>,
}

struct StagedFire {
    machine: usize,
    function: Symbol,
    to_state: Symbol,
    memory: Memory,
    output: IoItem,
    consume: Consume,
    emit: Emit,
}

enum Consume {
    Stream,
    Channel(usize),
}

enum Emit {
    Stream,
    Channel(usize),
}

impl CxmSystem {
    fn channel_index(&self, name: &Symbol) -> Option<usize> {
        self.channels.iter().position(|c| &c.name == name)
    }

    pub fn validate(&self) -> Result<(), CxmError> {
        let mut names = std::collections::BTreeSet::new();
        for m in &self.machines {
            if !names.insert(m.name.clone()) {
                return Err(CxmError::DuplicateMachine(m.name.clone()));
            }
            m.def
                .validate()
                .map_err(|e| CxmError::Definition(m.name.clone(), e))?;
            if !m.def.states.contains(&m.state) {
                return Err(CxmError::BadInstanceState {
                    machine: m.name.clone(),
                    state: m.state.clone(),
                });
            }
            for (field, value) in &m.memory {
                match m.def.memory_schema.get(field) {
                    Some(ty) if conforms(value, ty) => {}
                    _ => {
                        return Err(CxmError::BadInstanceMemory {
                            machine: m.name.clone(),
                            field: field.clone(),
                        })
                    }
                }
            }
            for (field, _) in &m.def.memory_schema {
                if !m.memory.contains_key(field) {
                    return Err(CxmError::BadInstanceMemory {
                        machine: m.name.clone(),
                        field: field.clone(),
                    });
                }
            }
            for (index, item) in m.stream.iter().enumerate() {
                if !m.def.input_alphabet.contains(&item.tag) {
                    return Err(CxmError::BadStreamItem {
                        machine: m.name.clone(),
                        index,
                        tag: item.tag.clone(),
                    });
                }
            }
            for f in &m.def.functions {
                let named = |binding: &ChannelRef| match binding {
                    ChannelRef::Named(c) => {
                        if self.channel_index(c).is_none() {
                            Err(CxmError::UnknownChannel(
                                m.name.clone(),
                                f.name.clone(),
                                c.clone(),
                            ))
                        } else {
                            Ok(())
                        }
                    }
                    ChannelRef::Peer => Err(CxmError::PeerBinding(m.name.clone())),
                };
                if let InputBinding::Channel(c) = &f.input_binding {
                    named(c)?;
                }
                if let OutputBinding::Channel(c) = &f.output_binding {
                    named(c)?;
                }
            }
        }
        let mut channel_names = std::collections::BTreeSet::new();
        for c in &self.channels {
            if !channel_names.insert(c.name.clone()) {
                return Err(CxmError::DuplicateChannel(c.name.clone()));
            }
            for endpoint in [c.sender, c.receiver] {
                if endpoint >= self.machines.len() {
                    return Err(CxmError::BadEndpoint(c.name.clone(), endpoint));
                }
            }
            if c.sender == c.receiver {
                return Err(CxmError::SelfChannel(c.name.clone()));
            }
        }
        Ok(())
    }

    /// One synchronous round. All fires are computed against the pre-round
    /// state and committed atomically: a channel read requires a buffer full
    /// at round start, a write one empty at round start, so there is no
    /// same-round relay. The rng parameter is part of the step contract but
    /// currently unused: with single-slot channels and per-machine
    /// determinism enforcement there are no choice points.
    pub fn round(&self, _rng: &mut EngineRng) -> Result<(CxmSystem, RoundReport), CxmError> {
        let mut staged: Vec<StagedFire> = Vec::new();
        let mut report = RoundReport::default();

        for (i, m) in self.machines.iter().enumerate() {
            let machine_err = |source: XmError| CxmError::Machine {
                index: i,
                name: m.name.clone(),
                source,
            };
            let transitions: Vec<_> = m.def.transitions_from(&m.state).collect();
            if transitions.is_empty() {
                report.idle.push(IdleRecord {
                    machine: i,
                    reason: "no-transitions".to_string(),
                });
                continue;
            }
            // (priority, reason); higher priority wins when reporting why a
            // machine idled.
            let mut reasons: Vec<(u8, String)> = Vec::new();
            let mut candidates: Vec<(StagedFire, IoItem)> = Vec::new();
            for t in transitions {
                let f = m.def.function(&t.function).expect("validated transition");
                let (input, consume) = match &f.input_binding {
                    InputBinding::Stream => match m.stream.get(m.cursor) {
                        Some(item) => (item.clone(), Consume::Stream),
                        None => {
                            reasons.push((2, "stream-empty".to_string()));
                            continue;
                        }
                    },
                    InputBinding::Channel(ChannelRef::Named(cname)) => {
                        let ci = self.channel_index(cname).expect("validated channel");
                        let chan = &self.channels[ci];
                        if chan.receiver != i {
                            continue;
                        }
                        match &chan.buffer {
                            Some(item) => (item.clone(), Consume::Channel(ci)),
                            None => {
                                reasons.push((3, format!("blocked-read({cname})")));
                                continue;
                            }
                        }
                    }
                    InputBinding::Channel(ChannelRef::Peer) => {
                        return Err(CxmError::PeerBinding(m.name.clone()))
                    }
                };
                let ctx = EvalCtx::machine(&m.memory, &input);
                let holds = eval(&f.guard, &ctx)
                    .and_then(|v| v.as_bool())
                    .map_err(|e| {
                        machine_err(XmError::Eval {
                            function: f.name.clone(),
                            source: e,
                        })
                    })?;
                if !holds {
                    reasons.push((1, "guards-false".to_string()));
                    continue;
                }
                let emit = match &f.output_binding {
                    OutputBinding::Stream => Emit::Stream,
                    OutputBinding::Channel(ChannelRef::Named(cname)) => {
                        let ci = self.channel_index(cname).expect("validated channel");
                        let chan = &self.channels[ci];
                        if chan.sender != i {
                            continue;
                        }
                        if chan.buffer.is_some() {
                            reasons.push((4, format!("blocked-write({cname})")));
                            continue;
                        }
                        Emit::Channel(ci)
                    }
                    OutputBinding::Channel(ChannelRef::Peer) => {
                        return Err(CxmError::PeerBinding(m.name.clone()))
                    }
                };
                let (output, memory) = apply_effect(f, &m.memory, &input).map_err(machine_err)?;
                candidates.push((
                    StagedFire {
                        machine: i,
                        function: f.name.clone(),
                        to_state: t.to.clone(),
                        memory,
                        output,
                        consume,
                        emit,
                    },
                    input,
                ));
            }
            match candidates.len() {
                0 => {
                    reasons.sort();
                    let reason = reasons
                        .pop()
                        .map(|(_, r)| r)
                        .unwrap_or_else(|| "no-candidate".to_string());
                    report.idle.push(IdleRecord { machine: i, reason });
                }
                1 => {
                    let (fire, _) = candidates.pop().unwrap();
                    staged.push(fire);
                }
                _ => {
                    let functions = candidates.iter().map(|(c, _)| c.function.clone()).collect();
                    let input = candidates[0].1.clone();
                    return Err(machine_err(XmError::Nondeterminism {
                        state: m.state.clone(),
                        input,
                        functions,
                    }));
                }
            }
        }

        let mut next = self.clone();
        for fire in staged {
            let m = &mut next.machines[fire.machine];
            m.state = fire.to_state;
            m.memory = fire.memory;
            match fire.consume {
                Consume::Stream => m.cursor += 1,
                Consume::Channel(ci) => next.channels[ci].buffer = None,
            }
            match fire.emit {
                Emit::Stream => {}
                Emit::Channel(ci) => next.channels[ci].buffer = Some(fire.output.clone()),
            }
            report.fired.push(FiredFunction {
                machine: fire.machine,
                function: fire.function,
                output: Some(fire.output),
            });
        }
        Ok((next, report))
    }

    pub fn snapshot(&self, step: u64, report: &RoundReport) -> Snapshot {
        Snapshot::Cxm(CxmSnapshot {
            step,
            machines: self
                .machines
                .iter()
                .enumerate()
                .map(|(id, m)| MachineRecord {
                    id,
                    name: m.name.clone(),
                    state: m.state.clone(),
                    memory: m.memory.clone(),
                })
                .collect(),
            channels: self
                .channels
                .iter()
                .map(|c| ChannelRecord {
                    name: c.name.clone(),
                    from: c.sender,
                    to: c.receiver,
                    buffer: c.buffer.clone(),
                })
                .collect(),
            fired: report.fired.clone(),
            idle: report.idle.clone(),
        })
    }
}

/// One synchronous round of a communicating system.
pub fn cxm_step(
    system: &CxmSystem,
    rng: &mut EngineRng,
) -> Result<(CxmSystem, RoundReport), CxmError> {
    system.round(rng)
}

/// Validated runner producing full traces.
pub struct CxmRunner {
    initial: CxmSystem,
    digest: String,
}

impl CxmRunner {
    pub fn new(system: CxmSystem) -> Result<CxmRunner, CxmError> {
        system.validate()?;
        let digest = digest_of(&system);
        Ok(CxmRunner {
            initial: system,
            digest,
        })
    }

    pub fn initial(&self) -> &CxmSystem {
        &self.initial
    }

    /// Runs until `rounds` rounds complete or a round fires nothing (halt).
    pub fn run(&self, rounds: u64, seed: u64) -> Result<Trace, CxmError> {
        let mut rng = engine_rng(seed);
        let mut system = self.initial.clone();
        let mut snapshots = vec![system.snapshot(0, &RoundReport::default())];
        let mut terminal = Terminal::Completed { steps: rounds };
        for step in 1..=rounds {
            let (next, report) = system.round(&mut rng)?;
            if report.fired.is_empty() {
                terminal = Terminal::Halted { step };
                break;
            }
            system = next;
            snapshots.push(system.snapshot(step, &report));
        }
        Ok(Trace {
            header: TraceHeader {
                v: TRACE_VERSION,
                kind: ModelKind::Cxm,
                model: self.digest.clone(),
                mode: None,
                seed: Some(seed),
                steps: rounds,
                bonds: None,
                death_releases_objects: None,
            },
            snapshots,
            terminal,
        })
    }
}
