use std::collections::BTreeSet;

use rand::Rng;

use crate::expr::{eval, EvalCtx, IoItem, Memory, Value};
use crate::rng::{engine_rng, EngineRng};
use crate::symbol::Symbol;
use crate::trace::{
    digest_of, AgentRecord, FiredFunction, IdleRecord, ModelKind, MutationRecord, OperasSnapshot,
    Snapshot, Terminal, Trace, TraceHeader, TRACE_VERSION,
};
use crate::xm::{apply_effect, ChannelRef, InputBinding, OutputBinding, XmError};

use super::system::{
    normalize_pair, percept_tag, AgentId, AgentInstance, AgentTypeDef, EnvironmentModel,
    OperasError, OperasSystem, ReconfigAction, ReconfigRule, Selector, DIRECTIONS,
    RESERVED_ACTION_TAGS, TICK,
};

/// The percept filter of the agent's type applied to its grid cell and
/// 4-neighbourhood, encoded as direction-tagged symbols in canonical order
/// (by base symbol name, then N, E, S, W, here; one item per object), with
/// the implicit trailing `tick`. A pure function of (agent, env).
pub fn perceive(
    agent: &AgentInstance,
    tdef: &AgentTypeDef,
    env: &EnvironmentModel,
) -> Result<Vec<IoItem>, OperasError> {
    let pos = agent
        .memory
        .get("pos")
        .ok_or(OperasError::OutOfBounds {
            agent: agent.id,
            x: -1,
            y: -1,
        })?
        .as_pos()
        .map_err(|_| OperasError::OutOfBounds {
            agent: agent.id,
            x: -1,
            y: -1,
        })?;
    let (x, y) = pos;
    if !env.in_bounds(x, y) {
        return Err(OperasError::OutOfBounds { agent: agent.id, x, y });
    }
    let mut out = Vec::new();
    for base in &tdef.percepts {
        for (dir, dx, dy) in DIRECTIONS {
            let (nx, ny) = (x + dx, y + dy);
            if !env.in_bounds(nx, ny) {
                continue;
            }
            let count = env.at(nx, ny).count(base);
            let tag = percept_tag(base, dir);
            for _ in 0..count {
                out.push(IoItem {
                    tag: tag.clone(),
                    args: vec![],
                });
            }
        }
    }
    out.push(IoItem::plain(TICK));
    Ok(out)
}

/// Everything one step did, for traces and property checks.
#[derive(Debug, Clone, Default)]
pub struct StepReport {
    pub fired: Vec<FiredFunction>,
    pub idle: Vec<IdleRecord>,
    pub mutations: Vec<MutationRecord>,
    pub added: Vec<AgentId>,
    pub removed: Vec<AgentId>,
    pub warnings: Vec<String>,
}

struct StagedFire {
    agent: AgentId,
    function: Symbol,
    to_state: Symbol,
    memory: Memory,
    output: IoItem,
    consume_buffer: Option<(AgentId, AgentId)>,
    write_buffer: Option<(AgentId, AgentId)>,
    env_action: bool,
}

enum MutationOp {
    Add {
        creator: AgentId,
        agent_type: Symbol,
        init: Vec<(String, Value)>,
    },
    Remove {
        actor: AgentId,
        target: AgentId,
    },
    AddChannel {
        actor: AgentId,
        pair: (AgentId, AgentId),
    },
    RemoveChannel {
        actor: AgentId,
        pair: (AgentId, AgentId),
    },
}

/// One step: behaviour round, environment actions, then structure mutation.
/// Deterministic given (system, rng state).
pub fn operas_step(
    system: &OperasSystem,
    rng: &mut EngineRng,
) -> Result<(OperasSystem, StepReport), OperasError> {
    let mut report = StepReport::default();

    // --- Behaviour phase: all fires computed against the pre-round state.
    let mut staged: Vec<StagedFire> = Vec::new();
    for (&id, agent) in &system.agents {
        let tdef = system.type_of(agent);
        match stage_behaviour(system, id, agent, tdef)? {
            Ok(fire) => staged.push(fire),
            Err(reason) => report.idle.push(IdleRecord {
                machine: id.0 as usize,
                reason,
            }),
        }
    }

    let mut next = system.clone();
    let mut env_actions: Vec<(AgentId, IoItem)> = Vec::new();
    for fire in staged {
        let agent = next.agents.get_mut(&fire.agent).expect("staged agent is live");
        agent.state = fire.to_state;
        agent.memory = fire.memory;
        if let Some(key) = fire.consume_buffer {
            next.buffers.remove(&key);
        }
        if let Some(key) = fire.write_buffer {
            next.buffers.insert(key, fire.output.clone());
        }
        if fire.env_action {
            env_actions.push((fire.agent, fire.output.clone()));
        }
        report.fired.push(FiredFunction {
            machine: fire.agent.0 as usize,
            function: fire.function,
            output: Some(fire.output),
        });
    }
    for (id, action) in env_actions {
        apply_env_action(&mut next, id, &action, rng)?;
    }

    // --- Mutation phase against the post-behaviour snapshot.
    let snapshot = next.clone();
    let mut ops: Vec<MutationOp> = Vec::new();
    for (&id, agent) in &snapshot.agents {
        let tdef = snapshot.type_of(agent);
        let mut structural_done = false;
        let per_type = tdef.mutation_rules.iter();
        let global = snapshot.reconfig_rules.iter();
        for rule in per_type.chain(global) {
            collect_mutation(
                &snapshot,
                id,
                agent,
                rule,
                &mut structural_done,
                &mut ops,
                &mut report.warnings,
            )?;
        }
    }

    // Apply: adds, deduped removes, channel ops, then pruning.
    let mut removed_set: BTreeSet<AgentId> = BTreeSet::new();
    for op in &ops {
        match op {
            MutationOp::Add {
                creator,
                agent_type,
                init,
            } => {
                let tdef = &next.types[agent_type];
                let id = AgentId(next.next_agent_id);
                next.next_agent_id += 1;
                let mut memory = tdef.behaviour.initial_memory.clone();
                // New agents take the creator's grid position unless the
                // initializer overrides it.
                if let Some(pos) = snapshot.agents[creator].memory.get("pos") {
                    memory.insert("pos".to_string(), pos.clone());
                }
                for (field, value) in init {
                    memory.insert(field.clone(), value.clone());
                }
                next.agents.insert(
                    id,
                    AgentInstance {
                        id,
                        agent_type: agent_type.clone(),
                        state: tdef.behaviour.initial_state.clone(),
                        memory,
                    },
                );
                report.added.push(id);
                report.mutations.push(MutationRecord {
                    agent: creator.0,
                    action: "add-agent".to_string(),
                    target: Some(id.0),
                });
            }
            MutationOp::Remove { actor, target } => {
                if !removed_set.insert(*target) {
                    report.warnings.push(format!(
                        "agent {actor}: remove of agent {target} already performed this step"
                    ));
                    continue;
                }
                next.agents.remove(target);
                report.removed.push(*target);
                report.mutations.push(MutationRecord {
                    agent: actor.0,
                    action: "remove-agent".to_string(),
                    target: Some(target.0),
                });
            }
            MutationOp::AddChannel { actor, pair } => {
                let (a, b) = *pair;
                if !next.agents.contains_key(&a) || !next.agents.contains_key(&b) {
                    report.warnings.push(format!(
                        "agent {actor}: add-channel ({a}, {b}) skipped, endpoint removed"
                    ));
                    continue;
                }
                if next.relation.insert(*pair) {
                    report.mutations.push(MutationRecord {
                        agent: actor.0,
                        action: "add-channel".to_string(),
                        target: Some(if actor.0 == a.0 { b.0 } else { a.0 }),
                    });
                }
            }
            MutationOp::RemoveChannel { actor, pair } => {
                if next.relation.remove(pair) {
                    let (a, b) = *pair;
                    report.mutations.push(MutationRecord {
                        agent: actor.0,
                        action: "remove-channel".to_string(),
                        target: Some(if actor.0 == a.0 { b.0 } else { a.0 }),
                    });
                } else {
                    report
                        .warnings
                        .push(format!("agent {actor}: remove-channel matched no channel"));
                }
            }
        }
    }
    next.relation.retain(|&(a, b)| {
        next.agents.contains_key(&a) && next.agents.contains_key(&b)
    });
    let relation = next.relation.clone();
    next.buffers.retain(|&(from, to), _| {
        relation.contains(&normalize_pair(from, to))
    });

    Ok((next, report))
}

/// Behaviour staging for one agent. Channel-bound candidates read the full
/// inbound buffer of the lowest peer and take precedence over perception: a
/// pending message is one-shot, percepts regenerate every step. With no
/// channel candidate, stream candidates fire on the first percept (in
/// canonical order) accepted by any stream-bound function; agents filter
/// their stimuli rather than blocking on the head. Two or more
/// simultaneously applicable functions within the winning class raise
/// nondeterminism.
fn stage_behaviour(
    system: &OperasSystem,
    id: AgentId,
    agent: &AgentInstance,
    tdef: &AgentTypeDef,
) -> Result<Result<StagedFire, String>, OperasError> {
    let behaviour_err = |source: XmError| OperasError::Behaviour { agent: id, source };
    let transitions: Vec<_> = tdef.behaviour.transitions_from(&agent.state).collect();
    if transitions.is_empty() {
        return Ok(Err("no-transitions".to_string()));
    }
    let peers = system.peers(id);

    struct Candidate {
        function: Symbol,
        to_state: Symbol,
        input: IoItem,
        consume_buffer: Option<(AgentId, AgentId)>,
        write_buffer: Option<(AgentId, AgentId)>,
        output_to_stream: bool,
    }
    let mut candidates: Vec<Candidate> = Vec::new();
    let mut reasons: Vec<(u8, String)> = Vec::new();

    let resolve_output =
        |f_name: &Symbol, binding: &OutputBinding, reasons: &mut Vec<(u8, String)>| {
            match binding {
                OutputBinding::Stream => Some((None, true)),
                OutputBinding::Channel(ChannelRef::Peer) => {
                    let target = peers
                        .iter()
                        .copied()
                        .find(|p| !system.buffers.contains_key(&(id, *p)));
                    match target {
                        Some(p) => Some((Some((id, p)), false)),
                        None => {
                            reasons.push((4, format!("blocked-write(peer) [{f_name}]")));
                            None
                        }
                    }
                }
                OutputBinding::Channel(ChannelRef::Named(_)) => {
                    unreachable!("validated: no named channels for agents")
                }
            }
        };

    // Channel-bound inputs first (independent of the percept stream).
    for t in &transitions {
        let f = tdef.behaviour.function(&t.function).expect("validated");
        let InputBinding::Channel(ChannelRef::Peer) = &f.input_binding else {
            continue;
        };
        let source = peers
            .iter()
            .copied()
            .find(|p| system.buffers.contains_key(&(*p, id)));
        let Some(peer) = source else {
            reasons.push((3, format!("blocked-read(peer) [{}]", f.name)));
            continue;
        };
        let input = system.buffers[&(peer, id)].clone();
        let ctx = EvalCtx::machine(&agent.memory, &input);
        let holds = eval(&f.guard, &ctx)
            .and_then(|v| v.as_bool())
            .map_err(|e| {
                behaviour_err(XmError::Eval {
                    function: f.name.clone(),
                    source: e,
                })
            })?;
        if !holds {
            reasons.push((1, "guards-false".to_string()));
            continue;
        }
        let Some((write_buffer, output_to_stream)) =
            resolve_output(&f.name, &f.output_binding, &mut reasons)
        else {
            continue;
        };
        candidates.push(Candidate {
            function: f.name.clone(),
            to_state: t.to.clone(),
            input: input.clone(),
            consume_buffer: Some((peer, id)),
            write_buffer,
            output_to_stream,
        });
    }

    // Stream-bound inputs are considered only when no channel read fired.
    let percepts = if candidates.is_empty() {
        perceive(agent, tdef, &system.environment)?
    } else {
        Vec::new()
    };
    'percepts: for item in &percepts {
        let mut accepted = Vec::new();
        for t in &transitions {
            let f = tdef.behaviour.function(&t.function).expect("validated");
            if f.input_binding != InputBinding::Stream {
                continue;
            }
            let ctx = EvalCtx::machine(&agent.memory, item);
            let holds = eval(&f.guard, &ctx)
                .and_then(|v| v.as_bool())
                .map_err(|e| {
                    behaviour_err(XmError::Eval {
                        function: f.name.clone(),
                        source: e,
                    })
                })?;
            if holds {
                accepted.push((*t).clone());
            }
        }
        if accepted.is_empty() {
            continue;
        }
        for t in accepted {
            let f = tdef.behaviour.function(&t.function).expect("validated");
            let Some((write_buffer, output_to_stream)) =
                resolve_output(&f.name, &f.output_binding, &mut reasons)
            else {
                continue;
            };
            candidates.push(Candidate {
                function: f.name.clone(),
                to_state: t.to.clone(),
                input: item.clone(),
                consume_buffer: None,
                write_buffer,
                output_to_stream,
            });
        }
        break 'percepts;
    }

    match candidates.len() {
        0 => {
            reasons.sort();
            Ok(Err(reasons
                .pop()
                .map(|(_, r)| r)
                .unwrap_or_else(|| "guards-false".to_string())))
        }
        1 => {
            let c = candidates.pop().unwrap();
            let f = tdef.behaviour.function(&c.function).expect("validated");
            let (output, memory) =
                apply_effect(f, &agent.memory, &c.input).map_err(behaviour_err)?;
            let env_action = c.output_to_stream
                && RESERVED_ACTION_TAGS.iter().any(|t| output.tag.as_str() == *t);
            Ok(Ok(StagedFire {
                agent: id,
                function: c.function,
                to_state: c.to_state,
                memory,
                output,
                consume_buffer: c.consume_buffer,
                write_buffer: c.write_buffer,
                env_action,
            }))
        }
        _ => Err(behaviour_err(XmError::Nondeterminism {
            state: agent.state.clone(),
            input: candidates[0].input.clone(),
            functions: candidates.iter().map(|c| c.function.clone()).collect(),
        })),
    }
}

fn apply_env_action(
    system: &mut OperasSystem,
    id: AgentId,
    action: &IoItem,
    rng: &mut EngineRng,
) -> Result<(), OperasError> {
    let err = |detail: String| OperasError::Action { agent: id, detail };
    let pos = system.agents[&id]
        .memory
        .get("pos")
        .expect("validated pos field")
        .as_pos()
        .map_err(|e| err(e.to_string()))?;
    let (x, y) = pos;
    let sym_arg = |action: &IoItem| -> Result<Symbol, OperasError> {
        match action.args.first() {
            Some(Value::Sym(s)) => Ok(s.clone()),
            other => Err(err(format!(
                "{} expects a symbol argument, got {:?}",
                action.tag, other
            ))),
        }
    };
    match action.tag.as_str() {
        "take" => {
            let sym = sym_arg(action)?;
            if system.environment.at(x, y).count(&sym) >= 1 {
                system
                    .environment
                    .at_mut(x, y)
                    .remove(&sym, 1)
                    .expect("count checked");
                let agent = system.agents.get_mut(&id).unwrap();
                let field = sym.as_str().to_string();
                let old = match agent.memory.get(&field) {
                    Some(Value::Int(n)) => *n,
                    other => {
                        return Err(err(format!(
                            "take({sym}) needs an int memory field '{field}', got {other:?}"
                        )))
                    }
                };
                agent.memory.insert(field, Value::Int(old + 1));
            }
        }
        "drop" => {
            let sym = sym_arg(action)?;
            let field = sym.as_str().to_string();
            let agent = system.agents.get_mut(&id).unwrap();
            let old = match agent.memory.get(&field) {
                Some(Value::Int(n)) => *n,
                other => {
                    return Err(err(format!(
                        "drop({sym}) needs an int memory field '{field}', got {other:?}"
                    )))
                }
            };
            if old >= 1 {
                agent.memory.insert(field, Value::Int(old - 1));
                system
                    .environment
                    .at_mut(x, y)
                    .insert(sym, 1)
                    .map_err(|e| err(e.to_string()))?;
            }
        }
        "deposit" => {
            let sym = sym_arg(action)?;
            system
                .environment
                .at_mut(x, y)
                .insert(sym, 1)
                .map_err(|e| err(e.to_string()))?;
        }
        "move" => {
            let (dx, dy) = match (action.args.first(), action.args.get(1)) {
                (Some(Value::Int(dx)), Some(Value::Int(dy))) => (*dx, *dy),
                _ => return Err(err("move expects two int arguments".to_string())),
            };
            if dx.abs() + dy.abs() > 1 {
                return Err(err(format!("move({dx}, {dy}) is not a 4-neighbourhood step")));
            }
            let (nx, ny) = (x + dx, y + dy);
            if system.environment.in_bounds(nx, ny) {
                let agent = system.agents.get_mut(&id).unwrap();
                agent.memory.insert("pos".to_string(), Value::pair(nx, ny));
            }
        }
        "walk" => {
            if let Some(arg) = action.args.first() {
                match arg {
                    Value::Sym(s) => system
                        .environment
                        .at_mut(x, y)
                        .insert(s.clone(), 1)
                        .map_err(|e| err(e.to_string()))?,
                    other => {
                        return Err(err(format!("walk expects a symbol argument, got {other}")))
                    }
                }
            }
            let open: Vec<(i64, i64)> = DIRECTIONS[..4]
                .iter()
                .map(|(_, dx, dy)| (x + dx, y + dy))
                .filter(|&(nx, ny)| system.environment.in_bounds(nx, ny))
                .collect();
            if !open.is_empty() {
                let (nx, ny) = open[rng.gen_range(0..open.len())];
                let agent = system.agents.get_mut(&id).unwrap();
                agent.memory.insert("pos".to_string(), Value::pair(nx, ny));
            }
        }
        _ => unreachable!("filtered by RESERVED_ACTION_TAGS"),
    }
    Ok(())
}

fn collect_mutation(
    snapshot: &OperasSystem,
    id: AgentId,
    agent: &AgentInstance,
    rule: &ReconfigRule,
    structural_done: &mut bool,
    ops: &mut Vec<MutationOp>,
    warnings: &mut Vec<String>,
) -> Result<(), OperasError> {
    let pos = agent
        .memory
        .get("pos")
        .expect("validated pos field")
        .as_pos()
        .map_err(|source| OperasError::Condition { agent: id, source })?;
    let local = snapshot.environment.at(pos.0, pos.1);
    let ctx = EvalCtx {
        memory: &agent.memory,
        input: None,
        neighbour_count: Some(snapshot.neighbour_count(id)),
        env_local: Some(local),
    };
    let holds = eval(&rule.condition, &ctx)
        .and_then(|v| v.as_bool())
        .map_err(|source| OperasError::Condition { agent: id, source })?;
    if !holds {
        return Ok(());
    }
    let resolve = |sel: &Selector| -> Result<Option<AgentId>, OperasError> {
        resolve_selector(snapshot, id, agent, sel)
    };
    match &rule.action {
        ReconfigAction::AddAgent { agent_type, init } => {
            if *structural_done {
                warnings.push(format!(
                    "agent {id}: structural conflict, add of '{agent_type}' skipped"
                ));
                return Ok(());
            }
            *structural_done = true;
            let mut values = Vec::with_capacity(init.len());
            for (field, e) in init {
                let v = eval(e, &ctx)
                    .map_err(|source| OperasError::Condition { agent: id, source })?;
                values.push((field.clone(), v));
            }
            ops.push(MutationOp::Add {
                creator: id,
                agent_type: agent_type.clone(),
                init: values,
            });
        }
        ReconfigAction::RemoveAgent(sel) => {
            if *structural_done {
                warnings.push(format!("agent {id}: structural conflict, remove skipped"));
                return Ok(());
            }
            match resolve(sel)? {
                Some(target) => {
                    *structural_done = true;
                    ops.push(MutationOp::Remove { actor: id, target });
                }
                None => warnings.push(format!("agent {id}: remove selector matched nothing")),
            }
        }
        ReconfigAction::AddChannel(sel) => match resolve(sel)? {
            Some(peer) => ops.push(MutationOp::AddChannel {
                actor: id,
                pair: normalize_pair(id, peer),
            }),
            None => warnings.push(format!("agent {id}: add-channel selector matched nothing")),
        },
        ReconfigAction::RemoveChannel(sel) => match resolve(sel)? {
            Some(peer) => ops.push(MutationOp::RemoveChannel {
                actor: id,
                pair: normalize_pair(id, peer),
            }),
            None => {
                warnings.push(format!("agent {id}: remove-channel selector matched nothing"))
            }
        },
    }
    Ok(())
}

fn resolve_selector(
    snapshot: &OperasSystem,
    id: AgentId,
    agent: &AgentInstance,
    sel: &Selector,
) -> Result<Option<AgentId>, OperasError> {
    match sel {
        Selector::This => Ok(Some(id)),
        Selector::Nearest => {
            let here = agent
                .memory
                .get("pos")
                .expect("validated pos field")
                .as_pos()
                .map_err(|source| OperasError::Condition { agent: id, source })?;
            let mut best: Option<(i64, AgentId)> = None;
            for (&other_id, other) in &snapshot.agents {
                if other_id == id {
                    continue;
                }
                let there = other
                    .memory
                    .get("pos")
                    .expect("validated pos field")
                    .as_pos()
                    .map_err(|source| OperasError::Condition { agent: id, source })?;
                let d = (here.0 - there.0).abs() + (here.1 - there.1).abs();
                // Ties break to the lowest id: iteration is ascending, so a
                // strictly smaller distance is required to displace.
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, other_id));
                }
            }
            Ok(best.map(|(_, id)| id))
        }
        Selector::UniqueOfType(t) => {
            let matches: Vec<AgentId> = snapshot
                .agents
                .iter()
                .filter(|(&other_id, other)| other_id != id && &other.agent_type == t)
                .map(|(&other_id, _)| other_id)
                .collect();
            match matches.len() {
                0 => Ok(None),
                1 => Ok(Some(matches[0])),
                _ => Err(OperasError::SelectorAmbiguous {
                    agent: id,
                    selector: format!("unique {t}"),
                    matches: matches.iter().map(|a| a.0).collect(),
                }),
            }
        }
    }
}

/// Validated runner producing full traces.
pub struct OperasRunner {
    initial: OperasSystem,
    digest: String,
}

impl OperasRunner {
    pub fn new(system: OperasSystem) -> Result<OperasRunner, OperasError> {
        system.validate()?;
        let digest = digest_of(&system);
        Ok(OperasRunner {
            initial: system,
            digest,
        })
    }

    pub fn initial(&self) -> &OperasSystem {
        &self.initial
    }

    pub fn run(&self, steps: u64, seed: u64) -> Result<Trace, OperasError> {
        let (trace, _) = self.run_with_reports(steps, seed)?;
        Ok(trace)
    }

    /// Like [`OperasRunner::run`] but also yields the per-step reports, which
    /// the property suites use for population accounting.
    pub fn run_with_reports(
        &self,
        steps: u64,
        seed: u64,
    ) -> Result<(Trace, Vec<StepReport>), OperasError> {
        let mut rng = engine_rng(seed);
        let mut system = self.initial.clone();
        let mut snapshots = vec![snapshot(&system, 0, &StepReport::default())];
        let mut reports = Vec::new();
        let mut terminal = Terminal::Completed { steps };
        for step in 1..=steps {
            let (next, report) = operas_step(&system, &mut rng)?;
            if report.fired.is_empty() && report.mutations.is_empty() {
                terminal = Terminal::Halted { step };
                break;
            }
            system = next;
            snapshots.push(snapshot(&system, step, &report));
            reports.push(report);
        }
        Ok((
            Trace {
                header: TraceHeader {
                    v: TRACE_VERSION,
                    kind: ModelKind::Operas,
                    model: self.digest.clone(),
                    mode: None,
                    seed: Some(seed),
                    steps,
                    bonds: None,
                    death_releases_objects: None,
                },
                snapshots,
                terminal,
            },
            reports,
        ))
    }
}

fn snapshot(system: &OperasSystem, step: u64, report: &StepReport) -> Snapshot {
    Snapshot::Operas(OperasSnapshot {
        step,
        agents: system
            .agents
            .values()
            .map(|a| AgentRecord {
                id: a.id.0,
                agent_type: a.agent_type.clone(),
                state: a.state.clone(),
                memory: a.memory.clone(),
            })
            .collect(),
        relation: system.relation.iter().map(|&(a, b)| (a.0, b.0)).collect(),
        env: system.environment.totals(),
        fired: report.fired.clone(),
        idle: report.idle.clone(),
        mutations: report.mutations.clone(),
        warnings: report.warnings.clone(),
    })
}
