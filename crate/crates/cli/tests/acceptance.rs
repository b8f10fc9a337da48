//! Acceptance suite: one test per criterion, each printing a PASS line on
//! success (run with `--nocapture` to see them). Tolerances are exact unless
//! stated otherwise in the assertion.
//!
//! The brute-force checks in [`oracle`] re-derive rule applicability from
//! the model structures alone and never call the engine's enumeration, so
//! they are an independent second route.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use operas_core::expr::Value;
use operas_core::models::{
    build_food_exchange, build_tumour, cell_age, TumourParams, MTRANS, STEM, TRANS,
};
use operas_core::multiset::Multiset;
use operas_core::operas::OperasRunner;
use operas_core::pps::{
    BondMode, CellId, CellType, Configuration, Engine, EngineOptions, PpsModel, PpsRule,
    RuleInstance, StepMode, StepSelection,
};
use operas_core::rng::{engine_rng, EngineRng};
use operas_core::symbol::Symbol;
use operas_core::trace::Snapshot;
use operas_core::xm::CxmRunner;

fn sym(name: &str) -> Symbol {
    Symbol::new(name)
}

fn workspace_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_operas"))
}

// ---------------------------------------------------------------------
// Criterion 1: tumour doubling
// ---------------------------------------------------------------------

#[test]
fn criterion_01_tumour_doubling() {
    let params = TumourParams {
        maturity_age: 12,
        meta_death_age: 13,
        transitory_death_age: 14,
        grid: 10,
    };
    let model = build_tumour(params).unwrap();
    let engine = Engine::with_defaults(model).unwrap();
    for seed in [1u64, 42, 1337] {
        let started = Instant::now();
        let trace = engine.run(10, StepMode::MaximalParallel, seed).unwrap();
        let elapsed = started.elapsed();
        assert!(
            elapsed < Duration::from_secs(5),
            "run took {elapsed:?}, budget is 5 s"
        );
        assert_eq!(trace.snapshots.len(), 11);
        for (t, snap) in trace.snapshots.iter().enumerate() {
            let Snapshot::Pps(p) = snap else { unreachable!() };
            assert_eq!(
                p.cells.len(),
                1usize << t,
                "seed {seed}: population at step {t} must be 2^{t}"
            );
        }
    }
    println!("PASS criterion 1: tumour doubling - 2^t for t=0..=10, 3 seeds, <5 s each");
}

// ---------------------------------------------------------------------
// Criterion 2: stem persistence and mortality bounds
// ---------------------------------------------------------------------

#[test]
fn criterion_02_stem_persistence_and_mortality() {
    let params = TumourParams::default();
    let model = build_tumour(params).unwrap();
    let engine = Engine::with_defaults(model).unwrap();
    for seed in 0..20u64 {
        let trace = engine.run(30, StepMode::MaximalParallel, seed).unwrap();
        for snap in &trace.snapshots {
            let Snapshot::Pps(p) = snap else { unreachable!() };
            assert!(
                p.cells.iter().any(|c| c.cell_type.as_str() == STEM),
                "seed {seed}, step {}: no stem cell",
                p.step
            );
            for cell in &p.cells {
                let age = cell_age(&cell.contents);
                match cell.cell_type.as_str() {
                    TRANS => assert!(
                        age.unwrap() <= params.transitory_death_age,
                        "seed {seed}, step {}: transitory cell older than {}",
                        p.step,
                        params.transitory_death_age
                    ),
                    MTRANS => assert!(
                        age.unwrap() <= params.meta_death_age,
                        "seed {seed}, step {}: metatransitory cell older than {}",
                        p.step,
                        params.meta_death_age
                    ),
                    _ => {}
                }
            }
        }
    }
    println!(
        "PASS criterion 2: stem persistence + mortality bounds - 20 seeds x 30 steps, exact"
    );
}

// ---------------------------------------------------------------------
// Criterion 3: maximality oracle
// ---------------------------------------------------------------------

/// Independent brute-force semantics for small instances.
mod oracle {
    use super::*;

    /// Every grounded instance applicable in isolation, derived directly
    /// from the rule forms.
    pub fn grounded(model: &PpsModel, config: &Configuration) -> Vec<RuleInstance> {
        let mut out = Vec::new();
        for (&cell_id, cell) in &config.cells {
            for (rule_idx, rule) in model.rules.iter().enumerate() {
                match rule {
                    PpsRule::Transform {
                        consumed,
                        cell_type,
                        ..
                    }
                    | PpsRule::Divide {
                        consumed,
                        cell_type,
                        ..
                    }
                    | PpsRule::Die {
                        consumed,
                        cell_type,
                    } => {
                        if &cell.cell_type == cell_type && cell.contents.count(consumed) > 0 {
                            out.push(RuleInstance {
                                cell: cell_id,
                                rule: rule_idx,
                                source: None,
                            });
                        }
                    }
                    PpsRule::Differentiate {
                        consumed,
                        from_type,
                        ..
                    } => {
                        if &cell.cell_type == from_type && cell.contents.count(consumed) > 0 {
                            out.push(RuleInstance {
                                cell: cell_id,
                                rule: rule_idx,
                                source: None,
                            });
                        }
                    }
                    PpsRule::CommExit { moved, cell_type } => {
                        if &cell.cell_type == cell_type && cell.contents.count(moved) > 0 {
                            out.push(RuleInstance {
                                cell: cell_id,
                                rule: rule_idx,
                                source: None,
                            });
                        }
                    }
                    PpsRule::CommEnter {
                        trigger,
                        moved,
                        cell_type,
                    } => {
                        let trigger_ok =
                            trigger.as_ref().map_or(true, |t| cell.contents.count(t) > 0);
                        if &cell.cell_type == cell_type
                            && trigger_ok
                            && config.environment.count(moved) > 0
                        {
                            out.push(RuleInstance {
                                cell: cell_id,
                                rule: rule_idx,
                                source: None,
                            });
                        }
                    }
                    PpsRule::CommIn {
                        trigger,
                        moved,
                        cell_type,
                    } => {
                        let trigger_ok =
                            trigger.as_ref().map_or(true, |t| cell.contents.count(t) > 0);
                        if &cell.cell_type != cell_type || !trigger_ok {
                            continue;
                        }
                        for &(a, b) in &config.bonds {
                            let neighbour = if a == cell_id {
                                Some(b)
                            } else if b == cell_id {
                                Some(a)
                            } else {
                                None
                            };
                            if let Some(n) = neighbour {
                                if config.cells[&n].contents.count(moved) > 0 {
                                    out.push(RuleInstance {
                                        cell: cell_id,
                                        rule: rule_idx,
                                        source: Some(n),
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    struct Pools {
        cells: BTreeMap<CellId, Multiset>,
        env: Multiset,
    }

    fn charge(model: &PpsModel, pools: &mut Pools, inst: &RuleInstance) -> Result<(), String> {
        let take = |ms: &mut Multiset, s: &Symbol| {
            ms.remove(s, 1).map_err(|e| format!("availability violated: {e}"))
        };
        match &model.rules[inst.rule] {
            PpsRule::Transform { consumed, .. }
            | PpsRule::Differentiate { consumed, .. }
            | PpsRule::Divide { consumed, .. }
            | PpsRule::Die { consumed, .. } => {
                take(pools.cells.get_mut(&inst.cell).ok_or("no such cell")?, consumed)
            }
            PpsRule::CommExit { moved, .. } => {
                take(pools.cells.get_mut(&inst.cell).ok_or("no such cell")?, moved)
            }
            PpsRule::CommEnter { moved, .. } => take(&mut pools.env, moved),
            PpsRule::CommIn { moved, .. } => {
                let src = inst.source.ok_or("in-instance without source")?;
                take(pools.cells.get_mut(&src).ok_or("no such source")?, moved)
            }
        }
    }

    /// Validity: membership in the grounded set, simultaneous availability
    /// of everything consumed, structural exclusivity. Returns the residual
    /// pools.
    fn check_valid(
        model: &PpsModel,
        config: &Configuration,
        selection: &StepSelection,
    ) -> Result<(Pools, BTreeSet<CellId>, BTreeSet<CellId>), String> {
        let grounded: BTreeSet<RuleInstance> = grounded(model, config).into_iter().collect();
        let mut pools = Pools {
            cells: config
                .cells
                .iter()
                .map(|(id, c)| (*id, c.contents.clone()))
                .collect(),
            env: config.environment.clone(),
        };
        let mut structural: BTreeSet<CellId> = BTreeSet::new();
        let mut nonstructural: BTreeSet<CellId> = BTreeSet::new();
        for inst in &selection.instances {
            if !grounded.contains(inst) {
                return Err(format!("{inst:?} is not applicable in isolation"));
            }
            if model.rules[inst.rule].is_structural() {
                if structural.contains(&inst.cell) || nonstructural.contains(&inst.cell) {
                    return Err(format!("structural exclusivity violated at {:?}", inst.cell));
                }
                structural.insert(inst.cell);
            } else {
                if structural.contains(&inst.cell) {
                    return Err(format!("structural exclusivity violated at {:?}", inst.cell));
                }
                nonstructural.insert(inst.cell);
            }
            charge(model, &mut pools, inst)?;
        }
        Ok((pools, structural, nonstructural))
    }

    /// Maximality: no grounded instance can be added to the selection
    /// without violating availability or exclusivity.
    pub fn check_valid_and_maximal(
        model: &PpsModel,
        config: &Configuration,
        selection: &StepSelection,
    ) -> Result<(), String> {
        let (pools, structural, nonstructural) = check_valid(model, config, selection)?;
        for inst in grounded(model, config) {
            if structural.contains(&inst.cell) {
                continue;
            }
            if model.rules[inst.rule].is_structural() && nonstructural.contains(&inst.cell) {
                continue;
            }
            let mut probe = Pools {
                cells: pools.cells.clone(),
                env: pools.env.clone(),
            };
            if charge(model, &mut probe, &inst).is_ok() {
                return Err(format!("selection is not maximal: {inst:?} is still addable"));
            }
        }
        Ok(())
    }
}

fn random_symbol(rng: &mut EngineRng, pool: &[&str]) -> Symbol {
    sym(pool[rng.gen_range(0..pool.len())])
}

fn random_type(rng: &mut EngineRng) -> CellType {
    CellType::new(if rng.gen_bool(0.5) { "t" } else { "u" })
}

/// A random instance within the small-instance envelope: <= 3 cells,
/// <= 4 rules, <= 6 objects in total.
fn random_small_pps(rng: &mut EngineRng) -> PpsModel {
    let pool = ["a", "b", "c"];
    let alphabet: BTreeSet<Symbol> = pool.iter().map(|s| sym(s)).collect();
    let cell_types: BTreeSet<CellType> = [CellType::new("t"), CellType::new("u")]
        .into_iter()
        .collect();
    let n_cells = rng.gen_range(1..=3usize);
    let mut cells: Vec<(Multiset, CellType)> = (0..n_cells)
        .map(|_| (Multiset::new(), random_type(rng)))
        .collect();
    let mut env = Multiset::new();
    for _ in 0..rng.gen_range(0..=6u32) {
        let s = random_symbol(rng, &pool);
        if rng.gen_bool(0.2) {
            env.insert(s, 1).unwrap();
        } else {
            let i = rng.gen_range(0..n_cells);
            cells[i].0.insert(s, 1).unwrap();
        }
    }
    let mut initial_graph = BTreeSet::new();
    for i in 0..n_cells {
        for j in (i + 1)..n_cells {
            if rng.gen_bool(0.6) {
                initial_graph.insert((i, j));
            }
        }
    }
    let n_rules = rng.gen_range(1..=4usize);
    let rules = (0..n_rules).map(|_| random_rule(rng, &pool)).collect();
    PpsModel {
        alphabet,
        cell_types,
        bond_rules: vec![],
        initial_graph,
        env_init: env,
        initial_cells: cells,
        rules,
    }
}

fn random_rule(rng: &mut EngineRng, pool: &[&str]) -> PpsRule {
    let t = random_type(rng);
    match rng.gen_range(0..7u32) {
        0 => PpsRule::Transform {
            consumed: random_symbol(rng, pool),
            produced: {
                let mut ms = Multiset::new();
                for _ in 0..rng.gen_range(1..=2u32) {
                    ms.insert(random_symbol(rng, pool), 1).unwrap();
                }
                ms
            },
            cell_type: t,
        },
        1 => PpsRule::CommIn {
            trigger: rng.gen_bool(0.5).then(|| random_symbol(rng, pool)),
            moved: random_symbol(rng, pool),
            cell_type: t,
        },
        2 => PpsRule::CommEnter {
            trigger: rng.gen_bool(0.5).then(|| random_symbol(rng, pool)),
            moved: random_symbol(rng, pool),
            cell_type: t,
        },
        3 => PpsRule::CommExit {
            moved: random_symbol(rng, pool),
            cell_type: t,
        },
        4 => PpsRule::Differentiate {
            consumed: random_symbol(rng, pool),
            produced: random_symbol(rng, pool),
            from_type: t,
            to_type: random_type(rng),
        },
        5 => PpsRule::Divide {
            consumed: random_symbol(rng, pool),
            left_product: random_symbol(rng, pool),
            right_product: random_symbol(rng, pool),
            cell_type: t,
        },
        _ => PpsRule::Die {
            consumed: random_symbol(rng, pool),
            cell_type: t,
        },
    }
}

#[test]
fn criterion_03_maximality_oracle() {
    let started = Instant::now();
    let mut rng = engine_rng(0xC3);
    for case in 0..1000u32 {
        let model = random_small_pps(&mut rng);
        let options = EngineOptions {
            bonds: BondMode::Static,
            death_releases_objects: false,
        };
        let engine = Engine::new(model.clone(), options).unwrap();
        let config = engine.initial_configuration();
        let seed = rng.gen::<u64>();
        let mut step_rng = engine_rng(seed);
        let selection = engine.select_step(&config, StepMode::MaximalParallel, &mut step_rng);
        oracle::check_valid_and_maximal(&model, &config, &selection)
            .unwrap_or_else(|e| panic!("case {case} (seed {seed}): {e}\nmodel: {model:?}"));
        // The selection must also apply cleanly.
        engine
            .apply_step(&config, &selection)
            .unwrap_or_else(|e| panic!("case {case}: apply failed: {e}"));
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "suite took {elapsed:?}");
    println!(
        "PASS criterion 3: maximality oracle - 1000 random instances, 0 failures, {}s",
        elapsed.as_secs_f32()
    );
}

// ---------------------------------------------------------------------
// Criterion 4: conservation under communication-only rules
// ---------------------------------------------------------------------

fn random_comm_only_pps(rng: &mut EngineRng) -> PpsModel {
    let mut model = random_small_pps(rng);
    let pool = ["a", "b", "c"];
    let n_rules = rng.gen_range(1..=4usize);
    model.rules = (0..n_rules)
        .map(|_| {
            let t = random_type(rng);
            match rng.gen_range(0..3u32) {
                0 => PpsRule::CommIn {
                    trigger: rng.gen_bool(0.5).then(|| random_symbol(rng, &pool)),
                    moved: random_symbol(rng, &pool),
                    cell_type: t,
                },
                1 => PpsRule::CommEnter {
                    trigger: rng.gen_bool(0.5).then(|| random_symbol(rng, &pool)),
                    moved: random_symbol(rng, &pool),
                    cell_type: t,
                },
                _ => PpsRule::CommExit {
                    moved: random_symbol(rng, &pool),
                    cell_type: t,
                },
            }
        })
        .collect();
    // Sometimes maintain bonds dynamically from content-dependent rules.
    if rng.gen_bool(0.4) {
        model.bond_rules = vec![operas_core::pps::BondRule {
            left_type: CellType::new("t"),
            left_required: Multiset::new(),
            right_required: Multiset::new(),
            right_type: CellType::new("u"),
        }];
    }
    model
}

#[test]
fn criterion_04_conservation() {
    let mut rng = engine_rng(0xC4);
    for case in 0..200u32 {
        let model = random_comm_only_pps(&mut rng);
        let engine = Engine::with_defaults(model).unwrap();
        let seed = rng.gen::<u64>();
        let mode = if rng.gen_bool(0.5) {
            StepMode::MaximalParallel
        } else {
            StepMode::ArbitraryParallel
        };
        let mut run_rng = engine_rng(seed);
        let mut config = engine.initial_configuration();
        let total = config.total_objects();
        for step in 0..20u32 {
            let selection = engine.select_step(&config, mode, &mut run_rng);
            if selection.is_empty() {
                break;
            }
            config = engine.apply_step(&config, &selection).unwrap();
            assert_eq!(
                config.total_objects(),
                total,
                "case {case} (seed {seed}): conservation broken at step {step}"
            );
        }
    }
    println!("PASS criterion 4: conservation - 200 communication-only models x 20 steps, exact");
}

// ---------------------------------------------------------------------
// Criterion 5: seed determinism over the corpus
// ---------------------------------------------------------------------

fn run_cli_jsonl(file: &str, seed: u64, steps: u64) -> Vec<u8> {
    let out = cli()
        .arg("run")
        .arg(workspace_path(file))
        .args(["--steps", &steps.to_string()])
        .args(["--seed", &seed.to_string()])
        .args(["--format", "jsonl"])
        .output()
        .expect("cli runs");
    assert!(
        out.status.success(),
        "cli failed on {file}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

#[test]
fn criterion_05_seed_determinism() {
    let corpus = [
        "corpus/tumour.opml",
        "corpus/food_exchange.opml",
        "corpus/ant_colony.opml",
        "corpus/echo.opml",
    ];
    for file in corpus {
        for rep in 0..10u64 {
            let seed = rep + 1;
            let first = run_cli_jsonl(file, seed, 10);
            let second = run_cli_jsonl(file, seed, 10);
            assert_eq!(
                first, second,
                "{file} seed {seed}: traces are not byte-identical"
            );
        }
    }
    println!("PASS criterion 5: seed determinism - 4 corpus models x 10 repetitions, byte-exact");
}

// ---------------------------------------------------------------------
// Criterion 6: the food-exchange handshake
// ---------------------------------------------------------------------

#[test]
fn criterion_06_cxm_handshake() {
    let system = build_food_exchange();
    let runner = CxmRunner::new(system).unwrap();
    let trace = runner.run(4, 7).unwrap();

    let food_of = |snap: &Snapshot, machine: usize| -> i64 {
        let Snapshot::Cxm(s) = snap else { unreachable!() };
        match s.machines[machine].memory.get("food") {
            Some(Value::Int(n)) => *n,
            other => panic!("food field missing: {other:?}"),
        }
    };
    let in_flight = |snap: &Snapshot| -> i64 {
        let Snapshot::Cxm(s) = snap else { unreachable!() };
        s.channels
            .iter()
            .filter_map(|c| c.buffer.as_ref())
            .filter(|b| b.tag.as_str() == "food")
            .map(|b| match b.args.first() {
                Some(Value::Int(n)) => *n,
                other => panic!("food payload missing: {other:?}"),
            })
            .sum()
    };

    let initial_total = food_of(&trace.snapshots[0], 0) + food_of(&trace.snapshots[0], 1);
    for snap in &trace.snapshots {
        let total = food_of(snap, 0) + food_of(snap, 1) + in_flight(snap);
        assert_eq!(total, initial_total, "food not conserved across the exchange");
        assert!(food_of(snap, 0) >= 0, "donor went negative");
    }

    // Round 1: the donor sends its surplus; the amount sits in the buffer.
    let sent = food_of(&trace.snapshots[0], 0) - food_of(&trace.snapshots[1], 0);
    assert_eq!(sent, 5, "donor gives food - threshold = 5");
    assert_eq!(in_flight(&trace.snapshots[1]), sent);
    assert_eq!(
        food_of(&trace.snapshots[1], 1),
        food_of(&trace.snapshots[0], 1),
        "no same-round relay"
    );
    // Round 2: the receiver gets exactly the sent amount, one round later.
    assert_eq!(
        food_of(&trace.snapshots[2], 1),
        food_of(&trace.snapshots[0], 1) + sent
    );
    assert_eq!(in_flight(&trace.snapshots[2]), 0);
    println!("PASS criterion 6: cxm handshake - conserved, donor non-negative, one-round latency");
}

// ---------------------------------------------------------------------
// Criterion 7: determinism enforcement with the exact offending point
// ---------------------------------------------------------------------

#[test]
fn criterion_07_xm_determinism_enforcement() {
    use operas_core::expr::{Expr, IoItem, Memory};
    use operas_core::xm::{
        run_stream, GuardedFunction, OutputSpec, Transition, XMachineDef, XmError,
    };

    let syms = |names: &[&str]| names.iter().map(|n| sym(n)).collect::<BTreeSet<_>>();
    let out_a = OutputSpec::Item {
        tag: sym("a"),
        args: vec![],
    };
    let def = XMachineDef {
        name: sym("Overlap"),
        input_alphabet: syms(&["a", "b"]),
        output_alphabet: syms(&["a"]),
        states: syms(&["q0", "q1"]),
        memory_schema: BTreeMap::new(),
        functions: vec![
            GuardedFunction::new("first", Expr::input_tag_is("a"), out_a.clone(), vec![]),
            GuardedFunction::new("dupA", Expr::truth(true), out_a.clone(), vec![]),
            GuardedFunction::new("dupB", Expr::input_tag_is("b"), out_a, vec![]),
        ],
        transitions: vec![
            Transition {
                from: sym("q0"),
                function: sym("first"),
                to: sym("q1"),
            },
            Transition {
                from: sym("q1"),
                function: sym("dupA"),
                to: sym("q1"),
            },
            Transition {
                from: sym("q1"),
                function: sym("dupB"),
                to: sym("q1"),
            },
        ],
        initial_state: sym("q0"),
        initial_memory: Memory::new(),
    };
    def.validate().unwrap();
    let inputs = vec![IoItem::plain("a"), IoItem::plain("b")];
    let err = run_stream(&def, &inputs).unwrap_err();
    assert_eq!(err.index, 1, "offending input index");
    assert_eq!(err.state, sym("q1"), "offending state");
    match err.source {
        XmError::Nondeterminism {
            state, functions, ..
        } => {
            assert_eq!(state, sym("q1"));
            assert_eq!(functions, vec![sym("dupA"), sym("dupB")]);
        }
        other => panic!("expected nondeterminism, got {other}"),
    }
    println!("PASS criterion 7: determinism enforced - error at exact (state q1, input index 1)");
}

// ---------------------------------------------------------------------
// Criterion 8: structural integrity under mutation-heavy runs
// ---------------------------------------------------------------------

fn random_mutation_heavy_system(rng: &mut EngineRng) -> operas_core::operas::OperasSystem {
    use operas_core::expr::{Expr, TypeExpr};
    use operas_core::operas::{
        AgentId, AgentInstance, AgentTypeDef, EnvironmentModel, OperasSystem, ReconfigAction,
        ReconfigRule, Selector,
    };
    use operas_core::xm::{GuardedFunction, OutputSpec, Transition, XMachineDef};

    let spawn_at = rng.gen_range(3..=6i64);
    let die_at = spawn_at + rng.gen_range(2..=4i64);
    let behaviour = XMachineDef {
        name: sym("Unit"),
        input_alphabet: [sym("tick")].into_iter().collect(),
        output_alphabet: [sym("noop")].into_iter().collect(),
        states: [sym("S")].into_iter().collect(),
        memory_schema: [
            ("energy".to_string(), TypeExpr::Int),
            ("pos".to_string(), TypeExpr::pos()),
        ]
        .into_iter()
        .collect(),
        functions: vec![GuardedFunction::new(
            "age",
            Expr::input_tag_is("tick"),
            OutputSpec::Item {
                tag: sym("noop"),
                args: vec![],
            },
            vec![("energy", Expr::mem("energy").add(Expr::int(1)))],
        )],
        transitions: vec![Transition {
            from: sym("S"),
            function: sym("age"),
            to: sym("S"),
        }],
        initial_state: sym("S"),
        initial_memory: [
            ("energy".to_string(), Value::Int(0)),
            ("pos".to_string(), Value::pair(0, 0)),
        ]
        .into_iter()
        .collect(),
    };
    let mut mutation_rules = vec![
        ReconfigRule {
            condition: Expr::mem("energy").eq(Expr::int(spawn_at)),
            action: ReconfigAction::AddAgent {
                agent_type: sym("unit"),
                init: vec![("energy".to_string(), Expr::int(0))],
            },
        },
        ReconfigRule {
            condition: Expr::mem("energy").eq(Expr::int(die_at)),
            action: ReconfigAction::RemoveAgent(Selector::This),
        },
        ReconfigRule {
            condition: Expr::NeighbourCount.eq(Expr::int(0)),
            action: ReconfigAction::AddChannel(Selector::Nearest),
        },
    ];
    if rng.gen_bool(0.5) {
        mutation_rules.push(ReconfigRule {
            condition: Expr::NeighbourCount.ge(Expr::int(2)),
            action: ReconfigAction::RemoveChannel(Selector::Nearest),
        });
    }
    let tdef = AgentTypeDef {
        behaviour,
        percepts: BTreeSet::new(),
        mutation_rules,
    };
    let n_agents = rng.gen_range(3..=5usize);
    let mut agents = BTreeMap::new();
    for i in 0..n_agents {
        let id = AgentId(i as u64);
        let mut memory = tdef.behaviour.initial_memory.clone();
        memory.insert("energy".to_string(), Value::Int(rng.gen_range(0..=2)));
        memory.insert(
            "pos".to_string(),
            Value::pair(rng.gen_range(0..4), rng.gen_range(0..4)),
        );
        agents.insert(
            id,
            AgentInstance {
                id,
                agent_type: sym("unit"),
                state: sym("S"),
                memory,
            },
        );
    }
    OperasSystem {
        types: [(sym("unit"), tdef)].into_iter().collect(),
        reconfig_rules: vec![],
        environment: EnvironmentModel::empty(4, 4),
        relation: BTreeSet::new(),
        agents,
        buffers: BTreeMap::new(),
        next_agent_id: n_agents as u64,
    }
}

#[test]
fn criterion_08_operas_structural_integrity() {
    let mut rng = engine_rng(0xC8);
    let mut total_mutations = 0u64;
    for case in 0..100u32 {
        let system = random_mutation_heavy_system(&mut rng);
        let runner = OperasRunner::new(system).unwrap();
        let seed = rng.gen::<u64>();
        let (trace, reports) = runner.run_with_reports(30, seed).unwrap();
        let mut previous_count: Option<usize> = None;
        for snap in &trace.snapshots {
            let Snapshot::Operas(s) = snap else { unreachable!() };
            let live: BTreeSet<u64> = s.agents.iter().map(|a| a.id).collect();
            for (a, b) in &s.relation {
                assert!(
                    live.contains(a) && live.contains(b),
                    "case {case}, step {}: dangling channel ({a}, {b})",
                    s.step
                );
            }
            if let Some(prev) = previous_count {
                let report = &reports[(s.step - 1) as usize];
                let expected =
                    prev as i64 + report.added.len() as i64 - report.removed.len() as i64;
                assert_eq!(
                    s.agents.len() as i64,
                    expected,
                    "case {case}, step {}: population accounting broken",
                    s.step
                );
            }
            previous_count = Some(s.agents.len());
        }
        total_mutations += reports
            .iter()
            .map(|r| (r.added.len() + r.removed.len()) as u64)
            .sum::<u64>();
    }
    assert!(
        total_mutations > 500,
        "runs were not mutation-heavy ({total_mutations} structural events)"
    );
    println!(
        "PASS criterion 8: structural integrity - 100 runs x 30 steps, {total_mutations} structural events, exact"
    );
}

// ---------------------------------------------------------------------
// Criterion 9: language laws over the corpus plus fuzz totality
// ---------------------------------------------------------------------

#[test]
fn criterion_09_dsl_laws() {
    let corpus = [
        "corpus/tumour.opml",
        "corpus/food_exchange.opml",
        "corpus/ant_colony.opml",
        "corpus/echo.opml",
    ];
    for file in corpus {
        let source = std::fs::read_to_string(workspace_path(file)).unwrap();
        let doc = operas_dsl::parse(&source).unwrap_or_else(|d| panic!("{file}: {d:?}"));
        let printed = operas_dsl::print(&doc);
        let reparsed = operas_dsl::parse(&printed).unwrap();
        assert_eq!(doc, reparsed, "{file}: parse . print is not the identity");
        assert_eq!(
            printed,
            operas_dsl::print(&reparsed),
            "{file}: print is not idempotent"
        );
    }

    // Totality: 10,000 seeded random inputs, a mix of raw noise and token
    // soup, must never crash the parser.
    let mut rng = engine_rng(0xC9);
    let tokens = [
        "pps", "xm", "cxm", "operas", "{", "}", ";", ":", "->", "=>", "rule", "cell", "alphabet",
        "types", "fn", "when", "output", "set", "m.", "input", "(", ")", "[", "]", ",", "--",
        "|", "&&", "==", "++", "123", "a", "b", "tick", ":food", "/*", "*/", "//",
    ];
    for _ in 0..10_000u32 {
        let input: String = if rng.gen_bool(0.5) {
            let len = rng.gen_range(0..200usize);
            (0..len)
                .map(|_| char::from_u32(rng.gen_range(1..0x2FF)).unwrap_or('x'))
                .collect()
        } else {
            let len = rng.gen_range(0..80usize);
            (0..len)
                .map(|_| tokens[rng.gen_range(0..tokens.len())])
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = operas_dsl::parse(&input);
    }
    println!("PASS criterion 9: dsl laws - corpus round-trip + idempotence, 10k fuzz inputs, 0 crashes");
}

// ---------------------------------------------------------------------
// Criterion 10: CLI contract and golden traces
// ---------------------------------------------------------------------

#[test]
fn criterion_10_cli_contract_and_goldens() {
    // Exit 0 with a valid run.
    let ok = cli()
        .arg("run")
        .arg(workspace_path("corpus/tumour.opml"))
        .args(["--steps", "3", "--seed", "7", "--format", "jsonl"])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
    // 3-step run: header + 4 snapshots + terminal.
    assert_eq!(String::from_utf8_lossy(&ok.stdout).lines().count(), 6);

    // Exit 1 on a missing file, with an E-IO diagnostic.
    let missing = cli().arg("run").arg("no-such-model.opml").output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("E-IO"));

    // Exit 1 on model errors.
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.opml");
    std::fs::write(&bad, "pps { alphabet a; types t; cell t {z}; }").unwrap();
    let invalid = cli().arg("run").arg(&bad).output().unwrap();
    assert_eq!(invalid.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&invalid.stderr).contains("E-UNDECLARED-SYMBOL"));

    // Exit 2 on runtime errors (overlapping guards hit mid-run).
    let racy = dir.path().join("racy.opml");
    std::fs::write(
        &racy,
        r#"xm R {
  inputs a; outputs a; states q; init q;
  fn one when true { output a; }
  fn two when input.tag == :a { output a; }
  trans q -> q on one;
  trans q -> q on two;
  stream a;
}"#,
    )
    .unwrap();
    let runtime = cli().arg("run").arg(&racy).output().unwrap();
    assert_eq!(runtime.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&runtime.stderr).contains("E-RUNTIME"));

    // check: exit 0 / 1.
    let check_ok = cli()
        .arg("check")
        .arg(workspace_path("corpus/ant_colony.opml"))
        .output()
        .unwrap();
    assert_eq!(check_ok.status.code(), Some(0));
    let check_bad = cli().arg("check").arg(&bad).output().unwrap();
    assert_eq!(check_bad.status.code(), Some(1));

    // Golden regression at seed 42, 10 steps.
    let regen = std::env::var("REGEN_GOLDEN").is_ok();
    for name in ["tumour", "food_exchange", "ant_colony", "echo"] {
        let got = run_cli_jsonl(&format!("corpus/{name}.opml"), 42, 10);
        let golden_path = workspace_path(&format!("corpus/golden/{name}.seed42.jsonl"));
        if regen {
            std::fs::write(&golden_path, &got).unwrap();
            continue;
        }
        let want = std::fs::read(&golden_path)
            .unwrap_or_else(|e| panic!("golden for {name} missing ({e}); REGEN_GOLDEN=1"));
        assert_eq!(
            got, want,
            "{name}: trace deviates from the stored golden (seed 42)"
        );
    }
    println!("PASS criterion 10: cli contract - exit codes 0/1/2 + golden traces at seed 42");
}
