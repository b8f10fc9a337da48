//! Engine-level invariants over randomized models: every bond endpoint in
//! every snapshot references a live cell, step indices advance by one, and
//! runs are pure functions of their arguments.

use std::collections::BTreeSet;

use rand::Rng;

use operas_core::multiset::Multiset;
use operas_core::pps::{
    BondMode, BondRule, CellType, Engine, EngineOptions, PpsModel, PpsRule, StepMode,
};
use operas_core::rng::{engine_rng, EngineRng};
use operas_core::symbol::Symbol;
use operas_core::trace::Snapshot;

fn sym(name: &str) -> Symbol {
    Symbol::new(name)
}

fn random_structural_model(rng: &mut EngineRng) -> PpsModel {
    let pool = ["a", "b", "c", "d"];
    let pick = |rng: &mut EngineRng| sym(pool[rng.gen_range(0..pool.len())]);
    let ty = |rng: &mut EngineRng| CellType::new(if rng.gen_bool(0.5) { "t" } else { "u" });
    let n_cells = rng.gen_range(2..=4usize);
    let mut cells = Vec::new();
    for _ in 0..n_cells {
        let mut ms = Multiset::new();
        for _ in 0..rng.gen_range(1..=4u32) {
            ms.insert(pick(rng), 1).unwrap();
        }
        cells.push((ms, ty(rng)));
    }
    let mut graph = BTreeSet::new();
    for i in 0..n_cells {
        for j in (i + 1)..n_cells {
            if rng.gen_bool(0.5) {
                graph.insert((i, j));
            }
        }
    }
    let mut rules = Vec::new();
    for _ in 0..rng.gen_range(2..=5usize) {
        let t = ty(rng);
        rules.push(match rng.gen_range(0..6u32) {
            0 => PpsRule::Transform {
                consumed: pick(rng),
                produced: [(pick(rng), 1)].into_iter().collect(),
                cell_type: t,
            },
            1 => PpsRule::Divide {
                consumed: pick(rng),
                left_product: pick(rng),
                right_product: pick(rng),
                cell_type: t,
            },
            2 => PpsRule::Die {
                consumed: pick(rng),
                cell_type: t,
            },
            3 => PpsRule::Differentiate {
                consumed: pick(rng),
                produced: pick(rng),
                from_type: t,
                to_type: ty(rng),
            },
            4 => PpsRule::CommIn {
                trigger: rng.gen_bool(0.5).then(|| pick(rng)),
                moved: pick(rng),
                cell_type: t,
            },
            _ => PpsRule::CommExit {
                moved: pick(rng),
                cell_type: t,
            },
        });
    }
    let bond_rules = if rng.gen_bool(0.5) {
        vec![BondRule {
            left_type: CellType::new("t"),
            left_required: Multiset::new(),
            right_required: Multiset::new(),
            right_type: CellType::new("u"),
        }]
    } else {
        Vec::new()
    };
    PpsModel {
        alphabet: pool.iter().map(|s| sym(s)).collect(),
        cell_types: [CellType::new("t"), CellType::new("u")].into_iter().collect(),
        bond_rules,
        initial_graph: graph,
        env_init: Multiset::new(),
        initial_cells: cells,
        rules,
    }
}

#[test]
fn bond_endpoints_are_always_live() {
    let mut rng = engine_rng(0xB0);
    for case in 0..200u32 {
        let model = random_structural_model(&mut rng);
        let bonds = if rng.gen_bool(0.5) {
            BondMode::Dynamic
        } else {
            BondMode::Static
        };
        let options = EngineOptions {
            bonds,
            death_releases_objects: rng.gen_bool(0.3),
        };
        let engine = Engine::new(model, options).unwrap();
        let mode = if rng.gen_bool(0.5) {
            StepMode::MaximalParallel
        } else {
            StepMode::ArbitraryParallel
        };
        let trace = engine.run(10, mode, rng.gen()).unwrap();
        let mut expected_step = 0u64;
        for snap in &trace.snapshots {
            let Snapshot::Pps(p) = snap else { unreachable!() };
            assert_eq!(p.step, expected_step, "case {case}: step index gap");
            expected_step += 1;
            let live: BTreeSet<u64> = p.cells.iter().map(|c| c.id).collect();
            for (a, b) in &p.bonds {
                assert!(
                    live.contains(a) && live.contains(b) && a != b,
                    "case {case}, step {}: bond ({a}, {b}) has a dead or self endpoint",
                    p.step
                );
            }
        }
    }
}

#[test]
fn runs_are_pure_functions_of_their_arguments() {
    let mut rng = engine_rng(0xB1);
    for _ in 0..30u32 {
        let model = random_structural_model(&mut rng);
        let engine = Engine::with_defaults(model).unwrap();
        let seed = rng.gen();
        for mode in [StepMode::MaximalParallel, StepMode::ArbitraryParallel] {
            let a = engine.run(8, mode, seed).unwrap().to_jsonl();
            let b = engine.run(8, mode, seed).unwrap().to_jsonl();
            assert_eq!(a, b);
        }
    }
}
