//! Ant colony models: the grid-dwelling colony as an organism system, and
//! the two-ant food-exchange handshake as a communicating machine pair.
//!
//! Colony behaviour: an ant rests while its reserve covers the threshold,
//! turns to seeking when it drops below, eats food found on its cell, walks
//! toward food or pheromone it perceives, and otherwise random-walks leaving
//! a unit pheromone trail (no evaporation, a documented placeholder: the
//! source biology gives no rates). Ants with surplus send it to a
//! communication partner; isolated starved ants are removed by a global
//! rule. The grid's border ring stands in for the world outside the nest:
//! leaving and re-entering is the seeded walk re-crossing it.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::expr::{Expr, IoItem, Memory, TypeExpr, Value};
use crate::operas::{
    derived_percept_alphabet, AgentId, AgentInstance, AgentTypeDef, EnvironmentModel,
    OperasSystem, ReconfigAction, ReconfigRule, Selector,
};
use crate::rng::engine_rng;
use crate::symbol::Symbol;
use crate::xm::{
    Channel, ChannelRef, CxmMachine, CxmSystem, GuardedFunction, OutputSpec, Transition,
    XMachineDef,
};

use super::ParameterError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AntParams {
    pub width: u32,
    pub height: u32,
    pub ants: usize,
    /// Reserve level below which an ant activates.
    pub threshold: i64,
    /// Initial reserves are drawn uniformly from 0..=max_initial_food.
    pub max_initial_food: i64,
    pub food_piles: usize,
    pub pile_size: u64,
    /// Placement seed; construction is a pure function of the params.
    pub seed: u64,
}

impl Default for AntParams {
    fn default() -> AntParams {
        AntParams {
            width: 10,
            height: 10,
            ants: 6,
            threshold: 5,
            max_initial_food: 10,
            food_piles: 5,
            pile_size: 3,
            seed: 0,
        }
    }
}

fn sym(name: &str) -> Symbol {
    Symbol::new(name)
}

fn syms(names: &[&str]) -> BTreeSet<Symbol> {
    names.iter().map(|n| Symbol::new(n)).collect()
}

fn out(tag: &str, args: Vec<Expr>) -> OutputSpec {
    OutputSpec::Item {
        tag: Symbol::new(tag),
        args,
    }
}

/// The Pharaoh-ant behaviour machine used by the colony model.
pub fn ant_behaviour(threshold: i64) -> XMachineDef {
    let percepts: BTreeSet<Symbol> = syms(&["food", "pheromone"]);
    let mut input_alphabet = derived_percept_alphabet(&percepts);
    input_alphabet.insert(sym("food"));

    let below = Expr::mem("food").lt(Expr::mem("threshold"));
    let at_least = Expr::mem("food").ge(Expr::mem("threshold"));

    let mut functions = vec![
        GuardedFunction::new(
            "hunger",
            Expr::input_tag_is("tick").and(below.clone()),
            out("activate", vec![]),
            vec![],
        ),
        GuardedFunction::new(
            "giveFood",
            Expr::input_tag_is("tick").and(Expr::mem("food").gt(Expr::mem("threshold"))),
            out("food", vec![Expr::mem("food").sub(Expr::mem("threshold"))]),
            vec![("food", Expr::mem("threshold"))],
        )
        .to_channel(ChannelRef::Peer),
        GuardedFunction::new(
            "takeEnoughFood",
            Expr::input_tag_is("food"),
            out("accept", vec![]),
            vec![("food", Expr::mem("food").add(Expr::InputArg(0)))],
        )
        .from_channel(ChannelRef::Peer),
        GuardedFunction::new(
            "eat",
            Expr::input_tag_is("food_here"),
            out("take", vec![Expr::sym("food")]),
            vec![],
        ),
        GuardedFunction::new(
            "satisfied",
            Expr::input_tag_is("tick").and(at_least),
            out("rest", vec![]),
            vec![],
        ),
        GuardedFunction::new(
            "wander",
            Expr::input_tag_is("tick").and(below),
            out("walk", vec![Expr::sym("pheromone")]),
            vec![],
        ),
    ];
    for (dir, dx, dy) in [("N", 0, -1), ("E", 1, 0), ("S", 0, 1), ("W", -1, 0)] {
        functions.push(GuardedFunction::new(
            &format!("toFood{dir}"),
            Expr::input_tag_is(&format!("food_{dir}")),
            out("move", vec![Expr::int(dx), Expr::int(dy)]),
            vec![],
        ));
        functions.push(GuardedFunction::new(
            &format!("followTrail{dir}"),
            Expr::input_tag_is(&format!("pheromone_{dir}")),
            out("move", vec![Expr::int(dx), Expr::int(dy)]),
            vec![],
        ));
    }

    let arrow = |from: &str, function: &str, to: &str| Transition {
        from: sym(from),
        function: sym(function),
        to: sym(to),
    };
    let mut transitions = vec![
        arrow("Idle", "hunger", "Seek"),
        arrow("Idle", "giveFood", "Idle"),
        arrow("Seek", "takeEnoughFood", "Seek"),
        arrow("Seek", "eat", "Seek"),
        arrow("Seek", "satisfied", "Idle"),
        arrow("Seek", "wander", "Seek"),
    ];
    for dir in ["N", "E", "S", "W"] {
        transitions.push(arrow("Seek", &format!("toFood{dir}"), "Seek"));
        transitions.push(arrow("Seek", &format!("followTrail{dir}"), "Seek"));
    }

    XMachineDef {
        name: sym("Ant"),
        input_alphabet,
        output_alphabet: syms(&["rest", "activate", "accept", "food", "take", "move", "walk"]),
        states: syms(&["Idle", "Seek"]),
        memory_schema: [
            ("food".to_string(), TypeExpr::Int),
            ("threshold".to_string(), TypeExpr::Int),
            ("pos".to_string(), TypeExpr::pos()),
        ]
        .into_iter()
        .collect(),
        functions,
        transitions,
        initial_state: sym("Idle"),
        initial_memory: [
            ("food".to_string(), Value::Int(0)),
            ("threshold".to_string(), Value::Int(threshold)),
            ("pos".to_string(), Value::pair(0, 0)),
        ]
        .into_iter()
        .collect(),
    }
}

/// The colony: ants on a grid with scattered food. The communication
/// relation starts empty; isolated ants pair up with their nearest
/// neighbour, after which surplus flows to hungry partners over the peer
/// channels.
pub fn build_ants(params: AntParams) -> Result<OperasSystem, ParameterError> {
    if params.width < 1 || params.height < 1 {
        return Err(ParameterError("grid must be at least 1x1".to_string()));
    }
    if params.threshold <= 0 {
        return Err(ParameterError("threshold must be positive".to_string()));
    }
    if params.max_initial_food < 0 {
        return Err(ParameterError("max_initial_food must be non-negative".to_string()));
    }

    let mut rng = engine_rng(params.seed);
    let mut environment = EnvironmentModel::empty(params.width, params.height);
    for _ in 0..params.food_piles {
        let x = rng.gen_range(0..params.width) as i64;
        let y = rng.gen_range(0..params.height) as i64;
        environment
            .at_mut(x, y)
            .insert(sym("food"), params.pile_size)
            .expect("pile size fits");
    }

    let behaviour = ant_behaviour(params.threshold);
    let ant_type = AgentTypeDef {
        behaviour,
        percepts: syms(&["food", "pheromone"]),
        mutation_rules: vec![ReconfigRule {
            condition: Expr::NeighbourCount.eq(Expr::int(0)),
            action: ReconfigAction::AddChannel(Selector::Nearest),
        }],
    };

    let mut agents = BTreeMap::new();
    for i in 0..params.ants {
        let id = AgentId(i as u64);
        let x = rng.gen_range(0..params.width) as i64;
        let y = rng.gen_range(0..params.height) as i64;
        let food = rng.gen_range(0..=params.max_initial_food);
        let mut memory: Memory = ant_type.behaviour.initial_memory.clone();
        memory.insert("food".to_string(), Value::Int(food));
        memory.insert("pos".to_string(), Value::pair(x, y));
        agents.insert(
            id,
            AgentInstance {
                id,
                agent_type: sym("ant"),
                state: sym("Idle"),
                memory,
            },
        );
    }

    let system = OperasSystem {
        types: [(sym("ant"), ant_type)].into_iter().collect(),
        // Starved ants leave the colony once isolated; requiring isolation
        // keeps in-flight food transfers from being pruned with the channel.
        reconfig_rules: vec![ReconfigRule {
            condition: Expr::mem("food")
                .eq(Expr::int(0))
                .and(Expr::NeighbourCount.eq(Expr::int(0))),
            action: ReconfigAction::RemoveAgent(Selector::This),
        }],
        environment,
        relation: BTreeSet::new(),
        agents,
        buffers: BTreeMap::new(),
        next_agent_id: params.ants as u64,
    };
    system
        .validate()
        .expect("ant builder produces a valid system");
    Ok(system)
}

/// The two-ant food-exchange handshake: the resting donor's `giveFood` sends
/// its surplus over the channel; the seeking ant's `takeEnoughFood` receives
/// it one round later.
pub fn build_food_exchange() -> CxmSystem {
    let donor_def = XMachineDef {
        name: sym("DonorAnt"),
        input_alphabet: syms(&["tick"]),
        output_alphabet: syms(&["food"]),
        states: syms(&["Inactive"]),
        memory_schema: [
            ("food".to_string(), TypeExpr::Int),
            ("threshold".to_string(), TypeExpr::Int),
        ]
        .into_iter()
        .collect(),
        functions: vec![GuardedFunction::new(
            "giveFood",
            Expr::input_tag_is("tick").and(Expr::mem("food").gt(Expr::mem("threshold"))),
            out("food", vec![Expr::mem("food").sub(Expr::mem("threshold"))]),
            vec![("food", Expr::mem("threshold"))],
        )
        .to_channel(ChannelRef::Named(sym("share")))],
        transitions: vec![Transition {
            from: sym("Inactive"),
            function: sym("giveFood"),
            to: sym("Inactive"),
        }],
        initial_state: sym("Inactive"),
        initial_memory: [
            ("food".to_string(), Value::Int(10)),
            ("threshold".to_string(), Value::Int(5)),
        ]
        .into_iter()
        .collect(),
    };
    let taker_def = XMachineDef {
        name: sym("SeekerAnt"),
        input_alphabet: syms(&["food"]),
        output_alphabet: syms(&["accept"]),
        states: syms(&["Active"]),
        memory_schema: [
            ("food".to_string(), TypeExpr::Int),
            ("threshold".to_string(), TypeExpr::Int),
        ]
        .into_iter()
        .collect(),
        functions: vec![GuardedFunction::new(
            "takeEnoughFood",
            Expr::input_tag_is("food"),
            out("accept", vec![]),
            vec![("food", Expr::mem("food").add(Expr::InputArg(0)))],
        )
        .from_channel(ChannelRef::Named(sym("share")))],
        transitions: vec![Transition {
            from: sym("Active"),
            function: sym("takeEnoughFood"),
            to: sym("Active"),
        }],
        initial_state: sym("Active"),
        initial_memory: [
            ("food".to_string(), Value::Int(2)),
            ("threshold".to_string(), Value::Int(5)),
        ]
        .into_iter()
        .collect(),
    };
    CxmSystem {
        machines: vec![
            CxmMachine::fresh("donor", donor_def, vec![IoItem::plain("tick")]),
            CxmMachine::fresh("seeker", taker_def, vec![]),
        ],
        channels: vec![Channel {
            name: sym("share"),
            sender: 0,
            receiver: 1,
            buffer: None,
        }],
    }
}

/// Total food over ant memories, in-flight channel buffers, and the grid:
/// the conserved quantity of colony runs.
pub fn total_colony_food(system: &OperasSystem) -> i64 {
    let mut total: i64 = 0;
    for agent in system.agents.values() {
        if let Some(Value::Int(n)) = agent.memory.get("food") {
            total += n;
        }
    }
    for item in system.buffers.values() {
        if item.tag.as_str() == "food" {
            if let Some(Value::Int(n)) = item.args.first() {
                total += n;
            }
        }
    }
    total += system.environment.totals().count(&sym("food")) as i64;
    total
}
