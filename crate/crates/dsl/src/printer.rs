use std::collections::BTreeMap;
use std::fmt::Write as _;

use operas_core::expr::{IoItem, Memory, Value};
use operas_core::multiset::Multiset;
use operas_core::operas::{OperasSystem, ReconfigAction, ReconfigRule};
use operas_core::pps::PpsModel;
use operas_core::xm::{CxmSystem, InputBinding, OutputBinding, OutputSpec, XMachineDef};

use crate::{ModelBody, ModelDocument, XmDoc};

/// Canonical formatting: sorted where the model value is a set, declaration
/// order where it is a sequence, explicit counts, two-space indent. Printing
/// then parsing yields a structurally equal document, and printing is
/// idempotent.
pub fn print(doc: &ModelDocument) -> String {
    let mut out = String::new();
    match &doc.body {
        ModelBody::Pps(model) => print_pps(&mut out, doc.name.as_deref(), model),
        ModelBody::Xm(xm) => print_xm_doc(&mut out, xm),
        ModelBody::Cxm(system) => print_cxm(&mut out, doc.name.as_deref().unwrap_or("System"), system),
        ModelBody::Operas(system) => {
            print_operas(&mut out, doc.name.as_deref().unwrap_or("System"), system)
        }
    }
    out
}

fn ms(m: &Multiset) -> String {
    m.to_string()
}

fn print_pps(out: &mut String, name: Option<&str>, model: &PpsModel) {
    match name {
        Some(n) => {
            let _ = writeln!(out, "pps {n} {{");
        }
        None => {
            let _ = writeln!(out, "pps {{");
        }
    }
    let alphabet: Vec<String> = model.alphabet.iter().map(|s| s.to_string()).collect();
    let _ = writeln!(out, "  alphabet {};", alphabet.join(" "));
    let types: Vec<String> = model.cell_types.iter().map(|t| t.to_string()).collect();
    let _ = writeln!(out, "  types {};", types.join(" "));
    for bond in &model.bond_rules {
        let _ = writeln!(out, "  {bond};");
    }
    if !model.env_init.is_empty() {
        let _ = writeln!(out, "  env {};", ms(&model.env_init));
    }
    for (contents, cell_type) in &model.initial_cells {
        let _ = writeln!(out, "  cell {cell_type} {};", ms(contents));
    }
    if !model.initial_graph.is_empty() {
        let edges: Vec<String> = model
            .initial_graph
            .iter()
            .map(|(a, b)| format!("{}-{}", a + 1, b + 1))
            .collect();
        let _ = writeln!(out, "  graph {};", edges.join(", "));
    }
    for rule in &model.rules {
        let _ = writeln!(out, "  rule {rule};");
    }
    let _ = writeln!(out, "}}");
}

fn print_io_item(item: &IoItem) -> String {
    item.to_string()
}

fn print_xm_def(out: &mut String, def: &XMachineDef, stream: Option<&[IoItem]>, indent: &str) {
    let _ = writeln!(out, "{indent}xm {} {{", def.name);
    let inner = format!("{indent}  ");
    let words = |items: &std::collections::BTreeSet<operas_core::symbol::Symbol>| {
        items.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
    };
    if !def.input_alphabet.is_empty() {
        let _ = writeln!(out, "{inner}inputs {};", words(&def.input_alphabet));
    }
    if !def.output_alphabet.is_empty() {
        let _ = writeln!(out, "{inner}outputs {};", words(&def.output_alphabet));
    }
    let _ = writeln!(out, "{inner}states {};", words(&def.states));
    let _ = writeln!(out, "{inner}init {};", def.initial_state);
    if !def.memory_schema.is_empty() {
        let _ = writeln!(out, "{inner}memory {{");
        for (field, ty) in &def.memory_schema {
            let init = &def.initial_memory[field];
            let _ = writeln!(out, "{inner}  {field}: {ty} = {init};");
        }
        let _ = writeln!(out, "{inner}}}");
    }
    for f in &def.functions {
        let mut head = format!("{inner}fn {}", f.name);
        if let InputBinding::Channel(c) = &f.input_binding {
            let _ = write!(
                head,
                " from {}",
                match c {
                    operas_core::xm::ChannelRef::Peer => "peer".to_string(),
                    operas_core::xm::ChannelRef::Named(n) => format!("channel {n}"),
                }
            );
        }
        if let OutputBinding::Channel(c) = &f.output_binding {
            let _ = write!(
                head,
                " to {}",
                match c {
                    operas_core::xm::ChannelRef::Peer => "peer".to_string(),
                    operas_core::xm::ChannelRef::Named(n) => format!("channel {n}"),
                }
            );
        }
        let _ = writeln!(out, "{head} when {} {{", f.guard);
        match &f.output {
            OutputSpec::Echo => {
                let _ = writeln!(out, "{inner}  output input;");
            }
            OutputSpec::Item { tag, args } => {
                if args.is_empty() {
                    let _ = writeln!(out, "{inner}  output {tag};");
                } else {
                    let rendered: Vec<String> = args.iter().map(|a| a.to_string()).collect();
                    let _ = writeln!(out, "{inner}  output {tag}({});", rendered.join(", "));
                }
            }
        }
        for (field, e) in &f.updates {
            let _ = writeln!(out, "{inner}  set m.{field} = {e};");
        }
        let _ = writeln!(out, "{inner}}}");
    }
    for t in &def.transitions {
        let _ = writeln!(out, "{inner}trans {} -> {} on {};", t.from, t.to, t.function);
    }
    if let Some(stream) = stream {
        if !stream.is_empty() {
            let rendered: Vec<String> = stream.iter().map(print_io_item).collect();
            let _ = writeln!(out, "{inner}stream {};", rendered.join(" "));
        }
    }
    let _ = writeln!(out, "{indent}}}");
}

fn print_xm_doc(out: &mut String, xm: &XmDoc) {
    print_xm_def(out, &xm.def, Some(&xm.stream), "");
}

fn memory_overrides(memory: &Memory, base: &Memory) -> Vec<(String, Value)> {
    memory
        .iter()
        .filter(|(field, value)| base.get(*field) != Some(*value))
        .map(|(field, value)| (field.clone(), value.clone()))
        .collect()
}

fn print_cxm(out: &mut String, name: &str, system: &CxmSystem) {
    let _ = writeln!(out, "cxm {name} {{");
    let mut printed: BTreeMap<String, ()> = BTreeMap::new();
    for m in &system.machines {
        let def_name = m.def.name.to_string();
        if printed.insert(def_name, ()).is_none() {
            print_xm_def(out, &m.def, None, "  ");
        }
    }
    for m in &system.machines {
        let overrides = memory_overrides(&m.memory, &m.def.initial_memory);
        if overrides.is_empty() {
            let _ = writeln!(out, "  machine {}: {};", m.name, m.def.name);
        } else {
            let _ = writeln!(out, "  machine {}: {} {{", m.name, m.def.name);
            for (field, value) in overrides {
                let _ = writeln!(out, "    {field} = {value};");
            }
            let _ = writeln!(out, "  }}");
        }
    }
    for c in &system.channels {
        let _ = writeln!(
            out,
            "  channel {}: {} -> {};",
            c.name, system.machines[c.sender].name, system.machines[c.receiver].name
        );
    }
    for m in &system.machines {
        if !m.stream.is_empty() {
            let rendered: Vec<String> = m.stream.iter().map(print_io_item).collect();
            let _ = writeln!(out, "  stream {}: {};", m.name, rendered.join(" "));
        }
    }
    let _ = writeln!(out, "}}");
}

fn print_rule(rule: &ReconfigRule) -> String {
    let action = match &rule.action {
        ReconfigAction::AddAgent { agent_type, init } => {
            if init.is_empty() {
                format!("add {agent_type}")
            } else {
                let fields: Vec<String> = init
                    .iter()
                    .map(|(field, e)| format!("{field} = {e};"))
                    .collect();
                format!("add {agent_type} {{ {} }}", fields.join(" "))
            }
        }
        ReconfigAction::RemoveAgent(sel) => format!("remove {sel}"),
        ReconfigAction::AddChannel(sel) => format!("link {sel}"),
        ReconfigAction::RemoveChannel(sel) => format!("unlink {sel}"),
    };
    format!("mut when {} => {action};", rule.condition)
}

fn print_operas(out: &mut String, name: &str, system: &OperasSystem) {
    let _ = writeln!(out, "operas {name} {{");
    let env = &system.environment;
    let _ = writeln!(out, "  grid {} {};", env.width, env.height);
    if !env.globals.is_empty() {
        let _ = writeln!(out, "  global {};", ms(&env.globals));
    }
    for y in 0..env.height as i64 {
        for x in 0..env.width as i64 {
            let cell = env.at(x, y);
            if !cell.is_empty() {
                let _ = writeln!(out, "  place {x} {y} {};", ms(cell));
            }
        }
    }
    let mut printed: BTreeMap<String, ()> = BTreeMap::new();
    for tdef in system.types.values() {
        let def_name = tdef.behaviour.name.to_string();
        if printed.insert(def_name, ()).is_none() {
            print_xm_def(out, &tdef.behaviour, None, "  ");
        }
    }
    for (tname, tdef) in &system.types {
        let _ = writeln!(out, "  type {tname} {{");
        let _ = writeln!(out, "    behaviour {};", tdef.behaviour.name);
        if !tdef.percepts.is_empty() {
            let words: Vec<String> = tdef.percepts.iter().map(|s| s.to_string()).collect();
            let _ = writeln!(out, "    percepts {};", words.join(" "));
        }
        for rule in &tdef.mutation_rules {
            let _ = writeln!(out, "    {}", print_rule(rule));
        }
        let _ = writeln!(out, "  }}");
    }
    for agent in system.agents.values() {
        let tdef = &system.types[&agent.agent_type];
        let overrides = memory_overrides(&agent.memory, &tdef.behaviour.initial_memory);
        if overrides.is_empty() {
            let _ = writeln!(out, "  agent {};", agent.agent_type);
        } else {
            let _ = writeln!(out, "  agent {} {{", agent.agent_type);
            for (field, value) in overrides {
                let _ = writeln!(out, "    {field} = {value};");
            }
            let _ = writeln!(out, "  }}");
        }
    }
    if !system.relation.is_empty() {
        let edges: Vec<String> = system
            .relation
            .iter()
            .map(|(a, b)| format!("{}-{}", a.0 + 1, b.0 + 1))
            .collect();
        let _ = writeln!(out, "  relation {};", edges.join(", "));
    }
    for rule in &system.reconfig_rules {
        let _ = writeln!(out, "  {}", print_rule(rule));
    }
    let _ = writeln!(out, "}}");
}
