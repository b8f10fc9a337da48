//! Trace summaries: per-step population counts by cell/agent type (machine
//! state for communicating systems), environment totals by symbol, and
//! bond/channel counts, as an aligned table or CSV.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde_json::Value;

#[derive(Default)]
struct Row {
    step: u64,
    by_type: BTreeMap<String, u64>,
    links: u64,
    env: BTreeMap<String, u64>,
    /// Total objects over cells plus environment (population systems).
    objects: Option<u64>,
}

pub fn stats_command(path: &Path, csv: bool) -> u8 {
    let raw = match fs::read_to_string(path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error[E-IO] cannot read {}: {e}", path.display());
            return 1;
        }
    };
    let mut rows: Vec<Row> = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("error[E-IO] line {} is not valid JSON: {e}", i + 1);
                return 1;
            }
        };
        match value.get("record").and_then(Value::as_str) {
            Some("header") => {
                if value.get("v").and_then(Value::as_u64) != Some(1) {
                    eprintln!("error[E-IO] unsupported trace schema version");
                    return 1;
                }
            }
            Some("snapshot") => rows.push(snapshot_row(&value)),
            Some("terminal") | None => {}
            Some(_) => {}
        }
    }
    if rows.is_empty() {
        eprintln!("error[E-IO] no snapshots in {}", path.display());
        return 1;
    }
    print!("{}", render(&rows, csv));
    0
}

fn count_env(value: &Value) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    if let Some(env) = value.get("env").and_then(Value::as_object) {
        for (sym, n) in env {
            out.insert(sym.clone(), n.as_u64().unwrap_or(0));
        }
    }
    out
}

fn snapshot_row(value: &Value) -> Row {
    let mut row = Row {
        step: value.get("step").and_then(Value::as_u64).unwrap_or(0),
        ..Row::default()
    };
    if let Some(cells) = value.get("cells").and_then(Value::as_array) {
        let mut objects: u64 = 0;
        for cell in cells {
            if let Some(t) = cell.get("type").and_then(Value::as_str) {
                *row.by_type.entry(t.to_string()).or_insert(0) += 1;
            }
            if let Some(contents) = cell.get("contents").and_then(Value::as_object) {
                objects += contents.values().filter_map(Value::as_u64).sum::<u64>();
            }
        }
        row.env = count_env(value);
        objects += row.env.values().sum::<u64>();
        row.objects = Some(objects);
        row.links = value
            .get("bonds")
            .and_then(Value::as_array)
            .map_or(0, |b| b.len() as u64);
    } else if let Some(agents) = value.get("agents").and_then(Value::as_array) {
        for agent in agents {
            if let Some(t) = agent.get("type").and_then(Value::as_str) {
                *row.by_type.entry(t.to_string()).or_insert(0) += 1;
            }
        }
        row.env = count_env(value);
        row.links = value
            .get("relation")
            .and_then(Value::as_array)
            .map_or(0, |r| r.len() as u64);
    } else if let Some(machines) = value.get("machines").and_then(Value::as_array) {
        for machine in machines {
            if let Some(s) = machine.get("state").and_then(Value::as_str) {
                *row.by_type.entry(s.to_string()).or_insert(0) += 1;
            }
        }
        row.links = value
            .get("channels")
            .and_then(Value::as_array)
            .map_or(0, |c| c.len() as u64);
    } else if let Some(state) = value.get("state").and_then(Value::as_str) {
        row.by_type.insert(state.to_string(), 1);
    }
    row
}

fn render(rows: &[Row], csv: bool) -> String {
    let mut type_cols: BTreeSet<String> = BTreeSet::new();
    let mut env_cols: BTreeSet<String> = BTreeSet::new();
    let mut has_objects = false;
    for row in rows {
        type_cols.extend(row.by_type.keys().cloned());
        env_cols.extend(row.env.keys().cloned());
        has_objects |= row.objects.is_some();
    }
    let mut header: Vec<String> = vec!["step".to_string()];
    header.extend(type_cols.iter().cloned());
    header.push("total".to_string());
    header.push("links".to_string());
    header.extend(env_cols.iter().map(|s| format!("env:{s}")));
    if has_objects {
        header.push("objects".to_string());
    }

    let mut table: Vec<Vec<String>> = vec![header];
    for row in rows {
        let mut cells = vec![row.step.to_string()];
        for t in &type_cols {
            cells.push(row.by_type.get(t).copied().unwrap_or(0).to_string());
        }
        cells.push(row.by_type.values().sum::<u64>().to_string());
        cells.push(row.links.to_string());
        for s in &env_cols {
            cells.push(row.env.get(s).copied().unwrap_or(0).to_string());
        }
        if has_objects {
            cells.push(
                row.objects
                    .map(|o| o.to_string())
                    .unwrap_or_else(|| "-".to_string()),
            );
        }
        table.push(cells);
    }

    if csv {
        let mut out = String::new();
        for row in table {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        return out;
    }
    let cols = table[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:>w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
