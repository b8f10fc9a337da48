//! Reproducible run traces: a header, one snapshot per step, and a terminal
//! marker, emitted either as human-readable text animation or as
//! schema-versioned JSONL (one self-delimiting record per line, `"v":1`).
//!
//! A trace is a pure function of (model digest, kind, mode, seed, steps,
//! engine options): re-running with the header's parameters reproduces it
//! byte for byte.

use std::fmt::Write as _;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::expr::{IoItem, Memory};
use crate::multiset::Multiset;
use crate::symbol::Symbol;

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Pps,
    Xm,
    Cxm,
    Operas,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Pps => "pps",
            ModelKind::Xm => "xm",
            ModelKind::Cxm => "cxm",
            ModelKind::Operas => "operas",
        };
        f.write_str(s)
    }
}

/// SHA-256 over the canonical JSON serialization of a model value. Structurally
/// identical models digest identically regardless of how they were built.
pub fn digest_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("model serialization cannot fail");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let out = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in out {
        let _ = write!(hex, "{byte:02x}");
    }
    hex
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceHeader {
    pub v: u32,
    pub kind: ModelKind,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bonds: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub death_releases_objects: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Terminal {
    Completed { steps: u64 },
    Halted { step: u64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct PpsCellRecord {
    pub id: u64,
    #[serde(rename = "type")]
    pub cell_type: Symbol,
    pub contents: Multiset,
}

#[derive(Debug, Clone, Serialize)]
pub struct FiredRule {
    pub cell: u64,
    pub rule: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub src: Option<u64>,
    pub n: u64,
    pub text: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct PpsSnapshot {
    pub step: u64,
    pub cells: Vec<PpsCellRecord>,
    pub bonds: Vec<(u64, u64)>,
    pub env: Multiset,
    pub fired: Vec<FiredRule>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MachineRecord {
    pub id: usize,
    pub name: Symbol,
    pub state: Symbol,
    pub memory: Memory,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChannelRecord {
    pub name: Symbol,
    pub from: usize,
    pub to: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buffer: Option<IoItem>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FiredFunction {
    pub machine: usize,
    #[serde(rename = "fn")]
    pub function: Symbol,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<IoItem>,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdleRecord {
    pub machine: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CxmSnapshot {
    pub step: u64,
    pub machines: Vec<MachineRecord>,
    pub channels: Vec<ChannelRecord>,
    pub fired: Vec<FiredFunction>,
    pub idle: Vec<IdleRecord>,
}

/// One consumed input of a standalone stream machine run.
#[derive(Debug, Clone, Serialize)]
pub struct StreamSnapshot {
    pub step: u64,
    pub state: Symbol,
    pub memory: Memory,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<IoItem>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<IoItem>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AgentRecord {
    pub id: u64,
    #[serde(rename = "type")]
    pub agent_type: Symbol,
    pub state: Symbol,
    pub memory: Memory,
}

#[derive(Debug, Clone, Serialize)]
pub struct MutationRecord {
    pub agent: u64,
    pub action: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OperasSnapshot {
    pub step: u64,
    pub agents: Vec<AgentRecord>,
    pub relation: Vec<(u64, u64)>,
    /// Per-symbol totals over the grid plus globals.
    pub env: Multiset,
    pub fired: Vec<FiredFunction>,
    pub idle: Vec<IdleRecord>,
    pub mutations: Vec<MutationRecord>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Snapshot {
    Pps(PpsSnapshot),
    Cxm(CxmSnapshot),
    Stream(StreamSnapshot),
    Operas(OperasSnapshot),
}

impl Snapshot {
    pub fn step(&self) -> u64 {
        match self {
            Snapshot::Pps(s) => s.step,
            Snapshot::Cxm(s) => s.step,
            Snapshot::Stream(s) => s.step,
            Snapshot::Operas(s) => s.step,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub header: TraceHeader,
    pub snapshots: Vec<Snapshot>,
    pub terminal: Terminal,
}

fn record_line<T: Serialize>(record: &'static str, payload: &T) -> String {
    let mut value = serde_json::to_value(payload).expect("trace serialization cannot fail");
    value
        .as_object_mut()
        .expect("trace records are objects")
        .insert("record".to_string(), serde_json::Value::String(record.to_string()));
    serde_json::to_string(&value).expect("trace serialization cannot fail")
}

impl Trace {
    /// Machine-readable form: header line, one line per snapshot, terminal
    /// line. Keys are sorted, so equal traces are byte-equal.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(&record_line("header", &self.header));
        out.push('\n');
        for snap in &self.snapshots {
            out.push_str(&record_line("snapshot", snap));
            out.push('\n');
        }
        out.push_str(&record_line("terminal", &self.terminal));
        out.push('\n');
        out
    }

    /// Human-readable animation: one block per step.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# {} run | model {} | mode {} | seed {} | steps {}",
            self.header.kind,
            &self.header.model[..12.min(self.header.model.len())],
            self.header.mode.as_deref().unwrap_or("-"),
            self.header
                .seed
                .map(|s| s.to_string())
                .unwrap_or_else(|| "-".to_string()),
            self.header.steps,
        );
        for snap in &self.snapshots {
            let _ = writeln!(out, "== step {} ==", snap.step());
            match snap {
                Snapshot::Pps(s) => render_pps(&mut out, s),
                Snapshot::Cxm(s) => render_cxm(&mut out, s),
                Snapshot::Stream(s) => render_stream(&mut out, s),
                Snapshot::Operas(s) => render_operas(&mut out, s),
            }
        }
        match self.terminal {
            Terminal::Completed { steps } => {
                let _ = writeln!(out, "completed after {steps} steps");
            }
            Terminal::Halted { step } => {
                let _ = writeln!(out, "halted at step {step} (nothing applicable)");
            }
        }
        out
    }
}

fn render_memory(memory: &Memory) -> String {
    let mut parts = Vec::new();
    for (k, v) in memory {
        parts.push(format!("{k}={v}"));
    }
    parts.join(", ")
}

fn render_pps(out: &mut String, s: &PpsSnapshot) {
    for cell in &s.cells {
        let _ = writeln!(out, "  {}:{}{}", cell.id, cell.cell_type, cell.contents);
    }
    if s.bonds.is_empty() {
        let _ = writeln!(out, "  bonds: (none)");
    } else {
        let edges: Vec<String> = s.bonds.iter().map(|(a, b)| format!("{a}\u{2014}{b}")).collect();
        let _ = writeln!(out, "  bonds: {}", edges.join(" "));
    }
    let _ = writeln!(out, "  env: {}", s.env);
    for f in &s.fired {
        let src = f.src.map(|s| format!(" <- cell {s}")).unwrap_or_default();
        let _ = writeln!(out, "  fired x{}: cell {} [{}]{}", f.n, f.cell, f.text, src);
    }
}

fn render_cxm(out: &mut String, s: &CxmSnapshot) {
    for m in &s.machines {
        let _ = writeln!(
            out,
            "  {}:{} state={} memory{{{}}}",
            m.id,
            m.name,
            m.state,
            render_memory(&m.memory)
        );
    }
    for c in &s.channels {
        let buf = c
            .buffer
            .as_ref()
            .map(|b| b.to_string())
            .unwrap_or_else(|| "empty".to_string());
        let _ = writeln!(out, "  channel {}: {}\u{2014}{} [{}]", c.name, c.from, c.to, buf);
    }
    for f in &s.fired {
        let output = f
            .output
            .as_ref()
            .map(|o| format!(" -> {o}"))
            .unwrap_or_default();
        let _ = writeln!(out, "  fired: machine {} {}{}", f.machine, f.function, output);
    }
    for i in &s.idle {
        let _ = writeln!(out, "  idle: machine {} ({})", i.machine, i.reason);
    }
}

fn render_stream(out: &mut String, s: &StreamSnapshot) {
    let _ = writeln!(out, "  state={} memory{{{}}}", s.state, render_memory(&s.memory));
    if let Some(input) = &s.input {
        let _ = writeln!(out, "  input: {input}");
    }
    if let Some(output) = &s.output {
        let _ = writeln!(out, "  output: {output}");
    }
}

fn render_operas(out: &mut String, s: &OperasSnapshot) {
    for a in &s.agents {
        let _ = writeln!(
            out,
            "  {}:{} state={} memory{{{}}}",
            a.id,
            a.agent_type,
            a.state,
            render_memory(&a.memory)
        );
    }
    if s.relation.is_empty() {
        let _ = writeln!(out, "  relation: (none)");
    } else {
        let edges: Vec<String> = s
            .relation
            .iter()
            .map(|(a, b)| format!("{a}\u{2014}{b}"))
            .collect();
        let _ = writeln!(out, "  relation: {}", edges.join(" "));
    }
    let _ = writeln!(out, "  env: {}", s.env);
    for f in &s.fired {
        let output = f
            .output
            .as_ref()
            .map(|o| format!(" -> {o}"))
            .unwrap_or_default();
        let _ = writeln!(out, "  fired: agent {} {}{}", f.machine, f.function, output);
    }
    for m in &s.mutations {
        let target = m.target.map(|t| format!(" -> {t}")).unwrap_or_default();
        let _ = writeln!(out, "  mutation: agent {} {}{}", m.agent, m.action, target);
    }
    for w in &s.warnings {
        let _ = writeln!(out, "  warning: {w}");
    }
}
