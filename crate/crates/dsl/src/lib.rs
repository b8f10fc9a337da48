//! The `.opml` model-definition language: one unified grammar with per-kind
//! top-level blocks (`pps`, `xm`, `cxm`, `operas`), a total parser that
//! reports located diagnostics instead of failing, and a canonical printer
//! satisfying `parse(print(doc)) == doc` and `print(parse(print(doc))) ==
//! print(doc)`. The normative grammar lives in `docs/grammar.ebnf`.

use std::collections::BTreeMap;

use operas_core::expr::IoItem;
use operas_core::operas::OperasSystem;
use operas_core::pps::PpsModel;
use operas_core::trace::ModelKind;
use operas_core::xm::{CxmSystem, XMachineDef};

pub mod diag;
mod lexer;
mod parser;
mod printer;

pub use diag::{Diagnostic, Severity};
pub use parser::parse;
pub use printer::print;

/// A standalone machine document: the definition plus an optional input
/// stream for `run`.
#[derive(Debug, Clone, PartialEq)]
pub struct XmDoc {
    pub def: XMachineDef,
    pub stream: Vec<IoItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelBody {
    Pps(PpsModel),
    Xm(XmDoc),
    Cxm(CxmSystem),
    Operas(OperasSystem),
}

/// A parsed, validated document. Structural equality ignores the source map
/// and warnings: positions shift under reformatting, the model does not.
#[derive(Debug, Clone)]
pub struct ModelDocument {
    pub kind: ModelKind,
    pub name: Option<String>,
    pub body: ModelBody,
    pub source_map: BTreeMap<String, (u32, u32)>,
    pub warnings: Vec<Diagnostic>,
}

impl PartialEq for ModelDocument {
    fn eq(&self, other: &ModelDocument) -> bool {
        self.kind == other.kind && self.name == other.name && self.body == other.body
    }
}

/// Builds a document wrapper around a programmatically constructed model,
/// for printing and digesting through the same path as parsed ones.
pub fn document_for(kind: ModelKind, name: Option<&str>, body: ModelBody) -> ModelDocument {
    ModelDocument {
        kind,
        name: name.map(|s| s.to_string()),
        body,
        source_map: BTreeMap::new(),
        warnings: Vec::new(),
    }
}
