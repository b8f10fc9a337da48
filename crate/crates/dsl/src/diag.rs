use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

/// A located parse/validation finding with a stable code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: &'static str,
    pub message: String,
    pub line: u32,
    pub col: u32,
}

impl Diagnostic {
    pub fn error(code: &'static str, message: impl Into<String>, line: u32, col: u32) -> Diagnostic {
        Diagnostic {
            severity: Severity::Error,
            code,
            message: message.into(),
            line,
            col,
        }
    }

    pub fn warning(
        code: &'static str,
        message: impl Into<String>,
        line: u32,
        col: u32,
    ) -> Diagnostic {
        Diagnostic {
            severity: Severity::Warning,
            code,
            message: message.into(),
            line,
            col,
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(
            f,
            "{sev}[{}] at {}:{}: {}",
            self.code, self.line, self.col, self.message
        )
    }
}

pub mod codes {
    pub const EMPTY_DOCUMENT: &str = "E-EMPTY-DOCUMENT";
    pub const LEX: &str = "E-LEX";
    pub const PARSE: &str = "E-PARSE";
    pub const TOO_DEEP: &str = "E-TOO-DEEP";
    pub const UNDECLARED_SYMBOL: &str = "E-UNDECLARED-SYMBOL";
    pub const UNDECLARED_TYPE: &str = "E-UNDECLARED-TYPE";
    pub const DUP_DECL: &str = "E-DUP-DECL";
    pub const BAD_INDEX: &str = "E-BAD-INDEX";
    pub const BAD_RULE: &str = "E-BAD-RULE";
    pub const TYPE_MISMATCH: &str = "E-TYPE-MISMATCH";
    pub const UNKNOWN_MACHINE: &str = "E-UNKNOWN-MACHINE";
    pub const BAD_POSITION: &str = "E-BAD-POSITION";
    pub const VALIDATE: &str = "E-VALIDATE";
    pub const IO: &str = "E-IO";
    pub const UNUSED_SYMBOL: &str = "W-UNUSED-SYMBOL";
}
