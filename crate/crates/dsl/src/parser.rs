use std::collections::{BTreeMap, BTreeSet};

use operas_core::expr::{
    conforms, typecheck, Expr, ExprCaps, IoItem, Memory, TypeExpr, Value,
};
use operas_core::multiset::Multiset;
use operas_core::operas::{
    AgentId, AgentInstance, AgentTypeDef, EnvironmentModel, OperasSystem, ReconfigAction,
    ReconfigRule, Selector,
};
use operas_core::pps::{BondRule, CellType, PpsModel, PpsRule};
use operas_core::symbol::Symbol;
use operas_core::trace::ModelKind;
use operas_core::xm::{
    Channel, ChannelRef, CxmMachine, CxmSystem, GuardedFunction, InputBinding, OutputBinding,
    OutputSpec, Transition, XMachineDef,
};

use crate::diag::{codes, Diagnostic};
use crate::lexer::{lex, Tok, Token};
use crate::{ModelBody, ModelDocument, XmDoc};

const MAX_DEPTH: u32 = 64;

type Pos = (u32, u32);

/// Parse and validate a document. Never panics on any input: failures come
/// back as located diagnostics.
pub fn parse(source: &str) -> Result<ModelDocument, Vec<Diagnostic>> {
    if source.trim().is_empty() {
        return Err(vec![Diagnostic::error(
            codes::EMPTY_DOCUMENT,
            "the document is empty",
            1,
            1,
        )]);
    }
    let tokens = lex(source).map_err(|d| vec![d])?;
    let mut p = Parser {
        tokens,
        pos: 0,
        diags: Vec::new(),
        warnings: Vec::new(),
        source_map: BTreeMap::new(),
        depth: 0,
    };
    match p.document() {
        Ok(doc) if p.diags.is_empty() => Ok(doc),
        Ok(_) => Err(p.diags),
        Err(d) => {
            p.diags.push(d);
            Err(p.diags)
        }
    }
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    diags: Vec<Diagnostic>,
    warnings: Vec<Diagnostic>,
    source_map: BTreeMap<String, Pos>,
    depth: u32,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos.min(self.tokens.len() - 1)]
    }

    fn peek2(&self) -> &Tok {
        &self.tokens[(self.pos + 1).min(self.tokens.len() - 1)].tok
    }

    fn here(&self) -> Pos {
        let t = self.peek();
        (t.line, t.col)
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos.min(self.tokens.len() - 1)].clone();
        if self.pos < self.tokens.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn err_here(&self, message: impl Into<String>) -> Diagnostic {
        let (line, col) = self.here();
        Diagnostic::error(codes::PARSE, message, line, col)
    }

    fn expect(&mut self, want: Tok) -> Result<Token, Diagnostic> {
        if self.peek().tok == want {
            Ok(self.bump())
        } else {
            Err(self.err_here(format!("expected {}, found {}", want, self.peek().tok)))
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<(String, Pos), Diagnostic> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Ident(name) => {
                self.bump();
                Ok((name, (t.line, t.col)))
            }
            other => Err(self.err_here(format!("expected {what}, found {other}"))),
        }
    }

    fn at_kw(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s == kw)
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.at_kw(kw) {
            self.bump();
            return true;
        }
        false
    }

    fn expect_kw(&mut self, kw: &str) -> Result<Pos, Diagnostic> {
        let pos = self.here();
        if self.eat_kw(kw) {
            Ok(pos)
        } else {
            Err(self.err_here(format!("expected '{kw}', found {}", self.peek().tok)))
        }
    }

    fn expect_uint(&mut self, what: &str) -> Result<(i64, Pos), Diagnostic> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Int(n) if n >= 0 => {
                self.bump();
                Ok((n, (t.line, t.col)))
            }
            other => Err(self.err_here(format!("expected {what}, found {other}"))),
        }
    }

    fn error_at(&mut self, code: &'static str, message: impl Into<String>, pos: Pos) {
        self.diags.push(Diagnostic::error(code, message, pos.0, pos.1));
    }

    fn note(&mut self, key: String, pos: Pos) {
        self.source_map.insert(key, pos);
    }

    fn enter(&mut self) -> Result<(), Diagnostic> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            let (line, col) = self.here();
            return Err(Diagnostic::error(
                codes::TOO_DEEP,
                "expression nesting exceeds the supported depth",
                line,
                col,
            ));
        }
        Ok(())
    }

    fn leave(&mut self) {
        self.depth -= 1;
    }

    // -----------------------------------------------------------------
    // Document dispatch
    // -----------------------------------------------------------------

    fn document(&mut self) -> Result<ModelDocument, Diagnostic> {
        let (kw, pos) = self.expect_ident("a document kind (pps, xm, cxm, operas)")?;
        let doc = match kw.as_str() {
            "pps" => self.pps_document()?,
            "xm" => {
                let parts = self.xm_block()?;
                self.lower_xm_document(parts)?
            }
            "cxm" => self.cxm_document()?,
            "operas" => self.operas_document()?,
            other => {
                return Err(Diagnostic::error(
                    codes::PARSE,
                    format!("unknown document kind '{other}' (expected pps, xm, cxm, operas)"),
                    pos.0,
                    pos.1,
                ))
            }
        };
        if self.peek().tok != Tok::Eof {
            return Err(self.err_here(format!(
                "trailing input after the document: {}",
                self.peek().tok
            )));
        }
        Ok(doc)
    }

    // -----------------------------------------------------------------
    // Multisets and values
    // -----------------------------------------------------------------

    /// `{a:2, b}`; a missing count means 1 and counts must be positive.
    fn multiset_literal(&mut self) -> Result<Vec<(String, u64, Pos)>, Diagnostic> {
        self.expect(Tok::LBrace)?;
        let mut entries: Vec<(String, u64, Pos)> = Vec::new();
        if self.peek().tok != Tok::RBrace {
            loop {
                let (name, pos) = self.expect_ident("an object symbol")?;
                let count = if self.peek().tok == Tok::Colon {
                    self.bump();
                    let (n, npos) = self.expect_uint("a count")?;
                    if n < 1 {
                        return Err(Diagnostic::error(
                            codes::PARSE,
                            "multiset counts must be positive",
                            npos.0,
                            npos.1,
                        ));
                    }
                    n as u64
                } else {
                    1
                };
                if entries.iter().any(|(n, _, _)| n == &name) {
                    self.error_at(
                        codes::DUP_DECL,
                        format!("symbol '{name}' repeated in one multiset literal"),
                        pos,
                    );
                }
                entries.push((name, count, pos));
                if self.peek().tok == Tok::Comma {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RBrace)?;
        Ok(entries)
    }

    fn value_literal(&mut self) -> Result<Value, Diagnostic> {
        self.enter()?;
        let out = self.value_literal_inner();
        self.leave();
        out
    }

    fn value_literal_inner(&mut self) -> Result<Value, Diagnostic> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Int(n) => {
                self.bump();
                Ok(Value::Int(n))
            }
            Tok::Dash => {
                self.bump();
                let (n, _) = self.expect_uint("an integer")?;
                Ok(Value::Int(-n))
            }
            Tok::Ident(ref s) if s == "true" => {
                self.bump();
                Ok(Value::Bool(true))
            }
            Tok::Ident(ref s) if s == "false" => {
                self.bump();
                Ok(Value::Bool(false))
            }
            Tok::SymLit(name) => {
                self.bump();
                Ok(Value::Sym(Symbol::new(&name)))
            }
            Tok::LParen => {
                self.bump();
                let mut items = vec![self.value_literal()?];
                while self.peek().tok == Tok::Comma {
                    self.bump();
                    items.push(self.value_literal()?);
                }
                self.expect(Tok::RParen)?;
                if items.len() < 2 {
                    return Err(self.err_here("tuples need at least two components"));
                }
                Ok(Value::Tuple(items))
            }
            Tok::LBracket => {
                self.bump();
                let mut items = Vec::new();
                if self.peek().tok != Tok::RBracket {
                    items.push(self.value_literal()?);
                    while self.peek().tok == Tok::Comma {
                        self.bump();
                        items.push(self.value_literal()?);
                    }
                }
                self.expect(Tok::RBracket)?;
                Ok(Value::Seq(items))
            }
            Tok::LBrace => {
                self.bump();
                let mut items = BTreeSet::new();
                if self.peek().tok != Tok::RBrace {
                    items.insert(self.value_literal()?);
                    while self.peek().tok == Tok::Comma {
                        self.bump();
                        items.insert(self.value_literal()?);
                    }
                }
                self.expect(Tok::RBrace)?;
                Ok(Value::Set(items))
            }
            other => Err(self.err_here(format!("expected a value literal, found {other}"))),
        }
    }

    fn type_expr(&mut self) -> Result<TypeExpr, Diagnostic> {
        self.enter()?;
        let out = self.type_expr_inner();
        self.leave();
        out
    }

    fn type_expr_inner(&mut self) -> Result<TypeExpr, Diagnostic> {
        if self.peek().tok == Tok::LParen {
            self.bump();
            let mut items = vec![self.type_expr()?];
            while self.peek().tok == Tok::Comma {
                self.bump();
                items.push(self.type_expr()?);
            }
            self.expect(Tok::RParen)?;
            if items.len() < 2 {
                return Err(self.err_here("tuple types need at least two components"));
            }
            return Ok(TypeExpr::Tuple(items));
        }
        let (name, pos) = self.expect_ident("a type (int, bool, sym, seq<..>, set<..>)")?;
        match name.as_str() {
            "int" => Ok(TypeExpr::Int),
            "bool" => Ok(TypeExpr::Bool),
            "sym" => Ok(TypeExpr::Sym),
            "seq" | "set" => {
                self.expect(Tok::Lt)?;
                let inner = self.type_expr()?;
                self.expect(Tok::Gt)?;
                Ok(if name == "seq" {
                    TypeExpr::Seq(Box::new(inner))
                } else {
                    TypeExpr::Set(Box::new(inner))
                })
            }
            other => Err(Diagnostic::error(
                codes::PARSE,
                format!("unknown type '{other}'"),
                pos.0,
                pos.1,
            )),
        }
    }

    fn io_item(&mut self) -> Result<IoItem, Diagnostic> {
        let (tag, _) = self.expect_ident("an input/output tag")?;
        let mut args = Vec::new();
        if self.peek().tok == Tok::LParen {
            self.bump();
            if self.peek().tok != Tok::RParen {
                args.push(self.value_literal()?);
                while self.peek().tok == Tok::Comma {
                    self.bump();
                    args.push(self.value_literal()?);
                }
            }
            self.expect(Tok::RParen)?;
        }
        Ok(IoItem {
            tag: Symbol::new(&tag),
            args,
        })
    }

    // -----------------------------------------------------------------
    // Expressions
    // -----------------------------------------------------------------

    fn expr(&mut self) -> Result<Expr, Diagnostic> {
        self.enter()?;
        let out = self.expr_or();
        self.leave();
        out
    }

    fn expr_or(&mut self) -> Result<Expr, Diagnostic> {
        let mut lhs = self.expr_and()?;
        while self.peek().tok == Tok::OrOr {
            self.bump();
            let rhs = self.expr_and()?;
            lhs = lhs.or(rhs);
        }
        Ok(lhs)
    }

    fn expr_and(&mut self) -> Result<Expr, Diagnostic> {
        let mut lhs = self.expr_cmp()?;
        while self.peek().tok == Tok::AndAnd {
            self.bump();
            let rhs = self.expr_cmp()?;
            lhs = lhs.and(rhs);
        }
        Ok(lhs)
    }

    fn expr_cmp(&mut self) -> Result<Expr, Diagnostic> {
        use operas_core::expr::BinOp;
        let lhs = self.expr_add()?;
        let op = match self.peek().tok {
            Tok::EqEq => Some(BinOp::Eq),
            Tok::Ne => Some(BinOp::Ne),
            Tok::Lt => Some(BinOp::Lt),
            Tok::Le => Some(BinOp::Le),
            Tok::Gt => Some(BinOp::Gt),
            Tok::Ge => Some(BinOp::Ge),
            Tok::Ident(ref s) if s == "in" => Some(BinOp::In),
            _ => None,
        };
        if let Some(op) = op {
            self.bump();
            let rhs = self.expr_add()?;
            return Ok(Expr::Binary(op, Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn expr_add(&mut self) -> Result<Expr, Diagnostic> {
        use operas_core::expr::BinOp;
        let mut lhs = self.expr_mul()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinOp::Add,
                Tok::Dash => BinOp::Sub,
                Tok::PlusPlus => BinOp::Append,
                _ => break,
            };
            self.bump();
            let rhs = self.expr_mul()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn expr_mul(&mut self) -> Result<Expr, Diagnostic> {
        use operas_core::expr::BinOp;
        let mut lhs = self.expr_unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                Tok::Percent => BinOp::Mod,
                _ => break,
            };
            self.bump();
            let rhs = self.expr_unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn expr_unary(&mut self) -> Result<Expr, Diagnostic> {
        use operas_core::expr::UnOp;
        match self.peek().tok {
            Tok::Dash => {
                self.bump();
                self.enter()?;
                let inner = self.expr_unary();
                self.leave();
                Ok(Expr::Unary(UnOp::Neg, Box::new(inner?)))
            }
            Tok::Bang => {
                self.bump();
                self.enter()?;
                let inner = self.expr_unary();
                self.leave();
                Ok(Expr::Unary(UnOp::Not, Box::new(inner?)))
            }
            _ => self.expr_postfix(),
        }
    }

    fn expr_postfix(&mut self) -> Result<Expr, Diagnostic> {
        let mut e = self.expr_primary()?;
        loop {
            match (&self.peek().tok, self.peek2()) {
                (Tok::Dot, Tok::Int(_)) => {
                    self.bump();
                    let (n, _) = self.expect_uint("a projection index")?;
                    e = Expr::Proj(Box::new(e), n as usize);
                }
                _ => break,
            }
        }
        Ok(e)
    }

    fn expr_primary(&mut self) -> Result<Expr, Diagnostic> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Int(n) => {
                self.bump();
                Ok(Expr::int(n))
            }
            Tok::SymLit(name) => {
                self.bump();
                Ok(Expr::Lit(Value::Sym(Symbol::new(&name))))
            }
            Tok::Ident(ref s) if s == "true" => {
                self.bump();
                Ok(Expr::truth(true))
            }
            Tok::Ident(ref s) if s == "false" => {
                self.bump();
                Ok(Expr::truth(false))
            }
            Tok::Ident(ref s) if s == "m" => {
                self.bump();
                self.expect(Tok::Dot)?;
                let (field, _) = self.expect_ident("a memory field")?;
                Ok(Expr::Mem(field))
            }
            Tok::Ident(ref s) if s == "input" => {
                self.bump();
                match self.peek().tok {
                    Tok::Dot => {
                        self.bump();
                        let (field, pos) = self.expect_ident("'tag'")?;
                        if field != "tag" {
                            return Err(Diagnostic::error(
                                codes::PARSE,
                                format!("expected 'input.tag', found 'input.{field}'"),
                                pos.0,
                                pos.1,
                            ));
                        }
                        Ok(Expr::InputTag)
                    }
                    Tok::LBracket => {
                        self.bump();
                        let (n, _) = self.expect_uint("a payload index")?;
                        self.expect(Tok::RBracket)?;
                        Ok(Expr::InputArg(n as usize))
                    }
                    _ => Err(self.err_here("expected 'input.tag' or 'input[i]'")),
                }
            }
            Tok::Ident(ref s) if s == "neighbours" => {
                self.bump();
                Ok(Expr::NeighbourCount)
            }
            Tok::Ident(ref s) if s == "env" => {
                self.bump();
                self.expect(Tok::LParen)?;
                let (name, _) = self.expect_ident("an object symbol")?;
                self.expect(Tok::RParen)?;
                Ok(Expr::EnvCount(Symbol::new(&name)))
            }
            Tok::LParen => {
                self.bump();
                let first = self.expr()?;
                if self.peek().tok == Tok::Comma {
                    let mut items = vec![first];
                    while self.peek().tok == Tok::Comma {
                        self.bump();
                        items.push(self.expr()?);
                    }
                    self.expect(Tok::RParen)?;
                    Ok(Expr::Tuple(items))
                } else {
                    self.expect(Tok::RParen)?;
                    Ok(first)
                }
            }
            Tok::LBracket => {
                self.bump();
                let mut items = Vec::new();
                if self.peek().tok != Tok::RBracket {
                    items.push(self.expr()?);
                    while self.peek().tok == Tok::Comma {
                        self.bump();
                        items.push(self.expr()?);
                    }
                }
                self.expect(Tok::RBracket)?;
                Ok(Expr::Seq(items))
            }
            Tok::LBrace => {
                self.bump();
                let mut items = Vec::new();
                if self.peek().tok != Tok::RBrace {
                    items.push(self.expr()?);
                    while self.peek().tok == Tok::Comma {
                        self.bump();
                        items.push(self.expr()?);
                    }
                }
                self.expect(Tok::RBrace)?;
                Ok(Expr::Set(items))
            }
            Tok::Ident(other) => Err(Diagnostic::error(
                codes::PARSE,
                format!(
                    "unknown name '{other}' in expression (symbols are written ':{other}', \
                     memory fields 'm.{other}')"
                ),
                t.line,
                t.col,
            )),
            other => Err(self.err_here(format!("expected an expression, found {other}"))),
        }
    }

    // -----------------------------------------------------------------
    // pps documents
    // -----------------------------------------------------------------

    fn pps_document(&mut self) -> Result<ModelDocument, Diagnostic> {
        let name = match &self.peek().tok {
            Tok::Ident(n) => {
                let n = n.clone();
                self.bump();
                Some(n)
            }
            _ => None,
        };
        self.expect(Tok::LBrace)?;

        let mut alphabet: Vec<(String, Pos)> = Vec::new();
        let mut types: Vec<(String, Pos)> = Vec::new();
        let mut env: Vec<(String, u64, Pos)> = Vec::new();
        let mut cells: Vec<(String, Pos, Vec<(String, u64, Pos)>)> = Vec::new();
        let mut graph: Vec<((i64, Pos), (i64, Pos))> = Vec::new();
        let mut bonds: Vec<(String, Pos, Vec<(String, u64, Pos)>, Vec<(String, u64, Pos)>, String, Pos)> =
            Vec::new();
        let mut rules: Vec<(PpsRuleParts, Pos)> = Vec::new();

        while self.peek().tok != Tok::RBrace {
            let (kw, kwpos) = self.expect_ident("a pps declaration")?;
            match kw.as_str() {
                "alphabet" => {
                    while let Tok::Ident(_) = self.peek().tok {
                        let (n, p) = self.expect_ident("an object symbol")?;
                        alphabet.push((n, p));
                    }
                    self.expect(Tok::Semi)?;
                }
                "types" => {
                    while let Tok::Ident(_) = self.peek().tok {
                        let (n, p) = self.expect_ident("a cell type")?;
                        types.push((n, p));
                    }
                    self.expect(Tok::Semi)?;
                }
                "env" => {
                    if !env.is_empty() {
                        self.error_at(codes::DUP_DECL, "env declared twice", kwpos);
                    }
                    env = self.multiset_literal()?;
                    self.expect(Tok::Semi)?;
                }
                "cell" => {
                    let (t, tpos) = self.expect_ident("a cell type")?;
                    let contents = self.multiset_literal()?;
                    self.expect(Tok::Semi)?;
                    self.note(format!("cell.{}", cells.len() + 1), kwpos);
                    cells.push((t, tpos, contents));
                }
                "graph" => {
                    loop {
                        let a = self.expect_uint("a cell index")?;
                        self.expect(Tok::Dash)?;
                        let b = self.expect_uint("a cell index")?;
                        graph.push((a, b));
                        if self.peek().tok == Tok::Comma {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    self.expect(Tok::Semi)?;
                }
                "bond" => {
                    let (lt, ltpos) = self.expect_ident("a cell type")?;
                    let left = self.multiset_literal()?;
                    self.expect(Tok::DashDash)?;
                    let right = self.multiset_literal()?;
                    let (rt, rtpos) = self.expect_ident("a cell type")?;
                    self.expect(Tok::Semi)?;
                    bonds.push((lt, ltpos, left, right, rt, rtpos));
                }
                "rule" => {
                    let rule = self.pps_rule()?;
                    self.expect(Tok::Semi)?;
                    self.note(format!("rule.{}", rules.len() + 1), kwpos);
                    rules.push((rule, kwpos));
                }
                other => {
                    return Err(Diagnostic::error(
                        codes::PARSE,
                        format!("unknown pps declaration '{other}'"),
                        kwpos.0,
                        kwpos.1,
                    ))
                }
            }
        }
        self.expect(Tok::RBrace)?;

        // Lowering with declaration checks.
        let mut alpha_set: BTreeSet<Symbol> = BTreeSet::new();
        for (n, p) in &alphabet {
            if !alpha_set.insert(Symbol::new(n)) {
                self.error_at(codes::DUP_DECL, format!("symbol '{n}' declared twice"), *p);
            }
        }
        let mut type_set: BTreeSet<CellType> = BTreeSet::new();
        for (n, p) in &types {
            if !type_set.insert(CellType::new(n)) {
                self.error_at(codes::DUP_DECL, format!("cell type '{n}' declared twice"), *p);
            }
        }
        let mut check_sym = |me: &mut Self, name: &str, pos: Pos| -> Symbol {
            if !alpha_set.contains(&Symbol::new(name)) {
                me.error_at(
                    codes::UNDECLARED_SYMBOL,
                    format!("symbol '{name}' is not in the alphabet"),
                    pos,
                );
            }
            Symbol::new(name)
        };
        let check_type = |me: &mut Self, set: &BTreeSet<CellType>, name: &str, pos: Pos| -> CellType {
            if !set.contains(&CellType::new(name)) {
                me.error_at(
                    codes::UNDECLARED_TYPE,
                    format!("cell type '{name}' is not declared"),
                    pos,
                );
            }
            CellType::new(name)
        };

        let lower_ms = |me: &mut Self, entries: &[(String, u64, Pos)]| -> Multiset {
            let mut out = Multiset::new();
            for (n, count, p) in entries {
                if !alpha_set.contains(&Symbol::new(n)) {
                    me.error_at(
                        codes::UNDECLARED_SYMBOL,
                        format!("symbol '{n}' is not in the alphabet"),
                        *p,
                    );
                }
                let _ = out.insert(Symbol::new(n), *count);
            }
            out
        };

        let env_init = lower_ms(self, &env);
        let initial_cells: Vec<(Multiset, CellType)> = cells
            .iter()
            .map(|(t, tpos, contents)| {
                let ms = lower_ms(self, contents);
                let ct = check_type(self, &type_set, t, *tpos);
                (ms, ct)
            })
            .collect();

        let n_cells = initial_cells.len();
        let mut initial_graph: BTreeSet<(usize, usize)> = BTreeSet::new();
        for ((a, apos), (b, bpos)) in &graph {
            let check = |me: &mut Self, v: i64, p: Pos| -> Option<usize> {
                if v < 1 || v as usize > n_cells {
                    me.error_at(
                        codes::BAD_INDEX,
                        format!("cell index {v} out of range 1..={n_cells}"),
                        p,
                    );
                    None
                } else {
                    Some((v - 1) as usize)
                }
            };
            let (ia, ib) = (check(self, *a, *apos), check(self, *b, *bpos));
            if let (Some(ia), Some(ib)) = (ia, ib) {
                if ia == ib {
                    self.error_at(codes::BAD_INDEX, "self-loop edge", *apos);
                } else {
                    initial_graph.insert((ia.min(ib), ia.max(ib)));
                }
            }
            let _ = bpos;
        }

        let bond_rules: Vec<BondRule> = bonds
            .into_iter()
            .map(|(lt, ltpos, left, right, rt, rtpos)| {
                let left_required = lower_ms(self, &left);
                let right_required = lower_ms(self, &right);
                BondRule {
                    left_type: check_type(self, &type_set, &lt, ltpos),
                    left_required,
                    right_required,
                    right_type: check_type(self, &type_set, &rt, rtpos),
                }
            })
            .collect();

        let lowered_rules: Vec<PpsRule> = rules
            .into_iter()
            .map(|(parts, _)| {
                lower_pps_rule(self, parts, &mut check_sym, |me, n, p| {
                    check_type(me, &type_set, n, p)
                })
            })
            .collect();

        let model = PpsModel {
            alphabet: alpha_set,
            cell_types: type_set,
            bond_rules,
            initial_graph,
            env_init,
            initial_cells,
            rules: lowered_rules,
        };
        if self.diags.is_empty() {
            if let Err(e) = model.validate() {
                self.diags
                    .push(Diagnostic::error(codes::VALIDATE, e.to_string(), 1, 1));
            }
        }
        Ok(self.finish(ModelKind::Pps, name, ModelBody::Pps(model)))
    }

    fn pps_rule(&mut self) -> Result<PpsRuleParts, Diagnostic> {
        let (kind, kpos) = self.expect_ident("a rule kind")?;
        match kind.as_str() {
            "transform" => {
                let t = self.expect_ident("a cell type")?;
                self.expect(Tok::Colon)?;
                let consumed = self.expect_ident("an object symbol")?;
                self.expect(Tok::Arrow)?;
                let mut produced = vec![self.expect_ident("an object symbol")?];
                while let Tok::Ident(_) = self.peek().tok {
                    produced.push(self.expect_ident("an object symbol")?);
                }
                Ok(PpsRuleParts::Transform {
                    t,
                    consumed,
                    produced,
                })
            }
            "in" | "enter" => {
                let t = self.expect_ident("a cell type")?;
                self.expect(Tok::Colon)?;
                let moved = self.expect_ident("an object symbol")?;
                let trigger = if self.eat_kw("with") {
                    Some(self.expect_ident("an object symbol")?)
                } else {
                    None
                };
                if kind == "in" {
                    Ok(PpsRuleParts::CommIn { t, moved, trigger })
                } else {
                    Ok(PpsRuleParts::CommEnter { t, moved, trigger })
                }
            }
            "exit" => {
                let t = self.expect_ident("a cell type")?;
                self.expect(Tok::Colon)?;
                let moved = self.expect_ident("an object symbol")?;
                Ok(PpsRuleParts::CommExit { t, moved })
            }
            "differentiate" => {
                let from = self.expect_ident("a cell type")?;
                self.expect(Tok::Arrow)?;
                let to = self.expect_ident("a cell type")?;
                self.expect(Tok::Colon)?;
                let consumed = self.expect_ident("an object symbol")?;
                self.expect(Tok::Arrow)?;
                let produced = self.expect_ident("an object symbol")?;
                Ok(PpsRuleParts::Differentiate {
                    from,
                    to,
                    consumed,
                    produced,
                })
            }
            "divide" => {
                let t = self.expect_ident("a cell type")?;
                self.expect(Tok::Colon)?;
                let consumed = self.expect_ident("an object symbol")?;
                self.expect(Tok::Arrow)?;
                let left = self.expect_ident("an object symbol")?;
                self.expect(Tok::Pipe)?;
                let right = self.expect_ident("an object symbol")?;
                Ok(PpsRuleParts::Divide {
                    t,
                    consumed,
                    left,
                    right,
                })
            }
            "die" => {
                let t = self.expect_ident("a cell type")?;
                self.expect(Tok::Colon)?;
                let consumed = self.expect_ident("an object symbol")?;
                Ok(PpsRuleParts::Die { t, consumed })
            }
            other => Err(Diagnostic::error(
                codes::BAD_RULE,
                format!(
                    "unknown rule kind '{other}' (expected transform, in, enter, exit, \
                     differentiate, divide, die)"
                ),
                kpos.0,
                kpos.1,
            )),
        }
    }

    fn finish(&mut self, kind: ModelKind, name: Option<String>, body: ModelBody) -> ModelDocument {
        ModelDocument {
            kind,
            name,
            body,
            source_map: std::mem::take(&mut self.source_map),
            warnings: std::mem::take(&mut self.warnings),
        }
    }

    // -----------------------------------------------------------------
    // xm blocks (shared by standalone docs, cxm, operas)
    // -----------------------------------------------------------------

    fn xm_block(&mut self) -> Result<XmParts, Diagnostic> {
        let (name, npos) = self.expect_ident("a machine name")?;
        self.note(format!("machine.{name}"), npos);
        self.expect(Tok::LBrace)?;
        let mut parts = XmParts {
            name,
            pos: npos,
            inputs: Vec::new(),
            outputs: Vec::new(),
            states: Vec::new(),
            init: None,
            memory: Vec::new(),
            functions: Vec::new(),
            transitions: Vec::new(),
            stream: None,
        };
        while self.peek().tok != Tok::RBrace {
            let (kw, kwpos) = self.expect_ident("a machine declaration")?;
            match kw.as_str() {
                "inputs" => {
                    while let Tok::Ident(_) = self.peek().tok {
                        parts.inputs.push(self.expect_ident("an input tag")?);
                    }
                    self.expect(Tok::Semi)?;
                }
                "outputs" => {
                    while let Tok::Ident(_) = self.peek().tok {
                        parts.outputs.push(self.expect_ident("an output tag")?);
                    }
                    self.expect(Tok::Semi)?;
                }
                "states" => {
                    while let Tok::Ident(_) = self.peek().tok {
                        parts.states.push(self.expect_ident("a state")?);
                    }
                    self.expect(Tok::Semi)?;
                }
                "init" => {
                    let s = self.expect_ident("a state")?;
                    self.expect(Tok::Semi)?;
                    if parts.init.is_some() {
                        self.error_at(codes::DUP_DECL, "init declared twice", kwpos);
                    }
                    parts.init = Some(s);
                }
                "memory" => {
                    self.expect(Tok::LBrace)?;
                    while self.peek().tok != Tok::RBrace {
                        let (field, fpos) = self.expect_ident("a memory field")?;
                        self.expect(Tok::Colon)?;
                        let ty = self.type_expr()?;
                        self.expect(Tok::Assign)?;
                        let init = self.value_literal()?;
                        self.expect(Tok::Semi)?;
                        parts.memory.push((field, ty, init, fpos));
                    }
                    self.expect(Tok::RBrace)?;
                }
                "fn" => {
                    let f = self.fn_decl()?;
                    parts.functions.push(f);
                }
                "trans" => {
                    let from = self.expect_ident("a state")?;
                    self.expect(Tok::Arrow)?;
                    let to = self.expect_ident("a state")?;
                    self.expect_kw("on")?;
                    let function = self.expect_ident("a function name")?;
                    self.expect(Tok::Semi)?;
                    parts.transitions.push((from.0, function.0, to.0, kwpos));
                }
                "stream" => {
                    let mut items = Vec::new();
                    while let Tok::Ident(_) = self.peek().tok {
                        items.push((self.io_item()?, self.here()));
                    }
                    self.expect(Tok::Semi)?;
                    if parts.stream.is_some() {
                        self.error_at(codes::DUP_DECL, "stream declared twice", kwpos);
                    }
                    parts.stream = Some(items);
                }
                other => {
                    return Err(Diagnostic::error(
                        codes::PARSE,
                        format!("unknown machine declaration '{other}'"),
                        kwpos.0,
                        kwpos.1,
                    ))
                }
            }
        }
        self.expect(Tok::RBrace)?;
        Ok(parts)
    }

    fn fn_decl(&mut self) -> Result<FnParts, Diagnostic> {
        let (name, fpos) = self.expect_ident("a function name")?;
        self.note(format!("fn.{name}"), fpos);
        let mut input_binding = InputBinding::Stream;
        let mut output_binding = OutputBinding::Stream;
        loop {
            if self.at_kw("from") {
                self.bump();
                input_binding = InputBinding::Channel(self.channel_ref(true)?);
            } else if self.at_kw("to") {
                self.bump();
                output_binding = OutputBinding::Channel(self.channel_ref(false)?);
            } else {
                break;
            }
        }
        self.expect_kw("when")?;
        let guard = self.expr()?;
        self.expect(Tok::LBrace)?;
        self.expect_kw("output")?;
        let output = if self.at_kw("input") {
            self.bump();
            OutputSpec::Echo
        } else {
            let (tag, _) = self.expect_ident("an output tag")?;
            let mut args = Vec::new();
            if self.peek().tok == Tok::LParen {
                self.bump();
                if self.peek().tok != Tok::RParen {
                    args.push(self.expr()?);
                    while self.peek().tok == Tok::Comma {
                        self.bump();
                        args.push(self.expr()?);
                    }
                }
                self.expect(Tok::RParen)?;
            }
            OutputSpec::Item {
                tag: Symbol::new(&tag),
                args,
            }
        };
        self.expect(Tok::Semi)?;
        let mut updates = Vec::new();
        while self.at_kw("set") {
            self.bump();
            let (m, mpos) = self.expect_ident("'m'")?;
            if m != "m" {
                return Err(Diagnostic::error(
                    codes::PARSE,
                    "memory updates are written 'set m.field = expr;'",
                    mpos.0,
                    mpos.1,
                ));
            }
            self.expect(Tok::Dot)?;
            let (field, _) = self.expect_ident("a memory field")?;
            self.expect(Tok::Assign)?;
            let e = self.expr()?;
            self.expect(Tok::Semi)?;
            updates.push((field, e));
        }
        self.expect(Tok::RBrace)?;
        Ok(FnParts {
            name,
            pos: fpos,
            input_binding,
            output_binding,
            guard,
            output,
            updates,
        })
    }

    /// `stream`, `channel NAME`, or `peer`; the stream keyword restores the
    /// default binding.
    fn channel_ref(&mut self, _input: bool) -> Result<ChannelRef, Diagnostic> {
        if self.eat_kw("peer") {
            return Ok(ChannelRef::Peer);
        }
        if self.eat_kw("channel") {
            let (name, _) = self.expect_ident("a channel name")?;
            return Ok(ChannelRef::Named(Symbol::new(&name)));
        }
        Err(self.err_here("expected 'peer' or 'channel NAME' after from/to"))
    }

    fn lower_xm_def(&mut self, parts: &XmParts) -> XMachineDef {
        let mut states = BTreeSet::new();
        for (s, p) in &parts.states {
            if !states.insert(Symbol::new(s)) {
                self.error_at(codes::DUP_DECL, format!("state '{s}' declared twice"), *p);
            }
        }
        let inputs: BTreeSet<Symbol> = parts.inputs.iter().map(|(s, _)| Symbol::new(s)).collect();
        let outputs: BTreeSet<Symbol> =
            parts.outputs.iter().map(|(s, _)| Symbol::new(s)).collect();
        let mut schema: BTreeMap<String, TypeExpr> = BTreeMap::new();
        let mut memory: Memory = Memory::new();
        for (field, ty, init, p) in &parts.memory {
            if schema.insert(field.clone(), ty.clone()).is_some() {
                self.error_at(
                    codes::DUP_DECL,
                    format!("memory field '{field}' declared twice"),
                    *p,
                );
            }
            if !conforms(init, ty) {
                self.error_at(
                    codes::TYPE_MISMATCH,
                    format!("initial value of '{field}' does not have type {ty}"),
                    *p,
                );
            }
            memory.insert(field.clone(), init.clone());
        }
        let initial_state = match &parts.init {
            Some((s, p)) => {
                if !states.contains(&Symbol::new(s)) {
                    self.error_at(
                        codes::VALIDATE,
                        format!("initial state '{s}' is not declared"),
                        *p,
                    );
                }
                Symbol::new(s)
            }
            None => {
                self.error_at(
                    codes::VALIDATE,
                    format!("machine '{}' has no init declaration", parts.name),
                    parts.pos,
                );
                Symbol::new("?")
            }
        };
        let mut fn_names = BTreeSet::new();
        let mut functions = Vec::new();
        for f in &parts.functions {
            if !fn_names.insert(f.name.clone()) {
                self.error_at(
                    codes::DUP_DECL,
                    format!("function '{}' declared twice", f.name),
                    f.pos,
                );
            }
            match typecheck(&f.guard, &schema, ExprCaps::machine()) {
                Ok(TypeExpr::Bool) | Ok(TypeExpr::Unknown) => {}
                Ok(other) => self.error_at(
                    codes::TYPE_MISMATCH,
                    format!("guard of '{}' has type {other}, expected bool", f.name),
                    f.pos,
                ),
                Err(e) => self.error_at(
                    codes::TYPE_MISMATCH,
                    format!("guard of '{}': {e}", f.name),
                    f.pos,
                ),
            }
            match &f.output {
                OutputSpec::Item { tag, args } => {
                    if !outputs.contains(tag) {
                        self.error_at(
                            codes::UNDECLARED_SYMBOL,
                            format!("output tag '{tag}' of '{}' is not declared", f.name),
                            f.pos,
                        );
                    }
                    for a in args {
                        if let Err(e) = typecheck(a, &schema, ExprCaps::machine()) {
                            self.error_at(
                                codes::TYPE_MISMATCH,
                                format!("output payload of '{}': {e}", f.name),
                                f.pos,
                            );
                        }
                    }
                }
                OutputSpec::Echo => {
                    if !inputs.is_subset(&outputs) {
                        self.error_at(
                            codes::TYPE_MISMATCH,
                            format!(
                                "'{}' echoes its input but the input alphabet is not \
                                 contained in the output alphabet",
                                f.name
                            ),
                            f.pos,
                        );
                    }
                }
            }
            for (field, e) in &f.updates {
                match schema.get(field) {
                    None => self.error_at(
                        codes::VALIDATE,
                        format!("'{}' updates unknown memory field '{field}'", f.name),
                        f.pos,
                    ),
                    Some(field_ty) => match typecheck(e, &schema, ExprCaps::machine()) {
                        Ok(got) => {
                            let ok = matches!(got, TypeExpr::Unknown)
                                || matches!(field_ty, TypeExpr::Unknown)
                                || got == *field_ty;
                            if !ok {
                                self.error_at(
                                    codes::TYPE_MISMATCH,
                                    format!(
                                        "'{}' update of '{field}' has type {got}, field is {field_ty}",
                                        f.name
                                    ),
                                    f.pos,
                                );
                            }
                        }
                        Err(e) => self.error_at(
                            codes::TYPE_MISMATCH,
                            format!("update of '{field}': {e}"),
                            f.pos,
                        ),
                    },
                }
            }
            functions.push(GuardedFunction {
                name: Symbol::new(&f.name),
                guard: f.guard.clone(),
                output: f.output.clone(),
                updates: f.updates.clone(),
                input_binding: f.input_binding.clone(),
                output_binding: f.output_binding.clone(),
            });
        }
        let mut arrows = BTreeSet::new();
        let mut transitions = Vec::new();
        for (from, function, to, p) in &parts.transitions {
            for s in [from, to] {
                if !states.contains(&Symbol::new(s)) {
                    self.error_at(
                        codes::VALIDATE,
                        format!("transition references undeclared state '{s}'"),
                        *p,
                    );
                }
            }
            if !fn_names.contains(function) {
                self.error_at(
                    codes::VALIDATE,
                    format!("transition references undeclared function '{function}'"),
                    *p,
                );
            }
            if !arrows.insert((from.clone(), function.clone())) {
                self.error_at(
                    codes::DUP_DECL,
                    format!("duplicate transition from '{from}' on '{function}'"),
                    *p,
                );
            }
            transitions.push(Transition {
                from: Symbol::new(from),
                function: Symbol::new(function),
                to: Symbol::new(to),
            });
        }
        XMachineDef {
            name: Symbol::new(&parts.name),
            input_alphabet: inputs,
            output_alphabet: outputs,
            states,
            memory_schema: schema,
            functions,
            transitions,
            initial_state,
            initial_memory: memory,
        }
    }

    fn lower_xm_document(&mut self, parts: XmParts) -> Result<ModelDocument, Diagnostic> {
        let def = self.lower_xm_def(&parts);
        let mut stream = Vec::new();
        if let Some(items) = &parts.stream {
            for (item, pos) in items {
                if !def.input_alphabet.contains(&item.tag) {
                    self.error_at(
                        codes::UNDECLARED_SYMBOL,
                        format!("stream item tag '{}' is not an input", item.tag),
                        *pos,
                    );
                }
                stream.push(item.clone());
            }
        }
        for f in &parts.functions {
            let channelish = !matches!(f.input_binding, InputBinding::Stream)
                || !matches!(f.output_binding, OutputBinding::Stream);
            if channelish {
                self.error_at(
                    codes::VALIDATE,
                    format!(
                        "standalone machine '{}' cannot use channel bindings (function '{}')",
                        parts.name, f.name
                    ),
                    f.pos,
                );
            }
        }
        if self.diags.is_empty() {
            if let Err(e) = def.validate() {
                self.diags
                    .push(Diagnostic::error(codes::VALIDATE, e.to_string(), 1, 1));
            }
        }
        let name = parts.name.clone();
        Ok(self.finish(
            ModelKind::Xm,
            Some(name),
            ModelBody::Xm(XmDoc { def, stream }),
        ))
    }

    // -----------------------------------------------------------------
    // cxm documents
    // -----------------------------------------------------------------

    fn cxm_document(&mut self) -> Result<ModelDocument, Diagnostic> {
        let (name, _) = self.expect_ident("a system name")?;
        self.expect(Tok::LBrace)?;
        let mut defs: Vec<XmParts> = Vec::new();
        let mut machines: Vec<(String, Pos, String, Pos, Vec<(String, Value, Pos)>)> = Vec::new();
        let mut channels: Vec<(String, Pos, String, Pos, String, Pos)> = Vec::new();
        let mut streams: Vec<(String, Pos, Vec<(IoItem, Pos)>)> = Vec::new();

        while self.peek().tok != Tok::RBrace {
            let (kw, kwpos) = self.expect_ident("a cxm declaration")?;
            match kw.as_str() {
                "xm" => defs.push(self.xm_block()?),
                "machine" => {
                    let (inst, ipos) = self.expect_ident("an instance name")?;
                    self.expect(Tok::Colon)?;
                    let (def, dpos) = self.expect_ident("a machine name")?;
                    let overrides = self.override_block()?;
                    machines.push((inst, ipos, def, dpos, overrides));
                }
                "channel" => {
                    let (cname, cpos) = self.expect_ident("a channel name")?;
                    self.expect(Tok::Colon)?;
                    let (from, fpos) = self.expect_ident("an instance name")?;
                    self.expect(Tok::Arrow)?;
                    let (to, tpos) = self.expect_ident("an instance name")?;
                    self.expect(Tok::Semi)?;
                    channels.push((cname, cpos, from, fpos, to, tpos));
                }
                "stream" => {
                    let (inst, ipos) = self.expect_ident("an instance name")?;
                    self.expect(Tok::Colon)?;
                    let mut items = Vec::new();
                    while let Tok::Ident(_) = self.peek().tok {
                        items.push((self.io_item()?, self.here()));
                    }
                    self.expect(Tok::Semi)?;
                    streams.push((inst, ipos, items));
                }
                other => {
                    return Err(Diagnostic::error(
                        codes::PARSE,
                        format!("unknown cxm declaration '{other}'"),
                        kwpos.0,
                        kwpos.1,
                    ))
                }
            }
        }
        self.expect(Tok::RBrace)?;

        let mut def_map: BTreeMap<String, XMachineDef> = BTreeMap::new();
        for parts in &defs {
            let lowered = self.lower_xm_def(parts);
            if def_map.insert(parts.name.clone(), lowered).is_some() {
                self.error_at(
                    codes::DUP_DECL,
                    format!("machine '{}' defined twice", parts.name),
                    parts.pos,
                );
            }
        }

        let mut instances: Vec<CxmMachine> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for (inst, ipos, def_name, dpos, overrides) in machines {
            let Some(def) = def_map.get(&def_name) else {
                self.error_at(
                    codes::UNKNOWN_MACHINE,
                    format!("machine '{def_name}' is not defined"),
                    dpos,
                );
                continue;
            };
            if index.contains_key(&inst) {
                self.error_at(
                    codes::DUP_DECL,
                    format!("instance '{inst}' declared twice"),
                    ipos,
                );
                continue;
            }
            let mut machine = CxmMachine::fresh(&inst, def.clone(), Vec::new());
            self.apply_overrides(&mut machine.memory, &machine.def.memory_schema, &overrides);
            index.insert(inst, instances.len());
            instances.push(machine);
        }
        for (inst, ipos, items) in streams {
            let Some(&i) = index.get(&inst) else {
                self.error_at(
                    codes::UNKNOWN_MACHINE,
                    format!("stream targets unknown instance '{inst}'"),
                    ipos,
                );
                continue;
            };
            for (item, pos) in items {
                if !instances[i].def.input_alphabet.contains(&item.tag) {
                    self.error_at(
                        codes::UNDECLARED_SYMBOL,
                        format!("stream item tag '{}' is not an input of '{inst}'", item.tag),
                        pos,
                    );
                }
                instances[i].stream.push(item);
            }
        }
        let mut lowered_channels = Vec::new();
        let mut channel_names = BTreeSet::new();
        for (cname, cpos, from, fpos, to, tpos) in channels {
            if !channel_names.insert(cname.clone()) {
                self.error_at(
                    codes::DUP_DECL,
                    format!("channel '{cname}' declared twice"),
                    cpos,
                );
            }
            let from_i = index.get(&from).copied();
            if from_i.is_none() {
                self.error_at(
                    codes::UNKNOWN_MACHINE,
                    format!("channel endpoint '{from}' is not an instance"),
                    fpos,
                );
            }
            let to_i = index.get(&to).copied();
            if to_i.is_none() {
                self.error_at(
                    codes::UNKNOWN_MACHINE,
                    format!("channel endpoint '{to}' is not an instance"),
                    tpos,
                );
            }
            if let (Some(s), Some(r)) = (from_i, to_i) {
                lowered_channels.push(Channel {
                    name: Symbol::new(&cname),
                    sender: s,
                    receiver: r,
                    buffer: None,
                });
            }
        }
        let system = CxmSystem {
            machines: instances,
            channels: lowered_channels,
        };
        if self.diags.is_empty() {
            if let Err(e) = system.validate() {
                self.diags
                    .push(Diagnostic::error(codes::VALIDATE, e.to_string(), 1, 1));
            }
        }
        Ok(self.finish(ModelKind::Cxm, Some(name), ModelBody::Cxm(system)))
    }

    fn override_block(&mut self) -> Result<Vec<(String, Value, Pos)>, Diagnostic> {
        let mut out = Vec::new();
        if self.peek().tok == Tok::LBrace {
            self.bump();
            while self.peek().tok != Tok::RBrace {
                let (field, fpos) = self.expect_ident("a memory field")?;
                self.expect(Tok::Assign)?;
                let v = self.value_literal()?;
                self.expect(Tok::Semi)?;
                out.push((field, v, fpos));
            }
            self.expect(Tok::RBrace)?;
        } else {
            self.expect(Tok::Semi)?;
        }
        Ok(out)
    }

    fn apply_overrides(
        &mut self,
        memory: &mut Memory,
        schema: &BTreeMap<String, TypeExpr>,
        overrides: &[(String, Value, Pos)],
    ) {
        for (field, value, pos) in overrides {
            match schema.get(field) {
                None => self.error_at(
                    codes::VALIDATE,
                    format!("override targets unknown memory field '{field}'"),
                    *pos,
                ),
                Some(ty) if !conforms(value, ty) => self.error_at(
                    codes::TYPE_MISMATCH,
                    format!("override of '{field}' does not have type {ty}"),
                    *pos,
                ),
                Some(_) => {
                    memory.insert(field.clone(), value.clone());
                }
            }
        }
    }

    // -----------------------------------------------------------------
    // operas documents
    // -----------------------------------------------------------------

    fn operas_document(&mut self) -> Result<ModelDocument, Diagnostic> {
        let (name, _) = self.expect_ident("a system name")?;
        self.expect(Tok::LBrace)?;
        let mut grid: Option<(i64, i64, Pos)> = None;
        let mut places: Vec<(i64, i64, Vec<(String, u64, Pos)>, Pos)> = Vec::new();
        let mut globals: Vec<(String, u64, Pos)> = Vec::new();
        let mut defs: Vec<XmParts> = Vec::new();
        let mut type_blocks: Vec<TypeParts> = Vec::new();
        let mut agent_decls: Vec<(String, Pos, Vec<(String, Value, Pos)>)> = Vec::new();
        let mut relation_edges: Vec<((i64, Pos), (i64, Pos))> = Vec::new();
        let mut global_rules: Vec<(Expr, ActionParts, Pos)> = Vec::new();

        while self.peek().tok != Tok::RBrace {
            let (kw, kwpos) = self.expect_ident("an operas declaration")?;
            match kw.as_str() {
                "grid" => {
                    let (w, _) = self.expect_uint("a width")?;
                    let (h, _) = self.expect_uint("a height")?;
                    self.expect(Tok::Semi)?;
                    if grid.is_some() {
                        self.error_at(codes::DUP_DECL, "grid declared twice", kwpos);
                    }
                    grid = Some((w, h, kwpos));
                }
                "place" => {
                    let (x, _) = self.expect_uint("an x coordinate")?;
                    let (y, _) = self.expect_uint("a y coordinate")?;
                    let ms = self.multiset_literal()?;
                    self.expect(Tok::Semi)?;
                    places.push((x, y, ms, kwpos));
                }
                "global" => {
                    if !globals.is_empty() {
                        self.error_at(codes::DUP_DECL, "global declared twice", kwpos);
                    }
                    globals = self.multiset_literal()?;
                    self.expect(Tok::Semi)?;
                }
                "xm" => defs.push(self.xm_block()?),
                "type" => {
                    let t = self.type_block()?;
                    type_blocks.push(t);
                }
                "agent" => {
                    let (t, tpos) = self.expect_ident("an agent type")?;
                    let overrides = self.override_block()?;
                    self.note(format!("agent.{}", agent_decls.len() + 1), kwpos);
                    agent_decls.push((t, tpos, overrides));
                }
                "relation" => {
                    loop {
                        let a = self.expect_uint("an agent index")?;
                        self.expect(Tok::Dash)?;
                        let b = self.expect_uint("an agent index")?;
                        relation_edges.push((a, b));
                        if self.peek().tok == Tok::Comma {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    self.expect(Tok::Semi)?;
                }
                "mut" => {
                    let (cond, action) = self.mut_rule()?;
                    global_rules.push((cond, action, kwpos));
                }
                other => {
                    return Err(Diagnostic::error(
                        codes::PARSE,
                        format!("unknown operas declaration '{other}'"),
                        kwpos.0,
                        kwpos.1,
                    ))
                }
            }
        }
        self.expect(Tok::RBrace)?;

        let (width, height) = match grid {
            Some((w, h, pos)) => {
                if w < 1 || h < 1 {
                    self.error_at(codes::VALIDATE, "grid must be at least 1x1", pos);
                }
                (w.max(1) as u32, h.max(1) as u32)
            }
            None => {
                self.error_at(
                    codes::VALIDATE,
                    "operas documents need a 'grid W H;' declaration",
                    (1, 1),
                );
                (1, 1)
            }
        };
        let mut environment = EnvironmentModel::empty(width, height);
        for (n, count, p) in &globals {
            let _ = p;
            let _ = environment.globals.insert(Symbol::new(n), *count);
        }
        for (x, y, entries, pos) in &places {
            if !environment.in_bounds(*x, *y) {
                self.error_at(
                    codes::BAD_POSITION,
                    format!("place ({x}, {y}) is outside the {width}x{height} grid"),
                    *pos,
                );
                continue;
            }
            for (n, count, _) in entries {
                let _ = environment.at_mut(*x, *y).insert(Symbol::new(n), *count);
            }
        }

        let mut def_map: BTreeMap<String, XMachineDef> = BTreeMap::new();
        for parts in &defs {
            let lowered = self.lower_xm_def(parts);
            if def_map.insert(parts.name.clone(), lowered).is_some() {
                self.error_at(
                    codes::DUP_DECL,
                    format!("machine '{}' defined twice", parts.name),
                    parts.pos,
                );
            }
        }

        let mut types: BTreeMap<Symbol, AgentTypeDef> = BTreeMap::new();
        for t in &type_blocks {
            let Some(behaviour) = def_map.get(&t.behaviour.0) else {
                self.error_at(
                    codes::UNKNOWN_MACHINE,
                    format!("behaviour machine '{}' is not defined", t.behaviour.0),
                    t.behaviour.1,
                );
                continue;
            };
            let schema = behaviour.memory_schema.clone();
            let mutation_rules = t
                .muts
                .iter()
                .map(|(cond, action, pos)| {
                    self.lower_mut_rule(cond, action, *pos, &schema)
                })
                .collect();
            let tdef = AgentTypeDef {
                behaviour: behaviour.clone(),
                percepts: t.percepts.iter().map(|(s, _)| Symbol::new(s)).collect(),
                mutation_rules,
            };
            if types.insert(Symbol::new(&t.name), tdef).is_some() {
                self.error_at(
                    codes::DUP_DECL,
                    format!("agent type '{}' declared twice", t.name),
                    t.pos,
                );
            }
        }

        let mut agents: BTreeMap<AgentId, AgentInstance> = BTreeMap::new();
        for (i, (tname, tpos, overrides)) in agent_decls.iter().enumerate() {
            let Some(tdef) = types.get(&Symbol::new(tname)) else {
                self.error_at(
                    codes::UNDECLARED_TYPE,
                    format!("agent type '{tname}' is not declared"),
                    *tpos,
                );
                continue;
            };
            let mut memory = tdef.behaviour.initial_memory.clone();
            let schema = tdef.behaviour.memory_schema.clone();
            self.apply_overrides(&mut memory, &schema, overrides);
            if let Some(pos_value) = memory.get("pos") {
                if let Ok((x, y)) = pos_value.as_pos() {
                    if !environment.in_bounds(x, y) {
                        self.error_at(
                            codes::BAD_POSITION,
                            format!("agent {} at ({x}, {y}) is outside the grid", i + 1),
                            *tpos,
                        );
                    }
                }
            }
            let id = AgentId(i as u64);
            agents.insert(
                id,
                AgentInstance {
                    id,
                    agent_type: Symbol::new(tname),
                    state: tdef.behaviour.initial_state.clone(),
                    memory,
                },
            );
        }

        let n_agents = agent_decls.len();
        let mut relation: BTreeSet<(AgentId, AgentId)> = BTreeSet::new();
        for ((a, apos), (b, bpos)) in &relation_edges {
            let check = |me: &mut Self, v: i64, p: Pos| -> Option<u64> {
                if v < 1 || v as usize > n_agents {
                    me.error_at(
                        codes::BAD_INDEX,
                        format!("agent index {v} out of range 1..={n_agents}"),
                        p,
                    );
                    None
                } else {
                    Some((v - 1) as u64)
                }
            };
            let (ia, ib) = (check(self, *a, *apos), check(self, *b, *bpos));
            if let (Some(ia), Some(ib)) = (ia, ib) {
                if ia == ib {
                    self.error_at(codes::BAD_INDEX, "self-pair in relation", *apos);
                } else {
                    relation.insert((AgentId(ia.min(ib)), AgentId(ia.max(ib))));
                }
            }
        }

        // Global rule conditions must typecheck against every type's schema.
        let reconfig_rules: Vec<ReconfigRule> = global_rules
            .iter()
            .map(|(cond, action, pos)| {
                let schemas: Vec<BTreeMap<String, TypeExpr>> = types
                    .values()
                    .map(|t| t.behaviour.memory_schema.clone())
                    .collect();
                for schema in &schemas {
                    match typecheck(cond, schema, ExprCaps::reconfig()) {
                        Ok(TypeExpr::Bool) | Ok(TypeExpr::Unknown) => {}
                        Ok(other) => self.error_at(
                            codes::TYPE_MISMATCH,
                            format!("global rule condition has type {other}, expected bool"),
                            *pos,
                        ),
                        Err(e) => self.error_at(
                            codes::TYPE_MISMATCH,
                            format!("global rule condition: {e}"),
                            *pos,
                        ),
                    }
                }
                let schema = schemas.first().cloned().unwrap_or_default();
                self.lower_mut_rule(cond, action, *pos, &schema)
            })
            .collect();

        let system = OperasSystem {
            types,
            reconfig_rules,
            environment,
            relation,
            agents,
            buffers: BTreeMap::new(),
            next_agent_id: n_agents as u64,
        };
        if self.diags.is_empty() {
            if let Err(e) = system.validate() {
                self.diags
                    .push(Diagnostic::error(codes::VALIDATE, e.to_string(), 1, 1));
            }
        }
        Ok(self.finish(ModelKind::Operas, Some(name), ModelBody::Operas(system)))
    }

    fn type_block(&mut self) -> Result<TypeParts, Diagnostic> {
        let (name, pos) = self.expect_ident("an agent type name")?;
        self.note(format!("type.{name}"), pos);
        self.expect(Tok::LBrace)?;
        let mut behaviour: Option<(String, Pos)> = None;
        let mut percepts: Vec<(String, Pos)> = Vec::new();
        let mut muts: Vec<(Expr, ActionParts, Pos)> = Vec::new();
        while self.peek().tok != Tok::RBrace {
            let (kw, kwpos) = self.expect_ident("a type declaration")?;
            match kw.as_str() {
                "behaviour" => {
                    let b = self.expect_ident("a machine name")?;
                    self.expect(Tok::Semi)?;
                    if behaviour.is_some() {
                        self.error_at(codes::DUP_DECL, "behaviour declared twice", kwpos);
                    }
                    behaviour = Some(b);
                }
                "percepts" => {
                    while let Tok::Ident(_) = self.peek().tok {
                        percepts.push(self.expect_ident("an object symbol")?);
                    }
                    self.expect(Tok::Semi)?;
                }
                "mut" => {
                    let (cond, action) = self.mut_rule()?;
                    muts.push((cond, action, kwpos));
                }
                other => {
                    return Err(Diagnostic::error(
                        codes::PARSE,
                        format!("unknown type declaration '{other}'"),
                        kwpos.0,
                        kwpos.1,
                    ))
                }
            }
        }
        self.expect(Tok::RBrace)?;
        let behaviour = match behaviour {
            Some(b) => b,
            None => {
                self.error_at(
                    codes::VALIDATE,
                    format!("agent type '{name}' has no behaviour declaration"),
                    pos,
                );
                ("?".to_string(), pos)
            }
        };
        Ok(TypeParts {
            name,
            pos,
            behaviour,
            percepts,
            muts,
        })
    }

    fn mut_rule(&mut self) -> Result<(Expr, ActionParts), Diagnostic> {
        self.expect_kw("when")?;
        let cond = self.expr()?;
        self.expect(Tok::FatArrow)?;
        let action = self.action()?;
        self.expect(Tok::Semi)?;
        Ok((cond, action))
    }

    fn action(&mut self) -> Result<ActionParts, Diagnostic> {
        let (kw, kwpos) = self.expect_ident("an action (add, remove, link, unlink)")?;
        match kw.as_str() {
            "add" => {
                let (t, _) = self.expect_ident("an agent type")?;
                let mut init = Vec::new();
                if self.peek().tok == Tok::LBrace {
                    self.bump();
                    while self.peek().tok != Tok::RBrace {
                        let (field, _) = self.expect_ident("a memory field")?;
                        self.expect(Tok::Assign)?;
                        let e = self.expr()?;
                        self.expect(Tok::Semi)?;
                        init.push((field, e));
                    }
                    self.expect(Tok::RBrace)?;
                }
                Ok(ActionParts::Add { t, init })
            }
            "remove" => Ok(ActionParts::Remove(self.selector()?)),
            "link" => Ok(ActionParts::Link(self.selector()?)),
            "unlink" => Ok(ActionParts::Unlink(self.selector()?)),
            other => Err(Diagnostic::error(
                codes::PARSE,
                format!("unknown action '{other}' (expected add, remove, link, unlink)"),
                kwpos.0,
                kwpos.1,
            )),
        }
    }

    fn selector(&mut self) -> Result<Selector, Diagnostic> {
        let (kw, kwpos) = self.expect_ident("a selector (self, nearest, unique TYPE)")?;
        match kw.as_str() {
            "self" => Ok(Selector::This),
            "nearest" => Ok(Selector::Nearest),
            "unique" => {
                let (t, _) = self.expect_ident("an agent type")?;
                Ok(Selector::UniqueOfType(Symbol::new(&t)))
            }
            other => Err(Diagnostic::error(
                codes::PARSE,
                format!("unknown selector '{other}'"),
                kwpos.0,
                kwpos.1,
            )),
        }
    }

    fn lower_mut_rule(
        &mut self,
        cond: &Expr,
        action: &ActionParts,
        pos: Pos,
        schema: &BTreeMap<String, TypeExpr>,
    ) -> ReconfigRule {
        match typecheck(cond, schema, ExprCaps::reconfig()) {
            Ok(TypeExpr::Bool) | Ok(TypeExpr::Unknown) => {}
            Ok(other) => self.error_at(
                codes::TYPE_MISMATCH,
                format!("rule condition has type {other}, expected bool"),
                pos,
            ),
            Err(e) => self.error_at(
                codes::TYPE_MISMATCH,
                format!("rule condition: {e}"),
                pos,
            ),
        }
        let lowered_action = match action {
            ActionParts::Add { t, init } => {
                for (_, e) in init {
                    if let Err(err) = typecheck(e, schema, ExprCaps::reconfig()) {
                        self.error_at(
                            codes::TYPE_MISMATCH,
                            format!("initializer: {err}"),
                            pos,
                        );
                    }
                }
                ReconfigAction::AddAgent {
                    agent_type: Symbol::new(t),
                    init: init.clone(),
                }
            }
            ActionParts::Remove(sel) => ReconfigAction::RemoveAgent(sel.clone()),
            ActionParts::Link(sel) => ReconfigAction::AddChannel(sel.clone()),
            ActionParts::Unlink(sel) => ReconfigAction::RemoveChannel(sel.clone()),
        };
        ReconfigRule {
            condition: cond.clone(),
            action: lowered_action,
        }
    }
}

// ---------------------------------------------------------------------
// Intermediate parts
// ---------------------------------------------------------------------

enum PpsRuleParts {
    Transform {
        t: (String, Pos),
        consumed: (String, Pos),
        produced: Vec<(String, Pos)>,
    },
    CommIn {
        t: (String, Pos),
        moved: (String, Pos),
        trigger: Option<(String, Pos)>,
    },
    CommEnter {
        t: (String, Pos),
        moved: (String, Pos),
        trigger: Option<(String, Pos)>,
    },
    CommExit {
        t: (String, Pos),
        moved: (String, Pos),
    },
    Differentiate {
        from: (String, Pos),
        to: (String, Pos),
        consumed: (String, Pos),
        produced: (String, Pos),
    },
    Divide {
        t: (String, Pos),
        consumed: (String, Pos),
        left: (String, Pos),
        right: (String, Pos),
    },
    Die {
        t: (String, Pos),
        consumed: (String, Pos),
    },
}

fn lower_pps_rule(
    p: &mut Parser,
    parts: PpsRuleParts,
    check_sym: &mut impl FnMut(&mut Parser, &str, Pos) -> Symbol,
    mut check_type: impl FnMut(&mut Parser, &str, Pos) -> CellType,
) -> PpsRule {
    match parts {
        PpsRuleParts::Transform {
            t,
            consumed,
            produced,
        } => {
            let mut ms = Multiset::new();
            for (n, pos) in &produced {
                let sym = check_sym(p, n, *pos);
                let _ = ms.insert(sym, 1);
            }
            PpsRule::Transform {
                consumed: check_sym(p, &consumed.0, consumed.1),
                produced: ms,
                cell_type: check_type(p, &t.0, t.1),
            }
        }
        PpsRuleParts::CommIn { t, moved, trigger } => PpsRule::CommIn {
            trigger: trigger.map(|(n, pos)| check_sym(p, &n, pos)),
            moved: check_sym(p, &moved.0, moved.1),
            cell_type: check_type(p, &t.0, t.1),
        },
        PpsRuleParts::CommEnter { t, moved, trigger } => PpsRule::CommEnter {
            trigger: trigger.map(|(n, pos)| check_sym(p, &n, pos)),
            moved: check_sym(p, &moved.0, moved.1),
            cell_type: check_type(p, &t.0, t.1),
        },
        PpsRuleParts::CommExit { t, moved } => PpsRule::CommExit {
            moved: check_sym(p, &moved.0, moved.1),
            cell_type: check_type(p, &t.0, t.1),
        },
        PpsRuleParts::Differentiate {
            from,
            to,
            consumed,
            produced,
        } => PpsRule::Differentiate {
            consumed: check_sym(p, &consumed.0, consumed.1),
            produced: check_sym(p, &produced.0, produced.1),
            from_type: check_type(p, &from.0, from.1),
            to_type: check_type(p, &to.0, to.1),
        },
        PpsRuleParts::Divide {
            t,
            consumed,
            left,
            right,
        } => PpsRule::Divide {
            consumed: check_sym(p, &consumed.0, consumed.1),
            left_product: check_sym(p, &left.0, left.1),
            right_product: check_sym(p, &right.0, right.1),
            cell_type: check_type(p, &t.0, t.1),
        },
        PpsRuleParts::Die { t, consumed } => PpsRule::Die {
            consumed: check_sym(p, &consumed.0, consumed.1),
            cell_type: check_type(p, &t.0, t.1),
        },
    }
}

struct XmParts {
    name: String,
    pos: Pos,
    inputs: Vec<(String, Pos)>,
    outputs: Vec<(String, Pos)>,
    states: Vec<(String, Pos)>,
    init: Option<(String, Pos)>,
    memory: Vec<(String, TypeExpr, Value, Pos)>,
    functions: Vec<FnParts>,
    transitions: Vec<(String, String, String, Pos)>,
    stream: Option<Vec<(IoItem, Pos)>>,
}

struct FnParts {
    name: String,
    pos: Pos,
    input_binding: InputBinding,
    output_binding: OutputBinding,
    guard: Expr,
    output: OutputSpec,
    updates: Vec<(String, Expr)>,
}

struct TypeParts {
    name: String,
    pos: Pos,
    behaviour: (String, Pos),
    percepts: Vec<(String, Pos)>,
    muts: Vec<(Expr, ActionParts, Pos)>,
}

enum ActionParts {
    Add {
        t: String,
        init: Vec<(String, Expr)>,
    },
    Remove(Selector),
    Link(Selector),
    Unlink(Selector),
}
