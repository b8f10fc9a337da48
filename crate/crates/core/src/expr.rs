//! The closed expression language used by machine guards, effects, and
//! reconfiguration conditions.
//!
//! Integer and tuple arithmetic, comparisons, boolean connectives, memory
//! field access, set/sequence literals with membership (`in`) and append
//! (`++`); no user-defined recursion, so evaluation is total up to the
//! reported arithmetic errors and traces stay reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::multiset::Multiset;
use crate::symbol::Symbol;

/// A runtime value. `Set` relies on the derived total order of `Value`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Value {
    Int(i64),
    Bool(bool),
    Sym(Symbol),
    Tuple(Vec<Value>),
    Seq(Vec<Value>),
    Set(BTreeSet<Value>),
}

impl Value {
    pub fn pair(a: i64, b: i64) -> Value {
        Value::Tuple(vec![Value::Int(a), Value::Int(b)])
    }

    pub fn as_int(&self) -> Result<i64, EvalError> {
        match self {
            Value::Int(n) => Ok(*n),
            other => Err(EvalError::TypeMismatch {
                expected: "int",
                found: other.to_string(),
            }),
        }
    }

    pub fn as_bool(&self) -> Result<bool, EvalError> {
        match self {
            Value::Bool(b) => Ok(*b),
            other => Err(EvalError::TypeMismatch {
                expected: "bool",
                found: other.to_string(),
            }),
        }
    }

    /// Grid position encoding used by the OPERAS runtime: a `(int, int)` tuple.
    pub fn as_pos(&self) -> Result<(i64, i64), EvalError> {
        match self {
            Value::Tuple(items) if items.len() == 2 => {
                Ok((items[0].as_int()?, items[1].as_int()?))
            }
            other => Err(EvalError::TypeMismatch {
                expected: "(int, int)",
                found: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn list(f: &mut fmt::Formatter<'_>, items: &[Value]) -> fmt::Result {
            let mut first = true;
            for v in items {
                if !first {
                    write!(f, ", ")?;
                }
                first = false;
                write!(f, "{v}")?;
            }
            Ok(())
        }
        match self {
            Value::Int(n) => write!(f, "{n}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Sym(s) => write!(f, ":{s}"),
            Value::Tuple(items) => {
                write!(f, "(")?;
                list(f, items)?;
                write!(f, ")")
            }
            Value::Seq(items) => {
                write!(f, "[")?;
                list(f, items)?;
                write!(f, "]")
            }
            Value::Set(items) => {
                write!(f, "{{")?;
                let items: Vec<Value> = items.iter().cloned().collect();
                list(f, &items)?;
                write!(f, "}}")
            }
        }
    }
}

// Ints, bools and symbols map onto native JSON; containers are tagged so a
// tuple, a sequence and a set stay distinguishable in trace snapshots.
impl Serialize for Value {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Int(n) => serializer.serialize_i64(*n),
            Value::Bool(b) => serializer.serialize_bool(*b),
            Value::Sym(s) => serializer.serialize_str(s.as_str()),
            Value::Tuple(items) => {
                let mut m = serializer.serialize_map(Some(1))?;
                m.serialize_entry("tuple", items)?;
                m.end()
            }
            Value::Seq(items) => {
                let mut m = serializer.serialize_map(Some(1))?;
                m.serialize_entry("seq", items)?;
                m.end()
            }
            Value::Set(items) => {
                let mut m = serializer.serialize_map(Some(1))?;
                let as_vec: Vec<&Value> = items.iter().collect();
                m.serialize_entry("set", &as_vec)?;
                m.end()
            }
        }
    }
}

/// Semantic type of a memory field or expression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum TypeExpr {
    Int,
    Bool,
    Sym,
    Tuple(Vec<TypeExpr>),
    Seq(Box<TypeExpr>),
    Set(Box<TypeExpr>),
    /// Statically unknowable (input payload slots); unifies with everything.
    Unknown,
}

impl TypeExpr {
    pub fn pos() -> TypeExpr {
        TypeExpr::Tuple(vec![TypeExpr::Int, TypeExpr::Int])
    }

    fn unifies(&self, other: &TypeExpr) -> bool {
        match (self, other) {
            (TypeExpr::Unknown, _) | (_, TypeExpr::Unknown) => true,
            (TypeExpr::Tuple(a), TypeExpr::Tuple(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.unifies(y))
            }
            (TypeExpr::Seq(a), TypeExpr::Seq(b)) => a.unifies(b),
            (TypeExpr::Set(a), TypeExpr::Set(b)) => a.unifies(b),
            _ => self == other,
        }
    }
}

impl fmt::Display for TypeExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TypeExpr::Int => write!(f, "int"),
            TypeExpr::Bool => write!(f, "bool"),
            TypeExpr::Sym => write!(f, "sym"),
            TypeExpr::Tuple(items) => {
                write!(f, "(")?;
                for (i, t) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{t}")?;
                }
                write!(f, ")")
            }
            TypeExpr::Seq(t) => write!(f, "seq<{t}>"),
            TypeExpr::Set(t) => write!(f, "set<{t}>"),
            TypeExpr::Unknown => write!(f, "unknown"),
        }
    }
}

/// Does a runtime value inhabit a schema type?
pub fn conforms(value: &Value, ty: &TypeExpr) -> bool {
    match (value, ty) {
        (_, TypeExpr::Unknown) => true,
        (Value::Int(_), TypeExpr::Int) => true,
        (Value::Bool(_), TypeExpr::Bool) => true,
        (Value::Sym(_), TypeExpr::Sym) => true,
        (Value::Tuple(items), TypeExpr::Tuple(tys)) => {
            items.len() == tys.len() && items.iter().zip(tys).all(|(v, t)| conforms(v, t))
        }
        (Value::Seq(items), TypeExpr::Seq(t)) => items.iter().all(|v| conforms(v, t)),
        (Value::Set(items), TypeExpr::Set(t)) => items.iter().all(|v| conforms(v, t)),
        _ => false,
    }
}

/// An input or output item: an alphabet tag with an optional value payload.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct IoItem {
    pub tag: Symbol,
    pub args: Vec<Value>,
}

impl IoItem {
    pub fn plain(tag: &str) -> IoItem {
        IoItem {
            tag: Symbol::new(tag),
            args: Vec::new(),
        }
    }

    pub fn with_args(tag: &str, args: Vec<Value>) -> IoItem {
        IoItem {
            tag: Symbol::new(tag),
            args,
        }
    }
}

impl fmt::Display for IoItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag)?;
        if !self.args.is_empty() {
            write!(f, "(")?;
            for (i, a) in self.args.iter().enumerate() {
                if i > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{a}")?;
            }
            write!(f, ")")?;
        }
        Ok(())
    }
}

/// A machine memory: a record of named fields.
pub type Memory = BTreeMap<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum UnOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
    /// Membership test: `x in s` for sets and sequences.
    In,
    /// Append/union: `xs ++ ys` for sequences and sets.
    Append,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Expr {
    Lit(Value),
    /// Memory field access, `m.field`.
    Mem(String),
    /// Tag of the current input item, `input.tag`.
    InputTag,
    /// Payload slot of the current input item, `input[i]`.
    InputArg(usize),
    /// Number of communication partners of the agent (OPERAS conditions).
    NeighbourCount,
    /// Count of an object at the agent's grid cell (OPERAS conditions).
    EnvCount(Symbol),
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Tuple(Vec<Expr>),
    Seq(Vec<Expr>),
    Set(Vec<Expr>),
    /// Tuple projection, `e.i`.
    Proj(Box<Expr>, usize),
}

impl Expr {
    pub fn int(n: i64) -> Expr {
        Expr::Lit(Value::Int(n))
    }
    pub fn sym(name: &str) -> Expr {
        Expr::Lit(Value::Sym(Symbol::new(name)))
    }
    pub fn truth(b: bool) -> Expr {
        Expr::Lit(Value::Bool(b))
    }
    pub fn mem(field: &str) -> Expr {
        Expr::Mem(field.to_string())
    }
    fn bin(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }
    pub fn eq(self, rhs: Expr) -> Expr {
        Expr::bin(BinOp::Eq, self, rhs)
    }
    pub fn ne(self, rhs: Expr) -> Expr {
        Expr::bin(BinOp::Ne, self, rhs)
    }
    pub fn lt(self, rhs: Expr) -> Expr {
        Expr::bin(BinOp::Lt, self, rhs)
    }
    pub fn le(self, rhs: Expr) -> Expr {
        Expr::bin(BinOp::Le, self, rhs)
    }
    pub fn gt(self, rhs: Expr) -> Expr {
        Expr::bin(BinOp::Gt, self, rhs)
    }
    pub fn ge(self, rhs: Expr) -> Expr {
        Expr::bin(BinOp::Ge, self, rhs)
    }
    pub fn and(self, rhs: Expr) -> Expr {
        Expr::bin(BinOp::And, self, rhs)
    }
    pub fn or(self, rhs: Expr) -> Expr {
        Expr::bin(BinOp::Or, self, rhs)
    }
    pub fn add(self, rhs: Expr) -> Expr {
        Expr::bin(BinOp::Add, self, rhs)
    }
    pub fn sub(self, rhs: Expr) -> Expr {
        Expr::bin(BinOp::Sub, self, rhs)
    }
    pub fn input_tag_is(name: &str) -> Expr {
        Expr::InputTag.eq(Expr::sym(name))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("unknown memory field '{0}'")]
    MissingField(String),
    #[error("type mismatch: expected {expected}, found {found}")]
    TypeMismatch {
        expected: &'static str,
        found: String,
    },
    #[error("integer overflow")]
    Overflow,
    #[error("division by zero")]
    DivisionByZero,
    #[error("no input item in this context")]
    NoInput,
    #[error("input payload slot {wanted} out of range (payload has {have})")]
    InputArity { wanted: usize, have: usize },
    #[error("tuple projection .{index} out of range")]
    Projection { index: usize },
    #[error("'{0}' is not available in this context")]
    ContextUnavailable(&'static str),
}

/// Evaluation context. `input` is present inside machine guards/effects;
/// `neighbour_count`/`env_local` are present inside reconfiguration
/// conditions.
#[derive(Clone, Copy)]
pub struct EvalCtx<'a> {
    pub memory: &'a Memory,
    pub input: Option<&'a IoItem>,
    pub neighbour_count: Option<u64>,
    pub env_local: Option<&'a Multiset>,
}

impl<'a> EvalCtx<'a> {
    pub fn machine(memory: &'a Memory, input: &'a IoItem) -> EvalCtx<'a> {
        EvalCtx {
            memory,
            input: Some(input),
            neighbour_count: None,
            env_local: None,
        }
    }

    pub fn memory_only(memory: &'a Memory) -> EvalCtx<'a> {
        EvalCtx {
            memory,
            input: None,
            neighbour_count: None,
            env_local: None,
        }
    }
}

pub fn eval(expr: &Expr, ctx: &EvalCtx<'_>) -> Result<Value, EvalError> {
    match expr {
        Expr::Lit(v) => Ok(v.clone()),
        Expr::Mem(field) => ctx
            .memory
            .get(field)
            .cloned()
            .ok_or_else(|| EvalError::MissingField(field.clone())),
        Expr::InputTag => {
            let item = ctx.input.ok_or(EvalError::NoInput)?;
            Ok(Value::Sym(item.tag.clone()))
        }
        Expr::InputArg(i) => {
            let item = ctx.input.ok_or(EvalError::NoInput)?;
            item.args.get(*i).cloned().ok_or(EvalError::InputArity {
                wanted: *i,
                have: item.args.len(),
            })
        }
        Expr::NeighbourCount => ctx
            .neighbour_count
            .map(|n| Value::Int(n as i64))
            .ok_or(EvalError::ContextUnavailable("neighbours")),
        Expr::EnvCount(sym) => ctx
            .env_local
            .map(|ms| Value::Int(ms.count(sym) as i64))
            .ok_or(EvalError::ContextUnavailable("env(..)")),
        Expr::Unary(op, inner) => {
            let v = eval(inner, ctx)?;
            match op {
                UnOp::Neg => Ok(Value::Int(v.as_int()?.checked_neg().ok_or(EvalError::Overflow)?)),
                UnOp::Not => Ok(Value::Bool(!v.as_bool()?)),
            }
        }
        Expr::Binary(op, lhs, rhs) => eval_binary(*op, lhs, rhs, ctx),
        Expr::Tuple(items) => Ok(Value::Tuple(
            items.iter().map(|e| eval(e, ctx)).collect::<Result<_, _>>()?,
        )),
        Expr::Seq(items) => Ok(Value::Seq(
            items.iter().map(|e| eval(e, ctx)).collect::<Result<_, _>>()?,
        )),
        Expr::Set(items) => {
            let mut out = BTreeSet::new();
            for e in items {
                out.insert(eval(e, ctx)?);
            }
            Ok(Value::Set(out))
        }
        Expr::Proj(inner, index) => match eval(inner, ctx)? {
            Value::Tuple(items) => items
                .get(*index)
                .cloned()
                .ok_or(EvalError::Projection { index: *index }),
            other => Err(EvalError::TypeMismatch {
                expected: "tuple",
                found: other.to_string(),
            }),
        },
    }
}

fn eval_binary(op: BinOp, lhs: &Expr, rhs: &Expr, ctx: &EvalCtx<'_>) -> Result<Value, EvalError> {
    // And/Or short-circuit so guards can test the input tag before touching
    // its payload.
    match op {
        BinOp::And => {
            return Ok(Value::Bool(
                eval(lhs, ctx)?.as_bool()? && eval(rhs, ctx)?.as_bool()?,
            ));
        }
        BinOp::Or => {
            return Ok(Value::Bool(
                eval(lhs, ctx)?.as_bool()? || eval(rhs, ctx)?.as_bool()?,
            ));
        }
        _ => {}
    }
    let a = eval(lhs, ctx)?;
    let b = eval(rhs, ctx)?;
    let int_op = |f: fn(i64, i64) -> Option<i64>| -> Result<Value, EvalError> {
        Ok(Value::Int(
            f(a.as_int()?, b.as_int()?).ok_or(EvalError::Overflow)?,
        ))
    };
    match op {
        BinOp::Add => int_op(i64::checked_add),
        BinOp::Sub => int_op(i64::checked_sub),
        BinOp::Mul => int_op(i64::checked_mul),
        BinOp::Div => {
            if b.as_int()? == 0 {
                Err(EvalError::DivisionByZero)
            } else {
                int_op(i64::checked_div)
            }
        }
        BinOp::Mod => {
            if b.as_int()? == 0 {
                Err(EvalError::DivisionByZero)
            } else {
                int_op(i64::checked_rem)
            }
        }
        BinOp::Eq | BinOp::Ne => {
            let same_kind = std::mem::discriminant(&a) == std::mem::discriminant(&b);
            if !same_kind {
                return Err(EvalError::TypeMismatch {
                    expected: "operands of one type",
                    found: format!("{a} vs {b}"),
                });
            }
            let eq = a == b;
            Ok(Value::Bool(if op == BinOp::Eq { eq } else { !eq }))
        }
        BinOp::Lt => Ok(Value::Bool(a.as_int()? < b.as_int()?)),
        BinOp::Le => Ok(Value::Bool(a.as_int()? <= b.as_int()?)),
        BinOp::Gt => Ok(Value::Bool(a.as_int()? > b.as_int()?)),
        BinOp::Ge => Ok(Value::Bool(a.as_int()? >= b.as_int()?)),
        BinOp::In => match b {
            Value::Set(items) => Ok(Value::Bool(items.contains(&a))),
            Value::Seq(items) => Ok(Value::Bool(items.contains(&a))),
            other => Err(EvalError::TypeMismatch {
                expected: "set or seq",
                found: other.to_string(),
            }),
        },
        BinOp::Append => match (a, b) {
            (Value::Seq(mut xs), Value::Seq(ys)) => {
                xs.extend(ys);
                Ok(Value::Seq(xs))
            }
            (Value::Set(mut xs), Value::Set(ys)) => {
                xs.extend(ys);
                Ok(Value::Set(xs))
            }
            (a, b) => Err(EvalError::TypeMismatch {
                expected: "two seqs or two sets",
                found: format!("{a} ++ {b}"),
            }),
        },
        BinOp::And | BinOp::Or => unreachable!("handled above"),
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TypeError {
    #[error("unknown memory field '{0}'")]
    UnknownField(String),
    #[error("type mismatch: expected {expected}, found {found}")]
    Mismatch { expected: String, found: String },
    #[error("'{0}' is not available in this context")]
    NotAllowed(&'static str),
    #[error("tuple projection .{0} out of range")]
    Projection(usize),
}

/// What context features an expression may use.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExprCaps {
    pub input: bool,
    pub locality: bool,
}

impl ExprCaps {
    pub fn machine() -> ExprCaps {
        ExprCaps {
            input: true,
            locality: false,
        }
    }
    pub fn reconfig() -> ExprCaps {
        ExprCaps {
            input: false,
            locality: true,
        }
    }
}

/// Static type of an expression against a memory schema. `Unknown` (input
/// payload slots) unifies with everything; the evaluator enforces the rest
/// dynamically.
pub fn typecheck(
    expr: &Expr,
    schema: &BTreeMap<String, TypeExpr>,
    caps: ExprCaps,
) -> Result<TypeExpr, TypeError> {
    let expect = |want: &TypeExpr, got: &TypeExpr| -> Result<(), TypeError> {
        if want.unifies(got) {
            Ok(())
        } else {
            Err(TypeError::Mismatch {
                expected: want.to_string(),
                found: got.to_string(),
            })
        }
    };
    match expr {
        Expr::Lit(v) => Ok(value_type(v)),
        Expr::Mem(field) => schema
            .get(field)
            .cloned()
            .ok_or_else(|| TypeError::UnknownField(field.clone())),
        Expr::InputTag => {
            if caps.input {
                Ok(TypeExpr::Sym)
            } else {
                Err(TypeError::NotAllowed("input"))
            }
        }
        Expr::InputArg(_) => {
            if caps.input {
                Ok(TypeExpr::Unknown)
            } else {
                Err(TypeError::NotAllowed("input"))
            }
        }
        Expr::NeighbourCount => {
            if caps.locality {
                Ok(TypeExpr::Int)
            } else {
                Err(TypeError::NotAllowed("neighbours"))
            }
        }
        Expr::EnvCount(_) => {
            if caps.locality {
                Ok(TypeExpr::Int)
            } else {
                Err(TypeError::NotAllowed("env(..)"))
            }
        }
        Expr::Unary(op, inner) => {
            let t = typecheck(inner, schema, caps)?;
            match op {
                UnOp::Neg => expect(&TypeExpr::Int, &t).map(|_| TypeExpr::Int),
                UnOp::Not => expect(&TypeExpr::Bool, &t).map(|_| TypeExpr::Bool),
            }
        }
        Expr::Binary(op, lhs, rhs) => {
            let a = typecheck(lhs, schema, caps)?;
            let b = typecheck(rhs, schema, caps)?;
            match op {
                BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div | BinOp::Mod => {
                    expect(&TypeExpr::Int, &a)?;
                    expect(&TypeExpr::Int, &b)?;
                    Ok(TypeExpr::Int)
                }
                BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
                    expect(&TypeExpr::Int, &a)?;
                    expect(&TypeExpr::Int, &b)?;
                    Ok(TypeExpr::Bool)
                }
                BinOp::Eq | BinOp::Ne => expect(&a, &b).map(|_| TypeExpr::Bool),
                BinOp::And | BinOp::Or => {
                    expect(&TypeExpr::Bool, &a)?;
                    expect(&TypeExpr::Bool, &b)?;
                    Ok(TypeExpr::Bool)
                }
                BinOp::In => match &b {
                    TypeExpr::Set(elem) | TypeExpr::Seq(elem) => {
                        expect(elem, &a).map(|_| TypeExpr::Bool)
                    }
                    TypeExpr::Unknown => Ok(TypeExpr::Bool),
                    other => Err(TypeError::Mismatch {
                        expected: "set or seq".to_string(),
                        found: other.to_string(),
                    }),
                },
                BinOp::Append => match (&a, &b) {
                    (TypeExpr::Seq(x), TypeExpr::Seq(y)) => {
                        expect(x, y).map(|_| a.clone())
                    }
                    (TypeExpr::Set(x), TypeExpr::Set(y)) => {
                        expect(x, y).map(|_| a.clone())
                    }
                    (TypeExpr::Unknown, other) | (other, TypeExpr::Unknown) => Ok(other.clone()),
                    (a, b) => Err(TypeError::Mismatch {
                        expected: "two seqs or two sets".to_string(),
                        found: format!("{a} ++ {b}"),
                    }),
                },
            }
        }
        Expr::Tuple(items) => Ok(TypeExpr::Tuple(
            items
                .iter()
                .map(|e| typecheck(e, schema, caps))
                .collect::<Result<_, _>>()?,
        )),
        Expr::Seq(items) => {
            let elem = homogeneous(items, schema, caps)?;
            Ok(TypeExpr::Seq(Box::new(elem)))
        }
        Expr::Set(items) => {
            let elem = homogeneous(items, schema, caps)?;
            Ok(TypeExpr::Set(Box::new(elem)))
        }
        Expr::Proj(inner, index) => match typecheck(inner, schema, caps)? {
            TypeExpr::Tuple(items) => {
                items.get(*index).cloned().ok_or(TypeError::Projection(*index))
            }
            TypeExpr::Unknown => Ok(TypeExpr::Unknown),
            other => Err(TypeError::Mismatch {
                expected: "tuple".to_string(),
                found: other.to_string(),
            }),
        },
    }
}

fn homogeneous(
    items: &[Expr],
    schema: &BTreeMap<String, TypeExpr>,
    caps: ExprCaps,
) -> Result<TypeExpr, TypeError> {
    let mut elem = TypeExpr::Unknown;
    for e in items {
        let t = typecheck(e, schema, caps)?;
        if elem == TypeExpr::Unknown {
            elem = t;
        } else if !elem.unifies(&t) {
            return Err(TypeError::Mismatch {
                expected: elem.to_string(),
                found: t.to_string(),
            });
        }
    }
    Ok(elem)
}

pub fn value_type(v: &Value) -> TypeExpr {
    match v {
        Value::Int(_) => TypeExpr::Int,
        Value::Bool(_) => TypeExpr::Bool,
        Value::Sym(_) => TypeExpr::Sym,
        Value::Tuple(items) => TypeExpr::Tuple(items.iter().map(value_type).collect()),
        Value::Seq(items) => TypeExpr::Seq(Box::new(
            items.first().map(value_type).unwrap_or(TypeExpr::Unknown),
        )),
        Value::Set(items) => TypeExpr::Set(Box::new(
            items.iter().next().map(value_type).unwrap_or(TypeExpr::Unknown),
        )),
    }
}

// ---------------------------------------------------------------------------
// Canonical printing (shared by the model language printer and traces).
// ---------------------------------------------------------------------------

impl BinOp {
    fn precedence(self) -> u8 {
        match self {
            BinOp::Or => 1,
            BinOp::And => 2,
            BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge | BinOp::In => 3,
            BinOp::Add | BinOp::Sub | BinOp::Append => 4,
            BinOp::Mul | BinOp::Div | BinOp::Mod => 5,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Mod => "%",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::And => "&&",
            BinOp::Or => "||",
            BinOp::In => "in",
            BinOp::Append => "++",
        }
    }
}

impl Expr {
    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(op, _, _) => op.precedence(),
            Expr::Unary(_, _) => 6,
            _ => 7,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        let prec = self.precedence();
        let parens = prec < min;
        if parens {
            write!(f, "(")?;
        }
        match self {
            Expr::Lit(v) => write!(f, "{v}")?,
            Expr::Mem(field) => write!(f, "m.{field}")?,
            Expr::InputTag => write!(f, "input.tag")?,
            Expr::InputArg(i) => write!(f, "input[{i}]")?,
            Expr::NeighbourCount => write!(f, "neighbours")?,
            Expr::EnvCount(s) => write!(f, "env({s})")?,
            Expr::Unary(op, inner) => {
                write!(f, "{}", if *op == UnOp::Neg { "-" } else { "!" })?;
                inner.fmt_prec(f, 7)?;
            }
            Expr::Binary(op, lhs, rhs) => {
                lhs.fmt_prec(f, prec)?;
                write!(f, " {} ", op.token())?;
                rhs.fmt_prec(f, prec + 1)?;
            }
            Expr::Tuple(items) => {
                write!(f, "(")?;
                for (i, e) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    e.fmt_prec(f, 0)?;
                }
                write!(f, ")")?;
            }
            Expr::Seq(items) => {
                write!(f, "[")?;
                for (i, e) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    e.fmt_prec(f, 0)?;
                }
                write!(f, "]")?;
            }
            Expr::Set(items) => {
                write!(f, "{{")?;
                for (i, e) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    e.fmt_prec(f, 0)?;
                }
                write!(f, "}}")?;
            }
            Expr::Proj(inner, index) => {
                inner.fmt_prec(f, 7)?;
                write!(f, ".{index}")?;
            }
        }
        if parens {
            write!(f, ")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn memory(fields: &[(&str, Value)]) -> Memory {
        fields
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn arithmetic_and_fields() {
        let mem = memory(&[("food", Value::Int(7)), ("threshold", Value::Int(5))]);
        let e = Expr::mem("food").sub(Expr::mem("threshold"));
        let got = eval(&e, &EvalCtx::memory_only(&mem)).unwrap();
        assert_eq!(got, Value::Int(2));
    }

    #[test]
    fn guards_short_circuit_on_tag() {
        let mem = memory(&[]);
        let input = IoItem::plain("tick");
        // input has no payload; the guard must not touch input[0] when the
        // tag test already failed.
        let e = Expr::input_tag_is("food").and(Expr::InputArg(0).gt(Expr::int(3)));
        let got = eval(&e, &EvalCtx::machine(&mem, &input)).unwrap();
        assert_eq!(got, Value::Bool(false));
    }

    #[test]
    fn overflow_is_reported() {
        let mem = memory(&[("x", Value::Int(i64::MAX))]);
        let e = Expr::mem("x").add(Expr::int(1));
        assert_eq!(
            eval(&e, &EvalCtx::memory_only(&mem)),
            Err(EvalError::Overflow)
        );
    }

    #[test]
    fn membership_and_append() {
        let mem = memory(&[]);
        let ctx = EvalCtx::memory_only(&mem);
        let seq = Expr::Seq(vec![Expr::int(1), Expr::int(2)]);
        let appended = Expr::Binary(
            BinOp::Append,
            Box::new(seq),
            Box::new(Expr::Seq(vec![Expr::int(3)])),
        );
        let e = Expr::Binary(BinOp::In, Box::new(Expr::int(3)), Box::new(appended));
        assert_eq!(eval(&e, &ctx).unwrap(), Value::Bool(true));
    }

    #[test]
    fn typecheck_rejects_unknown_field() {
        let schema = BTreeMap::new();
        let err = typecheck(&Expr::mem("ghost"), &schema, ExprCaps::machine()).unwrap_err();
        assert!(matches!(err, TypeError::UnknownField(_)));
    }

    #[test]
    fn typecheck_blocks_locality_in_machine_context() {
        let schema = BTreeMap::new();
        let err = typecheck(&Expr::NeighbourCount, &schema, ExprCaps::machine()).unwrap_err();
        assert!(matches!(err, TypeError::NotAllowed(_)));
    }

    #[test]
    fn display_is_precedence_aware() {
        let e = Expr::mem("a").add(Expr::mem("b")).eq(Expr::int(3)).and(
            Expr::mem("c").lt(Expr::int(4)).or(Expr::truth(false)),
        );
        assert_eq!(e.to_string(), "m.a + m.b == 3 && (m.c < 4 || false)");
    }
}
