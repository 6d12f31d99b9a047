//! Problem files: a strict JSON schema whose matrix entries are scalar
//! expressions in the kernel arguments (and, for state-nonlinear problems,
//! the state components).
//!
//! Grammar, loosest to tightest:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := ('-' | '+') unary | power
//! power   := primary ('^' unary)?          // right-associative
//! primary := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Deserialize;
use thiserror::Error;

use crate::discretize::{Arity, Grid, MatrixKernelField, QuadratureRule};
use crate::error::{Error, Result};

/// Diagnostics produced while reading a problem file. Each failure class is
/// its own variant.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("JSON syntax error at line {line}, column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error at line {line}, column {column}: {message}")]
    Schema {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown key at line {line}, column {column}: {message}")]
    UnknownKey {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown problem kind `{0}`")]
    UnknownKind(String),
    #[error("unknown kernel role `{role}` for {kind} problems")]
    UnknownRole { kind: String, role: String },
    #[error("missing kernel role `{role}` required by {kind} problems")]
    MissingRole { kind: String, role: String },
    #[error("kernel `{role}` has shape {got_rows}x{got_cols}, expected {rows}x{cols}")]
    Shape {
        role: String,
        rows: usize,
        cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("syntax error in `{role}`[{row}][{col}] at column {column}: {message}")]
    ExprSyntax {
        role: String,
        row: usize,
        col: usize,
        column: usize,
        message: String,
    },
    #[error("unknown identifier `{name}` in `{role}`[{row}][{col}] at column {column}")]
    UnknownIdentifier {
        role: String,
        row: usize,
        col: usize,
        column: usize,
        name: String,
    },
    #[error("invalid value for `{field}`: {message}")]
    InvalidValue { field: String, message: String },
}

/// Syntax-level failure of a single expression, before it is attributed to a
/// kernel entry.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("column {column}: {message}")]
    Syntax { column: usize, message: String },
    #[error("column {column}: unknown identifier `{name}`")]
    UnknownIdentifier { column: usize, name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
    Min,
    Max,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

/// Expression tree. Variables are resolved to evaluation slots at parse time.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var { name: String, slot: usize },
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

impl fmt::Display for Expr {
    /// Fully parenthesized; reparsing yields the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var { name, .. } => f.write_str(name),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Names visible to an expression and the slot each one reads.
///
/// Slot layout: `[first, second, state_1, …, state_n]`. One-argument contexts
/// still reserve slot 1 so every kernel of a problem shares one layout.
#[derive(Debug, Clone)]
pub struct VarContext {
    names: Vec<(String, usize)>,
    slots: usize,
}

impl VarContext {
    pub fn new(first: &str, second: Option<&str>, state_dim: usize) -> Self {
        let mut names = vec![(first.to_string(), 0)];
        if let Some(s) = second {
            names.push((s.to_string(), 1));
        }
        for k in 0..state_dim {
            names.push((format!("phi{}", k + 1), 2 + k));
        }
        if state_dim == 1 {
            names.push(("phi".to_string(), 2));
        }
        VarContext {
            names,
            slots: 2 + state_dim,
        }
    }

    pub fn slot_count(&self) -> usize {
        self.slots
    }

    fn lookup(&self, name: &str) -> Option<usize> {
        self.names.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

struct Lexer {
    toks: Vec<(Tok, usize)>,
}

impl Lexer {
    fn lex(src: &str) -> std::result::Result<Lexer, ExprError> {
        let chars: Vec<char> = src.chars().collect();
        let mut toks = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let column = i + 1;
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c.is_ascii_digit() || c == '.' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let mut k = i + 1;
                    if k < chars.len() && (chars[k] == '+' || chars[k] == '-') {
                        k += 1;
                    }
                    if k < chars.len() && chars[k].is_ascii_digit() {
                        while k < chars.len() && chars[k].is_ascii_digit() {
                            k += 1;
                        }
                        i = k;
                    }
                }
                let text: String = chars[start..i].iter().collect();
                let v = text.parse::<f64>().map_err(|_| ExprError::Syntax {
                    column,
                    message: format!("malformed number `{text}`"),
                })?;
                toks.push((Tok::Num(v), column));
                continue;
            }
            if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                toks.push((Tok::Ident(chars[start..i].iter().collect()), column));
                continue;
            }
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                ',' => Tok::Comma,
                other => {
                    return Err(ExprError::Syntax {
                        column,
                        message: format!("unexpected character `{other}`"),
                    })
                }
            };
            toks.push((tok, column));
            i += 1;
        }
        toks.push((Tok::End, chars.len() + 1));
        Ok(Lexer { toks })
    }
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    ctx: &'a VarContext,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn column(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self) -> ExprError {
        let message = match self.peek() {
            Tok::End => "unexpected end of expression".to_string(),
            Tok::Num(v) => format!("unexpected number `{v}`"),
            Tok::Ident(s) => format!("unexpected identifier `{s}`"),
            Tok::Op(c) => format!("unexpected `{c}`"),
            Tok::LParen => "unexpected `(`".to_string(),
            Tok::RParen => "unexpected `)`".to_string(),
            Tok::Comma => "unexpected `,`".to_string(),
        };
        ExprError::Syntax {
            column: self.column(),
            message,
        }
    }

    fn expr(&mut self) -> std::result::Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> std::result::Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> std::result::Result<Expr, ExprError> {
        match self.peek() {
            Tok::Op('-') => {
                self.bump();
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Tok::Op('+') => {
                self.bump();
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> std::result::Result<Expr, ExprError> {
        let base = self.primary()?;
        if let Tok::Op('^') = self.peek() {
            self.bump();
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> std::result::Result<Expr, ExprError> {
        let column = self.column();
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect_rparen()?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump();
                if let Tok::LParen = self.peek() {
                    let func = Func::lookup(&name)
                        .ok_or(ExprError::UnknownIdentifier { column, name: name.clone() })?;
                    self.bump();
                    let mut args = vec![self.expr()?];
                    while let Tok::Comma = self.peek() {
                        self.bump();
                        args.push(self.expr()?);
                    }
                    self.expect_rparen()?;
                    if args.len() != func.arity() {
                        return Err(ExprError::Syntax {
                            column,
                            message: format!(
                                "`{}` takes {} argument(s), got {}",
                                func.name(),
                                func.arity(),
                                args.len()
                            ),
                        });
                    }
                    return Ok(Expr::Call(func, args));
                }
                if name == "pi" {
                    return Ok(Expr::Num(std::f64::consts::PI));
                }
                match self.ctx.lookup(&name) {
                    Some(slot) => Ok(Expr::Var { name, slot }),
                    None => Err(ExprError::UnknownIdentifier { column, name }),
                }
            }
            _ => Err(self.unexpected()),
        }
    }

    fn expect_rparen(&mut self) -> std::result::Result<(), ExprError> {
        if let Tok::RParen = self.peek() {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected())
        }
    }
}

/// Parses a single expression against the given variable context.
pub fn parse_expr(src: &str, ctx: &VarContext) -> std::result::Result<Expr, ExprError> {
    let lexer = Lexer::lex(src)?;
    let mut p = Parser {
        toks: lexer.toks,
        pos: 0,
        ctx,
    };
    let e = p.expr()?;
    if *p.peek() != Tok::End {
        return Err(p.unexpected());
    }
    Ok(e)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Load(usize),
    Neg,
    Bin(BinOp),
    Call(Func),
}

/// Postfix program for fast repeated evaluation of an [`Expr`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledExpr {
    ops: Vec<Op>,
    depth: usize,
}

impl CompiledExpr {
    pub fn compile(e: &Expr) -> Self {
        fn emit(e: &Expr, ops: &mut Vec<Op>, cur: &mut usize, max: &mut usize) {
            match e {
                Expr::Num(v) => {
                    ops.push(Op::Const(*v));
                    *cur += 1;
                }
                Expr::Var { slot, .. } => {
                    ops.push(Op::Load(*slot));
                    *cur += 1;
                }
                Expr::Neg(a) => {
                    emit(a, ops, cur, max);
                    ops.push(Op::Neg);
                }
                Expr::Bin(op, l, r) => {
                    emit(l, ops, cur, max);
                    emit(r, ops, cur, max);
                    ops.push(Op::Bin(*op));
                    *cur -= 1;
                }
                Expr::Call(f, args) => {
                    for a in args {
                        emit(a, ops, cur, max);
                    }
                    ops.push(Op::Call(*f));
                    *cur -= args.len() - 1;
                }
            }
            *max = (*max).max(*cur);
        }
        let mut ops = Vec::new();
        let (mut cur, mut depth) = (0, 0);
        emit(e, &mut ops, &mut cur, &mut depth);
        CompiledExpr { ops, depth }
    }

    /// Evaluates with `slots` bound per the [`VarContext`] layout.
    pub fn eval(&self, slots: &[f64]) -> std::result::Result<f64, String> {
        let mut stack: Vec<f64> = Vec::with_capacity(self.depth);
        for op in &self.ops {
            match *op {
                Op::Const(v) => stack.push(v),
                Op::Load(s) => stack.push(slots[s]),
                Op::Neg => {
                    let v = stack.last_mut().expect("stack underflow");
                    *v = -*v;
                }
                Op::Bin(b) => {
                    let r = stack.pop().expect("stack underflow");
                    let l = stack.last_mut().expect("stack underflow");
                    *l = match b {
                        BinOp::Add => *l + r,
                        BinOp::Sub => *l - r,
                        BinOp::Mul => *l * r,
                        BinOp::Div => {
                            if r == 0.0 {
                                return Err(format!("division by zero ({l} / 0)"));
                            }
                            *l / r
                        }
                        BinOp::Pow => {
                            let v = l.powf(r);
                            if v.is_nan() {
                                return Err(format!("invalid power {l}^{r}"));
                            }
                            v
                        }
                    };
                }
                Op::Call(f) => {
                    if f.arity() == 2 {
                        let r = stack.pop().expect("stack underflow");
                        let l = stack.last_mut().expect("stack underflow");
                        *l = if f == Func::Min { l.min(r) } else { l.max(r) };
                    } else {
                        let v = stack.last_mut().expect("stack underflow");
                        *v = match f {
                            Func::Sin => v.sin(),
                            Func::Cos => v.cos(),
                            Func::Exp => v.exp(),
                            Func::Log => {
                                if *v <= 0.0 {
                                    return Err(format!("log of nonpositive argument {v}"));
                                }
                                v.ln()
                            }
                            Func::Sqrt => {
                                if *v < 0.0 {
                                    return Err(format!("sqrt of negative argument {v}"));
                                }
                                v.sqrt()
                            }
                            Func::Abs => v.abs(),
                            Func::Min | Func::Max => unreachable!(),
                        };
                    }
                }
            }
        }
        let v = stack.pop().expect("empty program");
        if !v.is_finite() {
            return Err(format!("non-finite value {v}"));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProblemKind {
    QuadForm,
    FredholmLQ,
    NonlinearFredholm,
    VolterraLQ,
}

impl ProblemKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "QuadForm" => ProblemKind::QuadForm,
            "FredholmLQ" => ProblemKind::FredholmLQ,
            "NonlinearFredholm" => ProblemKind::NonlinearFredholm,
            "VolterraLQ" => ProblemKind::VolterraLQ,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProblemKind::QuadForm => "QuadForm",
            ProblemKind::FredholmLQ => "FredholmLQ",
            ProblemKind::NonlinearFredholm => "NonlinearFredholm",
            ProblemKind::VolterraLQ => "VolterraLQ",
        }
    }

    /// Names of the two kernel arguments.
    pub fn variables(self) -> (&'static str, &'static str) {
        match self {
            ProblemKind::VolterraLQ => ("t", "s"),
            _ => ("x", "y"),
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Declared shape and arguments of one kernel role.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleSpec {
    pub role: String,
    pub rows: usize,
    pub cols: usize,
    pub arity: Arity,
    pub uses_state: bool,
}

fn role(role: impl Into<String>, rows: usize, cols: usize, arity: Arity, uses_state: bool) -> RoleSpec {
    RoleSpec {
        role: role.into(),
        rows,
        cols,
        arity,
        uses_state,
    }
}

/// Roles required by `kind` with state dimension `n` and control dimension `m`.
pub fn role_table(kind: ProblemKind, n: usize, m: usize) -> Vec<RoleSpec> {
    use Arity::{One, Two};
    match kind {
        ProblemKind::QuadForm => vec![
            role("K1", n, n, One, false),
            role("K2", n, n, Two, false),
            role("r0", n, 1, One, false),
        ],
        ProblemKind::FredholmLQ => vec![
            role("A", n, n, Two, false),
            role("B", n, m, Two, false),
            role("phi0", n, 1, One, false),
            role("P", n, n, One, false),
            role("Q", n, m, One, false),
            role("R", m, m, One, false),
        ],
        ProblemKind::VolterraLQ => vec![
            role("A", n, n, Two, false),
            role("B", n, m, Two, false),
            role("y0", n, 1, One, false),
            role("P", n, n, One, false),
            role("Q", n, m, One, false),
            role("R", m, m, One, false),
        ],
        ProblemKind::NonlinearFredholm => {
            let mut t = vec![
                role("phi0", n, 1, One, false),
                role("f", n, 1, Two, true),
                role("F", n, m, Two, true),
                role("g0", 1, 1, One, true),
                role("g1", m, 1, One, true),
                role("G", m, m, One, true),
                role("grad_f", n, n, Two, true),
                role("grad_g0", n, 1, One, true),
                role("grad_g1", m, n, One, true),
            ];
            for k in 1..=n {
                t.push(role(format!("grad_F{k}"), n, m, Two, true));
            }
            for k in 1..=n {
                t.push(role(format!("grad_G{k}"), m, m, One, true));
            }
            t
        }
    }
}

/// A parsed matrix of expressions for one kernel role.
#[derive(Debug, Clone)]
pub struct KernelExpr {
    pub spec: RoleSpec,
    pub entries: Vec<Expr>,
    compiled: Vec<CompiledExpr>,
}

impl KernelExpr {
    pub fn role(&self) -> &str {
        &self.spec.role
    }

    pub fn expr(&self, r: usize, c: usize) -> &Expr {
        &self.entries[r * self.spec.cols + c]
    }

    /// Evaluates every entry with the given slot values into `out`.
    pub fn eval_into(&self, slots: &[f64], out: &mut DMatrix<f64>) -> std::result::Result<(), String> {
        let cols = self.spec.cols;
        for (k, c) in self.compiled.iter().enumerate() {
            out[(k / cols, k % cols)] = c.eval(slots)?;
        }
        Ok(())
    }

    pub fn eval_at(&self, slots: &[f64]) -> std::result::Result<DMatrix<f64>, String> {
        let mut out = DMatrix::zeros(self.spec.rows, self.spec.cols);
        self.eval_into(slots, &mut out)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub grid_n: usize,
    pub rule: QuadratureRule,
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            grid_n: 65,
            rule: QuadratureRule::Trapezoid,
            tol: 1e-10,
            max_iter: 500,
            damping: 1.0,
        }
    }
}

/// A validated problem definition.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub domain: (f64, f64),
    pub dims: (usize, usize),
    pub kernels: BTreeMap<String, KernelExpr>,
    pub settings: Settings,
}

impl ProblemSpec {
    pub fn kernel(&self, role: &str) -> &KernelExpr {
        self.kernels
            .get(role)
            .unwrap_or_else(|| panic!("validated spec lacks role `{role}`"))
    }

    pub fn state_dim(&self) -> usize {
        self.dims.0
    }

    pub fn control_dim(&self) -> usize {
        self.dims.1
    }

    pub fn grid(&self) -> Result<Arc<Grid>> {
        Grid::new(self.domain.0, self.domain.1, self.settings.grid_n, self.settings.rule)
    }

    /// Evaluates a state-free role onto `grid`.
    pub fn field(&self, role: &str, grid: &Arc<Grid>) -> Result<MatrixKernelField> {
        eval_kernel(self.kernel(role), grid)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDomain {
    a: f64,
    b: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDims {
    n: usize,
    #[serde(default)]
    m: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawSettings {
    grid_n: Option<usize>,
    rule: Option<String>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    damping: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    kind: String,
    domain: RawDomain,
    dims: RawDims,
    kernels: BTreeMap<String, Vec<Vec<String>>>,
    #[serde(default)]
    settings: RawSettings,
}

fn invalid(field: &str, message: impl Into<String>) -> ParseError {
    ParseError::InvalidValue {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Parses and validates a JSON problem document.
pub fn parse_problem(text: &str) -> std::result::Result<ProblemSpec, ParseError> {
    let raw: RawProblem = serde_json::from_str(text).map_err(|e| {
        let (line, column, message) = (e.line(), e.column(), e.to_string());
        match e.classify() {
            serde_json::error::Category::Syntax | serde_json::error::Category::Eof => {
                ParseError::Json { line, column, message }
            }
            _ if message.starts_with("unknown field") => {
                ParseError::UnknownKey { line, column, message }
            }
            _ => ParseError::Schema { line, column, message },
        }
    })?;

    let kind = ProblemKind::parse(&raw.kind).ok_or_else(|| ParseError::UnknownKind(raw.kind.clone()))?;
    let (a, b) = (raw.domain.a, raw.domain.b);
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(invalid("domain", format!("need finite a < b, got [{a}, {b}]")));
    }
    if kind == ProblemKind::VolterraLQ && a != 0.0 {
        return Err(invalid("domain", "Volterra problems start at t = 0"));
    }
    let n = raw.dims.n;
    if n == 0 {
        return Err(invalid("dims.n", "must be positive"));
    }
    let m = match (kind, raw.dims.m) {
        (ProblemKind::QuadForm, m) => m.unwrap_or(1),
        (_, Some(m)) if m > 0 => m,
        (_, Some(_)) => return Err(invalid("dims.m", "must be positive")),
        (_, None) => return Err(invalid("dims.m", "control dimension is required")),
    };

    let defaults = Settings::default();
    let s = raw.settings;
    let settings = Settings {
        grid_n: s.grid_n.unwrap_or(defaults.grid_n),
        rule: match s.rule {
            Some(r) => r.parse().map_err(|e: String| invalid("settings.rule", e))?,
            None => defaults.rule,
        },
        tol: s.tol.unwrap_or(defaults.tol),
        max_iter: s.max_iter.unwrap_or(defaults.max_iter),
        damping: s.damping.unwrap_or(defaults.damping),
    };
    if settings.grid_n < 2 {
        return Err(invalid("settings.grid_n", "need at least 2 nodes"));
    }
    if !(settings.tol > 0.0) {
        return Err(invalid("settings.tol", "must be positive"));
    }
    if !(settings.damping > 0.0 && settings.damping <= 1.0) {
        return Err(invalid("settings.damping", "must lie in (0, 1]"));
    }
    if settings.max_iter == 0 {
        return Err(invalid("settings.max_iter", "must be positive"));
    }

    let table = role_table(kind, n, m);
    for name in raw.kernels.keys() {
        if !table.iter().any(|r| &r.role == name) {
            return Err(ParseError::UnknownRole {
                kind: kind.to_string(),
                role: name.clone(),
            });
        }
    }
    let (v1, v2) = kind.variables();
    let state_dim = if kind == ProblemKind::NonlinearFredholm { n } else { 0 };
    let mut kernels = BTreeMap::new();
    for spec in table {
        let rows_raw = raw.kernels.get(&spec.role).ok_or_else(|| ParseError::MissingRole {
            kind: kind.to_string(),
            role: spec.role.clone(),
        })?;
        let got_rows = rows_raw.len();
        let got_cols = rows_raw.first().map_or(0, |r| r.len());
        if got_rows != spec.rows || rows_raw.iter().any(|r| r.len() != spec.cols) {
            return Err(ParseError::Shape {
                role: spec.role.clone(),
                rows: spec.rows,
                cols: spec.cols,
                got_rows,
                got_cols,
            });
        }
        let second = (spec.arity == Arity::Two).then_some(v2);
        let ctx = VarContext::new(v1, second, if spec.uses_state { state_dim } else { 0 });
        let mut entries = Vec::with_capacity(spec.rows * spec.cols);
        for (r, row) in rows_raw.iter().enumerate() {
            for (c, src) in row.iter().enumerate() {
                let e = parse_expr(src, &ctx).map_err(|err| match err {
                    ExprError::Syntax { column, message } => ParseError::ExprSyntax {
                        role: spec.role.clone(),
                        row: r,
                        col: c,
                        column,
                        message,
                    },
                    ExprError::UnknownIdentifier { column, name } => ParseError::UnknownIdentifier {
                        role: spec.role.clone(),
                        row: r,
                        col: c,
                        column,
                        name,
                    },
                })?;
                entries.push(e);
            }
        }
        let compiled = entries.iter().map(CompiledExpr::compile).collect();
        kernels.insert(
            spec.role.clone(),
            KernelExpr {
                spec,
                entries,
                compiled,
            },
        );
    }

    Ok(ProblemSpec {
        kind,
        domain: (a, b),
        dims: (n, m),
        kernels,
        settings,
    })
}

/// Samples a state-free kernel at the nodes (arity one) or node pairs (arity two).
pub fn eval_kernel(k: &KernelExpr, grid: &Arc<Grid>) -> Result<MatrixKernelField> {
    if k.spec.uses_state {
        return Err(Error::precondition(format!(
            "kernel `{}` depends on the state and cannot be sampled on its own",
            k.spec.role
        )));
    }
    let (rows, cols) = (k.spec.rows, k.spec.cols);
    let nodes = grid.nodes();
    let n = nodes.len();
    let mut slots = [0.0; 2];
    let mut blk = DMatrix::zeros(rows, cols);
    let fail = |loc: String, message: String| Error::Eval {
        role: k.spec.role.clone(),
        location: loc,
        message,
    };
    match k.spec.arity {
        Arity::One => {
            let mut data = DMatrix::zeros(n * rows, cols);
            for (i, &x) in nodes.iter().enumerate() {
                slots[0] = x;
                k.eval_into(&slots, &mut blk)
                    .map_err(|m| fail(format!("node {i} (x = {x})"), m))?;
                data.view_mut((i * rows, 0), (rows, cols)).copy_from(&blk);
            }
            MatrixKernelField::from_data(grid.clone(), Arity::One, rows, cols, data)
        }
        Arity::Two => {
            let mut data = DMatrix::zeros(n * rows, n * cols);
            for (i, &x) in nodes.iter().enumerate() {
                for (j, &y) in nodes.iter().enumerate() {
                    slots[0] = x;
                    slots[1] = y;
                    k.eval_into(&slots, &mut blk)
                        .map_err(|m| fail(format!("node pair ({i}, {j}) = ({x}, {y})"), m))?;
                    data.view_mut((i * rows, j * cols), (rows, cols)).copy_from(&blk);
                }
            }
            MatrixKernelField::from_data(grid.clone(), Arity::Two, rows, cols, data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::make_grid;
    use proptest::prelude::*;

    fn xy() -> VarContext {
        VarContext::new("x", Some("y"), 0)
    }

    fn var(name: &str, slot: usize) -> Expr {
        Expr::Var {
            name: name.into(),
            slot,
        }
    }

    /// Direct recursive interpretation with the same fault rules as the
    /// compiled evaluator, kept independent of the postfix compiler.
    fn tree_walk(e: &Expr, slots: &[f64]) -> Option<f64> {
        fn go(e: &Expr, slots: &[f64]) -> Option<f64> {
            Some(match e {
                Expr::Num(v) => *v,
                Expr::Var { slot, .. } => slots[*slot],
                Expr::Neg(a) => -go(a, slots)?,
                Expr::Bin(op, l, r) => {
                    let (l, r) = (go(l, slots)?, go(r, slots)?);
                    match op {
                        BinOp::Add => l + r,
                        BinOp::Sub => l - r,
                        BinOp::Mul => l * r,
                        BinOp::Div if r == 0.0 => return None,
                        BinOp::Div => l / r,
                        BinOp::Pow if l.powf(r).is_nan() => return None,
                        BinOp::Pow => l.powf(r),
                    }
                }
                Expr::Call(f, args) => {
                    let a = args
                        .iter()
                        .map(|a| go(a, slots))
                        .collect::<Option<Vec<f64>>>()?;
                    match f {
                        Func::Sin => a[0].sin(),
                        Func::Cos => a[0].cos(),
                        Func::Exp => a[0].exp(),
                        Func::Log if a[0] <= 0.0 => return None,
                        Func::Log => a[0].ln(),
                        Func::Sqrt if a[0] < 0.0 => return None,
                        Func::Sqrt => a[0].sqrt(),
                        Func::Abs => a[0].abs(),
                        Func::Min => a[0].min(a[1]),
                        Func::Max => a[0].max(a[1]),
                    }
                }
            })
        }
        go(e, slots).filter(|v| v.is_finite())
    }

    #[test]
    fn grammar_derivation() {
        let e = parse_expr("exp(-(x-y)^2)", &xy()).unwrap();
        let expected = Expr::Call(
            Func::Exp,
            vec![Expr::Neg(Box::new(Expr::Bin(
                BinOp::Pow,
                Box::new(Expr::Bin(BinOp::Sub, Box::new(var("x", 0)), Box::new(var("y", 1)))),
                Box::new(Expr::Num(2.0)),
            )))],
        );
        assert_eq!(e, expected);
    }

    #[test]
    fn precedence_and_associativity() {
        let ctx = xy();
        let ev = |s: &str| CompiledExpr::compile(&parse_expr(s, &ctx).unwrap()).eval(&[2.0, 3.0]).unwrap();
        assert_eq!(ev("-x^2"), -4.0);
        assert_eq!(ev("2^3^2"), 512.0);
        assert_eq!(ev("x - y - 1"), -2.0);
        assert_eq!(ev("x / y * 3"), 2.0);
        assert_eq!(ev("2^-1"), 0.5);
        assert_eq!(ev("1 + 2 * 3"), 7.0);
        assert_eq!(ev("min(x, y) + max(x, y)"), 5.0);
        assert_eq!(ev("1.5e1 + .5"), 15.5);
    }

    #[test]
    fn syntax_error_points_at_the_operator() {
        match parse_expr("x + * y", &xy()) {
            Err(ExprError::Syntax { column, .. }) => assert_eq!(column, 5),
            other => panic!("expected syntax error, got {other:?}"),
        }
        assert!(matches!(parse_expr("(x", &xy()), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse_expr("x y", &xy()), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse_expr("min(x)", &xy()), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse_expr("", &xy()), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse_expr("x # 2", &xy()), Err(ExprError::Syntax { .. })));
    }

    #[test]
    fn unknown_identifiers() {
        let one = VarContext::new("x", None, 0);
        assert!(matches!(
            parse_expr("x + y", &one),
            Err(ExprError::UnknownIdentifier { column: 5, .. })
        ));
        assert!(matches!(
            parse_expr("tan(x)", &one),
            Err(ExprError::UnknownIdentifier { .. })
        ));
        let st = VarContext::new("x", Some("y"), 2);
        assert!(parse_expr("phi1 * phi2 + x", &st).is_ok());
        assert!(parse_expr("phi", &st).is_err());
        assert!(parse_expr("phi", &VarContext::new("x", None, 1)).is_ok());
    }

    #[test]
    fn eval_domain_errors() {
        let ctx = VarContext::new("x", None, 0);
        let c = |s: &str| CompiledExpr::compile(&parse_expr(s, &ctx).unwrap());
        assert!(c("log(x)").eval(&[0.0, 0.0]).is_err());
        assert!(c("sqrt(x)").eval(&[-1.0, 0.0]).is_err());
        assert!(c("1 / x").eval(&[0.0, 0.0]).is_err());
        assert!(c("x ^ 0.5").eval(&[-1.0, 0.0]).is_err());
        assert!(c("exp(x)").eval(&[1000.0, 0.0]).is_err());
        assert_eq!(c("abs(x)").eval(&[-3.0, 0.0]).unwrap(), 3.0);
    }

    const QUAD: &str = r#"{
        "kind": "QuadForm",
        "domain": {"a": 0, "b": 1},
        "dims": {"n": 1},
        "kernels": {"K1": [["1"]], "K2": [["0"]], "r0": [["1"]]}
    }"#;

    #[test]
    fn minimal_quadform_document() {
        let p = parse_problem(QUAD).unwrap();
        assert_eq!(p.kind, ProblemKind::QuadForm);
        assert_eq!(p.dims, (1, 1));
        assert_eq!(p.kernel("K1").spec.rows, 1);
        assert_eq!(p.kernel("K2").spec.arity, Arity::Two);
        assert_eq!(*p.kernel("r0").expr(0, 0), Expr::Num(1.0));
        assert_eq!(p.settings, Settings::default());
    }

    #[test]
    fn distinct_diagnostics() {
        let bad_json = "{\n  \"kind\": \"QuadForm\",\n  \"domain\": {\"a\": 0 \"b\": 1}\n}";
        match parse_problem(bad_json) {
            Err(ParseError::Json { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let unknown_key = QUAD.replace("\"dims\"", "\"extra\": 1, \"dims\"");
        assert!(matches!(parse_problem(&unknown_key), Err(ParseError::UnknownKey { .. })));
        let unknown_role = QUAD.replace("\"r0\"", "\"r1\": [[\"0\"]], \"r0\"");
        assert!(matches!(parse_problem(&unknown_role), Err(ParseError::UnknownRole { .. })));
        let missing = QUAD.replace(", \"r0\": [[\"1\"]]", "");
        assert!(matches!(parse_problem(&missing), Err(ParseError::MissingRole { .. })));
        let shape = QUAD.replace("\"K1\": [[\"1\"]]", "\"K1\": [[\"1\", \"0\"]]");
        assert!(matches!(parse_problem(&shape), Err(ParseError::Shape { .. })));
        let syntax = QUAD.replace("\"K2\": [[\"0\"]]", "\"K2\": [[\"x + * y\"]]");
        match parse_problem(&syntax) {
            Err(ParseError::ExprSyntax { role, column, .. }) => {
                assert_eq!(role, "K2");
                assert_eq!(column, 5);
            }
            other => panic!("{other:?}"),
        }
        let ident = QUAD.replace("\"r0\": [[\"1\"]]", "\"r0\": [[\"y\"]]");
        assert!(matches!(
            parse_problem(&ident),
            Err(ParseError::UnknownIdentifier { .. })
        ));
        let kind = QUAD.replace("QuadForm", "Riccati");
        assert!(matches!(parse_problem(&kind), Err(ParseError::UnknownKind(_))));
        let wrong_type = QUAD.replace("\"a\": 0", "\"a\": \"zero\"");
        assert!(matches!(parse_problem(&wrong_type), Err(ParseError::Schema { .. })));
        let bad_damping = QUAD.replace("\"dims\"", "\"settings\": {\"damping\": 1.5}, \"dims\"");
        assert!(matches!(parse_problem(&bad_damping), Err(ParseError::InvalidValue { .. })));
    }

    #[test]
    fn eval_kernel_examples() {
        let g = make_grid(0.0, 1.0, 3, QuadratureRule::Trapezoid).unwrap();
        let doc = QUAD.replace("\"K1\": [[\"1\"]]", "\"K1\": [[\"x\"]]");
        let p = parse_problem(&doc).unwrap();
        let k1 = p.field("K1", &g).unwrap();
        assert_eq!(k1.data().as_slice(), &[0.0, 0.5, 1.0]);

        let ctx = VarContext::new("t", Some("s"), 0);
        let c = CompiledExpr::compile(&parse_expr("min(t,s)", &ctx).unwrap());
        assert_eq!(c.eval(&[0.25, 0.75]).unwrap(), 0.25);

        let g = make_grid(0.0, 1.0, 32, QuadratureRule::GaussLegendre).unwrap();
        let doc = QUAD.replace("\"K2\": [[\"0\"]]", "\"K2\": [[\"sin(x)*sin(y)\"]]");
        let p = parse_problem(&doc).unwrap();
        let k2 = p.field("K2", &g).unwrap();
        let s: Vec<f64> = g.nodes().iter().map(|x| x.sin()).collect();
        for i in 0..32 {
            for j in 0..32 {
                assert_eq!(k2.at2(i, j)[(0, 0)], s[i] * s[j]);
            }
        }
    }

    #[test]
    fn eval_error_names_the_node() {
        let g = make_grid(0.0, 1.0, 3, QuadratureRule::Trapezoid).unwrap();
        let doc = QUAD.replace("\"K1\": [[\"1\"]]", "\"K1\": [[\"log(x)\"]]");
        let p = parse_problem(&doc).unwrap();
        match p.field("K1", &g) {
            Err(Error::Eval { role, location, .. }) => {
                assert_eq!(role, "K1");
                assert!(location.contains("node 0"));
            }
            other => panic!("{other:?}"),
        }
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..10.0).prop_map(Expr::Num),
            Just(var("x", 0)),
            Just(var("y", 1)),
        ];
        leaf.prop_recursive(5, 48, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (
                    prop_oneof![
                        Just(BinOp::Add),
                        Just(BinOp::Sub),
                        Just(BinOp::Mul),
                        Just(BinOp::Div),
                        Just(BinOp::Pow)
                    ],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, l, r)| Expr::Bin(op, Box::new(l), Box::new(r))),
                (
                    prop_oneof![
                        Just(Func::Sin),
                        Just(Func::Cos),
                        Just(Func::Exp),
                        Just(Func::Log),
                        Just(Func::Sqrt),
                        Just(Func::Abs)
                    ],
                    inner.clone()
                )
                    .prop_map(|(f, a)| Expr::Call(f, vec![a])),
                (prop_oneof![Just(Func::Min), Just(Func::Max)], inner.clone(), inner)
                    .prop_map(|(f, a, b)| Expr::Call(f, vec![a, b])),
            ]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            let printed = e.to_string();
            let back = parse_expr(&printed, &xy()).unwrap();
            prop_assert_eq!(back, e);
        }

        #[test]
        fn compiled_matches_tree_walk(e in arb_expr(), x in -2.0f64..2.0, y in -2.0f64..2.0) {
            let slots = [x, y];
            let expected = tree_walk(&e, &slots);
            let got = CompiledExpr::compile(&e).eval(&slots).ok();
            prop_assert_eq!(got.map(f64::to_bits), expected.map(f64::to_bits));
        }
    }
}
