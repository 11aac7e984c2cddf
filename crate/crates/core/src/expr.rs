//! Scalar expressions: parsing, rendering, symbolic differentiation and
//! evaluation over any [`Scalar`].
//!
//! Grammar (whitespace insensitive):
//!
//! ```text
//! expr     := term (('+' | '-') term)*
//! term     := unary (('*' | '/') unary)*
//! unary    := ('-' | '+') unary | power
//! power    := primary ('^' exponent)*
//! exponent := ['-' | '+'] INTEGER | '(' ['-' | '+'] INTEGER ')'
//! primary  := NUMBER | IDENT | FUNC '(' expr ')' | '(' expr ')'
//! FUNC     := sin | cos | exp | log | sqrt
//! ```
//!
//! Exponents are integer literals only, which keeps differentiation total.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
        }
    }

    fn from_name(name: &str) -> Option<UnaryOp> {
        match name {
            "sin" => Some(UnaryOp::Sin),
            "cos" => Some(UnaryOp::Cos),
            "exp" => Some(UnaryOp::Exp),
            "log" => Some(UnaryOp::Log),
            "sqrt" => Some(UnaryOp::Sqrt),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Immutable expression tree. Subtrees are shared through `Arc`.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Arc<str>),
    Unary(UnaryOp, Arc<Expr>),
    Binary(BinaryOp, Arc<Expr>, Arc<Expr>),
    /// Integer power.
    Pow(Arc<Expr>, i32),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at column {column}: {message}")]
    Syntax { column: usize, message: String },
    #[error("unknown identifier '{name}' at column {column}")]
    UnknownIdentifier { name: String, column: usize },
}

impl ParseError {
    pub fn column(&self) -> usize {
        match self {
            ParseError::Syntax { column, .. } | ParseError::UnknownIdentifier { column, .. } => *column,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("domain error in {op} at `{node}`")]
    Domain { op: &'static str, node: String },
    #[error("unbound variable '{0}'")]
    Unbound(String),
}

// ---------------------------------------------------------------------------
// Construction with constant folding
// ---------------------------------------------------------------------------

/// Literal with negative zero normalised away.
fn konst(c: f64) -> Expr {
    Expr::Const(if c == 0.0 { 0.0 } else { c })
}

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(Arc::from(name))
    }

    pub fn zero() -> Expr {
        Expr::Const(0.0)
    }

    pub fn one() -> Expr {
        Expr::Const(1.0)
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    /// Symbolically zero after folding.
    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => konst(x + y),
            (Some(x), _) if x == 0.0 => b,
            (_, Some(y)) if y == 0.0 => a,
            _ => Expr::Binary(BinaryOp::Add, Arc::new(a), Arc::new(b)),
        }
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => konst(x - y),
            (_, Some(y)) if y == 0.0 => a,
            (Some(x), _) if x == 0.0 => Expr::neg(b),
            _ => Expr::Binary(BinaryOp::Sub, Arc::new(a), Arc::new(b)),
        }
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => konst(x * y),
            (Some(x), _) | (_, Some(x)) if x == 0.0 => Expr::zero(),
            (Some(x), _) if x == 1.0 => b,
            (_, Some(y)) if y == 1.0 => a,
            (Some(x), _) if x == -1.0 => Expr::neg(b),
            (_, Some(y)) if y == -1.0 => Expr::neg(a),
            (Some(x), None) => match b.split_coefficient() {
                Some((k, rest)) => Expr::mul(konst(x * k), rest),
                None => Expr::Binary(BinaryOp::Mul, Arc::new(a), Arc::new(b)),
            },
            _ => Expr::Binary(BinaryOp::Mul, Arc::new(a), Arc::new(b)),
        }
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) if y != 0.0 => konst(x / y),
            (_, Some(y)) if y == 1.0 => a,
            (None, Some(y)) if y != 0.0 => match a.split_coefficient() {
                Some((k, rest)) => Expr::mul(konst(k / y), rest),
                None => Expr::Binary(BinaryOp::Div, Arc::new(a), Arc::new(b)),
            },
            _ => Expr::Binary(BinaryOp::Div, Arc::new(a), Arc::new(b)),
        }
    }

    /// `k * rest` with a literal leading coefficient.
    fn split_coefficient(&self) -> Option<(f64, Expr)> {
        match self {
            Expr::Binary(BinaryOp::Mul, l, r) => l.as_const().map(|k| (k, (**r).clone())),
            _ => None,
        }
    }

    pub fn neg(a: Expr) -> Expr {
        match a {
            Expr::Const(c) => konst(-c),
            Expr::Unary(UnaryOp::Neg, inner) => (*inner).clone(),
            _ => match a.split_coefficient() {
                Some((k, rest)) => Expr::mul(konst(-k), rest),
                None => Expr::Unary(UnaryOp::Neg, Arc::new(a)),
            },
        }
    }

    pub fn unary(op: UnaryOp, a: Expr) -> Expr {
        if op == UnaryOp::Neg {
            return Expr::neg(a);
        }
        if let Some(c) = a.as_const() {
            let folded = match op {
                UnaryOp::Sin => Some(c.sin()),
                UnaryOp::Cos => Some(c.cos()),
                UnaryOp::Exp => Some(c.exp()),
                UnaryOp::Log if c > 0.0 => Some(c.ln()),
                UnaryOp::Sqrt if c >= 0.0 => Some(c.sqrt()),
                _ => None,
            };
            if let Some(v) = folded {
                return Expr::Const(v);
            }
        }
        Expr::Unary(op, Arc::new(a))
    }

    pub fn pow(a: Expr, n: i32) -> Expr {
        match (n, a.as_const()) {
            (0, _) => Expr::one(),
            (1, _) => a,
            (_, Some(c)) if c != 0.0 || n > 0 => Expr::Const(c.powi(n)),
            _ => Expr::Pow(Arc::new(a), n),
        }
    }

    pub fn scaled(k: f64, a: Expr) -> Expr {
        Expr::mul(Expr::Const(k), a)
    }

    /// Sum of a sequence, folding as it goes.
    pub fn sum<I: IntoIterator<Item = Expr>>(terms: I) -> Expr {
        terms.into_iter().fold(Expr::zero(), Expr::add)
    }

    /// Names of all variables appearing in the expression.
    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => {
                out.insert(v.to_string());
            }
            Expr::Unary(_, a) | Expr::Pow(a, _) => a.collect_vars(out),
            Expr::Binary(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    /// Replace a variable by an expression.
    pub fn substitute(&self, name: &str, with: &Expr) -> Expr {
        match self {
            Expr::Const(_) => self.clone(),
            Expr::Var(v) if &**v == name => with.clone(),
            Expr::Var(_) => self.clone(),
            Expr::Unary(op, a) => Expr::unary(*op, a.substitute(name, with)),
            Expr::Pow(a, n) => Expr::pow(a.substitute(name, with), *n),
            Expr::Binary(op, a, b) => {
                let (a, b) = (a.substitute(name, with), b.substitute(name, with));
                match op {
                    BinaryOp::Add => Expr::add(a, b),
                    BinaryOp::Sub => Expr::sub(a, b),
                    BinaryOp::Mul => Expr::mul(a, b),
                    BinaryOp::Div => Expr::div(a, b),
                }
            }
        }
    }

    /// Exact partial derivative with respect to `var`.
    pub fn differentiate(&self, var: &str) -> Expr {
        match self {
            Expr::Const(_) => Expr::zero(),
            Expr::Var(v) => {
                if &**v == var {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Expr::Binary(op, a, b) => {
                let da = a.differentiate(var);
                let db = b.differentiate(var);
                let (a, b) = ((**a).clone(), (**b).clone());
                match op {
                    BinaryOp::Add => Expr::add(da, db),
                    BinaryOp::Sub => Expr::sub(da, db),
                    BinaryOp::Mul => Expr::add(Expr::mul(da, b), Expr::mul(a, db)),
                    BinaryOp::Div => {
                        if db.is_zero() {
                            Expr::div(da, b)
                        } else {
                            Expr::div(Expr::sub(Expr::mul(da, b.clone()), Expr::mul(a, db)), Expr::pow(b, 2))
                        }
                    }
                }
            }
            Expr::Pow(a, n) => {
                let da = a.differentiate(var);
                if da.is_zero() {
                    return Expr::zero();
                }
                Expr::mul(Expr::scaled(*n as f64, Expr::pow((**a).clone(), n - 1)), da)
            }
            Expr::Unary(op, a) => {
                let da = a.differentiate(var);
                if da.is_zero() {
                    return Expr::zero();
                }
                let a = (**a).clone();
                match op {
                    UnaryOp::Neg => Expr::neg(da),
                    UnaryOp::Sin => Expr::mul(Expr::unary(UnaryOp::Cos, a), da),
                    UnaryOp::Cos => Expr::neg(Expr::mul(Expr::unary(UnaryOp::Sin, a), da)),
                    UnaryOp::Exp => Expr::mul(Expr::unary(UnaryOp::Exp, a), da),
                    UnaryOp::Log => Expr::div(da, a),
                    UnaryOp::Sqrt => Expr::div(da, Expr::scaled(2.0, Expr::unary(UnaryOp::Sqrt, a))),
                }
            }
        }
    }

    /// Evaluate against a name-keyed environment.
    pub fn evaluate<S: Scalar>(&self, env: &EvalEnv<S>) -> Result<S, EvalError> {
        match self {
            Expr::Const(c) => Ok(S::from_f64(*c)),
            Expr::Var(v) => env.get(v).cloned().ok_or_else(|| EvalError::Unbound(v.to_string())),
            Expr::Unary(op, a) => apply_unary(*op, a.evaluate(env)?, || self.to_string()),
            Expr::Binary(op, a, b) => apply_binary(*op, a.evaluate(env)?, b.evaluate(env)?, || self.to_string()),
            Expr::Pow(a, n) => apply_pow(a.evaluate(env)?, *n, || self.to_string()),
        }
    }

    /// Index-resolved form for repeated evaluation over a fixed variable list.
    pub fn compile(&self, vars: &[String]) -> Result<CompiledExpr, EvalError> {
        Ok(CompiledExpr {
            root: compile_node(self, vars)?,
        })
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(BinaryOp::Add | BinaryOp::Sub, ..) => 1,
            Expr::Binary(BinaryOp::Mul | BinaryOp::Div, ..) => 2,
            Expr::Unary(UnaryOp::Neg, _) => 3,
            Expr::Const(c) if c.is_sign_negative() => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }
}

fn apply_unary<S: Scalar>(op: UnaryOp, a: S, node: impl FnOnce() -> String) -> Result<S, EvalError> {
    Ok(match op {
        UnaryOp::Neg => -a,
        UnaryOp::Sin => a.sin(),
        UnaryOp::Cos => a.cos(),
        UnaryOp::Exp => a.exp(),
        UnaryOp::Log => {
            if !(a.value() > 0.0) {
                return Err(EvalError::Domain {
                    op: "log",
                    node: node(),
                });
            }
            a.ln()
        }
        UnaryOp::Sqrt => {
            if !(a.value() >= 0.0) {
                return Err(EvalError::Domain {
                    op: "sqrt",
                    node: node(),
                });
            }
            a.sqrt()
        }
    })
}

fn apply_binary<S: Scalar>(op: BinaryOp, a: S, b: S, node: impl FnOnce() -> String) -> Result<S, EvalError> {
    Ok(match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => {
            if b.value() == 0.0 {
                return Err(EvalError::Domain {
                    op: "division",
                    node: node(),
                });
            }
            a / b
        }
    })
}

fn apply_pow<S: Scalar>(a: S, n: i32, node: impl FnOnce() -> String) -> Result<S, EvalError> {
    if n < 0 && a.value() == 0.0 {
        return Err(EvalError::Domain {
            op: "negative power",
            node: node(),
        });
    }
    Ok(a.powi(n))
}

// ---------------------------------------------------------------------------
// Evaluation environments
// ---------------------------------------------------------------------------

/// Variable bindings for [`Expr::evaluate`].
#[derive(Clone, Debug)]
pub struct EvalEnv<S> {
    bindings: Vec<(String, S)>,
}

impl<S> Default for EvalEnv<S> {
    fn default() -> Self {
        EvalEnv { bindings: Vec::new() }
    }
}

impl<S> EvalEnv<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, name: &str, value: S) -> Self {
        self.set(name, value);
        self
    }

    pub fn set(&mut self, name: &str, value: S) {
        match self.bindings.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = value,
            None => self.bindings.push((name.to_string(), value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&S> {
        self.bindings.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

impl<S, N: AsRef<str>> FromIterator<(N, S)> for EvalEnv<S> {
    fn from_iter<I: IntoIterator<Item = (N, S)>>(iter: I) -> Self {
        let mut env = EvalEnv::new();
        for (n, v) in iter {
            env.set(n.as_ref(), v);
        }
        env
    }
}

// ---------------------------------------------------------------------------
// Compiled evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum Node {
    Const(f64),
    Var(usize),
    Unary(UnaryOp, Box<Node>, Arc<Expr>),
    Binary(BinaryOp, Box<Node>, Box<Node>, Arc<Expr>),
    Pow(Box<Node>, i32, Arc<Expr>),
}

/// Expression with variables resolved to slot indices.
#[derive(Clone, Debug)]
pub struct CompiledExpr {
    root: Node,
}

fn compile_node(e: &Expr, vars: &[String]) -> Result<Node, EvalError> {
    Ok(match e {
        Expr::Const(c) => Node::Const(*c),
        Expr::Var(v) => Node::Var(
            vars.iter()
                .position(|n| n.as_str() == &**v)
                .ok_or_else(|| EvalError::Unbound(v.to_string()))?,
        ),
        Expr::Unary(op, a) => Node::Unary(*op, Box::new(compile_node(a, vars)?), Arc::new(e.clone())),
        Expr::Binary(op, a, b) => Node::Binary(
            *op,
            Box::new(compile_node(a, vars)?),
            Box::new(compile_node(b, vars)?),
            Arc::new(e.clone()),
        ),
        Expr::Pow(a, n) => Node::Pow(Box::new(compile_node(a, vars)?), *n, Arc::new(e.clone())),
    })
}

fn eval_node<S: Scalar>(node: &Node, slots: &[S]) -> Result<S, EvalError> {
    match node {
        Node::Const(c) => Ok(S::from_f64(*c)),
        Node::Var(i) => Ok(slots[*i].clone()),
        Node::Unary(op, a, src) => apply_unary(*op, eval_node(a, slots)?, || src.to_string()),
        Node::Binary(op, a, b, src) => {
            apply_binary(*op, eval_node(a, slots)?, eval_node(b, slots)?, || src.to_string())
        }
        Node::Pow(a, n, src) => apply_pow(eval_node(a, slots)?, *n, || src.to_string()),
    }
}

impl CompiledExpr {
    /// `slots[i]` is the value of the i-th variable given to [`Expr::compile`].
    pub fn eval<S: Scalar>(&self, slots: &[S]) -> Result<S, EvalError> {
        eval_node(&self.root, slots)
    }

    pub fn is_const(&self) -> Option<f64> {
        match self.root {
            Node::Const(c) => Some(c),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

fn write_child(f: &mut fmt::Formatter<'_>, child: &Expr, min_prec: u8) -> fmt::Result {
    if child.precedence() < min_prec {
        write!(f, "({child})")
    } else {
        write!(f, "{child}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Unary(UnaryOp::Neg, a) => {
                write!(f, "-")?;
                write_child(f, a, 3)
            }
            Expr::Unary(op, a) => write!(f, "{}({a})", op.name()),
            Expr::Binary(op, a, b) => {
                let (sym, prec) = match op {
                    BinaryOp::Add => ("+", 1),
                    BinaryOp::Sub => ("-", 1),
                    BinaryOp::Mul => ("*", 2),
                    BinaryOp::Div => ("/", 2),
                };
                write_child(f, a, prec)?;
                write!(f, " {sym} ")?;
                // same-precedence right operands need parentheses to keep the tree shape
                write_child(f, b, prec + 1)
            }
            Expr::Pow(a, n) => {
                write_child(f, a, 5)?;
                write!(f, "^{n}")
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64, String),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    End,
}

struct Lexer {
    toks: Vec<(Tok, usize)>,
}

fn lex(src: &str) -> Result<Lexer, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let value = text.parse::<f64>().map_err(|_| ParseError::Syntax {
                column: col,
                message: format!("malformed number '{text}'"),
            })?;
            toks.push((Tok::Num(value, text), col));
        } else if c.is_ascii_alphabetic() {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            toks.push((Tok::Ident(chars[start..i].iter().collect()), col));
        } else {
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                _ => {
                    return Err(ParseError::Syntax {
                        column: col,
                        message: format!("unexpected character '{c}'"),
                    })
                }
            };
            toks.push((tok, col));
            i += 1;
        }
    }
    toks.push((Tok::End, chars.len() + 1));
    Ok(Lexer { toks })
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    vars: Option<&'a [&'a str]>,
}

impl Parser<'_> {
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

    fn error<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::Syntax {
            column: self.column(),
            message: message.into(),
        })
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Tok::Op(c @ ('+' | '-')) = *self.peek() {
            self.bump();
            let rhs = self.term()?;
            let op = if c == '+' { BinaryOp::Add } else { BinaryOp::Sub };
            lhs = Expr::Binary(op, Arc::new(lhs), Arc::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Tok::Op(c @ ('*' | '/')) = *self.peek() {
            self.bump();
            let rhs = self.unary()?;
            let op = if c == '*' { BinaryOp::Mul } else { BinaryOp::Div };
            lhs = Expr::Binary(op, Arc::new(lhs), Arc::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Tok::Op('-') => {
                self.bump();
                let inner = self.unary()?;
                Ok(match inner {
                    Expr::Const(c) => Expr::Const(-c),
                    other => Expr::Unary(UnaryOp::Neg, Arc::new(other)),
                })
            }
            Tok::Op('+') => {
                self.bump();
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let mut base = self.primary()?;
        while let Tok::Op('^') = self.peek() {
            self.bump();
            let n = self.exponent()?;
            base = Expr::Pow(Arc::new(base), n);
        }
        Ok(base)
    }

    fn exponent(&mut self) -> Result<i32, ParseError> {
        let parens = matches!(self.peek(), Tok::LParen);
        if parens {
            self.bump();
        }
        let mut sign = 1i64;
        if let Tok::Op(c @ ('-' | '+')) = *self.peek() {
            self.bump();
            if c == '-' {
                sign = -1;
            }
        }
        let col = self.column();
        let n = match self.bump().0 {
            Tok::Num(v, text) if !text.contains(['.', 'e', 'E']) && v <= i32::MAX as f64 => sign * v as i64,
            _ => {
                return Err(ParseError::Syntax {
                    column: col,
                    message: "exponent must be an integer literal".into(),
                })
            }
        };
        if parens {
            if !matches!(self.peek(), Tok::RParen) {
                return self.error("expected ')'");
            }
            self.bump();
        }
        Ok(n as i32)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let col = self.column();
        match self.bump().0 {
            Tok::Num(v, _) => Ok(Expr::Const(v)),
            Tok::Ident(name) => {
                if let Some(op) = UnaryOp::from_name(&name) {
                    if !matches!(self.peek(), Tok::LParen) {
                        return self.error(format!("expected '(' after '{name}'"));
                    }
                    self.bump();
                    let arg = self.expr()?;
                    if !matches!(self.peek(), Tok::RParen) {
                        return self.error("expected ')'");
                    }
                    self.bump();
                    return Ok(Expr::Unary(op, Arc::new(arg)));
                }
                if let Some(vars) = self.vars {
                    if !vars.contains(&name.as_str()) {
                        return Err(ParseError::UnknownIdentifier { name, column: col });
                    }
                }
                Ok(Expr::Var(Arc::from(name.as_str())))
            }
            Tok::LParen => {
                let inner = self.expr()?;
                if !matches!(self.peek(), Tok::RParen) {
                    return self.error("expected ')'");
                }
                self.bump();
                Ok(inner)
            }
            Tok::End => Err(ParseError::Syntax {
                column: col,
                message: "unexpected end of input".into(),
            }),
            t => Err(ParseError::Syntax {
                column: col,
                message: format!("unexpected token {t:?}"),
            }),
        }
    }
}

fn parse_with(src: &str, vars: Option<&[&str]>) -> Result<Expr, ParseError> {
    let lexer = lex(src)?;
    let mut p = Parser {
        toks: lexer.toks,
        pos: 0,
        vars,
    };
    let e = p.expr()?;
    if !matches!(p.peek(), Tok::End) {
        return p.error("unexpected trailing input");
    }
    Ok(e)
}

/// Parse `src`, rejecting identifiers not in `vars`.
pub fn parse_expression(src: &str, vars: &[&str]) -> Result<Expr, ParseError> {
    parse_with(src, Some(vars))
}

/// Parse without checking identifiers against a declared list.
pub fn parse_unchecked(src: &str) -> Result<Expr, ParseError> {
    parse_with(src, None)
}
