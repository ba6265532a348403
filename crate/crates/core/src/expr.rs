//! One-variable expressions for coefficients and rewards.
//!
//! The grammar covers numeric literals, the variable `x`, named constants,
//! unary minus, `+ - * / ^` (with `^` binding tightest and associating to the
//! right), the functions `exp ln sqrt abs min max pow`, and the piecewise form
//! `if(cond, then, else)` where `cond` compares two sub-expressions with one of
//! `< <= > >= ==`.
//!
//! ```
//! use optstop::expr::Expr;
//!
//! let f = Expr::parse("if(x <= 1, 1, 2)").unwrap();
//! assert_eq!(f.eval(0.5).unwrap(), 1.0);
//! assert_eq!(f.eval(3.0).unwrap(), 2.0);
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("empty expression")]
    Empty,
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at byte {pos}")]
    UnknownIdentifier { name: String, pos: usize },
    #[error("`{func}` takes {expected} argument(s), found {found} (at byte {pos})")]
    Arity {
        func: String,
        expected: usize,
        found: usize,
        pos: usize,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("domain error in `{node}` at x = {x}: {reason}")]
    Domain {
        node: String,
        x: f64,
        reason: &'static str,
    },
    #[error("x = {x} lies outside the expression domain [{lo}, {hi}]")]
    OutsideDomain { x: f64, lo: f64, hi: f64 },
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
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Ln,
    Sqrt,
    Abs,
    Min,
    Max,
    Pow,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "ln" => Func::Ln,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "pow" => Func::Pow,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Pow => "pow",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max | Func::Pow => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
        }
    }

    fn holds(self, a: f64, b: f64) -> bool {
        match self {
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
            CmpOp::Eq => a == b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cond {
    pub lhs: Expr,
    pub op: CmpOp,
    pub rhs: Expr,
}

/// Expression tree. Immutable after parsing.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var,
    Named { name: String, value: f64 },
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
    If(Box<Cond>, Box<Expr>, Box<Expr>),
}

/// Which side of a point a limit is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    At,
    Right,
}

impl Expr {
    pub fn parse(text: &str) -> Result<Expr, ParseError> {
        Self::parse_with(text, &BTreeMap::new())
    }

    /// Parses with a table of named constants in scope (`pi` and `e` are
    /// always available unless shadowed).
    pub fn parse_with(text: &str, constants: &BTreeMap<String, f64>) -> Result<Expr, ParseError> {
        let tokens = lex(text)?;
        if tokens.is_empty() {
            return Err(ParseError::Empty);
        }
        let mut p = Parser {
            tokens,
            pos: 0,
            constants,
            end: text.len(),
        };
        let e = p.expr()?;
        if let Some(t) = p.peek() {
            return Err(ParseError::Syntax {
                pos: t.pos,
                msg: format!("unexpected `{}`", t.kind),
            });
        }
        Ok(e)
    }

    pub fn constant(v: f64) -> Expr {
        Expr::Num(v)
    }

    /// `c · self`.
    pub fn scaled(&self, c: f64) -> Expr {
        Expr::Bin(BinOp::Mul, Box::new(Expr::Num(c)), Box::new(self.clone()))
    }

    /// True if the expression does not depend on `x`.
    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Num(_) | Expr::Named { .. } => true,
            Expr::Var => false,
            Expr::Neg(a) => a.is_constant(),
            Expr::Bin(_, a, b) => a.is_constant() && b.is_constant(),
            Expr::Call(_, args) => args.iter().all(Expr::is_constant),
            Expr::If(c, a, b) => {
                c.lhs.is_constant() && c.rhs.is_constant() && a.is_constant() && b.is_constant()
            }
        }
    }

    pub fn eval(&self, x: f64) -> Result<f64, EvalError> {
        let v = match self {
            Expr::Num(v) => return Ok(*v),
            Expr::Var => return Ok(x),
            Expr::Named { value, .. } => return Ok(*value),
            Expr::Neg(a) => -a.eval(x)?,
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(x)?, b.eval(x)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(self.domain(x, "division by zero"));
                        }
                        a / b
                    }
                    BinOp::Pow => checked_pow(self, x, a, b)?,
                }
            }
            Expr::Call(f, args) => {
                let a = args[0].eval(x)?;
                match f {
                    Func::Exp => a.exp(),
                    Func::Ln => {
                        if a <= 0.0 {
                            return Err(self.domain(x, "logarithm of a non-positive number"));
                        }
                        a.ln()
                    }
                    Func::Sqrt => {
                        if a < 0.0 {
                            return Err(self.domain(x, "square root of a negative number"));
                        }
                        a.sqrt()
                    }
                    Func::Abs => a.abs(),
                    Func::Min => a.min(args[1].eval(x)?),
                    Func::Max => a.max(args[1].eval(x)?),
                    Func::Pow => checked_pow(self, x, a, args[1].eval(x)?)?,
                }
            }
            Expr::If(c, a, b) => {
                return if c.op.holds(c.lhs.eval(x)?, c.rhs.eval(x)?) {
                    a.eval(x)
                } else {
                    b.eval(x)
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.domain(x, "non-finite result"))
        }
    }

    fn domain(&self, x: f64, reason: &'static str) -> EvalError {
        EvalError::Domain {
            node: self.to_string(),
            x,
            reason,
        }
    }

    /// Replaces every piecewise node (and every `abs`, `min`, `max`) by the
    /// branch that is active at `x0` when approached from `side`.
    ///
    /// Ties (the two compared sides equal at `x0`) are broken by evaluating
    /// the comparison a relative distance of 1e-7 to the requested side;
    /// `Side::At` uses the exact comparison at `x0`.
    pub fn branch(&self, x0: f64, side: Side) -> Result<Expr, EvalError> {
        Ok(match self {
            Expr::Num(_) | Expr::Var | Expr::Named { .. } => self.clone(),
            Expr::Neg(a) => Expr::Neg(Box::new(a.branch(x0, side)?)),
            Expr::Bin(op, a, b) => Expr::Bin(
                *op,
                Box::new(a.branch(x0, side)?),
                Box::new(b.branch(x0, side)?),
            ),
            Expr::Call(Func::Abs, args) => {
                let a = args[0].branch(x0, side)?;
                if side_compare(&a, CmpOp::Ge, &Expr::Num(0.0), x0, side)? {
                    a
                } else {
                    Expr::Neg(Box::new(a))
                }
            }
            Expr::Call(f @ (Func::Min | Func::Max), args) => {
                let a = args[0].branch(x0, side)?;
                let b = args[1].branch(x0, side)?;
                let a_le_b = side_compare(&a, CmpOp::Le, &b, x0, side)?;
                if a_le_b == (*f == Func::Min) {
                    a
                } else {
                    b
                }
            }
            Expr::Call(f, args) => Expr::Call(
                *f,
                args.iter()
                    .map(|a| a.branch(x0, side))
                    .collect::<Result<_, _>>()?,
            ),
            Expr::If(c, a, b) => {
                let lhs = c.lhs.branch(x0, side)?;
                let rhs = c.rhs.branch(x0, side)?;
                if side_compare(&lhs, c.op, &rhs, x0, side)? {
                    a.branch(x0, side)?
                } else {
                    b.branch(x0, side)?
                }
            }
        })
    }

    /// Value of the branch active on `side` of `x0`, evaluated at `x0`.
    pub fn limit(&self, x0: f64, side: Side) -> Result<f64, EvalError> {
        self.branch(x0, side)?.eval(x0)
    }

    /// One-sided derivative from a central difference of the active branch.
    pub fn derivative(&self, x0: f64, side: Side, step: f64) -> Result<f64, EvalError> {
        let g = self.branch(x0, side)?;
        match (g.eval(x0 + step), g.eval(x0 - step)) {
            (Ok(a), Ok(b)) => Ok((a - b) / (2.0 * step)),
            (Ok(a), Err(_)) => Ok((a - g.eval(x0)?) / step),
            (Err(_), Ok(b)) => Ok((g.eval(x0)? - b) / step),
            (Err(e), Err(_)) => Err(e),
        }
    }
}

fn side_compare(lhs: &Expr, op: CmpOp, rhs: &Expr, x0: f64, side: Side) -> Result<bool, EvalError> {
    let (a, b) = (lhs.eval(x0)?, rhs.eval(x0)?);
    if a != b || side == Side::At {
        return Ok(op.holds(a, b));
    }
    let delta = 1e-7 * x0.abs().max(1.0);
    let xp = if side == Side::Left { x0 - delta } else { x0 + delta };
    Ok(op.holds(lhs.eval(xp)?, rhs.eval(xp)?))
}

fn checked_pow(node: &Expr, x: f64, a: f64, b: f64) -> Result<f64, EvalError> {
    if a == 0.0 && b < 0.0 {
        return Err(node.domain(x, "division by zero"));
    }
    if a < 0.0 && b.fract() != 0.0 {
        return Err(node.domain(x, "fractional power of a negative number"));
    }
    Ok(a.powf(b))
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) if *v < 0.0 => write!(f, "({v:?})"),
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var => f.write_str("x"),
            Expr::Named { name, .. } => f.write_str(name),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
            Expr::If(c, a, b) => write!(f, "if({} {} {}, {a}, {b})", c.lhs, c.op.symbol(), c.rhs),
        }
    }
}

/// Points where an expression is declared possibly discontinuous or
/// non-smooth, together with the closed domain they live in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakpoints {
    points: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl Breakpoints {
    pub fn new(mut points: Vec<f64>, lo: f64, hi: f64) -> Result<Breakpoints, String> {
        points.sort_by(f64::total_cmp);
        if points.windows(2).any(|w| w[0] == w[1]) {
            return Err("breakpoints must be distinct".into());
        }
        if let Some(p) = points.iter().find(|p| !(**p >= lo && **p <= hi) || !p.is_finite()) {
            return Err(format!("breakpoint {p} lies outside [{lo}, {hi}]"));
        }
        Ok(Breakpoints { points, lo, hi })
    }

    pub fn none(lo: f64, hi: f64) -> Breakpoints {
        Breakpoints {
            points: Vec::new(),
            lo,
            hi,
        }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn contains(&self, x: f64) -> bool {
        self.points.binary_search_by(|p| p.total_cmp(&x)).is_ok()
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneSidedLimits {
    pub left: f64,
    pub right: f64,
    pub value: f64,
}

impl OneSidedLimits {
    /// Upper envelope value `max(value, left, right)`.
    pub fn envelope(&self) -> f64 {
        self.value.max(self.left).max(self.right)
    }
}

/// Left limit, right limit and value of `e` at `x0`, by branch selection.
pub fn one_sided_limits(e: &Expr, bp: &Breakpoints, x0: f64) -> Result<OneSidedLimits, EvalError> {
    let (lo, hi) = bp.domain();
    if !(x0 >= lo && x0 <= hi) {
        return Err(EvalError::OutsideDomain { x: x0, lo, hi });
    }
    let value = e.eval(x0)?;
    if !bp.contains(x0) {
        return Ok(OneSidedLimits {
            left: value,
            right: value,
            value,
        });
    }
    // an endpoint of the domain has only one meaningful side
    let left = if x0 > lo { e.limit(x0, Side::Left)? } else { value };
    let right = if x0 < hi { e.limit(x0, Side::Right)? } else { value };
    Ok(OneSidedLimits { left, right, value })
}

// ---------------------------------------------------------------------------
// lexer and parser

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(&'static str),
    LParen,
    RParen,
    Comma,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(v) => write!(f, "{v}"),
            Tok::Ident(s) => f.write_str(s),
            Tok::Op(s) => f.write_str(s),
            Tok::LParen => f.write_str("("),
            Tok::RParen => f.write_str(")"),
            Tok::Comma => f.write_str(","),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: Tok,
    pos: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == b'.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let s = &text[start..i];
            let v: f64 = s.parse().map_err(|_| ParseError::Syntax {
                pos: start,
                msg: format!("malformed number `{s}`"),
            })?;
            if !v.is_finite() {
                return Err(ParseError::Syntax {
                    pos: start,
                    msg: format!("number `{s}` is out of range"),
                });
            }
            out.push(Token {
                kind: Tok::Num(v),
                pos: start,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token {
                kind: Tok::Ident(text[start..i].to_string()),
                pos: start,
            });
            continue;
        }
        let two = if i + 1 < bytes.len() { &text[i..i + 2] } else { "" };
        let kind = match two {
            "<=" => Some(Tok::Op("<=")),
            ">=" => Some(Tok::Op(">=")),
            "==" => Some(Tok::Op("==")),
            _ => None,
        };
        if let Some(kind) = kind {
            out.push(Token { kind, pos: start });
            i += 2;
            continue;
        }
        let kind = match c {
            b'+' => Tok::Op("+"),
            b'-' => Tok::Op("-"),
            b'*' => Tok::Op("*"),
            b'/' => Tok::Op("/"),
            b'^' => Tok::Op("^"),
            b'<' => Tok::Op("<"),
            b'>' => Tok::Op(">"),
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b',' => Tok::Comma,
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax {
                    pos: start,
                    msg: format!("unexpected character `{ch}`"),
                });
            }
        };
        out.push(Token { kind, pos: start });
        i += 1;
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    constants: &'a BTreeMap<String, f64>,
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn here(&self) -> usize {
        self.peek().map_or(self.end, |t| t.pos)
    }

    fn eat_op(&mut self, ops: &[&'static str]) -> Option<&'static str> {
        match self.peek() {
            Some(Token {
                kind: Tok::Op(o), ..
            }) if ops.contains(o) => {
                let o = *o;
                self.pos += 1;
                Some(o)
            }
            _ => None,
        }
    }

    fn expect(&mut self, want: Tok) -> Result<(), ParseError> {
        match self.peek() {
            Some(t) if t.kind == want => {
                self.pos += 1;
                Ok(())
            }
            Some(t) => Err(ParseError::Syntax {
                pos: t.pos,
                msg: format!("expected `{want}`, found `{}`", t.kind),
            }),
            None => Err(ParseError::Syntax {
                pos: self.end,
                msg: format!("expected `{want}`, found end of input"),
            }),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(op) = self.eat_op(&["+", "-"]) {
            let rhs = self.term()?;
            let op = if op == "+" { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.eat_op(&["*", "/"]) {
            let rhs = self.unary()?;
            let op = if op == "*" { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat_op(&["-"]).is_some() {
            return Ok(match self.unary()? {
                Expr::Num(v) => Expr::Num(-v),
                e => Expr::Neg(Box::new(e)),
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.eat_op(&["^"]).is_some() {
            let exponent = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let Some(tok) = self.peek().cloned() else {
            return Err(ParseError::Syntax {
                pos: self.end,
                msg: "unexpected end of input".into(),
            });
        };
        self.pos += 1;
        match tok.kind {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if matches!(self.peek(), Some(Token { kind: Tok::LParen, .. })) {
                    self.pos += 1;
                    return self.call(&name, tok.pos);
                }
                if name == "x" {
                    return Ok(Expr::Var);
                }
                if let Some(v) = self.constants.get(&name) {
                    return Ok(Expr::Named { name, value: *v });
                }
                match name.as_str() {
                    "pi" => Ok(Expr::Named {
                        name,
                        value: std::f64::consts::PI,
                    }),
                    "e" => Ok(Expr::Named {
                        name,
                        value: std::f64::consts::E,
                    }),
                    _ => Err(ParseError::UnknownIdentifier { name, pos: tok.pos }),
                }
            }
            other => Err(ParseError::Syntax {
                pos: tok.pos,
                msg: format!("unexpected `{other}`"),
            }),
        }
    }

    fn args(&mut self) -> Result<Vec<Expr>, ParseError> {
        let mut args = Vec::new();
        if matches!(self.peek(), Some(Token { kind: Tok::RParen, .. })) {
            self.pos += 1;
            return Ok(args);
        }
        loop {
            args.push(self.expr()?);
            match self.peek().map(|t| &t.kind) {
                Some(Tok::Comma) => self.pos += 1,
                _ => break,
            }
        }
        self.expect(Tok::RParen)?;
        Ok(args)
    }

    fn call(&mut self, name: &str, pos: usize) -> Result<Expr, ParseError> {
        if name == "if" {
            let lhs = self.expr()?;
            let op = match self.eat_op(&["<", "<=", ">", ">=", "=="]) {
                Some("<") => CmpOp::Lt,
                Some("<=") => CmpOp::Le,
                Some(">") => CmpOp::Gt,
                Some(">=") => CmpOp::Ge,
                Some(_) => CmpOp::Eq,
                None => {
                    return Err(ParseError::Syntax {
                        pos: self.here(),
                        msg: "expected a comparison in `if` condition".into(),
                    })
                }
            };
            let rhs = self.expr()?;
            self.expect(Tok::Comma)?;
            let mut rest = self.args()?;
            if rest.len() != 2 {
                return Err(ParseError::Arity {
                    func: "if".into(),
                    expected: 3,
                    found: rest.len() + 1,
                    pos,
                });
            }
            let b = rest.pop().unwrap();
            let a = rest.pop().unwrap();
            return Ok(Expr::If(
                Box::new(Cond { lhs, op, rhs }),
                Box::new(a),
                Box::new(b),
            ));
        }
        let Some(func) = Func::from_name(name) else {
            return Err(ParseError::UnknownIdentifier {
                name: name.to_string(),
                pos,
            });
        };
        let args = self.args()?;
        if args.len() != func.arity() {
            return Err(ParseError::Arity {
                func: name.to_string(),
                expected: func.arity(),
                found: args.len(),
                pos,
            });
        }
        Ok(Expr::Call(func, args))
    }
}
