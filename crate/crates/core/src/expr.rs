//! Polynomial expression trees over named scalar variables.
//!
//! Objectives and constraints are entered as text in a small infix grammar:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary ('*' unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' integer)*        (right-associative)
//! atom    := number | variable | '(' expr ')'
//! ```
//!
//! Exponents are non-negative integer literals, so every expression is a
//! polynomial and differentiation is total. The printer emits the same
//! grammar, and `parse(print(e))` reproduces `e` for any parsed `e`.
//!
//! Hot loops never evaluate through names: [`Expression::bind`] resolves each
//! variable to a slot index once and returns a [`BoundExpr`] that evaluates
//! against a plain `&[f64]`. Both evaluation paths perform the same floating
//! point operations in the same order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

/// A scalar polynomial expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Expression {
    Constant(f64),
    Variable(String),
    Sum(Vec<Expression>),
    Product(Vec<Expression>),
    Power(Box<Expression>, i32),
    Negate(Box<Expression>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("unexpected character {0:?}")]
    UnexpectedChar(char),
    #[error("unexpected {found}, expected {expected}")]
    UnexpectedToken { found: String, expected: &'static str },
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),
    #[error("exponent must be an integer literal")]
    NonIntegerExponent,
    #[error("exponent must be non-negative")]
    NegativeExponent,
    #[error("exponent overflows")]
    ExponentOverflow,
    #[error("malformed number {0:?}")]
    BadNumber(String),
}

/// Parse failure with the byte offset where it was detected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at position {pos}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub pos: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("variable {0:?} is not bound")]
    Unbound(String),
}

/// Values for named variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment(BTreeMap<String, f64>);

impl Assignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: impl Into<String>, value: f64) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }
}

impl<S: Into<String>> FromIterator<(S, f64)> for Assignment {
    fn from_iter<I: IntoIterator<Item = (S, f64)>>(iter: I) -> Self {
        Assignment(iter.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }
}

/// Parses `text`, accepting only variable tokens listed in `allowed_vars`.
pub fn parse_expr<S: AsRef<str>>(text: &str, allowed_vars: &[S]) -> Result<Expression, ParseError> {
    let tokens = lex(text)?;
    let mut parser =
        Parser { tokens, idx: 0, allowed: allowed_vars.iter().map(|s| s.as_ref()).collect(), end: text.len() };
    let expr = parser.expr()?;
    match parser.peek() {
        None => Ok(expr),
        Some(tok) => Err(ParseError {
            kind: ParseErrorKind::UnexpectedToken { found: tok.tok.describe(), expected: "end of input" },
            pos: tok.pos,
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(String),
    Ident(String),
    Plus,
    Minus,
    Star,
    Caret,
    LParen,
    RParen,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(s) => format!("number {s}"),
            Tok::Ident(s) => format!("identifier {s}"),
            Tok::Plus => "'+'".into(),
            Tok::Minus => "'-'".into(),
            Tok::Star => "'*'".into(),
            Tok::Caret => "'^'".into(),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    pos: usize,
}

fn lex(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let tok = match c {
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '*' => Tok::Star,
            '^' => Tok::Caret,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            '0'..='9' | '.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                out.push(Spanned { tok: Tok::Num(text[start..i].to_string()), pos: start });
                continue;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push(Spanned { tok: Tok::Ident(text[start..i].to_string()), pos: start });
                continue;
            }
            _ => {
                let ch = text[start..].chars().next().unwrap_or(c);
                return Err(ParseError { kind: ParseErrorKind::UnexpectedChar(ch), pos: start });
            }
        };
        out.push(Spanned { tok, pos: start });
        i += 1;
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Spanned>,
    idx: usize,
    allowed: Vec<&'a str>,
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Spanned> {
        self.tokens.get(self.idx)
    }

    fn bump(&mut self) -> Option<Spanned> {
        let t = self.tokens.get(self.idx).cloned();
        self.idx += 1;
        t
    }

    fn here(&self) -> usize {
        self.peek().map_or(self.end, |t| t.pos)
    }

    fn unexpected(&self, expected: &'static str) -> ParseError {
        let found = self.peek().map_or_else(|| "end of input".to_string(), |t| t.tok.describe());
        ParseError { kind: ParseErrorKind::UnexpectedToken { found, expected }, pos: self.here() }
    }

    fn expr(&mut self) -> Result<Expression, ParseError> {
        let mut terms = vec![self.term()?];
        loop {
            match self.peek().map(|t| &t.tok) {
                Some(Tok::Plus) => {
                    self.bump();
                    terms.push(self.term()?);
                }
                Some(Tok::Minus) => {
                    self.bump();
                    terms.push(Expression::negate(self.term()?));
                }
                _ => break,
            }
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { Expression::Sum(terms) })
    }

    fn term(&mut self) -> Result<Expression, ParseError> {
        let mut factors = vec![self.unary()?];
        while let Some(Tok::Star) = self.peek().map(|t| &t.tok) {
            self.bump();
            factors.push(self.unary()?);
        }
        Ok(if factors.len() == 1 { factors.pop().unwrap() } else { Expression::Product(factors) })
    }

    fn unary(&mut self) -> Result<Expression, ParseError> {
        if let Some(Tok::Minus) = self.peek().map(|t| &t.tok) {
            self.bump();
            return Ok(Expression::negate(self.unary()?));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expression, ParseError> {
        let base = self.atom()?;
        if let Some(Tok::Caret) = self.peek().map(|t| &t.tok) {
            self.bump();
            let n = self.exponent()?;
            return Ok(Expression::Power(Box::new(base), n));
        }
        Ok(base)
    }

    fn exponent(&mut self) -> Result<i32, ParseError> {
        let pos = self.here();
        let n: i32 = match self.bump().map(|t| t.tok) {
            Some(Tok::Num(s)) => {
                if s.contains('.') {
                    return Err(ParseError { kind: ParseErrorKind::NonIntegerExponent, pos });
                }
                s.parse().map_err(|_| ParseError { kind: ParseErrorKind::ExponentOverflow, pos })?
            }
            Some(Tok::Minus) => return Err(ParseError { kind: ParseErrorKind::NegativeExponent, pos }),
            Some(_) => return Err(ParseError { kind: ParseErrorKind::NonIntegerExponent, pos }),
            None => {
                self.idx -= 1;
                return Err(self.unexpected("integer exponent"));
            }
        };
        if let Some(Tok::Caret) = self.peek().map(|t| &t.tok) {
            self.bump();
            let rhs = self.exponent()?;
            let rhs = u32::try_from(rhs).map_err(|_| ParseError { kind: ParseErrorKind::NegativeExponent, pos })?;
            return n.checked_pow(rhs).ok_or(ParseError { kind: ParseErrorKind::ExponentOverflow, pos });
        }
        Ok(n)
    }

    fn atom(&mut self) -> Result<Expression, ParseError> {
        let pos = self.here();
        match self.bump().map(|t| t.tok) {
            Some(Tok::Num(s)) => {
                let ok = s.chars().filter(|&c| c == '.').count() <= 1 && s != ".";
                match s.parse::<f64>() {
                    Ok(v) if ok => Ok(Expression::Constant(v)),
                    _ => Err(ParseError { kind: ParseErrorKind::BadNumber(s), pos }),
                }
            }
            Some(Tok::Ident(name)) => {
                if self.allowed.contains(&name.as_str()) {
                    Ok(Expression::Variable(name))
                } else {
                    Err(ParseError { kind: ParseErrorKind::UnknownVariable(name), pos })
                }
            }
            Some(Tok::LParen) => {
                let inner = self.expr()?;
                match self.peek().map(|t| &t.tok) {
                    Some(Tok::RParen) => {
                        self.bump();
                        Ok(inner)
                    }
                    _ => Err(self.unexpected("')'")),
                }
            }
            _ => {
                self.idx -= 1;
                Err(self.unexpected("number, variable or '('"))
            }
        }
    }
}

impl Expression {
    pub fn var(name: impl Into<String>) -> Self {
        Expression::Variable(name.into())
    }

    /// Negation with constant folding.
    pub fn negate(e: Expression) -> Self {
        match e {
            Expression::Constant(c) => Expression::Constant(-c),
            Expression::Negate(inner) => *inner,
            other => Expression::Negate(Box::new(other)),
        }
    }

    /// Sum with constant folding: zero terms vanish, a single term is returned as is.
    pub fn sum(terms: Vec<Expression>) -> Self {
        let mut kept: Vec<Expression> =
            terms.into_iter().filter(|t| !matches!(t, Expression::Constant(c) if *c == 0.0)).collect();
        if kept.iter().all(|t| matches!(t, Expression::Constant(_))) {
            let total = kept.iter().fold(0.0, |acc, t| match t {
                Expression::Constant(c) => acc + c,
                _ => acc,
            });
            return Expression::Constant(total);
        }
        if kept.len() == 1 {
            kept.pop().unwrap()
        } else {
            Expression::Sum(kept)
        }
    }

    /// Product with constant folding: a zero factor annihilates, unit factors vanish.
    pub fn product(factors: Vec<Expression>) -> Self {
        if factors.iter().any(|f| matches!(f, Expression::Constant(c) if *c == 0.0)) {
            return Expression::Constant(0.0);
        }
        let mut coeff = 1.0;
        let mut rest = Vec::with_capacity(factors.len());
        for f in factors {
            match f {
                Expression::Constant(c) => coeff *= c,
                other => rest.push(other),
            }
        }
        if rest.is_empty() {
            return Expression::Constant(coeff);
        }
        if coeff != 1.0 {
            rest.insert(0, Expression::Constant(coeff));
        }
        if rest.len() == 1 {
            rest.pop().unwrap()
        } else {
            Expression::Product(rest)
        }
    }

    /// Integer power with constant folding.
    pub fn power(base: Expression, n: i32) -> Self {
        match (base, n) {
            (_, 0) => Expression::Constant(1.0),
            (b, 1) => b,
            (Expression::Constant(c), n) => Expression::Constant(c.powi(n)),
            (b, n) => Expression::Power(Box::new(b), n),
        }
    }

    /// Evaluates against named values.
    pub fn eval(&self, a: &Assignment) -> Result<f64, ExprError> {
        Ok(match self {
            Expression::Constant(c) => *c,
            Expression::Variable(name) => a.get(name).ok_or_else(|| ExprError::Unbound(name.clone()))?,
            Expression::Sum(terms) => {
                let mut it = terms.iter();
                let first = it.next().map_or(Ok(0.0), |t| t.eval(a))?;
                it.try_fold(first, |acc, t| t.eval(a).map(|v| acc + v))?
            }
            Expression::Product(factors) => {
                let mut it = factors.iter();
                let first = it.next().map_or(Ok(1.0), |t| t.eval(a))?;
                it.try_fold(first, |acc, t| t.eval(a).map(|v| acc * v))?
            }
            Expression::Power(base, n) => base.eval(a)?.powi(*n),
            Expression::Negate(inner) => -inner.eval(a)?,
        })
    }

    /// Symbolic partial derivative with respect to `var`.
    pub fn differentiate(&self, var: &str) -> Expression {
        match self {
            Expression::Constant(_) => Expression::Constant(0.0),
            Expression::Variable(name) => Expression::Constant(if name == var { 1.0 } else { 0.0 }),
            Expression::Sum(terms) => Expression::sum(terms.iter().map(|t| t.differentiate(var)).collect()),
            Expression::Product(factors) => {
                let mut terms = Vec::with_capacity(factors.len());
                for (k, fk) in factors.iter().enumerate() {
                    let dk = fk.differentiate(var);
                    if matches!(dk, Expression::Constant(c) if c == 0.0) {
                        continue;
                    }
                    let mut prod: Vec<Expression> = Vec::with_capacity(factors.len());
                    for (j, fj) in factors.iter().enumerate() {
                        prod.push(if j == k { dk.clone() } else { fj.clone() });
                    }
                    terms.push(Expression::product(prod));
                }
                Expression::sum(terms)
            }
            Expression::Power(base, n) => {
                if *n == 0 {
                    return Expression::Constant(0.0);
                }
                let db = base.differentiate(var);
                Expression::product(vec![
                    Expression::Constant(f64::from(*n)),
                    Expression::power((**base).clone(), n - 1),
                    db,
                ])
            }
            Expression::Negate(inner) => Expression::negate(inner.differentiate(var)),
        }
    }

    /// Names of all variables appearing in the expression.
    pub fn variables(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            Expression::Constant(_) => {}
            Expression::Variable(name) => {
                out.insert(name.as_str());
            }
            Expression::Sum(xs) | Expression::Product(xs) => xs.iter().for_each(|x| x.collect_vars(out)),
            Expression::Power(b, _) | Expression::Negate(b) => b.collect_vars(out),
        }
    }

    /// Renames variables through `map`; names absent from the map are kept.
    pub fn rename(&self, map: &BTreeMap<String, String>) -> Expression {
        match self {
            Expression::Constant(c) => Expression::Constant(*c),
            Expression::Variable(name) => Expression::Variable(map.get(name).cloned().unwrap_or_else(|| name.clone())),
            Expression::Sum(xs) => Expression::Sum(xs.iter().map(|x| x.rename(map)).collect()),
            Expression::Product(xs) => Expression::Product(xs.iter().map(|x| x.rename(map)).collect()),
            Expression::Power(b, n) => Expression::Power(Box::new(b.rename(map)), *n),
            Expression::Negate(b) => Expression::Negate(Box::new(b.rename(map))),
        }
    }

    /// Resolves variables to positions in `slots`.
    pub fn bind<S: AsRef<str>>(&self, slots: &[S]) -> Result<BoundExpr, ExprError> {
        Ok(BoundExpr(self.bind_node(slots)?))
    }

    fn bind_node<S: AsRef<str>>(&self, slots: &[S]) -> Result<Node, ExprError> {
        Ok(match self {
            Expression::Constant(c) => Node::Const(*c),
            Expression::Variable(name) => Node::Slot(
                slots.iter().position(|s| s.as_ref() == name).ok_or_else(|| ExprError::Unbound(name.clone()))?,
            ),
            Expression::Sum(xs) => Node::Sum(xs.iter().map(|x| x.bind_node(slots)).collect::<Result<_, _>>()?),
            Expression::Product(xs) => Node::Product(xs.iter().map(|x| x.bind_node(slots)).collect::<Result<_, _>>()?),
            Expression::Power(b, n) => Node::Power(Box::new(b.bind_node(slots)?), *n),
            Expression::Negate(b) => Node::Negate(Box::new(b.bind_node(slots)?)),
        })
    }

    fn precedence(&self) -> u8 {
        match self {
            Expression::Sum(_) => 1,
            Expression::Product(_) | Expression::Negate(_) => 2,
            Expression::Constant(c) if c.is_sign_negative() => 2,
            Expression::Power(..) => 3,
            Expression::Constant(_) | Expression::Variable(_) => 4,
        }
    }

    fn write_at(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        if self.precedence() < min_prec {
            f.write_str("(")?;
            self.write_bare(f)?;
            f.write_str(")")
        } else {
            self.write_bare(f)
        }
    }

    fn write_bare(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expression::Constant(c) => write!(f, "{c}"),
            Expression::Variable(name) => f.write_str(name),
            Expression::Sum(terms) => {
                for (k, t) in terms.iter().enumerate() {
                    match (k, t) {
                        (0, t) => t.write_at(f, 2)?,
                        (_, Expression::Negate(inner)) => {
                            f.write_str(" - ")?;
                            inner.write_at(f, 2)?;
                        }
                        (_, t) => {
                            f.write_str(" + ")?;
                            t.write_at(f, 2)?;
                        }
                    }
                }
                Ok(())
            }
            Expression::Product(factors) => {
                for (k, x) in factors.iter().enumerate() {
                    if k > 0 {
                        f.write_str("*")?;
                    }
                    // a product nested in a product keeps its own parentheses
                    if matches!(x, Expression::Product(_)) {
                        f.write_str("(")?;
                        x.write_bare(f)?;
                        f.write_str(")")?;
                    } else {
                        x.write_at(f, 2)?;
                    }
                }
                Ok(())
            }
            Expression::Power(base, n) => {
                base.write_at(f, 4)?;
                write!(f, "^{n}")
            }
            Expression::Negate(inner) => {
                f.write_str("-")?;
                inner.write_at(f, 3)
            }
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_bare(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    Slot(usize),
    Sum(Vec<Node>),
    Product(Vec<Node>),
    Power(Box<Node>, i32),
    Negate(Box<Node>),
}

impl Node {
    fn eval(&self, v: &[f64]) -> f64 {
        match self {
            Node::Const(c) => *c,
            Node::Slot(i) => v[*i],
            Node::Sum(xs) => {
                let mut it = xs.iter();
                let first = it.next().map_or(0.0, |x| x.eval(v));
                it.fold(first, |acc, x| acc + x.eval(v))
            }
            Node::Product(xs) => {
                let mut it = xs.iter();
                let first = it.next().map_or(1.0, |x| x.eval(v));
                it.fold(first, |acc, x| acc * x.eval(v))
            }
            Node::Power(b, n) => b.eval(v).powi(*n),
            Node::Negate(b) => -b.eval(v),
        }
    }
}

/// An expression with variables resolved to slot indices.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundExpr(Node);

impl BoundExpr {
    /// Evaluates with slot `k` taking `values[k]`. Panics if a slot is out of range.
    #[inline]
    pub fn eval(&self, values: &[f64]) -> f64 {
        self.0.eval(values)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.0, Node::Const(c) if c == 0.0)
    }
}
