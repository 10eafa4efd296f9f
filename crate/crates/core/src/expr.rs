//! Arithmetic expressions over a fixed set of named variables.
//!
//! Grammar (usual precedence, `^` binds tighter than unary minus and is right
//! associative):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := ('-' | '+') unary | power
//! power   := primary ('^' unary)?
//! primary := number | name | name '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Functions: `sin`, `cos`, `exp` and `bump(x, y, cx, cy, r)`, the smooth
//! mollifier `exp(1 - 1/(1 - s))` of `s = ((x-cx)² + (y-cy)²)/r²`, which is 1
//! at the centre and vanishes for `s >= 1`. The constant `pi` is predefined.
//!
//! Parsed trees are differentiated symbolically and compiled to a postfix
//! program for evaluation.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Sin,
    Cos,
    Exp,
    /// k-th derivative of the mollifier profile, as a function of `s`.
    Mollifier(u8),
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

fn num(v: f64) -> Node {
    Node::Num(v)
}

fn add(a: Node, b: Node) -> Node {
    match (&a, &b) {
        (Node::Num(x), Node::Num(y)) => num(x + y),
        (Node::Num(x), _) if *x == 0.0 => b,
        (_, Node::Num(y)) if *y == 0.0 => a,
        _ => Node::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Node, b: Node) -> Node {
    match (&a, &b) {
        (Node::Num(x), Node::Num(y)) => num(x - y),
        (_, Node::Num(y)) if *y == 0.0 => a,
        (Node::Num(x), _) if *x == 0.0 => neg(b),
        _ => Node::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Node, b: Node) -> Node {
    match (&a, &b) {
        (Node::Num(x), Node::Num(y)) => num(x * y),
        (Node::Num(x), _) | (_, Node::Num(x)) if *x == 0.0 => num(0.0),
        (Node::Num(x), _) if *x == 1.0 => b,
        (_, Node::Num(y)) if *y == 1.0 => a,
        _ => Node::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Node, b: Node) -> Node {
    match (&a, &b) {
        (Node::Num(x), _) if *x == 0.0 => num(0.0),
        (_, Node::Num(y)) if *y == 1.0 => a,
        _ => Node::Div(Box::new(a), Box::new(b)),
    }
}

fn neg(a: Node) -> Node {
    match a {
        Node::Num(x) => num(-x),
        Node::Neg(inner) => *inner,
        _ => Node::Neg(Box::new(a)),
    }
}

fn pow(a: Node, b: Node) -> Node {
    match (&a, &b) {
        (Node::Num(x), Node::Num(y)) => num(x.powf(*y)),
        (_, Node::Num(y)) if *y == 1.0 => a,
        (_, Node::Num(y)) if *y == 0.0 => num(1.0),
        _ => Node::Pow(Box::new(a), Box::new(b)),
    }
}

fn call(f: Func, a: Node) -> Node {
    Node::Call(f, Box::new(a))
}

pub(crate) fn mollifier(k: u8, s: f64) -> f64 {
    if s >= 1.0 {
        return 0.0;
    }
    let q = 1.0 / (1.0 - s);
    let m = (1.0 - q).exp();
    match k {
        0 => m,
        1 => -m * q * q,
        _ => m * (q.powi(4) - 2.0 * q.powi(3)),
    }
}

impl Node {
    fn derivative(&self, var: usize) -> Result<Node> {
        Ok(match self {
            Node::Num(_) => num(0.0),
            Node::Var(v) => num(if *v == var { 1.0 } else { 0.0 }),
            Node::Neg(a) => neg(a.derivative(var)?),
            Node::Add(a, b) => add(a.derivative(var)?, b.derivative(var)?),
            Node::Sub(a, b) => sub(a.derivative(var)?, b.derivative(var)?),
            Node::Mul(a, b) => add(mul(a.derivative(var)?, (**b).clone()), mul((**a).clone(), b.derivative(var)?)),
            Node::Div(a, b) => {
                let da = a.derivative(var)?;
                let db = b.derivative(var)?;
                sub(div(da, (**b).clone()), div(mul((**a).clone(), db), pow((**b).clone(), num(2.0))))
            }
            Node::Pow(a, b) => {
                let da = a.derivative(var)?;
                if let Node::Num(c) = **b {
                    mul(mul(num(c), pow((**a).clone(), num(c - 1.0))), da)
                } else {
                    // There is no logarithm in the language, so b must not vary.
                    let db = b.derivative(var)?;
                    if db != num(0.0) {
                        return Err(Error::InvalidArgument(
                            "cannot differentiate a power with a variable exponent".into(),
                        ));
                    }
                    let bm1 = sub((**b).clone(), num(1.0));
                    mul(mul((**b).clone(), pow((**a).clone(), bm1)), da)
                }
            }
            Node::Call(f, a) => {
                let da = a.derivative(var)?;
                if da == num(0.0) {
                    return Ok(num(0.0));
                }
                let outer = match f {
                    Func::Sin => call(Func::Cos, (**a).clone()),
                    Func::Cos => neg(call(Func::Sin, (**a).clone())),
                    Func::Exp => call(Func::Exp, (**a).clone()),
                    Func::Mollifier(k) if *k < 2 => call(Func::Mollifier(k + 1), (**a).clone()),
                    Func::Mollifier(_) => {
                        return Err(Error::InvalidArgument(
                            "bump derivatives above second order are not available".into(),
                        ))
                    }
                };
                mul(outer, da)
            }
        })
    }

    fn compile(&self, ops: &mut Vec<Op>) {
        match self {
            Node::Num(v) => ops.push(Op::Const(*v)),
            Node::Var(i) => ops.push(Op::Var(*i)),
            Node::Neg(a) => {
                a.compile(ops);
                ops.push(Op::Neg);
            }
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) | Node::Pow(a, b) => {
                a.compile(ops);
                b.compile(ops);
                let op = match self {
                    Node::Add(..) => Op::Add,
                    Node::Sub(..) => Op::Sub,
                    Node::Mul(..) => Op::Mul,
                    Node::Div(..) => Op::Div,
                    _ => match **b {
                        Node::Num(c) if c == c.round() && c.abs() <= 64.0 => {
                            ops.pop();
                            Op::PowI(c as i32)
                        }
                        _ => Op::Pow,
                    },
                };
                ops.push(op);
            }
            Node::Call(f, a) => {
                a.compile(ops);
                ops.push(Op::Call(*f));
            }
        }
    }

    fn uses_var(&self, var: usize) -> bool {
        match self {
            Node::Num(_) => false,
            Node::Var(v) => *v == var,
            Node::Neg(a) | Node::Call(_, a) => a.uses_var(var),
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) | Node::Pow(a, b) => {
                a.uses_var(var) || b.uses_var(var)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Var(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    PowI(i32),
    Call(Func),
}

/// A parsed expression together with its compiled program.
#[derive(Clone, PartialEq)]
pub struct Expr {
    source: String,
    vars: Vec<String>,
    tree: Node,
    ops: Vec<Op>,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?} over {:?})", self.source, self.vars)
    }
}

impl Expr {
    /// Parses `src` with the given variable names.
    pub fn parse(src: &str, vars: &[&str]) -> Result<Self> {
        let mut p = Parser { src, pos: 0, vars };
        p.skip_ws();
        if p.pos == src.len() {
            return Err(Error::Syntax { offset: 0, message: "empty expression".into() });
        }
        let tree = p.expr()?;
        p.skip_ws();
        if p.pos != src.len() {
            return Err(Error::Syntax {
                offset: p.pos,
                message: format!("unexpected `{}`", src[p.pos..].chars().next().unwrap()),
            });
        }
        Ok(Self::from_tree(src.to_string(), vars.iter().map(|s| s.to_string()).collect(), tree))
    }

    /// The constant expression `v`.
    pub fn constant(v: f64, vars: &[&str]) -> Self {
        Self::from_tree(format!("{v}"), vars.iter().map(|s| s.to_string()).collect(), num(v))
    }

    fn from_tree(source: String, vars: Vec<String>, tree: Node) -> Self {
        let mut ops = Vec::new();
        tree.compile(&mut ops);
        Expr { source, vars, tree, ops }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn vars(&self) -> &[String] {
        &self.vars
    }

    /// Index of the variable called `name`.
    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v == name)
    }

    /// Symbolic partial derivative with respect to variable `var`.
    pub fn derivative(&self, var: usize) -> Result<Expr> {
        let tree = self.tree.derivative(var)?;
        Ok(Self::from_tree(format!("d/d{}({})", self.vars[var], self.source), self.vars.clone(), tree))
    }

    pub fn is_zero(&self) -> bool {
        self.tree == num(0.0)
    }

    pub fn depends_on(&self, var: usize) -> bool {
        self.tree.uses_var(var)
    }

    /// Evaluates the expression; `values` are indexed like the variable list.
    pub fn eval(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.vars.len());
        let mut stack: Vec<f64> = Vec::with_capacity(16);
        for op in &self.ops {
            match *op {
                Op::Const(v) => stack.push(v),
                Op::Var(i) => stack.push(values[i]),
                Op::Neg => {
                    let a = stack.last_mut().unwrap();
                    *a = -*a;
                }
                Op::PowI(k) => {
                    let a = stack.last_mut().unwrap();
                    *a = a.powi(k);
                }
                Op::Call(f) => {
                    let a = stack.last_mut().unwrap();
                    *a = match f {
                        Func::Sin => a.sin(),
                        Func::Cos => a.cos(),
                        Func::Exp => a.exp(),
                        Func::Mollifier(k) => mollifier(k, *a),
                    };
                }
                Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => {
                    let b = stack.pop().unwrap();
                    let a = stack.last_mut().unwrap();
                    *a = match op {
                        Op::Add => *a + b,
                        Op::Sub => *a - b,
                        Op::Mul => *a * b,
                        Op::Div => *a / b,
                        _ => a.powf(b),
                    };
                }
            }
        }
        stack[0]
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    vars: &'a [&'a str],
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn err<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Syntax { offset, message: message.into() })
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = add(lhs, self.term()?);
            } else if self.eat('-') {
                lhs = sub(lhs, self.term()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = mul(lhs, self.unary()?);
            } else if self.eat('/') {
                lhs = div(lhs, self.unary()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat('-') {
            Ok(neg(self.unary()?))
        } else if self.eat('+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.primary()?;
        if self.eat('^') {
            let exp = self.unary()?;
            Ok(pow(base, exp))
        } else {
            Ok(base)
        }
    }

    fn primary(&mut self) -> Result<Node> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            None => self.err(start, "unexpected end of input"),
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.skip_ws();
                if !self.eat(')') {
                    return self.err(self.pos, "expected `)`");
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_alphabetic() || c == '_' => {
                let name = self.ident();
                self.skip_ws();
                if self.peek() == Some('(') {
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while self.eat(',') {
                        args.push(self.expr()?);
                    }
                    self.skip_ws();
                    if !self.eat(')') {
                        return self.err(self.pos, "expected `)` or `,`");
                    }
                    self.function(name, start, args)
                } else if let Some(i) = self.vars.iter().position(|v| *v == name) {
                    Ok(Node::Var(i))
                } else if name == "pi" {
                    Ok(num(std::f64::consts::PI))
                } else {
                    Err(Error::UnknownIdentifier { name: name.to_string(), offset: start })
                }
            }
            Some(c) => self.err(start, format!("unexpected `{c}`")),
        }
    }

    fn function(&self, name: &str, offset: usize, mut args: Vec<Node>) -> Result<Node> {
        let arity = match name {
            "sin" | "cos" | "exp" => 1,
            "bump" => 5,
            _ => return Err(Error::UnknownIdentifier { name: name.to_string(), offset }),
        };
        if args.len() != arity {
            return self.err(offset, format!("`{name}` takes {arity} argument(s), got {}", args.len()));
        }
        Ok(match name {
            "sin" => call(Func::Sin, args.remove(0)),
            "cos" => call(Func::Cos, args.remove(0)),
            "exp" => call(Func::Exp, args.remove(0)),
            _ => {
                let [x, y, cx, cy, r]: [Node; 5] = args.try_into().unwrap();
                let dx = sub(x, cx);
                let dy = sub(y, cy);
                let s = div(add(pow(dx, num(2.0)), pow(dy, num(2.0))), pow(r, num(2.0)));
                call(Func::Mollifier(0), s)
            }
        })
    }

    fn ident(&mut self) -> &'a str {
        let src = self.src;
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_alphanumeric() || c == '_' {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
        &src[start..self.pos]
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        let mut end = start;
        while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
            end += 1;
        }
        if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
            let mut k = end + 1;
            if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                k += 1;
            }
            if k < bytes.len() && bytes[k].is_ascii_digit() {
                while k < bytes.len() && bytes[k].is_ascii_digit() {
                    k += 1;
                }
                end = k;
            }
        }
        let text = &self.src[start..end];
        match text.parse::<f64>() {
            Ok(v) => {
                self.pos = end;
                Ok(num(v))
            }
            Err(_) => self.err(start, format!("malformed number `{text}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const XY: &[&str] = &["x", "y"];

    fn ev(src: &str, x: f64, y: f64) -> f64 {
        Expr::parse(src, XY).unwrap().eval(&[x, y])
    }

    #[test]
    fn precedence() {
        assert_eq!(ev("1 + 2 * 3", 0.0, 0.0), 7.0);
        assert_eq!(ev("-2^2", 0.0, 0.0), -4.0);
        assert_eq!(ev("2^3^2", 0.0, 0.0), 512.0);
        assert_eq!(ev("(x - y) / 2", 5.0, 1.0), 2.0);
        assert_eq!(ev("8 / 4 / 2", 0.0, 0.0), 1.0);
        assert_eq!(ev("1.5e1 + 2E-1", 0.0, 0.0), 15.2);
        assert!((ev("sin(pi/2) + cos(0) + exp(0)", 0.0, 0.0) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn errors_carry_offsets() {
        assert_eq!(
            Expr::parse("x*(", XY).unwrap_err(),
            Error::Syntax { offset: 3, message: "unexpected end of input".into() }
        );
        assert!(matches!(Expr::parse("x + z", XY), Err(Error::UnknownIdentifier { offset: 4, .. })));
        assert!(matches!(Expr::parse("foo(1)", XY), Err(Error::UnknownIdentifier { offset: 0, .. })));
        assert!(matches!(Expr::parse("1 2", XY), Err(Error::Syntax { offset: 2, .. })));
        assert!(matches!(Expr::parse("", XY), Err(Error::Syntax { offset: 0, .. })));
        assert!(matches!(Expr::parse("bump(x)", XY), Err(Error::Syntax { .. })));
    }

    #[test]
    fn bump_profile() {
        let b = "bump(x, y, 0.5, 0.5, 0.25)";
        assert_eq!(ev(b, 0.5, 0.5), 1.0);
        assert_eq!(ev(b, 0.75, 0.5), 0.0);
        assert_eq!(ev(b, 1.0, 1.0), 0.0);
        assert!(ev(b, 0.6, 0.5) > 0.0 && ev(b, 0.6, 0.5) < 1.0);
    }

    #[test]
    fn symbolic_derivatives_match_differences() {
        let cases = [
            "x^3 * y - sin(x*y)",
            "exp(-x) / (1 + y^2)",
            "bump(x, y, 0.4, 0.6, 0.3) * (1 + x)",
            "cos(2*x)^2 - y/x",
            "(x + 2)^1.5",
        ];
        let h = 1e-6;
        for src in cases {
            let e = Expr::parse(src, XY).unwrap();
            for var in 0..2 {
                let d = e.derivative(var).unwrap();
                for &(x, y) in &[(0.45, 0.55), (0.3, 0.7), (1.2, -0.4)] {
                    let mut p = [x, y];
                    let mut m = [x, y];
                    p[var] += h;
                    m[var] -= h;
                    let fd = (e.eval(&p) - e.eval(&m)) / (2.0 * h);
                    let exact = d.eval(&[x, y]);
                    assert!((fd - exact).abs() < 1e-6 * (1.0 + exact.abs()), "{src} d{var}: {fd} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn bump_derivative_order_limit() {
        let e = Expr::parse("bump(x, y, 0, 0, 1)", XY).unwrap();
        let d2 = e.derivative(0).unwrap().derivative(0).unwrap();
        assert!(d2.eval(&[0.1, 0.2]).is_finite());
        assert!(d2.derivative(1).is_err());
    }

    #[test]
    fn linear_field_jacobian() {
        let e = Expr::parse("x", XY).unwrap();
        assert_eq!(e.derivative(0).unwrap().eval(&[1.0, 2.0]), 1.0);
        assert!(e.derivative(1).unwrap().is_zero());
        assert!(Expr::parse("0", XY).unwrap().is_zero());
    }
}
