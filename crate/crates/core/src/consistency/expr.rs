//! A small LaTeX math reader covering the subset that shows up in final
//! answers: arithmetic, `\frac`, `\sqrt`, powers, elementary functions,
//! implicit multiplication and subscripted symbols. Anything outside that
//! subset is reported as unsupported rather than guessed at.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
    Root(Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Sec,
    Csc,
    Cot,
    Sinh,
    Cosh,
    Tanh,
    Arcsin,
    Arccos,
    Arctan,
    Arsinh,
    Arcosh,
    Artanh,
    Ln,
    Log10,
    Exp,
    Abs,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "sec" => Func::Sec,
            "csc" => Func::Csc,
            "cot" => Func::Cot,
            "sinh" => Func::Sinh,
            "cosh" => Func::Cosh,
            "tanh" => Func::Tanh,
            "arcsin" => Func::Arcsin,
            "arccos" => Func::Arccos,
            "arctan" => Func::Arctan,
            "arcsinh" | "arsinh" => Func::Arsinh,
            "arccosh" | "arcosh" => Func::Arcosh,
            "arctanh" | "artanh" => Func::Artanh,
            "ln" => Func::Ln,
            "log" | "lg" => Func::Log10,
            "exp" => Func::Exp,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Tan => x.tan(),
            Func::Sec => 1.0 / x.cos(),
            Func::Csc => 1.0 / x.sin(),
            Func::Cot => 1.0 / x.tan(),
            Func::Sinh => x.sinh(),
            Func::Cosh => x.cosh(),
            Func::Tanh => x.tanh(),
            Func::Arcsin => x.asin(),
            Func::Arccos => x.acos(),
            Func::Arctan => x.atan(),
            Func::Arsinh => x.asinh(),
            Func::Arcosh => x.acosh(),
            Func::Artanh => x.atanh(),
            Func::Ln => x.ln(),
            Func::Log10 => x.log10(),
            Func::Exp => x.exp(),
            Func::Abs => x.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unsupported expression: {0}")]
pub struct Unsupported(pub String);

fn unsupported<T>(msg: impl Into<String>) -> Result<T, Unsupported> {
    Err(Unsupported(msg.into()))
}

impl Expr {
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => {
                out.insert(v.clone());
            }
            Expr::Neg(a) | Expr::Call(_, a) => a.collect_vars(out),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b)
            | Expr::Root(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    /// Evaluates with the given assignment; unknown symbols give NaN.
    pub fn eval(&self, env: &BTreeMap<String, f64>) -> f64 {
        match self {
            Expr::Num(x) => *x,
            Expr::Var(v) => env.get(v).copied().unwrap_or(f64::NAN),
            Expr::Neg(a) => -a.eval(env),
            Expr::Add(a, b) => a.eval(env) + b.eval(env),
            Expr::Sub(a, b) => a.eval(env) - b.eval(env),
            Expr::Mul(a, b) => a.eval(env) * b.eval(env),
            Expr::Div(a, b) => a.eval(env) / b.eval(env),
            Expr::Pow(a, b) => a.eval(env).powf(b.eval(env)),
            Expr::Call(f, a) => f.apply(a.eval(env)),
            Expr::Root(a, n) => a.eval(env).powf(1.0 / n.eval(env)),
        }
    }
}

// ---------------------------------------------------------------------------
// Tokens

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    /// Value and source digits, kept so `\frac12` can be split.
    Num(f64, String),
    Var(String),
    Func(Func),
    Frac,
    Sqrt,
    Op(char),
    Open,
    Close,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Pipe,
}

const UNSUPPORTED_COMMANDS: &[&str] = &[
    "sum", "prod", "int", "iint", "oint", "lim", "partial", "nabla", "infty", "cdots", "ldots",
    "dots", "approx", "le", "leq", "ge", "geq", "neq", "ne", "to", "rightarrow", "Rightarrow",
    "leftarrow", "pm", "mp", "equiv", "sim", "propto", "vec", "hat", "bar", "dot", "ddot",
    "overline", "tilde", "max", "min", "det", "begin", "end", "binom", "choose", "mod", "gcd",
    "in", "forall", "exists", "quad", "qquad", "cases", "matrix", "wedge", "vee", "cap", "cup",
];

const TEXT_COMMANDS: &[&str] = &[
    "text", "mathrm", "mathbf", "mathit", "textrm", "textit", "mathsf", "mathcal", "boldsymbol",
    "mbox",
];

const SIZING_COMMANDS: &[&str] = &[
    "left", "right", "big", "Big", "bigg", "Bigg", "bigl", "bigr", "Bigl", "Bigr", "biggl",
    "biggr", "Biggl", "Biggr", "displaystyle", "textstyle",
];

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
    out: Vec<Tok>,
}

fn tokenize(src: &str) -> Result<Vec<Tok>, Unsupported> {
    let mut lx = Lexer {
        src,
        pos: 0,
        out: Vec::new(),
    };
    lx.run()?;
    Ok(lx.out)
}

impl<'a> Lexer<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.bump();
        }
    }

    /// Raw text of a `{...}` group, braces excluded.
    fn braced_raw(&mut self) -> Result<&'a str, Unsupported> {
        self.skip_ws();
        if self.peek() != Some('{') {
            return unsupported("expected `{`");
        }
        let open = self.pos;
        let close = crate::solution::matching_brace(self.src, open)
            .ok_or_else(|| Unsupported("unbalanced braces".into()))?;
        self.pos = close + 1;
        Ok(&self.src[open + 1..close])
    }

    /// Subscript text after `_`: one character or a braced group.
    fn subscript(&mut self) -> Result<String, Unsupported> {
        self.skip_ws();
        match self.peek() {
            Some('{') => {
                let inner = self.braced_raw()?.trim();
                // `x_{1}` and `x_1` name the same symbol.
                let single = inner.chars().count() == 1
                    || (inner.starts_with('\\') && inner[1..].chars().all(|c| c.is_ascii_alphabetic()));
                if single && !inner.is_empty() {
                    Ok(inner.to_string())
                } else {
                    Ok(format!("{{{inner}}}"))
                }
            }
            Some('\\') => {
                self.bump();
                let name = self.command_name();
                Ok(format!("\\{name}"))
            }
            Some(c) if c.is_ascii_alphanumeric() => {
                self.bump();
                Ok(c.to_string())
            }
            _ => unsupported("malformed subscript"),
        }
    }

    fn command_name(&mut self) -> String {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_alphabetic()) {
            self.bump();
        }
        if self.pos == start {
            if let Some(c) = self.bump() {
                return c.to_string();
            }
        }
        self.src[start..self.pos].to_string()
    }

    /// Appends primes and a subscript to a symbol name.
    fn decorate(&mut self, mut name: String) -> Result<String, Unsupported> {
        loop {
            match self.peek() {
                Some('\'') => {
                    self.bump();
                    name.push('\'');
                }
                Some('_') => {
                    self.bump();
                    name.push('_');
                    name.push_str(&self.subscript()?);
                }
                _ => return Ok(name),
            }
        }
    }

    fn run(&mut self) -> Result<(), Unsupported> {
        while let Some(c) = self.peek() {
            match c {
                c if c.is_whitespace() || c == '~' => {
                    self.bump();
                }
                '0'..='9' | '.' => self.number()?,
                c if c.is_ascii_alphabetic() => {
                    self.bump();
                    let name = self.decorate(c.to_string())?;
                    self.out.push(Tok::Var(name));
                }
                '\\' => self.command()?,
                '+' | '-' | '*' | '/' => {
                    self.bump();
                    self.out.push(Tok::Op(c));
                }
                '^' => {
                    self.bump();
                    self.out.push(Tok::Op('^'));
                    self.skip_ws();
                    // `x^23` means x squared times three.
                    if let Some(d) = self.peek().filter(char::is_ascii_digit) {
                        self.bump();
                        self.out.push(Tok::Num(d.to_digit(10).unwrap() as f64, d.to_string()));
                    }
                }
                '(' => {
                    self.bump();
                    self.out.push(Tok::Open);
                }
                ')' => {
                    self.bump();
                    self.out.push(Tok::Close);
                }
                '[' => {
                    self.bump();
                    self.out.push(Tok::LBracket);
                }
                ']' => {
                    self.bump();
                    self.out.push(Tok::RBracket);
                }
                '{' => {
                    self.bump();
                    self.out.push(Tok::LBrace);
                }
                '}' => {
                    self.bump();
                    self.out.push(Tok::RBrace);
                }
                '|' => {
                    self.bump();
                    self.out.push(Tok::Pipe);
                }
                other => return unsupported(format!("character `{other}`")),
            }
        }
        Ok(())
    }

    fn number(&mut self) -> Result<(), Unsupported> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit() || c == '.') {
            self.bump();
        }
        let text = &self.src[start..self.pos];
        let value: f64 = text
            .parse()
            .map_err(|_| Unsupported(format!("number `{text}`")))?;
        self.out.push(Tok::Num(value, text.to_string()));
        Ok(())
    }

    fn command(&mut self) -> Result<(), Unsupported> {
        self.bump();
        let name = self.command_name();
        match name.as_str() {
            "," | ";" | ":" | "!" | " " => {}
            "{" => self.out.push(Tok::Open),
            "}" => self.out.push(Tok::Close),
            "|" => self.out.push(Tok::Pipe),
            "frac" | "dfrac" | "tfrac" | "cfrac" => self.out.push(Tok::Frac),
            "sqrt" => self.out.push(Tok::Sqrt),
            "cdot" | "times" | "ast" => self.out.push(Tok::Op('*')),
            "div" => self.out.push(Tok::Op('/')),
            "pi" => self.out.push(Tok::Num(PI, "\\pi".into())),
            "operatorname" => {
                let raw = self.braced_raw()?.trim().to_string();
                match Func::from_name(&raw) {
                    Some(f) => self.out.push(Tok::Func(f)),
                    None => return unsupported(format!("operator `{raw}`")),
                }
            }
            n if SIZING_COMMANDS.contains(&n) => {
                self.skip_ws();
                if self.peek() == Some('.') {
                    self.bump();
                }
            }
            n if TEXT_COMMANDS.contains(&n) => {
                let raw = self.braced_raw()?;
                let text: String = raw.split_whitespace().collect::<Vec<_>>().join(" ");
                if let Some(f) = Func::from_name(&text).filter(|_| n == "mathrm" || n == "text") {
                    self.out.push(Tok::Func(f));
                } else if !text.is_empty() {
                    let name = self.decorate(format!("\\{n}{{{text}}}"))?;
                    self.out.push(Tok::Var(name));
                }
            }
            n if UNSUPPORTED_COMMANDS.contains(&n) => return unsupported(format!("command `\\{n}`")),
            n => match Func::from_name(n) {
                Some(f) => self.out.push(Tok::Func(f)),
                None if n.chars().all(|c| c.is_ascii_alphabetic()) && !n.is_empty() => {
                    let name = self.decorate(format!("\\{n}"))?;
                    self.out.push(Tok::Var(name));
                }
                None => return unsupported(format!("command `\\{n}`")),
            },
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parser

pub fn parse(src: &str) -> Result<Expr, Unsupported> {
    let tokens = tokenize(src)?;
    if tokens.is_empty() {
        return unsupported("empty expression");
    }
    let mut p = Parser {
        toks: tokens,
        pos: 0,
        abs_depth: 0,
        depth: 0,
    };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return unsupported(format!("trailing input at token {}", p.pos));
    }
    Ok(e)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
    abs_depth: usize,
    depth: usize,
}

const MAX_NESTING: usize = 128;

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, tok: Tok) -> Result<(), Unsupported> {
        match self.next() {
            Some(t) if t == tok => Ok(()),
            other => unsupported(format!("expected {tok:?}, found {other:?}")),
        }
    }

    fn starts_factor(&self) -> bool {
        match self.peek() {
            Some(Tok::Num(..) | Tok::Var(_) | Tok::Func(_) | Tok::Frac | Tok::Sqrt)
            | Some(Tok::Open | Tok::LBrace | Tok::LBracket) => true,
            Some(Tok::Pipe) => self.abs_depth == 0,
            _ => false,
        }
    }

    fn expr(&mut self) -> Result<Expr, Unsupported> {
        self.nested(Self::sum)
    }

    fn nested<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T, Unsupported>) -> Result<T, Unsupported> {
        if self.depth >= MAX_NESTING {
            return unsupported("expression nested too deeply");
        }
        self.depth += 1;
        let result = f(self);
        self.depth -= 1;
        result
    }

    fn sum(&mut self) -> Result<Expr, Unsupported> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' {
                Expr::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, Unsupported> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Op('*')) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Op('/')) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Expr::Div(Box::new(lhs), Box::new(rhs));
                }
                _ if self.starts_factor() => {
                    let rhs = self.power()?;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, Unsupported> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.nested(Self::unary)?)))
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.nested(Self::unary)
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, Unsupported> {
        let base = self.primary()?;
        if self.peek() == Some(&Tok::Op('^')) {
            self.pos += 1;
            let exp = self.exponent()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    /// Exponent: a braced group, or a single signed primary.
    fn exponent(&mut self) -> Result<Expr, Unsupported> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.nested(Self::exponent)?)))
            }
            _ => self.nested(Self::power),
        }
    }

    /// Argument of `\frac` or `\sqrt`: a braced group or one token, where a
    /// multi-digit number contributes only its first digit.
    fn macro_arg(&mut self) -> Result<Expr, Unsupported> {
        match self.peek().cloned() {
            Some(Tok::LBrace) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(Tok::RBrace)?;
                Ok(e)
            }
            Some(Tok::Num(_, text)) if text.len() > 1 && text.chars().all(|c| c.is_ascii_digit()) => {
                let (first, rest) = text.split_at(1);
                self.toks[self.pos] = Tok::Num(rest.parse().unwrap(), rest.to_string());
                Ok(Expr::Num(first.parse().unwrap()))
            }
            Some(Tok::Num(..) | Tok::Var(_)) => self.primary(),
            other => unsupported(format!("bad macro argument {other:?}")),
        }
    }

    fn primary(&mut self) -> Result<Expr, Unsupported> {
        match self.next() {
            Some(Tok::Num(v, _)) => Ok(Expr::Num(v)),
            Some(Tok::Var(name)) => Ok(Expr::Var(name)),
            Some(Tok::Open) => {
                let e = self.expr()?;
                self.expect(Tok::Close)?;
                Ok(e)
            }
            Some(Tok::LBracket) => {
                let e = self.expr()?;
                self.expect(Tok::RBracket)?;
                Ok(e)
            }
            Some(Tok::LBrace) => {
                let e = self.expr()?;
                self.expect(Tok::RBrace)?;
                Ok(e)
            }
            Some(Tok::Pipe) => {
                self.abs_depth += 1;
                let e = self.expr();
                self.abs_depth -= 1;
                let e = e?;
                self.expect(Tok::Pipe)?;
                Ok(Expr::Call(Func::Abs, Box::new(e)))
            }
            Some(Tok::Frac) => {
                let num = self.macro_arg()?;
                let den = self.macro_arg()?;
                Ok(Expr::Div(Box::new(num), Box::new(den)))
            }
            Some(Tok::Sqrt) => {
                let index = if self.peek() == Some(&Tok::LBracket) {
                    self.pos += 1;
                    let n = self.expr()?;
                    self.expect(Tok::RBracket)?;
                    Some(n)
                } else {
                    None
                };
                let radicand = self.macro_arg()?;
                Ok(match index {
                    Some(n) => Expr::Root(Box::new(radicand), Box::new(n)),
                    None => Expr::Root(Box::new(radicand), Box::new(Expr::Num(2.0))),
                })
            }
            Some(Tok::Func(f)) => {
                // `\sin^2 x` squares the function value.
                let power = if self.peek() == Some(&Tok::Op('^')) {
                    self.pos += 1;
                    Some(self.exponent()?)
                } else {
                    None
                };
                let arg = self.func_arg()?;
                let call = Expr::Call(f, Box::new(arg));
                Ok(match power {
                    Some(p) => Expr::Pow(Box::new(call), Box::new(p)),
                    None => call,
                })
            }
            other => unsupported(format!("unexpected token {other:?}")),
        }
    }

    /// A parenthesized group, or an implicit product that stops before the
    /// next function name or operator.
    fn func_arg(&mut self) -> Result<Expr, Unsupported> {
        if matches!(self.peek(), Some(Tok::Open | Tok::LBrace | Tok::LBracket)) {
            return self.nested(Self::primary);
        }
        let mut arg = self.nested(Self::power)?;
        while self.starts_factor() && !matches!(self.peek(), Some(Tok::Func(_))) {
            let rhs = self.power()?;
            arg = Expr::Mul(Box::new(arg), Box::new(rhs));
        }
        Ok(arg)
    }
}
