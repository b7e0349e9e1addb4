//! Recursive-descent parser for the formula DSL.
//!
//! ```text
//! formula  := and ( "||" and )*
//! and      := unary ( "&&" unary )*
//! unary    := "!" unary | temporal | "(" formula ")" | atom
//! temporal := ("F" | "G") "[" int "," int "]" "(" formula ")"
//!           | ("U" | "R") "[" int "," int "]" "(" formula "," formula ")"
//! atom     := "pred" "(" ident ")" | linear cmp linear
//! linear   := ["-"] term ( ("+" | "-") term )*
//! term     := number [ "*" var ] | var
//! cmp      := ">" | ">=" | "<" | "<="
//! ```
//!
//! Variables are written `x<i>`. Negation is pushed to the predicates.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{Formula, Interval, Predicate, PredicateFn, PredicateRegistry};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("{line}:{column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{line}:{column}: unsupported negation of named predicate `{name}`")]
    UnsupportedNegation {
        line: usize,
        column: usize,
        name: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Int(usize),
    Ident(String),
    Var(usize),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    And,
    Or,
    Not,
    Plus,
    Minus,
    Star,
    Gt,
    Ge,
    Lt,
    Le,
    Eof,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        let (start_line, start_col) = (line, col);
        let mut advance = 1;
        let tok = match c {
            '\n' => {
                i += 1;
                line += 1;
                col = 1;
                continue;
            }
            c if c.is_whitespace() => {
                i += 1;
                col += 1;
                continue;
            }
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            '[' => Tok::LBracket,
            ']' => Tok::RBracket,
            ',' => Tok::Comma,
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '*' => Tok::Star,
            '&' if chars.get(i + 1) == Some(&'&') => {
                advance = 2;
                Tok::And
            }
            '|' if chars.get(i + 1) == Some(&'|') => {
                advance = 2;
                Tok::Or
            }
            '!' => Tok::Not,
            '>' | '<' => {
                let eq = chars.get(i + 1) == Some(&'=');
                if eq {
                    advance = 2;
                }
                match (c, eq) {
                    ('>', false) => Tok::Gt,
                    ('>', true) => Tok::Ge,
                    ('<', false) => Tok::Lt,
                    _ => Tok::Le,
                }
            }
            c if c.is_ascii_digit() || c == '.' => {
                let mut j = i;
                let mut is_float = false;
                while j < chars.len() && (chars[j].is_ascii_digit() || chars[j] == '.') {
                    is_float |= chars[j] == '.';
                    j += 1;
                }
                if j < chars.len() && (chars[j] == 'e' || chars[j] == 'E') {
                    let mut k = j + 1;
                    if k < chars.len() && (chars[k] == '+' || chars[k] == '-') {
                        k += 1;
                    }
                    if k < chars.len() && chars[k].is_ascii_digit() {
                        is_float = true;
                        j = k;
                        while j < chars.len() && chars[j].is_ascii_digit() {
                            j += 1;
                        }
                    }
                }
                let s: String = chars[i..j].iter().collect();
                advance = j - i;
                let bad = || ParseError::Syntax {
                    line: start_line,
                    column: start_col,
                    message: format!("malformed number `{s}`"),
                };
                if is_float {
                    Tok::Num(s.parse().map_err(|_| bad())?)
                } else {
                    Tok::Int(s.parse().map_err(|_| bad())?)
                }
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut j = i;
                while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
                    j += 1;
                }
                let s: String = chars[i..j].iter().collect();
                advance = j - i;
                match s.strip_prefix('x').map(str::parse::<usize>) {
                    Some(Ok(idx)) => Tok::Var(idx),
                    _ => Tok::Ident(s),
                }
            }
            other => {
                return Err(ParseError::Syntax {
                    line,
                    column: col,
                    message: format!("unexpected character `{other}`"),
                })
            }
        };
        out.push(Spanned {
            tok,
            line: start_line,
            column: start_col,
        });
        i += advance;
        col += advance;
    }
    out.push(Spanned {
        tok: Tok::Eof,
        line,
        column: col,
    });
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Spanned>,
    pos: usize,
    registry: &'a PredicateRegistry,
}

/// Parses a formula with no named predicates available.
pub fn parse(text: &str) -> Result<Formula, ParseError> {
    parse_with(text, &PredicateRegistry::default())
}

pub fn parse_with(text: &str, registry: &PredicateRegistry) -> Result<Formula, ParseError> {
    let mut p = Parser {
        toks: lex(text)?,
        pos: 0,
        registry,
    };
    let f = p.formula()?;
    p.expect(Tok::Eof, "end of input")?;
    Ok(f)
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, ahead: usize) -> &Tok {
        let i = (self.pos + ahead).min(self.toks.len() - 1);
        &self.toks[i].tok
    }

    fn bump(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        let t = &self.toks[self.pos];
        Err(ParseError::Syntax {
            line: t.line,
            column: t.column,
            message: message.into(),
        })
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            self.error(format!("expected {what}, found {:?}", self.peek()))
        }
    }

    fn formula(&mut self) -> Result<Formula, ParseError> {
        let mut parts = vec![self.conjunction()?];
        while *self.peek() == Tok::Or {
            self.bump();
            parts.push(self.conjunction()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Formula::Or(parts)
        })
    }

    fn conjunction(&mut self) -> Result<Formula, ParseError> {
        let mut parts = vec![self.unary()?];
        while *self.peek() == Tok::And {
            self.bump();
            parts.push(self.unary()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Formula::And(parts)
        })
    }

    fn unary(&mut self) -> Result<Formula, ParseError> {
        match self.peek().clone() {
            Tok::Not => {
                let at = self.bump();
                let inner = self.unary()?;
                inner.negate(self.registry).map_err(|e| ParseError::UnsupportedNegation {
                    line: at.line,
                    column: at.column,
                    name: e.0,
                })
            }
            Tok::Ident(name)
                if matches!(name.as_str(), "F" | "G" | "U" | "R") && *self.peek_at(1) == Tok::LBracket =>
            {
                self.temporal(&name)
            }
            Tok::LParen => {
                self.bump();
                let f = self.formula()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(f)
            }
            _ => self.atom(),
        }
    }

    fn interval(&mut self) -> Result<Interval, ParseError> {
        self.expect(Tok::LBracket, "`[`")?;
        let lo = self.int()?;
        self.expect(Tok::Comma, "`,`")?;
        let hi = self.int()?;
        if lo > hi {
            return self.error(format!("empty interval [{lo},{hi}]"));
        }
        self.expect(Tok::RBracket, "`]`")?;
        Ok(Interval { lo, hi })
    }

    fn int(&mut self) -> Result<usize, ParseError> {
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(v)
            }
            other => self.error(format!("expected integer time bound, found {other:?}")),
        }
    }

    fn temporal(&mut self, op: &str) -> Result<Formula, ParseError> {
        self.bump();
        let interval = self.interval()?;
        self.expect(Tok::LParen, "`(`")?;
        let first = self.formula()?;
        let f = match op {
            "F" => Formula::Eventually(interval, Box::new(first)),
            "G" => Formula::Always(interval, Box::new(first)),
            _ => {
                self.expect(Tok::Comma, "`,` between until/release operands")?;
                let second = self.formula()?;
                if op == "U" {
                    Formula::Until(interval, Box::new(first), Box::new(second))
                } else {
                    Formula::Release(interval, Box::new(first), Box::new(second))
                }
            }
        };
        self.expect(Tok::RParen, "`)`")?;
        Ok(f)
    }

    fn atom(&mut self) -> Result<Formula, ParseError> {
        if let Tok::Ident(name) = self.peek().clone() {
            if name == "pred" {
                return self.named();
            }
        }
        let lhs = self.linear()?;
        let (sign, strict) = match self.peek() {
            Tok::Gt => (1.0, true),
            Tok::Ge => (1.0, false),
            Tok::Lt => (-1.0, true),
            Tok::Le => (-1.0, false),
            other => return self.error(format!("expected comparison, found {other:?}")),
        };
        self.bump();
        let rhs = self.linear()?;
        // sign * (lhs - rhs) ⋈ 0
        let mut coeffs: BTreeMap<usize, f64> = BTreeMap::new();
        let mut offset = 0.0;
        for (var, c) in lhs.terms {
            *coeffs.entry(var).or_default() += sign * c;
        }
        for (var, c) in rhs.terms {
            *coeffs.entry(var).or_default() -= sign * c;
        }
        offset += sign * (lhs.constant - rhs.constant);
        if coeffs.is_empty() {
            return self.error("comparison does not mention any state variable");
        }
        Ok(Formula::Pred(Predicate {
            func: PredicateFn::Affine {
                terms: coeffs.into_iter().collect(),
                offset,
            },
            strict,
        }))
    }

    fn named(&mut self) -> Result<Formula, ParseError> {
        self.bump();
        self.expect(Tok::LParen, "`(` after pred")?;
        let name = match self.peek().clone() {
            Tok::Ident(n) => n,
            Tok::Var(i) => format!("x{i}"),
            other => return self.error(format!("expected predicate name, found {other:?}")),
        };
        let entry = match self.registry.get(&name) {
            Some(e) => e.func.clone(),
            None => return self.error(format!("unknown named predicate `{name}`")),
        };
        self.bump();
        self.expect(Tok::RParen, "`)`")?;
        Ok(Formula::Pred(Predicate {
            func: PredicateFn::Named { name, func: entry },
            strict: true,
        }))
    }

    fn linear(&mut self) -> Result<Linear, ParseError> {
        let mut out = Linear::default();
        let mut sign = 1.0;
        if *self.peek() == Tok::Minus {
            self.bump();
            sign = -1.0;
        }
        loop {
            self.term(sign, &mut out)?;
            match self.peek() {
                Tok::Plus => sign = 1.0,
                Tok::Minus => sign = -1.0,
                _ => break,
            }
            self.bump();
        }
        Ok(out)
    }

    fn term(&mut self, sign: f64, out: &mut Linear) -> Result<(), ParseError> {
        match self.peek().clone() {
            Tok::Var(i) => {
                self.bump();
                out.terms.push((i, sign));
            }
            Tok::Num(_) | Tok::Int(_) => {
                let c = match self.bump().tok {
                    Tok::Num(v) => v,
                    Tok::Int(v) => v as f64,
                    _ => unreachable!(),
                };
                if *self.peek() == Tok::Star {
                    self.bump();
                    match self.peek().clone() {
                        Tok::Var(i) => {
                            self.bump();
                            out.terms.push((i, sign * c));
                        }
                        other => return self.error(format!("expected variable after `*`, found {other:?}")),
                    }
                } else {
                    out.constant += sign * c;
                }
            }
            other => return self.error(format!("expected number or variable, found {other:?}")),
        }
        Ok(())
    }
}

#[derive(Default)]
struct Linear {
    terms: Vec<(usize, f64)>,
    constant: f64,
}
