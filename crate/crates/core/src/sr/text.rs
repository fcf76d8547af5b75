//! Canonical prefix notation for expressions.
//!
//! ```text
//! (+ (* (* 0.000073 (- Tin[t-3] 23.49)) (+ (- Tin[t-3] P[t-3]) (* 0.2614 P[t-72]))) Tin[t-3])
//! ```
//!
//! Operators are `+ - * /` and the unary `neg sin cos exp log sqrt`;
//! variables are `Tin`, `Tout` and `P` with a lag suffix `[t-N]`, `N >= 1`.
//! Constants use the shortest decimal form that reads back bit-identical.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::expr::{variable_symbol, BinaryOp, Expr, LagRef, UnaryOp};
use crate::error::{Error, Result};
use crate::ingest::Channel;

pub fn format_expression(expr: &Expr) -> String {
    let mut out = String::new();
    write_expr(expr, &mut out);
    out
}

fn write_expr(expr: &Expr, out: &mut String) {
    match expr {
        Expr::Var(r) => out.push_str(&r.to_string()),
        Expr::Const(c) => out.push_str(&format_constant(*c)),
        Expr::Unary(op, x) => {
            out.push('(');
            out.push_str(op.symbol());
            out.push(' ');
            write_expr(x, out);
            out.push(')');
        }
        Expr::Binary(op, a, b) => {
            out.push('(');
            out.push_str(op.symbol());
            out.push(' ');
            write_expr(a, out);
            out.push(' ');
            write_expr(b, out);
            out.push(')');
        }
    }
}

fn format_constant(c: f64) -> String {
    // `-0` would read back as a different bit pattern only through `0`.
    if c == 0.0 && c.is_sign_negative() {
        "-0".to_string()
    } else {
        c.to_string()
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_expression(self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Token<'a> {
    Open,
    Close,
    Atom(&'a str),
}

fn tokenize(text: &str) -> Vec<(usize, Token<'_>)> {
    let mut tokens = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'(' => {
                tokens.push((i, Token::Open));
                i += 1;
            }
            b')' => {
                tokens.push((i, Token::Close));
                i += 1;
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len() && !matches!(bytes[i], b'(' | b')') && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                tokens.push((start, Token::Atom(&text[start..i])));
            }
        }
    }
    tokens
}

struct Parser<'a> {
    tokens: Vec<(usize, Token<'a>)>,
    pos: usize,
    end: usize,
}

fn syntax(position: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        position,
        message: message.into(),
    }
}

impl<'a> Parser<'a> {
    fn next(&mut self) -> Result<(usize, Token<'a>)> {
        let t = self
            .tokens
            .get(self.pos)
            .copied()
            .ok_or_else(|| syntax(self.end, "unexpected end of input"))?;
        self.pos += 1;
        Ok(t)
    }

    fn expr(&mut self) -> Result<Expr> {
        match self.next()? {
            (at, Token::Close) => Err(syntax(at, "unexpected `)`")),
            (at, Token::Atom(a)) => parse_atom(a, at),
            (_, Token::Open) => {
                let (at, head) = self.next()?;
                let Token::Atom(symbol) = head else {
                    return Err(syntax(at, "expected an operator"));
                };
                let node = if let Some(op) = BinaryOp::from_symbol(symbol) {
                    let a = self.expr()?;
                    Expr::binary(op, a, self.expr()?)
                } else if let Some(op) = UnaryOp::from_symbol(symbol) {
                    Expr::unary(op, self.expr()?)
                } else {
                    return Err(syntax(at, format!("unknown operator `{symbol}`")));
                };
                match self.next()? {
                    (_, Token::Close) => Ok(node),
                    (at, _) => Err(syntax(at, format!("expected `)` closing `{symbol}`"))),
                }
            }
        }
    }
}

fn parse_atom(atom: &str, at: usize) -> Result<Expr> {
    if let Some(open) = atom.find('[') {
        let name = &atom[..open];
        let channel = Channel::ALL
            .into_iter()
            .find(|c| variable_symbol(*c) == name)
            .ok_or_else(|| syntax(at, format!("unknown variable `{name}`")))?;
        let lag_text = atom[open..]
            .strip_prefix("[t-")
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| syntax(at + open, format!("malformed lag in `{atom}`, expected `[t-N]`")))?;
        let lag: usize = lag_text
            .parse()
            .map_err(|_| syntax(at + open, format!("malformed lag `{lag_text}`")))?;
        if lag == 0 {
            return Err(syntax(at + open, "lag must be at least 1"));
        }
        return Ok(Expr::Var(LagRef::new(channel, lag)));
    }
    let value: f64 = atom
        .parse()
        .map_err(|_| syntax(at, format!("expected a number, variable or `(`, found `{atom}`")))?;
    if !value.is_finite() {
        return Err(syntax(at, format!("non-finite constant `{atom}`")));
    }
    Ok(Expr::Const(value))
}

pub fn parse_expression(text: &str) -> Result<Expr> {
    let mut parser = Parser {
        tokens: tokenize(text),
        pos: 0,
        end: text.len(),
    };
    let expr = parser.expr()?;
    if let Some(&(at, _)) = parser.tokens.get(parser.pos) {
        return Err(syntax(at, "trailing input after expression"));
    }
    Ok(expr)
}

impl std::str::FromStr for Expr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_expression(s)
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&format_expression(self))
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_expression(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const EQ3: &str =
        "(+ (* (* 0.000073 (- Tin[t-3] 23.49)) (+ (- Tin[t-3] P[t-3]) (* 0.2614 P[t-72]))) Tin[t-3])";

    #[test]
    fn canonical_round_trip() {
        let e = parse_expression(EQ3).unwrap();
        assert_eq!(format_expression(&e), EQ3);
        let spaced = EQ3.replace('(', " ( ").replace(' ', "  ");
        assert_eq!(format_expression(&parse_expression(&spaced).unwrap()), EQ3);
    }

    #[test]
    fn unary_and_division() {
        let s = "(/ (sin Tout[t-12]) (neg -2.5))";
        assert_eq!(parse_expression(s).unwrap().to_string(), s);
    }

    #[test]
    fn rejects_bad_text() {
        assert!(matches!(parse_expression("Tin[t-0]"), Err(Error::Syntax { .. })));
        assert!(matches!(
            parse_expression("(+ Tin[t-1] 2"),
            Err(Error::Syntax { position: 13, .. })
        ));
        match parse_expression("(% 1 2)") {
            Err(Error::Syntax { position, .. }) => assert_eq!(position, 1),
            other => panic!("{other:?}"),
        }
        assert!(parse_expression("(+ 1 2) 3").is_err());
        assert!(parse_expression("Q[t-1]").is_err());
        assert!(parse_expression("Tin[3]").is_err());
        assert!(parse_expression("inf").is_err());
        assert!(parse_expression(")").is_err());
        assert!(parse_expression("").is_err());
        assert!(parse_expression("(sin 1 2)").is_err());
    }

    #[test]
    fn serde_uses_canonical_string() {
        let e = parse_expression(EQ3).unwrap();
        let json = serde_json::to_string(&e).unwrap();
        assert_eq!(json, format!("\"{EQ3}\""));
        let back: Expr = serde_json::from_str(&json).unwrap();
        assert_eq!(back, e);
    }
}
