use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Channel;

/// Denominators closer to zero than this make protected division return 1.
pub const PROTECTED_DIV_EPS: f64 = 1e-12;

/// A channel value `lag` steps before the predicted step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LagRef {
    pub channel: Channel,
    pub lag: usize,
}

impl LagRef {
    pub fn new(channel: Channel, lag: usize) -> Self {
        LagRef { channel, lag }
    }

    pub fn indoor(lag: usize) -> Self {
        Self::new(Channel::IndoorTemp, lag)
    }

    pub fn outdoor(lag: usize) -> Self {
        Self::new(Channel::OutdoorTemp, lag)
    }

    pub fn power(lag: usize) -> Self {
        Self::new(Channel::HvacPower, lag)
    }
}

pub(crate) fn variable_symbol(channel: Channel) -> &'static str {
    match channel {
        Channel::IndoorTemp => "Tin",
        Channel::OutdoorTemp => "Tout",
        Channel::HvacPower => "P",
    }
}

impl fmt::Display for LagRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[t-{}]", variable_symbol(self.channel), self.lag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    /// `exp(min(x, 50))`.
    Exp,
    /// `ln|x|`, 0 near zero.
    Log,
    /// `sqrt|x|`.
    Sqrt,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 6] = [
        UnaryOp::Neg,
        UnaryOp::Sin,
        UnaryOp::Cos,
        UnaryOp::Exp,
        UnaryOp::Log,
        UnaryOp::Sqrt,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.symbol() == s)
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Exp => x.min(50.0).exp(),
            UnaryOp::Log => {
                if x.abs() < PROTECTED_DIV_EPS {
                    0.0
                } else {
                    x.abs().ln()
                }
            }
            UnaryOp::Sqrt => x.abs().sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    /// Protected: returns 1 when `|denominator| < 1e-12`.
    Div,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 4] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div];

    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.symbol() == s)
    }

    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => {
                if b.abs() < PROTECTED_DIV_EPS {
                    1.0
                } else {
                    a / b
                }
            }
        }
    }
}

/// Expression tree over lagged channel values and constants.
///
/// Nodes are addressed by their preorder index; the root is node 0.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Var(LagRef),
    Const(f64),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

/// Supplies lagged values to [`Expr::evaluate`].
pub trait LagSource {
    fn lagged(&self, var: LagRef) -> Option<f64>;
}

impl LagSource for HashMap<LagRef, f64> {
    fn lagged(&self, var: LagRef) -> Option<f64> {
        self.get(&var).copied()
    }
}

/// Looks lags up in per-channel series at a fixed target position.
#[derive(Debug, Clone, Copy)]
pub struct SeriesCursor<'a> {
    pub series: [&'a [f64]; 3],
    pub position: usize,
}

impl LagSource for SeriesCursor<'_> {
    fn lagged(&self, var: LagRef) -> Option<f64> {
        if var.lag == 0 || var.lag > self.position {
            return None;
        }
        self.series[var.channel.index()].get(self.position - var.lag).copied()
    }
}

impl Expr {
    pub fn var(r: LagRef) -> Self {
        Expr::Var(r)
    }

    pub fn constant(c: f64) -> Self {
        Expr::Const(c)
    }

    pub fn unary(op: UnaryOp, child: Expr) -> Self {
        Expr::Unary(op, Box::new(child))
    }

    pub fn binary(op: BinaryOp, left: Expr, right: Expr) -> Self {
        Expr::Binary(op, Box::new(left), Box::new(right))
    }

    pub fn evaluate(&self, source: &impl LagSource) -> Result<f64> {
        Ok(match self {
            Expr::Var(r) => source
                .lagged(*r)
                .ok_or_else(|| Error::UnresolvedVariable(r.to_string()))?,
            Expr::Const(c) => *c,
            Expr::Unary(op, x) => op.apply(x.evaluate(source)?),
            Expr::Binary(op, a, b) => op.apply(a.evaluate(source)?, b.evaluate(source)?),
        })
    }

    /// Node count.
    pub fn complexity(&self) -> usize {
        match self {
            Expr::Var(_) | Expr::Const(_) => 1,
            Expr::Unary(_, x) => 1 + x.complexity(),
            Expr::Binary(_, a, b) => 1 + a.complexity() + b.complexity(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Var(_) | Expr::Const(_) => 1,
            Expr::Unary(_, x) => 1 + x.depth(),
            Expr::Binary(_, a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Var(_) | Expr::Const(_) => {}
            Expr::Unary(_, x) => x.visit(f),
            Expr::Binary(_, a, b) => {
                a.visit(f);
                b.visit(f);
            }
        }
    }

    pub fn variables(&self) -> Vec<LagRef> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Var(r) = e {
                out.push(*r);
            }
        });
        out
    }

    pub fn max_lag(&self) -> usize {
        self.variables().iter().map(|r| r.lag).max().unwrap_or(0)
    }

    /// Smallest indoor-temperature lag, if any.
    pub fn min_indoor_lag(&self) -> Option<usize> {
        self.variables()
            .iter()
            .filter(|r| r.channel == Channel::IndoorTemp)
            .map(|r| r.lag)
            .min()
    }

    /// Constants in preorder.
    pub fn constants(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Const(c) = e {
                out.push(*c);
            }
        });
        out
    }

    /// Copy with constants replaced in preorder. Extra values are ignored.
    pub fn with_constants(&self, values: &[f64]) -> Expr {
        fn go(e: &Expr, values: &[f64], next: &mut usize) -> Expr {
            match e {
                Expr::Var(r) => Expr::Var(*r),
                Expr::Const(c) => {
                    let v = values.get(*next).copied().unwrap_or(*c);
                    *next += 1;
                    Expr::Const(v)
                }
                Expr::Unary(op, x) => Expr::unary(*op, go(x, values, next)),
                Expr::Binary(op, a, b) => {
                    let a = go(a, values, next);
                    Expr::binary(*op, a, go(b, values, next))
                }
            }
        }
        go(self, values, &mut 0)
    }

    /// Subtree at preorder index `index`.
    pub fn node(&self, index: usize) -> Option<&Expr> {
        let mut found = None;
        let mut i = 0;
        self.visit(&mut |e| {
            if i == index {
                found = Some(e);
            }
            i += 1;
        });
        found
    }

    /// Copy with the subtree at preorder `index` replaced.
    pub fn replace_node(&self, index: usize, replacement: Expr) -> Expr {
        fn go(e: &Expr, index: usize, next: &mut usize, replacement: &mut Option<Expr>) -> Expr {
            let me = *next;
            *next += 1;
            if me == index {
                *next += e.complexity() - 1;
                return replacement.take().expect("replaced once");
            }
            match e {
                Expr::Var(_) | Expr::Const(_) => e.clone(),
                Expr::Unary(op, x) => Expr::unary(*op, go(x, index, next, replacement)),
                Expr::Binary(op, a, b) => {
                    let a = go(a, index, next, replacement);
                    Expr::binary(*op, a, go(b, index, next, replacement))
                }
            }
        }
        let mut replacement = Some(replacement);
        go(self, index, &mut 0, &mut replacement)
    }

    /// Collapses operator nodes whose operands are all constants.
    pub fn fold_constants(&self) -> Expr {
        match self {
            Expr::Var(_) | Expr::Const(_) => self.clone(),
            Expr::Unary(op, x) => match x.fold_constants() {
                Expr::Const(c) => Expr::Const(op.apply(c)),
                folded => Expr::unary(*op, folded),
            },
            Expr::Binary(op, a, b) => match (a.fold_constants(), b.fold_constants()) {
                (Expr::Const(x), Expr::Const(y)) => Expr::Const(op.apply(x, y)),
                (fa, fb) => Expr::binary(*op, fa, fb),
            },
        }
    }

    /// Checks the complexity bound and that every lag lies in `1..=lag_budget`.
    pub fn validate(&self, max_complexity: usize, lag_budget: usize) -> Result<()> {
        let complexity = self.complexity();
        if complexity > max_complexity {
            return Err(Error::InvalidArgument(format!(
                "expression has {complexity} nodes, limit is {max_complexity}"
            )));
        }
        if let Some(r) = self.variables().into_iter().find(|r| r.lag == 0 || r.lag > lag_budget) {
            return Err(Error::InvalidArgument(format!(
                "{r} is outside the lag budget 1..={lag_budget}"
            )));
        }
        if let Some(c) = self.constants().into_iter().find(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite constant {c}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Expr {
        // (+ (* 2 Tin[t-1]) 3)
        Expr::binary(
            BinaryOp::Add,
            Expr::binary(BinaryOp::Mul, Expr::constant(2.0), Expr::var(LagRef::indoor(1))),
            Expr::constant(3.0),
        )
    }

    #[test]
    fn evaluates_affine_expression() {
        let row = HashMap::from([(LagRef::indoor(1), 5.0)]);
        assert_eq!(sample().evaluate(&row).unwrap(), 13.0);
        assert!(matches!(
            sample().evaluate(&HashMap::new()),
            Err(Error::UnresolvedVariable(_))
        ));
    }

    #[test]
    fn protected_operators() {
        assert_eq!(BinaryOp::Div.apply(3.0, 0.0), 1.0);
        assert_eq!(BinaryOp::Div.apply(3.0, 1e-13), 1.0);
        assert_eq!(BinaryOp::Div.apply(3.0, 2.0), 1.5);
        assert_eq!(UnaryOp::Log.apply(0.0), 0.0);
        assert_eq!(UnaryOp::Sqrt.apply(-4.0), 2.0);
        assert!(UnaryOp::Exp.apply(1e6).is_finite());
    }

    #[test]
    fn structure_queries() {
        let e = sample();
        assert_eq!(e.complexity(), 5);
        assert_eq!(e.depth(), 3);
        assert_eq!(e.constants(), vec![2.0, 3.0]);
        assert_eq!(e.with_constants(&[4.0, 1.0]).constants(), vec![4.0, 1.0]);
        assert_eq!(e.node(2), Some(&Expr::constant(2.0)));
        assert_eq!(e.node(5), None);
        let r = e.replace_node(1, Expr::var(LagRef::power(4)));
        assert_eq!(r.complexity(), 3);
        assert_eq!(r.variables(), vec![LagRef::power(4)]);
        assert_eq!(e.replace_node(0, Expr::constant(1.0)), Expr::constant(1.0));
        assert_eq!(e.replace_node(4, Expr::constant(7.0)).constants(), vec![2.0, 7.0]);
    }

    #[test]
    fn folding_and_validation() {
        let e = Expr::binary(
            BinaryOp::Add,
            Expr::var(LagRef::indoor(3)),
            Expr::binary(BinaryOp::Mul, Expr::constant(2.0), Expr::constant(4.0)),
        );
        assert_eq!(
            e.fold_constants(),
            Expr::binary(BinaryOp::Add, Expr::var(LagRef::indoor(3)), Expr::constant(8.0))
        );
        assert!(e.validate(5, 288).is_ok());
        assert!(e.validate(4, 288).is_err());
        assert!(e.validate(5, 2).is_err());
        assert!(Expr::var(LagRef::indoor(0)).validate(5, 288).is_err());
    }

    #[test]
    fn series_cursor_lookup() {
        let tin = [1.0, 2.0, 3.0, 4.0];
        let zeros = [0.0; 4];
        let cursor = SeriesCursor {
            series: [&tin, &zeros, &zeros],
            position: 3,
        };
        assert_eq!(cursor.lagged(LagRef::indoor(1)), Some(3.0));
        assert_eq!(cursor.lagged(LagRef::indoor(3)), Some(1.0));
        assert_eq!(cursor.lagged(LagRef::indoor(4)), None);
        assert_eq!(cursor.lagged(LagRef::indoor(0)), None);
    }
}
