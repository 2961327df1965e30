//! Closed-form field configurations as expression trees with exact symbolic
//! partial derivatives.

use std::fmt;

use crate::error::ParseError;

/// A smooth function `R^d -> R` built from constants, coordinates, sums,
/// products, integer powers, `exp`, `sin`, `cos` and a ball window.
///
/// `Window` evaluates `inner` inside the open ball and `0` outside. It is only
/// smooth when `inner` and all its derivatives vanish at the sphere, which is
/// the case for the bump `exp(-1/(1 - |x-c|^2/r^2))` built by [`Expr::bump`].
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Coord(usize),
    Add(Vec<Expr>),
    Mul(Vec<Expr>),
    Pow(Box<Expr>, i32),
    Exp(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Window {
        center: Vec<f64>,
        radius: f64,
        inner: Box<Expr>,
    },
}

// beyond this the bump profile is below exp(-700)
const WINDOW_EDGE: f64 = 1.0 - 1.0 / 700.0;

pub type FieldConfiguration = Expr;

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn coord(i: usize) -> Expr {
        Expr::Coord(i)
    }

    pub fn zero() -> Expr {
        Expr::Const(0.0)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn add(terms: Vec<Expr>) -> Expr {
        let mut out = Vec::with_capacity(terms.len());
        let mut konst = 0.0;
        for t in terms {
            match t {
                Expr::Const(c) => konst += c,
                Expr::Add(inner) => {
                    for u in inner {
                        match u {
                            Expr::Const(c) => konst += c,
                            other => out.push(other),
                        }
                    }
                }
                other => out.push(other),
            }
        }
        if konst != 0.0 {
            out.push(Expr::Const(konst));
        }
        match out.len() {
            0 => Expr::zero(),
            1 => out.pop().unwrap(),
            _ => Expr::Add(out),
        }
    }

    pub fn mul(factors: Vec<Expr>) -> Expr {
        let mut out = Vec::with_capacity(factors.len());
        let mut konst = 1.0;
        for f in factors {
            match f {
                Expr::Const(c) => konst *= c,
                Expr::Mul(inner) => {
                    for u in inner {
                        match u {
                            Expr::Const(c) => konst *= c,
                            other => out.push(other),
                        }
                    }
                }
                other => out.push(other),
            }
        }
        if konst == 0.0 {
            return Expr::zero();
        }
        if konst != 1.0 || out.is_empty() {
            out.insert(0, Expr::Const(konst));
        }
        match out.len() {
            1 => out.pop().unwrap(),
            _ => Expr::Mul(out),
        }
    }

    pub fn scale(self, c: f64) -> Expr {
        Expr::mul(vec![Expr::Const(c), self])
    }

    pub fn powi(self, n: i32) -> Expr {
        match (self, n) {
            (_, 0) => Expr::Const(1.0),
            (e, 1) => e,
            (Expr::Const(c), n) => Expr::Const(c.powi(n)),
            (Expr::Pow(b, m), n) => Expr::Pow(b, m * n),
            (e, n) => Expr::Pow(Box::new(e), n),
        }
    }

    pub fn exp(self) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(c.exp()),
            e => Expr::Exp(Box::new(e)),
        }
    }

    pub fn sin(self) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(c.sin()),
            e => Expr::Sin(Box::new(e)),
        }
    }

    pub fn cos(self) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(c.cos()),
            e => Expr::Cos(Box::new(e)),
        }
    }

    /// `amplitude * exp(-1/(1 - |x-c|^2/r^2))` inside the ball, zero outside.
    pub fn bump(center: &[f64], radius: f64, amplitude: f64) -> Expr {
        let s = Expr::add(
            center
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    Expr::add(vec![Expr::Coord(i), Expr::Const(-c)])
                        .powi(2)
                        .scale(1.0 / (radius * radius))
                })
                .collect(),
        );
        let one_minus_s = Expr::add(vec![Expr::Const(1.0), s.scale(-1.0)]);
        let inner = Expr::mul(vec![
            Expr::Const(amplitude),
            one_minus_s.powi(-1).scale(-1.0).exp(),
        ]);
        Expr::Window {
            center: center.to_vec(),
            radius,
            inner: Box::new(inner),
        }
    }

    /// Largest coordinate index used plus one.
    pub fn dimension_hint(&self) -> usize {
        match self {
            Expr::Const(_) => 0,
            Expr::Coord(i) => i + 1,
            Expr::Add(v) | Expr::Mul(v) => v.iter().map(Expr::dimension_hint).max().unwrap_or(0),
            Expr::Pow(b, _) | Expr::Exp(b) | Expr::Sin(b) | Expr::Cos(b) => b.dimension_hint(),
            Expr::Window { center, inner, .. } => center.len().max(inner.dimension_hint()),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Coord(i) => x.get(*i).copied().unwrap_or(0.0),
            Expr::Add(v) => v.iter().map(|e| e.eval(x)).sum(),
            Expr::Mul(v) => {
                let mut p = 1.0;
                for e in v {
                    p *= e.eval(x);
                    if p == 0.0 {
                        break;
                    }
                }
                p
            }
            Expr::Pow(b, n) => b.eval(x).powi(*n),
            Expr::Exp(b) => b.eval(x).exp(),
            Expr::Sin(b) => b.eval(x).sin(),
            Expr::Cos(b) => b.eval(x).cos(),
            Expr::Window {
                center,
                radius,
                inner,
            } => {
                let s: f64 = center
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let d = x.get(i).copied().unwrap_or(0.0) - c;
                        d * d
                    })
                    .sum::<f64>()
                    / (radius * radius);
                if s >= WINDOW_EDGE {
                    0.0
                } else {
                    inner.eval(x)
                }
            }
        }
    }

    /// Exact partial derivative along coordinate `axis`.
    pub fn derivative(&self, axis: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::zero(),
            Expr::Coord(i) => Expr::Const(if *i == axis { 1.0 } else { 0.0 }),
            Expr::Add(v) => Expr::add(v.iter().map(|e| e.derivative(axis)).collect()),
            Expr::Mul(v) => {
                let mut terms = Vec::new();
                for (k, fk) in v.iter().enumerate() {
                    let dk = fk.derivative(axis);
                    if dk.is_zero() {
                        continue;
                    }
                    let mut factors: Vec<Expr> = v
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != k)
                        .map(|(_, e)| e.clone())
                        .collect();
                    factors.push(dk);
                    terms.push(Expr::mul(factors));
                }
                Expr::add(terms)
            }
            Expr::Pow(b, n) => {
                let db = b.derivative(axis);
                if db.is_zero() {
                    return Expr::zero();
                }
                Expr::mul(vec![
                    Expr::Const(*n as f64),
                    (**b).clone().powi(n - 1),
                    db,
                ])
            }
            Expr::Exp(b) => {
                let db = b.derivative(axis);
                if db.is_zero() {
                    return Expr::zero();
                }
                Expr::mul(vec![self.clone(), db])
            }
            Expr::Sin(b) => {
                let db = b.derivative(axis);
                if db.is_zero() {
                    return Expr::zero();
                }
                Expr::mul(vec![(**b).clone().cos(), db])
            }
            Expr::Cos(b) => {
                let db = b.derivative(axis);
                if db.is_zero() {
                    return Expr::zero();
                }
                Expr::mul(vec![Expr::Const(-1.0), (**b).clone().sin(), db])
            }
            Expr::Window {
                center,
                radius,
                inner,
            } => {
                let di = inner.derivative(axis);
                if di.is_zero() {
                    return Expr::zero();
                }
                Expr::Window {
                    center: center.clone(),
                    radius: *radius,
                    inner: Box::new(di),
                }
            }
        }
    }

    /// `d^a` for a multi-index `a` (one order per axis).
    pub fn derivative_multi(&self, orders: &[u32]) -> Expr {
        let mut e = self.clone();
        for (axis, &k) in orders.iter().enumerate() {
            for _ in 0..k {
                e = e.derivative(axis);
            }
        }
        e
    }

    /// Laplacian in `dim` dimensions.
    pub fn laplacian(&self, dim: usize) -> Expr {
        Expr::add(
            (0..dim)
                .map(|i| self.derivative(i).derivative(i))
                .collect(),
        )
    }

    /// Closed support bounds: `Some(balls)` when the expression vanishes
    /// outside a finite union of balls, `None` when it is not compactly supported.
    pub fn support_balls(&self) -> Option<Vec<(Vec<f64>, f64)>> {
        match self {
            Expr::Const(c) if *c == 0.0 => Some(vec![]),
            Expr::Window { center, radius, .. } => Some(vec![(center.clone(), *radius)]),
            Expr::Add(v) => {
                let mut out = Vec::new();
                for e in v {
                    out.extend(e.support_balls()?);
                }
                Some(out)
            }
            Expr::Mul(v) => {
                // product vanishes wherever any compactly supported factor does
                v.iter()
                    .filter_map(|e| e.support_balls())
                    .min_by_key(|b| b.len())
            }
            _ => None,
        }
    }

    pub fn parse(text: &str) -> Result<Expr, ParseError> {
        parse_expr(text, 1, 1)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Coord(i) => write!(f, "x{}", i + 1),
            Expr::Add(v) => {
                write!(f, "(")?;
                for (k, e) in v.iter().enumerate() {
                    if k > 0 {
                        write!(f, " + ")?;
                    }
                    write!(f, "{e}")?;
                }
                write!(f, ")")
            }
            Expr::Mul(v) => {
                for (k, e) in v.iter().enumerate() {
                    if k > 0 {
                        write!(f, "*")?;
                    }
                    write!(f, "{e}")?;
                }
                Ok(())
            }
            Expr::Pow(b, n) => write!(f, "({b})^({n})"),
            Expr::Exp(b) => write!(f, "exp({b})"),
            Expr::Sin(b) => write!(f, "sin({b})"),
            Expr::Cos(b) => write!(f, "cos({b})"),
            Expr::Window { center, radius, .. } => {
                write!(f, "window(r={radius}, c=[")?;
                for (k, c) in center.iter().enumerate() {
                    if k > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{c}")?;
                }
                write!(f, "])")
            }
        }
    }
}

/// Parses the plain-text expression syntax used in run configurations:
/// numbers, `x1..xd` (also `x`, `y`, `z`), `+ - * /`, `^` with an integer
/// exponent, parentheses, `exp`, `sin`, `cos`, and `bump(r, c1, ..., cd)`.
pub fn parse_expr(text: &str, line: usize, column: usize) -> Result<Expr, ParseError> {
    let mut p = Parser {
        chars: text.chars().collect(),
        pos: 0,
        line,
        column,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.chars.len() {
        return Err(p.error(format!("unexpected '{}'", p.chars[p.pos])));
    }
    Ok(e)
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    column: usize,
}

impl Parser {
    fn error(&self, msg: impl Into<String>) -> ParseError {
        ParseError::new(self.line, self.column + self.pos, msg)
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut terms = vec![self.term()?];
        loop {
            if self.eat('+') {
                terms.push(self.term()?);
            } else if self.eat('-') {
                terms.push(self.term()?.scale(-1.0));
            } else {
                break;
            }
        }
        Ok(Expr::add(terms))
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut factors = vec![self.unary()?];
        loop {
            if self.eat('*') {
                factors.push(self.unary()?);
            } else if self.eat('/') {
                let d = self.unary()?;
                if d.as_const() == Some(0.0) {
                    return Err(self.error("division by zero"));
                }
                factors.push(d.powi(-1));
            } else {
                break;
            }
        }
        Ok(Expr::mul(factors))
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat('-') {
            return Ok(self.unary()?.scale(-1.0));
        }
        if self.eat('+') {
            return self.unary();
        }
        let base = self.atom()?;
        if self.eat('^') {
            let neg = self.eat('-');
            let n = self.integer()?;
            return Ok(base.powi(if neg { -n } else { n }));
        }
        Ok(base)
    }

    fn integer(&mut self) -> Result<i32, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        s.parse()
            .map_err(|_| self.error("expected an integer exponent"))
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() {
            let c = self.chars[self.pos];
            let exp_sign = (c == '-' || c == '+')
                && self.pos > start
                && matches!(self.chars[self.pos - 1], 'e' | 'E');
            if c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || exp_sign {
                self.pos += 1;
            } else {
                break;
            }
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        s.parse().map_err(|_| self.error(format!("bad number '{s}'")))
    }

    fn ident(&mut self) -> String {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            None => Err(self.error("unexpected end of expression")),
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err(self.error("expected ')'"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => Ok(Expr::Const(self.number()?)),
            Some(c) if c.is_ascii_alphabetic() => {
                let at = self.pos;
                let name = self.ident();
                match name.as_str() {
                    "x" => Ok(Expr::Coord(0)),
                    "y" => Ok(Expr::Coord(1)),
                    "z" => Ok(Expr::Coord(2)),
                    "pi" => Ok(Expr::Const(std::f64::consts::PI)),
                    "exp" | "sin" | "cos" => {
                        let args = self.args()?;
                        if args.len() != 1 {
                            return Err(self.error(format!("{name} takes one argument")));
                        }
                        let a = args.into_iter().next().unwrap();
                        Ok(match name.as_str() {
                            "exp" => a.exp(),
                            "sin" => a.sin(),
                            _ => a.cos(),
                        })
                    }
                    "bump" => {
                        let args = self.args()?;
                        let nums: Option<Vec<f64>> = args.iter().map(Expr::as_const).collect();
                        let nums = nums.ok_or_else(|| self.error("bump arguments must be numbers"))?;
                        if nums.len() < 2 || nums[0] <= 0.0 {
                            return Err(self.error("bump(r, c1, ..., cd) needs r > 0 and a center"));
                        }
                        Ok(Expr::bump(&nums[1..], nums[0], 1.0))
                    }
                    s if s.starts_with('x') && s[1..].chars().all(|c| c.is_ascii_digit()) => {
                        let i: usize = s[1..].parse().map_err(|_| self.error("bad coordinate"))?;
                        if i == 0 {
                            return Err(self.error("coordinates are numbered from x1"));
                        }
                        Ok(Expr::Coord(i - 1))
                    }
                    _ => {
                        self.pos = at;
                        Err(self.error(format!("unknown identifier '{name}'")))
                    }
                }
            }
            Some(c) => Err(self.error(format!("unexpected '{c}'"))),
        }
    }

    fn args(&mut self) -> Result<Vec<Expr>, ParseError> {
        if !self.eat('(') {
            return Err(self.error("expected '('"));
        }
        let mut out = vec![self.expr()?];
        while self.eat(',') {
            out.push(self.expr()?);
        }
        if !self.eat(')') {
            return Err(self.error("expected ')'"));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Expr {
        Expr::parse("1 + 0.5*x1*x2 - x2^2 + exp(-(x1^2 + x2^2)) * sin(2*x1) + cos(x2)/3").unwrap()
    }

    #[test]
    fn parses_and_evaluates() {
        let e = sample();
        let x = [0.3, -0.7];
        let expected = 1.0 + 0.5 * 0.3 * -0.7 - 0.49
            + (-(0.09f64 + 0.49)).exp() * (0.6f64).sin()
            + (-0.7f64).cos() / 3.0;
        assert!((e.eval(&x) - expected).abs() < 1e-14);
    }

    #[test]
    fn parse_errors_carry_columns() {
        let err = Expr::parse("1 + foo(x)").unwrap_err();
        assert_eq!(err.column, 5);
        assert!(Expr::parse("x1 +").is_err());
        assert!(Expr::parse("x0").is_err());
    }

    #[test]
    fn bump_vanishes_outside_and_is_flat_at_edge() {
        let b = Expr::bump(&[0.5, 0.0], 1.0, 2.0);
        assert_eq!(b.eval(&[1.5 + 1e-9, 0.0]), 0.0);
        assert!((b.eval(&[0.5, 0.0]) - 2.0 * (-1f64).exp()).abs() < 1e-15);
        let d2 = b.derivative(0).derivative(0);
        assert!(d2.eval(&[1.499, 0.0]).abs() < 1e-100);
    }

    fn central_difference(e: &Expr, x: &[f64], axis: usize, h: f64) -> f64 {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[axis] += h;
        xm[axis] -= h;
        (e.eval(&xp) - e.eval(&xm)) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn symbolic_derivative_matches_finite_differences(x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let e = sample();
            let b = Expr::bump(&[0.1, 0.2], 1.3, 1.0);
            for f in [&e, &b] {
                for axis in 0..2 {
                    let d = f.derivative(axis).eval(&[x, y]);
                    let fd1 = central_difference(f, &[x, y], axis, 1e-3);
                    let fd2 = central_difference(f, &[x, y], axis, 5e-4);
                    // O(h^2): halving h quarters the discrepancy
                    let err = (fd2 - d).abs();
                    prop_assert!(err < 1e-5 + 1e-6 * d.abs(), "axis {} err {}", axis, err);
                    prop_assert!(err <= (fd1 - d).abs() * 0.3 + 1e-9);
                }
            }
        }
    }
}
