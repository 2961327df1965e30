//! Brute-force check that the product `e^{hbar Gamma} M (e^{-hbar Gamma} F
//! x e^{-hbar Gamma} G)` contains no tadpoles.
//!
//! Two independent engines:
//! * contraction patterns on `F x G`, with `e^{hbar Delta Gamma}` expanded as
//!   explicit words in `Gamma x 1`, `1 x Gamma` and `Gamma'`;
//! * a finite-dimensional model on polynomial functionals over `R^N`, where
//!   `Gamma = 1/2 sum P_ij d_i d_j` is applied literally.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg};

use num_rational::Rational64;
use num_traits::{One, Zero};

use crate::series::FormalSeries;

/// `<P^{ff} P^{fg} P^{gg}, F^{(2ff+fg)} x G^{(fg+2gg)}>`: loops on `F`,
/// lines between `F` and `G`, loops on `G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Diagram {
    pub ff: u32,
    pub fg: u32,
    pub gg: u32,
}

impl Diagram {
    pub fn has_tadpole(&self) -> bool {
        self.ff > 0 || self.gg > 0
    }
}

impl fmt::Display for Diagram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[ff={}, fg={}, gg={}]", self.ff, self.fg, self.gg)
    }
}

/// Letters of the co-product `Delta Gamma = Gamma x 1 + 1 x Gamma + Gamma'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Letter {
    Left,
    Right,
    Cross,
}

pub const LETTERS: [Letter; 3] = [Letter::Left, Letter::Right, Letter::Cross];

/// Rational linear combination of diagrams.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiagramSum(pub BTreeMap<Diagram, Rational64>);

impl DiagramSum {
    pub fn single(d: Diagram, c: Rational64) -> Self {
        let mut m = BTreeMap::new();
        if !c.is_zero() {
            m.insert(d, c);
        }
        DiagramSum(m)
    }

    pub fn scale(&self, c: Rational64) -> Self {
        let mut out = DiagramSum::default();
        for (d, v) in &self.0 {
            out.push(*d, *v * c);
        }
        out
    }

    fn push(&mut self, d: Diagram, c: Rational64) {
        let e = self.0.entry(d).or_insert_with(Rational64::zero);
        *e += c;
        if e.is_zero() {
            self.0.remove(&d);
        }
    }

    /// One application of a co-product letter: `Gamma` contributes `1/2`
    /// per self-contraction, `Gamma'` contributes `1` per line.
    pub fn apply(&self, letter: Letter) -> Self {
        let half = Rational64::new(1, 2);
        let mut out = DiagramSum::default();
        for (d, c) in &self.0 {
            let (nd, w) = match letter {
                Letter::Left => (Diagram { ff: d.ff + 1, ..*d }, half),
                Letter::Right => (Diagram { gg: d.gg + 1, ..*d }, half),
                Letter::Cross => (Diagram { fg: d.fg + 1, ..*d }, Rational64::one()),
            };
            out.push(nd, *c * w);
        }
        out
    }

    pub fn tadpole_free(&self) -> bool {
        self.0.keys().all(|d| !d.has_tadpole())
    }
}

impl Add for DiagramSum {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        for (d, c) in rhs.0 {
            self.push(d, c);
        }
        self
    }
}

impl Zero for DiagramSum {
    fn zero() -> Self {
        DiagramSum::default()
    }
    fn is_zero(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for DiagramSum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "0");
        }
        let parts: Vec<String> = self.0.iter().map(|(d, c)| format!("{c} {d}")).collect();
        write!(f, "{}", parts.join(" + "))
    }
}

fn factorial(n: u32) -> i64 {
    (1..=n as i64).product()
}

/// `M e^{hbar Delta Gamma} (e^{-hbar Gamma} F x e^{-hbar Gamma} G)`, with every
/// word of length `n` in the three letters applied one by one.
pub fn product_by_words(order: u32) -> FormalSeries<DiagramSum> {
    let mut out = FormalSeries::zero(order);
    // e^{-hbar Gamma} F x e^{-hbar Gamma} G
    for j in 0..=order {
        for k in 0..=order - j {
            let c = Rational64::new(if (j + k) % 2 == 0 { 1 } else { -1 }, factorial(j) * factorial(k));
            let mut start = DiagramSum::single(Diagram { ff: 0, fg: 0, gg: 0 }, c);
            for _ in 0..j {
                start = start.apply(Letter::Left);
            }
            for _ in 0..k {
                start = start.apply(Letter::Right);
            }
            let base = j + k;
            for n in 0..=order - base {
                let inv = Rational64::new(1, factorial(n));
                let mut total = DiagramSum::default();
                for_each_word(n as usize, &mut |word| {
                    let mut t = start.clone();
                    for &l in word {
                        t = t.apply(l);
                    }
                    total = std::mem::take(&mut total) + t;
                });
                out.add_to(base + n, total.scale(inv));
            }
        }
    }
    out
}

fn for_each_word(n: usize, visit: &mut dyn FnMut(&[Letter])) {
    let mut idx = vec![0usize; n];
    let mut word = vec![Letter::Left; n];
    loop {
        for (w, &i) in word.iter_mut().zip(&idx) {
            *w = LETTERS[i];
        }
        visit(&word);
        let mut k = 0;
        while k < n {
            idx[k] += 1;
            if idx[k] < 3 {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == n {
            return;
        }
    }
}

/// `sum_k hbar^k / k! <F^{(k)}, P^k G^{(k)}>` in diagram form.
pub fn tadpole_free_series(order: u32) -> FormalSeries<DiagramSum> {
    let mut out = FormalSeries::zero(order);
    for k in 0..=order {
        out.set(k, DiagramSum::single(Diagram { ff: 0, fg: k, gg: 0 }, Rational64::new(1, factorial(k))));
    }
    out
}

/// Polynomial in `N` variables with rational coefficients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Poly(pub BTreeMap<Vec<u32>, Rational64>);

impl Poly {
    pub fn constant(n: usize, c: Rational64) -> Self {
        let mut p = Poly::default();
        p.push(vec![0; n], c);
        p
    }

    pub fn monomial(exps: Vec<u32>, c: Rational64) -> Self {
        let mut p = Poly::default();
        p.push(exps, c);
        p
    }

    fn push(&mut self, e: Vec<u32>, c: Rational64) {
        if c.is_zero() {
            return;
        }
        let entry = self.0.entry(e.clone()).or_insert_with(Rational64::zero);
        *entry += c;
        if entry.is_zero() {
            self.0.remove(&e);
        }
    }

    pub fn derivative(&self, i: usize) -> Poly {
        let mut out = Poly::default();
        for (e, c) in &self.0 {
            if e[i] > 0 {
                let mut ne = e.clone();
                ne[i] -= 1;
                out.push(ne, *c * Rational64::from_integer(e[i] as i64));
            }
        }
        out
    }

    pub fn scale(&self, c: Rational64) -> Poly {
        let mut out = Poly::default();
        for (e, v) in &self.0 {
            out.push(e.clone(), *v * c);
        }
        out
    }
}

impl Add for Poly {
    type Output = Poly;
    fn add(mut self, rhs: Poly) -> Poly {
        for (e, c) in rhs.0 {
            self.push(e, c);
        }
        self
    }
}

impl Neg for Poly {
    type Output = Poly;
    fn neg(self) -> Poly {
        self.scale(-Rational64::one())
    }
}

impl Mul for Poly {
    type Output = Poly;
    fn mul(self, rhs: Poly) -> Poly {
        let mut out = Poly::default();
        for (a, ca) in &self.0 {
            for (b, cb) in &rhs.0 {
                let e: Vec<u32> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                out.push(e, *ca * *cb);
            }
        }
        out
    }
}

impl Zero for Poly {
    fn zero() -> Self {
        Poly::default()
    }
    fn is_zero(&self) -> bool {
        self.0.is_empty()
    }
}

/// Finite-dimensional model of the field space with a symmetric "propagator".
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialModel {
    pub p: Vec<Vec<Rational64>>,
}

impl PolynomialModel {
    pub fn new(p: Vec<Vec<Rational64>>) -> Self {
        let n = p.len();
        assert!(p.iter().all(|row| row.len() == n), "square matrix");
        assert!((0..n).all(|i| (0..n).all(|j| p[i][j] == p[j][i])), "symmetric matrix");
        PolynomialModel { p }
    }

    pub fn dim(&self) -> usize {
        self.p.len()
    }

    /// `Gamma F = 1/2 sum_ij P_ij d_i d_j F`.
    pub fn gamma(&self, f: &Poly) -> Poly {
        let n = self.dim();
        let mut out = Poly::zero();
        for i in 0..n {
            let di = f.derivative(i);
            for j in 0..n {
                if self.p[i][j].is_zero() {
                    continue;
                }
                out = out + di.derivative(j).scale(self.p[i][j] * Rational64::new(1, 2));
            }
        }
        out
    }

    /// `Gamma'(F x G) = sum_ij P_ij d_i F d_j G`, multiplied out.
    pub fn gamma_cross(&self, f: &Poly, g: &Poly) -> Poly {
        let n = self.dim();
        let mut out = Poly::zero();
        for i in 0..n {
            let di = f.derivative(i);
            for j in 0..n {
                if self.p[i][j].is_zero() {
                    continue;
                }
                out = out + (di.clone() * g.derivative(j)).scale(self.p[i][j]);
            }
        }
        out
    }

    /// `e^{s hbar Gamma} F` through `order`.
    pub fn exp_gamma(&self, f: &Poly, sign: i64, order: u32) -> FormalSeries<Poly> {
        let mut out = FormalSeries::zero(order);
        let mut cur = f.clone();
        for k in 0..=order {
            let c = Rational64::new(sign.pow(k), factorial(k));
            out.set(k, cur.scale(c));
            cur = self.gamma(&cur);
        }
        out
    }

    /// `e^{hbar Gamma}(e^{-hbar Gamma} F * e^{-hbar Gamma} G)`, applied literally.
    pub fn product_direct(&self, f: &Poly, g: &Poly, order: u32) -> FormalSeries<Poly> {
        let prod = self.exp_gamma(f, -1, order) * self.exp_gamma(g, -1, order);
        let mut out = FormalSeries::zero(order);
        for (k, c) in prod.coefficients().into_iter().enumerate() {
            let e = self.exp_gamma(&c, 1, order - k as u32);
            for (j, ej) in e.coefficients().into_iter().enumerate() {
                out.add_to((k + j) as u32, ej);
            }
        }
        out
    }

    /// `sum_k hbar^k/k! sum_{i,j} prod_m P_{i_m j_m} d_{i_1..i_k} F d_{j_1..j_k} G`
    /// by explicit index tuples.
    pub fn product_tadpole_free(&self, f: &Poly, g: &Poly, order: u32) -> FormalSeries<Poly> {
        let n = self.dim();
        let mut out = FormalSeries::zero(order);
        for k in 0..=order {
            let tuples = n.pow(2 * k);
            let mut acc = Poly::zero();
            for t in 0..tuples {
                let mut idx = t;
                let mut weight = Rational64::one();
                let mut df = f.clone();
                let mut dg = g.clone();
                for _ in 0..k {
                    let i = idx % n;
                    idx /= n;
                    let j = idx % n;
                    idx /= n;
                    weight *= self.p[i][j];
                    df = df.derivative(i);
                    dg = dg.derivative(j);
                }
                if !weight.is_zero() {
                    acc = acc + (df * dg).scale(weight);
                }
            }
            out.set(k, acc.scale(Rational64::new(1, factorial(k))));
        }
        out
    }
}

/// Outcome of the no-tadpole check.
#[derive(Debug, Clone, PartialEq)]
pub struct NoTadpoleReport {
    pub order: u32,
    pub words_applied: u64,
    pub diagram_series: FormalSeries<DiagramSum>,
    pub matches: bool,
}

pub fn no_tadpole_check(order: u32) -> NoTadpoleReport {
    let lhs = product_by_words(order);
    let rhs = tadpole_free_series(order);
    // (j, k) pairs with j + k = base, each followed by every word of length <= order - base
    let words: u64 = (0..=order)
        .map(|base| (base as u64 + 1) * (0..=order - base).map(|n| 3u64.pow(n)).sum::<u64>())
        .sum();
    NoTadpoleReport {
        order,
        words_applied: words,
        matches: lhs == rhs,
        diagram_series: lhs,
    }
}
