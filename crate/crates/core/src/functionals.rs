//! Local functionals built from smeared field monomials, their functional
//! derivative kernels, supports, and the balanced-field Taylor expansion.

use std::collections::BTreeMap;
use std::fmt;

use num_rational::Rational64;
use num_traits::{ToPrimitive, Zero};

use crate::error::{EgError, Result};
use crate::expr::{Expr, FieldConfiguration};
use crate::quadrature::{integrate_ball, BallResolution, BallRule, QuadratureScheme};
use crate::special::factorial;
use crate::test_function::{dist2, TestFunction};

pub type MultiIndex = Vec<u32>;

/// Largest total derivative order allowed on a single field factor.
pub const MAX_DERIVATIVE_ORDER: u32 = 2;

pub fn order(a: &[u32]) -> u32 {
    a.iter().sum()
}

/// Smooth partition-of-unity factor along one coordinate axis: rises across
/// `lower` and falls across `upper` (each a transition interval).
#[derive(Debug, Clone, PartialEq)]
pub struct SlabWindow {
    pub axis: usize,
    pub lower: Option<(f64, f64)>,
    pub upper: Option<(f64, f64)>,
}

fn smooth_step(t: f64) -> f64 {
    // 0 for t <= 0, 1 for t >= 1
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / t).exp();
    let b = (-1.0 / (1.0 - t)).exp();
    a / (a + b)
}

impl SlabWindow {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let t = x[self.axis];
        let mut v = 1.0;
        if let Some((a, b)) = self.lower {
            v *= smooth_step((t - a) / (b - a));
        }
        if let Some((a, b)) = self.upper {
            v *= 1.0 - smooth_step((t - a) / (b - a));
        }
        v
    }
}

/// `prefactor * int prod_i (d^{a_i} phi)(x) f(x) dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialTerm {
    pub derivs: Vec<MultiIndex>,
    pub coefficient: TestFunction,
    pub prefactor: Rational64,
    pub window: Option<SlabWindow>,
}

impl MonomialTerm {
    pub fn new(derivs: Vec<MultiIndex>, coefficient: TestFunction, prefactor: Rational64) -> Result<Self> {
        let d = coefficient.dim();
        for a in &derivs {
            if a.len() != d {
                return Err(EgError::PreconditionViolated(format!(
                    "multi-index {a:?} does not match dimension {d}"
                )));
            }
            if order(a) > MAX_DERIVATIVE_ORDER {
                return Err(EgError::UnsupportedCase(format!(
                    "derivative order {} exceeds the supported maximum {MAX_DERIVATIVE_ORDER}",
                    order(a)
                )));
            }
        }
        Ok(MonomialTerm {
            derivs,
            coefficient,
            prefactor,
            window: None,
        })
    }

    pub fn power(&self) -> usize {
        self.derivs.len()
    }

    /// Coefficient function `f(x)` including any partition window.
    pub fn coefficient_value(&self, x: &[f64]) -> f64 {
        let v = self.coefficient.eval(x);
        match &self.window {
            Some(w) if v != 0.0 => v * w.eval(x),
            _ => v,
        }
    }
}

/// A finite sum of monomial terms on `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFunctional {
    pub dim: usize,
    pub terms: Vec<MonomialTerm>,
}

/// Finite union of closed balls.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub balls: Vec<(Vec<f64>, f64)>,
}

impl Region {
    pub fn contains(&self, x: &[f64]) -> bool {
        self.balls.iter().any(|(c, r)| dist2(x, c) <= r * r)
    }

    pub fn disjoint(&self, other: &Region) -> bool {
        self.balls.iter().all(|(c1, r1)| {
            other
                .balls
                .iter()
                .all(|(c2, r2)| dist2(c1, c2).sqrt() > r1 + r2)
        })
    }
}

impl LocalFunctional {
    pub fn new(terms: Vec<MonomialTerm>) -> Result<Self> {
        let Some(first) = terms.first() else {
            return Err(EgError::PreconditionViolated(
                "a local functional needs at least one term".into(),
            ));
        };
        let dim = first.coefficient.dim();
        if terms.iter().any(|t| t.coefficient.dim() != dim) {
            return Err(EgError::PreconditionViolated(
                "all terms must live in the same dimension".into(),
            ));
        }
        Ok(LocalFunctional { dim, terms })
    }

    /// `(1/k!) int phi^k f`.
    pub fn monomial(power: usize, coefficient: TestFunction) -> Self {
        let k = power as i64;
        let kf: i64 = (1..=k).product();
        Self::scaled_monomial(power, coefficient, Rational64::new(1, kf.max(1)))
    }

    /// `c int phi^k f`.
    pub fn scaled_monomial(power: usize, coefficient: TestFunction, prefactor: Rational64) -> Self {
        let d = coefficient.dim();
        LocalFunctional {
            dim: d,
            terms: vec![MonomialTerm {
                derivs: vec![vec![0; d]; power],
                coefficient,
                prefactor,
                window: None,
            }],
        }
    }

    pub fn max_power(&self) -> usize {
        self.terms.iter().map(MonomialTerm::power).max().unwrap_or(0)
    }

    pub fn is_linear(&self) -> bool {
        self.terms.iter().all(|t| t.power() == 1)
    }

    pub fn has_derivatives(&self) -> bool {
        self.terms
            .iter()
            .any(|t| t.derivs.iter().any(|a| order(a) > 0))
    }

    pub fn support(&self) -> Region {
        support(self)
    }

    /// Sum of two functionals (concatenated terms).
    pub fn plus(&self, other: &LocalFunctional) -> Result<LocalFunctional> {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        LocalFunctional::new(terms)
    }
}

impl fmt::Display for LocalFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{} int f(x)", t.prefactor)?;
            for a in &t.derivs {
                if order(a) == 0 {
                    write!(f, " phi")?;
                } else {
                    write!(f, " d{a:?}phi")?;
                }
            }
            write!(
                f,
                " [f: c={:?}, r={}, A={}]",
                t.coefficient.center, t.coefficient.radius, t.coefficient.amplitude
            )?;
        }
        Ok(())
    }
}

fn derivative_exprs(phi: &Expr, derivs: &[MultiIndex], cache: &mut BTreeMap<MultiIndex, Expr>) -> Vec<Expr> {
    derivs
        .iter()
        .map(|a| {
            cache
                .entry(a.clone())
                .or_insert_with(|| phi.derivative_multi(a))
                .clone()
        })
        .collect()
}

/// `F(phi)` by adaptive quadrature over each coefficient ball.
pub fn evaluate(f: &LocalFunctional, phi: &FieldConfiguration, scheme: &QuadratureScheme) -> Result<f64> {
    let mut cache = BTreeMap::new();
    let mut total = 0.0;
    for term in &f.terms {
        let c = term.prefactor.to_f64().unwrap_or(f64::NAN);
        if c == 0.0 {
            continue;
        }
        let factors = derivative_exprs(phi, &term.derivs, &mut cache);
        let integrand = |x: &[f64]| {
            let w = term.coefficient_value(x);
            if w == 0.0 {
                return 0.0;
            }
            factors.iter().fold(w, |acc, e| acc * e.eval(x))
        };
        let v = integrate_ball(
            &integrand,
            &term.coefficient.center,
            term.coefficient.radius,
            scheme,
        )?;
        total += c * v;
    }
    Ok(total)
}

/// [`evaluate`] with a fixed [`BallRule`] per term instead of adaptive
/// integration; accurate to roughly `1e-9` relative at the default resolution.
pub fn evaluate_fixed(f: &LocalFunctional, phi: &FieldConfiguration, res: BallResolution) -> f64 {
    let mut cache = BTreeMap::new();
    let mut total = 0.0;
    for term in &f.terms {
        let c = term.prefactor.to_f64().unwrap_or(f64::NAN);
        if c == 0.0 {
            continue;
        }
        let factors = derivative_exprs(phi, &term.derivs, &mut cache);
        let rule = BallRule::new(&term.coefficient.center, term.coefficient.radius, res);
        let v: f64 = rule
            .points
            .iter()
            .zip(&rule.weights)
            .map(|(x, w)| {
                let cv = term.coefficient_value(x);
                if cv == 0.0 {
                    0.0
                } else {
                    factors.iter().fold(cv * w, |acc, e| acc * e.eval(x))
                }
            })
            .sum();
        total += c * v;
    }
    total
}

/// One labelled term of `F^(n)(phi)`: the coefficient of monomial `term`
/// sits on the diagonal, argument `j` is hit by `d^{slots[j]}`, and the
/// remaining field factors are `prod_r d^r phi`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct KernelTerm {
    pub term: usize,
    pub slots: Vec<MultiIndex>,
    pub residual: Vec<MultiIndex>,
    pub weight: Rational64,
}

/// Symbolic kernel of the `n`-th functional derivative.
///
/// As a distribution, `<F^(n)(phi), h_1 x ... x h_n> =
/// sum weight * int f(x) prod_j (d^{slots_j} h_j)(x) prod_r (d^r phi)(x) dx`,
/// i.e. `f(x_1) delta(x_1 - x_2) ... delta(x_{n-1} - x_n)` with derivative
/// decorations.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeKernel {
    pub order: usize,
    pub dim: usize,
    pub coefficients: Vec<TestFunction>,
    pub terms: Vec<KernelTerm>,
}

impl DerivativeKernel {
    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Pairs identified by the delta chain.
    pub fn delta_chain(&self) -> Vec<(usize, usize)> {
        (1..self.order).map(|j| (j - 1, j)).collect()
    }

    /// True when the delta chain connects every argument, i.e. the support
    /// lies on the thin diagonal.
    pub fn identifies_all_points(&self) -> bool {
        let mut parent: Vec<usize> = (0..self.order).collect();
        fn find(p: &mut [usize], i: usize) -> usize {
            let mut i = i;
            while p[i] != i {
                i = p[i];
            }
            i
        }
        for (a, b) in self.delta_chain() {
            let ra = find(&mut parent, a);
            let rb = find(&mut parent, b);
            parent[ra] = rb;
        }
        let roots: std::collections::BTreeSet<usize> =
            (0..self.order).map(|i| find(&mut parent, i)).collect();
        roots.len() <= 1
    }

    /// Kernel with its argument labels permuted: argument `j` becomes `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> DerivativeKernel {
        let mut map: BTreeMap<(usize, Vec<MultiIndex>, Vec<MultiIndex>), Rational64> = BTreeMap::new();
        for t in &self.terms {
            let mut slots = vec![Vec::new(); t.slots.len()];
            for (j, a) in t.slots.iter().enumerate() {
                slots[perm[j]] = a.clone();
            }
            *map.entry((t.term, slots, t.residual.clone())).or_insert_with(Rational64::zero) += t.weight;
        }
        DerivativeKernel {
            order: self.order,
            dim: self.dim,
            coefficients: self.coefficients.clone(),
            terms: collect_terms(map),
        }
    }

    /// Value of the diagonal kernel at `x` for a fixed term, with the argument
    /// test functions replaced by the given derivative values.
    pub fn residual_value(&self, t: &KernelTerm, phi_derivs: &BTreeMap<MultiIndex, f64>) -> f64 {
        t.residual.iter().map(|r| phi_derivs[r]).product()
    }

    /// `<F^(n)(phi), h_1 x ... x h_n>` for smooth `h_j`.
    pub fn pair(&self, phi: &FieldConfiguration, hs: &[Expr], scheme: &QuadratureScheme) -> Result<f64> {
        if hs.len() != self.order {
            return Err(EgError::PreconditionViolated(format!(
                "kernel of order {} needs {} arguments, got {}",
                self.order,
                self.order,
                hs.len()
            )));
        }
        let mut cache = BTreeMap::new();
        let mut total = 0.0;
        for t in &self.terms {
            let coef = &self.coefficients[t.term];
            let res = derivative_exprs(phi, &t.residual, &mut cache);
            let args: Vec<Expr> = t
                .slots
                .iter()
                .zip(hs)
                .map(|(a, h)| h.derivative_multi(a))
                .collect();
            let v = integrate_ball(
                &|x: &[f64]| {
                    let w = coef.eval(x);
                    if w == 0.0 {
                        return 0.0;
                    }
                    res.iter().chain(args.iter()).fold(w, |acc, e| acc * e.eval(x))
                },
                &coef.center,
                coef.radius,
                scheme,
            )?;
            total += t.weight.to_f64().unwrap_or(f64::NAN) * v;
        }
        Ok(total)
    }
}

impl fmt::Display for DerivativeKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let chain: Vec<String> = self
            .delta_chain()
            .iter()
            .map(|(a, b)| format!("delta(x{}-x{})", a + 1, b + 1))
            .collect();
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{} f{}(x1)", t.weight, t.term + 1)?;
            for c in &chain {
                write!(f, " {c}")?;
            }
            for (j, a) in t.slots.iter().enumerate() {
                if order(a) > 0 {
                    write!(f, " d{a:?}@x{}", j + 1)?;
                }
            }
            for r in &t.residual {
                if order(r) == 0 {
                    write!(f, " phi")?;
                } else {
                    write!(f, " d{r:?}phi")?;
                }
            }
        }
        Ok(())
    }
}

fn collect_terms(map: BTreeMap<(usize, Vec<MultiIndex>, Vec<MultiIndex>), Rational64>) -> Vec<KernelTerm> {
    map.into_iter()
        .filter(|(_, w)| !w.is_zero())
        .map(|((term, slots, residual), weight)| KernelTerm {
            term,
            slots,
            residual,
            weight,
        })
        .collect()
}

/// Calls `visit` with every injective map `[n] -> [k]`.
pub(crate) fn for_each_injection(n: usize, k: usize, visit: &mut dyn FnMut(&[usize])) {
    fn rec(pos: usize, n: usize, k: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if pos == n {
            visit(cur);
            return;
        }
        for i in 0..k {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(pos + 1, n, k, used, cur, visit);
                cur.pop();
                used[i] = false;
            }
        }
    }
    if n > k {
        return;
    }
    rec(0, n, k, &mut vec![false; k], &mut Vec::with_capacity(n), visit);
}

/// Symbolic `F^(n)`: sum over injective assignments of the `n` arguments to
/// field factors, collected into canonical form.
pub fn derivative_kernel(f: &LocalFunctional, n: usize) -> DerivativeKernel {
    let mut map: BTreeMap<(usize, Vec<MultiIndex>, Vec<MultiIndex>), Rational64> = BTreeMap::new();
    for (ti, term) in f.terms.iter().enumerate() {
        let k = term.power();
        for_each_injection(n, k, &mut |sigma| {
            let slots: Vec<MultiIndex> = sigma.iter().map(|&i| term.derivs[i].clone()).collect();
            let mut residual: Vec<MultiIndex> = (0..k)
                .filter(|i| !sigma.contains(i))
                .map(|i| term.derivs[i].clone())
                .collect();
            residual.sort();
            *map.entry((ti, slots, residual)).or_insert_with(Rational64::zero) += term.prefactor;
        });
    }
    DerivativeKernel {
        order: n,
        dim: f.dim,
        coefficients: f.terms.iter().map(|t| t.coefficient.clone()).collect(),
        terms: collect_terms(map),
    }
}

pub fn support(f: &LocalFunctional) -> Region {
    Region {
        balls: f
            .terms
            .iter()
            .map(|t| (t.coefficient.center.clone(), t.coefficient.radius))
            .collect(),
    }
}

pub fn supports_disjoint(f: &LocalFunctional, g: &LocalFunctional) -> bool {
    support(f).disjoint(&support(g))
}

/// `|F(phi+psi+chi) - F(phi+psi) + F(psi) - F(psi+chi)|` for `phi`, `chi`
/// with disjoint compact supports.
pub fn additivity_check(
    f: &LocalFunctional,
    phi: &FieldConfiguration,
    psi: &FieldConfiguration,
    chi: &FieldConfiguration,
    scheme: &QuadratureScheme,
) -> Result<f64> {
    if chi.is_zero() || phi.is_zero() {
        return Ok(0.0);
    }
    let (Some(sp), Some(sc)) = (phi.support_balls(), chi.support_balls()) else {
        return Err(EgError::PreconditionViolated(
            "phi and chi must be compactly supported".into(),
        ));
    };
    let rp = Region { balls: sp };
    let rc = Region { balls: sc };
    if !rp.disjoint(&rc) {
        return Err(EgError::PreconditionViolated(
            "supports of phi and chi overlap".into(),
        ));
    }
    let sum = |parts: &[&Expr]| Expr::add(parts.iter().map(|e| (*e).clone()).collect());
    let a = evaluate(f, &sum(&[phi, psi, chi]), scheme)?;
    let b = evaluate(f, &sum(&[phi, psi]), scheme)?;
    let c = evaluate(f, psi, scheme)?;
    let d = evaluate(f, &sum(&[psi, chi]), scheme)?;
    Ok((a - b + c - d).abs())
}

/// One randomized additivity case and its residual.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditivityCase {
    pub functional: LocalFunctional,
    pub phi: Expr,
    pub psi: Expr,
    pub chi: Expr,
    pub residual: f64,
}

/// Seeded suite of `cases` additivity checks in `d` dimensions: polynomial
/// monomials of degree 2..=4 on a bump, bump perturbations `phi`, `chi`
/// placed on opposite sides of the coefficient's support, smooth `psi`.
pub fn additivity_suite(d: usize, cases: usize, seed: u64, scheme: &QuadratureScheme) -> Result<Vec<AdditivityCase>> {
    use rand::{Rng, SeedableRng};
    if d == 0 {
        return Err(EgError::PreconditionViolated("dimension must be positive".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases);
    for _ in 0..cases {
        let mut c: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let radius = rng.gen_range(1.0..1.4);
        let f = LocalFunctional::scaled_monomial(
            rng.gen_range(2..=4),
            TestFunction::new(c.clone(), radius, rng.gen_range(0.5..2.0))?,
            Rational64::new(rng.gen_range(1..=6), rng.gen_range(1..=6)),
        );
        let r_phi = rng.gen_range(0.25..0.45);
        let r_chi = rng.gen_range(0.25..0.45);
        c[0] -= 0.55;
        let phi = Expr::bump(&c, r_phi, rng.gen_range(-2.0..2.0));
        c[0] += 1.1;
        let chi = Expr::bump(&c, r_chi, rng.gen_range(-2.0..2.0));
        let mut psi_terms = vec![Expr::constant(rng.gen_range(-1.0..1.0))];
        for i in 0..d {
            psi_terms.push(Expr::coord(i).scale(rng.gen_range(-1.0..1.0)));
        }
        psi_terms.push(Expr::mul(vec![Expr::coord(0), Expr::coord(d - 1)]).scale(rng.gen_range(-0.5..0.5)));
        let psi = Expr::add(psi_terms);
        let residual = additivity_check(&f, &phi, &psi, &chi, scheme)?;
        out.push(AdditivityCase {
            functional: f,
            phi,
            psi,
            chi,
            residual,
        });
    }
    Ok(out)
}

/// Describes the balanced-field basis recorded in reports.
pub const BALANCED_BASIS: &str = "p_B = monomial symmetrization of prod_{b in B} d^b over the n slots, \
B a sorted multiset of multi-indices (|b| <= 2, graded then lexicographic order), \
enumerated lexicographically; f^{n,B} carries the factor n!/#arrangements(B)";

/// `f^{n,B}(x) = sum weight * f(x) * prod_r (d^r phi_0)(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientFunction {
    pub parts: Vec<CoefficientPart>,
    pub reference: FieldConfiguration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPart {
    pub weight: f64,
    pub test_function: TestFunction,
    pub window: Option<SlabWindow>,
    pub residual: Vec<MultiIndex>,
}

/// One term `<f^{n,B}, A^{n,B}_{phi-phi_0}>` of the Taylor expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedFieldTerm {
    pub order: usize,
    pub basis: Vec<MultiIndex>,
    pub basis_index: u64,
    pub coefficient: CoefficientFunction,
}

/// Multi-indices with `|a| <= MAX_DERIVATIVE_ORDER` in `d` dimensions, graded
/// by total order then lexicographically descending.
pub fn derivative_alphabet(d: usize) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    for total in 0..=MAX_DERIVATIVE_ORDER {
        let mut level = Vec::new();
        compositions(total, d, &mut vec![], &mut level);
        level.sort_by(|a, b| b.cmp(a));
        out.extend(level);
    }
    out
}

fn compositions(total: u32, parts: usize, cur: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
    if parts == 1 {
        cur.push(total);
        out.push(cur.clone());
        cur.pop();
        return;
    }
    for first in 0..=total {
        cur.push(first);
        compositions(total - first, parts - 1, cur, out);
        cur.pop();
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Lexicographic rank of a sorted multiset among all size-`n` multisets over
/// the derivative alphabet.
pub fn basis_rank(basis: &[MultiIndex], d: usize) -> u64 {
    let alphabet = derivative_alphabet(d);
    let m = alphabet.len() as u64;
    let idx: Vec<u64> = basis
        .iter()
        .map(|b| alphabet.iter().position(|a| a == b).expect("multi-index in alphabet") as u64)
        .collect();
    let n = idx.len() as u64;
    let mut rank = 0;
    let mut lo = 0;
    for (p, &v) in idx.iter().enumerate() {
        let remaining = n - p as u64 - 1;
        for smaller in lo..v {
            // multisets of size `remaining` over values >= smaller
            rank += binomial(m - smaller + remaining - 1, remaining);
        }
        lo = v;
    }
    rank
}

fn arrangements(basis: &[MultiIndex]) -> f64 {
    let mut counts: BTreeMap<&MultiIndex, u32> = BTreeMap::new();
    for b in basis {
        *counts.entry(b).or_default() += 1;
    }
    factorial(basis.len() as u32) / counts.values().map(|&c| factorial(c)).product::<f64>()
}

/// Terms of the Taylor polynomial `F^[N]_{phi_0}` in balanced-field form.
pub fn taylor_expand(f: &LocalFunctional, phi0: &FieldConfiguration, n_max: usize) -> Vec<BalancedFieldTerm> {
    let mut out: BTreeMap<(usize, Vec<MultiIndex>), Vec<CoefficientPart>> = BTreeMap::new();
    for term in &f.terms {
        let k = term.power();
        let c = term.prefactor.to_f64().unwrap_or(f64::NAN);
        for n in 0..=n_max.min(k) {
            // subsets S of the field factors with |S| = n
            let mut subset = Vec::new();
            subsets(k, n, 0, &mut subset, &mut |s| {
                let mut basis: Vec<MultiIndex> = s.iter().map(|&i| term.derivs[i].clone()).collect();
                basis.sort();
                let mut residual: Vec<MultiIndex> = (0..k)
                    .filter(|i| !s.contains(i))
                    .map(|i| term.derivs[i].clone())
                    .collect();
                residual.sort();
                let weight = c * factorial(n as u32) / arrangements(&basis);
                out.entry((n, basis)).or_default().push(CoefficientPart {
                    weight,
                    test_function: term.coefficient.clone(),
                    window: term.window.clone(),
                    residual,
                });
            });
        }
    }
    out.into_iter()
        .map(|((n, basis), parts)| BalancedFieldTerm {
            order: n,
            basis_index: basis_rank(&basis, f.dim),
            basis,
            coefficient: CoefficientFunction {
                parts,
                reference: phi0.clone(),
            },
        })
        .collect()
}

fn subsets(k: usize, n: usize, start: usize, cur: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
    if cur.len() == n {
        visit(cur);
        return;
    }
    for i in start..k {
        cur.push(i);
        subsets(k, n, i + 1, cur, visit);
        cur.pop();
    }
}

/// `A^{n,B}_chi(x) = (#arrangements(B)/n!) prod_{b in B} (d^b chi)(x)`.
pub fn balanced_field(basis: &[MultiIndex], chi_derivs: &BTreeMap<MultiIndex, f64>) -> f64 {
    let n = basis.len() as u32;
    arrangements(basis) / factorial(n) * basis.iter().map(|b| chi_derivs[b]).product::<f64>()
}

/// Evaluates `sum_terms <f^{n,B}, A^{n,B}_{phi - phi_0}>`.
pub fn evaluate_taylor(terms: &[BalancedFieldTerm], phi: &FieldConfiguration, scheme: &QuadratureScheme) -> Result<f64> {
    let mut total = 0.0;
    for t in terms {
        let phi0 = &t.coefficient.reference;
        let chi = Expr::add(vec![phi.clone(), phi0.clone().scale(-1.0)]);
        let mut cache = BTreeMap::new();
        let basis_exprs = derivative_exprs(&chi, &t.basis, &mut cache);
        let mut ref_cache = BTreeMap::new();
        for part in &t.coefficient.parts {
            let res = derivative_exprs(phi0, &part.residual, &mut ref_cache);
            let tf = &part.test_function;
            let norm = arrangements(&t.basis) / factorial(t.order as u32);
            let v = integrate_ball(
                &|x: &[f64]| {
                    let mut w = tf.eval(x);
                    if w == 0.0 {
                        return 0.0;
                    }
                    if let Some(win) = &part.window {
                        w *= win.eval(x);
                    }
                    let w = res.iter().fold(w, |acc, e| acc * e.eval(x));
                    basis_exprs.iter().fold(w * norm, |acc, e| acc * e.eval(x))
                },
                &tf.center,
                tf.radius,
                scheme,
            )?;
            total += part.weight * v;
        }
    }
    Ok(total)
}

/// Splits every coefficient of `f` into `pieces` slabs along `axis` with a
/// smooth partition of unity; the pieces sum back to `f`.
pub fn partition_split(f: &LocalFunctional, axis: usize, pieces: usize, overlap: f64) -> Result<Vec<LocalFunctional>> {
    if pieces == 0 || axis >= f.dim || overlap <= 0.0 {
        return Err(EgError::PreconditionViolated(
            "partition needs pieces >= 1, a valid axis and positive overlap".into(),
        ));
    }
    let mut out = vec![Vec::new(); pieces];
    for term in &f.terms {
        if term.window.is_some() {
            return Err(EgError::UnsupportedCase(
                "cannot split an already windowed term".into(),
            ));
        }
        let c = term.coefficient.center[axis];
        let r = term.coefficient.radius;
        let width = 2.0 * r / pieces as f64;
        let cuts: Vec<f64> = (1..pieces).map(|i| c - r + width * i as f64).collect();
        for (p, slot) in out.iter_mut().enumerate() {
            let lower = (p > 0).then(|| (cuts[p - 1] - overlap, cuts[p - 1] + overlap));
            let upper = (p + 1 < pieces).then(|| (cuts[p] - overlap, cuts[p] + overlap));
            let mut t = term.clone();
            if lower.is_some() || upper.is_some() {
                t.window = Some(SlabWindow { axis, lower, upper });
            }
            slot.push(t);
        }
    }
    out.into_iter().map(LocalFunctional::new).collect()
}
