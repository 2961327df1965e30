//! Scaling degrees, extension of translation invariant distributions to the
//! origin, nested renormalization of three-point amplitudes, and power
//! counting.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{EgError, Result};
use crate::functionals::{derivative_alphabet, order, MultiIndex};
use crate::graphs::{enumerate_graphs, pair_count};
use crate::propagator::{spherical_integral, Correlation, CorrelationResolution, Propagator, ScalingDegree};
use crate::quadrature::{
    integrate_lenient, integrate_singular_left, BallResolution, BallRule, Estimate, FailureFlag, QuadratureScheme,
};
use crate::special::{factorial, sphere_monomial_integral, unit_sphere_area};
use crate::test_function::{norm, Cutoff, TestFunction};

/// `P(x_i - x_j)^power`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PropagatorFactor {
    pub pair: (usize, usize),
    pub power: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelForm {
    /// `delta(x_1 - x_2)`.
    Delta,
    /// `exp(-|x_1 - x_2|^2)`, bounded and smooth.
    Smooth,
    Propagators(Vec<PropagatorFactor>),
}

/// Translation invariant distribution on `points` copies of `R^d`, written in
/// the relative coordinates `x_i - x_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarDistribution {
    pub points: usize,
    pub propagator: Propagator,
    pub form: KernelForm,
}

impl ScalarDistribution {
    /// `P(x_1 - x_2)^power`.
    pub fn propagator_power(propagator: Propagator, power: u32) -> Self {
        ScalarDistribution {
            points: 2,
            propagator,
            form: KernelForm::Propagators(vec![PropagatorFactor { pair: (0, 1), power }]),
        }
    }

    pub fn delta(propagator: Propagator) -> Self {
        ScalarDistribution {
            points: 2,
            propagator,
            form: KernelForm::Delta,
        }
    }

    pub fn smooth(propagator: Propagator) -> Self {
        ScalarDistribution {
            points: 2,
            propagator,
            form: KernelForm::Smooth,
        }
    }

    /// Product of propagator powers; repeated pairs are merged.
    pub fn from_factors(points: usize, propagator: Propagator, factors: &[PropagatorFactor]) -> Result<Self> {
        if points < 2 {
            return Err(EgError::PreconditionViolated(
                "a scalar distribution needs at least two points".into(),
            ));
        }
        let mut merged: BTreeMap<(usize, usize), u32> = BTreeMap::new();
        for f in factors {
            let (i, j) = f.pair;
            if i == j || i >= points || j >= points {
                return Err(EgError::PreconditionViolated(format!(
                    "invalid propagator pair ({i}, {j}) for {points} points"
                )));
            }
            if f.power > 0 {
                *merged.entry((i.min(j), i.max(j))).or_default() += f.power;
            }
        }
        Ok(ScalarDistribution {
            points,
            propagator,
            form: KernelForm::Propagators(
                merged
                    .into_iter()
                    .map(|(pair, power)| PropagatorFactor { pair, power })
                    .collect(),
            ),
        })
    }

    pub fn dim(&self) -> usize {
        self.propagator.dim
    }

    /// Dimension of the relative-coordinate space.
    pub fn ambient_dim(&self) -> usize {
        (self.points - 1) * self.dim()
    }

    pub fn factors(&self) -> &[PropagatorFactor] {
        match &self.form {
            KernelForm::Propagators(f) => f,
            _ => &[],
        }
    }

    pub fn power(&self, i: usize, j: usize) -> u32 {
        let key = (i.min(j), i.max(j));
        self.factors().iter().find(|f| f.pair == key).map_or(0, |f| f.power)
    }

    /// Restriction to the two points `i < j`.
    pub fn pair_restriction(&self, i: usize, j: usize) -> ScalarDistribution {
        ScalarDistribution::propagator_power(self.propagator, self.power(i, j))
    }

    pub fn symbol(&self) -> String {
        match &self.form {
            KernelForm::Delta => "delta(x1-x2)".into(),
            KernelForm::Smooth => "exp(-|x1-x2|^2)".into(),
            KernelForm::Propagators(fs) if fs.is_empty() => "1".into(),
            KernelForm::Propagators(fs) => fs
                .iter()
                .map(|f| {
                    let base = format!("P(x{}-x{})", f.pair.0 + 1, f.pair.1 + 1);
                    if f.power == 1 {
                        base
                    } else {
                        format!("{base}^{}", f.power)
                    }
                })
                .collect::<Vec<_>>()
                .join(" "),
        }
    }

    /// Kernel value at a relative separation, for two-point distributions.
    pub fn radial_value(&self, r: f64) -> f64 {
        match &self.form {
            KernelForm::Delta => 0.0,
            KernelForm::Smooth => (-r * r).exp(),
            KernelForm::Propagators(fs) => fs
                .iter()
                .map(|f| self.propagator.radial(r).powi(f.power as i32))
                .product(),
        }
    }
}

impl fmt::Display for ScalarDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} in d={}", self.symbol(), self.dim())
    }
}

/// Power counting at the locus where all points coincide.
pub fn scaling_degree_analytic(t: &ScalarDistribution) -> ScalingDegree {
    let sd_p = t.propagator.scaling_degree();
    match &t.form {
        KernelForm::Delta => ScalingDegree {
            value: t.dim() as i32,
            log: false,
        },
        KernelForm::Smooth => ScalingDegree { value: 0, log: false },
        KernelForm::Propagators(fs) => ScalingDegree {
            value: fs.iter().map(|f| f.power as i32 * sd_p.value).sum(),
            log: sd_p.log && !fs.is_empty(),
        },
    }
}

pub fn degree_of_divergence(t: &ScalarDistribution) -> i32 {
    scaling_degree_analytic(t).value - t.ambient_dim() as i32
}

/// Multi-indices `a` in `k` variables with `|a| <= rho`; `C(rho + k, k)` of them.
pub fn counterterm_indices(rho: i32, k: usize) -> Vec<MultiIndex> {
    if rho < 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for total in 0..=rho as u32 {
        let mut level = Vec::new();
        fill(total, k, &mut Vec::new(), &mut level);
        level.sort_by(|a, b| b.cmp(a));
        out.extend(level);
    }
    out
}

fn fill(total: u32, parts: usize, cur: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
    if parts == 0 {
        if total == 0 {
            out.push(cur.clone());
        }
        return;
    }
    if parts == 1 {
        cur.push(total);
        out.push(cur.clone());
        cur.pop();
        return;
    }
    for first in (0..=total).rev() {
        cur.push(first);
        fill(total - first, parts - 1, cur, out);
        cur.pop();
    }
}

/// Cutoff and counterterm values fixing one extension.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtensionSpec {
    pub cutoff: Cutoff,
    pub counterterms: BTreeMap<MultiIndex, f64>,
}

impl Default for ExtensionSpec {
    fn default() -> Self {
        ExtensionSpec {
            cutoff: Cutoff::with_radius(1.0).expect("valid default cutoff"),
            counterterms: BTreeMap::new(),
        }
    }
}

impl ExtensionSpec {
    pub fn with_cutoff_radius(r: f64) -> Result<Self> {
        Ok(ExtensionSpec {
            cutoff: Cutoff::with_radius(r)?,
            counterterms: BTreeMap::new(),
        })
    }

    pub fn with_counterterm(mut self, a: MultiIndex, c: f64) -> Self {
        self.counterterms.insert(a, c);
        self
    }

    pub fn counterterm(&self, a: &MultiIndex) -> f64 {
        self.counterterms.get(a).copied().unwrap_or(0.0)
    }

    pub fn is_trivial(&self) -> bool {
        self.counterterms.values().all(|&c| c == 0.0)
    }
}

/// Test function on the relative coordinate `u = x_1 - x_2` of a two-point
/// distribution.
#[derive(Debug, Clone)]
pub enum RelativeTest {
    Bump(TestFunction),
    /// `psi(u) = int f(y + u) g(y) dy` from a product test function `f x g`.
    Correlation(Correlation),
}

impl RelativeTest {
    pub fn product(f: &TestFunction, g: &TestFunction) -> Result<Self> {
        Ok(RelativeTest::Correlation(Correlation::new(f, g, CorrelationResolution::default())?))
    }

    pub fn dim(&self) -> usize {
        match self {
            RelativeTest::Bump(b) => b.dim(),
            RelativeTest::Correlation(c) => c.dim(),
        }
    }

    fn profile(&self, s: f64) -> f64 {
        match self {
            RelativeTest::Bump(b) => b.radial(s),
            RelativeTest::Correlation(c) => c.profile(s),
        }
    }

    fn offset(&self) -> f64 {
        match self {
            RelativeTest::Bump(b) => norm(&b.center),
            RelativeTest::Correlation(c) => c.offset(),
        }
    }

    fn support(&self) -> f64 {
        match self {
            RelativeTest::Bump(b) => b.radius,
            RelativeTest::Correlation(c) => c.support(),
        }
    }

    /// True when the test function vanishes on a neighbourhood of `u = 0`.
    pub fn vanishes_near_origin(&self) -> bool {
        self.offset() > self.support()
    }

    pub fn derivative_at_origin(&self, a: &MultiIndex, scheme: &QuadratureScheme) -> Result<f64> {
        if self.vanishes_near_origin() {
            return Ok(0.0);
        }
        match self {
            RelativeTest::Bump(b) => Ok(b.as_expr().derivative_multi(a).eval(&vec![0.0; b.dim()])),
            // the value must match the profile used by the radial integrals
            RelativeTest::Correlation(c) if a.iter().all(|&x| x == 0) => Ok(c.profile(c.offset())),
            RelativeTest::Correlation(c) => c.derivative_at_origin(a, scheme),
        }
    }

    /// `psi^lambda(u) = lambda^{-d} psi(u / lambda)`.
    pub fn scaled(&self, lambda: f64) -> Result<RelativeTest> {
        match self {
            RelativeTest::Bump(b) => Ok(RelativeTest::Bump(b.scaled(lambda))),
            RelativeTest::Correlation(c) => RelativeTest::product(&c.f.scaled(lambda), &c.g.scaled(lambda)),
        }
    }

    /// `int_{S^{d-1}} psi(rho w) dw`.
    fn sphere(&self, rho: f64, scheme: &QuadratureScheme, flag: &FailureFlag) -> f64 {
        let prof = |s: f64| self.profile(s);
        spherical_integral(&prof, self.offset(), self.support(), rho, self.dim(), scheme, flag)
    }

    fn outer_radius(&self) -> f64 {
        self.offset() + self.support()
    }

    fn inner_radius(&self) -> f64 {
        (self.offset() - self.support()).max(0.0)
    }
}

fn two_point_power(t: &ScalarDistribution) -> Result<u32> {
    if t.points != 2 {
        return Err(EgError::PreconditionViolated(
            "expected a two-point distribution".into(),
        ));
    }
    match &t.form {
        KernelForm::Propagators(fs) => Ok(fs.iter().map(|f| f.power).sum()),
        _ => Err(EgError::UnsupportedCase(
            "only propagator products are paired numerically".into(),
        )),
    }
}

fn radial_pairing<F: Fn(f64) -> f64>(integrand: F, lo: f64, hi: f64, scheme: &QuadratureScheme) -> Estimate {
    if hi <= lo {
        return Estimate {
            value: 0.0,
            error: 0.0,
            evaluations: 0,
            converged: true,
        };
    }
    if lo == 0.0 {
        integrate_singular_left(integrand, 0.0, hi, scheme)
    } else {
        integrate_lenient(integrand, lo, hi, scheme)
    }
}

/// Bare pairing `t_0(psi)`; requires `rho < 0` or `psi` vanishing near 0.
pub fn pair_bare(t: &ScalarDistribution, psi: &RelativeTest, scheme: &QuadratureScheme) -> Result<f64> {
    scheme.validate()?;
    match &t.form {
        KernelForm::Delta => return psi.derivative_at_origin(&vec![0; t.dim()], scheme),
        KernelForm::Smooth | KernelForm::Propagators(_) => {}
    }
    if !matches!(t.form, KernelForm::Smooth) {
        let rho = degree_of_divergence(&two_point_checked(t)?);
        if rho >= 0 && !psi.vanishes_near_origin() {
            return Err(EgError::NonIntegrableSingularity(format!(
                "{} has degree of divergence {rho} >= 0 and the test function does not vanish at the origin",
                t.symbol()
            )));
        }
    }
    let d = t.dim() as i32;
    let flag = FailureFlag::default();
    let inner = scheme.inner();
    let est = radial_pairing(
        |rho| {
            if rho <= 0.0 {
                return 0.0;
            }
            let s = psi.sphere(rho, &inner, &flag);
            if s == 0.0 {
                0.0
            } else {
                rho.powi(d - 1) * t.radial_value(rho) * s
            }
        },
        psi.inner_radius(),
        psi.outer_radius(),
        scheme,
    );
    flag.check("bare pairing")?;
    est.into_result("bare pairing")
}

fn two_point_checked(t: &ScalarDistribution) -> Result<ScalarDistribution> {
    two_point_power(t)?;
    Ok(t.clone())
}

/// A two-point distribution together with the data fixing its extension.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedDistribution {
    pub base: ScalarDistribution,
    pub rho: i32,
    pub spec: ExtensionSpec,
    /// Multi-indices that carry a counterterm.
    pub counterterm_indices: Vec<MultiIndex>,
    pub warning: Option<String>,
}

/// Pairing split into the cutoff-dependent finite part and the counterterms
/// `C_a (-1)^{|a|} d^a psi(0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicPairing {
    pub finite: f64,
    pub counterterms: Vec<CountertermValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountertermValue {
    pub index: MultiIndex,
    pub coefficient: f64,
    /// `(-1)^{|a|} d^a psi(0)`.
    pub test_value: f64,
}

impl SymbolicPairing {
    pub fn total(&self) -> f64 {
        self.finite
            + self
                .counterterms
                .iter()
                .map(|c| c.coefficient * c.test_value)
                .sum::<f64>()
    }

    /// Difference of the counterterm parts, valid when both pairings share a
    /// finite part.
    pub fn counterterm_difference(&self, other: &SymbolicPairing) -> Option<f64> {
        if self.finite.to_bits() != other.finite.to_bits() || self.counterterms.len() != other.counterterms.len() {
            return None;
        }
        let mut diff = 0.0;
        for (a, b) in self.counterterms.iter().zip(&other.counterterms) {
            if a.index != b.index || a.test_value.to_bits() != b.test_value.to_bits() {
                return None;
            }
            diff += (a.coefficient - b.coefficient) * a.test_value;
        }
        Some(diff)
    }
}

/// Extension of a distribution with a single coinciding-point locus.
pub fn extend(t0: &ScalarDistribution, spec: &ExtensionSpec) -> Result<ExtendedDistribution> {
    if t0.points > 2 {
        for f in t0.factors() {
            let sub = t0.pair_restriction(f.pair.0, f.pair.1);
            if degree_of_divergence(&sub) >= 0 {
                return Err(EgError::NotPrimitive(format!(
                    "sub-locus x{}=x{} of {} is divergent; renormalize recursively",
                    f.pair.0 + 1,
                    f.pair.1 + 1,
                    t0.symbol()
                )));
            }
        }
        return Err(EgError::UnsupportedCase(
            "extensions of primitive distributions with more than two points go through recursive_renormalize".into(),
        ));
    }
    let rho = degree_of_divergence(t0);
    let warning = (rho < 0 && !spec.is_trivial()).then(|| {
        format!("degree of divergence {rho} < 0: the extension is unique and the counterterms are ignored")
    });
    Ok(ExtendedDistribution {
        base: t0.clone(),
        rho,
        spec: spec.clone(),
        counterterm_indices: counterterm_indices(rho, t0.ambient_dim()),
        warning,
    })
}

impl ExtendedDistribution {
    /// `t(psi)`: for `rho < 0` the sum of the pieces cut by `w` and `1 - w`;
    /// for `rho >= 0` the `w`-weighted Taylor subtraction plus counterterms.
    pub fn pair(&self, psi: &RelativeTest, scheme: &QuadratureScheme) -> Result<SymbolicPairing> {
        scheme.validate()?;
        let t = &self.base;
        two_point_power(t)?;
        let d = t.dim();
        let di = d as i32;
        let w = self.spec.cutoff;
        let flag = FailureFlag::default();
        let inner = scheme.inner();
        if self.rho < 0 {
            let hi = psi.outer_radius().min(w.outer);
            let near = radial_pairing(
                |rho| {
                    if rho <= 0.0 {
                        return 0.0;
                    }
                    let wv = w.eval(rho);
                    if wv == 0.0 {
                        return 0.0;
                    }
                    rho.powi(di - 1) * t.radial_value(rho) * wv * psi.sphere(rho, &inner, &flag)
                },
                0.0,
                hi,
                scheme,
            )
            .into_result("near part of the extension")?;
            let lo = psi.inner_radius().max(w.inner);
            let far = radial_pairing(
                |rho| {
                    let wv = 1.0 - w.eval(rho);
                    if wv == 0.0 {
                        return 0.0;
                    }
                    rho.powi(di - 1) * t.radial_value(rho) * wv * psi.sphere(rho, &inner, &flag)
                },
                lo,
                psi.outer_radius().max(lo),
                scheme,
            )
            .into_result("far part of the extension")?;
            flag.check("extension pairing")?;
            return Ok(SymbolicPairing {
                finite: near + far,
                counterterms: Vec::new(),
            });
        }
        // spherical integral of the Taylor polynomial: only even monomials survive
        let mut taylor: Vec<(u32, f64)> = Vec::new();
        let vanishes = psi.vanishes_near_origin();
        if !vanishes {
            for a in counterterm_indices(self.rho, d) {
                if a.iter().any(|x| x % 2 == 1) {
                    continue;
                }
                let da = psi.derivative_at_origin(&a, scheme)?;
                let afact: f64 = a.iter().map(|&x| factorial(x)).product();
                taylor.push((order(&a), da / afact * sphere_monomial_integral(&a)));
            }
        }
        let hi = psi.outer_radius().max(w.outer);
        let fine = inner.inner();
        let subtracted = |rho: f64, sch: &QuadratureScheme| {
            let mut s = psi.sphere(rho, sch, &flag);
            let wv = w.eval(rho);
            if wv != 0.0 {
                let poly: f64 = taylor.iter().map(|&(k, c)| c * rho.powi(k as i32)).sum();
                s -= wv * poly;
            }
            s
        };
        // for rho >= 1 the remainder is swamped by cancellation near 0; below
        // rho_0 it is continued by its leading power
        let rho0 = if self.rho >= 1 && !vanishes {
            0.05 * w.inner.min(psi.support() - psi.offset())
        } else {
            0.0
        };
        let lead = self.rho + 1 + (self.rho + 1) % 2;
        let at_rho0 = if rho0 > 0.0 { subtracted(rho0, &fine) } else { 0.0 };
        let finite = radial_pairing(
            |rho| {
                if rho <= 0.0 {
                    return 0.0;
                }
                let s = if rho < rho0 {
                    at_rho0 * (rho / rho0).powi(lead)
                } else {
                    subtracted(rho, &inner)
                };
                if s == 0.0 {
                    0.0
                } else {
                    rho.powi(di - 1) * t.radial_value(rho) * s
                }
            },
            if vanishes { psi.inner_radius() } else { 0.0 },
            hi,
            scheme,
        )
        .into_result("extension pairing")?;
        flag.check("extension pairing")?;
        let mut counterterms = Vec::new();
        for a in &self.counterterm_indices {
            let sign = if order(a).is_multiple_of(2) { 1.0 } else { -1.0 };
            counterterms.push(CountertermValue {
                index: a.clone(),
                coefficient: self.spec.counterterm(a),
                test_value: sign * psi.derivative_at_origin(a, scheme)?,
            });
        }
        Ok(SymbolicPairing { finite, counterterms })
    }
}

/// `int P^j(u) (w'(u) - w(u)) du`, the counterterm shift that compensates a
/// change of cutoff at `rho = 0`.
pub fn cutoff_shift(t: &ScalarDistribution, w: &Cutoff, w_new: &Cutoff, scheme: &QuadratureScheme) -> Result<f64> {
    let d = t.dim() as i32;
    let lo = w.inner.min(w_new.inner);
    let hi = w.outer.max(w_new.outer);
    let area = unit_sphere_area(t.dim());
    let v = crate::quadrature::integrate(
        |rho| rho.powi(d - 1) * t.radial_value(rho) * (w_new.eval(rho) - w.eval(rho)),
        lo,
        hi,
        scheme,
    )?;
    Ok(area * v)
}

/// Functional form used to fit `log|t(psi^lambda)|` against `x = ln(1/lambda)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitModel {
    /// `y = s x + c`.
    Linear,
    /// `y = s x + k ln x + c`, for kernels with logarithmic corrections.
    LogCorrected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub analytic: ScalingDegree,
    pub estimate: f64,
    pub residual: f64,
    pub model: FitModel,
    pub log_coefficient: Option<f64>,
    /// Exact exponent when the scaling is known symbolically.
    pub symbolic_exponent: Option<i32>,
    /// `(lambda, t(psi^lambda))` for every lambda in the sequence.
    pub points: Vec<(f64, f64)>,
    /// Number of leading (largest) lambdas excluded from the fit.
    pub dropped: usize,
}

/// `2^{-1}, ..., 2^{-8}`.
pub fn dyadic_lambdas() -> Vec<f64> {
    (1..=8).map(|k| 0.5f64.powi(k)).collect()
}

pub const FIT_RESIDUAL_LIMIT: f64 = 0.05;

/// Least-squares fit of `log|value|` against `ln(1/lambda)`.
pub fn fit_scaling(points: &[(f64, f64)], drop: usize, model: FitModel) -> Result<(f64, Option<f64>, f64)> {
    let used: Vec<(f64, f64)> = points
        .iter()
        .skip(drop)
        .map(|&(l, v)| ((1.0 / l).ln(), v.abs().ln()))
        .collect();
    let needed = match model {
        FitModel::Linear => 3,
        FitModel::LogCorrected => 4,
    };
    if used.len() < needed || used.iter().any(|(_, y)| !y.is_finite()) {
        return Err(EgError::IllConditionedFit(
            "not enough finite points for the scaling fit".into(),
        ));
    }
    let basis = |x: f64| -> Vec<f64> {
        match model {
            FitModel::Linear => vec![x, 1.0],
            FitModel::LogCorrected => vec![x, x.ln(), 1.0],
        }
    };
    let k = basis(1.0).len();
    let mut ata = vec![vec![0.0; k]; k];
    let mut aty = vec![0.0; k];
    for &(x, y) in &used {
        let b = basis(x);
        for i in 0..k {
            aty[i] += b[i] * y;
            for j in 0..k {
                ata[i][j] += b[i] * b[j];
            }
        }
    }
    let coef = solve(ata, aty).ok_or_else(|| EgError::IllConditionedFit("singular normal equations".into()))?;
    let rss: f64 = used
        .iter()
        .map(|&(x, y)| {
            let fit: f64 = basis(x).iter().zip(&coef).map(|(b, c)| b * c).sum();
            (y - fit) * (y - fit)
        })
        .sum();
    let residual = (rss / used.len() as f64).sqrt();
    let log_coef = (model == FitModel::LogCorrected).then(|| coef[1]);
    Ok((coef[0], log_coef, residual))
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Some(x)
}

fn finish_report(
    analytic: ScalingDegree,
    points: Vec<(f64, f64)>,
    model: FitModel,
    symbolic_exponent: Option<i32>,
) -> Result<ScalingReport> {
    let dropped = 2.min(points.len().saturating_sub(3));
    let (slope, log_coefficient, residual) = fit_scaling(&points, dropped, model)?;
    if residual > FIT_RESIDUAL_LIMIT {
        return Err(EgError::IllConditionedFit(format!(
            "scaling fit residual {residual:.3e} exceeds {FIT_RESIDUAL_LIMIT}"
        )));
    }
    Ok(ScalingReport {
        analytic,
        estimate: slope,
        residual,
        model,
        log_coefficient,
        symbolic_exponent,
        points,
        dropped,
    })
}

/// Numeric scaling degree of a bare two-point distribution from
/// `t(psi^lambda)` over the given lambdas (largest first).
pub fn scaling_degree_numeric(
    t: &ScalarDistribution,
    psi: &RelativeTest,
    lambdas: &[f64],
    scheme: &QuadratureScheme,
) -> Result<ScalingReport> {
    let analytic = scaling_degree_analytic(t);
    let mut points = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        points.push((l, pair_bare(t, &psi.scaled(l)?, scheme)?));
    }
    let symbolic = matches!(t.form, KernelForm::Delta).then(|| -(t.dim() as i32));
    let model = if analytic.log { FitModel::LogCorrected } else { FitModel::Linear };
    let mut report = finish_report(analytic, points, model, symbolic)?;
    if let Some(e) = symbolic {
        // delta(psi^lambda) = lambda^{-d} psi(0) exactly
        report.estimate = -e as f64;
        report.residual = 0.0;
    }
    Ok(report)
}

/// Numeric scaling degree of an extension.
pub fn scaling_degree_extended(
    t: &ExtendedDistribution,
    psi: &RelativeTest,
    lambdas: &[f64],
    scheme: &QuadratureScheme,
) -> Result<ScalingReport> {
    let analytic = scaling_degree_analytic(&t.base);
    let mut points = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        points.push((l, t.pair(&psi.scaled(l)?, scheme)?.total()));
    }
    let model = if t.rho >= 0 || analytic.log {
        FitModel::LogCorrected
    } else {
        FitModel::Linear
    };
    finish_report(analytic, points, model, None)
}

/// Extension data for every locus of a multi-point distribution.
#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct RenormSpecs {
    pub pairs: BTreeMap<(usize, usize), ExtensionSpec>,
    pub overall: ExtensionSpec,
}


impl RenormSpecs {
    pub fn pair(&self, i: usize, j: usize) -> ExtensionSpec {
        self.pairs.get(&(i.min(j), i.max(j))).cloned().unwrap_or_default()
    }
}

/// One coinciding-point locus and its extension.
#[derive(Debug, Clone, PartialEq)]
pub struct Locus {
    /// Points identified on the locus.
    pub points: Vec<usize>,
    pub rho: i32,
    pub spec: Option<ExtensionSpec>,
    pub counterterm_indices: Vec<MultiIndex>,
}

impl Locus {
    pub fn counterterm_count(&self) -> usize {
        self.counterterm_indices.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RenormPlan {
    TwoPoint(ExtendedDistribution),
    /// Factorized distribution: each component acts on its own points.
    Product(Vec<(Vec<usize>, RenormalizedDistribution)>),
    /// Three points with at most one divergent pair `(a, b)`.
    Nested(NestedPlan),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedPlan {
    /// Divergent (or chosen) pair `a, b` and the remaining point `c`.
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub p_ab: u32,
    pub p_ac: u32,
    pub p_bc: u32,
}

/// Output of [`recursive_renormalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenormalizedDistribution {
    pub base: ScalarDistribution,
    pub pair_loci: Vec<Locus>,
    pub overall: Locus,
    pub plan: RenormPlan,
    pub specs: RenormSpecs,
}

fn components(t: &ScalarDistribution) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..t.points).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            i = p[i];
        }
        i
    }
    for f in t.factors() {
        let (a, b) = (find(&mut parent, f.pair.0), find(&mut parent, f.pair.1));
        parent[a] = b;
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..t.points {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort();
    out
}

fn locus(points: Vec<usize>, rho: i32, spec: ExtensionSpec, k: usize) -> Locus {
    Locus {
        points,
        rho,
        spec: (rho >= 0).then_some(spec),
        counterterm_indices: counterterm_indices(rho, k),
    }
}

/// Extends the innermost divergent pair loci first, then the overall locus.
pub fn recursive_renormalize(t0: &ScalarDistribution, specs: &RenormSpecs) -> Result<RenormalizedDistribution> {
    let d = t0.dim();
    if !matches!(t0.form, KernelForm::Propagators(_)) {
        return Err(EgError::UnsupportedCase(
            "only propagator products are renormalized".into(),
        ));
    }
    let comps = components(t0);
    let pair_loci: Vec<Locus> = t0
        .factors()
        .iter()
        .filter_map(|f| {
            let rho = degree_of_divergence(&t0.pair_restriction(f.pair.0, f.pair.1));
            (rho >= 0 || t0.points > 2).then(|| locus(vec![f.pair.0, f.pair.1], rho, specs.pair(f.pair.0, f.pair.1), d))
        })
        .collect();
    if comps.len() > 1 {
        let mut parts = Vec::new();
        for comp in &comps {
            if comp.len() < 2 {
                continue;
            }
            let sub_factors: Vec<PropagatorFactor> = t0
                .factors()
                .iter()
                .filter(|f| comp.contains(&f.pair.0))
                .map(|f| PropagatorFactor {
                    pair: (
                        comp.iter().position(|&v| v == f.pair.0).expect("in component"),
                        comp.iter().position(|&v| v == f.pair.1).expect("in component"),
                    ),
                    power: f.power,
                })
                .collect();
            let sub = ScalarDistribution::from_factors(comp.len(), t0.propagator, &sub_factors)?;
            let mut sub_specs = RenormSpecs {
                pairs: BTreeMap::new(),
                overall: ExtensionSpec::default(),
            };
            for (&(i, j), s) in &specs.pairs {
                if let (Some(a), Some(b)) = (comp.iter().position(|&v| v == i), comp.iter().position(|&v| v == j)) {
                    if comp.len() == 2 {
                        sub_specs.overall = s.clone();
                    } else {
                        sub_specs.pairs.insert((a.min(b), a.max(b)), s.clone());
                    }
                }
            }
            parts.push((comp.clone(), recursive_renormalize(&sub, &sub_specs)?));
        }
        // no overall locus: the distribution factorizes
        return Ok(RenormalizedDistribution {
            base: t0.clone(),
            pair_loci,
            overall: Locus {
                points: (0..t0.points).collect(),
                rho: -1,
                spec: None,
                counterterm_indices: Vec::new(),
            },
            plan: RenormPlan::Product(parts),
            specs: specs.clone(),
        });
    }
    let overall_rho = degree_of_divergence(t0);
    let overall = locus((0..t0.points).collect(), overall_rho, specs.overall.clone(), t0.ambient_dim());
    match t0.points {
        2 => {
            let ext = extend(t0, &specs.overall)?;
            Ok(RenormalizedDistribution {
                base: t0.clone(),
                pair_loci: Vec::new(),
                overall,
                plan: RenormPlan::TwoPoint(ext),
                specs: specs.clone(),
            })
        }
        3 => {
            let divergent: Vec<&Locus> = pair_loci.iter().filter(|l| l.rho >= 0).collect();
            if divergent.len() > 1 {
                return Err(EgError::OverlappingDivergence(format!(
                    "{} has {} divergent pair loci sharing points",
                    t0.symbol(),
                    divergent.len()
                )));
            }
            if divergent.iter().any(|l| l.rho > 1) || overall_rho > 1 {
                return Err(EgError::UnsupportedCase(
                    "nested extensions are implemented for degrees of divergence <= 1".into(),
                ));
            }
            let (a, b) = match divergent.first() {
                Some(l) => (l.points[0], l.points[1]),
                None => {
                    // any pair works; prefer the most singular one
                    let f = t0.factors().iter().max_by_key(|f| f.power).expect("connected");
                    f.pair
                }
            };
            let c = (0..3).find(|&v| v != a && v != b).expect("three points");
            let plan = NestedPlan {
                a,
                b,
                c,
                p_ab: t0.power(a, b),
                p_ac: t0.power(a, c),
                p_bc: t0.power(b, c),
            };
            Ok(RenormalizedDistribution {
                base: t0.clone(),
                pair_loci,
                overall,
                plan: RenormPlan::Nested(plan),
                specs: specs.clone(),
            })
        }
        _ => Err(EgError::UnsupportedCase(format!(
            "connected distributions on {} points are not renormalized",
            t0.points
        ))),
    }
}

/// Resolution of the nested three-point pairing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NestedResolution {
    /// Fixed rule for `Psi(r1, r2) = int f_a(z + r1) f_b(z + r2) f_c(z) dz`.
    pub psi: BallResolution,
}

impl Default for NestedResolution {
    fn default() -> Self {
        NestedResolution {
            psi: BallResolution {
                n_radial: 12,
                n_polar: 5,
            },
        }
    }
}

/// `Psi(r1, r2)` for bumps sharing one centre, as a function of
/// `(|u|, |v|, |u + v|)` with `u = x_a - x_b`, `v = x_b - x_c`.
struct TripleOverlap {
    fa: TestFunction,
    fb: TestFunction,
    nodes: Vec<(Vec<f64>, f64)>,
}

impl TripleOverlap {
    fn new(fa: &TestFunction, fb: &TestFunction, fc: &TestFunction, res: BallResolution) -> Self {
        let rule = BallRule::new(&fc.center, fc.radius, res);
        let nodes = rule
            .points
            .into_iter()
            .zip(rule.weights)
            .map(|(p, w)| {
                let v = fc.eval(&p) * w;
                (p, v)
            })
            .filter(|(_, v)| *v != 0.0)
            .collect();
        TripleOverlap {
            fa: fa.clone(),
            fb: fb.clone(),
            nodes,
        }
    }

    fn eval_vectors(&self, r1: &[f64], r2: &[f64]) -> f64 {
        let mut acc = 0.0;
        let mut za = [0.0; 3];
        let mut zb = [0.0; 3];
        for (z, w) in &self.nodes {
            for i in 0..3 {
                za[i] = z[i] + r1[i];
                zb[i] = z[i] + r2[i];
            }
            let b = self.fb.eval(&zb);
            if b == 0.0 {
                continue;
            }
            let a = self.fa.eval(&za);
            acc += w * a * b;
        }
        acc
    }

    /// `rho_u = |u|`, `rho_v = |v|`, `s = |u + v|`.
    fn eval(&self, rho_u: f64, rho_v: f64, s: f64) -> f64 {
        if rho_v == 0.0 {
            return self.eval_vectors(&[rho_u, 0.0, 0.0], &[0.0; 3]);
        }
        let a = (s * s + rho_v * rho_v - rho_u * rho_u) / (2.0 * rho_v);
        let b = (s * s - a * a).max(0.0).sqrt();
        self.eval_vectors(&[a, b, 0.0], &[rho_v, 0.0, 0.0])
    }
}

impl RenormalizedDistribution {
    /// Pairing against `f_1 x ... x f_n`.
    pub fn pair(&self, fs: &[TestFunction], scheme: &QuadratureScheme) -> Result<f64> {
        self.pair_with(fs, scheme, NestedResolution::default())
    }

    pub fn pair_with(&self, fs: &[TestFunction], scheme: &QuadratureScheme, res: NestedResolution) -> Result<f64> {
        if fs.len() != self.base.points {
            return Err(EgError::PreconditionViolated(format!(
                "{} test functions given for {} points",
                fs.len(),
                self.base.points
            )));
        }
        match &self.plan {
            RenormPlan::TwoPoint(ext) => {
                let psi = RelativeTest::product(&fs[0], &fs[1])?;
                Ok(ext.pair(&psi, scheme)?.total())
            }
            RenormPlan::Product(parts) => {
                let mut total = 1.0;
                for (pts, sub) in parts {
                    let sub_fs: Vec<TestFunction> = pts.iter().map(|&i| fs[i].clone()).collect();
                    total *= sub.pair_with(&sub_fs, scheme, res)?;
                }
                // isolated points contribute the integral of their test function
                let covered: Vec<usize> = parts.iter().flat_map(|(p, _)| p.iter().copied()).collect();
                for (i, f) in fs.iter().enumerate() {
                    if !covered.contains(&i) {
                        total *= f.integral(scheme)?;
                    }
                }
                Ok(total)
            }
            RenormPlan::Nested(plan) => self.pair_nested(plan, fs, scheme, res, &self.specs),
        }
    }

    fn pair_nested(
        &self,
        plan: &NestedPlan,
        fs: &[TestFunction],
        scheme: &QuadratureScheme,
        res: NestedResolution,
        specs: &RenormSpecs,
    ) -> Result<f64> {
        if self.base.dim() != 3 {
            return Err(EgError::UnsupportedCase(
                "nested three-point pairings are implemented in d=3".into(),
            ));
        }
        let c0 = &fs[0].center;
        if fs.iter().any(|f| norm(&f.center.iter().zip(c0).map(|(a, b)| a - b).collect::<Vec<_>>()) > 1e-12) {
            return Err(EgError::UnsupportedCase(
                "nested three-point pairings need test functions sharing one centre".into(),
            ));
        }
        let (fa, fb, fc) = (&fs[plan.a], &fs[plan.b], &fs[plan.c]);
        let psi = TripleOverlap::new(fa, fb, fc, res.psi);
        let psi00 = psi.eval(0.0, 0.0, 0.0);
        let ctx = NestedIntegral::new(self, plan, specs)?;
        let big_w = specs.overall.cutoff;
        let overall_divergent = self.overall.rho >= 0;
        let reach = NestedReach {
            u: fa.radius + fb.radius + 2.0 * fc.radius,
            v: fb.radius + fc.radius,
            s: fa.radius + fc.radius,
        };
        let chi = |ru: f64, rv: f64, s: f64| {
            let mut v = if rv < reach.v && s < reach.s { psi.eval(ru, rv, s) } else { 0.0 };
            if overall_divergent {
                v -= big_w.eval((ru * ru + rv * rv).sqrt()) * psi00;
            }
            v
        };
        let mut reach = reach;
        if overall_divergent {
            reach.u = reach.u.max(big_w.outer);
            reach.v = reach.v.max(big_w.outer);
            reach.s = reach.u + reach.v;
        }
        let value = ctx.integrate(&chi, reach, scheme)?;
        let counter = if overall_divergent {
            specs.overall.counterterm(&vec![0; 6]) * psi00
        } else {
            0.0
        };
        Ok(value + counter)
    }

    /// Nested pairing against a function of `(|u|, |v|, |u + v|)`; used for
    /// the overall cutoff shift `T_1[W' - W]`.
    pub fn pair_invariant<F: Fn(f64, f64, f64) -> f64>(
        &self,
        chi: &F,
        reach_u: f64,
        reach_v: f64,
        scheme: &QuadratureScheme,
    ) -> Result<f64> {
        let RenormPlan::Nested(plan) = &self.plan else {
            return Err(EgError::UnsupportedCase("invariant pairings need a nested plan".into()));
        };
        let ctx = NestedIntegral::new(self, plan, &self.specs)?;
        ctx.integrate(
            chi,
            NestedReach {
                u: reach_u,
                v: reach_v,
                s: reach_u + reach_v,
            },
            scheme,
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct NestedReach {
    u: f64,
    v: f64,
    s: f64,
}

/// `I[chi] = int dv P_bc(v) [ int du P_ab(u) (P_ac(u+v) chi - w(u) P_ac(v) chi(0, v)) + C P_ac(v) chi(0, v) ]`
/// with the `u`-angles averaged analytically.
struct NestedIntegral {
    p: Propagator,
    p_ab: i32,
    p_ac: i32,
    p_bc: i32,
    subtract: bool,
    w: Cutoff,
    c_pair: f64,
    /// Breakpoints of `chi` in `sqrt(|u|^2 + |v|^2)`.
    radial_breaks: Vec<f64>,
}

/// Relative accuracy below which nested pairings are not asked to go.
pub const NESTED_TOLERANCE_FLOOR: f64 = 1e-5;

/// Composite Gauss-Legendre nodes on `[a, b]` split at `breaks`; the end
/// panels cluster nodes cubically at `a` and/or `b`.
fn composite_nodes(a: f64, b: f64, breaks: &[f64], n: usize, left: bool, right: bool) -> Vec<(f64, f64)> {
    if b <= a {
        return Vec::new();
    }
    let mut cuts: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b && x.is_finite()).collect();
    if left && right && cuts.is_empty() {
        cuts.push(0.5 * (a + b));
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|x, y| (*x - *y).abs() < 1e-12);
    let mut edges = vec![a];
    edges.extend(cuts);
    edges.push(b);
    let gl = crate::quadrature::gauss_legendre_interval(n, 0.0, 1.0);
    let last = edges.len() - 2;
    let mut out = Vec::with_capacity(n * (last + 1));
    for k in 0..=last {
        let (lo, hi) = (edges[k], edges[k + 1]);
        let h = hi - lo;
        for &(t, wt) in &gl {
            if k == 0 && left {
                out.push((lo + h * t * t * t, h * 3.0 * t * t * wt));
            } else if k == last && right {
                out.push((hi - h * t * t * t, h * 3.0 * t * t * wt));
            } else {
                out.push((lo + h * t, h * wt));
            }
        }
    }
    out
}

impl NestedIntegral {
    fn new(rd: &RenormalizedDistribution, plan: &NestedPlan, specs: &RenormSpecs) -> Result<Self> {
        let pair_rho = degree_of_divergence(&rd.base.pair_restriction(plan.a, plan.b));
        let spec = specs.pair(plan.a, plan.b);
        let big_w = specs.overall.cutoff;
        Ok(NestedIntegral {
            p: rd.base.propagator,
            p_ab: plan.p_ab as i32,
            p_ac: plan.p_ac as i32,
            p_bc: plan.p_bc as i32,
            subtract: pair_rho >= 0,
            w: spec.cutoff,
            c_pair: spec.counterterm(&vec![0; 3]),
            radial_breaks: vec![big_w.inner, big_w.outer],
        })
    }

    fn pw(&self, r: f64, k: i32) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.p.radial(r).powi(k)
        }
    }

    fn integrate<F: Fn(f64, f64, f64) -> f64>(&self, chi: &F, reach: NestedReach, scheme: &QuadratureScheme) -> Result<f64> {
        let coarse = self.integrate_fixed(chi, reach, 24);
        let fine = self.integrate_fixed(chi, reach, 36);
        let tol = scheme.rel_tol.max(NESTED_TOLERANCE_FLOOR);
        let err = (fine - coarse).abs();
        if !fine.is_finite() || err > tol * fine.abs() + scheme.abs_tol {
            return Err(EgError::QuadratureFailure(format!(
                "nested pairing: value {fine:e} with error estimate {err:e}"
            )));
        }
        Ok(fine)
    }

    fn integrate_fixed<F: Fn(f64, f64, f64) -> f64>(&self, chi: &F, reach: NestedReach, n: usize) -> f64 {
        let four_pi = 4.0 * std::f64::consts::PI;
        let s_rule = crate::quadrature::gauss_legendre_interval(n, 0.0, 1.0);
        let mut v_breaks = self.radial_breaks.clone();
        v_breaks.push(reach.v);
        let v_max = reach.v;
        let mut total = 0.0;
        for (rv, wv) in composite_nodes(0.0, v_max, &v_breaks, n, true, false) {
            let chi0 = chi(0.0, rv, rv);
            let pac_v = self.pw(rv, self.p_ac);
            let mut u_breaks = vec![reach.s + rv];
            if self.subtract {
                u_breaks.extend([self.w.inner, self.w.outer]);
            }
            for &r in &self.radial_breaks {
                if r > rv {
                    u_breaks.push((r * r - rv * rv).sqrt());
                }
            }
            let u_max = reach.u.max(if self.subtract { self.w.outer } else { 0.0 });
            let mut nodes = composite_nodes(0.0, rv.min(u_max), &[], n, true, true);
            nodes.extend(composite_nodes(rv, u_max, &u_breaks, n, true, false));
            let mut bracket = 0.0;
            for (ru, wu) in nodes {
                if ru <= 0.0 {
                    continue;
                }
                let lo = (ru - rv).abs();
                let hi = (ru + rv).min(reach.s.max(lo));
                let mut a = 0.0;
                if hi > lo {
                    // s = e^t removes the 1/s behaviour of s P(s)^2
                    let (tl, th) = (lo.max(1e-300).ln(), hi.ln());
                    for &(x, wx) in &s_rule {
                        let t = tl + (th - tl) * x;
                        let s = t.exp();
                        a += wx * s * s * self.pw(s, self.p_ac) * chi(ru, rv, s);
                    }
                    a *= (th - tl) / (2.0 * ru * rv);
                }
                if self.subtract {
                    a -= self.w.eval(ru) * pac_v * chi0;
                }
                bracket += wu * four_pi * ru * ru * self.pw(ru, self.p_ab) * a;
            }
            if self.subtract {
                bracket += self.c_pair * pac_v * chi0;
            }
            total += wv * four_pi * rv * rv * self.pw(rv, self.p_bc) * bracket;
        }
        total
    }
}

/// Counterterm values `(C', C_out')` that keep the nested pairing unchanged
/// when the cutoffs move from `specs` to `(w_new, big_w_new)`.
pub fn compensating_specs(
    rd: &RenormalizedDistribution,
    w_new: Cutoff,
    big_w_new: Cutoff,
    scheme: &QuadratureScheme,
) -> Result<RenormSpecs> {
    let RenormPlan::Nested(plan) = &rd.plan else {
        return Err(EgError::UnsupportedCase("compensation is defined for nested plans".into()));
    };
    let old_pair = rd.specs.pair(plan.a, plan.b);
    let pair_dist = rd.base.pair_restriction(plan.a, plan.b);
    let zero3 = vec![0; 3];
    let zero6 = vec![0; 6];
    let shift = cutoff_shift(&pair_dist, &old_pair.cutoff, &w_new, scheme)?;
    let mut new_pair = old_pair.clone();
    new_pair.cutoff = w_new;
    new_pair.counterterms.insert(zero3.clone(), old_pair.counterterm(&zero3) + shift);
    let mut specs = rd.specs.clone();
    specs.pairs.insert((plan.a.min(plan.b), plan.a.max(plan.b)), new_pair);
    // T_1 with the new pair data equals T_1 with the old one
    let big_w = rd.specs.overall.cutoff;
    let reach = big_w.outer.max(big_w_new.outer);
    let out_shift = rd.pair_invariant(
        &|ru: f64, rv: f64, _s: f64| {
            let r = (ru * ru + rv * rv).sqrt();
            big_w_new.eval(r) - big_w.eval(r)
        },
        reach,
        reach,
        scheme,
    )?;
    let mut overall = rd.specs.overall.clone();
    overall.cutoff = big_w_new;
    overall
        .counterterms
        .insert(zero6.clone(), rd.specs.overall.counterterm(&zero6) + out_shift);
    specs.overall = overall;
    Ok(specs)
}

impl RenormalizedDistribution {
    pub fn with_specs(&self, specs: RenormSpecs) -> Result<RenormalizedDistribution> {
        recursive_renormalize(&self.base, &specs)
    }
}

/// Power-counting verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Renormalizability {
    Renormalizable,
    Superrenormalizable,
    Unrenormalizable,
}

impl fmt::Display for Renormalizability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Renormalizability::Renormalizable => "renormalizable",
            Renormalizability::Superrenormalizable => "superrenormalizable",
            Renormalizability::Unrenormalizable => "unrenormalizable",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationRow {
    pub n: usize,
    pub max_edges: u32,
    pub rho_max: i32,
    /// Exhaustive graph enumeration value, when computed.
    pub enumerated: Option<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub d: usize,
    pub k: u32,
    pub verdict: Renormalizability,
    /// `(d-2) k / 2 - d`, the growth of `rho_max(n)` per order.
    pub slope: f64,
    pub rows: Vec<ClassificationRow>,
}

/// Largest `n` for which `rho_max` is cross-checked by enumerating graphs.
pub const ENUMERATION_LIMIT: usize = 5;

pub fn rho_max_closed_form(d: usize, k: u32, n: usize) -> i32 {
    (d as i32 - 2) * ((k as usize * n) / 2) as i32 - d as i32 * (n as i32 - 1)
}

/// Maximum of `(d-2) L - d (n-1)` over graphs in `Gamma(n, L)` whose vertex
/// valences are at most `k`, by enumeration.
pub fn rho_max_enumerated(d: usize, k: u32, n: usize) -> i32 {
    let mut best_l = 0;
    let top = k * n as u32 / 2;
    for l in (0..=top).rev() {
        if pair_count(n) == 0 && l > 0 {
            continue;
        }
        if enumerate_graphs(n, l).iter().any(|g| (0..n).all(|v| g.valence(v) <= k)) {
            best_l = l;
            break;
        }
    }
    (d as i32 - 2) * best_l as i32 - d as i32 * (n as i32 - 1)
}

pub fn classify_theory(d: usize, k: u32, n_max: usize) -> Result<Classification> {
    if d < 3 {
        return Err(EgError::PreconditionViolated(
            "power counting needs d >= 3 so that sd(P) = d - 2".into(),
        ));
    }
    if n_max < 2 || k == 0 {
        return Err(EgError::PreconditionViolated("need n_max >= 2 and k >= 1".into()));
    }
    let rows = (2..=n_max)
        .map(|n| ClassificationRow {
            n,
            max_edges: k * n as u32 / 2,
            rho_max: rho_max_closed_form(d, k, n),
            enumerated: (n <= ENUMERATION_LIMIT).then(|| rho_max_enumerated(d, k, n)),
        })
        .collect();
    let slope = (d as f64 - 2.0) * k as f64 / 2.0 - d as f64;
    let verdict = if slope > 0.0 {
        Renormalizability::Unrenormalizable
    } else if slope < 0.0 {
        Renormalizability::Superrenormalizable
    } else {
        Renormalizability::Renormalizable
    };
    Ok(Classification {
        d,
        k,
        verdict,
        slope,
        rows,
    })
}

/// Multi-indices of the derivative alphabet, re-exported for reports.
pub fn derivative_indices(d: usize) -> Vec<MultiIndex> {
    derivative_alphabet(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagator::green_function;
    use proptest::prelude::*;

    fn p3() -> Propagator {
        green_function(3, 1.0).unwrap()
    }

    fn off_centre(d: usize) -> RelativeTest {
        let mut c = vec![0.0; d];
        c[0] = 0.25;
        RelativeTest::Bump(TestFunction::new(c, 0.125, 1.0).unwrap())
    }

    #[test]
    fn analytic_scaling_and_divergence() {
        let p = p3();
        for (j, sd, rho) in [(1, 1, -2), (2, 2, -1), (3, 3, 0)] {
            let t = ScalarDistribution::propagator_power(p, j);
            assert_eq!(scaling_degree_analytic(&t).value, sd);
            assert_eq!(degree_of_divergence(&t), rho);
        }
        let p4 = green_function(4, 1.0).unwrap();
        assert_eq!(degree_of_divergence(&ScalarDistribution::propagator_power(p4, 2)), 0);
        assert_eq!(scaling_degree_analytic(&ScalarDistribution::delta(p)).value, 3);
        let p2 = green_function(2, 1.0).unwrap();
        let t2 = ScalarDistribution::propagator_power(p2, 2);
        assert!(scaling_degree_analytic(&t2).log);
        assert!(degree_of_divergence(&t2) < 0);
    }

    #[test]
    fn counterterm_counts() {
        for k in 1..=6 {
            assert_eq!(counterterm_indices(0, k).len(), 1);
            assert_eq!(counterterm_indices(1, k).len(), 1 + k);
            let expected = (k + 1) * (k + 2) / 2;
            assert_eq!(counterterm_indices(2, k).len(), expected);
        }
        assert!(counterterm_indices(-1, 3).is_empty());
    }

    #[test]
    fn numeric_scaling_degrees() {
        let s = QuadratureScheme::with_tolerance(1e-9);
        let psi = off_centre(3);
        for j in 1..=3 {
            let t = ScalarDistribution::propagator_power(p3(), j);
            let r = scaling_degree_numeric(&t, &psi, &dyadic_lambdas(), &s).unwrap();
            assert!((r.estimate - j as f64).abs() < 0.1, "P^{j}: {}", r.estimate);
        }
        let smooth = scaling_degree_numeric(&ScalarDistribution::smooth(p3()), &psi, &dyadic_lambdas(), &s).unwrap();
        assert!(smooth.estimate <= 0.1);
        let delta = scaling_degree_numeric(&ScalarDistribution::delta(p3()), &RelativeTest::Bump(TestFunction::centered(3, 0.5)), &dyadic_lambdas(), &s).unwrap();
        assert_eq!(delta.symbolic_exponent, Some(-3));
        assert_eq!(delta.estimate, 3.0);
    }

    #[test]
    fn bare_cube_with_centred_bump_is_rejected() {
        let t = ScalarDistribution::propagator_power(p3(), 3);
        let psi = RelativeTest::Bump(TestFunction::centered(3, 1.0));
        assert!(matches!(
            pair_bare(&t, &psi, &QuadratureScheme::default()),
            Err(EgError::NonIntegrableSingularity(_))
        ));
    }

    #[test]
    fn unique_extension_independent_of_cutoff() {
        let s = QuadratureScheme::with_tolerance(1e-9);
        let t = ScalarDistribution::propagator_power(p3(), 2);
        let psi = RelativeTest::Bump(TestFunction::centered(3, 1.0));
        let a = extend(&t, &ExtensionSpec::with_cutoff_radius(1.0).unwrap()).unwrap();
        let b = extend(&t, &ExtensionSpec::with_cutoff_radius(0.3).unwrap()).unwrap();
        let va = a.pair(&psi, &s).unwrap().total();
        let vb = b.pair(&psi, &s).unwrap().total();
        assert!(((va - vb) / va).abs() < 1e-8);
        let bare = pair_bare(&t, &psi, &s).unwrap();
        assert!(((va - bare) / bare).abs() < 1e-8);
        let warned = extend(&t, &ExtensionSpec::default().with_counterterm(vec![0, 0, 0], 1.0)).unwrap();
        assert!(warned.warning.is_some());
    }

    #[test]
    fn extension_agrees_off_origin() {
        let s = QuadratureScheme::with_tolerance(1e-9);
        let psi = off_centre(3);
        for j in [2, 3] {
            let t = ScalarDistribution::propagator_power(p3(), j);
            let e = extend(&t, &ExtensionSpec::default().with_counterterm(vec![0, 0, 0], 2.5)).unwrap();
            let a = e.pair(&psi, &s).unwrap().total();
            let b = pair_bare(&t, &psi, &s).unwrap();
            assert!(((a - b) / b).abs() < 1e-8, "P^{j}: {a} vs {b}");
        }
    }

    #[test]
    fn counterterm_difference_is_exact() {
        let s = QuadratureScheme::with_tolerance(1e-9);
        let t = ScalarDistribution::propagator_power(p3(), 3);
        let f = TestFunction::new(vec![0.1, 0.0, 0.0], 0.9, 1.0).unwrap();
        let psi = RelativeTest::Bump(f.clone());
        let e1 = extend(&t, &ExtensionSpec::default().with_counterterm(vec![0, 0, 0], 0.5)).unwrap();
        let e2 = extend(&t, &ExtensionSpec::default().with_counterterm(vec![0, 0, 0], -1.25)).unwrap();
        let a = e1.pair(&psi, &s).unwrap();
        let b = e2.pair(&psi, &s).unwrap();
        let phi0 = f.eval(&[0.0, 0.0, 0.0]);
        assert_eq!(a.counterterm_difference(&b), Some(1.75 * phi0));
        assert!((a.total() - b.total() - 1.75 * phi0).abs() < 1e-12);
    }

    #[test]
    fn cutoff_change_is_a_counterterm() {
        let s = QuadratureScheme::with_tolerance(1e-10);
        let t = ScalarDistribution::propagator_power(p3(), 3);
        let psi = RelativeTest::Bump(TestFunction::centered(3, 0.8));
        let w = Cutoff::with_radius(1.0).unwrap();
        let w2 = Cutoff::with_radius(0.4).unwrap();
        let shift = cutoff_shift(&t, &w, &w2, &s).unwrap();
        let e1 = extend(&t, &ExtensionSpec { cutoff: w, counterterms: BTreeMap::new() }).unwrap();
        let e2 = extend(
            &t,
            &ExtensionSpec {
                cutoff: w2,
                counterterms: [(vec![0, 0, 0], shift)].into_iter().collect(),
            },
        )
        .unwrap();
        let a = e1.pair(&psi, &s).unwrap().total();
        let b = e2.pair(&psi, &s).unwrap().total();
        assert!(((a - b) / a).abs() < 1e-7, "{a} vs {b}");
    }

    #[test]
    fn extended_cube_keeps_scaling_degree() {
        let s = QuadratureScheme::with_tolerance(1e-9);
        let t = ScalarDistribution::propagator_power(p3(), 3);
        let e = extend(&t, &ExtensionSpec::default()).unwrap();
        let psi = RelativeTest::Bump(TestFunction::centered(3, 1.0));
        let r = scaling_degree_extended(&e, &psi, &dyadic_lambdas(), &s).unwrap();
        assert!((r.estimate - 3.0).abs() < 0.15, "{}", r.estimate);
    }

    #[test]
    fn second_order_subtraction_in_four_dimensions() {
        // P^3 in d=4 has rho = 2: a cutoff change is absorbed by C_0 and the
        // pure second derivative counterterms
        let s = QuadratureScheme::with_tolerance(1e-10);
        let p = green_function(4, 1.0).unwrap();
        let t = ScalarDistribution::propagator_power(p, 3);
        assert_eq!(degree_of_divergence(&t), 2);
        let psi = RelativeTest::Bump(TestFunction::new(vec![0.1, -0.05, 0.0, 0.0], 0.9, 1.0).unwrap());
        let w = Cutoff::with_radius(1.0).unwrap();
        let w2 = Cutoff::with_radius(0.5).unwrap();
        let e = extend(&t, &ExtensionSpec { cutoff: w, counterterms: BTreeMap::new() }).unwrap();
        assert_eq!(e.counterterm_indices.len(), 15);
        let c0 = cutoff_shift(&t, &w, &w2, &s).unwrap();
        let area = unit_sphere_area(4);
        let m2 = area
            * crate::quadrature::integrate(
                |r: f64| r.powi(5) * t.radial_value(r) * (w2.eval(r) - w.eval(r)),
                w2.inner,
                w.outer,
                &s,
            )
            .unwrap();
        let mut cts: BTreeMap<MultiIndex, f64> = [(vec![0; 4], c0)].into_iter().collect();
        for i in 0..4 {
            let mut a = vec![0; 4];
            a[i] = 2;
            cts.insert(a, 0.5 * m2 / 4.0);
        }
        let e2 = extend(&t, &ExtensionSpec { cutoff: w2, counterterms: cts }).unwrap();
        let a = e.pair(&psi, &s).unwrap().total();
        let b = e2.pair(&psi, &s).unwrap().total();
        assert!(((a - b) / a).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn two_point_renormalization_with_product_test_functions() {
        let s = QuadratureScheme::with_tolerance(1e-9);
        let t = ScalarDistribution::propagator_power(p3(), 3);
        let rd = recursive_renormalize(&t, &RenormSpecs::default()).unwrap();
        assert_eq!(rd.overall.counterterm_count(), 1);
        let f = TestFunction::centered(3, 1.0);
        let g = TestFunction::new(vec![0.2, 0.0, 0.0], 0.8, 1.0).unwrap();
        let v = rd.pair(&[f.clone(), g.clone()], &s).unwrap();
        assert!(v.is_finite());
        // single edge: nothing to do
        let single = recursive_renormalize(&ScalarDistribution::propagator_power(p3(), 1), &RenormSpecs::default()).unwrap();
        assert!(single.overall.spec.is_none());
        let bare = crate::propagator::pair(&crate::propagator::Kernel::propagator_power(p3(), 1), &f, &g, &s).unwrap();
        assert!(((single.pair(&[f, g], &s).unwrap() - bare) / bare).abs() < 1e-8);
    }

    #[test]
    fn factorized_four_point_distribution() {
        let s = QuadratureScheme::with_tolerance(1e-8);
        let p = green_function(4, 1.0).unwrap();
        let t = ScalarDistribution::from_factors(
            4,
            p,
            &[PropagatorFactor { pair: (0, 1), power: 2 }, PropagatorFactor { pair: (2, 3), power: 2 }],
        )
        .unwrap();
        let rd = recursive_renormalize(&t, &RenormSpecs::default()).unwrap();
        assert_eq!(rd.pair_loci.len(), 2);
        assert!(rd.pair_loci.iter().all(|l| l.rho == 0));
        assert!(rd.overall.spec.is_none());
        let fs: Vec<TestFunction> = (0..4)
            .map(|i| TestFunction::new(vec![0.1 * i as f64, 0.0, 0.0, 0.0], 0.7 + 0.05 * i as f64, 1.0).unwrap())
            .collect();
        let whole = rd.pair(&fs, &s).unwrap();
        let two = recursive_renormalize(&ScalarDistribution::propagator_power(p, 2), &RenormSpecs::default()).unwrap();
        let a = two.pair(&fs[..2], &s).unwrap();
        let b = two.pair(&fs[2..], &s).unwrap();
        assert!(((whole - a * b) / whole).abs() < 1e-12);
    }

    #[test]
    fn nested_pairing_reduces_to_two_points() {
        // with only P(x1-x2)^3 the v-integral factorizes:
        // int dv Psi(u + v, v) = (f1 * f2)(u) int f3
        let s = QuadratureScheme::with_tolerance(1e-6);
        let t2 = ScalarDistribution::propagator_power(p3(), 3);
        let spec = ExtensionSpec::with_cutoff_radius(0.8).unwrap().with_counterterm(vec![0, 0, 0], 0.01);
        let base = ScalarDistribution::from_factors(3, p3(), &[PropagatorFactor { pair: (0, 1), power: 3 }]).unwrap();
        let specs = RenormSpecs {
            pairs: [((0, 1), spec.clone())].into_iter().collect(),
            overall: ExtensionSpec::default(),
        };
        let rd = RenormalizedDistribution {
            base: base.clone(),
            pair_loci: vec![locus(vec![0, 1], 0, spec.clone(), 3)],
            overall: locus(vec![0, 1, 2], degree_of_divergence(&base), ExtensionSpec::default(), 6),
            plan: RenormPlan::Nested(NestedPlan { a: 0, b: 1, c: 2, p_ab: 3, p_ac: 0, p_bc: 0 }),
            specs,
        };
        let fs = [TestFunction::centered(3, 0.7), TestFunction::centered(3, 0.6), TestFunction::centered(3, 0.5)];
        let nested = rd.pair(&fs, &s).unwrap();
        let e = extend(&t2, &spec).unwrap();
        let two = e.pair(&RelativeTest::product(&fs[0], &fs[1]).unwrap(), &s).unwrap().total();
        let expected = two * fs[2].integral(&s).unwrap();
        assert!(((nested - expected) / expected).abs() < 1e-4, "{nested} vs {expected}");
    }

    #[test]
    fn overlapping_divergences_are_rejected() {
        let t = ScalarDistribution::from_factors(
            3,
            p3(),
            &[PropagatorFactor { pair: (0, 1), power: 3 }, PropagatorFactor { pair: (1, 2), power: 3 }],
        )
        .unwrap();
        assert!(matches!(
            recursive_renormalize(&t, &RenormSpecs::default()),
            Err(EgError::OverlappingDivergence(_))
        ));
        let nested = ScalarDistribution::from_factors(
            3,
            p3(),
            &[
                PropagatorFactor { pair: (0, 1), power: 3 },
                PropagatorFactor { pair: (0, 2), power: 2 },
                PropagatorFactor { pair: (1, 2), power: 1 },
            ],
        )
        .unwrap();
        assert!(matches!(extend(&nested, &ExtensionSpec::default()), Err(EgError::NotPrimitive(_))));
    }

    #[test]
    fn classification_examples() {
        let c = classify_theory(4, 4, 8).unwrap();
        assert_eq!(c.verdict, Renormalizability::Renormalizable);
        assert!(c.rows.iter().all(|r| r.rho_max == 4));
        let c = classify_theory(3, 4, 8).unwrap();
        assert_eq!(c.verdict, Renormalizability::Superrenormalizable);
        assert!(c.rows.iter().all(|r| r.rho_max == 3 - r.n as i32));
        let c = classify_theory(4, 6, 8).unwrap();
        assert_eq!(c.verdict, Renormalizability::Unrenormalizable);
        assert!(c.rows.iter().all(|r| r.rho_max == 2 * r.n as i32 + 4));
        for c in [classify_theory(4, 4, 5).unwrap(), classify_theory(3, 4, 5).unwrap(), classify_theory(4, 6, 5).unwrap()] {
            for r in &c.rows {
                assert_eq!(r.enumerated, Some(r.rho_max));
            }
        }
        assert!(classify_theory(2, 4, 5).is_err());
    }

    #[test]
    fn fit_recovers_known_slopes() {
        let pts: Vec<(f64, f64)> = dyadic_lambdas().iter().map(|&l| (l, 3.0 * l.powf(-2.5))).collect();
        let (s, _, r) = fit_scaling(&pts, 2, FitModel::Linear).unwrap();
        assert!((s - 2.5).abs() < 1e-12 && r < 1e-12);
        let pts: Vec<(f64, f64)> = dyadic_lambdas()
            .iter()
            .map(|&l| (l, l.powi(-3) * (0.7 + 0.2 * (1.0 / l).ln())))
            .collect();
        let (s, _, _) = fit_scaling(&pts, 2, FitModel::LogCorrected).unwrap();
        assert!((s - 3.0).abs() < 0.1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn counterterm_algebra(c1 in -5.0f64..5.0, c2 in -5.0f64..5.0, c3 in -5.0f64..5.0) {
            // rho = 0 in d = 4: P^2
            let p = green_function(4, 1.0).unwrap();
            let t = ScalarDistribution::propagator_power(p, 2);
            let f = TestFunction::new(vec![0.0, 0.1, 0.0, 0.0], 0.8, 1.0).unwrap();
            let psi = RelativeTest::Bump(f.clone());
            let s = QuadratureScheme::with_tolerance(1e-8);
            let _ = c3;
            let a = extend(&t, &ExtensionSpec::default().with_counterterm(vec![0; 4], c1)).unwrap().pair(&psi, &s).unwrap();
            let b = extend(&t, &ExtensionSpec::default().with_counterterm(vec![0; 4], c2)).unwrap().pair(&psi, &s).unwrap();
            let expected = (c1 - c2) * f.eval(&[0.0; 4]);
            prop_assert_eq!(a.counterterm_difference(&b), Some(expected));
        }
    }
}
