//! Fundamental solutions of `-Delta + m^2` on `R^d`, their derivatives, and
//! numeric pairings of propagator powers against test functions.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use crate::error::{EgError, Result};
use crate::expr::Expr;
use crate::functionals::MultiIndex;
use crate::quadrature::{gauss_legendre_interval, integrate, integrate_ball, integrate_singular_left, FailureFlag, QuadratureScheme};
use crate::special::{bessel_k, unit_sphere_area};
use crate::test_function::{norm, TestFunction};

/// Scaling degree at the origin; `log` marks an extra logarithmic factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScalingDegree {
    pub value: i32,
    pub log: bool,
}

impl fmt::Display for ScalingDegree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.log {
            write!(f, "{} (log)", self.value)
        } else {
            write!(f, "{}", self.value)
        }
    }
}

/// The Euclidean invariant, decaying fundamental solution `P` of
/// `(-Delta + m^2) P = delta` in `d` dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Propagator {
    pub dim: usize,
    pub mass: f64,
}

pub fn green_function(dim: usize, mass: f64) -> Result<Propagator> {
    if dim == 0 {
        return Err(EgError::PreconditionViolated("dimension must be >= 1".into()));
    }
    if !(mass >= 0.0 && mass.is_finite()) {
        return Err(EgError::PreconditionViolated(format!(
            "mass must be finite and nonnegative, got {mass}"
        )));
    }
    if mass == 0.0 && dim <= 2 {
        return Err(EgError::UnsupportedCase(format!(
            "no decaying massless fundamental solution in d={dim}"
        )));
    }
    Ok(Propagator { dim, mass })
}

impl Propagator {
    fn two_nu(&self) -> i32 {
        self.dim as i32 - 2
    }

    /// `P` as a function of `r = |x - y| > 0`.
    pub fn radial(&self, r: f64) -> f64 {
        self.radial_derivative(0, r)
    }

    /// `(D^k P)(r)` with `D = (1/r) d/dr`.
    pub fn radial_derivative(&self, k: u32, r: f64) -> f64 {
        let d = self.dim as i32;
        if self.mass == 0.0 {
            let c = 1.0 / ((d - 2) as f64 * unit_sphere_area(self.dim));
            let mut p = 2 - d;
            let mut coef = c;
            for _ in 0..k {
                coef *= p as f64;
                p -= 2;
            }
            return coef * r.powi(p);
        }
        let m = self.mass;
        let z = m * r;
        let nu = self.two_nu() as f64 / 2.0;
        let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
        let pref = (2.0 * PI).powf(-(d as f64) / 2.0) * m.powf(2.0 * nu + 2.0 * k as f64);
        let kb = bessel_k(self.two_nu() + 2 * k as i32, z);
        if kb == 0.0 {
            return 0.0;
        }
        sign * pref * z.powf(-nu - k as f64) * kb
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let r: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        self.radial(r)
    }

    pub fn scaling_degree(&self) -> ScalingDegree {
        match self.dim {
            1 => ScalingDegree { value: 0, log: false },
            2 => ScalingDegree { value: 0, log: true },
            d => ScalingDegree {
                value: d as i32 - 2,
                log: false,
            },
        }
    }

    /// Symbolic `d^alpha P(x)` as `sum c x^e (D^k P)(|x|)`.
    pub fn cartesian(&self, alpha: &[u32]) -> CartesianDerivative {
        CartesianDerivative {
            propagator: *self,
            terms: radial_expansion(alpha),
        }
    }

    pub fn symbol(&self) -> String {
        if self.mass == 0.0 {
            format!("r^{}/({}*|S^{}|)", 2 - self.dim as i32, self.dim as i32 - 2, self.dim - 1)
        } else {
            match self.dim {
                1 => format!("exp(-{m}|x|)/(2*{m})", m = self.mass),
                3 => format!("exp(-{}r)/(4 pi r)", self.mass),
                d => format!("(2pi)^(-{d}/2) ({m}/r)^({d}/2-1) K_({d}/2-1)({m}r)", m = self.mass),
            }
        }
    }
}

/// Expansion of a Cartesian derivative of a radial function.
#[derive(Debug, Clone, PartialEq)]
pub struct CartesianDerivative {
    pub propagator: Propagator,
    /// `(exponents, coefficient, k)` meaning `coefficient * x^exponents * D^k`.
    pub terms: Vec<(Vec<u32>, f64, u32)>,
}

impl CartesianDerivative {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let r = norm(x);
        let mut total = 0.0;
        for (e, c, k) in &self.terms {
            let mono: f64 = x.iter().zip(e).map(|(xi, &ei)| xi.powi(ei as i32)).product();
            if mono == 0.0 {
                continue;
            }
            total += c * mono * self.propagator.radial_derivative(*k, r);
        }
        total
    }
}

fn radial_expansion(alpha: &[u32]) -> Vec<(Vec<u32>, f64, u32)> {
    let d = alpha.len();
    let mut terms: BTreeMap<(Vec<u32>, u32), f64> = BTreeMap::new();
    terms.insert((vec![0; d], 0), 1.0);
    for (axis, &count) in alpha.iter().enumerate() {
        for _ in 0..count {
            let mut next: BTreeMap<(Vec<u32>, u32), f64> = BTreeMap::new();
            for ((e, k), c) in terms {
                // d_i (x^e D^k g) = e_i x^{e - 1_i} D^k g + x^{e + 1_i} D^{k+1} g
                if e[axis] > 0 {
                    let mut e1 = e.clone();
                    e1[axis] -= 1;
                    *next.entry((e1, k)).or_default() += c * e[axis] as f64;
                }
                let mut e2 = e;
                e2[axis] += 1;
                *next.entry((e2, k + 1)).or_default() += c;
            }
            terms = next;
        }
    }
    terms
        .into_iter()
        .filter(|(_, c)| *c != 0.0)
        .map(|((e, k), c)| (e, c, k))
        .collect()
}

/// `int_{S^{d-1}} profile(|rho w - c|) dw` for a profile supported in
/// `[0, support)`, where `dist = |c|`.
pub fn spherical_integral<F: Fn(f64) -> f64>(
    profile: &F,
    dist: f64,
    support: f64,
    rho: f64,
    dim: usize,
    scheme: &QuadratureScheme,
    flag: &FailureFlag,
) -> f64 {
    if dim == 1 {
        return profile((rho - dist).abs()) + profile(rho + dist);
    }
    let area = unit_sphere_area(dim);
    if dist == 0.0 || rho == 0.0 {
        return area * profile(rho.max(dist));
    }
    if (rho - dist).abs() >= support {
        return 0.0;
    }
    let cos_min = (rho * rho + dist * dist - support * support) / (2.0 * rho * dist);
    let theta_max = if cos_min <= -1.0 { PI } else { cos_min.min(1.0).acos() };
    let pw = dim as i32 - 2;
    let est = crate::quadrature::integrate_lenient(
        |th: f64| {
            let s2 = rho * rho + dist * dist - 2.0 * rho * dist * th.cos();
            profile(s2.max(0.0).sqrt()) * th.sin().powi(pw)
        },
        0.0,
        theta_max,
        scheme,
    );
    unit_sphere_area(dim - 1) * flag.record(&est)
}

/// `|int P (-Delta + m^2) phi - phi(0)|`.
pub fn verify_fundamental_solution(p: &Propagator, phi: &TestFunction, scheme: &QuadratureScheme) -> Result<f64> {
    scheme.validate()?;
    if phi.dim() != p.dim {
        return Err(EgError::PreconditionViolated(
            "test function dimension does not match the propagator".into(),
        ));
    }
    let m2 = p.mass * p.mass;
    let profile = |s: f64| -phi.radial_laplacian(s) + m2 * phi.radial(s);
    let dist = norm(&phi.center);
    let r = phi.radius;
    let d = p.dim as i32;
    let flag = FailureFlag::default();
    let inner = scheme.inner();
    let lo = (dist - r).max(0.0);
    let integrand = |rho: f64| {
        if rho <= 0.0 {
            return 0.0;
        }
        rho.powi(d - 1) * p.radial(rho) * spherical_integral(&profile, dist, r, rho, p.dim, &inner, &flag)
    };
    let value = if lo == 0.0 {
        integrate_singular_left(integrand, 0.0, dist + r, scheme).into_result("fundamental solution pairing")?
    } else {
        integrate(integrand, lo, dist + r, scheme)?
    };
    flag.check("fundamental solution pairing")?;
    let phi0 = phi.eval(&vec![0.0; p.dim]);
    Ok((value - phi0).abs())
}

/// Fixed resolution used for the correlation profile of two bumps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationResolution {
    pub n_radial: usize,
    pub n_angular: usize,
}

impl Default for CorrelationResolution {
    fn default() -> Self {
        CorrelationResolution {
            n_radial: 48,
            n_angular: 48,
        }
    }
}

/// `psi(u) = int f(y + u) g(y) dy = kappa(|u - delta|)` for bumps `f`, `g`,
/// with `delta = c_f - c_g`.
#[derive(Debug, Clone)]
pub struct Correlation {
    pub f: TestFunction,
    pub g: TestFunction,
    pub delta: Vec<f64>,
    radial_nodes: Vec<(f64, f64)>,
    angular_nodes: Vec<(f64, f64)>,
}

impl Correlation {
    pub fn new(f: &TestFunction, g: &TestFunction, res: CorrelationResolution) -> Result<Self> {
        if f.dim() != g.dim() {
            return Err(EgError::PreconditionViolated(
                "correlated test functions must share a dimension".into(),
            ));
        }
        let delta = f.center.iter().zip(&g.center).map(|(a, b)| a - b).collect();
        // radial map t -> r_g t (2 - t) clusters nodes near the flat edge of g
        let radial_nodes = gauss_legendre_interval(res.n_radial, 0.0, 1.0)
            .into_iter()
            .map(|(t, w)| (g.radius * t * (2.0 - t), w * g.radius * 2.0 * (1.0 - t)))
            .collect();
        let angular_nodes = gauss_legendre_interval(res.n_angular, 0.0, 1.0);
        Ok(Correlation {
            f: f.clone(),
            g: g.clone(),
            delta,
            radial_nodes,
            angular_nodes,
        })
    }

    pub fn dim(&self) -> usize {
        self.f.dim()
    }

    /// Radius of the support of `kappa`.
    pub fn support(&self) -> f64 {
        self.f.radius + self.g.radius
    }

    pub fn offset(&self) -> f64 {
        norm(&self.delta)
    }

    /// `kappa(s)`.
    pub fn profile(&self, s: f64) -> f64 {
        let d = self.dim();
        let rf = self.f.radius;
        if s >= self.support() {
            return 0.0;
        }
        let mut total = 0.0;
        if d == 1 {
            for &(t, w) in &self.radial_nodes {
                let g0 = self.g.radial(t);
                if g0 == 0.0 {
                    continue;
                }
                total += w * g0 * (self.f.radial((t + s).abs()) + self.f.radial((s - t).abs()));
            }
            return total;
        }
        let pw = d as i32 - 2;
        for &(t, wt) in &self.radial_nodes {
            let g0 = self.g.radial(t);
            if g0 == 0.0 {
                continue;
            }
            // |z + s e|^2 = t^2 + s^2 + 2ts cos(theta) < rf^2
            let inner = if t * s == 0.0 {
                if (t + s) >= rf {
                    0.0
                } else {
                    self.f.radial(t + s) * unit_sphere_area(d)
                }
            } else {
                let cmax = (rf * rf - t * t - s * s) / (2.0 * t * s);
                if cmax <= -1.0 {
                    0.0
                } else {
                    let th_lo = if cmax >= 1.0 { 0.0 } else { cmax.acos() };
                    let span = PI - th_lo;
                    let mut acc = 0.0;
                    for &(u, wu) in &self.angular_nodes {
                        let th = th_lo + span * u;
                        let s2 = t * t + s * s + 2.0 * t * s * th.cos();
                        acc += wu * self.f.radial(s2.max(0.0).sqrt()) * th.sin().powi(pw);
                    }
                    acc * span * unit_sphere_area(d - 1)
                }
            };
            total += wt * t.powi(d as i32 - 1) * g0 * inner;
        }
        total
    }

    /// `(d^a psi)(0) = int (d^a f)(y) g(y) dy`.
    pub fn derivative_at_origin(&self, a: &MultiIndex, scheme: &QuadratureScheme) -> Result<f64> {
        if !self.f.overlaps(&self.g) {
            return Ok(0.0);
        }
        let df: Expr = self.f.as_expr().derivative_multi(a);
        integrate_ball(
            &|y: &[f64]| {
                let gv = self.g.eval(y);
                if gv == 0.0 {
                    0.0
                } else {
                    gv * df.eval(y)
                }
            },
            &self.g.center,
            self.g.radius,
            scheme,
        )
    }
}

/// Symbolic kernels accepted by [`pair`] and [`wavefront`].
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    /// `d^alpha delta(x - y)`.
    Delta { dim: usize, derivative: MultiIndex },
    /// `P(x - y)^power`.
    Propagator { propagator: Propagator, power: u32 },
    Product(Vec<Kernel>),
}

impl Kernel {
    pub fn propagator_power(propagator: Propagator, power: u32) -> Kernel {
        Kernel::Propagator { propagator, power }
    }

    pub fn delta(dim: usize) -> Kernel {
        Kernel::Delta {
            dim,
            derivative: vec![0; dim],
        }
    }

    /// `sd - d` on the diagonal, for a single kernel.
    pub fn degree_of_divergence(&self) -> i32 {
        match self {
            Kernel::Delta { derivative, .. } => crate::functionals::order(derivative) as i32,
            Kernel::Propagator { propagator, power } => {
                propagator.scaling_degree().value * *power as i32 - propagator.dim as i32
            }
            Kernel::Product(ks) => {
                let dim = ks.first().map(Kernel::dim).unwrap_or(0) as i32;
                ks.iter().map(|k| k.degree_of_divergence() + k.dim() as i32).sum::<i32>() - dim
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Kernel::Delta { dim, .. } => *dim,
            Kernel::Propagator { propagator, .. } => propagator.dim,
            Kernel::Product(ks) => ks.first().map(Kernel::dim).unwrap_or(0),
        }
    }
}

/// `<kernel(x - y), f(x) g(y)>`.
pub fn pair(kernel: &Kernel, f: &TestFunction, g: &TestFunction, scheme: &QuadratureScheme) -> Result<f64> {
    scheme.validate()?;
    if f.dim() != kernel.dim() || g.dim() != kernel.dim() {
        return Err(EgError::PreconditionViolated(
            "test functions must live in the kernel's dimension".into(),
        ));
    }
    match kernel {
        Kernel::Delta { derivative, .. } => {
            // <d^a delta(x-y), f(x) g(y)> = (-1)^{|a|} int (d^a f) g
            let sign = if crate::functionals::order(derivative).is_multiple_of(2) { 1.0 } else { -1.0 };
            let corr = Correlation::new(f, g, CorrelationResolution::default())?;
            Ok(sign * corr.derivative_at_origin(derivative, scheme)?)
        }
        Kernel::Propagator { propagator, power } => {
            let rho = kernel.degree_of_divergence();
            if rho >= 0 && f.overlaps(g) {
                return Err(EgError::NonIntegrableSingularity(format!(
                    "P^{power} in d={} has degree of divergence {rho} >= 0 and the test function does not vanish on the diagonal",
                    propagator.dim
                )));
            }
            let corr = Correlation::new(f, g, CorrelationResolution::default())?;
            pair_radial_power(propagator, *power, &corr, scheme)
        }
        Kernel::Product(_) => Err(EgError::UnsupportedKernel(
            "products of kernels in the same variables are paired through the renormalization module".into(),
        )),
    }
}

/// `int P(u)^power psi(u) du` with `psi` the correlation of two bumps.
pub fn pair_radial_power(p: &Propagator, power: u32, corr: &Correlation, scheme: &QuadratureScheme) -> Result<f64> {
    let dist = corr.offset();
    let support = corr.support();
    let d = p.dim as i32;
    let flag = FailureFlag::default();
    let inner = scheme.inner();
    let profile = |s: f64| corr.profile(s);
    let integrand = |rho: f64| {
        if rho <= 0.0 {
            return 0.0;
        }
        let s = spherical_integral(&profile, dist, support, rho, p.dim, &inner, &flag);
        if s == 0.0 {
            return 0.0;
        }
        rho.powi(d - 1) * p.radial(rho).powi(power as i32) * s
    };
    let lo = (dist - support).max(0.0);
    let est = if lo == 0.0 {
        integrate_singular_left(integrand, 0.0, dist + support, scheme)
    } else {
        crate::quadrature::integrate_lenient(integrand, lo, dist + support, scheme)
    };
    flag.check("propagator pairing")?;
    est.into_result("propagator pairing")
}

/// Base-point and covector constraints of a wave front set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaveFrontDescriptor {
    /// Pairs of arguments that must coincide.
    pub coincident: Vec<(usize, usize)>,
    /// Integer coefficients `c_j` of the relation `sum c_j k_j = 0`.
    pub covector_relation: Vec<i32>,
}

impl fmt::Display for WaveFrontDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base: Vec<String> = self
            .coincident
            .iter()
            .map(|(a, b)| format!("x{}=x{}", a + 1, b + 1))
            .collect();
        let mut rel = String::new();
        for (j, &c) in self.covector_relation.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let sign = if c < 0 { "-" } else if rel.is_empty() { "" } else { "+" };
            let mag = if c.abs() == 1 { String::new() } else { c.abs().to_string() };
            rel.push_str(&format!("{sign}{mag}k{}", j + 1));
        }
        write!(f, "base {{{}}}, covectors {{{rel}=0, k1 != 0}}", base.join(", "))
    }
}

/// Wave front set of a two-point `delta`-type kernel or a single `P`.
pub fn wavefront(kernel: &Kernel) -> Result<WaveFrontDescriptor> {
    match kernel {
        Kernel::Delta { .. } | Kernel::Propagator { power: 1, .. } => Ok(WaveFrontDescriptor {
            coincident: vec![(0, 1)],
            covector_relation: vec![1, 1],
        }),
        Kernel::Propagator { power, .. } => Err(EgError::UnsupportedKernel(format!(
            "wave front set of the product P^{power} is not computed"
        ))),
        Kernel::Product(_) => Err(EgError::UnsupportedKernel(
            "wave front sets of products are not computed".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate_box;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_forms() {
        let p3 = green_function(3, 1.0).unwrap();
        for r in [0.01f64, 0.3, 1.0, 2.5, 7.0, 40.0] {
            let exact = (-r).exp() / (4.0 * PI * r);
            assert!(((p3.radial(r) - exact) / exact).abs() < 1e-12);
        }
        let p1 = green_function(1, 2.0).unwrap();
        for x in [0.0f64, 0.2, 1.5] {
            let exact = (-2.0 * x).exp() / 4.0;
            if x > 0.0 {
                assert!((p1.radial(x) - exact).abs() < 1e-14);
            }
            // -P'' + 4P = 0 off the origin
            if x > 0.0 {
                let d2 = 4.0 * p1.radial(x);
                let fd = (p1.radial(x + 1e-4) - 2.0 * p1.radial(x) + p1.radial(x - 1e-4)) / 1e-8;
                assert!((fd - d2).abs() < 1e-6);
            }
        }
        let p2 = green_function(2, 1.0).unwrap();
        assert!((p2.radial(1.0) - 0.421_024_438_240_708_34 / (2.0 * PI)).abs() < 1e-14);
        let p4 = green_function(4, 0.0).unwrap();
        assert!((p4.radial(2.0) - 0.25 / (2.0 * 2.0 * PI * PI)).abs() < 1e-15);
        assert!(matches!(green_function(2, 0.0), Err(EgError::UnsupportedCase(_))));
        assert!(matches!(green_function(1, 0.0), Err(EgError::UnsupportedCase(_))));
    }

    #[test]
    fn radial_derivative_matches_finite_difference() {
        for (d, m) in [(3, 1.0), (4, 0.7), (2, 1.3), (3, 0.0), (5, 2.0)] {
            let p = green_function(d, m).unwrap();
            for r in [0.4, 1.1, 2.3] {
                for k in 0..3 {
                    let h = 1e-5;
                    let fd = (p.radial_derivative(k, r + h) - p.radial_derivative(k, r - h)) / (2.0 * h) / r;
                    let an = p.radial_derivative(k + 1, r);
                    assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "d={d} m={m} r={r} k={k}");
                }
            }
        }
    }

    #[test]
    fn cartesian_derivatives_match_finite_difference() {
        let p = green_function(3, 1.0).unwrap();
        let x = [0.3, -0.4, 0.5];
        let h = 1e-4;
        for alpha in [vec![1, 0, 0], vec![0, 2, 0], vec![1, 1, 0], vec![0, 1, 2]] {
            let da = p.cartesian(&alpha);
            // lower one index and difference along it
            let axis = alpha.iter().position(|&a| a > 0).unwrap();
            let mut lower = alpha.clone();
            lower[axis] -= 1;
            let dl = p.cartesian(&lower);
            let mut xp = x;
            let mut xm = x;
            xp[axis] += h;
            xm[axis] -= h;
            let fd = (dl.eval(&xp) - dl.eval(&xm)) / (2.0 * h);
            let an = da.eval(&x);
            assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{alpha:?}: {fd} vs {an}");
        }
        // Laplacian of P vanishes off the origin up to m^2 P
        let lap: f64 = (0..3)
            .map(|i| {
                let mut a = vec![0; 3];
                a[i] = 2;
                p.cartesian(&a).eval(&x)
            })
            .sum();
        assert!((lap - p.eval(&x, &[0.0; 3])).abs() < 1e-12);
    }

    #[test]
    fn scaling_degrees() {
        assert_eq!(green_function(1, 1.0).unwrap().scaling_degree(), ScalingDegree { value: 0, log: false });
        assert_eq!(green_function(2, 1.0).unwrap().scaling_degree(), ScalingDegree { value: 0, log: true });
        assert_eq!(green_function(3, 1.0).unwrap().scaling_degree().value, 1);
        assert_eq!(green_function(4, 0.0).unwrap().scaling_degree().value, 2);
    }

    #[test]
    fn fundamental_solution_residuals() {
        let s = QuadratureScheme::default();
        for (d, m) in [(3, 1.0), (1, 2.0), (2, 0.5), (4, 0.0)] {
            let p = green_function(d, m).unwrap();
            for phi in [
                TestFunction::centered(d, 1.0),
                TestFunction::new(vec![0.3; d], 1.0, 2.0).unwrap(),
            ] {
                let res = verify_fundamental_solution(&p, &phi, &s).unwrap();
                let phi0 = phi.eval(&vec![0.0; d]);
                assert!(res < 1e-6 * phi0.abs().max(1.0), "d={d} m={m}: {res}");
            }
        }
    }

    #[test]
    fn fundamental_solution_away_from_origin_and_linear() {
        let s = QuadratureScheme::default();
        let p = green_function(3, 1.0).unwrap();
        let far = TestFunction::new(vec![2.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        assert!(verify_fundamental_solution(&p, &far, &s).unwrap() < 1e-9);
        let phi = TestFunction::new(vec![0.1, 0.0, 0.2], 0.8, 1.0).unwrap();
        let r1 = verify_fundamental_solution(&p, &phi, &s).unwrap();
        let r5 = verify_fundamental_solution(&p, &phi.scale_amplitude(5.0), &s).unwrap();
        assert!(r5 <= 5.0 * r1 + 1e-12);
    }

    fn monte_carlo_pair(p: &Propagator, power: i32, f: &TestFunction, g: &TestFunction, n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = f.dim();
        let sample = |t: &TestFunction, rng: &mut ChaCha8Rng| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if norm(&v) < 1.0 {
                return v.iter().zip(&t.center).map(|(a, c)| c + a * t.radius).collect::<Vec<f64>>();
            }
        };
        let ball = |t: &TestFunction| unit_sphere_area(d) / d as f64 * t.radius.powi(d as i32);
        let mut acc = 0.0;
        for _ in 0..n {
            let x = sample(f, &mut rng);
            let y = sample(g, &mut rng);
            acc += f.eval(&x) * g.eval(&y) * p.eval(&x, &y).powi(power);
        }
        acc / n as f64 * ball(f) * ball(g)
    }

    #[test]
    fn disjoint_pairing_matches_monte_carlo() {
        let p = green_function(3, 1.0).unwrap();
        let f = TestFunction::new(vec![0.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let g = TestFunction::new(vec![3.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let s = QuadratureScheme::with_tolerance(1e-8);
        let v = pair(&Kernel::propagator_power(p, 1), &f, &g, &s).unwrap();
        let mc = monte_carlo_pair(&p, 1, &f, &g, 400_000, 7);
        assert!(((v - mc) / v).abs() < 0.01, "{v} vs {mc}");
    }

    #[test]
    fn overlapping_square_matches_radial_oracle() {
        // concentric unit bumps: int P^2(u) kappa(|u|) du with kappa from a
        // brute-force 2-D cylindrical integral
        let p = green_function(3, 1.0).unwrap();
        let f = TestFunction::centered(3, 1.0);
        let s = QuadratureScheme::with_tolerance(1e-9);
        let v = pair(&Kernel::propagator_power(p, 2), &f, &f, &s).unwrap();
        let kappa = |u: f64| {
            // int f(z + u e3) f(z) dz in cylindrical coordinates (rho, z3)
            integrate_box(
                &|q: &[f64]| {
                    let (r, z) = (q[0], q[1]);
                    2.0 * PI * r * f.radial((r * r + z * z).sqrt()) * f.radial((r * r + (z + u) * (z + u)).sqrt())
                },
                &[0.0, -1.0],
                &[1.0, 1.0],
                &QuadratureScheme::with_tolerance(1e-9),
            )
            .unwrap()
        };
        let oracle = integrate(
            |u| 4.0 * PI * u * u * p.radial(u).powi(2) * kappa(u),
            0.0,
            2.0,
            &QuadratureScheme::with_tolerance(1e-7),
        )
        .unwrap();
        assert!(((v - oracle) / oracle).abs() < 1e-6, "{v} vs {oracle}");
        let cube = pair(&Kernel::propagator_power(p, 3), &f, &f, &s);
        assert!(matches!(cube, Err(EgError::NonIntegrableSingularity(_))));
    }

    #[test]
    fn delta_pairing_is_overlap_integral() {
        let f = TestFunction::new(vec![0.0, 0.0], 1.0, 1.0).unwrap();
        let g = TestFunction::new(vec![0.5, 0.0], 1.0, 1.0).unwrap();
        let s = QuadratureScheme::with_tolerance(1e-9);
        let v = pair(&Kernel::delta(2), &f, &g, &s).unwrap();
        let direct = integrate_ball(&|x: &[f64]| f.eval(x) * g.eval(x), &[0.0, 0.0], 1.0, &s).unwrap();
        assert!((v - direct).abs() < 1e-10);
    }

    #[test]
    fn correlation_profile_matches_direct_integral() {
        let f = TestFunction::new(vec![0.2, 0.0, 0.0], 0.7, 1.0).unwrap();
        let g = TestFunction::new(vec![0.0, 0.1, 0.0], 0.5, 1.3).unwrap();
        let corr = Correlation::new(&f, &g, CorrelationResolution::default()).unwrap();
        let s = QuadratureScheme::with_tolerance(1e-9);
        for u in [[0.0, 0.0, 0.0], [0.3, -0.1, 0.2], [0.5, 0.5, 0.0]] {
            let direct = integrate_ball(
                &|y: &[f64]| {
                    let shifted: Vec<f64> = y.iter().zip(&u).map(|(a, b)| a + b).collect();
                    f.eval(&shifted) * g.eval(y)
                },
                &g.center,
                g.radius,
                &s,
            )
            .unwrap();
            let dist: Vec<f64> = u.iter().zip(&corr.delta).map(|(a, b)| a - b).collect();
            let k = corr.profile(norm(&dist));
            assert!((k - direct).abs() < 1e-7 * direct.abs().max(1e-3), "{u:?}: {k} vs {direct}");
        }
    }

    #[test]
    fn wavefront_descriptors() {
        let p = green_function(3, 1.0).unwrap();
        let wd = wavefront(&Kernel::delta(3)).unwrap();
        assert_eq!(wd.coincident, vec![(0, 1)]);
        assert_eq!(wd.covector_relation, vec![1, 1]);
        assert_eq!(wavefront(&Kernel::propagator_power(p, 1)).unwrap(), wd);
        let dd = Kernel::Delta {
            dim: 3,
            derivative: vec![1, 0, 0],
        };
        assert_eq!(wavefront(&dd).unwrap(), wd);
        assert!(wd.to_string().contains("k1+k2=0"));
        assert!(matches!(
            wavefront(&Kernel::Product(vec![Kernel::delta(3), Kernel::propagator_power(p, 1)])),
            Err(EgError::UnsupportedKernel(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn symmetric_in_arguments(x in proptest::collection::vec(-3.0f64..3.0, 3), y in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let p = green_function(3, 0.8).unwrap();
            prop_assert_eq!(p.eval(&x, &y), p.eval(&y, &x));
        }

        #[test]
        fn monotone_decay(d in 1usize..=4, m in 0.1f64..3.0, r1 in 0.01f64..5.0, dr in 0.0f64..5.0) {
            let p = green_function(d, m).unwrap();
            prop_assert!(p.radial(r1) >= p.radial(r1 + dr));
            prop_assert!(p.radial(r1) > 0.0 || p.radial(r1) == 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn pairing_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, c in 0.5f64..2.0) {
            // one dimension, checked against a direct 2-D quadrature
            let p = green_function(1, 1.0).unwrap();
            let f = TestFunction::new(vec![0.0], 1.0, 1.0).unwrap();
            let g = TestFunction::new(vec![c], 0.6, 1.0).unwrap();
            let h = TestFunction::new(vec![-0.4], 0.8, 1.0).unwrap();
            let s = QuadratureScheme::with_tolerance(1e-9);
            let k = Kernel::propagator_power(p, 1);
            let lhs = a * pair(&k, &f, &g, &s).unwrap() + b * pair(&k, &f, &h, &s).unwrap();
            let direct = integrate_box(
                &|q: &[f64]| {
                    f.eval(&q[..1]) * (a * g.eval(&q[1..]) + b * h.eval(&q[1..])) * p.radial((q[0] - q[1]).abs())
                },
                &[-1.0, -1.2],
                &[1.0, c + 0.6],
                &QuadratureScheme::with_tolerance(1e-8),
            ).unwrap();
            prop_assert!((lhs - direct).abs() < 1e-6 * (1.0 + direct.abs()));
        }
    }
}
