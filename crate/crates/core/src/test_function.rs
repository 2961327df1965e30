//! Compactly supported bump test functions and the plateau cutoff used by
//! extensions.

use crate::error::{EgError, Result};
use crate::expr::Expr;
use crate::quadrature::{integrate, QuadratureScheme};
use crate::special::unit_sphere_area;

/// `A exp(-1/(1 - |x-c|^2/r^2))` inside `B(c, r)`, zero outside.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub center: Vec<f64>,
    pub radius: f64,
    pub amplitude: f64,
}

/// Radial bump profile `exp(-1/(1-s))` with `s = rho^2/r^2`, plus its first two
/// derivatives in `s`.
fn profile(s: f64) -> (f64, f64, f64) {
    if s >= 1.0 - 1.0 / 700.0 {
        return (0.0, 0.0, 0.0);
    }
    let q = 1.0 / (1.0 - s);
    let g = (-q).exp();
    let g1 = -g * q * q;
    let g2 = g * (q.powi(4) - 2.0 * q.powi(3));
    (g, g1, g2)
}

impl TestFunction {
    pub fn new(center: Vec<f64>, radius: f64, amplitude: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(EgError::PreconditionViolated(
                "test function needs dimension >= 1".into(),
            ));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(EgError::PreconditionViolated(format!(
                "bump radius must be positive, got {radius}"
            )));
        }
        if !amplitude.is_finite() || center.iter().any(|c| !c.is_finite()) {
            return Err(EgError::PreconditionViolated(
                "bump parameters must be finite".into(),
            ));
        }
        Ok(TestFunction {
            center,
            radius,
            amplitude,
        })
    }

    /// Unit-amplitude bump centred at the origin.
    pub fn centered(dim: usize, radius: f64) -> Self {
        TestFunction {
            center: vec![0.0; dim],
            radius,
            amplitude: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    fn s_of(&self, x: &[f64]) -> f64 {
        dist2(x, &self.center) / (self.radius * self.radius)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.amplitude * profile(self.s_of(x)).0
    }

    /// Value as a function of the distance from the centre.
    pub fn radial(&self, rho: f64) -> f64 {
        self.amplitude * profile(rho * rho / (self.radius * self.radius)).0
    }

    /// Closed-form Laplacian.
    pub fn laplacian(&self, x: &[f64]) -> f64 {
        let r2 = self.radius * self.radius;
        let rho2 = dist2(x, &self.center);
        let (_, g1, g2) = profile(rho2 / r2);
        let d = self.dim() as f64;
        self.amplitude * (g2 * 4.0 * rho2 / (r2 * r2) + g1 * 2.0 * d / r2)
    }

    /// Laplacian as a function of the distance from the centre.
    pub fn radial_laplacian(&self, rho: f64) -> f64 {
        let r2 = self.radius * self.radius;
        let rho2 = rho * rho;
        let (_, g1, g2) = profile(rho2 / r2);
        let d = self.dim() as f64;
        self.amplitude * (g2 * 4.0 * rho2 / (r2 * r2) + g1 * 2.0 * d / r2)
    }

    pub fn as_expr(&self) -> Expr {
        Expr::bump(&self.center, self.radius, self.amplitude)
    }

    /// `phi^lambda(x) = lambda^{-d} phi(x/lambda)`.
    pub fn scaled(&self, lambda: f64) -> TestFunction {
        TestFunction {
            center: self.center.iter().map(|c| c * lambda).collect(),
            radius: self.radius * lambda,
            amplitude: self.amplitude * lambda.powi(-(self.dim() as i32)),
        }
    }

    pub fn scale_amplitude(&self, k: f64) -> TestFunction {
        TestFunction {
            amplitude: self.amplitude * k,
            ..self.clone()
        }
    }

    /// `int f` by one-dimensional radial quadrature.
    pub fn integral(&self, scheme: &QuadratureScheme) -> Result<f64> {
        let d = self.dim() as i32;
        let v = integrate(
            |rho| rho.powi(d - 1) * self.radial(rho),
            0.0,
            self.radius,
            scheme,
        )?;
        Ok(v * unit_sphere_area(self.dim()))
    }

    /// Closed balls intersect.
    pub fn overlaps(&self, other: &TestFunction) -> bool {
        dist2(&self.center, &other.center).sqrt() < self.radius + other.radius
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.s_of(x) < 1.0
    }
}

/// Smooth radial step: `1` on `|x| <= inner`, `0` on `|x| >= outer`.
///
/// Built from the same `exp(-1/t)` profile as the bump; unlike the bump it is
/// identically one on a neighbourhood of the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cutoff {
    pub inner: f64,
    pub outer: f64,
}

impl Cutoff {
    /// Plateau on `|x| <= r/2`, support in `|x| < r`.
    pub fn with_radius(r: f64) -> Result<Self> {
        Cutoff::new(0.5 * r, r)
    }

    pub fn new(inner: f64, outer: f64) -> Result<Self> {
        if !(inner > 0.0 && outer > inner && outer.is_finite()) {
            return Err(EgError::PreconditionViolated(format!(
                "cutoff needs 0 < inner < outer, got inner={inner}, outer={outer}"
            )));
        }
        Ok(Cutoff { inner, outer })
    }

    pub fn eval(&self, rho: f64) -> f64 {
        if rho <= self.inner {
            1.0
        } else if rho >= self.outer {
            0.0
        } else {
            let t = (rho - self.inner) / (self.outer - self.inner);
            let a = smooth_exp(1.0 - t);
            let b = smooth_exp(t);
            a / (a + b)
        }
    }
}

fn smooth_exp(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        (-1.0 / t).exp()
    }
}

pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
