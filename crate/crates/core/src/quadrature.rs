//! Numerical integration: globally adaptive Gauss-Kronrod (7/15) in one
//! dimension, a power substitution for integrable endpoint singularities,
//! iterated integration over boxes, and fixed product rules on spheres and
//! balls for smooth integrands.

use std::cell::Cell;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use crate::error::{EgError, Result};

/// Tolerances and limits shared by every integrator in the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureScheme {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Maximum bisection depth of a single subinterval.
    pub max_depth: u32,
    /// Exponent `p` of the substitution `r = u^p` applied at singular endpoints.
    pub radial_exponent: f64,
}

impl Default for QuadratureScheme {
    fn default() -> Self {
        QuadratureScheme {
            rel_tol: 1e-10,
            abs_tol: 1e-14,
            max_depth: 30,
            radial_exponent: 2.0,
        }
    }
}

impl QuadratureScheme {
    pub fn with_tolerance(rel_tol: f64) -> Self {
        QuadratureScheme {
            rel_tol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(EgError::PreconditionViolated(
                "quadrature tolerances must be positive".into(),
            ));
        }
        if self.max_depth == 0 || self.max_depth > 60 {
            return Err(EgError::PreconditionViolated(
                "quadrature depth must lie in 1..=60".into(),
            ));
        }
        if self.radial_exponent < 1.0 {
            return Err(EgError::PreconditionViolated(
                "radial substitution exponent must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Scheme for an inner integral of a nested integration.
    pub fn inner(&self) -> Self {
        QuadratureScheme {
            rel_tol: self.rel_tol * 0.1,
            abs_tol: self.abs_tol * 0.1,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
    pub converged: bool,
}

impl Estimate {
    pub fn into_result(self, what: &str) -> Result<f64> {
        if self.converged && self.value.is_finite() {
            Ok(self.value)
        } else {
            Err(EgError::QuadratureFailure(format!(
                "{what}: value {:e} with error estimate {:e}",
                self.value, self.error
            )))
        }
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
    depth: u32,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    let mut fv1 = [0.0; 7];
    let mut fv2 = [0.0; 7];
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv1[j] = f1;
        fv2[j] = f2;
        kronrod += WGK[j] * (f1 + f2);
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = kronrod * 0.5;
    let mut asc = WGK[7] * (fc - mean).abs();
    for j in 0..7 {
        asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let value = kronrod * half;
    let resasc = asc * half.abs();
    let mut err = ((kronrod - gauss) * half).abs();
    if resasc != 0.0 && err != 0.0 {
        err = resasc * (200.0 * err / resasc).powf(1.5).min(1.0);
    }
    (value, err)
}

/// Globally adaptive integration; never fails, reports convergence instead.
pub fn integrate_lenient<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    scheme: &QuadratureScheme,
) -> Estimate {
    if a == b {
        return Estimate {
            value: 0.0,
            error: 0.0,
            evaluations: 0,
            converged: true,
        };
    }
    let max_segments = 4 * 1024;
    let (v, e) = gk15(&mut f, a, b);
    let mut evaluations = 15;
    let mut heap = BinaryHeap::new();
    heap.push(Segment {
        a,
        b,
        value: v,
        error: e,
        depth: 0,
    });
    let mut total = v;
    let mut total_err = e;
    let mut frozen_value = 0.0;
    let mut frozen_err = 0.0;
    let mut converged = false;
    loop {
        let target = scheme.abs_tol.max(scheme.rel_tol * total.abs());
        if total_err <= target {
            converged = true;
            break;
        }
        let Some(seg) = heap.pop() else {
            break;
        };
        if seg.depth >= scheme.max_depth || heap.len() >= max_segments {
            // cannot refine further; freeze it and keep refining the rest
            frozen_value += seg.value;
            frozen_err += seg.error;
            if heap.is_empty() || heap.len() >= max_segments {
                total = frozen_value + heap.iter().map(|s| s.value).sum::<f64>();
                total_err = frozen_err + heap.iter().map(|s| s.error).sum::<f64>();
                converged = total_err <= scheme.abs_tol.max(scheme.rel_tol * total.abs());
                return Estimate {
                    value: total,
                    error: total_err,
                    evaluations,
                    converged,
                };
            }
            continue;
        }
        let mid = 0.5 * (seg.a + seg.b);
        let (v1, e1) = gk15(&mut f, seg.a, mid);
        let (v2, e2) = gk15(&mut f, mid, seg.b);
        evaluations += 30;
        total += v1 + v2 - seg.value;
        total_err += e1 + e2 - seg.error;
        heap.push(Segment {
            a: seg.a,
            b: mid,
            value: v1,
            error: e1,
            depth: seg.depth + 1,
        });
        heap.push(Segment {
            a: mid,
            b: seg.b,
            value: v2,
            error: e2,
            depth: seg.depth + 1,
        });
        if heap.len() % 64 == 0 {
            // resum to keep drift from incremental updates bounded
            total = frozen_value + heap.iter().map(|s| s.value).sum::<f64>();
            total_err = frozen_err + heap.iter().map(|s| s.error).sum::<f64>();
        }
    }
    // final deterministic resummation in interval order
    let mut segs: Vec<Segment> = heap.into_vec();
    segs.sort_by(|x, y| x.a.total_cmp(&y.a));
    let value = frozen_value + segs.iter().map(|s| s.value).sum::<f64>();
    let error = frozen_err + segs.iter().map(|s| s.error).sum::<f64>();
    Estimate {
        value,
        error,
        evaluations,
        converged: converged || error <= scheme.abs_tol.max(scheme.rel_tol * value.abs()),
    }
}

pub fn integrate<F: FnMut(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    scheme: &QuadratureScheme,
) -> Result<f64> {
    integrate_lenient(f, a, b, scheme).into_result("adaptive integral")
}

/// Integrates over `[a, b]` with the substitution `x = a + (b-a) t^p`, which
/// removes integrable power or logarithmic singularities at `a`.
pub fn integrate_singular_left<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    scheme: &QuadratureScheme,
) -> Estimate {
    let p = scheme.radial_exponent;
    let len = b - a;
    integrate_lenient(
        |t: f64| {
            if t <= 0.0 {
                return 0.0;
            }
            let tp1 = t.powf(p - 1.0);
            f(a + len * tp1 * t) * len * p * tp1
        },
        0.0,
        1.0,
        scheme,
    )
}

/// Singularities at both ends: split at the midpoint and substitute on each half.
pub fn integrate_singular_both<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    scheme: &QuadratureScheme,
) -> Estimate {
    let mid = 0.5 * (a + b);
    let left = integrate_singular_left(&mut f, a, mid, scheme);
    let right = integrate_singular_left(|x| f(a + b - x), a, mid, scheme);
    Estimate {
        value: left.value + right.value,
        error: left.error + right.error,
        evaluations: left.evaluations + right.evaluations,
        converged: left.converged && right.converged,
    }
}

/// Tracks failures of inner integrals inside nested integrands.
#[derive(Default)]
pub struct FailureFlag {
    failed: Cell<bool>,
    worst: Cell<f64>,
}

impl FailureFlag {
    pub fn record(&self, est: &Estimate) -> f64 {
        if !est.converged || !est.value.is_finite() {
            self.failed.set(true);
            self.worst.set(self.worst.get().max(est.error));
        }
        est.value
    }

    pub fn failed(&self) -> bool {
        self.failed.get()
    }

    pub fn check(&self, what: &str) -> Result<()> {
        if self.failed() {
            Err(EgError::QuadratureFailure(format!(
                "{what}: inner integral did not converge (error estimate {:e})",
                self.worst.get()
            )))
        } else {
            Ok(())
        }
    }
}

/// Iterated adaptive integration over the box `lo..hi` (one nested 1-D
/// integral per axis).
pub fn integrate_box<F: Fn(&[f64]) -> f64>(
    f: &F,
    lo: &[f64],
    hi: &[f64],
    scheme: &QuadratureScheme,
) -> Result<f64> {
    assert_eq!(lo.len(), hi.len());
    let flag = FailureFlag::default();
    let est = box_level(f, lo, hi, scheme, &[], &flag);
    flag.check("box integral")?;
    est.into_result("box integral")
}

fn box_level<F: Fn(&[f64]) -> f64>(
    f: &F,
    lo: &[f64],
    hi: &[f64],
    scheme: &QuadratureScheme,
    prefix: &[f64],
    flag: &FailureFlag,
) -> Estimate {
    let axis = prefix.len();
    let last = axis + 1 == lo.len();
    let inner = scheme.inner();
    let mut buf = prefix.to_vec();
    buf.push(0.0);
    integrate_lenient(
        |x| {
            buf[axis] = x;
            if last {
                f(&buf)
            } else {
                let e = box_level(f, lo, hi, &inner, &buf, flag);
                flag.record(&e)
            }
        },
        lo[axis],
        hi[axis],
        scheme,
    )
}

/// Iterated adaptive integration over the ball `B(center, radius)`; each axis
/// runs over the chord left by the previous coordinates.
pub fn integrate_ball<F: Fn(&[f64]) -> f64>(
    f: &F,
    center: &[f64],
    radius: f64,
    scheme: &QuadratureScheme,
) -> Result<f64> {
    let flag = FailureFlag::default();
    let est = ball_level(f, center, radius * radius, scheme, &[], &flag);
    flag.check("ball integral")?;
    est.into_result("ball integral")
}

fn ball_level<F: Fn(&[f64]) -> f64>(
    f: &F,
    center: &[f64],
    rem2: f64,
    scheme: &QuadratureScheme,
    prefix: &[f64],
    flag: &FailureFlag,
) -> Estimate {
    let axis = prefix.len();
    let last = axis + 1 == center.len();
    let half = rem2.max(0.0).sqrt();
    let inner = scheme.inner();
    let mut buf = prefix.to_vec();
    buf.push(0.0);
    let c = center[axis];
    integrate_lenient(
        |x| {
            buf[axis] = x;
            if last {
                f(&buf)
            } else {
                let e = ball_level(f, center, rem2 - (x - c) * (x - c), &inner, &buf, flag);
                flag.record(&e)
            }
        },
        c - half,
        c + half,
        scheme,
    )
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
                p1 = x;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            dp = 1.0;
            x = 0.0;
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Fixed Gauss-Legendre rule mapped to `[a, b]`.
pub fn gauss_legendre_interval(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    x.iter()
        .zip(&w)
        .map(|(&xi, &wi)| (mid + half * xi, wi * half))
        .collect()
}

/// Product rule for the unit sphere `S^{d-1}`: unit directions with weights
/// summing to the sphere area.
#[derive(Debug, Clone)]
pub struct SphereRule {
    pub dim: usize,
    pub directions: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl SphereRule {
    /// `n_polar` Gauss nodes per polar angle, `2 n_polar` trapezoid nodes in azimuth.
    pub fn new(dim: usize, n_polar: usize) -> Self {
        assert!(dim >= 1);
        let (directions, weights) = sphere_nodes(dim, n_polar.max(1));
        SphereRule {
            dim,
            directions,
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn sphere_nodes(dim: usize, n_polar: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    match dim {
        1 => (vec![vec![-1.0], vec![1.0]], vec![1.0, 1.0]),
        2 => {
            let n = 2 * n_polar;
            let w = 2.0 * PI / n as f64;
            let dirs = (0..n)
                .map(|k| {
                    let t = 2.0 * PI * (k as f64 + 0.5) / n as f64;
                    vec![t.cos(), t.sin()]
                })
                .collect();
            (dirs, vec![w; n])
        }
        _ => {
            // first coordinate cos(theta), measure sin^{d-2}(theta) dtheta, recurse on S^{d-2}.
            // Odd d: Gauss in t = cos(theta), where the weight (1-t^2)^{(d-3)/2} is polynomial.
            // Even d: midpoint rule in theta, exact for the trigonometric polynomials that arise.
            let (sub_dirs, sub_w) = sphere_nodes(dim - 1, n_polar);
            let polar: Vec<(f64, f64, f64)> = if dim % 2 == 1 {
                gauss_legendre_interval(n_polar + dim / 2, -1.0, 1.0)
                    .into_iter()
                    .map(|(t, w)| {
                        let s = (1.0 - t * t).max(0.0).sqrt();
                        (t, s, w * (1.0 - t * t).powi((dim as i32 - 3) / 2))
                    })
                    .collect()
            } else {
                let n = 2 * n_polar + dim;
                let h = PI / n as f64;
                (0..n)
                    .map(|k| {
                        let (s, c) = ((k as f64 + 0.5) * h).sin_cos();
                        (c, s, h * s.powi(dim as i32 - 2))
                    })
                    .collect()
            };
            let mut dirs = Vec::with_capacity(polar.len() * sub_dirs.len());
            let mut weights = Vec::with_capacity(polar.len() * sub_dirs.len());
            for &(c, s, wt) in &polar {
                for (sd, &sw) in sub_dirs.iter().zip(&sub_w) {
                    let mut v = Vec::with_capacity(dim);
                    v.push(c);
                    v.extend(sd.iter().map(|x| x * s));
                    dirs.push(v);
                    weights.push(wt * sw);
                }
            }
            (dirs, weights)
        }
    }
}

/// Fixed product rule over a ball: Gauss-Legendre in the radius (after the
/// substitution `r = R (1 - (1-t)^2)`, which concentrates nodes where the
/// bump profile flattens) times a [`SphereRule`].
#[derive(Debug, Clone)]
pub struct BallRule {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// Resolution of a [`BallRule`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallResolution {
    pub n_radial: usize,
    pub n_polar: usize,
}

impl Default for BallResolution {
    fn default() -> Self {
        BallResolution {
            n_radial: 24,
            n_polar: 10,
        }
    }
}

impl BallRule {
    pub fn new(center: &[f64], radius: f64, res: BallResolution) -> Self {
        let dim = center.len();
        let sphere = SphereRule::new(dim, res.n_polar);
        let radial = gauss_legendre_interval(res.n_radial, 0.0, 1.0);
        let mut points = Vec::with_capacity(radial.len() * sphere.len());
        let mut weights = Vec::with_capacity(radial.len() * sphere.len());
        for &(t, wt) in &radial {
            let r = radius * t * (2.0 - t);
            let dr = radius * 2.0 * (1.0 - t);
            let jac = wt * dr * r.powi(dim as i32 - 1);
            for (dir, &sw) in sphere.directions.iter().zip(&sphere.weights) {
                points.push(center.iter().zip(dir).map(|(c, u)| c + r * u).collect());
                weights.push(jac * sw);
            }
        }
        BallRule { points, weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}
