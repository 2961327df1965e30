//! Modified Bessel functions of the second kind for integer and half-integer
//! order, plus a few geometric constants.
//!
//! Integer orders start from `K_0`, `K_1` and recur upward. For `z <= 2` the
//! ascending series is used, above that the Steed/Temme continued fraction,
//! and for very large arguments the Hankel asymptotic expansion. Half-integer
//! orders are elementary.

use std::f64::consts::PI;

use statrs::function::gamma::gamma;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const SERIES_SWITCH: f64 = 2.0;
const ASYMPTOTIC_SWITCH: f64 = 25.0;
const EPS: f64 = 1e-16;
const MAX_ITER: usize = 10_000;

/// `(K_0(z), K_1(z))` for `z > 0`.
pub fn bessel_k01(z: f64) -> (f64, f64) {
    assert!(z > 0.0, "bessel_k01 requires a positive argument, got {z}");
    if z <= SERIES_SWITCH {
        k01_series(z)
    } else if z < ASYMPTOTIC_SWITCH {
        k01_continued_fraction(z)
    } else {
        (k_asymptotic(0.0, z), k_asymptotic(1.0, z))
    }
}

fn k01_series(z: f64) -> (f64, f64) {
    let q = 0.25 * z * z;
    let log_half = (0.5 * z).ln();

    // K0 = -(ln(z/2) + gamma) I0 + sum_{k>=1} q^k/(k!)^2 H_k
    let mut term = 1.0; // q^k / (k!)^2
    let mut i0 = 1.0;
    let mut harmonic = 0.0;
    let mut tail0 = 0.0;
    // K1 = 1/z + ln(z/2) I1 - (z/4) sum_{k>=0} [psi(k+1)+psi(k+2)] q^k/(k!(k+1)!)
    let mut term1 = 1.0; // q^k / (k!(k+1)!)
    let mut i1_sum = 1.0;
    let mut psi_sum = -2.0 * EULER_GAMMA + 1.0; // psi(1)+psi(2)
    let mut tail1 = psi_sum;
    for k in 1..MAX_ITER {
        let kf = k as f64;
        term *= q / (kf * kf);
        harmonic += 1.0 / kf;
        i0 += term;
        tail0 += term * harmonic;

        term1 *= q / (kf * (kf + 1.0));
        i1_sum += term1;
        psi_sum += 1.0 / kf + 1.0 / (kf + 1.0);
        tail1 += term1 * psi_sum;
        if term < EPS * i0 && term1 * psi_sum.abs() < EPS * tail1.abs() {
            break;
        }
    }
    let k0 = -(log_half + EULER_GAMMA) * i0 + tail0;
    let i1 = 0.5 * z * i1_sum;
    let k1 = 1.0 / z + log_half * i1 - 0.25 * z * tail1;
    (k0, k1)
}

/// Steed's method for the Temme continued fraction at order 0; yields K_0 and K_1.
fn k01_continued_fraction(x: f64) -> (f64, f64) {
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut h = d;
    let mut delh = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let a1 = 0.25;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 2..MAX_ITER {
        let fi = i as f64;
        a -= 2.0 * (fi - 1.0);
        c = -a * c / fi;
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh *= b * d - 1.0;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < EPS {
            break;
        }
    }
    h *= a1;
    let k0 = (PI / (2.0 * x)).sqrt() * (-x).exp() / s;
    let k1 = k0 * (x + 0.5 - h) / x;
    (k0, k1)
}

fn k_asymptotic(nu: f64, z: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..60 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        let next = term * (mu - odd * odd) / (kf * 8.0 * z);
        if next.abs() > term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < EPS * sum.abs() {
            break;
        }
    }
    (PI / (2.0 * z)).sqrt() * (-z).exp() * sum
}

/// `K_n(z)` for integer `n >= 0`.
pub fn bessel_k_int(n: u32, z: f64) -> f64 {
    let (k0, k1) = bessel_k01(z);
    match n {
        0 => k0,
        1 => k1,
        _ => {
            let (mut prev, mut cur) = (k0, k1);
            for j in 1..n {
                let next = prev + 2.0 * j as f64 / z * cur;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// `K_{n+1/2}(z)`, elementary closed form.
pub fn bessel_k_half(n: u32, z: f64) -> f64 {
    assert!(z > 0.0);
    let n = n as u64;
    let mut sum = 0.0;
    let mut coef = 1.0; // (n+j)! / (j! (n-j)!)
    let inv2z = 1.0 / (2.0 * z);
    let mut pow = 1.0;
    for j in 0..=n {
        if j > 0 {
            coef *= ((n + j) * (n - j + 1)) as f64 / j as f64;
            pow *= inv2z;
        }
        sum += coef * pow;
    }
    (PI / (2.0 * z)).sqrt() * (-z).exp() * sum
}

/// `K_nu(z)` with `nu = two_nu / 2`; `K_{-nu} = K_nu`.
pub fn bessel_k(two_nu: i32, z: f64) -> f64 {
    let two_nu = two_nu.unsigned_abs();
    if two_nu.is_multiple_of(2) {
        bessel_k_int(two_nu / 2, z)
    } else {
        bessel_k_half((two_nu - 1) / 2, z)
    }
}

/// Surface area of the unit sphere `S^{d-1}` in `R^d`.
pub fn unit_sphere_area(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    2.0 * PI.powf(h) / gamma(h)
}

/// `int_{S^{d-1}} x^a dsigma`; zero unless every exponent is even.
pub fn sphere_monomial_integral(exponents: &[u32]) -> f64 {
    if exponents.iter().any(|e| e % 2 == 1) {
        return 0.0;
    }
    let betas: Vec<f64> = exponents.iter().map(|&e| (e as f64 + 1.0) / 2.0).collect();
    let total: f64 = betas.iter().sum();
    2.0 * betas.iter().map(|&b| gamma(b)).product::<f64>() / gamma(total)
}

pub fn factorial(n: u32) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    // scipy.special.kv reference values
    const K_TABLE: &[(i32, f64, f64)] = &[
        (0, 1e-3, 7.023688800562382),
        (0, 0.1, 2.427069024702017),
        (0, 1.0, 0.42102443824070834),
        (0, 1.999, 0.11403383058923275),
        (0, 2.0, 0.11389387274953341),
        (0, 2.001, 0.11375409873668464),
        (0, 3.7, 0.015630659921626662),
        (0, 10.0, 1.778006231616765e-05),
        (0, 30.0, 2.1324774964630563e-14),
        (2, 1e-3, 999.9962381560855),
        (2, 0.5, 1.6564411200033007),
        (2, 2.0, 0.13986588181652246),
        (2, 2.001, 0.13968218830176757),
        (2, 10.0, 1.8648773453825585e-05),
        (2, 30.0, 2.167732001891549e-14),
        (4, 0.1, 199.5039646421141),
        (4, 1.0, 1.6248388986351774),
        (4, 3.7, 0.02515932754445005),
        (6, 0.5, 62.05790952993025),
        (6, 2.001, 0.6461619101356444),
        (6, 30.0, 2.4713310636589928e-14),
        (1, 0.1, 3.58616683879726),
        (1, 3.7, 0.016109033825487326),
        (3, 1.0, 0.9221370088957892),
        (5, 0.5, 20.425904466498487),
        (5, 10.0, 2.3931325864627893e-05),
    ];

    #[test]
    fn matches_reference_table() {
        for &(two_nu, z, expected) in K_TABLE {
            let got = bessel_k(two_nu, z);
            assert!(
                rel(got, expected) < 1e-10,
                "K_{}({z}) = {got}, expected {expected}",
                two_nu as f64 / 2.0
            );
        }
    }

    #[test]
    fn continuous_across_switchovers() {
        for &s in &[SERIES_SWITCH, ASYMPTOTIC_SWITCH] {
            let below = bessel_k01(s * (1.0 - 1e-12));
            let above = bessel_k01(s * (1.0 + 1e-12));
            assert!(rel(below.0, above.0) < 1e-10);
            assert!(rel(below.1, above.1) < 1e-10);
        }
    }

    #[test]
    fn wronskian_like_recurrence_identity() {
        // K_{n+1} - K_{n-1} = (2n/z) K_n
        for &z in &[0.3, 1.7, 4.2, 12.0] {
            let lhs = bessel_k_int(3, z) - bessel_k_int(1, z);
            let rhs = 4.0 / z * bessel_k_int(2, z);
            assert!(rel(lhs, rhs) < 1e-12);
        }
    }

    #[test]
    fn sphere_areas() {
        assert!((unit_sphere_area(1) - 2.0).abs() < 1e-14);
        assert!((unit_sphere_area(2) - 2.0 * PI).abs() < 1e-13);
        assert!((unit_sphere_area(3) - 4.0 * PI).abs() < 1e-13);
        assert!((sphere_monomial_integral(&[0, 0, 0]) - 4.0 * PI).abs() < 1e-13);
        // int x^2 over S^2 = 4 pi / 3
        assert!((sphere_monomial_integral(&[2, 0, 0]) - 4.0 * PI / 3.0).abs() < 1e-13);
        assert_eq!(sphere_monomial_integral(&[1, 0, 0]), 0.0);
    }
}
