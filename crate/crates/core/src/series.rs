//! Truncated formal power series in `hbar`.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use num_traits::Zero;

/// `sum_{k <= order} c_k hbar^k`; coefficients above `order` are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct FormalSeries<T> {
    pub order: u32,
    coefficients: BTreeMap<u32, T>,
}

impl<T> FormalSeries<T>
where
    T: Clone + Zero,
{
    pub fn zero(order: u32) -> Self {
        FormalSeries {
            order,
            coefficients: BTreeMap::new(),
        }
    }

    /// Embeds `c` as the `hbar^0` component.
    pub fn constant(c: T, order: u32) -> Self {
        let mut s = Self::zero(order);
        s.set(0, c);
        s
    }

    pub fn monomial(k: u32, c: T, order: u32) -> Self {
        let mut s = Self::zero(order);
        s.set(k, c);
        s
    }

    pub fn from_coefficients(coefficients: Vec<T>, order: u32) -> Self {
        let mut s = Self::zero(order);
        for (k, c) in coefficients.into_iter().enumerate() {
            s.set(k as u32, c);
        }
        s
    }

    pub fn set(&mut self, k: u32, c: T) {
        if k > self.order {
            return;
        }
        if c.is_zero() {
            self.coefficients.remove(&k);
        } else {
            self.coefficients.insert(k, c);
        }
    }

    pub fn add_to(&mut self, k: u32, c: T) {
        if k > self.order {
            return;
        }
        let cur = self.coefficient(k);
        self.set(k, cur + c);
    }

    pub fn coefficient(&self, k: u32) -> T {
        self.coefficients.get(&k).cloned().unwrap_or_else(T::zero)
    }

    /// Coefficients `c_0, ..., c_order` including zeros.
    pub fn coefficients(&self) -> Vec<T> {
        (0..=self.order).map(|k| self.coefficient(k)).collect()
    }

    pub fn truncate(&self, order: u32) -> Self {
        let mut s = Self::zero(order.min(self.order));
        for (&k, c) in &self.coefficients {
            s.set(k, c.clone());
        }
        s
    }

    pub fn map<U: Clone + Zero, F: Fn(&T) -> U>(&self, f: F) -> FormalSeries<U> {
        let mut s = FormalSeries::zero(self.order);
        for (&k, c) in &self.coefficients {
            s.set(k, f(c));
        }
        s
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients.is_empty()
    }
}

impl<T: Clone + Zero + Add<Output = T>> Add for FormalSeries<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let mut out = FormalSeries::zero(self.order.min(rhs.order));
        for (&k, c) in self.coefficients.iter().chain(rhs.coefficients.iter()) {
            out.add_to(k, c.clone());
        }
        out
    }
}

impl<T: Clone + Zero + Neg<Output = T>> Neg for FormalSeries<T> {
    type Output = Self;
    fn neg(self) -> Self {
        self.map(|c| -c.clone())
    }
}

impl<T: Clone + Zero + Add<Output = T> + Neg<Output = T>> Sub for FormalSeries<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self + (-rhs)
    }
}

/// Cauchy product.
impl<T: Clone + Zero + Mul<Output = T>> Mul for FormalSeries<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let order = self.order.min(rhs.order);
        let mut out = FormalSeries::zero(order);
        for (&i, a) in &self.coefficients {
            for (&j, b) in &rhs.coefficients {
                if i + j <= order {
                    out.add_to(i + j, a.clone() * b.clone());
                }
            }
        }
        out
    }
}

impl FormalSeries<f64> {
    /// Largest coefficient-wise absolute difference.
    pub fn max_abs_diff(&self, other: &FormalSeries<f64>) -> f64 {
        (0..=self.order.max(other.order))
            .map(|k| (self.coefficient(k) - other.coefficient(k)).abs())
            .fold(0.0, f64::max)
    }

    /// Largest coefficient-wise difference relative to `max(|a_k|, |b_k|, floor)`.
    pub fn max_rel_diff(&self, other: &FormalSeries<f64>, floor: f64) -> f64 {
        (0..=self.order.max(other.order))
            .map(|k| {
                let (a, b) = (self.coefficient(k), other.coefficient(k));
                (a - b).abs() / a.abs().max(b.abs()).max(floor)
            })
            .fold(0.0, f64::max)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }
}

impl<T: Clone + Zero + fmt::Display> fmt::Display for FormalSeries<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.coefficients.is_empty() {
            return write!(f, "0");
        }
        for (i, (k, c)) in self.coefficients.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            match k {
                0 => write!(f, "{c}")?,
                1 => write!(f, "({c}) hbar")?,
                _ => write!(f, "({c}) hbar^{k}")?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Rational64;
    use proptest::prelude::*;

    fn r(n: i64, d: i64) -> Rational64 {
        Rational64::new(n, d)
    }

    #[test]
    fn exponential_identity() {
        // e^{a hbar} e^{-a hbar} = 1 through the truncation order
        let order = 6;
        let exp = |a: i64| {
            let mut s = FormalSeries::zero(order);
            let mut fact = 1i64;
            for k in 0..=order {
                if k > 0 {
                    fact *= k as i64;
                }
                s.set(k, r(a.pow(k), fact));
            }
            s
        };
        let prod = exp(3) * exp(-3);
        assert_eq!(prod, FormalSeries::constant(r(1, 1), order));
    }

    #[test]
    fn truncation_and_display() {
        let s = FormalSeries::from_coefficients(vec![1.0, 0.0, 2.0, 5.0], 2);
        assert_eq!(s.coefficient(3), 0.0);
        assert_eq!(s.to_string(), "1 + (2) hbar^2");
        assert_eq!(s.truncate(1).coefficients(), vec![1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn cauchy_product_is_commutative_and_associative(
            a in proptest::collection::vec(-5i64..5, 4),
            b in proptest::collection::vec(-5i64..5, 4),
            c in proptest::collection::vec(-5i64..5, 4),
        ) {
            let mk = |v: &Vec<i64>| FormalSeries::from_coefficients(v.iter().map(|&x| r(x, 1)).collect(), 3);
            let (x, y, z) = (mk(&a), mk(&b), mk(&c));
            prop_assert_eq!(x.clone() * y.clone(), y.clone() * x.clone());
            prop_assert_eq!((x.clone() * y.clone()) * z.clone(), x.clone() * (y.clone() * z.clone()));
            prop_assert_eq!(x.clone() * (y.clone() + z.clone()), x.clone() * y.clone() + x * z);
        }
    }
}
