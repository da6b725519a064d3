//! Nested forward-mode dual numbers.
//!
//! A `Jet` with `k` levels is an element of `ℝ[ε₁, …, ε_k] / (ε₁², …, ε_k²)`,
//! which is exactly what `Dual<Dual<…<f64>>>` nested `k` times represents.
//! Coefficients are indexed by the bitmask of the infinitesimals present.
//! Operations on jets of different depth promote the shallower operand.

use std::ops::{Add, Mul, Neg, Sub};

#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    c: Vec<f64>,
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        Jet { c: vec![v] }
    }

    pub fn levels(&self) -> usize {
        self.c.len().trailing_zeros() as usize
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.c
    }

    /// `self + ε_{new} · tangent`, where `ε_{new}` is a fresh top-level infinitesimal.
    pub fn extend(&self, tangent: &Jet) -> Jet {
        let k = self.levels().max(tangent.levels());
        let lo = self.promoted(k);
        let hi = tangent.promoted(k);
        let mut c = lo;
        c.extend_from_slice(&hi);
        Jet { c }
    }

    /// Variable with a single infinitesimal direction: `value + ε₁ · seed`.
    pub fn seeded(value: f64, seed: f64) -> Jet {
        Jet { c: vec![value, seed] }
    }

    /// Coefficient of the top-level infinitesimal.
    pub fn top_derivative(&self) -> Jet {
        let half = self.c.len() / 2;
        if half == 0 {
            return Jet::constant(0.0);
        }
        Jet { c: self.c[half..].to_vec() }
    }

    /// Drops the top-level infinitesimal.
    pub fn top_value(&self) -> Jet {
        let half = (self.c.len() / 2).max(1);
        Jet { c: self.c[..half].to_vec() }
    }

    fn promoted(&self, levels: usize) -> Vec<f64> {
        let mut c = self.c.clone();
        c.resize(1 << levels, 0.0);
        c
    }

    pub fn scale(&self, s: f64) -> Jet {
        Jet { c: self.c.iter().map(|v| v * s).collect() }
    }

    pub fn add_scalar(&self, s: f64) -> Jet {
        let mut c = self.c.clone();
        c[0] += s;
        Jet { c }
    }
}

impl From<f64> for Jet {
    fn from(v: f64) -> Self {
        Jet::constant(v)
    }
}

fn zip_with(a: &Jet, b: &Jet, f: impl Fn(f64, f64) -> f64) -> Jet {
    let k = a.levels().max(b.levels());
    let n = 1usize << k;
    let c = (0..n)
        .map(|i| f(a.c.get(i).copied().unwrap_or(0.0), b.c.get(i).copied().unwrap_or(0.0)))
        .collect();
    Jet { c }
}

impl Add for &Jet {
    type Output = Jet;
    fn add(self, rhs: &Jet) -> Jet {
        zip_with(self, rhs, |x, y| x + y)
    }
}

impl Sub for &Jet {
    type Output = Jet;
    fn sub(self, rhs: &Jet) -> Jet {
        zip_with(self, rhs, |x, y| x - y)
    }
}

impl Mul for &Jet {
    type Output = Jet;
    fn mul(self, rhs: &Jet) -> Jet {
        let k = self.levels().max(rhs.levels());
        let n = 1usize << k;
        let a = &self.c;
        let b = &rhs.c;
        let mut c = vec![0.0; n];
        for (s, out) in c.iter_mut().enumerate() {
            // Sum over submasks t of s: a[t] * b[s \ t].
            let mut t = s;
            let mut acc = 0.0;
            loop {
                let u = s ^ t;
                if let (Some(x), Some(y)) = (a.get(t), b.get(u)) {
                    acc += x * y;
                }
                if t == 0 {
                    break;
                }
                t = (t - 1) & s;
            }
            *out = acc;
        }
        Jet { c }
    }
}

impl Neg for &Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

macro_rules! forward_owned {
    ($tr:ident, $m:ident) => {
        impl $tr for Jet {
            type Output = Jet;
            fn $m(self, rhs: Jet) -> Jet {
                (&self).$m(&rhs)
            }
        }
        impl $tr<&Jet> for Jet {
            type Output = Jet;
            fn $m(self, rhs: &Jet) -> Jet {
                (&self).$m(rhs)
            }
        }
        impl $tr<Jet> for &Jet {
            type Output = Jet;
            fn $m(self, rhs: Jet) -> Jet {
                self.$m(&rhs)
            }
        }
    };
}
forward_owned!(Add, add);
forward_owned!(Sub, sub);
forward_owned!(Mul, mul);

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_derivative_of_cube() {
        // d/dx x^3 at 2 = 12
        let x = Jet::seeded(2.0, 1.0);
        let y = &(&x * &x) * &x;
        assert_eq!(y.value(), 8.0);
        assert_eq!(y.top_derivative().value(), 12.0);
    }

    #[test]
    fn nested_second_derivative() {
        // f(x) = x^3, f''(2) = 12: differentiate f' along direction 1 again.
        let x = Jet::seeded(2.0, 1.0);
        let xx = x.extend(&Jet::constant(1.0));
        let y = &(&xx * &xx) * &xx;
        // coefficient of ε1 ε2 is f''(x)
        assert_eq!(y.coeffs()[3], 12.0);
        assert_eq!(y.top_derivative().top_derivative().value(), 12.0);
    }

    #[test]
    fn constants_promote() {
        let x = Jet::seeded(3.0, 1.0);
        let y = &x + &Jet::constant(1.0);
        assert_eq!(y.coeffs(), &[4.0, 1.0]);
        let z = &Jet::constant(2.0) * &x;
        assert_eq!(z.coeffs(), &[6.0, 2.0]);
    }
}
