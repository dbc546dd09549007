//! Second-order forward-mode numbers in the two invariants `(I1, I3)`.
//!
//! Every energy family is written once against [`Jet`]; value, gradient and
//! Hessian then come out of the same expression.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub d: [f64; 2],
    /// Hessian `[h11, h13, h33]`.
    pub h: [f64; 3],
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        Jet { v, d: [0.0; 2], h: [0.0; 3] }
    }

    /// Independent variable number `k` (0 for I1, 1 for I3).
    pub fn var(v: f64, k: usize) -> Self {
        let mut d = [0.0; 2];
        d[k] = 1.0;
        Jet { v, d, h: [0.0; 3] }
    }

    /// Apply a scalar function given its value and first two derivatives at `self.v`.
    pub fn chain(self, f: f64, df: f64, d2f: f64) -> Self {
        let [a, b] = self.d;
        Jet {
            v: f,
            d: [df * a, df * b],
            h: [
                df * self.h[0] + d2f * a * a,
                df * self.h[1] + d2f * a * b,
                df * self.h[2] + d2f * b * b,
            ],
        }
    }

    pub fn powf(self, p: f64) -> Self {
        let x = self.v;
        if p == 0.0 {
            return Jet::constant(1.0);
        }
        let f = x.powf(p);
        let df = p * x.powf(p - 1.0);
        let d2f = p * (p - 1.0) * x.powf(p - 2.0);
        self.chain(f, df, d2f)
    }

    pub fn powi(self, n: i32) -> Self {
        match n {
            0 => Jet::constant(1.0),
            1 => self,
            _ => {
                let x = self.v;
                let f = x.powi(n);
                let df = n as f64 * x.powi(n - 1);
                let d2f = (n * (n - 1)) as f64 * x.powi(n - 2);
                self.chain(f, df, d2f)
            }
        }
    }

    pub fn ln(self) -> Self {
        let x = self.v;
        self.chain(x.ln(), 1.0 / x, -1.0 / (x * x))
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }

    pub fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.v))
    }

    pub fn scale(self, c: f64) -> Self {
        Jet {
            v: self.v * c,
            d: [self.d[0] * c, self.d[1] * c],
            h: [self.h[0] * c, self.h[1] * c, self.h[2] * c],
        }
    }

    pub fn hessian(&self) -> [[f64; 2]; 2] {
        [[self.h[0], self.h[1]], [self.h[1], self.h[2]]]
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1]],
            h: [self.h[0] + o.h[0], self.h[1] + o.h[1], self.h[2] + o.h[2]],
        }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self + (-o)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        let (a, b) = (self, o);
        Jet {
            v: a.v * b.v,
            d: [a.d[0] * b.v + a.v * b.d[0], a.d[1] * b.v + a.v * b.d[1]],
            h: [
                a.h[0] * b.v + 2.0 * a.d[0] * b.d[0] + a.v * b.h[0],
                a.h[1] * b.v + a.d[0] * b.d[1] + a.d[1] * b.d[0] + a.v * b.h[1],
                a.h[2] * b.v + 2.0 * a.d[1] * b.d[1] + a.v * b.h[2],
            ],
        }
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, o: Jet) -> Jet {
        let x = o.v;
        self * o.chain(1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x))
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(mut self, c: f64) -> Jet {
        self.v += c;
        self
    }
}

impl Sub<f64> for Jet {
    type Output = Jet;
    fn sub(mut self, c: f64) -> Jet {
        self.v -= c;
        self
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, c: f64) -> Jet {
        self.scale(c)
    }
}
