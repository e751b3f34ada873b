//! Double-double running sums for the variance statistics.
//!
//! `W1/N - (W2/N)^2` cancels badly when the observed values are nearly
//! constant, so the sums and the final difference carry about 106 bits.

/// A sum stored as the unevaluated pair `hi + lo`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    hi: f64,
    lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Accumulator {
    pub const ZERO: Accumulator = Accumulator { hi: 0.0, lo: 0.0 };

    fn from_parts((hi, lo): (f64, f64)) -> Self {
        Accumulator { hi, lo }
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }

    fn add_pair(self, (bh, bl): (f64, f64)) -> Self {
        let (s, e) = two_sum(self.hi, bh);
        let (t, f) = two_sum(self.lo, bl);
        let (s, e) = quick_two_sum(s, e + t);
        Accumulator::from_parts(quick_two_sum(s, e + f))
    }

    /// Adds `a * b`, with the product formed exactly.
    pub fn add_product(self, a: f64, b: f64) -> Self {
        self.add_pair(two_prod(a, b))
    }

    pub fn add(self, v: f64) -> Self {
        self.add_pair((v, 0.0))
    }

    fn neg(self) -> Self {
        Accumulator {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    fn mul(self, other: Self) -> Self {
        let (p, e) = two_prod(self.hi, other.hi);
        let e = e + (self.hi * other.lo + self.lo * other.hi);
        Accumulator::from_parts(quick_two_sum(p, e))
    }

    fn div(self, b: f64) -> Self {
        let q1 = self.hi / b;
        let (p1, p2) = two_prod(q1, b);
        let (s, e) = two_sum(self.hi, -p1);
        let e = e - p2 + self.lo;
        let q2 = (s + e) / b;
        Accumulator::from_parts(quick_two_sum(q1, q2))
    }

    /// `w1/n - (w2/n)^2` in double-double, rounded once at the end.
    pub fn moment_difference(w1: Self, w2: Self, n: f64) -> f64 {
        let mean = w2.div(n);
        let second = w1.div(n);
        let square = mean.mul(mean).neg();
        second.add_pair((square.hi, square.lo)).value()
    }
}

impl From<f64> for Accumulator {
    fn from(v: f64) -> Self {
        Accumulator { hi: v, lo: 0.0 }
    }
}
