//! Correctly rounded floating-point summation (Shewchuk's partials
//! algorithm). The result depends only on the multiset of addends, so sums
//! are bit-identical under any ordering or parallel split.

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        ExactSum::default()
    }

    /// Adds one finite value; non-overlapping partials hold the exact running sum.
    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn merge(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
    }

    /// The exact sum rounded to nearest, ties to even.
    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Correctly rounded sum of a slice.
pub fn exact_sum(values: &[f64]) -> f64 {
    values.iter().copied().collect::<ExactSum>().value()
}

/// Elementwise exact accumulator for gradient vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactVecSum {
    parts: Vec<ExactSum>,
}

impl ExactVecSum {
    pub fn zeros(len: usize) -> Self {
        ExactVecSum {
            parts: vec![ExactSum::new(); len],
        }
    }

    pub fn add(&mut self, v: &[f64]) {
        for (s, &x) in self.parts.iter_mut().zip(v) {
            if x != 0.0 {
                s.add(x);
            }
        }
    }

    pub fn merge(&mut self, other: &ExactVecSum) {
        for (s, o) in self.parts.iter_mut().zip(&other.parts) {
            s.merge(o);
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.parts.iter().map(ExactSum::value).collect()
    }
}
