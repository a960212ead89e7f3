//! Polynomial bases, link functions and Gaussian tail integrals.
//!
//! Hermite polynomials follow the probabilists' convention `He_j`, which is
//! orthogonal under the standard normal weight with `∫ φ He_j He_k = j! 1{j=k}`.
//! The sieve densities divide by `√j!`, so the normalized family
//! `He_j / √j!` is orthonormal and the `1 + Σ ω²` denominator integrates the
//! squared polynomial to one. The physicists' convention would not.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

use thiserror::Error;

/// Highest Chebyshev degree used by the partially linear index functions.
pub const CHEBYSHEV_CAP: usize = 3;
/// Highest total Hermite degree of the sieve shape polynomials.
pub const HERMITE_CAP: usize = 4;
/// Highest Hermite degree evaluated anywhere (products of two degree-4 factors).
pub const HERMITE_MAX_DEGREE: usize = 8;

/// `ln √(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("argument {value} outside the open unit interval")]
    OutsideUnitInterval { value: f64 },
    #[error("degree {degree} exceeds cap {cap}")]
    DegreeAboveCap { degree: usize, cap: usize },
}

/// Total-degree cap of a bivariate tensor index set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolyDegreeCap {
    pub max_total_degree: usize,
}

impl PolyDegreeCap {
    pub const CHEBYSHEV: PolyDegreeCap = PolyDegreeCap {
        max_total_degree: CHEBYSHEV_CAP,
    };
    pub const HERMITE: PolyDegreeCap = PolyDegreeCap {
        max_total_degree: HERMITE_CAP,
    };

    /// All `(j, k)` with `j + k <= cap`, ordered by total degree and then by
    /// descending `j`: `(0,0), (1,0), (0,1), (2,0), (1,1), (0,2), ...`.
    pub fn index_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for total in 0..=self.max_total_degree {
            for j in (0..=total).rev() {
                out.push((j, total - j));
            }
        }
        out
    }

    /// Same as [`index_pairs`](Self::index_pairs) without the constant `(0,0)`.
    pub fn index_pairs_nonconstant(&self) -> Vec<(usize, usize)> {
        self.index_pairs().into_iter().skip(1).collect()
    }

    pub fn len(&self) -> usize {
        (self.max_total_degree + 1) * (self.max_total_degree + 2) / 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Chebyshev polynomial of the first kind mapped to `(0, 1)`: `T_j(2u - 1)`.
pub fn chebyshev_shifted(j: usize, u: f64) -> Result<f64, BasisError> {
    if j > CHEBYSHEV_CAP {
        return Err(BasisError::DegreeAboveCap {
            degree: j,
            cap: CHEBYSHEV_CAP,
        });
    }
    if !(u > 0.0 && u < 1.0) {
        return Err(BasisError::OutsideUnitInterval { value: u });
    }
    Ok(chebyshev_shifted_all(u)[j])
}

/// `T_0 .. T_3` on `(0,1)` without domain checks.
#[inline]
pub fn chebyshev_shifted_all(u: f64) -> [f64; CHEBYSHEV_CAP + 1] {
    let s = 2.0 * u - 1.0;
    let t2 = 2.0 * s * s - 1.0;
    let t3 = 2.0 * s * t2 - s;
    [1.0, s, t2, t3]
}

/// Tensor Chebyshev basis `T_j(u1) T_k(u2)` over the `j + k <= 3` index set,
/// in [`PolyDegreeCap::index_pairs`] order.
#[inline]
pub fn chebyshev_tensor(u1: f64, u2: f64) -> [f64; 10] {
    let a = chebyshev_shifted_all(u1);
    let b = chebyshev_shifted_all(u2);
    [
        1.0,
        a[1],
        b[1],
        a[2],
        a[1] * b[1],
        b[2],
        a[3],
        a[2] * b[1],
        a[1] * b[2],
        b[3],
    ]
}

/// Probabilists' Hermite polynomial `He_j(v)`.
pub fn hermite(j: usize, v: f64) -> Result<f64, BasisError> {
    if j > HERMITE_MAX_DEGREE {
        return Err(BasisError::DegreeAboveCap {
            degree: j,
            cap: HERMITE_MAX_DEGREE,
        });
    }
    Ok(hermite_all::<{ HERMITE_MAX_DEGREE + 1 }>(v)[j])
}

/// `He_0 .. He_{N-1}` via `He_{n+1} = v He_n - n He_{n-1}`.
#[inline]
pub fn hermite_all<const N: usize>(v: f64) -> [f64; N] {
    let mut h = [0.0; N];
    if N == 0 {
        return h;
    }
    h[0] = 1.0;
    if N > 1 {
        h[1] = v;
    }
    for n in 1..N.saturating_sub(1) {
        h[n + 1] = v * h[n] - n as f64 * h[n - 1];
    }
    h
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// Linearization `He_k He_m = Σ_r C(k,r) C(m,r) r! He_{k+m-2r}` for `k, m <= 4`,
/// stored as dense coefficient rows over `He_0 .. He_8`.
fn linearization() -> &'static [[[f64; HERMITE_MAX_DEGREE + 1]; HERMITE_CAP + 1]; HERMITE_CAP + 1] {
    static TABLE: OnceLock<[[[f64; HERMITE_MAX_DEGREE + 1]; HERMITE_CAP + 1]; HERMITE_CAP + 1]> =
        OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[[0.0; HERMITE_MAX_DEGREE + 1]; HERMITE_CAP + 1]; HERMITE_CAP + 1];
        for (k, row) in t.iter_mut().enumerate() {
            for (m, coeffs) in row.iter_mut().enumerate() {
                for r in 0..=k.min(m) {
                    coeffs[k + m - 2 * r] += binomial(k, r) * binomial(m, r) * factorial(r);
                }
            }
        }
        t
    })
}

/// Coefficients of `He_k He_m` in the `He_0 .. He_8` basis.
pub fn hermite_product_coefficients(k: usize, m: usize) -> [f64; HERMITE_MAX_DEGREE + 1] {
    linearization()[k][m]
}

#[inline]
pub fn norm_pdf(v: f64) -> f64 {
    if v.is_infinite() {
        return 0.0;
    }
    (-0.5 * v * v).exp() / (2.0 * PI).sqrt()
}

/// `Φ(v)` through `erfc` so the lower tail keeps relative accuracy.
#[inline]
pub fn norm_cdf(v: f64) -> f64 {
    0.5 * libm::erfc(-v * FRAC_1_SQRT_2)
}

/// `1 - Φ(v)`.
#[inline]
pub fn norm_sf(v: f64) -> f64 {
    0.5 * libm::erfc(v * FRAC_1_SQRT_2)
}

/// Inverse of `Φ`. Acklam's rational approximation polished by two Halley steps.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let p_low = 0.02425;
    let mut x = if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    for _ in 0..2 {
        // residual in whichever tail is numerically safer
        let e = if x < 0.0 {
            norm_cdf(x) - p
        } else {
            (1.0 - p) - norm_sf(x)
        };
        let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

/// `∫_a^∞ φ(v) He_n(v) dv` for `n <= 8`: `1 - Φ(a)` for `n = 0`,
/// `φ(a) He_{n-1}(a)` otherwise.
fn tail_moments(a: f64) -> [f64; HERMITE_MAX_DEGREE + 1] {
    let mut out = [0.0; HERMITE_MAX_DEGREE + 1];
    if a == f64::NEG_INFINITY {
        out[0] = 1.0;
        return out;
    }
    if a == f64::INFINITY {
        return out;
    }
    out[0] = norm_sf(a);
    let pdf = norm_pdf(a);
    let h = hermite_all::<HERMITE_MAX_DEGREE>(a);
    for n in 1..=HERMITE_MAX_DEGREE {
        out[n] = pdf * h[n - 1];
    }
    out
}

/// `∫_{-∞}^b φ(v) He_n(v) dv`: `Φ(b)` for `n = 0`, `-φ(b) He_{n-1}(b)` otherwise.
fn head_moments(b: f64) -> [f64; HERMITE_MAX_DEGREE + 1] {
    let mut out = [0.0; HERMITE_MAX_DEGREE + 1];
    if b == f64::INFINITY {
        out[0] = 1.0;
        return out;
    }
    if b == f64::NEG_INFINITY {
        return out;
    }
    out[0] = norm_cdf(b);
    let pdf = norm_pdf(b);
    let h = hermite_all::<HERMITE_MAX_DEGREE>(b);
    for n in 1..=HERMITE_MAX_DEGREE {
        out[n] = -pdf * h[n - 1];
    }
    out
}

/// `∫_a^∞ φ(v) He_k(v) He_m(v) dv` in closed form, `k, m <= 4`, `a ∈ [-∞, ∞]`.
pub fn hermite_tail_integral(k: usize, m: usize, a: f64) -> f64 {
    let coeffs = &linearization()[k][m];
    let mom = tail_moments(a);
    coeffs.iter().zip(mom.iter()).map(|(c, t)| c * t).sum()
}

/// `∫_{-∞}^b φ(v) He_k(v) He_m(v) dv`, the complement of the tail integral
/// evaluated without cancellation.
pub fn hermite_head_integral(k: usize, m: usize, b: f64) -> f64 {
    let coeffs = &linearization()[k][m];
    let mom = head_moments(b);
    coeffs.iter().zip(mom.iter()).map(|(c, t)| c * t).sum()
}

/// Matrix of normalized tail integrals `∫_a^∞ φ He_j He_l / √(j! l!)`, `j, l <= 4`.
pub fn normalized_tail_matrix(a: f64) -> [[f64; 5]; 5] {
    normalized_matrix(&tail_moments(a))
}

/// Matrix of normalized head integrals `∫_{-∞}^b φ He_j He_l / √(j! l!)`.
pub fn normalized_head_matrix(b: f64) -> [[f64; 5]; 5] {
    normalized_matrix(&head_moments(b))
}

fn normalized_matrix(mom: &[f64; HERMITE_MAX_DEGREE + 1]) -> [[f64; 5]; 5] {
    let lin = linearization();
    let norms = hermite_norms();
    let mut out = [[0.0; 5]; 5];
    for j in 0..5 {
        for l in j..5 {
            let v: f64 = lin[j][l].iter().zip(mom.iter()).map(|(c, t)| c * t).sum();
            let v = v / (norms[j] * norms[l]);
            out[j][l] = v;
            out[l][j] = v;
        }
    }
    out
}

/// `√j!` for `j = 0..=4`.
#[inline]
pub fn hermite_norms() -> [f64; 5] {
    [1.0, 1.0, std::f64::consts::SQRT_2, 6f64.sqrt(), 24f64.sqrt()]
}

/// Normalized Hermite values `He_j(v)/√j!` and their derivatives, `j = 0..=4`.
#[inline]
pub fn normalized_hermite_with_derivative(v: f64) -> ([f64; 5], [f64; 5]) {
    const INV: [f64; 5] = [
        1.0,
        1.0,
        std::f64::consts::FRAC_1_SQRT_2,
        0.408_248_290_463_863,
        0.204_124_145_231_931_5,
    ];
    let h = hermite_all::<5>(v);
    (
        [h[0], h[1], h[2] * INV[2], h[3] * INV[3], h[4] * INV[4]],
        [
            0.0,
            h[0],
            2.0 * h[1] * INV[2],
            3.0 * h[2] * INV[3],
            4.0 * h[3] * INV[4],
        ],
    )
}

/// Numerically stable logistic function.
#[inline]
pub fn logistic(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `(ln logistic(s), 1 - logistic(s))`, the log-probability and its derivative in `s`.
#[inline]
pub fn log_logistic_with_grad(s: f64) -> (f64, f64) {
    if s >= 0.0 {
        let e = (-s).exp();
        (-e.ln_1p(), e / (1.0 + e))
    } else {
        let e = s.exp();
        (s - e.ln_1p(), 1.0 / (1.0 + e))
    }
}

/// `ln logistic(s)` without overflow or cancellation.
#[inline]
pub fn log_logistic(s: f64) -> f64 {
    if s >= 0.0 {
        -(-s).exp().ln_1p()
    } else {
        s - s.exp().ln_1p()
    }
}
