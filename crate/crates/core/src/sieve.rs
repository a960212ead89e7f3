//! Hermite-sieve densities and their location-scale families.
//!
//! The univariate density is
//! `h1(v; ω) = φ(v) (1 + Σ_j ω_j He_j(v)/√j!)² / (1 + Σ_j ω_j²)` and the
//! bivariate one tilts `φ(v1) φ(v2)` by the square of
//! `Σ_{j+k<=4} ω_jk He_j(v1) He_k(v2) / √(j! k!)` with `ω_00 = 1`.
//! Both integrate to one for every real `ω`.
//!
//! Censored observations integrate the density over the region above a
//! threshold. A threshold of `-∞` integrates a coordinate out entirely, which
//! is how zero-earnings periods enter the post-period likelihood.

use crate::basis::{
    hermite_head_integral, hermite_norms, norm_pdf, norm_sf, normalized_head_matrix,
    normalized_hermite_with_derivative, normalized_tail_matrix, HALF_LN_2PI,
};

/// Returned in place of `ln 0` when the sieve polynomial vanishes at a point.
pub const LOG_ZERO_SENTINEL: f64 = -1e300;

pub const UNIVARIATE_WEIGHTS: usize = 4;
pub const BIVARIATE_WEIGHTS: usize = 14;

/// `(j, k)` indices of the bivariate shape weights, `1 <= j + k <= 4`.
pub const BIVARIATE_INDEX: [(usize, usize); BIVARIATE_WEIGHTS] = [
    (1, 0),
    (0, 1),
    (2, 0),
    (1, 1),
    (0, 2),
    (3, 0),
    (2, 1),
    (1, 2),
    (0, 3),
    (4, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 4),
];

/// Univariate shape weights `ω_1 .. ω_4`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UnivariateShape(pub [f64; UNIVARIATE_WEIGHTS]);

impl UnivariateShape {
    pub fn zero() -> Self {
        UnivariateShape([0.0; UNIVARIATE_WEIGHTS])
    }

    /// Polynomial coefficients over `He_0/√0! .. He_4/√4!` with the constant fixed at one.
    pub fn coefficients(&self) -> [f64; 5] {
        [1.0, self.0[0], self.0[1], self.0[2], self.0[3]]
    }

    /// `1 + Σ ω_j²`.
    pub fn norm_sq(&self) -> f64 {
        1.0 + self.0.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|w| w.is_finite())
    }
}

/// Bivariate shape weights `ω_jk`, `1 <= j + k <= 4`, in [`BIVARIATE_INDEX`] order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BivariateShape(pub [f64; BIVARIATE_WEIGHTS]);

impl BivariateShape {
    pub fn zero() -> Self {
        BivariateShape([0.0; BIVARIATE_WEIGHTS])
    }

    pub fn from_pairs(pairs: &[((usize, usize), f64)]) -> Self {
        let mut w = [0.0; BIVARIATE_WEIGHTS];
        for &((j, k), value) in pairs {
            let idx = BIVARIATE_INDEX
                .iter()
                .position(|&p| p == (j, k))
                .unwrap_or_else(|| panic!("({j},{k}) is not a shape index"));
            w[idx] = value;
        }
        BivariateShape(w)
    }

    /// Weight matrix `W[j][k] = ω_jk` with `W[0][0] = 1` and zeros above total degree 4.
    pub fn matrix(&self) -> [[f64; 5]; 5] {
        let mut m = [[0.0; 5]; 5];
        m[0][0] = 1.0;
        for (idx, &(j, k)) in BIVARIATE_INDEX.iter().enumerate() {
            m[j][k] = self.0[idx];
        }
        m
    }

    /// Weights with the roles of the two coordinates exchanged.
    pub fn transposed(&self) -> Self {
        let mut w = [0.0; BIVARIATE_WEIGHTS];
        for (idx, &(j, k)) in BIVARIATE_INDEX.iter().enumerate() {
            let t = BIVARIATE_INDEX.iter().position(|&p| p == (k, j)).unwrap();
            w[t] = self.0[idx];
        }
        BivariateShape(w)
    }

    /// `1 + Σ ω_jk²`.
    pub fn norm_sq(&self) -> f64 {
        1.0 + self.0.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|w| w.is_finite())
    }
}

/// Location and scale in log-outcome units; the scale is stored as `ln σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationScale {
    pub mu: f64,
    pub log_sigma: f64,
}

impl LocationScale {
    pub fn new(mu: f64, sigma: f64) -> Self {
        assert!(sigma > 0.0, "scale must be positive");
        LocationScale {
            mu,
            log_sigma: sigma.ln(),
        }
    }

    pub fn from_log_sigma(mu: f64, log_sigma: f64) -> Self {
        LocationScale { mu, log_sigma }
    }

    #[inline]
    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    #[inline]
    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mu) / self.sigma()
    }
}

#[inline]
fn dot5(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3] + a[4] * b[4]
}

#[inline]
fn mat_vec(m: &[[f64; 5]; 5], v: &[f64; 5]) -> [f64; 5] {
    [
        dot5(&m[0], v),
        dot5(&m[1], v),
        dot5(&m[2], v),
        dot5(&m[3], v),
        dot5(&m[4], v),
    ]
}

#[inline]
fn mat_t_vec(m: &[[f64; 5]; 5], v: &[f64; 5]) -> [f64; 5] {
    let mut out = [0.0; 5];
    for (j, row) in m.iter().enumerate() {
        for k in 0..5 {
            out[k] += row[k] * v[j];
        }
    }
    out
}

fn quad_form(m: &[[f64; 5]; 5], v: &[f64; 5]) -> f64 {
    dot5(v, &mat_vec(m, v))
}

/// `h1(v; ω)`.
pub fn h1(v: f64, omega: &UnivariateShape) -> f64 {
    let (h, _) = normalized_hermite_with_derivative(v);
    let p = dot5(&omega.coefficients(), &h);
    norm_pdf(v) * p * p / omega.norm_sq()
}

/// `h2(v1, v2; ω)`.
pub fn h2(v1: f64, v2: f64, omega: &BivariateShape) -> f64 {
    let (h1v, _) = normalized_hermite_with_derivative(v1);
    let (h2v, _) = normalized_hermite_with_derivative(v2);
    let w = omega.matrix();
    let p = dot5(&h1v, &mat_vec(&w, &h2v));
    norm_pdf(v1) * norm_pdf(v2) * p * p / omega.norm_sq()
}

/// One coordinate of a likelihood cell: an interior log outcome, or mass
/// above a log threshold (`-∞` integrates the coordinate out).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellObs {
    Interior(f64),
    Above(f64),
}

/// Log-likelihood of one univariate cell with derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnivariateCell {
    pub value: f64,
    pub d_mu: f64,
    pub d_log_sigma: f64,
    pub d_omega: [f64; UNIVARIATE_WEIGHTS],
}

/// Log-likelihood of one bivariate cell with derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BivariateCell {
    pub value: f64,
    pub d_mu: [f64; 2],
    pub d_log_sigma: [f64; 2],
    pub d_omega: [f64; BIVARIATE_WEIGHTS],
}

impl BivariateCell {
    fn sentinel() -> Self {
        BivariateCell {
            value: LOG_ZERO_SENTINEL,
            d_mu: [0.0; 2],
            d_log_sigma: [0.0; 2],
            d_omega: [0.0; BIVARIATE_WEIGHTS],
        }
    }
}

/// Univariate location-scale sieve cell: interior log density or log tail mass.
pub fn univariate_cell(obs: CellObs, ls: LocationScale, omega: &UnivariateShape) -> UnivariateCell {
    univariate_cell_with(obs, ls, &UnivariateKernel::new(omega))
}

/// Shape-dependent constants of a univariate cell, computed once per parameter value.
#[derive(Debug, Clone, Copy)]
pub struct UnivariateKernel {
    omega: UnivariateShape,
    c: [f64; 5],
    s: f64,
    ln_s: f64,
    gaussian: bool,
}

impl UnivariateKernel {
    pub fn new(omega: &UnivariateShape) -> Self {
        let s = omega.norm_sq();
        UnivariateKernel {
            omega: *omega,
            c: omega.coefficients(),
            s,
            ln_s: s.ln(),
            gaussian: omega.0.iter().all(|&w| w == 0.0),
        }
    }
}

/// Shape-dependent constants of a bivariate cell, computed once per parameter value.
#[derive(Debug, Clone, Copy)]
pub struct BivariateKernel {
    omega: BivariateShape,
    w: [[f64; 5]; 5],
    s: f64,
    ln_s: f64,
    gaussian: bool,
}

impl BivariateKernel {
    pub fn new(omega: &BivariateShape) -> Self {
        let s = omega.norm_sq();
        BivariateKernel {
            omega: *omega,
            w: omega.matrix(),
            s,
            ln_s: s.ln(),
            gaussian: omega.0.iter().all(|&w| w == 0.0),
        }
    }
}

/// One coordinate under the Gaussian kernel. `r[j]` is the first column of
/// the coordinate's moment matrix relative to its `(0, 0)` entry, which is
/// what the shape derivatives at `ω = 0` need.
struct GaussianCoord {
    value: f64,
    d_mu: f64,
    d_log_sigma: f64,
    r: [f64; 5],
}

fn gaussian_coord(obs: CellObs, ls: LocationScale) -> Option<GaussianCoord> {
    let sigma = ls.sigma();
    match obs {
        CellObs::Interior(y) => {
            let v = (y - ls.mu) / sigma;
            let (h, _) = normalized_hermite_with_derivative(v);
            Some(GaussianCoord {
                value: -0.5 * v * v - ls.log_sigma - HALF_LN_2PI,
                d_mu: v / sigma,
                d_log_sigma: v * v - 1.0,
                r: h,
            })
        }
        CellObs::Above(t) => {
            let a = (t - ls.mu) / sigma;
            if a == f64::NEG_INFINITY {
                return Some(GaussianCoord {
                    value: 0.0,
                    d_mu: 0.0,
                    d_log_sigma: 0.0,
                    r: [1.0, 0.0, 0.0, 0.0, 0.0],
                });
            }
            let q = norm_sf(a);
            if !(q > 0.0) {
                return None;
            }
            let ratio = norm_pdf(a) / q;
            // ∫_a^∞ φ He_j = φ(a) He_{j-1}(a)
            let (h, _) = normalized_hermite_with_derivative(a);
            let norms = hermite_norms();
            let mut r = [1.0; 5];
            for j in 1..5 {
                r[j] = ratio * h[j - 1] * norms[j - 1] / norms[j];
            }
            Some(GaussianCoord {
                value: q.ln(),
                d_mu: ratio / sigma,
                d_log_sigma: ratio * a,
                r,
            })
        }
    }
}

pub fn univariate_cell_with(obs: CellObs, ls: LocationScale, kernel: &UnivariateKernel) -> UnivariateCell {
    if kernel.gaussian {
        let Some(g) = gaussian_coord(obs, ls) else {
            return UnivariateCell {
                value: LOG_ZERO_SENTINEL,
                d_mu: 0.0,
                d_log_sigma: 0.0,
                d_omega: [0.0; 4],
            };
        };
        return UnivariateCell {
            value: g.value,
            d_mu: g.d_mu,
            d_log_sigma: g.d_log_sigma,
            d_omega: std::array::from_fn(|j| 2.0 * g.r[j + 1]),
        };
    }
    let c = kernel.c;
    let s = kernel.s;
    let omega = &kernel.omega;
    let sigma = ls.sigma();
    match obs {
        CellObs::Interior(y) => {
            let v = (y - ls.mu) / sigma;
            let (h, dh) = normalized_hermite_with_derivative(v);
            let p = dot5(&c, &h);
            if p == 0.0 || !p.is_finite() {
                return UnivariateCell {
                    value: LOG_ZERO_SENTINEL,
                    d_mu: 0.0,
                    d_log_sigma: 0.0,
                    d_omega: [0.0; 4],
                };
            }
            let dp = dot5(&c, &dh);
            let value = 2.0 * p.abs().ln() - 0.5 * v * v - ls.log_sigma - HALF_LN_2PI - kernel.ln_s;
            let dv = 2.0 * dp / p - v;
            let mut d_omega = [0.0; 4];
            for j in 0..4 {
                d_omega[j] = 2.0 * h[j + 1] / p - 2.0 * omega.0[j] / s;
            }
            UnivariateCell {
                value,
                d_mu: -dv / sigma,
                d_log_sigma: -dv * v - 1.0,
                d_omega,
            }
        }
        CellObs::Above(threshold) => {
            let a = (threshold - ls.mu) / sigma;
            let tail = normalized_tail_matrix(a);
            let tc = mat_vec(&tail, &c);
            let q = dot5(&c, &tc);
            if !(q > 0.0) || !q.is_finite() {
                return UnivariateCell {
                    value: LOG_ZERO_SENTINEL,
                    d_mu: 0.0,
                    d_log_sigma: 0.0,
                    d_omega: [0.0; 4],
                };
            }
            let value = q.ln() - kernel.ln_s;
            let (dq_da, a_finite) = if a.is_finite() {
                let (ha, _) = normalized_hermite_with_derivative(a);
                let pa = dot5(&c, &ha);
                (-norm_pdf(a) * pa * pa, true)
            } else {
                (0.0, false)
            };
            let mut d_omega = [0.0; 4];
            for j in 0..4 {
                d_omega[j] = 2.0 * tc[j + 1] / q - 2.0 * omega.0[j] / s;
            }
            let (d_mu, d_log_sigma) = if a_finite {
                (-dq_da / (q * sigma), -dq_da * a / q)
            } else {
                (0.0, 0.0)
            };
            UnivariateCell {
                value,
                d_mu,
                d_log_sigma,
                d_omega,
            }
        }
    }
}

/// Bivariate location-scale sieve cell for any mix of interior and censored
/// coordinates, with analytic derivatives.
pub fn bivariate_cell(
    obs: [CellObs; 2],
    ls: [LocationScale; 2],
    omega: &BivariateShape,
) -> BivariateCell {
    bivariate_cell_with(obs, ls, &BivariateKernel::new(omega))
}

pub fn bivariate_cell_with(
    obs: [CellObs; 2],
    ls: [LocationScale; 2],
    kernel: &BivariateKernel,
) -> BivariateCell {
    if kernel.gaussian {
        let (Some(g1), Some(g2)) = (gaussian_coord(obs[0], ls[0]), gaussian_coord(obs[1], ls[1]))
        else {
            return BivariateCell::sentinel();
        };
        let mut d_omega = [0.0; BIVARIATE_WEIGHTS];
        for (idx, &(j, k)) in BIVARIATE_INDEX.iter().enumerate() {
            d_omega[idx] = 2.0 * g1.r[j] * g2.r[k];
        }
        return BivariateCell {
            value: g1.value + g2.value,
            d_mu: [g1.d_mu, g2.d_mu],
            d_log_sigma: [g1.d_log_sigma, g2.d_log_sigma],
            d_omega,
        };
    }
    let w = kernel.w;
    let s = kernel.s;
    let omega = &kernel.omega;
    let sigma = [ls[0].sigma(), ls[1].sigma()];

    if let (CellObs::Interior(y1), CellObs::Interior(y2)) = (obs[0], obs[1]) {
        let v1 = (y1 - ls[0].mu) / sigma[0];
        let v2 = (y2 - ls[1].mu) / sigma[1];
        let (h1v, dh1) = normalized_hermite_with_derivative(v1);
        let (h2v, dh2) = normalized_hermite_with_derivative(v2);
        let wh2 = mat_vec(&w, &h2v);
        let p = dot5(&h1v, &wh2);
        if p == 0.0 || !p.is_finite() {
            return BivariateCell::sentinel();
        }
        let p_v1 = dot5(&dh1, &wh2);
        let p_v2 = dot5(&h1v, &mat_vec(&w, &dh2));
        let value = 2.0 * p.abs().ln() - 0.5 * (v1 * v1 + v2 * v2)
            - ls[0].log_sigma
            - ls[1].log_sigma
            - 2.0 * HALF_LN_2PI
            - kernel.ln_s;
        let dv1 = 2.0 * p_v1 / p - v1;
        let dv2 = 2.0 * p_v2 / p - v2;
        let mut d_omega = [0.0; BIVARIATE_WEIGHTS];
        for (idx, &(j, k)) in BIVARIATE_INDEX.iter().enumerate() {
            d_omega[idx] = 2.0 * h1v[j] * h2v[k] / p - 2.0 * omega.0[idx] / s;
        }
        return BivariateCell {
            value,
            d_mu: [-dv1 / sigma[0], -dv2 / sigma[1]],
            d_log_sigma: [-dv1 * v1 - 1.0, -dv2 * v2 - 1.0],
            d_omega,
        };
    }

    // General case: Q = Σ W_jk W_lm A1_jl A2_km with A_i either h hᵀ (interior)
    // or the normalized tail matrix (censored).
    struct Coord {
        a: [[f64; 5]; 5],
        // interior: standardized value and basis; censored: threshold and basis at it
        z: f64,
        h: [f64; 5],
        dh: [f64; 5],
        interior: bool,
        finite: bool,
    }
    let coord = |o: CellObs, l: LocationScale, sig: f64| -> Coord {
        match o {
            CellObs::Interior(y) => {
                let v = (y - l.mu) / sig;
                let (h, dh) = normalized_hermite_with_derivative(v);
                let mut a = [[0.0; 5]; 5];
                for j in 0..5 {
                    for k in 0..5 {
                        a[j][k] = h[j] * h[k];
                    }
                }
                Coord {
                    a,
                    z: v,
                    h,
                    dh,
                    interior: true,
                    finite: true,
                }
            }
            CellObs::Above(t) => {
                let z = (t - l.mu) / sig;
                let finite = z.is_finite();
                let (h, dh) = if finite {
                    normalized_hermite_with_derivative(z)
                } else {
                    ([0.0; 5], [0.0; 5])
                };
                Coord {
                    a: normalized_tail_matrix(z),
                    z,
                    h,
                    dh,
                    interior: false,
                    finite,
                }
            }
        }
    };
    let c1 = coord(obs[0], ls[0], sigma[0]);
    let c2 = coord(obs[1], ls[1], sigma[1]);

    // B2 = W A2 Wᵀ, B1 = Wᵀ A1 W
    let mut wa2 = [[0.0; 5]; 5];
    let mut wta1 = [[0.0; 5]; 5];
    for j in 0..5 {
        for m in 0..5 {
            let mut x = 0.0;
            let mut y = 0.0;
            for k in 0..5 {
                x += w[j][k] * c2.a[k][m];
                y += w[k][j] * c1.a[k][m];
            }
            wa2[j][m] = x;
            wta1[j][m] = y;
        }
    }
    let mut b2 = [[0.0; 5]; 5];
    let mut b1 = [[0.0; 5]; 5];
    for j in 0..5 {
        for l in 0..5 {
            let mut x = 0.0;
            let mut y = 0.0;
            for m in 0..5 {
                x += wa2[j][m] * w[l][m];
                y += wta1[j][m] * w[m][l];
            }
            b2[j][l] = x;
            b1[j][l] = y;
        }
    }
    let mut q = 0.0;
    for j in 0..5 {
        for l in 0..5 {
            q += c1.a[j][l] * b2[j][l];
        }
    }
    if !(q > 0.0) || !q.is_finite() {
        return BivariateCell::sentinel();
    }

    let mut value = q.ln() - kernel.ln_s;
    let mut d_mu = [0.0; 2];
    let mut d_log_sigma = [0.0; 2];
    for (i, (c, b)) in [(&c1, &b2), (&c2, &b1)].into_iter().enumerate() {
        if c.interior {
            value += -0.5 * c.z * c.z - ls[i].log_sigma - HALF_LN_2PI;
            let dq_dv = 2.0 * dot5(&c.dh, &mat_vec(b, &c.h));
            let dv = dq_dv / q - c.z;
            d_mu[i] = -dv / sigma[i];
            d_log_sigma[i] = -dv * c.z - 1.0;
        } else if c.finite {
            let dq_da = -norm_pdf(c.z) * quad_form(b, &c.h);
            d_mu[i] = -dq_da / (q * sigma[i]);
            d_log_sigma[i] = -dq_da * c.z / q;
        }
    }

    // dQ/dW = 2 A1 W A2
    let mut d_omega = [0.0; BIVARIATE_WEIGHTS];
    for (idx, &(j, k)) in BIVARIATE_INDEX.iter().enumerate() {
        let mut g = 0.0;
        for l in 0..5 {
            g += c1.a[j][l] * wa2[l][k];
        }
        d_omega[idx] = 2.0 * g / q - 2.0 * omega.0[idx] / s;
    }
    BivariateCell {
        value,
        d_mu,
        d_log_sigma,
        d_omega,
    }
}

/// Log density of a bivariate location-scale cell with both coordinates interior.
pub fn cell_loglik_uncensored(
    y1: f64,
    y2: f64,
    ls1: LocationScale,
    ls2: LocationScale,
    omega: &BivariateShape,
) -> f64 {
    bivariate_cell(
        [CellObs::Interior(y1), CellObs::Interior(y2)],
        [ls1, ls2],
        omega,
    )
    .value
}

/// One coordinate observed, the other censored above `c_cens`. The weights
/// are oriented with the observed coordinate first; use
/// [`BivariateShape::transposed`] when the second coordinate is observed.
pub fn cell_loglik_one_censored(
    y_obs: f64,
    c_cens: f64,
    ls_obs: LocationScale,
    ls_cens: LocationScale,
    omega: &BivariateShape,
) -> f64 {
    bivariate_cell(
        [CellObs::Interior(y_obs), CellObs::Above(c_cens)],
        [ls_obs, ls_cens],
        omega,
    )
    .value
}

/// Both coordinates censored above their thresholds.
pub fn cell_loglik_both_censored(
    c1: f64,
    c2: f64,
    ls1: LocationScale,
    ls2: LocationScale,
    omega: &BivariateShape,
) -> f64 {
    bivariate_cell([CellObs::Above(c1), CellObs::Above(c2)], [ls1, ls2], omega).value
}

/// `P(Y <= y)` under the `h1` location-scale law.
pub fn cdf_location_scale_h1(y: f64, ls: LocationScale, omega: &UnivariateShape) -> f64 {
    GramLaw::univariate(omega).cdf(ls.standardize(y))
}

/// A univariate law with density `φ(v) Σ_jl G_jl Hn_j(v) Hn_l(v) / tr(G)`,
/// where `Hn_j = He_j/√j!` and `G` is symmetric positive semidefinite.
///
/// Covers `h1` (`G = c cᵀ`), either marginal of `h2`, and the conditional law
/// of one `h2` coordinate given the other.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GramLaw {
    gram: [[f64; 5]; 5],
    mass: f64,
}

impl GramLaw {
    pub fn from_gram(gram: [[f64; 5]; 5]) -> Self {
        let mass = (0..5).map(|j| gram[j][j]).sum();
        GramLaw { gram, mass }
    }

    pub fn univariate(omega: &UnivariateShape) -> Self {
        let c = omega.coefficients();
        Self::outer(&c)
    }

    fn outer(c: &[f64; 5]) -> Self {
        let mut g = [[0.0; 5]; 5];
        for j in 0..5 {
            for l in 0..5 {
                g[j][l] = c[j] * c[l];
            }
        }
        Self::from_gram(g)
    }

    /// Marginal law of coordinate `which` (0 or 1) of `h2(·; ω)`.
    pub fn bivariate_marginal(omega: &BivariateShape, which: usize) -> Self {
        let w = omega.matrix();
        let mut g = [[0.0; 5]; 5];
        for j in 0..5 {
            for l in 0..5 {
                g[j][l] = (0..5)
                    .map(|k| {
                        if which == 0 {
                            w[j][k] * w[l][k]
                        } else {
                            w[k][j] * w[k][l]
                        }
                    })
                    .sum();
            }
        }
        Self::from_gram(g)
    }

    /// Law of the second coordinate of `h2(·; ω)` given the first equals `v1`.
    pub fn bivariate_conditional(omega: &BivariateShape, v1: f64) -> Self {
        let (h, _) = normalized_hermite_with_derivative(v1);
        let q = mat_t_vec(&omega.matrix(), &h);
        Self::outer(&q)
    }

    pub fn pdf(&self, v: f64) -> f64 {
        let (h, _) = normalized_hermite_with_derivative(v);
        norm_pdf(v) * quad_form(&self.gram, &h) / self.mass
    }

    pub fn cdf(&self, v: f64) -> f64 {
        let head = normalized_head_matrix(v);
        let mut acc = 0.0;
        for j in 0..5 {
            for l in 0..5 {
                acc += self.gram[j][l] * head[j][l];
            }
        }
        (acc / self.mass).clamp(0.0, 1.0)
    }

    pub fn sf(&self, v: f64) -> f64 {
        let tail = normalized_tail_matrix(v);
        let mut acc = 0.0;
        for j in 0..5 {
            for l in 0..5 {
                acc += self.gram[j][l] * tail[j][l];
            }
        }
        (acc / self.mass).clamp(0.0, 1.0)
    }

    /// Left-continuous inverse CDF: bracketing, then Newton steps that fall
    /// back to bisection whenever they leave the bracket.
    pub fn quantile(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if p >= 1.0 {
            return f64::INFINITY;
        }
        let mut lo = -8.0;
        let mut hi = 8.0;
        while self.cdf(lo) >= p && lo > -60.0 {
            lo *= 2.0;
        }
        while self.cdf(hi) < p && hi < 60.0 {
            hi *= 2.0;
        }
        let mut x = crate::basis::norm_quantile(p).clamp(lo, hi);
        for _ in 0..200 {
            let f = self.cdf(x) - p;
            if f >= 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            if f.abs() <= 1e-15 || hi - lo < 1e-12 {
                break;
            }
            let d = self.pdf(x);
            let newton = if d > 0.0 { x - f / d } else { f64::NAN };
            if newton > lo && newton < hi {
                let done = (newton - x).abs() < 1e-13;
                x = newton;
                if done {
                    break;
                }
            } else {
                x = 0.5 * (lo + hi);
            }
        }
        x
    }

    /// `E[exp(σ V)]` in closed form: `e^{σ²/2} E[poly(Z + σ)]`.
    pub fn mean_exp(&self, sigma: f64) -> f64 {
        self.mean_exp_below(sigma, f64::INFINITY)
    }

    /// `E[exp(σ V) 1{V <= b}]`, using `φ(v) e^{σv} = e^{σ²/2} φ(v - σ)` and the
    /// Appell shift `He_n(w + σ) = Σ_r C(n,r) σ^{n-r} He_r(w)`.
    pub fn mean_exp_below(&self, sigma: f64, b: f64) -> f64 {
        let norms = hermite_norms();
        // shifted[j][r]: coefficient of He_r(w) in He_j(w + σ)
        let mut shifted = [[0.0; 5]; 5];
        for (j, row) in shifted.iter_mut().enumerate() {
            for (r, cell) in row.iter_mut().enumerate().take(j + 1) {
                *cell = binom(j, r) * sigma.powi((j - r) as i32);
            }
        }
        let upper = b - sigma;
        let mut head = [[0.0; 5]; 5];
        for r in 0..5 {
            for t in r..5 {
                let v = hermite_head_integral(r, t, upper);
                head[r][t] = v;
                head[t][r] = v;
            }
        }
        let mut acc = 0.0;
        for j in 0..5 {
            for l in 0..5 {
                let g = self.gram[j][l];
                if g == 0.0 {
                    continue;
                }
                let mut inner = 0.0;
                for r in 0..=j {
                    for t in 0..=l {
                        inner += shifted[j][r] * shifted[l][t] * head[r][t];
                    }
                }
                acc += g * inner / (norms[j] * norms[l]);
            }
        }
        (0.5 * sigma * sigma).exp() * acc / self.mass
    }
}

fn binom(n: usize, k: usize) -> f64 {
    crate::basis::factorial(n) / (crate::basis::factorial(k) * crate::basis::factorial(n - k))
}

/// `E[min(exp(Ỹ), cap)]` for `Ỹ = μ + σ V`, `V ~ law`; `cap = ∞` gives the plain mean.
pub fn expected_level(law: &GramLaw, ls: LocationScale, cap: f64) -> f64 {
    let sigma = ls.sigma();
    if cap.is_infinite() {
        return ls.mu.exp() * law.mean_exp(sigma);
    }
    let b = (cap.ln() - ls.mu) / sigma;
    ls.mu.exp() * law.mean_exp_below(sigma, b) + cap * law.sf(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_uni(rng: &mut ChaCha8Rng, scale: f64) -> UnivariateShape {
        UnivariateShape(std::array::from_fn(|_| rng.random_range(-scale..scale)))
    }

    fn random_bi(rng: &mut ChaCha8Rng, scale: f64) -> BivariateShape {
        BivariateShape(std::array::from_fn(|_| rng.random_range(-scale..scale)))
    }

    #[test]
    fn gaussian_kernel_matches_general_path() {
        let obs = [
            CellObs::Interior(0.7),
            CellObs::Above(-0.4),
            CellObs::Above(2.5),
            CellObs::Above(f64::NEG_INFINITY),
        ];
        let ls = [LocationScale::new(0.2, 0.8), LocationScale::new(-0.1, 1.3)];
        let fast = BivariateKernel::new(&BivariateShape::zero());
        let mut slow = fast;
        slow.gaussian = false;
        for &o1 in &obs {
            for &o2 in &obs {
                let a = bivariate_cell_with([o1, o2], ls, &fast);
                let b = bivariate_cell_with([o1, o2], ls, &slow);
                assert!((a.value - b.value).abs() < 1e-12, "{o1:?} {o2:?}");
                for c in 0..2 {
                    assert!((a.d_mu[c] - b.d_mu[c]).abs() < 1e-10);
                    assert!((a.d_log_sigma[c] - b.d_log_sigma[c]).abs() < 1e-10);
                }
                for (x, y) in a.d_omega.iter().zip(&b.d_omega) {
                    assert!((x - y).abs() < 1e-10, "{o1:?} {o2:?} {x} {y}");
                }
            }
            let fast = UnivariateKernel::new(&UnivariateShape::zero());
            let mut slow = fast;
            slow.gaussian = false;
            let a = univariate_cell_with(o1, ls[0], &fast);
            let b = univariate_cell_with(o1, ls[0], &slow);
            assert!((a.value - b.value).abs() < 1e-12);
            assert!((a.d_mu - b.d_mu).abs() < 1e-10);
            assert!((a.d_log_sigma - b.d_log_sigma).abs() < 1e-10);
            for (x, y) in a.d_omega.iter().zip(&b.d_omega) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn h1_examples() {
        let zero = UnivariateShape::zero();
        assert!((h1(0.0, &zero) - 0.398_942_280_4).abs() < 1e-10);
        let w = UnivariateShape([1.0, 0.0, 0.0, 0.0]);
        let oracle = norm_pdf(1.0) * 4.0 / 2.0;
        assert!((h1(1.0, &w) - oracle).abs() < 1e-15);
        assert!((h1(1.0, &w) - 0.483_941_449_1).abs() < 1e-10);
        let w = UnivariateShape([0.3, -0.2, 0.1, 0.05]);
        let mass = oracle::integrate(|v| h1(v, &w), -40.0, 40.0, 1e-12);
        assert!((mass - 1.0).abs() < 1e-8);
    }

    #[test]
    fn h2_examples() {
        let zero = BivariateShape::zero();
        assert!((h2(0.0, 0.0, &zero) - 0.159_154_943_1).abs() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random_bi(&mut rng, 0.5);
        let mass = oracle::integrate(
            |v1| oracle::integrate(|v2| h2(v1, v2, &w), -30.0, 30.0, 1e-11),
            -30.0,
            30.0,
            1e-10,
        );
        assert!((mass - 1.0).abs() < 1e-7, "{mass}");
        let t = w.transposed();
        for (a, b) in [(0.3, -1.2), (2.0, 0.5), (-0.7, -0.1)] {
            assert!((h2(a, b, &w) - h2(b, a, &t)).abs() < 1e-15);
        }
        assert_eq!(t.transposed(), w);
    }

    #[test]
    fn uncensored_examples() {
        let zero = BivariateShape::zero();
        let ls = LocationScale::new(10.0, 1.0);
        let v = cell_loglik_uncensored(10.0, 10.0, ls, ls, &zero);
        assert!((v - (-1.837_877_066_4)).abs() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let w = random_bi(&mut rng, 0.6);
            let l1 = LocationScale::new(rng.random_range(9.0..11.0), rng.random_range(0.2..1.5));
            let l2 = LocationScale::new(rng.random_range(9.0..11.0), rng.random_range(0.2..1.5));
            let (y1, y2) = (rng.random_range(8.0..12.0), rng.random_range(8.0..12.0));
            let naive =
                (h2(l1.standardize(y1), l2.standardize(y2), &w) / (l1.sigma() * l2.sigma())).ln();
            let closed = cell_loglik_uncensored(y1, y2, l1, l2, &w);
            assert!((closed - naive).abs() < 1e-12, "{closed} {naive}");
        }

        // doubling sigma at fixed standardized residual lowers the value by ln 2
        let w = random_bi(&mut rng, 0.4);
        let a = cell_loglik_uncensored(10.5, 9.5, LocationScale::new(10.0, 1.0), ls, &w);
        let b = cell_loglik_uncensored(11.0, 9.5, LocationScale::new(10.0, 2.0), ls, &w);
        assert!((a - b - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn vanishing_polynomial_gives_sentinel() {
        // 1 + ω He_1(v1) vanishes at v1 = -1/ω
        let w = BivariateShape::from_pairs(&[((1, 0), 2.0)]);
        let ls = LocationScale::new(0.0, 1.0);
        let v = cell_loglik_uncensored(-0.5, 0.3, ls, ls, &w);
        assert_eq!(v, LOG_ZERO_SENTINEL);
        let cell = bivariate_cell([CellObs::Interior(-0.5), CellObs::Interior(0.3)], [ls, ls], &w);
        assert!(cell.d_omega.iter().all(|d| d.is_finite()));
    }

    #[test]
    fn one_censored_examples() {
        let zero = BivariateShape::zero();
        let ls = LocationScale::new(10.0, 0.7);
        let ls_c = LocationScale::new(9.0, 1.3);
        let full = cell_loglik_one_censored(10.4, f64::NEG_INFINITY, ls, ls_c, &zero);
        let normal_log_density = (norm_pdf(ls.standardize(10.4)) / ls.sigma()).ln();
        assert!((full - normal_log_density).abs() < 1e-13);

        let half = cell_loglik_one_censored(10.4, ls_c.mu, ls, ls_c, &zero);
        assert!((half - (normal_log_density + 0.5f64.ln())).abs() < 1e-13);
    }

    #[test]
    fn one_censored_matches_integration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let w = random_bi(&mut rng, 0.5);
            let lo = LocationScale::new(rng.random_range(9.0..11.0), rng.random_range(0.3..1.2));
            let lc = LocationScale::new(rng.random_range(9.0..11.0), rng.random_range(0.3..1.2));
            let y = rng.random_range(9.0..11.0);
            let c = rng.random_range(9.0..11.5);
            let v1 = lo.standardize(y);
            let a = lc.standardize(c);
            let mass = oracle::integrate(|v2| h2(v1, v2, &w), a, a.max(0.0) + 40.0, 1e-14);
            let oracle_value = (mass / lo.sigma()).ln();
            let closed = cell_loglik_one_censored(y, c, lo, lc, &w);
            assert!((closed - oracle_value).abs() < 1e-8, "{closed} {oracle_value}");
        }
    }

    #[test]
    fn both_censored_examples() {
        let zero = BivariateShape::zero();
        let l1 = LocationScale::new(10.0, 0.5);
        let l2 = LocationScale::new(10.2, 0.8);
        let v = cell_loglik_both_censored(l1.mu, l2.mu, l1, l2, &zero);
        assert!((v - 0.25f64.ln()).abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_bi(&mut rng, 0.7);
        let v = cell_loglik_both_censored(f64::NEG_INFINITY, f64::NEG_INFINITY, l1, l2, &w);
        assert!(v.abs() < 1e-14);
    }

    #[test]
    fn censored_limit_recovers_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random_bi(&mut rng, 0.5);
        let lo = LocationScale::new(10.0, 0.6);
        let lc = LocationScale::new(10.1, 0.9);
        let marginal = cell_loglik_one_censored(10.3, f64::NEG_INFINITY, lo, lc, &w);
        let law = GramLaw::bivariate_marginal(&w, 0);
        let direct = (law.pdf(lo.standardize(10.3)) / lo.sigma()).ln();
        assert!((marginal - direct).abs() < 1e-12);
        // threshold far below the censored location: tail mass ≈ whole line
        let near = cell_loglik_one_censored(10.3, lc.mu - 12.0 * lc.sigma(), lo, lc, &w);
        assert!((near - marginal).abs() < 1e-10);
    }

    #[test]
    fn cell_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cases = [
            [CellObs::Interior(10.2), CellObs::Interior(9.7)],
            [CellObs::Interior(10.2), CellObs::Above(10.5)],
            [CellObs::Above(9.9), CellObs::Interior(9.7)],
            [CellObs::Above(10.4), CellObs::Above(9.6)],
            [CellObs::Above(f64::NEG_INFINITY), CellObs::Interior(9.7)],
            [CellObs::Interior(10.0), CellObs::Above(f64::NEG_INFINITY)],
        ];
        for obs in cases {
            let w = random_bi(&mut rng, 0.4);
            let ls = [LocationScale::new(10.0, 0.6), LocationScale::new(9.9, 0.8)];
            let cell = bivariate_cell(obs, ls, &w);
            let h = 1e-6;
            for i in 0..2 {
                let mut lp = ls;
                let mut lm = ls;
                lp[i].mu += h;
                lm[i].mu -= h;
                let fd = (bivariate_cell(obs, lp, &w).value - bivariate_cell(obs, lm, &w).value)
                    / (2.0 * h);
                assert!((fd - cell.d_mu[i]).abs() < 1e-6, "{obs:?} mu{i} {fd} {}", cell.d_mu[i]);
                let mut lp = ls;
                let mut lm = ls;
                lp[i].log_sigma += h;
                lm[i].log_sigma -= h;
                let fd = (bivariate_cell(obs, lp, &w).value - bivariate_cell(obs, lm, &w).value)
                    / (2.0 * h);
                assert!((fd - cell.d_log_sigma[i]).abs() < 1e-6);
            }
            for k in 0..BIVARIATE_WEIGHTS {
                let mut wp = w;
                let mut wm = w;
                wp.0[k] += h;
                wm.0[k] -= h;
                let fd = (bivariate_cell(obs, ls, &wp).value - bivariate_cell(obs, ls, &wm).value)
                    / (2.0 * h);
                assert!((fd - cell.d_omega[k]).abs() < 1e-6, "{obs:?} omega{k}");
            }
        }
    }

    #[test]
    fn univariate_cell_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for obs in [CellObs::Interior(10.3), CellObs::Above(10.6)] {
            let w = random_uni(&mut rng, 0.5);
            let ls = LocationScale::new(10.1, 0.7);
            let cell = univariate_cell(obs, ls, &w);
            let h = 1e-6;
            let f = |l: LocationScale, w: &UnivariateShape| univariate_cell(obs, l, w).value;
            let fd_mu = (f(LocationScale { mu: ls.mu + h, ..ls }, &w)
                - f(LocationScale { mu: ls.mu - h, ..ls }, &w))
                / (2.0 * h);
            assert!((fd_mu - cell.d_mu).abs() < 1e-6);
            let fd_s = (f(
                LocationScale {
                    log_sigma: ls.log_sigma + h,
                    ..ls
                },
                &w,
            ) - f(
                LocationScale {
                    log_sigma: ls.log_sigma - h,
                    ..ls
                },
                &w,
            )) / (2.0 * h);
            assert!((fd_s - cell.d_log_sigma).abs() < 1e-6);
            for k in 0..4 {
                let mut wp = w;
                let mut wm = w;
                wp.0[k] += h;
                wm.0[k] -= h;
                let fd = (f(ls, &wp) - f(ls, &wm)) / (2.0 * h);
                assert!((fd - cell.d_omega[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cdf_examples() {
        let zero = UnivariateShape::zero();
        let ls = LocationScale::new(10.0, 0.5);
        assert!((cdf_location_scale_h1(10.0, ls, &zero) - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_uni(&mut rng, 0.8);
        let mut prev = 0.0;
        for i in 0..100 {
            let y = 7.0 + 6.0 * i as f64 / 99.0;
            let f = cdf_location_scale_h1(y, ls, &w);
            assert!(f >= prev - 1e-15);
            prev = f;
            let oracle = oracle::integrate(|v| h1(v, &w), -40.0, ls.standardize(y), 1e-14);
            assert!((f - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn quantile_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_bi(&mut rng, 0.6);
        for law in [
            GramLaw::univariate(&random_uni(&mut rng, 0.7)),
            GramLaw::bivariate_marginal(&w, 0),
            GramLaw::bivariate_marginal(&w, 1),
            GramLaw::bivariate_conditional(&w, 0.4),
        ] {
            for p in [1e-6, 0.01, 0.25, 0.5, 0.9, 0.999] {
                let q = law.quantile(p);
                assert!((law.cdf(q) - p).abs() < 1e-10);
                assert!((law.cdf(q) + law.sf(q) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conditional_times_marginal_is_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_bi(&mut rng, 0.5);
        let marg = GramLaw::bivariate_marginal(&w, 0);
        for (a, b) in [(0.2, -0.4), (1.5, 0.7), (-2.0, 1.1)] {
            let cond = GramLaw::bivariate_conditional(&w, a);
            assert!((marg.pdf(a) * cond.pdf(b) - h2(a, b, &w)).abs() < 1e-14);
        }
    }

    #[test]
    fn mean_exp_matches_quadrature_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random_bi(&mut rng, 0.5);
        let law = GramLaw::bivariate_marginal(&w, 1);
        for sigma in [0.1, 0.5, 1.0] {
            let oracle_full =
                oracle::integrate(|v| law.pdf(v) * (sigma * v).exp(), -40.0, 40.0, 1e-13);
            assert!((law.mean_exp(sigma) - oracle_full).abs() < 1e-10 * oracle_full);
            let b = 0.3;
            let oracle_trunc =
                oracle::integrate(|v| law.pdf(v) * (sigma * v).exp(), -40.0, b, 1e-13);
            assert!((law.mean_exp_below(sigma, b) - oracle_trunc).abs() < 1e-10);
        }
        let zero = GramLaw::univariate(&UnivariateShape::zero());
        assert!((zero.mean_exp(0.4) - (0.08f64).exp()).abs() < 1e-14);
        let ls = LocationScale::new(10.0, 0.4);
        let capped = expected_level(&zero, ls, 30_000.0);
        assert!(capped < expected_level(&zero, ls, f64::INFINITY));
    }
}
