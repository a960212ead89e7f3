//! Independent numerical oracles: Hermite recurrences, sieve densities and
//! adaptive Gauss–Kronrod integration.

use std::f64::consts::PI;

/// Probabilists' Hermite `He_0 .. He_4` divided by `√j!`.
pub fn hermite_normalized(v: f64) -> [f64; 5] {
    let mut he = [1.0, v, 0.0, 0.0, 0.0];
    for n in 1..4 {
        he[n + 1] = v * he[n] - n as f64 * he[n - 1];
    }
    let mut fact = 1.0;
    for (j, h) in he.iter_mut().enumerate() {
        if j > 0 {
            fact *= j as f64;
        }
        *h /= fact.sqrt();
    }
    he
}

pub fn phi(v: f64) -> f64 {
    (-0.5 * v * v).exp() / (2.0 * PI).sqrt()
}

/// `φ(v)(1 + Σ ω_j He_j/√j!)² / (1 + Σ ω_j²)`.
pub fn h1(v: f64, omega: &[f64; 4]) -> f64 {
    let h = hermite_normalized(v);
    let p = h[0] + (0..4).map(|j| omega[j] * h[j + 1]).sum::<f64>();
    phi(v) * p * p / (1.0 + omega.iter().map(|w| w * w).sum::<f64>())
}

/// Bivariate sieve density from the weight matrix `w[j][k]` (`w[0][0] = 1`).
pub fn h2(v1: f64, v2: f64, w: &[[f64; 5]; 5]) -> f64 {
    let a = hermite_normalized(v1);
    let b = hermite_normalized(v2);
    let mut p = 0.0;
    let mut norm = 0.0;
    for j in 0..5 {
        for k in 0..5 {
            p += w[j][k] * a[j] * b[k];
            norm += w[j][k] * w[j][k];
        }
    }
    phi(v1) * phi(v2) * p * p / norm
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

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let pair = f(c - h * XGK[j]) + f(c + h * XGK[j]);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss–Kronrod (7, 15) on `[a, b]` to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn recurse<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
        let (value, err) = gk15(f, a, b);
        if err <= tol || depth == 0 {
            return value;
        }
        let m = 0.5 * (a + b);
        recurse(f, a, m, 0.5 * tol, depth - 1) + recurse(f, m, b, 0.5 * tol, depth - 1)
    }
    recurse(f, a, b, tol, 40)
}

/// Upper limit beyond which every sieve density here is below `1e-40`.
pub const TAIL: f64 = 16.0;

/// `∫_a^∞ f` for integrands with Gaussian tails.
pub fn integrate_above<F: Fn(f64) -> f64>(f: &F, a: f64, tol: f64) -> f64 {
    if a >= TAIL {
        return 0.0;
    }
    integrate(f, a.max(-TAIL), TAIL, tol)
}
