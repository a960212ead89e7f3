//! Gauss-Legendre rules and the tensor grid over the unit square.

use std::f64::consts::PI;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, then Newton on P_n
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss-Legendre rule mapped to `(0, 1)`, weights summing to one.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    (
        x.iter().map(|x| 0.5 * (x + 1.0)).collect(),
        w.iter().map(|w| 0.5 * w).collect(),
    )
}

/// Tensor-product Gauss-Legendre grid on `(0,1)²` for integrating over the
/// uniform latent heterogeneity. Exact for bivariate polynomials of degree
/// up to `2 * nodes_per_dim - 1` in each coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    nodes_per_dim: usize,
    nodes: Vec<(f64, f64)>,
    weights: Vec<f64>,
}

impl QuadratureGrid {
    pub const DEFAULT_NODES_PER_DIM: usize = 24;

    pub fn new(nodes_per_dim: usize) -> Self {
        let (x, w) = gauss_legendre_unit(nodes_per_dim);
        let mut nodes = Vec::with_capacity(nodes_per_dim * nodes_per_dim);
        let mut weights = Vec::with_capacity(nodes_per_dim * nodes_per_dim);
        for (u1, w1) in x.iter().zip(&w) {
            for (u2, w2) in x.iter().zip(&w) {
                nodes.push((*u1, *u2));
                weights.push(w1 * w2);
            }
        }
        QuadratureGrid {
            nodes_per_dim,
            nodes,
            weights,
        }
    }

    pub fn nodes_per_dim(&self) -> usize {
        self.nodes_per_dim
    }

    pub fn nodes(&self) -> &[(f64, f64)] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `∫∫ f(u1, u2) du1 du2` over the unit square.
    pub fn integrate<F: Fn(f64, f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&(u1, u2), w)| w * f(u1, u2))
            .sum()
    }
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        QuadratureGrid::new(Self::DEFAULT_NODES_PER_DIM)
    }
}
