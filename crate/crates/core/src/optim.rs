//! Limited-memory BFGS with Armijo backtracking.

use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    /// Stop when `‖g‖₂ / max(1, |f|)` falls to this level.
    pub grad_tol: f64,
    /// Relative objective change counted as a stall.
    pub obj_tol: f64,
    /// Consecutive stalled iterations before giving up.
    pub stall_iters: usize,
    pub max_iter: usize,
    pub armijo_c1: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            grad_tol: 1e-6,
            obj_tol: 1e-10,
            stall_iters: 3,
            max_iter: 3000,
            armijo_c1: 1e-4,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    Converged,
    Stalled,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub rel_grad_norm: f64,
    pub iterations: usize,
    pub status: LbfgsStatus,
    pub trace: Vec<IterationRecord>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `f`. `value` returns `None` where the objective is undefined,
/// which the line search treats as `+∞`. Returns `None` when the start is undefined.
pub fn lbfgs_minimize<V, G>(
    value: V,
    value_grad: G,
    x0: Vec<f64>,
    opts: &LbfgsOptions,
) -> Option<LbfgsOutcome>
where
    V: Fn(&[f64]) -> Option<f64>,
    G: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut x = x0;
    let (mut f, mut g) = value_grad(&x)?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut trace = Vec::new();
    let mut stalled = 0;
    let rel = |f: f64, g: &[f64]| norm(g) / f.abs().max(1.0);
    let mut status = LbfgsStatus::MaxIterations;
    let mut iterations = 0;

    for iter in 0..opts.max_iter {
        if rel(f, &g) <= opts.grad_tol {
            status = LbfgsStatus::Converged;
            break;
        }
        iterations = iter + 1;
        let mut d = two_loop(&g, &history);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let mut step = if history.is_empty() {
            (1.0 / norm(&g)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            if let Some(ft) = value(&trial) {
                if ft <= f + opts.armijo_c1 * step * slope {
                    accepted = Some(trial);
                    break;
                }
            }
            step *= 0.5;
        }
        let Some(x_new) = accepted else {
            if !history.is_empty() {
                history.clear();
                continue;
            }
            status = LbfgsStatus::LineSearchFailed;
            break;
        };
        let Some((f_new, g_new)) = value_grad(&x_new) else {
            status = LbfgsStatus::LineSearchFailed;
            break;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let change = (f - f_new).abs() / f.abs().max(1.0);
        stalled = if change <= opts.obj_tol { stalled + 1 } else { 0 };
        x = x_new;
        f = f_new;
        g = g_new;
        trace.push(IterationRecord {
            iteration: iterations,
            value: f,
            grad_norm: norm(&g),
            step,
        });
        if stalled >= opts.stall_iters {
            status = if rel(f, &g) <= opts.grad_tol {
                LbfgsStatus::Converged
            } else {
                LbfgsStatus::Stalled
            };
            break;
        }
    }
    if status == LbfgsStatus::MaxIterations && rel(f, &g) <= opts.grad_tol {
        status = LbfgsStatus::Converged;
    }
    Some(LbfgsOutcome {
        rel_grad_norm: rel(f, &g),
        x,
        value: f,
        grad: g,
        iterations,
        status,
        trace,
    })
}

/// `-H g` for the L-BFGS inverse-Hessian approximation.
fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}
