//! Treatment-effect estimators built on a fitted latent model: the ATT
//! without parallel trends, QTT, conditional effects, plus the matching DID
//! and unit-trend event-study benchmarks.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::basis::logistic;
use crate::exact_sum::exact_sum;
use crate::inference::{att_standard_error, cluster_se};
use crate::mle::FitResult;
use crate::model::{ModelError, ModelParams, PanelDataset, Role, Shifts, UnitRecord};
use crate::quadrature::QuadratureGrid;
use crate::sieve::{expected_level, GramLaw};

/// Propensity scores must lie in `[ε, 1 − ε]`.
pub const OVERLAP_EPS: f64 = 1e-3;

/// Event times carried by the unit-trend event study.
pub const EVENT_WINDOW: (i64, i64) = (-9, 9);

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapCell {
    pub unit: u64,
    pub x: Vec<f64>,
    pub propensity: f64,
}

fn overlap_message(cells: &[OverlapCell]) -> String {
    let shown: Vec<String> = cells
        .iter()
        .take(5)
        .map(|c| format!("unit {} x={:?} p={:.2e}", c.unit, c.x, c.propensity))
        .collect();
    format!(
        "propensity outside [{OVERLAP_EPS}, {}] for {} units: {}",
        1.0 - OVERLAP_EPS,
        cells.len(),
        shown.join("; ")
    )
}

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("fit did not converge")]
    NotConverged,
    #[error("{} is not a post period", .0.name())]
    NotPostRole(Role),
    #[error("{}", overlap_message(.0))]
    Overlap(Vec<OverlapCell>),
    #[error("no {0} units")]
    EmptyGroup(&'static str),
    #[error("quantile level {0} outside (0, 1)")]
    InvalidTau(f64),
    #[error("collinear design: {0}")]
    Collinear(String),
    #[error("singular {0}")]
    Singular(&'static str),
    #[error("standard errors: {0}")]
    Inference(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn post_slot(role: Role) -> Result<usize, EstimatorError> {
    match role {
        Role::Post1 => Ok(0),
        Role::Post2 => Ok(1),
        other => Err(EstimatorError::NotPostRole(other)),
    }
}

/// Model-implied law of `Y_t` for one post period, including the zero atom.
#[derive(Debug, Clone)]
pub struct PostOutcomeModel<'a> {
    params: &'a ModelParams,
    role: Role,
    law: GramLaw,
}

impl<'a> PostOutcomeModel<'a> {
    pub fn new(params: &'a ModelParams, role: Role) -> Result<Self, EstimatorError> {
        let slot = post_slot(role)?;
        Ok(PostOutcomeModel {
            params,
            role,
            law: GramLaw::bivariate_marginal(&params.omega_post, slot),
        })
    }

    /// Zero paths on which `Y_t > 0`: probability and whether the other period is zero.
    fn positive_paths(&self, u: (f64, f64), x: &[f64]) -> [(f64, bool); 2] {
        let p = self.params;
        match self.role {
            Role::Post1 => [
                (p.prob_zero_path(false, false, u, x), false),
                (p.prob_zero_path(false, true, u, x), true),
            ],
            _ => [
                (p.prob_zero_path(false, false, u, x), false),
                (p.prob_zero_path(true, false, u, x), true),
            ],
        }
    }

    pub fn prob_zero(&self, u: (f64, f64), x: &[f64]) -> f64 {
        let [a, b] = self.positive_paths(u, x);
        (1.0 - a.0 - b.0).max(0.0)
    }

    fn location_scale(&self, u: (f64, f64), x: &[f64], shifted: bool) -> Result<crate::sieve::LocationScale, EstimatorError> {
        let shifts = Shifts {
            treated: false,
            other_period_zero: shifted,
        };
        Ok(self.params.location_scale(self.role, u, x, shifts)?)
    }

    /// `E[min(Y_t, cap) | u, x]`.
    pub fn mean_level(&self, u: (f64, f64), x: &[f64], cap: f64) -> Result<f64, EstimatorError> {
        let mut acc = 0.0;
        for (prob, shifted) in self.positive_paths(u, x) {
            if prob > 0.0 {
                acc += prob * expected_level(&self.law, self.location_scale(u, x, shifted)?, cap);
            }
        }
        Ok(acc)
    }

    /// `P(min(Y_t, cap) <= y | u, x)`.
    pub fn cdf(&self, y: f64, u: (f64, f64), x: &[f64], cap: f64) -> Result<f64, EstimatorError> {
        if y < 0.0 {
            return Ok(0.0);
        }
        if y >= cap {
            return Ok(1.0);
        }
        let paths = self.positive_paths(u, x);
        let mut acc = (1.0 - paths[0].0 - paths[1].0).max(0.0);
        if y > 0.0 {
            for (prob, shifted) in paths {
                if prob > 0.0 {
                    let ls = self.location_scale(u, x, shifted)?;
                    acc += prob * self.law.cdf(ls.standardize(y.ln()));
                }
            }
        }
        Ok(acc.clamp(0.0, 1.0))
    }
}

/// `f_{U | D=d, X=x}` on the grid nodes, as normalized node weights: Bayes
/// on the uniform prior.
pub fn latent_posterior(params: &ModelParams, grid: &QuadratureGrid, x: &[f64], treated: bool) -> Vec<f64> {
    let raw: Vec<f64> = grid
        .nodes()
        .iter()
        .zip(grid.weights())
        .map(|(&u, &w)| {
            let p = params.prob_treatment(u, x);
            w * if treated { p } else { 1.0 - p }
        })
        .collect();
    let total = exact_sum(&raw);
    raw.into_iter().map(|r| r / total).collect()
}

/// Units sharing covariates and top code at one period.
#[derive(Debug, Clone)]
struct Cell {
    x: Vec<f64>,
    cap: f64,
    members: Vec<usize>,
}

fn cells_by_x(data: &PanelDataset, role: Role, keep: impl Fn(&UnitRecord) -> bool) -> Vec<Cell> {
    let mut map: BTreeMap<Vec<u64>, Cell> = BTreeMap::new();
    for (i, unit) in data.units.iter().enumerate() {
        if !keep(unit) {
            continue;
        }
        let cap = unit.top_code[role.index()];
        let mut key: Vec<u64> = unit.x.iter().map(|v| v.to_bits()).collect();
        key.push(cap.to_bits());
        map.entry(key)
            .or_insert_with(|| Cell {
                x: unit.x.clone(),
                cap,
                members: Vec::new(),
            })
            .members
            .push(i);
    }
    map.into_values().collect()
}

/// Bias-correction integrand `g(x) = ∫ E[Y_t(0) | u, x] (f_{U|D=1,x} − f_{U|D=0,x}) du`.
fn bias_for_x(
    params: &ModelParams,
    outcome: &PostOutcomeModel,
    grid: &QuadratureGrid,
    x: &[f64],
    cap: f64,
) -> Result<f64, EstimatorError> {
    // a u-free propensity makes both latent laws uniform
    if params.treatment.is_u_free() {
        return Ok(0.0);
    }
    let w1 = latent_posterior(params, grid, x, true);
    let w0 = latent_posterior(params, grid, x, false);
    let mut terms = Vec::with_capacity(2 * grid.len());
    for (k, &u) in grid.nodes().iter().enumerate() {
        let m = outcome.mean_level(u, x, cap)?;
        terms.push(m * w1[k]);
        terms.push(-m * w0[k]);
    }
    Ok(exact_sum(&terms))
}

/// `g_i` for every unit, in data order.
pub fn bias_terms(
    params: &ModelParams,
    data: &PanelDataset,
    grid: &QuadratureGrid,
    role: Role,
) -> Result<Vec<f64>, EstimatorError> {
    let outcome = PostOutcomeModel::new(params, role)?;
    let cells = cells_by_x(data, role, |_| true);
    let values: Vec<Result<f64, EstimatorError>> = cells
        .par_iter()
        .map(|c| bias_for_x(params, &outcome, grid, &c.x, c.cap))
        .collect();
    let mut g = vec![0.0; data.len()];
    for (cell, value) in cells.iter().zip(values) {
        let value = value?;
        for &i in &cell.members {
            g[i] = value;
        }
    }
    Ok(g)
}

/// `Σ D_i g_i / Σ D_i`.
pub fn treated_mean(values: &[f64], data: &PanelDataset) -> f64 {
    let treated: Vec<f64> = data
        .units
        .iter()
        .zip(values)
        .filter(|(u, _)| u.d)
        .map(|(_, &v)| v)
        .collect();
    exact_sum(&treated) / treated.len() as f64
}

/// Doubly-robust ATT of a per-unit outcome, with its influence function.
#[derive(Debug, Clone, PartialEq)]
pub struct DrEstimate {
    pub att: f64,
    /// Cluster-robust standard error.
    pub se: f64,
    /// Per-unit influence in data order; `att − θ ≈ mean(influence)`.
    pub influence: Vec<f64>,
    pub n_treated: usize,
    pub n_control: usize,
}

fn design_row(x: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(x.len() + 1);
    row.push(1.0);
    row.extend_from_slice(x);
    row
}

/// Logistic regression of `D` on `(1, X)` by Newton's method.
fn propensity(data: &PanelDataset) -> Result<(Vec<f64>, DMatrix<f64>), EstimatorError> {
    let n = data.len();
    let k = data.n_covariates() + 1;
    let rows: Vec<Vec<f64>> = data.units.iter().map(|u| design_row(&u.x)).collect();
    let share = data.n_treated() as f64 / n as f64;
    let mut beta = DVector::zeros(k);
    beta[0] = (share / (1.0 - share)).ln();
    let info = |beta: &DVector<f64>| {
        let mut h = DMatrix::zeros(k, k);
        let mut grad = DVector::zeros(k);
        for (row, unit) in rows.iter().zip(&data.units) {
            let eta: f64 = row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            let p = logistic(eta);
            let w = p * (1.0 - p);
            let r = if unit.d { 1.0 } else { 0.0 } - p;
            for a in 0..k {
                grad[a] += r * row[a];
                for b in 0..k {
                    h[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        (grad, h)
    };
    if k > 1 {
        for _ in 0..100 {
            let (grad, h) = info(&beta);
            let Some(ch) = h.cholesky() else { break };
            let step = ch.solve(&grad);
            beta += &step;
            if step.amax() <= 1e-12 * beta.amax().max(1.0) {
                break;
            }
        }
    }
    let ps: Vec<f64> = if k == 1 {
        vec![share; n]
    } else {
        rows.iter()
            .map(|row| logistic(row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum()))
            .collect()
    };
    let (_, h) = info(&beta);
    let h_inv = (h / n as f64)
        .try_inverse()
        .ok_or(EstimatorError::Singular("propensity information"))?;
    Ok((ps, h_inv))
}

/// DR ATT with outcome `outcome[i]`: logistic propensity on `X`, linear
/// outcome regression on controls, normalized weights.
pub fn doubly_robust_att(outcome: &[f64], data: &PanelDataset) -> Result<DrEstimate, EstimatorError> {
    let n = data.len();
    let n1 = data.n_treated();
    if n1 == 0 {
        return Err(EstimatorError::EmptyGroup("treated"));
    }
    if n1 == n {
        return Err(EstimatorError::EmptyGroup("control"));
    }
    let k = data.n_covariates() + 1;
    let (ps, ps_hinv) = propensity(data)?;
    let bad: Vec<OverlapCell> = data
        .units
        .iter()
        .zip(&ps)
        .filter(|(_, &p)| !(OVERLAP_EPS..=1.0 - OVERLAP_EPS).contains(&p))
        .map(|(u, &p)| OverlapCell {
            unit: u.id,
            x: u.x.clone(),
            propensity: p,
        })
        .collect();
    if !bad.is_empty() {
        return Err(EstimatorError::Overlap(bad));
    }

    let rows: Vec<Vec<f64>> = data.units.iter().map(|u| design_row(&u.x)).collect();
    let d: Vec<f64> = data.units.iter().map(|u| if u.d { 1.0 } else { 0.0 }).collect();
    let mut xtx = DMatrix::zeros(k, k);
    let mut xty = DVector::zeros(k);
    for i in 0..n {
        if d[i] == 0.0 {
            for a in 0..k {
                xty[a] += rows[i][a] * outcome[i];
                for b in 0..k {
                    xtx[(a, b)] += rows[i][a] * rows[i][b];
                }
            }
        }
    }
    let ols_inv = (&xtx / n as f64)
        .try_inverse()
        .ok_or(EstimatorError::Singular("outcome regression"))?;
    let coef = xtx
        .cholesky()
        .ok_or(EstimatorError::Singular("outcome regression"))?
        .solve(&xty);
    let fitted: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().zip(coef.iter()).map(|(a, b)| a * b).sum())
        .collect();

    let nf = n as f64;
    let w_treat: Vec<f64> = d.clone();
    let w_cont: Vec<f64> = (0..n).map(|i| ps[i] * (1.0 - d[i]) / (1.0 - ps[i])).collect();
    let resid: Vec<f64> = (0..n).map(|i| outcome[i] - fitted[i]).collect();
    let att_treat: Vec<f64> = (0..n).map(|i| w_treat[i] * resid[i]).collect();
    let att_cont: Vec<f64> = (0..n).map(|i| w_cont[i] * resid[i]).collect();
    let mean_wt = exact_sum(&w_treat) / nf;
    let mean_wc = exact_sum(&w_cont) / nf;
    let eta_treat = exact_sum(&att_treat) / nf / mean_wt;
    let eta_cont = exact_sum(&att_cont) / nf / mean_wc;
    let att = if k == 1 {
        // without covariates the DR estimator is the raw mean difference
        let (t, c): (Vec<f64>, Vec<f64>) = {
            let mut t = Vec::new();
            let mut c = Vec::new();
            for i in 0..n {
                if d[i] == 1.0 { t.push(outcome[i]) } else { c.push(outcome[i]) }
            }
            (t, c)
        };
        exact_sum(&t) / t.len() as f64 - exact_sum(&c) / c.len() as f64
    } else {
        eta_treat - eta_cont
    };

    // influence of the outcome regression and the propensity fit
    let lin_ols: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let s = (1.0 - d[i]) * resid[i];
            &ols_inv * DVector::from_iterator(k, rows[i].iter().map(|r| r * s))
        })
        .collect();
    let lin_ps: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let s = d[i] - ps[i];
            &ps_hinv * DVector::from_iterator(k, rows[i].iter().map(|r| r * s))
        })
        .collect();
    let col_mean = |f: &dyn Fn(usize) -> f64| {
        DVector::from_iterator(
            k,
            (0..k).map(|a| exact_sum(&(0..n).map(|i| f(i) * rows[i][a]).collect::<Vec<_>>()) / nf),
        )
    };
    let m1 = col_mean(&|i| w_treat[i]);
    let m2 = col_mean(&|i| w_cont[i] * (resid[i] - eta_cont));
    let m3 = col_mean(&|i| w_cont[i]);
    let influence: Vec<f64> = (0..n)
        .map(|i| {
            let inf_treat = (att_treat[i] - w_treat[i] * eta_treat - lin_ols[i].dot(&m1)) / mean_wt;
            let inf_cont =
                (att_cont[i] - w_cont[i] * eta_cont + lin_ps[i].dot(&m2) - lin_ols[i].dot(&m3)) / mean_wc;
            inf_treat - inf_cont
        })
        .collect();
    let clusters: Vec<u64> = data.units.iter().map(|u| u.cluster).collect();
    Ok(DrEstimate {
        att,
        se: cluster_se(&influence, &clusters),
        influence,
        n_treated: n1,
        n_control: n - n1,
    })
}

/// Matching DID: DR ATT of the change `Y_t − Y_ref`.
pub fn did_matching(data: &PanelDataset, role: Role) -> Result<DrEstimate, EstimatorError> {
    post_slot(role)?;
    let r = Role::Ref.index();
    let change: Vec<f64> = data.units.iter().map(|u| u.y[role.index()] - u.y[r]).collect();
    doubly_robust_att(&change, data)
}

/// Level matching `θ^M`: DR ATT of the level `Y_t`.
pub fn level_matching(data: &PanelDataset, role: Role) -> Result<DrEstimate, EstimatorError> {
    post_slot(role)?;
    let level: Vec<f64> = data.units.iter().map(|u| u.y[role.index()]).collect();
    doubly_robust_att(&level, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttEstimate {
    pub role: Role,
    pub theta: f64,
    pub theta_m: f64,
    /// `Σ D_i g_i / Σ D_i`.
    pub bias_correction: f64,
    pub se: f64,
    /// Two-step influence per unit in data order.
    pub per_unit_influence: Vec<f64>,
    /// `g_i` per unit in data order.
    pub g: Vec<f64>,
    pub matching: DrEstimate,
}

/// Point estimate only; `se` and `per_unit_influence` carry the matching step's values.
pub fn att_point(
    fit: &FitResult,
    data: &PanelDataset,
    grid: &QuadratureGrid,
    role: Role,
) -> Result<AttEstimate, EstimatorError> {
    if !fit.converged {
        return Err(EstimatorError::NotConverged);
    }
    let matching = level_matching(data, role)?;
    let g = bias_terms(&fit.psi_hat, data, grid, role)?;
    let bias_correction = treated_mean(&g, data);
    Ok(AttEstimate {
        role,
        theta: matching.att - bias_correction,
        theta_m: matching.att,
        bias_correction,
        se: matching.se,
        per_unit_influence: matching.influence.clone(),
        g,
        matching,
    })
}

/// ATT without parallel trends, with the two-step influence-function SE.
pub fn att(
    fit: &FitResult,
    data: &PanelDataset,
    grid: &QuadratureGrid,
    role: Role,
) -> Result<AttEstimate, EstimatorError> {
    let mut est = att_point(fit, data, grid, role)?;
    let (se, decomposition) =
        att_standard_error(fit, data, &est, grid).map_err(|e| EstimatorError::Inference(e.to_string()))?;
    est.se = se;
    est.per_unit_influence = decomposition.total;
    Ok(est)
}

/// Counterfactual `F_{Y_t(0) | D=1}` as a mixture over treated covariate cells.
#[derive(Debug, Clone)]
pub struct CounterfactualCdf {
    params: ModelParams,
    role: Role,
    /// Per cell: covariates, top code, share of treated units, latent node weights.
    cells: Vec<(Vec<f64>, f64, f64, Vec<f64>)>,
    nodes: Vec<(f64, f64)>,
}

impl CounterfactualCdf {
    pub fn new(params: &ModelParams, data: &PanelDataset, grid: &QuadratureGrid, role: Role) -> Result<Self, EstimatorError> {
        post_slot(role)?;
        let n1 = data.n_treated();
        if n1 == 0 {
            return Err(EstimatorError::EmptyGroup("treated"));
        }
        let cells = cells_by_x(data, role, |u| u.d)
            .into_iter()
            .map(|c| {
                let share = c.members.len() as f64 / n1 as f64;
                let w = latent_posterior(params, grid, &c.x, true);
                (c.x, c.cap, share, w)
            })
            .collect();
        Ok(CounterfactualCdf {
            params: params.clone(),
            role,
            cells,
            nodes: grid.nodes().to_vec(),
        })
    }

    pub fn cdf(&self, y: f64) -> f64 {
        let outcome = PostOutcomeModel::new(&self.params, self.role).unwrap();
        let mut acc = 0.0;
        for (x, cap, share, w) in &self.cells {
            let mut inner = 0.0;
            for (k, &u) in self.nodes.iter().enumerate() {
                inner += w[k] * outcome.cdf(y, u, x, *cap).unwrap_or(f64::NAN);
            }
            acc += share * inner;
        }
        acc.clamp(0.0, 1.0)
    }

    /// Mass of the zero atom.
    pub fn atom(&self) -> f64 {
        self.cdf(0.0)
    }

    /// Left-continuous inverse `inf{y : F(y) >= τ}`.
    pub fn quantile(&self, tau: f64) -> f64 {
        if tau <= self.atom() {
            return 0.0;
        }
        let (mut lo, mut hi) = self.log_bracket();
        while self.cdf(hi.exp()) < tau && hi < 700.0 {
            hi += 10.0;
        }
        while self.cdf(lo.exp()) >= tau && lo > -700.0 {
            lo -= 10.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid.exp()) >= tau {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi.exp()
    }

    fn log_bracket(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (x, cap, _, _) in &self.cells {
            for &u in &self.nodes {
                for shifted in [false, true] {
                    let shifts = Shifts {
                        treated: false,
                        other_period_zero: shifted,
                    };
                    if let Ok(ls) = self.params.location_scale(self.role, u, x, shifts) {
                        lo = lo.min(ls.mu - 12.0 * ls.sigma());
                        hi = hi.max(ls.mu + 12.0 * ls.sigma());
                    }
                }
            }
            if cap.is_finite() {
                hi = hi.min(cap.ln());
            }
        }
        (lo.min(hi - 1.0), hi)
    }
}

#[derive(Debug, Clone)]
pub struct QttEstimate {
    pub role: Role,
    pub tau_grid: Vec<f64>,
    pub qtt: Vec<f64>,
    pub observed_quantiles: Vec<f64>,
    pub counterfactual_quantiles: Vec<f64>,
    /// τ inside the counterfactual zero atom, where the quantile is not unique.
    pub in_atom: Vec<bool>,
    pub counterfactual_cdf: CounterfactualCdf,
}

/// Left-continuous empirical quantile of a sorted sample.
pub fn empirical_quantile(sorted: &[f64], tau: f64) -> f64 {
    let n = sorted.len();
    let k = ((tau * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

pub fn qtt(
    fit: &FitResult,
    data: &PanelDataset,
    grid: &QuadratureGrid,
    role: Role,
    tau_grid: &[f64],
) -> Result<QttEstimate, EstimatorError> {
    if !fit.converged {
        return Err(EstimatorError::NotConverged);
    }
    if let Some(&bad) = tau_grid.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(EstimatorError::InvalidTau(bad));
    }
    let cdf = CounterfactualCdf::new(&fit.psi_hat, data, grid, role)?;
    let mut observed: Vec<f64> = data.units.iter().filter(|u| u.d).map(|u| u.y[role.index()]).collect();
    observed.sort_by(f64::total_cmp);
    let atom = cdf.atom();
    let counterfactual: Vec<f64> = tau_grid.par_iter().map(|&t| cdf.quantile(t)).collect();
    let observed_q: Vec<f64> = tau_grid.iter().map(|&t| empirical_quantile(&observed, t)).collect();
    Ok(QttEstimate {
        role,
        tau_grid: tau_grid.to_vec(),
        qtt: observed_q.iter().zip(&counterfactual).map(|(a, b)| a - b).collect(),
        observed_quantiles: observed_q,
        counterfactual_quantiles: counterfactual,
        in_atom: tau_grid.iter().map(|&t| atom > 0.0 && t <= atom).collect(),
        counterfactual_cdf: cdf,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CateEstimate {
    pub role: Role,
    /// `(u, E[Y_t(1) − Y_t(0) | U = u])` on the grid nodes, averaged over the sample's `X`.
    pub curve: Vec<((f64, f64), f64)>,
    /// Average of the curve under the uniform normalized law of `U`.
    pub ate_uniform_prior: f64,
    /// Average under the sample mixture of treated and control latent laws.
    pub ate_sample_mixture: f64,
    pub atu: f64,
    pub att: f64,
    /// `Var(E[Y_t(1) − Y_t(0) | U, X])`, a lower bound on the effect variance.
    pub var_lower_bound: f64,
}

/// Conditional effects from the untreated-outcome fit and the second fit on
/// treated post outcomes.
pub fn cate(
    fit_untreated: &FitResult,
    fit_treated: &FitResult,
    data: &PanelDataset,
    grid: &QuadratureGrid,
    role: Role,
) -> Result<CateEstimate, EstimatorError> {
    if !fit_untreated.converged || !fit_treated.converged {
        return Err(EstimatorError::NotConverged);
    }
    let p0 = &fit_untreated.psi_hat;
    let m0 = PostOutcomeModel::new(p0, role)?;
    let m1 = PostOutcomeModel::new(&fit_treated.psi_hat, role)?;
    let cells = cells_by_x(data, role, |_| true);
    let n = data.len() as f64;
    let nodes = grid.nodes();
    let weights = grid.weights();

    struct CellEffects {
        effect: Vec<f64>,
        w1: Vec<f64>,
        w0: Vec<f64>,
        n_treated: usize,
        n_control: usize,
    }
    let per_cell: Vec<Result<CellEffects, EstimatorError>> = cells
        .par_iter()
        .map(|c| {
            let effect = nodes
                .iter()
                .map(|&u| Ok(m1.mean_level(u, &c.x, c.cap)? - m0.mean_level(u, &c.x, c.cap)?))
                .collect::<Result<Vec<f64>, EstimatorError>>()?;
            let n_treated = c.members.iter().filter(|&&i| data.units[i].d).count();
            Ok(CellEffects {
                effect,
                w1: latent_posterior(p0, grid, &c.x, true),
                w0: latent_posterior(p0, grid, &c.x, false),
                n_treated,
                n_control: c.members.len() - n_treated,
            })
        })
        .collect();
    let per_cell = per_cell.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut curve = vec![0.0; nodes.len()];
    let (mut first, mut second) = (Vec::new(), Vec::new());
    let (mut mix, mut treated, mut untreated) = (Vec::new(), Vec::new(), Vec::new());
    let (n1, n0) = (data.n_treated() as f64, n - data.n_treated() as f64);
    for (cell, eff) in cells.iter().zip(&per_cell) {
        let share = cell.members.len() as f64 / n;
        for k in 0..nodes.len() {
            let e = eff.effect[k];
            curve[k] += share * e;
            first.push(share * weights[k] * e);
            second.push(share * weights[k] * e * e);
            let t = eff.n_treated as f64 * eff.w1[k] * e;
            let c = eff.n_control as f64 * eff.w0[k] * e;
            mix.push((t + c) / n);
            if n1 > 0.0 {
                treated.push(t / n1);
            }
            if n0 > 0.0 {
                untreated.push(c / n0);
            }
        }
    }
    let ate = exact_sum(&first);
    let var = (exact_sum(&second) - ate * ate).max(0.0);
    Ok(CateEstimate {
        role,
        curve: nodes.iter().copied().zip(curve).collect(),
        ate_uniform_prior: ate,
        ate_sample_mixture: exact_sum(&mix),
        atu: if n0 > 0.0 { exact_sum(&untreated) } else { f64::NAN },
        att: if n1 > 0.0 { exact_sum(&treated) } else { f64::NAN },
        var_lower_bound: var,
    })
}

/// One observation of a long panel for the event study.
#[derive(Debug, Clone, PartialEq)]
pub struct EventObs {
    pub unit: u64,
    pub cluster: u64,
    pub period: i64,
    /// Periods since the event (`0` is the last pre-event observation); `None` for controls.
    pub event_time: Option<i64>,
    pub y: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintSet {
    /// `β_k = 0` for every `k < 0`.
    ZeroAllPre,
    /// `Σ_{k<0} β_k = 0` and `Σ_{k<0} β_k (k + 5) = 0`.
    ZeroAverageFlatTrend,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStudyEstimate {
    pub constraint_set: ConstraintSet,
    pub event_times: Vec<i64>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub n_units: usize,
    pub n_obs: usize,
}

/// Basis of `{β : Σβ_k = 0, Σβ_k (k + 5) = 0}` over the sorted pre event times.
fn flat_trend_basis(pre: &[i64]) -> DMatrix<f64> {
    let m = pre.len();
    if m <= 2 {
        return DMatrix::zeros(m, 0);
    }
    let c: Vec<f64> = pre.iter().map(|&k| (k + 5) as f64).collect();
    let mut basis = DMatrix::zeros(m, m - 2);
    for j in 2..m {
        let a = (c[1] - c[j]) / (c[0] - c[1]);
        let col = j - 2;
        basis[(j, col)] = 1.0;
        basis[(0, col)] = a;
        basis[(1, col)] = -1.0 - a;
    }
    basis
}

/// Event study with unit intercepts and unit linear trends, absorbed by
/// within-unit detrending; period effects and covariate-by-period terms.
pub fn event_study_unit_trends(
    obs: &[EventObs],
    constraint_set: ConstraintSet,
) -> Result<EventStudyEstimate, EstimatorError> {
    let (kmin, kmax) = EVENT_WINDOW;
    let in_window = |o: &EventObs| o.event_time.is_none_or(|k| (kmin..=kmax).contains(&k));
    let mut units: BTreeMap<u64, Vec<&EventObs>> = BTreeMap::new();
    for o in obs.iter().filter(|o| in_window(o)) {
        units.entry(o.unit).or_default().push(o);
    }
    let mut event_times: Vec<i64> = obs.iter().filter_map(|o| o.event_time).filter(|k| (kmin..=kmax).contains(k)).collect();
    event_times.sort_unstable();
    event_times.dedup();
    let pre: Vec<i64> = event_times.iter().copied().filter(|&k| k < 0).collect();
    let post: Vec<i64> = event_times.iter().copied().filter(|&k| k >= 0).collect();
    let mut periods: Vec<i64> = obs.iter().filter(|o| in_window(o)).map(|o| o.period).collect();
    periods.sort_unstable();
    periods.dedup();
    let p = obs.first().map_or(0, |o| o.x.len());
    if obs.iter().any(|o| o.x.len() != p) {
        return Err(EstimatorError::Collinear("inconsistent covariate width".into()));
    }
    if post.is_empty() {
        return Err(EstimatorError::Collinear("no post-event observations".into()));
    }

    let basis = match constraint_set {
        ConstraintSet::ZeroAllPre => DMatrix::zeros(pre.len(), 0),
        ConstraintSet::ZeroAverageFlatTrend => flat_trend_basis(&pre),
    };
    // columns: post dummies, constrained pre block, period effects and
    // covariate-by-period terms (first two periods absorbed by the unit line)
    let free_periods: Vec<i64> = periods.iter().copied().skip(2).collect();
    let n_post = post.len();
    let n_pre = basis.ncols();
    let ncol = n_post + n_pre + free_periods.len() * (1 + p);
    let post_pos: BTreeMap<i64, usize> = post.iter().enumerate().map(|(j, &k)| (k, j)).collect();
    let pre_pos: BTreeMap<i64, usize> = pre.iter().enumerate().map(|(j, &k)| (k, j)).collect();
    let period_pos: BTreeMap<i64, usize> = free_periods.iter().enumerate().map(|(j, &t)| (t, j)).collect();

    let raw_row = |o: &EventObs| {
        let mut row = vec![0.0; ncol];
        if let Some(k) = o.event_time {
            if let Some(&j) = post_pos.get(&k) {
                row[j] = 1.0;
            } else if let Some(&j) = pre_pos.get(&k) {
                for c in 0..n_pre {
                    row[n_post + c] = basis[(j, c)];
                }
            }
        }
        if let Some(&j) = period_pos.get(&o.period) {
            let base = n_post + n_pre + j * (1 + p);
            row[base] = 1.0;
            row[base + 1..base + 1 + p].copy_from_slice(&o.x);
        }
        row
    };
    // residuals of each column and y on (1, t) within a unit
    let detrended = |members: &[&EventObs]| -> (Vec<Vec<f64>>, Vec<f64>) {
        let m = members.len() as f64;
        let t: Vec<f64> = members.iter().map(|o| o.period as f64).collect();
        let tbar = t.iter().sum::<f64>() / m;
        let stt: f64 = t.iter().map(|v| (v - tbar) * (v - tbar)).sum();
        let project = |v: &[f64]| -> Vec<f64> {
            let vbar = v.iter().sum::<f64>() / m;
            let slope = if stt > 0.0 {
                t.iter().zip(v).map(|(ti, vi)| (ti - tbar) * (vi - vbar)).sum::<f64>() / stt
            } else {
                0.0
            };
            t.iter().zip(v).map(|(ti, vi)| vi - vbar - slope * (ti - tbar)).collect()
        };
        let rows: Vec<Vec<f64>> = members.iter().map(|o| raw_row(o)).collect();
        let mut cols = vec![vec![0.0; members.len()]; ncol];
        for (r, row) in rows.iter().enumerate() {
            for c in 0..ncol {
                cols[c][r] = row[c];
            }
        }
        let cols: Vec<Vec<f64>> = cols.iter().map(|c| project(c)).collect();
        let y = project(&members.iter().map(|o| o.y).collect::<Vec<_>>());
        let out_rows = (0..members.len()).map(|r| (0..ncol).map(|c| cols[c][r]).collect()).collect();
        (out_rows, y)
    };

    let mut xtx = DMatrix::<f64>::zeros(ncol, ncol);
    let mut xty = DVector::<f64>::zeros(ncol);
    for members in units.values() {
        let (rows, y) = detrended(members);
        for (row, yi) in rows.iter().zip(&y) {
            for a in 0..ncol {
                if row[a] == 0.0 {
                    continue;
                }
                xty[a] += row[a] * yi;
                for b in 0..ncol {
                    xtx[(a, b)] += row[a] * row[b];
                }
            }
        }
    }
    let svd = xtx.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
    if rank < ncol {
        return Err(EstimatorError::Collinear(format!(
            "rank {rank} of {ncol} after within-unit detrending"
        )));
    }
    let a_inv = xtx
        .try_inverse()
        .ok_or(EstimatorError::Singular("event-study normal equations"))?;
    let coef = &a_inv * &xty;

    let mut meat = DMatrix::<f64>::zeros(ncol, ncol);
    let mut by_cluster: BTreeMap<u64, DVector<f64>> = BTreeMap::new();
    for members in units.values() {
        let (rows, y) = detrended(members);
        let cluster = members[0].cluster;
        let score = by_cluster.entry(cluster).or_insert_with(|| DVector::zeros(ncol));
        for (row, yi) in rows.iter().zip(&y) {
            let e = yi - row.iter().zip(coef.iter()).map(|(a, b)| a * b).sum::<f64>();
            for a in 0..ncol {
                score[a] += row[a] * e;
            }
        }
    }
    for s in by_cluster.values() {
        meat += s * s.transpose();
    }
    let vcov = &a_inv * meat * &a_inv;

    let mut beta = Vec::with_capacity(event_times.len());
    let mut se = Vec::with_capacity(event_times.len());
    let pre_block = vcov.view((n_post, n_post), (n_pre, n_pre)).into_owned();
    let theta = coef.rows(n_post, n_pre).into_owned();
    let pre_beta = &basis * &theta;
    let pre_var = &basis * pre_block * basis.transpose();
    for (j, _) in pre.iter().enumerate() {
        beta.push(pre_beta[j]);
        se.push(pre_var[(j, j)].max(0.0).sqrt());
    }
    for j in 0..n_post {
        beta.push(coef[j]);
        se.push(vcov[(j, j)].max(0.0).sqrt());
    }
    Ok(EventStudyEstimate {
        constraint_set,
        event_times,
        beta,
        se,
        n_units: units.len(),
        n_obs: units.values().map(Vec::len).sum(),
    })
}
