//! Integrated per-unit log-likelihood over the latent unit square and its
//! analytic gradient.
//!
//! At each quadrature node the exponent is the sum of the pre-period cell,
//! the reference cell, `ln P(D = d)`, and, for units in the post-block arm,
//! the zero-pattern probability plus the post cell. A unit's value is the
//! log of the weighted node sum of `exp(exponent)`.

use rayon::prelude::*;
use thiserror::Error;

use crate::basis::{chebyshev_tensor, log_logistic_with_grad};
use crate::exact_sum::{ExactSum, ExactVecSum};
use crate::model::{
    Block, ModelParams, PanelDataset, ParamLayout, Role, UnitRecord, ZeroLayerState, N_CHEB,
    N_ROLES, N_ZERO_LAYERS,
};
use crate::quadrature::QuadratureGrid;
use crate::sieve::{
    bivariate_cell_with, BivariateKernel, CellObs, LocationScale, UnivariateKernel,
    LOG_ZERO_SENTINEL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("likelihood underflows at every quadrature node for units {units:?}")]
    NonFinite { units: Vec<u64> },
    #[error("covariate width {got} does not match parameter width {expected}")]
    CovariateWidth { expected: usize, got: usize },
    #[error("dataset is empty")]
    Empty,
}

/// Which treatment arm contributes the post-period block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Arm {
    /// Untreated post outcomes: the first-step model.
    #[default]
    Control,
    /// Treated post outcomes: the second-step fit of `Y(1)` laws.
    Treated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitLoglik {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Number of partially linear indices: treatment, `μ_t`, `ln σ_t`, zero layers.
const N_INDEX: usize = 1 + 2 * N_ROLES + N_ZERO_LAYERS;
const I_TREAT: usize = 0;
const I_MU: usize = 1;
const I_SIG: usize = 1 + N_ROLES;
const I_ZERO: usize = 1 + 2 * N_ROLES;
const N_OMEGA: usize = 14 + 4 + 14;

fn index_block(k: usize) -> Block {
    match k {
        I_TREAT => Block::Treatment,
        k if k < I_SIG => Block::Mu(Role::ALL[k - I_MU]),
        k if k < I_ZERO => Block::LogSigma(Role::ALL[k - I_SIG]),
        k => Block::ZeroLayer(k - I_ZERO),
    }
}

fn params_index(params: &ModelParams, k: usize) -> &crate::model::Index {
    match k {
        I_TREAT => &params.treatment,
        k if k < I_SIG => &params.mu[k - I_MU],
        k if k < I_ZERO => &params.log_sigma[k - I_SIG],
        k => &params.zero[k - I_ZERO],
    }
}

/// A unit in likelihood-ready form: log outcomes routed to interior or
/// censored cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedUnit {
    pub id: u64,
    pub d: bool,
    pub x: Vec<f64>,
    pub obs: [CellObs; N_ROLES],
    pub z: [bool; 2],
    pub post: bool,
}

impl PreparedUnit {
    pub fn new(unit: &UnitRecord, arm: Arm) -> Self {
        let obs = std::array::from_fn(|t| {
            let role = Role::ALL[t];
            if role.is_post() && unit.is_zero(role) {
                CellObs::Above(f64::NEG_INFINITY)
            } else if unit.is_top_coded(role) {
                CellObs::Above(unit.top_code[t].ln())
            } else {
                CellObs::Interior(unit.y[t].ln())
            }
        });
        PreparedUnit {
            id: unit.id,
            d: unit.d,
            x: unit.x.clone(),
            obs,
            z: [unit.is_zero(Role::Post1), unit.is_zero(Role::Post2)],
            post: unit.d == (arm == Arm::Treated),
        }
    }
}

/// Precomputed grid and units for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub struct LikelihoodContext {
    tensor: Vec<[f64; N_CHEB]>,
    weights: Vec<f64>,
    units: Vec<PreparedUnit>,
    p: usize,
}

/// Scratch buffers reused across units within one thread.
struct Scratch {
    ell: Vec<f64>,
    g: Vec<[f64; N_INDEX]>,
    omega: Vec<[f64; N_OMEGA]>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Scratch {
            ell: vec![0.0; n],
            g: vec![[0.0; N_INDEX]; n],
            omega: vec![[0.0; N_OMEGA]; n],
        }
    }
}

/// Per-evaluation quantities shared across units.
struct EvalPlan<'a> {
    params: &'a ModelParams,
    u_parts: Vec<[f64; N_INDEX]>,
    layout: ParamLayout,
    pre: BivariateKernel,
    reference: UnivariateKernel,
    post: BivariateKernel,
}

impl LikelihoodContext {
    /// Units are held sorted by id.
    pub fn new(data: &PanelDataset, grid: &QuadratureGrid, arm: Arm) -> Self {
        let mut units: Vec<PreparedUnit> =
            data.units.iter().map(|u| PreparedUnit::new(u, arm)).collect();
        units.sort_by_key(|u| u.id);
        LikelihoodContext {
            tensor: grid
                .nodes()
                .iter()
                .map(|&(a, b)| chebyshev_tensor(a, b))
                .collect(),
            weights: grid.weights().to_vec(),
            units,
            p: data.n_covariates(),
        }
    }

    pub fn units(&self) -> &[PreparedUnit] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    fn plan<'a>(&self, params: &'a ModelParams) -> Result<EvalPlan<'a>, LikelihoodError> {
        if params.n_covariates() != self.p {
            return Err(LikelihoodError::CovariateWidth {
                expected: params.n_covariates(),
                got: self.p,
            });
        }
        let u_parts = self
            .tensor
            .iter()
            .map(|t| std::array::from_fn(|k| params_index(params, k).u_part(t)))
            .collect();
        Ok(EvalPlan {
            params,
            u_parts,
            layout: params.layout(),
            pre: BivariateKernel::new(&params.omega_pre),
            reference: UnivariateKernel::new(&params.omega_0),
            post: BivariateKernel::new(&params.omega_post),
        })
    }

    /// Log-likelihood of one prepared unit, with gradient when requested.
    fn eval_unit(
        &self,
        plan: &EvalPlan,
        unit: &PreparedUnit,
        want_grad: bool,
        scratch: &mut Scratch,
    ) -> Result<(f64, Option<Vec<f64>>), LikelihoodError> {
        let params = plan.params;
        let xp: [f64; N_INDEX] = std::array::from_fn(|k| params_index(params, k).x_part(&unit.x));
        let n_nodes = self.tensor.len();
        let d = unit.d;
        let (z1, z2) = (unit.z[0], unit.z[1]);
        let pre = [Role::Pre1.index(), Role::Pre2.index()];
        let post = [Role::Post1.index(), Role::Post2.index()];
        let r = Role::Ref.index();
        let zero_layers = [(0usize, z1), (if z1 { 2 } else { 1 }, z2)];
        let both_zero = z1 && z2;

        for n in 0..n_nodes {
            let up = &plan.u_parts[n];
            let ix = |k: usize| up[k] + xp[k];
            let mut g = [0.0; N_INDEX];
            let mut om = [0.0; N_OMEGA];

            let pre_ls = pre.map(|t| {
                LocationScale::from_log_sigma(ix(I_MU + t), ix(I_SIG + t))
            });
            let cell = bivariate_cell_with([unit.obs[pre[0]], unit.obs[pre[1]]], pre_ls, &plan.pre);
            let mut ell = cell.value;
            for c in 0..2 {
                g[I_MU + pre[c]] = cell.d_mu[c];
                g[I_SIG + pre[c]] = cell.d_log_sigma[c];
            }
            om[..14].copy_from_slice(&cell.d_omega);

            let (mut mu0, mut ls0) = (ix(I_MU + r), ix(I_SIG + r));
            if d {
                mu0 += params.d_shift_mu0;
                ls0 += params.d_shift_sigma0;
            }
            let cell = crate::sieve::univariate_cell_with(
                unit.obs[r],
                LocationScale::from_log_sigma(mu0, ls0),
                &plan.reference,
            );
            ell += cell.value;
            g[I_MU + r] = cell.d_mu;
            g[I_SIG + r] = cell.d_log_sigma;
            om[14..18].copy_from_slice(&cell.d_omega);

            let s = ix(I_TREAT);
            let (lp, dp) = if d {
                log_logistic_with_grad(s)
            } else {
                let (lp, dp) = log_logistic_with_grad(-s);
                (lp, -dp)
            };
            ell += lp;
            g[I_TREAT] = dp;

            if unit.post {
                for &(layer, z) in &zero_layers {
                    match params.zero_state[layer] {
                        ZeroLayerState::Active => {
                            let s = ix(I_ZERO + layer);
                            let (lp, dp) = if z {
                                log_logistic_with_grad(s)
                            } else {
                                let (lp, dp) = log_logistic_with_grad(-s);
                                (lp, -dp)
                            };
                            ell += lp;
                            g[I_ZERO + layer] = dp;
                        }
                        ZeroLayerState::NeverZero if z => ell = LOG_ZERO_SENTINEL,
                        ZeroLayerState::AlwaysZero if !z => ell = LOG_ZERO_SENTINEL,
                        _ => {}
                    }
                }
                if !both_zero {
                    let shift = [z2, z1];
                    let ls = [0, 1].map(|c| {
                        let (mut m, mut l) = (ix(I_MU + post[c]), ix(I_SIG + post[c]));
                        if shift[c] {
                            m += params.z_shift_mu[c];
                            l += params.z_shift_sigma[c];
                        }
                        LocationScale::from_log_sigma(m, l)
                    });
                    let cell =
                        bivariate_cell_with([unit.obs[post[0]], unit.obs[post[1]]], ls, &plan.post);
                    ell += cell.value;
                    for c in 0..2 {
                        g[I_MU + post[c]] = cell.d_mu[c];
                        g[I_SIG + post[c]] = cell.d_log_sigma[c];
                    }
                    om[18..].copy_from_slice(&cell.d_omega);
                }
            }
            if ell < LOG_ZERO_SENTINEL {
                ell = LOG_ZERO_SENTINEL;
            }
            scratch.ell[n] = ell;
            scratch.g[n] = g;
            scratch.omega[n] = om;
        }

        let m = scratch.ell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(m > 0.5 * LOG_ZERO_SENTINEL) || !m.is_finite() {
            return Err(LikelihoodError::NonFinite {
                units: vec![unit.id],
            });
        }
        let mut total = 0.0;
        for n in 0..n_nodes {
            let w = self.weights[n] * (scratch.ell[n] - m).exp();
            scratch.ell[n] = w;
            total += w;
        }
        let value = m + total.ln();
        if !want_grad {
            return Ok((value, None));
        }

        // posterior node weights π_n now live in scratch.ell
        let mut gsum = [0.0; N_INDEX];
        let mut alpha = [[0.0; N_CHEB]; N_INDEX];
        let mut osum = [0.0; N_OMEGA];
        for n in 0..n_nodes {
            let pi = scratch.ell[n] / total;
            if pi == 0.0 {
                continue;
            }
            let t = &self.tensor[n];
            for k in 0..N_INDEX {
                let gk = pi * scratch.g[n][k];
                if gk != 0.0 {
                    gsum[k] += gk;
                    for j in 0..N_CHEB {
                        alpha[k][j] += gk * t[j];
                    }
                }
            }
            for (o, v) in osum.iter_mut().zip(&scratch.omega[n]) {
                *o += pi * v;
            }
        }

        let layout = &plan.layout;
        let mut grad = vec![0.0; layout.len()];
        for k in 0..N_INDEX {
            let start = layout.range(index_block(k)).start;
            grad[start..start + N_CHEB].copy_from_slice(&alpha[k]);
            for (b, xv) in unit.x.iter().enumerate() {
                grad[start + N_CHEB + b] = gsum[k] * xv;
            }
        }
        if d {
            grad[layout.ref_shift()] = gsum[I_MU + r];
            grad[layout.ref_shift() + 1] = gsum[I_SIG + r];
        }
        if unit.post {
            let zs = layout.zero_shift();
            if z2 && !z1 {
                grad[zs] = gsum[I_MU + post[0]];
                grad[zs + 2] = gsum[I_SIG + post[0]];
            }
            if z1 && !z2 {
                grad[zs + 1] = gsum[I_MU + post[1]];
                grad[zs + 3] = gsum[I_SIG + post[1]];
            }
        }
        grad[layout.omega_pre()..].copy_from_slice(&osum);
        Ok((value, Some(grad)))
    }

    pub fn unit_loglik(&self, params: &ModelParams, i: usize) -> Result<UnitLoglik, LikelihoodError> {
        let plan = self.plan(params)?;
        let mut scratch = Scratch::new(self.tensor.len());
        let (value, grad) = self.eval_unit(&plan, &self.units[i], true, &mut scratch)?;
        Ok(UnitLoglik {
            value,
            gradient: grad.unwrap(),
        })
    }

    /// Sum of unit values; the sum is correctly rounded so it does not depend
    /// on unit order or thread count.
    pub fn value(&self, params: &ModelParams) -> Result<f64, LikelihoodError> {
        let plan = self.plan(params)?;
        let n_nodes = self.tensor.len();
        let results: Vec<Result<f64, LikelihoodError>> = self
            .units
            .par_iter()
            .map_init(
                || Scratch::new(n_nodes),
                |scratch, unit| self.eval_unit(&plan, unit, false, scratch).map(|r| r.0),
            )
            .collect();
        let mut sum = ExactSum::new();
        let mut failed = Vec::new();
        for r in results {
            match r {
                Ok(v) => sum.add(v),
                Err(LikelihoodError::NonFinite { units }) => failed.extend(units),
                Err(e) => return Err(e),
            }
        }
        if !failed.is_empty() {
            return Err(LikelihoodError::NonFinite { units: failed });
        }
        Ok(sum.value())
    }

    /// Total log-likelihood and gradient.
    pub fn value_and_gradient(
        &self,
        params: &ModelParams,
    ) -> Result<(f64, Vec<f64>), LikelihoodError> {
        let plan = self.plan(params)?;
        let n_nodes = self.tensor.len();
        let dim = plan.layout.len();
        type Acc = (ExactSum, ExactVecSum, Vec<u64>);
        let (sum, grad, failed) = self
            .units
            .par_iter()
            .fold(
                || {
                    (
                        Scratch::new(n_nodes),
                        (ExactSum::new(), ExactVecSum::zeros(dim), Vec::new()),
                    )
                },
                |(mut scratch, mut acc): (Scratch, Acc), unit| {
                    match self.eval_unit(&plan, unit, true, &mut scratch) {
                        Ok((v, g)) => {
                            acc.0.add(v);
                            acc.1.add(&g.unwrap());
                        }
                        Err(_) => acc.2.push(unit.id),
                    }
                    (scratch, acc)
                },
            )
            .map(|(_, acc)| acc)
            .reduce(
                || (ExactSum::new(), ExactVecSum::zeros(dim), Vec::new()),
                |mut a, b| {
                    a.0.merge(&b.0);
                    a.1.merge(&b.1);
                    a.2.extend(b.2);
                    a
                },
            );
        if !failed.is_empty() {
            let mut units = failed;
            units.sort_unstable();
            return Err(LikelihoodError::NonFinite { units });
        }
        Ok((sum.value(), grad.values()))
    }

    /// Per-unit scores in unit-id order.
    pub fn unit_scores(&self, params: &ModelParams) -> Result<Vec<UnitLoglik>, LikelihoodError> {
        let plan = self.plan(params)?;
        let n_nodes = self.tensor.len();
        self.units
            .par_iter()
            .map_init(
                || Scratch::new(n_nodes),
                |scratch, unit| {
                    self.eval_unit(&plan, unit, true, scratch)
                        .map(|(value, g)| UnitLoglik {
                            value,
                            gradient: g.unwrap(),
                        })
                },
            )
            .collect()
    }

    /// Posterior node weights `π_n ∝ w_n exp(exponent_n)` for one unit.
    pub fn posterior_weights(
        &self,
        params: &ModelParams,
        i: usize,
    ) -> Result<Vec<f64>, LikelihoodError> {
        let plan = self.plan(params)?;
        let mut scratch = Scratch::new(self.tensor.len());
        self.eval_unit(&plan, &self.units[i], false, &mut scratch)?;
        let total: f64 = scratch.ell.iter().sum();
        Ok(scratch.ell.iter().map(|w| w / total).collect())
    }
}

/// Log-likelihood of a single unit on `grid`.
pub fn unit_loglik(
    params: &ModelParams,
    unit: &UnitRecord,
    grid: &QuadratureGrid,
) -> Result<UnitLoglik, LikelihoodError> {
    let data = PanelDataset {
        covariate_names: vec![String::new(); unit.x.len()],
        units: vec![unit.clone()],
    };
    LikelihoodContext::new(&data, grid, Arm::Control).unit_loglik(params, 0)
}

/// Sum of unit log-likelihoods and its gradient.
pub fn total_loglik(
    params: &ModelParams,
    data: &PanelDataset,
    grid: &QuadratureGrid,
) -> Result<(f64, Vec<f64>), LikelihoodError> {
    if data.is_empty() {
        return Err(LikelihoodError::Empty);
    }
    LikelihoodContext::new(data, grid, Arm::Control).value_and_gradient(params)
}

/// `ln Σ w_n exp(e_n)`, shifted by the largest exponent.
pub fn log_sum_exp_weighted(exponents: &[f64], weights: &[f64]) -> f64 {
    let m = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = exponents
        .iter()
        .zip(weights)
        .map(|(e, w)| w * (e - m).exp())
        .sum();
    m + s.ln()
}
