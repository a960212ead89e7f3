//! First-step maximum likelihood: warm starts, multistart L-BFGS, the
//! finite-difference Hessian of the mean log-likelihood, and the
//! analytic-versus-numeric score check.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::likelihood::{Arm, LikelihoodContext, LikelihoodError};
use crate::model::{Block, ModelParams, PanelDataset, ParamLayout, Role, ZeroLayerState, N_CHEB};
use crate::optim::{lbfgs_minimize, LbfgsOptions, LbfgsOutcome, LbfgsStatus};
use crate::quadrature::QuadratureGrid;
use crate::rng::replication_seed;

#[derive(Debug, Error)]
pub enum MleError {
    #[error("no start reached the gradient tolerance (best relative gradient norm {})", best.gradient_norm)]
    NotConverged { best: Box<FitResult> },
    #[error("every start failed to evaluate the likelihood: {0}")]
    AllStartsFailed(LikelihoodError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub starts: usize,
    /// Relative gradient norm `‖∇f‖ / max(1, |f|)` of the mean negative log-likelihood.
    pub grad_tol: f64,
    /// Relative objective change that counts as a stall when repeated over three iterations.
    pub obj_tol: f64,
    pub max_iter: usize,
    pub lbfgs_memory: usize,
    pub grid_nodes: usize,
    /// Extra positions held at their start values, on top of structural zeros.
    pub fixed_mask: Option<Vec<bool>>,
    pub seed: u64,
    /// Standard deviation of the Gaussian perturbation for starts after the first.
    pub start_noise: f64,
    pub compute_hessian: bool,
    /// Arm whose post outcomes enter the likelihood.
    pub arm: Arm,
    /// Replaces the data-driven warm start as start 0.
    pub initial: Option<ModelParams>,
    /// Newton steps on the finite-difference Hessian after L-BFGS stops short of the tolerance.
    pub newton_polish_steps: usize,
    /// Rescale each start by its finite-difference Hessian before L-BFGS.
    pub precondition: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            starts: 5,
            grad_tol: 1e-6,
            obj_tol: 1e-10,
            max_iter: 3000,
            lbfgs_memory: 10,
            grid_nodes: QuadratureGrid::DEFAULT_NODES_PER_DIM,
            fixed_mask: None,
            seed: 0,
            start_noise: 0.1,
            compute_hessian: true,
            arm: Arm::Control,
            initial: None,
            newton_polish_steps: 8,
            precondition: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StartSummary {
    pub initial_loglik: f64,
    pub final_loglik: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub psi_hat: ModelParams,
    pub loglik: f64,
    pub gradient_norm: f64,
    /// Free (estimated) positions of the flat layout.
    pub free: Vec<usize>,
    /// Hessian of the mean log-likelihood over the free positions.
    pub hessian: Option<DMatrix<f64>>,
    /// Largest `|H - Hᵀ|` entry of the raw finite-difference Hessian.
    pub hessian_asymmetry: f64,
    pub converged: bool,
    pub rank_deficient: bool,
    pub starts: usize,
    pub per_start_logliks: Vec<f64>,
    pub per_start: Vec<StartSummary>,
    pub n_units: usize,
    pub grid_nodes: usize,
    pub arm: Arm,
    pub log: Vec<String>,
}

impl FitResult {
    /// `E[∇s]⁻¹` over the free positions.
    pub fn hessian_inverse(&self) -> Option<DMatrix<f64>> {
        self.hessian.as_ref()?.clone().try_inverse()
    }

    /// Asymptotic standard errors per flat position, from `-(N·H)⁻¹`; fixed positions get 0.
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        let inv = self.hessian_inverse()?;
        let mut se = vec![0.0; self.psi_hat.layout().len()];
        for (a, &k) in self.free.iter().enumerate() {
            se[k] = (-inv[(a, a)] / self.n_units as f64).max(0.0).sqrt();
        }
        Some(se)
    }

    pub fn fit_log(&self) -> String {
        self.log.join("\n")
    }
}

/// Positions held fixed: structural zeros, zero layers and shifts the arm's
/// data cannot identify, plus any user mask.
pub fn fixed_positions(params: &ModelParams, data: &PanelDataset, arm: Arm, user: Option<&[bool]>) -> Vec<bool> {
    let layout = params.layout();
    let mut fixed = vec![false; layout.len()];
    for k in layout.structural_zeros() {
        fixed[k] = true;
    }
    for layer in 0..3 {
        if params.zero_state[layer] != ZeroLayerState::Active {
            for k in layout.range(Block::ZeroLayer(layer)) {
                fixed[k] = true;
            }
        }
    }
    let treated = arm == Arm::Treated;
    let arm_units = data.units.iter().filter(|u| u.d == treated);
    let (mut post1_shifted, mut post2_shifted) = (false, false);
    for u in arm_units {
        let (z1, z2) = (u.is_zero(Role::Post1), u.is_zero(Role::Post2));
        post1_shifted |= z2 && !z1;
        post2_shifted |= z1 && !z2;
    }
    let zs = layout.zero_shift();
    if !post1_shifted {
        fixed[zs] = true;
        fixed[zs + 2] = true;
    }
    if !post2_shifted {
        fixed[zs + 1] = true;
        fixed[zs + 3] = true;
    }
    if !data.units.iter().any(|u| u.d) || data.units.iter().all(|u| u.d) {
        fixed[layout.ref_shift()] = true;
        fixed[layout.ref_shift() + 1] = true;
    }
    if let Some(mask) = user {
        for (f, &m) in fixed.iter_mut().zip(mask) {
            *f |= m;
        }
    }
    fixed
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var)
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-4, 1.0 - 1e-4);
    (p / (1.0 - p)).ln()
}

/// Latent scores from the two pre periods: standardized `ln Y_pre1` and the
/// standardized residual of `ln Y_pre2` on it, one pair per unit.
fn latent_scores(data: &PanelDataset) -> Vec<(f64, f64)> {
    let l1: Vec<f64> = data.units.iter().map(|u| u.y[Role::Pre1.index()].ln()).collect();
    let l2: Vec<f64> = data.units.iter().map(|u| u.y[Role::Pre2.index()].ln()).collect();
    let (m1, v1) = mean_var(&l1);
    let (m2, _) = mean_var(&l2);
    let sd1 = v1.sqrt().max(1e-12);
    let s1: Vec<f64> = l1.iter().map(|y| (y - m1) / sd1).collect();
    let slope = l2.iter().zip(&s1).map(|(y, s)| (y - m2) * s).sum::<f64>() / l1.len() as f64;
    let resid: Vec<f64> = l2.iter().zip(&s1).map(|(y, s)| y - m2 - slope * s).collect();
    let (_, vr) = mean_var(&resid);
    let sdr = vr.sqrt().max(1e-12);
    s1.into_iter().zip(resid.iter().map(|r| r / sdr)).collect()
}

/// Location and log-scale moments of one role over the selected units,
/// loaded on `T_1(u1)` and `T_1(u2)` through the latent scores.
fn role_moments(
    data: &PanelDataset,
    scores: &[(f64, f64)],
    role: Role,
    keep: impl Fn(&crate::model::UnitRecord) -> bool,
) -> Option<(f64, f64, f64, f64)> {
    let t = role.index();
    let mut ys = Vec::new();
    let mut ss = Vec::new();
    for (u, s) in data.units.iter().zip(scores) {
        if keep(u) && u.y[t] > 0.0 {
            ys.push(u.y[t].ln());
            ss.push(*s);
        }
    }
    if ys.len() < 2 {
        return None;
    }
    let (m, var) = mean_var(&ys);
    let n = ys.len() as f64;
    let (ms1, _) = mean_var(&ss.iter().map(|s| s.0).collect::<Vec<_>>());
    let (ms2, _) = mean_var(&ss.iter().map(|s| s.1).collect::<Vec<_>>());
    let b1 = ys.iter().zip(&ss).map(|(y, s)| (y - m) * (s.0 - ms1)).sum::<f64>() / n;
    let b2 = ys.iter().zip(&ss).map(|(y, s)| (y - m) * (s.1 - ms2)).sum::<f64>() / n;
    Some((m, var, b1, b2))
}

const LOADING_SHRINK: f64 = 0.9;

fn set_location_scale(params: &mut ModelParams, role: Role, moments: (f64, f64, f64, f64)) {
    let (m, var, b1, mut b2) = moments;
    if role == Role::Pre1 {
        b2 = 0.0;
    }
    let t = role.index();
    let sqrt3 = 3f64.sqrt();
    let mu = &mut params.mu[t];
    mu.alpha = [0.0; 10];
    mu.alpha[0] = m;
    mu.alpha[1] = LOADING_SHRINK * sqrt3 * b1;
    mu.alpha[2] = LOADING_SHRINK * sqrt3 * b2;
    mu.beta.iter_mut().for_each(|b| *b = 0.0);
    let explained = LOADING_SHRINK * LOADING_SHRINK * (b1 * b1 + b2 * b2);
    let resid = (var - explained).max(0.05 * var).max(1e-8);
    let ls = &mut params.log_sigma[t];
    ls.alpha = [0.0; 10];
    ls.alpha[0] = 0.5 * resid.ln();
    ls.beta.iter_mut().for_each(|b| *b = 0.0);
}

/// Data-driven start: location and scale moments per role loaded on the
/// first Chebyshev term of each latent coordinate, logit intercepts at
/// sample shares, zero shape weights.
pub fn warm_start(data: &PanelDataset, arm: Arm) -> ModelParams {
    let p = data.n_covariates();
    let mut params = ModelParams::zeros(p);
    let scores = latent_scores(data);
    for role in [Role::Pre2, Role::Pre1] {
        if let Some(m) = role_moments(data, &scores, role, |_| true) {
            set_location_scale(&mut params, role, m);
        }
    }
    if let Some(m) = role_moments(data, &scores, Role::Ref, |u| !u.d) {
        set_location_scale(&mut params, Role::Ref, m);
    }
    let treated_ref = data
        .units
        .iter()
        .filter(|u| u.d)
        .map(|u| u.y[Role::Ref.index()].ln())
        .collect::<Vec<_>>();
    if !treated_ref.is_empty() {
        params.d_shift_mu0 = mean_var(&treated_ref).0 - params.mu[Role::Ref.index()].alpha[0];
    }
    let share = data.n_treated() as f64 / data.len().max(1) as f64;
    params.treatment.alpha[0] = logit(share);
    set_post_start(&mut params, data, &scores, arm);
    params
}

fn set_post_start(params: &mut ModelParams, data: &PanelDataset, scores: &[(f64, f64)], arm: Arm) {
    let treated = arm == Arm::Treated;
    for role in [Role::Post1, Role::Post2] {
        if let Some(m) = role_moments(data, scores, role, |u| u.d == treated) {
            set_location_scale(params, role, m);
        }
    }
    params.zero_state = data.zero_layer_states(treated);
    let arm_units: Vec<_> = data.units.iter().filter(|u| u.d == treated).collect();
    let z1: Vec<bool> = arm_units.iter().map(|u| u.is_zero(Role::Post1)).collect();
    let z2: Vec<bool> = arm_units.iter().map(|u| u.is_zero(Role::Post2)).collect();
    let share = |sel: &dyn Fn(usize) -> bool, ev: &dyn Fn(usize) -> bool| {
        let idx: Vec<usize> = (0..arm_units.len()).filter(|&i| sel(i)).collect();
        if idx.is_empty() {
            0.5
        } else {
            idx.iter().filter(|&&i| ev(i)).count() as f64 / idx.len() as f64
        }
    };
    let shares = [
        share(&|_| true, &|i| z1[i]),
        share(&|i| !z1[i], &|i| z2[i]),
        share(&|i| z1[i], &|i| z2[i]),
    ];
    for (layer, s) in shares.into_iter().enumerate() {
        params.zero[layer] = crate::model::Index::constant(logit(s), params.n_covariates());
    }
    params.z_shift_mu = [0.0; 2];
    params.z_shift_sigma = [0.0; 2];
    params.omega_post = crate::sieve::BivariateShape::zero();
}

/// Start for the treated-outcome fit: every block from `first`, post blocks
/// re-initialized from the treated units.
pub fn treated_arm_start(first: &ModelParams, data: &PanelDataset) -> ModelParams {
    let mut params = first.clone();
    let scores = latent_scores(data);
    set_post_start(&mut params, data, &scores, Arm::Treated);
    params
}

/// Mask freezing every block except the post-outcome blocks.
pub fn non_post_mask(layout: &ParamLayout) -> Vec<bool> {
    let mut mask = vec![true; layout.len()];
    for block in ParamLayout::post_blocks() {
        for k in layout.range(block) {
            mask[k] = false;
        }
    }
    mask
}

/// Mean negative log-likelihood over the free positions.
struct Objective<'a> {
    ctx: &'a LikelihoodContext,
    template: ModelParams,
    base: Vec<f64>,
    free: Vec<usize>,
    n: f64,
}

impl Objective<'_> {
    fn params(&self, theta: &[f64]) -> ModelParams {
        let mut flat = self.base.clone();
        for (&k, &v) in self.free.iter().zip(theta) {
            flat[k] = v;
        }
        ModelParams::from_flat(&self.template, &flat).expect("layout length")
    }

    fn theta(&self, params: &ModelParams) -> Vec<f64> {
        let flat = params.to_flat();
        self.free.iter().map(|&k| flat[k]).collect()
    }

    fn value(&self, theta: &[f64]) -> Option<f64> {
        let v = self.ctx.value(&self.params(theta)).ok()?;
        v.is_finite().then_some(-v / self.n)
    }

    fn value_grad(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (v, g) = self.ctx.value_and_gradient(&self.params(theta)).ok()?;
        if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return None;
        }
        Some((
            -v / self.n,
            self.free.iter().map(|&k| -g[k] / self.n).collect(),
        ))
    }
}

impl Objective<'_> {
    /// Central-difference Hessian of the objective.
    /// Finite-difference Hessian of the objective: central differences, or
    /// forward differences from `base` (the gradient at `theta`) at half the cost.
    fn hessian_with(&self, theta: &[f64], base: Option<&[f64]>) -> Option<DMatrix<f64>> {
        let m = theta.len();
        let cols: Vec<Option<Vec<f64>>> = (0..m)
            .into_par_iter()
            .map(|k| {
                let h = 1e-5 * theta[k].abs().max(1.0);
                let mut a = theta.to_vec();
                a[k] += h;
                let (_, ga) = self.value_grad(&a)?;
                if let Some(g0) = base {
                    return Some(ga.iter().zip(g0).map(|(x, y)| (x - y) / h).collect());
                }
                let mut b = theta.to_vec();
                b[k] -= h;
                let (_, gb) = self.value_grad(&b)?;
                Some(ga.iter().zip(&gb).map(|(x, y)| (x - y) / (2.0 * h)).collect())
            })
            .collect();
        let mut hm = DMatrix::zeros(m, m);
        for (c, col) in cols.into_iter().enumerate() {
            for (r, v) in col?.into_iter().enumerate() {
                hm[(r, c)] = v;
            }
        }
        Some((&hm + hm.transpose()) * 0.5)
    }

    fn hessian(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        self.hessian_with(theta, None)
    }

    /// L-BFGS in coordinates `x = x0 + T z` with `Tᵀ H T ≈ I` for the
    /// eigenvalue-floored Hessian `H` at `x0`; results are mapped back.
    fn preconditioned_lbfgs(&self, x0: &[f64], options: &LbfgsOptions) -> Option<LbfgsOutcome> {
        let m = x0.len();
        let h = self
            .value_grad(x0)
            .and_then(|(_, g0)| self.hessian_with(x0, Some(&g0)));
        let Some(h) = h else {
            return lbfgs_minimize(|t| self.value(t), |t| self.value_grad(t), x0.to_vec(), options);
        };
        let eig = SymmetricEigen::new(h);
        let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let floor = (1e-8 * top).max(1e-300);
        let mut t = eig.eigenvectors.clone();
        for j in 0..m {
            let scale = eig.eigenvalues[j].abs().max(floor).sqrt().recip();
            for i in 0..m {
                t[(i, j)] *= scale;
            }
        }
        let to_x = |z: &[f64]| -> Vec<f64> {
            let dz = &t * nalgebra::DVector::from_column_slice(z);
            x0.iter().zip(dz.iter()).map(|(a, b)| a + b).collect()
        };
        let tt = t.transpose();
        let out = lbfgs_minimize(
            |z| self.value(&to_x(z)),
            |z| {
                let (f, g) = self.value_grad(&to_x(z))?;
                let gz = &tt * nalgebra::DVector::from_vec(g);
                Some((f, gz.as_slice().to_vec()))
            },
            vec![0.0; m],
            options,
        )?;
        let x = to_x(&out.x);
        let (value, grad) = self.value_grad(&x)?;
        let rel = grad.iter().map(|v| v * v).sum::<f64>().sqrt() / value.abs().max(1.0);
        let status = if rel <= options.grad_tol {
            LbfgsStatus::Converged
        } else if out.status == LbfgsStatus::Converged {
            LbfgsStatus::Stalled
        } else {
            out.status
        };
        Some(LbfgsOutcome {
            x,
            value,
            grad,
            rel_grad_norm: rel,
            status,
            ..out
        })
    }

    /// Damped Newton steps from an L-BFGS end point.
    fn newton_polish(&self, out: &mut LbfgsOutcome, tol: f64, steps: usize, log: &mut Vec<String>) {
        let rel = |f: f64, g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt() / f.abs().max(1.0);
        for step in 0..steps {
            if out.rel_grad_norm <= tol {
                out.status = LbfgsStatus::Converged;
                return;
            }
            let Some(h) = self.hessian(&out.x) else { return };
            let g = nalgebra::DVector::from_column_slice(&out.grad);
            let scale = h.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            let mut lambda = 0.0;
            let dir = loop {
                let mut damped = h.clone();
                for i in 0..damped.nrows() {
                    damped[(i, i)] += lambda;
                }
                if let Some(ch) = damped.cholesky() {
                    break -ch.solve(&g);
                }
                lambda = if lambda == 0.0 { 1e-8 * scale } else { lambda * 10.0 };
                if lambda > 1e6 * scale {
                    return;
                }
            };
            let slope = g.dot(&dir);
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let trial: Vec<f64> = out.x.iter().zip(dir.iter()).map(|(a, b)| a + t * b).collect();
                if let Some(ft) = self.value(&trial) {
                    if ft <= out.value + 1e-4 * t * slope {
                        accepted = Some(trial);
                        break;
                    }
                }
                t *= 0.5;
            }
            let Some(x) = accepted else { return };
            let Some((f, g)) = self.value_grad(&x) else { return };
            out.rel_grad_norm = rel(f, &g);
            out.x = x;
            out.value = f;
            out.grad = g;
            log.push(format!(
                "newton {step}: objective {:.12e} rel_grad_norm {:.3e} damping {lambda:.1e} step {t:.3e}",
                out.value, out.rel_grad_norm
            ));
        }
        if out.rel_grad_norm <= tol {
            out.status = LbfgsStatus::Converged;
        }
    }
}

/// Lower-dimensional submodel: caps on the Chebyshev degree per index
/// family and optionally a Gaussian noise shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SieveRestriction {
    pub location_degree: usize,
    pub scale_degree: usize,
    pub treatment_degree: usize,
    pub zero_degree: usize,
    pub gaussian_shape: bool,
}

impl SieveRestriction {
    pub fn uniform(max_degree: usize, gaussian_shape: bool) -> Self {
        SieveRestriction {
            location_degree: max_degree,
            scale_degree: max_degree,
            treatment_degree: max_degree,
            zero_degree: max_degree,
            gaussian_shape,
        }
    }

    /// Positions held at their start values.
    pub fn mask(&self, layout: &ParamLayout) -> Vec<bool> {
        let mut mask = vec![false; layout.len()];
        let degrees: Vec<usize> = crate::basis::PolyDegreeCap::CHEBYSHEV
            .index_pairs()
            .into_iter()
            .map(|(j, k)| j + k)
            .collect();
        let mut blocks = vec![(Block::Treatment, self.treatment_degree)];
        for layer in 0..3 {
            blocks.push((Block::ZeroLayer(layer), self.zero_degree));
        }
        for r in Role::ALL {
            blocks.push((Block::Mu(r), self.location_degree));
            blocks.push((Block::LogSigma(r), self.scale_degree));
        }
        for (b, cap) in blocks {
            let start = layout.range(b).start;
            for (k, &deg) in degrees.iter().enumerate().take(N_CHEB) {
                if deg > cap {
                    mask[start + k] = true;
                }
            }
        }
        if self.gaussian_shape {
            for b in [Block::OmegaPre, Block::Omega0, Block::OmegaPost] {
                for k in layout.range(b) {
                    mask[k] = true;
                }
            }
        }
        mask
    }
}

/// [`SieveRestriction::uniform`] as a mask.
pub fn sieve_restriction_mask(layout: &ParamLayout, max_degree: usize, gaussian_shape: bool) -> Vec<bool> {
    SieveRestriction::uniform(max_degree, gaussian_shape).mask(layout)
}

/// Fits the model by multistart L-BFGS on the mean negative log-likelihood.
pub fn fit(data: &PanelDataset, config: &FitConfig) -> Result<FitResult, MleError> {
    data.validate()?;
    // canonical unit order keeps every start and sum independent of input order
    let mut sorted = data.clone();
    sorted.units.sort_by_key(|u| u.id);
    let data = &sorted;
    if config.starts == 0 {
        return Err(MleError::InvalidConfig("starts must be at least 1".into()));
    }
    let grid = QuadratureGrid::new(config.grid_nodes);
    let ctx = LikelihoodContext::new(data, &grid, config.arm);
    let start0 = match &config.initial {
        Some(p) => p.clone(),
        None => warm_start(data, config.arm),
    };
    let layout = start0.layout();
    if let Some(mask) = &config.fixed_mask {
        if mask.len() != layout.len() {
            return Err(MleError::InvalidConfig(format!(
                "fixed mask has {} entries, layout has {}",
                mask.len(),
                layout.len()
            )));
        }
    }
    let fixed = fixed_positions(&start0, data, config.arm, config.fixed_mask.as_deref());
    let free: Vec<usize> = (0..layout.len()).filter(|&k| !fixed[k]).collect();
    let objective = Objective {
        ctx: &ctx,
        template: start0.clone(),
        base: start0.to_flat(),
        free: free.clone(),
        n: data.len() as f64,
    };
    let theta0 = objective.theta(&start0);
    let starts: Vec<Vec<f64>> = (0..config.starts)
        .map(|s| {
            if s == 0 {
                theta0.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(replication_seed(config.seed, s as u64));
                theta0
                    .iter()
                    .map(|v| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v + config.start_noise * z
                    })
                    .collect()
            }
        })
        .collect();

    let options = LbfgsOptions {
        memory: config.lbfgs_memory,
        grad_tol: config.grad_tol,
        obj_tol: config.obj_tol,
        max_iter: config.max_iter,
        ..LbfgsOptions::default()
    };
    let runs: Vec<Option<(f64, LbfgsOutcome)>> = starts
        .par_iter()
        .map(|x0| {
            let f0 = objective.value(x0)?;
            let out = if config.precondition {
                objective.preconditioned_lbfgs(x0, &options)?
            } else {
                lbfgs_minimize(|t| objective.value(t), |t| objective.value_grad(t), x0.clone(), &options)?
            };
            Some((f0, out))
        })
        .collect();

    let mut log = vec![format!(
        "units={} free_parameters={} grid_nodes_per_dim={} starts={} arm={:?}",
        data.len(),
        free.len(),
        config.grid_nodes,
        config.starts,
        config.arm
    )];
    let mut per_start = Vec::new();
    let mut best: Option<(usize, &LbfgsOutcome)> = None;
    for (s, run) in runs.iter().enumerate() {
        match run {
            None => {
                log.push(format!("start {s}: likelihood not finite at the initial point"));
                per_start.push(StartSummary {
                    initial_loglik: f64::NEG_INFINITY,
                    final_loglik: f64::NEG_INFINITY,
                    gradient_norm: f64::INFINITY,
                    iterations: 0,
                    status: "failed".into(),
                });
            }
            Some((f0, out)) => {
                for rec in &out.trace {
                    log.push(format!(
                        "start {s} iter {:4} objective {:.12e} grad_norm {:.3e} step {:.3e}",
                        rec.iteration, rec.value, rec.grad_norm, rec.step
                    ));
                }
                log.push(format!(
                    "start {s}: status={:?} iterations={} loglik={:.10} rel_grad_norm={:.3e}",
                    out.status,
                    out.iterations,
                    -out.value * objective.n,
                    out.rel_grad_norm
                ));
                per_start.push(StartSummary {
                    initial_loglik: -f0 * objective.n,
                    final_loglik: -out.value * objective.n,
                    gradient_norm: out.rel_grad_norm,
                    iterations: out.iterations,
                    status: format!("{:?}", out.status),
                });
                let better = match best {
                    None => true,
                    Some((_, b)) => {
                        let conv = out.status == LbfgsStatus::Converged;
                        let bconv = b.status == LbfgsStatus::Converged;
                        (conv && !bconv) || (conv == bconv && out.value < b.value)
                    }
                };
                if better {
                    best = Some((s, out));
                }
            }
        }
    }
    let Some((best_start, out)) = best else {
        let err = ctx
            .value(&start0)
            .err()
            .unwrap_or(LikelihoodError::NonFinite { units: vec![] });
        return Err(MleError::AllStartsFailed(err));
    };
    log.push(format!("selected start {best_start}"));
    let mut out = out.clone();
    if out.status != LbfgsStatus::Converged && config.newton_polish_steps > 0 {
        objective.newton_polish(&mut out, config.grad_tol, config.newton_polish_steps, &mut log);
    }
    let psi_hat = objective.params(&out.x);
    let converged = out.status == LbfgsStatus::Converged;

    let mut result = FitResult {
        loglik: -out.value * objective.n,
        gradient_norm: out.rel_grad_norm,
        psi_hat,
        free,
        hessian: None,
        hessian_asymmetry: 0.0,
        converged,
        rank_deficient: false,
        starts: config.starts,
        per_start_logliks: per_start.iter().map(|s| s.final_loglik).collect(),
        per_start,
        n_units: data.len(),
        grid_nodes: config.grid_nodes,
        arm: config.arm,
        log,
    };
    if config.compute_hessian {
        let (h, asym) = mean_loglik_hessian(&ctx, &result.psi_hat, &result.free)?;
        let eig = SymmetricEigen::new(h.clone()).eigenvalues;
        let scale = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = -1e-8 * scale;
        let max_eig = eig.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        result.rank_deficient = max_eig > floor;
        result.log.push(format!(
            "hessian: raw_asymmetry={asym:.3e} max_eigenvalue={max_eig:.3e} floor={floor:.3e} rank_deficient={}",
            result.rank_deficient
        ));
        result.hessian = Some(h);
        result.hessian_asymmetry = asym;
    }
    if converged {
        Ok(result)
    } else {
        Err(MleError::NotConverged {
            best: Box::new(result),
        })
    }
}

/// Like [`fit`], but returns the best fit even when the gradient tolerance is not met.
/// Second-step fit of the treated arm's post-outcome laws; every other block
/// stays at the first-step estimate, and `config.fixed_mask` further restricts the post blocks.
pub fn fit_treated_arm(data: &PanelDataset, first: &FitResult, config: &FitConfig) -> Result<FitResult, MleError> {
    let layout = first.psi_hat.layout();
    let mut mask = non_post_mask(&layout);
    if let Some(user) = &config.fixed_mask {
        if user.len() != mask.len() {
            return Err(MleError::InvalidConfig(format!(
                "fixed mask has {} entries, layout has {}",
                user.len(),
                mask.len()
            )));
        }
        for (m, &u) in mask.iter_mut().zip(user) {
            *m |= u;
        }
    }
    let config = FitConfig {
        arm: Arm::Treated,
        initial: Some(treated_arm_start(&first.psi_hat, data)),
        fixed_mask: Some(mask),
        ..config.clone()
    };
    fit(data, &config)
}

pub fn fit_allow_unconverged(data: &PanelDataset, config: &FitConfig) -> Result<FitResult, MleError> {
    match fit(data, config) {
        Err(MleError::NotConverged { best }) => Ok(*best),
        other => other,
    }
}

/// Central-difference Hessian of the mean log-likelihood over `free`,
/// symmetrized; also returns the raw asymmetry.
pub fn mean_loglik_hessian(
    ctx: &LikelihoodContext,
    params: &ModelParams,
    free: &[usize],
) -> Result<(DMatrix<f64>, f64), MleError> {
    let n = ctx.len() as f64;
    let flat = params.to_flat();
    let m = free.len();
    let columns: Vec<Result<Vec<f64>, LikelihoodError>> = free
        .par_iter()
        .map(|&k| {
            let h = 1e-5 * flat[k].abs().max(1.0);
            let at = |s: f64| {
                let mut v = flat.clone();
                v[k] += s;
                ctx.value_and_gradient(&ModelParams::from_flat(params, &v).unwrap())
                    .map(|(_, g)| g)
            };
            let gp = at(h)?;
            let gm = at(-h)?;
            Ok(free.iter().map(|&j| (gp[j] - gm[j]) / (2.0 * h * n)).collect())
        })
        .collect();
    let mut raw = DMatrix::zeros(m, m);
    for (c, col) in columns.into_iter().enumerate() {
        let col = col.map_err(MleError::AllStartsFailed)?;
        for (r, v) in col.into_iter().enumerate() {
            raw[(r, c)] = v;
        }
    }
    let asym = (0..m)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| (raw[(i, j)] - raw[(j, i)]).abs())
        .fold(0.0, f64::max);
    let sym = (&raw + raw.transpose()) * 0.5;
    Ok((sym, asym))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheckReport {
    pub max_relative_error: f64,
    pub relative_errors: Vec<f64>,
}

/// Compares analytic directional derivatives of the total log-likelihood
/// with fourth-order central differences along seeded random unit directions.
/// The step is `step · max(1, ‖ψ‖∞)`.
pub fn gradient_check(
    params: &ModelParams,
    data: &PanelDataset,
    grid: &QuadratureGrid,
    directions: usize,
    step: f64,
    seed: u64,
) -> Result<GradientCheckReport, MleError> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(MleError::InvalidConfig(format!("step must be positive, got {step}")));
    }
    let ctx = LikelihoodContext::new(data, grid, Arm::Control);
    let (_, grad) = ctx
        .value_and_gradient(params)
        .map_err(MleError::AllStartsFailed)?;
    let flat = params.to_flat();
    let fixed = params.layout().structural_zeros();
    let scale = flat.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let h = step * scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(directions);
    for _ in 0..directions {
        let mut dir: Vec<f64> = (0..flat.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        for &k in &fixed {
            dir[k] = 0.0;
        }
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|d| *d /= norm);
        let at = |s: f64| -> Result<f64, MleError> {
            let v: Vec<f64> = flat.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
            ctx.value(&ModelParams::from_flat(params, &v)?)
                .map_err(MleError::AllStartsFailed)
        };
        let fd = (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h);
        let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let denom = analytic.abs().max(fd.abs()).max(f64::MIN_POSITIVE);
        errors.push((fd - analytic).abs() / denom);
    }
    Ok(GradientCheckReport {
        max_relative_error: errors.iter().copied().fold(0.0, f64::max),
        relative_errors: errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Index, N_ROLES};

    fn restricted(params: &ModelParams) -> Option<Vec<bool>> {
        Some(sieve_restriction_mask(&params.layout(), 1, true))
    }

    fn simple_params() -> ModelParams {
        let mut params = ModelParams::zeros(0);
        for t in 0..N_ROLES {
            params.mu[t] = Index::constant(10.0, 0);
            params.mu[t].alpha[1] = 0.8;
            params.log_sigma[t] = Index::constant(-1.5, 0);
        }
        params.mu[Role::Pre2.index()].alpha[2] = 0.6;
        params.mu[Role::Post1.index()].alpha[2] = 0.4;
        params.treatment.alpha[1] = 0.8;
        params.zero_state = [ZeroLayerState::NeverZero; 3];
        params
    }

    #[test]
    fn zero_step_is_rejected() {
        let params = simple_params();
        let data = params.simulate_from_model(&[], 20, 1).unwrap();
        let grid = QuadratureGrid::new(4);
        assert!(matches!(
            gradient_check(&params, &data, &grid, 3, 0.0, 1),
            Err(MleError::InvalidConfig(_))
        ));
    }

    #[test]
    fn gradient_check_gaussian_submodel() {
        let params = simple_params();
        let data = params.simulate_from_model(&[], 200, 2).unwrap();
        let grid = QuadratureGrid::new(8);
        let report = gradient_check(&params, &data, &grid, 10, 1e-4, 3).unwrap();
        assert!(report.max_relative_error < 1e-7, "{report:?}");
    }

    #[test]
    fn fit_from_truth_converges_quickly() {
        let truth = simple_params();
        let data = truth.simulate_from_model(&[], 400, 4).unwrap();
        // start at the optimum of the data, found by a first fit
        let config = FitConfig {
            starts: 1,
            grid_nodes: 10,
            compute_hessian: false,
            fixed_mask: restricted(&truth),
            ..FitConfig::default()
        };
        let first = fit(&data, &config).unwrap();
        let again = fit(
            &data,
            &FitConfig {
                initial: Some(first.psi_hat.clone()),
                ..config.clone()
            },
        )
        .unwrap();
        assert!(again.per_start[0].iterations <= 3);
        assert!(again.gradient_norm <= 1e-6);
        assert!(again.loglik >= first.loglik - 1e-9);
    }

    #[test]
    fn fit_improves_on_every_start_and_hessian_is_symmetric() {
        let truth = simple_params();
        let data = truth.simulate_from_model(&[], 300, 5).unwrap();
        let config = FitConfig {
            starts: 3,
            grid_nodes: 8,
            fixed_mask: restricted(&truth),
            ..FitConfig::default()
        };
        let result = fit_allow_unconverged(&data, &config).unwrap();
        for s in &result.per_start {
            assert!(result.loglik >= s.initial_loglik);
        }
        let h = result.hessian.as_ref().unwrap();
        assert_eq!(h, &h.transpose());
        assert_eq!(result.per_start_logliks.len(), 3);
    }

    #[test]
    fn permuting_units_leaves_estimate_bit_identical() {
        let truth = simple_params();
        let data = truth.simulate_from_model(&[], 150, 6).unwrap();
        let config = FitConfig {
            starts: 1,
            grid_nodes: 5,
            compute_hessian: false,
            max_iter: 60,
            ..FitConfig::default()
        };
        let a = fit_allow_unconverged(&data, &config).unwrap();
        let mut shuffled = data.clone();
        shuffled.units.reverse();
        shuffled.units.swap(3, 70);
        let b = fit_allow_unconverged(&shuffled, &config).unwrap();
        assert_eq!(a.psi_hat, b.psi_hat);
        assert_eq!(a.loglik, b.loglik);
    }

    #[test]
    fn frozen_shape_matches_restricted_run() {
        let truth = simple_params();
        let data = truth.simulate_from_model(&[], 300, 7).unwrap();
        let config = FitConfig {
            starts: 1,
            grid_nodes: 10,
            compute_hessian: false,
            fixed_mask: restricted(&truth),
            ..FitConfig::default()
        };
        let a = fit(&data, &config).unwrap();
        // restricted run from a different start reaches the same optimum
        let mut start = warm_start(&data, Arm::Control);
        start.mu[Role::Ref.index()].alpha[0] += 0.05;
        start.log_sigma[Role::Post2.index()].alpha[0] -= 0.1;
        let b = fit(
            &data,
            &FitConfig {
                initial: Some(start),
                ..config
            },
        )
        .unwrap();
        assert!(a.psi_hat.omega_pre.0.iter().all(|&w| w == 0.0));
        assert!((a.loglik - b.loglik).abs() < 1e-6 * a.loglik.abs());
        let (fa, fb) = (a.psi_hat.to_flat(), b.psi_hat.to_flat());
        let max_diff = fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max_diff < 1e-3, "{max_diff}");
    }
}
