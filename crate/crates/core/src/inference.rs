//! Influence-function standard errors for the two-step ATT, clustered by
//! worker, and a cluster bootstrap for validation.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::estimators::{att_point, bias_terms, treated_mean, AttEstimate};
use crate::exact_sum::{exact_sum, ExactSum};
use crate::likelihood::{LikelihoodContext, LikelihoodError};
use crate::mle::{fit_allow_unconverged, FitConfig, FitResult};
use crate::model::{ModelParams, PanelDataset, Role};
use crate::quadrature::QuadratureGrid;
use crate::rng::unit_rng;

/// Relative central-difference step for `∇g`.
pub const GRADIENT_STEP: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("fit carries no Hessian")]
    MissingHessian,
    #[error("Hessian singular at the eigenvalue floor")]
    SingularHessian,
    #[error("unit id {0} appears more than once")]
    DuplicateUnitIds(u64),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error("estimator: {0}")]
    Estimator(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("bootstrap needs at least 2 draws")]
    TooFewDraws,
}

/// `sqrt(Σ_c (Σ_{i∈c} ψ_i)²) / N`.
pub fn cluster_se(influence: &[f64], clusters: &[u64]) -> f64 {
    let mut sums: BTreeMap<u64, ExactSum> = BTreeMap::new();
    for (&v, &c) in influence.iter().zip(clusters) {
        sums.entry(c).or_default().add(v);
    }
    let squares: Vec<f64> = sums.values().map(|s| s.value().powi(2)).collect();
    exact_sum(&squares).sqrt() / influence.len() as f64
}

/// Per-unit channels of the two-step expansion, in data order.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceDecomposition {
    pub unit_ids: Vec<u64>,
    pub clusters: Vec<u64>,
    /// Matching step `a_i`.
    pub a: Vec<f64>,
    /// `D_i (g_i − ḡ₁) / P(D=1)`.
    pub g_centered: Vec<f64>,
    /// `E[D∇g]ᵀ (−E[∇s])⁻¹ s_i / P(D=1)`.
    pub score_channel: Vec<f64>,
    /// `a − g_centered − score_channel`, centered.
    pub total: Vec<f64>,
}

impl InfluenceDecomposition {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), InferenceError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["unit", "cluster", "a", "g_centered", "score_channel", "total"])?;
        for i in 0..self.total.len() {
            w.write_record([
                self.unit_ids[i].to_string(),
                self.clusters[i].to_string(),
                format!("{:e}", self.a[i]),
                format!("{:e}", self.g_centered[i]),
                format!("{:e}", self.score_channel[i]),
                format!("{:e}", self.total[i]),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// `∇_ψ ḡ₁` over the fit's free positions by central differences.
fn bias_gradient(
    fit: &FitResult,
    data: &PanelDataset,
    grid: &QuadratureGrid,
    role: Role,
) -> Result<Vec<f64>, InferenceError> {
    let flat = fit.psi_hat.to_flat();
    fit.free
        .par_iter()
        .map(|&k| {
            let h = GRADIENT_STEP * flat[k].abs().max(1.0);
            let at = |s: f64| -> Result<f64, InferenceError> {
                let mut v = flat.clone();
                v[k] += s;
                let params = ModelParams::from_flat(&fit.psi_hat, &v)
                    .map_err(|e| InferenceError::Estimator(e.to_string()))?;
                let g = bias_terms(&params, data, grid, role).map_err(|e| InferenceError::Estimator(e.to_string()))?;
                Ok(treated_mean(&g, data))
            };
            Ok((at(h)? - at(-h)?) / (2.0 * h))
        })
        .collect()
}

/// Two-step SE of the ATT, clustered by `UnitRecord::cluster`.
pub fn att_standard_error(
    fit: &FitResult,
    data: &PanelDataset,
    att: &AttEstimate,
    grid: &QuadratureGrid,
) -> Result<(f64, InfluenceDecomposition), InferenceError> {
    let hessian = fit.hessian.as_ref().ok_or(InferenceError::MissingHessian)?;
    if fit.rank_deficient {
        return Err(InferenceError::SingularHessian);
    }
    let neg_inv = (-hessian)
        .clone()
        .try_inverse()
        .ok_or(InferenceError::SingularHessian)?;
    let n = data.len();
    let share = data.n_treated() as f64 / n as f64;

    let mut position: HashMap<u64, usize> = HashMap::with_capacity(n);
    for (i, u) in data.units.iter().enumerate() {
        if position.insert(u.id, i).is_some() {
            return Err(InferenceError::DuplicateUnitIds(u.id));
        }
    }

    let a = att.matching.influence.clone();
    let g_centered: Vec<f64> = data
        .units
        .iter()
        .zip(&att.g)
        .map(|(u, &g)| if u.d { (g - att.bias_correction) / share } else { 0.0 })
        .collect();

    let grad_g = bias_gradient(fit, data, grid, att.role)?;
    let mut score_channel = vec![0.0; n];
    if grad_g.iter().any(|&v| v != 0.0) {
        // ∂ḡ₁/∂ψ already averages over treated units
        let direction = &neg_inv * DVector::from_column_slice(&grad_g);
        let ctx = LikelihoodContext::new(data, &QuadratureGrid::new(fit.grid_nodes), fit.arm);
        let scores = ctx.unit_scores(&fit.psi_hat)?;
        for (prepared, score) in ctx.units().iter().zip(&scores) {
            let s: f64 = fit
                .free
                .iter()
                .enumerate()
                .map(|(j, &k)| direction[j] * score.gradient[k])
                .sum();
            score_channel[position[&prepared.id]] = s;
        }
    }

    let raw: Vec<f64> = (0..n).map(|i| a[i] - g_centered[i] - score_channel[i]).collect();
    let mean = exact_sum(&raw) / n as f64;
    let total: Vec<f64> = raw.iter().map(|v| v - mean).collect();
    let clusters: Vec<u64> = data.units.iter().map(|u| u.cluster).collect();
    let se = cluster_se(&total, &clusters);
    Ok((
        se,
        InfluenceDecomposition {
            unit_ids: data.units.iter().map(|u| u.id).collect(),
            clusters,
            a,
            g_centered,
            score_channel,
            total,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub estimates: Vec<f64>,
    pub se: f64,
    pub failures: usize,
}

/// Resamples whole clusters with replacement; one stream per draw.
pub fn resample_clusters(data: &PanelDataset, seed: u64, draw: u64) -> PanelDataset {
    let mut by_cluster: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, u) in data.units.iter().enumerate() {
        by_cluster.entry(u.cluster).or_default().push(i);
    }
    let groups: Vec<&Vec<usize>> = by_cluster.values().collect();
    let mut rng = unit_rng(seed, draw, 0);
    let mut units = Vec::with_capacity(data.len());
    for c in 0..groups.len() {
        let pick = groups[rng.random_range(0..groups.len())];
        for &i in pick {
            let mut u = data.units[i].clone();
            u.id = units.len() as u64;
            u.cluster = c as u64;
            units.push(u);
        }
    }
    PanelDataset {
        covariate_names: data.covariate_names.clone(),
        units,
    }
}

/// Cluster bootstrap of the ATT point estimate, refitting from `fit` as warm start.
pub fn cluster_bootstrap(
    fit: &FitResult,
    data: &PanelDataset,
    grid: &QuadratureGrid,
    role: Role,
    draws: usize,
    seed: u64,
    config: &FitConfig,
) -> Result<BootstrapResult, InferenceError> {
    if draws < 2 {
        return Err(InferenceError::TooFewDraws);
    }
    let config = FitConfig {
        starts: 1,
        initial: Some(fit.psi_hat.clone()),
        compute_hessian: false,
        arm: fit.arm,
        ..config.clone()
    };
    let results: Vec<Option<f64>> = (0..draws as u64)
        .into_par_iter()
        .map(|b| {
            let sample = resample_clusters(data, seed, b);
            let refit = fit_allow_unconverged(&sample, &config).ok()?;
            let refit = FitResult { converged: true, ..refit };
            att_point(&refit, &sample, grid, role).ok().map(|e| e.theta)
        })
        .collect();
    let estimates: Vec<f64> = results.iter().flatten().copied().collect();
    let failures = draws - estimates.len();
    let m = estimates.len() as f64;
    let mean = exact_sum(&estimates) / m;
    let dev: Vec<f64> = estimates.iter().map(|v| (v - mean).powi(2)).collect();
    let se = (exact_sum(&dev) / (m - 1.0)).sqrt();
    Ok(BootstrapResult { estimates, se, failures })
}
