//! Shared Monte Carlo draws. Each fixture is computed once and feeds several
//! criteria.

use latentdid::estimators::{
    att, cate, did_matching, event_study_unit_trends, qtt, AttEstimate, CateEstimate, ConstraintSet, EventObs,
};
use latentdid::mle::{fit, fit_treated_arm, FitConfig, FitResult, SieveRestriction};
use latentdid::model::{ModelParams, PanelDataset, Role};
use latentdid::quadrature::QuadratureGrid;
use latentdid::rng::replication_seed;
use latentdid::simulate::{generate, truth, DgpSpec, Truth};

pub const POST: [Role; 2] = [Role::Post1, Role::Post2];
pub const TAUS: [f64; 3] = [0.25, 0.5, 0.75];
pub const EFFECT: f64 = -5000.0;
pub const HET_SLOPE: f64 = 1000.0;

/// Sample sizes and replication counts; `full` is the complete Monte Carlo design.
#[derive(Debug, Clone, Copy)]
pub struct Scale {
    pub full: bool,
    pub self_consistency_n: usize,
    pub self_consistency_reps: usize,
    pub self_consistency_starts: usize,
    /// Replications and units for estimators that need a likelihood fit.
    pub fit_reps: usize,
    pub fit_n: usize,
    /// Replications and units for the closed-form matching DID.
    pub did_reps: usize,
    pub did_n: usize,
    pub bootstrap_datasets: usize,
    pub bootstrap_draws: usize,
    pub grid_nodes: usize,
}

impl Scale {
    pub fn reduced() -> Self {
        Scale {
            full: false,
            self_consistency_n: 2000,
            self_consistency_reps: 12,
            self_consistency_starts: 2,
            fit_reps: 20,
            fit_n: 4000,
            did_reps: 200,
            did_n: 20_000,
            bootstrap_datasets: 2,
            bootstrap_draws: 25,
            grid_nodes: 8,
        }
    }

    pub fn full() -> Self {
        Scale {
            full: true,
            self_consistency_n: 50_000,
            self_consistency_reps: 50,
            self_consistency_starts: 5,
            fit_reps: 200,
            fit_n: 20_000,
            did_reps: 200,
            did_n: 20_000,
            bootstrap_datasets: 5,
            bootstrap_draws: 100,
            grid_nodes: 10,
        }
    }

    pub fn describe(&self) -> &'static str {
        if self.full {
            "full"
        } else {
            "reduced"
        }
    }
}

/// Location in `U` up to degree 2, constant scale, treatment index of degree
/// one, Gaussian shapes.
pub fn restriction() -> SieveRestriction {
    SieveRestriction {
        location_degree: 2,
        scale_degree: 0,
        treatment_degree: 1,
        zero_degree: 2,
        gaussian_shape: true,
    }
}

pub fn fit_config(scale: &Scale, rep: u64) -> FitConfig {
    FitConfig {
        starts: 1,
        grid_nodes: scale.grid_nodes,
        fixed_mask: Some(restriction().mask(&ModelParams::zeros(0).layout())),
        seed: replication_seed(11, rep),
        ..FitConfig::default()
    }
}

/// Mean, standard deviation and Monte Carlo standard error of the mean.
#[derive(Debug, Clone, Copy)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
    pub mc_se: f64,
}

pub fn moments(values: &[f64]) -> Moments {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    Moments {
        mean,
        sd: var.sqrt(),
        mc_se: (var / n as f64).sqrt(),
    }
}

/// Event-study observations of a five-period simulated panel.
pub fn event_obs(data: &PanelDataset, times: &[i64; 5]) -> Vec<EventObs> {
    let mut obs = Vec::new();
    for u in &data.units {
        for (r, &t) in times.iter().enumerate() {
            obs.push(EventObs {
                unit: u.id,
                cluster: u.cluster,
                period: t,
                event_time: u.d.then_some(t),
                y: u.y[r],
                x: u.x.clone(),
            });
        }
    }
    obs
}

/// Largest post-event gap between the two constraint sets.
pub fn constraint_gap(data: &PanelDataset, times: &[i64; 5]) -> Result<f64, String> {
    let obs = event_obs(data, times);
    let a = event_study_unit_trends(&obs, ConstraintSet::ZeroAllPre).map_err(|e| e.to_string())?;
    let b = event_study_unit_trends(&obs, ConstraintSet::ZeroAverageFlatTrend).map_err(|e| e.to_string())?;
    let mut gap: f64 = 0.0;
    for (j, k) in a.event_times.iter().enumerate() {
        if *k >= 0 {
            gap = gap.max((a.beta[j] - b.beta[j]).abs());
        }
    }
    Ok(gap)
}

/// Neumaier-compensated sum; its error does not grow with the length.
fn compensated_sum(values: &[f64]) -> f64 {
    let (mut sum, mut carry) = (0.0_f64, 0.0_f64);
    for &v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

/// `|θ − (θ_M − mean_treated g)|` relative to the size of its terms, with the
/// treated mean recomputed by compensated summation.
pub fn identity_error(est: &AttEstimate, data: &PanelDataset) -> f64 {
    let treated: Vec<f64> = data.units.iter().zip(&est.g).filter(|(u, _)| u.d).map(|(_, g)| *g).collect();
    let mean = compensated_sum(&treated) / treated.len() as f64;
    let scale = est.theta_m.abs() + treated.iter().map(|g| g.abs()).sum::<f64>() / treated.len() as f64;
    (est.theta - (est.theta_m - mean)).abs() / scale.max(f64::MIN_POSITIVE)
}

/// Matching DID over many large samples.
pub struct DidDraws {
    pub att: [Vec<f64>; 2],
    pub se: [Vec<f64>; 2],
    pub truth: Truth,
}

pub fn did_draws(spec: &DgpSpec, scale: &Scale, seed: u64) -> Result<DidDraws, String> {
    let mut out = DidDraws {
        att: [Vec::new(), Vec::new()],
        se: [Vec::new(), Vec::new()],
        truth: truth(spec).map_err(|e| e.to_string())?,
    };
    for rep in 0..scale.did_reps as u64 {
        let (data, _) = generate(spec, scale.did_n, seed, rep).map_err(|e| e.to_string())?;
        for (j, role) in POST.iter().enumerate() {
            let e = did_matching(&data, *role).map_err(|e| e.to_string())?;
            out.att[j].push(e.att);
            out.se[j].push(e.se);
        }
    }
    Ok(out)
}

/// One replication of the additive (parallel-trends) design: a constant
/// effect and a zero effect sharing draws.
pub struct AdditiveRep {
    pub att: Vec<AttEstimate>,
    pub identity_error: f64,
    pub qtt_zero: Vec<f64>,
    pub qtt_shift: Vec<f64>,
    pub constraint_gap: f64,
}

pub struct AdditiveFixture {
    pub reps: Vec<AdditiveRep>,
    pub failures: Vec<(usize, String)>,
    pub truth: Truth,
}

pub fn additive_spec(effect: f64) -> DgpSpec {
    DgpSpec::additive_did(effect)
}


/// Untreated outcomes and treatment agree; only treated post levels differ.
fn same_untreated_draws(a: &PanelDataset, b: &PanelDataset) -> bool {
    a.units.len() == b.units.len()
        && a.units.iter().zip(&b.units).all(|(x, y)| {
            x.id == y.id && x.d == y.d && x.y[..3] == y.y[..3] && (x.d || x.y == y.y)
        })
}

fn additive_rep(scale: &Scale, seed: u64, rep: u64) -> Result<AdditiveRep, String> {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let (shifted, _) = generate(&additive_spec(EFFECT), scale.fit_n, seed, rep).map_err(|e| err(&e))?;
    let (zero, _) = generate(&additive_spec(0.0), scale.fit_n, seed, rep).map_err(|e| err(&e))?;
    if !same_untreated_draws(&shifted, &zero) {
        return Err("effect variants do not share untreated draws".into());
    }
    let config = fit_config(scale, rep);
    // the untreated-outcome likelihood never reads treated post outcomes
    let fitted = fit(&shifted, &config).map_err(|e| err(&e))?;
    let grid = QuadratureGrid::new(scale.grid_nodes);
    let mut ests = Vec::new();
    let mut identity: f64 = 0.0;
    for role in POST {
        let e = att(&fitted, &shifted, &grid, role).map_err(|e| err(&e))?;
        identity = identity.max(identity_error(&e, &shifted));
        ests.push(e);
    }
    let qtt_zero = qtt(&fitted, &zero, &grid, Role::Post1, &TAUS).map_err(|e| err(&e))?.qtt;
    let qtt_shift = qtt(&fitted, &shifted, &grid, Role::Post1, &TAUS).map_err(|e| err(&e))?.qtt;
    let times = additive_spec(EFFECT).times;
    Ok(AdditiveRep {
        att: ests,
        identity_error: identity,
        qtt_zero,
        qtt_shift,
        constraint_gap: constraint_gap(&shifted, &times)?,
    })
}

pub fn additive_fixture(scale: &Scale) -> AdditiveFixture {
    let seed = 501;
    let mut reps = Vec::new();
    let mut failures = Vec::new();
    for rep in 0..scale.fit_reps {
        match additive_rep(scale, seed, rep as u64) {
            Ok(r) => reps.push(r),
            Err(e) => failures.push((rep, e)),
        }
    }
    AdditiveFixture {
        reps,
        failures,
        truth: truth(&additive_spec(EFFECT)).expect("valid spec"),
    }
}

/// One replication of the linear-factor (trend-selection) design, plus
/// conditional effects for the constant effect and for an effect linear in
/// `U₁` drawn with the same untreated outcomes.
pub struct FactorRep {
    pub data: PanelDataset,
    pub fit: FitResult,
    pub att: Vec<AttEstimate>,
    pub identity_error: f64,
    pub constraint_gap: f64,
    pub cate_constant: CateEstimate,
    pub cate_het: CateEstimate,
}

pub struct FactorFixture {
    pub reps: Vec<FactorRep>,
    pub failures: Vec<(usize, String)>,
    pub truth: Truth,
}

pub fn factor_spec() -> DgpSpec {
    DgpSpec::linear_factor(EFFECT, 6000.0, 2.0)
}

pub fn heterogeneous_factor_spec() -> DgpSpec {
    let mut spec = factor_spec();
    spec.effect = [[0.0, HET_SLOPE, 0.0]; 2];
    spec
}

fn factor_rep(scale: &Scale, seed: u64, rep: u64) -> Result<FactorRep, String> {
    let spec = factor_spec();
    let (data, _) = generate(&spec, scale.fit_n, seed, rep).map_err(|e| e.to_string())?;
    let (het, _) = generate(&heterogeneous_factor_spec(), scale.fit_n, seed, rep).map_err(|e| e.to_string())?;
    if !same_untreated_draws(&data, &het) {
        return Err("effect variants do not share untreated draws".into());
    }
    let config = fit_config(scale, rep);
    let fitted = fit(&data, &config).map_err(|e| e.to_string())?;
    let grid = QuadratureGrid::new(scale.grid_nodes);
    let conditional = |d: &PanelDataset| -> Result<CateEstimate, String> {
        let second = FitConfig { compute_hessian: false, ..config.clone() };
        let treated = fit_treated_arm(d, &fitted, &second).map_err(|e| e.to_string())?;
        cate(&fitted, &treated, d, &grid, Role::Post1).map_err(|e| e.to_string())
    };
    let cate_constant = conditional(&data)?;
    let cate_het = conditional(&het)?;
    let mut ests = Vec::new();
    let mut identity: f64 = 0.0;
    for role in POST {
        let e = att(&fitted, &data, &grid, role).map_err(|e| e.to_string())?;
        identity = identity.max(identity_error(&e, &data));
        ests.push(e);
    }
    Ok(FactorRep {
        constraint_gap: constraint_gap(&data, &spec.times)?,
        data,
        fit: fitted,
        att: ests,
        identity_error: identity,
        cate_constant,
        cate_het,
    })
}

pub fn factor_fixture(scale: &Scale) -> FactorFixture {
    let seed = 602;
    let mut reps = Vec::new();
    let mut failures = Vec::new();
    for rep in 0..scale.fit_reps {
        match factor_rep(scale, seed, rep as u64) {
            Ok(r) => reps.push(r),
            Err(e) => failures.push((rep, e)),
        }
    }
    FactorFixture {
        reps,
        failures,
        truth: truth(&factor_spec()).expect("valid spec"),
    }
}
