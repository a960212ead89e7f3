//! Synthetic panels with known effects, and the Monte Carlo harness.
//!
//! Latent heterogeneity is drawn directly in the normalized form
//! `U ~ Uniform(0,1)²`; selection is `P(D=1|U) = logistic(s₀ + s₁U₁ + s₂U₂)`
//! and effects are linear in `U`, so every truth is a smooth integral
//! against the selection-tilted uniform law.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::basis::{logistic, norm_quantile};
use crate::estimators::{att, did_matching};
use crate::exact_sum::exact_sum;
use crate::mle::{fit, FitConfig, MleError};
use crate::model::{PanelDataset, Role, UnitRecord, N_ROLES};
use crate::quadrature::gauss_legendre_unit;
use crate::quadrature::QuadratureGrid;
use crate::rng::unit_rng;

/// Nodes per dimension for the truth integrals.
pub const TRUTH_NODES: usize = 64;

const POST: [Role; 2] = [Role::Post1, Role::Post2];

#[derive(Debug, Error, PartialEq)]
pub enum SimulateError {
    #[error("invalid DGP: {0}")]
    InvalidSpec(String),
    #[error("need at least {0}")]
    TooSmall(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgpKind {
    /// Level `μ_t + γ'U` with time-invariant loadings: parallel trends hold.
    AdditiveDid,
    /// Level `μ_t + γ_t'U`.
    LinearFactor,
    /// Log level `μ_t + ζ + η_t` with `η` a stationary AR(1) and
    /// `U = (Φ(ζ/σ_ζ), Φ(η₀/sd(η)))`.
    HiddenMarkov,
}

impl DgpKind {
    pub fn name(self) -> &'static str {
        match self {
            DgpKind::AdditiveDid => "additive_did",
            DgpKind::LinearFactor => "linear_factor",
            DgpKind::HiddenMarkov => "hidden_markov",
        }
    }

    pub fn parse(s: &str) -> Option<DgpKind> {
        [DgpKind::AdditiveDid, DgpKind::LinearFactor, DgpKind::HiddenMarkov]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

/// Data-generating process over the five roles (pre₂, pre₁, ref, post₁, post₂).
#[derive(Debug, Clone, PartialEq)]
pub struct DgpSpec {
    pub kind: DgpKind,
    /// Event-relative time of each role; the reference period is 0.
    pub times: [i64; N_ROLES],
    /// Level intercepts (log-level for the hidden Markov kind).
    pub mu: [f64; N_ROLES],
    /// Loadings on `(U₁, U₂)` in levels.
    pub gamma: [[f64; 2]; N_ROLES],
    /// Log-scale SD of the mean-one multiplicative noise.
    pub noise_sd: [f64; N_ROLES],
    pub rho: f64,
    pub sigma_eta: f64,
    pub sigma_zeta: f64,
    /// `(s₀, s₁, s₂)`.
    pub selection: [f64; 3],
    /// `τ_t(u) = c₀ + c₁u₁ + c₂u₂` for post₁ and post₂, added to treated levels.
    pub effect: [[f64; 3]; 2],
    /// Top-code every period at this sample quantile of its observed outcomes.
    pub top_code_quantile: Option<f64>,
}

impl DgpSpec {
    /// Parallel trends hold; selection on the level factor; constant effect.
    pub fn additive_did(effect: f64) -> Self {
        DgpSpec {
            kind: DgpKind::AdditiveDid,
            times: [-2, -1, 0, 1, 2],
            mu: [30_000.0, 30_000.0, 30_500.0, 31_000.0, 31_500.0],
            gamma: [[12_000.0, 0.0]; N_ROLES],
            noise_sd: [0.15; N_ROLES],
            rho: 0.0,
            sigma_eta: 0.0,
            sigma_zeta: 0.0,
            selection: [-1.5, 2.0, 0.0],
            effect: [[effect, 0.0, 0.0]; 2],
            top_code_quantile: None,
        }
    }

    /// `γ_t = (g, λ·(t − t_pre₁))`: the second factor is a trend whose loading
    /// grows with time; selection on that trend factor.
    pub fn linear_factor(effect: f64, trend: f64, selection_on_trend: f64) -> Self {
        let times = [-2, -1, 0, 1, 2];
        let gamma = std::array::from_fn(|r| [10_000.0, trend * (times[r] + 1) as f64]);
        DgpSpec {
            kind: DgpKind::LinearFactor,
            times,
            mu: [30_000.0; N_ROLES],
            gamma,
            noise_sd: [0.15; N_ROLES],
            rho: 0.0,
            sigma_eta: 0.0,
            sigma_zeta: 0.0,
            selection: [-0.5 * selection_on_trend, 0.0, selection_on_trend],
            effect: [[effect, 0.0, 0.0]; 2],
            top_code_quantile: None,
        }
    }

    pub fn hidden_markov(rho: f64) -> Self {
        DgpSpec {
            kind: DgpKind::HiddenMarkov,
            times: [-2, -1, 0, 1, 2],
            mu: [10.2, 10.25, 10.3, 10.3, 10.35],
            gamma: [[0.0; 2]; N_ROLES],
            noise_sd: [0.1; N_ROLES],
            rho,
            sigma_eta: 0.15,
            sigma_zeta: 0.4,
            selection: [-1.0, 0.0, 1.5],
            effect: [[-3_000.0, 0.0, 0.0]; 2],
            top_code_quantile: None,
        }
    }

    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: &str| Err(SimulateError::InvalidSpec(m.to_string()));
        if self.times[Role::Ref.index()] != 0 || self.times.windows(2).any(|w| w[0] >= w[1]) {
            return bad("role times must increase with the reference period at 0");
        }
        if self.noise_sd.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("noise SDs must be finite and nonnegative");
        }
        if let Some(q) = self.top_code_quantile {
            if !(q > 0.0 && q < 1.0) {
                return bad("top-code quantile must lie in (0, 1)");
            }
        }
        let all_finite = self.mu.iter().chain(self.selection.iter()).chain(self.effect.iter().flatten()).chain(self.gamma.iter().flatten()).all(|v| v.is_finite());
        if !all_finite {
            return bad("non-finite coefficient");
        }
        match self.kind {
            DgpKind::HiddenMarkov => {
                if self.gamma.iter().flatten().any(|&g| g != 0.0) {
                    return bad("hidden_markov takes no factor loadings");
                }
                if !(self.rho.abs() < 1.0) || !(self.sigma_eta > 0.0) || !(self.sigma_zeta > 0.0) {
                    return bad("hidden_markov needs |rho| < 1 and positive sigma_eta, sigma_zeta");
                }
            }
            DgpKind::AdditiveDid | DgpKind::LinearFactor => {
                if self.kind == DgpKind::AdditiveDid && self.gamma.iter().any(|g| *g != self.gamma[0]) {
                    return bad("additive_did loadings must not vary over time");
                }
                let (a, b) = (self.gamma[0], self.gamma[1]);
                if self.kind == DgpKind::LinearFactor && (a[0] * b[1] - a[1] * b[0]).abs() < 1e-12 {
                    return bad("pre-period loading matrix must have full rank");
                }
                for r in 0..N_ROLES {
                    let corners = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
                    if corners.iter().any(|&u| self.level(r, u) <= 0.0) {
                        return bad("mean level must be positive on the unit square");
                    }
                }
            }
        }
        Ok(())
    }

    /// `μ_t + γ_t'u` for the level kinds.
    fn level(&self, r: usize, u: (f64, f64)) -> f64 {
        self.mu[r] + self.gamma[r][0] * u.0 + self.gamma[r][1] * u.1
    }

    pub fn prob_treatment(&self, u: (f64, f64)) -> f64 {
        let s = self.selection;
        logistic(s[0] + s[1] * u.0 + s[2] * u.1)
    }

    pub fn effect_at(&self, post: usize, u: (f64, f64)) -> f64 {
        let c = self.effect[post];
        c[0] + c[1] * u.0 + c[2] * u.1
    }

    /// Stationary SD of `η`.
    fn eta_sd(&self) -> f64 {
        self.sigma_eta / (1.0 - self.rho * self.rho).sqrt()
    }

    /// `E[Y_t(0) | U = u]`.
    pub fn untreated_mean(&self, r: usize, u: (f64, f64)) -> f64 {
        match self.kind {
            DgpKind::AdditiveDid | DgpKind::LinearFactor => self.level(r, u),
            DgpKind::HiddenMarkov => {
                let zeta = self.sigma_zeta * norm_quantile(u.0);
                let eta0 = self.eta_sd() * norm_quantile(u.1);
                let lag = self.times[r].unsigned_abs() as i32;
                let decay = self.rho.powi(lag);
                let var = self.eta_sd().powi(2) * (1.0 - decay * decay) + self.noise_sd[r].powi(2);
                (self.mu[r] + zeta + decay * eta0 + 0.5 * var).exp()
            }
        }
    }
}

/// Per-unit latent draw, kept for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latent {
    pub u: (f64, f64),
    pub untreated: [f64; N_ROLES],
}

/// Known population quantities of a DGP.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    /// `E[τ_t(U) | D=1]` for post₁, post₂.
    pub att: [f64; 2],
    /// Naive DID estimand minus the ATT.
    pub did_bias: [f64; 2],
    pub ate: [f64; 2],
    pub atu: [f64; 2],
    /// `Var(τ_t(U))` under the uniform law.
    pub cate_variance: [f64; 2],
    /// `E[U | D=1] − E[U | D=0]`.
    pub latent_gap: (f64, f64),
    pub prob_treated: f64,
}

impl Truth {
    pub fn for_role(&self, role: Role) -> Option<usize> {
        POST.iter().position(|&r| r == role)
    }
}

fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Truth by Gauss–Legendre quadrature over the selection-tilted uniform law.
pub fn truth(spec: &DgpSpec) -> Result<Truth, SimulateError> {
    spec.validate()?;
    let (x, w) = gauss_legendre_unit(TRUTH_NODES);
    let mut nodes = Vec::with_capacity(x.len() * x.len());
    for (a, wa) in x.iter().zip(&w) {
        for (b, wb) in x.iter().zip(&w) {
            nodes.push(((*a, *b), wa * wb));
        }
    }
    let integral = |f: &dyn Fn((f64, f64)) -> f64| exact_sum(&nodes.iter().map(|&(u, w)| w * f(u)).collect::<Vec<_>>());
    let p1 = integral(&|u| spec.prob_treatment(u));
    let p0 = 1.0 - p1;
    let treated = |f: &dyn Fn((f64, f64)) -> f64| integral(&|u| f(u) * spec.prob_treatment(u)) / p1;
    let untreated = |f: &dyn Fn((f64, f64)) -> f64| integral(&|u| f(u) * (1.0 - spec.prob_treatment(u))) / p0;
    let r0 = Role::Ref.index();
    let mut out = Truth {
        att: [0.0; 2],
        did_bias: [0.0; 2],
        ate: [0.0; 2],
        atu: [0.0; 2],
        cate_variance: [0.0; 2],
        latent_gap: (
            treated(&|u| u.0) - untreated(&|u| u.0),
            treated(&|u| u.1) - untreated(&|u| u.1),
        ),
        prob_treated: p1,
    };
    for (j, role) in POST.iter().enumerate() {
        let r = role.index();
        out.att[j] = treated(&|u| spec.effect_at(j, u));
        out.atu[j] = untreated(&|u| spec.effect_at(j, u));
        out.ate[j] = integral(&|u| spec.effect_at(j, u));
        let c = spec.effect[j];
        out.cate_variance[j] = (c[1] * c[1] + c[2] * c[2]) / 12.0;
        out.did_bias[j] = match spec.kind {
            DgpKind::AdditiveDid | DgpKind::LinearFactor => {
                let dg0 = spec.gamma[r][0] - spec.gamma[r0][0];
                let dg1 = spec.gamma[r][1] - spec.gamma[r0][1];
                out.latent_gap.0 * dg0 + out.latent_gap.1 * dg1
            }
            DgpKind::HiddenMarkov => {
                let change = |u| spec.untreated_mean(r, u) - spec.untreated_mean(r0, u);
                treated(&change) - untreated(&change)
            }
        };
    }
    Ok(out)
}

/// One replication's panel; unit `i` draws from stream `(seed, replication, i)`.
pub fn generate(spec: &DgpSpec, n: usize, seed: u64, replication: u64) -> Result<(PanelDataset, Vec<Latent>), SimulateError> {
    spec.validate()?;
    if n == 0 {
        return Err(SimulateError::TooSmall("one unit"));
    }
    let draws: Vec<(UnitRecord, Latent)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = unit_rng(seed, replication, i as u64);
            draw_unit(spec, i as u64, &mut rng)
        })
        .collect();
    let (mut units, latents): (Vec<UnitRecord>, Vec<Latent>) = draws.into_iter().unzip();
    if let Some(q) = spec.top_code_quantile {
        for r in 0..N_ROLES {
            let mut v: Vec<f64> = units.iter().map(|u| u.y[r]).collect();
            v.sort_by(f64::total_cmp);
            let cap = crate::estimators::empirical_quantile(&v, q);
            for u in &mut units {
                u.top_code[r] = cap;
                u.y[r] = u.y[r].min(cap);
            }
        }
    }
    Ok((
        PanelDataset {
            covariate_names: vec![],
            units,
        },
        latents,
    ))
}

fn draw_unit<R: Rng>(spec: &DgpSpec, id: u64, rng: &mut R) -> (UnitRecord, Latent) {
    let u = (open_unit(rng), open_unit(rng));
    let d = rng.random::<f64>() < spec.prob_treatment(u);
    let mut y0 = [0.0; N_ROLES];
    match spec.kind {
        DgpKind::AdditiveDid | DgpKind::LinearFactor => {
            for (r, y) in y0.iter_mut().enumerate() {
                let s = spec.noise_sd[r];
                let e: f64 = rng.sample(StandardNormal);
                *y = spec.level(r, u) * (s * e - 0.5 * s * s).exp();
            }
        }
        DgpKind::HiddenMarkov => {
            let zeta = spec.sigma_zeta * norm_quantile(u.0);
            let r0 = Role::Ref.index();
            let mut eta = [0.0; N_ROLES];
            eta[r0] = spec.eta_sd() * norm_quantile(u.1);
            // the stationary AR(1) runs the same law backward in time
            for r in (r0 + 1)..N_ROLES {
                let mut v = eta[r - 1];
                for _ in 0..(spec.times[r] - spec.times[r - 1]) {
                    v = spec.rho * v + spec.sigma_eta * rng.sample::<f64, _>(StandardNormal);
                }
                eta[r] = v;
            }
            for r in (0..r0).rev() {
                let mut v = eta[r + 1];
                for _ in 0..(spec.times[r + 1] - spec.times[r]) {
                    v = spec.rho * v + spec.sigma_eta * rng.sample::<f64, _>(StandardNormal);
                }
                eta[r] = v;
            }
            for r in 0..N_ROLES {
                let e: f64 = rng.sample(StandardNormal);
                y0[r] = (spec.mu[r] + zeta + eta[r] + spec.noise_sd[r] * e).exp();
            }
        }
    }
    let mut y = y0;
    if d {
        for (j, role) in POST.iter().enumerate() {
            let r = role.index();
            y[r] = (y0[r] + spec.effect_at(j, u)).max(0.0);
        }
    }
    (
        UnitRecord {
            id,
            cluster: id,
            d,
            x: vec![],
            y,
            top_code: [f64::INFINITY; N_ROLES],
        },
        Latent { u, untreated: y0 },
    )
}

/// Two generators of the same observable law: `A` draws a correlated
/// Gaussian latent `V` directly, `B` draws independent uniforms and maps
/// them to `V` by the inverse-CDF transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationPair {
    pub correlation: f64,
    pub loadings: [[f64; 2]; N_ROLES],
    pub intercepts: [f64; N_ROLES],
    pub noise_sd: f64,
    pub selection: [f64; 3],
}

impl Default for NormalizationPair {
    fn default() -> Self {
        NormalizationPair {
            correlation: 0.6,
            loadings: [[0.3, 0.1], [0.3, 0.0], [0.3, 0.05], [0.25, 0.2], [0.25, 0.3]],
            intercepts: [10.0, 10.05, 10.1, 10.0, 10.05],
            noise_sd: 0.2,
            selection: [-0.3, 0.8, 0.5],
        }
    }
}

impl NormalizationPair {
    fn unit_from_latent<R: Rng>(&self, id: u64, v: (f64, f64), rng: &mut R) -> UnitRecord {
        let s = self.selection;
        let d = rng.random::<f64>() < logistic(s[0] + s[1] * v.0 + s[2] * v.1);
        let y = std::array::from_fn(|r| {
            let e: f64 = rng.sample(StandardNormal);
            (self.intercepts[r] + self.loadings[r][0] * v.0 + self.loadings[r][1] * v.1 + self.noise_sd * e).exp()
        });
        UnitRecord {
            id,
            cluster: id,
            d,
            x: vec![],
            y,
            top_code: [f64::INFINITY; N_ROLES],
        }
    }

    pub fn generate_correlated(&self, n: usize, seed: u64) -> PanelDataset {
        let c = self.correlation;
        let units = (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = unit_rng(seed, 0, i);
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                self.unit_from_latent(i, (z1, c * z1 + (1.0 - c * c).sqrt() * z2), &mut rng)
            })
            .collect();
        PanelDataset {
            covariate_names: vec![],
            units,
        }
    }

    pub fn generate_uniform(&self, n: usize, seed: u64) -> PanelDataset {
        let c = self.correlation;
        let units = (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = unit_rng(seed, 1, i);
                let u = (open_unit(&mut rng), open_unit(&mut rng));
                let v1 = norm_quantile(u.0);
                let v2 = c * v1 + (1.0 - c * c).sqrt() * norm_quantile(u.1);
                self.unit_from_latent(i, (v1, v2), &mut rng)
            })
            .collect();
        PanelDataset {
            covariate_names: vec![],
            units,
        }
    }
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut sup: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        sup = sup.max((i as f64 / na - j as f64 / nb).abs());
    }
    sup
}

/// Asymptotic critical value of the two-sample KS statistic at level `alpha`.
pub fn ks_critical(n: usize, m: usize, alpha: f64) -> f64 {
    let c = (-0.5 * (alpha / 2.0).ln()).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McEstimator {
    /// DR matching DID on outcome changes (the raw DID without covariates).
    DidMatching,
    /// Latent-model ATT without parallel trends.
    Att,
}

impl McEstimator {
    pub fn name(self) -> &'static str {
        match self {
            McEstimator::DidMatching => "did_matching",
            McEstimator::Att => "att_nopt",
        }
    }

    pub fn parse(s: &str) -> Option<McEstimator> {
        [McEstimator::DidMatching, McEstimator::Att].into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub estimators: Vec<McEstimator>,
    pub fit: FitConfig,
    /// Nodes per dimension for the ATT's bias integral.
    pub grid_nodes: usize,
}

/// One estimator's results in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct McDraw {
    pub replication: usize,
    pub estimator: McEstimator,
    pub role: Role,
    pub estimate: f64,
    pub se: f64,
}

/// Summary per (estimator, period).
#[derive(Debug, Clone, PartialEq)]
pub struct McRow {
    pub estimator: McEstimator,
    pub role: Role,
    pub truth: f64,
    pub did_bias: f64,
    pub mean_bias: f64,
    pub empirical_sd: f64,
    /// `empirical_sd / sqrt(successes)`.
    pub mc_se: f64,
    pub mean_se: f64,
    pub coverage: f64,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSummary {
    pub rows: Vec<McRow>,
    pub draws: Vec<McDraw>,
    pub failure_messages: Vec<(usize, String)>,
}

fn replication_draws(spec: &DgpSpec, config: &McConfig, rep: usize) -> Result<Vec<McDraw>, String> {
    let (data, _) = generate(spec, config.n, config.seed, rep as u64).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    let mut fitted = None;
    for &estimator in &config.estimators {
        for role in POST {
            let (estimate, se) = match estimator {
                McEstimator::DidMatching => {
                    let e = did_matching(&data, role).map_err(|e| e.to_string())?;
                    (e.att, e.se)
                }
                McEstimator::Att => {
                    if fitted.is_none() {
                        let config = FitConfig {
                            seed: crate::rng::replication_seed(config.fit.seed, rep as u64),
                            ..config.fit.clone()
                        };
                        fitted = Some(fit(&data, &config).map_err(|e: MleError| e.to_string())?);
                    }
                    let grid = QuadratureGrid::new(config.grid_nodes);
                    let e = att(fitted.as_ref().unwrap(), &data, &grid, role).map_err(|e| e.to_string())?;
                    (e.theta, e.se)
                }
            };
            out.push(McDraw {
                replication: rep,
                estimator,
                role,
                estimate,
                se,
            });
        }
    }
    Ok(out)
}

/// Runs the suite over independent replications; failures are counted, not fatal.
pub fn monte_carlo(spec: &DgpSpec, config: &McConfig) -> Result<McSummary, SimulateError> {
    if config.replications < 2 {
        return Err(SimulateError::TooSmall("two replications"));
    }
    let truth = truth(spec)?;
    let results: Vec<Result<Vec<McDraw>, String>> = (0..config.replications)
        .into_par_iter()
        .map(|rep| replication_draws(spec, config, rep))
        .collect();
    let mut draws = Vec::new();
    let mut failure_messages = Vec::new();
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok(d) => draws.extend(d),
            Err(e) => failure_messages.push((rep, e)),
        }
    }
    let mut rows = Vec::new();
    for &estimator in &config.estimators {
        for (j, role) in POST.iter().enumerate() {
            let mine: Vec<&McDraw> = draws.iter().filter(|d| d.estimator == estimator && d.role == *role).collect();
            let m = mine.len() as f64;
            let est: Vec<f64> = mine.iter().map(|d| d.estimate).collect();
            let mean = exact_sum(&est) / m;
            let dev: Vec<f64> = est.iter().map(|v| (v - mean).powi(2)).collect();
            let sd = (exact_sum(&dev) / (m - 1.0)).sqrt();
            let ses: Vec<f64> = mine.iter().map(|d| d.se).collect();
            let covered = mine.iter().filter(|d| (d.estimate - truth.att[j]).abs() <= 1.96 * d.se).count();
            rows.push(McRow {
                estimator,
                role: *role,
                truth: truth.att[j],
                did_bias: truth.did_bias[j],
                mean_bias: mean - truth.att[j],
                empirical_sd: sd,
                mc_se: sd / m.sqrt(),
                mean_se: exact_sum(&ses) / m,
                coverage: covered as f64 / m,
                successes: mine.len(),
                failures: config.replications - mine.len(),
            });
        }
    }
    Ok(McSummary {
        rows,
        draws,
        failure_messages,
    })
}

impl McSummary {
    /// CSV table, one row per (estimator, period).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("estimator,period,truth,did_bias,mean_bias,empirical_sd,mc_se,mean_se,coverage,successes,failures\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{},{},{}\n",
                r.estimator.name(),
                r.role.name(),
                r.truth,
                r.did_bias,
                r.mean_bias,
                r.empirical_sd,
                r.mc_se,
                r.mean_se,
                r.coverage,
                r.successes,
                r.failures
            ));
        }
        out
    }
}
