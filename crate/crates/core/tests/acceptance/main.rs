//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Monte Carlo criteria run at a reduced scale by default; pass `--ignored`
//! (or set `LATENTDID_ACCEPTANCE=full`) for the full-size runs. Set
//! `LATENTDID_CRITERIA=1,5,9` to run a subset and `LATENTDID_FIT_REPS` to
//! override the replication count of the likelihood-based fixtures.

mod fixtures;
mod oracle;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use latentdid::cli::panel::{build_staggered_cohort, LongPanel, LongRow, PanelError};
use latentdid::estimators::att;
use latentdid::inference::cluster_bootstrap;
use latentdid::mle::{fit, gradient_check, FitConfig, SieveRestriction};
use latentdid::model::{Index, ModelParams, PanelDataset, Role, ZeroLayerState, N_ROLES, U2_DEPENDENT_TERMS};
use latentdid::quadrature::QuadratureGrid;
use latentdid::sieve::{
    cell_loglik_both_censored, cell_loglik_one_censored, cell_loglik_uncensored, h1, h2, BivariateShape,
    LocationScale, UnivariateShape, BIVARIATE_WEIGHTS,
};
use latentdid::simulate::{generate, ks_critical, ks_statistic, NormalizationPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fixtures::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn fail(detail: impl Into<String>) -> Outcome {
    outcome(false, detail.into())
}

/// `|mean − target| < 2 MC SE`.
fn within_mc(values: &[f64], target: f64) -> (bool, String) {
    let m = moments(values);
    let ok = (m.mean - target).abs() < 2.0 * m.mc_se;
    (ok, format!("mean {:.1} vs {:.1} (2 MC SE {:.1})", m.mean, target, 2.0 * m.mc_se))
}

struct Suite {
    scale: Scale,
    additive: Option<AdditiveFixture>,
    factor: Option<FactorFixture>,
    did_additive: Option<Result<DidDraws, String>>,
}

impl Suite {
    fn additive(&mut self) -> &AdditiveFixture {
        let scale = self.scale;
        self.additive.get_or_insert_with(|| additive_fixture(&scale))
    }

    fn factor(&mut self) -> &FactorFixture {
        let scale = self.scale;
        self.factor.get_or_insert_with(|| factor_fixture(&scale))
    }

    fn did_additive(&mut self) -> &Result<DidDraws, String> {
        let scale = self.scale;
        self.did_additive
            .get_or_insert_with(|| did_draws(&additive_spec(EFFECT), &scale, 701))
    }
}

/// Replications that failed, if more than a tenth of the total.
fn too_many_failures(failures: &[(usize, String)], total: usize) -> Option<Outcome> {
    (failures.len() * 10 > total).then(|| {
        fail(format!(
            "{} of {total} replications failed; first: {:?}",
            failures.len(),
            failures.first()
        ))
    })
}

// 1
fn density_normalization(_: &mut Suite) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut pointwise: f64 = 0.0;
    for _ in 0..1000 {
        let u = UnivariateShape(std::array::from_fn(|_| rng.random_range(-1.5..1.5)));
        let b = BivariateShape(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
        let t = oracle::TAIL;
        let one = oracle::integrate(&|v| h1(v, &u), -t, t, 1e-11);
        let two = oracle::integrate(&|v1| oracle::integrate(&|v2| h2(v1, v2, &b), -t, t, 1e-11), -t, t, 1e-10);
        worst = worst.max((one - 1.0).abs()).max((two - 1.0).abs());
        for v in [-3.1, -0.4, 0.0, 1.7, 4.2] {
            pointwise = pointwise.max((h1(v, &u) - oracle::h1(v, &u.0)).abs());
            pointwise = pointwise.max((h2(v, 0.6 - v, &b) - oracle::h2(v, 0.6 - v, &b.matrix())).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-7 && pointwise < 1e-12 && secs < 30.0,
        format!(
            "1000 shapes, max |∫h − 1| = {worst:.2e} (tol 1e-7), max pointwise gap to the recurrence oracle {pointwise:.1e}, {secs:.1}s (limit 30s)"
        ),
    )
}

// 2
fn censored_cells(_: &mut Suite) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 3];
    for _ in 0..50 {
        let omega = BivariateShape(std::array::from_fn::<f64, BIVARIATE_WEIGHTS, _>(|_| rng.random_range(-0.6..0.6)));
        let w = omega.matrix();
        let ls: [LocationScale; 2] =
            std::array::from_fn(|_| LocationScale::new(rng.random_range(9.0..11.0), rng.random_range(0.2..1.2)));
        let draw = |rng: &mut ChaCha8Rng, ls: &LocationScale| ls.mu + ls.sigma() * rng.random_range(-2.0..2.0);
        let (y1, y2) = (draw(&mut rng, &ls[0]), draw(&mut rng, &ls[1]));
        let (c1, c2) = (draw(&mut rng, &ls[0]), draw(&mut rng, &ls[1]));
        let (v1, v2) = (ls[0].standardize(y1), ls[1].standardize(y2));
        let (a1, a2) = (ls[0].standardize(c1), ls[1].standardize(c2));
        let (s1, s2) = (ls[0].sigma(), ls[1].sigma());
        let tol = 1e-14;

        let interior = (oracle::h2(v1, v2, &w) / (s1 * s2)).ln();
        let one = (oracle::integrate_above(&|t| oracle::h2(v1, t, &w), a2, tol) / s1).ln();
        let both = oracle::integrate_above(
            &|s| oracle::integrate_above(&|t| oracle::h2(s, t, &w), a2, tol),
            a1,
            tol,
        )
        .ln();
        let got = [
            cell_loglik_uncensored(y1, y2, ls[0], ls[1], &omega),
            cell_loglik_one_censored(y1, c2, ls[0], ls[1], &omega),
            cell_loglik_both_censored(c1, c2, ls[0], ls[1], &omega),
        ];
        for (k, want) in [interior, one, both].iter().enumerate() {
            worst[k] = worst[k].max((got[k] - want).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.iter().all(|&e| e < 1e-7) && secs < 60.0,
        format!(
            "50 points, max |Δ log| interior {:.1e}, one censored {:.1e}, both censored {:.1e} (tol 1e-7), {secs:.1}s",
            worst[0], worst[1], worst[2]
        ),
    )
}

/// Every block active, non-Gaussian shapes and one covariate.
fn rich_params(seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut small = |s: f64| rng.random_range(-s..s);
    let mut p = ModelParams::zeros(1);
    let index = |base: f64, scale: f64, small: &mut dyn FnMut(f64) -> f64| {
        let mut idx = Index::constant(base, 1);
        for a in idx.alpha.iter_mut().skip(1) {
            *a = small(scale);
        }
        idx.beta[0] = small(scale);
        idx
    };
    p.treatment = index(0.0, 0.5, &mut small);
    for r in 0..N_ROLES {
        p.mu[r] = index(10.0, 0.3, &mut small);
        p.log_sigma[r] = index(-1.0, 0.2, &mut small);
    }
    for k in U2_DEPENDENT_TERMS {
        p.mu[Role::Pre1.index()].alpha[k] = 0.0;
    }
    for layer in 0..3 {
        p.zero[layer] = index(-1.5, 0.3, &mut small);
    }
    p.zero_state = [ZeroLayerState::Active; 3];
    p.d_shift_mu0 = small(0.2);
    p.d_shift_sigma0 = small(0.2);
    p.z_shift_mu = [small(0.2), small(0.2)];
    p.z_shift_sigma = [small(0.2), small(0.2)];
    p.omega_pre = BivariateShape(std::array::from_fn(|_| small(0.3)));
    p.omega_0 = UnivariateShape(std::array::from_fn(|_| small(0.3)));
    p.omega_post = BivariateShape(std::array::from_fn(|_| small(0.3)));
    p
}

// 3
fn score_correctness(_: &mut Suite) -> Outcome {
    let start = Instant::now();
    let covariates = vec![vec![0.0], vec![1.0], vec![0.4]];
    let caps = [f64::INFINITY, f64::INFINITY, 10.4f64.exp(), 10.3f64.exp(), 10.5f64.exp()];
    let mut worst: f64 = 0.0;
    for point in 0..3u64 {
        let params = rich_params(30 + point);
        let data = match params.simulate_from_model_topcoded(&covariates, 300, 40 + point, caps) {
            Ok(d) => d,
            Err(e) => return fail(e.to_string()),
        };
        let grid = QuadratureGrid::new(6);
        match gradient_check(&params, &data, &grid, 20, 1e-4, 50 + point) {
            Ok(report) => worst = worst.max(report.max_relative_error),
            Err(e) => return fail(e.to_string()),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-5 && secs < 120.0,
        format!("3 points × 20 directions, max relative error {worst:.2e} (tol 1e-5), {secs:.1}s"),
    )
}

fn self_consistency_truth() -> ModelParams {
    let mut p = ModelParams::zeros(0);
    for r in 0..N_ROLES {
        p.mu[r] = Index::constant(10.0, 0);
        p.mu[r].alpha[1] = 0.5;
        p.log_sigma[r] = Index::constant(-0.7, 0);
    }
    p.mu[Role::Pre2.index()].alpha[2] = 0.4;
    p.mu[Role::Post1.index()].alpha[2] = 0.3;
    p.mu[Role::Post2.index()].alpha[2] = -0.3;
    p.log_sigma[Role::Ref.index()].alpha[1] = 0.2;
    p.treatment.alpha[0] = -0.2;
    p.treatment.alpha[1] = 0.8;
    p.treatment.alpha[2] = -0.5;
    p.d_shift_mu0 = 0.1;
    p.zero_state = [ZeroLayerState::NeverZero; 3];
    p
}

/// `ψ` with `U₁ → 1 − U₁` and/or `U₂ → 1 − U₂`; shifted Chebyshev terms of
/// odd degree change sign.
fn reflect(params: &ModelParams, flip: (bool, bool)) -> Vec<f64> {
    let pairs = latentdid::basis::PolyDegreeCap::CHEBYSHEV.index_pairs();
    let mut p = params.clone();
    let apply = |idx: &mut Index| {
        for (k, &(j, l)) in pairs.iter().enumerate().take(idx.alpha.len()) {
            let odd = (flip.0 && j % 2 == 1) ^ (flip.1 && l % 2 == 1);
            if odd {
                idx.alpha[k] = -idx.alpha[k];
            }
        }
    };
    apply(&mut p.treatment);
    for r in 0..N_ROLES {
        apply(&mut p.mu[r]);
        apply(&mut p.log_sigma[r]);
    }
    for layer in 0..3 {
        apply(&mut p.zero[layer]);
    }
    p.to_flat()
}

// 4
fn self_consistency(suite: &mut Suite) -> Outcome {
    let scale = suite.scale;
    let truth = self_consistency_truth();
    let mask = SieveRestriction::uniform(1, true).mask(&truth.layout());
    let orientations: Vec<Vec<f64>> = [(false, false), (true, false), (false, true), (true, true)]
        .iter()
        .map(|&f| reflect(&truth, f))
        .collect();
    let mut covered = 0usize;
    let mut total = 0usize;
    let mut all_within = 0usize;
    let mut failures = Vec::new();
    for rep in 0..scale.self_consistency_reps as u64 {
        let data = match truth.simulate_from_model(&[], scale.self_consistency_n, 900 + rep) {
            Ok(d) => d,
            Err(e) => return fail(e.to_string()),
        };
        let config = FitConfig {
            starts: scale.self_consistency_starts,
            grid_nodes: scale.grid_nodes,
            fixed_mask: Some(mask.clone()),
            seed: 70 + rep,
            ..FitConfig::default()
        };
        let result = match fit(&data, &config) {
            Ok(r) => r,
            Err(e) => {
                failures.push((rep as usize, e.to_string()));
                continue;
            }
        };
        let Some(cov) = result.hessian_inverse() else {
            failures.push((rep as usize, "singular Hessian".into()));
            continue;
        };
        let n = data.len() as f64;
        let est = result.psi_hat.to_flat();
        let z: Vec<Vec<f64>> = orientations
            .iter()
            .map(|star| {
                result
                    .free
                    .iter()
                    .enumerate()
                    .map(|(j, &k)| (est[k] - star[k]) / (-cov[(j, j)] / n).sqrt())
                    .collect()
            })
            .collect();
        let best = z
            .iter()
            .min_by(|a, b| {
                let ss = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>();
                ss(a).total_cmp(&ss(b))
            })
            .unwrap();
        let inside = best.iter().filter(|v| v.abs() <= 3.0).count();
        covered += inside;
        total += best.len();
        all_within += usize::from(inside == best.len());
    }
    if let Some(o) = too_many_failures(&failures, scale.self_consistency_reps) {
        return o;
    }
    let share = covered as f64 / total as f64;
    outcome(
        share >= 0.95,
        format!(
            "n={} reps={} starts={}: {:.1}% of component estimates within 3 SE (need 95%), {} of {} replications entirely within",
            scale.self_consistency_n,
            scale.self_consistency_reps - failures.len(),
            scale.self_consistency_starts,
            100.0 * share,
            all_within,
            scale.self_consistency_reps - failures.len()
        ),
    )
}

fn coverage(est: &[f64], se: &[f64], truth: f64) -> f64 {
    let hit = est.iter().zip(se).filter(|(e, s)| (*e - truth).abs() <= 1.96 * *s).count();
    hit as f64 / est.len() as f64
}

// 5
fn parallel_trends(suite: &mut Suite) -> Outcome {
    let scale = suite.scale;
    let mut ok = true;
    let mut parts = Vec::new();
    match suite.did_additive() {
        Err(e) => return fail(e.clone()),
        Ok(did) => {
            for j in 0..2 {
                let (pass, text) = within_mc(&did.att[j], did.truth.att[j]);
                let cov = coverage(&did.att[j], &did.se[j], did.truth.att[j]);
                let cov_ok = (0.91..=0.98).contains(&cov);
                ok &= pass && cov_ok;
                parts.push(format!("did t{} {text}, coverage {cov:.3}", j + 1));
            }
        }
    }
    let fx = suite.additive();
    if let Some(o) = too_many_failures(&fx.failures, scale.fit_reps) {
        return o;
    }
    for j in 0..2 {
        let est: Vec<f64> = fx.reps.iter().map(|r| r.att[j].theta).collect();
        let (pass, text) = within_mc(&est, fx.truth.att[j]);
        ok &= pass;
        parts.push(format!("att t{} {text}", j + 1));
    }
    outcome(
        ok,
        format!(
            "did n={} reps={}; att n={} reps={}: {}",
            scale.did_n,
            scale.did_reps,
            scale.fit_n,
            fx.reps.len(),
            parts.join("; ")
        ),
    )
}

// 6
fn trend_violation(suite: &mut Suite) -> Outcome {
    let scale = suite.scale;
    let did = match did_draws(&factor_spec(), &scale, 702) {
        Ok(d) => d,
        Err(e) => return fail(e),
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for j in 0..2 {
        let bias: Vec<f64> = did.att[j].iter().map(|v| v - did.truth.att[j]).collect();
        let (pass, text) = within_mc(&bias, did.truth.did_bias[j]);
        ok &= pass;
        parts.push(format!("did bias t{} {text}", j + 1));
    }
    // the analytic bias doubles from t=1 to t=2, and so must the estimated one
    let analytic_linear = (did.truth.did_bias[1] - 2.0 * did.truth.did_bias[0]).abs() <= 1e-9 * did.truth.did_bias[1].abs();
    let curvature: Vec<f64> = (0..did.att[0].len())
        .map(|r| (did.att[1][r] - did.truth.att[1]) - 2.0 * (did.att[0][r] - did.truth.att[0]))
        .collect();
    let (linear, text) = within_mc(&curvature, 0.0);
    ok &= analytic_linear && linear;
    parts.push(format!("bias(t2) − 2·bias(t1) {text}"));

    let fx = suite.factor();
    if let Some(o) = too_many_failures(&fx.failures, scale.fit_reps) {
        return o;
    }
    for j in 0..2 {
        let bias: Vec<f64> = fx.reps.iter().map(|r| r.att[j].theta - fx.truth.att[j]).collect();
        let (pass, text) = within_mc(&bias, 0.0);
        ok &= pass;
        parts.push(format!("att bias t{} {text}", j + 1));
    }
    outcome(
        ok,
        format!(
            "did n={} reps={}; att n={} reps={}: {}",
            scale.did_n,
            scale.did_reps,
            scale.fit_n,
            fx.reps.len(),
            parts.join("; ")
        ),
    )
}

// 7
fn att_structure(suite: &mut Suite) -> Outcome {
    let scale = suite.scale;
    let eps = 64.0 * f64::EPSILON;
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for r in &suite.additive().reps {
        worst = worst.max(r.identity_error);
        runs += 1;
    }
    for r in &suite.factor().reps {
        worst = worst.max(r.identity_error);
        runs += 1;
    }
    // treatment independent of U: selection on nothing, u-free propensity
    let mut spec = additive_spec(EFFECT);
    spec.selection = [-0.2, 0.0, 0.0];
    let (data, _) = match generate(&spec, scale.fit_n, 703, 0) {
        Ok(d) => d,
        Err(e) => return fail(e.to_string()),
    };
    let mut restriction = restriction();
    restriction.treatment_degree = 0;
    let config = FitConfig {
        fixed_mask: Some(restriction.mask(&ModelParams::zeros(0).layout())),
        ..fit_config(&scale, 0)
    };
    let fitted = match fit(&data, &config) {
        Ok(f) => f,
        Err(e) => return fail(e.to_string()),
    };
    let grid = QuadratureGrid::new(scale.grid_nodes);
    let mut zero = true;
    for role in POST {
        match att(&fitted, &data, &grid, role) {
            Ok(e) => {
                zero &= e.bias_correction == 0.0 && e.g.iter().all(|&g| g == 0.0) && e.theta == e.theta_m;
                worst = worst.max(identity_error(&e, &data));
                runs += 1;
            }
            Err(e) => return fail(e.to_string()),
        }
    }
    outcome(
        zero && worst <= eps,
        format!(
            "u-independent treatment: bias correction exactly 0 = {zero}; identity over {runs} estimates, max relative error {worst:.1e} (tol {eps:.1e})"
        ),
    )
}

/// Band for a ratio whose denominator is a standard deviation estimated from
/// `draws` values; at reduced scale it widens by two Gaussian standard
/// errors of that estimate.
fn ratio_band(base: f64, draws: usize, full: bool) -> f64 {
    if full {
        base
    } else {
        base + 2.0 / (2.0 * (draws as f64 - 1.0)).sqrt()
    }
}

fn se_ratio(est: &[f64], se: &[f64]) -> f64 {
    let sd = moments(est).sd;
    se.iter().sum::<f64>() / se.len() as f64 / sd
}

// 8
fn standard_errors(suite: &mut Suite) -> Outcome {
    let scale = suite.scale;
    let mut ok = true;
    let mut parts = Vec::new();
    if let Ok(did) = suite.did_additive() {
        for j in 0..2 {
            let ratio = se_ratio(&did.att[j], &did.se[j]);
            ok &= (ratio - 1.0).abs() < ratio_band(0.15, did.att[j].len(), true);
            parts.push(format!("did t{} mean SE/SD {ratio:.3}", j + 1));
        }
    }
    let fx = suite.factor();
    if let Some(o) = too_many_failures(&fx.failures, scale.fit_reps) {
        return o;
    }
    for j in 0..2 {
        let est: Vec<f64> = fx.reps.iter().map(|r| r.att[j].theta).collect();
        let se: Vec<f64> = fx.reps.iter().map(|r| r.att[j].se).collect();
        let ratio = se_ratio(&est, &se);
        let band = ratio_band(0.15, est.len(), scale.full);
        ok &= (ratio - 1.0).abs() < band;
        parts.push(format!("att t{} mean SE/SD {ratio:.3} over {} reps (band {band:.3})", j + 1, est.len()));
    }
    let grid = QuadratureGrid::new(scale.grid_nodes);
    let mut ratios = Vec::new();
    for (k, r) in fx.reps.iter().take(scale.bootstrap_datasets).enumerate() {
        let config = fit_config(&scale, k as u64);
        match cluster_bootstrap(&r.fit, &r.data, &grid, Role::Post1, scale.bootstrap_draws, 800 + k as u64, &config) {
            Ok(b) => ratios.push(b.se / r.att[0].se),
            Err(e) => return fail(e.to_string()),
        }
    }
    let boot_band = ratio_band(0.2, scale.bootstrap_draws, scale.full);
    let boot_ok = ratios.len() == scale.bootstrap_datasets && ratios.iter().all(|q| (q - 1.0).abs() < boot_band);
    ok &= boot_ok;
    let shown: Vec<String> = ratios.iter().map(|q| format!("{q:.3}")).collect();
    parts.push(format!(
        "bootstrap/analytic SE ({} draws, band {boot_band:.3}) [{}]",
        scale.bootstrap_draws,
        shown.join(", ")
    ));
    outcome(ok, parts.join("; "))
}

// 9
fn constraint_equivalence(suite: &mut Suite) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut datasets = 0;
    for r in &suite.additive().reps {
        worst = worst.max(r.constraint_gap);
        datasets += 1;
    }
    for r in &suite.factor().reps {
        worst = worst.max(r.constraint_gap);
        datasets += 1;
    }
    outcome(
        datasets > 0 && worst <= 1e-8,
        format!("{datasets} simulated datasets, max post-event gap {worst:.1e} (tol 1e-8)"),
    )
}

// 10
fn quantile_effects(suite: &mut Suite) -> Outcome {
    let scale = suite.scale;
    let fx = suite.additive();
    if let Some(o) = too_many_failures(&fx.failures, scale.fit_reps) {
        return o;
    }
    let mut ok = true;
    let mut parts = Vec::new();
    for (t, tau) in TAUS.iter().enumerate() {
        let zero: Vec<f64> = fx.reps.iter().map(|r| r.qtt_zero[t]).collect();
        let shift: Vec<f64> = fx.reps.iter().map(|r| r.qtt_shift[t]).collect();
        let (a, ta) = within_mc(&zero, 0.0);
        let (b, tb) = within_mc(&shift, EFFECT);
        ok &= a && b;
        parts.push(format!("τ={tau}: zero {ta}, shift {tb}"));
    }
    outcome(ok, format!("n={} reps={}: {}", scale.fit_n, fx.reps.len(), parts.join("; ")))
}

// 11
fn conditional_effects(suite: &mut Suite) -> Outcome {
    let scale = suite.scale;
    let fx = suite.factor();
    if let Some(o) = too_many_failures(&fx.failures, scale.fit_reps) {
        return o;
    }
    let mut ok = true;
    let mut parts = Vec::new();
    let series: [(&str, fn(&latentdid::estimators::CateEstimate) -> f64); 4] = [
        ("ate (uniform)", |c| c.ate_uniform_prior),
        ("ate (sample)", |c| c.ate_sample_mixture),
        ("atu", |c| c.atu),
        ("att", |c| c.att),
    ];
    for (name, get) in series {
        let v: Vec<f64> = fx.reps.iter().map(|r| get(&r.cate_constant)).collect();
        let (pass, text) = within_mc(&v, EFFECT);
        ok &= pass;
        parts.push(format!("{name} {text}"));
    }
    let bound = (0.05 * EFFECT).powi(2);
    let constant_var = moments(&fx.reps.iter().map(|r| r.cate_constant.var_lower_bound).collect::<Vec<_>>()).mean;
    ok &= constant_var < bound;
    parts.push(format!("constant var bound {constant_var:.0} (< {bound:.0})"));
    let target = HET_SLOPE * HET_SLOPE / 12.0;
    let het_var = moments(&fx.reps.iter().map(|r| r.cate_het.var_lower_bound).collect::<Vec<_>>()).mean;
    ok &= (het_var / target - 1.0).abs() < 0.15;
    parts.push(format!("heterogeneous var bound {het_var:.0} vs {target:.0} (±15%)"));
    outcome(ok, format!("n={} reps={}: {}", scale.fit_n, fx.reps.len(), parts.join("; ")))
}

// 12
fn normalization_equivalence(_: &mut Suite) -> Outcome {
    let n = 20_000;
    let pair = NormalizationPair::default();
    let a = pair.generate_correlated(n, 1201);
    let b = pair.generate_uniform(n, 1202);
    let mut worst_ratio: f64 = 0.0;
    let mut tests = 0;
    let share = |d: &PanelDataset| d.units.iter().filter(|u| u.d).count() as f64 / d.len() as f64;
    let d_stat = (share(&a) - share(&b)).abs();
    worst_ratio = worst_ratio.max(d_stat / ks_critical(n, n, 0.01));
    tests += 1;
    for arm in [false, true] {
        for r in 0..N_ROLES {
            let pick = |d: &PanelDataset| -> Vec<f64> { d.units.iter().filter(|u| u.d == arm).map(|u| u.y[r]).collect() };
            let (ya, yb) = (pick(&a), pick(&b));
            let stat = ks_statistic(&ya, &yb);
            worst_ratio = worst_ratio.max(stat / ks_critical(ya.len(), yb.len(), 0.01));
            tests += 1;
        }
    }
    outcome(
        worst_ratio < 1.0,
        format!("{tests} margins (treatment share and each period by arm), n={n} per generator, max KS / 1% critical value = {worst_ratio:.3}"),
    )
}

fn long_panel(units: &[(u64, Option<i64>)]) -> LongPanel {
    LongPanel {
        covariate_names: vec![],
        rows: units
            .iter()
            .flat_map(|&(unit, event)| {
                (0..=10).map(move |period| LongRow {
                    unit,
                    cluster: unit,
                    period,
                    outcome: 1000.0 * unit as f64 + period as f64,
                    event,
                    top_code: f64::INFINITY,
                    x: vec![],
                })
            })
            .collect(),
    }
}

// 13
fn staggered_builder(_: &mut Suite) -> Outcome {
    let mut problems = Vec::new();
    match build_staggered_cohort(&long_panel(&[(3, Some(3)), (5, Some(5)), (9, Some(9)), (100, None)]), 2, 4) {
        Ok(s) => {
            let excluded: Vec<u64> = s.panel.excluded.iter().map(|e| e.unit).collect();
            if s.treated != [3] || s.control != [9, 100] || excluded != [5] {
                problems.push(format!("{{3,5,9,never}}: {:?} {:?} {excluded:?}", s.treated, s.control));
            }
        }
        Err(e) => problems.push(e.to_string()),
    }
    match build_staggered_cohort(&long_panel(&[(1, Some(2)), (3, Some(3)), (4, Some(4))]), 2, 1) {
        Ok(s) if s.treated == [3] && s.control == [4] && s.panel.excluded.len() == 1 => {}
        other => problems.push(format!("h=1: {other:?}")),
    }
    if build_staggered_cohort(&long_panel(&[(1, None), (2, None)]), 2, 4) != Err(PanelError::NoTreated(3)) {
        problems.push("never-treated panel accepted".into());
    }
    // partition of the input on random panels
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut checked = 0;
    for _ in 0..500 {
        let units: Vec<(u64, Option<i64>)> = (0..rng.random_range(2..30u64))
            .map(|u| (u, rng.random_bool(0.7).then(|| rng.random_range(0..12))))
            .collect();
        let g = rng.random_range(0..8);
        let h = rng.random_range(1..5);
        let Ok(s) = build_staggered_cohort(&long_panel(&units), g, h) else {
            continue;
        };
        checked += 1;
        let t: BTreeSet<u64> = s.treated.iter().copied().collect();
        let c: BTreeSet<u64> = s.control.iter().copied().collect();
        let x: BTreeSet<u64> = s.panel.excluded.iter().map(|e| e.unit).collect();
        let all: BTreeSet<u64> = units.iter().map(|u| u.0).collect();
        let sizes = s.treated.len() + s.control.len() + s.panel.excluded.len();
        let union: BTreeSet<u64> = t.union(&c).chain(x.iter()).copied().collect();
        if union != all || sizes != all.len() {
            problems.push(format!("partition broken for g={g} h={h}"));
        }
        for &(u, e) in &units {
            let want = match e {
                Some(e) if e <= g || (g + 2..=g + h).contains(&e) => 'x',
                Some(e) if e == g + 1 => 't',
                _ => 'c',
            };
            let got = if t.contains(&u) { 't' } else if c.contains(&u) { 'c' } else { 'x' };
            if want != got {
                problems.push(format!("unit {u} event {e:?} g={g} h={h}: {got} != {want}"));
            }
        }
    }
    problems.truncate(3);
    outcome(
        problems.is_empty() && checked > 100,
        format!("examples and {checked} random panels partition exactly; problems: {problems:?}"),
    )
}

// 14
fn determinism(_: &mut Suite) -> Outcome {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let config = match fs::read_to_string(data.join("golden_att.conf")) {
        Ok(c) => c,
        Err(e) => return fail(e.to_string()),
    };
    let golden = fs::read(data.join("golden_att_estimates.csv")).unwrap_or_default();
    let mut runs = Vec::new();
    for threads in ["1", "1", "2"] {
        let dir = tempfile::tempdir().expect("temp dir");
        let path = dir.path().join("golden.conf");
        fs::write(&path, &config).expect("write config");
        let status = Command::new(env!("CARGO_BIN_EXE_latentdid"))
            .arg("--config")
            .arg(&path)
            .args(["--threads", threads])
            .output();
        match status {
            Ok(o) if o.status.success() => {}
            Ok(o) => return fail(String::from_utf8_lossy(&o.stderr).into_owned()),
            Err(e) => return fail(e.to_string()),
        }
        let read = |name: &str| fs::read(dir.path().join("out").join(name)).unwrap_or_default();
        runs.push([read("estimates.csv"), read("influence.csv"), read("fitlog.txt")]);
    }
    let identical = runs.windows(2).all(|w| w[0] == w[1]);
    let matches_golden = runs[0][0] == golden;
    outcome(
        identical && matches_golden,
        format!("two runs at 1 thread and one at 2: outputs identical = {identical}, estimates match golden = {matches_golden}"),
    )
}

/// Id, name, whether the Monte Carlo scale applies, and the check.
type Criterion = (u32, &'static str, bool, fn(&mut Suite) -> Outcome);

const CRITERIA: [Criterion; 14] = [
    (1, "density normalization", false, density_normalization),
    (2, "closed-form censored cells", false, censored_cells),
    (3, "score correctness", false, score_correctness),
    (4, "self-consistency MLE", true, self_consistency),
    (5, "parallel-trends sanity", true, parallel_trends),
    (6, "parallel-trends violation", true, trend_violation),
    (7, "ATT structure", true, att_structure),
    (8, "influence-function SEs", true, standard_errors),
    (9, "constraint-set equivalence", true, constraint_equivalence),
    (10, "QTT", true, quantile_effects),
    (11, "CATE/ATE/ATU", true, conditional_effects),
    (12, "normalization equivalence", false, normalization_equivalence),
    (13, "staggered builder", false, staggered_builder),
    (14, "end-to-end determinism", false, determinism),
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    // honour a libtest-style name filter passed to every test binary
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let full = args.iter().any(|a| a == "--ignored" || a == "--include-ignored")
        || std::env::var("LATENTDID_ACCEPTANCE").is_ok_and(|v| v == "full");
    let only: Option<BTreeSet<u32>> = std::env::var("LATENTDID_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut scale = if full { Scale::full() } else { Scale::reduced() };
    if let Some(reps) = std::env::var("LATENTDID_FIT_REPS").ok().and_then(|v| v.parse().ok()) {
        scale.fit_reps = reps;
    }
    let mut suite = Suite {
        scale,
        additive: None,
        factor: None,
        did_additive: None,
    };
    println!("acceptance suite, {} scale", scale.describe());
    let mut failed = Vec::new();
    let total = Instant::now();
    for (id, name, scaled, run) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = run(&mut suite);
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        let tag = if scaled { format!(" [{} scale]", scale.describe()) } else { String::new() };
        println!(
            "criterion {id:>2} {verdict} {name}{tag}: {} ({:.1}s)",
            result.detail,
            start.elapsed().as_secs_f64()
        );
        if !result.pass {
            failed.push(id);
        }
    }
    println!("acceptance finished in {:.1}s", total.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
