//! Executes a [`RunConfig`] and writes its artifacts.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::estimators::{
    att_point, cate, did_matching, event_study_unit_trends, qtt, ConstraintSet, EventStudyEstimate,
};
use crate::inference::{att_standard_error, cluster_bootstrap};
use crate::mle::{fit, fit_treated_arm, FitConfig, FitResult};
use crate::model::{ModelParams, PanelDataset, Role};
use crate::quadrature::QuadratureGrid;
use crate::simulate::{generate, monte_carlo, truth, McConfig};

use super::config::{AnalysisKind, Design, RunConfig, Source};
use super::panel::{build_stacked, build_staggered_cohort, ingest, long_from_dataset, write_long, AnalysisPanel, LongPanel};
use super::CliError;

pub const SCHEMA_VERSION: u32 = 1;
/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;
const POST: [Role; 2] = [Role::Post1, Role::Post2];

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub analysis: String,
    pub pair: String,
    pub period: Option<i64>,
    pub tau: Option<f64>,
    pub estimate: f64,
    pub se: Option<f64>,
    pub n_treated: usize,
    pub n_control: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceRow {
    pub analysis: String,
    pub pair: String,
    pub period: i64,
    pub unit: u64,
    pub cluster: u64,
    pub a: f64,
    pub g_centered: f64,
    pub score_channel: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub estimates: Vec<EstimateRow>,
    pub influence: Vec<InfluenceRow>,
    pub event_studies: Vec<EventStudyEstimate>,
    pub log: Vec<String>,
    /// Extra artifacts as (file name, contents).
    pub files: Vec<(String, String)>,
}

impl RunOutput {
    fn merge(&mut self, other: RunOutput) {
        self.estimates.extend(other.estimates);
        self.influence.extend(other.influence);
        self.event_studies.extend(other.event_studies);
        self.log.extend(other.log);
        self.files.extend(other.files);
    }
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        v.to_string()
    }
}

pub fn estimates_csv(rows: &[EstimateRow]) -> String {
    let mut out = format!("#schema_version={SCHEMA_VERSION}\n");
    out.push_str("analysis,pair,period,tau,estimate,se,ci_lower,ci_upper,n_treated,n_control\n");
    for r in rows {
        let (se, lo, hi) = match r.se {
            Some(se) => (fmt(se), fmt(r.estimate - Z95 * se), fmt(r.estimate + Z95 * se)),
            None => (String::new(), String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{se},{lo},{hi},{},{}",
            r.analysis,
            r.pair,
            r.period.map_or(String::new(), |p| p.to_string()),
            r.tau.map_or(String::new(), |t| t.to_string()),
            fmt(r.estimate),
            r.n_treated,
            r.n_control
        );
    }
    out
}

pub fn influence_csv(rows: &[InfluenceRow]) -> String {
    let mut out = String::from("analysis,pair,period,unit,cluster,a,g_centered,score_channel,total\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:e},{:e},{:e},{:e}",
            r.analysis, r.pair, r.period, r.unit, r.cluster, r.a, r.g_centered, r.score_channel, r.total
        );
    }
    out
}

pub fn constraint_name(c: ConstraintSet) -> &'static str {
    match c {
        ConstraintSet::ZeroAllPre => "zero_all_pre",
        ConstraintSet::ZeroAverageFlatTrend => "zero_average_flat_trend",
    }
}

pub fn event_plot_csv(studies: &[EventStudyEstimate]) -> String {
    let mut out = String::from("constraint,event_time,coefficient,se,ci_lower,ci_upper\n");
    for s in studies {
        for (j, &k) in s.event_times.iter().enumerate() {
            let (b, se) = (s.beta[j], s.se[j]);
            let _ = writeln!(
                out,
                "{},{k},{},{},{},{}",
                constraint_name(s.constraint_set),
                fmt(b),
                fmt(se),
                fmt(b - Z95 * se),
                fmt(b + Z95 * se)
            );
        }
    }
    out
}

fn fit_config(config: &RunConfig, p: usize) -> FitConfig {
    let e = &config.estimator;
    FitConfig {
        starts: e.starts,
        grad_tol: e.grad_tol,
        max_iter: e.max_iter,
        grid_nodes: e.grid_nodes,
        seed: config.seed,
        fixed_mask: e.restriction.map(|r| r.mask(&ModelParams::zeros(p).layout())),
        ..FitConfig::default()
    }
}

fn estimation<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Estimation(format!("{context}: {e}"))
}

fn load_long(config: &RunConfig) -> Result<LongPanel, CliError> {
    match &config.source {
        Source::Csv { path, schema } => Ok(ingest(path, schema)?),
        Source::Simulate => {
            let sim = config.simulate.as_ref().expect("simulate options");
            let (data, _) = generate(&sim.spec, sim.n, config.seed, sim.replication).map_err(estimation("simulation"))?;
            Ok(long_from_dataset(&data, &sim.spec.times))
        }
    }
}

fn load_sample(config: &RunConfig, log: &mut Vec<String>) -> Result<AnalysisPanel, CliError> {
    let long = load_long(config)?;
    log.push(format!("input rows {}", long.rows.len()));
    let panel = match &config.design {
        Design::Stacked(options) => {
            let p = build_stacked(&long, options)?;
            log.push(format!("stacked units {} for event years {:?}", p.units.len(), options.event_years));
            p
        }
        Design::Staggered { cohort, horizon } => {
            let s = build_staggered_cohort(&long, *cohort, *horizon)?;
            log.push(format!(
                "cohort g={cohort} h={horizon}: treated {} control {} excluded {}",
                s.treated.len(),
                s.control.len(),
                s.panel.excluded.len()
            ));
            s.panel
        }
    };
    for e in &panel.excluded {
        log.push(format!(
            "excluded unit {} event {}: {}",
            e.unit,
            e.event_year.map_or("-".into(), |v| v.to_string()),
            e.reason
        ));
    }
    Ok(panel)
}

fn counts(data: &PanelDataset) -> (usize, usize) {
    let t = data.n_treated();
    (t, data.len() - t)
}

fn run_fit(data: &PanelDataset, config: &FitConfig, label: &str, log: &mut Vec<String>) -> Result<FitResult, CliError> {
    let f = fit(data, config).map_err(estimation(label))?;
    log.push(format!("== {label} ==\n{}", f.fit_log()));
    Ok(f)
}

/// One (post₁, post₂) pair of a fitted or matching analysis.
fn run_pair(config: &RunConfig, panel: &AnalysisPanel, pair: (i64, i64)) -> Result<RunOutput, CliError> {
    let label = format!("{}:{}", pair.0, pair.1);
    let roles = config.roles.with_post(pair.0, pair.1);
    let (data, excluded) = panel.to_dataset(&roles);
    let mut out = RunOutput::default();
    out.log.push(format!("pair {label}: {} units, {} excluded", data.len(), excluded.len()));
    for e in &excluded {
        out.log.push(format!("pair {label} excluded unit {}: {}", e.unit, e.reason));
    }
    let (n_treated, n_control) = counts(&data);
    if n_treated == 0 || n_control == 0 {
        return Err(CliError::Estimation(format!("pair {label}: need treated and control units, have {n_treated} and {n_control}")));
    }
    let row = |analysis: &str, role: Role, tau: Option<f64>, estimate: f64, se: Option<f64>| EstimateRow {
        analysis: analysis.to_string(),
        pair: label.clone(),
        period: Some(roles.time(role)),
        tau,
        estimate,
        se,
        n_treated,
        n_control,
    };
    let grid = QuadratureGrid::new(config.estimator.grid_nodes);
    let fc = fit_config(config, data.n_covariates());

    match config.analysis {
        AnalysisKind::DidMatching => {
            for role in POST {
                let e = did_matching(&data, role).map_err(estimation("did_matching"))?;
                out.estimates.push(row("did_matching", role, None, e.att, Some(e.se)));
                if config.influence {
                    out.influence.extend(data.units.iter().zip(&e.influence).map(|(u, &a)| InfluenceRow {
                        analysis: "did_matching".into(),
                        pair: label.clone(),
                        period: roles.time(role),
                        unit: u.id,
                        cluster: u.cluster,
                        a,
                        g_centered: 0.0,
                        score_channel: 0.0,
                        total: a,
                    }));
                }
            }
        }
        AnalysisKind::AttNoPt => {
            let f = run_fit(&data, &fc, &format!("fit pair {label}"), &mut out.log)?;
            for role in POST {
                let mut est = att_point(&f, &data, &grid, role).map_err(estimation("att_nopt"))?;
                let (se, dec) = att_standard_error(&f, &data, &est, &grid).map_err(estimation("att_nopt inference"))?;
                est.se = se;
                out.estimates.push(row("att_nopt", role, None, est.theta, Some(se)));
                out.estimates.push(row("att_nopt_theta_m", role, None, est.theta_m, Some(est.matching.se)));
                out.estimates.push(row("att_nopt_bias_correction", role, None, est.bias_correction, None));
                if config.estimator.bootstrap_draws > 0 {
                    let b = cluster_bootstrap(&f, &data, &grid, role, config.estimator.bootstrap_draws, config.seed, &fc)
                        .map_err(estimation("bootstrap"))?;
                    out.log.push(format!("pair {label} {} bootstrap failures {}", role.name(), b.failures));
                    out.estimates.push(row("att_nopt_bootstrap", role, None, est.theta, Some(b.se)));
                }
                if config.influence {
                    for i in 0..dec.total.len() {
                        out.influence.push(InfluenceRow {
                            analysis: "att_nopt".into(),
                            pair: label.clone(),
                            period: roles.time(role),
                            unit: dec.unit_ids[i],
                            cluster: dec.clusters[i],
                            a: dec.a[i],
                            g_centered: dec.g_centered[i],
                            score_channel: dec.score_channel[i],
                            total: dec.total[i],
                        });
                    }
                }
            }
        }
        AnalysisKind::Qtt => {
            let f = run_fit(&data, &fc, &format!("fit pair {label}"), &mut out.log)?;
            for role in POST {
                let q = qtt(&f, &data, &grid, role, &config.taus).map_err(estimation("qtt"))?;
                for (j, &tau) in q.tau_grid.iter().enumerate() {
                    out.estimates.push(row("qtt", role, Some(tau), q.qtt[j], None));
                    if q.in_atom[j] {
                        out.log.push(format!("pair {label} {} tau {tau}: inside the zero atom", role.name()));
                    }
                }
            }
        }
        AnalysisKind::Cate => {
            let f0 = run_fit(&data, &fc, &format!("fit pair {label}"), &mut out.log)?;
            let f1 = fit_treated_arm(&data, &f0, &fc).map_err(estimation("treated-arm fit"))?;
            out.log.push(format!("== treated-arm fit pair {label} ==\n{}", f1.fit_log()));
            for role in POST {
                let c = cate(&f0, &f1, &data, &grid, role).map_err(estimation("cate"))?;
                for (name, v) in [
                    ("cate_ate_uniform_prior", c.ate_uniform_prior),
                    ("cate_ate_sample_mixture", c.ate_sample_mixture),
                    ("cate_atu", c.atu),
                    ("cate_att", c.att),
                    ("cate_var_lower_bound", c.var_lower_bound),
                ] {
                    out.estimates.push(row(name, role, None, v, None));
                }
            }
        }
        AnalysisKind::EventStudy | AnalysisKind::Simulate | AnalysisKind::MonteCarlo => unreachable!("not a per-pair analysis"),
    }
    Ok(out)
}

fn run_event_study(config: &RunConfig, panel: &AnalysisPanel) -> Result<RunOutput, CliError> {
    let obs = panel.event_obs();
    let mut out = RunOutput::default();
    let n_treated = panel.units.iter().filter(|u| u.d).count();
    let n_control = panel.units.len() - n_treated;
    for &c in &config.constraints {
        let est = event_study_unit_trends(&obs, c).map_err(estimation("event_study"))?;
        for (j, &k) in est.event_times.iter().enumerate() {
            out.estimates.push(EstimateRow {
                analysis: format!("event_study_{}", constraint_name(c)),
                pair: String::new(),
                period: Some(k),
                tau: None,
                estimate: est.beta[j],
                se: Some(est.se[j]),
                n_treated,
                n_control,
            });
        }
        out.log.push(format!("event study {}: {} units, {} observations", constraint_name(c), est.n_units, est.n_obs));
        out.event_studies.push(est);
    }
    Ok(out)
}

fn run_simulate(config: &RunConfig) -> Result<RunOutput, CliError> {
    let sim = config.simulate.as_ref().expect("simulate options");
    let (data, _) = generate(&sim.spec, sim.n, config.seed, sim.replication).map_err(estimation("simulation"))?;
    let t = truth(&sim.spec).map_err(estimation("truth"))?;
    let long = long_from_dataset(&data, &sim.spec.times);
    let mut buf = Vec::new();
    write_long(&long, &mut buf)?;
    let (n_treated, n_control) = counts(&data);
    let mut out = RunOutput::default();
    for (j, role) in POST.iter().enumerate() {
        for (name, v) in [("truth_att", t.att[j]), ("truth_did_bias", t.did_bias[j]), ("truth_ate", t.ate[j]), ("truth_atu", t.atu[j])] {
            out.estimates.push(EstimateRow {
                analysis: name.into(),
                pair: String::new(),
                period: Some(sim.spec.times[role.index()]),
                tau: None,
                estimate: v,
                se: None,
                n_treated,
                n_control,
            });
        }
    }
    out.log.push(format!("simulated {} units of {} (replication {})", data.len(), sim.spec.kind.name(), sim.replication));
    out.files.push(("panel.csv".into(), String::from_utf8(buf).expect("utf-8 csv")));
    Ok(out)
}

fn run_monte_carlo(config: &RunConfig) -> Result<RunOutput, CliError> {
    let sim = config.simulate.as_ref().expect("simulate options");
    let mc = McConfig {
        n: sim.n,
        replications: sim.replications,
        seed: config.seed,
        estimators: sim.estimators.clone(),
        fit: fit_config(config, 0),
        grid_nodes: config.estimator.grid_nodes,
    };
    let summary = monte_carlo(&sim.spec, &mc).map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = RunOutput::default();
    for r in &summary.rows {
        out.estimates.push(EstimateRow {
            analysis: format!("montecarlo_{}", r.estimator.name()),
            pair: String::new(),
            period: Some(sim.spec.times[r.role.index()]),
            tau: None,
            estimate: r.truth + r.mean_bias,
            se: Some(r.empirical_sd),
            n_treated: r.successes,
            n_control: r.failures,
        });
    }
    for (rep, message) in &summary.failure_messages {
        out.log.push(format!("replication {rep} failed: {message}"));
    }
    out.files.push(("montecarlo.csv".into(), summary.to_csv()));
    Ok(out)
}

/// Runs the configured pipeline in memory.
pub fn execute(config: &RunConfig, verbose: bool) -> Result<RunOutput, CliError> {
    let progress = |m: &str| {
        if verbose {
            eprintln!("[latentdid] {m}");
        }
    };
    progress(&format!("analysis {}", config.analysis.name()));
    let mut out = RunOutput::default();
    out.log.push(format!("analysis {} seed {}", config.analysis.name(), config.seed));
    match config.analysis {
        AnalysisKind::Simulate => out.merge(run_simulate(config)?),
        AnalysisKind::MonteCarlo => out.merge(run_monte_carlo(config)?),
        kind => {
            let panel = load_sample(config, &mut out.log)?;
            progress(&format!("{} analysis units", panel.units.len()));
            if kind == AnalysisKind::EventStudy {
                out.merge(run_event_study(config, &panel)?);
            } else {
                let results: Vec<Result<RunOutput, CliError>> =
                    config.pairs.par_iter().map(|&pair| run_pair(config, &panel, pair)).collect();
                for r in results {
                    out.merge(r?);
                }
            }
        }
    }
    progress("done");
    Ok(out)
}

/// Writes the artifacts of `out` into `dir`.
pub fn write_outputs(config: &RunConfig, out: &RunOutput, dir: &Path) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let write = |name: &str, text: &str| std::fs::write(dir.join(name), text).map_err(io);
    write("estimates.csv", &estimates_csv(&out.estimates))?;
    if config.influence && !out.influence.is_empty() {
        write("influence.csv", &influence_csv(&out.influence))?;
    }
    if !out.event_studies.is_empty() {
        write("eventstudy_plot.csv", &event_plot_csv(&out.event_studies))?;
    }
    let mut log = out.log.join("\n");
    log.push('\n');
    write("fitlog.txt", &log)?;
    for (name, text) in &out.files {
        write(name, text)?;
    }
    Ok(())
}

pub fn run(config: &RunConfig, verbose: bool) -> Result<RunOutput, CliError> {
    let out = execute(config, verbose)?;
    write_outputs(config, &out, &config.output_dir)?;
    Ok(out)
}
