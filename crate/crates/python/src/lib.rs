//! Python bindings: simulate panels, fit the control-arm model and estimate
//! ATTs from plain Python lists.

use std::collections::HashMap;

use latentdid::estimators::{att, did_matching};
use latentdid::mle::{fit, FitConfig, SieveRestriction};
use latentdid::model::{ModelParams, PanelDataset, Role, UnitRecord, N_ROLES};
use latentdid::quadrature::QuadratureGrid;
use latentdid::simulate::{generate, truth as dgp_truth, DgpKind, DgpSpec};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn spec(dgp: &str, effect: f64) -> PyResult<DgpSpec> {
    match DgpKind::parse(dgp) {
        Some(DgpKind::AdditiveDid) => Ok(DgpSpec::additive_did(effect)),
        Some(DgpKind::LinearFactor) => Ok(DgpSpec::linear_factor(effect, 6000.0, 2.0)),
        Some(DgpKind::HiddenMarkov) => {
            let mut s = DgpSpec::hidden_markov(0.9);
            s.effect = [[effect, 0.0, 0.0]; 2];
            Ok(s)
        }
        None => Err(PyValueError::new_err(format!("unknown dgp `{dgp}`"))),
    }
}

fn post_role(period: usize) -> PyResult<Role> {
    match period {
        1 => Ok(Role::Post1),
        2 => Ok(Role::Post2),
        _ => Err(PyValueError::new_err("period must be 1 or 2")),
    }
}

/// Builds an uncensored panel; rows of `y` are `(pre2, pre1, ref, post1, post2)`.
fn panel(d: Vec<bool>, y: Vec<[f64; N_ROLES]>, cluster: Option<Vec<u64>>) -> PyResult<PanelDataset> {
    if d.len() != y.len() {
        return Err(PyValueError::new_err("d and y differ in length"));
    }
    if let Some(c) = &cluster {
        if c.len() != d.len() {
            return Err(PyValueError::new_err("cluster and d differ in length"));
        }
    }
    let units = d
        .into_iter()
        .zip(y)
        .enumerate()
        .map(|(i, (d, y))| UnitRecord {
            id: i as u64,
            cluster: cluster.as_ref().map_or(i as u64, |c| c[i]),
            d,
            x: Vec::new(),
            y,
            top_code: [f64::INFINITY; N_ROLES],
        })
        .collect();
    let data = PanelDataset {
        covariate_names: Vec::new(),
        units,
    };
    data.validate().map_err(value_error)?;
    Ok(data)
}

/// Simulated panel as `(d, y, cluster)`.
#[pyfunction]
#[pyo3(signature = (dgp, n, seed, replication = 0, effect = -5000.0))]
fn simulate(
    dgp: &str,
    n: usize,
    seed: u64,
    replication: u64,
    effect: f64,
) -> PyResult<(Vec<bool>, Vec<[f64; N_ROLES]>, Vec<u64>)> {
    let (data, _) = generate(&spec(dgp, effect)?, n, seed, replication).map_err(value_error)?;
    Ok((
        data.units.iter().map(|u| u.d).collect(),
        data.units.iter().map(|u| u.y).collect(),
        data.units.iter().map(|u| u.cluster).collect(),
    ))
}

/// Population ATT and naive DID bias for both post periods.
#[pyfunction]
#[pyo3(signature = (dgp, effect = -5000.0))]
fn truth(dgp: &str, effect: f64) -> PyResult<HashMap<String, [f64; 2]>> {
    let t = dgp_truth(&spec(dgp, effect)?).map_err(value_error)?;
    Ok(HashMap::from([
        ("att".to_string(), t.att),
        ("did_bias".to_string(), t.did_bias),
        ("ate".to_string(), t.ate),
    ]))
}

/// Matching DID with a cluster-robust standard error.
#[pyfunction]
#[pyo3(signature = (d, y, period, cluster = None))]
fn did(d: Vec<bool>, y: Vec<[f64; N_ROLES]>, period: usize, cluster: Option<Vec<u64>>) -> PyResult<HashMap<String, f64>> {
    let data = panel(d, y, cluster)?;
    let e = did_matching(&data, post_role(period)?).map_err(value_error)?;
    Ok(HashMap::from([("att".to_string(), e.att), ("se".to_string(), e.se)]))
}

/// ATT without parallel trends from a fresh control-arm fit. `max_degree`
/// caps every polynomial block; `gaussian_shape` drops the Hermite shape terms.
#[pyfunction]
#[pyo3(signature = (d, y, period, cluster = None, grid_nodes = 10, starts = 1, max_degree = 2, gaussian_shape = true, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn att_nopt(
    d: Vec<bool>,
    y: Vec<[f64; N_ROLES]>,
    period: usize,
    cluster: Option<Vec<u64>>,
    grid_nodes: usize,
    starts: usize,
    max_degree: usize,
    gaussian_shape: bool,
    seed: u64,
) -> PyResult<HashMap<String, f64>> {
    let data = panel(d, y, cluster)?;
    let role = post_role(period)?;
    if grid_nodes == 0 || starts == 0 {
        return Err(PyValueError::new_err("grid_nodes and starts must be positive"));
    }
    let config = FitConfig {
        starts,
        grid_nodes,
        fixed_mask: Some(SieveRestriction::uniform(max_degree, gaussian_shape).mask(&ModelParams::zeros(0).layout())),
        seed,
        ..FitConfig::default()
    };
    let f = fit(&data, &config).map_err(value_error)?;
    let e = att(&f, &data, &QuadratureGrid::new(grid_nodes), role).map_err(value_error)?;
    Ok(HashMap::from([
        ("theta".to_string(), e.theta),
        ("theta_m".to_string(), e.theta_m),
        ("bias_correction".to_string(), e.bias_correction),
        ("se".to_string(), e.se),
    ]))
}

#[pymodule]
fn _latentdid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(truth, m)?)?;
    m.add_function(wrap_pyfunction!(did, m)?)?;
    m.add_function(wrap_pyfunction!(att_nopt, m)?)?;
    Ok(())
}
