//! Run configuration: a flat `key = value` file split into `[section]`s.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated; post-period pairs are written `a:b`. Unknown sections or
//! keys are rejected so a typo never silently falls back to a default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::estimators::ConstraintSet;
use crate::mle::SieveRestriction;
use crate::model::{Role, N_ROLES};
use crate::quadrature::QuadratureGrid;
use crate::simulate::{DgpKind, DgpSpec, McEstimator};

use super::panel::{RoleMap, Schema, StackOptions, StackRestrictions};
use super::CliError;

/// Parsed `[section] key = value` pairs with their line numbers.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, (String, usize)>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut out = RawConfig::default();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| config_err(line_no, "unterminated section header"))?
                    .trim()
                    .to_string();
                if out.sections.contains_key(&name) {
                    return Err(config_err(line_no, &format!("section [{name}] repeated")));
                }
                out.sections.insert(name.clone(), BTreeMap::new());
                current = Some(name);
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_err(line_no, "expected `key = value`"));
            };
            let section = current
                .as_ref()
                .ok_or_else(|| config_err(line_no, "key outside any section"))?;
            let key = key.trim().to_string();
            let entries = out.sections.get_mut(section).unwrap();
            if entries.contains_key(&key) {
                return Err(config_err(line_no, &format!("key `{key}` repeated in [{section}]")));
            }
            entries.insert(key, (value.trim().to_string(), line_no));
        }
        Ok(out)
    }

    fn get(&self, section: &str, key: &str) -> Option<&(String, usize)> {
        self.sections.get(section)?.get(key)
    }

    fn check_keys(&self, allowed: &[(&str, &[&str])]) -> Result<(), CliError> {
        for (section, entries) in &self.sections {
            let Some((_, keys)) = allowed.iter().find(|(s, _)| s == section) else {
                return Err(CliError::Config(format!("unknown section [{section}]")));
            };
            for (key, (_, line)) in entries {
                if !keys.contains(&key.as_str()) {
                    return Err(config_err(*line, &format!("unknown key `{key}` in [{section}]")));
                }
            }
        }
        Ok(())
    }

    fn string(&self, section: &str, key: &str) -> Option<String> {
        self.get(section, key).map(|(v, _)| v.clone()).filter(|v| !v.is_empty())
    }

    fn parsed<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, CliError> {
        match self.get(section, key) {
            None => Ok(None),
            Some((v, _)) if v.is_empty() => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|_| config_err(*line, &format!("cannot parse `{v}` for `{key}`"))),
        }
    }

    fn boolean(&self, section: &str, key: &str) -> Result<Option<bool>, CliError> {
        match self.get(section, key) {
            None => Ok(None),
            Some((v, line)) => match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" => Ok(Some(true)),
                "false" | "no" | "0" => Ok(Some(false)),
                _ => Err(config_err(*line, &format!("`{key}` must be true or false"))),
            },
        }
    }

    fn list<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>, CliError> {
        let Some((v, line)) = self.get(section, key) else {
            return Ok(None);
        };
        split_list(v)
            .map(|item| {
                item.parse()
                    .map_err(|_| config_err(*line, &format!("cannot parse list item `{item}` for `{key}`")))
            })
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn config_err(line: usize, message: &str) -> CliError {
    CliError::Config(format!("line {line}: {message}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalysisKind {
    DidMatching,
    EventStudy,
    AttNoPt,
    Qtt,
    Cate,
    Simulate,
    MonteCarlo,
}

impl AnalysisKind {
    pub const ALL: [AnalysisKind; 7] = [
        AnalysisKind::DidMatching,
        AnalysisKind::EventStudy,
        AnalysisKind::AttNoPt,
        AnalysisKind::Qtt,
        AnalysisKind::Cate,
        AnalysisKind::Simulate,
        AnalysisKind::MonteCarlo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnalysisKind::DidMatching => "did_matching",
            AnalysisKind::EventStudy => "event_study",
            AnalysisKind::AttNoPt => "att_nopt",
            AnalysisKind::Qtt => "qtt",
            AnalysisKind::Cate => "cate",
            AnalysisKind::Simulate => "simulate",
            AnalysisKind::MonteCarlo => "montecarlo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether the analysis fits the latent model.
    pub fn needs_fit(self) -> bool {
        matches!(self, AnalysisKind::AttNoPt | AnalysisKind::Qtt | AnalysisKind::Cate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Csv { path: PathBuf, schema: Schema },
    Simulate,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Design {
    Stacked(StackOptions),
    Staggered { cohort: i64, horizon: i64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOptions {
    pub grid_nodes: usize,
    pub starts: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub restriction: Option<SieveRestriction>,
    pub bootstrap_draws: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateOptions {
    pub spec: DgpSpec,
    pub n: usize,
    pub replication: u64,
    pub replications: usize,
    pub estimators: Vec<McEstimator>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: Source,
    pub design: Design,
    pub roles: RoleMap,
    /// `(post₁, post₂)` event-relative times, one fit per pair.
    pub pairs: Vec<(i64, i64)>,
    pub analysis: AnalysisKind,
    pub taus: Vec<f64>,
    pub constraints: Vec<ConstraintSet>,
    pub influence: bool,
    pub estimator: EstimatorOptions,
    pub simulate: Option<SimulateOptions>,
    pub seed: u64,
    pub output_dir: PathBuf,
}

const SECTIONS: &[(&str, &[&str])] = &[
    ("input", &["source", "path"]),
    (
        "schema",
        &["unit", "period", "outcome", "event", "covariates", "top_code", "cluster"],
    ),
    (
        "design",
        &[
            "kind",
            "event_years",
            "window_pre",
            "window_post",
            "positive_pre",
            "min_reference_outcome",
            "cohort",
            "horizon",
        ],
    ),
    ("roles", &["pre2", "pre1", "ref", "post1", "post2", "pairs"]),
    ("analysis", &["kind", "taus", "constraint", "influence"]),
    (
        "estimator",
        &[
            "grid_nodes",
            "starts",
            "max_iter",
            "grad_tol",
            "max_degree",
            "location_degree",
            "scale_degree",
            "treatment_degree",
            "zero_degree",
            "gaussian_shape",
            "bootstrap_draws",
        ],
    ),
    (
        "simulate",
        &[
            "dgp",
            "n",
            "replication",
            "replications",
            "estimators",
            "effect",
            "effect_u1",
            "effect_u2",
            "trend",
            "selection",
            "rho",
            "noise_sd",
            "top_code_quantile",
        ],
    ),
    ("output", &["dir", "seed"]),
];

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_str_in(&text, base)
    }

    /// Parses `text`; relative paths resolve against `base`.
    pub fn from_str_in(text: &str, base: &Path) -> Result<Self, CliError> {
        let raw = RawConfig::parse(text)?;
        raw.check_keys(SECTIONS)?;

        let kind_text = raw
            .string("analysis", "kind")
            .ok_or_else(|| CliError::Config("[analysis] kind is required".into()))?;
        let analysis = AnalysisKind::parse(&kind_text).ok_or_else(|| {
            let known: Vec<&str> = AnalysisKind::ALL.iter().map(|k| k.name()).collect();
            CliError::Config(format!("unknown analysis kind `{kind_text}`; expected one of {}", known.join(", ")))
        })?;

        let generated = matches!(analysis, AnalysisKind::Simulate | AnalysisKind::MonteCarlo);
        let source = match raw.string("input", "source").as_deref() {
            Some("simulate") => Source::Simulate,
            None if generated => Source::Simulate,
            None | Some("csv") => {
                let path = raw
                    .string("input", "path")
                    .ok_or_else(|| CliError::Config("[input] path is required for csv input".into()))?;
                Source::Csv {
                    path: base.join(path),
                    schema: parse_schema(&raw)?,
                }
            }
            Some(other) => return Err(CliError::Config(format!("unknown input source `{other}`"))),
        };
        if generated && source != Source::Simulate {
            return Err(CliError::Config(format!("{} requires `source = simulate`", analysis.name())));
        }

        let simulate = if source == Source::Simulate {
            Some(parse_simulate(&raw)?)
        } else {
            None
        };
        let spec_times = simulate.as_ref().map(|s| s.spec.times);

        let roles = parse_roles(&raw, spec_times)?;
        let pairs = match raw.get("roles", "pairs") {
            None => vec![(roles.time(Role::Post1), roles.time(Role::Post2))],
            Some((v, line)) => {
                let mut pairs = Vec::new();
                for item in split_list(v) {
                    let parsed = item.split_once(':').and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
                    let Some(pair) = parsed else {
                        return Err(config_err(*line, &format!("pair `{item}` must be `post1:post2`")));
                    };
                    pairs.push(pair);
                }
                if pairs.is_empty() {
                    return Err(config_err(*line, "pairs list is empty"));
                }
                pairs
            }
        };
        for &(a, b) in &pairs {
            roles.with_post(a, b).validate()?;
        }

        let design = parse_design(&raw, &roles, &pairs, spec_times)?;

        let taus = raw.list("analysis", "taus")?.unwrap_or_else(|| vec![0.25, 0.5, 0.75]);
        if let Some(bad) = taus.iter().find(|t: &&f64| !(**t > 0.0 && **t < 1.0)) {
            return Err(CliError::Config(format!("tau {bad} outside (0, 1)")));
        }
        let constraints = match raw.string("analysis", "constraint").as_deref() {
            None | Some("both") => vec![ConstraintSet::ZeroAllPre, ConstraintSet::ZeroAverageFlatTrend],
            Some("zero_all_pre") => vec![ConstraintSet::ZeroAllPre],
            Some("zero_average_flat_trend") => vec![ConstraintSet::ZeroAverageFlatTrend],
            Some(other) => return Err(CliError::Config(format!("unknown constraint `{other}`"))),
        };

        let estimator = parse_estimator(&raw)?;
        let seed = raw.parsed("output", "seed")?.unwrap_or(0);
        let output_dir = base.join(raw.string("output", "dir").unwrap_or_else(|| "out".into()));

        Ok(RunConfig {
            source,
            design,
            roles,
            pairs,
            analysis,
            taus,
            constraints,
            influence: raw.boolean("analysis", "influence")?.unwrap_or(false),
            estimator,
            simulate,
            seed,
            output_dir,
        })
    }
}

fn parse_schema(raw: &RawConfig) -> Result<Schema, CliError> {
    let get = |key: &str, default: &str| raw.string("schema", key).unwrap_or_else(|| default.to_string());
    Ok(Schema {
        unit: get("unit", "unit"),
        period: get("period", "period"),
        outcome: get("outcome", "outcome"),
        event: raw.string("schema", "event"),
        covariates: raw.list("schema", "covariates")?.unwrap_or_default(),
        top_code: raw.string("schema", "top_code"),
        cluster: raw.string("schema", "cluster"),
    })
}

fn parse_roles(raw: &RawConfig, spec_times: Option<[i64; N_ROLES]>) -> Result<RoleMap, CliError> {
    let defaults = spec_times.unwrap_or([-2, -1, 0, 1, 2]);
    let mut times = defaults;
    for (r, key) in ["pre2", "pre1", "ref", "post1", "post2"].iter().enumerate() {
        if let Some(t) = raw.parsed("roles", key)? {
            times[r] = t;
        }
    }
    let roles = RoleMap { times };
    roles.validate()?;
    Ok(roles)
}

fn parse_design(
    raw: &RawConfig,
    roles: &RoleMap,
    pairs: &[(i64, i64)],
    spec_times: Option<[i64; N_ROLES]>,
) -> Result<Design, CliError> {
    match raw.string("design", "kind").as_deref() {
        None | Some("stacked") => {
            let last_post = pairs.iter().map(|p| p.0.max(p.1)).max().unwrap_or(0);
            let event_years = match raw.list("design", "event_years")? {
                Some(v) => v,
                // simulated panels put every treated unit's event right after the reference period
                None if spec_times.is_some() => vec![1],
                None => return Err(CliError::Config("[design] event_years is required for stacked designs".into())),
            };
            if event_years.is_empty() {
                return Err(CliError::Config("[design] event_years is empty".into()));
            }
            let pre = raw.parsed("design", "window_pre")?.unwrap_or(-roles.time(Role::Pre2));
            let post = raw.parsed("design", "window_post")?.unwrap_or(last_post);
            if pre < 0 || post < 0 {
                return Err(CliError::Config("window bounds must be nonnegative".into()));
            }
            Ok(Design::Stacked(StackOptions {
                event_years,
                pre,
                post,
                restrictions: StackRestrictions {
                    positive_pre: raw.boolean("design", "positive_pre")?.unwrap_or(false),
                    min_reference_outcome: raw.parsed("design", "min_reference_outcome")?,
                },
            }))
        }
        Some("staggered") => {
            let cohort = raw
                .parsed("design", "cohort")?
                .ok_or_else(|| CliError::Config("[design] cohort is required for staggered designs".into()))?;
            let horizon: i64 = raw
                .parsed("design", "horizon")?
                .ok_or_else(|| CliError::Config("[design] horizon is required for staggered designs".into()))?;
            if horizon < 1 {
                return Err(CliError::Config("horizon must be at least 1".into()));
            }
            Ok(Design::Staggered { cohort, horizon })
        }
        Some(other) => Err(CliError::Config(format!("unknown design kind `{other}`"))),
    }
}

fn parse_estimator(raw: &RawConfig) -> Result<EstimatorOptions, CliError> {
    let s = "estimator";
    let grid_nodes = raw.parsed(s, "grid_nodes")?.unwrap_or(QuadratureGrid::DEFAULT_NODES_PER_DIM);
    let starts = raw.parsed(s, "starts")?.unwrap_or(5);
    if grid_nodes == 0 || starts == 0 {
        return Err(CliError::Config("grid_nodes and starts must be positive".into()));
    }
    let keys = ["max_degree", "location_degree", "scale_degree", "treatment_degree", "zero_degree", "gaussian_shape"];
    let restriction = if keys.iter().any(|k| raw.get(s, k).is_some()) {
        let base: usize = raw.parsed(s, "max_degree")?.unwrap_or(3);
        let mut r = SieveRestriction::uniform(base, raw.boolean(s, "gaussian_shape")?.unwrap_or(false));
        if let Some(v) = raw.parsed(s, "location_degree")? {
            r.location_degree = v;
        }
        if let Some(v) = raw.parsed(s, "scale_degree")? {
            r.scale_degree = v;
        }
        if let Some(v) = raw.parsed(s, "treatment_degree")? {
            r.treatment_degree = v;
        }
        if let Some(v) = raw.parsed(s, "zero_degree")? {
            r.zero_degree = v;
        }
        Some(r)
    } else {
        None
    };
    Ok(EstimatorOptions {
        grid_nodes,
        starts,
        max_iter: raw.parsed(s, "max_iter")?.unwrap_or(3000),
        grad_tol: raw.parsed(s, "grad_tol")?.unwrap_or(1e-6),
        restriction,
        bootstrap_draws: raw.parsed(s, "bootstrap_draws")?.unwrap_or(0),
    })
}

fn parse_simulate(raw: &RawConfig) -> Result<SimulateOptions, CliError> {
    let s = "simulate";
    let kind_text = raw.string(s, "dgp").unwrap_or_else(|| "additive_did".into());
    let kind = DgpKind::parse(&kind_text).ok_or_else(|| CliError::Config(format!("unknown dgp `{kind_text}`")))?;
    let effect = raw.parsed(s, "effect")?.unwrap_or(-5000.0);
    let mut spec = match kind {
        DgpKind::AdditiveDid => DgpSpec::additive_did(effect),
        DgpKind::LinearFactor => DgpSpec::linear_factor(
            effect,
            raw.parsed(s, "trend")?.unwrap_or(6000.0),
            raw.parsed(s, "selection")?.unwrap_or(2.0),
        ),
        DgpKind::HiddenMarkov => {
            let mut spec = DgpSpec::hidden_markov(raw.parsed(s, "rho")?.unwrap_or(0.9));
            spec.effect = [[effect, 0.0, 0.0]; 2];
            spec
        }
    };
    let c1 = raw.parsed(s, "effect_u1")?.unwrap_or(0.0);
    let c2 = raw.parsed(s, "effect_u2")?.unwrap_or(0.0);
    for e in &mut spec.effect {
        e[1] = c1;
        e[2] = c2;
    }
    if let Some(sd) = raw.parsed(s, "noise_sd")? {
        spec.noise_sd = [sd; N_ROLES];
    }
    spec.top_code_quantile = raw.parsed(s, "top_code_quantile")?;
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let estimators = match raw.get(s, "estimators") {
        None => vec![McEstimator::DidMatching, McEstimator::Att],
        Some((v, line)) => split_list(v)
            .map(|name| {
                McEstimator::parse(name).ok_or_else(|| config_err(*line, &format!("unknown estimator `{name}`")))
            })
            .collect::<Result<_, _>>()?,
    };
    let n = raw.parsed(s, "n")?.unwrap_or(2000);
    if n == 0 {
        return Err(CliError::Config("[simulate] n must be positive".into()));
    }
    Ok(SimulateOptions {
        spec,
        n,
        replication: raw.parsed(s, "replication")?.unwrap_or(0),
        replications: raw.parsed(s, "replications")?.unwrap_or(2),
        estimators,
    })
}
