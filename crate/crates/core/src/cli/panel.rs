//! Long-format panels and the analysis samples built from them.
//!
//! A stacked sample has one unit per (worker, event year); a staggered cohort
//! sample keeps one unit per worker. Both index periods relative to an
//! anchor period `t = 0`: the last period before the event year for stacking,
//! the cohort period `g` for staggered designs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::estimators::EventObs;
use crate::model::{PanelDataset, Role, UnitRecord, N_ROLES};

use super::CliError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PanelError {
    #[error("column `{0}` not found in the header")]
    MissingColumn(String),
    #[error("{count} malformed rows; first: {}", first.iter().map(|(l, m)| format!("line {l}: {m}")).collect::<Vec<_>>().join("; "))]
    Malformed { count: usize, first: Vec<(u64, String)> },
    #[error("{0}")]
    Io(String),
    #[error("no rows")]
    Empty,
    #[error("unit {unit}: {reason}")]
    Inconsistent { unit: u64, reason: String },
    #[error("no units left after {0}")]
    EmptySample(&'static str),
    #[error("no treated units: nobody starts treatment at period {0}")]
    NoTreated(i64),
    #[error("no valid control units")]
    NoControls,
}

impl From<PanelError> for CliError {
    fn from(e: PanelError) -> Self {
        match e {
            PanelError::MissingColumn(_) => CliError::Config(e.to_string()),
            PanelError::Io(_) | PanelError::Malformed { .. } | PanelError::Empty | PanelError::Inconsistent { .. } => {
                CliError::Io(e.to_string())
            }
            PanelError::EmptySample(_) | PanelError::NoTreated(_) | PanelError::NoControls => {
                CliError::Estimation(e.to_string())
            }
        }
    }
}

/// Column names of a long panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub unit: String,
    pub period: String,
    pub outcome: String,
    /// First treated period; an empty cell means never treated.
    pub event: Option<String>,
    pub covariates: Vec<String>,
    pub top_code: Option<String>,
    /// Defaults to the unit id.
    pub cluster: Option<String>,
}

impl Schema {
    /// Column names written by [`write_long`].
    pub fn canonical(covariates: &[String]) -> Self {
        Schema {
            unit: "unit".into(),
            period: "period".into(),
            outcome: "outcome".into(),
            event: Some("event".into()),
            covariates: covariates.to_vec(),
            top_code: Some("top_code".into()),
            cluster: Some("cluster".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongRow {
    pub unit: u64,
    pub cluster: u64,
    pub period: i64,
    pub outcome: f64,
    pub event: Option<i64>,
    /// `+∞` when uncensored.
    pub top_code: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LongPanel {
    pub covariate_names: Vec<String>,
    pub rows: Vec<LongRow>,
}

const MAX_REPORTED: usize = 5;

pub fn ingest(path: &Path, schema: &Schema) -> Result<LongPanel, PanelError> {
    let file = std::fs::File::open(path).map_err(|e| PanelError::Io(format!("{}: {e}", path.display())))?;
    ingest_reader(file, schema)
}

/// Parses every row, then fails with the count and first line numbers of any malformed rows.
pub fn ingest_reader<R: Read>(reader: R, schema: &Schema) -> Result<LongPanel, PanelError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| PanelError::Io(e.to_string()))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PanelError::MissingColumn(name.to_string()))
    };
    let opt_col = |name: &Option<String>| name.as_deref().map(col).transpose();
    let (c_unit, c_period, c_outcome) = (col(&schema.unit)?, col(&schema.period)?, col(&schema.outcome)?);
    let (c_event, c_top, c_cluster) = (opt_col(&schema.event)?, opt_col(&schema.top_code)?, opt_col(&schema.cluster)?);
    let c_x: Vec<usize> = schema.covariates.iter().map(|c| col(c)).collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    let mut bad: Vec<(u64, String)> = Vec::new();
    let mut n_bad = 0;
    for record in rdr.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                n_bad += 1;
                let line = e.position().map_or(0, |p| p.line());
                if bad.len() < MAX_REPORTED {
                    bad.push((line, e.to_string()));
                }
                continue;
            }
        };
        let line = record.position().map_or(0, |p| p.line());
        match parse_row(&record, schema, (c_unit, c_period, c_outcome), (c_event, c_top, c_cluster), &c_x) {
            Ok(row) => rows.push(row),
            Err(message) => {
                n_bad += 1;
                if bad.len() < MAX_REPORTED {
                    bad.push((line, message));
                }
            }
        }
    }
    if n_bad > 0 {
        return Err(PanelError::Malformed { count: n_bad, first: bad });
    }
    if rows.is_empty() {
        return Err(PanelError::Empty);
    }
    let panel = LongPanel {
        covariate_names: schema.covariates.clone(),
        rows,
    };
    panel.check_consistency()?;
    Ok(panel)
}

fn parse_row(
    record: &csv::StringRecord,
    schema: &Schema,
    (c_unit, c_period, c_outcome): (usize, usize, usize),
    (c_event, c_top, c_cluster): (Option<usize>, Option<usize>, Option<usize>),
    c_x: &[usize],
) -> Result<LongRow, String> {
    let field = |c: usize, name: &str| -> Result<&str, String> {
        match record.get(c) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(format!("missing `{name}`")),
        }
    };
    fn num<T: std::str::FromStr>(v: &str, name: &str) -> Result<T, String> {
        v.parse().map_err(|_| format!("`{name}` = `{v}` is not a valid number"))
    }
    let unit: u64 = num(field(c_unit, &schema.unit)?, &schema.unit)?;
    let period: i64 = num(field(c_period, &schema.period)?, &schema.period)?;
    let outcome: f64 = num(field(c_outcome, &schema.outcome)?, &schema.outcome)?;
    if !outcome.is_finite() || outcome < 0.0 {
        return Err(format!("`{}` = {outcome} must be finite and nonnegative", schema.outcome));
    }
    let optional = |c: Option<usize>| c.and_then(|c| record.get(c)).filter(|v| !v.is_empty());
    let event = optional(c_event).map(|v| num(v, "event")).transpose()?;
    let top_code = match optional(c_top) {
        Some(v) => {
            let t: f64 = num(v, "top_code")?;
            if !(t > 0.0) {
                return Err(format!("top code {t} must be positive"));
            }
            t
        }
        None => f64::INFINITY,
    };
    let cluster = match optional(c_cluster) {
        Some(v) => num(v, "cluster")?,
        None => unit,
    };
    let x = c_x
        .iter()
        .zip(&schema.covariates)
        .map(|(&c, name)| {
            let v: f64 = num(field(c, name)?, name)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("`{name}` is not finite"))
            }
        })
        .collect::<Result<_, String>>()?;
    Ok(LongRow {
        unit,
        cluster,
        period,
        outcome,
        event,
        top_code,
        x,
    })
}

impl LongPanel {
    /// Rows grouped by unit id, periods ascending.
    pub fn by_unit(&self) -> BTreeMap<u64, Vec<&LongRow>> {
        let mut out: BTreeMap<u64, Vec<&LongRow>> = BTreeMap::new();
        for r in &self.rows {
            out.entry(r.unit).or_default().push(r);
        }
        for rows in out.values_mut() {
            rows.sort_by_key(|r| r.period);
        }
        out
    }

    fn check_consistency(&self) -> Result<(), PanelError> {
        for (unit, rows) in self.by_unit() {
            let bad = |reason: &str| PanelError::Inconsistent {
                unit,
                reason: reason.to_string(),
            };
            if rows.windows(2).any(|w| w[0].period == w[1].period) {
                return Err(bad("duplicate period"));
            }
            if rows.iter().any(|r| r.event != rows[0].event) {
                return Err(bad("event period varies across rows"));
            }
            if rows.iter().any(|r| r.cluster != rows[0].cluster) {
                return Err(bad("cluster varies across rows"));
            }
        }
        Ok(())
    }
}

/// Writes the panel with [`Schema::canonical`] column names.
pub fn write_long<W: Write>(panel: &LongPanel, writer: W) -> Result<(), PanelError> {
    let io = |e: csv::Error| PanelError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["unit", "period", "outcome", "event", "cluster", "top_code"];
    header.extend(panel.covariate_names.iter().map(String::as_str));
    w.write_record(&header).map_err(io)?;
    for r in &panel.rows {
        let mut rec = vec![
            r.unit.to_string(),
            r.period.to_string(),
            format!("{:?}", r.outcome),
            r.event.map_or(String::new(), |e| e.to_string()),
            r.cluster.to_string(),
            if r.top_code.is_finite() {
                format!("{:?}", r.top_code)
            } else {
                String::new()
            },
        ];
        rec.extend(r.x.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| PanelError::Io(e.to_string()))
}

/// Long panel of a simulated dataset: unit `i` observed at `times[r]` for each
/// role, treated units' event one period after the reference period.
pub fn long_from_dataset(data: &PanelDataset, times: &[i64; N_ROLES]) -> LongPanel {
    let event = times[Role::Ref.index()] + 1;
    let mut rows = Vec::with_capacity(data.len() * N_ROLES);
    for u in &data.units {
        for r in 0..N_ROLES {
            rows.push(LongRow {
                unit: u.id,
                cluster: u.cluster,
                period: times[r],
                outcome: u.y[r],
                event: u.d.then_some(event),
                top_code: u.top_code[r],
                x: u.x.clone(),
            });
        }
    }
    LongPanel {
        covariate_names: data.covariate_names.clone(),
        rows,
    }
}

/// Optional sample predicates for stacked units.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StackRestrictions {
    /// Every pre-event window period has a positive outcome.
    pub positive_pre: bool,
    /// Outcome at `t = 0` at least this large.
    pub min_reference_outcome: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackOptions {
    pub event_years: Vec<i64>,
    /// Window `t ∈ [-pre, post]` around the anchor `t = 0`.
    pub pre: i64,
    pub post: i64,
    pub restrictions: StackRestrictions,
}

/// One analysis unit with outcomes at event-relative times.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisUnit {
    pub id: u64,
    pub source_unit: u64,
    /// Calendar period of `t = 0`.
    pub anchor: i64,
    pub d: bool,
    pub cluster: u64,
    pub x: Vec<f64>,
    /// `t ↦ (outcome, top code)`.
    pub outcomes: BTreeMap<i64, (f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Excluded {
    pub unit: u64,
    pub event_year: Option<i64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnalysisPanel {
    pub covariate_names: Vec<String>,
    pub units: Vec<AnalysisUnit>,
    pub excluded: Vec<Excluded>,
}

/// One unit per (worker, event year `c`) with `t = period − (c − 1)`.
/// Workers first treated at `c` are treated; workers never treated or first
/// treated after the window are controls; others are excluded for that year.
pub fn build_stacked(panel: &LongPanel, options: &StackOptions) -> Result<AnalysisPanel, PanelError> {
    let mut out = AnalysisPanel {
        covariate_names: panel.covariate_names.clone(),
        ..Default::default()
    };
    let years: BTreeSet<i64> = options.event_years.iter().copied().collect();
    for (&worker, rows) in &panel.by_unit() {
        let event = rows[0].event;
        for &c in &years {
            let anchor = c - 1;
            let exclude = |reason: String| Excluded {
                unit: worker,
                event_year: Some(c),
                reason,
            };
            let d = event == Some(c);
            if !d && event.is_some_and(|e| e <= anchor + options.post) {
                out.excluded.push(exclude(format!("treated at {} inside the window", event.unwrap())));
                continue;
            }
            let outcomes: BTreeMap<i64, (f64, f64)> = rows
                .iter()
                .map(|r| (r.period - anchor, (r.outcome, r.top_code)))
                .filter(|(t, _)| (-options.pre..=options.post).contains(t))
                .collect();
            if let Some(t) = (-options.pre..=options.post).find(|t| !outcomes.contains_key(t)) {
                out.excluded.push(exclude(format!("missing period {}", anchor + t)));
                continue;
            }
            let r = &options.restrictions;
            if r.positive_pre && outcomes.range(..=0).any(|(_, (y, _))| *y <= 0.0) {
                out.excluded.push(exclude("nonpositive pre-event outcome".into()));
                continue;
            }
            if let Some(min) = r.min_reference_outcome {
                if outcomes[&0].0 < min {
                    out.excluded.push(exclude(format!("reference outcome below {min}")));
                    continue;
                }
            }
            let x = rows.iter().find(|r| r.period == anchor).map(|r| r.x.clone()).unwrap();
            out.units.push(AnalysisUnit {
                id: 0,
                source_unit: worker,
                anchor,
                d,
                cluster: rows[0].cluster,
                x,
                outcomes,
            });
        }
    }
    if out.units.is_empty() {
        return Err(PanelError::EmptySample("stacking"));
    }
    for (i, u) in out.units.iter_mut().enumerate() {
        u.id = i as u64;
    }
    Ok(out)
}

/// Cohort sample for group `g` and horizon `h`: treated units start at
/// `g + 1`, controls are untreated through `g + h`, and the rest are excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSample {
    pub panel: AnalysisPanel,
    pub treated: Vec<u64>,
    pub control: Vec<u64>,
}

pub fn build_staggered_cohort(panel: &LongPanel, g: i64, h: i64) -> Result<CohortSample, PanelError> {
    assert!(h >= 1, "horizon must be at least 1");
    let mut sample = CohortSample {
        panel: AnalysisPanel {
            covariate_names: panel.covariate_names.clone(),
            ..Default::default()
        },
        treated: Vec::new(),
        control: Vec::new(),
    };
    for (&unit, rows) in &panel.by_unit() {
        let event = rows[0].event;
        let reason = match event {
            Some(e) if e <= g => Some(format!("treated at {e}, before {}", g + 1)),
            Some(e) if (g + 2..=g + h).contains(&e) => Some(format!("starts treatment at {e}, within {}..={}", g + 2, g + h)),
            _ => None,
        };
        if let Some(reason) = reason {
            sample.panel.excluded.push(Excluded {
                unit,
                event_year: event,
                reason,
            });
            continue;
        }
        let d = event == Some(g + 1);
        if d {
            sample.treated.push(unit);
        } else {
            sample.control.push(unit);
        }
        let x = rows
            .iter()
            .find(|r| r.period == g)
            .unwrap_or(&rows[0])
            .x
            .clone();
        sample.panel.units.push(AnalysisUnit {
            id: unit,
            source_unit: unit,
            anchor: g,
            d,
            cluster: rows[0].cluster,
            x,
            outcomes: rows.iter().map(|r| (r.period - g, (r.outcome, r.top_code))).collect(),
        });
    }
    if sample.treated.is_empty() {
        return Err(PanelError::NoTreated(g + 1));
    }
    if sample.control.is_empty() {
        return Err(PanelError::NoControls);
    }
    Ok(sample)
}

/// Event-relative time of each model role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoleMap {
    pub times: [i64; N_ROLES],
}

impl RoleMap {
    pub fn time(&self, role: Role) -> i64 {
        self.times[role.index()]
    }

    pub fn with_post(&self, post1: i64, post2: i64) -> Self {
        let mut times = self.times;
        times[Role::Post1.index()] = post1;
        times[Role::Post2.index()] = post2;
        RoleMap { times }
    }

    /// Roles must be distinct, with pre periods before the reference period and post periods after it.
    pub fn validate(&self) -> Result<(), CliError> {
        let t = |r| self.time(r);
        let ok = t(Role::Pre2) < t(Role::Pre1)
            && t(Role::Pre1) < t(Role::Ref)
            && t(Role::Ref) < t(Role::Post1)
            && t(Role::Ref) < t(Role::Post2)
            && t(Role::Post1) != t(Role::Post2);
        if ok {
            Ok(())
        } else {
            Err(CliError::Config(format!(
                "period roles {:?} must satisfy pre2 < pre1 < ref < post1, post2 with distinct post periods",
                self.times
            )))
        }
    }
}

impl AnalysisPanel {
    /// Units with all five role periods; pre and reference outcomes must be positive.
    pub fn to_dataset(&self, roles: &RoleMap) -> (PanelDataset, Vec<Excluded>) {
        let mut units = Vec::new();
        let mut excluded = Vec::new();
        for u in &self.units {
            let exclude = |reason: String| Excluded {
                unit: u.source_unit,
                event_year: Some(u.anchor + 1),
                reason,
            };
            let mut y = [0.0; N_ROLES];
            let mut top_code = [f64::INFINITY; N_ROLES];
            let mut reason = None;
            for role in Role::ALL {
                let t = roles.time(role);
                match u.outcomes.get(&t) {
                    None => reason = reason.or(Some(format!("missing period {}", u.anchor + t))),
                    Some(&(v, c)) => {
                        if !role.is_post() && v <= 0.0 {
                            reason = reason.or(Some(format!("nonpositive outcome at period {}", u.anchor + t)));
                        }
                        y[role.index()] = v.min(c);
                        top_code[role.index()] = c;
                    }
                }
            }
            if let Some(r) = reason {
                excluded.push(exclude(r));
                continue;
            }
            units.push(UnitRecord {
                id: u.id,
                cluster: u.cluster,
                d: u.d,
                x: u.x.clone(),
                y,
                top_code,
            });
        }
        (
            PanelDataset {
                covariate_names: self.covariate_names.clone(),
                units,
            },
            excluded,
        )
    }

    /// Every observed event-relative period as an event-study observation;
    /// treated units carry `event_time = t`.
    pub fn event_obs(&self) -> Vec<EventObs> {
        self.units
            .iter()
            .flat_map(|u| {
                u.outcomes.iter().map(move |(&t, &(y, _))| EventObs {
                    unit: u.id,
                    cluster: u.cluster,
                    period: t,
                    event_time: u.d.then_some(t),
                    y,
                    x: u.x.clone(),
                })
            })
            .collect()
    }
}
