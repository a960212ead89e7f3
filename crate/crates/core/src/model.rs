//! The structural model: treatment probability, the pre/reference/post
//! outcome laws given latent `u ∈ (0,1)²` and covariates, the zero-earnings
//! layer for post periods, and the flat parameter vector `ψ`.

use std::ops::Range;

use rand::Rng;
use thiserror::Error;

use crate::basis::{chebyshev_tensor, logistic};
use crate::rng::unit_rng;
use crate::sieve::{BivariateShape, GramLaw, LocationScale, UnivariateShape, BIVARIATE_WEIGHTS};

pub const N_ROLES: usize = 5;
/// Size of the `j + k <= 3` Chebyshev tensor basis.
pub const N_CHEB: usize = 10;
/// Tensor basis terms with `k >= 1`; fixed at zero in the pre₁ location.
pub const U2_DEPENDENT_TERMS: [usize; 6] = [2, 4, 5, 7, 8, 9];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("treatment shift requested for {0:?}; only the reference period carries it")]
    TreatmentShiftOutsideReference(Role),
    #[error("zero-indicator shift requested for {0:?}; only post periods carry it")]
    ZeroShiftOutsidePost(Role),
    #[error("covariate width {got} does not match model width {expected}")]
    CovariateWidth { expected: usize, got: usize },
    #[error("flat parameter vector has length {got}, layout needs {expected}")]
    FlatLength { expected: usize, got: usize },
    #[error("unit {unit}: {reason}")]
    InvalidUnit { unit: u64, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Period roles in outcome order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Pre2,
    Pre1,
    Ref,
    Post1,
    Post2,
}

impl Role {
    pub const ALL: [Role; N_ROLES] = [Role::Pre2, Role::Pre1, Role::Ref, Role::Post1, Role::Post2];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_post(self) -> bool {
        matches!(self, Role::Post1 | Role::Post2)
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Pre2 => "pre2",
            Role::Pre1 => "pre1",
            Role::Ref => "ref",
            Role::Post1 => "post1",
            Role::Post2 => "post2",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.name() == s)
    }

    /// Other post period, whose zero indicator shifts this one.
    pub fn other_post(self) -> Option<Role> {
        match self {
            Role::Post1 => Some(Role::Post2),
            Role::Post2 => Some(Role::Post1),
            _ => None,
        }
    }
}

/// Partially linear index `Σ α_jk T_j(u1) T_k(u2) + x'β`.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    pub alpha: [f64; N_CHEB],
    pub beta: Vec<f64>,
}

impl Index {
    pub fn zero(p: usize) -> Self {
        Index {
            alpha: [0.0; N_CHEB],
            beta: vec![0.0; p],
        }
    }

    pub fn constant(value: f64, p: usize) -> Self {
        let mut idx = Self::zero(p);
        idx.alpha[0] = value;
        idx
    }

    #[inline]
    pub fn u_part(&self, tensor: &[f64; N_CHEB]) -> f64 {
        self.alpha.iter().zip(tensor).map(|(a, t)| a * t).sum()
    }

    #[inline]
    pub fn x_part(&self, x: &[f64]) -> f64 {
        self.beta.iter().zip(x).map(|(b, x)| b * x).sum()
    }

    pub fn eval(&self, u: (f64, f64), x: &[f64]) -> f64 {
        self.u_part(&chebyshev_tensor(u.0, u.1)) + self.x_part(x)
    }

    /// True when no tensor term of degree one or more is nonzero.
    pub fn is_u_free(&self) -> bool {
        self.alpha[1..].iter().all(|&a| a == 0.0)
    }
}

/// Zero-earnings probability layers: `P(Z1=1)`, `P(Z2=1 | Z1=0)`, `P(Z2=1 | Z1=1)`.
pub const N_ZERO_LAYERS: usize = 3;

/// A zero layer whose event never or always happens in the data is not
/// identified by a logit; it is then held at the matching degenerate law.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroLayerState {
    Active,
    NeverZero,
    AlwaysZero,
}

/// Shift flags for [`ModelParams::location_scale`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Shifts {
    pub treated: bool,
    pub other_period_zero: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub treatment: Index,
    pub mu: [Index; N_ROLES],
    pub log_sigma: [Index; N_ROLES],
    pub d_shift_mu0: f64,
    pub d_shift_sigma0: f64,
    /// Post₁ location/log-scale shift when `Z2 = 1`, post₂ shift when `Z1 = 1`.
    pub z_shift_mu: [f64; 2],
    pub z_shift_sigma: [f64; 2],
    pub zero: [Index; N_ZERO_LAYERS],
    pub zero_state: [ZeroLayerState; N_ZERO_LAYERS],
    pub omega_pre: BivariateShape,
    pub omega_0: UnivariateShape,
    pub omega_post: BivariateShape,
}

impl ModelParams {
    /// All coefficients zero: `P(D=1) = ½`, every period standard normal in logs,
    /// fair-coin zero layers.
    pub fn zeros(p: usize) -> Self {
        let z = || Index::zero(p);
        ModelParams {
            treatment: z(),
            mu: std::array::from_fn(|_| z()),
            log_sigma: std::array::from_fn(|_| z()),
            d_shift_mu0: 0.0,
            d_shift_sigma0: 0.0,
            z_shift_mu: [0.0; 2],
            z_shift_sigma: [0.0; 2],
            zero: std::array::from_fn(|_| z()),
            zero_state: [ZeroLayerState::Active; N_ZERO_LAYERS],
            omega_pre: BivariateShape::zero(),
            omega_0: UnivariateShape::zero(),
            omega_post: BivariateShape::zero(),
        }
    }

    pub fn n_covariates(&self) -> usize {
        self.treatment.beta.len()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.n_covariates())
    }

    fn check_x(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.n_covariates() {
            return Err(ModelError::CovariateWidth {
                expected: self.n_covariates(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn prob_treatment(&self, u: (f64, f64), x: &[f64]) -> f64 {
        logistic(self.treatment.eval(u, x))
    }

    pub fn location_scale(
        &self,
        role: Role,
        u: (f64, f64),
        x: &[f64],
        shifts: Shifts,
    ) -> Result<LocationScale, ModelError> {
        self.check_x(x)?;
        if shifts.treated && role != Role::Ref {
            return Err(ModelError::TreatmentShiftOutsideReference(role));
        }
        if shifts.other_period_zero && !role.is_post() {
            return Err(ModelError::ZeroShiftOutsidePost(role));
        }
        let t = role.index();
        let mut mu = self.mu[t].eval(u, x);
        let mut ls = self.log_sigma[t].eval(u, x);
        if shifts.treated {
            mu += self.d_shift_mu0;
            ls += self.d_shift_sigma0;
        }
        if shifts.other_period_zero {
            let k = t - Role::Post1.index();
            mu += self.z_shift_mu[k];
            ls += self.z_shift_sigma[k];
        }
        Ok(LocationScale::from_log_sigma(mu, ls))
    }

    /// `P(Z = 1)` for one zero layer.
    pub fn prob_zero(&self, layer: usize, u: (f64, f64), x: &[f64]) -> f64 {
        match self.zero_state[layer] {
            ZeroLayerState::Active => logistic(self.zero[layer].eval(u, x)),
            ZeroLayerState::NeverZero => 0.0,
            ZeroLayerState::AlwaysZero => 1.0,
        }
    }

    /// `P(Z1 = z1, Z2 = z2 | u, x)`.
    pub fn prob_zero_path(&self, z1: bool, z2: bool, u: (f64, f64), x: &[f64]) -> f64 {
        let p1 = self.prob_zero(0, u, x);
        let p2 = self.prob_zero(if z1 { 2 } else { 1 }, u, x);
        (if z1 { p1 } else { 1.0 - p1 }) * (if z2 { p2 } else { 1.0 - p2 })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut copy = self.clone();
        let mut out = Vec::with_capacity(self.layout().len());
        copy.visit_mut(|v| out.push(*v));
        out
    }

    pub fn from_flat(template: &ModelParams, flat: &[f64]) -> Result<ModelParams, ModelError> {
        let expected = template.layout().len();
        if flat.len() != expected {
            return Err(ModelError::FlatLength {
                expected,
                got: flat.len(),
            });
        }
        let mut out = template.clone();
        let mut it = flat.iter();
        out.visit_mut(|v| *v = *it.next().unwrap());
        Ok(out)
    }

    /// Visits every coefficient in [`ParamLayout`] order.
    fn visit_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        let index = |idx: &mut Index, f: &mut dyn FnMut(&mut f64)| {
            idx.alpha.iter_mut().for_each(&mut *f);
            idx.beta.iter_mut().for_each(&mut *f);
        };
        index(&mut self.treatment, &mut f);
        for t in 0..N_ROLES {
            index(&mut self.mu[t], &mut f);
            index(&mut self.log_sigma[t], &mut f);
        }
        f(&mut self.d_shift_mu0);
        f(&mut self.d_shift_sigma0);
        self.z_shift_mu.iter_mut().for_each(&mut f);
        self.z_shift_sigma.iter_mut().for_each(&mut f);
        for layer in self.zero.iter_mut() {
            index(layer, &mut f);
        }
        self.omega_pre.0.iter_mut().for_each(&mut f);
        self.omega_0.0.iter_mut().for_each(&mut f);
        self.omega_post.0.iter_mut().for_each(&mut f);
    }

    /// Draws a panel from the model. Unit `i` uses covariates
    /// `covariates[i % len]`; treated post outcomes follow the untreated law.
    pub fn simulate_from_model(
        &self,
        covariates: &[Vec<f64>],
        n: usize,
        seed: u64,
    ) -> Result<PanelDataset, ModelError> {
        self.simulate_from_model_topcoded(covariates, n, seed, [f64::INFINITY; N_ROLES])
    }

    pub fn simulate_from_model_topcoded(
        &self,
        covariates: &[Vec<f64>],
        n: usize,
        seed: u64,
        top_code: [f64; N_ROLES],
    ) -> Result<PanelDataset, ModelError> {
        let p = self.n_covariates();
        if covariates.is_empty() && p > 0 {
            return Err(ModelError::CovariateWidth { expected: p, got: 0 });
        }
        let empty = Vec::new();
        let units = (0..n)
            .map(|i| {
                let x = if covariates.is_empty() {
                    &empty
                } else {
                    &covariates[i % covariates.len()]
                };
                self.check_x(x)?;
                let mut rng = unit_rng(seed, 0, i as u64);
                Ok(self.draw_unit(i as u64, x, top_code, &mut rng))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(PanelDataset {
            covariate_names: (0..p).map(|k| format!("x{}", k + 1)).collect(),
            units,
        })
    }

    fn draw_unit<R: Rng>(&self, id: u64, x: &[f64], top_code: [f64; N_ROLES], rng: &mut R) -> UnitRecord {
        let u = (open_unit(rng), open_unit(rng));
        let d = rng.random::<f64>() < self.prob_treatment(u, x);
        let mut y = [0.0; N_ROLES];
        let none = Shifts::default();

        let pre1 = self.location_scale(Role::Pre1, u, x, none).unwrap();
        let pre2 = self.location_scale(Role::Pre2, u, x, none).unwrap();
        let (v1, v2) = draw_bivariate(&self.omega_pre, rng);
        y[Role::Pre1.index()] = (pre1.mu + pre1.sigma() * v1).exp();
        y[Role::Pre2.index()] = (pre2.mu + pre2.sigma() * v2).exp();

        let refl = self
            .location_scale(Role::Ref, u, x, Shifts { treated: d, other_period_zero: false })
            .unwrap();
        let v0 = GramLaw::univariate(&self.omega_0).quantile(open_unit(rng));
        y[Role::Ref.index()] = (refl.mu + refl.sigma() * v0).exp();

        let z1 = rng.random::<f64>() < self.prob_zero(0, u, x);
        let z2 = rng.random::<f64>() < self.prob_zero(if z1 { 2 } else { 1 }, u, x);
        let post1 = self
            .location_scale(Role::Post1, u, x, Shifts { treated: false, other_period_zero: z2 })
            .unwrap();
        let post2 = self
            .location_scale(Role::Post2, u, x, Shifts { treated: false, other_period_zero: z1 })
            .unwrap();
        let (w1, w2) = draw_bivariate(&self.omega_post, rng);
        y[Role::Post1.index()] = if z1 { 0.0 } else { (post1.mu + post1.sigma() * w1).exp() };
        y[Role::Post2.index()] = if z2 { 0.0 } else { (post2.mu + post2.sigma() * w2).exp() };

        for t in 0..N_ROLES {
            y[t] = y[t].min(top_code[t]);
        }
        UnitRecord {
            id,
            cluster: id,
            d,
            x: x.to_vec(),
            y,
            top_code,
        }
    }
}

/// Uniform draw on the open interval `(0, 1)`.
pub(crate) fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Draws `(V1, V2) ~ h2(·; ω)` by marginal then conditional inversion.
pub fn draw_bivariate<R: Rng>(omega: &BivariateShape, rng: &mut R) -> (f64, f64) {
    let v1 = GramLaw::bivariate_marginal(omega, 0).quantile(open_unit(rng));
    let v2 = GramLaw::bivariate_conditional(omega, v1).quantile(open_unit(rng));
    (v1, v2)
}

/// Parameter blocks of the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    Treatment,
    Mu(Role),
    LogSigma(Role),
    RefShift,
    ZeroShift,
    ZeroLayer(usize),
    OmegaPre,
    Omega0,
    OmegaPost,
}

/// Offsets of the named slices of `ψ`:
/// treatment, then `(μ_t, ln σ_t)` for each role in [`Role::ALL`] order,
/// the two reference-period treatment shifts, the post zero-indicator shifts
/// `(μ₁, μ₂, ln σ₁, ln σ₂)`, the three zero layers, then `ω_pre`, `ω_0`, `ω_post`.
/// Each partially linear index occupies `10 + p` slots, Chebyshev terms first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub p: usize,
}

impl ParamLayout {
    pub fn new(p: usize) -> Self {
        ParamLayout { p }
    }

    #[inline]
    pub fn index_len(&self) -> usize {
        N_CHEB + self.p
    }

    pub fn treatment(&self) -> usize {
        0
    }

    pub fn mu(&self, role: Role) -> usize {
        self.index_len() * (1 + 2 * role.index())
    }

    pub fn log_sigma(&self, role: Role) -> usize {
        self.index_len() * (2 + 2 * role.index())
    }

    pub fn ref_shift(&self) -> usize {
        self.index_len() * (1 + 2 * N_ROLES)
    }

    pub fn zero_shift(&self) -> usize {
        self.ref_shift() + 2
    }

    pub fn zero_layer(&self, layer: usize) -> usize {
        self.zero_shift() + 4 + layer * self.index_len()
    }

    pub fn omega_pre(&self) -> usize {
        self.zero_layer(N_ZERO_LAYERS)
    }

    pub fn omega_0(&self) -> usize {
        self.omega_pre() + BIVARIATE_WEIGHTS
    }

    pub fn omega_post(&self) -> usize {
        self.omega_0() + 4
    }

    pub fn len(&self) -> usize {
        self.omega_post() + BIVARIATE_WEIGHTS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn range(&self, block: Block) -> Range<usize> {
        let (start, len) = match block {
            Block::Treatment => (self.treatment(), self.index_len()),
            Block::Mu(r) => (self.mu(r), self.index_len()),
            Block::LogSigma(r) => (self.log_sigma(r), self.index_len()),
            Block::RefShift => (self.ref_shift(), 2),
            Block::ZeroShift => (self.zero_shift(), 4),
            Block::ZeroLayer(k) => (self.zero_layer(k), self.index_len()),
            Block::OmegaPre => (self.omega_pre(), BIVARIATE_WEIGHTS),
            Block::Omega0 => (self.omega_0(), 4),
            Block::OmegaPost => (self.omega_post(), BIVARIATE_WEIGHTS),
        };
        start..start + len
    }

    /// Blocks describing untreated post-period outcomes.
    pub fn post_blocks() -> Vec<Block> {
        vec![
            Block::Mu(Role::Post1),
            Block::LogSigma(Role::Post1),
            Block::Mu(Role::Post2),
            Block::LogSigma(Role::Post2),
            Block::ZeroShift,
            Block::ZeroLayer(0),
            Block::ZeroLayer(1),
            Block::ZeroLayer(2),
            Block::OmegaPost,
        ]
    }

    /// Human-readable name per flat position.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.len());
        let cheb = crate::basis::PolyDegreeCap::CHEBYSHEV.index_pairs();
        let index = |prefix: &str, names: &mut Vec<String>| {
            for (j, k) in &cheb {
                names.push(format!("{prefix}.alpha{j}{k}"));
            }
            for b in 0..self.p {
                names.push(format!("{prefix}.beta{}", b + 1));
            }
        };
        index("treatment", &mut names);
        for r in Role::ALL {
            index(&format!("mu.{}", r.name()), &mut names);
            index(&format!("log_sigma.{}", r.name()), &mut names);
        }
        names.extend(
            ["d_shift_mu0", "d_shift_sigma0", "z_shift_mu.post1", "z_shift_mu.post2"]
                .map(String::from),
        );
        names.extend(["z_shift_sigma.post1", "z_shift_sigma.post2"].map(String::from));
        for layer in ["zero.z1", "zero.z2_given0", "zero.z2_given1"] {
            index(layer, &mut names);
        }
        for (j, k) in crate::sieve::BIVARIATE_INDEX {
            names.push(format!("omega_pre.{j}{k}"));
        }
        for j in 1..=4 {
            names.push(format!("omega_0.{j}"));
        }
        for (j, k) in crate::sieve::BIVARIATE_INDEX {
            names.push(format!("omega_post.{j}{k}"));
        }
        names
    }

    /// Positions held fixed by the model structure: `μ_pre1` terms that vary with `u2`.
    pub fn structural_zeros(&self) -> Vec<usize> {
        let base = self.mu(Role::Pre1);
        U2_DEPENDENT_TERMS.iter().map(|k| base + k).collect()
    }
}

/// One panel unit with outcomes by role.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub id: u64,
    pub cluster: u64,
    pub d: bool,
    pub x: Vec<f64>,
    /// Outcome levels; post periods may be zero.
    pub y: [f64; N_ROLES],
    /// Top-code thresholds in levels; `+∞` when uncensored.
    pub top_code: [f64; N_ROLES],
}

impl UnitRecord {
    pub fn is_zero(&self, role: Role) -> bool {
        self.y[role.index()] == 0.0
    }

    pub fn is_top_coded(&self, role: Role) -> bool {
        let c = self.top_code[role.index()];
        c.is_finite() && self.y[role.index()] >= c
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PanelDataset {
    pub covariate_names: Vec<String>,
    pub units: Vec<UnitRecord>,
}

impl PanelDataset {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_treated(&self) -> usize {
        self.units.iter().filter(|u| u.d).count()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.units.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let p = self.n_covariates();
        for unit in &self.units {
            let bad = |reason: String| ModelError::InvalidUnit {
                unit: unit.id,
                reason,
            };
            if unit.x.len() != p {
                return Err(bad(format!("{} covariates, expected {p}", unit.x.len())));
            }
            if unit.x.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite covariate".into()));
            }
            for role in Role::ALL {
                let y = unit.y[role.index()];
                let c = unit.top_code[role.index()];
                if !(c > 0.0) {
                    return Err(bad(format!("{} top code must be positive", role.name())));
                }
                if !y.is_finite() || y > c {
                    return Err(bad(format!("{} outcome {y} outside (0, {c}]", role.name())));
                }
                if role.is_post() {
                    if y < 0.0 {
                        return Err(bad(format!("{} outcome negative", role.name())));
                    }
                } else if !(y > 0.0) {
                    return Err(bad(format!("{} outcome must be positive", role.name())));
                }
            }
        }
        Ok(())
    }

    /// Subset keeping units for which `keep` holds.
    pub fn filter(&self, keep: impl Fn(&UnitRecord) -> bool) -> PanelDataset {
        PanelDataset {
            covariate_names: self.covariate_names.clone(),
            units: self.units.iter().filter(|u| keep(u)).cloned().collect(),
        }
    }

    /// Zero-layer states implied by the untreated units' zero patterns.
    pub fn zero_layer_states(&self, arm_treated: bool) -> [ZeroLayerState; N_ZERO_LAYERS] {
        let arm = self.units.iter().filter(|u| u.d == arm_treated);
        let mut counts = [[0usize; 2]; N_ZERO_LAYERS];
        for u in arm {
            let z1 = u.is_zero(Role::Post1);
            let z2 = u.is_zero(Role::Post2);
            counts[0][z1 as usize] += 1;
            counts[if z1 { 2 } else { 1 }][z2 as usize] += 1;
        }
        std::array::from_fn(|k| match counts[k] {
            [_, 0] => ZeroLayerState::NeverZero,
            [0, _] => ZeroLayerState::AlwaysZero,
            _ => ZeroLayerState::Active,
        })
    }
}
