//! Evolutionary layer: one-shot utility of a deciding susceptible, its
//! static best response, and the classification of evolutionary stability
//! against static mutants.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attractor::{self, closed_form, coexistence_point, Attractor, AttractorError};
use crate::ode::{find_equilibrium, OdeError, OdeState};
use crate::params::{ModelParams, ParamsError, DEFAULT_MARGINAL_TOL};
use crate::policy::Policy;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EssError {
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Attractor(#[from] AttractorError),
    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),
    #[error("equilibrium quadratic has complex roots (discriminant {discriminant})")]
    ComplexRoot { discriminant: f64 },
    #[error("invalid cost parameters: {0}")]
    InvalidCosts(String),
    #[error("perturbed equilibrium not found for p = {p}, eps = {eps}: {source}")]
    EquilibriumNotFound { p: f64, eps: f64, source: OdeError },
    #[error("verdict {0} has no incumbent to perturb")]
    NotAnEss(&'static str),
}

/// Suffering cost of an infection, either fixed or per unit of mean
/// infection duration (`k / r`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCost")]
pub enum InfectionCost {
    Fixed(f64),
    PerRecoveryRate(f64),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawCost {
    Num(f64),
    Expr(String),
}

impl TryFrom<RawCost> for InfectionCost {
    type Error = String;
    fn try_from(raw: RawCost) -> Result<Self, String> {
        match raw {
            RawCost::Num(v) => Ok(InfectionCost::Fixed(v)),
            RawCost::Expr(s) => s.parse(),
        }
    }
}

impl FromStr for InfectionCost {
    type Err = String;

    /// Accepts `"3.5"` or `"4.32/r"`.
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("bad infection cost {s:?}: {e}"));
        match s.split_once('/') {
            Some((k, den)) if den.trim() == "r" => Ok(InfectionCost::PerRecoveryRate(num(k)?)),
            Some(_) => Err(format!("bad infection cost {s:?}: only the form k/r is understood")),
            None => Ok(InfectionCost::Fixed(num(s)?)),
        }
    }
}

impl fmt::Display for InfectionCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InfectionCost::Fixed(v) => write!(f, "{v}"),
            InfectionCost::PerRecoveryRate(k) => write!(f, "{k}/r"),
        }
    }
}

impl InfectionCost {
    pub fn value(&self, params: &ModelParams) -> f64 {
        match *self {
            InfectionCost::Fixed(v) => v,
            InfectionCost::PerRecoveryRate(k) => k / params.r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Monetary price of the vaccine.
    pub c_v1: f64,
    /// Hesitancy scale; the hesitancy cost is `min{c_v2_bar, c_v2/ψ}`.
    pub c_v2: f64,
    pub c_v2_bar: f64,
    pub c_i1: InfectionCost,
    /// Multiplier of the death-scare term `c_i2 d_e θ`.
    #[serde(default)]
    pub c_i2: f64,
}

impl CostParams {
    /// Cost levels used for the birth-rate and vaccination-rate sweeps.
    pub fn reference() -> Self {
        Self { c_v1: 2.88, c_v2: 0.65, c_v2_bar: 1.91, c_i1: InfectionCost::PerRecoveryRate(4.32), c_i2: 0.0 }
    }

    pub fn validate(&self, params: &ModelParams) -> Result<(), EssError> {
        let named = [
            ("c_v1", self.c_v1),
            ("c_v2", self.c_v2),
            ("c_v2_bar", self.c_v2_bar),
            ("c_i1", self.c_i1.value(params)),
            ("c_i2", self.c_i2),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(EssError::InvalidCosts(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Below this `|h|` the two pure responses are treated as tied.
    pub fn indifference_tol(&self) -> f64 {
        1e-9 * (self.c_v1 + self.c_v2_bar + 1.0)
    }

    fn hesitancy(&self, psi: f64) -> f64 {
        if psi > 0.0 {
            self.c_v2_bar.min(self.c_v2 / psi)
        } else {
            self.c_v2_bar
        }
    }

    fn infection(&self, theta: f64, params: &ModelParams) -> f64 {
        self.c_i1.value(params) + self.c_i2 * params.d_e * theta
    }
}

/// Probability that an infection arrives before the next vaccination
/// opportunity, at a frozen infected fraction. Zero when both rates vanish.
pub fn p_infection(theta: f64, params: &ModelParams) -> f64 {
    let a = params.lambda * theta;
    let tot = a + params.nu;
    if tot > 0.0 {
        a / tot
    } else {
        0.0
    }
}

/// Vaccination cost minus expected infection cost at `(θ̂, ψ̂)`.
pub fn h_value(theta: f64, psi: f64, params: &ModelParams, costs: &CostParams) -> f64 {
    costs.c_v1 + costs.hesitancy(psi) - p_infection(theta, params) * costs.infection(theta, params)
}

/// Expected cost of accepting with probability `q` at `(θ̂, ψ̂)`.
pub fn utility(q: f64, theta: f64, psi: f64, params: &ModelParams, costs: &CostParams) -> f64 {
    let vacc = costs.c_v1 + costs.hesitancy(psi);
    let inf = p_infection(theta, params) * costs.infection(theta, params);
    q * vacc + (1.0 - q) * inf
}

fn nvdf_theta(params: &ModelParams) -> f64 {
    if params.d_e > 0.0 {
        1.0 - 1.0 / params.rho_e()
    } else {
        1.0 - 1.0 / params.rho()
    }
}

/// `h` at the endemic state without vaccination.
pub fn h_m(params: &ModelParams, costs: &CostParams) -> Result<f64, EssError> {
    if !(params.rho() > 1.0) {
        return Err(EssError::RegimeMismatch(format!(
            "no endemic no-vaccination state: rho = {} <= 1",
            params.rho()
        )));
    }
    Ok(h_value(nvdf_theta(params), 0.0, params, costs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BestResponse {
    /// Never vaccinate.
    Zero,
    /// Always vaccinate.
    One,
    /// Every `q ∈ [0, 1]` is optimal.
    Indifferent,
}

pub fn best_response_from_h(h: f64, costs: &CostParams) -> BestResponse {
    let tol = costs.indifference_tol();
    if h > tol {
        BestResponse::Zero
    } else if h < -tol {
        BestResponse::One
    } else {
        BestResponse::Indifferent
    }
}

/// The utility is linear in `q`, so the minimisers are `{0}`, `{1}` or all
/// of `[0, 1]`.
pub fn static_best_response(attr: &Attractor, params: &ModelParams, costs: &CostParams) -> BestResponse {
    best_response_from_h(h_value(attr.theta, attr.psi, params, costs), costs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EssKind {
    NonVaccinatingESS,
    VaccinatingESS,
    NoESS,
    Marginal,
}

impl EssKind {
    pub fn label(&self) -> &'static str {
        match self {
            EssKind::NonVaccinatingESS => "NonVaccinatingESS",
            EssKind::VaccinatingESS => "VaccinatingESS",
            EssKind::NoESS => "NoESS",
            EssKind::Marginal => "Marginal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EssVerdict {
    pub kind: EssKind,
    /// β must exceed this for the family to reach the vaccinating state with
    /// the clamp strictly active.
    pub beta_star_threshold: Option<f64>,
    pub equilibrium: Option<(f64, f64)>,
    pub h_value: Option<f64>,
    pub conjectured: bool,
    /// Which boundary made the verdict marginal, if any.
    pub marginal_on: Option<&'static str>,
}

impl EssVerdict {
    fn new(kind: EssKind, eq: Option<(f64, f64)>, h: Option<f64>, conjectured: bool) -> Self {
        Self { kind, beta_star_threshold: None, equilibrium: eq, h_value: h, conjectured, marginal_on: None }
    }

    fn marginal(on: &'static str, conjectured: bool) -> Self {
        Self { marginal_on: Some(on), ..Self::new(EssKind::Marginal, None, None, conjectured) }
    }

    /// Acceptance probability of the incumbent at its equilibrium.
    pub fn incumbent_q(&self) -> Option<f64> {
        match self.kind {
            EssKind::NonVaccinatingESS => Some(0.0),
            EssKind::VaccinatingESS => Some(1.0),
            _ => None,
        }
    }
}

/// Smallest β at which the family's propensity reaches 1 at the co-existence
/// point, from the tabulated formulas.
fn tabulated_threshold(family: &Policy, params: &ModelParams) -> Option<f64> {
    let x = params.mu() * params.rho();
    match family {
        Policy::FollowCrowd { .. } => Some(x),
        Policy::FreeRide { .. } => Some(x * x / (x - 1.0)),
        Policy::Vigilant { .. } => Some(x * x / (x - 1.0 - params.mu())),
        _ => unit_threshold(family, 1.0 - 1.0 / params.rho() - 1.0 / x, 1.0 / x),
    }
}

/// `1 / q̃|_{β=1}` at `(θ, ψ)`: propensities are linear in β.
fn unit_threshold(family: &Policy, theta: f64, psi: f64) -> Option<f64> {
    family.beta()?;
    let unit = family.with_beta(1.0).propensity_unchecked(theta, psi);
    (unit > 0.0).then(|| 1.0 / unit)
}

/// Evolutionary stability against static mutants for a policy family.
/// With excess deaths the vaccinating branch relies on the conjectured
/// equilibrium and is marked as such.
pub fn classify_ess(family: &Policy, params: &ModelParams, costs: &CostParams) -> Result<EssVerdict, EssError> {
    params.validate()?;
    costs.validate(params)?;
    let deadly = params.d_e > 0.0;
    let tol = DEFAULT_MARGINAL_TOL;
    let rho = params.rho();

    if (rho - 1.0).abs() <= tol {
        return Ok(EssVerdict::marginal("rho=1", deadly));
    }
    if rho < 1.0 {
        let h = h_value(0.0, 0.0, params, costs);
        return Ok(EssVerdict::new(EssKind::NonVaccinatingESS, Some((0.0, 0.0)), Some(h), deadly));
    }

    let hm = h_m(params, costs)?;
    let htol = costs.indifference_tol();
    if hm.abs() <= htol {
        return Ok(EssVerdict::marginal("h_m=0", deadly));
    }
    if hm > 0.0 {
        let eq = (nvdf_theta(params), 0.0);
        return Ok(EssVerdict::new(EssKind::NonVaccinatingESS, Some(eq), Some(hm), deadly));
    }
    if params.nu == 0.0 {
        return Ok(EssVerdict::new(EssKind::NoESS, None, Some(hm), deadly));
    }

    let (eq, threshold) = if deadly {
        let es = deadly_es_equilibrium(params)?;
        if es.no_ess {
            return Ok(EssVerdict::new(EssKind::NoESS, None, Some(hm), true));
        }
        (es.exact, unit_threshold(family, es.exact.0, es.exact.1))
    } else {
        let mu = params.mu();
        let x = mu * rho;
        if (x - (mu + 1.0)).abs() <= tol * (mu + 1.0) {
            return Ok(EssVerdict::marginal("mu*rho=mu+1", false));
        }
        match coexistence_point(params) {
            Ok(eq) => (eq, tabulated_threshold(family, params)),
            Err(AttractorError::NoCoexistence { .. }) => {
                return Ok(EssVerdict::new(EssKind::NoESS, None, Some(hm), false));
            }
            Err(e) => return Err(e.into()),
        }
    };
    let he = h_value(eq.0, eq.1, params, costs);
    if he.abs() <= htol {
        return Ok(EssVerdict::marginal("h_E=0", deadly));
    }
    if he > 0.0 {
        return Ok(EssVerdict::new(EssKind::NoESS, Some(eq), Some(he), deadly));
    }
    Ok(EssVerdict { beta_star_threshold: threshold, ..EssVerdict::new(EssKind::VaccinatingESS, Some(eq), Some(he), deadly) })
}

/// Equilibrium with excess deaths when every deciding susceptible accepts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeadlyEs {
    /// Root of the equilibrium quadratic.
    pub exact: (f64, f64),
    /// First-order expansion in the excess death rate.
    pub approx: (f64, f64),
    /// Correction factor `o`, equal to 1 without excess deaths.
    pub o: f64,
    /// Set when `μ + o ≥ μ ρ_e`: the accepting state leaves no infection.
    pub no_ess: bool,
    pub discriminant: f64,
}

pub fn deadly_es_equilibrium(params: &ModelParams) -> Result<DeadlyEs, EssError> {
    params.validate()?;
    let p = params;
    if p.nu == 0.0 {
        return Err(EssError::RegimeMismatch("no vaccine: the accepting state does not exist".into()));
    }
    let (l, de, rb) = (p.lambda, p.d_e, p.r + p.b);
    let bq = l * p.b + de * (p.r + de - l - p.nu);
    let cq = p.nu * rb;
    let disc = bq * bq + 4.0 * l * de * cq;
    if !(disc >= 0.0) {
        return Err(EssError::ComplexRoot { discriminant: disc });
    }
    let sq = disc.sqrt();
    // positive root of λ d_e ψ² + B ψ − ν (r + b) = 0
    let psi = if bq >= 0.0 { 2.0 * cq / (bq + sq) } else { (sq - bq) / (2.0 * l * de) };
    let rho_e = p.rho_e();
    let theta_of = |psi: f64| 1.0 - 1.0 / rho_e - l * psi / (l - de);
    let mu = p.mu();
    let o = 1.0 / (1.0 + de * (p.r + de - l - p.nu) / (mu * l * p.nu));
    let approx_psi = cq / bq;
    Ok(DeadlyEs {
        exact: (theta_of(psi), psi),
        approx: (theta_of(approx_psi), approx_psi),
        o,
        no_ess: mu + o >= mu * rho_e,
        discriminant: disc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MutationGrid {
    pub p_grid: Vec<f64>,
    pub eps_grid: Vec<f64>,
    /// Largest mutant fraction checked.
    pub eps_bar: f64,
}

impl Default for MutationGrid {
    fn default() -> Self {
        Self { p_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0], eps_grid: vec![0.001, 0.01, 0.05], eps_bar: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MutationPoint {
    pub p: f64,
    pub eps: f64,
    pub theta: f64,
    pub psi: f64,
    pub h: f64,
    pub response: BestResponse,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MutationReport {
    pub verdict: EssKind,
    pub base: (f64, f64),
    /// `max |Υ̂_0 − Υ̂|` over the mutant grid with no mutants present.
    pub eps_zero_gap: f64,
    pub points: Vec<MutationPoint>,
}

impl MutationReport {
    pub fn passed(&self) -> bool {
        self.points.iter().all(|pt| pt.holds)
    }

    pub fn violations(&self) -> impl Iterator<Item = &MutationPoint> {
        self.points.iter().filter(|pt| !pt.holds)
    }
}

/// Re-solves the dynamics with a fraction `ε` of static mutants accepting
/// with probability `p`, and checks the incumbent's response stays the
/// unique best response.
pub fn mutation_stability(
    family: &Policy,
    beta_star: f64,
    params: &ModelParams,
    costs: &CostParams,
    grid: &MutationGrid,
) -> Result<MutationReport, EssError> {
    let incumbent = family.with_beta(beta_star);
    let verdict = classify_ess(&incumbent, params, costs)?;
    let expected = match verdict.kind {
        EssKind::NonVaccinatingESS => BestResponse::Zero,
        EssKind::VaccinatingESS => BestResponse::One,
        k => return Err(EssError::NotAnEss(k.label())),
    };
    let base = closed_form(params, &incumbent)?;
    if expected == BestResponse::One && !base.clamp_active {
        return Err(EssError::RegimeMismatch(format!(
            "beta = {beta_star} does not reach the accepting state (threshold {:?})",
            verdict.beta_star_threshold
        )));
    }
    let solve = |p: f64, eps: f64, from: &OdeState| {
        let pol = Policy::mutant(incumbent.clone(), p, eps);
        find_equilibrium(from, params, &pol).map_err(|source| EssError::EquilibriumNotFound { p, eps, source })
    };

    let base_state = OdeState::new(base.theta, base.psi, base.eta);
    let mut eps_grid: Vec<f64> = grid.eps_grid.iter().copied().filter(|&e| e <= grid.eps_bar).collect();
    eps_grid.sort_by(f64::total_cmp);
    let mut points = Vec::new();
    let mut eps_zero_gap: f64 = 0.0;
    for &p in &grid.p_grid {
        // continue the branch in ε from the incumbent's attractor
        let mut prev = base_state;
        let mut nearest = None;
        for &eps in &eps_grid {
            let s = solve(p, eps, &prev)?.state;
            let h = h_value(s.theta, s.psi, params, costs);
            let response = best_response_from_h(h, costs);
            points.push(MutationPoint { p, eps, theta: s.theta, psi: s.psi, h, response, holds: response == expected });
            nearest.get_or_insert(s);
            prev = s;
        }
        // remove the mutants again and check the branch returns to the incumbent
        let s = solve(p, 0.0, &nearest.unwrap_or(base_state))?.state;
        eps_zero_gap = eps_zero_gap.max((s.theta - base.theta).abs()).max((s.psi - base.psi).abs());
    }
    Ok(MutationReport { verdict: verdict.kind, base: (base.theta, base.psi), eps_zero_gap, points })
}

/// One line of an ESS sweep export.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EssRow {
    pub sweep_var: String,
    pub value: f64,
    pub verdict: EssVerdict,
}

pub const ESS_CSV_HEADER: &str = "sweep_var,value,verdict,theta_star,psi_star,h,beta_star_threshold";

pub fn write_ess_csv<W: Write>(rows: &[EssRow], mut w: W) -> std::io::Result<()> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
    writeln!(w, "{ESS_CSV_HEADER}")?;
    for row in rows {
        let v = &row.verdict;
        writeln!(
            w,
            "{},{:.16e},{},{},{},{},{}",
            row.sweep_var,
            row.value,
            v.kind.label(),
            opt(v.equilibrium.map(|e| e.0)),
            opt(v.equilibrium.map(|e| e.1)),
            opt(v.h_value),
            opt(v.beta_star_threshold),
        )?;
    }
    Ok(())
}

/// Equilibria of a family over a β grid, for comparing `h` across the
/// family. Grid points without a point attractor are skipped.
pub fn family_equilibria(family: &Policy, params: &ModelParams, betas: &[f64]) -> Vec<Attractor> {
    betas
        .iter()
        .filter_map(|&b| match attractor::closed_form(params, &family.with_beta(b)) {
            Ok(a) => Some(a),
            Err(AttractorError::OutsideProvenRegion { attractor }) => Some(attractor),
            Err(_) => None,
        })
        .collect()
}
