//! Closed-form equilibria of the mean-field dynamics, regime dispatch and
//! numeric stability certification.

mod deadly;
mod stability;
mod tables;

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::chain::varrho;
use crate::ode::field_with_q;
use crate::params::{ModelParams, ParamsError, DEFAULT_MARGINAL_TOL};
use crate::policy::{Policy, PolicyError, ThresholdForm};

pub use deadly::{deadly_interior, DeadlyQuadratic};
pub use stability::{certify_stability, certify_stability_with, Certificate, StabilityOptions, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum AttractorKind {
    /// No vaccination, maximal infected fraction: `ψ = 0, θ > 0`.
    BoundaryNVDF,
    /// Disease eradicated with vaccination: `θ = 0, ψ > 0`.
    DiseaseFree,
    Origin,
    Interior,
    /// Switching policy: the limit is a set around a predicted centre.
    LimitSet,
    Marginal,
}

impl AttractorKind {
    pub fn label(&self) -> &'static str {
        match self {
            AttractorKind::BoundaryNVDF => "nvdf",
            AttractorKind::DiseaseFree => "disease_free",
            AttractorKind::Origin => "origin",
            AttractorKind::Interior => "interior",
            AttractorKind::LimitSet => "limit_set",
            AttractorKind::Marginal => "marginal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Attractor {
    pub theta: f64,
    pub psi: f64,
    pub eta: f64,
    pub kind: AttractorKind,
    /// Which regime row produced the point.
    pub row: &'static str,
    /// Whether `q̃ > 1` at the point, so the acceptance clamp binds.
    pub clamp_active: bool,
    /// Rows for the excess-death case are conjectured rather than proven.
    pub conjectured: bool,
}

impl Attractor {
    /// Builds an attractor with `η` on its nullcline and the kind inferred
    /// from which coordinates vanish.
    pub fn at(theta: f64, psi: f64, row: &'static str, params: &ModelParams, policy: &Policy) -> Self {
        let kind = match (theta > 0.0, psi > 0.0) {
            (false, false) => AttractorKind::Origin,
            (false, true) => AttractorKind::DiseaseFree,
            (true, false) => AttractorKind::BoundaryNVDF,
            (true, true) => AttractorKind::Interior,
        };
        Self {
            theta,
            psi,
            eta: eta_hat(theta, psi, params),
            kind,
            row,
            clamp_active: policy.clamp_active(theta, psi),
            conjectured: params.d_e > 0.0,
        }
    }

    pub fn point(&self) -> [f64; 3] {
        [self.theta, self.psi, self.eta]
    }

    /// `‖(g^θ, g^ψ, g^η)‖∞` at the point.
    pub fn residual(&self, params: &ModelParams, policy: &Policy) -> f64 {
        let q = policy.accept_prob_unchecked(self.theta, self.psi);
        let g = field_with_q(self.point(), q, params);
        g.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// `(b − d − d_e θ) / ϱ(θ, ψ)`.
pub fn eta_hat(theta: f64, psi: f64, p: &ModelParams) -> f64 {
    (p.b - p.d - p.d_e * theta) / varrho(theta, psi, p)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttractorError {
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("parameters sit on the regime boundary {boundaries:?}")]
    MarginalRegime { boundaries: Vec<&'static str>, candidates: Vec<Attractor> },
    #[error("outside the proven region for the vigilant family (beta > 2 mu rho^2 with the clamp inactive)")]
    OutsideProvenRegion { attractor: Attractor },
    #[error("no co-existence point: mu*rho = {mu_rho} <= mu + 1 = {mu_plus_one}")]
    NoCoexistence { mu_rho: f64, mu_plus_one: f64 },
    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),
    #[error("quadratic has complex roots (discriminant {discriminant})")]
    ComplexRoot { discriminant: f64 },
    #[error("closed form failed the residual check: |g| = {residual:e} at {attractor:?}")]
    ResidualCheckFailed { residual: f64, attractor: Attractor },
    #[error("threshold at zero: the policy behaves as follow-the-crowd")]
    ReducesToFollowCrowd,
    #[error("no closed form: {0}")]
    Unsupported(String),
    #[error("stability ball meets a policy discontinuity; one-sided certificate attached")]
    OnDiscontinuity { certificate: Box<Certificate> },
}

/// Three-way comparison against a regime boundary with a relative tolerance.
/// Marginal comparisons are recorded, and can be forced to either side to
/// enumerate the rows that meet at a boundary.
pub(crate) struct Cmp {
    tol: f64,
    forced: Vec<(&'static str, bool)>,
    pub(crate) marginal: Vec<&'static str>,
}

impl Cmp {
    fn new(tol: f64, forced: Vec<(&'static str, bool)>) -> Self {
        Self { tol, forced, marginal: Vec::new() }
    }

    /// `a > b`, unless the pair is within tolerance.
    pub(crate) fn gt(&mut self, a: f64, b: f64, label: &'static str) -> bool {
        if let Some(&(_, v)) = self.forced.iter().find(|f| f.0 == label) {
            return v;
        }
        let scale = a.abs().max(b.abs());
        if a.is_finite() && b.is_finite() && (a - b).abs() <= self.tol * scale {
            if !self.marginal.contains(&label) {
                self.marginal.push(label);
            }
        }
        a > b
    }

    pub(crate) fn lt(&mut self, a: f64, b: f64, label: &'static str) -> bool {
        self.gt(b, a, label)
    }
}

/// Runs `f`, and if any comparison was marginal, re-runs it with each
/// marginal boundary forced both ways to collect the adjacent rows.
pub(crate) fn resolve<F>(tol: f64, f: F) -> Result<Attractor, AttractorError>
where
    F: Fn(&mut Cmp) -> Result<Attractor, AttractorError>,
{
    let mut c = Cmp::new(tol, Vec::new());
    let first = f(&mut c);
    if c.marginal.is_empty() {
        return first;
    }
    let mut boundaries: Vec<&'static str> = Vec::new();
    let mut candidates: Vec<Attractor> = Vec::new();
    let mut queue = vec![Vec::new()];
    let mut runs = 0;
    while let Some(forced) = queue.pop() {
        runs += 1;
        if runs > 64 {
            break;
        }
        let mut c = Cmp::new(tol, forced.clone());
        let r = f(&mut c);
        let open: Vec<_> = c.marginal.iter().copied().filter(|l| !forced.iter().any(|x| x.0 == *l)).collect();
        if let Some(&label) = open.first() {
            if !boundaries.contains(&label) {
                boundaries.push(label);
            }
            for side in [true, false] {
                let mut next = forced.clone();
                next.push((label, side));
                queue.push(next);
            }
            continue;
        }
        let found = match r {
            Ok(a) => Some(a),
            Err(AttractorError::OutsideProvenRegion { attractor }) => Some(attractor),
            Err(_) => None,
        };
        if let Some(a) = found {
            if !candidates.iter().any(|x| x.row == a.row && x.theta == a.theta && x.psi == a.psi) {
                candidates.push(a);
            }
        }
    }
    Err(AttractorError::MarginalRegime { boundaries, candidates })
}

/// The interior point `(1 − 1/ρ − 1/(μρ), 1/(μρ))` reached when every
/// deciding susceptible accepts vaccination.
pub fn coexistence_point(params: &ModelParams) -> Result<(f64, f64), AttractorError> {
    let rho = params.rho();
    let mu = params.mu();
    let x = mu * rho;
    if !(x > mu + 1.0) || !x.is_finite() {
        return Err(AttractorError::NoCoexistence { mu_rho: x, mu_plus_one: mu + 1.0 });
    }
    Ok((1.0 - 1.0 / rho - 1.0 / x, 1.0 / x))
}

/// Equilibrium for each family, dispatched on the regime.
pub fn closed_form(params: &ModelParams, policy: &Policy) -> Result<Attractor, AttractorError> {
    closed_form_with_tol(params, policy, DEFAULT_MARGINAL_TOL)
}

pub fn closed_form_with_tol(params: &ModelParams, policy: &Policy, tol: f64) -> Result<Attractor, AttractorError> {
    params.validate()?;
    policy.validate()?;
    match policy {
        Policy::FollowCrowd { beta } | Policy::FreeRide { beta } | Policy::Vigilant { beta } => {
            if params.d_e > 0.0 {
                resolve(tol, |c| deadly::dispatch(c, params, policy, *beta))
            } else {
                resolve(tol, |c| tables::dispatch(c, params, policy, *beta))
            }
        }
        Policy::Threshold { beta, gamma, form } => threshold(params, policy, *beta, *gamma, *form, tol),
        Policy::Static { q } => resolve(tol, |c| static_attractor(c, params, policy, *q)),
        Policy::Mutant { .. } => Err(AttractorError::Unsupported(
            "mixed populations have no tabulated equilibrium; integrate the dynamics".into(),
        )),
    }
}

/// Infected fraction at the no-vaccination boundary point.
fn nvdf_theta(params: &ModelParams) -> f64 {
    if params.d_e > 0.0 {
        1.0 - 1.0 / params.rho_e()
    } else {
        1.0 - 1.0 / params.rho()
    }
}

/// Predicted centre of the limit set of the threshold policy: on the
/// switching surface `θ = Γ`, with `g^θ = 0` fixing `φ`.
pub fn vfc2_limit_set(params: &ModelParams, gamma: f64) -> Result<Attractor, AttractorError> {
    params.validate()?;
    if gamma == 0.0 {
        return Err(AttractorError::ReducesToFollowCrowd);
    }
    if !(params.rho() > 1.0) {
        return Err(AttractorError::RegimeMismatch("threshold policy needs an endemic disease".into()));
    }
    let top = nvdf_theta(params);
    if !(gamma > 0.0 && gamma < top) {
        return Err(AttractorError::RegimeMismatch(format!(
            "threshold {gamma} is not below the no-vaccination infected fraction {top}"
        )));
    }
    let phi = (params.r + params.b + params.d_e - params.d_e * gamma) / params.lambda;
    let psi = 1.0 - gamma - phi;
    Ok(Attractor {
        theta: gamma,
        psi,
        eta: eta_hat(gamma, psi, params),
        kind: AttractorKind::LimitSet,
        row: "vfc2.limit_set",
        clamp_active: false,
        conjectured: params.d_e > 0.0,
    })
}

fn threshold(
    params: &ModelParams,
    policy: &Policy,
    beta: f64,
    gamma: f64,
    form: ThresholdForm,
    tol: f64,
) -> Result<Attractor, AttractorError> {
    let top = nvdf_theta(params);
    if params.rho() < 1.0 {
        return Ok(Attractor::at(0.0, 0.0, "vfc2.origin", params, policy));
    }
    if gamma >= top {
        // the switch never turns on near the no-vaccination point
        return Ok(Attractor::at(top, 0.0, "vfc2.below_threshold", params, policy));
    }
    if form == ThresholdForm::Theta {
        return Err(AttractorError::Unsupported("theta-scaled threshold variant".into()));
    }
    let fc = closed_form_with_tol(params, &Policy::follow_crowd(beta), tol)?;
    if gamma == 0.0 {
        return Ok(fc);
    }
    if fc.theta > gamma * (1.0 + tol) {
        return Ok(Attractor { row: "vfc2.above_threshold", ..fc });
    }
    if fc.theta >= gamma * (1.0 - tol) {
        let set = vfc2_limit_set(params, gamma)?;
        return Err(AttractorError::MarginalRegime { boundaries: vec!["theta_hat=gamma"], candidates: vec![fc, set] });
    }
    vfc2_limit_set(params, gamma)
}

/// Equilibrium under a state-independent acceptance probability `q`.
fn static_attractor(c: &mut Cmp, params: &ModelParams, policy: &Policy, q: f64) -> Result<Attractor, AttractorError> {
    let p = params;
    let rho = p.rho();
    // on the disease-free face q ν (1 − ψ) = b ψ
    let psi_df = if q == 0.0 || p.nu == 0.0 { 0.0 } else { q * p.nu / (p.b + q * p.nu) };
    if !c.gt(rho * (1.0 - psi_df), 1.0, "rho*(1-psi)=1") {
        return Ok(Attractor::at(0.0, psi_df, "static.disease_free", p, policy));
    }
    let theta = if p.d_e == 0.0 {
        1.0 - 1.0 / rho - q * p.nu / (p.b * rho)
    } else {
        let cc = p.r + p.b + p.d_e;
        let a = p.d_e * (p.lambda - p.d_e);
        let b = -(p.b * (p.lambda - p.d_e) + p.d_e * (p.lambda - cc) - q * p.nu * p.d_e);
        let k = p.b * (p.lambda - cc) - q * p.nu * cc;
        smaller_root(a, b, k)?
    };
    let psi = (1.0 - theta - (p.r + p.b + p.d_e - p.d_e * theta) / p.lambda).max(0.0);
    if !(theta > 0.0 && theta + psi <= 1.0) {
        return Err(AttractorError::RegimeMismatch(format!("static equilibrium left the simplex: theta = {theta}")));
    }
    let row = if psi > 0.0 { "static.coexistence" } else { "static.nvdf" };
    Ok(Attractor::at(theta, psi, row, p, policy))
}

/// Smaller root of `a x² + b x + c` in the cancellation-free form; falls back
/// to the linear root when `a = 0`.
pub(crate) fn smaller_root(a: f64, b: f64, c: f64) -> Result<f64, AttractorError> {
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Err(AttractorError::ComplexRoot { discriminant: disc });
    }
    let s = disc.sqrt();
    if b <= 0.0 {
        Ok(2.0 * c / (-b + s))
    } else {
        // both roots negative when a, c > 0; return the one nearest zero
        Ok((-b + s) / (2.0 * a))
    }
}

/// One row of the regime atlas.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AtlasRow {
    pub family: &'static str,
    pub params: ModelParams,
    pub beta: f64,
    pub regime_row: String,
    pub theta: f64,
    pub psi: f64,
    pub kind: AttractorKind,
    pub conjectured: bool,
    pub eigen_max_real: f64,
}

/// Dispatches and certifies one parameter point. Marginal or failing points
/// become rows of kind `Marginal` with the reason in `regime_row`.
pub fn atlas_row(params: &ModelParams, policy: &Policy) -> AtlasRow {
    let beta = policy.beta().unwrap_or(f64::NAN);
    let blank = |why: String| AtlasRow {
        family: policy.family(),
        params: *params,
        beta,
        regime_row: why,
        theta: f64::NAN,
        psi: f64::NAN,
        kind: AttractorKind::Marginal,
        conjectured: params.d_e > 0.0,
        eigen_max_real: f64::NAN,
    };
    let (attr, note) = match closed_form(params, policy) {
        Ok(a) => (a, ""),
        Err(AttractorError::OutsideProvenRegion { attractor }) => (attractor, "+unproven"),
        Err(AttractorError::MarginalRegime { boundaries, .. }) => {
            return blank(format!("marginal:{}", boundaries.join("|")));
        }
        Err(e) => return blank(format!("error:{e}")),
    };
    let eig = if attr.kind == AttractorKind::LimitSet {
        f64::NAN
    } else {
        match certify_stability(&attr, params, policy) {
            Ok(c) => c.eigen_max_real,
            Err(AttractorError::OnDiscontinuity { certificate }) => certificate.eigen_max_real,
            Err(_) => f64::NAN,
        }
    };
    AtlasRow {
        family: policy.family(),
        params: *params,
        beta,
        regime_row: format!("{}{}", attr.row, note),
        theta: attr.theta,
        psi: attr.psi,
        kind: attr.kind,
        conjectured: attr.conjectured,
        eigen_max_real: eig,
    }
}

pub fn write_atlas_csv<W: Write>(rows: &[AtlasRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "family,params,beta,regime_row,theta_hat,psi_hat,kind,conjectured,eigen_max_real")?;
    for r in rows {
        let p = &r.params;
        writeln!(
            w,
            "{},lambda={};r={};nu={};b={};d={};d_e={},{},{},{:.16e},{:.16e},{},{},{:.16e}",
            r.family,
            p.lambda,
            p.r,
            p.nu,
            p.b,
            p.d,
            p.d_e,
            r.beta,
            r.regime_row.replace(',', ";"),
            r.theta,
            r.psi,
            r.kind.label(),
            r.conjectured,
            r.eigen_max_real
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn left() -> ModelParams {
        ModelParams::new(8.549, 1.188, 0.904, 0.322, 0.1, 0.0).unwrap()
    }

    #[test]
    fn coexistence_examples() {
        let (t, p) = coexistence_point(&left()).unwrap();
        assert!((t - 0.32746).abs() < 1e-4 && (p - 0.49591).abs() < 1e-4);
        // μρ = μ + 1 exactly: λ = 2, r + b = 1, b = 1, ν = 1 gives μ = 1, ρ = 2
        let edge = ModelParams::new(2.0, 0.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        assert!(matches!(coexistence_point(&edge), Err(AttractorError::NoCoexistence { .. })));
        let scarce = ModelParams { nu: 1e-9, ..left() };
        let (t, p) = coexistence_point(&scarce).unwrap();
        assert!((t - (1.0 - 1.0 / scarce.rho())).abs() < 1e-6 && p < 1e-6);
    }

    #[test]
    fn limit_set_centre() {
        // ρ = 2
        let p = ModelParams::new(2.0, 0.5, 1.0, 0.5, 0.1, 0.0).unwrap();
        let a = vfc2_limit_set(&p, 0.2).unwrap();
        assert!((a.theta - 0.2).abs() < 1e-15 && (a.psi - 0.3).abs() < 1e-15);
        assert!(matches!(vfc2_limit_set(&p, 0.9), Err(AttractorError::RegimeMismatch(_))));
        assert_eq!(vfc2_limit_set(&p, 0.0), Err(AttractorError::ReducesToFollowCrowd));
    }

    #[test]
    fn threshold_zero_matches_follow_crowd() {
        let p = left();
        let a = closed_form(&p, &Policy::threshold(3.0, 0.0)).unwrap();
        let b = closed_form(&p, &Policy::follow_crowd(3.0)).unwrap();
        assert_eq!((a.theta, a.psi), (b.theta, b.psi));
    }

    #[test]
    fn threshold_above_and_below() {
        let p = left();
        // FC at β = 0.5 sits at θ = 0.823 > Γ = 0.5
        let a = closed_form(&p, &Policy::threshold(0.5, 0.5)).unwrap();
        assert_eq!(a.row, "vfc2.above_threshold");
        let a = closed_form(&p, &Policy::threshold(10.0, 0.5)).unwrap();
        assert_eq!(a.kind, AttractorKind::LimitSet);
        let a = closed_form(&p, &Policy::threshold(10.0, 0.9)).unwrap();
        assert_eq!(a.kind, AttractorKind::BoundaryNVDF);
    }

    #[test]
    fn static_policy_equilibria() {
        let p = left();
        let a = closed_form(&p, &Policy::Static { q: 1.0 }).unwrap();
        let (t, s) = coexistence_point(&p).unwrap();
        assert!((a.theta - t).abs() < 1e-12 && (a.psi - s).abs() < 1e-12);
        let a = closed_form(&p, &Policy::Static { q: 0.0 }).unwrap();
        assert_eq!(a.kind, AttractorKind::BoundaryNVDF);
        let deadly = ModelParams { d_e: 0.05, ..p };
        let a = closed_form(&deadly, &Policy::Static { q: 0.7 }).unwrap();
        assert!(a.residual(&deadly, &Policy::Static { q: 0.7 }) < 1e-10, "{a:?}");
    }

    #[test]
    fn smaller_root_linear_limit() {
        assert!((smaller_root(0.0, -2.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((smaller_root(1.0, -3.0, 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(smaller_root(1.0, 0.0, 1.0), Err(AttractorError::ComplexRoot { .. })));
    }

    #[test]
    fn atlas_csv_header() {
        let rows = vec![atlas_row(&left(), &Policy::follow_crowd(1.0))];
        let mut out = Vec::new();
        write_atlas_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "family,params,beta,regime_row,theta_hat,psi_hat,kind,conjectured,eigen_max_real");
        assert_eq!(lines.next().unwrap().split(',').count(), 9);
        assert!(rows[0].eigen_max_real < 0.0);
    }
}
