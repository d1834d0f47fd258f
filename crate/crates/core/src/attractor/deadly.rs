//! Conjectured regime rows with excess deaths among the infected
//! (follow-the-crowd and free-ride, `β̂ ≤ 1`). Every point is re-checked
//! against the vector field before it is returned.

use serde::Serialize;

use super::{smaller_root, Attractor, AttractorError, Cmp};
use crate::params::ModelParams;
use crate::policy::Policy;

/// Largest `‖g‖∞` accepted for a conjectured point.
const RESIDUAL_TOL: f64 = 1e-8;

/// Quadratic `A x² + B x + C` in `x = 1 − ψ` whose smaller root gives the
/// free-ride interior point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeadlyQuadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl DeadlyQuadratic {
    pub fn new(p: &ModelParams, beta: f64) -> Self {
        let bn = beta * p.nu;
        Self {
            a: p.d_e * bn,
            b: -((p.r + p.b + p.d_e) * bn + p.d_e * p.lambda),
            c: p.b * p.lambda + p.d_e * (p.r + p.d_e),
        }
    }

    pub fn discriminant(&self) -> f64 {
        self.b * self.b - 4.0 * self.a * self.c
    }

    /// `ψ̂ = 1 − x₋`.
    pub fn psi(&self) -> Result<f64, AttractorError> {
        Ok(1.0 - smaller_root(self.a, self.b, self.c)?)
    }
}

/// Growth rate sign of ψ at the no-vaccination point, up to a positive
/// factor: `(β̂ν − d_e)/ρ_e − (b − d_e)`.
fn transverse(p: &ModelParams, beta: f64) -> f64 {
    (beta * p.nu - p.d_e) / p.rho_e() - (p.b - p.d_e)
}

fn checked(a: Attractor, p: &ModelParams, policy: &Policy) -> Result<Attractor, AttractorError> {
    if !(a.theta >= 0.0 && a.psi >= 0.0 && a.theta + a.psi <= 1.0) {
        return Err(AttractorError::RegimeMismatch(format!(
            "conjectured point ({}, {}) is outside the simplex",
            a.theta, a.psi
        )));
    }
    let res = a.residual(p, policy);
    if res < RESIDUAL_TOL {
        Ok(a)
    } else {
        Err(AttractorError::ResidualCheckFailed { residual: res, attractor: a })
    }
}

fn fc_interior(p: &ModelParams, beta: f64, policy: &Policy) -> Result<Attractor, AttractorError> {
    let bn = beta * p.nu;
    let theta = (p.b - bn / p.rho()) / (p.d_e * (1.0 - bn / p.lambda));
    let psi = 1.0 - theta * (1.0 - p.d_e / p.lambda) - 1.0 / p.rho();
    checked(Attractor::at(theta, psi, "fc_deadly.interior", p, policy), p, policy)
}

fn fr_interior(p: &ModelParams, beta: f64, policy: &Policy, row: &'static str) -> Result<Attractor, AttractorError> {
    let psi = DeadlyQuadratic::new(p, beta).psi()?;
    let theta = 1.0 - 1.0 / p.rho_e() - p.lambda * psi / (p.lambda - p.d_e);
    checked(Attractor::at(theta, psi, row, p, policy), p, policy)
}

pub(super) fn dispatch(c: &mut Cmp, p: &ModelParams, policy: &Policy, beta: f64) -> Result<Attractor, AttractorError> {
    if beta > 1.0 {
        return Err(AttractorError::RegimeMismatch(format!(
            "excess-death rows cover beta <= 1, got {beta}"
        )));
    }
    let rho = p.rho();
    let mu = p.mu();
    let x = mu * rho;
    let endemic = c.gt(rho, 1.0, "rho=1");
    let at = |theta: f64, psi: f64, row: &'static str| Attractor::at(theta, psi, row, p, policy);
    let fr = matches!(policy, Policy::FreeRide { .. });
    if !fr && !matches!(policy, Policy::FollowCrowd { .. }) {
        return Err(AttractorError::Unsupported(format!(
            "no excess-death rows for family {}",
            policy.family()
        )));
    }

    if !endemic {
        if c.gt(beta, mu, "beta=mu") {
            let psi = if fr { 1.0 - (mu / beta).sqrt() } else { 1.0 - mu / beta };
            let row = if fr { "fr_deadly.disease_free" } else { "fc_deadly.disease_free" };
            return checked(at(0.0, psi, row), p, policy);
        }
        let row = if fr { "fr_deadly.origin" } else { "fc_deadly.origin" };
        return Ok(at(0.0, 0.0, row));
    }

    if p.nu > 0.0 && c.gt(beta, x, "beta=mu*rho") {
        if !fr {
            return checked(at(0.0, 1.0 - mu / beta, "fc_deadly.disease_free"), p, policy);
        }
        if c.gt(beta, rho * x, "beta=rho^2*mu") {
            return checked(at(0.0, 1.0 - (mu / beta).sqrt(), "fr_deadly.disease_free"), p, policy);
        }
        return fr_interior(p, beta, policy, "fr_deadly.interior_upper");
    }

    // below μρ: the no-vaccination point unless ψ can invade it
    let invades = c.gt(transverse(p, beta), 0.0, "rho_e*mu_e=1") && c.gt(beta * p.nu, p.b - p.d_e, "beta*nu=b-d_e");
    if !invades {
        let row = if fr { "fr_deadly.nvdf" } else { "fc_deadly.nvdf" };
        return checked(at(1.0 - 1.0 / p.rho_e(), 0.0, row), p, policy);
    }
    if fr {
        fr_interior(p, beta, policy, "fr_deadly.interior_lower")
    } else {
        fc_interior(p, beta, policy)
    }
}

/// Evaluates the excess-death interior row for the family, after checking
/// that the parameters lie in that row's regime.
pub fn deadly_interior(params: &ModelParams, beta: f64, family: &Policy) -> Result<Attractor, AttractorError> {
    params.validate()?;
    let p = params;
    if !(p.d_e > 0.0) {
        return Err(AttractorError::RegimeMismatch("excess death rate is zero".into()));
    }
    if beta > 1.0 {
        return Err(AttractorError::RegimeMismatch(format!("excess-death rows cover beta <= 1, got {beta}")));
    }
    if !(p.rho() > 1.0) || p.nu == 0.0 {
        return Err(AttractorError::RegimeMismatch("interior rows need an endemic disease and a vaccine".into()));
    }
    let x = p.mu() * p.rho();
    let lower_ok = transverse(p, beta) > 0.0 && beta * p.nu > p.b - p.d_e;
    let policy_fc = Policy::follow_crowd(beta);
    let policy_fr = Policy::free_ride(beta);
    match family {
        Policy::FollowCrowd { .. } => {
            if beta < x && lower_ok {
                fc_interior(p, beta, &policy_fc)
            } else {
                Err(AttractorError::RegimeMismatch(format!(
                    "follow-the-crowd interior needs beta < mu*rho and rho_e*mu_e < 1 with beta*nu > b - d_e \
                     (beta = {beta}, mu*rho = {x}, rho_e*mu_e = {})",
                    p.rho_e() * p.mu_e(beta)
                )))
            }
        }
        Policy::FreeRide { .. } => {
            if beta > x && beta < p.rho() * x {
                fr_interior(p, beta, &policy_fr, "fr_deadly.interior_upper")
            } else if beta < x && lower_ok {
                fr_interior(p, beta, &policy_fr, "fr_deadly.interior_lower")
            } else {
                Err(AttractorError::RegimeMismatch(format!(
                    "free-ride interior regime not met (beta = {beta}, mu*rho = {x}, rho_e*mu_e = {})",
                    p.rho_e() * p.mu_e(beta)
                )))
            }
        }
        _ => Err(AttractorError::Unsupported(format!("no excess-death interior for {}", family.family()))),
    }
}
