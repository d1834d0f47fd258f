//! Vaccination-response families: map the system fractions to the
//! probability that a deciding susceptible accepts vaccination.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack allowed when checking that fractions lie in the unit simplex.
const DOMAIN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("state outside the simplex: theta = {theta}, psi = {psi}")]
    DomainError { theta: f64, psi: f64 },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

/// Which quantity the threshold policy scales once the infection level
/// exceeds the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdForm {
    /// `β ψ 1{θ > Γ}`
    #[default]
    Psi,
    /// `β θ 1{θ > Γ}`
    Theta,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// Follow the crowd: `β ψ`.
    FollowCrowd { beta: f64 },
    /// Free ride: `β ψ (1 − ψ)`.
    FreeRide { beta: f64 },
    /// Vigilant follow-the-crowd: `β θ ψ`.
    Vigilant { beta: f64 },
    /// Vigilant only above an infection threshold `Γ`.
    Threshold { beta: f64, gamma: f64, form: ThresholdForm },
    /// State-independent acceptance probability.
    Static { q: f64 },
    /// A fraction `eps` of the population plays `Static(p)`, the rest play `base`.
    Mutant { base: Box<Policy>, p: f64, eps: f64 },
}

impl Policy {
    pub fn follow_crowd(beta: f64) -> Self {
        Policy::FollowCrowd { beta }
    }

    pub fn free_ride(beta: f64) -> Self {
        Policy::FreeRide { beta }
    }

    pub fn vigilant(beta: f64) -> Self {
        Policy::Vigilant { beta }
    }

    pub fn threshold(beta: f64, gamma: f64) -> Self {
        Policy::Threshold { beta, gamma, form: ThresholdForm::Psi }
    }

    pub fn mutant(base: Policy, p: f64, eps: f64) -> Self {
        Policy::Mutant { base: Box::new(base), p, eps }
    }

    /// Short family tag used in configs and CSV output.
    pub fn family(&self) -> &'static str {
        match self {
            Policy::FollowCrowd { .. } => "FC",
            Policy::FreeRide { .. } => "FR",
            Policy::Vigilant { .. } => "VFC1",
            Policy::Threshold { .. } => "VFC2",
            Policy::Static { .. } => "STATIC",
            Policy::Mutant { .. } => "MUTANT",
        }
    }

    /// Behaviour parameter β, if the family has one.
    pub fn beta(&self) -> Option<f64> {
        match self {
            Policy::FollowCrowd { beta }
            | Policy::FreeRide { beta }
            | Policy::Vigilant { beta }
            | Policy::Threshold { beta, .. } => Some(*beta),
            Policy::Static { .. } => None,
            Policy::Mutant { base, .. } => base.beta(),
        }
    }

    /// Same family with β replaced. Static policies are returned unchanged.
    pub fn with_beta(&self, new_beta: f64) -> Self {
        match self {
            Policy::FollowCrowd { .. } => Policy::FollowCrowd { beta: new_beta },
            Policy::FreeRide { .. } => Policy::FreeRide { beta: new_beta },
            Policy::Vigilant { .. } => Policy::Vigilant { beta: new_beta },
            Policy::Threshold { gamma, form, .. } => {
                Policy::Threshold { beta: new_beta, gamma: *gamma, form: *form }
            }
            Policy::Static { q } => Policy::Static { q: *q },
            Policy::Mutant { base, p, eps } => {
                Policy::Mutant { base: Box::new(base.with_beta(new_beta)), p: *p, eps: *eps }
            }
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(PolicyError::InvalidPolicy(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        if let Some(beta) = self.beta() {
            if !(beta >= 0.0 && beta.is_finite()) {
                return Err(PolicyError::InvalidPolicy(format!("beta must be finite and >= 0, got {beta}")));
            }
        }
        match self {
            Policy::Threshold { gamma, .. } => unit("gamma", *gamma),
            Policy::Static { q } => unit("q", *q),
            Policy::Mutant { base, p, eps } => {
                if matches!(**base, Policy::Mutant { .. }) {
                    return Err(PolicyError::InvalidPolicy("mutants of mutants are not supported".into()));
                }
                unit("p", *p)?;
                unit("eps", *eps)?;
                base.validate()
            }
            _ => Ok(()),
        }
    }

    /// Unclamped propensity `q̃(θ, ψ)`.
    pub fn propensity(&self, theta: f64, psi: f64) -> Result<f64, PolicyError> {
        check_domain(theta, psi)?;
        Ok(self.propensity_unchecked(theta, psi))
    }

    /// Acceptance probability `min{1, q̃(θ, ψ)}`. Mutants mix the clamped base
    /// probability with the static one.
    pub fn accept_prob(&self, theta: f64, psi: f64) -> Result<f64, PolicyError> {
        check_domain(theta, psi)?;
        Ok(self.accept_prob_unchecked(theta, psi))
    }

    /// As [`Policy::propensity`] without the domain check. Used on hot paths
    /// where the caller keeps the state in the simplex.
    pub fn propensity_unchecked(&self, theta: f64, psi: f64) -> f64 {
        match self {
            Policy::FollowCrowd { beta } => beta * psi,
            Policy::FreeRide { beta } => beta * psi * (1.0 - psi),
            Policy::Vigilant { beta } => beta * theta * psi,
            Policy::Threshold { beta, gamma, form } => {
                if theta > *gamma {
                    match form {
                        ThresholdForm::Psi => beta * psi,
                        ThresholdForm::Theta => beta * theta,
                    }
                } else {
                    0.0
                }
            }
            Policy::Static { q } => *q,
            Policy::Mutant { base, p, eps } => {
                (1.0 - eps) * base.propensity_unchecked(theta, psi) + eps * p
            }
        }
    }

    pub fn accept_prob_unchecked(&self, theta: f64, psi: f64) -> f64 {
        match self {
            Policy::Mutant { base, p, eps } => {
                let q = (1.0 - eps) * base.accept_prob_unchecked(theta, psi) + eps * p;
                q.clamp(0.0, 1.0)
            }
            _ => self.propensity_unchecked(theta, psi).min(1.0),
        }
    }

    /// Whether the clamp `min{1, ·}` binds at this state.
    pub fn clamp_active(&self, theta: f64, psi: f64) -> bool {
        match self {
            Policy::Mutant { base, .. } => base.clamp_active(theta, psi),
            _ => self.propensity_unchecked(theta, psi) > 1.0,
        }
    }

    /// Whether the policy has a discontinuity in the state (threshold indicator).
    pub fn has_indicator(&self) -> bool {
        match self {
            Policy::Threshold { gamma, .. } => *gamma > 0.0,
            Policy::Mutant { base, .. } => base.has_indicator(),
            _ => false,
        }
    }
}

fn check_domain(theta: f64, psi: f64) -> Result<(), PolicyError> {
    let ok = theta >= -DOMAIN_TOL
        && psi >= -DOMAIN_TOL
        && theta <= 1.0 + DOMAIN_TOL
        && psi <= 1.0 + DOMAIN_TOL
        && theta + psi <= 1.0 + DOMAIN_TOL;
    if ok && theta.is_finite() && psi.is_finite() {
        Ok(())
    } else {
        Err(PolicyError::DomainError { theta, psi })
    }
}
