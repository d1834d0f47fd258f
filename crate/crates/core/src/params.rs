//! Epidemic and demographic rates, the dimensionless ratios derived from
//! them, and the endemic / self-eradicating classification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance used when a ratio is compared against a regime boundary.
pub const DEFAULT_MARGINAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamsError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("degenerate ratio: {0}")]
    DivisionDegenerate(&'static str),
}

/// All rates of the population process, per unit time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Contact (infection) rate.
    pub lambda: f64,
    /// Recovery rate.
    pub r: f64,
    /// Vaccination decision / availability rate.
    pub nu: f64,
    /// Per-capita birth rate.
    pub b: f64,
    /// Per-capita natural death rate.
    pub d: f64,
    /// Per-capita excess death rate among the infected.
    pub d_e: f64,
}

impl ModelParams {
    /// Builds and validates a parameter set.
    pub fn new(lambda: f64, r: f64, nu: f64, b: f64, d: f64, d_e: f64) -> Result<Self, ParamsError> {
        let p = Self { lambda, r, nu, b, d, d_e };
        p.validate()?;
        Ok(p)
    }

    /// Checks the standing assumptions, naming the first violated constraint.
    pub fn validate(&self) -> Result<(), ParamsError> {
        let named = [
            ("lambda", self.lambda),
            ("r", self.r),
            ("nu", self.nu),
            ("b", self.b),
            ("d", self.d),
            ("d_e", self.d_e),
        ];
        for (name, v) in named {
            if !v.is_finite() {
                return Err(ParamsError::InvalidParams(format!("{name} must be finite, got {v}")));
            }
            if v < 0.0 {
                return Err(ParamsError::InvalidParams(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.lambda <= 0.0 {
            return Err(ParamsError::InvalidParams("lambda must be > 0".into()));
        }
        if self.b <= 0.0 {
            return Err(ParamsError::InvalidParams("b must be > 0".into()));
        }
        if self.b <= self.d + self.d_e {
            return Err(ParamsError::InvalidParams(format!(
                "b > d + d_e violated: b = {}, d + d_e = {}",
                self.b,
                self.d + self.d_e
            )));
        }
        Ok(())
    }

    /// Load factor `λ / (r + b + d_e)`.
    pub fn rho(&self) -> f64 {
        self.lambda / (self.r + self.b + self.d_e)
    }

    /// `b / ν`; `+∞` when no vaccine is available.
    pub fn mu(&self) -> f64 {
        if self.nu == 0.0 {
            f64::INFINITY
        } else {
            self.b / self.nu
        }
    }

    /// Deadly-disease load factor `(λ − d_e) / (r + b)`.
    pub fn rho_e(&self) -> f64 {
        (self.lambda - self.d_e) / (self.r + self.b)
    }

    /// `(b − d_e) / (β̂ν − d_e)`; signed infinity when the denominator vanishes.
    pub fn mu_e(&self, beta_hat: f64) -> f64 {
        let den = beta_hat * self.nu - self.d_e;
        if den == 0.0 {
            f64::INFINITY.copysign(self.b - self.d_e)
        } else {
            (self.b - self.d_e) / den
        }
    }

    /// Returns a copy with one named rate replaced. Used by parameter sweeps.
    pub fn with(&self, name: &str, value: f64) -> Option<Self> {
        let mut p = *self;
        match name {
            "lambda" => p.lambda = value,
            "r" => p.r = value,
            "nu" => p.nu = value,
            "b" => p.b = value,
            "d" => p.d = value,
            "d_e" => p.d_e = value,
            _ => return None,
        }
        Some(p)
    }
}

/// Dimensionless ratios. `mu` and `mu_e` may carry infinite sentinels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ratios {
    pub rho: f64,
    pub mu: f64,
    pub rho_e: f64,
    pub mu_e: f64,
}

impl Ratios {
    /// Rejects the sentinel values produced by a vanishing denominator.
    pub fn strict(self) -> Result<Self, ParamsError> {
        if !self.mu.is_finite() {
            return Err(ParamsError::DivisionDegenerate("mu = b/nu with nu = 0"));
        }
        if !self.mu_e.is_finite() {
            return Err(ParamsError::DivisionDegenerate("mu_e with beta_hat * nu = d_e"));
        }
        Ok(self)
    }
}

/// Computes (ρ, μ, ρ_e, μ_e). Depends on rates only, never on population size.
pub fn derive_ratios(params: &ModelParams, beta_hat: f64) -> Ratios {
    Ratios {
        rho: params.rho(),
        mu: params.mu(),
        rho_e: params.rho_e(),
        mu_e: params.mu_e(beta_hat),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum DiseaseRegime {
    Endemic,
    SelfEradicating,
    Marginal,
}

/// Endemic iff ρ > 1 + tol, self-eradicating iff ρ < 1 − tol.
pub fn classify_regime(ratios: &Ratios, tol: f64) -> DiseaseRegime {
    if ratios.rho > 1.0 + tol {
        DiseaseRegime::Endemic
    } else if ratios.rho < 1.0 - tol {
        DiseaseRegime::SelfEradicating
    } else {
        DiseaseRegime::Marginal
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beta_sweep_strong() -> ModelParams {
        ModelParams::new(8.549, 1.188, 0.904, 0.322, 0.1, 0.0).unwrap()
    }

    #[test]
    fn validate_examples() {
        assert!(ModelParams::new(1.0, 1.0, 1.0, 1.0, 0.5, 0.0).is_ok());
        let err = ModelParams::new(1.0, 1.0, 1.0, 0.5, 0.5, 0.1).unwrap_err();
        assert!(matches!(err, ParamsError::InvalidParams(ref m) if m.contains("b > d + d_e")));
        assert!(ModelParams::new(8.549, 1.188, 0.904, 0.322, 0.1, 0.0).is_ok());
    }

    #[test]
    fn validate_rejects_bad_rates() {
        assert!(ModelParams::new(0.0, 1.0, 1.0, 1.0, 0.0, 0.0).is_err());
        assert!(ModelParams::new(1.0, -1.0, 1.0, 1.0, 0.0, 0.0).is_err());
        assert!(ModelParams::new(1.0, 1.0, f64::NAN, 1.0, 0.0, 0.0).is_err());
        assert!(ModelParams::new(1.0, 1.0, 1.0, f64::INFINITY, 0.0, 0.0).is_err());
    }

    #[test]
    fn ratios_reference_params() {
        let r = derive_ratios(&beta_sweep_strong(), 1.0);
        assert!((r.rho - 5.661_589_403_973_51).abs() < 1e-12);
        assert!((r.mu - 0.356_194_690_265_486_7).abs() < 1e-12);
        // rounded 5-digit values
        assert!((r.rho - 5.6616).abs() < 1e-4);
        assert!((r.mu - 0.35619).abs() < 1e-5);

        let right = ModelParams::new(1.749, 1.0002, 0.404, 0.322, 0.1, 0.0).unwrap();
        let r = derive_ratios(&right, 1.0);
        assert!((r.rho - 1.3228).abs() < 1e-4);
        assert!((r.mu - 0.79703).abs() < 1e-5);
    }

    #[test]
    fn marginal_boundary_is_exact() {
        let p = ModelParams::new(2.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        let r = derive_ratios(&p, 1.0);
        assert_eq!(r.rho, 1.0);
        assert_eq!(classify_regime(&r, DEFAULT_MARGINAL_TOL), DiseaseRegime::Marginal);
    }

    #[test]
    fn classify_examples() {
        let mk = |rho| Ratios { rho, mu: 1.0, rho_e: rho, mu_e: 1.0 };
        assert_eq!(classify_regime(&mk(5.66), 1e-9), DiseaseRegime::Endemic);
        assert_eq!(classify_regime(&mk(0.5), 1e-9), DiseaseRegime::SelfEradicating);
        assert_eq!(classify_regime(&mk(1.0), 1e-9), DiseaseRegime::Marginal);
    }

    #[test]
    fn rho_e_equals_rho_without_excess_deaths() {
        let p = beta_sweep_strong();
        assert_eq!(p.rho_e(), p.lambda / (p.r + p.b));
        assert!((p.rho_e() - p.rho()).abs() < 1e-15);
        let deadly = ModelParams { d_e: 0.05, ..p };
        assert!(deadly.rho_e() > deadly.rho());
    }

    #[test]
    fn degenerate_sentinels() {
        let p = ModelParams::new(2.0, 1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        let r = derive_ratios(&p, 1.0);
        assert!(r.mu.is_infinite());
        assert_eq!(r.strict(), Err(ParamsError::DivisionDegenerate("mu = b/nu with nu = 0")));

        let p = ModelParams::new(2.0, 1.0, 0.5, 1.0, 0.0, 0.25).unwrap();
        let r = derive_ratios(&p, 0.5);
        assert_eq!(r.mu_e, f64::INFINITY);
        assert!(r.strict().is_err());
    }

    #[test]
    fn with_replaces_named_rate() {
        let p = beta_sweep_strong();
        assert_eq!(p.with("nu", 0.5).unwrap().nu, 0.5);
        assert!(p.with("gamma", 0.5).is_none());
    }
}
