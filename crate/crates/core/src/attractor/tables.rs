//! Regime rows without excess deaths, for the follow-the-crowd, free-ride
//! and vigilant families.

use super::{coexistence_point, Attractor, AttractorError, Cmp};
use crate::params::ModelParams;
use crate::policy::Policy;

pub(super) fn dispatch(c: &mut Cmp, p: &ModelParams, policy: &Policy, beta: f64) -> Result<Attractor, AttractorError> {
    let rho = p.rho();
    let mu = p.mu();
    let endemic = c.gt(rho, 1.0, "rho=1");
    let at = |theta: f64, psi: f64, row: &'static str| Attractor::at(theta, psi, row, p, policy);

    if p.nu == 0.0 {
        // no vaccine: nobody is ever vaccinated
        return Ok(if endemic { at(1.0 - 1.0 / rho, 0.0, "novax.nvdf") } else { at(0.0, 0.0, "novax.origin") });
    }
    let x = mu * rho;
    let coexist = |row| {
        let (t, s) = coexistence_point(p)?;
        Ok(at(t, s, row))
    };

    match policy {
        Policy::FollowCrowd { .. } => {
            if endemic {
                if c.lt(beta, x, "beta=mu*rho") {
                    return Ok(at(1.0 - 1.0 / rho, 0.0, "fc.nvdf"));
                }
                if c.lt(beta, mu + 1.0, "beta=mu+1") {
                    return Ok(at(0.0, 1.0 - mu / beta, "fc.disease_free"));
                }
                if c.lt(x, mu + 1.0, "mu*rho=mu+1") {
                    return Ok(at(0.0, 1.0 / (mu + 1.0), "fc.saturated"));
                }
                coexist("fc.coexistence")
            } else {
                if c.lt(beta, mu, "beta=mu") {
                    return Ok(at(0.0, 0.0, "fc.origin"));
                }
                if c.lt(beta, mu + 1.0, "beta=mu+1") {
                    return Ok(at(0.0, 1.0 - mu / beta, "fc.disease_free"));
                }
                Ok(at(0.0, 1.0 / (mu + 1.0), "fc.saturated"))
            }
        }
        Policy::FreeRide { .. } => {
            if endemic {
                if c.lt(beta, x, "beta=mu*rho") {
                    return Ok(at(1.0 - 1.0 / rho, 0.0, "fr.nvdf"));
                }
                if c.lt(beta, rho * x, "beta=rho^2*mu") {
                    // interior with q̃ = x (1 − x/β)
                    if x <= 1.0 || c.lt(x * (1.0 - x / beta), 1.0, "fr.interior.q=1") {
                        return Ok(at(x / beta - 1.0 / rho, 1.0 - x / beta, "fr.interior"));
                    }
                    return coexist("fr.coexistence_from_interior");
                }
                fr_face(c, beta, mu, x, &at, &coexist)
            } else {
                if c.lt(beta, mu, "beta=mu") {
                    return Ok(at(0.0, 0.0, "fr.origin"));
                }
                fr_face(c, beta, mu, x, &at, &coexist)
            }
        }
        Policy::Vigilant { .. } => {
            if !endemic {
                return Ok(at(0.0, 0.0, "vfc1.origin"));
            }
            if c.lt(beta, mu * rho * rho / (rho - 1.0), "beta=mu*rho^2/(rho-1)") {
                return Ok(at(1.0 - 1.0 / rho, 0.0, "vfc1.nvdf"));
            }
            let theta = x / beta;
            let psi = 1.0 - 1.0 / rho - x / beta;
            let a = if c.lt(beta * theta * psi, 1.0, "vfc1.interior.q=1") {
                at(theta, psi, "vfc1.interior")
            } else {
                coexist("vfc1.coexistence")?
            };
            // proven for β ≤ 2μρ², or where the clamp binds strictly
            if beta <= 2.0 * mu * rho * rho || a.clamp_active {
                Ok(a)
            } else {
                Err(AttractorError::OutsideProvenRegion { attractor: a })
            }
        }
        _ => Err(AttractorError::Unsupported(format!("family {}", policy.family()))),
    }
}

/// Free-ride rows on the disease-free face, valid for either disease regime.
fn fr_face(
    c: &mut Cmp,
    beta: f64,
    mu: f64,
    x: f64,
    at: &impl Fn(f64, f64, &'static str) -> Attractor,
    coexist: &impl Fn(&'static str) -> Result<Attractor, AttractorError>,
) -> Result<Attractor, AttractorError> {
    let root = (mu / beta).sqrt();
    // q̃(0, 1 − √(μ/β)) = √(βμ) − μ
    if c.lt((beta * mu).sqrt() - mu, 1.0, "fr.face.q=1") {
        return Ok(at(0.0, 1.0 - root, "fr.disease_free"));
    }
    if c.lt(x, mu + 1.0, "mu*rho=mu+1") {
        return Ok(at(0.0, 1.0 / (mu + 1.0), "fr.saturated"));
    }
    coexist("fr.coexistence")
}

#[cfg(test)]
mod tests {
    use super::super::{closed_form, AttractorKind};
    use super::*;

    fn left() -> ModelParams {
        ModelParams::new(8.549, 1.188, 0.904, 0.322, 0.1, 0.0).unwrap()
    }

    fn right() -> ModelParams {
        ModelParams::new(1.749, 1.0002, 0.404, 0.322, 0.1, 0.0).unwrap()
    }

    #[test]
    fn follow_crowd_rows() {
        let p = left();
        let a = closed_form(&p, &Policy::follow_crowd(1.0)).unwrap();
        assert_eq!(a.kind, AttractorKind::BoundaryNVDF);
        assert!((a.theta - 0.8234).abs() < 1e-4);
        let a = closed_form(&p, &Policy::follow_crowd(3.0)).unwrap();
        assert_eq!(a.row, "fc.coexistence");
        assert!(a.clamp_active);
        assert!((a.theta - 0.32746).abs() < 1e-4 && (a.psi - 0.49591).abs() < 1e-4);

        let r = right();
        let a = closed_form(&r, &Policy::follow_crowd(1.5)).unwrap();
        assert_eq!(a.row, "fc.disease_free");
        assert!((a.psi - (1.0 - r.mu() / 1.5)).abs() < 1e-15);
        let a = closed_form(&r, &Policy::follow_crowd(2.0)).unwrap();
        assert_eq!(a.row, "fc.saturated");
        assert!((a.psi - 1.0 / (r.mu() + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn free_ride_disease_free_example() {
        let a = closed_form(&right(), &Policy::free_ride(1.5)).unwrap();
        assert_eq!(a.kind, AttractorKind::DiseaseFree);
        assert!((a.psi - 0.27110).abs() < 1e-4);
    }

    #[test]
    fn self_eradicating_origin() {
        let p = ModelParams::new(1.0, 1.0, 1.0, 0.5, 0.2, 0.0).unwrap();
        for pol in [Policy::follow_crowd(0.3), Policy::free_ride(0.3), Policy::vigilant(0.3)] {
            let a = closed_form(&p, &pol).unwrap();
            assert_eq!((a.theta, a.psi, a.kind), (0.0, 0.0, AttractorKind::Origin));
        }
    }

    #[test]
    fn marginal_boundary_reports_both_rows() {
        let p = left();
        let x = p.mu() * p.rho();
        match closed_form(&p, &Policy::follow_crowd(x)) {
            Err(AttractorError::MarginalRegime { boundaries, candidates }) => {
                assert_eq!(boundaries, vec!["beta=mu*rho"]);
                assert_eq!(candidates.len(), 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn vigilant_unproven_region() {
        let r = right();
        // interior row starts above μρ²/(ρ−1) ≈ 4.32, past 2μρ² ≈ 2.79
        match closed_form(&r, &Policy::vigilant(6.0)) {
            Err(AttractorError::OutsideProvenRegion { attractor }) => {
                assert_eq!(attractor.row, "vfc1.interior");
                assert!((attractor.theta - r.mu() * r.rho() / 6.0).abs() < 1e-15);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(closed_form(&r, &Policy::vigilant(2.0)).unwrap().row, "vfc1.nvdf");
    }

    #[test]
    fn no_vaccine() {
        let p = ModelParams { nu: 0.0, ..left() };
        let a = closed_form(&p, &Policy::follow_crowd(100.0)).unwrap();
        assert_eq!(a.kind, AttractorKind::BoundaryNVDF);
    }
}
