//! Local stability of an equilibrium: eigenvalues of a finite-difference
//! Jacobian, plus sampling of a quadratic Lyapunov function in a small ball.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Attractor, AttractorError, AttractorKind};
use crate::linalg::{self, Complex};
use crate::ode::{fd_jacobian, field, field_with_q, lower_faces};
use crate::params::ModelParams;
use crate::policy::{Policy, ThresholdForm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityOptions {
    pub n_samples: usize,
    /// Ball radius, shrunk in proportion to the distance to the nearest face
    /// when that is below one.
    pub radius: f64,
    pub seed: u64,
    pub rel_step: f64,
    /// `|λ_max|` at or below this is reported as marginal.
    pub eig_tol: f64,
    pub pass_fraction: f64,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self { n_samples: 1000, radius: 1e-3, seed: 0x5eed, rel_step: 1e-5, eig_tol: 1e-8, pass_fraction: 0.99 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Stable,
    Marginal,
    Unstable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub eigenvalues: [Complex; 3],
    pub eigen_max_real: f64,
    /// Largest gap between the cubic-formula eigenvalues and the Schur route.
    pub eigen_crosscheck_gap: f64,
    pub lyapunov_pass_fraction: f64,
    pub lyapunov_sample_pass: bool,
    pub verdict: Verdict,
    /// Jacobian taken on one side of the clamp kink or a policy discontinuity.
    pub one_sided: bool,
}

/// Acceptance probability on the branch (clamp state, threshold side) that
/// holds at the centre, continued smoothly to nearby states.
fn branch_q(policy: &Policy, theta: f64, psi: f64, clamp: bool, on: bool) -> f64 {
    match policy {
        Policy::Mutant { base, p, eps } => (1.0 - eps) * branch_q(base, theta, psi, clamp, on) + eps * p,
        _ if clamp => 1.0,
        Policy::Threshold { beta, form, .. } => {
            if !on {
                0.0
            } else {
                match form {
                    ThresholdForm::Psi => beta * psi,
                    ThresholdForm::Theta => beta * theta,
                }
            }
        }
        _ => policy.propensity_unchecked(theta, psi),
    }
}

fn indicator_on(policy: &Policy, theta: f64) -> bool {
    match policy {
        Policy::Threshold { gamma, .. } => theta > *gamma,
        Policy::Mutant { base, .. } => indicator_on(base, theta),
        _ => true,
    }
}

pub fn certify_stability(attr: &Attractor, params: &ModelParams, policy: &Policy) -> Result<Certificate, AttractorError> {
    certify_stability_with(attr, params, policy, StabilityOptions::default())
}

pub fn certify_stability_with(
    attr: &Attractor,
    params: &ModelParams,
    policy: &Policy,
    opts: StabilityOptions,
) -> Result<Certificate, AttractorError> {
    if attr.kind == AttractorKind::LimitSet {
        return Err(AttractorError::RegimeMismatch("a limit set has no point certificate".into()));
    }
    let c = attr.point();
    let clamp = policy.clamp_active(c[0], c[1]);
    let on = indicator_on(policy, c[0]);
    let branch = |y: [f64; 3]| {
        let q = branch_q(policy, y[0], y[1], clamp, on);
        field_with_q(y, q, params)
    };
    let jac = fd_jacobian(branch, c, opts.rel_step, lower_faces(c, opts.rel_step));
    let eigenvalues = linalg::eigenvalues(&jac);
    let eigen_max_real = linalg::max_real_part(&eigenvalues);
    let reference = linalg::eigenvalues_reference(&jac);
    let gap = eigenvalues
        .iter()
        .map(|e| reference.iter().map(|r| (e.0 - r.0).hypot(e.1.abs() - r.1.abs())).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);

    // quadratic Lyapunov function from Jᵀ P + P J = −I; identity if unsolvable
    let metric = linalg::lyapunov(&jac)
        .filter(|p| (0..3).all(|i| p[i][i] > 0.0))
        .unwrap_or([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    // shrink the ball near a face so it samples the linear regime
    let scale = [c[0], c[1], 1.0 - c[0] - c[1], c[2]].into_iter().filter(|v| *v > 0.0).fold(1.0, f64::min);
    let mut radius = opts.radius * scale;
    let sample = |radius: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let (mut tried, mut kept, mut passed) = (0usize, 0usize, 0usize);
        let (mut crosses, mut kinked) = (false, false);
        while kept < opts.n_samples && tried < 100 * opts.n_samples {
            tried += 1;
            let dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n2 = dir.iter().map(|v| v * v).sum::<f64>();
            if n2 > 1.0 || n2 == 0.0 {
                continue;
            }
            let y: [f64; 3] = std::array::from_fn(|i| c[i] + radius * dir[i]);
            if y[0] < 0.0 || y[1] < 0.0 || y[0] + y[1] > 1.0 || y[2] <= 0.0 {
                continue;
            }
            kept += 1;
            // the clamp is continuous, so crossing it only makes the Jacobian one-sided;
            // the threshold indicator is a jump in the field
            if policy.clamp_active(y[0], y[1]) != clamp {
                kinked = true;
            }
            if indicator_on(policy, y[0]) != on {
                crosses = true;
            }
            let g = field(y, params, policy, 0.0);
            let d: [f64; 3] = std::array::from_fn(|i| y[i] - c[i]);
            let pg: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| metric[i][j] * g[j]).sum());
            let vdot = 2.0 * (0..3).map(|i| d[i] * pg[i]).sum::<f64>();
            if vdot < 0.0 {
                passed += 1;
            }
        }
        (kept, passed, crosses, kinked)
    };
    let (mut kept, mut passed, mut crosses, mut kinked) = sample(radius);
    // a point close to the clamp but off it: shrink until the ball stays on one branch
    for _ in 0..6 {
        if !kinked || crosses {
            break;
        }
        radius *= 0.1;
        (kept, passed, crosses, kinked) = sample(radius);
    }
    let frac = if kept == 0 { 0.0 } else { passed as f64 / kept as f64 };
    let sample_pass = kept > 0 && frac >= opts.pass_fraction;
    let verdict = if eigen_max_real.abs() <= opts.eig_tol {
        Verdict::Marginal
    } else if eigen_max_real < -opts.eig_tol && sample_pass {
        Verdict::Stable
    } else {
        Verdict::Unstable
    };
    let cert = Certificate {
        eigenvalues,
        eigen_max_real,
        eigen_crosscheck_gap: gap,
        lyapunov_pass_fraction: frac,
        lyapunov_sample_pass: sample_pass,
        verdict,
        one_sided: crosses || kinked,
    };
    if crosses {
        Err(AttractorError::OnDiscontinuity { certificate: Box::new(cert) })
    } else {
        Ok(cert)
    }
}

#[cfg(test)]
mod tests {
    use super::super::closed_form;
    use super::*;

    fn left() -> ModelParams {
        ModelParams::new(8.549, 1.188, 0.904, 0.322, 0.1, 0.0).unwrap()
    }

    #[test]
    fn coexistence_point_is_stable() {
        let p = left();
        let pol = Policy::follow_crowd(3.0);
        let a = closed_form(&p, &pol).unwrap();
        let cert = certify_stability(&a, &p, &pol).unwrap();
        assert_eq!(cert.verdict, Verdict::Stable, "{cert:?}");
        assert!(cert.eigen_crosscheck_gap < 1e-8);
    }

    #[test]
    fn origin_is_stable_when_self_eradicating() {
        let p = ModelParams::new(1.0, 1.0, 1.0, 0.5, 0.2, 0.0).unwrap();
        let pol = Policy::follow_crowd(0.3);
        let a = closed_form(&p, &pol).unwrap();
        let cert = certify_stability(&a, &p, &pol).unwrap();
        assert!(cert.eigen_max_real < 0.0);
        assert_eq!(cert.verdict, Verdict::Stable);
    }

    #[test]
    fn marginal_at_row_boundary() {
        let p = left();
        let x = p.mu() * p.rho();
        let pol = Policy::follow_crowd(x);
        let candidates = match closed_form(&p, &pol) {
            Err(AttractorError::MarginalRegime { candidates, .. }) => candidates,
            other => panic!("{other:?}"),
        };
        let nvdf = candidates.iter().find(|a| a.kind == AttractorKind::BoundaryNVDF).unwrap();
        let cert = certify_stability(nvdf, &p, &pol).unwrap();
        assert!(cert.eigen_max_real.abs() <= 1e-8, "{cert:?}");
        assert_eq!(cert.verdict, Verdict::Marginal);
    }

    #[test]
    fn non_attracting_equilibrium_is_unstable() {
        // NVDF is still an equilibrium past μρ, but no longer attracting
        let p = left();
        let pol = Policy::follow_crowd(3.0);
        let a = Attractor::at(1.0 - 1.0 / p.rho(), 0.0, "probe", &p, &pol);
        let cert = certify_stability(&a, &p, &pol).unwrap();
        assert_eq!(cert.verdict, Verdict::Unstable);
    }
}
