//! Agreement between the closed-form, ODE and chain layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vaxgame_core::attractor::{closed_form, AttractorError};
use vaxgame_core::ess::{classify_ess, CostParams, EssKind};
use vaxgame_core::harness::{self, Experiment, XvVerdict};
use vaxgame_core::ode::{integrate, OdeState, StepControl};
use vaxgame_core::{ModelParams, Policy};

#[test]
fn ode_reaches_the_tabulated_point_from_random_starts() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut compared = 0;
    while compared < 60 {
        let b = rng.random_range(0.1..1.0);
        let p = ModelParams::new(
            rng.random_range(0.5..10.0),
            rng.random_range(0.1..2.0),
            rng.random_range(0.05..3.0),
            b,
            rng.random_range(0.0..0.8) * b,
            0.0,
        )
        .unwrap();
        let beta = rng.random_range(0.1..20.0);
        let pol = match compared % 3 {
            0 => Policy::follow_crowd(beta),
            1 => Policy::free_ride(beta),
            _ => Policy::vigilant(beta),
        };
        let a = match closed_form(&p, &pol) {
            Ok(a) => a,
            Err(AttractorError::OutsideProvenRegion { .. }) | Err(AttractorError::MarginalRegime { .. }) => continue,
            Err(e) => panic!("{e}"),
        };
        let start = OdeState::new(rng.random_range(0.05..0.5), rng.random_range(0.05..0.4), 1.0);
        let path = integrate(&start, &p, &pol, 4000.0, StepControl::default()).unwrap();
        let e = path.endpoint;
        // slow modes near a regime boundary can leave a small remainder
        assert!(
            (e.theta - a.theta).abs() < 1e-3 && (e.psi - a.psi).abs() < 1e-3,
            "{} at {p:?} {pol:?}: ode {e:?}",
            a.row
        );
        compared += 1;
    }
}

#[test]
fn harness_layers_agree_at_the_strong_load_nvdf() {
    let text = r#"
[experiment]
id = "xl"
layers = ["closed_form", "ode", "monte_carlo", "stability"]
threads = 2
[params]
lambda = 8.549
r = 1.188
nu = 0.904
b = 0.322
d = 0.1
d_e = 0.0
[policy]
family = "FC"
beta = 0.5
[sweep]
variable = "beta"
values = [0.5, 1.0]
families = ["FC", "FR"]
[mc]
n0 = 40000
max_steps = 400000
replications = 2
seed = 5
[initial]
theta0 = 0.8
psi0 = 0.02
[output]
dir = "unused"
"#;
    let exp = Experiment::from_toml_str(text).unwrap();
    for rec in harness::execute(&exp).unwrap() {
        assert_eq!(rec.reference().unwrap().row.split('.').nth(1), Some("nvdf"));
        assert!(matches!(rec.cross.ode, XvVerdict::Agree { .. }), "{:?}", rec.cross.ode);
        assert!(matches!(rec.cross.mc, XvVerdict::Agree { .. }), "{:?}", rec.cross.mc);
        assert_eq!(rec.stability.unwrap().unwrap().verdict, vaxgame_core::attractor::Verdict::Stable);
    }
}

#[test]
fn ess_equilibrium_is_the_clamped_attractor_of_every_family() {
    let p = ModelParams::new(8.549, 1.188, 0.904, 0.322, 0.1, 0.0).unwrap();
    let cheap = CostParams { c_v1: 0.5, ..CostParams::reference() };
    for fam in [Policy::follow_crowd(1.0), Policy::free_ride(1.0), Policy::vigilant(1.0)] {
        let v = classify_ess(&fam, &p, &cheap).unwrap();
        assert_eq!(v.kind, EssKind::VaccinatingESS);
        let beta = 1.01 * v.beta_star_threshold.unwrap();
        let a = closed_form(&p, &fam.with_beta(beta)).unwrap();
        let (t, s) = v.equilibrium.unwrap();
        assert!(a.clamp_active);
        assert!((a.theta - t).abs() < 1e-12 && (a.psi - s).abs() < 1e-12, "{a:?}");
        let path = integrate(&OdeState::new(0.2, 0.2, 1.0), &p, &fam.with_beta(beta), 4000.0, StepControl::default()).unwrap();
        assert!((path.endpoint.theta - t).abs() < 1e-4 && (path.endpoint.psi - s).abs() < 1e-4);
    }
}
