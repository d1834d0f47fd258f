//! Property tests over random parameters and states.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vaxgame_core::attractor::{closed_form, eta_hat, AttractorError};
use vaxgame_core::chain::{self, event_distribution, expected_increment, FractionState, PopState};
use vaxgame_core::ess::{classify_ess, family_equilibria, h_m, h_value, p_infection, utility, CostParams, EssKind, InfectionCost};
use vaxgame_core::ode::{field, find_equilibrium, integrate, OdeState, StepControl};
use vaxgame_core::{classify_regime, derive_ratios, ModelParams, Policy};

fn params(d_e_max: f64) -> impl Strategy<Value = ModelParams> {
    (0.2..10.0f64, 0.05..3.0f64, 0.0..3.0f64, 0.05..1.5f64, 0.0..1.0f64, 0.0..1.0f64).prop_filter_map(
        "b > d + d_e",
        move |(lambda, r, nu, b, df, ef)| {
            let d_e = ef * d_e_max * b;
            let d = df * (b - d_e) * 0.95;
            ModelParams::new(lambda, r, nu, b, d, d_e).ok()
        },
    )
}

fn simplex() -> impl Strategy<Value = (f64, f64)> {
    (0.0..1.0f64, 0.0..1.0f64).prop_map(|(a, b)| if a + b <= 1.0 { (a, b) } else { (1.0 - a, 1.0 - b) })
}

fn smooth_policy() -> impl Strategy<Value = Policy> {
    (0usize..3, 0.0..20.0f64).prop_map(|(k, beta)| match k {
        0 => Policy::follow_crowd(beta),
        1 => Policy::free_ride(beta),
        _ => Policy::vigilant(beta),
    })
}

fn costs() -> impl Strategy<Value = CostParams> {
    (0.0..4.0f64, 0.0..2.0f64, 0.0..3.0f64, 0.0..10.0f64).prop_map(|(c_v1, c_v2, c_v2_bar, c_i1)| CostParams {
        c_v1,
        c_v2,
        c_v2_bar,
        c_i1: InfectionCost::Fixed(c_i1),
        c_i2: 0.0,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ratios_depend_only_on_rate_ratios(p in params(0.5), scale in 0.01..100.0f64, beta in 0.0..10.0f64) {
        let s = ModelParams::new(p.lambda * scale, p.r * scale, p.nu * scale, p.b * scale, p.d * scale, p.d_e * scale).unwrap();
        let (a, b) = (derive_ratios(&p, beta), derive_ratios(&s, beta));
        for (x, y) in [(a.rho, b.rho), (a.mu, b.mu), (a.rho_e, b.rho_e), (a.mu_e, b.mu_e)] {
            prop_assert!(x == y || ((x - y) / x).abs() < 1e-12, "{x} vs {y}");
        }
        prop_assert_eq!(classify_regime(&a, 1e-9), classify_regime(&a, 1e-9));
    }

    #[test]
    fn excess_deaths_and_load_factors(p in params(0.5)) {
        if p.d_e == 0.0 {
            prop_assert_eq!(p.rho_e(), p.rho());
        } else if p.rho() > 1.0 {
            prop_assert!(p.rho_e() >= p.rho());
        }
    }

    #[test]
    fn acceptance_is_a_probability((t, s) in simplex(), pol in smooth_policy(), gamma in 0.0..1.0f64) {
        for pol in [pol.clone(), Policy::threshold(pol.beta().unwrap(), gamma), Policy::mutant(pol, 0.3, 0.2)] {
            let q = pol.accept_prob(t, s).unwrap();
            prop_assert!((0.0..=1.0).contains(&q));
        }
    }

    #[test]
    fn monotone_families((t, s) in simplex(), beta in 0.0..20.0f64, dt in 0.0..0.2f64, ds in 0.0..0.2f64) {
        let room = (1.0 - t - s).max(0.0);
        let k = if dt + ds > room { room / (dt + ds) } else { 1.0 };
        let (t2, s2) = (t + k * dt, s + k * ds);
        let fc = Policy::follow_crowd(beta);
        prop_assert!(fc.accept_prob(t, s2).unwrap() >= fc.accept_prob(t, s).unwrap());
        let v = Policy::vigilant(beta);
        prop_assert!(v.accept_prob(t, s2).unwrap() >= v.accept_prob(t, s).unwrap());
        prop_assert!(v.accept_prob(t2, s).unwrap() >= v.accept_prob(t, s).unwrap());
        prop_assert!(v.propensity(t2, s2).unwrap() >= v.propensity(t, s).unwrap());
        let fr = Policy::free_ride(beta);
        prop_assert!(fr.propensity(0.0, 0.5).unwrap() >= fr.propensity(0.0, s.min(1.0)).unwrap());
    }

    #[test]
    fn mutant_endpoints((t, s) in simplex(), pol in smooth_policy(), p in 0.0..1.0f64) {
        let base = pol.accept_prob(t, s).unwrap();
        prop_assert_eq!(Policy::mutant(pol.clone(), p, 0.0).accept_prob(t, s).unwrap(), base);
        prop_assert_eq!(Policy::mutant(pol, p, 1.0).accept_prob(t, s).unwrap(), Policy::Static { q: p }.accept_prob(t, s).unwrap());
    }

    #[test]
    fn event_distribution_is_normalised_and_scale_free(p in params(0.5), (t, s) in simplex(), pol in smooth_policy(), n in 10u64..100_000) {
        let d = event_distribution(&FractionState { theta: t, psi: s, eta: 1.0 }, &p, &pol).unwrap();
        let sum: f64 = d.probs.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(d.probs.iter().all(|&x| x >= 0.0));
        // the same fractions at two population sizes
        let a = PopState::new(n * 5, n * 3, n * 2);
        let b = PopState::new(n * 10, n * 6, n * 4);
        let (fa, fb) = (a.fractions(), b.fractions());
        let da = event_distribution(&fa, &p, &pol).unwrap();
        let db = event_distribution(&FractionState { eta: 123.0, ..fb }, &p, &pol).unwrap();
        prop_assert_eq!(da.probs, db.probs);
    }

    #[test]
    fn drift_matches_field(p in params(0.3), pol in smooth_policy(), (t, s) in simplex(), n0 in 100u64..5000, k in 1u64..1_000_000) {
        let mut st = PopState::from_fractions(n0, t, s).unwrap();
        st.step = k;
        let f = st.fractions();
        let db = chain::delta_bar(n0);
        // only states a path can reach
        prop_assume!(f.eta >= db);
        let drift = expected_increment(&st, &p, &pol).unwrap();
        let g = field([f.theta, f.psi, f.eta], &p, &pol, 0.0);
        let eps = 1.0 / (k + 1) as f64;
        let bound = 2.0 * eps * (db + 1.0) / (db * db);
        for i in 0..3 {
            prop_assert!((drift[i] - g[i]).abs() <= bound, "component {i}: {} vs {}", drift[i], g[i]);
        }
        // the η drift is exact
        prop_assert!((drift[2] - g[2]).abs() < 1e-9 * (1.0 + g[2].abs()));
    }

    #[test]
    fn same_seed_same_trajectory(seed in any::<u64>(), pol in smooth_policy()) {
        let p = ModelParams::new(4.0, 1.0, 1.0, 0.5, 0.1, 0.0).unwrap();
        let start = PopState::from_fractions(500, 0.1, 0.01).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            chain::simulate(&start, &p, &pol, 5_000, chain::default_delta(500), 10, &mut rng)
        };
        let (a, b) = (run(), run());
        prop_assert!(a.diagnostics.bounds_hold() || a.freeze_epoch.is_some());
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn integration_stays_in_simplex(p in params(0.5), pol in smooth_policy(), (t, s) in simplex(), eta in 0.05..5.0f64) {
        let path = integrate(&OdeState::new(t, s, eta), &p, &pol, 50.0, StepControl::default()).unwrap();
        for st in &path.samples {
            prop_assert!(st.theta >= -1e-10 && st.psi >= -1e-10 && st.theta + st.psi <= 1.0 + 1e-10);
        }
    }

    #[test]
    fn equilibria_sit_on_the_eta_nullcline(p in params(0.0), pol in smooth_policy()) {
        let Ok(a) = closed_form(&p, &pol) else { return Ok(()) };
        let eq = find_equilibrium(&OdeState::new(a.theta, a.psi, a.eta), &p, &pol).unwrap();
        let st = eq.state;
        prop_assert!((st.eta - eta_hat(st.theta, st.psi, &p)).abs() < 1e-8);
        prop_assert!((a.eta - (p.b - p.d) / chain::varrho(a.theta, a.psi, &p)).abs() < 1e-14);
    }

    #[test]
    fn clamped_families_coincide(p in params(0.0)) {
        prop_assume!(p.nu > 0.0 && p.rho() > 1.0);
        let x = p.mu() * p.rho();
        prop_assume!(x > p.mu() + 1.0 + 1e-6);
        // above every family's threshold and inside the proven vigilant range
        let beta = 2.0 * (x * x / (x - 1.0 - p.mu())).max(x * p.rho());
        let pts: Vec<_> = [Policy::follow_crowd(beta), Policy::free_ride(beta), Policy::vigilant(beta)]
            .iter()
            .map(|pol| closed_form(&p, pol))
            .collect();
        for r in &pts {
            let a = match r {
                Ok(a) => *a,
                Err(AttractorError::OutsideProvenRegion { attractor }) => *attractor,
                Err(e) => return Err(TestCaseError::fail(format!("{e}"))),
            };
            prop_assert!(a.clamp_active);
            prop_assert!((a.theta - (1.0 - 1.0 / p.rho() - 1.0 / x)).abs() < 1e-12);
            prop_assert!((a.psi - 1.0 / x).abs() < 1e-12);
        }
    }

    #[test]
    fn attractors_move_monotonically_in_beta(p in params(0.0), k in 0usize..3) {
        let base = [Policy::follow_crowd(1.0), Policy::free_ride(1.0), Policy::vigilant(1.0)][k].clone();
        let betas: Vec<f64> = (0..120).map(|i| 0.05 * 1.06f64.powi(i)).collect();
        let eqs = family_equilibria(&base, &p, &betas);
        for w in eqs.windows(2) {
            prop_assert!(w[1].theta <= w[0].theta + 1e-12, "{:?} then {:?}", w[0], w[1]);
            prop_assert!(w[1].psi >= w[0].psi - 1e-12, "{:?} then {:?}", w[0], w[1]);
        }
    }

    #[test]
    fn excess_death_rows_pass_the_residual_guard(p in params(0.5), beta in 0.0..1.0f64, fr in any::<bool>()) {
        prop_assume!(p.d_e > 0.0);
        let pol = if fr { Policy::free_ride(beta) } else { Policy::follow_crowd(beta) };
        match closed_form(&p, &pol) {
            Ok(a) => prop_assert!(a.residual(&p, &pol) < 1e-8),
            Err(AttractorError::ResidualCheckFailed { residual, .. }) => {
                return Err(TestCaseError::fail(format!("conjectured row rejected, residual {residual:e}")))
            }
            Err(_) => {}
        }
    }

    #[test]
    fn utility_is_linear(p in params(0.5), c in costs(), (t, s) in simplex(), q in 0.0..1.0f64) {
        let h = h_value(t, s, &p, &c);
        let diff = utility(q, t, s, &p, &c) - utility(0.0, t, s, &p, &c);
        prop_assert!((diff - q * h).abs() <= 1e-12 * (1.0 + h.abs() + utility(0.0, t, s, &p, &c).abs()));
    }

    #[test]
    fn h_is_non_increasing(p in params(0.0), c in costs(), (t, s) in simplex(), dt in 0.0..0.1f64, ds in 0.0..0.1f64) {
        let h = h_value(t, s, &p, &c);
        prop_assert!(h_value(t, (s + ds).min(1.0 - t), &p, &c) <= h + 1e-12);
        prop_assert!(h_value((t + dt).min(1.0 - s), s, &p, &c) <= h + 1e-12);
    }

    #[test]
    fn vaccinating_verdict_means_strict_clamp(p in params(0.0), c in costs(), pol in smooth_policy()) {
        let v = classify_ess(&pol, &p, &c).unwrap();
        if v.kind == EssKind::VaccinatingESS {
            prop_assert!(v.h_value.unwrap() < 0.0);
            prop_assert!(p.mu() * p.rho() > p.mu() + 1.0);
            let (t, s) = v.equilibrium.unwrap();
            let above = pol.with_beta(v.beta_star_threshold.unwrap() * (1.0 + 1e-6));
            prop_assert!(above.propensity(t, s).unwrap() > 1.0);
            prop_assert_eq!(above.accept_prob(t, s).unwrap(), 1.0);
        }
    }

    // h at a family equilibrium can exceed h_m only by the drop in infection risk
    // relative to the unvaccinated endemic state; the hesitancy term never grows.
    #[test]
    fn h_m_bounds_h_over_the_family_up_to_risk_drop(p in params(0.0), c in costs(), k in 0usize..3) {
        prop_assume!(p.rho() > 1.0);
        let hm = h_m(&p, &c).unwrap();
        let c_inf = c.c_i1.value(&p);
        let p_top = p_infection(1.0 - 1.0 / p.rho(), &p);
        let base = [Policy::follow_crowd(1.0), Policy::free_ride(1.0), Policy::vigilant(1.0)][k].clone();
        let betas: Vec<f64> = (0..80).map(|i| 0.05 * 1.1f64.powi(i)).collect();
        for a in family_equilibria(&base, &p, &betas) {
            let slack = (p_top - p_infection(a.theta, &p)) * c_inf;
            prop_assert!(slack >= -1e-12);
            prop_assert!(h_value(a.theta, a.psi, &p, &c) <= hm + slack + 1e-12, "{a:?}");
            if a.psi == 0.0 {
                prop_assert!((h_value(a.theta, a.psi, &p, &c) - hm).abs() < 1e-9);
            }
        }
    }
}
