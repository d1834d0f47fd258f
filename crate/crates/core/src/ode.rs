//! Mean-field dynamics of the fractions (θ, ψ) and the population per epoch η.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::chain::varrho;
use crate::linalg::Mat3;
use crate::params::ModelParams;
use crate::policy::{Policy, PolicyError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("total event rate vanished")]
    DegenerateState,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("step size underflow at t = {t} (theta = {theta}, psi = {psi})")]
    StepFailure { t: f64, theta: f64, psi: f64 },
    #[error("no equilibrium found; best residual {residual:e}")]
    NotConverged { best: OdeState, residual: f64 },
    #[error("threshold policy keeps switching near theta = {level}; limit is a set, not a point")]
    IndicatorNonstationary { level: f64, center: OdeState, crossings: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OdeState {
    pub theta: f64,
    pub psi: f64,
    pub eta: f64,
    pub t: f64,
}

impl OdeState {
    pub fn new(theta: f64, psi: f64, eta: f64) -> Self {
        Self { theta, psi, eta, t: 0.0 }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.theta, self.psi, self.eta]
    }

    fn from_array(y: [f64; 3], t: f64) -> Self {
        Self { theta: y[0], psi: y[1], eta: y[2], t }
    }
}

/// Right-hand side for a given acceptance probability `q`, without the
/// freeze indicator.
pub fn field_with_q(y: [f64; 3], q: f64, p: &ModelParams) -> [f64; 3] {
    let [theta, psi, eta] = y;
    let phi = 1.0 - theta - psi;
    let rate = varrho(theta, psi, p);
    let net_birth = p.b - p.d_e * theta;
    let tscale = 1.0 / (eta * rate);
    [
        theta * tscale * (phi * p.lambda - p.r - p.d_e - net_birth),
        tscale * (q * phi * p.nu - net_birth * psi),
        (p.b - p.d - p.d_e * theta) / rate - eta,
    ]
}

/// Right-hand side with the policy evaluated at `y`; no domain checks.
pub fn field(y: [f64; 3], p: &ModelParams, policy: &Policy, delta: f64) -> [f64; 3] {
    if y[2] <= delta {
        return [0.0; 3];
    }
    let q = policy.accept_prob_unchecked(y[0].max(0.0), y[1].max(0.0));
    field_with_q(y, q, p)
}

/// The mean-field vector field `g(θ, ψ, η)`.
pub fn rhs(state: &OdeState, params: &ModelParams, policy: &Policy, delta: f64) -> Result<[f64; 3], OdeError> {
    policy.accept_prob(state.theta, state.psi)?;
    if !(varrho(state.theta, state.psi, params) > 0.0) || !(state.eta > 0.0) {
        return Err(OdeError::DegenerateState);
    }
    Ok(field(state.as_array(), params, policy, delta))
}

/// Population per epoch at which `g^η` vanishes.
pub fn eta_nullcline(theta: f64, psi: f64, p: &ModelParams) -> f64 {
    (p.b - p.d - p.d_e * theta) / varrho(theta, psi, p)
}

fn inf_norm(v: &[f64; 3]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Clamps to θ, ψ ≥ 0, θ + ψ ≤ 1.
fn project(y: &mut [f64; 3]) {
    // values this small are flushed so a decaying face does not go subnormal
    for v in y.iter_mut().take(2) {
        if *v < 1e-250 {
            *v = 0.0;
        }
    }
    let s = y[0] + y[1];
    if s > 1.0 {
        y[0] /= s;
        y[1] /= s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepControl {
    pub h0: f64,
    pub tol: f64,
    /// Below this a step counts as underflow.
    pub h_min: f64,
    /// Fixed step used after an underflow at a policy discontinuity.
    pub fallback_h: f64,
    /// Stop once `‖g‖∞` stays below this for `steady_steps` accepted steps.
    pub steady_tol: f64,
    pub steady_steps: usize,
    pub max_samples: usize,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            h0: 1e-3,
            tol: 1e-13,
            h_min: 1e-12,
            fallback_h: 1e-3,
            steady_tol: 1e-10,
            steady_steps: 100,
            max_samples: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OdePath {
    pub endpoint: OdeState,
    pub samples: Vec<OdeState>,
    /// Where the fixed-step fallback engaged, if it did.
    pub fallback_at: Option<OdeState>,
    /// Crossings of the policy threshold located along the path.
    pub crossings: usize,
    pub steady: bool,
    pub accepted_steps: usize,
}

impl OdePath {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,theta,psi,eta")?;
        for s in &self.samples {
            writeln!(w, "{},{},{},{}", s.t, s.theta, s.psi, s.eta)?;
        }
        Ok(())
    }
}

struct Recorder {
    samples: Vec<OdeState>,
    every: usize,
    seen: usize,
    cap: usize,
}

impl Recorder {
    fn push(&mut self, s: OdeState) {
        if self.seen % self.every == 0 {
            self.samples.push(s);
            if self.samples.len() >= self.cap {
                // thin to every other sample and halve the rate from here on
                let mut keep = 0;
                self.samples.retain(|_| {
                    keep += 1;
                    keep % 2 == 1
                });
                self.every *= 2;
            }
        }
        self.seen += 1;
    }
}

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One Dormand–Prince step. Returns (y_new, f(y_new), scaled error).
fn dp_step<F: Fn([f64; 3]) -> [f64; 3]>(f: &F, y: [f64; 3], k1: [f64; 3], h: f64, tol: f64) -> ([f64; 3], [f64; 3], f64) {
    let mut k = [[0.0; 3]; 7];
    k[0] = k1;
    for s in 1..7 {
        let mut ys = y;
        for (j, kj) in k.iter().enumerate().take(s) {
            for i in 0..3 {
                ys[i] += h * A[s][j] * kj[i];
            }
        }
        k[s] = f(ys);
    }
    // stage 7 is evaluated at the 5th-order solution (FSAL)
    let mut y5 = y;
    let mut err = 0.0f64;
    for i in 0..3 {
        let mut e = 0.0;
        for s in 0..6 {
            y5[i] += h * A[6][s] * k[s][i];
        }
        for s in 0..7 {
            let b5 = if s < 6 { A[6][s] } else { 0.0 };
            e += h * (b5 - B4[s]) * k[s][i];
        }
        let sc = tol + tol * y[i].abs().max(y5[i].abs());
        err = err.max((e / sc).abs());
    }
    (y5, k[6], err)
}

fn rk4_step<F: Fn([f64; 3]) -> [f64; 3]>(f: &F, y: [f64; 3], h: f64) -> [f64; 3] {
    let add = |a: [f64; 3], b: [f64; 3], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]];
    let k1 = f(y);
    let k2 = f(add(y, k1, h / 2.0));
    let k3 = f(add(y, k2, h / 2.0));
    let k4 = f(add(y, k3, h));
    let mut out = y;
    for i in 0..3 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

const CHATTER_LIMIT: usize = 20;

fn threshold_level(policy: &Policy) -> Option<f64> {
    match policy {
        Policy::Threshold { gamma, .. } if *gamma > 0.0 => Some(*gamma),
        Policy::Mutant { base, .. } => threshold_level(base),
        _ => None,
    }
}

/// Adaptive Dormand–Prince 5(4) integration up to ODE time `horizon`.
///
/// Threshold crossings of a switching policy are located by bisection and the
/// integrator restarts on the far side. If location underflows (a sliding
/// motion along the threshold) the rest of the run uses fixed-step RK4.
pub fn integrate(
    initial: &OdeState,
    params: &ModelParams,
    policy: &Policy,
    horizon: f64,
    ctl: StepControl,
) -> Result<OdePath, OdeError> {
    rhs(initial, params, policy, 0.0)?;
    let f = |y: [f64; 3]| field(y, params, policy, 0.0);
    let level = threshold_level(policy);
    let side = |y: &[f64; 3]| level.map(|g| y[0] > g);

    let mut y = initial.as_array();
    project(&mut y);
    let mut t = initial.t;
    let t_end = initial.t + horizon;
    let mut h = ctl.h0;
    let mut k1 = f(y);
    let mut rec = Recorder { samples: Vec::new(), every: 1, seen: 0, cap: ctl.max_samples.max(2) };
    rec.push(OdeState::from_array(y, t));
    let mut steady_count = 0;
    let mut crossings = 0;
    let mut accepted = 0;
    let mut fallback_at = None;

    // crossings packed into less than one fallback step mean a sliding motion
    let mut chatter = (f64::NEG_INFINITY, 0usize);
    while t < t_end {
        if steady_count >= ctl.steady_steps {
            break;
        }
        if fallback_at.is_some() {
            let hs = ctl.fallback_h.min(t_end - t);
            let mut yn = rk4_step(&f, y, hs);
            project(&mut yn);
            if side(&y) != side(&yn) {
                crossings += 1;
            }
            y = yn;
            t += hs;
            accepted += 1;
            rec.push(OdeState::from_array(y, t));
            continue;
        }

        let hs = h.min(t_end - t);
        let (mut yn, mut kn, err) = dp_step(&f, y, k1, hs, ctl.tol);
        if !(err <= 1.0) {
            let fac = if err.is_finite() { (0.9 * err.powf(-0.2)).max(0.2) } else { 0.2 };
            h = hs * fac;
            if h < ctl.h_min {
                return Err(OdeError::StepFailure { t, theta: y[0], psi: y[1] });
            }
            continue;
        }
        let mut taken = hs;
        let raw = yn;
        project(&mut yn);
        if yn != raw {
            kn = f(yn);
        }
        if side(&y) != side(&yn) {
            // bisect for the first crossing inside the step
            let (mut lo, mut hi) = (0.0, hs);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let (ym, _, _) = dp_step(&f, y, k1, mid, ctl.tol);
                if side(&ym) == side(&y) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            if t - chatter.0 < ctl.fallback_h {
                chatter.1 += 1;
            } else {
                chatter = (t, 1);
            }
            if hi < ctl.h_min || chatter.1 >= CHATTER_LIMIT {
                fallback_at = Some(OdeState::from_array(y, t));
                continue;
            }
            let (ym, _, _) = dp_step(&f, y, k1, hi, ctl.tol);
            yn = ym;
            project(&mut yn);
            kn = f(yn);
            taken = hi;
            crossings += 1;
        } else {
            let grow = if err > 0.0 { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) } else { 5.0 };
            h = hs * grow;
        }
        if kn.iter().any(|v| !v.is_finite()) {
            return Err(OdeError::StepFailure { t, theta: y[0], psi: y[1] });
        }
        y = yn;
        t += taken;
        k1 = kn;
        accepted += 1;
        if inf_norm(&k1) < ctl.steady_tol {
            steady_count += 1;
        } else {
            steady_count = 0;
        }
        rec.push(OdeState::from_array(y, t));
    }
    let endpoint = OdeState::from_array(y, t);
    if rec.samples.last() != Some(&endpoint) {
        rec.samples.push(endpoint);
    }
    Ok(OdePath {
        endpoint,
        samples: rec.samples,
        fallback_at,
        crossings,
        steady: steady_count >= ctl.steady_steps,
        accepted_steps: accepted,
    })
}

/// Finite-difference Jacobian of `f` at `x` with a fourth-order stencil.
/// Coordinates flagged in `at_lower` use a one-sided forward stencil so that
/// no evaluation crosses below zero.
pub fn fd_jacobian<F: Fn([f64; 3]) -> [f64; 3]>(f: F, x: [f64; 3], rel_step: f64, at_lower: [bool; 3]) -> Mat3 {
    let mut jac = [[0.0; 3]; 3];
    for j in 0..3 {
        let h = rel_step * x[j].abs().max(1e-2);
        let at = |s: f64| {
            let mut z = x;
            z[j] += s * h;
            f(z)
        };
        let col: [f64; 3] = if at_lower[j] {
            let f0 = at(0.0);
            let f1 = at(1.0);
            let f2 = at(2.0);
            let f3 = at(3.0);
            let f4 = at(4.0);
            std::array::from_fn(|i| {
                (-25.0 * f0[i] + 48.0 * f1[i] - 36.0 * f2[i] + 16.0 * f3[i] - 3.0 * f4[i]) / (12.0 * h)
            })
        } else {
            let m2 = at(-2.0);
            let m1 = at(-1.0);
            let p1 = at(1.0);
            let p2 = at(2.0);
            std::array::from_fn(|i| (m2[i] - 8.0 * m1[i] + 8.0 * p1[i] - p2[i]) / (12.0 * h))
        };
        for i in 0..3 {
            jac[i][j] = col[i];
        }
    }
    jac
}

/// Whether a coordinate is close enough to the θ = 0 or ψ = 0 face that a
/// centred stencil would leave the simplex.
pub fn lower_faces(x: [f64; 3], rel_step: f64) -> [bool; 3] {
    let near = |v: f64| v < 2.0 * rel_step * v.abs().max(1e-2) + 1e-15;
    [near(x[0]), near(x[1]), false]
}

fn solve3(a: &Mat3, b: [f64; 3]) -> Option<[f64; 3]> {
    let m = nalgebra::Matrix3::from_fn(|i, j| a[i][j]);
    let v = nalgebra::Vector3::new(b[0], b[1], b[2]);
    m.lu().solve(&v).map(|s| [s[0], s[1], s[2]])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Equilibrium {
    pub state: OdeState,
    pub residual: f64,
}

fn newton(y0: [f64; 3], f: &impl Fn([f64; 3]) -> [f64; 3], tol: f64) -> ([f64; 3], f64) {
    let mut y = y0;
    project(&mut y);
    let mut g = f(y);
    let mut res = inf_norm(&g);
    for _ in 0..100 {
        if res < tol {
            break;
        }
        let jac = fd_jacobian(f, y, 1e-6, lower_faces(y, 1e-6));
        let Some(dx) = solve3(&jac, [-g[0], -g[1], -g[2]]) else { break };
        let mut lam = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let mut yn = [y[0] + lam * dx[0], y[1] + lam * dx[1], y[2] + lam * dx[2]];
            project(&mut yn);
            if yn[2] <= 0.0 {
                lam *= 0.5;
                continue;
            }
            let gn = f(yn);
            let rn = inf_norm(&gn);
            if rn < res {
                y = yn;
                g = gn;
                res = rn;
                improved = true;
                break;
            }
            lam *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (y, res)
}

/// Locates a zero of the vector field near `guess`: damped Newton first,
/// then a long integration followed by Newton polishing.
pub fn find_equilibrium(guess: &OdeState, params: &ModelParams, policy: &Policy) -> Result<Equilibrium, OdeError> {
    const TOL: f64 = 1e-10;
    rhs(guess, params, policy, 0.0)?;
    let f = |y: [f64; 3]| field(y, params, policy, 0.0);

    if let Some(level) = threshold_level(policy) {
        let path = integrate(guess, params, policy, 2_000.0, StepControl::default())?;
        let tail = &path.samples[path.samples.len() * 4 / 5..];
        let tail_cross = tail.windows(2).filter(|w| (w[0].theta > level) != (w[1].theta > level)).count();
        let end = path.endpoint;
        if path.fallback_at.is_some() || tail_cross >= 2 || (!path.steady && (end.theta - level).abs() < 1e-6) {
            let n = tail.len() as f64;
            let center = OdeState {
                theta: tail.iter().map(|s| s.theta).sum::<f64>() / n,
                psi: tail.iter().map(|s| s.psi).sum::<f64>() / n,
                eta: tail.iter().map(|s| s.eta).sum::<f64>() / n,
                t: end.t,
            };
            return Err(OdeError::IndicatorNonstationary { level, center, crossings: path.crossings });
        }
        let (y, res) = newton(end.as_array(), &f, TOL);
        return finish(y, res, TOL);
    }

    let (y, res) = newton(guess.as_array(), &f, TOL);
    if res < TOL {
        return finish(y, res, TOL);
    }
    let path = integrate(guess, params, policy, 1e6, StepControl::default())?;
    let (y2, res2) = newton(path.endpoint.as_array(), &f, TOL);
    if res2 < res {
        finish(y2, res2, TOL)
    } else {
        finish(y, res, TOL)
    }
}

fn finish(y: [f64; 3], res: f64, tol: f64) -> Result<Equilibrium, OdeError> {
    let state = OdeState::from_array(y, 0.0);
    if res < tol {
        Ok(Equilibrium { state, residual: res })
    } else {
        Err(OdeError::NotConverged { best: state, residual: res })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn left() -> ModelParams {
        ModelParams::new(8.549, 1.188, 0.904, 0.322, 0.1, 0.0).unwrap()
    }

    fn right() -> ModelParams {
        ModelParams::new(1.749, 1.0002, 0.404, 0.322, 0.1, 0.0).unwrap()
    }

    #[test]
    fn disease_free_face_is_invariant() {
        let g = rhs(&OdeState::new(0.0, 0.4, 0.5), &left(), &Policy::follow_crowd(2.0), 0.0).unwrap();
        assert_eq!(g[0], 0.0);
        let path = integrate(&OdeState::new(0.0, 0.4, 0.5), &left(), &Policy::follow_crowd(2.0), 50.0, StepControl::default()).unwrap();
        assert!(path.samples.iter().all(|s| s.theta == 0.0));
    }

    #[test]
    fn boundary_point_is_stationary() {
        let p = left();
        let theta = 1.0 - 1.0 / p.rho();
        for beta in [0.1, 1.0, 10.0] {
            let g = rhs(&OdeState::new(theta, 0.0, 1.0), &p, &Policy::follow_crowd(beta), 0.0).unwrap();
            assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12);
        }
    }

    #[test]
    fn coexistence_point_with_full_acceptance() {
        let p = left();
        let x = p.mu() * p.rho();
        let (th, ps) = (1.0 - 1.0 / p.rho() - 1.0 / x, 1.0 / x);
        let g = rhs(&OdeState::new(th, ps, 1.0), &p, &Policy::Static { q: 1.0 }, 0.0).unwrap();
        assert!(g[0].hypot(g[1]) < 1e-6);
        assert!((th - 0.32746).abs() < 1e-4 && (ps - 0.49591).abs() < 1e-4);
    }

    #[test]
    fn integrate_to_boundary_attractor() {
        let p = left();
        let path = integrate(&OdeState::new(0.21, 0.001, 1.0), &p, &Policy::follow_crowd(0.5), 1e6, StepControl::default()).unwrap();
        assert!((path.endpoint.theta - (1.0 - 1.0 / p.rho())).abs() < 1e-4, "{:?}", path.endpoint);
        assert!(path.endpoint.psi.abs() < 1e-4);
        let eta = eta_nullcline(path.endpoint.theta, path.endpoint.psi, &p);
        assert!((path.endpoint.eta - eta).abs() < 1e-6);
    }

    #[test]
    fn integrate_to_disease_free_point() {
        let p = right();
        let beta = 1.5;
        let path = integrate(&OdeState::new(0.3, 0.01, 1.0), &p, &Policy::follow_crowd(beta), 1e6, StepControl::default()).unwrap();
        assert!(path.endpoint.theta.abs() < 1e-4);
        assert!((path.endpoint.psi - (1.0 - p.mu() / beta)).abs() < 1e-4, "{:?}", path.endpoint);
    }

    #[test]
    fn newton_finds_coexistence_point() {
        let p = left();
        let x = p.mu() * p.rho();
        let guess = OdeState::new(0.3, 0.5, 0.05);
        let eq = find_equilibrium(&guess, &p, &Policy::follow_crowd(20.0)).unwrap();
        assert!(eq.residual < 1e-10);
        assert!((eq.state.theta - (1.0 - 1.0 / p.rho() - 1.0 / x)).abs() < 1e-8);
        assert!((eq.state.psi - 1.0 / x).abs() < 1e-8);
    }

    #[test]
    fn origin_is_fixed_when_self_eradicating() {
        let p = ModelParams::new(1.0, 1.0, 1.0, 0.5, 0.2, 0.0).unwrap();
        let eta = eta_nullcline(0.0, 0.0, &p);
        let eq = find_equilibrium(&OdeState::new(0.0, 0.0, eta), &p, &Policy::follow_crowd(0.3)).unwrap();
        assert_eq!((eq.state.theta, eq.state.psi), (0.0, 0.0));
    }

    #[test]
    fn threshold_policy_has_no_fixed_point() {
        let p = left();
        let r = find_equilibrium(&OdeState::new(0.6, 0.05, 0.05), &p, &Policy::threshold(10.0, 0.5));
        match r {
            Err(OdeError::IndicatorNonstationary { center, .. }) => assert!((center.theta - 0.5).abs() < 1e-2, "{center:?}"),
            other => panic!("expected limit set, got {other:?}"),
        }
    }

    #[test]
    fn jacobian_of_linear_map() {
        let a = [[1.0, 2.0, 0.0], [0.5, -1.0, 3.0], [0.0, 0.0, -2.0]];
        let f = |y: [f64; 3]| std::array::from_fn(|i| (0..3).map(|j| a[i][j] * y[j]).sum());
        for faces in [[false; 3], [true, true, false]] {
            let j = fd_jacobian(f, [0.0, 0.3, 0.2], 1e-5, faces);
            for i in 0..3 {
                for k in 0..3 {
                    assert!((j[i][k] - a[i][k]).abs() < 1e-8);
                }
            }
        }
    }
}
