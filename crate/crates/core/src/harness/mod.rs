//! Experiment orchestration: expands a configuration into sweep points, runs
//! the enabled layers for each point in parallel, and cross-checks the
//! closed form, the ODE and the Monte Carlo chain against each other.

pub mod config;
pub mod output;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use config::{Experiment, Initial, Layer, McConfig, OdeConfig, Sweep, Tolerances};
pub use output::{run, RunSummary, SUMMARY_HEADER};

use crate::attractor::{self, certify_stability, Attractor, AttractorError, AttractorKind, Certificate};
use crate::chain::{self, ChainError, LimitEstimate, PopState, Trajectory};
use crate::ess::{classify_ess, mutation_stability, EssError, EssKind, EssVerdict, MutationReport};
use crate::ode::{integrate, OdeError, OdePath, OdeState, StepControl};
use crate::params::{ModelParams, ParamsError};
use crate::policy::Policy;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// A failure inside one layer at one point. Recorded, never fatal.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayerError {
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Attractor(#[from] AttractorError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Ess(#[from] EssError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub index: usize,
    pub sweep_var: Option<String>,
    pub value: Option<f64>,
    pub params: ModelParams,
    pub policy: Policy,
}

fn apply(var: &str, v: f64, params: &ModelParams, policy: &Policy) -> (ModelParams, Policy) {
    match var {
        "beta" => (*params, policy.with_beta(v)),
        "gamma" => match policy {
            Policy::Threshold { beta, form, .. } => (*params, Policy::Threshold { beta: *beta, gamma: v, form: *form }),
            _ => (*params, policy.clone()),
        },
        _ => (params.with(var, v).unwrap_or(*params), policy.clone()),
    }
}

impl Experiment {
    /// Sweep points in output order: by sweep value, then by family.
    pub fn points(&self) -> Vec<Point> {
        let mut out = Vec::new();
        match &self.sweep {
            None => {
                for pol in &self.policies {
                    out.push(Point {
                        index: out.len(),
                        sweep_var: None,
                        value: None,
                        params: self.params,
                        policy: pol.clone(),
                    });
                }
            }
            Some(s) => {
                for &v in &s.values {
                    for pol in &self.policies {
                        let (params, policy) = apply(&s.variable, v, &self.params, pol);
                        out.push(Point { index: out.len(), sweep_var: Some(s.variable.clone()), value: Some(v), params, policy });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OdeOutcome {
    pub endpoint: OdeState,
    /// Time-weighted mean of θ and ψ over the tail window.
    pub tail_theta: f64,
    pub tail_psi: f64,
    /// Threshold crossings inside the tail window.
    pub tail_crossings: usize,
    pub steady: bool,
    pub fallback: bool,
    #[serde(skip)]
    pub path: OdePath,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McReplication {
    pub replication: u32,
    /// ChaCha stream id under the master seed.
    pub stream: u64,
    pub estimate: Result<LimitEstimate, ChainError>,
    pub freeze_epoch: Option<u64>,
    pub tail_crossings: Option<usize>,
    /// Population lower bound and inverse-size increment bound held on the path.
    pub bounds_hold: bool,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EssOutcome {
    pub verdict: EssVerdict,
    /// β used for the mutant check, when one ran.
    pub mutation_beta: Option<f64>,
    pub mutation: Option<Result<MutationReport, EssError>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum XvVerdict {
    Skipped,
    Agree { gap: f64 },
    Disagree { gap: f64 },
    NotComparable(String),
}

impl XvVerdict {
    pub fn label(&self) -> &'static str {
        match self {
            XvVerdict::Skipped => "",
            XvVerdict::Agree { .. } => "agree",
            XvVerdict::Disagree { .. } => "disagree",
            XvVerdict::NotComparable(_) => "not_comparable",
        }
    }

    pub fn gap(&self) -> Option<f64> {
        match self {
            XvVerdict::Agree { gap } | XvVerdict::Disagree { gap } => Some(*gap),
            _ => None,
        }
    }

    fn from_gap(gap: f64, tol: f64) -> Self {
        if gap <= tol {
            XvVerdict::Agree { gap }
        } else {
            XvVerdict::Disagree { gap }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossValidation {
    /// ODE endpoint against the closed form.
    pub ode: XvVerdict,
    /// Every Monte Carlo replication against the closed form (or the ODE
    /// endpoint when no closed form was computed).
    pub mc: XvVerdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub point: Point,
    pub closed_form: Option<Result<Attractor, LayerError>>,
    pub ode: Option<Result<OdeOutcome, LayerError>>,
    pub mc: Option<Result<Vec<McReplication>, LayerError>>,
    pub ess: Option<Result<EssOutcome, LayerError>>,
    pub stability: Option<Result<Certificate, LayerError>>,
    pub cross: CrossValidation,
    pub wall_seconds: f64,
}

impl RunRecord {
    /// The closed-form point used as a reference, including tabulated points
    /// outside the proven region.
    pub fn reference(&self) -> Option<&Attractor> {
        match self.closed_form.as_ref()? {
            Ok(a) => Some(a),
            Err(LayerError::Attractor(AttractorError::OutsideProvenRegion { attractor })) => Some(attractor),
            Err(_) => None,
        }
    }
}

fn closed_form_of(params: &ModelParams, policy: &Policy) -> Result<Attractor, LayerError> {
    Ok(attractor::closed_form(params, policy)?)
}

fn run_ode(p: &Point, init: &Initial, cfg: &OdeConfig, level: Option<f64>) -> Result<OdeOutcome, LayerError> {
    p.params.validate()?;
    let start = OdeState::new(init.theta0, init.psi0, 1.0);
    let ctl = StepControl::default();
    let head_t = cfg.horizon * (1.0 - cfg.tail_fraction);
    let head = integrate(&start, &p.params, &p.policy, head_t, ctl)?;
    let mut from = head.endpoint;
    from.t = 0.0;
    let tail = integrate(&from, &p.params, &p.policy, cfg.horizon - head_t, ctl)?;
    let (tail_theta, tail_psi) = time_average(&tail.samples);
    let tail_crossings = if level.is_some() { tail.crossings } else { 0 };
    let mut endpoint = tail.endpoint;
    endpoint.t += head.endpoint.t;
    let mut samples = head.samples;
    samples.extend(tail.samples.iter().skip(1).map(|s| OdeState { t: s.t + head.endpoint.t, ..*s }));
    let path = OdePath {
        endpoint,
        samples,
        fallback_at: head.fallback_at.or(tail.fallback_at),
        crossings: head.crossings + tail.crossings,
        steady: tail.steady || head.steady,
        accepted_steps: head.accepted_steps + tail.accepted_steps,
    };
    Ok(OdeOutcome {
        endpoint,
        tail_theta,
        tail_psi,
        tail_crossings,
        steady: path.steady,
        fallback: path.fallback_at.is_some(),
        path,
    })
}

/// Trapezoidal time average of θ and ψ; the last sample when time does not advance.
fn time_average(s: &[OdeState]) -> (f64, f64) {
    let span = s.last().map(|l| l.t - s[0].t).unwrap_or(0.0);
    if !(span > 0.0) {
        let l = s.last().copied().unwrap_or(OdeState::new(f64::NAN, f64::NAN, f64::NAN));
        return (l.theta, l.psi);
    }
    let (mut a, mut b) = (0.0, 0.0);
    for w in s.windows(2) {
        let dt = w[1].t - w[0].t;
        a += 0.5 * dt * (w[0].theta + w[1].theta);
        b += 0.5 * dt * (w[0].psi + w[1].psi);
    }
    (a / span, b / span)
}

/// Stream id of one replication: unique per (point, replication) so results
/// do not depend on scheduling.
pub fn mc_stream(point: usize, replication: u32) -> u64 {
    ((point as u64) << 20) | replication as u64
}

fn run_mc(p: &Point, init: &Initial, mc: &McConfig, level: Option<f64>) -> Result<Vec<McReplication>, LayerError> {
    p.params.validate()?;
    let start = PopState::from_fractions(mc.n0, init.theta0, init.psi0)?;
    let delta = mc.delta.unwrap_or_else(|| chain::default_delta(mc.n0));
    let reps = (0..mc.replications)
        .into_par_iter()
        .map(|rep| {
            let stream = mc_stream(p.index, rep);
            let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
            rng.set_stream(stream);
            let traj = chain::simulate(&start, &p.params, &p.policy, mc.steps(), delta, mc.stride(), &mut rng);
            let estimate = chain::estimate_limit(&traj, mc.tail_fraction);
            let tail_crossings = level.and_then(|g| chain::tail_crossings(&traj, mc.tail_fraction, g).ok());
            McReplication {
                replication: rep,
                stream,
                estimate,
                freeze_epoch: traj.freeze_epoch,
                tail_crossings,
                bounds_hold: traj.diagnostics.bounds_hold(),
                trajectory: traj,
            }
        })
        .collect();
    Ok(reps)
}

fn run_ess(p: &Point, exp: &Experiment) -> Result<EssOutcome, LayerError> {
    let costs = exp.costs.as_ref().expect("validated: ess layer has costs");
    let verdict = classify_ess(&p.policy, &p.params, costs)?;
    let beta = p.policy.beta();
    let mutation_beta = match (&exp.mutation, verdict.kind, beta) {
        // the stable policy is the never-vaccinating member of the family
        (Some(_), EssKind::NonVaccinatingESS, Some(_)) => Some(0.0),
        (Some(_), EssKind::VaccinatingESS, Some(b)) => match verdict.beta_star_threshold {
            // the incumbent must sit strictly inside the clamped region
            Some(t) if b > t * (1.0 + 1e-6) => Some(b),
            Some(t) => Some(1.5 * t),
            None => None,
        },
        _ => None,
    };
    let mutation = match (mutation_beta, &exp.mutation) {
        (Some(b), Some(grid)) => Some(mutation_stability(&p.policy, b, &p.params, costs, grid)),
        _ => None,
    };
    Ok(EssOutcome { verdict, mutation_beta, mutation })
}

fn run_stability(p: &Point) -> Result<Certificate, LayerError> {
    let attr = closed_form_of(&p.params, &p.policy).or_else(|e| match e {
        LayerError::Attractor(AttractorError::OutsideProvenRegion { attractor }) => Ok(attractor),
        e => Err(e),
    })?;
    Ok(certify_stability(&attr, &p.params, &p.policy)?)
}

fn threshold_of(policy: &Policy) -> Option<f64> {
    match policy {
        Policy::Threshold { gamma, .. } if *gamma > 0.0 => Some(*gamma),
        Policy::Mutant { base, .. } => threshold_of(base),
        _ => None,
    }
}

/// Runs every enabled layer at one point.
pub fn run_point(p: &Point, exp: &Experiment) -> RunRecord {
    let t0 = Instant::now();
    let level = threshold_of(&p.policy);
    let closed_form = exp.has(Layer::ClosedForm).then(|| closed_form_of(&p.params, &p.policy));
    let ode = exp.has(Layer::Ode).then(|| run_ode(p, &exp.initial, &exp.ode, level));
    let mc = exp.has(Layer::MonteCarlo).then(|| run_mc(p, &exp.initial, &exp.mc, level));
    let ess = exp.has(Layer::Ess).then(|| run_ess(p, exp));
    let stability = exp.has(Layer::Stability).then(|| run_stability(p));
    let mut rec = RunRecord {
        point: p.clone(),
        closed_form,
        ode,
        mc,
        ess,
        stability,
        cross: CrossValidation { ode: XvVerdict::Skipped, mc: XvVerdict::Skipped },
        wall_seconds: 0.0,
    };
    rec.cross = cross_validate(&rec, &exp.tolerances);
    rec.wall_seconds = t0.elapsed().as_secs_f64();
    rec
}

/// Runs all points without writing anything. Points run concurrently; the
/// result is in point order.
pub fn execute(exp: &Experiment) -> Result<Vec<RunRecord>, HarnessError> {
    let points = exp.points();
    in_pool(exp.threads, || points.par_iter().map(|p| run_point(p, exp)).collect())
}

/// Runs `work` on a pool of `threads` workers, or on the global pool.
pub fn in_pool<T: Send>(threads: Option<usize>, work: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| HarnessError::ThreadPool(e.to_string()))?;
            Ok(pool.install(work))
        }
        None => Ok(work()),
    }
}

fn point_gap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

/// Pairwise agreement of the layers present in a record.
pub fn cross_validate(rec: &RunRecord, tol: &Tolerances) -> CrossValidation {
    let reference = rec.reference();
    let band = reference.filter(|a| a.kind == AttractorKind::LimitSet).map(|a| a.theta);

    let ode = match (&rec.ode, reference) {
        (None, _) => XvVerdict::Skipped,
        (Some(Err(e)), _) => XvVerdict::NotComparable(format!("ode failed: {e}")),
        (Some(Ok(_)), None) => XvVerdict::NotComparable("no closed-form point".into()),
        (Some(Ok(o)), Some(a)) => match band {
            Some(level) => {
                let gap = (o.tail_theta - level).abs();
                if o.tail_crossings < tol.min_crossings {
                    XvVerdict::Disagree { gap }
                } else {
                    XvVerdict::from_gap(gap, tol.tol_band)
                }
            }
            None => XvVerdict::from_gap(point_gap((o.endpoint.theta, o.endpoint.psi), (a.theta, a.psi)), tol.tol_ode),
        },
    };

    let mc_target = match (reference, &rec.ode) {
        (Some(a), _) => Some((a.theta, a.psi)),
        (None, Some(Ok(o))) if rec.closed_form.is_none() => Some((o.endpoint.theta, o.endpoint.psi)),
        _ => None,
    };
    let mc = match (&rec.mc, mc_target) {
        (None, _) => XvVerdict::Skipped,
        (Some(Err(e)), _) => XvVerdict::NotComparable(format!("monte carlo failed: {e}")),
        (Some(Ok(_)), None) => XvVerdict::NotComparable("no reference point".into()),
        (Some(Ok(reps)), Some(target)) => {
            if let Some(r) = reps.iter().find(|r| r.freeze_epoch.is_some()) {
                XvVerdict::NotComparable(format!("replication {} froze at epoch {}", r.replication, r.freeze_epoch.unwrap()))
            } else {
                let mut worst: f64 = 0.0;
                let mut few_crossings = false;
                for r in reps {
                    let Ok(est) = &r.estimate else { continue };
                    match band {
                        Some(level) => {
                            worst = worst.max((est.theta - level).abs());
                            few_crossings |= r.tail_crossings.unwrap_or(0) < tol.min_crossings;
                        }
                        None => worst = worst.max(point_gap((est.theta, est.psi), target)),
                    }
                }
                let limit = if band.is_some() { tol.tol_band } else { tol.tol_mc };
                if few_crossings {
                    XvVerdict::Disagree { gap: worst }
                } else {
                    XvVerdict::from_gap(worst, limit)
                }
            }
        }
    };
    CrossValidation { ode, mc }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp(extra: &str, layers: &str) -> Experiment {
        let text = format!(
            r#"
[experiment]
id = "unit"
layers = {layers}

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

[mc]
n0 = 2000
max_steps = 200000
replications = 2
seed = 7
{extra}
"#
        );
        Experiment::from_toml_str(&text).unwrap()
    }

    #[test]
    fn points_follow_sweep_order() {
        let e = exp("[sweep]\nvariable = \"b\"\nvalues = [0.4, 0.3]\nfamilies = [\"FC\", \"FR\"]\n", "[\"closed_form\"]");
        let pts = e.points();
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[0].params.b, 0.3);
        assert_eq!(pts[1].policy.family(), "FR");
        assert_eq!(pts[3].index, 3);
    }

    #[test]
    fn closed_form_and_ode_agree() {
        let e = exp("", "[\"closed_form\", \"ode\"]");
        let recs = execute(&e).unwrap();
        assert!(matches!(recs[0].cross.ode, XvVerdict::Agree { .. }), "{:?}", recs[0].cross);
        assert_eq!(recs[0].cross.mc, XvVerdict::Skipped);
    }

    #[test]
    fn layer_errors_do_not_abort() {
        // d sweeps past b: the second point has invalid parameters
        let e = exp("[sweep]\nvariable = \"d\"\nvalues = [0.1, 0.5]\n", "[\"closed_form\", \"ode\"]");
        let recs = execute(&e).unwrap();
        assert!(recs[0].closed_form.as_ref().unwrap().is_ok());
        assert!(matches!(recs[1].closed_form, Some(Err(LayerError::Attractor(AttractorError::Params(_))))));
        assert!(matches!(recs[1].ode, Some(Err(_))));
        assert!(matches!(recs[1].cross.ode, XvVerdict::NotComparable(_)));
    }

    #[test]
    fn frozen_run_is_not_comparable() {
        // births barely exceed deaths, so a tiny population dies out
        let mut e = exp("", "[\"closed_form\", \"monte_carlo\"]");
        e.params = ModelParams::new(8.549, 1.188, 0.904, 0.322, 0.32, 0.0).unwrap();
        e.mc.n0 = 10;
        e.mc.max_steps = Some(200_000);
        let recs = execute(&e).unwrap();
        let reps = recs[0].mc.as_ref().unwrap().as_ref().unwrap();
        assert!(reps.iter().any(|r| r.freeze_epoch.is_some()));
        assert!(matches!(recs[0].cross.mc, XvVerdict::NotComparable(_)));
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let mut e = exp("[sweep]\nvariable = \"beta\"\nvalues = [0.5, 3.0]\n", "[\"monte_carlo\"]");
        e.threads = Some(1);
        let a = execute(&e).unwrap();
        e.threads = Some(4);
        let b = execute(&e).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let (rx, ry) = (x.mc.as_ref().unwrap().as_ref().unwrap(), y.mc.as_ref().unwrap().as_ref().unwrap());
            for (u, v) in rx.iter().zip(ry) {
                assert_eq!(u.trajectory, v.trajectory);
            }
        }
    }
}
