//! Exact simulation of the embedded jump chain. One event per epoch, drawn
//! from the eight competing exponential clocks of the population process.

use std::io::Write;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::params::ModelParams;
use crate::policy::{Policy, PolicyError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChainError {
    #[error("total event rate vanished")]
    DegenerateState,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("trajectory froze at epoch {freeze_epoch}, inside the tail window starting at {tail_start}")]
    FrozenTrajectory { freeze_epoch: u64, tail_start: u64 },
    #[error("trajectory has no samples")]
    EmptyTrajectory,
    #[error("invalid initial state: {0}")]
    InvalidInitial(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Event {
    Infection,
    Recovery,
    DeathInfected,
    Vaccination,
    NullDecision,
    Birth,
    DeathVaccinated,
    DeathSusceptible,
}

impl Event {
    pub const ALL: [Event; 8] = [
        Event::Infection,
        Event::Recovery,
        Event::DeathInfected,
        Event::Vaccination,
        Event::NullDecision,
        Event::Birth,
        Event::DeathVaccinated,
        Event::DeathSusceptible,
    ];

    /// Change in (N, S, I, V).
    fn delta(self) -> [i64; 4] {
        match self {
            Event::Infection => [0, -1, 1, 0],
            Event::Recovery => [0, 1, -1, 0],
            Event::DeathInfected => [-1, 0, -1, 0],
            Event::Vaccination => [0, -1, 0, 1],
            Event::NullDecision => [0, 0, 0, 0],
            Event::Birth => [1, 1, 0, 0],
            Event::DeathVaccinated => [-1, 0, 0, -1],
            Event::DeathSusceptible => [-1, -1, 0, 0],
        }
    }
}

/// Population counts at an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PopState {
    pub n_total: u64,
    pub n_susc: u64,
    pub n_inf: u64,
    pub n_vacc: u64,
    pub step: u64,
    pub frozen: bool,
}

impl PopState {
    pub fn new(n_susc: u64, n_inf: u64, n_vacc: u64) -> Self {
        Self {
            n_total: n_susc + n_inf + n_vacc,
            n_susc,
            n_inf,
            n_vacc,
            step: 0,
            frozen: false,
        }
    }

    /// Rounds the requested fractions of `n0` to counts.
    pub fn from_fractions(n0: u64, theta: f64, psi: f64) -> Result<Self, ChainError> {
        if !(theta >= 0.0 && psi >= 0.0 && theta + psi <= 1.0) {
            return Err(ChainError::InvalidInitial(format!("theta = {theta}, psi = {psi}")));
        }
        if n0 == 0 {
            return Err(ChainError::InvalidInitial("empty population".into()));
        }
        let i = (theta * n0 as f64).round() as u64;
        let v = ((psi * n0 as f64).round() as u64).min(n0 - i.min(n0));
        let i = i.min(n0);
        Ok(Self::new(n0 - i - v, i, v))
    }

    pub fn is_consistent(&self) -> bool {
        self.n_susc + self.n_inf + self.n_vacc == self.n_total
    }

    /// `N_k / max(k, 1)`.
    pub fn eta(&self) -> f64 {
        self.n_total as f64 / self.step.max(1) as f64
    }

    pub fn fractions(&self) -> FractionState {
        if self.n_total == 0 {
            return FractionState { theta: 0.0, psi: 0.0, eta: 0.0 };
        }
        let n = self.n_total as f64;
        FractionState {
            theta: self.n_inf as f64 / n,
            psi: self.n_vacc as f64 / n,
            eta: self.eta(),
        }
    }

    fn apply(&self, ev: Event) -> PopState {
        let d = ev.delta();
        let add = |x: u64, dx: i64| (x as i64 + dx) as u64;
        PopState {
            n_total: add(self.n_total, d[0]),
            n_susc: add(self.n_susc, d[1]),
            n_inf: add(self.n_inf, d[2]),
            n_vacc: add(self.n_vacc, d[3]),
            step: self.step + 1,
            frozen: false,
        }
    }
}

/// Fractions of the population. `phi` is always derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FractionState {
    pub theta: f64,
    pub psi: f64,
    pub eta: f64,
}

impl FractionState {
    pub fn phi(&self) -> f64 {
        1.0 - self.theta - self.psi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventDistribution {
    /// Indexed as [`Event::ALL`].
    pub probs: [f64; 8],
    pub varrho: f64,
}

impl EventDistribution {
    pub fn prob(&self, ev: Event) -> f64 {
        self.probs[ev as usize]
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Event {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Event::ALL[i];
            }
        }
        // rounding left u above the cumulative sum: take the last event with mass
        let last = self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(4);
        Event::ALL[last]
    }
}

/// Total event rate per capita `b + d + d_e θ + λθφ + νφ + rθ`.
pub fn varrho(theta: f64, psi: f64, params: &ModelParams) -> f64 {
    let phi = 1.0 - theta - psi;
    params.b + params.d + params.d_e * theta + params.lambda * theta * phi + params.nu * phi + params.r * theta
}

/// Probabilities of the next event given the current fractions.
pub fn event_distribution(
    state: &FractionState,
    params: &ModelParams,
    policy: &Policy,
) -> Result<EventDistribution, ChainError> {
    let q = policy.accept_prob(state.theta, state.psi)?;
    distribution_with_q(state.theta, state.psi, q, params)
}

fn distribution_with_q(theta: f64, psi: f64, q: f64, p: &ModelParams) -> Result<EventDistribution, ChainError> {
    let phi = (1.0 - theta - psi).max(0.0);
    let rate = varrho(theta, psi, p);
    if !(rate > 0.0) {
        return Err(ChainError::DegenerateState);
    }
    let raw = [
        p.lambda * theta * phi,
        p.r * theta,
        theta * (p.d + p.d_e),
        p.nu * q * phi,
        p.nu * phi * (1.0 - q),
        p.b,
        psi * p.d,
        phi * p.d,
    ];
    let mut probs = [0.0; 8];
    for (o, r) in probs.iter_mut().zip(raw) {
        *o = r / rate;
    }
    Ok(EventDistribution { probs, varrho: rate })
}

fn distribution_for(state: &PopState, params: &ModelParams, policy: &Policy) -> Result<EventDistribution, ChainError> {
    let f = state.fractions();
    let q = policy.accept_prob_unchecked(f.theta, f.psi);
    distribution_with_q(f.theta, f.psi, q, params)
}

/// Applies exactly one event. Frozen or empty states are returned unchanged.
pub fn step<R: Rng + ?Sized>(state: &PopState, params: &ModelParams, policy: &Policy, rng: &mut R) -> PopState {
    if state.frozen || state.n_total == 0 {
        return *state;
    }
    match distribution_for(state, params, policy) {
        Ok(dist) => state.apply(dist.sample(rng)),
        Err(_) => *state,
    }
}

/// Exact conditional mean of the scaled increments
/// `((θ_{k+1} − θ_k), (ψ_{k+1} − ψ_k), (η_{k+1} − η_k)) / ε_k` given the counts.
pub fn expected_increment(state: &PopState, params: &ModelParams, policy: &Policy) -> Result<[f64; 3], ChainError> {
    let dist = distribution_for(state, params, policy)?;
    let now = state.fractions();
    let scale = (state.step + 1) as f64;
    let mut out = [0.0; 3];
    for ev in Event::ALL {
        let p = dist.prob(ev);
        if p == 0.0 {
            continue;
        }
        let next = state.apply(ev).fractions();
        out[0] += p * (next.theta - now.theta) * scale;
        out[1] += p * (next.psi - now.psi) * scale;
        out[2] += p * (next.eta - now.eta) * scale;
    }
    Ok(out)
}

/// Freeze threshold `2 / (N(0) − 1)`.
pub fn default_delta(n0: u64) -> f64 {
    2.0 / (n0 as f64 - 1.0)
}

/// Lower bound `(N(0) − 3) / (N(0) − 1)²` on the population per epoch.
pub fn delta_bar(n0: u64) -> f64 {
    let n = n0 as f64;
    (n - 3.0) / ((n - 1.0) * (n - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sample {
    pub k: u64,
    pub theta: f64,
    pub psi: f64,
    pub eta: f64,
}

/// Per-path checks on the fraction recursions and the population bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Diagnostics {
    pub delta_bar: f64,
    pub min_eta: f64,
    /// `max_k |1/η_{k+1} − 1/η_k| / ε_k`.
    pub max_scaled_inv_eta_jump: f64,
    /// Largest gap between the count-derived fractions and the one-step recursion.
    pub max_recursion_error: f64,
}

impl Diagnostics {
    /// Bound on `|1/η_{k+1} − 1/η_k| / ε_k`.
    pub fn jump_bound(&self) -> f64 {
        (self.delta_bar + 1.0) / (self.delta_bar * self.delta_bar)
    }

    pub fn bounds_hold(&self) -> bool {
        self.min_eta >= self.delta_bar && self.max_scaled_inv_eta_jump <= self.jump_bound()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub final_state: PopState,
    pub freeze_epoch: Option<u64>,
    pub diagnostics: Diagnostics,
}

impl Trajectory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k,theta,psi,eta")?;
        for s in &self.samples {
            writeln!(w, "{},{},{},{}", s.k, s.theta, s.psi, s.eta)?;
        }
        Ok(())
    }
}

fn sample_of(state: &PopState) -> Sample {
    let f = state.fractions();
    Sample { k: state.step, theta: f.theta, psi: f.psi, eta: f.eta }
}

/// Runs the chain for up to `max_steps` epochs, freezing once `η_k ≤ delta`.
pub fn simulate<R: Rng + ?Sized>(
    initial: &PopState,
    params: &ModelParams,
    policy: &Policy,
    max_steps: u64,
    delta: f64,
    stride: u64,
    rng: &mut R,
) -> Trajectory {
    assert!(initial.is_consistent(), "inconsistent initial counts");
    let stride = stride.max(1);
    let n0 = initial.n_total.max(4);
    let mut diag = Diagnostics {
        delta_bar: delta_bar(n0),
        min_eta: initial.eta(),
        max_scaled_inv_eta_jump: 0.0,
        max_recursion_error: 0.0,
    };
    let mut state = *initial;
    let mut samples = vec![sample_of(&state)];
    let mut freeze_epoch = None;
    let end = initial.step + max_steps;

    while state.step < end {
        if state.frozen {
            // held constant; jump straight to the end
            state.step = end;
            break;
        }
        let prev = state;
        state = step(&prev, params, policy, rng);
        if state.step == prev.step {
            state.frozen = true;
            freeze_epoch = Some(prev.step);
            continue;
        }
        record(&mut diag, &prev, &state);
        if state.step % stride == 0 {
            samples.push(sample_of(&state));
        }
        if state.n_total == 0 || state.eta() <= delta {
            state.frozen = true;
            freeze_epoch = Some(state.step);
        }
    }
    if samples.last().map(|s| s.k) != Some(state.step) {
        samples.push(sample_of(&state));
    }
    Trajectory { samples, final_state: state, freeze_epoch, diagnostics: diag }
}

fn record(diag: &mut Diagnostics, prev: &PopState, next: &PopState) {
    let a = prev.fractions();
    let b = next.fractions();
    diag.min_eta = diag.min_eta.min(b.eta);
    if a.eta > 0.0 && b.eta > 0.0 {
        let eps = 1.0 / (prev.step + 1) as f64;
        let jump = (1.0 / b.eta - 1.0 / a.eta).abs() / eps;
        diag.max_scaled_inv_eta_jump = diag.max_scaled_inv_eta_jump.max(jump);
    }
    if next.n_total == 0 || prev.n_total == 0 {
        return;
    }
    // θ_{k+1} = θ_k + ε_k (1/η_{k+1}) [ΔI − ΔN θ_k], and likewise for ψ
    let eps = 1.0 / (prev.step + 1) as f64;
    let dn = next.n_total as f64 - prev.n_total as f64;
    let di = next.n_inf as f64 - prev.n_inf as f64;
    let dv = next.n_vacc as f64 - prev.n_vacc as f64;
    let eta_next = next.n_total as f64 / (prev.step + 1) as f64;
    let theta_rec = a.theta + eps / eta_next * (di - dn * a.theta);
    let psi_rec = a.psi + eps / eta_next * (dv - dn * a.psi);
    let mut err = (theta_rec - b.theta).abs().max((psi_rec - b.psi).abs());
    if prev.step >= 1 {
        let eta_rec = a.eta + eps * (dn - a.eta);
        err = err.max((eta_rec - b.eta).abs() / b.eta.max(1.0));
    }
    diag.max_recursion_error = diag.max_recursion_error.max(err);
}

/// Tail statistics of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LimitEstimate {
    pub theta: f64,
    pub psi: f64,
    pub eta: f64,
    pub sd_theta: f64,
    pub sd_psi: f64,
    pub sd_eta: f64,
    pub n_samples: usize,
}

fn tail(traj: &Trajectory, tail_fraction: f64) -> Result<&[Sample], ChainError> {
    let n = traj.samples.len();
    if n == 0 {
        return Err(ChainError::EmptyTrajectory);
    }
    let take = ((n as f64 * tail_fraction).ceil() as usize).clamp(1, n);
    let window = &traj.samples[n - take..];
    // a frozen path holds its state, so any freeze leaves the tail uninformative
    if let Some(f) = traj.freeze_epoch {
        return Err(ChainError::FrozenTrajectory { freeze_epoch: f, tail_start: window[0].k });
    }
    Ok(window)
}

fn mean_sd(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Component-wise mean and standard deviation over the last `tail_fraction`
/// of the recorded samples.
pub fn estimate_limit(traj: &Trajectory, tail_fraction: f64) -> Result<LimitEstimate, ChainError> {
    let w = tail(traj, tail_fraction)?;
    let (theta, sd_theta) = mean_sd(w.iter().map(|s| s.theta));
    let (psi, sd_psi) = mean_sd(w.iter().map(|s| s.psi));
    let (eta, sd_eta) = mean_sd(w.iter().map(|s| s.eta));
    Ok(LimitEstimate { theta, psi, eta, sd_theta, sd_psi, sd_eta, n_samples: w.len() })
}

/// Number of times the tail samples cross `θ = level`.
pub fn tail_crossings(traj: &Trajectory, tail_fraction: f64, level: f64) -> Result<usize, ChainError> {
    let w = tail(traj, tail_fraction)?;
    Ok(w.windows(2).filter(|p| (p[0].theta > level) != (p[1].theta > level)).count())
}
