//! Experiment configuration: a TOML file with section blocks.
//!
//! ```toml
//! [experiment]
//! id = "fc_left"
//! layers = ["closed_form", "ode", "monte_carlo"]
//!
//! [params]
//! lambda = 8.549
//! r = 1.188
//! nu = 0.904
//! b = 0.322
//! d = 0.1
//! d_e = 0.0
//!
//! [policy]
//! family = "FC"
//! beta = 0.5
//! ```
//!
//! Optional sections: `[costs]`, `[sweep]`, `[mc]`, `[ode]`, `[initial]`,
//! `[mutation]`, `[tolerances]`, `[output]`.

use std::path::PathBuf;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::ess::{CostParams, MutationGrid};
use crate::params::ModelParams;
use crate::policy::{Policy, ThresholdForm};

pub const SWEEP_VARIABLES: [&str; 8] = ["beta", "lambda", "nu", "r", "b", "d", "d_e", "gamma"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    ClosedForm,
    Ode,
    MonteCarlo,
    Ess,
    Stability,
}

impl Layer {
    pub fn label(&self) -> &'static str {
        match self {
            Layer::ClosedForm => "closed_form",
            Layer::Ode => "ode",
            Layer::MonteCarlo => "monte_carlo",
            Layer::Ess => "ess",
            Layer::Stability => "stability",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "McConfig::default_n0")]
    pub n0: u64,
    /// Defaults to `50 · n0`.
    pub max_steps: Option<u64>,
    #[serde(default = "McConfig::default_replications")]
    pub replications: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "McConfig::default_tail")]
    pub tail_fraction: f64,
    /// Recorded samples per trajectory (approximate).
    #[serde(default = "McConfig::default_samples")]
    pub samples: u64,
    /// Freeze threshold; defaults to `2 / (n0 − 1)`.
    pub delta: Option<f64>,
}

impl McConfig {
    fn default_n0() -> u64 {
        40_000
    }
    fn default_replications() -> u32 {
        3
    }
    fn default_tail() -> f64 {
        0.2
    }
    fn default_samples() -> u64 {
        20_000
    }

    pub fn steps(&self) -> u64 {
        self.max_steps.unwrap_or(50 * self.n0)
    }

    pub fn stride(&self) -> u64 {
        (self.steps() / self.samples.max(1)).max(1)
    }
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n0: Self::default_n0(),
            max_steps: None,
            replications: Self::default_replications(),
            seed: 0,
            tail_fraction: Self::default_tail(),
            samples: Self::default_samples(),
            delta: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeConfig {
    #[serde(default = "OdeConfig::default_horizon")]
    pub horizon: f64,
    #[serde(default = "OdeConfig::default_tail")]
    pub tail_fraction: f64,
}

impl OdeConfig {
    fn default_horizon() -> f64 {
        5_000.0
    }
    fn default_tail() -> f64 {
        0.2
    }
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self { horizon: Self::default_horizon(), tail_fraction: Self::default_tail() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Initial {
    #[serde(default = "Initial::default_theta")]
    pub theta0: f64,
    #[serde(default = "Initial::default_psi")]
    pub psi0: f64,
}

impl Initial {
    fn default_theta() -> f64 {
        0.1
    }
    fn default_psi() -> f64 {
        0.01
    }
}

impl Default for Initial {
    fn default() -> Self {
        Self { theta0: Self::default_theta(), psi0: Self::default_psi() }
    }
}

/// Agreement tolerances between layers.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub tol_ode: f64,
    pub tol_mc: f64,
    /// Allowed distance of a time-averaged θ from the threshold level.
    pub tol_band: f64,
    pub min_crossings: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { tol_ode: 1e-4, tol_mc: 0.02, tol_band: 0.05, min_crossings: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub variable: String,
    /// Ascending.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub id: String,
    pub params: ModelParams,
    pub costs: Option<CostParams>,
    /// One entry per family run at every sweep point.
    pub policies: Vec<Policy>,
    pub sweep: Option<Sweep>,
    pub layers: Vec<Layer>,
    pub mc: McConfig,
    pub ode: OdeConfig,
    pub initial: Initial,
    pub mutation: Option<MutationGrid>,
    pub tolerances: Tolerances,
    pub output_dir: PathBuf,
    pub write_trajectories: bool,
    pub threads: Option<usize>,
    /// SHA-256 of the configuration text.
    pub config_sha256: String,
}

impl Experiment {
    pub fn has(&self, layer: Layer) -> bool {
        self.layers.contains(&layer)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        raw.build(sha256_hex(text.as_bytes()))
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: RawExperiment,
    params: ModelParams,
    policy: RawPolicy,
    costs: Option<CostParams>,
    sweep: Option<RawSweep>,
    #[serde(default)]
    mc: McConfig,
    #[serde(default)]
    ode: OdeConfig,
    #[serde(default)]
    initial: Initial,
    mutation: Option<RawMutation>,
    #[serde(default)]
    tolerances: Tolerances,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    id: String,
    #[serde(default = "default_layers")]
    layers: Vec<Layer>,
    threads: Option<usize>,
}

fn default_layers() -> Vec<Layer> {
    vec![Layer::ClosedForm, Layer::Ode]
}

#[derive(Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    family: String,
    beta: Option<f64>,
    gamma: Option<f64>,
    q: Option<f64>,
    p: Option<f64>,
    eps: Option<f64>,
    form: Option<ThresholdForm>,
    /// Family of the incumbent for `MUTANT`.
    base: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    variable: String,
    values: Option<Vec<f64>>,
    start: Option<f64>,
    stop: Option<f64>,
    steps: Option<usize>,
    /// Run every point once per listed family.
    families: Option<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMutation {
    p_grid: Option<Vec<f64>>,
    eps_grid: Option<Vec<f64>>,
    eps_bar: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    #[serde(default = "default_dir")]
    dir: PathBuf,
    #[serde(default = "default_true")]
    trajectories: bool,
}

impl Default for RawOutput {
    fn default() -> Self {
        Self { dir: default_dir(), trajectories: true }
    }
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_true() -> bool {
    true
}

fn need(v: Option<f64>, key: &str, family: &str) -> Result<f64, HarnessError> {
    v.ok_or_else(|| HarnessError::Config(format!("policy family {family} needs key `{key}`")))
}

impl RawPolicy {
    fn build(&self, family: &str) -> Result<Policy, HarnessError> {
        let policy = match family {
            "FC" => Policy::FollowCrowd { beta: need(self.beta, "beta", family)? },
            "FR" => Policy::FreeRide { beta: need(self.beta, "beta", family)? },
            "VFC1" => Policy::Vigilant { beta: need(self.beta, "beta", family)? },
            "VFC2" => Policy::Threshold {
                beta: need(self.beta, "beta", family)?,
                gamma: need(self.gamma, "gamma", family)?,
                form: self.form.unwrap_or_default(),
            },
            "STATIC" => Policy::Static { q: need(self.q, "q", family)? },
            "MUTANT" => {
                let base = self
                    .base
                    .as_deref()
                    .ok_or_else(|| HarnessError::Config("policy family MUTANT needs key `base`".into()))?;
                if base == "MUTANT" {
                    return Err(HarnessError::Config("a mutant base cannot itself be MUTANT".into()));
                }
                Policy::mutant(self.build(base)?, need(self.p, "p", family)?, need(self.eps, "eps", family)?)
            }
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown policy family {other:?} (expected FC, FR, VFC1, VFC2, STATIC or MUTANT)"
                )))
            }
        };
        policy.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(policy)
    }
}

impl RawConfig {
    fn build(self, config_sha256: String) -> Result<Experiment, HarnessError> {
        let cfg = |m: String| HarnessError::Config(m);
        if self.experiment.id.is_empty() || self.experiment.id.contains(['/', '\\']) {
            return Err(cfg(format!("experiment id {:?} must be a plain non-empty name", self.experiment.id)));
        }
        self.params.validate().map_err(|e| cfg(e.to_string()))?;

        let families = match self.sweep.as_ref().and_then(|s| s.families.clone()) {
            Some(f) if f.is_empty() => return Err(cfg("sweep.families is empty".into())),
            Some(f) => f,
            None => vec![self.policy.family.clone()],
        };
        let policies = families.iter().map(|f| self.policy.build(f)).collect::<Result<Vec<_>, _>>()?;

        let sweep = match self.sweep {
            None => None,
            Some(s) => {
                if !SWEEP_VARIABLES.contains(&s.variable.as_str()) {
                    return Err(cfg(format!(
                        "sweep variable {:?} is not one of {SWEEP_VARIABLES:?}",
                        s.variable
                    )));
                }
                let mut values = match (s.values, s.start, s.stop, s.steps) {
                    (Some(v), None, None, None) => v,
                    (None, Some(a), Some(b), Some(n)) if n >= 2 => {
                        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
                    }
                    (None, Some(a), Some(_), Some(1)) => vec![a],
                    _ => return Err(cfg("sweep needs either `values` or all of `start`, `stop`, `steps` >= 1".into())),
                };
                if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
                    return Err(cfg("sweep values must be finite and non-empty".into()));
                }
                values.sort_by(f64::total_cmp);
                if s.variable == "gamma" && !policies.iter().all(|p| matches!(p, Policy::Threshold { .. })) {
                    return Err(cfg("a gamma sweep needs the VFC2 family".into()));
                }
                if s.variable == "beta" && policies.iter().any(|p| p.beta().is_none()) {
                    return Err(cfg("a beta sweep needs families with a beta".into()));
                }
                Some(Sweep { variable: s.variable, values })
            }
        };

        let layers = {
            let mut l = self.experiment.layers;
            l.sort();
            l.dedup();
            l
        };
        if layers.contains(&Layer::Ess) && self.costs.is_none() {
            return Err(cfg("the ess layer needs a [costs] section".into()));
        }
        if let Some(c) = &self.costs {
            c.validate(&self.params).map_err(|e| cfg(e.to_string()))?;
        }
        let mc = self.mc;
        if mc.n0 < 4 || mc.replications == 0 || !(mc.tail_fraction > 0.0 && mc.tail_fraction <= 1.0) {
            return Err(cfg("mc needs n0 >= 4, replications >= 1 and tail_fraction in (0, 1]".into()));
        }
        let ode = self.ode;
        if !(ode.horizon > 0.0) || !(ode.tail_fraction > 0.0 && ode.tail_fraction < 1.0) {
            return Err(cfg("ode needs horizon > 0 and tail_fraction in (0, 1)".into()));
        }
        let init = self.initial;
        if !(init.theta0 >= 0.0 && init.psi0 >= 0.0 && init.theta0 + init.psi0 <= 1.0) {
            return Err(cfg(format!("initial fractions ({}, {}) are outside the simplex", init.theta0, init.psi0)));
        }
        let mutation = self.mutation.map(|m| {
            let d = MutationGrid::default();
            MutationGrid {
                p_grid: m.p_grid.unwrap_or(d.p_grid),
                eps_grid: m.eps_grid.unwrap_or(d.eps_grid),
                eps_bar: m.eps_bar.unwrap_or(d.eps_bar),
            }
        });
        if matches!(self.experiment.threads, Some(0)) {
            return Err(cfg("threads must be >= 1".into()));
        }

        Ok(Experiment {
            id: self.experiment.id,
            params: self.params,
            costs: self.costs,
            policies,
            sweep,
            layers,
            mc,
            ode,
            initial: init,
            mutation,
            tolerances: self.tolerances,
            output_dir: self.output.dir,
            write_trajectories: self.output.trajectories,
            threads: self.experiment.threads,
            config_sha256,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[experiment]
id = "t"
layers = ["ode", "closed_form"]

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
"#;

    #[test]
    fn minimal_config() {
        let e = Experiment::from_toml_str(BASE).unwrap();
        assert_eq!(e.layers, vec![Layer::ClosedForm, Layer::Ode]);
        assert_eq!(e.policies, vec![Policy::follow_crowd(0.5)]);
        assert_eq!(e.mc.n0, 40_000);
        assert_eq!(e.mc.steps(), 2_000_000);
        assert_eq!((e.initial.theta0, e.initial.psi0), (0.1, 0.01));
        assert_eq!(e.config_sha256.len(), 64);
    }

    #[test]
    fn sweep_with_families() {
        let text = format!(
            "{BASE}\n[sweep]\nvariable = \"beta\"\nstart = 4.0\nstop = 0.0\nsteps = 5\nfamilies = [\"FC\", \"FR\", \"VFC1\"]\n"
        );
        let e = Experiment::from_toml_str(&text).unwrap();
        let s = e.sweep.unwrap();
        assert_eq!(s.values, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.policies.len(), 3);
        assert_eq!(e.policies[2].family(), "VFC1");
    }

    #[test]
    fn rejects_bad_input() {
        let bad_var = format!("{BASE}\n[sweep]\nvariable = \"kappa\"\nvalues = [1.0]\n");
        assert!(matches!(Experiment::from_toml_str(&bad_var), Err(HarnessError::Config(_))));
        let unknown_key = BASE.replace("d_e = 0.0", "d_e = 0.0\nmu = 1.0");
        assert!(Experiment::from_toml_str(&unknown_key).is_err());
        let bad_params = BASE.replace("d = 0.1", "d = 0.5");
        let err = Experiment::from_toml_str(&bad_params).unwrap_err();
        assert!(err.to_string().contains("b > d + d_e"), "{err}");
        let ess_no_costs = BASE.replace("layers = [\"ode\", \"closed_form\"]", "layers = [\"ess\"]");
        assert!(Experiment::from_toml_str(&ess_no_costs).is_err());
        let no_gamma = BASE.replace("family = \"FC\"", "family = \"VFC2\"");
        assert!(Experiment::from_toml_str(&no_gamma).is_err());
    }

    #[test]
    fn mutant_and_costs() {
        let text = BASE.replace("family = \"FC\"", "family = \"MUTANT\"\nbase = \"FR\"\np = 0.2\neps = 0.01")
            + "\n[costs]\nc_v1 = 2.88\nc_v2 = 0.65\nc_v2_bar = 1.91\nc_i1 = \"4.32/r\"\n";
        let e = Experiment::from_toml_str(&text).unwrap();
        assert_eq!(e.policies[0], Policy::mutant(Policy::free_ride(0.5), 0.2, 0.01));
        assert!(e.costs.is_some());
    }
}
