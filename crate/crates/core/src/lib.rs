//! Vaccination game on an SIS population: exact jump-chain simulation,
//! mean-field ODE, closed-form attractors and evolutionary-stability
//! classification of vaccination policies.

pub mod attractor;
pub mod chain;
pub mod ess;
pub mod harness;
pub mod linalg;
pub mod ode;
pub mod params;
pub mod policy;

pub use params::{classify_regime, derive_ratios, DiseaseRegime, ModelParams, Ratios};
pub use policy::Policy;
