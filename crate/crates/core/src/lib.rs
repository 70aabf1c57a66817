//! Hamiltonian latent flows with exact inverses.
//!
//! A leapfrog-integrated neural Hamiltonian defines an invertible,
//! volume-preserving map on phase space. This crate provides the phase-space
//! types and analytic reference systems, the integrator with an adaptive
//! step-size controller, hand-derived MLP gradient machinery, the full
//! encoder/flow/decoder generative model with ELBO training and exact
//! likelihood evaluation, toy datasets, a property-verification harness,
//! and complexity measurement helpers.

pub mod complexity;
pub mod data;
pub mod error;
pub mod hamiltonian;
pub mod integrator;
pub mod linalg;
pub mod model;
pub mod net;
pub mod phase;
pub mod rng;
pub mod train;
pub mod verify;

pub use error::{Result, SgnError};
pub use hamiltonian::{AnalyticHamiltonian, Hamiltonian};
pub use integrator::{FlowConfig, StepMode, StepTrace};
pub use linalg::{lu_det, Matrix};
pub use net::{Activation, GradBundle, MlpParams, SeparableHamiltonianNet};
pub use phase::PhaseState;
pub use rng::Rng;
