//! Quantum optimal control toolkit built around an arbitrarily high-order
//! Hermite Runge-Kutta integrator for Schrödinger's equation and a discrete
//! adjoint method that returns gradients exact with respect to the discrete
//! propagator, at a cost independent of the number of control parameters.
//!
//! Pipeline: [`model`] builds drift/control Hamiltonians for multi-qudit
//! systems, [`controls`] evaluates B-spline-times-carrier pulses and their
//! time/parameter derivatives, [`hermite_integrator`] propagates the
//! real-split state matrix forward, [`adjoint_engine`] runs the backward
//! pass and gradient accumulation, [`objectives`] supplies gate-fidelity
//! and guard-penalty functionals, [`optimize`] drives a projected L-BFGS
//! loop, and [`verify`] holds analytic oracles and convergence harnesses.
//! The [`cli`] module exposes all of it as subcommands.

pub mod adjoint_engine;
pub mod cli;
pub mod controls;
pub mod error;
pub mod exec;
pub mod hermite_integrator;
pub mod model;
pub mod objectives;
pub mod optimize;
pub mod state_core;
pub mod verify;

pub use error::{Error, Result};
