//! Transport-flow models of neural networks.
//!
//! A ResNet block `x + s V(x)` is one explicit Euler step of the
//! characteristic ODE `dx/dt = v(t, x)` of a linear transport equation. A
//! plain layer `a(W x + b)` has no such residual form, but it can be realized
//! as the time-5 map of a glued flow: rotate, stretch/project, rotate,
//! translate, and finally deform the identity into the activation. Sampling
//! that flow with Euler steps yields an explicit ResNet whose output
//! converges to the plain network's output.
//!
//! Modules, bottom up:
//! - [`timescale`]: smooth ramps `h` whose derivative vanishes at segment ends.
//! - [`nettypes`]: plain layers, residual blocks, networks, JSON format.
//! - [`lindecomp`]: `expm`, rotation logarithm, `W ~ exp(Phi) exp(Lambda + beta Pi) exp(Psi)`.
//! - [`actflow`]: the activation flow, its inverse, velocity and jacobians.
//! - [`flowmodel`]: layer flows, network velocity fields, ResNet fields, terminal value problems.
//! - [`integrate`]: Euler and RK4 on time grids, convergence studies.
//! - [`rediscretize`]: plain network to explicit ResNet.
//! - [`batch`]: evaluation over many inputs, parallel with the `parallel` feature.

pub mod actflow;
pub mod batch;
pub mod error;
pub mod flowmodel;
pub mod integrate;
pub mod lindecomp;
pub mod nettypes;
pub mod rediscretize;
pub mod timescale;

pub use error::{Error, Result};
