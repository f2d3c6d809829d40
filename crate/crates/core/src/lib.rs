//! Falling balls on a vertical half-line.
//!
//! `n` point masses fall under unit gravity, collide elastically with each
//! other and the lowest one bounces off the floor at `q = 0`. This crate
//! evolves the system exactly from collision to collision, linearizes it in
//! `(δh, δv)` coordinates, and measures the quantities that decide whether
//! the dynamics is hyperbolic: the monotone quadratic form `Q = <δh, δv>`,
//! the neutral subspaces of finite orbit segments, and the Lyapunov spectrum
//! of the collision-to-collision return map.

pub mod cone;
pub mod error;
pub mod flow;
pub mod lyapunov;
pub mod state;
pub mod tangent;

pub use error::{Error, Result};
pub use flow::{advance, Budget, Collision, CollisionEvent, Flow, FlowConfig, SymbolicSequence};
pub use state::{MassProfile, OrderingClass, PhaseState};
pub use tangent::TangentVector;
