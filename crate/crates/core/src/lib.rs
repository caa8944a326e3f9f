//! Structure-preserving finite-volume simulation of the chemotaxis-fluid
//! system with logarithmic sensitivity and oxygen consumption,
//!
//! ```text
//! n_t + u.grad n = lap n - chi div( n / ((1 + eps n) c) grad c )
//! c_t + u.grad c = lap c - n f(c)
//! u_t + (u.grad) u = lap u + grad P + n grad phi,   div u = 0
//! ```
//!
//! on a rectangle with zero-flux walls for `n`, `c` and no-slip walls for
//! `u`, together with a diagnostics engine that evaluates the energy and
//! entropy functionals of the system on every discrete state.

pub mod diagnostics;
pub mod driver;
pub mod fluid;
pub mod grid;
pub mod io;
pub mod oracle;
pub mod sensitivity;
pub mod solver;
pub mod state;
pub mod taxis;
