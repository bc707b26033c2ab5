//! Numerical laboratory for resonance-driven relaxation of excited states in the
//! cubic nonlinear Schrödinger equation with a trapping potential,
//!
//! ```text
//! i ψ_t = (-Δ + V) ψ + λ |ψ|^2 ψ .
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bound_states;
pub mod decomposition;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod field;
pub mod fit;
pub mod fourier;
pub mod grid;
pub mod ground_frame;
pub mod linalg;
pub mod normal_form;
pub mod snapshot;
pub mod spectral;

pub use error::{Error, Result};
pub use field::{ComplexField, WeightSign, WeightedNormSpec, C64};
pub use grid::SpatialGrid;
