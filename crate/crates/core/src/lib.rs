//! Piecewise affine decision rules for multi-stage stochastic, robust, and
//! Wasserstein data-driven linear optimization.
//!
//! The pipeline: embed the raw uncertainty into a space where the support is
//! well-shaped ([`lifting::Embedding`]), fold it along a breakpoint grid
//! ([`lifting::BreakpointGrid`]) so affine rules in the lifted space become
//! piecewise affine in the original one, assemble the dual conic counterpart
//! of the resulting decision-rule program ([`reformulation`]), and tighten
//! its lifted-support outer approximation with distance cuts separated
//! exactly in polynomial time for permutation-invariant supports
//! ([`separation`]). [`bench_inventory`] drives the multi-period inventory
//! experiments end to end.

pub mod bench_inventory;
pub mod lifting;
pub mod program;
pub mod reformulation;
pub mod separation;
pub mod solver;
pub mod supports;

pub use program::{ConicProgram, RowSense, RowTag, Sense};
pub use solver::{Backend, SolveOptions, SolveRequest, SolveResult, SolveStatus};
