//! Selection of a single trajectory from a funnel of non-unique solutions,
//! by successive maximization of discounted path functionals.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clairaut;
pub mod error;
pub mod funnel;
pub mod local;
pub mod path_space;
pub mod problems;
pub mod selection;
pub mod separating;

pub use error::{FunnelError, Result};
pub use funnel::{unroll, BranchArc, BranchRule, Funnel, GridNode};
pub use path_space::{metric_d, rho, Path, StatePoint, TimeGrid};
pub use selection::{argmax_set, reduce, value_function, ReductionParams, SelectionOutcome, SemiProcess};
pub use separating::{Enumeration, PhiFamily, SeparatingFunctional, TestFunction};
