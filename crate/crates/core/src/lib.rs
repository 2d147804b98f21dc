//! Moser-regularized spatial circular restricted three-body problem:
//! regularized dynamics, open-book section maps, numerical return maps and
//! the integrable rotating-Kepler oracle.

// `!(x < y)` is used on purpose so that NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convexity;
pub mod dynamics;
pub mod equilibria;
pub mod error;
pub mod flow;
pub mod kepler_oracle;
mod numeric;
pub mod phase;
pub mod sections;

pub use error::{Error, Result};
pub use numeric::{wrap_pi, wrap_two_pi};
pub use phase::{
    project_to_ts3, reg_to_unreg, unreg_to_reg, Chart, RegState, StarkZeemanField, SystemSpec, UnregState, V3, V4,
};

pub use convexity::NormalHessian;
pub use equilibria::LagrangeSet;
pub use flow::{IntegratorConfig, Projection, ReturnRecord};
pub use kepler_oracle::KeplerContext;
pub use num_complex::Complex64;
pub use sections::{CutoffSpec, Section, SectionValue};
