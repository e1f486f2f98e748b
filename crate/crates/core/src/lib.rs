//! Numerical analysis of the nullity distribution of submanifolds of
//! Euclidean, spherical and hyperbolic space forms.
//!
//! The crate is organised bottom-up:
//!
//! - [`ambient`]: the three space forms and their closed-form geodesics.
//! - [`immersion`]: parametrized immersions with second-order jets, and the catalog.
//! - [`shape`]: fundamental forms, normal frames and shape operators.
//! - [`nullity`]: nullity kernels, index scans and leaf checks.
//! - [`bundle`]: leaf charts, horizontal lifts and holonomy.
//! - [`connectivity`]: horizontal reachability and two-point connection.
//! - [`tubes`]: spherical tubes over Euclidean submanifolds.
//! - [`report`]: experiment configuration and reports used by the binary.

pub mod ambient;
pub mod bundle;
pub mod connectivity;
pub mod error;
pub mod expr;
pub mod immersion;
pub mod linalg;
pub mod nullity;
pub mod ode;
pub mod projection;
pub mod report;
pub mod shape;
pub mod tubes;

pub use ambient::{SpaceForm, SpaceKind};
pub use error::{Error, Result};
pub use immersion::{ChartedImmersion, ImmersionJet, ParamBox};
