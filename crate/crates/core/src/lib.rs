//! Penalized-moment fitting of generalized linear mixed models with canonical links.

pub mod covariance;
pub mod data;
pub mod error;
pub mod family;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod newton;
pub mod objective;
pub mod oracle;
pub mod registry;
pub mod simulate;
pub mod solver;

pub use error::{GlmmError, Result};
