pub mod audit;
pub mod baselines;
pub mod config;
pub mod control;
pub mod env;
pub mod error;
pub mod estimator;
pub mod fairness;
pub mod inner_loop;
pub mod linalg;
pub mod metrics;
pub mod outer_loop;
pub mod policy;
pub mod qp_oracle;
pub mod report;
pub mod testbed;
pub mod trainer;

pub use error::{FoamError, Result};
