//! Acceptance checks shared by `adistill reproduce` and the test suite.

mod criteria;
mod gradient;
pub mod oracles;
mod suite;

pub use criteria::{
    run_all, run_criterion, small_platform_config, Outcome, ReproduceOptions, TITLES,
};
pub use gradient::{check_stage_two_gradient, GradientSetup};
pub use suite::{run_seed, run_suite, SeedOutcome, SuiteConfig, SuiteOutcome};
