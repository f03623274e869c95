//! Mixed exact/tau-leap kinetic Monte Carlo with multilevel variance
//! reduction for stochastic reaction networks.

pub mod coupling;
pub mod cv;
pub mod error;
pub mod exact;
pub mod mixedpath;
pub mod mlmc;
pub mod model;
pub mod rng;
pub mod splitting;
pub mod tauleap;
