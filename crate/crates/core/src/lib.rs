//! Fixed-confidence Pareto set identification for multi-objective bandits.
//!
//! The crate implements the PSIPS strategy (posterior-sampling stopping rule
//! paired with a game-based sampling rule) for unstructured and transductive
//! linear bandits with Gaussian objectives sharing a known covariance, along
//! with baselines and an exact best-response oracle for the characteristic
//! time.
//!
//! Module map:
//!
//! - [`instance`]: bandit environments, noise models, builtin datasets.
//! - [`pareto`]: dominance, Pareto sets, the alternative set and its convex pieces.
//! - [`estimator`]: least-squares sufficient statistics and posterior draws.
//! - [`calibration`]: Mills ratio, Lambert W, thresholds and the `(M, c)` families.
//! - [`oracle`]: best responses, GLR infimum, characteristic time.
//! - [`learners`]: AdaHedge, the posterior-sampling min learner, Estimate-and-Halve.
//! - [`stopping`]: PS and GLR stopping rules, recommendation.
//! - [`algorithms`]: complete identification strategies and run records.

pub mod algorithms;
pub mod calibration;
pub mod estimator;
pub mod instance;
pub mod learners;
pub mod oracle;
pub mod pareto;
pub mod stopping;

mod error;
pub mod rng;

pub use error::{Error, Result};
pub use instance::Instance;
pub use pareto::ParetoSet;
