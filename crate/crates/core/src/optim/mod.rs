//! Local optimizers: L-BFGS for unconstrained training and an SQP method
//! with bounds and smooth constraints for inverse design.

pub mod lbfgs;
pub mod qp;
pub mod sqp;

pub use lbfgs::{minimize_lbfgs, LbfgsConfig, LbfgsResult, Termination};
pub use sqp::{minimize_sqp, ConstrainedProblem, ProblemEval, SqpConfig, SqpResult, SqpStatus};
