//! Closed-loop differentiable tuning of soft-constrained MPC with online
//! identification and scenario certification.

pub mod closed_loop;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod qp;
pub mod scenario;
pub mod sysid;
pub mod testkit;
pub mod tuner;
