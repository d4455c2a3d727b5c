//! Free-support 2-Wasserstein barycenters of continuous measures.
//!
//! The toolkit has three legs:
//!
//! - a stochastic fixed-point engine ([`fixed_point`]) that pushes an initial
//!   fully-supported measure through layers of estimated optimal-transport
//!   maps, truncating to a growing ball family each iteration;
//! - the map estimator itself ([`entropic_map`]): log-domain Sinkhorn duals
//!   ([`sinkhorn`]) turned into a barycentric projection with a radial
//!   correction that certifies global strong convexity of the potential;
//! - a generator of synthetic benchmark instances ([`instance`]) whose
//!   reference barycenter is known by construction, with Monte-Carlo
//!   sub-optimality diagnostics, and an evaluation suite ([`eval`]) built on
//!   exact discrete optimal assignment.
//!
//! Everything is deterministic: all randomness flows through named
//! counter-derived streams ([`rng`]), so serial runs, multi-threaded runs and
//! the distributed coordinator/agent simulation ([`distsim`]) produce
//! bit-identical trajectories from the same seed.

#![forbid(unsafe_code)]

pub mod assignment;
pub mod distsim;
pub mod entropic_map;
pub mod error;
pub mod eval;
pub mod fixed_point;
pub mod instance;
pub mod linalg;
pub mod manifest;
pub mod measures;
pub mod rng;
pub mod sinkhorn;

pub use error::{Error, Result};
