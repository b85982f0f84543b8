//! Macroscopic dynamic network loading by wave-front tracking.
//!
//! Traffic state changes travel through a link/node network as
//! "information packages": flow shockwaves, route-proportion fronts and
//! moving bottlenecks. Links keep piecewise-constant states between
//! package positions; nodes allocate upstream flows to downstream links
//! under capacity and priority constraints. The simulation advances on
//! exact event times, either sequentially or as a deterministic two-stage
//! parallel schedule, and exposes sensor counts, travel times,
//! goodness-of-fit statistics and an iterative least-squares calibration
//! loop on top.

pub mod curve;
pub mod fd;
pub mod link;
pub mod package;
pub mod tol;
