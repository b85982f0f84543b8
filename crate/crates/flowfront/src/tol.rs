//! Numerical tolerances used across the engine.
//!
//! All internal units are hours, kilometres, veh/h and veh/km.

/// Densities within this distance of a branch boundary are treated as equal
/// when classifying a flow regime (veh/km).
pub const DENSITY_TOL: f64 = 1e-9;

/// Flows closer than this are considered the same boundary state (veh/h).
pub const FLOW_TOL: f64 = 1e-9;

/// Wave speeds closer than this are treated as parallel (km/h).
pub const SPEED_TOL: f64 = 1e-12;

/// Positions closer than this are co-located (km).
pub const POSITION_TOL: f64 = 1e-9;

/// Times closer than this coincide (h).
pub const TIME_TOL: f64 = 1e-12;

/// Vehicle-count slack allowed in conservation checks (veh).
pub const VEHICLE_TOL: f64 = 1e-6;

/// Route-share vectors are compared entry-wise at this tolerance.
pub const SHARE_TOL: f64 = 1e-9;
