//! Flow–density relationships (fundamental diagrams) and flow regimes.
//!
//! A fundamental diagram maps density to flow for one link class. The only
//! structural assumption is that the space-mean speed `v(k) = f(k)/k` is
//! non-increasing in density; concavity of `f` is not required. Triangular
//! diagrams are the common calibrated form, general piecewise-linear ones
//! exercise the weaker assumption.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tol::DENSITY_TOL;

/// veh/km
pub type Density = f64;
/// veh/h
pub type FlowRate = f64;
/// km/h
pub type Speed = f64;

#[derive(Debug, Error, PartialEq)]
pub enum FdError {
    #[error("density {0} outside [0, {1}]")]
    DensityOutOfRange(f64, f64),
    #[error("invalid fundamental diagram: {0}")]
    Invalid(String),
    #[error("flow {0} exceeds maximum flow {1}")]
    FlowAboveCapacity(f64, f64),
}

/// Shape tag carried through scenario files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdShape {
    Triangular,
    PiecewiseLinear,
}

/// A flow state. Regimes produced by the engine lie on the diagram;
/// bottleneck-constrained states may sit below it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowRegime {
    pub density: Density,
    pub flow: FlowRate,
}

impl FlowRegime {
    pub const EMPTY: FlowRegime = FlowRegime {
        density: 0.0,
        flow: 0.0,
    };

    /// The on-curve regime at density `k`.
    pub fn on(fd: &FundamentalDiagram, k: Density) -> Result<FlowRegime, FdError> {
        Ok(FlowRegime {
            density: k,
            flow: fd.flow_at(k)?,
        })
    }

    pub fn same_state(&self, other: &FlowRegime) -> bool {
        (self.density - other.density).abs() <= DENSITY_TOL
            && (self.flow - other.flow).abs() <= crate::tol::FLOW_TOL
    }

    /// Space-mean speed of the stream in this regime; empty regimes fall
    /// back to the diagram's free speed.
    pub fn speed(&self, fd: &FundamentalDiagram) -> Speed {
        if self.density <= DENSITY_TOL {
            fd.free_speed()
        } else {
            self.flow / self.density
        }
    }
}

/// Flow–density relation of one link class.
///
/// Internally every diagram is a breakpoint polyline from `(0, 0)` to
/// `(jam_density, 0)`; the triangular constructor synthesizes the
/// three-point form.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalDiagram {
    pub shape: FdShape,
    pub max_flow: FlowRate,
    pub critical_density: Density,
    pub jam_density: Density,
    breakpoints: Vec<(Density, FlowRate)>,
}

impl FundamentalDiagram {
    /// Two-piece linear diagram through `(0,0)`, `(k_c, q_max)`, `(k_j, 0)`.
    pub fn triangular(
        max_flow: FlowRate,
        critical_density: Density,
        jam_density: Density,
    ) -> Result<Self, FdError> {
        let breakpoints = vec![
            (0.0, 0.0),
            (critical_density, max_flow),
            (jam_density, 0.0),
        ];
        let fd = FundamentalDiagram {
            shape: FdShape::Triangular,
            max_flow,
            critical_density,
            jam_density,
            breakpoints,
        };
        fd.validate()?;
        Ok(fd)
    }

    /// General piecewise-linear diagram from ordered `(density, flow)`
    /// breakpoints. The list must start at `(0, 0)`, end at zero flow, and
    /// keep `f(k)/k` non-increasing.
    pub fn piecewise(breakpoints: Vec<(Density, FlowRate)>) -> Result<Self, FdError> {
        if breakpoints.len() < 3 {
            return Err(FdError::Invalid(
                "piecewise diagram needs at least three breakpoints".into(),
            ));
        }
        let (mut max_flow, mut critical_density) = (f64::NEG_INFINITY, 0.0);
        for &(k, f) in &breakpoints {
            if f > max_flow {
                max_flow = f;
                critical_density = k;
            }
        }
        let jam_density = breakpoints.last().unwrap().0;
        let fd = FundamentalDiagram {
            shape: FdShape::PiecewiseLinear,
            max_flow,
            critical_density,
            jam_density,
            breakpoints,
        };
        fd.validate()?;
        Ok(fd)
    }

    fn validate(&self) -> Result<(), FdError> {
        let bp = &self.breakpoints;
        if bp[0] != (0.0, 0.0) {
            return Err(FdError::Invalid("first breakpoint must be (0, 0)".into()));
        }
        let (kj, f_end) = *bp.last().unwrap();
        if f_end.abs() > 1e-12 {
            return Err(FdError::Invalid("flow at jam density must be 0".into()));
        }
        if !(self.critical_density > 0.0 && self.critical_density < kj) {
            return Err(FdError::Invalid(format!(
                "critical density {} must lie strictly inside (0, {})",
                self.critical_density, kj
            )));
        }
        if self.max_flow <= 0.0 {
            return Err(FdError::Invalid("maximum flow must be positive".into()));
        }
        let mut prev_v = f64::INFINITY;
        for w in bp.windows(2) {
            let ((k0, f0), (k1, f1)) = (w[0], w[1]);
            if k1 <= k0 {
                return Err(FdError::Invalid(
                    "breakpoint densities must be strictly increasing".into(),
                ));
            }
            if f0 < 0.0 || f1 < 0.0 {
                return Err(FdError::Invalid("flow must be non-negative".into()));
            }
            // v non-increasing within a segment f = a + m k  <=>  a >= 0,
            // and across breakpoints v must not rise.
            let m = (f1 - f0) / (k1 - k0);
            let a = f0 - m * k0;
            if a < -1e-9 {
                return Err(FdError::Invalid(format!(
                    "speed increases with density on segment starting at k={k0}"
                )));
            }
            let v0 = if k0 <= DENSITY_TOL { m } else { f0 / k0 };
            if v0 > prev_v + 1e-9 {
                return Err(FdError::Invalid(format!(
                    "speed increases across breakpoint at k={k0}"
                )));
            }
            prev_v = if k1 <= DENSITY_TOL { m } else { f1 / k1 };
        }
        // wave speeds must stay within the free speed, or packages could
        // outrun the node-zone geometry of the staged scheduler
        let v_free = self.free_speed();
        for w in bp.windows(2) {
            let m = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
            if m.abs() > v_free + 1e-9 {
                return Err(FdError::Invalid(format!(
                    "wave speed {} on segment at k={} exceeds free speed {}",
                    m, w[0].0, v_free
                )));
            }
        }
        Ok(())
    }

    pub fn breakpoints(&self) -> &[(Density, FlowRate)] {
        &self.breakpoints
    }

    fn check_domain(&self, k: Density) -> Result<(), FdError> {
        if !(-DENSITY_TOL..=self.jam_density + DENSITY_TOL).contains(&k) {
            return Err(FdError::DensityOutOfRange(k, self.jam_density));
        }
        Ok(())
    }

    /// Flow at density `k`.
    pub fn flow_at(&self, k: Density) -> Result<FlowRate, FdError> {
        self.check_domain(k)?;
        let k = k.clamp(0.0, self.jam_density);
        for w in self.breakpoints.windows(2) {
            let ((k0, f0), (k1, f1)) = (w[0], w[1]);
            if k <= k1 + DENSITY_TOL {
                return Ok(f0 + (f1 - f0) * (k - k0) / (k1 - k0));
            }
        }
        Ok(0.0)
    }

    /// Space-mean speed at density `k`; the `k = 0` limit is the slope of
    /// the first segment.
    pub fn speed_at(&self, k: Density) -> Result<Speed, FdError> {
        self.check_domain(k)?;
        if k <= DENSITY_TOL {
            return Ok(self.free_speed());
        }
        Ok(self.flow_at(k)? / k)
    }

    /// Free (maximum) speed of the class.
    pub fn free_speed(&self) -> Speed {
        let (k1, f1) = self.breakpoints[1];
        f1 / k1
    }

    /// Slope magnitude of the congested branch (triangular only meaning;
    /// general diagrams return the chord from critical to jam).
    pub fn congested_wave_speed(&self) -> Speed {
        self.max_flow / (self.jam_density - self.critical_density)
    }

    /// Inflow capacity of a link whose upstream end sits at density `k`:
    /// under-saturated ends admit the maximum flow, over-saturated ends are
    /// limited to the prevailing flow.
    pub fn inflow_capacity(&self, k: Density) -> Result<FlowRate, FdError> {
        self.check_domain(k)?;
        if k <= self.critical_density + DENSITY_TOL {
            Ok(self.max_flow)
        } else {
            self.flow_at(k)
        }
    }

    /// Flow a link can send from an exit at density `k`: the prevailing flow
    /// while under-saturated, the maximum flow once queued.
    pub fn sending_flow(&self, k: Density) -> Result<FlowRate, FdError> {
        self.check_domain(k)?;
        if k <= self.critical_density + DENSITY_TOL {
            self.flow_at(k)
        } else {
            Ok(self.max_flow)
        }
    }

    /// The lowest-density regime carrying `flow` (demand-side state).
    pub fn free_regime_at_flow(&self, flow: FlowRate) -> Result<FlowRegime, FdError> {
        self.regime_at_flow(flow, true)
    }

    /// The highest-density regime carrying `flow` (supply-side state).
    pub fn congested_regime_at_flow(&self, flow: FlowRate) -> Result<FlowRegime, FdError> {
        self.regime_at_flow(flow, false)
    }

    fn regime_at_flow(&self, flow: FlowRate, lowest: bool) -> Result<FlowRegime, FdError> {
        if flow > self.max_flow + crate::tol::FLOW_TOL {
            return Err(FdError::FlowAboveCapacity(flow, self.max_flow));
        }
        let flow = flow.min(self.max_flow);
        let windows: Vec<_> = self.breakpoints.windows(2).collect();
        let iter: Box<dyn Iterator<Item = &&[(f64, f64)]>> = if lowest {
            Box::new(windows.iter())
        } else {
            Box::new(windows.iter().rev())
        };
        for w in iter {
            let ((k0, f0), (k1, f1)) = (w[0], w[1]);
            let (lo, hi) = (f0.min(f1), f0.max(f1));
            if flow >= lo - crate::tol::FLOW_TOL && flow <= hi + crate::tol::FLOW_TOL {
                if (f1 - f0).abs() < 1e-12 {
                    let k = if lowest { k0 } else { k1 };
                    return Ok(FlowRegime { density: k, flow });
                }
                let k = k0 + (k1 - k0) * (flow - f0) / (f1 - f0);
                return Ok(FlowRegime {
                    density: k.clamp(k0, k1),
                    flow,
                });
            }
        }
        // flow == max_flow falls through segment scans only by rounding
        Ok(FlowRegime {
            density: self.critical_density,
            flow: self.max_flow,
        })
    }

    /// The capacity regime `(k_c, q_max)`.
    pub fn critical_regime(&self) -> FlowRegime {
        FlowRegime {
            density: self.critical_density,
            flow: self.max_flow,
        }
    }

    /// The jammed regime `(k_j, 0)`.
    pub fn jam_regime(&self) -> FlowRegime {
        FlowRegime {
            density: self.jam_density,
            flow: 0.0,
        }
    }

    /// Decomposes the transition from a spatially upstream regime to a
    /// downstream one into the admissible wave fan.
    ///
    /// Returns the chain of regimes `up = r_0, r_1, ..., r_n = down`; each
    /// consecutive pair is one wave and the chord speeds increase from
    /// upstream to downstream, so waves created at one point separate.
    /// Compressive transitions on a concave diagram reduce to the single
    /// chord; expansive transitions across the capacity point split (for a
    /// triangular diagram: one wave onto the capacity state and one off it).
    pub fn decompose_transition(&self, up: FlowRegime, down: FlowRegime) -> Vec<FlowRegime> {
        if (up.density - down.density).abs() <= DENSITY_TOL {
            return vec![up, down];
        }
        let (k_lo, k_hi) = if up.density < down.density {
            (up.density, down.density)
        } else {
            (down.density, up.density)
        };
        // Candidate vertices: the two states plus diagram breakpoints
        // strictly between them.
        let mut pts: Vec<(f64, f64)> = vec![(up.density, up.flow), (down.density, down.flow)];
        for &(k, f) in &self.breakpoints {
            if k > k_lo + DENSITY_TOL && k < k_hi - DENSITY_TOL {
                pts.push((k, f));
            }
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Increasing density: lower convex hull; decreasing density (an
        // expansion): upper concave hull.
        let keep_upper = up.density > down.density;
        let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
        for p in pts {
            while hull.len() >= 2 {
                let a = hull[hull.len() - 2];
                let b = hull[hull.len() - 1];
                let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
                let drop_mid = if keep_upper { cross >= 0.0 } else { cross <= 0.0 };
                if drop_mid {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        let mut chain: Vec<FlowRegime> = hull
            .into_iter()
            .map(|(density, flow)| FlowRegime { density, flow })
            .collect();
        if up.density > down.density {
            chain.reverse();
        }
        debug_assert!(chain.first().unwrap().same_state(&up));
        debug_assert!(chain.last().unwrap().same_state(&down));
        chain
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn tri() -> FundamentalDiagram {
        FundamentalDiagram::triangular(1800.0, 30.0, 120.0).unwrap()
    }

    #[test]
    fn flow_at_examples() {
        let fd = tri();
        assert_abs_diff_eq!(fd.flow_at(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(fd.flow_at(30.0).unwrap(), 1800.0);
        // congested branch slope w = 1800/(120-30) = 20 km/h
        assert_abs_diff_eq!(fd.flow_at(60.0).unwrap(), 1200.0, epsilon = 1e-9);
        assert!(fd.flow_at(-1.0).is_err());
        assert!(fd.flow_at(121.0).is_err());
    }

    #[test]
    fn speed_at_examples() {
        let fd = tri();
        assert_abs_diff_eq!(fd.speed_at(15.0).unwrap(), 60.0, epsilon = 1e-9);
        assert_abs_diff_eq!(fd.speed_at(120.0).unwrap(), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(fd.speed_at(60.0).unwrap(), 20.0, epsilon = 1e-9);
        assert_abs_diff_eq!(fd.speed_at(0.0).unwrap(), 60.0, epsilon = 1e-9);
    }

    #[test]
    fn inflow_capacity_examples() {
        let fd = tri();
        assert_abs_diff_eq!(fd.inflow_capacity(15.0).unwrap(), 1800.0);
        assert_abs_diff_eq!(fd.inflow_capacity(30.0).unwrap(), 1800.0);
        assert_abs_diff_eq!(fd.inflow_capacity(60.0).unwrap(), 1200.0, epsilon = 1e-9);
    }

    #[test]
    fn sending_flow_branches() {
        let fd = tri();
        assert_abs_diff_eq!(fd.sending_flow(15.0).unwrap(), 900.0, epsilon = 1e-9);
        assert_abs_diff_eq!(fd.sending_flow(60.0).unwrap(), 1800.0);
        assert_abs_diff_eq!(fd.sending_flow(120.0).unwrap(), 1800.0);
    }

    #[test]
    fn regimes_at_flow() {
        let fd = tri();
        let free = fd.free_regime_at_flow(1200.0).unwrap();
        assert_abs_diff_eq!(free.density, 20.0, epsilon = 1e-9);
        let cong = fd.congested_regime_at_flow(1200.0).unwrap();
        assert_abs_diff_eq!(cong.density, 60.0, epsilon = 1e-9);
        let crit = fd.free_regime_at_flow(1800.0).unwrap();
        assert_abs_diff_eq!(crit.density, 30.0, epsilon = 1e-9);
        assert!(fd.free_regime_at_flow(1801.0).is_err());
    }

    #[test]
    fn invalid_diagrams_rejected() {
        assert!(FundamentalDiagram::triangular(1800.0, 120.0, 120.0).is_err());
        assert!(FundamentalDiagram::triangular(1800.0, 0.0, 120.0).is_err());
        // speed increasing with density is not a valid diagram
        assert!(FundamentalDiagram::piecewise(vec![
            (0.0, 0.0),
            (10.0, 100.0),
            (20.0, 900.0),
            (100.0, 0.0)
        ])
        .is_err());
    }

    #[test]
    fn piecewise_diagram_basic() {
        let fd = FundamentalDiagram::piecewise(vec![
            (0.0, 0.0),
            (20.0, 1600.0),
            (40.0, 2000.0),
            (140.0, 0.0),
        ])
        .unwrap();
        assert_abs_diff_eq!(fd.max_flow, 2000.0);
        assert_abs_diff_eq!(fd.critical_density, 40.0);
        assert_abs_diff_eq!(fd.free_speed(), 80.0);
        assert_abs_diff_eq!(fd.flow_at(30.0).unwrap(), 1800.0, epsilon = 1e-9);
    }

    #[test]
    fn transition_decomposition_triangular() {
        let fd = tri();
        // compressive: free into jam stays one wave
        let up = FlowRegime::on(&fd, 30.0).unwrap();
        let down = fd.jam_regime();
        assert_eq!(fd.decompose_transition(up, down).len(), 2);
        // expansive across the capacity point splits through (k_c, q_max)
        let up = fd.jam_regime();
        let down = FlowRegime::EMPTY;
        let chain = fd.decompose_transition(up, down);
        assert_eq!(chain.len(), 3);
        assert_abs_diff_eq!(chain[1].density, 30.0, epsilon = 1e-9);
        assert_abs_diff_eq!(chain[1].flow, 1800.0, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn flow_never_exceeds_max(
            qm in 500.0..4000.0f64,
            kc in 10.0..60.0f64,
            extra in 10.0..200.0f64,
            frac in 0.0..1.0f64,
        ) {
            let fd = FundamentalDiagram::triangular(qm, kc, kc + extra).unwrap();
            let k = frac * fd.jam_density;
            prop_assert!(fd.flow_at(k).unwrap() <= fd.max_flow + 1e-9);
        }

        #[test]
        fn speed_is_non_increasing(
            qm in 500.0..4000.0f64,
            kc in 10.0..60.0f64,
            extra in 10.0..200.0f64,
            a in 0.001..1.0f64,
            b in 0.001..1.0f64,
        ) {
            let fd = FundamentalDiagram::triangular(qm, kc, kc + extra).unwrap();
            let (k1, k2) = if a < b { (a, b) } else { (b, a) };
            let (k1, k2) = (k1 * fd.jam_density, k2 * fd.jam_density);
            prop_assert!(fd.speed_at(k1).unwrap() >= fd.speed_at(k2).unwrap() - 1e-9);
        }

        #[test]
        fn inflow_capacity_matches_branches(
            qm in 500.0..4000.0f64,
            kc in 10.0..60.0f64,
            extra in 10.0..200.0f64,
            frac in 0.0..1.0f64,
        ) {
            let fd = FundamentalDiagram::triangular(qm, kc, kc + extra).unwrap();
            let k = frac * fd.jam_density;
            let cap = fd.inflow_capacity(k).unwrap();
            if k <= fd.critical_density {
                prop_assert!((cap - fd.max_flow).abs() < 1e-9);
            } else {
                prop_assert!((cap - fd.flow_at(k).unwrap()).abs() < 1e-9);
            }
        }
    }
}
