//! Monotone piecewise-linear cumulative vehicle curves.
//!
//! One curve per link boundary; the slope between knots is the boundary
//! flow, the horizontal distance between an inflow and an outflow curve is
//! the FIFO travel time.

/// Cumulative vehicle count over time at one boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeCurve {
    /// `(time, count)` knots, strictly increasing in time.
    knots: Vec<(f64, f64)>,
    /// Flow rate after the last knot.
    tail_rate: f64,
}

impl CumulativeCurve {
    pub fn new(t0: f64, initial_count: f64, rate: f64) -> Self {
        CumulativeCurve {
            knots: vec![(t0, initial_count)],
            tail_rate: rate,
        }
    }

    /// Changes the boundary flow at time `t >=` last knot time.
    pub fn set_rate(&mut self, t: f64, rate: f64) {
        let value = self.value_at(t);
        let &(t_last, _) = self.knots.last().unwrap();
        if (t - t_last).abs() <= crate::tol::TIME_TOL {
            // same-instant update replaces the pending slope
            *self.knots.last_mut().unwrap() = (t_last, value);
        } else {
            debug_assert!(t > t_last, "curve knots must advance in time");
            self.knots.push((t, value));
        }
        self.tail_rate = rate;
    }

    pub fn rate_after(&self, t: f64) -> f64 {
        match self.knots.windows(2).find(|w| t < w[1].0) {
            Some(w) => (w[1].1 - w[0].1) / (w[1].0 - w[0].0),
            None => self.tail_rate,
        }
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let idx = self.knots.partition_point(|&(kt, _)| kt <= t);
        if idx == 0 {
            return self.knots[0].1;
        }
        if idx == self.knots.len() {
            let &(t_last, v_last) = self.knots.last().unwrap();
            return v_last + self.tail_rate * (t - t_last);
        }
        let (t0, v0) = self.knots[idx - 1];
        let (t1, v1) = self.knots[idx];
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    /// Earliest time at which the curve reaches `count`; `None` when the
    /// curve never reaches it within the recorded history (including the
    /// open-ended tail only if the tail rate is positive).
    pub fn time_at_count(&self, count: f64) -> Option<f64> {
        if count < self.knots[0].1 - 1e-12 {
            return None;
        }
        if count <= self.knots[0].1 {
            return Some(self.knots[0].0);
        }
        for w in self.knots.windows(2) {
            let ((t0, v0), (t1, v1)) = (w[0], w[1]);
            if count <= v1 + 1e-12 {
                if (v1 - v0).abs() < 1e-15 {
                    // flat stretch: the vehicle crossed at the start of it
                    if count <= v0 + 1e-12 {
                        return Some(t0);
                    }
                    continue;
                }
                return Some(t0 + (t1 - t0) * (count - v0) / (v1 - v0));
            }
        }
        let &(t_last, v_last) = self.knots.last().unwrap();
        if count <= v_last + 1e-12 {
            return Some(t_last);
        }
        if self.tail_rate > 1e-15 {
            return Some(t_last + (count - v_last) / self.tail_rate);
        }
        None
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn start_time(&self) -> f64 {
        self.knots[0].0
    }

    pub fn last_knot_time(&self) -> f64 {
        self.knots.last().unwrap().0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_rate_rectangle() {
        let c = CumulativeCurve::new(0.0, 0.0, 1800.0);
        assert_abs_diff_eq!(c.value_at(1.0), 1800.0);
        assert_abs_diff_eq!(c.value_at(0.5), 900.0);
    }

    #[test]
    fn step_inflow_has_knot() {
        let mut c = CumulativeCurve::new(0.0, 0.0, 0.0);
        c.set_rate(0.5, 1800.0);
        assert_abs_diff_eq!(c.value_at(0.5), 0.0);
        assert_abs_diff_eq!(c.value_at(1.0), 900.0);
        assert_eq!(c.knots().len(), 2);
    }

    #[test]
    fn inverse_is_earliest_crossing() {
        let mut c = CumulativeCurve::new(0.0, 0.0, 1800.0);
        c.set_rate(1.0, 0.0);
        c.set_rate(2.0, 1800.0);
        assert_abs_diff_eq!(c.time_at_count(900.0).unwrap(), 0.5);
        // the vehicle at the edge of the gap crossed when the flat started
        assert_abs_diff_eq!(c.time_at_count(1800.0).unwrap(), 1.0);
        assert_abs_diff_eq!(c.time_at_count(1801.0).unwrap(), 2.0 + 1.0 / 1800.0);
    }

    #[test]
    fn inverse_out_of_range() {
        let mut c = CumulativeCurve::new(0.0, 0.0, 1800.0);
        c.set_rate(1.0, 0.0);
        assert_eq!(c.time_at_count(2000.0), None);
        assert_eq!(c.time_at_count(-5.0), None);
    }

    #[test]
    fn same_instant_rate_change_collapses() {
        let mut c = CumulativeCurve::new(0.0, 0.0, 600.0);
        c.set_rate(1.0, 1200.0);
        c.set_rate(1.0, 1800.0);
        assert_eq!(c.knots().len(), 2);
        assert_abs_diff_eq!(c.value_at(2.0), 600.0 + 1800.0);
    }
}
