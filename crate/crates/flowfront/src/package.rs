//! Information packages: moving markers that carry a state change along a
//! link, and the rules for what happens when two of them meet.
//!
//! Three kinds exist. A shockwave separates two flow regimes and moves at
//! the Rankine–Hugoniot speed. A route-proportion front carries updated
//! route shares downstream with the traffic stream. A moving bottleneck is
//! an externally injected capacity constraint that follows a route; while
//! active it behaves like a moving regime boundary.

use thiserror::Error;

use crate::fd::{FlowRegime, FundamentalDiagram, Speed};
use crate::tol::{DENSITY_TOL, FLOW_TOL, SPEED_TOL};

#[derive(Debug, Error, PartialEq)]
pub enum PackageError {
    #[error("degenerate wave: both regimes have density {0}")]
    DegenerateWave(f64),
    #[error("route-proportion fronts cannot intersect each other")]
    RoutingFrontsCollided,
    #[error("impossible interaction: {0}")]
    ImpossibleInteraction(&'static str),
}

/// Internal handle; unique within a run but never exported.
pub type IpKey = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpKind {
    Shockwave,
    RouteFront,
    MovingBottleneck,
}

/// Route shares over the carrying link's local route list.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteShares(pub Vec<f64>);

impl RouteShares {
    pub fn uniform(n: usize) -> Self {
        if n == 0 {
            return RouteShares(Vec::new());
        }
        RouteShares(vec![1.0 / n as f64; n])
    }

    pub fn approx_eq(&self, other: &RouteShares) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| (a - b).abs() <= crate::tol::SHARE_TOL)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShockPayload {
    /// Regime spatially behind (upstream of) the wave.
    pub upstream: FlowRegime,
    /// Regime spatially ahead (downstream of) the wave.
    pub downstream: FlowRegime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckStates {
    /// Constrained regime forming upstream of an active bottleneck.
    pub upstream: FlowRegime,
    /// Unconstrained regime released downstream of it.
    pub downstream: FlowRegime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckPayload {
    /// Own free speed (km/h).
    pub free_speed: Speed,
    /// Flow it lets through, in its own moving frame (veh/h).
    pub capacity: f64,
    /// Remaining links of the route it follows (current link first).
    pub route: Vec<usize>,
    /// `Some` while the bottleneck interrupts the surrounding stream.
    pub active: Option<BottleneckStates>,
}

impl BottleneckPayload {
    pub fn is_active(&self) -> bool {
        self.active.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IpPayload {
    Shock(ShockPayload),
    Route(RouteShares),
    Bottleneck(BottleneckPayload),
}

/// A tagged moving marker on a link. Position at time `t` is
/// `anchor_pos + (t - anchor_time) * speed`; the anchor only changes when
/// the package itself changes (created or re-speeded).
#[derive(Debug, Clone, PartialEq)]
pub struct InformationPackage {
    pub key: IpKey,
    pub anchor_pos: f64,
    pub anchor_time: f64,
    pub speed: Speed,
    pub version: u32,
    pub payload: IpPayload,
}

impl InformationPackage {
    pub fn kind(&self) -> IpKind {
        match self.payload {
            IpPayload::Shock(_) => IpKind::Shockwave,
            IpPayload::Route(_) => IpKind::RouteFront,
            IpPayload::Bottleneck(_) => IpKind::MovingBottleneck,
        }
    }

    pub fn position_at(&self, t: f64) -> f64 {
        self.anchor_pos + (t - self.anchor_time) * self.speed
    }

    /// Regime spatially upstream of this package, when it separates regimes.
    pub fn upstream_regime(&self) -> Option<FlowRegime> {
        match &self.payload {
            IpPayload::Shock(s) => Some(s.upstream),
            IpPayload::Bottleneck(b) => b.active.as_ref().map(|st| st.upstream),
            IpPayload::Route(_) => None,
        }
    }

    pub fn downstream_regime(&self) -> Option<FlowRegime> {
        match &self.payload {
            IpPayload::Shock(s) => Some(s.downstream),
            IpPayload::Bottleneck(b) => b.active.as_ref().map(|st| st.downstream),
            IpPayload::Route(_) => None,
        }
    }
}

/// Rankine–Hugoniot speed of the boundary between a spatially upstream
/// regime `a` and a downstream regime `b`. Positive speeds propagate
/// downstream.
pub fn shockwave_speed(a: &FlowRegime, b: &FlowRegime) -> Result<Speed, PackageError> {
    let dk = b.density - a.density;
    if dk.abs() <= DENSITY_TOL {
        return Err(PackageError::DegenerateWave(a.density));
    }
    Ok((b.flow - a.flow) / dk)
}

/// Speed of a route-proportion front: it rides with the stream it is in.
pub fn routing_ip_speed(regime: &FlowRegime, fd: &FundamentalDiagram) -> Speed {
    regime.speed(fd)
}

/// Classification of a moving bottleneck against the stream around it.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckClassification {
    pub active: bool,
    /// Bottleneck speed: its own free speed while active, otherwise the
    /// lower of its free speed and the ambient stream speed.
    pub speed: Speed,
    /// Constrained state upstream of the bottleneck (ambient when inactive).
    pub upstream_state: FlowRegime,
    /// Released state downstream of it (ambient when inactive).
    pub downstream_state: FlowRegime,
}

/// Classifies a moving bottleneck with free speed `v_free` and capacity
/// `c_b` against the ambient regime.
///
/// The passing flow in the bottleneck frame is `f(k) - v_b k` with
/// `v_b = min(v_free, ambient stream speed)`; the bottleneck is active when
/// the ambient stream demands more than `c_b` across it. The states that
/// form on either side are the intersections of the diagram with the line
/// of offset `c_b` and slope `v_b` that bracket the ambient density.
pub fn classify_bottleneck(
    v_free: Speed,
    c_b: f64,
    ambient: &FlowRegime,
    fd: &FundamentalDiagram,
) -> BottleneckClassification {
    let ambient_speed = ambient.speed(fd);
    let v_b = v_free.min(ambient_speed);
    let inactive = || BottleneckClassification {
        active: false,
        speed: v_free.min(ambient_speed),
        upstream_state: *ambient,
        downstream_state: *ambient,
    };
    let excess = ambient.flow - v_b * ambient.density - c_b;
    if excess <= FLOW_TOL {
        return inactive();
    }
    // Intersections of the diagram with q = c_b + v_b k.
    let line = |k: f64| c_b + v_b * k;
    let mut roots: Vec<FlowRegime> = Vec::new();
    let bps = fd.breakpoints();
    for w in bps.windows(2) {
        let ((k0, f0), (k1, f1)) = (w[0], w[1]);
        let g0 = f0 - line(k0);
        let g1 = f1 - line(k1);
        if g0 == 0.0 {
            push_root(&mut roots, k0, f0);
        }
        if (g0 < 0.0) != (g1 < 0.0) && g0 != 0.0 && g1 != 0.0 {
            let t = g0 / (g0 - g1);
            let k = k0 + t * (k1 - k0);
            push_root(&mut roots, k, line(k));
        }
        if g1 == 0.0 && w[1].0 == bps.last().unwrap().0 {
            push_root(&mut roots, k1, f1);
        }
    }
    let below = roots
        .iter()
        .filter(|r| r.density < ambient.density - DENSITY_TOL)
        .last()
        .copied();
    let above = roots
        .iter()
        .find(|r| r.density > ambient.density + DENSITY_TOL)
        .copied();
    match (below, above) {
        (Some(a_state), Some(b_state)) => BottleneckClassification {
            active: true,
            speed: v_b,
            upstream_state: b_state,
            downstream_state: a_state,
        },
        // the line never re-crosses the diagram on one side: the
        // bottleneck cannot sustain a two-state pattern, treat as inactive
        _ => inactive(),
    }
}

fn push_root(roots: &mut Vec<FlowRegime>, k: f64, f: f64) {
    if roots
        .last()
        .is_some_and(|r| (r.density - k).abs() <= DENSITY_TOL)
    {
        return;
    }
    roots.push(FlowRegime {
        density: k,
        flow: f,
    });
}

/// One element of the post-interaction spatial layout, upstream first.
#[derive(Debug, Clone, PartialEq)]
pub enum LayoutItem {
    /// Input package survives; `new_speed`/`re_anchor` say how it continues.
    Survivor {
        /// 0 = the spatially upstream input, 1 = the downstream one.
        input: usize,
        new_speed: Speed,
        re_anchor: bool,
        /// Updated payload (bottleneck activation state changes).
        payload: Option<IpPayload>,
    },
    /// A freshly created shockwave.
    NewShock(ShockPayload),
}

/// Outcome of a pairwise interaction: the replacement sequence at the
/// collision point in upstream-to-downstream order. Inputs not listed as
/// survivors terminate.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionOutcome {
    pub items: Vec<LayoutItem>,
}

/// Resolves the interaction of two co-located packages. `up` was spatially
/// upstream of `down` just before the collision.
pub fn interact(
    up: &InformationPackage,
    down: &InformationPackage,
    fd: &FundamentalDiagram,
) -> Result<InteractionOutcome, PackageError> {
    use IpPayload::*;
    match (&up.payload, &down.payload) {
        (Shock(a), Shock(b)) => Ok(shock_shock(a, b, fd)),
        (Route(_), Shock(s)) => {
            // the front slips through and rides the stream beyond the wave
            let new_speed = routing_ip_speed(&s.downstream, fd);
            Ok(InteractionOutcome {
                items: vec![
                    LayoutItem::Survivor {
                        input: 1,
                        new_speed: down.speed,
                        re_anchor: false,
                        payload: None,
                    },
                    LayoutItem::Survivor {
                        input: 0,
                        new_speed,
                        re_anchor: true,
                        payload: None,
                    },
                ],
            })
        }
        (Shock(_), Route(_)) => Err(PackageError::ImpossibleInteraction(
            "a shockwave cannot catch a route front from behind",
        )),
        (Route(_), Route(_)) => Err(PackageError::RoutingFrontsCollided),
        (Bottleneck(m), Shock(s)) => {
            // the wave's far side sweeps over the bottleneck
            let keep_up = m
                .active
                .as_ref()
                .map(|st| st.upstream)
                .unwrap_or(s.upstream);
            Ok(bottleneck_sweep(m, keep_up, s.downstream, true, fd))
        }
        (Shock(s), Bottleneck(m)) => {
            let keep_down = m
                .active
                .as_ref()
                .map(|st| st.downstream)
                .unwrap_or(s.downstream);
            Ok(bottleneck_sweep(m, s.upstream, keep_down, false, fd))
        }
        (Route(_), Bottleneck(m)) => {
            // the front overtakes the bottleneck; across an active one the
            // stream changes, so the front re-speeds, otherwise it just
            // swaps past
            let new_speed = match &m.active {
                Some(st) => routing_ip_speed(&st.downstream, fd),
                None => up.speed,
            };
            Ok(InteractionOutcome {
                items: vec![
                    LayoutItem::Survivor {
                        input: 1,
                        new_speed: down.speed,
                        re_anchor: false,
                        payload: None,
                    },
                    LayoutItem::Survivor {
                        input: 0,
                        new_speed,
                        re_anchor: true,
                        payload: None,
                    },
                ],
            })
        }
        (Bottleneck(_), Route(_)) => Err(PackageError::ImpossibleInteraction(
            "a bottleneck cannot catch a route front: it never exceeds stream speed",
        )),
        (Bottleneck(_), Bottleneck(_)) => Err(PackageError::ImpossibleInteraction(
            "bottleneck pairs are not modeled",
        )),
    }
}

fn shock_shock(a: &ShockPayload, b: &ShockPayload, fd: &FundamentalDiagram) -> InteractionOutcome {
    let outer_up = a.upstream;
    let outer_down = b.downstream;
    InteractionOutcome {
        items: wave_chain(outer_up, outer_down, fd),
    }
}

/// Builds the admissible wave fan between two outer regimes. Identical
/// regimes produce no wave.
fn wave_chain(up: FlowRegime, down: FlowRegime, fd: &FundamentalDiagram) -> Vec<LayoutItem> {
    if up.same_state(&down) {
        return Vec::new();
    }
    if (up.density - down.density).abs() <= DENSITY_TOL {
        // same density, different flow: off-curve constrained state edge;
        // treat as a single stationary-ish boundary by flow conservation
        return vec![LayoutItem::NewShock(ShockPayload {
            upstream: up,
            downstream: down,
        })];
    }
    let chain = fd.decompose_transition(up, down);
    chain
        .windows(2)
        .filter(|w| !w[0].same_state(&w[1]))
        .map(|w| {
            LayoutItem::NewShock(ShockPayload {
                upstream: w[0],
                downstream: w[1],
            })
        })
        .collect()
}

/// A shock sweeps over a moving bottleneck: the wave terminates, the
/// bottleneck re-classifies against the state that now surrounds it and,
/// if active, emits the constrained/released shock pair.
///
/// `keep_up`/`sweeping` are the regimes left upstream/downstream of the
/// collision point (or the reverse when `from_downstream` is false).
fn bottleneck_sweep(
    m: &BottleneckPayload,
    regime_up: FlowRegime,
    regime_down: FlowRegime,
    from_downstream: bool,
    fd: &FundamentalDiagram,
) -> InteractionOutcome {
    // the state that would prevail at the bottleneck if it were transparent
    let ambient = if from_downstream { regime_down } else { regime_up };
    let class = classify_bottleneck(m.free_speed, m.capacity, &ambient, fd);
    let mut items = Vec::new();
    if class.active {
        let b_state = class.upstream_state;
        let a_state = class.downstream_state;
        items.extend(wave_chain(regime_up, b_state, fd));
        items.push(LayoutItem::Survivor {
            input: if from_downstream { 0 } else { 1 },
            new_speed: class.speed,
            re_anchor: true,
            payload: Some(IpPayload::Bottleneck(BottleneckPayload {
                active: Some(BottleneckStates {
                    upstream: b_state,
                    downstream: a_state,
                }),
                ..m.clone()
            })),
        });
        items.extend(wave_chain(a_state, regime_down, fd));
    } else {
        let chain = wave_chain(regime_up, regime_down, fd);
        let input = if from_downstream { 0 } else { 1 };
        items = place_in_fan(chain, input, m, regime_up, fd);
    }
    InteractionOutcome { items }
}

/// Slots an inactive (transparent) bottleneck into a wave fan: it rides the
/// region whose adjacent wave speeds bracket `min(free_speed, stream)`.
///
/// The slot with the largest upstream-wave speed not exceeding the free
/// speed is always consistent: the marker there moves no faster than the
/// wave ahead and no slower than the wave behind.
fn place_in_fan(
    chain: Vec<LayoutItem>,
    input: usize,
    m: &BottleneckPayload,
    regime_up: FlowRegime,
    fd: &FundamentalDiagram,
) -> Vec<LayoutItem> {
    let speeds: Vec<f64> = chain
        .iter()
        .map(|item| match item {
            LayoutItem::NewShock(s) => shockwave_speed(&s.upstream, &s.downstream).unwrap_or(0.0),
            _ => unreachable!("fan contains only new shocks"),
        })
        .collect();
    let slot = speeds
        .iter()
        .take_while(|s| **s <= m.free_speed + SPEED_TOL)
        .count();
    let region = if slot == 0 {
        regime_up
    } else if let LayoutItem::NewShock(s) = &chain[slot - 1] {
        s.downstream
    } else {
        regime_up
    };
    let survivor = LayoutItem::Survivor {
        input,
        new_speed: m.free_speed.min(routing_ip_speed(&region, fd)),
        re_anchor: true,
        payload: Some(IpPayload::Bottleneck(BottleneckPayload {
            active: None,
            ..m.clone()
        })),
    };
    let mut items = Vec::with_capacity(chain.len() + 1);
    items.extend(chain.iter().take(slot).cloned());
    items.push(survivor);
    items.extend(chain.iter().skip(slot).cloned());
    items
}
