//! The two-phase averaging protocol.
//!
//! Inner phase, per outer iteration:
//! 1. a node of the first square picks the averaging direction;
//! 2. a token walks the first column (row) electing one head per square;
//! 3. each head grows a route through its row (column), one uniformly chosen
//!    node per square, relays a running sum to the far end, and the far end
//!    sends `m` copies of the noisy route average back.
//!
//! The outer phase then mixes each route node's noisy estimate into its
//! value with step `eps'(tau) = 1 / (lambda2_hint * (tau + 1/delta))`.
//!
//! On the cycle the only route is the whole ring starting at node 0.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channel::{transmit, NoiseModel, RandomStream};
use crate::graph::{self, Graph, SquareIndex, Topology};
use crate::metrics::{RunTrace, Snapshot};
use crate::{Error, Result};

/// Averaging direction: `-1` horizontal, `+1` vertical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Horizontal,
    Vertical,
}

impl Direction {
    pub fn zeta(&self) -> i8 {
        match self {
            Direction::Horizontal => -1,
            Direction::Vertical => 1,
        }
    }

    /// Square holding the `k`-th node (1-based) of the route in `lane`.
    pub fn square(&self, lane: usize, k: usize) -> SquareIndex {
        match self {
            Direction::Horizontal => SquareIndex::new(k, lane),
            Direction::Vertical => SquareIndex::new(lane, k),
        }
    }

    pub fn lane_of(&self, sq: SquareIndex) -> (usize, usize) {
        match self {
            Direction::Horizontal => (sq.j, sq.i),
            Direction::Vertical => (sq.i, sq.j),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisseminationMode {
    /// Relay `m` copies hop by hop; `O(m^2)` transmissions per route.
    ExplicitMessages,
    /// Draw each node's relay noise directly with the same marginal variance.
    AggregateNoise,
}

impl DisseminationMode {
    pub fn tag(&self) -> &'static str {
        match self {
            DisseminationMode::ExplicitMessages => "explicit",
            DisseminationMode::AggregateNoise => "aggregate",
        }
    }
}

impl fmt::Display for DisseminationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for DisseminationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit" | "explicit-messages" => Ok(DisseminationMode::ExplicitMessages),
            "aggregate" | "aggregate-noise" => Ok(DisseminationMode::AggregateNoise),
            other => Err(Error::invalid(format!(
                "unknown dissemination mode `{other}` (expected explicit or aggregate)"
            ))),
        }
    }
}

/// Ordered route `s_1 -> s_2 -> ... -> s_m`, head first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    pub nodes: Vec<usize>,
}

impl Route {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerRoundOutcome {
    pub direction: Direction,
    pub routes: Vec<Route>,
    /// `gamma_ij(M)` for route nodes, `None` elsewhere.
    pub path_estimates: Vec<Option<f64>>,
    /// Noiseless route averages, for diagnostics.
    pub route_means: Vec<f64>,
    /// `eta_j` as computed by each route's last node.
    pub etas: Vec<f64>,
    pub messages_used: u64,
}

/// Which outer iterations get a snapshot. `tau = 0` and the final iteration
/// are always recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnapshotSchedule {
    /// Every iteration up to 100, then every 10th.
    Standard,
    Every(usize),
}

impl SnapshotSchedule {
    pub fn records(&self, tau: usize, max_outer: usize) -> bool {
        if tau == 0 || tau == max_outer {
            return true;
        }
        match *self {
            SnapshotSchedule::Standard => tau <= 100 || tau.is_multiple_of(10),
            SnapshotSchedule::Every(k) => tau.is_multiple_of(k.max(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub delta: f64,
    pub sigma2: f64,
    pub max_outer: usize,
    pub dissemination_mode: DisseminationMode,
    pub lambda2_hint: f64,
    pub record: SnapshotSchedule,
    /// Keep full theta vectors in snapshots.
    pub keep_theta: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            sigma2: 1.0,
            max_outer: 200,
            dissemination_mode: DisseminationMode::AggregateNoise,
            lambda2_hint: 1.0,
            record: SnapshotSchedule::Standard,
            keep_theta: false,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        check_delta(self.delta)?;
        NoiseModel::new(self.sigma2)?;
        check_hint(self.lambda2_hint)?;
        if self.max_outer < 1 {
            return Err(Error::invalid("max_outer must be >= 1"));
        }
        if let SnapshotSchedule::Every(0) = self.record {
            return Err(Error::invalid("snapshot stride must be >= 1"));
        }
        Ok(())
    }

    pub fn noise(&self) -> Result<NoiseModel> {
        NoiseModel::new(self.sigma2)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 0.5 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "delta must be in (0, 1/2), got {delta}"
        )))
    }
}

fn check_hint(hint: f64) -> Result<()> {
    if hint.is_finite() && hint > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "lambda2_hint must be positive, got {hint}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterState {
    pub tau: usize,
    pub theta: Vec<f64>,
    pub delta: f64,
    pub lambda2_hint: f64,
}

impl OuterState {
    pub fn new(theta: Vec<f64>, delta: f64, lambda2_hint: f64) -> Result<Self> {
        check_delta(delta)?;
        check_hint(lambda2_hint)?;
        Ok(Self {
            tau: 0,
            theta,
            delta,
            lambda2_hint,
        })
    }

    pub fn step_size(&self) -> f64 {
        self.lambda2_hint.recip() / (self.tau as f64 + self.delta.recip())
    }
}

/// Step 1. The cycle has a single direction and consumes no randomness.
pub fn choose_direction(topology: Topology, rng: &mut RandomStream) -> Direction {
    match topology {
        Topology::Cycle => Direction::Horizontal,
        _ if rng.coin() => Direction::Vertical,
        _ => Direction::Horizontal,
    }
}

fn require_regular(g: &Graph) -> Result<()> {
    if g.is_regular() {
        Ok(())
    } else {
        Err(Error::ProtocolPrecondition(
            "every partition square must contain a node".into(),
        ))
    }
}

/// Step 2. One head per square of the first column (horizontal) or first
/// row (vertical), each picked uniformly by the token holder below/left of it.
pub fn elect_heads(g: &Graph, direction: Direction, rng: &mut RandomStream) -> Result<Vec<usize>> {
    if g.topology() == Topology::Cycle {
        return Ok(vec![0]);
    }
    require_regular(g)?;
    let heads = (1..=g.m())
        .map(|lane| {
            let members = g.nodes_in_square(direction.square(lane, 1));
            members[rng.index(members.len())]
        })
        .collect();
    Ok(heads)
}

/// Token hops used by [`elect_heads`].
pub fn token_messages(g: &Graph) -> u64 {
    match g.topology() {
        Topology::Cycle => 0,
        _ => g.m() as u64 - 1,
    }
}

/// Step 3a. Route from `head` across its row (column), one uniformly chosen
/// node per square.
pub fn establish_route(
    g: &Graph,
    head: usize,
    direction: Direction,
    rng: &mut RandomStream,
) -> Result<Route> {
    if g.topology() == Topology::Cycle {
        let n = g.n();
        return Ok(Route {
            nodes: (0..n).map(|k| (head + k) % n).collect(),
        });
    }
    let (lane, pos) = direction.lane_of(g.square_of(head));
    if pos != 1 {
        return Err(Error::ProtocolPrecondition(format!(
            "head {head} is not in the first square of its lane"
        )));
    }
    let mut nodes = Vec::with_capacity(g.m());
    nodes.push(head);
    for k in 2..=g.m() {
        let members = g.nodes_in_square(direction.square(lane, k));
        if members.is_empty() {
            return Err(Error::ProtocolPrecondition(format!(
                "empty square on lane {lane}"
            )));
        }
        nodes.push(members[rng.index(members.len())]);
    }
    Ok(Route { nodes })
}

/// Step 3b. Running-sum relay towards the last node; returns
/// `eta = gamma_m / m` and the number of link transmissions.
pub fn forward_average(
    route: &Route,
    theta: &[f64],
    noise: &NoiseModel,
    rng: &mut RandomStream,
) -> (f64, u64) {
    let m = route.len();
    let mut carried = theta[route.nodes[0]];
    for &node in &route.nodes[1..] {
        carried = transmit(carried, noise, rng) + theta[node];
    }
    (carried / m as f64, m as u64 - 1)
}

/// Backward transmissions used by [`disseminate`] for a route of `m` nodes.
pub fn backward_messages(m: usize) -> u64 {
    (m * m.saturating_sub(1)) as u64
}

/// Step 3c. Every route position `i` (head first) receives its estimate of
/// the route average. Node `s_i` sees `m` copies of `eta`, each having
/// crossed `m - i` noisy hops, and averages them; the last node keeps `eta`.
pub fn disseminate(
    route: &Route,
    eta: f64,
    noise: &NoiseModel,
    rng: &mut RandomStream,
    mode: DisseminationMode,
) -> Vec<f64> {
    let m = route.len();
    if m == 0 {
        return Vec::new();
    }
    let mut gamma = vec![0.0; m];
    match mode {
        DisseminationMode::ExplicitMessages => {
            for _ in 0..m {
                let mut copy = eta;
                for pos in (0..m - 1).rev() {
                    copy = transmit(copy, noise, rng);
                    gamma[pos] += copy;
                }
            }
            for g in &mut gamma[..m - 1] {
                *g /= m as f64;
            }
        }
        DisseminationMode::AggregateNoise => {
            let sigma2 = noise.variance();
            for (pos, g) in gamma.iter_mut().enumerate() {
                let hops = (m - 1 - pos) as f64;
                let sd = (hops * sigma2 / m as f64).sqrt();
                *g = eta + sd * rng.standard_normal();
            }
        }
    }
    gamma[m - 1] = eta;
    gamma
}

/// Wall-clock inner rounds `M`: token `m - 1`, forward `m - 1`, backward
/// `2m - 2`, routes pipelined. The cycle has no token phase.
pub fn inner_rounds(g: &Graph) -> usize {
    match g.topology() {
        Topology::Cycle => 3 * g.n() - 3,
        _ => 4 * g.m() - 4,
    }
}

/// Route selection only (steps 1 to 3a), as used for estimating `E[W]`.
pub fn sample_routes(g: &Graph, rng: &mut RandomStream) -> Result<(Direction, Vec<Route>)> {
    let direction = choose_direction(g.topology(), rng);
    let heads = elect_heads(g, direction, rng)?;
    let routes = heads
        .into_iter()
        .map(|h| establish_route(g, h, direction, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((direction, routes))
}

pub fn run_inner_phase(
    g: &Graph,
    theta: &[f64],
    noise: &NoiseModel,
    mode: DisseminationMode,
    rng: &mut RandomStream,
) -> Result<InnerRoundOutcome> {
    if theta.len() != g.n() {
        return Err(Error::invalid(format!(
            "theta has length {}, graph has {} nodes",
            theta.len(),
            g.n()
        )));
    }
    let (direction, routes) = sample_routes(g, rng)?;
    let mut messages = token_messages(g);
    let mut path_estimates = vec![None; g.n()];
    let mut route_means = Vec::with_capacity(routes.len());
    let mut etas = Vec::with_capacity(routes.len());
    for route in &routes {
        let (eta, forward) = forward_average(route, theta, noise, rng);
        let gamma = disseminate(route, eta, noise, rng, mode);
        messages += forward + backward_messages(route.len());
        for (&node, value) in route.nodes.iter().zip(gamma) {
            path_estimates[node] = Some(value);
        }
        route_means.push(route.nodes.iter().map(|&u| theta[u]).sum::<f64>() / route.len() as f64);
        etas.push(eta);
    }
    Ok(InnerRoundOutcome {
        direction,
        routes,
        path_estimates,
        route_means,
        etas,
        messages_used: messages,
    })
}

/// `eps'(tau) = 1 / (lambda2_hint * (tau + 1/delta))`.
pub fn step_size(tau: usize, delta: f64, lambda2_hint: f64) -> Result<f64> {
    check_delta(delta)?;
    check_hint(lambda2_hint)?;
    Ok(1.0 / (lambda2_hint * (tau as f64 + 1.0 / delta)))
}

/// Route nodes move to `(1 - eps') theta + eps' gamma`; others keep their value.
pub fn outer_update(mut state: OuterState, outcome: &InnerRoundOutcome) -> Result<OuterState> {
    let eps = step_size(state.tau, state.delta, state.lambda2_hint)?;
    apply_estimates(&mut state.theta, &outcome.path_estimates, eps)?;
    state.tau += 1;
    Ok(state)
}

/// The scalar update with an explicit step size.
pub fn apply_estimates(theta: &mut [f64], estimates: &[Option<f64>], eps: f64) -> Result<()> {
    if theta.len() != estimates.len() {
        return Err(Error::invalid(format!(
            "theta has length {}, outcome covers {} nodes",
            theta.len(),
            estimates.len()
        )));
    }
    for (t, est) in theta.iter_mut().zip(estimates) {
        if let Some(gamma) = est {
            *t = (1.0 - eps) * *t + eps * gamma;
        }
    }
    Ok(())
}

/// Full simulation of one sample path.
pub fn run(
    g: &Graph,
    theta0: &[f64],
    config: &ProtocolConfig,
    rng: &mut RandomStream,
) -> Result<RunTrace> {
    config.validate()?;
    require_regular(g)?;
    if !graph::is_connected(g) {
        return Err(Error::DisconnectedGraph);
    }
    if theta0.len() != g.n() {
        return Err(Error::invalid(format!(
            "theta0 has length {}, graph has {} nodes",
            theta0.len(),
            g.n()
        )));
    }
    let noise = config.noise()?;
    let theta_bar = crate::metrics::sample_mean(theta0);
    let mut state = OuterState::new(theta0.to_vec(), config.delta, config.lambda2_hint)?;
    let mut transmissions = 0u64;
    let mut snapshots = vec![Snapshot::capture(
        0,
        0,
        &state.theta,
        theta_bar,
        config.keep_theta,
    )];
    while state.tau < config.max_outer {
        let outcome = run_inner_phase(g, &state.theta, &noise, config.dissemination_mode, rng)?;
        transmissions += outcome.messages_used;
        state = outer_update(state, &outcome)?;
        if config.record.records(state.tau, config.max_outer) {
            snapshots.push(Snapshot::capture(
                state.tau,
                transmissions,
                &state.theta,
                theta_bar,
                config.keep_theta,
            ));
        }
    }
    Ok(RunTrace {
        sample_path_id: rng.stream_id(),
        n: g.n(),
        theta_bar,
        inner_rounds: inner_rounds(g),
        topology: g.topology(),
        config: config.clone(),
        snapshots,
    })
}
