//! Lockstep simulation of the cloud-coordinated architecture.
//!
//! Agents never talk to each other. Every three timesteps the network runs
//! one communication cycle:
//!
//! | `k mod 3`    | agents                                  | cloud                                   |
//! |--------------|-----------------------------------------|-----------------------------------------|
//! | `Update`     | take delivered `(y, mu)`, step own state | `mu_c <- [mu_c + rho g(x_c)]_+`         |
//! | `AgentSend`  | send own state (arrives next timestep)  | idle                                    |
//! | `CloudSend`  | idle                                    | ingest states, send `(y^i, mu_c)` to all |
//!
//! Messages have unit latency. The initialization handshake (state report,
//! symbolic differentiation, first broadcast) happens atomically before
//! timestep 0, so gradient step `c` executes at timestep `3c`.
//!
//! At the start of every `Update` phase the cloud's `(x_c, mu_c)` is the
//! synchronized snapshot all nodes agree on, and the sequence of snapshots is
//! exactly the centralized Uzawa sequence.

use std::collections::BTreeMap;
use std::io;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::analysis::BallMonitor;
use crate::expr::{BoundExpr, Expression};
use crate::problem::{var_name, PrimalDualPoint, Problem};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("{what}: expected length {expected}, got {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("initial multiplier {index} is negative ({value})")]
    NegativeMultiplier { index: usize, value: f64 },
    #[error("stepsize must be positive and finite, got {0}")]
    InvalidStepsize(f64),
    #[error("protocol corrupted at timestep {timestep}: {reason}")]
    Corrupted { timestep: u64, reason: String },
    #[error("non-finite state at timestep {timestep}")]
    Diverged { timestep: u64 },
    #[error("trace sink failed: {0}")]
    Sink(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Update,
    AgentSend,
    CloudSend,
}

impl Phase {
    pub fn of(timestep: u64) -> Phase {
        match timestep % 3 {
            0 => Phase::Update,
            1 => Phase::AgentSend,
            _ => Phase::CloudSend,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Update => "UPDATE",
            Phase::AgentSend => "AGENT_SEND",
            Phase::CloudSend => "CLOUD_SEND",
        }
    }
}

/// Where a multiplier vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Provenance {
    /// Shipped during the initialization handshake.
    Initial,
    /// Computed by the cloud at this timestep.
    Cloud { timestep: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    AgentToCloud { from: usize, state: f64 },
    CloudToAgent { to: usize, y: Vec<f64>, mu: Multipliers },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub payload: Payload,
    pub send_time: u64,
    pub deliver_time: u64,
}

/// The seeded pseudonymization of one agent's view of the others.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyView {
    /// True variable name to opaque token.
    pub pseudonyms: BTreeMap<String, String>,
    /// `slot_order[s]` is the (0-based) agent whose state fills slot `s` of `y`.
    pub slot_order: Vec<usize>,
    /// Token of each `y` slot, in slot order.
    pub slot_labels: Vec<String>,
    /// `dg_j/dx_i` rewritten over the tokens.
    pub partials: Vec<Expression>,
}

/// Builds agent `i`'s (0-based) relabeled view. The same `(i, seed)` always
/// yields the same bijection.
pub fn relabel_for_privacy(p: &Problem, i: usize, seed: u64) -> PrivacyView {
    let mut others: Vec<usize> = (0..p.n_agents()).filter(|&k| k != i).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    others.shuffle(&mut rng);
    let slot_labels: Vec<String> = (1..=others.len()).map(|s| format!("eta{s}")).collect();
    let pseudonyms: BTreeMap<String, String> =
        others.iter().zip(&slot_labels).map(|(&k, tok)| (var_name(k), tok.clone())).collect();
    let partials = (0..p.n_constraints()).map(|j| p.partial(j, i).rename(&pseudonyms)).collect();
    PrivacyView { pseudonyms, slot_order: others, slot_labels, partials }
}

fn plain_view(p: &Problem, i: usize) -> PrivacyView {
    let others: Vec<usize> = (0..p.n_agents()).filter(|&k| k != i).collect();
    PrivacyView {
        pseudonyms: BTreeMap::new(),
        slot_labels: others.iter().map(|&k| var_name(k)).collect(),
        slot_order: others,
        partials: (0..p.n_constraints()).map(|j| p.partial(j, i).clone()).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct AgentNode {
    id: usize,
    own_label: String,
    own_state: f64,
    last_y: Vec<f64>,
    last_mu: Multipliers,
    objective_grad: Expression,
    constraint_partials: Vec<Expression>,
    var_labels: Vec<String>,
    rho: f64,
    grad_b: BoundExpr,
    partials_b: Vec<BoundExpr>,
    scratch: Vec<f64>,
}

impl AgentNode {
    /// 0-based agent index.
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn own_state(&self) -> f64 {
        self.own_state
    }

    pub fn last_y(&self) -> &[f64] {
        &self.last_y
    }

    pub fn last_mu(&self) -> &Multipliers {
        &self.last_mu
    }

    pub fn objective_grad(&self) -> &Expression {
        &self.objective_grad
    }

    pub fn constraint_partials(&self) -> &[Expression] {
        &self.constraint_partials
    }

    /// Labels of the `y` slots as this agent sees them.
    pub fn var_labels(&self) -> &[String] {
        &self.var_labels
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Local variable labels: own label first, then the `y` slots.
    fn local_labels(&self) -> Vec<String> {
        std::iter::once(self.own_label.clone()).chain(self.var_labels.iter().cloned()).collect()
    }

    /// Evaluates `dg_j/dx_i` at this agent's best-known state vector.
    pub fn partials_at_current(&self) -> Vec<f64> {
        let mut local = Vec::with_capacity(self.last_y.len() + 1);
        local.push(self.own_state);
        local.extend_from_slice(&self.last_y);
        self.partials_b.iter().map(|d| d.eval(&local)).collect()
    }

    fn step(&mut self) {
        self.scratch.clear();
        self.scratch.push(self.own_state);
        self.scratch.extend_from_slice(&self.last_y);
        let mut acc = self.grad_b.eval(&self.scratch[..1]);
        for (m, d) in self.last_mu.values.iter().zip(&self.partials_b) {
            acc += m * d.eval(&self.scratch);
        }
        self.own_state -= self.rho * acc;
    }
}

#[derive(Debug, Clone)]
pub struct CloudNode {
    x_c: Vec<f64>,
    mu_c: Multipliers,
    rho: f64,
    constraints: Vec<Expression>,
    constraints_b: Vec<BoundExpr>,
    /// Per-agent slot order for outgoing `y` vectors.
    slot_orders: Vec<Vec<usize>>,
}

impl CloudNode {
    pub fn x_c(&self) -> &[f64] {
        &self.x_c
    }

    pub fn mu_c(&self) -> &Multipliers {
        &self.mu_c
    }

    pub fn constraints(&self) -> &[Expression] {
        &self.constraints
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    fn y_for(&self, i: usize) -> Vec<f64> {
        self.slot_orders[i].iter().map(|&k| self.x_c[k]).collect()
    }
}

/// Global lockstep state.
#[derive(Debug, Clone)]
pub struct NetworkState {
    agents: Vec<AgentNode>,
    cloud: CloudNode,
    in_flight: Vec<Message>,
    timestep: u64,
}

/// Validates inputs and performs the initialization handshake.
pub fn init_network(
    p: &Problem,
    x0: &[f64],
    mu0: &[f64],
    rho: f64,
    privacy: bool,
    seed: u64,
) -> Result<NetworkState, ProtocolError> {
    let (n, m) = (p.n_agents(), p.n_constraints());
    if x0.len() != n {
        return Err(ProtocolError::DimensionMismatch { what: "x0", expected: n, found: x0.len() });
    }
    if mu0.len() != m {
        return Err(ProtocolError::DimensionMismatch { what: "mu0", expected: m, found: mu0.len() });
    }
    if let Some((index, &value)) = mu0.iter().enumerate().find(|(_, v)| v.is_nan() || **v < 0.0) {
        return Err(ProtocolError::NegativeMultiplier { index, value });
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(ProtocolError::InvalidStepsize(rho));
    }

    // The cloud collects x0, differentiates g, and ships partials, y, mu0 and rho.
    let x_c = x0.to_vec();
    let initial_mu = Multipliers { values: mu0.to_vec(), provenance: Provenance::Initial };
    let views: Vec<PrivacyView> =
        (0..n).map(|i| if privacy { relabel_for_privacy(p, i, seed) } else { plain_view(p, i) }).collect();

    let agents = views
        .iter()
        .enumerate()
        .map(|(i, view)| {
            let own_label = var_name(i);
            let mut agent = AgentNode {
                id: i,
                own_state: x0[i],
                last_y: view.slot_order.iter().map(|&k| x_c[k]).collect(),
                last_mu: initial_mu.clone(),
                objective_grad: p.objective_grad(i).clone(),
                constraint_partials: view.partials.clone(),
                var_labels: view.slot_labels.clone(),
                rho,
                grad_b: p.objective_grad(i).bind(std::slice::from_ref(&own_label)).expect("objective is private"),
                partials_b: Vec::new(),
                scratch: Vec::with_capacity(n),
                own_label,
            };
            let labels = agent.local_labels();
            agent.partials_b =
                view.partials.iter().map(|d| d.bind(&labels).expect("partials use known labels")).collect();
            agent
        })
        .collect();

    let cloud = CloudNode {
        x_c,
        mu_c: initial_mu,
        rho,
        constraints: p.constraints().to_vec(),
        constraints_b: p.constraints().iter().map(|g| g.bind(p.var_names()).expect("validated")).collect(),
        slot_orders: views.into_iter().map(|v| v.slot_order).collect(),
    };
    Ok(NetworkState { agents, cloud, in_flight: Vec::new(), timestep: 0 })
}

impl NetworkState {
    pub fn agents(&self) -> &[AgentNode] {
        &self.agents
    }

    pub fn cloud(&self) -> &CloudNode {
        &self.cloud
    }

    pub fn in_flight(&self) -> &[Message] {
        &self.in_flight
    }

    /// Index of the next timestep to execute.
    pub fn timestep(&self) -> u64 {
        self.timestep
    }

    pub fn phase(&self) -> Phase {
        Phase::of(self.timestep)
    }

    /// The cloud's `(x_c, mu_c)`. At the start of an `Update` phase this is the
    /// synchronized iterate.
    pub fn cloud_point(&self) -> PrimalDualPoint {
        PrimalDualPoint::new(self.cloud.x_c.clone(), self.cloud.mu_c.values.clone())
    }

    /// Agent `i`'s full local state vector: `y` with its own state reinserted
    /// at slot `i`, in true variable order.
    pub fn agent_view(&self, i: usize) -> Vec<f64> {
        let agent = &self.agents[i];
        let mut out = vec![0.0; self.agents.len()];
        out[i] = agent.own_state;
        for (s, &k) in self.cloud.slot_orders[i].iter().enumerate() {
            out[k] = agent.last_y[s];
        }
        out
    }

    fn corrupted(&self, reason: impl Into<String>) -> ProtocolError {
        ProtocolError::Corrupted { timestep: self.timestep, reason: reason.into() }
    }

    fn take_due(&mut self) -> Result<Vec<Message>, ProtocolError> {
        let k = self.timestep;
        if let Some(stale) = self.in_flight.iter().find(|msg| msg.deliver_time < k) {
            return Err(self.corrupted(format!("undelivered message due at {}", stale.deliver_time)));
        }
        let (due, rest): (Vec<Message>, Vec<Message>) = self.in_flight.drain(..).partition(|msg| msg.deliver_time == k);
        self.in_flight = rest;
        Ok(due)
    }

    fn send(&mut self, payload: Payload) -> Result<(), ProtocolError> {
        let clash = self.in_flight.iter().any(|msg| match (&msg.payload, &payload) {
            (Payload::AgentToCloud { from: a, .. }, Payload::AgentToCloud { from: b, .. }) => a == b,
            (Payload::CloudToAgent { to: a, .. }, Payload::CloudToAgent { to: b, .. }) => a == b,
            _ => false,
        });
        if clash {
            return Err(self.corrupted("overlapping communication cycles"));
        }
        self.in_flight.push(Message { payload, send_time: self.timestep, deliver_time: self.timestep + 1 });
        Ok(())
    }

    /// Advances one timestep. All reads in a phase precede all writes.
    pub fn tick(&mut self) -> Result<(), ProtocolError> {
        let k = self.timestep;
        let due = self.take_due()?;
        match Phase::of(k) {
            Phase::Update => {
                for msg in due {
                    match msg.payload {
                        Payload::CloudToAgent { to, y, mu } => {
                            let agent = &mut self.agents[to];
                            agent.last_y = y;
                            agent.last_mu = mu;
                        }
                        Payload::AgentToCloud { from, .. } => {
                            return Err(self.corrupted(format!("agent {} state arrived during UPDATE", from + 1)));
                        }
                    }
                }
                self.check_synchronized()?;
                // the cloud reads x_c and mu_c, agents read only their own copies
                let g: Vec<f64> = self.cloud.constraints_b.iter().map(|g| g.eval(&self.cloud.x_c)).collect();
                let rho = self.cloud.rho;
                let next_mu: Vec<f64> =
                    self.cloud.mu_c.values.iter().zip(g).map(|(m, gj)| (m + rho * gj).max(0.0)).collect();
                for agent in &mut self.agents {
                    agent.step();
                }
                self.cloud.mu_c = Multipliers { values: next_mu, provenance: Provenance::Cloud { timestep: k } };
            }
            Phase::AgentSend => {
                if !due.is_empty() {
                    return Err(self.corrupted("delivery during AGENT_SEND"));
                }
                for i in 0..self.agents.len() {
                    let state = self.agents[i].own_state;
                    self.send(Payload::AgentToCloud { from: i, state })?;
                }
            }
            Phase::CloudSend => {
                let mut seen = vec![false; self.agents.len()];
                for msg in due {
                    match msg.payload {
                        Payload::AgentToCloud { from, state } => {
                            self.cloud.x_c[from] = state;
                            seen[from] = true;
                        }
                        Payload::CloudToAgent { to, .. } => {
                            return Err(self.corrupted(format!("cloud message to agent {} looped back", to + 1)));
                        }
                    }
                }
                if let Some(missing) = seen.iter().position(|s| !s) {
                    return Err(self.corrupted(format!("no state from agent {}", missing + 1)));
                }
                for i in 0..self.agents.len() {
                    let y = self.cloud.y_for(i);
                    let mu = self.cloud.mu_c.clone();
                    self.send(Payload::CloudToAgent { to: i, y, mu })?;
                }
            }
        }
        self.timestep += 1;
        Ok(())
    }

    /// Every node must agree on `mu` and on the state vector when an update
    /// phase begins.
    fn check_synchronized(&self) -> Result<(), ProtocolError> {
        for (i, agent) in self.agents.iter().enumerate() {
            if agent.last_mu.values != self.cloud.mu_c.values {
                return Err(self.corrupted(format!("agent {} holds stale multipliers", i + 1)));
            }
            if agent.own_state != self.cloud.x_c[i] || agent.last_y != self.cloud.y_for(i) {
                return Err(self.corrupted(format!("agent {} state view differs from the cloud", i + 1)));
            }
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.cloud.x_c.iter().chain(&self.cloud.mu_c.values).all(|v| v.is_finite())
            && self.agents.iter().all(|a| a.own_state.is_finite())
    }
}

/// One row of the per-timestep trace, describing the state after the tick
/// at `timestep`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub timestep: u64,
    pub phase: Phase,
    pub x_c: Vec<f64>,
    pub mu_c: Vec<f64>,
    pub own_states: Vec<f64>,
    /// Lyapunov value of the latest synchronized snapshot.
    pub v: Option<f64>,
    pub in_ball: Option<bool>,
}

pub trait TraceSink {
    fn record(&mut self, rec: &TraceRecord) -> io::Result<()>;
}

impl TraceSink for Vec<TraceRecord> {
    fn record(&mut self, rec: &TraceRecord) -> io::Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Discards records.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _: &TraceRecord) -> io::Result<()> {
        Ok(())
    }
}

/// The synchronized iterate seen at the start of gradient step `step`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub step: usize,
    pub timestep: u64,
    pub point: PrimalDualPoint,
}

/// Ticks `total_timesteps` times, emitting one record per tick, and returns
/// the synchronized snapshots seen along the way.
pub fn run(
    net: &mut NetworkState,
    total_timesteps: u64,
    sink: &mut dyn TraceSink,
    monitor: Option<&BallMonitor>,
) -> Result<Vec<Snapshot>, ProtocolError> {
    let mut snapshots = Vec::with_capacity((total_timesteps / 3 + 1) as usize);
    let mut latest_v: Option<f64> = None;
    for _ in 0..total_timesteps {
        let k = net.timestep;
        if Phase::of(k) == Phase::Update {
            let point = net.cloud_point();
            if let Some(mon) = monitor {
                latest_v = Some(mon.v(&point));
            }
            snapshots.push(Snapshot { step: (k / 3) as usize, timestep: k, point });
        }
        net.tick()?;
        if !net.is_finite() {
            return Err(ProtocolError::Diverged { timestep: k });
        }
        let rec = TraceRecord {
            timestep: k,
            phase: Phase::of(k),
            x_c: net.cloud.x_c.clone(),
            mu_c: net.cloud.mu_c.values.clone(),
            own_states: net.agents.iter().map(|a| a.own_state).collect(),
            v: latest_v,
            in_ball: latest_v.zip(monitor).map(|(v, mon)| mon.contains(v)),
        };
        sink.record(&rec)?;
    }
    Ok(snapshots)
}
