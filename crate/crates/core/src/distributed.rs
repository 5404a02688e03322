//! Index managers computing the BCI over a virtual network.
//!
//! Every peer is looked after by `r` other peers, its index managers. A
//! manager stores its subject's index and recomputes it from the latest values
//! it has heard for the subject's transaction counterparts. Values travel as
//! messages with a fixed latency on a virtual clock, so managers work on
//! stale data and the computation is an asynchronous (chaotic) iteration.
//! When nobody's value moves any more, each subject's managers are polled and
//! the answer is settled by majority vote.
//!
//! The loop is single-threaded and deterministic: one sweep over all
//! (subject, manager) slots per tick.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{PeerId, ShareMatrix};
use crate::numfmt;
use crate::solver::{self, Adjacency, BciParams, BciVector, SolverError, Stopping};

/// Stopping threshold used in place of the four-decimal rule: half a unit in the fourth decimal.
pub const FOUR_DECIMAL_EPS: f64 = 5e-5;

/// Decimals used to compare votes unless told otherwise.
pub const DEFAULT_VOTE_DECIMALS: u32 = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("replication {replication} is too large for {n} peers (at most n - 1)")]
    ReplicationTooLarge { replication: usize, n: usize },
    #[error("replication must be at least 1")]
    ZeroReplication,
    #[error("assignment covers {assignment} peers but the ledger has {ledger}")]
    AssignmentMismatch { assignment: usize, ledger: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Which peers manage which.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerAssignment {
    replication: usize,
    managers: Vec<Vec<PeerId>>,
}

impl ManagerAssignment {
    pub fn replication(&self) -> usize {
        self.replication
    }

    pub fn n(&self) -> usize {
        self.managers.len()
    }

    pub fn managers_of(&self, peer: PeerId) -> &[PeerId] {
        &self.managers[peer.0]
    }

    /// Subjects managed by `manager`, ascending.
    pub fn subjects_of(&self, manager: PeerId) -> Vec<PeerId> {
        (0..self.n())
            .filter(|&i| self.managers[i].contains(&manager))
            .map(PeerId)
            .collect()
    }
}

/// Seeded pseudo-random choice of `replication` distinct managers per peer,
/// never the peer itself.
pub fn assign_managers(n: usize, replication: usize, seed: u64) -> Result<ManagerAssignment, DistError> {
    if replication == 0 {
        return Err(DistError::ZeroReplication);
    }
    if replication + 1 > n {
        return Err(DistError::ReplicationTooLarge { replication, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let managers = (0..n)
        .map(|i| {
            rand::seq::index::sample(&mut rng, n - 1, replication)
                .into_iter()
                .map(|k| PeerId(if k >= i { k + 1 } else { k }))
                .collect()
        })
        .collect();
    Ok(ManagerAssignment {
        replication,
        managers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    QueryBci,
    BciReply,
    UpdateNotify,
    VoteRequest,
    VoteReply,
}

impl MessageKind {
    pub const ALL: [MessageKind; 5] = [
        MessageKind::QueryBci,
        MessageKind::BciReply,
        MessageKind::UpdateNotify,
        MessageKind::VoteRequest,
        MessageKind::VoteReply,
    ];

    pub fn carries_value(self) -> bool {
        matches!(
            self,
            MessageKind::BciReply | MessageKind::VoteReply | MessageKind::UpdateNotify
        )
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Sender or receiver of a message: a peer acting as an index manager, or a
/// peer acting on its own behalf.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Manager(PeerId),
    Peer(PeerId),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Manager(p) => write!(f, "m{p}"),
            Endpoint::Peer(p) => write!(f, "p{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManagerMessage {
    pub kind: MessageKind,
    pub from: Endpoint,
    pub to: Endpoint,
    pub subject: PeerId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// Tick at which the message was sent.
    pub virtual_time: u64,
}

impl ManagerMessage {
    /// Builds a message, attaching `value` only for the kinds that carry one.
    pub fn new(
        kind: MessageKind,
        from: Endpoint,
        to: Endpoint,
        subject: PeerId,
        value: f64,
        tick: u64,
    ) -> Self {
        let value = kind.carries_value().then_some(value);
        Self {
            kind,
            from,
            to,
            subject,
            value,
            virtual_time: tick,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.value.is_some() == self.kind.carries_value()
    }
}

/// Order in which (subject, manager) slots recompute within a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    RoundRobin,
    /// Fresh shuffle every sweep from this seed.
    RandomOrder(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistOptions {
    pub schedule: Schedule,
    pub delay_ticks: u64,
    pub vote_decimals: u32,
    /// Additive offset applied to every vote a given manager casts.
    pub vote_perturbation: BTreeMap<PeerId, f64>,
    pub record_trace: bool,
}

impl Default for DistOptions {
    fn default() -> Self {
        Self {
            schedule: Schedule::RoundRobin,
            delay_ticks: 0,
            vote_decimals: DEFAULT_VOTE_DECIMALS,
            vote_perturbation: BTreeMap::new(),
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", content = "value", rename_all = "snake_case")]
pub enum VoteOutcome {
    Agreed(#[serde(serialize_with = "numfmt::ser_f64")] f64),
    Majority(#[serde(serialize_with = "numfmt::ser_f64")] f64),
    NoMajority,
}

/// Rounds every report to `rounding_decimals` and looks for agreement.
pub fn resolve_conflict(reports: &[(PeerId, f64)], rounding_decimals: u32) -> VoteOutcome {
    let Some((key, count)) = majority_key(reports, rounding_decimals) else {
        return VoteOutcome::NoMajority;
    };
    let value = key as f64 / 10f64.powi(rounding_decimals as i32);
    if count == reports.len() {
        VoteOutcome::Agreed(value)
    } else if 2 * count > reports.len() {
        VoteOutcome::Majority(value)
    } else {
        VoteOutcome::NoMajority
    }
}

fn vote_key(v: f64, decimals: u32) -> i64 {
    (v * 10f64.powi(decimals as i32)).round() as i64
}

/// Most common rounded value and its count; ties go to the smaller value.
fn majority_key(reports: &[(PeerId, f64)], decimals: u32) -> Option<(i64, usize)> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &(_, v) in reports {
        *counts.entry(vote_key(v, decimals)).or_insert(0) += 1;
    }
    counts.into_iter().fold(None, |best, (k, c)| match best {
        Some((_, bc)) if bc >= c => best,
        _ => Some((k, c)),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VoteTally {
    pub agreed: usize,
    pub majority: usize,
    pub no_majority: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistRunReport {
    pub x: BciVector,
    pub rounds: usize,
    pub converged: bool,
    pub messages_total: u64,
    pub messages_by_kind: BTreeMap<MessageKind, u64>,
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub divergence_from_centralized: f64,
    pub votes: VoteTally,
    pub final_tick: u64,
}

impl DistRunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Writes messages as `tick,kind,from,to,subject,value`.
pub fn write_trace_csv<W: Write>(writer: W, trace: &[ManagerMessage]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["tick", "kind", "from", "to", "subject", "value"])?;
    for m in trace {
        out.write_record([
            m.virtual_time.to_string(),
            m.kind.to_string(),
            m.from.to_string(),
            m.to.to_string(),
            m.subject.to_string(),
            m.value.map(numfmt::sig17).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Runs the managers to quiescence with default options.
pub fn run_distributed(
    ledger: &ShareMatrix,
    params: &BciParams,
    assignment: &ManagerAssignment,
    schedule: Schedule,
    delay_ticks: u64,
) -> Result<DistRunReport, DistError> {
    let options = DistOptions {
        schedule,
        delay_ticks,
        ..DistOptions::default()
    };
    run_distributed_with(ledger, params, assignment, &options).map(|(report, _)| report)
}

/// Runs the managers to quiescence, returning the report and, when
/// requested, every message sent.
pub fn run_distributed_with(
    ledger: &ShareMatrix,
    params: &BciParams,
    assignment: &ManagerAssignment,
    options: &DistOptions,
) -> Result<(DistRunReport, Vec<ManagerMessage>), DistError> {
    params.validate()?;
    if assignment.n() != ledger.n() {
        return Err(DistError::AssignmentMismatch {
            assignment: assignment.n(),
            ledger: ledger.n(),
        });
    }
    let central = solver::solve(ledger, params)?;
    let mut net = Network::new(ledger, params, assignment, options);
    let (rounds, converged) = net.iterate();
    let (x, votes) = net.poll_and_vote();
    let divergence_from_centralized = x.max_abs_diff(&central.x);
    let report = DistRunReport {
        x,
        rounds,
        converged,
        messages_total: net.sent,
        messages_by_kind: net.by_kind.clone(),
        divergence_from_centralized,
        votes,
        final_tick: net.tick,
    };
    Ok((report, net.trace))
}

struct Slot {
    subject: usize,
    manager: usize,
    value: f64,
    published: f64,
    computed: bool,
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct Due {
    at: u64,
    seq: u64,
}

struct Network<'a> {
    adjacency: Adjacency,
    neighbors: Vec<Vec<usize>>,
    assignment: &'a ManagerAssignment,
    options: &'a DistOptions,
    alpha: f64,
    eps: f64,
    max_sweeps: usize,
    slots: Vec<Slot>,
    /// `views[m][j]`: latest value manager `m` has received for peer `j`.
    views: Vec<Vec<Option<f64>>>,
    queue: BinaryHeap<Reverse<Due>>,
    pending: BTreeMap<u64, ManagerMessage>,
    votes: BTreeMap<usize, Vec<(PeerId, f64)>>,
    tick: u64,
    seq: u64,
    sent: u64,
    by_kind: BTreeMap<MessageKind, u64>,
    trace: Vec<ManagerMessage>,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Network<'a> {
    fn new(
        ledger: &ShareMatrix,
        params: &BciParams,
        assignment: &'a ManagerAssignment,
        options: &'a DistOptions,
    ) -> Self {
        let n = ledger.n();
        let adjacency = Adjacency::new(ledger);
        let neighbors = (0..n)
            .map(|i| {
                let mut v: Vec<usize> = adjacency.uploads[i]
                    .iter()
                    .chain(&adjacency.downloads[i])
                    .map(|&(j, _)| j)
                    .collect();
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();
        let neutral = 1.0 - params.alpha / 2.0;
        let slots = (0..n)
            .flat_map(|i| {
                assignment.managers_of(PeerId(i)).iter().map(move |m| Slot {
                    subject: i,
                    manager: m.0,
                    value: neutral,
                    published: neutral,
                    computed: false,
                })
            })
            .collect();
        let eps = match params.stopping {
            Stopping::InfNormTol(eps) => eps,
            Stopping::FourDecimalEquality => FOUR_DECIMAL_EPS,
        };
        let rng = match options.schedule {
            Schedule::RoundRobin => None,
            Schedule::RandomOrder(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        let mut by_kind = BTreeMap::new();
        for kind in MessageKind::ALL {
            by_kind.insert(kind, 0);
        }
        Self {
            adjacency,
            neighbors,
            assignment,
            options,
            alpha: params.alpha,
            eps,
            max_sweeps: params.max_iterations,
            slots,
            views: vec![vec![None; n]; n],
            queue: BinaryHeap::new(),
            pending: BTreeMap::new(),
            votes: BTreeMap::new(),
            tick: 0,
            seq: 0,
            sent: 0,
            by_kind,
            trace: Vec::new(),
            rng,
        }
    }

    fn send(&mut self, kind: MessageKind, from: Endpoint, to: Endpoint, subject: usize, value: f64) {
        let msg = ManagerMessage::new(kind, from, to, PeerId(subject), value, self.tick);
        debug_assert!(msg.is_well_formed());
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Due {
            at: self.tick + self.options.delay_ticks,
            seq,
        }));
        self.sent += 1;
        *self.by_kind.entry(kind).or_insert(0) += 1;
        if self.options.record_trace {
            self.trace.push(msg.clone());
        }
        self.pending.insert(seq, msg);
    }

    /// Current value held by `manager` for `subject`, if it manages it.
    fn stored_value(&self, manager: usize, subject: usize) -> Option<f64> {
        let r = self.assignment.replication();
        self.slots[subject * r..(subject + 1) * r]
            .iter()
            .find(|s| s.manager == manager)
            .map(|s| s.value)
    }

    fn deliver_due(&mut self) {
        while let Some(Reverse(due)) = self.queue.peek() {
            if due.at > self.tick {
                break;
            }
            let Reverse(due) = self.queue.pop().expect("peeked");
            let msg = self.pending.remove(&due.seq).expect("pending message");
            self.handle(msg);
        }
    }

    fn handle(&mut self, msg: ManagerMessage) {
        let subject = msg.subject.0;
        match (msg.kind, msg.to) {
            (MessageKind::QueryBci, Endpoint::Manager(m)) => {
                let value = self
                    .stored_value(m.0, subject)
                    .expect("queried a manager of the subject");
                self.send(MessageKind::BciReply, msg.to, msg.from, subject, value);
            }
            (MessageKind::BciReply | MessageKind::UpdateNotify, Endpoint::Manager(m)) => {
                self.views[m.0][subject] = msg.value;
            }
            (MessageKind::VoteRequest, Endpoint::Manager(m)) => {
                let stored = self
                    .stored_value(m.0, subject)
                    .expect("vote asked of a manager of the subject");
                let offset = self.options.vote_perturbation.get(&m).copied().unwrap_or(0.0);
                self.send(MessageKind::VoteReply, msg.to, msg.from, subject, stored + offset);
            }
            (MessageKind::VoteReply, Endpoint::Peer(_)) => {
                let Endpoint::Manager(from) = msg.from else {
                    unreachable!("votes come from managers")
                };
                self.votes
                    .entry(subject)
                    .or_default()
                    .push((from, msg.value.expect("vote value")));
            }
            (kind, to) => unreachable!("{kind} is never addressed to {to}"),
        }
    }

    /// Each manager asks one manager of every counterpart for its current value.
    fn bootstrap(&mut self) {
        for idx in 0..self.slots.len() {
            let (subject, manager) = (self.slots[idx].subject, self.slots[idx].manager);
            for k in 0..self.neighbors[subject].len() {
                let j = self.neighbors[subject][k];
                let target = self.assignment.managers_of(PeerId(j))[0];
                self.send(
                    MessageKind::QueryBci,
                    Endpoint::Manager(PeerId(manager)),
                    Endpoint::Manager(target),
                    j,
                    0.0,
                );
            }
        }
    }

    fn publish(&mut self, idx: usize) {
        let (subject, manager, value) = (
            self.slots[idx].subject,
            self.slots[idx].manager,
            self.slots[idx].value,
        );
        self.slots[idx].published = value;
        let mut targets: Vec<usize> = self.neighbors[subject]
            .iter()
            .flat_map(|&j| self.assignment.managers_of(PeerId(j)).iter().map(|m| m.0))
            .collect();
        targets.sort_unstable();
        targets.dedup();
        for t in targets {
            self.send(
                MessageKind::UpdateNotify,
                Endpoint::Manager(PeerId(manager)),
                Endpoint::Manager(PeerId(t)),
                subject,
                value,
            );
        }
    }

    fn sweep_order(&mut self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.slots.len()).collect();
        if let Some(rng) = self.rng.as_mut() {
            order.shuffle(rng);
        }
        order
    }

    /// Sweeps until a full sweep moves no value by `eps` or more with nothing
    /// in flight. Returns the sweep count and whether that happened.
    fn iterate(&mut self) -> (usize, bool) {
        self.bootstrap();
        for sweep in 1..=self.max_sweeps {
            let mut max_change = 0.0f64;
            for idx in self.sweep_order() {
                self.deliver_due();
                let (subject, manager) = (self.slots[idx].subject, self.slots[idx].manager);
                let view = &self.views[manager];
                if self.neighbors[subject].iter().any(|&j| view[j].is_none()) {
                    continue;
                }
                let next = self
                    .adjacency
                    .update_one(subject, self.alpha, |j| view[j].expect("known"));
                let slot = &mut self.slots[idx];
                max_change = max_change.max((next - slot.value).abs());
                slot.value = next;
                slot.computed = true;
                if (next - slot.published).abs() >= self.eps {
                    self.publish(idx);
                }
            }
            let settled =
                max_change < self.eps && self.queue.is_empty() && self.slots.iter().all(|s| s.computed);
            if settled {
                return (sweep, true);
            }
            self.tick += 1;
        }
        (self.max_sweeps, false)
    }

    /// Polls every subject's managers and settles each value by vote.
    fn poll_and_vote(&mut self) -> (BciVector, VoteTally) {
        let n = self.neighbors.len();
        for i in 0..n {
            let asker = PeerId((i + 1) % n);
            for &m in self.assignment.managers_of(PeerId(i)) {
                self.send(
                    MessageKind::VoteRequest,
                    Endpoint::Peer(asker),
                    Endpoint::Manager(m),
                    i,
                    0.0,
                );
            }
        }
        while !self.queue.is_empty() {
            self.deliver_due();
            if !self.queue.is_empty() {
                self.tick += 1;
            }
        }
        let mut tally = VoteTally::default();
        let decimals = self.options.vote_decimals;
        let x = (0..n)
            .map(|i| {
                let reports = self.votes.remove(&i).unwrap_or_default();
                match resolve_conflict(&reports, decimals) {
                    VoteOutcome::Agreed(_) => tally.agreed += 1,
                    VoteOutcome::Majority(_) => tally.majority += 1,
                    VoteOutcome::NoMajority => tally.no_majority += 1,
                }
                consensus_value(&reports, decimals)
            })
            .collect();
        (BciVector::new(x), tally)
    }
}

/// Mean of the unrounded reports that fall in the most common rounded group,
/// so the vote picks the group without discarding precision. Without a strict
/// majority the median report is used.
fn consensus_value(reports: &[(PeerId, f64)], decimals: u32) -> f64 {
    let Some((key, count)) = majority_key(reports, decimals) else {
        return f64::NAN;
    };
    if 2 * count > reports.len() {
        let group: Vec<f64> = reports
            .iter()
            .map(|&(_, v)| v)
            .filter(|&v| vote_key(v, decimals) == key)
            .collect();
        return solver::compensated_sum(group.iter().copied()) / group.len() as f64;
    }
    let mut values: Vec<f64> = reports.iter().map(|&(_, v)| v).collect();
    values.sort_by(f64::total_cmp);
    values[values.len() / 2]
}
