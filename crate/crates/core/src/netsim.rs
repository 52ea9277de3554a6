//! Simulated neighbor-to-neighbor message bus with latency, jitter and loss.
//!
//! Times are in seconds on the bus clock; link parameters are in
//! milliseconds. All randomness comes from one seeded stream, and every
//! send consumes exactly two draws so that changing a drop probability does
//! not shift the draws of later messages.

use std::io::{self, Write};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admm::{AdmmMessage, MessageKind};
use crate::model::CouplingGraph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("agents {0} and {1} are not neighbors")]
    NotNeighbors(usize, usize),
    #[error("invalid link profile: {0}")]
    InvalidProfile(String),
    #[error("deadline {deadline} lies before the current time {now}")]
    DeadlineInPast { deadline: f64, now: f64 },
}

/// Extra delay added on top of the base latency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Jitter {
    #[default]
    None,
    /// Uniform on `[0, max_ms]`.
    Uniform { max_ms: f64 },
    /// Pareto tail: `scale_ms · (U^(−1/shape) − 1)`, capped at `cap_ms`.
    Pareto { scale_ms: f64, shape: f64, cap_ms: f64 },
}

impl Jitter {
    fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidProfile(m.into()));
        match *self {
            Jitter::None => Ok(()),
            Jitter::Uniform { max_ms } if !(max_ms >= 0.0) => bad("uniform jitter bound must be nonnegative"),
            Jitter::Pareto { scale_ms, shape, cap_ms } if !(scale_ms >= 0.0 && shape > 0.0 && cap_ms >= 0.0) => {
                bad("pareto jitter needs nonnegative scale and cap and a positive shape")
            }
            _ => Ok(()),
        }
    }

    /// Jitter in milliseconds for a uniform draw `u ∈ [0, 1)`.
    fn sample(&self, u: f64) -> f64 {
        match *self {
            Jitter::None => 0.0,
            Jitter::Uniform { max_ms } => u * max_ms,
            Jitter::Pareto { scale_ms, shape, cap_ms } => {
                let tail = (1.0 - u).max(f64::MIN_POSITIVE).powf(-1.0 / shape) - 1.0;
                (scale_ms * tail).min(cap_ms)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkParameters {
    pub base_latency_ms: f64,
    #[serde(default)]
    pub jitter: Jitter,
    #[serde(default)]
    pub drop_probability: f64,
}

impl LinkParameters {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.base_latency_ms >= 0.0) {
            return Err(NetError::InvalidProfile("latency must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(NetError::InvalidProfile("drop probability must lie in [0, 1]".into()));
        }
        self.jitter.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkOverride {
    pub from: usize,
    pub to: usize,
    pub link: LinkParameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkProfile {
    pub name: String,
    pub default: LinkParameters,
    #[serde(default)]
    pub overrides: Vec<LinkOverride>,
}

impl LinkProfile {
    /// Wired-like link: 0.1 ms, no jitter, no loss.
    pub fn offboard() -> Self {
        Self {
            name: "offboard".into(),
            default: LinkParameters { base_latency_ms: 0.1, jitter: Jitter::None, drop_probability: 0.0 },
            overrides: Vec::new(),
        }
    }

    /// Wireless-like link: 3 ms base, heavy-tailed jitter, 0.5 % loss.
    pub fn onboard() -> Self {
        Self {
            name: "onboard".into(),
            default: LinkParameters {
                base_latency_ms: 3.0,
                jitter: Jitter::Pareto { scale_ms: 1.0, shape: 1.5, cap_ms: 60.0 },
                drop_probability: 0.005,
            },
            overrides: Vec::new(),
        }
    }

    /// Instantaneous, lossless delivery.
    pub fn ideal() -> Self {
        Self {
            name: "ideal".into(),
            default: LinkParameters { base_latency_ms: 0.0, jitter: Jitter::None, drop_probability: 0.0 },
            overrides: Vec::new(),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "offboard" => Some(Self::offboard()),
            "onboard" => Some(Self::onboard()),
            "ideal" => Some(Self::ideal()),
            _ => None,
        }
    }

    pub fn with_drop_probability(mut self, p: f64) -> Self {
        self.default.drop_probability = p;
        for o in &mut self.overrides {
            o.link.drop_probability = p;
        }
        self
    }

    pub fn validate(&self) -> Result<(), NetError> {
        self.default.validate()?;
        self.overrides.iter().try_for_each(|o| o.link.validate())
    }

    pub fn link(&self, from: usize, to: usize) -> &LinkParameters {
        self.overrides.iter().find(|o| o.from == from && o.to == to).map_or(&self.default, |o| &o.link)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusEvent {
    pub send_time: f64,
    /// `None` when the message was dropped.
    pub deliver_time: Option<f64>,
    pub message: AdmmMessage,
    /// Sequence number of the send; breaks delivery-time ties.
    pub index: u64,
}

impl BusEvent {
    pub fn dropped(&self) -> bool {
        self.deliver_time.is_none()
    }

    pub fn record(&self) -> BusRecord {
        let m = &self.message;
        BusRecord {
            send_time: self.send_time,
            deliver_time: self.deliver_time,
            sender: m.sender,
            receiver: m.receiver,
            kind: m.kind,
            k: m.k,
            l: m.l,
            index: self.index,
        }
    }
}

/// Log entry of one send, without the payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusRecord {
    pub send_time: f64,
    pub deliver_time: Option<f64>,
    pub sender: usize,
    pub receiver: usize,
    pub kind: MessageKind,
    pub k: u64,
    pub l: u64,
    pub index: u64,
}

impl BusRecord {
    pub fn dropped(&self) -> bool {
        self.deliver_time.is_none()
    }
}

/// What a receiver waits for: the message of `kind` from `sender` carrying
/// tag `(k, l)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expected {
    pub sender: usize,
    pub kind: MessageKind,
    pub k: u64,
    pub l: u64,
}

/// A delivered message and its arrival time.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub message: AdmmMessage,
    pub deliver_time: f64,
}

impl Delivery {
    /// Whether the delivery carries exactly the expected tag.
    pub fn is_current(&self, e: &Expected) -> bool {
        self.message.k == e.k && self.message.l == e.l
    }
}

#[derive(Debug)]
pub struct Bus {
    graph: CouplingGraph,
    profile: LinkProfile,
    rng: ChaCha8Rng,
    pending: Vec<Vec<BusEvent>>,
    log: Vec<BusRecord>,
    sent: u64,
}

impl Bus {
    pub fn new(graph: CouplingGraph, profile: LinkProfile, seed: u64) -> Result<Self, NetError> {
        profile.validate()?;
        let n = graph.agent_count();
        Ok(Self { graph, profile, rng: ChaCha8Rng::seed_from_u64(seed), pending: vec![Vec::new(); n], log: Vec::new(), sent: 0 })
    }

    pub fn profile(&self) -> &LinkProfile {
        &self.profile
    }

    pub fn send(&mut self, message: AdmmMessage, now: f64) -> Result<BusEvent, NetError> {
        if !self.graph.has_edge(message.sender, message.receiver) {
            return Err(NetError::NotNeighbors(message.sender, message.receiver));
        }
        let link = self.profile.link(message.sender, message.receiver);
        let drop_draw: f64 = self.rng.random();
        let jitter_draw: f64 = self.rng.random();
        let delay_ms = link.base_latency_ms + link.jitter.sample(jitter_draw);
        let deliver_time = (drop_draw >= link.drop_probability || link.drop_probability == 0.0).then(|| now + 1e-3 * delay_ms);
        let event = BusEvent { send_time: now, deliver_time, message, index: self.sent };
        self.sent += 1;
        if !event.dropped() {
            self.pending[event.message.receiver].push(event.clone());
        }
        self.log.push(event.record());
        Ok(event)
    }

    /// Takes, for every expected descriptor, the newest delivered message
    /// from that sender and kind whose tag does not exceed the expected one.
    /// Older messages of the same stream are discarded; messages with a
    /// later tag or a later arrival stay queued.
    pub fn receive_until(&mut self, agent: usize, deadline: f64, expected: &[Expected]) -> Vec<Option<Delivery>> {
        let queue = &mut self.pending[agent];
        expected
            .iter()
            .map(|e| {
                let matches = |ev: &BusEvent| {
                    ev.message.sender == e.sender
                        && ev.message.kind == e.kind
                        && (ev.message.k, ev.message.l) <= (e.k, e.l)
                        && ev.deliver_time.is_some_and(|t| t <= deadline)
                };
                let best = queue
                    .iter()
                    .filter(|ev| matches(ev))
                    .max_by(|a, b| (a.message.k, a.message.l, a.index).cmp(&(b.message.k, b.message.l, b.index)))
                    .map(|ev| Delivery { message: ev.message.clone(), deliver_time: ev.deliver_time.expect("delivered") });
                queue.retain(|ev| !matches(ev));
                best
            })
            .collect()
    }

    /// Earliest delivery time among queued messages for `agent`.
    pub fn next_delivery(&self, agent: usize) -> Option<f64> {
        self.pending[agent].iter().filter_map(|e| e.deliver_time).min_by(f64::total_cmp)
    }

    pub fn queued(&self, agent: usize) -> usize {
        self.pending[agent].len()
    }

    pub fn log(&self) -> &[BusRecord] {
        &self.log
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn dropped(&self) -> usize {
        self.log.iter().filter(|e| e.dropped()).count()
    }

    /// CSV with one row per send: `send_time,deliver_time,sender,receiver,kind,k,l,dropped`.
    pub fn write_csv<W: Write>(&self, out: W) -> io::Result<()> {
        write_log_csv(&self.log, out)
    }
}

/// Writes send records as CSV: `send_time,deliver_time,sender,receiver,kind,k,l,dropped`.
pub fn write_log_csv<W: Write>(records: &[BusRecord], mut out: W) -> io::Result<()> {
    writeln!(out, "send_time,deliver_time,sender,receiver,kind,k,l,dropped")?;
    for e in records {
        let deliver = e.deliver_time.map_or(String::new(), |t| format!("{t:.9}"));
        writeln!(out, "{:.9},{},{},{},{},{},{},{}", e.send_time, deliver, e.sender, e.receiver, e.kind.name(), e.k, e.l, e.dropped() as u8)?;
    }
    Ok(())
}

/// Bus shared between concurrently running agents.
pub type SharedBus = Arc<Mutex<Bus>>;

/// Wait budget in seconds: at most `max_wait` per receive and never past
/// `fraction · dt` after the start of the control step.
pub fn deadline_policy(elapsed: f64, dt: f64, max_wait: f64, fraction: f64) -> f64 {
    max_wait.min((fraction * dt - elapsed).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(sender: usize, receiver: usize, k: u64, l: u64) -> AdmmMessage {
        AdmmMessage { kind: MessageKind::Average, k, l, sender, receiver, payload: vec![l as f64] }
    }

    fn exp(sender: usize, k: u64, l: u64) -> Expected {
        Expected { sender, kind: MessageKind::Average, k, l }
    }

    fn fixed(latency_ms: f64, drop: f64) -> LinkProfile {
        LinkProfile {
            name: "test".into(),
            default: LinkParameters { base_latency_ms: latency_ms, jitter: Jitter::None, drop_probability: drop },
            overrides: vec![],
        }
    }

    fn bus(profile: LinkProfile) -> Bus {
        Bus::new(CouplingGraph::path(3).unwrap(), profile, 7).unwrap()
    }

    #[test]
    fn send_examples() {
        let mut b = bus(LinkProfile::ideal());
        assert_eq!(b.send(msg(0, 1, 0, 0), 0.3).unwrap().deliver_time, Some(0.3));
        let mut b = bus(fixed(0.0, 1.0));
        assert!(b.send(msg(0, 1, 0, 0), 0.3).unwrap().dropped());
        let mut b = bus(fixed(5.0, 0.0));
        let t = b.send(msg(0, 1, 0, 0), 0.1).unwrap().deliver_time.unwrap();
        assert!((t - 0.105).abs() < 1e-15);
        assert_eq!(b.send(msg(0, 2, 0, 0), 0.1), Err(NetError::NotNeighbors(0, 2)));
    }

    #[test]
    fn late_message_stays_queued() {
        let mut b = bus(fixed(5.0, 0.0));
        b.send(msg(0, 1, 0, 0), 0.0).unwrap();
        b.send(msg(2, 1, 0, 0), 0.001).unwrap();
        let got = b.receive_until(1, 0.005, &[exp(0, 0, 0), exp(2, 0, 0)]);
        assert!(got[0].is_some() && got[1].is_none());
        let got = b.receive_until(1, 0.006, &[exp(2, 0, 0)]);
        assert_eq!(got[0].as_ref().unwrap().deliver_time, 0.006);
        assert_eq!(b.queued(1), 0);
    }

    #[test]
    fn newer_tag_supersedes_and_future_tags_wait() {
        let mut b = bus(LinkProfile::ideal());
        b.send(msg(0, 1, 0, 1), 0.0).unwrap();
        b.send(msg(0, 1, 0, 2), 0.0).unwrap();
        b.send(msg(0, 1, 0, 3), 0.0).unwrap();
        let got = b.receive_until(1, 1.0, &[exp(0, 0, 2)]);
        let d = got[0].as_ref().unwrap();
        assert_eq!(d.message.l, 2);
        assert!(d.is_current(&exp(0, 0, 2)));
        assert_eq!(b.queued(1), 1);
        let got = b.receive_until(1, 1.0, &[exp(0, 0, 3)]);
        assert_eq!(got[0].as_ref().unwrap().message.l, 3);
    }

    #[test]
    fn every_send_is_delivered_once_or_dropped() {
        let mut b = bus(LinkProfile::onboard().with_drop_probability(0.3));
        for l in 0..200 {
            b.send(msg(1, 0, 0, l), l as f64 * 1e-3).unwrap();
            b.send(msg(1, 2, 0, l), l as f64 * 1e-3).unwrap();
        }
        let mut delivered = 0;
        for agent in [0, 2] {
            for l in 0..200 {
                delivered += b.receive_until(agent, 10.0, &[exp(1, 0, l)]).iter().flatten().count();
            }
            assert_eq!(b.queued(agent), 0);
        }
        assert_eq!(delivered + b.dropped(), 400);
        assert!(b.dropped() > 60 && b.dropped() < 180);
    }

    #[test]
    fn same_seed_same_log() {
        let run = || {
            let mut b = bus(LinkProfile::onboard());
            for l in 0..50 {
                b.send(msg(0, 1, 0, l), 0.0).unwrap();
            }
            let mut out = Vec::new();
            b.write_csv(&mut out).unwrap();
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn raising_drop_probability_only_adds_drops() {
        let dropped = |p: f64| {
            let mut b = bus(LinkProfile::onboard().with_drop_probability(p));
            (0..300).map(|l| b.send(msg(0, 1, 0, l), 0.0).unwrap().dropped()).collect::<Vec<_>>()
        };
        let low = dropped(0.02);
        let high = dropped(0.1);
        assert!(low.iter().zip(&high).all(|(a, b)| !a || *b));
    }

    #[test]
    fn deadline_examples() {
        assert!((deadline_policy(0.0, 0.05, 0.025, 0.75) - 0.025).abs() < 1e-15);
        assert!(deadline_policy(0.0375, 0.05, 0.025, 0.75).abs() < 1e-15);
        assert!((deadline_policy(0.1, 0.15, 0.025, 0.75) - 0.0125).abs() < 1e-12);
        assert_eq!(deadline_policy(0.2, 0.05, 0.025, 0.75), 0.0);
    }

    #[test]
    fn profiles_validate() {
        assert!(LinkProfile::offboard().validate().is_ok());
        assert!(LinkProfile::onboard().validate().is_ok());
        assert!(fixed(-1.0, 0.0).validate().is_err());
        assert!(fixed(1.0, 1.5).validate().is_err());
    }
}
