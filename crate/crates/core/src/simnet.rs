//! Deterministic discrete-event scheduler and simulated network.
//!
//! All coordination traffic in the simulator travels through one
//! [`Simulator`]. Time is integer milliseconds; events fire in
//! (time, insertion order), so a run is a pure function of the
//! configuration and seed. Message latency, jitter, and loss draw from
//! per-sender ChaCha streams derived by hashing (seed, node), which keeps
//! one node's traffic from perturbing another's randomness.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, BTreeSet};
use std::collections::btree_map::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::crypto::{seeded_rng, NodeId};

pub type EventId = u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetError {
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
}

/// A one-way partition window between two node sets.
#[derive(Debug, Clone)]
pub struct Partition {
    pub side_a: BTreeSet<NodeId>,
    pub side_b: BTreeSet<NodeId>,
    pub start_ms: u64,
    pub end_ms: u64,
}

impl Partition {
    fn separates(&self, src: NodeId, dst: NodeId, at_ms: u64) -> bool {
        if at_ms < self.start_ms || at_ms > self.end_ms {
            return false;
        }
        (self.side_a.contains(&src) && self.side_b.contains(&dst))
            || (self.side_b.contains(&src) && self.side_a.contains(&dst))
    }
}

#[derive(Debug, Clone)]
pub struct NetworkConfig {
    pub base_latency_ms: u64,
    pub jitter_ms: u64,
    pub drop_probability: f64,
    pub partitions: Vec<Partition>,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_latency_ms: 50,
            jitter_ms: 0,
            drop_probability: 0.0,
            partitions: Vec::new(),
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(NetError::InvalidConfig(format!(
                "drop_probability {} outside [0,1]",
                self.drop_probability
            )));
        }
        for (i, p) in self.partitions.iter().enumerate() {
            if p.end_ms < p.start_ms {
                return Err(NetError::InvalidConfig(format!(
                    "partitions[{i}]: end {} < start {}",
                    p.end_ms, p.start_ms
                )));
            }
        }
        Ok(())
    }
}

/// A timestamped network message. `payload` is opaque bytes; the harness
/// owns encoding and decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub src: NodeId,
    pub dst: NodeId,
    pub payload: Vec<u8>,
    pub send_time: u64,
    pub deliver_time: u64,
    pub size_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Delivered { deliver_time: u64 },
    Dropped,
}

/// Counters proving message conservation: sent == delivered + dropped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub bytes_sent: u64,
}

/// One processed event, recorded for replay comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub time: u64,
    pub seq: u64,
    pub label: String,
}

/// Short human tag used in the event trace.
pub trait EventLabel {
    fn label(&self) -> String;
}

struct Queued<E> {
    time: u64,
    seq: u64,
    payload: E,
}

impl<E> PartialEq for Queued<E> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl<E> Eq for Queued<E> {}
impl<E> PartialOrd for Queued<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Queued<E> {
    // Reversed so the BinaryHeap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

pub struct Simulator<E> {
    now: u64,
    queue: BinaryHeap<Queued<E>>,
    next_seq: u64,
    net: NetworkConfig,
    nodes: BTreeSet<NodeId>,
    sender_rngs: BTreeMap<NodeId, ChaCha8Rng>,
    pub stats: NetStats,
    trace: Vec<TraceEntry>,
}

impl<E: EventLabel> Simulator<E> {
    pub fn new(net: NetworkConfig) -> Result<Self, NetError> {
        net.validate()?;
        Ok(Simulator {
            now: 0,
            queue: BinaryHeap::new(),
            next_seq: 0,
            net,
            nodes: BTreeSet::new(),
            sender_rngs: BTreeMap::new(),
            stats: NetStats::default(),
            trace: Vec::new(),
        })
    }

    pub fn register_node(&mut self, node: NodeId) {
        self.nodes.insert(node);
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn network(&self) -> &NetworkConfig {
        &self.net
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    /// Queue `event` to fire `delay_ms` after the current clock. Ties at
    /// equal fire time break by insertion order.
    pub fn schedule(&mut self, event: E, delay_ms: u64) -> EventId {
        self.schedule_at(self.now + delay_ms, event)
    }

    /// Queue `event` at an absolute time (must not be in the past).
    pub fn schedule_at(&mut self, time: u64, event: E) -> EventId {
        assert!(time >= self.now, "scheduling into the past");
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Queued {
            time,
            seq,
            payload: event,
        });
        seq
    }

    fn sender_rng(&mut self, node: NodeId) -> &mut ChaCha8Rng {
        let seed = self.net.seed;
        self.sender_rngs
            .entry(node)
            .or_insert_with(|| seeded_rng(seed, node, "net"))
    }

    /// Decide and account the fate of a message whose delivery event is
    /// built by `to_event`. Partition drops are silent (the sender gets
    /// `Dropped` here only because the simulator is omniscient).
    pub fn send(
        &mut self,
        src: NodeId,
        dst: NodeId,
        payload: Vec<u8>,
        to_event: impl FnOnce(Message) -> E,
    ) -> Result<Delivery, NetError> {
        if !self.nodes.contains(&src) {
            return Err(NetError::UnknownNode(src));
        }
        if !self.nodes.contains(&dst) {
            return Err(NetError::UnknownNode(dst));
        }
        let send_time = self.now;
        self.stats.sent += 1;
        self.stats.bytes_sent += payload.len() as u64;

        let partitioned = self
            .net
            .partitions
            .iter()
            .any(|p| p.separates(src, dst, send_time));
        if partitioned {
            self.stats.dropped += 1;
            return Ok(Delivery::Dropped);
        }
        if self.net.drop_probability > 0.0 {
            let roll: f64 = self.sender_rng(src).gen();
            if roll < self.net.drop_probability {
                self.stats.dropped += 1;
                return Ok(Delivery::Dropped);
            }
        }
        let max_jitter = self.net.jitter_ms;
        let jitter = if max_jitter > 0 {
            self.sender_rng(src).gen_range(0..=max_jitter)
        } else {
            0
        };
        let deliver_time = send_time + self.net.base_latency_ms + jitter;
        self.stats.delivered += 1;
        let size_bytes = payload.len();
        let msg = Message {
            src,
            dst,
            payload,
            send_time,
            deliver_time,
            size_bytes,
        };
        self.schedule_at(deliver_time, to_event(msg));
        Ok(Delivery::Delivered { deliver_time })
    }

    /// Process every event with time <= `t_ms` in deterministic order and
    /// advance the clock to `t_ms`. Returns the number of events handled.
    pub fn run_until(
        &mut self,
        t_ms: u64,
        mut handler: impl FnMut(&mut Self, E),
    ) -> usize {
        assert!(t_ms >= self.now, "run_until into the past");
        let mut processed = 0;
        while let Some(head) = self.queue.peek() {
            if head.time > t_ms {
                break;
            }
            let ev = self.queue.pop().unwrap();
            debug_assert!(ev.time >= self.now);
            self.now = ev.time;
            self.trace.push(TraceEntry {
                time: ev.time,
                seq: ev.seq,
                label: ev.payload.label(),
            });
            handler(self, ev.payload);
            processed += 1;
        }
        self.now = t_ms;
        processed
    }

    /// Run until the queue is empty.
    pub fn drain(&mut self, mut handler: impl FnMut(&mut Self, E)) -> usize {
        let mut processed = 0;
        while let Some(head) = self.queue.peek() {
            let t = head.time;
            processed += self.run_until(t, &mut handler);
        }
        processed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    enum Ev {
        Tick(u32),
        Deliver(Message),
    }

    impl EventLabel for Ev {
        fn label(&self) -> String {
            match self {
                Ev::Tick(n) => format!("tick{n}"),
                Ev::Deliver(m) => format!("msg {}->{}", m.src, m.dst),
            }
        }
    }

    fn sim(net: NetworkConfig) -> Simulator<Ev> {
        let mut s = Simulator::new(net).unwrap();
        for n in 0..4 {
            s.register_node(n);
        }
        s
    }

    #[test]
    fn events_fire_in_time_then_insertion_order() {
        let mut s = sim(NetworkConfig::default());
        s.schedule(Ev::Tick(1), 5);
        s.schedule(Ev::Tick(2), 0);
        s.schedule(Ev::Tick(3), 5);
        let mut seen = Vec::new();
        s.run_until(10, |_, ev| seen.push(ev));
        assert_eq!(seen, vec![Ev::Tick(2), Ev::Tick(1), Ev::Tick(3)]);
        assert_eq!(s.now(), 10);
    }

    #[test]
    fn schedule_offsets_from_current_clock() {
        let mut s = sim(NetworkConfig::default());
        s.run_until(10, |_, _| {});
        s.schedule(Ev::Tick(0), 5);
        let mut fired_at = None;
        s.run_until(20, |sim, _| fired_at = Some(sim.now()));
        assert_eq!(fired_at, Some(15));
    }

    #[test]
    fn run_until_empty_queue_advances_clock() {
        let mut s = sim(NetworkConfig::default());
        assert_eq!(s.run_until(100, |_, _| {}), 0);
        assert_eq!(s.now(), 100);
    }

    #[test]
    fn certain_drop() {
        let mut s = sim(NetworkConfig {
            drop_probability: 1.0,
            ..Default::default()
        });
        let d = s.send(0, 1, vec![1], Ev::Deliver).unwrap();
        assert_eq!(d, Delivery::Dropped);
        assert_eq!(s.stats.sent, 1);
        assert_eq!(s.stats.dropped, 1);
    }

    #[test]
    fn no_randomness_means_fixed_latency() {
        let mut s = sim(NetworkConfig {
            base_latency_ms: 50,
            jitter_ms: 0,
            drop_probability: 0.0,
            ..Default::default()
        });
        let d = s.send(0, 1, vec![1, 2, 3], Ev::Deliver).unwrap();
        assert_eq!(d, Delivery::Delivered { deliver_time: 50 });
        let mut got = None;
        s.run_until(60, |_, ev| {
            if let Ev::Deliver(m) = ev {
                got = Some(m);
            }
        });
        let m = got.unwrap();
        assert_eq!(m.deliver_time, 50);
        assert_eq!(m.size_bytes, 3);
    }

    #[test]
    fn active_partition_drops() {
        let net = NetworkConfig {
            partitions: vec![Partition {
                side_a: [0].into_iter().collect(),
                side_b: [1].into_iter().collect(),
                start_ms: 0,
                end_ms: 100,
            }],
            ..Default::default()
        };
        let mut s = sim(net);
        assert_eq!(s.send(0, 1, vec![], Ev::Deliver).unwrap(), Delivery::Dropped);
        assert_eq!(s.send(1, 0, vec![], Ev::Deliver).unwrap(), Delivery::Dropped);
        // Unrelated pair is unaffected, and the window expires.
        assert!(matches!(
            s.send(2, 3, vec![], Ev::Deliver).unwrap(),
            Delivery::Delivered { .. }
        ));
        s.run_until(101, |_, _| {});
        assert!(matches!(
            s.send(0, 1, vec![], Ev::Deliver).unwrap(),
            Delivery::Delivered { .. }
        ));
    }

    #[test]
    fn unknown_node_is_routing_error() {
        let mut s = sim(NetworkConfig::default());
        assert_eq!(
            s.send(0, 99, vec![], Ev::Deliver).unwrap_err(),
            NetError::UnknownNode(99)
        );
    }

    #[test]
    fn conservation_holds_under_loss_and_jitter() {
        let mut s = sim(NetworkConfig {
            jitter_ms: 20,
            drop_probability: 0.3,
            seed: 9,
            ..Default::default()
        });
        for i in 0..200 {
            s.send(i % 4, (i + 1) % 4, vec![0; 8], Ev::Deliver).unwrap();
        }
        assert_eq!(s.stats.sent, 200);
        assert_eq!(s.stats.delivered + s.stats.dropped, 200);
        let mut delivered = 0;
        s.drain(|_, _| delivered += 1);
        assert_eq!(delivered as u64, s.stats.delivered);
    }

    // Replay oracle: same seed and schedule must give identical traces.
    #[test]
    fn identical_seed_gives_identical_trace() {
        let run = || {
            let mut s = sim(NetworkConfig {
                jitter_ms: 30,
                drop_probability: 0.2,
                seed: 1234,
                ..Default::default()
            });
            for i in 0..50u64 {
                s.schedule(Ev::Tick(i as u32), i % 7);
                s.send(i % 4, (i + 2) % 4, vec![0; 4], Ev::Deliver).unwrap();
            }
            s.drain(|_, _| {});
            s.trace().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn clock_is_monotone_over_processed_events() {
        let mut s = sim(NetworkConfig {
            jitter_ms: 15,
            seed: 5,
            ..Default::default()
        });
        for i in 0..40u64 {
            s.schedule(Ev::Tick(i as u32), (i * 13) % 29);
        }
        let mut last = 0;
        s.drain(|sim, _| {
            assert!(sim.now() >= last);
            last = sim.now();
        });
        let times: Vec<u64> = s.trace().iter().map(|t| t.time).collect();
        let mut sorted = times.clone();
        sorted.sort_unstable();
        assert_eq!(times, sorted);
    }
}
