//! In-process topic broker with MQTT-like semantics: literal topics, per-topic
//! publish order, fan-out to every live subscriber, no retained messages.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use super::log::{digest_hex, fields, EventLog};

/// A message as delivered to one subscriber.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerMessage {
    pub topic: String,
    pub payload: Vec<u8>,
    /// Per-topic sequence number, strictly increasing per publish.
    pub seq: u64,
}

struct SubscriberEntry {
    topic: String,
    queue: Arc<Mutex<VecDeque<BrokerMessage>>>,
    alive: Arc<AtomicBool>,
}

struct BrokerInner {
    seq: HashMap<String, u64>,
    subscribers: Vec<SubscriberEntry>,
    log: EventLog,
}

/// Shared broker handle; clones refer to the same broker.
#[derive(Clone)]
pub struct Broker {
    inner: Arc<Mutex<BrokerInner>>,
}

impl Broker {
    pub fn new(log: EventLog) -> Self {
        Broker {
            inner: Arc::new(Mutex::new(BrokerInner {
                seq: HashMap::new(),
                subscribers: Vec::new(),
                log,
            })),
        }
    }

    /// Publishes `payload` on `topic`, delivering to every current
    /// subscriber in subscription order. Returns the assigned sequence
    /// number; the number advances even when nobody is subscribed.
    pub fn publish(&self, topic: &str, payload: &[u8]) -> u64 {
        assert!(!topic.is_empty(), "topic must be non-empty");
        let mut inner = self.inner.lock().unwrap();
        let seq = inner.seq.entry(topic.to_string()).or_insert(0);
        *seq += 1;
        let seq = *seq;

        let message = BrokerMessage {
            topic: topic.to_string(),
            payload: payload.to_vec(),
            seq,
        };

        inner.subscribers.retain(|s| s.alive.load(Ordering::SeqCst));
        let log = inner.log.clone();
        for sub in inner.subscribers.iter().filter(|s| s.topic == topic) {
            sub.queue.lock().unwrap().push_back(message.clone());
            log.record(
                "broker",
                "deliver",
                fields([
                    ("topic", topic.to_string()),
                    ("seq", seq.to_string()),
                    ("payload", digest_hex(payload)),
                ]),
            );
        }
        seq
    }

    /// Subscribes to `topic`. The stream yields messages published after
    /// this call; dropping the subscription ends delivery.
    pub fn subscribe(&self, topic: &str) -> Subscription {
        let queue = Arc::new(Mutex::new(VecDeque::new()));
        let alive = Arc::new(AtomicBool::new(true));
        let mut inner = self.inner.lock().unwrap();
        inner.subscribers.push(SubscriberEntry {
            topic: topic.to_string(),
            queue: queue.clone(),
            alive: alive.clone(),
        });
        Subscription {
            topic: topic.to_string(),
            queue,
            alive,
        }
    }
}

/// Receiving end of one subscription.
pub struct Subscription {
    topic: String,
    queue: Arc<Mutex<VecDeque<BrokerMessage>>>,
    alive: Arc<AtomicBool>,
}

impl Subscription {
    pub fn topic(&self) -> &str {
        &self.topic
    }

    pub fn try_recv(&self) -> Option<BrokerMessage> {
        self.queue.lock().unwrap().pop_front()
    }

    pub fn drain(&self) -> Vec<BrokerMessage> {
        self.queue.lock().unwrap().drain(..).collect()
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.alive.store(false, Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::SimClock;

    fn broker() -> Broker {
        Broker::new(EventLog::new(SimClock::new()))
    }

    #[test]
    fn seq_advances_without_subscribers() {
        let b = broker();
        assert_eq!(b.publish("u2f_host", b"register"), 1);
        assert_eq!(b.publish("u2f_host", b"register"), 2);
    }

    #[test]
    fn subscriber_receives_exact_topic_and_payload() {
        let b = broker();
        let sub = b.subscribe("u2f_host");
        b.publish("u2f_host", b"register");
        let msg = sub.try_recv().unwrap();
        assert_eq!(msg.topic, "u2f_host");
        assert_eq!(msg.payload, b"register");
        assert!(sub.try_recv().is_none());
    }

    #[test]
    fn per_topic_order_is_preserved() {
        let b = broker();
        let sub = b.subscribe("t");
        b.publish("t", b"a");
        b.publish("other", b"x");
        b.publish("t", b"b");
        let seqs: Vec<u64> = sub.drain().iter().map(|m| m.seq).collect();
        assert_eq!(seqs, vec![1, 2]);
    }

    #[test]
    fn no_retained_messages() {
        let b = broker();
        b.publish("t", b"early");
        let sub = b.subscribe("t");
        assert!(sub.try_recv().is_none());
        b.publish("t", b"late");
        assert_eq!(sub.try_recv().unwrap().payload, b"late");
    }

    #[test]
    fn fan_out_to_all_subscribers() {
        let b = broker();
        let s1 = b.subscribe("t");
        let s2 = b.subscribe("t");
        b.publish("t", b"m");
        assert_eq!(s1.try_recv().unwrap().payload, b"m");
        assert_eq!(s2.try_recv().unwrap().payload, b"m");
    }

    #[test]
    fn dropped_subscription_stops_delivery() {
        let b = broker();
        let sub = b.subscribe("t");
        drop(sub);
        b.publish("t", b"m"); // must not panic or deliver
        let replacement = b.subscribe("t");
        b.publish("t", b"n");
        assert_eq!(replacement.drain().len(), 1);
    }

    #[test]
    fn concurrent_publishers_keep_seq_strictly_increasing() {
        let b = broker();
        let sub = b.subscribe("t");
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let b = b.clone();
                std::thread::spawn(move || {
                    for _ in 0..250 {
                        b.publish("t", b"m");
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let seqs: Vec<u64> = sub.drain().iter().map(|m| m.seq).collect();
        assert_eq!(seqs.len(), 1000);
        assert!(seqs.windows(2).all(|w| w[1] > w[0]));
    }
}
