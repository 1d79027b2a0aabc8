//! Broadcast radio channel.
//!
//! Models the over-the-air side of provisioning: every listener — honest
//! device or adversary — observes the same broadcast, transformed per
//! listener by a seeded noise model (drop, duplicate, bounded displacement).
//! With noise disabled the channel is an identity: the adversary's view
//! equals the device's view, which is what keeps the harvesting
//! demonstration honest.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::log::{fields, EventLog};
use crate::entropy::{self, Entropy};
use crate::sidechannel::FrameLength;

/// Noise model for the broadcast channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioConfig {
    /// Per-frame probability of an extra adjacent copy.
    pub duplicate_prob: f64,
    /// Maximum forward displacement of a frame, in positions.
    pub reorder_window: u32,
    /// Per-frame probability of loss.
    pub drop_prob: f64,
    /// Seed for the noise stream.
    pub rng_seed: u64,
}

impl RadioConfig {
    /// Noiseless channel.
    pub fn clean(rng_seed: u64) -> Self {
        RadioConfig {
            duplicate_prob: 0.0,
            reorder_window: 0,
            drop_prob: 0.0,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [("duplicate_prob", self.duplicate_prob), ("drop_prob", self.drop_prob)] {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(format!("{name} must be within [0, 1], got {p}"));
            }
        }
        Ok(())
    }
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig::clean(0)
    }
}

struct RadioInner {
    config: RadioConfig,
    rng: Entropy,
    listeners: Vec<ListenerEntry>,
    log: EventLog,
}

struct ListenerEntry {
    label: String,
    queue: Arc<Mutex<VecDeque<FrameLength>>>,
}

/// Shared radio handle; clones refer to the same channel.
#[derive(Clone)]
pub struct Radio {
    inner: Arc<Mutex<RadioInner>>,
}

impl Radio {
    pub fn new(config: RadioConfig, log: EventLog) -> Self {
        config.validate().expect("radio config out of range");
        Radio {
            inner: Arc::new(Mutex::new(RadioInner {
                rng: entropy::root(config.rng_seed),
                config,
                listeners: Vec::new(),
                log,
            })),
        }
    }

    /// Registers a listener; it observes broadcasts from this point on.
    pub fn listen(&self, label: &str) -> RadioListener {
        let queue = Arc::new(Mutex::new(VecDeque::new()));
        let mut inner = self.inner.lock().unwrap();
        inner.listeners.push(ListenerEntry {
            label: label.to_string(),
            queue: queue.clone(),
        });
        RadioListener { queue }
    }

    /// Broadcasts `frames` to every listener, each receiving its own noisy
    /// view. Noise draws happen in listener registration order, so a fixed
    /// seed reproduces every delivery exactly.
    pub fn broadcast(&self, frames: &[FrameLength]) {
        let mut inner = self.inner.lock().unwrap();
        let config = inner.config;
        let log = inner.log.clone();
        log.record("radio", "broadcast", fields([("frames", frames.len().to_string())]));

        // Split borrows: the rng and the listener list live side by side.
        let RadioInner { rng, listeners, .. } = &mut *inner;
        for listener in listeners.iter() {
            let delivered = apply_noise(frames, &config, rng);
            log.record(
                "radio",
                "deliver",
                fields([
                    ("listener", listener.label.clone()),
                    ("frames", delivered.len().to_string()),
                    ("payload", digest_frames(&delivered)),
                ]),
            );
            listener.queue.lock().unwrap().extend(delivered);
        }
    }
}

/// Receiving end of one radio listener.
pub struct RadioListener {
    queue: Arc<Mutex<VecDeque<FrameLength>>>,
}

impl RadioListener {
    pub fn drain(&self) -> Vec<FrameLength> {
        self.queue.lock().unwrap().drain(..).collect()
    }

    pub fn pending(&self) -> usize {
        self.queue.lock().unwrap().len()
    }
}

fn apply_noise(frames: &[FrameLength], config: &RadioConfig, rng: &mut Entropy) -> Vec<FrameLength> {
    // Drop, then duplicate adjacent, then displace each survivor forward by
    // up to `reorder_window` positions (stable sort, so window 0 is the
    // identity).
    let mut kept: Vec<FrameLength> = Vec::with_capacity(frames.len() * 2);
    for &f in frames {
        if config.drop_prob > 0.0 && rng.random::<f64>() < config.drop_prob {
            continue;
        }
        kept.push(f);
        if config.duplicate_prob > 0.0 && rng.random::<f64>() < config.duplicate_prob {
            kept.push(f);
        }
    }
    if config.reorder_window == 0 {
        return kept;
    }
    let mut keyed: Vec<(usize, FrameLength)> = kept
        .into_iter()
        .enumerate()
        .map(|(i, f)| (i + rng.random_range(0..=config.reorder_window) as usize, f))
        .collect();
    keyed.sort_by_key(|&(key, _)| key);
    keyed.into_iter().map(|(_, f)| f).collect()
}

fn digest_frames(frames: &[FrameLength]) -> String {
    let bytes: Vec<u8> = frames.iter().flat_map(|f| f.get().to_be_bytes()).collect();
    super::log::digest_hex(&bytes)
}
