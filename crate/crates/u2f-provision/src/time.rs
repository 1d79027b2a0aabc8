//! Simulated time.
//!
//! Nothing in this crate reads the wall clock. Every deadline (presence
//! window, provisioning window, challenge expiry) is expressed against a
//! logical clock that only the scenario driver advances, which is what makes
//! whole-system runs reproducible.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// An instant on the simulated timeline, in milliseconds since run start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_millis(ms: u64) -> Self {
        SimTime(ms)
    }

    pub fn from_secs(secs: u64) -> Self {
        SimTime(secs * 1000)
    }

    pub fn as_millis(self) -> u64 {
        self.0
    }

    pub fn plus_millis(self, ms: u64) -> Self {
        SimTime(self.0.saturating_add(ms))
    }

    pub fn plus_secs(self, secs: u64) -> Self {
        self.plus_millis(secs * 1000)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Shared handle to the logical clock.
///
/// Cloning yields another handle to the same clock. Components read it;
/// only the scenario driver advances it.
#[derive(Clone, Debug, Default)]
pub struct SimClock(Arc<AtomicU64>);

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        SimTime(self.0.load(Ordering::SeqCst))
    }

    pub fn advance_millis(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }

    pub fn advance_secs(&self, secs: u64) {
        self.advance_millis(secs * 1000);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clock_handles_share_state() {
        let clock = SimClock::new();
        let other = clock.clone();
        assert_eq!(clock.now(), SimTime::ZERO);
        other.advance_secs(15);
        assert_eq!(clock.now(), SimTime::from_secs(15));
        clock.advance_millis(250);
        assert_eq!(other.now().as_millis(), 15_250);
    }

    #[test]
    fn deadline_arithmetic() {
        let t = SimTime::from_secs(2);
        assert_eq!(t.plus_secs(3), SimTime::from_secs(5));
        assert!(t.plus_millis(1) > t);
    }
}
