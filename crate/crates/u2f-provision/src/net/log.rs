//! Structured event log: the audit trail every scenario assertion runs over.
//!
//! One record per event, rendered as one stable line. Payloads appear only
//! as digests so that no secret can leak through the log itself.

use std::fmt;
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use crate::time::{SimClock, SimTime};

/// One logged event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub at: SimTime,
    pub source: String,
    pub kind: String,
    pub fields: Vec<(String, String)>,
}

impl EventRecord {
    /// Value of a named field, if present.
    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }
}

impl fmt::Display for EventRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>9} {:<12} {}", self.at.as_millis(), self.source, self.kind)?;
        for (k, v) in &self.fields {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

/// Shared, append-only event log.
#[derive(Clone, Default)]
pub struct EventLog {
    records: Arc<Mutex<Vec<EventRecord>>>,
    clock: SimClock,
}

impl EventLog {
    pub fn new(clock: SimClock) -> Self {
        EventLog {
            records: Arc::default(),
            clock,
        }
    }

    pub fn record<K, F>(&self, source: &str, kind: K, fields: F)
    where
        K: Into<String>,
        F: IntoIterator<Item = (String, String)>,
    {
        let record = EventRecord {
            at: self.clock.now(),
            source: source.to_string(),
            kind: kind.into(),
            fields: fields.into_iter().collect(),
        };
        self.records.lock().unwrap().push(record);
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of all records so far.
    pub fn snapshot(&self) -> Vec<EventRecord> {
        self.records.lock().unwrap().clone()
    }

    /// Stable line rendering of records `from..`, one per event.
    pub fn render_from(&self, from: usize) -> String {
        let records = self.records.lock().unwrap();
        let mut out = String::new();
        for record in records.iter().skip(from) {
            out.push_str(&record.to_string());
            out.push('\n');
        }
        out
    }

    pub fn render(&self) -> String {
        self.render_from(0)
    }
}

/// Short hex digest used wherever a payload shows up in a log line.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Convenience for building field lists.
pub fn fields<const N: usize>(pairs: [(&str, String); N]) -> Vec<(String, String)> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_stable_and_ordered() {
        let clock = SimClock::new();
        let log = EventLog::new(clock.clone());
        log.record("cloud", "challenge_issued", fields([("ceremony", "1".into())]));
        clock.advance_secs(2);
        log.record("gateway", "window_open", fields([("deadline", "122000".into())]));

        let expected = "        0 cloud        challenge_issued ceremony=1\n\
                        \x20    2000 gateway      window_open deadline=122000\n";
        assert_eq!(log.render(), expected);
        assert_eq!(log.render_from(1), "     2000 gateway      window_open deadline=122000\n");
    }

    #[test]
    fn digests_are_short_and_deterministic() {
        assert_eq!(digest_hex(b"payload"), digest_hex(b"payload"));
        assert_eq!(digest_hex(b"payload").len(), 16);
        assert_ne!(digest_hex(b"a"), digest_hex(b"b"));
    }
}
