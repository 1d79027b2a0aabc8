//! Deterministic in-process transport fabric: the topic broker carrying all
//! cloud/gateway/device traffic, the broadcast radio for the side channel,
//! and the event log both feed.

pub mod broker;
pub mod log;
pub mod radio;

pub use broker::{Broker, BrokerMessage, Subscription};
pub use log::{digest_hex, EventLog, EventRecord};
pub use radio::{Radio, RadioConfig, RadioListener};
