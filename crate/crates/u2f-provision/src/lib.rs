//! U2F-token-backed IoT provisioning, simulated end to end.
//!
//! A hardware-style U2F token plugged into a secure gateway authorizes the
//! entire life cycle of headless IoT devices: first network bootstrap over a
//! packet-length side channel that carries no secrets, identity binding
//! through challenge-response ceremonies, per-command authorization for
//! critical operations, and one-step revocation of every binding when the
//! token leaves with its owner.
//!
//! The whole system runs in process on a simulated clock with seeded
//! entropy, so every scenario is reproducible byte for byte — including the
//! adversary's view of the air.
//!
//! Module map:
//!
//! - [`u2f`] — registration/authentication wire formats, P-256 signatures,
//!   key wrapping, verification
//! - [`token`] — the stateful software token: presence button, monotonic
//!   counter, persistence
//! - [`sidechannel`] — packet-length modulation codec and the harvesting
//!   primitive
//! - [`net`] — in-process broker, broadcast radio with a noise model, event
//!   log
//! - [`messages`] — broker message vocabulary and device-command tags
//! - [`gateway`], [`cloud`], [`device`] — the three networked roles
//! - [`scenario`] — end-to-end drivers (check-in, operations, check-out,
//!   attack comparison) and the replay journal behind the CLI
//!
//! Start with the runnable examples:
//!
//! ```bash
//! cargo run --example provision_fleet
//! cargo run --example credential_harvesting
//! ```

pub mod cloud;
pub mod device;
pub mod entropy;
pub mod gateway;
pub mod messages;
pub mod net;
pub mod scenario;
pub mod sidechannel;
pub mod time;
pub mod token;
pub mod u2f;

pub use cloud::{CloudService, OperationClass};
pub use device::{Device, DevicePhase};
pub use gateway::{Gateway, GatewayMode};
pub use net::{Broker, EventLog, Radio, RadioConfig};
pub use scenario::{
    run_attack, run_checkin, run_checkout, run_operation, AttackMode, ScenarioConfig, World,
};
pub use time::{SimClock, SimTime};
pub use token::Token;
