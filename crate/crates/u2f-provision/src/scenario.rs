//! Scenario driver: composes token, gateway, cloud, devices, radio, and
//! broker into named end-to-end flows — smart-hotel check-in, critical
//! operations, check-out, and the harvesting attack comparison — all on the
//! simulated clock.
//!
//! A [`World`] is deterministic: the same [`ScenarioConfig`] replays to the
//! same state and the byte-identical event log. The CLI leans on that for
//! persistence — instead of snapshotting component state it journals the
//! completed steps and replays them on the next invocation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{CloudService, DeviceBindingState, Dispatch, OperationClass};
use crate::device::{Device, DevicePhase};
use crate::entropy::{self, Entropy};
use crate::gateway::Gateway;
use crate::net::log::fields;
use crate::net::{Broker, EventLog, Radio, RadioConfig, RadioListener};
use crate::sidechannel::{self, FrameLength, LegacyPayload};
use crate::time::SimClock;
use crate::token::Token;

const SSID: &str = "hotel-guest";
const ACCOUNT: &str = "guest";
const ORIGIN: &str = "https://iot-cloud.example";
const RADIO_SEED_SALT: u64 = 0x7261_6469_6f5f_5eed;

/// Everything that parameterizes a run. Identical configs produce
/// byte-identical event logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub device_count: usize,
    pub noise: RadioConfig,
    pub auto_approve: bool,
    pub policy_overrides: BTreeMap<String, OperationClass>,
}

impl ScenarioConfig {
    pub fn new(seed: u64) -> Self {
        ScenarioConfig {
            seed,
            device_count: 1,
            noise: RadioConfig::clean(seed ^ RADIO_SEED_SALT),
            auto_approve: true,
            policy_overrides: BTreeMap::new(),
        }
    }
}

/// A module failure annotated with where in the event log it happened.
#[derive(Debug, Clone, Error)]
#[error("{module} error at event {event_index}: {message}")]
pub struct ScenarioError {
    pub module: &'static str,
    pub event_index: usize,
    pub message: String,
}

impl ScenarioError {
    fn new(module: &'static str, log: &EventLog, message: impl fmt::Display) -> Self {
        ScenarioError {
            module,
            event_index: log.len(),
            message: message.to_string(),
        }
    }
}

/// Answers presence cues; `true` presses the token button.
pub type ApproveFn<'a> = &'a mut dyn FnMut(&str) -> bool;

/// The assembled simulation.
pub struct World {
    pub config: ScenarioConfig,
    pub clock: SimClock,
    pub log: EventLog,
    pub broker: Broker,
    pub radio: Radio,
    pub cloud: CloudService,
    pub gateway: Gateway,
    pub devices: Vec<Device>,
    adversary: RadioListener,
    device_rng: Entropy,
    /// The infrastructure passphrase; lives in the cloud's config and is
    /// what the adversary hopes to harvest.
    pub passphrase: String,
    /// Holds the token between check-out and any later check-in.
    pub pocket: Option<Token>,
}

impl World {
    pub fn new(config: ScenarioConfig) -> Self {
        let clock = SimClock::new();
        let log = EventLog::new(clock.clone());
        let mut master = entropy::root(config.seed);

        // Fork order is part of the determinism contract; do not reorder.
        let mut misc_rng = entropy::fork(&mut master);
        let token_rng = entropy::fork(&mut master);
        let cloud_rng = entropy::fork(&mut master);
        let gateway_rng = entropy::fork(&mut master);
        let device_rng = entropy::fork(&mut master);

        let passphrase = format!("wpa2-{}", hex::encode(entropy::bytes::<9>(&mut misc_rng)));

        let radio = Radio::new(config.noise, log.clone());
        // The adversary listens from the first moment; with noise disabled
        // its view is byte-identical to any device's.
        let adversary = radio.listen("adversary");
        let broker = Broker::new(log.clone());

        let mut cloud = CloudService::new(
            broker.clone(),
            clock.clone(),
            log.clone(),
            cloud_rng,
            ORIGIN,
            &passphrase,
            ACCOUNT,
        );
        for (command, class) in &config.policy_overrides {
            cloud.set_policy(command, *class);
        }

        let mut gateway = Gateway::new(
            broker.clone(),
            radio.clone(),
            clock.clone(),
            log.clone(),
            gateway_rng,
            SSID,
        );
        gateway.attach_token(Token::new(token_rng, clock.clone()));

        World {
            config,
            clock,
            log,
            broker,
            radio,
            cloud,
            gateway,
            devices: Vec::new(),
            adversary,
            device_rng,
            passphrase,
            pocket: None,
        }
    }

    /// Runs every component until no messages remain in flight.
    pub fn settle(&mut self) {
        for _ in 0..10_000 {
            let mut progressed = self.cloud.poll();
            progressed |= self.gateway.poll();
            for device in &mut self.devices {
                progressed |= device.poll();
            }
            if !progressed {
                return;
            }
        }
        panic!("simulation did not quiesce: message loop suspected");
    }

    /// Powers on a blank device; it starts listening to the radio now.
    pub fn power_on_device(&mut self) -> [u8; 8] {
        let device_id: [u8; 8] = entropy::bytes(&mut self.device_rng);
        let listener = self.radio.listen(&format!("dev:{}", hex::encode(&device_id[..3])));
        let device = Device::new(
            self.broker.clone(),
            listener,
            self.clock.clone(),
            self.log.clone(),
            device_id,
        );
        self.log.record(
            "scenario",
            "device_powered_on",
            fields([("device", hex::encode(device_id))]),
        );
        self.devices.push(device);
        device_id
    }

    pub fn device(&self, index: usize) -> Option<&Device> {
        self.devices.get(index)
    }

    /// Everything the adversary has overheard since the last call.
    pub fn drain_adversary(&mut self) -> Vec<FrameLength> {
        self.adversary.drain()
    }

    /// Settles, then answers presence cues until none remain. Each approval
    /// presses the token button once; a refusal declines the ceremony.
    pub fn answer_presence_cues(&mut self, approve: ApproveFn<'_>) {
        self.settle();
        while self.gateway.awaiting_presence() {
            // A human takes a moment to reach the token.
            self.clock.advance_secs(1);
            if approve("press the token button to authorize this ceremony") {
                self.log.record("scenario", "token_button_pressed", fields([]));
                if let Some(token) = self.gateway.token_mut() {
                    let _ = token.press_button();
                }
                self.gateway.resume_pending();
            } else {
                self.log.record("scenario", "presence_refused", fields([]));
                self.gateway.decline_pending();
            }
            self.settle();
        }
    }
}

/// Check-in outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckinReport {
    pub token_registered: bool,
    pub devices_requested: usize,
    pub devices_bound: usize,
    pub distinct_access_tokens: usize,
}

impl CheckinReport {
    pub fn success(&self) -> bool {
        self.token_registered
            && self.devices_bound == self.devices_requested
            && self.distinct_access_tokens == self.devices_requested
    }
}

/// Operation outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperationReport {
    pub command: String,
    pub class: OperationClass,
    pub ceremony_ran: bool,
    pub delivered: bool,
    pub camera_on: Option<bool>,
}

impl OperationReport {
    pub fn success(&self) -> bool {
        self.delivered
    }
}

/// Check-out outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckoutReport {
    pub revoked: usize,
    pub post_checkout_rejected: bool,
}

/// Attack demonstration outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackReport {
    pub mode: AttackMode,
    pub frames_observed: usize,
    pub adversary_decoded: bool,
    pub passphrase_recovered: Option<String>,
    pub honest_device_enrolled: bool,
}

impl AttackReport {
    /// Did the run demonstrate what it set out to demonstrate?
    pub fn success(&self) -> bool {
        match self.mode {
            AttackMode::Legacy => self.passphrase_recovered.is_some(),
            AttackMode::U2fi => self.passphrase_recovered.is_none() && self.honest_device_enrolled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    Legacy,
    U2fi,
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMode::Legacy => "legacy",
            AttackMode::U2fi => "u2fi",
        })
    }
}

/// Smart-hotel check-in: register the guest's token, then provision each
/// device through its own enrollment and authorization ceremony.
pub fn run_checkin(world: &mut World, approve: ApproveFn<'_>) -> Result<CheckinReport, ScenarioError> {
    world.log.record("scenario", "checkin_start", fields([]));
    world.clock.advance_secs(1);

    world.cloud.start_registration(ACCOUNT);
    world.answer_presence_cues(approve);
    let token_registered = world
        .cloud
        .account(ACCOUNT)
        .is_some_and(|a| !a.bound_tokens.is_empty());

    let devices_requested = world.config.device_count;
    if token_registered {
        for _ in 0..devices_requested {
            world.clock.advance_secs(1);
            let device_id = world.power_on_device();
            world
                .gateway
                .press_wps()
                .map_err(|e| ScenarioError::new("gateway", &world.log, e))?;
            world.answer_presence_cues(approve);
            world.log.record(
                "scenario",
                "provisioning_settled",
                fields([("device", hex::encode(device_id))]),
            );
        }
    }

    let bound: Vec<_> = world
        .cloud
        .devices()
        .filter(|d| d.state == DeviceBindingState::Bound)
        .collect();
    let distinct: std::collections::HashSet<[u8; 32]> = bound
        .iter()
        .filter_map(|d| d.access_token.as_ref().map(|t| t.token_bytes))
        .collect();

    let report = CheckinReport {
        token_registered,
        devices_requested,
        devices_bound: bound.len(),
        distinct_access_tokens: distinct.len(),
    };
    world.log.record(
        "scenario",
        "checkin_complete",
        fields([
            ("requested", report.devices_requested.to_string()),
            ("bound", report.devices_bound.to_string()),
        ]),
    );
    Ok(report)
}

/// Runs one command against a provisioned device.
pub fn run_operation(
    world: &mut World,
    device_index: usize,
    command: &str,
    approve: ApproveFn<'_>,
) -> Result<OperationReport, ScenarioError> {
    let device_id = world
        .device(device_index)
        .map(|d| d.device_id())
        .ok_or_else(|| {
            ScenarioError::new("scenario", &world.log, format!("no device #{device_index}"))
        })?;

    world.clock.advance_secs(1);
    world.log.record(
        "scenario",
        "operation_start",
        fields([("device", hex::encode(device_id)), ("command", command.into())]),
    );
    let mark = world.log.len();

    let class = world.cloud.classify_operation(command);
    let dispatch = world
        .cloud
        .execute_operation(&device_id, command)
        .map_err(|e| ScenarioError::new("cloud", &world.log, e))?;
    world.answer_presence_cues(approve);

    let events = world.log.snapshot()[mark..].to_vec();
    let delivered = events.iter().any(|e| {
        (e.kind == "command_executed" || e.kind == "camera_on")
            && e.source == format!("dev:{}", hex::encode(&device_id[..3]))
    });
    let report = OperationReport {
        command: command.to_string(),
        class,
        ceremony_ran: !matches!(dispatch, Dispatch::Immediate),
        delivered,
        camera_on: world
            .devices
            .iter()
            .find(|d| d.device_id() == device_id)
            .map(|d| d.camera_on()),
    };
    world.log.record(
        "scenario",
        "operation_complete",
        fields([
            ("command", command.into()),
            ("delivered", report.delivered.to_string()),
        ]),
    );
    Ok(report)
}

/// Check-out: the token leaves with its owner; every binding it authorized
/// is revoked, and a post-checkout critical command must bounce.
pub fn run_checkout(world: &mut World) -> Result<CheckoutReport, ScenarioError> {
    world.clock.advance_secs(1);
    world.log.record("scenario", "checkout_start", fields([]));
    let mark = world.log.len();

    if let Some(token) = world.gateway.detach_token() {
        world.pocket = Some(token);
    }
    world.settle();

    let revoked = world
        .log
        .snapshot()[mark..]
        .iter()
        .filter(|e| e.kind == "device_revoked")
        .count();

    // Prove revocation sticks: re-try a critical command on a device that
    // was bound, expecting rejection.
    let mut post_checkout_rejected = true;
    let formerly_bound = world
        .cloud
        .devices()
        .find(|d| d.state == DeviceBindingState::Revoked)
        .map(|d| d.device_id);
    if let Some(device_id) = formerly_bound {
        world.clock.advance_secs(1);
        match world.cloud.execute_operation(&device_id, "open") {
            Err(err) => world.log.record(
                "scenario",
                "post_checkout_rejected",
                fields([("device", hex::encode(device_id)), ("error", err.to_string())]),
            ),
            Ok(_) => post_checkout_rejected = false,
        }
    }

    world.log.record(
        "scenario",
        "checkout_complete",
        fields([("revoked", revoked.to_string())]),
    );
    Ok(CheckoutReport {
        revoked,
        post_checkout_rejected,
    })
}

/// Harvesting comparison: what does a length-only eavesdropper learn during
/// provisioning?
pub fn run_attack(config: ScenarioConfig, mode: AttackMode) -> Result<AttackReport, ScenarioError> {
    let mut world = World::new(config);
    world.log.record(
        "scenario",
        "attack_start",
        fields([("mode", mode.to_string())]),
    );
    world.power_on_device();
    world.clock.advance_secs(1);

    match mode {
        AttackMode::Legacy => {
            // The legacy configurator modulates SSID and passphrase straight
            // onto the air.
            let payload = LegacyPayload {
                ssid: SSID.to_string(),
                passphrase: world.passphrase.clone(),
            };
            let frames = sidechannel::encode(&payload.to_bytes().map_err(|e| {
                ScenarioError::new("sidechannel", &world.log, e)
            })?)
            .map_err(|e| ScenarioError::new("sidechannel", &world.log, e))?;
            world.radio.broadcast(&frames);
        }
        AttackMode::U2fi => {
            world
                .gateway
                .press_wps()
                .map_err(|e| ScenarioError::new("gateway", &world.log, e))?;
        }
    }
    world.settle();

    let observed = world.drain_adversary();
    let decoded = sidechannel::harvest(&observed).ok();
    let passphrase_recovered = decoded.as_ref().and_then(|bytes| {
        let needle = world.passphrase.as_bytes();
        bytes
            .windows(needle.len())
            .any(|w| w == needle)
            .then(|| world.passphrase.clone())
    });
    let honest_device_enrolled = world
        .device(0)
        .is_some_and(|d| d.phase() != DevicePhase::Blank);

    let report = AttackReport {
        mode,
        frames_observed: observed.len(),
        adversary_decoded: decoded.is_some(),
        passphrase_recovered,
        honest_device_enrolled,
    };
    world.log.record(
        "scenario",
        "attack_complete",
        fields([
            ("mode", mode.to_string()),
            ("leaked", report.passphrase_recovered.is_some().to_string()),
        ]),
    );
    Ok(report)
}

/// One completed driver step, with the presence answers it consumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum Step {
    Checkin { devices: usize, approvals: Vec<bool> },
    Operation { device: usize, command: String, approvals: Vec<bool> },
    Checkout,
    Policy { command: String, class: OperationClass },
}

/// Journal of a run: the config plus every completed step. Replaying it
/// deterministically reconstructs the world, which is how state persists
/// between CLI invocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Journal {
    pub config: ScenarioConfig,
    pub steps: Vec<Step>,
}

impl Journal {
    pub fn new(config: ScenarioConfig) -> Self {
        Journal { config, steps: Vec::new() }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = fs::read(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self).expect("journal serializes"))
    }

    /// Replays every journaled step onto a fresh world.
    pub fn replay(&self) -> Result<World, ScenarioError> {
        let mut world = World::new(self.config.clone());
        for step in &self.steps {
            match step {
                Step::Checkin { devices, approvals } => {
                    world.config.device_count = *devices;
                    let mut feed = approvals.iter().copied();
                    run_checkin(&mut world, &mut |_| feed.next().unwrap_or(false))?;
                }
                Step::Operation { device, command, approvals } => {
                    let mut feed = approvals.iter().copied();
                    run_operation(&mut world, *device, command, &mut |_| {
                        feed.next().unwrap_or(false)
                    })?;
                }
                Step::Checkout => {
                    run_checkout(&mut world)?;
                }
                Step::Policy { command, class } => {
                    world.cloud.set_policy(command, *class);
                }
            }
        }
        Ok(world)
    }
}

/// Wraps an approval source so the answers can be journaled.
pub struct RecordingApprover<'a> {
    inner: ApproveFn<'a>,
    pub answers: Vec<bool>,
}

impl<'a> RecordingApprover<'a> {
    pub fn new(inner: ApproveFn<'a>) -> Self {
        RecordingApprover { inner, answers: Vec::new() }
    }

    pub fn approve(&mut self, context: &str) -> bool {
        let answer = (self.inner)(context);
        self.answers.push(answer);
        answer
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approve_all() -> impl FnMut(&str) -> bool {
        |_| true
    }

    fn checked_in_world(seed: u64, devices: usize) -> World {
        let mut config = ScenarioConfig::new(seed);
        config.device_count = devices;
        let mut world = World::new(config);
        let report = run_checkin(&mut world, &mut approve_all()).unwrap();
        assert!(report.success(), "{report:?}");
        world
    }

    #[test]
    fn checkin_binds_one_device() {
        let world = checked_in_world(1, 1);
        assert_eq!(world.device(0).unwrap().phase(), DevicePhase::Bound);
    }

    #[test]
    fn checkin_binds_four_devices_with_distinct_tokens() {
        let world = checked_in_world(2, 4);
        let tokens: std::collections::HashSet<_> = world
            .devices
            .iter()
            .map(|d| d.access_token().expect("bound"))
            .collect();
        assert_eq!(tokens.len(), 4);
    }

    #[test]
    fn declined_checkin_binds_nothing() {
        let mut config = ScenarioConfig::new(3);
        config.device_count = 2;
        let mut world = World::new(config);
        let report = run_checkin(&mut world, &mut |_| false).unwrap();
        assert!(!report.success());
        assert!(!report.token_registered);
        assert_eq!(report.devices_bound, 0);
    }

    #[test]
    fn open_with_approval_turns_the_camera_on() {
        let mut world = checked_in_world(4, 1);
        let report = run_operation(&mut world, 0, "open", &mut approve_all()).unwrap();
        assert!(report.success());
        assert!(report.ceremony_ran);
        assert_eq!(report.class, OperationClass::Critical);
        assert_eq!(report.camera_on, Some(true));
    }

    #[test]
    fn status_needs_no_ceremony() {
        let mut world = checked_in_world(5, 1);
        let mark = world.log.len();
        let report = run_operation(&mut world, 0, "status", &mut |_| {
            panic!("no presence cue expected for a non-critical command")
        })
        .unwrap();
        assert!(report.success());
        assert!(!report.ceremony_ran);
        let events = world.log.snapshot()[mark..].to_vec();
        assert!(!events.iter().any(|e| e.kind == "challenge_issued"));
    }

    #[test]
    fn declined_open_leaves_the_camera_off() {
        let mut world = checked_in_world(6, 1);
        let report = run_operation(&mut world, 0, "open", &mut |_| false).unwrap();
        assert!(!report.success());
        assert_eq!(report.camera_on, Some(false));
    }

    #[test]
    fn checkout_revokes_everything_and_is_idempotent() {
        let mut world = checked_in_world(7, 3);
        let report = run_checkout(&mut world).unwrap();
        assert_eq!(report.revoked, 3);
        assert!(report.post_checkout_rejected);

        let again = run_checkout(&mut world).unwrap();
        assert_eq!(again.revoked, 0);
    }

    #[test]
    fn legacy_attack_recovers_the_passphrase() {
        let report = run_attack(ScenarioConfig::new(8), AttackMode::Legacy).unwrap();
        assert!(report.adversary_decoded);
        assert!(report.passphrase_recovered.is_some());
        assert!(report.success());
    }

    #[test]
    fn u2fi_attack_recovers_no_secret() {
        let report = run_attack(ScenarioConfig::new(9), AttackMode::U2fi).unwrap();
        assert!(report.adversary_decoded, "adversary sees the bootstrap fine");
        assert_eq!(report.passphrase_recovered, None);
        assert!(report.honest_device_enrolled);
        assert!(report.success());
    }

    #[test]
    fn identical_configs_render_identical_logs() {
        let run = || {
            let mut world = checked_in_world(10, 2);
            run_operation(&mut world, 0, "open", &mut approve_all()).unwrap();
            run_checkout(&mut world).unwrap();
            world.log.render()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn journal_replay_reconstructs_the_run() {
        let mut config = ScenarioConfig::new(11);
        config.device_count = 2;
        let mut journal = Journal::new(config.clone());

        // Live run, recording approvals.
        let mut world = World::new(config);
        let mut always_yes = |_: &str| true;
        let mut recorder = RecordingApprover::new(&mut always_yes);
        run_checkin(&mut world, &mut |c| recorder.approve(c)).unwrap();
        journal.steps.push(Step::Checkin { devices: 2, approvals: recorder.answers.clone() });

        let mut always_yes = |_: &str| true;
        let mut recorder = RecordingApprover::new(&mut always_yes);
        run_operation(&mut world, 1, "open", &mut |c| recorder.approve(c)).unwrap();
        journal.steps.push(Step::Operation {
            device: 1,
            command: "open".into(),
            approvals: recorder.answers.clone(),
        });

        let replayed = journal.replay().unwrap();
        assert_eq!(replayed.log.render(), world.log.render());
        assert_eq!(replayed.cloud.registry_export(), world.cloud.registry_export());

        // And it survives a disk round trip.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.json");
        journal.save(&path).unwrap();
        let loaded = Journal::load(&path).unwrap();
        assert_eq!(loaded, journal);
        assert_eq!(loaded.replay().unwrap().log.render(), world.log.render());
    }

    #[test]
    fn policy_override_reroutes_classification() {
        let mut config = ScenarioConfig::new(12);
        config.policy_overrides.insert("status".into(), OperationClass::Critical);
        let mut world = World::new(config);
        run_checkin(&mut world, &mut approve_all()).unwrap();
        let report = run_operation(&mut world, 0, "status", &mut approve_all()).unwrap();
        assert!(report.ceremony_ran);
        assert!(report.success());
    }
}
