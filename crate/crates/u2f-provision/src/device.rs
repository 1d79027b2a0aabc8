//! Emulated headless IoT device.
//!
//! Starts blank: no network, no identity. It listens to radio frame lengths,
//! decodes a bootstrap transmission, enrolls through the gateway it names,
//! and receives its access token over the broker once the owner approves the
//! binding. Its one critical actuator — the camera — turns on only for a
//! tag-valid `open` command arriving inside the window that a tag-valid
//! `U2F_AUTHENTICATED` grant opened.

use thiserror::Error;

use crate::messages::{self, topics, verify_device_msg_tag, DeviceMsg, GatewayCtl};
use crate::net::log::fields;
use crate::net::{digest_hex, Broker, EventLog, RadioListener, Subscription};
use crate::sidechannel::{self, BootstrapPayload, FrameLength};
use crate::time::{SimClock, SimTime};

/// How long one `U2F_AUTHENTICATED` grant stays usable, in simulated seconds.
pub const AUTH_WINDOW_SECS: u64 = 10;

/// Rolling radio buffer cap; oldest frames fall off first.
const FRAME_BUFFER_CAP: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("command rejected")]
    CommandRejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DevicePhase {
    Blank,
    Enrolling,
    Bound,
    Revoked,
}

impl DevicePhase {
    pub fn name(&self) -> &'static str {
        match self {
            DevicePhase::Blank => "blank",
            DevicePhase::Enrolling => "enrolling",
            DevicePhase::Bound => "bound",
            DevicePhase::Revoked => "revoked",
        }
    }
}

pub struct Device {
    device_id: [u8; 8],
    phase: DevicePhase,
    camera_on: bool,
    access_token: Option<[u8; 32]>,
    network_credential: Option<String>,
    authenticated_until: Option<SimTime>,
    radio_rx: RadioListener,
    frame_buffer: Vec<FrameLength>,
    cmd_sub: Subscription,
    broker: Broker,
    clock: SimClock,
    log: EventLog,
    source: String,
}

impl Device {
    pub fn new(
        broker: Broker,
        radio_rx: RadioListener,
        clock: SimClock,
        log: EventLog,
        device_id: [u8; 8],
    ) -> Self {
        let cmd_sub = broker.subscribe(&topics::device_cmd(&device_id));
        let source = format!("dev:{}", hex::encode(&device_id[..3]));
        Device {
            device_id,
            phase: DevicePhase::Blank,
            camera_on: false,
            access_token: None,
            network_credential: None,
            authenticated_until: None,
            radio_rx,
            frame_buffer: Vec::new(),
            cmd_sub,
            broker,
            clock,
            log,
            source,
        }
    }

    pub fn device_id(&self) -> [u8; 8] {
        self.device_id
    }

    pub fn phase(&self) -> DevicePhase {
        self.phase
    }

    pub fn camera_on(&self) -> bool {
        self.camera_on
    }

    pub fn access_token(&self) -> Option<[u8; 32]> {
        self.access_token
    }

    /// Drains the radio and command queues; returns whether anything was
    /// processed.
    pub fn poll(&mut self) -> bool {
        let mut progressed = false;

        let frames = self.radio_rx.drain();
        if !frames.is_empty() {
            progressed = true;
            self.frame_buffer.extend(frames);
            if self.frame_buffer.len() > FRAME_BUFFER_CAP {
                let excess = self.frame_buffer.len() - FRAME_BUFFER_CAP;
                self.frame_buffer.drain(..excess);
            }
            if self.phase == DevicePhase::Blank {
                self.try_bootstrap();
            }
        }

        for msg in self.cmd_sub.drain() {
            progressed = true;
            match messages::decode::<DeviceMsg>(&msg.payload) {
                Some(device_msg) => {
                    let _ = self.on_command(device_msg);
                }
                None => self.log.record(
                    &self.source,
                    "ignored_message",
                    fields([("payload", digest_hex(&msg.payload))]),
                ),
            }
        }
        progressed
    }

    /// Attempts to decode the accumulated frame lengths into a bootstrap
    /// payload; any decode failure leaves the device blank, waiting for the
    /// next transmission.
    ///
    /// The buffer may hold several transmissions (a damaged one followed by
    /// a retry), so decoding is attempted from each preamble start, newest
    /// first.
    fn try_bootstrap(&mut self) {
        let mut starts: Vec<usize> = self
            .frame_buffer
            .iter()
            .enumerate()
            .filter(|(_, f)| f.get() == sidechannel::PREAMBLE_FRAMES[0])
            .map(|(i, _)| i)
            .collect();
        if starts.first() != Some(&0) {
            starts.insert(0, 0);
        }

        let mut last_err = sidechannel::CodecError::NoPreamble;
        let payload = starts.iter().rev().find_map(|&start| {
            sidechannel::decode(&self.frame_buffer[start..])
                .map_err(|err| last_err = err)
                .ok()
        });
        let Some(payload) = payload else {
            self.log.record(
                &self.source,
                "bootstrap_retry",
                fields([("reason", last_err.to_string())]),
            );
            return;
        };
        self.frame_buffer.clear();

        let Ok(bootstrap) = BootstrapPayload::from_bytes(&payload) else {
            self.log.record(&self.source, "bootstrap_retry", fields([("reason", "not a bootstrap payload".into())]));
            return;
        };

        let enroll = GatewayCtl::Enroll {
            device_id: hex::encode(self.device_id),
            nonce_echo: hex::encode(bootstrap.enrollment_nonce),
        };
        self.broker.publish(
            &topics::gateway_ctl(&bootstrap.gateway_id),
            &messages::encode(&enroll),
        );
        self.phase = DevicePhase::Enrolling;
        self.log.record(
            &self.source,
            "enrollment_sent",
            fields([
                ("ssid", bootstrap.ssid.clone()),
                ("gateway", hex::encode(bootstrap.gateway_id)),
            ]),
        );
    }

    /// Handles one message from the device's command topic.
    pub fn on_command(&mut self, msg: DeviceMsg) -> Result<(), DeviceError> {
        if self.phase == DevicePhase::Revoked {
            self.log.record(&self.source, "command_rejected", fields([("reason", "revoked".into())]));
            return Err(DeviceError::CommandRejected);
        }
        match msg {
            DeviceMsg::Credentials { access_token, network_credential } => {
                self.on_credentials(&access_token, &network_credential);
                Ok(())
            }
            DeviceMsg::AuthGrant { tag } => {
                self.require_tag("U2F_AUTHENTICATED", "", &tag)?;
                let deadline = self.clock.now().plus_secs(AUTH_WINDOW_SECS);
                self.authenticated_until = Some(deadline);
                self.log.record(
                    &self.source,
                    "auth_window_open",
                    fields([("until", deadline.as_millis().to_string())]),
                );
                Ok(())
            }
            DeviceMsg::Command { name, tag } => {
                self.require_tag("command", &name, &tag)?;
                if name == "open" {
                    // The critical actuator: only inside a grant window.
                    let in_window = self
                        .authenticated_until
                        .take()
                        .is_some_and(|deadline| self.clock.now() <= deadline);
                    if !in_window {
                        self.log.record(
                            &self.source,
                            "command_rejected",
                            fields([("reason", "no_auth_window".into()), ("command", name)]),
                        );
                        return Err(DeviceError::CommandRejected);
                    }
                    self.camera_on = true;
                    self.log.record(&self.source, "camera_on", fields([]));
                } else {
                    self.log.record(&self.source, "command_executed", fields([("command", name)]));
                }
                Ok(())
            }
            DeviceMsg::Revoke { tag } => {
                self.require_tag("revoke", "", &tag)?;
                self.phase = DevicePhase::Revoked;
                self.camera_on = false;
                self.authenticated_until = None;
                self.log.record(&self.source, "revoked", fields([]));
                Ok(())
            }
        }
    }

    fn on_credentials(&mut self, access_token: &str, network_credential: &str) {
        if self.phase != DevicePhase::Enrolling {
            self.log.record(
                &self.source,
                "credentials_ignored",
                fields([("phase", self.phase.name().into())]),
            );
            return;
        }
        let Some(token) = hex::decode(access_token)
            .ok()
            .and_then(|b| <[u8; 32]>::try_from(b).ok())
        else {
            self.log.record(&self.source, "credentials_ignored", fields([("phase", "malformed".into())]));
            return;
        };
        self.access_token = Some(token);
        self.network_credential = Some(network_credential.to_string());
        self.phase = DevicePhase::Bound;
        self.log.record(&self.source, "bound", fields([("token", digest_hex(&token))]));
    }

    fn require_tag(&self, kind: &str, body: &str, tag: &str) -> Result<(), DeviceError> {
        let valid = self
            .access_token
            .as_ref()
            .is_some_and(|t| verify_device_msg_tag(t, &self.device_id, kind, body, tag));
        if !valid {
            self.log.record(
                &self.source,
                "command_rejected",
                fields([("reason", "bad_tag".into()), ("kind", kind.into())]),
            );
            return Err(DeviceError::CommandRejected);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy;
    use crate::messages::device_msg_tag;
    use crate::net::{Broker, Radio, RadioConfig};

    struct Rig {
        clock: SimClock,
        log: EventLog,
        broker: Broker,
        radio: Radio,
        device: Device,
    }

    const DEVICE_ID: [u8; 8] = [0x11; 8];
    const GATEWAY_ID: [u8; 8] = [0x22; 8];
    const TOKEN: [u8; 32] = [0x33; 32];

    fn rig(noise: RadioConfig) -> Rig {
        let clock = SimClock::new();
        let log = EventLog::new(clock.clone());
        let broker = Broker::new(log.clone());
        let radio = Radio::new(noise, log.clone());
        let device = Device::new(
            broker.clone(),
            radio.listen("device"),
            clock.clone(),
            log.clone(),
            DEVICE_ID,
        );
        Rig { clock, log, broker, radio, device }
    }

    fn bootstrap_frames(nonce: [u8; 16]) -> Vec<FrameLength> {
        let payload = BootstrapPayload {
            ssid: "hotel-guest".into(),
            enrollment_nonce: nonce,
            gateway_id: GATEWAY_ID,
        };
        sidechannel::encode(&payload.to_bytes().unwrap()).unwrap()
    }

    fn bind(rig: &mut Rig) {
        rig.radio.broadcast(&bootstrap_frames([0x44; 16]));
        rig.device.poll();
        assert_eq!(rig.device.phase(), DevicePhase::Enrolling);
        rig.device
            .on_command(DeviceMsg::Credentials {
                access_token: hex::encode(TOKEN),
                network_credential: "wpa2:secret".into(),
            })
            .unwrap();
        assert_eq!(rig.device.phase(), DevicePhase::Bound);
    }

    fn grant(rig: &mut Rig) {
        rig.device
            .on_command(DeviceMsg::AuthGrant {
                tag: device_msg_tag(&TOKEN, &DEVICE_ID, "U2F_AUTHENTICATED", ""),
            })
            .unwrap();
    }

    fn open_cmd() -> DeviceMsg {
        DeviceMsg::Command {
            name: "open".into(),
            tag: device_msg_tag(&TOKEN, &DEVICE_ID, "command", "open"),
        }
    }

    #[test]
    fn bootstrap_broadcast_triggers_enrollment_with_echoed_nonce() {
        let mut r = rig(RadioConfig::clean(1));
        let gateway_side = r.broker.subscribe(&topics::gateway_ctl(&GATEWAY_ID));
        let nonce = [0x55; 16];
        r.radio.broadcast(&bootstrap_frames(nonce));
        assert!(r.device.poll());

        let msg: GatewayCtl = messages::decode(&gateway_side.try_recv().unwrap().payload).unwrap();
        let GatewayCtl::Enroll { device_id, nonce_echo } = msg else { panic!("{msg:?}") };
        assert_eq!(device_id, hex::encode(DEVICE_ID));
        assert_eq!(nonce_echo, hex::encode(nonce));
        assert_eq!(r.device.phase(), DevicePhase::Enrolling);
    }

    #[test]
    fn noisy_broadcast_within_tolerance_still_enrolls() {
        let mut r = rig(RadioConfig {
            duplicate_prob: 0.3,
            reorder_window: 1,
            drop_prob: 0.0,
            rng_seed: 2,
        });
        let gateway_side = r.broker.subscribe(&topics::gateway_ctl(&GATEWAY_ID));
        r.radio.broadcast(&bootstrap_frames([0x66; 16]));
        r.device.poll();
        assert_eq!(r.device.phase(), DevicePhase::Enrolling);
        assert!(gateway_side.try_recv().is_some());
    }

    #[test]
    fn crc_damaged_broadcast_sends_nothing() {
        let mut r = rig(RadioConfig::clean(3));
        let gateway_side = r.broker.subscribe(&topics::gateway_ctl(&GATEWAY_ID));
        let mut frames = bootstrap_frames([0x77; 16]);
        frames.remove(4); // drop a data frame
        r.radio.broadcast(&frames);
        r.device.poll();
        assert_eq!(r.device.phase(), DevicePhase::Blank);
        assert!(gateway_side.try_recv().is_none());
        // The next clean transmission recovers it.
        r.radio.broadcast(&bootstrap_frames([0x78; 16]));
        r.device.poll();
        assert_eq!(r.device.phase(), DevicePhase::Enrolling);
    }

    #[test]
    fn credentials_only_count_when_enrolling() {
        let mut r = rig(RadioConfig::clean(4));
        let creds = DeviceMsg::Credentials {
            access_token: hex::encode(TOKEN),
            network_credential: "wpa2:secret".into(),
        };
        // Blank device ignores them.
        r.device.on_command(creds.clone()).unwrap();
        assert_eq!(r.device.phase(), DevicePhase::Blank);

        bind(&mut r);
        // Second delivery is ignored too.
        r.device
            .on_command(DeviceMsg::Credentials {
                access_token: hex::encode([0x99; 32]),
                network_credential: "other".into(),
            })
            .unwrap();
        assert_eq!(r.device.access_token(), Some(TOKEN));
    }

    #[test]
    fn grant_then_open_turns_the_camera_on() {
        let mut r = rig(RadioConfig::clean(5));
        bind(&mut r);
        grant(&mut r);
        r.device.on_command(open_cmd()).unwrap();
        assert!(r.device.camera_on());
    }

    #[test]
    fn open_without_grant_is_rejected() {
        let mut r = rig(RadioConfig::clean(6));
        bind(&mut r);
        assert_eq!(r.device.on_command(open_cmd()).unwrap_err(), DeviceError::CommandRejected);
        assert!(!r.device.camera_on());
    }

    #[test]
    fn grant_window_expires() {
        let mut r = rig(RadioConfig::clean(7));
        bind(&mut r);
        grant(&mut r);
        r.clock.advance_secs(AUTH_WINDOW_SECS + 1);
        assert_eq!(r.device.on_command(open_cmd()).unwrap_err(), DeviceError::CommandRejected);
        assert!(!r.device.camera_on());
    }

    #[test]
    fn grant_is_single_use() {
        let mut r = rig(RadioConfig::clean(8));
        bind(&mut r);
        grant(&mut r);
        r.device.on_command(open_cmd()).unwrap();
        // Window consumed: camera already on, but a forged second open after
        // reset must not ride the same grant.
        r.device.camera_on = false;
        assert_eq!(r.device.on_command(open_cmd()).unwrap_err(), DeviceError::CommandRejected);
        assert!(!r.device.camera_on());
    }

    #[test]
    fn bad_tags_are_rejected() {
        let mut r = rig(RadioConfig::clean(9));
        bind(&mut r);
        let err = r
            .device
            .on_command(DeviceMsg::AuthGrant { tag: "00".repeat(16) })
            .unwrap_err();
        assert_eq!(err, DeviceError::CommandRejected);

        let err = r
            .device
            .on_command(DeviceMsg::Command {
                name: "open".into(),
                // Tag minted for a different command.
                tag: device_msg_tag(&TOKEN, &DEVICE_ID, "command", "status"),
            })
            .unwrap_err();
        assert_eq!(err, DeviceError::CommandRejected);
        assert!(!r.device.camera_on());
    }

    #[test]
    fn non_critical_commands_run_without_a_window() {
        let mut r = rig(RadioConfig::clean(10));
        bind(&mut r);
        r.device
            .on_command(DeviceMsg::Command {
                name: "status".into(),
                tag: device_msg_tag(&TOKEN, &DEVICE_ID, "command", "status"),
            })
            .unwrap();
        assert!(r.log.snapshot().iter().any(|e| e.kind == "command_executed"));
    }

    #[test]
    fn revocation_kills_the_actuator_and_everything_after() {
        let mut r = rig(RadioConfig::clean(11));
        bind(&mut r);
        grant(&mut r);
        r.device.on_command(open_cmd()).unwrap();
        assert!(r.device.camera_on());

        r.device
            .on_command(DeviceMsg::Revoke {
                tag: device_msg_tag(&TOKEN, &DEVICE_ID, "revoke", ""),
            })
            .unwrap();
        assert_eq!(r.device.phase(), DevicePhase::Revoked);
        assert!(!r.device.camera_on());
        assert_eq!(r.device.on_command(open_cmd()).unwrap_err(), DeviceError::CommandRejected);
    }

    #[test]
    fn ignores_malformed_broker_payloads() {
        let mut r = rig(RadioConfig::clean(12));
        r.broker.publish(&topics::device_cmd(&DEVICE_ID), b"gibberish");
        r.device.poll();
        assert!(r.log.snapshot().iter().any(|e| e.kind == "ignored_message"));
    }

    #[test]
    fn device_never_radios_its_secrets() {
        // The device has no radio transmitter at all; the strongest check is
        // that enrollment traffic carries only the echoed nonce and id.
        let mut r = rig(RadioConfig::clean(13));
        let gateway_side = r.broker.subscribe(&topics::gateway_ctl(&GATEWAY_ID));
        bind(&mut r);
        let _ = entropy::root(0); // keep the import honest
        for msg in gateway_side.drain() {
            let text = String::from_utf8_lossy(&msg.payload).to_string();
            assert!(!text.contains(&hex::encode(TOKEN)));
            assert!(!text.contains("wpa2:secret"));
        }
    }
}
