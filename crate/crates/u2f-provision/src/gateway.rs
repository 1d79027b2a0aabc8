//! Secure gateway.
//!
//! The router-like node that hosts the U2F token. It opens provisioning
//! windows (WPS button), broadcasts bootstrap material over the radio,
//! verifies device enrollment echoes, relays ceremony requests from the
//! cloud to the token, and notifies the cloud when the token departs so all
//! of its bindings can be revoked.
//!
//! Mode transitions:
//!
//! ```text
//! Idle -> Provisioning        WPS pressed, window opens
//! Provisioning -> Idle        window expires
//! Provisioning -> AwaitingToken   valid enrollment accepted
//! AwaitingToken -> Relaying   enrollment ceremony response produced
//! AwaitingToken -> Idle       expiry or abort
//! Relaying -> Idle            cloud settles the binding
//! ```

use std::collections::HashSet;

use thiserror::Error;

use crate::entropy::{self, Entropy};
use crate::messages::{self, topics, GatewayCtl, U2fHostRequest, U2fOutcome, U2fResponseMsg};
use crate::net::log::fields;
use crate::net::{digest_hex, Broker, EventLog, Radio, Subscription};
use crate::sidechannel::{self, BootstrapPayload};
use crate::time::{SimClock, SimTime};
use crate::token::{Token, TokenError};
use crate::u2f::{AppParameter, Challenge, KeyHandle, PresenceMode};

/// Provisioning window length, in simulated seconds.
pub const PROVISIONING_WINDOW_SECS: u64 = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("a provisioning window or ceremony is already in progress")]
    WindowAlreadyOpen,
    #[error("no open provisioning window")]
    WindowClosed,
    #[error("enrollment nonce does not match the current window")]
    NonceMismatch,
}

/// Gateway operating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatewayMode {
    Idle,
    Provisioning { deadline: SimTime },
    AwaitingToken { deadline: SimTime, device_id: [u8; 8] },
    Relaying { device_id: [u8; 8] },
}

impl GatewayMode {
    pub fn name(&self) -> &'static str {
        match self {
            GatewayMode::Idle => "idle",
            GatewayMode::Provisioning { .. } => "provisioning",
            GatewayMode::AwaitingToken { .. } => "awaiting_token",
            GatewayMode::Relaying { .. } => "relaying",
        }
    }
}

pub struct Gateway {
    gateway_id: [u8; 8],
    ssid: String,
    mode: GatewayMode,
    token: Option<Token>,
    /// Digest of the key handle from the last registration this gateway
    /// relayed; what the unbind notice reports when the token leaves.
    bound_key_handle_digest: Option<[u8; 32]>,
    current_nonce: Option<[u8; 16]>,
    used_nonces: HashSet<[u8; 16]>,
    /// Ceremony held until the user answers the presence cue.
    pending_presence: Option<U2fHostRequest>,
    host_sub: Subscription,
    ctl_sub: Subscription,
    broker: Broker,
    radio: Radio,
    clock: SimClock,
    log: EventLog,
    rng: Entropy,
}

impl Gateway {
    pub fn new(
        broker: Broker,
        radio: Radio,
        clock: SimClock,
        log: EventLog,
        mut rng: Entropy,
        ssid: &str,
    ) -> Self {
        let gateway_id: [u8; 8] = entropy::bytes(&mut rng);
        let host_sub = broker.subscribe(topics::U2F_HOST);
        let ctl_sub = broker.subscribe(&topics::gateway_ctl(&gateway_id));
        Gateway {
            gateway_id,
            ssid: ssid.to_string(),
            mode: GatewayMode::Idle,
            token: None,
            bound_key_handle_digest: None,
            current_nonce: None,
            used_nonces: HashSet::new(),
            pending_presence: None,
            host_sub,
            ctl_sub,
            broker,
            radio,
            clock,
            log,
            rng,
        }
    }

    pub fn gateway_id(&self) -> [u8; 8] {
        self.gateway_id
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn has_token(&self) -> bool {
        self.token.is_some()
    }

    pub fn token_mut(&mut self) -> Option<&mut Token> {
        self.token.as_mut()
    }

    pub fn attach_token(&mut self, mut token: Token) {
        token.insert();
        self.log.record(
            "gateway",
            "token_attached",
            fields([("token", hex::encode(token.id_digest()))]),
        );
        self.token = Some(token);
    }

    /// The token leaves with its owner: abort anything in flight and tell
    /// the cloud to revoke every binding tied to it.
    pub fn detach_token(&mut self) -> Option<Token> {
        let mut token = self.token.take()?;
        token.remove();

        if let Some(request) = self.pending_presence.take() {
            self.fail_ceremony(ceremony_of(&request), "ceremony_aborted");
        }
        match self.mode {
            GatewayMode::AwaitingToken { .. } | GatewayMode::Relaying { .. } => {
                self.log.record("gateway", "ceremony_aborted", fields([]));
                self.mode = GatewayMode::Idle;
            }
            _ => {}
        }

        let notice = messages::UnbindNotice {
            gateway_id: hex::encode(self.gateway_id),
            key_handle_digest: self.bound_key_handle_digest.map(hex::encode),
        };
        self.broker.publish(topics::CLOUD_UNBIND, &messages::encode(&notice));
        self.log.record(
            "gateway",
            "token_removed",
            fields([(
                "key_handle_digest",
                notice.key_handle_digest.clone().unwrap_or_else(|| "none".into()),
            )]),
        );
        Some(token)
    }

    /// WPS button: opens a provisioning window and broadcasts the bootstrap
    /// payload (SSID, fresh enrollment nonce, gateway id — no passphrase)
    /// over the radio.
    pub fn press_wps(&mut self) -> Result<(), GatewayError> {
        self.expire_windows();
        if self.mode != GatewayMode::Idle {
            return Err(GatewayError::WindowAlreadyOpen);
        }

        let nonce: [u8; 16] = entropy::bytes(&mut self.rng);
        let deadline = self.clock.now().plus_secs(PROVISIONING_WINDOW_SECS);
        self.current_nonce = Some(nonce);
        self.mode = GatewayMode::Provisioning { deadline };

        let payload = BootstrapPayload {
            ssid: self.ssid.clone(),
            enrollment_nonce: nonce,
            gateway_id: self.gateway_id,
        };
        let bytes = payload.to_bytes().expect("ssid fits the bootstrap layout");
        let frames = sidechannel::encode(&bytes).expect("bootstrap payload fits one transmission");

        self.log.record(
            "gateway",
            "window_open",
            fields([
                ("deadline", deadline.as_millis().to_string()),
                ("nonce", digest_hex(&nonce)),
            ]),
        );
        self.log.record(
            "gateway",
            "cue",
            fields([("what", "connect_device_within_window".into())]),
        );
        self.radio.broadcast(&frames);
        Ok(())
    }

    /// Validates a device's enrollment echo against the open window and
    /// forwards the binding request to the cloud.
    pub fn handle_enrollment(
        &mut self,
        device_id: [u8; 8],
        nonce_echo: [u8; 16],
    ) -> Result<(), GatewayError> {
        self.expire_windows();
        let GatewayMode::Provisioning { deadline } = self.mode else {
            return Err(GatewayError::WindowClosed);
        };
        if self.clock.now() > deadline {
            return Err(GatewayError::WindowClosed);
        }
        if self.used_nonces.contains(&nonce_echo) || self.current_nonce != Some(nonce_echo) {
            return Err(GatewayError::NonceMismatch);
        }

        // Nonce accepted: never again, including across window reopenings.
        self.used_nonces.insert(nonce_echo);
        self.current_nonce = None;

        let request = messages::BindRequest {
            device_id: hex::encode(device_id),
            gateway_id: hex::encode(self.gateway_id),
        };
        self.broker.publish(topics::CLOUD_BIND, &messages::encode(&request));
        self.mode = GatewayMode::AwaitingToken {
            deadline: self.clock.now().plus_secs(PROVISIONING_WINDOW_SECS),
            device_id,
        };
        self.log.record(
            "gateway",
            "enrollment_accepted",
            fields([("device", hex::encode(device_id))]),
        );
        Ok(())
    }

    /// True while a ceremony is parked on the user-presence cue.
    pub fn awaiting_presence(&self) -> bool {
        self.pending_presence.is_some()
    }

    /// Runs the parked ceremony. Call after pressing the token button; if
    /// the button was never pressed the token itself rejects the ceremony
    /// and the failure is relayed to the cloud.
    pub fn resume_pending(&mut self) {
        if let Some(request) = self.pending_presence.take() {
            self.execute_host_request(request);
        }
    }

    /// Declines the parked ceremony on the user's behalf.
    pub fn decline_pending(&mut self) {
        if let Some(request) = self.pending_presence.take() {
            self.log.record("gateway", "presence_declined", fields([]));
            self.fail_ceremony(ceremony_of(&request), "presence_declined");
        }
    }

    /// Drains broker subscriptions; returns whether anything was processed.
    pub fn poll(&mut self) -> bool {
        self.expire_windows();
        let mut progressed = false;

        for msg in self.ctl_sub.drain() {
            progressed = true;
            match messages::decode::<GatewayCtl>(&msg.payload) {
                Some(GatewayCtl::Enroll { device_id, nonce_echo }) => {
                    match (parse_id(&device_id), parse_nonce(&nonce_echo)) {
                        (Some(device_id), Some(nonce_echo)) => {
                            if let Err(err) = self.handle_enrollment(device_id, nonce_echo) {
                                self.log.record(
                                    "gateway",
                                    "enrollment_rejected",
                                    fields([("reason", error_token(&err).into())]),
                                );
                            }
                        }
                        _ => self.log_ignored(&msg.payload),
                    }
                }
                Some(GatewayCtl::BindResult { device_id, ok }) => {
                    if let GatewayMode::Relaying { device_id: current } = self.mode {
                        if parse_id(&device_id) == Some(current) {
                            self.mode = GatewayMode::Idle;
                        }
                    }
                    self.log.record(
                        "gateway",
                        "bind_settled",
                        fields([("device", device_id), ("ok", ok.to_string())]),
                    );
                }
                None => self.log_ignored(&msg.payload),
            }
        }

        for msg in self.host_sub.drain() {
            progressed = true;
            match messages::decode::<U2fHostRequest>(&msg.payload) {
                Some(request) => self.handle_host_request(request),
                None => self.log_ignored(&msg.payload),
            }
        }
        progressed
    }

    fn handle_host_request(&mut self, request: U2fHostRequest) {
        let Some(token) = &self.token else {
            self.fail_ceremony(ceremony_of(&request), "token_absent");
            return;
        };
        if token.presence_armed() {
            self.execute_host_request(request);
        } else {
            // Hold the ceremony and cue the user; the scenario driver
            // answers by pressing the button (or declining).
            self.log.record("gateway", "cue", fields([("what", "press_token_button".into())]));
            self.pending_presence = Some(request);
        }
    }

    fn execute_host_request(&mut self, request: U2fHostRequest) {
        match request {
            U2fHostRequest::Register { ceremony, app, challenge } => {
                let (Some(app), Some(challenge)) = (parse_app(&app), parse_challenge(&challenge))
                else {
                    self.fail_ceremony(ceremony, "malformed_request");
                    return;
                };
                let token = self.token.as_mut().expect("checked by caller");
                match token.handle_register(&app, &challenge) {
                    Ok(response) => {
                        self.bound_key_handle_digest = Some(response.key_handle.digest());
                        let bytes = response.to_bytes();
                        self.log.record(
                            "gateway",
                            "register_relayed",
                            fields([("ceremony", ceremony.to_string()), ("response", digest_hex(&bytes))]),
                        );
                        self.publish_response(U2fResponseMsg {
                            ceremony,
                            outcome: U2fOutcome::Register { response: hex::encode(bytes) },
                        });
                    }
                    Err(err) => self.fail_ceremony(ceremony, token_error_token(&err)),
                }
            }
            U2fHostRequest::Authenticate { ceremony, app, challenge, key_handle } => {
                let (Some(app), Some(challenge), Ok(key_handle)) = (
                    parse_app(&app),
                    parse_challenge(&challenge),
                    hex::decode(&key_handle).map_err(|_| ()).and_then(|b| {
                        KeyHandle::from_bytes(b).map_err(|_| ())
                    }),
                ) else {
                    self.fail_ceremony(ceremony, "malformed_request");
                    return;
                };
                let token = self.token.as_mut().expect("checked by caller");
                match token.handle_authenticate(&app, &challenge, &key_handle, PresenceMode::Required)
                {
                    Ok(response) => {
                        let bytes = response.to_bytes();
                        self.log.record(
                            "gateway",
                            "authenticate_relayed",
                            fields([
                                ("ceremony", ceremony.to_string()),
                                ("counter", response.counter.to_string()),
                                ("response", digest_hex(&bytes)),
                            ]),
                        );
                        if let GatewayMode::AwaitingToken { device_id, .. } = self.mode {
                            self.mode = GatewayMode::Relaying { device_id };
                        }
                        self.publish_response(U2fResponseMsg {
                            ceremony,
                            outcome: U2fOutcome::Authenticate { response: hex::encode(bytes) },
                        });
                    }
                    Err(err) => self.fail_ceremony(ceremony, token_error_token(&err)),
                }
            }
        }
    }

    fn fail_ceremony(&mut self, ceremony: u64, reason: &str) {
        self.log.record(
            "gateway",
            "ceremony_failed",
            fields([("ceremony", ceremony.to_string()), ("reason", reason.into())]),
        );
        self.publish_response(U2fResponseMsg {
            ceremony,
            outcome: U2fOutcome::Failed { reason: reason.to_string() },
        });
    }

    fn publish_response(&self, response: U2fResponseMsg) {
        self.broker
            .publish(topics::U2F_RESPONSE, &messages::encode(&response));
    }

    fn expire_windows(&mut self) {
        let now = self.clock.now();
        let expired = match self.mode {
            GatewayMode::Provisioning { deadline } | GatewayMode::AwaitingToken { deadline, .. } => {
                now > deadline
            }
            _ => false,
        };
        if expired {
            self.log.record("gateway", "window_expired", fields([("mode", self.mode.name().into())]));
            self.mode = GatewayMode::Idle;
            self.current_nonce = None;
        }
    }

    fn log_ignored(&self, payload: &[u8]) {
        self.log.record(
            "gateway",
            "ignored_message",
            fields([("payload", digest_hex(payload))]),
        );
    }
}

fn ceremony_of(request: &U2fHostRequest) -> u64 {
    match request {
        U2fHostRequest::Register { ceremony, .. }
        | U2fHostRequest::Authenticate { ceremony, .. } => *ceremony,
    }
}

fn error_token(err: &GatewayError) -> &'static str {
    match err {
        GatewayError::WindowAlreadyOpen => "window_already_open",
        GatewayError::WindowClosed => "window_closed",
        GatewayError::NonceMismatch => "nonce_mismatch",
    }
}

fn token_error_token(err: &TokenError) -> &'static str {
    match err {
        TokenError::TokenAbsent => "token_absent",
        TokenError::PresenceRequired => "presence_required",
        TokenError::StateCorrupt => "state_corrupt",
        TokenError::U2f(crate::u2f::U2fError::BadKeyHandle) => "bad_key_handle",
        TokenError::U2f(crate::u2f::U2fError::OriginMismatch) => "origin_mismatch",
        TokenError::U2f(_) => "u2f_error",
    }
}

fn parse_id(hex_str: &str) -> Option<[u8; 8]> {
    hex::decode(hex_str).ok()?.try_into().ok()
}

fn parse_nonce(hex_str: &str) -> Option<[u8; 16]> {
    hex::decode(hex_str).ok()?.try_into().ok()
}

fn parse_app(hex_str: &str) -> Option<AppParameter> {
    let bytes: [u8; 32] = hex::decode(hex_str).ok()?.try_into().ok()?;
    Some(AppParameter::from_bytes(bytes))
}

fn parse_challenge(hex_str: &str) -> Option<Challenge> {
    let bytes: [u8; 32] = hex::decode(hex_str).ok()?.try_into().ok()?;
    Some(Challenge::from_bytes(bytes))
}
