//! IoT cloud with built-in U2F verification.
//!
//! One service, two faces: the U2F server side issues challenges and
//! verifies responses (including the anti-clone counter check), and the IoT
//! side keeps the account and device registries, classifies operations, and
//! dispatches commands. Critical commands reach a device only after a
//! verified, user-present authentication for that exact challenge; the
//! device then receives `U2F_AUTHENTICATED` followed by the command, each
//! carrying a keyed tag under the device's access token.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use crate::entropy::{self, Entropy};
use crate::messages::{
    self, device_msg_tag, topics, BindRequest, DeviceMsg, GatewayCtl, U2fHostRequest, U2fOutcome,
    U2fResponseMsg, UnbindNotice,
};
use crate::net::log::fields;
use crate::net::{digest_hex, Broker, EventLog, Subscription};
use crate::time::{SimClock, SimTime};
use crate::u2f::{
    self, AppParameter, AuthResponse, Challenge, KeyHandle, PresenceMode, RegistrationResponse,
};

/// Challenge lifetime, in simulated seconds.
pub const CHALLENGE_EXPIRY_SECS: u64 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CloudError {
    #[error("no token binding for that account")]
    NoSuchBinding,
    #[error("challenge has expired")]
    ChallengeExpired,
    #[error("no such pending challenge")]
    UnknownChallenge,
    #[error("signed counter did not advance: clone or replay")]
    CounterRegression,
    #[error("binding ceremony has not completed")]
    BindingNotAuthorized,
    #[error("device binding is revoked")]
    DeviceRevoked,
    #[error("device is not bound")]
    DeviceNotBound,
    #[error("no such device")]
    NoSuchDevice,
    #[error(transparent)]
    U2f(#[from] u2f::U2fError),
}

/// Operation classes, per the configured policy table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperationClass {
    Registration,
    Critical,
    NonCritical,
}

impl OperationClass {
    pub fn name(&self) -> &'static str {
        match self {
            OperationClass::Registration => "registration",
            OperationClass::Critical => "critical",
            OperationClass::NonCritical => "non_critical",
        }
    }
}

/// One U2F token bound to an account.
#[derive(Debug, Clone)]
pub struct TokenBinding {
    pub public_key: [u8; 65],
    pub key_handle: KeyHandle,
    /// Highest counter the verifier has accepted for this binding.
    pub last_counter: u32,
}

#[derive(Debug, Clone, Default)]
pub struct AccountRecord {
    pub bound_tokens: Vec<TokenBinding>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceBindingState {
    Pending,
    Bound,
    Revoked,
}

impl DeviceBindingState {
    pub fn name(&self) -> &'static str {
        match self {
            DeviceBindingState::Pending => "pending",
            DeviceBindingState::Bound => "bound",
            DeviceBindingState::Revoked => "revoked",
        }
    }
}

/// Per-device credential issued at binding.
#[derive(Clone)]
pub struct AccessToken {
    pub token_bytes: [u8; 32],
    pub issued_at: SimTime,
    pub revoked: bool,
}

impl std::fmt::Debug for AccessToken {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "AccessToken({}, revoked={})", digest_hex(&self.token_bytes), self.revoked)
    }
}

#[derive(Debug, Clone)]
pub struct DeviceRecord {
    pub device_id: [u8; 8],
    pub account_id: String,
    pub bound_key_handle_digest: [u8; 32],
    pub access_token: Option<AccessToken>,
    pub state: DeviceBindingState,
}

/// What `execute_operation` did immediately; ceremony outcomes arrive later
/// through the broker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Dispatch {
    /// Non-critical: command already published to the device.
    Immediate,
    /// Critical: authentication ceremony started.
    CeremonyStarted { ceremony: u64 },
    /// Registration-class command: registration ceremony started.
    RegistrationStarted { ceremony: u64 },
}

enum CeremonyKind {
    Registration,
    Authentication { binding_digest: [u8; 32], purpose: AuthPurpose },
}

enum AuthPurpose {
    BindDevice { device_id: [u8; 8] },
    Operation { device_id: [u8; 8], command: String },
}

struct PendingCeremony {
    account_id: String,
    challenge: Challenge,
    expires: SimTime,
    kind: CeremonyKind,
}

struct PendingBind {
    gateway_id: [u8; 8],
    authorized: bool,
}

pub struct CloudService {
    app: AppParameter,
    /// The real infrastructure credential, delivered to a device only after
    /// its binding ceremony succeeds — never broadcast.
    network_credential: String,
    default_account: String,
    accounts: BTreeMap<String, AccountRecord>,
    devices: BTreeMap<[u8; 8], DeviceRecord>,
    policy: BTreeMap<String, OperationClass>,
    pending: BTreeMap<u64, PendingCeremony>,
    pending_binds: BTreeMap<[u8; 8], PendingBind>,
    issued_tokens: HashSet<[u8; 32]>,
    next_ceremony: u64,
    response_sub: Subscription,
    bind_sub: Subscription,
    unbind_sub: Subscription,
    broker: Broker,
    clock: SimClock,
    log: EventLog,
    rng: Entropy,
}

impl CloudService {
    pub fn new(
        broker: Broker,
        clock: SimClock,
        log: EventLog,
        rng: Entropy,
        origin: &str,
        network_credential: &str,
        default_account: &str,
    ) -> Self {
        let app = AppParameter::from_origin(origin).expect("cloud origin must be non-empty");
        // Default policy per the operation classes: `open` drives the
        // critical actuator, `register` runs a U2F registration.
        let policy = BTreeMap::from([
            ("open".to_string(), OperationClass::Critical),
            ("register".to_string(), OperationClass::Registration),
        ]);
        CloudService {
            app,
            network_credential: network_credential.to_string(),
            default_account: default_account.to_string(),
            accounts: BTreeMap::new(),
            devices: BTreeMap::new(),
            policy,
            pending: BTreeMap::new(),
            pending_binds: BTreeMap::new(),
            issued_tokens: HashSet::new(),
            next_ceremony: 0,
            response_sub: broker.subscribe(topics::U2F_RESPONSE),
            bind_sub: broker.subscribe(topics::CLOUD_BIND),
            unbind_sub: broker.subscribe(topics::CLOUD_UNBIND),
            broker,
            clock,
            log,
            rng,
        }
    }

    pub fn app(&self) -> &AppParameter {
        &self.app
    }

    pub fn account(&self, account_id: &str) -> Option<&AccountRecord> {
        self.accounts.get(account_id)
    }

    pub fn device(&self, device_id: &[u8; 8]) -> Option<&DeviceRecord> {
        self.devices.get(device_id)
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceRecord> {
        self.devices.values()
    }

    pub fn set_policy(&mut self, command: &str, class: OperationClass) {
        self.log.record(
            "cloud",
            "policy_set",
            fields([("command", command.into()), ("class", class.name().into())]),
        );
        self.policy.insert(command.to_string(), class);
    }

    /// Classifies a command; unknown commands default to non-critical.
    pub fn classify_operation(&self, command: &str) -> OperationClass {
        self.policy
            .get(command)
            .copied()
            .unwrap_or(OperationClass::NonCritical)
    }

    /// Current policy table, ordered by command.
    pub fn policy_table(&self) -> impl Iterator<Item = (&str, OperationClass)> {
        self.policy.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Issues a fresh challenge and publishes the matching `u2f_host`
    /// request. Returns the ceremony id responses must echo.
    fn new_challenge(&mut self, account_id: &str, kind: CeremonyKind) -> u64 {
        self.next_ceremony += 1;
        let ceremony = self.next_ceremony;
        let challenge = Challenge::generate(&mut self.rng);
        let expires = self.clock.now().plus_secs(CHALLENGE_EXPIRY_SECS);

        let request = match &kind {
            CeremonyKind::Registration => U2fHostRequest::Register {
                ceremony,
                app: hex::encode(self.app.as_bytes()),
                challenge: hex::encode(challenge.as_bytes()),
            },
            CeremonyKind::Authentication { binding_digest, .. } => {
                let binding = self
                    .binding(account_id, binding_digest)
                    .expect("caller validated the binding");
                U2fHostRequest::Authenticate {
                    ceremony,
                    app: hex::encode(self.app.as_bytes()),
                    challenge: hex::encode(challenge.as_bytes()),
                    key_handle: hex::encode(binding.key_handle.as_bytes()),
                }
            }
        };

        self.pending.insert(
            ceremony,
            PendingCeremony {
                account_id: account_id.to_string(),
                challenge,
                expires,
                kind,
            },
        );
        self.log.record(
            "cloud",
            "challenge_issued",
            fields([
                ("ceremony", ceremony.to_string()),
                ("kind", request_kind(&request).into()),
                ("challenge", digest_hex(challenge.as_bytes())),
            ]),
        );
        self.broker.publish(topics::U2F_HOST, &messages::encode(&request));
        ceremony
    }

    /// Starts a U2F registration ceremony for `account_id`.
    pub fn start_registration(&mut self, account_id: &str) -> u64 {
        self.accounts.entry(account_id.to_string()).or_default();
        self.new_challenge(account_id, CeremonyKind::Registration)
    }

    /// Completes a registration ceremony from a raw response.
    pub fn finish_registration(&mut self, ceremony: u64, response: &[u8]) -> Result<(), CloudError> {
        let pending = self.take_pending(ceremony)?;
        let CeremonyKind::Registration = pending.kind else {
            return Err(CloudError::UnknownChallenge);
        };

        let parsed = RegistrationResponse::from_bytes(response)?;
        let (public_key, key_handle) =
            u2f::verify_registration(&parsed, &self.app, &pending.challenge)?;

        let digest = key_handle.digest();
        let account = self.accounts.entry(pending.account_id.clone()).or_default();
        // Re-registering an identical handle keeps its counter state; the
        // verifier never forgets what it has seen.
        let last_counter = account
            .bound_tokens
            .iter()
            .find(|b| b.key_handle.digest() == digest)
            .map(|b| b.last_counter)
            .unwrap_or(0);
        account.bound_tokens.retain(|b| b.key_handle.digest() != digest);
        account.bound_tokens.push(TokenBinding {
            public_key,
            key_handle,
            last_counter,
        });

        self.log.record(
            "cloud",
            "registration_verified",
            fields([
                ("ceremony", ceremony.to_string()),
                ("account", pending.account_id.clone()),
                ("key_handle", hex::encode(digest)),
            ]),
        );
        // The paper's flow now asks the user which operations count as
        // important; the policy table is where the answer lands.
        self.log.record("cloud", "policy_prompt", fields([("account", pending.account_id)]));
        Ok(())
    }

    /// Completes an authentication ceremony from a raw response, enforcing
    /// signature validity and the anti-clone counter.
    pub fn finish_authentication(&mut self, ceremony: u64, response: &[u8]) -> Result<(), CloudError> {
        let pending = self.take_pending(ceremony)?;
        let CeremonyKind::Authentication { binding_digest, purpose } = pending.kind else {
            return Err(CloudError::UnknownChallenge);
        };

        let parsed = AuthResponse::from_bytes(response)?;
        let binding = self
            .binding(&pending.account_id, &binding_digest)
            .ok_or(CloudError::NoSuchBinding)?;
        let public_key = binding.public_key;
        let last_counter = binding.last_counter;

        let counter = u2f::verify_authentication(
            &public_key,
            &self.app,
            &pending.challenge,
            &parsed,
            PresenceMode::Required,
        )?;
        if counter <= last_counter {
            self.log.record(
                "cloud",
                "counter_regression",
                fields([
                    ("ceremony", ceremony.to_string()),
                    ("counter", counter.to_string()),
                    ("last_counter", last_counter.to_string()),
                ]),
            );
            return Err(CloudError::CounterRegression);
        }

        self.binding_mut(&pending.account_id, &binding_digest)
            .expect("binding just read")
            .last_counter = counter;
        self.log.record(
            "cloud",
            "auth_verified",
            fields([
                ("ceremony", ceremony.to_string()),
                ("account", pending.account_id.clone()),
                ("counter", counter.to_string()),
            ]),
        );

        match purpose {
            AuthPurpose::BindDevice { device_id } => {
                if let Some(pending_bind) = self.pending_binds.get_mut(&device_id) {
                    pending_bind.authorized = true;
                }
                self.bind_device(&device_id, &pending.account_id.clone())?;
            }
            AuthPurpose::Operation { device_id, command } => {
                self.dispatch_authorized(&device_id, &command)?;
            }
        }
        Ok(())
    }

    /// Issues the access token and credentials for an authorized binding.
    pub fn bind_device(&mut self, device_id: &[u8; 8], account_id: &str) -> Result<(), CloudError> {
        let authorized = self
            .pending_binds
            .get(device_id)
            .is_some_and(|b| b.authorized);
        if !authorized {
            return Err(CloudError::BindingNotAuthorized);
        }
        let record = self.devices.get_mut(device_id).ok_or(CloudError::NoSuchDevice)?;
        if record.account_id != account_id {
            return Err(CloudError::BindingNotAuthorized);
        }

        // Fresh, run-unique access token.
        let token_bytes = loop {
            let candidate: [u8; 32] = entropy::bytes(&mut self.rng);
            if self.issued_tokens.insert(candidate) {
                break candidate;
            }
        };
        record.access_token = Some(AccessToken {
            token_bytes,
            issued_at: self.clock.now(),
            revoked: false,
        });
        record.state = DeviceBindingState::Bound;

        let bind = self.pending_binds.remove(device_id).expect("checked above");
        let credentials = DeviceMsg::Credentials {
            access_token: hex::encode(token_bytes),
            network_credential: self.network_credential.clone(),
        };
        self.broker
            .publish(&topics::device_cmd(device_id), &messages::encode(&credentials));
        let settled = GatewayCtl::BindResult {
            device_id: hex::encode(device_id),
            ok: true,
        };
        self.broker
            .publish(&topics::gateway_ctl(&bind.gateway_id), &messages::encode(&settled));
        self.log.record(
            "cloud",
            "access_token_issued",
            fields([
                ("device", hex::encode(device_id)),
                ("token", digest_hex(&token_bytes)),
            ]),
        );
        Ok(())
    }

    /// Runs `command` against a bound device, with classification deciding
    /// whether a U2F ceremony gates it.
    pub fn execute_operation(&mut self, device_id: &[u8; 8], command: &str) -> Result<Dispatch, CloudError> {
        let record = self.devices.get(device_id).ok_or(CloudError::NoSuchDevice)?;
        match record.state {
            DeviceBindingState::Revoked => return Err(CloudError::DeviceRevoked),
            DeviceBindingState::Pending => return Err(CloudError::DeviceNotBound),
            DeviceBindingState::Bound => {}
        }
        let account_id = record.account_id.clone();
        let binding_digest = record.bound_key_handle_digest;
        let class = self.classify_operation(command);
        self.log.record(
            "cloud",
            "operation_requested",
            fields([
                ("device", hex::encode(device_id)),
                ("command", command.into()),
                ("class", class.name().into()),
            ]),
        );

        match class {
            OperationClass::NonCritical => {
                self.publish_command(device_id, command)?;
                Ok(Dispatch::Immediate)
            }
            OperationClass::Critical => {
                if self.binding(&account_id, &binding_digest).is_none() {
                    return Err(CloudError::NoSuchBinding);
                }
                let ceremony = self.new_challenge(
                    &account_id,
                    CeremonyKind::Authentication {
                        binding_digest,
                        purpose: AuthPurpose::Operation {
                            device_id: *device_id,
                            command: command.to_string(),
                        },
                    },
                );
                Ok(Dispatch::CeremonyStarted { ceremony })
            }
            OperationClass::Registration => {
                let ceremony = self.start_registration(&account_id);
                Ok(Dispatch::RegistrationStarted { ceremony })
            }
        }
    }

    /// Revokes every device bound to `key_handle_digest`. Returns how many
    /// records changed state.
    pub fn unbind_all(&mut self, key_handle_digest: &[u8; 32]) -> usize {
        let device_ids: Vec<[u8; 8]> = self
            .devices
            .values()
            .filter(|d| {
                d.bound_key_handle_digest == *key_handle_digest
                    && d.state != DeviceBindingState::Revoked
            })
            .map(|d| d.device_id)
            .collect();

        for device_id in &device_ids {
            let record = self.devices.get_mut(device_id).expect("listed above");
            record.state = DeviceBindingState::Revoked;
            let tag = if let Some(token) = record.access_token.as_mut() {
                token.revoked = true;
                device_msg_tag(&token.token_bytes, device_id, "revoke", "")
            } else {
                String::new()
            };
            let revoke = DeviceMsg::Revoke { tag };
            self.broker
                .publish(&topics::device_cmd(device_id), &messages::encode(&revoke));
            self.log.record(
                "cloud",
                "device_revoked",
                fields([("device", hex::encode(device_id))]),
            );
        }
        self.log.record(
            "cloud",
            "unbind_complete",
            fields([
                ("key_handle", hex::encode(key_handle_digest)),
                ("revoked", device_ids.len().to_string()),
            ]),
        );
        device_ids.len()
    }

    /// Drains broker subscriptions; returns whether anything was processed.
    pub fn poll(&mut self) -> bool {
        let mut progressed = false;

        for msg in self.bind_sub.drain() {
            progressed = true;
            match messages::decode::<BindRequest>(&msg.payload) {
                Some(request) => self.handle_bind_request(&request),
                None => self.log_ignored(&msg.payload),
            }
        }

        for msg in self.response_sub.drain() {
            progressed = true;
            match messages::decode::<U2fResponseMsg>(&msg.payload) {
                Some(response) => self.handle_response(response),
                None => self.log_ignored(&msg.payload),
            }
        }

        for msg in self.unbind_sub.drain() {
            progressed = true;
            match messages::decode::<UnbindNotice>(&msg.payload) {
                Some(notice) => {
                    let digest = notice
                        .key_handle_digest
                        .as_deref()
                        .and_then(|d| hex::decode(d).ok())
                        .and_then(|d| <[u8; 32]>::try_from(d).ok());
                    match digest {
                        Some(digest) => {
                            self.unbind_all(&digest);
                        }
                        None => {
                            // Token left without a completed registration:
                            // nothing can be bound to it.
                            self.log.record(
                                "cloud",
                                "unbind_complete",
                                fields([("key_handle", "none".into()), ("revoked", "0".into())]),
                            );
                        }
                    }
                }
                None => self.log_ignored(&msg.payload),
            }
        }
        progressed
    }

    /// Line-delimited registry dump for post-run assertions.
    pub fn registry_export(&self) -> String {
        let mut out = String::new();
        for (account_id, account) in &self.accounts {
            for binding in &account.bound_tokens {
                out.push_str(&format!(
                    "binding account={} key_handle={} counter={}\n",
                    account_id,
                    hex::encode(binding.key_handle.digest()),
                    binding.last_counter
                ));
            }
        }
        for (device_id, record) in &self.devices {
            out.push_str(&format!(
                "device id={} account={} state={} key_handle={} token={}\n",
                hex::encode(device_id),
                record.account_id,
                record.state.name(),
                hex::encode(record.bound_key_handle_digest),
                record
                    .access_token
                    .as_ref()
                    .map(|t| digest_hex(&t.token_bytes))
                    .unwrap_or_else(|| "none".into()),
            ));
        }
        out
    }

    fn handle_bind_request(&mut self, request: &BindRequest) {
        let (Some(device_id), Some(gateway_id)) = (
            parse_id(&request.device_id),
            parse_id(&request.gateway_id),
        ) else {
            self.log_ignored(request.device_id.as_bytes());
            return;
        };

        // Identity validation at enrollment is a pre-authenticated session:
        // every gateway binding lands on the run's account.
        let account_id = self.default_account.clone();
        let Some(binding_digest) = self
            .accounts
            .get(&account_id)
            .and_then(|a| a.bound_tokens.last())
            .map(|b| b.key_handle.digest())
        else {
            self.log.record(
                "cloud",
                "bind_rejected",
                fields([
                    ("device", request.device_id.clone()),
                    ("reason", "no_token_binding".into()),
                ]),
            );
            let settled = GatewayCtl::BindResult {
                device_id: request.device_id.clone(),
                ok: false,
            };
            self.broker
                .publish(&topics::gateway_ctl(&gateway_id), &messages::encode(&settled));
            return;
        };

        self.devices.insert(
            device_id,
            DeviceRecord {
                device_id,
                account_id: account_id.clone(),
                bound_key_handle_digest: binding_digest,
                access_token: None,
                state: DeviceBindingState::Pending,
            },
        );
        self.pending_binds.insert(
            device_id,
            PendingBind {
                gateway_id,
                authorized: false,
            },
        );
        self.log.record(
            "cloud",
            "bind_requested",
            fields([("device", hex::encode(device_id)), ("account", account_id.clone())]),
        );
        self.new_challenge(
            &account_id,
            CeremonyKind::Authentication {
                binding_digest,
                purpose: AuthPurpose::BindDevice { device_id },
            },
        );
    }

    fn handle_response(&mut self, response: U2fResponseMsg) {
        let ceremony = response.ceremony;
        let result = match response.outcome {
            U2fOutcome::Register { response } => match hex::decode(&response) {
                Ok(bytes) => self.finish_registration(ceremony, &bytes),
                Err(_) => Err(CloudError::U2f(u2f::U2fError::MalformedResponse("hex"))),
            },
            U2fOutcome::Authenticate { response } => match hex::decode(&response) {
                Ok(bytes) => self.finish_authentication(ceremony, &bytes),
                Err(_) => Err(CloudError::U2f(u2f::U2fError::MalformedResponse("hex"))),
            },
            U2fOutcome::Failed { reason } => {
                self.fail_ceremony(ceremony, &reason);
                return;
            }
        };
        if let Err(err) = result {
            self.fail_ceremony(ceremony, &err.to_string());
        }
    }

    /// Consumes a failed ceremony and settles whatever waited on it.
    /// Nothing is ever dispatched to a device on this path.
    fn fail_ceremony(&mut self, ceremony: u64, reason: &str) {
        self.log.record(
            "cloud",
            "ceremony_failed",
            fields([("ceremony", ceremony.to_string()), ("reason", reason.into())]),
        );
        let Some(pending) = self.pending.remove(&ceremony) else {
            return;
        };
        if let CeremonyKind::Authentication {
            purpose: AuthPurpose::BindDevice { device_id },
            ..
        } = pending.kind
        {
            if let Some(bind) = self.pending_binds.remove(&device_id) {
                let settled = GatewayCtl::BindResult {
                    device_id: hex::encode(device_id),
                    ok: false,
                };
                self.broker
                    .publish(&topics::gateway_ctl(&bind.gateway_id), &messages::encode(&settled));
            }
        }
    }

    fn dispatch_authorized(&mut self, device_id: &[u8; 8], command: &str) -> Result<(), CloudError> {
        let record = self.devices.get(device_id).ok_or(CloudError::NoSuchDevice)?;
        if record.state == DeviceBindingState::Revoked {
            return Err(CloudError::DeviceRevoked);
        }
        let token = record
            .access_token
            .as_ref()
            .ok_or(CloudError::DeviceNotBound)?;
        let grant = DeviceMsg::AuthGrant {
            tag: device_msg_tag(&token.token_bytes, device_id, "U2F_AUTHENTICATED", ""),
        };
        self.broker
            .publish(&topics::device_cmd(device_id), &messages::encode(&grant));
        self.log.record(
            "cloud",
            "auth_grant_sent",
            fields([("device", hex::encode(device_id))]),
        );
        self.publish_command(device_id, command)
    }

    fn publish_command(&mut self, device_id: &[u8; 8], command: &str) -> Result<(), CloudError> {
        let record = self.devices.get(device_id).ok_or(CloudError::NoSuchDevice)?;
        let token = record
            .access_token
            .as_ref()
            .ok_or(CloudError::DeviceNotBound)?;
        let msg = DeviceMsg::Command {
            name: command.to_string(),
            tag: device_msg_tag(&token.token_bytes, device_id, "command", command),
        };
        self.broker
            .publish(&topics::device_cmd(device_id), &messages::encode(&msg));
        self.log.record(
            "cloud",
            "command_sent",
            fields([("device", hex::encode(device_id)), ("command", command.into())]),
        );
        Ok(())
    }

    fn take_pending(&mut self, ceremony: u64) -> Result<PendingCeremony, CloudError> {
        let pending = self.pending.remove(&ceremony).ok_or(CloudError::UnknownChallenge)?;
        if self.clock.now() > pending.expires {
            self.log.record(
                "cloud",
                "challenge_expired",
                fields([("ceremony", ceremony.to_string())]),
            );
            return Err(CloudError::ChallengeExpired);
        }
        Ok(pending)
    }

    fn binding(&self, account_id: &str, digest: &[u8; 32]) -> Option<&TokenBinding> {
        self.accounts
            .get(account_id)?
            .bound_tokens
            .iter()
            .find(|b| b.key_handle.digest() == *digest)
    }

    fn binding_mut(&mut self, account_id: &str, digest: &[u8; 32]) -> Option<&mut TokenBinding> {
        self.accounts
            .get_mut(account_id)?
            .bound_tokens
            .iter_mut()
            .find(|b| b.key_handle.digest() == *digest)
    }

    fn log_ignored(&self, payload: &[u8]) {
        self.log.record(
            "cloud",
            "ignored_message",
            fields([("payload", digest_hex(payload))]),
        );
    }
}

fn request_kind(request: &U2fHostRequest) -> &'static str {
    match request {
        U2fHostRequest::Register { .. } => "register",
        U2fHostRequest::Authenticate { .. } => "authenticate",
    }
}

fn parse_id(hex_str: &str) -> Option<[u8; 8]> {
    hex::decode(hex_str).ok()?.try_into().ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::Token;

    struct Rig {
        clock: SimClock,
        log: EventLog,
        broker: Broker,
        cloud: CloudService,
        token: Token,
        host_sub: Subscription,
    }

    const ACCOUNT: &str = "guest";

    fn rig(seed: u64) -> Rig {
        let clock = SimClock::new();
        let log = EventLog::new(clock.clone());
        let broker = Broker::new(log.clone());
        let host_sub = broker.subscribe(topics::U2F_HOST);
        let cloud = CloudService::new(
            broker.clone(),
            clock.clone(),
            log.clone(),
            entropy::root(seed),
            "https://iot-cloud.example",
            "wpa2:correct horse battery staple",
            ACCOUNT,
        );
        let mut token = Token::new(entropy::root(seed ^ 0xaa55), clock.clone());
        token.insert();
        Rig { clock, log, broker, cloud, token, host_sub }
    }

    /// Reads the latest u2f_host request the cloud published.
    fn last_host_request(rig: &Rig) -> U2fHostRequest {
        let mut last = None;
        while let Some(msg) = rig.host_sub.try_recv() {
            last = messages::decode(&msg.payload);
        }
        last.expect("cloud published a ceremony request")
    }

    /// Answers a pending ceremony with the rig's token, returning the raw
    /// response bytes without submitting them.
    fn answer_with_token(rig: &mut Rig) -> (u64, Vec<u8>) {
        rig.token.press_button().unwrap();
        match last_host_request(rig) {
            U2fHostRequest::Register { ceremony, app, challenge } => {
                let app = AppParameter::from_bytes(hex::decode(app).unwrap().try_into().unwrap());
                let ch = Challenge::from_bytes(hex::decode(challenge).unwrap().try_into().unwrap());
                let resp = rig.token.handle_register(&app, &ch).unwrap();
                (ceremony, resp.to_bytes())
            }
            U2fHostRequest::Authenticate { ceremony, app, challenge, key_handle } => {
                let app = AppParameter::from_bytes(hex::decode(app).unwrap().try_into().unwrap());
                let ch = Challenge::from_bytes(hex::decode(challenge).unwrap().try_into().unwrap());
                let kh = KeyHandle::from_bytes(hex::decode(key_handle).unwrap()).unwrap();
                let resp = rig
                    .token
                    .handle_authenticate(&app, &ch, &kh, PresenceMode::Required)
                    .unwrap();
                (ceremony, resp.to_bytes())
            }
        }
    }

    fn register_token(rig: &mut Rig) {
        rig.cloud.start_registration(ACCOUNT);
        let (ceremony, response) = answer_with_token(rig);
        rig.cloud.finish_registration(ceremony, &response).unwrap();
    }

    /// Runs the full bind flow for one device id; returns its access token.
    fn bind_device(rig: &mut Rig, device_id: [u8; 8]) -> [u8; 32] {
        let request = BindRequest {
            device_id: hex::encode(device_id),
            gateway_id: hex::encode([0xaa; 8]),
        };
        rig.cloud.handle_bind_request(&request);
        let (ceremony, response) = answer_with_token(rig);
        rig.cloud.finish_authentication(ceremony, &response).unwrap();
        rig.cloud.device(&device_id).unwrap().access_token.as_ref().unwrap().token_bytes
    }

    #[test]
    fn consecutive_challenges_differ() {
        let mut r = rig(1);
        r.cloud.start_registration(ACCOUNT);
        let first = match last_host_request(&r) {
            U2fHostRequest::Register { challenge, .. } => challenge,
            other => panic!("{other:?}"),
        };
        r.cloud.start_registration(ACCOUNT);
        let second = match last_host_request(&r) {
            U2fHostRequest::Register { challenge, .. } => challenge,
            other => panic!("{other:?}"),
        };
        assert_ne!(first, second);
    }

    #[test]
    fn expired_challenge_rejected() {
        let mut r = rig(2);
        r.cloud.start_registration(ACCOUNT);
        let (ceremony, response) = answer_with_token(&mut r);
        r.clock.advance_secs(CHALLENGE_EXPIRY_SECS + 1);
        assert_eq!(
            r.cloud.finish_registration(ceremony, &response).unwrap_err(),
            CloudError::ChallengeExpired
        );
    }

    #[test]
    fn never_issued_challenge_is_unknown() {
        let mut r = rig(3);
        assert_eq!(
            r.cloud.finish_authentication(999, &[0x01, 0, 0, 0, 1]).unwrap_err(),
            CloudError::UnknownChallenge
        );
    }

    #[test]
    fn honest_registration_binds_the_token() {
        let mut r = rig(4);
        register_token(&mut r);
        let account = r.cloud.account(ACCOUNT).unwrap();
        assert_eq!(account.bound_tokens.len(), 1);
        assert_eq!(account.bound_tokens[0].last_counter, 0);
    }

    #[test]
    fn registration_response_is_single_use() {
        let mut r = rig(5);
        r.cloud.start_registration(ACCOUNT);
        let (ceremony, response) = answer_with_token(&mut r);
        r.cloud.finish_registration(ceremony, &response).unwrap();
        assert_eq!(
            r.cloud.finish_registration(ceremony, &response).unwrap_err(),
            CloudError::UnknownChallenge
        );
    }

    #[test]
    fn authentication_advances_the_stored_counter() {
        let mut r = rig(6);
        register_token(&mut r);
        bind_device(&mut r, [1; 8]);
        let counter_after_bind =
            r.cloud.account(ACCOUNT).unwrap().bound_tokens[0].last_counter;
        assert!(counter_after_bind > 0);

        r.cloud.execute_operation(&[1; 8], "open").unwrap();
        let (ceremony, response) = answer_with_token(&mut r);
        r.cloud.finish_authentication(ceremony, &response).unwrap();
        let counter_after_op = r.cloud.account(ACCOUNT).unwrap().bound_tokens[0].last_counter;
        assert_eq!(counter_after_op, counter_after_bind + 1);
    }

    #[test]
    fn replayed_response_under_new_challenge_fails_signature() {
        let mut r = rig(7);
        register_token(&mut r);
        bind_device(&mut r, [1; 8]);

        // Capture an accepted response, then replay it against a fresh
        // challenge: the signature covers the old challenge.
        r.cloud.execute_operation(&[1; 8], "open").unwrap();
        let (ceremony, response) = answer_with_token(&mut r);
        r.cloud.finish_authentication(ceremony, &response).unwrap();

        let replay = r.cloud.execute_operation(&[1; 8], "open").unwrap();
        let Dispatch::CeremonyStarted { ceremony: new_ceremony } = replay else {
            panic!("expected a ceremony");
        };
        assert_eq!(
            r.cloud.finish_authentication(new_ceremony, &response).unwrap_err(),
            CloudError::U2f(u2f::U2fError::BadSignature)
        );
    }

    #[test]
    fn cloned_token_trips_the_counter_check() {
        let mut r = rig(8);
        register_token(&mut r);
        bind_device(&mut r, [1; 8]);

        // Clone the token state, use the original once, then the clone.
        let blob = r.token.persist_state();
        let mut clone = Token::load_state(&blob, entropy::root(80), r.clock.clone()).unwrap();
        clone.insert();

        r.cloud.execute_operation(&[1; 8], "open").unwrap();
        let (ceremony, response) = answer_with_token(&mut r);
        r.cloud.finish_authentication(ceremony, &response).unwrap();

        r.cloud.execute_operation(&[1; 8], "open").unwrap();
        let request = last_host_request(&r);
        let U2fHostRequest::Authenticate { ceremony, app, challenge, key_handle } = request else {
            panic!("expected authenticate");
        };
        let app = AppParameter::from_bytes(hex::decode(app).unwrap().try_into().unwrap());
        let ch = Challenge::from_bytes(hex::decode(challenge).unwrap().try_into().unwrap());
        let kh = KeyHandle::from_bytes(hex::decode(key_handle).unwrap()).unwrap();
        clone.press_button().unwrap();
        let stale = clone
            .handle_authenticate(&app, &ch, &kh, PresenceMode::Required)
            .unwrap();
        assert_eq!(
            r.cloud.finish_authentication(ceremony, &stale.to_bytes()).unwrap_err(),
            CloudError::CounterRegression
        );
    }

    #[test]
    fn classification_follows_the_policy_table() {
        let mut r = rig(9);
        assert_eq!(r.cloud.classify_operation("open"), OperationClass::Critical);
        assert_eq!(r.cloud.classify_operation("register"), OperationClass::Registration);
        assert_eq!(r.cloud.classify_operation("status"), OperationClass::NonCritical);
        r.cloud.set_policy("close", OperationClass::Critical);
        assert_eq!(r.cloud.classify_operation("close"), OperationClass::Critical);
    }

    #[test]
    fn critical_command_reaches_device_only_after_verification() {
        let mut r = rig(10);
        register_token(&mut r);
        let token_bytes = bind_device(&mut r, [2; 8]);
        let device_sub = r.broker.subscribe(&topics::device_cmd(&[2; 8]));

        r.cloud.execute_operation(&[2; 8], "open").unwrap();
        assert!(device_sub.try_recv().is_none(), "nothing before verification");

        let (ceremony, response) = answer_with_token(&mut r);
        r.cloud.finish_authentication(ceremony, &response).unwrap();

        let grant: DeviceMsg = messages::decode(&device_sub.try_recv().unwrap().payload).unwrap();
        let DeviceMsg::AuthGrant { tag } = grant else { panic!("{grant:?}") };
        assert!(messages::verify_device_msg_tag(&token_bytes, &[2; 8], "U2F_AUTHENTICATED", "", &tag));

        let cmd: DeviceMsg = messages::decode(&device_sub.try_recv().unwrap().payload).unwrap();
        let DeviceMsg::Command { name, tag } = cmd else { panic!("{cmd:?}") };
        assert_eq!(name, "open");
        assert!(messages::verify_device_msg_tag(&token_bytes, &[2; 8], "command", "open", &tag));
    }

    #[test]
    fn failed_ceremony_dispatches_nothing() {
        let mut r = rig(11);
        register_token(&mut r);
        bind_device(&mut r, [3; 8]);
        let device_sub = r.broker.subscribe(&topics::device_cmd(&[3; 8]));

        let Dispatch::CeremonyStarted { ceremony } =
            r.cloud.execute_operation(&[3; 8], "open").unwrap()
        else {
            panic!("expected ceremony");
        };
        // The gateway reports the user never pressed the button.
        r.cloud.fail_ceremony(ceremony, "presence_required");
        assert!(device_sub.try_recv().is_none());
    }

    #[test]
    fn non_critical_command_skips_the_ceremony() {
        let mut r = rig(12);
        register_token(&mut r);
        bind_device(&mut r, [4; 8]);
        let device_sub = r.broker.subscribe(&topics::device_cmd(&[4; 8]));

        assert_eq!(r.cloud.execute_operation(&[4; 8], "status").unwrap(), Dispatch::Immediate);
        let msg: DeviceMsg = messages::decode(&device_sub.try_recv().unwrap().payload).unwrap();
        assert!(matches!(msg, DeviceMsg::Command { name, .. } if name == "status"));
        // No ceremony was started for it.
        assert!(r.cloud.pending.is_empty());
    }

    #[test]
    fn binding_without_ceremony_is_not_authorized() {
        let mut r = rig(13);
        register_token(&mut r);
        let request = BindRequest {
            device_id: hex::encode([5u8; 8]),
            gateway_id: hex::encode([6u8; 8]),
        };
        r.cloud.handle_bind_request(&request);
        assert_eq!(
            r.cloud.bind_device(&[5; 8], ACCOUNT).unwrap_err(),
            CloudError::BindingNotAuthorized
        );
    }

    #[test]
    fn five_bindings_issue_five_distinct_tokens() {
        let mut r = rig(14);
        register_token(&mut r);
        let mut tokens = std::collections::HashSet::new();
        for i in 0..5u8 {
            let token = bind_device(&mut r, [i; 8]);
            assert!(tokens.insert(token));
        }
    }

    #[test]
    fn unbind_revokes_exactly_the_bound_set() {
        let mut r = rig(15);
        register_token(&mut r);
        let digest = r.cloud.account(ACCOUNT).unwrap().bound_tokens[0].key_handle.digest();
        assert_eq!(r.cloud.unbind_all(&digest), 0, "nothing bound yet");

        for i in 0..3u8 {
            bind_device(&mut r, [i; 8]);
        }
        assert_eq!(r.cloud.unbind_all(&digest), 3);
        assert_eq!(r.cloud.unbind_all(&digest), 0, "idempotent");
        for i in 0..3u8 {
            assert_eq!(
                r.cloud.execute_operation(&[i; 8], "open").unwrap_err(),
                CloudError::DeviceRevoked
            );
        }
    }

    #[test]
    fn rebinding_after_unbind_issues_a_new_token() {
        let mut r = rig(16);
        register_token(&mut r);
        let first = bind_device(&mut r, [7; 8]);
        let digest = r.cloud.account(ACCOUNT).unwrap().bound_tokens[0].key_handle.digest();
        r.cloud.unbind_all(&digest);

        let second = bind_device(&mut r, [7; 8]);
        assert_ne!(first, second);
        assert_eq!(r.cloud.device(&[7; 8]).unwrap().state, DeviceBindingState::Bound);
    }

    #[test]
    fn registry_export_is_line_structured() {
        let mut r = rig(17);
        register_token(&mut r);
        bind_device(&mut r, [8; 8]);
        let export = r.cloud.registry_export();
        assert!(export.lines().any(|l| l.starts_with("binding account=guest")));
        assert!(export.lines().any(|l| l.contains("state=bound")));
    }
}
