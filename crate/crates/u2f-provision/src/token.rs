//! Software U2F token.
//!
//! Holds the device-global wrapping key, the monotonic signature counter,
//! the attestation keypair with its self-signed certificate, and a
//! single-use user-presence gate armed by pressing the button. One instance
//! models one physical token; operations are serialized by `&mut self`.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::entropy::Entropy;
use crate::time::{SimClock, SimTime};
use crate::u2f::{
    self, attestation, AppParameter, AuthResponse, Challenge, KeyPair, PresenceMode,
    RegistrationResponse, WrappingKey, PRESENCE_ABSENT, PRESENCE_PRESENT,
};

/// How long one button press arms the presence gate, in simulated seconds.
pub const PRESENCE_WINDOW_SECS: u64 = 15;

const STATE_MAGIC: &[u8; 4] = b"U2FT";
const STATE_VERSION: u8 = 1;
const STATE_CHECKSUM_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("token is not inserted")]
    TokenAbsent,
    #[error("user presence required: press the token button")]
    PresenceRequired,
    #[error("persisted token state is corrupt")]
    StateCorrupt,
    #[error(transparent)]
    U2f(#[from] u2f::U2fError),
}

/// A software U2F token.
///
/// The `Debug` rendering shows only public identity material.
pub struct Token {
    wrapping_key: WrappingKey,
    counter: u32,
    attestation: KeyPair,
    attestation_certificate: Vec<u8>,
    presence_armed_until: Option<SimTime>,
    inserted: bool,
    clock: SimClock,
    rng: Entropy,
}

impl std::fmt::Debug for Token {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Token")
            .field("id", &hex::encode(self.id_digest()))
            .field("counter", &self.counter)
            .field("inserted", &self.inserted)
            .finish_non_exhaustive()
    }
}

impl Token {
    /// Mints a fresh token: new wrapping key, counter zero, new self-signed
    /// attestation certificate.
    pub fn new(mut rng: Entropy, clock: SimClock) -> Self {
        let wrapping_key = WrappingKey::generate(&mut rng);
        let attestation = KeyPair::generate(&mut rng);
        let attestation_certificate = attestation::build_certificate(&attestation, "soft token");
        Token {
            wrapping_key,
            counter: 0,
            attestation,
            attestation_certificate,
            presence_armed_until: None,
            inserted: false,
            clock,
            rng,
        }
    }

    pub fn insert(&mut self) {
        self.inserted = true;
    }

    /// Unplugs the token; any armed presence is discarded.
    pub fn remove(&mut self) {
        self.inserted = false;
        self.presence_armed_until = None;
    }

    pub fn is_inserted(&self) -> bool {
        self.inserted
    }

    pub fn counter(&self) -> u32 {
        self.counter
    }

    pub fn attestation_certificate(&self) -> &[u8] {
        &self.attestation_certificate
    }

    /// Stable identity for log lines: digest of the attestation certificate.
    pub fn id_digest(&self) -> [u8; 8] {
        let digest = Sha256::digest(&self.attestation_certificate);
        digest[..8].try_into().unwrap()
    }

    pub fn presence_armed(&self) -> bool {
        self.presence_armed_until
            .is_some_and(|deadline| self.clock.now() <= deadline)
    }

    /// Arms the presence gate for [`PRESENCE_WINDOW_SECS`] from now.
    pub fn press_button(&mut self) -> Result<(), TokenError> {
        if !self.inserted {
            return Err(TokenError::TokenAbsent);
        }
        self.presence_armed_until = Some(self.clock.now().plus_secs(PRESENCE_WINDOW_SECS));
        Ok(())
    }

    fn consume_presence(&mut self) -> bool {
        let armed = self.presence_armed();
        self.presence_armed_until = None; // single use
        armed
    }

    /// Services a registration request: fresh per-origin keypair, key handle
    /// wrapped under this token's wrapping key, response signed by the
    /// attestation key. Registration always demands user presence.
    pub fn handle_register(
        &mut self,
        app: &AppParameter,
        challenge: &Challenge,
    ) -> Result<RegistrationResponse, TokenError> {
        if !self.inserted {
            return Err(TokenError::TokenAbsent);
        }
        if !self.presence_armed() {
            return Err(TokenError::PresenceRequired);
        }
        self.consume_presence();

        let origin_keypair = KeyPair::generate(&mut self.rng);
        let key_handle = u2f::wrap_key(&origin_keypair, app, &self.wrapping_key, &mut self.rng);
        let user_public_key = origin_keypair.public_uncompressed();
        let input = u2f::registration_sign_input(app, challenge, &key_handle, &user_public_key);

        Ok(RegistrationResponse {
            user_public_key,
            key_handle,
            attestation_certificate: self.attestation_certificate.clone(),
            signature: self.attestation.sign_der(&input),
        })
    }

    /// Services an authentication request against a key handle this token
    /// issued. The counter increments by exactly one before signing; the
    /// presence byte reflects (and consumes) the armed state.
    pub fn handle_authenticate(
        &mut self,
        app: &AppParameter,
        challenge: &Challenge,
        key_handle: &u2f::KeyHandle,
        mode: PresenceMode,
    ) -> Result<AuthResponse, TokenError> {
        if !self.inserted {
            return Err(TokenError::TokenAbsent);
        }
        let origin_keypair = u2f::unwrap_key(key_handle, app, &self.wrapping_key)?;

        if mode == PresenceMode::Required && !self.presence_armed() {
            return Err(TokenError::PresenceRequired);
        }
        let presence = if self.consume_presence() {
            PRESENCE_PRESENT
        } else {
            PRESENCE_ABSENT
        };

        self.counter += 1;
        let input = u2f::authentication_sign_input(app, presence, self.counter, challenge);
        Ok(AuthResponse {
            user_presence: presence,
            counter: self.counter,
            signature: origin_keypair.sign_der(&input),
        })
    }

    /// Serializes the durable state (wrapping key, counter, attestation) into
    /// a versioned, checksummed blob.
    pub fn persist_state(&self) -> Vec<u8> {
        let attestation_scalar = self.attestation.scalar_bytes();
        let cert = &self.attestation_certificate;

        let mut out = Vec::with_capacity(4 + 1 + 32 + 4 + 32 + 2 + cert.len() + STATE_CHECKSUM_LEN);
        out.extend_from_slice(STATE_MAGIC);
        out.push(STATE_VERSION);
        out.extend_from_slice(self.wrapping_key.as_bytes());
        out.extend_from_slice(&self.counter.to_be_bytes());
        out.extend_from_slice(&attestation_scalar);
        out.extend_from_slice(&(cert.len() as u16).to_be_bytes());
        out.extend_from_slice(cert);

        let checksum = Sha256::digest(&out);
        out.extend_from_slice(&checksum[..STATE_CHECKSUM_LEN]);
        out
    }

    /// Restores a token from [`Token::persist_state`] output. The restored
    /// token is not inserted and has no presence armed; `rng` feeds its
    /// future key generation.
    pub fn load_state(blob: &[u8], rng: Entropy, clock: SimClock) -> Result<Self, TokenError> {
        let min_len = 4 + 1 + 32 + 4 + 32 + 2 + STATE_CHECKSUM_LEN;
        if blob.len() < min_len {
            return Err(TokenError::StateCorrupt);
        }
        let (body, checksum) = blob.split_at(blob.len() - STATE_CHECKSUM_LEN);
        if &Sha256::digest(body)[..STATE_CHECKSUM_LEN] != checksum {
            return Err(TokenError::StateCorrupt);
        }
        if &body[..4] != STATE_MAGIC || body[4] != STATE_VERSION {
            return Err(TokenError::StateCorrupt);
        }

        let wrapping_key = WrappingKey::from_bytes(body[5..37].try_into().unwrap());
        let counter = u32::from_be_bytes(body[37..41].try_into().unwrap());
        let attestation_scalar: [u8; 32] = body[41..73].try_into().unwrap();
        let cert_len = u16::from_be_bytes(body[73..75].try_into().unwrap()) as usize;
        if body.len() != 75 + cert_len {
            return Err(TokenError::StateCorrupt);
        }
        let attestation =
            KeyPair::from_scalar_bytes(&attestation_scalar).ok_or(TokenError::StateCorrupt)?;

        Ok(Token {
            wrapping_key,
            counter,
            attestation,
            attestation_certificate: body[75..].to_vec(),
            presence_armed_until: None,
            inserted: false,
            clock,
            rng,
        })
    }
}
