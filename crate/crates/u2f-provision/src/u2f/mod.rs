//! U2F cryptographic layer: application parameters, challenges, P-256 keys,
//! key wrapping, and the raw registration/authentication message formats.
//!
//! Everything here is a pure function over value types. The wire layouts
//! follow the FIDO U2F v1.x raw message format:
//!
//! ```text
//! registration response:   0x05 || user public key (65) || kh len (1) ||
//!                          key handle || attestation cert (DER) || sig (DER)
//! registration sig input:  0x00 || app (32) || challenge (32) || kh || pubkey (65)
//! authentication response: presence (1) || counter (4, BE) || sig (DER)
//! authentication sig input: app (32) || presence (1) || counter (4, BE) || challenge (32)
//! ```
//!
//! Signatures are ECDSA P-256 over SHA-256, DER encoded, low-s normalized,
//! with deterministic (RFC 6979) nonces — so a fixed seed reproduces every
//! byte of every message.

use std::fmt;

use aes_gcm::aead::Aead;
use aes_gcm::{Aes256Gcm, KeyInit};
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use rand::{CryptoRng, Rng};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub mod attestation;
pub mod der;

pub const REGISTRATION_RESERVED_BYTE: u8 = 0x05;
pub const PRESENCE_PRESENT: u8 = 0x01;
pub const PRESENCE_ABSENT: u8 = 0x00;

/// Longest key handle the one-byte length field can carry.
pub const MAX_KEY_HANDLE_LEN: usize = 255;

const WRAP_NONCE_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum U2fError {
    #[error("origin must be non-empty")]
    InvalidOrigin,
    #[error("key handle rejected by wrapping key")]
    BadKeyHandle,
    #[error("key handle was issued for a different origin")]
    OriginMismatch,
    #[error("signature verification failed")]
    BadSignature,
    #[error("malformed response: {0}")]
    MalformedResponse(&'static str),
    #[error("user presence required but not attested")]
    PresenceAbsent,
}

/// Whether a ceremony insists on the token's user-presence test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresenceMode {
    Required,
    NotRequired,
}

/// SHA-256 of the relying-party origin; binds keys to one service.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct AppParameter([u8; 32]);

impl AppParameter {
    /// Hashes an origin string into its application parameter.
    pub fn from_origin(origin: &str) -> Result<Self, U2fError> {
        if origin.is_empty() {
            return Err(U2fError::InvalidOrigin);
        }
        Ok(AppParameter(Sha256::digest(origin.as_bytes()).into()))
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        AppParameter(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for AppParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AppParameter({})", hex::encode(&self.0[..8]))
    }
}

/// 32-byte server challenge.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Challenge([u8; 32]);

impl Challenge {
    pub fn generate(rng: &mut (impl Rng + CryptoRng)) -> Self {
        Challenge(crate::entropy::bytes(rng))
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Challenge(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for Challenge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Challenge({})", hex::encode(&self.0[..8]))
    }
}

/// P-256 keypair. The private half never leaves this type except through
/// [`wrap_key`] or the token persistence blob.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    /// Draws scalars until one lands in `[1, n-1]`.
    pub fn generate(rng: &mut (impl Rng + CryptoRng)) -> Self {
        loop {
            let candidate: [u8; 32] = crate::entropy::bytes(rng);
            if let Ok(secret) = p256::SecretKey::from_slice(&candidate) {
                return KeyPair {
                    signing: SigningKey::from(&secret),
                };
            }
        }
    }

    pub fn from_scalar_bytes(bytes: &[u8; 32]) -> Option<Self> {
        let secret = p256::SecretKey::from_slice(bytes).ok()?;
        Some(KeyPair {
            signing: SigningKey::from(&secret),
        })
    }

    pub fn scalar_bytes(&self) -> [u8; 32] {
        self.signing.to_bytes().into()
    }

    pub fn public_uncompressed(&self) -> [u8; 65] {
        let point = VerifyingKey::from(&self.signing).to_sec1_point(false);
        point.as_bytes().try_into().expect("uncompressed point is 65 bytes")
    }

    pub fn signing_key(&self) -> &SigningKey {
        &self.signing
    }

    /// ECDSA/SHA-256 over `message`, DER encoded with low-s normalization.
    pub fn sign_der(&self, message: &[u8]) -> Vec<u8> {
        let sig: Signature = self.signing.sign(message);
        sig.normalize_s().to_der().as_bytes().to_vec()
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyPair(public {})", hex::encode(&self.public_uncompressed()[..8]))
    }
}

/// Device-global 256-bit wrapping key, known only to the issuing token.
#[derive(Clone, PartialEq, Eq)]
pub struct WrappingKey([u8; 32]);

impl WrappingKey {
    pub fn generate(rng: &mut (impl Rng + CryptoRng)) -> Self {
        WrappingKey(crate::entropy::bytes(rng))
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        WrappingKey(bytes)
    }

    pub(crate) fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for WrappingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Never print key material.
        f.write_str("WrappingKey(<redacted>)")
    }
}

/// Opaque wrapped credential: nonce || AES-256-GCM ciphertext of
/// (private scalar || app parameter).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct KeyHandle(Vec<u8>);

impl KeyHandle {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, U2fError> {
        if bytes.len() > MAX_KEY_HANDLE_LEN {
            return Err(U2fError::MalformedResponse("key handle too long"));
        }
        Ok(KeyHandle(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// SHA-256 of the handle bytes; the registry key used for unbinding.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(&self.0).into()
    }
}

impl fmt::Debug for KeyHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyHandle({} bytes, {})", self.0.len(), hex::encode(&self.digest()[..4]))
    }
}

/// Encrypts `keypair`'s scalar together with `app` under `wk`.
///
/// A fresh nonce goes in front of the ciphertext, so wrapping the same key
/// twice yields two different handles.
pub fn wrap_key(
    keypair: &KeyPair,
    app: &AppParameter,
    wk: &WrappingKey,
    rng: &mut (impl Rng + CryptoRng),
) -> KeyHandle {
    let cipher = Aes256Gcm::new(wk.as_bytes().into());
    let nonce: [u8; WRAP_NONCE_LEN] = crate::entropy::bytes(rng);

    let mut plaintext = Vec::with_capacity(64);
    plaintext.extend_from_slice(&keypair.scalar_bytes());
    plaintext.extend_from_slice(app.as_bytes());

    let ciphertext = cipher
        .encrypt((&nonce).into(), plaintext.as_slice())
        .expect("AES-GCM encryption cannot fail for in-memory buffers");

    let mut out = Vec::with_capacity(WRAP_NONCE_LEN + ciphertext.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ciphertext);
    KeyHandle(out)
}

/// Recovers the wrapped keypair, provided the handle authenticates under
/// `wk` and was issued for `app`.
pub fn unwrap_key(kh: &KeyHandle, app: &AppParameter, wk: &WrappingKey) -> Result<KeyPair, U2fError> {
    let bytes = kh.as_bytes();
    if bytes.len() <= WRAP_NONCE_LEN {
        return Err(U2fError::BadKeyHandle);
    }
    let (nonce, ciphertext) = bytes.split_at(WRAP_NONCE_LEN);
    let nonce: [u8; WRAP_NONCE_LEN] = nonce.try_into().unwrap();

    let cipher = Aes256Gcm::new(wk.as_bytes().into());
    let plaintext = cipher
        .decrypt((&nonce).into(), ciphertext)
        .map_err(|_| U2fError::BadKeyHandle)?;
    if plaintext.len() != 64 {
        return Err(U2fError::BadKeyHandle);
    }

    let embedded_app: [u8; 32] = plaintext[32..].try_into().unwrap();
    if &embedded_app != app.as_bytes() {
        return Err(U2fError::OriginMismatch);
    }

    let scalar: [u8; 32] = plaintext[..32].try_into().unwrap();
    KeyPair::from_scalar_bytes(&scalar).ok_or(U2fError::BadKeyHandle)
}

/// Raw-format registration response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegistrationResponse {
    pub user_public_key: [u8; 65],
    pub key_handle: KeyHandle,
    pub attestation_certificate: Vec<u8>,
    pub signature: Vec<u8>,
}

impl RegistrationResponse {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            1 + 65 + 1 + self.key_handle.len() + self.attestation_certificate.len() + self.signature.len(),
        );
        out.push(REGISTRATION_RESERVED_BYTE);
        out.extend_from_slice(&self.user_public_key);
        out.push(self.key_handle.len() as u8);
        out.extend_from_slice(self.key_handle.as_bytes());
        out.extend_from_slice(&self.attestation_certificate);
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, U2fError> {
        if bytes.len() < 1 + 65 + 1 {
            return Err(U2fError::MalformedResponse("registration too short"));
        }
        if bytes[0] != REGISTRATION_RESERVED_BYTE {
            return Err(U2fError::MalformedResponse("reserved byte"));
        }
        let user_public_key: [u8; 65] = bytes[1..66].try_into().unwrap();
        let kh_len = bytes[66] as usize;
        let kh_end = 67 + kh_len;
        if bytes.len() < kh_end {
            return Err(U2fError::MalformedResponse("key handle truncated"));
        }
        let key_handle = KeyHandle(bytes[67..kh_end].to_vec());

        // The certificate delimits itself via its DER header.
        let rest = &bytes[kh_end..];
        let cert_len = der::element_len(rest)
            .ok_or(U2fError::MalformedResponse("attestation certificate"))?;
        let attestation_certificate = rest[..cert_len].to_vec();

        let sig = &rest[cert_len..];
        let sig_len = der::element_len(sig).ok_or(U2fError::MalformedResponse("signature"))?;
        if sig_len != sig.len() {
            return Err(U2fError::MalformedResponse("trailing bytes"));
        }

        Ok(RegistrationResponse {
            user_public_key,
            key_handle,
            attestation_certificate,
            signature: sig.to_vec(),
        })
    }
}

/// Raw-format authentication response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthResponse {
    pub user_presence: u8,
    pub counter: u32,
    pub signature: Vec<u8>,
}

impl AuthResponse {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.signature.len());
        out.push(self.user_presence);
        out.extend_from_slice(&self.counter.to_be_bytes());
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, U2fError> {
        if bytes.len() < 5 {
            return Err(U2fError::MalformedResponse("authentication too short"));
        }
        let user_presence = bytes[0];
        if user_presence > PRESENCE_PRESENT {
            return Err(U2fError::MalformedResponse("presence byte"));
        }
        let counter = u32::from_be_bytes(bytes[1..5].try_into().unwrap());
        let sig = &bytes[5..];
        let sig_len = der::element_len(sig).ok_or(U2fError::MalformedResponse("signature"))?;
        if sig_len != sig.len() {
            return Err(U2fError::MalformedResponse("trailing bytes"));
        }
        Ok(AuthResponse {
            user_presence,
            counter,
            signature: sig.to_vec(),
        })
    }
}

/// Bytes a registration signature covers.
pub fn registration_sign_input(
    app: &AppParameter,
    challenge: &Challenge,
    key_handle: &KeyHandle,
    user_public_key: &[u8; 65],
) -> Vec<u8> {
    let mut input = Vec::with_capacity(1 + 32 + 32 + key_handle.len() + 65);
    input.push(0x00);
    input.extend_from_slice(app.as_bytes());
    input.extend_from_slice(challenge.as_bytes());
    input.extend_from_slice(key_handle.as_bytes());
    input.extend_from_slice(user_public_key);
    input
}

/// Bytes an authentication signature covers.
pub fn authentication_sign_input(
    app: &AppParameter,
    user_presence: u8,
    counter: u32,
    challenge: &Challenge,
) -> Vec<u8> {
    let mut input = Vec::with_capacity(32 + 1 + 4 + 32);
    input.extend_from_slice(app.as_bytes());
    input.push(user_presence);
    input.extend_from_slice(&counter.to_be_bytes());
    input.extend_from_slice(challenge.as_bytes());
    input
}

/// Verifies a registration response against the ceremony's `app` and
/// `challenge`, returning the material the relying party must persist.
pub fn verify_registration(
    resp: &RegistrationResponse,
    app: &AppParameter,
    challenge: &Challenge,
) -> Result<([u8; 65], KeyHandle), U2fError> {
    if resp.user_public_key[0] != 0x04 {
        return Err(U2fError::MalformedResponse("user public key"));
    }
    VerifyingKey::from_sec1_bytes(&resp.user_public_key)
        .map_err(|_| U2fError::MalformedResponse("user public key"))?;

    let attestation_key = attestation::verify_certificate(&resp.attestation_certificate)?;
    let verifying = VerifyingKey::from_sec1_bytes(&attestation_key)
        .map_err(|_| U2fError::MalformedResponse("attestation certificate"))?;

    let input = registration_sign_input(app, challenge, &resp.key_handle, &resp.user_public_key);
    let signature =
        Signature::from_der(&resp.signature).map_err(|_| U2fError::MalformedResponse("signature"))?;
    verifying
        .verify(&input, &signature)
        .map_err(|_| U2fError::BadSignature)?;

    Ok((resp.user_public_key, resp.key_handle.clone()))
}

/// Verifies an authentication response under the public key bound at
/// registration, returning the signed counter for the caller's anti-clone
/// check.
pub fn verify_authentication(
    user_public_key: &[u8; 65],
    app: &AppParameter,
    challenge: &Challenge,
    resp: &AuthResponse,
    mode: PresenceMode,
) -> Result<u32, U2fError> {
    if resp.user_presence > PRESENCE_PRESENT {
        return Err(U2fError::MalformedResponse("presence byte"));
    }
    if mode == PresenceMode::Required && resp.user_presence == PRESENCE_ABSENT {
        return Err(U2fError::PresenceAbsent);
    }

    let verifying = VerifyingKey::from_sec1_bytes(user_public_key)
        .map_err(|_| U2fError::MalformedResponse("user public key"))?;
    let input = authentication_sign_input(app, resp.user_presence, resp.counter, challenge);
    let signature =
        Signature::from_der(&resp.signature).map_err(|_| U2fError::MalformedResponse("signature"))?;
    verifying
        .verify(&input, &signature)
        .map_err(|_| U2fError::BadSignature)?;

    Ok(resp.counter)
}
