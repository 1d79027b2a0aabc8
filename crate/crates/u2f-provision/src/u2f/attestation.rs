//! Self-signed attestation certificates.
//!
//! A token proves which vendor line it belongs to by signing registration
//! responses with an attestation key whose certificate travels inside the
//! response. Here each token generates one minimal self-signed X.509v1
//! certificate at creation time. The encoding is fully deterministic given
//! the attestation key, so runs with a fixed seed produce byte-identical
//! registration responses.

use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, VerifyingKey};

use super::der;
use super::{KeyPair, U2fError};

// ecdsa-with-SHA256, id-ecPublicKey, prime256v1, id-at-commonName
const OID_ECDSA_SHA256: &[u8] = &[0x2a, 0x86, 0x48, 0xce, 0x3d, 0x04, 0x03, 0x02];
const OID_EC_PUBLIC_KEY: &[u8] = &[0x2a, 0x86, 0x48, 0xce, 0x3d, 0x02, 0x01];
const OID_PRIME256V1: &[u8] = &[0x2a, 0x86, 0x48, 0xce, 0x3d, 0x03, 0x01, 0x07];
const OID_COMMON_NAME: &[u8] = &[0x55, 0x04, 0x03];

const NOT_BEFORE: &[u8] = b"200101000000Z";
const NOT_AFTER: &[u8] = b"400101000000Z";

fn algorithm_ecdsa_sha256() -> Vec<u8> {
    der::sequence(&[&der::tlv(der::TAG_OID, OID_ECDSA_SHA256)])
}

fn name(common_name: &str) -> Vec<u8> {
    let attr = der::sequence(&[
        &der::tlv(der::TAG_OID, OID_COMMON_NAME),
        &der::tlv(der::TAG_UTF8_STRING, common_name.as_bytes()),
    ]);
    der::sequence(&[&der::set(&[&attr])])
}

fn subject_public_key_info(public_key: &[u8; 65]) -> Vec<u8> {
    let algorithm = der::sequence(&[
        &der::tlv(der::TAG_OID, OID_EC_PUBLIC_KEY),
        &der::tlv(der::TAG_OID, OID_PRIME256V1),
    ]);
    der::sequence(&[&algorithm, &der::bit_string(public_key)])
}

/// Builds the DER certificate for `keypair`, self-signed and valid for a
/// fixed 2020-2040 window.
pub fn build_certificate(keypair: &KeyPair, common_name: &str) -> Vec<u8> {
    let public = keypair.public_uncompressed();
    let subject = name(common_name);
    let validity = der::sequence(&[
        &der::tlv(der::TAG_UTC_TIME, NOT_BEFORE),
        &der::tlv(der::TAG_UTC_TIME, NOT_AFTER),
    ]);
    let tbs = der::sequence(&[
        &der::integer(&[1]),
        &algorithm_ecdsa_sha256(),
        &subject, // issuer == subject: self-signed
        &validity,
        &subject,
        &subject_public_key_info(&public),
    ]);

    let sig: Signature = keypair.signing_key().sign(&tbs);
    let sig_der = sig.normalize_s().to_der();

    der::sequence(&[&tbs, &algorithm_ecdsa_sha256(), &der::bit_string(sig_der.as_bytes())])
}

/// Extracts the subject public key and checks the self-signature.
///
/// Returns the 65-byte uncompressed P-256 point the registration signature
/// must verify under.
pub fn verify_certificate(cert_der: &[u8]) -> Result<[u8; 65], U2fError> {
    let malformed = U2fError::MalformedResponse("attestation certificate");

    let mut outer = der::Reader::new(cert_der);
    let cert_content = outer.expect(der::TAG_SEQUENCE).ok_or(malformed)?;
    if !outer.is_empty() {
        return Err(malformed);
    }

    let mut cert = der::Reader::new(cert_content);
    let (tag, tbs_content, tbs_raw) = cert.next_raw().ok_or(malformed)?;
    if tag != der::TAG_SEQUENCE {
        return Err(malformed);
    }
    let _sig_alg = cert.expect(der::TAG_SEQUENCE).ok_or(malformed)?;
    let sig_bits = cert.expect(der::TAG_BIT_STRING).ok_or(malformed)?;
    if !cert.is_empty() || sig_bits.first() != Some(&0) {
        return Err(malformed);
    }

    let mut tbs = der::Reader::new(tbs_content);
    let _serial = tbs.expect(der::TAG_INTEGER).ok_or(malformed)?;
    let _alg = tbs.expect(der::TAG_SEQUENCE).ok_or(malformed)?;
    let _issuer = tbs.expect(der::TAG_SEQUENCE).ok_or(malformed)?;
    let _validity = tbs.expect(der::TAG_SEQUENCE).ok_or(malformed)?;
    let _subject = tbs.expect(der::TAG_SEQUENCE).ok_or(malformed)?;
    let spki = tbs.expect(der::TAG_SEQUENCE).ok_or(malformed)?;

    let mut spki = der::Reader::new(spki);
    let _spki_alg = spki.expect(der::TAG_SEQUENCE).ok_or(malformed)?;
    let key_bits = spki.expect(der::TAG_BIT_STRING).ok_or(malformed)?;
    if key_bits.len() != 66 || key_bits[0] != 0 || key_bits[1] != 0x04 {
        return Err(malformed);
    }
    let mut public = [0u8; 65];
    public.copy_from_slice(&key_bits[1..]);

    let verifying = VerifyingKey::from_sec1_bytes(&public).map_err(|_| malformed)?;
    let signature = Signature::from_der(&sig_bits[1..]).map_err(|_| malformed)?;
    verifying
        .verify(tbs_raw, &signature)
        .map_err(|_| U2fError::BadSignature)?;

    Ok(public)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy;

    fn keypair() -> KeyPair {
        KeyPair::generate(&mut entropy::root(11))
    }

    #[test]
    fn certificate_round_trips_and_is_deterministic() {
        let kp = keypair();
        let a = build_certificate(&kp, "soft token");
        let b = build_certificate(&kp, "soft token");
        assert_eq!(a, b);
        assert_eq!(verify_certificate(&a).unwrap(), kp.public_uncompressed());
    }

    #[test]
    fn tampered_tbs_fails_self_signature() {
        let cert = build_certificate(&keypair(), "soft token");
        // Flip one byte of the serial number, deep inside the tbs.
        let mut bad = cert.clone();
        let pos = bad.windows(3).position(|w| w == [0x02, 0x01, 0x01]).unwrap();
        bad[pos + 2] ^= 1;
        assert!(matches!(
            verify_certificate(&bad),
            Err(U2fError::BadSignature)
        ));
    }

    #[test]
    fn wrong_key_certificate_rejected() {
        let kp = keypair();
        let other = KeyPair::generate(&mut entropy::root(12));
        let mut cert = build_certificate(&kp, "soft token");
        // Graft the other token's public key into the SPKI bit string.
        let needle = kp.public_uncompressed();
        let pos = cert
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        cert[pos..pos + 65].copy_from_slice(&other.public_uncompressed());
        assert!(matches!(
            verify_certificate(&cert),
            Err(U2fError::BadSignature)
        ));
    }

    #[test]
    fn truncated_certificate_is_malformed() {
        let cert = build_certificate(&keypair(), "soft token");
        assert!(matches!(
            verify_certificate(&cert[..cert.len() - 4]),
            Err(U2fError::MalformedResponse(_))
        ));
    }
}
