//! Broker wire vocabulary.
//!
//! Every payload that crosses the broker is one of these JSON messages.
//! Binary material (challenges, key handles, responses) travels hex-encoded.
//! Commands sent to a bound device carry a keyed integrity tag computed
//! under the device's access token, so a broker-level spoofer cannot forge
//! them.

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

/// Topic names. The cloud and gateway exchange ceremonies over `u2f_host`
/// and `u2f_response`; per-node topics are derived from 8-byte identifiers.
pub mod topics {
    pub const U2F_HOST: &str = "u2f_host";
    pub const U2F_RESPONSE: &str = "u2f_response";
    pub const CLOUD_BIND: &str = "cloud/bind";
    pub const CLOUD_UNBIND: &str = "cloud/unbind";

    pub fn gateway_ctl(gateway_id: &[u8; 8]) -> String {
        format!("gateway/{}/ctl", hex::encode(gateway_id))
    }

    pub fn device_cmd(device_id: &[u8; 8]) -> String {
        format!("device/{}/cmd", hex::encode(device_id))
    }
}

/// Ceremony request published by the cloud on `u2f_host`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "lowercase")]
pub enum U2fHostRequest {
    Register {
        ceremony: u64,
        app: String,
        challenge: String,
    },
    Authenticate {
        ceremony: u64,
        app: String,
        challenge: String,
        key_handle: String,
    },
}

/// Ceremony outcome published by the gateway on `u2f_response`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct U2fResponseMsg {
    pub ceremony: u64,
    #[serde(flatten)]
    pub outcome: U2fOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum U2fOutcome {
    Register { response: String },
    Authenticate { response: String },
    Failed { reason: String },
}

/// Gateway-to-cloud binding request on `cloud/bind`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindRequest {
    pub device_id: String,
    pub gateway_id: String,
}

/// Gateway-to-cloud revocation notice on `cloud/unbind`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnbindNotice {
    pub gateway_id: String,
    /// Digest of the departed token's key handle; `None` when the token
    /// left without ever completing a registration.
    pub key_handle_digest: Option<String>,
}

/// Control messages on `gateway/<id>/ctl`: enrollment requests from blank
/// devices, and bind settlement notices from the cloud.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GatewayCtl {
    Enroll { device_id: String, nonce_echo: String },
    BindResult { device_id: String, ok: bool },
}

/// Messages on `device/<id>/cmd`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum DeviceMsg {
    /// Credential delivery at the end of a binding: the device's access
    /// token and the real network credential, over the broker (modeling the
    /// authenticated channel) and never over the radio.
    #[serde(rename = "credentials")]
    Credentials {
        access_token: String,
        network_credential: String,
    },
    /// Authorization grant preceding a critical command.
    #[serde(rename = "U2F_AUTHENTICATED")]
    AuthGrant { tag: String },
    #[serde(rename = "command")]
    Command { name: String, tag: String },
    #[serde(rename = "revoke")]
    Revoke { tag: String },
}

/// Keyed integrity tag over one device-bound message.
pub fn device_msg_tag(access_token: &[u8; 32], device_id: &[u8; 8], kind: &str, body: &str) -> String {
    let mut mac = <Hmac<Sha256> as KeyInit>::new_from_slice(access_token)
        .expect("HMAC accepts 32-byte keys");
    mac.update(device_id);
    mac.update(kind.as_bytes());
    mac.update(&[0]);
    mac.update(body.as_bytes());
    hex::encode(&mac.finalize().into_bytes()[..16])
}

/// Constant-time-ish tag check (length first, then bytes; the sim does not
/// model timing side channels).
pub fn verify_device_msg_tag(
    access_token: &[u8; 32],
    device_id: &[u8; 8],
    kind: &str,
    body: &str,
    tag: &str,
) -> bool {
    device_msg_tag(access_token, device_id, kind, body) == tag
}

pub fn encode<T: Serialize>(msg: &T) -> Vec<u8> {
    serde_json::to_vec(msg).expect("message types serialize infallibly")
}

pub fn decode<'a, T: Deserialize<'a>>(payload: &'a [u8]) -> Option<T> {
    serde_json::from_slice(payload).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn host_request_wire_format_uses_paper_verbs() {
        let msg = U2fHostRequest::Register {
            ceremony: 1,
            app: "aa".into(),
            challenge: "bb".into(),
        };
        let json = String::from_utf8(encode(&msg)).unwrap();
        assert!(json.contains(r#""cmd":"register""#), "{json}");

        let msg = U2fHostRequest::Authenticate {
            ceremony: 2,
            app: "aa".into(),
            challenge: "bb".into(),
            key_handle: "cc".into(),
        };
        let json = String::from_utf8(encode(&msg)).unwrap();
        assert!(json.contains(r#""cmd":"authenticate""#), "{json}");
    }

    #[test]
    fn auth_grant_spells_u2f_authenticated() {
        let msg = DeviceMsg::AuthGrant { tag: "00".into() };
        let json = String::from_utf8(encode(&msg)).unwrap();
        assert!(json.contains(r#""type":"U2F_AUTHENTICATED""#), "{json}");
    }

    #[test]
    fn unknown_command_decodes_to_none() {
        assert!(decode::<U2fHostRequest>(br#"{"cmd":"reboot"}"#).is_none());
        assert!(decode::<U2fHostRequest>(b"reboot").is_none());
    }

    #[test]
    fn tags_bind_token_device_kind_and_body() {
        let token = [7u8; 32];
        let device = [1u8; 8];
        let tag = device_msg_tag(&token, &device, "command", "open");
        assert!(verify_device_msg_tag(&token, &device, "command", "open", &tag));
        assert!(!verify_device_msg_tag(&token, &device, "command", "close", &tag));
        assert!(!verify_device_msg_tag(&token, &device, "U2F_AUTHENTICATED", "open", &tag));
        assert!(!verify_device_msg_tag(&token, &[2u8; 8], "command", "open", &tag));
        assert!(!verify_device_msg_tag(&[8u8; 32], &device, "command", "open", &tag));
    }

    #[test]
    fn round_trip_all_message_kinds() {
        let ctl = GatewayCtl::Enroll {
            device_id: "0011223344556677".into(),
            nonce_echo: "ff".repeat(16),
        };
        assert_eq!(decode::<GatewayCtl>(&encode(&ctl)), Some(ctl));

        let resp = U2fResponseMsg {
            ceremony: 9,
            outcome: U2fOutcome::Failed { reason: "token_absent".into() },
        };
        assert_eq!(decode::<U2fResponseMsg>(&encode(&resp)), Some(resp));

        let creds = DeviceMsg::Credentials {
            access_token: "aa".repeat(32),
            network_credential: "wpa2:pass".into(),
        };
        assert_eq!(decode::<DeviceMsg>(&encode(&creds)), Some(creds));
    }
}
