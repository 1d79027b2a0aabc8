//! Packet-length modulation codec.
//!
//! A configurator that already sits on an encrypted WiFi network cannot talk
//! to a blank device directly, but the device can observe the *lengths* of
//! the encrypted broadcast frames. This module encodes a small payload into
//! a sequence of frame lengths and decodes it back from a possibly noisy,
//! observed stream.
//!
//! Layout of one transmission:
//!
//! ```text
//! preamble:  1400, 1420, 1440           (sync marker, one per transmission)
//! symbol i:  128+i, 512+b               (index frame, then data frame)
//! trailer:   symbols at indices N, N+1  (CRC-16/CCITT-FALSE over payload)
//! ```
//!
//! The three bands are pairwise disjoint and everything outside them is
//! ignored, so the transmission survives interleaved foreign traffic.
//! Decoding reassembles bytes by index: duplicated symbols collapse and
//! symbol order is irrelevant. The CRC trailer means a damaged stream
//! produces an error, never a wrong payload.
//!
//! An eavesdropper sees exactly what a device sees, which is the point of
//! [`harvest`]: in legacy SmartCfg mode the recovered bytes contain the
//! network passphrase verbatim; a bootstrap payload carries no secret to
//! recover.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crc::{Crc, CRC_16_IBM_3740};
use thiserror::Error;

/// Minimum and maximum Ethernet frame lengths.
pub const FRAME_MIN: u16 = 60;
pub const FRAME_MAX: u16 = 1500;

/// Sync marker values, outside both symbol bands.
pub const PREAMBLE_FRAMES: [u16; 3] = [1400, 1420, 1440];

/// Index band: frame `128 + i` announces sequence index `i` (0..=255).
pub const INDEX_BAND_BASE: u16 = 128;
pub const INDEX_BAND_TOP: u16 = 383;

/// Data band: frame `512 + b` carries payload byte `b`.
pub const DATA_BAND_BASE: u16 = 512;
pub const DATA_BAND_TOP: u16 = 767;

/// Two index slots are reserved for the CRC trailer, so a payload may use at
/// most 254 of the 256 addressable indices.
pub const MAX_PAYLOAD_LEN: usize = 254;

/// CRC-16/CCITT-FALSE: polynomial 0x1021, init 0xFFFF.
const CRC16: Crc<u16> = Crc::<u16>::new(&CRC_16_IBM_3740);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("payload exceeds {MAX_PAYLOAD_LEN} bytes")]
    PayloadTooLarge,
    #[error("frame length outside Ethernet bounds")]
    FrameOutOfRange,
    #[error("no preamble in observed stream")]
    NoPreamble,
    #[error("symbol stream has gaps")]
    MissingSymbols,
    #[error("payload checksum mismatch")]
    ChecksumMismatch,
    #[error("payload structure malformed")]
    MalformedPayload,
}

/// A broadcast frame length, within Ethernet bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameLength(u16);

impl FrameLength {
    pub fn new(len: u16) -> Result<Self, CodecError> {
        if (FRAME_MIN..=FRAME_MAX).contains(&len) {
            Ok(FrameLength(len))
        } else {
            Err(CodecError::FrameOutOfRange)
        }
    }

    pub fn get(self) -> u16 {
        self.0
    }
}

fn frame(len: u16) -> FrameLength {
    FrameLength::new(len).expect("encoder emits in-range frames")
}

/// CRC-16/CCITT-FALSE over `payload`.
pub fn payload_crc(payload: &[u8]) -> u16 {
    CRC16.checksum(payload)
}

/// Encodes `payload` into a frame-length transmission.
pub fn encode(payload: &[u8]) -> Result<Vec<FrameLength>, CodecError> {
    if payload.len() > MAX_PAYLOAD_LEN {
        return Err(CodecError::PayloadTooLarge);
    }
    let mut frames = Vec::with_capacity(3 + 2 * (payload.len() + 2));
    frames.extend(PREAMBLE_FRAMES.map(frame));

    let mut push_symbol = |index: usize, byte: u8| {
        frames.push(frame(INDEX_BAND_BASE + index as u16));
        frames.push(frame(DATA_BAND_BASE + byte as u16));
    };
    for (i, &b) in payload.iter().enumerate() {
        push_symbol(i, b);
    }
    let crc = payload_crc(payload);
    push_symbol(payload.len(), (crc >> 8) as u8);
    push_symbol(payload.len() + 1, (crc & 0xff) as u8);

    Ok(frames)
}

/// Decodes an observed stream of frame lengths back into the payload.
///
/// Tolerates foreign traffic outside the symbol bands, duplicated symbols,
/// and symbol reordering. Fails closed: a stream that cannot be reassembled
/// to a CRC-clean payload is an error.
pub fn decode(observed: &[FrameLength]) -> Result<Vec<u8>, CodecError> {
    let seen = |value: u16| observed.iter().any(|f| f.get() == value);
    if !PREAMBLE_FRAMES.iter().all(|&p| seen(p)) {
        return Err(CodecError::NoPreamble);
    }

    // Collect byte candidates per index. A data frame belongs to the most
    // recently seen index frame; duplicated symbols simply restate a pair.
    let mut candidates: BTreeMap<u16, Vec<u8>> = BTreeMap::new();
    let mut current_index: Option<u16> = None;
    for f in observed {
        let len = f.get();
        if (INDEX_BAND_BASE..=INDEX_BAND_TOP).contains(&len) {
            let index = len - INDEX_BAND_BASE;
            candidates.entry(index).or_default();
            current_index = Some(index);
        } else if (DATA_BAND_BASE..=DATA_BAND_TOP).contains(&len) {
            if let Some(index) = current_index {
                candidates.entry(index).or_default().push((len - DATA_BAND_BASE) as u8);
            }
            // A data frame with no preceding index frame carries no address;
            // nothing can be done with it.
        }
        // Everything else (preamble copies, foreign traffic) is ignored.
    }

    // The sequence must cover 0..=top with no gaps and at least the two
    // trailer symbols.
    let &top = candidates.keys().next_back().ok_or(CodecError::MissingSymbols)?;
    if top < 1 || candidates.len() != top as usize + 1 {
        return Err(CodecError::MissingSymbols);
    }

    let mut bytes = Vec::with_capacity(top as usize + 1);
    for (_, byte_votes) in candidates {
        if byte_votes.is_empty() {
            return Err(CodecError::MissingSymbols);
        }
        bytes.push(majority(&byte_votes));
    }

    let payload_len = bytes.len() - 2;
    let crc = ((bytes[payload_len] as u16) << 8) | bytes[payload_len + 1] as u16;
    bytes.truncate(payload_len);
    if payload_crc(&bytes) != crc {
        return Err(CodecError::ChecksumMismatch);
    }
    Ok(bytes)
}

/// What a passive adversary recovers from length-only observation.
///
/// This is deliberately the same algorithm as [`decode`]: the attack needs
/// nothing a legitimate device does not have. Whether the result matters
/// depends entirely on what the sender put on the air.
pub fn harvest(observed: &[FrameLength]) -> Result<Vec<u8>, CodecError> {
    decode(observed)
}

/// Picks the most frequent candidate; ties go to the smallest value so the
/// result never depends on observation order.
fn majority(votes: &[u8]) -> u8 {
    let mut counts = BTreeMap::new();
    for &v in votes {
        *counts.entry(v).or_insert(0u32) += 1;
    }
    let best = counts.values().copied().max().unwrap();
    counts
        .into_iter()
        .find(|&(_, n)| n == best)
        .map(|(v, _)| v)
        .unwrap()
}

/// Bootstrap material broadcast during provisioning. Carries no long-term
/// secret by construction: there is no field a passphrase could occupy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootstrapPayload {
    pub ssid: String,
    pub enrollment_nonce: [u8; 16],
    pub gateway_id: [u8; 8],
}

impl BootstrapPayload {
    pub const MAX_SSID_LEN: usize = 32;

    /// Format tag leading every bootstrap payload; keeps them from being
    /// confused with other byte strings riding the same channel.
    pub const FORMAT_TAG: u8 = 0xb0;

    pub fn to_bytes(&self) -> Result<Vec<u8>, CodecError> {
        let ssid = self.ssid.as_bytes();
        if ssid.len() > Self::MAX_SSID_LEN {
            return Err(CodecError::MalformedPayload);
        }
        let mut out = Vec::with_capacity(2 + ssid.len() + 16 + 8);
        out.push(Self::FORMAT_TAG);
        out.push(ssid.len() as u8);
        out.extend_from_slice(ssid);
        out.extend_from_slice(&self.enrollment_nonce);
        out.extend_from_slice(&self.gateway_id);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.first() != Some(&Self::FORMAT_TAG) {
            return Err(CodecError::MalformedPayload);
        }
        let &ssid_len = bytes.get(1).ok_or(CodecError::MalformedPayload)?;
        let ssid_len = ssid_len as usize;
        if ssid_len > Self::MAX_SSID_LEN || bytes.len() != 2 + ssid_len + 16 + 8 {
            return Err(CodecError::MalformedPayload);
        }
        let ssid = std::str::from_utf8(&bytes[2..2 + ssid_len])
            .map_err(|_| CodecError::MalformedPayload)?
            .to_string();
        let enrollment_nonce = bytes[2 + ssid_len..2 + ssid_len + 16].try_into().unwrap();
        let gateway_id = bytes[2 + ssid_len + 16..].try_into().unwrap();
        Ok(BootstrapPayload {
            ssid,
            enrollment_nonce,
            gateway_id,
        })
    }
}

/// Legacy SmartCfg payload: SSID and passphrase in the clear. Kept as the
/// insecure baseline the harvesting demonstration runs against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LegacyPayload {
    pub ssid: String,
    pub passphrase: String,
}

impl LegacyPayload {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CodecError> {
        let ssid = self.ssid.as_bytes();
        let pass = self.passphrase.as_bytes();
        if ssid.len() > 255 || pass.len() > 255 {
            return Err(CodecError::MalformedPayload);
        }
        let mut out = Vec::with_capacity(2 + ssid.len() + pass.len());
        out.push(ssid.len() as u8);
        out.extend_from_slice(ssid);
        out.push(pass.len() as u8);
        out.extend_from_slice(pass);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let &ssid_len = bytes.first().ok_or(CodecError::MalformedPayload)?;
        let ssid_end = 1 + ssid_len as usize;
        let &pass_len = bytes.get(ssid_end).ok_or(CodecError::MalformedPayload)?;
        let pass_end = ssid_end + 1 + pass_len as usize;
        if bytes.len() != pass_end {
            return Err(CodecError::MalformedPayload);
        }
        let ssid = std::str::from_utf8(&bytes[1..ssid_end])
            .map_err(|_| CodecError::MalformedPayload)?
            .to_string();
        let passphrase = std::str::from_utf8(&bytes[ssid_end + 1..pass_end])
            .map_err(|_| CodecError::MalformedPayload)?
            .to_string();
        Ok(LegacyPayload { ssid, passphrase })
    }
}

/// Writes a capture file: one decimal frame length per line.
pub fn write_capture(path: &Path, frames: &[FrameLength]) -> std::io::Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for f in frames {
        writeln!(file, "{}", f.get())?;
    }
    file.flush()
}

/// Reads a capture file written by [`write_capture`] (or any tool producing
/// one decimal length per line). Out-of-range lines are rejected.
pub fn read_capture(path: &Path) -> std::io::Result<Vec<FrameLength>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut frames = Vec::new();
    for line in file.lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: u16 = trimmed
            .parse()
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let frame = FrameLength::new(value)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        frames.push(frame);
    }
    Ok(frames)
}
