//! Minimal DER encoding and cursor-based parsing.
//!
//! Only the small subset needed for the self-signed attestation certificate
//! and for walking the TLV structure of received messages (the certificate
//! inside a registration response is length-delimited by its own DER header,
//! exactly as in the raw U2F format).

pub const TAG_INTEGER: u8 = 0x02;
pub const TAG_BIT_STRING: u8 = 0x03;
pub const TAG_OID: u8 = 0x06;
pub const TAG_UTF8_STRING: u8 = 0x0c;
pub const TAG_UTC_TIME: u8 = 0x17;
pub const TAG_SEQUENCE: u8 = 0x30;
pub const TAG_SET: u8 = 0x31;

/// Encodes a definite-length header for `len` content bytes.
fn header(tag: u8, len: usize) -> Vec<u8> {
    let mut out = vec![tag];
    if len < 0x80 {
        out.push(len as u8);
    } else {
        let be = (len as u32).to_be_bytes();
        let skip = be.iter().take_while(|&&b| b == 0).count();
        out.push(0x80 | (4 - skip) as u8);
        out.extend_from_slice(&be[skip..]);
    }
    out
}

/// One TLV element with the given tag and content.
pub fn tlv(tag: u8, content: &[u8]) -> Vec<u8> {
    let mut out = header(tag, content.len());
    out.extend_from_slice(content);
    out
}

/// SEQUENCE of already-encoded children.
pub fn sequence(children: &[&[u8]]) -> Vec<u8> {
    let content: Vec<u8> = children.iter().flat_map(|c| c.iter().copied()).collect();
    tlv(TAG_SEQUENCE, &content)
}

/// SET of already-encoded children.
pub fn set(children: &[&[u8]]) -> Vec<u8> {
    let content: Vec<u8> = children.iter().flat_map(|c| c.iter().copied()).collect();
    tlv(TAG_SET, &content)
}

/// Positive INTEGER from big-endian magnitude bytes.
pub fn integer(magnitude: &[u8]) -> Vec<u8> {
    let trimmed: &[u8] = {
        let skip = magnitude.iter().take_while(|&&b| b == 0).count();
        &magnitude[skip.min(magnitude.len().saturating_sub(1))..]
    };
    let mut content = Vec::with_capacity(trimmed.len() + 1);
    if trimmed.first().is_none_or(|&b| b & 0x80 != 0) {
        content.push(0);
    }
    content.extend_from_slice(trimmed);
    tlv(TAG_INTEGER, &content)
}

/// BIT STRING with zero unused bits.
pub fn bit_string(bytes: &[u8]) -> Vec<u8> {
    let mut content = Vec::with_capacity(bytes.len() + 1);
    content.push(0);
    content.extend_from_slice(bytes);
    tlv(TAG_BIT_STRING, &content)
}

/// Total encoded length (header plus content) of the TLV starting at the
/// front of `buf`, or `None` if the header is malformed or truncated.
pub fn element_len(buf: &[u8]) -> Option<usize> {
    if buf.len() < 2 {
        return None;
    }
    let first = buf[1];
    let (header_len, content_len) = if first < 0x80 {
        (2, first as usize)
    } else {
        let n = (first & 0x7f) as usize;
        if n == 0 || n > 4 || buf.len() < 2 + n {
            return None;
        }
        let mut len = 0usize;
        for &b in &buf[2..2 + n] {
            len = (len << 8) | b as usize;
        }
        (2 + n, len)
    };
    let total = header_len.checked_add(content_len)?;
    (buf.len() >= total).then_some(total)
}

/// Forward-only reader over a DER buffer.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    /// Reads the next element, returning its tag and content.
    pub fn next(&mut self) -> Option<(u8, &'a [u8])> {
        let rest = &self.buf[self.pos..];
        let total = element_len(rest)?;
        let tag = rest[0];
        let content_off = total - content_len_of(rest)?;
        let content = &rest[content_off..total];
        self.pos += total;
        Some((tag, content))
    }

    /// Reads the next element and also returns its full encoding
    /// (header included), needed when a signature covers raw TLV bytes.
    pub fn next_raw(&mut self) -> Option<(u8, &'a [u8], &'a [u8])> {
        let rest = &self.buf[self.pos..];
        let total = element_len(rest)?;
        let tag = rest[0];
        let content_off = total - content_len_of(rest)?;
        let raw = &rest[..total];
        let content = &rest[content_off..total];
        self.pos += total;
        Some((tag, content, raw))
    }

    /// Reads the next element, requiring `tag`.
    pub fn expect(&mut self, tag: u8) -> Option<&'a [u8]> {
        let (t, content) = self.next()?;
        (t == tag).then_some(content)
    }
}

fn content_len_of(buf: &[u8]) -> Option<usize> {
    let first = *buf.get(1)?;
    if first < 0x80 {
        Some(first as usize)
    } else {
        let n = (first & 0x7f) as usize;
        let mut len = 0usize;
        for &b in buf.get(2..2 + n)? {
            len = (len << 8) | b as usize;
        }
        Some(len)
    }
}
