//! Frame layout used by the TCP backend: a fixed 16-byte little-endian
//! header followed by a JSON-encoded [`Body`].

use std::io::{Read, Write};

use crate::addressing::NodeId;
use crate::error::{Error, Result};
use crate::transport::{Body, MessageKind};

pub const HEADER_LEN: usize = 16;
pub const MAX_PAYLOAD: u32 = 64 << 20;

pub const FLAG_REPLY: u16 = 1;
/// The sender waits for a reply carrying the same correlation id.
pub const FLAG_WANTS_REPLY: u16 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub kind: MessageKind,
    pub src: NodeId,
    pub dst: NodeId,
    pub flags: u16,
    pub corr: u32,
    pub len: u32,
}

impl Header {
    pub fn is_reply(&self) -> bool {
        self.flags & FLAG_REPLY != 0
    }

    pub fn wants_reply(&self) -> bool {
        self.flags & FLAG_WANTS_REPLY != 0
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..2].copy_from_slice(&self.kind.code().to_le_bytes());
        b[2..4].copy_from_slice(&self.src.to_le_bytes());
        b[4..6].copy_from_slice(&self.dst.to_le_bytes());
        b[6..8].copy_from_slice(&self.flags.to_le_bytes());
        b[8..12].copy_from_slice(&self.corr.to_le_bytes());
        b[12..16].copy_from_slice(&self.len.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8; HEADER_LEN]) -> Result<Header> {
        let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
        let len = u32_at(12);
        if len > MAX_PAYLOAD {
            return Err(Error::Codec(format!("payload length {len} exceeds limit")));
        }
        Ok(Header {
            kind: MessageKind::from_code(u16_at(0))?,
            src: u16_at(2),
            dst: u16_at(4),
            flags: u16_at(6),
            corr: u32_at(8),
            len,
        })
    }
}

/// Serializes a full frame. `kind` is passed explicitly because replies
/// travel under the kind of the request they answer.
pub fn encode_frame(kind: MessageKind, src: NodeId, dst: NodeId, flags: u16, corr: u32, body: &Body) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(body).map_err(|e| Error::Codec(e.to_string()))?;
    let len = u32::try_from(payload.len()).map_err(|_| Error::Codec("payload too large".into()))?;
    let h = Header { kind, src, dst, flags, corr, len };
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&h.encode());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write_frame<W: Write>(w: &mut W, frame: &[u8]) -> Result<()> {
    w.write_all(frame)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<(Header, Body)> {
    let mut hb = [0u8; HEADER_LEN];
    r.read_exact(&mut hb)?;
    let h = Header::decode(&hb)?;
    let mut payload = vec![0u8; h.len as usize];
    r.read_exact(&mut payload)?;
    let body = serde_json::from_slice(&payload).map_err(|e| Error::Codec(e.to_string()))?;
    Ok((h, body))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_roundtrip() {
        let h = Header { kind: MessageKind::MutexOp, src: 3, dst: 65535, flags: FLAG_REPLY, corr: 0xdead_beef, len: 77 };
        assert_eq!(Header::decode(&h.encode()).unwrap(), h);
    }

    #[test]
    fn frame_roundtrip() {
        let body = Body::WriteBytes { base: 0x40, offset: 8, bytes: vec![1, 2, 3] };
        let f = encode_frame(body.kind(), 1, 2, FLAG_WANTS_REPLY, 9, &body).unwrap();
        let (h, b) = read_frame(&mut &f[..]).unwrap();
        assert_eq!(b, body);
        assert_eq!(h.len as usize, f.len() - HEADER_LEN);
        assert!(h.wants_reply() && !h.is_reply());
    }

    #[test]
    fn rejects_bad_kind_and_length() {
        let mut b = Header { kind: MessageKind::Heartbeat, src: 0, dst: 1, flags: 0, corr: 0, len: 0 }.encode();
        b[0] = 99;
        assert!(Header::decode(&b).is_err());
        let mut b = Header { kind: MessageKind::Heartbeat, src: 0, dst: 1, flags: 0, corr: 0, len: 0 }.encode();
        b[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(Header::decode(&b).is_err());
    }
}
