//! Frame vocabulary and its byte-level encoding.
//!
//! Frame layout (after the transport's `u32` little-endian length prefix):
//!
//! | offset | size | field              |
//! |--------|------|--------------------|
//! | 0      | 16   | session id         |
//! | 16     | 8    | sequence number    |
//! | 24     | 1    | frame kind         |
//! | 25     | ...  | kind-specific body |

use crate::codec::{wire::HEADER_LEN as PAYLOAD_HEADER_LEN, CompressedPayload};
use crate::netsim::session::SESSION_ID_LEN;
use crate::netsim::NetError;

/// Fixed frame header bytes (session + seq + kind).
pub const FRAME_HEADER_LEN: usize = SESSION_ID_LEN + 8 + 1;
/// Transport length-prefix bytes charged per frame.
pub const LENGTH_PREFIX_LEN: usize = 4;

/// Frame discriminator on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameKind {
    Payload = 0,
    PacingToken = 1,
    Handshake = 2,
    Ack = 3,
}

impl FrameKind {
    pub fn from_u8(b: u8) -> Result<Self, NetError> {
        match b {
            0 => Ok(FrameKind::Payload),
            1 => Ok(FrameKind::PacingToken),
            2 => Ok(FrameKind::Handshake),
            3 => Ok(FrameKind::Ack),
            other => Err(NetError::Corrupt(format!("unknown frame kind {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameKind::Payload => "payload",
            FrameKind::PacingToken => "pacing-token",
            FrameKind::Handshake => "handshake",
            FrameKind::Ack => "ack",
        }
    }
}

/// One handshake message (all three phases share the shape).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandshakeMsg {
    /// 0 = initiator hello, 1 = responder proof, 2 = initiator proof.
    pub phase: u8,
    /// Claimed peer identity.
    pub peer: String,
    pub nonce: [u8; 16],
    /// SHA-256 proof tag (zeros in phase 0).
    pub tag: [u8; 32],
}

/// Kind-specific frame contents.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameBody {
    Payload(CompressedPayload),
    /// Small pacing credit: the optimizer step it acknowledges plus a role
    /// tag chosen by the sender.
    PacingToken { step: u64, sender_role: u8 },
    Handshake(HandshakeMsg),
    Ack { of_seq: u64 },
}

impl FrameBody {
    pub fn kind(&self) -> FrameKind {
        match self {
            FrameBody::Payload(_) => FrameKind::Payload,
            FrameBody::PacingToken { .. } => FrameKind::PacingToken,
            FrameBody::Handshake(_) => FrameKind::Handshake,
            FrameBody::Ack { .. } => FrameKind::Ack,
        }
    }
}

/// One framed message.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub session: [u8; SESSION_ID_LEN],
    pub seq: u64,
    pub body: FrameBody,
}

impl Frame {
    pub fn kind(&self) -> FrameKind {
        self.body.kind()
    }

    /// Serializes the frame (without the transport length prefix).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + 64);
        out.extend_from_slice(&self.session);
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.push(self.kind() as u8);
        match &self.body {
            FrameBody::Payload(p) => out.extend_from_slice(&p.to_bytes()),
            FrameBody::PacingToken { step, sender_role } => {
                out.extend_from_slice(&step.to_le_bytes());
                out.push(*sender_role);
            }
            FrameBody::Handshake(h) => {
                out.push(h.phase);
                let peer = h.peer.as_bytes();
                out.extend_from_slice(&(peer.len() as u16).to_le_bytes());
                out.extend_from_slice(peer);
                out.extend_from_slice(&h.nonce);
                out.extend_from_slice(&h.tag);
            }
            FrameBody::Ack { of_seq } => out.extend_from_slice(&of_seq.to_le_bytes()),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        if bytes.len() < FRAME_HEADER_LEN {
            return Err(NetError::Corrupt(format!(
                "frame shorter than its {FRAME_HEADER_LEN}-byte header ({} bytes)",
                bytes.len()
            )));
        }
        let mut session = [0u8; SESSION_ID_LEN];
        session.copy_from_slice(&bytes[..SESSION_ID_LEN]);
        let seq = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let kind = FrameKind::from_u8(bytes[24])?;
        let body_bytes = &bytes[FRAME_HEADER_LEN..];
        let body = match kind {
            FrameKind::Payload => FrameBody::Payload(CompressedPayload::from_bytes(body_bytes)?),
            FrameKind::PacingToken => {
                if body_bytes.len() != 9 {
                    return Err(NetError::Corrupt(format!(
                        "pacing token body must be 9 bytes, got {}",
                        body_bytes.len()
                    )));
                }
                FrameBody::PacingToken {
                    step: u64::from_le_bytes(body_bytes[..8].try_into().unwrap()),
                    sender_role: body_bytes[8],
                }
            }
            FrameKind::Handshake => {
                if body_bytes.len() < 3 {
                    return Err(NetError::Corrupt("handshake body too short".into()));
                }
                let phase = body_bytes[0];
                let peer_len = u16::from_le_bytes(body_bytes[1..3].try_into().unwrap()) as usize;
                let want = 3 + peer_len + 16 + 32;
                if body_bytes.len() != want {
                    return Err(NetError::Corrupt(format!(
                        "handshake body must be {want} bytes, got {}",
                        body_bytes.len()
                    )));
                }
                let peer = String::from_utf8(body_bytes[3..3 + peer_len].to_vec())
                    .map_err(|_| NetError::Corrupt("handshake peer is not utf-8".into()))?;
                let mut nonce = [0u8; 16];
                nonce.copy_from_slice(&body_bytes[3 + peer_len..3 + peer_len + 16]);
                let mut tag = [0u8; 32];
                tag.copy_from_slice(&body_bytes[3 + peer_len + 16..]);
                FrameBody::Handshake(HandshakeMsg { phase, peer, nonce, tag })
            }
            FrameKind::Ack => {
                if body_bytes.len() != 8 {
                    return Err(NetError::Corrupt(format!(
                        "ack body must be 8 bytes, got {}",
                        body_bytes.len()
                    )));
                }
                FrameBody::Ack { of_seq: u64::from_le_bytes(body_bytes.try_into().unwrap()) }
            }
        };
        Ok(Frame { session, seq, body })
    }

    /// Bytes charged to the link for this frame: length prefix, frame
    /// header, and the body at its accounted size.
    pub fn charged_bytes(&self) -> u64 {
        let body = match &self.body {
            FrameBody::Payload(p) => {
                PAYLOAD_HEADER_LEN as u64 + p.data_bytes() + p.metadata_bytes()
            }
            FrameBody::PacingToken { .. } => 9,
            FrameBody::Handshake(h) => 3 + h.peer.len() as u64 + 16 + 32,
            FrameBody::Ack { .. } => 8,
        };
        (LENGTH_PREFIX_LEN + FRAME_HEADER_LEN) as u64 + body
    }

    /// `(method_id, dense element count)` for codec-cost charging.
    pub fn timing_hint(&self) -> (u8, u64) {
        match &self.body {
            FrameBody::Payload(p) => (p.method_id, p.rows as u64 * p.cols as u64),
            _ => (crate::codec::wire::method_id::IDENTITY, 0),
        }
    }
}
