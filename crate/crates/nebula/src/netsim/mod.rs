//! Deterministic point-to-point link simulation and the framing/session
//! layer shared by the simulated and real-socket transports.

mod frame;
mod session;
mod sim;
mod socket;

pub use frame::{Frame, FrameBody, FrameKind, HandshakeMsg};
pub use session::{
    handshake_interleaved, PendingHandshake, ReplayGuard, SessionCredential, SECRET_ENV_VAR,
    SESSION_ID_LEN,
};
pub use sim::{sim_pair, SimEnd};
pub use socket::TcpLink;

use thiserror::Error;

use crate::codec::{wire::method_id, CodecError};

/// Errors surfaced by the link layer.
#[derive(Debug, Error)]
pub enum NetError {
    /// Nothing arrived within the receive window.
    #[error("timed out after waiting {waited_s}s for a frame")]
    Timeout { waited_s: f64 },
    #[error("transport io error: {0}")]
    Io(#[from] std::io::Error),
    /// Bytes that do not parse as a frame.
    #[error("corrupt frame: {0}")]
    Corrupt(String),
    /// Frame for a different session than the one established on this link.
    #[error("session mismatch: frame carries {got}, link established {want}")]
    SessionMismatch { got: String, want: String },
    /// Handshake proof failures and replayed nonces.
    #[error("authentication failed: {0}")]
    Auth(String),
    /// Sequencing or ordering violations and misuse of the link.
    #[error("protocol violation: {0}")]
    Protocol(String),
    /// Embedded payload failed its own validation.
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("peer disconnected: {0}")]
    Disconnected(String),
}

/// Per-element encode/decode cost model, in seconds per dense input element.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CodecCostModel {
    pub fp16_s_per_element: f64,
    pub int8_s_per_element: f64,
    pub svd_s_per_element: f64,
}

impl CodecCostModel {
    /// Zero-cost model: transfers are charged for bytes and latency only.
    pub fn free() -> Self {
        Self::default()
    }

    /// Total codec seconds for one tensor of `elements` dense elements under
    /// the wire method `id`. Nested methods pay for both stages.
    pub fn cost_s(&self, id: u8, elements: u64) -> f64 {
        let e = elements as f64;
        match id {
            method_id::IDENTITY | method_id::TOKENS => 0.0,
            method_id::FP16 => self.fp16_s_per_element * e,
            method_id::INT8 => self.int8_s_per_element * e,
            method_id::SVD => self.svd_s_per_element * e,
            method_id::FP16_SVD => (self.svd_s_per_element + self.fp16_s_per_element) * e,
            method_id::INT8_SVD => (self.svd_s_per_element + self.int8_s_per_element) * e,
            _ => 0.0,
        }
    }
}

/// Static description of one WAN link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkSpec {
    pub bandwidth_bits_per_s: f64,
    /// One-way propagation latency in seconds.
    pub latency_s: f64,
    /// Symmetric multiplicative jitter fraction in `[0, 1)`.
    pub jitter: f64,
    pub cost: CodecCostModel,
}

impl LinkSpec {
    pub fn new(bandwidth_bits_per_s: f64, latency_s: f64, jitter: f64) -> Self {
        assert!(bandwidth_bits_per_s > 0.0, "bandwidth must be positive");
        assert!(latency_s >= 0.0, "latency must be non-negative");
        assert!((0.0..1.0).contains(&jitter), "jitter fraction must be in [0, 1)");
        Self { bandwidth_bits_per_s, latency_s, jitter, cost: CodecCostModel::free() }
    }

    pub fn with_cost(mut self, cost: CodecCostModel) -> Self {
        self.cost = cost;
        self
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        assert!((0.0..1.0).contains(&jitter));
        self.jitter = jitter;
        self
    }

    /// 170 Mbit/s inter-cluster link.
    pub fn wan_170() -> Self {
        Self::new(170e6, 0.01, 0.0)
    }

    /// 60 Mbit/s inter-cluster link. The shorter one-way latency keeps the
    /// serialization term dominant for desk-scale tensors, mirroring the
    /// data-bound regime the full-scale link operates in.
    pub fn wan_60() -> Self {
        Self::new(60e6, 0.001, 0.0)
    }

    /// Fast local fabric for intra-cluster traffic.
    pub fn local_fabric() -> Self {
        Self::new(100e9, 0.0, 0.0)
    }

    /// Deterministic one-way transfer time:
    /// `latency + 8 * bytes / bandwidth + codec_cost`.
    pub fn transfer_time(&self, bytes: u64, codec_cost_s: f64) -> f64 {
        self.latency_s + (8.0 * bytes as f64) / self.bandwidth_bits_per_s + codec_cost_s
    }

    /// Transfer time for a tensor under wire method `id`, paying the codec
    /// cost for `elements` dense elements.
    pub fn transfer_time_for(&self, bytes: u64, id: u8, elements: u64) -> f64 {
        self.transfer_time(bytes, self.cost.cost_s(id, elements))
    }

    /// Jittered transfer time: the deterministic time scaled by a uniform
    /// factor in `[1 - jitter, 1 + jitter]`.
    pub fn transfer_time_jittered(
        &self,
        bytes: u64,
        codec_cost_s: f64,
        rng: &mut impl rand::Rng,
    ) -> f64 {
        let base = self.transfer_time(bytes, codec_cost_s);
        if self.jitter == 0.0 {
            base
        } else {
            base * (1.0 + self.jitter * (2.0 * rng.gen::<f64>() - 1.0))
        }
    }
}

/// Byte-level substrate under the framing layer. Implemented by the
/// simulated link (logical clocks) and the TCP transport (wall clock).
pub trait RawLink {
    /// Ships an already-serialized frame. `charged_bytes`, `method_id` and
    /// `elements` drive simulated timing; real sockets ignore them.
    fn send_bytes(
        &mut self,
        bytes: &[u8],
        charged_bytes: u64,
        method_id: u8,
        elements: u64,
    ) -> Result<(), NetError>;

    /// Blocks up to `timeout_s` for the next frame's bytes.
    fn recv_bytes(&mut self, timeout_s: f64) -> Result<Vec<u8>, NetError>;

    /// Local clock in seconds (simulated or wall).
    fn now(&self) -> f64;

    /// Advances the local clock by compute time (no-op on real transports).
    fn advance(&mut self, dt_s: f64);
}

/// Transfer statistics kept per endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub frames_sent: u64,
    pub frames_received: u64,
    /// Charged bytes (length prefix + frame header + accounted payload).
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

/// Framing, sequencing, and session enforcement over a raw link.
///
/// Outgoing frames get consecutive sequence numbers; incoming frames must
/// arrive exactly once, in order, and (once a session is established) carry
/// the negotiated session id.
pub struct Endpoint<L: RawLink> {
    link: L,
    session: Option<[u8; SESSION_ID_LEN]>,
    next_send_seq: u64,
    next_recv_seq: u64,
    pub stats: LinkStats,
}

impl<L: RawLink> Endpoint<L> {
    pub fn new(link: L) -> Self {
        Self { link, session: None, next_send_seq: 0, next_recv_seq: 0, stats: LinkStats::default() }
    }

    /// Session id negotiated by the handshake, if any.
    pub fn session(&self) -> Option<[u8; SESSION_ID_LEN]> {
        self.session
    }

    pub fn now(&self) -> f64 {
        self.link.now()
    }

    /// Charges local compute time to this endpoint's clock.
    pub fn advance(&mut self, dt_s: f64) {
        self.link.advance(dt_s);
    }

    /// Direct access to the substrate (tests and diagnostics).
    pub fn link_mut(&mut self) -> &mut L {
        &mut self.link
    }

    /// Sends one frame body, assigning the next sequence number. Returns the
    /// charged byte count.
    pub fn send(&mut self, body: FrameBody) -> Result<u64, NetError> {
        let session = match (&body, self.session) {
            (FrameBody::Handshake(_), s) => s.unwrap_or([0u8; SESSION_ID_LEN]),
            (_, Some(s)) => s,
            (_, None) => {
                return Err(NetError::Protocol(
                    "cannot send application frames before the handshake".into(),
                ))
            }
        };
        let frame = Frame { session, seq: self.next_send_seq, body };
        let bytes = frame.to_bytes();
        let charged = frame.charged_bytes();
        let (mid, elements) = frame.timing_hint();
        self.link.send_bytes(&bytes, charged, mid, elements)?;
        self.next_send_seq += 1;
        self.stats.frames_sent += 1;
        self.stats.bytes_sent += charged;
        Ok(charged)
    }

    /// Receives the next frame, enforcing ordering and session identity.
    pub fn recv(&mut self, timeout_s: f64) -> Result<Frame, NetError> {
        let bytes = self.link.recv_bytes(timeout_s)?;
        let frame = Frame::from_bytes(&bytes)?;
        if frame.seq != self.next_recv_seq {
            return Err(NetError::Protocol(format!(
                "out-of-order frame: got seq {}, expected {}",
                frame.seq, self.next_recv_seq
            )));
        }
        match (self.session, &frame.body) {
            (None, FrameBody::Handshake(_)) => {}
            (None, _) => {
                return Err(NetError::Protocol(
                    "application frame received before the handshake".into(),
                ))
            }
            (Some(want), _) => {
                if frame.session != want {
                    return Err(NetError::SessionMismatch {
                        got: hex16(&frame.session),
                        want: hex16(&want),
                    });
                }
            }
        }
        self.next_recv_seq += 1;
        self.stats.frames_received += 1;
        self.stats.bytes_received += frame.charged_bytes();
        Ok(frame)
    }

    pub(crate) fn set_session(&mut self, id: [u8; SESSION_ID_LEN]) {
        self.session = Some(id);
    }
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
