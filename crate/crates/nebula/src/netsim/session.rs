//! Mutual authentication with a pre-shared secret.
//!
//! Three messages: the initiator sends a fresh nonce; the responder answers
//! with its own nonce and a SHA-256 proof over both nonces and the secret;
//! the initiator verifies and returns its own proof. Both sides then derive
//! the same 128-bit session id. A responder-side replay guard rejects
//! reused initiator nonces.
//!
//! The handshake is exposed both as blocking entry points (for transports
//! with two independently running sides) and as resumable phases (for
//! single-threaded simulated drives).

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::netsim::frame::{FrameBody, FrameKind, HandshakeMsg};
use crate::netsim::{Endpoint, NetError, RawLink};

/// Session ids are truncated SHA-256 digests.
pub const SESSION_ID_LEN: usize = 16;

/// Environment variable consulted for the shared secret.
pub const SECRET_ENV_VAR: &str = "NEBULA_SECRET";

const LABEL_SESSION: u8 = 0x00;
const LABEL_INITIATOR: u8 = 0x01;
const LABEL_RESPONDER: u8 = 0x02;

const HANDSHAKE_TIMEOUT_S: f64 = 30.0;

/// What one side brings to a handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionCredential {
    /// Identity this side claims.
    pub peer: String,
    /// Pre-shared secret; both sides must hold the same bytes.
    pub secret: Vec<u8>,
    /// Fresh nonce contributed to the session.
    pub nonce: [u8; 16],
}

impl SessionCredential {
    pub fn new(peer: impl Into<String>, secret: impl Into<Vec<u8>>, nonce: [u8; 16]) -> Self {
        Self { peer: peer.into(), secret: secret.into(), nonce }
    }

    /// Credential with a nonce drawn from a seeded generator.
    pub fn from_seed(peer: impl Into<String>, secret: impl Into<Vec<u8>>, seed: u64) -> Self {
        let mut nonce = [0u8; 16];
        ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut nonce);
        Self::new(peer, secret, nonce)
    }

    /// Shared secret from `NEBULA_SECRET`, if set and non-empty.
    pub fn secret_from_env() -> Option<Vec<u8>> {
        std::env::var(SECRET_ENV_VAR).ok().filter(|s| !s.is_empty()).map(String::into_bytes)
    }
}

/// Responder-side memory of initiator nonces, shared across connections.
#[derive(Debug, Default)]
pub struct ReplayGuard {
    seen: Vec<[u8; 16]>,
}

impl ReplayGuard {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `nonce`; fails if it was already seen.
    pub fn check_and_insert(&mut self, nonce: [u8; 16]) -> Result<(), NetError> {
        if self.seen.contains(&nonce) {
            return Err(NetError::Auth("replayed initiator nonce".into()));
        }
        self.seen.push(nonce);
        Ok(())
    }
}

/// Responder state between sending its proof and verifying the initiator's.
#[derive(Debug)]
pub struct PendingHandshake {
    initiator_nonce: [u8; 16],
}

fn tag(label: u8, nonce_i: &[u8; 16], nonce_r: &[u8; 16], secret: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update([label]);
    h.update(nonce_i);
    h.update(nonce_r);
    h.update(secret);
    h.finalize().into()
}

fn session_id(nonce_i: &[u8; 16], nonce_r: &[u8; 16], secret: &[u8]) -> [u8; SESSION_ID_LEN] {
    let digest = tag(LABEL_SESSION, nonce_i, nonce_r, secret);
    let mut id = [0u8; SESSION_ID_LEN];
    id.copy_from_slice(&digest[..SESSION_ID_LEN]);
    id
}

impl<L: RawLink> Endpoint<L> {
    /// Blocking initiator handshake: hello, verify responder, prove.
    pub fn handshake_initiate(
        &mut self,
        cred: &SessionCredential,
    ) -> Result<[u8; SESSION_ID_LEN], NetError> {
        self.handshake_hello(cred)?;
        self.handshake_finish_initiator(cred)
    }

    /// Blocking responder handshake: read hello, prove, verify initiator.
    pub fn handshake_respond(
        &mut self,
        cred: &SessionCredential,
        guard: &mut ReplayGuard,
    ) -> Result<[u8; SESSION_ID_LEN], NetError> {
        let pending = self.handshake_respond_phase1(cred, guard)?;
        self.handshake_finish_responder(cred, pending)
    }

    /// Initiator phase 0: announce identity and nonce.
    pub fn handshake_hello(&mut self, cred: &SessionCredential) -> Result<(), NetError> {
        if self.session().is_some() {
            return Err(NetError::Protocol("session already established".into()));
        }
        self.send(FrameBody::Handshake(HandshakeMsg {
            phase: 0,
            peer: cred.peer.clone(),
            nonce: cred.nonce,
            tag: [0u8; 32],
        }))?;
        Ok(())
    }

    /// Initiator phases 1-2: verify the responder proof, send our own, and
    /// bind the session.
    pub fn handshake_finish_initiator(
        &mut self,
        cred: &SessionCredential,
    ) -> Result<[u8; SESSION_ID_LEN], NetError> {
        let reply = self.recv(HANDSHAKE_TIMEOUT_S).map_err(timeout_to_abort)?;
        let msg = expect_handshake(reply.body, 1)?;
        let want = tag(LABEL_RESPONDER, &cred.nonce, &msg.nonce, &cred.secret);
        if msg.tag != want {
            return Err(NetError::Auth(format!(
                "responder proof mismatch from peer {:?} (wrong shared secret?)",
                msg.peer
            )));
        }
        self.send(FrameBody::Handshake(HandshakeMsg {
            phase: 2,
            peer: cred.peer.clone(),
            nonce: cred.nonce,
            tag: tag(LABEL_INITIATOR, &cred.nonce, &msg.nonce, &cred.secret),
        }))?;
        let id = session_id(&cred.nonce, &msg.nonce, &cred.secret);
        self.set_session(id);
        Ok(id)
    }

    /// Responder phase 1: read the hello, enforce nonce freshness, send the
    /// responder proof.
    pub fn handshake_respond_phase1(
        &mut self,
        cred: &SessionCredential,
        guard: &mut ReplayGuard,
    ) -> Result<PendingHandshake, NetError> {
        if self.session().is_some() {
            return Err(NetError::Protocol("session already established".into()));
        }
        let hello = self.recv(HANDSHAKE_TIMEOUT_S).map_err(timeout_to_abort)?;
        let hello = expect_handshake(hello.body, 0)?;
        guard.check_and_insert(hello.nonce)?;
        self.send(FrameBody::Handshake(HandshakeMsg {
            phase: 1,
            peer: cred.peer.clone(),
            nonce: cred.nonce,
            tag: tag(LABEL_RESPONDER, &hello.nonce, &cred.nonce, &cred.secret),
        }))?;
        Ok(PendingHandshake { initiator_nonce: hello.nonce })
    }

    /// Responder phase 2: verify the initiator proof and bind the session.
    pub fn handshake_finish_responder(
        &mut self,
        cred: &SessionCredential,
        pending: PendingHandshake,
    ) -> Result<[u8; SESSION_ID_LEN], NetError> {
        let proof = self.recv(HANDSHAKE_TIMEOUT_S).map_err(timeout_to_abort)?;
        let proof = expect_handshake(proof.body, 2)?;
        let nonce_i = pending.initiator_nonce;
        let want = tag(LABEL_INITIATOR, &nonce_i, &cred.nonce, &cred.secret);
        if proof.tag != want {
            return Err(NetError::Auth(format!(
                "initiator proof mismatch from peer {:?} (wrong shared secret?)",
                proof.peer
            )));
        }
        let id = session_id(&nonce_i, &cred.nonce, &cred.secret);
        self.set_session(id);
        Ok(id)
    }
}

fn timeout_to_abort(e: NetError) -> NetError {
    match e {
        NetError::Timeout { waited_s } => NetError::Auth(format!(
            "handshake aborted: expected message never arrived (waited {waited_s}s)"
        )),
        NetError::Disconnected(_) => {
            NetError::Auth("handshake aborted: peer closed the connection".into())
        }
        other => other,
    }
}

/// Drives a full handshake between two endpoints living on one thread
/// (simulated links). Returns the session ids seen by each side.
pub fn handshake_interleaved<A: RawLink, B: RawLink>(
    initiator: &mut Endpoint<A>,
    icred: &SessionCredential,
    responder: &mut Endpoint<B>,
    rcred: &SessionCredential,
    guard: &mut ReplayGuard,
) -> Result<[u8; SESSION_ID_LEN], NetError> {
    initiator.handshake_hello(icred)?;
    let pending = responder.handshake_respond_phase1(rcred, guard)?;
    let initiator_view = initiator.handshake_finish_initiator(icred);
    let responder_view = responder.handshake_finish_responder(rcred, pending);
    let (ia, ib) = (initiator_view?, responder_view?);
    debug_assert_eq!(ia, ib, "both sides must derive the same session id");
    Ok(ia)
}

fn expect_handshake(body: FrameBody, phase: u8) -> Result<HandshakeMsg, NetError> {
    match body {
        FrameBody::Handshake(msg) if msg.phase == phase => Ok(msg),
        FrameBody::Handshake(msg) => Err(NetError::Protocol(format!(
            "handshake phase {} arrived where phase {phase} was expected",
            msg.phase
        ))),
        other => Err(NetError::Protocol(format!(
            "{} frame arrived mid-handshake",
            FrameKind::name(other.kind())
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{sim_pair, LinkSpec, SimEnd};

    fn pair() -> (Endpoint<SimEnd>, Endpoint<SimEnd>) {
        sim_pair(LinkSpec::wan_170(), 7)
    }

    #[test]
    fn matching_secrets_agree_on_a_session_id() {
        let (mut a, mut b) = pair();
        let ca = SessionCredential::from_seed("alpha", "hunter2", 1);
        let cb = SessionCredential::from_seed("beta", "hunter2", 2);
        let mut guard = ReplayGuard::new();

        a.handshake_hello(&ca).unwrap();
        let pending = b.handshake_respond_phase1(&cb, &mut guard).unwrap();
        let id_a = a.handshake_finish_initiator(&ca).unwrap();
        let id_b = b.handshake_finish_responder(&cb, pending).unwrap();

        assert_eq!(id_a, id_b);
        assert_ne!(id_a, [0u8; 16]);
        assert_eq!(a.session(), Some(id_a));
        assert_eq!(b.session(), Some(id_b));
    }

    #[test]
    fn interleaved_helper_matches_manual_drive() {
        let (mut a, mut b) = pair();
        let ca = SessionCredential::from_seed("alpha", "s3cr3t", 11);
        let cb = SessionCredential::from_seed("beta", "s3cr3t", 12);
        let id = handshake_interleaved(&mut a, &ca, &mut b, &cb, &mut ReplayGuard::new()).unwrap();
        assert_eq!(a.session(), Some(id));
        assert_eq!(b.session(), Some(id));
    }

    #[test]
    fn mismatched_secrets_are_rejected_on_both_sides() {
        let (mut a, mut b) = pair();
        let ca = SessionCredential::from_seed("alpha", "right-secret", 1);
        let cb = SessionCredential::from_seed("beta", "wrong-secret", 2);
        let mut guard = ReplayGuard::new();

        a.handshake_hello(&ca).unwrap();
        let pending = b.handshake_respond_phase1(&cb, &mut guard).unwrap();

        // Initiator rejects the responder's proof outright.
        let err_a = a.handshake_finish_initiator(&ca).unwrap_err();
        assert!(matches!(err_a, NetError::Auth(ref m) if m.contains("responder proof mismatch")), "{err_a}");

        // The initiator never sent its proof, so the responder aborts too.
        let err_b = b.handshake_finish_responder(&cb, pending).unwrap_err();
        assert!(matches!(err_b, NetError::Auth(_)), "{err_b}");

        assert_eq!(a.session(), None);
        assert_eq!(b.session(), None);
    }

    #[test]
    fn responder_rejects_a_forged_initiator_proof() {
        let (mut a, mut b) = pair();
        let ca = SessionCredential::from_seed("alpha", "secret", 1);
        let cb = SessionCredential::from_seed("beta", "secret", 2);
        let mut guard = ReplayGuard::new();

        a.handshake_hello(&ca).unwrap();
        let pending = b.handshake_respond_phase1(&cb, &mut guard).unwrap();
        // Skip verification and send a bogus phase-2 proof.
        let _ = a.recv(1.0).unwrap();
        a.send(FrameBody::Handshake(HandshakeMsg {
            phase: 2,
            peer: ca.peer.clone(),
            nonce: ca.nonce,
            tag: [0xAB; 32],
        }))
        .unwrap();

        let err = b.handshake_finish_responder(&cb, pending).unwrap_err();
        assert!(matches!(err, NetError::Auth(ref m) if m.contains("initiator proof mismatch")), "{err}");
    }

    #[test]
    fn replayed_nonce_is_rejected_across_connections() {
        let ca = SessionCredential::from_seed("alpha", "secret", 1);
        let cb = SessionCredential::from_seed("beta", "secret", 2);
        let mut guard = ReplayGuard::new();

        let (mut a1, mut b1) = pair();
        handshake_interleaved(&mut a1, &ca, &mut b1, &cb, &mut guard).unwrap();

        // Fresh connection, same initiator nonce, same persistent guard.
        let (mut a2, mut b2) = pair();
        a2.handshake_hello(&ca).unwrap();
        let err = b2.handshake_respond_phase1(&cb, &mut guard).unwrap_err();
        assert!(matches!(err, NetError::Auth(ref m) if m.contains("replayed")), "{err}");
    }

    #[test]
    fn seeded_credentials_are_reproducible() {
        let a = SessionCredential::from_seed("x", "s", 9);
        let b = SessionCredential::from_seed("x", "s", 9);
        assert_eq!(a, b);
        let c = SessionCredential::from_seed("x", "s", 10);
        assert_ne!(a.nonce, c.nonce);
    }
}
