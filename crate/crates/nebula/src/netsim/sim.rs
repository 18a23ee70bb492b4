//! In-process simulated link with per-endpoint logical clocks.
//!
//! Each `send` advances the sender's clock by the (possibly jittered)
//! transfer time and enqueues the frame with that arrival timestamp; `recv`
//! advances the receiver's clock to the arrival time. Frames in one
//! direction arrive in send order, exactly once.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::netsim::{Endpoint, LinkSpec, NetError, RawLink};

struct Shared {
    spec: LinkSpec,
    /// Independent jitter streams per direction keep timing deterministic
    /// regardless of how the two sides interleave their sends.
    rng: [ChaCha20Rng; 2],
    /// `queues[d]` holds frames travelling toward endpoint `d`.
    queues: [VecDeque<(f64, Vec<u8>)>; 2],
    /// Logical clocks, seconds.
    clocks: [f64; 2],
}

/// One side of a simulated link.
pub struct SimEnd {
    side: usize,
    shared: Rc<RefCell<Shared>>,
}

impl SimEnd {
    /// Link parameters (shared by both sides).
    pub fn spec(&self) -> LinkSpec {
        self.shared.borrow().spec
    }

    /// Peer's logical clock, for diagnostics.
    pub fn peer_now(&self) -> f64 {
        self.shared.borrow().clocks[1 - self.side]
    }
}

/// Builds a connected pair of endpoints over one simulated link.
pub fn sim_pair(spec: LinkSpec, seed: u64) -> (Endpoint<SimEnd>, Endpoint<SimEnd>) {
    let shared = Rc::new(RefCell::new(Shared {
        spec,
        rng: [
            ChaCha20Rng::seed_from_u64(seed.wrapping_mul(2)),
            ChaCha20Rng::seed_from_u64(seed.wrapping_mul(2).wrapping_add(1)),
        ],
        queues: [VecDeque::new(), VecDeque::new()],
        clocks: [0.0, 0.0],
    }));
    let a = SimEnd { side: 0, shared: Rc::clone(&shared) };
    let b = SimEnd { side: 1, shared };
    (Endpoint::new(a), Endpoint::new(b))
}

impl RawLink for SimEnd {
    fn send_bytes(
        &mut self,
        bytes: &[u8],
        charged_bytes: u64,
        method_id: u8,
        elements: u64,
    ) -> Result<(), NetError> {
        let mut s = self.shared.borrow_mut();
        let cost = s.spec.cost.cost_s(method_id, elements);
        let spec = s.spec;
        let dt = spec.transfer_time_jittered(charged_bytes, cost, &mut s.rng[self.side]);
        s.clocks[self.side] += dt;
        let arrival = s.clocks[self.side];
        s.queues[1 - self.side].push_back((arrival, bytes.to_vec()));
        Ok(())
    }

    fn recv_bytes(&mut self, timeout_s: f64) -> Result<Vec<u8>, NetError> {
        let mut s = self.shared.borrow_mut();
        let me = self.side;
        match s.queues[me].front() {
            None => Err(NetError::Timeout { waited_s: timeout_s }),
            Some(&(arrival, _)) => {
                if arrival > s.clocks[me] + timeout_s {
                    return Err(NetError::Timeout { waited_s: timeout_s });
                }
                if arrival > s.clocks[me] {
                    s.clocks[me] = arrival;
                }
                let (_, bytes) = s.queues[me].pop_front().expect("checked front");
                Ok(bytes)
            }
        }
    }

    fn now(&self) -> f64 {
        self.shared.borrow().clocks[self.side]
    }

    fn advance(&mut self, dt_s: f64) {
        assert!(dt_s >= 0.0, "cannot advance a clock backwards");
        self.shared.borrow_mut().clocks[self.side] += dt_s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::frame::{Frame, FrameBody};
    use crate::netsim::SESSION_ID_LEN;

    fn established_pair(spec: LinkSpec, seed: u64) -> (Endpoint<SimEnd>, Endpoint<SimEnd>) {
        let (mut a, mut b) = sim_pair(spec, seed);
        a.set_session([9u8; SESSION_ID_LEN]);
        b.set_session([9u8; SESSION_ID_LEN]);
        (a, b)
    }

    #[test]
    fn sequential_sends_advance_the_clock_by_the_sum_of_transfer_times() {
        let spec = LinkSpec::new(1e6, 0.005, 0.0);
        let (mut a, mut b) = established_pair(spec, 0);
        let mut expected = 0.0;
        for i in 0..5u64 {
            let charged = a.send(FrameBody::Ack { of_seq: i }).unwrap();
            // Accumulate the independent oracle in the same order; the final
            // clock must match it exactly.
            expected += spec.transfer_time(charged, 0.0);
        }
        assert_eq!(a.now(), expected);
        // Receiver drains all five in order and lands on the last arrival.
        for i in 0..5u64 {
            let f = b.recv(10.0).unwrap();
            assert!(matches!(f.body, FrameBody::Ack { of_seq } if of_seq == i));
        }
        assert_eq!(b.now(), expected);
    }

    #[test]
    fn frames_are_delivered_exactly_once_in_order() {
        let (mut a, mut b) = established_pair(LinkSpec::wan_170(), 1);
        for i in 0..100u64 {
            a.send(FrameBody::Ack { of_seq: i }).unwrap();
        }
        for i in 0..100u64 {
            let f = b.recv(10.0).unwrap();
            assert_eq!(f.seq, i);
            assert!(matches!(f.body, FrameBody::Ack { of_seq } if of_seq == i));
        }
        assert!(matches!(b.recv(10.0), Err(NetError::Timeout { .. })));
        assert_eq!(b.stats.frames_received, 100);
    }

    #[test]
    fn jittered_arrivals_never_reorder_a_direction() {
        let spec = LinkSpec::new(1e6, 0.001, 0.0).with_jitter(0.5);
        let (mut a, _b) = established_pair(spec, 42);
        let mut last = 0.0;
        for i in 0..200u64 {
            a.send(FrameBody::Ack { of_seq: i }).unwrap();
            let now = a.now();
            assert!(now >= last, "sender clock must be monotone");
            last = now;
        }
        let arrivals: Vec<f64> = a
            .link_mut()
            .shared
            .borrow()
            .queues[1]
            .iter()
            .map(|(t, _)| *t)
            .collect();
        for w in arrivals.windows(2) {
            assert!(w[0] <= w[1], "arrivals must be monotone per direction");
        }
    }

    #[test]
    fn recv_times_out_when_the_frame_is_still_in_flight() {
        let spec = LinkSpec::new(1e3, 1.0, 0.0); // very slow link
        let (mut a, mut b) = established_pair(spec, 3);
        a.send(FrameBody::Ack { of_seq: 0 }).unwrap();
        // Arrival is more than a second away; a tight timeout must fail
        // without consuming the frame.
        assert!(matches!(b.recv(0.001), Err(NetError::Timeout { .. })));
        let f = b.recv(100.0).unwrap();
        assert!(matches!(f.body, FrameBody::Ack { of_seq: 0 }));
    }

    #[test]
    fn receiver_clock_only_moves_forward() {
        let spec = LinkSpec::new(1e9, 0.0001, 0.0);
        let (mut a, mut b) = established_pair(spec, 4);
        a.send(FrameBody::Ack { of_seq: 0 }).unwrap();
        b.advance(10.0); // receiver is already past the arrival time
        b.recv(1.0).unwrap();
        assert_eq!(b.now(), 10.0);
    }

    #[test]
    fn out_of_order_injection_is_detected() {
        let (mut a, mut b) = established_pair(LinkSpec::wan_170(), 5);
        // Bypass the endpoint to inject a frame with a skipped sequence.
        let rogue = Frame {
            session: [9u8; SESSION_ID_LEN],
            seq: 7,
            body: FrameBody::Ack { of_seq: 0 },
        };
        a.link_mut().send_bytes(&rogue.to_bytes(), 64, 0, 0).unwrap();
        let err = b.recv(10.0).unwrap_err();
        assert!(matches!(err, NetError::Protocol(ref m) if m.contains("out-of-order")), "{err}");
    }

    #[test]
    fn wrong_session_is_detected() {
        let (mut a, mut b) = established_pair(LinkSpec::wan_170(), 6);
        let rogue = Frame {
            session: [1u8; SESSION_ID_LEN],
            seq: 0,
            body: FrameBody::Ack { of_seq: 0 },
        };
        a.link_mut().send_bytes(&rogue.to_bytes(), 64, 0, 0).unwrap();
        let err = b.recv(10.0).unwrap_err();
        assert!(matches!(err, NetError::SessionMismatch { .. }), "{err}");
    }

    #[test]
    fn application_frames_require_a_session() {
        let (mut a, _b) = sim_pair(LinkSpec::wan_170(), 7);
        let err = a.send(FrameBody::Ack { of_seq: 0 }).unwrap_err();
        assert!(matches!(err, NetError::Protocol(_)));
    }

    #[test]
    fn identical_seeds_give_identical_timelines() {
        let spec = LinkSpec::wan_60().with_jitter(0.2);
        let run = |seed: u64| {
            let (mut a, mut b) = established_pair(spec, seed);
            for i in 0..50u64 {
                a.send(FrameBody::Ack { of_seq: i }).unwrap();
                b.recv(10.0).unwrap();
            }
            (a.now(), b.now())
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }
}
