//! Cross-cluster training protocols as deterministic state machines.
//!
//! Two deployments are modeled. In the first, a generator cluster feeds
//! sampled token ids to a discriminator cluster that fans them out to `n`
//! parallel sub-workers, and the only traffic back is a tiny pacing token
//! that keeps both sides within one optimization step of each other. In
//! the second, an encoder and a decoder split one model across the link,
//! exchanging forward activations and backward gradients through a codec
//! schedule.
//!
//! Every run produces a [`ProtocolTrace`] whose invariants
//! ([`pacing_invariant_check`]) are the machine-checkable form of the
//! protocols' synchronization contract.

pub mod config;
pub mod scenario1;
pub mod scenario2;

pub use config::ExperimentConfig;
pub use scenario1::{
    run_scenario1_sim, run_scenario1_sim_from, run_scenario1_socket_discriminator,
    run_scenario1_socket_generator, DiscriminatorArtifacts, GeneratorArtifacts,
    Scenario1Report, Scenario1Round, Scenario1Settings,
};
pub use scenario2::{
    run_scenario2_sim, run_scenario2_sim_from, run_scenario2_socket_decoder,
    run_scenario2_socket_encoder, split_eval_accuracy, split_eval_loss, DecoderArtifacts,
    EncoderArtifacts, Scenario2Report, Scenario2Settings, StepRecord,
};

use std::fmt;

use thiserror::Error;

use crate::netsim::NetError;
use crate::toygrad::ToygradError;

/// Errors from protocol runs.
#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("net: {0}")]
    Net(#[from] NetError),
    #[error("train: {0}")]
    Train(#[from] ToygradError),
    #[error("codec: {0}")]
    Codec(#[from] crate::codec::CodecError),
    #[error("{role} stalled waiting for {what} at step {step}")]
    Stall { role: RoleTag, what: String, step: u64 },
    #[error("pacing violation: {0}")]
    Pacing(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("config: {0}")]
    Config(String),
}

/// Which side of a deployment an event belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RoleTag {
    Generator,
    DiscriminatorRoot,
    DiscriminatorSub(u32),
    Encoder,
    Decoder,
}

impl RoleTag {
    /// Single-byte role code carried inside pacing tokens.
    pub fn wire_code(&self) -> u8 {
        match self {
            RoleTag::Generator => 0,
            RoleTag::DiscriminatorRoot => 1,
            RoleTag::DiscriminatorSub(_) => 2,
            RoleTag::Encoder => 3,
            RoleTag::Decoder => 4,
        }
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoleTag::Generator => write!(f, "generator"),
            RoleTag::DiscriminatorRoot => write!(f, "discriminator-root"),
            RoleTag::DiscriminatorSub(k) => write!(f, "discriminator-sub-{k}"),
            RoleTag::Encoder => write!(f, "encoder"),
            RoleTag::Decoder => write!(f, "decoder"),
        }
    }
}

/// A protocol participant: its role plus the compute-time model (seconds
/// per micro-batch) used to advance the simulated clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterRole {
    pub tag: RoleTag,
    pub compute_s_per_micro_batch: f64,
}

/// Picks how many discriminator sub-workers to attach to one generator so
/// neither side idles: `n = max(1, round(t_d / t_g))`. This is the
/// simulator's stand-in for calibrating against a practical performance
/// test of both clusters.
pub fn calibrate_n(t_g: f64, t_d: f64) -> usize {
    assert!(t_g > 0.0 && t_d > 0.0, "compute times must be positive");
    ((t_d / t_g).round() as usize).max(1)
}

/// What happened at one point of simulated time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEventKind {
    /// Local compute occupied the role.
    Compute,
    /// A frame left this role.
    Send,
    /// A frame was consumed by this role.
    Recv,
    /// The role applied one optimizer step.
    OptStep,
    /// Intra-cluster barrier (sub-workers syncing with their root).
    Barrier,
}

impl TraceEventKind {
    pub fn name(&self) -> &'static str {
        match self {
            TraceEventKind::Compute => "compute",
            TraceEventKind::Send => "send",
            TraceEventKind::Recv => "recv",
            TraceEventKind::OptStep => "opt_step",
            TraceEventKind::Barrier => "barrier",
        }
    }
}

/// One trace row: when, who, what, how many bytes moved (zero for local
/// events), and a free-form label (frame kind, counters).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub time: f64,
    pub role: RoleTag,
    pub kind: TraceEventKind,
    pub step: u64,
    pub bytes: u64,
    pub label: String,
}

/// Ordered event log of one protocol run.
#[derive(Debug, Clone, Default)]
pub struct ProtocolTrace {
    pub events: Vec<TraceEvent>,
}

impl ProtocolTrace {
    pub fn push(
        &mut self,
        time: f64,
        role: RoleTag,
        kind: TraceEventKind,
        step: u64,
        bytes: u64,
        label: impl Into<String>,
    ) {
        self.events.push(TraceEvent { time, role, kind, step, bytes, label: label.into() });
    }

    /// Sorts events by time (stably, so same-time events keep insertion
    /// order), with receives after other events at the same instant: a
    /// delivery that completes exactly when its send does still happened
    /// after it. Call after merging per-role logs.
    pub fn sort_by_time(&mut self) {
        let rank = |e: &TraceEvent| u8::from(e.kind == TraceEventKind::Recv);
        self.events
            .sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap().then(rank(a).cmp(&rank(b))));
    }

    /// Total bytes moved by `Send` events matching a filter.
    pub fn sent_bytes_where(&self, f: impl Fn(&TraceEvent) -> bool) -> u64 {
        self.events
            .iter()
            .filter(|e| e.kind == TraceEventKind::Send && f(e))
            .map(|e| e.bytes)
            .sum()
    }

    /// Serializes the trace as CSV (`time,role,event,step,bytes,label`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,role,event,step,bytes,label\n");
        for e in &self.events {
            let label = if e.label.contains(',') || e.label.contains('"') {
                format!("\"{}\"", e.label.replace('"', "\"\""))
            } else {
                e.label.clone()
            };
            out.push_str(&format!(
                "{:.9},{},{},{},{},{}\n",
                e.time,
                e.role,
                e.kind.name(),
                e.step,
                e.bytes,
                label
            ));
        }
        out
    }
}

/// Result of [`pacing_invariant_check`].
#[derive(Debug, Clone)]
pub struct PacingReport {
    /// Largest step-counter divergence between the two sides observed at
    /// any timestamp.
    pub max_divergence: u64,
    /// First `(time, detail)` where the divergence bound broke, if ever.
    pub first_violation: Option<(f64, String)>,
    /// Send events without a matching recv (bytes and label must pair up).
    pub unmatched_sends: usize,
}

impl PacingReport {
    pub fn pass(&self) -> bool {
        self.first_violation.is_none() && self.unmatched_sends == 0
    }
}

fn is_left(role: RoleTag) -> bool {
    matches!(role, RoleTag::Generator | RoleTag::Encoder)
}

/// Walks a time-ordered trace and checks the synchronization contract:
/// the two sides' optimizer-step counters never differ by more than one
/// at any timestamp, timestamps are non-decreasing, and every send has a
/// matching recv (same label, same byte count, in order per direction).
pub fn pacing_invariant_check(trace: &ProtocolTrace) -> PacingReport {
    use std::collections::VecDeque;
    let mut left_steps = 0u64; // generator / encoder side
    let mut right_steps = 0u64; // discriminator / decoder side
    let mut max_div = 0u64;
    let mut first_violation = None;
    let mut last_time = f64::NEG_INFINITY;
    // One in-flight queue per direction; each direction delivers in order.
    let mut in_flight: [VecDeque<(u64, String)>; 2] = [VecDeque::new(), VecDeque::new()];
    for e in &trace.events {
        if e.time < last_time && first_violation.is_none() {
            first_violation =
                Some((e.time, format!("timestamp regressed from {last_time}")));
        }
        last_time = last_time.max(e.time);
        match e.kind {
            TraceEventKind::OptStep => {
                if is_left(e.role) {
                    left_steps += 1;
                } else {
                    right_steps += 1;
                }
                let div = left_steps.abs_diff(right_steps);
                max_div = max_div.max(div);
                if div > 1 && first_violation.is_none() {
                    first_violation = Some((
                        e.time,
                        format!(
                            "step counters diverged to {div} ({left_steps} vs {right_steps})"
                        ),
                    ));
                }
            }
            TraceEventKind::Send => {
                let queue = usize::from(!is_left(e.role));
                in_flight[queue].push_back((e.bytes, e.label.clone()));
            }
            TraceEventKind::Recv => {
                // A left-side recv consumes from the right-to-left queue.
                let queue = usize::from(is_left(e.role));
                match in_flight[queue].pop_front() {
                    Some((bytes, label)) if bytes == e.bytes && label == e.label => {}
                    Some((bytes, label)) => {
                        if first_violation.is_none() {
                            first_violation = Some((
                                e.time,
                                format!(
                                    "recv {}/{} does not match oldest send {label}/{bytes}",
                                    e.label, e.bytes
                                ),
                            ));
                        }
                    }
                    None => {
                        if first_violation.is_none() {
                            first_violation =
                                Some((e.time, "recv without a prior send".to_string()));
                        }
                    }
                }
            }
            _ => {}
        }
    }
    PacingReport {
        max_divergence: max_div,
        first_violation,
        unmatched_sends: in_flight[0].len() + in_flight[1].len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibrate_n_matches_the_rounding_rule() {
        assert_eq!(calibrate_n(1.0, 1.0), 1);
        assert_eq!(calibrate_n(1.0, 8.0), 8);
        assert_eq!(calibrate_n(1.0, 3.7), 4);
        assert_eq!(calibrate_n(2.0, 1.0), 1); // faster discriminator still gets one
        assert_eq!(calibrate_n(0.05, 0.4), 8);
    }

    fn lockstep_trace(rounds: u64) -> ProtocolTrace {
        let mut t = ProtocolTrace::default();
        let mut clock = 0.0;
        for r in 0..rounds {
            clock += 1.0;
            t.push(clock, RoleTag::Generator, TraceEventKind::Compute, r, 0, "fwd");
            t.push(clock, RoleTag::Generator, TraceEventKind::Send, r, 100, "payload");
            t.push(clock, RoleTag::Generator, TraceEventKind::OptStep, r + 1, 0, "");
            clock += 1.0;
            t.push(clock, RoleTag::DiscriminatorRoot, TraceEventKind::Recv, r, 100, "payload");
            t.push(clock, RoleTag::DiscriminatorRoot, TraceEventKind::OptStep, r + 1, 0, "");
            t.push(clock, RoleTag::DiscriminatorRoot, TraceEventKind::Send, r, 9, "token");
            clock += 0.5;
            t.push(clock, RoleTag::Generator, TraceEventKind::Recv, r, 9, "token");
        }
        t
    }

    #[test]
    fn lockstep_trace_passes() {
        let report = pacing_invariant_check(&lockstep_trace(10));
        assert!(report.pass(), "{report:?}");
        assert!(report.max_divergence <= 1);
    }

    #[test]
    fn suppressed_token_is_caught() {
        // Doctor a trace so the generator steps twice without the
        // discriminator stepping in between: divergence 2.
        let mut t = ProtocolTrace::default();
        t.push(1.0, RoleTag::Generator, TraceEventKind::OptStep, 1, 0, "");
        t.push(2.0, RoleTag::Generator, TraceEventKind::OptStep, 2, 0, "");
        let report = pacing_invariant_check(&t);
        assert!(!report.pass());
        let (time, detail) = report.first_violation.unwrap();
        assert_eq!(time, 2.0);
        assert!(detail.contains("diverged to 2"), "{detail}");
    }

    #[test]
    fn unmatched_or_mismatched_sends_fail() {
        let mut t = lockstep_trace(2);
        t.push(100.0, RoleTag::Generator, TraceEventKind::Send, 3, 55, "payload");
        let report = pacing_invariant_check(&t);
        assert_eq!(report.unmatched_sends, 1);
        assert!(!report.pass());

        let mut t2 = ProtocolTrace::default();
        t2.push(1.0, RoleTag::Generator, TraceEventKind::Send, 0, 10, "payload");
        t2.push(2.0, RoleTag::DiscriminatorRoot, TraceEventKind::Recv, 0, 11, "payload");
        let report2 = pacing_invariant_check(&t2);
        assert!(report2.first_violation.is_some());
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let t = lockstep_trace(1);
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "time,role,event,step,bytes,label");
        assert_eq!(lines.len(), 1 + t.events.len());
        assert!(lines[1].starts_with("1.000000000,generator,compute,0,0,fwd"));
    }
}
