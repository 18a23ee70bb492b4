//! Generator-to-discriminator protocol.
//!
//! Per round, the generator trains on `n` fresh seeded micro-batches,
//! ships only the sampled (corrupted) token ids for each one, and applies
//! a single averaged optimizer step. The discriminator root receives the
//! `n` payloads, scatters them to its sub-workers (intra-cluster traffic
//! is modeled as free; the subs run in parallel, so one micro-batch
//! duration elapses for all of them), barriers, applies its own averaged
//! step, and returns a pacing token. The generator blocks on the previous
//! round's token before stepping, which bounds the step-counter divergence
//! at one while letting the two sides overlap their compute.
//!
//! No tensor ever travels from the discriminator to the generator: the
//! only frames on that direction are pacing tokens. The discriminator
//! reconstructs clean batches and mask positions from the shared data
//! seed, so the forward payloads stay at two bytes per token.

use crate::codec::wire::{method_id, CompressedPayload};
use crate::codec::CodecError;
use crate::netsim::{
    handshake_interleaved, sim_pair, Endpoint, LinkSpec, NetError, RawLink, ReplayGuard,
    SessionCredential,
};
use crate::orchestrator::{
    pacing_invariant_check, PacingReport, ProtocolError, ProtocolTrace, RoleTag, TraceEventKind,
};
use crate::toygrad::{
    build_corrupt, derive_rng, discriminator_joint_loss, generator_loss, mask_batch, purpose,
    AdamHyper, Grads, MarkovChain, ModelConfig, OptimizerState, TokenBatch, ToyModel,
};

/// Default blocking-receive window for protocol frames.
pub const RECV_TIMEOUT_S: f64 = 60.0;

/// Everything a scenario-1 run needs besides transport endpoints.
#[derive(Debug, Clone)]
pub struct Scenario1Settings {
    pub rounds: u64,
    /// Sub-worker count (micro-batches per round).
    pub n: usize,
    /// Generator seconds per micro-batch.
    pub t_g: f64,
    /// Discriminator seconds per micro-batch.
    pub t_d: f64,
    pub link: LinkSpec,
    pub g_model: ModelConfig,
    pub d_model: ModelConfig,
    pub g_hyper: AdamHyper,
    pub d_hyper: AdamHyper,
    pub electra: crate::toygrad::ElectraConfig,
    /// Seed for link jitter and handshake nonces.
    pub link_seed: u64,
}

impl Scenario1Settings {
    pub fn from_config(cfg: &super::ExperimentConfig) -> Result<Self, ProtocolError> {
        cfg.validate()?;
        Ok(Self {
            rounds: cfg.run.steps,
            n: cfg.sub_count(),
            t_g: cfg.compute.t_g,
            t_d: cfg.compute.t_d,
            link: cfg.link_spec()?,
            g_model: cfg.model_config(crate::toygrad::ModelKind::Generator, cfg.left_seed()),
            d_model: cfg.model_config(crate::toygrad::ModelKind::Discriminator, cfg.right_seed()),
            g_hyper: cfg.adam_hyper(),
            d_hyper: cfg.adam_hyper(),
            electra: cfg.electra_config(),
            link_seed: cfg.link_seed(),
        })
    }
}

/// Serializes a corrupt batch as a token-id payload (two bytes per token).
pub fn tokens_payload(batch: &TokenBatch, step: u64) -> CompressedPayload {
    let mut body = Vec::with_capacity(2 * batch.ids.len());
    for &id in &batch.ids {
        body.extend_from_slice(&id.to_le_bytes());
    }
    CompressedPayload::new(
        method_id::TOKENS,
        batch.batch as u32,
        batch.len as u32,
        0,
        step,
        body,
    )
}

/// Parses a token-id payload body back into ids.
pub fn tokens_from_payload(payload: &CompressedPayload) -> Result<Vec<u16>, CodecError> {
    if payload.method_id != method_id::TOKENS {
        return Err(CodecError::Malformed(format!(
            "expected a token payload, got method {:#04x}",
            payload.method_id
        )));
    }
    let want = 2 * payload.rows as usize * payload.cols as usize;
    if payload.body.len() != want {
        return Err(CodecError::Malformed(format!(
            "token body is {} bytes but the shape requires {want}",
            payload.body.len()
        )));
    }
    let actual = crc32fast::hash(&payload.body);
    if actual != payload.crc {
        return Err(CodecError::ChecksumMismatch { expected: payload.crc, actual });
    }
    Ok(payload
        .body
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

/// Generator-side state machine. The phase methods are transport-agnostic;
/// a single-threaded simulation interleaves them with the discriminator's,
/// while the socket mode runs them in a plain blocking loop.
pub struct GeneratorSide<L: RawLink> {
    pub endpoint: Endpoint<L>,
    pub model: ToyModel,
    pub opt: OptimizerState,
    chain: MarkovChain,
    cfg: crate::toygrad::ElectraConfig,
    n: usize,
    t_g: f64,
    timeout_s: f64,
    start_time: f64,
    pending_grads: Option<Grads>,
    pub trace: ProtocolTrace,
    pub idle_s: f64,
    pub opt_steps: u64,
    pub loss_sum: f64,
    /// Mean generator loss of each completed round, in order.
    pub round_losses: Vec<f64>,
}

impl<L: RawLink> GeneratorSide<L> {
    pub fn new(
        endpoint: Endpoint<L>,
        model: ToyModel,
        opt: OptimizerState,
        cfg: crate::toygrad::ElectraConfig,
        n: usize,
        t_g: f64,
    ) -> Self {
        assert!(n >= 1, "at least one micro-batch per round");
        let chain = MarkovChain::new(model.config.vocab, cfg.data_seed);
        let start_time = endpoint.now();
        Self {
            endpoint,
            model,
            opt,
            chain,
            cfg,
            n,
            t_g,
            timeout_s: RECV_TIMEOUT_S,
            start_time,
            pending_grads: None,
            trace: ProtocolTrace::default(),
            idle_s: 0.0,
            opt_steps: 0,
            loss_sum: 0.0,
            round_losses: Vec::new(),
        }
    }

    /// Computes the round's `n` micro-batches against the pre-update model
    /// and ships one sample-id payload per micro-batch.
    pub fn round_compute_send(&mut self, round: u64) -> Result<(), ProtocolError> {
        assert!(self.pending_grads.is_none(), "finish_round must run between rounds");
        let mut grads = Grads::zeros_for(&self.model);
        let mut round_loss = 0.0;
        for k in 0..self.n {
            let data_step = round * self.n as u64 + k as u64;
            let masked = self.masked_batch(data_step)?;
            let out = generator_loss(&self.model, &masked)?;
            let corrupt = build_corrupt(&self.model, &masked, self.cfg.data_seed, data_step)?;
            grads.add(&out.grads);
            self.loss_sum += out.loss;
            round_loss += out.loss;
            self.endpoint.advance(self.t_g);
            self.trace.push(
                self.endpoint.now(),
                RoleTag::Generator,
                TraceEventKind::Compute,
                data_step,
                0,
                "micro-batch",
            );
            let bytes = self.endpoint.send(crate::netsim::FrameBody::Payload(
                tokens_payload(&corrupt, data_step),
            ))?;
            self.trace.push(
                self.endpoint.now(),
                RoleTag::Generator,
                TraceEventKind::Send,
                data_step,
                bytes,
                "sample-ids",
            );
        }
        if self.n > 1 {
            grads.scale(1.0 / self.n as f64);
        }
        self.round_losses.push(round_loss / self.n as f64);
        self.pending_grads = Some(grads);
        Ok(())
    }

    /// Applies the round's optimizer step, first blocking on the previous
    /// round's pacing token (rounds after the first).
    pub fn finish_round(&mut self, round: u64, first_round: u64) -> Result<(), ProtocolError> {
        if round > first_round {
            self.consume_token(round - 1)?;
        }
        let grads = self
            .pending_grads
            .take()
            .expect("round_compute_send must run before finish_round");
        self.opt.step(&mut self.model, &grads)?;
        self.opt_steps += 1;
        self.trace.push(
            self.endpoint.now(),
            RoleTag::Generator,
            TraceEventKind::OptStep,
            self.opt_steps,
            0,
            "adam",
        );
        Ok(())
    }

    /// Blocks for the discriminator's token acknowledging `round`.
    pub fn consume_token(&mut self, round: u64) -> Result<(), ProtocolError> {
        let t0 = self.endpoint.now();
        let frame = self.endpoint.recv(self.timeout_s).map_err(|e| match e {
            NetError::Timeout { .. } => ProtocolError::Stall {
                role: RoleTag::DiscriminatorRoot,
                what: "pacing token".into(),
                step: round,
            },
            other => ProtocolError::Net(other),
        })?;
        self.idle_s += self.endpoint.now() - t0;
        let bytes = frame.charged_bytes();
        match frame.body {
            crate::netsim::FrameBody::PacingToken { step, sender_role } => {
                if sender_role != RoleTag::DiscriminatorRoot.wire_code() {
                    return Err(ProtocolError::Pacing(format!(
                        "token carries sender code {sender_role}, expected the discriminator root"
                    )));
                }
                if step != round {
                    return Err(ProtocolError::Pacing(format!(
                        "token acknowledges round {step} where round {round} was expected"
                    )));
                }
            }
            other => {
                return Err(ProtocolError::Protocol(format!(
                    "unexpected {} frame while waiting for a pacing token",
                    other.kind().name()
                )))
            }
        }
        self.trace.push(
            self.endpoint.now(),
            RoleTag::Generator,
            TraceEventKind::Recv,
            round,
            bytes,
            "token",
        );
        Ok(())
    }

    fn masked_batch(&self, data_step: u64) -> Result<TokenBatch, crate::toygrad::ToygradError> {
        let ids = self.chain.sample(
            self.cfg.batch,
            self.cfg.len,
            &mut derive_rng(self.cfg.data_seed, data_step, purpose::BATCH),
        );
        let clean = TokenBatch::clean(self.cfg.batch, self.cfg.len, ids)?;
        mask_batch(
            &clean,
            self.cfg.mask_fraction,
            self.model.config.mask_id(),
            &mut derive_rng(self.cfg.data_seed, data_step, purpose::MASK),
        )
    }

    pub fn elapsed_s(&self) -> f64 {
        self.endpoint.now() - self.start_time
    }
}

/// Discriminator-side state machine: the root plus its `n` logical
/// sub-workers (scatter within the cluster is free and the subs run in
/// parallel, so each round charges one discriminator micro-batch time).
pub struct DiscriminatorSide<L: RawLink> {
    pub endpoint: Endpoint<L>,
    pub model: ToyModel,
    pub opt: OptimizerState,
    chain: MarkovChain,
    cfg: crate::toygrad::ElectraConfig,
    n: usize,
    t_d: f64,
    timeout_s: f64,
    start_time: f64,
    pub trace: ProtocolTrace,
    pub idle_s: f64,
    pub opt_steps: u64,
    pub rtd_loss_sum: f64,
    pub clm_loss_sum: f64,
    /// Mean `(rtd, clm)` losses of each completed round, in order.
    pub round_losses: Vec<(f64, f64)>,
}

impl<L: RawLink> DiscriminatorSide<L> {
    pub fn new(
        endpoint: Endpoint<L>,
        model: ToyModel,
        opt: OptimizerState,
        cfg: crate::toygrad::ElectraConfig,
        n: usize,
        t_d: f64,
    ) -> Self {
        assert!(n >= 1, "at least one sub-worker");
        let chain = MarkovChain::new(model.config.vocab, cfg.data_seed);
        let start_time = endpoint.now();
        Self {
            endpoint,
            model,
            opt,
            chain,
            cfg,
            n,
            t_d,
            timeout_s: RECV_TIMEOUT_S,
            start_time,
            trace: ProtocolTrace::default(),
            idle_s: 0.0,
            opt_steps: 0,
            rtd_loss_sum: 0.0,
            clm_loss_sum: 0.0,
            round_losses: Vec::new(),
        }
    }

    /// Receives the round's `n` payloads, runs the sub-workers, barriers,
    /// steps the optimizer, and returns the pacing token.
    pub fn process_round(&mut self, round: u64) -> Result<(), ProtocolError> {
        let mut grads = Grads::zeros_for(&self.model);
        let mut rtd = 0.0;
        let mut clm = 0.0;
        for k in 0..self.n {
            let data_step = round * self.n as u64 + k as u64;
            let t0 = self.endpoint.now();
            let frame = self.endpoint.recv(self.timeout_s).map_err(|e| match e {
                NetError::Timeout { .. } => ProtocolError::Stall {
                    role: RoleTag::Generator,
                    what: "sample-id payload".into(),
                    step: data_step,
                },
                other => ProtocolError::Net(other),
            })?;
            self.idle_s += self.endpoint.now() - t0;
            let bytes = frame.charged_bytes();
            let payload = match frame.body {
                crate::netsim::FrameBody::Payload(p) => p,
                other => {
                    return Err(ProtocolError::Protocol(format!(
                        "unexpected {} frame while waiting for sample ids",
                        other.kind().name()
                    )))
                }
            };
            if payload.step != data_step {
                return Err(ProtocolError::Protocol(format!(
                    "payload for data step {} arrived where step {data_step} was expected",
                    payload.step
                )));
            }
            self.trace.push(
                self.endpoint.now(),
                RoleTag::DiscriminatorRoot,
                TraceEventKind::Recv,
                data_step,
                bytes,
                "sample-ids",
            );
            let corrupt = self.rebuild_batch(&payload, data_step)?;
            let out =
                discriminator_joint_loss(&self.model, &corrupt, self.cfg.lambda, self.cfg.gamma)?;
            grads.add(&out.grads);
            rtd += out.rtd_loss;
            clm += out.clm_loss;
        }
        // The subs run in parallel, so one micro-batch duration covers all n.
        self.endpoint.advance(self.t_d);
        for k in 1..=self.n {
            self.trace.push(
                self.endpoint.now(),
                RoleTag::DiscriminatorSub(k as u32),
                TraceEventKind::Compute,
                round,
                0,
                "disc micro-batch",
            );
        }
        self.trace.push(
            self.endpoint.now(),
            RoleTag::DiscriminatorRoot,
            TraceEventKind::Barrier,
            round,
            0,
            "subs-synced",
        );
        if self.n > 1 {
            grads.scale(1.0 / self.n as f64);
        }
        self.rtd_loss_sum += rtd / self.n as f64;
        self.clm_loss_sum += clm / self.n as f64;
        self.round_losses.push((rtd / self.n as f64, clm / self.n as f64));
        self.opt.step(&mut self.model, &grads)?;
        self.opt_steps += 1;
        self.trace.push(
            self.endpoint.now(),
            RoleTag::DiscriminatorRoot,
            TraceEventKind::OptStep,
            self.opt_steps,
            0,
            "adam",
        );
        let bytes = self.endpoint.send(crate::netsim::FrameBody::PacingToken {
            step: round,
            sender_role: RoleTag::DiscriminatorRoot.wire_code(),
        })?;
        self.trace.push(
            self.endpoint.now(),
            RoleTag::DiscriminatorRoot,
            TraceEventKind::Send,
            round,
            bytes,
            "token",
        );
        Ok(())
    }

    /// Rebuilds the corrupt batch: sampled ids from the wire, clean ids and
    /// mask positions re-derived from the shared data seed. Unmasked wire
    /// ids must agree with the local stream, which catches seed drift.
    fn rebuild_batch(
        &self,
        payload: &CompressedPayload,
        data_step: u64,
    ) -> Result<TokenBatch, ProtocolError> {
        let batch = payload.rows as usize;
        let len = payload.cols as usize;
        if batch != self.cfg.batch || len != self.cfg.len {
            return Err(ProtocolError::Protocol(format!(
                "payload shape {batch}x{len} does not match the configured {}x{}",
                self.cfg.batch, self.cfg.len
            )));
        }
        let wire_ids = tokens_from_payload(payload)?;
        let vocab = self.model.config.vocab as u16;
        if let Some(&bad) = wire_ids.iter().find(|&&id| id >= vocab) {
            return Err(ProtocolError::Protocol(format!(
                "payload carries token id {bad} outside the data vocabulary ({vocab})"
            )));
        }
        let clean_ids = self.chain.sample(
            batch,
            len,
            &mut derive_rng(self.cfg.data_seed, data_step, purpose::BATCH),
        );
        let clean = TokenBatch::clean(batch, len, clean_ids).map_err(ProtocolError::Train)?;
        let masked = mask_batch(
            &clean,
            self.cfg.mask_fraction,
            self.model.config.mask_id(),
            &mut derive_rng(self.cfg.data_seed, data_step, purpose::MASK),
        )
        .map_err(ProtocolError::Train)?;
        let mut is_masked = vec![false; batch * len];
        for &p in &masked.masked {
            is_masked[p] = true;
        }
        for (pos, (&wire, &orig)) in wire_ids.iter().zip(&masked.originals).enumerate() {
            if !is_masked[pos] && wire != orig {
                return Err(ProtocolError::Protocol(format!(
                    "unmasked position {pos} carries id {wire} but the shared stream says {orig}; \
                     the sides disagree on the data seed"
                )));
            }
        }
        Ok(TokenBatch {
            batch,
            len,
            ids: wire_ids,
            originals: masked.originals,
            masked: masked.masked,
        })
    }

    pub fn elapsed_s(&self) -> f64 {
        self.endpoint.now() - self.start_time
    }
}

/// Per-round losses of a scenario-1 run (each a mean over the round's
/// micro-batches).
#[derive(Debug, Clone, Copy)]
pub struct Scenario1Round {
    pub round: u64,
    pub generator_loss: f64,
    pub rtd_loss: f64,
    pub clm_loss: f64,
}

impl Scenario1Round {
    /// Combined training loss of the round under the objective weights.
    pub fn total(&self, lambda: f64, gamma: f64) -> f64 {
        self.generator_loss + lambda * self.rtd_loss + gamma * self.clm_loss
    }
}

/// Outcome of a scenario-1 run: counters, byte accounting, losses, the
/// merged trace with its pacing verdict, and the final model states.
pub struct Scenario1Report {
    pub rounds: u64,
    pub n: usize,
    pub g_opt_steps: u64,
    pub d_opt_steps: u64,
    pub g_idle_fraction: f64,
    pub d_idle_fraction: f64,
    pub g_elapsed_s: f64,
    pub d_elapsed_s: f64,
    /// Sample-id bytes shipped generator → discriminator.
    pub payload_bytes_to_d: u64,
    /// Pacing-token bytes shipped discriminator → generator.
    pub token_bytes_to_g: u64,
    /// Tensor bytes shipped discriminator → generator (zero by design).
    pub tensor_bytes_to_g: u64,
    pub mean_generator_loss: f64,
    pub mean_rtd_loss: f64,
    pub mean_clm_loss: f64,
    /// Per-round loss curve, one entry per completed round.
    pub records: Vec<Scenario1Round>,
    pub trace: ProtocolTrace,
    pub pacing: PacingReport,
    pub generator: ToyModel,
    pub g_opt: OptimizerState,
    pub discriminator: ToyModel,
    pub d_opt: OptimizerState,
}

fn finish_report<A: RawLink, B: RawLink>(
    g: GeneratorSide<A>,
    d: DiscriminatorSide<B>,
    rounds: u64,
    n: usize,
    first_round: u64,
) -> Scenario1Report {
    let records = g
        .round_losses
        .iter()
        .zip(&d.round_losses)
        .enumerate()
        .map(|(i, (&gen, &(rtd, clm)))| Scenario1Round {
            round: first_round + i as u64,
            generator_loss: gen,
            rtd_loss: rtd,
            clm_loss: clm,
        })
        .collect();
    let g_elapsed = g.elapsed_s();
    let d_elapsed = d.elapsed_s();
    let mut trace = ProtocolTrace::default();
    trace.events.extend(g.trace.events);
    trace.events.extend(d.trace.events);
    trace.sort_by_time();
    let payload_bytes_to_d = trace
        .sent_bytes_where(|e| e.role == RoleTag::Generator && e.label == "sample-ids");
    let token_bytes_to_g = trace
        .sent_bytes_where(|e| e.role == RoleTag::DiscriminatorRoot && e.label == "token");
    let tensor_bytes_to_g = trace.sent_bytes_where(|e| {
        e.role != RoleTag::Generator && e.label != "token" && e.kind == TraceEventKind::Send
    });
    let pacing = pacing_invariant_check(&trace);
    let denom = (rounds * n as u64).max(1) as f64;
    Scenario1Report {
        rounds,
        n,
        g_opt_steps: g.opt_steps,
        d_opt_steps: d.opt_steps,
        g_idle_fraction: if g_elapsed > 0.0 { g.idle_s / g_elapsed } else { 0.0 },
        d_idle_fraction: if d_elapsed > 0.0 { d.idle_s / d_elapsed } else { 0.0 },
        g_elapsed_s: g_elapsed,
        d_elapsed_s: d_elapsed,
        payload_bytes_to_d,
        token_bytes_to_g,
        tensor_bytes_to_g,
        mean_generator_loss: g.loss_sum / denom,
        mean_rtd_loss: d.rtd_loss_sum / rounds.max(1) as f64,
        mean_clm_loss: d.clm_loss_sum / rounds.max(1) as f64,
        records,
        trace,
        pacing,
        generator: g.model,
        g_opt: g.opt,
        discriminator: d.model,
        d_opt: d.opt,
    }
}

/// Shared secret for in-process simulated runs (a real deployment sets
/// the environment variable instead).
fn sim_secret() -> Vec<u8> {
    SessionCredential::secret_from_env().unwrap_or_else(|| b"nebula-sim-secret".to_vec())
}

/// Runs the full protocol on the simulated link with fresh models.
pub fn run_scenario1_sim(settings: &Scenario1Settings) -> Result<Scenario1Report, ProtocolError> {
    let g_model = ToyModel::new(settings.g_model);
    let g_opt = OptimizerState::new(&g_model, settings.g_hyper);
    let d_model = ToyModel::new(settings.d_model);
    let d_opt = OptimizerState::new(&d_model, settings.d_hyper);
    run_scenario1_sim_from(settings, g_model, g_opt, d_model, d_opt, 0)
}

/// Runs the protocol on the simulated link from existing model/optimizer
/// state, starting the data stream at `first_round` (hot starts resume
/// the seeded stream where the previous run stopped).
pub fn run_scenario1_sim_from(
    settings: &Scenario1Settings,
    g_model: ToyModel,
    g_opt: OptimizerState,
    d_model: ToyModel,
    d_opt: OptimizerState,
    first_round: u64,
) -> Result<Scenario1Report, ProtocolError> {
    let (mut g_end, mut d_end) = sim_pair(settings.link, settings.link_seed);
    let secret = sim_secret();
    let g_cred =
        SessionCredential::from_seed("generator", secret.clone(), settings.link_seed ^ 0xA5);
    let d_cred =
        SessionCredential::from_seed("discriminator-root", secret, settings.link_seed ^ 0x5A);
    let mut guard = ReplayGuard::new();
    handshake_interleaved(&mut g_end, &g_cred, &mut d_end, &d_cred, &mut guard)?;

    let mut g = GeneratorSide::new(g_end, g_model, g_opt, settings.electra, settings.n, settings.t_g);
    let mut d = DiscriminatorSide::new(d_end, d_model, d_opt, settings.electra, settings.n, settings.t_d);

    let last_round = first_round + settings.rounds;
    for round in first_round..last_round {
        g.round_compute_send(round)?;
        // The token this round waits for was emitted by the previous
        // round's discriminator work, so the interleaving is causal.
        g.finish_round(round, first_round)?;
        d.process_round(round)?;
    }
    if settings.rounds > 0 {
        g.consume_token(last_round - 1)?;
    }
    Ok(finish_report(g, d, settings.rounds, settings.n, first_round))
}

/// What the generator process brings home from a two-process run.
pub struct GeneratorArtifacts {
    pub model: ToyModel,
    pub opt: OptimizerState,
    pub trace: ProtocolTrace,
    /// Mean generator loss per round (the loss component this side computes).
    pub round_losses: Vec<f64>,
}

/// What the discriminator process brings home from a two-process run.
pub struct DiscriminatorArtifacts {
    pub model: ToyModel,
    pub opt: OptimizerState,
    pub trace: ProtocolTrace,
    /// Mean (replaced-token-detection, language-model) losses per round.
    pub round_losses: Vec<(f64, f64)>,
}

/// Generator process for the two-process socket mode. The peer must run
/// [`run_scenario1_socket_discriminator`] with identical settings.
pub fn run_scenario1_socket_generator<L: RawLink>(
    endpoint: Endpoint<L>,
    settings: &Scenario1Settings,
) -> Result<GeneratorArtifacts, ProtocolError> {
    let model = ToyModel::new(settings.g_model);
    let opt = OptimizerState::new(&model, settings.g_hyper);
    let mut g = GeneratorSide::new(endpoint, model, opt, settings.electra, settings.n, settings.t_g);
    for round in 0..settings.rounds {
        g.round_compute_send(round)?;
        g.finish_round(round, 0)?;
    }
    if settings.rounds > 0 {
        g.consume_token(settings.rounds - 1)?;
    }
    Ok(GeneratorArtifacts { model: g.model, opt: g.opt, trace: g.trace, round_losses: g.round_losses })
}

/// Discriminator process for the two-process socket mode.
pub fn run_scenario1_socket_discriminator<L: RawLink>(
    endpoint: Endpoint<L>,
    settings: &Scenario1Settings,
) -> Result<DiscriminatorArtifacts, ProtocolError> {
    let model = ToyModel::new(settings.d_model);
    let opt = OptimizerState::new(&model, settings.d_hyper);
    let mut d =
        DiscriminatorSide::new(endpoint, model, opt, settings.electra, settings.n, settings.t_d);
    for round in 0..settings.rounds {
        d.process_round(round)?;
    }
    Ok(DiscriminatorArtifacts { model: d.model, opt: d.opt, trace: d.trace, round_losses: d.round_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toygrad::{ElectraConfig, ElectraTrainer, ModelKind};

    fn tiny_settings(rounds: u64, n: usize, t_g: f64, t_d: f64, jitter: f64) -> Scenario1Settings {
        let g_model = ModelConfig {
            kind: ModelKind::Generator,
            vocab: 12,
            dim: 12,
            layers: 1,
            max_len: 6,
            hidden: 24,
            seed: 100,
        };
        let d_model = ModelConfig { kind: ModelKind::Discriminator, seed: 101, ..g_model };
        Scenario1Settings {
            rounds,
            n,
            t_g,
            t_d,
            link: LinkSpec::wan_170().with_jitter(jitter),
            g_model,
            d_model,
            g_hyper: AdamHyper::new(5e-3, 10, 0),
            d_hyper: AdamHyper::new(5e-3, 10, 0),
            electra: ElectraConfig {
                batch: 4,
                len: 6,
                mask_fraction: 0.25,
                lambda: 50.0,
                gamma: 1.0,
                data_seed: 9,
            },
            link_seed: 77,
        }
    }

    #[test]
    fn token_payloads_roundtrip_and_cost_two_bytes_per_token() {
        let batch = TokenBatch::clean(3, 4, (0..12u16).collect()).unwrap();
        let p = tokens_payload(&batch, 5);
        assert_eq!(p.method_id, method_id::TOKENS);
        assert_eq!(p.data_bytes(), 24);
        assert_eq!(tokens_from_payload(&p).unwrap(), batch.ids);

        let mut broken = p.clone();
        broken.body.pop();
        assert!(tokens_from_payload(&broken).is_err());
    }

    #[test]
    fn single_sub_run_matches_the_monolithic_trainer_bit_for_bit() {
        let settings = tiny_settings(10, 1, 0.01, 0.01, 0.0);
        let report = run_scenario1_sim(&settings).unwrap();

        let mut reference = ElectraTrainer::new(
            settings.g_model,
            settings.d_model,
            settings.g_hyper,
            settings.d_hyper,
            settings.electra,
        );
        for step in 0..10 {
            reference.step(step).unwrap();
        }
        for (a, b) in report.generator.params.iter().zip(&reference.generator.params) {
            assert_eq!(a.value.as_slice(), b.value.as_slice(), "generator {}", a.name);
        }
        for (a, b) in report.discriminator.params.iter().zip(&reference.discriminator.params) {
            assert_eq!(a.value.as_slice(), b.value.as_slice(), "discriminator {}", a.name);
        }
        assert_eq!(report.g_opt_steps, 10);
        assert_eq!(report.d_opt_steps, 10);
    }

    #[test]
    fn pacing_holds_and_no_tensors_flow_back() {
        let settings = tiny_settings(20, 3, 0.01, 0.03, 0.2);
        let report = run_scenario1_sim(&settings).unwrap();
        assert!(report.pacing.pass(), "{:?}", report.pacing);
        assert!(report.pacing.max_divergence <= 1);
        assert_eq!(report.tensor_bytes_to_g, 0);
        assert!(report.payload_bytes_to_d > 0);
        assert!(report.token_bytes_to_g > 0);
        // Tokens are tiny: 4 + 25 + 9 bytes each, one per round.
        assert_eq!(report.token_bytes_to_g, 20 * 38);
    }

    #[test]
    fn calibrated_n_keeps_the_generator_busy() {
        let busy = run_scenario1_sim(&tiny_settings(40, 8, 0.05, 0.4, 0.0)).unwrap();
        let starved = run_scenario1_sim(&tiny_settings(40, 1, 0.05, 0.4, 0.0)).unwrap();
        assert!(
            busy.g_idle_fraction < 0.10,
            "idle at n=8 was {}",
            busy.g_idle_fraction
        );
        assert!(
            starved.g_idle_fraction > 0.80,
            "idle at n=1 was {}",
            starved.g_idle_fraction
        );
    }

    #[test]
    fn traces_are_deterministic() {
        let settings = tiny_settings(12, 2, 0.01, 0.02, 0.2);
        let a = run_scenario1_sim(&settings).unwrap();
        let b = run_scenario1_sim(&settings).unwrap();
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
        let mut other = tiny_settings(12, 2, 0.01, 0.02, 0.2);
        other.link_seed = 78;
        let c = run_scenario1_sim(&other).unwrap();
        assert_ne!(a.trace.to_csv(), c.trace.to_csv());
    }

    #[test]
    fn hot_start_continues_the_data_stream() {
        // 6 rounds straight vs 3 rounds + resume for 3 more.
        let settings = tiny_settings(6, 2, 0.01, 0.02, 0.0);
        let full = run_scenario1_sim(&settings).unwrap();

        let mut head_settings = settings.clone();
        head_settings.rounds = 3;
        let head = run_scenario1_sim(&head_settings).unwrap();
        let mut tail_settings = settings.clone();
        tail_settings.rounds = 3;
        let tail = run_scenario1_sim_from(
            &tail_settings,
            head.generator,
            head.g_opt,
            head.discriminator,
            head.d_opt,
            3,
        )
        .unwrap();
        for (a, b) in tail.generator.params.iter().zip(&full.generator.params) {
            assert_eq!(a.value.as_slice(), b.value.as_slice(), "generator {}", a.name);
        }
        for (a, b) in tail.discriminator.params.iter().zip(&full.discriminator.params) {
            assert_eq!(a.value.as_slice(), b.value.as_slice(), "discriminator {}", a.name);
        }
    }
}
