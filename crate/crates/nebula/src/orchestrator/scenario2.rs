//! Split encoder/decoder protocol.
//!
//! One model is cut at the encoder output. Per step, the source side runs
//! its half and ships the activations through the forward codec method;
//! the target side decodes them, computes the translation loss, returns
//! the context gradient through the backward method, and both sides apply
//! their optimizer steps. Token ids never cross the link — each side
//! derives its half of the batch from the shared data seed — so the only
//! traffic is the two tensors, which is exactly what the codec schedule
//! compresses.
//!
//! With identity codecs both ways the split is mathematically transparent:
//! the trajectory is bit-identical to the single-process trainer, because
//! the wire carries full-precision values and both paths run the same loss
//! and optimizer code on the same seeded batches.

use crate::codec::{self, CodecSchedule, Direction};
use crate::netsim::{
    handshake_interleaved, sim_pair, Endpoint, FrameBody, LinkSpec, NetError, RawLink,
    ReplayGuard, SessionCredential,
};
use crate::orchestrator::{
    pacing_invariant_check, PacingReport, ProtocolError, ProtocolTrace, RoleTag, TraceEventKind,
};
use crate::toygrad::{
    decoder_loss, decoder_masked_accuracy, decoder_eval_loss, encoder_backward, encoder_forward,
    purpose, seeded_pair, AdamHyper, EncoderPass, Grads, ModelConfig, OptimizerState,
    Seq2SeqConfig, ToyModel, ToygradError, TranslationTask,
};

use super::scenario1::RECV_TIMEOUT_S;

/// Everything a scenario-2 run needs besides transport endpoints.
#[derive(Debug, Clone)]
pub struct Scenario2Settings {
    pub steps: u64,
    pub link: LinkSpec,
    pub enc_model: ModelConfig,
    pub dec_model: ModelConfig,
    pub enc_hyper: AdamHyper,
    pub dec_hyper: AdamHyper,
    pub s2s: Seq2SeqConfig,
    pub schedule: CodecSchedule,
    /// Encoder seconds per step.
    pub t_enc: f64,
    /// Decoder seconds per step.
    pub t_dec: f64,
    /// Seed for link jitter and handshake nonces.
    pub link_seed: u64,
    /// Record the exact wire bytes of every payload (transport-equivalence
    /// checks).
    pub capture_payloads: bool,
    /// Evaluate the held-out loss every this many steps (0 = never).
    pub eval_every: u64,
    /// Held-out batches averaged per evaluation.
    pub eval_batches: u64,
}

impl Scenario2Settings {
    pub fn from_config(cfg: &super::ExperimentConfig) -> Result<Self, ProtocolError> {
        cfg.validate()?;
        Ok(Self {
            steps: cfg.run.steps,
            link: cfg.link_spec()?,
            enc_model: cfg.model_config(crate::toygrad::ModelKind::Encoder, cfg.left_seed()),
            dec_model: cfg.model_config(crate::toygrad::ModelKind::Decoder, cfg.right_seed()),
            enc_hyper: cfg.adam_hyper(),
            dec_hyper: cfg.adam_hyper(),
            s2s: cfg.seq2seq_config(),
            schedule: cfg.schedule()?,
            t_enc: cfg.compute.t_enc,
            t_dec: cfg.compute.t_dec,
            link_seed: cfg.link_seed(),
            capture_payloads: false,
            eval_every: 0,
            eval_batches: 4,
        })
    }
}

/// Source-side state machine: encode, ship activations, apply the
/// returned context gradient.
pub struct EncoderSide<L: RawLink> {
    pub endpoint: Endpoint<L>,
    pub model: ToyModel,
    pub opt: OptimizerState,
    task: TranslationTask,
    cfg: Seq2SeqConfig,
    schedule: CodecSchedule,
    t_enc: f64,
    timeout_s: f64,
    start_time: f64,
    pending: Option<EncoderPass>,
    capture: bool,
    pub captured: Vec<Vec<u8>>,
    pub trace: ProtocolTrace,
    pub idle_s: f64,
    pub opt_steps: u64,
}

impl<L: RawLink> EncoderSide<L> {
    pub fn new(
        endpoint: Endpoint<L>,
        model: ToyModel,
        opt: OptimizerState,
        cfg: Seq2SeqConfig,
        schedule: CodecSchedule,
        t_enc: f64,
        capture: bool,
    ) -> Self {
        let task = TranslationTask::new(model.config.vocab, cfg.data_seed);
        let start_time = endpoint.now();
        Self {
            endpoint,
            model,
            opt,
            task,
            cfg,
            schedule,
            t_enc,
            timeout_s: RECV_TIMEOUT_S,
            start_time,
            pending: None,
            capture,
            captured: Vec::new(),
            trace: ProtocolTrace::default(),
            idle_s: 0.0,
            opt_steps: 0,
        }
    }

    /// Encodes the step's seeded source batch and ships the activations
    /// under the forward method in effect.
    pub fn send_forward(&mut self, step: u64) -> Result<(), ProtocolError> {
        assert!(self.pending.is_none(), "finish_step must run between steps");
        let (src, _tgt) = seeded_pair(
            &self.task,
            &self.cfg,
            self.model.config.mask_id(),
            step,
            purpose::BATCH,
            self.cfg.data_seed,
        )?;
        let pass = encoder_forward(&self.model, &src)?;
        self.endpoint.advance(self.t_enc);
        self.trace.push(
            self.endpoint.now(),
            RoleTag::Encoder,
            TraceEventKind::Compute,
            step,
            0,
            "encode",
        );
        let method = self.schedule.select_method(step, Direction::Forward);
        let payload = codec::encode(&pass.hidden, &method, step)?;
        if self.capture {
            self.captured.push(payload.to_bytes());
        }
        let bytes = self.endpoint.send(FrameBody::Payload(payload))?;
        self.trace.push(
            self.endpoint.now(),
            RoleTag::Encoder,
            TraceEventKind::Send,
            step,
            bytes,
            "activations",
        );
        self.pending = Some(pass);
        Ok(())
    }

    /// Receives the context gradient for `step`, backpropagates it through
    /// the adapters, and applies the optimizer step.
    pub fn finish_step(&mut self, step: u64) -> Result<(), ProtocolError> {
        let t0 = self.endpoint.now();
        let frame = self.endpoint.recv(self.timeout_s).map_err(|e| match e {
            NetError::Timeout { .. } => ProtocolError::Stall {
                role: RoleTag::Decoder,
                what: "context gradient".into(),
                step,
            },
            other => ProtocolError::Net(other),
        })?;
        self.idle_s += self.endpoint.now() - t0;
        let bytes = frame.charged_bytes();
        let payload = match frame.body {
            FrameBody::Payload(p) => p,
            other => {
                return Err(ProtocolError::Protocol(format!(
                    "unexpected {} frame while waiting for the context gradient",
                    other.kind().name()
                )))
            }
        };
        if payload.step != step {
            return Err(ProtocolError::Protocol(format!(
                "context gradient for step {} arrived where step {step} was expected",
                payload.step
            )));
        }
        self.trace.push(
            self.endpoint.now(),
            RoleTag::Encoder,
            TraceEventKind::Recv,
            step,
            bytes,
            "context-grad",
        );
        let d_ctx = codec::decode(&payload)?;
        let pass = self.pending.take().expect("send_forward must run before finish_step");
        if (d_ctx.rows(), d_ctx.cols()) != (pass.hidden.rows(), pass.hidden.cols()) {
            return Err(ProtocolError::Protocol(format!(
                "returned gradient is {}x{} but the sent activations were {}x{}",
                d_ctx.rows(),
                d_ctx.cols(),
                pass.hidden.rows(),
                pass.hidden.cols()
            )));
        }
        let mut grads = Grads::zeros_for(&self.model);
        encoder_backward(&self.model, &pass, &d_ctx, &mut grads);
        self.opt.step(&mut self.model, &grads)?;
        self.opt_steps += 1;
        self.trace.push(
            self.endpoint.now(),
            RoleTag::Encoder,
            TraceEventKind::OptStep,
            self.opt_steps,
            0,
            "adam",
        );
        Ok(())
    }

    pub fn elapsed_s(&self) -> f64 {
        self.endpoint.now() - self.start_time
    }
}

/// Per-step measurements surfaced by the decoder side.
#[derive(Debug, Clone, Copy)]
pub struct DecoderStepOutcome {
    pub loss: f64,
    pub fwd_bytes: u64,
    pub bwd_bytes: u64,
    pub fwd_measured_ratio: f64,
    pub bwd_measured_ratio: f64,
}

/// Target-side state machine: decode activations, train the decoder,
/// return the context gradient.
pub struct DecoderSide<L: RawLink> {
    pub endpoint: Endpoint<L>,
    pub model: ToyModel,
    pub opt: OptimizerState,
    task: TranslationTask,
    cfg: Seq2SeqConfig,
    schedule: CodecSchedule,
    t_dec: f64,
    timeout_s: f64,
    start_time: f64,
    capture: bool,
    pub captured: Vec<Vec<u8>>,
    pub trace: ProtocolTrace,
    pub idle_s: f64,
    pub opt_steps: u64,
}

impl<L: RawLink> DecoderSide<L> {
    pub fn new(
        endpoint: Endpoint<L>,
        model: ToyModel,
        opt: OptimizerState,
        cfg: Seq2SeqConfig,
        schedule: CodecSchedule,
        t_dec: f64,
        capture: bool,
    ) -> Self {
        let task = TranslationTask::new(model.config.vocab, cfg.data_seed);
        let start_time = endpoint.now();
        Self {
            endpoint,
            model,
            opt,
            task,
            cfg,
            schedule,
            t_dec,
            timeout_s: RECV_TIMEOUT_S,
            start_time,
            capture,
            captured: Vec::new(),
            trace: ProtocolTrace::default(),
            idle_s: 0.0,
            opt_steps: 0,
        }
    }

    /// Receives the step's activations, trains on them, and sends back the
    /// context gradient under the backward method in effect.
    pub fn process_step(&mut self, step: u64) -> Result<DecoderStepOutcome, ProtocolError> {
        let t0 = self.endpoint.now();
        let frame = self.endpoint.recv(self.timeout_s).map_err(|e| match e {
            NetError::Timeout { .. } => ProtocolError::Stall {
                role: RoleTag::Encoder,
                what: "encoder activations".into(),
                step,
            },
            other => ProtocolError::Net(other),
        })?;
        self.idle_s += self.endpoint.now() - t0;
        let fwd_bytes = frame.charged_bytes();
        let payload = match frame.body {
            FrameBody::Payload(p) => p,
            other => {
                return Err(ProtocolError::Protocol(format!(
                    "unexpected {} frame while waiting for encoder activations",
                    other.kind().name()
                )))
            }
        };
        if payload.step != step {
            return Err(ProtocolError::Protocol(format!(
                "activations for step {} arrived where step {step} was expected",
                payload.step
            )));
        }
        self.trace.push(
            self.endpoint.now(),
            RoleTag::Decoder,
            TraceEventKind::Recv,
            step,
            fwd_bytes,
            "activations",
        );
        let fwd_measured_ratio = payload.measured_ratio();
        let ctx = codec::decode(&payload)?;
        let (_src, tgt) = seeded_pair(
            &self.task,
            &self.cfg,
            self.model.config.mask_id(),
            step,
            purpose::BATCH,
            self.cfg.data_seed,
        )?;
        let out = decoder_loss(&self.model, &tgt, &ctx, self.cfg.len).map_err(|e| match e {
            ToygradError::BadContextShape { rows, batch, len } => ProtocolError::Protocol(format!(
                "received activations of {rows} rows do not match batch {batch} x source len {len}"
            )),
            other => ProtocolError::Train(other),
        })?;
        self.endpoint.advance(self.t_dec);
        self.trace.push(
            self.endpoint.now(),
            RoleTag::Decoder,
            TraceEventKind::Compute,
            step,
            0,
            "decode",
        );
        let method = self.schedule.select_method(step, Direction::Backward);
        let bwd_payload = codec::encode(&out.d_ctx, &method, step)?;
        let bwd_measured_ratio = bwd_payload.measured_ratio();
        if self.capture {
            self.captured.push(bwd_payload.to_bytes());
        }
        let bwd_bytes = self.endpoint.send(FrameBody::Payload(bwd_payload))?;
        self.trace.push(
            self.endpoint.now(),
            RoleTag::Decoder,
            TraceEventKind::Send,
            step,
            bwd_bytes,
            "context-grad",
        );
        self.opt.step(&mut self.model, &out.grads)?;
        self.opt_steps += 1;
        self.trace.push(
            self.endpoint.now(),
            RoleTag::Decoder,
            TraceEventKind::OptStep,
            self.opt_steps,
            0,
            "adam",
        );
        Ok(DecoderStepOutcome {
            loss: out.loss,
            fwd_bytes,
            bwd_bytes,
            fwd_measured_ratio,
            bwd_measured_ratio,
        })
    }

    pub fn elapsed_s(&self) -> f64 {
        self.endpoint.now() - self.start_time
    }
}

/// Held-out translation loss of a split model, averaged over `batches`
/// evaluation batches. Matches the monolithic trainer's evaluation stream
/// exactly, so monolithic and split curves are directly comparable.
pub fn split_eval_loss(
    enc: &ToyModel,
    dec: &ToyModel,
    task: &TranslationTask,
    cfg: &Seq2SeqConfig,
    batches: u64,
) -> Result<f64, ToygradError> {
    assert!(batches > 0, "need at least one evaluation batch");
    let mut sum = 0.0;
    for e in 0..batches {
        let (src, tgt) = seeded_pair(
            task,
            cfg,
            dec.config.mask_id(),
            e,
            purpose::EVAL,
            cfg.data_seed ^ 0x5EED,
        )?;
        let pass = encoder_forward(enc, &src)?;
        sum += decoder_eval_loss(dec, &tgt, &pass.hidden, src.len)?;
    }
    Ok(sum / batches as f64)
}

/// Held-out masked-token accuracy of a split model (same stream as
/// [`split_eval_loss`]).
pub fn split_eval_accuracy(
    enc: &ToyModel,
    dec: &ToyModel,
    task: &TranslationTask,
    cfg: &Seq2SeqConfig,
    batches: u64,
) -> Result<f64, ToygradError> {
    assert!(batches > 0, "need at least one evaluation batch");
    let mut sum = 0.0;
    for e in 0..batches {
        let (src, tgt) = seeded_pair(
            task,
            cfg,
            dec.config.mask_id(),
            e,
            purpose::EVAL,
            cfg.data_seed ^ 0x5EED,
        )?;
        let pass = encoder_forward(enc, &src)?;
        sum += decoder_masked_accuracy(dec, &tgt, &pass.hidden, src.len)?;
    }
    Ok(sum / batches as f64)
}

/// One row of a run's per-step record.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: u64,
    pub train_loss: f64,
    /// Held-out loss, when evaluation ran at this step.
    pub eval_loss: Option<f64>,
    pub fwd_bytes: u64,
    pub bwd_bytes: u64,
    pub fwd_measured_ratio: f64,
    pub bwd_measured_ratio: f64,
    pub step_time_s: f64,
}

/// Outcome of a scenario-2 run.
#[derive(Debug)]
pub struct Scenario2Report {
    pub first_step: u64,
    pub steps: u64,
    pub records: Vec<StepRecord>,
    pub fwd_bytes_total: u64,
    pub bwd_bytes_total: u64,
    pub enc_elapsed_s: f64,
    pub dec_elapsed_s: f64,
    pub enc_idle_fraction: f64,
    pub dec_idle_fraction: f64,
    pub trace: ProtocolTrace,
    pub pacing: PacingReport,
    pub encoder: ToyModel,
    pub enc_opt: OptimizerState,
    pub decoder: ToyModel,
    pub dec_opt: OptimizerState,
    pub captured_forward: Vec<Vec<u8>>,
    pub captured_backward: Vec<Vec<u8>>,
}

impl Scenario2Report {
    /// Simulated wall time of the run (both sides end on the same event,
    /// so this is the larger of the two clocks).
    pub fn total_sim_time_s(&self) -> f64 {
        self.enc_elapsed_s.max(self.dec_elapsed_s)
    }

    pub fn first_loss(&self) -> f64 {
        self.records.first().map(|r| r.train_loss).unwrap_or(f64::NAN)
    }

    pub fn last_loss(&self) -> f64 {
        self.records.last().map(|r| r.train_loss).unwrap_or(f64::NAN)
    }
}

fn sim_secret() -> Vec<u8> {
    SessionCredential::secret_from_env().unwrap_or_else(|| b"nebula-sim-secret".to_vec())
}

/// Runs the split protocol on the simulated link with fresh models.
pub fn run_scenario2_sim(settings: &Scenario2Settings) -> Result<Scenario2Report, ProtocolError> {
    let enc = ToyModel::new(settings.enc_model);
    let enc_opt = OptimizerState::new(&enc, settings.enc_hyper);
    let dec = ToyModel::new(settings.dec_model);
    let dec_opt = OptimizerState::new(&dec, settings.dec_hyper);
    run_scenario2_sim_from(settings, enc, enc_opt, dec, dec_opt, 0)
}

/// Runs the split protocol on the simulated link from existing state,
/// starting the data stream (and the codec schedule's step counter) at
/// `first_step`.
pub fn run_scenario2_sim_from(
    settings: &Scenario2Settings,
    enc: ToyModel,
    enc_opt: OptimizerState,
    dec: ToyModel,
    dec_opt: OptimizerState,
    first_step: u64,
) -> Result<Scenario2Report, ProtocolError> {
    let (mut s_end, mut t_end) = sim_pair(settings.link, settings.link_seed);
    let secret = sim_secret();
    let s_cred = SessionCredential::from_seed("encoder", secret.clone(), settings.link_seed ^ 0xA5);
    let t_cred = SessionCredential::from_seed("decoder", secret, settings.link_seed ^ 0x5A);
    let mut guard = ReplayGuard::new();
    handshake_interleaved(&mut s_end, &s_cred, &mut t_end, &t_cred, &mut guard)?;

    let mut s = EncoderSide::new(
        s_end,
        enc,
        enc_opt,
        settings.s2s,
        settings.schedule.clone(),
        settings.t_enc,
        settings.capture_payloads,
    );
    let mut t = DecoderSide::new(
        t_end,
        dec,
        dec_opt,
        settings.s2s,
        settings.schedule.clone(),
        settings.t_dec,
        settings.capture_payloads,
    );

    let mut records = Vec::with_capacity(settings.steps as usize);
    let mut fwd_total = 0u64;
    let mut bwd_total = 0u64;
    for i in 0..settings.steps {
        let step = first_step + i;
        let t_start = s.endpoint.now();
        s.send_forward(step)?;
        let outcome = t.process_step(step)?;
        s.finish_step(step)?;
        let step_time = s.endpoint.now() - t_start;
        if s.opt_steps != t.opt_steps {
            return Err(ProtocolError::Pacing(format!(
                "sides applied {} and {} optimizer steps after step {step}",
                s.opt_steps, t.opt_steps
            )));
        }
        fwd_total += outcome.fwd_bytes;
        bwd_total += outcome.bwd_bytes;
        let eval_loss = if settings.eval_every > 0
            && (i % settings.eval_every == 0 || i + 1 == settings.steps)
        {
            Some(split_eval_loss(&s.model, &t.model, &t.task, &t.cfg, settings.eval_batches)?)
        } else {
            None
        };
        records.push(StepRecord {
            step,
            train_loss: outcome.loss,
            eval_loss,
            fwd_bytes: outcome.fwd_bytes,
            bwd_bytes: outcome.bwd_bytes,
            fwd_measured_ratio: outcome.fwd_measured_ratio,
            bwd_measured_ratio: outcome.bwd_measured_ratio,
            step_time_s: step_time,
        });
    }

    let enc_elapsed = s.elapsed_s();
    let dec_elapsed = t.elapsed_s();
    let mut trace = ProtocolTrace::default();
    trace.events.extend(s.trace.events);
    trace.events.extend(t.trace.events);
    trace.sort_by_time();
    let pacing = pacing_invariant_check(&trace);
    Ok(Scenario2Report {
        first_step,
        steps: settings.steps,
        records,
        fwd_bytes_total: fwd_total,
        bwd_bytes_total: bwd_total,
        enc_elapsed_s: enc_elapsed,
        dec_elapsed_s: dec_elapsed,
        enc_idle_fraction: if enc_elapsed > 0.0 { s.idle_s / enc_elapsed } else { 0.0 },
        dec_idle_fraction: if dec_elapsed > 0.0 { t.idle_s / dec_elapsed } else { 0.0 },
        trace,
        pacing,
        encoder: s.model,
        enc_opt: s.opt,
        decoder: t.model,
        dec_opt: t.opt,
        captured_forward: s.captured,
        captured_backward: t.captured,
    })
}

/// What the encoder process brings home from a two-process run.
pub struct EncoderArtifacts {
    pub model: ToyModel,
    pub opt: OptimizerState,
    /// Serialized payloads as sent, when capture was requested.
    pub captured: Vec<Vec<u8>>,
    pub trace: ProtocolTrace,
}

/// What the decoder process brings home from a two-process run.
pub struct DecoderArtifacts {
    pub model: ToyModel,
    pub opt: OptimizerState,
    /// Serialized payloads as sent, when capture was requested.
    pub captured: Vec<Vec<u8>>,
    pub trace: ProtocolTrace,
    /// Training loss per step (computed on this side).
    pub step_losses: Vec<f64>,
}

/// Encoder process for the two-process socket mode. The endpoint must
/// already carry an established session; the peer runs
/// [`run_scenario2_socket_decoder`] with identical settings.
pub fn run_scenario2_socket_encoder<L: RawLink>(
    endpoint: Endpoint<L>,
    settings: &Scenario2Settings,
) -> Result<EncoderArtifacts, ProtocolError> {
    let model = ToyModel::new(settings.enc_model);
    let opt = OptimizerState::new(&model, settings.enc_hyper);
    let mut s = EncoderSide::new(
        endpoint,
        model,
        opt,
        settings.s2s,
        settings.schedule.clone(),
        settings.t_enc,
        settings.capture_payloads,
    );
    for step in 0..settings.steps {
        s.send_forward(step)?;
        s.finish_step(step)?;
    }
    Ok(EncoderArtifacts { model: s.model, opt: s.opt, captured: s.captured, trace: s.trace })
}

/// Decoder process for the two-process socket mode.
pub fn run_scenario2_socket_decoder<L: RawLink>(
    endpoint: Endpoint<L>,
    settings: &Scenario2Settings,
) -> Result<DecoderArtifacts, ProtocolError> {
    let model = ToyModel::new(settings.dec_model);
    let opt = OptimizerState::new(&model, settings.dec_hyper);
    let mut t = DecoderSide::new(
        endpoint,
        model,
        opt,
        settings.s2s,
        settings.schedule.clone(),
        settings.t_dec,
        settings.capture_payloads,
    );
    let mut step_losses = Vec::with_capacity(settings.steps as usize);
    for step in 0..settings.steps {
        step_losses.push(t.process_step(step)?.loss);
    }
    Ok(DecoderArtifacts {
        model: t.model,
        opt: t.opt,
        captured: t.captured,
        trace: t.trace,
        step_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecMethod;
    use crate::toygrad::{ModelKind, Seq2SeqTrainer};

    fn tiny_settings(steps: u64, schedule: CodecSchedule) -> Scenario2Settings {
        let enc_model = ModelConfig {
            kind: ModelKind::Encoder,
            vocab: 10,
            dim: 8,
            layers: 1,
            max_len: 5,
            hidden: 16,
            seed: 300,
        };
        let dec_model = ModelConfig { kind: ModelKind::Decoder, seed: 301, ..enc_model };
        Scenario2Settings {
            steps,
            link: LinkSpec::wan_60(),
            enc_model,
            dec_model,
            enc_hyper: AdamHyper::new(3e-3, 5, 0),
            dec_hyper: AdamHyper::new(3e-3, 5, 0),
            s2s: Seq2SeqConfig { batch: 4, len: 5, mask_fraction: 0.3, data_seed: 55 },
            schedule,
            t_enc: 2e-4,
            t_dec: 2e-4,
            link_seed: 99,
            capture_payloads: false,
            eval_every: 0,
            eval_batches: 2,
        }
    }

    #[test]
    fn identity_split_matches_the_monolithic_trainer_bit_for_bit() {
        let settings = tiny_settings(8, CodecSchedule::baseline());
        let report = run_scenario2_sim(&settings).unwrap();

        let mut reference = Seq2SeqTrainer::new(
            settings.enc_model,
            settings.dec_model,
            settings.enc_hyper,
            settings.dec_hyper,
            settings.s2s,
        );
        for step in 0..8 {
            let arts = reference.step(step).unwrap();
            assert_eq!(arts.loss, report.records[step as usize].train_loss);
        }
        for (a, b) in report.encoder.params.iter().zip(&reference.encoder.params) {
            assert_eq!(a.value.as_slice(), b.value.as_slice(), "encoder {}", a.name);
        }
        for (a, b) in report.decoder.params.iter().zip(&reference.decoder.params) {
            assert_eq!(a.value.as_slice(), b.value.as_slice(), "decoder {}", a.name);
        }
    }

    #[test]
    fn step_time_is_exactly_the_clock_sum() {
        let settings = tiny_settings(5, CodecSchedule::baseline());
        let report = run_scenario2_sim(&settings).unwrap();
        // Identity payload: (batch*len) x dim activations charged at the
        // 32-bit convention inside a frame envelope.
        let act_elems = 4 * 5 * 8;
        let payload_bytes = 4 + 25 + 38 + 4 * act_elems as u64;
        let transfer = settings.link.transfer_time(payload_bytes, 0.0);
        let want = settings.t_enc + settings.t_dec + 2.0 * transfer;
        for r in &report.records {
            assert!(
                (r.step_time_s - want).abs() < 1e-12,
                "step {} took {} expected {want}",
                r.step,
                r.step_time_s
            );
            assert_eq!(r.fwd_bytes, payload_bytes);
            assert_eq!(r.bwd_bytes, payload_bytes);
        }
        assert!(report.pacing.pass(), "{:?}", report.pacing);
    }

    #[test]
    fn compressed_methods_shrink_the_wire_and_still_train() {
        let sched =
            CodecSchedule::new(CodecMethod::fp16_svd(0.5), CodecMethod::Int8, 0);
        let settings = tiny_settings(6, sched);
        let report = run_scenario2_sim(&settings).unwrap();
        let baseline = run_scenario2_sim(&tiny_settings(6, CodecSchedule::baseline())).unwrap();
        assert!(report.fwd_bytes_total < baseline.fwd_bytes_total);
        assert!(report.bwd_bytes_total < baseline.bwd_bytes_total);
        for r in &report.records {
            assert!(r.train_loss.is_finite());
            assert!((r.bwd_measured_ratio - 0.25).abs() < 1e-12);
            assert!(r.fwd_measured_ratio < 0.5);
        }
        assert!(report.total_sim_time_s() < baseline.total_sim_time_s());
    }

    #[test]
    fn start_step_delays_compression() {
        let sched = CodecSchedule::new(CodecMethod::Fp16, CodecMethod::Fp16, 3);
        let settings = tiny_settings(6, sched);
        let report = run_scenario2_sim(&settings).unwrap();
        for r in &report.records[..3] {
            assert_eq!(r.fwd_measured_ratio, 1.0);
        }
        for r in &report.records[3..] {
            assert_eq!(r.fwd_measured_ratio, 0.5);
        }
    }

    #[test]
    fn resume_from_state_matches_a_straight_run() {
        let settings = tiny_settings(6, CodecSchedule::baseline());
        let full = run_scenario2_sim(&settings).unwrap();

        let mut head_settings = settings.clone();
        head_settings.steps = 4;
        let head = run_scenario2_sim(&head_settings).unwrap();
        let mut tail_settings = settings.clone();
        tail_settings.steps = 2;
        let tail = run_scenario2_sim_from(
            &tail_settings,
            head.encoder,
            head.enc_opt,
            head.decoder,
            head.dec_opt,
            4,
        )
        .unwrap();
        for (a, b) in tail.encoder.params.iter().zip(&full.encoder.params) {
            assert_eq!(a.value.as_slice(), b.value.as_slice(), "encoder {}", a.name);
        }
        for (a, b) in tail.decoder.params.iter().zip(&full.decoder.params) {
            assert_eq!(a.value.as_slice(), b.value.as_slice(), "decoder {}", a.name);
        }
    }

    #[test]
    fn mismatched_halves_fail_with_a_shape_diagnosis() {
        let mut settings = tiny_settings(1, CodecSchedule::baseline());
        settings.enc_model.dim = 6; // decoder still expects 8
        let err = run_scenario2_sim(&settings).unwrap_err();
        match err {
            ProtocolError::Protocol(msg) => {
                assert!(msg.contains("activations"), "{msg}")
            }
            other => panic!("expected a protocol failure, got {other}"),
        }
    }

    #[test]
    fn eval_hook_records_held_out_loss() {
        let mut settings = tiny_settings(5, CodecSchedule::baseline());
        settings.eval_every = 2;
        let report = run_scenario2_sim(&settings).unwrap();
        let evals: Vec<bool> = report.records.iter().map(|r| r.eval_loss.is_some()).collect();
        assert_eq!(evals, vec![true, false, true, false, true]);
    }
}
