//! Single-process training loops. These are the reference implementations
//! the cross-cluster protocols must match: a protocol step that exchanges
//! the same tensors over a link has to produce bit-identical models when
//! the codec is lossless, because both paths call the same loss and
//! optimizer code on the same seeded data.

use super::adam::{AdamHyper, OptimizerState};
use super::data::{derive_rng, purpose, MarkovChain, TranslationTask};
use super::losses::{
    build_corrupt, decoder_eval_loss, decoder_loss, discriminator_joint_loss, encoder_backward,
    encoder_forward, generator_eval_loss, generator_loss, masked_argmax_accuracy, rtd_accuracy,
    LossBreakdown,
};
use super::model::{Grads, ModelConfig, ToyModel};
use super::{mask_batch, TokenBatch, ToygradError};

/// Data/objective settings for replaced-token-detection training.
#[derive(Debug, Clone, Copy)]
pub struct ElectraConfig {
    pub batch: usize,
    pub len: usize,
    pub mask_fraction: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// Seed for the data stream (batches, masks, and corruption sampling).
    pub data_seed: u64,
}

/// Generator + discriminator trained together on one machine.
pub struct ElectraTrainer {
    pub generator: ToyModel,
    pub discriminator: ToyModel,
    pub g_opt: OptimizerState,
    pub d_opt: OptimizerState,
    pub chain: MarkovChain,
    pub cfg: ElectraConfig,
}

impl ElectraTrainer {
    pub fn new(
        g_cfg: ModelConfig,
        d_cfg: ModelConfig,
        g_hyper: AdamHyper,
        d_hyper: AdamHyper,
        cfg: ElectraConfig,
    ) -> Self {
        assert_eq!(g_cfg.vocab, d_cfg.vocab, "models must share a vocabulary");
        let generator = ToyModel::new(g_cfg);
        let discriminator = ToyModel::new(d_cfg);
        let g_opt = OptimizerState::new(&generator, g_hyper);
        let d_opt = OptimizerState::new(&discriminator, d_hyper);
        let chain = MarkovChain::new(g_cfg.vocab, cfg.data_seed);
        Self { generator, discriminator, g_opt, d_opt, chain, cfg }
    }

    /// The masked batch for `step`, reproducible in isolation.
    pub fn masked_batch(&self, step: u64) -> Result<TokenBatch, ToygradError> {
        let ids = self.chain.sample(
            self.cfg.batch,
            self.cfg.len,
            &mut derive_rng(self.cfg.data_seed, step, purpose::BATCH),
        );
        let clean = TokenBatch::clean(self.cfg.batch, self.cfg.len, ids)?;
        mask_batch(
            &clean,
            self.cfg.mask_fraction,
            self.generator.config.mask_id(),
            &mut derive_rng(self.cfg.data_seed, step, purpose::MASK),
        )
    }

    /// One joint step: the generator trains on the masked batch, proposes
    /// replacements from its pre-update distribution, and the
    /// discriminator trains on the corrupted batch.
    pub fn step(&mut self, step: u64) -> Result<LossBreakdown, ToygradError> {
        let masked = self.masked_batch(step)?;
        let gen_out = generator_loss(&self.generator, &masked)?;
        let corrupt = build_corrupt(&self.generator, &masked, self.cfg.data_seed, step)?;
        self.g_opt.step(&mut self.generator, &gen_out.grads)?;
        let disc_out = discriminator_joint_loss(
            &self.discriminator,
            &corrupt,
            self.cfg.lambda,
            self.cfg.gamma,
        )?;
        self.d_opt.step(&mut self.discriminator, &disc_out.grads)?;
        Ok(LossBreakdown {
            generator: gen_out.loss,
            rtd: disc_out.rtd_loss,
            clm: disc_out.clm_loss,
            lambda: self.cfg.lambda,
            gamma: self.cfg.gamma,
        })
    }

    /// Generator cross-entropy on a held-out stream (no updates).
    pub fn eval_generator(&self, eval_step: u64) -> Result<f64, ToygradError> {
        let batch = self.eval_batch(eval_step)?;
        generator_eval_loss(&self.generator, &batch)
    }

    /// Detection accuracy of the discriminator against fresh corruptions
    /// proposed by the current generator (no updates).
    pub fn eval_rtd_accuracy(&self, eval_step: u64) -> Result<f64, ToygradError> {
        let batch = self.eval_batch(eval_step)?;
        let corrupt =
            build_corrupt(&self.generator, &batch, self.cfg.data_seed ^ 0xE7A1, eval_step)?;
        rtd_accuracy(&self.discriminator, &corrupt)
    }

    /// Generator argmax accuracy at masked positions on held-out data.
    pub fn eval_generator_accuracy(&self, eval_step: u64) -> Result<f64, ToygradError> {
        let batch = self.eval_batch(eval_step)?;
        masked_argmax_accuracy(&self.generator, "vocab", &batch)
    }

    fn eval_batch(&self, eval_step: u64) -> Result<TokenBatch, ToygradError> {
        let ids = self.chain.sample(
            self.cfg.batch,
            self.cfg.len,
            &mut derive_rng(self.cfg.data_seed, eval_step, purpose::EVAL),
        );
        let clean = TokenBatch::clean(self.cfg.batch, self.cfg.len, ids)?;
        mask_batch(
            &clean,
            self.cfg.mask_fraction,
            self.generator.config.mask_id(),
            &mut derive_rng(self.cfg.data_seed ^ 0x5EED, eval_step, purpose::MASK),
        )
    }
}

/// Data settings for split encoder/decoder training.
#[derive(Debug, Clone, Copy)]
pub struct Seq2SeqConfig {
    pub batch: usize,
    /// Shared source/target sequence length (the task maps token-for-token).
    pub len: usize,
    pub mask_fraction: f64,
    pub data_seed: u64,
}

/// The `(clean source, masked target)` pair both halves of a split
/// deployment derive independently for `step`. Exposed so a protocol
/// endpoint reproduces exactly the batches the monolithic trainer sees.
pub fn seeded_pair(
    task: &TranslationTask,
    cfg: &Seq2SeqConfig,
    mask_id: u16,
    step: u64,
    batch_purpose: u32,
    mask_seed: u64,
) -> Result<(TokenBatch, TokenBatch), ToygradError> {
    let (src_ids, tgt_ids) = task.sample_pair(
        cfg.batch,
        cfg.len,
        &mut derive_rng(cfg.data_seed, step, batch_purpose),
    );
    let src = TokenBatch::clean(cfg.batch, cfg.len, src_ids)?;
    let tgt_clean = TokenBatch::clean(cfg.batch, cfg.len, tgt_ids)?;
    let tgt = mask_batch(
        &tgt_clean,
        cfg.mask_fraction,
        mask_id,
        &mut derive_rng(mask_seed, step, purpose::MASK),
    )?;
    Ok((src, tgt))
}

/// Frozen-backbone encoder and decoder trained through their adapters on
/// the reversal-translation task.
pub struct Seq2SeqTrainer {
    pub encoder: ToyModel,
    pub decoder: ToyModel,
    pub enc_opt: OptimizerState,
    pub dec_opt: OptimizerState,
    pub task: TranslationTask,
    pub cfg: Seq2SeqConfig,
}

/// The tensors exchanged (in both directions) by one split training step;
/// returned so callers can meter or compress them.
pub struct SplitStepArtifacts {
    pub loss: f64,
    /// Encoder output sent forward.
    pub hidden: crate::Matrix,
    /// Context gradient sent back.
    pub d_ctx: crate::Matrix,
}

impl Seq2SeqTrainer {
    pub fn new(
        enc_cfg: ModelConfig,
        dec_cfg: ModelConfig,
        enc_hyper: AdamHyper,
        dec_hyper: AdamHyper,
        cfg: Seq2SeqConfig,
    ) -> Self {
        assert_eq!(enc_cfg.vocab, dec_cfg.vocab, "models must share a vocabulary");
        let encoder = ToyModel::new(enc_cfg);
        let decoder = ToyModel::new(dec_cfg);
        let enc_opt = OptimizerState::new(&encoder, enc_hyper);
        let dec_opt = OptimizerState::new(&decoder, dec_hyper);
        let task = TranslationTask::new(enc_cfg.vocab, cfg.data_seed);
        Self { encoder, decoder, enc_opt, dec_opt, task, cfg }
    }

    /// The `(clean source, masked target)` pair for `step`.
    pub fn batch_pair(&self, step: u64) -> Result<(TokenBatch, TokenBatch), ToygradError> {
        self.pair_from(step, purpose::BATCH, self.cfg.data_seed)
    }

    fn pair_from(
        &self,
        step: u64,
        batch_purpose: u32,
        mask_seed: u64,
    ) -> Result<(TokenBatch, TokenBatch), ToygradError> {
        seeded_pair(
            &self.task,
            &self.cfg,
            self.decoder.config.mask_id(),
            step,
            batch_purpose,
            mask_seed,
        )
    }

    /// One split step on the step's seeded batch: encoder forward, decoder
    /// loss, gradients back through the context, both optimizers update.
    pub fn step(&mut self, step: u64) -> Result<SplitStepArtifacts, ToygradError> {
        let (src, tgt) = self.batch_pair(step)?;
        self.step_on(&src, &tgt)
    }

    /// The same update from explicit batches (used by the wire protocol,
    /// which must consume identical tensors).
    pub fn step_on(
        &mut self,
        src: &TokenBatch,
        tgt: &TokenBatch,
    ) -> Result<SplitStepArtifacts, ToygradError> {
        let pass = encoder_forward(&self.encoder, src)?;
        let dec_out = decoder_loss(&self.decoder, tgt, &pass.hidden, src.len)?;
        let mut enc_grads = Grads::zeros_for(&self.encoder);
        encoder_backward(&self.encoder, &pass, &dec_out.d_ctx, &mut enc_grads);
        self.dec_opt.step(&mut self.decoder, &dec_out.grads)?;
        self.enc_opt.step(&mut self.encoder, &enc_grads)?;
        Ok(SplitStepArtifacts { loss: dec_out.loss, hidden: pass.hidden, d_ctx: dec_out.d_ctx })
    }

    /// Decoder cross-entropy on a held-out stream (no updates).
    pub fn eval(&self, eval_step: u64) -> Result<f64, ToygradError> {
        let (src, tgt) = self.pair_from(eval_step, purpose::EVAL, self.cfg.data_seed ^ 0x5EED)?;
        let pass = encoder_forward(&self.encoder, &src)?;
        decoder_eval_loss(&self.decoder, &tgt, &pass.hidden, src.len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toygrad::model::ModelKind;

    fn electra() -> ElectraTrainer {
        let g = ModelConfig {
            kind: ModelKind::Generator,
            vocab: 12,
            dim: 12,
            layers: 1,
            max_len: 6,
            hidden: 24,
            seed: 100,
        };
        let d = ModelConfig { kind: ModelKind::Discriminator, seed: 101, ..g };
        ElectraTrainer::new(
            g,
            d,
            AdamHyper::new(5e-3, 10, 0),
            AdamHyper::new(5e-3, 10, 0),
            ElectraConfig {
                batch: 6,
                len: 6,
                mask_fraction: 0.25,
                lambda: 50.0,
                gamma: 1.0,
                data_seed: 9,
            },
        )
    }

    #[test]
    fn electra_steps_are_deterministic() {
        let mut a = electra();
        let mut b = electra();
        for step in 0..5 {
            let la = a.step(step).unwrap();
            let lb = b.step(step).unwrap();
            assert_eq!(la, lb);
        }
        assert_eq!(
            a.generator.params[0].value.as_slice(),
            b.generator.params[0].value.as_slice()
        );
        assert_eq!(
            a.discriminator.params[0].value.as_slice(),
            b.discriminator.params[0].value.as_slice()
        );
    }

    #[test]
    fn seq2seq_steps_are_deterministic_and_artifacts_have_wire_shapes() {
        let enc = ModelConfig {
            kind: ModelKind::Encoder,
            vocab: 10,
            dim: 8,
            layers: 1,
            max_len: 5,
            hidden: 16,
            seed: 200,
        };
        let dec = ModelConfig { kind: ModelKind::Decoder, seed: 201, ..enc };
        let mk = || {
            Seq2SeqTrainer::new(
                enc,
                dec,
                AdamHyper::new(3e-3, 5, 0),
                AdamHyper::new(3e-3, 5, 0),
                Seq2SeqConfig { batch: 4, len: 5, mask_fraction: 0.3, data_seed: 77 },
            )
        };
        let mut a = mk();
        let mut b = mk();
        for step in 0..4 {
            let ra = a.step(step).unwrap();
            let rb = b.step(step).unwrap();
            assert_eq!(ra.loss, rb.loss);
            assert_eq!(ra.hidden.as_slice(), rb.hidden.as_slice());
            assert_eq!(ra.d_ctx.as_slice(), rb.d_ctx.as_slice());
            assert_eq!(ra.hidden.rows(), 20);
            assert_eq!(ra.hidden.cols(), 8);
            assert_eq!(ra.d_ctx.rows(), 20);
        }
    }
}
