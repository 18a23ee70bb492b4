//! A deliberately small differentiable training stack: token batches,
//! models with hand-written backprop, replaced-token-detection and
//! sequence-to-sequence losses, Adam, checkpoints, and a finite-difference
//! gradient checker.
//!
//! Everything is seeded and deterministic: same seed, same step, same
//! numbers — which is what makes protocol-level equivalence checks (split
//! vs. monolithic models, resume vs. continuous runs) meaningful.

pub mod adam;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod trainer;

pub use adam::{AdamHyper, OptimizerState};
pub use blocks::{Block, BlockCache};
pub use checkpoint::Checkpoint;
pub use data::{derive_rng, purpose, MarkovChain, TranslationTask};
pub use losses::{
    build_corrupt, combined_loss, decoder_eval_loss, decoder_loss, decoder_masked_accuracy,
    discriminator_joint_loss, encoder_backward, encoder_forward, generator_eval_loss,
    generator_loss, masked_argmax_accuracy, rtd_accuracy, EncoderPass, LossBreakdown,
    DEFAULT_GAMMA, DEFAULT_LAMBDA,
};
pub use model::{BatchShape, CtxView, Grads, ModelConfig, ModelKind, Tape, Tensor, ToyModel};
pub use trainer::{
    seeded_pair, ElectraConfig, ElectraTrainer, Seq2SeqConfig, Seq2SeqTrainer,
    SplitStepArtifacts,
};

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

/// Errors from the training stack.
#[derive(Debug, Error)]
pub enum ToygradError {
    #[error("mask fraction {0} must lie strictly between 0 and 1")]
    BadMaskFraction(f64),
    #[error("masking with fraction {fraction} would cover every position of a length-{len} row")]
    MaskTooLarge { fraction: f64, len: usize },
    #[error("batch has no masked positions")]
    EmptyMask,
    #[error("ids buffer of {ids} entries does not match batch {batch} x len {len}")]
    BadBatchShape { ids: usize, batch: usize, len: usize },
    #[error("token id {id} out of range for vocabulary of {vocab} data tokens")]
    BadTokenId { id: u16, vocab: usize },
    #[error("sequence length {len} exceeds model maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("context of {rows} rows does not match batch {batch} x source len {len}")]
    BadContextShape { rows: usize, batch: usize, len: usize },
    #[error("model has no head named {name:?}")]
    NoSuchHead { name: String },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("non-finite loss value {value}")]
    NonFiniteLoss { value: f64 },
    #[error("checkpoint topology mismatch: file has {file:?}, model is {model:?}")]
    TopologyMismatch { file: String, model: String },
    #[error("corrupt checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Matrix(#[from] crate::MatrixError),
}

/// A batch of token sequences with its ground truth and mask bookkeeping.
///
/// `ids` is what a model sees (possibly masked or corrupted); `originals`
/// is the underlying clean data; `masked` lists the flat positions
/// (`b * len + t`, strictly increasing) that were masked or resampled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<u16>,
    pub originals: Vec<u16>,
    pub masked: Vec<usize>,
}

impl TokenBatch {
    /// Wraps clean data: `ids == originals`, nothing masked.
    pub fn clean(batch: usize, len: usize, ids: Vec<u16>) -> Result<Self, ToygradError> {
        if batch == 0 || len == 0 || ids.len() != batch * len {
            return Err(ToygradError::BadBatchShape { ids: ids.len(), batch, len });
        }
        Ok(Self { batch, len, originals: ids.clone(), ids, masked: Vec::new() })
    }

    pub fn shape(&self) -> BatchShape {
        BatchShape { batch: self.batch, len: self.len }
    }

    /// Per-position "is original" labels: 1.0 where the visible token
    /// matches the ground truth (so an accidental resample of the original
    /// token counts as original), else 0.0.
    pub fn labels(&self) -> Vec<f64> {
        self.ids
            .iter()
            .zip(&self.originals)
            .map(|(a, b)| if a == b { 1.0 } else { 0.0 })
            .collect()
    }

    /// `(position, original id)` pairs for every masked position.
    pub fn masked_targets(&self) -> Vec<(usize, u16)> {
        self.masked.iter().map(|&p| (p, self.originals[p])).collect()
    }
}

/// Replaces `ceil(fraction * len)` positions per row with `mask_id`,
/// choosing positions without replacement from `rng`. The fraction must
/// leave at least one position of every row unmasked.
pub fn mask_batch(
    clean: &TokenBatch,
    fraction: f64,
    mask_id: u16,
    rng: &mut ChaCha20Rng,
) -> Result<TokenBatch, ToygradError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(ToygradError::BadMaskFraction(fraction));
    }
    let per_row = (fraction * clean.len as f64).ceil() as usize;
    if per_row >= clean.len {
        return Err(ToygradError::MaskTooLarge { fraction, len: clean.len });
    }
    debug_assert!(per_row >= 1);
    let mut out = clean.clone();
    let mut masked = Vec::with_capacity(per_row * clean.batch);
    for b in 0..clean.batch {
        // Partial Fisher-Yates over the row's positions.
        let mut slots: Vec<usize> = (0..clean.len).collect();
        for i in 0..per_row {
            let j = rng.gen_range(i..clean.len);
            slots.swap(i, j);
        }
        let mut chosen: Vec<usize> = slots[..per_row].to_vec();
        chosen.sort_unstable();
        for t in chosen {
            let p = b * clean.len + t;
            out.ids[p] = mask_id;
            masked.push(p);
        }
    }
    out.masked = masked;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use data::{derive_rng, purpose};

    fn clean_batch() -> TokenBatch {
        TokenBatch::clean(3, 8, (0..24).map(|i| (i % 7) as u16).collect()).unwrap()
    }

    #[test]
    fn clean_batch_has_no_masks_and_unit_labels() {
        let b = clean_batch();
        assert!(b.masked.is_empty());
        assert!(b.labels().iter().all(|&l| l == 1.0));
        assert_eq!(b.shape().rows(), 24);
    }

    #[test]
    fn mask_batch_masks_the_requested_fraction_per_row() {
        let clean = clean_batch();
        let mut rng = derive_rng(3, 0, purpose::MASK);
        let masked = mask_batch(&clean, 0.25, 9, &mut rng).unwrap();
        // ceil(0.25 * 8) = 2 per row.
        assert_eq!(masked.masked.len(), 6);
        for b in 0..3 {
            let in_row = masked
                .masked
                .iter()
                .filter(|&&p| p / 8 == b)
                .count();
            assert_eq!(in_row, 2);
        }
        for (i, (&id, &orig)) in masked.ids.iter().zip(&masked.originals).enumerate() {
            if masked.masked.contains(&i) {
                assert_eq!(id, 9);
            } else {
                assert_eq!(id, orig);
            }
        }
        // Positions strictly increase and originals are untouched.
        assert!(masked.masked.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(masked.originals, clean.ids);
    }

    #[test]
    fn mask_batch_is_deterministic_per_seed() {
        let clean = clean_batch();
        let a = mask_batch(&clean, 0.3, 9, &mut derive_rng(1, 5, purpose::MASK)).unwrap();
        let b = mask_batch(&clean, 0.3, 9, &mut derive_rng(1, 5, purpose::MASK)).unwrap();
        assert_eq!(a, b);
        let c = mask_batch(&clean, 0.3, 9, &mut derive_rng(1, 6, purpose::MASK)).unwrap();
        assert_ne!(a.masked, c.masked);
    }

    #[test]
    fn mask_batch_rejects_degenerate_fractions() {
        let clean = clean_batch();
        let mut rng = derive_rng(0, 0, purpose::MASK);
        assert!(matches!(
            mask_batch(&clean, 0.0, 9, &mut rng),
            Err(ToygradError::BadMaskFraction(_))
        ));
        assert!(matches!(
            mask_batch(&clean, 1.0, 9, &mut rng),
            Err(ToygradError::BadMaskFraction(_))
        ));
        // 0.95 of 8 positions rounds up to 8: the whole row, rejected.
        assert!(matches!(
            mask_batch(&clean, 0.95, 9, &mut rng),
            Err(ToygradError::MaskTooLarge { .. })
        ));
    }

    #[test]
    fn labels_flag_resampled_positions() {
        let clean = clean_batch();
        let mut corrupt = clean.clone();
        corrupt.ids[5] = (corrupt.originals[5] + 1) % 7;
        corrupt.ids[11] = corrupt.originals[11]; // accidental match stays original
        corrupt.masked = vec![5, 11];
        let labels = corrupt.labels();
        assert_eq!(labels[5], 0.0);
        assert_eq!(labels[11], 1.0);
        assert_eq!(labels.iter().filter(|&&l| l == 0.0).count(), 1);
    }
}
