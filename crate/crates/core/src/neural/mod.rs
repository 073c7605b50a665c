//! Minimal decoder-only transformer: hand-written forward and backward
//! passes, an adaptive-moment optimizer, top-k sampling and checkpoints.
//! Shared by the converter and the speaker.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod real;
pub mod sample;
pub mod train;

pub use config::{ModelConfig, PosInit};
pub use model::{
    backward, batch_loss, embed, forward, forward_cached, forward_train, head_accuracy, loss_and_grad, nll_loss,
    Example, KvCache, Slot, Trace,
};
pub use optim::{Adam, OptimConfig, StepOutcome};
pub use params::{Params, Tensor};
pub use real::Real;
pub use sample::{sample_top_k, sample_top_k_filtered, Sampled};
pub use train::{train, TrainOpts, TrainReport};

use crate::error::Result;
use crate::tokens::{AcousticSequence, TokenSequence};

/// Input layout of a frame model: the semantic prefix, one separator, then
/// one position per acoustic frame.
pub fn layout_slots(semantic: &TokenSequence, acoustic: Option<&AcousticSequence>, separator: u32) -> Vec<Slot> {
    let mut slots: Vec<Slot> = semantic.tokens.iter().map(|&t| Slot::Token(t)).collect();
    slots.push(Slot::Token(separator));
    if let Some(a) = acoustic {
        slots.extend(a.frames().map(|f| Slot::Frame(f.into())));
    }
    slots
}

/// Embeds a semantic prefix plus optional acoustic frames, `[n, d_model]`
/// row-major.
pub fn embed_sequence<T: Real>(
    semantic: &TokenSequence,
    acoustic: Option<&AcousticSequence>,
    params: &Params<T>,
) -> Result<Vec<T>> {
    let sep = params
        .config
        .semantic_vocab
        .separator()
        .expect("validated config has a separator");
    embed(params, &layout_slots(semantic, acoustic, sep), 0)
}
