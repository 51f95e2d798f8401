//! Character-level tokenizer and the Stage-1 Text VAE.

mod model;
pub mod synth;
mod tokenizer;

pub use model::{
    diag_gauss_kl, measure_logsnr_from_moments, EncodeNodes, LogSnrMode, Posterior, Stage1Nodes,
    Stage1Parts, TextVae, VaeConfig, LOGVAR_MAX, LOGVAR_MIN,
};
pub use tokenizer::{
    patch_group, patch_ungroup, PatchedSeq, TokenSeq, Tokenizer, BOS, END, MASK, PAD, UNK,
};
