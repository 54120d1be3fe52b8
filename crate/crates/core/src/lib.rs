//! Transducer training laboratory.
//!
//! The crate is organised bottom-up:
//!
//! * [`loss`] – exact transducer negative log-likelihood over the time × label
//!   lattice, its gradient, the multiple-hypothesis sum and a brute-force
//!   alignment enumerator used as an oracle.
//! * [`model`] – a small recurrent transducer with hand-written backprop, SGD
//!   and a versioned checkpoint format.
//! * [`decoder`] – greedy and prefix-merging beam search.
//! * [`scoring`] – Levenshtein alignment and WER reports.
//! * [`datagen`] – deterministic synthetic corpora with clean / mismatched
//!   conditions and speed perturbation.
//! * [`experiments`] – base training, pseudo-labeling, fine-tuning and
//!   self-training pipelines in single- and multiple-hypothesis modes.

pub mod datagen;
pub mod decoder;
pub mod error;
pub mod experiments;
pub mod loss;
pub mod model;
pub mod rng;
pub mod scoring;

pub use error::{Error, Result};
pub use loss::{
    brute_force_loss, multi_hypothesis_loss, multi_hypothesis_loss_grad, rnnt_loss,
    rnnt_loss_grad, Alignment, FeatureSequence, JointLogits, LossValue, Transcript, BLANK,
};
