//! Sign-to-text translation on a synthetic task: contrastive pre-training,
//! adapter fine-tuning over fused cue features, and group-relative policy
//! optimization with a BLEU/ROUGE-L reward.

pub mod alignment;
pub mod fusion;
pub mod grpo;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod runlog;
pub mod tensor;
