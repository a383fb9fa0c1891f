//! In-context counterfactual reasoning: data generation, causal oracles,
//! sequence models trained from scratch, and the analysis toolkit.

pub mod analysis;
pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod models;
pub mod rng;
pub mod scm;
pub mod selftest;
pub mod sde;
pub mod training;

pub use analysis::{EvalCurve, Predictor, ProbeResult};
pub use autodiff::{Tape, Tensor, Var};
pub use datagen::{GenConfig, Generator, PromptRecord, Task, ThetaDist};
pub use error::{Error, Result};
pub use models::{ModelConfig, ModelState, RnnConfig, RnnKind, TransformerConfig, Variant};
pub use scm::{NoiseModelKind, NoiseTag};
pub use sde::{SdeConfig, SdeSource};
pub use training::{Checkpoint, LossTrace, RegressionSource, TrainConfig, Trainer};

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// kernel. Training allocates and frees the same large buffers every step;
/// without this most of that traffic turns into page faults.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
