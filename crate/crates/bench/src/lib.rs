//! Benchmarks live in `benches/`; run them with `cargo bench -p iccr-bench`.

use iccr_core::{GenConfig, ModelConfig, TransformerConfig};

/// The 2-layer, 2-head, width-32 transformer used in the scaled checks.
pub fn small_transformer(n_max: usize) -> ModelConfig {
    ModelConfig::Transformer(TransformerConfig {
        layers: 2,
        heads: 2,
        hidden: 32,
        embed_dim: 1,
        max_len: 2 * n_max + 2,
        ..TransformerConfig::default()
    })
}

pub fn small_gen(n_max: usize) -> GenConfig {
    GenConfig {
        n_min: 5,
        n_max,
        fixed_z: Some(5),
        seed: 1,
        ..GenConfig::default()
    }
}
