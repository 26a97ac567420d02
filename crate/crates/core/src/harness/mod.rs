//! Episodes, configuration, orchestration, evaluation and plots.

mod config;
mod episode;
mod eval;
mod pipeline;
pub mod plot;
mod synth;

pub use config::{Refinement, RunConfig};
pub use episode::{
    list_episodes, load_episode, read_mask, read_rgb, read_soft_map, save_episode, write_mask, write_rgb,
    write_soft_map, Episode, Query, Shot, SoftMapRange,
};
pub use eval::{evaluate, load_dataset, EvalReport, Predictor};
pub use pipeline::{
    analyze_episode, backbone_for, quick_infer, EmbeddingComparison, run_episode, EpisodeResult, FittedTask, PreparedImage, QueryPrediction, TaskSession,
    BACKBONE_SEED,
};
pub use synth::{synthesize_episode, synthesize_suite, SynthSpec};

use crate::grid::RgbImage;

/// Mixes two seeds (splitmix64 finalizer).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the pixel values, so identical images get identical views.
pub fn content_seed(image: &RgbImage) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    feed(&(image.width() as u64).to_le_bytes());
    feed(&(image.height() as u64).to_le_bytes());
    for p in image.as_slice() {
        for c in p {
            feed(&c.to_bits().to_le_bytes());
        }
    }
    h
}
