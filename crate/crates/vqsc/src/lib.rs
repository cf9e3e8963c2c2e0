//! Desk-scale testbed for codebook-based image transmission over noisy
//! channels.
//!
//! The pipeline: a convolutional encoder maps an image to an m x n grid of
//! q-dimensional feature vectors; a shared learned codebook quantizes each
//! vector to an index; the receiver either re-quantizes a noise-corrupted
//! feature map directly or runs a transformer that predicts the original
//! codebook indices from the corrupted map; a convolutional decoder
//! reconstructs the image from the retrieved code vectors. Training happens
//! in two stages (codec+codebook jointly, then the transformer with the rest
//! frozen), and an SNR-sweep harness compares the modes against index
//! transmission over a binary channel and a learned joint source-channel
//! coding baseline.

pub mod channel;
pub mod codebook;
pub mod codec;
pub mod dataset;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod perceptual;
pub mod v2it;

mod error;
pub use error::VqscError;

/// Splitmix-style seed derivation so independent random streams never share
/// state. Every consumer mixes the base seed with a stream tag and optional
/// per-item ids.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut acc = mix(base ^ GOLDEN);
    for &p in parts {
        acc = mix(acc ^ p.wrapping_mul(GOLDEN));
    }
    acc
}

/// Stream tags for [`derive_seed`].
pub mod streams {
    pub const INIT_ENCODER: u64 = 1;
    pub const INIT_DECODER: u64 = 2;
    pub const INIT_CODEBOOK: u64 = 3;
    pub const INIT_DISCRIMINATOR: u64 = 4;
    pub const INIT_V2IT: u64 = 5;
    pub const INIT_JSCC: u64 = 6;
    pub const BATCH: u64 = 7;
    pub const NOISE: u64 = 8;
    pub const SWEEP: u64 = 9;
    pub const DATA_IMAGE: u64 = 10;
}
