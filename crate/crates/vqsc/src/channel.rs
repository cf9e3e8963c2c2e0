//! Channel models: AWGN on feature maps with per-transmission empirical
//! power normalization, and a hard-decision binary channel for transmitted
//! codebook indices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqsc_tensor::Tensor;

use crate::codebook::IndexGrid;
use crate::codec::FeatureMap;
use crate::nn::randn;
use crate::VqscError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelKind {
    AwgnFeature,
    BitIndex,
    Noiseless,
}

impl ChannelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChannelKind::AwgnFeature => "awgn-feature",
            ChannelKind::BitIndex => "bit-index",
            ChannelKind::Noiseless => "noiseless",
        }
    }
}

impl std::str::FromStr for ChannelKind {
    type Err = VqscError;
    fn from_str(s: &str) -> Result<Self, VqscError> {
        match s {
            "awgn-feature" => Ok(ChannelKind::AwgnFeature),
            "bit-index" => Ok(ChannelKind::BitIndex),
            "noiseless" => Ok(ChannelKind::Noiseless),
            other => Err(VqscError::Config(format!(
                "unknown channel kind \"{other}\" (awgn-feature | bit-index | noiseless)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn noiseless() -> Self {
        ChannelConfig {
            kind: ChannelKind::Noiseless,
            snr_db: 0.0,
            seed: 0,
        }
    }

    pub fn awgn(snr_db: f64, seed: u64) -> Self {
        ChannelConfig {
            kind: ChannelKind::AwgnFeature,
            snr_db,
            seed,
        }
    }

    pub fn bit_index(snr_db: f64, seed: u64) -> Self {
        ChannelConfig {
            kind: ChannelKind::BitIndex,
            snr_db,
            seed,
        }
    }
}

/// Noise std for a transmission: sigma^2 = mean(z^2) * 10^(-snr_db/10).
/// The signal power is measured empirically per transmission.
pub fn snr_to_sigma(z: &FeatureMap, snr_db: f64) -> Result<f64, VqscError> {
    let data = z.tensor().data();
    if !z.tensor().is_finite() {
        return Err(VqscError::Channel("non-finite feature map".into()));
    }
    let power = data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64;
    if power == 0.0 {
        return Err(VqscError::Channel(
            "all-zero feature map has undefined SNR".into(),
        ));
    }
    Ok((power * 10f64.powf(-snr_db / 10.0)).sqrt())
}

/// Additive white Gaussian noise on a feature map; noiseless passes the map
/// through bit-exactly. Deterministic given `cfg.seed`.
pub fn awgn_transmit(z: &FeatureMap, cfg: &ChannelConfig) -> Result<FeatureMap, VqscError> {
    match cfg.kind {
        ChannelKind::Noiseless => Ok(z.clone()),
        ChannelKind::BitIndex => Err(VqscError::Channel(
            "awgn_transmit requires an awgn-feature (or noiseless) channel".into(),
        )),
        ChannelKind::AwgnFeature => {
            let sigma = snr_to_sigma(z, cfg.snr_db)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let shape = z.tensor().shape().to_vec();
            let data: Vec<f64> = z
                .tensor()
                .data()
                .iter()
                .map(|v| v + sigma * randn(&mut rng))
                .collect();
            FeatureMap::new(Tensor::new(shape, data).expect("consistent dims"))
        }
    }
}

/// Gaussian tail Q(x) via the Abramowitz-Stegun 7.1.26 erfc approximation
/// (absolute error below 1.5e-7), valid for x >= 0.
fn q_function(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    0.5 * erfc_as(x / std::f64::consts::SQRT_2)
}

fn erfc_as(x: f64) -> f64 {
    const A: [f64; 5] = [
        0.254829592,
        -0.284496736,
        1.421413741,
        -1.453152027,
        1.061405429,
    ];
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t * (A[0] + t * (A[1] + t * (A[2] + t * (A[3] + t * A[4]))));
    poly * (-x * x).exp()
}

/// Hard-decision BPSK bit error probability: p = Q(sqrt(2 * 10^(snr/10))).
pub fn bit_error_prob(snr_db: f64) -> f64 {
    let snr_linear = 10f64.powf(snr_db / 10.0);
    q_function((2.0 * snr_linear).sqrt())
}

/// Serialize each index as log2(L) bits, flip each bit independently with
/// the given probability, reinterpret. Bits are consumed LSB-first in
/// row-major grid order.
pub fn corrupt_indices(
    s: &IndexGrid,
    codebook_size: usize,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<IndexGrid, VqscError> {
    if !codebook_size.is_power_of_two() {
        return Err(VqscError::Channel(format!(
            "index channel requires a power-of-two codebook, got L={codebook_size}"
        )));
    }
    let bits = codebook_size.trailing_zeros();
    let (m, n) = s.grid();
    let mut out = Vec::with_capacity(m * n);
    for &k in s.indices() {
        if k >= codebook_size {
            return Err(VqscError::IndexOutOfRange {
                index: k,
                size: codebook_size,
            });
        }
        let mut v = k;
        for b in 0..bits {
            if rng.gen::<f64>() < p {
                v ^= 1 << b;
            }
        }
        out.push(v);
    }
    IndexGrid::new(m, n, out)
}

/// Transmit an index grid over the binary channel at `cfg.snr_db`;
/// noiseless passes indices through unchanged.
pub fn index_bit_channel(
    s: &IndexGrid,
    codebook_size: usize,
    cfg: &ChannelConfig,
) -> Result<IndexGrid, VqscError> {
    match cfg.kind {
        ChannelKind::Noiseless => Ok(s.clone()),
        ChannelKind::AwgnFeature => Err(VqscError::Channel(
            "index_bit_channel requires a bit-index (or noiseless) channel".into(),
        )),
        ChannelKind::BitIndex => {
            let p = bit_error_prob(cfg.snr_db);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            corrupt_indices(s, codebook_size, p, &mut rng)
        }
    }
}
