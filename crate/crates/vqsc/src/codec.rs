//! Convolutional encoder/decoder pair: image -> m x n x q feature map and
//! back. Architecture: stem conv, then per scale `blocks_per_scale` conv-
//! norm-activation blocks followed by a stride-2 downsample, log2(f) scales,
//! and a 1x1 head to q channels; the decoder mirrors it with transposed
//! convolutions and a final tanh.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use vqsc_tensor::{Graph, Tensor, Var};

use crate::image::Image;
use crate::nn::{ParamSet, PlanOp, StackBuilder, run_plan};
use crate::{derive_seed, streams, VqscError};

/// m x n grid of q-dimensional feature vectors, stored as a [q, m, n]
/// tensor (channel-major, matching the conv layout).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self, VqscError> {
        if t.shape().len() != 3 {
            return Err(VqscError::ShapeMismatch {
                context: "FeatureMap::new".into(),
                detail: format!("expected [q,m,n], got {:?}", t.shape()),
            });
        }
        Ok(FeatureMap(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn q(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }

    pub fn positions(&self) -> usize {
        let (m, n) = self.grid();
        m * n
    }

    /// Total transmitted size N = m * n * q.
    pub fn numel(&self) -> usize {
        self.0.numel()
    }

    /// The q-vector at grid position (i, j).
    pub fn vector(&self, i: usize, j: usize) -> Vec<f64> {
        let (m, n) = self.grid();
        debug_assert!(i < m && j < n);
        let d = self.0.data();
        (0..self.q()).map(|c| d[c * m * n + i * n + j]).collect()
    }

    /// Copy as [m*n, q] rows (position-major).
    pub fn to_rows(&self) -> Tensor {
        let (m, n) = self.grid();
        let q = self.q();
        let d = self.0.data();
        let mut rows = vec![0.0; m * n * q];
        for p in 0..m * n {
            for c in 0..q {
                rows[p * q + c] = d[c * m * n + p];
            }
        }
        Tensor::new(vec![m * n, q], rows).expect("consistent dims")
    }

    /// Inverse of [`FeatureMap::to_rows`].
    pub fn from_rows(rows: &Tensor, m: usize, n: usize) -> Result<Self, VqscError> {
        let shape = rows.shape();
        if shape.len() != 2 || shape[0] != m * n {
            return Err(VqscError::ShapeMismatch {
                context: "FeatureMap::from_rows".into(),
                detail: format!("expected [{}..,q], got {shape:?}", m * n),
            });
        }
        let q = shape[1];
        let rd = rows.data();
        let mut data = vec![0.0; q * m * n];
        for p in 0..m * n {
            for c in 0..q {
                data[c * m * n + p] = rd[p * q + c];
            }
        }
        Ok(FeatureMap(
            Tensor::new(vec![q, m, n], data).expect("consistent dims"),
        ))
    }
}

/// In-graph view change [q,m,n] -> [m*n, q].
pub fn feature_to_rows(g: &mut Graph, z: Var) -> Result<Var, VqscError> {
    let shape = g.value(z).shape().to_vec();
    let (q, m, n) = (shape[0], shape[1], shape[2]);
    let p = g.permute(z, &[1, 2, 0])?;
    Ok(g.reshape(p, &[m * n, q])?)
}

/// In-graph view change [m*n, q] -> [q,m,n].
pub fn rows_to_feature(g: &mut Graph, rows: Var, m: usize, n: usize) -> Result<Var, VqscError> {
    let q = g.value(rows).shape()[1];
    let r = g.reshape(rows, &[m, n, q])?;
    Ok(g.permute(r, &[2, 0, 1])?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecConfig {
    /// Square input size; must be a multiple of `f`.
    pub image_size: usize,
    /// Spatial downsampling factor (4 or 8).
    pub f: usize,
    /// Feature vector length per grid position.
    pub q: usize,
    /// Width of the first scale; doubles each scale.
    pub base_width: usize,
    /// Conv-norm-activation blocks per scale.
    pub blocks_per_scale: usize,
    /// Group count for group normalization.
    pub norm_groups: usize,
}

impl CodecConfig {
    /// Desk-scale default: 32x32 inputs, 4x4 grid of 32-dim vectors.
    pub fn desk() -> Self {
        CodecConfig {
            image_size: 32,
            f: 8,
            q: 32,
            base_width: 8,
            blocks_per_scale: 2,
            norm_groups: 4,
        }
    }

    /// Recorded full-scale setting (512x512 inputs, q=256); kept as a named
    /// preset for reference, not trained at desk scale.
    pub fn paper() -> Self {
        CodecConfig {
            image_size: 512,
            f: 8,
            q: 256,
            base_width: 64,
            blocks_per_scale: 2,
            norm_groups: 8,
        }
    }

    pub fn validate(&self) -> Result<(), VqscError> {
        if !(self.f == 4 || self.f == 8) {
            return Err(VqscError::Config(format!("f must be 4 or 8, got {}", self.f)));
        }
        if self.q < 4 {
            return Err(VqscError::Config(format!("q must be >= 4, got {}", self.q)));
        }
        if self.base_width == 0 || self.blocks_per_scale == 0 || self.norm_groups == 0 {
            return Err(VqscError::Config("widths and block counts must be positive".into()));
        }
        if self.image_size == 0 || self.image_size % self.f != 0 {
            return Err(VqscError::Config(format!(
                "image size {} not divisible by f={}",
                self.image_size, self.f
            )));
        }
        if self.base_width % self.norm_groups != 0 {
            return Err(VqscError::Config(format!(
                "base width {} not divisible by norm groups {}",
                self.base_width, self.norm_groups
            )));
        }
        Ok(())
    }

    pub fn scales(&self) -> usize {
        self.f.trailing_zeros() as usize
    }

    /// Channel width at scale `s` (doubling, starting at `base_width`).
    pub fn width(&self, s: usize) -> usize {
        self.base_width << s
    }

    /// Feature grid side length m = n = image_size / f.
    pub fn grid_size(&self) -> usize {
        self.image_size / self.f
    }

    /// Transmitted feature count N = m * n * q.
    pub fn feature_numel(&self) -> usize {
        let m = self.grid_size();
        m * m * self.q
    }
}

/// Encoder/decoder parameters plus the layer plans to run them.
#[derive(Clone, Debug)]
pub struct CodecParams {
    pub config: CodecConfig,
    pub enc: ParamSet,
    pub dec: ParamSet,
    enc_plan: Vec<PlanOp>,
    dec_plan: Vec<PlanOp>,
}

/// Deterministically build and initialize a codec from a seed. Two calls
/// with the same (config, seed) yield identical parameters.
pub fn build_codec(config: CodecConfig, seed: u64) -> Result<CodecParams, VqscError> {
    build_codec_prefixed(config, seed, "enc", "dec")
}

/// As [`build_codec`] but with custom parameter-name prefixes (the JSCC
/// baseline reuses the same blocks under its own names).
pub fn build_codec_prefixed(
    config: CodecConfig,
    seed: u64,
    enc_prefix: &str,
    dec_prefix: &str,
) -> Result<CodecParams, VqscError> {
    config.validate()?;
    let scales = config.scales();
    let top_width = config.width(scales - 1);

    let mut enc = ParamSet::new();
    let mut enc_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[streams::INIT_ENCODER]));
    let mut b = StackBuilder::new(&mut enc, enc_prefix, &mut enc_rng);
    b.conv("stem", 3, config.width(0), 3, 1, 1);
    for s in 0..scales {
        let w = config.width(s);
        for blk in 0..config.blocks_per_scale {
            b.conv(&format!("s{s}/c{blk}"), w, w, 3, 1, 1);
            b.group_norm(&format!("s{s}/n{blk}"), w, config.norm_groups);
            b.leaky_relu(0.1);
        }
        let w_next = if s + 1 < scales { config.width(s + 1) } else { w };
        b.conv(&format!("s{s}/down"), w, w_next, 3, 2, 1);
    }
    b.group_norm("head/n", top_width, config.norm_groups);
    b.leaky_relu(0.1);
    b.conv("head/c", top_width, config.q, 1, 1, 0);
    let enc_plan = b.plan;

    let mut dec = ParamSet::new();
    let mut dec_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[streams::INIT_DECODER]));
    let mut b = StackBuilder::new(&mut dec, dec_prefix, &mut dec_rng);
    b.conv("in/c", config.q, top_width, 1, 1, 0);
    for s in (0..scales).rev() {
        let w = config.width(s);
        // mirror of the encoder's scale-s downsample (deepest keeps width)
        let w_above = if s + 1 < scales { config.width(s + 1) } else { w };
        b.conv_transpose(&format!("s{s}/up"), w_above, w, 4, 2, 1);
        for blk in 0..config.blocks_per_scale {
            b.conv(&format!("s{s}/c{blk}"), w, w, 3, 1, 1);
            b.group_norm(&format!("s{s}/n{blk}"), w, config.norm_groups);
            b.leaky_relu(0.1);
        }
    }
    b.conv("out/c", config.width(0), 3, 3, 1, 1);
    b.tanh();
    let dec_plan = b.plan;

    Ok(CodecParams {
        config,
        enc,
        dec,
        enc_plan,
        dec_plan,
    })
}

impl CodecParams {
    pub fn param_count(&self) -> usize {
        self.enc.numel() + self.dec.numel()
    }

    /// Build the encoder subgraph: [3,H,W] image var -> [q,m,n] feature var.
    pub fn encode_graph(&self, g: &mut Graph, img: Var, enc_vars: &[Var]) -> Result<Var, VqscError> {
        let shape = g.value(img).shape().to_vec();
        self.check_image_shape(&shape)?;
        run_plan(g, img, &self.enc_plan, enc_vars)
    }

    /// Build the decoder subgraph: [q,m,n] feature var -> [3,H,W] image var.
    pub fn decode_graph(&self, g: &mut Graph, z: Var, dec_vars: &[Var]) -> Result<Var, VqscError> {
        let shape = g.value(z).shape().to_vec();
        let m = self.config.grid_size();
        if shape != [self.config.q, m, m] {
            return Err(VqscError::ShapeMismatch {
                context: "decode".into(),
                detail: format!("expected [{},{m},{m}], got {shape:?}", self.config.q),
            });
        }
        run_plan(g, z, &self.dec_plan, dec_vars)
    }

    fn check_image_shape(&self, shape: &[usize]) -> Result<(), VqscError> {
        let hw = self.config.image_size;
        if shape != [3, hw, hw] {
            return Err(VqscError::ShapeMismatch {
                context: "encode".into(),
                detail: format!("expected [3,{hw},{hw}], got {shape:?}"),
            });
        }
        Ok(())
    }
}

/// Forward-only encode of an image.
pub fn encode(image: &Image, params: &CodecParams) -> Result<FeatureMap, VqscError> {
    let mut g = Graph::new();
    let img = g.constant(image.to_tensor());
    let enc_vars = params.enc.inject(&mut g, false);
    let z = params.encode_graph(&mut g, img, &enc_vars)?;
    FeatureMap::new(g.value(z).clone())
}

/// Forward-only decode to an 8-bit image.
pub fn decode(z: &FeatureMap, params: &CodecParams) -> Result<Image, VqscError> {
    let t = decode_tensor(z, params)?;
    Image::from_tensor(&t)
}

/// Forward-only decode, keeping the float tensor in [-1, 1].
pub fn decode_tensor(z: &FeatureMap, params: &CodecParams) -> Result<Tensor, VqscError> {
    let mut g = Graph::new();
    let zv = g.constant(z.tensor().clone());
    let dec_vars = params.dec.inject(&mut g, false);
    let out = params.decode_graph(&mut g, zv, &dec_vars)?;
    Ok(g.value(out).clone())
}
