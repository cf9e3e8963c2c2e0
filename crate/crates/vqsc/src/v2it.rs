//! Vector-to-index transformer: nine pre-norm self-attention blocks over the
//! flattened feature grid, emitting per-position logits over the codebook
//! plus the pre-head hidden states used by the stage-2 feature term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqsc_tensor::{Graph, Tensor, Var};

use crate::codebook::IndexGrid;
use crate::codec::FeatureMap;
use crate::nn::{randn_tensor, ParamSet};
use crate::{derive_seed, streams, VqscError};

/// Self-attention block count; fixed by design.
pub const NUM_BLOCKS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct V2itConfig {
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Feature grid rows/cols this transformer was built for.
    pub grid_m: usize,
    pub grid_n: usize,
    /// Input feature vector length.
    pub q: usize,
    /// Output classes = codebook size L.
    pub codebook_size: usize,
}

impl V2itConfig {
    /// Desk default for the 4x4 grid of 32-dim features over a 128-entry
    /// codebook.
    pub fn desk() -> Self {
        V2itConfig {
            d_model: 64,
            heads: 4,
            mlp_ratio: 2,
            grid_m: 4,
            grid_n: 4,
            q: 32,
            codebook_size: 128,
        }
    }

    pub fn validate(&self) -> Result<(), VqscError> {
        if self.d_model == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(VqscError::Config("transformer dims must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(VqscError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.grid_m == 0 || self.grid_n == 0 || self.q == 0 || self.codebook_size < 2 {
            return Err(VqscError::Config("grid/q/codebook sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.grid_m * self.grid_n
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
pub struct V2itParams {
    pub config: V2itConfig,
    pub params: ParamSet,
    in_w: usize,
    in_b: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    final_ln_g: usize,
    final_ln_b: usize,
    head_w: usize,
    head_b: usize,
    proj_w: usize,
    proj_b: usize,
}

/// Deterministically build and initialize the transformer.
pub fn build_transformer(config: V2itConfig, seed: u64) -> Result<V2itParams, VqscError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[streams::INIT_V2IT]));
    let mut p = ParamSet::new();
    let d = config.d_model;
    let s = config.seq_len();

    let linear = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize| {
        let w = randn_tensor(&[din, dout], (1.0 / din as f64).sqrt(), rng);
        let wi = p.push(format!("v2it/{name}/w"), w);
        let bi = p.push(format!("v2it/{name}/b"), Tensor::zeros(&[dout]));
        (wi, bi)
    };
    let norm = |p: &mut ParamSet, name: &str, dim: usize| {
        let gi = p.push(format!("v2it/{name}/gamma"), Tensor::full(&[dim], 1.0));
        let bi = p.push(format!("v2it/{name}/beta"), Tensor::zeros(&[dim]));
        (gi, bi)
    };

    let (in_w, in_b) = linear(&mut p, &mut rng, "in", config.q, d);
    let pos = p.push("v2it/pos", randn_tensor(&[s, d], 0.02, &mut rng));
    let mut blocks = Vec::with_capacity(NUM_BLOCKS);
    for blk in 0..NUM_BLOCKS {
        let (ln1_g, ln1_b) = norm(&mut p, &format!("blk{blk}/ln1"), d);
        let (wq, bq) = linear(&mut p, &mut rng, &format!("blk{blk}/q"), d, d);
        // no key bias: softmax removes any row-constant score shift, so the
        // parameter would receive an identically-zero gradient
        let wk = p.push(
            format!("v2it/blk{blk}/k/w"),
            randn_tensor(&[d, d], (1.0 / d as f64).sqrt(), &mut rng),
        );
        let (wv, bv) = linear(&mut p, &mut rng, &format!("blk{blk}/v"), d, d);
        let (wo, bo) = linear(&mut p, &mut rng, &format!("blk{blk}/o"), d, d);
        let (ln2_g, ln2_b) = norm(&mut p, &format!("blk{blk}/ln2"), d);
        let hidden = d * config.mlp_ratio;
        let (w1, b1) = linear(&mut p, &mut rng, &format!("blk{blk}/mlp1"), d, hidden);
        let (w2, b2) = linear(&mut p, &mut rng, &format!("blk{blk}/mlp2"), hidden, d);
        blocks.push(BlockIdx {
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
        });
    }
    let (final_ln_g, final_ln_b) = norm(&mut p, "final_ln", d);
    let (head_w, head_b) = linear(&mut p, &mut rng, "head", d, config.codebook_size);
    let (proj_w, proj_b) = linear(&mut p, &mut rng, "proj", d, config.q);

    Ok(V2itParams {
        config,
        params: p,
        in_w,
        in_b,
        pos,
        blocks,
        final_ln_g,
        final_ln_b,
        head_w,
        head_b,
        proj_w,
        proj_b,
    })
}

/// Per-position logits plus the pre-head hidden states.
pub struct V2itForward {
    pub logits: Var,
    pub features: Var,
}

impl V2itParams {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn proj_vars(&self, vars: &[Var]) -> (Var, Var) {
        (vars[self.proj_w], vars[self.proj_b])
    }

    /// Build the forward graph over [S,q] feature rows. When `attn_probe` is
    /// given, each block's post-softmax attention tensor [heads,S,S] is
    /// pushed into it.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        z_rows: Var,
        vars: &[Var],
        mut attn_probe: Option<&mut Vec<Tensor>>,
    ) -> Result<V2itForward, VqscError> {
        let cfg = &self.config;
        let s = cfg.seq_len();
        let d = cfg.d_model;
        let shape = g.value(z_rows).shape().to_vec();
        if shape != [s, cfg.q] {
            return Err(VqscError::ShapeMismatch {
                context: "v2it forward".into(),
                detail: format!(
                    "expected [{s},{}] feature rows (grid {}x{}), got {shape:?}",
                    cfg.q, cfg.grid_m, cfg.grid_n
                ),
            });
        }
        let heads = cfg.heads;
        let dh = cfg.head_dim();

        let linear = |g: &mut Graph, x: Var, w: usize, b: usize| -> Result<Var, VqscError> {
            let y = g.matmul(x, vars[w])?;
            Ok(g.add_rowvec(y, vars[b])?)
        };
        let split_heads = |g: &mut Graph, x: Var| -> Result<Var, VqscError> {
            let r = g.reshape(x, &[s, heads, dh])?;
            Ok(g.permute(r, &[1, 0, 2])?)
        };

        let mut x = linear(g, z_rows, self.in_w, self.in_b)?;
        x = g.add(x, vars[self.pos])?;

        for blk in &self.blocks {
            let h = g.layer_norm(x, vars[blk.ln1_g], vars[blk.ln1_b], 1e-5)?;
            let qx = linear(g, h, blk.wq, blk.bq)?;
            let kx = g.matmul(h, vars[blk.wk])?;
            let vx = linear(g, h, blk.wv, blk.bv)?;
            let qh = split_heads(g, qx)?;
            let kh = split_heads(g, kx)?;
            let vh = split_heads(g, vx)?;
            let scores = g.batch_matmul(qh, kh, true)?;
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = g.softmax(scaled)?;
            if let Some(probe) = attn_probe.as_deref_mut() {
                probe.push(g.value(attn).clone());
            }
            let ctx = g.batch_matmul(attn, vh, false)?;
            let merged = g.permute(ctx, &[1, 0, 2])?;
            let merged = g.reshape(merged, &[s, d])?;
            let attn_out = linear(g, merged, blk.wo, blk.bo)?;
            x = g.add(x, attn_out)?;

            let h2 = g.layer_norm(x, vars[blk.ln2_g], vars[blk.ln2_b], 1e-5)?;
            let m1 = linear(g, h2, blk.w1, blk.b1)?;
            let act = g.gelu(m1)?;
            let m2 = linear(g, act, blk.w2, blk.b2)?;
            x = g.add(x, m2)?;
        }

        let features = g.layer_norm(x, vars[self.final_ln_g], vars[self.final_ln_b], 1e-5)?;
        let logits = linear(g, features, self.head_w, self.head_b)?;
        Ok(V2itForward { logits, features })
    }
}

/// Argmax per row; ties resolve to the lowest index.
pub fn logits_to_indices(logits: &Tensor, m: usize, n: usize) -> Result<IndexGrid, VqscError> {
    let shape = logits.shape();
    let (rows, l) = (shape[0], shape[1]);
    let mut idx = Vec::with_capacity(rows);
    for r in 0..rows {
        let seg = &logits.data()[r * l..(r + 1) * l];
        let mut best = 0usize;
        for (k, &v) in seg.iter().enumerate().skip(1) {
            if v > seg[best] {
                best = k;
            }
        }
        idx.push(best);
    }
    IndexGrid::new(m, n, idx)
}

/// Forward-only prediction: logits, pre-head features, and the decoded grid.
pub fn predict_indices(
    z: &FeatureMap,
    params: &V2itParams,
) -> Result<(Tensor, Tensor, IndexGrid), VqscError> {
    let (m, n) = z.grid();
    let cfg = &params.config;
    if (m, n) != (cfg.grid_m, cfg.grid_n) || z.q() != cfg.q {
        return Err(VqscError::ShapeMismatch {
            context: "predict_indices".into(),
            detail: format!(
                "feature map {}x{} (q={}) vs transformer grid {}x{} (q={})",
                m, n, z.q(), cfg.grid_m, cfg.grid_n, cfg.q
            ),
        });
    }
    let mut g = Graph::new();
    let vars = params.params.inject(&mut g, false);
    let rows = g.constant(z.to_rows());
    let out = params.forward_graph(&mut g, rows, &vars, None)?;
    let logits = g.value(out.logits).clone();
    let features = g.value(out.features).clone();
    let s = logits_to_indices(&logits, m, n)?;
    Ok((logits, features, s))
}

/// As [`predict_indices`] but also returns each block's attention rows.
pub fn predict_indices_with_attention(
    z: &FeatureMap,
    params: &V2itParams,
) -> Result<(Tensor, IndexGrid, Vec<Tensor>), VqscError> {
    let (m, n) = z.grid();
    let mut g = Graph::new();
    let vars = params.params.inject(&mut g, false);
    let rows = g.constant(z.to_rows());
    let mut probe = Vec::new();
    let out = params.forward_graph(&mut g, rows, &vars, Some(&mut probe))?;
    let logits = g.value(out.logits).clone();
    let s = logits_to_indices(&logits, m, n)?;
    Ok((logits, s, probe))
}

/// Which tensor feeds the stage-2 feature-matching term.
#[derive(Clone, Copy, Debug)]
pub enum FeatureTerm {
    /// Learned projection of the transformer's pre-head hidden states back
    /// to q dims (the trainable reading).
    Projected,
    /// The corrupted input itself, as printed in the stage-2 objective; it
    /// is constant w.r.t. every trainable parameter and exists for ablation.
    LiteralInput(Var),
}

/// lambda * sum_positions CE(logits, s) + ||feat - sg(z_c)||^2 where `feat`
/// is chosen by `term`. Targets are constants from the stage-1 quantizer.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss_graph(
    g: &mut Graph,
    out: &V2itForward,
    proj_w: Var,
    proj_b: Var,
    targets: &IndexGrid,
    z_c_rows: Var,
    lambda: f64,
    term: FeatureTerm,
) -> Result<Stage2Loss, VqscError> {
    let ce = g.cross_entropy_sum(out.logits, targets.indices())?;
    let tgt = g.stop_gradient(z_c_rows)?;
    let feat_src = match term {
        FeatureTerm::Projected => {
            let p = g.matmul(out.features, proj_w)?;
            g.add_rowvec(p, proj_b)?
        }
        FeatureTerm::LiteralInput(z_rows) => z_rows,
    };
    let d = g.sub(feat_src, tgt)?;
    let feat = g.sum_sq(d)?;
    let ce_w = g.scale(ce, lambda)?;
    let total = g.add(ce_w, feat)?;
    Ok(Stage2Loss { total, ce, feat })
}

pub struct Stage2Loss {
    pub total: Var,
    pub ce: Var,
    pub feat: Var,
}
