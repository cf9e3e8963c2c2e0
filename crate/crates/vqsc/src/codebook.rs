//! The shared learned codebook: nearest-neighbor quantization, index lookup,
//! the two-term commitment loss, the straight-through estimator, and usage
//! statistics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqsc_tensor::{Graph, Tensor, Var};

use crate::codec::FeatureMap;
use crate::nn::uniform_tensor;
use crate::{derive_seed, streams, VqscError};

/// L learnable q-dimensional code vectors, addressed 0..L-1.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    table: Tensor, // [L, q]
}

impl Codebook {
    pub fn new(table: Tensor) -> Result<Self, VqscError> {
        let shape = table.shape();
        if shape.len() != 2 {
            return Err(VqscError::ShapeMismatch {
                context: "Codebook::new".into(),
                detail: format!("expected [L,q], got {shape:?}"),
            });
        }
        if shape[0] < 2 {
            return Err(VqscError::Config(format!(
                "codebook needs at least 2 vectors, got {}",
                shape[0]
            )));
        }
        if !table.is_finite() {
            return Err(VqscError::Config("codebook contains non-finite entries".into()));
        }
        Ok(Codebook { table })
    }

    /// Uniform(-1/L, 1/L) init; small distinct vectors.
    pub fn init(l: usize, q: usize, seed: u64) -> Result<Self, VqscError> {
        if l < 2 {
            return Err(VqscError::Config(format!("codebook size {l} too small")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[streams::INIT_CODEBOOK]));
        let bound = 1.0 / l as f64;
        Codebook::new(uniform_tensor(&[l, q], -bound, bound, &mut rng))
    }

    pub fn len(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn q(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Tensor {
        &mut self.table
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        let q = self.q();
        &self.table.data()[k * q..(k + 1) * q]
    }

    /// True when no two code vectors are bitwise identical.
    pub fn all_distinct(&self) -> bool {
        let l = self.len();
        for a in 0..l {
            for b in a + 1..l {
                if self.vector(a) == self.vector(b) {
                    return false;
                }
            }
        }
        true
    }
}

/// m x n grid of codebook indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexGrid {
    m: usize,
    n: usize,
    idx: Vec<usize>,
}

impl IndexGrid {
    pub fn new(m: usize, n: usize, idx: Vec<usize>) -> Result<Self, VqscError> {
        if idx.len() != m * n {
            return Err(VqscError::ShapeMismatch {
                context: "IndexGrid::new".into(),
                detail: format!("{m}x{n} grid needs {} indices, got {}", m * n, idx.len()),
            });
        }
        Ok(IndexGrid { m, n, idx })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn indices(&self) -> &[usize] {
        &self.idx
    }

    pub fn max_index(&self) -> usize {
        self.idx.iter().copied().max().unwrap_or(0)
    }
}

/// Squared Euclidean distance, summed in index order (ties between bitwise
/// equal vectors therefore compare equal and resolve to the lower index).
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Nearest-neighbor quantization. Returns the index grid and the quantized
/// map; the latter is exactly `lookup(s, codebook)`.
pub fn quantize(z: &FeatureMap, cb: &Codebook) -> Result<(IndexGrid, FeatureMap), VqscError> {
    if cb.len() < 2 {
        return Err(VqscError::EmptyCodebook);
    }
    if z.q() != cb.q() {
        return Err(VqscError::ShapeMismatch {
            context: "quantize".into(),
            detail: format!("feature q={} vs codebook q={}", z.q(), cb.q()),
        });
    }
    if !z.tensor().is_finite() {
        return Err(VqscError::Config("non-finite feature map".into()));
    }
    let (m, n) = z.grid();
    let mut idx = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let v = z.vector(i, j);
            let mut best = 0usize;
            let mut best_d = sq_dist(&v, cb.vector(0));
            for k in 1..cb.len() {
                let d = sq_dist(&v, cb.vector(k));
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            idx.push(best);
        }
    }
    let s = IndexGrid::new(m, n, idx)?;
    let z_c = lookup(&s, cb)?;
    Ok((s, z_c))
}

/// Retrieve code vectors by index: a pure gather.
pub fn lookup(s: &IndexGrid, cb: &Codebook) -> Result<FeatureMap, VqscError> {
    let (m, n) = s.grid();
    let q = cb.q();
    let l = cb.len();
    let mut data = vec![0.0; q * m * n];
    for (p, &k) in s.indices().iter().enumerate() {
        if k >= l {
            return Err(VqscError::IndexOutOfRange { index: k, size: l });
        }
        let v = cb.vector(k);
        for c in 0..q {
            data[c * m * n + p] = v[c];
        }
    }
    FeatureMap::new(Tensor::new(vec![q, m, n], data).expect("consistent dims"))
}

/// In-graph lookup that keeps the codebook differentiable: gathers rows of
/// the codebook var and reshapes to the [q,m,n] feature layout.
pub fn lookup_graph(
    g: &mut Graph,
    cb_var: Var,
    s: &IndexGrid,
) -> Result<Var, VqscError> {
    let (m, n) = s.grid();
    let rows = g.gather_rows(cb_var, s.indices())?;
    crate::codec::rows_to_feature(g, rows, m, n)
}

/// Two-term quantization loss: ||sg(z_h) - z_c||^2 + beta * ||z_h - sg(z_c)||^2,
/// summed over the grid. The first term reaches only the codebook, the
/// second only the encoder.
pub fn vq_loss_graph(g: &mut Graph, z_h: Var, z_c: Var, beta: f64) -> Result<Var, VqscError> {
    let sg_zh = g.stop_gradient(z_h)?;
    let d1 = g.sub(sg_zh, z_c)?;
    let t1 = g.sum_sq(d1)?;
    let sg_zc = g.stop_gradient(z_c)?;
    let d2 = g.sub(z_h, sg_zc)?;
    let t2 = g.sum_sq(d2)?;
    let t2s = g.scale(t2, beta)?;
    Ok(g.add(t1, t2s)?)
}

/// Value-level convenience for tests and monitoring.
pub fn vq_loss(z_h: &FeatureMap, z_c: &FeatureMap, beta: f64) -> Result<f64, VqscError> {
    if z_h.tensor().shape() != z_c.tensor().shape() {
        return Err(VqscError::ShapeMismatch {
            context: "vq_loss".into(),
            detail: format!("{:?} vs {:?}", z_h.tensor().shape(), z_c.tensor().shape()),
        });
    }
    let mut g = Graph::new();
    let a = g.constant(z_h.tensor().clone());
    let b = g.constant(z_c.tensor().clone());
    let loss = vq_loss_graph(&mut g, a, b, beta)?;
    Ok(g.value(loss).item())
}

/// Decoder input: forwards z_c, backpropagates into z_h with an identity
/// Jacobian, nothing into the codebook through this path.
pub fn straight_through(g: &mut Graph, z_h: Var, z_c: Var) -> Result<Var, VqscError> {
    Ok(g.straight_through(z_h, z_c)?)
}

/// Running index-usage histogram for collapse monitoring.
#[derive(Clone, Debug, Default)]
pub struct UsageHistogram {
    counts: Vec<u64>,
}

impl UsageHistogram {
    pub fn new(l: usize) -> Self {
        UsageHistogram {
            counts: vec![0; l],
        }
    }

    pub fn record(&mut self, s: &IndexGrid) {
        for &k in s.indices() {
            if k < self.counts.len() {
                self.counts[k] += 1;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// exp(entropy) of the empirical index distribution, in [1, L].
    pub fn perplexity(&self) -> Result<f64, VqscError> {
        let total = self.total();
        if total == 0 {
            return Err(VqscError::Config("no quantizations recorded".into()));
        }
        let mut h = 0.0;
        for &c in &self.counts {
            if c > 0 {
                let p = c as f64 / total as f64;
                h -= p * p.ln();
            }
        }
        Ok(h.exp())
    }

    pub fn dead_codes(&self) -> usize {
        self.counts.iter().filter(|&&c| c == 0).count()
    }
}
