//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Ops compute eagerly, record
//! what they need for the adjoint, and return a [`Var`] handle. `backward`
//! walks the tape once in reverse. Graphs are single-use: one backward per
//! graph, rebuild per training step.

use crate::kernels;
use crate::{Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddRowVec {
        x: usize,
        bias: usize,
        rows: usize,
        dim: usize,
    },
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatmul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    Gelu(usize),
    Tanh(usize),
    Softplus(usize),
    Abs(usize),
    Log(usize),
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: usize,
        dim: usize,
    },
    Mean(usize),
    Sum(usize),
    SumSq(usize),
    Reshape(usize),
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    GatherRows {
        table: usize,
        indices: Vec<usize>,
        width: usize,
    },
    StopGradient,
    StraightThrough {
        grad_to: usize,
    },
    CrossEntropySum {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Reverse-mode tape. See module docs.
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: true,
            backward_done: false,
        }
    }

    /// Disable per-op finiteness validation (forward values are then only
    /// checked where an op's math requires it).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(id)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward() w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape().to_vec(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, TensorError> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite {
                context: format!("forward output of {}", op_name(&op)),
            });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(id))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape, data }, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape, data }, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape, data }, Op::Mul(a.0, b.0), rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        let data: Vec<f64> = self.nodes[a.0].value.data().iter().map(|x| -x).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::Neg(a.0), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let data: Vec<f64> = self.nodes[a.0].value.data().iter().map(|x| c * x).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::Scale(a.0, c), rg)
    }

    /// x[..., D] + bias[D], broadcast over leading dims.
    pub fn add_rowvec(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let bs = self.nodes[bias.0].value.shape();
        if xs.is_empty() || bs.len() != 1 || *xs.last().unwrap() != bs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_rowvec",
                detail: format!("x {xs:?} vs bias {bs:?}"),
            });
        }
        let dim = bs[0];
        let rows = self.nodes[x.0].value.numel() / dim;
        let bdat = self.nodes[bias.0].value.data();
        let mut data = self.nodes[x.0].value.data().to_vec();
        for r in 0..rows {
            for (d, bv) in bdat.iter().enumerate() {
                data[r * dim + d] += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(
            Tensor { shape: xs, data },
            Op::AddRowVec {
                x: x.0,
                bias: bias.0,
                rows,
                dim,
            },
            rg,
        )
    }

    // ---- activations and pointwise functions ----

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, TensorError> {
        let data: Vec<f64> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::LeakyRelu { x: x.0, slope }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let data: Vec<f64> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| gelu_fwd(v))
            .collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::Gelu(x.0), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        let data: Vec<f64> = self.nodes[x.0].value.data().iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::Tanh(x.0), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, TensorError> {
        let data: Vec<f64> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| softplus_fwd(v))
            .collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::Softplus(x.0), rg)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        let data: Vec<f64> = self.nodes[x.0].value.data().iter().map(|v| v.abs()).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::Abs(x.0), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        let data: Vec<f64> = self.nodes[x.0].value.data().iter().map(|v| v.ln()).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::Log(x.0), rg)
    }

    // ---- matrix products ----

    /// a[m,k] x b[k,n] -> [m,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kernels::matmul_acc(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut data,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::Matmul { a: a.0, b: b.0, m, k, n },
            rg,
        )
    }

    /// a[B,m,k] x b[B,k,n] -> [B,m,n]; with `transpose_b`, b is [B,n,k].
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, TensorError> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        let bad = || TensorError::ShapeMismatch {
            op: "batch_matmul",
            detail: format!("{sa:?} x {sb:?} (transpose_b={transpose_b})"),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut data = vec![0.0; batch * m * n];
        for t in 0..batch {
            let av = &self.nodes[a.0].value.data()[t * m * k..(t + 1) * m * k];
            let bv = &self.nodes[b.0].value.data()[t * k * n..(t + 1) * k * n];
            let cv = &mut data[t * m * n..(t + 1) * m * n];
            if transpose_b {
                kernels::matmul_abt_acc(av, bv, cv, m, k, n);
            } else {
                kernels::matmul_acc(av, bv, cv, m, k, n);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor {
                shape: vec![batch, m, n],
                data,
            },
            Op::BatchMatmul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                transpose_b,
            },
            rg,
        )
    }

    // ---- convolutions ----

    /// x[C,H,W] (or [1,C,H,W]) * w[O,C,kh,kw] -> [O,Ho,Wo]
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let xs = normalize_chw(self.nodes[x.0].value.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input must be [C,H,W], got {:?}", self.nodes[x.0].value.shape()),
            }
        })?;
        let ws = self.nodes[w.0].value.shape().to_vec();
        if ws.len() != 4 || ws[1] != xs.0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("weight {ws:?} vs input channels {}", xs.0),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        let (cin, h, w_in) = xs;
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || w_in + 2 * pad < kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {h}x{w_in}+{pad}"),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w_in + 2 * pad - kw) / stride + 1;
        if let Some(b) = bias {
            let bs = self.nodes[b.0].value.shape();
            if bs != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias {bs:?} vs out channels {cout}"),
                });
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w: w_in,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let mut cols = vec![0.0; cin * kh * kw * ho * wo];
        kernels::im2col(
            self.nodes[x.0].value.data(),
            cin,
            h,
            w_in,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
            &mut cols,
        );
        let mut data = vec![0.0; cout * ho * wo];
        kernels::matmul_acc(
            self.nodes[w.0].value.data(),
            &cols,
            &mut data,
            cout,
            cin * kh * kw,
            ho * wo,
        );
        if let Some(b) = bias {
            let bd = self.nodes[b.0].value.data();
            for o in 0..cout {
                let bv = bd[o];
                for v in &mut data[o * ho * wo..(o + 1) * ho * wo] {
                    *v += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || bias.map(|b| self.rg(b)).unwrap_or(false);
        self.push(
            Tensor {
                shape: vec![cout, ho, wo],
                data,
            },
            Op::Conv2d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                geom,
                cols,
            },
            rg,
        )
    }

    /// x[C,H,W] * w[C,O,kh,kw] -> [O,(H-1)s+kh-2p,(W-1)s+kw-2p]
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let xs = normalize_chw(self.nodes[x.0].value.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: "conv2d_transpose",
                detail: format!("input must be [C,H,W], got {:?}", self.nodes[x.0].value.shape()),
            }
        })?;
        let ws = self.nodes[w.0].value.shape().to_vec();
        if ws.len() != 4 || ws[0] != xs.0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_transpose",
                detail: format!("weight {ws:?} vs input channels {}", xs.0),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d_transpose",
                detail: "stride must be >= 1".into(),
            });
        }
        let (cin, h, w_in) = xs;
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        let ho_i = (h - 1) * stride + kh;
        let wo_i = (w_in - 1) * stride + kw;
        if ho_i <= 2 * pad || wo_i <= 2 * pad {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_transpose",
                detail: format!("padding {pad} consumes the whole {ho_i}x{wo_i} output"),
            });
        }
        let ho = ho_i - 2 * pad;
        let wo = wo_i - 2 * pad;
        if let Some(b) = bias {
            let bs = self.nodes[b.0].value.shape();
            if bs != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d_transpose",
                    detail: format!("bias {bs:?} vs out channels {cout}"),
                });
            }
        }
        // Geometry of the conv this op is the adjoint of: [O,ho,wo] -> [C,h,w].
        let geom = ConvGeom {
            cin,
            h,
            w: w_in,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        // cols[o*k^2, h*w] = w^T x, then scatter into the output plane.
        let mut cols = vec![0.0; cout * kh * kw * h * w_in];
        kernels::matmul_atb_acc(
            self.nodes[w.0].value.data(),
            self.nodes[x.0].value.data(),
            &mut cols,
            cout * kh * kw,
            cin,
            h * w_in,
        );
        let mut data = vec![0.0; cout * ho * wo];
        kernels::col2im_acc(&cols, cout, ho, wo, kh, kw, stride, pad, h, w_in, &mut data);
        if let Some(b) = bias {
            let bd = self.nodes[b.0].value.data();
            for o in 0..cout {
                let bv = bd[o];
                for v in &mut data[o * ho * wo..(o + 1) * ho * wo] {
                    *v += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || bias.map(|b| self.rg(b)).unwrap_or(false);
        self.push(
            Tensor {
                shape: vec![cout, ho, wo],
                data,
            },
            Op::ConvTranspose2d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                geom,
            },
            rg,
        )
    }

    // ---- normalization and softmax ----

    /// Group normalization over x[C,H,W] with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "group_norm",
                detail: format!("input must be [C,H,W], got {xs:?}"),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::InvalidArgument {
                op: "group_norm",
                detail: format!("{c} channels not divisible into {groups} groups"),
            });
        }
        if self.nodes[gamma.0].value.shape() != [c] || self.nodes[beta.0].value.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "group_norm",
                detail: "gamma/beta must be [C]".into(),
            });
        }
        let cpg = c / groups;
        let gsize = cpg * h * w;
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; groups];
        let mut data = vec![0.0; xd.len()];
        for g in 0..groups {
            let seg = &xd[g * gsize..(g + 1) * gsize];
            let mean = seg.iter().sum::<f64>() / gsize as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[g] = istd;
            for (i, &v) in seg.iter().enumerate() {
                let idx = g * gsize + i;
                let ch = g * cpg + i / (h * w);
                let xh = (v - mean) * istd;
                xhat[idx] = xh;
                data[idx] = gd[ch] * xh + bd[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor { shape: xs, data },
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Layer normalization over the last axis with per-feature affine.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let dim = *xs.last().ok_or(TensorError::ShapeMismatch {
            op: "layer_norm",
            detail: "input must have rank >= 1".into(),
        })?;
        if self.nodes[gamma.0].value.shape() != [dim] || self.nodes[beta.0].value.shape() != [dim] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("gamma/beta must be [{dim}]"),
            });
        }
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let rows = xd.len() / dim;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; xd.len()];
        for r in 0..rows {
            let seg = &xd[r * dim..(r + 1) * dim];
            let mean = seg.iter().sum::<f64>() / dim as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for (i, &v) in seg.iter().enumerate() {
                let xh = (v - mean) * istd;
                xhat[r * dim + i] = xh;
                data[r * dim + i] = gd[i] * xh + bd[i];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor { shape: xs, data },
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let dim = *xs.last().ok_or(TensorError::ShapeMismatch {
            op: "softmax",
            detail: "input must have rank >= 1".into(),
        })?;
        let xd = self.nodes[x.0].value.data();
        let rows = xd.len() / dim;
        let mut data = vec![0.0; xd.len()];
        for r in 0..rows {
            let seg = &xd[r * dim..(r + 1) * dim];
            let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * dim..(r + 1) * dim];
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(seg) {
                let e = (v - max).exp();
                *o = e;
                z += e;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor { shape: xs, data }, Op::Softmax { x: x.0, dim }, rg)
    }

    // ---- reductions ----

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let xd = self.nodes[x.0].value.data();
        let m = xd.iter().sum::<f64>() / xd.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x.0), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.nodes[x.0].value.data().iter().sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    /// Sum of squared elements.
    pub fn sum_sq(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.nodes[x.0].value.data().iter().map(|v| v * v).sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSq(x.0), rg)
    }

    // ---- shape ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!(
                    "{:?} -> {shape:?}",
                    self.nodes[x.0].value.shape()
                ),
            });
        }
        let data = self.nodes[x.0].value.data().to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Reshape(x.0),
            rg,
        )
    }

    /// Permute axes; `axes` must be a permutation of 0..rank.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let rank = xs.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                detail: format!("axes {axes:?} is not a permutation of 0..{rank}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let data = permute_data(self.nodes[x.0].value.data(), &xs, axes);
        let rg = self.rg(x);
        self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Permute {
                x: x.0,
                axes: axes.to_vec(),
            },
            rg,
        )
    }

    /// Convenience 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        if self.nodes[x.0].value.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                detail: "expects rank 2; use permute for higher ranks".into(),
            });
        }
        self.permute(x, &[1, 0])
    }

    // ---- indexing ----

    /// Gather rows of table[L,q] by index -> [P,q].
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let ts = self.nodes[table.0].value.shape().to_vec();
        if ts.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("table must be [L,q], got {ts:?}"),
            });
        }
        let (l, q) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= l) {
            return Err(TensorError::IndexOutOfRange { index: bad, len: l });
        }
        let td = self.nodes[table.0].value.data();
        let mut data = vec![0.0; indices.len() * q];
        for (p, &i) in indices.iter().enumerate() {
            data[p * q..(p + 1) * q].copy_from_slice(&td[i * q..(i + 1) * q]);
        }
        let rg = self.rg(table);
        self.push(
            Tensor {
                shape: vec![indices.len(), q],
                data,
            },
            Op::GatherRows {
                table: table.0,
                indices: indices.to_vec(),
                width: q,
            },
            rg,
        )
    }

    // ---- gradient routing ----

    /// Identity forward; contributes zero adjoint to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Forward takes the value of `value_from`; backward routes the full
    /// adjoint to `grad_to` (identity Jacobian) and none to `value_from`.
    pub fn straight_through(&mut self, grad_to: Var, value_from: Var) -> Result<Var, TensorError> {
        self.same_shape("straight_through", grad_to, value_from)?;
        let value = self.nodes[value_from.0].value.clone();
        let rg = self.rg(grad_to);
        self.push(value, Op::StraightThrough { grad_to: grad_to.0 }, rg)
    }

    // ---- losses ----

    /// Sum over rows of cross-entropy between logits[P,L] and target indices.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let ls = self.nodes[logits.0].value.shape().to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_sum",
                detail: format!("logits {ls:?} vs {} targets", targets.len()),
            });
        }
        let (p, l) = (ls[0], ls[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= l) {
            return Err(TensorError::IndexOutOfRange { index: bad, len: l });
        }
        let xd = self.nodes[logits.0].value.data();
        let mut probs = vec![0.0; p * l];
        let mut total = 0.0;
        for r in 0..p {
            let seg = &xd[r * l..(r + 1) * l];
            let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let pr = &mut probs[r * l..(r + 1) * l];
            let mut z = 0.0;
            for (o, &v) in pr.iter_mut().zip(seg) {
                let e = (v - max).exp();
                *o = e;
                z += e;
            }
            for o in pr.iter_mut() {
                *o /= z;
            }
            total += z.ln() + max - seg[targets[r]];
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropySum {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    // ---- backward ----

    /// Reverse-accumulate d(loss)/d(ancestor) for every ancestor that
    /// requires gradients. One call per graph.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        self.backward_done = true;
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(TensorError::NonScalarLoss { numel });
        }
        if !self.nodes[loss.0].requires_grad {
            // A loss cut off from live parameters is an error; a graph with
            // no gradient-requiring leaves at all is a documented no-op.
            if self.nodes.iter().any(|n| matches!(n.op, Op::Leaf) && n.requires_grad) {
                return Err(TensorError::DetachedLoss);
            }
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            if self.check_finite {
                let g = self.nodes[id].grad.as_ref().unwrap();
                if !kernels::all_finite(g) {
                    return Err(TensorError::NonFinite {
                        context: format!("adjoint of {}", op_name(&self.nodes[id].op)),
                    });
                }
            }
            self.apply_adjoint(id);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: usize) -> &mut [f64] {
        let n = self.nodes[id].value.numel();
        self.nodes[id].grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Apply one node's adjoint into its inputs' grad buffers. Takes the op
    /// out of the node (the tape is single-use once backward runs), which
    /// lets cached buffers like conv cols move instead of clone.
    fn apply_adjoint(&mut self, id: usize) {
        let g = self.nodes[id].grad.take().expect("adjoint present");
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.nodes[a].requires_grad {
                    accumulate(self.grad_buf(a), &g);
                }
                if self.nodes[b].requires_grad {
                    accumulate(self.grad_buf(b), &g);
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[a].requires_grad {
                    accumulate(self.grad_buf(a), &g);
                }
                if self.nodes[b].requires_grad {
                    for (d, s) in self.grad_buf(b).iter_mut().zip(&g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.data().to_vec();
                    for ((d, s), v) in self.grad_buf(a).iter_mut().zip(&g).zip(&bv) {
                        *d += s * v;
                    }
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.data().to_vec();
                    for ((d, s), v) in self.grad_buf(b).iter_mut().zip(&g).zip(&av) {
                        *d += s * v;
                    }
                }
            }
            Op::Neg(a) => {
                if self.nodes[a].requires_grad {
                    for (d, s) in self.grad_buf(a).iter_mut().zip(&g) {
                        *d -= s;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[a].requires_grad {
                    for (d, s) in self.grad_buf(a).iter_mut().zip(&g) {
                        *d += c * s;
                    }
                }
            }
            Op::AddRowVec { x, bias, rows, dim } => {
                if self.nodes[x].requires_grad {
                    accumulate(self.grad_buf(x), &g);
                }
                if self.nodes[bias].requires_grad {
                    let gb = self.grad_buf(bias);
                    for r in 0..rows {
                        for d in 0..dim {
                            gb[d] += g[r * dim + d];
                        }
                    }
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.data().to_vec();
                    kernels::matmul_abt_acc(&g, &bv, self.grad_buf(a), m, n, k);
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.data().to_vec();
                    kernels::matmul_atb_acc(&av, &g, self.grad_buf(b), k, m, n);
                }
            }
            Op::BatchMatmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b: tb,
            } => {
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.data().to_vec();
                    let ga = self.grad_buf(a);
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &bv[t * k * n..(t + 1) * k * n];
                        let gat = &mut ga[t * m * k..(t + 1) * m * k];
                        if tb {
                            kernels::matmul_acc(gt, bt, gat, m, n, k);
                        } else {
                            kernels::matmul_abt_acc(gt, bt, gat, m, n, k);
                        }
                    }
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.data().to_vec();
                    let gb = self.grad_buf(b);
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &av[t * m * k..(t + 1) * m * k];
                        let gbt = &mut gb[t * k * n..(t + 1) * k * n];
                        if tb {
                            kernels::matmul_atb_acc(gt, at, gbt, n, m, k);
                        } else {
                            kernels::matmul_atb_acc(at, gt, gbt, k, m, n);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            } => {
                let ck2 = geom.cin * geom.kh * geom.kw;
                let howo = geom.ho * geom.wo;
                if let Some(b) = bias {
                    if self.nodes[b].requires_grad {
                        let gb = self.grad_buf(b);
                        for o in 0..geom.cout {
                            gb[o] += g[o * howo..(o + 1) * howo].iter().sum::<f64>();
                        }
                    }
                }
                if self.nodes[w].requires_grad {
                    kernels::matmul_abt_acc(&g, &cols, self.grad_buf(w), geom.cout, howo, ck2);
                }
                if self.nodes[x].requires_grad {
                    let wv = self.nodes[w].value.data().to_vec();
                    let mut dcols = vec![0.0; ck2 * howo];
                    kernels::matmul_atb_acc(&wv, &g, &mut dcols, ck2, geom.cout, howo);
                    kernels::col2im_acc(
                        &dcols,
                        geom.cin,
                        geom.h,
                        geom.w,
                        geom.kh,
                        geom.kw,
                        geom.stride,
                        geom.pad,
                        geom.ho,
                        geom.wo,
                        self.grad_buf(x),
                    );
                }
            }
            Op::ConvTranspose2d { x, w, bias, geom } => {
                let ok2 = geom.cout * geom.kh * geom.kw;
                let hw = geom.h * geom.w;
                let howo = geom.ho * geom.wo;
                if let Some(b) = bias {
                    if self.nodes[b].requires_grad {
                        let gb = self.grad_buf(b);
                        for o in 0..geom.cout {
                            gb[o] += g[o * howo..(o + 1) * howo].iter().sum::<f64>();
                        }
                    }
                }
                let need_x = self.nodes[x].requires_grad;
                let need_w = self.nodes[w].requires_grad;
                if need_x || need_w {
                    let mut gcols = vec![0.0; ok2 * hw];
                    kernels::im2col(
                        &g, geom.cout, geom.ho, geom.wo, geom.kh, geom.kw, geom.stride, geom.pad,
                        geom.h, geom.w, &mut gcols,
                    );
                    if need_x {
                        let wv = self.nodes[w].value.data().to_vec();
                        kernels::matmul_acc(&wv, &gcols, self.grad_buf(x), geom.cin, ok2, hw);
                    }
                    if need_w {
                        let xv = self.nodes[x].value.data().to_vec();
                        kernels::matmul_abt_acc(&xv, &gcols, self.grad_buf(w), geom.cin, hw, ok2);
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.nodes[x].requires_grad {
                    let xv = self.nodes[x].value.data().to_vec();
                    for ((d, s), v) in self.grad_buf(x).iter_mut().zip(&g).zip(&xv) {
                        *d += s * if *v >= 0.0 { 1.0 } else { slope };
                    }
                }
            }
            Op::Gelu(x) => {
                if self.nodes[x].requires_grad {
                    let xv = self.nodes[x].value.data().to_vec();
                    for ((d, s), v) in self.grad_buf(x).iter_mut().zip(&g).zip(&xv) {
                        *d += s * gelu_grad(*v);
                    }
                }
            }
            Op::Tanh(x) => {
                if self.nodes[x].requires_grad {
                    let yv = self.nodes[id].value.data().to_vec();
                    for ((d, s), y) in self.grad_buf(x).iter_mut().zip(&g).zip(&yv) {
                        *d += s * (1.0 - y * y);
                    }
                }
            }
            Op::Softplus(x) => {
                if self.nodes[x].requires_grad {
                    let xv = self.nodes[x].value.data().to_vec();
                    for ((d, s), v) in self.grad_buf(x).iter_mut().zip(&g).zip(&xv) {
                        *d += s * sigmoid(*v);
                    }
                }
            }
            Op::Abs(x) => {
                if self.nodes[x].requires_grad {
                    let xv = self.nodes[x].value.data().to_vec();
                    for ((d, s), v) in self.grad_buf(x).iter_mut().zip(&g).zip(&xv) {
                        *d += s * if *v > 0.0 {
                            1.0
                        } else if *v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                }
            }
            Op::Log(x) => {
                if self.nodes[x].requires_grad {
                    let xv = self.nodes[x].value.data().to_vec();
                    for ((d, s), v) in self.grad_buf(x).iter_mut().zip(&g).zip(&xv) {
                        *d += s / v;
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let shape = self.nodes[x].value.shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let cpg = c / groups;
                let gsize = cpg * h * w;
                let gd = self.nodes[gamma].value.data().to_vec();
                if self.nodes[beta].requires_grad {
                    let gb = self.grad_buf(beta);
                    for ch in 0..c {
                        gb[ch] += g[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>();
                    }
                }
                if self.nodes[gamma].requires_grad {
                    let gg = self.grad_buf(gamma);
                    for ch in 0..c {
                        let mut s = 0.0;
                        for i in 0..h * w {
                            s += g[ch * h * w + i] * xhat[ch * h * w + i];
                        }
                        gg[ch] += s;
                    }
                }
                if self.nodes[x].requires_grad {
                    let gx = self.grad_buf(x);
                    for grp in 0..groups {
                        let base = grp * gsize;
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for i in 0..gsize {
                            let ch = grp * cpg + i / (h * w);
                            let dxh = g[base + i] * gd[ch];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[base + i];
                        }
                        let m1 = sum_dxhat / gsize as f64;
                        let m2 = sum_dxhat_xhat / gsize as f64;
                        for i in 0..gsize {
                            let ch = grp * cpg + i / (h * w);
                            let dxh = g[base + i] * gd[ch];
                            gx[base + i] += inv_std[grp] * (dxh - m1 - xhat[base + i] * m2);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let dim = *self.nodes[x].value.shape().last().unwrap();
                let rows = xhat.len() / dim;
                let gd = self.nodes[gamma].value.data().to_vec();
                if self.nodes[beta].requires_grad {
                    let gb = self.grad_buf(beta);
                    for r in 0..rows {
                        for d in 0..dim {
                            gb[d] += g[r * dim + d];
                        }
                    }
                }
                if self.nodes[gamma].requires_grad {
                    let gg = self.grad_buf(gamma);
                    for r in 0..rows {
                        for d in 0..dim {
                            gg[d] += g[r * dim + d] * xhat[r * dim + d];
                        }
                    }
                }
                if self.nodes[x].requires_grad {
                    let gx = self.grad_buf(x);
                    for r in 0..rows {
                        let base = r * dim;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for d in 0..dim {
                            let dxh = g[base + d] * gd[d];
                            m1 += dxh;
                            m2 += dxh * xhat[base + d];
                        }
                        m1 /= dim as f64;
                        m2 /= dim as f64;
                        for d in 0..dim {
                            let dxh = g[base + d] * gd[d];
                            gx[base + d] += inv_std[r] * (dxh - m1 - xhat[base + d] * m2);
                        }
                    }
                }
            }
            Op::Softmax { x, dim } => {
                if self.nodes[x].requires_grad {
                    let yv = self.nodes[id].value.data().to_vec();
                    let rows = yv.len() / dim;
                    let gx = self.grad_buf(x);
                    for r in 0..rows {
                        let base = r * dim;
                        let mut s = 0.0;
                        for d in 0..dim {
                            s += g[base + d] * yv[base + d];
                        }
                        for d in 0..dim {
                            gx[base + d] += yv[base + d] * (g[base + d] - s);
                        }
                    }
                }
            }
            Op::Mean(x) => {
                if self.nodes[x].requires_grad {
                    let n = self.nodes[x].value.numel() as f64;
                    let s = g[0] / n;
                    for d in self.grad_buf(x).iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::Sum(x) => {
                if self.nodes[x].requires_grad {
                    let s = g[0];
                    for d in self.grad_buf(x).iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::SumSq(x) => {
                if self.nodes[x].requires_grad {
                    let s = 2.0 * g[0];
                    let xv = self.nodes[x].value.data().to_vec();
                    for (d, v) in self.grad_buf(x).iter_mut().zip(&xv) {
                        *d += s * v;
                    }
                }
            }
            Op::Reshape(x) => {
                if self.nodes[x].requires_grad {
                    accumulate(self.grad_buf(x), &g);
                }
            }
            Op::Permute { x, axes } => {
                if self.nodes[x].requires_grad {
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    let out_shape: Vec<usize> = {
                        let xs = self.nodes[x].value.shape();
                        axes.iter().map(|&a| xs[a]).collect()
                    };
                    let gperm = permute_data(&g, &out_shape, &inv);
                    accumulate(self.grad_buf(x), &gperm);
                }
            }
            Op::GatherRows {
                table,
                indices,
                width,
            } => {
                if self.nodes[table].requires_grad {
                    let gt = self.grad_buf(table);
                    for (p, &i) in indices.iter().enumerate() {
                        for d in 0..width {
                            gt[i * width + d] += g[p * width + d];
                        }
                    }
                }
            }
            Op::StopGradient => {}
            Op::StraightThrough { grad_to } => {
                if self.nodes[grad_to].requires_grad {
                    accumulate(self.grad_buf(grad_to), &g);
                }
            }
            Op::CrossEntropySum {
                logits,
                targets,
                probs,
            } => {
                if self.nodes[logits].requires_grad {
                    let l = probs.len() / targets.len();
                    let s = g[0];
                    let gl = self.grad_buf(logits);
                    for (r, &t) in targets.iter().enumerate() {
                        for d in 0..l {
                            let one = if d == t { 1.0 } else { 0.0 };
                            gl[r * l + d] += s * (probs[r * l + d] - one);
                        }
                    }
                }
            }
        }
        self.nodes[id].grad = Some(g);
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn normalize_chw(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Some((*c, *h, *w)),
        [1, c, h, w] => Some((*c, *h, *w)),
        _ => None,
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    if rank == 0 {
        return data.to_vec();
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = data[src];
        // odometer increment over out coordinates
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += mapped[d];
            if coords[d] < out_shape[d] {
                break;
            }
            src -= mapped[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    out
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Neg(..) => "neg",
        Op::Scale(..) => "scale",
        Op::AddRowVec { .. } => "add_rowvec",
        Op::Matmul { .. } => "matmul",
        Op::BatchMatmul { .. } => "batch_matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv2d_transpose",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::Gelu(..) => "gelu",
        Op::Tanh(..) => "tanh",
        Op::Softplus(..) => "softplus",
        Op::Abs(..) => "abs",
        Op::Log(..) => "log",
        Op::GroupNorm { .. } => "group_norm",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax { .. } => "softmax",
        Op::Mean(..) => "mean",
        Op::Sum(..) => "sum",
        Op::SumSq(..) => "sum_sq",
        Op::Reshape(..) => "reshape",
        Op::Permute { .. } => "permute",
        Op::GatherRows { .. } => "gather_rows",
        Op::StopGradient => "stop_gradient",
        Op::StraightThrough { .. } => "straight_through",
        Op::CrossEntropySum { .. } => "cross_entropy_sum",
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softplus_fwd(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        // f(x) = x*x at x=3 -> df/dx = 6
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn stop_gradient_blocks_one_path() {
        // f(x) = sg(x)*x at x=3 -> df/dx = 3
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let sg = g.stop_gradient(x).unwrap();
        let y = g.mul(sg, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn stop_gradient_forward_is_identity_and_grad_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.5, -2.0, 0.25]), true);
        let sg = g.stop_gradient(x).unwrap();
        assert_eq!(g.value(sg).data(), g.value(x).data());
        let loss = g.sum(sg).unwrap();
        // x requires grad but the loss is fully detached.
        assert!(matches!(g.backward(loss), Err(TensorError::DetachedLoss)));
    }

    #[test]
    fn d_sum_sg_x_is_zero_when_other_paths_exist() {
        // loss = sum(sg(x)) + 0*sum(x): gradient through sg is exactly zero
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let sg = g.stop_gradient(x).unwrap();
        let a = g.sum(sg).unwrap();
        let b = g.sum(x).unwrap();
        let b0 = g.scale(b, 0.0).unwrap();
        let loss = g.add(a, b0).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn straight_through_routes_gradient() {
        let mut g = Graph::new();
        let zh = g.leaf(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]), true);
        let zc = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let st = g.straight_through(zh, zc).unwrap();
        // forward equals zc bit-exactly
        assert_eq!(g.value(st).data(), g.value(zc).data());
        let loss = g.sum(st).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(zh).unwrap(), &[1.0; 4]);
        assert!(g.grad(zc).is_none());
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 1.0]), false);
        let y = g.softmax(x).unwrap();
        for r in 0..2 {
            let row = &g.value(y).data()[r * 4..(r + 1) * 4];
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_twice_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::BackwardAlreadyRun)));
    }

    #[test]
    fn backward_without_grads_is_noop() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), false);
        let y = g.sum(x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(
            g.backward(y),
            Err(TensorError::NonScalarLoss { numel: 2 })
        ));
    }

    #[test]
    fn nonfinite_forward_surfaces() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[-1.0]), true);
        assert!(matches!(g.log(x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn nonfinite_adjoint_surfaces() {
        // log near zero keeps the forward finite, but d/dx = 1/x overflows
        // once the upstream adjoint is scaled up
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[1e-300]), true);
        let y = g.log(x).unwrap();
        let s = g.sum(y).unwrap();
        let loss = g.scale(s, 1e10).unwrap();
        let err = g.backward(loss).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn matmul_known_values() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let b = g.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]), true);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let loss = g.sum(c).unwrap();
        g.backward(loss).unwrap();
        // dA = 1 . B^T, dB = A^T . 1
        assert_eq!(g.grad(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.grad(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3, 4], &(0..24).map(|i| i as f64).collect::<Vec<_>>()), false);
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.value(p).shape(), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn gather_rows_and_scatter_grad() {
        let mut g = Graph::new();
        let table = g.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let rows = g.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(rows).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = g.sum(rows).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn gather_rows_out_of_range() {
        let mut g = Graph::new();
        let table = g.leaf(t(&[2, 2], &[0.0; 4]), false);
        assert!(matches!(
            g.gather_rows(table, &[0, 2]),
            Err(TensorError::IndexOutOfRange { index: 2, len: 2 })
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_l() {
        let mut g = Graph::new();
        let logits = g.leaf(t(&[2, 8], &[0.25; 16]), false);
        let ce = g.cross_entropy_sum(logits, &[3, 7]).unwrap();
        assert!((g.value(ce).item() - 2.0 * (8.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_grad_is_probs_minus_onehot() {
        let mut g = Graph::new();
        let logits = g.leaf(t(&[1, 3], &[0.2, -0.4, 1.1]), true);
        let ce = g.cross_entropy_sum(logits, &[2]).unwrap();
        g.backward(ce).unwrap();
        // independent softmax computation
        let x = [0.2f64, -0.4, 1.1];
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        let probs: Vec<f64> = x.iter().map(|v| v.exp() / z).collect();
        let grad = g.grad(logits).unwrap();
        for i in 0..3 {
            let expect = probs[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((grad[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 3, 3], &(1..=9).map(|i| i as f64).collect::<Vec<_>>()), false);
        // 1x1 kernel with weight 2.0
        let w = g.leaf(t(&[1, 1, 1, 1], &[2.0]), false);
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 3]);
        let expect: Vec<f64> = (1..=9).map(|i| 2.0 * i as f64).collect();
        assert_eq!(g.value(y).data(), expect.as_slice());
    }

    #[test]
    fn conv_transpose_doubles_spatial_size() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 4, 4]), false);
        let w = g.leaf(Tensor::zeros(&[2, 3, 4, 4]), false);
        let y = g.conv2d_transpose(x, w, None, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 8, 8]);
    }

    #[test]
    fn detached_loss_with_live_params_errors() {
        let mut g = Graph::new();
        let _p = g.leaf(Tensor::scalar(1.0), true);
        let x = g.leaf(Tensor::scalar(2.0), false);
        let y = g.mul(x, x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::DetachedLoss)));
    }
}
