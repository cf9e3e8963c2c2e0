//! Named parameter sets and a small layer-plan interpreter shared by the
//! convolutional networks (codec, discriminator, perceptual extractor, JSCC
//! baseline). The transformer builds its own graph in `v2it`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vqsc_tensor::{Graph, Tensor, Var};

use crate::VqscError;

/// Ordered, named parameter tensors. Order is the contract: optimizer state,
/// gradient collection, and checkpoints all use it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Insert every parameter as a graph leaf, in order.
    pub fn inject(&self, g: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|t| g.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Gradients for the injected vars, zeros where no gradient arrived.
    pub fn collect_grads(&self, g: &Graph, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .zip(&self.values)
            .map(|(&v, t)| g.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Overwrite values by name from a checkpoint map. Every parameter must
    /// be present with a matching shape.
    pub fn fill_from(
        &mut self,
        lookup: &mut impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<(), VqscError> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let t = lookup(name).ok_or_else(|| {
                VqscError::Checkpoint(format!("missing parameter record \"{name}\""))
            })?;
            if t.shape() != value.shape() {
                return Err(VqscError::Checkpoint(format!(
                    "parameter \"{name}\": checkpoint shape {:?} vs expected {:?}",
                    t.shape(),
                    value.shape()
                )));
            }
            *value = t;
        }
        Ok(())
    }

    /// Order-sensitive content fingerprint (FNV over the raw bits); used by
    /// freeze-contract tests and run-reproducibility checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, value) in self.iter() {
            eat(name.as_bytes());
            for v in value.data() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

/// Standard normal via Box-Muller; deterministic given the rng.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn randn_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| std * randn(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data consistent")
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data consistent")
}

/// One step of a sequential conv stack. Indices refer to the owning
/// [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub enum PlanOp {
    Conv {
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose {
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        gamma: usize,
        beta: usize,
        groups: usize,
    },
    LeakyRelu(f64),
    Tanh,
}

/// Run a plan over an input var using the previously injected param vars.
pub fn run_plan(
    g: &mut Graph,
    mut x: Var,
    plan: &[PlanOp],
    vars: &[Var],
) -> Result<Var, VqscError> {
    for op in plan {
        x = match *op {
            PlanOp::Conv { w, b, stride, pad } => {
                g.conv2d(x, vars[w], Some(vars[b]), stride, pad)?
            }
            PlanOp::ConvTranspose { w, b, stride, pad } => {
                g.conv2d_transpose(x, vars[w], Some(vars[b]), stride, pad)?
            }
            PlanOp::GroupNorm { gamma, beta, groups } => {
                g.group_norm(x, vars[gamma], vars[beta], groups, 1e-5)?
            }
            PlanOp::LeakyRelu(slope) => g.leaky_relu(x, slope)?,
            PlanOp::Tanh => g.tanh(x)?,
        };
    }
    Ok(x)
}

/// Builder for conv stacks: pushes He-initialized parameters into a
/// [`ParamSet`] and records the matching [`PlanOp`]s.
pub struct StackBuilder<'a> {
    pub params: &'a mut ParamSet,
    pub plan: Vec<PlanOp>,
    pub prefix: String,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> StackBuilder<'a> {
    pub fn new(params: &'a mut ParamSet, prefix: impl Into<String>, rng: &'a mut ChaCha8Rng) -> Self {
        StackBuilder {
            params,
            plan: Vec::new(),
            prefix: prefix.into(),
            rng,
        }
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) {
        let fan_in = (cin * k * k) as f64;
        let w = randn_tensor(&[cout, cin, k, k], (2.0 / fan_in).sqrt(), self.rng);
        let wi = self.params.push(format!("{}/{name}/w", self.prefix), w);
        let bi = self
            .params
            .push(format!("{}/{name}/b", self.prefix), Tensor::zeros(&[cout]));
        self.plan.push(PlanOp::Conv {
            w: wi,
            b: bi,
            stride,
            pad,
        });
    }

    pub fn conv_transpose(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) {
        let fan_in = (cin * k * k) as f64;
        let w = randn_tensor(&[cin, cout, k, k], (2.0 / fan_in).sqrt(), self.rng);
        let wi = self.params.push(format!("{}/{name}/w", self.prefix), w);
        let bi = self
            .params
            .push(format!("{}/{name}/b", self.prefix), Tensor::zeros(&[cout]));
        self.plan.push(PlanOp::ConvTranspose {
            w: wi,
            b: bi,
            stride,
            pad,
        });
    }

    pub fn group_norm(&mut self, name: &str, channels: usize, groups: usize) {
        let gi = self.params.push(
            format!("{}/{name}/gamma", self.prefix),
            Tensor::full(&[channels], 1.0),
        );
        let bi = self.params.push(
            format!("{}/{name}/beta", self.prefix),
            Tensor::zeros(&[channels]),
        );
        self.plan.push(PlanOp::GroupNorm {
            gamma: gi,
            beta: bi,
            groups,
        });
    }

    pub fn leaky_relu(&mut self, slope: f64) {
        self.plan.push(PlanOp::LeakyRelu(slope));
    }

    pub fn tanh(&mut self) {
        self.plan.push(PlanOp::Tanh);
    }
}
