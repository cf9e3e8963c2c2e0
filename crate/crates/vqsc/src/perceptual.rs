//! Fixed random-feature extractor standing in for a pretrained network.
//!
//! A small strided conv stack whose weights are seeded once and never
//! trained. Training's feature-space loss and the evaluation-side perceptual
//! distance both run through it, with different fixed seeds so scores stay
//! comparable across runs without the metric sharing the training features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqsc_tensor::{Graph, Tensor, Var};

use crate::nn::{ParamSet, PlanOp, StackBuilder, run_plan};
use crate::VqscError;

/// Seed of the extractor used inside the training objective.
pub const PHI_TRAIN_SEED: u64 = 0x5EED_F00D;
/// Canonical seed of the evaluation metric's extractor; a fixed constant so
/// reported distances are comparable across runs and machines.
pub const PHI_METRIC_SEED: u64 = 0x0A11_CE77;

/// Channel widths of the three tap stages.
const TAP_WIDTHS: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    params: ParamSet,
    stages: Vec<Vec<PlanOp>>,
    seed: u64,
}

impl PerceptualExtractor {
    /// Build from a seed; weights are immutable afterwards.
    pub fn new(seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &w) in TAP_WIDTHS.iter().enumerate() {
            let mut b = StackBuilder::new(&mut params, "phi", &mut rng);
            b.conv(&format!("s{i}"), cin, w, 3, 2, 1);
            b.leaky_relu(0.1);
            stages.push(b.plan);
            cin = w;
        }
        PerceptualExtractor {
            params,
            stages,
            seed,
        }
    }

    /// The metric-side reference extractor.
    pub fn metric_reference() -> Self {
        Self::new(PHI_METRIC_SEED)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn inject(&self, g: &mut Graph) -> Vec<Var> {
        // taps are never trained
        self.params.inject(g, false)
    }

    /// Feature taps after each stage, differentiable w.r.t. the input image.
    pub fn taps_graph(
        &self,
        g: &mut Graph,
        img: Var,
        vars: &[Var],
    ) -> Result<Vec<Var>, VqscError> {
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut x = img;
        for stage in &self.stages {
            x = run_plan(g, x, stage, vars)?;
            taps.push(x);
        }
        Ok(taps)
    }

    /// Forward-only tap values for an image tensor.
    pub fn taps(&self, img: &Tensor) -> Result<Vec<Tensor>, VqscError> {
        let mut g = Graph::new();
        let vars = self.inject(&mut g);
        let iv = g.constant(img.clone());
        let tap_vars = self.taps_graph(&mut g, iv, &vars)?;
        Ok(tap_vars.into_iter().map(|v| g.value(v).clone()).collect())
    }
}
