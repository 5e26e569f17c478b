//! Seeded toy noise-prediction network.
//!
//! Each of the `L` layers is a shared-attention update followed by a
//! constant-context mixing update, both residual:
//!
//! ```text
//! Q, K, V = O Wq, O Wk, O Wv
//! O = O + SharedAttention(Q, K, V; mask_l)
//! O = O + c Wc            (c: the fixed conditioning vector)
//! ```
//!
//! Queries and keys are computed from the layer input plus a fixed position
//! code, with tied weights and per-head normalization, so attention is a
//! sharp match on content and location. A token whose exact copy is present
//! among the keys attends almost entirely to that copy.
//!
//! The context term is what cross-attention over a single context token
//! reduces to: one key means softmax weight 1, so the update is the
//! projected context value broadcast to every token.
//!
//! As a score model the network perturbs the optimal predictor for Gaussian
//! data of variance `v`:
//!
//! ```text
//! ε̂(x, t) = σ (x + κ a R(x)) / (a² v + σ²),   R(x) = forward(x) − x
//! ```
//!
//! The `a` factor keeps the implied data prediction bounded at the noise end
//! and `σ` makes the prediction vanish at the data end.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_head_self_attention, shared_attention, AttentionProjections, SimilarityMask};
use crate::error::{Error, Result};
use crate::solver::{ScoreModel, StepContext};
use crate::tensor::{block_concat, block_split, matmul, BlockIndex, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub layer_count: usize,
    /// Feature width `d`.
    pub width: usize,
    pub head_count: usize,
    /// Tokens per image, `m`.
    pub tokens: usize,
    pub seed: u64,
    /// Conditioning vector of width `d`.
    pub context: Vec<f64>,
    /// Standard deviation of query/key weights, times `√d`.
    pub qk_gain: f64,
    /// Standard deviation of value weights, times `√d`.
    pub value_gain: f64,
    /// Standard deviation of context weights, times `√d`.
    pub context_gain: f64,
    /// When set, per-head query and key rows are normalized so every logit
    /// is this temperature times a cosine similarity.
    pub qk_temperature: Option<f64>,
    /// Scale of the 2D sinusoidal position code added to query and key
    /// inputs; tokens are taken as a row-major square grid.
    pub position_gain: f64,
    /// Use the query weights as key weights.
    pub tied_qk: bool,
    /// Prior variance `v` of token coordinates.
    pub data_variance: f64,
    /// Scale `κ` of the network residual in the noise prediction.
    pub residual_gain: f64,
}

impl DenoiserConfig {
    pub const DEFAULT_LAYERS: usize = 16;
    pub const DEFAULT_WIDTH: usize = 16;
    pub const DEFAULT_HEADS: usize = 2;

    /// Defaults with a unit conditioning vector derived from `seed`.
    pub fn new(tokens: usize, seed: u64) -> Self {
        let width = Self::DEFAULT_WIDTH;
        Self {
            layer_count: Self::DEFAULT_LAYERS,
            width,
            head_count: Self::DEFAULT_HEADS,
            tokens,
            seed,
            context: default_context(width, seed),
            qk_gain: 1.5,
            value_gain: 0.25,
            context_gain: 0.02,
            qk_temperature: Some(1000.0),
            position_gain: 2.0,
            tied_qk: true,
            data_variance: 0.25,
            residual_gain: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_count == 0 {
            return Err(Error::Config("layer_count must be at least 1".into()));
        }
        if self.width == 0 || self.head_count == 0 || !self.width.is_multiple_of(self.head_count) {
            return Err(Error::Config(format!(
                "width {} must split evenly into {} heads",
                self.width, self.head_count
            )));
        }
        if self.tokens == 0 {
            return Err(Error::Config("tokens per image must be positive".into()));
        }
        if self.context.len() != self.width {
            return Err(Error::Config(format!(
                "context has width {}, expected {}",
                self.context.len(),
                self.width
            )));
        }
        for (name, g) in [
            ("qk_gain", self.qk_gain),
            ("value_gain", self.value_gain),
            ("context_gain", self.context_gain),
            ("residual_gain", self.residual_gain),
        ] {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.data_variance.is_finite() && self.data_variance > 0.0) {
            return Err(Error::Config("data_variance must be positive".into()));
        }
        Ok(())
    }
}

fn default_context(width: usize, seed: u64) -> Vec<f64> {
    let c = Tensor::randn(&[width], seed ^ 0xC0_17E7);
    let n = c.norm();
    c.data().iter().map(|x| x / n).collect()
}

/// Half the features encode the column, half the row, as sin/cos pairs at
/// geometric frequencies.
fn position_code(tokens: usize, width: usize) -> Tensor {
    let side = (tokens as f64).sqrt().round() as usize;
    let side = if side * side == tokens { side } else { tokens };
    let half = width / 2;
    let pairs = (half / 2).max(1);
    let mut p = Tensor::zeros(&[tokens, width]);
    for i in 0..tokens {
        let (cx, cy) = ((i % side) as f64, (i / side) as f64);
        let row = p.row_mut(i);
        for f in 0..pairs {
            let w = std::f64::consts::PI / (side as f64) * 2f64.powi(f as i32);
            for (axis, c) in [(0, cx), (1, cy)] {
                let base = axis * half + 2 * f;
                if base + 1 < width {
                    row[base] = (w * c).sin();
                    row[base + 1] = (w * c).cos();
                }
            }
        }
    }
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// Context update `c·Wc`, added to every token.
    pub context_shift: Vec<f64>,
}

/// Called once per layer of a triplet forward with the projections the
/// shared attention is about to consume.
pub type LayerObserver<'a> = dyn FnMut(usize, &AttentionProjections, &SimilarityMask) -> Result<()> + 'a;

#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    config: DenoiserConfig,
    layers: Vec<LayerWeights>,
    /// `m × d`, all zeros when positions are off.
    positions: Tensor,
}

impl ToyDenoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale = 1.0 / (d as f64).sqrt();
        let layers = (0..config.layer_count)
            .map(|_| {
                let wq = Tensor::randn_with(&[d, d], &mut rng).scale(config.qk_gain * scale);
                let wk = Tensor::randn_with(&[d, d], &mut rng).scale(config.qk_gain * scale);
                let wk = if config.tied_qk { wq.clone() } else { wk };
                let wv = Tensor::randn_with(&[d, d], &mut rng).scale(config.value_gain * scale);
                let wc = Tensor::randn_with(&[d, d], &mut rng).scale(config.context_gain * scale);
                let ctx = Tensor::new(&[1, d], config.context.clone())?;
                let context_shift = matmul(&ctx, &wc)?.into_data();
                Ok(LayerWeights {
                    wq,
                    wk,
                    wv,
                    context_shift,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let positions = position_code(config.tokens, d).scale(config.position_gain);
        Ok(Self {
            config,
            layers,
            positions,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    fn check_input(&self, x: &Tensor, count: Option<usize>) -> Result<usize> {
        let m = self.config.tokens;
        if x.shape().len() != 2 || x.cols() != self.config.width || x.rows() == 0 || !x.rows().is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "denoiser expects k·{m} × {} tokens, got {:?}",
                self.config.width,
                x.shape()
            )));
        }
        let k = x.rows() / m;
        if let Some(c) = count {
            if c != k {
                return Err(Error::Shape(format!("expected {c} stacked images, got {k}")));
            }
        }
        Ok(k)
    }

    fn project(&self, o: &Tensor, layer: &LayerWeights) -> Result<(Tensor, Tensor, Tensor)> {
        let located;
        let qk_in = if self.config.position_gain == 0.0 {
            o
        } else {
            let m = self.config.tokens;
            let mut p = o.clone();
            for (i, row) in p.data_mut().chunks_mut(self.config.width).enumerate() {
                row.iter_mut().zip(self.positions.row(i % m)).for_each(|(x, y)| *x += y);
            }
            located = p;
            &located
        };
        let (mut q, mut k) = (matmul(qk_in, &layer.wq)?, matmul(qk_in, &layer.wk)?);
        if let Some(tau) = self.config.qk_temperature {
            let hw = self.config.width / self.config.head_count;
            // The attention divides by √hw; fold the rest into both sides.
            let target = (tau * (hw as f64).sqrt()).sqrt();
            for t in [&mut q, &mut k] {
                for chunk in t.data_mut().chunks_mut(hw) {
                    let n = chunk.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    chunk.iter_mut().for_each(|x| *x *= target / n);
                }
            }
        }
        Ok((q, k, matmul(o, &layer.wv)?))
    }

    /// Forward pass with every stacked image attending only to itself.
    pub fn forward_independent(&self, x: &Tensor) -> Result<Tensor> {
        let count = self.check_input(x, None)?;
        let block = BlockIndex::new(self.config.tokens, count)?;
        let heads = self.config.head_count;
        let mut o = x.clone();
        for layer in &self.layers {
            let (q, k, v) = self.project(&o, layer)?;
            let (qs, ks, vs) = (block_split(&q, block)?, block_split(&k, block)?, block_split(&v, block)?);
            let parts = (0..count)
                .map(|b| multi_head_self_attention(&qs[b], &ks[b], &vs[b], heads))
                .collect::<Result<Vec<_>>>()?;
            o.add_assign(&block_concat(&parts)?)?;
            o.add_row_vector(&layer.context_shift)?;
        }
        Ok(o)
    }

    /// Forward pass over a stacked `[fg; bg; comp]` triplet with one mask per
    /// layer.
    pub fn forward_triplet(
        &self,
        z: &Tensor,
        schedule: &[SimilarityMask],
        mut observer: Option<&mut LayerObserver<'_>>,
    ) -> Result<Tensor> {
        self.check_input(z, Some(3))?;
        if schedule.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "mask schedule has {} entries for {} layers",
                schedule.len(),
                self.layers.len()
            )));
        }
        let block = BlockIndex::triplet(self.config.tokens)?;
        let mut o = z.clone();
        for (l, (layer, mask)) in self.layers.iter().zip(schedule).enumerate() {
            let (q, k, v) = self.project(&o, layer)?;
            let proj = AttentionProjections::new(q, k, v, self.config.head_count, block)?;
            if let Some(obs) = observer.as_mut() {
                obs(l, &proj, mask)?;
            }
            o.add_assign(&shared_attention(&proj, mask)?)?;
            o.add_row_vector(&layer.context_shift)?;
        }
        Ok(o)
    }

    /// Turns a forward output for input `x` into the noise prediction at `at`.
    pub fn noise_prediction(&self, x: &Tensor, forward: &Tensor, at: &StepContext) -> Result<Tensor> {
        let (a, s) = (at.alpha, at.sigma);
        let c = &self.config;
        let k = c.residual_gain * a;
        let denom = a * a * c.data_variance + s * s;
        Ok(x.lincomb(1.0 - k, forward, k)?.scale(s / denom))
    }
}

/// Triplet forward with an explicit per-layer mask schedule.
pub fn toy_denoiser_forward(denoiser: &ToyDenoiser, z: &Tensor, schedule: &[SimilarityMask]) -> Result<Tensor> {
    denoiser.forward_triplet(z, schedule, None)
}

/// Noise prediction with every image attending only to itself.
impl ScoreModel for ToyDenoiser {
    fn predict(&self, x: &Tensor, at: &StepContext) -> Result<Tensor> {
        self.noise_prediction(x, &self.forward_independent(x)?, at)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Source;

    fn small(seed: u64) -> ToyDenoiser {
        let mut cfg = DenoiserConfig::new(6, seed);
        cfg.layer_count = 4;
        cfg.width = 8;
        cfg.context = default_context(8, seed);
        ToyDenoiser::new(cfg).unwrap()
    }

    #[test]
    fn weights_are_seed_determined() {
        let a = ToyDenoiser::new(DenoiserConfig::new(4, 11)).unwrap();
        let b = ToyDenoiser::new(DenoiserConfig::new(4, 11)).unwrap();
        let c = ToyDenoiser::new(DenoiserConfig::new(4, 12)).unwrap();
        assert_eq!(a.layers(), b.layers());
        assert_ne!(a.layers(), c.layers());
        assert_eq!(a.layers().len(), 16);
    }

    #[test]
    fn reconstruct_schedule_is_three_independent_forwards() {
        let net = small(1);
        let z = Tensor::randn(&[18, 8], 2);
        let sched = vec![SimilarityMask::RECONSTRUCT; 4];
        let joint = toy_denoiser_forward(&net, &z, &sched).unwrap();
        let parts = block_split(&z, BlockIndex::triplet(6).unwrap()).unwrap();
        let alone: Vec<Tensor> = parts.iter().map(|p| net.forward_independent(p).unwrap()).collect();
        assert!(joint.max_abs_diff(&block_concat(&alone).unwrap()).unwrap() <= 1e-9);
        assert_eq!(joint, net.forward_independent(&z).unwrap());
    }

    #[test]
    fn late_reweighting_touches_only_composite() {
        let net = small(3);
        let z = Tensor::randn(&[18, 8], 4);
        let plain = vec![SimilarityMask::RECONSTRUCT; 4];
        let mut gated = plain.clone();
        gated[3] = SimilarityMask::REWEIGHT;
        let a = toy_denoiser_forward(&net, &z, &plain).unwrap();
        let b = toy_denoiser_forward(&net, &z, &gated).unwrap();
        assert_eq!(a.slice_rows(0, 12).unwrap(), b.slice_rows(0, 12).unwrap());
        assert!(a.slice_rows(12, 18).unwrap().max_abs_diff(&b.slice_rows(12, 18).unwrap()).unwrap() > 0.0);
    }

    #[test]
    fn references_ignore_composite_under_any_schedule() {
        let net = small(5);
        let sched = vec![
            SimilarityMask::REWEIGHT,
            SimilarityMask::DISENTANGLE,
            crate::attention::build_mask(0.5, 1.5, 0.7).unwrap(),
            SimilarityMask::RECONSTRUCT,
        ];
        let z = Tensor::randn(&[18, 8], 6);
        let mut other = z.clone();
        for i in 12..18 {
            other.row_mut(i).iter_mut().for_each(|x| *x = *x * -3.0 + 1.0);
        }
        let a = toy_denoiser_forward(&net, &z, &sched).unwrap();
        let b = toy_denoiser_forward(&net, &other, &sched).unwrap();
        assert!(a.slice_rows(0, 12).unwrap().max_abs_diff(&b.slice_rows(0, 12).unwrap()).unwrap() <= 1e-9);
    }

    #[test]
    fn observer_sees_every_layer() {
        let net = small(7);
        let z = Tensor::randn(&[18, 8], 8);
        let mut seen = Vec::new();
        let mut obs = |l: usize, p: &AttentionProjections, m: &SimilarityMask| {
            assert_eq!(p.block.m, 6);
            seen.push((l, m.entry(Source::Composite, Source::Composite)));
            Ok(())
        };
        toy_denoiser_forward(&net, &z, &[SimilarityMask::RECONSTRUCT; 4]).unwrap();
        net.forward_triplet(&z, &[SimilarityMask::DISENTANGLE; 4], Some(&mut obs)).unwrap();
        assert_eq!(seen.len(), 4);
        assert!(seen.iter().all(|(_, e)| e.is_blocked()));
    }

    #[test]
    fn errors() {
        let net = small(9);
        assert!(net.forward_triplet(&Tensor::zeros(&[18, 8]), &[SimilarityMask::RECONSTRUCT; 3], None).is_err());
        assert!(net.forward_triplet(&Tensor::zeros(&[12, 8]), &[SimilarityMask::RECONSTRUCT; 4], None).is_err());
        assert!(net.forward_independent(&Tensor::zeros(&[7, 8])).is_err());
        let mut cfg = DenoiserConfig::new(4, 0);
        cfg.layer_count = 0;
        assert!(ToyDenoiser::new(cfg).is_err());
        let mut cfg = DenoiserConfig::new(4, 0);
        cfg.head_count = 3;
        assert!(ToyDenoiser::new(cfg).is_err());
    }
}
