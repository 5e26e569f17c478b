//! Content/style metrics over a pluggable embedder and the range-based sweep
//! report.
//!
//! | metric   | definition                                                |
//! |----------|-----------------------------------------------------------|
//! | `lp_bg`  | `distance(out ∖ region, comp ∖ region)`                   |
//! | `lp_fg`  | `distance(out[bbox], comp[bbox])`                         |
//! | `cp_img` | `100·cos(E(out), E(comp))`                                |
//! | `cp_st`  | `100·cos(E(out), E(bg))`                                  |
//! | `cp_dir` | `100·cos(E(out[bbox]) − E(comp[bbox]), E(bg) − E(fg))`    |
//!
//! Regions are removed by zeroing their pixels in both images; cosine with a
//! zero vector is 0.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::pipeline::{CompositeInput, Harmonizer, Inverted, PipelineConfig, RegionMask, ShareMode};
use crate::tensor::Tensor;

pub trait Embedder: Sync {
    /// Unit-norm feature vector, or all zeros for a featureless input.
    fn embed(&self, img: &Image) -> Result<Vec<f64>>;

    /// Nonnegative, symmetric, zero on identical inputs.
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

/// Channel-major feature map.
#[derive(Clone, Debug)]
struct FeatureMap {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    fn from_image(img: &Image) -> Self {
        let (w, h) = (img.width(), img.height());
        let mut data = vec![0.0; CHANNELS * w * h];
        for y in 0..h {
            for x in 0..w {
                for (c, v) in img.pixel(x, y).iter().enumerate() {
                    data[(c * h + y) * w + x] = 2.0 * v - 1.0;
                }
            }
        }
        Self {
            channels: CHANNELS,
            width: w,
            height: h,
            data,
        }
    }

    fn at(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Per-position unit vectors across channels.
    fn normalized_columns(&self) -> Vec<Vec<f64>> {
        (0..self.width * self.height)
            .map(|p| {
                let col: Vec<f64> = (0..self.channels)
                    .map(|c| self.data[c * self.width * self.height + p])
                    .collect();
                let n = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    col.iter().map(|v| v / n).collect()
                } else {
                    col
                }
            })
            .collect()
    }

    fn mean_per_channel(&self) -> Vec<f64> {
        let area = (self.width * self.height) as f64;
        self.data
            .chunks_exact(self.width * self.height)
            .map(|c| c.iter().sum::<f64>() / area)
            .collect()
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    /// `out × in × 3 × 3`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvLayer {
    fn random(in_channels: usize, out_channels: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (9 * in_channels) as f64;
        let weights = Tensor::randn_with(&[out_channels * in_channels * 9], rng)
            .scale(1.5 / fan_in.sqrt())
            .into_data();
        let bias = Tensor::randn_with(&[out_channels], rng).scale(0.1).into_data();
        Self {
            in_channels,
            out_channels,
            stride,
            weights,
            bias,
        }
    }

    /// 3×3 convolution with zero padding, then `tanh`.
    fn apply(&self, input: &FeatureMap) -> FeatureMap {
        let (w, h) = (input.width.div_ceil(self.stride), input.height.div_ceil(self.stride));
        let mut data = vec![0.0; self.out_channels * w * h];
        for o in 0..self.out_channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_channels {
                        let kernel = &self.weights[(o * self.in_channels + i) * 9..][..9];
                        for ky in 0..3 {
                            let sy = (y * self.stride + ky) as isize - 1;
                            if sy < 0 || sy >= input.height as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = (x * self.stride + kx) as isize - 1;
                                if sx < 0 || sx >= input.width as isize {
                                    continue;
                                }
                                acc += kernel[ky * 3 + kx] * input.at(i, sx as usize, sy as usize);
                            }
                        }
                    }
                    data[(o * h + y) * w + x] = acc.tanh();
                }
            }
        }
        FeatureMap {
            channels: self.out_channels,
            width: w,
            height: h,
            data,
        }
    }
}

/// Three seeded random convolutions (3→8→16→32 channels, strides 1, 2, 2)
/// with `tanh`. The embedding is the L2-normalized global average of the last
/// map; the distance averages, over layers, the mean squared difference of
/// channel-normalized feature columns.
#[derive(Clone, Debug)]
pub struct RandomConvEmbedder {
    seed: u64,
    layers: Vec<ConvLayer>,
}

impl RandomConvEmbedder {
    pub const DEFAULT_SEED: u64 = 0x5EED;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = [(3, 8, 1), (8, 16, 2), (16, 32, 2)]
            .into_iter()
            .map(|(i, o, s)| ConvLayer::random(i, o, s, &mut rng))
            .collect();
        Self { seed, layers }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn features(&self, img: &Image) -> Vec<FeatureMap> {
        let mut maps = Vec::with_capacity(self.layers.len());
        let mut cur = FeatureMap::from_image(img);
        for layer in &self.layers {
            cur = layer.apply(&cur);
            maps.push(cur.clone());
        }
        maps
    }
}

impl Default for RandomConvEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

impl Embedder for RandomConvEmbedder {
    fn embed(&self, img: &Image) -> Result<Vec<f64>> {
        let last = self.features(img).pop().ok_or_else(|| Error::Config("embedder has no layers".into()))?;
        let mut v = last.mean_per_channel();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        Ok(v)
    }

    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        if (a.width(), a.height()) != (b.width(), b.height()) {
            return Err(Error::Image(format!(
                "distance between {}x{} and {}x{} images",
                a.width(),
                a.height(),
                b.width(),
                b.height()
            )));
        }
        let (fa, fb) = (self.features(a), self.features(b));
        let mut total = 0.0;
        for (ma, mb) in fa.iter().zip(&fb) {
            let (ca, cb) = (ma.normalized_columns(), mb.normalized_columns());
            let sum: f64 = ca
                .iter()
                .zip(&cb)
                .map(|(u, v)| u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .sum();
            total += sum / ca.len() as f64;
        }
        Ok(total / fa.len() as f64)
    }
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub lp_bg: f64,
    pub lp_fg: f64,
    pub cp_img: f64,
    pub cp_st: f64,
    pub cp_dir: f64,
}

impl MetricValues {
    pub const NAMES: [&'static str; 5] = ["lp_bg", "lp_fg", "cp_img", "cp_st", "cp_dir"];

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "lp_bg" => self.lp_bg,
            "lp_fg" => self.lp_fg,
            "cp_img" => self.cp_img,
            "cp_st" => self.cp_st,
            "cp_dir" => self.cp_dir,
            _ => return None,
        })
    }

    pub fn values(&self) -> [f64; 5] {
        [self.lp_bg, self.lp_fg, self.cp_img, self.cp_st, self.cp_dir]
    }
}

fn without_region(img: &Image, region: &RegionMask) -> Image {
    Image::from_fn(img.width(), img.height(), |x, y| {
        if region.contains(x, y) {
            [0.0; 3]
        } else {
            img.pixel(x, y)
        }
    })
}

pub fn compute_metrics(
    fg: &Image,
    bg: &Image,
    comp: &Image,
    out: &Image,
    region: &RegionMask,
    emb: &dyn Embedder,
) -> Result<MetricValues> {
    let size = (out.width(), out.height());
    for (name, img) in [("fg", fg), ("bg", bg), ("comp", comp)] {
        if (img.width(), img.height()) != size {
            return Err(Error::Image(format!("{name} size differs from output")));
        }
    }
    if (region.pixels.width(), region.pixels.height()) != size {
        return Err(Error::Region("region size differs from images".into()));
    }
    let count = region.pixel_count();
    if count == 0 || count == size.0 * size.1 {
        return Err(Error::Region("degenerate region".into()));
    }
    let lp_bg = emb.distance(&without_region(out, region), &without_region(comp, region))?;
    let (out_crop, comp_crop) = (out.crop(&region.bbox)?, comp.crop(&region.bbox)?);
    let lp_fg = emb.distance(&out_crop, &comp_crop)?;
    let (e_out, e_comp, e_bg, e_fg) = (emb.embed(out)?, emb.embed(comp)?, emb.embed(bg)?, emb.embed(fg)?);
    let (e_out_r, e_comp_r) = (emb.embed(&out_crop)?, emb.embed(&comp_crop)?);
    let shift: Vec<f64> = e_out_r.iter().zip(&e_comp_r).map(|(a, b)| a - b).collect();
    let style: Vec<f64> = e_bg.iter().zip(&e_fg).map(|(a, b)| a - b).collect();
    Ok(MetricValues {
        lp_bg,
        lp_fg,
        cp_img: 100.0 * cosine(&e_out, &e_comp),
        cp_st: 100.0 * cosine(&e_out, &e_bg),
        cp_dir: 100.0 * cosine(&shift, &style),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome {
    Ok { metrics: MetricValues },
    Error { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Position in the manifest.
    pub config: usize,
    #[serde(flatten)]
    pub outcome: RunOutcome,
}

impl RunRecord {
    pub fn metrics(&self) -> Option<&MetricValues> {
        match &self.outcome {
            RunOutcome::Ok { metrics } => Some(metrics),
            RunOutcome::Error { .. } => None,
        }
    }
}

/// Extremes of one metric over the successful runs, with the manifest
/// positions that attain them (first on ties).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub lower: f64,
    pub upper: f64,
    pub lower_config: usize,
    pub upper_config: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub manifest: Vec<PipelineConfig>,
    pub records: Vec<RunRecord>,
    /// Keyed by metric name; empty when no run succeeded.
    pub bounds: std::collections::BTreeMap<String, Bound>,
}

impl MetricReport {
    pub const VERSION: u32 = 1;

    pub fn new(manifest: Vec<PipelineConfig>, records: Vec<RunRecord>) -> Self {
        let mut bounds = std::collections::BTreeMap::new();
        for name in MetricValues::NAMES {
            let mut b: Option<Bound> = None;
            for r in &records {
                let Some(v) = r.metrics().and_then(|m| m.get(name)) else {
                    continue;
                };
                let cur = b.get_or_insert(Bound {
                    lower: v,
                    upper: v,
                    lower_config: r.config,
                    upper_config: r.config,
                });
                if v < cur.lower {
                    cur.lower = v;
                    cur.lower_config = r.config;
                }
                if v > cur.upper {
                    cur.upper = v;
                    cur.upper_config = r.config;
                }
            }
            if let Some(b) = b {
                bounds.insert(name.to_string(), b);
            }
        }
        Self {
            version: Self::VERSION,
            manifest,
            records,
            bounds,
        }
    }

    pub fn succeeded(&self) -> usize {
        self.records.iter().filter(|r| r.metrics().is_some()).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Images shared by every run of a sweep.
#[derive(Clone, Debug)]
pub struct SweepInputs {
    pub fg: Image,
    pub bg: Image,
    /// Must be a paste so the region is known.
    pub composite: CompositeInput,
}

/// A sweep report plus each run's output image (`None` for failed runs).
#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub report: MetricReport,
    pub outputs: Vec<Option<Image>>,
}

type InversionKey = (usize, u64, usize);

fn inversion_key(c: &PipelineConfig) -> InversionKey {
    (c.steps, c.seed, c.image_size)
}

/// Runs every configuration, reusing one inversion per (steps, seed, size).
/// Failed runs are recorded and the others continue.
pub fn run_sweep(inputs: &SweepInputs, configs: &[PipelineConfig], emb: &dyn Embedder) -> Result<SweepOutcome> {
    if configs.len() < 2 {
        return Err(Error::Config(format!("a sweep needs at least 2 configs, got {}", configs.len())));
    }
    if !matches!(inputs.composite, CompositeInput::Paste { .. }) {
        return Err(Error::Config("sweep metrics need a pasted composite with a known region".into()));
    }
    let mut keys: Vec<(InversionKey, &PipelineConfig)> = Vec::new();
    for c in configs.iter().filter(|c| c.validate().is_ok()) {
        if !keys.iter().any(|(k, _)| *k == inversion_key(c)) {
            keys.push((inversion_key(c), c));
        }
    }
    let inverted: HashMap<InversionKey, std::result::Result<(Harmonizer, Inverted), String>> = keys
        .par_iter()
        .map(|(key, cfg)| {
            let run = || -> Result<(Harmonizer, Inverted)> {
                let h = Harmonizer::new((*cfg).clone())?;
                let inv = h.invert(&inputs.fg, &inputs.bg, &inputs.composite)?;
                Ok((h, inv))
            };
            (*key, run().map_err(|e| e.to_string()))
        })
        .collect();
    let runs: Vec<(RunRecord, Option<Image>)> = configs
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let run = || -> std::result::Result<(MetricValues, Image), String> {
                cfg.validate().map_err(|e| e.to_string())?;
                let (h, inv) = inverted
                    .get(&inversion_key(cfg))
                    .ok_or("missing inversion")?
                    .as_ref()
                    .map_err(Clone::clone)?;
                let out = h
                    .sample(inv, ShareMode::Gated(cfg.gate()), None)
                    .map_err(|e| e.to_string())?;
                let region = inv.latents.region.as_ref().ok_or("composite has no region")?;
                let m = compute_metrics(&inv.fg, &inv.bg, &inv.composite, &out.output, region, emb)
                    .map_err(|e| e.to_string())?;
                Ok((m, out.output))
            };
            match run() {
                Ok((metrics, img)) => (
                    RunRecord {
                        config: i,
                        outcome: RunOutcome::Ok { metrics },
                    },
                    Some(img),
                ),
                Err(message) => (
                    RunRecord {
                        config: i,
                        outcome: RunOutcome::Error { message },
                    },
                    None,
                ),
            }
        })
        .collect();
    let (records, outputs) = runs.into_iter().unzip();
    Ok(SweepOutcome {
        report: MetricReport::new(configs.to_vec(), records),
        outputs,
    })
}

pub fn range_sweep(inputs: &SweepInputs, configs: &[PipelineConfig], emb: &dyn Embedder) -> Result<MetricReport> {
    Ok(run_sweep(inputs, configs, emb)?.report)
}
