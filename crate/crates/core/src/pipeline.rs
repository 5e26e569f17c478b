//! Composite construction, joint inversion and gated shared-attention
//! sampling of a `[fg; bg; comp]` triplet.

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_diagnostics, AttentionDiagnostics, AttentionProjections, MaskEntry, SimilarityMask};
use crate::denoiser::{DenoiserConfig, ToyDenoiser};
use crate::error::{Error, Result};
use crate::image::{BBox, BinaryMask, Image, CHANNELS};
use crate::solver::{dpm_invert, dpm_sample, NoiseSchedule, ScoreModel, StepContext};
use crate::tensor::{block_concat, block_split, matmul, BlockIndex, Tensor};

/// Side length of the square pixel patch that becomes one token.
pub const PATCH: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskPreset {
    StyleTransfer,
    ObjectSwap,
    ObjectInsert,
}

impl TaskPreset {
    pub const ALL: [TaskPreset; 3] = [TaskPreset::StyleTransfer, TaskPreset::ObjectSwap, TaskPreset::ObjectInsert];

    pub fn t_share(self) -> usize {
        match self {
            TaskPreset::StyleTransfer => 25,
            TaskPreset::ObjectSwap => 20,
            TaskPreset::ObjectInsert => 15,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskPreset::StyleTransfer => "style_transfer",
            TaskPreset::ObjectSwap => "object_swap",
            TaskPreset::ObjectInsert => "object_insert",
        }
    }
}

impl fmt::Display for TaskPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        TaskPreset::ALL
            .into_iter()
            .find(|p| p.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?} (style_transfer, object_swap, object_insert)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub preset: TaskPreset,
    pub t_share: usize,
    pub l_share: usize,
    pub alpha: MaskEntry,
    pub beta: MaskEntry,
    pub steps: usize,
    pub seed: u64,
    pub image_size: usize,
}

impl PipelineConfig {
    pub const DEFAULT_L_SHARE: usize = 14;
    pub const DEFAULT_SIZE: usize = 32;
    pub const DEFAULT_SEED: u64 = 0;

    pub fn from_preset(preset: TaskPreset) -> Self {
        Self {
            preset,
            t_share: preset.t_share(),
            l_share: Self::DEFAULT_L_SHARE,
            alpha: SimilarityMask::REWEIGHT.alpha(),
            beta: SimilarityMask::REWEIGHT.beta(),
            steps: NoiseSchedule::DEFAULT_STEPS,
            seed: Self::DEFAULT_SEED,
            image_size: Self::DEFAULT_SIZE,
        }
    }

    pub fn layer_count(&self) -> usize {
        DenoiserConfig::DEFAULT_LAYERS
    }

    /// Checks the parts needed to invert and sample a single image.
    pub fn validate_solver(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(PATCH) {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of {PATCH}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_solver()?;
        if self.t_share > self.steps {
            return Err(Error::Config(format!(
                "t_share {} exceeds step count {}",
                self.t_share, self.steps
            )));
        }
        if self.l_share > self.layer_count() {
            return Err(Error::Config(format!(
                "l_share {} exceeds layer count {}",
                self.l_share,
                self.layer_count()
            )));
        }
        for (name, e) in [("alpha", self.alpha), ("beta", self.beta)] {
            if let MaskEntry::Weight(w) = e {
                if !(w.is_finite() && w > 0.0) {
                    return Err(Error::InvalidEntry(format!("{name} must be positive or -inf, got {w}")));
                }
            }
        }
        SimilarityMask::reweight(self.alpha, self.beta)?;
        Ok(())
    }

    pub fn gate(&self) -> ShareGate {
        ShareGate {
            t_share: self.t_share,
            l_share: self.l_share,
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::from_preset(TaskPreset::StyleTransfer)
    }
}

impl fmt::Display for PipelineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "preset={} alpha={} beta={} t_share={} l_share={} steps={} seed={} size={}",
            self.preset, self.alpha, self.beta, self.t_share, self.l_share, self.steps, self.seed, self.image_size
        )
    }
}

/// Decides the composite mask row per (timestep, layer): reweighted sharing
/// when `t < t_share` and `l > l_share`, independent reconstruction otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShareGate {
    pub t_share: usize,
    pub l_share: usize,
    pub alpha: MaskEntry,
    pub beta: MaskEntry,
}

impl ShareGate {
    /// A gate that never opens.
    pub fn closed() -> Self {
        Self {
            t_share: 0,
            l_share: 0,
            alpha: SimilarityMask::REWEIGHT.alpha(),
            beta: SimilarityMask::REWEIGHT.beta(),
        }
    }

    /// `t` is the sampling countdown, `layer` is zero-based.
    pub fn is_open(&self, t: usize, layer: usize) -> bool {
        t < self.t_share && layer > self.l_share
    }

    pub fn mask(&self, t: usize, layer: usize) -> Result<SimilarityMask> {
        if self.is_open(t, layer) {
            SimilarityMask::reweight(self.alpha, self.beta)
        } else {
            Ok(SimilarityMask::RECONSTRUCT)
        }
    }
}

/// How the composite row of the mask is chosen during sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShareMode {
    Gated(ShareGate),
    /// The same mask at every step and layer.
    Fixed(SimilarityMask),
}

impl ShareMode {
    pub fn mask(&self, t: usize, layer: usize) -> Result<SimilarityMask> {
        match self {
            ShareMode::Gated(g) => g.mask(t, layer),
            ShareMode::Fixed(m) => Ok(*m),
        }
    }

    pub fn schedule(&self, t: usize, layers: usize) -> Result<Vec<SimilarityMask>> {
        (0..layers).map(|l| self.mask(t, l)).collect()
    }
}

/// Attention statistics of one layer at one sampling step.
#[derive(Clone, Debug)]
pub struct LayerRecord {
    pub step: usize,
    pub countdown: usize,
    pub layer: usize,
    pub mask: SimilarityMask,
    pub diagnostics: AttentionDiagnostics,
}

/// Collects [`LayerRecord`]s, optionally for a subset of layers.
#[derive(Debug, Default)]
pub struct Recorder {
    layers: Option<Vec<usize>>,
    records: Mutex<Vec<LayerRecord>>,
}

impl Recorder {
    pub fn new(layers: Option<Vec<usize>>) -> Self {
        Self {
            layers,
            records: Mutex::new(Vec::new()),
        }
    }

    fn wants(&self, layer: usize) -> bool {
        self.layers.as_ref().is_none_or(|ls| ls.contains(&layer))
    }

    fn push(&self, record: LayerRecord) {
        self.records.lock().unwrap_or_else(|e| e.into_inner()).push(record);
    }

    pub fn into_records(self) -> Vec<LayerRecord> {
        self.records.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

/// Noise predictor over a stacked triplet with per-(step, layer) masks.
pub struct GatedTripletModel<'a> {
    denoiser: &'a ToyDenoiser,
    mode: ShareMode,
    recorder: Option<&'a Recorder>,
}

impl<'a> GatedTripletModel<'a> {
    pub fn new(denoiser: &'a ToyDenoiser, mode: ShareMode) -> Self {
        Self {
            denoiser,
            mode,
            recorder: None,
        }
    }

    pub fn with_recorder(mut self, recorder: &'a Recorder) -> Self {
        self.recorder = Some(recorder);
        self
    }
}

impl ScoreModel for GatedTripletModel<'_> {
    fn predict(&self, x: &Tensor, at: &StepContext) -> Result<Tensor> {
        let t = at.countdown();
        let schedule = self.mode.schedule(t, self.denoiser.layers().len())?;
        let out = match self.recorder {
            None => self.denoiser.forward_triplet(x, &schedule, None)?,
            Some(rec) => {
                let mut observe = |layer: usize, proj: &AttentionProjections, mask: &SimilarityMask| {
                    if rec.wants(layer) {
                        rec.push(LayerRecord {
                            step: at.step,
                            countdown: t,
                            layer,
                            mask: *mask,
                            diagnostics: attention_diagnostics(proj, mask)?,
                        });
                    }
                    Ok(())
                };
                self.denoiser.forward_triplet(x, &schedule, Some(&mut observe))?
            }
        };
        self.denoiser.noise_prediction(x, &out, at)
    }
}

/// Pixels of the composite that came from the foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub bbox: BBox,
    pub pixels: BinaryMask,
    /// One flag per token: any pixel of its patch lies in the region.
    pub tokens: Vec<bool>,
}

impl RegionMask {
    pub fn new(bbox: BBox, pixels: BinaryMask) -> Result<Self> {
        let (w, h) = (pixels.width(), pixels.height());
        let count = pixels.count();
        if count == 0 {
            return Err(Error::Region("region is empty".into()));
        }
        if count == w * h {
            return Err(Error::Region("region covers the whole image".into()));
        }
        bbox.check_within(w, h)?;
        let (gw, gh) = (w.div_ceil(PATCH), h.div_ceil(PATCH));
        let tokens = (0..gh)
            .flat_map(|ty| (0..gw).map(move |tx| (tx, ty)))
            .map(|(tx, ty)| {
                (0..PATCH * PATCH).any(|i| {
                    let (x, y) = (tx * PATCH + i % PATCH, ty * PATCH + i / PATCH);
                    x < w && y < h && pixels.get(x, y)
                })
            })
            .collect();
        Ok(Self { bbox, pixels, tokens })
    }

    pub fn pixel_count(&self) -> usize {
        self.pixels.count()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.pixels.get(x, y)
    }
}

/// Pastes `fg`, bilinearly resized to the box, onto `bg` at `bbox`. With a
/// mask (any size, resampled to the box) only its set pixels are pasted.
pub fn composite_paste(bg: &Image, fg: &Image, bbox: BBox, mask: Option<&BinaryMask>) -> Result<(Image, RegionMask)> {
    let (w, h) = (bg.width(), bg.height());
    bbox.check_within(w, h)?;
    let patch = fg.resize_bilinear(bbox.w, bbox.h)?;
    let local = match mask {
        Some(m) => m.resize_nearest(bbox.w, bbox.h),
        None => BinaryMask::new(bbox.w, bbox.h, vec![true; bbox.area()])?,
    };
    if local.count() == 0 {
        return Err(Error::Region("paste mask is empty".into()));
    }
    let mut comp = bg.clone();
    let mut inside = vec![false; w * h];
    for y in 0..bbox.h {
        for x in 0..bbox.w {
            if local.get(x, y) {
                comp.set_pixel(bbox.x + x, bbox.y + y, patch.pixel(x, y));
                inside[(bbox.y + y) * w + bbox.x + x] = true;
            }
        }
    }
    let region = RegionMask::new(bbox, BinaryMask::new(w, h, inside)?)?;
    Ok((comp, region))
}

/// Maps square images to token arrays: each `PATCH×PATCH` patch becomes a
/// `3·PATCH²` vector in `[-1, 1]`, lifted to the token width by a seeded map
/// with orthonormal rows.
#[derive(Clone, Debug)]
pub struct TokenCodec {
    size: usize,
    lift: Tensor,
}

impl TokenCodec {
    pub fn new(size: usize, width: usize, seed: u64) -> Result<Self> {
        if size == 0 || !size.is_multiple_of(PATCH) {
            return Err(Error::Config(format!("image size {size} must be a positive multiple of {PATCH}")));
        }
        let raw = CHANNELS * PATCH * PATCH;
        if width < raw {
            return Err(Error::Config(format!("token width {width} below patch size {raw}")));
        }
        let lift = orthonormal_rows(raw, width, seed ^ 0x11F7)?;
        Ok(Self { size, lift })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn tokens(&self) -> usize {
        (self.size / PATCH) * (self.size / PATCH)
    }

    pub fn width(&self) -> usize {
        self.lift.cols()
    }

    pub fn encode(&self, img: &Image) -> Result<Tensor> {
        if img.width() != self.size || img.height() != self.size {
            return Err(Error::Shape(format!(
                "codec expects {0}x{0} images, got {1}x{2}",
                self.size,
                img.width(),
                img.height()
            )));
        }
        let grid = self.size / PATCH;
        let raw = self.lift.rows();
        let mut patches = Vec::with_capacity(self.tokens() * raw);
        for ty in 0..grid {
            for tx in 0..grid {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let p = img.pixel(tx * PATCH + dx, ty * PATCH + dy);
                        patches.extend(p.iter().map(|v| 2.0 * v - 1.0));
                    }
                }
            }
        }
        matmul(&Tensor::new(&[self.tokens(), raw], patches)?, &self.lift)
    }

    /// Projects tokens back to patches and clamps pixels into `[0, 1]`.
    pub fn decode(&self, tokens: &Tensor) -> Result<Image> {
        if tokens.shape() != [self.tokens(), self.width()] {
            return Err(Error::Shape(format!(
                "codec expects {}×{} tokens, got {:?}",
                self.tokens(),
                self.width(),
                tokens.shape()
            )));
        }
        let patches = matmul(tokens, &self.lift.transpose()?)?;
        let grid = self.size / PATCH;
        Ok(Image::from_fn(self.size, self.size, |x, y| {
            let row = patches.row((y / PATCH) * grid + x / PATCH);
            let off = ((y % PATCH) * PATCH + x % PATCH) * CHANNELS;
            std::array::from_fn(|c| ((row[off + c] + 1.0) / 2.0).clamp(0.0, 1.0))
        }))
    }
}

/// Gram-Schmidt over the rows of a seeded Gaussian matrix.
fn orthonormal_rows(rows: usize, cols: usize, seed: u64) -> Result<Tensor> {
    let mut m = Tensor::randn(&[rows, cols], seed);
    for i in 0..rows {
        for j in 0..i {
            let dot: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
            let prev = m.row(j).to_vec();
            m.row_mut(i).iter_mut().zip(&prev).for_each(|(a, b)| *a -= dot * b);
        }
        let n = m.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
        if n < 1e-9 {
            return Err(Error::Config("degenerate lift basis".into()));
        }
        m.row_mut(i).iter_mut().for_each(|a| *a /= n);
    }
    Ok(m)
}

/// How the composite is supplied.
#[derive(Clone, Debug)]
pub enum CompositeInput {
    /// A ready-made composite; no region is known.
    Image(Image),
    /// Paste the foreground onto the background, in output-image pixels.
    Paste { bbox: BBox, mask: Option<BinaryMask> },
}

/// Encoded inputs at working resolution.
#[derive(Clone, Debug)]
pub struct LatentTriplet {
    pub fg: Tensor,
    pub bg: Tensor,
    pub comp: Tensor,
    pub region: Option<RegionMask>,
}

impl LatentTriplet {
    pub fn new(fg: Tensor, bg: Tensor, comp: Tensor, region: Option<RegionMask>) -> Result<Self> {
        if fg.shape() != bg.shape() || fg.shape() != comp.shape() || fg.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "triplet blocks differ: {:?} {:?} {:?}",
                fg.shape(),
                bg.shape(),
                comp.shape()
            )));
        }
        Ok(Self { fg, bg, comp, region })
    }

    pub fn tokens(&self) -> usize {
        self.fg.rows()
    }

    pub fn stacked(&self) -> Result<Tensor> {
        block_concat(&[self.fg.clone(), self.bg.clone(), self.comp.clone()])
    }
}

/// Working-resolution inputs plus their joint noise latent.
#[derive(Clone, Debug)]
pub struct Inverted {
    pub fg: Image,
    pub bg: Image,
    pub composite: Image,
    pub latents: LatentTriplet,
    /// Stacked `[fg; bg; comp]` at the noise end.
    pub noise: Tensor,
}

#[derive(Clone, Debug)]
pub struct Harmonized {
    pub output: Image,
    pub fg_reconstruction: Image,
    pub bg_reconstruction: Image,
    pub composite: Image,
    pub region: Option<RegionMask>,
    /// Stacked `[fg; bg; comp]` at the data end.
    pub tokens: Tensor,
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub image: Image,
    pub input_tokens: Tensor,
    pub tokens: Tensor,
    /// Token-space relative L2 error of the round trip.
    pub relative_error: f64,
}

/// Owns the codec, toy denoiser and noise schedule for one
/// (seed, steps, size) combination.
#[derive(Clone, Debug)]
pub struct Harmonizer {
    config: PipelineConfig,
    codec: TokenCodec,
    denoiser: ToyDenoiser,
    schedule: NoiseSchedule,
}

impl Harmonizer {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Self::unchecked(config)
    }

    /// Only the solver-side fields are checked; the gate settings are unused
    /// by [`Harmonizer::reconstruct`].
    pub fn for_reconstruction(config: PipelineConfig) -> Result<Self> {
        config.validate_solver()?;
        Self::unchecked(config)
    }

    /// Uses a custom denoiser configuration; its token count must match the
    /// image size.
    pub fn with_denoiser(config: PipelineConfig, model: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        Self::build(config, model)
    }

    fn unchecked(config: PipelineConfig) -> Result<Self> {
        let grid = config.image_size / PATCH;
        let model = DenoiserConfig::new(grid * grid, config.seed);
        Self::build(config, model)
    }

    fn build(config: PipelineConfig, model: DenoiserConfig) -> Result<Self> {
        let grid = config.image_size / PATCH;
        if model.tokens != grid * grid {
            return Err(Error::Config(format!(
                "denoiser expects {} tokens, image size {} gives {}",
                model.tokens,
                config.image_size,
                grid * grid
            )));
        }
        let denoiser = ToyDenoiser::new(model)?;
        let codec = TokenCodec::new(config.image_size, denoiser.config().width, config.seed)?;
        let schedule = NoiseSchedule::scaled_linear(config.steps);
        Ok(Self {
            config,
            codec,
            denoiser,
            schedule,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn codec(&self) -> &TokenCodec {
        &self.codec
    }

    pub fn denoiser(&self) -> &ToyDenoiser {
        &self.denoiser
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn fit(&self, img: &Image) -> Result<Image> {
        img.resize_bilinear(self.config.image_size, self.config.image_size)
    }

    pub fn encode(&self, img: &Image) -> Result<Tensor> {
        self.codec.encode(&self.fit(img)?)
    }

    pub fn decode(&self, tokens: &Tensor) -> Result<Image> {
        self.codec.decode(tokens)
    }

    /// Inverts and resamples one image with no sharing.
    pub fn reconstruct(&self, img: &Image) -> Result<Reconstruction> {
        self.reconstruct_with(&self.denoiser, img)
    }

    /// As [`Harmonizer::reconstruct`] with another score model in token space.
    pub fn reconstruct_with<M: ScoreModel + ?Sized>(&self, model: &M, img: &Image) -> Result<Reconstruction> {
        let z0 = self.encode(img)?;
        let zt = dpm_invert(&z0, model, &self.schedule)?;
        let tokens = dpm_sample(&zt, model, &self.schedule)?;
        let relative_error = tokens.relative_l2(&z0)?;
        Ok(Reconstruction {
            image: self.decode(&tokens)?,
            input_tokens: z0,
            tokens,
            relative_error,
        })
    }

    /// Resizes, builds the composite if needed, encodes and inverts the
    /// triplet with independent attention.
    pub fn invert(&self, fg: &Image, bg: &Image, comp: &CompositeInput) -> Result<Inverted> {
        let bg = self.fit(bg)?;
        let (composite, region, fg) = match comp {
            CompositeInput::Image(c) => (self.fit(c)?, None, self.fit(fg)?),
            CompositeInput::Paste { bbox, mask } => {
                let (c, r) = composite_paste(&bg, fg, *bbox, mask.as_ref())?;
                (c, Some(r), self.fit(fg)?)
            }
        };
        let latents = LatentTriplet::new(
            self.codec.encode(&fg)?,
            self.codec.encode(&bg)?,
            self.codec.encode(&composite)?,
            region,
        )?;
        let noise = dpm_invert(&latents.stacked()?, &self.denoiser, &self.schedule)?;
        Ok(Inverted {
            fg,
            bg,
            composite,
            latents,
            noise,
        })
    }

    /// Samples an inverted triplet with the given sharing mode.
    pub fn sample(&self, inv: &Inverted, mode: ShareMode, recorder: Option<&Recorder>) -> Result<Harmonized> {
        let mut model = GatedTripletModel::new(&self.denoiser, mode);
        if let Some(r) = recorder {
            model = model.with_recorder(r);
        }
        let tokens = dpm_sample(&inv.noise, &model, &self.schedule)?;
        let parts = block_split(&tokens, BlockIndex::triplet(self.codec.tokens())?)?;
        Ok(Harmonized {
            output: self.codec.decode(&parts[2])?,
            fg_reconstruction: self.codec.decode(&parts[0])?,
            bg_reconstruction: self.codec.decode(&parts[1])?,
            composite: inv.composite.clone(),
            region: inv.latents.region.clone(),
            tokens,
        })
    }

    /// Full pipeline with the gate from the configuration.
    pub fn harmonize(&self, fg: &Image, bg: &Image, comp: &CompositeInput) -> Result<Harmonized> {
        let inv = self.invert(fg, bg, comp)?;
        self.sample(&inv, ShareMode::Gated(self.config.gate()), None)
    }
}

/// One-shot harmonization.
pub fn harmonize(fg: &Image, bg: &Image, comp: &CompositeInput, config: &PipelineConfig) -> Result<Harmonized> {
    Harmonizer::new(config.clone())?.harmonize(fg, bg, comp)
}

/// One-shot reconstruction.
pub fn reconstruct(img: &Image, config: &PipelineConfig) -> Result<Image> {
    Ok(Harmonizer::for_reconstruction(config.clone())?.reconstruct(img)?.image)
}
