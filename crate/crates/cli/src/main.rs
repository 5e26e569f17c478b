mod grid;
mod io;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use painterly::attention::{MaskEntry, SimilarityMask, Source};
use painterly::image::{BBox, Image};
use painterly::metrics::{run_sweep, RandomConvEmbedder, SweepInputs};
use painterly::pipeline::{CompositeInput, Harmonizer, LayerRecord, PipelineConfig, Recorder, ShareMode, TaskPreset, PATCH};
use painterly::solver::GaussianScoreModel;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<painterly::Error> for CliError {
    fn from(e: painterly::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "painterly", version, about = "Training-free painterly harmonization on a toy diffusion backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Harmonize a pasted foreground into a background.
    Harmonize(HarmonizeArgs),
    /// Run a grid of configurations and report metric bounds.
    Sweep(SweepArgs),
    /// Invert and reconstruct one image; fails when the error is too large.
    Roundtrip(RoundtripArgs),
    /// Dump per-step, per-layer attention mass maps and similarity histograms.
    Visualize(VisualizeArgs),
}

/// Hyperparameters; explicit flags override the preset.
#[derive(Args, Debug, Clone)]
struct Hyper {
    #[arg(long, default_value = "style_transfer")]
    preset: TaskPreset,
    /// Foreground similarity multiplier, or -inf.
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<MaskEntry>,
    /// Background similarity multiplier, or -inf.
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<MaskEntry>,
    /// Sharing starts once fewer than this many sampling steps remain.
    #[arg(long)]
    t_share: Option<usize>,
    /// Sharing applies to layers above this zero-based index.
    #[arg(long)]
    l_share: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = PipelineConfig::DEFAULT_SEED)]
    seed: u64,
    /// Working resolution (square).
    #[arg(long)]
    size: Option<usize>,
}

impl Hyper {
    fn config(&self) -> PipelineConfig {
        let mut c = PipelineConfig::from_preset(self.preset);
        c.seed = self.seed;
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = self.l_share {
            c.l_share = v;
        }
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.size {
            c.image_size = v;
        }
        // A preset threshold means "this many of the default steps"; it is
        // capped when fewer steps are requested.
        c.t_share = self.t_share.unwrap_or(c.t_share.min(c.steps));
        c
    }
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct CompositeSource {
    /// Ready-made composite image.
    #[arg(long)]
    composite: Option<PathBuf>,
    /// Paste box "x,y,w,h" in output pixels.
    #[arg(long, value_parser = parse_bbox)]
    bbox: Option<BBox>,
}

fn parse_bbox(s: &str) -> Result<BBox, String> {
    s.parse().map_err(|e: painterly::Error| e.to_string())
}

#[derive(Args, Debug)]
struct Inputs {
    #[arg(long)]
    fg: PathBuf,
    #[arg(long)]
    bg: PathBuf,
    #[command(flatten)]
    source: CompositeSource,
    /// Paste mask (bright pixels are pasted), resampled to the box.
    #[arg(long, requires = "bbox")]
    mask: Option<PathBuf>,
}

impl Inputs {
    fn load(&self) -> Result<(Image, Image, CompositeInput), CliError> {
        let fg = io::read_image(&self.fg)?;
        let bg = io::read_image(&self.bg)?;
        let comp = match (&self.source.composite, self.source.bbox) {
            (Some(p), _) => CompositeInput::Image(io::read_image(p)?),
            (None, Some(bbox)) => CompositeInput::Paste {
                bbox,
                mask: self.mask.as_deref().map(io::read_mask).transpose()?,
            },
            (None, None) => return Err(CliError::Usage("one of --composite or --bbox is required".into())),
        };
        Ok((fg, bg, comp))
    }
}

#[derive(Args, Debug)]
struct HarmonizeArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    hyper: Hyper,
    /// PNG, or PPM by extension.
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    fg: PathBuf,
    #[arg(long)]
    bg: PathBuf,
    #[arg(long, value_parser = parse_bbox)]
    bbox: BBox,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// key=value records separated by blank lines.
    #[arg(long)]
    grid: PathBuf,
    /// Defaults for keys a record leaves out.
    #[command(flatten)]
    hyper: Hyper,
    #[arg(long)]
    report: PathBuf,
    /// Tiles of every output, row-major in grid order.
    #[arg(long)]
    grid_image: Option<PathBuf>,
    /// Tiles per row; defaults to a near-square layout.
    #[arg(long)]
    columns: Option<usize>,
    #[arg(long, default_value_t = RandomConvEmbedder::DEFAULT_SEED)]
    embedder_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    /// Seeded toy attention denoiser.
    Toy,
    /// Closed-form Gaussian score model in token space.
    Gaussian,
}

#[derive(Args, Debug)]
struct RoundtripArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelKind::Toy)]
    model: ModelKind,
    /// Data variance of the Gaussian model.
    #[arg(long, default_value_t = 1.0)]
    variance: f64,
    /// Largest accepted relative L2 error [default: 0.02 toy, 0.01 gaussian].
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, default_value_t = painterly::solver::NoiseSchedule::DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = PipelineConfig::DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = PipelineConfig::DEFAULT_SIZE)]
    size: usize,
    /// Where to write the reconstruction.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum VisualizeMode {
    /// The configured gate.
    Gated,
    Reconstruct,
    Disentangle,
    /// Reweighting with the configured alpha and beta at every step and layer.
    Reweight,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    hyper: Hyper,
    #[arg(long, value_enum, default_value_t = VisualizeMode::Gated)]
    mode: VisualizeMode,
    /// Comma-separated zero-based layers to record [default: all].
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long)]
    out_dir: PathBuf,
}

const TOY_TOLERANCE: f64 = 2e-2;
const GAUSSIAN_TOLERANCE: f64 = 1e-2;

fn cmd_harmonize(args: &HarmonizeArgs) -> Result<(), CliError> {
    let cfg = args.hyper.config();
    cfg.validate()?;
    println!("config: {cfg}");
    let (fg, bg, comp) = args.inputs.load()?;
    let start = Instant::now();
    let h = Harmonizer::new(cfg)?;
    let inv = h.invert(&fg, &bg, &comp)?;
    let inverted = start.elapsed();
    let out = h.sample(&inv, ShareMode::Gated(h.config().gate()), None)?;
    let total = start.elapsed();
    io::write_image(&out.output, &args.output)?;
    println!(
        "time: invert {:.2}s, sample {:.2}s, total {:.2}s",
        inverted.as_secs_f64(),
        (total - inverted).as_secs_f64(),
        total.as_secs_f64()
    );
    println!("wrote {}", args.output.display());
    Ok(())
}

fn tile_grid(tiles: &[Option<Image>], tile: usize, columns: usize) -> Image {
    let rows = tiles.len().div_ceil(columns);
    let mut canvas = Image::filled(columns * tile, rows * tile, [0.5, 0.5, 0.5]);
    for (i, t) in tiles.iter().enumerate() {
        let Some(img) = t else { continue };
        let (ox, oy) = ((i % columns) * tile, (i / columns) * tile);
        let img = img.resize_bilinear(tile, tile).expect("tile size is positive");
        for y in 0..tile {
            for x in 0..tile {
                canvas.set_pixel(ox + x, oy + y, img.pixel(x, y));
            }
        }
    }
    canvas
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let base = args.hyper.config();
    let text = io::read_text(&args.grid)?;
    let configs = grid::parse_grid(&text, &base).map_err(|e| CliError::Usage(format!("{}: {e}", args.grid.display())))?;
    if configs.len() < 2 {
        return Err(CliError::Usage(format!("{}: a sweep needs at least 2 records", args.grid.display())));
    }
    for (i, c) in configs.iter().enumerate() {
        println!("config {i}: {c}");
    }
    let inputs = SweepInputs {
        fg: io::read_image(&args.fg)?,
        bg: io::read_image(&args.bg)?,
        composite: CompositeInput::Paste {
            bbox: args.bbox,
            mask: args.mask.as_deref().map(io::read_mask).transpose()?,
        },
    };
    let start = Instant::now();
    let emb = RandomConvEmbedder::new(args.embedder_seed);
    let outcome = run_sweep(&inputs, &configs, &emb)?;
    let report = &outcome.report;
    io::write_atomic(&args.report, report.to_json()?.as_bytes())?;
    if let Some(path) = &args.grid_image {
        let tile = configs.iter().map(|c| c.image_size).max().unwrap_or(PipelineConfig::DEFAULT_SIZE);
        let columns = args
            .columns
            .unwrap_or_else(|| (configs.len() as f64).sqrt().ceil() as usize)
            .max(1);
        io::write_image(&tile_grid(&outcome.outputs, tile, columns), path)?;
    }
    for r in &report.records {
        match r.metrics() {
            Some(m) => println!(
                "run {}: lp_bg={:.4} lp_fg={:.4} cp_img={:.2} cp_st={:.2} cp_dir={:.2}",
                r.config, m.lp_bg, m.lp_fg, m.cp_img, m.cp_st, m.cp_dir
            ),
            None => println!("run {}: failed: {:?}", r.config, r.outcome),
        }
    }
    for (name, b) in &report.bounds {
        println!(
            "{name}: [{:.4}, {:.4}] lower by config {}, upper by config {}",
            b.lower, b.upper, b.lower_config, b.upper_config
        );
    }
    println!(
        "{} of {} runs succeeded in {:.2}s; wrote {}",
        report.succeeded(),
        report.records.len(),
        start.elapsed().as_secs_f64(),
        args.report.display()
    );
    if report.succeeded() == 0 {
        return Err(CliError::Numerical("no run succeeded".into()));
    }
    Ok(())
}

fn cmd_roundtrip(args: &RoundtripArgs) -> Result<(), CliError> {
    let cfg = PipelineConfig {
        steps: args.steps,
        seed: args.seed,
        image_size: args.size,
        ..PipelineConfig::default()
    };
    let img = io::read_image(&args.input)?;
    let h = Harmonizer::for_reconstruction(cfg)?;
    let (rec, tolerance) = match args.model {
        ModelKind::Toy => (h.reconstruct(&img)?, args.tolerance.unwrap_or(TOY_TOLERANCE)),
        ModelKind::Gaussian => {
            let model = GaussianScoreModel::new(args.variance)?;
            (h.reconstruct_with(&model, &img)?, args.tolerance.unwrap_or(GAUSSIAN_TOLERANCE))
        }
    };
    println!("relative_l2: {:e}", rec.relative_error);
    println!("tolerance: {tolerance:e}");
    if let Some(path) = &args.output {
        io::write_image(&rec.image, path)?;
        println!("wrote {}", path.display());
    }
    if rec.relative_error.is_nan() || rec.relative_error > tolerance {
        return Err(CliError::Numerical(format!(
            "round-trip error {:e} exceeds tolerance {tolerance:e}",
            rec.relative_error
        )));
    }
    Ok(())
}

/// Token-grid mass map, upscaled to the working resolution.
fn mass_png(mass: &[f64], size: usize, path: &Path) -> Result<Vec<u8>, CliError> {
    let grid = size / PATCH;
    let luma: Vec<u8> = (0..size * size)
        .map(|i| {
            let (x, y) = (i % size, i / size);
            (mass[(y / PATCH) * grid + x / PATCH].clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    io::encode_gray(size, size, &luma, path)
}

fn histogram_csv(rec: &LayerRecord) -> String {
    let h = &rec.diagnostics.similarity_histogram;
    let mut out = String::from("bin_low,bin_high,count_fg,count_bg,count_self\n");
    for b in 0..h.bin_count() {
        let (lo, hi) = h.bin_edges(b);
        out.push_str(&format!("{lo},{hi},{},{},{}\n", h.counts[0][b], h.counts[1][b], h.counts[2][b]));
    }
    out
}

fn cmd_visualize(args: &VisualizeArgs) -> Result<(), CliError> {
    let cfg = args.hyper.config();
    cfg.validate()?;
    println!("config: {cfg} mode={:?}", args.mode);
    let mode = match args.mode {
        VisualizeMode::Gated => ShareMode::Gated(cfg.gate()),
        VisualizeMode::Reconstruct => ShareMode::Fixed(SimilarityMask::RECONSTRUCT),
        VisualizeMode::Disentangle => ShareMode::Fixed(SimilarityMask::DISENTANGLE),
        VisualizeMode::Reweight => ShareMode::Fixed(SimilarityMask::reweight(cfg.alpha, cfg.beta)?),
    };
    if let Some(ls) = &args.layers {
        if let Some(l) = ls.iter().find(|&&l| l >= cfg.layer_count()) {
            return Err(CliError::Usage(format!("layer {l} out of range 0..{}", cfg.layer_count())));
        }
    }
    let (fg, bg, comp) = args.inputs.load()?;
    let h = Harmonizer::new(cfg)?;
    let inv = h.invert(&fg, &bg, &comp)?;
    let recorder = Recorder::new(args.layers.clone());
    let out = h.sample(&inv, mode, Some(&recorder))?;
    let mut records = recorder.into_records();
    records.sort_by_key(|r| (r.step, r.layer));
    io::create_dir(&args.out_dir)?;
    let size = h.config().image_size;
    let mut summary = String::from("step,countdown,layer,alpha,beta,gamma,mass_fg,mass_bg,mass_self\n");
    for r in &records {
        let stem = format!("s{:02}_l{:02}", r.step, r.layer);
        for s in Source::ALL {
            let path = args.out_dir.join(format!("{stem}_{}.png", s.name()));
            io::write_atomic(&path, &mass_png(r.diagnostics.mass(s), size, &path)?)?;
        }
        io::write_atomic(&args.out_dir.join(format!("{stem}_hist.csv")), histogram_csv(r).as_bytes())?;
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.countdown,
            r.layer,
            r.mask.alpha(),
            r.mask.beta(),
            r.mask.gamma(),
            r.diagnostics.mean_mass(Source::Foreground),
            r.diagnostics.mean_mass(Source::Background),
            r.diagnostics.mean_mass(Source::Composite)
        ));
    }
    io::write_atomic(&args.out_dir.join("summary.csv"), summary.as_bytes())?;
    io::write_image(&out.output, &args.out_dir.join("output.png"))?;
    println!("wrote {} layer records to {}", records.len(), args.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let res = match &cli.command {
        Command::Harmonize(a) => cmd_harmonize(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Roundtrip(a) => cmd_roundtrip(a),
        Command::Visualize(a) => cmd_visualize(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
