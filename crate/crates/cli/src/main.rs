//! `tada`: phantoms, projections and reconstructions from the command line.
//!
//! Every subcommand takes `--seed` and `--config FILE`. The config file is
//! TOML; its top-level keys and the keys of a section named after the
//! subcommand (for example `[tada]`) override the matching flags.

use std::error::Error as StdError;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tada_core::classical::{asd_pocs, AsdPocsConfig};
use tada_core::engine::{
    run_tada_dip_with, run_vanilla_dip_with, synthesize_measurements, Iteration, RunTrace,
    TadaConfig,
};
use tada_core::tomo::{self, min_detector_bins, uniform_angles, Geometry, RampFilter};
use tada_core::toolkit::io::{save_volume_described, write_atomic};
use tada_core::toolkit::{
    evaluate, load_sinogram, load_volume, mip, save_sinogram, save_volume, shepp_logan_3d, Axis,
};
use tada_core::unet::UNetConfig;
use tada_core::{Sinogram, Volume};

type CliResult<T> = Result<T, Box<dyn StdError>>;

#[derive(Parser)]
#[command(
    name = "tada",
    version,
    about = "Sparse-view CT reconstruction with deep image priors"
)]
struct Cli {
    /// TOML file whose keys override command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a 3D Shepp-Logan phantom.
    Phantom(PhantomCmd),
    /// Simulate a parallel-beam sinogram from a volume.
    Project(ProjectCmd),
    /// Filtered backprojection.
    Fbp(FbpCmd),
    /// ASD-POCS total-variation reconstruction.
    Tv(TvCmd),
    /// Vanilla deep-image-prior reconstruction.
    Dip(DipCmd),
    /// Tada-DIP reconstruction.
    Tada(TadaCmd),
    /// PSNR and SSIM between two volumes.
    Metrics(MetricsCmd),
    /// Maximum intensity projection as a PGM image.
    Mip(MipCmd),
    /// Run every method on a phantom and tabulate PSNR and SSIM.
    Compare(CompareCmd),
}

#[derive(Args)]
struct PhantomCmd {
    /// Output volume (`.raw` plus a `.raw.toml` header).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    params: PhantomParams,
}

#[derive(Args, Serialize, Deserialize)]
struct PhantomParams {
    /// Edge length of the cubic volume.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Unused; accepted for a uniform interface.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ProjectCmd {
    /// Input volume.
    #[arg(long)]
    input: PathBuf,
    /// Output sinogram; its header records the geometry.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    params: ProjectParams,
}

#[derive(Args, Serialize, Deserialize)]
struct ProjectParams {
    /// Number of views, uniform over [0, π).
    #[arg(long, default_value_t = 30)]
    views: usize,
    /// Detector bins; 0 picks the smallest count covering the slice diagonal.
    #[arg(long, default_value_t = 0)]
    bins: usize,
    /// Standard deviation of additive Gaussian measurement noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Seed of the noise generator.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FbpCmd {
    /// Input sinogram.
    #[arg(long)]
    sino: PathBuf,
    /// Output volume.
    #[arg(long)]
    out: PathBuf,
    /// Reference volume; prints PSNR and SSIM when given.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    params: FbpParams,
}

#[derive(Args, Serialize, Deserialize)]
struct FbpParams {
    /// Ramp filter window: ramlak or hann.
    #[arg(long, default_value = "ramlak")]
    filter: RampFilter,
    /// Unused; accepted for a uniform interface.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TvCmd {
    #[arg(long)]
    sino: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Per-iteration CSV trace.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    params: TvParams,
}

#[derive(Args, Serialize, Deserialize)]
struct TvParams {
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    /// Ordered subsets per SART sweep.
    #[arg(long, default_value_t = 30)]
    subsets: usize,
    /// TV descent steps per iteration.
    #[arg(long, default_value_t = 50)]
    tv_steps: usize,
    /// SART relaxation.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.995)]
    lambda_decay: f64,
    /// TV step length relative to the data-step change.
    #[arg(long, default_value_t = 0.2)]
    tv_fraction: f64,
    /// Allow negative voxels.
    #[arg(long)]
    no_nonneg: bool,
    /// Unused; accepted for a uniform interface.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TvParams {
    fn to_config(&self) -> AsdPocsConfig {
        AsdPocsConfig {
            iterations: self.iterations,
            num_subsets: self.subsets,
            tv_steps_per_iter: self.tv_steps,
            lambda: self.lambda,
            lambda_decay: self.lambda_decay,
            tv_fraction: self.tv_fraction,
            nonnegativity: !self.no_nonneg,
        }
    }
}

#[derive(Args)]
struct RunIo {
    #[arg(long)]
    sino: PathBuf,
    /// Output volume (the EMA of the network outputs).
    #[arg(long)]
    out: PathBuf,
    /// Reference volume; adds PSNR and SSIM columns to the trace.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// CSV trace of loss terms and metrics.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Periodic checkpoint of the current EMA volume.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Iterations between checkpoints.
    #[arg(long, default_value_t = 500)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct DipCmd {
    #[command(flatten)]
    io: RunIo,
    #[command(flatten)]
    params: DipParams,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct DipParams {
    #[arg(long, default_value_t = 4000)]
    iterations: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Norm exponent of the loss, 1 or 2.
    #[arg(long, default_value_t = 1)]
    p: u32,
    #[arg(long, default_value_t = 0.99)]
    ema_decay: f64,
    /// Trace cadence in iterations.
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    /// Number of downsampling stages.
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    #[arg(long, default_value_t = 2)]
    channel_growth: usize,
    /// Drop the encoder-decoder skip connections.
    #[arg(long)]
    no_skip: bool,
    /// Seed for weights, input and input noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DipParams {
    fn to_config(&self) -> TadaConfig {
        TadaConfig {
            p: self.p,
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            ema_decay: self.ema_decay,
            seed: self.seed,
            eval_every: self.eval_every,
            unet: UNetConfig {
                depth: self.depth,
                base_channels: self.base_channels,
                channel_growth: self.channel_growth,
                skip: !self.no_skip,
            },
            ..TadaConfig::default()
        }
    }
}

#[derive(Args)]
struct TadaCmd {
    #[command(flatten)]
    io: RunIo,
    #[command(flatten)]
    params: TadaParams,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct TadaParams {
    /// Input-noise scale relative to max|z|.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Weight of the input-output consistency term.
    #[arg(long, default_value_t = 0.01)]
    beta: f64,
    /// Input blend rate toward the output.
    #[arg(long, default_value_t = 0.01)]
    gamma: f64,
    #[command(flatten)]
    #[serde(flatten)]
    dip: DipParams,
}

impl TadaParams {
    fn to_config(&self) -> TadaConfig {
        TadaConfig {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            ..self.dip.to_config()
        }
    }
}

#[derive(Args)]
struct MetricsCmd {
    /// Volume to score.
    a: PathBuf,
    /// Reference volume.
    b: PathBuf,
    #[command(flatten)]
    params: MetricsParams,
}

#[derive(Args, Serialize, Deserialize)]
struct MetricsParams {
    /// Intensity range used by PSNR and SSIM.
    #[arg(long, default_value_t = 1.0)]
    range: f64,
    /// Unused; accepted for a uniform interface.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MipCmd {
    #[arg(long)]
    input: PathBuf,
    /// Output PGM image.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    params: MipParams,
}

#[derive(Args, Serialize, Deserialize)]
struct MipParams {
    /// Projection axis: x, y or z.
    #[arg(long, default_value = "z")]
    axis: String,
    /// Voxels below this value are zeroed first.
    #[arg(long, default_value_t = 0.45)]
    threshold: f32,
    /// Unused; accepted for a uniform interface.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CompareCmd {
    /// Summary CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for reconstructions and traces.
    #[arg(long)]
    save_dir: Option<PathBuf>,
    #[command(flatten)]
    params: CompareParams,
}

#[derive(Args, Serialize, Deserialize)]
struct CompareParams {
    #[arg(long, default_value_t = 48)]
    size: usize,
    #[arg(long, default_value_t = 30)]
    views: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    tv_iterations: usize,
    #[arg(long, default_value_t = 4000)]
    dip_iterations: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.01)]
    beta: f64,
    #[arg(long, default_value_t = 0.01)]
    gamma: f64,
    #[arg(long, default_value_t = 1)]
    p: u32,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            eprintln!("tada: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tada: {}", e.to_string().replace('\n', "; "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let config = cli.config.as_deref().map(read_config).transpose()?;
    let cfg = config.as_ref();
    match cli.command {
        Command::Phantom(c) => phantom(&c.out, &apply(c.params, cfg, "phantom")?),
        Command::Project(c) => project(&c.input, &c.out, &apply(c.params, cfg, "project")?),
        Command::Fbp(c) => {
            let p = apply(c.params, cfg, "fbp")?;
            let (y, g) = load_measurements(&c.sino)?;
            let x = tomo::fbp(&y, &g, p.filter)?;
            save_volume(&c.out, &x)?;
            report(&x, c.truth.as_deref())
        }
        Command::Tv(c) => {
            let p = apply(c.params, cfg, "tv")?;
            let (y, g) = load_measurements(&c.sino)?;
            let (x, trace) = asd_pocs(&y, &g, &p.to_config())?;
            save_volume(&c.out, &x)?;
            if let Some(path) = &c.trace {
                trace.save_csv(path)?;
            }
            report(&x, c.truth.as_deref())
        }
        Command::Dip(c) => {
            let p = apply(c.params, cfg, "dip")?;
            reconstruct(false, &c.io, &p.to_config())
        }
        Command::Tada(c) => {
            let p = apply(c.params, cfg, "tada")?;
            reconstruct(true, &c.io, &p.to_config())
        }
        Command::Metrics(c) => {
            let p = apply(c.params, cfg, "metrics")?;
            let r = evaluate(&read_volume(&c.a)?, &read_volume(&c.b)?, p.range)?;
            let mut w = csv::Writer::from_writer(std::io::stdout());
            w.serialize(r)?;
            w.flush()?;
            Ok(())
        }
        Command::Mip(c) => {
            let p = apply(c.params, cfg, "mip")?;
            let axis: Axis = p.axis.parse()?;
            let image = mip(&read_volume(&c.input)?, axis, p.threshold)?;
            write_atomic(&c.out, &image.to_pgm())?;
            Ok(())
        }
        Command::Compare(c) => {
            let p = apply(c.params, cfg, "compare")?;
            compare(&p, c.out.as_deref(), c.save_dir.as_deref())
        }
    }
}

fn read_config(path: &Path) -> CliResult<toml::Table> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| format!("config {}: {}", path.display(), e.message()))?;
    Ok(table)
}

/// Overlays config-file keys on the flag values. Top-level scalar keys apply
/// to every subcommand that knows them; a `[section]` named after the
/// subcommand applies on top. Unknown keys are rejected.
fn apply<P: Serialize + DeserializeOwned>(
    params: P,
    config: Option<&toml::Table>,
    section: &str,
) -> CliResult<P> {
    let Some(config) = config else {
        return Ok(params);
    };
    let mut merged = toml::Table::try_from(&params)?;
    let mut overlay = |table: &toml::Table, scope: &str, strict: bool| -> CliResult<()> {
        for (key, value) in table {
            if value.is_table() && scope.is_empty() {
                continue;
            }
            if merged.contains_key(key) {
                merged.insert(key.clone(), value.clone());
            } else if strict {
                return Err(format!("unknown config key `{scope}{key}`").into());
            }
        }
        Ok(())
    };
    overlay(config, "", false)?;
    if let Some(sub) = config.get(section) {
        let sub = sub
            .as_table()
            .ok_or_else(|| format!("config entry `{section}` must be a table"))?;
        overlay(sub, &format!("{section}."), true)?;
    }
    let known: Vec<&String> = merged.keys().collect();
    if let Some(key) = config
        .iter()
        .find(|(k, v)| !v.is_table() && !known.contains(k) && !is_shared_key(k))
    {
        return Err(format!("unknown config key `{}`", key.0).into());
    }
    Ok(merged
        .try_into()
        .map_err(|e: toml::de::Error| format!("config: {}", e.message()))?)
}

/// Top-level keys that some subcommand understands; these may appear in a
/// shared config file without being rejected by the others.
fn is_shared_key(key: &str) -> bool {
    const KEYS: &[&str] = &[
        "size",
        "seed",
        "views",
        "bins",
        "noise",
        "filter",
        "iterations",
        "subsets",
        "tv_steps",
        "lambda",
        "lambda_decay",
        "tv_fraction",
        "no_nonneg",
        "learning_rate",
        "p",
        "ema_decay",
        "eval_every",
        "depth",
        "base_channels",
        "channel_growth",
        "no_skip",
        "alpha",
        "beta",
        "gamma",
        "range",
        "axis",
        "threshold",
        "tv_iterations",
        "dip_iterations",
    ];
    KEYS.contains(&key)
}

fn phantom(out: &Path, p: &PhantomParams) -> CliResult<()> {
    let x = shepp_logan_3d(p.size)?;
    save_volume_described(out, &x, Some("3D Shepp-Logan phantom"))?;
    Ok(())
}

fn project(input: &Path, out: &Path, p: &ProjectParams) -> CliResult<()> {
    let x = read_volume(input)?;
    let shape = x.shape();
    let bins = if p.bins == 0 {
        min_detector_bins(shape[1], shape[2], 1.0)
    } else {
        p.bins
    };
    let g = Geometry::new(shape, uniform_angles(p.views), bins, 1.0)?;
    let y = synthesize_measurements(&x, &g, p.noise, p.seed)?;
    save_sinogram(out, &y, &g)?;
    Ok(())
}

fn read_volume(path: &Path) -> CliResult<Volume> {
    load_volume(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn load_measurements(path: &Path) -> CliResult<(Sinogram, Geometry)> {
    let (y, g) = load_sinogram(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let g = g.ok_or_else(|| format!("{}: header carries no geometry", path.display()))?;
    Ok((y, g))
}

fn report(x: &Volume, truth: Option<&Path>) -> CliResult<()> {
    if let Some(path) = truth {
        let r = evaluate(x, &read_volume(path)?, 1.0)?;
        println!("psnr {:.4} ssim {:.4}", r.psnr, r.ssim);
    }
    Ok(())
}

fn reconstruct(tada: bool, io: &RunIo, cfg: &TadaConfig) -> CliResult<()> {
    let (y, g) = load_measurements(&io.sino)?;
    let truth = io.truth.as_deref().map(read_volume).transpose()?;
    if io.checkpoint_every == 0 {
        return Err("checkpoint_every must be at least 1".into());
    }
    let mut observer = |it: &Iteration| -> tada_core::Result<()> {
        if let Some(path) = &io.checkpoint {
            if it.index.is_multiple_of(io.checkpoint_every) {
                save_volume_described(
                    path,
                    it.ema,
                    Some(&format!("checkpoint at iteration {}", it.index)),
                )?;
            }
        }
        Ok(())
    };
    let (x, trace) = if tada {
        run_tada_dip_with(&y, &g, cfg, truth.as_ref(), &mut observer)?
    } else {
        run_vanilla_dip_with(&y, &g, cfg, truth.as_ref(), &mut observer)?
    };
    save_volume(&io.out, &x)?;
    if let Some(path) = &io.trace {
        trace.save_csv(path)?;
    }
    if let Some(gt) = &truth {
        let r = evaluate(&x, gt, 1.0)?;
        println!("psnr {:.4} ssim {:.4}", r.psnr, r.ssim);
    }
    Ok(())
}

#[derive(Serialize)]
struct CompareRow {
    method: &'static str,
    psnr: f64,
    ssim: f64,
    seconds: f64,
}

fn compare(p: &CompareParams, out: Option<&Path>, save_dir: Option<&Path>) -> CliResult<()> {
    let truth = shepp_logan_3d(p.size)?;
    let g = Geometry::parallel(truth.shape(), p.views)?;
    let y = synthesize_measurements(&truth, &g, p.noise, p.seed)?;
    if let Some(dir) = save_dir {
        fs::create_dir_all(dir)?;
    }
    let dip_cfg = TadaConfig {
        alpha: p.alpha,
        beta: p.beta,
        gamma: p.gamma,
        p: p.p,
        iterations: p.dip_iterations,
        learning_rate: p.learning_rate,
        seed: p.seed,
        unet: UNetConfig {
            depth: p.depth,
            base_channels: p.base_channels,
            ..UNetConfig::default()
        },
        ..TadaConfig::default()
    };
    let tv_cfg = AsdPocsConfig {
        iterations: p.tv_iterations,
        ..AsdPocsConfig::default()
    };

    let mut rows = Vec::new();
    let mut record = |method: &'static str,
                      x: &Volume,
                      started: Instant,
                      trace: Option<&RunTrace>|
     -> CliResult<()> {
        let seconds = started.elapsed().as_secs_f64();
        let r = evaluate(x, &truth, 1.0)?;
        if let Some(dir) = save_dir {
            save_volume(&dir.join(format!("{method}.raw")), x)?;
            if let Some(t) = trace {
                t.save_csv(&dir.join(format!("{method}_trace.csv")))?;
            }
        }
        rows.push(CompareRow {
            method,
            psnr: r.psnr,
            ssim: r.ssim,
            seconds,
        });
        Ok(())
    };

    let t = Instant::now();
    let x = tomo::fbp(&y, &g, RampFilter::RamLak)?;
    record("fbp", &x, t, None)?;
    let t = Instant::now();
    let (x, _) = asd_pocs(&y, &g, &tv_cfg)?;
    record("asd_pocs", &x, t, None)?;
    let t = Instant::now();
    let (x, trace) = run_vanilla_dip_with(&y, &g, &dip_cfg, Some(&truth), &mut |_| Ok(()))?;
    record("vanilla_dip", &x, t, Some(&trace))?;
    let t = Instant::now();
    let (x, trace) = run_tada_dip_with(&y, &g, &dip_cfg, Some(&truth), &mut |_| Ok(()))?;
    record("tada_dip", &x, t, Some(&trace))?;

    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    match out {
        Some(path) => write_atomic(path, &buf)?,
        None => print!("{}", String::from_utf8(buf)?),
    }
    Ok(())
}
