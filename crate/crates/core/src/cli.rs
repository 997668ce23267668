//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::burst::{execute_session, plan_session, SessionManifest};
use crate::error::{Error, Result};
use crate::formats::{read_json, read_pfm, write_json, write_pfm};
use crate::fusion::{fuse_pipeline, GridSource, ScaleMapParams};
use crate::metering::{run_full_metering, MeteringConfig, MeteringResult, SimulatorCapture};
use crate::metrics::evaluate;
use crate::pipeline::{run_demo, PipelineConfig};
use crate::registration::{register_pair, RegisterOptions};
use crate::sim::synthetic::{bundled_scene, SceneOptions};
use crate::sim::{FlashKind, Preset, Rig, SpectralScene};

#[derive(Debug, Parser)]
#[command(name = "darkflash", version, about = "Stereo dark-flash capture simulator and fusion pipeline")]
struct Cli {
    /// Seed for every random draw (sensor noise, texture).
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Camera/flash preset; defaults to the one stored with the scene.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the bundled synthetic scene.
    Simulate(SimulateArgs),
    /// Run automatic exposure on a scene.
    Meter(MeterArgs),
    /// Plan and render a capture session.
    Capture(CaptureArgs),
    /// Solve the cam1 -> cam2 flow for one shot of a session.
    Register(RegisterArgs),
    /// Fuse a registered RGB frame with a dark-flash guide.
    Fuse(FuseArgs),
    /// Compare two images after brightness normalization.
    Evaluate(EvaluateArgs),
    /// Run the whole chain on the bundled scene.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scene header to write; PFM payloads go next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 640)]
    width: usize,
    #[arg(long, default_value_t = 640)]
    height: usize,
    /// Scene depth in meters.
    #[arg(long, default_value_t = 2.0)]
    depth: f64,
    #[arg(long, default_value_t = 24.0)]
    baseline_focal: f64,
    /// Use noiseless sensors.
    #[arg(long)]
    noiseless: bool,
}

#[derive(Debug, Args)]
struct MeterArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Meter on noiseless captures.
    #[arg(long)]
    noiseless: bool,
}

#[derive(Debug, Args)]
struct CaptureArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    metering: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep only this exposure variant (plus the long exposure).
    #[arg(long, value_parser = parse_variant)]
    variant: Option<u32>,
    /// Keep only this dark flash (plus the long exposure).
    #[arg(long, value_parser = parse_flash)]
    flash: Option<FlashKind>,
}

#[derive(Debug, Args)]
struct RegisterArgs {
    #[arg(long)]
    burst: PathBuf,
    #[arg(long)]
    t: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    tile: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Working resolution as WxH; defaults to the raw size.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
struct FuseArgs {
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    flash: PathBuf,
    /// `identity` or a grid JSON header.
    #[arg(long, default_value = "identity")]
    grid: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 4.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    test: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Report path; printed to standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Scene header; defaults to the bundled scene.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 5, value_parser = parse_variant)]
    variant: u32,
    #[arg(long, default_value = "NIR", value_parser = parse_flash)]
    flash: FlashKind,
}

fn parse_variant(s: &str) -> std::result::Result<u32, String> {
    match s.parse::<u32>() {
        Ok(n) if crate::burst::VARIANTS.contains(&n) => Ok(n),
        _ => Err(format!("expected one of 1, 3, 5, 7, got {s:?}")),
    }
}

fn parse_flash(s: &str) -> std::result::Result<FlashKind, String> {
    match s.to_ascii_uppercase().as_str() {
        "NIR" => Ok(FlashKind::Nir),
        "NIR+NUV" | "NIR_NUV" => Ok(FlashKind::NirNuv),
        _ => Err(format!("expected NIR or NIR+NUV, got {s:?}")),
    }
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    match (w.parse(), h.parse()) {
        (Ok(w), Ok(h)) if w > 0 && h > 0 => Ok((w, h)),
        _ => Err(format!("expected WxH, got {s:?}")),
    }
}

fn load_scene(path: &Path, preset: Option<Preset>) -> Result<(SpectralScene, Rig)> {
    let mut scene = SpectralScene::load(path)?;
    if let Some(p) = preset {
        scene.preset = p;
    }
    let rig = Rig::new(scene.preset, scene.baseline_focal);
    Ok((scene, rig))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => {
            let mut opts = SceneOptions {
                width: a.width,
                height: a.height,
                depth_m: a.depth,
                baseline_focal: a.baseline_focal,
                preset: cli.preset.unwrap_or(Preset::Ideal),
                texture_seed: cli.seed,
                ..SceneOptions::default()
            };
            if a.noiseless {
                opts.noise = crate::sim::NoiseParams::off();
            }
            let scene = bundled_scene(&opts);
            scene.validate()?;
            scene.save(&a.out)
        }
        Command::Meter(a) => {
            let (scene, rig) = load_scene(&a.scene, cli.preset)?;
            let mut cap = SimulatorCapture::new(&scene, &rig, cli.seed, !a.noiseless);
            let m = run_full_metering(|id, s| cap.capture(id, s), &MeteringConfig::default(), &rig)?;
            match a.out {
                Some(p) => write_json(&p, &m),
                None => print_json(&m),
            }
        }
        Command::Capture(a) => {
            let (scene, rig) = load_scene(&a.scene, cli.preset)?;
            let m: MeteringResult = read_json(&a.metering)?;
            let full = plan_session(&m, &rig)?;
            full.validate(rig.cam1.frame_interval_floor_s)?;
            let plan = full.filtered(|f| {
                f.tag == crate::burst::FrameTag::LongExposure
                    || (a.variant.is_none_or(|n| f.variant == n) && a.flash.is_none_or(|k| f.flash_kind == k))
            });
            let manifest = execute_session(&plan, &scene, &rig, &a.out, &a.scene.to_string_lossy(), cli.seed)?;
            log::info!("wrote {} frames to {}", manifest.frames.len(), a.out.display());
            Ok(())
        }
        Command::Register(a) => {
            let manifest = SessionManifest::load(&a.burst)?;
            let mut opts = RegisterOptions {
                tile_size: a.tile,
                working_size: a.size,
                ..RegisterOptions::default()
            };
            opts.solver.lambda_smooth = a.lambda;
            let reg = register_pair(&manifest, &a.burst, a.t, &opts)?;
            write_pfm(&a.out, &reg.flow.to_image()?)
        }
        Command::Fuse(a) => {
            let rgb = read_pfm(&a.rgb)?;
            let flash = read_pfm(&a.flash)?;
            let source = GridSource::from_arg(&a.grid)?;
            let p = ScaleMapParams {
                eps: a.eps,
                smooth_sigma: a.sigma,
                alpha_data: a.alpha,
            };
            let fused = fuse_pipeline(&rgb, &flash, &source, &p)?;
            write_pfm(&a.out, &fused)
        }
        Command::Evaluate(a) => {
            let test = read_pfm(&a.test)?;
            let reference = read_pfm(&a.reference)?;
            let report = evaluate(&test, &reference)?;
            match a.out {
                Some(p) => write_json(&p, &report),
                None => print_json(&report),
            }
        }
        Command::Demo(a) => {
            let mut cfg = PipelineConfig::new(a.out);
            cfg.scene = a.scene;
            cfg.preset = cli.preset;
            cfg.seed = cli.seed;
            cfg.variant = a.variant;
            cfg.flash = a.flash;
            let report = run_demo(&cfg)?;
            print_json(&report)
        }
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
