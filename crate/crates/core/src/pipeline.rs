//! End-to-end run on a simulated scene: meter, capture, register, fuse and
//! evaluate, writing every intermediate to an output tree.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::burst::{execute_session, plan_session, BurstPlan, FrameTag, SessionManifest, VARIANTS};
use crate::error::{Error, Result};
use crate::formats::{write_json, write_pfm};
use crate::fusion::{fuse_pipeline, GridSource, ScaleMapParams};
use crate::image::{downsample_area, luma, LinearImage};
use crate::metering::{run_full_metering, MeteringConfig, MeteringResult, SimulatorCapture, DARK_FLASHES};
use crate::metrics::{evaluate, MetricReport};
use crate::registration::{develop, long_exposure_frame, register_pair, warp_gather, RegisterOptions};
use crate::sim::synthetic::{bundled_scene, SceneOptions};
use crate::sim::{CameraId, FlashKind, Preset, Rig, SpectralScene};

pub const WORKING_SIZE: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Scene header to load; `None` uses the bundled scene.
    pub scene: Option<PathBuf>,
    /// Overrides the preset stored with the scene.
    pub preset: Option<Preset>,
    pub seed: u64,
    pub variant: u32,
    pub flash: FlashKind,
    pub out_dir: PathBuf,
    pub working_size: usize,
    pub metering: MeteringConfig,
    pub register: RegisterOptions,
    pub fusion: ScaleMapParams,
}

impl PipelineConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            scene: None,
            preset: None,
            seed: 7,
            variant: 5,
            flash: FlashKind::Nir,
            out_dir: out_dir.into(),
            working_size: WORKING_SIZE,
            metering: MeteringConfig::default(),
            register: RegisterOptions::default(),
            fusion: ScaleMapParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !VARIANTS.contains(&self.variant) {
            return Err(Error::Range(format!("variant must be one of {VARIANTS:?}, got {}", self.variant)));
        }
        if !DARK_FLASHES.contains(&self.flash) {
            return Err(Error::Range(format!("flash must be NIR or NIR+NUV, got {}", self.flash.as_str())));
        }
        if self.working_size < 16 {
            return Err(Error::Range(format!("working size {} is too small", self.working_size)));
        }
        if let Some(p) = &self.scene {
            if !p.exists() {
                return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        self.metering.validate()?;
        self.register.solver.validate()?;
        self.fusion.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    /// Reference used by `fused` and `noisy`: the warped long exposure.
    pub reference: String,
    pub fused: MetricReport,
    pub noisy: MetricReport,
    /// Same measurements against the scene's clean RGB, when it has one.
    pub fused_vs_clean: Option<MetricReport>,
    pub noisy_vs_clean: Option<MetricReport>,
    pub variant: u32,
    pub flash: FlashKind,
    pub t_index: usize,
    pub low_confidence: bool,
    pub flow_iterations: [usize; 2],
}

/// Frames the demo captures: burst 1 of the chosen variant and flash plus
/// the long-exposure pair.
pub fn demo_plan(full: &BurstPlan, variant: u32, flash: FlashKind) -> BurstPlan {
    full.filtered(|f| {
        f.tag == FrameTag::LongExposure
            || (f.variant == variant
                && f.flash_kind == flash
                && matches!(f.tag, FrameTag::Burst1Off | FrameTag::Burst1On))
    })
}

fn relative_to(path: &Path, base: &Path) -> String {
    // Both paths live under `out_dir`; only the `burst/ -> scene/` case is needed.
    match (path.strip_prefix(base.parent().unwrap_or(base)), base.file_name()) {
        (Ok(rel), Some(_)) => format!("../{}", rel.to_string_lossy()),
        _ => path.to_string_lossy().into_owned(),
    }
}

/// Runs the full chain and writes `fused.pfm`, `flow.pfm` and `report.json`
/// (plus intermediates) under `cfg.out_dir`.
pub fn run_demo(cfg: &PipelineConfig) -> Result<DemoReport> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let scene_dir = out.join("scene");
    let scene_path = scene_dir.join("scene.json");
    let mut scene = match &cfg.scene {
        Some(p) => SpectralScene::load(p)?,
        None => bundled_scene(&SceneOptions::default()),
    };
    if let Some(p) = cfg.preset {
        scene.preset = p;
    }
    scene.save(&scene_path)?;
    log::info!("scene {}x{} written to {}", scene.width, scene.height, scene_path.display());

    let rig = Rig::new(scene.preset, scene.baseline_focal);
    let metering = meter_scene(&scene, &rig, cfg)?;
    write_json(&out.join("metering.json"), &metering)?;

    let full = plan_session(&metering, &rig)?;
    full.validate(rig.cam1.frame_interval_floor_s)?;
    let plan = demo_plan(&full, cfg.variant, cfg.flash);
    let burst_dir = out.join("burst");
    let manifest = execute_session(
        &plan,
        &scene,
        &rig,
        &burst_dir,
        &relative_to(&scene_path, &burst_dir),
        cfg.seed,
    )?;

    let t_index = manifest
        .frames
        .iter()
        .find(|e| e.spec.tag == FrameTag::Burst1Off)
        .map(|e| e.spec.t_index)
        .ok_or_else(|| Error::Manifest("capture holds no flash-off burst frame".into()))?;
    let size = Some((cfg.working_size, cfg.working_size));
    let opts = RegisterOptions {
        working_size: size,
        ..cfg.register.clone()
    };
    let reg = register_pair(&manifest, &burst_dir, t_index, &opts)?;
    write_pfm(&out.join("flow.pfm"), &reg.flow.to_image()?)?;

    let (warped, guide) = warped_inputs(&manifest, &burst_dir, t_index, size)?;
    let warped = warp_gather(&warped, &reg.flow)?;
    let reference = warp_gather(&develop(&long_exposure_frame(&manifest, &burst_dir, CameraId::Cam1)?, size)?, &reg.flow)?;
    write_pfm(&out.join("warped_rgb.pfm"), &warped)?;
    write_pfm(&out.join("flash.pfm"), &guide)?;
    write_pfm(&out.join("reference.pfm"), &reference)?;

    let fused = fuse_pipeline(&warped, &guide, &GridSource::Identity, &cfg.fusion)?;
    write_pfm(&out.join("fused.pfm"), &fused)?;

    let clean = match &scene.clean_rgb {
        Some(c) => Some(downsample_area(c, cfg.working_size, cfg.working_size)?),
        None => None,
    };
    let vs_clean = |img: &LinearImage| clean.as_ref().map(|c| evaluate(img, c)).transpose();
    let report = DemoReport {
        reference: "long_exposure".into(),
        fused: evaluate(&fused, &reference)?,
        noisy: evaluate(&warped, &reference)?,
        fused_vs_clean: vs_clean(&fused)?,
        noisy_vs_clean: vs_clean(&warped)?,
        variant: cfg.variant,
        flash: cfg.flash,
        t_index,
        low_confidence: reg.low_confidence,
        flow_iterations: [reg.reports[0].iterations, reg.reports[1].iterations],
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Metering on the simulator with noisy captures seeded from `cfg.seed`.
pub fn meter_scene(scene: &SpectralScene, rig: &Rig, cfg: &PipelineConfig) -> Result<MeteringResult> {
    let mut cap = SimulatorCapture::new(scene, rig, cfg.seed, true);
    run_full_metering(|id, s| cap.capture(id, s), &cfg.metering, rig)
}

/// cam1 flash-on RGB and cam2 flash-on luma from shot `t_index + 1`, developed
/// at `size`.
pub fn warped_inputs(
    manifest: &SessionManifest,
    dir: &Path,
    t_index: usize,
    size: Option<(usize, usize)>,
) -> Result<(LinearImage, LinearImage)> {
    let get = |cam: CameraId| {
        let e = manifest
            .find(t_index + 1, cam)
            .filter(|e| e.spec.tag.is_flash_on())
            .ok_or_else(|| Error::Manifest(format!("no {} flash-on frame at shot {}", cam.as_str(), t_index + 1)))?;
        develop(&manifest.read_frame(dir, e)?, size)
    };
    Ok((get(CameraId::Cam1)?, luma(&get(CameraId::Cam2)?)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = PipelineConfig::new("out");
        c.validate().unwrap();
        c.variant = 4;
        assert!(matches!(c.validate(), Err(Error::Range(_))));
        c.variant = 3;
        c.flash = FlashKind::White;
        assert!(matches!(c.validate(), Err(Error::Range(_))));
        c.flash = FlashKind::NirNuv;
        c.scene = Some("definitely/missing.json".into());
        let e = c.validate().unwrap_err();
        assert!(e.to_string().contains("definitely/missing.json"));
    }

    #[test]
    fn scene_reference_is_relative() {
        let r = relative_to(Path::new("run/scene/scene.json"), Path::new("run/burst"));
        assert_eq!(r, "../scene/scene.json");
    }

    #[test]
    fn demo_plan_selects_one_burst() {
        let m = crate::burst::tests::sample_metering();
        let full = plan_session(&m, &Rig::new(Preset::Ideal, 24.0)).unwrap();
        let p = demo_plan(&full, 5, FlashKind::Nir);
        assert_eq!(p.frames.len(), 18);
        assert_eq!(p.frames.iter().filter(|f| f.tag == FrameTag::LongExposure).count(), 2);
    }
}
