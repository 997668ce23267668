//! Capture session planning and execution.
//!
//! A session loops over the exposure variants `T, T/3, T/5, T/7` and the two
//! dark flashes (NIR, NIR+NUV). Each combination is a white-flash still, two
//! interleaved off/on bursts of 4+4 shots, and a closing white still. A long
//! exposure ground-truth pair ends the session. Both cameras fire together
//! for every shot, so every shot yields one frame per camera.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{read_json, read_raw, write_json, write_raw};
use crate::image::RawFrame;
use crate::metering::{BurstKind, MeteringResult, DARK_FLASHES};
use crate::sim::{
    db_to_linear, hash64, linear_to_db, render_frame, CameraId, CameraModel, ExposureSettings,
    FlashKind, NoiseParams, Rig, SpectralScene,
};

pub const VARIANTS: [u32; 4] = [1, 3, 5, 7];
pub const FRAMES_PER_BURST_PHASE: usize = 4;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameTag {
    WhiteStillPre,
    Burst1Off,
    Burst1On,
    Burst2Off,
    Burst2On,
    WhiteStillPost,
    LongExposure,
}

impl FrameTag {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameTag::WhiteStillPre => "white_still_pre",
            FrameTag::Burst1Off => "burst1_off",
            FrameTag::Burst1On => "burst1_on",
            FrameTag::Burst2Off => "burst2_off",
            FrameTag::Burst2On => "burst2_on",
            FrameTag::WhiteStillPost => "white_still_post",
            FrameTag::LongExposure => "long_exposure",
        }
    }

    pub fn is_flash_on(self) -> bool {
        matches!(self, FrameTag::Burst1On | FrameTag::Burst2On)
    }

    pub fn is_flash_off(self) -> bool {
        matches!(self, FrameTag::Burst1Off | FrameTag::Burst2Off)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub index: usize,
    pub camera_id: CameraId,
    pub settings: ExposureSettings,
    pub tag: FrameTag,
    /// Shot counter; both cameras share it.
    pub t_index: usize,
    /// Denominator n of the exposure variant (1, 3, 5 or 7).
    pub variant: u32,
    /// Dark flash of the enclosing loop (OFF for the long exposure).
    pub flash_kind: FlashKind,
    pub start_s: f64,
}

impl FrameSpec {
    pub fn file_name(&self) -> String {
        format!(
            "f{:04}_{}_{}.pgm",
            self.index,
            self.camera_id.as_str(),
            self.tag.as_str()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstPlan {
    pub metering: MeteringResult,
    pub frames: Vec<FrameSpec>,
}

fn settings(cam: &CameraModel, exposure_s: f64, gain: f64, flash: FlashKind, fraction: f64) -> ExposureSettings {
    ExposureSettings {
        exposure_s: cam.clamp_exposure(exposure_s),
        gain_db: linear_to_db(gain).clamp(cam.gain_db_range.0, cam.gain_db_range.1),
        flash,
        flash_fraction: fraction,
        noise: NoiseParams::off(),
    }
}

/// Per-camera settings for one shot of the session.
fn shot_settings(
    m: &MeteringResult,
    rig: &Rig,
    id: CameraId,
    tag: FrameTag,
    n: u32,
    flash: FlashKind,
) -> Result<ExposureSettings> {
    let cam = rig.camera(id);
    let t = m.exposure_s;
    let nf = n as f64;
    Ok(match tag {
        FrameTag::WhiteStillPre | FrameTag::WhiteStillPost => {
            settings(cam, t, m.gain(id, FlashKind::White)?, FlashKind::White, 1.0)
        }
        FrameTag::Burst1Off | FrameTag::Burst2Off => settings(cam, t, m.gain(id, FlashKind::Off)?, FlashKind::Off, 1.0),
        FrameTag::Burst1On => {
            let g = if n == 1 {
                m.gain(id, flash)?
            } else {
                m.fractional_gain(id, flash, BurstKind::Uniform, n)?
            };
            settings(cam, t, g, flash, 1.0 / nf)
        }
        FrameTag::Burst2On => match id {
            // cam1 keeps a uniform exposure; only cam2 matches the flash.
            CameraId::Cam1 => return shot_settings(m, rig, id, FrameTag::Burst1On, n, flash),
            CameraId::Cam2 => {
                let g = if n == 1 {
                    m.gain(id, flash)?
                } else {
                    m.fractional_gain(id, flash, BurstKind::Matched, n)?
                };
                settings(cam, t / nf, g, flash, 1.0)
            }
        },
        FrameTag::LongExposure => {
            let le = m.long_exposure(id)?;
            settings(cam, le.tau_s, le.gain, FlashKind::Off, 1.0)
        }
    })
}

/// Builds the deterministic capture plan for a metered scene.
pub fn plan_session(m: &MeteringResult, rig: &Rig) -> Result<BurstPlan> {
    let mut shots: Vec<(FrameTag, u32, FlashKind)> = Vec::new();
    for n in VARIANTS {
        for flash in DARK_FLASHES {
            shots.push((FrameTag::WhiteStillPre, n, flash));
            for (off, on) in [
                (FrameTag::Burst1Off, FrameTag::Burst1On),
                (FrameTag::Burst2Off, FrameTag::Burst2On),
            ] {
                for _ in 0..FRAMES_PER_BURST_PHASE {
                    shots.push((off, n, flash));
                    shots.push((on, n, flash));
                }
            }
            shots.push((FrameTag::WhiteStillPost, n, flash));
        }
    }
    shots.push((FrameTag::LongExposure, 1, FlashKind::Off));

    let floor = rig.cam1.frame_interval_floor_s.max(rig.cam2.frame_interval_floor_s);
    let mut frames = Vec::with_capacity(shots.len() * 2);
    let mut start = 0.0;
    for (t_index, (tag, n, flash)) in shots.into_iter().enumerate() {
        let mut longest: f64 = 0.0;
        for id in [CameraId::Cam1, CameraId::Cam2] {
            let s = shot_settings(m, rig, id, tag, n, flash)?;
            longest = longest.max(s.exposure_s);
            frames.push(FrameSpec {
                index: frames.len(),
                camera_id: id,
                settings: s,
                tag,
                t_index,
                variant: n,
                flash_kind: flash,
                start_s: start,
            });
        }
        start += longest.max(floor);
    }
    Ok(BurstPlan {
        metering: m.clone(),
        frames,
    })
}

impl BurstPlan {
    /// Keeps the frames matching `keep`, preserving indices and timing.
    pub fn filtered(&self, keep: impl Fn(&FrameSpec) -> bool) -> BurstPlan {
        BurstPlan {
            metering: self.metering.clone(),
            frames: self.frames.iter().filter(|f| keep(f)).cloned().collect(),
        }
    }

    /// Checks the structural invariants of a complete plan.
    pub fn validate(&self, floor_s: f64) -> Result<()> {
        let bad = |msg: String| Err(Error::Manifest(msg));
        let t = self.metering.exposure_s;
        let rel = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1e-12);

        let mut by_shot: Vec<Vec<&FrameSpec>> = Vec::new();
        for f in &self.frames {
            if f.t_index >= by_shot.len() {
                by_shot.resize(f.t_index + 1, Vec::new());
            }
            by_shot[f.t_index].push(f);
        }
        let mut prev: Option<(f64, f64)> = None;
        for (t_index, shot) in by_shot.iter().enumerate() {
            if shot.is_empty() {
                continue;
            }
            let start = shot[0].start_s;
            if shot.iter().any(|f| f.start_s != start) {
                return bad(format!("shot {t_index}: cameras do not fire together"));
            }
            if let Some((prev_start, prev_len)) = prev {
                if start - prev_start < prev_len.max(floor_s) - 1e-12 {
                    return bad(format!("shot {t_index} starts before the previous frame finished"));
                }
            }
            let longest = shot.iter().map(|f| f.settings.exposure_s).fold(0.0, f64::max);
            prev = Some((start, longest));

            for f in shot {
                let n = f.variant as f64;
                let s = &f.settings;
                match f.tag {
                    FrameTag::Burst1On => {
                        if !rel(s.exposure_s, t) || !rel(s.flash_fraction, 1.0 / n) {
                            return bad(format!("frame {}: burst 1 flash-on must expose T with flash T/n", f.index));
                        }
                    }
                    FrameTag::Burst2On if f.camera_id == CameraId::Cam2 => {
                        if !rel(s.exposure_s, t / n) || s.flash_fraction != 1.0 {
                            return bad(format!("frame {}: burst 2 flash-on must expose T/n with full flash", f.index));
                        }
                    }
                    FrameTag::Burst1Off | FrameTag::Burst2Off => {
                        if s.flash != FlashKind::Off {
                            return bad(format!("frame {}: flash-off frame has flash {:?}", f.index, s.flash));
                        }
                    }
                    _ => {}
                }
            }
        }

        // Off/on alternation inside each burst, per camera.
        let mut seen = BTreeSet::new();
        for id in [CameraId::Cam1, CameraId::Cam2] {
            let seq: Vec<&FrameSpec> = self.frames.iter().filter(|f| f.camera_id == id).collect();
            for w in seq.windows(2) {
                let (a, b) = (w[0].tag, w[1].tag);
                let same_burst = matches!(
                    (a, b),
                    (FrameTag::Burst1Off, FrameTag::Burst1Off)
                        | (FrameTag::Burst1On, FrameTag::Burst1On)
                        | (FrameTag::Burst2Off, FrameTag::Burst2Off)
                        | (FrameTag::Burst2On, FrameTag::Burst2On)
                );
                if same_burst && w[1].t_index == w[0].t_index + 1 {
                    return bad(format!("frames {} and {} break the off/on interleave", w[0].index, w[1].index));
                }
            }
            for f in seq {
                seen.insert((id, f.tag));
            }
        }
        let _ = seen;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub spec: FrameSpec,
    /// Relative to the manifest directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub format_version: u32,
    pub scene: String,
    pub seed: u64,
    pub metering: MeteringResult,
    pub frames: Vec<ManifestEntry>,
}

impl SessionManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_NAME), self)
    }

    /// Loads `manifest.json` from a session directory.
    pub fn load(dir: &Path) -> Result<SessionManifest> {
        let path = dir.join(MANIFEST_NAME);
        let m: SessionManifest = read_json(&path)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported format_version {}", m.format_version),
            ));
        }
        Ok(m)
    }

    /// Confirms that every referenced frame exists, parses, and matches its spec.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for e in &self.frames {
            let raw = read_raw(&dir.join(&e.path))?;
            if raw.camera_id != e.spec.camera_id || raw.settings != e.spec.settings {
                return Err(Error::Manifest(format!("{}: sidecar does not match its spec", e.path)));
            }
        }
        Ok(())
    }

    pub fn find(&self, t_index: usize, cam: CameraId) -> Option<&ManifestEntry> {
        self.frames
            .iter()
            .find(|e| e.spec.t_index == t_index && e.spec.camera_id == cam)
    }

    pub fn long_exposure(&self, cam: CameraId) -> Option<&ManifestEntry> {
        self.frames
            .iter()
            .find(|e| e.spec.tag == FrameTag::LongExposure && e.spec.camera_id == cam)
    }

    pub fn read_frame(&self, dir: &Path, entry: &ManifestEntry) -> Result<RawFrame> {
        read_raw(&dir.join(&entry.path))
    }
}

/// Noise seed of frame `index` within a session seeded with `seed`.
pub fn frame_seed(seed: u64, index: usize) -> u64 {
    hash64(&[seed, 0x6275_7273_74, index as u64])
}

/// Renders every frame of `plan`, writes PGM/JSON pairs plus `manifest.json`
/// into `out_dir`, and returns the manifest. On failure every file written
/// by this call is removed.
pub fn execute_session(
    plan: &BurstPlan,
    scene: &SpectralScene,
    rig: &Rig,
    out_dir: &Path,
    scene_ref: &str,
    seed: u64,
) -> Result<SessionManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let results: Vec<Result<PathBuf>> = plan
        .frames
        .par_iter()
        .map(|spec| {
            let mut s = spec.settings.clone();
            s.noise = scene
                .noise
                .at_gain(db_to_linear(s.gain_db), frame_seed(seed, spec.index));
            let path = out_dir.join(spec.file_name());
            render_frame(scene, rig.camera(spec.camera_id), &rig.flashes, &s)
                .and_then(|raw| write_raw(&path, &raw))
                .map(|_| path)
                .map_err(|e| Error::Frame {
                    index: spec.index,
                    tag: spec.tag.as_str().to_string(),
                    source: Box::new(e),
                })
        })
        .collect();

    if results.iter().any(|r| r.is_err()) {
        for spec in &plan.frames {
            let path = out_dir.join(spec.file_name());
            let _ = std::fs::remove_file(crate::formats::sidecar_path(&path));
            let _ = std::fs::remove_file(&path);
        }
        let err = results.into_iter().find_map(|r| r.err()).expect("an error exists");
        return Err(err);
    }

    let frames = plan
        .frames
        .iter()
        .map(|spec| {
            let mut spec = spec.clone();
            spec.settings.noise = scene
                .noise
                .at_gain(db_to_linear(spec.settings.gain_db), frame_seed(seed, spec.index));
            let path = spec.file_name();
            ManifestEntry { spec, path }
        })
        .collect();
    let manifest = SessionManifest {
        format_version: MANIFEST_VERSION,
        scene: scene_ref.to_string(),
        seed,
        metering: plan.metering.clone(),
        frames,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::metering::{condition_key, fractional_flash_gain, fractional_key, LongExposure, FRACTION_DENOMINATORS, METERED_FLASHES};
    use crate::sim::synthetic::{bundled_scene, SceneOptions};
    use crate::sim::Preset;
    use std::collections::BTreeMap;

    pub(crate) fn sample_metering() -> MeteringResult {
        let mut gains = BTreeMap::new();
        gains.insert("cam1_noflash".into(), db_to_linear(47.0));
        gains.insert("cam2_noflash".into(), db_to_linear(42.0));
        for flash in METERED_FLASHES {
            gains.insert(condition_key(CameraId::Cam1, flash), db_to_linear(40.0));
            gains.insert(condition_key(CameraId::Cam2, flash), db_to_linear(3.0));
        }
        let mut fractional_gains = BTreeMap::new();
        for id in [CameraId::Cam1, CameraId::Cam2] {
            for flash in DARK_FLASHES {
                let g_e = gains[&condition_key(id, FlashKind::Off)];
                let g_ef = gains[&condition_key(id, flash)];
                let mut per = BTreeMap::new();
                for n in FRACTION_DENOMINATORS {
                    per.insert(fractional_key(BurstKind::Uniform, n), fractional_flash_gain(g_e, g_ef, n).unwrap());
                    per.insert(fractional_key(BurstKind::Matched, n), (n as f64 * g_ef).min(db_to_linear(47.0)));
                }
                fractional_gains.insert(condition_key(id, flash), per);
            }
        }
        let mut long_exposure = BTreeMap::new();
        long_exposure.insert("cam1".into(), LongExposure { tau_s: 11.2, gain: 1.0 });
        long_exposure.insert("cam2".into(), LongExposure { tau_s: 6.3, gain: 1.0 });
        MeteringResult {
            exposure_s: 0.05,
            gains,
            fractional_gains,
            long_exposure,
            flags: vec![],
        }
    }

    fn rig() -> Rig {
        Rig::new(Preset::Ideal, 24.0)
    }

    #[test]
    fn plan_has_290_frames() {
        let plan = plan_session(&sample_metering(), &rig()).unwrap();
        assert_eq!(plan.frames.len(), 290);
        plan.validate(0.040).unwrap();
        for id in [CameraId::Cam1, CameraId::Cam2] {
            let count = |tag| plan.frames.iter().filter(|f| f.camera_id == id && f.tag == tag).count();
            assert_eq!(count(FrameTag::Burst1Off), 32);
            assert_eq!(count(FrameTag::Burst1On), 32);
            assert_eq!(count(FrameTag::Burst2On), 32);
            assert_eq!(count(FrameTag::WhiteStillPre), 8);
            assert_eq!(count(FrameTag::LongExposure), 1);
        }
        assert_eq!(plan.frames.last().unwrap().tag, FrameTag::LongExposure);
        assert!(plan.frames.iter().enumerate().all(|(i, f)| f.index == i));
    }

    #[test]
    fn plan_order_follows_loops() {
        let plan = plan_session(&sample_metering(), &rig()).unwrap();
        let cam2: Vec<&FrameSpec> = plan.frames.iter().filter(|f| f.camera_id == CameraId::Cam2).collect();
        let mut expected = Vec::new();
        for n in VARIANTS {
            for flash in DARK_FLASHES {
                expected.push((n, flash, FrameTag::WhiteStillPre));
                for _ in 0..4 {
                    expected.push((n, flash, FrameTag::Burst1Off));
                    expected.push((n, flash, FrameTag::Burst1On));
                }
                for _ in 0..4 {
                    expected.push((n, flash, FrameTag::Burst2Off));
                    expected.push((n, flash, FrameTag::Burst2On));
                }
                expected.push((n, flash, FrameTag::WhiteStillPost));
            }
        }
        for (f, (n, flash, tag)) in cam2.iter().zip(&expected) {
            assert_eq!((f.variant, f.flash_kind, f.tag), (*n, *flash, *tag));
        }
    }

    #[test]
    fn burst2_uses_n_times_full_flash_gain() {
        let m = sample_metering();
        let plan = plan_session(&m, &rig()).unwrap();
        let f = plan
            .frames
            .iter()
            .find(|f| f.variant == 5 && f.tag == FrameTag::Burst2On && f.camera_id == CameraId::Cam2 && f.flash_kind == FlashKind::Nir)
            .unwrap();
        assert!((f.settings.exposure_s - m.exposure_s / 5.0).abs() < 1e-15);
        let expect = 5.0 * m.gains["cam2_ir"];
        assert!((db_to_linear(f.settings.gain_db) - expect).abs() < 1e-9 * expect);
        assert_eq!(f.settings.flash_fraction, 1.0);
    }

    #[test]
    fn variant_one_bursts_coincide() {
        let plan = plan_session(&sample_metering(), &rig()).unwrap();
        for id in [CameraId::Cam1, CameraId::Cam2] {
            let pick = |tag| {
                plan.frames
                    .iter()
                    .find(|f| f.variant == 1 && f.tag == tag && f.camera_id == id)
                    .unwrap()
                    .settings
                    .clone()
            };
            let (a, b) = (pick(FrameTag::Burst1On), pick(FrameTag::Burst2On));
            assert_eq!(a, b);
            assert_eq!(a.flash_fraction, 1.0);
        }
    }

    #[test]
    fn long_exposure_settings_come_from_metering() {
        let m = sample_metering();
        let plan = plan_session(&m, &rig()).unwrap();
        for id in [CameraId::Cam1, CameraId::Cam2] {
            let f = plan.frames.iter().find(|f| f.tag == FrameTag::LongExposure && f.camera_id == id).unwrap();
            let le = m.long_exposure(id).unwrap();
            assert_eq!(f.settings.exposure_s, le.tau_s);
            assert!((db_to_linear(f.settings.gain_db) - le.gain).abs() < 1e-12);
        }
    }

    #[test]
    fn plan_is_deterministic() {
        let m = sample_metering();
        assert_eq!(plan_session(&m, &rig()).unwrap(), plan_session(&m, &rig()).unwrap());
    }

    #[test]
    fn schedule_respects_frame_interval() {
        let plan = plan_session(&sample_metering(), &rig()).unwrap();
        for id in [CameraId::Cam1, CameraId::Cam2] {
            let seq: Vec<&FrameSpec> = plan.frames.iter().filter(|f| f.camera_id == id).collect();
            for w in seq.windows(2) {
                assert!(w[1].start_s - w[0].start_s >= w[0].settings.exposure_s.max(0.040) - 1e-12);
            }
        }
    }

    #[test]
    fn missing_metering_entry_is_reported() {
        let mut m = sample_metering();
        m.gains.remove("cam2_white");
        assert!(matches!(plan_session(&m, &rig()), Err(Error::IncompleteMetering(k)) if k == "cam2_white"));
    }

    #[test]
    fn execute_writes_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let scene = bundled_scene(&SceneOptions {
            width: 32,
            height: 24,
            ..SceneOptions::default()
        });
        let rig = rig();
        let plan = plan_session(&sample_metering(), &rig).unwrap();
        let sub = plan.filtered(|f| f.variant == 3 && f.flash_kind == FlashKind::Nir || f.tag == FrameTag::LongExposure);
        let manifest = execute_session(&sub, &scene, &rig, dir.path(), "scene.json", 7).unwrap();
        assert_eq!(manifest.frames.len(), 38);
        let pgms = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "pgm")
            .count();
        assert_eq!(pgms, 38);
        manifest.verify(dir.path()).unwrap();
        assert_eq!(SessionManifest::load(dir.path()).unwrap(), manifest);

        let again = tempfile::tempdir().unwrap();
        execute_session(&sub, &scene, &rig, again.path(), "scene.json", 7).unwrap();
        for e in &manifest.frames {
            let a = std::fs::read(dir.path().join(&e.path)).unwrap();
            let b = std::fs::read(again.path().join(&e.path)).unwrap();
            assert_eq!(a, b, "{}", e.path);
        }
    }

    #[test]
    fn render_failure_cleans_up() {
        let dir = tempfile::tempdir().unwrap();
        let scene = bundled_scene(&SceneOptions {
            width: 16,
            height: 16,
            ..SceneOptions::default()
        });
        let rig = rig();
        let mut plan = plan_session(&sample_metering(), &rig).unwrap().filtered(|f| f.t_index < 3);
        plan.frames[3].settings.exposure_s = 100.0;
        let err = execute_session(&plan, &scene, &rig, dir.path(), "s.json", 1).unwrap_err();
        assert!(matches!(err, Error::Frame { index: 3, .. }), "{err}");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
