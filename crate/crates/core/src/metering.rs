//! Automatic exposure: find an exposure time for cam1 at full gain, then the
//! gains for every camera/flash condition at that exposure, then derive the
//! fractional-flash and long-exposure settings algebraically.
//!
//! All gains inside this module are linear multipliers; dB only appears at
//! the `ExposureSettings` boundary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RawFrame;
use crate::sim::{
    db_to_linear, hash64, linear_to_db, render_frame, CameraId, CameraModel, ExposureSettings,
    FlashKind, Rig, SpectralScene,
};

/// Flash fractions (1/n) exercised by the burst plan besides the full flash.
pub const FRACTION_DENOMINATORS: [u32; 3] = [3, 5, 7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeteringConfig {
    /// 16-bit count the percentile is driven towards.
    pub target: f64,
    /// Added to the measured value before inverting it.
    pub offset: f64,
    pub percentile: f64,
    pub stop_delta_s: f64,
    /// Relative gain change that ends a gain search.
    pub gain_rel_tol: f64,
    pub max_iters: usize,
    /// Iteration budget of the gain searches. Starting from the maximum
    /// gain, a saturated frame only shrinks the gain by ~0.75 per step, so
    /// reaching 0 dB from 47 dB takes about 19 captures.
    pub gain_max_iters: usize,
    pub initial_exposure_s: f64,
}

impl Default for MeteringConfig {
    fn default() -> Self {
        MeteringConfig {
            target: 50000.0,
            offset: 1000.0,
            percentile: 0.99,
            stop_delta_s: 1e-3,
            gain_rel_tol: 1e-3,
            max_iters: 16,
            gain_max_iters: 32,
            initial_exposure_s: 1e-3,
        }
    }
}

impl MeteringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile < 1.0) {
            return Err(Error::Domain("percentile must be in (0, 1)".into()));
        }
        if !(self.target > 0.0 && self.target <= 65535.0) {
            return Err(Error::Domain("target must be in (0, 65535]".into()));
        }
        if self.max_iters == 0 || self.gain_max_iters == 0 {
            return Err(Error::Domain("max_iters must be >= 1".into()));
        }
        if !(self.offset >= 0.0 && self.stop_delta_s > 0.0 && self.gain_rel_tol > 0.0) {
            return Err(Error::Domain("offset and stop tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Result of one iterative search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metered {
    pub value: f64,
    /// Number of multiplicative updates applied.
    pub iterations: usize,
    /// `max_iters` was reached before the stop rule fired.
    pub truncated: bool,
    /// The last update was limited by the camera envelope.
    pub clamped: bool,
}

/// Nearest-rank percentile over every mosaic sample: the smallest value `v`
/// such that at least `ceil(p * N)` samples are `<= v`.
pub fn percentile_value(raw: &RawFrame, p: f64) -> Result<u16> {
    if raw.data.is_empty() {
        return Err(Error::Dimension("empty frame".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("percentile {p} outside (0, 1)")));
    }
    let mut hist = vec![0usize; 65536];
    for &v in &raw.data {
        hist[v as usize] += 1;
    }
    let rank = ((p * raw.data.len() as f64).ceil() as usize).max(1);
    let mut seen = 0;
    for (v, &count) in hist.iter().enumerate() {
        seen += count;
        if seen >= rank {
            return Ok(v as u16);
        }
    }
    unreachable!("rank never exceeds sample count")
}

fn measure(raw: &RawFrame, cfg: &MeteringConfig) -> Result<(f64, bool)> {
    let v = percentile_value(raw, cfg.percentile)?;
    Ok((v as f64, v as u32 >= raw.white_level()))
}

fn inverse_gain(v: f64, cfg: &MeteringConfig) -> f64 {
    cfg.target / (v + cfg.offset)
}

/// Exposure search at maximum gain with the flash off:
/// `T_k = T_{k-1} * target / (v_{k-1} + offset)` until consecutive exposures
/// differ by less than `stop_delta_s`. A saturated frame never counts as
/// converged, so over-bright scenes keep shrinking T.
pub fn meter_exposure<F>(mut capture: F, cfg: &MeteringConfig, cam: &CameraModel) -> Result<Metered>
where
    F: FnMut(&ExposureSettings) -> Result<RawFrame>,
{
    cfg.validate()?;
    let mut t = cam.clamp_exposure(cfg.initial_exposure_s);
    let mut clamped = false;
    for k in 1..=cfg.max_iters {
        let settings = ExposureSettings {
            exposure_s: t,
            gain_db: cam.max_gain_db(),
            flash: FlashKind::Off,
            flash_fraction: 1.0,
            ..ExposureSettings::default()
        };
        let raw = capture(&settings)?;
        let (v, saturated) = measure(&raw, cfg)?;
        let proposed = t * inverse_gain(v, cfg);
        if !proposed.is_finite() {
            return Err(Error::Numeric(format!("exposure update diverged at T = {t} s")));
        }
        let next = cam.clamp_exposure(proposed);
        clamped = next != proposed;
        if (next - t).abs() < cfg.stop_delta_s && !saturated {
            return Ok(Metered {
                value: next,
                iterations: k,
                truncated: false,
                clamped,
            });
        }
        t = next;
    }
    Ok(Metered {
        value: t,
        iterations: cfg.max_iters,
        truncated: true,
        clamped,
    })
}

/// Gain search at a fixed exposure, starting from the camera's maximum gain.
pub fn meter_gain<F>(
    mut capture: F,
    cfg: &MeteringConfig,
    cam: &CameraModel,
    exposure_s: f64,
    flash: FlashKind,
) -> Result<Metered>
where
    F: FnMut(&ExposureSettings) -> Result<RawFrame>,
{
    cfg.validate()?;
    let (gmin, gmax) = (cam.min_gain_linear(), cam.max_gain_linear());
    let mut g = gmax;
    let mut clamped = false;
    for k in 1..=cfg.gain_max_iters {
        let settings = ExposureSettings {
            exposure_s,
            gain_db: linear_to_db(g).clamp(cam.gain_db_range.0, cam.gain_db_range.1),
            flash,
            flash_fraction: 1.0,
            ..ExposureSettings::default()
        };
        let raw = capture(&settings)?;
        let (v, saturated) = measure(&raw, cfg)?;
        let proposed = g * inverse_gain(v, cfg);
        if !proposed.is_finite() {
            return Err(Error::Numeric(format!("gain update diverged at g = {g}")));
        }
        let next = proposed.clamp(gmin, gmax);
        clamped = next != proposed;
        let settled = (next - g).abs() < cfg.gain_rel_tol * g;
        if settled && (!saturated || next <= gmin) {
            return Ok(Metered {
                value: next,
                iterations: k,
                truncated: false,
                clamped,
            });
        }
        g = next;
    }
    Ok(Metered {
        value: g,
        iterations: cfg.gain_max_iters,
        truncated: true,
        clamped,
    })
}

/// Gain for a flash lit during `T/n` of a `T` exposure, given the no-flash
/// gain `g_e` and the full-flash gain `g_ef` that both hit the target.
pub fn fractional_flash_gain(g_e: f64, g_ef: f64, n: u32) -> Result<f64> {
    if !(g_e > 0.0 && g_ef > 0.0) {
        return Err(Error::Domain(format!(
            "gains must be positive (g_e = {g_e}, g_ef = {g_ef})"
        )));
    }
    if n == 0 {
        return Err(Error::Domain("flash denominator n must be >= 1".into()));
    }
    if g_ef > g_e {
        return Err(Error::Domain(format!(
            "flash gain {g_ef} exceeds ambient-only gain {g_e}"
        )));
    }
    let n = n as f64;
    Ok(n * g_e / (n + g_e / g_ef - 1.0))
}

/// Gain for a `T/n` exposure lit by the flash throughout: `n` times the
/// full-flash gain, limited to the camera maximum. Returns `(gain, clamped)`.
pub fn burst2_fractional_gain(g_full_flash: f64, n: u32, cam: &CameraModel) -> (f64, bool) {
    let g = n as f64 * g_full_flash;
    let max = cam.max_gain_linear();
    if g > max {
        (max, true)
    } else {
        (g, false)
    }
}

/// Long-exposure settings from a no-flash gain in dB: the gain is traded
/// for exposure time up to the camera's longest exposure.
pub fn long_exposure_settings(g_db: f64, exposure_s: f64, cam: &CameraModel) -> (f64, f64) {
    let product = db_to_linear(g_db) * exposure_s;
    let tau = product.min(cam.exposure_range.1);
    (tau, product / tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongExposure {
    pub tau_s: f64,
    pub gain: f64,
}

/// Gain key for a camera and flash, e.g. `cam2_ir`.
pub fn condition_key(cam: CameraId, flash: FlashKind) -> String {
    let flash = match flash {
        FlashKind::Off => "noflash",
        FlashKind::White => "white",
        FlashKind::Nir => "ir",
        FlashKind::NirNuv => "uvir",
        FlashKind::Nuv => "uv",
    };
    format!("{}_{}", cam.as_str(), flash)
}

/// Which burst a fractional gain belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BurstKind {
    /// Exposure T, flash lit for T/n.
    Uniform,
    /// Exposure T/n, flash lit throughout.
    Matched,
}

pub fn fractional_key(burst: BurstKind, n: u32) -> String {
    match burst {
        BurstKind::Uniform => format!("burst1_n{n}"),
        BurstKind::Matched => format!("burst2_n{n}"),
    }
}

pub const METERED_FLASHES: [FlashKind; 3] = [FlashKind::White, FlashKind::Nir, FlashKind::NirNuv];
pub const DARK_FLASHES: [FlashKind; 2] = [FlashKind::Nir, FlashKind::NirNuv];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeteringResult {
    #[serde(rename = "T_s")]
    pub exposure_s: f64,
    pub gains: BTreeMap<String, f64>,
    pub fractional_gains: BTreeMap<String, BTreeMap<String, f64>>,
    pub long_exposure: BTreeMap<String, LongExposure>,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl MeteringResult {
    pub fn gain(&self, cam: CameraId, flash: FlashKind) -> Result<f64> {
        let key = condition_key(cam, flash);
        self.gains
            .get(&key)
            .copied()
            .ok_or(Error::IncompleteMetering(key))
    }

    pub fn fractional_gain(&self, cam: CameraId, flash: FlashKind, burst: BurstKind, n: u32) -> Result<f64> {
        let cond = condition_key(cam, flash);
        let key = fractional_key(burst, n);
        self.fractional_gains
            .get(&cond)
            .and_then(|m| m.get(&key))
            .copied()
            .ok_or_else(|| Error::IncompleteMetering(format!("{cond}/{key}")))
    }

    pub fn long_exposure(&self, cam: CameraId) -> Result<LongExposure> {
        self.long_exposure
            .get(cam.as_str())
            .copied()
            .ok_or_else(|| Error::IncompleteMetering(format!("long_exposure/{}", cam.as_str())))
    }
}

/// Runs the whole metering sequence against a two-camera capture callback.
pub fn run_full_metering<F>(mut capture: F, cfg: &MeteringConfig, rig: &Rig) -> Result<MeteringResult>
where
    F: FnMut(CameraId, &ExposureSettings) -> Result<RawFrame>,
{
    let mut flags = Vec::new();
    let note = |what: &str, m: &Metered, flags: &mut Vec<String>| {
        if m.truncated {
            flags.push(format!("{what}: truncated after {} iterations", m.iterations));
        }
        if m.clamped {
            flags.push(format!("{what}: clamped to camera envelope"));
        }
    };

    // (1) exposure for cam1 at maximum gain, flash off.
    let exposure = meter_exposure(|s| capture(CameraId::Cam1, s), cfg, &rig.cam1)?;
    note("exposure", &exposure, &mut flags);
    let t = exposure.value;

    let mut gains = BTreeMap::new();
    gains.insert(condition_key(CameraId::Cam1, FlashKind::Off), rig.cam1.max_gain_linear());

    // (2) cam2 without flash; (3) both cameras under each flash.
    let mut conditions = vec![(CameraId::Cam2, FlashKind::Off)];
    for flash in METERED_FLASHES {
        conditions.push((CameraId::Cam1, flash));
        conditions.push((CameraId::Cam2, flash));
    }
    for (id, flash) in conditions {
        let key = condition_key(id, flash);
        let m = meter_gain(|s| capture(id, s), cfg, rig.camera(id), t, flash)?;
        note(&key, &m, &mut flags);
        gains.insert(key, m.value);
    }

    // (4) fractional flashes.
    let mut fractional_gains = BTreeMap::new();
    for id in [CameraId::Cam1, CameraId::Cam2] {
        let g_e = gains[&condition_key(id, FlashKind::Off)];
        for flash in DARK_FLASHES {
            let key = condition_key(id, flash);
            let mut g_ef = gains[&key];
            if g_ef > g_e {
                // Noise can put the flash gain marginally above the ambient one.
                flags.push(format!("{key}: flash gain above ambient gain, treated as equal"));
                g_ef = g_e;
            }
            let mut per_n = BTreeMap::new();
            for n in FRACTION_DENOMINATORS {
                per_n.insert(fractional_key(BurstKind::Uniform, n), fractional_flash_gain(g_e, g_ef, n)?);
                let (g2, clamped) = burst2_fractional_gain(g_ef, n, rig.camera(id));
                if clamped {
                    flags.push(format!("{key}/burst2_n{n}: clamped to maximum gain"));
                }
                per_n.insert(fractional_key(BurstKind::Matched, n), g2);
            }
            fractional_gains.insert(key, per_n);
        }
    }

    // (5) long exposure per camera.
    let mut long_exposure = BTreeMap::new();
    for id in [CameraId::Cam1, CameraId::Cam2] {
        let g_db = linear_to_db(gains[&condition_key(id, FlashKind::Off)]);
        let (tau_s, gain) = long_exposure_settings(g_db, t, rig.camera(id));
        long_exposure.insert(id.as_str().to_string(), LongExposure { tau_s, gain });
    }

    Ok(MeteringResult {
        exposure_s: t,
        gains,
        fractional_gains,
        long_exposure,
        flags,
    })
}

/// Capture callback backed by the simulator. Every capture draws fresh
/// noise from a seed derived from `(seed, capture counter)`, scaled for the
/// requested gain.
pub struct SimulatorCapture<'a> {
    pub scene: &'a SpectralScene,
    pub rig: &'a Rig,
    pub seed: u64,
    pub with_noise: bool,
    count: u64,
}

impl<'a> SimulatorCapture<'a> {
    pub fn new(scene: &'a SpectralScene, rig: &'a Rig, seed: u64, with_noise: bool) -> Self {
        SimulatorCapture {
            scene,
            rig,
            seed,
            with_noise,
            count: 0,
        }
    }

    pub fn capture(&mut self, id: CameraId, settings: &ExposureSettings) -> Result<RawFrame> {
        let mut s = settings.clone();
        s.noise = if self.with_noise {
            let seed = hash64(&[self.seed, 0x6d65_7465_72, self.count]);
            self.scene.noise.at_gain(db_to_linear(s.gain_db), seed)
        } else {
            crate::sim::NoiseParams::off()
        };
        self.count += 1;
        render_frame(self.scene, self.rig.camera(id), &self.rig.flashes, &s)
    }
}
