//! Band-sampled radiometric model of the two-camera dark-flash rig.
//!
//! Spectra are sampled in five bands ordered `[NUV, Blue, Green, Red, NIR]`.
//! `cam1` is the filtered RGB camera, `cam2` the NIR-G-NUV camera whose red
//! and blue mosaic sites record NIR and NUV. Scenes are defined at cam2's
//! viewpoint; cam1 sees them shifted by the stereo disparity.

mod noise;
mod render;
mod scene;
pub mod synthetic;

pub use noise::{gaussian_at, hash64};
pub use render::{disparity_from_depth, render_frame, render_signal};
pub use scene::{SceneFile, SpectralScene};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::CfaPattern;

pub const BAND_COUNT: usize = 5;

/// Per-band spectral vector.
pub type Spectrum = [f64; BAND_COUNT];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Band {
    Nuv,
    Blue,
    Green,
    Red,
    Nir,
}

impl Band {
    pub const ALL: [Band; BAND_COUNT] = [Band::Nuv, Band::Blue, Band::Green, Band::Red, Band::Nir];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraId {
    Cam1,
    Cam2,
}

impl CameraId {
    pub fn as_str(self) -> &'static str {
        match self {
            CameraId::Cam1 => "cam1",
            CameraId::Cam2 => "cam2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum FlashKind {
    #[default]
    #[serde(rename = "OFF")]
    Off,
    #[serde(rename = "NIR")]
    Nir,
    #[serde(rename = "NUV")]
    Nuv,
    #[serde(rename = "NIR+NUV")]
    NirNuv,
    #[serde(rename = "WHITE")]
    White,
}

impl FlashKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FlashKind::Off => "off",
            FlashKind::Nir => "nir",
            FlashKind::Nuv => "nuv",
            FlashKind::NirNuv => "nir_nuv",
            FlashKind::White => "white",
        }
    }
}

/// Response preset: `Ideal` uses box-shaped responses; `Prototype` lets
/// cam2's green leak NIR and the NIR flash emit a little red.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Ideal,
    Prototype,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(Preset::Ideal),
            "prototype" => Ok(Preset::Prototype),
            other => Err(Error::Domain(format!("unknown preset {other:?}"))),
        }
    }
}

/// Signal-dependent Gaussian noise: variance `read_sigma^2 + shot_scale * s`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseParams {
    pub read_sigma: f64,
    pub shot_scale: f64,
    pub seed: u64,
}

impl NoiseParams {
    pub fn off() -> Self {
        NoiseParams::default()
    }

    pub fn is_off(&self) -> bool {
        self.read_sigma == 0.0 && self.shot_scale == 0.0
    }

    /// Output-referred noise for a sensor whose unity-gain noise is `self`
    /// and whose analog gain is `gain` (linear): read noise is amplified by
    /// the gain, shot variance by the gain times the output signal.
    pub fn at_gain(&self, gain: f64, seed: u64) -> NoiseParams {
        NoiseParams {
            read_sigma: self.read_sigma * gain,
            shot_scale: self.shot_scale * gain,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.read_sigma >= 0.0 && self.shot_scale >= 0.0) {
            return Err(Error::Domain("noise parameters must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureSettings {
    pub exposure_s: f64,
    pub gain_db: f64,
    pub flash: FlashKind,
    /// Flash on-time as a fraction of the exposure (1/n).
    pub flash_fraction: f64,
    pub noise: NoiseParams,
}

impl Default for ExposureSettings {
    fn default() -> Self {
        ExposureSettings {
            exposure_s: 1e-3,
            gain_db: 0.0,
            flash: FlashKind::Off,
            flash_fraction: 1.0,
            noise: NoiseParams::off(),
        }
    }
}

/// Linear multiplier for a gain in dB.
#[inline]
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

#[inline]
pub fn linear_to_db(gain: f64) -> f64 {
    20.0 * gain.log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub id: CameraId,
    /// Sensitivity of each mosaic channel (R, G, B sites) to each band.
    pub response: [Spectrum; 3],
    pub gain_db_range: (f64, f64),
    pub exposure_range: (f64, f64),
    pub adc_bits: u32,
    pub frame_interval_floor_s: f64,
    pub cfa_pattern: CfaPattern,
    /// Focal length times baseline (pixel·m); zero for the reference view.
    pub baseline_focal: f64,
}

const ENVELOPE_SLACK: f64 = 1e-9;

impl CameraModel {
    fn base(id: CameraId, response: [Spectrum; 3], baseline_focal: f64) -> Self {
        CameraModel {
            id,
            response,
            gain_db_range: (0.0, 47.0),
            exposure_range: (6e-6, 30.0),
            adc_bits: 12,
            frame_interval_floor_s: 0.040,
            cfa_pattern: CfaPattern::Rggb,
            baseline_focal,
        }
    }

    /// The filtered RGB camera. Blind to NUV and NIR in both presets.
    pub fn cam1(_preset: Preset, baseline_focal: f64) -> Self {
        let response = [
            [0.0, 0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 0.0],
        ];
        CameraModel::base(CameraId::Cam1, response, baseline_focal)
    }

    /// The NIR-G-NUV camera (reference view).
    pub fn cam2(preset: Preset) -> Self {
        let green_nir_leak = match preset {
            Preset::Ideal => 0.0,
            Preset::Prototype => 0.2,
        };
        let response = [
            [0.0, 0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0, green_nir_leak],
            [0.6, 0.0, 0.0, 0.0, 0.0],
        ];
        CameraModel::base(CameraId::Cam2, response, 0.0)
    }

    pub fn max_gain_db(&self) -> f64 {
        self.gain_db_range.1
    }

    pub fn max_gain_linear(&self) -> f64 {
        db_to_linear(self.gain_db_range.1)
    }

    pub fn min_gain_linear(&self) -> f64 {
        db_to_linear(self.gain_db_range.0)
    }

    pub fn clamp_exposure(&self, t: f64) -> f64 {
        t.clamp(self.exposure_range.0, self.exposure_range.1)
    }

    /// Checks a settings tuple against this camera's operating envelope.
    pub fn check_settings(&self, s: &ExposureSettings) -> Result<()> {
        let (tmin, tmax) = self.exposure_range;
        if !(s.exposure_s >= tmin * (1.0 - ENVELOPE_SLACK) && s.exposure_s <= tmax * (1.0 + ENVELOPE_SLACK)) {
            return Err(Error::Range(format!(
                "exposure {} s outside [{tmin}, {tmax}] s",
                s.exposure_s
            )));
        }
        let (gmin, gmax) = self.gain_db_range;
        if !(s.gain_db >= gmin - ENVELOPE_SLACK && s.gain_db <= gmax + ENVELOPE_SLACK) {
            return Err(Error::Range(format!(
                "gain {} dB outside [{gmin}, {gmax}] dB",
                s.gain_db
            )));
        }
        if !(s.flash_fraction > 0.0 && s.flash_fraction <= 1.0) {
            return Err(Error::Range(format!(
                "flash fraction {} outside (0, 1]",
                s.flash_fraction
            )));
        }
        if s.flash == FlashKind::Off && s.flash_fraction != 1.0 {
            return Err(Error::Range("flash fraction must be 1 when the flash is off".into()));
        }
        s.noise.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.response.iter().flatten().any(|&v| !(v >= 0.0)) {
            return Err(Error::Domain("camera response entries must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlashModel {
    pub kind: FlashKind,
    pub emission: Spectrum,
}

/// Full-power emission of every flash on the rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlashBank {
    pub nir: Spectrum,
    pub nuv: Spectrum,
    pub white: Spectrum,
}

impl FlashBank {
    pub fn new(preset: Preset) -> Self {
        let red_leak = match preset {
            Preset::Ideal => 0.0,
            Preset::Prototype => 0.04,
        };
        FlashBank {
            nir: [0.0, 0.0, 0.0, red_leak, 5.0],
            nuv: [3.0, 0.0, 0.0, 0.0, 0.0],
            white: [0.0, 0.25, 0.25, 0.25, 0.0],
        }
    }

    pub fn model(&self, kind: FlashKind) -> FlashModel {
        let emission = match kind {
            FlashKind::Off => [0.0; BAND_COUNT],
            FlashKind::Nir => self.nir,
            FlashKind::Nuv => self.nuv,
            FlashKind::NirNuv => {
                let mut e = self.nir;
                e.iter_mut().zip(self.nuv).for_each(|(a, b)| *a += b);
                e
            }
            FlashKind::White => self.white,
        };
        FlashModel { kind, emission }
    }
}

/// Both cameras plus the flash bank for one response preset.
#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    pub preset: Preset,
    pub cam1: CameraModel,
    pub cam2: CameraModel,
    pub flashes: FlashBank,
}

impl Rig {
    pub fn new(preset: Preset, baseline_focal: f64) -> Self {
        Rig {
            preset,
            cam1: CameraModel::cam1(preset, baseline_focal),
            cam2: CameraModel::cam2(preset),
            flashes: FlashBank::new(preset),
        }
    }

    pub fn camera(&self, id: CameraId) -> &CameraModel {
        match id {
            CameraId::Cam1 => &self.cam1,
            CameraId::Cam2 => &self.cam2,
        }
    }
}
