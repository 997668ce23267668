use serde::{Deserialize, Serialize};

use super::LinearImage;
use crate::error::{Error, Result};
use crate::sim::{CameraId, ExposureSettings};

/// 2x2 Bayer phase, named by the colors of the top-left quad in reading order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CfaPattern {
    #[default]
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

/// Color class of a mosaic position. `GreenR` is a green site on a row that
/// also carries red samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CfaSite {
    Red,
    GreenR,
    GreenB,
    Blue,
}

impl CfaSite {
    /// RGB channel index observed at this site.
    pub fn channel(self) -> usize {
        match self {
            CfaSite::Red => 0,
            CfaSite::GreenR | CfaSite::GreenB => 1,
            CfaSite::Blue => 2,
        }
    }
}

impl CfaPattern {
    pub const ALL: [CfaPattern; 4] = [
        CfaPattern::Rggb,
        CfaPattern::Bggr,
        CfaPattern::Grbg,
        CfaPattern::Gbrg,
    ];

    pub fn site(self, x: usize, y: usize) -> CfaSite {
        use CfaSite::*;
        let quad = match self {
            CfaPattern::Rggb => [[Red, GreenR], [GreenB, Blue]],
            CfaPattern::Bggr => [[Blue, GreenB], [GreenR, Red]],
            CfaPattern::Grbg => [[GreenR, Red], [Blue, GreenB]],
            CfaPattern::Gbrg => [[GreenB, Blue], [Red, GreenR]],
        };
        quad[y & 1][x & 1]
    }
}

/// Single-camera Bayer mosaic with its capture metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
    pub cfa_pattern: CfaPattern,
    pub adc_bits: u32,
    pub black_level: u16,
    pub settings: ExposureSettings,
    pub camera_id: CameraId,
}

impl RawFrame {
    /// Largest legal 16-bit sample for the frame's ADC depth.
    pub fn white_level(&self) -> u32 {
        white_level(self.adc_bits)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::Dimension(format!(
                "raw frame must have even non-zero dimensions, got {}x{}",
                self.width, self.height
            )));
        }
        if self.data.len() != self.width * self.height {
            return Err(Error::Dimension(format!(
                "raw buffer has {} samples for {}x{}",
                self.data.len(),
                self.width,
                self.height
            )));
        }
        if !(1..=16).contains(&self.adc_bits) {
            return Err(Error::Range(format!("adc_bits {} outside 1..=16", self.adc_bits)));
        }
        let max = self.white_level();
        if let Some(v) = self.data.iter().find(|&&v| v as u32 > max) {
            return Err(Error::Range(format!(
                "sample {v} exceeds {}-bit white level {max}",
                self.adc_bits
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }
}

pub(crate) fn white_level(adc_bits: u32) -> u32 {
    ((1u32 << adc_bits) - 1) << (16 - adc_bits)
}

/// Samples each pixel's CFA channel and quantizes it to `adc_bits` codes
/// (round half up), stored left-shifted into 16 bits.
pub fn mosaic(img: &LinearImage, pattern: CfaPattern, adc_bits: u32) -> Result<RawFrame> {
    img.require_channels(3)?;
    if img.width() % 2 != 0 || img.height() % 2 != 0 || img.width() == 0 || img.height() == 0 {
        return Err(Error::Dimension(format!(
            "mosaic needs even dimensions, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    if !(1..=16).contains(&adc_bits) {
        return Err(Error::Range(format!("adc_bits {adc_bits} outside 1..=16")));
    }
    let max_code = ((1u32 << adc_bits) - 1) as f64;
    let shift = 16 - adc_bits;
    let mut data = Vec::with_capacity(img.width() * img.height());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let c = pattern.site(x, y).channel();
            data.push(quantize(img.get(x, y, c) as f64, max_code, shift));
        }
    }
    Ok(RawFrame {
        width: img.width(),
        height: img.height(),
        data,
        cfa_pattern: pattern,
        adc_bits,
        black_level: 0,
        settings: ExposureSettings::default(),
        camera_id: CameraId::Cam1,
    })
}

#[inline]
pub(crate) fn quantize(v: f64, max_code: f64, shift: u32) -> u16 {
    let code = (v.clamp(0.0, 1.0) * max_code + 0.5).floor();
    ((code as u32) << shift) as u16
}
