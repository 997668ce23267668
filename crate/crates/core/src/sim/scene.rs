use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Band, NoiseParams, Preset, Spectrum, BAND_COUNT};
use crate::error::{Error, Result};
use crate::formats::{read_json, read_pfm, write_json, write_pfm};
use crate::image::LinearImage;

/// Band-sampled scene at cam2's viewpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralScene {
    pub width: usize,
    pub height: usize,
    pub bands: [Band; BAND_COUNT],
    /// One single-channel plane per band, values in [0, 1].
    pub reflectance: Vec<LinearImage>,
    /// Meters, strictly positive.
    pub depth: LinearImage,
    pub ambient: Spectrum,
    /// Fusion ground truth.
    pub clean_rgb: Option<LinearImage>,
    pub preset: Preset,
    pub baseline_focal: f64,
    /// Unity-gain sensor noise used when capturing this scene.
    pub noise: NoiseParams,
}

/// JSON header of a scene on disk; payload paths are relative to the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub format_version: u32,
    pub width: usize,
    pub height: usize,
    pub bands: Vec<Band>,
    pub ambient: Vec<f64>,
    pub preset: Preset,
    pub baseline_focal: f64,
    pub noise: NoiseParams,
    pub reflectance: Vec<String>,
    pub depth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_rgb: Option<String>,
}

impl SpectralScene {
    pub fn validate(&self) -> Result<()> {
        if self.reflectance.len() != BAND_COUNT {
            return Err(Error::Dimension(format!(
                "scene needs {BAND_COUNT} reflectance planes, has {}",
                self.reflectance.len()
            )));
        }
        for (b, plane) in self.reflectance.iter().enumerate() {
            plane.require_channels(1)?;
            plane.require_dims(self.width, self.height, "reflectance plane")?;
            if plane.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Range(format!(
                    "reflectance in band {:?} outside [0, 1]",
                    self.bands[b]
                )));
            }
        }
        self.depth.require_channels(1)?;
        self.depth.require_dims(self.width, self.height, "depth")?;
        if self.depth.data().iter().any(|&z| !(z > 0.0)) {
            return Err(Error::Domain("depth must be > 0 everywhere".into()));
        }
        if let Some(rgb) = &self.clean_rgb {
            rgb.require_channels(3)?;
            rgb.require_dims(self.width, self.height, "clean_rgb")?;
        }
        if self.ambient.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::Domain("ambient must be >= 0".into()));
        }
        self.noise.validate()
    }

    #[inline]
    pub fn reflectance_at(&self, x: usize, y: usize) -> Spectrum {
        let mut r = [0.0; BAND_COUNT];
        for (b, plane) in self.reflectance.iter().enumerate() {
            r[b] = plane.get(x, y, 0) as f64;
        }
        r
    }

    /// Writes `scene.json`-style header at `path` with PFM payloads beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".into());
        let mut reflectance = Vec::new();
        for (band, plane) in self.bands.iter().zip(&self.reflectance) {
            let name = format!("{stem}_refl_{}.pfm", band_name(*band));
            write_pfm(&dir.join(&name), plane)?;
            reflectance.push(name);
        }
        let depth = format!("{stem}_depth.pfm");
        write_pfm(&dir.join(&depth), &self.depth)?;
        let clean_rgb = match &self.clean_rgb {
            Some(rgb) => {
                let name = format!("{stem}_clean_rgb.pfm");
                write_pfm(&dir.join(&name), rgb)?;
                Some(name)
            }
            None => None,
        };
        let header = SceneFile {
            format_version: 1,
            width: self.width,
            height: self.height,
            bands: self.bands.to_vec(),
            ambient: self.ambient.to_vec(),
            preset: self.preset,
            baseline_focal: self.baseline_focal,
            noise: self.noise,
            reflectance,
            depth,
            clean_rgb,
        };
        write_json(path, &header)
    }

    pub fn load(path: &Path) -> Result<SpectralScene> {
        let header: SceneFile = read_json(path)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let resolve = |name: &str| -> PathBuf { dir.join(name) };
        if header.bands != Band::ALL {
            return Err(Error::format(path, "bands must be [NUV, BLUE, GREEN, RED, NIR]"));
        }
        if header.ambient.len() != BAND_COUNT || header.reflectance.len() != BAND_COUNT {
            return Err(Error::format(path, "ambient and reflectance need one entry per band"));
        }
        let reflectance = header
            .reflectance
            .iter()
            .map(|n| read_pfm(&resolve(n)))
            .collect::<Result<Vec<_>>>()?;
        let depth = read_pfm(&resolve(&header.depth))?;
        let clean_rgb = header
            .clean_rgb
            .as_deref()
            .map(|n| read_pfm(&resolve(n)))
            .transpose()?;
        let mut ambient = [0.0; BAND_COUNT];
        ambient.copy_from_slice(&header.ambient);
        let scene = SpectralScene {
            width: header.width,
            height: header.height,
            bands: Band::ALL,
            reflectance,
            depth,
            ambient,
            clean_rgb,
            preset: header.preset,
            baseline_focal: header.baseline_focal,
            noise: header.noise,
        };
        scene
            .validate()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(scene)
    }
}

fn band_name(b: Band) -> &'static str {
    match b {
        Band::Nuv => "nuv",
        Band::Blue => "blue",
        Band::Green => "green",
        Band::Red => "red",
        Band::Nir => "nir",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::synthetic::{bundled_scene, SceneOptions};

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = bundled_scene(&SceneOptions {
            width: 24,
            height: 16,
            ..SceneOptions::default()
        });
        let path = dir.path().join("scene.json");
        scene.save(&path).unwrap();
        assert_eq!(SpectralScene::load(&path).unwrap(), scene);
    }

    #[test]
    fn missing_payload_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let scene = bundled_scene(&SceneOptions {
            width: 8,
            height: 8,
            ..SceneOptions::default()
        });
        let path = dir.path().join("s.json");
        scene.save(&path).unwrap();
        std::fs::remove_file(dir.path().join("s_depth.pfm")).unwrap();
        let err = SpectralScene::load(&path).unwrap_err();
        assert!(err.to_string().contains("s_depth.pfm"));
    }

    #[test]
    fn rejects_non_positive_depth() {
        let mut scene = bundled_scene(&SceneOptions {
            width: 8,
            height: 8,
            ..SceneOptions::default()
        });
        scene.depth.set(3, 3, 0, 0.0);
        assert!(matches!(scene.validate(), Err(Error::Domain(_))));
    }
}
