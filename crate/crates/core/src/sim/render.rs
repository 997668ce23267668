use rayon::prelude::*;

use super::noise::gaussian_at;
use super::{db_to_linear, CameraModel, ExposureSettings, FlashBank, SpectralScene, BAND_COUNT};
use crate::error::{Error, Result};
use crate::image::raw::{quantize, RawFrame};
use crate::image::{sample_bilinear, LinearImage};

/// Horizontal stereo disparity in pixels for a point at `depth` meters.
pub fn disparity_from_depth(depth: f64, cam: &CameraModel) -> Result<f64> {
    if !(depth > 0.0) {
        return Err(Error::Domain(format!("depth must be > 0, got {depth}")));
    }
    Ok(cam.baseline_focal / depth)
}

/// Per-pixel radiance spectrum seen by the camera pixel `(x, y)` before the
/// channel response: reflectance times illumination.
fn pixel_signal(
    scene: &SpectralScene,
    cam: &CameraModel,
    illum: &[f64; BAND_COUNT],
    scale: f64,
    x: usize,
    y: usize,
) -> [f64; 3] {
    let refl = if cam.baseline_focal == 0.0 {
        scene.reflectance_at(x, y)
    } else {
        let z = scene.depth.get(x, y, 0) as f64;
        let sx = x as f64 - cam.baseline_focal / z;
        let mut r = [0.0; BAND_COUNT];
        for (b, plane) in scene.reflectance.iter().enumerate() {
            r[b] = sample_bilinear(plane, sx, y as f64, 0);
        }
        r
    };
    let mut out = [0.0; 3];
    for (k, resp) in cam.response.iter().enumerate() {
        let mut acc = 0.0;
        for b in 0..BAND_COUNT {
            acc += resp[b] * refl[b] * illum[b];
        }
        out[k] = scale * acc;
    }
    out
}

fn illumination(scene: &SpectralScene, flashes: &FlashBank, s: &ExposureSettings) -> [f64; BAND_COUNT] {
    let emission = flashes.model(s.flash).emission;
    let mut illum = [0.0; BAND_COUNT];
    for b in 0..BAND_COUNT {
        illum[b] = scene.ambient[b] + s.flash_fraction * emission[b];
    }
    illum
}

fn check_inputs(scene: &SpectralScene, cam: &CameraModel, s: &ExposureSettings) -> Result<()> {
    cam.validate()?;
    cam.check_settings(s)?;
    if scene.width % 2 != 0 || scene.height % 2 != 0 {
        return Err(Error::Dimension(format!(
            "scene must have even dimensions for a Bayer sensor, got {}x{}",
            scene.width, scene.height
        )));
    }
    Ok(())
}

/// Noise-free, unclipped per-channel signal
/// `T * gain * sum_b response[k][b] * reflectance[b] * (ambient[b] + fraction * emission[b])`.
pub fn render_signal(
    scene: &SpectralScene,
    cam: &CameraModel,
    flashes: &FlashBank,
    settings: &ExposureSettings,
) -> Result<LinearImage> {
    check_inputs(scene, cam, settings)?;
    let illum = illumination(scene, flashes, settings);
    let scale = settings.exposure_s * db_to_linear(settings.gain_db);
    let (w, h) = (scene.width, scene.height);
    let mut data = vec![0.0f32; w * h * 3];
    data.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let s = pixel_signal(scene, cam, &illum, scale, x, y);
            for k in 0..3 {
                row[x * 3 + k] = s[k] as f32;
            }
        }
    });
    LinearImage::from_vec(w, h, 3, data)
}

/// Renders a raw Bayer frame: signal, heteroscedastic Gaussian noise keyed
/// on `(seed, x, y, channel)`, clipping to [0, 1], then quantization.
pub fn render_frame(
    scene: &SpectralScene,
    cam: &CameraModel,
    flashes: &FlashBank,
    settings: &ExposureSettings,
) -> Result<RawFrame> {
    check_inputs(scene, cam, settings)?;
    let illum = illumination(scene, flashes, settings);
    let scale = settings.exposure_s * db_to_linear(settings.gain_db);
    let noise = settings.noise;
    let (w, h) = (scene.width, scene.height);
    let max_code = ((1u32 << cam.adc_bits) - 1) as f64;
    let shift = 16 - cam.adc_bits;
    let pattern = cam.cfa_pattern;

    let mut data = vec![0u16; w * h];
    data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            let k = pattern.site(x, y).channel();
            let mut v = pixel_signal(scene, cam, &illum, scale, x, y)[k];
            if !noise.is_off() {
                let var = noise.read_sigma * noise.read_sigma + noise.shot_scale * v.max(0.0);
                v += var.sqrt() * gaussian_at(noise.seed, x as u64, y as u64, k as u64);
            }
            *out = quantize(v, max_code, shift);
        }
    });

    Ok(RawFrame {
        width: w,
        height: h,
        data,
        cfa_pattern: pattern,
        adc_bits: cam.adc_bits,
        black_level: 0,
        settings: settings.clone(),
        camera_id: cam.id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::demosaic_malvar;
    use crate::sim::synthetic::{bundled_scene, SceneOptions};
    use crate::sim::{Band, CameraId, FlashKind, NoiseParams, Preset, Rig};

    fn small_scene() -> SpectralScene {
        bundled_scene(&SceneOptions {
            width: 32,
            height: 24,
            ..SceneOptions::default()
        })
    }

    fn flat_scene(refl: f32, ambient: [f64; 5]) -> SpectralScene {
        let mut s = small_scene();
        for p in &mut s.reflectance {
            *p = LinearImage::constant(s.width, s.height, 1, refl);
        }
        s.ambient = ambient;
        s
    }

    fn settings(t: f64, g: f64) -> ExposureSettings {
        ExposureSettings {
            exposure_s: t,
            gain_db: g,
            ..ExposureSettings::default()
        }
    }

    #[test]
    fn disparity_examples() {
        let mut cam = CameraModel::cam1(Preset::Ideal, 100.0);
        assert_eq!(disparity_from_depth(2.0, &cam).unwrap(), 50.0);
        assert!(disparity_from_depth(1e12, &cam).unwrap() < 1e-9);
        assert!(disparity_from_depth(0.0, &cam).is_err());
        assert!(disparity_from_depth(-1.0, &cam).is_err());
        cam.baseline_focal = 0.0;
        assert_eq!(disparity_from_depth(0.3, &cam).unwrap(), 0.0);
    }

    #[test]
    fn zero_ambient_no_flash_is_black() {
        let rig = Rig::new(Preset::Ideal, 10.0);
        let scene = flat_scene(0.8, [0.0; 5]);
        for cam in [&rig.cam1, &rig.cam2] {
            let raw = render_frame(&scene, cam, &rig.flashes, &settings(0.1, 47.0)).unwrap();
            assert!(raw.data.iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn single_band_closed_form() {
        let mut rig = Rig::new(Preset::Ideal, 0.0);
        rig.cam2.response = [[0.0; 5], [0.0, 0.0, 1.0, 0.0, 0.0], [0.0; 5]];
        let a = 0.02;
        let scene = flat_scene(1.0, [0.0, 0.0, a, 0.0, 0.0]);
        let s = settings(0.05, 20.0);
        let raw = render_frame(&scene, &rig.cam2, &rig.flashes, &s).unwrap();
        let expect = 0.05 * 10.0 * a;
        let code = (((expect * 4095.0_f64) + 0.5).floor() as u16) << 4;
        for y in 0..scene.height {
            for x in 0..scene.width {
                let is_green = rig.cam2.cfa_pattern.site(x, y).channel() == 1;
                assert_eq!(raw.get(x, y), if is_green { code } else { 0 });
            }
        }
    }

    #[test]
    fn six_db_doubles_signal() {
        let rig = Rig::new(Preset::Ideal, 0.0);
        let scene = flat_scene(0.5, [0.01, 0.02, 0.02, 0.02, 0.02]);
        let a = render_signal(&scene, &rig.cam2, &rig.flashes, &settings(0.1, 10.0)).unwrap();
        let b = render_signal(&scene, &rig.cam2, &rig.flashes, &settings(0.1, 10.0 + 6.0206)).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            if *p > 0.0 {
                assert!((q / p - 2.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn monotone_in_exposure_and_gain() {
        let rig = Rig::new(Preset::Prototype, 6.0);
        let scene = small_scene();
        let mut prev = render_signal(&scene, &rig.cam1, &rig.flashes, &settings(0.01, 0.0)).unwrap();
        for (t, g) in [(0.02, 0.0), (0.02, 6.0), (0.5, 6.0), (0.5, 47.0)] {
            let next = render_signal(&scene, &rig.cam1, &rig.flashes, &settings(t, g)).unwrap();
            assert!(prev.data().iter().zip(next.data()).all(|(a, b)| b >= a));
            prev = next;
        }
    }

    #[test]
    fn cam1_blind_to_dark_flash() {
        let rig = Rig::new(Preset::Ideal, 6.0);
        let scene = small_scene();
        let noise = NoiseParams {
            read_sigma: 0.01,
            shot_scale: 0.001,
            seed: 5,
        };
        let mut off = settings(0.05, 30.0);
        off.noise = noise;
        let base = render_frame(&scene, &rig.cam1, &rig.flashes, &off).unwrap();
        for kind in [FlashKind::Nir, FlashKind::Nuv, FlashKind::NirNuv] {
            let mut on = off.clone();
            on.flash = kind;
            on.flash_fraction = 0.2;
            let raw = render_frame(&scene, &rig.cam1, &rig.flashes, &on).unwrap();
            assert_eq!(raw.data, base.data, "{kind:?}");
        }
    }

    #[test]
    fn cam2_green_and_dark_flash_presets() {
        let scene = small_scene();
        for preset in [Preset::Ideal, Preset::Prototype] {
            let rig = Rig::new(preset, 0.0);
            let off = render_signal(&scene, &rig.cam2, &rig.flashes, &settings(0.05, 10.0)).unwrap();
            let mut nuv = settings(0.05, 10.0);
            nuv.flash = FlashKind::Nuv;
            let nuv = render_signal(&scene, &rig.cam2, &rig.flashes, &nuv).unwrap();
            let mut nir = settings(0.05, 10.0);
            nir.flash = FlashKind::Nir;
            let nir = render_signal(&scene, &rig.cam2, &rig.flashes, &nir).unwrap();
            assert_eq!(off.channel(1), nuv.channel(1));
            let nir_changes_green = off.channel(1) != nir.channel(1);
            assert_eq!(nir_changes_green, preset == Preset::Prototype);
        }
    }

    #[test]
    fn flash_term_is_linear() {
        let rig = Rig::new(Preset::Prototype, 6.0);
        let scene = small_scene();
        for cam in [&rig.cam1, &rig.cam2] {
            let off = settings(0.02, 6.0);
            let mut on = off.clone();
            on.flash = FlashKind::NirNuv;
            let a = render_signal(&scene, cam, &rig.flashes, &off).unwrap();
            let b = render_signal(&scene, cam, &rig.flashes, &on).unwrap();
            let emission = rig.flashes.model(FlashKind::NirNuv).emission;
            let g = 0.02 * db_to_linear(6.0);
            for y in 0..scene.height {
                for x in 0..scene.width {
                    let refl = if cam.id == CameraId::Cam1 {
                        let sx = x as f64 - cam.baseline_focal / scene.depth.get(x, y, 0) as f64;
                        let mut r = [0.0; 5];
                        for band in Band::ALL {
                            r[band.index()] = sample_bilinear(&scene.reflectance[band.index()], sx, y as f64, 0);
                        }
                        r
                    } else {
                        scene.reflectance_at(x, y)
                    };
                    for k in 0..3 {
                        let flash: f64 = (0..5).map(|b| cam.response[k][b] * refl[b] * emission[b]).sum();
                        let diff = (b.get(x, y, k) - a.get(x, y, k)) as f64;
                        assert!((diff - g * flash).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let rig = Rig::new(Preset::Ideal, 6.0);
        let scene = small_scene();
        let mut s = settings(0.05, 40.0);
        s.noise = NoiseParams {
            read_sigma: 0.02,
            shot_scale: 0.01,
            seed: 99,
        };
        let a = render_frame(&scene, &rig.cam1, &rig.flashes, &s).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| render_frame(&scene, &rig.cam1, &rig.flashes, &s).unwrap());
        assert_eq!(a, b);
        s.noise.seed = 100;
        let c = render_frame(&scene, &rig.cam1, &rig.flashes, &s).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn out_of_envelope_is_range_error() {
        let rig = Rig::new(Preset::Ideal, 6.0);
        let scene = small_scene();
        let err = render_frame(&scene, &rig.cam1, &rig.flashes, &settings(40.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::Range(_)));
    }

    #[test]
    fn cam1_view_is_shifted_by_disparity() {
        let rig = Rig::new(Preset::Ideal, 8.0);
        let scene = small_scene();
        let s = settings(0.1, 47.0);
        let c1 = demosaic_malvar(&render_frame(&scene, &rig.cam1, &rig.flashes, &s).unwrap()).unwrap();
        let sig1 = render_signal(&scene, &rig.cam1, &rig.flashes, &s).unwrap();
        let d = 8.0 / scene.depth.get(0, 0, 0) as f64;
        // Green signal at x in cam1 equals scene green at x - d.
        let x = 20;
        let expect = sample_bilinear(&scene.reflectance[Band::Green.index()], x as f64 - d, 5.0, 0)
            * scene.ambient[Band::Green.index()]
            * 0.1
            * db_to_linear(47.0);
        assert!((sig1.get(x, 5, 1) as f64 - expect).abs() < 1e-5);
        assert_eq!(c1.channels(), 3);
    }
}
