//! The bundled procedural test scene: a textured wall with a handful of
//! objects whose materials differ across the five bands.

use super::noise::hash64;
use super::{Band, NoiseParams, Preset, SpectralScene, Spectrum, BAND_COUNT};
use crate::image::LinearImage;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneOptions {
    pub width: usize,
    pub height: usize,
    /// Fronto-parallel depth of the whole scene, meters.
    pub depth_m: f64,
    pub baseline_focal: f64,
    pub preset: Preset,
    pub texture_seed: u64,
    pub ambient: Spectrum,
    pub noise: NoiseParams,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions {
            width: 640,
            height: 640,
            depth_m: 2.0,
            baseline_focal: 24.0,
            preset: Preset::Ideal,
            texture_seed: 1,
            ambient: [0.002, 0.02, 0.025, 0.03, 0.03],
            noise: NoiseParams {
                read_sigma: 1e-4,
                shot_scale: 2e-5,
                seed: 0,
            },
        }
    }
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    (hash64(&[seed, ix as u64, iy as u64]) >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in [0, 1) with lattice spacing `cell` pixels.
fn value_noise(seed: u64, x: f64, y: f64, cell: f64) -> f64 {
    let fx = x / cell;
    let fy = y / cell;
    let ix = fx.floor();
    let iy = fy.floor();
    let tx = fx - ix;
    let ty = fy - iy;
    let sx = tx * tx * (3.0 - 2.0 * tx);
    let sy = ty * ty * (3.0 - 2.0 * ty);
    let (ix, iy) = (ix as i64, iy as i64);
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    (1.0 - sy) * ((1.0 - sx) * a + sx * b) + sy * ((1.0 - sx) * c + sx * d)
}

enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Stripes { x0: f64, y0: f64, x1: f64, y1: f64, period: f64 },
}

const WALL: Spectrum = [0.30, 0.35, 0.40, 0.45, 0.60];
const DARK: Spectrum = [0.05, 0.06, 0.06, 0.06, 0.08];
const BRIGHT: Spectrum = [0.70, 0.85, 0.85, 0.85, 0.90];

fn objects() -> Vec<(Shape, Spectrum)> {
    vec![
        (Shape::Disc { cx: 0.30, cy: 0.33, r: 0.16 }, [0.20, 0.10, 0.15, 0.75, 0.85]),
        (Shape::Rect { x0: 0.55, y0: 0.15, x1: 0.88, y1: 0.48 }, [0.50, 0.70, 0.30, 0.10, 0.35]),
        (Shape::Disc { cx: 0.70, cy: 0.72, r: 0.15 }, [0.10, 0.08, 0.60, 0.15, 0.95]),
        (Shape::Rect { x0: 0.10, y0: 0.60, x1: 0.42, y1: 0.90 }, [0.20, 0.35, 0.45, 0.68, 0.75]),
        (
            Shape::Stripes { x0: 0.46, y0: 0.55, x1: 0.56, y1: 0.92, period: 0.03 },
            [0.0; BAND_COUNT],
        ),
    ]
}

fn material_at(u: f64, v: f64) -> Spectrum {
    let mut m = WALL;
    for (shape, spec) in objects() {
        match shape {
            Shape::Disc { cx, cy, r } => {
                if (u - cx).powi(2) + (v - cy).powi(2) <= r * r {
                    m = spec;
                }
            }
            Shape::Rect { x0, y0, x1, y1 } => {
                if u >= x0 && u < x1 && v >= y0 && v < y1 {
                    m = spec;
                }
            }
            Shape::Stripes { x0, y0, x1, y1, period } => {
                if u >= x0 && u < x1 && v >= y0 && v < y1 {
                    let phase = ((v - y0) / period).floor() as i64;
                    m = if phase % 2 == 0 { DARK } else { BRIGHT };
                }
            }
        }
    }
    m
}

/// Builds the bundled scene at any resolution. Texture is shared by all
/// bands so that edges in the dark-flash bands line up with visible edges.
pub fn bundled_scene(opts: &SceneOptions) -> SpectralScene {
    let (w, h) = (opts.width, opts.height);
    let size = w.max(h) as f64;
    let fine = (size / 90.0).max(2.0);
    let mid = (size / 24.0).max(4.0);
    let seed = opts.texture_seed;

    let mut reflectance: Vec<LinearImage> = (0..BAND_COUNT).map(|_| LinearImage::new(w, h, 1)).collect();
    let mut clean = LinearImage::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let tex = 0.55 * value_noise(seed, fx, fy, fine) + 0.45 * value_noise(seed ^ 0x5a5a, fx, fy, mid);
            let modulation = 0.6 + 0.4 * tex;
            let m = material_at(fx / w as f64, fy / h as f64);
            for b in 0..BAND_COUNT {
                reflectance[b].set(x, y, 0, (m[b] * modulation).clamp(0.0, 1.0) as f32);
            }
            clean.set(x, y, 0, reflectance[Band::Red.index()].get(x, y, 0));
            clean.set(x, y, 1, reflectance[Band::Green.index()].get(x, y, 0));
            clean.set(x, y, 2, reflectance[Band::Blue.index()].get(x, y, 0));
        }
    }

    SpectralScene {
        width: w,
        height: h,
        bands: Band::ALL,
        reflectance,
        depth: LinearImage::constant(w, h, 1, opts.depth_m as f32),
        ambient: opts.ambient,
        clean_rgb: Some(clean),
        preset: opts.preset,
        baseline_focal: opts.baseline_focal,
        noise: opts.noise,
    }
}
