//! Gradient-domain fusion of a noisy RGB frame with a dark-flash guide,
//! followed by affine-grid tone transfer and luma replacement.

mod dct;
mod grid;

pub use grid::{
    load_grid, slice_apply, slice_pixel, Affine, AffineBilateralGrid, GridFile, SliceMap, DEFAULT_GRID_DIMS,
    IDENTITY_AFFINE,
};

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{gaussian_blur_plane, luma, LinearImage, LUMA_WEIGHTS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleMapParams {
    pub eps: f64,
    pub smooth_sigma: f64,
    pub alpha_data: f64,
}

impl Default for ScaleMapParams {
    fn default() -> Self {
        ScaleMapParams {
            eps: 1e-4,
            smooth_sigma: 4.0,
            alpha_data: 0.05,
        }
    }
}

impl ScaleMapParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !(self.alpha_data > 0.0) || !(self.smooth_sigma >= 0.0) {
            return Err(Error::Domain(format!(
                "scale-map parameters need eps > 0, alpha_data > 0, smooth_sigma >= 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Forward differences with a zero last column (x) / last row (y).
pub fn forward_gradients(plane: &[f64], width: usize, height: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; plane.len()];
    let mut gy = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if x + 1 < width {
                gx[i] = plane[i + 1] - plane[i];
            }
            if y + 1 < height {
                gy[i] = plane[i + width] - plane[i];
            }
        }
    }
    (gx, gy)
}

/// Right-hand side of the normal equations: alpha d + Dx^T gx + Dy^T gy.
/// The last column of `gx` and last row of `gy` are ignored.
fn normal_rhs(data: &[f64], gx: &[f64], gy: &[f64], w: usize, h: usize, alpha: f64) -> Vec<f64> {
    let mut b: Vec<f64> = data.iter().map(|v| alpha * v).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                b[i] -= gx[i];
                b[i + 1] += gx[i];
            }
            if y + 1 < h {
                b[i] -= gy[i];
                b[i + w] += gy[i];
            }
        }
    }
    b
}

/// Applies alpha I + Dx^T Dx + Dy^T Dy (the screened Neumann Laplacian).
pub fn screened_laplacian_apply(u: &[f64], w: usize, h: usize, alpha: f64) -> Vec<f64> {
    let mut out: Vec<f64> = u.iter().map(|v| alpha * v).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let d = u[i + 1] - u[i];
                out[i] -= d;
                out[i + 1] += d;
            }
            if y + 1 < h {
                let d = u[i + w] - u[i];
                out[i] -= d;
                out[i + w] += d;
            }
        }
    }
    out
}

/// f64 core of [`screened_poisson_solve`] on row-major planes.
pub fn screened_poisson_plane(
    data: &[f64],
    gx: &[f64],
    gy: &[f64],
    width: usize,
    height: usize,
    alpha: f64,
) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!("alpha must be > 0 (got {alpha}); the mean is otherwise unpinned")));
    }
    let n = width * height;
    if width == 0 || height == 0 || data.len() != n || gx.len() != n || gy.len() != n {
        return Err(Error::Dimension("screened Poisson inputs must share one non-empty shape".into()));
    }
    let rhs = normal_rhs(data, gx, gy, width, height, alpha);
    let mut spec = dct::dct2d(&rhs, width, height, false);
    let eig = |k: usize, n: usize| 2.0 - 2.0 * (std::f64::consts::PI * k as f64 / n as f64).cos();
    let ex: Vec<f64> = (0..width).map(|k| eig(k, width)).collect();
    let ey: Vec<f64> = (0..height).map(|k| eig(k, height)).collect();
    spec.par_chunks_mut(width).enumerate().for_each(|(ky, row)| {
        for (kx, v) in row.iter_mut().enumerate() {
            *v /= alpha + ex[kx] + ey[ky];
        }
    });
    let u = dct::dct2d(&spec, width, height, true);
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("screened Poisson solve produced non-finite values".into()));
    }
    Ok(u)
}

/// Exact minimizer of alpha |I - data|^2 + |grad I - (gx, gy)|^2 with
/// forward-difference gradients and Neumann boundaries.
pub fn screened_poisson_solve(
    data: &LinearImage,
    gx: &LinearImage,
    gy: &LinearImage,
    alpha: f64,
) -> Result<LinearImage> {
    for img in [data, gx, gy] {
        img.require_channels(1)?;
    }
    let (w, h) = data.dims();
    gx.require_dims(w, h, "gx")?;
    gy.require_dims(w, h, "gy")?;
    let u = screened_poisson_plane(&data.plane_f64(0), &gx.plane_f64(0), &gy.plane_f64(0), w, h, alpha)?;
    LinearImage::from_planes_f64(w, h, &[u])
}

/// Per-pixel scale map: locally smoothed projection of the noisy gradient
/// onto the guide gradient.
fn scale_map(ngx: &[f64], ngy: &[f64], fgx: &[f64], fgy: &[f64], w: usize, h: usize, p: &ScaleMapParams) -> Vec<f64> {
    let num: Vec<f64> = (0..w * h).map(|i| ngx[i] * fgx[i] + ngy[i] * fgy[i]).collect();
    let den: Vec<f64> = (0..w * h).map(|i| fgx[i] * fgx[i] + fgy[i] * fgy[i]).collect();
    let num = gaussian_blur_plane(&num, w, h, p.smooth_sigma);
    let den = gaussian_blur_plane(&den, w, h, p.smooth_sigma);
    num.iter().zip(&den).map(|(n, d)| n / (d + p.eps)).collect()
}

/// Scale-map fusion: each output channel follows the guide's gradients,
/// rescaled per pixel to the noisy channel's local contrast, and is pinned
/// to the noisy channel by a weak data term.
pub fn scale_map_fuse(noisy: &LinearImage, flash: &LinearImage, p: &ScaleMapParams) -> Result<LinearImage> {
    p.validate()?;
    noisy.require_channels(3)?;
    flash.require_channels(1)?;
    let (w, h) = noisy.dims();
    flash.require_dims(w, h, "flash guide")?;
    let (fgx, fgy) = forward_gradients(&flash.plane_f64(0), w, h);
    let planes = (0..3)
        .into_par_iter()
        .map(|c| {
            let n = noisy.plane_f64(c);
            let (ngx, ngy) = forward_gradients(&n, w, h);
            let s = scale_map(&ngx, &ngy, &fgx, &fgy, w, h, p);
            let gx: Vec<f64> = s.iter().zip(&fgx).map(|(s, g)| s * g).collect();
            let gy: Vec<f64> = s.iter().zip(&fgy).map(|(s, g)| s * g).collect();
            screened_poisson_plane(&n, &gx, &gy, w, h, p.alpha_data)
        })
        .collect::<Result<Vec<_>>>()?;
    LinearImage::from_planes_f64(w, h, &planes)
}

const KB: f64 = 2.0 * (1.0 - LUMA_WEIGHTS[2]);
const KR: f64 = 2.0 * (1.0 - LUMA_WEIGHTS[0]);

/// Swaps the BT.601 luma of `base` for `luma_src`, keeping its chroma.
pub fn replace_luma(base: &LinearImage, luma_src: &LinearImage) -> Result<LinearImage> {
    base.require_channels(3)?;
    luma_src.require_channels(1)?;
    let (w, h) = base.dims();
    luma_src.require_dims(w, h, "luma source")?;
    let [wr, wg, wb] = LUMA_WEIGHTS;
    let mut out = Vec::with_capacity(w * h * 3);
    for (px, l) in base.data().chunks_exact(3).zip(luma_src.data()) {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        let y = wr * r + wg * g + wb * b;
        let cb = (b - y) / KB;
        let cr = (r - y) / KR;
        let y = *l as f64;
        let r = y + KR * cr;
        let b = y + KB * cb;
        let g = (y - wr * r - wb * b) / wg;
        out.extend_from_slice(&[r as f32, g as f32, b as f32]);
    }
    LinearImage::from_vec(w, h, 3, out)
}

/// Where the fusion stage's grid and slice map come from.
#[derive(Debug, Clone)]
pub enum GridSource {
    Identity,
    Loaded {
        grid: AffineBilateralGrid,
        slice: Option<SliceMap>,
    },
}

impl GridSource {
    /// `identity` or the path of a grid JSON header.
    pub fn from_arg(arg: &str) -> Result<Self> {
        if arg == "identity" {
            return Ok(GridSource::Identity);
        }
        let (grid, slice) = load_grid(Path::new(arg))?;
        Ok(GridSource::Loaded { grid, slice })
    }
}

fn default_slice(img: &LinearImage) -> Result<SliceMap> {
    SliceMap::new(luma(img)?.clamp01())
}

/// Full fusion stage: scale-map fusion, grid slicing, then the scale-map
/// luma is put back.
pub fn fuse_pipeline(
    warped_rgb: &LinearImage,
    flash: &LinearImage,
    source: &GridSource,
    p: &ScaleMapParams,
) -> Result<LinearImage> {
    let guide = match flash.channels() {
        1 => flash.clone(),
        3 => luma(flash)?,
        c => return Err(Error::Channel { expected: 1, actual: c }),
    };
    let fused = scale_map_fuse(warped_rgb, &guide, p)?;
    let fused_luma = luma(&fused)?;
    let (w, h) = fused.dims();
    let sliced = match source {
        GridSource::Identity => slice_apply(&AffineBilateralGrid::identity(w, h), &fused, &default_slice(&fused)?)?,
        GridSource::Loaded { grid, slice } => {
            let slice = match slice {
                Some(s) => s.clone(),
                None => default_slice(&fused)?,
            };
            slice_apply(grid, &fused, &slice)?
        }
    };
    replace_luma(&sliced, &fused_luma)
}
