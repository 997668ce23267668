//! Stereo registration: green-channel tile matching, an edge-aware flow
//! solve guided by a third image, and gather warping.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::burst::{FrameTag, SessionManifest};
use crate::error::{Error, Result};
use crate::image::{demosaic_malvar, downsample_area, gaussian_blur_plane, luma, sample_bilinear, LinearImage};
use crate::sim::CameraId;

pub const CONFIDENCE_EPS: f64 = 1e-6;
/// Mean tile confidence below which a pair is reported as low-confidence.
pub const LOW_CONFIDENCE: f64 = 0.05;
/// Added to every confidence of a low-confidence pair so the solve stays posed.
pub const CONFIDENCE_FLOOR: f64 = 1e-3;
/// Gaussian prefilter applied to both green channels before matching.
pub const MATCH_PREFILTER_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchWindow {
    pub horiz: usize,
    pub vert: usize,
}

impl Default for SearchWindow {
    fn default() -> Self {
        SearchWindow { horiz: 64, vert: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileMatch {
    /// Gather offset (dx, dy): alt(x + offset) matches base(x).
    pub offset: (f64, f64),
    /// Mean absolute difference at the best integer offset.
    pub cost: f64,
    pub confidence: f64,
    /// The search window had to be clipped at the image border.
    pub border: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileMatches {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub tile_size: usize,
    pub search: SearchWindow,
    pub width: usize,
    pub height: usize,
    /// Row-major over tiles.
    pub tiles: Vec<TileMatch>,
}

impl TileMatches {
    pub fn tile(&self, tx: usize, ty: usize) -> &TileMatch {
        &self.tiles[ty * self.tiles_x + tx]
    }

    pub fn mean_confidence(&self) -> f64 {
        self.tiles.iter().map(|t| t.confidence).sum::<f64>() / self.tiles.len().max(1) as f64
    }

    /// Per-pixel targets (u, v) and confidences, constant over each tile.
    pub fn splat(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.width * self.height;
        let (mut u, mut v, mut c) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for y in 0..self.height {
            for x in 0..self.width {
                let t = self.tile(x / self.tile_size, y / self.tile_size);
                let i = y * self.width + x;
                u[i] = t.offset.0;
                v[i] = t.offset.1;
                c[i] = t.confidence;
            }
        }
        (u, v, c)
    }
}

/// Maps a best/second-best cost ratio in [0, 1] to a confidence in [0, 1].
pub fn confidence_from_ratio(ratio: f64) -> f64 {
    let floor = (-1.0f64).exp();
    (((-ratio).exp() - floor) / (1.0 - floor)).clamp(0.0, 1.0)
}

fn match_tile(
    base: &LinearImage,
    alt: &LinearImage,
    x0: usize,
    y0: usize,
    tile: usize,
    search: SearchWindow,
) -> TileMatch {
    let (w, h) = base.dims();
    let x1 = (x0 + tile).min(w);
    let y1 = (y0 + tile).min(h);
    // Offsets keeping the whole displaced tile inside the image.
    let range = |lo: usize, hi: usize, n: usize, r: usize| {
        let min = -(r.min(lo) as isize);
        let max = r.min(n - hi) as isize;
        (min, max, min > -(r as isize) || max < r as isize)
    };
    let (dx_min, dx_max, bx) = range(x0, x1, w, search.horiz);
    let (dy_min, dy_max, by) = range(y0, y1, h, search.vert);
    let npx = ((x1 - x0) * (y1 - y0)) as f64;
    let bd = base.data();
    let ad = alt.data();

    let ncols = (dx_max - dx_min + 1) as usize;
    let nrows = (dy_max - dy_min + 1) as usize;
    let mut costs = vec![0.0f64; ncols * nrows];
    for (j, dy) in (dy_min..=dy_max).enumerate() {
        for (i, dx) in (dx_min..=dx_max).enumerate() {
            let mut sad = 0.0f64;
            for y in y0..y1 {
                let ay = (y as isize + dy) as usize;
                let brow = &bd[y * w + x0..y * w + x1];
                let start = ay * w + (x0 as isize + dx) as usize;
                let arow = &ad[start..start + (x1 - x0)];
                sad += brow.iter().zip(arow).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
            }
            costs[j * ncols + i] = sad / npx;
        }
    }

    // Ties go to the smallest |offset|, then to the first in scan order.
    let mut best = 0;
    for k in 1..costs.len() {
        let mag = |k: usize| {
            let dx = dx_min + (k % ncols) as isize;
            let dy = dy_min + (k / ncols) as isize;
            dx.abs() + dy.abs()
        };
        if costs[k] < costs[best] || (costs[k] == costs[best] && mag(k) < mag(best)) {
            best = k;
        }
    }
    let (bi, bj) = (best % ncols, best / ncols);
    let second = costs
        .iter()
        .enumerate()
        .filter(|(k, _)| {
            let (i, j) = (k % ncols, k / ncols);
            i.abs_diff(bi) > 1 || j.abs_diff(bj) > 1
        })
        .map(|(_, c)| *c)
        .fold(f64::INFINITY, f64::min);
    let c0 = costs[best];
    let confidence = if second.is_finite() {
        confidence_from_ratio((c0 + CONFIDENCE_EPS) / (second + CONFIDENCE_EPS))
    } else {
        0.0
    };

    // An exact match needs no refinement.
    let mut sub = 0.0;
    if c0 > 0.0 && bi > 0 && bi + 1 < ncols {
        let cm = costs[bj * ncols + bi - 1];
        let cp = costs[bj * ncols + bi + 1];
        let denom = cm - 2.0 * c0 + cp;
        if denom > 0.0 {
            sub = (0.5 * (cm - cp) / denom).clamp(-0.5, 0.5);
        }
    }
    TileMatch {
        offset: ((dx_min + bi as isize) as f64 + sub, (dy_min + bj as isize) as f64),
        cost: c0,
        confidence,
        border: bx || by,
    }
}

/// Brute-force SAD block matching of `alt` against `base`, per tile.
pub fn tile_match(base: &LinearImage, alt: &LinearImage, tile_size: usize, search: SearchWindow) -> Result<TileMatches> {
    base.require_channels(1)?;
    alt.require_channels(1)?;
    let (w, h) = base.dims();
    alt.require_dims(w, h, "alternate image")?;
    if tile_size < 4 {
        return Err(Error::Range(format!("tile_size must be >= 4, got {tile_size}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Dimension("empty image".into()));
    }
    let tiles_x = w.div_ceil(tile_size);
    let tiles_y = h.div_ceil(tile_size);
    let tiles = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|k| match_tile(base, alt, (k % tiles_x) * tile_size, (k / tiles_x) * tile_size, tile_size, search))
        .collect();
    Ok(TileMatches {
        tiles_x,
        tiles_y,
        tile_size,
        search,
        width: w,
        height: h,
        tiles,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub grid_sigma_xy: f64,
    pub grid_sigma_l: f64,
    pub lambda_smooth: f64,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            grid_sigma_xy: 8.0,
            grid_sigma_l: 0.1,
            lambda_smooth: 1.0,
            cg_tol: 1e-6,
            cg_max_iters: 500,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.grid_sigma_xy > 0.0) || !(self.grid_sigma_l > 0.0) {
            return Err(Error::Range("solver sigmas must be > 0".into()));
        }
        if !(self.lambda_smooth >= 0.0) || !self.lambda_smooth.is_finite() {
            return Err(Error::Range(format!("lambda_smooth must be >= 0, got {}", self.lambda_smooth)));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::Range(format!("cg_tol must be > 0, got {}", self.cg_tol)));
        }
        Ok(())
    }
}

/// Per-pixel displacement in the gather convention: out(x) = alt(x + flow(x)).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        FlowField {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    /// 3-channel (u, v, 0) image, the on-disk form.
    pub fn to_image(&self) -> Result<LinearImage> {
        let zero = vec![0.0; self.u.len()];
        LinearImage::from_planes_f64(self.width, self.height, &[self.u.clone(), self.v.clone(), zero])
    }

    pub fn from_image(img: &LinearImage) -> Result<Self> {
        img.require_channels(3)?;
        Ok(FlowField {
            width: img.width(),
            height: img.height(),
            u: img.plane_f64(0),
            v: img.plane_f64(1),
        })
    }
}

/// Outcome of one component's conjugate-gradient solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgReport {
    pub iterations: usize,
    pub converged: bool,
    pub relative_residual: f64,
    /// Quadratic energy 1/2 f'Af - b'f after each iteration (index 0 is the start).
    pub energy: Vec<f64>,
}

const REDUCE_CHUNK: usize = 4096;

/// Dot product with a fixed chunking, so the result does not depend on the
/// number of worker threads.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let partial: Vec<f64> = a
        .par_chunks(REDUCE_CHUNK)
        .zip(b.par_chunks(REDUCE_CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partial.iter().sum()
}

/// Sparse system `diag + lambda * weighted Laplacian` on a 4-connected grid.
struct System {
    w: usize,
    h: usize,
    /// Weight to the right neighbour of each pixel (0 on the last column).
    wx: Vec<f64>,
    /// Weight to the neighbour below (0 on the last row).
    wy: Vec<f64>,
    diag: Vec<f64>,
}

impl System {
    fn build(conf: &[f64], guide: &[f64], w: usize, h: usize, p: &SolverParams) -> Self {
        let spatial = (-1.0 / (2.0 * p.grid_sigma_xy * p.grid_sigma_xy)).exp();
        let range = |a: f64, b: f64| (-(a - b) * (a - b) / (2.0 * p.grid_sigma_l * p.grid_sigma_l)).exp();
        let n = w * h;
        let (mut wx, mut wy) = (vec![0.0; n], vec![0.0; n]);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    wx[i] = p.lambda_smooth * spatial * range(guide[i], guide[i + 1]);
                }
                if y + 1 < h {
                    wy[i] = p.lambda_smooth * spatial * range(guide[i], guide[i + w]);
                }
            }
        }
        let mut diag = conf.to_vec();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    diag[i] += wx[i];
                    diag[i + 1] += wx[i];
                }
                if y + 1 < h {
                    diag[i] += wy[i];
                    diag[i + w] += wy[i];
                }
            }
        }
        System { w, h, wx, wy, diag }
    }

    fn apply(&self, f: &[f64], out: &mut [f64]) {
        let w = self.w;
        let h = self.h;
        out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for (x, o) in row.iter_mut().enumerate() {
                let i = y * w + x;
                let mut acc = self.diag[i] * f[i];
                if x + 1 < w {
                    acc -= self.wx[i] * f[i + 1];
                }
                if x > 0 {
                    acc -= self.wx[i - 1] * f[i - 1];
                }
                if y + 1 < h {
                    acc -= self.wy[i] * f[i + w];
                }
                if y > 0 {
                    acc -= self.wy[i - w] * f[i - w];
                }
                *o = acc;
            }
        });
    }
}

/// Jacobi-preconditioned conjugate gradients on `sys` with right-hand side
/// `b`, started from `x`. Rows with a zero diagonal are pinned to their
/// starting value.
fn pcg(sys: &System, b: &[f64], x: &mut [f64], p: &SolverParams) -> CgReport {
    let n = b.len();
    let free: Vec<bool> = sys.diag.iter().map(|d| *d > 0.0).collect();
    let inv: Vec<f64> = sys.diag.iter().map(|d| if *d > 0.0 { 1.0 / d } else { 0.0 }).collect();
    let mask = |v: &mut [f64]| v.iter_mut().zip(&free).for_each(|(a, f)| if !f { *a = 0.0 });

    let mut ax = vec![0.0; n];
    sys.apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    mask(&mut r);
    let energy_of = |x: &[f64], r: &[f64]| {
        // 1/2 x'Ax - b'x = -1/2 x'(b + r) with r = b - Ax
        let br: Vec<f64> = b.iter().zip(r).map(|(b, r)| b + r).collect();
        -0.5 * dot(x, &br)
    };
    let bnorm = dot(b, b).sqrt();
    let mut energy = vec![energy_of(x, &r)];
    let rel = |r: &[f64]| if bnorm > 0.0 { dot(r, r).sqrt() / bnorm } else { dot(r, r).sqrt() };

    let mut z: Vec<f64> = r.iter().zip(&inv).map(|(r, m)| r * m).collect();
    let mut d = z.clone();
    let mut rz = dot(&r, &z);
    let mut ad = vec![0.0; n];
    let mut iterations = 0;
    let mut residual = rel(&r);
    while residual >= p.cg_tol && iterations < p.cg_max_iters {
        sys.apply(&d, &mut ad);
        mask(&mut ad);
        let dad = dot(&d, &ad);
        if !(dad > 0.0) {
            break;
        }
        let alpha = rz / dad;
        x.par_iter_mut().zip(&d).for_each(|(x, d)| *x += alpha * d);
        r.par_iter_mut().zip(&ad).for_each(|(r, a)| *r -= alpha * a);
        iterations += 1;
        energy.push(energy_of(x, &r));
        residual = rel(&r);
        z.par_iter_mut()
            .zip(&r)
            .zip(&inv)
            .for_each(|((z, r), m)| *z = r * m);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        d.par_iter_mut().zip(&z).for_each(|(d, z)| *d = z + beta * *d);
    }
    CgReport {
        iterations,
        converged: residual < p.cg_tol,
        relative_residual: residual,
        energy,
    }
}

/// Solves one flow component: min sum c (f - t)^2 + lambda sum W (f_i - f_j)^2.
fn solve_component(
    targets: &[f64],
    conf: &[f64],
    guide: &[f64],
    w: usize,
    h: usize,
    p: &SolverParams,
) -> (Vec<f64>, CgReport) {
    let sys = System::build(conf, guide, w, h, p);
    let b: Vec<f64> = targets.iter().zip(conf).map(|(t, c)| t * c).collect();
    let mut f = targets.to_vec();
    let report = pcg(&sys, &b, &mut f, p);
    (f, report)
}

/// Lower-level entry: solve from per-pixel targets and confidences.
pub fn solve_flow_pixels(
    tu: &[f64],
    tv: &[f64],
    conf: &[f64],
    guide: &LinearImage,
    params: &SolverParams,
) -> Result<(FlowField, [CgReport; 2])> {
    params.validate()?;
    let (w, h) = guide.dims();
    let n = w * h;
    if tu.len() != n || tv.len() != n || conf.len() != n {
        return Err(Error::Dimension(format!("flow targets must cover the {w}x{h} guide")));
    }
    if conf.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
        return Err(Error::Range("confidences must be finite and >= 0".into()));
    }
    if conf.iter().all(|c| *c == 0.0) {
        return Err(Error::Degenerate("all confidences are zero; the flow has no data term".into()));
    }
    let l = match guide.channels() {
        1 => guide.plane_f64(0),
        3 => luma(guide)?.plane_f64(0),
        c => return Err(Error::Channel { expected: 3, actual: c }),
    };
    let ((u, ru), (v, rv)) = rayon::join(
        || solve_component(tu, conf, &l, w, h, params),
        || solve_component(tv, conf, &l, w, h, params),
    );
    if u.iter().chain(&v).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("flow solve diverged".into()));
    }
    for r in [&ru, &rv] {
        if !r.converged {
            log::warn!(
                "flow solve stopped after {} iterations at relative residual {:.3e}",
                r.iterations,
                r.relative_residual
            );
        }
    }
    Ok((FlowField { width: w, height: h, u, v }, [ru, rv]))
}

/// Edge-aware flow from tile matches, guided by `guide` (luma taken if RGB).
pub fn solve_flow(matches: &TileMatches, guide: &LinearImage, params: &SolverParams) -> Result<FlowField> {
    guide.require_dims(matches.width, matches.height, "guide")?;
    let (tu, tv, c) = matches.splat();
    Ok(solve_flow_pixels(&tu, &tv, &c, guide, params)?.0)
}

/// Gathers `alt` through `flow`, sampling bilinearly with border clamping.
pub fn warp_gather(alt: &LinearImage, flow: &FlowField) -> Result<LinearImage> {
    let (w, h) = (flow.width, flow.height);
    if alt.width() == 0 || alt.height() == 0 {
        return Err(Error::Dimension("cannot warp an empty image".into()));
    }
    let ch = alt.channels();
    let mut out = vec![0.0f32; w * h * ch];
    out.par_chunks_mut(w * ch).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let i = y * w + x;
            let (sx, sy) = (x as f64 + flow.u[i], y as f64 + flow.v[i]);
            for c in 0..ch {
                row[x * ch + c] = sample_bilinear(alt, sx, sy, c) as f32;
            }
        }
    });
    LinearImage::from_vec(w, h, ch, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterOptions {
    pub tile_size: usize,
    pub search: SearchWindow,
    pub solver: SolverParams,
    /// Resample demosaicked frames to this size before matching.
    pub working_size: Option<(usize, usize)>,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        RegisterOptions {
            tile_size: 16,
            search: SearchWindow::default(),
            solver: SolverParams::default(),
            working_size: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub flow: FlowField,
    pub matches: TileMatches,
    pub low_confidence: bool,
    pub reports: [CgReport; 2],
}

pub(crate) fn develop(raw: &crate::image::RawFrame, size: Option<(usize, usize)>) -> Result<LinearImage> {
    let rgb = demosaic_malvar(raw)?;
    match size {
        Some((w, h)) if (w, h) != rgb.dims() => downsample_area(&rgb, w, h),
        _ => Ok(rgb),
    }
}

/// Registers cam1 to cam2 using the flash-off pair at shot `t_index`, with the
/// cam2 flash-on frame of shot `t_index + 1` as the edge guide.
pub fn register_pair(
    manifest: &SessionManifest,
    dir: &Path,
    t_index: usize,
    opts: &RegisterOptions,
) -> Result<Registration> {
    let pick = |t: usize, cam: CameraId, want_on: bool| {
        let e = manifest
            .find(t, cam)
            .ok_or_else(|| Error::Manifest(format!("no {} frame at shot {t}", cam.as_str())))?;
        let ok = if want_on { e.spec.tag.is_flash_on() } else { e.spec.tag.is_flash_off() };
        if !ok {
            return Err(Error::Manifest(format!(
                "{} frame at shot {t} is {}, expected a flash-{} burst frame",
                cam.as_str(),
                e.spec.tag.as_str(),
                if want_on { "on" } else { "off" }
            )));
        }
        Ok(e)
    };
    let base_e = pick(t_index, CameraId::Cam2, false)?;
    let alt_e = pick(t_index, CameraId::Cam1, false)?;
    let guide_e = pick(t_index + 1, CameraId::Cam2, true)?;
    let base = develop(&manifest.read_frame(dir, base_e)?, opts.working_size)?;
    let alt = develop(&manifest.read_frame(dir, alt_e)?, opts.working_size)?;
    let guide = develop(&manifest.read_frame(dir, guide_e)?, opts.working_size)?;
    register_images(&base, &alt, &guide, opts)
}

/// Registration on developed images: `base` (cam2) and `alt` (cam1) RGB,
/// `guide` RGB or luma.
pub fn register_images(
    base: &LinearImage,
    alt: &LinearImage,
    guide: &LinearImage,
    opts: &RegisterOptions,
) -> Result<Registration> {
    // The cameras run at different gains; match on mean-normalized green.
    let normalize = |g: LinearImage| -> Result<LinearImage> {
        let m = g.mean();
        let (w, h) = g.dims();
        let p = gaussian_blur_plane(&g.plane_f64(0), w, h, MATCH_PREFILTER_SIGMA);
        let k = if m > 0.0 { 1.0 / m } else { 1.0 };
        LinearImage::from_planes_f64(w, h, &[p.iter().map(|v| v * k).collect()])
    };
    let base_g = normalize(base.channel(1))?;
    let alt_g = normalize(alt.channel(1))?;
    let mut matches = tile_match(&base_g, &alt_g, opts.tile_size, opts.search)?;
    let mean = matches.mean_confidence();
    let low_confidence = mean < LOW_CONFIDENCE;
    if low_confidence {
        log::warn!("low registration confidence (mean {mean:.4}); the flow is mostly interpolated");
        for t in &mut matches.tiles {
            t.confidence += CONFIDENCE_FLOOR;
        }
    }
    let (tu, tv, c) = matches.splat();
    let (flow, reports) = solve_flow_pixels(&tu, &tv, &c, guide, &opts.solver)?;
    Ok(Registration {
        flow,
        matches,
        low_confidence,
        reports,
    })
}

/// The long-exposure cam1 frame of a session, for warping with the same flow.
pub fn long_exposure_frame(manifest: &SessionManifest, dir: &Path, cam: CameraId) -> Result<crate::image::RawFrame> {
    let e = manifest
        .long_exposure(cam)
        .ok_or_else(|| Error::Manifest(format!("no {} {} frame", cam.as_str(), FrameTag::LongExposure.as_str())))?;
    manifest.read_frame(dir, e)
}
