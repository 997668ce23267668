//! Image containers and the color/resampling primitives shared by every
//! other stage.
//!
//! `LinearImage` stores 32-bit float samples interleaved by pixel
//! (`data[(y * width + x) * channels + c]`). `RawFrame` holds a Bayer mosaic
//! of 12-bit codes left-shifted into a 16-bit container.

mod demosaic;
pub(crate) mod raw;

pub use demosaic::demosaic_malvar;
pub use raw::{mosaic, CfaPattern, CfaSite, RawFrame};

use crate::error::{Error, Result};

/// BT.601 luma weights for (R, G, B).
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct LinearImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl LinearImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!((1..=3).contains(&channels), "channels must be 1..=3");
        LinearImage {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if !(1..=3).contains(&channels) {
            return Err(Error::Channel {
                expected: 3,
                actual: channels,
            });
        }
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "buffer of {} samples does not match {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite sample in image buffer".into()));
        }
        Ok(LinearImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut img = LinearImage::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f32) -> Self {
        LinearImage::from_fn(width, height, channels, |_, _, _| value)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Copies one channel out as a single-channel image.
    pub fn channel(&self, c: usize) -> LinearImage {
        assert!(c < self.channels);
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px[c])
            .collect();
        LinearImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Channel `c` as an f64 plane, row-major.
    pub fn plane_f64(&self, c: usize) -> Vec<f64> {
        self.data
            .chunks_exact(self.channels)
            .map(|px| px[c] as f64)
            .collect()
    }

    pub fn from_planes_f64(width: usize, height: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let channels = planes.len();
        let mut data = vec![0.0f32; width * height * channels];
        for (c, plane) in planes.iter().enumerate() {
            if plane.len() != width * height {
                return Err(Error::Dimension("plane size mismatch".into()));
            }
            for (i, v) in plane.iter().enumerate() {
                data[i * channels + c] = *v as f32;
            }
        }
        LinearImage::from_vec(width, height, channels, data)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> LinearImage {
        LinearImage {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> LinearImage {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn same_shape(&self, other: &LinearImage) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn require_channels(&self, expected: usize) -> Result<()> {
        if self.channels != expected {
            return Err(Error::Channel {
                expected,
                actual: self.channels,
            });
        }
        Ok(())
    }

    pub(crate) fn require_dims(&self, width: usize, height: usize, what: &str) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::Dimension(format!(
                "{what} is {}x{}, expected {}x{}",
                self.width, self.height, width, height
            )));
        }
        Ok(())
    }
}

/// BT.601 luma of a 3-channel image.
pub fn luma(img: &LinearImage) -> Result<LinearImage> {
    img.require_channels(3)?;
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| {
            (LUMA_WEIGHTS[0] * px[0] as f64
                + LUMA_WEIGHTS[1] * px[1] as f64
                + LUMA_WEIGHTS[2] * px[2] as f64) as f32
        })
        .collect();
    Ok(LinearImage {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    })
}

/// Source footprint weights for one output sample along an axis of area
/// resampling: `(first_index, weights)` with weights summing to one.
fn area_weights(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            let mut w: Vec<f64> = (first..last)
                .map(|j| {
                    let a = lo.max(j as f64);
                    let b = hi.min((j + 1) as f64);
                    (b - a).max(0.0)
                })
                .collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            (first, w)
        })
        .collect()
}

/// Box/area downsampling: every output pixel is the mean of its (possibly
/// fractional) footprint in the source.
pub fn downsample_area(img: &LinearImage, out_w: usize, out_h: usize) -> Result<LinearImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Dimension("output dimensions must be non-zero".into()));
    }
    if out_w > img.width || out_h > img.height {
        return Err(Error::Dimension(format!(
            "cannot downsample {}x{} to larger {}x{}",
            img.width, img.height, out_w, out_h
        )));
    }
    let ch = img.channels;
    let wx = area_weights(img.width, out_w);
    let wy = area_weights(img.height, out_h);

    // Horizontal pass into f64 rows.
    let mut tmp = vec![0.0f64; out_w * img.height * ch];
    for y in 0..img.height {
        for (ox, (first, w)) in wx.iter().enumerate() {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, wk) in w.iter().enumerate() {
                    acc += wk * img.get(first + k, y, c) as f64;
                }
                tmp[(y * out_w + ox) * ch + c] = acc;
            }
        }
    }

    let mut out = LinearImage::new(out_w, out_h, ch);
    for (oy, (first, w)) in wy.iter().enumerate() {
        for ox in 0..out_w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, wk) in w.iter().enumerate() {
                    acc += wk * tmp[((first + k) * out_w + ox) * ch + c];
                }
                out.set(ox, oy, c, acc as f32);
            }
        }
    }
    Ok(out)
}

/// Reflect-101 index mirroring (`-1 -> 1`, `n -> n-2`), which keeps the
/// parity of the coordinate and therefore the CFA phase.
#[inline]
pub(crate) fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of a row-major f64 plane with mirrored borders.
pub(crate) fn gaussian_blur_plane(plane: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * row[mirror(x as isize + i as isize - r, width)];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[mirror(y as isize + i as isize - r, height) * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Bilinear sample of channel `c` at a fractional position, clamping to the
/// border pixel outside the image.
#[inline]
pub fn sample_bilinear(img: &LinearImage, x: f64, y: f64, c: usize) -> f64 {
    let maxx = (img.width - 1) as f64;
    let maxy = (img.height - 1) as f64;
    let x = x.clamp(0.0, maxx);
    let y = y.clamp(0.0, maxy);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let v00 = img.get(x0, y0, c) as f64;
    let v10 = img.get(x1, y0, c) as f64;
    let v01 = img.get(x0, y1, c) as f64;
    let v11 = img.get(x1, y1, c) as f64;
    if fx == 0.0 && fy == 0.0 {
        return v00;
    }
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
}
