//! Unnormalized DCT-II and its inverse built on a length-2N complex FFT,
//! applied separably to row-major planes.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub(crate) struct Dct1 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// exp(-i pi k / 2N)
    twiddle: Vec<Complex<f64>>,
}

impl Dct1 {
    pub(crate) fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let twiddle = (0..n)
            .map(|k| Complex::from_polar(1.0, -std::f64::consts::PI * k as f64 / (2 * n) as f64))
            .collect();
        Dct1 {
            n,
            fwd: planner.plan_fft_forward(2 * n),
            inv: planner.plan_fft_inverse(2 * n),
            twiddle,
        }
    }

    /// X_k = sum_n x_n cos(pi k (2n + 1) / 2N)
    pub(crate) fn forward(&self, x: &mut [f64], buf: &mut [Complex<f64>]) {
        let n = self.n;
        for (i, &v) in x.iter().enumerate() {
            buf[i] = Complex::new(v, 0.0);
            buf[2 * n - 1 - i] = Complex::new(v, 0.0);
        }
        self.fwd.process(buf);
        for k in 0..n {
            x[k] = (self.twiddle[k] * buf[k]).re * 0.5;
        }
    }

    /// Exact inverse of `forward`.
    pub(crate) fn inverse(&self, x: &mut [f64], buf: &mut [Complex<f64>]) {
        let n = self.n;
        for k in 0..n {
            let w = if k == 0 { 1.0 } else { 2.0 };
            buf[k] = self.twiddle[k].conj() * (w * x[k]);
        }
        for b in buf[n..].iter_mut() {
            *b = Complex::new(0.0, 0.0);
        }
        self.inv.process(buf);
        let scale = 1.0 / n as f64;
        for (i, v) in x.iter_mut().enumerate() {
            *v = buf[i].re * scale;
        }
    }
}

fn rows(plane: &mut [f64], width: usize, dct: &Dct1, inverse: bool) {
    plane.par_chunks_mut(width).for_each_init(
        || vec![Complex::new(0.0, 0.0); 2 * width],
        |buf, row| {
            if inverse {
                dct.inverse(row, buf)
            } else {
                dct.forward(row, buf)
            }
        },
    );
}

fn transpose(plane: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            out[x * height + y] = plane[y * width + x];
        }
    }
    out
}

/// Separable 2-D transform of a row-major `width x height` plane.
pub(crate) fn dct2d(plane: &[f64], width: usize, height: usize, inverse: bool) -> Vec<f64> {
    let mut p = plane.to_vec();
    rows(&mut p, width, &Dct1::new(width), inverse);
    let mut t = transpose(&p, width, height);
    rows(&mut t, height, &Dct1::new(height), inverse);
    transpose(&t, height, width)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(i, v)| v * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                    .sum()
            })
            .collect()
    }

    #[test]
    fn matches_naive_and_inverts() {
        for n in [1usize, 2, 5, 8, 13] {
            let x: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 - 4.5).collect();
            let d = Dct1::new(n);
            let mut buf = vec![Complex::new(0.0, 0.0); 2 * n];
            let mut y = x.clone();
            d.forward(&mut y, &mut buf);
            for (a, b) in y.iter().zip(naive(&x)) {
                assert!((a - b).abs() < 1e-12, "n={n}");
            }
            d.inverse(&mut y, &mut buf);
            for (a, b) in y.iter().zip(&x) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_2d() {
        let (w, h) = (7, 4);
        let p: Vec<f64> = (0..w * h).map(|i| (i as f64 * 0.37).sin()).collect();
        let back = dct2d(&dct2d(&p, w, h, false), w, h, true);
        for (a, b) in back.iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
