//! Evaluation: brightness normalization, PSNR and SSIM.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::{gaussian_kernel, luma, LinearImage};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub brightness_scale: f64,
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Str(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Db::Str(s) => Err(serde::de::Error::custom(format!("invalid PSNR value {s:?}"))),
    }
}

fn same_dims(a: &LinearImage, b: &LinearImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "images differ in shape: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

/// Scales `test` so its mean over all channels equals that of `reference`.
pub fn normalize_brightness(test: &LinearImage, reference: &LinearImage) -> Result<(LinearImage, f64)> {
    same_dims(test, reference)?;
    let mr = reference.mean();
    if !(mr > 0.0) {
        return Err(Error::Domain(format!("reference mean must be > 0, got {mr}")));
    }
    let mt = test.mean();
    if mt == 0.0 {
        return Err(Error::Degenerate("test image has zero mean".into()));
    }
    let scale = mr / mt;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Degenerate(format!("brightness scale {scale} is not positive and finite")));
    }
    Ok((test.map(|v| (v as f64 * scale) as f32), scale))
}

/// Peak signal-to-noise ratio in dB; identical images give +infinity.
pub fn psnr(test: &LinearImage, reference: &LinearImage, peak: f64) -> Result<f64> {
    same_dims(test, reference)?;
    let n = test.data().len() as f64;
    let mse = test
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn as_luma(img: &LinearImage) -> Result<Vec<f64>> {
    match img.channels() {
        1 => Ok(img.plane_f64(0)),
        3 => Ok(luma(img)?.plane_f64(0)),
        c => Err(Error::Channel { expected: 3, actual: c }),
    }
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(p: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM on luma with an 11x11 Gaussian window (sigma 1.5), dynamic range 1.
pub fn ssim(test: &LinearImage, reference: &LinearImage) -> Result<f64> {
    same_dims(test, reference)?;
    let (w, h) = test.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let x = as_luma(test)?;
    let y = as_luma(reference)?;
    let k = gaussian_kernel(SSIM_SIGMA);
    debug_assert_eq!(k.len(), SSIM_WINDOW);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mx, ow, oh) = filter_valid(&x, w, h, &k);
    let (my, _, _) = filter_valid(&y, w, h, &k);
    let (exx, _, _) = filter_valid(&prod(&x, &x), w, h, &k);
    let (eyy, _, _) = filter_valid(&prod(&y, &y), w, h, &k);
    let (exy, _, _) = filter_valid(&prod(&x, &y), w, h, &k);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (ux, uy) = (mx[i], my[i]);
        let sxx = exx[i] - ux * ux;
        let syy = eyy[i] - uy * uy;
        let sxy = exy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * sxy + c2)) / ((ux * ux + uy * uy + c1) * (sxx + syy + c2));
    }
    Ok(total / (ow * oh) as f64)
}

/// Brightness-normalizes `test` against `reference`, then measures it.
pub fn evaluate(test: &LinearImage, reference: &LinearImage) -> Result<MetricReport> {
    let (normalized, brightness_scale) = normalize_brightness(test, reference)?;
    Ok(MetricReport {
        psnr_db: psnr(&normalized, reference, 1.0)?,
        ssim: ssim(&normalized, reference)?,
        brightness_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(seed: u64, w: usize, h: usize, c: usize) -> LinearImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearImage::from_fn(w, h, c, |_, _, _| rng.gen_range(0.05..0.95))
    }

    #[test]
    fn normalize_fixtures() {
        let r = rand_img(1, 8, 8, 3);
        let (out, s) = normalize_brightness(&r, &r).unwrap();
        assert_eq!(s, 1.0);
        assert_eq!(out, r);
        let half = r.map(|v| v * 0.5);
        let (out, s) = normalize_brightness(&half, &r).unwrap();
        assert_eq!(s, 2.0);
        assert_eq!(out, r);
        let t = rand_img(2, 8, 8, 3);
        let (out, _) = normalize_brightness(&t, &r).unwrap();
        assert!((out.mean() - r.mean()).abs() < 1e-6);
        let zero = LinearImage::new(8, 8, 3);
        assert!(matches!(normalize_brightness(&zero, &r), Err(Error::Degenerate(_))));
    }

    #[test]
    fn psnr_fixtures() {
        let r = LinearImage::constant(16, 16, 3, 0.3);
        assert_eq!(psnr(&r, &r, 1.0).unwrap(), f64::INFINITY);
        let d1 = LinearImage::constant(16, 16, 3, 0.4);
        assert!((psnr(&d1, &r, 1.0).unwrap() - 20.0).abs() < 1e-3);
        let d5 = LinearImage::constant(16, 16, 3, 0.8);
        assert!((psnr(&d5, &r, 1.0).unwrap() - 6.0206).abs() < 1e-3);
        assert!(matches!(psnr(&r, &LinearImage::new(16, 15, 3), 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn ssim_fixtures() {
        let r = rand_img(3, 32, 24, 3);
        assert_eq!(ssim(&r, &r).unwrap(), 1.0);
        let a = LinearImage::constant(16, 16, 1, 0.2);
        let b = LinearImage::constant(16, 16, 1, 0.8);
        let expect = (2.0 * 0.16 + 1e-4) / (0.04 + 0.64 + 1e-4);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-3);
        assert!((expect - 0.4707).abs() < 1e-4);
        let small = LinearImage::new(10, 40, 1);
        assert!(matches!(ssim(&small, &small), Err(Error::Dimension(_))));
    }

    #[test]
    fn anti_correlated_ssim_is_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zero_mean: Vec<f32> = (0..48 * 48).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let r = LinearImage::from_vec(48, 48, 1, zero_mean.iter().map(|v| 0.5 + v).collect()).unwrap();
        let t = LinearImage::from_vec(48, 48, 1, zero_mean.iter().map(|v| 0.5 - v).collect()).unwrap();
        assert!(ssim(&t, &r).unwrap() < 0.0);
    }

    #[test]
    fn self_evaluation() {
        let r = rand_img(5, 16, 16, 3);
        let rep = evaluate(&r, &r).unwrap();
        assert_eq!(rep.psnr_db, f64::INFINITY);
        assert_eq!(rep.ssim, 1.0);
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"psnr_db\":\"inf\""), "{json}");
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn evaluate_normalizes_first() {
        let r = rand_img(6, 16, 16, 3);
        let t = rand_img(7, 16, 16, 3).map(|v| v * 3.0);
        let (n, s) = normalize_brightness(&t, &r).unwrap();
        let rep = evaluate(&t, &r).unwrap();
        assert_eq!(rep.brightness_scale, s);
        assert_eq!(rep.psnr_db, psnr(&n, &r, 1.0).unwrap());
        assert_eq!(rep.ssim, ssim(&n, &r).unwrap());
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(a in 0u64..500, b in 500u64..1000) {
            let (x, y) = (rand_img(a, 14, 13, 3), rand_img(b, 14, 13, 3));
            prop_assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
            prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn ssim_shift_invariant(a in 0u64..500, shift in -0.04f32..0.04) {
            let x = rand_img(a, 16, 16, 1);
            let y = x.map(|v| (v + 0.1 * (v * 37.0).sin()).clamp(0.0, 1.0));
            let base = ssim(&x, &y).unwrap();
            let shifted = ssim(&x.map(|v| v + shift), &y.map(|v| v + shift)).unwrap();
            prop_assert!((base - shifted).abs() < 1e-3);
        }

        #[test]
        fn normalized_mean_matches(a in 0u64..500, scale in 0.1f32..10.0) {
            let r = rand_img(a, 9, 7, 3);
            let t = rand_img(a + 1, 9, 7, 3).map(|v| v * scale);
            let (out, s) = normalize_brightness(&t, &r).unwrap();
            prop_assert!(s > 0.0);
            prop_assert!((out.mean() - r.mean()).abs() < 1e-6);
        }
    }
}
