//! Gradient-corrected bilinear demosaicking (Malvar, He and Cutler 2004).
//!
//! Kernel weights are kept as integers scaled by 16 and applied to integer
//! sample values, so every sum is exact in f64 and the only rounding is the
//! final normalization.

use rayon::prelude::*;

use super::raw::RawFrame;
use super::{mirror, CfaSite, LinearImage};
use crate::error::Result;

/// Sparse taps `(dx, dy, weight*16)`.
type Taps = &'static [(isize, isize, i32)];

/// Green at a red or blue site.
const G_AT_RB: Taps = &[
    (0, -2, -2),
    (0, -1, 4),
    (-2, 0, -2),
    (-1, 0, 4),
    (0, 0, 8),
    (1, 0, 4),
    (2, 0, -2),
    (0, 1, 4),
    (0, 2, -2),
];

/// Red/blue at a green site whose row carries that color.
const RB_AT_G_ROW: Taps = &[
    (0, -2, 1),
    (-1, -1, -2),
    (1, -1, -2),
    (-2, 0, -2),
    (-1, 0, 8),
    (0, 0, 10),
    (1, 0, 8),
    (2, 0, -2),
    (-1, 1, -2),
    (1, 1, -2),
    (0, 2, 1),
];

/// Red/blue at a green site whose column carries that color.
const RB_AT_G_COL: Taps = &[
    (0, -2, -2),
    (-1, -1, -2),
    (1, -1, -2),
    (0, -1, 8),
    (-2, 0, 1),
    (0, 0, 10),
    (2, 0, 1),
    (-1, 1, -2),
    (1, 1, -2),
    (0, 1, 8),
    (0, 2, -2),
];

/// Red at a blue site and blue at a red site.
const RB_AT_BR: Taps = &[
    (0, -2, -3),
    (-1, -1, 4),
    (1, -1, 4),
    (-2, 0, -3),
    (0, 0, 12),
    (2, 0, -3),
    (-1, 1, 4),
    (1, 1, 4),
    (0, 2, -3),
];

/// Demosaics a raw frame into a normalized 3-channel linear image. Observed
/// samples pass through; the two missing channels come from the 5x5
/// gradient-corrected kernels with mirrored borders.
pub fn demosaic_malvar(raw: &RawFrame) -> Result<LinearImage> {
    raw.validate()?;
    let (w, h) = (raw.width, raw.height);
    let black = raw.black_level as f64;
    let range = (raw.white_level() as f64 - black).max(1.0);
    let norm = 1.0 / range;
    let norm16 = 1.0 / (16.0 * range);

    let value = |x: usize, y: usize| -> f64 { (raw.get(x, y) as f64 - black).max(0.0) };
    let apply = |taps: Taps, x: usize, y: usize| -> f64 {
        let mut acc = 0.0;
        for &(dx, dy, wt) in taps {
            let sx = mirror(x as isize + dx, w);
            let sy = mirror(y as isize + dy, h);
            acc += wt as f64 * value(sx, sy);
        }
        acc
    };

    let mut data = vec![0.0f32; w * h * 3];
    data.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let own = value(x, y) * norm;
            let px = match raw.cfa_pattern.site(x, y) {
                CfaSite::Red => [
                    own,
                    apply(G_AT_RB, x, y) * norm16,
                    apply(RB_AT_BR, x, y) * norm16,
                ],
                CfaSite::Blue => [
                    apply(RB_AT_BR, x, y) * norm16,
                    apply(G_AT_RB, x, y) * norm16,
                    own,
                ],
                CfaSite::GreenR => [
                    apply(RB_AT_G_ROW, x, y) * norm16,
                    own,
                    apply(RB_AT_G_COL, x, y) * norm16,
                ],
                CfaSite::GreenB => [
                    apply(RB_AT_G_COL, x, y) * norm16,
                    own,
                    apply(RB_AT_G_ROW, x, y) * norm16,
                ],
            };
            for c in 0..3 {
                row[x * 3 + c] = px[c] as f32;
            }
        }
    });
    LinearImage::from_vec(w, h, 3, data)
}
