//! Affine bilateral grids: a coarse 3-D lattice of 3x4 color transforms
//! sliced per pixel by a guide value.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{read_json, read_pfm, write_json, write_pfm};
use crate::image::LinearImage;

pub const DEFAULT_GRID_DIMS: (usize, usize, usize) = (16, 16, 8);

pub type Affine = [f64; 12];

pub const IDENTITY_AFFINE: Affine = [
    1.0, 0.0, 0.0, 0.0, //
    0.0, 1.0, 0.0, 0.0, //
    0.0, 0.0, 1.0, 0.0,
];

#[derive(Debug, Clone, PartialEq)]
pub struct AffineBilateralGrid {
    /// (gw, gh, gd)
    pub dims: (usize, usize, usize),
    /// Row-major 3x4 matrices, cell (x, y, z) at `(z * gh + y) * gw + x`.
    pub cells: Vec<Affine>,
    pub spatial_scale: f64,
    pub range_scale: f64,
}

impl AffineBilateralGrid {
    pub fn constant(dims: (usize, usize, usize), spatial_scale: f64, a: Affine) -> Result<Self> {
        let g = AffineBilateralGrid {
            dims,
            cells: vec![a; dims.0 * dims.1 * dims.2],
            spatial_scale,
            range_scale: 1.0 / (dims.2.max(2) - 1) as f64,
        };
        g.validate()?;
        Ok(g)
    }

    /// Identity grid with the default lattice sized to cover `width x height`.
    pub fn identity(width: usize, height: usize) -> Self {
        let (gw, gh, _) = DEFAULT_GRID_DIMS;
        let scale = (width.max(height).max(2) - 1) as f64 / (gw.max(gh) - 1) as f64;
        Self::constant(DEFAULT_GRID_DIMS, scale, IDENTITY_AFFINE).expect("identity grid is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let (gw, gh, gd) = self.dims;
        if gw == 0 || gh == 0 || gd < 2 {
            return Err(Error::Dimension(format!("grid dims {gw}x{gh}x{gd}: need gw, gh >= 1 and gd >= 2")));
        }
        if self.cells.len() != gw * gh * gd {
            return Err(Error::Dimension(format!(
                "grid holds {} cells, dims imply {}",
                self.cells.len(),
                gw * gh * gd
            )));
        }
        if !(self.spatial_scale > 0.0 && self.spatial_scale.is_finite()) {
            return Err(Error::Range(format!("spatial_scale must be > 0, got {}", self.spatial_scale)));
        }
        if self.cells.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite grid entry".into()));
        }
        Ok(())
    }

    #[inline]
    fn cell(&self, x: usize, y: usize, z: usize) -> &Affine {
        let (gw, gh, _) = self.dims;
        &self.cells[(z * gh + y) * gw + x]
    }

    /// Trilinearly interpolated affine at grid coordinates, clamped to the lattice.
    pub fn affine_at(&self, gx: f64, gy: f64, gz: f64) -> Affine {
        let (gw, gh, gd) = self.dims;
        let axis = |v: f64, n: usize| {
            let v = v.clamp(0.0, (n - 1) as f64);
            let i0 = (v.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, v - i0 as f64)
        };
        let (x0, x1, tx) = axis(gx, gw);
        let (y0, y1, ty) = axis(gy, gh);
        let (z0, z1, tz) = axis(gz, gd);
        // a + t (b - a) is exact whenever a == b, so constant grids slice exactly.
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        let mut out = [0.0; 12];
        for (k, o) in out.iter_mut().enumerate() {
            let plane = |z| {
                let r0 = lerp(self.cell(x0, y0, z)[k], self.cell(x1, y0, z)[k], tx);
                let r1 = lerp(self.cell(x0, y1, z)[k], self.cell(x1, y1, z)[k], tx);
                lerp(r0, r1, ty)
            };
            *o = lerp(plane(z0), plane(z1), tz);
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut g = self.clone();
        g.cells.iter_mut().flatten().for_each(|v| *v *= s);
        g
    }

    /// Writes the JSON header to `path` and the cell payload next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("grid");
        let cells_name = format!("{stem}_cells.pfm");
        let dir = path.parent().unwrap_or(Path::new(""));
        let rows = self.cells.len();
        let data: Vec<f32> = self.cells.iter().flatten().map(|&v| v as f32).collect();
        write_pfm(&dir.join(&cells_name), &LinearImage::from_vec(12, rows, 1, data)?)?;
        let (gw, gh, gd) = self.dims;
        write_json(
            path,
            &GridFile {
                dims: [gw, gh, gd],
                spatial_scale: self.spatial_scale,
                range_scale: self.range_scale,
                cells: cells_name,
                slice_map: None,
            },
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridFile {
    pub dims: [usize; 3],
    pub spatial_scale: f64,
    pub range_scale: f64,
    /// PFM with 12 columns and gw*gh*gd rows, relative to the header.
    pub cells: String,
    /// Optional 1-channel PFM slice map, relative to the header.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice_map: Option<String>,
}

/// Loads a grid and its optional slice map. Any problem is a format error
/// naming the offending file.
pub fn load_grid(path: &Path) -> Result<(AffineBilateralGrid, Option<SliceMap>)> {
    let as_format = |p: &Path, e: Error| match e {
        Error::Format { .. } | Error::Io { .. } | Error::Json { .. } => e,
        other => Error::format(p, other.to_string()),
    };
    let header: GridFile = read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let cells_path = dir.join(&header.cells);
    let payload = read_pfm(&cells_path)?;
    let [gw, gh, gd] = header.dims;
    if payload.channels() != 1 || payload.width() != 12 || payload.height() != gw * gh * gd {
        return Err(Error::format(
            &cells_path,
            format!(
                "expected a 1-channel 12x{} payload, got {}x{}x{}",
                gw * gh * gd,
                payload.width(),
                payload.height(),
                payload.channels()
            ),
        ));
    }
    let cells = payload
        .data()
        .chunks_exact(12)
        .map(|c| {
            let mut a = [0.0; 12];
            a.iter_mut().zip(c).for_each(|(d, &s)| *d = s as f64);
            a
        })
        .collect();
    let grid = AffineBilateralGrid {
        dims: (gw, gh, gd),
        cells,
        spatial_scale: header.spatial_scale,
        range_scale: header.range_scale,
    };
    grid.validate().map_err(|e| as_format(path, e))?;
    let slice = match &header.slice_map {
        Some(name) => {
            let p = dir.join(name);
            Some(SliceMap::new(read_pfm(&p)?).map_err(|e| as_format(&p, e))?)
        }
        None => None,
    };
    Ok((grid, slice))
}

/// Per-pixel guide in [0, 1] selecting the grid depth.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceMap(LinearImage);

impl SliceMap {
    pub fn new(img: LinearImage) -> Result<Self> {
        img.require_channels(1)?;
        let (lo, hi) = img.min_max();
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::Range(format!("slice map values must lie in [0, 1], got [{lo}, {hi}]")));
        }
        Ok(SliceMap(img))
    }

    pub fn constant(width: usize, height: usize, v: f32) -> Result<Self> {
        Self::new(LinearImage::constant(width, height, 1, v))
    }

    pub fn image(&self) -> &LinearImage {
        &self.0
    }
}

/// Sliced affine applied to one pixel at `(x, y)` with guide value `s`.
pub fn slice_pixel(grid: &AffineBilateralGrid, rgb: [f64; 3], x: usize, y: usize, s: f64) -> [f64; 3] {
    let a = grid.affine_at(
        x as f64 / grid.spatial_scale,
        y as f64 / grid.spatial_scale,
        s * (grid.dims.2 - 1) as f64,
    );
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let m = &a[c * 4..c * 4 + 4];
        *o = m[0] * rgb[0] + m[1] * rgb[1] + m[2] * rgb[2] + m[3];
    }
    out
}

/// Applies the grid's sliced affine to every pixel. No clamping.
pub fn slice_apply(grid: &AffineBilateralGrid, input: &LinearImage, slice: &SliceMap) -> Result<LinearImage> {
    input.require_channels(3)?;
    grid.validate()?;
    let (w, h) = input.dims();
    slice.0.require_dims(w, h, "slice map")?;
    let mut out = vec![0.0f32; w * h * 3];
    out.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let rgb = [
                input.get(x, y, 0) as f64,
                input.get(x, y, 1) as f64,
                input.get(x, y, 2) as f64,
            ];
            let v = slice_pixel(grid, rgb, x, y, slice.0.get(x, y, 0) as f64);
            for c in 0..3 {
                row[x * 3 + c] = v[c] as f32;
            }
        }
    });
    LinearImage::from_vec(w, h, 3, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn test_image(w: usize, h: usize) -> LinearImage {
        LinearImage::from_fn(w, h, 3, |x, y, c| ((x * 13 + y * 7 + c * 5) % 17) as f32 / 16.0 - 0.1)
    }

    #[test]
    fn identity_grid_is_exact() {
        let img = test_image(23, 17);
        let slice = SliceMap::new(LinearImage::from_fn(23, 17, 1, |x, y, _| ((x + y) % 10) as f32 / 9.0)).unwrap();
        let out = slice_apply(&AffineBilateralGrid::identity(23, 17), &img, &slice).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn constant_grid_applies_affine() {
        let a: Affine = [1.1, 0.2, -0.1, 0.05, 0.0, 0.9, 0.3, -0.02, 0.4, 0.0, 0.7, 0.1];
        let grid = AffineBilateralGrid::constant((3, 2, 4), 5.0, a).unwrap();
        let img = test_image(9, 8);
        let out = slice_apply(&grid, &img, &SliceMap::constant(9, 8, 0.3).unwrap()).unwrap();
        for y in 0..8 {
            for x in 0..9 {
                let p: Vec<f64> = (0..3).map(|c| img.get(x, y, c) as f64).collect();
                for c in 0..3 {
                    let m = &a[c * 4..];
                    let e = m[0] * p[0] + m[1] * p[1] + m[2] * p[2] + m[3];
                    assert!((out.get(x, y, c) as f64 - e).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn depth_interpolation_by_hand() {
        let (o0, o1) = ([0.1, -0.2, 0.3], [0.5, 0.4, -0.1]);
        let mut cells = Vec::new();
        for o in [o0, o1] {
            let mut a = IDENTITY_AFFINE;
            for c in 0..3 {
                a[c * 4 + 3] = o[c];
            }
            cells.push(a);
        }
        let grid = AffineBilateralGrid {
            dims: (1, 1, 2),
            cells,
            spatial_scale: 1.0,
            range_scale: 1.0,
        };
        let img = test_image(4, 3);
        let out = slice_apply(&grid, &img, &SliceMap::constant(4, 3, 0.5).unwrap()).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                for c in 0..3 {
                    let e = img.get(x, y, c) as f64 + (o0[c] + o1[c]) / 2.0;
                    assert!((out.get(x, y, c) as f64 - e).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(SliceMap::new(LinearImage::constant(2, 2, 1, 1.5)).is_err());
        assert!(AffineBilateralGrid::constant((2, 2, 1), 1.0, IDENTITY_AFFINE).is_err());
        let grid = AffineBilateralGrid::identity(4, 4);
        let err = slice_apply(&grid, &test_image(4, 4), &SliceMap::constant(3, 4, 0.0).unwrap());
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut grid = AffineBilateralGrid::identity(32, 32);
        grid.cells[5][3] = 0.25;
        let path = dir.path().join("g.json");
        grid.save(&path).unwrap();
        let (back, slice) = load_grid(&path).unwrap();
        assert_eq!(back, grid);
        assert!(slice.is_none());
    }

    #[test]
    fn malformed_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        AffineBilateralGrid::identity(8, 8).save(&path).unwrap();
        write_pfm(&dir.path().join("g_cells.pfm"), &LinearImage::new(12, 3, 1)).unwrap();
        assert!(matches!(load_grid(&path), Err(Error::Format { .. })));
        let missing = dir.path().join("nope.json");
        let err = load_grid(&missing).unwrap_err();
        assert!(err.to_string().contains("nope.json"));
    }

    proptest! {
        #[test]
        fn slicing_is_linear_in_the_grid(
            c1 in proptest::collection::vec(-1.0f64..1.0, 2 * 2 * 3 * 12),
            c2 in proptest::collection::vec(-1.0f64..1.0, 2 * 2 * 3 * 12),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
            s in 0.0f32..1.0,
        ) {
            let mk = |c: &[f64]| AffineBilateralGrid {
                dims: (2, 2, 3),
                cells: c.chunks(12).map(|k| k.try_into().unwrap()).collect(),
                spatial_scale: 3.0,
                range_scale: 0.5,
            };
            let (g1, g2) = (mk(&c1), mk(&c2));
            let mix: Vec<f64> = c1.iter().zip(&c2).map(|(x, y)| a * x + b * y).collect();
            let img = test_image(5, 4);
            for y in 0..4 {
                for x in 0..5 {
                    let rgb = [img.get(x, y, 0) as f64, img.get(x, y, 1) as f64, img.get(x, y, 2) as f64];
                    let sv = (s as f64 + x as f64 * 0.1).min(1.0);
                    let o1 = slice_pixel(&g1, rgb, x, y, sv);
                    let o2 = slice_pixel(&g2, rgb, x, y, sv);
                    let om = slice_pixel(&mk(&mix), rgb, x, y, sv);
                    for c in 0..3 {
                        prop_assert!((om[c] - (a * o1[c] + b * o2[c])).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
