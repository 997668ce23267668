//! On-disk formats: 16-bit binary PGM with a JSON sidecar for raw frames,
//! little-endian PFM for float images.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{CfaPattern, LinearImage, RawFrame};
use crate::sim::{CameraId, ExposureSettings};

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

/// Splits a netpbm-style header into `count` whitespace-separated tokens,
/// skipping `#` comments. Returns the tokens and the offset of the payload
/// (one whitespace byte after the last token).
fn header_tokens(bytes: &[u8], count: usize, path: &Path) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(Error::format(path, "missing payload"));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(tok: &str, path: &Path) -> Result<usize> {
    tok.parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::format(path, format!("bad dimension {tok:?}")))
}

pub fn encode_pgm16(width: usize, height: usize, data: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(data.len() * 2);
    for v in data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn decode_pgm16(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let (tok, offset) = header_tokens(bytes, 4, path)?;
    if tok[0] != "P5" {
        return Err(Error::format(path, format!("expected P5, found {:?}", tok[0])));
    }
    let w = parse_dim(&tok[1], path)?;
    let h = parse_dim(&tok[2], path)?;
    let maxval: u32 = tok[3]
        .parse()
        .map_err(|_| Error::format(path, "bad maxval"))?;
    if maxval < 256 || maxval > 65535 {
        return Err(Error::format(path, format!("maxval {maxval} is not 16-bit")));
    }
    let payload = &bytes[offset..];
    if payload.len() != w * h * 2 {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {}", payload.len(), w * h * 2),
        ));
    }
    let data = payload
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((w, h, data))
}

pub fn encode_pfm(img: &LinearImage) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(Error::Channel {
                expected: 3,
                actual: c,
            })
        }
    };
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * ch * 4);
    for y in (0..h).rev() {
        let row = &img.data()[y * w * ch..(y + 1) * w * ch];
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<LinearImage> {
    let (tok, offset) = header_tokens(bytes, 4, path)?;
    let ch = match tok[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::format(path, format!("unknown PFM magic {other:?}"))),
    };
    let w = parse_dim(&tok[1], path)?;
    let h = parse_dim(&tok[2], path)?;
    let scale: f32 = tok[3]
        .parse()
        .map_err(|_| Error::format(path, "bad scale field"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(path, "scale field must be non-zero"));
    }
    let little = scale < 0.0;
    let payload = &bytes[offset..];
    let row_len = w * ch;
    if payload.len() != row_len * h * 4 {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {}", payload.len(), row_len * h * 4),
        ));
    }
    let mut data = vec![0.0f32; row_len * h];
    for (i, b) in payload.chunks_exact(4).enumerate() {
        let arr = [b[0], b[1], b[2], b[3]];
        let v = if little {
            f32::from_le_bytes(arr)
        } else {
            f32::from_be_bytes(arr)
        };
        let file_row = i / row_len;
        let y = h - 1 - file_row;
        data[y * row_len + i % row_len] = v;
    }
    LinearImage::from_vec(w, h, ch, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_pfm(path: &Path, img: &LinearImage) -> Result<()> {
    write_atomic(path, &encode_pfm(img)?)
}

pub fn read_pfm(path: &Path) -> Result<LinearImage> {
    decode_pfm(&read_bytes(path)?, path)
}

/// Metadata stored next to a raw PGM as `<name>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub cfa_pattern: CfaPattern,
    pub adc_bits: u32,
    pub black_level: u16,
    pub camera_id: CameraId,
    pub settings: ExposureSettings,
}

pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

pub fn write_raw(path: &Path, raw: &RawFrame) -> Result<()> {
    raw.validate()?;
    write_atomic(path, &encode_pgm16(raw.width, raw.height, &raw.data))?;
    let meta = RawSidecar {
        cfa_pattern: raw.cfa_pattern,
        adc_bits: raw.adc_bits,
        black_level: raw.black_level,
        camera_id: raw.camera_id,
        settings: raw.settings.clone(),
    };
    write_json(&sidecar_path(path), &meta)
}

pub fn read_raw(path: &Path) -> Result<RawFrame> {
    let (width, height, data) = decode_pgm16(&read_bytes(path)?, path)?;
    let meta: RawSidecar = read_json(&sidecar_path(path))?;
    let raw = RawFrame {
        width,
        height,
        data,
        cfa_pattern: meta.cfa_pattern,
        adc_bits: meta.adc_bits,
        black_level: meta.black_level,
        settings: meta.settings,
        camera_id: meta.camera_id,
    };
    raw.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::mosaic;
    use proptest::prelude::*;

    #[test]
    fn pfm_header_and_row_order() {
        let img = LinearImage::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_pfm(&img).unwrap();
        assert!(bytes.starts_with(b"Pf\n2 2\n-1.0\n"));
        let payload = &bytes[b"Pf\n2 2\n-1.0\n".len()..];
        // Bottom row first.
        assert_eq!(&payload[0..4], &3.0f32.to_le_bytes());
        assert_eq!(&payload[12..16], &2.0f32.to_le_bytes());
    }

    #[test]
    fn pfm_big_endian_is_accepted() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&0.25f32.to_be_bytes());
        let img = decode_pfm(&bytes, Path::new("x.pfm")).unwrap();
        assert_eq!(img.get(0, 0, 0), 0.25);
    }

    #[test]
    fn pfm_rejects_two_channels() {
        assert!(encode_pfm(&LinearImage::new(2, 2, 2)).is_err());
    }

    #[test]
    fn pfm_truncated_payload_is_format_error() {
        let bytes = b"PF\n4 4\n-1.0\n\0\0\0\0".to_vec();
        assert!(matches!(
            decode_pfm(&bytes, Path::new("t.pfm")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn pgm_is_big_endian() {
        let bytes = encode_pgm16(2, 1, &[0x0102, 0xfff0]);
        assert_eq!(&bytes[..bytes.len() - 4], b"P5\n2 1\n65535\n");
        assert_eq!(&bytes[bytes.len() - 4..], &[1, 2, 0xff, 0xf0]);
    }

    #[test]
    fn pgm_header_comments() {
        let mut bytes = b"P5\n# made by hand\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0x12, 0x34]);
        let (w, h, d) = decode_pgm16(&bytes, Path::new("c.pgm")).unwrap();
        assert_eq!((w, h, d), (1, 1, vec![0x1234]));
    }

    #[test]
    fn raw_with_sidecar_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = LinearImage::from_fn(6, 4, 3, |x, y, c| ((x + y + c) % 5) as f32 / 5.0);
        let mut raw = mosaic(&img, CfaPattern::Gbrg, 12).unwrap();
        raw.camera_id = CameraId::Cam2;
        raw.settings.exposure_s = 0.048;
        let path = dir.path().join("f0000.pgm");
        write_raw(&path, &raw).unwrap();
        assert!(dir.path().join("f0000.json").exists());
        assert_eq!(read_raw(&path).unwrap(), raw);
    }

    proptest! {
        #[test]
        fn pfm_round_trip(vals in proptest::collection::vec(-10.0f32..10.0, 5 * 3 * 3)) {
            let img = LinearImage::from_vec(5, 3, 3, vals).unwrap();
            let back = decode_pfm(&encode_pfm(&img).unwrap(), Path::new("p.pfm")).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
