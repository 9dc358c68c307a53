//! Binary netpbm images: P5 (grayscale) and P6 (RGB), 8-bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Shape, Tensor};

struct Header {
    magic: u8,
    width: usize,
    height: usize,
    /// Offset of the first payload byte.
    data_start: usize,
}

fn image_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), offset, msg: msg.into() }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'5' | b'6') {
        return Err(image_err(path, 0, "expected P5 or P6 magic"));
    }
    let magic = bytes[1];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(image_err(path, pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| image_err(path, start, "header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(image_err(path, pos, "expected whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(image_err(path, pos, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(image_err(path, pos, format!("maxval {maxval} unsupported (only 255)")));
    }
    Ok(Header { magic, width, height, data_start: pos + 1 })
}

/// Raw bytes plus `(channels, height, width)`; RGB stays interleaved.
fn read_raw(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let bytes = fs::read(path)?;
    let hdr = parse_header(&bytes, path)?;
    let channels = if hdr.magic == b'6' { 3 } else { 1 };
    let need = channels * hdr.width * hdr.height;
    let end = hdr.data_start + need;
    if bytes.len() < end {
        return Err(image_err(path, bytes.len(), format!("truncated payload, expected {need} bytes from offset {}", hdr.data_start)));
    }
    Ok((bytes[hdr.data_start..end].to_vec(), channels, hdr.height, hdr.width))
}

/// Reads a P5/P6 file as a `(1, c, h, w)` tensor with values `byte / 255`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let (raw, c, h, w) = read_raw(path)?;
    let plane = h * w;
    let mut data = vec![0.0f32; c * plane];
    for (i, &b) in raw.iter().enumerate() {
        data[(i % c) * plane + i / c] = b as f32 / 255.0;
    }
    Tensor::new(Shape::new(1, c, h, w), data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_raw(path: &Path, magic: u8, w: usize, h: usize, payload: &[u8]) -> Result<()> {
    let mut out = format!("P{}\n{w} {h}\n255\n", magic as char).into_bytes();
    out.extend_from_slice(payload);
    fs::write(path, out)?;
    Ok(())
}

/// Writes a single image (`n = 1`) with 1 channel as P5 or 3 as P6.
pub fn write_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    if s.n != 1 || !matches!(s.c, 1 | 3) {
        return Err(Error::shape(format!("cannot write {s} as PGM/PPM")));
    }
    let plane = s.plane();
    let d = img.data();
    let payload: Vec<u8> = (0..s.c * plane).map(|i| quantize(d[(i % s.c) * plane + i / s.c])).collect();
    write_raw(path, if s.c == 3 { b'6' } else { b'5' }, s.w, s.h, &payload)
}

/// Stores label `l` as byte `l · scale`.
pub fn write_mask(path: &Path, mask: &Mask, scale: u8) -> Result<()> {
    if mask.n != 1 {
        return Err(Error::shape("only single masks can be written"));
    }
    let payload = mask
        .data
        .iter()
        .map(|&l| l.checked_mul(scale).ok_or_else(|| Error::invalid(format!("label {l} × {scale} overflows a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    write_raw(path, b'5', mask.w, mask.h, &payload)
}

/// Inverse of [`write_mask`]; bytes not divisible by `scale` are rejected.
pub fn read_mask(path: &Path, scale: u8) -> Result<Mask> {
    let (raw, c, h, w) = read_raw(path)?;
    if c != 1 {
        return Err(image_err(path, 1, "mask must be a P5 grayscale file"));
    }
    let scale = scale.max(1);
    let data = raw
        .iter()
        .enumerate()
        .map(|(i, &b)| match b % scale {
            0 => Ok(b / scale),
            _ => Err(image_err(path, i, format!("byte {b} is not a multiple of mask scale {scale}"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Mask::new(1, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        fs::write(&p, b"P5\n# comment\n2 2\n255\n\x00\x80\xff\x40").unwrap();
        let t = read_image(&p).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 1, 2, 2));
        let want = [0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0];
        assert_eq!(t.data(), want.map(|v: f64| v as f32));
        assert!((t.data()[1] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn p6_planes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        fs::write(&p, b"P6 1 1 255\n\x0a\x14\x1e").unwrap();
        let t = read_image(&p).unwrap();
        assert_eq!(t.data(), &[10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]);
    }

    #[test]
    fn errors_name_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        fs::write(&p, b"P5\n2 2\n255\n\x00\x01").unwrap();
        let e = read_image(&p).unwrap_err().to_string();
        assert!(e.contains("truncated") && e.contains("byte offset 13"), "{e}");
        fs::write(&p, b"P5\n2 x\n255\n").unwrap();
        assert!(read_image(&p).unwrap_err().to_string().contains("byte offset 5"));
        fs::write(&p, b"P5\n2 2\n65535\n").unwrap();
        assert!(read_image(&p).is_err());
        fs::write(&p, b"P2\n").unwrap();
        assert!(read_image(&p).unwrap_err().to_string().contains("byte offset 0"));
    }

    #[test]
    fn mask_scale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let m = Mask::new(1, 1, 3, vec![0, 1, 1]).unwrap();
        write_mask(&p, &m, 255).unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"P5\n3 1\n255\n\x00\xff\xff");
        assert_eq!(read_mask(&p, 255).unwrap(), m);
        assert!(read_mask(&p, 2).is_err());
    }
}
