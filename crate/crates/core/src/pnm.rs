//! Binary PPM (P6) and PGM (P5) with 8-bit samples; value `v` in `[0, 1]`
//! is stored as `round(255·v)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::imaging::Image;
use crate::tensor::Mat;
use crate::{Error, Result};

/// `round(255·v)` with halves rounded up.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 255.0
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    out
}

pub fn encode_pgm(map: &Mat) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.cols(), map.rows()).into_bytes();
    out.extend(map.data().iter().map(|&v| quantize(v)));
    out
}

/// Parses a P5/P6 header, returning `(width, height, payload)`.
fn parse<'a>(bytes: &'a [u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            path,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed header"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(path, format!("maxval {maxval} unsupported")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::format(path, "missing separator after header"));
    }
    Ok((w, h, &bytes[pos + 1..]))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let (w, h, payload) = parse(bytes, b"P6", path)?;
    if payload.len() != w * h * 3 {
        return Err(Error::format(path, "pixel payload length mismatch"));
    }
    Image::new(h, w, payload.iter().map(|&b| dequantize(b)).collect())
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Mat> {
    let (w, h, payload) = parse(bytes, b"P5", path)?;
    if payload.len() != w * h {
        return Err(Error::format(path, "pixel payload length mismatch"));
    }
    Ok(Mat::from_vec(
        h,
        w,
        payload.iter().map(|&b| dequantize(b)).collect(),
    ))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn read_pgm(path: &Path) -> Result<Mat> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(1.5), 255);
    }

    #[test]
    fn ppm_roundtrip_within_quantization() {
        let img = Image::from_fn(3, 5, |y, x, c| ((y * 5 + x) * 3 + c) as f64 / 45.0);
        let back = decode_ppm(&encode_ppm(&img), Path::new("mem")).unwrap();
        assert_eq!((back.height(), back.width()), (3, 5));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_header_with_comment() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let m = decode_pgm(bytes, Path::new("mem")).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0]);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let bytes = encode_pgm(&Mat::zeros(2, 2));
        assert!(matches!(
            decode_ppm(&bytes, Path::new("mem")),
            Err(Error::Format { .. })
        ));
    }
}
