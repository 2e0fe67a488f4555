//! Binary netpbm I/O: P6 (PPM) input images, P5 (PGM) output maps.
//!
//! The parser is strict: binary magic, dimensions and maxval (<= 255) with
//! optional `#` comments, exactly one whitespace byte before the raster, and
//! no trailing bytes.

use std::path::Path;

use adpc_core::{Error, Result, Tensor};

const MAX_PIXELS: usize = 1 << 26;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn byte(&mut self) -> Result<u8> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| Error::format("unexpected end of netpbm header"))?;
        self.pos += 1;
        Ok(b)
    }

    /// Skip whitespace and `#` comments; error if nothing was skipped.
    fn skip_separator(&mut self) -> Result<()> {
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
        if self.pos == start {
            return Err(Error::format("missing separator in netpbm header"));
        }
        Ok(())
    }

    fn integer(&mut self) -> Result<usize> {
        let start = self.pos;
        let mut value = 0usize;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_digit() {
                value = value
                    .checked_mul(10)
                    .and_then(|v| v.checked_add((b - b'0') as usize))
                    .ok_or_else(|| Error::format("netpbm header value overflow"))?;
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return Err(Error::format("expected integer in netpbm header"));
        }
        Ok(value)
    }
}

/// Read a binary P6 image as a 3-channel tensor with values in [0, 1].
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    parse_ppm(&bytes)
}

pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.byte()? != b'P' || cur.byte()? != b'6' {
        return Err(Error::format("not a binary P6 image"));
    }
    cur.skip_separator()?;
    let width = cur.integer()?;
    cur.skip_separator()?;
    let height = cur.integer()?;
    cur.skip_separator()?;
    let maxval = cur.integer()?;
    if width == 0 || height == 0 {
        return Err(Error::format("image dimensions must be >= 1"));
    }
    if width * height > MAX_PIXELS {
        return Err(Error::format("image too large"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::format(format!("unsupported maxval {maxval} (need 1..=255)")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !cur.byte()?.is_ascii_whitespace() {
        return Err(Error::format("missing whitespace before raster"));
    }
    let want = width * height * 3;
    let raster = &bytes[cur.pos..];
    if raster.len() < want {
        return Err(Error::format(format!(
            "raster truncated: {} bytes for {width}x{height}",
            raster.len()
        )));
    }
    if raster.len() > want {
        return Err(Error::format("trailing bytes after raster"));
    }
    let mut tensor = Tensor::zeros(3, height, width);
    for y in 0..height {
        for x in 0..width {
            let base = (y * width + x) * 3;
            for c in 0..3 {
                tensor.set(c, y, x, raster[base + c] as f32 / maxval as f32);
            }
        }
    }
    Ok(tensor)
}

/// Write a 3-channel tensor as binary P6, values clamped to [0, 1] and
/// quantized to maxval 255.
pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::config("P6 output needs exactly 3 channels"));
    }
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (image.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                out.push(v);
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write a grayscale map as binary P5, maxval 255.
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::config("P5 pixel count mismatch"));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = Tensor::from_fn(3, 4, 5, |c, y, x| ((c + 2 * y + 3 * x) % 7) as f32 / 6.0);
        let dir = std::env::temp_dir().join("adpc_netpbm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ppm");
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), (3, 4, 5));
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn parser_accepts_comments() {
        let mut bytes = b"P6 # comment\n# another\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 0, 0, 255, 255, 255]);
        let t = parse_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), (3, 1, 2));
        assert_eq!(t.at(0, 0, 1), 1.0);
    }

    #[test]
    fn parser_rejects_malformed() {
        assert!(parse_ppm(b"P5 1 1 255 \x00").is_err()); // wrong magic
        assert!(parse_ppm(b"P6 0 1 255 ").is_err()); // zero dim
        assert!(parse_ppm(b"P6 1 1 65535 \x00\x00").is_err()); // wide maxval
        let mut truncated = b"P6 2 2 255\n".to_vec();
        truncated.extend_from_slice(&[0; 5]);
        assert!(parse_ppm(&truncated).is_err());
        let mut trailing = b"P6 1 1 255\n".to_vec();
        trailing.extend_from_slice(&[0, 0, 0, 99]);
        assert!(parse_ppm(&trailing).is_err());
    }
}
