//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use super::{LabelMap, RgbImage};
use crate::error::{Error, Result};

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = header("P6", img.width, img.height);
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm(map: &LabelMap) -> Vec<u8> {
    let mut out = header("P5", map.width, map.height);
    out.extend_from_slice(&map.data);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad {what} in header")))
    }
}

/// Parses the header and returns `(width, height, payload)`.
fn decode<'a>(bytes: &'a [u8], magic: &[u8; 2], channels: usize) -> Result<(usize, usize, &'a [u8])> {
    if bytes.get(..2) != Some(&magic[..]) {
        return Err(Error::Format(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval}, only 255 is supported")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("empty {width}×{height} image")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("missing whitespace after maxval".into()));
    }
    let payload = &bytes[cur.pos + 1..];
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Format("extents overflow".into()))?;
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "truncated payload: {} of {expected} bytes",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    Ok((width, height, payload))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (w, h, payload) = decode(bytes, b"P6", 3)?;
    RgbImage::new(w, h, payload.to_vec())
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let (w, h, payload) = decode(bytes, b"P5", 1)?;
    LabelMap::new(w, h, payload.to_vec())
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    Ok(fs::write(path, encode_ppm(img))?)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, map: &LabelMap) -> Result<()> {
    Ok(fs::write(path, encode_pgm(map))?)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_pgm(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_pixel_ppm_bytes() {
        let img = RgbImage::new(2, 1, vec![255, 0, 0, 0, 0, 255]).unwrap();
        let bytes = encode_ppm(&img);
        assert_eq!(&bytes[..], b"P6\n2 1\n255\n\xff\x00\x00\x00\x00\xff");
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn mask_round_trip() {
        let map = LabelMap::new(3, 2, vec![0, 1, 2, 2, 1, 0]).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&map)).unwrap(), map);
    }

    #[test]
    fn header_comments() {
        let bytes = b"P5 # a comment\n2 # more\n1\n255\n\x07\x09";
        assert_eq!(decode_pgm(bytes).unwrap().data, vec![7, 9]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode_pgm(b"P6\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode_pgm(b"P5\nx 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n255").is_err());
        assert!(decode_ppm(b"").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("netpbm-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let img = RgbImage::new(2, 2, (0..12).collect()).unwrap();
        write_ppm(dir.join("a.ppm"), &img).unwrap();
        assert_eq!(read_ppm(dir.join("a.ppm")).unwrap(), img);
        fs::remove_dir_all(&dir).unwrap();
    }
}
