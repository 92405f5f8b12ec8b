//! Binary portable any-map codec (P5 graymap, P6 pixmap, maxval 255).
//!
//! Tiles, masks and detector plug-in payloads all travel in this format so
//! that every consumer can read them without an image codec.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pixmap::Pixmap;

/// Largest accepted width × height; guards allocations on hostile headers.
pub const MAX_PIXELS: usize = 1 << 30;

/// Header fields of a binary PNM stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PnmHeader {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Byte offset of the first raster byte.
    pub data_offset: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format("PNM header", format!("expected {field}")));
        }
        if self.pos - start > 10 {
            return Err(Error::format("PNM header", format!("{field} too large")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse()
            .map_err(|_| Error::format("PNM header", format!("bad {field}")))
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<PnmHeader> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::format("PNM header", "missing magic"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        other => {
            return Err(Error::format(
                "PNM header",
                format!("unsupported magic P{}", other as char),
            ))
        }
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format("PNM header", format!("maxval {maxval} != 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format("PNM header", "zero dimension"));
    }
    if width.saturating_mul(height) > MAX_PIXELS {
        return Err(Error::format("PNM header", "image too large"));
    }
    // Exactly one whitespace byte separates maxval from the raster.
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::format("PNM header", "missing raster separator")),
    }
    Ok(PnmHeader {
        width,
        height,
        channels,
        data_offset: cur.pos,
    })
}

pub fn decode(bytes: &[u8]) -> Result<Pixmap> {
    let h = parse_header(bytes)?;
    let n = h.width * h.height * h.channels;
    let raster = &bytes[h.data_offset..];
    if raster.len() < n {
        return Err(Error::format(
            "PNM raster",
            format!("truncated: {} of {n} bytes", raster.len()),
        ));
    }
    if raster.len() > n {
        return Err(Error::format("PNM raster", "trailing bytes"));
    }
    Pixmap::from_raw(h.width, h.height, h.channels, raster.to_vec())
}

pub fn encode(pixmap: &Pixmap) -> Vec<u8> {
    let magic = if pixmap.is_rgb() { "P6" } else { "P5" };
    let header = format!("{magic}\n{} {}\n255\n", pixmap.width(), pixmap.height());
    let mut out = Vec::with_capacity(header.len() + pixmap.data().len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(pixmap.data());
    out
}

pub fn read(path: &Path) -> Result<Pixmap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads only as much of the file as needed to parse its header.
pub fn read_header(path: &Path) -> Result<PnmHeader> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = vec![0u8; 256];
    let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
    buf.truncate(n);
    parse_header(&buf)
}

pub fn write(path: &Path, pixmap: &Pixmap) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(pixmap)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_with_comments() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let p = decode(&bytes).unwrap();
        assert_eq!((p.width(), p.height(), p.channels()), (2, 1, 3));
        assert_eq!(p.pixel(1, 0), &[4, 5, 6]);
    }

    #[test]
    fn rejects_bad_streams() {
        assert!(decode(b"P3\n1 1\n255\n").is_err());
        assert!(decode(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(decode(b"P5\n1 1\n255\n\0\0").is_err());
        assert!(decode(b"P5\n0 1\n255\n").is_err());
        assert!(decode(b"P5\n99999999999 1\n255\n").is_err());
        assert!(decode(b"P5\n1 1\n255").is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(w in 1usize..20, h in 1usize..20, rgb in any::<bool>(), seed in any::<u64>()) {
            let c = if rgb { 3 } else { 1 };
            let data: Vec<u8> = (0..w * h * c).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
            let p = Pixmap::from_raw(w, h, c, data).unwrap();
            prop_assert_eq!(decode(&encode(&p)).unwrap(), p);
        }
    }
}
