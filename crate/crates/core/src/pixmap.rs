//! 8-bit raster container shared by every stage.

use crate::error::{Error, Result};

/// Row-major 8-bit image with one (gray) or three (RGB) channels.
#[derive(Clone, PartialEq, Eq)]
pub struct Pixmap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Pixmap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pixmap")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl Pixmap {
    pub fn from_raw(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::invalid("pixmap dimensions overflow"))?;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled_rgb(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn filled_gray(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels: 1,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_rgb(&self) -> bool {
        self.channels == 3
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn rgb_pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        debug_assert!(self.is_rgb());
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub(crate) fn require_rgb(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::invalid(format!(
                "expected an RGB pixmap, got {} channel(s)",
                self.channels
            )));
        }
        Ok(())
    }

    /// Copies a `w`×`h` rectangle whose top-left corner is at `(x, y)`.
    /// Pixels outside the image take `fill` (per channel).
    pub fn crop_padded(&self, x: i64, y: i64, w: usize, h: usize, fill: u8) -> Pixmap {
        let c = self.channels;
        let mut out = vec![fill; w * h * c];
        for row in 0..h {
            let sy = y + row as i64;
            if sy < 0 || sy >= self.height as i64 {
                continue;
            }
            let x0 = x.max(0);
            let x1 = (x + w as i64).min(self.width as i64);
            if x0 >= x1 {
                continue;
            }
            let src = ((sy as usize) * self.width + x0 as usize) * c;
            let dst = (row * w + (x0 - x) as usize) * c;
            let n = (x1 - x0) as usize * c;
            out[dst..dst + n].copy_from_slice(&self.data[src..src + n]);
        }
        Pixmap {
            width: w,
            height: h,
            channels: c,
            data: out,
        }
    }

    /// Pastes `src` with its top-left corner at `(x, y)`; parts falling outside are dropped.
    pub fn blit(&mut self, src: &Pixmap, x: usize, y: usize) {
        assert_eq!(self.channels, src.channels);
        let c = self.channels;
        let w = src.width.min(self.width.saturating_sub(x));
        for row in 0..src.height {
            let dy = y + row;
            if dy >= self.height {
                break;
            }
            let s = row * src.width * c;
            let d = (dy * self.width + x) * c;
            self.data[d..d + w * c].copy_from_slice(&src.data[s..s + w * c]);
        }
    }
}
