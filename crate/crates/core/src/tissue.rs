//! Tissue detection on a slide thumbnail.
//!
//! The thumbnail is converted to luminance, split by Otsu's threshold (tissue
//! is the darker class), dilated with a square structuring element and cut
//! into 8-connected blobs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morph::{self, Bitmap};
use crate::pixmap::Pixmap;
use crate::pnm;
use crate::slide::SlidePyramid;

/// Luminance `round(0.299 R + 0.587 G + 0.114 B)`.
pub fn to_grayscale(rgb: &Pixmap) -> Result<Pixmap> {
    if !rgb.is_rgb() {
        return Err(Error::invalid("grayscale conversion needs an RGB pixmap"));
    }
    let data = rgb
        .data()
        .chunks_exact(3)
        .map(|p| ((299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500) / 1000) as u8)
        .collect();
    Pixmap::from_raw(rgb.width(), rgb.height(), 1, data)
}

pub fn histogram(gray: &Pixmap) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in gray.data() {
        h[v as usize] += 1;
    }
    h
}

/// Otsu's threshold. Values `< t` form the lower (tissue) class; the returned
/// `t` maximizes the between-class variance, smallest `t` on ties.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8> {
    let total: u64 = hist.iter().sum();
    let nonzero = hist.iter().filter(|&&c| c > 0).count();
    if total == 0 || nonzero < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let sum_all: u128 = hist.iter().enumerate().map(|(v, &c)| v as u128 * c as u128).sum();
    let (mut n0, mut s0) = (0u128, 0u128);
    let mut best = (f64::NEG_INFINITY, 0u8);
    for t in 1..256usize {
        n0 += hist[t - 1] as u128;
        s0 += (t as u128 - 1) * hist[t - 1] as u128;
        let n1 = total as u128 - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = sum_all - s0;
        // N² σ²_between = (n0 s1 - n1 s0)² / (n0 n1)
        let d = (n0 * s1) as i128 - (n1 * s0) as i128;
        let d = d as f64;
        let var = d * d / (n0 as f64 * n1 as f64);
        if var > best.0 {
            best = (var, t as u8);
        }
    }
    Ok(best.1)
}

/// Dilation by a square of side `2r + 1`.
pub fn binary_dilate(mask: &Bitmap, r: usize) -> Bitmap {
    morph::dilate(mask, r)
}

/// Tissue mask on a thumbnail plus its mapping to level 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub bitmap: Bitmap,
    /// Pyramid level the thumbnail was read from.
    pub level: usize,
    /// Level-0 pixels per mask pixel along each axis.
    pub downsample: f64,
}

impl BinaryMask {
    pub fn width(&self) -> usize {
        self.bitmap.width
    }

    pub fn height(&self) -> usize {
        self.bitmap.height
    }

    /// Mask value at a level-0 position; false outside the mask.
    pub fn contains_level0(&self, x: f64, y: f64) -> bool {
        let mx = (x / self.downsample).floor();
        let my = (y / self.downsample).floor();
        mx >= 0.0
            && my >= 0.0
            && (mx as usize) < self.width()
            && (my as usize) < self.height()
            && self.bitmap.get(mx as usize, my as usize)
    }

    pub fn to_pixmap(&self) -> Pixmap {
        let data = self.bitmap.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        Pixmap::from_raw(self.width(), self.height(), 1, data).expect("mask size")
    }

    /// Writes the mask as a 0/255 graymap.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        pnm::write(path, &self.to_pixmap())
    }

    pub fn read_pgm(path: &Path, level: usize, downsample: f64) -> Result<Self> {
        let pm = pnm::read(path)?;
        if pm.channels() != 1 {
            return Err(Error::format("tissue mask", "expected a graymap"));
        }
        let bits = pm.data().iter().map(|&v| v >= 128).collect();
        Ok(Self {
            bitmap: Bitmap {
                width: pm.width(),
                height: pm.height(),
                bits,
            },
            level,
            downsample,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueBlob {
    /// 1-based, in order of decreasing area.
    pub label: usize,
    /// Area in mask pixels.
    pub area: usize,
    /// Inclusive mask-pixel bounding box `[x0, y0, x1, y1]`.
    pub bbox: [usize; 4],
    pub area_mm2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TissueParams {
    pub thumb_max_side: usize,
    pub dilation_radius: usize,
    pub min_blob_area_mm2: f64,
}

impl Default for TissueParams {
    fn default() -> Self {
        Self {
            thumb_max_side: 2048,
            dilation_radius: 2,
            min_blob_area_mm2: 0.05,
        }
    }
}

impl TissueParams {
    pub fn validate(&self) -> Result<()> {
        if self.thumb_max_side == 0 {
            return Err(Error::invalid("thumb_max_side must be positive"));
        }
        if !(self.min_blob_area_mm2 >= 0.0 && self.min_blob_area_mm2.is_finite()) {
            return Err(Error::invalid("min_blob_area_mm2 must be non-negative"));
        }
        Ok(())
    }
}

/// Box-averages by an integer factor; edge blocks average what is available.
pub fn area_downsample(src: &Pixmap, factor: usize) -> Pixmap {
    if factor <= 1 {
        return src.clone();
    }
    let c = src.channels();
    let w = src.width().div_ceil(factor);
    let h = src.height().div_ceil(factor);
    let mut data = Vec::with_capacity(w * h * c);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0u64; 3];
            let mut n = 0u64;
            for sy in y * factor..((y + 1) * factor).min(src.height()) {
                for sx in x * factor..((x + 1) * factor).min(src.width()) {
                    for (k, v) in src.pixel(sx, sy).iter().enumerate() {
                        acc[k] += *v as u64;
                    }
                    n += 1;
                }
            }
            for a in acc.iter().take(c) {
                data.push(((a + n / 2) / n) as u8);
            }
        }
    }
    Pixmap::from_raw(w, h, c, data).expect("downsampled size")
}

/// Picks the finest level whose larger side fits `max_side`; failing that,
/// area-averages the coarsest level down to fit. Returns the thumbnail, its
/// level and its level-0 downsample factor.
pub fn thumbnail(slide: &SlidePyramid, max_side: usize) -> Result<(Pixmap, usize, f64)> {
    let fits = slide.levels.iter().position(|l| l.width.max(l.height) <= max_side);
    match fits {
        Some(level) => Ok((slide.read_level(level)?, level, slide.levels[level].downsample)),
        None => {
            let level = slide.levels.len() - 1;
            let info = slide.levels[level];
            let factor = info.width.max(info.height).div_ceil(max_side);
            let pm = area_downsample(&slide.read_level(level)?, factor);
            Ok((pm, level, info.downsample * factor as f64))
        }
    }
}

/// Segments tissue from a thumbnail already in memory.
pub fn segment_thumbnail(
    thumb: &Pixmap,
    level: usize,
    downsample: f64,
    mpp: f64,
    params: &TissueParams,
) -> Result<(BinaryMask, Vec<TissueBlob>)> {
    params.validate()?;
    let gray = to_grayscale(thumb)?;
    let t = otsu_threshold(&histogram(&gray))?;
    let raw = Bitmap {
        width: gray.width(),
        height: gray.height(),
        bits: gray.data().iter().map(|&v| v < t).collect(),
    };
    let dilated = binary_dilate(&raw, params.dilation_radius);
    let (labels, comps) = morph::label_components(&dilated);
    let mm2_per_px = (mpp * downsample * 1e-3).powi(2);
    let mut kept: Vec<_> = comps
        .iter()
        .filter(|c| c.area as f64 * mm2_per_px >= params.min_blob_area_mm2)
        .collect();
    kept.sort_by(|a, b| b.area.cmp(&a.area).then(a.label.cmp(&b.label)));
    let mut keep_label = vec![false; comps.len() + 1];
    for c in &kept {
        keep_label[c.label] = true;
    }
    let bits = labels.iter().map(|&l| l != 0 && keep_label[l as usize]).collect();
    let blobs = kept
        .iter()
        .enumerate()
        .map(|(i, c)| TissueBlob {
            label: i + 1,
            area: c.area,
            bbox: [c.bbox.0, c.bbox.1, c.bbox.2, c.bbox.3],
            area_mm2: c.area as f64 * mm2_per_px,
        })
        .collect();
    let mask = BinaryMask {
        bitmap: Bitmap {
            width: gray.width(),
            height: gray.height(),
            bits,
        },
        level,
        downsample,
    };
    Ok((mask, blobs))
}

pub fn extract_tissue_blobs(slide: &SlidePyramid, params: &TissueParams) -> Result<(BinaryMask, Vec<TissueBlob>)> {
    params.validate()?;
    let (thumb, level, downsample) = thumbnail(slide, params.thumb_max_side)?;
    segment_thumbnail(&thumb, level, downsample, slide.mpp(), params)
}

/// JSON companion of the mask graymap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueDoc {
    pub slide: String,
    pub level: usize,
    pub downsample: f64,
    pub width: usize,
    pub height: usize,
    pub blobs: Vec<TissueBlob>,
}

impl TissueDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text).map_err(|e| Error::format("tissue blobs", e.to_string()))?;
        if !(doc.downsample > 0.0 && doc.downsample.is_finite()) {
            return Err(Error::format("tissue blobs", "downsample must be positive"));
        }
        for b in &doc.blobs {
            if b.area == 0 || b.bbox[2] >= doc.width || b.bbox[3] >= doc.height || b.bbox[0] > b.bbox[2] || b.bbox[1] > b.bbox[3] {
                return Err(Error::format("tissue blobs", format!("blob {} outside the mask", b.label)));
            }
        }
        Ok(doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tissue doc serializes")
    }
}
