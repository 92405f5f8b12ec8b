//! Square 10-HPF candidate patches laid on a grid over each tissue blob.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tissue::{BinaryMask, TissueBlob};

/// Area of ten consecutive high-power fields.
pub const HPF10_AREA_MM2: f64 = 2.0;

/// Side in level-0 pixels of a square patch covering `area_mm2`.
pub fn hpf_patch_side(mpp: f64, area_mm2: f64) -> Result<usize> {
    if !(mpp > 0.0 && mpp.is_finite()) {
        return Err(Error::invalid(format!("mpp must be positive, got {mpp}")));
    }
    if !(area_mm2 >= 0.0 && area_mm2.is_finite()) {
        return Err(Error::invalid(format!("patch area must be non-negative, got {area_mm2}")));
    }
    let side = ((area_mm2 * 1e6).sqrt() / mpp).round();
    if side < 1.0 {
        return Err(Error::invalid(format!("patch side rounds to {side} px")));
    }
    Ok(side as usize)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchRef {
    pub slide: String,
    pub index: usize,
    /// Level-0 center.
    pub cx: i64,
    pub cy: i64,
    pub side: usize,
}

impl PatchRef {
    /// Top-left corner of the patch square at level 0.
    pub fn origin(&self) -> (i64, i64) {
        (self.cx - (self.side / 2) as i64, self.cy - (self.side / 2) as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchParams {
    pub area_mm2: f64,
    /// Grid spacing as a fraction of the patch side.
    pub stride_fraction: f64,
    pub min_tissue_fraction: f64,
}

impl Default for PatchParams {
    fn default() -> Self {
        Self {
            area_mm2: HPF10_AREA_MM2,
            stride_fraction: 0.5,
            min_tissue_fraction: 0.25,
        }
    }
}

impl PatchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.stride_fraction > 0.0 && self.stride_fraction.is_finite()) {
            return Err(Error::invalid("stride_fraction must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_tissue_fraction) {
            return Err(Error::invalid("min_tissue_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn stride(&self, side: usize) -> usize {
        ((side as f64 * self.stride_fraction).round() as usize).max(1)
    }
}

/// Summed-area table over the mask.
struct Integral {
    w: usize,
    sums: Vec<u32>,
}

impl Integral {
    fn new(mask: &BinaryMask) -> Self {
        let (w, h) = (mask.width(), mask.height());
        let mut sums = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += mask.bitmap.get(x, y) as u32;
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, sums }
    }

    /// Set pixels in `[x0, x1) × [y0, y1)`.
    fn sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> u32 {
        let s = |x: usize, y: usize| self.sums[y * (self.w + 1) + x];
        s(x1, y1) + s(x0, y0) - s(x0, y1) - s(x1, y0)
    }
}

/// Fraction of mask pixels, among those whose centers fall inside the
/// level-0 square, that are tissue.
fn coverage(integral: &Integral, mask: &BinaryMask, x0: i64, y0: i64, side: usize) -> f64 {
    let ds = mask.downsample;
    // Mask pixel m has center (m + 0.5) * ds; keep m with x0 <= center < x0 + side.
    let lo = |a: i64| ((a as f64 / ds - 0.5).ceil().max(0.0) as usize).min(mask.width().max(mask.height()));
    let mx0 = lo(x0).min(mask.width());
    let my0 = lo(y0).min(mask.height());
    let mx1 = lo(x0 + side as i64).min(mask.width());
    let my1 = lo(y0 + side as i64).min(mask.height());
    if mx1 <= mx0 || my1 <= my0 {
        return 0.0;
    }
    let n = (mx1 - mx0) * (my1 - my0);
    integral.sum(mx0, my0, mx1, my1) as f64 / n as f64
}

/// Grid of patch centers over every blob's bounding box.
///
/// Each blob gets its own lattice anchored so that the first square starts at
/// the blob's left/top edge; every lattice square that intersects the box is a
/// candidate. Candidates leaving the slide or covering less than
/// `min_tissue_fraction` tissue are dropped. Order is blob by blob (blobs as
/// given), row-major within a blob, skipping centers already emitted.
pub fn sample_patch_centers(
    slide_id: &str,
    mask: &BinaryMask,
    blobs: &[TissueBlob],
    slide_size: (usize, usize),
    side: usize,
    stride: usize,
    min_tissue_fraction: f64,
) -> Result<Vec<PatchRef>> {
    if stride == 0 || side == 0 {
        return Err(Error::invalid("patch side and stride must be positive"));
    }
    let integral = Integral::new(mask);
    let ds = mask.downsample;
    let half = (side / 2) as i64;
    let (sw, sh) = (slide_size.0 as i64, slide_size.1 as i64);
    let s = stride as i64;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for blob in blobs {
        let bx0 = (blob.bbox[0] as f64 * ds).floor() as i64;
        let by0 = (blob.bbox[1] as f64 * ds).floor() as i64;
        let bx1 = ((blob.bbox[2] + 1) as f64 * ds).ceil() as i64;
        let by1 = ((blob.bbox[3] + 1) as f64 * ds).ceil() as i64;
        // Squares [bx0 + k s, bx0 + k s + side) that intersect [bx0, bx1).
        let k_min = -((side as i64 - 1) / s);
        let kx_max = (bx1 - bx0 - 1).div_euclid(s);
        let ky_max = (by1 - by0 - 1).div_euclid(s);
        for ky in k_min..=ky_max {
            let y0 = by0 + ky * s;
            if y0 < 0 || y0 + side as i64 > sh {
                continue;
            }
            for kx in k_min..=kx_max {
                let x0 = bx0 + kx * s;
                if x0 < 0 || x0 + side as i64 > sw {
                    continue;
                }
                let (cx, cy) = (x0 + half, y0 + half);
                if seen.contains(&(cx, cy)) {
                    continue;
                }
                if coverage(&integral, mask, x0, y0, side) >= min_tissue_fraction {
                    seen.insert((cx, cy));
                    out.push(PatchRef {
                        slide: slide_id.to_string(),
                        index: out.len(),
                        cx,
                        cy,
                        side,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn to_jsonl(patches: &[PatchRef]) -> String {
    let mut s = String::new();
    for p in patches {
        s.push_str(&serde_json::to_string(p).expect("patch serializes"));
        s.push('\n');
    }
    s
}

/// Parses one patch per non-empty line.
pub fn parse_jsonl(text: &str) -> Result<Vec<PatchRef>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PatchRef =
            serde_json::from_str(line).map_err(|e| Error::format("patch list", format!("line {}: {e}", n + 1)))?;
        if p.side == 0 {
            return Err(Error::format("patch list", format!("line {}: zero side", n + 1)));
        }
        out.push(p);
    }
    Ok(out)
}
