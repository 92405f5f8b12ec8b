//! Nucleus counting and top-K ROI selection.
//!
//! Nuclei are found on the hematoxylin concentration plane: Otsu threshold
//! (with an absolute floor), opening, 8-connected components filtered by
//! area. Components too large for one nucleus are split by counting
//! well-separated maxima of their distance transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morph::{self, Bitmap};
use crate::patches::PatchRef;
use crate::pixmap::Pixmap;
use crate::stain::{self, MacenkoParams, StainMatrix};
use crate::tissue::otsu_threshold;

/// Hematoxylin concentrations are binned over `[0, H_RANGE]` for Otsu.
const H_RANGE: f64 = 2.0;

/// Resolution at which the default area limits are expressed.
const REFERENCE_MPP: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellCountParams {
    /// Smallest nucleus area in px² at 0.25 µm/px.
    pub min_area: f64,
    /// Largest single-nucleus area in px² at 0.25 µm/px.
    pub max_area: f64,
    pub opening_radius: usize,
    /// Nominal nucleus radius; minimum separation of split maxima.
    pub cell_radius_um: f64,
    /// Hematoxylin concentration below which a pixel is never nuclear.
    pub min_h: f64,
}

impl Default for CellCountParams {
    fn default() -> Self {
        Self {
            min_area: 40.0,
            max_area: 2000.0,
            opening_radius: 1,
            cell_radius_um: 3.5,
            min_h: 0.25,
        }
    }
}

impl CellCountParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_area >= 0.0 && self.max_area >= self.min_area && self.max_area.is_finite()) {
            return Err(Error::invalid("cell area limits must satisfy 0 <= min_area <= max_area"));
        }
        if !(self.cell_radius_um > 0.0 && self.cell_radius_um.is_finite()) {
            return Err(Error::invalid("cell_radius_um must be positive"));
        }
        if !self.min_h.is_finite() {
            return Err(Error::invalid("min_h must be finite"));
        }
        Ok(())
    }

    /// Area limits in px² at the given resolution.
    pub fn area_limits(&self, mpp: f64) -> (f64, f64) {
        let k = (REFERENCE_MPP / mpp).powi(2);
        (self.min_area * k, self.max_area * k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCountResult {
    pub patch_index: usize,
    pub count: usize,
    /// Patch-local nucleus positions (pixel `i` spans `[i, i + 1)`).
    pub centroids: Vec<[f64; 2]>,
}

/// Hematoxylin concentration of every pixel, using the patch's own Macenko
/// basis or the default H&E basis when estimation fails.
pub fn hematoxylin_plane(patch: &Pixmap, macenko: &MacenkoParams) -> Result<Vec<f64>> {
    let od = stain::rgb_to_od(patch, macenko.i0)?;
    let matrix = stain::estimate_stain_matrix(&od, macenko.alpha, macenko.beta).unwrap_or_else(|_| StainMatrix::default_he());
    Ok(stain::compute_concentrations(&od, &matrix).into_iter().map(|c| c[0]).collect())
}

fn quantize(h: f64) -> u8 {
    (h / H_RANGE * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Foreground mask of the hematoxylin plane.
fn nuclear_mask(h: &[f64], width: usize, height: usize, min_h: f64) -> Bitmap {
    let mut hist = [0u64; 256];
    for &v in h {
        hist[quantize(v) as usize] += 1;
    }
    let t = match otsu_threshold(&hist) {
        Ok(t) => t,
        Err(_) => return Bitmap::new(width, height),
    };
    Bitmap {
        width,
        height,
        bits: h.iter().map(|&v| quantize(v) >= t && v >= min_h).collect(),
    }
}

/// Distance-transform maxima of one component, at least `min_sep` apart,
/// strongest first.
fn split_component(labels: &[u32], label: u32, dist: &[f64], width: usize, bbox: (usize, usize, usize, usize), min_sep: f64) -> Vec<[f64; 2]> {
    let (x0, y0, x1, y1) = bbox;
    let mut peaks = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let i = y * width + x;
            if labels[i] != label {
                continue;
            }
            let d = dist[i];
            let mut is_max = true;
            'nb: for ny in y.saturating_sub(1)..=(y + 1).min(y1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(x1) {
                    if dist[ny * width + nx] > d {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push((d, i));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<[f64; 2]> = Vec::new();
    for (_, i) in peaks {
        let p = [(i % width) as f64 + 0.5, (i / width) as f64 + 0.5];
        if kept.iter().all(|q| (q[0] - p[0]).hypot(q[1] - p[1]) >= min_sep) {
            kept.push(p);
        }
    }
    kept
}

/// Counts nuclei in an RGB patch imaged at `mpp` µm/px.
pub fn count_cells(
    patch: &Pixmap,
    patch_index: usize,
    mpp: f64,
    params: &CellCountParams,
    macenko: &MacenkoParams,
) -> Result<CellCountResult> {
    params.validate()?;
    if !(mpp > 0.0 && mpp.is_finite()) {
        return Err(Error::invalid("mpp must be positive"));
    }
    let (w, h) = (patch.width(), patch.height());
    let hplane = hematoxylin_plane(patch, macenko)?;
    let mask = morph::open(&nuclear_mask(&hplane, w, h, params.min_h), params.opening_radius);
    let (labels, comps) = morph::label_components(&mask);
    let (min_area, max_area) = params.area_limits(mpp);
    let min_sep = params.cell_radius_um / mpp;
    let mut dist: Option<Vec<f64>> = None;
    let mut centroids = Vec::new();
    for c in &comps {
        let area = c.area as f64;
        if area < min_area {
            continue;
        }
        if area <= max_area {
            centroids.push([c.centroid.0 + 0.5, c.centroid.1 + 0.5]);
            continue;
        }
        let dist = dist.get_or_insert_with(|| morph::distance_transform(&mask));
        centroids.extend(split_component(&labels, c.label as u32, dist, w, c.bbox, min_sep));
    }
    Ok(CellCountResult {
        patch_index,
        count: centroids.len(),
        centroids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiEntry {
    pub index: usize,
    pub cx: i64,
    pub cy: i64,
    pub side: usize,
    pub cells: usize,
    /// Filled once detection has run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mitoses: Option<usize>,
}

impl RoiEntry {
    pub fn patch(&self, slide: &str) -> PatchRef {
        PatchRef {
            slide: slide.to_string(),
            index: self.index,
            cx: self.cx,
            cy: self.cy,
            side: self.side,
        }
    }
}

/// Patches ordered by nucleus count; rank `r` (1-based) is `rois[r - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SortedRoiList {
    pub slide: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub rois: Vec<RoiEntry>,
}

impl SortedRoiList {
    pub fn parse(text: &str) -> Result<Self> {
        let list: Self = serde_json::from_str(text).map_err(|e| Error::format("roi list", e.to_string()))?;
        if list.rois.len() > list.k {
            return Err(Error::format("roi list", format!("{} entries exceed K = {}", list.rois.len(), list.k)));
        }
        if list.rois.windows(2).any(|w| w[0].cells < w[1].cells) {
            return Err(Error::format("roi list", "entries not sorted by cell count"));
        }
        if list.rois.iter().any(|r| r.side == 0) {
            return Err(Error::format("roi list", "zero patch side"));
        }
        Ok(list)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("roi list serializes")
    }
}

/// Top `k` patches by cell count, ties broken by ascending patch index.
pub fn rank_rois(slide: &str, counted: &[(PatchRef, usize)], k: usize) -> Result<SortedRoiList> {
    if counted.is_empty() {
        return Err(Error::Degenerate("no patches to rank".into()));
    }
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let mut order: Vec<&(PatchRef, usize)> = counted.iter().collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.index.cmp(&b.0.index)));
    let rois = order
        .into_iter()
        .take(k)
        .map(|(p, cells)| RoiEntry {
            index: p.index,
            cx: p.cx,
            cy: p.cy,
            side: p.side,
            cells: *cells,
            mitoses: None,
        })
        .collect();
    Ok(SortedRoiList {
        slide: slide.to_string(),
        k,
        rois,
    })
}
