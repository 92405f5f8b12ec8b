//! Mitosis detection with valid-region sliding inference.
//!
//! A detector maps an RGB patch to a [`ScoreMap`]: one probability per grid
//! cell, where cell `(i, j)` stands for the `train_input`-sized window centered
//! at `(ox + j * stride, oy + i * stride)`. Only windows lying entirely inside
//! the patch are valid; their central `valid_center` square is the region the
//! score speaks for.

mod dataset;
mod plugin;
mod reference;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pixmap::Pixmap;

pub use dataset::{
    build_stage1_dataset, build_stage2_dataset, crop_window, mine_false_positives, AnnotatedPatch, FalsePositive,
    Provenance, Sample, TrainingDataset,
};
pub use plugin::SubprocessDetector;
pub use reference::{
    fit_logistic, hematoxylin_od, train_reference_learner, window_features, LearnerParams, LogisticDetector,
    LogisticModel, FEATURE_NAMES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorGeometry {
    pub train_input: usize,
    pub valid_center: usize,
    pub stride: usize,
    pub receptive_field: usize,
}

impl Default for DetectorGeometry {
    fn default() -> Self {
        Self {
            train_input: 128,
            valid_center: 64,
            stride: 64,
            receptive_field: 128,
        }
    }
}

impl DetectorGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.train_input == 0 || self.valid_center == 0 || self.stride == 0 {
            return Err(Error::invalid("detector geometry sizes must be positive"));
        }
        if self.valid_center > self.train_input {
            return Err(Error::invalid("valid_center exceeds train_input"));
        }
        if self.receptive_field < self.stride {
            return Err(Error::invalid("receptive field smaller than stride"));
        }
        Ok(())
    }

    /// Offset of the first window center from the patch origin.
    pub fn origin(&self) -> usize {
        self.train_input / 2
    }
}

/// Cell layout of a score map, before any scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidGrid {
    pub ox: usize,
    pub oy: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    pub valid: Vec<bool>,
}

impl ValidGrid {
    pub fn center(&self, i: usize, j: usize) -> (usize, usize) {
        (self.ox + j * self.stride, self.oy + i * self.stride)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Number of valid cells along each axis.
    pub fn valid_extent(&self) -> (usize, usize) {
        let rows = (0..self.rows).filter(|&i| (0..self.cols).any(|j| self.valid[i * self.cols + j])).count();
        let cols = (0..self.cols).filter(|&j| (0..self.rows).any(|i| self.valid[i * self.cols + j])).count();
        (rows, cols)
    }
}

fn axis_cells(len: usize, origin: usize, stride: usize, half: usize) -> (usize, usize) {
    let total = if len > origin { (len - origin - 1) / stride + 1 } else { 0 };
    let valid = if len >= 2 * half { (len - 2 * half) / stride + 1 } else { 0 };
    (total, valid.min(total))
}

/// Grid of window centers strictly inside the patch; a cell is valid iff its
/// `train_input` window fits entirely inside the patch.
pub fn lview_valid_mask(geometry: &DetectorGeometry, width: usize, height: usize) -> ValidGrid {
    let o = geometry.origin();
    let half = geometry.train_input / 2;
    let (cols, vcols) = axis_cells(width, o, geometry.stride, half);
    let (rows, vrows) = axis_cells(height, o, geometry.stride, half);
    let mut valid = vec![false; rows * cols];
    for i in 0..vrows {
        for j in 0..vcols {
            valid[i * cols + j] = true;
        }
    }
    ValidGrid {
        ox: o,
        oy: o,
        stride: geometry.stride,
        rows,
        cols,
        valid,
    }
}

/// Detector output; serialized as `{ox, oy, stride, rows, cols, probs, valid}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreMap {
    pub ox: usize,
    pub oy: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major probabilities.
    pub probs: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ScoreMap {
    pub fn from_grid(grid: ValidGrid, probs: Vec<f64>) -> Self {
        Self {
            ox: grid.ox,
            oy: grid.oy,
            stride: grid.stride,
            rows: grid.rows,
            cols: grid.cols,
            probs,
            valid: grid.valid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self
            .rows
            .checked_mul(self.cols)
            .ok_or_else(|| Error::format("score map", "grid size overflows"))?;
        if self.probs.len() != n || self.valid.len() != n {
            return Err(Error::format(
                "score map",
                format!("expected {n} cells, got {} probs and {} flags", self.probs.len(), self.valid.len()),
            ));
        }
        if self.stride == 0 && n > 1 {
            return Err(Error::format("score map", "zero stride"));
        }
        if let Some(p) = self.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::format("score map", format!("probability {p} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let map: Self = serde_json::from_str(text).map_err(|e| Error::format("score map", e.to_string()))?;
        map.validate()?;
        Ok(map)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("score map serializes")
    }

    pub fn center(&self, i: usize, j: usize) -> (usize, usize) {
        (self.ox + j * self.stride, self.oy + i * self.stride)
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.probs[i * self.cols + j]
    }

    /// Checks that every valid cell's window lies inside a `width`×`height` patch.
    pub fn check_against(&self, geometry: &DetectorGeometry, width: usize, height: usize) -> Result<()> {
        let half = geometry.train_input / 2;
        for i in 0..self.rows {
            for j in 0..self.cols {
                if !self.valid[i * self.cols + j] {
                    continue;
                }
                let (x, y) = self.center(i, j);
                if x < half || y < half || x + half > width || y + half > height {
                    return Err(Error::format("score map", format!("valid cell ({i}, {j}) leaves the patch")));
                }
            }
        }
        Ok(())
    }
}

/// Pluggable scorer. Implementations must be deterministic and usable from
/// several threads at once.
pub trait Detector: Send + Sync {
    fn geometry(&self) -> DetectorGeometry;
    fn score_map(&self, patch: &Pixmap) -> Result<ScoreMap>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub p: f64,
}

/// One line of a detections file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub patch_index: usize,
    pub x: f64,
    pub y: f64,
    pub p: f64,
}

pub fn detections_to_jsonl(records: &[DetectionRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("detection serializes"));
        s.push('\n');
    }
    s
}

pub fn parse_detections_jsonl(text: &str) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: DetectionRecord =
            serde_json::from_str(line).map_err(|e| Error::format("detections", format!("line {}: {e}", n + 1)))?;
        if !(0.0..=1.0).contains(&r.p) || !r.x.is_finite() || !r.y.is_finite() {
            return Err(Error::format("detections", format!("line {}: value out of range", n + 1)));
        }
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectParams {
    pub threshold: f64,
    pub nms_radius: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            nms_radius: 16.0,
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!("detection threshold {} not in (0, 1)", self.threshold)));
        }
        if !(self.nms_radius >= 0.0 && self.nms_radius.is_finite()) {
            return Err(Error::invalid("nms_radius must be non-negative"));
        }
        Ok(())
    }
}

/// Greedy non-maximum suppression over the valid cells scoring at least
/// `threshold`: take the best remaining cell (ties by smaller y, then x),
/// drop every candidate within `nms_radius` of it, repeat.
pub fn detect_mitoses(map: &ScoreMap, params: &DetectParams) -> Result<Vec<Detection>> {
    params.validate()?;
    map.validate()?;
    let mut cands: Vec<Detection> = Vec::new();
    for i in 0..map.rows {
        for j in 0..map.cols {
            let k = i * map.cols + j;
            if map.valid[k] && map.probs[k] >= params.threshold {
                let (x, y) = map.center(i, j);
                cands.push(Detection {
                    x: x as f64,
                    y: y as f64,
                    p: map.probs[k],
                });
            }
        }
    }
    cands.sort_by(|a, b| b.p.total_cmp(&a.p).then(a.y.total_cmp(&b.y)).then(a.x.total_cmp(&b.x)));
    let r2 = params.nms_radius * params.nms_radius;
    let mut suppressed = vec![false; cands.len()];
    let mut out = Vec::new();
    for a in 0..cands.len() {
        if suppressed[a] {
            continue;
        }
        let d = cands[a];
        out.push(d);
        for b in a + 1..cands.len() {
            let (dx, dy) = (cands[b].x - d.x, cands[b].y - d.y);
            if dx * dx + dy * dy <= r2 {
                suppressed[b] = true;
            }
        }
    }
    Ok(out)
}
