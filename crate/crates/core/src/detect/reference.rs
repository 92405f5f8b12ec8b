//! Classical window scorer and its trainable logistic counterpart.
//!
//! Each window is summarized by four numbers computed on the hematoxylin
//! optical-density plane of the fixed default H&E basis:
//!
//! | name          | definition                                                     |
//! |---------------|----------------------------------------------------------------|
//! | `mean_h`      | mean H over the central square                                 |
//! | `p99_h`       | 99th percentile of H over the central square                   |
//! | `blob_size`   | `sqrt(area) / 8` of the largest dark blob centered in the square |
//! | `compactness` | `4 pi A / P^2` of that blob, `P` counted in pixel edges        |
//!
//! Dark blobs are 8-connected components of `H >= dark_threshold` inside the
//! whole window whose centroid falls in the central square. Since every
//! quantity depends only on the window's own pixels, scoring a large patch in
//! one pass is bit-identical to scoring each window separately.

use serde::{Deserialize, Serialize};

use super::{lview_valid_mask, Detector, DetectorGeometry, ScoreMap, TrainingDataset};
use crate::error::{Error, Result};
use crate::linalg;
use crate::morph::{self, Bitmap};
use crate::pixmap::Pixmap;
use crate::stain::{self, StainMatrix};
use crate::stats;

pub const FEATURE_NAMES: [&str; 4] = ["mean_h", "p99_h", "blob_size", "compactness"];
const N_FEATURES: usize = 4;

const DETECTOR_FORMAT: &str = "prolif-detector";
const DETECTOR_VERSION: u32 = 1;

/// Hematoxylin concentration under the default H&E basis, clamped at zero.
pub fn hematoxylin_od(patch: &Pixmap) -> Result<Vec<f64>> {
    let od = stain::rgb_to_od(patch, 255.0)?;
    let [p0, _] = StainMatrix::default_he().pseudo_inverse();
    Ok(od.iter().map(|v| linalg::dot(&p0, v).max(0.0)).collect())
}

/// Features of the window whose top-left corner is `(x0, y0)` in an H plane
/// of width `width`.
pub fn window_features(h: &[f64], width: usize, x0: usize, y0: usize, geometry: &DetectorGeometry, dark_threshold: f64) -> [f64; 4] {
    let t = geometry.train_input;
    let v = geometry.valid_center;
    let m = (t - v) / 2;
    let mut central = Vec::with_capacity(v * v);
    for y in y0 + m..y0 + m + v {
        central.extend_from_slice(&h[y * width + x0 + m..y * width + x0 + m + v]);
    }
    let mean_h = central.iter().sum::<f64>() / central.len() as f64;
    central.sort_by(f64::total_cmp);
    let p99_h = stats::percentile_sorted(&central, 99.0);

    let dark = Bitmap::from_fn(t, t, |x, y| h[(y0 + y) * width + x0 + x] >= dark_threshold);
    let (labels, comps) = morph::label_components(&dark);
    let inside = |c: f64| c + 0.5 >= m as f64 && c + 0.5 < (m + v) as f64;
    let best = comps
        .iter()
        .filter(|c| inside(c.centroid.0) && inside(c.centroid.1))
        .max_by(|a, b| a.area.cmp(&b.area).then(b.label.cmp(&a.label)));
    let (blob_size, compactness) = match best {
        None => (0.0, 0.0),
        Some(c) => {
            let lab = c.label as u32;
            let mut edges = 0usize;
            for y in c.bbox.1..=c.bbox.3 {
                for x in c.bbox.0..=c.bbox.2 {
                    if labels[y * t + x] != lab {
                        continue;
                    }
                    let out = |nx: i64, ny: i64| {
                        nx < 0 || ny < 0 || nx >= t as i64 || ny >= t as i64 || labels[ny as usize * t + nx as usize] != lab
                    };
                    let (xi, yi) = (x as i64, y as i64);
                    edges += [out(xi - 1, yi), out(xi + 1, yi), out(xi, yi - 1), out(xi, yi + 1)]
                        .iter()
                        .filter(|b| **b)
                        .count();
                }
            }
            let a = c.area as f64;
            ((a.sqrt()) / 8.0, 4.0 * std::f64::consts::PI * a / (edges as f64 * edges as f64))
        }
    };
    [mean_h, p99_h, blob_size, compactness]
}

/// Logistic model over standardized inputs: `p = sigmoid(b + w . (x - mean) / std)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticModel {
    pub bias: f64,
    pub weights: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticModel {
    pub fn validate(&self) -> Result<()> {
        let d = self.weights.len();
        if self.mean.len() != d || self.std.len() != d {
            return Err(Error::format("logistic model", "weights, mean and std lengths differ"));
        }
        let all = std::iter::once(self.bias).chain(self.weights.iter().copied()).chain(self.mean.iter().copied());
        if all.into_iter().any(|v| !v.is_finite()) || self.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::format("logistic model", "non-finite parameter or non-positive std"));
        }
        Ok(())
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        let mut z = self.bias;
        for k in 0..self.weights.len() {
            z += self.weights[k] * (x[k] - self.mean[k]) / self.std[k];
        }
        z
    }

    pub fn prob(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerParams {
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
    pub max_epochs: usize,
    pub grad_tol: f64,
}

impl Default for LearnerParams {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_epochs: 10_000,
            grad_tol: 1e-6,
        }
    }
}

/// Mean log-loss plus `l2/2 |w|^2` and its gradient (bias first) on
/// standardized inputs.
pub(crate) fn loss_and_grad(z: &[Vec<f64>], y: &[bool], params: &[f64], l2: f64) -> (f64, Vec<f64>) {
    let n = z.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (x, &label) in z.iter().zip(y) {
        let mut s = params[0];
        for k in 0..x.len() {
            s += params[k + 1] * x[k];
        }
        let p = sigmoid(s);
        let t = if label { 1.0 } else { 0.0 };
        // log(1 + e^s) - t s, computed stably.
        loss += s.max(0.0) + (-s.abs()).exp().ln_1p() - t * s;
        let r = p - t;
        grad[0] += r;
        for k in 0..x.len() {
            grad[k + 1] += r * x[k];
        }
    }
    loss /= n;
    for g in grad.iter_mut() {
        *g /= n;
    }
    for k in 1..params.len() {
        loss += 0.5 * l2 * params[k] * params[k];
        grad[k] += l2 * params[k];
    }
    (loss, grad)
}

fn standardize(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let d = x[0].len();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for k in 0..d {
        let col: Vec<f64> = x.iter().map(|r| r[k]).collect();
        mean[k] = stats::mean(&col);
        let s = stats::std_pop(&col);
        std[k] = if s > 0.0 { s } else { 1.0 };
    }
    let z = x
        .iter()
        .map(|r| (0..d).map(|k| (r[k] - mean[k]) / std[k]).collect())
        .collect();
    (mean, std, z)
}

/// Full-batch gradient descent from zero weights until the gradient norm
/// drops below `grad_tol` or `max_epochs` passes have run.
pub fn fit_logistic(x: &[Vec<f64>], y: &[bool], params: &LearnerParams) -> Result<LogisticModel> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::invalid("logistic fit needs one label per sample"));
    }
    if y.iter().all(|&b| b) || y.iter().all(|&b| !b) {
        return Err(Error::Degenerate("training set has a single class".into()));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("ragged or non-finite training features"));
    }
    let (mean, std, z) = standardize(x);
    // Lipschitz bound of the gradient on standardized inputs.
    let max_sq = z.iter().map(|r| 1.0 + r.iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
    let step = 1.0 / (0.25 * max_sq + params.l2);
    let mut theta = vec![0.0; d + 1];
    for _ in 0..params.max_epochs {
        let (_, g) = loss_and_grad(&z, y, &theta, params.l2);
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() < params.grad_tol {
            break;
        }
        for k in 0..theta.len() {
            theta[k] -= step * g[k];
        }
    }
    Ok(LogisticModel {
        bias: theta[0],
        weights: theta[1..].to_vec(),
        mean,
        std,
    })
}

/// Window-feature detector with logistic scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticDetector {
    pub geometry: DetectorGeometry,
    pub dark_threshold: f64,
    pub model: LogisticModel,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectorDoc {
    format: String,
    version: u32,
    geometry: DetectorGeometry,
    dark_threshold: f64,
    model: LogisticModel,
}

impl LogisticDetector {
    /// The fixed hand-set scorer.
    pub fn reference() -> Self {
        Self {
            geometry: DetectorGeometry::default(),
            dark_threshold: 0.9,
            model: LogisticModel {
                bias: -8.0,
                weights: vec![0.0, 2.0, 6.0, -2.0],
                mean: vec![0.0; N_FEATURES],
                std: vec![1.0; N_FEATURES],
            },
        }
    }

    pub fn features(&self, window: &Pixmap) -> Result<[f64; 4]> {
        let t = self.geometry.train_input;
        if window.width() != t || window.height() != t {
            return Err(Error::invalid(format!("window must be {t}x{t}")));
        }
        let h = hematoxylin_od(window)?;
        Ok(window_features(&h, t, 0, 0, &self.geometry, self.dark_threshold))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc: DetectorDoc = serde_json::from_str(text).map_err(|e| Error::format("detector", e.to_string()))?;
        if doc.format != DETECTOR_FORMAT || doc.version != DETECTOR_VERSION {
            return Err(Error::format("detector", format!("unsupported {} v{}", doc.format, doc.version)));
        }
        doc.geometry.validate().map_err(|e| Error::format("detector", e.to_string()))?;
        doc.model.validate()?;
        if doc.model.weights.len() != N_FEATURES || !doc.dark_threshold.is_finite() {
            return Err(Error::format("detector", "expected four feature weights"));
        }
        if !(doc.geometry.train_input - doc.geometry.valid_center).is_multiple_of(2) {
            return Err(Error::format("detector", "valid_center must be centered in train_input"));
        }
        Ok(Self {
            geometry: doc.geometry,
            dark_threshold: doc.dark_threshold,
            model: doc.model,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&DetectorDoc {
            format: DETECTOR_FORMAT.into(),
            version: DETECTOR_VERSION,
            geometry: self.geometry,
            dark_threshold: self.dark_threshold,
            model: self.model.clone(),
        })
        .expect("detector serializes")
    }
}

impl Detector for LogisticDetector {
    fn geometry(&self) -> DetectorGeometry {
        self.geometry
    }

    fn score_map(&self, patch: &Pixmap) -> Result<ScoreMap> {
        let t = self.geometry.train_input;
        if patch.width() < t || patch.height() < t {
            return Err(Error::invalid(format!(
                "patch {}x{} smaller than the {t}px detector input",
                patch.width(),
                patch.height()
            )));
        }
        let h = hematoxylin_od(patch)?;
        let grid = lview_valid_mask(&self.geometry, patch.width(), patch.height());
        let mut probs = vec![0.0; grid.rows * grid.cols];
        for i in 0..grid.rows {
            for j in 0..grid.cols {
                if !grid.valid[i * grid.cols + j] {
                    continue;
                }
                let (cx, cy) = grid.center(i, j);
                let f = window_features(&h, patch.width(), cx - t / 2, cy - t / 2, &self.geometry, self.dark_threshold);
                probs[i * grid.cols + j] = self.model.prob(&f);
            }
        }
        Ok(ScoreMap::from_grid(grid, probs))
    }
}

/// Fits the logistic scorer to the window features of a training set.
pub fn train_reference_learner(dataset: &TrainingDataset, params: &LearnerParams) -> Result<LogisticDetector> {
    let mut det = LogisticDetector::reference();
    let mut x = Vec::with_capacity(dataset.samples.len());
    let mut y = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        x.push(det.features(&s.patch)?.to_vec());
        y.push(s.label);
    }
    det.model = fit_logistic(&x, &y, params)?;
    Ok(det)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Appearance, StainCanvas};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn render(f: impl FnOnce(&mut StainCanvas, &mut ChaCha8Rng), w: usize, h: usize) -> Pixmap {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut canvas = StainCanvas::full(w, h, 0.5, Appearance::default());
        f(&mut canvas, &mut rng);
        canvas.render(&mut rng, &StainMatrix::default_he(), [255; 3])
    }

    #[test]
    fn blank_window_scores_low() {
        let det = LogisticDetector::reference();
        let white = Pixmap::filled_rgb(128, 128, [255; 3]);
        assert!(det.score_map(&white).unwrap().probs[0] < 0.1);
        let tissue = render(|_, _| {}, 128, 128);
        assert!(det.score_map(&tissue).unwrap().probs[0] < 0.1);
    }

    #[test]
    fn centered_mitosis_scores_high() {
        let det = LogisticDetector::reference();
        for seed in 0..10 {
            let pm = render(
                |c, _| {
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    c.stamp_mitosis(&mut r, 64.0, 64.0)
                },
                128,
                128,
            );
            let p = det.score_map(&pm).unwrap().probs[0];
            assert!(p > 0.5, "seed {seed}: {p}");
        }
    }

    #[test]
    fn ordinary_nucleus_scores_low() {
        let det = LogisticDetector::reference();
        let pm = render(|c, r| c.stamp_cell(r, 64.0, 64.0), 128, 128);
        assert!(det.score_map(&pm).unwrap().probs[0] < 0.1);
    }

    #[test]
    fn deterministic_and_too_small_rejected() {
        let det = LogisticDetector::reference();
        let pm = render(|c, r| c.stamp_mitosis(r, 100.0, 70.0), 256, 192);
        assert_eq!(det.score_map(&pm).unwrap(), det.score_map(&pm).unwrap());
        assert!(det.score_map(&Pixmap::filled_rgb(100, 100, [255; 3])).is_err());
    }

    #[test]
    fn separable_toy_set() {
        let x: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![s * (1.0 + (i % 7) as f64 * 0.1), (i % 5) as f64 * 0.3 - 0.6]
            })
            .collect();
        let y: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let m = fit_logistic(&x, &y, &LearnerParams::default()).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(m.prob(xi) > 0.5, *yi);
        }
        assert_eq!(m, fit_logistic(&x, &y, &LearnerParams::default()).unwrap());
        assert!(fit_logistic(&x, &vec![true; 40], &LearnerParams::default()).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos() * 2.0]).collect();
        let y: Vec<bool> = (0..30).map(|i| (i as f64 * 0.37).sin() + 0.3 * (i as f64).cos() > 0.0).collect();
        let params = LearnerParams::default();
        let m = fit_logistic(&x, &y, &params).unwrap();
        let (_, _, z) = standardize(&x);
        let mut theta = vec![m.bias];
        theta.extend(&m.weights);
        let (_, g) = loss_and_grad(&z, &y, &theta, params.l2);
        let h = 1e-6;
        for k in 0..theta.len() {
            let mut up = theta.clone();
            up[k] += h;
            let mut dn = theta.clone();
            dn[k] -= h;
            let fd = (loss_and_grad(&z, &y, &up, params.l2).0 - loss_and_grad(&z, &y, &dn, params.l2).0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-4, "component {k}: {fd} vs {}", g[k]);
        }
        assert!(g.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-4);
    }

    #[test]
    fn detector_json_round_trip() {
        let det = LogisticDetector::reference();
        assert_eq!(LogisticDetector::parse(&det.to_json()).unwrap(), det);
        let bad = det.to_json().replace("prolif-detector", "other");
        assert!(LogisticDetector::parse(&bad).is_err());
    }
}
