//! Detection F1, quadratic weighted Cohen's kappa and Spearman's rank
//! correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(detection index, truth index)`.
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    pub fn merge(&mut self, other: &MatchResult) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Greedy one-to-one matching by ascending distance among pairs within
/// `radius` (inclusive). Equal distances resolve by detection index, then
/// truth index.
pub fn match_detections(detections: &[[f64; 2]], truths: &[[f64; 2]], radius: f64) -> Result<MatchResult> {
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::invalid("match radius must be non-negative"));
    }
    let mut cand = Vec::new();
    for (i, d) in detections.iter().enumerate() {
        for (j, t) in truths.iter().enumerate() {
            let dist = (d[0] - t[0]).hypot(d[1] - t[1]);
            if dist <= radius {
                cand.push((dist, i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_d = vec![false; detections.len()];
    let mut used_t = vec![false; truths.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cand {
        if !used_d[i] && !used_t[j] {
            used_d[i] = true;
            used_t[j] = true;
            pairs.push((i, j));
        }
    }
    Ok(MatchResult {
        tp: pairs.len(),
        fp: detections.len() - pairs.len(),
        fn_: truths.len() - pairs.len(),
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

/// Precision, recall and F1; each is 0 when its denominator is 0.
pub fn f1(m: &MatchResult) -> F1Score {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(m.tp, m.tp + m.fp);
    let r = ratio(m.tp, m.tp + m.fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    F1Score { p, r, f1 }
}

/// Quadratic weighted kappa for ratings in `1..=n_classes`.
pub fn quadratic_weighted_kappa(preds: &[u8], labels: &[u8], n_classes: usize) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: preds.len(),
        });
    }
    if preds.is_empty() || n_classes < 2 {
        return Err(Error::invalid("kappa needs at least one rating and two classes"));
    }
    let n = n_classes;
    let mut o = vec![vec![0.0f64; n]; n];
    for (&a, &b) in preds.iter().zip(labels) {
        if a == 0 || b == 0 || a as usize > n || b as usize > n {
            return Err(Error::invalid(format!("rating outside 1..={n}")));
        }
        o[a as usize - 1][b as usize - 1] += 1.0;
    }
    let total = preds.len() as f64;
    let rows: Vec<f64> = o.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..n).map(|j| o.iter().map(|r| r[j]).sum()).collect();
    let scale = ((n - 1) * (n - 1)) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let w = ((i as f64) - (j as f64)).powi(2) / scale;
            num += w * o[i][j];
            den += w * rows[i] * cols[j] / total;
        }
    }
    if den == 0.0 {
        return if num == 0.0 {
            Ok(1.0)
        } else {
            Err(Error::DegenerateMarginals)
        };
    }
    Ok(1.0 - num / den)
}

/// 1-based ranks; tied values share the mean of their rank range.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman's rho with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::invalid("spearman needs at least two pairs"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value"));
    }
    if x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]) {
        return Err(Error::Degenerate("constant vector has no ranking".into()));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

/// Per-slide prediction next to its reference scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideEval {
    pub slide: String,
    pub true_class: u8,
    pub pred_class: u8,
    pub true_continuous: f64,
    pub pred_continuous: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: Option<F1Score>,
    pub kappa: Option<f64>,
    pub spearman: Option<f64>,
}

impl MetricsReport {
    /// Computes kappa and Spearman where the slides allow it; degenerate
    /// inputs leave the entry empty.
    pub fn from_slides(slides: &[SlideEval], detection: Option<&MatchResult>) -> Self {
        let pc: Vec<u8> = slides.iter().map(|s| s.pred_class).collect();
        let tc: Vec<u8> = slides.iter().map(|s| s.true_class).collect();
        let ps: Vec<f64> = slides.iter().map(|s| s.pred_continuous).collect();
        let ts: Vec<f64> = slides.iter().map(|s| s.true_continuous).collect();
        Self {
            f1: detection.map(f1),
            kappa: quadratic_weighted_kappa(&pc, &tc, 3).ok(),
            spearman: spearman(&ps, &ts).ok(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn write_slide_csv(slides: &[SlideEval]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["slide", "true_class", "pred_class", "true_continuous", "pred_continuous"])
        .expect("in-memory csv");
    for s in slides {
        w.serialize(s).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}
