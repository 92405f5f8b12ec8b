//! Slide-level feature vector and RBF support vector machines.
//!
//! A slide is summarized by 21 statistics of the mitosis and nucleus counts
//! of its ROIs (ranked by nucleus count):
//!
//! | idx | statistic                     | idx | statistic                      |
//! |-----|-------------------------------|-----|--------------------------------|
//! | 0   | avg mitoses                   | 11  | min mitoses                    |
//! | 1   | max mitoses                   | 12  | min cells                      |
//! | 2   | std mitoses                   | 13  | min mitoses / min cells        |
//! | 3   | grade of avg mitoses          | 14  | std mitoses, top 10 %          |
//! | 4   | grade of max mitoses          | 15  | std cells, top 10 %            |
//! | 5   | avg cells                     | 16  | min mitoses, top 10 %          |
//! | 6   | max cells                     | 17  | min cells, top 10 %            |
//! | 7   | std cells                     | 18  | avg mitoses, ranks 30-70 %     |
//! | 8   | avg mitoses / avg cells       | 19  | max mitoses, ranks 30-70 %     |
//! | 9   | max mitoses / max cells       | 20  | std mitoses, ranks 30-70 %     |
//! | 10  | avg mitoses, top 10 %         |     |                                |
//!
//! Standard deviations are population deviations and ratios with a zero
//! denominator are 0. Grades use the Bloom & Richardson mitotic-count cutoffs
//! in [`BrThresholds`].

mod cv;
mod svm;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roi::SortedRoiList;
use crate::stats;

pub use cv::{cross_validate, feature_search, fold_assignment, CvResult, Metric, Predictor, SearchEntry, SearchResult};
pub use svm::{
    rbf_kernel, solve_svc, solve_svr, train_svc, train_svr, BinaryMachine, SmoSolution, Standardizer, SvmKind,
    SvmModel, SvmParams, SMO_TOLERANCE,
};

pub const N_FEATURES: usize = 21;

/// Subset used for the three-class mitosis score.
pub const CLASSIFICATION_SUBSET: [usize; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 10, 15, 18, 20];

/// Subset used for the continuous molecular score.
pub const REGRESSION_SUBSET: [usize; 13] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 14, 18, 20];

pub type FeatureVector21 = [f64; N_FEATURES];

/// Mitotic-count cutoffs per 10 HPF: grade 1 up to `t1`, grade 2 up to `t2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrThresholds {
    pub t1: f64,
    pub t2: f64,
}

impl Default for BrThresholds {
    fn default() -> Self {
        Self { t1: 7.0, t2: 14.0 }
    }
}

impl BrThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.t1.is_finite() && self.t2.is_finite() && self.t1 < self.t2) {
            return Err(Error::invalid(format!("grade thresholds need t1 < t2, got {} and {}", self.t1, self.t2)));
        }
        Ok(())
    }
}

pub fn br_grade(count: f64, thresholds: &BrThresholds) -> Result<u8> {
    thresholds.validate()?;
    if !(count >= 0.0) {
        return Err(Error::invalid(format!("mitotic count {count} must be non-negative")));
    }
    Ok(if count <= thresholds.t1 {
        1
    } else if count <= thresholds.t2 {
        2
    } else {
        3
    })
}

/// Inclusive 1-based rank ranges `(top 10 %, 30-70 %)` for `k` ROIs.
pub fn rank_bands(k: usize) -> ((usize, usize), (usize, usize)) {
    let k = k.max(1);
    let top = (1, k.div_ceil(10).clamp(1, k));
    let lo = (3 * k / 10).clamp(1, k);
    let hi = (7 * k).div_ceil(10).clamp(lo, k);
    (top, (lo, hi))
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Table statistics from per-ROI counts. Entries are re-sorted by cell
/// count (descending, then patch index) first, so input order is irrelevant.
pub fn extract_features(rois: &SortedRoiList, thresholds: &BrThresholds) -> Result<FeatureVector21> {
    if rois.rois.is_empty() {
        return Err(Error::Degenerate("no ROIs to featurize".into()));
    }
    let mut entries = Vec::with_capacity(rois.rois.len());
    for r in &rois.rois {
        let m = r
            .mitoses
            .ok_or_else(|| Error::invalid(format!("ROI {} has no mitosis count", r.index)))?;
        entries.push((r.cells, r.index, m));
    }
    entries.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let cells: Vec<f64> = entries.iter().map(|e| e.0 as f64).collect();
    let mts: Vec<f64> = entries.iter().map(|e| e.2 as f64).collect();
    features_from_counts(&mts, &cells, thresholds)
}

/// Same as [`extract_features`] for counts already in rank order.
pub fn features_from_counts(mts: &[f64], cells: &[f64], thresholds: &BrThresholds) -> Result<FeatureVector21> {
    if mts.is_empty() || mts.len() != cells.len() {
        return Err(Error::invalid("need equal, non-empty mitosis and cell count lists"));
    }
    let ((t0, t1), (m0, m1)) = rank_bands(mts.len());
    let top_m = &mts[t0 - 1..t1];
    let top_c = &cells[t0 - 1..t1];
    let mid_m = &mts[m0 - 1..m1];
    let avg_m = stats::mean(mts);
    let avg_c = stats::mean(cells);
    let f = [
        avg_m,
        max(mts),
        stats::std_pop(mts),
        br_grade(avg_m, thresholds)? as f64,
        br_grade(max(mts), thresholds)? as f64,
        avg_c,
        max(cells),
        stats::std_pop(cells),
        ratio(avg_m, avg_c),
        ratio(max(mts), max(cells)),
        stats::mean(top_m),
        min(mts),
        min(cells),
        ratio(min(mts), min(cells)),
        stats::std_pop(top_m),
        stats::std_pop(top_c),
        min(top_m),
        min(top_c),
        stats::mean(mid_m),
        max(mid_m),
        stats::std_pop(mid_m),
    ];
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite feature"));
    }
    Ok(f)
}

/// Projection onto `indices`, in the given order.
pub fn select_features(f: &[f64], indices: &[usize]) -> Result<Vec<f64>> {
    validate_indices(indices, f.len())?;
    Ok(indices.iter().map(|&i| f[i]).collect())
}

pub fn validate_indices(indices: &[usize], dim: usize) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::invalid("empty selection"));
    }
    for (k, &i) in indices.iter().enumerate() {
        if i >= dim {
            return Err(Error::invalid(format!("feature index {i} out of range 0..{dim}")));
        }
        if indices[..k].contains(&i) {
            return Err(Error::invalid(format!("feature index {i} repeated")));
        }
    }
    Ok(())
}

/// One row of a features file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub slide: String,
    pub features: FeatureVector21,
}

fn header() -> Vec<String> {
    std::iter::once("slide".to_string())
        .chain((0..N_FEATURES).map(|i| format!("f{i}")))
        .collect()
}

/// CSV with header `slide,f0,...,f20`.
pub fn write_features_csv(rows: &[FeatureRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header()).expect("in-memory csv");
    for r in rows {
        let mut rec = vec![r.slide.clone()];
        rec.extend(r.features.iter().map(|v| v.to_string()));
        w.write_record(&rec).expect("in-memory csv");
    }
    w.flush().expect("in-memory csv");
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

pub fn parse_features_csv(text: &str) -> Result<Vec<FeatureRow>> {
    let bad = |m: String| Error::format("features csv", m);
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let head: Vec<String> = r.headers().map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect();
    if head != header() {
        return Err(bad("header must be slide,f0,...,f20".into()));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let mut features = [0.0; N_FEATURES];
        for (k, slot) in features.iter_mut().enumerate() {
            let v: f64 = rec[k + 1].trim().parse().map_err(|_| bad(format!("bad number {:?}", &rec[k + 1])))?;
            if !v.is_finite() {
                return Err(bad("non-finite feature".into()));
            }
            *slot = v;
        }
        rows.push(FeatureRow {
            slide: rec[0].to_string(),
            features,
        });
    }
    Ok(rows)
}

/// Ground-truth scores of one slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRow {
    pub slide: String,
    pub score_class: u8,
    pub score_continuous: f64,
}

/// CSV with header `slide,score_class,score_continuous`.
pub fn write_labels_csv(rows: &[LabelRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    w.flush().expect("in-memory csv");
    let mut out = w.into_inner().expect("in-memory csv");
    if rows.is_empty() {
        writeln!(out, "slide,score_class,score_continuous").expect("in-memory write");
    }
    String::from_utf8(out).expect("utf-8 csv")
}

pub fn parse_labels_csv(text: &str) -> Result<Vec<LabelRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let row: LabelRow = rec.map_err(|e| Error::format("labels csv", e.to_string()))?;
        if !(1..=3).contains(&row.score_class) || !row.score_continuous.is_finite() {
            return Err(Error::format("labels csv", format!("slide {}: label out of range", row.slide)));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Pairs feature rows with their labels by slide id, in feature-row order.
pub fn join_labels(features: &[FeatureRow], labels: &[LabelRow]) -> Result<Vec<(FeatureRow, LabelRow)>> {
    features
        .iter()
        .map(|f| {
            labels
                .iter()
                .find(|l| l.slide == f.slide)
                .map(|l| (f.clone(), l.clone()))
                .ok_or_else(|| Error::invalid(format!("no label for slide {}", f.slide)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roi::RoiEntry;
    use proptest::prelude::*;

    fn rois(cells: &[usize], mts: &[usize]) -> SortedRoiList {
        SortedRoiList {
            slide: "s".into(),
            k: 30,
            rois: cells
                .iter()
                .zip(mts)
                .enumerate()
                .map(|(i, (&c, &m))| RoiEntry {
                    index: i,
                    cx: 0,
                    cy: 0,
                    side: 10,
                    cells: c,
                    mitoses: Some(m),
                })
                .collect(),
        }
    }

    #[test]
    fn grades() {
        let t = BrThresholds::default();
        assert_eq!(br_grade(0.0, &t).unwrap(), 1);
        assert_eq!(br_grade(7.0, &t).unwrap(), 1);
        assert_eq!(br_grade(8.0, &t).unwrap(), 2);
        assert_eq!(br_grade(14.0, &t).unwrap(), 2);
        assert_eq!(br_grade(15.0, &t).unwrap(), 3);
        assert!(br_grade(1.0, &BrThresholds { t1: 5.0, t2: 5.0 }).is_err());
        assert!(br_grade(-1.0, &t).is_err());
    }

    proptest! {
        #[test]
        fn grade_is_monotone(a in 0.0f64..40.0, b in 0.0f64..40.0) {
            let t = BrThresholds::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(br_grade(lo, &t).unwrap() <= br_grade(hi, &t).unwrap());
        }
    }

    #[test]
    fn bands() {
        assert_eq!(rank_bands(30), ((1, 3), (9, 21)));
        assert_eq!(rank_bands(10), ((1, 1), (3, 7)));
        assert_eq!(rank_bands(1), ((1, 1), (1, 1)));
        for k in 1..200 {
            let ((a, b), (c, d)) = rank_bands(k);
            assert!(a == 1 && a <= b && b <= k && 1 <= c && c <= d && d <= k);
        }
    }

    #[test]
    fn hand_computed_three_rois() {
        let f = extract_features(&rois(&[100, 50, 10], &[4, 2, 0]), &BrThresholds::default()).unwrap();
        assert_eq!(f[0], 2.0);
        assert_eq!(f[1], 4.0);
        assert!((f[5] - 160.0 / 3.0).abs() < 1e-12);
        assert!((f[8] - 2.0 / (160.0 / 3.0)).abs() < 1e-15);
        assert_eq!(f[11], 0.0);
        assert_eq!(f[12], 10.0);
        assert!((f[2] - (8.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_counts() {
        let f = extract_features(&rois(&[0, 0, 0, 0], &[0, 0, 0, 0]), &BrThresholds::default()).unwrap();
        for (i, v) in f.iter().enumerate() {
            let expect = if i == 3 || i == 4 { 1.0 } else { 0.0 };
            assert_eq!(*v, expect, "feature {i}");
        }
    }

    #[test]
    fn single_roi() {
        let f = extract_features(&rois(&[40], &[3]), &BrThresholds::default()).unwrap();
        for i in [2, 7, 14, 15, 20] {
            assert_eq!(f[i], 0.0);
        }
        assert_eq!((f[0], f[1], f[11], f[10], f[16], f[18], f[19]), (3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0));
    }

    #[test]
    fn missing_mitoses_or_empty_rejected() {
        let mut r = rois(&[1, 2], &[0, 0]);
        r.rois[1].mitoses = None;
        assert!(extract_features(&r, &BrThresholds::default()).is_err());
        assert!(extract_features(&rois(&[], &[]), &BrThresholds::default()).is_err());
    }

    #[test]
    fn paper_subsets() {
        let f: Vec<f64> = (0..21).map(|i| i as f64).collect();
        assert_eq!(select_features(&f, &CLASSIFICATION_SUBSET).unwrap().len(), 12);
        assert_eq!(select_features(&f, &REGRESSION_SUBSET).unwrap().len(), 13);
        assert_eq!(select_features(&f, &[20, 0]).unwrap(), vec![20.0, 0.0]);
        assert!(select_features(&f, &[]).is_err());
        assert!(select_features(&f, &[21]).is_err());
        assert!(select_features(&f, &[1, 1]).is_err());
    }

    /// Each statistic computed on its own, straight from its definition.
    fn single_feature(i: usize, mts: &[f64], cells: &[f64]) -> f64 {
        let n = mts.len();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let sd = |v: &[f64]| {
            let m = mean(v);
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        let top = (n as f64 / 10.0 - 1e-9).ceil().max(1.0) as usize;
        let lo = ((3 * n) / 10).max(1);
        let hi = (7 * n).div_ceil(10).max(lo).min(n);
        let grade = |c: f64| if c <= 7.0 { 1.0 } else if c <= 14.0 { 2.0 } else { 3.0 };
        let r = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let mx = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max);
        let mn = |v: &[f64]| v.iter().cloned().fold(f64::MAX, f64::min);
        match i {
            0 => mean(mts),
            1 => mx(mts),
            2 => sd(mts),
            3 => grade(mean(mts)),
            4 => grade(mx(mts)),
            5 => mean(cells),
            6 => mx(cells),
            7 => sd(cells),
            8 => r(mean(mts), mean(cells)),
            9 => r(mx(mts), mx(cells)),
            10 => mean(&mts[..top]),
            11 => mn(mts),
            12 => mn(cells),
            13 => r(mn(mts), mn(cells)),
            14 => sd(&mts[..top]),
            15 => sd(&cells[..top]),
            16 => mn(&mts[..top]),
            17 => mn(&cells[..top]),
            18 => mean(&mts[lo - 1..hi]),
            19 => mx(&mts[lo - 1..hi]),
            20 => sd(&mts[lo - 1..hi]),
            _ => unreachable!(),
        }
    }

    proptest! {
        #[test]
        fn selection_commutes_with_extraction(
            counts in proptest::collection::vec((0usize..500, 0usize..30), 1..45),
            pick in proptest::sample::subsequence((0..21).collect::<Vec<usize>>(), 1..21),
        ) {
            let cells: Vec<usize> = counts.iter().map(|c| c.0).collect();
            let mts: Vec<usize> = counts.iter().map(|c| c.1).collect();
            let list = rois(&cells, &mts);
            let f = extract_features(&list, &BrThresholds::default()).unwrap();
            let got = select_features(&f, &pick).unwrap();
            let mut order: Vec<usize> = (0..counts.len()).collect();
            order.sort_by_key(|&i| (std::cmp::Reverse(cells[i]), i));
            let sm: Vec<f64> = order.iter().map(|&i| mts[i] as f64).collect();
            let sc: Vec<f64> = order.iter().map(|&i| cells[i] as f64).collect();
            for (k, &i) in pick.iter().enumerate() {
                let want = single_feature(i, &sm, &sc);
                prop_assert!((got[k] - want).abs() <= 1e-9 * want.abs().max(1.0), "feature {}: {} vs {}", i, got[k], want);
            }
        }

        #[test]
        fn extraction_ignores_input_order(
            counts in proptest::collection::vec((0usize..500, 0usize..30), 1..45),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let cells: Vec<usize> = counts.iter().map(|c| c.0).collect();
            let mts: Vec<usize> = counts.iter().map(|c| c.1).collect();
            let list = rois(&cells, &mts);
            let mut shuffled = list.clone();
            shuffled.rois.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let t = BrThresholds::default();
            prop_assert_eq!(extract_features(&list, &t).unwrap(), extract_features(&shuffled, &t).unwrap());
        }
    }

    #[test]
    fn csv_round_trip_and_rejects() {
        let mut f = [0.0; 21];
        f[3] = 1.0;
        f[8] = 0.1 + 0.2;
        let rows = vec![FeatureRow { slide: "a,b".into(), features: f }];
        let text = write_features_csv(&rows);
        assert!(text.starts_with("slide,f0,f1,"));
        assert_eq!(parse_features_csv(&text).unwrap(), rows);
        assert!(parse_features_csv("slide,f0\nx,1\n").is_err());
        let labels = vec![LabelRow { slide: "a,b".into(), score_class: 2, score_continuous: -0.25 }];
        assert_eq!(parse_labels_csv(&write_labels_csv(&labels)).unwrap(), labels);
        assert!(parse_labels_csv("slide,score_class,score_continuous\nx,4,0\n").is_err());
        assert_eq!(join_labels(&rows, &labels).unwrap().len(), 1);
        assert!(join_labels(&rows, &[]).is_err());
    }
}
