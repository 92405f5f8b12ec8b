//! Slide-level cross-validation and exhaustive feature-subset search.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::svm::{train_svc, train_svr, SvmKind, SvmModel, SvmParams};
use super::{select_features, validate_indices};
use crate::error::{Error, Result};
use crate::eval;

/// Anything that maps a feature vector to a class label or a score.
pub trait Predictor: Send + Sync {
    fn predict(&self, x: &[f64]) -> Result<f64>;
}

impl Predictor for SvmModel {
    fn predict(&self, x: &[f64]) -> Result<f64> {
        SvmModel::predict(self, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    /// Quadratic weighted kappa over classes 1..=3.
    Kappa,
    Spearman,
    /// Negated root mean squared error, so larger is better.
    NegRmse,
}

impl Metric {
    pub fn score(&self, pred: &[f64], truth: &[f64]) -> Result<f64> {
        if pred.len() != truth.len() || pred.is_empty() {
            return Err(Error::invalid("metric needs equal, non-empty vectors"));
        }
        match self {
            Metric::Accuracy => Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64),
            Metric::Kappa => {
                let to_class = |v: &f64| -> Result<u8> {
                    let r = v.round();
                    if (1.0..=3.0).contains(&r) {
                        Ok(r as u8)
                    } else {
                        Err(Error::invalid(format!("class {v} outside 1..=3")))
                    }
                };
                let p = pred.iter().map(to_class).collect::<Result<Vec<_>>>()?;
                let t = truth.iter().map(to_class).collect::<Result<Vec<_>>>()?;
                eval::quadratic_weighted_kappa(&p, &t, 3)
            }
            Metric::Spearman => eval::spearman(pred, truth),
            Metric::NegRmse => {
                let mse = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
                Ok(-mse.sqrt())
            }
        }
    }
}

/// Fold index per sample: a seeded shuffle dealt round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::invalid("cross-validation needs at least 2 folds"));
    }
    if n < folds {
        return Err(Error::invalid(format!("{n} samples cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (k, &i) in order.iter().enumerate() {
        fold[i] = k % folds;
    }
    Ok(fold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    /// Held-out metric per fold; empty where the fold is degenerate for it.
    pub per_fold: Vec<Option<f64>>,
    /// Mean over the defined folds.
    pub mean: Option<f64>,
    /// Metric over all out-of-fold predictions at once.
    pub pooled: Option<f64>,
    pub predictions: Vec<f64>,
}

/// Trains on every fold complement and scores the held-out slides.
/// Folds run in parallel; results do not depend on scheduling.
pub fn cross_validate<F>(x: &[Vec<f64>], y: &[f64], folds: usize, seed: u64, metric: Metric, train: F) -> Result<CvResult>
where
    F: Fn(&[Vec<f64>], &[f64]) -> Result<Box<dyn Predictor>> + Sync,
{
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: x.len(),
        });
    }
    let assign = fold_assignment(x.len(), folds, seed)?;
    let outcomes: Vec<Result<(Vec<usize>, Vec<f64>)>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let (mut tx, mut ty) = (Vec::new(), Vec::new());
            let mut held = Vec::new();
            for i in 0..x.len() {
                if assign[i] == f {
                    held.push(i);
                } else {
                    tx.push(x[i].clone());
                    ty.push(y[i]);
                }
            }
            let model = train(&tx, &ty)?;
            let preds = held.iter().map(|&i| model.predict(&x[i])).collect::<Result<Vec<_>>>()?;
            Ok((held, preds))
        })
        .collect();
    let mut predictions = vec![0.0; x.len()];
    let mut per_fold = Vec::with_capacity(folds);
    for outcome in outcomes {
        let (held, preds) = outcome?;
        let truth: Vec<f64> = held.iter().map(|&i| y[i]).collect();
        per_fold.push(metric.score(&preds, &truth).ok());
        for (i, p) in held.into_iter().zip(preds) {
            predictions[i] = p;
        }
    }
    let defined: Vec<f64> = per_fold.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let pooled = metric.score(&predictions, y).ok();
    Ok(CvResult {
        per_fold,
        mean,
        pooled,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEntry {
    pub features: Vec<usize>,
    pub c: f64,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub features: Vec<usize>,
    pub c: f64,
    pub score: f64,
    pub table: Vec<SearchEntry>,
}

/// Pooled out-of-fold metric for every (subset, C) pair; the best wins, ties
/// going to fewer features, then smaller C, then lexicographically smaller
/// indices. `x` holds full 21-feature rows.
#[allow(clippy::too_many_arguments)]
pub fn feature_search(
    x: &[Vec<f64>],
    y: &[f64],
    candidates: &[Vec<usize>],
    c_grid: &[f64],
    kind: SvmKind,
    base: &SvmParams,
    folds: usize,
    seed: u64,
    metric: Metric,
) -> Result<SearchResult> {
    if candidates.is_empty() || c_grid.is_empty() {
        return Err(Error::invalid("feature search needs candidates and a C grid"));
    }
    let dim = x.first().map_or(0, |r| r.len());
    for c in candidates {
        validate_indices(c, dim)?;
    }
    let mut table = Vec::new();
    for subset in candidates {
        let xs = x.iter().map(|r| select_features(r, subset)).collect::<Result<Vec<_>>>()?;
        for &c in c_grid {
            let params = SvmParams { c, ..*base };
            let cv = cross_validate(&xs, y, folds, seed, metric, |tx, ty| -> Result<Box<dyn Predictor>> {
                Ok(match kind {
                    SvmKind::Classifier => {
                        let labels: Vec<u8> = ty.iter().map(|v| *v as u8).collect();
                        Box::new(train_svc(tx, &labels, subset, &params)?)
                    }
                    SvmKind::Regressor => Box::new(train_svr(tx, ty, subset, &params)?),
                })
            })?;
            table.push(SearchEntry {
                features: subset.clone(),
                c,
                score: cv.pooled,
            });
        }
    }
    let best = table
        .iter()
        .filter(|e| e.score.is_some())
        .min_by(|a, b| {
            b.score
                .unwrap()
                .total_cmp(&a.score.unwrap())
                .then(a.features.len().cmp(&b.features.len()))
                .then(a.c.total_cmp(&b.c))
                .then(a.features.cmp(&b.features))
        })
        .ok_or_else(|| Error::Degenerate("metric undefined for every candidate".into()))?;
    Ok(SearchResult {
        features: best.features.clone(),
        c: best.c,
        score: best.score.unwrap(),
        table: table.clone(),
    })
}
