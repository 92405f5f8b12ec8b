//! RBF support vector machines trained by sequential minimal optimization.
//!
//! Both problems are solved in the common dual form
//!
//! ```text
//! min  1/2 a'Qa + p'a   s.t.  y'a = 0,  0 <= a_t <= C
//! ```
//!
//! with `Q_tu = y_t y_u K(x_t, x_u)`. Classification uses `p = -1`; epsilon
//! regression doubles the variables (`a` then `a*`, labels `+1` then `-1`,
//! `p = eps - z` then `eps + z`). Each step updates the maximal violating
//! pair until the violation drops below the solver tolerance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// KKT tolerance that trained machines satisfy.
pub const SMO_TOLERANCE: f64 = 1e-3;

/// Stopping gap used internally; tighter than [`SMO_TOLERANCE`] so the
/// bias averaging cannot push any point past it.
const SOLVER_GAP: f64 = 5e-4;

const TAU: f64 = 1e-12;

const MODEL_FORMAT: &str = "prolif-svm";
const MODEL_VERSION: u32 = 1;

pub fn rbf_kernel(x: &[f64], y: &[f64], gamma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if !(gamma > 0.0) {
        return Err(Error::invalid("gamma must be positive"));
    }
    Ok(kernel(x, y, gamma))
}

#[inline]
fn kernel(x: &[f64], y: &[f64], gamma: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-gamma * d2).exp()
}

/// Per-feature z-scoring fitted on training data; zero-variance features
/// keep unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let d = x.first().map_or(0, |r| r.len());
        let mut mean = Vec::with_capacity(d);
        let mut std = Vec::with_capacity(d);
        for k in 0..d {
            let col: Vec<f64> = x.iter().map(|r| r[k]).collect();
            mean.push(stats::mean(&col));
            let s = stats::std_pop(&col);
            std.push(if s > 0.0 { s } else { 1.0 });
        }
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(k, v)| (v - self.mean[k]) / self.std[k]).collect()
    }
}

/// Dual solution of one SMO run.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoSolution {
    /// Dual variables (length `2l` for regression: `a` then `a*`).
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    /// Dual objective `-(1/2 a'Qa + p'a)` after every step, when traced.
    pub objective: Vec<f64>,
}

impl SmoSolution {
    /// Expansion coefficients of the decision function, one per sample.
    pub fn coefficients(&self, labels: &[f64]) -> Vec<f64> {
        let l = labels.len();
        if self.alpha.len() == l {
            self.alpha.iter().zip(labels).map(|(a, y)| a * y).collect()
        } else {
            (0..l).map(|i| self.alpha[i] - self.alpha[i + l]).collect()
        }
    }
}

struct Solver<'a> {
    k: &'a [Vec<f64>],
    l: usize,
    y: Vec<f64>,
    p: Vec<f64>,
    c: f64,
}

impl Solver<'_> {
    #[inline]
    fn q(&self, t: usize, u: usize) -> f64 {
        self.y[t] * self.y[u] * self.k[t % self.l][u % self.l]
    }

    fn objective(&self, a: &[f64], g: &[f64]) -> f64 {
        -0.5 * a.iter().zip(g).zip(&self.p).map(|((a, g), p)| a * (g + p)).sum::<f64>()
    }

    fn solve(&self, trace: bool) -> SmoSolution {
        let n = self.y.len();
        let c = self.c;
        let mut a = vec![0.0; n];
        let mut g = self.p.clone();
        let mut objective: Vec<f64> = Vec::new();
        let max_iter = 10_000_000usize.max(100 * n);
        let mut iter = 0;
        while iter < max_iter {
            let (mut gmax, mut gmin) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut i, mut j) = (usize::MAX, usize::MAX);
            for t in 0..n {
                let v = -self.y[t] * g[t];
                let up = (self.y[t] > 0.0 && a[t] < c) || (self.y[t] < 0.0 && a[t] > 0.0);
                let low = (self.y[t] > 0.0 && a[t] > 0.0) || (self.y[t] < 0.0 && a[t] < c);
                if up && v > gmax {
                    gmax = v;
                    i = t;
                }
                if low && v < gmin {
                    gmin = v;
                    j = t;
                }
            }
            if i == usize::MAX || j == usize::MAX || gmax - gmin < SOLVER_GAP {
                break;
            }
            iter += 1;
            let (ai, aj) = (a[i], a[j]);
            let qij = self.q(i, j);
            let (qii, qjj) = (self.q(i, i), self.q(j, j));
            if self.y[i] != self.y[j] {
                let quad = (qii + qjj + 2.0 * qij).max(TAU);
                let delta = (-g[i] - g[j]) / quad;
                let diff = ai - aj;
                a[i] += delta;
                a[j] += delta;
                if diff > 0.0 {
                    if a[j] < 0.0 {
                        a[j] = 0.0;
                        a[i] = diff;
                    }
                } else if a[i] < 0.0 {
                    a[i] = 0.0;
                    a[j] = -diff;
                }
                if diff > 0.0 {
                    if a[i] > c {
                        a[i] = c;
                        a[j] = c - diff;
                    }
                } else if a[j] > c {
                    a[j] = c;
                    a[i] = c + diff;
                }
            } else {
                let quad = (qii + qjj - 2.0 * qij).max(TAU);
                let delta = (g[i] - g[j]) / quad;
                let sum = ai + aj;
                a[i] -= delta;
                a[j] += delta;
                if sum > c {
                    if a[i] > c {
                        a[i] = c;
                        a[j] = sum - c;
                    }
                    if a[j] > c {
                        a[j] = c;
                        a[i] = sum - c;
                    }
                } else {
                    if a[j] < 0.0 {
                        a[j] = 0.0;
                        a[i] = sum;
                    }
                    if a[i] < 0.0 {
                        a[i] = 0.0;
                        a[j] = sum;
                    }
                }
            }
            let (di, dj) = (a[i] - ai, a[j] - aj);
            for t in 0..n {
                g[t] += self.q(t, i) * di + self.q(t, j) * dj;
            }
            if trace || cfg!(debug_assertions) {
                let obj = self.objective(&a, &g);
                if let Some(&prev) = objective.last() {
                    debug_assert!(obj >= prev - 1e-9 * prev.abs().max(1.0), "dual objective fell from {prev} to {obj}");
                }
                objective.push(obj);
            }
        }
        if iter == max_iter {
            log::warn!("SMO stopped after {max_iter} iterations without reaching the tolerance");
        }
        if !trace {
            objective.clear();
        }
        SmoSolution {
            rho: self.rho(&a, &g),
            alpha: a,
            iterations: iter,
            objective,
        }
    }

    fn rho(&self, a: &[f64], g: &[f64]) -> f64 {
        let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut sum, mut free) = (0.0, 0usize);
        for t in 0..a.len() {
            let yg = self.y[t] * g[t];
            if a[t] >= self.c {
                if self.y[t] < 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else if a[t] <= 0.0 {
                if self.y[t] > 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else {
                free += 1;
                sum += yg;
            }
        }
        if free > 0 {
            sum / free as f64
        } else {
            (ub + lb) / 2.0
        }
    }
}

fn gram(x: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
    let l = x.len();
    let mut k = vec![vec![0.0; l]; l];
    for i in 0..l {
        for j in i..l {
            let v = kernel(&x[i], &x[j], gamma);
            k[i][j] = v;
            k[j][i] = v;
        }
    }
    k
}

fn check_inputs(x: &[Vec<f64>], n_targets: usize, c: f64, gamma: f64) -> Result<()> {
    if x.is_empty() || x.len() != n_targets {
        return Err(Error::invalid("need one target per sample"));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("ragged sample vectors"));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite feature value"));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::invalid("C must be positive"));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid("gamma must be positive"));
    }
    Ok(())
}

/// Binary soft-margin classifier; `y` holds `+1`/`-1`.
pub fn solve_svc(x: &[Vec<f64>], y: &[f64], c: f64, gamma: f64, trace: bool) -> Result<SmoSolution> {
    check_inputs(x, y.len(), c, gamma)?;
    if y.iter().any(|v| *v != 1.0 && *v != -1.0) {
        return Err(Error::invalid("binary labels must be +1 or -1"));
    }
    let k = gram(x, gamma);
    let solver = Solver {
        k: &k,
        l: x.len(),
        y: y.to_vec(),
        p: vec![-1.0; x.len()],
        c,
    };
    Ok(solver.solve(trace))
}

/// Epsilon-insensitive regression.
pub fn solve_svr(x: &[Vec<f64>], z: &[f64], c: f64, gamma: f64, epsilon: f64, trace: bool) -> Result<SmoSolution> {
    check_inputs(x, z.len(), c, gamma)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite regression target"));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid("epsilon must be non-negative"));
    }
    let l = x.len();
    let k = gram(x, gamma);
    let mut y = vec![1.0; l];
    y.extend(std::iter::repeat_n(-1.0, l));
    let mut p: Vec<f64> = z.iter().map(|v| epsilon - v).collect();
    p.extend(z.iter().map(|v| epsilon + v));
    let solver = Solver { k: &k, l, y, p, c };
    Ok(solver.solve(trace))
}

/// Kernel expansion `f(x) = sum coef_i K(sv_i, x) - rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryMachine {
    /// Class voted for when `f(x) > 0` (unused for regression).
    pub positive: u8,
    pub negative: u8,
    pub support_vectors: Vec<Vec<f64>>,
    pub coef: Vec<f64>,
    pub rho: f64,
}

impl BinaryMachine {
    fn from_solution(x: &[Vec<f64>], labels: &[f64], sol: &SmoSolution, positive: u8, negative: u8) -> Self {
        let coef = sol.coefficients(labels);
        let mut sv = Vec::new();
        let mut kept = Vec::new();
        for (i, c) in coef.iter().enumerate() {
            if *c != 0.0 {
                sv.push(x[i].clone());
                kept.push(*c);
            }
        }
        Self {
            positive,
            negative,
            support_vectors: sv,
            coef: kept,
            rho: sol.rho,
        }
    }

    /// Decision value on an already standardized input.
    pub fn decision(&self, z: &[f64], gamma: f64) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.coef)
            .map(|(sv, c)| c * kernel(sv, z, gamma))
            .sum::<f64>()
            - self.rho
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvmKind {
    Classifier,
    Regressor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvmParams {
    pub c: f64,
    /// Defaults to `1 / dimension`.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    0.1
}

impl SvmParams {
    pub fn classifier() -> Self {
        Self {
            c: 0.03125,
            gamma: None,
            epsilon: default_epsilon(),
        }
    }

    pub fn regressor() -> Self {
        Self {
            c: 0.25,
            gamma: None,
            epsilon: default_epsilon(),
        }
    }

    fn gamma_for(&self, dim: usize) -> f64 {
        self.gamma.unwrap_or(1.0 / dim.max(1) as f64)
    }
}

/// Trained predictor with its feature subset and standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub kind: SvmKind,
    /// Indices into the 21-feature vector, in model input order.
    pub features: Vec<usize>,
    pub scaler: Standardizer,
    pub gamma: f64,
    pub c: f64,
    pub epsilon: Option<f64>,
    /// Sorted class labels (classifier only).
    pub classes: Vec<u8>,
    pub machines: Vec<BinaryMachine>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format: String,
    version: u32,
    kind: SvmKind,
    features: Vec<usize>,
    mean: Vec<f64>,
    std: Vec<f64>,
    gamma: f64,
    c: f64,
    #[serde(default)]
    epsilon: Option<f64>,
    #[serde(default)]
    classes: Vec<u8>,
    machines: Vec<BinaryMachine>,
}

fn feature_dim(x: &[Vec<f64>], features: &[usize]) -> Result<usize> {
    let d = x.first().map_or(0, |r| r.len());
    if features.len() != d {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            got: d,
        });
    }
    Ok(d)
}

/// One-vs-one classifier over the classes present in `labels`.
pub fn train_svc(x: &[Vec<f64>], labels: &[u8], features: &[usize], params: &SvmParams) -> Result<SvmModel> {
    let d = feature_dim(x, features)?;
    let gamma = params.gamma_for(d);
    check_inputs(x, labels.len(), params.c, gamma)?;
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Degenerate("classifier needs at least two classes".into()));
    }
    let scaler = Standardizer::fit(x);
    let z: Vec<Vec<f64>> = x.iter().map(|r| scaler.apply(r)).collect();
    let mut machines = Vec::new();
    for (a, &ca) in classes.iter().enumerate() {
        for &cb in &classes[a + 1..] {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == ca || labels[i] == cb).collect();
            let xs: Vec<Vec<f64>> = idx.iter().map(|&i| z[i].clone()).collect();
            let ys: Vec<f64> = idx.iter().map(|&i| if labels[i] == ca { 1.0 } else { -1.0 }).collect();
            let sol = solve_svc(&xs, &ys, params.c, gamma, false)?;
            machines.push(BinaryMachine::from_solution(&xs, &ys, &sol, ca, cb));
        }
    }
    Ok(SvmModel {
        kind: SvmKind::Classifier,
        features: features.to_vec(),
        scaler,
        gamma,
        c: params.c,
        epsilon: None,
        classes,
        machines,
    })
}

pub fn train_svr(x: &[Vec<f64>], targets: &[f64], features: &[usize], params: &SvmParams) -> Result<SvmModel> {
    let d = feature_dim(x, features)?;
    let gamma = params.gamma_for(d);
    check_inputs(x, targets.len(), params.c, gamma)?;
    let scaler = Standardizer::fit(x);
    let z: Vec<Vec<f64>> = x.iter().map(|r| scaler.apply(r)).collect();
    let sol = solve_svr(&z, targets, params.c, gamma, params.epsilon, false)?;
    let machine = BinaryMachine::from_solution(&z, targets, &sol, 0, 0);
    Ok(SvmModel {
        kind: SvmKind::Regressor,
        features: features.to_vec(),
        scaler,
        gamma,
        c: params.c,
        epsilon: Some(params.epsilon),
        classes: Vec::new(),
        machines: vec![machine],
    })
}

impl SvmModel {
    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.features.len() {
            return Err(Error::DimensionMismatch {
                expected: self.features.len(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Decision value of every binary machine for a reduced input.
    pub fn decision_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let z = self.scaler.apply(x);
        Ok(self.machines.iter().map(|m| m.decision(&z, self.gamma)).collect())
    }

    /// Class label (as a number) or regression value for a reduced input.
    /// Votes tie toward the smaller class.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let dv = self.decision_values(x)?;
        match self.kind {
            SvmKind::Regressor => Ok(dv[0]),
            SvmKind::Classifier => {
                let mut votes = vec![0usize; self.classes.len()];
                for (m, v) in self.machines.iter().zip(&dv) {
                    let winner = if *v > 0.0 { m.positive } else { m.negative };
                    let k = self.classes.iter().position(|c| *c == winner).expect("machine class is known");
                    votes[k] += 1;
                }
                let best = votes.iter().copied().max().unwrap_or(0);
                let k = votes.iter().position(|v| *v == best).expect("non-empty votes");
                Ok(self.classes[k] as f64)
            }
        }
    }

    /// Prediction from a full feature vector, using the model's subset.
    pub fn predict_full(&self, f: &[f64]) -> Result<f64> {
        let x = super::select_features(f, &self.features)?;
        self.predict(&x)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelDoc {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            kind: self.kind,
            features: self.features.clone(),
            mean: self.scaler.mean.clone(),
            std: self.scaler.std.clone(),
            gamma: self.gamma,
            c: self.c,
            epsilon: self.epsilon,
            classes: self.classes.clone(),
            machines: self.machines.clone(),
        })
        .expect("model serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::format("svm model", m);
        let doc: ModelDoc = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if doc.format != MODEL_FORMAT || doc.version != MODEL_VERSION {
            return Err(bad(format!("unsupported {} v{}", doc.format, doc.version)));
        }
        super::validate_indices(&doc.features, super::N_FEATURES).map_err(|e| bad(e.to_string()))?;
        let d = doc.features.len();
        if doc.mean.len() != d || doc.std.len() != d {
            return Err(bad("standardization length differs from feature subset".into()));
        }
        if doc.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || doc.mean.iter().any(|m| !m.is_finite()) {
            return Err(bad("invalid standardization".into()));
        }
        if !(doc.gamma > 0.0 && doc.gamma.is_finite() && doc.c > 0.0 && doc.c.is_finite()) {
            return Err(bad("gamma and C must be positive".into()));
        }
        let bound = doc.c * (1.0 + 1e-9);
        for m in &doc.machines {
            if m.support_vectors.len() != m.coef.len() || m.support_vectors.iter().any(|v| v.len() != d) {
                return Err(bad("support vector shape mismatch".into()));
            }
            if !m.rho.is_finite() || m.coef.iter().any(|c| !c.is_finite() || c.abs() > bound) {
                return Err(bad("dual coefficient outside the box".into()));
            }
            if m.support_vectors.iter().flatten().any(|v| !v.is_finite()) {
                return Err(bad("non-finite support vector".into()));
            }
        }
        match doc.kind {
            SvmKind::Regressor => {
                if doc.machines.len() != 1 || !doc.epsilon.is_some_and(|e| e >= 0.0 && e.is_finite()) {
                    return Err(bad("regressor needs one machine and epsilon >= 0".into()));
                }
            }
            SvmKind::Classifier => {
                let mut sorted = doc.classes.clone();
                sorted.sort_unstable();
                sorted.dedup();
                let n = doc.classes.len();
                if sorted != doc.classes || n < 2 || doc.machines.len() != n * (n - 1) / 2 {
                    return Err(bad("classifier needs sorted distinct classes and one machine per pair".into()));
                }
                if doc.machines.iter().any(|m| !doc.classes.contains(&m.positive) || !doc.classes.contains(&m.negative)) {
                    return Err(bad("machine refers to an unknown class".into()));
                }
            }
        }
        Ok(Self {
            kind: doc.kind,
            features: doc.features,
            scaler: Standardizer {
                mean: doc.mean,
                std: doc.std,
            },
            gamma: doc.gamma,
            c: doc.c,
            epsilon: doc.epsilon,
            classes: doc.classes,
            machines: doc.machines,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(seed: u64, per_class: usize, spread: f64) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [(0.0, 0.0), (4.0, 0.0), (2.0, 4.0)];
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (k, c) in centers.iter().enumerate() {
            for _ in 0..per_class {
                x.push(vec![c.0 + rng.random_range(-spread..spread), c.1 + rng.random_range(-spread..spread)]);
                y.push(k as u8 + 1);
            }
        }
        (x, y)
    }

    /// Checks the KKT conditions of a binary solution on its training set.
    fn assert_kkt(x: &[Vec<f64>], y: &[f64], sol: &SmoSolution, c: f64, gamma: f64) {
        let coef = sol.coefficients(y);
        for i in 0..x.len() {
            let f: f64 = (0..x.len()).map(|j| coef[j] * kernel(&x[j], &x[i], gamma)).sum::<f64>() - sol.rho;
            let m = y[i] * f;
            let a = sol.alpha[i];
            if a <= 0.0 {
                assert!(m >= 1.0 - SMO_TOLERANCE, "a=0 but margin {m}");
            } else if a >= c {
                assert!(m <= 1.0 + SMO_TOLERANCE, "a=C but margin {m}");
            } else {
                assert!((m - 1.0).abs() <= SMO_TOLERANCE, "free a but margin {m}");
            }
            assert!((0.0..=c).contains(&a));
        }
        let balance: f64 = sol.alpha.iter().zip(y).map(|(a, y)| a * y).sum();
        assert!(balance.abs() < 1e-9);
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(rbf_kernel(&[1.0, 2.0], &[1.0, 2.0], 0.3).unwrap(), 1.0);
        assert!((rbf_kernel(&[0.0, 0.0], &[1.0, 1.0], 0.5).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!(rbf_kernel(&[0.0], &[1.0, 1.0], 0.5).is_err());
        assert!(rbf_kernel(&[0.0], &[1.0], 0.0).is_err());
        assert_eq!(SvmParams::classifier().gamma_for(12), 1.0 / 12.0);
    }

    #[test]
    fn separable_three_classes() {
        let (x, y) = blobs(1, 15, 0.8);
        let model = train_svc(&x, &y, &[0, 1], &SvmParams { c: 10.0, gamma: None, epsilon: 0.1 }).unwrap();
        assert_eq!(model.machines.len(), 3);
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(model.predict(xi).unwrap(), *yi as f64);
        }
    }

    #[test]
    fn kkt_holds_on_every_machine() {
        for (seed, c) in [(2, 0.03125), (3, 0.25), (4, 1.0), (5, 100.0)] {
            let (x, y) = blobs(seed, 12, 2.5);
            let z: Vec<Vec<f64>> = {
                let s = Standardizer::fit(&x);
                x.iter().map(|r| s.apply(r)).collect()
            };
            for (a, b) in [(1u8, 2u8), (1, 3), (2, 3)] {
                let idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == a || y[i] == b).collect();
                let xs: Vec<Vec<f64>> = idx.iter().map(|&i| z[i].clone()).collect();
                let ys: Vec<f64> = idx.iter().map(|&i| if y[i] == a { 1.0 } else { -1.0 }).collect();
                let sol = solve_svc(&xs, &ys, c, 0.5, true).unwrap();
                assert_kkt(&xs, &ys, &sol, c, 0.5);
                assert!(sol.objective.windows(2).all(|w| w[1] >= w[0] - 1e-12));
            }
        }
    }

    #[test]
    fn contradictory_labels_train() {
        let x = vec![vec![0.0], vec![0.0], vec![1.0], vec![1.0]];
        let y = vec![1u8, 2, 1, 2];
        let m = train_svc(&x, &y, &[5], &SvmParams { c: 1e-4, gamma: None, epsilon: 0.1 }).unwrap();
        assert!(m.predict(&[0.0]).is_ok());
        assert!(train_svc(&x, &[1, 1, 1, 1], &[5], &SvmParams::classifier()).is_err());
        let nan = vec![vec![f64::NAN], vec![0.0]];
        assert!(train_svc(&nan, &[1, 2], &[5], &SvmParams::classifier()).is_err());
    }

    #[test]
    fn decision_values_match_kernel_expansion() {
        let (x, y) = blobs(7, 10, 1.5);
        let model = train_svc(&x, &y, &[0, 1], &SvmParams { c: 0.25, gamma: None, epsilon: 0.1 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let q = vec![rng.random_range(-2.0..6.0), rng.random_range(-2.0..6.0)];
            let got = model.decision_values(&q).unwrap();
            let zq: Vec<f64> = (0..2).map(|k| (q[k] - model.scaler.mean[k]) / model.scaler.std[k]).collect();
            for (m, g) in model.machines.iter().zip(got) {
                let mut s = 0.0;
                for (sv, c) in m.support_vectors.iter().zip(&m.coef) {
                    let d2: f64 = sv.iter().zip(&zq).map(|(a, b)| (a - b).powi(2)).sum();
                    s += c * (-model.gamma * d2).exp();
                }
                assert!((s - m.rho - g).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn support_vector_of_hard_margin_model_keeps_label() {
        let x = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![3.0, 0.0], vec![3.0, 1.0]];
        let y = vec![1u8, 1, 2, 2];
        let m = train_svc(&x, &y, &[0, 1], &SvmParams { c: 1e6, gamma: None, epsilon: 0.1 }).unwrap();
        assert!(!m.machines[0].support_vectors.is_empty());
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(m.predict(xi).unwrap(), *yi as f64);
        }
    }

    #[test]
    fn regression_constant_and_linear() {
        let x: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 49.0]).collect();
        let flat = train_svr(&x, &vec![2.5; 50], &[0], &SvmParams::regressor()).unwrap();
        for xi in &x {
            assert!((flat.predict(xi).unwrap() - 2.5).abs() <= 0.1 + 1e-9);
        }
        let z: Vec<f64> = x.iter().map(|r| 3.0 * r[0] - 1.0).collect();
        let params = SvmParams { c: 10.0, gamma: None, epsilon: 0.1 };
        let lin = train_svr(&x, &z, &[0], &params).unwrap();
        let mse: f64 = x.iter().zip(&z).map(|(xi, zi)| (lin.predict(xi).unwrap() - zi).powi(2)).sum::<f64>() / 50.0;
        assert!(mse.sqrt() < 0.1, "rmse {}", mse.sqrt());
        let sol = solve_svr(&x, &z, 10.0, 1.0, 0.1, true).unwrap();
        assert!(sol.objective.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        assert!(sol.alpha.iter().all(|a| (0.0..=10.0).contains(a)));
    }

    #[test]
    fn model_json_round_trip() {
        let (x, y) = blobs(9, 6, 1.0);
        let m = train_svc(&x, &y, &[3, 7], &SvmParams::classifier()).unwrap();
        let back = SvmModel::parse(&m.to_json()).unwrap();
        assert_eq!(back, m);
        let r = train_svr(&x, &y.iter().map(|v| *v as f64).collect::<Vec<_>>(), &[3, 7], &SvmParams::regressor()).unwrap();
        assert_eq!(SvmModel::parse(&r.to_json()).unwrap(), r);
        assert!(SvmModel::parse(&m.to_json().replace("\"version\": 1", "\"version\": 9")).is_err());
        assert!(m.predict(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn random_binary_problems_satisfy_kkt(
            pts in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, proptest::bool::ANY), 4..30),
            c in prop_oneof![Just(0.03125), Just(0.25), Just(1.0), Just(20.0)],
        ) {
            let mut x: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.0, p.1]).collect();
            let mut y: Vec<f64> = pts.iter().map(|p| if p.2 { 1.0 } else { -1.0 }).collect();
            x.push(vec![9.0, 9.0]);
            y.push(1.0);
            x.push(vec![-9.0, -9.0]);
            y.push(-1.0);
            let sol = solve_svc(&x, &y, c, 0.5, true).unwrap();
            assert_kkt(&x, &y, &sol, c, 0.5);
        }
    }
}
