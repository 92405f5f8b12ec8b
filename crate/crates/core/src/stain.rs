//! Macenko stain estimation and normalization.
//!
//! Pixels are mapped to optical density (OD) space with the Beer–Lambert
//! law, where the contributions of hematoxylin and eosin add linearly. The
//! stain basis is recovered from the plane of the two principal OD
//! directions and the robust angular extremes of the pixels within it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Vec3};
use crate::pixmap::Pixmap;
use crate::stats;

/// Minimum number of OD pixels surviving the transparency filter.
pub const MIN_OD_PIXELS: usize = 100;

/// Ratio λ₂/λ₁ below which the OD cloud is treated as a single stain.
const RANK_RATIO_FLOOR: f64 = 1e-4;

/// Minimum angle between stain columns, in degrees.
pub const MIN_STAIN_ANGLE_DEG: f64 = 1.0;

const DEFAULT_HE_JSON: &str = include_str!("../fixtures/default_he_stain.json");
const DEFAULT_TARGET_JSON: &str = include_str!("../fixtures/target_stain_profile.json");

pub type Od = Vec3;

/// Columns that are already unit length are kept bit-exact so that
/// serialized profiles round-trip.
fn unit(v: &Vec3) -> Option<Vec3> {
    if (linalg::norm(v) - 1.0).abs() <= 1e-12 {
        Some(*v)
    } else {
        linalg::normalized(v)
    }
}

/// Two unit stain vectors in OD space, hematoxylin first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainMatrix {
    pub hematoxylin: Vec3,
    pub eosin: Vec3,
}

impl StainMatrix {
    /// Normalizes both columns and checks the basis invariants.
    pub fn new(hematoxylin: Vec3, eosin: Vec3) -> Result<Self> {
        let h = unit(&hematoxylin).ok_or_else(|| Error::DegenerateStain("zero hematoxylin vector".into()))?;
        let e = unit(&eosin).ok_or_else(|| Error::DegenerateStain("zero eosin vector".into()))?;
        if h.iter().chain(e.iter()).any(|&c| c < 0.0) {
            return Err(Error::invalid("stain vectors must be non-negative"));
        }
        let angle = linalg::angle_deg(&h, &e);
        if angle < MIN_STAIN_ANGLE_DEG {
            return Err(Error::DegenerateStain(format!("stain vectors only {angle:.3}° apart")));
        }
        Ok(Self { hematoxylin: h, eosin: e })
    }

    /// Reference H&E basis used when a patch cannot be estimated on its own.
    pub fn default_he() -> Self {
        let rows: [[f64; 2]; 3] = serde_json::from_str(DEFAULT_HE_JSON).expect("default H&E fixture parses");
        Self::from_rows(&rows).expect("default H&E fixture is valid")
    }

    /// Builds from a 3×2 row-major matrix (rows = R, G, B; columns = H, E).
    pub fn from_rows(rows: &[[f64; 2]; 3]) -> Result<Self> {
        Self::new([rows[0][0], rows[1][0], rows[2][0]], [rows[0][1], rows[1][1], rows[2][1]])
    }

    pub fn to_rows(&self) -> [[f64; 2]; 3] {
        let (h, e) = (self.hematoxylin, self.eosin);
        [[h[0], e[0]], [h[1], e[1]], [h[2], e[2]]]
    }

    /// OD produced by the given concentrations.
    #[inline]
    pub fn mix(&self, c: [f64; 2]) -> Od {
        linalg::add(&linalg::scale(&self.hematoxylin, c[0]), &linalg::scale(&self.eosin, c[1]))
    }

    /// Rows of the least-squares pseudo-inverse (SᵀS)⁻¹Sᵀ.
    pub fn pseudo_inverse(&self) -> [Vec3; 2] {
        let (h, e) = (&self.hematoxylin, &self.eosin);
        let hh = linalg::dot(h, h);
        let he = linalg::dot(h, e);
        let ee = linalg::dot(e, e);
        let det = hh * ee - he * he;
        let r0 = linalg::scale(&linalg::add(&linalg::scale(h, ee), &linalg::scale(e, -he)), 1.0 / det);
        let r1 = linalg::scale(&linalg::add(&linalg::scale(e, hh), &linalg::scale(h, -he)), 1.0 / det);
        [r0, r1]
    }
}

/// Stain basis plus the reference concentration scale of each stain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainProfile {
    pub matrix: StainMatrix,
    /// 99th-percentile concentration of hematoxylin and eosin.
    pub c99: [f64; 2],
    pub i0: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StainProfileDoc {
    stain_matrix: [[f64; 2]; 3],
    c99: [f64; 2],
    i0: f64,
}

impl StainProfile {
    pub fn new(matrix: StainMatrix, c99: [f64; 2], i0: f64) -> Result<Self> {
        if !(c99[0] > 0.0 && c99[1] > 0.0 && c99.iter().all(|c| c.is_finite())) {
            return Err(Error::DegenerateStain(format!("non-positive max concentration {c99:?}")));
        }
        if !(i0 > 0.0 && i0.is_finite()) {
            return Err(Error::invalid("I0 must be positive"));
        }
        Ok(Self { matrix, c99, i0 })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc: StainProfileDoc =
            serde_json::from_str(text).map_err(|e| Error::format("stain profile", e.to_string()))?;
        let matrix = StainMatrix::from_rows(&doc.stain_matrix)
            .map_err(|e| Error::format("stain profile", e.to_string()))?;
        Self::new(matrix, doc.c99, doc.i0).map_err(|e| Error::format("stain profile", e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&StainProfileDoc {
            stain_matrix: self.matrix.to_rows(),
            c99: self.c99,
            i0: self.i0,
        })
        .expect("stain profile serializes")
    }

    /// The checked-in normalization target.
    pub fn default_target() -> Self {
        Self::parse(DEFAULT_TARGET_JSON).expect("target stain fixture is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacenkoParams {
    /// Percentile (in %) for the robust angular extremes.
    pub alpha: f64,
    /// OD magnitude below which pixels count as transparent.
    pub beta: f64,
    pub i0: f64,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.15,
            i0: 255.0,
        }
    }
}

impl MacenkoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 50.0) {
            return Err(Error::invalid(format!("alpha {} not in (0, 50)", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta must be non-negative"));
        }
        if !(self.i0 > 0.0 && self.i0.is_finite()) {
            return Err(Error::invalid("i0 must be positive"));
        }
        Ok(())
    }
}

fn od_lut(i0: f64) -> [f64; 256] {
    let mut lut = [0.0; 256];
    for (v, slot) in lut.iter_mut().enumerate() {
        *slot = -((v.max(1) as f64) / i0).log10();
    }
    lut
}

/// Beer–Lambert transform `OD = -log10(max(I, 1) / I0)` per channel.
pub fn rgb_to_od(pixmap: &Pixmap, i0: f64) -> Result<Vec<Od>> {
    pixmap.require_rgb()?;
    let lut = od_lut(i0);
    Ok(pixmap
        .data()
        .chunks_exact(3)
        .map(|p| [lut[p[0] as usize], lut[p[1] as usize], lut[p[2] as usize]])
        .collect())
}

/// Macenko estimate of the stain basis from OD pixels.
pub fn estimate_stain_matrix(od: &[Od], alpha: f64, beta: f64) -> Result<StainMatrix> {
    if !(0.0..50.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 50)")));
    }
    let kept: Vec<&Od> = od.iter().filter(|v| linalg::norm(v) > beta).collect();
    if kept.len() < MIN_OD_PIXELS {
        return Err(Error::TooFewPixels {
            found: kept.len(),
            required: MIN_OD_PIXELS,
        });
    }
    let n = kept.len() as f64;
    let mut mean = [0.0; 3];
    for v in &kept {
        for c in 0..3 {
            mean[c] += v[c];
        }
    }
    mean = linalg::scale(&mean, 1.0 / n);
    let mut cov = [[0.0; 3]; 3];
    for v in &kept {
        let d = [v[0] - mean[0], v[1] - mean[1], v[2] - mean[2]];
        for i in 0..3 {
            for j in i..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    for i in 0..3 {
        for j in i..3 {
            cov[i][j] /= n - 1.0;
            cov[j][i] = cov[i][j];
        }
    }
    let (vals, vecs) = linalg::symmetric_eigen3(&cov);
    if !(vals[0] > 0.0) || vals[1] <= RANK_RATIO_FLOOR * vals[0] {
        return Err(Error::DegenerateStain(format!(
            "OD covariance is rank deficient (eigenvalues {:.3e}, {:.3e})",
            vals[0], vals[1]
        )));
    }

    // In-plane basis whose first axis is the projected mean OD. Every
    // non-negative OD then has a non-negative first coordinate, so angles
    // stay inside (-pi/2, pi/2] with no wrap-around.
    let (e1, e2) = (vecs[0], vecs[1]);
    let mean_in_plane = linalg::add(
        &linalg::scale(&e1, linalg::dot(&mean, &e1)),
        &linalg::scale(&e2, linalg::dot(&mean, &e2)),
    );
    let u = linalg::normalized(&mean_in_plane)
        .ok_or_else(|| Error::DegenerateStain("mean OD orthogonal to stain plane".into()))?;
    let w = linalg::cross(&linalg::cross(&e1, &e2), &u);

    let mut angles: Vec<f64> = kept
        .iter()
        .map(|v| linalg::dot(v, &w).atan2(linalg::dot(v, &u)))
        .collect();
    angles.sort_by(f64::total_cmp);
    let lo = stats::percentile_sorted(&angles, alpha);
    let hi = stats::percentile_sorted(&angles, 100.0 - alpha);

    let direction = |phi: f64| -> Vec3 {
        let mut v = linalg::add(&linalg::scale(&u, phi.cos()), &linalg::scale(&w, phi.sin()));
        if v.iter().sum::<f64>() < 0.0 {
            v = linalg::scale(&v, -1.0);
        }
        v.map(|c| c.max(0.0))
    };
    let (a, b) = (direction(lo), direction(hi));
    // Hematoxylin absorbs more red light than eosin.
    let (h, e) = if a[0] >= b[0] { (a, b) } else { (b, a) };
    StainMatrix::new(h, e).map_err(|err| match err {
        Error::InvalidArgument(m) => Error::DegenerateStain(m),
        other => other,
    })
}

/// Least-squares stain concentrations per pixel, clamped at zero.
pub fn compute_concentrations(od: &[Od], matrix: &StainMatrix) -> Vec<[f64; 2]> {
    let [p0, p1] = matrix.pseudo_inverse();
    od.iter()
        .map(|v| [linalg::dot(&p0, v).max(0.0), linalg::dot(&p1, v).max(0.0)])
        .collect()
}

/// Estimates a full profile (basis and 99th-percentile concentrations) from a patch.
pub fn estimate_profile(pixmap: &Pixmap, params: &MacenkoParams) -> Result<StainProfile> {
    let od = rgb_to_od(pixmap, params.i0)?;
    let matrix = estimate_stain_matrix(&od, params.alpha, params.beta)?;
    let conc = compute_concentrations(&od, &matrix);
    let c99 = max_concentrations(&conc);
    StainProfile::new(matrix, c99, params.i0)
}

fn max_concentrations(conc: &[[f64; 2]]) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (s, slot) in out.iter_mut().enumerate() {
        let v: Vec<f64> = conc.iter().map(|c| c[s]).collect();
        *slot = stats::percentile(&v, 99.0);
    }
    out
}

/// Renders concentrations back to RGB: `I = I0 * 10^(-S C)`, rounded and clamped.
pub fn reconstruct(conc: &[[f64; 2]], width: usize, height: usize, matrix: &StainMatrix, i0: f64) -> Pixmap {
    let mut data = Vec::with_capacity(conc.len() * 3);
    for c in conc {
        let od = matrix.mix(*c);
        for v in od {
            data.push((i0 * 10f64.powf(-v)).round().clamp(0.0, 255.0) as u8);
        }
    }
    Pixmap::from_raw(width, height, 3, data).expect("reconstruction has matching size")
}

/// Maps a patch onto the target stain appearance.
///
/// When `source` is `None` it is estimated from the patch itself.
pub fn normalize_patch(
    pixmap: &Pixmap,
    source: Option<&StainProfile>,
    target: &StainProfile,
    params: &MacenkoParams,
) -> Result<Pixmap> {
    let source = match source {
        Some(s) => *s,
        None => estimate_profile(pixmap, params)?,
    };
    let od = rgb_to_od(pixmap, source.i0)?;
    let ratio = [target.c99[0] / source.c99[0], target.c99[1] / source.c99[1]];
    let conc: Vec<[f64; 2]> = compute_concentrations(&od, &source.matrix)
        .into_iter()
        .map(|c| [c[0] * ratio[0], c[1] * ratio[1]])
        .collect();
    Ok(reconstruct(&conc, pixmap.width(), pixmap.height(), &target.matrix, target.i0))
}

/// Outcome of [`normalize_or_passthrough`].
#[derive(Debug, Clone)]
pub struct Normalized {
    pub pixmap: Pixmap,
    /// Set when estimation failed and the input was returned unchanged.
    pub warning: Option<String>,
}

/// Normalizes a patch, returning it unmodified with a warning when its
/// stains cannot be estimated, so one bad patch never aborts a slide.
pub fn normalize_or_passthrough(pixmap: &Pixmap, target: &StainProfile, params: &MacenkoParams) -> Result<Normalized> {
    match normalize_patch(pixmap, None, target, params) {
        Ok(p) => Ok(Normalized { pixmap: p, warning: None }),
        Err(e @ (Error::DegenerateStain(_) | Error::TooFewPixels { .. })) => Ok(Normalized {
            pixmap: pixmap.clone(),
            warning: Some(e.to_string()),
        }),
        Err(e) => Err(e),
    }
}
