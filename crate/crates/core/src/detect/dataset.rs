//! Training sets for the two-step procedure and false-positive mining.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{detect_mitoses, DetectParams, Detector};
use crate::error::{Error, Result};
use crate::pixmap::Pixmap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    RandomNormal,
    MinedFalsePositive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patch: Pixmap,
    /// True for mitosis.
    pub label: bool,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingDataset {
    pub samples: Vec<Sample>,
}

impl TrainingDataset {
    pub fn count(&self, provenance: Provenance) -> usize {
        self.samples.iter().filter(|s| s.provenance == provenance).count()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label).count()
    }

    pub fn negatives(&self) -> usize {
        self.samples.len() - self.positives()
    }
}

/// A patch with known mitosis centers in patch-local pixels.
#[derive(Debug, Clone)]
pub struct AnnotatedPatch {
    pub id: usize,
    pub pixmap: Pixmap,
    pub mitoses: Vec<[f64; 2]>,
}

/// `side`×`side` crop centered as close to `(cx, cy)` as the patch allows.
pub fn crop_window(pixmap: &Pixmap, cx: f64, cy: f64, side: usize) -> Result<Pixmap> {
    if pixmap.width() < side || pixmap.height() < side {
        return Err(Error::invalid(format!(
            "patch {}x{} smaller than crop side {side}",
            pixmap.width(),
            pixmap.height()
        )));
    }
    let x0 = (cx - side as f64 / 2.0).round().clamp(0.0, (pixmap.width() - side) as f64) as i64;
    let y0 = (cy - side as f64 / 2.0).round().clamp(0.0, (pixmap.height() - side) as f64) as i64;
    Ok(pixmap.crop_padded(x0, y0, side, side, 255))
}

/// First-step dataset: one crop per annotated mitosis and `normals_per_patch`
/// crops at uniformly drawn positions at least `min_distance` from every
/// mitosis center.
pub fn build_stage1_dataset(
    patches: &[AnnotatedPatch],
    side: usize,
    normals_per_patch: usize,
    min_distance: f64,
    seed: u64,
) -> Result<TrainingDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for p in patches {
        for m in &p.mitoses {
            samples.push(Sample {
                patch: crop_window(&p.pixmap, m[0], m[1], side)?,
                label: true,
                provenance: Provenance::GroundTruth,
            });
        }
    }
    for p in patches {
        let (w, h) = (p.pixmap.width() as f64, p.pixmap.height() as f64);
        let mut drawn = 0;
        let mut attempts = 0;
        while drawn < normals_per_patch && attempts < 1000 * normals_per_patch.max(1) {
            attempts += 1;
            let x = rng.random_range(0.0..w);
            let y = rng.random_range(0.0..h);
            if p.mitoses.iter().any(|m| (m[0] - x).hypot(m[1] - y) < min_distance) {
                continue;
            }
            samples.push(Sample {
                patch: crop_window(&p.pixmap, x, y, side)?,
                label: false,
                provenance: Provenance::RandomNormal,
            });
            drawn += 1;
        }
    }
    Ok(TrainingDataset { samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FalsePositive {
    pub patch: usize,
    pub x: f64,
    pub y: f64,
    pub p: f64,
}

/// Detections farther than `match_radius` from every annotated mitosis.
pub fn mine_false_positives(
    detector: &dyn Detector,
    patches: &[AnnotatedPatch],
    params: &DetectParams,
    match_radius: f64,
) -> Result<Vec<FalsePositive>> {
    if !(match_radius >= 0.0) {
        return Err(Error::invalid("match_radius must be non-negative"));
    }
    let mut out = Vec::new();
    for p in patches {
        let map = detector.score_map(&p.pixmap)?;
        for d in detect_mitoses(&map, params)? {
            let matched = p.mitoses.iter().any(|m| (m[0] - d.x).hypot(m[1] - d.y) <= match_radius);
            if !matched {
                out.push(FalsePositive {
                    patch: p.id,
                    x: d.x,
                    y: d.y,
                    p: d.p,
                });
            }
        }
    }
    Ok(out)
}

/// Second-step dataset: every first-step sample plus `n_new_normals` crops
/// taken round-robin around the false positives, each shifted by a uniform
/// offset in `[-aug_translation_max, aug_translation_max]²`. Crops that would
/// leave the patch are pulled back inside.
pub fn build_stage2_dataset(
    stage1: &TrainingDataset,
    fps: &[FalsePositive],
    patches: &[AnnotatedPatch],
    n_new_normals: usize,
    aug_translation_max: f64,
    side: usize,
    seed: u64,
) -> Result<TrainingDataset> {
    let mut out = stage1.clone();
    if n_new_normals == 0 {
        return Ok(out);
    }
    if fps.is_empty() {
        return Err(Error::invalid("no false positives to sample new normals from"));
    }
    if !(aug_translation_max >= 0.0 && aug_translation_max.is_finite()) {
        return Err(Error::invalid("aug_translation_max must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n_new_normals {
        let fp = &fps[k % fps.len()];
        let patch = patches
            .iter()
            .find(|p| p.id == fp.patch)
            .ok_or_else(|| Error::invalid(format!("false positive refers to unknown patch {}", fp.patch)))?;
        let (dx, dy) = if aug_translation_max > 0.0 {
            (
                rng.random_range(-aug_translation_max..=aug_translation_max),
                rng.random_range(-aug_translation_max..=aug_translation_max),
            )
        } else {
            (0.0, 0.0)
        };
        out.samples.push(Sample {
            patch: crop_window(&patch.pixmap, fp.x + dx, fp.y + dy, side)?,
            label: false,
            provenance: Provenance::MinedFalsePositive,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{lview_valid_mask, DetectorGeometry, ScoreMap};

    struct Silent;
    impl Detector for Silent {
        fn geometry(&self) -> DetectorGeometry {
            DetectorGeometry::default()
        }
        fn score_map(&self, patch: &Pixmap) -> Result<ScoreMap> {
            let g = lview_valid_mask(&self.geometry(), patch.width(), patch.height());
            let n = g.rows * g.cols;
            Ok(ScoreMap::from_grid(g, vec![0.0; n]))
        }
    }

    /// Fires with probability 0.9 at three fixed cells.
    struct Fixed;
    impl Detector for Fixed {
        fn geometry(&self) -> DetectorGeometry {
            DetectorGeometry::default()
        }
        fn score_map(&self, patch: &Pixmap) -> Result<ScoreMap> {
            let g = lview_valid_mask(&self.geometry(), patch.width(), patch.height());
            let mut probs = vec![0.0; g.rows * g.cols];
            probs[0] = 0.9;
            probs[2] = 0.9;
            probs[2 * g.cols] = 0.9;
            Ok(ScoreMap::from_grid(g, probs))
        }
    }

    fn annotated(mitoses: Vec<[f64; 2]>) -> AnnotatedPatch {
        AnnotatedPatch {
            id: 7,
            pixmap: Pixmap::filled_rgb(256, 256, [200, 150, 200]),
            mitoses,
        }
    }

    #[test]
    fn silent_detector_mines_nothing() {
        let fps = mine_false_positives(&Silent, &[annotated(vec![])], &DetectParams::default(), 30.0).unwrap();
        assert!(fps.is_empty());
    }

    #[test]
    fn one_of_three_detections_matched() {
        // Detections at (64,64), (192,64), (64,192).
        let fps = mine_false_positives(&Fixed, &[annotated(vec![[80.0, 70.0]])], &DetectParams::default(), 30.0).unwrap();
        assert_eq!(fps.len(), 2);
        assert!(fps.iter().all(|f| f.patch == 7 && (f.x, f.y) != (64.0, 64.0)));
    }

    #[test]
    fn boundary_distance_counts_as_match() {
        let fps = mine_false_positives(&Fixed, &[annotated(vec![[94.0, 64.0]])], &DetectParams::default(), 30.0).unwrap();
        assert_eq!(fps.len(), 2);
    }

    #[test]
    fn crop_is_clamped_inside() {
        let mut pm = Pixmap::filled_rgb(200, 150, [0, 0, 0]);
        pm.pixel_mut(199, 0).copy_from_slice(&[1, 2, 3]);
        let c = crop_window(&pm, 250.0, -40.0, 128).unwrap();
        assert_eq!(c.pixel(127, 0), &[1, 2, 3]);
        assert!(crop_window(&pm, 0.0, 0.0, 151).is_err());
    }

    #[test]
    fn stage2_identity_and_round_robin() {
        let patches = vec![annotated(vec![[100.0, 100.0]])];
        let stage1 = build_stage1_dataset(&patches, 128, 5, 30.0, 1).unwrap();
        assert_eq!((stage1.positives(), stage1.negatives()), (1, 5));
        let same = build_stage2_dataset(&stage1, &[], &patches, 0, 16.0, 128, 1).unwrap();
        assert_eq!(same, stage1);
        let fps: Vec<FalsePositive> = (0..10)
            .map(|i| FalsePositive {
                patch: 7,
                x: 20.0 * i as f64,
                y: 50.0,
                p: 0.8,
            })
            .collect();
        let s2 = build_stage2_dataset(&stage1, &fps, &patches, 50, 16.0, 128, 1).unwrap();
        assert_eq!(s2.count(Provenance::MinedFalsePositive), 50);
        assert_eq!(&s2.samples[..stage1.samples.len()], &stage1.samples[..]);
        assert!(s2.samples[stage1.samples.len()..].iter().all(|s| !s.label && s.patch.width() == 128));
        assert!(build_stage2_dataset(&stage1, &[], &patches, 3, 16.0, 128, 1).is_err());
    }
}
