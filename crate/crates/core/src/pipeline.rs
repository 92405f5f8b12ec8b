//! End-to-end scoring of one slide over a run directory.
//!
//! Every stage writes its output under its own numbered subdirectory and can
//! also be run on its own from those files, which is what the CLI
//! subcommands do. Stages run one after another; work inside a stage is
//! spread over the rayon pool and collected in input order.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{
    detect_mitoses, detections_to_jsonl, DetectParams, DetectionRecord, Detector, DetectorGeometry, LogisticDetector,
    SubprocessDetector,
};
use crate::error::{Error, Result};
use crate::patches::{self, hpf_patch_side, PatchParams, PatchRef};
use crate::pixmap::Pixmap;
use crate::pnm;
use crate::roi::{count_cells, rank_rois, CellCountParams, SortedRoiList};
use crate::scoring::{
    extract_features, validate_indices, write_features_csv, BrThresholds, FeatureRow, FeatureVector21, SvmKind,
    SvmModel, SvmParams, CLASSIFICATION_SUBSET, N_FEATURES, REGRESSION_SUBSET,
};
use crate::slide::{open_slide, SlidePyramid};
use crate::stain::{normalize_or_passthrough, MacenkoParams, StainProfile};
use crate::tissue::{extract_tissue_blobs, BinaryMask, TissueDoc, TissueParams};

pub const CONFIG_FILE: &str = "config.json";
pub const RESULT_FILE: &str = "result.json";
pub const TISSUE_DIR: &str = "01_tissue";
pub const PATCHES_DIR: &str = "02_patches";
pub const ROIS_DIR: &str = "03_rois";
pub const NORMALIZE_DIR: &str = "04_normalize";
pub const DETECT_DIR: &str = "05_detect";
pub const FEATURES_DIR: &str = "06_features";
pub const MASK_FILE: &str = "mask.pgm";
pub const TISSUE_FILE: &str = "tissue.json";
pub const PATCHES_FILE: &str = "patches.jsonl";
pub const ROIS_FILE: &str = "rois.json";
pub const WARNINGS_FILE: &str = "warnings.json";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const FEATURES_FILE: &str = "features.csv";

/// File name of a normalized ROI inside [`NORMALIZE_DIR`].
pub fn normalized_file_name(index: usize) -> String {
    format!("roi_{index:06}.ppm")
}

/// Which mitosis detector scores the ROIs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorChoice {
    /// Built-in hand-set window scorer.
    Reference {},
    /// Window scorer trained with `train-detector`.
    Learned { path: PathBuf },
    /// External program speaking the score-map protocol.
    Plugin {
        command: Vec<String>,
        #[serde(default)]
        geometry: DetectorGeometry,
    },
}

impl Default for DetectorChoice {
    fn default() -> Self {
        DetectorChoice::Reference {}
    }
}

impl DetectorChoice {
    pub fn build(&self) -> Result<Box<dyn Detector>> {
        Ok(match self {
            DetectorChoice::Reference {} => Box::new(LogisticDetector::reference()),
            DetectorChoice::Learned { path } => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Box::new(LogisticDetector::parse(&text)?)
            }
            DetectorChoice::Plugin { command, geometry } => Box::new(SubprocessDetector::new(command.clone(), *geometry)?),
        })
    }
}

fn default_top_k() -> usize {
    30
}

fn default_match_radius() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Replaces the manifest resolution (µm per level-0 pixel).
    pub mpp_override: Option<f64>,
    pub tissue: TissueParams,
    pub patches: PatchParams,
    pub cells: CellCountParams,
    /// Number of ROIs kept per slide.
    pub top_k: usize,
    pub macenko: MacenkoParams,
    /// Stain profile JSON to normalize towards; the bundled target if unset.
    pub target_profile: Option<PathBuf>,
    pub detector: DetectorChoice,
    pub detection: DetectParams,
    /// Distance within which a detection matches an annotated mitosis.
    pub match_radius: f64,
    pub thresholds: BrThresholds,
    pub svc: SvmParams,
    pub svr: SvmParams,
    pub classification_subset: Vec<usize>,
    pub regression_subset: Vec<usize>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mpp_override: None,
            tissue: TissueParams::default(),
            patches: PatchParams::default(),
            cells: CellCountParams::default(),
            top_k: default_top_k(),
            macenko: MacenkoParams::default(),
            target_profile: None,
            detector: DetectorChoice::default(),
            detection: DetectParams::default(),
            match_radius: default_match_radius(),
            thresholds: BrThresholds::default(),
            svc: SvmParams::classifier(),
            svr: SvmParams::regressor(),
            classification_subset: CLASSIFICATION_SUBSET.to_vec(),
            regression_subset: REGRESSION_SUBSET.to_vec(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.mpp_override {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::invalid("mpp_override must be positive"));
            }
        }
        self.tissue.validate()?;
        self.patches.validate()?;
        self.cells.validate()?;
        self.macenko.validate()?;
        self.detection.validate()?;
        self.thresholds.validate()?;
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        if !(self.match_radius >= 0.0 && self.match_radius.is_finite()) {
            return Err(Error::invalid("match_radius must be non-negative"));
        }
        for p in [&self.svc, &self.svr] {
            if !(p.c > 0.0 && p.c.is_finite()) || p.gamma.is_some_and(|g| !(g > 0.0 && g.is_finite())) {
                return Err(Error::invalid("SVM C and gamma must be positive"));
            }
            if !(p.epsilon >= 0.0 && p.epsilon.is_finite()) {
                return Err(Error::invalid("SVM epsilon must be non-negative"));
            }
        }
        validate_indices(&self.classification_subset, N_FEATURES)?;
        validate_indices(&self.regression_subset, N_FEATURES)?;
        match &self.detector {
            DetectorChoice::Plugin { command, geometry } => {
                if command.is_empty() {
                    return Err(Error::invalid("plug-in command is empty"));
                }
                geometry.validate()?;
            }
            DetectorChoice::Learned { path } if path.as_os_str().is_empty() => {
                return Err(Error::invalid("learned detector path is empty"));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::format("pipeline config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn target(&self) -> Result<StainProfile> {
        match &self.target_profile {
            None => Ok(StainProfile::default_target()),
            Some(p) => StainProfile::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        }
    }

    /// Opens a slide, applying the resolution override.
    pub fn open(&self, manifest: &Path) -> Result<SlidePyramid> {
        let mut slide = open_slide(manifest)?;
        if let Some(m) = self.mpp_override {
            slide.mpp_x = m;
            slide.mpp_y = m;
        }
        Ok(slide)
    }

    pub fn patch_side(&self, mpp: f64) -> Result<usize> {
        hpf_patch_side(mpp, self.patches.area_mm2)
    }
}

/// Trained scorers used by the final stage; missing ones leave their score
/// empty.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub classifier: Option<SvmModel>,
    pub regressor: Option<SvmModel>,
}

impl Models {
    pub fn load(classifier: Option<&Path>, regressor: Option<&Path>) -> Result<Self> {
        let read = |p: &Path, kind: SvmKind| -> Result<SvmModel> {
            let m = SvmModel::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?;
            if m.kind != kind {
                return Err(Error::invalid(format!("{} holds a {:?}, expected a {kind:?}", p.display(), m.kind)));
            }
            Ok(m)
        };
        Ok(Self {
            classifier: classifier.map(|p| read(p, SvmKind::Classifier)).transpose()?,
            regressor: regressor.map(|p| read(p, SvmKind::Regressor)).transpose()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideResult {
    pub slide: String,
    pub score_class: Option<u8>,
    pub score_continuous: Option<f64>,
    pub features: Vec<f64>,
    pub patches: usize,
    pub rois: usize,
    pub mitoses: usize,
    pub warnings: Vec<String>,
}

impl SlideResult {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("result serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("slide result", e.to_string()))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn tissue_stage(slide: &SlidePyramid, cfg: &PipelineConfig) -> Result<(BinaryMask, TissueDoc)> {
    let (mask, blobs) = extract_tissue_blobs(slide, &cfg.tissue)?;
    if blobs.is_empty() {
        return Err(Error::Degenerate("no tissue blob above the minimum area".into()));
    }
    let doc = TissueDoc {
        slide: slide.slide_id.clone(),
        level: mask.level,
        downsample: mask.downsample,
        width: mask.width(),
        height: mask.height(),
        blobs,
    };
    Ok((mask, doc))
}

pub fn write_tissue(dir: &Path, mask: &BinaryMask, doc: &TissueDoc) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    mask.write_pgm(&dir.join(MASK_FILE))?;
    write(&dir.join(TISSUE_FILE), doc.to_json())
}

pub fn read_tissue(dir: &Path) -> Result<(BinaryMask, TissueDoc)> {
    let doc = TissueDoc::parse(&read(&dir.join(TISSUE_FILE))?)?;
    let mask = BinaryMask::read_pgm(&dir.join(MASK_FILE), doc.level, doc.downsample)?;
    if (mask.width(), mask.height()) != (doc.width, doc.height) {
        return Err(Error::format("tissue mask", "mask size differs from tissue.json"));
    }
    Ok((mask, doc))
}

pub fn patches_stage(slide: &SlidePyramid, mask: &BinaryMask, doc: &TissueDoc, cfg: &PipelineConfig) -> Result<Vec<PatchRef>> {
    let side = cfg.patch_side(slide.mpp())?;
    let stride = cfg.patches.stride(side);
    let out = patches::sample_patch_centers(
        &slide.slide_id,
        mask,
        &doc.blobs,
        slide.dimensions(),
        side,
        stride,
        cfg.patches.min_tissue_fraction,
    )?;
    if out.is_empty() {
        return Err(Error::Degenerate("no patch fits inside the tissue".into()));
    }
    Ok(out)
}

pub fn read_patch(slide: &SlidePyramid, p: &PatchRef) -> Result<Pixmap> {
    let (x0, y0) = p.origin();
    slide.read_region(0, x0, y0, p.side, p.side)
}

pub fn rois_stage(slide: &SlidePyramid, patches: &[PatchRef], cfg: &PipelineConfig) -> Result<SortedRoiList> {
    let mpp = slide.mpp();
    let counted = patches
        .par_iter()
        .map(|p| {
            let pm = read_patch(slide, p)?;
            let r = count_cells(&pm, p.index, mpp, &cfg.cells, &cfg.macenko)?;
            Ok((p.clone(), r.count))
        })
        .collect::<Result<Vec<_>>>()?;
    rank_rois(&slide.slide_id, &counted, cfg.top_k)
}

/// Normalized ROI pixels in ROI-list order, plus one warning per ROI that
/// was passed through unnormalized.
pub fn normalize_stage(
    slide: &SlidePyramid,
    rois: &SortedRoiList,
    target: &StainProfile,
    cfg: &PipelineConfig,
) -> Result<(Vec<Pixmap>, Vec<String>)> {
    let out = rois
        .rois
        .par_iter()
        .map(|r| {
            let pm = read_patch(slide, &r.patch(&rois.slide))?;
            let n = normalize_or_passthrough(&pm, target, &cfg.macenko)?;
            Ok((n.pixmap, n.warning.map(|w| format!("ROI {}: {w}", r.index))))
        })
        .collect::<Result<Vec<_>>>()?;
    let warnings = out.iter().filter_map(|o| o.1.clone()).collect();
    Ok((out.into_iter().map(|o| o.0).collect(), warnings))
}

pub fn write_normalized(dir: &Path, rois: &SortedRoiList, pixmaps: &[Pixmap], warnings: &[String]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (r, pm) in rois.rois.iter().zip(pixmaps) {
        pnm::write(&dir.join(normalized_file_name(r.index)), pm)?;
    }
    write(&dir.join(WARNINGS_FILE), serde_json::to_string_pretty(warnings).expect("warnings serialize"))
}

pub fn read_normalized(dir: &Path, rois: &SortedRoiList) -> Result<(Vec<Pixmap>, Vec<String>)> {
    let pixmaps = rois
        .rois
        .iter()
        .map(|r| pnm::read(&dir.join(normalized_file_name(r.index))))
        .collect::<Result<Vec<_>>>()?;
    let path = dir.join(WARNINGS_FILE);
    let warnings = if path.exists() {
        serde_json::from_str(&read(&path)?).map_err(|e| Error::format("warnings", e.to_string()))?
    } else {
        Vec::new()
    };
    Ok((pixmaps, warnings))
}

/// Mitosis counts filled into the ROI list, and every detection.
pub fn detect_stage(
    detector: &dyn Detector,
    rois: &SortedRoiList,
    pixmaps: &[Pixmap],
    params: &DetectParams,
) -> Result<(SortedRoiList, Vec<DetectionRecord>)> {
    if pixmaps.len() != rois.rois.len() {
        return Err(Error::DimensionMismatch {
            expected: rois.rois.len(),
            got: pixmaps.len(),
        });
    }
    let per_roi = rois
        .rois
        .par_iter()
        .zip(pixmaps.par_iter())
        .map(|(r, pm)| {
            let map = detector.score_map(pm)?;
            let found = detect_mitoses(&map, params)?;
            Ok(found
                .into_iter()
                .map(|d| DetectionRecord {
                    patch_index: r.index,
                    x: d.x,
                    y: d.y,
                    p: d.p,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = rois.clone();
    for (entry, dets) in out.rois.iter_mut().zip(&per_roi) {
        entry.mitoses = Some(dets.len());
    }
    Ok((out, per_roi.into_iter().flatten().collect()))
}

pub fn features_stage(rois: &SortedRoiList, cfg: &PipelineConfig) -> Result<FeatureVector21> {
    extract_features(rois, &cfg.thresholds)
}

pub fn predict(features: &FeatureVector21, models: &Models) -> Result<(Option<u8>, Option<f64>)> {
    let class = models
        .classifier
        .as_ref()
        .map(|m| m.predict_full(features).map(|v| v as u8))
        .transpose()?;
    let cont = models.regressor.as_ref().map(|m| m.predict_full(features)).transpose()?;
    Ok((class, cont))
}

pub fn build_result(
    slide: &str,
    features: &FeatureVector21,
    models: &Models,
    n_patches: usize,
    rois: &SortedRoiList,
    warnings: Vec<String>,
) -> Result<SlideResult> {
    let (score_class, score_continuous) = predict(features, models)?;
    Ok(SlideResult {
        slide: slide.to_string(),
        score_class,
        score_continuous,
        features: features.to_vec(),
        patches: n_patches,
        rois: rois.rois.len(),
        mitoses: rois.rois.iter().filter_map(|r| r.mitoses).sum(),
        warnings,
    })
}

/// Runs every stage on one slide, writing all intermediates under `run_dir`.
pub fn run_pipeline(manifest: &Path, cfg: &PipelineConfig, models: &Models, run_dir: &Path) -> Result<SlideResult> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    write(&run_dir.join(CONFIG_FILE), cfg.to_json())?;
    let slide = cfg.open(manifest).map_err(|e| e.in_stage("open"))?;
    log::info!("{}: {}x{} px at {} mpp", slide.slide_id, slide.dimensions().0, slide.dimensions().1, slide.mpp());

    let (mask, doc) = tissue_stage(&slide, cfg).map_err(|e| e.in_stage("tissue"))?;
    write_tissue(&run_dir.join(TISSUE_DIR), &mask, &doc)?;

    let patches = patches_stage(&slide, &mask, &doc, cfg).map_err(|e| e.in_stage("patches"))?;
    write(&run_dir.join(PATCHES_DIR).join(PATCHES_FILE), patches::to_jsonl(&patches))?;
    log::info!("{} candidate patches", patches.len());

    let rois = rois_stage(&slide, &patches, cfg).map_err(|e| e.in_stage("rois"))?;
    write(&run_dir.join(ROIS_DIR).join(ROIS_FILE), rois.to_json())?;

    let target = cfg.target().map_err(|e| e.in_stage("normalize"))?;
    let (pixmaps, warnings) = normalize_stage(&slide, &rois, &target, cfg).map_err(|e| e.in_stage("normalize"))?;
    for w in &warnings {
        log::warn!("{w}");
    }
    write_normalized(&run_dir.join(NORMALIZE_DIR), &rois, &pixmaps, &warnings)?;

    let detector = cfg.detector.build().map_err(|e| e.in_stage("detect"))?;
    let (rois, detections) =
        detect_stage(detector.as_ref(), &rois, &pixmaps, &cfg.detection).map_err(|e| e.in_stage("detect"))?;
    let detect_dir = run_dir.join(DETECT_DIR);
    write(&detect_dir.join(ROIS_FILE), rois.to_json())?;
    write(&detect_dir.join(DETECTIONS_FILE), detections_to_jsonl(&detections))?;

    let features = features_stage(&rois, cfg).map_err(|e| e.in_stage("features"))?;
    let row = FeatureRow {
        slide: slide.slide_id.clone(),
        features,
    };
    write(&run_dir.join(FEATURES_DIR).join(FEATURES_FILE), write_features_csv(&[row]))?;

    let result =
        build_result(&slide.slide_id, &features, models, patches.len(), &rois, warnings).map_err(|e| e.in_stage("predict"))?;
    write(&run_dir.join(RESULT_FILE), result.to_json())?;
    Ok(result)
}

/// Trains a classifier or regressor on full feature rows with the
/// configured subset and hyperparameters.
pub fn train_model(kind: SvmKind, x: &[FeatureVector21], y: &[f64], features: &[usize], params: &SvmParams) -> Result<SvmModel> {
    let xs = x
        .iter()
        .map(|r| crate::scoring::select_features(r, features))
        .collect::<Result<Vec<_>>>()?;
    match kind {
        SvmKind::Classifier => {
            let labels: Vec<u8> = y.iter().map(|v| *v as u8).collect();
            crate::scoring::train_svc(&xs, &labels, features, params)
        }
        SvmKind::Regressor => crate::scoring::train_svr(&xs, y, features, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(PipelineConfig::parse(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(PipelineConfig::parse("{}").unwrap(), cfg);
    }

    #[test]
    fn config_rejects_unknown_and_out_of_range() {
        assert!(PipelineConfig::parse(r#"{"top_k": 30, "colour": 1}"#).is_err());
        assert!(PipelineConfig::parse(r#"{"tissue": {"thumb_max_side": 2048, "bogus": 1}}"#).is_err());
        assert!(PipelineConfig::parse(r#"{"top_k": 0}"#).is_err());
        assert!(PipelineConfig::parse(r#"{"detection": {"threshold": 1.5}}"#).is_err());
        assert!(PipelineConfig::parse(r#"{"classification_subset": [0, 0]}"#).is_err());
        assert!(PipelineConfig::parse(r#"{"macenko": {"alpha": 0}}"#).is_err());
        assert!(PipelineConfig::parse(r#"{"detector": {"kind": "plugin", "command": []}}"#).is_err());
        assert!(PipelineConfig::parse(r#"{"detector": {"kind": "reference", "path": "x"}}"#).is_err());
    }

    #[test]
    fn detector_choices_parse() {
        let cfg = PipelineConfig::parse(r#"{"detector": {"kind": "plugin", "command": ["sh", "-c", "cat"]}}"#).unwrap();
        assert!(matches!(cfg.detector, DetectorChoice::Plugin { ref command, .. } if command.len() == 3));
        let cfg = PipelineConfig::parse(r#"{"detector": {"kind": "learned", "path": "d.json"}}"#).unwrap();
        assert_eq!(cfg.detector, DetectorChoice::Learned { path: "d.json".into() });
        assert!(cfg.detector.build().is_err());
    }
}
