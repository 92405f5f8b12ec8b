use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::Args;
use prolif_core::bench::{
    cohort_specs, detector_patches, graded_slide_spec, two_step_experiment, CohortParams, DetectorDataParams,
    TwoStepParams,
};
use prolif_core::detect::{
    build_stage1_dataset, build_stage2_dataset, detections_to_jsonl, mine_false_positives, parse_detections_jsonl,
    train_reference_learner, AnnotatedPatch, Provenance,
};
use prolif_core::eval::{match_detections, write_slide_csv, MatchResult, MetricsReport, SlideEval};
use prolif_core::patches::{self, PatchRef};
use prolif_core::pipeline::{
    self as pl, Models, PipelineConfig, SlideResult, CONFIG_FILE, DETECTIONS_FILE, DETECT_DIR, FEATURES_DIR,
    FEATURES_FILE, NORMALIZE_DIR, PATCHES_DIR, PATCHES_FILE, RESULT_FILE, ROIS_DIR, ROIS_FILE, TISSUE_DIR,
    WARNINGS_FILE,
};
use prolif_core::roi::SortedRoiList;
use prolif_core::scoring::{
    self, cross_validate, join_labels, parse_features_csv, parse_labels_csv, select_features, write_features_csv,
    write_labels_csv, FeatureRow, LabelRow, Metric, Predictor, SvmKind, SvmParams, N_FEATURES,
};
use prolif_core::synth::{generate_synthetic_slide, GroundTruth, SyntheticSlideSpec};
use prolif_core::{pnm, Error};

use crate::{CliError, CliResult, MetricArg, ModelKind};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    Ok(fs::read_to_string(path).map_err(io_err(path))?)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(fs::write(path, text).map_err(io_err(path))?)
}

/// Writes to `out` when given, else to stdout.
fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn snapshot_config(run: &Path, cfg: &PipelineConfig) -> CliResult<()> {
    write_text(&run.join(CONFIG_FILE), &cfg.to_json())
}

fn parse_indices(text: &str) -> CliResult<Vec<usize>> {
    if text.trim() == "all" {
        return Ok((0..N_FEATURES).collect());
    }
    text.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad feature index {t:?} in {text:?}")))
        })
        .collect()
}

fn parse_floats(text: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|t| t.trim().parse().map_err(|_| CliError::Usage(format!("bad number {t:?} in {text:?}"))))
        .collect()
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Seed for every random draw.
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Slide spec JSON; its seed is replaced by --seed.
    #[arg(long, conflicts_with_all = ["grade", "cohort"])]
    spec: Option<PathBuf>,
    /// Planted grade (1..=3) of a single cohort-style slide.
    #[arg(long, conflicts_with = "cohort")]
    grade: Option<u8>,
    /// Slide index within its grade.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Slides per grade; each goes to its own subdirectory.
    #[arg(long)]
    cohort: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    width: usize,
    #[arg(long, default_value_t = 2000)]
    height: usize,
    /// Level-0 resolution of generated slides.
    #[arg(long = "slide-mpp", default_value_t = 0.5)]
    slide_mpp: f64,
}

fn label_row(spec: &SyntheticSlideSpec) -> LabelRow {
    LabelRow {
        slide: spec.slide_id.clone(),
        score_class: spec.score_class,
        score_continuous: spec.score_continuous,
    }
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    let params = CohortParams {
        width: a.width,
        height: a.height,
        mpp: a.slide_mpp,
        seed: a.seed,
        ..CohortParams::default()
    };
    let specs = if let Some(path) = &a.spec {
        let mut spec: SyntheticSlideSpec = serde_json::from_str(&read_text(path)?)
            .map_err(|e| Error::Format {
                what: "slide spec",
                reason: e.to_string(),
            })?;
        spec.seed = a.seed;
        vec![(spec, a.out.clone())]
    } else if let Some(n) = a.cohort {
        cohort_specs(&CohortParams {
            slides_per_grade: n,
            ..params
        })?
        .into_iter()
        .map(|s| {
            let dir = a.out.join(&s.slide_id);
            (s, dir)
        })
        .collect()
    } else {
        let grade = a
            .grade
            .ok_or_else(|| CliError::Usage("synth needs one of --spec, --grade or --cohort".into()))?;
        vec![(graded_slide_spec(grade, a.index, &params)?, a.out.clone())]
    };
    use rayon::prelude::*;
    specs
        .par_iter()
        .map(|(spec, dir)| {
            let (manifest, truth) = generate_synthetic_slide(spec, dir)?;
            log::info!("{}: {} nuclei, {} mitoses -> {}", spec.slide_id, truth.cells.len(), truth.mitoses.len(), manifest.display());
            Ok(())
        })
        .collect::<prolif_core::Result<Vec<()>>>()?;
    let labels: Vec<LabelRow> = specs.iter().map(|(s, _)| label_row(s)).collect();
    write_text(&a.out.join("labels.csv"), &write_labels_csv(&labels))
}

#[derive(Debug, Args)]
pub struct SlideRun {
    /// Slide manifest.json.
    #[arg(long)]
    slide: PathBuf,
    /// Run directory holding the stage outputs.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunOnly {
    #[arg(long)]
    run: PathBuf,
}

pub fn tissue(a: &SlideRun, cfg: &PipelineConfig) -> CliResult<()> {
    snapshot_config(&a.run, cfg)?;
    let slide = cfg.open(&a.slide)?;
    let (mask, doc) = pl::tissue_stage(&slide, cfg)?;
    log::info!("{} tissue blobs", doc.blobs.len());
    pl::write_tissue(&a.run.join(TISSUE_DIR), &mask, &doc)?;
    Ok(())
}

fn read_patches(run: &Path) -> CliResult<Vec<PatchRef>> {
    Ok(patches::parse_jsonl(&read_text(&run.join(PATCHES_DIR).join(PATCHES_FILE))?)?)
}

fn read_rois(run: &Path, stage_dir: &str) -> CliResult<SortedRoiList> {
    Ok(SortedRoiList::parse(&read_text(&run.join(stage_dir).join(ROIS_FILE))?)?)
}

pub fn patches(a: &SlideRun, cfg: &PipelineConfig) -> CliResult<()> {
    snapshot_config(&a.run, cfg)?;
    let slide = cfg.open(&a.slide)?;
    let (mask, doc) = pl::read_tissue(&a.run.join(TISSUE_DIR))?;
    let found = pl::patches_stage(&slide, &mask, &doc, cfg)?;
    log::info!("{} candidate patches", found.len());
    write_text(&a.run.join(PATCHES_DIR).join(PATCHES_FILE), &patches::to_jsonl(&found))
}

pub fn rois(a: &SlideRun, cfg: &PipelineConfig) -> CliResult<()> {
    snapshot_config(&a.run, cfg)?;
    let slide = cfg.open(&a.slide)?;
    let found = read_patches(&a.run)?;
    let ranked = pl::rois_stage(&slide, &found, cfg)?;
    write_text(&a.run.join(ROIS_DIR).join(ROIS_FILE), &ranked.to_json())
}

pub fn normalize(a: &SlideRun, cfg: &PipelineConfig) -> CliResult<()> {
    snapshot_config(&a.run, cfg)?;
    let slide = cfg.open(&a.slide)?;
    let ranked = read_rois(&a.run, ROIS_DIR)?;
    let target = cfg.target()?;
    let (pixmaps, warnings) = pl::normalize_stage(&slide, &ranked, &target, cfg)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    pl::write_normalized(&a.run.join(NORMALIZE_DIR), &ranked, &pixmaps, &warnings)?;
    Ok(())
}

pub fn detect(a: &RunOnly, cfg: &PipelineConfig) -> CliResult<()> {
    snapshot_config(&a.run, cfg)?;
    let ranked = read_rois(&a.run, ROIS_DIR)?;
    let (pixmaps, _) = pl::read_normalized(&a.run.join(NORMALIZE_DIR), &ranked)?;
    let detector = cfg.detector.build()?;
    let (counted, detections) = pl::detect_stage(detector.as_ref(), &ranked, &pixmaps, &cfg.detection)?;
    log::info!("{} detections", detections.len());
    let dir = a.run.join(DETECT_DIR);
    write_text(&dir.join(ROIS_FILE), &counted.to_json())?;
    write_text(&dir.join(DETECTIONS_FILE), &detections_to_jsonl(&detections))
}

#[derive(Debug, Args)]
pub struct ScoreMapArgs {
    /// Binary PPM patch, or `-` for stdin.
    #[arg(long)]
    patch: PathBuf,
}

pub fn score_map(a: &ScoreMapArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let patch = if a.patch.as_os_str() == "-" {
        let mut bytes = Vec::new();
        std::io::stdin().read_to_end(&mut bytes).map_err(io_err(Path::new("<stdin>")))?;
        pnm::decode(&bytes)?
    } else {
        pnm::read(&a.patch)?
    };
    let detector = cfg.detector.build()?;
    let map = detector.score_map(&patch)?;
    println!("{}", map.to_json());
    Ok(())
}

/// Normalized ROIs of a run with the annotated mitoses that fall inside them,
/// in ROI-local pixels. Patch ids are ROI indices.
fn annotated_rois(run: &Path, truth: &GroundTruth) -> CliResult<Vec<AnnotatedPatch>> {
    let ranked = read_rois(run, ROIS_DIR)?;
    if ranked.slide != truth.slide_id {
        return Err(Error::InvalidArgument(format!(
            "run holds slide {} but the ground truth is for {}",
            ranked.slide, truth.slide_id
        ))
        .into());
    }
    let (pixmaps, _) = pl::read_normalized(&run.join(NORMALIZE_DIR), &ranked)?;
    Ok(ranked
        .rois
        .iter()
        .zip(pixmaps)
        .map(|(r, pixmap)| AnnotatedPatch {
            id: r.index,
            pixmap,
            mitoses: local_points(&truth.mitoses, r.patch(&ranked.slide)),
        })
        .collect())
}

fn local_points(points: &[[f64; 2]], patch: PatchRef) -> Vec<[f64; 2]> {
    let (x0, y0) = patch.origin();
    let side = patch.side as f64;
    points
        .iter()
        .map(|m| [m[0] - x0 as f64, m[1] - y0 as f64])
        .filter(|m| (0.0..side).contains(&m[0]) && (0.0..side).contains(&m[1]))
        .collect()
}

#[derive(Debug, Args)]
pub struct MineArgs {
    /// Run directory with normalized ROIs.
    #[arg(long)]
    run: PathBuf,
    /// Ground-truth JSON of the run's slide.
    #[arg(long)]
    ground_truth: PathBuf,
    /// Output JSONL; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn mine_negatives(a: &MineArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let truth = GroundTruth::load(&a.ground_truth)?;
    let rois = annotated_rois(&a.run, &truth)?;
    let detector = cfg.detector.build()?;
    let fps = mine_false_positives(detector.as_ref(), &rois, &cfg.detection, cfg.match_radius)?;
    let mut text = String::new();
    for fp in &fps {
        text.push_str(&serde_json::to_string(fp).expect("false positive serializes"));
        text.push('\n');
    }
    emit(a.out.as_deref(), &text)
}

#[derive(Debug, Args)]
pub struct TrainDetectorArgs {
    #[arg(long)]
    seed: u64,
    /// Trained (second-step) detector JSON.
    #[arg(long)]
    out: PathBuf,
    /// Training report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// `RUN_DIR=GROUND_TRUTH_JSON` pair; repeat for more slides. Without any,
    /// trains and validates on freshly rendered synthetic slides.
    #[arg(long)]
    annotated: Vec<String>,
    /// Synthetic training slides (ignored with --annotated).
    #[arg(long, default_value_t = 6)]
    slides: usize,
}

pub fn train_detector(a: &TrainDetectorArgs) -> CliResult<()> {
    let params = TwoStepParams {
        seed: a.seed,
        ..TwoStepParams::default()
    };
    let (detector, report) = if a.annotated.is_empty() {
        let data = DetectorDataParams {
            slides: a.slides,
            seed: a.seed,
            ..DetectorDataParams::default()
        };
        let train = detector_patches(&data, 0)?;
        let val = detector_patches(
            &DetectorDataParams {
                seed: a.seed.wrapping_add(1),
                slides: a.slides.div_ceil(2).max(1),
                ..data
            },
            train.len(),
        )?;
        let (_, det, report) = two_step_experiment(&train, &val, &params)?;
        log::info!("validation F1 {:.3} -> {:.3}", report.stage1.f1, report.stage2.f1);
        (det, serde_json::to_string_pretty(&report).expect("report serializes"))
    } else {
        let mut patches = Vec::new();
        for pair in &a.annotated {
            let (run, gt) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--annotated expects RUN=GROUND_TRUTH, got {pair:?}")))?;
            let truth = GroundTruth::load(Path::new(gt))?;
            let offset = patches.len();
            patches.extend(annotated_rois(Path::new(run), &truth)?.into_iter().enumerate().map(|(k, mut p)| {
                p.id = offset + k;
                p
            }));
        }
        let stage1 = build_stage1_dataset(&patches, params.window, params.normals_per_patch, params.match_radius, params.seed)?;
        let det1 = train_reference_learner(&stage1, &params.learner)?;
        let fps = mine_false_positives(&det1, &patches, &params.detect, params.match_radius)?;
        let positives = stage1.count(Provenance::GroundTruth);
        let n_new = if fps.is_empty() {
            0
        } else {
            (params.new_normals_per_positive * positives as f64).round() as usize
        };
        let stage2 = build_stage2_dataset(&stage1, &fps, &patches, n_new, params.aug_translation_max, params.window, params.seed.wrapping_add(1))?;
        let det2 = train_reference_learner(&stage2, &params.learner)?;
        let report = serde_json::json!({
            "stage1_samples": stage1.samples.len(),
            "stage2_samples": stage2.samples.len(),
            "positives": positives,
            "mined_false_positives": fps.len(),
        });
        (det2, serde_json::to_string_pretty(&report).expect("report serializes"))
    };
    write_text(&a.out, &detector.to_json())?;
    if let Some(p) = &a.report {
        write_text(p, &report)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    /// Run directories with detection output.
    #[arg(long, required = true, num_args = 1..)]
    run: Vec<PathBuf>,
    /// Combined features CSV over all runs.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn featurize(a: &FeaturizeArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let mut rows = Vec::new();
    for run in &a.run {
        let counted = read_rois(run, DETECT_DIR)?;
        let features = pl::features_stage(&counted, cfg)?;
        let row = FeatureRow {
            slide: counted.slide.clone(),
            features,
        };
        write_text(&run.join(FEATURES_DIR).join(FEATURES_FILE), &write_features_csv(std::slice::from_ref(&row)))?;
        rows.push(row);
    }
    if let Some(out) = &a.out {
        write_text(out, &write_features_csv(&rows))?;
    }
    Ok(())
}

fn load_dataset(features: &Path, labels: &Path) -> CliResult<Vec<(FeatureRow, LabelRow)>> {
    let f = parse_features_csv(&read_text(features)?)?;
    let l = parse_labels_csv(&read_text(labels)?)?;
    Ok(join_labels(&f, &l)?)
}

fn kind_setup(kind: ModelKind, cfg: &PipelineConfig) -> (SvmKind, SvmParams, Vec<usize>) {
    match kind {
        ModelKind::Svc => (SvmKind::Classifier, cfg.svc, cfg.classification_subset.clone()),
        ModelKind::Svr => (SvmKind::Regressor, cfg.svr, cfg.regression_subset.clone()),
    }
}

fn targets(data: &[(FeatureRow, LabelRow)], kind: ModelKind) -> Vec<f64> {
    data.iter()
        .map(|(_, l)| match kind {
            ModelKind::Svc => l.score_class as f64,
            ModelKind::Svr => l.score_continuous,
        })
        .collect()
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Features CSV (`slide,f0,...,f20`).
    #[arg(long)]
    features: PathBuf,
    /// Labels CSV (`slide,score_class,score_continuous`).
    #[arg(long)]
    labels: PathBuf,
    /// Recorded for reproducible runs; the solver itself draws no random numbers.
    #[arg(long)]
    seed: u64,
    /// Model JSON.
    #[arg(long)]
    out: PathBuf,
    /// SVM C, replacing the configured value.
    #[arg(long)]
    c: Option<f64>,
    /// Comma-separated feature indices, or `all`.
    #[arg(long)]
    subset: Option<String>,
}

pub fn train(a: &TrainArgs, kind: ModelKind, cfg: &PipelineConfig) -> CliResult<()> {
    let data = load_dataset(&a.features, &a.labels)?;
    let (svm_kind, mut params, mut subset) = kind_setup(kind, cfg);
    if let Some(c) = a.c {
        params.c = c;
    }
    if let Some(s) = &a.subset {
        subset = parse_indices(s)?;
    }
    log::info!("training {svm_kind:?} on {} slides, seed {}", data.len(), a.seed);
    let x: Vec<_> = data.iter().map(|(f, _)| f.features).collect();
    let model = pl::train_model(svm_kind, &x, &targets(&data, kind), &subset, &params)?;
    write_text(&a.out, &model.to_json())
}

fn metric_for(m: Option<MetricArg>, kind: ModelKind) -> Metric {
    match (m, kind) {
        (Some(MetricArg::Accuracy), _) => Metric::Accuracy,
        (Some(MetricArg::Kappa), _) => Metric::Kappa,
        (Some(MetricArg::Spearman), _) => Metric::Spearman,
        (Some(MetricArg::NegRmse), _) => Metric::NegRmse,
        (None, ModelKind::Svc) => Metric::Kappa,
        (None, ModelKind::Svr) => Metric::Spearman,
    }
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_enum)]
    kind: ModelKind,
    /// Seed of the fold assignment.
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    subset: Option<String>,
    /// Defaults to kappa for svc and spearman for svr.
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn cv(a: &CvArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let data = load_dataset(&a.features, &a.labels)?;
    let (svm_kind, mut params, mut subset) = kind_setup(a.kind, cfg);
    if let Some(c) = a.c {
        params.c = c;
    }
    if let Some(s) = &a.subset {
        subset = parse_indices(s)?;
    }
    let x = data
        .iter()
        .map(|(f, _)| select_features(&f.features, &subset))
        .collect::<prolif_core::Result<Vec<_>>>()?;
    let y = targets(&data, a.kind);
    let result = cross_validate(&x, &y, a.folds, a.seed, metric_for(a.metric, a.kind), |tx, ty| {
        let model = match svm_kind {
            SvmKind::Classifier => {
                let labels: Vec<u8> = ty.iter().map(|v| *v as u8).collect();
                scoring::train_svc(tx, &labels, &subset, &params)?
            }
            SvmKind::Regressor => scoring::train_svr(tx, ty, &subset, &params)?,
        };
        Ok(Box::new(model) as Box<dyn Predictor>)
    })?;
    let mut text = serde_json::to_string_pretty(&result).expect("cv result serializes");
    text.push('\n');
    emit(a.out.as_deref(), &text)
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_enum)]
    kind: ModelKind,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Candidate subset (comma-separated indices or `all`); repeat for more.
    /// Defaults to the configured subset for the kind and all 21 features.
    #[arg(long)]
    candidate: Vec<String>,
    /// Comma-separated C values.
    #[arg(long, default_value = "0.03125,0.25")]
    c_grid: String,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn feature_search(a: &SearchArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let data = load_dataset(&a.features, &a.labels)?;
    let (svm_kind, params, subset) = kind_setup(a.kind, cfg);
    let candidates = if a.candidate.is_empty() {
        vec![subset, (0..N_FEATURES).collect()]
    } else {
        a.candidate.iter().map(|c| parse_indices(c)).collect::<CliResult<Vec<_>>>()?
    };
    let x: Vec<Vec<f64>> = data.iter().map(|(f, _)| f.features.to_vec()).collect();
    let result = scoring::feature_search(
        &x,
        &targets(&data, a.kind),
        &candidates,
        &parse_floats(&a.c_grid)?,
        svm_kind,
        &params,
        a.folds,
        a.seed,
        metric_for(a.metric, a.kind),
    )?;
    let mut text = serde_json::to_string_pretty(&result).expect("search result serializes");
    text.push('\n');
    emit(a.out.as_deref(), &text)
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Featurized run directory.
    #[arg(long)]
    run: PathBuf,
    /// Classifier model JSON from `train-svc`.
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Regressor model JSON from `train-svr`.
    #[arg(long)]
    regressor: Option<PathBuf>,
}

pub fn predict(a: &PredictArgs) -> CliResult<()> {
    let models = Models::load(a.classifier.as_deref(), a.regressor.as_deref())?;
    let rows = parse_features_csv(&read_text(&a.run.join(FEATURES_DIR).join(FEATURES_FILE))?)?;
    let [row] = rows.as_slice() else {
        return Err(Error::Format {
            what: "features csv",
            reason: format!("run features hold {} rows, expected 1", rows.len()),
        }
        .into());
    };
    let n_patches = read_patches(&a.run)?.len();
    let counted = read_rois(&a.run, DETECT_DIR)?;
    let warnings_path = a.run.join(NORMALIZE_DIR).join(WARNINGS_FILE);
    let warnings: Vec<String> = serde_json::from_str(&read_text(&warnings_path)?).map_err(|e| Error::Format {
        what: "warnings",
        reason: e.to_string(),
    })?;
    let result = pl::build_result(&row.slide, &row.features, &models, n_patches, &counted, warnings)?;
    write_text(&a.run.join(RESULT_FILE), &result.to_json())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directories with a result.json.
    #[arg(long, required = true, num_args = 1..)]
    run: Vec<PathBuf>,
    /// Reference labels CSV.
    #[arg(long)]
    labels: PathBuf,
    /// Ground-truth JSON files; detections are scored on runs whose slide has one.
    #[arg(long, num_args = 1..)]
    ground_truth: Vec<PathBuf>,
    /// Directory for metrics.json and slides.csv; metrics go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn detection_counts(run: &Path, truth: &GroundTruth, radius: f64) -> CliResult<MatchResult> {
    let counted = read_rois(run, DETECT_DIR)?;
    let detections = parse_detections_jsonl(&read_text(&run.join(DETECT_DIR).join(DETECTIONS_FILE))?)?;
    let mut total = MatchResult::default();
    for r in &counted.rois {
        let dets: Vec<[f64; 2]> = detections.iter().filter(|d| d.patch_index == r.index).map(|d| [d.x, d.y]).collect();
        let truths = local_points(&truth.mitoses, r.patch(&counted.slide));
        total.merge(&match_detections(&dets, &truths, radius)?);
    }
    Ok(total)
}

pub fn evaluate(a: &EvaluateArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let labels = parse_labels_csv(&read_text(&a.labels)?)?;
    let truths = a.ground_truth.iter().map(|p| GroundTruth::load(p)).collect::<prolif_core::Result<Vec<_>>>()?;
    let mut slides = Vec::new();
    let mut detection: Option<MatchResult> = None;
    for run in &a.run {
        let result = SlideResult::parse(&read_text(&run.join(RESULT_FILE))?)?;
        let label = labels
            .iter()
            .find(|l| l.slide == result.slide)
            .ok_or_else(|| Error::InvalidArgument(format!("no label for slide {}", result.slide)))?;
        let pred_class = result
            .score_class
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no class prediction", run.display())))?;
        slides.push(SlideEval {
            slide: result.slide.clone(),
            true_class: label.score_class,
            pred_class,
            true_continuous: label.score_continuous,
            pred_continuous: result.score_continuous.unwrap_or(f64::NAN),
        });
        if let Some(truth) = truths.iter().find(|t| t.slide_id == result.slide) {
            let m = detection_counts(run, truth, cfg.match_radius)?;
            detection.get_or_insert_with(MatchResult::default).merge(&m);
        }
    }
    let report = MetricsReport::from_slides(&slides, detection.as_ref());
    let mut text = report.to_json();
    text.push('\n');
    match &a.out {
        Some(dir) => {
            write_text(&dir.join("metrics.json"), &text)?;
            write_text(&dir.join("slides.csv"), &write_slide_csv(&slides))
        }
        None => emit(None, &text),
    }
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Slide manifest.json.
    #[arg(long)]
    slide: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    regressor: Option<PathBuf>,
}

pub fn pipeline(a: &PipelineArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let models = Models::load(a.classifier.as_deref(), a.regressor.as_deref())?;
    let result = pl::run_pipeline(&a.slide, cfg, &models, &a.run)?;
    log::info!("{}: class {:?}, score {:?}", result.slide, result.score_class, result.score_continuous);
    Ok(())
}
