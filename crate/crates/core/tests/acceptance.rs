//! End-to-end acceptance suite. Prints one line per criterion and exits
//! non-zero if any fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use prolif_core::bench::{
    benchmark_config, cohort_specs, detector_patches, two_step_experiment, CohortParams, DetectorDataParams,
    TwoStepParams,
};
use prolif_core::detect::{
    build_stage1_dataset, build_stage2_dataset, lview_valid_mask, AnnotatedPatch, Detector, DetectorGeometry,
    FalsePositive, LogisticDetector, Provenance,
};
use prolif_core::eval::{quadratic_weighted_kappa, spearman};
use prolif_core::linalg::{self, Vec3};
use prolif_core::pipeline::{run_pipeline, Models, RESULT_FILE};
use prolif_core::scoring::{
    feature_search, rank_bands, select_features, train_svc, Metric, SvmKind, SvmParams, CLASSIFICATION_SUBSET,
};
use prolif_core::stain::{
    estimate_profile, estimate_stain_matrix, normalize_patch, reconstruct, rgb_to_od, MacenkoParams, StainMatrix,
};
use prolif_core::synth::generate_synthetic_slide;
use prolif_core::tissue::otsu_threshold;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(elapsed < limit, format!("{detail}; {:.2?} of {:.0?} allowed", elapsed, limit))
}

/// Exact argmax of the between-class variance, compared as rationals.
fn otsu_oracle(hist: &[u64; 256]) -> u8 {
    let total: u128 = hist.iter().map(|&c| c as u128).sum();
    let sum: u128 = hist.iter().enumerate().map(|(v, &c)| v as u128 * c as u128).sum();
    // Candidate t splits into values < t and values >= t; score is d² / (n0 n1).
    let mut best: Option<(u128, u128, u8)> = None;
    for t in 1..256usize {
        let n0: u128 = hist[..t].iter().map(|&c| c as u128).sum();
        let s0: u128 = hist[..t].iter().enumerate().map(|(v, &c)| v as u128 * c as u128).sum();
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = (n0 * (sum - s0)).abs_diff(n1 * s0);
        let (num, den) = (d * d, n0 * n1);
        let better = match best {
            None => true,
            Some((bn, bd, _)) => num * bd > bn * den,
        };
        if better {
            best = Some((num, den, t as u8));
        }
    }
    best.expect("histogram has two occupied bins").2
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for k in 0..1000 {
        let mut hist = [0u64; 256];
        match k % 3 {
            0 => hist.iter_mut().for_each(|c| *c = rng.random_range(0..1000)),
            1 => {
                for _ in 0..rng.random_range(2..6) {
                    hist[rng.random_range(0..256)] += rng.random_range(1..500);
                }
            }
            _ => {
                let (a, b) = (rng.random_range(20..120usize), rng.random_range(140..240usize));
                for _ in 0..5000 {
                    let centre = if rng.random_bool(0.4) { a } else { b };
                    let v = (centre as i64 + rng.random_range(-25..=25)).clamp(0, 255);
                    hist[v as usize] += 1;
                }
            }
        }
        if hist.iter().filter(|&&c| c > 0).count() < 2 {
            continue;
        }
        let got = otsu_threshold(&hist).map_err(|e| e.to_string())?;
        let want = otsu_oracle(&hist);
        if got != want {
            return Err(format!("histogram {k}: threshold {got}, oracle {want}"));
        }
        checked += 1;
    }
    within(start.elapsed(), Duration::from_secs(5), format!("{checked} histograms agree"))
}

fn random_stain_matrix(rng: &mut ChaCha8Rng) -> StainMatrix {
    let base = StainMatrix::default_he();
    loop {
        let mut h: Vec3 = base.hematoxylin;
        let mut e: Vec3 = base.eosin;
        for v in h.iter_mut().chain(e.iter_mut()) {
            *v = (*v + rng.random_range(-0.12..0.12)).max(0.02);
        }
        let (Some(h), Some(e)) = (linalg::normalized(&h), linalg::normalized(&e)) else {
            continue;
        };
        if h[0] > e[0] && linalg::angle_deg(&h, &e) >= 25.0 {
            if let Ok(m) = StainMatrix::new(h, e) {
                return m;
            }
        }
    }
}

fn concentration_field(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| match rng.random_range(0..10) {
            0..=2 => [rng.random_range(0.3..1.4), 0.0],
            3..=5 => [0.0, rng.random_range(0.3..1.2)],
            6 => [0.0, 0.0],
            _ => [rng.random_range(0.2..1.2), rng.random_range(0.2..1.0)],
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let params = MacenkoParams::default();
    let side = 128;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_angle: f64 = 0.0;
    let mut worst_share: f64 = 1.0;
    for k in 0..100 {
        let truth = random_stain_matrix(&mut rng);
        let conc = concentration_field(&mut rng, side * side);
        let patch = reconstruct(&conc, side, side, &truth, params.i0);
        let od = rgb_to_od(&patch, params.i0).map_err(|e| e.to_string())?;
        let est = estimate_stain_matrix(&od, params.alpha, params.beta).map_err(|e| format!("patch {k}: {e}"))?;
        let angle = linalg::angle_deg(&est.hematoxylin, &truth.hematoxylin).max(linalg::angle_deg(&est.eosin, &truth.eosin));
        worst_angle = worst_angle.max(angle);
        if angle >= 1.0 {
            return Err(format!("patch {k}: stain vectors off by {angle:.3}°"));
        }
        let own = estimate_profile(&patch, &params).map_err(|e| e.to_string())?;
        let out = normalize_patch(&patch, None, &own, &params).map_err(|e| e.to_string())?;
        let close = patch
            .data()
            .chunks_exact(3)
            .zip(out.data().chunks_exact(3))
            .filter(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.abs_diff(*y) <= 2))
            .count();
        let share = close as f64 / (side * side) as f64;
        worst_share = worst_share.min(share);
        if share < 0.99 {
            return Err(format!("patch {k}: only {:.2}% of pixels within ±2", 100.0 * share));
        }
    }
    within(
        start.elapsed(),
        Duration::from_secs(60),
        format!("worst angle {worst_angle:.3}°, worst identity share {:.2}%", 100.0 * worst_share),
    )
}

fn criterion_3() -> Outcome {
    let detector = LogisticDetector::reference();
    let t = detector.geometry.train_input;
    let params = DetectorDataParams {
        slides: 10,
        slide_side: 1024,
        patch_side: 1024,
        seed: 3,
        ..DetectorDataParams::default()
    };
    let patches = detector_patches(&params, 0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut compared = 0;
    for p in &patches {
        let map = detector.score_map(&p.pixmap).map_err(|e| e.to_string())?;
        let valid: Vec<usize> = (0..map.valid.len()).filter(|&k| map.valid[k]).collect();
        if valid.len() < 100 {
            return Err(format!("patch {} has only {} valid cells", p.id, valid.len()));
        }
        for _ in 0..100 {
            let k = valid[rng.random_range(0..valid.len())];
            let (cx, cy) = map.center(k / map.cols, k % map.cols);
            let window = p.pixmap.crop_padded((cx - t / 2) as i64, (cy - t / 2) as i64, t, t, 255);
            let f = detector.features(&window).map_err(|e| e.to_string())?;
            let want = detector.model.prob(&f);
            if map.probs[k].to_bits() != want.to_bits() {
                return Err(format!("patch {} cell ({cx},{cy}): map {} vs window {}", p.id, map.probs[k], want));
            }
            compared += 1;
        }
    }
    check(true, format!("{compared} cells bit-identical over {} patches", patches.len()))
}

fn criterion_4() -> Outcome {
    let g = DetectorGeometry::default();
    let big = lview_valid_mask(&g, 5657, 5657);
    let extent = big.valid_extent();
    let expected = (5657 - 128) / 64 + 1;
    if extent != (expected, expected) || big.valid_count() != expected * expected {
        return Err(format!("5657 px patch: {extent:?} valid cells, expected {expected}x{expected}"));
    }
    let small = lview_valid_mask(&g, 128, 128);
    let cells: Vec<(usize, usize)> = (0..small.rows)
        .flat_map(|i| (0..small.cols).map(move |j| (i, j)))
        .filter(|&(i, j)| small.valid[i * small.cols + j])
        .map(|(i, j)| small.center(i, j))
        .collect();
    check(cells == vec![(64, 64)], format!("{expected}x{expected} cells; 128 px patch cells {cells:?}"))
}

/// Kappa from the pairwise form of the expected disagreement.
fn kappa_oracle(p: &[u8], l: &[u8]) -> f64 {
    let n = p.len() as f64;
    let observed: f64 = p.iter().zip(l).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    let mut chance = 0.0;
    for a in p {
        for b in l {
            chance += (*a as f64 - *b as f64).powi(2);
        }
    }
    1.0 - n * observed / chance
}

/// Rank by counting smaller and equal values.
fn count_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|w| *w < v).count() as f64;
            let equal = x.iter().filter(|w| *w == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (count_ranks(x), count_ranks(y));
    let n = x.len() as f64;
    let tied = |r: &[f64]| r.iter().any(|v| v.fract() != 0.0) || {
        let mut s = r.to_vec();
        s.sort_by(f64::total_cmp);
        s.windows(2).any(|w| w[0] == w[1])
    };
    if !tied(&rx) && !tied(&ry) {
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
    }
    let mean = (n + 1.0) / 2.0;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mean).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - mean).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut fixtures = 0;
    while fixtures < 50 {
        let n = rng.random_range(5..60);
        let l: Vec<u8> = (0..n).map(|_| rng.random_range(1..=3)).collect();
        let p: Vec<u8> = l
            .iter()
            .map(|&v| if rng.random_bool(0.6) { v } else { rng.random_range(1..=3) })
            .collect();
        let ties = fixtures % 2 == 0;
        let x: Vec<f64> = (0..n)
            .map(|_| if ties { rng.random_range(0..8) as f64 } else { rng.random::<f64>() })
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| if ties { (v + rng.random_range(0..4) as f64).floor() } else { v + rng.random_range(-0.5..0.5) })
            .collect();
        let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
        if constant(&x) || constant(&y) || l.iter().all(|v| *v == l[0]) {
            continue;
        }
        let k = quadratic_weighted_kappa(&p, &l, 3).map_err(|e| e.to_string())?;
        let s = spearman(&x, &y).map_err(|e| e.to_string())?;
        let dk = (k - kappa_oracle(&p, &l)).abs();
        let ds = (s - spearman_oracle(&x, &y)).abs();
        worst = worst.max(dk).max(ds);
        if dk > 1e-12 || ds > 1e-12 {
            return Err(format!("fixture {fixtures}: kappa off by {dk:e}, spearman off by {ds:e}"));
        }
        if quadratic_weighted_kappa(&l, &l, 3).map_err(|e| e.to_string())? != 1.0 || spearman(&x, &x).map_err(|e| e.to_string())? != 1.0 {
            return Err(format!("fixture {fixtures}: perfect agreement is not exactly 1"));
        }
        fixtures += 1;
    }
    check(true, format!("{fixtures} fixtures, worst deviation {worst:e}"))
}

fn three_blobs(rng: &mut ChaCha8Rng, per_class: usize, spread: f64) -> (Vec<Vec<f64>>, Vec<u8>) {
    let centers = [[0.0, 0.0, 0.0], [5.0, 0.0, 1.0], [2.0, 5.0, -1.0]];
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..per_class {
            x.push(c.iter().map(|v| v + rng.random_range(-spread..spread)).collect());
            y.push(k as u8 + 1);
        }
    }
    (x, y)
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut machines = 0;
    let mut worst_expansion: f64 = 0.0;
    for (c, spread) in [(0.03125, 3.0), (0.25, 3.0), (1.0, 2.0), (100.0, 2.5), (0.25, 1.0)] {
        let (x, y) = three_blobs(&mut rng, 15, spread);
        let params = SvmParams { c, gamma: None, epsilon: 0.1 };
        let model = train_svc(&x, &y, &[0, 1, 2], &params).map_err(|e| e.to_string())?;
        let z: Vec<Vec<f64>> = x.iter().map(|r| model.scaler.apply(r)).collect();
        for m in &model.machines {
            machines += 1;
            let balance: f64 = m.coef.iter().sum();
            if balance.abs() > 1e-9 {
                return Err(format!("C={c}: sum of y·alpha is {balance:e}"));
            }
            for (zi, yi) in z.iter().zip(&y) {
                if *yi != m.positive && *yi != m.negative {
                    continue;
                }
                let sign = if *yi == m.positive { 1.0 } else { -1.0 };
                let alpha = m
                    .support_vectors
                    .iter()
                    .position(|sv| sv == zi)
                    .map_or(0.0, |k| m.coef[k] * sign);
                let margin = sign * m.decision(zi, model.gamma);
                let tol = 1e-3;
                let ok = if alpha <= 0.0 {
                    margin >= 1.0 - tol
                } else if alpha >= c {
                    margin <= 1.0 + tol
                } else {
                    (margin - 1.0).abs() <= tol
                };
                if !ok || alpha < 0.0 || alpha > c {
                    return Err(format!("C={c}: KKT violated, alpha {alpha}, margin {margin}"));
                }
            }
        }
        for _ in 0..20 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..8.0)).collect();
            let got = model.decision_values(&q).map_err(|e| e.to_string())?;
            let zq: Vec<f64> = (0..3).map(|k| (q[k] - model.scaler.mean[k]) / model.scaler.std[k]).collect();
            for (m, g) in model.machines.iter().zip(got) {
                let mut s = -m.rho;
                for (sv, coef) in m.support_vectors.iter().zip(&m.coef) {
                    let d2: f64 = sv.iter().zip(&zq).map(|(a, b)| (a - b) * (a - b)).sum();
                    s += coef * (-model.gamma * d2).exp();
                }
                worst_expansion = worst_expansion.max((s - g).abs());
            }
        }
    }
    if worst_expansion > 1e-10 {
        return Err(format!("decision values differ from the kernel expansion by {worst_expansion:e}"));
    }
    let (x, y) = three_blobs(&mut rng, 20, 1.0);
    let model = train_svc(&x, &y, &[0, 1, 2], &SvmParams { c: 10.0, gamma: None, epsilon: 0.1 }).map_err(|e| e.to_string())?;
    let correct = x.iter().zip(&y).filter(|(xi, yi)| model.predict(xi).ok() == Some(**yi as f64)).count();
    check(
        correct == x.len(),
        format!("{machines} machines pass KKT, expansion error {worst_expansion:e}, toy accuracy {correct}/{}", x.len()),
    )
}

fn criterion_7() -> Outcome {
    let bands = rank_bands(30);
    check(bands == ((1, 3), (9, 21)), format!("rank_bands(30) = {bands:?}"))
}

fn criterion_8() -> Outcome {
    // 70 annotated mitoses over 10 patches and 18 random normals per patch.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let patches: Vec<AnnotatedPatch> = (0..10)
        .map(|id| AnnotatedPatch {
            id,
            pixmap: prolif_core::Pixmap::filled_rgb(512, 512, [220, 180, 210]),
            mitoses: (0..7).map(|k| [40.0 + 60.0 * k as f64, rng.random_range(40.0..470.0)]).collect(),
        })
        .collect();
    let stage1 = build_stage1_dataset(&patches, 128, 18, 30.0, 8).map_err(|e| e.to_string())?;
    let fps: Vec<FalsePositive> = (0..37)
        .map(|k| FalsePositive {
            patch: k % 10,
            x: rng.random_range(0.0..512.0),
            y: rng.random_range(0.0..512.0),
            p: 0.9,
        })
        .collect();
    let stage2 = build_stage2_dataset(&stage1, &fps, &patches, 100, 8.0, 128, 9).map_err(|e| e.to_string())?;
    let counts = (
        stage1.positives(),
        stage1.negatives(),
        stage2.positives(),
        stage2.negatives(),
        stage2.count(Provenance::MinedFalsePositive),
    );
    check(counts == (70, 180, 70, 280, 100), format!("stage 1 {}/{}, stage 2 {}/{} with {} mined", counts.0, counts.1, counts.2, counts.3, counts.4))
}

struct CohortRun {
    features: Vec<Vec<f64>>,
    grades: Vec<f64>,
    first_manifest: PathBuf,
}

fn run_cohort(dir: &std::path::Path) -> Result<CohortRun, String> {
    let specs = cohort_specs(&CohortParams {
        seed: 42,
        ..CohortParams::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = benchmark_config();
    let results: Vec<Result<(PathBuf, Vec<f64>, f64), String>> = specs
        .par_iter()
        .map(|spec| {
            let slide_dir = dir.join("slides").join(&spec.slide_id);
            let (manifest, _) = generate_synthetic_slide(spec, &slide_dir).map_err(|e| e.to_string())?;
            let res = run_pipeline(&manifest, &cfg, &Models::default(), &dir.join("runs").join(&spec.slide_id))
                .map_err(|e| format!("{}: {e}", spec.slide_id))?;
            Ok((manifest, res.features, spec.score_class as f64))
        })
        .collect();
    let mut run = CohortRun {
        features: Vec::new(),
        grades: Vec::new(),
        first_manifest: PathBuf::new(),
    };
    for (k, r) in results.into_iter().enumerate() {
        let (manifest, f, g) = r?;
        if k == 0 {
            run.first_manifest = manifest;
        }
        run.features.push(f);
        run.grades.push(g);
    }
    Ok(run)
}

fn criterion_9(cohort: &Result<CohortRun, String>, cohort_time: Duration) -> Outcome {
    let start = Instant::now();
    let cohort = cohort.as_ref().map_err(|e| e.clone())?;
    let candidates = vec![CLASSIFICATION_SUBSET.to_vec(), (0..21).collect::<Vec<usize>>()];
    let search = feature_search(
        &cohort.features,
        &cohort.grades,
        &candidates,
        &[0.03125, 0.25],
        SvmKind::Classifier,
        &SvmParams::classifier(),
        10,
        42,
        Metric::Kappa,
    )
    .map_err(|e| e.to_string())?;
    for r in &cohort.features {
        select_features(r, &search.features).map_err(|e| e.to_string())?;
    }
    let train = detector_patches(&DetectorDataParams { seed: 1, ..Default::default() }, 0).map_err(|e| e.to_string())?;
    let val = detector_patches(&DetectorDataParams { seed: 2, ..Default::default() }, 1000).map_err(|e| e.to_string())?;
    let (_, _, report) = two_step_experiment(&train, &val, &TwoStepParams::default()).map_err(|e| e.to_string())?;
    let elapsed = cohort_time + start.elapsed();
    let detail = format!(
        "kappa {:.3} ({} features, C {}); F1 stage 1 {:.3} -> stage 2 {:.3}",
        search.score,
        search.features.len(),
        search.c,
        report.stage1.f1,
        report.stage2.f1
    );
    if search.score < 0.6 || report.stage2.f1 <= report.stage1.f1 {
        return Err(detail);
    }
    within(elapsed, Duration::from_secs(15 * 60), detail)
}

fn criterion_10(cohort: &Result<CohortRun, String>, dir: &std::path::Path) -> Outcome {
    let cohort = cohort.as_ref().map_err(|e| e.clone())?;
    let cfg = benchmark_config();
    let mut outputs = Vec::new();
    for k in 0..2 {
        let run = dir.join(format!("rerun_{k}"));
        run_pipeline(&cohort.first_manifest, &cfg, &Models::default(), &run).map_err(|e| e.to_string())?;
        outputs.push(std::fs::read(run.join(RESULT_FILE)).map_err(|e| e.to_string())?);
    }
    check(outputs[0] == outputs[1], format!("{} byte result on both runs", outputs[0].len()))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut outcomes: Vec<(usize, &str, Outcome, Duration)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let out = f();
        outcomes.push((n, name, out, start.elapsed()));
        let (n, name, out, t) = outcomes.last().unwrap();
        let (tag, detail) = match out {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} criterion {n:>2} {name}: {detail} [{t:.2?}]");
    };
    run(1, "otsu oracle", &criterion_1);
    run(2, "macenko recovery", &criterion_2);
    run(3, "fcn equivalence", &criterion_3);
    run(4, "valid-region geometry", &criterion_4);
    run(5, "metric oracles", &criterion_5);
    run(6, "svm correctness", &criterion_6);
    run(7, "rank bands", &criterion_7);
    run(8, "two-step dataset counts", &criterion_8);
    let start = Instant::now();
    let cohort = run_cohort(dir.path());
    let cohort_time = start.elapsed();
    run(9, "end-to-end separation", &|| criterion_9(&cohort, cohort_time));
    run(10, "determinism", &|| criterion_10(&cohort, dir.path()));
    let failed = outcomes.iter().filter(|o| o.2.is_err()).count();
    println!("{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
