//! Synthetic H&E slides with planted ground truth.
//!
//! Nuclei, mitoses and dark look-alikes ("mimics") are stamped as
//! hematoxylin concentration blobs on an eosin-stained tissue background and
//! rendered through `I = I0 * 10^(-S C)`, so the stain module can invert them.
//!
//! Randomness comes from `ChaCha8Rng::seed_from_u64(seed)` with one stream per
//! purpose: 1 = nuclei, 2 = mitoses, 3 = mimics, 4 = per-pixel noise. Object
//! positions follow an inhomogeneous Poisson process drawn by thinning: a
//! Poisson(λ_max · area) number of uniform candidates over the whole slide,
//! each kept with probability λ(x, y) / λ_max.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pixmap::Pixmap;
use crate::pnm;
use crate::slide::{tile_file_name, LevelInfo, Manifest, MANIFEST_FILE, MANIFEST_FORMAT, MANIFEST_VERSION};
use crate::stain::StainMatrix;

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

const STREAM_CELLS: u64 = 1;
const STREAM_MITOSES: u64 = 2;
const STREAM_MIMICS: u64 = 3;
const STREAM_NOISE: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disc {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Disc {
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

/// Disc inside which the nucleus density differs from the slide default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityRegion {
    #[serde(flatten)]
    pub disc: Disc,
    /// Nuclei per mm² inside the region.
    pub cell_density: f64,
}

/// Stain concentrations and object sizes used by the renderer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Appearance {
    pub cell_radius_um: f64,
    pub mitosis_radius_um: f64,
    pub mimic_radius_um: f64,
    pub h_tissue: f64,
    pub e_tissue: f64,
    pub h_cell: f64,
    pub h_mitosis: f64,
    pub h_mimic: f64,
    /// Standard deviation of per-pixel concentration noise.
    pub noise_sd: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        Self {
            cell_radius_um: 3.5,
            mitosis_radius_um: 5.0,
            mimic_radius_um: 2.2,
            h_tissue: 0.03,
            e_tissue: 0.30,
            h_cell: 0.55,
            h_mitosis: 1.25,
            h_mimic: 1.35,
            noise_sd: 0.03,
        }
    }
}

fn default_tile_size() -> usize {
    512
}

fn default_levels() -> usize {
    4
}

fn default_background() -> [u8; 3] {
    [255, 255, 255]
}

fn default_stain_rows() -> [[f64; 2]; 3] {
    StainMatrix::default_he().to_rows()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSlideSpec {
    pub slide_id: String,
    pub width: usize,
    pub height: usize,
    /// Microns per pixel at level 0 (both axes).
    pub mpp: f64,
    #[serde(default = "default_tile_size")]
    pub tile_size: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_background")]
    pub background: [u8; 3],
    /// Tissue sections; pixels outside every disc are background.
    pub tissue: Vec<Disc>,
    /// Nuclei per mm² of tissue outside density regions.
    pub cell_density: f64,
    #[serde(default)]
    pub density_regions: Vec<DensityRegion>,
    /// Mitoses per mm² where the nucleus density equals `cell_density`;
    /// scales with the local nucleus density elsewhere.
    pub mitosis_density: f64,
    #[serde(default)]
    pub mimic_density: f64,
    /// Rows R, G, B; columns hematoxylin, eosin.
    #[serde(default = "default_stain_rows")]
    pub stain_matrix: [[f64; 2]; 3],
    #[serde(default)]
    pub appearance: Appearance,
    pub score_class: u8,
    pub score_continuous: f64,
    pub seed: u64,
}

impl SyntheticSlideSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.width == 0 || self.height == 0 || self.width.saturating_mul(self.height) > 1 << 30 {
            return bad(format!("slide size {}x{} out of range", self.width, self.height));
        }
        if !(self.mpp > 0.0 && self.mpp.is_finite()) {
            return bad("mpp must be positive".into());
        }
        if self.tile_size == 0 || self.levels == 0 {
            return bad("tile_size and levels must be positive".into());
        }
        let densities = [self.cell_density, self.mitosis_density, self.mimic_density]
            .into_iter()
            .chain(self.density_regions.iter().map(|r| r.cell_density));
        for d in densities {
            if !(d >= 0.0 && d.is_finite()) {
                return bad(format!("density {d} must be finite and non-negative"));
            }
        }
        for d in self.tissue.iter().chain(self.density_regions.iter().map(|r| &r.disc)) {
            if !(d.radius > 0.0 && d.cx.is_finite() && d.cy.is_finite() && d.radius.is_finite()) {
                return bad("disc geometry must be finite with positive radius".into());
            }
        }
        if !(1..=3).contains(&self.score_class) {
            return bad(format!("score_class {} not in 1..=3", self.score_class));
        }
        StainMatrix::from_rows(&self.stain_matrix)?;
        Ok(())
    }

    pub fn stain(&self) -> StainMatrix {
        StainMatrix::from_rows(&self.stain_matrix).expect("validated stain matrix")
    }

    pub fn in_tissue(&self, x: f64, y: f64) -> bool {
        x >= 0.0
            && y >= 0.0
            && x < self.width as f64
            && y < self.height as f64
            && self.tissue.iter().any(|d| d.contains(x, y))
    }

    /// Nucleus density (per mm²) at a level-0 position; zero off tissue.
    pub fn cell_density_at(&self, x: f64, y: f64) -> f64 {
        if !self.in_tissue(x, y) {
            return 0.0;
        }
        self.density_regions
            .iter()
            .find(|r| r.disc.contains(x, y))
            .map_or(self.cell_density, |r| r.cell_density)
    }

    pub fn mitosis_density_at(&self, x: f64, y: f64) -> f64 {
        if self.cell_density <= 0.0 {
            return if self.in_tissue(x, y) { self.mitosis_density } else { 0.0 };
        }
        self.mitosis_density * self.cell_density_at(x, y) / self.cell_density
    }

    fn max_cell_density(&self) -> f64 {
        self.density_regions
            .iter()
            .map(|r| r.cell_density)
            .fold(self.cell_density, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub slide_id: String,
    /// Level-0 centers of ordinary nuclei.
    pub cells: Vec<[f64; 2]>,
    pub mitoses: Vec<[f64; 2]>,
    /// Dark non-mitotic look-alikes.
    #[serde(default)]
    pub mimics: Vec<[f64; 2]>,
    pub score_class: u8,
    pub score_continuous: f64,
}

impl GroundTruth {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("ground truth", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Inhomogeneous Poisson points over `[0,w)×[0,h)` by thinning.
fn poisson_points(
    rng: &mut ChaCha8Rng,
    width: usize,
    height: usize,
    mpp: f64,
    lambda_max: f64,
    lambda: impl Fn(f64, f64) -> f64,
) -> Vec<[f64; 2]> {
    if lambda_max <= 0.0 {
        return Vec::new();
    }
    let area_mm2 = width as f64 * height as f64 * mpp * mpp * 1e-6;
    let mean = lambda_max * area_mm2;
    let n = if mean > 0.0 {
        Poisson::new(mean).expect("positive mean").sample(rng) as u64
    } else {
        0
    };
    let mut out = Vec::new();
    for _ in 0..n {
        let x = rng.random::<f64>() * width as f64;
        let y = rng.random::<f64>() * height as f64;
        let keep = rng.random::<f64>();
        if keep * lambda_max < lambda(x, y) {
            out.push([x, y]);
        }
    }
    out
}

/// Hematoxylin/eosin concentration planes that blobs are stamped onto.
pub struct StainCanvas {
    width: usize,
    height: usize,
    mpp: f64,
    appearance: Appearance,
    tissue: Vec<bool>,
    h: Vec<f32>,
    e: Vec<f32>,
}

impl StainCanvas {
    /// Canvas whose tissue support is given by `in_tissue`.
    pub fn new(width: usize, height: usize, mpp: f64, appearance: Appearance, in_tissue: impl Fn(f64, f64) -> bool) -> Self {
        let mut tissue = vec![false; width * height];
        let mut h = vec![0.0f32; width * height];
        let mut e = vec![0.0f32; width * height];
        for y in 0..height {
            for x in 0..width {
                if in_tissue(x as f64 + 0.5, y as f64 + 0.5) {
                    let i = y * width + x;
                    tissue[i] = true;
                    h[i] = appearance.h_tissue as f32;
                    e[i] = appearance.e_tissue as f32;
                }
            }
        }
        Self {
            width,
            height,
            mpp,
            appearance,
            tissue,
            h,
            e,
        }
    }

    /// Canvas that is tissue everywhere.
    pub fn full(width: usize, height: usize, mpp: f64, appearance: Appearance) -> Self {
        Self::new(width, height, mpp, appearance, |_, _| true)
    }

    fn px(&self, um: f64) -> f64 {
        um / self.mpp
    }

    /// Raises H to at least `value` inside a rotated ellipse.
    fn stamp_ellipse(&mut self, cx: f64, cy: f64, a: f64, b: f64, theta: f64, value: f32) {
        let r = a.max(b).ceil() + 1.0;
        let (s, c) = theta.sin_cos();
        let x0 = (cx - r).floor().max(0.0) as usize;
        let y0 = (cy - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil().max(0.0) as usize).min(self.width);
        let y1 = ((cy + r).ceil().max(0.0) as usize).min(self.height);
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let u = (dx * c + dy * s) / a;
                let v = (-dx * s + dy * c) / b;
                if u * u + v * v <= 1.0 {
                    let i = y * self.width + x;
                    if self.tissue[i] && self.h[i] < value {
                        self.h[i] = value;
                    }
                }
            }
        }
    }

    pub fn stamp_cell(&mut self, rng: &mut impl Rng, cx: f64, cy: f64) {
        let r = self.px(self.appearance.cell_radius_um);
        let a = r * rng.random_range(0.85..1.15);
        let b = r * rng.random_range(0.85..1.15);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let v = self.appearance.h_cell * rng.random_range(0.85..1.15);
        self.stamp_ellipse(cx, cy, a, b, theta, v as f32);
    }

    /// Irregular clump of condensed chromatin.
    pub fn stamp_mitosis(&mut self, rng: &mut impl Rng, cx: f64, cy: f64) {
        let r = self.px(self.appearance.mitosis_radius_um);
        let clumps = rng.random_range(3..=6);
        let v = (self.appearance.h_mitosis * rng.random_range(0.92..1.08)) as f32;
        for _ in 0..clumps {
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let dist = 0.55 * r * rng.random::<f64>().sqrt();
            let a = r * rng.random_range(0.3..0.5);
            let b = r * rng.random_range(0.3..0.5);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            self.stamp_ellipse(cx + dist * ang.cos(), cy + dist * ang.sin(), a, b, theta, v);
        }
    }

    /// Small, round, very dark nucleus.
    pub fn stamp_mimic(&mut self, rng: &mut impl Rng, cx: f64, cy: f64) {
        let r = self.px(self.appearance.mimic_radius_um) * rng.random_range(0.9..1.1);
        let v = (self.appearance.h_mimic * rng.random_range(0.95..1.05)) as f32;
        self.stamp_ellipse(cx, cy, r, r, 0.0, v);
    }

    /// Adds per-pixel noise and renders through the stain matrix.
    pub fn render(mut self, rng: &mut impl Rng, stain: &StainMatrix, background: [u8; 3]) -> Pixmap {
        let sd = self.appearance.noise_sd;
        if sd > 0.0 {
            let normal = Normal::new(0.0, sd).expect("finite sd");
            for i in 0..self.h.len() {
                if self.tissue[i] {
                    self.h[i] = (self.h[i] + normal.sample(rng) as f32).max(0.0);
                    self.e[i] = (self.e[i] + normal.sample(rng) as f32).max(0.0);
                }
            }
        }
        let mut data = Vec::with_capacity(self.width * self.height * 3);
        for i in 0..self.h.len() {
            if self.tissue[i] {
                let od = stain.mix([self.h[i] as f64, self.e[i] as f64]);
                for v in od {
                    data.push((255.0 * 10f64.powf(-v)).round().clamp(0.0, 255.0) as u8);
                }
            } else {
                data.extend_from_slice(&background);
            }
        }
        Pixmap::from_raw(self.width, self.height, 3, data).expect("canvas size")
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Renders level 0 of a synthetic slide in memory.
pub fn render_slide(spec: &SyntheticSlideSpec) -> Result<(Pixmap, GroundTruth)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let lambda_cells = spec.max_cell_density();
    let mut cell_rng = stream(spec.seed, STREAM_CELLS);
    let cells = poisson_points(&mut cell_rng, w, h, spec.mpp, lambda_cells, |x, y| spec.cell_density_at(x, y));
    let mut mit_rng = stream(spec.seed, STREAM_MITOSES);
    let lambda_mit = if spec.cell_density > 0.0 {
        spec.mitosis_density * lambda_cells / spec.cell_density
    } else {
        spec.mitosis_density
    };
    let mitoses = poisson_points(&mut mit_rng, w, h, spec.mpp, lambda_mit, |x, y| spec.mitosis_density_at(x, y));
    let mut mimic_rng = stream(spec.seed, STREAM_MIMICS);
    let mimics = poisson_points(&mut mimic_rng, w, h, spec.mpp, spec.mimic_density, |x, y| {
        if spec.in_tissue(x, y) {
            spec.mimic_density
        } else {
            0.0
        }
    });

    let mut canvas = StainCanvas::new(w, h, spec.mpp, spec.appearance, |x, y| spec.in_tissue(x, y));
    for c in &cells {
        canvas.stamp_cell(&mut cell_rng, c[0], c[1]);
    }
    for m in &mimics {
        canvas.stamp_mimic(&mut mimic_rng, m[0], m[1]);
    }
    for m in &mitoses {
        canvas.stamp_mitosis(&mut mit_rng, m[0], m[1]);
    }
    let mut noise_rng = stream(spec.seed, STREAM_NOISE);
    let pixmap = canvas.render(&mut noise_rng, &spec.stain(), spec.background);
    let truth = GroundTruth {
        slide_id: spec.slide_id.clone(),
        cells,
        mitoses,
        mimics,
        score_class: spec.score_class,
        score_continuous: spec.score_continuous,
    };
    Ok((pixmap, truth))
}

/// Spec of the patch the bundled target stain profile is estimated from:
/// 1024 px of tissue at 0.25 mpp in the default H&E basis.
pub fn reference_target_spec() -> SyntheticSlideSpec {
    SyntheticSlideSpec {
        slide_id: "target-reference".into(),
        width: 1024,
        height: 1024,
        mpp: 0.25,
        tile_size: default_tile_size(),
        levels: 1,
        background: default_background(),
        tissue: vec![Disc {
            cx: 512.0,
            cy: 512.0,
            radius: 2048.0,
        }],
        cell_density: 2500.0,
        density_regions: vec![],
        mitosis_density: 40.0,
        mimic_density: 20.0,
        stain_matrix: default_stain_rows(),
        appearance: Appearance::default(),
        score_class: 2,
        score_continuous: 0.5,
        seed: 2016,
    }
}

/// Halves both dimensions by averaging each 2×2 block (partial blocks at the
/// edges average the available pixels), rounding half up.
pub fn downsample2(src: &Pixmap) -> Pixmap {
    let c = src.channels();
    let w = src.width().div_ceil(2);
    let h = src.height().div_ceil(2);
    let mut data = Vec::with_capacity(w * h * c);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0u32; 3];
            let mut n = 0u32;
            for sy in (2 * y)..(2 * y + 2).min(src.height()) {
                for sx in (2 * x)..(2 * x + 2).min(src.width()) {
                    for (k, v) in src.pixel(sx, sy).iter().enumerate() {
                        acc[k] += *v as u32;
                    }
                    n += 1;
                }
            }
            for a in acc.iter().take(c) {
                data.push(((a + n / 2) / n) as u8);
            }
        }
    }
    Pixmap::from_raw(w, h, c, data).expect("downsampled size")
}

/// Writes a level pyramid of `level0` as tiles plus manifest into `out_dir`.
pub fn write_pyramid(level0: &Pixmap, slide_id: &str, mpp: f64, tile_size: usize, levels: usize, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut infos = Vec::new();
    let mut current = level0.clone();
    for li in 0..levels {
        if li > 0 {
            if current.width() == 1 && current.height() == 1 {
                break;
            }
            current = downsample2(&current);
        }
        let (w, h) = (current.width(), current.height());
        let info = LevelInfo {
            width: w,
            height: h,
            downsample: (1u64 << li) as f64,
            rows: h.div_ceil(tile_size),
            cols: w.div_ceil(tile_size),
        };
        for r in 0..info.rows {
            for c in 0..info.cols {
                let tile = current.crop_padded(
                    (c * tile_size) as i64,
                    (r * tile_size) as i64,
                    tile_size.min(w - c * tile_size),
                    tile_size.min(h - r * tile_size),
                    255,
                );
                pnm::write(&out_dir.join(tile_file_name(li, r, c)), &tile)?;
            }
        }
        infos.push(info);
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        slide_id: slide_id.into(),
        mpp_x: mpp,
        mpp_y: mpp,
        tile_size,
        levels: infos,
    };
    manifest.validate()?;
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Renders a synthetic slide and writes tiles, manifest and ground truth.
pub fn generate_synthetic_slide(spec: &SyntheticSlideSpec, out_dir: &Path) -> Result<(PathBuf, GroundTruth)> {
    let (level0, truth) = render_slide(spec)?;
    let manifest = write_pyramid(&level0, &spec.slide_id, spec.mpp, spec.tile_size, spec.levels, out_dir)?;
    let gt_path = out_dir.join(GROUND_TRUTH_FILE);
    let text = serde_json::to_string(&truth).expect("ground truth serializes");
    std::fs::write(&gt_path, text).map_err(|e| Error::io(&gt_path, e))?;
    Ok((manifest, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide::open_slide;

    pub(crate) fn small_spec() -> SyntheticSlideSpec {
        SyntheticSlideSpec {
            slide_id: "synthetic".into(),
            width: 600,
            height: 500,
            mpp: 0.5,
            tile_size: 128,
            levels: 3,
            background: [255, 255, 255],
            tissue: vec![Disc { cx: 300.0, cy: 250.0, radius: 200.0 }],
            cell_density: 3000.0,
            density_regions: vec![],
            mitosis_density: 200.0,
            mimic_density: 100.0,
            stain_matrix: default_stain_rows(),
            appearance: Appearance::default(),
            score_class: 2,
            score_continuous: 0.5,
            seed: 7,
        }
    }

    #[test]
    fn zero_density_renders_uniform_background() {
        let mut spec = small_spec();
        spec.cell_density = 0.0;
        spec.mitosis_density = 0.0;
        spec.mimic_density = 0.0;
        spec.tissue.clear();
        let (p, gt) = render_slide(&spec).unwrap();
        assert!(gt.cells.is_empty() && gt.mitoses.is_empty());
        assert!(p.data().iter().all(|&v| v == 255));
    }

    #[test]
    fn poisson_count_within_three_sigma() {
        // 1 mm² at 100 nuclei/mm²: 2000 x 2000 px at 0.5 um/px.
        let mut spec = small_spec();
        spec.width = 2000;
        spec.height = 2000;
        spec.tissue = vec![Disc { cx: 1000.0, cy: 1000.0, radius: 5000.0 }];
        spec.cell_density = 100.0;
        spec.mitosis_density = 0.0;
        spec.mimic_density = 0.0;
        for seed in 0..5 {
            spec.seed = seed;
            let (_, gt) = render_slide(&spec).unwrap();
            assert!((70..=130).contains(&gt.cells.len()), "seed {seed}: {}", gt.cells.len());
        }
    }

    #[test]
    fn ground_truth_lies_on_stained_tissue() {
        let spec = small_spec();
        let (p, gt) = render_slide(&spec).unwrap();
        assert!(!gt.mitoses.is_empty());
        for m in gt.mitoses.iter().chain(gt.cells.iter()) {
            assert!(spec.in_tissue(m[0], m[1]));
            assert!(m[0] >= 0.0 && m[1] >= 0.0 && m[0] < 600.0 && m[1] < 500.0);
        }
        for m in &gt.mitoses {
            let px = p.pixel(m[0] as usize, m[1] as usize);
            assert_ne!(px, &[255, 255, 255]);
        }
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let spec = small_spec();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (ma, ga) = generate_synthetic_slide(&spec, a.path()).unwrap();
        let (_, gb) = generate_synthetic_slide(&spec, b.path()).unwrap();
        assert_eq!(ga, gb);
        let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for n in names {
            assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap());
        }
        let slide = open_slide(&ma).unwrap();
        assert_eq!(slide.slide_id, spec.slide_id);
        assert_eq!(slide.mpp_x, spec.mpp);
        assert_eq!(slide.mpp_y, spec.mpp);
        assert_eq!(slide.tile_size, spec.tile_size);
        assert_eq!(slide.levels.len(), spec.levels);
        assert_eq!(slide.dimensions(), (spec.width, spec.height));
        assert_eq!(GroundTruth::load(&a.path().join(GROUND_TRUTH_FILE)).unwrap(), ga);
    }

    #[test]
    fn level_zero_tiles_reassemble_render() {
        let spec = small_spec();
        let tmp = tempfile::tempdir().unwrap();
        let (m, _) = generate_synthetic_slide(&spec, tmp.path()).unwrap();
        let (p, _) = render_slide(&spec).unwrap();
        let slide = open_slide(&m).unwrap();
        assert_eq!(slide.read_level(0).unwrap(), p);
        assert_eq!(slide.read_level(1).unwrap(), downsample2(&p));
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut spec = small_spec();
        spec.cell_density = -1.0;
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.score_class = 4;
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.mpp = 0.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn unwritable_directory_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let file = tmp.path().join("file");
        std::fs::write(&file, "x").unwrap();
        let mut spec = small_spec();
        spec.width = 64;
        spec.height = 64;
        assert!(matches!(generate_synthetic_slide(&spec, &file.join("sub")), Err(Error::Io { .. })));
    }
}
