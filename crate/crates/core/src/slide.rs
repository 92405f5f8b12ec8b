//! Tiled multi-resolution slide stored as a JSON manifest plus P6 tiles.
//!
//! Layout of a slide directory:
//!
//! ```text
//! slide/
//!   manifest.json        level table, microns per pixel, tile size
//!   L0_r0_c0.ppm         tile (row 0, column 0) of level 0
//!   ...
//!   ground_truth.json    only for synthetic slides
//! ```
//!
//! Tiles are `tile_size` square except along the right and bottom edges,
//! where they are cropped to the level bounds.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pixmap::Pixmap;
use crate::pnm;

pub const MANIFEST_FORMAT: &str = "prolif-slide";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Pixels read outside a level take this value.
pub const OUTSIDE_FILL: u8 = 255;

const TILE_CACHE_CAPACITY: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelInfo {
    pub width: usize,
    pub height: usize,
    /// Level-0 pixels per pixel of this level.
    pub downsample: f64,
    pub rows: usize,
    pub cols: usize,
}

/// On-disk manifest document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub slide_id: String,
    pub mpp_x: f64,
    pub mpp_y: f64,
    pub tile_size: usize,
    pub levels: Vec<LevelInfo>,
}

pub fn tile_file_name(level: usize, row: usize, col: usize) -> String {
    format!("L{level}_r{row}_c{col}.ppm")
}

impl Manifest {
    /// Checks every structural invariant that does not need the tile files.
    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::format("slide manifest", r));
        if self.format != MANIFEST_FORMAT {
            return bad(format!("unknown format {:?}", self.format));
        }
        if self.version != MANIFEST_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if !(self.mpp_x > 0.0 && self.mpp_x.is_finite() && self.mpp_y > 0.0 && self.mpp_y.is_finite()) {
            return bad("mpp must be positive".into());
        }
        if self.tile_size == 0 || self.tile_size > 1 << 15 {
            return bad(format!("tile_size {} out of range", self.tile_size));
        }
        if self.levels.is_empty() {
            return bad("no levels".into());
        }
        if self.levels[0].downsample != 1.0 {
            return bad("level 0 must have downsample 1".into());
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.width == 0 || l.height == 0 || l.width.saturating_mul(l.height) > pnm::MAX_PIXELS * 64 {
                return bad(format!("level {i} has invalid size {}x{}", l.width, l.height));
            }
            if !l.downsample.is_finite() {
                return bad(format!("level {i} downsample not finite"));
            }
            if i > 0 && l.downsample <= self.levels[i - 1].downsample {
                return bad(format!("level {i} downsample does not increase"));
            }
            if l.rows != l.height.div_ceil(self.tile_size) || l.cols != l.width.div_ceil(self.tile_size) {
                return bad(format!("level {i} tile grid does not match its size"));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest =
            serde_json::from_str(text).map_err(|e| Error::format("slide manifest", e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// An opened slide. Immutable apart from an internal tile cache, so it can be
/// shared between worker threads.
#[derive(Debug)]
pub struct SlidePyramid {
    pub slide_id: String,
    pub levels: Vec<LevelInfo>,
    pub mpp_x: f64,
    pub mpp_y: f64,
    pub tile_size: usize,
    pub manifest_path: PathBuf,
    dir: PathBuf,
    cache: Mutex<HashMap<(usize, usize, usize), Arc<Pixmap>>>,
}

/// Opens a slide and verifies every tile's presence and dimensions.
pub fn open_slide(manifest_path: &Path) -> Result<SlidePyramid> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = Manifest::parse(&text)?;
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let ts = manifest.tile_size;
    for (li, level) in manifest.levels.iter().enumerate() {
        for r in 0..level.rows {
            for c in 0..level.cols {
                let path = dir.join(tile_file_name(li, r, c));
                if !path.exists() {
                    return Err(Error::MissingTile(path));
                }
                let h = pnm::read_header(&path)?;
                let want_w = ts.min(level.width - c * ts);
                let want_h = ts.min(level.height - r * ts);
                if h.channels != 3 || h.width != want_w || h.height != want_h {
                    return Err(Error::format(
                        "slide tile",
                        format!(
                            "{} is {}x{}x{}, expected {want_w}x{want_h}x3",
                            path.display(),
                            h.width,
                            h.height,
                            h.channels
                        ),
                    ));
                }
            }
        }
    }
    Ok(SlidePyramid {
        slide_id: manifest.slide_id,
        levels: manifest.levels,
        mpp_x: manifest.mpp_x,
        mpp_y: manifest.mpp_y,
        tile_size: manifest.tile_size,
        manifest_path: manifest_path.to_path_buf(),
        dir,
        cache: Mutex::new(HashMap::new()),
    })
}

impl SlidePyramid {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            slide_id: self.slide_id.clone(),
            mpp_x: self.mpp_x,
            mpp_y: self.mpp_y,
            tile_size: self.tile_size,
            levels: self.levels.clone(),
        }
    }

    /// Mean of the two axis resolutions; the pipeline assumes square pixels.
    pub fn mpp(&self) -> f64 {
        0.5 * (self.mpp_x + self.mpp_y)
    }

    pub fn dimensions(&self) -> (usize, usize) {
        (self.levels[0].width, self.levels[0].height)
    }

    fn tile(&self, level: usize, row: usize, col: usize) -> Result<Arc<Pixmap>> {
        let key = (level, row, col);
        if let Some(t) = self.cache.lock().expect("tile cache poisoned").get(&key) {
            return Ok(Arc::clone(t));
        }
        let path = self.dir.join(tile_file_name(level, row, col));
        if !path.exists() {
            return Err(Error::MissingTile(path));
        }
        let tile = Arc::new(pnm::read(&path)?);
        let mut cache = self.cache.lock().expect("tile cache poisoned");
        if cache.len() >= TILE_CACHE_CAPACITY {
            cache.clear();
        }
        cache.insert(key, Arc::clone(&tile));
        Ok(tile)
    }

    /// Reads a `w`×`h` RGB region whose top-left corner is `(x, y)` in the
    /// pixel coordinates of `level`. Pixels outside the level are white.
    pub fn read_region(&self, level: usize, x: i64, y: i64, w: usize, h: usize) -> Result<Pixmap> {
        let info = *self
            .levels
            .get(level)
            .ok_or_else(|| Error::invalid(format!("level {level} out of range (have {})", self.levels.len())))?;
        if w == 0 || h == 0 {
            return Err(Error::invalid("zero-area region"));
        }
        let mut out = Pixmap::filled_rgb(w, h, [OUTSIDE_FILL; 3]);
        let x0 = x.max(0);
        let y0 = y.max(0);
        let x1 = (x + w as i64).min(info.width as i64);
        let y1 = (y + h as i64).min(info.height as i64);
        if x0 >= x1 || y0 >= y1 {
            return Ok(out);
        }
        let ts = self.tile_size as i64;
        for row in (y0 / ts)..=((y1 - 1) / ts) {
            for col in (x0 / ts)..=((x1 - 1) / ts) {
                let tile = self.tile(level, row as usize, col as usize)?;
                let tx0 = col * ts;
                let ty0 = row * ts;
                let ix0 = x0.max(tx0);
                let ix1 = x1.min(tx0 + tile.width() as i64);
                let iy0 = y0.max(ty0);
                let iy1 = y1.min(ty0 + tile.height() as i64);
                let n = ((ix1 - ix0) * 3) as usize;
                for yy in iy0..iy1 {
                    let src = (((yy - ty0) as usize) * tile.width() + (ix0 - tx0) as usize) * 3;
                    let dst = (((yy - y) as usize) * w + (ix0 - x) as usize) * 3;
                    out.data_mut()[dst..dst + n].copy_from_slice(&tile.data()[src..src + n]);
                }
            }
        }
        Ok(out)
    }

    /// Whole level as one pixmap.
    pub fn read_level(&self, level: usize) -> Result<Pixmap> {
        let info = *self
            .levels
            .get(level)
            .ok_or_else(|| Error::invalid(format!("level {level} out of range")))?;
        self.read_region(level, 0, 0, info.width, info.height)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_slide(dir: &Path, w: usize, h: usize, ts: usize) -> Manifest {
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            slide_id: "t".into(),
            mpp_x: 0.5,
            mpp_y: 0.5,
            tile_size: ts,
            levels: vec![
                LevelInfo { width: w, height: h, downsample: 1.0, rows: h.div_ceil(ts), cols: w.div_ceil(ts) },
                LevelInfo {
                    width: w.div_ceil(2),
                    height: h.div_ceil(2),
                    downsample: 2.0,
                    rows: h.div_ceil(2).div_ceil(ts),
                    cols: w.div_ceil(2).div_ceil(ts),
                },
            ],
        };
        for (li, l) in manifest.levels.iter().enumerate() {
            for r in 0..l.rows {
                for c in 0..l.cols {
                    let tw = ts.min(l.width - c * ts);
                    let th = ts.min(l.height - r * ts);
                    let mut data = Vec::with_capacity(tw * th * 3);
                    for y in 0..th {
                        for x in 0..tw {
                            let gx = c * ts + x;
                            let gy = r * ts + y;
                            data.extend_from_slice(&[(gx % 251) as u8, (gy % 241) as u8, li as u8]);
                        }
                    }
                    let p = Pixmap::from_raw(tw, th, 3, data).unwrap();
                    pnm::write(&dir.join(tile_file_name(li, r, c)), &p).unwrap();
                }
            }
        }
        std::fs::write(dir.join(MANIFEST_FILE), manifest.to_json()).unwrap();
        manifest
    }

    #[test]
    fn opens_two_level_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let m = write_slide(tmp.path(), 70, 50, 32);
        let s = open_slide(&tmp.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(s.levels.len(), 2);
        assert_eq!(s.manifest(), m);
    }

    #[test]
    fn missing_tile_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        write_slide(tmp.path(), 70, 50, 32);
        std::fs::remove_file(tmp.path().join("L0_r1_c2.ppm")).unwrap();
        let err = open_slide(&tmp.path().join(MANIFEST_FILE)).unwrap_err();
        assert!(matches!(err, Error::MissingTile(_)), "{err}");
        assert!(err.to_string().contains("missing tile"));
    }

    #[test]
    fn wrong_tile_size_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        write_slide(tmp.path(), 70, 50, 32);
        pnm::write(&tmp.path().join("L0_r0_c0.ppm"), &Pixmap::filled_rgb(31, 32, [0; 3])).unwrap();
        assert!(matches!(
            open_slide(&tmp.path().join(MANIFEST_FILE)),
            Err(Error::Format { what: "slide tile", .. })
        ));
    }

    #[test]
    fn malformed_manifest_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join(MANIFEST_FILE);
        std::fs::write(&p, "{\"format\": 1}").unwrap();
        assert!(matches!(open_slide(&p), Err(Error::Format { .. })));
        assert!(matches!(open_slide(&tmp.path().join("nope.json")), Err(Error::Io { .. })));
    }

    #[test]
    fn region_reads() {
        let tmp = tempfile::tempdir().unwrap();
        write_slide(tmp.path(), 70, 50, 32);
        let s = open_slide(&tmp.path().join(MANIFEST_FILE)).unwrap();
        // 1x1 read at a known pixel.
        let p = s.read_region(0, 40, 33, 1, 1).unwrap();
        assert_eq!(p.pixel(0, 0), &[40, 33, 0]);
        // Straddling the right edge: out-of-bounds columns are white.
        let p = s.read_region(0, 66, 10, 8, 2).unwrap();
        for x in 0..8 {
            let want: &[u8] = if x < 4 { &[(66 + x) as u8, 10, 0] } else { &[255, 255, 255] };
            assert_eq!(p.pixel(x, 0), want);
        }
        // Pure function of its arguments.
        assert_eq!(s.read_region(0, -5, -5, 40, 40).unwrap(), s.read_region(0, -5, -5, 40, 40).unwrap());
        assert!(s.read_region(2, 0, 0, 1, 1).is_err());
        assert!(s.read_region(0, 0, 0, 0, 3).is_err());
    }

    #[test]
    fn full_level_read_matches_stitched_tiles() {
        let tmp = tempfile::tempdir().unwrap();
        write_slide(tmp.path(), 70, 50, 32);
        let s = open_slide(&tmp.path().join(MANIFEST_FILE)).unwrap();
        let l = s.levels[1];
        let full = s.read_level(1).unwrap();
        let mut stitched = Pixmap::filled_rgb(l.width, l.height, [0; 3]);
        for r in 0..l.rows {
            for c in 0..l.cols {
                let t = pnm::read(&tmp.path().join(tile_file_name(1, r, c))).unwrap();
                stitched.blit(&t, c * 32, r * 32);
            }
        }
        assert_eq!(full, stitched);
    }
}
