//! Binary morphology, connected components and distance transforms.

/// Row-major binary image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_subset_of(&self, other: &Bitmap) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }
}

/// Dilation by a `(2r+1)`-square structuring element (Chebyshev radius `r`),
/// computed separably.
pub fn dilate(mask: &Bitmap, r: usize) -> Bitmap {
    if r == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    let mut horiz = Bitmap::new(w, h);
    for y in 0..h {
        // Distance to the most recent set pixel scanning left-to-right and back.
        let row = &mask.bits[y * w..(y + 1) * w];
        let mut last: Option<usize> = None;
        for x in 0..w {
            if row[x] {
                last = Some(x);
            }
            if matches!(last, Some(l) if x - l <= r) {
                horiz.bits[y * w + x] = true;
            }
        }
        let mut next: Option<usize> = None;
        for x in (0..w).rev() {
            if row[x] {
                next = Some(x);
            }
            if matches!(next, Some(n) if n - x <= r) {
                horiz.bits[y * w + x] = true;
            }
        }
    }
    let mut out = Bitmap::new(w, h);
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if horiz.bits[y * w + x] {
                last = Some(y);
            }
            if matches!(last, Some(l) if y - l <= r) {
                out.bits[y * w + x] = true;
            }
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if horiz.bits[y * w + x] {
                next = Some(y);
            }
            if matches!(next, Some(n) if n - y <= r) {
                out.bits[y * w + x] = true;
            }
        }
    }
    out
}

fn invert(mask: &Bitmap) -> Bitmap {
    Bitmap {
        width: mask.width,
        height: mask.height,
        bits: mask.bits.iter().map(|b| !b).collect(),
    }
}

/// Erosion by the same square element; pixels outside the image count as set.
pub fn erode(mask: &Bitmap, r: usize) -> Bitmap {
    invert(&dilate(&invert(mask), r))
}

/// Opening (erosion then dilation) with a square element of radius `r`.
pub fn open(mask: &Bitmap, r: usize) -> Bitmap {
    dilate(&erode(mask, r), r)
}

/// One 8-connected component.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub label: usize,
    pub area: usize,
    /// Inclusive bounding box `(x0, y0, x1, y1)`.
    pub bbox: (usize, usize, usize, usize),
    /// Pixel-center centroid.
    pub centroid: (f64, f64),
}

/// 8-connected component labelling.
///
/// Returns the label image (0 = background, labels from 1 in raster order of
/// first appearance) and per-component statistics indexed by `label - 1`.
pub fn label_components(mask: &Bitmap) -> (Vec<u32>, Vec<Component>) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        let label = comps.len() as u32 + 1;
        labels[start] = label;
        stack.push(start);
        let (mut area, mut sx, mut sy) = (0usize, 0.0f64, 0.0f64);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            area += 1;
            sx += x as f64;
            sy += y as f64;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.bits[j] && labels[j] == 0 {
                        labels[j] = label;
                        stack.push(j);
                    }
                }
            }
        }
        comps.push(Component {
            label: label as usize,
            area,
            bbox: (x0, y0, x1, y1),
            centroid: (sx / area as f64, sy / area as f64),
        });
    }
    (labels, comps)
}

/// Squared 1-D distance transform (Felzenszwalb–Huttenlocher lower envelope).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() && f[v[k]].is_infinite() {
            // Both infinite: keep the earlier parabola; it never wins anyway.
            continue;
        }
        loop {
            let p = v[k];
            let s = if f[p].is_infinite() {
                f64::NEG_INFINITY
            } else if f[q].is_infinite() {
                f64::INFINITY
            } else {
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
            };
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact Euclidean distance from each set pixel to the nearest unset pixel
/// (pixels outside the image count as unset). Unset pixels get 0.
pub fn distance_transform(mask: &Bitmap) -> Vec<f64> {
    let (w, h) = (mask.width, mask.height);
    // Pad by one so the border acts as background.
    let (pw, ph) = (w + 2, h + 2);
    let mut grid = vec![0.0f64; pw * ph];
    for y in 0..h {
        for x in 0..w {
            grid[(y + 1) * pw + x + 1] = if mask.get(x, y) { f64::INFINITY } else { 0.0 };
        }
    }
    let n = pw.max(ph);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..pw {
        for y in 0..ph {
            f[y] = grid[y * pw + x];
        }
        edt_1d(&f[..ph], &mut out[..ph], &mut v, &mut z);
        for y in 0..ph {
            grid[y * pw + x] = out[y];
        }
    }
    for y in 0..ph {
        f[..pw].copy_from_slice(&grid[y * pw..(y + 1) * pw]);
        edt_1d(&f[..pw], &mut out[..pw], &mut v, &mut z);
        grid[y * pw..(y + 1) * pw].copy_from_slice(&out[..pw]);
    }
    let mut dt = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            dt[y * w + x] = grid[(y + 1) * pw + x + 1].sqrt();
        }
    }
    dt
}
