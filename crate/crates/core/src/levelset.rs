//! Signed-distance geometry for masks.
//!
//! The level set of a mask is negative inside the lesion and positive
//! outside. On a pixel grid a foreground pixel takes minus its distance to
//! the nearest background pixel, a background pixel its distance to the
//! nearest foreground pixel, so no pixel sits at zero. Fields are clamped to
//! a truncation radius and divided by it, giving values in `[-1, 1]`.

use crate::diffcore::{stable_sigmoid, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Largest grid the brute-force oracle accepts.
pub const BRUTE_FORCE_LIMIT: usize = 64;

/// Sharpness used when mapping a level set back to a mask.
pub const DEFAULT_K: f64 = 1500.0;

/// Binary lesion mask, 1 = foreground.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::dim("mask", format!("{height}x{width} with {} values", data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Contract(format!("mask value {v} is not binary")));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.data.len() as f64
    }

    /// Class index per pixel, row-major, for cross-entropy targets.
    pub fn targets(&self) -> Vec<usize> {
        self.data.iter().map(|&v| v as usize).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.height, self.width], |i| self.data[i] as f64)
    }

    /// Pixels with probability above `threshold` become foreground.
    pub fn from_probabilities(height: usize, width: usize, probs: &[f64], threshold: f64) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::dim("mask", format!("{height}x{width} with {} values", probs.len())));
        }
        Ok(Self { height, width, data: probs.iter().map(|&p| u8::from(p > threshold)).collect() })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(self.height - 1 - y, x))
    }

    /// Quarter turn counter-clockwise.
    pub fn rot90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        Self::from_fn(w, h, |y, x| self.get(x, w - 1 - y))
    }
}

/// Normalised signed distance field, negative on foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedDistanceField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SignedDistanceField {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.data.clone()).expect("field shape")
    }
}

/// Default truncation radius: half the shorter side, at least one pixel.
pub fn default_radius(height: usize, width: usize) -> f64 {
    (height.min(width) as f64 / 2.0).max(1.0)
}

fn check_nonempty(mask: &BinaryMask) -> Result<()> {
    if mask.height == 0 || mask.width == 0 {
        return Err(Error::Contract("signed distance of a zero-area grid".into()));
    }
    Ok(())
}

/// Value used for every pixel when the mask has only one class.
fn degenerate_field(mask: &BinaryMask) -> Option<Vec<f64>> {
    let fg = mask.foreground_count();
    let n = mask.data.len();
    let r = default_radius(mask.height, mask.width);
    if fg == n {
        Some(vec![-r; n])
    } else if fg == 0 {
        Some(vec![r; n])
    } else {
        None
    }
}

/// Exact signed Euclidean distances, before truncation.
///
/// Uses a separable lower-envelope transform on squared distances, which are
/// integers and therefore exact in `f64`.
pub fn raw_signed_distance(mask: &BinaryMask) -> Result<Vec<f64>> {
    check_nonempty(mask)?;
    if let Some(field) = degenerate_field(mask) {
        return Ok(field);
    }
    let to_background = squared_edt(mask, 0);
    let to_foreground = squared_edt(mask, 1);
    Ok(mask
        .data
        .iter()
        .zip(to_background.iter().zip(&to_foreground))
        .map(|(&m, (&db, &df))| if m == 1 { -db.sqrt() } else { df.sqrt() })
        .collect())
}

/// Pairwise-minimum oracle for [`raw_signed_distance`]. Refuses grids above
/// [`BRUTE_FORCE_LIMIT`] on either side.
pub fn brute_force_signed_distance(mask: &BinaryMask) -> Result<Vec<f64>> {
    check_nonempty(mask)?;
    if mask.height > BRUTE_FORCE_LIMIT || mask.width > BRUTE_FORCE_LIMIT {
        return Err(Error::Contract(format!(
            "brute-force distance limited to {BRUTE_FORCE_LIMIT}x{BRUTE_FORCE_LIMIT}, got {}x{}",
            mask.height, mask.width
        )));
    }
    if let Some(field) = degenerate_field(mask) {
        return Ok(field);
    }
    let (h, w) = (mask.height, mask.width);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let inside = mask.get(y, x);
            let mut best = u64::MAX;
            for yy in 0..h {
                for xx in 0..w {
                    if mask.get(yy, xx) != inside {
                        let dy = y.abs_diff(yy) as u64;
                        let dx = x.abs_diff(xx) as u64;
                        best = best.min(dy * dy + dx * dx);
                    }
                }
            }
            let d = (best as f64).sqrt();
            out[y * w + x] = if inside { -d } else { d };
        }
    }
    Ok(out)
}

/// Truncated, normalised level set of `mask`.
pub fn signed_distance(mask: &BinaryMask, truncation_radius: f64) -> Result<SignedDistanceField> {
    if truncation_radius.is_nan() || truncation_radius < 1.0 {
        return Err(Error::Contract(format!("truncation radius {truncation_radius} below 1")));
    }
    let raw = raw_signed_distance(mask)?;
    let data = if degenerate_field(mask).is_some() {
        raw.iter().map(|v| v.signum()).collect()
    } else {
        raw.iter()
            .map(|v| v.clamp(-truncation_radius, truncation_radius) / truncation_radius)
            .collect()
    };
    Ok(SignedDistanceField { height: mask.height, width: mask.width, data })
}

/// `Sigmoid(-k * L)` recorded on the graph.
///
/// The negation turns the negative-inside level set into a mask with
/// foreground near 1.
pub fn lsf_to_mask(g: &mut Graph, level_set: Var, k: f64) -> Result<Var> {
    if k.is_nan() || k <= 0.0 {
        return Err(Error::Contract(format!("sharpness k must be positive, got {k}")));
    }
    let scaled = g.scale(level_set, -k)?;
    g.sigmoid(scaled)
}

/// Plain-value form of [`lsf_to_mask`].
pub fn lsf_to_mask_values(level_set: &Tensor, k: f64) -> Tensor {
    level_set.map(|v| stable_sigmoid(-k * v))
}

const INF: f64 = f64::INFINITY;

/// Squared distance from every pixel to the nearest pixel whose value equals `feature`.
fn squared_edt(mask: &BinaryMask, feature: u8) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let mut grid: Vec<f64> = mask.data.iter().map(|&v| if v == feature { 0.0 } else { INF }).collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    for x in 0..w {
        line.clear();
        line.extend((0..h).map(|y| grid[y * w + x]));
        lower_envelope(&line, &mut out);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        line.clear();
        line.extend_from_slice(&grid[y * w..(y + 1) * w]);
        lower_envelope(&line, &mut out);
        grid[y * w..(y + 1) * w].copy_from_slice(&out);
    }
    grid
}

/// One-dimensional squared distance transform of sampled function `f`.
#[allow(clippy::needless_range_loop)]
fn lower_envelope(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, INF);
    let mut sites: Vec<usize> = Vec::with_capacity(n);
    let mut bounds: Vec<f64> = Vec::with_capacity(n + 1);
    let intersect = |q: usize, v: usize| {
        let (qf, vf) = (q as f64, v as f64);
        ((f[q] + qf * qf) - (f[v] + vf * vf)) / (2.0 * qf - 2.0 * vf)
    };
    for q in 0..n {
        if f[q] == INF {
            continue;
        }
        if sites.is_empty() {
            sites.push(q);
            bounds.clear();
            bounds.push(-INF);
            bounds.push(INF);
            continue;
        }
        let mut s = intersect(q, *sites.last().unwrap());
        while s <= bounds[sites.len() - 1] {
            sites.pop();
            bounds.pop();
            if sites.is_empty() {
                break;
            }
            s = intersect(q, *sites.last().unwrap());
        }
        if sites.is_empty() {
            sites.push(q);
            bounds.clear();
            bounds.push(-INF);
            bounds.push(INF);
        } else {
            let last = bounds.len() - 1;
            bounds[last] = s;
            sites.push(q);
            bounds.push(INF);
        }
    }
    if sites.is_empty() {
        return;
    }
    let mut k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        while bounds[k + 1] < q as f64 {
            k += 1;
        }
        let v = sites[k];
        let d = q as f64 - v as f64;
        *slot = d * d + f[v];
    }
}
