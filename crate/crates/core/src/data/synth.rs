//! Synthetic dermoscopy-like images.
//!
//! Each image is textured skin with one lesion. Class 0 lesions are
//! near-circular with a smooth border; class 1 lesions are elongated with an
//! irregular border and patchier colour. Optional dark hair strokes cross
//! the image without being part of the mask.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_dataset, write_dataset, DatasetManifest, Sample, Split};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::levelset::BinaryMask;
use crate::model::STEM_STRIDE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    /// Side length in pixels; a multiple of 16.
    pub size: usize,
    pub seed: u64,
    /// Share of images written without a mask.
    pub unlabeled_fraction: f64,
    /// Probability that an image carries hair strokes.
    pub hair_probability: f64,
    pub split: Split,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { count: 200, size: 64, seed: 0, unlabeled_fraction: 0.4, hair_probability: 0.25, split: Split::Train }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Contract("synthetic count must be positive".into()));
        }
        if self.size == 0 || !self.size.is_multiple_of(STEM_STRIDE) {
            return Err(Error::Contract(format!("synthetic size {} is not a positive multiple of 16", self.size)));
        }
        if !(0.0..=1.0).contains(&self.unlabeled_fraction) || !(0.0..=1.0).contains(&self.hair_probability) {
            return Err(Error::Contract("fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn num_unlabeled(&self) -> usize {
        (self.count as f64 * self.unlabeled_fraction).round() as usize
    }
}

#[derive(Serialize)]
struct Meta<'a> {
    generator: &'static str,
    seed: u64,
    split: Split,
    config: &'a SynthConfig,
}

/// Generates the dataset in memory. Images are quantised to 8 bits, so they
/// equal what [`synth_generate`] writes and later reads back.
pub fn synth_samples(config: &SynthConfig, exec: Execution) -> Result<Vec<Sample>> {
    config.validate()?;
    let mut order: Vec<usize> = (0..config.count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut has_mask = vec![true; config.count];
    for &i in &order[..config.num_unlabeled()] {
        has_mask[i] = false;
    }
    let indices: Vec<usize> = (0..config.count).collect();
    Ok(exec.map(&indices, |&i| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64 + 1);
        let (image, mask, label) = render(&mut rng, config.size, config.hair_probability);
        Sample { id: format!("synth_{i:05}"), image, mask: has_mask[i].then_some(mask), label }
    }))
}

/// Writes a synthetic dataset in the standard layout plus `meta.json`.
pub fn synth_generate(config: &SynthConfig, root: &Path, exec: Execution) -> Result<DatasetManifest> {
    let samples = synth_samples(config, exec)?;
    write_dataset(root, &samples)?;
    let meta = Meta { generator: "synthetic-lesions-1", seed: config.seed, split: config.split, config };
    fs::write(root.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    load_dataset(root)
}

struct Lesion {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Lesion {
    fn sample(rng: &mut ChaCha8Rng, size: usize, label: usize) -> Self {
        let s = size as f64;
        let (ratio, harmonics) = if label == 0 {
            let ratio = rng.gen_range(1.0..1.12);
            let h = (0..2).map(|_| (rng.gen_range(3..=5) as f64, rng.gen_range(0.0..0.025), rng.gen_range(0.0..2.0 * PI)));
            (ratio, h.collect::<Vec<_>>())
        } else {
            let ratio = rng.gen_range(1.9..2.8);
            let h = (0..3).map(|_| (rng.gen_range(3..=7) as f64, rng.gen_range(0.04..0.09), rng.gen_range(0.0..2.0 * PI)));
            (ratio, h.collect())
        };
        let area = rng.gen_range(0.08..0.32) * s * s;
        let mut b = (area / (PI * ratio)).sqrt();
        let mut a = ratio * b;
        if a > 0.42 * s {
            a = 0.42 * s;
            b = a / ratio;
        }
        let reach = a * (1.0 + harmonics.iter().map(|h| h.1).sum::<f64>());
        let slack = (s / 2.0 - reach - 1.0).max(0.0);
        let angle = rng.gen_range(0.0..PI);
        Self {
            cx: s / 2.0 + rng.gen_range(-1.0..=1.0) * slack,
            cy: s / 2.0 + rng.gen_range(-1.0..=1.0) * slack,
            a,
            b,
            cos: angle.cos(),
            sin: angle.sin(),
            harmonics,
        }
    }

    /// Signed radial margin at pixel centre `(x, y)` in units of the minor axis; positive inside.
    fn margin(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        let rho = (u * u + v * v).sqrt();
        let theta = v.atan2(u);
        let border = 1.0 + self.harmonics.iter().map(|&(k, amp, ph)| amp * (k * theta + ph).cos()).sum::<f64>();
        (border - rho) * self.b
    }
}

/// Low-frequency colour field: a sum of random plane waves in `[-1, 1]`.
struct Waves(Vec<(f64, f64, f64)>);

impl Waves {
    fn sample(rng: &mut ChaCha8Rng, size: usize, n: usize, max_freq: f64) -> Self {
        let s = size as f64;
        Self(
            (0..n)
                .map(|_| {
                    let f = rng.gen_range(0.5..max_freq) * 2.0 * PI / s;
                    let dir = rng.gen_range(0.0..2.0 * PI);
                    (f * dir.cos(), f * dir.sin(), rng.gen_range(0.0..2.0 * PI))
                })
                .collect(),
        )
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.0.iter().map(|&(fx, fy, ph)| (fx * x + fy * y + ph).sin()).sum::<f64>() / self.0.len() as f64
    }
}

fn render(rng: &mut ChaCha8Rng, size: usize, hair_probability: f64) -> (Tensor, BinaryMask, usize) {
    let label = usize::from(rng.gen_bool(0.5));
    let lesion = Lesion::sample(rng, size, label);
    let skin = [0.87, 0.68, 0.58].map(|c: f64| c + rng.gen_range(-0.05..0.05));
    let dark = [0.48, 0.30, 0.22].map(|c: f64| c + rng.gen_range(-0.06..0.06));
    let shading = Waves::sample(rng, size, 2, 1.5);
    let blotches = Waves::sample(rng, size, 3, 4.0);
    let blotch_amp = if label == 0 { 0.05 } else { 0.14 };

    let plane = size * size;
    let mut pixels = vec![0.0; 3 * plane];
    let mask = BinaryMask::from_fn(size, size, |y, x| lesion.margin(x as f64 + 0.5, y as f64 + 0.5) >= 0.0);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let alpha = (lesion.margin(px, py) + 0.5).clamp(0.0, 1.0);
            let shade = 0.04 * shading.at(px, py);
            let blotch = blotch_amp * blotches.at(px, py);
            for c in 0..3 {
                let bg = skin[c] + shade;
                let fg = dark[c] + blotch;
                let noise = rng.gen_range(-0.025..0.025);
                pixels[c * plane + y * size + x] = (1.0 - alpha) * bg + alpha * fg + noise;
            }
        }
    }
    if rng.gen_bool(hair_probability) {
        for _ in 0..rng.gen_range(1..=3) {
            draw_hair(rng, size, &mut pixels);
        }
    }
    let image = Tensor::from_fn(&[3, size, size], |i| f64::from(super::to_byte(pixels[i])) / 255.0);
    (image, mask, label)
}

/// Quadratic Bezier stroke between two random border points.
fn draw_hair(rng: &mut ChaCha8Rng, size: usize, pixels: &mut [f64]) {
    let s = size as f64;
    let mut edge = || match rng.gen_range(0..4) {
        0 => (rng.gen_range(0.0..s), 0.0),
        1 => (rng.gen_range(0.0..s), s - 1.0),
        2 => (0.0, rng.gen_range(0.0..s)),
        _ => (s - 1.0, rng.gen_range(0.0..s)),
    };
    let (p0, p2) = (edge(), edge());
    let p1 = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
    let color = [0.16, 0.11, 0.09];
    let plane = size * size;
    let steps = 4 * size;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (1.0 - t).powi(2) * p0.0 + 2.0 * (1.0 - t) * t * p1.0 + t * t * p2.0;
        let y = (1.0 - t).powi(2) * p0.1 + 2.0 * (1.0 - t) * t * p1.1 + t * t * p2.1;
        let (xi, yi) = (x.round() as usize, y.round() as usize);
        if xi < size && yi < size {
            for (c, col) in color.iter().enumerate() {
                pixels[c * plane + yi * size + xi] = *col;
            }
        }
    }
}

/// Major-to-minor axis ratio of the mask's second moments; 1 for a disc.
pub fn eccentricity(mask: &BinaryMask) -> f64 {
    let (mut n, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                n += 1.0;
                sx += x as f64;
                sy += y as f64;
            }
        }
    }
    if n < 2.0 {
        return 1.0;
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                let (dx, dy) = (x as f64 - mx, y as f64 - my);
                cxx += dx * dx;
                cyy += dy * dy;
                cxy += dx * dy;
            }
        }
    }
    let (cxx, cyy, cxy) = (cxx / n, cyy / n, cxy / n);
    let mean = (cxx + cyy) / 2.0;
    let spread = (((cxx - cyy) / 2.0).powi(2) + cxy * cxy).sqrt();
    let (major, minor) = (mean + spread, (mean - spread).max(1e-12));
    (major / minor).sqrt()
}
