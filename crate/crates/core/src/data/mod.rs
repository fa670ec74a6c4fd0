//! Datasets on disk, synthetic lesions, augmentation, batching and test-time variants.
//!
//! Layout: `root/images/<id>.png`, optional `root/masks/<id>.png` (0/255),
//! `root/labels.csv` with header `id,label`, and an optional `meta.json`.

mod augment;
mod sampler;
mod synth;
mod tta;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::levelset::{default_radius, signed_distance, BinaryMask};

pub use augment::{augment_train, AugmentChoice, CROP_SCALES};
pub use sampler::{Batch, TwoStreamSampler};
pub use synth::{eccentricity, synth_generate, synth_samples, SynthConfig};
pub use tta::{tta_sizes, tta_variants, Flip, TtaVariant};

/// One image with its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Present for segmentation-labeled images.
    pub mask: Option<BinaryMask>,
    pub label: usize,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Normalised signed distance of the mask at the default truncation radius.
    pub fn level_set(&self) -> Result<Option<Tensor>> {
        self.mask
            .as_ref()
            .map(|m| Ok(signed_distance(m, default_radius(m.height(), m.width()))?.to_tensor()))
            .transpose()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_with_masks(&self) -> usize {
        self.entries.iter().filter(|e| e.mask.is_some()).count()
    }

    pub fn num_classes(&self) -> usize {
        self.entries.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    /// Reads every image and mask into memory, in manifest order.
    pub fn load_samples(&self, exec: Execution) -> Result<Vec<Sample>> {
        exec.map(&self.entries, load_entry).into_iter().collect()
    }
}

fn load_entry(entry: &ManifestEntry) -> Result<Sample> {
    let image = read_image(&entry.image)?;
    let mask = entry.mask.as_deref().map(read_mask).transpose()?;
    if let Some(m) = &mask {
        if (m.height(), m.width()) != (image.shape()[1], image.shape()[2]) {
            return Err(Error::Format(format!("mask size differs from image for `{}`", entry.id)));
        }
    }
    Ok(Sample { id: entry.id.clone(), image, mask, label: entry.label })
}

#[derive(Deserialize)]
struct LabelRow {
    id: String,
    label: usize,
}

#[derive(Deserialize)]
struct MetaSplit {
    #[serde(default)]
    split: Split,
}

/// Scans a dataset directory. Files are checked for presence and size only; pixels load lazily.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::MissingPath(root.to_path_buf()));
    }
    let images = list_pngs(&root.join("images"))?;
    if images.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    let labels_path = root.join("labels.csv");
    if !labels_path.is_file() {
        return Err(Error::Format(format!("{} has no labels.csv", root.display())));
    }
    let mut labels = HashMap::new();
    for row in csv::Reader::from_path(&labels_path)?.deserialize() {
        let row: LabelRow = row?;
        if labels.insert(row.id.clone(), row.label).is_some() {
            return Err(Error::Format(format!("duplicate id `{}` in labels.csv", row.id)));
        }
    }
    let masks: HashSet<String> = list_pngs(&root.join("masks"))?.into_iter().collect();

    let mut entries = Vec::with_capacity(images.len());
    for id in images {
        let label = *labels
            .get(&id)
            .ok_or_else(|| Error::Format(format!("image `{id}` has no row in labels.csv")))?;
        let image = root.join("images").join(format!("{id}.png"));
        let mask = masks.contains(&id).then(|| root.join("masks").join(format!("{id}.png")));
        if let Some(m) = &mask {
            if image::image_dimensions(&image)? != image::image_dimensions(m)? {
                return Err(Error::Format(format!("mask size differs from image for `{id}`")));
            }
        }
        entries.push(ManifestEntry { id, image, mask, label });
    }
    if let Some(orphan) = masks.iter().find(|m| !labels.contains_key(*m)) {
        return Err(Error::Format(format!("mask `{orphan}` has no image")));
    }
    if labels.len() != entries.len() {
        return Err(Error::Format("labels.csv lists ids without images".into()));
    }

    let split = match fs::read(root.join("meta.json")) {
        Ok(bytes) => serde_json::from_slice::<MetaSplit>(&bytes)?.split,
        Err(_) => Split::Train,
    };
    Ok(DatasetManifest { root: root.to_path_buf(), split, entries })
}

/// Sorted file stems of the PNGs in `dir`; empty if the directory is absent.
fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// RGB PNG as a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

/// Grayscale PNG thresholded at 127.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    BinaryMask::new(h as usize, w as usize, img.pixels().map(|p| u8::from(p.0[0] > 127)).collect())
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        f64::from(raw[p * 3 + c]) / 255.0
    })
}

/// Inverse of [`rgb_to_tensor`], rounding to 8 bits.
pub fn tensor_to_rgb(image: &Tensor) -> Result<RgbImage> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("tensor_to_rgb", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut raw = vec![0u8; h * w * 3];
    for (p, px) in raw.chunks_exact_mut(3).enumerate() {
        for (c, v) in px.iter_mut().enumerate() {
            *v = to_byte(d[c * h * w + p]);
        }
    }
    RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Contract("image buffer size".into()))
}

pub fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    let raw = mask.data().iter().map(|&v| v * 255).collect();
    GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw).expect("mask buffer matches its size")
}

pub(crate) fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes samples in the dataset layout; samples without masks get no mask file.
pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    let mut labels = csv::Writer::from_path(root.join("labels.csv"))?;
    labels.write_record(["id", "label"])?;
    for s in samples {
        tensor_to_rgb(&s.image)?.save(root.join("images").join(format!("{}.png", s.id)))?;
        if let Some(m) = &s.mask {
            mask_to_gray(m).save(root.join("masks").join(format!("{}.png", s.id)))?;
        }
        labels.write_record([s.id.as_str(), &s.label.to_string()])?;
    }
    labels.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
