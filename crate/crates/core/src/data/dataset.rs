use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::rng;
use crate::vq::ImageBatch;

/// Labelled images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: ImageBatch,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` items (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Procedurally drawn shapes; the class fixes shape and colour family.
    SyntheticShapes { num_classes: usize, per_class: usize, seed: u64 },
    /// One sub-directory per class containing PNG or JPEG files.
    ImageFolder { root: PathBuf },
    /// Directory of CIFAR-style binary batches (`*.bin`, 1 label byte + 3072 pixel bytes).
    Standard32x32 { root: PathBuf },
}

/// Load a source, resize to `image_size`, and split it deterministically
/// with `val_fraction` of the items held out.
pub fn ingest_dataset(source: &DataSource, image_size: usize, split_seed: u64, val_fraction: f64) -> Result<Split> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(config_err!("val_fraction must lie in [0, 1), got {val_fraction}"));
    }
    let all = match source {
        DataSource::SyntheticShapes { num_classes, per_class, seed } => synthetic_shapes(*num_classes, *per_class, image_size, *seed)?,
        DataSource::ImageFolder { root } => image_folder(root, image_size)?,
        DataSource::Standard32x32 { root } => standard_32x32(root, image_size)?,
    };
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut rng::stream(split_seed, "split", 0));
    let n_val = (all.len() as f64 * val_fraction).round() as usize;
    let (val, train) = order.split_at(n_val);
    Ok(Split { train: all.subset(train), val: all.subset(val) })
}

const PALETTES: [[f32; 3]; 4] = [[0.9, 0.2, 0.15], [0.15, 0.35, 0.9], [0.2, 0.8, 0.25], [0.95, 0.85, 0.1]];

fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        2 => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        3 => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
        _ => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
    }
}

/// Generate `num_classes * per_class` images. Class `c` draws shape `c % 5`
/// in colour family `(c / 5) % 4`; position, size, tint and background vary.
pub fn synthetic_shapes(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || image_size < 4 {
        return Err(config_err!("synthetic shapes need positive class count, per-class count and image size >= 4"));
    }
    let s = image_size as f32;
    let n = num_classes * per_class;
    let mut pixels = Vec::with_capacity(n * 3 * image_size * image_size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let mut rng = rng::stream(seed, "synthetic_shapes", i as u64);
        let shape = class % 5;
        let base = PALETTES[(class / 5) % PALETTES.len()];
        let color: Vec<f32> = base.iter().map(|c| (c + rng.random_range(-0.1..0.1f32)).clamp(0.0, 1.0)).collect();
        let bg_top: Vec<f32> = (0..3).map(|_| rng.random_range(0.05..0.45f32)).collect();
        let bg_bottom: Vec<f32> = (0..3).map(|_| rng.random_range(0.05..0.45f32)).collect();
        let r = s * rng.random_range(0.2..0.34f32);
        let cx = rng.random_range(r..s - r);
        let cy = rng.random_range(r..s - r);
        let mut img = vec![0.0f32; 3 * image_size * image_size];
        for y in 0..image_size {
            for x in 0..image_size {
                // 2x2 supersampling for soft edges.
                let mut cover = 0.0;
                for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    if inside(shape, x as f32 + ox - cx, y as f32 + oy - cy, r) {
                        cover += 0.25;
                    }
                }
                let g = y as f32 / (s - 1.0);
                for ch in 0..3 {
                    let bg = bg_top[ch] * (1.0 - g) + bg_bottom[ch] * g;
                    img[ch * image_size * image_size + y * image_size + x] = bg * (1.0 - cover) + color[ch] * cover;
                }
            }
        }
        pixels.extend(img);
        labels.push(class as u32);
    }
    Ok(Dataset { images: ImageBatch::new(pixels, n, image_size, image_size)?, labels, num_classes })
}

fn resize_rgb(img: image::RgbImage, size: usize) -> Vec<f32> {
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    let mut out = vec![0.0f32; 3 * size * size];
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[ch * size * size + y as usize * size + x as usize] = p[ch] as f32 / 255.0;
        }
    }
    out
}

fn ingest_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Ingest { path: path.to_path_buf(), msg: msg.into() }
}

fn image_folder(root: &Path, size: usize) -> Result<Dataset> {
    let mut classes: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| ingest_err(root, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(ingest_err(root, "no class sub-directories"));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| ingest_err(dir, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(), Some("png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f).map_err(|e| ingest_err(&f, e.to_string()))?.to_rgb8();
            pixels.extend(resize_rgb(img, size));
            labels.push(label as u32);
        }
    }
    if labels.is_empty() {
        return Err(ingest_err(root, "no images found"));
    }
    Ok(Dataset { images: ImageBatch::new(pixels, labels.len(), size, size)?, labels, num_classes: classes.len() })
}

fn standard_32x32(root: &Path, size: usize) -> Result<Dataset> {
    const RECORD: usize = 1 + 3072;
    let mut files: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| ingest_err(root, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("bin"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(ingest_err(root, "no .bin batch files"));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut max_label = 0;
    for f in files {
        let bytes = std::fs::read(&f).map_err(|e| ingest_err(&f, e.to_string()))?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(ingest_err(&f, format!("length {} is not a multiple of {RECORD}", bytes.len())));
        }
        for rec in bytes.chunks_exact(RECORD) {
            let label = rec[0] as u32;
            max_label = max_label.max(label);
            let mut img = image::RgbImage::new(32, 32);
            for (x, y, p) in img.enumerate_pixels_mut() {
                let o = y as usize * 32 + x as usize;
                *p = image::Rgb([rec[1 + o], rec[1 + 1024 + o], rec[1 + 2048 + o]]);
            }
            pixels.extend(resize_rgb(img, size));
            labels.push(label);
        }
    }
    Ok(Dataset { images: ImageBatch::new(pixels, labels.len(), size, size)?, labels, num_classes: max_label as usize + 1 })
}
