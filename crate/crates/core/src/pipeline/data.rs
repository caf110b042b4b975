//! Datasets: preprocessing of real images, the procedural synthetic set and a
//! bounded background batch loader.

use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::exec::{map_range, Exec};
use crate::noise::keyed_rng;
use crate::{Error, Result};

/// Images of one resolution, stored as `(N, 3, R, R)` values in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    resolution: usize,
    len: usize,
    data: Arc<Vec<f32>>,
}

impl Dataset {
    pub fn from_images(resolution: usize, images: Vec<Vec<f32>>) -> Result<Self> {
        let n = 3 * resolution * resolution;
        let mut data = Vec::with_capacity(images.len() * n);
        for (i, img) in images.iter().enumerate() {
            if img.len() != n {
                return Err(invalid!("image {i} has {} values, expected {n}", img.len()));
            }
            data.extend_from_slice(img);
        }
        Ok(Self {
            resolution,
            len: images.len(),
            data: Arc::new(data),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    fn image_len(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn batch_tensor(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let mut buf = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            if i >= self.len {
                return Err(invalid!("index {i} out of range for {} images", self.len));
            }
            buf.extend_from_slice(self.image(i));
        }
        let r = self.resolution;
        Ok(Tensor::from_vec(buf, (indices.len(), 3, r, r), device)?.to_dtype(dtype)?)
    }

    /// The first `n` images as a batch.
    pub fn head_tensor(&self, n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        let idx: Vec<usize> = (0..n.min(self.len)).collect();
        self.batch_tensor(&idx, dtype, device)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    ImageFolder,
    SyntheticTextures,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Root of an image folder; `train/` and `val/` subdirectories are used when present.
    pub path: Option<PathBuf>,
    pub resolution: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SyntheticTextures,
            path: None,
            resolution: 64,
            train_count: 512,
            val_count: 64,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == DatasetKind::ImageFolder {
            match &self.path {
                Some(p) if p.is_dir() => {}
                Some(p) => return Err(Error::Config(format!("dataset path {} is not a directory", p.display()))),
                None => return Err(Error::Config("image_folder datasets need a path".into())),
            }
        }
        if self.resolution < 16 {
            return Err(Error::Config("dataset resolution must be at least 16".into()));
        }
        Ok(())
    }

    pub fn load(&self, split: Split, exec: Exec) -> Result<Dataset> {
        self.validate()?;
        match self.kind {
            DatasetKind::SyntheticTextures => {
                // Validation images come from a disjoint id range of the same generator.
                let (offset, n) = match split {
                    Split::Train => (0, self.train_count),
                    Split::Val => (self.train_count as u64, self.val_count),
                };
                synthetic_range(offset, n, self.resolution, self.seed, exec)
            }
            DatasetKind::ImageFolder => {
                let root = self.path.as_ref().expect("validated");
                let sub = root.join(match split {
                    Split::Train => "train",
                    Split::Val => "val",
                });
                if sub.is_dir() {
                    return image_folder(&sub, self.resolution, exec);
                }
                // No split directories: deterministic 90/10 split of the sorted file list.
                let files = list_images(root);
                let cut = files.len() - files.len() / 10;
                let chosen = match split {
                    Split::Train => &files[..cut],
                    Split::Val => &files[cut..],
                };
                load_files(chosen, self.resolution, exec)
            }
        }
    }
}

/// Square centre crop `(x, y, side)` on the shorter side.
pub fn center_crop_box(width: u32, height: u32) -> (u32, u32, u32) {
    let side = width.min(height);
    ((width - side) / 2, (height - side) / 2, side)
}

/// Centre-crops to a square, resizes to `resolution` and maps `[0, 255]` to `[-1, 1]`.
/// Output is planar `(3, R, R)`.
pub fn preprocess(img: &RgbImage, resolution: usize) -> Result<Vec<f32>> {
    let (w, h) = img.dimensions();
    if w.min(h) < 16 {
        return Err(invalid!("image {w}x{h} is smaller than 16 pixels on a side"));
    }
    let (x, y, side) = center_crop_box(w, h);
    let r = resolution as u32;
    let cropped = image::imageops::crop_imm(img, x, y, side, side).to_image();
    let resized = if side == r {
        cropped
    } else {
        image::imageops::resize(&cropped, r, r, FilterType::Triangle)
    };
    let plane = resolution * resolution;
    let mut out = vec![0.0f32; 3 * plane];
    for (px, py, p) in resized.enumerate_pixels() {
        let i = py as usize * resolution + px as usize;
        for c in 0..3 {
            out[c * plane + i] = p[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(out)
}

fn list_images(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    files
}

fn load_files(files: &[PathBuf], resolution: usize, exec: Exec) -> Result<Dataset> {
    let decoded = map_range(exec, files.len(), |i| {
        let path = &files[i];
        match image::open(path).map_err(Error::from).and_then(|img| preprocess(&img.to_rgb8(), resolution)) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                None
            }
        }
    });
    Dataset::from_images(resolution, decoded.into_iter().flatten().collect())
}

/// Every decodable PNG/JPEG under `dir`, in sorted path order. Undecodable files are skipped with a warning.
pub fn image_folder(dir: &Path, resolution: usize, exec: Exec) -> Result<Dataset> {
    load_files(&list_images(dir), resolution, exec)
}

/// `n` procedural images: smooth gradients, checkerboards, Gaussian blobs and
/// stroke patterns. Each image depends only on `(seed, index)`.
pub fn synthetic_dataset(n: usize, resolution: usize, seed: u64, exec: Exec) -> Result<Dataset> {
    synthetic_range(0, n, resolution, seed, exec)
}

fn synthetic_range(offset: u64, n: usize, resolution: usize, seed: u64, exec: Exec) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid!("synthetic dataset needs at least one image"));
    }
    let images = map_range(exec, n, |i| synthetic_image(seed, offset + i as u64, resolution));
    Dataset::from_images(resolution, images)
}

fn color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
}

pub fn synthetic_image(seed: u64, index: u64, r: usize) -> Vec<f32> {
    let mut rng = keyed_rng(seed, 0x5717, index);
    let plane = r * r;
    let mut img = vec![0.0f32; 3 * plane];
    let rf = r as f32;
    let put = |img: &mut Vec<f32>, x: usize, y: usize, c: [f32; 3], a: f32| {
        for ch in 0..3 {
            let v = &mut img[ch * plane + y * r + x];
            *v = *v * (1.0 - a) + c[ch] * a;
        }
    };
    match index % 4 {
        0 => {
            let (c0, c1) = (color(&mut rng), color(&mut rng));
            let th: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (dx, dy) = (th.cos(), th.sin());
            let ripple: f32 = rng.random_range(0.0..0.3);
            let freq: f32 = rng.random_range(1.0..3.0);
            for y in 0..r {
                for x in 0..r {
                    let u = ((x as f32 / rf - 0.5) * dx + (y as f32 / rf - 0.5) * dy) / std::f32::consts::SQRT_2 + 0.5;
                    let u = u + ripple * (std::f32::consts::TAU * freq * u).sin();
                    let u = u.clamp(0.0, 1.0);
                    let c = [0, 1, 2].map(|k| c0[k] * (1.0 - u) + c1[k] * u);
                    put(&mut img, x, y, c, 1.0);
                }
            }
        }
        1 => {
            let (c0, c1) = (color(&mut rng), color(&mut rng));
            let cell = [2usize, 4, 8, 16][rng.random_range(0..4)].max(r / 32);
            let (ox, oy) = (rng.random_range(0..cell), rng.random_range(0..cell));
            for y in 0..r {
                for x in 0..r {
                    let odd = ((x + ox) / cell + (y + oy) / cell) % 2 == 1;
                    put(&mut img, x, y, if odd { c1 } else { c0 }, 1.0);
                }
            }
        }
        2 => {
            let bg = color(&mut rng);
            for y in 0..r {
                for x in 0..r {
                    put(&mut img, x, y, bg, 1.0);
                }
            }
            let blobs = rng.random_range(2..7);
            for _ in 0..blobs {
                let c = color(&mut rng);
                let (cx, cy) = (rng.random_range(0.0..rf), rng.random_range(0.0..rf));
                let s: f32 = rng.random_range(0.05..0.25) * rf;
                for y in 0..r {
                    for x in 0..r {
                        let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                        put(&mut img, x, y, c, (-d2 / (2.0 * s * s)).exp());
                    }
                }
            }
        }
        _ => {
            let bg = color(&mut rng);
            let ink = bg.map(|v| if v > 0.0 { v - 1.0 } else { v + 1.0 });
            for y in 0..r {
                for x in 0..r {
                    put(&mut img, x, y, bg, 1.0);
                }
            }
            // Rows of short horizontal and vertical strokes, like glyphs on a line.
            let glyph = (r / 8).max(3);
            let mut y0 = rng.random_range(1..glyph);
            while y0 + glyph < r {
                let mut x0 = rng.random_range(1..glyph);
                while x0 + glyph < r {
                    for _ in 0..rng.random_range(1..4) {
                        let vertical = rng.random_bool(0.5);
                        let len = rng.random_range(glyph / 2..=glyph);
                        let (sx, sy) = (x0 + rng.random_range(0..glyph / 2 + 1), y0 + rng.random_range(0..glyph / 2 + 1));
                        for k in 0..len {
                            let (x, y) = if vertical { (sx, sy + k) } else { (sx + k, sy) };
                            if x < r && y < r {
                                put(&mut img, x, y, ink, 1.0);
                            }
                        }
                    }
                    x0 += glyph + rng.random_range(1..3);
                }
                y0 += glyph + 2;
            }
        }
    }
    // Faint pixel noise so no image is exactly piecewise constant.
    for v in img.iter_mut() {
        let e: f32 = rng.sample(StandardNormal);
        *v = (*v + 0.02 * e).clamp(-1.0, 1.0);
    }
    img
}

/// One training batch produced by [`BatchLoader`].
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub resolution: usize,
    pub data: Vec<f32>,
}

impl Batch {
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let r = self.resolution;
        Ok(Tensor::from_vec(self.data.clone(), (self.indices.len(), 3, r, r), device)?.to_dtype(dtype)?)
    }
}

/// Deterministic per-epoch shuffled order of `n` items.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, 0x10ad, epoch));
    order
}

/// Background producer assembling shuffled batches into a bounded queue.
/// The final batch of an epoch may be smaller than `batch_size`.
pub struct BatchLoader {
    rx: Option<Receiver<Batch>>,
    handle: Option<JoinHandle<()>>,
}

impl BatchLoader {
    pub fn spawn(dataset: &Dataset, batch_size: usize, seed: u64, total_batches: usize, capacity: usize) -> Self {
        let ds = dataset.clone();
        let (tx, rx) = sync_channel(capacity.max(1));
        let handle = std::thread::spawn(move || {
            let mut sent = 0;
            let mut epoch = 0;
            while sent < total_batches {
                let order = epoch_order(ds.len(), seed, epoch);
                for chunk in order.chunks(batch_size.max(1)) {
                    if sent >= total_batches {
                        return;
                    }
                    let mut data = Vec::with_capacity(chunk.len() * ds.image_len());
                    for &i in chunk {
                        data.extend_from_slice(ds.image(i));
                    }
                    let b = Batch {
                        indices: chunk.to_vec(),
                        resolution: ds.resolution,
                        data,
                    };
                    if tx.send(b).is_err() {
                        return;
                    }
                    sent += 1;
                }
                epoch += 1;
            }
        });
        Self {
            rx: Some(rx),
            handle: Some(handle),
        }
    }
}

impl Iterator for BatchLoader {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for BatchLoader {
    fn drop(&mut self) {
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
