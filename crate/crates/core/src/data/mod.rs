//! Image folders, shuffled per-domain streams, augmentation and toy data.

pub mod augment;
pub mod toy;

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::Rng;
use twingan_autograd::Tensor;

pub use augment::{augment, augment_traced, AugmentConfig, AugmentTrace};
pub use toy::{make_toy, read_manifest, ToyAttributes, ToySpec};

use crate::error::{Error, Result};
use crate::rng;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Decoded images, each `[1, 3, r, r]` in `[−1, 1]`, sorted by file name.
#[derive(Clone, Debug)]
pub struct ImageFolder {
    pub images: Vec<Tensor>,
    pub names: Vec<String>,
    /// Files with an image extension that failed to decode.
    pub skipped: usize,
    pub resolution: usize,
}

impl ImageFolder {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let picked: Vec<Tensor> = indices.iter().map(|&i| self.images[i].clone()).collect();
        Tensor::stack(&picked)
    }
}

pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_image(path: &Path, resolution: usize) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb32f();
    let img = if img.width() as usize == resolution && img.height() as usize == resolution {
        img
    } else {
        image::imageops::resize(&img, resolution as u32, resolution as u32, FilterType::Triangle)
    };
    let r = resolution;
    let raw = img.as_raw();
    Ok(Tensor::from_fn([1, 3, r, r], |i| {
        let (c, p) = (i / (r * r), i % (r * r));
        raw[p * 3 + c].clamp(0.0, 1.0) * 2.0 - 1.0
    }))
}

/// Loads every decodable image in `dir`, resized to `resolution`.
pub fn load_folder(dir: &Path, resolution: usize) -> Result<ImageFolder> {
    let mut folder = ImageFolder {
        images: Vec::new(),
        names: Vec::new(),
        skipped: 0,
        resolution,
    };
    for path in image_files(dir)? {
        match load_image(&path, resolution) {
            Ok(t) => {
                folder.images.push(t);
                folder
                    .names
                    .push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                folder.skipped += 1;
            }
        }
    }
    if folder.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    Ok(folder)
}

/// Writes a `[1, 3, h, w]` image in `[−1, 1]` as an 8-bit file.
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let [_, c, h, w] = image.shape();
    let mut bytes = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for ch in 0..3.min(c) {
            let v = (image.data()[ch * h * w + p] + 1.0) * 0.5;
            bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ColorType::Rgb8)?;
    Ok(())
}

/// Endless sampling without replacement, reshuffled every epoch. The position is
/// fully described by the number of items drawn so far.
#[derive(Clone, Debug)]
pub struct ImageStream {
    pub folder: ImageFolder,
    seed: u64,
    tag: String,
    drawn: u64,
    epoch: u64,
    order: Vec<usize>,
}

impl ImageStream {
    pub fn new(folder: ImageFolder, seed: u64, tag: &str) -> Self {
        let mut s = Self {
            folder,
            seed,
            tag: format!("shuffle-{tag}"),
            drawn: 0,
            epoch: 0,
            order: Vec::new(),
        };
        s.shuffle(0);
        s
    }

    fn shuffle(&mut self, epoch: u64) {
        self.order = (0..self.folder.len()).collect();
        self.order.shuffle(&mut rng::stream(self.seed, &self.tag, epoch));
        self.epoch = epoch;
    }

    pub fn drawn(&self) -> u64 {
        self.drawn
    }

    pub fn seek(&mut self, drawn: u64) {
        self.drawn = drawn;
    }

    pub fn next_indices(&mut self, n: usize) -> Vec<usize> {
        let len = self.folder.len() as u64;
        (0..n)
            .map(|_| {
                let (epoch, pos) = (self.drawn / len, self.drawn % len);
                if epoch != self.epoch {
                    self.shuffle(epoch);
                }
                self.drawn += 1;
                self.order[pos as usize]
            })
            .collect()
    }

    /// Next `n` images, each augmented independently when `aug` is given.
    pub fn next_batch(&mut self, n: usize, aug: Option<&AugmentConfig>, rng: &mut impl Rng) -> Tensor {
        let idx = self.next_indices(n);
        let imgs: Vec<Tensor> = idx
            .iter()
            .map(|&i| {
                let img = &self.folder.images[i];
                match aug {
                    Some(cfg) => augment(img, cfg, rng),
                    None => img.clone(),
                }
            })
            .collect();
        Tensor::stack(&imgs)
    }
}
