//! Unpaired HR / LR image sets and independent random-crop batching.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use pdm_autograd::Tensor;
use rand::Rng;

use crate::error::{PdmError, Result};
use crate::image::{list_images, load_image, ImagePlane};
use crate::rng::{substream, Consumer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Side {
    Hr,
    Lr,
}

#[derive(Clone, Debug)]
enum Source {
    File(PathBuf),
    Memory(Arc<ImagePlane>),
}

/// Byte-budgeted cache of decoded images, evicting the oldest entry first.
struct ImageCache {
    budget: usize,
    used: usize,
    entries: HashMap<(Side, usize), Arc<ImagePlane>>,
    order: VecDeque<(Side, usize)>,
    too_small: HashSet<(Side, usize)>,
}

impl ImageCache {
    fn get(&mut self, key: (Side, usize)) -> Option<Arc<ImagePlane>> {
        self.entries.get(&key).cloned()
    }

    fn insert(&mut self, key: (Side, usize), img: Arc<ImagePlane>) {
        let size = img.data().len() * std::mem::size_of::<f64>();
        if size > self.budget {
            return;
        }
        while self.used + size > self.budget {
            let Some(old) = self.order.pop_front() else { break };
            if let Some(e) = self.entries.remove(&old) {
                self.used -= e.data().len() * std::mem::size_of::<f64>();
            }
        }
        self.used += size;
        self.entries.insert(key, img);
        self.order.push_back(key);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetConfig {
    pub scale: usize,
    pub lr_crop: usize,
    pub augment: bool,
    pub cache_bytes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            lr_crop: 32,
            augment: false,
            cache_bytes: 1 << 30,
        }
    }
}

/// One training batch: HR and LR crops drawn independently.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `(N, C, hr_crop, hr_crop)`.
    pub hr: Tensor,
    /// `(N, C, lr_crop, lr_crop)`.
    pub lr: Tensor,
    pub hr_sources: Vec<usize>,
    pub lr_sources: Vec<usize>,
}

pub struct UnpairedDataset {
    hr: Vec<Source>,
    lr: Vec<Source>,
    cfg: DatasetConfig,
    cache: Mutex<ImageCache>,
}

impl UnpairedDataset {
    /// Discovers PNG files in both directories (sorted lexicographically).
    pub fn from_dirs(hr_dir: &Path, lr_dir: &Path, cfg: DatasetConfig) -> Result<Self> {
        let hr = list_images(hr_dir)?;
        let lr = list_images(lr_dir)?;
        log::info!(
            "dataset: {} HR images in {}, {} LR images in {}",
            hr.len(),
            hr_dir.display(),
            lr.len(),
            lr_dir.display()
        );
        Self::from_paths(hr, lr, cfg)
    }

    pub fn from_paths(hr: Vec<PathBuf>, lr: Vec<PathBuf>, cfg: DatasetConfig) -> Result<Self> {
        Self::build(
            hr.into_iter().map(Source::File).collect(),
            lr.into_iter().map(Source::File).collect(),
            cfg,
        )
    }

    /// In-memory dataset; no file I/O.
    pub fn from_images(hr: Vec<ImagePlane>, lr: Vec<ImagePlane>, cfg: DatasetConfig) -> Result<Self> {
        Self::build(
            hr.into_iter().map(|i| Source::Memory(Arc::new(i))).collect(),
            lr.into_iter().map(|i| Source::Memory(Arc::new(i))).collect(),
            cfg,
        )
    }

    fn build(hr: Vec<Source>, lr: Vec<Source>, cfg: DatasetConfig) -> Result<Self> {
        if hr.is_empty() || lr.is_empty() {
            return Err(PdmError::Empty(format!(
                "training needs HR and LR images (found {} HR, {} LR)",
                hr.len(),
                lr.len()
            )));
        }
        if cfg.scale == 0 || cfg.lr_crop == 0 {
            return Err(PdmError::Config("scale and lr_crop must be positive".into()));
        }
        Ok(Self {
            hr,
            lr,
            cfg,
            cache: Mutex::new(ImageCache {
                budget: cfg.cache_bytes,
                used: 0,
                entries: HashMap::new(),
                order: VecDeque::new(),
                too_small: HashSet::new(),
            }),
        })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.cfg
    }

    pub fn hr_len(&self) -> usize {
        self.hr.len()
    }

    pub fn lr_len(&self) -> usize {
        self.lr.len()
    }

    pub fn hr_crop(&self) -> usize {
        self.cfg.lr_crop * self.cfg.scale
    }

    pub fn lr_crop(&self) -> usize {
        self.cfg.lr_crop
    }

    fn image(&self, side: Side, idx: usize) -> Result<Arc<ImagePlane>> {
        let source = match side {
            Side::Hr => &self.hr[idx],
            Side::Lr => &self.lr[idx],
        };
        match source {
            Source::Memory(img) => Ok(img.clone()),
            Source::File(path) => {
                if let Some(img) = self.cache.lock().expect("cache lock").get((side, idx)) {
                    return Ok(img);
                }
                let img = Arc::new(load_image(path)?);
                self.cache
                    .lock()
                    .expect("cache lock")
                    .insert((side, idx), img.clone());
                Ok(img)
            }
        }
    }

    fn describe(&self, side: Side, idx: usize) -> String {
        match (side, &self.hr.get(idx), &self.lr.get(idx)) {
            (Side::Hr, Some(Source::File(p)), _) | (Side::Lr, _, Some(Source::File(p))) => {
                p.display().to_string()
            }
            _ => format!("{side:?} image #{idx}"),
        }
    }

    /// Draws one crop of side `crop` from a uniformly chosen image, skipping
    /// images that are too small.
    fn draw_crop(&self, side: Side, crop: usize, rng: &mut impl Rng) -> Result<(ImagePlane, usize)> {
        let count = match side {
            Side::Hr => self.hr.len(),
            Side::Lr => self.lr.len(),
        };
        loop {
            let small = {
                let cache = self.cache.lock().expect("cache lock");
                (0..count).filter(|i| cache.too_small.contains(&(side, *i))).count()
            };
            if small == count {
                return Err(PdmError::Empty(format!(
                    "every {side:?} image is smaller than the {crop}x{crop} crop"
                )));
            }
            let idx = rng.random_range(0..count);
            if self.cache.lock().expect("cache lock").too_small.contains(&(side, idx)) {
                continue;
            }
            let img = self.image(side, idx)?;
            if img.height() < crop || img.width() < crop {
                log::warn!(
                    "skipping {} ({}x{}): smaller than the {crop}x{crop} crop",
                    self.describe(side, idx),
                    img.height(),
                    img.width()
                );
                self.cache
                    .lock()
                    .expect("cache lock")
                    .too_small
                    .insert((side, idx));
                continue;
            }
            let top = rng.random_range(0..=img.height() - crop);
            let left = rng.random_range(0..=img.width() - crop);
            let mut patch = img.crop(top, left, crop, crop)?;
            if self.cfg.augment {
                if rng.random_bool(0.5) {
                    patch = patch.flip_horizontal();
                }
                for _ in 0..rng.random_range(0..4) {
                    patch = patch.rotate90();
                }
            }
            return Ok((patch, idx));
        }
    }

    /// HR and LR crops for training `step`. The two sides use separate random
    /// streams, so no index coupling exists between them.
    pub fn sample_batch(&self, batch: usize, seed: u64, step: u64) -> Result<Batch> {
        let mut hr_rng = substream(seed, step, Consumer::HrSampler);
        let mut lr_rng = substream(seed, step, Consumer::LrSampler);
        let mut hr = Vec::with_capacity(batch);
        let mut hr_sources = Vec::with_capacity(batch);
        let mut lr = Vec::with_capacity(batch);
        let mut lr_sources = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (p, i) = self.draw_crop(Side::Hr, self.hr_crop(), &mut hr_rng)?;
            hr.push(p);
            hr_sources.push(i);
            let (p, i) = self.draw_crop(Side::Lr, self.lr_crop(), &mut lr_rng)?;
            lr.push(p);
            lr_sources.push(i);
        }
        Ok(Batch {
            hr: ImagePlane::stack(&hr)?,
            lr: ImagePlane::stack(&lr)?,
            hr_sources,
            lr_sources,
        })
    }
}
