//! Labeled image sources: an in-memory synthetic set, cached registry sets and local folders.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, Rgb, RgbImage};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::zoo::cache_dir;

pub const SYNTHETIC: &str = "synthetic-2class";
pub const REGISTRY: &[&str] = &["imagenette", "cifar10", "cifar100", "imagenet-1k-val-subset"];
const SYNTHETIC_PER_CLASS: usize = 100;
const SYNTHETIC_SIDE: u32 = 8;
const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png"];
/// Optional `{"folder": "label text"}` map inside a dataset directory.
pub const LABEL_MAP_FILE: &str = "labels.json";

#[derive(Debug, Clone)]
enum Source {
    File(PathBuf),
    Synthetic { mean: f64, noise_seed: u64 },
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub truth: String,
    source: Source,
}

impl Sample {
    pub fn load(&self) -> Result<DynamicImage> {
        match &self.source {
            Source::File(p) => image::open(p).map_err(|e| Error::DatasetUnavailable(format!("{}: {e}", p.display()))),
            Source::Synthetic { mean, noise_seed } => Ok(synthetic_image(*mean, *noise_seed)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    /// Sorted by sample id.
    pub samples: Vec<Sample>,
}

fn synthetic_image(mean: f64, seed: u64) -> DynamicImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = RgbImage::from_fn(SYNTHETIC_SIDE, SYNTHETIC_SIDE, |_, _| {
        let mut px = [0u8; 3];
        for c in &mut px {
            let v: f64 = mean + rng.random_range(-0.04..0.04);
            *c = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(px)
    });
    DynamicImage::ImageRgb8(img)
}

/// Two classes of flat 8x8 images: "dark" (mean in [0.05, 0.35]) and "bright" ([0.65, 0.95]).
pub fn synthetic_two_class() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut samples = Vec::new();
    for (label, lo) in [("bright", 0.65), ("dark", 0.05)] {
        for i in 0..SYNTHETIC_PER_CLASS {
            let mean = lo + rng.random_range(0.0..0.3);
            samples.push(Sample {
                id: format!("{label}/{i:04}"),
                truth: label.to_string(),
                source: Source::Synthetic { mean, noise_seed: rng.random() },
            });
        }
    }
    Dataset { id: SYNTHETIC.to_string(), samples }
}

fn read_label_map(dir: &Path) -> Result<BTreeMap<String, String>> {
    let p = dir.join(LABEL_MAP_FILE);
    if !p.exists() {
        return Ok(BTreeMap::new());
    }
    let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
    Ok(serde_json::from_str(&text)?)
}

/// Class-per-folder directory: `<dir>/<class>/<image>`.
pub fn from_directory(id: &str, dir: &Path) -> Result<Dataset> {
    let labels = read_label_map(dir)?;
    let mut samples = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::DatasetUnavailable(format!("{}: {e}", dir.display())))?;
    for class in entries {
        let class = class.map_err(io_err(dir))?.path();
        if !class.is_dir() {
            continue;
        }
        let folder = class.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let truth = labels.get(&folder).cloned().unwrap_or_else(|| folder.replace('_', " "));
        for f in std::fs::read_dir(&class).map_err(io_err(&class))? {
            let f = f.map_err(io_err(&class))?.path();
            let ext = f.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
                let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                samples.push(Sample { id: format!("{folder}/{name}"), truth: truth.clone(), source: Source::File(f) });
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::DatasetUnavailable(format!("no labeled images under {}", dir.display())));
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Dataset { id: id.to_string(), samples })
}

/// Resolve a dataset id: the synthetic set, a cached registry set, or a local directory.
pub fn open_dataset(id: &str) -> Result<Dataset> {
    if id == SYNTHETIC {
        return Ok(synthetic_two_class());
    }
    if REGISTRY.contains(&id) {
        let dir = cache_dir().join("datasets").join(id);
        if !dir.is_dir() {
            return Err(Error::DatasetUnavailable(format!(
                "`{id}` is not cached; place class folders under {}",
                dir.display()
            )));
        }
        return from_directory(id, &dir);
    }
    let p = Path::new(id);
    if p.is_dir() {
        return from_directory(id, p);
    }
    Err(Error::DatasetUnavailable(format!("unknown dataset `{id}`")))
}

fn subset_seed(dataset_id: &str, seed: u64) -> u64 {
    let digest = Sha256::digest(dataset_id.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b) ^ seed
}

/// Sorted sample indices; depends only on (dataset id, size, n, seed).
pub fn subset_indices(dataset_id: &str, len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > len {
        return Err(Error::Config(format!("n_samples {n} must be in 1..={len} for `{dataset_id}`")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(subset_seed(dataset_id, seed));
    let mut idx = sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}
