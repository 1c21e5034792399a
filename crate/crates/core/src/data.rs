//! Dataset loading (IDX and CIFAR-10 binary), seeded splits and the
//! geometric training augmentation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Images with their labels. Pixels lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let (channels, height, width) = images
            .first()
            .map(|i| (i.channels, i.height, i.width))
            .unwrap_or((0, 0, 0));
        if images
            .iter()
            .any(|i| (i.channels, i.height, i.width) != (channels, height, width))
        {
            return Err(Error::ShapeMismatch("images differ in shape".into()));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            channels,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }

    /// A seeded random subset of at most `n` images.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        self.subset(&idx)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            what,
            needed: offset + 4,
            available: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, what: &'static str) -> Result<()> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(Error::BadMagic {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

/// Decodes an IDX3 image file into single-channel images.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Image>> {
    const WHAT: &str = "idx image file";
    check_magic(bytes, IDX_IMAGE_MAGIC, WHAT)?;
    let count = be_u32(bytes, 4, WHAT)? as usize;
    let rows = be_u32(bytes, 8, WHAT)? as usize;
    let cols = be_u32(bytes, 12, WHAT)? as usize;
    let plane = rows * cols;
    let needed = 16 + count * plane;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            what: WHAT,
            needed,
            available: bytes.len(),
        });
    }
    Ok(bytes[16..needed]
        .chunks_exact(plane.max(1))
        .take(count)
        .map(|px| Image {
            channels: 1,
            height: rows,
            width: cols,
            pixels: px.iter().map(|&v| f32::from(v) / 255.0).collect(),
        })
        .collect())
}

/// Decodes an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    const WHAT: &str = "idx label file";
    check_magic(bytes, IDX_LABEL_MAGIC, WHAT)?;
    let count = be_u32(bytes, 4, WHAT)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            what: WHAT,
            needed,
            available: bytes.len(),
        });
    }
    Ok(bytes[8..needed].iter().map(|&b| usize::from(b)).collect())
}

fn to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes single-channel images as an IDX3 file.
pub fn encode_idx_images(images: &[Image]) -> Result<Vec<u8>> {
    let (rows, cols) = images.first().map(|i| (i.height, i.width)).unwrap_or((0, 0));
    if images
        .iter()
        .any(|i| i.channels != 1 || i.height != rows || i.width != cols)
    {
        return Err(Error::ShapeMismatch(
            "idx images must share one single-channel shape".into(),
        ));
    }
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGE_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend(img.pixels.iter().map(|&v| to_byte(v)));
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// Loads an IDX image/label file pair (MNIST, Fashion-MNIST).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = parse_idx_images(&read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read(labels_path.as_ref())?)?;
    if images.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(images, labels, classes)
}

/// Decodes CIFAR-10 binary records (1 label byte + 3072 pixel bytes).
pub fn parse_cifar(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Truncated {
            what: "cifar batch",
            needed: (bytes.len() / CIFAR_RECORD + 1) * CIFAR_RECORD,
            available: bytes.len(),
        });
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(usize::from(rec[0]));
        images.push(Image {
            channels: 3,
            height: 32,
            width: 32,
            pixels: rec[1..].iter().map(|&v| f32::from(v) / 255.0).collect(),
        });
    }
    Dataset::new(images, labels, 10)
}

pub fn load_cifar(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        bytes.extend(read(p.as_ref())?);
    }
    parse_cifar(&bytes)
}

/// Which standard dataset a directory holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Mnist,
    Fashion,
    Cifar10,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion" | "fashion-mnist" | "fashion_mnist" => Ok(DatasetKind::Fashion),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            _ => Err(Error::InvalidConfig(format!("unknown dataset {s:?}"))),
        }
    }
}

/// Loads the training or test portion of a dataset stored under `dir` with
/// the standard file names.
pub fn load_standard(kind: DatasetKind, dir: &Path, train: bool) -> Result<Dataset> {
    match kind {
        DatasetKind::Mnist | DatasetKind::Fashion => {
            let prefix = if train { "train" } else { "t10k" };
            load_idx(
                dir.join(format!("{prefix}-images-idx3-ubyte")),
                dir.join(format!("{prefix}-labels-idx1-ubyte")),
            )
        }
        DatasetKind::Cifar10 => {
            let files: Vec<_> = if train {
                (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect()
            } else {
                vec![dir.join("test_batch.bin")]
            };
            load_cifar(&files)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

/// Seeded disjoint index partition; the train side has `ceil(f * n)` entries.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    // tolerate 0.9 * 60000 = 54000.000000000007
    let n_train = ((spec.train_fraction * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let val = idx.split_off(n_train);
    Ok((idx, val))
}

pub fn random_split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(dataset.len(), spec)?;
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

/// Geometric training augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Largest integer shift along each axis; 0 disables shifting.
    pub max_shift: u32,
    pub horizontal_flip: bool,
}

impl Augmentation {
    pub const NONE: Augmentation = Augmentation {
        max_shift: 0,
        horizontal_flip: false,
    };

    pub fn for_dataset(kind: DatasetKind) -> Self {
        Augmentation {
            max_shift: 2,
            horizontal_flip: kind == DatasetKind::Cifar10,
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, image: &Image, rng: &mut R) -> Image {
        let mut out = if self.max_shift > 0 {
            let m = self.max_shift as i32;
            let dx = rng.gen_range(-m..=m);
            let dy = rng.gen_range(-m..=m);
            image.shifted(dx, dy)
        } else {
            image.clone()
        };
        if self.horizontal_flip && rng.gen_bool(0.5) {
            out = out.flipped_horizontally();
        }
        out
    }
}
